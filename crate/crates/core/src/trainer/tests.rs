use super::*;
use crate::datasets::{make_synthetic_clusters, split_identity_sequence};
use crate::network::{build_mlp, checkpoint_bytes, parse_checkpoint};

fn blobs() -> Dataset<f64> {
    make_synthetic_clusters(&mut Rng::new(5), 2, 64, 4, 0.5, 4.0).unwrap()
}

fn mixed() -> Dataset<f64> {
    let base = make_synthetic_clusters(&mut Rng::new(6), 6, 40, 4, 0.8, 3.0).unwrap();
    split_identity_sequence(&base, &mut Rng::new(7), 3, 4, 10).unwrap()
}

fn mlp(seed: u64, input: usize) -> EmbeddingModel<f64> {
    build_mlp(&mut Rng::new(seed), &[input], &[8], 2, WeightInit::Xavier).unwrap()
}

fn dsa_config(iters: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        total_iters: iters,
        lr_drop_iters: vec![iters / 2],
        auxiliary: AuxiliaryKind::Dsa,
        dsa: DsaConfig {
            p: 0.5,
            ..DsaConfig::default()
        },
        seed: 11,
        ..TrainConfig::default()
    }
}

fn train(cfg: TrainConfig, data: &Dataset<f64>) -> Trainer<f64> {
    let mut t = Trainer::new(cfg, mlp(1, data.sample_len()), data.label_space()).unwrap();
    t.run_with_threads(data, 1, |_| Ok(())).unwrap();
    t
}

#[test]
fn lr_schedule_drops_at_configured_iteration() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0), 0.01);
    assert_eq!(cfg.lr_at(13_999), 0.01);
    assert!((cfg.lr_at(14_000) - 0.001).abs() < 1e-18);
    assert!((cfg.lr_at(19_999) - 0.001).abs() < 1e-18);
    let two = TrainConfig {
        lr_drop_iters: vec![10, 20],
        ..TrainConfig::default()
    };
    assert!((two.lr_at(25) - 1e-4).abs() < 1e-18);
}

#[test]
fn invalid_configs_rejected() {
    let bad = [
        TrainConfig {
            base_lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr_drop_iters: vec![20, 10],
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Configuration(_))), "{cfg:?}");
    }
}

#[test]
fn sequence_data_needs_a_consumer() {
    let data = mixed();
    let cfg = TrainConfig {
        joint: JointLossConfig {
            lsr_enabled: false,
            ..JointLossConfig::default()
        },
        total_iters: 1,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg.clone(), mlp(1, 4), data.label_space()).unwrap();
    assert!(matches!(t.run(&data, |_| Ok(())), Err(Error::Configuration(_))));
    // Either label smoothing or an auxiliary loss makes the run legal.
    for cfg in [
        TrainConfig {
            auxiliary: AuxiliaryKind::Center,
            ..cfg.clone()
        },
        TrainConfig {
            joint: JointLossConfig::default(),
            ..cfg
        },
    ] {
        let mut t = Trainer::new(cfg, mlp(1, 4), data.label_space()).unwrap();
        t.run(&data, |_| Ok(())).unwrap();
        assert_eq!(t.iteration(), 1);
    }
}

#[test]
fn zero_iterations_leave_model_unchanged() {
    let data = blobs();
    let model = mlp(3, 4);
    let mut t = Trainer::new(
        TrainConfig {
            total_iters: 0,
            ..TrainConfig::default()
        },
        model.clone(),
        data.label_space(),
    )
    .unwrap();
    t.run(&data, |_| Ok(())).unwrap();
    assert_eq!(t.model(), &model);
    assert!(t.metrics().is_empty());
}

#[test]
fn smoke_run_loss_decreases() {
    let data = blobs();
    let t = train(
        TrainConfig {
            total_iters: 200,
            lr_drop_iters: vec![],
            // Whole-dataset batches, so the curve carries no sampling noise.
            batch_size: 128,
            ..TrainConfig::default()
        },
        &data,
    );
    let means: Vec<f64> = t
        .metrics()
        .chunks(20)
        .map(|c| c.iter().map(|m| m.total_loss).sum::<f64>() / c.len() as f64)
        .collect();
    assert_eq!(means.len(), 10);
    for w in means.windows(2) {
        assert!(w[1] < w[0], "moving average rose: {means:?}");
    }
}

/// Heavy-ball iteration on `f(w) = a w² / 2` has the closed form
/// `w_t = A r1^t + B r2^t` with `r` the roots of `r² - (1 + μ - lr a) r + μ`.
#[test]
fn momentum_matches_heavy_ball_closed_form() {
    let (a, lr, mu, w0) = (1.0f64, 0.1, 0.2, 1.5);
    let s = 1.0 + mu - lr * a;
    let disc = s * s - 4.0 * mu;
    assert!(disc > 0.0);
    let (r1, r2) = ((s + disc.sqrt()) / 2.0, (s - disc.sqrt()) / 2.0);
    // w_1 = w_0 - lr a w_0
    let w1 = w0 * (1.0 - lr * a);
    let big_b = (w1 - r1 * w0) / (r2 - r1);
    let big_a = w0 - big_b;

    let mut w = Tensor::from_vec(&[1], vec![w0]).unwrap();
    let mut v = vec![Tensor::zeros(&[1])];
    for t in 1..=60 {
        let g = w.map(|x| a * x);
        momentum_update(vec![&mut w], &[&g], &mut v, lr, mu, 0.0).unwrap();
        let expect = big_a * r1.powi(t) + big_b * r2.powi(t);
        assert!((w.data()[0] - expect).abs() < 1e-12, "step {t}: {} vs {expect}", w.data()[0]);
    }
}

#[test]
fn weight_decay_adds_to_gradient() {
    let mut w = Tensor::from_vec(&[2], vec![1.0f64, -2.0]).unwrap();
    let g = Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap();
    let mut v = vec![Tensor::zeros(&[2])];
    momentum_update(vec![&mut w], &[&g], &mut v, 0.1, 0.9, 0.01).unwrap();
    assert!((v[0].data()[0] - 0.1 * 0.51).abs() < 1e-15);
    assert!((w.data()[1] - (-2.0 - 0.1 * 0.48)).abs() < 1e-15);
}

#[test]
fn runs_are_bitwise_reproducible() {
    let data = mixed();
    let a = train(dsa_config(30), &data);
    let b = train(dsa_config(30), &data);
    assert_eq!(a.metrics(), b.metrics());
    assert_eq!(a.model(), b.model());
    assert_eq!(a.centers(), b.centers());
    let other = train(
        TrainConfig {
            seed: 12,
            ..dsa_config(30)
        },
        &data,
    );
    assert_ne!(a.metrics(), other.metrics());
}

#[test]
fn prefetch_preserves_batch_order() {
    let data = mixed();
    let serial = train(dsa_config(25), &data);
    let mut t = Trainer::new(dsa_config(25), mlp(1, 4), data.label_space()).unwrap();
    t.run_with_threads(&data, 3, |_| Ok(())).unwrap();
    assert_eq!(t.metrics(), serial.metrics());
    assert_eq!(t.model(), serial.model());
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    for (aux, mode, chief) in [
        (AuxiliaryKind::Dsa, DistanceMode::Euclidean, ChiefKind::Softmax),
        (AuxiliaryKind::Dsa, DistanceMode::Angular, ChiefKind::AngularMargin),
        (AuxiliaryKind::Center, DistanceMode::Euclidean, ChiefKind::Softmax),
    ] {
        let data = mixed();
        let cfg = TrainConfig {
            auxiliary: aux,
            chief,
            dsa: DsaConfig {
                mode,
                p: 0.5,
                ..DsaConfig::default()
            },
            ..dsa_config(40)
        };
        let full = train(cfg.clone(), &data);

        let mut first = Trainer::new(cfg.clone(), mlp(1, 4), data.label_space()).unwrap();
        let mut saved = None;
        first
            .run_with_threads(&data, 1, |t| {
                if t.iteration() == 17 {
                    saved = Some(checkpoint_bytes(&t.to_checkpoint()));
                }
                Ok(())
            })
            .unwrap();
        let ckpt = parse_checkpoint::<f64>(&saved.unwrap()).unwrap();
        let mut resumed = Trainer::from_checkpoint(cfg, data.label_space(), ckpt).unwrap();
        assert_eq!(resumed.iteration(), 17);
        resumed.run_with_threads(&data, 1, |_| Ok(())).unwrap();
        assert_eq!(resumed.metrics(), full.metrics());
        assert_eq!(resumed.model(), full.model());
        assert_eq!(resumed.head(), full.head());
        assert_eq!(resumed.centers(), full.centers());
        assert_eq!(checkpoint_bytes(&resumed.to_checkpoint()), checkpoint_bytes(&full.to_checkpoint()));
    }
}

#[test]
fn checkpoint_from_other_setup_rejected() {
    let data = mixed();
    let t = train(dsa_config(3), &data);
    let ckpt = t.to_checkpoint();
    let no_aux = TrainConfig {
        auxiliary: AuxiliaryKind::None,
        ..dsa_config(3)
    };
    assert!(Trainer::from_checkpoint(no_aux, data.label_space(), ckpt.clone()).is_err());
    let other_space = LabelSpace::new(3, 99).unwrap();
    assert!(Trainer::from_checkpoint(dsa_config(3), other_space, ckpt).is_err());
}

#[test]
fn metrics_csv_layout() {
    let data = blobs();
    let t = train(
        TrainConfig {
            total_iters: 3,
            ..TrainConfig::default()
        },
        &data,
    );
    let csv = metrics_csv(t.metrics());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iteration,lr,chief_loss,aux_loss,total_loss");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,0.01,"));
    assert!(lines[3].starts_with("2,"));
}

#[test]
fn train_state_round_trip() {
    let data = mixed();
    let t = train(dsa_config(5), &data);
    let bytes = t.state().to_bytes();
    let back = TrainState::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(&back, t.state());
    assert!(TrainState::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn gradcheck_linear_center_is_tight() {
    let case = GradcheckCase {
        arch: GradcheckArch::Linear,
        chief: ChiefKind::Softmax,
        lsr: false,
        auxiliary: AuxiliaryKind::Center,
        mode: DistanceMode::Euclidean,
        p: 1.0,
        with_sequences: false,
        batch: 5,
        seed: 3,
    };
    let t = gradcheck_case(&case, &GradcheckConfig::default()).unwrap();
    assert!(t.max_rel_error < 1e-6, "{}", t.max_rel_error);
    assert!(t.checked > 0);
}

#[test]
fn gradcheck_lenetpp_lsr_dsa_two_samples() {
    let case = GradcheckCase {
        arch: GradcheckArch::LeNetpp,
        chief: ChiefKind::Softmax,
        lsr: true,
        auxiliary: AuxiliaryKind::Dsa,
        mode: DistanceMode::Euclidean,
        p: 1.0,
        with_sequences: true,
        batch: 2,
        seed: 4,
    };
    let t = gradcheck_case(&case, &GradcheckConfig::default()).unwrap();
    assert!(t.max_rel_error < 1e-4, "{}", t.max_rel_error);
}

#[test]
fn gradcheck_report_is_deterministic() {
    let cfg = GradcheckConfig::default();
    let a = gradcheck(&cfg, 12).unwrap();
    let b = gradcheck(&cfg, 12).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trials.len(), 12);
    assert!(a.max_rel_error < 1e-4, "{}", a.to_text());
    let empty = gradcheck(&cfg, 0).unwrap();
    assert!(empty.trials.is_empty());
    assert_eq!(empty.max_rel_error, 0.0);
}
