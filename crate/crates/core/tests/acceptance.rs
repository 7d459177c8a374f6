//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Environment:
//! - `SEQEMBED_MNIST_DIR`: directory with the four MNIST IDX files
//!   (default `<workspace>/data/mnist`).
//! - `SEQEMBED_ACCEPTANCE_PROFILE`: `reduced` (default) or `full` MNIST schedule.
//! - `SEQEMBED_ACCEPTANCE_ONLY`: comma-separated criterion numbers to run.
//!
//! The process exits 0 once every criterion has been evaluated; failures are
//! reported on their lines and in the closing summary.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use seqembed::config::{load_config, Architecture, DataSource, ExperimentConfig, ModelConfig};
use seqembed::datasets::{load_idx, split_identity_sequence, Sample};
use seqembed::eval::{cluster_report, embed_dataset, make_pairs, test_accuracy, verification_accuracy};
use seqembed::losses::{
    center_loss, cross_entropy, dsa_loss, dsa_loss_with_mask, lsr_cross_entropy, sample_candidates,
    AngularMarginConfig, AngularMarginHead, CenterTable, ClassifierHead,
};
use seqembed::network::{checkpoint_bytes, parse_checkpoint, WeightInit};
use seqembed::trainer::{
    gradcheck, metrics_csv, AuxiliaryKind, ChiefKind, GradcheckConfig, TrainConfig, Trainer,
};
use seqembed::{Dataset, DistanceMode, DsaConfig, LabelSpace, Rng, Scalar, Source, Tensor};

type Outcome = Result<(bool, String), String>;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("SEQEMBED_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("data/mnist"))
}

fn mnist<T: Scalar>(train: bool) -> Result<Dataset<T>, String> {
    let dir = mnist_dir();
    let stem = if train { "train" } else { "t10k" };
    let images = dir.join(format!("{stem}-images-idx3-ubyte"));
    let labels = dir.join(format!("{stem}-labels-idx1-ubyte"));
    load_idx(&images, &labels).map_err(|e| format!("MNIST unavailable ({e}); set SEQEMBED_MNIST_DIR"))
}

fn minutes(d: Duration) -> String {
    format!("{:.1} min", d.as_secs_f64() / 60.0)
}

struct Suite {
    only: Option<Vec<String>>,
    passed: usize,
    failed: Vec<String>,
}

impl Suite {
    fn run(&mut self, id: &str, name: &str, f: impl FnOnce() -> Outcome) {
        let top = id.split('.').next().unwrap_or(id);
        if let Some(only) = &self.only {
            if !only.iter().any(|o| o == top) {
                println!("SKIP C{id} {name}");
                return;
            }
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (ok, detail) = match outcome {
            Ok(r) => r,
            Err(e) => (false, e),
        };
        let secs = start.elapsed().as_secs_f64();
        println!("{} C{id} {name}: {detail} [{secs:.1}s]", if ok { "PASS" } else { "FAIL" });
        if ok {
            self.passed += 1;
        } else {
            self.failed.push(format!("C{id}"));
        }
    }

    /// Records a runtime budget as its own line.
    fn budget(&mut self, id: &str, name: &str, elapsed: Option<Duration>, limit: Duration) {
        if let Some(e) = elapsed {
            self.run(id, name, || {
                Ok((e <= limit, format!("took {} against a budget of {}", minutes(e), minutes(limit))))
            });
        }
    }
}

fn main() {
    let only = std::env::var("SEQEMBED_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|p| p.trim().trim_start_matches('C').to_string()).collect());
    let mut suite = Suite {
        only,
        passed: 0,
        failed: Vec::new(),
    };

    suite.run("1", "gradient oracle suite (50 randomized configurations)", gradient_oracle);
    suite.run("2", "algebraic reductions", algebraic_reductions);
    suite.run("3", "Bernoulli sampling is unbiased", bernoulli_unbiased);

    let mut c4_time = None;
    suite.run("4", "MNIST 2-D features: DSA matches softmax accuracy and separates clusters", || {
        let start = Instant::now();
        let r = mnist_features();
        c4_time = Some(start.elapsed());
        r
    });
    let profile = std::env::var("SEQEMBED_ACCEPTANCE_PROFILE").unwrap_or_else(|_| "reduced".into());
    let c4_limit = if profile == "full" { 180.0 } else { 30.0 };
    suite.budget("4.runtime", "MNIST profile runtime", c4_time, Duration::from_secs_f64(c4_limit * 60.0));

    let mut c5_time = None;
    suite.run("5", "sequence data improves verification (5 identity + 5 sequence classes)", || {
        let start = Instant::now();
        let r = sequence_ablation();
        c5_time = Some(start.elapsed());
        r
    });
    suite.budget("5.runtime", "ablation runtime", c5_time, Duration::from_secs(30 * 60));

    suite.run("6", "deterministic runs and exact resume", determinism_and_resume);
    suite.run("7", "sequence samples ignore other sequence centers", asymmetric_selection);

    println!(
        "acceptance summary: {} passed, {} failed{}",
        suite.passed,
        suite.failed.len(),
        if suite.failed.is_empty() { String::new() } else { format!(" ({})", suite.failed.join(", ")) }
    );
}

// 1 -----------------------------------------------------------------------

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let report = gradcheck(&GradcheckConfig::default(), 50).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut combos = std::collections::BTreeSet::new();
    for t in &report.trials {
        let family = match (t.case.chief, t.case.auxiliary, t.case.mode) {
            (ChiefKind::AngularMargin, _, _) => "angular-margin",
            (_, AuxiliaryKind::None, _) => "softmax-lsr",
            (_, AuxiliaryKind::Center, _) => "center",
            (_, AuxiliaryKind::Dsa, DistanceMode::Euclidean) => "dsa-euclidean",
            (_, AuxiliaryKind::Dsa, DistanceMode::Angular) => "dsa-angular",
        };
        combos.insert((family, t.case.with_sequences, t.case.p.to_bits()));
    }
    let ok = report.max_rel_error < 1e-4 && combos.len() == 20 && elapsed < Duration::from_secs(300);
    if !ok {
        eprint!("{}", report.to_text());
    }
    Ok((
        ok,
        format!(
            "max relative error {:.2e} over {} trials covering {}/20 family x Z x p cells, {:.0}s",
            report.max_rel_error,
            report.trials.len(),
            combos.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

// 2 -----------------------------------------------------------------------

fn algebraic_reductions() -> Outcome {
    let mut rng = Rng::new(21);
    let e = |err: seqembed::Error| err.to_string();

    // λ = 1 euclidean DSA is the center loss scaled by 1/(2K).
    let space = LabelSpace::new(4, 3).map_err(e)?;
    let k = 9;
    let feats = Tensor::from_fn(&[k, 3], |_| rng.normal());
    let labels: Vec<usize> = (0..k).map(|i| i % 7).collect();
    let sources: Vec<Source> = labels.iter().map(|&y| space.source_of(y).unwrap()).collect();
    let centers = CenterTable::from_tensor(Tensor::from_fn(&[7, 3], |_| rng.normal()), DistanceMode::Euclidean, 0.5)
        .map_err(e)?;
    let cfg = DsaConfig {
        lambda: 1.0,
        ..DsaConfig::default()
    };
    let dsa = dsa_loss(&feats, &labels, &sources, space, &centers, &cfg, &mut rng).map_err(e)?;
    let center = center_loss(&feats, &labels, &centers).map_err(e)?;
    let reduced = center.loss / (2.0 * k as f64);
    let gap_dsa = (dsa.loss - reduced).abs();
    let gap_grad = dsa
        .grad
        .data()
        .iter()
        .zip(center.grad.data())
        .map(|(a, b)| (a - b / (2.0 * k as f64)).abs())
        .fold(0.0, f64::max);

    // Identity-only batches: LSR cross-entropy is plain cross-entropy, bit for bit.
    let logits = Tensor::from_fn(&[k, 5], |_| 3.0 * rng.normal());
    let ids: Vec<usize> = (0..k).map(|i| i % 5).collect();
    let z0 = vec![Source::Identity; k];
    let lsr = lsr_cross_entropy(&logits, &ids, &z0).map_err(e)?;
    let ce = cross_entropy(&logits, &ids, &z0).map_err(e)?;
    let bit_exact = lsr.loss.to_bits() == ce.loss.to_bits()
        && lsr.grad.data().iter().zip(ce.grad.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    // m = 1: the margin head reduces to scaled normalized logits.
    let head = AngularMarginHead::new(
        3,
        5,
        AngularMarginConfig {
            delta: 32.0,
            m: 1,
            anneal: 0.0,
        },
        &mut rng,
    )
    .map_err(e)?;
    let w = head.weight.clone();
    let head = ClassifierHead::AngularMargin(head);
    let out = head.forward(&feats, &ids, &z0).map_err(e)?;
    let mut gap_margin = 0.0f64;
    for r in 0..k {
        let x = feats.row(r);
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..5 {
            let wc = w.row(c);
            let nw = wc.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = x.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>() / (nx * nw);
            gap_margin = gap_margin.max((out.at(r, c) - 32.0 * cos).abs());
        }
    }
    let ok = gap_dsa < 1e-12 && gap_grad < 1e-12 && bit_exact && gap_margin < 1e-12;
    Ok((
        ok,
        format!(
            "DSA(λ=1) vs center/(2K): {gap_dsa:.1e} (grad {gap_grad:.1e}); LSR == CE on identity data: {bit_exact}; m=1 head vs δ·cos: {gap_margin:.1e}"
        ),
    ))
}

// 3 -----------------------------------------------------------------------

fn bernoulli_unbiased() -> Outcome {
    let start = Instant::now();
    let e = |err: seqembed::Error| err.to_string();
    let mut rng = Rng::new(31);
    let space = LabelSpace::new(6, 4).map_err(e)?;
    let labels = vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 2, 7];
    let sources: Vec<Source> = labels.iter().map(|&y| space.source_of(y).unwrap()).collect();
    let feats = Tensor::from_fn(&[labels.len(), 2], |_| 0.6 * rng.normal());
    let centers =
        CenterTable::from_tensor(Tensor::from_fn(&[10, 2], |_| 0.6 * rng.normal()), DistanceMode::Euclidean, 0.5)
            .map_err(e)?;
    // λ = 0 leaves only the inter-center term.
    let full_cfg = DsaConfig {
        lambda: 0.0,
        p: 1.0,
        ..DsaConfig::default()
    };
    let full = dsa_loss(&feats, &labels, &sources, space, &centers, &full_cfg, &mut rng)
        .map_err(e)?
        .loss;
    let cfg = DsaConfig { p: 0.1, ..full_cfg };
    let draws = 10_000;
    let mut sum = 0.0;
    for _ in 0..draws {
        let mask = sample_candidates(&labels, &sources, space, cfg.p, &mut rng).map_err(e)?;
        sum += dsa_loss_with_mask(&feats, &labels, &centers, &cfg, &mask).map_err(e)?.loss;
    }
    let mean = sum / draws as f64;
    let rel = (mean - full).abs() / full.abs();
    let elapsed = start.elapsed();
    Ok((
        rel < 0.02 && full > 0.0 && elapsed < Duration::from_secs(60),
        format!("sampled mean {mean:.5} vs full {full:.5} (relative gap {:.3}%), {:.1}s", 100.0 * rel, elapsed.as_secs_f64()),
    ))
}

// 4 -----------------------------------------------------------------------

struct FeatureRun {
    name: &'static str,
    accuracy: f64,
    fisher: f64,
    /// Diagnostic only: the same ratio on unit-normalized features.
    unit_fisher: f64,
}

fn with_mnist_paths(mut cfg: ExperimentConfig) -> ExperimentConfig {
    let dir = mnist_dir();
    cfg.train_data = Some(DataSource::Idx {
        images: dir.join("train-images-idx3-ubyte"),
        labels: dir.join("train-labels-idx1-ubyte"),
    });
    cfg.test_data = Some(DataSource::Idx {
        images: dir.join("t10k-images-idx3-ubyte"),
        labels: dir.join("t10k-labels-idx1-ubyte"),
    });
    cfg
}

fn train_and_score<T: Scalar>(
    cfg: &ExperimentConfig,
    train: &Dataset<f64>,
    test: &Dataset<f64>,
) -> Result<(f64, f64, f64), String> {
    let e = |err: seqembed::Error| err.to_string();
    let train: Dataset<T> = train.cast();
    let test: Dataset<T> = test.cast();
    let model = cfg.model.build::<T>(train.sample_shape(), cfg.train.seed).map_err(e)?;
    let mut trainer = Trainer::new(cfg.train.clone(), model, train.label_space()).map_err(e)?;
    let start = Instant::now();
    trainer
        .run(&train, |t| {
            if t.iteration() % 1000 == 0 {
                let m = t.metrics();
                let w = &m[m.len().saturating_sub(100)..];
                let avg = w.iter().map(|r| r.total_loss).sum::<f64>() / w.len() as f64;
                eprintln!("  iter {} loss {avg:.4} ({:.0}s)", t.iteration(), start.elapsed().as_secs_f64());
            }
            Ok(())
        })
        .map_err(e)?;
    let accuracy = test_accuracy(trainer.model(), trainer.head(), &test).map_err(e)?;
    let feats = embed_dataset(trainer.model(), &test).map_err(e)?;
    let report = cluster_report(&feats, test.labels()).map_err(e)?;
    let mut unit = Tensor::from_fn(feats.shape(), |i| feats.data()[i].as_f64());
    for r in 0..unit.rows() {
        let row = unit.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    let unit_report = cluster_report(&unit, test.labels()).map_err(e)?;
    Ok((accuracy, report.fisher_ratio, unit_report.fisher_ratio))
}

fn mnist_features() -> Outcome {
    let profile = std::env::var("SEQEMBED_ACCEPTANCE_PROFILE").unwrap_or_else(|_| "reduced".into());
    let prefix = match profile.as_str() {
        "reduced" => "mnist_reduced",
        "full" => "mnist",
        other => return Err(format!("unknown profile {other:?}")),
    };
    let train = mnist::<f64>(true)?;
    let test = mnist::<f64>(false)?;
    let mut runs = Vec::new();
    for name in ["softmax", "center", "dsa_euclidean", "dsa_angular"] {
        let path = workspace().join(format!("configs/{prefix}_{name}.cfg"));
        let cfg = with_mnist_paths(load_config(&path).map_err(|e| e.to_string())?);
        eprintln!("C4: training {}", path.display());
        let (accuracy, fisher, unit_fisher) = match cfg.model.precision {
            seqembed::config::Precision::F32 => train_and_score::<f32>(&cfg, &train, &test)?,
            seqembed::config::Precision::F64 => train_and_score::<f64>(&cfg, &train, &test)?,
        };
        eprintln!("C4: {name}: accuracy {accuracy:.4} fisher {fisher:.3} unit-normalized fisher {unit_fisher:.3}");
        runs.push(FeatureRun {
            name,
            accuracy,
            fisher,
            unit_fisher,
        });
    }
    let base = &runs[0];
    let mut ok = true;
    let mut parts = vec![format!("profile {profile}")];
    for r in &runs {
        let dsa = r.name.starts_with("dsa");
        let acc_ok = r.accuracy >= base.accuracy - 0.003;
        let fisher_ok = r.fisher >= 1.5 * base.fisher;
        if dsa {
            ok &= acc_ok && fisher_ok;
        }
        parts.push(format!(
            "{}: acc {:.2}% fisher {:.3}{} [unit-normalized fisher {:.3}, not scored]",
            r.name,
            100.0 * r.accuracy,
            r.fisher,
            if dsa { format!(" ({:.2}x baseline)", r.fisher / base.fisher) } else { String::new() },
            r.unit_fisher
        ));
    }
    Ok((ok, parts.join("; ")))
}

// 5 -----------------------------------------------------------------------

/// Shared budget and model for both arms of the ablation.
fn ablation_config(sequence_arm: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        model: ModelConfig {
            arch: Architecture::Mlp { hidden: vec![256, 128] },
            embedding_dim: 16,
            init: WeightInit::Xavier,
            precision: seqembed::config::Precision::F32,
        },
        ..ExperimentConfig::default()
    };
    cfg.train = TrainConfig {
        total_iters: 6000,
        lr_drop_iters: vec![4000],
        seed: 5,
        ..TrainConfig::default()
    };
    if sequence_arm {
        cfg.train.auxiliary = AuxiliaryKind::Dsa;
        cfg.train.dsa.mode = DistanceMode::Angular;
    }
    cfg
}

fn sequence_ablation() -> Outcome {
    let e = |err: seqembed::Error| err.to_string();
    let train = mnist::<f32>(true)?;
    let test = mnist::<f32>(false)?;
    let split = split_identity_sequence(&train, &mut Rng::new(51), 5, 5, 20).map_err(e)?;
    let identity_only = split.identity_only();
    let pairs = make_pairs(test.true_classes(), 6000, &mut Rng::new(52)).map_err(e)?;

    let mut scores = Vec::new();
    for (arm, data) in [(false, &identity_only), (true, &split)] {
        let cfg = ablation_config(arm);
        let model = cfg.model.build::<f32>(data.sample_shape(), cfg.train.seed).map_err(e)?;
        let mut trainer = Trainer::new(cfg.train.clone(), model, data.label_space()).map_err(e)?;
        trainer.run(data, |_| Ok(())).map_err(e)?;
        let feats = embed_dataset(trainer.model(), &test).map_err(e)?;
        let v = verification_accuracy(&feats, &pairs, 10).map_err(e)?;
        scores.push(v.accuracy);
    }
    let gain = 100.0 * (scores[1] - scores[0]);
    Ok((
        gain >= 1.0,
        format!(
            "identity-only {:.2}% vs LSR+DSA with sequences {:.2}% ({gain:+.2} points; {} sequences)",
            100.0 * scores[0],
            100.0 * scores[1],
            split.label_space().num_sequences()
        ),
    ))
}

// 6 -----------------------------------------------------------------------

fn determinism_and_resume() -> Outcome {
    let e = |err: seqembed::Error| err.to_string();
    // 28×28 synthetic images drive the convolutional network.
    let mut rng = Rng::new(61);
    let base = seqembed::datasets::make_synthetic_clusters::<f64>(&mut rng, 6, 20, 784, 0.5, 3.0).map_err(e)?;
    let images = Dataset::from_samples(
        &[28, 28, 1],
        base.label_space(),
        base.iter().map(|s| Sample {
            image: Tensor::from_vec(&[28, 28, 1], s.image.to_vec()).unwrap(),
            label: s.label,
            source: s.source,
            true_class: s.true_class,
        }),
    )
    .map_err(e)?;
    let data = split_identity_sequence(&images, &mut Rng::new(62), 3, 3, 6).map_err(e)?;
    let cfg = TrainConfig {
        batch_size: 8,
        total_iters: 16,
        lr_drop_iters: vec![8],
        auxiliary: AuxiliaryKind::Dsa,
        dsa: DsaConfig {
            p: 0.5,
            ..DsaConfig::default()
        },
        seed: 63,
        ..TrainConfig::default()
    };
    let model_cfg = ModelConfig {
        init: WeightInit::Xavier,
        ..ModelConfig::default()
    };
    let run = |resume_at: Option<u64>| -> Result<(String, Vec<u8>), String> {
        let model = model_cfg.build::<f64>(data.sample_shape(), cfg.seed).map_err(e)?;
        let mut t = Trainer::new(cfg.clone(), model, data.label_space()).map_err(e)?;
        let mut saved = None;
        t.run(&data, |t| {
            if Some(t.iteration()) == resume_at {
                saved = Some(checkpoint_bytes(&t.to_checkpoint()));
            }
            Ok(())
        })
        .map_err(e)?;
        if let Some(bytes) = saved {
            let ckpt = parse_checkpoint::<f64>(&bytes).map_err(e)?;
            t = Trainer::from_checkpoint(cfg.clone(), data.label_space(), ckpt).map_err(e)?;
            t.run(&data, |_| Ok(())).map_err(e)?;
        }
        Ok((metrics_csv(t.metrics()), checkpoint_bytes(&t.to_checkpoint())))
    };
    let (csv_a, ck_a) = run(None)?;
    let (csv_b, ck_b) = run(None)?;
    let (csv_r, ck_r) = run(Some(7))?;
    let same_runs = csv_a == csv_b && ck_a == ck_b;
    let resumed = csv_a == csv_r && ck_a == ck_r;
    Ok((
        same_runs && resumed && csv_a.lines().count() == 17,
        format!("identical seeded runs byte-equal: {same_runs}; resume at iteration 7 reproduces metrics and final checkpoint: {resumed}"),
    ))
}

// 7 -----------------------------------------------------------------------

fn asymmetric_selection() -> Outcome {
    let e = |err: seqembed::Error| err.to_string();
    let space = LabelSpace::new(3, 2).map_err(e)?;
    // One sequence sample of sequence 3, close to its own center, with every
    // identity center within hinge range.
    let feats = Tensor::from_rows(&[vec![0.1, 0.2]]).map_err(e)?;
    let labels = [3];
    let sources = [Source::Sequence];
    let table = Tensor::from_rows(&[
        vec![0.5, 0.0],
        vec![-0.4, 0.3],
        vec![0.0, -0.6],
        vec![0.0, 0.1],
        vec![0.3, 0.3],
    ])
    .map_err(e)?;
    let cfg = DsaConfig::default();
    let loss = |t: &Tensor<f64>| -> Result<f64, String> {
        let centers = CenterTable::from_tensor(t.clone(), DistanceMode::Euclidean, 0.5).map_err(e)?;
        Ok(dsa_loss(&feats, &labels, &sources, space, &centers, &cfg, &mut Rng::new(0)).map_err(e)?.loss)
    };
    let base = loss(&table)?;
    let mut moved = table.clone();
    moved.row_mut(4)[0] += 0.05;
    moved.row_mut(4)[1] -= 0.2;
    let other_seq = (loss(&moved)? - base).abs();
    let mut identity_changes = Vec::new();
    for c in 0..3 {
        let mut t = table.clone();
        t.row_mut(c)[0] += 0.05;
        identity_changes.push((loss(&t)? - base).abs());
    }
    let ok = other_seq == 0.0 && identity_changes.iter().all(|&d| d > 0.0);
    Ok((
        ok,
        format!(
            "other sequence center: change {other_seq:e}; identity centers: changes {:?}",
            identity_changes.iter().map(|d| format!("{d:.2e}")).collect::<Vec<_>>()
        ),
    ))
}
