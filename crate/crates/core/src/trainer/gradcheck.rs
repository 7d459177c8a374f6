//! End-to-end finite-difference checks of the training objective.

use std::fmt::Write as _;

use super::{AuxiliaryKind, ChiefKind, Objective, TrainConfig};
use crate::datasets::{LabelSpace, Source};
use crate::error::Result;
use crate::losses::{
    sample_candidates, AngularMarginConfig, AngularMarginHead, CenterTable, ClassifierHead, DistanceMode, DsaConfig,
    LinearHead,
};
use crate::network::{build_mlp, lenetpp_specs, EmbeddingModel, LayerSpec, WeightInit};
use crate::numerics::{finite_difference_entries, relative_error, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradcheckArch {
    /// A single fully-connected layer.
    Linear,
    Mlp,
    /// Convolution, PReLU, max-pool and a projection on 8×8×2 inputs.
    SmallConv,
    /// The full 28×28 LeNet++ network.
    LeNetpp,
}

/// One randomized objective to differentiate.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckCase {
    pub arch: GradcheckArch,
    pub chief: ChiefKind,
    pub lsr: bool,
    pub auxiliary: AuxiliaryKind,
    pub mode: DistanceMode,
    pub p: f64,
    /// Whether the batch contains sequence samples.
    pub with_sequences: bool,
    pub batch: usize,
    pub seed: u64,
}

impl GradcheckCase {
    pub fn describe(&self) -> String {
        let aux = match self.auxiliary {
            AuxiliaryKind::None => "none".to_string(),
            AuxiliaryKind::Center => "center".to_string(),
            AuxiliaryKind::Dsa => format!("dsa-{}", self.mode.name()),
        };
        let chief = match self.chief {
            ChiefKind::Softmax => "softmax",
            ChiefKind::AngularMargin => "angular-margin",
        };
        format!(
            "{:?} chief={chief}{} aux={aux} sequences={} p={} batch={}",
            self.arch,
            if self.lsr { "+lsr" } else { "" },
            self.with_sequences,
            self.p,
            self.batch
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckTrial {
    pub case: GradcheckCase,
    /// Parameter entries compared.
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub trials: Vec<GradcheckTrial>,
    /// Worst trial; 0 when there are no trials.
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.trials.iter().enumerate() {
            let _ = writeln!(s, "trial {i:3}: rel_err={:.3e} entries={} {}", t.max_rel_error, t.checked, t.case.describe());
        }
        let _ = writeln!(s, "trials: {}  max relative error: {:.3e}", self.trials.len(), self.max_rel_error);
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Central-difference step.
    pub h: f64,
    /// Random entries probed in each parameter tensor.
    pub entries_per_tensor: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            h: 1e-5,
            entries_per_tensor: 6,
        }
    }
}

/// Trial `index` of the standard sweep. Loss family, presence of sequence
/// samples and the sampling probability cycle through every combination; the
/// rest is drawn from `rng`.
pub fn sweep_case(index: usize, rng: &mut Rng) -> GradcheckCase {
    let family = index % 5;
    let with_sequences = (index / 5) % 2 == 1;
    let p = if (index / 10).is_multiple_of(2) { 1.0 } else { 0.3 };
    let arch = if index % 25 == 24 {
        GradcheckArch::LeNetpp
    } else {
        [GradcheckArch::Linear, GradcheckArch::Mlp, GradcheckArch::SmallConv][rng.below(3)]
    };
    let (chief, auxiliary, mode) = match family {
        0 => (ChiefKind::Softmax, AuxiliaryKind::None, DistanceMode::Euclidean),
        1 => (ChiefKind::Softmax, AuxiliaryKind::Center, DistanceMode::Euclidean),
        2 => (ChiefKind::Softmax, AuxiliaryKind::Dsa, DistanceMode::Euclidean),
        3 => (ChiefKind::Softmax, AuxiliaryKind::Dsa, DistanceMode::Angular),
        _ => {
            let aux = [AuxiliaryKind::None, AuxiliaryKind::Center, AuxiliaryKind::Dsa][rng.below(3)];
            let mode = [DistanceMode::Euclidean, DistanceMode::Angular][rng.below(2)];
            (ChiefKind::AngularMargin, aux, mode)
        }
    };
    let lsr = family == 0 || (with_sequences && auxiliary == AuxiliaryKind::None) || rng.below(2) == 0;
    let batch = if arch == GradcheckArch::LeNetpp { 2 } else { 2 + rng.below(5) };
    GradcheckCase {
        arch,
        chief,
        lsr,
        auxiliary,
        mode,
        p,
        with_sequences,
        batch,
        seed: rng.next_u64(),
    }
}

/// Runs `trials` cases of the standard sweep.
pub fn gradcheck(cfg: &GradcheckConfig, trials: usize) -> Result<GradcheckReport> {
    let mut rng = Rng::new(cfg.seed);
    let mut report = GradcheckReport::default();
    for i in 0..trials {
        let case = sweep_case(i, &mut rng);
        let trial = gradcheck_case(&case, cfg)?;
        report.max_rel_error = report.max_rel_error.max(trial.max_rel_error);
        report.trials.push(trial);
    }
    Ok(report)
}

fn build_model(case: &GradcheckCase, dim: usize, rng: &mut Rng) -> Result<EmbeddingModel<f64>> {
    match case.arch {
        GradcheckArch::Linear => EmbeddingModel::new(&[4], &[LayerSpec::fc(dim)], WeightInit::Xavier, rng),
        GradcheckArch::Mlp => build_mlp(rng, &[5], &[6], dim, WeightInit::Xavier),
        GradcheckArch::SmallConv => {
            let specs = [
                LayerSpec::Conv {
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::PRelu,
                LayerSpec::pool2(),
                LayerSpec::fc(dim),
            ];
            EmbeddingModel::new(&[8, 8, 2], &specs, WeightInit::Xavier, rng)
        }
        GradcheckArch::LeNetpp => EmbeddingModel::new(&[28, 28, 1], &lenetpp_specs(2), WeightInit::Xavier, rng),
    }
}

/// Compares analytic parameter gradients of the full objective (model and
/// head) against central differences on randomly chosen entries.
pub fn gradcheck_case(case: &GradcheckCase, cfg: &GradcheckConfig) -> Result<GradcheckTrial> {
    let mut rng = Rng::new(case.seed);
    let dim = if case.arch == GradcheckArch::LeNetpp { 2 } else { 2 + rng.below(3) };
    let classes = 2 + rng.below(3);
    let space = LabelSpace::new(classes, if case.with_sequences { 2 } else { 0 })?;
    let mut model = build_model(case, dim, &mut rng)?;

    let mut labels = Vec::with_capacity(case.batch);
    let mut sources = Vec::with_capacity(case.batch);
    for k in 0..case.batch {
        // With sequences, the first sample is always a sequence sample.
        if case.with_sequences && (k == 0 || rng.below(2) == 0) {
            labels.push(classes + rng.below(2));
            sources.push(Source::Sequence);
        } else {
            labels.push(rng.below(classes));
            sources.push(Source::Identity);
        }
    }
    let mut shape = vec![case.batch];
    shape.extend_from_slice(model.input_shape());
    let images = Tensor::from_fn(&shape, |_| rng.normal());

    let mut head = match case.chief {
        ChiefKind::Softmax => {
            let mut h = LinearHead::new(dim, classes, WeightInit::Xavier, &mut rng)?;
            h.bias = Tensor::from_fn(&[classes], |_| 0.1 * rng.normal());
            ClassifierHead::Linear(h)
        }
        ChiefKind::AngularMargin => {
            let config = AngularMarginConfig {
                anneal: [0.0, 5.0, 100.0][rng.below(3)],
                ..AngularMarginConfig::default()
            };
            ClassifierHead::AngularMargin(AngularMarginHead::new(dim, classes, config, &mut rng)?)
        }
    };

    let mode = if case.auxiliary == AuxiliaryKind::Dsa { case.mode } else { DistanceMode::Euclidean };
    let centers = match mode {
        DistanceMode::Euclidean => CenterTable::from_tensor(
            Tensor::from_fn(&[space.total(), dim], |_| rng.normal()),
            DistanceMode::Euclidean,
            0.5,
        )?,
        DistanceMode::Angular => CenterTable::new(space.total(), dim, DistanceMode::Angular, 0.5, &mut rng)?,
    };
    let tc = TrainConfig {
        chief: case.chief,
        auxiliary: case.auxiliary,
        joint: crate::losses::JointLossConfig {
            eta: 0.04 + rng.uniform(),
            lsr_enabled: case.lsr,
        },
        dsa: DsaConfig {
            lambda: rng.uniform(),
            p: case.p,
            mode,
            ..DsaConfig::default()
        },
        ..TrainConfig::default()
    };
    let mask = sample_candidates(&labels, &sources, space, case.p, &mut rng)?;
    let objective = Objective {
        cfg: &tc,
        centers: Some(&centers),
        mask: Some(&mask),
    };

    let base = objective.evaluate(&model, &head, &images, &labels, &sources)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();

    let n_model = model.params().len();
    let grads: Vec<Tensor<f64>> = base.model_grads.iter().chain(&base.head_grads).cloned().collect();
    for (ti, grad) in grads.iter().enumerate() {
        let picks: Vec<usize> = (0..cfg.entries_per_tensor.min(grad.len())).map(|_| rng.below(grad.len())).collect();
        let current = if ti < n_model { model.params()[ti].clone() } else { head.params()[ti - n_model].clone() };
        let fd = finite_difference_entries(
            |probe| {
                if ti < n_model {
                    let saved = std::mem::replace(model.params_mut()[ti], probe.clone());
                    let out = objective.evaluate(&model, &head, &images, &labels, &sources);
                    *model.params_mut()[ti] = saved;
                    Ok(out?.total_loss)
                } else {
                    let saved = std::mem::replace(head.params_mut()[ti - n_model], probe.clone());
                    let out = objective.evaluate(&model, &head, &images, &labels, &sources);
                    *head.params_mut()[ti - n_model] = saved;
                    Ok(out?.total_loss)
                }
            },
            &current,
            cfg.h,
            &picks,
        )?;
        analytic.extend(picks.iter().map(|&i| grad.data()[i]));
        numeric.extend(fd);
    }
    Ok(GradcheckTrial {
        case: case.clone(),
        checked: analytic.len(),
        max_rel_error: relative_error(&analytic, &numeric),
    })
}
