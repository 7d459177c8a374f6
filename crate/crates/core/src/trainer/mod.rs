//! Joint training: a chief classifier loss plus an optional center or DSA
//! auxiliary loss, optimized with momentum SGD and a step learning-rate schedule.

mod gradcheck;
mod state;

pub use gradcheck::{
    gradcheck, gradcheck_case, sweep_case, GradcheckArch, GradcheckCase, GradcheckConfig, GradcheckReport, GradcheckTrial,
};
pub use state::{metrics_csv, write_metrics_csv, MetricRow, TrainState, METRICS_HEADER};

use std::sync::mpsc;

use crate::datasets::{iterate_batches, BatchCursor, BatchPlan, Dataset, LabelSpace, SampleBatch, Source};
use crate::error::{bail, Error, Result};
use crate::losses::{
    center_loss, center_update, cross_entropy, dsa_center_update, dsa_loss_with_mask, joint_loss, lsr_cross_entropy,
    sample_candidates, AngularMarginConfig, AngularMarginHead, AnnealSchedule, CandidateMask, CenterTable,
    ClassifierHead, DistanceMode, DsaConfig, JointLossConfig, LinearHead, LossOutput,
};
use crate::network::{Checkpoint, EmbeddingModel, WeightInit};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChiefKind {
    /// Fully-connected classifier with softmax cross-entropy.
    Softmax,
    /// Normalized-feature angular-margin classifier.
    AngularMargin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxiliaryKind {
    None,
    Center,
    Dsa,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations at which the learning rate is divided by `lr_drop_factor`.
    pub lr_drop_iters: Vec<u64>,
    pub lr_drop_factor: f64,
    pub total_iters: u64,
    pub seed: u64,
    pub chief: ChiefKind,
    pub margin: AngularMarginConfig,
    pub anneal: AnnealSchedule,
    pub auxiliary: AuxiliaryKind,
    pub joint: JointLossConfig,
    pub dsa: DsaConfig,
    /// Step size of the center updates.
    pub center_lr: f64,
    /// Center geometry for the center loss (DSA uses `dsa.mode`).
    pub checkpoint_every: u64,
    /// Share of every batch drawn from sequence data; `None` mixes proportionally.
    pub sequence_fraction: Option<f64>,
    /// Initialization of the classifier head.
    pub head_init: WeightInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_drop_iters: vec![14_000],
            lr_drop_factor: 10.0,
            total_iters: 20_000,
            seed: 0,
            chief: ChiefKind::Softmax,
            margin: AngularMarginConfig::default(),
            anneal: AnnealSchedule::default(),
            auxiliary: AuxiliaryKind::None,
            joint: JointLossConfig::default(),
            dsa: DsaConfig::default(),
            center_lr: 0.5,
            checkpoint_every: 0,
            sequence_fraction: None,
            head_init: WeightInit::Xavier,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Configuration, "batch_size must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            bail!(Configuration, "base_lr must be positive, got {}", self.base_lr);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Configuration, "momentum must be in [0, 1), got {}", self.momentum);
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bail!(Configuration, "weight_decay must be >= 0");
        }
        if self.lr_drop_iters.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Configuration, "lr_drop_iters must be strictly ascending");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            bail!(Configuration, "lr_drop_factor must be positive");
        }
        if !(self.center_lr > 0.0 && self.center_lr.is_finite()) {
            bail!(Configuration, "center_lr must be positive");
        }
        if let Some(f) = self.sequence_fraction {
            if !(0.0..=1.0).contains(&f) {
                bail!(Configuration, "sequence_fraction must be in [0, 1], got {f}");
            }
        }
        self.joint.validate()?;
        self.dsa.validate()?;
        self.anneal.validate()?;
        self.margin.validate()?;
        Ok(())
    }

    /// Learning rate in effect at `iteration`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let drops = self.lr_drop_iters.iter().filter(|&&d| iteration >= d).count() as i32;
        self.base_lr / self.lr_drop_factor.powi(drops)
    }

    /// Refuses configurations that would silently discard sequence samples.
    pub fn check_data(&self, has_sequences: bool) -> Result<()> {
        if has_sequences && !self.joint.lsr_enabled && self.auxiliary == AuxiliaryKind::None {
            bail!(
                Configuration,
                "sequence samples present but neither label smoothing nor an auxiliary loss would use them"
            );
        }
        Ok(())
    }

    fn center_mode(&self) -> DistanceMode {
        match self.auxiliary {
            AuxiliaryKind::Dsa => self.dsa.mode,
            _ => DistanceMode::Euclidean,
        }
    }
}

/// Loss values and gradients of one evaluation of the training objective.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub chief_loss: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
    pub features: Tensor<T>,
    pub model_grads: Vec<Tensor<T>>,
    pub head_grads: Vec<Tensor<T>>,
}

/// The pieces of the objective that are not trainable by SGD.
pub struct Objective<'a, T> {
    pub cfg: &'a TrainConfig,
    pub centers: Option<&'a CenterTable<T>>,
    /// DSA candidate mask; required when the auxiliary loss is DSA.
    pub mask: Option<&'a CandidateMask>,
}

impl<'a, T: Scalar> Objective<'a, T> {
    /// Chief plus weighted auxiliary loss on a batch, with gradients for the model
    /// and head parameters.
    pub fn evaluate(
        &self,
        model: &EmbeddingModel<T>,
        head: &ClassifierHead<T>,
        images: &Tensor<T>,
        labels: &[usize],
        sources: &[Source],
    ) -> Result<StepOutput<T>> {
        let (features, trace) = model.forward(images)?;
        let logits = head.forward(&features, labels, sources)?;
        let ce = if self.cfg.joint.lsr_enabled {
            lsr_cross_entropy(&logits, labels, sources)?
        } else {
            cross_entropy(&logits, labels, sources)?
        };
        let head_back = head.backward(&features, labels, sources, &ce.grad)?;
        let chief = LossOutput {
            loss: ce.loss,
            grad: head_back.features,
        };
        let aux = self.auxiliary(&features, labels)?;
        let total = match &aux {
            Some(a) => joint_loss(&chief, a, self.cfg.joint.eta)?,
            None => chief.clone(),
        };
        if !total.loss.is_finite() {
            bail!(Numeric, "training loss is not finite");
        }
        let grads = model.backward_with(&trace, &total.grad, false)?;
        Ok(StepOutput {
            chief_loss: chief.loss.as_f64(),
            aux_loss: aux.map_or(0.0, |a| a.loss.as_f64()),
            total_loss: total.loss.as_f64(),
            features,
            model_grads: grads.params,
            head_grads: head_back.params,
        })
    }

    fn auxiliary(&self, features: &Tensor<T>, labels: &[usize]) -> Result<Option<LossOutput<T>>> {
        let centers = || {
            self.centers
                .ok_or_else(|| Error::Configuration("auxiliary loss needs a center table".into()))
        };
        Ok(match self.cfg.auxiliary {
            AuxiliaryKind::None => None,
            AuxiliaryKind::Center => {
                // Batch mean of the summed center loss.
                let mut out = center_loss(features, labels, centers()?)?;
                let inv = T::one() / T::from_usize_lossy(features.rows().max(1));
                out.loss *= inv;
                out.grad.scale(inv);
                Some(out)
            }
            AuxiliaryKind::Dsa => {
                let mask = self
                    .mask
                    .ok_or_else(|| Error::Configuration("DSA loss needs a candidate mask".into()))?;
                Some(dsa_loss_with_mask(features, labels, centers()?, &self.cfg.dsa, mask)?)
            }
        })
    }
}

/// Model, head, centers and optimizer state for one training run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    cfg: TrainConfig,
    space: LabelSpace,
    model: EmbeddingModel<T>,
    head: ClassifierHead<T>,
    centers: Option<CenterTable<T>>,
    state: TrainState<T>,
}

pub const RECORD_HEAD: &str = "head";
pub const RECORD_CENTERS: &str = "centers";
pub const RECORD_STATE: &str = "train_state";

/// Independent random streams derived from the run seed.
const STREAM_HEAD: u64 = 1;
const STREAM_CENTERS: u64 = 2;
const STREAM_LOSS: u64 = 3;
const STREAM_BATCHES: u64 = 4;

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig, model: EmbeddingModel<T>, space: LabelSpace) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(cfg.seed);
        let dim = model.embedding_dim();
        let classes = space.num_identities();
        let head = match cfg.chief {
            ChiefKind::Softmax => {
                ClassifierHead::Linear(LinearHead::new(dim, classes, cfg.head_init, &mut root.derive(STREAM_HEAD))?)
            }
            ChiefKind::AngularMargin => ClassifierHead::AngularMargin(AngularMarginHead::new(
                dim,
                classes,
                cfg.margin,
                &mut root.derive(STREAM_HEAD),
            )?),
        };
        let centers = match cfg.auxiliary {
            AuxiliaryKind::None => None,
            _ => Some(CenterTable::new(
                space.total(),
                dim,
                cfg.center_mode(),
                cfg.center_lr,
                &mut root.derive(STREAM_CENTERS),
            )?),
        };
        let mut params: Vec<&Tensor<T>> = model.params();
        params.extend(head.params());
        let state = TrainState {
            iteration: 0,
            velocities: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            loss_rng: root.derive(STREAM_LOSS).state(),
            cursor: BatchCursor {
                rng_state: root.derive(STREAM_BATCHES).state(),
                ..BatchCursor::default()
            },
            metrics: Vec::new(),
        };
        Ok(Trainer {
            cfg,
            space,
            model,
            head,
            centers,
            state,
        })
    }

    /// Restores a run saved by [`Trainer::to_checkpoint`].
    pub fn from_checkpoint(cfg: TrainConfig, space: LabelSpace, ckpt: Checkpoint<T>) -> Result<Self> {
        let mut t = Trainer::new(cfg, ckpt.model, space)?;
        let head = ckpt
            .records
            .get(RECORD_HEAD)
            .ok_or_else(|| Error::Format("checkpoint has no head record".into()))?;
        t.head = ClassifierHead::from_bytes(head)?;
        if t.head.num_classes() != space.num_identities() || t.head.dim() != t.model.embedding_dim() {
            bail!(Dimension, "checkpoint head does not match the label space or embedding width");
        }
        t.centers = match ckpt.records.get(RECORD_CENTERS) {
            Some(b) => Some(CenterTable::from_bytes(b)?),
            None => None,
        };
        if t.centers.is_some() != (t.cfg.auxiliary != AuxiliaryKind::None) {
            bail!(Consistency, "checkpoint centers do not match the auxiliary loss setting");
        }
        if let Some(c) = &t.centers {
            if c.num_centers() != space.total() {
                bail!(Consistency, "checkpoint has {} centers, label space has {}", c.num_centers(), space.total());
            }
        }
        if let Some(s) = ckpt.records.get(RECORD_STATE) {
            let state = TrainState::from_bytes(s)?;
            let shapes: Vec<&[usize]> = t.model.params().iter().chain(t.head.params().iter()).map(|p| p.shape()).collect();
            if state.velocities.len() != shapes.len()
                || state.velocities.iter().zip(&shapes).any(|(v, s)| v.shape() != *s)
            {
                bail!(Consistency, "optimizer state does not match the model parameters");
            }
            t.state = state;
        }
        Ok(t)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ckpt = Checkpoint::new(self.model.clone());
        ckpt.records.insert(RECORD_HEAD.into(), self.head.to_bytes());
        if let Some(c) = &self.centers {
            ckpt.records.insert(RECORD_CENTERS.into(), c.to_bytes());
        }
        ckpt.records.insert(RECORD_STATE.into(), self.state.to_bytes());
        ckpt
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &EmbeddingModel<T> {
        &self.model
    }

    pub fn head(&self) -> &ClassifierHead<T> {
        &self.head
    }

    pub fn centers(&self) -> Option<&CenterTable<T>> {
        self.centers.as_ref()
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn metrics(&self) -> &[MetricRow] {
        &self.state.metrics
    }

    pub fn into_parts(self) -> (EmbeddingModel<T>, ClassifierHead<T>, Option<CenterTable<T>>) {
        (self.model, self.head, self.centers)
    }

    fn plan(&self) -> BatchPlan {
        BatchPlan {
            batch_size: self.cfg.batch_size,
            sequence_fraction: self.cfg.sequence_fraction,
            shuffle_seed: self.cfg.seed,
        }
    }

    fn check_dataset(&self, data: &Dataset<T>) -> Result<()> {
        if data.label_space() != self.space {
            bail!(Consistency, "dataset label space differs from the trainer's");
        }
        if data.sample_len() != self.model.input_len() {
            bail!(
                Dimension,
                "samples of shape {:?} do not fit model input {:?}",
                data.sample_shape(),
                self.model.input_shape()
            );
        }
        self.cfg.check_data(data.has_sequences())
    }

    /// One optimization step on `batch`.
    pub fn step(&mut self, batch: &SampleBatch<T>) -> Result<MetricRow> {
        let iteration = self.state.iteration;
        let lr = self.cfg.lr_at(iteration);
        self.head.set_anneal(self.cfg.anneal.at(iteration));
        let mut loss_rng = Rng::new(self.state.loss_rng);
        let mask = match self.cfg.auxiliary {
            AuxiliaryKind::Dsa => Some(sample_candidates(
                &batch.labels,
                &batch.sources,
                self.space,
                self.cfg.dsa.p,
                &mut loss_rng,
            )?),
            _ => None,
        };
        let out = Objective {
            cfg: &self.cfg,
            centers: self.centers.as_ref(),
            mask: mask.as_ref(),
        }
        .evaluate(&self.model, &self.head, &batch.images, &batch.labels, &batch.sources)?;

        let grads: Vec<&Tensor<T>> = out.model_grads.iter().chain(&out.head_grads).collect();
        let params: Vec<&mut Tensor<T>> = self.model.params_mut().into_iter().chain(self.head.params_mut()).collect();
        momentum_update(
            params,
            &grads,
            &mut self.state.velocities,
            lr,
            self.cfg.momentum,
            self.cfg.weight_decay,
        )?;

        if let Some(centers) = &mut self.centers {
            match self.cfg.auxiliary {
                AuxiliaryKind::Center => center_update(&out.features, &batch.labels, centers)?,
                AuxiliaryKind::Dsa => dsa_center_update(&out.features, &batch.labels, centers)?,
                AuxiliaryKind::None => {}
            }
        }

        self.state.loss_rng = loss_rng.state();
        self.state.iteration += 1;
        let row = MetricRow {
            iteration,
            lr,
            chief_loss: out.chief_loss,
            aux_loss: out.aux_loss,
            total_loss: out.total_loss,
        };
        self.state.metrics.push(row);
        Ok(row)
    }

    /// Trains until `total_iters`, calling `after_step` after every iteration.
    /// With `SEQEMBED_THREADS` > 1 batches are assembled on a helper thread; the
    /// order is unchanged.
    pub fn run(&mut self, data: &Dataset<T>, after_step: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        self.run_with_threads(data, worker_threads(), after_step)
    }

    /// [`Trainer::run`] with an explicit thread count.
    pub fn run_with_threads(
        &mut self,
        data: &Dataset<T>,
        threads: usize,
        mut after_step: impl FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
        self.check_dataset(data)?;
        if self.state.iteration >= self.cfg.total_iters {
            return Ok(());
        }
        let mut batches = iterate_batches(data, &self.plan(), Rng::new(0))?;
        batches.seek(self.state.cursor);
        let remaining = (self.cfg.total_iters - self.state.iteration) as usize;
        if threads <= 1 {
            for _ in 0..remaining {
                let idx = batches.next_indices();
                let batch = data.gather(&idx);
                self.state.cursor = batches.position();
                self.step(&batch)?;
                after_step(self)?;
            }
            return Ok(());
        }
        std::thread::scope(|scope| {
            let (tx, rx) = mpsc::sync_channel::<(SampleBatch<T>, BatchCursor)>(4);
            scope.spawn(move || {
                for _ in 0..remaining {
                    let idx = batches.next_indices();
                    if tx.send((data.gather(&idx), batches.position())).is_err() {
                        break;
                    }
                }
            });
            for (batch, cursor) in rx.iter() {
                self.state.cursor = cursor;
                self.step(&batch)?;
                after_step(self)?;
            }
            Ok(())
        })
    }
}

/// Momentum SGD in the accumulate-then-subtract form:
/// `v = μ v + lr (g + wd w)`, `w -= v`.
pub fn momentum_update<T: Scalar>(
    params: Vec<&mut Tensor<T>>,
    grads: &[&Tensor<T>],
    velocities: &mut [Tensor<T>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocities.len() {
        bail!(Shape, "{} parameters, {} gradients, {} velocities", params.len(), grads.len(), velocities.len());
    }
    let (mu, lr, wd) = (T::lit(momentum), T::lit(lr), T::lit(weight_decay));
    for ((p, g), v) in params.into_iter().zip(grads).zip(velocities) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            bail!(Shape, "parameter {:?} with gradient {:?}", p.shape(), g.shape());
        }
        for ((w, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + lr * (gv + wd * *w);
            *w -= *vv;
        }
        p.ensure_finite("parameters")?;
    }
    Ok(())
}

/// Worker threads allowed by `SEQEMBED_THREADS` (default 1).
pub fn worker_threads() -> usize {
    std::env::var("SEQEMBED_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[cfg(test)]
mod tests;
