//! Two-phase training loop.
//!
//! Phase 1 (feature extraction) binds backbone tensors as constants so they
//! never receive gradients; phase 2 (fine tuning) trains everything, with the
//! backbone group on its own, smaller learning rate. Every step is a pure
//! function of `(state, seed, epoch, step)`, which is what makes a resumed
//! run bit-identical to an uninterrupted one.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::optim::{class_weights, early_stop, AdamW, CosineWarmRestarts, Moments};
use crate::autodiff::{kernels::sigmoid, Tape};
use crate::backbone::is_backbone_param;
use crate::data::{epoch_order, AugmentSeed, Dataset};
use crate::error::{Error, Result};
use crate::metrics::roc_auc;
use crate::model::{logits_forward, ModelConfig};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeights {
    /// `w_c = n/(2·n_c)` from the training split.
    #[default]
    InverseFrequency,
    None,
}

/// How the phase-1 epochs relate to `epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseBudget {
    /// Phase 1 is the first `phase1_epochs` of `epochs`.
    #[default]
    Shared,
    /// Phase 2 runs a full `epochs` after phase 1.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub phase1_epochs: usize,
    pub budget: PhaseBudget,
    pub patience: usize,
    pub min_delta: f64,
    pub lr_new: f64,
    pub lr_backbone: f64,
    /// `η_min = η_max · eta_min_ratio` per group.
    pub eta_min_ratio: f64,
    pub t0: usize,
    pub t_mult: usize,
    pub optimizer: AdamW,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            phase1_epochs: 10,
            budget: PhaseBudget::Shared,
            patience: 10,
            min_delta: 1e-4,
            lr_new: 3e-4,
            lr_backbone: 3e-5,
            eta_min_ratio: 0.01,
            t0: 10,
            t_mult: 2,
            optimizer: AdamW::default(),
            loss_weights: LossWeights::InverseFrequency,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.budget == PhaseBudget::Shared && self.phase1_epochs >= self.epochs {
            return bad(format!("phase1_epochs {} must be below epochs {}", self.phase1_epochs, self.epochs));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.lr_new >= 0.0 && self.lr_backbone >= 0.0) || !(0.0..=1.0).contains(&self.eta_min_ratio) {
            return bad("learning rates must be non-negative and eta_min_ratio within [0, 1]".into());
        }
        CosineWarmRestarts::new(self.t0, self.t_mult).map(|_| ())
    }

    pub fn total_epochs(&self) -> usize {
        match self.budget {
            PhaseBudget::Shared => self.epochs,
            PhaseBudget::Separate => self.phase1_epochs + self.epochs,
        }
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch < self.phase1_epochs {
            Phase::FeatureExtraction
        } else {
            Phase::FineTuning
        }
    }

    /// `(lr_new, lr_backbone)` for a 0-based global epoch; the backbone rate
    /// is 0 while it is frozen.
    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        let sched = CosineWarmRestarts { t0: self.t0.max(1), t_mult: self.t_mult.max(1) };
        let lr = |max: f64| sched.lr(epoch, max, max * self.eta_min_ratio);
        match self.phase(epoch) {
            Phase::FeatureExtraction => (lr(self.lr_new), 0.0),
            Phase::FineTuning => (lr(self.lr_new), lr(self.lr_backbone)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    FeatureExtraction,
    FineTuning,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::FeatureExtraction => "feature_extraction",
            Phase::FineTuning => "fine_tuning",
        }
    }
}

/// One row of the training history. `epoch` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
    pub lr_new: f64,
    pub lr_backbone: f64,
}

pub const HISTORY_HEADER: &str = "epoch,phase,train_loss,val_loss,val_auc,lr_new,lr_backbone";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let auc = r.val_auc.map_or_else(|| "nan".to_string(), |a| format!("{a:.6}"));
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{},{:.6e},{:.6e}",
            r.epoch,
            r.phase.name(),
            r.train_loss,
            r.val_loss,
            auc,
            r.lr_new,
            r.lr_backbone
        );
    }
    s
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub seed: u64,
    pub params: ParamStore<f32>,
    /// Aligned with `params.names()`.
    pub moments: Vec<Moments<f32>>,
    /// 0-based epoch in progress.
    pub epoch: usize,
    /// Optimizer steps already taken in `epoch`.
    pub step: usize,
    pub loss_sum: f64,
    pub loss_count: usize,
    pub best_val_auc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn fresh(params: ParamStore<f32>, seed: u64) -> Self {
        let moments = params.iter().map(|(_, a)| Moments::zeros(a.len())).collect();
        TrainState {
            seed,
            params,
            moments,
            epoch: 0,
            step: 0,
            loss_sum: 0.0,
            loss_count: 0,
            best_val_auc: None,
            best_epoch: None,
            history: Vec::new(),
        }
    }
}

/// Outcome of [`Trainer::end_epoch`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub record: EpochRecord,
    /// Validation AUC beat the previous best by more than `min_delta`.
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    model: ModelConfig,
    cfg: TrainConfig,
    weights: [f32; 2],
    state: TrainState,
}

impl Trainer {
    /// Fresh parameters drawn from `seed`.
    pub fn new(model: ModelConfig, cfg: TrainConfig, seed: u64, train_labels: &[u8]) -> Result<Self> {
        let params = model.init_params::<f32>(seed)?;
        Self::from_state(model, cfg, TrainState::fresh(params, seed), train_labels)
    }

    pub fn from_state(model: ModelConfig, cfg: TrainConfig, state: TrainState, train_labels: &[u8]) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        if train_labels.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        if state.moments.len() != state.params.len() {
            return Err(Error::shape("optimizer state does not mirror the parameters"));
        }
        let weights = match cfg.loss_weights {
            LossWeights::InverseFrequency => {
                let (w0, w1) = class_weights(train_labels)?;
                [w0 as f32, w1 as f32]
            }
            LossWeights::None => [1.0, 1.0],
        };
        Ok(Trainer { model, cfg, weights, state })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.state.params
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn class_weights(&self) -> [f32; 2] {
        self.weights
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.cfg.total_epochs() || self.should_stop()
    }

    pub fn should_stop(&self) -> bool {
        let aucs: Vec<_> = self.state.history.iter().map(|r| r.val_auc).collect();
        early_stop(&aucs, self.cfg.patience, self.cfg.min_delta)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    /// One optimizer step on the next batch of the current epoch. Returns
    /// the batch loss.
    pub fn step(&mut self, train: &Dataset) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let st = &self.state;
        let (epoch, seed) = (st.epoch, st.seed);
        if st.step >= self.steps_per_epoch(train.len()) {
            return Err(Error::Contract(format!("epoch {} has no steps left", epoch + 1)));
        }
        let order = epoch_order(train.len(), seed, epoch as u64);
        let bs = self.cfg.batch_size;
        let idx = &order[st.step * bs..((st.step + 1) * bs).min(order.len())];
        let (images, labels) = train.batch(idx, Some(AugmentSeed { seed, epoch: epoch as u64 }))?;

        let phase = self.cfg.phase(epoch);
        let trainable = |name: &str| phase == Phase::FineTuning || !is_backbone_param(name);
        let mut tape = Tape::new();
        let bound = self.state.params.bind(&mut tape, trainable);
        let x = tape.leaf(&images);
        let z = logits_forward(&mut tape, x, &self.model, &bound)?;
        let w: Vec<f32> = labels.iter().map(|&y| self.weights[y as usize]).collect();
        let loss = tape.weighted_bce(z, &labels, &w)?;
        let loss_value = tape.value(loss)[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss {loss_value} at epoch {}, step {}",
                epoch + 1,
                self.state.step + 1
            )));
        }
        let grads = tape.backward(loss)?;

        let (lr_new, lr_bb) = self.cfg.learning_rates(epoch);
        let opt = self.cfg.optimizer;
        let state = &mut self.state;
        let names: Vec<String> = state.params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            if !trainable(name) {
                continue;
            }
            let Some(g) = grads.get(bound.get(name)?) else { continue };
            let lr = if is_backbone_param(name) { lr_bb } else { lr_new };
            let p = state.params.get_mut(name)?;
            opt.step(p.data_mut(), g, &mut state.moments[i], lr)?;
        }
        state.step += 1;
        state.loss_sum += loss_value * idx.len() as f64;
        state.loss_count += idx.len();
        Ok(loss_value)
    }

    /// Validation pass and bookkeeping that closes the current epoch.
    pub fn end_epoch(&mut self, val: &Dataset) -> Result<EpochOutcome> {
        let (val_loss, val_auc) = self.validate(val)?;
        let epoch = self.state.epoch;
        let (lr_new, lr_backbone) = self.cfg.learning_rates(epoch);
        let record = EpochRecord {
            epoch: epoch + 1,
            phase: self.cfg.phase(epoch),
            train_loss: self.state.loss_sum / self.state.loss_count.max(1) as f64,
            val_loss,
            val_auc,
            lr_new,
            lr_backbone,
        };
        let best = self.state.best_val_auc.unwrap_or(f64::NEG_INFINITY);
        let improved = val_auc.is_some_and(|a| a > best + self.cfg.min_delta);
        let st = &mut self.state;
        if improved {
            st.best_val_auc = val_auc;
            st.best_epoch = Some(epoch + 1);
        }
        st.history.push(record.clone());
        st.epoch += 1;
        st.step = 0;
        st.loss_sum = 0.0;
        st.loss_count = 0;
        Ok(EpochOutcome { record, improved })
    }

    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<EpochOutcome> {
        while self.state.step < self.steps_per_epoch(train.len()) {
            self.step(train)?;
        }
        self.end_epoch(val)
    }

    /// Weighted validation loss and AUC (`None` if val has one class).
    pub fn validate(&self, val: &Dataset) -> Result<(f64, Option<f64>)> {
        if val.is_empty() {
            return Err(Error::Data("validation split is empty".into()));
        }
        let logits = dataset_logits(&self.state.params, &self.model, val, self.cfg.batch_size)?;
        let labels = val.labels();
        let mut loss = 0.0;
        for (&z, &y) in logits.iter().zip(&labels) {
            let z = z as f64;
            let bce = z.max(0.0) - z * y as f64 + (-z.abs()).exp().ln_1p();
            loss += self.weights[y as usize] as f64 * bce;
        }
        let scores: Vec<f64> = logits.iter().map(|&z| sigmoid(z) as f64).collect();
        let auc = match roc_auc(&scores, &labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok((loss / labels.len() as f64, auc))
    }
}

/// Pre-sigmoid scores for every sample of `ds`, unaugmented.
pub fn dataset_logits(params: &ParamStore<f32>, model: &ModelConfig, ds: &Dataset, batch: usize) -> Result<Vec<f32>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(batch.max(1)) {
        let (images, _) = ds.batch(chunk, None)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false);
        let x = tape.leaf(&images);
        let z = logits_forward(&mut tape, x, model, &bound)?;
        out.extend_from_slice(tape.value(z));
    }
    Ok(out)
}

/// Probabilities for every sample of `ds`.
pub fn dataset_scores(params: &ParamStore<f32>, model: &ModelConfig, ds: &Dataset, batch: usize) -> Result<Vec<f64>> {
    Ok(dataset_logits(params, model, ds, batch)?.into_iter().map(|z| sigmoid(z) as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, Difficulty};
    use crate::ssm::ScanConfig;

    pub(crate) fn micro_model() -> ModelConfig {
        let mut m = ModelConfig::tiny(32, 16);
        m.scan = ScanConfig { blocks: 1, state_dim: 4, ..ScanConfig::new(16) };
        m
    }

    fn data(n: usize, seed: u64) -> Dataset {
        let d = synth_dataset(n, 32, seed, Difficulty::Easy).unwrap();
        let imgs = (0..n).map(|i| d.image(i).unwrap()).collect();
        Dataset::from_images(d.records, imgs, 32).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig { epochs: 3, batch_size: 4, phase1_epochs: 1, ..TrainConfig::default() }
    }

    #[test]
    fn defaults_follow_the_documented_values() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.phase1_epochs, c.patience), (50, 16, 10, 10));
        assert_eq!((c.lr_new, c.lr_backbone, c.min_delta), (3e-4, 3e-5, 1e-4));
        assert_eq!(c.learning_rates(0), (3e-4, 0.0));
        let (n, b) = c.learning_rates(10);
        assert_eq!((n, b), (3e-4, 3e-5));
        assert!(TrainConfig { phase1_epochs: 50, ..c.clone() }.validate().is_err());
        assert_eq!(TrainConfig { budget: PhaseBudget::Separate, ..c }.total_epochs(), 60);
    }

    #[test]
    fn phase_one_leaves_backbone_bitwise_untouched() {
        let train = data(12, 1);
        let mut t = Trainer::new(micro_model(), cfg(), 3, &train.labels()).unwrap();
        let before = t.params().clone();
        for _ in 0..3 {
            t.step(&train).unwrap();
        }
        let mut moved = 0;
        for (name, arr) in t.params().iter() {
            let orig = before.get(name).unwrap();
            if is_backbone_param(name) {
                assert_eq!(arr.data(), orig.data(), "{name} changed during phase 1");
            } else if arr.data() != orig.data() {
                moved += 1;
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn history_has_one_row_per_epoch() {
        let (train, val) = (data(12, 1), data(8, 2));
        let mut t = Trainer::new(micro_model(), cfg(), 3, &train.labels()).unwrap();
        while !t.is_done() {
            t.run_epoch(&train, &val).unwrap();
        }
        let h = &t.state().history;
        assert_eq!(h.len(), 3);
        assert_eq!(h[0].phase, Phase::FeatureExtraction);
        assert_eq!(h[1].phase, Phase::FineTuning);
        let csv = history_csv(h);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with(HISTORY_HEADER));
    }

    #[test]
    fn empty_training_split_is_rejected() {
        assert!(matches!(Trainer::new(micro_model(), cfg(), 0, &[]), Err(Error::Data(_))));
    }

    #[test]
    fn scores_do_not_depend_on_batch_size() {
        let ds = data(10, 5);
        let params = micro_model().init_params::<f32>(1).unwrap();
        let a = dataset_scores(&params, &micro_model(), &ds, 1).unwrap();
        let b = dataset_scores(&params, &micro_model(), &ds, 16).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
