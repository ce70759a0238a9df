//! Joint training of the two cascaded stages with loss-weighted sampling,
//! step-decay schedules, early stopping, prediction with mask fusion,
//! dataset evaluation, and overlay rendering.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, VolumeSample, FLAIR};
use crate::error::{Error, Result};
use crate::lws::{self, CoverageCheck, SamplingConfig};
use crate::mask::LabelMap;
use crate::metrics::{evaluate_dataset, DatasetReport, UndefinedPolicy};
use crate::model::{CuNet, CuNetConfig};
use crate::tensor::Graph;

/// Optional per-region probability overrides for one stage; unset fields
/// keep the stage defaults (and, for stage one's p2, the balance equation).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbOverrides {
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub p3: Option<f64>,
    pub p4: Option<f64>,
}

impl ProbOverrides {
    fn apply(&self, cfg: &mut SamplingConfig) {
        if let Some(p) = self.p1 {
            cfg.p1 = p;
        }
        if let Some(p) = self.p2 {
            cfg.p2 = Some(p);
        }
        if let Some(p) = self.p3 {
            cfg.p3 = p;
        }
        if let Some(p) = self.p4 {
            cfg.p4 = p;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_floor: f64,
    pub lr_decay: f64,
    pub lr_period: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub omega0: f64,
    pub omega_floor: f64,
    pub omega_decay: f64,
    pub omega_period: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    /// Total contour band width in pixels (10 at 240x240 scale, 4 at the
    /// 64x64 desk scale).
    pub contour_width: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Apply the regularizer inside the loss (lambda = weight_decay)
    /// instead of inside the optimizer; off by default to avoid double
    /// counting.
    pub l2_in_loss: bool,
    pub unet1_probs: ProbOverrides,
    pub unet2_probs: ProbOverrides,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            lr_floor: 1e-7,
            lr_decay: 0.1,
            lr_period: 10,
            momentum: 0.9,
            weight_decay: 5e-5,
            omega0: 0.1,
            omega_floor: 1e-3,
            omega_decay: 0.1,
            omega_period: 10,
            alpha1: 2.0,
            alpha2: 1.0,
            beta: 1.5,
            contour_width: 4,
            batch_size: 4,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            l2_in_loss: false,
            unet1_probs: ProbOverrides::default(),
            unet2_probs: ProbOverrides::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr0", self.lr0), ("lr_decay", self.lr_decay), ("omega0", self.omega0), ("omega_decay", self.omega_decay)] {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lr_floor > self.lr0 || self.omega_floor > self.omega0 {
            return Err(Error::Config("floors must not exceed initial values".into()));
        }
        if self.lr_period == 0 || self.omega_period == 0 {
            return Err(Error::Config("schedule periods must be >= 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be >= 1".into()));
        }
        if self.alpha1.is_nan() || self.alpha2.is_nan() || self.alpha1 < 1.0 || self.alpha2 < 1.0 {
            return Err(Error::Config("contour weights must be >= 1".into()));
        }
        if self.beta.is_nan() || self.beta <= 0.0 {
            return Err(Error::Config("beta must be positive".into()));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        schedule(epoch, self.lr0, self.lr_decay, self.lr_period, self.lr_floor)
    }

    fn omega_at(&self, epoch: usize) -> f64 {
        schedule(epoch, self.omega0, self.omega_decay, self.omega_period, self.omega_floor)
    }
}

/// Step-decay schedule: max(floor, initial * decay^(epoch / period)).
pub fn schedule(epoch: usize, initial: f64, decay: f64, period: usize, floor: f64) -> f64 {
    (initial * decay.powi((epoch / period) as i32)).max(floor)
}

/// Whole-file configuration: model architecture, training protocol, and
/// generator parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: CuNetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub q_tumor: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { count: 210, size: 64, seed: 0, q_tumor: 0.7 }
    }
}

impl FileConfig {
    pub fn from_toml(text: &str) -> Result<FileConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config file: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FileConfig> {
        let text = fs::read_to_string(path.as_ref())?;
        FileConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub omega: f64,
    pub batches: usize,
    pub skipped: usize,
}

/// Progress of one training run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub stopped_early: bool,
    /// Fresh-sampling audit: number of W matrices drawn; always two per
    /// gradient step.
    pub w_matrices_sampled: usize,
    pub steps: usize,
    pub coverage: Option<CoverageCheck>,
}

struct BatchLoss {
    total: f64,
    skipped: bool,
}

fn stage_configs(config: &TrainConfig) -> (SamplingConfig, SamplingConfig) {
    let (mut cfg1, mut cfg2) = lws::stage_sampling_configs();
    cfg1.alpha = config.alpha1;
    cfg2.alpha = config.alpha2;
    config.unet1_probs.apply(&mut cfg1);
    config.unet2_probs.apply(&mut cfg2);
    cfg2.p2.get_or_insert(0.0);
    (cfg1, cfg2)
}

/// Assemble the full sampled loss for one batch on a fresh graph and, in
/// training mode, take one SGD step. Returns the total-loss value.
fn run_batch(
    model: &mut CuNet,
    batch: &[&VolumeSample],
    config: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
    train_step: bool,
    audit: &mut usize,
) -> Result<BatchLoss> {
    let labels = data::to_label_batch(batch);
    let brain = data::to_brain_batch(batch);
    let partition = lws::partition_regions(&labels, &brain, config.contour_width)?;
    let counts = partition.counts();

    let (cfg1_raw, cfg2) = stage_configs(config);
    let cfg1 = match cfg1_raw.p2 {
        Some(_) => cfg1_raw,
        None => cfg1_raw.with_p2(lws::compute_p2(config.beta, cfg1_raw.p3, counts[2], counts[1])),
    };

    let w1 = lws::sample_matrix(&partition, &cfg1, rng);
    let w2 = lws::sample_matrix(&partition, &cfg2, rng);
    *audit += 2;
    if w1.sum() <= 0.0 || w2.sum() <= 0.0 {
        log::warn!("skipping batch at epoch {epoch}: sample matrix is empty");
        return Ok(BatchLoss { total: 0.0, skipped: true });
    }

    let omega = config.omega_at(epoch);
    let lambda = if config.l2_in_loss { config.weight_decay } else { 0.0 };
    let optimizer_decay = if config.l2_in_loss { 0.0 } else { config.weight_decay };

    let mut g = Graph::new();
    let bind = model.params().bind(&mut g);
    let input = g.constant(data::to_input_tensor(batch));
    let outs = model.forward_graph(&mut g, &bind, input);

    let t1 = g.constant(lws::binary_tumor_target(&labels));
    let t2 = g.constant(lws::substructure_target(&labels));
    let w1v = g.constant(w1.to_tensor());
    let w2v = g.constant(w2.to_tensor());

    let l1 = g.weighted_cross_entropy(outs.branch1, t1, w1v)?;
    let l2 = g.weighted_cross_entropy(outs.branch2, t2, w2v)?;
    let mut aux_losses = Vec::with_capacity(outs.aux1.len() + outs.aux2.len());
    for a in &outs.aux1 {
        aux_losses.push(g.weighted_cross_entropy(*a, t1, w1v)?);
    }
    for a in &outs.aux2 {
        aux_losses.push(g.weighted_cross_entropy(*a, t2, w2v)?);
    }
    let total = lws::total_loss(&mut g, l1, l2, &aux_losses, omega, lambda, bind.vars());
    let total_value = g.value(total).item();
    if !total_value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {total_value} at epoch {epoch} (l1 {}, l2 {})",
            g.value(l1).item(),
            g.value(l2).item()
        )));
    }

    if train_step {
        g.backward(total);
        model.params_mut().collect_grads(&g, &bind);
        model
            .params_mut()
            .sgd_momentum_step(config.lr_at(epoch), config.momentum, optimizer_decay);
    }
    Ok(BatchLoss { total: total_value, skipped: false })
}

/// Normalize, filter tumorless training cases, and run the training loop
/// with early stopping. The model keeps the parameters of its best
/// validation epoch. Inputs are raw (un-normalized) samples.
pub fn train(
    model: &mut CuNet,
    train_samples: &[VolumeSample],
    val_samples: &[VolumeSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_samples.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    if model.config().branch1_classes != 2 || model.config().branch2_classes != 4 {
        return Err(Error::Config(
            "training targets require 2 stage-one and 4 stage-two classes".into(),
        ));
    }
    let div = model.config().extent_divisor();
    for s in train_samples.iter().chain(val_samples) {
        if s.height % div != 0 || s.width % div != 0 {
            return Err(Error::Input(format!(
                "sample {}: extents {}x{} not divisible by 2^depth = {div}",
                s.id, s.height, s.width
            )));
        }
    }

    let train_set: Vec<VolumeSample> = data::filter_tumorless(
        train_samples.iter().map(data::normalize_intensity).collect::<Result<Vec<_>>>()?,
    );
    if train_set.is_empty() {
        return Err(Error::Input("no tumor-bearing training cases left after filtering".into()));
    }
    let val_set: Vec<VolumeSample> =
        val_samples.iter().map(data::normalize_intensity).collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = TrainState {
        epoch: 0,
        best_val_loss: f64::INFINITY,
        best_epoch: 0,
        epochs_since_best: 0,
        history: Vec::new(),
    };
    let mut best_params = model.params().clone();
    let mut stopped_early = false;
    let mut audit = 0usize;
    let mut steps = 0usize;
    let mut coverage: Option<CoverageCheck> = None;

    for epoch in 0..config.max_epochs {
        state.epoch = epoch;
        // Shuffle case order; one explicit Fisher-Yates so the RNG stream
        // is pinned.
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut skipped = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let augmented: Vec<VolumeSample> = chunk.iter().map(|&i| data::augment(&train_set[i], &mut rng)).collect();
            let batch: Vec<&VolumeSample> = augmented.iter().collect();
            if coverage.is_none() {
                // One-time expected-coverage note, from the first batch's
                // resolved p2.
                let labels = data::to_label_batch(&batch);
                let brain = data::to_brain_batch(&batch);
                let partition = lws::partition_regions(&labels, &brain, config.contour_width)?;
                let counts = partition.counts();
                let (cfg1, _) = stage_configs(config);
                let p2 = cfg1
                    .p2
                    .unwrap_or_else(|| lws::compute_p2(config.beta, cfg1.p3, counts[2], counts[1]));
                coverage = Some(lws::coverage_check(config.beta, p2, config.max_epochs));
            }
            let result = run_batch(model, &batch, config, epoch, &mut rng, true, &mut audit)?;
            if result.skipped {
                skipped += 1;
            } else {
                epoch_loss += result.total;
                batches += 1;
                steps += 1;
            }
        }
        let train_loss = if batches > 0 { epoch_loss / batches as f64 } else { f64::INFINITY };

        // Deterministic validation pass: no augmentation, fixed order, a
        // per-epoch generator for the sample matrices.
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed ^ val_stream_seed(epoch));
            let mut acc = 0.0;
            let mut n = 0usize;
            let mut val_audit = 0usize;
            for chunk in val_set.chunks(config.batch_size) {
                let batch: Vec<&VolumeSample> = chunk.iter().collect();
                let result = run_batch(model, &batch, config, epoch, &mut val_rng, false, &mut val_audit)?;
                if !result.skipped {
                    acc += result.total;
                    n += 1;
                }
            }
            if n > 0 {
                acc / n as f64
            } else {
                train_loss
            }
        };

        state.history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr: config.lr_at(epoch),
            omega: config.omega_at(epoch),
            batches,
            skipped,
        });
        log::info!(
            "epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {:.1e} omega {:.1e}",
            config.lr_at(epoch),
            config.omega_at(epoch)
        );

        if val_loss < state.best_val_loss {
            state.best_val_loss = val_loss;
            state.best_epoch = epoch;
            state.epochs_since_best = 0;
            best_params = model.params().clone();
        } else {
            state.epochs_since_best += 1;
            if state.epochs_since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    model.set_params(best_params)?;
    Ok(TrainOutcome { state, stopped_early, w_matrices_sampled: audit, steps, coverage })
}

// Mix the epoch into the validation seed without colliding with the
// training stream.
fn val_stream_seed(epoch: usize) -> u64 {
    0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1)
}

/// Predict one raw case: z-score normalize, take the non-brain mask from
/// the raw intensities, run the cascade, and fuse.
pub fn predict(model: &CuNet, sample: &VolumeSample) -> Result<LabelMap> {
    let div = model.config().extent_divisor();
    if !(sample.height.is_multiple_of(div) && sample.width.is_multiple_of(div)) {
        return Err(Error::Input(format!(
            "sample {}: extents {}x{} not divisible by 2^depth = {div}",
            sample.id, sample.height, sample.width
        )));
    }
    let nonbrain = data::extract_nonbrain_mask(sample);
    if nonbrain.count() == sample.height * sample.width {
        // Nothing to segment; normalization has no support.
        return Ok(LabelMap::zeros(1, sample.height, sample.width));
    }
    let normalized = data::normalize_intensity(sample)?;
    let input = data::to_input_tensor(&[&normalized]);
    let outs = model.forward_cascade(&input)?;
    crate::model::fuse_predictions(&outs.branch1, &outs.branch2, &nonbrain)
}

/// Predict every case and build the metric report.
pub fn evaluate(model: &CuNet, samples: &[VolumeSample], policy: UndefinedPolicy) -> Result<DatasetReport> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let mut ids = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    for s in samples {
        ids.push(s.id.clone());
        predictions.push(predict(model, s)?);
        truths.push(s.labels.clone());
    }
    evaluate_dataset(&ids, &predictions, &truths, policy)
}

/// Overlay palette: label -> RGB (non-tumor purple, edema blue,
/// enhancing tumor yellow, necrosis green).
pub const PALETTE: [(u8, [u8; 3]); 4] = [
    (0, [128, 0, 128]),
    (2, [0, 64, 255]),
    (4, [255, 220, 0]),
    (1, [0, 200, 0]),
];

pub fn palette_color(label: u8) -> [u8; 3] {
    PALETTE
        .iter()
        .find(|(l, _)| *l == label)
        .map(|(_, c)| *c)
        .unwrap_or_else(|| panic!("label {label} outside vocabulary"))
}

/// Blend one pixel: half grayscale FLAIR, half label color.
pub fn overlay_pixel(gray: u8, label: u8) -> [u8; 3] {
    let color = palette_color(label);
    [0, 1, 2].map(|i| ((gray as u16 + color[i] as u16) / 2) as u8)
}

/// Write a binary PPM: grayscale FLAIR base alpha-blended at 0.5 with the
/// label palette.
pub fn render_overlay(sample: &VolumeSample, labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    if labels.shape() != (1, sample.height, sample.width) {
        return Err(Error::Contract(format!(
            "overlay labels shape {:?} does not match sample {}x{}",
            labels.shape(),
            sample.height,
            sample.width
        )));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for y in 0..sample.height {
        for x in 0..sample.width {
            let v = sample.intensity(FLAIR, y, x);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = (hi - lo).max(1e-12);
    let mut body = Vec::with_capacity(sample.height * sample.width * 3);
    for y in 0..sample.height {
        for x in 0..sample.width {
            let gray = (255.0 * (sample.intensity(FLAIR, y, x) - lo) / span).round() as u8;
            body.extend_from_slice(&overlay_pixel(gray, labels.get(0, y, x)));
        }
    }
    let mut out = format!("P6\n{} {}\n255\n", sample.width, sample.height).into_bytes();
    out.extend_from_slice(&body);
    fs::write(path.as_ref(), out)?;
    Ok(())
}
