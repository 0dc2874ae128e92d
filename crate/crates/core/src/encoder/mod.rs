//! Convolutional EEG encoder aligned to sentence embeddings.
//!
//! The model output is not normalized inside [`EncoderModel::forward`]; the
//! cosine loss and retrieval normalize on their own.

mod checkpoint;
mod network;
mod search;
mod train;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::container::ContainerError;
use crate::corpus::EegTrial;
use crate::embedding::{EmbeddingError, EmbeddingVector, EMBEDDING_DIM};
use crate::seed;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use network::Segment;
pub use search::{finalize, grid_search, select_best, GridOutcome, GridPoint, GridRow};
pub use train::{train, train_observed, TrainingExample};

use network::{Layout, Network};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid training configuration: {0}")]
    InvalidTrainConfig(String),
    #[error("input shape mismatch: model expects {expected_channels} channels x {expected_samples} samples, got {channels} x {samples}")]
    ShapeMismatch {
        expected_channels: usize,
        expected_samples: usize,
        channels: usize,
        samples: usize,
    },
    #[error("cosine loss is undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("vector dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("target embedding for {sentence_id} is not unit-normalized (norm {norm})")]
    TargetNotNormalized { sentence_id: String, norm: f64 },
    #[error("non-finite loss at epoch {epoch}, batch sentence ids {batch:?}")]
    NonFiniteLoss { epoch: usize, batch: Vec<String> },
    #[error("non-finite parameter in segment {segment} after epoch {epoch}")]
    NonFiniteParameter { epoch: usize, segment: String },
    #[error("every grid point failed: {0}")]
    GridFailed(String),
    #[error("grid search needs at least one configuration and one seed")]
    EmptyGrid,
    #[error("grid search needs a non-empty validation set")]
    NoValidation,
    #[error("test-partition sentence {0} reached a training batch")]
    TestLeakage(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Strictly increasing dilation factors of the first temporal layer.
    pub temporal_dilations: Vec<usize>,
    /// Odd kernel length shared by all temporal depthwise convolutions.
    pub temporal_kernel: usize,
    /// EEG channels spanned by the spatial kernel; 0 means all channels.
    pub spatial_kernel_channels: usize,
    pub residual_blocks: usize,
    pub hidden_width: usize,
    pub dropout_rate: f64,
    pub leaky_relu_slope: f64,
    pub output_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            temporal_dilations: vec![1, 2, 4, 8],
            temporal_kernel: 7,
            spatial_kernel_channels: 0,
            residual_blocks: 2,
            hidden_width: 128,
            dropout_rate: 0.3,
            leaky_relu_slope: 0.01,
            output_dim: EMBEDDING_DIM,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, channels: usize) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidConfig(m));
        if self.temporal_dilations.is_empty() {
            return bad("at least one dilation is required".into());
        }
        if self.temporal_dilations[0] == 0 || self.temporal_dilations.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("dilations must be positive and strictly increasing: {:?}", self.temporal_dilations));
        }
        if self.temporal_kernel % 2 == 0 {
            return bad(format!("temporal kernel must be odd, got {}", self.temporal_kernel));
        }
        if self.spatial_kernel_channels > channels {
            return bad(format!(
                "spatial kernel spans {} channels but input has {channels}",
                self.spatial_kernel_channels
            ));
        }
        if self.hidden_width == 0 || self.output_dim == 0 {
            return bad("hidden width and output dimension must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.leaky_relu_slope > 0.0) {
            return bad(format!("LeakyReLU slope must be positive, got {}", self.leaky_relu_slope));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    CosineAnnealing { min_lr: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decoupled L2 weight decay coefficient.
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::CosineAnnealing { min_lr: 1e-5 },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidTrainConfig(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be nonnegative");
        }
        let LrSchedule::CosineAnnealing { min_lr } = self.lr_schedule;
        if !(min_lr >= 0.0 && min_lr <= self.learning_rate) {
            return bad("min_lr must lie in [0, learning_rate]");
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let LrSchedule::CosineAnnealing { min_lr } = self.lr_schedule;
        let progress = epoch as f64 / self.epochs as f64;
        min_lr + 0.5 * (self.learning_rate - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: EncoderConfig,
    input_channels: usize,
    input_samples: usize,
    layout: Layout,
    params: Vec<f64>,
    pub training_history: Vec<EpochRecord>,
}

impl PartialEq for EncoderModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.input_channels == other.input_channels
            && self.input_samples == other.input_samples
            && self.params == other.params
            && self.training_history == other.training_history
    }
}

impl EncoderModel {
    /// Randomly initialized model for `channels x samples` inputs.
    pub fn init(config: EncoderConfig, channels: usize, samples: usize, seed: u64) -> Result<Self, EncoderError> {
        config.validate(channels)?;
        if channels == 0 || samples == 0 {
            return Err(EncoderError::InvalidConfig("input shape must be non-empty".into()));
        }
        let layout = Layout::new(&config, channels, samples);
        let mut rng = seed::named_rng(seed, "init");
        let mut params = vec![0.0; layout.total];
        for seg in &layout.segments {
            let fan_in = layout.fan_in(seg);
            if fan_in == 0 {
                continue;
            }
            let mut bound = (3.0 / fan_in as f64).sqrt();
            if seg.name.ends_with("pointwise.weight") {
                bound *= 0.5;
            }
            for v in &mut params[seg.offset..seg.offset + seg.len()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(Self {
            config,
            input_channels: channels,
            input_samples: samples,
            layout,
            params,
            training_history: Vec::new(),
        })
    }

    pub(crate) fn from_parts(
        config: EncoderConfig,
        channels: usize,
        samples: usize,
        params: Vec<f64>,
        training_history: Vec<EpochRecord>,
    ) -> Result<Self, EncoderError> {
        config.validate(channels)?;
        let layout = Layout::new(&config, channels, samples);
        if params.len() != layout.total {
            return Err(EncoderError::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self { config, input_channels: channels, input_samples: samples, layout, params, training_history })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.input_channels, self.input_samples)
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn segments(&self) -> &[Segment] {
        &self.layout.segments
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    fn network(&self) -> Network<'_> {
        Network { layout: &self.layout, params: &self.params, cfg: &self.config }
    }

    pub(crate) fn input_of(&self, trial: &EegTrial) -> Result<Vec<f64>, EncoderError> {
        if trial.channels() != self.input_channels || trial.samples() != self.input_samples {
            return Err(EncoderError::ShapeMismatch {
                expected_channels: self.input_channels,
                expected_samples: self.input_samples,
                channels: trial.channels(),
                samples: trial.samples(),
            });
        }
        Ok(trial.data().iter().map(|v| *v as f64).collect())
    }

    /// Inference-mode output (dropout off) as raw `f64` values.
    pub fn forward_raw(&self, trial: &EegTrial) -> Result<Vec<f64>, EncoderError> {
        let x = self.input_of(trial)?;
        Ok(self.network().forward(&x, None).z)
    }

    /// Inference-mode embedding of a padded trial.
    pub fn forward(&self, trial: &EegTrial) -> Result<EmbeddingVector, EncoderError> {
        Ok(EmbeddingVector::from_f64(&self.forward_raw(trial)?)?)
    }

    /// Alignment loss of one example and its gradient with respect to every
    /// parameter (inference mode, no dropout).
    pub fn loss_and_gradient(
        &self,
        trial: &EegTrial,
        target: &EmbeddingVector,
    ) -> Result<(f64, Vec<f64>), EncoderError> {
        let x = self.input_of(trial)?;
        let t = target.to_f64();
        let mut grads = vec![0.0; self.parameter_count()];
        let loss = self.loss_and_grad(&[(&x, &t)], None, &mut grads)?;
        Ok((loss, grads))
    }

    /// Mean alignment loss and its parameter gradient over `(input, target)`
    /// pairs, optionally with per-example dropout masks.
    pub(crate) fn loss_and_grad(
        &self,
        batch: &[(&[f64], &[f64])],
        masks: Option<Vec<Vec<f64>>>,
        grads: &mut [f64],
    ) -> Result<f64, EncoderError> {
        grads.fill(0.0);
        let net = self.network();
        let scale = 1.0 / batch.len() as f64;
        let mut masks = masks.map(|m| m.into_iter());
        let mut total = 0.0;
        for (x, target) in batch {
            let mask = masks.as_mut().and_then(|m| m.next());
            let cache = net.forward(x, mask);
            let (loss, mut dz) = loss_with_grad(&cache.z, target)?;
            total += loss;
            dz.iter_mut().for_each(|g| *g *= scale);
            net.backward(&cache, &dz, grads);
        }
        Ok(total * scale)
    }

    pub(crate) fn dropout_mask(&self, rng: &mut seed::Rng) -> Option<Vec<f64>> {
        let p = self.config.dropout_rate;
        if p == 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - p);
        Some((0..self.layout.dims.w).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect())
    }
}

fn cosine_parts(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64), EncoderError> {
    if a.len() != b.len() {
        return Err(EncoderError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(EncoderError::ZeroNorm);
    }
    Ok((dot, na, nb))
}

/// `1 - cos(z_eeg, z_txt)`, in `[0, 2]`.
pub fn cosine_loss(z_eeg: &[f64], z_txt: &[f64]) -> Result<f64, EncoderError> {
    let (dot, na, nb) = cosine_parts(z_eeg, z_txt)?;
    Ok(1.0 - dot / (na * nb))
}

/// Loss and its gradient with respect to `z`.
pub(crate) fn loss_with_grad(z: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), EncoderError> {
    let (dot, nz, nt) = cosine_parts(z, target)?;
    let cos = dot / (nz * nt);
    let grad = z
        .iter()
        .zip(target)
        .map(|(zi, ti)| -(ti / (nz * nt) - cos * zi / (nz * nz)))
        .collect();
    Ok((1.0 - cos, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EegTrial;
    use proptest::prelude::*;

    fn mini_config() -> EncoderConfig {
        EncoderConfig {
            temporal_dilations: vec![1, 2],
            temporal_kernel: 3,
            spatial_kernel_channels: 0,
            residual_blocks: 1,
            hidden_width: 4,
            dropout_rate: 0.0,
            leaky_relu_slope: 0.1,
            output_dim: 768,
        }
    }

    #[test]
    fn loss_fixed_points() {
        let v = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!(cosine_loss(&v, &v).unwrap().abs() < 1e-12);
        assert!((cosine_loss(&v, &neg).unwrap() - 2.0).abs() < 1e-12);
        assert!((cosine_loss(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(cosine_loss(&[0.0, 0.0], &[1.0, 0.0]), Err(EncoderError::ZeroNorm)));
    }

    proptest! {
        #[test]
        fn loss_symmetric_and_scale_invariant(
            a in proptest::collection::vec(-10.0f64..10.0, 8),
            b in proptest::collection::vec(-10.0f64..10.0, 8),
            s in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
            let ab = cosine_loss(&a, &b).unwrap();
            prop_assert!((ab - cosine_loss(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(ab >= -1e-9 && ab <= 2.0 + 1e-9);
            let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
            prop_assert!(cosine_loss(&a, &sa).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn forward_shape_contract() {
        let model = EncoderModel::init(mini_config(), 3, 16, 1).unwrap();
        let data: Vec<f32> = (0..48).map(|i| (i as f32 * 0.3).cos()).collect();
        let trial = EegTrial::new("S", "x", 500.0, 3, 16, data).unwrap();
        assert_eq!(model.forward(&trial).unwrap().dim(), 768);

        let zeros = EegTrial::new("S", "z", 500.0, 3, 16, vec![0.0; 48]).unwrap();
        assert!(model.forward_raw(&zeros).unwrap().iter().all(|v| v.is_finite()));

        let wrong = EegTrial::new("S", "w", 500.0, 2, 16, vec![0.0; 32]).unwrap();
        match model.forward(&wrong) {
            Err(EncoderError::ShapeMismatch { expected_channels: 3, expected_samples: 16, channels: 2, samples: 16 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = EncoderConfig { residual_blocks: 2, output_dim: 6, ..mini_config() };
        let mut model = EncoderModel::init(cfg, 3, 12, 5).unwrap();
        let x: Vec<f64> = (0..36).map(|i| (i as f64 * 0.37).sin() + 0.1 * i as f64 / 36.0).collect();
        let t: Vec<f64> = (0..6).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut grads = vec![0.0; model.parameter_count()];
        model.loss_and_grad(&[(&x, &t)], None, &mut grads).unwrap();
        let h = 1e-6;
        let mut scratch = vec![0.0; grads.len()];
        for i in 0..grads.len() {
            let orig = model.parameters()[i];
            model.parameters_mut()[i] = orig + h;
            let up = model.loss_and_grad(&[(&x, &t)], None, &mut scratch).unwrap();
            model.parameters_mut()[i] = orig - h;
            let down = model.loss_and_grad(&[(&x, &t)], None, &mut scratch).unwrap();
            model.parameters_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let seg = model.segments().iter().rfind(|s| s.offset <= i).map(|s| s.name.clone());
            assert!(
                (numeric - grads[i]).abs() < 1e-5 * (1.0 + numeric.abs()),
                "param {i} ({seg:?}): analytic {} numeric {numeric}",
                grads[i]
            );
        }
    }

    #[test]
    fn forward_is_reproducible_bit_for_bit() {
        let model = EncoderModel::init(mini_config(), 3, 16, 7).unwrap();
        let data: Vec<f32> = (0..48).map(|i| (i as f32 * 0.7).sin()).collect();
        let doubled: Vec<f32> = data.iter().map(|v| v * 2.0).collect();
        let x = EegTrial::new("S", "x", 500.0, 3, 16, data).unwrap();
        let x2 = EegTrial::new("S", "x", 500.0, 3, 16, doubled).unwrap();
        let run = || {
            let a = model.forward_raw(&x).unwrap();
            let b = model.forward_raw(&x2).unwrap();
            (1.0 - cosine_loss(&a, &b).unwrap(), a != b)
        };
        let (c1, changed) = run();
        let (c2, _) = run();
        assert!(changed);
        assert_eq!(c1.to_bits(), c2.to_bits());
    }

    #[test]
    fn config_validation() {
        let mut c = mini_config();
        c.temporal_dilations = vec![2, 2];
        assert!(c.validate(3).is_err());
        let mut c = mini_config();
        c.temporal_kernel = 4;
        assert!(c.validate(3).is_err());
        let mut c = mini_config();
        c.spatial_kernel_channels = 4;
        assert!(c.validate(3).is_err());
        assert!(EncoderConfig::default().validate(8).is_ok());
        let mut t = TrainConfig::default();
        t.epochs = 0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let t = TrainConfig { epochs: 10, ..TrainConfig::default() };
        assert!((t.learning_rate_at(0) - 1e-3).abs() < 1e-15);
        assert!(t.learning_rate_at(5) < 1e-3 && t.learning_rate_at(5) > 1e-5);
        assert!(t.learning_rate_at(9) > 1e-5);
        for e in 1..10 {
            assert!(t.learning_rate_at(e) < t.learning_rate_at(e - 1));
        }
    }

    #[test]
    fn partial_spatial_kernel_builds_wider_hidden_layer() {
        let cfg = EncoderConfig { spatial_kernel_channels: 2, ..mini_config() };
        let model = EncoderModel::init(cfg, 4, 12, 0).unwrap();
        let proj = model.segments().iter().find(|s| s.name == "projection.weight").unwrap();
        assert_eq!(proj.shape, vec![768, 4 * 3]);
        let trial = EegTrial::new("S", "x", 500.0, 4, 12, vec![0.5; 48]).unwrap();
        assert_eq!(model.forward(&trial).unwrap().dim(), 768);
    }
}
