//! The convolutional autoencoder and U-net: construction, training and inference.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TileAlphabet;
use crate::dataset::{argmax, batch_tensors, EncodedVolume, Fragment, MaskRect, Sample};
use crate::netcore::{adam_step, AdamState, ConvGeometry, LayerSpec, NetError, Network, Tensor, DEFAULT_LEARNING_RATE};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid layer ladder: {0}")]
    BadLadder(String),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training diverged at epoch {epoch}: validation loss {loss}")]
    DivergenceDetected { epoch: usize, loss: f64 },
    #[error("input {found:?} does not match the model input {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("mask {0:?} does not fit the input")]
    MaskOutOfBounds(MaskRect),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Autoencoder,
    Unet,
}

impl Architecture {
    /// Short tag used in reports and file names.
    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::Autoencoder => "AE",
            Architecture::Unet => "UNet",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Autoencoder => "ae",
            Architecture::Unet => "unet",
        })
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ae" | "autoencoder" => Ok(Architecture::Autoencoder),
            "unet" | "u-net" => Ok(Architecture::Unet),
            other => Err(format!("unknown architecture {other:?} (expected ae or unet)")),
        }
    }
}

/// Which output cells the training loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LossWeighting {
    /// Every cell and channel of the output.
    Full,
    /// Every cell, with mask cells weighted `mask_weight` times the rest.
    MaskWeighted { mask_weight: f64 },
    /// Mask cells only.
    MaskOnly,
}

/// Encoder resolutions; the decoder mirrors them.
pub const DEFAULT_LADDER: [[usize; 3]; 4] = [[16, 16, 13], [16, 16, 16], [8, 8, 32], [8, 8, 64]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// `[height, width, channels]` per encoder level, input first.
    pub ladder: Vec<[usize; 3]>,
    pub seed: u64,
    pub loss: LossWeighting,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, seed: u64) -> Self {
        Self {
            architecture,
            ladder: DEFAULT_LADDER.to_vec(),
            seed,
            loss: LossWeighting::Full,
        }
    }
}

fn step_geometry(from: [usize; 3], to: [usize; 3]) -> Result<usize, ModelError> {
    if from[0] == to[0] && from[1] == to[1] {
        Ok(1)
    } else if from[0] == 2 * to[0] && from[1] == 2 * to[1] {
        Ok(2)
    } else {
        Err(ModelError::BadLadder(format!(
            "{from:?} -> {to:?} is neither same-size nor a 2x downsample"
        )))
    }
}

/// Layer list for a ladder: 3x3 same-padded convolutions (stride 2 where the
/// resolution halves) with ReLU, then the mirrored transpose convolutions
/// (4x4 stride 2 for upsampling) ending in a sigmoid. The U-net concatenates
/// each encoder activation onto the decoder input at the same resolution.
pub fn layer_specs(cfg: &ModelConfig) -> Result<Vec<LayerSpec>, ModelError> {
    let ladder = &cfg.ladder;
    if ladder.len() < 2 {
        return Err(ModelError::BadLadder("need at least an input and one encoder level".into()));
    }
    if ladder.iter().any(|l| l.contains(&0)) {
        return Err(ModelError::BadLadder("zero extent in ladder".into()));
    }
    let n = ladder.len();
    let mut strides = Vec::with_capacity(n - 1);
    for i in 1..n {
        strides.push(step_geometry(ladder[i - 1], ladder[i])?);
    }
    let mut layers = Vec::new();
    for i in 1..n {
        let s = strides[i - 1];
        let geom = ConvGeometry::new((3, 3), (s, s), (1, 1));
        layers.push(LayerSpec::conv(&format!("enc{i}"), ladder[i - 1][2], ladder[i][2], geom));
        layers.push(LayerSpec::relu(&format!("enc{i}_relu"), ladder[i][2]));
    }
    for i in (1..n).rev() {
        let mut in_ch = ladder[i][2];
        if cfg.architecture == Architecture::Unet && i < n - 1 {
            layers.push(LayerSpec::concat_skip(
                &format!("dec{i}_skip"),
                in_ch,
                &format!("enc{i}_relu"),
                ladder[i][2],
            ));
            in_ch += ladder[i][2];
        }
        let geom = match strides[i - 1] {
            1 => ConvGeometry::new((3, 3), (1, 1), (1, 1)),
            _ => ConvGeometry::new((4, 4), (2, 2), (1, 1)),
        };
        let out_ch = ladder[i - 1][2];
        layers.push(LayerSpec::transpose_conv(&format!("dec{i}"), in_ch, out_ch, geom));
        if i > 1 {
            layers.push(LayerSpec::relu(&format!("dec{i}_relu"), out_ch));
        } else {
            layers.push(LayerSpec::sigmoid("output", out_ch));
        }
    }
    Ok(layers)
}

/// Builds and seeds the network described by `cfg`.
pub fn build<T: Scalar>(cfg: &ModelConfig) -> Result<Network<T>, ModelError> {
    let layers = layer_specs(cfg)?;
    let [h, w, c] = cfg.ladder[0];
    let mut net = Network::new((h, w, c), layers).map_err(|e| ModelError::BadLadder(e.to_string()))?;
    if net.output_shape() != (h, w, c) {
        return Err(ModelError::BadLadder(format!(
            "decoder produces {:?}, input is {:?}",
            net.output_shape(),
            (h, w, c)
        )));
    }
    net.initialize(cfg.seed);
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub validation_fraction: f64,
    /// Improvements smaller than this do not reset the patience counter.
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 10,
            max_epochs: 500,
            patience: 20,
            validation_fraction: 0.1,
            min_delta: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::BadConfig("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(ModelError::BadConfig("validation fraction must lie in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::BadConfig("learning rate must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(ModelError::BadConfig("max epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept (0 means the initial weights).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub train_samples: usize,
    pub val_samples: usize,
}

/// Per-element loss weights for a batch of samples, or `None` for the full loss.
pub fn loss_weights<T: Scalar>(samples: &[&Sample<T>], mode: LossWeighting) -> Option<Tensor<T>> {
    let (inside, outside) = match mode {
        LossWeighting::Full => return None,
        LossWeighting::MaskWeighted { mask_weight } => (T::from_f64_lossy(mask_weight), T::one()),
        LossWeighting::MaskOnly => (T::one(), T::zero()),
    };
    let first = samples.first()?;
    let (h, w, d) = (first.input.height, first.input.width, first.input.depth);
    let mut data = Vec::with_capacity(samples.len() * h * w * d);
    for s in samples {
        for r in 0..h {
            for c in 0..w {
                let v = if s.mask.contains(r, c) { inside } else { outside };
                data.extend(std::iter::repeat_n(v, d));
            }
        }
    }
    Some(Tensor::new(vec![samples.len(), h, w, d], data).expect("consistent weights"))
}

/// Mean loss over `samples`, evaluated in fixed-size chunks.
pub fn evaluate_loss<T: Scalar>(
    net: &Network<T>,
    samples: &[&Sample<T>],
    mode: LossWeighting,
) -> Result<f64, ModelError> {
    const CHUNK: usize = 64;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(CHUNK) {
        let (x, y) = batch_tensors(chunk);
        let w = loss_weights(chunk, mode);
        let l = net.loss(&x, &y, w.as_ref())?.as_f64();
        total += l * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

/// Mini-batch Adam with early stopping on a held-out fraction of `samples`.
/// Returns the best-validation weights.
pub fn train<T: Scalar>(
    mut net: Network<T>,
    samples: &[Sample<T>],
    loss_mode: LossWeighting,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Network<T>, TrainHistory), ModelError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut n_val = (cfg.validation_fraction * samples.len() as f64).round() as usize;
    if cfg.validation_fraction > 0.0 && samples.len() >= 2 {
        n_val = n_val.clamp(1, samples.len() - 1);
    } else {
        n_val = 0;
    }
    let val: Vec<&Sample<T>> = order[..n_val].iter().map(|&i| &samples[i]).collect();
    let mut train_idx: Vec<usize> = order[n_val..].to_vec();
    let train_refs: Vec<&Sample<T>> = train_idx.iter().map(|&i| &samples[i]).collect();
    // Without a held-out set the training loss stands in for validation.
    let monitor = if val.is_empty() { &train_refs } else { &val };

    let initial = evaluate_loss(&net, monitor, loss_mode)?;
    let mut history = TrainHistory {
        initial_val_loss: initial,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: initial,
        stopped_early: false,
        train_samples: train_idx.len(),
        val_samples: val.len(),
    };
    let mut best = net.clone();
    let mut adam = AdamState::<T>::new(&net.param_lens(), cfg.learning_rate);
    let mut stale = 0usize;

    for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
            let (x, y) = batch_tensors(&batch);
            let w = loss_weights(&batch, loss_mode);
            let (loss, grads) = net.loss_and_grad(&x, &y, w.as_ref(), false)?;
            sum += loss.as_f64() * batch.len() as f64;
            let g = grads.flat();
            let mut p = net.params_flat_mut();
            adam_step(&mut p, &g, &mut adam)?;
        }
        let train_loss = sum / train_idx.len() as f64;
        let val_loss = evaluate_loss(&net, monitor, loss_mode)?;
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if !val_loss.is_finite() || val_loss > 10.0 * initial {
            return Err(ModelError::DivergenceDetected { epoch, loss: val_loss });
        }
        if val_loss < history.best_val_loss - cfg.min_delta {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best = net.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok((best, history))
}

/// Forward pass on a batch of masked inputs; returns argmax tiles for each mask interior.
pub fn inpaint_batch<T: Scalar>(
    net: &Network<T>,
    alphabet: &TileAlphabet,
    items: &[(&EncodedVolume<T>, MaskRect)],
) -> Result<Vec<Fragment>, ModelError> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let shape = net.input_shape();
    let mut data = Vec::with_capacity(items.len() * shape.0 * shape.1 * shape.2);
    for (vol, mask) in items {
        let found = (vol.height, vol.width, vol.depth);
        if found != shape {
            return Err(ModelError::ShapeMismatch { expected: shape, found });
        }
        if !mask.fits(vol.height, vol.width) {
            return Err(ModelError::MaskOutOfBounds(*mask));
        }
        data.extend_from_slice(&vol.values);
    }
    let x = Tensor::new(vec![items.len(), shape.0, shape.1, shape.2], data)?;
    let y = net.forward(&x)?;
    let per = shape.0 * shape.1 * shape.2;
    let depth = shape.2;
    Ok(items
        .iter()
        .enumerate()
        .map(|(b, (_, mask))| {
            let out = &y.data()[b * per..(b + 1) * per];
            let cells = mask
                .cells()
                .map(|(r, c)| {
                    let start = (r * shape.1 + c) * depth;
                    let ch = argmax(&out[start..start + depth]);
                    alphabet.symbol(ch).expect("output depth equals alphabet size")
                })
                .collect();
            Fragment { mask: *mask, cells }
        })
        .collect())
}

/// Predicts the tiles inside `mask` for one masked input.
pub fn inpaint<T: Scalar>(
    net: &Network<T>,
    alphabet: &TileAlphabet,
    input: &EncodedVolume<T>,
    mask: &MaskRect,
) -> Result<Fragment, ModelError> {
    Ok(inpaint_batch(net, alphabet, &[(input, *mask)])?.remove(0))
}

/// One masked window to fill. `seed` drives stochastic inpainters.
#[derive(Debug, Clone, Copy)]
pub struct InpaintItem<'a, T> {
    pub input: &'a EncodedVolume<T>,
    pub mask: MaskRect,
    pub seed: u64,
}

/// Anything that fills mask interiors of 16x16 windows: the neural models and
/// the Markov baseline.
pub trait Inpainter<T: Scalar>: Send + Sync {
    fn id(&self) -> &str;

    fn inpaint_items(&self, items: &[InpaintItem<'_, T>]) -> Result<Vec<Fragment>, ModelError>;
}

/// A trained network paired with the alphabet it decodes to.
#[derive(Debug, Clone)]
pub struct NeuralInpainter<T> {
    pub id: String,
    pub net: Network<T>,
    pub alphabet: TileAlphabet,
}

impl<T: Scalar> Inpainter<T> for NeuralInpainter<T> {
    fn id(&self) -> &str {
        &self.id
    }

    fn inpaint_items(&self, items: &[InpaintItem<'_, T>]) -> Result<Vec<Fragment>, ModelError> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(CHUNK) {
            let pairs: Vec<(&EncodedVolume<T>, MaskRect)> = chunk.iter().map(|i| (i.input, i.mask)).collect();
            out.extend(inpaint_batch(&self.net, &self.alphabet, &pairs)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::LayerKind;

    #[test]
    fn ladder_shapes_match() {
        let net = build::<f64>(&ModelConfig::new(Architecture::Autoencoder, 0)).unwrap();
        let convs: Vec<(usize, usize, usize)> = net
            .layers()
            .iter()
            .zip(net.stage_shapes())
            .filter(|(l, _)| l.kind == LayerKind::Conv2d)
            .map(|(_, s)| *s)
            .collect();
        assert_eq!(convs, vec![(16, 16, 16), (8, 8, 32), (8, 8, 64)]);
        let decs: Vec<(usize, usize, usize)> = net
            .layers()
            .iter()
            .zip(net.stage_shapes())
            .filter(|(l, _)| l.kind == LayerKind::TransposeConv2d)
            .map(|(_, s)| *s)
            .collect();
        assert_eq!(decs, vec![(8, 8, 32), (16, 16, 16), (16, 16, 13)]);
        assert_eq!(net.output_shape(), (16, 16, 13));
    }

    #[test]
    fn unet_widens_decoder_inputs() {
        let ae = build::<f32>(&ModelConfig::new(Architecture::Autoencoder, 0)).unwrap();
        let un = build::<f32>(&ModelConfig::new(Architecture::Unet, 0)).unwrap();
        let dec_in = |n: &Network<f32>| -> Vec<usize> {
            n.layers()
                .iter()
                .filter(|l| l.kind == LayerKind::TransposeConv2d)
                .map(|l| l.in_channels)
                .collect()
        };
        let (a, u) = (dec_in(&ae), dec_in(&un));
        assert_eq!(a, vec![64, 32, 16]);
        assert_eq!(u, vec![64, 64, 32]);
        // the bottleneck has no skip; the two higher resolutions do
        assert!(u[1] > a[1] && u[2] > a[2]);
        assert!(un.param_count() > ae.param_count());
    }

    #[test]
    fn builds_are_reproducible() {
        let cfg = ModelConfig::new(Architecture::Unet, 11);
        let a = build::<f32>(&cfg).unwrap();
        let b = build::<f32>(&cfg).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_eq!(a, b);
    }

    #[test]
    fn bad_ladders() {
        let mut cfg = ModelConfig::new(Architecture::Autoencoder, 0);
        cfg.ladder = vec![[16, 16, 13], [5, 5, 8]];
        assert!(matches!(build::<f32>(&cfg), Err(ModelError::BadLadder(_))));
        cfg.ladder = vec![[16, 16, 13]];
        assert!(matches!(build::<f32>(&cfg), Err(ModelError::BadLadder(_))));
    }

    #[test]
    fn forward_in_unit_interval() {
        let net = build::<f32>(&ModelConfig::new(Architecture::Autoencoder, 5)).unwrap();
        let x = Tensor::<f32>::zeros(vec![2, 16, 16, 13]);
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 16, 16, 13]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn train_config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        c = TrainConfig {
            validation_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_training_set() {
        let net = build::<f32>(&ModelConfig::new(Architecture::Autoencoder, 0)).unwrap();
        assert!(matches!(
            train(net, &[], LossWeighting::Full, &TrainConfig::default(), 0),
            Err(ModelError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn architecture_parse() {
        assert_eq!("ae".parse::<Architecture>().unwrap(), Architecture::Autoencoder);
        assert_eq!("UNET".parse::<Architecture>().unwrap(), Architecture::Unet);
        assert!("gan".parse::<Architecture>().is_err());
    }
}
