//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::bce_loss;
use super::network::{Gradients, LayerKind, Network};
use super::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Pass iff every checked coordinate has relative error below this.
    pub tolerance: f64,
    /// Coordinates checked per parameter tensor (all of them when the tensor is smaller).
    pub coords_per_tensor: usize,
    /// Lower bound on the relative error denominator. Gradients below it are
    /// held to an absolute error of `tolerance * abs_floor`, which stays above
    /// the round-off of a central difference on an order-one loss.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            coords_per_tensor: 24,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates left out because the probe straddled a ReLU kink.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    /// `(compared, skipped at kinks)` over all tensors.
    pub fn coverage(&self) -> (usize, usize) {
        self.tensors
            .iter()
            .fold((0, 0), |(c, k), t| (c + t.checked, k + t.skipped_kinks))
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks the network's own analytic gradients of the BCE loss.
pub fn grad_check(
    net: &Network<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    weights: Option<&Tensor<f64>>,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    match net.loss_and_grad(input, target, weights, true) {
        Ok((_, grads)) => grad_check_against(net, input, target, weights, &grads, cfg),
        Err(_) => GradCheckReport {
            tensors: vec![TensorCheck {
                name: "forward".into(),
                checked: 0,
                skipped_kinks: 0,
                max_rel_error: f64::INFINITY,
            }],
            tolerance: cfg.tolerance,
        },
    }
}

/// Loss at a probe point and the sign pattern of every ReLU input.
fn probe(net: &Network<f64>, input: &Tensor<f64>, target: &Tensor<f64>, weights: Option<&Tensor<f64>>) -> (f64, Vec<bool>) {
    let Ok(trace) = net.forward_trace(input) else {
        return (f64::NAN, Vec::new());
    };
    let loss = bce_loss(trace.output(), target, weights).unwrap_or(f64::NAN);
    let mut pattern = Vec::new();
    for (i, l) in net.layers().iter().enumerate() {
        if l.kind == LayerKind::Relu {
            let x = if i == 0 { &trace.input } else { &trace.outputs[i - 1] };
            pattern.extend(x.data().iter().map(|&v| v > 0.0));
        }
    }
    (loss, pattern)
}

struct Tally {
    checked: usize,
    kinks: usize,
    worst: f64,
}

impl Tally {
    fn new() -> Self {
        Self {
            checked: 0,
            kinks: 0,
            worst: 0.0,
        }
    }

    /// Records one coordinate. Probes whose two sides disagree on some ReLU
    /// straddle a kink, where the central difference is not a derivative.
    fn record(&mut self, analytic: f64, up: (f64, Vec<bool>), down: (f64, Vec<bool>), cfg: &GradCheckConfig) {
        if up.1 != down.1 {
            self.kinks += 1;
            return;
        }
        self.checked += 1;
        let numeric = (up.0 - down.0) / (2.0 * cfg.step);
        let err = relative_error(analytic, numeric, cfg.abs_floor);
        self.worst = if err.is_nan() { f64::INFINITY } else { self.worst.max(err) };
    }

    fn finish(self, name: String) -> TensorCheck {
        TensorCheck {
            name,
            checked: self.checked,
            skipped_kinks: self.kinks,
            max_rel_error: if self.checked == 0 { f64::INFINITY } else { self.worst },
        }
    }
}

/// Compares supplied `analytic` gradients with central differences of the loss.
pub fn grad_check_against(
    net: &Network<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    weights: Option<&Tensor<f64>>,
    analytic: &Gradients<f64>,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tensors = Vec::new();

    let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
    let flat = analytic.flat();
    let mut net = net.clone();
    for (ti, name) in names.iter().enumerate() {
        let len = flat[ti].len();
        let picks = sample(&mut rng, len, cfg.coords_per_tensor.min(len)).into_vec();
        let mut tally = Tally::new();
        for &k in &picks {
            let orig = net.params_flat_mut()[ti][k];
            net.params_flat_mut()[ti][k] = orig + cfg.step;
            let up = probe(&net, input, target, weights);
            net.params_flat_mut()[ti][k] = orig - cfg.step;
            let down = probe(&net, input, target, weights);
            net.params_flat_mut()[ti][k] = orig;
            tally.record(flat[ti][k], up, down, cfg);
        }
        tensors.push(tally.finish(name.clone()));
    }

    if let Some(gin) = &analytic.input {
        let len = input.len();
        let picks = sample(&mut rng, len, cfg.coords_per_tensor.min(len)).into_vec();
        let mut tally = Tally::new();
        let mut x = input.clone();
        for &k in &picks {
            let orig = x.data()[k];
            x.data_mut()[k] = orig + cfg.step;
            let up = probe(&net, &x, target, weights);
            x.data_mut()[k] = orig - cfg.step;
            let down = probe(&net, &x, target, weights);
            x.data_mut()[k] = orig;
            tally.record(gin.data()[k], up, down, cfg);
        }
        tensors.push(tally.finish("input".into()));
    }

    GradCheckReport {
        tensors,
        tolerance: cfg.tolerance,
    }
}
