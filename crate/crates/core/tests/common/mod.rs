//! Independent reference implementations shared by the integration tests.
//! Each one is written directly from the definition with plain loops.

#![allow(dead_code)]

use inpaint_core::corpus::TileAlphabet;
use inpaint_core::dataset::{EncodedVolume, Fragment, MaskRect};
use inpaint_core::eval::StructureSet;
use inpaint_core::netcore::{ConvGeometry, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn at4(shape: &[usize], a: usize, b: usize, c: usize, d: usize) -> usize {
    ((a * shape[1] + b) * shape[2] + c) * shape[3] + d
}

/// Direct cross-correlation: `out[n,i,j,f] = b[f] + Σ x[n, i*s+a-p, j*s+b-p, c] w[a,b,c,f]`.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: (usize, usize), pad: (usize, usize)) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let (n, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw, f) = (ws[0], ws[1], ws[3]);
    assert_eq!(ws[2], c);
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    let os = [n, ho, wo, f];
    let mut out = vec![0.0; n * ho * wo * f];
    for bn in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                for o in 0..f {
                    let mut acc = b[o];
                    for a in 0..kh {
                        for bb in 0..kw {
                            let r = (i * stride.0 + a) as isize - pad.0 as isize;
                            let q = (j * stride.1 + bb) as isize - pad.1 as isize;
                            if r < 0 || q < 0 || r as usize >= h || q as usize >= wd {
                                continue;
                            }
                            for ci in 0..c {
                                acc += x.data()[at4(xs, bn, r as usize, q as usize, ci)] * w.data()[at4(ws, a, bb, ci, o)];
                            }
                        }
                    }
                    out[at4(&os, bn, i, j, o)] = acc;
                }
            }
        }
    }
    Tensor::new(os.to_vec(), out).unwrap()
}

/// Transpose convolution by zero-interleaving the input (stride - 1 zeros
/// between pixels), padding by `k - 1 - p`, and running a stride-1
/// convolution with the spatially flipped, channel-swapped kernel.
/// Weights are `[kh, kw, C_out, C_in]`. Requires `p < k`.
pub fn dilation_transpose_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: (usize, usize), pad: (usize, usize)) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let (n, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw, cout) = (ws[0], ws[1], ws[2]);
    assert!(pad.0 < kh && pad.1 < kw);
    let (eh, ew) = (kh - 1 - pad.0, kw - 1 - pad.1);
    let dh = (h - 1) * stride.0 + 1 + 2 * eh;
    let dw = (wd - 1) * stride.1 + 1 + 2 * ew;
    let ds = [n, dh, dw, cin];
    let mut dil = vec![0.0; n * dh * dw * cin];
    for bn in 0..n {
        for i in 0..h {
            for j in 0..wd {
                for c in 0..cin {
                    dil[at4(&ds, bn, eh + i * stride.0, ew + j * stride.1, c)] = x.data()[at4(xs, bn, i, j, c)];
                }
            }
        }
    }
    let fs = [kh, kw, cin, cout];
    let mut flipped = vec![0.0; kh * kw * cin * cout];
    for a in 0..kh {
        for bb in 0..kw {
            for o in 0..cout {
                for c in 0..cin {
                    flipped[at4(&fs, kh - 1 - a, kw - 1 - bb, c, o)] = w.data()[at4(ws, a, bb, o, c)];
                }
            }
        }
    }
    naive_conv(
        &Tensor::new(ds.to_vec(), dil).unwrap(),
        &Tensor::new(fs.to_vec(), flipped).unwrap(),
        b,
        (1, 1),
        (0, 0),
    )
}

/// Gradients of `Σ g * conv(x)` by direct summation: `(dx, dw, db)`.
pub fn naive_conv_grads(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    g: &Tensor<f64>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (xs, ws, gs) = (x.shape(), w.shape(), g.shape());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; ws[3]];
    for bn in 0..gs[0] {
        for i in 0..gs[1] {
            for j in 0..gs[2] {
                for o in 0..gs[3] {
                    let go = g.data()[at4(gs, bn, i, j, o)];
                    db[o] += go;
                    for a in 0..ws[0] {
                        for bb in 0..ws[1] {
                            let r = (i * stride.0 + a) as isize - pad.0 as isize;
                            let q = (j * stride.1 + bb) as isize - pad.1 as isize;
                            if r < 0 || q < 0 || r as usize >= xs[1] || q as usize >= xs[2] {
                                continue;
                            }
                            for c in 0..xs[3] {
                                let xi = at4(xs, bn, r as usize, q as usize, c);
                                let wi = at4(ws, a, bb, c, o);
                                dw[wi] += x.data()[xi] * go;
                                dx[xi] += w.data()[wi] * go;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Gradients of `Σ g * transpose_conv(x)` from the scatter definition
/// `out[n, i*s-p+a, j*s-p+b, o] += x[n,i,j,c] w[a,b,o,c]`: `(dx, dw, db)`.
pub fn scatter_transpose_grads(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    g: &Tensor<f64>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (xs, ws, gs) = (x.shape(), w.shape(), g.shape());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; ws[2]];
    for bn in 0..gs[0] {
        for r in 0..gs[1] {
            for q in 0..gs[2] {
                for o in 0..gs[3] {
                    db[o] += g.data()[at4(gs, bn, r, q, o)];
                }
            }
        }
        for i in 0..xs[1] {
            for j in 0..xs[2] {
                for a in 0..ws[0] {
                    for bb in 0..ws[1] {
                        let r = (i * stride.0 + a) as isize - pad.0 as isize;
                        let q = (j * stride.1 + bb) as isize - pad.1 as isize;
                        if r < 0 || q < 0 || r as usize >= gs[1] || q as usize >= gs[2] {
                            continue;
                        }
                        for o in 0..ws[2] {
                            let go = g.data()[at4(gs, bn, r as usize, q as usize, o)];
                            for c in 0..xs[3] {
                                let xi = at4(xs, bn, i, j, c);
                                let wi = at4(ws, a, bb, o, c);
                                dw[wi] += x.data()[xi] * go;
                                dx[xi] += w.data()[wi] * go;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Weighted mean binary cross-entropy, one element at a time.
pub fn scalar_bce(pred: &[f64], target: &[f64], weights: Option<&[f64]>) -> f64 {
    let eps = 1e-7;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..pred.len() {
        let w = weights.map_or(1.0, |w| w[i]);
        let p = pred[i].clamp(eps, 1.0 - eps);
        let t = target[i];
        num += w * -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        den += w;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Bias-corrected Adam for one scalar parameter.
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub t: i32,
}

impl ScalarAdam {
    pub fn new() -> Self {
        Self { m: 0.0, v: 0.0, t: 0 }
    }

    pub fn step(&mut self, x: f64, g: f64, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mh = self.m / (1.0 - b1.powf(self.t as f64));
        let vh = self.v / (1.0 - b2.powf(self.t as f64));
        x - lr * mh / (vh.sqrt() + eps)
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random geometry for a case that both operators accept.
pub struct ConvCase {
    pub x: Tensor<f64>,
    pub w: Tensor<f64>,
    pub b: Vec<f64>,
    pub geom: ConvGeometry,
}

pub fn conv_case(rng: &mut ChaCha8Rng) -> ConvCase {
    loop {
        let n = rng.gen_range(1..=2);
        let (h, w) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
        let (c, f) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
        let k = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let s = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let p = (rng.gen_range(0..k.0), rng.gen_range(0..k.1));
        let geom = ConvGeometry::new(k, s, p);
        if geom.conv_output(h, w).is_none() {
            continue;
        }
        return ConvCase {
            x: random_tensor(rng, &[n, h, w, c]),
            w: random_tensor(rng, &[k.0, k.1, c, f]),
            b: (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            geom,
        };
    }
}

pub fn transpose_case(rng: &mut ChaCha8Rng) -> ConvCase {
    loop {
        let n = rng.gen_range(1..=2);
        let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
        let k = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let s = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let p = (rng.gen_range(0..k.0), rng.gen_range(0..k.1));
        let geom = ConvGeometry::new(k, s, p);
        if geom.transpose_output(h, w).is_none() {
            continue;
        }
        return ConvCase {
            x: random_tensor(rng, &[n, h, w, cin]),
            w: random_tensor(rng, &[k.0, k.1, cout, cin]),
            b: (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            geom,
        };
    }
}

/// Counting oracle for the three mask metrics: `(tbyt, no_sky, structures)`.
pub fn count_metrics(pred: &Fragment, truth: &Fragment, sky: char, set: &StructureSet) -> (f64, Option<f64>, Option<f64>) {
    let (mut all, mut all_hit) = (0u32, 0u32);
    let (mut ns, mut ns_hit) = (0u32, 0u32);
    let (mut st, mut st_hit) = (0u32, 0u32);
    for dr in 0..truth.mask.height {
        for dc in 0..truth.mask.width {
            let (r, c) = (truth.mask.row + dr, truth.mask.col + dc);
            let t = truth.get(r, c);
            let hit = pred.get(r, c) == t;
            all += 1;
            all_hit += hit as u32;
            if t != sky {
                ns += 1;
                ns_hit += hit as u32;
            }
            let is_struct = set.symbols.contains(&t) || (Some(t) == set.ground && r <= set.max_ground_row);
            if is_struct {
                st += 1;
                st_hit += hit as u32;
            }
        }
    }
    let pct = |h: u32, n: u32| (n > 0).then(|| 100.0 * h as f64 / n as f64);
    (pct(all_hit, all).unwrap(), pct(ns_hit, ns), pct(st_hit, st))
}

/// A random fully one-hot 16x16 window and a copy with `mask` erased.
pub fn random_window(rng: &mut ChaCha8Rng, alphabet: &TileAlphabet, mask: &MaskRect) -> (EncodedVolume<f64>, EncodedVolume<f64>) {
    let d = alphabet.depth();
    let mut target = EncodedVolume::zeros(16, 16, d);
    for r in 0..16 {
        for c in 0..16 {
            target.cell_mut(r, c)[rng.gen_range(0..d)] = 1.0;
        }
    }
    let mut input = target.clone();
    input.erase(mask);
    (input, target)
}

/// Largest deviation of the library from the oracles over `cases` random
/// cases per operator: `[conv forward, conv backward, transpose forward,
/// transpose backward, bce, adam]`.
pub fn oracle_deviations(cases: usize, seed: u64) -> [f64; 6] {
    use inpaint_core::netcore::{
        adam_step, bce_loss, conv2d_backward, conv2d_forward_cached, transpose_conv2d_backward,
        transpose_conv2d_forward, AdamState,
    };
    let mut r = rng(seed);
    let mut dev = [0.0f64; 6];
    for _ in 0..cases {
        let case = conv_case(&mut r);
        let bias = Tensor::new(vec![case.b.len()], case.b.clone()).unwrap();
        let (s, p) = (case.geom.stride, case.geom.padding);
        let (out, cols) = conv2d_forward_cached(&case.x, &case.w, &bias, &case.geom).unwrap();
        let oracle = naive_conv(&case.x, &case.w, &case.b, s, p);
        assert_eq!(out.shape(), oracle.shape());
        dev[0] = dev[0].max(max_abs_diff(out.data(), oracle.data()));
        let g = random_tensor(&mut r, out.shape());
        let grads = conv2d_backward(case.x.shape(), &cols, &case.w, &g, &case.geom, true).unwrap();
        let (dx, dw, db) = naive_conv_grads(&case.x, &case.w, &g, s, p);
        dev[1] = dev[1]
            .max(max_abs_diff(grads.input.unwrap().data(), &dx))
            .max(max_abs_diff(grads.weights.data(), &dw))
            .max(max_abs_diff(grads.bias.data(), &db));
    }
    for _ in 0..cases {
        let case = transpose_case(&mut r);
        let bias = Tensor::new(vec![case.b.len()], case.b.clone()).unwrap();
        let (s, p) = (case.geom.stride, case.geom.padding);
        let out = transpose_conv2d_forward(&case.x, &case.w, &bias, &case.geom).unwrap();
        let oracle = dilation_transpose_conv(&case.x, &case.w, &case.b, s, p);
        assert_eq!(out.shape(), oracle.shape());
        dev[2] = dev[2].max(max_abs_diff(out.data(), oracle.data()));
        let g = random_tensor(&mut r, out.shape());
        let grads = transpose_conv2d_backward(&case.x, &case.w, &g, &case.geom, true).unwrap();
        let (dx, dw, db) = scatter_transpose_grads(&case.x, &case.w, &g, s, p);
        dev[3] = dev[3]
            .max(max_abs_diff(grads.input.unwrap().data(), &dx))
            .max(max_abs_diff(grads.weights.data(), &dw))
            .max(max_abs_diff(grads.bias.data(), &db));
    }
    for i in 0..cases {
        let n = r.gen_range(1..=200);
        // Include values inside the clamp band.
        let pred: Vec<f64> = (0..n)
            .map(|_| match r.gen_range(0..10) {
                0 => r.gen_range(0.0..1e-8),
                1 => 1.0 - r.gen_range(0.0..1e-8),
                _ => r.gen_range(0.0..1.0),
            })
            .collect();
        let target: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..2u8))).collect();
        let weights: Option<Vec<f64>> = (i % 2 == 1).then(|| (0..n).map(|_| r.gen_range(0.0..3.0)).collect());
        let t = |v: &[f64]| Tensor::new(vec![v.len()], v.to_vec()).unwrap();
        let wt = weights.as_deref().map(t);
        let got = bce_loss(&t(&pred), &t(&target), wt.as_ref()).unwrap();
        dev[4] = dev[4].max((got - scalar_bce(&pred, &target, weights.as_deref())).abs());
    }
    for _ in 0..cases {
        let lens: Vec<usize> = (0..r.gen_range(1..=4)).map(|_| r.gen_range(1..=8)).collect();
        let lr = r.gen_range(1e-4..1e-1);
        let mut params: Vec<Vec<f64>> = lens.iter().map(|&l| (0..l).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
        let mut oracle_params = params.clone();
        let mut oracles: Vec<Vec<ScalarAdam>> = lens.iter().map(|&l| (0..l).map(|_| ScalarAdam::new()).collect()).collect();
        let mut state = AdamState::<f64>::new(&lens, lr);
        for _ in 0..r.gen_range(1..=12) {
            let grads: Vec<Vec<f64>> = lens.iter().map(|&l| (0..l).map(|_| r.gen_range(-3.0..3.0)).collect()).collect();
            let mut views: Vec<&mut [f64]> = params.iter_mut().map(|p| p.as_mut_slice()).collect();
            let gv: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            adam_step(&mut views, &gv, &mut state).unwrap();
            for (ti, g) in grads.iter().enumerate() {
                for (j, &gj) in g.iter().enumerate() {
                    oracle_params[ti][j] = oracles[ti][j].step(oracle_params[ti][j], gj, lr);
                }
            }
        }
        for (a, b) in params.iter().zip(&oracle_params) {
            dev[5] = dev[5].max(max_abs_diff(a, b));
        }
    }
    dev
}

/// Finite-difference check of a freshly initialized 64-bit model on one
/// random masked window.
pub fn gradcheck_architecture(
    arch: inpaint_core::models::Architecture,
    seed: u64,
    cfg: &inpaint_core::netcore::GradCheckConfig,
) -> inpaint_core::netcore::GradCheckReport {
    use inpaint_core::models::{build, ModelConfig};
    let alphabet = TileAlphabet::smb();
    let mut net = build::<f64>(&ModelConfig::new(arch, seed)).unwrap();
    let mut r = rng(seed ^ 0xabcd);
    jitter_biases(&mut net, &mut r);
    let mask = MaskRect::new(12, r.gen_range(0..=10), 4, 5);
    let (input, target) = random_window(&mut r, &alphabet, &mask);
    let x = input.to_tensor().reshape(vec![1, 16, 16, alphabet.depth()]).unwrap();
    let y = target.to_tensor().reshape(vec![1, 16, 16, alphabet.depth()]).unwrap();
    inpaint_core::netcore::grad_check(&net, &x, &y, None, cfg)
}

/// Zero biases put every pre-activation fed only by zero inputs (erased mask
/// cells, dead channels) exactly on a ReLU kink, where central differences
/// are meaningless. Small random biases move the check to a generic point.
pub fn jitter_biases(net: &mut inpaint_core::netcore::Network<f64>, rng: &mut ChaCha8Rng) {
    let biases: Vec<(String, Tensor<f64>)> = net
        .named_params()
        .into_iter()
        .filter(|(n, _)| n.ends_with(".bias"))
        .map(|(n, t)| (n, t.map(|_| 0.0)))
        .collect();
    for (name, t) in biases {
        let n = t.len();
        let values = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
        net.set_named_param(&name, Tensor::new(vec![n], values).unwrap()).unwrap();
    }
}

/// The generated corpus, loaded back through the parser and padded to 16 rows.
pub fn synthetic_split(seed: u64) -> inpaint_core::corpus::CorpusSplit {
    use inpaint_core::corpus::{load_split, LEVEL_HEIGHT};
    let dir = tempfile::tempdir().unwrap();
    let manifest = inpaint_core::synth::write_corpus(dir.path(), seed).unwrap();
    let alphabet = TileAlphabet::smb();
    load_split(dir.path(), &manifest, &alphabet)
        .unwrap()
        .padded(LEVEL_HEIGHT, alphabet.sky_symbol())
        .unwrap()
}

pub mod criteria;
