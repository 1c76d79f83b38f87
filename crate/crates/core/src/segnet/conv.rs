//! Shallow encoder-decoder producing a per-pixel probability map for one
//! target class.
//!
//! conv3x3(1->8) relu, maxpool 2, conv3x3(8->16) relu, nearest upsample 2,
//! concat with the first feature map, conv3x3(24->8) relu, conv1x1(8->1),
//! sigmoid. Borders are zero-padded; odd sizes pool over partial windows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{lbfgs_minimize, Control, LbfgsConfig, StopReason};
use crate::volume::{Mask2d, VoxelVolume};

const C1: usize = 8;
const C2: usize = 16;
const C3: usize = 8;
const CAT: usize = C1 + C2;

// flat parameter layout
const W1: usize = 0;
const B1: usize = W1 + C1 * 9;
const W2: usize = B1 + C1;
const B2: usize = W2 + C2 * C1 * 9;
const W3: usize = B2 + C2;
const B3: usize = W3 + C3 * CAT * 9;
const W4: usize = B3 + C3;
const B4: usize = W4 + C3;
pub const CONV_PARAM_COUNT: usize = B4 + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvExtractor {
    pub params: Vec<f64>,
}

fn glorot(rng: &mut ChaCha8Rng, out: &mut [f64], fan_in: usize, fan_out: usize) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in out {
        *v = rng.random_range(-a..a);
    }
}

/// `out[co] += sum_ci w[co,ci] (*) in[ci]` with 3x3 kernels, zero padding.
fn conv3x3(input: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; cout * hw];
    for co in 0..cout {
        let o = &mut out[co * hw..(co + 1) * hw];
        o.fill(bias[co]);
        for ci in 0..cin {
            let inp = &input[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wt = weight[((co * cin + ci) * 3 + ky) * 3 + kx];
                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    if x0 >= x1 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y + ky;
                        if sy == 0 || sy > h {
                            continue;
                        }
                        let sy = sy - 1;
                        let orow = &mut o[y * w + x0..y * w + x1];
                        let irow = &inp[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (a, b) in orow.iter_mut().zip(irow) {
                            *a += wt * b;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let hw = h * w;
    for co in 0..cout {
        let d = &dout[co * hw..(co + 1) * hw];
        dbias[co] += d.iter().sum::<f64>();
        for ci in 0..cin {
            let inp = &input[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((co * cin + ci) * 3 + ky) * 3 + kx;
                    let wt = weight[widx];
                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in 0..h {
                        let sy = y + ky;
                        if sy == 0 || sy > h {
                            continue;
                        }
                        let sy = sy - 1;
                        let drow = &d[y * w + x0..y * w + x1];
                        let irow = &inp[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        acc += drow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(din) = dinput.as_deref_mut() {
                            let dirow = &mut din[ci * hw + sy * w + x0 + kx - 1..ci * hw + sy * w + x1 + kx - 1];
                            for (a, b) in dirow.iter_mut().zip(drow) {
                                *a += wt * b;
                            }
                        }
                    }
                    dweight[widx] += acc;
                }
            }
        }
    }
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

/// 2x2 max pooling over channels; returns pooled values and argmax indices.
fn maxpool2(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![f64::NEG_INFINITY; c * h2 * w2];
    let mut arg = vec![0usize; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = ch * h * w + y * w + x;
                let o = ch * h2 * w2 + (y / 2) * w2 + x / 2;
                if input[i] > out[o] {
                    out[o] = input[i];
                    arg[o] = i;
                }
            }
        }
    }
    (out, arg, h2, w2)
}

fn upsample2(input: &[f64], c: usize, h2: usize, w2: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch * h * w + y * w + x] = input[ch * h2 * w2 + (y / 2) * w2 + x / 2];
            }
        }
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

struct Cache {
    z1: Vec<f64>,
    arg: Vec<usize>,
    h2: usize,
    w2: usize,
    z2: Vec<f64>,
    cat: Vec<f64>,
    z3: Vec<f64>,
    a3: Vec<f64>,
    logits: Vec<f64>,
}

fn forward(p: &[f64], img: &[f64], h: usize, w: usize) -> Cache {
    let hw = h * w;
    let z1 = conv3x3(img, 1, h, w, &p[W1..B1], &p[B1..W2], C1);
    let a1 = relu(&z1);
    let (p1, arg, h2, w2) = maxpool2(&a1, C1, h, w);
    let z2 = conv3x3(&p1, C1, h2, w2, &p[W2..B2], &p[B2..W3], C2);
    let a2 = relu(&z2);
    let u2 = upsample2(&a2, C2, h2, w2, h, w);
    let mut cat = a1;
    cat.extend_from_slice(&u2);
    let z3 = conv3x3(&cat, CAT, h, w, &p[W3..B3], &p[B3..W4], C3);
    let a3 = relu(&z3);
    let mut logits = vec![p[B4]; hw];
    for c in 0..C3 {
        let wt = p[W4 + c];
        for (l, a) in logits.iter_mut().zip(&a3[c * hw..(c + 1) * hw]) {
            *l += wt * a;
        }
    }
    Cache {
        z1,
        arg,
        h2,
        w2,
        z2,
        cat,
        z3,
        a3,
        logits,
    }
}

/// Summed binary cross-entropy of one patch and its gradient.
fn patch_loss_grad(p: &[f64], img: &[f64], target: &[f64], h: usize, w: usize) -> (f64, Vec<f64>) {
    let hw = h * w;
    let c = forward(p, img, h, w);
    let mut g = vec![0.0; CONV_PARAM_COUNT];
    let mut loss = 0.0;
    let mut dlog = vec![0.0; hw];
    for i in 0..hw {
        let z = c.logits[i];
        loss += softplus(z) - target[i] * z;
        dlog[i] = sigmoid(z) - target[i];
    }
    // 1x1 output layer
    g[B4] = dlog.iter().sum();
    let mut dz3 = vec![0.0; C3 * hw];
    for ch in 0..C3 {
        let a = &c.a3[ch * hw..(ch + 1) * hw];
        g[W4 + ch] = a.iter().zip(&dlog).map(|(x, y)| x * y).sum();
        let wt = p[W4 + ch];
        let z = &c.z3[ch * hw..(ch + 1) * hw];
        for i in 0..hw {
            dz3[ch * hw + i] = if z[i] > 0.0 { wt * dlog[i] } else { 0.0 };
        }
    }
    let mut dcat = vec![0.0; CAT * hw];
    {
        let (gw, gb) = g[W3..W4].split_at_mut(B3 - W3);
        conv3x3_backward(&c.cat, CAT, h, w, &p[W3..B3], C3, &dz3, gw, gb, Some(&mut dcat));
    }
    let (h2, w2) = (c.h2, c.w2);
    let hw2 = h2 * w2;
    // upsample backward into the pooled branch
    let mut dz2 = vec![0.0; C2 * hw2];
    for ch in 0..C2 {
        for y in 0..h {
            for x in 0..w {
                dz2[ch * hw2 + (y / 2) * w2 + x / 2] += dcat[(C1 + ch) * hw + y * w + x];
            }
        }
    }
    for (d, z) in dz2.iter_mut().zip(&c.z2) {
        if *z <= 0.0 {
            *d = 0.0;
        }
    }
    let pooled: Vec<f64> = c.arg.iter().map(|&i| c.cat[i]).collect();
    let mut dp1 = vec![0.0; C1 * hw2];
    {
        let (gw, gb) = g[W2..W3].split_at_mut(B2 - W2);
        conv3x3_backward(&pooled, C1, h2, w2, &p[W2..B2], C2, &dz2, gw, gb, Some(&mut dp1));
    }
    let mut dz1 = dcat[..C1 * hw].to_vec();
    for (o, &i) in c.arg.iter().enumerate() {
        dz1[i] += dp1[o];
    }
    for (d, z) in dz1.iter_mut().zip(&c.z1) {
        if *z <= 0.0 {
            *d = 0.0;
        }
    }
    {
        let (gw, gb) = g[W1..W2].split_at_mut(B1 - W1);
        conv3x3_backward(img, 1, h, w, &p[W1..B1], C1, &dz1, gw, gb, None);
    }
    (loss, g)
}

/// One training example: a slice crop and its binary target.
#[derive(Debug, Clone)]
pub struct Patch {
    pub h: usize,
    pub w: usize,
    pub image: Vec<f64>,
    pub target: Vec<f64>,
}

fn batch_loss_grad(p: &[f64], patches: &[Patch]) -> (f64, Vec<f64>) {
    let parts: Vec<(f64, Vec<f64>)> = patches
        .par_iter()
        .map(|q| patch_loss_grad(p, &q.image, &q.target, q.h, q.w))
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; CONV_PARAM_COUNT];
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub patches: usize,
    pub patch_size: usize,
    pub max_iters: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            patches: 24,
            patch_size: 48,
            max_iters: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub stalled: bool,
}

impl ConvExtractor {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0.0; CONV_PARAM_COUNT];
        glorot(&mut rng, &mut p[W1..B1], 9, C1 * 9);
        glorot(&mut rng, &mut p[W2..B2], C1 * 9, C2 * 9);
        glorot(&mut rng, &mut p[W3..B3], CAT * 9, C3 * 9);
        glorot(&mut rng, &mut p[W4..B4], C3, 1);
        Self { params: p }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != CONV_PARAM_COUNT {
            return Err(Error::DimensionMismatch(format!(
                "extractor expects {CONV_PARAM_COUNT} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite extractor weight".into()));
        }
        Ok(Self { params })
    }

    /// Probability map of a `w x h` single-channel image (row-major, x fastest).
    pub fn predict(&self, image: &[f64], w: usize, h: usize) -> Vec<f64> {
        forward(&self.params, image, h, w).logits.into_iter().map(sigmoid).collect()
    }

    pub fn predict_slice(&self, volume: &VoxelVolume, z: usize) -> Vec<f64> {
        let img: Vec<f64> = volume.slice(z).iter().map(|&v| v as f64).collect();
        self.predict(&img, volume.nx(), volume.ny())
    }

    /// Summed cross-entropy and gradient over patches (exposed for checks).
    pub fn loss_grad(&self, patches: &[Patch]) -> (f64, Vec<f64>) {
        batch_loss_grad(&self.params, patches)
    }
}

/// Crops training patches from annotated slices. Every other patch is centered
/// on a random target pixel when the slice has one, the rest are uniform.
pub fn sample_patches(
    volume: &VoxelVolume,
    targets: &[(usize, &Mask2d)],
    cfg: &ExtractorConfig,
    seed: u64,
) -> Result<Vec<Patch>> {
    if targets.is_empty() {
        return Err(Error::Training("no training slices for the extractor".into()));
    }
    let (nx, ny) = (volume.nx(), volume.ny());
    let (pw, ph) = (cfg.patch_size.min(nx).max(1), cfg.patch_size.min(ny).max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives: Vec<Vec<usize>> = targets
        .iter()
        .map(|(_, m)| (0..m.bits.len()).filter(|&i| m.bits[i]).collect())
        .collect();
    let mut out = Vec::with_capacity(cfg.patches);
    for k in 0..cfg.patches {
        let s = k % targets.len();
        let (z, mask) = targets[s];
        let (cx, cy) = if k % 2 == 0 && !positives[s].is_empty() {
            let i = positives[s][rng.random_range(0..positives[s].len())];
            (i % nx, i / nx)
        } else {
            (rng.random_range(0..nx), rng.random_range(0..ny))
        };
        let x0 = cx.saturating_sub(pw / 2).min(nx - pw);
        let y0 = cy.saturating_sub(ph / 2).min(ny - ph);
        let slice = volume.slice(z);
        let mut image = Vec::with_capacity(pw * ph);
        let mut target = Vec::with_capacity(pw * ph);
        for y in y0..y0 + ph {
            for x in x0..x0 + pw {
                image.push(slice[y * nx + x] as f64);
                target.push(if mask.bits[y * nx + x] { 1.0 } else { 0.0 });
            }
        }
        out.push(Patch {
            h: ph,
            w: pw,
            image,
            target,
        });
    }
    Ok(out)
}

/// Trains an extractor on patches of the given slices and target masks.
pub fn train_conv_extractor(
    volume: &VoxelVolume,
    targets: &[(usize, &Mask2d)],
    cfg: &ExtractorConfig,
    seed: u64,
) -> Result<(ConvExtractor, ExtractorReport)> {
    for (z, m) in targets {
        if *z >= volume.nz() || m.nx != volume.nx() || m.ny != volume.ny() {
            return Err(Error::DimensionMismatch(format!("target slice {z} does not fit the volume")));
        }
    }
    let patches = sample_patches(volume, targets, cfg, seed)?;
    let init = ConvExtractor::init(seed ^ 0x5eed);
    let lcfg = LbfgsConfig {
        max_iters: cfg.max_iters,
        grad_tol: 1e-8,
        ..Default::default()
    };
    let out = lbfgs_minimize(|x| batch_loss_grad(x, &patches), &init.params, &lcfg, |_| Control::Continue)?;
    let report = ExtractorReport {
        initial_loss: out.trace[0],
        final_loss: out.value,
        iterations: out.iterations,
        stalled: out.stop == StopReason::Stalled,
    };
    Ok((ConvExtractor::from_params(out.x)?, report))
}
