//! One-hidden-layer classifier: `softmax(W2 · relu(W1 · x + b1) + b2)`,
//! trained on the summed pixel-wise cross-entropy.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default hidden width.
pub const DEFAULT_HIDDEN: usize = 500;

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row block used for forward/backward passes. Partial results are reduced in
/// block order, so results do not depend on the worker count.
const BLOCK_ROWS: usize = 2048;

/// Classifier weights stored flat as `[W1 (H x F), b1 (H), W2 (K x H), b2 (K)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    pub data: Vec<f64>,
}

impl MlpParams {
    pub fn param_count(n_in: usize, n_hidden: usize, n_out: usize) -> usize {
        n_hidden * n_in + n_hidden + n_out * n_hidden + n_out
    }

    pub fn zeros(n_in: usize, n_hidden: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_hidden,
            n_out,
            data: vec![0.0; Self::param_count(n_in, n_hidden, n_out)],
        }
    }

    pub fn from_flat(n_in: usize, n_hidden: usize, n_out: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::param_count(n_in, n_hidden, n_out) {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {n_in}-{n_hidden}-{n_out} classifier",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite classifier weight".into()));
        }
        Ok(Self {
            n_in,
            n_hidden,
            n_out,
            data,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(n_in: usize, n_hidden: usize, n_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(n_in, n_hidden, n_out);
        let l1 = (6.0 / (n_in + n_hidden) as f64).sqrt();
        let l2 = (6.0 / (n_hidden + n_out) as f64).sqrt();
        let (w1, rest) = p.data.split_at_mut(n_hidden * n_in);
        for w in w1.iter_mut() {
            *w = rng.random_range(-l1..=l1);
        }
        let w2 = &mut rest[n_hidden..n_hidden + n_out * n_hidden];
        for w in w2.iter_mut() {
            *w = rng.random_range(-l2..=l2);
        }
        p
    }

    pub fn view(&self) -> MlpView<'_> {
        MlpView::new(self.n_in, self.n_hidden, self.n_out, &self.data)
    }

    pub fn w1(&self) -> ArrayView2<'_, f64> {
        self.view().w1
    }

    pub fn b1(&self) -> ArrayView1<'_, f64> {
        self.view().b1
    }

    pub fn w2(&self) -> ArrayView2<'_, f64> {
        self.view().w2
    }

    pub fn b2(&self) -> ArrayView1<'_, f64> {
        self.view().b2
    }
}

/// Borrowed weights over a flat parameter slice.
#[derive(Debug, Clone, Copy)]
pub struct MlpView<'a> {
    pub w1: ArrayView2<'a, f64>,
    pub b1: ArrayView1<'a, f64>,
    pub w2: ArrayView2<'a, f64>,
    pub b2: ArrayView1<'a, f64>,
}

impl<'a> MlpView<'a> {
    pub fn new(n_in: usize, n_hidden: usize, n_out: usize, data: &'a [f64]) -> Self {
        assert_eq!(data.len(), MlpParams::param_count(n_in, n_hidden, n_out));
        let (w1, rest) = data.split_at(n_hidden * n_in);
        let (b1, rest) = rest.split_at(n_hidden);
        let (w2, b2) = rest.split_at(n_out * n_hidden);
        Self {
            w1: ArrayView2::from_shape((n_hidden, n_in), w1).expect("shape"),
            b1: ArrayView1::from(b1),
            w2: ArrayView2::from_shape((n_out, n_hidden), w2).expect("shape"),
            b2: ArrayView1::from(b2),
        }
    }

    fn n_in(&self) -> usize {
        self.w1.ncols()
    }

    fn n_out(&self) -> usize {
        self.w2.nrows()
    }

    /// Hidden pre-activations and output logits for a block of rows.
    fn block_forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let mut z1 = x.dot(&self.w1.t());
        z1 += &self.b1;
        let a1 = z1.mapv(|v| v.max(0.0));
        let mut logits = a1.dot(&self.w2.t());
        logits += &self.b2;
        (z1, logits)
    }
}

/// Numerically stable softmax of every row, in place.
pub fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

fn check_features(view: &MlpView<'_>, x: ArrayView2<'_, f64>) -> Result<()> {
    if x.ncols() != view.n_in() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature columns for a classifier expecting {}",
            x.ncols(),
            view.n_in()
        )));
    }
    Ok(())
}

/// Class probabilities for every feature row.
pub fn mlp_forward(p: &MlpParams, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let view = p.view();
    check_features(&view, x)?;
    let n = x.nrows();
    let blocks: Vec<Array2<f64>> = (0..n.div_ceil(BLOCK_ROWS))
        .into_par_iter()
        .map(|b| {
            let rows = x.slice(s![b * BLOCK_ROWS..((b + 1) * BLOCK_ROWS).min(n), ..]);
            let (_, mut logits) = view.block_forward(rows);
            softmax_rows(&mut logits);
            logits
        })
        .collect();
    let mut out = Array2::zeros((n, view.n_out()));
    for (b, block) in blocks.into_iter().enumerate() {
        out.slice_mut(s![b * BLOCK_ROWS..b * BLOCK_ROWS + block.nrows(), ..])
            .assign(&block);
    }
    Ok(out)
}

/// Most probable class per row.
pub fn mlp_predict(p: &MlpParams, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let view = p.view();
    check_features(&view, x)?;
    let n = x.nrows();
    let blocks: Vec<Vec<usize>> = (0..n.div_ceil(BLOCK_ROWS))
        .into_par_iter()
        .map(|b| {
            let rows = x.slice(s![b * BLOCK_ROWS..((b + 1) * BLOCK_ROWS).min(n), ..]);
            let (_, logits) = view.block_forward(rows);
            logits.rows().into_iter().map(argmax).collect()
        })
        .collect();
    Ok(blocks.concat())
}

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Summed cross-entropy `-sum_i sum_j t_ij ln y_ij` with probabilities
/// clamped at [`PROB_FLOOR`].
pub fn cross_entropy_loss(probs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<f64> {
    if probs.dim() != targets.dim() {
        return Err(Error::DimensionMismatch(format!(
            "probabilities {:?} vs targets {:?}",
            probs.dim(),
            targets.dim()
        )));
    }
    Ok(-probs
        .iter()
        .zip(targets.iter())
        .map(|(&y, &t)| if t == 0.0 { 0.0 } else { t * y.max(PROB_FLOOR).ln() })
        .sum::<f64>())
}

/// Feature rows with one-hot targets.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub features: Array2<f64>,
    pub targets: Array2<f64>,
}

impl TrainingBatch {
    pub fn new(features: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if features.nrows() != targets.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows vs {} target rows",
                features.nrows(),
                targets.nrows()
            )));
        }
        for (i, row) in targets.rows().into_iter().enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::InvalidParameter(format!(
                    "target row {i} is not one-hot"
                )));
            }
        }
        Ok(Self { features, targets })
    }

    pub fn from_labels(features: Array2<f64>, labels: &[usize], n_classes: usize) -> Result<Self> {
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidParameter(format!(
                "label {l} outside {n_classes} classes"
            )));
        }
        let mut targets = Array2::zeros((labels.len(), n_classes));
        for (i, &l) in labels.iter().enumerate() {
            targets[[i, l]] = 1.0;
        }
        Self::new(features, targets)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    /// Class index of every row.
    pub fn labels(&self) -> Vec<usize> {
        self.targets.rows().into_iter().map(argmax).collect()
    }
}

/// Loss and gradient of the summed cross-entropy with respect to the flat
/// parameter layout of [`MlpParams`].
pub(crate) fn loss_grad_flat(
    n_in: usize,
    n_hidden: usize,
    n_out: usize,
    params: &[f64],
    batch: &TrainingBatch,
) -> (f64, Vec<f64>) {
    let view = MlpView::new(n_in, n_hidden, n_out, params);
    let n = batch.len();
    let partials: Vec<(f64, Vec<f64>)> = (0..n.div_ceil(BLOCK_ROWS))
        .into_par_iter()
        .map(|b| {
            let range = b * BLOCK_ROWS..((b + 1) * BLOCK_ROWS).min(n);
            let x = batch.features.slice(s![range.clone(), ..]);
            let t = batch.targets.slice(s![range, ..]);
            block_loss_grad(&view, x, t)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for (l, g) in partials {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss, grad)
}

fn block_loss_grad(
    view: &MlpView<'_>,
    x: ArrayView2<'_, f64>,
    t: ArrayView2<'_, f64>,
) -> (f64, Vec<f64>) {
    let (z1, mut probs) = view.block_forward(x);
    softmax_rows(&mut probs);
    let mut loss = 0.0;
    // dL/dlogits = y - t, except where the clamp is active (loss locally flat)
    let mut d_logits = probs;
    for (mut row, trow) in d_logits.rows_mut().into_iter().zip(t.rows()) {
        let mut clamped = false;
        for (&y, &tv) in row.iter().zip(trow.iter()) {
            if tv != 0.0 {
                if y < PROB_FLOOR {
                    clamped = true;
                    loss -= tv * PROB_FLOOR.ln();
                } else {
                    loss -= tv * y.ln();
                }
            }
        }
        if clamped {
            row.fill(0.0);
        } else {
            row -= &trow;
        }
    }
    let a1 = z1.mapv(|v| v.max(0.0));
    let g_w2 = d_logits.t().dot(&a1);
    let g_b2 = d_logits.sum_axis(Axis(0));
    let mut d_z1 = d_logits.dot(&view.w2);
    ndarray::Zip::from(&mut d_z1).and(&z1).for_each(|d, &z| {
        if z <= 0.0 {
            *d = 0.0;
        }
    });
    let g_w1 = d_z1.t().dot(&x);
    let g_b1 = d_z1.sum_axis(Axis(0));
    let mut grad = Vec::with_capacity(
        g_w1.len() + g_b1.len() + g_w2.len() + g_b2.len(),
    );
    grad.extend(g_w1.iter());
    grad.extend(g_b1.iter());
    grad.extend(g_w2.iter());
    grad.extend(g_b2.iter());
    (loss, grad)
}

/// Cross-entropy loss and its exact gradient (same shape as `p`).
pub fn mlp_loss_grad(p: &MlpParams, batch: &TrainingBatch) -> Result<(f64, MlpParams)> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty training batch".into()));
    }
    check_features(&p.view(), batch.features.view())?;
    if batch.targets.ncols() != p.n_out {
        return Err(Error::DimensionMismatch(format!(
            "{} target classes for a classifier with {} outputs",
            batch.targets.ncols(),
            p.n_out
        )));
    }
    let (loss, grad) = loss_grad_flat(p.n_in, p.n_hidden, p.n_out, &p.data, batch);
    if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("non-finite loss or gradient".into()));
    }
    Ok((
        loss,
        MlpParams {
            n_in: p.n_in,
            n_hidden: p.n_hidden,
            n_out: p.n_out,
            data: grad,
        },
    ))
}

/// Fraction of rows whose argmax matches `labels`.
pub fn accuracy(p: &MlpParams, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidParameter("no rows to score".into()));
    }
    let pred = mlp_predict(p, x)?;
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_weights_give_uniform_rows() {
        let p = MlpParams::zeros(3, 4, 2);
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let y = mlp_forward(&p, x.view()).unwrap();
        for v in y.iter() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn bias_forced_logits_match_direct_softmax() {
        let mut p = MlpParams::zeros(2, 3, 2);
        let n = p.data.len();
        p.data[n - 2] = 10.0;
        p.data[n - 1] = -10.0;
        let y = mlp_forward(&p, array![[0.3, 0.7]].view()).unwrap();
        let e1 = 10f64.exp();
        let e2 = (-10f64).exp();
        assert!((y[[0, 0]] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((y[[0, 1]] - e2 / (e1 + e2)).abs() < 1e-20);
        assert!((y[[0, 1]] - 2.061_153_6e-9).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = MlpParams::zeros(3, 4, 2);
        assert!(mlp_forward(&p, array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn cross_entropy_hand_values() {
        let t = array![[1.0, 0.0]];
        let loss = cross_entropy_loss(array![[0.5, 0.5]].view(), t.view()).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        let t2 = array![[1.0, 0.0], [0.0, 1.0]];
        let loss2 = cross_entropy_loss(array![[0.5, 0.5], [0.5, 0.5]].view(), t2.view()).unwrap();
        assert!((loss2 - 1.386_294_361).abs() < 1e-9);
        let perfect = cross_entropy_loss(array![[1.0, 0.0], [0.0, 1.0]].view(), t2.view()).unwrap();
        assert_eq!(perfect, 0.0);
        assert!(cross_entropy_loss(array![[1.0]].view(), t2.view()).is_err());
    }

    #[test]
    fn zero_prob_is_clamped() {
        let loss =
            cross_entropy_loss(array![[0.0, 1.0]].view(), array![[1.0, 0.0]].view()).unwrap();
        assert!((loss - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn one_hot_validation() {
        assert!(TrainingBatch::new(array![[0.0]], array![[0.5, 0.5]]).is_err());
        assert!(TrainingBatch::new(array![[0.0]], array![[1.0, 1.0]]).is_err());
        assert!(TrainingBatch::from_labels(array![[0.0]], &[2], 2).is_err());
    }

    #[test]
    fn zero_params_bias_gradient_is_class_residual() {
        // 3 rows of class 0, 1 row of class 1: dL/db2 = sum(y - t) = (4*0.5-3, 4*0.5-1)
        let x = array![[0.1, 0.2], [0.3, 0.1], [0.9, 0.4], [0.5, 0.5]];
        let batch = TrainingBatch::from_labels(x, &[0, 0, 0, 1], 2).unwrap();
        let p = MlpParams::zeros(2, 3, 2);
        let (loss, g) = mlp_loss_grad(&p, &batch).unwrap();
        assert!((loss - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let b2 = g.b2();
        assert!((b2[0] - (-1.0)).abs() < 1e-12);
        assert!((b2[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_doubles_loss_and_gradient() {
        let p = MlpParams::init(3, 7, 2, 5);
        let x = array![[0.1, 0.5, 0.2], [0.9, 0.4, 0.3], [0.2, 0.2, 0.8]];
        let b1 = TrainingBatch::from_labels(x.clone(), &[0, 1, 1], 2).unwrap();
        let x2 = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let b2 = TrainingBatch::from_labels(x2, &[0, 1, 1, 0, 1, 1], 2).unwrap();
        let (l1, g1) = mlp_loss_grad(&p, &b1).unwrap();
        let (l2, g2) = mlp_loss_grad(&p, &b2).unwrap();
        // equal up to summation order
        assert!((l2 - 2.0 * l1).abs() <= 1e-14 * l2.abs());
        for (a, b) in g1.data.iter().zip(&g2.data) {
            assert!((b - 2.0 * a).abs() <= 1e-14 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn confident_correct_prediction_has_tiny_gradient() {
        let mut p = MlpParams::zeros(1, 2, 2);
        let n = p.data.len();
        p.data[n - 2] = 40.0;
        p.data[n - 1] = -40.0;
        let batch = TrainingBatch::from_labels(array![[0.5]], &[0], 2).unwrap();
        let (_, g) = mlp_loss_grad(&p, &batch).unwrap();
        assert!(g.data.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let p = MlpParams::zeros(2, 2, 2);
        let batch = TrainingBatch::from_labels(Array2::zeros((0, 2)), &[], 2).unwrap();
        assert!(mlp_loss_grad(&p, &batch).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = MlpParams::init(6, 500, 2, 42);
        let b = MlpParams::init(6, 500, 2, 42);
        assert_eq!(a, b);
        let bound = (6.0f64 / 506.0).sqrt();
        assert!(a.w1().iter().all(|v| v.abs() <= bound));
        assert!(a.b1().iter().all(|&v| v == 0.0));
    }
}
