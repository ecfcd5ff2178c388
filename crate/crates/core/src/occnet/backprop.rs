//! Forward passes with recorded activations and the matching backward
//! pass.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};

use super::{points_to_array, Mode, OccupancyModel, BN_EPS, HIDDEN_LAYERS};
use crate::{Error, Point, Result};

/// One cloud with its (normalized) queries and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub points: Vec<Point>,
    pub queries: Vec<Point>,
    pub labels: Vec<u16>,
    /// Signed distances in normalized units.
    pub distances: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    /// Mean cross-entropy.
    pub ce: f64,
    /// Mean squared signed-distance error (before the λ weight).
    pub sdf: f64,
    pub total: f64,
    pub correct: usize,
    pub count: usize,
}

/// Batch statistics of every hidden layer, used to update the running
/// averages after a training step.
#[derive(Clone, Debug, Default)]
pub struct ForwardStats {
    pub mean: Vec<Array1<f64>>,
    /// Unbiased batch variance.
    pub var: Vec<Array1<f64>>,
}

pub(super) struct EncoderTape {
    points: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    argmax: Vec<usize>,
    pub latent: Array1<f64>,
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|x| x.max(0.0));
}

fn affine(x: &Array2<f64>, w: ndarray::ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut z = Array2::zeros((x.nrows(), w.ncols()));
    general_mat_mul(1.0, x, &w, 0.0, &mut z);
    z += &b;
    z
}

pub(super) fn encode_tape(m: &OccupancyModel, points: &Array2<f64>) -> EncoderTape {
    let l = &m.layout;
    let p = &m.params;
    let mut h1 = affine(points, l.encoder_w[0].view(p), l.encoder_b[0].vector(p));
    relu_inplace(&mut h1);
    let mut h2 = affine(&h1, l.encoder_w[1].view(p), l.encoder_b[1].vector(p));
    relu_inplace(&mut h2);
    let z3 = affine(&h2, l.encoder_w[2].view(p), l.encoder_b[2].vector(p));
    let dim = z3.ncols();
    let mut argmax = vec![0usize; dim];
    let mut latent = z3.row(0).to_owned();
    for (r, row) in z3.rows().into_iter().enumerate().skip(1) {
        for c in 0..dim {
            if row[c] > latent[c] {
                latent[c] = row[c];
                argmax[c] = r;
            }
        }
    }
    EncoderTape { points: points.clone(), h1, h2, argmax, latent }
}

pub(super) struct LayerTape {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    act: Array2<f64>,
}

/// Decoder over stacked query rows; rows in `ranges[b]` use `latents[b]`.
pub(super) fn decode_rows(
    m: &OccupancyModel,
    latents: &[ArrayView1<f64>],
    ranges: &[Range<usize>],
    q: &Array2<f64>,
    mode: Mode,
    keep: bool,
) -> (Array2<f64>, Option<(Vec<LayerTape>, ForwardStats)>) {
    let p = &m.params;
    let rows = q.nrows();
    let h = m.config.hidden_dim;
    let mut tapes = Vec::with_capacity(if keep { HIDDEN_LAYERS } else { 0 });
    let mut stats = ForwardStats::default();
    let mut prev: Option<Array2<f64>> = None;
    for (li, layer) in m.layout.hidden.iter().enumerate() {
        let mut z = Array2::zeros((rows, h));
        if let (Some(w), Some(a)) = (layer.w_prev, prev.as_ref()) {
            general_mat_mul(1.0, a, &w.view(p), 0.0, &mut z);
        }
        if let Some(w) = layer.w_query {
            general_mat_mul(1.0, q, &w.view(p), 1.0, &mut z);
        }
        if let Some(w) = layer.w_latent {
            let w = w.view(p);
            for (lat, r) in latents.iter().zip(ranges) {
                let c = lat.dot(&w);
                let mut block = z.slice_mut(s![r.clone(), ..]);
                block += &c;
            }
        }
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
                let var = z.var_axis(Axis(0), 0.0);
                let n = rows as f64;
                let unbiased = if rows > 1 { &var * (n / (n - 1.0)) } else { var.clone() };
                stats.mean.push(mean.clone());
                stats.var.push(unbiased);
                (mean, var)
            }
            Mode::Eval => (Array1::from(m.running_mean(li).to_vec()), Array1::from(m.running_var(li).to_vec())),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut xhat = z;
        xhat -= &mean;
        xhat *= &inv_std;
        let gamma = layer.gamma.vector(p);
        let beta = layer.beta.vector(p);
        let mut act = &xhat * &gamma;
        act += &beta;
        relu_inplace(&mut act);
        if keep {
            tapes.push(LayerTape { xhat, inv_std, act: act.clone() });
        }
        prev = Some(act);
    }
    let last = prev.expect("at least one hidden layer");
    let out = affine(&last, m.layout.out_w.view(p), m.layout.out_b.vector(p));
    (out, keep.then_some((tapes, stats)))
}

/// Per-row loss terms and the gradient of the mean loss with respect to
/// the head output.
fn head_loss(out: &Array2<f64>, labels: &[u16], distances: &[f64], c: usize, lambda: f64) -> (LossParts, Array2<f64>) {
    let rows = out.nrows();
    let inv = 1.0 / rows as f64;
    let mut d_out = Array2::zeros(out.raw_dim());
    let mut parts = LossParts { count: rows, ..LossParts::default() };
    for (i, row) in out.rows().into_iter().enumerate() {
        let logits = row.slice(s![..c + 1]);
        let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        let label = labels[i] as usize;
        parts.ce += lse - logits[label];
        let mut best = 0;
        for k in 0..=c {
            let pk = (logits[k] - lse).exp();
            d_out[[i, k]] = (pk - if k == label { 1.0 } else { 0.0 }) * inv;
            if logits[k] > logits[best] {
                best = k;
            }
        }
        if best == label {
            parts.correct += 1;
        }
        let e = row[c + 1] - distances[i];
        parts.sdf += e * e;
        d_out[[i, c + 1]] = 2.0 * lambda * e * inv;
    }
    parts.ce *= inv;
    parts.sdf *= inv;
    parts.total = parts.ce + lambda * parts.sdf;
    (parts, d_out)
}

/// Mean loss over all queries of all items and its gradient with respect
/// to every parameter (train-mode batch norm over the stacked queries).
pub fn loss_and_gradient(m: &OccupancyModel, items: &[BatchItem], lambda: f64) -> Result<(LossParts, Vec<f64>, ForwardStats)> {
    if items.is_empty() || items.iter().all(|it| it.queries.is_empty()) {
        return Err(Error::InvalidInput("batch has no queries".into()));
    }
    let c = m.config.num_classes;
    let mut encoders = Vec::with_capacity(items.len());
    let mut ranges = Vec::with_capacity(items.len());
    let mut queries = Vec::new();
    let mut labels = Vec::new();
    let mut distances = Vec::new();
    for it in items {
        if it.points.is_empty() {
            return Err(Error::InvalidInput("batch item has an empty cloud".into()));
        }
        if it.labels.len() != it.queries.len() || it.distances.len() != it.queries.len() {
            return Err(Error::InvalidInput("queries, labels and distances differ in length".into()));
        }
        if let Some(&bad) = it.labels.iter().find(|&&l| l as usize > c) {
            return Err(Error::InvalidInput(format!("label {bad} exceeds class count {c}")));
        }
        encoders.push(encode_tape(m, &points_to_array(&it.points)));
        let start = queries.len();
        queries.extend_from_slice(&it.queries);
        ranges.push(start..queries.len());
        labels.extend_from_slice(&it.labels);
        distances.extend_from_slice(&it.distances);
    }
    let q = points_to_array(&queries);
    let latents: Vec<_> = encoders.iter().map(|e| e.latent.view()).collect();
    let (out, tape) = decode_rows(m, &latents, &ranges, &q, Mode::Train, true);
    let (tapes, stats) = tape.expect("tape requested");
    let (parts, d_out) = head_loss(&out, &labels, &distances, c, lambda);
    if !parts.total.is_finite() {
        return Err(Error::NonFinite(format!("loss is {} (ce {}, sdf {})", parts.total, parts.ce, parts.sdf)));
    }

    let l = &m.layout;
    let p = &m.params;
    let mut grad = vec![0.0; l.total];
    let rows = q.nrows() as f64;

    let last = &tapes[HIDDEN_LAYERS - 1].act;
    general_mat_mul(1.0, &last.t(), &d_out, 0.0, &mut l.out_w.view_mut(&mut grad));
    l.out_b.view_mut(&mut grad).row_mut(0).assign(&d_out.sum_axis(Axis(0)));
    let mut d_act = d_out.dot(&l.out_w.view(p).t());

    let dim = m.config.latent_dim;
    let mut d_latent: Vec<Array1<f64>> = vec![Array1::zeros(dim); items.len()];
    for li in (0..HIDDEN_LAYERS).rev() {
        let layer = &l.hidden[li];
        let t = &tapes[li];
        // through ReLU
        Zip::from(&mut d_act).and(&t.act).for_each(|d, &a| {
            if a <= 0.0 {
                *d = 0.0;
            }
        });
        let dy = d_act;
        let gamma = layer.gamma.vector(p);
        l.hidden[li].gamma.view_mut(&mut grad).row_mut(0).assign(&(&dy * &t.xhat).sum_axis(Axis(0)));
        l.hidden[li].beta.view_mut(&mut grad).row_mut(0).assign(&dy.sum_axis(Axis(0)));
        // through batch norm
        let dxhat = &dy * &gamma;
        let sum_dx = dxhat.sum_axis(Axis(0));
        let sum_dx_xhat = (&dxhat * &t.xhat).sum_axis(Axis(0));
        let mut dz = dxhat * rows;
        dz -= &sum_dx;
        dz -= &(&t.xhat * &sum_dx_xhat);
        dz *= &(&t.inv_std / rows);

        if let Some(w) = layer.w_query {
            general_mat_mul(1.0, &q.t(), &dz, 0.0, &mut w.view_mut(&mut grad));
        }
        if let Some(w) = layer.w_latent {
            let wv = w.view(p);
            let mut g = w.view_mut(&mut grad);
            for (b, r) in ranges.iter().enumerate() {
                let sb = dz.slice(s![r.clone(), ..]).sum_axis(Axis(0));
                let lat = &encoders[b].latent;
                for i in 0..dim {
                    let li_ = lat[i];
                    if li_ != 0.0 {
                        g.row_mut(i).scaled_add(li_, &sb);
                    }
                }
                d_latent[b] += &wv.dot(&sb);
            }
        }
        d_act = match layer.w_prev {
            Some(w) => {
                let prev = &tapes[li - 1].act;
                general_mat_mul(1.0, &prev.t(), &dz, 0.0, &mut w.view_mut(&mut grad));
                dz.dot(&w.view(p).t())
            }
            None => Array2::zeros((0, 0)),
        };
    }

    for (e, dl) in encoders.iter().zip(&d_latent) {
        encoder_backward(m, e, dl, &mut grad);
    }
    Ok((parts, grad, stats))
}

/// Gradient flows only through the rows that won the max pool.
fn encoder_backward(m: &OccupancyModel, e: &EncoderTape, d_latent: &Array1<f64>, grad: &mut [f64]) {
    let l = &m.layout;
    let p = &m.params;
    let mut rows: Vec<usize> = e.argmax.clone();
    rows.sort_unstable();
    rows.dedup();
    let pos = |r: usize| rows.binary_search(&r).expect("argmax row");
    let mut dz3 = Array2::zeros((rows.len(), d_latent.len()));
    for (c, &r) in e.argmax.iter().enumerate() {
        dz3[[pos(r), c]] = d_latent[c];
    }
    let h2 = e.h2.select(Axis(0), &rows);
    let h1 = e.h1.select(Axis(0), &rows);
    let pts = e.points.select(Axis(0), &rows);

    general_mat_mul(1.0, &h2.t(), &dz3, 1.0, &mut l.encoder_w[2].view_mut(grad));
    let mut b = l.encoder_b[2].view_mut(grad);
    b.row_mut(0).scaled_add(1.0, d_latent);

    let mut dz2 = dz3.dot(&l.encoder_w[2].view(p).t());
    Zip::from(&mut dz2).and(&h2).for_each(|d, &a| {
        if a <= 0.0 {
            *d = 0.0;
        }
    });
    general_mat_mul(1.0, &h1.t(), &dz2, 1.0, &mut l.encoder_w[1].view_mut(grad));
    l.encoder_b[1].view_mut(grad).row_mut(0).scaled_add(1.0, &dz2.sum_axis(Axis(0)));

    let mut dz1 = dz2.dot(&l.encoder_w[1].view(p).t());
    Zip::from(&mut dz1).and(&h1).for_each(|d, &a| {
        if a <= 0.0 {
            *d = 0.0;
        }
    });
    general_mat_mul(1.0, &pts.t(), &dz1, 1.0, &mut l.encoder_w[0].view_mut(grad));
    l.encoder_b[0].view_mut(grad).row_mut(0).scaled_add(1.0, &dz1.sum_axis(Axis(0)));
}

/// Mean loss only, in train-mode batch norm (for finite differences).
pub fn batch_loss(m: &OccupancyModel, items: &[BatchItem], lambda: f64) -> Result<LossParts> {
    let c = m.config.num_classes;
    let mut latents = Vec::new();
    let mut ranges = Vec::new();
    let mut queries = Vec::new();
    let mut labels = Vec::new();
    let mut distances = Vec::new();
    for it in items {
        latents.push(encode_tape(m, &points_to_array(&it.points)).latent);
        let start = queries.len();
        queries.extend_from_slice(&it.queries);
        ranges.push(start..queries.len());
        labels.extend_from_slice(&it.labels);
        distances.extend_from_slice(&it.distances);
    }
    if queries.is_empty() {
        return Err(Error::InvalidInput("batch has no queries".into()));
    }
    let views: Vec<_> = latents.iter().map(|l| l.view()).collect();
    let (out, _) = decode_rows(m, &views, &ranges, &points_to_array(&queries), Mode::Train, false);
    Ok(head_loss(&out, &labels, &distances, c, lambda).0)
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_item(rng: &mut impl Rng, points: usize, queries: usize, classes: usize) -> BatchItem {
        let mut p = || Point::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let pts: Vec<Point> = (0..points).map(|_| p()).collect();
        let qs: Vec<Point> = (0..queries).map(|_| p()).collect();
        let labels = (0..queries).map(|_| rng.random_range(0..=classes as u16)).collect();
        let distances = (0..queries).map(|_| rng.random_range(-0.2..0.2)).collect();
        BatchItem { points: pts, queries: qs, labels, distances }
    }

    /// Central differences on randomly chosen parameters, half from the
    /// encoder and half from the decoder.
    fn finite_difference_check(config: ModelConfig, probes: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = OccupancyModel::new(config, seed);
        let items: Vec<BatchItem> = (0..3).map(|_| random_item(&mut rng, 24, 12, config.num_classes)).collect();
        let (_, grad, _) = loss_and_gradient(&m, &items, 100.0).unwrap();
        let enc = m.layout.encoder_range();
        let mut worst: f64 = 0.0;
        for k in 0..probes {
            let i = if k % 2 == 0 { rng.random_range(enc.clone()) } else { rng.random_range(enc.end..m.params.len()) };
            let h = 1e-6;
            let orig = m.params[i];
            m.params[i] = orig + h;
            let up = batch_loss(&m, &items, 100.0).unwrap().total;
            m.params[i] = orig - h;
            let down = batch_loss(&m, &items, 100.0).unwrap().total;
            m.params[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad[i];
            let err = if a.abs().max(numeric.abs()) < 1e-7 { 0.0 } else { (a - numeric).abs() / a.abs().max(numeric.abs()) };
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradients_match_central_differences_small() {
        let cfg = ModelConfig { num_classes: 3, latent_dim: 16, hidden_dim: 10, encoder_widths: [6, 8] };
        assert!(finite_difference_check(cfg, 200, 1) < 1e-3);
    }

    #[test]
    fn gradients_match_central_differences_full_size() {
        assert!(finite_difference_check(ModelConfig::default(), 60, 2) < 1e-3);
    }

    #[test]
    fn loss_is_affine_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = OccupancyModel::new(ModelConfig { num_classes: 2, latent_dim: 8, hidden_dim: 8, encoder_widths: [4, 4] }, 3);
        let items = vec![random_item(&mut rng, 10, 7, 2), random_item(&mut rng, 5, 4, 2)];
        let a = batch_loss(&m, &items, 0.0).unwrap();
        let b = batch_loss(&m, &items, 100.0).unwrap();
        assert_eq!(a.ce, b.ce);
        assert!((b.total - a.total - 100.0 * b.sdf).abs() <= 1e-12 * b.total);
    }
}
