//! Conditional occupancy + signed-distance network with hand-written
//! gradients.
//!
//! The encoder maps each normalized cloud point through shared layers
//! `3 → 64 → 128 → 1024` (ReLU, ReLU, linear) and max-pools over points
//! into the latent code. The decoder sees `[latent, query]` and runs six
//! hidden layers of width 512, each linear → batch norm → ReLU; the fourth
//! hidden layer also receives the original `[latent, query]` input. The
//! head emits `C + 1` class logits (0 = none) and one signed distance.
//!
//! All parameters live in one flat `f64` buffer; [`Layout`] names the
//! segments and gradients share the layout.

mod backprop;
mod checkpoint;
mod train;

pub use backprop::{batch_loss, loss_and_gradient, BatchItem, ForwardStats, LossParts};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, SegmentEntry, MANIFEST_FILE as CHECKPOINT_FILE};
pub use train::{
    accuracy, loss, prepare_item, train_loop, train_step, write_loss_trace, Adam, LossRecord, TrainConfig,
    TrainState, TrainingExample,
};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Point, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Index of the hidden layer that receives the skip input.
pub const SKIP_LAYER: usize = 3;
pub const HIDDEN_LAYERS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of structures `C`; the head has `C + 1` logits.
    pub num_classes: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub encoder_widths: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { num_classes: 5, latent_dim: 1024, hidden_dim: 512, encoder_widths: [64, 128] }
    }
}

impl ModelConfig {
    pub fn outputs(&self) -> usize {
        self.num_classes + 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn view<'a>(&self, buf: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &buf[self.range()]).expect("segment shape")
    }

    pub fn view_mut<'a>(&self, buf: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut buf[self.range()]).expect("segment shape")
    }

    /// Single-row segment as a vector.
    pub fn vector<'a>(&self, buf: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&buf[self.range()])
    }
}

/// One hidden decoder layer: `z = a_prev W_h + q W_q + latent W_lat`,
/// then batch norm with `gamma`, `beta`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub w_prev: Option<Segment>,
    pub w_latent: Option<Segment>,
    pub w_query: Option<Segment>,
    pub gamma: Segment,
    pub beta: Segment,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub encoder_w: [Segment; 3],
    pub encoder_b: [Segment; 3],
    pub hidden: [HiddenLayer; HIDDEN_LAYERS],
    pub out_w: Segment,
    pub out_b: Segment,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut offset = 0;
        let mut seg = |rows: usize, cols: usize| {
            let s = Segment { offset, rows, cols };
            offset += rows * cols;
            s
        };
        let [e1, e2] = c.encoder_widths;
        let encoder_w = [seg(3, e1), seg(e1, e2), seg(e2, c.latent_dim)];
        let encoder_b = [seg(1, e1), seg(1, e2), seg(1, c.latent_dim)];
        let h = c.hidden_dim;
        let hidden = std::array::from_fn(|l| {
            let takes_input = l == 0 || l == SKIP_LAYER;
            HiddenLayer {
                w_prev: (l > 0).then(|| seg(h, h)),
                w_latent: takes_input.then(|| seg(c.latent_dim, h)),
                w_query: takes_input.then(|| seg(3, h)),
                gamma: seg(1, h),
                beta: seg(1, h),
            }
        });
        let out_w = seg(h, c.outputs());
        let out_b = seg(1, c.outputs());
        Self { encoder_w, encoder_b, hidden, out_w, out_b, total: offset }
    }

    /// Every segment with a stable name, in buffer order.
    pub fn named_segments(&self) -> Vec<(String, Segment)> {
        let mut v = Vec::new();
        for i in 0..3 {
            v.push((format!("encoder.{i}.weight"), self.encoder_w[i]));
        }
        for i in 0..3 {
            v.push((format!("encoder.{i}.bias"), self.encoder_b[i]));
        }
        for (l, layer) in self.hidden.iter().enumerate() {
            for (name, s) in [("prev", layer.w_prev), ("latent", layer.w_latent), ("query", layer.w_query)] {
                if let Some(s) = s {
                    v.push((format!("decoder.{l}.weight_{name}"), s));
                }
            }
            v.push((format!("decoder.{l}.bn_gamma"), layer.gamma));
            v.push((format!("decoder.{l}.bn_beta"), layer.beta));
        }
        v.push(("head.weight".into(), self.out_w));
        v.push(("head.bias".into(), self.out_b));
        v.sort_by_key(|(_, s)| s.offset);
        v
    }

    pub fn encoder_range(&self) -> std::ops::Range<usize> {
        0..self.encoder_b[2].range().end
    }
}

/// Whether batch norm uses batch statistics or the running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyModel {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
    /// Per hidden layer: running mean then running variance.
    pub running: Vec<f64>,
}

/// Decoder outputs for a set of queries.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `rows × (C + 1)` class logits.
    pub logits: Array2<f64>,
    pub sdf: Array1<f64>,
}

impl Prediction {
    pub fn classes(&self) -> Vec<u16> {
        self.logits
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (i, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = i;
                    }
                }
                best as u16
            })
            .collect()
    }
}

pub fn points_to_array(points: &[Point]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(i, a)| points[i][a])
}

impl OccupancyModel {
    /// He-normal weights for ReLU layers, `1/fan_in` variance for the
    /// linear ones, zero biases, unit batch-norm scale.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |s: Segment, fan_in: usize, gain: f64, params: &mut [f64]| {
            let n = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            for x in &mut params[s.range()] {
                *x = n.sample(&mut rng);
            }
        };
        fill(layout.encoder_w[0], 3, 2.0, &mut params);
        fill(layout.encoder_w[1], config.encoder_widths[0], 2.0, &mut params);
        fill(layout.encoder_w[2], config.encoder_widths[1], 1.0, &mut params);
        // each input block is scaled by its own fan-in so the three query
        // coordinates are not drowned out by the 1024 latent entries
        for layer in &layout.hidden {
            if let Some(s) = layer.w_prev {
                fill(s, config.hidden_dim, 2.0, &mut params);
            }
            if let Some(s) = layer.w_latent {
                fill(s, config.latent_dim, 2.0, &mut params);
            }
            if let Some(s) = layer.w_query {
                fill(s, 3, 2.0, &mut params);
            }
            params[layer.gamma.range()].fill(1.0);
        }
        fill(layout.out_w, config.hidden_dim, 1.0, &mut params);
        let mut running = vec![0.0; 2 * HIDDEN_LAYERS * config.hidden_dim];
        for l in 0..HIDDEN_LAYERS {
            let h = config.hidden_dim;
            running[(2 * l + 1) * h..(2 * l + 2) * h].fill(1.0);
        }
        Self { config, layout, params, running }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn running_mean(&self, layer: usize) -> &[f64] {
        let h = self.config.hidden_dim;
        &self.running[2 * layer * h..(2 * layer + 1) * h]
    }

    pub fn running_var(&self, layer: usize) -> &[f64] {
        let h = self.config.hidden_dim;
        &self.running[(2 * layer + 1) * h..(2 * layer + 2) * h]
    }

    /// Max-pooled latent code of a normalized cloud.
    pub fn encode(&self, points: &[Point]) -> Result<Array1<f64>> {
        if points.is_empty() {
            return Err(Error::InvalidInput("cannot encode an empty cloud".into()));
        }
        Ok(backprop::encode_tape(self, &points_to_array(points)).latent)
    }

    /// Decoder outputs for queries sharing one latent code. In train mode
    /// batch norm uses the statistics of these queries (running averages
    /// are left alone).
    pub fn decode(&self, latent: &Array1<f64>, queries: &[Point], mode: Mode) -> Prediction {
        if queries.is_empty() {
            return Prediction {
                logits: Array2::zeros((0, self.config.num_classes + 1)),
                sdf: Array1::zeros(0),
            };
        }
        let q = points_to_array(queries);
        let (out, _) = backprop::decode_rows(self, &[latent.view()], &[0..queries.len()], &q, mode, false);
        split_output(&out, self.config.num_classes)
    }

    /// Eval-mode predictions, processed in chunks to bound memory.
    pub fn predict(&self, cloud: &[Point], queries: &[Point]) -> Result<Prediction> {
        let latent = self.encode(cloud)?;
        let c = self.config.num_classes;
        let mut logits = Array2::zeros((queries.len(), c + 1));
        let mut sdf = Array1::zeros(queries.len());
        for (i, chunk) in queries.chunks(4096).enumerate() {
            let p = self.decode(&latent, chunk, Mode::Eval);
            let at = i * 4096;
            logits.slice_mut(ndarray::s![at..at + chunk.len(), ..]).assign(&p.logits);
            sdf.slice_mut(ndarray::s![at..at + chunk.len()]).assign(&p.sdf);
        }
        Ok(Prediction { logits, sdf })
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.params.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i} is {}", self.params[i])));
        }
        Ok(())
    }
}

fn split_output(out: &Array2<f64>, c: usize) -> Prediction {
    Prediction {
        logits: out.slice(ndarray::s![.., ..c + 1]).to_owned(),
        sdf: out.index_axis(Axis(1), c + 1).to_owned(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig { num_classes: 3, latent_dim: 32, hidden_dim: 16, encoder_widths: [8, 12] }
    }

    fn cloud(seed: u64, n: usize) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Point::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn layout_is_contiguous() {
        let l = Layout::new(&ModelConfig::default());
        let segs = l.named_segments();
        let mut at = 0;
        for (_, s) in &segs {
            assert_eq!(s.offset, at);
            at += s.len();
        }
        assert_eq!(at, l.total);
        // skip layer sees hidden, latent and query inputs
        let skip = l.hidden[SKIP_LAYER];
        assert_eq!(skip.w_prev.unwrap().rows + skip.w_latent.unwrap().rows + skip.w_query.unwrap().rows, 512 + 1024 + 3);
        assert_eq!(l.out_w.cols, 7);
    }

    #[test]
    fn encoder_is_permutation_invariant() {
        let m = OccupancyModel::new(small(), 1);
        let pts = cloud(2, 50);
        let mut rev = pts.clone();
        rev.reverse();
        assert_eq!(m.encode(&pts).unwrap(), m.encode(&rev).unwrap());
        let one = vec![pts[0]];
        let many = vec![pts[0]; 100];
        assert_eq!(m.encode(&one).unwrap(), m.encode(&many).unwrap());
        assert!(m.encode(&[]).is_err());
    }

    #[test]
    fn far_point_changes_latent() {
        let m = OccupancyModel::new(ModelConfig::default(), 3);
        let pts = cloud(4, 100);
        let mut other = pts.clone();
        other[0] = Point::new(25.0, -30.0, 40.0);
        assert_ne!(m.encode(&pts).unwrap(), m.encode(&other).unwrap());
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let mut m = OccupancyModel::new(small(), 5);
        let (w, b) = (m.layout.out_w, m.layout.out_b);
        m.params[w.range()].fill(0.0);
        m.params[b.range()].fill(0.0);
        let p = m.predict(&cloud(6, 20), &cloud(7, 9)).unwrap();
        assert!(p.logits.iter().all(|&x| x == 0.0));
        let again = m.predict(&cloud(6, 20), &cloud(7, 9)).unwrap();
        assert_eq!(p, again);
    }
}
