use std::path::Path;

use ndarray::ArrayView1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backprop::{loss_and_gradient, BatchItem, ForwardStats, LossParts};
use super::{Mode, OccupancyModel, BN_MOMENTUM, HIDDEN_LAYERS};
use crate::deform::random_rotation;
use crate::sensor::{point_drop, IsoNormalization};
use crate::sortsample::{OccupancySampleSet, TrainingPair};
use crate::{Error, Point, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Weight of the squared signed-distance error.
    pub lambda: f64,
    /// Clouds whose queries share one batch-norm batch.
    pub clouds_per_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub point_drop: bool,
    pub rotation: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            lambda: 100.0,
            clouds_per_batch: 4,
            epochs: 30,
            seed: 0,
            point_drop: true,
            rotation: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.lambda >= 0.0
            && self.lambda.is_finite()
            && self.clouds_per_batch > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid training config {self:?}")))
        }
    }
}

/// A training cloud with its samples, both in the same metric frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub cloud: Vec<Point>,
    pub samples: OccupancySampleSet,
}

impl From<TrainingPair> for TrainingExample {
    fn from(p: TrainingPair) -> Self {
        Self { cloud: p.cloud.points, samples: p.samples }
    }
}

/// Optional point drop and rotation, then one normalization fitted to the
/// cloud applied to cloud, queries and distances.
pub fn prepare_item(ex: &TrainingExample, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<BatchItem> {
    let mut cloud = if cfg.point_drop { point_drop(&ex.cloud, rng) } else { ex.cloud.clone() };
    let mut queries: Vec<Point> = ex.samples.iter().map(|s| s.position).collect();
    if cfg.rotation {
        let r = random_rotation(rng, &mut cloud);
        for q in &mut queries {
            *q = Point::from(r * q.coords);
        }
    }
    let norm = IsoNormalization::fit(&cloud)?;
    Ok(BatchItem {
        points: cloud.iter().map(|p| norm.apply(p)).collect(),
        queries: queries.iter().map(|q| norm.apply_unclamped(q)).collect(),
        labels: ex.samples.iter().map(|s| s.label).collect(),
        distances: ex.samples.iter().map(|s| s.signed_distance * norm.scale).collect(),
    })
}

/// Loss of a single query: cross-entropy of `logits` against `label` plus
/// `lambda` times the squared distance error.
pub fn loss(logits: ArrayView1<f64>, sdf: f64, label: u16, distance: f64, lambda: f64) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    let e = sdf - distance;
    lse - logits[label as usize] + lambda * e * e
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            params[i] -= cfg.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub ce: f64,
    /// The weighted distance term `λ · mse`.
    pub sdf: f64,
    pub total: f64,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: OccupancyModel,
    pub adam: Adam,
    /// Seed the model was initialized from.
    pub init_seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub records: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(model: OccupancyModel, init_seed: u64) -> Self {
        let adam = Adam::new(model.num_params());
        Self { model, adam, init_seed, epoch: 0, step: 0, records: Vec::new() }
    }
}

fn update_running(model: &mut OccupancyModel, stats: &ForwardStats) {
    let h = model.config.hidden_dim;
    for l in 0..HIDDEN_LAYERS {
        let (mean, var) = (&stats.mean[l], &stats.var[l]);
        for j in 0..h {
            let m = &mut model.running[2 * l * h + j];
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * mean[j];
            let v = &mut model.running[(2 * l + 1) * h + j];
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * var[j];
        }
    }
}

/// One Adam update on a batch; batch-norm running averages move too.
pub fn train_step(model: &mut OccupancyModel, adam: &mut Adam, items: &[BatchItem], cfg: &TrainConfig) -> Result<LossParts> {
    let (parts, grad, stats) = loss_and_gradient(model, items, cfg.lambda)?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient {i} is {} at loss {}", grad[i], parts.total)));
    }
    adam.step(&mut model.params, &grad, cfg);
    update_running(model, &stats);
    model.check_finite()?;
    Ok(parts)
}

/// Runs the remaining epochs of `state`. Each epoch shuffles the examples
/// with its own random stream, so a resumed run continues the same trace.
/// `after_epoch` sees the state once every epoch is done.
pub fn train_loop(
    data: &[TrainingExample],
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut after_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    while state.epoch < cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(state.epoch as u64 + 1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.clouds_per_batch) {
            let items = chunk.iter().map(|&i| prepare_item(&data[i], cfg, &mut rng)).collect::<Result<Vec<_>>>()?;
            let parts = train_step(&mut state.model, &mut state.adam, &items, cfg)?;
            state.records.push(LossRecord {
                step: state.step,
                epoch: state.epoch,
                ce: parts.ce,
                sdf: cfg.lambda * parts.sdf,
                total: parts.total,
            });
            state.step += 1;
        }
        state.epoch += 1;
        log::info!(
            "epoch {} loss {:.5}",
            state.epoch,
            state.records.last().map_or(f64::NAN, |r| r.total)
        );
        after_epoch(state)?;
    }
    Ok(())
}

/// Fraction of occupancy samples classified correctly, in eval mode and
/// without augmentation.
pub fn accuracy(model: &OccupancyModel, data: &[TrainingExample]) -> Result<f64> {
    let plain = TrainConfig { point_drop: false, rotation: false, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut correct, mut total) = (0usize, 0usize);
    for ex in data {
        let item = prepare_item(ex, &plain, &mut rng)?;
        let latent = model.encode(&item.points)?;
        let pred = model.decode(&latent, &item.queries, Mode::Eval).classes();
        correct += pred.iter().zip(&item.labels).filter(|(a, b)| a == b).count();
        total += item.labels.len();
    }
    if total == 0 {
        return Err(Error::InvalidInput("no samples to score".into()));
    }
    Ok(correct as f64 / total as f64)
}

pub fn write_loss_trace(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;
    use crate::sortsample::{OccupancySample, StructureSamples};
    use ndarray::array;

    fn small() -> ModelConfig {
        ModelConfig { num_classes: 2, latent_dim: 32, hidden_dim: 24, encoder_widths: [8, 16] }
    }

    /// Two blobs at different depths; class 1 inside the first, 2 inside
    /// the second.
    fn example(seed: u64) -> TrainingExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = |c: [f64; 3], r: f64| {
            Point::new(
                c[0] + rng.random_range(-r..r),
                c[1] + rng.random_range(-r..r),
                c[2] + rng.random_range(-r..r),
            )
        };
        let cloud: Vec<Point> = (0..60).map(|i| p([(i % 2) as f64 * 0.3, 0.0, 2.0], 0.1)).collect();
        let mut structures = Vec::new();
        for (class_id, c) in [(1u16, [0.0, 0.0, 2.1]), (2, [0.3, 0.0, 2.1])] {
            let inside = (0..8)
                .map(|_| OccupancySample { position: p(c, 0.05), label: class_id, signed_distance: -0.02 })
                .collect();
            let outside = (0..8)
                .map(|_| OccupancySample { position: p([c[0], 0.2, c[2]], 0.05), label: 0, signed_distance: 0.08 })
                .collect();
            structures.push(StructureSamples { class_id, inside, outside });
        }
        TrainingExample { cloud, samples: OccupancySampleSet { n: 8, structures } }
    }

    fn plain(seed: u64, lr: f64) -> TrainConfig {
        TrainConfig { lr, seed, epochs: 3, clouds_per_batch: 2, point_drop: false, rotation: false, ..TrainConfig::default() }
    }

    #[test]
    fn loss_examples() {
        let perfect = array![20.0, 0.0, 0.0];
        assert!(loss(perfect.view(), 0.3, 0, 0.3, 100.0) < 1e-6);
        let certain = array![1e3, 0.0, 0.0];
        assert!((loss(certain.view(), 0.4, 0, 0.3, 100.0) - 1.0).abs() < 1e-9);
        let uniform = ndarray::Array1::<f64>::zeros(6);
        assert!((loss(uniform.view(), 0.1, 3, 0.1, 100.0) - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let data = vec![example(1), example(2)];
        let mut state = TrainState::new(OccupancyModel::new(small(), 1), 1);
        let before = state.model.params.clone();
        train_loop(&data, &plain(0, 0.0), &mut state, |_| Ok(())).unwrap();
        assert_eq!(state.model.params, before);
        assert_eq!(state.records.len(), 3);
    }

    /// One cloud with all of its samples forms the batch.
    #[test]
    fn single_sample_batch_loss_drops_tenfold() {
        let cfg = TrainConfig::default();
        let item = prepare_item(&example(3), &plain(0, 0.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut model = OccupancyModel::new(small(), 4);
        let mut adam = Adam::new(model.num_params());
        let first = train_step(&mut model, &mut adam, std::slice::from_ref(&item), &cfg).unwrap().total;
        let mut last = first;
        for _ in 1..200 {
            last = train_step(&mut model, &mut adam, std::slice::from_ref(&item), &cfg).unwrap().total;
        }
        assert!(last * 10.0 <= first, "{first} -> {last}");
    }

    #[test]
    fn trace_is_reproducible_and_resumable() {
        let data: Vec<_> = (0..4).map(example).collect();
        let cfg = TrainConfig { point_drop: true, rotation: true, ..plain(9, 1e-3) };
        let run = |epochs: usize, state: &mut TrainState| {
            train_loop(&data, &TrainConfig { epochs, ..cfg.clone() }, state, |_| Ok(())).unwrap();
        };
        let mut a = TrainState::new(OccupancyModel::new(small(), 2), 2);
        run(3, &mut a);
        let mut b = TrainState::new(OccupancyModel::new(small(), 2), 2);
        run(3, &mut b);
        assert_eq!(a.records, b.records);
        assert_eq!(a.model, b.model);

        let mut c = TrainState::new(OccupancyModel::new(small(), 2), 2);
        run(1, &mut c);
        run(3, &mut c);
        assert_eq!(a.records, c.records);
    }

    #[test]
    fn cross_entropy_falls_without_distance_term() {
        let data: Vec<_> = (0..4).map(example).collect();
        let cfg = TrainConfig { lambda: 0.0, epochs: 40, ..plain(5, 2e-3) };
        let mut state = TrainState::new(OccupancyModel::new(small(), 6), 6);
        train_loop(&data, &cfg, &mut state, |_| Ok(())).unwrap();
        let first = state.records[0].ce;
        let last = state.records.last().unwrap().ce;
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert!(state.records.iter().all(|r| r.sdf == 0.0));
        assert!(accuracy(&state.model, &data).unwrap() > 0.8);
    }

    #[test]
    fn rotation_keeps_labels() {
        let ex = example(7);
        let cfg = TrainConfig { rotation: true, point_drop: false, ..TrainConfig::default() };
        let item = prepare_item(&ex, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let base = prepare_item(&ex, &plain(0, 0.0), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(item.labels, base.labels);
        // pairwise distances between queries survive up to the scale change
        let ratio = (item.queries[0] - item.queries[5]).norm() / (base.queries[0] - base.queries[5]).norm();
        let ratio2 = (item.queries[3] - item.queries[20]).norm() / (base.queries[3] - base.queries[20]).norm();
        assert!((ratio - ratio2).abs() < 1e-9);
        assert!(item.points.iter().all(|p| p.coords.amax() <= 1.0));
    }

    #[test]
    fn empty_dataset_fails() {
        let mut state = TrainState::new(OccupancyModel::new(small(), 1), 1);
        assert!(train_loop(&[], &TrainConfig::default(), &mut state, |_| Ok(())).is_err());
    }
}
