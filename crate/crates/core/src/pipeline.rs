//! Batch commands behind the `occloc` binary. Each command reads a JSON
//! config (any field may be omitted), writes its artifacts under one
//! output directory and finishes with a `manifest.json` there.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{match_and_transfer, read_library, write_library, IcpParams, Template, LIBRARY_MANIFEST};
use crate::format::{read_json, write_json};
use crate::infer::{boxes_from_json, export_prediction, infer_atlas, read_boxes, write_boxes, InferParams};
use crate::metrics::{aggregate, evaluate_case, write_metric_csvs, MetricRecord, MetricTable};
use crate::occnet::{
    accuracy, load_checkpoint, save_checkpoint, train_loop, write_loss_trace, ModelConfig, OccupancyModel, TrainConfig,
    TrainState, TrainingExample,
};
use crate::phantom::{extract_skin, generate_phantom, PhantomSpec};
use crate::sensor::{backproject, condition_eval_cloud, render_depth, CameraPose, ConditioningParams, SensorPointCloud};
use crate::sortsample::{build_training_pair, read_pair, write_pair, PairParams};
use crate::volume::{AxisAlignedBox, Label, VoxelLabelVolume};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Seconds per stage.
    pub timings: BTreeMap<String, f64>,
    /// Command-specific counts and results.
    pub summary: serde_json::Value,
}

impl RunManifest {
    fn new(command: &str, config: &impl Serialize, seeds: Vec<u64>, inputs: Vec<PathBuf>) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(config)?,
            seeds,
            inputs,
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            summary: serde_json::Value::Null,
        })
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let r = f();
        self.timings.insert(stage.into(), t.elapsed().as_secs_f64());
        r
    }

    fn finish(mut self, out: &Path, summary: impl Serialize) -> Result<Self> {
        self.summary = serde_json::to_value(summary)?;
        write_json(&out.join(MANIFEST), &self)?;
        Ok(self)
    }
}

/// Loads a config file if given, otherwise the defaults.
pub fn load_config<T: Default + serde::de::DeserializeOwned>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => read_json(p).map_err(|e| match e {
            Error::Format { path, reason } => Error::InvalidInput(format!("config {}: {reason}", path.display())),
            e => e,
        }),
        None => Ok(T::default()),
    }
}

fn derive_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Files in `dir` whose names end with `suffix`, sorted by name.
pub fn list_files(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)))
        .collect();
    v.sort();
    Ok(v)
}

fn stem(path: &Path, suffix: &str) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    name.strip_suffix(suffix).unwrap_or(name).to_string()
}

// ---------------------------------------------------------------- gen

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub train: usize,
    pub eval: usize,
    /// Template for every phantom; its seed is replaced per phantom.
    pub phantom: PhantomSpec,
    /// Camera distance of the frontal evaluation view.
    pub eval_distance: f64,
    pub conditioning: ConditioningParams,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 16,
            eval: 4,
            phantom: PhantomSpec::default(),
            eval_distance: 2.0,
            conditioning: ConditioningParams::default(),
        }
    }
}

/// The frontal evaluation view of a volume: its conditioned cloud and the
/// per-class boxes, both in the camera frame.
pub fn frontal_case(
    v: &VoxelLabelVolume,
    distance: f64,
    conditioning: &ConditioningParams,
    seed: u64,
) -> Result<(SensorPointCloud, Vec<Option<AxisAlignedBox>>)> {
    let target = v.aabb_of_foreground().ok_or_else(|| Error::Degenerate("volume has no structures".into()))?.center();
    let pose = CameraPose::frontal(target, distance);
    let image = render_depth(&extract_skin(v), &pose)?;
    if image.is_all_miss() {
        return Err(Error::Degenerate("frontal render has no hits".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = condition_eval_cloud(&backproject(&image), conditioning, &mut rng)?;
    cloud.seed = Some(seed);
    let iso = pose.world_to_camera()?;
    let boxes = (1..=v.num_classes() as Label).map(|k| v.aabb_of_class(k).map(|b| b.map_corners(|p| iso * p))).collect();
    Ok((cloud, boxes))
}

/// `train/phantom_NNN.olv`, `eval/case_NNN.{olv,xyz,boxes.json}` and a
/// template library of the training phantoms under `templates/`.
pub fn run_gen(cfg: &GenConfig, out: &Path) -> Result<RunManifest> {
    if cfg.train + cfg.eval == 0 {
        return Err(Error::InvalidInput("gen needs at least one phantom".into()));
    }
    let seeds = derive_seeds(cfg.seed, cfg.train + cfg.eval);
    let mut m = RunManifest::new("gen", cfg, seeds.clone(), Vec::new())?;
    let (train_dir, eval_dir, lib_dir) = (out.join("train"), out.join("eval"), out.join("templates"));
    for d in [&train_dir, &eval_dir, &lib_dir] {
        create_dir(d)?;
    }
    let mut templates = Vec::new();
    let mut num_classes = 0;
    m.time("generate", || {
        for (i, &seed) in seeds.iter().enumerate() {
            let v = generate_phantom(&PhantomSpec { seed, ..cfg.phantom.clone() })?;
            num_classes = v.num_classes();
            let (cloud, boxes) = frontal_case(&v, cfg.eval_distance, &cfg.conditioning, seed)?;
            if i < cfg.train {
                let id = format!("phantom_{i:03}");
                v.write_olv(&train_dir.join(format!("{id}.olv")))?;
                templates.push(Template { id, cloud: cloud.points, boxes });
            } else {
                let id = format!("case_{:03}", i - cfg.train);
                v.write_olv(&eval_dir.join(format!("{id}.olv")))?;
                cloud.write_xyz(&eval_dir.join(format!("{id}.xyz")))?;
                write_boxes(&eval_dir.join(format!("{id}.boxes.json")), &boxes)?;
            }
        }
        Ok(())
    })?;
    write_library(&lib_dir, &templates, num_classes)?;
    m.outputs = vec![train_dir, eval_dir, lib_dir];
    m.finish(out, serde_json::json!({ "train": cfg.train, "eval": cfg.eval, "num_classes": num_classes }))
}

// ------------------------------------------------------------ dataset

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    /// Training pairs per volume.
    pub augmentations: usize,
    pub pair: PairParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { seed: 0, augmentations: 8, pair: PairParams::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub volumes: usize,
    pub pairs: usize,
    /// Discarded pairs per failure kind.
    pub discarded: BTreeMap<String, usize>,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidInput(_) => "invalid_input",
        Error::ClassAbsent(_) => "class_absent",
        Error::Infeasible { .. } => "infeasible",
        Error::Degenerate(_) => "degenerate",
        Error::NonFinite(_) => "non_finite",
        Error::Format { .. } => "format",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
    }
}

/// Reads `<input>/train/*.olv` (or `<input>/*.olv`) and writes
/// `pairs/pair_VVV_AAA.pair`.
pub fn run_dataset(cfg: &DatasetConfig, input: &Path, out: &Path) -> Result<RunManifest> {
    let train = input.join("train");
    let src = if train.is_dir() { train } else { input.to_path_buf() };
    let volumes = list_files(&src, ".olv")?;
    if volumes.is_empty() {
        return Err(Error::InvalidInput(format!("no .olv volumes in {}", src.display())));
    }
    let seeds = derive_seeds(cfg.seed, volumes.len() * cfg.augmentations);
    let mut m = RunManifest::new("dataset", cfg, vec![cfg.seed], vec![src])?;
    let pairs_dir = out.join("pairs");
    create_dir(&pairs_dir)?;
    let mut summary = DatasetSummary { volumes: volumes.len(), ..Default::default() };
    m.time("pairs", || {
        for (vi, path) in volumes.iter().enumerate() {
            let v = VoxelLabelVolume::read_olv(path)?;
            for a in 0..cfg.augmentations {
                let seed = seeds[vi * cfg.augmentations + a];
                match build_training_pair(&v, &cfg.pair, seed) {
                    Ok(p) => {
                        let file = pairs_dir.join(format!("pair_{vi:03}_{a:03}.pair"));
                        write_pair(&file, &p.cloud, &p.samples, v.num_classes(), Some(seed))?;
                        summary.pairs += 1;
                    }
                    Err(e) => {
                        log::warn!("discarding pair {a} of {}: {e}", path.display());
                        *summary.discarded.entry(error_kind(&e).into()).or_default() += 1;
                    }
                }
            }
        }
        Ok(())
    })?;
    log::info!("{} pairs written, discarded {:?}", summary.pairs, summary.discarded);
    m.outputs = vec![pairs_dir];
    m.finish(out, summary)
}

// -------------------------------------------------------------- train

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCommandConfig {
    /// Seeds model initialization.
    pub seed: u64,
    /// `num_classes` is taken from the dataset.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Continue from `<out>/checkpoint` when it exists.
    pub resume: bool,
}


/// Loads every pair file under `<input>/pairs` (or `<input>`).
pub fn load_examples(input: &Path) -> Result<(usize, Vec<TrainingExample>)> {
    let pairs = input.join("pairs");
    let dir = if pairs.is_dir() { pairs } else { input.to_path_buf() };
    let mut num_classes = None;
    let mut out = Vec::new();
    for path in list_files(&dir, ".pair")? {
        let (h, cloud, samples) = read_pair(&path)?;
        if *num_classes.get_or_insert(h.num_classes) != h.num_classes {
            return Err(Error::format(&path, "pair files disagree on the class count"));
        }
        out.push(TrainingExample { cloud: cloud.points, samples });
    }
    match num_classes {
        Some(c) => Ok((c, out)),
        None => Err(Error::InvalidInput(format!("no training pairs in {}", dir.display()))),
    }
}

pub fn run_train(cfg: &TrainCommandConfig, input: &Path, out: &Path) -> Result<RunManifest> {
    let mut m = RunManifest::new("train", cfg, vec![cfg.seed, cfg.train.seed], vec![input.to_path_buf()])?;
    let (num_classes, data) = m.time("load", || load_examples(input))?;
    let ckpt = out.join("checkpoint");
    let mut state = if cfg.resume && ckpt.join(crate::occnet::CHECKPOINT_FILE).is_file() {
        let (_, s) = load_checkpoint(&ckpt)?;
        if s.model.config.num_classes != num_classes {
            return Err(Error::InvalidInput(format!(
                "checkpoint has {} classes, dataset {num_classes}",
                s.model.config.num_classes
            )));
        }
        s
    } else {
        let mc = ModelConfig { num_classes, ..cfg.model };
        TrainState::new(OccupancyModel::new(mc, cfg.seed), cfg.seed)
    };
    m.time("train", || train_loop(&data, &cfg.train, &mut state, |s| save_checkpoint(&ckpt, s, Some(&cfg.train))))?;
    if state.epoch == 0 {
        save_checkpoint(&ckpt, &state, Some(&cfg.train))?;
    }
    let trace = out.join("loss.csv");
    write_loss_trace(&trace, &state.records)?;
    let acc = m.time("accuracy", || accuracy(&state.model, &data))?;
    log::info!("training accuracy {acc:.4} after {} epochs", state.epoch);
    m.outputs = vec![ckpt, trace];
    m.finish(
        out,
        serde_json::json!({ "pairs": data.len(), "epochs": state.epoch, "steps": state.step, "train_accuracy": acc }),
    )
}

// -------------------------------------------------------------- infer

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferCommandConfig {
    pub seed: u64,
    pub params: InferParams,
    pub meshes: bool,
    /// Reject checkpoints with a different class count.
    pub expect_classes: Option<usize>,
}


/// `cloud` is one `.xyz` file or a directory of them; each case lands in
/// `<out>/<case id>/`.
pub fn run_infer(cfg: &InferCommandConfig, checkpoint: &Path, cloud: &Path, out: &Path) -> Result<RunManifest> {
    let (_, state) = load_checkpoint(checkpoint)?;
    let model = state.model;
    if let Some(c) = cfg.expect_classes {
        if c != model.config.num_classes {
            return Err(Error::InvalidInput(format!(
                "checkpoint predicts {} classes, expected {c}",
                model.config.num_classes
            )));
        }
    }
    let files = if cloud.is_dir() { list_files(cloud, ".xyz")? } else { vec![cloud.to_path_buf()] };
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no .xyz clouds in {}", cloud.display())));
    }
    let mut m = RunManifest::new("infer", cfg, vec![cfg.seed], vec![checkpoint.to_path_buf(), cloud.to_path_buf()])?;
    let mut present = BTreeMap::new();
    for (i, f) in files.iter().enumerate() {
        let id = stem(f, ".xyz");
        let points = SensorPointCloud::read_xyz(f)?.points;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let pred = m.time(&format!("infer.{id}"), || infer_atlas(&model, &points, &cfg.params, &mut rng))?;
        let dir = out.join(&id);
        export_prediction(&dir, &pred, cfg.meshes)?;
        present.insert(id, pred.present().iter().filter(|&&p| p).count());
        m.outputs.push(dir);
    }
    m.finish(out, serde_json::json!({ "cases": files.len(), "classes_present": present }))
}

// --------------------------------------------------------------- eval

/// Case id → boxes, from `<dir>/<id>.boxes.json` files and
/// `<dir>/<id>/boxes.json` subdirectories.
pub fn collect_boxes(dir: &Path) -> Result<BTreeMap<String, crate::infer::BoxesJson>> {
    let mut out = BTreeMap::new();
    for f in list_files(dir, ".boxes.json")? {
        out.insert(stem(&f, ".boxes.json"), read_boxes(&f)?);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries.filter_map(|e| e.ok()) {
        let p = e.path().join("boxes.json");
        if p.is_file() {
            out.insert(e.file_name().to_string_lossy().into_owned(), read_boxes(&p)?);
        }
    }
    Ok(out)
}

fn num_classes_of(map: &crate::infer::BoxesJson) -> usize {
    map.keys().copied().max().unwrap_or(0) as usize
}

/// Records for every reference case; ids must match exactly.
pub fn evaluate_dirs(predictions: &Path, references: &Path) -> Result<Vec<MetricRecord>> {
    let pred = collect_boxes(predictions)?;
    let refs = collect_boxes(references)?;
    if refs.is_empty() {
        return Err(Error::InvalidInput(format!("no reference boxes in {}", references.display())));
    }
    let (pk, rk): (Vec<_>, Vec<_>) = (pred.keys().collect(), refs.keys().collect());
    if pk != rk {
        return Err(Error::InvalidInput(format!("prediction ids {pk:?} do not match reference ids {rk:?}")));
    }
    let mut records = Vec::new();
    for (id, r) in &refs {
        let c = num_classes_of(r);
        let p = &pred[id];
        if num_classes_of(p) != c {
            return Err(Error::InvalidInput(format!("case {id}: {} predicted classes vs {c}", num_classes_of(p))));
        }
        records.extend(evaluate_case(&boxes_from_json(p, c), &boxes_from_json(r, c))?);
    }
    Ok(records)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {}

pub fn run_eval(predictions: &Path, references: &Path, out: &Path) -> Result<(RunManifest, MetricTable)> {
    let mut m = RunManifest::new(
        "eval",
        &EvalConfig::default(),
        Vec::new(),
        vec![predictions.to_path_buf(), references.to_path_buf()],
    )?;
    let records = evaluate_dirs(predictions, references)?;
    let table = aggregate(&records)?;
    write_metric_csvs(out, &table)?;
    m.outputs = ["cd.csv", "iou.csv", "esf.csv", "summary.csv"].iter().map(|f| out.join(f)).collect();
    let ids: Vec<String> = collect_boxes(references)?.into_keys().collect();
    let m = m.finish(out, serde_json::json!({ "cases": ids, "records": records.len(), "misses": table.total_misses }))?;
    Ok((m, table))
}

// ----------------------------------------------------------- baseline

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub icp: IcpParams,
}

/// `templates` is a library directory or a `gen` output containing one;
/// `patients` holds `.xyz` clouds and, optionally, reference boxes for
/// metrics.
pub fn run_baseline(cfg: &BaselineConfig, templates: &Path, patients: &Path, out: &Path) -> Result<RunManifest> {
    let lib = if templates.join(LIBRARY_MANIFEST).is_file() { templates.to_path_buf() } else { templates.join("templates") };
    let (num_classes, library) = read_library(&lib)?;
    if library.is_empty() {
        return Err(Error::InvalidInput("template library is empty".into()));
    }
    let eval = patients.join("eval");
    let pdir = if eval.is_dir() { eval } else { patients.to_path_buf() };
    let files = list_files(&pdir, ".xyz")?;
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no patient clouds in {}", pdir.display())));
    }
    let mut m = RunManifest::new("baseline", cfg, Vec::new(), vec![lib, pdir.clone()])?;
    let mut chosen = BTreeMap::new();
    let cases = out.join("cases");
    for f in &files {
        let id = stem(f, ".xyz");
        let points = SensorPointCloud::read_xyz(f)?.points;
        let r = m.time(&format!("match.{id}"), || match_and_transfer(&points, &library, &cfg.icp))?;
        let dir = cases.join(&id);
        create_dir(&dir)?;
        let mut boxes = r.boxes.clone();
        boxes.resize(num_classes, None);
        write_boxes(&dir.join("boxes.json"), &boxes)?;
        chosen.insert(id, serde_json::json!({ "template": r.id, "chamfer_m": r.chamfer }));
    }
    m.outputs.push(cases.clone());
    let has_refs = !list_files(&pdir, ".boxes.json")?.is_empty();
    if has_refs {
        let table = aggregate(&evaluate_dirs(&cases, &pdir)?)?;
        let metrics = out.join("metrics");
        write_metric_csvs(&metrics, &table)?;
        m.outputs.push(metrics);
    }
    m.finish(out, serde_json::json!({ "templates": library.len(), "matches": chosen }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_gen() -> GenConfig {
        GenConfig { seed: 3, train: 2, eval: 1, ..GenConfig::default() }
    }

    #[test]
    fn gen_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_gen(&small_gen(), a.path()).unwrap();
        run_gen(&small_gen(), b.path()).unwrap();
        for rel in ["train/phantom_001.olv", "eval/case_000.olv", "eval/case_000.xyz", "eval/case_000.boxes.json"] {
            assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
        assert!(a.path().join(MANIFEST).is_file());
        assert_eq!(list_files(&a.path().join("train"), ".olv").unwrap().len(), 2);
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        run_gen(&small_gen(), dir.path()).unwrap();
        let eval = dir.path().join("eval");
        let (_, table) = run_eval(&eval, &eval, &dir.path().join("metrics")).unwrap();
        for s in &table.structures {
            assert_eq!((s.cd_cm.mean, s.iou.mean, s.esf.mean), (0.0, 1.0, 1.0));
        }
    }

    #[test]
    fn eval_rejects_id_mismatch() {
        let (p, r) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let b = vec![Some(AxisAlignedBox::new(crate::Point::origin(), crate::Point::new(1.0, 1.0, 1.0)))];
        write_boxes(&p.path().join("a.boxes.json"), &b).unwrap();
        write_boxes(&r.path().join("b.boxes.json"), &b).unwrap();
        assert!(matches!(evaluate_dirs(p.path(), r.path()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn baseline_on_own_templates_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        run_gen(&GenConfig { train: 2, eval: 0, ..small_gen() }, dir.path()).unwrap();
        // use the template clouds themselves as patients
        let lib = dir.path().join("templates");
        let patients = dir.path().join("patients");
        create_dir(&patients).unwrap();
        for id in ["phantom_000", "phantom_001"] {
            std::fs::copy(lib.join(format!("{id}.xyz")), patients.join(format!("{id}.xyz"))).unwrap();
            std::fs::copy(lib.join(format!("{id}.boxes.json")), patients.join(format!("{id}.boxes.json"))).unwrap();
        }
        let out = dir.path().join("baseline");
        run_baseline(&BaselineConfig::default(), dir.path(), &patients, &out).unwrap();
        let cd = std::fs::read_to_string(out.join("metrics/cd.csv")).unwrap();
        for line in cd.lines().skip(1) {
            let mean: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert!(mean < 1e-6, "{line}");
        }
    }
}
