//! Box metrics: center distance (CD), intersection over union (IoU) and
//! the enlargement scale factor (ESF), plus per-structure aggregation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::volume::{AxisAlignedBox, Label};
use crate::{Error, Result};

pub const CM_PER_M: f64 = 100.0;

/// Distance between box centers in meters.
pub fn center_distance(a: &AxisAlignedBox, b: &AxisAlignedBox) -> f64 {
    (a.center() - b.center()).norm()
}

pub fn center_distance_cm(a: &AxisAlignedBox, b: &AxisAlignedBox) -> f64 {
    center_distance(a, b) * CM_PER_M
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Iou {
    pub value: f64,
    /// Both boxes had zero volume on every remaining axis.
    pub degenerate: bool,
}

/// Intersection over union. Axes on which both boxes are flat are dropped,
/// so two coplanar rectangles get their 2D IoU.
pub fn iou_checked(a: &AxisAlignedBox, b: &AxisAlignedBox) -> Iou {
    let (mut va, mut vb, mut vi) = (1.0, 1.0, 1.0);
    let mut axes = 0;
    for k in 0..3 {
        let (ea, eb) = (a.max[k] - a.min[k], b.max[k] - b.min[k]);
        if ea == 0.0 && eb == 0.0 {
            if a.min[k] != b.min[k] {
                return Iou { value: 0.0, degenerate: false };
            }
            continue;
        }
        axes += 1;
        va *= ea;
        vb *= eb;
        vi *= (a.max[k].min(b.max[k]) - a.min[k].max(b.min[k])).max(0.0);
    }
    let union = va + vb - vi;
    if axes == 0 || union <= 0.0 {
        return Iou { value: 0.0, degenerate: true };
    }
    Iou { value: vi / union, degenerate: false }
}

pub fn iou(a: &AxisAlignedBox, b: &AxisAlignedBox) -> f64 {
    iou_checked(a, b).value
}

/// Smallest uniform scale `s ≥ 1` of `estimate` about its own center so
/// that it contains `reference`. Infinite when the estimate is flat on an
/// axis where the reference is not.
pub fn esf(estimate: &AxisAlignedBox, reference: &AxisAlignedBox) -> f64 {
    if estimate.contains_box(reference) {
        return 1.0;
    }
    let c = estimate.center();
    let mut s: f64 = 1.0;
    for k in 0..3 {
        let half = (estimate.max[k] - estimate.min[k]) / 2.0;
        let reach = (reference.min[k] - c[k]).abs().max((reference.max[k] - c[k]).abs());
        if half > 0.0 {
            s = s.max(reach / half);
        } else if reach > 0.0 {
            return f64::INFINITY;
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub structure: Label,
    pub cd_cm: Option<f64>,
    pub iou: Option<f64>,
    pub esf: Option<f64>,
    pub estimate_present: bool,
    pub reference_present: bool,
    pub iou_degenerate: bool,
    pub esf_infinite: bool,
}

impl MetricRecord {
    pub fn compute(structure: Label, estimate: Option<&AxisAlignedBox>, reference: Option<&AxisAlignedBox>) -> Self {
        let mut r = MetricRecord {
            structure,
            cd_cm: None,
            iou: None,
            esf: None,
            estimate_present: estimate.is_some(),
            reference_present: reference.is_some(),
            iou_degenerate: false,
            esf_infinite: false,
        };
        if let (Some(e), Some(f)) = (estimate, reference) {
            r.cd_cm = Some(center_distance_cm(e, f));
            let i = iou_checked(e, f);
            r.iou = Some(i.value);
            r.iou_degenerate = i.degenerate;
            let s = esf(e, f);
            r.esf_infinite = s.is_infinite();
            r.esf = s.is_finite().then_some(s);
        }
        r
    }

    /// The estimate is missing while a reference exists.
    pub fn is_miss(&self) -> bool {
        self.reference_present && !self.estimate_present
    }
}

/// Records for every class of one case; `estimates[k - 1]` is class `k`.
pub fn evaluate_case(estimates: &[Option<AxisAlignedBox>], references: &[Option<AxisAlignedBox>]) -> Result<Vec<MetricRecord>> {
    if estimates.len() != references.len() {
        return Err(Error::InvalidInput(format!(
            "{} estimated classes vs {} reference classes",
            estimates.len(),
            references.len()
        )));
    }
    Ok(estimates
        .iter()
        .zip(references)
        .enumerate()
        .filter(|(_, (_, r))| r.is_some())
        .map(|(i, (e, r))| MetricRecord::compute(i as Label + 1, e.as_ref(), r.as_ref()))
        .collect())
}

/// Population moments of the finite values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

impl Moments {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self { count: 0, mean: f64::NAN, std: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { count: v.len(), mean, std: var.sqrt() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureSummary {
    pub structure: Label,
    pub records: usize,
    pub misses: usize,
    pub infinite_esf: usize,
    pub cd_cm: Moments,
    pub iou: Moments,
    pub esf: Moments,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub structures: Vec<StructureSummary>,
    /// Mean over structures of each per-structure mean.
    pub overall_cd_cm: f64,
    pub overall_iou: f64,
    pub overall_esf: f64,
    pub total_misses: usize,
}

pub fn aggregate(records: &[MetricRecord]) -> Result<MetricTable> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no metric records to aggregate".into()));
    }
    let mut by: BTreeMap<Label, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        by.entry(r.structure).or_default().push(r);
    }
    let structures: Vec<StructureSummary> = by
        .into_iter()
        .map(|(structure, rs)| StructureSummary {
            structure,
            records: rs.len(),
            misses: rs.iter().filter(|r| r.is_miss()).count(),
            infinite_esf: rs.iter().filter(|r| r.esf_infinite).count(),
            cd_cm: Moments::of(rs.iter().filter_map(|r| r.cd_cm)),
            iou: Moments::of(rs.iter().filter_map(|r| r.iou)),
            esf: Moments::of(rs.iter().filter_map(|r| r.esf)),
        })
        .collect();
    let overall = |f: fn(&StructureSummary) -> Moments| {
        Moments::of(structures.iter().map(f).filter(|m| m.count > 0).map(|m| m.mean)).mean
    };
    Ok(MetricTable {
        overall_cd_cm: overall(|s| s.cd_cm),
        overall_iou: overall(|s| s.iou),
        overall_esf: overall(|s| s.esf),
        total_misses: structures.iter().map(|s| s.misses).sum(),
        structures,
    })
}

#[derive(Serialize)]
#[serde(rename_all = "PascalCase")]
struct CsvRow {
    value_number: Label,
    mean: f64,
    std: f64,
    count: usize,
    misses: usize,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Writes `cd.csv`, `iou.csv`, `esf.csv` (one row per structure) and
/// `summary.csv` into `dir`.
pub fn write_metric_csvs(dir: &Path, table: &MetricTable) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics: [(&str, fn(&StructureSummary) -> Moments); 3] =
        [("cd", |s| s.cd_cm), ("iou", |s| s.iou), ("esf", |s| s.esf)];
    for (name, get) in metrics {
        let path = dir.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        for s in &table.structures {
            let m = get(s);
            let row = CsvRow { value_number: s.structure, mean: m.mean, std: m.std, count: m.count, misses: s.misses };
            w.serialize(row).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["Metric", "Mean", "Misses"]).map_err(|e| csv_err(&path, e))?;
    for (name, v) in [("CD_cm", table.overall_cd_cm), ("IoU", table.overall_iou), ("ESF", table.overall_esf)] {
        w.write_record([name.to_string(), v.to_string(), table.total_misses.to_string()])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Point;
    use proptest::prelude::*;

    fn rect(x: f64, y: f64, side: f64) -> AxisAlignedBox {
        AxisAlignedBox::new(Point::new(x, y, 0.0), Point::new(x + side, y + side, 0.0))
    }

    #[test]
    fn figure_fixtures() {
        let want = [(0.25, 0.35, 0.62, 1.25), (0.5, 0.71, 0.39, 1.50), (0.75, 1.06, 0.24, 1.75), (1.0, 1.41, 0.14, 2.00)];
        for (off, cd, i, s) in want {
            // 2 × 2 cm squares, stored in meters
            let a = rect(0.0, 0.0, 0.02);
            let b = rect(off / 100.0, off / 100.0, 0.02);
            assert!((center_distance_cm(&a, &b) - cd).abs() <= 0.01);
            assert!((iou(&a, &b) - i).abs() <= 0.01, "{off}: {}", iou(&a, &b));
            assert!((esf(&a, &b) - s).abs() <= 0.01);
        }
        let a = rect(0.0, 0.0, 2.0);
        let b = rect(0.25, 0.25, 2.0);
        assert!((iou(&a, &b) - 3.0625 / 4.9375).abs() < 1e-12);
    }

    #[test]
    fn simple_cases() {
        let a = AxisAlignedBox::new(Point::new(0.0, 0.0, 0.0), Point::new(1.0, 1.0, 1.0));
        let far = a.translated(&crate::Vec3::new(3.0, 0.0, 0.0));
        assert_eq!(center_distance(&a, &a), 0.0);
        assert_eq!(iou(&a, &far), 0.0);
        assert_eq!(esf(&a.scaled(2.0), &a), 1.0);
        let p = AxisAlignedBox::new(Point::new(0.0, 0.0, 0.0), Point::new(0.0, 0.0, 0.0));
        assert!(iou_checked(&p, &p).degenerate);
        let flat = AxisAlignedBox::new(Point::new(0.0, 0.0, 0.0), Point::new(1.0, 1.0, 0.0));
        assert!(esf(&flat, &a).is_infinite());
        let r = MetricRecord::compute(1, Some(&flat), Some(&a));
        assert!(r.esf_infinite && r.esf.is_none());
    }

    #[test]
    fn aggregate_basics() {
        let rec = |s, cd| MetricRecord {
            structure: s,
            cd_cm: cd,
            iou: cd.map(|_| 0.5),
            esf: cd.map(|_| 1.0),
            estimate_present: cd.is_some(),
            reference_present: true,
            iou_degenerate: false,
            esf_infinite: false,
        };
        let t = aggregate(&[rec(1, Some(1.0)), rec(1, Some(3.0)), rec(2, Some(4.0)), rec(2, None)]).unwrap();
        assert_eq!(t.structures[0].cd_cm, Moments { count: 2, mean: 2.0, std: 1.0 });
        assert_eq!(t.structures[1].cd_cm, Moments { count: 1, mean: 4.0, std: 0.0 });
        assert_eq!(t.structures[1].misses, 1);
        assert_eq!(t.total_misses, 1);
        assert_eq!(t.overall_cd_cm, 3.0);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn aggregate_matches_two_pass_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let values: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..10.0)).collect();
        let records: Vec<_> = values
            .iter()
            .map(|&v| MetricRecord {
                structure: 3,
                cd_cm: Some(v),
                iou: Some(0.0),
                esf: Some(1.0),
                estimate_present: true,
                reference_present: true,
                iou_degenerate: false,
                esf_infinite: false,
            })
            .collect();
        let t = aggregate(&records).unwrap();
        let mut sum = 0.0;
        for v in &values {
            sum += v;
        }
        let mean = sum / 50.0;
        let mut ss = 0.0;
        for v in &values {
            ss += (v - mean) * (v - mean);
        }
        let std = (ss / 50.0).sqrt();
        assert!((t.structures[0].cd_cm.mean - mean).abs() < 1e-12);
        assert!((t.structures[0].cd_cm.std - std).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let recs = evaluate_case(&[Some(rect(0.0, 0.0, 0.02)), None], &[Some(rect(0.0, 0.0, 0.02)), Some(rect(0.0, 0.0, 0.02))]).unwrap();
        let t = aggregate(&recs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_metric_csvs(dir.path(), &t).unwrap();
        let cd = std::fs::read_to_string(dir.path().join("cd.csv")).unwrap();
        assert_eq!(cd.lines().next().unwrap(), "ValueNumber,Mean,Std,Count,Misses");
        assert_eq!(cd.lines().nth(1).unwrap(), "1,0.0,0.0,1,0");
        assert!(cd.lines().nth(2).unwrap().starts_with("2,NaN,NaN,0,1"));
    }

    fn arb_box() -> impl Strategy<Value = AxisAlignedBox> {
        (prop::array::uniform3(-1.0..1.0f64), prop::array::uniform3(0.01..1.0f64))
            .prop_map(|(c, e)| AxisAlignedBox::new(Point::from(c), Point::from(c) + crate::Vec3::from(e)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn metrics_are_translation_invariant(a in arb_box(), b in arb_box(), t in prop::array::uniform3(-5.0..5.0f64)) {
            let t = crate::Vec3::from(t);
            let (at, bt) = (a.translated(&t), b.translated(&t));
            prop_assert!((center_distance(&a, &b) - center_distance(&at, &bt)).abs() < 1e-9);
            prop_assert!((iou(&a, &b) - iou(&at, &bt)).abs() < 1e-9);
            prop_assert!((esf(&a, &b) - esf(&at, &bt)).abs() < 1e-9 * esf(&a, &b));
        }

        #[test]
        fn joint_scaling_scales_only_cd(a in arb_box(), b in arb_box(), k in 0.1..10.0f64) {
            let s = |x: &AxisAlignedBox| AxisAlignedBox::new(Point::from(x.min.coords * k), Point::from(x.max.coords * k));
            let (ak, bk) = (s(&a), s(&b));
            prop_assert!((center_distance(&ak, &bk) - k * center_distance(&a, &b)).abs() < 1e-9);
            prop_assert!((iou(&ak, &bk) - iou(&a, &b)).abs() < 1e-9);
            prop_assert!((esf(&ak, &bk) - esf(&a, &b)).abs() < 1e-9 * esf(&a, &b));
        }

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&iou(&a, &b)));
            prop_assert_eq!(center_distance(&a, &b), center_distance(&b, &a));
        }

        #[test]
        fn esf_is_one_on_containment_and_contains_after_scaling(a in arb_box(), b in arb_box()) {
            let outer = AxisAlignedBox::new(
                Point::from(a.min.coords.inf(&b.min.coords)),
                Point::from(a.max.coords.sup(&b.max.coords)),
            );
            prop_assert_eq!(esf(&outer, &a), 1.0);
            let s = esf(&a, &b);
            prop_assert!(s >= 1.0);
            prop_assert!(a.scaled(s * (1.0 + 1e-12)).contains_box(&b));
        }
    }
}
