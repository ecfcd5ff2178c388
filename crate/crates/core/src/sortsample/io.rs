use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OccupancySample, OccupancySampleSet, StructureSamples};
use crate::format::{read_with_header, write_with_header};
use crate::sensor::{CameraPose, SensorPointCloud};
use crate::volume::Label;
use crate::{Error, Point, Result};

/// Bytes per sample record: position (3 × f64), label (u16), distance (f64).
const RECORD: usize = 3 * 8 + 2 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleHeader {
    pub format: String,
    pub version: u32,
    pub n: usize,
    pub num_classes: usize,
    pub seed: Option<u64>,
    /// Sampled structures in record order; each contributes `n` inside
    /// records followed by `n` outside records.
    pub class_ids: Vec<Label>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairHeader {
    pub format: String,
    pub version: u32,
    pub n: usize,
    pub num_classes: usize,
    pub seed: Option<u64>,
    pub class_ids: Vec<Label>,
    pub num_points: usize,
    pub pose: Option<CameraPose>,
}

fn encode_samples(set: &OccupancySampleSet, out: &mut Vec<u8>) {
    for s in set.iter() {
        for c in s.position.coords.iter() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&s.label.to_le_bytes());
        out.extend_from_slice(&s.signed_distance.to_le_bytes());
    }
}

fn f64_at(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn decode_samples(path: &Path, bytes: &[u8], n: usize, class_ids: &[Label]) -> Result<OccupancySampleSet> {
    let expected = class_ids.len() * 2 * n * RECORD;
    if bytes.len() != expected {
        return Err(Error::format(path, format!("expected {expected} sample bytes, got {}", bytes.len())));
    }
    let mut records = bytes.chunks_exact(RECORD).map(|r| OccupancySample {
        position: Point::new(f64_at(r, 0), f64_at(r, 8), f64_at(r, 16)),
        label: u16::from_le_bytes([r[24], r[25]]),
        signed_distance: f64_at(r, 26),
    });
    let structures = class_ids
        .iter()
        .map(|&class_id| StructureSamples {
            class_id,
            inside: records.by_ref().take(n).collect(),
            outside: records.by_ref().take(n).collect(),
        })
        .collect();
    Ok(OccupancySampleSet { n, structures })
}

fn check_uniform(set: &OccupancySampleSet) -> Result<()> {
    if set.structures.iter().any(|s| s.inside.len() != set.n || s.outside.len() != set.n) {
        return Err(Error::InvalidInput("every structure needs exactly n samples per side to be stored".into()));
    }
    Ok(())
}

pub fn write_samples(path: &Path, set: &OccupancySampleSet, num_classes: usize, seed: Option<u64>) -> Result<()> {
    check_uniform(set)?;
    let header = SampleHeader {
        format: "samples".into(),
        version: 1,
        n: set.n,
        num_classes,
        seed,
        class_ids: set.structures.iter().map(|s| s.class_id).collect(),
    };
    let mut payload = Vec::with_capacity(set.len() * RECORD);
    encode_samples(set, &mut payload);
    write_with_header(path, &header, &payload)
}

pub fn read_samples(path: &Path) -> Result<(SampleHeader, OccupancySampleSet)> {
    let (header, payload): (SampleHeader, _) = read_with_header(path)?;
    if header.format != "samples" {
        return Err(Error::format(path, format!("not a sample file (format {:?})", header.format)));
    }
    let set = decode_samples(path, &payload, header.n, &header.class_ids)?;
    Ok((header, set))
}

/// Pair file: header, the cloud as raw f64 triples, then sample records.
pub fn write_pair(
    path: &Path,
    cloud: &SensorPointCloud,
    set: &OccupancySampleSet,
    num_classes: usize,
    seed: Option<u64>,
) -> Result<()> {
    check_uniform(set)?;
    let header = PairHeader {
        format: "pair".into(),
        version: 1,
        n: set.n,
        num_classes,
        seed,
        class_ids: set.structures.iter().map(|s| s.class_id).collect(),
        num_points: cloud.len(),
        pose: cloud.pose,
    };
    let mut payload = Vec::with_capacity(cloud.len() * 24 + set.len() * RECORD);
    for p in &cloud.points {
        for c in p.coords.iter() {
            payload.extend_from_slice(&c.to_le_bytes());
        }
    }
    encode_samples(set, &mut payload);
    write_with_header(path, &header, &payload)
}

pub fn read_pair(path: &Path) -> Result<(PairHeader, SensorPointCloud, OccupancySampleSet)> {
    let (header, payload): (PairHeader, _) = read_with_header(path)?;
    if header.format != "pair" {
        return Err(Error::format(path, format!("not a pair file (format {:?})", header.format)));
    }
    let cloud_bytes = header.num_points * 24;
    if payload.len() < cloud_bytes {
        return Err(Error::format(path, "truncated point cloud"));
    }
    let points: Vec<Point> = payload[..cloud_bytes]
        .chunks_exact(24)
        .map(|c| Point::new(f64_at(c, 0), f64_at(c, 8), f64_at(c, 16)))
        .collect();
    if points.iter().any(|p| !p.coords.iter().all(|c| c.is_finite())) {
        return Err(Error::format(path, "non-finite cloud coordinate"));
    }
    let set = decode_samples(path, &payload[cloud_bytes..], header.n, &header.class_ids)?;
    let cloud = SensorPointCloud { points, seed: header.seed, pose: header.pose };
    Ok((header, cloud, set))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> OccupancySampleSet {
        let s = |x: f64, label| OccupancySample { position: Point::new(x, -x, 0.5), label, signed_distance: x - 0.1 };
        OccupancySampleSet {
            n: 2,
            structures: vec![
                StructureSamples { class_id: 1, inside: vec![s(0.0, 1), s(0.05, 1)], outside: vec![s(0.2, 0), s(0.3, 2)] },
                StructureSamples { class_id: 2, inside: vec![s(1.0, 2), s(1.05, 2)], outside: vec![s(1.2, 1), s(1.3, 0)] },
            ],
        }
    }

    #[test]
    fn samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        write_samples(&path, &set(), 2, Some(4)).unwrap();
        let (h, back) = read_samples(&path).unwrap();
        assert_eq!(h.seed, Some(4));
        assert_eq!(back, set());
    }

    #[test]
    fn pair_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pair");
        let cloud = SensorPointCloud::new(vec![Point::new(0.1, 0.2, 2.0), Point::new(-0.1, 0.0, 2.2)]);
        write_pair(&path, &cloud, &set(), 2, Some(9)).unwrap();
        let (h, c, s) = read_pair(&path).unwrap();
        assert_eq!(h.num_points, 2);
        assert_eq!(c.points, cloud.points);
        assert_eq!(s, set());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_pair(&path), Err(Error::Format { .. })));
    }
}
