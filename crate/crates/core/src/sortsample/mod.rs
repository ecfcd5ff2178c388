//! Occupancy and signed-distance training targets.
//!
//! Both variants draw points uniformly inside a structure's 50%-enlarged
//! bounding box, one at a time, until each side holds at least `N` points,
//! then keep the `N` nearest to the surface per side. The original variant
//! only accepts outside points in free space, so a structure wrapped by
//! other structures never fills its outside set. The revised variant
//! accepts any point outside the sampled structure and labels it by the
//! structure it falls in.

mod distance;
mod io;
mod pair;

pub use distance::DistanceField;
pub use io::{read_pair, read_samples, write_pair, write_samples, PairHeader, SampleHeader};
pub use pair::{build_training_pair, PairParams, TrainingPair};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::volume::{AxisAlignedBox, Label, VoxelLabelVolume};
use crate::{Error, Point, Result, Vec3};

pub const ENLARGE_FACTOR: f64 = 1.5;
/// Window margin, in voxels, around the enlarged box for the distance field.
const FIELD_MARGIN: i64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancySample {
    pub position: Point,
    pub label: Label,
    /// Distance to the sampled structure's surface, negative inside it.
    pub signed_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureSamples {
    pub class_id: Label,
    pub inside: Vec<OccupancySample>,
    pub outside: Vec<OccupancySample>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OccupancySampleSet {
    pub n: usize,
    pub structures: Vec<StructureSamples>,
}

impl OccupancySampleSet {
    pub fn len(&self) -> usize {
        self.structures.iter().map(|s| s.inside.len() + s.outside.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All samples, structure by structure, inside before outside.
    pub fn iter(&self) -> impl Iterator<Item = &OccupancySample> {
        self.structures.iter().flat_map(|s| s.inside.iter().chain(s.outside.iter()))
    }

    pub fn map_positions(&mut self, f: impl Fn(&Point) -> Point) {
        for s in &mut self.structures {
            for x in s.inside.iter_mut().chain(s.outside.iter_mut()) {
                x.position = f(&x.position);
            }
        }
    }
}

/// Outcome of the original algorithm when the draw budget runs out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NonTermination {
    pub class_id: Label,
    pub draws: usize,
    pub inside: usize,
    pub outside: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OriginalOutcome {
    Complete(StructureSamples),
    NonTermination(NonTermination),
}

/// Per-structure sampler holding the enlarged box and the distance field.
pub struct StructureSampler<'a> {
    volume: &'a VoxelLabelVolume,
    class_id: Label,
    region: AxisAlignedBox,
    field: DistanceField,
}

/// A finished run plus the distances of every outside point that lost the
/// sort, for checking the truncation.
#[derive(Clone, Debug)]
pub struct TracedRun {
    pub samples: StructureSamples,
    pub discarded_inside: Vec<f64>,
    pub discarded_outside: Vec<f64>,
    pub draws: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Variant {
    Original,
    Revised,
}

impl<'a> StructureSampler<'a> {
    pub fn new(volume: &'a VoxelLabelVolume, class_id: Label) -> Result<Self> {
        let b = volume.aabb_of_class(class_id).ok_or(Error::ClassAbsent(class_id))?;
        let region = b.scaled(ENLARGE_FACTOR);
        let field = DistanceField::build(volume, class_id, &region, FIELD_MARGIN);
        Ok(Self { volume, class_id, region, field })
    }

    pub fn region(&self) -> &AxisAlignedBox {
        &self.region
    }

    pub fn field(&self) -> &DistanceField {
        &self.field
    }

    fn draw(&self, rng: &mut impl Rng) -> Point {
        let (lo, ext) = (self.region.min, self.region.extent());
        lo + Vec3::new(rng.random::<f64>() * ext.x, rng.random::<f64>() * ext.y, rng.random::<f64>() * ext.z)
    }

    fn run(&self, n: usize, rng: &mut impl Rng, max_draws: usize, variant: Variant) -> (TracedRun, bool) {
        let mut inside = Vec::new();
        let mut outside = Vec::new();
        let mut draws = 0;
        while inside.len().min(outside.len()) < n && draws < max_draws {
            let p = self.draw(rng);
            draws += 1;
            let label = self.volume.label_at(&p);
            if label == self.class_id {
                inside.push(OccupancySample { position: p, label, signed_distance: self.field.signed(&p, true) });
            } else if label == 0 || variant == Variant::Revised {
                outside.push(OccupancySample { position: p, label, signed_distance: self.field.signed(&p, false) });
            }
        }
        let complete = inside.len().min(outside.len()) >= n;
        let (inside, discarded_inside) = keep_nearest(inside, n);
        let (outside, discarded_outside) = keep_nearest(outside, n);
        let samples = StructureSamples { class_id: self.class_id, inside, outside };
        (TracedRun { samples, discarded_inside, discarded_outside, draws }, complete)
    }

    pub fn original(&self, n: usize, rng: &mut impl Rng, max_draws: usize) -> OriginalOutcome {
        let (run, complete) = self.run(n, rng, max_draws, Variant::Original);
        if complete {
            OriginalOutcome::Complete(run.samples)
        } else {
            OriginalOutcome::NonTermination(NonTermination {
                class_id: self.class_id,
                draws: run.draws,
                inside: run.samples.inside.len() + run.discarded_inside.len(),
                outside: run.samples.outside.len() + run.discarded_outside.len(),
            })
        }
    }

    /// Revised run that also reports what was sorted away.
    pub fn revised_traced(&self, n: usize, rng: &mut impl Rng) -> TracedRun {
        // a structure with any voxel has an outside region inside its
        // enlarged box, so both sides fill with probability one
        self.run(n, rng, usize::MAX, Variant::Revised).0
    }

    pub fn revised(&self, n: usize, rng: &mut impl Rng) -> StructureSamples {
        self.revised_traced(n, rng).samples
    }
}

/// Sorts by distance to the surface and splits into kept and the
/// distances of the discarded rest.
fn keep_nearest(mut v: Vec<OccupancySample>, n: usize) -> (Vec<OccupancySample>, Vec<f64>) {
    v.sort_by(|a, b| a.signed_distance.abs().total_cmp(&b.signed_distance.abs()));
    let rest = v.split_off(n.min(v.len()));
    (v, rest.iter().map(|s| s.signed_distance.abs()).collect())
}

pub fn sort_sample_original(
    v: &VoxelLabelVolume,
    class_id: Label,
    n: usize,
    rng: &mut impl Rng,
    max_draws: usize,
) -> Result<OriginalOutcome> {
    Ok(StructureSampler::new(v, class_id)?.original(n, rng, max_draws))
}

pub fn sort_sample_revised(v: &VoxelLabelVolume, class_id: Label, n: usize, rng: &mut impl Rng) -> Result<StructureSamples> {
    Ok(StructureSampler::new(v, class_id)?.revised(n, rng))
}

/// Revised samples for every present class in label order.
pub fn sample_all_structures(v: &VoxelLabelVolume, n: usize, rng: &mut impl Rng) -> OccupancySampleSet {
    let hist = v.histogram();
    let structures = (1..hist.len())
        .filter(|&c| hist[c] > 0)
        .map(|c| sort_sample_revised(v, c as Label, n, rng).expect("class is present"))
        .collect();
    OccupancySampleSet { n, structures }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, embedded_structures, Packing, PhantomSpec, PrimitiveKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn isolated() -> VoxelLabelVolume {
        let spec = PhantomSpec {
            num_structures: 1,
            packing: Packing::Separated,
            primitives: vec![PrimitiveKind::Ellipsoid],
            ..PhantomSpec::default()
        };
        generate_phantom(&spec).unwrap()
    }

    fn touching() -> VoxelLabelVolume {
        generate_phantom(&PhantomSpec { seed: 2, ..PhantomSpec::default() }).unwrap()
    }

    fn check_labels(v: &VoxelLabelVolume, s: &StructureSamples) {
        for x in &s.inside {
            assert_eq!(v.label_at(&x.position), s.class_id);
            assert_eq!(x.label, s.class_id);
            assert!(x.signed_distance <= 0.0);
        }
        for x in &s.outside {
            assert_eq!(v.label_at(&x.position), x.label);
            assert_ne!(x.label, s.class_id);
            assert!(x.signed_distance >= 0.0);
        }
    }

    #[test]
    fn original_on_isolated_structure() {
        let v = isolated();
        let out = sort_sample_original(&v, 1, 32, &mut ChaCha8Rng::seed_from_u64(1), 1_000_000).unwrap();
        let OriginalOutcome::Complete(s) = out else { panic!("should terminate") };
        assert_eq!((s.inside.len(), s.outside.len()), (32, 32));
        assert!(s.outside.iter().all(|x| x.label == 0));
        check_labels(&v, &s);
    }

    #[test]
    fn original_never_fills_outside_of_embedded_structure() {
        let v = touching();
        let c = embedded_structures(&v)[0];
        match sort_sample_original(&v, c, 32, &mut ChaCha8Rng::seed_from_u64(1), 1_000_000).unwrap() {
            OriginalOutcome::NonTermination(nt) => {
                assert_eq!(nt.outside, 0);
                assert_eq!(nt.draws, 1_000_000);
            }
            OriginalOutcome::Complete(_) => panic!("embedded structure cannot terminate"),
        }
    }

    #[test]
    fn zero_samples_terminate_immediately() {
        let v = touching();
        let OriginalOutcome::Complete(s) = sort_sample_original(&v, 1, 0, &mut ChaCha8Rng::seed_from_u64(1), 10).unwrap()
        else {
            panic!()
        };
        assert!(s.inside.is_empty() && s.outside.is_empty());
        assert!(sort_sample_revised(&v, 1, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().inside.is_empty());
    }

    #[test]
    fn revised_terminates_on_embedded_structure() {
        let v = touching();
        for c in embedded_structures(&v) {
            let s = sort_sample_revised(&v, c, 32, &mut ChaCha8Rng::seed_from_u64(c as u64)).unwrap();
            assert_eq!((s.inside.len(), s.outside.len()), (32, 32));
            check_labels(&v, &s);
            assert!(s.outside.iter().all(|x| x.label != 0));
        }
    }

    #[test]
    fn revised_matches_original_when_isolated() {
        let v = isolated();
        let a = sort_sample_revised(&v, 1, 32, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let OriginalOutcome::Complete(b) = sort_sample_original(&v, 1, 32, &mut ChaCha8Rng::seed_from_u64(8), usize::MAX).unwrap()
        else {
            panic!()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn one_voxel_structure() {
        let mut v = VoxelLabelVolume::empty([5, 5, 5], 0.1, Point::origin(), vec!["dot".into()]).unwrap();
        v.set(2, 2, 2, 1);
        let s = sort_sample_revised(&v, 1, 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let voxel = v.voxel_box(2, 2, 2);
        assert!(voxel.contains_point(&s.inside[0].position));
        let d = crate::volume::point_box_distance(&s.outside[0].position, &voxel);
        assert!(d <= v.spacing());
        assert!(matches!(sort_sample_revised(&v, 2, 1, &mut ChaCha8Rng::seed_from_u64(3)), Err(Error::ClassAbsent(2))));
    }

    #[test]
    fn kept_outside_points_are_nearest() {
        let v = touching();
        let sampler = StructureSampler::new(&v, 2).unwrap();
        for seed in 0..5 {
            let run = sampler.revised_traced(32, &mut ChaCha8Rng::seed_from_u64(seed));
            let kept = run.samples.outside.iter().map(|x| x.signed_distance).fold(0.0, f64::max);
            assert!(run.discarded_outside.iter().all(|&d| d >= kept));
            let kept_in = run.samples.inside.iter().map(|x| -x.signed_distance).fold(0.0, f64::max);
            assert!(run.discarded_inside.iter().all(|&d| d >= kept_in));
        }
    }

    #[test]
    fn distances_follow_oracle() {
        let v = touching();
        let s = sort_sample_revised(&v, 1, 32, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        for x in s.inside.iter().chain(&s.outside) {
            let o = v.signed_distance_oracle(&x.position, 1).unwrap();
            assert_eq!(o < 0.0, x.signed_distance < 0.0);
            assert!((o - x.signed_distance).abs() <= v.spacing());
        }
    }

    #[test]
    fn near_surface_density_is_balanced() {
        let v = touching();
        let c = embedded_structures(&v)[0];
        let sampler = StructureSampler::new(&v, c).unwrap();
        let shell = v.spacing();
        let (mut n_in, mut n_out) = (0usize, 0usize);
        for seed in 0..200 {
            let s = sampler.revised(32, &mut ChaCha8Rng::seed_from_u64(seed));
            n_in += s.inside.iter().filter(|x| x.signed_distance >= -shell).count();
            n_out += s.outside.iter().filter(|x| x.signed_distance <= shell).count();
        }
        // shell volumes on both sides from a fine probe lattice over the box
        let (mut vol_in, mut vol_out) = (0usize, 0usize);
        let b = *sampler.region();
        let steps = 60;
        for k in 0..steps {
            for j in 0..steps {
                for i in 0..steps {
                    let t = Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) / steps as f64;
                    let p = b.min + b.extent().component_mul(&t);
                    let o = sampler.field().signed(&p, v.label_at(&p) == c);
                    if (-shell..0.0).contains(&o) {
                        vol_in += 1;
                    } else if (0.0..=shell).contains(&o) {
                        vol_out += 1;
                    }
                }
            }
        }
        let density_in = n_in as f64 / vol_in as f64;
        let density_out = n_out as f64 / vol_out as f64;
        let ratio = density_in / density_out;
        assert!((0.5..=2.0).contains(&ratio), "inside {density_in} outside {density_out}");
    }
}
