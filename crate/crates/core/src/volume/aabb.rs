use serde::{Deserialize, Serialize};

use crate::{Point, Vec3};

/// Axis-aligned box in meters. `min <= max` componentwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisAlignedBox {
    pub min: Point,
    pub max: Point,
}

impl AxisAlignedBox {
    /// Builds a box from two corners, sorting each axis.
    pub fn new(a: Point, b: Point) -> Self {
        Self {
            min: Point::new(a.x.min(b.x), a.y.min(b.y), a.z.min(b.z)),
            max: Point::new(a.x.max(b.x), a.y.max(b.y), a.z.max(b.z)),
        }
    }

    /// Tight box over a point set; `None` when the set is empty.
    pub fn from_points<'a, I>(points: I) -> Option<Self>
    where
        I: IntoIterator<Item = &'a Point>,
    {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut b = Self { min: first, max: first };
        for p in it {
            b.include(p);
        }
        Some(b)
    }

    pub fn include(&mut self, p: &Point) {
        for k in 0..3 {
            self.min[k] = self.min[k].min(p[k]);
            self.max[k] = self.max[k].max(p[k]);
        }
    }

    pub fn center(&self) -> Point {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn contains_point(&self, p: &Point) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn contains_box(&self, other: &AxisAlignedBox) -> bool {
        self.contains_point(&other.min) && self.contains_point(&other.max)
    }

    pub fn intersection(&self, other: &AxisAlignedBox) -> Option<AxisAlignedBox> {
        let min = Point::new(
            self.min.x.max(other.min.x),
            self.min.y.max(other.min.y),
            self.min.z.max(other.min.z),
        );
        let max = Point::new(
            self.max.x.min(other.max.x),
            self.max.y.min(other.max.y),
            self.max.z.min(other.max.z),
        );
        if (0..3).all(|k| min[k] <= max[k]) {
            Some(AxisAlignedBox { min, max })
        } else {
            None
        }
    }

    /// Scales every extent by `factor` about the center.
    pub fn scaled(&self, factor: f64) -> AxisAlignedBox {
        let c = self.center();
        let h = self.extent() * (0.5 * factor);
        AxisAlignedBox { min: c - h, max: c + h }
    }

    /// The eight corners, x fastest.
    pub fn corners(&self) -> [Point; 8] {
        std::array::from_fn(|i| {
            Point::new(
                if i & 1 == 0 { self.min.x } else { self.max.x },
                if i & 2 == 0 { self.min.y } else { self.max.y },
                if i & 4 == 0 { self.min.z } else { self.max.z },
            )
        })
    }

    /// Axis-aligned box around the image of the eight corners under `f`.
    /// Never smaller than the exact image of the box for affine `f`.
    pub fn map_corners(&self, f: impl Fn(&Point) -> Point) -> AxisAlignedBox {
        let mapped = self.corners().map(|c| f(&c));
        AxisAlignedBox::from_points(mapped.iter()).expect("eight corners")
    }

    pub fn translated(&self, t: &Vec3) -> AxisAlignedBox {
        AxisAlignedBox { min: self.min + t, max: self.max + t }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.min.x, self.min.y, self.min.z, self.max.x, self.max.y, self.max.z]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(Point::new(a[0], a[1], a[2]), Point::new(a[3], a[4], a[5]))
    }
}
