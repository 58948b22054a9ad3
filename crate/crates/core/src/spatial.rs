//! Farthest point sampling and the cross-ellipse neighborhood query.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ink::Point;

#[derive(Debug, Error, PartialEq)]
pub enum SpatialError {
    #[error("cannot sample {requested} of {available} points")]
    SampleCount { requested: usize, available: usize },
    #[error("seed index {seed} out of range for {available} points")]
    SeedIndex { seed: usize, available: usize },
    #[error("centroid index {index} out of range for {available} points")]
    CentroidIndex { index: usize, available: usize },
    #[error("group capacity must be at least 1")]
    ZeroCapacity,
    #[error("ellipse needs a positive radius and ratio, got r = {radius}, {w}:{h}")]
    BadEllipse { radius: f64, w: u32, h: u32 },
}

/// Width-to-height ratio of a query ellipse; `w` runs along x.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AxisRatio {
    pub w: u32,
    pub h: u32,
}

impl AxisRatio {
    pub const fn new(w: u32, h: u32) -> Self {
        Self { w, h }
    }

    /// The 1:5, 2:2 and 5:1 branches.
    pub const DEFAULT: [AxisRatio; 3] = [
        AxisRatio::new(1, 5),
        AxisRatio::new(2, 2),
        AxisRatio::new(5, 1),
    ];
    pub const BALL: AxisRatio = AxisRatio::new(2, 2);
}

/// Axis-aligned ellipse with the same area as a circle of radius `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseSpec {
    pub radius: f64,
    pub ratio: AxisRatio,
    /// Semi-axis along x.
    pub a: f64,
    /// Semi-axis along y.
    pub b: f64,
}

impl EllipseSpec {
    pub fn new(radius: f64, ratio: AxisRatio) -> Result<Self, SpatialError> {
        if !(radius > 0.0 && radius.is_finite()) || ratio.w == 0 || ratio.h == 0 {
            return Err(SpatialError::BadEllipse {
                radius,
                w: ratio.w,
                h: ratio.h,
            });
        }
        let (w, h) = (ratio.w as f64, ratio.h as f64);
        let (a, b) = if ratio.w == ratio.h {
            (radius, radius)
        } else {
            (radius * (w / h).sqrt(), radius * (h / w).sqrt())
        };
        Ok(Self {
            radius,
            ratio,
            a,
            b,
        })
    }
}

pub fn ellipse_contains(center: &Point, spec: &EllipseSpec, p: &Point) -> bool {
    let dx = (p.x - center.x) / spec.a;
    let dy = (p.y - center.y) / spec.b;
    dx * dx + dy * dy <= 1.0
}

/// Greedy max-min subset of `n` indices starting at `seed`. Ties go to the
/// lowest index.
pub fn farthest_point_sampling(
    points: &[Point],
    n: usize,
    seed: usize,
) -> Result<Vec<usize>, SpatialError> {
    let total = points.len();
    if n == 0 || n > total {
        return Err(SpatialError::SampleCount {
            requested: n,
            available: total,
        });
    }
    if seed >= total {
        return Err(SpatialError::SeedIndex {
            seed,
            available: total,
        });
    }
    let mut chosen = Vec::with_capacity(n);
    let mut taken = vec![false; total];
    let mut min_d = vec![f64::INFINITY; total];
    let mut current = seed;
    loop {
        chosen.push(current);
        taken[current] = true;
        if chosen.len() == n {
            break;
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = p.dist_sq(&c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(chosen)
}

/// Neighbor lists of one ratio branch: `capacity` slots per centroid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchGroups {
    pub ratio: AxisRatio,
    /// Flat `(centroids x capacity)` point indices, padded by repeating the
    /// first member.
    pub members: Vec<usize>,
    /// True member count per centroid, always at least 1.
    pub fill: Vec<usize>,
}

impl BranchGroups {
    pub fn group(&self, centroid: usize, capacity: usize) -> &[usize] {
        &self.members[centroid * capacity..(centroid + 1) * capacity]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupIndex {
    /// Indices of the centroids into the queried point set.
    pub centroids: Vec<usize>,
    pub capacity: usize,
    pub branches: Vec<BranchGroups>,
}

/// For every centroid and ratio: the centroid itself, then each other point
/// inside the ellipse in index order, up to `capacity`.
pub fn cross_ellipse_query(
    points: &[Point],
    centroids: &[usize],
    radius: f64,
    ratios: &[AxisRatio],
    capacity: usize,
) -> Result<GroupIndex, SpatialError> {
    if capacity == 0 {
        return Err(SpatialError::ZeroCapacity);
    }
    if let Some(&index) = centroids.iter().find(|&&c| c >= points.len()) {
        return Err(SpatialError::CentroidIndex {
            index,
            available: points.len(),
        });
    }
    let mut branches = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let spec = EllipseSpec::new(radius, ratio)?;
        let mut members = Vec::with_capacity(centroids.len() * capacity);
        let mut fill = Vec::with_capacity(centroids.len());
        for &c in centroids {
            let center = points[c];
            let start = members.len();
            members.push(c);
            for (i, p) in points.iter().enumerate() {
                if members.len() - start == capacity {
                    break;
                }
                if i != c && ellipse_contains(&center, &spec, p) {
                    members.push(i);
                }
            }
            let count = members.len() - start;
            fill.push(count);
            members.resize(start + capacity, c);
        }
        branches.push(BranchGroups {
            ratio,
            members,
            fill,
        });
    }
    Ok(GroupIndex {
        centroids: centroids.to_vec(),
        capacity,
        branches,
    })
}
