//! Reference-point selection along a stroke.
//!
//! The dynamic strategy walks the stroke by cumulative arc length, keeping a
//! point whenever it lies at least `tau` past the last kept point, then forces
//! in the end point and the point nearest the stroke centroid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ink::{Point, Stroke};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Dynamic,
    /// Exactly `n` points (or all of them for shorter strokes).
    Fixed(usize),
    /// Every trajectory point.
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub tau: f64,
    pub strategy: Strategy,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            tau: 0.075,
            strategy: Strategy::Dynamic,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("tau must be positive and finite, got {0}")]
    BadTau(f64),
    #[error("fixed strategy needs at least one point")]
    ZeroFixed,
    #[error("stroke has no points")]
    EmptyStroke,
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(SelectionError::BadTau(self.tau));
        }
        if self.strategy == Strategy::Fixed(0) {
            return Err(SelectionError::ZeroFixed);
        }
        Ok(())
    }
}

/// Strictly increasing indices into a stroke's points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceSelection {
    pub indices: Vec<usize>,
}

impl ReferenceSelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn points(&self, stroke: &Stroke) -> Vec<Point> {
        self.indices.iter().map(|&i| stroke.points[i]).collect()
    }
}

/// Distances between consecutive points; `k - 1` entries.
pub fn segment_distances(points: &[Point]) -> Vec<f64> {
    points.windows(2).map(|w| w[0].dist(&w[1])).collect()
}

/// Arc length from the first point to each point; `k` entries starting at 0.
pub fn cumulative_lengths(points: &[Point]) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    if !points.is_empty() {
        out.push(0.0);
    }
    for d in segment_distances(points) {
        acc += d;
        out.push(acc);
    }
    out
}

pub fn stroke_centroid(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
    Point::new(sx / n, sy / n)
}

/// Index of the point nearest the centroid; ties go to the lowest index.
pub fn centroid_closest(points: &[Point]) -> usize {
    let c = stroke_centroid(points);
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = p.dist_sq(&c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

fn insert_sorted(indices: &mut Vec<usize>, i: usize) {
    if let Err(pos) = indices.binary_search(&i) {
        indices.insert(pos, i);
    }
}

fn select_dynamic(points: &[Point], tau: f64) -> Vec<usize> {
    let lengths = cumulative_lengths(points);
    let mut indices = vec![0];
    let mut last = 0;
    for i in 1..points.len() {
        if lengths[i] - lengths[last] >= tau {
            indices.push(i);
            last = i;
        }
    }
    insert_sorted(&mut indices, points.len() - 1);
    insert_sorted(&mut indices, centroid_closest(points));
    indices
}

/// Index whose arc length is nearest `target`; ties go to the lowest index.
fn nearest_by_length(lengths: &[f64], target: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &l) in lengths.iter().enumerate() {
        let d = (l - target).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

fn select_fixed(points: &[Point], n: usize) -> Vec<usize> {
    let k = points.len();
    let m = n.min(k);
    if m == k {
        return (0..k).collect();
    }
    let lengths = cumulative_lengths(points);
    let total = lengths[k - 1];
    if m == 1 {
        return vec![nearest_by_length(&lengths, 0.5 * total)];
    }
    let mut indices = Vec::with_capacity(m);
    for j in 0..m {
        let target = total * j as f64 / (m - 1) as f64;
        let i = match j {
            0 => 0,
            _ if j == m - 1 => k - 1,
            _ => nearest_by_length(&lengths, target),
        };
        insert_sorted(&mut indices, i);
    }
    // Quantiles that collapsed onto the same index are refilled with the
    // unused index farthest (in arc length) from the chosen set.
    while indices.len() < m {
        let mut best = None;
        let mut best_gap = f64::NEG_INFINITY;
        for i in 0..k {
            if indices.binary_search(&i).is_ok() {
                continue;
            }
            let gap = indices
                .iter()
                .map(|&j| (lengths[i] - lengths[j]).abs())
                .fold(f64::INFINITY, f64::min);
            if gap > best_gap {
                best_gap = gap;
                best = Some(i);
            }
        }
        insert_sorted(&mut indices, best.expect("fewer chosen than points"));
    }
    indices
}

pub fn select_reference_points(
    stroke: &Stroke,
    cfg: &SelectionConfig,
) -> Result<ReferenceSelection, SelectionError> {
    cfg.validate()?;
    let points = &stroke.points;
    if points.is_empty() {
        return Err(SelectionError::EmptyStroke);
    }
    let indices = match cfg.strategy {
        Strategy::Dynamic => select_dynamic(points, cfg.tau),
        Strategy::Fixed(n) => select_fixed(points, n),
        Strategy::Total => (0..points.len()).collect(),
    };
    Ok(ReferenceSelection { indices })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stroke(pts: &[(f64, f64)]) -> Stroke {
        Stroke::new(pts.iter().map(|&(x, y)| Point::new(x, y)).collect(), None)
    }

    #[test]
    fn distances_and_lengths() {
        assert_eq!(
            segment_distances(&stroke(&[(0.0, 0.0), (3.0, 4.0)]).points),
            vec![5.0]
        );
        assert_eq!(
            segment_distances(&stroke(&[(0.0, 0.0), (0.0, 0.0)]).points),
            vec![0.0]
        );
        assert_eq!(
            segment_distances(&stroke(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]).points),
            vec![1.0, 1.0]
        );
        assert!(segment_distances(&stroke(&[(2.0, 2.0)]).points).is_empty());
        assert_eq!(
            cumulative_lengths(&stroke(&[(0.0, 0.0), (3.0, 4.0), (3.0, 4.0)]).points),
            vec![0.0, 5.0, 5.0]
        );
        assert_eq!(cumulative_lengths(&stroke(&[(1.0, 1.0)]).points), vec![0.0]);
        assert_eq!(
            cumulative_lengths(&stroke(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]).points),
            vec![0.0, 1.0, 2.0]
        );
    }

    #[test]
    fn centroids() {
        assert_eq!(
            stroke_centroid(&stroke(&[(0.0, 0.0), (2.0, 0.0)]).points),
            Point::new(1.0, 0.0)
        );
        assert_eq!(
            stroke_centroid(&stroke(&[(0.3, -0.7)]).points),
            Point::new(0.3, -0.7)
        );
        assert_eq!(
            stroke_centroid(&stroke(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]).points),
            Point::new(0.5, 0.5)
        );
    }

    #[test]
    fn dynamic_collinear() {
        let s = stroke(&[
            (0.0, 0.0),
            (0.05, 0.0),
            (0.10, 0.0),
            (0.15, 0.0),
            (0.20, 0.0),
        ]);
        let sel = select_reference_points(&s, &SelectionConfig::default()).unwrap();
        assert_eq!(sel.indices, vec![0, 2, 4]);
    }

    #[test]
    fn dynamic_two_points_and_single() {
        let cfg = SelectionConfig::default();
        let s = stroke(&[(0.0, 0.0), (0.01, 0.0)]);
        assert_eq!(
            select_reference_points(&s, &cfg).unwrap().indices,
            vec![0, 1]
        );
        let s = stroke(&[(0.5, 0.5)]);
        assert_eq!(select_reference_points(&s, &cfg).unwrap().indices, vec![0]);
    }

    #[test]
    fn centroid_tie_goes_low() {
        // Points 1 and 2 are equidistant from the centroid (0.5, 0).
        let s = stroke(&[(-1.0, 0.0), (0.25, 0.0), (0.75, 0.0), (2.0, 0.0)]);
        assert_eq!(centroid_closest(&s.points), 1);
    }

    #[test]
    fn total_and_fixed() {
        let pts: Vec<(f64, f64)> = (0..11).map(|i| (i as f64 * 0.1, 0.0)).collect();
        let s = stroke(&pts);
        let total = SelectionConfig {
            strategy: Strategy::Total,
            ..Default::default()
        };
        assert_eq!(
            select_reference_points(&s, &total).unwrap().indices,
            (0..11).collect::<Vec<_>>()
        );
        let fixed = |n| SelectionConfig {
            strategy: Strategy::Fixed(n),
            ..Default::default()
        };
        assert_eq!(
            select_reference_points(&s, &fixed(1)).unwrap().indices,
            vec![5]
        );
        assert_eq!(
            select_reference_points(&s, &fixed(3)).unwrap().indices,
            vec![0, 5, 10]
        );
        let nine = stroke(&pts[..9]);
        assert_eq!(
            select_reference_points(&nine, &fixed(5)).unwrap().indices,
            vec![0, 2, 4, 6, 8]
        );
        let short = stroke(&[(0.0, 0.0), (1.0, 0.0)]);
        assert_eq!(
            select_reference_points(&short, &fixed(7)).unwrap().indices,
            vec![0, 1]
        );
    }

    #[test]
    fn fixed_count_exact_with_collapsed_quantiles() {
        // Most of the length sits in one segment, so interior quantiles collide.
        let s = stroke(&[
            (0.0, 0.0),
            (0.001, 0.0),
            (0.002, 0.0),
            (0.003, 0.0),
            (1.0, 0.0),
            (1.001, 0.0),
        ]);
        for n in [3, 5] {
            let cfg = SelectionConfig {
                strategy: Strategy::Fixed(n),
                ..Default::default()
            };
            let sel = select_reference_points(&s, &cfg).unwrap();
            assert_eq!(sel.len(), n);
            assert!(sel.indices.windows(2).all(|w| w[0] < w[1]));
            assert_eq!((sel.indices[0], *sel.indices.last().unwrap()), (0, 5));
        }
    }

    #[test]
    fn errors() {
        let s = stroke(&[(0.0, 0.0)]);
        let bad = SelectionConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert_eq!(
            select_reference_points(&s, &bad),
            Err(SelectionError::BadTau(0.0))
        );
        assert_eq!(
            select_reference_points(&Stroke::new(vec![], None), &SelectionConfig::default()),
            Err(SelectionError::EmptyStroke)
        );
    }

    mod props {
        use super::*;
        use crate::ref_select::Strategy;
        use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
        use proptest::strategy::Strategy as _;

        fn arb_stroke() -> impl proptest::strategy::Strategy<Value = Stroke> {
            prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..40).prop_map(|v| stroke(&v))
        }

        proptest! {
            #[test]
            fn dynamic_invariants(s in arb_stroke(), tau in 0.01f64..0.5) {
                let cfg = SelectionConfig { tau, strategy: Strategy::Dynamic };
                let sel = select_reference_points(&s, &cfg).unwrap();
                let k = s.len();
                prop_assert!(sel.indices.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(sel.len() <= k);
                prop_assert!(sel.indices.contains(&0));
                prop_assert!(sel.indices.contains(&(k - 1)));
                prop_assert!(sel.indices.contains(&centroid_closest(&s.points)));
            }

            #[test]
            fn every_strategy_bounded(s in arb_stroke(), n in 1usize..9) {
                for strategy in [Strategy::Fixed(n), Strategy::Total, Strategy::Dynamic] {
                    let sel = select_reference_points(&s, &SelectionConfig { tau: 0.075, strategy }).unwrap();
                    prop_assert!(!sel.is_empty() && sel.len() <= s.len());
                    prop_assert!(sel.indices.windows(2).all(|w| w[0] < w[1]));
                    if let Strategy::Fixed(n) = strategy {
                        prop_assert_eq!(sel.len(), n.min(s.len()));
                    }
                }
            }
        }
    }
}
