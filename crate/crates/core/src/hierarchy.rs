//! Hierarchical encoder-decoder over reference pairs.
//!
//! Each set abstraction level samples centroids by farthest point sampling,
//! groups neighbors with one ellipse query per axis ratio, runs a shared
//! pointwise MLP per ratio over `[member - centroid, member features]`, and
//! max-pools each group. Feature propagation walks back from the coarsest
//! level, interpolating features onto the next finer point set by inverse
//! distance weighting and fusing them with that level's own features.
//!
//! Everything that depends only on coordinates (centroids, groups, neighbor
//! weights) lives in a [`HierarchyPlan`], computed once per document.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ink::Point;
use crate::layers::{init_mlp, mlp, Init};
use crate::spatial::{
    cross_ellipse_query, farthest_point_sampling, AxisRatio, GroupIndex, SpatialError,
};
use crate::tensor::{BoundParams, Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum HierarchyError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error("invalid level configuration: {0}")]
    Config(String),
    #[error("empty point set")]
    NoPoints,
    #[error("plan has {plan} levels, configuration has {config}")]
    PlanMismatch { plan: usize, config: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    /// Target centroid count; clamped to the points available.
    pub n_points: usize,
    pub radius: f64,
    pub ratios: Vec<AxisRatio>,
    /// Group capacity per centroid and ratio.
    pub k_cap: usize,
    /// Widths of the per-ratio pointwise MLP.
    pub mlp_channels: Vec<usize>,
}

impl LevelConfig {
    /// Output width: the last MLP width of every ratio branch, concatenated.
    pub fn out_channels(&self) -> usize {
        self.ratios.len() * self.mlp_channels.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpConfig {
    pub k: usize,
    pub p: f64,
    pub eps: f64,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            k: 3,
            p: 2.0,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    pub levels: Vec<LevelConfig>,
    /// MLP widths of the propagation step landing on each point set, finest
    /// first: entry 0 produces the per-reference-point output.
    pub fp_channels: Vec<Vec<usize>>,
    pub interp: InterpConfig,
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<(), HierarchyError> {
        let bad = |m: String| Err(HierarchyError::Config(m));
        if self.levels.is_empty() {
            return bad("at least one level is required".into());
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.n_points == 0 || l.k_cap == 0 || l.ratios.is_empty() || l.mlp_channels.is_empty() {
                return bad(format!(
                    "level {i} needs points, capacity, ratios and MLP widths"
                ));
            }
            if !(l.radius > 0.0 && l.radius.is_finite()) {
                return bad(format!("level {i} radius {} is not positive", l.radius));
            }
            if l.mlp_channels.contains(&0) {
                return bad(format!("level {i} has a zero MLP width"));
            }
        }
        for (i, w) in self.levels.windows(2).enumerate() {
            if w[1].n_points >= w[0].n_points {
                return bad(format!(
                    "n_points must strictly decrease at level {}",
                    i + 1
                ));
            }
            if w[1].radius <= w[0].radius {
                return bad(format!("radius must strictly increase at level {}", i + 1));
            }
        }
        if self.fp_channels.len() != self.levels.len() {
            return bad(format!(
                "{} propagation steps for {} levels",
                self.fp_channels.len(),
                self.levels.len()
            ));
        }
        if self
            .fp_channels
            .iter()
            .any(|w| w.is_empty() || w.contains(&0))
        {
            return bad("every propagation step needs non-zero MLP widths".into());
        }
        let positive = |v: f64| v > 0.0;
        if self.interp.k == 0 || !positive(self.interp.p) || !positive(self.interp.eps) {
            return bad("interpolation needs k >= 1, p > 0 and eps > 0".into());
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.fp_channels
            .first()
            .and_then(|w| w.last())
            .copied()
            .unwrap_or(0)
    }
}

/// Coordinates and features of one point set.
#[derive(Debug, Clone)]
pub struct LevelState {
    pub coords: Vec<Point>,
    /// `(coords.len(), channels)`.
    pub feats: Var,
}

/// Coordinate-only structure of one set abstraction level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPlan {
    pub groups: GroupIndex,
    /// Centroid coordinates, the next level's point set.
    pub coords: Vec<Point>,
    /// Per ratio branch, member offsets from their centroid, `(centroids * k_cap, 2)`.
    pub offsets: Vec<Tensor>,
}

impl LevelPlan {
    pub fn new(points: &[Point], cfg: &LevelConfig) -> Result<Self, HierarchyError> {
        if points.is_empty() {
            return Err(HierarchyError::NoPoints);
        }
        let n = cfg.n_points.min(points.len());
        let centroids = farthest_point_sampling(points, n, 0)?;
        let groups = cross_ellipse_query(points, &centroids, cfg.radius, &cfg.ratios, cfg.k_cap)?;
        Ok(Self::from_groups(points, groups))
    }

    /// Plan over explicitly given groups.
    pub fn from_groups(points: &[Point], groups: GroupIndex) -> Self {
        let k = groups.capacity;
        let coords: Vec<Point> = groups.centroids.iter().map(|&c| points[c]).collect();
        let offsets = groups
            .branches
            .iter()
            .map(|b| {
                let mut data = Vec::with_capacity(b.members.len() * 2);
                for (slot, &m) in b.members.iter().enumerate() {
                    let c = coords[slot / k];
                    data.push(points[m].x - c.x);
                    data.push(points[m].y - c.y);
                }
                Tensor::new(vec![b.members.len(), 2], data).expect("offset shape")
            })
            .collect();
        Self {
            groups,
            coords,
            offsets,
        }
    }
}

/// Neighbor indices and normalized inverse-distance weights, `k` per destination.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpPlan {
    pub k: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl InterpPlan {
    /// `k` nearest sources per destination (ties by lower index, `k` clamped
    /// to the source count), weighted `1 / max(d, eps)^p` and normalized.
    pub fn new(src: &[Point], dst: &[Point], cfg: &InterpConfig) -> Result<Self, HierarchyError> {
        if src.is_empty() {
            return Err(HierarchyError::NoPoints);
        }
        let k = cfg.k.min(src.len());
        let mut indices = Vec::with_capacity(dst.len() * k);
        let mut weights = Vec::with_capacity(dst.len() * k);
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(src.len());
        for d in dst {
            order.clear();
            order.extend(src.iter().enumerate().map(|(i, s)| (s.dist(d), i)));
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let raw: Vec<f64> = order[..k]
                .iter()
                .map(|&(dist, _)| 1.0 / dist.max(cfg.eps).powf(cfg.p))
                .collect();
            let total: f64 = raw.iter().sum();
            indices.extend(order[..k].iter().map(|&(_, i)| i));
            weights.extend(raw.iter().map(|w| w / total));
        }
        Ok(Self {
            k,
            indices,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, dst: usize) -> (&[usize], &[f64]) {
        let r = dst * self.k..(dst + 1) * self.k;
        (&self.indices[r.clone()], &self.weights[r])
    }
}

/// Structure for a whole encoder-decoder pass over one point set.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyPlan {
    pub input: Vec<Point>,
    pub levels: Vec<LevelPlan>,
    /// `interps[l]` carries features from point set `l + 1` onto point set
    /// `l`, where set 0 is the input and set `l + 1` the centroids of level `l`.
    pub interps: Vec<InterpPlan>,
}

impl HierarchyPlan {
    pub fn new(points: &[Point], cfg: &HierarchyConfig) -> Result<Self, HierarchyError> {
        let mut sets = vec![points.to_vec()];
        let mut levels = Vec::with_capacity(cfg.levels.len());
        for lc in &cfg.levels {
            let plan = LevelPlan::new(sets.last().expect("non-empty"), lc)?;
            sets.push(plan.coords.clone());
            levels.push(plan);
        }
        let interps = (0..levels.len())
            .map(|l| InterpPlan::new(&sets[l + 1], &sets[l], &cfg.interp))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            input: points.to_vec(),
            levels,
            interps,
        })
    }
}

fn branch_name(level: usize, ratio: AxisRatio) -> String {
    format!("sa{level}.r{}x{}", ratio.w, ratio.h)
}

/// Registers set abstraction and propagation weights for `input_channels`
/// input features; returns the output width.
pub fn init_hierarchy_params(
    store: &mut ParamStore,
    cfg: &HierarchyConfig,
    input_channels: usize,
    init: Init,
) -> usize {
    let mut widths = vec![input_channels];
    for (l, lc) in cfg.levels.iter().enumerate() {
        for &r in &lc.ratios {
            init_mlp(
                store,
                &branch_name(l, r),
                2 + widths[l],
                &lc.mlp_channels,
                init,
            );
        }
        widths.push(lc.out_channels());
    }
    let mut carried = widths[cfg.levels.len()];
    for l in (0..cfg.levels.len()).rev() {
        carried = init_mlp(
            store,
            &format!("fp{l}"),
            carried + widths[l],
            &cfg.fp_channels[l],
            init,
        );
    }
    carried
}

/// One set abstraction level at index `level` of the configuration.
pub fn set_abstraction(
    g: &Graph,
    p: &BoundParams,
    level: usize,
    state: &LevelState,
    cfg: &LevelConfig,
    plan: &LevelPlan,
) -> Result<LevelState, HierarchyError> {
    let k = plan.groups.capacity;
    let n = plan.groups.centroids.len();
    let segments: Vec<usize> = (0..n * k).map(|i| i / k).collect();
    let mut outs = Vec::with_capacity(plan.groups.branches.len());
    for (branch, offsets) in plan.groups.branches.iter().zip(&plan.offsets) {
        let feats = g.gather(state.feats, &branch.members)?;
        let local = g.constant(offsets.clone());
        let x = g.concat(&[local, feats], 1)?;
        let h = mlp(
            g,
            p,
            &branch_name(level, branch.ratio),
            x,
            cfg.mlp_channels.len(),
            true,
        )?;
        outs.push(g.max_over_segments(h, &segments, n)?);
    }
    let feats = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat(&outs, 1)?
    };
    Ok(LevelState {
        coords: plan.coords.clone(),
        feats,
    })
}

pub fn interpolate_features(
    g: &Graph,
    src_feats: Var,
    plan: &InterpPlan,
) -> Result<Var, HierarchyError> {
    Ok(g.weighted_rows(src_feats, &plan.indices, &plan.weights, plan.k)?)
}

/// Decoder pass from the coarsest state of `encoder_stack` (input first)
/// back to the input point set; returns the feature of each step, finest
/// first.
pub fn feature_propagation(
    g: &Graph,
    p: &BoundParams,
    encoder_stack: &[LevelState],
    plan: &HierarchyPlan,
    cfg: &HierarchyConfig,
) -> Result<Vec<Var>, HierarchyError> {
    let levels = encoder_stack.len().saturating_sub(1);
    if levels != plan.interps.len() || levels != cfg.fp_channels.len() {
        return Err(HierarchyError::PlanMismatch {
            plan: plan.interps.len(),
            config: cfg.fp_channels.len(),
        });
    }
    let mut carried = encoder_stack[levels].feats;
    let mut steps = vec![carried; levels];
    for l in (0..levels).rev() {
        let up = interpolate_features(g, carried, &plan.interps[l])?;
        let x = g.concat(&[up, encoder_stack[l].feats], 1)?;
        carried = mlp(g, p, &format!("fp{l}"), x, cfg.fp_channels[l].len(), true)?;
        steps[l] = carried;
    }
    Ok(steps)
}

#[derive(Debug, Clone)]
pub struct EncodeDecodeOutput {
    /// Input state followed by the output of every set abstraction level.
    pub encoder: Vec<LevelState>,
    /// Propagation outputs, finest first.
    pub decoder: Vec<Var>,
    /// Per-reference-point features, `(points, out_channels)`.
    pub output: Var,
}

pub fn encode_decode(
    g: &Graph,
    p: &BoundParams,
    feats: Var,
    plan: &HierarchyPlan,
    cfg: &HierarchyConfig,
) -> Result<EncodeDecodeOutput, HierarchyError> {
    if plan.levels.len() != cfg.levels.len() {
        return Err(HierarchyError::PlanMismatch {
            plan: plan.levels.len(),
            config: cfg.levels.len(),
        });
    }
    let mut encoder = vec![LevelState {
        coords: plan.input.clone(),
        feats,
    }];
    for (l, (lc, lp)) in cfg.levels.iter().zip(&plan.levels).enumerate() {
        let next = set_abstraction(g, p, l, encoder.last().expect("non-empty"), lc, lp)?;
        encoder.push(next);
    }
    let decoder = feature_propagation(g, p, &encoder, plan, cfg)?;
    Ok(EncodeDecodeOutput {
        output: decoder[0],
        encoder,
        decoder,
    })
}
