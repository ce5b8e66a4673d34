//! The anchor scaffold: voxelized initialization, per-anchor learnable state,
//! and gradient-driven growing / opacity-driven pruning.

use std::collections::{BTreeMap, HashSet};

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scene_io::PointCloud;

/// Width of the per-anchor feature vector.
pub const FEATURE_DIM: usize = 32;

/// Integer voxel coordinates, `round(p / size)` per axis with ties away from zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey(pub [i64; 3]);

impl VoxelKey {
    pub fn of(p: &Vector3<f64>, size: f64) -> Self {
        VoxelKey([
            (p.x / size).round() as i64,
            (p.y / size).round() as i64,
            (p.z / size).round() as i64,
        ])
    }

    pub fn center(&self, size: f64) -> Vector3<f64> {
        Vector3::new(
            self.0[0] as f64 * size,
            self.0[1] as f64 * size,
            self.0[2] as f64 * size,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    /// Voxel center; never optimized.
    pub position: Vector3<f64>,
    pub feature: [f64; FEATURE_DIM],
    /// Log of the per-axis factor applied to the learnable offsets.
    pub log_offset_scale: [f64; 3],
    /// Log of the per-axis base scale of spawned Gaussians.
    pub log_base_scale: [f64; 3],
    pub offsets: Vec<[f64; 3]>,
    /// Growth level the anchor originated from (1 for initial anchors).
    pub level: u32,
}

impl Anchor {
    /// Fresh anchor with zero feature and offsets and both scales set to `scale`.
    pub fn new(position: Vector3<f64>, k: usize, scale: f64, level: u32) -> Self {
        let ls = scale.ln();
        Self {
            position,
            feature: [0.0; FEATURE_DIM],
            log_offset_scale: [ls; 3],
            log_base_scale: [ls; 3],
            offsets: vec![[0.0; 3]; k],
            level,
        }
    }

    pub fn offset_scale(&self) -> [f64; 3] {
        self.log_offset_scale.map(f64::exp)
    }

    pub fn base_scale(&self) -> [f64; 3] {
        self.log_base_scale.map(f64::exp)
    }

    pub fn k(&self) -> usize {
        self.offsets.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub anchors: Vec<Anchor>,
    pub voxel_size: f64,
    occupied: HashSet<VoxelKey>,
}

impl AnchorGrid {
    /// Rebuilds a grid from anchors, rejecting two anchors in one base voxel.
    pub fn from_anchors(anchors: Vec<Anchor>, voxel_size: f64) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::Validation(format!(
                "voxel size must be positive, got {voxel_size}"
            )));
        }
        let mut occupied = HashSet::with_capacity(anchors.len());
        for (i, a) in anchors.iter().enumerate() {
            if !occupied.insert(VoxelKey::of(&a.position, voxel_size)) {
                return Err(Error::Validation(format!(
                    "anchor {i} shares a voxel with an earlier anchor"
                )));
            }
        }
        Ok(Self {
            anchors,
            voxel_size,
            occupied,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn key_of(&self, p: &Vector3<f64>) -> VoxelKey {
        VoxelKey::of(p, self.voxel_size)
    }

    pub fn is_occupied(&self, key: &VoxelKey) -> bool {
        self.occupied.contains(key)
    }

    pub fn occupied_len(&self) -> usize {
        self.occupied.len()
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.anchors.iter().map(|a| a.position).collect()
    }

    fn push(&mut self, anchor: Anchor) {
        self.occupied.insert(self.key_of(&anchor.position));
        self.anchors.push(anchor);
    }
}

/// Snaps points to voxel centers and creates one anchor per distinct voxel,
/// in order of first occurrence.
pub fn voxelize(points: &PointCloud, voxel_size: f64, k: usize) -> Result<AnchorGrid> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::Validation(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    if points.is_empty() {
        return Err(Error::Validation(
            "cannot voxelize an empty point cloud".into(),
        ));
    }
    points.validate()?;
    let mut grid = AnchorGrid {
        anchors: Vec::new(),
        voxel_size,
        occupied: HashSet::new(),
    };
    for p in &points.positions {
        let key = VoxelKey::of(p, voxel_size);
        if !grid.occupied.contains(&key) {
            grid.push(Anchor::new(key.center(voxel_size), k, voxel_size, 1));
        }
    }
    Ok(grid)
}

/// Median over points of the distance to the nearest other point.
pub fn auto_voxel_size(points: &PointCloud) -> Result<f64> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Validation(
            "automatic voxel size needs at least two points; set it manually".into(),
        ));
    }
    points.validate()?;
    let pos = &points.positions;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pos[a].x.total_cmp(&pos[b].x));

    let mut nearest = vec![f64::INFINITY; n];
    for (rank, &i) in order.iter().enumerate() {
        let p = &pos[i];
        let mut best = f64::INFINITY;
        for &j in order[rank + 1..].iter() {
            if pos[j].x - p.x > best {
                break;
            }
            best = best.min((p - pos[j]).norm());
        }
        for &j in order[..rank].iter().rev() {
            if p.x - pos[j].x > best {
                break;
            }
            best = best.min((p - pos[j]).norm());
        }
        nearest[i] = best;
    }
    Ok(median(&mut nearest))
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }
}

/// Side length of the smallest cubic lattice with at least `count` nodes.
pub fn lattice_side(count: usize) -> usize {
    let mut n = 1;
    while n * n * n < count {
        n += 1;
    }
    n
}

/// Cell-centered regular lattice of `lattice_side(count)³` points filling
/// `bounds`, x varying fastest.
pub fn lattice_points(count: usize, bounds: &Aabb) -> Result<Vec<Vector3<f64>>> {
    if count == 0 {
        return Err(Error::Validation("lattice point count must be >= 1".into()));
    }
    let ext = bounds.extent();
    if ext.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(Error::Validation(format!(
            "degenerate bounds {:?}",
            ext.as_slice()
        )));
    }
    let n = lattice_side(count);
    let step = ext / n as f64;
    let mut pts = Vec::with_capacity(n * n * n);
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                pts.push(Vector3::new(
                    bounds.min.x + (ix as f64 + 0.5) * step.x,
                    bounds.min.y + (iy as f64 + 0.5) * step.y,
                    bounds.min.z + (iz as f64 + 0.5) * step.z,
                ));
            }
        }
    }
    Ok(pts)
}

/// Anchors for scenes without sparse points: a regular lattice of roughly
/// `count` points inside `bounds`, voxelized at `voxel_size`.
pub fn init_random_grid(
    count: usize,
    bounds: &Aabb,
    voxel_size: f64,
    k: usize,
) -> Result<AnchorGrid> {
    let pts = lattice_points(count, bounds)?;
    voxelize(&PointCloud::new(pts), voxel_size, k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementConfig {
    /// Base voxel size of the growth grid (ε_g).
    pub growth_voxel_size: f64,
    /// Base gradient threshold (τ_g).
    pub grad_threshold: f64,
    pub levels: u32,
    /// Probability that a growth candidate survives random elimination.
    pub keep_prob: f64,
    pub prune_opacity: f64,
}

impl RefinementConfig {
    /// Voxel size and gradient threshold at growth level `m` (1-based):
    /// `ε_g / 4^(m-1)` and `τ_g · 2^(m-1)`.
    pub fn level_params(&self, m: u32) -> (f64, f64) {
        assert!(m >= 1, "growth levels are 1-based");
        let e = (m - 1) as i32;
        (
            self.growth_voxel_size / 4f64.powi(e),
            self.grad_threshold * 2f64.powi(e),
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VoxelStat {
    pub grad_sum: f64,
    pub count: u64,
}

impl VoxelStat {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.grad_sum / self.count as f64
        }
    }
}

/// One rendered neural Gaussian's contribution to the refinement statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianObservation {
    pub position: Vector3<f64>,
    /// Norm of the loss gradient w.r.t. the projected 2D mean.
    pub grad_norm: f64,
    pub opacity: f64,
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementAccumulator {
    /// Voxel size per growth level.
    pub level_sizes: Vec<f64>,
    pub voxels: Vec<BTreeMap<VoxelKey, VoxelStat>>,
    pub opacity_sum: Vec<f64>,
    pub visits: Vec<u64>,
}

impl RefinementAccumulator {
    pub fn new(num_anchors: usize, cfg: &RefinementConfig) -> Self {
        let level_sizes: Vec<f64> = (1..=cfg.levels).map(|m| cfg.level_params(m).0).collect();
        Self {
            voxels: vec![BTreeMap::new(); level_sizes.len()],
            level_sizes,
            opacity_sum: vec![0.0; num_anchors],
            visits: vec![0; num_anchors],
        }
    }

    pub fn reset(&mut self, num_anchors: usize) {
        for v in &mut self.voxels {
            v.clear();
        }
        self.opacity_sum = vec![0.0; num_anchors];
        self.visits = vec![0; num_anchors];
    }

    /// Adds one iteration's statistics. `visible` lists every anchor that
    /// spawned candidates this iteration; an anchor whose Gaussians were all
    /// filtered contributes a zero mean opacity.
    pub fn accumulate(&mut self, observations: &[GaussianObservation], visible: &[usize]) {
        for obs in observations {
            for (size, map) in self.level_sizes.iter().zip(self.voxels.iter_mut()) {
                let stat = map.entry(VoxelKey::of(&obs.position, *size)).or_default();
                stat.grad_sum += obs.grad_norm;
                stat.count += 1;
            }
        }
        if visible.is_empty() && observations.is_empty() {
            return;
        }
        let needed = visible
            .iter()
            .chain(observations.iter().map(|o| &o.anchor))
            .max()
            .map_or(0, |m| m + 1);
        if needed > self.opacity_sum.len() {
            self.opacity_sum.resize(needed, 0.0);
            self.visits.resize(needed, 0);
        }
        let mut sums: BTreeMap<usize, (f64, u32)> =
            visible.iter().map(|&a| (a, (0.0, 0))).collect();
        for obs in observations {
            let e = sums.entry(obs.anchor).or_insert((0.0, 0));
            e.0 += obs.opacity;
            e.1 += 1;
        }
        for (a, (sum, n)) in sums {
            if n > 0 {
                self.opacity_sum[a] += sum / n as f64;
            }
            self.visits[a] += 1;
        }
    }
}

/// Adds anchors at growth voxels whose mean gradient exceeds the level's
/// threshold and whose base voxel is free. Returns the number added.
pub fn grow_anchors<R: Rng>(
    grid: &mut AnchorGrid,
    acc: &RefinementAccumulator,
    cfg: &RefinementConfig,
    rng: &mut R,
) -> usize {
    let existing = grid.len();
    let k = grid.anchors.first().map_or(0, Anchor::k);
    let mut added = 0;
    for (lvl, map) in acc.voxels.iter().enumerate() {
        let m = lvl as u32 + 1;
        if m > cfg.levels {
            break;
        }
        let (size, threshold) = cfg.level_params(m);
        for (key, stat) in map {
            if stat.count == 0 || stat.mean() <= threshold {
                continue;
            }
            let center = key.center(size);
            if grid.is_occupied(&grid.key_of(&center)) {
                continue;
            }
            let keep = if cfg.keep_prob >= 1.0 {
                true
            } else if cfg.keep_prob <= 0.0 {
                false
            } else {
                rng.gen::<f64>() < cfg.keep_prob
            };
            if !keep {
                continue;
            }
            let mut anchor = Anchor::new(center, k, size, m);
            if let Some(src) = nearest_anchor(&grid.anchors[..existing], &center) {
                anchor.feature = grid.anchors[src].feature;
            }
            grid.push(anchor);
            added += 1;
        }
    }
    added
}

fn nearest_anchor(anchors: &[Anchor], p: &Vector3<f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, a) in anchors.iter().enumerate() {
        let d = (a.position - p).norm_squared();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Removes visited anchors whose accumulated opacity is below the prune
/// threshold. Returns the original indices of the surviving anchors.
pub fn prune_anchors(
    grid: &mut AnchorGrid,
    acc: &RefinementAccumulator,
    cfg: &RefinementConfig,
) -> Vec<usize> {
    let keep: Vec<usize> = (0..grid.len())
        .filter(|&i| {
            let visits = acc.visits.get(i).copied().unwrap_or(0);
            let opacity = acc.opacity_sum.get(i).copied().unwrap_or(0.0);
            !(visits > 0 && opacity < cfg.prune_opacity)
        })
        .collect();
    if keep.len() != grid.len() {
        let mut old = std::mem::take(&mut grid.anchors);
        let mut slots: Vec<Option<Anchor>> = old.drain(..).map(Some).collect();
        grid.anchors = keep.iter().map(|&i| slots[i].take().unwrap()).collect();
        grid.occupied = grid
            .anchors
            .iter()
            .map(|a| VoxelKey::of(&a.position, grid.voxel_size))
            .collect();
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Vector3::from(*p)).collect())
    }

    fn cfg() -> RefinementConfig {
        RefinementConfig {
            growth_voxel_size: 1.0,
            grad_threshold: 0.1,
            levels: 3,
            keep_prob: 1.0,
            prune_opacity: 0.5,
        }
    }

    #[test]
    fn voxelize_rounds_to_nearest_center() {
        let g = voxelize(&cloud(&[[0.26, 0.0, 0.0]]), 0.5, 4).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.anchors[0].position, Vector3::new(0.5, 0.0, 0.0));
        assert_eq!(g.anchors[0].offsets.len(), 4);
    }

    #[test]
    fn voxelize_removes_duplicates() {
        let g = voxelize(&cloud(&[[0.1, 0.0, 0.0], [0.2, 0.0, 0.0]]), 1.0, 2).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.anchors[0].position, Vector3::zeros());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(
            VoxelKey::of(&Vector3::new(0.5, -0.5, 1.5), 1.0),
            VoxelKey([1, -1, 2])
        );
    }

    #[test]
    fn voxelize_rejects_bad_input() {
        assert!(voxelize(&cloud(&[[f64::NAN, 0.0, 0.0]]), 1.0, 2).is_err());
        assert!(voxelize(&cloud(&[[0.0, 0.0, 0.0]]), 0.0, 2).is_err());
    }

    #[test]
    fn new_anchor_scales_are_positive() {
        let a = Anchor::new(Vector3::zeros(), 3, 0.25, 1);
        for v in a.offset_scale().iter().chain(a.base_scale().iter()) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn collinear_auto_voxel_size() {
        let e =
            auto_voxel_size(&cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]])).unwrap();
        assert_eq!(e, 1.0);
    }

    #[test]
    fn grid_auto_voxel_size_is_spacing() {
        let h = 0.25;
        let mut pts = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                for l in 0..4 {
                    pts.push([i as f64 * h, j as f64 * h, l as f64 * h]);
                }
            }
        }
        assert_eq!(auto_voxel_size(&cloud(&pts)).unwrap(), h);
        assert!(auto_voxel_size(&cloud(&[[0.0; 3]])).is_err());
    }

    #[test]
    fn lattice_counts() {
        let unit = Aabb::new(Vector3::zeros(), Vector3::repeat(1.0));
        assert_eq!(lattice_points(8, &unit).unwrap().len(), 8);
        assert_eq!(lattice_points(10, &unit).unwrap().len(), 27);
        assert_eq!(init_random_grid(8, &unit, 0.1, 2).unwrap().len(), 8);
        let flat = Aabb::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 1.0));
        assert!(lattice_points(8, &flat).is_err());
    }

    #[test]
    fn level_schedule() {
        let c = RefinementConfig {
            grad_threshold: 0.0002 * 64.0,
            ..cfg()
        };
        let (e2, t2) = c.level_params(2);
        assert_eq!(t2, 0.0002 * 64.0 * 2.0);
        assert_eq!(e2, 0.25);
    }

    #[test]
    fn repeated_observation_averages() {
        let mut acc = RefinementAccumulator::new(1, &cfg());
        let obs = GaussianObservation {
            position: Vector3::new(0.1, 0.0, 0.0),
            grad_norm: 0.3,
            opacity: 0.4,
            anchor: 0,
        };
        acc.accumulate(&[obs], &[0]);
        acc.accumulate(&[obs], &[0]);
        let stat = acc.voxels[0][&VoxelKey([0, 0, 0])];
        assert!((stat.grad_sum - 0.6).abs() < 1e-15);
        assert_eq!(stat.count, 2);
        assert!((stat.mean() - 0.3).abs() < 1e-15);
        assert!((acc.opacity_sum[0] - 0.8).abs() < 1e-15);
        assert_eq!(acc.visits[0], 2);
    }

    #[test]
    fn empty_iteration_is_noop() {
        let mut acc = RefinementAccumulator::new(3, &cfg());
        let before = acc.clone();
        acc.accumulate(&[], &[]);
        assert_eq!(acc, before);
    }

    #[test]
    fn fully_filtered_anchor_counts_as_visited() {
        let mut acc = RefinementAccumulator::new(2, &cfg());
        acc.accumulate(&[], &[1]);
        assert_eq!(acc.visits, vec![0, 1]);
        assert_eq!(acc.opacity_sum, vec![0.0, 0.0]);
    }

    #[test]
    fn keep_prob_zero_never_grows() {
        let mut grid = voxelize(&cloud(&[[0.0; 3]]), 1.0, 2).unwrap();
        let mut acc = RefinementAccumulator::new(1, &cfg());
        for x in 1..5 {
            let obs = GaussianObservation {
                position: Vector3::new(x as f64 * 3.0, 0.0, 0.0),
                grad_norm: 10.0,
                opacity: 0.5,
                anchor: 0,
            };
            acc.accumulate(&[obs], &[0]);
        }
        let c = RefinementConfig {
            keep_prob: 0.0,
            ..cfg()
        };
        let before = grid.clone();
        assert_eq!(
            grow_anchors(&mut grid, &acc, &c, &mut ChaCha8Rng::seed_from_u64(0)),
            0
        );
        assert_eq!(grid, before);
    }

    #[test]
    fn grown_anchor_copies_nearest_feature() {
        let mut grid = voxelize(&cloud(&[[0.0; 3], [10.0, 0.0, 0.0]]), 1.0, 2).unwrap();
        grid.anchors[0].feature = [1.0; FEATURE_DIM];
        grid.anchors[1].feature = [2.0; FEATURE_DIM];
        let mut acc = RefinementAccumulator::new(2, &cfg());
        let obs = GaussianObservation {
            position: Vector3::new(7.0, 0.0, 0.0),
            grad_norm: 1.0,
            opacity: 0.5,
            anchor: 1,
        };
        acc.accumulate(&[obs], &[1]);
        let c = RefinementConfig { levels: 1, ..cfg() };
        let n = grow_anchors(&mut grid, &acc, &c, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(n, 1);
        let a = &grid.anchors[2];
        assert_eq!(a.position, Vector3::new(7.0, 0.0, 0.0));
        assert_eq!(a.feature, [2.0; FEATURE_DIM]);
        assert!(a.offsets.iter().all(|o| *o == [0.0; 3]));
        assert!((a.base_scale()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn prune_boundary_and_unvisited() {
        let pts: Vec<[f64; 3]> = (0..4).map(|i| [i as f64, 0.0, 0.0]).collect();
        let mut grid = voxelize(&cloud(&pts), 1.0, 1).unwrap();
        let mut acc = RefinementAccumulator::new(4, &cfg());
        acc.opacity_sum = vec![0.49, 0.5, 0.0, 0.9];
        acc.visits = vec![3, 3, 0, 1];
        let kept = prune_anchors(&mut grid, &acc, &cfg());
        assert_eq!(kept, vec![1, 2, 3]);
        assert_eq!(grid.len(), 3);
        assert_eq!(grid.occupied_len(), 3);
        assert!(!grid.is_occupied(&VoxelKey([0, 0, 0])));
    }
}
