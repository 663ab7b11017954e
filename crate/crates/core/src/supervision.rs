//! Voxel targets from labeled LiDAR points.

use std::collections::BTreeSet;

use crate::error::{invalid, Result};
use crate::grid::{BinaryMask, InstanceGrid, SemanticGrid, VoxelGridSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub position: [f32; 3],
    /// Semantic class in `1..=C`.
    pub label: u16,
    /// Instance id, `0` when the point belongs to no instance.
    pub instance: u32,
}

impl LabeledPoint {
    pub fn position_f64(&self) -> [f64; 3] {
        self.position.map(f64::from)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPointCloud {
    points: Vec<LabeledPoint>,
    num_classes: u16,
}

impl LabeledPointCloud {
    pub fn new(points: Vec<LabeledPoint>, num_classes: u16) -> Result<Self> {
        for (n, p) in points.iter().enumerate() {
            if p.label == 0 || p.label > num_classes {
                return Err(invalid(
                    "points",
                    format!("point {n} has label {} outside 1..={num_classes}", p.label),
                ));
            }
            if p.position.iter().any(|v| !v.is_finite()) {
                return Err(invalid("points", format!("point {n} has a non-finite coordinate")));
            }
        }
        Ok(Self {
            points,
            num_classes,
        })
    }

    pub fn points(&self) -> &[LabeledPoint] {
        &self.points
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }
}

/// `(cell, label, instance)` for every in-range point, sorted.
fn binned(pc: &LabeledPointCloud, spec: &VoxelGridSpec) -> Vec<(usize, u16, u32)> {
    let mut bins: Vec<_> = pc
        .points
        .iter()
        .filter_map(|p| {
            spec.world_to_index(p.position_f64())
                .map(|idx| (spec.linear(idx), p.label, p.instance))
        })
        .collect();
    bins.sort_unstable();
    bins
}

/// Most frequent key in a sorted run; ties go to the smallest key.
fn majority<K: PartialEq + Copy>(sorted: impl Iterator<Item = K>) -> Option<K> {
    let mut best: Option<(K, usize)> = None;
    let mut current: Option<(K, usize)> = None;
    for key in sorted {
        current = match current {
            Some((k, n)) if k == key => Some((k, n + 1)),
            _ => Some((key, 1)),
        };
        let (k, n) = current.unwrap();
        if best.is_none_or(|(_, bn)| n > bn) {
            best = Some((k, n));
        }
    }
    best.map(|(k, _)| k)
}

/// Per-voxel majority label; empty voxels get 0 and ties go to the smaller
/// class index. Out-of-range points are ignored.
pub fn voxelize_majority(pc: &LabeledPointCloud, spec: &VoxelGridSpec) -> SemanticGrid {
    let mut labels = vec![0u16; spec.num_cells()];
    for run in binned(pc, spec).chunk_by(|a, b| a.0 == b.0) {
        labels[run[0].0] = majority(run.iter().map(|r| r.1)).unwrap_or(0);
    }
    SemanticGrid::new(*spec, pc.num_classes, labels).expect("labels come from a validated cloud")
}

/// Instance grid consistent with `semantic`: each voxel takes the majority
/// non-zero instance among its points carrying the voxel's label. IDs are
/// renumbered to a contiguous range.
pub fn voxelize_instances(pc: &LabeledPointCloud, semantic: &SemanticGrid) -> Result<InstanceGrid> {
    let spec = semantic.spec();
    let mut ids = vec![0u32; spec.num_cells()];
    for run in binned(pc, spec).chunk_by(|a, b| a.0 == b.0) {
        let cell = run[0].0;
        let label = semantic.labels()[cell];
        let mut inst: Vec<u32> = run
            .iter()
            .filter(|r| r.1 == label && r.2 != 0)
            .map(|r| r.2)
            .collect();
        inst.sort_unstable();
        ids[cell] = majority(inst.into_iter()).unwrap_or(0);
    }
    InstanceGrid::compacted(*spec, ids)
}

pub fn make_thing_mask(grid: &SemanticGrid, thing_classes: &BTreeSet<u16>) -> BinaryMask {
    let bits = grid.labels().iter().map(|l| thing_classes.contains(l)).collect();
    BinaryMask::new(*grid.spec(), bits).expect("same spec")
}

/// Marks every invisible voxel with the ignore label `C + 1`.
pub fn apply_visibility_mask(grid: &SemanticGrid, visible: &BinaryMask) -> Result<SemanticGrid> {
    grid.spec().check_same(visible.spec(), "semantic grid and visibility mask")?;
    let ignore = grid.ignore_label();
    let labels = grid
        .labels()
        .iter()
        .zip(visible.bits())
        .map(|(&l, &v)| if v { l } else { ignore })
        .collect();
    SemanticGrid::new(*grid.spec(), grid.num_classes(), labels)
}
