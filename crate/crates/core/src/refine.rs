//! Box-driven panoptic refinement: class overwrite inside confident boxes,
//! sequential instance IDs and per-point export.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{Coord, InstanceGrid, SemanticGrid, VoxelGridSpec};

pub const DEFAULT_TAU: f64 = 0.8;
pub const DEFAULT_OVERLAP: f64 = 0.5;

/// Oriented 3D box: `size` is `(l, w, h)` along the box's own x, y, z and
/// `yaw` rotates it about z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct Box3D {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
    class: u16,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
    class: u16,
    score: f64,
}

impl TryFrom<RawBox> for Box3D {
    type Error = Error;

    fn try_from(r: RawBox) -> Result<Self> {
        Box3D::new(r.center, r.size, r.yaw, r.class, r.score)
    }
}

impl From<Box3D> for RawBox {
    fn from(b: Box3D) -> Self {
        RawBox {
            center: b.center,
            size: b.size,
            yaw: b.yaw,
            class: b.class,
            score: b.score,
        }
    }
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class: u16, score: f64) -> Result<Self> {
        if center.iter().any(|v| !v.is_finite()) || !yaw.is_finite() {
            return Err(invalid("box", "center and yaw must be finite"));
        }
        if size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid("box", format!("size must be positive, got {size:?}")));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(invalid("box", format!("score {score} outside [0, 1]")));
        }
        Ok(Self {
            center,
            size,
            yaw,
            class,
            score,
        })
    }

    pub fn center(&self) -> [f64; 3] {
        self.center
    }

    pub fn size(&self) -> [f64; 3] {
        self.size
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn class(&self) -> u16 {
        self.class
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn with_score(&self, score: f64) -> Result<Self> {
        Self::new(self.center, self.size, self.yaw, self.class, score)
    }

    /// World point expressed in the box frame.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    /// Closed containment test in the box frame.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.to_local(p);
        (0..3).all(|a| l[a].abs() <= self.size[a] / 2.0)
    }

    /// World-axis bounds of the rotated box.
    fn world_bounds(&self) -> ([f64; 3], [f64; 3]) {
        let (s, c) = self.yaw.sin_cos();
        let [hl, hw, hh] = self.size.map(|v| v / 2.0);
        let ex = (c * hl).abs() + (s * hw).abs();
        let ey = (s * hl).abs() + (c * hw).abs();
        let e = [ex, ey, hh];
        (
            [0, 1, 2].map(|a| self.center[a] - e[a]),
            [0, 1, 2].map(|a| self.center[a] + e[a]),
        )
    }
}

/// Cells whose centers fall inside the box, in lexicographic order.
pub fn voxels_in_box(spec: &VoxelGridSpec, b: &Box3D) -> Vec<Coord> {
    let (lo, hi) = b.world_bounds();
    let (o, s, dims) = (spec.origin(), spec.cell_size(), spec.dims());
    let mut range = [(0usize, 0usize); 3];
    for a in 0..3 {
        // centers at o + (i + 0.5) s; widen by one cell against rounding
        let first = ((lo[a] - o[a]) / s[a] - 0.5).floor() - 1.0;
        let last = ((hi[a] - o[a]) / s[a] - 0.5).ceil() + 1.0;
        if last < 0.0 || first >= dims[a] as f64 {
            return Vec::new();
        }
        range[a] = (first.max(0.0) as usize, (last as usize).min(dims[a] - 1));
    }
    let mut out = Vec::new();
    for i in range[0].0..=range[0].1 {
        for j in range[1].0..=range[1].1 {
            for k in range[2].0..=range[2].1 {
                if b.contains(spec.center([i, j, k])) {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

fn check_threshold(name: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(name, format!("{v} outside [0, 1]")))
    }
}

/// Boxes with `score > tau`, highest score first, ties by input index.
pub fn confident_boxes(boxes: &[Box3D], tau: f64) -> Vec<&Box3D> {
    let mut sel: Vec<(usize, &Box3D)> = boxes.iter().enumerate().filter(|(_, b)| b.score > tau).collect();
    sel.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    sel.into_iter().map(|(_, b)| b).collect()
}

fn check_classes(grid: &SemanticGrid, boxes: &[&Box3D], things: &BTreeSet<u16>) -> Result<()> {
    for b in boxes {
        if !things.contains(&b.class) || b.class == 0 || b.class > grid.num_classes() {
            return Err(invalid("boxes", format!("box class {} is not a thing class", b.class)));
        }
    }
    Ok(())
}

/// Relabels thing-labeled voxels inside each confident box with the box
/// class. Boxes are visited by descending score and a voxel claimed by an
/// earlier box is not overwritten by a later one. Empty, stuff and ignored
/// voxels are left alone.
pub fn refine_semantics(
    grid: &SemanticGrid,
    boxes: &[Box3D],
    tau: f64,
    thing_classes: &BTreeSet<u16>,
) -> Result<SemanticGrid> {
    check_threshold("tau", tau)?;
    let sel = confident_boxes(boxes, tau);
    check_classes(grid, &sel, thing_classes)?;
    let spec = *grid.spec();
    let mut labels = grid.labels().to_vec();
    let mut claimed = vec![false; labels.len()];
    for b in sel {
        for c in voxels_in_box(&spec, b) {
            let n = spec.linear(c);
            if !claimed[n] && thing_classes.contains(&grid.labels()[n]) {
                claimed[n] = true;
                labels[n] = b.class;
            }
        }
    }
    SemanticGrid::new(spec, grid.num_classes(), labels)
}

/// Sequential instance IDs in descending box score. A box's candidates are
/// its interior thing-labeled voxels; the box is skipped when it has no
/// candidates, or when more than `overlap_threshold` of them already carry an
/// ID. Otherwise its unassigned candidates get the next ID.
pub fn assign_instances(
    grid: &SemanticGrid,
    boxes: &[Box3D],
    tau: f64,
    overlap_threshold: f64,
    thing_classes: &BTreeSet<u16>,
) -> Result<InstanceGrid> {
    check_threshold("tau", tau)?;
    check_threshold("overlap_threshold", overlap_threshold)?;
    let sel = confident_boxes(boxes, tau);
    check_classes(grid, &sel, thing_classes)?;
    let spec = *grid.spec();
    let mut ids = vec![0u32; spec.num_cells()];
    let mut next = 1;
    for b in sel {
        let cand: Vec<usize> = voxels_in_box(&spec, b)
            .into_iter()
            .map(|c| spec.linear(c))
            .filter(|&n| thing_classes.contains(&grid.labels()[n]))
            .collect();
        let taken = cand.iter().filter(|&&n| ids[n] != 0).count();
        if cand.is_empty() || taken == cand.len() {
            continue;
        }
        if taken as f64 / cand.len() as f64 > overlap_threshold {
            continue;
        }
        for n in cand {
            if ids[n] == 0 {
                ids[n] = next;
            }
        }
        next += 1;
    }
    InstanceGrid::new(spec, ids)
}

/// `(class, instance)` of the voxel containing each point; `(0, 0)` outside.
pub fn export_point_labels(
    grid: &SemanticGrid,
    inst: &InstanceGrid,
    points: &[[f64; 3]],
) -> Result<Vec<(u16, u32)>> {
    grid.spec().check_same(inst.spec(), "semantic and instance grids")?;
    Ok(points
        .iter()
        .map(|&p| match grid.spec().world_to_index(p) {
            Some(c) => (grid.label(c), inst.id(c)),
            None => (0, 0),
        })
        .collect())
}
