//! Voxel-grid coordinate system and the volumes indexed against it.
//!
//! Axis convention: `i` runs along x (H), `j` along y (W), `k` along z (Z).
//! Cells are half-open, `[origin + idx * cell, origin + (idx + 1) * cell)`,
//! so every in-range point belongs to exactly one cell. All payloads are
//! stored row-major in `(i, j, k, channel)` order.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Integer voxel coordinate `(i, j, k)`.
pub type Coord = [usize; 3];

/// Dimensions, placement and resolution of a regular voxel grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct VoxelGridSpec {
    dims: [usize; 3],
    origin: [f64; 3],
    cell_size: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    dims: [usize; 3],
    origin: [f64; 3],
    cell_size: [f64; 3],
}

impl TryFrom<RawSpec> for VoxelGridSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        VoxelGridSpec::new(raw.dims, raw.origin, raw.cell_size)
    }
}

impl From<VoxelGridSpec> for RawSpec {
    fn from(spec: VoxelGridSpec) -> Self {
        RawSpec {
            dims: spec.dims,
            origin: spec.origin,
            cell_size: spec.cell_size,
        }
    }
}

/// nuScenes-style point cloud range used by the presets.
const RANGE_MIN: [f64; 3] = [-51.2, -51.2, -5.0];
const RANGE_MAX: [f64; 3] = [51.2, 51.2, 3.0];

impl VoxelGridSpec {
    pub fn new(dims: [usize; 3], origin: [f64; 3], cell_size: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidSpec(format!("dims must be >= 1, got {dims:?}")));
        }
        if origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec(format!("origin must be finite, got {origin:?}")));
        }
        if cell_size.iter().any(|&c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::InvalidSpec(format!(
                "cell sizes must be finite and > 0, got {cell_size:?}"
            )));
        }
        Ok(Self {
            dims,
            origin,
            cell_size,
        })
    }

    /// Grid of `dims` cells exactly covering the box `[min, max)`.
    pub fn covering(dims: [usize; 3], min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let cell = [0, 1, 2].map(|a| (max[a] - min[a]) / dims[a].max(1) as f64);
        Self::new(dims, min, cell)
    }

    /// Coarse voxel-query grid, 50x50x16 over the nuScenes range.
    pub fn paper_queries() -> Self {
        Self::covering([50, 50, 16], RANGE_MIN, RANGE_MAX).expect("valid preset")
    }

    /// Upsampled occupancy grid, 200x200x32 over the nuScenes range.
    pub fn paper_occupancy() -> Self {
        Self::covering([200, 200, 32], RANGE_MIN, RANGE_MAX).expect("valid preset")
    }

    /// Supervision grid, 400x400x64, cells of (0.256, 0.256, 0.125) m.
    pub fn paper_supervision() -> Self {
        Self::covering([400, 400, 64], RANGE_MIN, RANGE_MAX).expect("valid preset")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn cell_size(&self) -> [f64; 3] {
        self.cell_size
    }

    pub fn num_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Maximum (exclusive) world corner.
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + self.dims[a] as f64 * self.cell_size[a])
    }

    pub fn contains(&self, idx: Coord) -> bool {
        idx[0] < self.dims[0] && idx[1] < self.dims[1] && idx[2] < self.dims[2]
    }

    pub fn linear(&self, idx: Coord) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    pub fn unravel(&self, linear: usize) -> Coord {
        let k = linear % self.dims[2];
        let rest = linear / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], k]
    }

    /// Iterates all coordinates in storage order.
    pub fn coords(&self) -> impl Iterator<Item = Coord> + '_ {
        (0..self.num_cells()).map(move |n| self.unravel(n))
    }

    /// Continuous index coordinates of a world point; cell centers sit at
    /// `idx + 0.5`.
    pub fn world_to_continuous(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.origin[a]) / self.cell_size[a])
    }

    /// Cell containing `p`, or `None` when `p` lies outside `[origin, extent)`.
    pub fn world_to_index(&self, p: [f64; 3]) -> Option<Coord> {
        let extent = self.extent();
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if !(p[a] >= self.origin[a] && p[a] < extent[a]) {
                return None;
            }
            let q = ((p[a] - self.origin[a]) / self.cell_size[a]).floor();
            // rounding can push a point just below the extent onto `dims`
            idx[a] = (q as usize).min(self.dims[a] - 1);
        }
        Some(idx)
    }

    pub fn index_to_center(&self, idx: Coord) -> Result<[f64; 3]> {
        if !self.contains(idx) {
            return Err(Error::IndexOutOfBounds {
                i: idx[0],
                j: idx[1],
                k: idx[2],
                dims: self.dims,
            });
        }
        Ok(self.center(idx))
    }

    pub(crate) fn center(&self, idx: Coord) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + (idx[a] as f64 + 0.5) * self.cell_size[a])
    }

    /// Same world box, `factors` times finer along each axis.
    pub fn upsampled(&self, factors: [usize; 3]) -> Result<Self> {
        if factors.contains(&0) {
            return Err(invalid("factors", format!("must be >= 1, got {factors:?}")));
        }
        Self::new(
            [0, 1, 2].map(|a| self.dims[a] * factors[a]),
            self.origin,
            [0, 1, 2].map(|a| self.cell_size[a] / factors[a] as f64),
        )
    }

    pub(crate) fn check_same(&self, other: &Self, what: &'static str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::SpecMismatch(what))
        }
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(Error::NonFinite(pos)),
        None => Ok(()),
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, actual })
    }
}

/// Dense `H x W x Z x D` feature volume.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVolume {
    spec: VoxelGridSpec,
    channels: usize,
    data: Vec<f64>,
}

impl DenseVolume {
    pub fn new(spec: VoxelGridSpec, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(invalid("channels", "must be >= 1"));
        }
        check_len(spec.num_cells() * channels, data.len())?;
        check_finite(&data)?;
        Ok(Self {
            spec,
            channels,
            data,
        })
    }

    pub fn zeros(spec: VoxelGridSpec, channels: usize) -> Self {
        assert!(channels > 0, "channels must be >= 1");
        Self {
            spec,
            channels,
            data: vec![0.0; spec.num_cells() * channels],
        }
    }

    /// Builds a volume by filling each cell's feature slice.
    pub fn from_fn(
        spec: VoxelGridSpec,
        channels: usize,
        mut fill: impl FnMut(Coord, &mut [f64]),
    ) -> Result<Self> {
        if channels == 0 {
            return Err(invalid("channels", "must be >= 1"));
        }
        let mut data = vec![0.0; spec.num_cells() * channels];
        for (n, chunk) in data.chunks_mut(channels).enumerate() {
            fill(spec.unravel(n), chunk);
        }
        Self::new(spec, channels, data)
    }

    pub fn spec(&self) -> &VoxelGridSpec {
        &self.spec
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Feature vector of cell `idx`. Panics when out of bounds.
    pub fn features(&self, idx: Coord) -> &[f64] {
        assert!(self.spec.contains(idx), "index {idx:?} out of bounds");
        self.features_linear(self.spec.linear(idx))
    }

    pub fn features_linear(&self, linear: usize) -> &[f64] {
        &self.data[linear * self.channels..(linear + 1) * self.channels]
    }
}

/// Pruned coordinate-list volume; entries sorted by coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVolume {
    spec: VoxelGridSpec,
    channels: usize,
    coords: Vec<Coord>,
    features: Vec<f64>,
}

impl SparseVolume {
    pub fn new(
        spec: VoxelGridSpec,
        channels: usize,
        coords: Vec<Coord>,
        features: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(invalid("channels", "must be >= 1"));
        }
        check_len(coords.len() * channels, features.len())?;
        check_finite(&features)?;
        for (n, c) in coords.iter().enumerate() {
            if !spec.contains(*c) {
                return Err(Error::IndexOutOfBounds {
                    i: c[0],
                    j: c[1],
                    k: c[2],
                    dims: spec.dims(),
                });
            }
            if n > 0 && coords[n - 1] >= *c {
                return Err(invalid(
                    "coords",
                    format!("not strictly increasing at entry {n}: {:?} then {c:?}", coords[n - 1]),
                ));
            }
        }
        Ok(Self {
            spec,
            channels,
            coords,
            features,
        })
    }

    pub fn empty(spec: VoxelGridSpec, channels: usize) -> Self {
        assert!(channels > 0, "channels must be >= 1");
        Self {
            spec,
            channels,
            coords: Vec::new(),
            features: Vec::new(),
        }
    }

    pub fn spec(&self) -> &VoxelGridSpec {
        &self.spec
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn feature_data(&self) -> &[f64] {
        &self.features
    }

    pub fn entry(&self, n: usize) -> (Coord, &[f64]) {
        (
            self.coords[n],
            &self.features[n * self.channels..(n + 1) * self.channels],
        )
    }

    pub fn iter(&self) -> impl Iterator<Item = (Coord, &[f64])> + '_ {
        self.coords
            .iter()
            .copied()
            .zip(self.features.chunks(self.channels))
    }

    /// Features stored at `coord`, if present.
    pub fn get(&self, coord: Coord) -> Option<&[f64]> {
        self.coords
            .binary_search(&coord)
            .ok()
            .map(|n| self.entry(n).1)
    }
}

/// Per-voxel class labels; `0` is empty and `num_classes + 1` marks ignored
/// voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGrid {
    spec: VoxelGridSpec,
    num_classes: u16,
    labels: Vec<u16>,
}

impl SemanticGrid {
    pub fn new(spec: VoxelGridSpec, num_classes: u16, labels: Vec<u16>) -> Result<Self> {
        if num_classes == u16::MAX {
            return Err(invalid("num_classes", "no room for the ignore label"));
        }
        check_len(spec.num_cells(), labels.len())?;
        if let Some(bad) = labels.iter().find(|&&l| l > num_classes + 1) {
            return Err(invalid(
                "labels",
                format!("label {bad} exceeds {num_classes} classes (+1 ignore)"),
            ));
        }
        Ok(Self {
            spec,
            num_classes,
            labels,
        })
    }

    pub fn empty(spec: VoxelGridSpec, num_classes: u16) -> Self {
        Self {
            spec,
            num_classes,
            labels: vec![0; spec.num_cells()],
        }
    }

    pub fn spec(&self) -> &VoxelGridSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn ignore_label(&self) -> u16 {
        self.num_classes + 1
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u16> {
        self.labels
    }

    pub fn label(&self, idx: Coord) -> u16 {
        self.labels[self.spec.linear(idx)]
    }
}

/// Per-voxel instance IDs; `0` is stuff/empty and the used IDs are
/// contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGrid {
    spec: VoxelGridSpec,
    ids: Vec<u32>,
    num_instances: u32,
}

impl InstanceGrid {
    pub fn new(spec: VoxelGridSpec, ids: Vec<u32>) -> Result<Self> {
        check_len(spec.num_cells(), ids.len())?;
        let max = ids.iter().copied().max().unwrap_or(0);
        let mut seen = vec![false; max as usize + 1];
        for &id in &ids {
            seen[id as usize] = true;
        }
        if let Some(missing) = seen.iter().skip(1).position(|s| !s) {
            return Err(invalid(
                "ids",
                format!("instance ids not contiguous: {} missing below {max}", missing + 1),
            ));
        }
        Ok(Self {
            spec,
            ids,
            num_instances: max,
        })
    }

    /// Renumbers arbitrary non-zero IDs to `1..=P` in order of first
    /// appearance in storage order.
    pub fn compacted(spec: VoxelGridSpec, mut ids: Vec<u32>) -> Result<Self> {
        check_len(spec.num_cells(), ids.len())?;
        let mut remap = std::collections::HashMap::new();
        for id in ids.iter_mut().filter(|id| **id != 0) {
            let next = remap.len() as u32 + 1;
            *id = *remap.entry(*id).or_insert(next);
        }
        Self::new(spec, ids)
    }

    pub fn zeros(spec: VoxelGridSpec) -> Self {
        Self {
            spec,
            ids: vec![0; spec.num_cells()],
            num_instances: 0,
        }
    }

    pub fn spec(&self) -> &VoxelGridSpec {
        &self.spec
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn id(&self, idx: Coord) -> u32 {
        self.ids[self.spec.linear(idx)]
    }

    /// `P`, the largest ID in use.
    pub fn num_instances(&self) -> u32 {
        self.num_instances
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    spec: VoxelGridSpec,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(spec: VoxelGridSpec, bits: Vec<bool>) -> Result<Self> {
        check_len(spec.num_cells(), bits.len())?;
        Ok(Self { spec, bits })
    }

    pub fn filled(spec: VoxelGridSpec, value: bool) -> Self {
        Self {
            spec,
            bits: vec![value; spec.num_cells()],
        }
    }

    pub fn spec(&self) -> &VoxelGridSpec {
        &self.spec
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, idx: Coord) -> bool {
        self.bits[self.spec.linear(idx)]
    }

    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// One real score per voxel (occupancy logits/probabilities, mask scores).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    spec: VoxelGridSpec,
    values: Vec<f64>,
}

impl ScoreGrid {
    pub fn new(spec: VoxelGridSpec, values: Vec<f64>) -> Result<Self> {
        check_len(spec.num_cells(), values.len())?;
        check_finite(&values)?;
        Ok(Self { spec, values })
    }

    pub fn from_fn(spec: VoxelGridSpec, f: impl FnMut(Coord) -> f64) -> Result<Self> {
        Self::new(spec, spec.coords().map(f).collect())
    }

    pub fn spec(&self) -> &VoxelGridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, idx: Coord) -> f64 {
        self.values[self.spec.linear(idx)]
    }
}

/// Bird's-eye-view `H x W x D` feature plane.
#[derive(Debug, Clone, PartialEq)]
pub struct BevPlane {
    pub dims: [usize; 2],
    pub channels: usize,
    pub data: Vec<f64>,
}

impl BevPlane {
    pub fn features(&self, i: usize, j: usize) -> &[f64] {
        let n = i * self.dims[1] + j;
        &self.data[n * self.channels..(n + 1) * self.channels]
    }
}

/// Masks the volume and average-pools over height.
///
/// The divisor is always `Z`: masked-out cells contribute zeros to the mean
/// rather than being dropped from it.
pub fn apply_mask_and_pool_bev(vol: &DenseVolume, mask: &BinaryMask) -> Result<BevPlane> {
    vol.spec.check_same(&mask.spec, "volume and mask")?;
    let [h, w, z] = vol.spec.dims();
    let d = vol.channels;
    let mut data = vec![0.0; h * w * d];
    for i in 0..h {
        for j in 0..w {
            let out = &mut data[(i * w + j) * d..(i * w + j + 1) * d];
            for k in 0..z {
                let lin = vol.spec.linear([i, j, k]);
                if mask.bits[lin] {
                    for (o, v) in out.iter_mut().zip(vol.features_linear(lin)) {
                        *o += v;
                    }
                }
            }
            for o in out.iter_mut() {
                *o /= z as f64;
            }
        }
    }
    Ok(BevPlane {
        dims: [h, w],
        channels: d,
        data,
    })
}

/// Expands a sparse volume, filling absent cells with zeros.
pub fn densify(sv: &SparseVolume) -> DenseVolume {
    let mut dense = DenseVolume::zeros(sv.spec, sv.channels);
    let d = sv.channels;
    for (coord, feats) in sv.iter() {
        let lin = sv.spec.linear(coord);
        dense.data[lin * d..(lin + 1) * d].copy_from_slice(feats);
    }
    dense
}

/// Keeps the cells whose feature vector has at least one nonzero entry.
pub fn sparsify_nonzero(vol: &DenseVolume) -> SparseVolume {
    let mut coords = Vec::new();
    let mut features = Vec::new();
    for (n, feats) in vol.data.chunks(vol.channels).enumerate() {
        if feats.iter().any(|&v| v != 0.0) {
            coords.push(vol.spec.unravel(n));
            features.extend_from_slice(feats);
        }
    }
    SparseVolume {
        spec: vol.spec,
        channels: vol.channels,
        coords,
        features,
    }
}
