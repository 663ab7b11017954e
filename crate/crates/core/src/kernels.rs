//! Bilinear/trilinear sampling, deformable-attention aggregation and the
//! finite-difference gradient checker used to verify them.
//!
//! Texel and cell centers sit at `integer + 0.5` in continuous coordinates,
//! the same convention as [`VoxelGridSpec::index_to_center`].
//!
//! [`VoxelGridSpec::index_to_center`]: crate::grid::VoxelGridSpec::index_to_center

use crate::error::{invalid, Error, Result};
use crate::geometry::{CameraModel, ReferencePointSet};
use crate::grid::{Coord, DenseVolume};

/// `height x width x D` image features, row-major `(row, col, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageFeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid("shape", "height, width and channels must be >= 1"));
        }
        if data.len() != height * width * channels {
            return Err(Error::LengthMismatch {
                expected: height * width * channels,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("finite constant map")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn texel(&self, row: usize, col: usize) -> &[f64] {
        let n = row * self.width + col;
        &self.data[n * self.channels..(n + 1) * self.channels]
    }
}

/// Interpolation footprint along one axis.
#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: isize,
    hi: isize,
    frac: f64,
    /// false when the coordinate was clamped, so it has zero derivative
    live: bool,
}

fn clamped_axis(x: f64, len: usize) -> Axis {
    let x = x - 0.5;
    let max = (len - 1) as f64;
    let xc = x.clamp(0.0, max);
    let lo = (xc.floor() as isize).min(len as isize - 1);
    Axis {
        lo,
        hi: (lo + 1).min(len as isize - 1),
        frac: xc - lo as f64,
        live: x > 0.0 && x < max,
    }
}

fn open_axis(x: f64) -> Axis {
    let x = x - 0.5;
    let lo = x.floor();
    Axis {
        lo: lo as isize,
        hi: lo as isize + 1,
        frac: x - lo,
        live: true,
    }
}

/// Bilinear sample at continuous pixel `(u, v)`; coordinates outside the
/// texel-center range are clamped.
pub fn bilinear_sample(map: &ImageFeatureMap, u: f64, v: f64) -> Vec<f64> {
    let mut out = vec![0.0; map.channels];
    bilinear_into(map, u, v, &mut out, None);
    out
}

/// Value plus partial derivatives with respect to `u` and `v`.
pub fn bilinear_sample_grad(map: &ImageFeatureMap, u: f64, v: f64) -> (Vec<f64>, [Vec<f64>; 2]) {
    let d = map.channels;
    let mut out = vec![0.0; d];
    let mut grad = [vec![0.0; d], vec![0.0; d]];
    bilinear_into(map, u, v, &mut out, Some(&mut grad));
    (out, grad)
}

fn bilinear_into(
    map: &ImageFeatureMap,
    u: f64,
    v: f64,
    out: &mut [f64],
    grad: Option<&mut [Vec<f64>; 2]>,
) {
    let ax = clamped_axis(u, map.width);
    let ay = clamped_axis(v, map.height);
    let corners = [
        (ay.lo, ax.lo, (1.0 - ay.frac) * (1.0 - ax.frac)),
        (ay.lo, ax.hi, (1.0 - ay.frac) * ax.frac),
        (ay.hi, ax.lo, ay.frac * (1.0 - ax.frac)),
        (ay.hi, ax.hi, ay.frac * ax.frac),
    ];
    for &(r, c, w) in &corners {
        for (o, t) in out.iter_mut().zip(map.texel(r as usize, c as usize)) {
            *o += w * t;
        }
    }
    if let Some(grad) = grad {
        // d/du of the corner weights, then d/dv
        let du = [-(1.0 - ay.frac), 1.0 - ay.frac, -ay.frac, ay.frac];
        let dv = [-(1.0 - ax.frac), -ax.frac, 1.0 - ax.frac, ax.frac];
        for (n, &(r, c, _)) in corners.iter().enumerate() {
            let texel = map.texel(r as usize, c as usize);
            for (ch, t) in texel.iter().enumerate() {
                if ax.live {
                    grad[0][ch] += du[n] * t;
                }
                if ay.live {
                    grad[1][ch] += dv[n] * t;
                }
            }
        }
    }
}

/// Read policy for volume coordinates outside the cell-center range.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum OutOfRange {
    /// Cells outside the grid read as zero.
    #[default]
    Zeros,
    /// Coordinates clamp to the outermost cell centers.
    Clamp,
}

/// Trilinear sample at continuous grid coordinates `p`.
pub fn trilinear_sample(vol: &DenseVolume, p: [f64; 3], policy: OutOfRange) -> Vec<f64> {
    let mut out = vec![0.0; vol.channels()];
    trilinear_with(vol.spec().dims(), p, policy, |c| Some(vol.features(c)), &mut out, None);
    out
}

/// Value plus partial derivatives with respect to each coordinate of `p`.
pub fn trilinear_sample_grad(
    vol: &DenseVolume,
    p: [f64; 3],
    policy: OutOfRange,
) -> (Vec<f64>, [Vec<f64>; 3]) {
    let d = vol.channels();
    let mut out = vec![0.0; d];
    let mut grad = [vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    trilinear_with(
        vol.spec().dims(),
        p,
        policy,
        |c| Some(vol.features(c)),
        &mut out,
        Some(&mut grad),
    );
    (out, grad)
}

/// Trilinear interpolation over any cell store; `fetch` returning `None`
/// reads as zero.
pub(crate) fn trilinear_with<'a>(
    dims: [usize; 3],
    p: [f64; 3],
    policy: OutOfRange,
    fetch: impl Fn(Coord) -> Option<&'a [f64]>,
    out: &mut [f64],
    mut grad: Option<&mut [Vec<f64>; 3]>,
) {
    let axes: [Axis; 3] = [0, 1, 2].map(|a| match policy {
        OutOfRange::Zeros => open_axis(p[a]),
        OutOfRange::Clamp => clamped_axis(p[a], dims[a]),
    });
    for corner in 0..8 {
        let bits = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
        let mut idx = [0isize; 3];
        let mut w = [0.0; 3];
        for a in 0..3 {
            let ax = axes[a];
            if bits[a] == 1 {
                idx[a] = ax.hi;
                w[a] = ax.frac;
            } else {
                idx[a] = ax.lo;
                w[a] = 1.0 - ax.frac;
            }
        }
        if (0..3).any(|a| idx[a] < 0 || idx[a] >= dims[a] as isize) {
            continue;
        }
        let Some(feats) = fetch(idx.map(|v| v as usize)) else {
            continue;
        };
        let weight = w[0] * w[1] * w[2];
        for (o, f) in out.iter_mut().zip(feats) {
            *o += weight * f;
        }
        if let Some(grad) = grad.as_deref_mut() {
            for a in 0..3 {
                if !axes[a].live {
                    continue;
                }
                let sign = if bits[a] == 1 { 1.0 } else { -1.0 };
                let dw = sign * w[(a + 1) % 3] * w[(a + 2) % 3];
                for (g, f) in grad[a].iter_mut().zip(feats) {
                    *g += dw * f;
                }
            }
        }
    }
}

/// Where a deformable-attention sample reads from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleLocation {
    /// Continuous pixel `(u, v)` in an image feature map.
    Pixel([f64; 2]),
    /// Continuous grid coordinates in a feature volume.
    Grid([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformableSample {
    pub location: SampleLocation,
    pub weight: f64,
}

/// Sampling locations and attention weights of one query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeformableSampleSpec {
    pub samples: Vec<DeformableSample>,
}

impl DeformableSampleSpec {
    pub fn new(samples: Vec<DeformableSample>) -> Result<Self> {
        for s in &samples {
            let finite = match s.location {
                SampleLocation::Pixel(p) => p.iter().all(|v| v.is_finite()),
                SampleLocation::Grid(p) => p.iter().all(|v| v.is_finite()),
            };
            if !finite || !s.weight.is_finite() {
                return Err(invalid("samples", format!("non-finite sample {s:?}")));
            }
        }
        Ok(Self { samples })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum FeatureSource<'a> {
    Image(&'a ImageFeatureMap),
    Volume(&'a DenseVolume, OutOfRange),
}

impl FeatureSource<'_> {
    fn channels(&self) -> usize {
        match self {
            FeatureSource::Image(m) => m.channels(),
            FeatureSource::Volume(v, _) => v.channels(),
        }
    }

    fn sample(&self, loc: SampleLocation) -> Result<Vec<f64>> {
        match (self, loc) {
            (FeatureSource::Image(m), SampleLocation::Pixel([u, v])) => Ok(bilinear_sample(m, u, v)),
            (FeatureSource::Volume(vol, policy), SampleLocation::Grid(p)) => {
                Ok(trilinear_sample(vol, p, *policy))
            }
            (FeatureSource::Image(_), SampleLocation::Grid(_)) => Err(Error::DimensionMismatch(
                "3D sample location against a 2D image source".into(),
            )),
            (FeatureSource::Volume(..), SampleLocation::Pixel(_)) => Err(Error::DimensionMismatch(
                "2D sample location against a 3D volume source".into(),
            )),
        }
    }

    fn sample_grad(&self, loc: SampleLocation) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        match (self, loc) {
            (FeatureSource::Image(m), SampleLocation::Pixel([u, v])) => {
                let (val, g) = bilinear_sample_grad(m, u, v);
                Ok((val, g.to_vec()))
            }
            (FeatureSource::Volume(vol, policy), SampleLocation::Grid(p)) => {
                let (val, g) = trilinear_sample_grad(vol, p, *policy);
                Ok((val, g.to_vec()))
            }
            _ => self.sample(loc).map(|_| unreachable!("mismatch already reported")),
        }
    }
}

/// `sum_m weight_m * sample(source, location_m)`.
pub fn deformable_aggregate(
    query_dim: usize,
    samples: &DeformableSampleSpec,
    source: FeatureSource<'_>,
) -> Result<Vec<f64>> {
    check_query_dim(query_dim, &source)?;
    let mut out = vec![0.0; query_dim];
    for s in &samples.samples {
        for (o, v) in out.iter_mut().zip(source.sample(s.location)?) {
            *o += s.weight * v;
        }
    }
    Ok(out)
}

/// Output of [`deformable_aggregate_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateGrad {
    pub value: Vec<f64>,
    /// d value / d weight_m: the sampled vector at location m.
    pub d_weights: Vec<Vec<f64>>,
    /// d value / d location_m, one D-vector per location coordinate.
    pub d_locations: Vec<Vec<Vec<f64>>>,
}

pub fn deformable_aggregate_grad(
    query_dim: usize,
    samples: &DeformableSampleSpec,
    source: FeatureSource<'_>,
) -> Result<AggregateGrad> {
    check_query_dim(query_dim, &source)?;
    let mut value = vec![0.0; query_dim];
    let mut d_weights = Vec::with_capacity(samples.samples.len());
    let mut d_locations = Vec::with_capacity(samples.samples.len());
    for s in &samples.samples {
        let (sampled, grads) = source.sample_grad(s.location)?;
        for (o, v) in value.iter_mut().zip(&sampled) {
            *o += s.weight * v;
        }
        d_locations.push(
            grads
                .into_iter()
                .map(|g| g.into_iter().map(|x| s.weight * x).collect())
                .collect(),
        );
        d_weights.push(sampled);
    }
    Ok(AggregateGrad {
        value,
        d_weights,
        d_locations,
    })
}

fn check_query_dim(query_dim: usize, source: &FeatureSource<'_>) -> Result<()> {
    if source.channels() != query_dim {
        return Err(Error::DimensionMismatch(format!(
            "query dim {query_dim} vs source channels {}",
            source.channels()
        )));
    }
    Ok(())
}

/// Voxel cross-attention aggregate for one voxel query.
///
/// Every reference point of the query is projected into every camera;
/// invisible (view, point) pairs are skipped. The per-view sums are added and
/// divided by the number of views in which at least one point is visible.
/// Pixel coordinates are rescaled from image size to feature-map size.
/// `weights[n][m]` is the attention weight of point `m` in view `n`.
pub fn vca_aggregate(
    q_index: Coord,
    refs: &ReferencePointSet,
    cams: &[CameraModel],
    feats: &[ImageFeatureMap],
    weights: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if cams.len() != feats.len() || cams.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} cameras, {} feature maps, {} weight sets",
            cams.len(),
            feats.len(),
            weights.len()
        )));
    }
    if !refs.spec().contains(q_index) {
        return Err(invalid("q_index", format!("{q_index:?} outside the reference grid")));
    }
    let points = refs.points(q_index);
    let channels = feats.first().map_or(0, |f| f.channels());
    if feats.iter().any(|f| f.channels() != channels) {
        return Err(Error::DimensionMismatch("feature maps differ in channel count".into()));
    }
    let mut out = vec![0.0; channels];
    let mut hit_views = 0usize;
    for ((cam, map), w) in cams.iter().zip(feats).zip(weights) {
        if w.len() != points.len() {
            return Err(Error::DimensionMismatch(format!(
                "view {} has {} weights for {} reference points",
                cam.view_index(),
                w.len(),
                points.len()
            )));
        }
        let [img_w, img_h] = cam.image_size();
        let (sx, sy) = (map.width() as f64 / img_w as f64, map.height() as f64 / img_h as f64);
        let mut hit = false;
        for (p, &wm) in points.iter().zip(w) {
            let Some(proj) = cam.project_point(*p) else {
                continue;
            };
            hit = true;
            let s = bilinear_sample(map, proj.u * sx, proj.v * sy);
            for (o, v) in out.iter_mut().zip(s) {
                *o += wm * v;
            }
        }
        hit_views += hit as usize;
    }
    if hit_views > 0 {
        for o in &mut out {
            *o /= hit_views as f64;
        }
    }
    Ok(out)
}

/// Central-difference step used by the gradient suite.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]; keeps vanishing gradients from
/// amplifying round-off.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Central finite difference of `f` along each coordinate of `x`.
pub fn numerical_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|n| {
            probe[n] = x[n] + step;
            let plus = f(&probe);
            probe[n] = x[n] - step;
            let minus = f(&probe);
            probe[n] = x[n];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Max relative error between `analytic` and central differences of `f`
/// at `x`. Callers keep `x` away from non-smooth points.
pub fn grad_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], step: f64) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length must match input");
    numerical_gradient(f, x, step)
        .iter()
        .zip(analytic)
        .map(|(&n, &a)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// True when continuous coordinate `x` is within `margin` of an
/// interpolation-cell boundary (a texel/cell center).
pub fn near_cell_boundary(x: f64, margin: f64) -> bool {
    let frac = (x - 0.5).rem_euclid(1.0);
    frac < margin || frac > 1.0 - margin
}
