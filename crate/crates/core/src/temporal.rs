//! Aligning history feature volumes into the current ego frame and fusing
//! them with the current volume.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::grid::DenseVolume;
use crate::kernels::{trilinear_with, OutOfRange};

/// Resamples `history` onto the current grid.
///
/// For each current voxel center `g`, reads the history volume at
/// `t_cur_to_hist * g` by trilinear interpolation; reads outside the history
/// grid are zero. Input and output share the same grid spec.
pub fn align_volume(history: &DenseVolume, t_cur_to_hist: &Pose) -> DenseVolume {
    let spec = *history.spec();
    let d = history.channels();
    let dims = spec.dims();
    let mut data = vec![0.0; spec.num_cells() * d];
    data.par_chunks_mut(d).enumerate().for_each(|(n, out)| {
        let g = spec.center(spec.unravel(n));
        let p = spec.world_to_continuous(t_cur_to_hist.transform_point(g));
        trilinear_with(
            dims,
            p,
            OutOfRange::Zeros,
            |c| Some(history.features(c)),
            out,
            None,
        );
    });
    DenseVolume::new(spec, d, data).expect("interpolated finite values")
}

/// Channel concatenation `[oldest, ..., newest, current]`; `aligned_history`
/// is ordered oldest first.
pub fn fuse_concat(current: &DenseVolume, aligned_history: &[DenseVolume]) -> Result<DenseVolume> {
    let d = current.channels();
    for h in aligned_history {
        current.spec().check_same(h.spec(), "history and current volumes")?;
        if h.channels() != d {
            return Err(Error::DimensionMismatch(format!(
                "history has {} channels, current has {d}",
                h.channels()
            )));
        }
    }
    let frames: Vec<&DenseVolume> = aligned_history.iter().chain([current]).collect();
    let out_d = frames.len() * d;
    let cells = current.spec().num_cells();
    let mut data = Vec::with_capacity(cells * out_d);
    for n in 0..cells {
        for f in &frames {
            data.extend_from_slice(f.features_linear(n));
        }
    }
    DenseVolume::new(*current.spec(), out_d, data)
}

/// Channels `[frame * d, (frame + 1) * d)` of a concatenated volume.
pub fn extract_frame(concat: &DenseVolume, frame: usize, d: usize) -> Result<DenseVolume> {
    if d == 0 || !concat.channels().is_multiple_of(d) || (frame + 1) * d > concat.channels() {
        return Err(Error::DimensionMismatch(format!(
            "frame {frame} of width {d} in {} channels",
            concat.channels()
        )));
    }
    let cells = concat.spec().num_cells();
    let mut data = Vec::with_capacity(cells * d);
    for n in 0..cells {
        data.extend_from_slice(&concat.features_linear(n)[frame * d..(frame + 1) * d]);
    }
    DenseVolume::new(*concat.spec(), d, data)
}

/// Per-voxel product `x^T * mix`, with `mix` of shape `in_channels x out`.
pub fn linear_fuse(concat: &DenseVolume, mix: &DMatrix<f64>) -> Result<DenseVolume> {
    if mix.nrows() != concat.channels() || mix.ncols() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "mix is {}x{}, volume has {} channels",
            mix.nrows(),
            mix.ncols(),
            concat.channels()
        )));
    }
    if mix.iter().any(|v| !v.is_finite()) {
        return Err(Error::DimensionMismatch("mix has non-finite entries".into()));
    }
    let (din, dout) = (mix.nrows(), mix.ncols());
    let mut data = vec![0.0; concat.spec().num_cells() * dout];
    data.par_chunks_mut(dout).enumerate().for_each(|(n, out)| {
        let x = concat.features_linear(n);
        for (c, o) in out.iter_mut().enumerate() {
            *o = (0..din).map(|r| x[r] * mix[(r, c)]).sum();
        }
    });
    DenseVolume::new(*concat.spec(), dout, data)
}

/// Mix that passes the last (current) frame through unchanged.
pub fn current_frame_mix(frames: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(frames * d, d, |r, c| {
        if r == (frames - 1) * d + c {
            1.0
        } else {
            0.0
        }
    })
}

/// Mix that averages the frames channel-wise.
pub fn average_mix(frames: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(frames * d, d, |r, c| {
        if r % d == c {
            1.0 / frames as f64
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VoxelGridSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn spec() -> VoxelGridSpec {
        VoxelGridSpec::new([6, 5, 4], [-3.0, -2.5, -1.0], [1.0, 1.0, 0.5]).unwrap()
    }

    fn random_volume(seed: u64, d: usize) -> DenseVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseVolume::from_fn(spec(), d, |_, f| f.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0)))
            .unwrap()
    }

    #[test]
    fn identity_alignment() {
        let vol = random_volume(1, 3);
        let out = align_volume(&vol, &Pose::identity("ego"));
        for (a, b) in out.data().iter().zip(vol.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn one_cell_shift() {
        let vol = random_volume(2, 2);
        let t = Pose::from_yaw_translation(0.0, [1.0, 0.0, 0.0], "cur", "hist");
        let out = align_volume(&vol, &t);
        let [h, w, z] = spec().dims();
        for i in 0..h {
            for j in 0..w {
                for k in 0..z {
                    let got = out.features([i, j, k]);
                    if i + 1 < h {
                        let want = vol.features([i + 1, j, k]);
                        for (a, b) in got.iter().zip(want) {
                            assert!((a - b).abs() < 1e-12);
                        }
                    } else {
                        assert!(got.iter().all(|&v| v == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn half_turn_of_symmetric_volume() {
        // symmetric under (x, y) -> (-x, -y) about the grid center
        let spec = VoxelGridSpec::new([6, 4, 3], [-3.0, -2.0, 0.0], [1.0; 3]).unwrap();
        let vol = DenseVolume::from_fn(spec, 1, |idx, f| {
            let c = spec.index_to_center(idx).unwrap();
            f[0] = c[0] * c[0] + 2.0 * c[1] * c[1] + c[2] + (c[0] * c[1]).cos();
        })
        .unwrap();
        let rot = Pose::from_yaw_translation(PI, [0.0; 3], "cur", "hist");
        let out = align_volume(&vol, &rot);
        for (a, b) in out.data().iter().zip(vol.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn fuse_concat_examples() {
        let cur = random_volume(3, 4);
        assert_eq!(fuse_concat(&cur, &[]).unwrap(), cur);
        let hist: Vec<_> = (0..3).map(|s| random_volume(10 + s, 4)).collect();
        let fused = fuse_concat(&cur, &hist).unwrap();
        assert_eq!(fused.channels(), 16);
        for (n, h) in hist.iter().enumerate() {
            assert_eq!(&extract_frame(&fused, n, 4).unwrap(), h);
        }
        assert_eq!(extract_frame(&fused, 3, 4).unwrap(), cur);
        assert!(fuse_concat(&cur, &[random_volume(4, 3)]).is_err());
    }

    #[test]
    fn linear_fuse_examples() {
        let cur = random_volume(5, 2);
        let hist = vec![random_volume(6, 2), random_volume(7, 2)];
        let fused = fuse_concat(&cur, &hist).unwrap();
        assert_eq!(linear_fuse(&fused, &current_frame_mix(3, 2)).unwrap(), cur);
        let same = fuse_concat(&cur, &[cur.clone(), cur.clone()]).unwrap();
        let avg = linear_fuse(&same, &average_mix(3, 2)).unwrap();
        for (a, b) in avg.data().iter().zip(cur.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(linear_fuse(&fused, &DMatrix::zeros(5, 2)).is_err());
    }

    proptest! {
        #[test]
        fn linear_fuse_is_linear(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mix = DMatrix::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0));
            let a = random_volume(seed, 6);
            let b = random_volume(seed + 1, 6);
            let sum = DenseVolume::new(
                *a.spec(), 6, a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
            ).unwrap();
            let fa = linear_fuse(&a, &mix).unwrap();
            let fb = linear_fuse(&b, &mix).unwrap();
            let fs = linear_fuse(&sum, &mix).unwrap();
            for n in 0..fs.data().len() {
                prop_assert!((fs.data()[n] - fa.data()[n] - fb.data()[n]).abs() < 1e-12);
            }
        }

        #[test]
        fn alignment_is_linear_in_features(seed in 0u64..1000, yaw in -0.5f64..0.5) {
            let t = Pose::from_yaw_translation(yaw, [0.3, -0.7, 0.1], "cur", "hist");
            let a = random_volume(seed, 2);
            let b = random_volume(seed + 7, 2);
            let sum = DenseVolume::new(
                *a.spec(), 2, a.data().iter().zip(b.data()).map(|(x, y)| 2.0 * x - y).collect(),
            ).unwrap();
            let (fa, fb, fs) = (align_volume(&a, &t), align_volume(&b, &t), align_volume(&sum, &t));
            for n in 0..fs.data().len() {
                prop_assert!((fs.data()[n] - 2.0 * fa.data()[n] + fb.data()[n]).abs() < 1e-12);
            }
        }
    }
}
