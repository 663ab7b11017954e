//! Occupancy pruning and coarse-to-fine upsampling, dense and sparse.
//!
//! Upsampling stages apply a supplied per-stage map in place of learned
//! deconvolution weights. A stride-equals-kernel deconvolution is exactly a
//! per-child linear map of the parent cell ([`StageMap::PerChild`]);
//! [`StageMap::Trilinear`] is the default.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::grid::{Coord, DenseVolume, ScoreGrid, SparseVolume, VoxelGridSpec};
use crate::kernels::{trilinear_with, OutOfRange};

/// Keep ratios applied after each of the three upsampling stages.
pub const PAPER_KEEP_RATIOS: [f64; 3] = [0.2, 0.5, 0.5];

/// How fine cells get their features from the coarse grid.
#[derive(Debug, Clone, PartialEq)]
pub enum StageMap {
    /// Trilinear interpolation of the coarse volume at the fine cell center,
    /// clamped at the grid border. Absent sparse cells read as zero.
    Trilinear,
    /// Copy the parent cell's features.
    Copy,
    /// One `D_in x D_out` matrix per child offset, children ordered
    /// lexicographically by `(di, dj, dk)`.
    PerChild(Vec<DMatrix<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpsampleStage {
    pub factors: [usize; 3],
    pub map: StageMap,
}

impl UpsampleStage {
    pub fn trilinear(factors: [usize; 3]) -> Self {
        Self {
            factors,
            map: StageMap::Trilinear,
        }
    }

    fn validate(&self, in_channels: usize) -> Result<usize> {
        if self.factors.contains(&0) {
            return Err(invalid("factors", format!("must be >= 1, got {:?}", self.factors)));
        }
        match &self.map {
            StageMap::Trilinear | StageMap::Copy => Ok(in_channels),
            StageMap::PerChild(maps) => {
                let children = self.factors.iter().product::<usize>();
                if maps.len() != children {
                    return Err(Error::DimensionMismatch(format!(
                        "{} child maps for factors {:?} ({children} children)",
                        maps.len(),
                        self.factors
                    )));
                }
                let out = maps[0].ncols();
                if out == 0 || maps.iter().any(|m| m.nrows() != in_channels || m.ncols() != out) {
                    return Err(Error::DimensionMismatch(format!(
                        "child maps must all be {in_channels}x{out}"
                    )));
                }
                Ok(out)
            }
        }
    }
}

/// Three stages totalling 4x in H and W and 2x in Z.
pub fn paper_stages() -> Vec<UpsampleStage> {
    vec![
        UpsampleStage::trilinear([2, 2, 2]),
        UpsampleStage::trilinear([2, 2, 1]),
        UpsampleStage::trilinear([1, 1, 1]),
    ]
}

/// Three stages totalling 2x on every axis.
pub fn tiny_stages() -> Vec<UpsampleStage> {
    vec![
        UpsampleStage::trilinear([2, 2, 2]),
        UpsampleStage::trilinear([1, 1, 1]),
        UpsampleStage::trilinear([1, 1, 1]),
    ]
}

/// `ceil(ratio * candidates)`. Products within 1e-9 (relative) of an
/// integer are snapped first so that e.g. `0.2 * 3200` gives 640, not 641.
pub fn keep_count(ratio: f64, candidates: usize) -> usize {
    let x = ratio * candidates as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(invalid("keep_ratio", format!("{ratio} outside (0, 1]")))
    }
}

/// Indices of the `n` best candidates: highest score first, lower
/// coordinate winning ties. Returned in ascending coordinate order.
fn top_n(coords: &[Coord], scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..coords.len()).collect();
    let better = |a: &usize, b: &usize| {
        scores[*b]
            .total_cmp(&scores[*a])
            .then_with(|| coords[*a].cmp(&coords[*b]))
    };
    if n < order.len() {
        order.select_nth_unstable_by(n, better);
        order.truncate(n);
    }
    order.sort_unstable_by_key(|&i| coords[i]);
    order
}

/// Keeps `ceil(ratio * H*W*Z)` cells of a dense volume.
pub fn prune_topk_dense(vol: &DenseVolume, scores: &ScoreGrid, keep_ratio: f64) -> Result<SparseVolume> {
    check_ratio(keep_ratio)?;
    vol.spec().check_same(scores.spec(), "volume and scores")?;
    let spec = *vol.spec();
    let coords: Vec<Coord> = spec.coords().collect();
    let keep = top_n(&coords, scores.values(), keep_count(keep_ratio, coords.len()));
    gather(spec, vol.channels(), &keep, |n| (coords[n], vol.features_linear(n)))
}

/// Keeps `ceil(ratio * N)` of the `N` entries of a sparse volume.
pub fn prune_topk_sparse(sv: &SparseVolume, scores: &ScoreGrid, keep_ratio: f64) -> Result<SparseVolume> {
    check_ratio(keep_ratio)?;
    sv.spec().check_same(scores.spec(), "volume and scores")?;
    let s: Vec<f64> = sv.coords().iter().map(|&c| scores.get(c)).collect();
    prune_sparse_by(sv, &s, keep_ratio)
}

fn prune_sparse_by(sv: &SparseVolume, scores: &[f64], keep_ratio: f64) -> Result<SparseVolume> {
    let keep = top_n(sv.coords(), scores, keep_count(keep_ratio, sv.len()));
    gather(*sv.spec(), sv.channels(), &keep, |n| sv.entry(n))
}

fn gather<'a>(
    spec: VoxelGridSpec,
    channels: usize,
    keep: &[usize],
    entry: impl Fn(usize) -> (Coord, &'a [f64]),
) -> Result<SparseVolume> {
    let mut coords = Vec::with_capacity(keep.len());
    let mut feats = Vec::with_capacity(keep.len() * channels);
    for &n in keep {
        let (c, f) = entry(n);
        coords.push(c);
        feats.extend_from_slice(f);
    }
    SparseVolume::new(spec, channels, coords, feats)
}

/// Features of one fine cell; `fetch` reads coarse cells.
fn upsample_cell<'a>(
    coarse_dims: [usize; 3],
    stage: &UpsampleStage,
    fine: Coord,
    fetch: impl Fn(Coord) -> Option<&'a [f64]>,
    out: &mut [f64],
) {
    let f = stage.factors;
    let parent = [0, 1, 2].map(|a| fine[a] / f[a]);
    match &stage.map {
        StageMap::Trilinear => {
            let p = [0, 1, 2].map(|a| (fine[a] as f64 + 0.5) / f[a] as f64);
            trilinear_with(coarse_dims, p, OutOfRange::Clamp, fetch, out, None);
        }
        StageMap::Copy => {
            if let Some(x) = fetch(parent) {
                out.copy_from_slice(x);
            }
        }
        StageMap::PerChild(maps) => {
            if let Some(x) = fetch(parent) {
                let child = [0, 1, 2].map(|a| fine[a] % f[a]);
                let m = &maps[(child[0] * f[1] + child[1]) * f[2] + child[2]];
                for (c, o) in out.iter_mut().enumerate() {
                    *o = x.iter().enumerate().map(|(r, v)| v * m[(r, c)]).sum();
                }
            }
        }
    }
}

/// Dense chain of upsampling stages.
pub fn coarse_to_fine(vol: &DenseVolume, stages: &[UpsampleStage]) -> Result<DenseVolume> {
    if stages.is_empty() {
        return Err(invalid("stages", "need at least one stage"));
    }
    let mut cur = vol.clone();
    for stage in stages {
        let out_d = stage.validate(cur.channels())?;
        let coarse = *cur.spec();
        let fine = coarse.upsampled(stage.factors)?;
        let mut data = vec![0.0; fine.num_cells() * out_d];
        data.par_chunks_mut(out_d).enumerate().for_each(|(n, out)| {
            upsample_cell(coarse.dims(), stage, fine.unravel(n), |c| Some(cur.features(c)), out);
        });
        cur = DenseVolume::new(fine, out_d, data)?;
    }
    Ok(cur)
}

/// Dilates every entry into all of its children on the upsampled grid.
pub fn sparse_upsample(sv: &SparseVolume, stage: &UpsampleStage) -> Result<SparseVolume> {
    let out_d = stage.validate(sv.channels())?;
    let coarse = *sv.spec();
    let fine = coarse.upsampled(stage.factors)?;
    let f = stage.factors;
    let mut coords: Vec<Coord> = Vec::with_capacity(sv.len() * f.iter().product::<usize>());
    for &p in sv.coords() {
        for a in 0..f[0] {
            for b in 0..f[1] {
                for c in 0..f[2] {
                    coords.push([p[0] * f[0] + a, p[1] * f[1] + b, p[2] * f[2] + c]);
                }
            }
        }
    }
    coords.sort_unstable();
    let mut feats = vec![0.0; coords.len() * out_d];
    feats
        .par_chunks_mut(out_d)
        .zip(coords.par_iter())
        .for_each(|(out, &c)| upsample_cell(coarse.dims(), stage, c, |q| sv.get(q), out));
    SparseVolume::new(fine, out_d, coords, feats)
}

/// Where pruning scores come from at a given stage.
#[derive(Debug, Clone, PartialEq)]
pub enum StageScores {
    /// Supplied per-cell scores on that stage's grid.
    Grid(ScoreGrid),
    /// Squared L2 norm of each cell's features.
    FeatureNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseStage {
    pub upsample: UpsampleStage,
    pub scores: StageScores,
    pub keep_ratio: f64,
}

/// Prune of the input volume followed by upsample-then-prune stages.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSchedule {
    pub initial_keep: f64,
    pub initial_scores: StageScores,
    pub stages: Vec<SparseStage>,
}

impl SparseSchedule {
    /// No initial prune; `ratios[s]` applied after upsample stage `s`,
    /// scoring by feature norm.
    pub fn with_ratios(stages: Vec<UpsampleStage>, ratios: &[f64]) -> Result<Self> {
        if stages.len() != ratios.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} stages but {} keep ratios",
                stages.len(),
                ratios.len()
            )));
        }
        Ok(Self {
            initial_keep: 1.0,
            initial_scores: StageScores::FeatureNorm,
            stages: stages
                .into_iter()
                .zip(ratios)
                .map(|(upsample, &keep_ratio)| SparseStage {
                    upsample,
                    scores: StageScores::FeatureNorm,
                    keep_ratio,
                })
                .collect(),
        })
    }
}

/// Result of [`sparse_coarse_to_fine`] with per-stage bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOutput {
    pub volume: SparseVolume,
    /// Candidates considered by each prune, initial prune first.
    pub candidates: Vec<usize>,
    /// Cells kept by each prune, initial prune first.
    pub kept: Vec<usize>,
}

impl SparseOutput {
    /// Kept cells as a fraction of the final dense grid.
    pub fn sparsity(&self) -> f64 {
        self.volume.len() as f64 / self.volume.spec().num_cells() as f64
    }
}

fn norm_scores(sv: &SparseVolume) -> Vec<f64> {
    sv.iter().map(|(_, f)| f.iter().map(|v| v * v).sum()).collect()
}

fn prune_stage(sv: &SparseVolume, scores: &StageScores, ratio: f64) -> Result<SparseVolume> {
    check_ratio(ratio)?;
    match scores {
        StageScores::Grid(g) => prune_topk_sparse(sv, g, ratio),
        StageScores::FeatureNorm => prune_sparse_by(sv, &norm_scores(sv), ratio),
    }
}

/// Alternating prune / sparse upsample: prune the input, then for each stage
/// dilate every kept cell into its children and prune again.
pub fn sparse_coarse_to_fine(vol: &DenseVolume, schedule: &SparseSchedule) -> Result<SparseOutput> {
    if schedule.stages.is_empty() {
        return Err(invalid("stages", "need at least one stage"));
    }
    let all = SparseVolume::new(
        *vol.spec(),
        vol.channels(),
        vol.spec().coords().collect(),
        vol.data().to_vec(),
    )?;
    let mut candidates = vec![all.len()];
    let mut cur = prune_stage(&all, &schedule.initial_scores, schedule.initial_keep)?;
    let mut kept = vec![cur.len()];
    for stage in &schedule.stages {
        let up = sparse_upsample(&cur, &stage.upsample)?;
        candidates.push(up.len());
        cur = prune_stage(&up, &stage.scores, stage.keep_ratio)?;
        kept.push(cur.len());
    }
    Ok(SparseOutput {
        volume: cur,
        candidates,
        kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::densify;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(dims: [usize; 3]) -> VoxelGridSpec {
        VoxelGridSpec::new(dims, [0.0; 3], [1.0; 3]).unwrap()
    }

    fn random_volume(spec: VoxelGridSpec, d: usize, seed: u64) -> DenseVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseVolume::from_fn(spec, d, |_, f| f.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0)))
            .unwrap()
    }

    #[test]
    fn keep_count_snaps_exact_products() {
        assert_eq!(keep_count(0.2, 3200), 640);
        assert_eq!(keep_count(0.2, 10), 2);
        assert_eq!(keep_count(0.2, 11), 3);
        assert_eq!(keep_count(1.0, 7), 7);
        assert_eq!(keep_count(1e-6, 5), 1);
    }

    #[test]
    fn prune_examples() {
        let spec = unit([10, 1, 1]);
        let vol = random_volume(spec, 2, 1);
        let scores = ScoreGrid::new(spec, vec![0.3, 0.9, 0.1, 0.5, 0.95, 0.2, 0.0, 0.4, 0.6, 0.7]).unwrap();
        let all = prune_topk_dense(&vol, &scores, 1.0).unwrap();
        assert_eq!(all.len(), 10);
        let top = prune_topk_dense(&vol, &scores, 0.2).unwrap();
        assert_eq!(top.coords(), &[[1, 0, 0], [4, 0, 0]]);
        assert_eq!(top.entry(1).1, vol.features([4, 0, 0]));
        assert!(prune_topk_dense(&vol, &scores, 0.0).is_err());
        assert!(prune_topk_dense(&vol, &scores, 1.5).is_err());
    }

    #[test]
    fn ties_prefer_lower_coordinates() {
        let spec = unit([2, 2, 1]);
        let vol = random_volume(spec, 1, 2);
        let scores = ScoreGrid::new(spec, vec![1.0; 4]).unwrap();
        let top = prune_topk_dense(&vol, &scores, 0.5).unwrap();
        assert_eq!(top.coords(), &[[0, 0, 0], [0, 1, 0]]);
    }

    #[test]
    fn upsample_identity_and_children() {
        let spec = VoxelGridSpec::new([3, 2, 2], [-1.0, 2.0, 0.0], [0.5, 1.0, 2.0]).unwrap();
        let vol = random_volume(spec, 2, 3);
        let sv = crate::grid::sparsify_nonzero(&vol);
        let same = sparse_upsample(&sv, &UpsampleStage { factors: [1, 1, 1], map: StageMap::Copy }).unwrap();
        assert_eq!(same, sv);

        let one = SparseVolume::new(spec, 1, vec![[1, 0, 1]], vec![2.0]).unwrap();
        let up = sparse_upsample(&one, &UpsampleStage { factors: [2, 2, 2], map: StageMap::Copy }).unwrap();
        assert_eq!(up.len(), 8);
        let fine = up.spec();
        let parent_lo = [-0.5, 2.0, 2.0];
        let parent_hi = [0.0, 3.0, 4.0];
        let mut lo = [f64::MAX; 3];
        let mut hi = [f64::MIN; 3];
        let mut volume = 0.0;
        for &c in up.coords() {
            let cell = fine.cell_size();
            let center = fine.index_to_center(c).unwrap();
            for a in 0..3 {
                lo[a] = lo[a].min(center[a] - cell[a] / 2.0);
                hi[a] = hi[a].max(center[a] + cell[a] / 2.0);
            }
            volume += cell.iter().product::<f64>();
        }
        for a in 0..3 {
            assert!((lo[a] - parent_lo[a]).abs() < 1e-12 && (hi[a] - parent_hi[a]).abs() < 1e-12);
        }
        assert!((volume - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adjacent_parents_never_share_children() {
        let spec = unit([2, 1, 1]);
        let sv = SparseVolume::new(spec, 1, vec![[0, 0, 0], [1, 0, 0]], vec![1.0, 2.0]).unwrap();
        let up = sparse_upsample(&sv, &UpsampleStage::trilinear([3, 2, 2])).unwrap();
        assert_eq!(up.len(), 24);
    }

    #[test]
    fn coarse_to_fine_examples() {
        let vol = DenseVolume::new(VoxelGridSpec::paper_queries(), 1, vec![1.25; 40_000]).unwrap();
        let out = coarse_to_fine(&vol, &paper_stages()).unwrap();
        assert_eq!(out.spec().dims(), [200, 200, 32]);
        assert!(out.data().iter().all(|&v| (v - 1.25).abs() < 1e-12));

        let small = random_volume(unit([3, 2, 2]), 2, 5);
        let same = coarse_to_fine(&small, &[UpsampleStage::trilinear([1, 1, 1])]).unwrap();
        assert_eq!(same, small);
        assert!(coarse_to_fine(&small, &[]).is_err());
    }

    #[test]
    fn per_child_maps_are_checked() {
        let small = random_volume(unit([2, 2, 2]), 2, 6);
        let bad = UpsampleStage { factors: [2, 1, 1], map: StageMap::PerChild(vec![DMatrix::identity(2, 2)]) };
        assert!(matches!(coarse_to_fine(&small, &[bad]), Err(Error::DimensionMismatch(_))));
        let good = UpsampleStage {
            factors: [2, 1, 1],
            map: StageMap::PerChild(vec![DMatrix::identity(2, 2), DMatrix::from_element(2, 3, 1.0)
                .columns(0, 2).into_owned()]),
        };
        let out = coarse_to_fine(&small, &[good]).unwrap();
        assert_eq!(out.features([0, 1, 1]), small.features([0, 1, 1]));
        let x = small.features([0, 1, 1]);
        assert_eq!(out.features([1, 1, 1]), &[x[0] + x[1], x[0] + x[1]]);
    }

    #[test]
    fn sparse_with_full_ratios_matches_dense_bitwise() {
        let spec = unit([3, 4, 2]);
        let vol = random_volume(spec, 3, 7);
        for stages in [
            vec![UpsampleStage::trilinear([2, 2, 2]), UpsampleStage::trilinear([1, 2, 1])],
            vec![
                UpsampleStage { factors: [2, 1, 2], map: StageMap::Copy },
                UpsampleStage::trilinear([1, 1, 2]),
            ],
        ] {
            let dense = coarse_to_fine(&vol, &stages).unwrap();
            let sched = SparseSchedule::with_ratios(stages, &[1.0, 1.0]).unwrap();
            let sparse = sparse_coarse_to_fine(&vol, &sched).unwrap();
            assert_eq!(densify(&sparse.volume), dense);
        }
    }

    #[test]
    fn paper_ratios_keep_five_percent() {
        let vol = random_volume(unit([20, 20, 8]), 2, 8);
        let sched = SparseSchedule::with_ratios(tiny_stages(), &PAPER_KEEP_RATIOS).unwrap();
        let out = sparse_coarse_to_fine(&vol, &sched).unwrap();
        assert_eq!(out.kept, vec![3200, 5120, 2560, 1280]);
        assert_eq!(out.volume.spec().num_cells(), 25_600);
        assert_eq!(out.volume.len() * 20, out.volume.spec().num_cells());
        assert!(SparseSchedule::with_ratios(tiny_stages(), &[0.5]).is_err());
    }

    #[test]
    fn supplied_scores_drive_pruning() {
        let spec = unit([2, 2, 2]);
        let vol = random_volume(spec, 1, 9);
        let fine = spec.upsampled([2, 1, 1]).unwrap();
        let scores = ScoreGrid::from_fn(fine, |c| if c == [3, 1, 1] { 10.0 } else { 0.0 }).unwrap();
        let sched = SparseSchedule {
            initial_keep: 1.0,
            initial_scores: StageScores::FeatureNorm,
            stages: vec![SparseStage {
                upsample: UpsampleStage::trilinear([2, 1, 1]),
                scores: StageScores::Grid(scores),
                keep_ratio: 1.0 / 16.0,
            }],
        };
        let out = sparse_coarse_to_fine(&vol, &sched).unwrap();
        assert_eq!(out.volume.coords(), &[[3, 1, 1]]);
    }

    proptest! {
        #[test]
        fn prune_matches_sort_oracle(
            dims in (1usize..6, 1usize..6, 1usize..6),
            ratio in 0.001f64..=1.0,
            seed in 0u64..10_000,
        ) {
            let spec = unit([dims.0, dims.1, dims.2]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse scores so ties are common
            let scores = ScoreGrid::from_fn(spec, |_| rng.gen_range(0..4) as f64).unwrap();
            let vol = random_volume(spec, 1, seed);
            let out = prune_topk_dense(&vol, &scores, ratio).unwrap();
            let n = spec.num_cells();
            prop_assert_eq!(out.len(), (ratio * n as f64 - 1e-9 * (ratio * n as f64).max(1.0)).ceil() as usize);

            let mut oracle: Vec<Coord> = spec.coords().collect();
            oracle.sort_by(|a, b| scores.get(*b).partial_cmp(&scores.get(*a)).unwrap().then(a.cmp(b)));
            let mut expect: Vec<Coord> = oracle[..out.len()].to_vec();
            expect.sort();
            prop_assert_eq!(out.coords(), &expect[..]);
        }
    }
}
