//! Sparse voxel grids over point clouds and inverse-distance devoxelization.

use std::collections::HashMap;

use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};

pub const DEFAULT_VOXEL_SIZE: f64 = 0.08;
/// Voxels interpolated per point during devoxelization.
pub const DEFAULT_K: usize = 3;
/// Below this distance a point takes its nearest voxel's feature verbatim.
pub const SINGULAR_DISTANCE: f64 = 1e-9;
/// Channels produced by [`initial_voxel_features`].
pub const INPUT_CHANNELS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VoxelError {
    #[error("voxel size must be positive, got {0}")]
    BadVoxelSize(f64),
    #[error("point {0} has non-finite coordinates")]
    NonFinite(usize),
    #[error("grid has no voxels")]
    Empty,
    #[error("K must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Coord = [i32; 3];

#[derive(Clone, Debug)]
pub struct VoxelGrid {
    voxel_size: f64,
    /// Occupied cells in order of first appearance.
    coords: Vec<Coord>,
    index: HashMap<Coord, usize>,
    members: Vec<Vec<usize>>,
    centers: Vec<[f64; 3]>,
}

pub fn cell_of(p: &[f64; 3], voxel_size: f64) -> Coord {
    p.map(|v| (v / voxel_size).floor() as i32)
}

impl VoxelGrid {
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn centers(&self) -> &[[f64; 3]] {
        &self.centers
    }

    pub fn members(&self, v: usize) -> &[usize] {
        &self.members[v]
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn lookup(&self, c: &Coord) -> Option<usize> {
        self.index.get(c).copied()
    }
}

/// Bins points by `floor(p / voxel_size)`.
pub fn voxelize(points: &[[f64; 3]], voxel_size: f64) -> Result<VoxelGrid, VoxelError> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(VoxelError::BadVoxelSize(voxel_size));
    }
    let mut grid = VoxelGrid {
        voxel_size,
        coords: Vec::new(),
        index: HashMap::new(),
        members: Vec::new(),
        centers: Vec::new(),
    };
    for (i, p) in points.iter().enumerate() {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(VoxelError::NonFinite(i));
        }
        let c = cell_of(p, voxel_size);
        let v = *grid.index.entry(c).or_insert_with(|| {
            grid.coords.push(c);
            grid.members.push(Vec::new());
            grid.centers.push(c.map(|k| (k as f64 + 0.5) * voxel_size));
            grid.coords.len() - 1
        });
        grid.members[v].push(i);
    }
    Ok(grid)
}

/// Per voxel: `[count / max_count, mean offset from center / voxel_size]`.
pub fn initial_voxel_features(grid: &VoxelGrid, points: &[[f64; 3]]) -> Tensor {
    let max_count = grid.members.iter().map(Vec::len).max().unwrap_or(1).max(1) as f64;
    let mut data = Vec::with_capacity(grid.len() * INPUT_CHANNELS);
    for (members, center) in grid.members.iter().zip(&grid.centers) {
        let n = members.len() as f64;
        data.push(n / max_count);
        for k in 0..3 {
            let mean = members.iter().map(|&i| points[i][k] - center[k]).sum::<f64>() / n;
            data.push(mean / grid.voxel_size);
        }
    }
    Tensor::raw(vec![grid.len(), INPUT_CHANNELS], data)
}

fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// The `k` nearest voxel centers to `p` with their distances; ties are broken
/// by lexicographic voxel coordinate.
pub fn knn_voxels(grid: &VoxelGrid, p: &[f64; 3], k: usize) -> Result<Vec<(usize, f64)>, VoxelError> {
    if grid.is_empty() {
        return Err(VoxelError::Empty);
    }
    if k == 0 {
        return Err(VoxelError::ZeroK);
    }
    let mut cand: Vec<(f64, usize)> = grid
        .centers
        .iter()
        .enumerate()
        .map(|(v, c)| (d2(p, c), v))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.total_cmp(&b.0)
            .then_with(|| grid.coords[a.1].cmp(&grid.coords[b.1]))
    };
    let take = k.min(cand.len());
    if take < cand.len() {
        cand.select_nth_unstable_by(take - 1, cmp);
        cand.truncate(take);
    }
    cand.sort_by(cmp);
    Ok(cand.into_iter().map(|(d, v)| (v, d.sqrt())).collect())
}

/// Interpolation stencil: for every point, `(voxel, weight)` pairs whose
/// weights are nonnegative and sum to one.
pub fn devox_weights(
    grid: &VoxelGrid,
    points: &[[f64; 3]],
    k: usize,
) -> Result<Vec<Vec<(usize, f64)>>, VoxelError> {
    points
        .iter()
        .map(|p| {
            let nn = knn_voxels(grid, p, k)?;
            if nn[0].1 < SINGULAR_DISTANCE {
                return Ok(vec![(nn[0].0, 1.0)]);
            }
            let total: f64 = nn.iter().map(|&(_, d)| 1.0 / d).sum();
            Ok(nn.iter().map(|&(v, d)| (v, (1.0 / d) / total)).collect())
        })
        .collect()
}

/// Inverse-distance weighted features at each point, differentiable in
/// `voxel_features`.
pub fn devoxelize(
    tape: &mut Tape,
    grid: &VoxelGrid,
    voxel_features: &Tensor,
    points: &[[f64; 3]],
    k: usize,
) -> Result<Tensor, VoxelError> {
    if voxel_features.rows() != grid.len() || voxel_features.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "devoxelize",
            lhs: voxel_features.shape().to_vec(),
            rhs: vec![grid.len()],
        }
        .into());
    }
    let stencil = devox_weights(grid, points, k)?;
    apply_stencil(tape, &stencil, voxel_features)
}

/// `out[i] = sum_k w_ik * features[v_ik]`.
pub fn apply_stencil(
    tape: &mut Tape,
    stencil: &[Vec<(usize, f64)>],
    features: &Tensor,
) -> Result<Tensor, VoxelError> {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut w = Vec::new();
    for (i, row) in stencil.iter().enumerate() {
        for &(v, wk) in row {
            src.push(v);
            dst.push(i);
            w.push(wk);
        }
    }
    let gathered = tape.gather_rows(features, src)?;
    let weights = Tensor::raw(vec![w.len(), 1], w);
    let weighted = tape.mul_col(&gathered, &weights)?;
    Ok(tape.scatter_add_rows(&weighted, dst, stencil.len())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_bin_and_negative_floor() {
        let g = voxelize(&[[0.01, 0.01, 0.01], [0.07, 0.07, 0.07], [-0.01, 0.0, 0.0]], 0.08).unwrap();
        assert_eq!(g.coords(), &[[0, 0, 0], [-1, 0, 0]]);
        assert_eq!(g.members(0), &[0, 1]);
        assert_eq!(g.members(1), &[2]);
        assert_eq!(DEFAULT_VOXEL_SIZE, 0.08);
    }

    #[test]
    fn voxelize_rejects_bad_input() {
        assert_eq!(voxelize(&[[0.0; 3]], 0.0).unwrap_err(), VoxelError::BadVoxelSize(0.0));
        assert_eq!(
            voxelize(&[[0.0; 3], [f64::NAN, 0.0, 0.0]], 0.1).unwrap_err(),
            VoxelError::NonFinite(1)
        );
    }

    #[test]
    fn centered_point_has_zero_offset() {
        let pts = [[0.04, 0.04, 0.04]];
        let g = voxelize(&pts, 0.08).unwrap();
        let f = initial_voxel_features(&g, &pts);
        assert_eq!(f.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn symmetric_points_average_to_center() {
        let pts = [[0.06, 0.04, 0.04], [0.02, 0.04, 0.04], [0.5, 0.5, 0.5]];
        let g = voxelize(&pts, 0.08).unwrap();
        let f = initial_voxel_features(&g, &pts);
        assert_eq!(f.row(0)[0], 1.0);
        assert!(f.row(0)[1..].iter().all(|v| v.abs() < 1e-12));
        // second voxel holds one of two max points
        assert_eq!(f.row(1)[0], 0.5);
    }

    #[test]
    fn knn_single_voxel_and_exact_center() {
        let g = voxelize(&[[0.04, 0.04, 0.04]], 0.08).unwrap();
        let nn = knn_voxels(&g, &[3.0, 0.0, 0.0], 5).unwrap();
        assert_eq!(nn.len(), 1);
        let nn = knn_voxels(&g, &[0.04, 0.04, 0.04], 1).unwrap();
        assert_eq!(nn, vec![(0, 0.0)]);
    }

    #[test]
    fn knn_row_of_three() {
        let g = voxelize(&[[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [2.5, 0.5, 0.5]], 1.0).unwrap();
        let nn = knn_voxels(&g, &[0.9, 0.5, 0.5], 2).unwrap();
        assert_eq!(nn.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
        assert!((nn[0].1 - 0.4).abs() < 1e-12 && (nn[1].1 - 0.6).abs() < 1e-12);
    }

    #[test]
    fn knn_ties_use_coordinates() {
        // Point equidistant from (1,0,0) and (0,0,0) cells; (0,0,0) inserted last.
        let g = voxelize(&[[1.5, 0.5, 0.5], [0.5, 0.5, 0.5]], 1.0).unwrap();
        let nn = knn_voxels(&g, &[1.0, 0.5, 0.5], 1).unwrap();
        assert_eq!(g.coords()[nn[0].0], [0, 0, 0]);
    }

    #[test]
    fn empty_grid_is_an_error() {
        let g = voxelize(&[], 0.08).unwrap();
        assert_eq!(knn_voxels(&g, &[0.0; 3], 1).unwrap_err(), VoxelError::Empty);
    }

    #[test]
    fn devoxelize_singular_and_symmetric() {
        let g = voxelize(&[[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]], 1.0).unwrap();
        let feats = Tensor::matrix(2, 1, vec![2.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let out = devoxelize(&mut tape, &g, &feats, &[[0.5, 0.5, 0.5], [1.0, 0.5, 0.5]], 2).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0]);
    }

    #[test]
    fn devoxelize_weighted_mean() {
        // Query at distance 1 from the first center and 2 from the others.
        let centers = [[0.5, 0.5, 0.5], [3.5, 0.5, 0.5], [1.5, 2.5, 0.5]];
        let g = voxelize(&centers, 1.0).unwrap();
        let feats = Tensor::matrix(3, 1, vec![6.0, 3.0, 0.0]).unwrap();
        let p = [[1.5, 0.5, 0.5]];
        let nn = knn_voxels(&g, &p[0], 3).unwrap();
        let d: Vec<f64> = nn.iter().map(|x| x.1).collect();
        assert_eq!(d, vec![1.0, 2.0, 2.0]);
        let mut tape = Tape::new();
        let out = devoxelize(&mut tape, &g, &feats, &p, 3).unwrap();
        assert!((out.data()[0] - 3.75).abs() < 1e-12, "{:?}", out.data());
    }

    #[test]
    fn constant_features_are_reproduced() {
        let pts: Vec<[f64; 3]> = (0..20)
            .map(|i| [(i as f64 * 0.37).sin(), (i as f64 * 0.91).cos(), i as f64 * 0.05])
            .collect();
        let g = voxelize(&pts, 0.2).unwrap();
        let feats = Tensor::full(vec![g.len(), 2], 1.25);
        let mut tape = Tape::new();
        let out = devoxelize(&mut tape, &g, &feats, &pts, 3).unwrap();
        assert!(out.data().iter().all(|v| (v - 1.25).abs() < 1e-12));
        for row in devox_weights(&g, &pts, 3).unwrap() {
            assert!(row.iter().all(|&(_, w)| w >= 0.0));
            assert!((row.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
