//! Brute-force k-nearest-neighbor queries with deterministic tie-breaking.

pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// For every point, the indices of its `k` nearest other points (ties broken
/// by index). Returns fewer than `k` when the cloud is smaller than `k + 1`.
pub fn knn_excluding_self(points: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            cand.clear();
            cand.extend(
                points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(j, q)| (dist2(p, q), j)),
            );
            let take = k.min(cand.len());
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if take < cand.len() && take > 0 {
                cand.select_nth_unstable_by(take - 1, cmp);
            }
            let mut best = cand[..take].to_vec();
            best.sort_by(cmp);
            best.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}
