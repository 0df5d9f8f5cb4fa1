//! User clustering from sensing-beam power patterns and cluster-to-agent
//! assignment.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng as _;

use crate::beamform::{cluster_gain, weights, Beam, Codebook, PhaseSet};
use crate::error::{check_len, config, ForgeError, Result};
use crate::rng::{stream, Stream};

/// Fixed random quantized beams used to probe each user's channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingSet {
    beams: Vec<Beam>,
    weights: Vec<Vec<Complex64>>,
    seed: u64,
}

impl SensingSet {
    pub fn beams(&self) -> &[Beam] {
        &self.beams
    }

    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn feature_dim(&self) -> usize {
        let s = self.len();
        s * (s - 1) / 2
    }
}

pub fn make_sensing(s: usize, antennas: usize, phase_set: &PhaseSet, seed: u64) -> Result<SensingSet> {
    if s < 2 {
        return config(format!("need at least 2 sensing beams, got {s}"));
    }
    if antennas == 0 {
        return config("sensing beams need at least one antenna");
    }
    let mut rng = stream(seed, Stream::Sensing, 0);
    let beams: Vec<Beam> = (0..s)
        .map(|_| Beam { phase_indices: (0..antennas).map(|_| rng.random_range(0..phase_set.len())).collect() })
        .collect();
    let weights = beams.iter().map(|b| weights(b, phase_set)).collect();
    Ok(SensingSet { beams, weights, seed })
}

/// Pairwise normalized sensing-power differences, pairs `(i, j)` with
/// `i < j` in lexicographic order.
pub fn features(h: &[Complex64], sensing: &SensingSet) -> Result<Vec<f64>> {
    let powers = sensing
        .weights
        .iter()
        .map(|w| crate::beamform::gain(w, h))
        .collect::<Result<Vec<f64>>>()?;
    features_from_powers(&powers)
}

/// Same as [`features`] for already measured sensing powers.
pub fn features_from_powers(powers: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = powers.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(ForgeError::Degenerate("user has zero total sensing power".into()));
    }
    let s = powers.len();
    let mut out = Vec::with_capacity(s * (s.saturating_sub(1)) / 2);
    for i in 0..s {
        for j in i + 1..s {
            out.push((powers[i] - powers[j]) / total);
        }
    }
    Ok(out)
}

/// Features for every user; users with zero sensing power are returned
/// separately and excluded.
pub struct UserFeatures {
    pub users: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    pub degenerate: Vec<usize>,
}

pub fn user_features<'a, I>(channels: I, sensing: &SensingSet) -> Result<UserFeatures>
where
    I: IntoIterator<Item = &'a [Complex64]>,
{
    let mut out = UserFeatures { users: Vec::new(), features: Vec::new(), degenerate: Vec::new() };
    for (u, h) in channels.into_iter().enumerate() {
        match features(h, sensing) {
            Ok(f) => {
                out.users.push(u);
                out.features.push(f);
            }
            Err(ForgeError::Degenerate(_)) => out.degenerate.push(u),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub sizes: Vec<usize>,
    /// Sum of squared distances to the assigned centroid after each
    /// assignment step.
    pub objective_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Member indices (into the clustered point list) of every cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(x, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut crate::rng::Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are refilled
/// with the point of the largest cluster farthest from its centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<ClusterModel> {
    if k == 0 {
        return config("k-means needs at least one cluster");
    }
    if points.len() < k {
        return config(format!("cannot form {k} clusters from {} points", points.len()));
    }
    let dim = points[0].len();
    for p in points {
        check_len(dim, p.len())?;
    }
    let mut rng = stream(seed, Stream::Clustering, 0);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut labels = vec![0usize; points.len()];
    let mut trace = Vec::new();

    for _ in 0..max_iters.max(1) {
        let mut objective = 0.0;
        for (l, p) in labels.iter_mut().zip(points) {
            let (c, d) = nearest_centroid(p, &centroids);
            *l = c;
            objective += d;
        }
        repair_empty(points, &mut labels, &centroids, k);
        trace.push(objective);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        if shift < tol {
            break;
        }
    }
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    Ok(ClusterModel { labels, centroids, sizes, objective_trace: trace })
}

fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).expect("k > 0");
        let far = (0..points.len())
            .filter(|&i| labels[i] == largest)
            .max_by(|&a, &b| {
                sq_dist(&points[a], &centroids[largest])
                    .total_cmp(&sq_dist(&points[b], &centroids[largest]))
                    .then(b.cmp(&a))
            })
            .expect("largest cluster is non-empty");
        labels[far] = empty;
    }
}

/// `Z[n][n']`: mean gain of beam `n` over cluster `n'`.
pub fn cost_matrix(codebook: &Codebook, clusters: &[Vec<&[Complex64]>]) -> Result<Vec<Vec<f64>>> {
    codebook
        .weight_vectors()
        .iter()
        .map(|w| clusters.iter().map(|c| cluster_gain(w, c.iter().copied())).collect())
        .collect()
}

/// Agent `n` serves cluster `perm[n]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub perm: Vec<usize>,
}

impl Assignment {
    pub fn identity(n: usize) -> Self {
        Self { perm: (0..n).collect() }
    }

    pub fn total(&self, z: &[Vec<f64>]) -> f64 {
        self.perm.iter().enumerate().map(|(n, &c)| z[n][c]).sum()
    }
}

fn validate_square(z: &[Vec<f64>]) -> Result<usize> {
    let n = z.len();
    if n == 0 {
        return config("assignment needs a non-empty matrix");
    }
    for row in z {
        if row.len() != n {
            return config(format!("assignment matrix must be square, got a row of {} in {n}×{n}", row.len()));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(ForgeError::Degenerate("assignment matrix has non-finite entries".into()));
        }
    }
    Ok(n)
}

/// Two totals closer than this are the same optimum.
fn tie_tolerance(z: &[Vec<f64>]) -> f64 {
    let scale = z.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    1e-9 * scale.max(1.0)
}

/// Maximum-total assignment via the O(N³) Hungarian method. Among optimal
/// permutations the lexicographically smallest is returned.
pub fn assign(z: &[Vec<f64>]) -> Result<Assignment> {
    let n = validate_square(z)?;
    let cost: Vec<Vec<f64>> = z.iter().map(|r| r.iter().map(|x| -x).collect()).collect();
    let (mut row_to_col, u, v) = hungarian_min(&cost);
    lexicographic_refine(&cost, &u, &v, &mut row_to_col, tie_tolerance(z) / n as f64);
    Ok(Assignment { perm: row_to_col })
}

/// Shortest augmenting path Hungarian algorithm on a square cost matrix.
/// Returns the row→column matching and the row/column potentials, with
/// `cost[i][j] − u[i] − v[j] ≥ 0` and equality on matched pairs.
fn hungarian_min(cost: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.len();
    // 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_match = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_match[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_match[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_match[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_match[j0] = col_match[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[col_match[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Moves an optimal matching to the lexicographically smallest optimal one.
/// Every optimal matching lies in the tight subgraph of the potentials;
/// for each row in order, the smallest tight column reachable through an
/// alternating cycle among the unfixed rows is swapped in.
fn lexicographic_refine(cost: &[Vec<f64>], u: &[f64], v: &[f64], row_to_col: &mut [usize], eps: f64) {
    let n = cost.len();
    let tight = |i: usize, j: usize| cost[i][j] - u[i] - v[j] <= eps;
    let mut col_to_row = vec![0; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    for i in 0..n {
        for c in 0..row_to_col[i] {
            let owner = col_to_row[c];
            if owner < i || !tight(i, c) {
                continue;
            }
            // alternating path from `owner` to the column `i` currently holds,
            // through rows > i only
            if let Some(path) = alternating_path(owner, row_to_col[i], i, &tight, row_to_col, &col_to_row, n) {
                let freed = row_to_col[i];
                // path is a list of (row, new column) moves ending at `freed`
                for &(r, col) in &path {
                    row_to_col[r] = col;
                    col_to_row[col] = r;
                }
                debug_assert_eq!(path.last().map(|p| p.1), Some(freed));
                row_to_col[i] = c;
                col_to_row[c] = i;
                break;
            }
        }
    }
}

fn alternating_path(
    start: usize,
    goal_col: usize,
    fixed_upto: usize,
    tight: &impl Fn(usize, usize) -> bool,
    row_to_col: &[usize],
    col_to_row: &[usize],
    n: usize,
) -> Option<Vec<(usize, usize)>> {
    // BFS over rows; edge row r → column j (tight, j not r's current column);
    // column j leads to its owner unless j is the goal.
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; n]; // row -> (parent row, column taken)
    let mut seen = vec![false; n];
    seen[start] = true;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(r) = queue.pop_front() {
        for j in 0..n {
            if j == row_to_col[r] || !tight(r, j) {
                continue;
            }
            if j == goal_col {
                let mut path = vec![(r, j)];
                let mut cur = r;
                while let Some((parent, col)) = prev[cur] {
                    path.push((parent, col));
                    cur = parent;
                }
                path.reverse();
                return Some(path);
            }
            let owner = col_to_row[j];
            if owner > fixed_upto && !seen[owner] {
                seen[owner] = true;
                prev[owner] = Some((r, j));
                queue.push_back(owner);
            }
        }
    }
    None
}

/// Exhaustive reference for [`assign`], same tie rule. Test-only scale.
pub fn brute_force_assign(z: &[Vec<f64>]) -> Result<Assignment> {
    let n = validate_square(z)?;
    if n > 8 {
        return config(format!("brute-force assignment limited to 8×8, got {n}×{n}"));
    }
    let tol = tie_tolerance(z);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (perm.clone(), f64::NEG_INFINITY);
    loop {
        let total: f64 = perm.iter().enumerate().map(|(r, &c)| z[r][c]).sum();
        // lexicographic enumeration: keep the first within tolerance of the max
        if total > best.1 + tol {
            best = (perm.clone(), total);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(Assignment { perm: best.0 })
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("pivot exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

pub fn write_cluster_csv(path: impl AsRef<Path>, users: &[usize], labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["user_id", "cluster_id"])?;
    for (u, l) in users.iter().zip(labels) {
        w.write_record([u.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_assignment_csv(path: impl AsRef<Path>, assignment: &Assignment) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["agent_id", "cluster_id"])?;
    for (a, c) in assignment.perm.iter().enumerate() {
        w.write_record([a.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes degenerate users, one per line, for the CLI warning stream.
pub fn report_degenerate<W: Write>(mut w: W, degenerate: &[usize]) -> std::io::Result<()> {
    for u in degenerate {
        writeln!(w, "warning: user {u} has zero sensing power and was not clustered")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..10.0)).collect()).collect()
    }

    #[test]
    fn features_from_two_powers() {
        let f = features_from_powers(&[3.0, 1.0]).unwrap();
        assert_eq!(f, vec![0.5]);
        assert_eq!(features_from_powers(&[2.0, 2.0, 2.0]).unwrap(), vec![0.0; 3]);
        assert!(matches!(features_from_powers(&[0.0, 0.0]), Err(ForgeError::Degenerate(_))));
    }

    #[test]
    fn features_scale_invariant_and_bounded() {
        let ps = PhaseSet::new(2).unwrap();
        let sensing = make_sensing(8, 8, &ps, 11).unwrap();
        assert_eq!(sensing.feature_dim(), 28);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let h: Vec<Complex64> =
                (0..8).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            let f = features(&h, &sensing).unwrap();
            assert!(f.iter().all(|x| (-1.0..=1.0).contains(x)));
            for scale in [1e-6, 1e6] {
                let hs: Vec<Complex64> = h.iter().map(|x| x * scale).collect();
                for (a, b) in f.iter().zip(features(&hs, &sensing).unwrap()) {
                    assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn sensing_is_seeded() {
        let ps = PhaseSet::new(3).unwrap();
        assert_eq!(make_sensing(32, 32, &ps, 4).unwrap(), make_sensing(32, 32, &ps, 4).unwrap());
        assert_ne!(make_sensing(32, 32, &ps, 4).unwrap(), make_sensing(32, 32, &ps, 5).unwrap());
        assert!(make_sensing(1, 4, &ps, 0).is_err());
    }

    #[test]
    fn kmeans_separates_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for (b, centre) in [[-5.0, -5.0], [5.0, 5.0]].iter().enumerate() {
            for _ in 0..30 {
                points.push(vec![centre[0] + rng.random_range(-0.5..0.5), centre[1] + rng.random_range(-0.5..0.5)]);
                truth.push(b);
            }
        }
        let model = kmeans(&points, 2, 1, 100, 1e-9).unwrap();
        let first = model.labels[0];
        for (l, t) in model.labels.iter().zip(&truth) {
            assert_eq!(*l == first, *t == truth[0]);
        }
        assert_eq!(model.sizes, vec![30, 30]);
        assert_eq!(model, kmeans(&points, 2, 1, 100, 1e-9).unwrap());
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let points = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0]];
        let model = kmeans(&points, 1, 0, 10, 1e-12).unwrap();
        assert_eq!(model.labels, vec![0, 0, 0]);
        assert_abs_diff_eq!(model.centroids[0][0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(model.centroids[0][1], 3.0, epsilon = 1e-12);
        assert!(kmeans(&points, 4, 0, 10, 1e-12).is_err());
    }

    #[test]
    fn kmeans_repairs_empty_clusters() {
        // duplicate points force k-means++ to pick coincident seeds
        let points = vec![vec![1.0]; 6];
        let model = kmeans(&points, 3, 0, 10, 1e-12).unwrap();
        assert!(model.sizes.iter().all(|&s| s > 0));
        assert_eq!(model.sizes.iter().sum::<usize>(), 6);
    }

    #[test]
    fn kmeans_objective_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let points: Vec<Vec<f64>> =
            (0..200).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let model = kmeans(&points, 6, 3, 100, 0.0).unwrap();
        for w in model.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", model.objective_trace);
        }
    }

    #[test]
    fn assign_examples() {
        assert_eq!(assign(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap().perm, vec![1, 0]);
        let z = vec![vec![10.0, 0.1, 0.2], vec![0.3, 10.0, 0.1], vec![0.2, 0.1, 10.0]];
        assert_eq!(assign(&z).unwrap().perm, vec![0, 1, 2]);
        assert!(assign(&[vec![1.0, 2.0]]).is_err());
        assert!(assign(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn assign_tie_rule_is_lexicographic() {
        let z = vec![vec![1.0; 4]; 4];
        assert_eq!(assign(&z).unwrap().perm, vec![0, 1, 2, 3]);
        let z = vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]];
        assert_eq!(assign(&z).unwrap(), brute_force_assign(&z).unwrap());
        assert_eq!(assign(&z).unwrap().perm, vec![1, 2, 0]);
        // integer matrices tie often
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..300 {
            let n = rng.random_range(1..=6);
            let z: Vec<Vec<f64>> =
                (0..n).map(|_| (0..n).map(|_| rng.random_range(0..3) as f64).collect()).collect();
            assert_eq!(assign(&z).unwrap(), brute_force_assign(&z).unwrap(), "{z:?}");
        }
    }

    #[test]
    fn assign_matches_brute_force_on_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for n in 1..=6 {
            for _ in 0..30 {
                let z = random_matrix(&mut rng, n);
                assert_eq!(assign(&z).unwrap(), brute_force_assign(&z).unwrap());
            }
        }
    }

    #[test]
    fn cost_matrix_matches_loop_oracle() {
        let ps = PhaseSet::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let beams: Vec<Beam> =
            (0..3).map(|_| Beam { phase_indices: (0..4).map(|_| rng.random_range(0..4)).collect() }).collect();
        let cb = Codebook::new(beams, ps).unwrap();
        let users: Vec<Vec<Complex64>> = (0..7)
            .map(|_| (0..4).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect())
            .collect();
        let clusters: Vec<Vec<&[Complex64]>> =
            vec![vec![&users[0], &users[1]], vec![&users[2], &users[3], &users[4]], vec![&users[5], &users[6]]];
        let z = cost_matrix(&cb, &clusters).unwrap();
        for (n, beam) in cb.beams().iter().enumerate() {
            for (c, members) in clusters.iter().enumerate() {
                let mut total = 0.0;
                for h in members {
                    let (mut re, mut im) = (0.0, 0.0);
                    for m in 0..4 {
                        let theta = ps.level(beam.phase_indices[m]);
                        let (wr, wi) = (theta.cos() / 2.0, theta.sin() / 2.0);
                        re += wr * h[m].re + wi * h[m].im;
                        im += wr * h[m].im - wi * h[m].re;
                    }
                    total += re * re + im * im;
                }
                assert_abs_diff_eq!(z[n][c], total / members.len() as f64, epsilon = 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn assign_beats_identity_and_random_perms(seed in any::<u64>(), n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = random_matrix(&mut rng, n);
            let best = assign(&z).unwrap();
            let mut seen = best.perm.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            let total = best.total(&z);
            prop_assert!(total >= Assignment::identity(n).total(&z) - 1e-9);
            for _ in 0..20 {
                let mut p: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    p.swap(i, rng.random_range(0..=i));
                }
                let other = Assignment { perm: p }.total(&z);
                prop_assert!(total >= other - 1e-9);
            }
        }
    }
}
