//! From regional signals to dynamic binary networks, and the analyses run
//! on fitted models: community detection and the permutation comparison of
//! slope tensors between two groups.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Adjacency, DynamicNetworkDataset};
use crate::error::{invalid, shape_err, Error, Result};
use crate::family::Family;
use crate::fit::{fit, tune, FitOptions, LambdaSpec};
use crate::spline::equispaced_grid;
use crate::tensor::{Tensor3, Tensor4};

/// Regional signal of one subject: `n` regions by `S` scans.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMatrix {
    pub subject: String,
    pub values: DMatrix<f64>,
}

impl SignalMatrix {
    pub fn new(subject: impl Into<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("signal contains missing or non-finite values".into()));
        }
        Ok(Self {
            subject: subject.into(),
            values,
        })
    }

    pub fn regions(&self) -> usize {
        self.values.nrows()
    }

    pub fn scans(&self) -> usize {
        self.values.ncols()
    }
}

/// Number of windows of length `window` advanced by `stride` over `scans`.
pub fn window_count(scans: usize, window: usize, stride: usize) -> usize {
    if window == 0 || stride == 0 || window > scans {
        0
    } else {
        (scans - window) / stride + 1
    }
}

/// A region with zero variance inside one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatRegion {
    pub window: usize,
    pub region: usize,
}

#[derive(Debug, Clone)]
pub struct WindowedCorrelations {
    pub matrices: Vec<DMatrix<f64>>,
    /// Regions whose correlations were set to 0 because they were constant.
    pub flat: Vec<FlatRegion>,
}

/// Pearson correlation matrices over sliding windows. Diagonals are 1.
pub fn sliding_windows(x: &SignalMatrix, window: usize, stride: usize) -> Result<WindowedCorrelations> {
    if window < 2 {
        return invalid(format!("window must hold at least 2 scans, got {window}"));
    }
    if stride == 0 {
        return invalid("stride must be at least 1");
    }
    if window > x.scans() {
        return invalid(format!("window {window} exceeds the {} available scans", x.scans()));
    }
    let n = x.regions();
    let count = window_count(x.scans(), window, stride);
    let mut matrices = Vec::with_capacity(count);
    let mut flat = Vec::new();
    for w in 0..count {
        let start = w * stride;
        let block = x.values.columns(start, window);
        let mut centered = DMatrix::zeros(n, window);
        let mut scale = vec![0.0; n];
        for j in 0..n {
            let row = block.row(j);
            let mean = row.sum() / window as f64;
            for s in 0..window {
                centered[(j, s)] = row[s] - mean;
            }
            scale[j] = centered.row(j).norm();
            if scale[j] == 0.0 {
                flat.push(FlatRegion { window: w, region: j });
            }
        }
        let cross = &centered * centered.transpose();
        let m = DMatrix::from_fn(n, n, |j, jp| {
            if j == jp {
                1.0
            } else if scale[j] == 0.0 || scale[jp] == 0.0 {
                0.0
            } else {
                (cross[(j, jp)] / (scale[j] * scale[jp])).clamp(-1.0, 1.0)
            }
        });
        matrices.push(m);
    }
    if !flat.is_empty() {
        log::warn!("subject {}: {} constant region windows", x.subject, flat.len());
    }
    Ok(WindowedCorrelations { matrices, flat })
}

/// `A[j,j'] = 1` iff `C[j,j'] > tau` off the diagonal.
pub fn binarize(c: &DMatrix<f64>, tau: f64) -> Result<DMatrix<u8>> {
    if !(tau > -1.0 && tau < 1.0) {
        return invalid(format!("threshold {tau} must lie in (-1, 1)"));
    }
    if !c.is_square() {
        return shape_err(format!("correlation matrix is {}x{}", c.nrows(), c.ncols()));
    }
    let n = c.nrows();
    let a = DMatrix::from_fn(n, n, |j, jp| {
        // Symmetrize on the upper triangle.
        let (lo, hi) = if j < jp { (j, jp) } else { (jp, j) };
        u8::from(j != jp && c[(lo, hi)] > tau)
    });
    Ok(a)
}

/// Fraction of off-diagonal cells equal to 1.
pub fn density(a: &DMatrix<u8>) -> f64 {
    let n = a.nrows();
    if n < 2 {
        return 0.0;
    }
    let ones = (0..n)
        .flat_map(|j| (0..n).map(move |jp| (j, jp)))
        .filter(|&(j, jp)| j != jp && a[(j, jp)] != 0)
        .count();
    ones as f64 / (n * (n - 1)) as f64
}

/// Summary of a signal-to-network conversion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstructionReport {
    pub windows: usize,
    pub mean_density: f64,
    /// `(subject, window, region)` for every constant region window.
    pub flat: Vec<(String, usize, usize)>,
}

/// Binary dynamic networks for every subject on an equispaced time grid
/// with one point per window.
pub fn networks_from_signals(
    signals: &[SignalMatrix],
    covariates: DMatrix<f64>,
    window: usize,
    stride: usize,
    tau: f64,
) -> Result<(DynamicNetworkDataset, ConstructionReport)> {
    let Some(first) = signals.first() else {
        return invalid("no signal matrices given");
    };
    if covariates.nrows() != signals.len() {
        return shape_err(format!(
            "{} signal matrices but {} covariate rows",
            signals.len(),
            covariates.nrows()
        ));
    }
    let n = first.regions();
    let scans = first.scans();
    if let Some(bad) = signals.iter().find(|s| s.regions() != n || s.scans() != scans) {
        return shape_err(format!(
            "subject {} has {}x{} signal, expected {n}x{scans}",
            bad.subject,
            bad.regions(),
            bad.scans()
        ));
    }
    let per_subject: Vec<Result<(Vec<u8>, Vec<FlatRegion>, f64)>> = signals
        .par_iter()
        .map(|s| {
            let w = sliding_windows(s, window, stride)?;
            let mut vals = Vec::with_capacity(w.matrices.len() * n * n);
            let mut dens = 0.0;
            for c in &w.matrices {
                let a = binarize(c, tau)?;
                dens += density(&a);
                // Row-major.
                for j in 0..n {
                    for jp in 0..n {
                        vals.push(a[(j, jp)]);
                    }
                }
            }
            Ok((vals, w.flat, dens))
        })
        .collect();
    let t = window_count(scans, window, stride);
    let mut adjacency = Vec::with_capacity(signals.len() * t * n * n);
    let mut flat = Vec::new();
    let mut dens = 0.0;
    for (s, res) in signals.iter().zip(per_subject) {
        let (vals, f, d) = res?;
        adjacency.extend(vals);
        flat.extend(f.into_iter().map(|f| (s.subject.clone(), f.window, f.region)));
        dens += d;
    }
    let data = DynamicNetworkDataset::new(
        Family::BernoulliLogit,
        n,
        equispaced_grid(t),
        Adjacency::U8(adjacency),
        covariates,
    )?;
    let report = ConstructionReport {
        windows: t,
        mean_density: dens / (signals.len() * t) as f64,
        flat,
    };
    Ok((data, report))
}

/// `Σ_h B0 ×₃ φ(t_h)`: the baseline summed over the time grid.
pub fn summed_baseline(baseline: &Tensor3, phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let [n, _, k] = baseline.dims();
    if phi.ncols() != k {
        return shape_err(format!("basis matrix has {} columns, tensor K = {k}", phi.ncols()));
    }
    let weights: Vec<f64> = (0..k).map(|kk| phi.column(kk).sum()).collect();
    Ok(DMatrix::from_fn(n, n, |j, jp| {
        baseline.fiber(j, jp).iter().zip(&weights).map(|(b, w)| b * w).sum()
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Cluster of each region, numbered by first appearance.
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares of the winning restart.
    pub inertia: f64,
}

pub const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITERS: usize = 300;

/// Groups regions by K-means on the rows of `U_d Σ_d`, the leading
/// `embed_dim` singular directions of `m`.
pub fn cluster_regions(m: &DMatrix<f64>, k: usize, embed_dim: usize, seed: u64) -> Result<Clustering> {
    let n = m.nrows();
    if !m.is_square() {
        return shape_err(format!("matrix is {}x{}", m.nrows(), m.ncols()));
    }
    if k < 2 {
        return invalid(format!("need at least 2 clusters, got {k}"));
    }
    if k > n {
        return invalid(format!("{k} clusters requested for {n} regions"));
    }
    if embed_dim == 0 || embed_dim > n {
        return invalid(format!("embedding dimension {embed_dim} must lie in 1..={n}"));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("matrix has non-finite entries".into()));
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let features = DMatrix::from_fn(n, embed_dim, |j, d| {
        let c = order[d];
        u[(j, c)] * svd.singular_values[c]
    });
    Ok(kmeans(&features, k, KMEANS_RESTARTS, seed))
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>, c: usize) -> f64 {
    (0..points.ncols()).map(|d| (points[(i, d)] - centers[(c, d)]).powi(2)).sum()
}

/// K-means with k-means++ seeding; the restart with least inertia wins.
pub fn kmeans(points: &DMatrix<f64>, k: usize, restarts: usize, seed: u64) -> Clustering {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..restarts.max(1) {
        let c = lloyd(points, k, &mut rng);
        if best.as_ref().is_none_or(|b| c.inertia < b.inertia) {
            best = Some(c);
        }
    }
    best.expect("at least one restart")
}

fn plus_plus_seed(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (n, dim) = points.shape();
    let mut centers = DMatrix::zeros(k, dim);
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from(&points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from(&points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points, i, &centers, c));
        }
    }
    centers
}

fn lloyd(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Clustering {
    let (n, dim) = points.shape();
    let mut centers = plus_plus_seed(points, k, rng);
    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for i in 0..n {
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let d = sq_dist(points, i, &centers, c);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if labels[i] != best.1 {
                labels[i] = best.1;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = DMatrix::<f64>::zeros(k, dim);
        for i in 0..n {
            counts[labels[i]] += 1;
            for d in 0..dim {
                sums[(labels[i], d)] += points[(i, d)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    centers[(c, d)] = sums[(c, d)] / counts[c] as f64;
                }
            } else {
                // Empty cluster: move it to the point farthest from its center.
                let far = (0..n)
                    .map(|i| (sq_dist(points, i, &centers, labels[i]), i))
                    .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a })
                    .1;
                centers.row_mut(c).copy_from(&points.row(far));
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = (0..n).map(|i| sq_dist(points, i, &centers, labels[i])).sum();
    Clustering {
        labels: relabel(&labels),
        inertia,
    }
}

fn relabel(labels: &[usize]) -> Vec<usize> {
    let mut map: Vec<(usize, usize)> = Vec::new();
    labels
        .iter()
        .map(|l| match map.iter().find(|(from, _)| from == l) {
            Some(&(_, to)) => to,
            None => {
                let to = map.len();
                map.push((*l, to));
                to
            }
        })
        .collect()
}

/// Settings for [`permutation_test`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PermutationOptions {
    /// Used unchanged for the observed split and every permutation.
    pub fit: FitOptions,
    pub n_perm: usize,
    /// A cell is flagged when `D_obs` beats at least this fraction of the
    /// permuted distances.
    pub quantile: f64,
    /// Covariate whose slope tensors are compared.
    pub covariate: usize,
    pub seed: u64,
}

impl Default for PermutationOptions {
    fn default() -> Self {
        Self {
            fit: FitOptions::default(),
            n_perm: 100,
            quantile: 0.95,
            covariate: 0,
            seed: 0,
        }
    }
}

/// Largest fraction of failed permutation fits tolerated before aborting.
pub const MAX_DROP_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PermutationReport {
    #[serde(with = "rows")]
    pub d_obs: DMatrix<f64>,
    #[serde(with = "rows")]
    pub d_per_mean: DMatrix<f64>,
    #[serde(with = "rows")]
    pub s_flag: DMatrix<u8>,
    /// `D` of each permutation that fitted, in permutation order.
    #[serde(skip)]
    pub d_per: Vec<DMatrix<f64>>,
    /// Indices of permutations that failed to fit.
    pub dropped: Vec<usize>,
    pub goi: Vec<GoiRow>,
}

/// A graph of interest: the cells `(j, j')` it averages over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goi {
    pub name: String,
    pub cells: Vec<(usize, usize)>,
}

impl Goi {
    /// Every ordered pair of distinct nodes in `nodes`.
    pub fn within(name: impl Into<String>, nodes: &[usize]) -> Self {
        let cells = nodes
            .iter()
            .flat_map(|&a| nodes.iter().filter(move |&&b| b != a).map(move |&b| (a, b)))
            .collect();
        Self {
            name: name.into(),
            cells,
        }
    }

    /// Every pair with one end in `a` and the other in `b`, both orders,
    /// without self pairs.
    pub fn between(name: impl Into<String>, a: &[usize], b: &[usize]) -> Self {
        let mut cells: Vec<(usize, usize)> = a
            .iter()
            .flat_map(|&x| b.iter().filter(move |&&y| y != x).map(move |&y| (x, y)))
            .collect();
        let mirrored: Vec<(usize, usize)> = cells.iter().map(|&(x, y)| (y, x)).collect();
        cells.extend(mirrored);
        cells.sort_unstable();
        cells.dedup();
        Self {
            name: name.into(),
            cells,
        }
    }

    pub fn whole(n: usize) -> Self {
        Self::within("all", &(0..n).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoiDistance {
    pub value: f64,
    /// No cell of the set had a positive distance.
    pub empty: bool,
}

/// Mean of `D` over the cells of the set with `D > 0`.
pub fn goi_distance(d: &DMatrix<f64>, cells: &[(usize, usize)]) -> Result<GoiDistance> {
    if cells.is_empty() {
        return invalid("graph of interest has no cells");
    }
    if let Some(&(j, jp)) = cells.iter().find(|&&(j, jp)| j >= d.nrows() || jp >= d.ncols()) {
        return shape_err(format!("cell ({j}, {jp}) outside the {}x{} matrix", d.nrows(), d.ncols()));
    }
    let (sum, count) = cells
        .iter()
        .map(|&c| d[c])
        .filter(|v| *v > 0.0)
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    Ok(if count == 0 {
        GoiDistance { value: 0.0, empty: true }
    } else {
        GoiDistance {
            value: sum / count as f64,
            empty: false,
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoiRow {
    pub name: String,
    pub observed: GoiDistance,
    pub permuted_mean: f64,
    pub permuted_sd: f64,
}

/// `‖fiber_a − fiber_b‖₂` for every pair, covariate `l`.
pub fn slope_distance(a: &Tensor4, b: &Tensor4, l: usize) -> Result<DMatrix<f64>> {
    if a.dims() != b.dims() {
        return shape_err(format!("slope tensors {:?} vs {:?}", a.dims(), b.dims()));
    }
    if l >= a.covariates() {
        return invalid(format!("covariate {l} out of range (p = {})", a.covariates()));
    }
    let n = a.n();
    Ok(DMatrix::from_fn(n, n, |j, jp| {
        if j == jp {
            return 0.0;
        }
        a.fiber(j, jp, l)
            .iter()
            .zip(b.fiber(j, jp, l))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }))
}

/// `S[j,j'] = 1` iff `#{i : D_obs > D_per,i} ≥ quantile · (number of permutations)`.
pub fn flag_cells(d_obs: &DMatrix<f64>, d_per: &[DMatrix<f64>], quantile: f64) -> DMatrix<u8> {
    let n = d_obs.nrows();
    let need = quantile * d_per.len() as f64 - 1e-9;
    DMatrix::from_fn(n, n, |j, jp| {
        if j == jp || d_per.is_empty() {
            return 0;
        }
        let wins = d_per.iter().filter(|d| d_obs[(j, jp)] > d[(j, jp)]).count();
        u8::from(wins as f64 >= need)
    })
}

fn group_distance(
    data: &DynamicNetworkDataset,
    labels: &[bool],
    opts: &PermutationOptions,
) -> Result<DMatrix<f64>> {
    let a: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let b: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let fa = fit(&data.subset(&a)?, data.family(), &opts.fit)?;
    let fb = fit(&data.subset(&b)?, data.family(), &opts.fit)?;
    slope_distance(&fa.params.slopes, &fb.params.slopes, opts.covariate)
}

/// Fit settings for [`permutation_test`], tuned by eBIC on each observed
/// group: the larger of the two selected ranks and the geometric mean of the
/// two selected λ.
pub fn observed_split_options(
    data: &DynamicNetworkDataset,
    labels: &[bool],
    rank_grid: &[usize],
    lambdas: &LambdaSpec,
    base: &FitOptions,
) -> Result<FitOptions> {
    if labels.len() != data.n_subjects() {
        return shape_err(format!("{} labels for {} subjects", labels.len(), data.n_subjects()));
    }
    let a: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let b: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if a.is_empty() || b.is_empty() {
        return invalid("both groups must be non-empty");
    }
    let ta = tune(&data.subset(&a)?, data.family(), rank_grid, lambdas, base)?;
    let tb = tune(&data.subset(&b)?, data.family(), rank_grid, lambdas, base)?;
    log::info!(
        "observed split: R = ({}, {}), lambda = ({:.4e}, {:.4e})",
        ta.best_rank,
        tb.best_rank,
        ta.best_lambda,
        tb.best_lambda
    );
    Ok(FitOptions {
        rank: ta.best_rank.max(tb.best_rank),
        lambda: (ta.best_lambda * tb.best_lambda).sqrt(),
        ..base.clone()
    })
}

/// Compares the slope tensors fitted separately to two groups of subjects
/// against the same comparison under shuffled group labels.
pub fn permutation_test(
    data: &DynamicNetworkDataset,
    labels: &[bool],
    opts: &PermutationOptions,
    gois: &[Goi],
) -> Result<PermutationReport> {
    if labels.len() != data.n_subjects() {
        return shape_err(format!("{} labels for {} subjects", labels.len(), data.n_subjects()));
    }
    let in_a = labels.iter().filter(|l| **l).count();
    if in_a == 0 || in_a == labels.len() {
        return invalid("both groups must be non-empty");
    }
    if opts.n_perm == 0 {
        return invalid("n_perm must be at least 1");
    }
    if !(opts.quantile > 0.0 && opts.quantile <= 1.0) {
        return invalid(format!("quantile {} must lie in (0, 1]", opts.quantile));
    }
    if opts.covariate >= data.n_covariates() {
        return invalid(format!("covariate {} out of range (p = {})", opts.covariate, data.n_covariates()));
    }
    opts.fit.validate()?;

    let d_obs = group_distance(data, labels, opts)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let shuffles: Vec<Vec<bool>> = (0..opts.n_perm)
        .map(|_| {
            let mut l = labels.to_vec();
            l.shuffle(&mut rng);
            l
        })
        .collect();
    let results: Vec<Result<DMatrix<f64>>> = shuffles
        .par_iter()
        .map(|l| group_distance(data, l, opts))
        .collect();
    let mut d_per = Vec::with_capacity(opts.n_perm);
    let mut dropped = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(d) => d_per.push(d),
            Err(e) => {
                log::warn!("permutation {i} failed and is dropped: {e}");
                dropped.push(i);
            }
        }
    }
    if dropped.len() as f64 > MAX_DROP_FRACTION * opts.n_perm as f64 {
        return Err(Error::AllFailed(format!(
            "{} of {} permutation fits failed",
            dropped.len(),
            opts.n_perm
        )));
    }

    let n = data.n_nodes();
    let mut d_per_mean = DMatrix::zeros(n, n);
    for d in &d_per {
        d_per_mean += d;
    }
    d_per_mean /= d_per.len() as f64;
    let s_flag = flag_cells(&d_obs, &d_per, opts.quantile);

    let mut goi = Vec::with_capacity(gois.len());
    for g in gois {
        let observed = goi_distance(&d_obs, &g.cells)?;
        let per: Vec<f64> = d_per
            .iter()
            .map(|d| goi_distance(d, &g.cells).map(|v| v.value))
            .collect::<Result<_>>()?;
        let m = per.len() as f64;
        let mean = per.iter().sum::<f64>() / m;
        let sd = if per.len() > 1 {
            (per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        } else {
            0.0
        };
        goi.push(GoiRow {
            name: g.name.clone(),
            observed,
            permuted_mean: mean,
            permuted_sd: sd,
        });
    }

    Ok(PermutationReport {
        d_obs,
        d_per_mean,
        s_flag,
        d_per,
        dropped,
        goi,
    })
}

impl PermutationReport {
    /// Tidy `(row, col, value)` rows for `D_obs`, `D_per` mean and `S`.
    pub fn heatmap_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["matrix", "row", "col", "value"]).map_err(csv_err)?;
        let n = self.d_obs.nrows();
        for (name, m) in [("d_obs", &self.d_obs), ("d_per_mean", &self.d_per_mean)] {
            for j in 0..n {
                for jp in 0..n {
                    w.write_record([
                        name.to_string(),
                        j.to_string(),
                        jp.to_string(),
                        crate::simulation::format_f64(m[(j, jp)]),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        for j in 0..n {
            for jp in 0..n {
                w.write_record(["s_flag".to_string(), j.to_string(), jp.to_string(), self.s_flag[(j, jp)].to_string()])
                    .map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidData(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidData(e.to_string()))
    }
}

/// Matrices as JSON arrays of rows.
pub mod rows {
    use nalgebra::{DMatrix, Scalar};
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<T: Scalar + Serialize, S: Serializer>(m: &DMatrix<T>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<T>> = m.row_iter().map(|r| r.iter().cloned().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, T: Scalar + Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<DMatrix<T>, D::Error> {
        let rows: Vec<Vec<T>> = Vec::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        let flat: Vec<T> = rows.into_iter().flatten().collect();
        Ok(DMatrix::from_row_iterator(flat.len() / ncols.max(1), ncols, flat))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidData(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    fn random_signal(n: usize, s: usize, seed: u64) -> SignalMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SignalMatrix::new("s", DMatrix::from_fn(n, s, |_, _| rng.sample::<f64, _>(StandardNormal))).unwrap()
    }

    #[test]
    fn scan_layout_263_by_30_5_gives_47_windows() {
        let x = random_signal(4, 263, 1);
        assert_eq!(sliding_windows(&x, 30, 5).unwrap().matrices.len(), 47);
        assert_eq!(window_count(263, 30, 5), 47);
    }

    #[test]
    fn identical_rows_correlate_perfectly() {
        let mut x = random_signal(3, 40, 2);
        let row = x.values.row(0).into_owned();
        x.values.row_mut(2).copy_from(&row);
        for m in sliding_windows(&x, 10, 3).unwrap().matrices {
            assert!((m[(0, 2)] - 1.0).abs() < 1e-12 && (m[(2, 0)] - 1.0).abs() < 1e-12);
        }
    }

    /// Textbook Pearson formula on the full sample.
    #[test]
    fn single_full_window_matches_direct_pearson() {
        let x = random_signal(5, 37, 3);
        let w = sliding_windows(&x, 37, 1).unwrap();
        assert_eq!(w.matrices.len(), 1);
        let s = 37.0;
        for a in 0..5 {
            for b in 0..5 {
                let xa: Vec<f64> = x.values.row(a).iter().copied().collect();
                let xb: Vec<f64> = x.values.row(b).iter().copied().collect();
                let (sa, sb): (f64, f64) = (xa.iter().sum(), xb.iter().sum());
                let sab: f64 = xa.iter().zip(&xb).map(|(p, q)| p * q).sum();
                let saa: f64 = xa.iter().map(|p| p * p).sum();
                let sbb: f64 = xb.iter().map(|q| q * q).sum();
                let r = (s * sab - sa * sb) / ((s * saa - sa * sa).sqrt() * (s * sbb - sb * sb).sqrt());
                assert!((w.matrices[0][(a, b)] - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_region_is_flagged_with_zero_correlation() {
        let mut x = random_signal(3, 20, 4);
        x.values.row_mut(1).fill(2.5);
        let w = sliding_windows(&x, 10, 10).unwrap();
        assert_eq!(w.flat, vec![FlatRegion { window: 0, region: 1 }, FlatRegion { window: 1, region: 1 }]);
        assert_eq!(w.matrices[0][(0, 1)], 0.0);
        assert_eq!(w.matrices[0][(1, 1)], 1.0);
    }

    #[test]
    fn window_arguments_are_checked() {
        let x = random_signal(3, 20, 5);
        assert!(sliding_windows(&x, 21, 1).is_err());
        assert!(sliding_windows(&x, 10, 0).is_err());
    }

    #[test]
    fn binarize_boundaries() {
        let eye = DMatrix::<f64>::identity(4, 4);
        assert!(binarize(&eye, 0.5).unwrap().iter().all(|v| *v == 0));
        let mut c = DMatrix::from_element(3, 3, 0.5);
        c.fill_diagonal(1.0);
        assert!(binarize(&c, 0.5).unwrap().iter().all(|v| *v == 0));
        assert!(binarize(&c, 1.0).is_err());
    }

    #[test]
    fn density_matches_count_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 12;
        let mut c = DMatrix::zeros(n, n);
        for j in 0..n {
            c[(j, j)] = 1.0;
            for jp in (j + 1)..n {
                let v = rng.random_range(-1.0..1.0);
                c[(j, jp)] = v;
                c[(jp, j)] = v;
            }
        }
        let mut above = 0;
        for j in 0..n {
            for jp in 0..n {
                if j != jp && c[(j, jp)] > 0.5 {
                    above += 1;
                }
            }
        }
        let a = binarize(&c, 0.5).unwrap();
        assert_eq!(a, a.transpose());
        assert!((density(&a) - above as f64 / (n * (n - 1)) as f64).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn window_count_matches_output(s in 2usize..60, window in 2usize..30, stride in 1usize..8) {
            prop_assume!(window <= s);
            let x = random_signal(2, s, 7);
            let w = sliding_windows(&x, window, stride).unwrap();
            prop_assert_eq!(w.matrices.len(), (s - window) / stride + 1);
        }

        #[test]
        fn density_is_non_increasing_in_tau(seed in 0u64..50, t1 in -0.9f64..0.9, t2 in -0.9f64..0.9) {
            let x = random_signal(6, 15, seed);
            let c = &sliding_windows(&x, 15, 1).unwrap().matrices[0];
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(density(&binarize(c, hi).unwrap()) <= density(&binarize(c, lo).unwrap()));
        }
    }

    fn block_matrix(sizes: &[usize]) -> (DMatrix<f64>, Vec<usize>) {
        let truth: Vec<usize> = sizes.iter().enumerate().flat_map(|(b, &s)| std::iter::repeat_n(b, s)).collect();
        let n = truth.len();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = DMatrix::from_fn(n, n, |i, j| if truth[i] == truth[j] { 1.0 } else { 0.0 });
        let noise = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.01..0.01));
        (m + &noise + noise.transpose(), truth)
    }

    #[test]
    fn planted_blocks_are_recovered() {
        let (m, truth) = block_matrix(&[5, 7, 4]);
        let c = cluster_regions(&m, 3, 3, 1).unwrap();
        assert_eq!(c.labels, relabel(&truth));
    }

    #[test]
    fn identical_rows_form_one_cluster() {
        let points = DMatrix::from_element(6, 2, 0.7);
        let c = kmeans(&points, 3, 4, 2);
        assert!(c.labels.iter().all(|l| *l == 0));
        assert!(c.inertia < 1e-24);
    }

    #[test]
    fn cluster_arguments_are_checked() {
        let m = DMatrix::<f64>::identity(4, 4);
        assert!(cluster_regions(&m, 1, 2, 0).is_err());
        assert!(cluster_regions(&m, 5, 2, 0).is_err());
        assert!(cluster_regions(&m, 2, 5, 0).is_err());
    }

    #[test]
    fn clustering_is_deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = DMatrix::from_fn(15, 15, |_, _| rng.random_range(0.0..1.0));
        let m = &m + m.transpose();
        assert_eq!(cluster_regions(&m, 4, 3, 5).unwrap(), cluster_regions(&m, 4, 3, 5).unwrap());
    }

    #[test]
    fn goi_hand_cases() {
        let mut d = DMatrix::zeros(4, 4);
        assert_eq!(goi_distance(&d, &[(0, 1), (1, 2)]).unwrap(), GoiDistance { value: 0.0, empty: true });
        d[(0, 1)] = 1.0;
        d[(1, 2)] = 2.0;
        d[(2, 3)] = 3.0;
        let g = goi_distance(&d, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        assert_eq!(g, GoiDistance { value: 2.0, empty: false });
        assert!(goi_distance(&d, &[]).is_err());
        assert!(goi_distance(&d, &[(4, 0)]).is_err());
    }

    #[test]
    fn between_set_matches_enumeration() {
        let a = [0, 2, 5];
        let b = [2, 3];
        let mut expected = Vec::new();
        for x in 0..7 {
            for y in 0..7 {
                let cross = (a.contains(&x) && b.contains(&y)) || (b.contains(&x) && a.contains(&y));
                if cross && x != y {
                    expected.push((x, y));
                }
            }
        }
        assert_eq!(Goi::between("g", &a, &b).cells, expected);
        assert_eq!(Goi::within("w", &[1, 3]).cells, vec![(1, 3), (3, 1)]);
    }

    #[test]
    fn flags_when_observed_beats_every_permutation() {
        let d_obs = DMatrix::from_fn(4, 4, |j, jp| if j == jp { 0.0 } else { 2.0 });
        let d_per = vec![DMatrix::from_element(4, 4, 1.0)];
        let s = flag_cells(&d_obs, &d_per, 1.0);
        assert!((0..4).all(|j| (0..4).all(|jp| s[(j, jp)] == u8::from(j != jp))));
        let ties = flag_cells(&d_obs, &[d_obs.clone()], 1.0);
        assert!(ties.iter().all(|v| *v == 0));
    }

    #[test]
    fn ninety_five_of_hundred_is_enough() {
        let d_obs = DMatrix::from_element(2, 2, 1.0);
        let mut d_per = vec![DMatrix::from_element(2, 2, 0.0); 95];
        d_per.extend(vec![DMatrix::from_element(2, 2, 2.0); 5]);
        assert_eq!(flag_cells(&d_obs, &d_per, 0.95)[(0, 1)], 1);
        d_per[0] = DMatrix::from_element(2, 2, 2.0);
        assert_eq!(flag_cells(&d_obs, &d_per, 0.95)[(0, 1)], 0);
    }

    #[test]
    fn summed_baseline_weights_each_basis_function() {
        let mut b = Tensor3::zeros(2, 2, 2);
        b.set_fiber_symmetric(0, 1, &[1.0, 2.0]);
        let phi = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 0.5, 0.0, 1.0]);
        let m = summed_baseline(&b, &phi).unwrap();
        assert_eq!(m[(0, 1)], 1.5 * 1.0 + 1.5 * 2.0);
        assert_eq!(m[(0, 0)], 0.0);
    }

    #[test]
    fn networks_from_signals_shapes() {
        let signals: Vec<SignalMatrix> = (0..3).map(|i| random_signal(5, 50, 20 + i)).collect();
        let x = DMatrix::from_fn(3, 1, |i, _| i as f64);
        let (data, report) = networks_from_signals(&signals, x, 20, 5, 0.3).unwrap();
        assert_eq!(data.n_times(), 7);
        assert_eq!(report.windows, 7);
        assert_eq!(data.n_subjects(), 3);
        assert!(report.mean_density >= 0.0 && report.mean_density <= 1.0);
        let bad = DMatrix::from_fn(2, 1, |i, _| i as f64);
        assert!(networks_from_signals(&signals, bad, 20, 5, 0.3).is_err());
    }
}
