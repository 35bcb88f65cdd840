//! Synthetic dynamic-network studies: data generation, error metrics and
//! replicated comparisons of DNetReg against the element-wise baselines.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{dedgereg_fit, edgereg_fit, select_edges, tpr_fpr, Correction, DEdgeRegResult, EdgeRegResult};
use crate::dataset::{standardize_columns, Adjacency, DynamicNetworkDataset};
use crate::error::{invalid, shape_err, Error, Result};
use crate::family::Family;
use crate::fit::{tune_with, FitOptions, LambdaSpec};
use crate::glm::ModelParams;
use crate::problem::Problem;
use crate::spline::{equispaced_grid, SplineBasis};
use crate::tensor::{cp_reconstruct, fiber_group_norms, CpFactors, Tensor3, Tensor4};

/// Generator settings for one simulated population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Nodes per network.
    pub n: usize,
    #[serde(rename = "N")]
    pub subjects: usize,
    #[serde(rename = "T")]
    pub times: usize,
    /// Basis dimension used to generate the coefficient curves.
    #[serde(rename = "K")]
    pub basis_dim: usize,
    pub degree: usize,
    #[serde(rename = "R")]
    pub rank: usize,
    /// Fraction of node pairs (counted over all `n²` cells) whose slope fiber is nonzero.
    pub s0: f64,
    #[serde(rename = "p")]
    pub covariates: usize,
    pub family: Family,
    pub seed: u64,
    /// Zero every coefficient; edges are then pure noise at `η = 0`.
    pub zero_coefficients: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 50,
            subjects: 50,
            times: 100,
            basis_dim: 8,
            degree: 3,
            rank: 2,
            s0: 0.05,
            covariates: 1,
            family: Family::BernoulliLogit,
            seed: 0,
            zero_coefficients: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.subjects < 2 || self.times == 0 {
            return invalid(format!(
                "need n >= 2, N >= 2, T >= 1 (got n={}, N={}, T={})",
                self.n, self.subjects, self.times
            ));
        }
        if self.covariates == 0 {
            return invalid("at least one covariate is required");
        }
        if !(self.s0 > 0.0 && self.s0 < 1.0) {
            return invalid(format!("s0 = {} must lie in (0, 1)", self.s0));
        }
        if (self.n * self.n) as f64 * self.s0 / 2.0 < 1.0 {
            return invalid(format!("n²·s0/2 = {} is below one pair", (self.n * self.n) as f64 * self.s0 / 2.0));
        }
        if self.support_pairs() > self.n * (self.n - 1) / 2 {
            return invalid(format!("s0 = {} asks for more pairs than the network has", self.s0));
        }
        if self.rank == 0 || self.rank > self.n || self.rank > self.basis_dim {
            return invalid(format!("rank {} must lie in 1..=min(n, K)", self.rank));
        }
        SplineBasis::new(self.basis_dim, self.degree)?;
        Ok(())
    }

    /// Unordered node pairs carrying a nonzero slope fiber: `⌈s0·n²/2⌉`.
    pub fn support_pairs(&self) -> usize {
        ((self.n * self.n) as f64 * self.s0 / 2.0).ceil() as usize
    }

    pub fn basis(&self) -> Result<SplineBasis> {
        SplineBasis::new(self.basis_dim, self.degree)
    }
}

/// Parameters a simulated dataset was drawn from.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub factors: CpFactors,
    /// `B0` expanded from `factors`.
    pub baseline: Tensor3,
    pub slopes: Tensor4,
    /// Support of the first covariate's slope, `n × n`, symmetric.
    pub support: DMatrix<u8>,
    /// `‖support‖₀ / n²`, the rate used to normalize TPR and FPR.
    pub s0_realized: f64,
    pub basis: SplineBasis,
}

/// Draws a population from the model under `cfg`.
pub fn generate(cfg: &SimConfig) -> Result<(DynamicNetworkDataset, GroundTruth)> {
    cfg.validate()?;
    let (n, k, rank, p) = (cfg.n, cfg.basis_dim, cfg.rank, cfg.covariates);
    let basis = cfg.basis()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut u1 = DMatrix::from_fn(n, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut u3 = DMatrix::from_fn(k, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut w = vec![0.0; rank];
    for r in 0..rank {
        let a = u1.column(r).norm();
        let b = u3.column(r).norm();
        w[r] = a * a * b;
        u1.column_mut(r).unscale_mut(a);
        u3.column_mut(r).unscale_mut(b);
    }
    let mut factors = CpFactors::new(w, u1, u3)?;

    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|j| ((j + 1)..n).map(move |jp| (j, jp))).collect();
    let m = cfg.support_pairs();
    let mut slopes = Tensor4::zeros(n, k, p);
    let ones = vec![1.0; k];
    for l in 0..p {
        let mut chosen = sample(&mut rng, pairs.len(), m).into_vec();
        chosen.sort_unstable();
        for idx in chosen {
            let (j, jp) = pairs[idx];
            slopes.set_fiber(j, jp, l, &ones);
            slopes.set_fiber(jp, j, l, &ones);
        }
    }

    let mut x = DMatrix::from_fn(cfg.subjects, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    standardize_columns(&mut x)?;

    if cfg.zero_coefficients {
        factors.w.iter_mut().for_each(|v| *v = 0.0);
        slopes = Tensor4::zeros(n, k, p);
    }
    let baseline = cp_reconstruct(&factors);
    let support = support_matrix(&slopes, 0);
    let s0_realized = support.iter().filter(|v| **v != 0).count() as f64 / (n * n) as f64;

    let data = draw_population(cfg, &baseline, &slopes, &basis, x, &mut rng)?;
    Ok((
        data,
        GroundTruth {
            factors,
            baseline,
            slopes,
            support,
            s0_realized,
            basis,
        },
    ))
}

/// Draws every edge of every subject given the coefficients and covariates.
fn draw_population(
    cfg: &SimConfig,
    baseline: &Tensor3,
    slopes: &Tensor4,
    basis: &SplineBasis,
    x: DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<DynamicNetworkDataset> {
    let n = cfg.n;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|j| ((j + 1)..n).map(move |jp| (j, jp))).collect();
    let subjects = x.nrows();
    let grid = equispaced_grid(cfg.times);
    let phi = basis.basis_matrix(&grid)?;
    let curves = SplineCurves::new(baseline, &slope_slices(slopes), &phi);
    let t = cfg.times;
    let mut vals = vec![0.0; subjects * t * n * n];
    for i in 0..subjects {
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        for h in 0..t {
            let block = &mut vals[(i * t + h) * n * n..(i * t + h + 1) * n * n];
            for (q, &(j, jp)) in pairs.iter().enumerate() {
                let eta = curves.eta(q, h, &xi);
                let a = draw(cfg.family, eta, rng)?;
                block[j * n + jp] = a;
                block[jp * n + j] = a;
            }
        }
    }
    let adjacency = match cfg.family {
        Family::BernoulliLogit => Adjacency::U8(vals.iter().map(|v| *v as u8).collect()),
        _ => Adjacency::F64(vals),
    };
    DynamicNetworkDataset::new(cfg.family, n, grid, adjacency, x)
}

/// Two groups of `cfg.subjects` each sharing the baseline and slopes of one
/// draw, except that the second group's first-covariate slope gains `effect`
/// on `planted` node pairs outside the common support.
#[derive(Debug, Clone)]
pub struct TwoGroups {
    pub data: DynamicNetworkDataset,
    /// `true` for the first group.
    pub labels: Vec<bool>,
    /// Pairs `(j, j')`, `j < j'`, where the groups differ.
    pub planted: Vec<(usize, usize)>,
}

pub fn generate_two_groups(cfg: &SimConfig, planted: usize, effect: f64) -> Result<TwoGroups> {
    let (data_a, truth) = generate(cfg)?;
    let n = cfg.n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let free: Vec<(usize, usize)> = (0..n)
        .flat_map(|j| ((j + 1)..n).map(move |jp| (j, jp)))
        .filter(|&(j, jp)| truth.support[(j, jp)] == 0)
        .collect();
    if planted == 0 || planted > free.len() {
        return invalid(format!("cannot plant {planted} differences among {} free pairs", free.len()));
    }
    let mut chosen: Vec<(usize, usize)> = sample(&mut rng, free.len(), planted).into_iter().map(|i| free[i]).collect();
    chosen.sort_unstable();
    let mut slopes_b = truth.slopes.clone();
    let bump = vec![effect; cfg.basis_dim];
    for &(j, jp) in &chosen {
        slopes_b.set_fiber(j, jp, 0, &bump);
        slopes_b.set_fiber(jp, j, 0, &bump);
    }
    let mut x_b = DMatrix::from_fn(cfg.subjects, cfg.covariates, |_, _| rng.sample::<f64, _>(StandardNormal));
    standardize_columns(&mut x_b)?;
    let data_b = draw_population(cfg, &truth.baseline, &slopes_b, &truth.basis, x_b, &mut rng)?;
    let data = data_a.concat(&data_b)?;
    let labels = (0..2 * cfg.subjects).map(|i| i < cfg.subjects).collect();
    Ok(TwoGroups {
        data,
        labels,
        planted: chosen,
    })
}

fn draw(family: Family, eta: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mean = family.mean(eta);
    Ok(match family {
        Family::BernoulliLogit => f64::from(u8::from(rng.random_bool(mean.clamp(0.0, 1.0)))),
        Family::GaussianIdentity => Normal::new(mean, 1.0)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .sample(rng),
        Family::PoissonLog => {
            if mean <= 0.0 {
                0.0
            } else {
                Poisson::new(mean)
                    .map_err(|e| Error::NonFinite(format!("Poisson mean {mean}: {e}")))?
                    .sample(rng)
            }
        }
    })
}

fn slope_slices(g: &Tensor4) -> Vec<Tensor3> {
    (0..g.covariates()).map(|l| g.slice(l)).collect()
}

fn support_matrix(g: &Tensor4, l: usize) -> DMatrix<u8> {
    let norms = &fiber_group_norms(g)[l];
    DMatrix::from_fn(g.n(), g.n(), |j, jp| u8::from(j != jp && norms[(j, jp)] > 0.0))
}

/// Coefficients an estimator produced, on the spline basis or per time point.
#[derive(Debug, Clone)]
pub enum Estimate {
    /// `n × n × K` baseline and one `n × n × K` tensor per covariate.
    Spline { baseline: Tensor3, slopes: Vec<Tensor3> },
    /// `n × n × T` values at the observed time points.
    PerTime { baseline: Tensor3, slopes: Vec<Tensor3> },
}

impl Estimate {
    pub fn from_params(params: &ModelParams) -> Self {
        Estimate::Spline {
            baseline: params.baseline_tensor(),
            slopes: slope_slices(&params.slopes),
        }
    }

    pub fn from_dedgereg(de: &DEdgeRegResult) -> Self {
        Estimate::Spline {
            baseline: de.coefficients[0].clone(),
            slopes: de.coefficients[1..].to_vec(),
        }
    }

    pub fn from_edgereg(e: &EdgeRegResult) -> Self {
        Estimate::PerTime {
            baseline: e.coefficients[0].clone(),
            slopes: e.coefficients[1..].to_vec(),
        }
    }

    fn parts(&self) -> (&Tensor3, &[Tensor3]) {
        match self {
            Estimate::Spline { baseline, slopes } | Estimate::PerTime { baseline, slopes } => (baseline, slopes),
        }
    }
}

/// Baseline and slope curves for every unordered pair, evaluated on the time grid.
struct SplineCurves {
    t: usize,
    p: usize,
    /// `[pair][covariate + 1][time]`, covariate slot 0 holding the baseline.
    values: Vec<f64>,
}

impl SplineCurves {
    fn new(baseline: &Tensor3, slopes: &[Tensor3], phi: &DMatrix<f64>) -> Self {
        let n = baseline.dims()[0];
        let (t, k) = phi.shape();
        let p = slopes.len();
        let mut values = Vec::with_capacity(n * (n - 1) / 2 * (p + 1) * t);
        for j in 0..n {
            for jp in (j + 1)..n {
                for tensor in std::iter::once(baseline).chain(slopes) {
                    let fiber = tensor.fiber(j, jp);
                    for h in 0..t {
                        values.push((0..k).map(|kk| phi[(h, kk)] * fiber[kk]).sum());
                    }
                }
            }
        }
        Self { t, p, values }
    }

    fn per_time(baseline: &Tensor3, slopes: &[Tensor3]) -> Self {
        let [n, _, t] = baseline.dims();
        let p = slopes.len();
        let mut values = Vec::with_capacity(n * (n - 1) / 2 * (p + 1) * t);
        for j in 0..n {
            for jp in (j + 1)..n {
                for tensor in std::iter::once(baseline).chain(slopes) {
                    values.extend_from_slice(tensor.fiber(j, jp));
                }
            }
        }
        Self { t, p, values }
    }

    #[inline]
    fn eta(&self, pair: usize, h: usize, x: &[f64]) -> f64 {
        let base = pair * (self.p + 1) * self.t;
        let mut eta = self.values[base + h];
        for (l, xl) in x.iter().enumerate() {
            eta += xl * self.values[base + (l + 1) * self.t + h];
        }
        eta
    }
}

/// Accuracy of one estimate against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean over subjects of `‖μ − μ̂‖_F`, taken over the `j < j'` cells of
    /// the `n × n × T` mean array (each edge counted once).
    pub mu_error: f64,
    /// `‖B0 − B̂0‖_F` over off-diagonal fibers; absent for per-time estimates.
    pub b0_error: Option<f64>,
    /// `‖Γ − Γ̂‖_F` over off-diagonal fibers of all covariates.
    pub b1_error: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub fpr_conventional: Option<f64>,
}

fn offdiagonal_distance(a: &Tensor3, b: &Tensor3) -> f64 {
    let [n, _, _] = a.dims();
    let mut sum = 0.0;
    for j in 0..n {
        for jp in 0..n {
            if j != jp {
                sum += a.fiber(j, jp).iter().zip(b.fiber(j, jp)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
        }
    }
    sum.sqrt()
}

/// Scores `est` against `truth` on the subjects of `data`. `selection` is the
/// estimator's edge set for the first covariate, when it has one.
pub fn evaluate(
    est: &Estimate,
    selection: Option<&DMatrix<u8>>,
    truth: &GroundTruth,
    data: &DynamicNetworkDataset,
) -> Result<Metrics> {
    let n = data.n_nodes();
    let t = data.n_times();
    let p = data.n_covariates();
    let (baseline, slopes) = est.parts();
    let expected_k = match est {
        Estimate::Spline { .. } => truth.basis.dim(),
        Estimate::PerTime { .. } => t,
    };
    if let Estimate::Spline { .. } = est {
        if baseline.dims()[2] != truth.basis.dim() {
            return shape_err(format!(
                "estimate has basis dimension {}, truth uses {}",
                baseline.dims()[2],
                truth.basis.dim()
            ));
        }
    }
    if slopes.len() != p || truth.slopes.covariates() != p {
        return shape_err(format!(
            "estimate has {} slope tensors, truth {}, data {p} covariates",
            slopes.len(),
            truth.slopes.covariates()
        ));
    }
    for tensor in std::iter::once(baseline).chain(slopes) {
        if tensor.dims() != [n, n, expected_k] {
            return shape_err(format!("estimate tensor {:?}, expected {:?}", tensor.dims(), [n, n, expected_k]));
        }
    }
    if truth.baseline.dims()[0] != n {
        return shape_err(format!("truth has {} nodes, data {n}", truth.baseline.dims()[0]));
    }

    let phi = truth.basis.basis_matrix(data.time_grid())?;
    let true_curves = SplineCurves::new(&truth.baseline, &slope_slices(&truth.slopes), &phi);
    let est_curves = match est {
        Estimate::Spline { .. } => SplineCurves::new(baseline, slopes, &phi),
        Estimate::PerTime { .. } => SplineCurves::per_time(baseline, slopes),
    };
    let family = data.family();
    let npairs = n * (n - 1) / 2;
    let per_subject: Vec<f64> = (0..data.n_subjects())
        .into_par_iter()
        .map(|i| {
            let xi: Vec<f64> = data.covariates().row(i).iter().copied().collect();
            let mut sum = 0.0;
            for q in 0..npairs {
                for h in 0..t {
                    let d = family.mean(true_curves.eta(q, h, &xi)) - family.mean(est_curves.eta(q, h, &xi));
                    sum += d * d;
                }
            }
            sum.sqrt()
        })
        .collect();
    let mu_error = per_subject.iter().sum::<f64>() / per_subject.len() as f64;

    let (b0_error, b1_error) = match est {
        Estimate::Spline { .. } => {
            let b0 = offdiagonal_distance(baseline, &truth.baseline);
            let b1 = slopes
                .iter()
                .enumerate()
                .map(|(l, s)| offdiagonal_distance(s, &truth.slopes.slice(l)).powi(2))
                .sum::<f64>()
                .sqrt();
            (Some(b0), Some(b1))
        }
        Estimate::PerTime { .. } => (None, None),
    };

    let sel = match selection {
        Some(h) if truth.s0_realized > 0.0 => Some(tpr_fpr(h, &truth.support, truth.s0_realized)?),
        Some(_) => None,
        None => None,
    };
    Ok(Metrics {
        mu_error,
        b0_error,
        b1_error,
        tpr: sel.map(|s| s.tpr),
        fpr: sel.map(|s| s.fpr),
        fpr_conventional: sel.map(|s| s.fpr_conventional),
    })
}

/// Estimators compared in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    EdgeReg,
    DEdgeReg,
    DNetReg,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::EdgeReg, Method::DEdgeReg, Method::DNetReg];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::EdgeReg => "EdgeReg",
            Method::DEdgeReg => "DEdgeReg",
            Method::DNetReg => "DNetReg",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "edgereg" => Ok(Method::EdgeReg),
            "dedgereg" => Ok(Method::DEdgeReg),
            "dnetreg" => Ok(Method::DNetReg),
            other => invalid(format!("unknown method {other:?}")),
        }
    }
}

/// Fitting settings shared by every replicate of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyOptions {
    /// Basis, iteration limits and tolerances for DNetReg and DEdgeReg.
    /// `rank` and `lambda` are chosen by eBIC over the grids below.
    pub fit: FitOptions,
    pub rank_grid: Vec<usize>,
    pub lambdas: LambdaSpec,
    pub correction: Correction,
    pub alpha: f64,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            fit: FitOptions::default(),
            rank_grid: vec![1, 2, 3],
            lambdas: LambdaSpec::Relative {
                count: 10,
                min_ratio: 0.05,
            },
            correction: Correction::Bonferroni,
            alpha: 0.05,
        }
    }
}

/// One method on one replicate.
/// Everything a simulation study needs, as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub simulation: SimConfig,
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub study: StudyOptions,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            simulation: SimConfig::default(),
            replicates: 10,
            methods: Method::ALL.to_vec(),
            study: StudyOptions::default(),
        }
    }
}

impl BenchConfig {
    pub fn run(&self) -> Result<StudyReport> {
        run_study(&self.simulation, self.replicates, &self.methods, &self.study)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub method: Method,
    pub metrics: Option<Metrics>,
    pub rank: Option<usize>,
    pub lambda: Option<f64>,
    pub error: Option<String>,
}

/// Mean and sample standard deviation; `sd` is absent below two values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: Option<f64>,
}

impl Summary {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let m = values.len() as f64;
        let mean = values.iter().sum::<f64>() / m;
        let sd = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)).sqrt());
        Some(Self { mean, sd })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub successes: usize,
    pub failures: usize,
    pub mu_error: Option<Summary>,
    pub b0_error: Option<Summary>,
    pub b1_error: Option<Summary>,
    pub tpr: Option<Summary>,
    pub fpr: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: SimConfig,
    pub options: StudyOptions,
    pub replicates: usize,
    pub summary: Vec<MethodSummary>,
    pub records: Vec<ReplicateRecord>,
}

/// Seeds for replicates `0..count`, drawn from a stream keyed by `seed`.
pub fn replicate_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random()).collect()
}

/// Runs `replicates` independent simulations and scores each method on each.
/// Replicates run concurrently; records are ordered by replicate and method.
pub fn run_study(cfg: &SimConfig, replicates: usize, methods: &[Method], opts: &StudyOptions) -> Result<StudyReport> {
    if replicates == 0 {
        return invalid("replicates must be at least 1");
    }
    if methods.is_empty() {
        return invalid("no methods requested");
    }
    cfg.validate()?;
    opts.fit.validate()?;
    let mut methods = methods.to_vec();
    methods.sort_unstable();
    methods.dedup();

    let seeds = replicate_seeds(cfg.seed, replicates);
    let per_rep: Vec<Result<Vec<ReplicateRecord>>> = seeds
        .par_iter()
        .enumerate()
        .map(|(r, &seed)| run_replicate(cfg, r, seed, &methods, opts))
        .collect();
    let mut records = Vec::with_capacity(replicates * methods.len());
    for rep in per_rep {
        records.extend(rep?);
    }

    let summary = methods
        .iter()
        .map(|&method| {
            let ok: Vec<&Metrics> = records
                .iter()
                .filter(|r| r.method == method)
                .filter_map(|r| r.metrics.as_ref())
                .collect();
            let collect = |f: fn(&Metrics) -> Option<f64>| -> Option<Summary> {
                Summary::of(&ok.iter().filter_map(|m| f(m)).collect::<Vec<_>>())
            };
            MethodSummary {
                method,
                successes: ok.len(),
                failures: records.iter().filter(|r| r.method == method && r.metrics.is_none()).count(),
                mu_error: collect(|m| Some(m.mu_error)),
                b0_error: collect(|m| m.b0_error),
                b1_error: collect(|m| m.b1_error),
                tpr: collect(|m| m.tpr),
                fpr: collect(|m| m.fpr),
            }
        })
        .collect();
    Ok(StudyReport {
        config: cfg.clone(),
        options: opts.clone(),
        replicates,
        summary,
        records,
    })
}

fn run_replicate(
    cfg: &SimConfig,
    replicate: usize,
    seed: u64,
    methods: &[Method],
    opts: &StudyOptions,
) -> Result<Vec<ReplicateRecord>> {
    let rep_cfg = SimConfig { seed, ..cfg.clone() };
    let (data, truth) = generate(&rep_cfg)?;
    let basis = opts.fit.basis()?;
    let same_basis = basis == truth.basis;
    let record = |method: Method, outcome: Result<(Metrics, Option<usize>, Option<f64>)>| match outcome {
        Ok((m, rank, lambda)) => ReplicateRecord {
            replicate,
            seed,
            method,
            metrics: Some(m),
            rank,
            lambda,
            error: None,
        },
        Err(e) => {
            log::warn!("replicate {replicate}: {method} failed: {e}");
            ReplicateRecord {
                replicate,
                seed,
                method,
                metrics: None,
                rank: None,
                lambda: None,
                error: Some(e.to_string()),
            }
        }
    };
    // Coefficient errors need a common basis; μ-error does not.
    let score = |est: &Estimate, sel: Option<&DMatrix<u8>>| -> Result<Metrics> {
        if same_basis || matches!(est, Estimate::PerTime { .. }) {
            evaluate(est, sel, &truth, &data)
        } else {
            mu_only(est, sel, &truth, &data, &basis)
        }
    };

    let mut out = Vec::with_capacity(methods.len());
    let family = cfg.family;
    let de = if methods.iter().any(|m| matches!(m, Method::DEdgeReg | Method::DNetReg)) {
        Some(dedgereg_fit(&data, family, &basis))
    } else {
        None
    };
    for &method in methods {
        let outcome = match method {
            Method::EdgeReg => edgereg_fit(&data, family).and_then(|e| {
                let sel = select_edges(&e.p_values[0], opts.alpha, opts.correction)?;
                Ok((score(&Estimate::from_edgereg(&e), Some(&sel))?, None, None))
            }),
            Method::DEdgeReg => match de.as_ref().expect("fitted above") {
                Ok(d) => score(&Estimate::from_dedgereg(d), None).map(|m| (m, None, None)),
                Err(e) => Err(Error::AllFailed(e.to_string())),
            },
            Method::DNetReg => match de.as_ref().expect("fitted above") {
                Ok(d) => Problem::new(&data, family, &basis)
                    .and_then(|problem| tune_with(&problem, d, &opts.rank_grid, &opts.lambdas, &opts.fit))
                    .and_then(|t| {
                        let sel = support_matrix(&t.best.params.slopes, 0);
                        let m = score(&Estimate::from_params(&t.best.params), Some(&sel))?;
                        log::info!(
                            "replicate {replicate}: DNetReg R={} lambda={:.4e} mu-error={:.4}",
                            t.best_rank,
                            t.best_lambda,
                            m.mu_error
                        );
                        Ok((m, Some(t.best_rank), Some(t.best_lambda)))
                    }),
                Err(e) => Err(Error::AllFailed(format!("DEdgeReg start failed: {e}"))),
            },
        };
        out.push(record(method, outcome));
    }
    Ok(out)
}

/// μ-error and selection rates for an estimate on a different basis than the truth.
fn mu_only(
    est: &Estimate,
    selection: Option<&DMatrix<u8>>,
    truth: &GroundTruth,
    data: &DynamicNetworkDataset,
    basis: &SplineBasis,
) -> Result<Metrics> {
    let (baseline, slopes) = est.parts();
    let phi = basis.basis_matrix(data.time_grid())?;
    let curves = SplineCurves::new(baseline, slopes, &phi);
    let t = data.n_times();
    let n = data.n_nodes();
    // Re-express the estimate on a per-time grid and reuse the common path.
    let mut per_time: Vec<Tensor3> = (0..=slopes.len()).map(|_| Tensor3::zeros(n, n, t)).collect();
    let mut q = 0;
    for j in 0..n {
        for jp in (j + 1)..n {
            for (c, tensor) in per_time.iter_mut().enumerate() {
                let vals = &curves.values[(q * (curves.p + 1) + c) * t..(q * (curves.p + 1) + c + 1) * t];
                tensor.fiber_mut(j, jp).copy_from_slice(vals);
                tensor.fiber_mut(jp, j).copy_from_slice(vals);
            }
            q += 1;
        }
    }
    let baseline = per_time.remove(0);
    evaluate(
        &Estimate::PerTime {
            baseline,
            slopes: per_time,
        },
        selection,
        truth,
        data,
    )
}

impl StudyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per method. Numbers carry 17 significant digits; absent
    /// values are empty fields.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = [
            "method",
            "n",
            "N",
            "T",
            "R",
            "s0",
            "replicates",
            "successes",
            "failures",
            "mu_error_mean",
            "mu_error_sd",
            "b0_error_mean",
            "b0_error_sd",
            "b1_error_mean",
            "b1_error_sd",
            "tpr_mean",
            "tpr_sd",
            "fpr_mean",
            "fpr_sd",
        ];
        w.write_record(header).map_err(csv_err)?;
        let c = &self.config;
        for s in &self.summary {
            let mut row = vec![
                s.method.to_string(),
                c.n.to_string(),
                c.subjects.to_string(),
                c.times.to_string(),
                c.rank.to_string(),
                format_f64(c.s0),
                self.replicates.to_string(),
                s.successes.to_string(),
                s.failures.to_string(),
            ];
            for stat in [s.mu_error, s.b0_error, s.b1_error, s.tpr, s.fpr] {
                row.push(stat.map(|v| format_f64(v.mean)).unwrap_or_default());
                row.push(stat.and_then(|v| v.sd).map(format_f64).unwrap_or_default());
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidData(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidData(e.to_string()))
    }

    pub fn method(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    /// Metrics of `method` per replicate, `None` where it failed.
    pub fn per_replicate(&self, method: Method) -> Vec<Option<Metrics>> {
        self.records.iter().filter(|r| r.method == method).map(|r| r.metrics).collect()
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidData(e.to_string())
}

/// Scientific notation with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}
