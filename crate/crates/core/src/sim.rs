//! Simulation and benchmark harness.
//!
//! Generates spatial regression problems on a grid (covariate rows drawn
//! from a Matern field, one shared coefficient field, Gaussian or uniform
//! noise), scores recovery with normalized RMSE metrics, and runs the
//! built-in experiments: NRMSE against sample size, parameter recovery
//! against a known-coefficients MLE oracle, prior misspecification, and
//! EM versus cross-validated Ridge.

use std::io::Write;
use std::time::Instant;

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{StandardNormal, Uniform};

use crate::covariance::{
    covariance_matrix, sample_coefficients_with, CovarianceFamily, FamilyKind,
};
use crate::em::{
    em_fit, posterior_predict, Dataset, EmConfig, FitResult, ModelParams, VARIANCE_FLOOR,
};
use crate::error::{ModelError, Result};
use crate::geometry::GridGeometry;
use crate::linalg::cholesky;

/// Residual-noise model for simulated responses.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    /// N(0, sigma2) with sigma2 taken from the simulation config.
    Gaussian,
    /// Uniform on [low, high]; not centered on purpose.
    Uniform { low: f64, high: f64 },
}

/// Configuration of one simulated problem.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub grid: (usize, usize),
    /// Training sample size; the test set adds `round(n * test_fraction)`
    /// extra rows sharing the same coefficients.
    pub n: usize,
    /// Family generating the covariate rows.
    pub x_family: CovarianceFamily,
    /// Family generating the shared coefficient field.
    pub beta_family: CovarianceFamily,
    pub sigma2: f64,
    pub noise: NoiseModel,
    pub seed: u64,
    pub test_fraction: f64,
}

impl SimConfig {
    /// Paper-style defaults: 15x15 grid, Matern(6, 2) covariates, Gaussian
    /// noise with variance 36, half-sized test set.
    pub fn new(beta_family: CovarianceFamily, n: usize, seed: u64) -> Self {
        Self {
            grid: (15, 15),
            n,
            x_family: CovarianceFamily::Matern { var: 6.0, range: 2.0 },
            beta_family,
            sigma2: 36.0,
            noise: NoiseModel::Gaussian,
            seed,
            test_fraction: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "sample size must be at least 2, got {}",
                self.n
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "test fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if !(self.sigma2 >= 0.0) || !self.sigma2.is_finite() {
            return Err(ModelError::InvalidConfig(format!(
                "noise variance must be non-negative, got {}",
                self.sigma2
            )));
        }
        if let NoiseModel::Uniform { low, high } = self.noise {
            if !(low < high) {
                return Err(ModelError::InvalidConfig(format!(
                    "uniform noise needs low < high, got [{low}, {high}]"
                )));
            }
        }
        self.x_family.validate()?;
        self.beta_family.validate()
    }
}

/// A simulated problem: training data, held-out test data, the true
/// coefficients and the geometry they live on.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub train: Dataset,
    pub test: Dataset,
    pub true_beta: Array1<f64>,
    pub geometry: GridGeometry,
}

/// Simulates a dataset; deterministic given the seed, with the test rows
/// disjoint from the training rows.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<SimulatedData> {
    cfg.validate()?;
    let geometry = GridGeometry::grid(cfg.grid.0, cfg.grid.1)?;
    let d = geometry.n_sites();
    let n_test = ((cfg.n as f64) * cfg.test_fraction).round() as usize;
    let n_total = cfg.n + n_test;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);

    let true_beta = sample_coefficients_with(&cfg.beta_family, &geometry, &mut rng)?;

    let x_cov = covariance_matrix(&cfg.x_family, &geometry)?;
    let x_chol = cholesky(&x_cov)?;
    let mut x = Array2::zeros((n_total, d));
    let mut z = Array1::zeros(d);
    for mut row in x.rows_mut() {
        for zi in z.iter_mut() {
            *zi = rng.sample::<f64, _>(StandardNormal);
        }
        row.assign(&x_chol.lower_times(&z));
    }

    let mut y = x.dot(&true_beta);
    match cfg.noise {
        NoiseModel::Gaussian => {
            let sd = cfg.sigma2.sqrt();
            for yi in y.iter_mut() {
                *yi += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        NoiseModel::Uniform { low, high } => {
            let dist = Uniform::new(low, high).map_err(|e| {
                ModelError::InvalidConfig(format!("uniform noise bounds: {e}"))
            })?;
            for yi in y.iter_mut() {
                *yi += rng.sample(dist);
            }
        }
    }

    let train = Dataset::new(
        y.slice(s![..cfg.n]).to_owned(),
        x.slice(s![..cfg.n, ..]).to_owned(),
    )?;
    let test = Dataset::new(
        y.slice(s![cfg.n..]).to_owned(),
        x.slice(s![cfg.n.., ..]).to_owned(),
    )?;
    Ok(SimulatedData {
        train,
        test,
        true_beta,
        geometry,
    })
}

fn sample_sd(values: &Array1<f64>) -> f64 {
    let n = values.len() as f64;
    let mean = values.sum() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Root mean squared coefficient error over the sites, normalized by the
/// sample standard deviation of the true coefficients.
pub fn nrmse_beta(true_beta: &Array1<f64>, est_beta: &Array1<f64>) -> Result<f64> {
    if true_beta.len() != est_beta.len() {
        return Err(ModelError::DimensionMismatch(format!(
            "coefficient vectors have lengths {} and {}",
            true_beta.len(),
            est_beta.len()
        )));
    }
    if true_beta.len() < 2 {
        return Err(ModelError::InvalidData(
            "normalized RMSE needs at least two coefficients".into(),
        ));
    }
    let sd = sample_sd(true_beta);
    if sd == 0.0 {
        return Err(ModelError::InvalidData(
            "true coefficients are constant; normalized RMSE undefined".into(),
        ));
    }
    let mse = true_beta
        .iter()
        .zip(est_beta.iter())
        .map(|(t, e)| (t - e).powi(2))
        .sum::<f64>()
        / true_beta.len() as f64;
    Ok(mse.sqrt() / sd)
}

/// Root mean squared prediction error on held-out data, normalized by the
/// sample standard deviation of the held-out responses.
pub fn nrmse_y(y_true: &Array1<f64>, y_pred: &Array1<f64>) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(ModelError::DimensionMismatch(format!(
            "response vectors have lengths {} and {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.len() < 2 {
        return Err(ModelError::InvalidData(
            "normalized RMSE needs at least two test responses".into(),
        ));
    }
    let sd = sample_sd(y_true);
    if sd == 0.0 {
        return Err(ModelError::InvalidData(
            "test responses are constant; normalized RMSE undefined".into(),
        ));
    }
    let mse = y_true
        .iter()
        .zip(y_pred.iter())
        .map(|(t, p)| (t - p).powi(2))
        .sum::<f64>()
        / y_true.len() as f64;
    Ok(mse.sqrt() / sd)
}

/// Maximum-likelihood parameter estimates with the true coefficients
/// plugged in; the simulation-only reference the EM fits are compared to.
pub fn mle_oracle(
    data: &Dataset,
    true_beta: &Array1<f64>,
    family_kind: FamilyKind,
    geom: Option<&GridGeometry>,
    config: &EmConfig,
) -> Result<ModelParams> {
    let d = data.num_covariates();
    if true_beta.len() != d {
        return Err(ModelError::DimensionMismatch(format!(
            "true coefficients have length {}, expected {d}",
            true_beta.len()
        )));
    }
    let resid = data.y() - &data.x().dot(true_beta);
    let sigma2 = (resid.dot(&resid) / data.n() as f64).max(VARIANCE_FLOOR);

    let mut moment = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            moment[(i, j)] = true_beta[i] * true_beta[j];
        }
    }
    let family = match family_kind {
        FamilyKind::Diagonal => CovarianceFamily::Diagonal {
            var: (true_beta.dot(true_beta) / d as f64).max(VARIANCE_FLOOR),
        },
        FamilyKind::Matern => {
            let geom = geom.ok_or(ModelError::GeometryRequired("matern"))?;
            let range_max = config.range_max.unwrap_or(10.0 * geom.diameter());
            let start = CovarianceFamily::Matern {
                var: 1.0,
                range: (geom.diameter() / 4.0).clamp(config.range_min, range_max),
            };
            profile_family_from_moment(&moment, geom, &start, config)?
        }
        FamilyKind::Wcar => {
            let geom = geom.ok_or(ModelError::GeometryRequired("wcar"))?;
            let start = CovarianceFamily::Wcar {
                cond_var: 1.0,
                autocorr: 0.5,
            };
            profile_family_from_moment(&moment, geom, &start, config)?
        }
    };
    Ok(ModelParams {
        sigma2,
        family,
        mean: None,
    })
}

fn profile_family_from_moment(
    moment: &Array2<f64>,
    geom: &GridGeometry,
    start: &CovarianceFamily,
    config: &EmConfig,
) -> Result<CovarianceFamily> {
    // same profile maximizations as the M-steps, driven through a synthetic
    // posterior carrying the fixed-coefficient moment
    let post = crate::em::PosteriorState {
        mu: Array1::zeros(geom.n_sites()),
        cov: Array2::eye(geom.n_sites()),
        second_moment: moment.clone(),
        expected_rss: 0.0,
    };
    let outcome = match start.kind() {
        FamilyKind::Matern => crate::em::m_step_matern(&post, geom, start, config)?,
        FamilyKind::Wcar => crate::em::m_step_wcar(&post, geom, start, config)?,
        FamilyKind::Diagonal => unreachable!("diagonal handled in closed form"),
    };
    Ok(outcome.family)
}

/// Cross-validated Ridge fit: the grid point minimizing the pooled
/// held-fold squared error, refit on all data.
#[derive(Debug, Clone)]
pub struct CvRidgeFit {
    pub beta: Array1<f64>,
    pub lambda: f64,
    /// Pooled held-fold mean squared error per grid point.
    pub cv_mse: Vec<f64>,
}

/// Standard k-fold cross-validation over the Ridge path; fold assignment is
/// a seeded shuffled round-robin.
pub fn cv_ridge_baseline(
    data: &Dataset,
    k: usize,
    lambda_grid: &[f64],
    seed: u64,
) -> Result<CvRidgeFit> {
    let n = data.n();
    let d = data.num_covariates();
    if k < 2 || k > n {
        return Err(ModelError::InvalidConfig(format!(
            "fold count must lie in [2, {n}], got {k}"
        )));
    }
    if lambda_grid.is_empty() || lambda_grid.iter().any(|&l| !(l > 0.0)) {
        return Err(ModelError::InvalidConfig(
            "lambda grid must be non-empty and strictly positive".into(),
        ));
    }

    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // Fisher-Yates; stable across platforms for a fixed seed
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let mut fold_of = vec![0usize; n];
    for (pos, &idx) in perm.iter().enumerate() {
        fold_of[idx] = pos % k;
    }

    let x = data.x();
    let y = data.y();
    let mut gram_total = Array2::zeros((d, d));
    let mut maj_total = Array1::zeros(d);
    let mut gram_fold = vec![Array2::<f64>::zeros((d, d)); k];
    let mut maj_fold = vec![Array1::<f64>::zeros(d); k];
    for i in 0..n {
        let row = x.row(i);
        let f = fold_of[i];
        for a in 0..d {
            let ra = row[a];
            if ra != 0.0 {
                for b in 0..d {
                    gram_fold[f][(a, b)] += ra * row[b];
                }
                maj_fold[f][a] += ra * y[i];
            }
        }
    }
    for f in 0..k {
        gram_total += &gram_fold[f];
        maj_total += &maj_fold[f];
    }

    let mut cv_mse = Vec::with_capacity(lambda_grid.len());
    for &lambda in lambda_grid {
        let mut total_se = 0.0;
        for f in 0..k {
            let mut gram = &gram_total - &gram_fold[f];
            for i in 0..d {
                gram[(i, i)] += lambda;
            }
            let rhs = &maj_total - &maj_fold[f];
            let beta = cholesky(&gram)
                .map_err(|e| {
                    ModelError::NotPositiveDefinite(format!(
                        "ridge normal equations at lambda {lambda}: {e}"
                    ))
                })?
                .solve_vec(&rhs);
            for i in 0..n {
                if fold_of[i] == f {
                    let pred = x.row(i).dot(&beta);
                    total_se += (y[i] - pred).powi(2);
                }
            }
        }
        cv_mse.push(total_se / n as f64);
    }
    let best = cv_mse
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    let lambda = lambda_grid[best];
    let mut gram = gram_total;
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let beta = cholesky(&gram)?.solve_vec(&maj_total);
    Ok(CvRidgeFit {
        beta,
        lambda,
        cv_mse,
    })
}

/// Built-in experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    /// NRMSE of coefficients and predictions across sample sizes, per family.
    NrmseVsN,
    /// EM and MLE-oracle parameter estimates across n, d and noise variance.
    ParamsVsNDSigma,
    /// Coefficients from a Matern field fitted by all three families.
    Misspecification,
    /// EM against 10-fold cross-validated Ridge, Gaussian noise.
    EmVsCvGaussian,
    /// EM against 10-fold cross-validated Ridge, uniform(2, 30) noise.
    EmVsCvUniform,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::NrmseVsN => "nrmse_vs_n",
            ExperimentKind::ParamsVsNDSigma => "params_vs_n_d_sigma",
            ExperimentKind::Misspecification => "misspecification",
            ExperimentKind::EmVsCvGaussian => "em_vs_cv_gaussian",
            ExperimentKind::EmVsCvUniform => "em_vs_cv_uniform",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nrmse_vs_n" => Ok(ExperimentKind::NrmseVsN),
            "params_vs_n_d_sigma" => Ok(ExperimentKind::ParamsVsNDSigma),
            "misspecification" => Ok(ExperimentKind::Misspecification),
            "em_vs_cv_gaussian" => Ok(ExperimentKind::EmVsCvGaussian),
            "em_vs_cv_uniform" => Ok(ExperimentKind::EmVsCvUniform),
            other => Err(ModelError::InvalidConfig(format!(
                "unknown experiment '{other}'"
            ))),
        }
    }
}

/// Full experiment specification with desk-scale defaults.
#[derive(Debug, Clone)]
pub struct ExperimentDesign {
    pub kind: ExperimentKind,
    pub replicates: usize,
    pub base_seed: u64,
    pub grid: (usize, usize),
    pub n: usize,
    pub sigma2: f64,
    /// Sample sizes for the NRMSE sweep.
    pub n_grid: Vec<usize>,
    /// Parameter-recovery sweeps.
    pub n_grid_params: Vec<usize>,
    pub dim_grid: Vec<(usize, usize)>,
    pub sigma2_grid: Vec<f64>,
    pub em: EmConfig,
    pub cv_folds: usize,
    pub lambda_grid: Vec<f64>,
}

impl ExperimentDesign {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            replicates: 20,
            base_seed: 1,
            grid: (15, 15),
            n: 800,
            sigma2: 36.0,
            n_grid: vec![50, 200, 800],
            n_grid_params: vec![50, 200, 400, 800],
            dim_grid: vec![(5, 5), (10, 10), (15, 15)],
            sigma2_grid: vec![9.0, 36.0, 100.0, 225.0],
            em: EmConfig::default(),
            cv_folds: 10,
            lambda_grid: default_lambda_grid(),
        }
    }
}

/// 50 log-spaced points in [1e-4, 1e4].
pub fn default_lambda_grid() -> Vec<f64> {
    let (lo, hi, m) = (1e-4_f64, 1e4_f64, 50);
    (0..m)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (m - 1) as f64).exp())
        .collect()
}

/// One fitted replicate; `status` is "ok" or an error description, and the
/// estimate fields are absent for methods they do not apply to.
#[derive(Debug, Clone)]
pub struct ReplicateRecord {
    pub experiment: String,
    pub n: usize,
    pub d: usize,
    pub sigma2_true: f64,
    pub family_true: String,
    pub family_fit: String,
    pub seed: u64,
    pub status: String,
    pub sigma2_hat: Option<f64>,
    pub sigma_beta2_hat: Option<f64>,
    pub phi_hat: Option<f64>,
    pub tau2_hat: Option<f64>,
    pub alpha_hat: Option<f64>,
    pub lambda_hat: Option<f64>,
    pub nrmse_beta: Option<f64>,
    pub nrmse_y: Option<f64>,
    pub iterations: Option<usize>,
    pub wall_ms: u64,
}

impl ReplicateRecord {
    fn empty(experiment: &str, n: usize, d: usize, sigma2: f64, truth: &str, fit: &str, seed: u64) -> Self {
        Self {
            experiment: experiment.to_string(),
            n,
            d,
            sigma2_true: sigma2,
            family_true: truth.to_string(),
            family_fit: fit.to_string(),
            seed,
            status: "ok".to_string(),
            sigma2_hat: None,
            sigma_beta2_hat: None,
            phi_hat: None,
            tau2_hat: None,
            alpha_hat: None,
            lambda_hat: None,
            nrmse_beta: None,
            nrmse_y: None,
            iterations: None,
            wall_ms: 0,
        }
    }

    fn absorb_params(&mut self, params: &ModelParams) {
        self.sigma2_hat = Some(params.sigma2);
        match params.family {
            CovarianceFamily::Diagonal { var } => self.sigma_beta2_hat = Some(var),
            CovarianceFamily::Matern { var, range } => {
                self.sigma_beta2_hat = Some(var);
                self.phi_hat = Some(range);
            }
            CovarianceFamily::Wcar { cond_var, autocorr } => {
                self.tau2_hat = Some(cond_var);
                self.alpha_hat = Some(autocorr);
            }
        }
    }
}

/// Aggregate row: quartiles of one metric over the successful replicates of
/// one design cell.
#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub experiment: String,
    pub n: usize,
    pub d: usize,
    pub sigma2_true: f64,
    pub family_true: String,
    pub family_fit: String,
    pub metric: String,
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// All records and aggregates produced by one experiment run.
#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub records: Vec<ReplicateRecord>,
    pub aggregates: Vec<AggregateRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ExperimentReport {
    /// Writes the per-replicate CSV. Wall times are telemetry and are
    /// zeroed unless `include_timings` is set, keeping the default output
    /// byte-for-byte reproducible for a fixed design and seed.
    pub fn write_records_csv<W: Write>(&self, w: W, include_timings: bool) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "experiment",
            "n",
            "d",
            "sigma2_true",
            "family_true",
            "family_fit",
            "seed",
            "status",
            "sigma2_hat",
            "sigma_beta2_hat",
            "phi_hat",
            "tau2_hat",
            "alpha_hat",
            "lambda_hat",
            "nrmse_beta",
            "nrmse_y",
            "iterations",
            "wall_ms",
        ])?;
        for r in &self.records {
            wtr.write_record([
                r.experiment.clone(),
                r.n.to_string(),
                r.d.to_string(),
                r.sigma2_true.to_string(),
                r.family_true.clone(),
                r.family_fit.clone(),
                r.seed.to_string(),
                r.status.clone(),
                fmt_opt(r.sigma2_hat),
                fmt_opt(r.sigma_beta2_hat),
                fmt_opt(r.phi_hat),
                fmt_opt(r.tau2_hat),
                fmt_opt(r.alpha_hat),
                fmt_opt(r.lambda_hat),
                fmt_opt(r.nrmse_beta),
                fmt_opt(r.nrmse_y),
                r.iterations.map(|i| i.to_string()).unwrap_or_default(),
                if include_timings { r.wall_ms.to_string() } else { "0".to_string() },
            ])?;
        }
        wtr.flush()
    }

    pub fn write_aggregates_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "experiment",
            "n",
            "d",
            "sigma2_true",
            "family_true",
            "family_fit",
            "metric",
            "count",
            "median",
            "q1",
            "q3",
        ])?;
        for a in &self.aggregates {
            wtr.write_record([
                a.experiment.clone(),
                a.n.to_string(),
                a.d.to_string(),
                a.sigma2_true.to_string(),
                a.family_true.clone(),
                a.family_fit.clone(),
                a.metric.clone(),
                a.count.to_string(),
                a.median.to_string(),
                a.q1.to_string(),
                a.q3.to_string(),
            ])?;
        }
        wtr.flush()
    }

    /// Median of one metric over the successful replicates of a cell,
    /// selected by fitted family and sample size.
    pub fn median_metric(&self, family_fit: &str, n: usize, metric: &str) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.family_fit == family_fit && a.n == n && a.metric == metric)
            .map(|a| a.median)
    }

    fn aggregate(&mut self) {
        #[derive(PartialEq, Eq, Hash, Clone)]
        struct CellKey(String, usize, usize, String, String, String);
        let mut order: Vec<CellKey> = Vec::new();
        let mut buckets: std::collections::HashMap<CellKey, (f64, Vec<f64>)> =
            std::collections::HashMap::new();
        let metrics: [(&str, fn(&ReplicateRecord) -> Option<f64>); 7] = [
            ("sigma2_hat", |r| r.sigma2_hat),
            ("sigma_beta2_hat", |r| r.sigma_beta2_hat),
            ("phi_hat", |r| r.phi_hat),
            ("tau2_hat", |r| r.tau2_hat),
            ("alpha_hat", |r| r.alpha_hat),
            ("nrmse_beta", |r| r.nrmse_beta),
            ("nrmse_y", |r| r.nrmse_y),
        ];
        for r in &self.records {
            if r.status != "ok" {
                continue;
            }
            for (name, get) in metrics {
                if let Some(v) = get(r) {
                    let key = CellKey(
                        r.experiment.clone(),
                        r.n,
                        r.d,
                        r.family_true.clone(),
                        r.family_fit.clone(),
                        name.to_string(),
                    );
                    let entry = buckets.entry(key.clone()).or_insert_with(|| {
                        order.push(key);
                        (r.sigma2_true, Vec::new())
                    });
                    entry.1.push(v);
                }
            }
        }
        self.aggregates = order
            .into_iter()
            .map(|key| {
                let (sigma2_true, mut vals) = buckets.remove(&key).expect("bucket exists");
                vals.sort_by(f64::total_cmp);
                AggregateRow {
                    experiment: key.0,
                    n: key.1,
                    d: key.2,
                    sigma2_true,
                    family_true: key.3,
                    family_fit: key.4,
                    metric: key.5,
                    count: vals.len(),
                    median: quantile(&vals, 0.5),
                    q1: quantile(&vals, 0.25),
                    q3: quantile(&vals, 0.75),
                }
            })
            .collect();
    }
}

/// Linear-interpolation quantile of an already-sorted slice.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Centers the training data, fits by EM, and scores the fit against the
/// truth; predictions are mapped back to the original scale.
pub fn fit_and_score(
    sim: &SimulatedData,
    family_kind: FamilyKind,
    em: &EmConfig,
) -> Result<(FitResult, f64, f64)> {
    let (train_c, centering) = sim.train.center();
    let fit = em_fit(&train_c, family_kind, Some(&sim.geometry), em)?;
    let nb = nrmse_beta(&sim.true_beta, &fit.posterior.mu)?;
    let x_test = centering.center_design(sim.test.x())?;
    let (pred_centered, _) = posterior_predict(&x_test, &fit)?;
    let pred = centering.shift_predictions(&pred_centered);
    let ny = nrmse_y(sim.test.y(), &pred)?;
    Ok((fit, nb, ny))
}

fn paper_beta_families() -> [(&'static str, CovarianceFamily, FamilyKind); 3] {
    [
        (
            "diagonal",
            CovarianceFamily::Diagonal { var: 7.0 },
            FamilyKind::Diagonal,
        ),
        (
            "matern",
            CovarianceFamily::Matern { var: 0.1, range: 4.0 },
            FamilyKind::Matern,
        ),
        (
            "wcar",
            CovarianceFamily::Wcar { cond_var: 1.0, autocorr: 0.9 },
            FamilyKind::Wcar,
        ),
    ]
}

/// Runs a built-in experiment; individual replicate failures become error
/// rows instead of aborting the sweep.
pub fn run_experiment(design: &ExperimentDesign) -> Result<ExperimentReport> {
    design.em.validate()?;
    if design.replicates == 0 {
        return Err(ModelError::InvalidConfig("replicates must be at least 1".into()));
    }
    let mut report = ExperimentReport::default();
    match design.kind {
        ExperimentKind::NrmseVsN => run_nrmse_vs_n(design, &mut report)?,
        ExperimentKind::ParamsVsNDSigma => run_params_sweep(design, &mut report)?,
        ExperimentKind::Misspecification => run_misspecification(design, &mut report)?,
        ExperimentKind::EmVsCvGaussian => run_em_vs_cv(design, &mut report, NoiseModel::Gaussian)?,
        ExperimentKind::EmVsCvUniform => run_em_vs_cv(
            design,
            &mut report,
            NoiseModel::Uniform { low: 2.0, high: 30.0 },
        )?,
    }
    report.aggregate();
    Ok(report)
}

fn em_replicate_record(
    design: &ExperimentDesign,
    experiment: &str,
    cfg: &SimConfig,
    truth_name: &str,
    fit_kind: FamilyKind,
) -> ReplicateRecord {
    let d = cfg.grid.0 * cfg.grid.1;
    let mut rec = ReplicateRecord::empty(
        experiment,
        cfg.n,
        d,
        cfg.sigma2,
        truth_name,
        fit_kind.name(),
        cfg.seed,
    );
    let started = Instant::now();
    let outcome = simulate_dataset(cfg)
        .and_then(|sim| fit_and_score(&sim, fit_kind, &design.em));
    rec.wall_ms = started.elapsed().as_millis() as u64;
    match outcome {
        Ok((fit, nb, ny)) => {
            rec.absorb_params(&fit.params);
            rec.nrmse_beta = Some(nb);
            rec.nrmse_y = Some(ny);
            rec.iterations = Some(fit.iterations);
        }
        Err(e) => rec.status = format!("error: {e}"),
    }
    rec
}

fn run_nrmse_vs_n(design: &ExperimentDesign, report: &mut ExperimentReport) -> Result<()> {
    for (truth_name, beta_family, fit_kind) in paper_beta_families() {
        for &n in &design.n_grid {
            for rep in 0..design.replicates {
                let mut cfg = SimConfig::new(beta_family.clone(), n, design.base_seed + rep as u64);
                cfg.grid = design.grid;
                cfg.sigma2 = design.sigma2;
                report.records.push(em_replicate_record(
                    design,
                    design.kind.name(),
                    &cfg,
                    truth_name,
                    fit_kind,
                ));
            }
        }
    }
    Ok(())
}

fn run_params_sweep(design: &ExperimentDesign, report: &mut ExperimentReport) -> Result<()> {
    // one row per (axis cell, replicate, method), EM and MLE side by side
    let mut cells: Vec<((usize, usize), usize, f64)> = Vec::new();
    for &n in &design.n_grid_params {
        cells.push((design.grid, n, design.sigma2));
    }
    for &grid in &design.dim_grid {
        if grid != design.grid {
            cells.push((grid, design.n, design.sigma2));
        }
    }
    for &s2 in &design.sigma2_grid {
        if s2 != design.sigma2 {
            cells.push((design.grid, design.n, s2));
        }
    }
    for (truth_name, beta_family, fit_kind) in paper_beta_families() {
        for &(grid, n, sigma2) in &cells {
            for rep in 0..design.replicates {
                let mut cfg = SimConfig::new(beta_family.clone(), n, design.base_seed + rep as u64);
                cfg.grid = grid;
                cfg.sigma2 = sigma2;
                report.records.push(em_replicate_record(
                    design,
                    design.kind.name(),
                    &cfg,
                    truth_name,
                    fit_kind,
                ));

                // oracle row, family_fit suffixed with the method
                let d = grid.0 * grid.1;
                let mut rec = ReplicateRecord::empty(
                    design.kind.name(),
                    n,
                    d,
                    sigma2,
                    truth_name,
                    &format!("{}_mle", fit_kind.name()),
                    cfg.seed,
                );
                let started = Instant::now();
                let outcome = simulate_dataset(&cfg).and_then(|sim| {
                    mle_oracle(
                        &sim.train,
                        &sim.true_beta,
                        fit_kind,
                        Some(&sim.geometry),
                        &design.em,
                    )
                });
                rec.wall_ms = started.elapsed().as_millis() as u64;
                match outcome {
                    Ok(params) => rec.absorb_params(&params),
                    Err(e) => rec.status = format!("error: {e}"),
                }
                report.records.push(rec);
            }
        }
    }
    Ok(())
}

fn run_misspecification(design: &ExperimentDesign, report: &mut ExperimentReport) -> Result<()> {
    let beta_family = CovarianceFamily::Matern { var: 0.1, range: 4.0 };
    for rep in 0..design.replicates {
        let mut cfg = SimConfig::new(beta_family.clone(), design.n, design.base_seed + rep as u64);
        cfg.grid = design.grid;
        cfg.sigma2 = design.sigma2;
        for fit_kind in [FamilyKind::Matern, FamilyKind::Wcar, FamilyKind::Diagonal] {
            report.records.push(em_replicate_record(
                design,
                design.kind.name(),
                &cfg,
                "matern",
                fit_kind,
            ));
        }
    }
    Ok(())
}

fn run_em_vs_cv(
    design: &ExperimentDesign,
    report: &mut ExperimentReport,
    noise: NoiseModel,
) -> Result<()> {
    let beta_family = CovarianceFamily::Diagonal { var: 7.0 };
    for rep in 0..design.replicates {
        let mut cfg = SimConfig::new(beta_family.clone(), design.n, design.base_seed + rep as u64);
        cfg.grid = design.grid;
        cfg.sigma2 = design.sigma2;
        cfg.noise = noise.clone();
        report.records.push(em_replicate_record(
            design,
            design.kind.name(),
            &cfg,
            "diagonal",
            FamilyKind::Diagonal,
        ));

        let d = cfg.grid.0 * cfg.grid.1;
        let mut rec = ReplicateRecord::empty(
            design.kind.name(),
            cfg.n,
            d,
            cfg.sigma2,
            "diagonal",
            "cv_ridge",
            cfg.seed,
        );
        let started = Instant::now();
        let outcome = simulate_dataset(&cfg).and_then(|sim| {
            let (train_c, centering) = sim.train.center();
            let cv = cv_ridge_baseline(&train_c, design.cv_folds, &design.lambda_grid, cfg.seed)?;
            let nb = nrmse_beta(&sim.true_beta, &cv.beta)?;
            let x_test = centering.center_design(sim.test.x())?;
            let pred = centering.shift_predictions(&x_test.dot(&cv.beta));
            let ny = nrmse_y(sim.test.y(), &pred)?;
            Ok((cv, nb, ny))
        });
        rec.wall_ms = started.elapsed().as_millis() as u64;
        match outcome {
            Ok((cv, nb, ny)) => {
                rec.lambda_hat = Some(cv.lambda);
                rec.nrmse_beta = Some(nb);
                rec.nrmse_y = Some(ny);
            }
            Err(e) => rec.status = format!("error: {e}"),
        }
        report.records.push(rec);
    }
    Ok(())
}
