//! The three coefficient-prior families: diagonal, Matern (smoothness fixed
//! at 3/2) and the weighted conditional autoregressive (WCAR) model.
//!
//! Each family knows how to produce its covariance matrix, its precision
//! matrix, the log-determinant of the precision, and exact draws from the
//! prior. The WCAR precision is parameterized directly as
//! `(D - alpha A) / tau^2` with `D = diag(neighbor counts)`, the symmetric
//! arrangement that is positive definite for `|alpha| < 1`.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{ModelError, Result};
use crate::geometry::GridGeometry;
use crate::linalg::{cholesky, symmetrize, CholeskyFactor};

/// Smoothness of the Matern family; fixed, not estimated.
pub const MATERN_SMOOTHNESS: f64 = 1.5;

/// Relative diagonal jitter applied to Matern covariances before factorization.
pub const MATERN_JITTER_REL: f64 = 1e-10;

/// Prior covariance family of the regression coefficients.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceFamily {
    /// Constant-diagonal covariance `var * I`.
    Diagonal { var: f64 },
    /// Matern covariance with smoothness 3/2: `var * (1 + h/range) exp(-h/range)`.
    Matern { var: f64, range: f64 },
    /// Weighted CAR prior with conditional variance `cond_var` (tau^2) and
    /// spatial dependence `autocorr` (alpha), |autocorr| < 1.
    Wcar { cond_var: f64, autocorr: f64 },
}

/// Family selector without parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    Diagonal,
    Matern,
    Wcar,
}

impl FamilyKind {
    pub fn name(&self) -> &'static str {
        match self {
            FamilyKind::Diagonal => "diagonal",
            FamilyKind::Matern => "matern",
            FamilyKind::Wcar => "wcar",
        }
    }
}

impl std::str::FromStr for FamilyKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "diagonal" | "diag" => Ok(FamilyKind::Diagonal),
            "matern" => Ok(FamilyKind::Matern),
            "wcar" | "car" => Ok(FamilyKind::Wcar),
            other => Err(ModelError::InvalidConfig(format!(
                "unknown family '{other}' (expected diagonal, matern or wcar)"
            ))),
        }
    }
}

impl CovarianceFamily {
    pub fn kind(&self) -> FamilyKind {
        match self {
            CovarianceFamily::Diagonal { .. } => FamilyKind::Diagonal,
            CovarianceFamily::Matern { .. } => FamilyKind::Matern,
            CovarianceFamily::Wcar { .. } => FamilyKind::Wcar,
        }
    }

    /// Checks the parameter-domain invariants.
    pub fn validate(&self) -> Result<()> {
        match *self {
            CovarianceFamily::Diagonal { var } => {
                if !(var > 0.0) || !var.is_finite() {
                    return Err(ModelError::InvalidParameter(format!(
                        "diagonal variance must be positive and finite, got {var}"
                    )));
                }
            }
            CovarianceFamily::Matern { var, range } => {
                if !(var > 0.0) || !var.is_finite() {
                    return Err(ModelError::InvalidParameter(format!(
                        "matern variance must be positive and finite, got {var}"
                    )));
                }
                if !(range > 0.0) || !range.is_finite() {
                    return Err(ModelError::InvalidParameter(format!(
                        "matern range must be positive and finite, got {range}"
                    )));
                }
            }
            CovarianceFamily::Wcar { cond_var, autocorr } => {
                if !(cond_var > 0.0) || !cond_var.is_finite() {
                    return Err(ModelError::InvalidParameter(format!(
                        "wcar conditional variance must be positive and finite, got {cond_var}"
                    )));
                }
                if !(autocorr.abs() < 1.0) {
                    return Err(ModelError::InvalidParameter(format!(
                        "wcar dependence must satisfy |alpha| < 1, got {autocorr}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Matern covariance at distance `h` for smoothness 3/2.
pub fn matern_kernel(h: f64, var: f64, range: f64) -> Result<f64> {
    CovarianceFamily::Matern { var, range }.validate()?;
    if !(h >= 0.0) {
        return Err(ModelError::InvalidParameter(format!(
            "distance must be non-negative, got {h}"
        )));
    }
    Ok(var * matern32_corr(h / range))
}

#[inline]
fn matern32_corr(scaled: f64) -> f64 {
    (1.0 + scaled) * (-scaled).exp()
}

/// Matern correlation matrix over the geometry, with diagonal jitter.
///
/// Duplicate site coordinates make the correlation singular; the jitter
/// would mask that with a barely-positive pivot, so they are rejected
/// outright.
pub(crate) fn matern_correlation(geom: &GridGeometry, range: f64) -> Result<Array2<f64>> {
    let d = geom.n_sites();
    let dist = geom.distances();
    let mut r = Array2::zeros((d, d));
    for i in 0..d {
        r[(i, i)] = 1.0 + MATERN_JITTER_REL;
        for j in 0..i {
            if dist[(i, j)] == 0.0 {
                return Err(ModelError::NotPositiveDefinite(format!(
                    "sites {j} and {i} share coordinates; the matern covariance is singular"
                )));
            }
            let v = matern32_corr(dist[(i, j)] / range);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    Ok(r)
}

/// `D - alpha * A` for the WCAR family; the precision is this over tau^2.
///
/// `alpha = 1` is permitted here (the matrix is then only semi-definite);
/// fitted models reject it through [`CovarianceFamily::validate`].
pub fn wcar_structure(geom: &GridGeometry, autocorr: f64) -> Array2<f64> {
    let d = geom.n_sites();
    let mut m = geom.adjacency().mapv(|a| -autocorr * a);
    for i in 0..d {
        m[(i, i)] = geom.neighbor_counts()[i] as f64;
    }
    m
}

fn check_wcar_geometry(geom: &GridGeometry) -> Result<()> {
    if geom.has_isolated_sites() {
        return Err(ModelError::InvalidData(
            "wcar family needs every site to have at least one neighbor".into(),
        ));
    }
    Ok(())
}

/// Prior covariance matrix Sigma of the coefficients.
pub fn covariance_matrix(family: &CovarianceFamily, geom: &GridGeometry) -> Result<Array2<f64>> {
    family.validate()?;
    let d = geom.n_sites();
    match *family {
        CovarianceFamily::Diagonal { var } => Ok(Array2::eye(d) * var),
        CovarianceFamily::Matern { var, range } => {
            let k = matern_correlation(geom, range)? * var;
            cholesky(&k).map_err(|_| matern_pd_error(var, range))?;
            Ok(k)
        }
        CovarianceFamily::Wcar { cond_var, autocorr } => {
            check_wcar_geometry(geom)?;
            let p = wcar_structure(geom, autocorr);
            let ch = cholesky(&p).map_err(|e| wcar_pd_error(cond_var, autocorr, &e))?;
            let mut cov = ch.inverse() * cond_var;
            symmetrize(&mut cov);
            Ok(cov)
        }
    }
}

/// Prior precision matrix Sigma^{-1} of the coefficients.
pub fn precision_matrix(family: &CovarianceFamily, geom: &GridGeometry) -> Result<Array2<f64>> {
    Ok(precision_bundle(family, geom)?.matrix)
}

/// log det(Sigma^{-1}), from a symmetric factorization.
pub fn log_det_precision(family: &CovarianceFamily, geom: &GridGeometry) -> Result<f64> {
    Ok(precision_bundle(family, geom)?.log_det)
}

/// Precision matrix together with its log-determinant, sharing one
/// factorization. The EM iteration needs both every pass.
pub(crate) struct PrecisionBundle {
    pub matrix: Array2<f64>,
    pub log_det: f64,
}

pub(crate) fn precision_bundle(
    family: &CovarianceFamily,
    geom: &GridGeometry,
) -> Result<PrecisionBundle> {
    family.validate()?;
    precision_bundle_for_dim(family, Some(geom), geom.n_sites())
}

/// Dimension-driven variant: the diagonal family does not need a geometry.
pub(crate) fn precision_bundle_for_dim(
    family: &CovarianceFamily,
    geom: Option<&GridGeometry>,
    d: usize,
) -> Result<PrecisionBundle> {
    family.validate()?;
    match *family {
        CovarianceFamily::Diagonal { var } => Ok(PrecisionBundle {
            matrix: Array2::eye(d) / var,
            log_det: -(d as f64) * var.ln(),
        }),
        CovarianceFamily::Matern { var, range } => {
            let geom = geom.ok_or(ModelError::GeometryRequired("matern"))?;
            check_dim(geom, d)?;
            let k = matern_correlation(geom, range)? * var;
            let ch = cholesky(&k).map_err(|_| matern_pd_error(var, range))?;
            let mut prec = ch.inverse();
            symmetrize(&mut prec);
            Ok(PrecisionBundle {
                matrix: prec,
                log_det: -ch.log_det(),
            })
        }
        CovarianceFamily::Wcar { cond_var, autocorr } => {
            let geom = geom.ok_or(ModelError::GeometryRequired("wcar"))?;
            check_dim(geom, d)?;
            check_wcar_geometry(geom)?;
            let structure = wcar_structure(geom, autocorr);
            let ch = cholesky(&structure).map_err(|e| wcar_pd_error(cond_var, autocorr, &e))?;
            Ok(PrecisionBundle {
                matrix: structure / cond_var,
                log_det: ch.log_det() - (d as f64) * cond_var.ln(),
            })
        }
    }
}

fn check_dim(geom: &GridGeometry, d: usize) -> Result<()> {
    if geom.n_sites() != d {
        return Err(ModelError::DimensionMismatch(format!(
            "geometry has {} sites but the model dimension is {d}",
            geom.n_sites()
        )));
    }
    Ok(())
}

fn matern_pd_error(var: f64, range: f64) -> ModelError {
    ModelError::NotPositiveDefinite(format!(
        "matern covariance (var={var}, range={range}) failed to factorize; \
         duplicate site coordinates make it singular"
    ))
}

fn wcar_pd_error(cond_var: f64, autocorr: f64, cause: &ModelError) -> ModelError {
    ModelError::NotPositiveDefinite(format!(
        "wcar precision (cond_var={cond_var}, alpha={autocorr}) failed to factorize: {cause}"
    ))
}

/// One exact draw from N(0, Sigma); deterministic given the seed.
pub fn sample_coefficients(
    family: &CovarianceFamily,
    geom: &GridGeometry,
    rng_seed: u64,
) -> Result<Array1<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    sample_coefficients_with(family, geom, &mut rng)
}

/// Same as [`sample_coefficients`] but advancing a caller-owned stream.
pub fn sample_coefficients_with<R: Rng>(
    family: &CovarianceFamily,
    geom: &GridGeometry,
    rng: &mut R,
) -> Result<Array1<f64>> {
    family.validate()?;
    let d = geom.n_sites();
    let z = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
    match *family {
        CovarianceFamily::Diagonal { var } => Ok(z * var.sqrt()),
        CovarianceFamily::Matern { var, range } => {
            let k = matern_correlation(geom, range)? * var;
            let ch = cholesky(&k).map_err(|_| matern_pd_error(var, range))?;
            Ok(ch.lower_times(&z))
        }
        CovarianceFamily::Wcar { cond_var, autocorr } => {
            check_wcar_geometry(geom)?;
            let precision = wcar_structure(geom, autocorr) / cond_var;
            let ch = cholesky(&precision)
                .map_err(|e| wcar_pd_error(cond_var, autocorr, &e))?;
            Ok(ch.solve_transpose_vec(&z))
        }
    }
}

pub(crate) fn chol_of_matern_correlation(
    geom: &GridGeometry,
    range: f64,
) -> Result<CholeskyFactor> {
    cholesky(&matern_correlation(geom, range)?).map_err(|_| matern_pd_error(1.0, range))
}
