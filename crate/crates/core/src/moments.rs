//! Posterior moments from the weighted sigma points.
//!
//! Positions come straight from the points. Velocities are never observed,
//! so they follow from the prior's conditional Gaussian `v | x`:
//! with `Q = Σ_vx Σ_xx⁻¹` (prior blocks),
//! `m_v = m_v' + Q (m_x − m_x')`, `Σ_vv = Σ_vv' − Q Σ_xv' + Q Σ_xx Qᵀ` and
//! `Σ_vx = Q Σ_xx`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{check_psd, eigenvalue_floor, relative_asymmetry, symmetrize};
use crate::nll::{GaussianBelief, PropagatedPrior};
use crate::quadrature::SigmaPointSet;

/// Smallest eigenvalue kept in an assembled posterior covariance.
pub const COVARIANCE_FLOOR: f64 = 1e-10;

const ASYMMETRY_TOL: f64 = 1e-9;

/// Weighted mean and covariance of the points.
pub fn spatial_moments(points: &SigmaPointSet) -> (DVector<f64>, DMatrix<f64>) {
    let d = points.points[0].len();
    let mut mean = DVector::zeros(d);
    for (x, p) in points.points.iter().zip(&points.weights) {
        mean.axpy(*p, x, 1.0);
    }
    // Centered sum: same value as Σ p x xᵀ − m mᵀ without the cancellation.
    let mut cov = DMatrix::zeros(d, d);
    for (x, p) in points.points.iter().zip(&points.weights) {
        let e = x - &mean;
        cov.ger(*p, &e, &e, 1.0);
    }
    symmetrize(&mut cov);
    (mean, cov)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityMoments {
    pub m_v: DVector<f64>,
    pub sigma_vv: DMatrix<f64>,
    pub sigma_vx: DMatrix<f64>,
}

/// Velocity moments given the posterior spatial moments.
pub fn velocity_moments(prior: &PropagatedPrior, m_x: &DVector<f64>, sigma_xx: &DMatrix<f64>) -> Result<VelocityMoments> {
    let n = prior.cov_xx.nrows();
    Error::check_len("spatial mean", n, m_x.len())?;
    Error::check_len("spatial covariance", n, sigma_xx.nrows())?;
    let q = &prior.cov_vx * &prior.cov_xx_inv;
    let m_v = prior.mean_v() + &q * (m_x - prior.mean_x());
    let sigma_vx = &q * sigma_xx;
    let mut sigma_vv = &prior.cov_vv - &q * prior.cov_vx.transpose() + &sigma_vx * q.transpose();
    symmetrize(&mut sigma_vv);
    Ok(VelocityMoments { m_v, sigma_vv, sigma_vx })
}

/// Updated belief in the stacked layout (positions, then velocities).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorBelief {
    pub m_x: DVector<f64>,
    pub m_v: DVector<f64>,
    pub sigma_xx: DMatrix<f64>,
    pub sigma_vv: DMatrix<f64>,
    pub sigma_vx: DMatrix<f64>,
    /// `[[Σ_xx, Σ_vxᵀ], [Σ_vx, Σ_vv]]`.
    pub cov: DMatrix<f64>,
}

impl PosteriorBelief {
    pub fn mean(&self) -> DVector<f64> {
        let n = self.m_x.len();
        let mut m = DVector::zeros(2 * n);
        m.rows_mut(0, n).copy_from(&self.m_x);
        m.rows_mut(n, n).copy_from(&self.m_v);
        m
    }

    /// Raises covariance eigenvalues below `floor`, keeping the blocks in sync.
    pub fn floored(mut self, floor: f64) -> Self {
        let n = self.m_x.len();
        self.cov = eigenvalue_floor(&self.cov, floor);
        self.sigma_xx = self.cov.view((0, 0), (n, n)).into_owned();
        self.sigma_vx = self.cov.view((n, 0), (n, n)).into_owned();
        self.sigma_vv = self.cov.view((n, n), (n, n)).into_owned();
        self
    }

    pub fn to_belief(&self) -> Result<GaussianBelief> {
        GaussianBelief::new(self.mean(), self.cov.clone())
    }
}

/// Stitches the blocks into the full covariance.
pub fn assemble(m_x: DVector<f64>, sigma_xx: DMatrix<f64>, velocity: VelocityMoments) -> Result<PosteriorBelief> {
    let n = m_x.len();
    Error::check_len("spatial covariance", n, sigma_xx.nrows())?;
    Error::check_len("velocity mean", n, velocity.m_v.len())?;
    Error::check_len("velocity covariance", n, velocity.sigma_vv.nrows())?;
    Error::check_len("cross covariance", n, velocity.sigma_vx.nrows())?;
    for (what, m) in [("spatial covariance", &sigma_xx), ("velocity covariance", &velocity.sigma_vv)] {
        let asym = relative_asymmetry(m);
        if asym > ASYMMETRY_TOL {
            return Err(Error::numerical(format!("{what} is asymmetric ({asym:e})")));
        }
    }
    let mut cov = DMatrix::zeros(2 * n, 2 * n);
    cov.view_mut((0, 0), (n, n)).copy_from(&sigma_xx);
    cov.view_mut((n, n), (n, n)).copy_from(&velocity.sigma_vv);
    cov.view_mut((n, 0), (n, n)).copy_from(&velocity.sigma_vx);
    cov.view_mut((0, n), (n, n)).copy_from(&velocity.sigma_vx.transpose());
    symmetrize(&mut cov);
    check_psd(&cov, 1e-8, "posterior covariance")?;
    Ok(PosteriorBelief {
        m_x,
        m_v: velocity.m_v,
        sigma_xx,
        sigma_vv: velocity.sigma_vv,
        sigma_vx: velocity.sigma_vx,
        cov,
    })
}
