//! Cubature over the posterior: a two-point generalized Gauss-Laguerre rule
//! in the radial variable times the simplex-lattice root system on the
//! sphere, giving `2J` sigma points with `J = d(d + 1)`.
//!
//! Writing the posterior as a perturbed Gaussian around the ML estimate `m`
//! with precision `H`, the substitution `y = H^{1/2}(x − m)`, `s = ‖y‖²/2`
//! turns every expectation into a radial integral against `s^{d/2−1} e^{−s}`
//! and an angular integral over the unit sphere. Points are
//! `x = m + √(2z) H^{−1/2} Θ` for both radial nodes `z` and every direction
//! `Θ`, weighted by `w e^{z} exp(−N(x))` and normalized to sum to one.
//!
//! For targets sitting close to a sensor, the two coordinates of that target
//! can be regenerated on a Gaussian in range/arc-length coordinates around
//! the sensor ([`polar_sigma_adjust`]), which follows the ring-shaped
//! likelihood of a distance-only measurement.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::model::MIN_DISTANCE;

/// Two-point generalized Gauss-Laguerre rule for the weight `s^{d/2−1} e^{−s}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialRule {
    pub z_minus: f64,
    pub z_plus: f64,
    pub w_minus: f64,
    pub w_plus: f64,
    pub dim: usize,
}

/// Generalized Laguerre polynomial `L_n^{(a)}(z)` by the three-term recurrence.
pub fn laguerre(n: usize, a: f64, z: f64) -> f64 {
    let mut prev = 1.0;
    if n == 0 {
        return prev;
    }
    let mut cur = 1.0 + a - z;
    for k in 1..n {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0 + a - z) * cur - (kf + a) * prev) / (kf + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

impl RadialRule {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 || !dim.is_multiple_of(2) {
            return Err(Error::config(format!(
                "the radial rule needs an even dimension ≥ 2, got {dim}"
            )));
        }
        let a = (dim / 2 - 1) as f64;
        // Roots of L_2^{(a)}(z) = ((a+1)(a+2) − 2(a+2)z + z²)/2.
        let z_minus = (a + 2.0) - (a + 2.0).sqrt();
        let z_plus = (a + 2.0) + (a + 2.0).sqrt();
        // w_i = Γ(n+a+1) z_i / (n! (n+1)² L_{n+1}^{(a)}(z_i)²) with n = 2
        // reduces to Γ(a+1) (√(a+2) ± 1) / (2√(a+2)), which rounds better.
        let r = (a + 2.0).sqrt();
        // Γ(a + 1) = a! exactly; a is an integer for even d.
        let g: f64 = (1..=dim / 2 - 1).map(|k| k as f64).product();
        Ok(Self {
            z_minus,
            z_plus,
            w_minus: g * (r + 1.0) / (2.0 * r),
            w_plus: g * (r - 1.0) / (2.0 * r),
            dim,
        })
    }

    pub fn nodes(&self) -> [(f64, f64); 2] {
        [(self.z_minus, self.w_minus), (self.z_plus, self.w_plus)]
    }
}

/// The `d(d + 1)` root vectors of the `d`-dimensional simplex lattice,
/// normalized to the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    pub directions: Vec<DVector<f64>>,
    /// Surface weight per direction, `(2π)^{d/2} / (Γ(d/2) d (d+1))`.
    pub area_weight: f64,
}

impl DirectionSet {
    /// Rotates the zero-sum lattice roots `e_i − e_j` of `ℝ^{d+1}` into `ℝ^d`:
    /// roots not involving the last axis are kept; the others become
    /// `±(e_j + q)` with `q = ((√(d+1) − 1)/d) · 1`.
    pub fn simplex(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::config(format!("direction set needs d ≥ 2, got {dim}")));
        }
        let d = dim as f64;
        let q = ((d + 1.0).sqrt() - 1.0) / d;
        let mut directions = Vec::with_capacity(dim * (dim + 1));
        for i in 0..dim {
            for j in 0..dim {
                if i != j {
                    let mut v = DVector::zeros(dim);
                    v[i] = 1.0;
                    v[j] = -1.0;
                    directions.push(v);
                }
            }
        }
        for j in 0..dim {
            let mut v = DVector::from_element(dim, q);
            v[j] += 1.0;
            directions.push(-&v);
            directions.push(v);
        }
        for v in &mut directions {
            v.normalize_mut();
        }
        let area_weight = (2.0 * std::f64::consts::PI).powf(0.5 * d) / (gamma(0.5 * d) * d * (d + 1.0));
        Ok(Self {
            directions,
            area_weight,
        })
    }

    pub fn dim(&self) -> usize {
        self.directions[0].len()
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Weighted integration points; weights are normalized probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPointSet {
    pub points: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    /// `C′`, the inverse sum of raw weights. Raw weights are taken relative
    /// to the largest one, so this is scale-free.
    pub normalizer: f64,
}

impl SigmaPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `x_k = m + √(2z) H^{−1/2} Θ_k` with the `z₋` points first.
///
/// `H^{−1/2}` is `L^{−ᵀ}` for the Cholesky factor `H = L Lᵀ`, so the points
/// have covariance `H^{−1}` under the rule.
pub fn sigma_points(mean: &DVector<f64>, hessian: &DMatrix<f64>, rule: &RadialRule, dirs: &DirectionSet) -> Result<Vec<DVector<f64>>> {
    let d = mean.len();
    Error::check_len("Hessian", d, hessian.nrows())?;
    Error::check_len("direction dimension", d, dirs.dim())?;
    let chol = hessian
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("Hessian is not positive definite; repair it first"))?;
    let lt = chol.l().transpose();
    let scaled: Vec<DVector<f64>> = dirs
        .directions
        .iter()
        .map(|theta| {
            lt.solve_upper_triangular(theta)
                .ok_or_else(|| Error::numerical("singular Cholesky factor"))
        })
        .collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(2 * dirs.len());
    for (z, _) in rule.nodes() {
        let r = (2.0 * z).sqrt();
        points.extend(scaled.iter().map(|v| mean + v * r));
    }
    Ok(points)
}

/// Weights `p_k ∝ w_± e^{z_±} exp(−N(x_k))` for points laid out as in
/// [`sigma_points`].
pub fn weigh_points(points: Vec<DVector<f64>>, rule: &RadialRule, nll: &dyn Fn(&DVector<f64>) -> f64) -> Result<SigmaPointSet> {
    let j = points.len() / 2;
    let log_raw: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let (z, w) = if k < j {
                (rule.z_minus, rule.w_minus)
            } else {
                (rule.z_plus, rule.w_plus)
            };
            w.ln() + z - nll(x)
        })
        .collect();
    if log_raw.iter().any(|v| v.is_nan()) {
        return Err(Error::numerical("NLL is NaN at a sigma point"));
    }
    let max = log_raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::numerical(format!(
            "all sigma-point weights underflow (largest log weight {max})"
        )));
    }
    let raw: Vec<f64> = log_raw.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    let normalizer = 1.0 / total;
    Ok(SigmaPointSet {
        points,
        weights: raw.into_iter().map(|r| r * normalizer).collect(),
        normalizer,
    })
}

pub fn build_sigma_points(
    mean: &DVector<f64>,
    hessian: &DMatrix<f64>,
    rule: &RadialRule,
    dirs: &DirectionSet,
    nll: &dyn Fn(&DVector<f64>) -> f64,
) -> Result<SigmaPointSet> {
    weigh_points(sigma_points(mean, hessian, rule, dirs)?, rule, nll)
}

/// `(u, v) = (‖x − s‖, ‖x − s‖ · atan2(Δy, Δx))`.
pub fn polar_transform(x: &Vector2<f64>, sensor: &Vector2<f64>) -> Vector2<f64> {
    let d = x - sensor;
    let u = d.norm().max(MIN_DISTANCE);
    Vector2::new(u, u * d.y.atan2(d.x))
}

/// Inverse of [`polar_transform`].
pub fn inverse_polar(uv: &Vector2<f64>, sensor: &Vector2<f64>) -> Vector2<f64> {
    let (u, v) = (uv.x, uv.y);
    if u == 0.0 {
        return *sensor;
    }
    let angle = v / u;
    Vector2::new(u * angle.cos(), u * angle.sin()) + sensor
}

/// `∂(u, v)/∂(x, y)` at offset `d` from the sensor; its determinant is 1.
pub fn polar_jacobian(d: &Vector2<f64>) -> Matrix2<f64> {
    let r = d.norm().max(MIN_DISTANCE);
    let theta = d.y.atan2(d.x);
    Matrix2::new(d.x, d.y, d.x * theta - d.y, d.y * theta + d.x) / r
}

/// Gaussian in polar-arc coordinates around one sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarFrame {
    pub sensor: usize,
    pub origin: Vector2<f64>,
    pub m_u: Vector2<f64>,
    pub sigma_uu: Matrix2<f64>,
}

impl PolarFrame {
    /// Maps a Cartesian mean/covariance of one target into the frame of
    /// `sensor`. The covariance uses the similarity transform `J Σ J⁻¹` with
    /// the Jacobian at the mean, then symmetrized.
    pub fn new(sensor: usize, origin: Vector2<f64>, mean: &Vector2<f64>, sigma_xx: &Matrix2<f64>) -> Result<Self> {
        let jac = polar_jacobian(&(mean - origin));
        let inv = jac
            .try_inverse()
            .ok_or_else(|| Error::numerical("polar Jacobian is singular"))?;
        let t = jac * sigma_xx * inv;
        let sigma_uu = (t + t.transpose()) * 0.5;
        Ok(Self {
            sensor,
            origin,
            m_u: polar_transform(mean, &origin),
            sigma_uu,
        })
    }
}

/// Regenerates the two coordinates of target `c` in every point on a
/// Gaussian in the polar frame of a nearby sensor:
/// `u_k = √(2z) Σ_uu^{1/2} Θ_k[c] + m_u`, mapped back with
/// [`inverse_polar`]. The transform has unit Jacobian determinant, so the
/// points are weighted as usual afterwards.
///
/// Returns `false` (points untouched) when `Σ_uu` is not positive definite.
pub fn polar_sigma_adjust(
    points: &mut [DVector<f64>],
    c: usize,
    frame: &PolarFrame,
    rule: &RadialRule,
    dirs: &DirectionSet,
) -> Result<bool> {
    Error::check_len("sigma points", 2 * dirs.len(), points.len())?;
    let Some(chol) = frame.sigma_uu.cholesky() else {
        log::warn!("polar covariance for target {c} is not positive definite; keeping Cartesian points");
        return Ok(false);
    };
    let root = chol.l();
    let j = dirs.len();
    for (k, point) in points.iter_mut().enumerate() {
        let z = if k < j { rule.z_minus } else { rule.z_plus };
        let theta = &dirs.directions[k % j];
        let sub = Vector2::new(theta[2 * c], theta[2 * c + 1]);
        let u = root * sub * (2.0 * z).sqrt() + frame.m_u;
        let x = inverse_polar(&u, &frame.origin);
        point[2 * c] = x.x;
        point[2 * c + 1] = x.y;
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_dimensional_rule() {
        let r = RadialRule::new(8).unwrap();
        let s5 = 5f64.sqrt();
        assert!((r.z_minus - 2.763932).abs() < 1e-6);
        assert!((r.z_plus - 7.236068).abs() < 1e-6);
        assert!((r.z_minus - (5.0 - s5)).abs() < 1e-14);
        assert!((r.w_minus - 1.2 * (5.0 - s5) / (3.0 - s5)).abs() < 1e-12);
        assert!((r.w_plus - 1.2 * (5.0 + s5) / (3.0 + s5)).abs() < 1e-12);
        assert!((r.w_minus + r.w_plus - 6.0).abs() < 1e-12);
        assert!((r.w_minus * r.z_minus + r.w_plus * r.z_plus - 24.0).abs() < 1e-12);
    }

    #[test]
    fn rule_is_exact_to_degree_three() {
        for d in [2, 4, 6, 8, 12] {
            let r = RadialRule::new(d).unwrap();
            let a = (d / 2 - 1) as f64;
            for k in 0..4 {
                let quad: f64 = r.nodes().iter().map(|(z, w)| w * z.powi(k)).sum();
                let exact = gamma(a + 1.0 + k as f64);
                assert!((quad - exact).abs() < 1e-11 * exact, "d={d} k={k}");
            }
        }
    }

    #[test]
    fn weights_match_the_laguerre_form() {
        for d in [2, 4, 8, 16] {
            let r = RadialRule::new(d).unwrap();
            let a = (d / 2 - 1) as f64;
            for (z, w) in r.nodes() {
                let l3 = laguerre(3, a, z);
                let general = gamma(a + 3.0) * z / (18.0 * l3 * l3);
                assert!((w - general).abs() < 1e-12 * general, "d={d}");
            }
        }
    }

    #[test]
    fn odd_dimension_is_unsupported() {
        assert!(RadialRule::new(7).unwrap_err().is_config());
        assert!(RadialRule::new(0).unwrap_err().is_config());
    }

    #[test]
    fn laguerre_matches_closed_forms() {
        for z in [0.0, 1.5, 4.0, 9.0] {
            assert!((laguerre(1, 3.0, z) - (4.0 - z)).abs() < 1e-12);
            assert!((laguerre(2, 3.0, z) - (20.0 - 10.0 * z + z * z) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn simplex_directions_in_eight_dimensions() {
        let dirs = DirectionSet::simplex(8).unwrap();
        assert_eq!(dirs.len(), 72);
        let q = (9f64.sqrt() - 1.0) / 8.0;
        assert_eq!(q, 0.25);
        // ‖e_j + q‖² = 2 before normalization
        let mut v = DVector::from_element(8, q);
        v[0] += 1.0;
        assert!((v.norm_squared() - 2.0).abs() < 1e-14);
        for t in &dirs.directions {
            assert!((t.norm() - 1.0).abs() < 1e-12);
            assert!(dirs.directions.iter().any(|u| (u + t).amax() < 1e-14));
        }
    }

    #[test]
    fn area_weight_integrates_the_sphere() {
        for d in [2usize, 4, 8] {
            let dirs = DirectionSet::simplex(d).unwrap();
            let sphere = 2.0 * std::f64::consts::PI.powf(d as f64 / 2.0) / gamma(d as f64 / 2.0);
            let total = dirs.area_weight * dirs.len() as f64;
            assert!((total - sphere * 2f64.powf(d as f64 / 2.0 - 1.0)).abs() < 1e-10 * total);
        }
    }

    #[test]
    fn polar_axes() {
        let s = Vector2::new(10.0, 20.0);
        let a = polar_transform(&Vector2::new(13.0, 20.0), &s);
        assert!((a - Vector2::new(3.0, 0.0)).amax() < 1e-15);
        let b = polar_transform(&Vector2::new(10.0, 23.0), &s);
        assert!((b - Vector2::new(3.0, 3.0 * std::f64::consts::FRAC_PI_2)).amax() < 1e-15);
    }

    #[test]
    fn jacobian_on_positive_axis_is_identity() {
        let j = polar_jacobian(&Vector2::new(2.5, 0.0));
        assert!((j - Matrix2::identity()).amax() < 1e-15);
        let f = PolarFrame::new(0, Vector2::zeros(), &Vector2::new(2.5, 0.0), &(Matrix2::identity() * 0.3)).unwrap();
        assert!((f.sigma_uu - Matrix2::identity() * 0.3).amax() < 1e-15);
    }

    #[test]
    fn adjusted_points_sit_at_their_radius() {
        let rule = RadialRule::new(4).unwrap();
        let dirs = DirectionSet::simplex(4).unwrap();
        let mean = DVector::from_vec(vec![1.0, 0.5, 20.0, 20.0]);
        let h = DMatrix::identity(4, 4) * 50.0;
        let mut pts = sigma_points(&mean, &h, &rule, &dirs).unwrap();
        let before = pts.clone();
        let origin = Vector2::zeros();
        let frame = PolarFrame::new(0, origin, &Vector2::new(1.0, 0.5), &(Matrix2::identity() * 0.02)).unwrap();
        assert!(polar_sigma_adjust(&mut pts, 0, &frame, &rule, &dirs).unwrap());
        let root = frame.sigma_uu.cholesky().unwrap().l();
        for (k, p) in pts.iter().enumerate() {
            let z = if k < dirs.len() { rule.z_minus } else { rule.z_plus };
            let th = &dirs.directions[k % dirs.len()];
            let u = (root * Vector2::new(th[0], th[1]) * (2.0 * z).sqrt() + frame.m_u).x;
            assert!(u > 0.0);
            assert!(((Vector2::new(p[0], p[1]) - origin).norm() - u).abs() < 1e-10);
            // other target untouched
            assert_eq!(p[2], before[k][2]);
            assert_eq!(p[3], before[k][3]);
        }
    }

    #[test]
    fn non_pd_polar_covariance_falls_back() {
        let rule = RadialRule::new(2).unwrap();
        let dirs = DirectionSet::simplex(2).unwrap();
        let mut pts = sigma_points(&DVector::from_vec(vec![1.0, 1.0]), &DMatrix::identity(2, 2), &rule, &dirs).unwrap();
        let before = pts.clone();
        let frame = PolarFrame {
            sensor: 0,
            origin: Vector2::zeros(),
            m_u: Vector2::new(1.0, 0.0),
            sigma_uu: Matrix2::new(1.0, 2.0, 2.0, 1.0),
        };
        assert!(!polar_sigma_adjust(&mut pts, 0, &frame, &rule, &dirs).unwrap());
        assert_eq!(pts, before);
    }

    #[test]
    fn constant_nll_gives_rule_weights() {
        let rule = RadialRule::new(4).unwrap();
        let dirs = DirectionSet::simplex(4).unwrap();
        let set = build_sigma_points(&DVector::zeros(4), &DMatrix::identity(4, 4), &rule, &dirs, &|_| 3.0).unwrap();
        let j = dirs.len() as f64;
        let denom = j * (rule.w_minus * rule.z_minus.exp() + rule.w_plus * rule.z_plus.exp());
        for (k, p) in set.weights.iter().enumerate() {
            let (z, w) = if k < dirs.len() { (rule.z_minus, rule.w_minus) } else { (rule.z_plus, rule.w_plus) };
            assert!((p - w * z.exp() / denom).abs() < 1e-15);
        }
        assert!((set.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_pd_hessian_is_rejected() {
        let rule = RadialRule::new(2).unwrap();
        let dirs = DirectionSet::simplex(2).unwrap();
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(sigma_points(&DVector::zeros(2), &h, &rule, &dirs).is_err());
    }
}
