//! State-space types, the nearly-constant-velocity motion model and the
//! polar radar measurement model shared by both trackers.
//!
//! State ordering is `[px, vx, py, vy]` throughout. Measurements are
//! `(range, azimuth)` with azimuth measured counter-clockwise from the
//! +x axis, wrapped to `[-pi, pi)`.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kinematic target state in a local Cartesian frame centred on the radar.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TargetState {
    pub px: f64,
    pub vx: f64,
    pub py: f64,
    pub vy: f64,
}

impl TargetState {
    pub fn new(px: f64, vx: f64, py: f64, vy: f64) -> Self {
        Self { px, vx, py, vy }
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.px, self.vx, self.py, self.vy)
    }

    pub fn position(&self) -> (f64, f64) {
        (self.px, self.py)
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn is_finite(&self) -> bool {
        self.px.is_finite() && self.vx.is_finite() && self.py.is_finite() && self.vy.is_finite()
    }
}

/// Gaussian single-target density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDensity {
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
}

impl StateDensity {
    pub fn new(mean: Vector4<f64>, cov: Matrix4<f64>) -> Self {
        Self { mean, cov }
    }

    pub fn state(&self) -> TargetState {
        TargetState::from_vector(&self.mean)
    }

    pub fn position(&self) -> (f64, f64) {
        (self.mean[0], self.mean[2])
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite()) && self.cov.iter().all(|v| v.is_finite())
    }

    /// Checks symmetry and positive semi-definiteness to the stated tolerances.
    pub fn is_valid(&self) -> bool {
        if !self.is_finite() {
            return false;
        }
        let scale = self.cov.abs().max().max(f64::MIN_POSITIVE);
        if (self.cov - self.cov.transpose()).abs().max() > 1e-9 * scale {
            return false;
        }
        let trace = self.cov.trace().abs();
        let sym = symmetrize4(&self.cov);
        sym.symmetric_eigenvalues()
            .iter()
            .all(|&e| e >= -1e-9 * trace.max(f64::MIN_POSITIVE))
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidInput("non-finite state density".into()))
        }
    }
}

/// Radar measurement in polar coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PolarPoint {
    pub range: f64,
    pub azimuth: f64,
}

impl PolarPoint {
    pub fn new(range: f64, azimuth: f64) -> Self {
        Self { range, azimuth: wrap_angle(azimuth) }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.range, self.azimuth)
    }

    pub fn to_cartesian(self) -> (f64, f64) {
        polar_to_cartesian(self.range, self.azimuth)
    }
}

/// Polar surveillance region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldOfView {
    pub range_min: f64,
    pub range_max: f64,
    pub azimuth_min: f64,
    pub azimuth_max: f64,
}

impl FieldOfView {
    pub fn contains(&self, p: &PolarPoint) -> bool {
        let da = wrap_angle(p.azimuth - self.azimuth_min);
        let da = if da < 0.0 { da + std::f64::consts::TAU } else { da };
        p.range >= self.range_min && p.range <= self.range_max && da <= self.azimuth_max - self.azimuth_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionModel {
    /// Sample interval in seconds.
    pub dt: f64,
    /// Process noise intensity in m^2 s^-3.
    pub q: f64,
    /// Survival probability.
    pub p_s: f64,
}

impl MotionModel {
    pub fn new(dt: f64, q: f64, p_s: f64) -> Result<Self> {
        let m = Self { dt, q, p_s };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidInput(format!("sample interval must be > 0, got {}", self.dt)));
        }
        if !(self.q >= 0.0 && self.q.is_finite()) {
            return Err(Error::InvalidInput(format!("process noise must be >= 0, got {}", self.q)));
        }
        if !(0.0..=1.0).contains(&self.p_s) {
            return Err(Error::InvalidInput(format!("survival probability out of [0,1]: {}", self.p_s)));
        }
        Ok(())
    }

    /// `F = I2 ⊗ [[1, T], [0, 1]]`.
    pub fn transition(&self) -> Matrix4<f64> {
        let t = self.dt;
        Matrix4::new(
            1.0, t, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, t, //
            0.0, 0.0, 0.0, 1.0,
        )
    }

    /// `Q = q I2 ⊗ [[T^3/3, T^2/2], [T^2/2, T]]`.
    pub fn process_noise(&self) -> Matrix4<f64> {
        let t = self.dt;
        let a = self.q * t.powi(3) / 3.0;
        let b = self.q * t.powi(2) / 2.0;
        let c = self.q * t;
        Matrix4::new(
            a, b, 0.0, 0.0, //
            b, c, 0.0, 0.0, //
            0.0, 0.0, a, b, //
            0.0, 0.0, b, c,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementModel {
    /// Range spread / noise standard deviation in metres.
    pub sigma_r: f64,
    /// Azimuth spread / noise standard deviation in radians.
    pub sigma_theta: f64,
}

impl MeasurementModel {
    pub fn new(sigma_r: f64, sigma_theta: f64) -> Result<Self> {
        if !(sigma_r > 0.0 && sigma_theta > 0.0) {
            return Err(Error::InvalidInput("measurement standard deviations must be > 0".into()));
        }
        Ok(Self { sigma_r, sigma_theta })
    }

    pub fn covariance(&self) -> Matrix2<f64> {
        Matrix2::new(self.sigma_r.powi(2), 0.0, 0.0, self.sigma_theta.powi(2))
    }
}

impl Default for MeasurementModel {
    fn default() -> Self {
        Self { sigma_r: 37.5, sigma_theta: 1f64.to_radians() }
    }
}

/// Wraps an angle to `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    // rem_euclid can return TAU for tiny negative inputs
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

pub fn polar_to_cartesian(range: f64, azimuth: f64) -> (f64, f64) {
    (range * azimuth.cos(), range * azimuth.sin())
}

pub fn cv_predict(density: &StateDensity, model: &MotionModel) -> Result<StateDensity> {
    model.validate()?;
    density.validate()?;
    let f = model.transition();
    let mean = f * density.mean;
    let cov = symmetrize4(&(f * density.cov * f.transpose() + model.process_noise()));
    Ok(StateDensity { mean, cov })
}

pub fn cartesian_to_polar(state: &TargetState) -> Result<PolarPoint> {
    position_to_polar(state.px, state.py)
}

pub fn position_to_polar(px: f64, py: f64) -> Result<PolarPoint> {
    if !(px.is_finite() && py.is_finite()) {
        return Err(Error::InvalidInput("non-finite position".into()));
    }
    if px == 0.0 && py == 0.0 {
        return Err(Error::DegenerateGeometry);
    }
    Ok(PolarPoint::new(px.hypot(py), py.atan2(px)))
}

/// Jacobian of `h(x) = (sqrt(px^2+py^2), atan2(py, px))`.
pub fn polar_jacobian(mean: &Vector4<f64>) -> Result<Matrix2x4<f64>> {
    let (px, py) = (mean[0], mean[2]);
    let r2 = px * px + py * py;
    if r2 == 0.0 || !r2.is_finite() {
        return Err(Error::DegenerateGeometry);
    }
    let r = r2.sqrt();
    Ok(Matrix2x4::new(
        px / r, 0.0, py / r, 0.0, //
        -py / r2, 0.0, px / r2, 0.0,
    ))
}

/// Predicted measurement, Jacobian and innovation covariance for a prior
/// under measurement covariance `r`.
#[derive(Debug, Clone)]
pub struct PolarPrediction {
    pub z_pred: PolarPoint,
    pub jacobian: Matrix2x4<f64>,
    pub innovation_cov: Matrix2<f64>,
}

impl PolarPrediction {
    pub fn new(prior: &StateDensity, r: &Matrix2<f64>) -> Result<Self> {
        let z_pred = position_to_polar(prior.mean[0], prior.mean[2])?;
        let jacobian = polar_jacobian(&prior.mean)?;
        let s = jacobian * prior.cov * jacobian.transpose() + r;
        Ok(Self { z_pred, jacobian, innovation_cov: symmetrize2(&s) })
    }

    /// Innovation with the azimuth component wrapped.
    pub fn innovation(&self, z: &PolarPoint) -> Vector2<f64> {
        Vector2::new(z.range - self.z_pred.range, wrap_angle(z.azimuth - self.z_pred.azimuth))
    }

    pub fn mahalanobis_sq(&self, z: &PolarPoint) -> Result<f64> {
        let nu = self.innovation(z);
        let s_inv = invert2(&self.innovation_cov)?;
        Ok((nu.transpose() * s_inv * nu)[0])
    }

    /// Log of the Gaussian predicted-measurement density at `z`.
    pub fn log_likelihood(&self, z: &PolarPoint) -> Result<f64> {
        let nu = self.innovation(z);
        gaussian2_logpdf(&nu, &self.innovation_cov)
    }
}

pub fn ekf_polar_update(
    prior: &StateDensity,
    z: &PolarPoint,
    mm: &MeasurementModel,
) -> Result<(StateDensity, f64)> {
    ekf_polar_update_with_cov(prior, z, &mm.covariance())
}

/// First-order EKF update with an explicit measurement covariance.
/// Returns the posterior and the log predicted-measurement likelihood.
pub fn ekf_polar_update_with_cov(
    prior: &StateDensity,
    z: &PolarPoint,
    r: &Matrix2<f64>,
) -> Result<(StateDensity, f64)> {
    prior.validate()?;
    if !(z.range.is_finite() && z.azimuth.is_finite()) {
        return Err(Error::InvalidInput("non-finite measurement".into()));
    }
    let pred = PolarPrediction::new(prior, r)?;
    gaussian_update(prior, &pred.innovation(z), &pred.jacobian, r)
}

/// Standard Kalman update for a linear measurement `z = H x + v`.
pub fn kalman_update_linear(
    prior: &StateDensity,
    z: &Vector2<f64>,
    h: &Matrix2x4<f64>,
    r: &Matrix2<f64>,
) -> Result<StateDensity> {
    prior.validate()?;
    let innovation = z - h * prior.mean;
    Ok(gaussian_update(prior, &innovation, h, r)?.0)
}

/// Shared Gaussian measurement update given an innovation and (linearised)
/// measurement matrix.
fn gaussian_update(
    prior: &StateDensity,
    innovation: &Vector2<f64>,
    h: &Matrix2x4<f64>,
    r: &Matrix2<f64>,
) -> Result<(StateDensity, f64)> {
    let s = symmetrize2(&(h * prior.cov * h.transpose() + r));
    let s_inv = invert2(&s)?;
    let gain: Matrix4x2<f64> = prior.cov * h.transpose() * s_inv;
    let mean = prior.mean + gain * innovation;
    // Joseph form keeps the covariance PSD
    let i_kh = Matrix4::identity() - gain * h;
    let cov = symmetrize4(&(i_kh * prior.cov * i_kh.transpose() + gain * r * gain.transpose()));
    let ll = gaussian2_logpdf(innovation, &s)?;
    Ok((StateDensity { mean, cov }, ll))
}

pub fn gaussian2_logpdf(x: &Vector2<f64>, cov: &Matrix2<f64>) -> Result<f64> {
    let det = cov.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::SingularCovariance { condition: condition2(cov) });
    }
    let inv = invert2(cov)?;
    let m = (x.transpose() * inv * x)[0];
    Ok(-0.5 * m - 0.5 * det.ln() - (TAU).ln())
}

pub(crate) fn invert2(m: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    let det = m.determinant();
    let magnitude = (m[(0, 0)] * m[(1, 1)]).abs() + (m[(0, 1)] * m[(1, 0)]).abs();
    if !det.is_finite() || det == 0.0 || det.abs() <= 1e-14 * magnitude {
        return Err(Error::SingularCovariance { condition: condition2(m) });
    }
    m.try_inverse().ok_or(Error::SingularCovariance { condition: condition2(m) })
}

fn condition2(m: &Matrix2<f64>) -> f64 {
    let ev = symmetrize2(m).symmetric_eigenvalues();
    let (lo, hi) = (ev.min().abs(), ev.max().abs());
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

pub fn symmetrize4(m: &Matrix4<f64>) -> Matrix4<f64> {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize2(m: &Matrix2<f64>) -> Matrix2<f64> {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn model() -> MotionModel {
        MotionModel::new(2.5, 0.01, 1.0).unwrap()
    }

    #[test]
    fn predict_moves_mean_linearly() {
        let d = StateDensity::new(Vector4::new(100.0, 2.0, 50.0, 0.0), Matrix4::identity());
        let p = cv_predict(&d, &model()).unwrap();
        assert_relative_eq!(p.mean, Vector4::new(105.0, 2.0, 50.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn process_noise_blocks() {
        let q = model().process_noise();
        assert_relative_eq!(q[(0, 0)], 0.01 * 2.5f64.powi(3) / 3.0, epsilon = 1e-15);
        assert_relative_eq!(q[(0, 0)], 0.052083333333333336, epsilon = 1e-12);
        assert_relative_eq!(q[(0, 1)], 0.03125, epsilon = 1e-12);
        assert_relative_eq!(q[(1, 1)], 0.025, epsilon = 1e-12);
        assert_relative_eq!(q[(2, 3)], 0.03125, epsilon = 1e-12);
        assert_eq!(q[(0, 2)], 0.0);
    }

    #[test]
    fn zero_covariance_predicts_to_q() {
        let d = StateDensity::new(Vector4::new(10.0, 0.0, -3.0, 0.0), Matrix4::zeros());
        let p = cv_predict(&d, &model()).unwrap();
        assert_eq!(p.mean, d.mean);
        assert_relative_eq!(p.cov, model().process_noise(), epsilon = 1e-15);
    }

    #[test]
    fn predict_rejects_non_finite() {
        let d = StateDensity::new(Vector4::new(f64::NAN, 0.0, 0.0, 0.0), Matrix4::identity());
        assert!(matches!(cv_predict(&d, &model()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn two_half_steps_equal_one_full_step() {
        let half = MotionModel::new(2.5, 0.0, 1.0).unwrap();
        let full = MotionModel::new(5.0, 0.0, 1.0).unwrap();
        let d = StateDensity::new(Vector4::new(1.0, 3.0, -2.0, 0.5), Matrix4::identity());
        let a = cv_predict(&cv_predict(&d, &half).unwrap(), &half).unwrap();
        let b = cv_predict(&d, &full).unwrap();
        assert_relative_eq!(a.mean, b.mean, epsilon = 1e-9);
        assert_relative_eq!(a.cov, b.cov, epsilon = 1e-9);
    }

    #[test]
    fn polar_conversions() {
        let p = cartesian_to_polar(&TargetState::new(100.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!((p.range, p.azimuth), (100.0, 0.0));
        let p = cartesian_to_polar(&TargetState::new(0.0, 0.0, 100.0, 0.0)).unwrap();
        assert_relative_eq!(p.range, 100.0);
        assert_relative_eq!(p.azimuth, PI / 2.0);
        let p = cartesian_to_polar(&TargetState::new(3.0, 0.0, 4.0, 0.0)).unwrap();
        assert_relative_eq!(p.range, 5.0);
        assert_relative_eq!(p.azimuth, 0.927295, epsilon = 1e-6);
        assert!(matches!(
            cartesian_to_polar(&TargetState::default()),
            Err(Error::DegenerateGeometry)
        ));
    }

    #[test]
    fn wrap_is_half_open() {
        assert_relative_eq!(wrap_angle(PI), -PI);
        assert_relative_eq!(wrap_angle(-PI), -PI);
        assert_relative_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert!(wrap_angle(-1e-18) < PI);
    }

    fn prior_at(px: f64, py: f64) -> StateDensity {
        let cov = Matrix4::from_diagonal(&Vector4::new(400.0, 4.0, 400.0, 4.0));
        StateDensity::new(Vector4::new(px, 1.0, py, -1.0), cov)
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let prior = prior_at(3000.0, 1200.0);
        let z = position_to_polar(3000.0, 1200.0).unwrap();
        let (post, _) = ekf_polar_update(&prior, &z, &MeasurementModel::default()).unwrap();
        assert_relative_eq!(post.mean, prior.mean, epsilon = 1e-9);
        assert!(post.is_valid());
        assert!(post.cov[(0, 0)] < prior.cov[(0, 0)]);
    }

    #[test]
    fn confident_prior_ignores_measurement() {
        let mut prior = prior_at(3000.0, 1200.0);
        prior.cov *= 1e-12;
        let z = PolarPoint::new(3300.0, 0.5);
        let (post, _) = ekf_polar_update(&prior, &z, &MeasurementModel::default()).unwrap();
        assert_relative_eq!(post.mean, prior.mean, epsilon = 1e-6);
    }

    #[test]
    fn huge_noise_leaves_prior_unchanged() {
        let prior = prior_at(-2000.0, 500.0);
        let z = PolarPoint::new(2100.0, 2.9);
        let r = Matrix2::new(1e20, 0.0, 0.0, 1e20);
        let (post, _) = ekf_polar_update_with_cov(&prior, &z, &r).unwrap();
        for i in 0..4 {
            assert_relative_eq!(post.mean[i], prior.mean[i], max_relative = 1e-8, epsilon = 1e-8);
        }
        assert_relative_eq!(post.cov, prior.cov, max_relative = 1e-8, epsilon = 1e-8);
    }

    #[test]
    fn scalar_range_analogue_matches_closed_form_gain() {
        // Target on the +x axis: range measures px directly, azimuth is
        // uninformative under a huge azimuth variance.
        let p0 = 900.0;
        let prior = StateDensity::new(
            Vector4::new(5000.0, 0.0, 0.0, 0.0),
            Matrix4::from_diagonal(&Vector4::new(p0, 1.0, 1.0, 1.0)),
        );
        let sr2 = 100.0;
        let r = Matrix2::new(sr2, 0.0, 0.0, 1e30);
        let z = PolarPoint::new(5030.0, 0.0);
        let (post, ll) = ekf_polar_update_with_cov(&prior, &z, &r).unwrap();
        let k = p0 / (p0 + sr2);
        assert_relative_eq!(post.mean[0], 5000.0 + k * 30.0, epsilon = 1e-10);
        assert_relative_eq!(post.cov[(0, 0)], (1.0 - k) * p0, epsilon = 1e-10);
        let s_theta = 1.0 / 5000f64.powi(2) + 1e30;
        let expected_ll = -0.5 * 900.0 / (p0 + sr2)
            - 0.5 * ((p0 + sr2) * s_theta).ln()
            - TAU.ln();
        assert_relative_eq!(ll, expected_ll, epsilon = 1e-9);
    }

    #[test]
    fn azimuth_innovation_wraps_at_seam() {
        let prior = prior_at(-3000.0, 1.0);
        let z = PolarPoint::new(3000.0, -PI + 1e-4);
        let pred = PolarPrediction::new(&prior, &MeasurementModel::default().covariance()).unwrap();
        assert!(pred.innovation(&z)[1].abs() < 1e-3);
    }

    fn psd_strategy() -> impl Strategy<Value = Matrix4<f64>> {
        prop::collection::vec(-10.0f64..10.0, 16).prop_map(|v| {
            let a = Matrix4::from_column_slice(&v);
            a * a.transpose()
        })
    }

    proptest! {
        #[test]
        fn predict_preserves_psd(cov in psd_strategy(), q in 0.0f64..2.0, dt in 0.1f64..10.0) {
            let m = MotionModel::new(dt, q, 1.0).unwrap();
            let d = StateDensity::new(Vector4::new(1.0, 2.0, 3.0, 4.0), cov);
            let p = cv_predict(&d, &m).unwrap();
            prop_assert!(p.is_valid());
        }

        #[test]
        fn azimuth_invariant_under_full_turn(r in 1.0f64..1e4, a in -3.1f64..3.1) {
            let (x, y) = polar_to_cartesian(r, a);
            let (x2, y2) = polar_to_cartesian(r, a + TAU);
            let p1 = position_to_polar(x, y).unwrap();
            let p2 = position_to_polar(x2, y2).unwrap();
            prop_assert!((p1.range - p2.range).abs() < 1e-9 * r);
            prop_assert!(wrap_angle(p1.azimuth - p2.azimuth).abs() < 1e-9);
        }

        #[test]
        fn linear_update_matches_textbook_kalman(
            cov in psd_strategy(),
            m in prop::collection::vec(-50.0f64..50.0, 4),
            z in prop::collection::vec(-50.0f64..50.0, 2),
            r1 in 0.1f64..10.0, r2 in 0.1f64..10.0,
        ) {
            let cov = cov + Matrix4::identity();
            let prior = StateDensity::new(Vector4::from_column_slice(&m), cov);
            let h = Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
            let r = Matrix2::new(r1, 0.0, 0.0, r2);
            let z = Vector2::new(z[0], z[1]);
            let post = kalman_update_linear(&prior, &z, &h, &r).unwrap();

            let s = h * cov * h.transpose() + r;
            let k = cov * h.transpose() * s.try_inverse().unwrap();
            let mean = prior.mean + k * (z - h * prior.mean);
            let p = (Matrix4::identity() - k * h) * cov;
            let scale = cov.abs().max().max(1.0);
            for i in 0..4 {
                prop_assert!((post.mean[i] - mean[i]).abs() < 1e-12 * (1.0 + mean[i].abs()) * scale);
            }
            prop_assert!((post.cov - p).abs().max() < 1e-12 * scale * scale);
        }
    }
}
