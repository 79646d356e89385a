//! Constant-velocity Kalman filter over `(x, y, aspect, h)` and their
//! per-frame velocities.
//!
//! The batched routines exploit the block structure of the transition
//! `F = [[I, I], [0, I]]` and the measurement matrix `H = [I, 0]`, so predict
//! is a handful of 4x4 block additions and gating needs one Cholesky factor
//! per state. The single-state routines use plain dense products and serve
//! as the reference the batch path must agree with.

use nalgebra::{Cholesky, SMatrix, SVector};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub type Vector8 = SVector<f64, 8>;
pub type Matrix8 = SMatrix<f64, 8, 8>;
pub type Vector4 = SVector<f64, 4>;
pub type Matrix4 = SMatrix<f64, 4, 4>;
type Matrix4x8 = SMatrix<f64, 4, 8>;

/// 0.95 quantile of the chi-square distribution with 4 degrees of freedom.
pub const CHI2_95_4DOF: f64 = 9.4877;

/// Box observation `(cx, cy, w / h, h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement(pub Vector4);

impl Measurement {
    pub fn new(cx: f64, cy: f64, aspect: f64, h: f64) -> Result<Self> {
        if !(h > 0.0 && aspect > 0.0) || !(cx.is_finite() && cy.is_finite() && h.is_finite()) {
            return Err(Error::domain(format!(
                "measurement needs positive height and aspect, got aspect={aspect} h={h}"
            )));
        }
        Ok(Self(Vector4::new(cx, cy, aspect, h)))
    }

    pub fn from_box(b: &BBox) -> Result<Self> {
        b.validate()?;
        let (cx, cy, w, h) = b.center_form();
        Self::new(cx, cy, w / h, h)
    }

    pub fn height(&self) -> f64 {
        self.0[3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionState {
    pub mean: Vector8,
    pub covariance: Matrix8,
}

impl MotionState {
    /// Box implied by the positional part of the mean.
    pub fn to_box(&self) -> BBox {
        let h = self.mean[3];
        let w = self.mean[2] * h;
        BBox::from_center(self.mean[0], self.mean[1], w, h)
    }

    pub fn project_mean(&self) -> Vector4 {
        self.mean.fixed_rows::<4>(0).into_owned()
    }
}

/// Noise schedule. Position-like standard deviations scale with the current
/// box height; the aspect ratio gets fixed deviations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanFilter {
    pub process_std_position: f64,
    pub process_std_velocity: f64,
    pub process_std_aspect: f64,
    pub process_std_aspect_velocity: f64,
    pub measurement_std_position: f64,
    pub measurement_std_aspect: f64,
}

impl Default for KalmanFilter {
    fn default() -> Self {
        Self {
            process_std_position: 1.0 / 20.0,
            process_std_velocity: 1.0 / 160.0,
            process_std_aspect: 1e-2,
            process_std_aspect_velocity: 1e-5,
            measurement_std_position: 1.0 / 20.0,
            measurement_std_aspect: 1e-2,
        }
    }
}

fn transition() -> Matrix8 {
    let mut f = Matrix8::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn observation() -> Matrix4x8 {
    let mut h = Matrix4x8::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

fn symmetrize8(m: &mut Matrix8) {
    *m = (*m + m.transpose()) * 0.5;
}

impl KalmanFilter {
    pub fn initiate(&self, m: &Measurement) -> Result<MotionState> {
        let h = m.height();
        if !(h > 0.0) {
            return Err(Error::domain(format!("initiate needs h > 0, got {h}")));
        }
        let p = self.process_std_position * h;
        let v = self.process_std_velocity * h;
        let std = [
            2.0 * p,
            2.0 * p,
            self.process_std_aspect,
            2.0 * p,
            10.0 * v,
            10.0 * v,
            self.process_std_aspect_velocity,
            10.0 * v,
        ];
        let mut mean = Vector8::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from(&m.0);
        Ok(MotionState {
            mean,
            covariance: Matrix8::from_diagonal(&Vector8::from_iterator(std.iter().map(|s| s * s))),
        })
    }

    fn process_noise_diag(&self, h: f64) -> Vector8 {
        let p = self.process_std_position * h;
        let v = self.process_std_velocity * h;
        Vector8::from_iterator(
            [
                p,
                p,
                self.process_std_aspect,
                p,
                v,
                v,
                self.process_std_aspect_velocity,
                v,
            ]
            .iter()
            .map(|s| s * s),
        )
    }

    fn measurement_noise_diag(&self, h: f64) -> Vector4 {
        let p = self.measurement_std_position * h;
        Vector4::new(p * p, p * p, self.measurement_std_aspect.powi(2), p * p)
    }

    /// Single-state predict with dense `F P F^T + Q`.
    pub fn predict(&self, state: &MotionState) -> MotionState {
        let f = transition();
        let q = Matrix8::from_diagonal(&self.process_noise_diag(state.mean[3]));
        let mut covariance = f * state.covariance * f.transpose() + q;
        symmetrize8(&mut covariance);
        MotionState {
            mean: f * state.mean,
            covariance,
        }
    }

    /// Predicts every state one frame ahead. Output order follows input.
    pub fn predict_batch(&self, states: &[MotionState]) -> Vec<MotionState> {
        states.iter().map(|s| self.predict_block(s)).collect()
    }

    /// In-place variant of [`predict_batch`](Self::predict_batch).
    pub fn predict_batch_in_place<'a>(&self, states: impl IntoIterator<Item = &'a mut MotionState>) {
        for s in states {
            *s = self.predict_block(s);
        }
    }

    fn predict_block(&self, state: &MotionState) -> MotionState {
        let q = self.process_noise_diag(state.mean[3]);
        let mut mean = state.mean;
        for i in 0..4 {
            mean[i] += state.mean[i + 4];
        }
        // P = [[A, B], [C, D]]  =>  F P F^T = [[A + B + C + D, B + D], [C + D, D]]
        let p = &state.covariance;
        let mut out = Matrix8::zeros();
        for r in 0..4 {
            for c in 0..4 {
                let a = p[(r, c)];
                let b = p[(r, c + 4)];
                let cc = p[(r + 4, c)];
                let d = p[(r + 4, c + 4)];
                out[(r, c)] = a + b + cc + d;
                out[(r, c + 4)] = b + d;
                out[(r + 4, c)] = cc + d;
                out[(r + 4, c + 4)] = d;
            }
        }
        for i in 0..8 {
            out[(i, i)] += q[i];
        }
        symmetrize8(&mut out);
        MotionState { mean, covariance: out }
    }

    /// Projected mean and innovation covariance `H P H^T + R`.
    pub fn project(&self, state: &MotionState) -> (Vector4, Matrix4) {
        let h = observation();
        let r = Matrix4::from_diagonal(&self.measurement_noise_diag(state.mean[3]));
        (h * state.mean, h * state.covariance * h.transpose() + r)
    }

    pub fn update(&self, state: &MotionState, m: &Measurement) -> Result<MotionState> {
        let (projected, s) = self.project(state);
        let chol = Cholesky::new(s)
            .ok_or_else(|| Error::Numerical("innovation covariance is not positive definite".into()))?;
        let h = observation();
        let pht = state.covariance * h.transpose();
        // K = P H^T S^-1  <=>  S K^T = H P
        let gain = chol.solve(&pht.transpose()).transpose();
        let innovation = m.0 - projected;
        let mean = state.mean + gain * innovation;
        let mut covariance = state.covariance - gain * s * gain.transpose();
        symmetrize8(&mut covariance);
        Ok(MotionState { mean, covariance })
    }

    /// Squared Mahalanobis distance of one measurement, dense reference form.
    pub fn gating_distance(&self, state: &MotionState, m: &Measurement) -> Result<f64> {
        let (projected, s) = self.project(state);
        let inv = s
            .try_inverse()
            .ok_or_else(|| Error::Numerical("innovation covariance is singular".into()))?;
        let d = m.0 - projected;
        Ok((d.transpose() * inv * d)[(0, 0)].max(0.0))
    }

    /// Squared Mahalanobis distances, `states.len() x ms.len()` row-major.
    pub fn gating_distance_batch(&self, states: &[MotionState], ms: &[Measurement]) -> Result<Vec<Vec<f64>>> {
        states
            .iter()
            .map(|state| {
                let h = state.mean[3];
                let r = self.measurement_noise_diag(h);
                let mut s: Matrix4 = state.covariance.fixed_view::<4, 4>(0, 0).into_owned();
                for i in 0..4 {
                    s[(i, i)] += r[i];
                }
                let chol = Cholesky::new(s)
                    .ok_or_else(|| Error::Numerical("innovation covariance is not positive definite".into()))?;
                let l = chol.l();
                let projected = state.project_mean();
                Ok(ms
                    .iter()
                    .map(|m| {
                        let d = m.0 - projected;
                        // forward substitution L z = d, distance = |z|^2
                        let mut z = [0.0f64; 4];
                        for i in 0..4 {
                            let mut acc = d[i];
                            for (k, zk) in z.iter().enumerate().take(i) {
                                acc -= l[(i, k)] * zk;
                            }
                            z[i] = acc / l[(i, i)];
                        }
                        z.iter().map(|v| v * v).sum::<f64>()
                    })
                    .collect())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kf() -> KalmanFilter {
        KalmanFilter::default()
    }

    fn meas(cx: f64, cy: f64, a: f64, h: f64) -> Measurement {
        Measurement::new(cx, cy, a, h).unwrap()
    }

    fn is_pd(m: &Matrix8) -> bool {
        Cholesky::new(*m).is_some()
    }

    fn max_asym(m: &Matrix8) -> f64 {
        (m - m.transpose()).abs().max()
    }

    /// Small xorshift so these tests need no extra dependency.
    struct Lcg(u64);
    impl Lcg {
        fn next(&mut self) -> f64 {
            self.0 ^= self.0 << 13;
            self.0 ^= self.0 >> 7;
            self.0 ^= self.0 << 17;
            (self.0 >> 11) as f64 / (1u64 << 53) as f64
        }
        fn range(&mut self, lo: f64, hi: f64) -> f64 {
            lo + (hi - lo) * self.next()
        }
    }

    fn random_state(rng: &mut Lcg) -> MotionState {
        let k = kf();
        let m = meas(
            rng.range(0.0, 1000.0),
            rng.range(0.0, 1000.0),
            rng.range(0.2, 0.8),
            rng.range(20.0, 300.0),
        );
        let mut s = k.initiate(&m).unwrap();
        for i in [4, 5, 7] {
            s.mean[i] = rng.range(-3.0, 3.0);
        }
        s.mean[6] = rng.range(-1e-3, 1e-3);
        let steps = (rng.next() * 5.0) as usize;
        for _ in 0..steps {
            s = k.predict(&s);
            let jitter = meas(
                s.mean[0] + rng.range(-2.0, 2.0),
                s.mean[1] + rng.range(-2.0, 2.0),
                s.mean[2],
                s.mean[3] + rng.range(-1.0, 1.0),
            );
            s = k.update(&s, &jitter).unwrap();
        }
        s
    }

    #[test]
    fn initiate_is_zero_velocity_and_diagonal() {
        let s = kf().initiate(&meas(5.0, 5.0, 0.5, 10.0)).unwrap();
        assert_eq!(
            s.mean.fixed_rows::<4>(4).iter().copied().collect::<Vec<_>>(),
            vec![0.0; 4]
        );
        for r in 0..8 {
            for c in 0..8 {
                if r == c {
                    assert!(s.covariance[(r, c)] > 0.0);
                } else {
                    assert_eq!(s.covariance[(r, c)], 0.0);
                }
            }
        }
        let again = kf().initiate(&meas(5.0, 5.0, 0.5, 10.0)).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn measurement_rejects_nonpositive_height() {
        assert!(Measurement::new(0.0, 0.0, 0.5, 0.0).is_err());
        assert!(Measurement::new(0.0, 0.0, -0.5, 5.0).is_err());
    }

    #[test]
    fn predict_moves_by_velocity() {
        let k = kf();
        let s = k.initiate(&meas(0.0, 0.0, 0.5, 10.0)).unwrap();
        let p = k.predict_batch(std::slice::from_ref(&s));
        assert_eq!(p[0].mean[0], 0.0);
        let mut moving = s.clone();
        moving.mean[4] = 2.0;
        let p = k.predict_batch(&[moving]);
        assert_eq!(p[0].mean[0], 2.0);
    }

    #[test]
    fn batch_predict_matches_sequential() {
        let k = kf();
        let mut rng = Lcg(0x9e3779b97f4a7c15);
        let states: Vec<_> = (0..50).map(|_| random_state(&mut rng)).collect();
        let batch = k.predict_batch(&states);
        for (b, s) in batch.iter().zip(&states) {
            let r = k.predict(s);
            assert!((b.mean - r.mean).abs().max() < 1e-9);
            assert!((b.covariance - r.covariance).abs().max() < 1e-9);
            assert!(is_pd(&b.covariance));
            assert!(max_asym(&b.covariance) < 1e-9);
        }
    }

    #[test]
    fn zero_innovation_leaves_mean() {
        let k = kf();
        let s = k.predict(&k.initiate(&meas(10.0, 20.0, 0.4, 50.0)).unwrap());
        let m = Measurement(s.project_mean());
        let u = k.update(&s, &m).unwrap();
        assert!((u.project_mean() - s.project_mean()).abs().max() < 1e-9);
    }

    #[test]
    fn update_shrinks_trace_and_keeps_pd() {
        let k = kf();
        let mut rng = Lcg(12345);
        for _ in 0..1000 {
            let s = k.predict(&random_state(&mut rng));
            let m = meas(
                s.mean[0] + rng.range(-20.0, 20.0),
                s.mean[1] + rng.range(-20.0, 20.0),
                rng.range(0.2, 0.8),
                s.mean[3].max(5.0) + rng.range(-4.0, 4.0),
            );
            let u = k.update(&s, &m).unwrap();
            assert!(u.covariance.trace() <= s.covariance.trace() + 1e-9);
            assert!(is_pd(&u.covariance));
            assert!(max_asym(&u.covariance) < 1e-9);
        }
    }

    #[test]
    fn repeated_updates_converge_to_measurement() {
        let k = kf();
        let target = meas(100.0, 50.0, 0.4, 80.0);
        let mut s = k.initiate(&meas(90.0, 45.0, 0.4, 78.0)).unwrap();
        let start = (s.project_mean() - target.0).norm();
        let mut errs = Vec::new();
        for _ in 0..60 {
            s = k.update(&k.predict(&s), &target).unwrap();
            errs.push((s.project_mean() - target.0).norm());
        }
        assert!(errs[0] < start);
        // the velocity estimate may overshoot early on, but the tail settles
        assert!(errs[59] < 1e-2 * start, "residual {}", errs[59]);
        assert!(errs[59] <= errs[30]);
    }

    #[test]
    fn vanishing_measurement_noise_snaps_to_measurement() {
        let k = KalmanFilter {
            measurement_std_position: 1e-9,
            measurement_std_aspect: 1e-9,
            ..KalmanFilter::default()
        };
        let s = k.predict(&k.initiate(&meas(10.0, 10.0, 0.5, 40.0)).unwrap());
        let m = meas(13.0, 8.0, 0.45, 42.0);
        let u = k.update(&s, &m).unwrap();
        assert!((u.project_mean() - m.0).abs().max() < 1e-6);
    }

    #[test]
    fn singular_innovation_is_numerical_error() {
        let k = KalmanFilter {
            measurement_std_position: 0.0,
            measurement_std_aspect: 0.0,
            ..KalmanFilter::default()
        };
        let s = MotionState {
            mean: Vector8::from_column_slice(&[0.0, 0.0, 0.5, 10.0, 0.0, 0.0, 0.0, 0.0]),
            covariance: Matrix8::zeros(),
        };
        assert!(matches!(
            k.update(&s, &meas(1.0, 1.0, 0.5, 10.0)),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(
            k.gating_distance_batch(&[s], &[meas(1.0, 1.0, 0.5, 10.0)]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn gating_zero_and_identity_cases() {
        let k = kf();
        let s = k.predict(&k.initiate(&meas(10.0, 20.0, 0.4, 50.0)).unwrap());
        let d = k
            .gating_distance_batch(std::slice::from_ref(&s), &[Measurement(s.project_mean())])
            .unwrap();
        assert!(d[0][0].abs() < 1e-12);

        // S = I: covariance block plus measurement noise must equal identity
        let flat = KalmanFilter {
            measurement_std_position: 0.0,
            measurement_std_aspect: 0.0,
            ..KalmanFilter::default()
        };
        let cov = Matrix8::identity();
        let state = MotionState {
            mean: Vector8::from_column_slice(&[0.0, 0.0, 0.5, 10.0, 0.0, 0.0, 0.0, 0.0]),
            covariance: cov,
        };
        let d = flat
            .gating_distance_batch(std::slice::from_ref(&state), &[meas(1.0, 0.0, 0.5, 10.0)])
            .unwrap();
        assert!((d[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gating_batch_matches_scalar() {
        let k = kf();
        let mut rng = Lcg(777);
        let states: Vec<_> = (0..20).map(|_| k.predict(&random_state(&mut rng))).collect();
        let ms: Vec<_> = (0..30)
            .map(|_| {
                meas(
                    rng.range(0.0, 1000.0),
                    rng.range(0.0, 1000.0),
                    rng.range(0.2, 0.8),
                    rng.range(20.0, 300.0),
                )
            })
            .collect();
        let batch = k.gating_distance_batch(&states, &ms).unwrap();
        for (i, s) in states.iter().enumerate() {
            for (j, m) in ms.iter().enumerate() {
                let r = k.gating_distance(s, m).unwrap();
                assert!(batch[i][j] >= 0.0);
                assert!((batch[i][j] - r).abs() <= 1e-9 * r.max(1.0), "{} vs {}", batch[i][j], r);
            }
        }
        // reordering the batch permutes rows without changing values
        let rev: Vec<_> = states.iter().rev().cloned().collect();
        let rb = k.gating_distance_batch(&rev, &ms).unwrap();
        for i in 0..states.len() {
            assert_eq!(rb[i], batch[states.len() - 1 - i]);
        }
    }
}
