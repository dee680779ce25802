//! Real spherical harmonics: synthesis of band-limited fields and their
//! parameter derivatives on (theta, phi) charts.
//!
//! Fully normalized real basis: `int Y_lm^2 dOmega = 1`. Modes are indexed
//! flat as `l^2 + l + m` with `-l <= m <= l`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Flat index of mode (l, m).
pub fn mode_index(l: usize, m: i64) -> usize {
    (l * l) as usize + (m + l as i64) as usize
}

/// Number of modes up to and including degree `lmax`.
pub fn num_modes(lmax: usize) -> usize {
    (lmax + 1) * (lmax + 1)
}

/// Degree of a flat mode index.
pub fn mode_degree(idx: usize) -> usize {
    (idx as f64).sqrt() as usize
}

/// Normalized associated Legendre values Q_lm(theta) and their
/// theta-derivatives for 0 <= m <= l <= lmax.
///
/// Derivatives are propagated through the same recurrences as the values,
/// which keeps them stable near the poles.
fn legendre_with_deriv(lmax: usize, theta: f64, q: &mut [f64], dq: &mut [f64]) {
    let tri = |l: usize, m: usize| l * (l + 1) / 2 + m;
    let (sin_t, cos_t) = theta.sin_cos();
    q[tri(0, 0)] = (1.0 / (4.0 * std::f64::consts::PI)).sqrt();
    dq[tri(0, 0)] = 0.0;
    for m in 1..=lmax {
        // diagonal: Q_mm = f_m sin(theta) Q_{m-1,m-1}
        let f = ((2 * m + 1) as f64 / (2 * m) as f64).sqrt();
        let prev = tri(m - 1, m - 1);
        q[tri(m, m)] = f * sin_t * q[prev];
        dq[tri(m, m)] = f * (cos_t * q[prev] + sin_t * dq[prev]);
    }
    for m in 0..lmax {
        // sub-diagonal: Q_{m+1,m} = sqrt(2m+3) cos(theta) Q_mm
        let g = (2.0 * m as f64 + 3.0).sqrt();
        let mm = tri(m, m);
        q[tri(m + 1, m)] = g * cos_t * q[mm];
        dq[tri(m + 1, m)] = g * (-sin_t * q[mm] + cos_t * dq[mm]);
    }
    for m in 0..=lmax {
        for l in (m + 2)..=lmax {
            let lf = l as f64;
            let mf = m as f64;
            let a = ((2.0 * lf - 1.0) * (2.0 * lf + 1.0) / ((lf - mf) * (lf + mf))).sqrt();
            let b = ((2.0 * lf + 1.0) * (lf - 1.0 - mf) * (lf - 1.0 + mf)
                / ((2.0 * lf - 3.0) * (lf - mf) * (lf + mf)))
                .sqrt();
            let p1 = tri(l - 1, m);
            let p2 = tri(l - 2, m);
            q[tri(l, m)] = a * cos_t * q[p1] - b * q[p2];
            dq[tri(l, m)] = a * (-sin_t * q[p1] + cos_t * dq[p1]) - b * dq[p2];
        }
    }
}

/// Evaluate all real modes up to `lmax` at a chart point, together with the
/// theta and phi derivatives. Output slices have length `num_modes(lmax)`.
pub fn eval_modes(lmax: usize, theta: f64, phi: f64, y: &mut [f64], dt: &mut [f64], dp: &mut [f64]) {
    let n = num_modes(lmax);
    assert!(y.len() == n && dt.len() == n && dp.len() == n);
    let tri_len = (lmax + 1) * (lmax + 2) / 2;
    let mut q = vec![0.0; tri_len];
    let mut dq = vec![0.0; tri_len];
    legendre_with_deriv(lmax, theta, &mut q, &mut dq);
    let tri = |l: usize, m: usize| l * (l + 1) / 2 + m;
    let sqrt2 = std::f64::consts::SQRT_2;
    for l in 0..=lmax {
        let i0 = mode_index(l, 0);
        y[i0] = q[tri(l, 0)];
        dt[i0] = dq[tri(l, 0)];
        dp[i0] = 0.0;
        for m in 1..=l {
            let (s, c) = (m as f64 * phi).sin_cos();
            let qq = sqrt2 * q[tri(l, m)];
            let dqq = sqrt2 * dq[tri(l, m)];
            let ip = mode_index(l, m as i64);
            let im = mode_index(l, -(m as i64));
            y[ip] = qq * c;
            dt[ip] = dqq * c;
            dp[ip] = -(m as f64) * qq * s;
            y[im] = qq * s;
            dt[im] = dqq * s;
            dp[im] = m as f64 * qq * c;
        }
    }
}

/// A band-limited field expressed in the real spherical-harmonic basis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShField {
    pub lmax: usize,
    /// Flat coefficients, length `num_modes(lmax)`.
    pub coeffs: Vec<f64>,
}

impl ShField {
    pub fn zeros(lmax: usize) -> Self {
        ShField { lmax, coeffs: vec![0.0; num_modes(lmax)] }
    }

    /// Single-mode field c * Y_lm.
    pub fn single(l: usize, m: i64, c: f64) -> Self {
        let mut f = ShField::zeros(l);
        f.coeffs[mode_index(l, m)] = c;
        f
    }

    /// Random band-limited field with per-degree standard deviation 1/l^2
    /// and no l=0 component.
    pub fn random<R: Rng>(lmax: usize, rng: &mut R) -> Self {
        let mut f = ShField::zeros(lmax);
        for l in 1..=lmax {
            let sd = 1.0 / (l * l) as f64;
            let normal = Normal::new(0.0, sd).unwrap();
            for m in -(l as i64)..=(l as i64) {
                f.coeffs[mode_index(l, m)] = normal.sample(rng);
            }
        }
        f
    }

    /// Value at a chart point.
    pub fn eval(&self, theta: f64, phi: f64) -> f64 {
        let (v, _, _) = self.eval_with_derivs(theta, phi);
        v
    }

    /// Value and (theta, phi) partial derivatives at a chart point.
    pub fn eval_with_derivs(&self, theta: f64, phi: f64) -> (f64, f64, f64) {
        let n = num_modes(self.lmax);
        let mut y = vec![0.0; n];
        let mut dt = vec![0.0; n];
        let mut dp = vec![0.0; n];
        eval_modes(self.lmax, theta, phi, &mut y, &mut dt, &mut dp);
        let mut v = 0.0;
        let mut vt = 0.0;
        let mut vp = 0.0;
        for i in 0..n {
            v += self.coeffs[i] * y[i];
            vt += self.coeffs[i] * dt[i];
            vp += self.coeffs[i] * dp[i];
        }
        (v, vt, vp)
    }
}

/// Precomputed mode tables over a fixed set of chart points: values and
/// (theta, phi) derivatives, row-major `n_points x num_modes`.
pub struct ShTable {
    pub lmax: usize,
    pub n_points: usize,
    pub y: Vec<f64>,
    pub dt: Vec<f64>,
    pub dp: Vec<f64>,
}

impl ShTable {
    pub fn new(lmax: usize, params: &[[f64; 2]]) -> Self {
        let m = num_modes(lmax);
        let n = params.len();
        let mut y = vec![0.0; n * m];
        let mut dt = vec![0.0; n * m];
        let mut dp = vec![0.0; n * m];
        for (i, p) in params.iter().enumerate() {
            eval_modes(lmax, p[0], p[1], &mut y[i * m..(i + 1) * m], &mut dt[i * m..(i + 1) * m], &mut dp[i * m..(i + 1) * m]);
        }
        ShTable { lmax, n_points: n, y, dt, dp }
    }

    pub fn n_modes(&self) -> usize {
        num_modes(self.lmax)
    }

    /// Synthesis: values at all points for the given coefficients.
    pub fn synth(&self, coeffs: &[f64]) -> Vec<f64> {
        let m = self.n_modes();
        assert_eq!(coeffs.len(), m);
        let mut out = vec![0.0; self.n_points];
        for i in 0..self.n_points {
            let row = &self.y[i * m..(i + 1) * m];
            let mut acc = 0.0;
            for j in 0..m {
                acc += row[j] * coeffs[j];
            }
            out[i] = acc;
        }
        out
    }

    /// Synthesis of the (theta, phi) partial derivatives at all points.
    pub fn synth_derivs(&self, coeffs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.n_modes();
        assert_eq!(coeffs.len(), m);
        let mut out_t = vec![0.0; self.n_points];
        let mut out_p = vec![0.0; self.n_points];
        for i in 0..self.n_points {
            let rt = &self.dt[i * m..(i + 1) * m];
            let rp = &self.dp[i * m..(i + 1) * m];
            let mut at = 0.0;
            let mut ap = 0.0;
            for j in 0..m {
                at += rt[j] * coeffs[j];
                ap += rp[j] * coeffs[j];
            }
            out_t[i] = at;
            out_p[i] = ap;
        }
        (out_t, out_p)
    }
}

/// Laplace-Beltrami eigenvalue of degree l on the unit sphere.
pub fn lb_eigenvalue(l: usize) -> f64 {
    (l * (l + 1)) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_derivs(f: &ShField, theta: f64, phi: f64, h: f64) -> (f64, f64) {
        let dt = (f.eval(theta + h, phi) - f.eval(theta - h, phi)) / (2.0 * h);
        let dp = (f.eval(theta, phi + h) - f.eval(theta, phi - h)) / (2.0 * h);
        (dt, dp)
    }

    #[test]
    fn low_order_closed_forms() {
        let pi = std::f64::consts::PI;
        // Y_00 = sqrt(1/4pi)
        let f = ShField::single(0, 0, 1.0);
        assert!((f.eval(0.7, 1.1) - (1.0 / (4.0 * pi)).sqrt()).abs() < 1e-14);
        // Y_10 = sqrt(3/4pi) cos(theta)
        let f = ShField::single(1, 0, 1.0);
        for theta in [0.3f64, 1.2, 2.8] {
            let want = (3.0 / (4.0 * pi)).sqrt() * theta.cos();
            assert!((f.eval(theta, 0.4) - want).abs() < 1e-13);
        }
        // Y_11 = -? sqrt(3/4pi) * sqrt(2)? real convention: sqrt(2) N_11 P_11 cos(phi)
        // with P_11 normalized so that int Y^2 = 1; check norm numerically below.
        let f = ShField::single(2, 0, 1.0);
        let want = (5.0 / (16.0 * pi)).sqrt() * (3.0 * 0.5f64.cos().powi(2) - 1.0);
        assert!((f.eval(0.5, 0.0) - want).abs() < 1e-13);
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = ShField::random(10, &mut rng);
        for &(theta, phi) in &[(0.4, 1.0), (1.5, 2.7), (2.9, 5.0), (0.05, 0.3)] {
            let (_, dt, dp) = f.eval_with_derivs(theta, phi);
            let (fdt, fdp) = fd_derivs(&f, theta, phi, 1e-6);
            assert!((dt - fdt).abs() < 1e-6 * (1.0 + fdt.abs()), "dt {dt} vs {fdt}");
            assert!((dp - fdp).abs() < 1e-6 * (1.0 + fdp.abs()), "dp {dp} vs {fdp}");
        }
    }

    #[test]
    fn basis_is_orthonormal_under_quadrature() {
        // Gauss-like check on a dense lat-long grid with sin(theta) weights.
        let lmax = 4;
        let nt = 400;
        let np = 120;
        let pi = std::f64::consts::PI;
        let m = num_modes(lmax);
        let mut gram = vec![0.0; m * m];
        let mut y = vec![0.0; m];
        let mut dt = vec![0.0; m];
        let mut dp = vec![0.0; m];
        for it in 0..nt {
            let theta = (it as f64 + 0.5) * pi / nt as f64;
            for ip in 0..np {
                let phi = ip as f64 * 2.0 * pi / np as f64;
                let w = theta.sin() * (pi / nt as f64) * (2.0 * pi / np as f64);
                eval_modes(lmax, theta, phi, &mut y, &mut dt, &mut dp);
                for a in 0..m {
                    for b in 0..m {
                        gram[a * m + b] += w * y[a] * y[b];
                    }
                }
            }
        }
        for a in 0..m {
            for b in 0..m {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((gram[a * m + b] - want).abs() < 1e-4, "({a},{b}) -> {}", gram[a * m + b]);
            }
        }
    }

    #[test]
    fn random_field_is_deterministic_and_mean_zero() {
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let f1 = ShField::random(6, &mut r1);
        let f2 = ShField::random(6, &mut r2);
        assert_eq!(f1.coeffs, f2.coeffs);
        assert_eq!(f1.coeffs[0], 0.0);
    }
}
