//! RKHS interpolation on scattered surface points: Gram assembly,
//! regularized solves, power function, condition numbers, and the discrete
//! L2 / H1 error norms used throughout the benchmarks.

use crate::geometry::{dist3, dot3, SurfaceCloud};
use crate::kernel::{KernelError, KernelSpec};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RkhsError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("dimension mismatch: {0} centers vs {1} values")]
    DimensionMismatch(usize, usize),
    #[error("Gram factorization failed with ridge {0:.2e}; increase lambda to regularize")]
    NotPositiveDefinite(f64),
}

/// Symmetric kernel Gram matrix K[i][j] = k(x_i, x_j).
pub fn assemble_gram(kernel: &KernelSpec, centers: &[[f64; 3]]) -> Result<DMatrix<f64>, RkhsError> {
    let n = centers.len();
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval_kernel(&centers[i], &centers[j])?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Kernel interpolant of values at centers: coefficients of
/// sum_i alpha_i k(., x_i), solved from (K + lambda I) alpha = y.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Interpolant {
    pub kernel: KernelSpec,
    pub centers: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
    pub lambda: f64,
    /// Relative residual of the regularized system the solve produced.
    #[serde(default)]
    pub residual: f64,
}

/// Solves the regularized interpolation system with Cholesky. Duplicate
/// centers are tolerated (they make K singular) by flooring the ridge at
/// 1e-12; the relative residual of the regularized system is recorded on the
/// interpolant and warned about when large (the ill-conditioning pathway,
/// not a failure).
pub fn solve_regularized(
    kernel: &KernelSpec,
    centers: &[[f64; 3]],
    values: &[f64],
    lambda: f64,
) -> Result<Interpolant, RkhsError> {
    if centers.len() != values.len() {
        return Err(RkhsError::DimensionMismatch(centers.len(), values.len()));
    }
    let n = centers.len();
    let mut has_duplicates = false;
    'outer: for i in 0..n {
        for j in (i + 1)..n {
            if dist3(&centers[i], &centers[j]) < 1e-14 {
                has_duplicates = true;
                break 'outer;
            }
        }
    }
    let mut ridge = lambda;
    if has_duplicates && ridge < 1e-12 {
        eprintln!("warning: duplicate centers detected, flooring ridge at 1e-12");
        ridge = 1e-12;
    }
    let k = assemble_gram(kernel, centers)?;
    let y = DVector::from_column_slice(values);
    let mut reg = k.clone();
    for i in 0..n {
        reg[(i, i)] += ridge;
    }
    let mut chol = nalgebra::Cholesky::new(reg);
    if chol.is_none() {
        // escalate the ridge a few decades before giving up
        let mut r = ridge.max(1e-14);
        for _ in 0..8 {
            r *= 100.0;
            let mut reg = k.clone();
            for i in 0..n {
                reg[(i, i)] += r;
            }
            chol = nalgebra::Cholesky::new(reg);
            if chol.is_some() {
                eprintln!("warning: Gram factorization needed ridge {r:.1e}");
                ridge = r;
                break;
            }
        }
    }
    let chol = chol.ok_or(RkhsError::NotPositiveDefinite(ridge))?;
    let alpha = chol.solve(&y);
    // residual of the system actually solved
    let mut reg = k;
    for i in 0..n {
        reg[(i, i)] += ridge;
    }
    let resid = (&reg * &alpha - &y).norm();
    let scale = y.norm().max(1e-30);
    let residual = resid / scale;
    if residual > 1e-10 {
        eprintln!(
            "warning: solve residual {residual:.3e} for {} at n={n}, lambda={ridge:.1e}; \
             coefficients carry rounding noise",
            kernel.label()
        );
    }
    Ok(Interpolant {
        kernel: kernel.clone(),
        centers: centers.to_vec(),
        alpha: alpha.iter().copied().collect(),
        lambda: ridge,
        residual,
    })
}

impl Interpolant {
    pub fn eval(&self, x: &[f64; 3]) -> f64 {
        let mut s = 0.0;
        for (c, &a) in self.centers.iter().zip(&self.alpha) {
            s += a * self.kernel.eval_kernel(x, c).unwrap();
        }
        s
    }

    /// Ambient gradient of the interpolant at x.
    pub fn gradient(&self, x: &[f64; 3]) -> [f64; 3] {
        let mut g = [0.0; 3];
        for (c, &a) in self.centers.iter().zip(&self.alpha) {
            let gk = self.kernel.grad_kernel(x, c).unwrap();
            g[0] += a * gk[0];
            g[1] += a * gk[1];
            g[2] += a * gk[2];
        }
        g
    }

    pub fn eval_many(&self, xs: &[[f64; 3]]) -> Vec<f64> {
        xs.iter().map(|x| self.eval(x)).collect()
    }

    /// Values and tangent-projected gradients over a cloud.
    pub fn eval_on_cloud(&self, cloud: &SurfaceCloud) -> (Vec<f64>, Vec<[f64; 3]>) {
        let n = cloud.len();
        let mut vals = vec![0.0; n];
        let mut grads = vec![[0.0; 3]; n];
        for i in 0..n {
            vals[i] = self.eval(&cloud.points[i]);
            grads[i] = cloud.project_tangent(i, &self.gradient(&cloud.points[i]));
        }
        (vals, grads)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap()
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Power function P(x) = sqrt(k(x,x) - k_x^T K^{-1} k_x) at the given
/// evaluation points; the Schur complement is clamped at zero before the
/// square root to absorb roundoff.
pub fn power_function(
    kernel: &KernelSpec,
    centers: &[[f64; 3]],
    eval_points: &[[f64; 3]],
    lambda: f64,
) -> Result<Vec<f64>, RkhsError> {
    let n = centers.len();
    let mut reg = assemble_gram(kernel, centers)?;
    for i in 0..n {
        reg[(i, i)] += lambda;
    }
    let chol = nalgebra::Cholesky::new(reg).ok_or(RkhsError::NotPositiveDefinite(lambda))?;
    let mut out = Vec::with_capacity(eval_points.len());
    for x in eval_points {
        let kx = DVector::from_iterator(
            n,
            centers.iter().map(|c| kernel.eval_kernel(x, c).unwrap()),
        );
        let sol = chol.solve(&kx);
        let schur = kernel.eval_kernel(x, x)? - kx.dot(&sol);
        out.push(schur.max(0.0).sqrt());
    }
    Ok(out)
}

/// Spectral condition number of the (regularized) Gram matrix. Returns
/// infinity when the smallest eigenvalue is non-positive at working
/// precision.
pub fn condition_number(
    kernel: &KernelSpec,
    centers: &[[f64; 3]],
    lambda: f64,
) -> Result<f64, RkhsError> {
    let n = centers.len();
    let mut k = assemble_gram(kernel, centers)?;
    for i in 0..n {
        k[(i, i)] += lambda;
    }
    let eig = nalgebra::SymmetricEigen::new(k);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &e in eig.eigenvalues.iter() {
        lo = lo.min(e);
        hi = hi.max(e);
    }
    if lo <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(hi / lo)
}

/// Quadrature-weighted discrete norms.
pub fn weighted_l2(values: &[f64], weights: &[f64]) -> f64 {
    values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * v * v)
        .sum::<f64>()
        .sqrt()
}

pub fn weighted_grad_l2(grads: &[[f64; 3]], weights: &[f64]) -> f64 {
    grads
        .iter()
        .zip(weights)
        .map(|(g, w)| w * dot3(g, g))
        .sum::<f64>()
        .sqrt()
}

/// Discrete H1 norm: sqrt(||u||_L2^2 + ||grad u||_L2^2).
pub fn weighted_h1(values: &[f64], grads: &[[f64; 3]], weights: &[f64]) -> f64 {
    let l2 = weighted_l2(values, weights);
    let g2 = weighted_grad_l2(grads, weights);
    (l2 * l2 + g2 * g2).sqrt()
}

/// Relative error norms between an approximation and a reference field,
/// both given with tangent gradients over the same quadrature.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ErrorNorms {
    pub rel_l2: f64,
    pub rel_grad_l2: f64,
    pub rel_h1: f64,
}

pub fn error_norms(
    approx: (&[f64], &[[f64; 3]]),
    reference: (&[f64], &[[f64; 3]]),
    weights: &[f64],
) -> ErrorNorms {
    let n = weights.len();
    let mut dv = vec![0.0; n];
    let mut dg = vec![[0.0; 3]; n];
    for i in 0..n {
        dv[i] = approx.0[i] - reference.0[i];
        for c in 0..3 {
            dg[i][c] = approx.1[i][c] - reference.1[i][c];
        }
    }
    let ref_l2 = weighted_l2(reference.0, weights).max(1e-300);
    let ref_g = weighted_grad_l2(reference.1, weights).max(1e-300);
    let ref_h1 = weighted_h1(reference.0, reference.1, weights).max(1e-300);
    ErrorNorms {
        rel_l2: weighted_l2(&dv, weights) / ref_l2,
        rel_grad_l2: weighted_grad_l2(&dg, weights) / ref_g,
        rel_h1: weighted_h1(&dv, &dg, weights) / ref_h1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{farthest_point_sample, sample_radial_manifold, RadialShape};
    use crate::sh::ShField;

    #[test]
    fn two_point_hand_solve() {
        // Matern 1/2, sigma=1, centers distance ln(2) apart: K = [[1, 1/2], [1/2, 1]],
        // y = (1, 0) -> alpha = (4/3, -2/3).
        let d = 2f64.ln();
        let centers = [[0.0, 0.0, 0.0], [d, 0.0, 0.0]];
        let kernel = KernelSpec::matern(crate::kernel::MaternOrder::Half, 1.0);
        let interp = solve_regularized(&kernel, &centers, &[1.0, 0.0], 0.0).unwrap();
        assert!((interp.alpha[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((interp.alpha[1] + 2.0 / 3.0).abs() < 1e-12);
        // interpolation property
        assert!((interp.eval(&centers[0]) - 1.0).abs() < 1e-12);
        assert!(interp.eval(&centers[1]).abs() < 1e-12);
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let cloud = sample_radial_manifold(&RadialShape::sphere(), 300, 0).unwrap();
        let idx = farthest_point_sample(&cloud, 40, 1).unwrap();
        let pts: Vec<[f64; 3]> = idx.iter().map(|&i| cloud.points[i]).collect();
        for kernel in [
            KernelSpec::gaussian(3.0),
            KernelSpec::matern(crate::kernel::MaternOrder::ThreeHalves, 5.0),
            KernelSpec::wendland(2, 3, 2.0),
        ] {
            let k = assemble_gram(&kernel, &pts).unwrap();
            assert!((&k - k.transpose()).norm() < 1e-14);
            let eig = nalgebra::SymmetricEigen::new(k);
            for &e in eig.eigenvalues.iter() {
                assert!(e > -1e-8, "eigenvalue {e}");
            }
        }
    }

    #[test]
    fn interpolation_hits_data_and_converges() {
        let cloud = sample_radial_manifold(&RadialShape::sphere(), 2000, 0).unwrap();
        let field = ShField::single(3, 1, 1.0);
        let (truth, truth_grad) = cloud.sample_field(&field);
        let kernel = KernelSpec::matern(crate::kernel::MaternOrder::FiveHalves, 4.0);
        let mut prev = f64::INFINITY;
        for m in [100usize, 200, 400] {
            let idx = farthest_point_sample(&cloud, m, 2).unwrap();
            let pts: Vec<[f64; 3]> = idx.iter().map(|&i| cloud.points[i]).collect();
            let vals: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
            let interp = solve_regularized(&kernel, &pts, &vals, 1e-10).unwrap();
            for (p, v) in pts.iter().zip(&vals) {
                assert!((interp.eval(p) - v).abs() < 1e-5);
            }
            let (av, ag) = interp.eval_on_cloud(&cloud);
            let err = error_norms((&av, &ag), (&truth, &truth_grad), &cloud.weights);
            assert!(err.rel_l2 < prev);
            prev = err.rel_l2;
        }
        assert!(prev < 5e-3, "rel_l2 at 400 centers: {prev}");
    }

    #[test]
    fn duplicate_centers_floor_the_ridge() {
        let centers = [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        let kernel = KernelSpec::gaussian(1.0);
        let interp = solve_regularized(&kernel, &centers, &[1.0, 1.0, 0.0], 0.0).unwrap();
        assert!(interp.lambda >= 1e-12);
    }

    #[test]
    fn power_function_vanishes_at_centers_and_bounds_error() {
        let cloud = sample_radial_manifold(&RadialShape::sphere(), 600, 0).unwrap();
        let idx = farthest_point_sample(&cloud, 60, 3).unwrap();
        let pts: Vec<[f64; 3]> = idx.iter().map(|&i| cloud.points[i]).collect();
        let kernel = KernelSpec::matern(crate::kernel::MaternOrder::ThreeHalves, 3.0);
        let p_at_centers = power_function(&kernel, &pts, &pts, 1e-12).unwrap();
        for p in &p_at_centers {
            assert!(*p < 1e-4, "power at center: {p}");
        }
        // pointwise bound |u - s_u| <= P(x) ||u||_H for u = k(., c) with ||u||_H = 1
        let probe = cloud.points[17];
        let vals: Vec<f64> = pts.iter().map(|x| kernel.eval_kernel(x, &probe).unwrap()).collect();
        let interp = solve_regularized(&kernel, &pts, &vals, 1e-12).unwrap();
        let pf = power_function(&kernel, &pts, &cloud.points, 1e-12).unwrap();
        for (i, x) in cloud.points.iter().enumerate() {
            let truth = kernel.eval_kernel(x, &probe).unwrap();
            let err = (interp.eval(x) - truth).abs();
            assert!(err <= pf[i] + 1e-7, "err {err} > power {}", pf[i]);
        }
    }

    #[test]
    fn condition_number_grows_with_flat_kernels() {
        let cloud = sample_radial_manifold(&RadialShape::sphere(), 400, 0).unwrap();
        let idx = farthest_point_sample(&cloud, 50, 4).unwrap();
        let pts: Vec<[f64; 3]> = idx.iter().map(|&i| cloud.points[i]).collect();
        let narrow = condition_number(&KernelSpec::gaussian(8.0), &pts, 0.0).unwrap();
        let wide = condition_number(&KernelSpec::gaussian(2.0), &pts, 0.0).unwrap();
        assert!(wide > narrow, "wide {wide} narrow {narrow}");
        // identity matrix sanity: kappa of K + big ridge ~ 1
        let near_one = condition_number(&KernelSpec::gaussian(8.0), &pts, 1e6).unwrap();
        assert!(near_one < 1.001);
    }

    #[test]
    fn norms_agree_with_hand_computation() {
        let w = [2.0, 3.0];
        let v = [1.0, -2.0];
        assert!((weighted_l2(&v, &w) - (2.0f64 + 12.0).sqrt()).abs() < 1e-15);
        let g = [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        assert!((weighted_grad_l2(&g, &w) - (2.0f64 + 12.0).sqrt()).abs() < 1e-15);
        let h1 = weighted_h1(&v, &g, &w);
        assert!((h1 - 28f64.sqrt()).abs() < 1e-14);
        let e = error_norms((&v, &g), (&v, &g), &w);
        assert!(e.rel_l2 == 0.0 && e.rel_h1 == 0.0);
    }

    #[test]
    fn interpolant_json_round_trip() {
        let centers = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        let kernel = KernelSpec::wendland(1, 3, 0.8);
        let interp = solve_regularized(&kernel, &centers, &[0.5, -0.25], 1e-10).unwrap();
        let back = Interpolant::from_json(&interp.to_json()).unwrap();
        assert_eq!(back.alpha, interp.alpha);
        assert!((back.eval(&[0.3, 0.3, 0.3]) - interp.eval(&[0.3, 0.3, 0.3])).abs() < 1e-16);
    }
}
