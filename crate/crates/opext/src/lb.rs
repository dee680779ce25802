//! Reference solution operators for the Laplace-Beltrami equation
//! Delta_LB u = -f with the mean-zero constraint: a spectral solver on the
//! unit sphere, a meshfree GMLS collocation solver on general radial
//! manifolds, and a perturbed wrapper that injects a controlled H1 error.
//! Also builds training pairs (kernel input -> solution) and band-limited
//! test-function families.

use crate::geometry::{surface_gradient, GeometryError, SurfaceCloud};
use crate::kernel::KernelSpec;
use crate::rkhs::weighted_h1;
use crate::sh::{lb_eigenvalue, mode_degree, num_modes, ShField, ShTable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LbError {
    #[error("spectral solver requires the unit sphere")]
    NotSphere,
    #[error("input length {0} does not match cloud size {1}")]
    LengthMismatch(usize, usize),
    #[error("discrete operator is singular beyond the constant nullspace")]
    Singular,
    #[error("oracle evaluation failed: {0}")]
    Eval(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A solution operator: maps a sampled right-hand side to the mean-zero
/// solution and its tangent surface gradient over the same cloud.
pub trait SolutionOracle {
    fn apply(&self, f: &[f64]) -> Result<(Vec<f64>, Vec<[f64; 3]>), LbError>;
    fn label(&self) -> String;
    fn cloud(&self) -> &SurfaceCloud;
}

/// Removes the quadrature-weighted mean in place.
pub fn remove_mean(cloud: &SurfaceCloud, values: &mut [f64]) {
    let mean = cloud.weighted_mean(values);
    for v in values.iter_mut() {
        *v -= mean;
    }
}

/// Spectral solver on the unit sphere: analysis by quadrature, division by
/// the Laplace-Beltrami eigenvalues l(l+1), synthesis with analytic
/// gradients. The band limit is capped at sqrt(N/2) so the quadrature
/// analysis stays well-resolved.
pub struct SphereSpectral {
    cloud: SurfaceCloud,
    table: ShTable,
    pub lmax: usize,
}

impl SphereSpectral {
    pub fn new(cloud: &SurfaceCloud, lmax: usize) -> Result<Self, LbError> {
        if !cloud.is_unit_sphere() {
            return Err(LbError::NotSphere);
        }
        let cap = ((cloud.len() as f64 / 2.0).sqrt().floor() as usize).max(1);
        let lmax = lmax.min(cap);
        let table = ShTable::new(lmax, &cloud.param);
        Ok(SphereSpectral { cloud: cloud.clone(), table, lmax })
    }

    /// Quadrature analysis of sampled values into SH coefficients.
    pub fn analyze(&self, f: &[f64]) -> Vec<f64> {
        let m = self.table.n_modes();
        let n = self.cloud.len();
        let mut c = vec![0.0; m];
        for i in 0..n {
            let wf = self.cloud.weights[i] * f[i];
            let row = &self.table.y[i * m..(i + 1) * m];
            for j in 0..m {
                c[j] += wf * row[j];
            }
        }
        c
    }

    /// Coefficients of the solution for given right-hand-side coefficients.
    pub fn solve_coeffs(&self, c: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; c.len()];
        for (j, &cj) in c.iter().enumerate() {
            let l = mode_degree(j);
            if l >= 1 {
                u[j] = cj / lb_eigenvalue(l);
            }
        }
        u
    }

    fn synth_with_grads(&self, coeffs: &[f64]) -> (Vec<f64>, Vec<[f64; 3]>) {
        let vals = self.table.synth(coeffs);
        let (dt, dp) = self.table.synth_derivs(coeffs);
        let grads: Vec<[f64; 3]> = (0..self.cloud.len())
            .map(|i| self.cloud.chart_to_ambient(i, dt[i], dp[i]))
            .collect();
        (vals, grads)
    }
}

impl SolutionOracle for SphereSpectral {
    fn apply(&self, f: &[f64]) -> Result<(Vec<f64>, Vec<[f64; 3]>), LbError> {
        if f.len() != self.cloud.len() {
            return Err(LbError::LengthMismatch(f.len(), self.cloud.len()));
        }
        let c = self.analyze(f);
        let u_coeffs = self.solve_coeffs(&c);
        let (mut vals, grads) = self.synth_with_grads(&u_coeffs);
        remove_mean(&self.cloud, &mut vals);
        Ok((vals, grads))
    }

    fn label(&self) -> String {
        format!("spectral(lmax={})", self.lmax)
    }

    fn cloud(&self) -> &SurfaceCloud {
        &self.cloud
    }
}

/// Exact spectral solve for a band-limited right-hand side on the unit
/// sphere: coefficient division, no quadrature involved.
pub fn solve_lb_spectral(cloud: &SurfaceCloud, f: &ShField) -> Result<Vec<f64>, LbError> {
    if !cloud.is_unit_sphere() {
        return Err(LbError::NotSphere);
    }
    Ok(lb_solve_field(f).0.sample_field_values(cloud))
}

/// Coefficient-space solve: returns the solution field and the dropped
/// mean-mode coefficient of f.
pub fn lb_solve_field(f: &ShField) -> (ShField, f64) {
    let mut u = ShField::zeros(f.lmax);
    for j in 0..num_modes(f.lmax) {
        let l = mode_degree(j);
        if l >= 1 {
            u.coeffs[j] = f.coeffs[j] / lb_eigenvalue(l);
        }
    }
    (u, f.coeffs.first().copied().unwrap_or(0.0))
}

impl ShField {
    /// Values only, over a cloud's chart samples.
    pub fn sample_field_values(&self, cloud: &SurfaceCloud) -> Vec<f64> {
        cloud.param.iter().map(|&[t, p]| self.eval(t, p)).collect()
    }
}

/// Meshfree collocation solver: per-point GMLS Laplace-Beltrami stencils
/// assembled into a dense system with a quadrature-weight constraint row
/// (bordered Lagrange system); the LU factorization is cached so repeated
/// applies are a single back-substitution.
pub struct MeshfreeLb {
    cloud: SurfaceCloud,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    pub degree: usize,
}

impl MeshfreeLb {
    pub fn new(cloud: &SurfaceCloud, degree: usize) -> Result<Self, LbError> {
        let n = cloud.len();
        // rows: -Delta_LB u = f; border: sum w_i u_i = 0
        let mut a = nalgebra::DMatrix::<f64>::zeros(n + 1, n + 1);
        for i in 0..n {
            let st = crate::geometry::gmls_stencil(cloud, i, degree)?;
            for (row, &j) in st.idx.iter().enumerate() {
                a[(i, j)] -= st.lap[row];
            }
            a[(i, n)] = 1.0; // multiplier absorbs any residual mean incompatibility
            a[(n, i)] = cloud.weights[i];
        }
        let lu = a.lu();
        if lu.determinant() == 0.0 {
            return Err(LbError::Singular);
        }
        Ok(MeshfreeLb { cloud: cloud.clone(), lu, degree })
    }
}

impl SolutionOracle for MeshfreeLb {
    fn apply(&self, f: &[f64]) -> Result<(Vec<f64>, Vec<[f64; 3]>), LbError> {
        let n = self.cloud.len();
        if f.len() != n {
            return Err(LbError::LengthMismatch(f.len(), n));
        }
        let mut rhs = nalgebra::DVector::<f64>::zeros(n + 1);
        let mean = self.cloud.weighted_mean(f);
        for i in 0..n {
            rhs[i] = f[i] - mean;
        }
        let sol = self.lu.solve(&rhs).ok_or(LbError::Singular)?;
        let mut u: Vec<f64> = sol.as_slice()[..n].to_vec();
        remove_mean(&self.cloud, &mut u);
        let grads = surface_gradient(&self.cloud, &u)?;
        Ok((u, grads))
    }

    fn label(&self) -> String {
        format!("meshfree(degree={})", self.degree)
    }

    fn cloud(&self) -> &SurfaceCloud {
        &self.cloud
    }
}

/// Wraps an exact oracle and adds a deterministic smooth error field with
/// H1 norm exactly `delta_target`. The error is keyed by the input samples,
/// so identical inputs always receive the identical perturbation.
pub struct PerturbedOracle<O: SolutionOracle> {
    pub inner: O,
    pub delta_target: f64,
    pub seed: u64,
}

const PERTURBATION_LMAX: usize = 6;

impl<O: SolutionOracle> PerturbedOracle<O> {
    pub fn new(inner: O, delta_target: f64, seed: u64) -> Self {
        PerturbedOracle { inner, delta_target, seed }
    }

    fn noise_key(&self, f: &[f64]) -> u64 {
        let mut h = Sha256::new();
        for v in f {
            h.update(v.to_le_bytes());
        }
        h.update(self.seed.to_le_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

impl<O: SolutionOracle> SolutionOracle for PerturbedOracle<O> {
    fn apply(&self, f: &[f64]) -> Result<(Vec<f64>, Vec<[f64; 3]>), LbError> {
        let (mut u, mut g) = self.inner.apply(f)?;
        if self.delta_target == 0.0 {
            return Ok((u, g));
        }
        let cloud = self.inner.cloud();
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_key(f));
        let eta = ShField::random(PERTURBATION_LMAX, &mut rng);
        let (ev, eg) = cloud.sample_field(&eta);
        let h1 = weighted_h1(&ev, &eg, &cloud.weights);
        let scale = self.delta_target / h1;
        for i in 0..u.len() {
            u[i] += scale * ev[i];
            for c in 0..3 {
                g[i][c] += scale * eg[i][c];
            }
        }
        Ok((u, g))
    }

    fn label(&self) -> String {
        format!("perturbed(delta={:.3e}, inner={})", self.delta_target, self.inner.label())
    }

    fn cloud(&self) -> &SurfaceCloud {
        self.inner.cloud()
    }
}

/// One supervised pair: kernel bump input (mean removed), solution values,
/// and solution tangent gradients, all sampled over the oracle's cloud.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub center: usize,
    pub input: Vec<f64>,
    pub output: Vec<f64>,
    pub output_grad: Vec<[f64; 3]>,
}

/// Kernel input for one center: k(., x_c) sampled at cloud points with the
/// quadrature-weighted mean removed (solvability of the constrained PDE).
pub fn kernel_input(cloud: &SurfaceCloud, kernel: &KernelSpec, center: usize) -> Vec<f64> {
    let xc = cloud.points[center];
    let mut f: Vec<f64> = cloud
        .points
        .iter()
        .map(|p| kernel.eval_kernel(p, &xc).unwrap())
        .collect();
    remove_mean(cloud, &mut f);
    f
}

pub fn make_training_pairs<O: SolutionOracle>(
    oracle: &O,
    kernel: &KernelSpec,
    centers: &[usize],
    cloud: &SurfaceCloud,
) -> Result<Vec<TrainingPair>, LbError> {
    let mut pairs = Vec::with_capacity(centers.len());
    for &c in centers {
        let input = kernel_input(cloud, kernel, c);
        let (output, output_grad) = oracle.apply(&input)?;
        pairs.push(TrainingPair { center: c, input, output, output_grad });
    }
    Ok(pairs)
}

/// Band-limited random test functions: for each max degree L, `per_degree`
/// fields with c_lm ~ Normal(0, 1/l^2 std), no l=0 term, deterministic
/// under the seed.
pub fn make_test_functions(max_degrees: &[usize], per_degree: usize, seed: u64) -> Vec<ShField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(max_degrees.len() * per_degree);
    for &l in max_degrees {
        for _ in 0..per_degree {
            out.push(ShField::random(l, &mut rng));
        }
    }
    out
}

/// Default desk-scale test family: degrees {3, 6, 8, 10, 12}, 3 per degree.
pub fn desk_test_functions(seed: u64) -> Vec<ShField> {
    make_test_functions(&[3, 6, 8, 10, 12], 3, seed)
}

/// Writes a training-pair dataset: one CSV per pair plus a JSON manifest
/// recording the kernel, centers, oracle label, seed, and the mean-removal
/// convention applied to inputs.
pub fn export_training_pairs(
    dir: &Path,
    pairs: &[TrainingPair],
    cloud: &SurfaceCloud,
    kernel: &KernelSpec,
    oracle_label: &str,
    seed: u64,
) -> Result<(), LbError> {
    use std::io::Write;
    std::fs::create_dir_all(dir)?;
    for (k, pair) in pairs.iter().enumerate() {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("pair_{k:04}.csv")))?);
        writeln!(f, "x,y,z,f,u,gx,gy,gz")?;
        for i in 0..cloud.len() {
            let p = cloud.points[i];
            let g = pair.output_grad[i];
            writeln!(
                f,
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                p[0], p[1], p[2], pair.input[i], pair.output[i], g[0], g[1], g[2]
            )?;
        }
    }
    let manifest = serde_json::json!({
        "kernel": kernel,
        "centers": pairs.iter().map(|p| p.center).collect::<Vec<_>>(),
        "oracle": oracle_label,
        "seed": seed,
        "n_points": cloud.len(),
        "input_convention": "kernel column with quadrature-weighted mean removed",
    });
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())?;
    Ok(())
}
