//! Radial point-cloud manifolds: Fibonacci sampling, analytic tangent frames
//! and metric tensors, quadrature weights, neighbor graphs, farthest-point
//! subsampling, fill distance / separation radius, and GMLS surface gradients.

use crate::sh::ShField;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("radius is non-positive at (theta={0:.4}, phi={1:.4})")]
    NonPositiveRadius(f64, f64),
    #[error("need at least {1} points, got {0}")]
    TooFewPoints(usize, usize),
    #[error("point {point} has {got} neighbors, need at least {need} for the local fit")]
    TooFewNeighbors { point: usize, got: usize, need: usize },
    #[error("subsample size {0} exceeds cloud size {1}")]
    SubsampleTooLarge(usize, usize),
    #[error("subset must contain at least {0} indices")]
    SubsetTooSmall(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// A closed surface of the form r(theta, phi) * n_hat(theta, phi) with the
/// radius given by a band-limited spherical-harmonic perturbation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadialShape {
    pub base_radius: f64,
    pub perturbation: ShField,
}

impl RadialShape {
    pub fn sphere() -> Self {
        RadialShape { base_radius: 1.0, perturbation: ShField::zeros(0) }
    }

    /// Preset A: sphere with a single l=2 bump (a_20 = 0.15).
    pub fn preset_a() -> Self {
        RadialShape { base_radius: 1.0, perturbation: ShField::single(2, 0, 0.15) }
    }

    /// Preset B: band limit 4, coefficient magnitudes 0.1/l^2, seeded signs.
    pub fn preset_b() -> Self {
        Self::banded(4, 0.1, 11)
    }

    /// Preset C: band limit 8, coefficient magnitudes 0.2/l^2, seeded signs.
    pub fn preset_c() -> Self {
        Self::banded(8, 0.2, 23)
    }

    fn banded(lmax: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = ShField::zeros(lmax);
        for l in 1..=lmax {
            for m in -(l as i64)..=(l as i64) {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                f.coeffs[crate::sh::mode_index(l, m)] = sign * scale / (l * l) as f64;
            }
        }
        RadialShape { base_radius: 1.0, perturbation: f }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "sphere" => Some(Self::sphere()),
            "a" => Some(Self::preset_a()),
            "b" => Some(Self::preset_b()),
            "c" => Some(Self::preset_c()),
            _ => None,
        }
    }

    pub fn is_unit_sphere(&self) -> bool {
        self.base_radius == 1.0 && self.perturbation.coeffs.iter().all(|&c| c == 0.0)
    }

    /// Radius and its (theta, phi) partial derivatives.
    pub fn radius_with_derivs(&self, theta: f64, phi: f64) -> (f64, f64, f64) {
        let (v, dt, dp) = self.perturbation.eval_with_derivs(theta, phi);
        (self.base_radius + v, dt, dp)
    }

    /// Checks r > 0 on a dense chart grid.
    pub fn check_positive(&self) -> Result<(), GeometryError> {
        let pi = std::f64::consts::PI;
        for it in 0..96 {
            let theta = (it as f64 + 0.5) * pi / 96.0;
            for ip in 0..192 {
                let phi = ip as f64 * 2.0 * pi / 192.0;
                if self.radius_with_derivs(theta, phi).0 <= 0.0 {
                    return Err(GeometryError::NonPositiveRadius(theta, phi));
                }
            }
        }
        Ok(())
    }
}

/// A sampled surface with analytic frames, metric data, quadrature weights,
/// and a symmetric radius-based neighbor graph.
#[derive(Debug, Clone)]
pub struct SurfaceCloud {
    pub shape: RadialShape,
    pub points: Vec<[f64; 3]>,
    /// (theta, phi) per point.
    pub param: Vec<[f64; 2]>,
    /// Chart basis vectors (e_theta, e_phi) per point.
    pub tangent: Vec<[[f64; 3]; 2]>,
    pub metric: Vec<[[f64; 2]; 2]>,
    pub inv_metric: Vec<[[f64; 2]; 2]>,
    pub normals: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub neighbor_radius: f64,
    pub neighbors: Vec<Vec<usize>>,
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    norm3(&sub(a, b))
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Samples a radial manifold on a Fibonacci lattice in parameter space.
///
/// The seed rotates the lattice in phi; frames, metric, and quadrature
/// weights are computed analytically from the parameterization.
pub fn sample_radial_manifold(
    shape: &RadialShape,
    n: usize,
    seed: u64,
) -> Result<SurfaceCloud, GeometryError> {
    if n < 16 {
        return Err(GeometryError::TooFewPoints(n, 16));
    }
    shape.check_positive()?;
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let offset = ChaCha8Rng::seed_from_u64(seed).gen::<f64>();
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut points = Vec::with_capacity(n);
    let mut param = Vec::with_capacity(n);
    let mut tangent = Vec::with_capacity(n);
    let mut metric = Vec::with_capacity(n);
    let mut inv_metric = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
        let theta = z.acos();
        let phi = two_pi * ((i as f64 / golden + offset).fract());
        let (sin_t, cos_t) = theta.sin_cos();
        let (sin_p, cos_p) = phi.sin_cos();
        let n_hat = [sin_t * cos_p, sin_t * sin_p, cos_t];
        let t_hat = [cos_t * cos_p, cos_t * sin_p, -sin_t];
        let p_hat = [-sin_p, cos_p, 0.0];
        let (r, r_t, r_p) = shape.radius_with_derivs(theta, phi);
        if r <= 0.0 {
            return Err(GeometryError::NonPositiveRadius(theta, phi));
        }
        let pos = [r * n_hat[0], r * n_hat[1], r * n_hat[2]];
        let e_t = [
            r_t * n_hat[0] + r * t_hat[0],
            r_t * n_hat[1] + r * t_hat[1],
            r_t * n_hat[2] + r * t_hat[2],
        ];
        let e_p = [
            r_p * n_hat[0] + r * sin_t * p_hat[0],
            r_p * n_hat[1] + r * sin_t * p_hat[1],
            r_p * n_hat[2] + r * sin_t * p_hat[2],
        ];
        let g11 = dot3(&e_t, &e_t);
        let g12 = dot3(&e_t, &e_p);
        let g22 = dot3(&e_p, &e_p);
        let det = g11 * g22 - g12 * g12;
        debug_assert!(det > 0.0);
        let inv = [[g22 / det, -g12 / det], [-g12 / det, g11 / det]];
        let nvec = cross(&e_t, &e_p);
        let nlen = norm3(&nvec);
        let cell = 2.0 * two_pi / (n as f64 * sin_t);
        points.push(pos);
        param.push([theta, phi]);
        tangent.push([e_t, e_p]);
        metric.push([[g11, g12], [g12, g22]]);
        inv_metric.push(inv);
        normals.push([nvec[0] / nlen, nvec[1] / nlen, nvec[2] / nlen]);
        weights.push(det.sqrt() * cell);
    }
    let area: f64 = weights.iter().sum();
    let neighbor_radius = 3.5 * (area / n as f64).sqrt();
    let neighbors = build_neighbors(&points, neighbor_radius);
    Ok(SurfaceCloud {
        shape: shape.clone(),
        points,
        param,
        tangent,
        metric,
        inv_metric,
        normals,
        weights,
        neighbor_radius,
        neighbors,
    })
}

fn build_neighbors(points: &[[f64; 3]], radius: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if dist3(&points[i], &points[j]) < radius {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    adj
}

impl SurfaceCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_area(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_unit_sphere(&self) -> bool {
        self.shape.is_unit_sphere()
    }

    /// Rebuilds the neighbor graph with a different radius.
    pub fn set_neighbor_radius(&mut self, radius: f64) {
        self.neighbor_radius = radius;
        self.neighbors = build_neighbors(&self.points, radius);
    }

    /// Ambient surface vector from chart partials: g^{ij} (d_j f) e_i.
    pub fn chart_to_ambient(&self, i: usize, df_dtheta: f64, df_dphi: f64) -> [f64; 3] {
        let gi = &self.inv_metric[i];
        let c1 = gi[0][0] * df_dtheta + gi[0][1] * df_dphi;
        let c2 = gi[1][0] * df_dtheta + gi[1][1] * df_dphi;
        let e = &self.tangent[i];
        [
            c1 * e[0][0] + c2 * e[1][0],
            c1 * e[0][1] + c2 * e[1][1],
            c1 * e[0][2] + c2 * e[1][2],
        ]
    }

    /// Samples a spherical-harmonic field over the cloud's chart, returning
    /// values and analytic ambient surface gradients.
    pub fn sample_field(&self, field: &ShField) -> (Vec<f64>, Vec<[f64; 3]>) {
        let n = self.len();
        let mut vals = vec![0.0; n];
        let mut grads = vec![[0.0; 3]; n];
        for i in 0..n {
            let [theta, phi] = self.param[i];
            let (v, dt, dp) = field.eval_with_derivs(theta, phi);
            vals[i] = v;
            grads[i] = self.chart_to_ambient(i, dt, dp);
        }
        (vals, grads)
    }

    /// Projects an ambient vector onto the tangent plane at point i.
    pub fn project_tangent(&self, i: usize, v: &[f64; 3]) -> [f64; 3] {
        let nrm = &self.normals[i];
        let vn = dot3(v, nrm);
        [v[0] - vn * nrm[0], v[1] - vn * nrm[1], v[2] - vn * nrm[2]]
    }

    /// Weighted mean of sampled values under the quadrature measure.
    pub fn weighted_mean(&self, values: &[f64]) -> f64 {
        let s: f64 = values.iter().zip(&self.weights).map(|(v, w)| v * w).sum();
        s / self.total_area()
    }

    pub fn export_csv(&self, csv_path: &Path, sidecar_path: &Path) -> Result<(), GeometryError> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(csv_path)?);
        writeln!(f, "x,y,z,theta,phi,w")?;
        for i in 0..self.len() {
            let p = self.points[i];
            let q = self.param[i];
            writeln!(
                f,
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                p[0], p[1], p[2], q[0], q[1], self.weights[i]
            )?;
        }
        let sidecar = serde_json::json!({
            "shape": self.shape,
            "neighbor_radius": self.neighbor_radius,
            "n": self.len(),
        });
        std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar).unwrap())?;
        Ok(())
    }

    pub fn import_csv(csv_path: &Path, sidecar_path: &Path) -> Result<SurfaceCloud, GeometryError> {
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)
                .map_err(|e| GeometryError::Parse(e.to_string()))?;
        let shape: RadialShape = serde_json::from_value(sidecar["shape"].clone())
            .map_err(|e| GeometryError::Parse(e.to_string()))?;
        let radius = sidecar["neighbor_radius"].as_f64().unwrap_or(0.0);
        let text = std::fs::read_to_string(csv_path)?;
        let mut params = Vec::new();
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(GeometryError::Parse(format!("bad row: {line}")));
            }
            let theta: f64 = cols[3].parse().map_err(|_| GeometryError::Parse(line.into()))?;
            let phi: f64 = cols[4].parse().map_err(|_| GeometryError::Parse(line.into()))?;
            params.push([theta, phi]);
        }
        let mut cloud = rebuild_from_params(&shape, &params)?;
        if radius > 0.0 {
            cloud.set_neighbor_radius(radius);
        }
        Ok(cloud)
    }
}

/// Rebuilds frames and weights for explicit chart samples of a shape.
/// Quadrature weights use equal-area parameter cells as in construction.
fn rebuild_from_params(
    shape: &RadialShape,
    params: &[[f64; 2]],
) -> Result<SurfaceCloud, GeometryError> {
    // Reuse the constructor's math by building a synthetic lattice of the
    // right size and then substituting the stored chart coordinates.
    let n = params.len();
    if n < 16 {
        return Err(GeometryError::TooFewPoints(n, 16));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut cloud = SurfaceCloud {
        shape: shape.clone(),
        points: Vec::with_capacity(n),
        param: params.to_vec(),
        tangent: Vec::with_capacity(n),
        metric: Vec::with_capacity(n),
        inv_metric: Vec::with_capacity(n),
        normals: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
        neighbor_radius: 0.0,
        neighbors: Vec::new(),
    };
    for &[theta, phi] in params {
        let (sin_t, cos_t) = theta.sin_cos();
        let (sin_p, cos_p) = phi.sin_cos();
        let n_hat = [sin_t * cos_p, sin_t * sin_p, cos_t];
        let t_hat = [cos_t * cos_p, cos_t * sin_p, -sin_t];
        let p_hat = [-sin_p, cos_p, 0.0];
        let (r, r_t, r_p) = shape.radius_with_derivs(theta, phi);
        if r <= 0.0 {
            return Err(GeometryError::NonPositiveRadius(theta, phi));
        }
        let e_t = [
            r_t * n_hat[0] + r * t_hat[0],
            r_t * n_hat[1] + r * t_hat[1],
            r_t * n_hat[2] + r * t_hat[2],
        ];
        let e_p = [
            r_p * n_hat[0] + r * sin_t * p_hat[0],
            r_p * n_hat[1] + r * sin_t * p_hat[1],
            r_p * n_hat[2] + r * sin_t * p_hat[2],
        ];
        let g11 = dot3(&e_t, &e_t);
        let g12 = dot3(&e_t, &e_p);
        let g22 = dot3(&e_p, &e_p);
        let det = g11 * g22 - g12 * g12;
        let nvec = cross(&e_t, &e_p);
        let nlen = norm3(&nvec);
        cloud.points.push([r * n_hat[0], r * n_hat[1], r * n_hat[2]]);
        cloud.tangent.push([e_t, e_p]);
        cloud.metric.push([[g11, g12], [g12, g22]]);
        cloud
            .inv_metric
            .push([[g22 / det, -g12 / det], [-g12 / det, g11 / det]]);
        cloud.normals.push([nvec[0] / nlen, nvec[1] / nlen, nvec[2] / nlen]);
        cloud.weights.push(det.sqrt() * 2.0 * two_pi / (n as f64 * sin_t));
    }
    let area = cloud.total_area();
    cloud.neighbor_radius = 3.5 * (area / n as f64).sqrt();
    cloud.neighbors = build_neighbors(&cloud.points, cloud.neighbor_radius);
    Ok(cloud)
}

/// Greedy farthest-point subsample in the ambient metric. Deterministic
/// under the seed, which picks the starting index.
pub fn farthest_point_sample(
    cloud: &SurfaceCloud,
    m: usize,
    seed: u64,
) -> Result<Vec<usize>, GeometryError> {
    let n = cloud.len();
    if m > n {
        return Err(GeometryError::SubsampleTooLarge(m, n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.gen_range(0..n);
    let mut chosen = Vec::with_capacity(m);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..m {
        chosen.push(current);
        let p = cloud.points[current];
        let mut best = 0;
        let mut best_d = -1.0;
        for j in 0..n {
            let d = dist3(&cloud.points[j], &p);
            if d < min_dist[j] {
                min_dist[j] = d;
            }
            if min_dist[j] > best_d {
                best_d = min_dist[j];
                best = j;
            }
        }
        current = best;
    }
    Ok(chosen)
}

/// Fill distance of a subset, using the cloud itself as the dense
/// evaluation set (unsquared ambient norm).
pub fn fill_distance(subset: &[usize], cloud: &SurfaceCloud) -> Result<f64, GeometryError> {
    if subset.is_empty() {
        return Err(GeometryError::SubsetTooSmall(1));
    }
    let mut h: f64 = 0.0;
    for p in &cloud.points {
        let mut d = f64::INFINITY;
        for &j in subset {
            d = d.min(dist3(p, &cloud.points[j]));
        }
        h = h.max(d);
    }
    Ok(h)
}

/// Separation radius q = min_{i != j} ||x_i - x_j|| / 2.
pub fn separation_radius(subset: &[usize], cloud: &SurfaceCloud) -> Result<f64, GeometryError> {
    if subset.len() < 2 {
        return Err(GeometryError::SubsetTooSmall(2));
    }
    let mut q = f64::INFINITY;
    for (a, &i) in subset.iter().enumerate() {
        for &j in &subset[a + 1..] {
            q = q.min(dist3(&cloud.points[i], &cloud.points[j]));
        }
    }
    Ok(0.5 * q)
}

/// Per-point GMLS differentiation stencil in orthonormal tangent-plane
/// coordinates: linear functionals giving the two first derivatives and the
/// chart Laplacian at the point from neighboring samples.
pub struct GmlsStencil {
    /// Neighbor indices (self first).
    pub idx: Vec<usize>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub lap: Vec<f64>,
    /// Orthonormal tangent frame used for d1/d2.
    pub frame: [[f64; 3]; 2],
}

fn orthonormal_frame(cloud: &SurfaceCloud, i: usize) -> [[f64; 3]; 2] {
    let e1 = cloud.tangent[i][0];
    let e2 = cloud.tangent[i][1];
    let n1 = norm3(&e1);
    let t1 = [e1[0] / n1, e1[1] / n1, e1[2] / n1];
    let p = dot3(&e2, &t1);
    let mut t2 = [e2[0] - p * t1[0], e2[1] - p * t1[1], e2[2] - p * t1[2]];
    let n2 = norm3(&t2);
    t2 = [t2[0] / n2, t2[1] / n2, t2[2] / n2];
    [t1, t2]
}

/// Builds the stencil for point `i` with a weighted polynomial fit of the
/// given total degree over the neighbor graph (plus the point itself).
pub fn gmls_stencil(
    cloud: &SurfaceCloud,
    i: usize,
    degree: usize,
) -> Result<GmlsStencil, GeometryError> {
    let n_basis = (degree + 1) * (degree + 2) / 2;
    let mut idx = vec![i];
    idx.extend(cloud.neighbors[i].iter().copied());
    if idx.len() < n_basis.max(6) {
        return Err(GeometryError::TooFewNeighbors { point: i, got: idx.len() - 1, need: n_basis.max(6) - 1 });
    }
    let frame = orthonormal_frame(cloud, i);
    let bw = 1.5 * cloud.neighbor_radius;
    let nn = idx.len();
    // monomial exponents in graded order
    let mut expo = Vec::with_capacity(n_basis);
    for total in 0..=degree {
        for a in (0..=total).rev() {
            expo.push((a, total - a));
        }
    }
    let mut p = nalgebra::DMatrix::<f64>::zeros(nn, n_basis);
    let mut wts = vec![0.0; nn];
    for (row, &j) in idx.iter().enumerate() {
        let d = sub(&cloud.points[j], &cloud.points[i]);
        let xi = [dot3(&d, &frame[0]), dot3(&d, &frame[1])];
        let w = (-(norm3(&d) / bw).powi(2)).exp();
        wts[row] = w;
        for (col, &(a, b)) in expo.iter().enumerate() {
            p[(row, col)] = xi[0].powi(a as i32) * xi[1].powi(b as i32);
        }
    }
    // normal equations G c = P^T W u; stencil rows come from G^{-1} P^T W
    let mut g = nalgebra::DMatrix::<f64>::zeros(n_basis, n_basis);
    for r in 0..n_basis {
        for c in 0..n_basis {
            let mut s = 0.0;
            for row in 0..nn {
                s += p[(row, r)] * wts[row] * p[(row, c)];
            }
            g[(r, c)] = s;
        }
    }
    let chol = nalgebra::Cholesky::new(g).ok_or(GeometryError::TooFewNeighbors {
        point: i,
        got: idx.len() - 1,
        need: n_basis,
    })?;
    let mut d1 = vec![0.0; nn];
    let mut d2 = vec![0.0; nn];
    let mut lap = vec![0.0; nn];
    let pick = |name: (usize, usize)| expo.iter().position(|&e| e == name).unwrap();
    let i10 = pick((1, 0));
    let i01 = pick((0, 1));
    let (i20, i02) = if degree >= 2 { (pick((2, 0)), pick((0, 2))) } else { (0, 0) };
    for row in 0..nn {
        // column `row` of P^T W
        let mut rhs = nalgebra::DVector::<f64>::zeros(n_basis);
        for r in 0..n_basis {
            rhs[r] = p[(row, r)] * wts[row];
        }
        let c = chol.solve(&rhs);
        d1[row] = c[i10];
        d2[row] = c[i01];
        if degree >= 2 {
            lap[row] = 2.0 * c[i20] + 2.0 * c[i02];
        }
    }
    Ok(GmlsStencil { idx, d1, d2, lap, frame })
}

/// GMLS surface gradient of sampled values: degree-2 local fits in the
/// tangent chart, returned as ambient tangent vectors.
pub fn surface_gradient(
    cloud: &SurfaceCloud,
    values: &[f64],
) -> Result<Vec<[f64; 3]>, GeometryError> {
    assert_eq!(values.len(), cloud.len());
    let mut out = vec![[0.0; 3]; cloud.len()];
    for i in 0..cloud.len() {
        let st = gmls_stencil(cloud, i, 2)?;
        let mut a1 = 0.0;
        let mut a2 = 0.0;
        for (row, &j) in st.idx.iter().enumerate() {
            a1 += st.d1[row] * values[j];
            a2 += st.d2[row] * values[j];
        }
        out[i] = [
            a1 * st.frame[0][0] + a2 * st.frame[1][0],
            a1 * st.frame[0][1] + a2 * st.frame[1][1],
            a1 * st.frame[0][2] + a2 * st.frame[1][2],
        ];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_cloud(n: usize) -> SurfaceCloud {
        sample_radial_manifold(&RadialShape::sphere(), n, 0).unwrap()
    }

    #[test]
    fn sphere_points_on_unit_radius() {
        let cloud = sphere_cloud(1000);
        for p in &cloud.points {
            assert!((norm3(p) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_area_within_one_percent() {
        let cloud = sphere_cloud(4000);
        let area = cloud.total_area();
        let exact = 4.0 * std::f64::consts::PI;
        assert!(area > 0.99 * exact && area < 1.01 * exact, "area {area}");
    }

    #[test]
    fn sphere_metric_is_first_fundamental_form() {
        let cloud = sphere_cloud(2000);
        // pick the point closest to the equator
        let mut best = 0;
        for i in 0..cloud.len() {
            if (cloud.param[i][0] - std::f64::consts::FRAC_PI_2).abs()
                < (cloud.param[best][0] - std::f64::consts::FRAC_PI_2).abs()
            {
                best = i;
            }
        }
        let g = cloud.metric[best];
        let st = cloud.param[best][0].sin();
        assert!((g[0][0] - 1.0).abs() < 1e-10);
        assert!(g[0][1].abs() < 1e-10);
        assert!((g[1][1] - st * st).abs() < 1e-10);
        // metric equals the Gram matrix of the frame everywhere
        for i in (0..cloud.len()).step_by(97) {
            let e = cloud.tangent[i];
            assert!((cloud.metric[i][0][0] - dot3(&e[0], &e[0])).abs() < 1e-12);
            assert!((cloud.metric[i][0][1] - dot3(&e[0], &e[1])).abs() < 1e-12);
            let det = cloud.metric[i][0][0] * cloud.metric[i][1][1]
                - cloud.metric[i][0][1] * cloud.metric[i][0][1];
            assert!(det > 0.0);
        }
    }

    #[test]
    fn neighbor_graph_symmetric() {
        let cloud = sphere_cloud(500);
        for i in 0..cloud.len() {
            for &j in &cloud.neighbors[i] {
                assert!(cloud.neighbors[j].contains(&i));
            }
        }
    }

    #[test]
    fn fps_full_and_antipode() {
        let cloud = sphere_cloud(400);
        let all = farthest_point_sample(&cloud, 400, 1).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 400);

        let two = farthest_point_sample(&cloud, 2, 5).unwrap();
        // second point should be close to the first point's antipode: brute force check
        let p0 = cloud.points[two[0]];
        let best = cloud
            .points
            .iter()
            .map(|q| dist3(q, &p0))
            .fold(0.0f64, f64::max);
        let got = dist3(&cloud.points[two[1]], &p0);
        assert!(got >= 0.95 * best, "got {got}, best possible {best}");
    }

    #[test]
    fn fps_deterministic_and_separates_better_than_random() {
        let cloud = sphere_cloud(800);
        let a = farthest_point_sample(&cloud, 100, 9).unwrap();
        let b = farthest_point_sample(&cloud, 100, 9).unwrap();
        assert_eq!(a, b);
        let mut fps_sum = 0.0;
        let mut rnd_sum = 0.0;
        for seed in 0..10u64 {
            let fps = farthest_point_sample(&cloud, 60, seed).unwrap();
            fps_sum += separation_radius(&fps, &cloud).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let mut rnd: Vec<usize> = (0..cloud.len()).collect();
            for i in 0..60 {
                let j = rng.gen_range(i..rnd.len());
                rnd.swap(i, j);
            }
            rnd.truncate(60);
            rnd_sum += separation_radius(&rnd, &cloud).unwrap();
        }
        assert!(fps_sum / 10.0 >= rnd_sum / 10.0);
    }

    #[test]
    fn fill_distance_cases() {
        let cloud = sphere_cloud(1500);
        let all: Vec<usize> = (0..cloud.len()).collect();
        assert_eq!(fill_distance(&all, &cloud).unwrap(), 0.0);
        // north-most point alone: fill ~ distance to the south-most point ~ 2
        let north = (0..cloud.len()).max_by(|&a, &b| {
            cloud.points[a][2].partial_cmp(&cloud.points[b][2]).unwrap()
        }).unwrap();
        let h = fill_distance(&[north], &cloud).unwrap();
        assert!(h > 1.9 && h <= 2.0, "h = {h}");
        // halving through FPS shrinks the fill distance
        for m in [50usize, 100, 200] {
            let hm = fill_distance(&farthest_point_sample(&cloud, m, 3).unwrap(), &cloud).unwrap();
            let h2m = fill_distance(&farthest_point_sample(&cloud, 2 * m, 3).unwrap(), &cloud).unwrap();
            assert!(h2m < hm);
        }
        assert!(fill_distance(&[], &cloud).is_err());
    }

    #[test]
    fn separation_radius_cases() {
        let cloud = sphere_cloud(1000);
        let north = (0..cloud.len()).max_by(|&a, &b| {
            cloud.points[a][2].partial_cmp(&cloud.points[b][2]).unwrap()
        }).unwrap();
        let south = (0..cloud.len()).min_by(|&a, &b| {
            cloud.points[a][2].partial_cmp(&cloud.points[b][2]).unwrap()
        }).unwrap();
        let q = separation_radius(&[north, south], &cloud).unwrap();
        assert!((q - 1.0).abs() < 0.01, "q = {q}");
        assert_eq!(separation_radius(&[3, 3], &cloud).unwrap(), 0.0);
        assert!(separation_radius(&[3], &cloud).is_err());
        // q <= h over random subsets
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let m = rng.gen_range(5..200);
            let subset: Vec<usize> = (0..m).map(|_| rng.gen_range(0..cloud.len())).collect();
            let mut uniq = subset.clone();
            uniq.sort_unstable();
            uniq.dedup();
            if uniq.len() < 2 {
                continue;
            }
            let q = separation_radius(&uniq, &cloud).unwrap();
            let h = fill_distance(&uniq, &cloud).unwrap();
            assert!(q <= h + 1e-12);
        }
    }

    #[test]
    fn surface_gradient_constant_and_linear() {
        let cloud = sphere_cloud(4000);
        let constant = vec![3.7; cloud.len()];
        let g = surface_gradient(&cloud, &constant).unwrap();
        for v in &g {
            assert!(norm3(v) < 1e-10);
        }
        // u = z restricted to the sphere: grad = e_z - (e_z . n) n
        let uz: Vec<f64> = cloud.points.iter().map(|p| p[2]).collect();
        let g = surface_gradient(&cloud, &uz).unwrap();
        let mut err2 = 0.0;
        let mut ref2 = 0.0;
        for i in 0..cloud.len() {
            let n = cloud.normals[i];
            let want = [-n[2] * n[0], -n[2] * n[1], 1.0 - n[2] * n[2]];
            let d = sub(&g[i], &want);
            err2 += cloud.weights[i] * dot3(&d, &d);
            ref2 += cloud.weights[i] * dot3(&want, &want);
            // tangency is structural
            let t = dot3(&g[i], &n).abs();
            if norm3(&g[i]) > 1e-9 {
                assert!(t / norm3(&g[i]) < 1e-8);
            }
        }
        let rel = (err2 / ref2).sqrt();
        assert!(rel < 0.01, "linear-field gradient rel err {rel}");
    }

    #[test]
    fn presets_have_positive_radius() {
        for shape in [RadialShape::preset_a(), RadialShape::preset_b(), RadialShape::preset_c()] {
            shape.check_positive().unwrap();
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = sample_radial_manifold(&RadialShape::preset_a(), 300, 4).unwrap();
        let csv = dir.path().join("cloud.csv");
        let side = dir.path().join("cloud.json");
        cloud.export_csv(&csv, &side).unwrap();
        let back = SurfaceCloud::import_csv(&csv, &side).unwrap();
        assert_eq!(back.len(), cloud.len());
        for i in 0..cloud.len() {
            assert!(dist3(&back.points[i], &cloud.points[i]) < 1e-12);
            assert!((back.weights[i] - cloud.weights[i]).abs() < 1e-12 * cloud.weights[i].abs().max(1.0));
        }
    }
}
