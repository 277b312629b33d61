//! Elliptic conductivity operators `A u = −∇·(σ∇u)` with zero Neumann flux and
//! the nonlocal bidomain operator `𝔸 = A_i (A_i + A_e)⁻¹ A_e`.
//!
//! Both `A_i` and `A_e` are self-adjoint in the quadrature-weighted inner
//! product, so all composition work happens in the weighted coordinates
//! `ũ = W^{1/2} u` where they become ordinary symmetric matrices. A Householder
//! reflection splits off the constant mode; on its orthogonal complement the
//! sum `A_i + A_e` is positive definite and the inverse is a plain Cholesky
//! solve. The constant mode is carried explicitly with eigenvalue zero.
//!
//! Eigenvalue indices are shifted by one against the usual mean-zero
//! numbering: `λ_0 = 0` belongs to the constant mode and `λ_1` is the first
//! positive eigenvalue.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh::{Field, Grid};

/// Nodal conductivity: a scalar or a symmetric 2×2 tensor `(σxx, σxy, σyy)`
/// per node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Conductivity {
    Scalar(Vec<f64>),
    Tensor(Vec<[f64; 3]>),
}

impl Conductivity {
    pub fn uniform_scalar(grid: &Grid, sigma: f64) -> Self {
        Conductivity::Scalar(vec![sigma; grid.len()])
    }

    pub fn uniform_tensor(grid: &Grid, sigma: [f64; 3]) -> Self {
        Conductivity::Tensor(vec![sigma; grid.len()])
    }

    fn len(&self) -> usize {
        match self {
            Conductivity::Scalar(v) => v.len(),
            Conductivity::Tensor(v) => v.len(),
        }
    }
}

/// Intra- and extracellular conductivities with the ellipticity bounds
/// `0 < σ₁ ≤ σ₂` every nodal value must respect.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConductivitySpec {
    pub sigma_i: Conductivity,
    pub sigma_e: Conductivity,
    pub ellipticity_bounds: (f64, f64),
}

impl ConductivitySpec {
    pub fn uniform(grid: &Grid, sigma_i: f64, sigma_e: f64) -> Self {
        let lo = sigma_i.min(sigma_e);
        let hi = sigma_i.max(sigma_e);
        ConductivitySpec {
            sigma_i: Conductivity::uniform_scalar(grid, sigma_i),
            sigma_e: Conductivity::uniform_scalar(grid, sigma_e),
            ellipticity_bounds: (lo, hi),
        }
    }
}

fn tensor_eigenvalues([xx, xy, yy]: [f64; 3]) -> (f64, f64) {
    let mean = 0.5 * (xx + yy);
    let r = (0.25 * (xx - yy) * (xx - yy) + xy * xy).sqrt();
    (mean - r, mean + r)
}

fn check_ellipticity(sigma: &Conductivity, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::invalid(format!(
            "ellipticity bounds must satisfy 0 < σ₁ ≤ σ₂, got ({lo}, {hi})"
        )));
    }
    let tol = 1e-12 * hi;
    let out = |node, value: f64| Error::Ellipticity { node, value, lower: lo, upper: hi };
    match sigma {
        Conductivity::Scalar(v) => {
            for (node, &s) in v.iter().enumerate() {
                if !(s >= lo - tol && s <= hi + tol) {
                    return Err(out(node, s));
                }
            }
        }
        Conductivity::Tensor(v) => {
            for (node, &t) in v.iter().enumerate() {
                let (a, b) = tensor_eigenvalues(t);
                if !(a >= lo - tol) {
                    return Err(out(node, a));
                }
                if !(b <= hi + tol) {
                    return Err(out(node, b));
                }
            }
        }
    }
    Ok(())
}

/// Discrete `u ↦ −∇·(σ∇u)` as `W⁻¹K` with a symmetric stiffness matrix `K`.
#[derive(Debug, Clone)]
pub struct EllipticOperator {
    grid: Arc<Grid>,
    stiffness: DMatrix<f64>,
}

/// Assembles one conductivity component.
///
/// Scalar conductivities use the five-point flux stencil with face-harmonic
/// averaging. Tensor conductivities (2-D only) use cell-wise corner gradients:
/// every cell corner pairs its two incident edges into a gradient `g` and
/// contributes `|cell|/4 · gᵀσ_c g`, with `σ_c` the mean of the four nodal
/// tensors. For diagonal tensors this reduces to the five-point stencil.
pub fn assemble_elliptic(
    sigma: &Conductivity,
    bounds: (f64, f64),
    grid: &Arc<Grid>,
) -> Result<EllipticOperator> {
    if sigma.len() != grid.len() {
        return Err(Error::GridMismatch);
    }
    check_ellipticity(sigma, bounds)?;
    let n = grid.len();
    let mut k = DMatrix::<f64>::zeros(n, n);
    let h = grid.spacing();

    match sigma {
        Conductivity::Scalar(s) => {
            for e in grid.edges() {
                let (sa, sb) = (s[e.a], s[e.b]);
                let face_sigma = 2.0 * sa * sb / (sa + sb);
                let c = face_sigma * e.face / h[e.axis];
                k[(e.a, e.a)] += c;
                k[(e.b, e.b)] += c;
                k[(e.a, e.b)] -= c;
                k[(e.b, e.a)] -= c;
            }
        }
        Conductivity::Tensor(t) => {
            if grid.dimension() != 2 {
                return Err(Error::invalid("tensor conductivity requires a 2-D grid"));
            }
            let nx = grid.nodes_per_axis()[0];
            let ny = grid.nodes_per_axis()[1];
            let (hx, hy) = (h[0], h[1]);
            let area = hx * hy;
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let n00 = i + nx * j;
                    let n10 = n00 + 1;
                    let n01 = n00 + nx;
                    let n11 = n01 + 1;
                    let mut sc = [0.0; 3];
                    for node in [n00, n10, n01, n11] {
                        for (acc, v) in sc.iter_mut().zip(t[node]) {
                            *acc += 0.25 * v;
                        }
                    }
                    // (x-edge, y-edge) per corner
                    let corners = [
                        ((n00, n10), (n00, n01)),
                        ((n00, n10), (n10, n11)),
                        ((n01, n11), (n00, n01)),
                        ((n01, n11), (n10, n11)),
                    ];
                    for ((xa, xb), (ya, yb)) in corners {
                        // g = [(u_xb − u_xa)/hx, (u_yb − u_ya)/hy]
                        let gx = [(xa, -1.0 / hx), (xb, 1.0 / hx)];
                        let gy = [(ya, -1.0 / hy), (yb, 1.0 / hy)];
                        let w = 0.25 * area;
                        for &(p, cp) in &gx {
                            for &(q, cq) in &gx {
                                k[(p, q)] += w * sc[0] * cp * cq;
                            }
                            for &(q, cq) in &gy {
                                k[(p, q)] += w * sc[1] * cp * cq;
                                k[(q, p)] += w * sc[1] * cp * cq;
                            }
                        }
                        for &(p, cp) in &gy {
                            for &(q, cq) in &gy {
                                k[(p, q)] += w * sc[2] * cp * cq;
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(EllipticOperator {
        grid: Arc::clone(grid),
        stiffness: k,
    })
}

fn weighted_symmetric(grid: &Grid, stiffness: &DMatrix<f64>) -> DMatrix<f64> {
    let s: Vec<f64> = grid.weights().iter().map(|w| 1.0 / w.sqrt()).collect();
    DMatrix::from_fn(stiffness.nrows(), stiffness.ncols(), |i, j| {
        s[i] * stiffness[(i, j)] * s[j]
    })
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut d = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            d = d.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    d
}

impl EllipticOperator {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn stiffness(&self) -> &DMatrix<f64> {
        &self.stiffness
    }

    /// `A u = W⁻¹ K u` on nodal values.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let ku = &self.stiffness * DVector::from_column_slice(u);
        ku.iter().zip(self.grid.weights()).map(|(k, w)| k / w).collect()
    }

    /// Nodal matrix `W⁻¹ K`.
    pub fn nodal_matrix(&self) -> DMatrix<f64> {
        let w = self.grid.weights();
        DMatrix::from_fn(self.grid.len(), self.grid.len(), |i, j| self.stiffness[(i, j)] / w[i])
    }

    /// `W^{-1/2} K W^{-1/2}`: the matrix of `A` in H-orthonormal coordinates.
    pub fn symmetric_matrix(&self) -> DMatrix<f64> {
        weighted_symmetric(&self.grid, &self.stiffness)
    }

    /// `‖M − Mᵀ‖_max / ‖M‖_max` of the H-symmetric representation.
    pub fn symmetry_defect(&self) -> f64 {
        let m = self.symmetric_matrix();
        asymmetry(&m) / max_abs(&m).max(f64::MIN_POSITIVE)
    }
}

/// Discrete surrogates of the analytic constants: coercivity `α`,
/// continuity `M` and the Poincaré constant `C_p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatorConstants {
    pub alpha: f64,
    pub continuity_m: f64,
    pub poincare_cp: f64,
}

/// Eigendecomposition of the bidomain operator.
#[derive(Debug, Clone)]
pub struct BidomainOperator {
    grid: Arc<Grid>,
    eigenvalues: Vec<f64>,
    /// Columns are nodal `ψ_k`, orthonormal in the discrete `H`.
    eigenvectors: DMatrix<f64>,
    /// `ΨᵀW`, the forward (nodal → spectral) transform.
    forward: DMatrix<f64>,
    gradient_sq: Vec<f64>,
    symmetry_defect: f64,
    constants: OperatorConstants,
}

/// Reflection `H = I − 2vvᵀ/β` sending `q` (unit norm, `q[0] > 0`) to `−e₀`.
struct Reflector {
    v: DVector<f64>,
    beta: f64,
}

impl Reflector {
    fn new(q: &DVector<f64>) -> Self {
        let mut v = q.clone();
        v[0] += q[0].signum().max(0.0) + if q[0] == 0.0 { 1.0 } else { 0.0 };
        let beta = v.dot(&v);
        Reflector { v, beta }
    }

    /// Trailing `(n−1)×(n−1)` block of `H M H` for symmetric `M`.
    fn deflate(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = m.nrows();
        let p = m * &self.v;
        let vp = self.v.dot(&p);
        let c1 = 2.0 / self.beta;
        let c2 = 4.0 * vp / (self.beta * self.beta);
        DMatrix::from_fn(n - 1, n - 1, |i, j| {
            let (i, j) = (i + 1, j + 1);
            m[(i, j)] - c1 * (self.v[i] * p[j] + p[i] * self.v[j]) + c2 * self.v[i] * self.v[j]
        })
    }

    /// `H [0; y]`.
    fn lift(&self, y: &[f64]) -> DVector<f64> {
        let n = y.len() + 1;
        let mut x = DVector::zeros(n);
        x.rows_mut(1, n - 1).copy_from_slice(y);
        let s = 2.0 * self.v.dot(&x) / self.beta;
        x.axpy(-s, &self.v, 1.0);
        x
    }
}

/// Composes `𝔸 = A_i (A_i + A_e)⁺ A_e` and eigendecomposes it.
pub fn compose_bidomain(a_i: &EllipticOperator, a_e: &EllipticOperator) -> Result<BidomainOperator> {
    compose_with_seed(a_i, a_e, DEFAULT_CONSTANTS_SEED)
}

const DEFAULT_CONSTANTS_SEED: u64 = 0x0b1d_0a11;
const CONSTANTS_SAMPLES: usize = 100;

fn compose_with_seed(a_i: &EllipticOperator, a_e: &EllipticOperator, seed: u64) -> Result<BidomainOperator> {
    if !Arc::ptr_eq(&a_i.grid, &a_e.grid) && !a_i.grid.same_shape(&a_e.grid) {
        return Err(Error::GridMismatch);
    }
    let grid = Arc::clone(&a_i.grid);
    let n = grid.len();
    let sqrt_w: Vec<f64> = grid.weights().iter().map(|w| w.sqrt()).collect();
    let norm = grid.measure().sqrt();
    let q0 = DVector::from_iterator(n, sqrt_w.iter().map(|s| s / norm));
    let reflector = Reflector::new(&q0);

    let bi = reflector.deflate(&a_i.symmetric_matrix());
    let be = reflector.deflate(&a_e.symmetric_matrix());
    let sum = &bi + &be;
    let chol = nalgebra::Cholesky::new(sum).ok_or_else(|| {
        Error::SingularComposition("A_i + A_e is not positive definite on mean-zero fields".into())
    })?;
    let l = chol.l();
    let z = l
        .solve_lower_triangular(&bi)
        .ok_or_else(|| Error::SingularComposition("triangular solve failed".into()))?;
    let v = l
        .solve_lower_triangular(&be)
        .ok_or_else(|| Error::SingularComposition("triangular solve failed".into()))?;
    let mut composed = z.transpose() * v;
    let defect = asymmetry(&composed) / max_abs(&composed).max(f64::MIN_POSITIVE);
    let sym = (&composed + composed.transpose()) * 0.5;
    composed = sym;

    let eig = SymmetricEigen::new(composed);
    let mut order: Vec<usize> = (0..n - 1).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let lambda_max = order.last().map(|&k| eig.eigenvalues[k]).unwrap_or(0.0);
    if !(lambda_max > 0.0) {
        return Err(Error::DegenerateSpectrum);
    }
    let lambda_min = eig.eigenvalues[order[0]];
    if lambda_min <= 1e-12 * lambda_max {
        return Err(Error::SingularComposition(format!(
            "non-constant mode with eigenvalue {lambda_min:e}"
        )));
    }

    let mut eigenvalues = Vec::with_capacity(n);
    let mut psi = DMatrix::<f64>::zeros(n, n);
    eigenvalues.push(0.0);
    for r in 0..n {
        psi[(r, 0)] = 1.0 / norm;
    }
    for (col, &k) in order.iter().enumerate() {
        eigenvalues.push(eig.eigenvalues[k]);
        let y: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let mut x = reflector.lift(&y);
        // deterministic sign: first non-negligible entry positive
        if let Some(first) = x.iter().find(|v| v.abs() > 1e-8) {
            if *first < 0.0 {
                x.neg_mut();
            }
        }
        for r in 0..n {
            psi[(r, col + 1)] = x[r] / sqrt_w[r];
        }
    }
    let weights = grid.weights();
    let forward = DMatrix::from_fn(n, n, |k, r| psi[(r, k)] * weights[r]);
    let gradient_sq = (0..n)
        .map(|k| {
            let col: Vec<f64> = psi.column(k).iter().copied().collect();
            grid.gradient_sq(&col)
        })
        .collect();

    let mut op = BidomainOperator {
        grid,
        eigenvalues,
        eigenvectors: psi,
        forward,
        gradient_sq,
        symmetry_defect: defect,
        constants: OperatorConstants {
            alpha: f64::NAN,
            continuity_m: f64::NAN,
            poincare_cp: f64::NAN,
        },
    };
    op.constants = estimate_constants(&op, CONSTANTS_SAMPLES, seed)?;
    Ok(op)
}

/// Assembles both components and composes them.
pub fn build_operator(spec: &ConductivitySpec, grid: &Arc<Grid>) -> Result<BidomainOperator> {
    let a_i = assemble_elliptic(&spec.sigma_i, spec.ellipticity_bounds, grid)?;
    let a_e = assemble_elliptic(&spec.sigma_e, spec.ellipticity_bounds, grid)?;
    compose_bidomain(&a_i, &a_e)
}

impl BidomainOperator {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Ascending; `λ_0 = 0` is the constant mode.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn eigenvector(&self, k: usize) -> Field {
        let vals = self.eigenvectors.column(k).iter().copied().collect();
        Field::new(Arc::clone(&self.grid), vals).expect("eigenvector length matches grid")
    }

    /// `ΨᵀW`: maps nodal values to eigen-coefficients.
    pub fn forward(&self) -> &DMatrix<f64> {
        &self.forward
    }

    /// `‖∇ψ_k‖²` for every mode.
    pub fn gradient_sq(&self) -> &[f64] {
        &self.gradient_sq
    }

    /// Relative asymmetry of the composed matrix before symmetrisation.
    pub fn symmetry_defect(&self) -> f64 {
        self.symmetry_defect
    }

    pub fn constants(&self) -> OperatorConstants {
        self.constants
    }

    pub fn lambda_max(&self) -> f64 {
        *self.eigenvalues.last().unwrap_or(&0.0)
    }

    pub fn to_spectral(&self, u: &[f64]) -> Vec<f64> {
        (&self.forward * DVector::from_column_slice(u)).iter().copied().collect()
    }

    pub fn to_nodal(&self, coeffs: &[f64]) -> Vec<f64> {
        (&self.eigenvectors * DVector::from_column_slice(coeffs))
            .iter()
            .copied()
            .collect()
    }

    /// `𝔸 u` through the eigendecomposition.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut c = self.to_spectral(u);
        for (ck, l) in c.iter_mut().zip(&self.eigenvalues) {
            *ck *= l;
        }
        self.to_nodal(&c)
    }

    /// Nodal matrix `Ψ Λ Ψᵀ W`.
    pub fn nodal_matrix(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.len(), self.len(), |r, k| {
            self.eigenvectors[(r, k)] * self.eigenvalues[k]
        });
        scaled * &self.forward
    }

    /// A 64-bit-word fingerprint input: grid shape followed by eigenvalues.
    pub fn fingerprint_words(&self) -> Vec<u64> {
        let g = &self.grid;
        let mut out = vec![g.dimension() as u64];
        out.extend(g.nodes_per_axis().iter().map(|&n| n as u64));
        out.extend(g.extent().iter().map(|x| x.to_bits()));
        out.extend(self.eigenvalues.iter().map(|x| x.to_bits()));
        out
    }
}

/// `a(u, v) = (𝔸u, v)`.
pub fn bilinear_form(op: &BidomainOperator, u: &Field, v: &Field) -> Result<f64> {
    u.check_same_grid(v)?;
    if !op.grid.same_shape(u.grid()) {
        return Err(Error::GridMismatch);
    }
    Ok(bilinear_raw(op, u.values(), v.values()))
}

fn bilinear_raw(op: &BidomainOperator, u: &[f64], v: &[f64]) -> f64 {
    let uc = op.to_spectral(u);
    let vc = op.to_spectral(v);
    uc.iter()
        .zip(&vc)
        .zip(&op.eigenvalues)
        .map(|((a, b), l)| l * a * b)
        .sum()
}

/// `S(t)u = Σ e^{−λ_k t}(u, ψ_k)ψ_k`.
pub fn semigroup_apply(op: &BidomainOperator, t: f64, u: &Field) -> Result<Field> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::NegativeTime(t));
    }
    if !op.grid.same_shape(u.grid()) {
        return Err(Error::GridMismatch);
    }
    let mut c = op.to_spectral(u.values());
    for (ck, l) in c.iter_mut().zip(&op.eigenvalues) {
        *ck *= (-l * t).exp();
    }
    Field::new(Arc::clone(u.grid()), op.to_nodal(&c))
}

/// Smallest positive eigenvalue of the unit-conductivity Neumann Laplacian on
/// this grid. The discrete spectrum is separable with per-axis eigenvalues
/// `(2 − 2cos(kπ/(n−1)))/h²`.
pub fn unit_laplacian_mu1(grid: &Grid) -> f64 {
    grid.nodes_per_axis()
        .iter()
        .zip(grid.spacing())
        .map(|(&n, &h)| (2.0 - 2.0 * (std::f64::consts::PI / (n - 1) as f64).cos()) / (h * h))
        .fold(f64::INFINITY, f64::min)
}

/// Estimates `(α, M, C_p)`.
///
/// `C_p = 1/μ₁`. `α` is the smallest ratio `λ_k / ‖ψ_k‖²_V` over `k ≥ 1`,
/// lowered further if any of `n_fields` random mean-zero fields has a smaller
/// ratio `a(u,u) / ‖∇u‖²`. `M` is the largest `|a(u,v)| / (‖u‖_V ‖v‖_V)` seen
/// over the eigenvectors and random pairs.
pub fn estimate_constants(op: &BidomainOperator, n_fields: usize, seed: u64) -> Result<OperatorConstants> {
    let n = op.len();
    if op.eigenvalues.iter().all(|&l| l == 0.0) {
        return Err(Error::DegenerateSpectrum);
    }
    let grid = &op.grid;
    let poincare_cp = 1.0 / unit_laplacian_mu1(grid);

    let mut alpha = f64::INFINITY;
    let mut m = 0.0f64;
    for k in 1..n {
        let v_sq = 1.0 + op.gradient_sq[k];
        alpha = alpha.min(op.eigenvalues[k] / v_sq);
        m = m.max(op.eigenvalues[k] / v_sq);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fields: Vec<Vec<f64>> = (0..n_fields)
        .map(|i| random_mean_zero(op, &mut rng, i % 2 == 0))
        .collect();
    for u in &fields {
        let grad = grid.gradient_sq(u);
        if grad > 0.0 {
            alpha = alpha.min(bilinear_raw(op, u, u) / grad);
        }
    }
    for pair in fields.windows(2) {
        let (u, v) = (&pair[0], &pair[1]);
        let nu = grid.norm_sq(u) + grid.gradient_sq(u);
        let nv = grid.norm_sq(v) + grid.gradient_sq(v);
        if nu > 0.0 && nv > 0.0 {
            m = m.max(bilinear_raw(op, u, v).abs() / (nu * nv).sqrt());
        }
        if nu > 0.0 {
            m = m.max(bilinear_raw(op, u, u) / nu);
        }
    }

    Ok(OperatorConstants {
        alpha,
        continuity_m: m,
        poincare_cp,
    })
}

/// Rough (nodal white noise) or smooth (decaying mix of eigenvectors) random
/// mean-zero field.
pub(crate) fn random_mean_zero(op: &BidomainOperator, rng: &mut ChaCha8Rng, rough: bool) -> Vec<f64> {
    let n = op.len();
    let grid = &op.grid;
    let mut u: Vec<f64> = if rough {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    } else {
        let mut c = vec![0.0; n];
        for (k, ck) in c.iter_mut().enumerate().skip(1) {
            *ck = rng.sample::<f64, _>(StandardNormal) / (k as f64);
        }
        op.to_nodal(&c)
    };
    let mean = grid.mean(&u);
    for x in &mut u {
        *x -= mean;
    }
    u
}
