//! P1 finite elements: assembly, quasi-interpolation, norms and direct solvers.

use faer::prelude::*;
use faer::sparse::linalg::solvers::{Llt, Lu, SymbolicLlt, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use faer::Side;

use crate::coeffs::{ProblemDefinition, Tensor2};
use crate::error::{Error, Result};
use crate::geometry::{Mesh, MeshHierarchy, Point};

/// Compressed sparse row matrix with sorted, duplicate-free rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Sums duplicate entries. Explicit zeros are kept so that matrices
    /// assembled on one element set share a pattern.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_offsets = vec![0usize; nrows + 1];
        let mut col_indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_offsets[r + 1] += 1;
                col_indices.push(c);
                values.push(v);
                last = Some((r, c));
            }
        }
        for i in 0..nrows {
            row_offsets[i + 1] += row_offsets[i];
        }
        CsrMatrix {
            nrows,
            ncols,
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let range = self.row_offsets[i]..self.row_offsets[i + 1];
        (&self.col_indices[range.clone()], &self.values[range])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|p| vals[p]).unwrap_or(0.0)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum()
            })
            .collect()
    }

    pub fn transpose_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut out = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[j] += v * xi;
            }
        }
        out
    }

    /// `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        (0..self.nrows)
            .map(|i| {
                let (cols, vals) = self.row(i);
                x[i] * cols.iter().zip(vals).map(|(&j, &v)| v * y[j]).sum::<f64>()
            })
            .sum()
    }

    pub fn transpose(&self) -> CsrMatrix {
        CsrMatrix::from_triplets(self.ncols, self.nrows, self.triplets().map(|(i, j, v)| (j, i, v)).collect())
    }

    pub fn scaled(&self, factor: f64) -> CsrMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// `sum_i weights[i] terms[i]`.
    pub fn linear_combination(terms: &[&CsrMatrix], weights: &[f64]) -> CsrMatrix {
        let first = terms[0];
        let same_pattern = terms
            .iter()
            .all(|t| t.row_offsets == first.row_offsets && t.col_indices == first.col_indices);
        if same_pattern {
            let mut out = first.clone();
            out.values.iter_mut().for_each(|v| *v = 0.0);
            for (t, &w) in terms.iter().zip(weights) {
                for (o, &v) in out.values.iter_mut().zip(&t.values) {
                    *o += w * v;
                }
            }
            return out;
        }
        let triplets = terms
            .iter()
            .zip(weights)
            .flat_map(|(t, &w)| t.triplets().map(move |(i, j, v)| (i, j, w * v)))
            .collect();
        CsrMatrix::from_triplets(first.nrows, first.ncols, triplets)
    }

    /// Rows `rows` and columns `cols` of the matrix, renumbered.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> CsrMatrix {
        let mut col_map = vec![usize::MAX; self.ncols];
        for (new, &old) in cols.iter().enumerate() {
            col_map[old] = new;
        }
        let mut triplets = Vec::new();
        for (r_new, &r) in rows.iter().enumerate() {
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                if col_map[c] != usize::MAX {
                    triplets.push((r_new, col_map[c], v));
                }
            }
        }
        CsrMatrix::from_triplets(rows.len(), cols.len(), triplets)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.nrows == self.ncols && self.triplets().all(|(i, j, v)| (v - self.get(j, i)).abs() <= tol)
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            m[(i, j)] += v;
        }
        m
    }

    /// Column-compressed copy for the sparse factorizations.
    pub fn to_faer(&self) -> Result<SparseColMat<usize, f64>> {
        let triplets: Vec<Triplet<usize, usize, f64>> =
            self.triplets().map(|(i, j, v)| Triplet::new(i, j, v)).collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &triplets)
            .map_err(|e| Error::InvalidArgument(format!("sparse conversion failed: {e:?}")))
    }
}

/// Per-element areas and gradients of the barycentric coordinates.
#[derive(Debug, Clone)]
pub struct P1Geometry {
    pub areas: Vec<f64>,
    pub gradients: Vec<[[f64; 2]; 3]>,
}

impl P1Geometry {
    pub fn new(mesh: &Mesh) -> Self {
        let mut areas = Vec::with_capacity(mesh.element_count());
        let mut gradients = Vec::with_capacity(mesh.element_count());
        for e in 0..mesh.element_count() {
            let [p0, p1, p2] = mesh.vertices(e);
            let area = mesh.area(e);
            let s = 1.0 / (2.0 * area);
            gradients.push([
                [(p1[1] - p2[1]) * s, (p2[0] - p1[0]) * s],
                [(p2[1] - p0[1]) * s, (p0[0] - p2[0]) * s],
                [(p0[1] - p1[1]) * s, (p1[0] - p0[0]) * s],
            ]);
            areas.push(area);
        }
        P1Geometry { areas, gradients }
    }

    /// `|T| grad(phi_i) . A grad(phi_j)` on element `e`.
    pub fn local_stiffness(&self, e: usize, a: &Tensor2) -> [[f64; 3]; 3] {
        let g = &self.gradients[e];
        let mut k = [[0.0; 3]; 3];
        for j in 0..3 {
            let ag = [a[0][0] * g[j][0] + a[0][1] * g[j][1], a[1][0] * g[j][0] + a[1][1] * g[j][1]];
            for i in 0..=j {
                k[i][j] = self.areas[e] * (g[i][0] * ag[0] + g[i][1] * ag[1]);
                k[j][i] = k[i][j];
            }
        }
        k
    }

    /// Gradient of the P1 function with nodal `values` on element `e`.
    pub fn gradient(&self, mesh: &Mesh, e: usize, values: &[f64]) -> [f64; 2] {
        let g = &self.gradients[e];
        let tri = mesh.elements()[e];
        let mut out = [0.0; 2];
        for i in 0..3 {
            out[0] += values[tri[i]] * g[i][0];
            out[1] += values[tri[i]] * g[i][1];
        }
        out
    }
}

/// Stiffness matrix over all nodes for an element-wise constant field.
pub fn assemble_stiffness(mesh: &Mesh, field: &[Tensor2]) -> Result<CsrMatrix> {
    assemble_stiffness_with(mesh, &P1Geometry::new(mesh), field)
}

pub fn assemble_stiffness_with(mesh: &Mesh, geo: &P1Geometry, field: &[Tensor2]) -> Result<CsrMatrix> {
    if field.len() != mesh.element_count() {
        return Err(Error::InvalidArgument(format!(
            "field has {} entries for {} elements",
            field.len(),
            mesh.element_count()
        )));
    }
    if let Some(e) = field.iter().position(|a| a[0][1] != a[1][0]) {
        return Err(Error::InvalidArgument(format!("field is not symmetric on element {e}")));
    }
    let mut triplets = Vec::with_capacity(9 * mesh.element_count());
    for (e, tri) in mesh.elements().iter().enumerate() {
        let k = geo.local_stiffness(e, &field[e]);
        for i in 0..3 {
            for j in 0..3 {
                triplets.push((tri[i], tri[j], k[i][j]));
            }
        }
    }
    Ok(CsrMatrix::from_triplets(mesh.node_count(), mesh.node_count(), triplets))
}

/// Consistent P1 mass matrix over all nodes.
pub fn assemble_mass(mesh: &Mesh) -> CsrMatrix {
    let mut triplets = Vec::with_capacity(9 * mesh.element_count());
    for (e, tri) in mesh.elements().iter().enumerate() {
        let area = mesh.area(e);
        for i in 0..3 {
            for j in 0..3 {
                let w = if i == j { area / 6.0 } else { area / 12.0 };
                triplets.push((tri[i], tri[j], w));
            }
        }
    }
    CsrMatrix::from_triplets(mesh.node_count(), mesh.node_count(), triplets)
}

/// `(f, phi_i)` for every node with the edge-midpoint rule.
pub fn assemble_load(mesh: &Mesh, f: impl Fn(Point) -> f64) -> Vec<f64> {
    let mut load = vec![0.0; mesh.node_count()];
    for (e, tri) in mesh.elements().iter().enumerate() {
        let p = mesh.vertices(e);
        let mid = |a: usize, b: usize| f([0.5 * (p[a][0] + p[b][0]), 0.5 * (p[a][1] + p[b][1])]);
        let m = [mid(1, 2), mid(2, 0), mid(0, 1)];
        let w = mesh.area(e) / 6.0;
        for i in 0..3 {
            // the hat of vertex i is 1/2 at the two adjacent edge midpoints
            load[tri[i]] += w * (m[(i + 1) % 3] + m[(i + 2) % 3]);
        }
    }
    load
}

/// Values of the interior coarse hats at fine nodes: fine nodes × interior
/// coarse nodes.
pub fn prolongation(hier: &MeshHierarchy) -> CsrMatrix {
    let fine = hier.fine();
    let coarse = hier.coarse();
    let mut triplets = Vec::new();
    for v in 0..fine.node_count() {
        let Some(&fe) = fine.elements_of_node(v).first() else {
            continue;
        };
        let ce = hier.fine_to_coarse_element()[fe];
        let lam = coarse.barycentric(ce, fine.nodes()[v]);
        for (i, &cv) in coarse.elements()[ce].iter().enumerate() {
            if let Some(col) = coarse.interior_index(cv) {
                if lam[i].abs() > 1e-14 {
                    triplets.push((v, col, lam[i]));
                }
            }
        }
    }
    CsrMatrix::from_triplets(fine.node_count(), coarse.interior_nodes().len(), triplets)
}

/// Fine nodal values of `sum_z c_z Phi_z` over interior coarse nodes.
pub fn embed_coarse(prolongation: &CsrMatrix, coarse_interior: &[f64]) -> Vec<f64> {
    prolongation.mul_vec(coarse_interior)
}

/// The quasi-interpolation `v -> (v, Phi_z) / (1, Phi_z)` as a matrix with
/// one row per interior coarse node and one column per fine node.
pub fn quasi_interpolation_matrix(hier: &MeshHierarchy) -> CsrMatrix {
    quasi_interpolation_from(&prolongation(hier), &assemble_mass(hier.fine()))
}

pub fn quasi_interpolation_from(prolongation: &CsrMatrix, fine_mass: &CsrMatrix) -> CsrMatrix {
    let ones = vec![1.0; fine_mass.nrows()];
    let mass_of_one = fine_mass.mul_vec(&ones);
    let weights = prolongation.transpose_mul_vec(&mass_of_one);
    let pt = prolongation.transpose();
    let mut triplets = Vec::new();
    for z in 0..pt.nrows() {
        let (cols, vals) = pt.row(z);
        let mut row = std::collections::BTreeMap::<usize, f64>::new();
        for (&i, &p) in cols.iter().zip(vals) {
            let (mc, mv) = fine_mass.row(i);
            for (&j, &m) in mc.iter().zip(mv) {
                *row.entry(j).or_default() += p * m;
            }
        }
        triplets.extend(row.into_iter().map(|(j, v)| (z, j, v / weights[z])));
    }
    CsrMatrix::from_triplets(pt.nrows(), fine_mass.ncols(), triplets)
}

/// Coarse coefficients (all coarse nodes, zero on the boundary) of the L²
/// projection of a fine function into the coarse space.
pub fn l2_projection_to_coarse(hier: &MeshHierarchy, v: &[f64]) -> Result<Vec<f64>> {
    let p = prolongation(hier);
    let m_fine = assemble_mass(hier.fine());
    let b = p.transpose_mul_vec(&m_fine.mul_vec(v));
    let coarse = hier.coarse();
    let m_coarse = assemble_mass(coarse).submatrix(coarse.interior_nodes(), coarse.interior_nodes());
    let c = solve_spd(&m_coarse, &b)?;
    let mut out = vec![0.0; coarse.node_count()];
    for (&z, &cz) in coarse.interior_nodes().iter().zip(&c) {
        out[z] = cz;
    }
    Ok(out)
}

pub fn l2_norm(mesh: &Mesh, v: &[f64]) -> f64 {
    assemble_mass(mesh).bilinear(v, v).max(0.0).sqrt()
}

pub fn h1_seminorm(mesh: &Mesh, v: &[f64]) -> f64 {
    let identity = vec![[[1.0, 0.0], [0.0, 1.0]]; mesh.element_count()];
    energy_norm(mesh, &identity, v, None)
}

/// `sqrt(sum_T |T| A_T grad v . grad v)` over `region` (all elements when
/// `None`).
pub fn energy_norm(mesh: &Mesh, field: &[Tensor2], v: &[f64], region: Option<&[usize]>) -> f64 {
    let geo = P1Geometry::new(mesh);
    let all: Vec<usize>;
    let elements = match region {
        Some(r) => r,
        None => {
            all = (0..mesh.element_count()).collect();
            &all
        }
    };
    let mut sum = 0.0;
    for &e in elements {
        let g = geo.gradient(mesh, e, v);
        let a = &field[e];
        let ag = [a[0][0] * g[0] + a[0][1] * g[1], a[1][0] * g[0] + a[1][1] * g[1]];
        sum += geo.areas[e] * (g[0] * ag[0] + g[1] * ag[1]);
    }
    sum.max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    L2,
    H1Seminorm,
    /// Full H¹ norm, `sqrt(|v|_0^2 + |v|_1^2)`.
    H1,
}

pub fn norm(mesh: &Mesh, v: &[f64], kind: NormKind) -> f64 {
    match kind {
        NormKind::L2 => l2_norm(mesh, v),
        NormKind::H1Seminorm => h1_seminorm(mesh, v),
        NormKind::H1 => (l2_norm(mesh, v).powi(2) + h1_seminorm(mesh, v).powi(2)).sqrt(),
    }
}

/// `‖approx − reference‖ / ‖reference‖`.
pub fn relative_error(mesh: &Mesh, approx: &[f64], reference: &[f64], kind: NormKind) -> Result<f64> {
    let denom = norm(mesh, reference, kind);
    if denom == 0.0 {
        return Err(Error::ZeroReference);
    }
    let e: Vec<f64> = approx.iter().zip(reference).map(|(a, r)| a - r).collect();
    Ok(norm(mesh, &e, kind) / denom)
}

fn check_square(a: &CsrMatrix, b: &[f64]) -> Result<()> {
    if a.nrows() != a.ncols() || b.len() != a.nrows() {
        return Err(Error::InvalidArgument(format!(
            "system of size {}×{} with right-hand side of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    Ok(())
}

fn col_from(b: &[f64]) -> Mat<f64> {
    Mat::from_fn(b.len(), 1, |i, _| b[i])
}

/// Sparse Cholesky factorization that can be refactorized for matrices with
/// the same pattern.
#[derive(Debug, Clone)]
pub struct SpdFactorization {
    symbolic: SymbolicLlt<usize>,
    numeric: Llt<usize, f64>,
    n: usize,
}

impl SpdFactorization {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let m = a.to_faer()?;
        let symbolic = SymbolicLlt::try_new(m.symbolic(), Side::Lower)
            .map_err(|e| Error::SingularMatrix(format!("symbolic factorization failed: {e:?}")))?;
        Self::with_symbolic(symbolic, &m)
    }

    fn with_symbolic(symbolic: SymbolicLlt<usize>, m: &SparseColMat<usize, f64>) -> Result<Self> {
        let numeric = Llt::try_new_with_symbolic(symbolic.clone(), m.as_ref(), Side::Lower)
            .map_err(|e| Error::SingularMatrix(format!("cholesky breakdown: {e:?}")))?;
        Ok(SpdFactorization {
            symbolic,
            numeric,
            n: m.nrows(),
        })
    }

    /// Factorizes another matrix with the identical pattern.
    pub fn refactor(&self, a: &CsrMatrix) -> Result<Self> {
        Self::with_symbolic(self.symbolic.clone(), &a.to_faer()?)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = col_from(b);
        self.numeric.solve_in_place(x.as_mut());
        (0..b.len()).map(|i| x[(i, 0)]).collect()
    }

    /// Solves for every column of `rhs` in place.
    pub fn solve_many(&self, rhs: &mut Mat<f64>) {
        self.numeric.solve_in_place(rhs.as_mut());
    }
}

fn residual_ok(a: &CsrMatrix, x: &[f64], b: &[f64]) -> Result<()> {
    let ax = a.mul_vec(x);
    let r = ax.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let scale = a.frobenius_norm() * x.iter().map(|v| v * v).sum::<f64>().sqrt()
        + b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !r.is_finite() || r > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::SingularMatrix(format!(
            "residual {r:e} exceeds tolerance relative to scale {scale:e}"
        )));
    }
    Ok(())
}

/// Solves a symmetric positive definite system.
pub fn solve_spd(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
    check_square(a, b)?;
    let x = SpdFactorization::new(a)?.solve(b);
    residual_ok(a, &x, b)?;
    Ok(x)
}

/// Sparse LU with reusable symbolic analysis.
#[derive(Debug, Clone)]
pub struct LuFactorization {
    numeric: Lu<usize, f64>,
}

impl LuFactorization {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let m = a.to_faer()?;
        let symbolic = SymbolicLu::try_new(m.symbolic())
            .map_err(|e| Error::SingularMatrix(format!("symbolic factorization failed: {e:?}")))?;
        let numeric = Lu::try_new_with_symbolic(symbolic, m.as_ref())
            .map_err(|e| Error::SingularMatrix(format!("lu breakdown: {e:?}")))?;
        Ok(LuFactorization { numeric })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = col_from(b);
        self.numeric.solve_in_place(x.as_mut());
        (0..b.len()).map(|i| x[(i, 0)]).collect()
    }
}

/// Solves a general square system.
pub fn solve_general(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
    check_square(a, b)?;
    let x = LuFactorization::new(a)?.solve(b);
    residual_ok(a, &x, b)?;
    Ok(x)
}

/// Dense symmetric positive definite solve for small reduced systems.
pub fn dense_spd_solve(a: &Mat<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let llt = a
        .llt(Side::Lower)
        .map_err(|e| Error::SingularMatrix(format!("dense cholesky breakdown: {e:?}")))?;
    let mut x = col_from(b);
    llt.solve_in_place(x.as_mut());
    Ok((0..b.len()).map(|i| x[(i, 0)]).collect())
}

/// Dense LU solve with partial pivoting.
pub fn dense_lu_solve(a: &Mat<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let lu = a.partial_piv_lu();
    let mut x = col_from(b);
    lu.solve_in_place(x.as_mut());
    let x: Vec<f64> = (0..b.len()).map(|i| x[(i, 0)]).collect();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularMatrix("dense lu produced non-finite values".into()));
    }
    Ok(x)
}

/// Fine-scale Galerkin solution of a linear problem at parameter `mu`, with
/// zero boundary values.
pub fn fem_reference_solve(problem: &ProblemDefinition, mu: f64, hier: &MeshHierarchy) -> Result<Vec<f64>> {
    if problem.nonlinear {
        return Err(Error::InvalidArgument(
            "the linear reference solver needs a linear problem".into(),
        ));
    }
    let fine = hier.fine();
    let samples = problem.coefficient.sample(fine)?;
    let field = samples.combine(&problem.coefficient.thetas(mu));
    let a = assemble_stiffness(fine, &field)?;
    let f = assemble_load(fine, |x| (problem.source)(x, mu));
    solve_dirichlet(fine, &a, &f)
}

/// Eliminates boundary nodes, solves the interior system and extends by zero.
pub fn solve_dirichlet(mesh: &Mesh, a: &CsrMatrix, load: &[f64]) -> Result<Vec<f64>> {
    let interior = mesh.interior_nodes();
    let mut u = vec![0.0; mesh.node_count()];
    if interior.is_empty() {
        return Ok(u);
    }
    let a_ii = a.submatrix(interior, interior);
    let b: Vec<f64> = interior.iter().map(|&i| load[i]).collect();
    let x = solve_spd(&a_ii, &b)?;
    for (&i, &xi) in interior.iter().zip(&x) {
        u[i] = xi;
    }
    Ok(u)
}
