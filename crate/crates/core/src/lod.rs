//! Localized orthogonal decomposition: constrained patch problems, correctors
//! and the multiscale Galerkin method.

use faer::prelude::*;
use faer::Side;

use crate::coeffs::{FieldSamples, ProblemDefinition};
use crate::error::{Error, Result};
use crate::fem::{
    assemble_load, assemble_mass, assemble_stiffness_with, prolongation, quasi_interpolation_from, CsrMatrix,
    P1Geometry, SpdFactorization,
};
use crate::geometry::{element_patch, MeshHierarchy, Patch};

/// Fine-scale operators shared by every local problem of one problem on one
/// mesh hierarchy.
pub struct Discretization {
    pub problem: ProblemDefinition,
    pub hier: MeshHierarchy,
    pub geometry: P1Geometry,
    pub samples: FieldSamples,
    /// Fine stiffness of every affine term over all fine nodes. All terms
    /// share one sparsity pattern.
    pub stiffness: Vec<CsrMatrix>,
    pub laplacian: CsrMatrix,
    pub mass: CsrMatrix,
    /// Fine nodes × interior coarse nodes.
    pub prolongation: CsrMatrix,
    /// Interior coarse nodes × fine nodes.
    pub quasi_interpolation: CsrMatrix,
}

impl std::fmt::Debug for Discretization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Discretization")
            .field("problem", &self.problem.id)
            .field("coarse_elements", &self.hier.coarse().element_count())
            .field("fine_nodes", &self.hier.fine().node_count())
            .finish()
    }
}

impl Discretization {
    pub fn new(problem: ProblemDefinition, n_coarse: usize, levels: usize) -> Result<Self> {
        let hier = problem.hierarchy(n_coarse, levels)?;
        Self::from_hierarchy(problem, hier)
    }

    pub fn from_hierarchy(problem: ProblemDefinition, hier: MeshHierarchy) -> Result<Self> {
        // local solves run concurrently over nodes; keep the kernels serial
        faer::set_global_parallelism(faer::Par::Seq);
        let fine = hier.fine();
        let geometry = P1Geometry::new(fine);
        let samples = problem.coefficient.sample(fine)?;
        let stiffness = (0..samples.q_count())
            .map(|q| assemble_stiffness_with(fine, &geometry, samples.term(q)))
            .collect::<Result<Vec<_>>>()?;
        let identity = vec![[[1.0, 0.0], [0.0, 1.0]]; fine.element_count()];
        let laplacian = assemble_stiffness_with(fine, &geometry, &identity)?;
        let mass = assemble_mass(fine);
        let prolongation = prolongation(&hier);
        let quasi_interpolation = quasi_interpolation_from(&prolongation, &mass);
        Ok(Discretization {
            problem,
            hier,
            geometry,
            samples,
            stiffness,
            laplacian,
            mass,
            prolongation,
            quasi_interpolation,
        })
    }

    pub fn q_count(&self) -> usize {
        self.stiffness.len()
    }

    pub fn coarse_dim(&self) -> usize {
        self.hier.coarse().interior_nodes().len()
    }

    /// Fine stiffness `sum_q weights[q] A_q`.
    pub fn stiffness_at(&self, weights: &[f64]) -> CsrMatrix {
        let terms: Vec<&CsrMatrix> = self.stiffness.iter().collect();
        CsrMatrix::linear_combination(&terms, weights)
    }

    /// Fine nodal values of the hat of interior coarse node number `zi`.
    pub fn coarse_hat(&self, zi: usize) -> Vec<f64> {
        let mut unit = vec![0.0; self.coarse_dim()];
        unit[zi] = 1.0;
        self.prolongation.mul_vec(&unit)
    }

    /// Fine load vector `(f(·; mu), phi_i)`.
    pub fn load(&self, mu: f64) -> Vec<f64> {
        let source = self.problem.source.clone();
        assemble_load(self.hier.fine(), move |x| source(x, mu))
    }
}

/// Scatters `local` (indexed like `rows`) into a vector of length `n`.
pub(crate) fn scatter(local: &[f64], rows: &[usize], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (&i, &v) in rows.iter().zip(local) {
        out[i] = v;
    }
    out
}

/// Restriction of the fine operators to the interior of one patch.
#[derive(Debug, Clone)]
pub struct PatchSystem {
    pub patch: Patch,
    /// Fine degrees of freedom: the patch's fine interior nodes.
    pub dofs: Vec<usize>,
    /// Interior coarse node numbers whose quasi-interpolation rows touch the
    /// patch interior.
    pub constraint_nodes: Vec<usize>,
    /// Constraint rows restricted to the patch dofs.
    pub constraint: CsrMatrix,
    /// Affine stiffness terms restricted to the dofs.
    pub stiffness: Vec<CsrMatrix>,
    pub laplacian: CsrMatrix,
}

impl PatchSystem {
    pub fn new(disc: &Discretization, patch: Patch) -> Result<Self> {
        let dofs = patch.fine_interior_nodes.clone();
        let element = match patch.center {
            crate::geometry::PatchCenter::Element(e) => e,
            crate::geometry::PatchCenter::Node(z) => z,
        };
        if dofs.is_empty() {
            return Err(Error::DegeneratePatch {
                element,
                reason: "no fine interior nodes".into(),
            });
        }
        let coarse = disc.hier.coarse();
        let mut candidates: Vec<usize> = patch
            .coarse_elements
            .iter()
            .flat_map(|&e| coarse.elements()[e])
            .filter_map(|v| coarse.interior_index(v))
            .collect();
        candidates.sort_unstable();
        candidates.dedup();
        let restricted = disc.quasi_interpolation.submatrix(&candidates, &dofs);
        let constraint_nodes: Vec<usize> = candidates
            .iter()
            .enumerate()
            .filter(|&(r, _)| restricted.row(r).1.iter().any(|&v| v != 0.0))
            .map(|(_, &z)| z)
            .collect();
        let constraint = disc.quasi_interpolation.submatrix(&constraint_nodes, &dofs);
        let stiffness = disc.stiffness.iter().map(|a| a.submatrix(&dofs, &dofs)).collect();
        let laplacian = disc.laplacian.submatrix(&dofs, &dofs);
        Ok(PatchSystem {
            patch,
            dofs,
            constraint_nodes,
            constraint,
            stiffness,
            laplacian,
        })
    }

    pub fn for_element(disc: &Discretization, element: usize, k: usize) -> Result<Self> {
        Self::new(disc, element_patch(&disc.hier, element, k)?)
    }

    pub fn dim(&self) -> usize {
        self.dofs.len()
    }

    pub fn stiffness_at(&self, weights: &[f64]) -> CsrMatrix {
        let terms: Vec<&CsrMatrix> = self.stiffness.iter().collect();
        CsrMatrix::linear_combination(&terms, weights)
    }

    /// Local index of fine node `node`, if it is a dof.
    pub fn local_index(&self, node: usize) -> Option<usize> {
        self.dofs.binary_search(&node).ok()
    }

    /// `(∫_K a_q grad Phi_z . grad phi_i)_i` over the dofs, one vector per
    /// affine term, integrating only over the fine elements of coarse
    /// element `element`.
    pub fn element_functionals(&self, disc: &Discretization, element: usize, zi: usize) -> Vec<Vec<f64>> {
        let hier = &disc.hier;
        let z = hier.coarse().interior_nodes()[zi];
        let local_vertex = hier.coarse().elements()[element].iter().position(|&v| v == z);
        let mut out = vec![vec![0.0; self.dim()]; disc.q_count()];
        let Some(lv) = local_vertex else {
            return out;
        };
        let fine = hier.fine();
        for &fe in hier.fine_elements_of(element) {
            let tri = fine.elements()[fe];
            let hat = tri.map(|v| hier.coarse().barycentric(element, fine.nodes()[v])[lv]);
            let local = tri.map(|v| self.local_index(v));
            for (q, vec) in out.iter_mut().enumerate() {
                let k = disc.geometry.local_stiffness(fe, &disc.samples.term(q)[fe]);
                for a in 0..3 {
                    if let Some(i) = local[a] {
                        vec[i] += (0..3).map(|b| k[a][b] * hat[b]).sum::<f64>();
                    }
                }
            }
        }
        out
    }
}

/// Solver for `S w + C^T lambda = r, C w = 0` through the Schur complement
/// `C S^{-1} C^T`.
pub struct ConstrainedSolver {
    factor: SpdFactorization,
    constraint: CsrMatrix,
    /// `S^{-1} C^T`.
    y: Mat<f64>,
    schur: Option<SchurInverse>,
}

/// Inverse of the Schur complement; a truncated pseudo-inverse when the
/// restricted constraint rows are linearly dependent.
enum SchurInverse {
    Cholesky(faer::linalg::solvers::Llt<f64>),
    Pseudo(Mat<f64>),
}

impl SchurInverse {
    fn new(s: Mat<f64>) -> Result<Self> {
        if let Ok(llt) = s.llt(Side::Lower) {
            return Ok(SchurInverse::Cholesky(llt));
        }
        let m = s.nrows();
        let eig = s
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::SingularMatrix(format!("schur eigendecomposition failed: {e:?}")))?;
        let u = eig.U();
        let lambda = eig.S().column_vector();
        let top = (0..m).map(|i| lambda[i].abs()).fold(0.0, f64::max);
        let mut scaled = u.to_owned();
        for j in 0..m {
            let l = lambda[j];
            let inv = if l > 1e-12 * top { 1.0 / l } else { 0.0 };
            for i in 0..m {
                scaled[(i, j)] *= inv;
            }
        }
        Ok(SchurInverse::Pseudo(&scaled * u.transpose()))
    }

    fn apply(&self, rhs: &mut Mat<f64>) {
        match self {
            SchurInverse::Cholesky(llt) => llt.solve_in_place(rhs.as_mut()),
            SchurInverse::Pseudo(p) => *rhs = p * &*rhs,
        }
    }
}

impl std::fmt::Debug for ConstrainedSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConstrainedSolver")
            .field("dim", &self.factor.dim())
            .field("constraints", &self.constraint.nrows())
            .finish()
    }
}

impl ConstrainedSolver {
    pub fn new(matrix: &CsrMatrix, constraint: &CsrMatrix) -> Result<Self> {
        Self::with_factor(SpdFactorization::new(matrix)?, constraint)
    }

    /// Reuses the symbolic analysis of `template` for a matrix with the same
    /// pattern.
    pub fn with_template(template: &SpdFactorization, matrix: &CsrMatrix, constraint: &CsrMatrix) -> Result<Self> {
        Self::with_factor(template.refactor(matrix)?, constraint)
    }

    fn with_factor(factor: SpdFactorization, constraint: &CsrMatrix) -> Result<Self> {
        let n = factor.dim();
        let m = constraint.nrows();
        let mut y = Mat::<f64>::zeros(n, m);
        for (r, c, v) in constraint.triplets() {
            y[(c, r)] = v;
        }
        let mut schur = None;
        if m > 0 {
            factor.solve_many(&mut y);
            let mut s = Mat::<f64>::zeros(m, m);
            for r in 0..m {
                let (cols, vals) = constraint.row(r);
                for j in 0..m {
                    s[(r, j)] = cols.iter().zip(vals).map(|(&c, &v)| v * y[(c, j)]).sum();
                }
            }
            let sym = Mat::from_fn(m, m, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]));
            schur = Some(SchurInverse::new(sym)?);
        }
        Ok(ConstrainedSolver {
            factor,
            constraint: constraint.clone(),
            y,
            schur,
        })
    }

    pub fn factorization(&self) -> &SpdFactorization {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.factor.dim()
    }

    /// Solves for one right-hand side.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = self.factor.solve(rhs);
        if let Some(schur) = &self.schur {
            let cx = self.constraint.mul_vec(&x);
            let mut lambda = Mat::from_fn(cx.len(), 1, |i, _| cx[i]);
            schur.apply(&mut lambda);
            let correction = &self.y * &lambda;
            for (i, xi) in x.iter_mut().enumerate() {
                *xi -= correction[(i, 0)];
            }
        }
        x
    }

    /// Solves for every column of `rhs`.
    pub fn solve_many(&self, rhs: &Mat<f64>) -> Mat<f64> {
        let mut x = rhs.clone();
        self.factor.solve_many(&mut x);
        if let Some(schur) = &self.schur {
            let m = self.constraint.nrows();
            let mut cx = Mat::<f64>::zeros(m, x.ncols());
            for r in 0..m {
                let (cols, vals) = self.constraint.row(r);
                for j in 0..x.ncols() {
                    cx[(r, j)] = cols.iter().zip(vals).map(|(&c, &v)| v * x[(c, j)]).sum();
                }
            }
            schur.apply(&mut cx);
            x -= &self.y * &cx;
        }
        x
    }
}

/// Solves the constrained problem on `system` with the given symmetric
/// positive definite `matrix` (for instance the patch Laplacian).
pub fn solve_constrained(system: &PatchSystem, matrix: &CsrMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    Ok(ConstrainedSolver::new(matrix, &system.constraint)?.solve(rhs))
}

/// A corrector restricted to one coarse element's patch.
#[derive(Debug, Clone)]
pub struct CorrectorPiece {
    pub node: usize,
    pub element: usize,
    pub k: usize,
    /// Fine nodes carrying `values`, ascending.
    pub dofs: Vec<usize>,
    pub values: Vec<f64>,
}

impl CorrectorPiece {
    pub fn to_fine(&self, n_fine: usize) -> Vec<f64> {
        scatter(&self.values, &self.dofs, n_fine)
    }
}

/// Corrector of the hat of interior coarse node number `zi` from coarse
/// element `element` at parameter `mu`.
pub fn solve_corrector(disc: &Discretization, mu: f64, zi: usize, element: usize, k: usize) -> Result<CorrectorPiece> {
    let system = PatchSystem::for_element(disc, element, k)?;
    let thetas = disc.problem.coefficient.thetas(mu);
    let solver = ConstrainedSolver::new(&system.stiffness_at(&thetas), &system.constraint)?;
    let rhs = corrector_rhs(&system.element_functionals(disc, element, zi), &thetas);
    Ok(CorrectorPiece {
        node: disc.hier.coarse().interior_nodes()[zi],
        element,
        k,
        values: solver.solve(&rhs),
        dofs: system.dofs,
    })
}

/// `-sum_q theta_q g_q`.
pub fn corrector_rhs(functionals: &[Vec<f64>], thetas: &[f64]) -> Vec<f64> {
    let n = functionals[0].len();
    let mut r = vec![0.0; n];
    for (g, &t) in functionals.iter().zip(thetas) {
        for (ri, gi) in r.iter_mut().zip(g) {
            *ri -= t * gi;
        }
    }
    r
}

/// Coarse hat plus its summed corrector.
#[derive(Debug, Clone)]
pub struct MultiscaleBasisFunction {
    pub node: usize,
    pub hat: Vec<f64>,
    pub corrector: Vec<f64>,
}

impl MultiscaleBasisFunction {
    pub fn values(&self) -> Vec<f64> {
        self.hat.iter().zip(&self.corrector).map(|(a, b)| a + b).collect()
    }
}

/// Multiscale basis function of interior coarse node number `zi`.
pub fn assemble_ms_basis(disc: &Discretization, mu: f64, zi: usize, k: usize) -> Result<MultiscaleBasisFunction> {
    let n_fine = disc.hier.fine().node_count();
    let z = disc.hier.coarse().interior_nodes()[zi];
    let mut corrector = vec![0.0; n_fine];
    for &element in disc.hier.coarse().elements_of_node(z) {
        let piece = solve_corrector(disc, mu, zi, element, k)?;
        for (&i, &v) in piece.dofs.iter().zip(&piece.values) {
            corrector[i] += v;
        }
    }
    Ok(MultiscaleBasisFunction {
        node: z,
        hat: disc.coarse_hat(zi),
        corrector,
    })
}

/// All multiscale basis functions at `mu`, one factorization per coarse
/// element.
pub fn multiscale_basis(disc: &Discretization, mu: f64, k: usize) -> Result<Vec<Vec<f64>>> {
    let coarse = disc.hier.coarse();
    let n_fine = disc.hier.fine().node_count();
    let thetas = disc.problem.coefficient.thetas(mu);
    let mut basis: Vec<Vec<f64>> = (0..disc.coarse_dim()).map(|zi| disc.coarse_hat(zi)).collect();
    for element in 0..coarse.element_count() {
        let vertices: Vec<usize> = coarse.elements()[element]
            .iter()
            .filter_map(|&v| coarse.interior_index(v))
            .collect();
        if vertices.is_empty() {
            continue;
        }
        let system = PatchSystem::for_element(disc, element, k)?;
        let solver = ConstrainedSolver::new(&system.stiffness_at(&thetas), &system.constraint)?;
        let mut rhs = Mat::<f64>::zeros(system.dim(), vertices.len());
        for (c, &zi) in vertices.iter().enumerate() {
            let r = corrector_rhs(&system.element_functionals(disc, element, zi), &thetas);
            for (i, v) in r.into_iter().enumerate() {
                rhs[(i, c)] = v;
            }
        }
        let sol = solver.solve_many(&rhs);
        for (c, &zi) in vertices.iter().enumerate() {
            for (i, &node) in system.dofs.iter().enumerate() {
                basis[zi][node] += sol[(i, c)];
            }
        }
    }
    debug_assert!(basis.iter().all(|b| b.len() == n_fine));
    Ok(basis)
}

/// Result of a Galerkin solve in a coarse-indexed space.
#[derive(Debug, Clone)]
pub struct CoarseSolution {
    /// Coefficients over interior coarse nodes.
    pub coefficients: Vec<f64>,
    /// Fine nodal values of `sum_z u_z basis_z`.
    pub fine: Vec<f64>,
}

/// Galerkin system `B^T A B` and load `B^T f` for a basis given by fine
/// nodal vectors.
pub fn galerkin_system(basis: &[Vec<f64>], a: &CsrMatrix, load: &[f64]) -> (Mat<f64>, Vec<f64>) {
    let n = basis.len();
    let ab: Vec<Vec<f64>> = basis.iter().map(|b| a.mul_vec(b)).collect();
    let support: Vec<Vec<usize>> = basis
        .iter()
        .map(|b| (0..b.len()).filter(|&i| b[i] != 0.0).collect())
        .collect();
    let mut s = Mat::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] = support[i].iter().map(|&r| basis[i][r] * ab[j][r]).sum();
        }
    }
    let f = basis.iter().map(|b| b.iter().zip(load).map(|(x, y)| x * y).sum()).collect();
    (s, f)
}

/// Classical multiscale Galerkin solution with correctors on patches of
/// order `k`.
pub fn classical_lod_solve(disc: &Discretization, mu: f64, k: usize) -> Result<CoarseSolution> {
    if disc.problem.nonlinear {
        return Err(Error::InvalidArgument("the multiscale solver needs a linear problem".into()));
    }
    let basis = multiscale_basis(disc, mu, k)?;
    let a = disc.stiffness_at(&disc.problem.coefficient.thetas(mu));
    let (s, f) = galerkin_system(&basis, &a, &disc.load(mu));
    let sym = Mat::from_fn(s.nrows(), s.ncols(), |i, j| 0.5 * (s[(i, j)] + s[(j, i)]));
    let coefficients = crate::fem::dense_spd_solve(&sym, &f)?;
    let mut fine = vec![0.0; disc.hier.fine().node_count()];
    for (b, &c) in basis.iter().zip(&coefficients) {
        for (fi, bi) in fine.iter_mut().zip(b) {
            *fi += c * bi;
        }
    }
    Ok(CoarseSolution { coefficients, fine })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{model_problem_1, scaled_identity, AffineCoefficient};
    use crate::fem::{dense_lu_solve, fem_reference_solve, h1_seminorm, relative_error, NormKind};
    use std::sync::Arc;

    fn identity_problem() -> ProblemDefinition {
        let mut p = model_problem_1();
        p.coefficient = AffineCoefficient::single(Arc::new(|_| scaled_identity(1.0)));
        p
    }

    /// Dense saddle-point oracle `[[S, C^T], [C, 0]]`.
    fn dense_kkt(s: &CsrMatrix, c: &CsrMatrix, r: &[f64]) -> Vec<f64> {
        let n = s.nrows();
        let m = c.nrows();
        let mut k = Mat::<f64>::zeros(n + m, n + m);
        for (i, j, v) in s.triplets() {
            k[(i, j)] = v;
        }
        for (i, j, v) in c.triplets() {
            k[(n + i, j)] = v;
            k[(j, n + i)] = v;
        }
        let mut rhs = r.to_vec();
        rhs.extend(std::iter::repeat(0.0).take(m));
        dense_lu_solve(&k, &rhs).unwrap()[..n].to_vec()
    }

    #[test]
    fn schur_path_matches_dense_kkt() {
        let disc = Discretization::new(identity_problem(), 4, 1).unwrap();
        let z = disc.hier.coarse().interior_nodes()[4];
        for &element in disc.hier.coarse().elements_of_node(z) {
            for k in 1..4 {
                let system = PatchSystem::for_element(&disc, element, k).unwrap();
                let s = system.stiffness_at(&[1.0]);
                let rhs = corrector_rhs(&system.element_functionals(&disc, element, 4), &[1.0]);
                let oracle = dense_kkt(&s, &system.constraint, &rhs);
                let w = ConstrainedSolver::new(&s, &system.constraint).unwrap().solve(&rhs);
                let diff = w.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-10, "element {element}, k {k}: {diff:e}");
                let cw = system.constraint.mul_vec(&w);
                assert!(cw.iter().all(|v| v.abs() < 1e-9));
            }
        }
    }

    #[test]
    fn constrained_solver_cases() {
        let disc = Discretization::new(model_problem_1(), 4, 2).unwrap();
        let system = PatchSystem::for_element(&disc, 12, 1).unwrap();
        let solver = ConstrainedSolver::new(&system.laplacian, &system.constraint).unwrap();
        assert!(solver.solve(&vec![0.0; system.dim()]).iter().all(|&v| v == 0.0));
        // Riesz identity on a constrained basis: w = solver output of arbitrary rhs
        let g = system.element_functionals(&disc, 12, 0);
        let r = solver.solve(&g[1]);
        for probe in 0..4 {
            let rhs: Vec<f64> = (0..system.dim()).map(|i| ((i * (probe + 3)) % 7) as f64 - 3.0).collect();
            let w = solver.solve(&rhs);
            let lhs = system.laplacian.bilinear(&r, &w);
            let functional: f64 = g[1].iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((lhs - functional).abs() < 1e-9 * (1.0 + functional.abs()));
        }
        let oracle = dense_kkt(&system.laplacian, &system.constraint, &g[1]);
        let diff = r.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10);
    }

    #[test]
    fn corrector_is_in_the_kernel() {
        let disc = Discretization::new(model_problem_1(), 4, 2).unwrap();
        let zi = 4;
        let z = disc.hier.coarse().interior_nodes()[zi];
        for &element in disc.hier.coarse().elements_of_node(z) {
            let piece = solve_corrector(&disc, 2.012, zi, element, 1).unwrap();
            let full = piece.to_fine(disc.hier.fine().node_count());
            let ih = disc.quasi_interpolation.mul_vec(&full);
            assert!(ih.iter().all(|v| v.abs() < 1e-9));
        }
        let basis = assemble_ms_basis(&disc, 2.012, zi, 1).unwrap();
        let ih = disc.quasi_interpolation.mul_vec(&basis.corrector);
        assert!(ih.iter().all(|v| v.abs() < 1e-9));
        let omega = crate::geometry::node_patch_union(&disc.hier, z, 1).unwrap();
        for (i, &v) in basis.corrector.iter().enumerate() {
            if v != 0.0 {
                assert!(omega.fine_interior_nodes.binary_search(&i).is_ok());
            }
        }
    }

    #[test]
    fn saturated_patches_give_the_ideal_corrector() {
        let disc = Discretization::new(model_problem_1(), 4, 2).unwrap();
        let fine = disc.hier.fine();
        let thetas = disc.problem.coefficient.thetas(1.3);
        let a = disc.stiffness_at(&thetas);
        let interior = fine.interior_nodes();
        let s = a.submatrix(interior, interior);
        let all: Vec<usize> = (0..disc.coarse_dim()).collect();
        let c = disc.quasi_interpolation.submatrix(&all, interior);
        for zi in [0, 4] {
            let hat = disc.coarse_hat(zi);
            let ahat = a.mul_vec(&hat);
            let rhs: Vec<f64> = interior.iter().map(|&i| -ahat[i]).collect();
            let ideal = scatter(&dense_kkt(&s, &c, &rhs), interior, fine.node_count());
            let local = assemble_ms_basis(&disc, 1.3, zi, 7).unwrap().corrector;
            let diff: Vec<f64> = local.iter().zip(&ideal).map(|(a, b)| a - b).collect();
            assert!(h1_seminorm(fine, &diff) < 1e-8);
        }
    }

    #[test]
    fn lod_equals_fem_when_scales_coincide() {
        let disc = Discretization::new(model_problem_1(), 8, 0).unwrap();
        let lod = classical_lod_solve(&disc, 2.012, 1).unwrap();
        let fem = fem_reference_solve(&disc.problem, 2.012, &disc.hier).unwrap();
        let diff = lod.fine.iter().zip(&fem).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn localization_error_does_not_grow_with_k() {
        let disc = Discretization::new(model_problem_1(), 8, 2).unwrap();
        let fem = fem_reference_solve(&disc.problem, 2.012, &disc.hier).unwrap();
        let errors: Vec<f64> = (1..=3)
            .map(|k| {
                let u = classical_lod_solve(&disc, 2.012, k).unwrap();
                relative_error(disc.hier.fine(), &u.fine, &fem, NormKind::H1).unwrap()
            })
            .collect();
        assert!(errors[1] <= errors[0] && errors[2] <= errors[1] * (1.0 + 1e-9), "{errors:?}");
    }

    #[test]
    fn degenerate_patch_is_reported() {
        let disc = Discretization::new(model_problem_1(), 2, 0).unwrap();
        assert!(matches!(
            PatchSystem::for_element(&disc, 0, 0),
            Err(Error::DegeneratePatch { .. })
        ));
    }
}
