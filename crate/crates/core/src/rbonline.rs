//! Online phase: reduced local solves, global assembly by summation, the
//! linear solver and Newton's method for the Richards problem.

use std::time::Instant;

use faer::Mat;

use crate::error::{Error, Result};
use crate::fem::{CsrMatrix, LuFactorization, P1Geometry, SpdFactorization};
use crate::geometry::Mesh;
use crate::lod::Discretization;
use crate::rboffline::{reduced_solve, OfflineDb};

/// Parameter of every node, or one for all.
#[derive(Debug, Clone, PartialEq)]
pub enum ParameterAssignment {
    Uniform(f64),
    PerNode(Vec<f64>),
}

impl ParameterAssignment {
    fn value(&self, zi: usize) -> f64 {
        match self {
            ParameterAssignment::Uniform(mu) => *mu,
            ParameterAssignment::PerNode(v) => v[zi],
        }
    }
}

/// Reduced coefficients of every online basis function.
#[derive(Debug, Clone)]
pub struct OnlineBasis {
    /// Parameter used at each node after clamping to the domain.
    pub parameters: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
    /// Number of node parameters moved onto the domain boundary.
    pub clamped: usize,
    /// Wall time of each local solve in seconds.
    pub local_seconds: Vec<f64>,
}

/// Coefficients `q_z(mu)` of `Phi_z + sum_j q_j xi_j`.
pub fn online_local_solve(db: &OfflineDb, zi: usize, mu: f64) -> Result<Vec<f64>> {
    let coeff = &db.disc.problem.coefficient;
    let local = &db.local[zi];
    let j = db.spaces[zi].dim();
    let mut d = Mat::<f64>::zeros(j, j);
    let mut f = vec![0.0; j];
    for q in 0..db.q_count() {
        let t = coeff.theta(q, mu);
        d += faer::Scale(t) * &local.stiffness[q];
        for (fi, c) in f.iter_mut().zip(&local.coupling[q]) {
            *fi -= t * c;
        }
    }
    reduced_solve(&d, &f, db.spaces[zi].node)
}

pub fn online_basis(db: &OfflineDb, assignment: &ParameterAssignment) -> Result<OnlineBasis> {
    let domain = db.disc.problem.parameter_domain;
    let n = db.spaces.len();
    if let ParameterAssignment::PerNode(v) = assignment {
        if v.len() != n {
            return Err(Error::InvalidArgument(format!("{} node parameters for {n} nodes", v.len())));
        }
    }
    let mut basis = OnlineBasis {
        parameters: Vec::with_capacity(n),
        coefficients: Vec::with_capacity(n),
        clamped: 0,
        local_seconds: Vec::with_capacity(n),
    };
    for zi in 0..n {
        let raw = assignment.value(zi);
        let mu = domain.clamp(raw);
        if mu != raw {
            basis.clamped += 1;
        }
        let start = Instant::now();
        let c = online_local_solve(db, zi, mu)?;
        basis.local_seconds.push(start.elapsed().as_secs_f64());
        basis.parameters.push(mu);
        basis.coefficients.push(c);
    }
    if basis.clamped > 0 && matches!(assignment, ParameterAssignment::Uniform(_)) {
        log::warn!("parameter {} clamped to {:?}", assignment.value(0), domain);
    }
    Ok(basis)
}

/// `a_q(Phi^RB_m, Phi^RB_n)` for every stored pair, one value per term.
fn pair_terms(db: &OfflineDb, basis: &OnlineBasis) -> Vec<(usize, usize, Vec<f64>)> {
    db.global
        .blocks
        .iter()
        .map(|b| {
            let cn = &basis.coefficients[b.n];
            let cm = &basis.coefficients[b.m];
            let twin = db.global.get(b.m, b.n).expect("pair blocks are mirrored");
            let values = (0..db.q_count())
                .map(|q| {
                    let mut v = b.coarse[q];
                    v += b.coupling[q].iter().zip(cm).map(|(r, c)| r * c).sum::<f64>();
                    v += twin.coupling[q].iter().zip(cn).map(|(r, c)| r * c).sum::<f64>();
                    let f = &b.fine[q];
                    for (i, ci) in cn.iter().enumerate() {
                        v += ci * cm.iter().enumerate().map(|(j, cj)| f[(i, j)] * cj).sum::<f64>();
                    }
                    v
                })
                .collect();
            (b.n, b.m, values)
        })
        .collect()
}

/// Global matrix `S_nm = b(Phi^RB_m, Phi^RB_n)` by summation, with the
/// coefficient weights taken at the trial node's parameter.
pub fn assemble_global(db: &OfflineDb, basis: &OnlineBasis) -> CsrMatrix {
    let coeff = &db.disc.problem.coefficient;
    let thetas: Vec<Vec<f64>> = basis.parameters.iter().map(|&mu| coeff.thetas(mu)).collect();
    let triplets = pair_terms(db, basis)
        .into_iter()
        .map(|(n, m, v)| (n, m, v.iter().zip(&thetas[m]).map(|(a, t)| a * t).sum()))
        .collect();
    let n = db.spaces.len();
    CsrMatrix::from_triplets(n, n, triplets)
}

/// Fine nodal values of `Phi^RB_z`.
pub fn basis_function_fine(db: &OfflineDb, basis: &OnlineBasis, zi: usize) -> Vec<f64> {
    let mut v = db.disc.coarse_hat(zi);
    let s = &db.spaces[zi];
    for (snap, &c) in s.snapshots.iter().zip(&basis.coefficients[zi]) {
        for (&i, &x) in s.support.iter().zip(snap) {
            v[i] += c * x;
        }
    }
    v
}

/// `(f, Phi^RB_n)` for a fine load vector `load`.
pub fn assemble_global_load(db: &OfflineDb, basis: &OnlineBasis, load: &[f64]) -> Vec<f64> {
    (0..db.spaces.len())
        .map(|zi| {
            let hat = db.disc.coarse_hat(zi);
            let mut v: f64 = hat.iter().zip(load).map(|(a, b)| a * b).sum();
            let s = &db.spaces[zi];
            for (snap, &c) in s.snapshots.iter().zip(&basis.coefficients[zi]) {
                v += c * s.support.iter().zip(snap).map(|(&i, x)| load[i] * x).sum::<f64>();
            }
            v
        })
        .collect()
}

/// Solution in the reduced multiscale space.
#[derive(Debug, Clone)]
pub struct OnlineSolution {
    /// Coefficients over interior coarse nodes; also those of the coarse part.
    pub coefficients: Vec<f64>,
    pub basis: OnlineBasis,
}

impl OnlineSolution {
    /// Fine nodal values of `sum_n u_n Phi^RB_n`.
    pub fn fine(&self, db: &OfflineDb) -> Vec<f64> {
        let mut out = self.coarse_part(&db.disc);
        for (zi, &u) in self.coefficients.iter().enumerate() {
            let s = &db.spaces[zi];
            for (snap, &c) in s.snapshots.iter().zip(&self.basis.coefficients[zi]) {
                for (&i, &x) in s.support.iter().zip(snap) {
                    out[i] += u * c * x;
                }
            }
        }
        out
    }

    /// Fine nodal values of `sum_n u_n Phi_n`.
    pub fn coarse_part(&self, disc: &Discretization) -> Vec<f64> {
        disc.prolongation.mul_vec(&self.coefficients)
    }
}

/// Reduced multiscale solution of a linear problem at `mu`.
pub fn online_solve(db: &OfflineDb, mu: f64) -> Result<OnlineSolution> {
    if db.disc.problem.nonlinear {
        return Err(Error::InvalidArgument("the linear online solver needs a linear problem".into()));
    }
    let basis = online_basis(db, &ParameterAssignment::Uniform(mu))?;
    let s = assemble_global(db, &basis);
    let f = assemble_global_load(db, &basis, &db.disc.load(basis.parameters[0]));
    let coefficients = SpdFactorization::new(&s)?.solve(&f);
    Ok(OnlineSolution { coefficients, basis })
}

/// How the Newton matrix is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NewtonVariant {
    /// Fine quadrature of the exact Jacobian on the reduced basis.
    Full,
    /// Coefficient weights frozen at node values, built from the
    /// precomputed pair blocks.
    Precomputed,
}

impl NewtonVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(NewtonVariant::Full),
            "precomputed" => Ok(NewtonVariant::Precomputed),
            other => Err(Error::InvalidArgument(format!("unknown Newton variant '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NewtonVariant::Full => "full",
            NewtonVariant::Precomputed => "precomputed",
        }
    }
}

/// Stopping rule and start of a Newton iteration.
#[derive(Debug, Clone)]
pub struct NewtonSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Initial value at every interior node; the upper end of the parameter
    /// domain when unset.
    pub initial: Option<f64>,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            tol: 1e-5,
            max_iter: 15,
            initial: None,
        }
    }
}

/// Final iterate and relative update norms.
#[derive(Debug, Clone)]
pub struct NewtonOutcome<T> {
    pub solution: T,
    pub trace: Vec<f64>,
    /// Node parameters clamped over all iterations.
    pub clamped: usize,
    pub local_seconds: Vec<f64>,
    /// Wall time of each assembly and solve of the Newton system.
    pub global_seconds: Vec<f64>,
}

/// Fine residual `A(p) p - f` and Jacobian of the Richards operator. The
/// coefficient on an element is evaluated at the mean of its nodal values.
pub(crate) fn richards_residual_and_jacobian(
    disc: &Discretization,
    p: &[f64],
    load: &[f64],
    with_jacobian: bool,
) -> (Vec<f64>, Option<CsrMatrix>) {
    let mesh: &Mesh = disc.hier.fine();
    let geo: &P1Geometry = &disc.geometry;
    let coeff = &disc.problem.coefficient;
    let mut residual: Vec<f64> = load.iter().map(|f| -f).collect();
    let mut triplets = Vec::with_capacity(if with_jacobian { 9 * mesh.element_count() } else { 0 });
    for (e, tri) in mesh.elements().iter().enumerate() {
        let pm = tri.iter().map(|&v| p[v]).sum::<f64>() / 3.0;
        let mut a = [[0.0; 2]; 2];
        let mut da = [[0.0; 2]; 2];
        for q in 0..coeff.q_count() {
            let aq = &disc.samples.term(q)[e];
            let t = coeff.theta(q, pm);
            let dt = coeff.theta_derivative(q, pm).unwrap_or(0.0);
            for r in 0..2 {
                for c in 0..2 {
                    a[r][c] += t * aq[r][c];
                    da[r][c] += dt * aq[r][c];
                }
            }
        }
        let k = geo.local_stiffness(e, &a);
        for i in 0..3 {
            residual[tri[i]] += (0..3).map(|j| k[i][j] * p[tri[j]]).sum::<f64>();
        }
        if with_jacobian {
            let grad = geo.gradient(mesh, e, p);
            let dg = [da[0][0] * grad[0] + da[0][1] * grad[1], da[1][0] * grad[0] + da[1][1] * grad[1]];
            let g = &geo.gradients[e];
            let area = geo.areas[e];
            for i in 0..3 {
                let nonlinear = area / 3.0 * (g[i][0] * dg[0] + g[i][1] * dg[1]);
                for j in 0..3 {
                    triplets.push((tri[i], tri[j], k[i][j] + nonlinear));
                }
            }
        }
    }
    let jac = with_jacobian.then(|| CsrMatrix::from_triplets(mesh.node_count(), mesh.node_count(), triplets));
    (residual, jac)
}

fn euclidean(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Newton's method for the Richards problem in the full fine space.
pub fn fine_newton_reference(disc: &Discretization, settings: &NewtonSettings) -> Result<NewtonOutcome<Vec<f64>>> {
    if !disc.problem.nonlinear {
        return Err(Error::InvalidArgument("the Newton solver needs a nonlinear problem".into()));
    }
    let mesh = disc.hier.fine();
    let interior = mesh.interior_nodes();
    let p0 = settings.initial.unwrap_or(disc.problem.parameter_domain.upper);
    let mut p = vec![0.0; mesh.node_count()];
    for &i in interior {
        p[i] = p0;
    }
    let load = disc.load(p0);
    let mut trace = Vec::new();
    for _ in 0..settings.max_iter {
        let (res, jac) = richards_residual_and_jacobian(disc, &p, &load, true);
        let j = jac.expect("jacobian requested").submatrix(interior, interior);
        let rhs: Vec<f64> = interior.iter().map(|&i| -res[i]).collect();
        let delta = LuFactorization::new(&j)?.solve(&rhs);
        for (&i, d) in interior.iter().zip(&delta) {
            p[i] += d;
        }
        let pi: Vec<f64> = interior.iter().map(|&i| p[i]).collect();
        let rel = euclidean(&delta) / euclidean(&pi).max(f64::MIN_POSITIVE);
        trace.push(rel);
        if rel <= settings.tol {
            return Ok(NewtonOutcome {
                solution: p,
                trace,
                clamped: 0,
                local_seconds: Vec::new(),
                global_seconds: Vec::new(),
            });
        }
    }
    Err(Error::NewtonNotConverged {
        iterations: trace.len(),
        last_update: trace.last().copied().unwrap_or(f64::NAN),
    })
}

/// Newton's method in the reduced multiscale space with node-dependent
/// parameters given by the current coarse coefficients.
pub fn newton_richards(
    db: &OfflineDb,
    settings: &NewtonSettings,
    variant: NewtonVariant,
) -> Result<NewtonOutcome<OnlineSolution>> {
    let disc = &db.disc;
    if !disc.problem.nonlinear {
        return Err(Error::InvalidArgument("the Newton solver needs a nonlinear problem".into()));
    }
    let n = db.spaces.len();
    let p0 = settings.initial.unwrap_or(disc.problem.parameter_domain.upper);
    let mut p = vec![p0; n];
    let load = disc.load(p0);
    let mut trace = Vec::new();
    let mut clamped = 0;
    let mut local_seconds = Vec::new();
    let mut global_seconds = Vec::new();
    for _ in 0..settings.max_iter {
        let basis = online_basis(db, &ParameterAssignment::PerNode(p.clone()))?;
        clamped += basis.clamped;
        local_seconds.extend_from_slice(&basis.local_seconds);
        let start = Instant::now();
        let columns: Vec<Vec<f64>> = (0..n).map(|zi| basis_function_fine(db, &basis, zi)).collect();
        let mut fine_p = vec![0.0; disc.hier.fine().node_count()];
        for (col, &c) in columns.iter().zip(&p) {
            for (x, y) in fine_p.iter_mut().zip(col) {
                *x += c * y;
            }
        }
        let (res, jac) = richards_residual_and_jacobian(disc, &fine_p, &load, variant == NewtonVariant::Full);
        let rhs: Vec<f64> = columns.iter().map(|c| -c.iter().zip(&res).map(|(a, b)| a * b).sum::<f64>()).collect();
        let matrix = match variant {
            NewtonVariant::Full => reduced_operator(&jac.expect("jacobian requested"), &columns),
            NewtonVariant::Precomputed => precomputed_jacobian(db, &basis, &p),
        };
        let delta = LuFactorization::new(&matrix)?.solve(&rhs);
        global_seconds.push(start.elapsed().as_secs_f64());
        for (x, d) in p.iter_mut().zip(&delta) {
            *x += d;
        }
        let rel = euclidean(&delta) / euclidean(&p).max(f64::MIN_POSITIVE);
        trace.push(rel);
        log::debug!("newton ({}) step {}: relative update {rel:e}", variant.name(), trace.len());
        if rel <= settings.tol {
            let basis = online_basis(db, &ParameterAssignment::PerNode(p.clone()))?;
            clamped += basis.clamped;
            return Ok(NewtonOutcome {
                solution: OnlineSolution { coefficients: p, basis },
                trace,
                clamped,
                local_seconds,
                global_seconds,
            });
        }
    }
    Err(Error::NewtonNotConverged {
        iterations: trace.len(),
        last_update: trace.last().copied().unwrap_or(f64::NAN),
    })
}

/// `B^T J B` for fine columns `B`.
fn reduced_operator(jac: &CsrMatrix, columns: &[Vec<f64>]) -> CsrMatrix {
    let support: Vec<Vec<usize>> = columns
        .iter()
        .map(|c| (0..c.len()).filter(|&i| c[i] != 0.0).collect())
        .collect();
    let mut triplets = Vec::new();
    for (m, col) in columns.iter().enumerate() {
        let jc = jac.mul_vec(col);
        for (nn, row) in columns.iter().enumerate() {
            let v: f64 = support[nn].iter().map(|&i| row[i] * jc[i]).sum();
            if v != 0.0 || nn == m {
                triplets.push((nn, m, v));
            }
        }
    }
    CsrMatrix::from_triplets(columns.len(), columns.len(), triplets)
}

/// Newton matrix from the pair blocks: weights frozen at the trial node
/// plus a lumped derivative term on the diagonal.
fn precomputed_jacobian(db: &OfflineDb, basis: &OnlineBasis, p: &[f64]) -> CsrMatrix {
    let coeff = &db.disc.problem.coefficient;
    let q_count = db.q_count();
    let terms = pair_terms(db, basis);
    let n = db.spaces.len();
    let mut diag = vec![0.0; n];
    let mut triplets = Vec::with_capacity(terms.len() + n);
    for (row, col, v) in &terms {
        let value: f64 = (0..q_count).map(|q| coeff.theta(q, p[*col]) * v[q]).sum();
        triplets.push((*row, *col, value));
        diag[*row] += (0..q_count)
            .map(|q| coeff.theta_derivative(q, p[*row]).unwrap_or(0.0) * v[q] * p[*col])
            .sum::<f64>();
    }
    triplets.extend(diag.into_iter().enumerate().map(|(i, d)| (i, i, d)));
    CsrMatrix::from_triplets(n, n, triplets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{model_problem_1, model_problem_2};
    use crate::fem::{fem_reference_solve, h1_seminorm};
    use crate::lod::{assemble_ms_basis, galerkin_system};
    use crate::rboffline::{build_offline, generate_training_set, OfflineConfig};

    fn db(problem: crate::coeffs::ProblemDefinition, n: usize, levels: usize, k: usize, tol: f64) -> OfflineDb {
        let disc = Discretization::new(problem, n, levels).unwrap();
        let training = generate_training_set(&disc.problem.parameter_domain, 10, 3).unwrap();
        build_offline(disc, n, levels, &OfflineConfig::new(k, tol, training)).unwrap()
    }

    #[test]
    fn summation_matches_fine_assembly() {
        let db = db(model_problem_1(), 4, 2, 1, 0.05);
        for mu in [0.7, 2.012, 4.4] {
            let basis = online_basis(&db, &ParameterAssignment::Uniform(mu)).unwrap();
            let s = assemble_global(&db, &basis).to_dense();
            let columns: Vec<Vec<f64>> = (0..db.spaces.len()).map(|z| basis_function_fine(&db, &basis, z)).collect();
            let a = db.disc.stiffness_at(&db.disc.problem.coefficient.thetas(mu));
            let (oracle, _) = galerkin_system(&columns, &a, &vec![0.0; a.nrows()]);
            let diff = (&s - &oracle).norm_l2();
            assert!(diff <= 1e-10 * oracle.norm_l2(), "{diff:e}");
        }
    }

    #[test]
    fn snapshot_parameters_satisfy_the_galerkin_condition() {
        let db = db(model_problem_1(), 4, 2, 1, 0.05);
        let zi = 4;
        let mu = db.spaces[zi].selected_parameters[0];
        let basis = online_basis(&db, &ParameterAssignment::Uniform(mu)).unwrap();
        let phi = basis_function_fine(&db, &basis, zi);
        let a = db.disc.stiffness_at(&db.disc.problem.coefficient.thetas(mu));
        let n_fine = phi.len();
        for snap in &db.spaces[zi].snapshots {
            let w = crate::lod::scatter(snap, &db.spaces[zi].support, n_fine);
            assert!(a.bilinear(&phi, &w).abs() < 1e-9);
        }
    }

    #[test]
    fn saturated_patches_reproduce_snapshots() {
        let db = db(model_problem_1(), 2, 2, 4, 0.05);
        let mu = db.spaces[0].selected_parameters[0];
        let basis = online_basis(&db, &ParameterAssignment::Uniform(mu)).unwrap();
        let rb = basis_function_fine(&db, &basis, 0);
        let ms = assemble_ms_basis(&db.disc, mu, 0, 4).unwrap().values();
        let diff: Vec<f64> = rb.iter().zip(&ms).map(|(a, b)| a - b).collect();
        assert!(h1_seminorm(db.disc.hier.fine(), &diff) < 1e-8);
    }

    #[test]
    fn zero_source_gives_zero() {
        let mut p = model_problem_1();
        p.source = std::sync::Arc::new(|_, _| 0.0);
        let db = db(p, 4, 1, 1, 0.1);
        let u = online_solve(&db, 1.0).unwrap();
        assert!(u.coefficients.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn online_error_is_moderate() {
        let db = db(model_problem_1(), 4, 2, 2, 0.05);
        let u = online_solve(&db, 2.012).unwrap();
        let reference = fem_reference_solve(&db.disc.problem, 2.012, &db.disc.hier).unwrap();
        let e = crate::fem::relative_error(db.disc.hier.fine(), &u.fine(&db), &reference, crate::fem::NormKind::H1)
            .unwrap();
        assert!(e < 0.5, "{e}");
    }

    #[test]
    fn clamping_is_counted() {
        let db = db(model_problem_1(), 4, 1, 1, 0.1);
        let basis = online_basis(&db, &ParameterAssignment::Uniform(7.0)).unwrap();
        assert_eq!(basis.clamped, db.spaces.len());
        assert!(basis.parameters.iter().all(|&p| p == 5.0));
    }

    #[test]
    fn fine_newton_solution_is_symmetric_and_a_fixed_point() {
        let disc = Discretization::new(model_problem_2(), 8, 1).unwrap();
        let out = fine_newton_reference(&disc, &NewtonSettings::default()).unwrap();
        assert!(out.trace.len() <= 15);
        let load = disc.load(0.0);
        let (res, _) = richards_residual_and_jacobian(&disc, &out.solution, &load, false);
        let interior = disc.hier.fine().interior_nodes();
        let rmax = interior.iter().map(|&i| res[i].abs()).fold(0.0, f64::max);
        assert!(rmax < 1e-6, "{rmax:e}");
    }

    #[test]
    fn newton_variants_agree() {
        let db = db(model_problem_2(), 4, 2, 1, 0.05);
        let full = newton_richards(&db, &NewtonSettings::default(), NewtonVariant::Full).unwrap();
        let pre = newton_richards(&db, &NewtonSettings::default(), NewtonVariant::Precomputed).unwrap();
        let a = full.solution.fine(&db);
        let b = pre.solution.fine(&db);
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(diff <= 1e-3 * euclidean(&a), "{diff:e}");
    }
}
