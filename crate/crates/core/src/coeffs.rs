//! Affine parametric coefficients and the two model problems.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{Mesh, MeshHierarchy, Point};

/// A 2×2 matrix, row-major.
pub type Tensor2 = [[f64; 2]; 2];

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type FieldFn = Arc<dyn Fn(Point) -> Tensor2 + Send + Sync>;
pub type SourceFn = Arc<dyn Fn(Point, f64) -> f64 + Send + Sync>;

pub fn scaled_identity(c: f64) -> Tensor2 {
    [[c, 0.0], [0.0, c]]
}

pub fn is_symmetric(t: &Tensor2) -> bool {
    t[0][1] == t[1][0]
}

/// Eigenvalues of a symmetric 2×2 matrix, ascending.
pub fn symmetric_eigenvalues(t: &Tensor2) -> [f64; 2] {
    let mean = 0.5 * (t[0][0] + t[1][1]);
    let half_gap = 0.5 * (t[0][0] - t[1][1]);
    let radius = half_gap.hypot(t[0][1]);
    [mean - radius, mean + radius]
}

/// A closed scalar parameter interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterDomain {
    pub lower: f64,
    pub upper: f64,
}

impl ParameterDomain {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(Error::InvalidArgument(format!(
                "parameter domain [{lower}, {upper}] is not a proper interval"
            )));
        }
        Ok(ParameterDomain { lower, upper })
    }

    pub fn contains(&self, mu: f64) -> bool {
        (self.lower..=self.upper).contains(&mu)
    }

    pub fn clamp(&self, mu: f64) -> f64 {
        mu.clamp(self.lower, self.upper)
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

/// `a(x; mu) = sum_q theta_q(mu) a_q(x)` with symmetric matrix fields `a_q`.
#[derive(Clone)]
pub struct AffineCoefficient {
    theta: Vec<ScalarFn>,
    theta_derivative: Option<Vec<ScalarFn>>,
    fields: Vec<FieldFn>,
}

impl fmt::Debug for AffineCoefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AffineCoefficient")
            .field("q_count", &self.q_count())
            .field("has_derivatives", &self.theta_derivative.is_some())
            .finish()
    }
}

impl AffineCoefficient {
    pub fn new(theta: Vec<ScalarFn>, fields: Vec<FieldFn>) -> Result<Self> {
        if theta.is_empty() || theta.len() != fields.len() {
            return Err(Error::InvalidArgument(
                "affine coefficient needs matching, nonempty theta and field lists".into(),
            ));
        }
        Ok(AffineCoefficient {
            theta,
            theta_derivative: None,
            fields,
        })
    }

    pub fn with_derivatives(mut self, derivatives: Vec<ScalarFn>) -> Result<Self> {
        if derivatives.len() != self.theta.len() {
            return Err(Error::InvalidArgument("one derivative per affine term required".into()));
        }
        self.theta_derivative = Some(derivatives);
        Ok(self)
    }

    /// A single term with `theta ≡ 1` and the given field.
    pub fn single(field: FieldFn) -> Self {
        AffineCoefficient {
            theta: vec![Arc::new(|_| 1.0)],
            theta_derivative: Some(vec![Arc::new(|_| 0.0)]),
            fields: vec![field],
        }
    }

    pub fn q_count(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self, q: usize, mu: f64) -> f64 {
        (self.theta[q])(mu)
    }

    pub fn thetas(&self, mu: f64) -> Vec<f64> {
        self.theta.iter().map(|t| t(mu)).collect()
    }

    pub fn has_derivatives(&self) -> bool {
        self.theta_derivative.is_some()
    }

    pub fn theta_derivative(&self, q: usize, mu: f64) -> Option<f64> {
        self.theta_derivative.as_ref().map(|d| (d[q])(mu))
    }

    pub fn field_at(&self, q: usize, x: Point) -> Tensor2 {
        (self.fields[q])(x)
    }

    pub fn evaluate(&self, x: Point, mu: f64) -> Tensor2 {
        let mut out = [[0.0; 2]; 2];
        for q in 0..self.q_count() {
            let t = self.theta(q, mu);
            let a = self.field_at(q, x);
            for r in 0..2 {
                for c in 0..2 {
                    out[r][c] += t * a[r][c];
                }
            }
        }
        out
    }

    /// Samples every field at the element barycenters of `mesh`.
    pub fn sample(&self, mesh: &Mesh) -> Result<FieldSamples> {
        let mut per_term = Vec::with_capacity(self.q_count());
        for q in 0..self.q_count() {
            let mut values = Vec::with_capacity(mesh.element_count());
            for e in 0..mesh.element_count() {
                let x = mesh.barycenter(e);
                let a = self.field_at(q, x);
                if !is_symmetric(&a) || a.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "field {q} is not a finite symmetric matrix at ({}, {})",
                        x[0], x[1]
                    )));
                }
                values.push(a);
            }
            per_term.push(values);
        }
        Ok(FieldSamples { per_term })
    }
}

/// Affine fields sampled once per element.
#[derive(Debug, Clone)]
pub struct FieldSamples {
    per_term: Vec<Vec<Tensor2>>,
}

impl FieldSamples {
    pub fn q_count(&self) -> usize {
        self.per_term.len()
    }

    pub fn term(&self, q: usize) -> &[Tensor2] {
        &self.per_term[q]
    }

    /// `sum_q weights[q] a_q` on every element.
    pub fn combine(&self, weights: &[f64]) -> Vec<Tensor2> {
        let n = self.per_term[0].len();
        let mut out = vec![[[0.0; 2]; 2]; n];
        for (w, term) in weights.iter().zip(&self.per_term) {
            for (o, a) in out.iter_mut().zip(term) {
                for r in 0..2 {
                    for c in 0..2 {
                        o[r][c] += w * a[r][c];
                    }
                }
            }
        }
        out
    }

    /// Element-wise combination with element-dependent weights
    /// `weights[e][q]`.
    pub fn combine_per_element(&self, weights: &[Vec<f64>]) -> Vec<Tensor2> {
        let n = self.per_term[0].len();
        (0..n)
            .map(|e| {
                let mut o = [[0.0; 2]; 2];
                for (q, term) in self.per_term.iter().enumerate() {
                    let w = weights[e][q];
                    for r in 0..2 {
                        for c in 0..2 {
                            o[r][c] += w * term[e][r][c];
                        }
                    }
                }
                o
            })
            .collect()
    }
}

/// Smallest and largest eigenvalue of the reconstructed coefficient over
/// element barycenters and a parameter sample.
pub fn spectral_bounds(coeff: &AffineCoefficient, params: &[f64], mesh: &Mesh) -> Result<(f64, f64)> {
    if params.is_empty() {
        return Err(Error::InvalidArgument("empty parameter sample".into()));
    }
    let samples = coeff.sample(mesh)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut worst = (0usize, 0.0);
    for &mu in params {
        for (e, a) in samples.combine(&coeff.thetas(mu)).iter().enumerate() {
            let [l, u] = symmetric_eigenvalues(a);
            if l < lo {
                lo = l;
                worst = (e, mu);
            }
            hi = hi.max(u);
        }
    }
    if !(lo > 0.0) {
        let x = mesh.barycenter(worst.0);
        return Err(Error::NotCoercive {
            eigenvalue: lo,
            x: x[0],
            y: x[1],
            mu: worst.1,
        });
    }
    Ok((lo, hi))
}

/// Minimum over barycenters and parameters of the smallest eigenvalue.
pub fn coercivity_lower_bound(coeff: &AffineCoefficient, params: &[f64], mesh: &Mesh) -> Result<f64> {
    spectral_bounds(coeff, params, mesh).map(|(lo, _)| lo)
}

/// Brooks–Corey soil description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoilParameters {
    pub theta_min: f64,
    pub theta_max: f64,
    pub lambda: f64,
    pub bubbling_pressure: f64,
}

impl SoilParameters {
    pub fn new(theta_min: f64, theta_max: f64, lambda: f64, bubbling_pressure: f64) -> Result<Self> {
        if !(0.0 <= theta_min && theta_min < theta_max && theta_max <= 1.0) {
            return Err(Error::InvalidArgument("saturations must satisfy 0 <= min < max <= 1".into()));
        }
        if !(lambda > 0.0) || !(bubbling_pressure < 0.0) {
            return Err(Error::InvalidArgument(
                "pore size factor must be positive and bubbling pressure negative".into(),
            ));
        }
        Ok(SoilParameters {
            theta_min,
            theta_max,
            lambda,
            bubbling_pressure,
        })
    }

    /// Exponent of the composed relative permeability, `3 lambda + 2`.
    fn exponent(&self) -> f64 {
        3.0 * self.lambda + 2.0
    }
}

/// Soils of the four subdomains: sandy soil, sand, sandy loam, loamy sand.
pub const DEFAULT_SOILS: [SoilParameters; 4] = [
    SoilParameters { theta_min: 0.21, theta_max: 0.95, lambda: 1.0, bubbling_pressure: -0.1 },
    SoilParameters { theta_min: 0.0458, theta_max: 1.0, lambda: 0.694, bubbling_pressure: -0.0726 },
    SoilParameters { theta_min: 0.091, theta_max: 1.0, lambda: 0.378, bubbling_pressure: -0.147 },
    SoilParameters { theta_min: 0.08, theta_max: 1.0, lambda: 0.553, bubbling_pressure: -0.087 },
];

/// Pressure–saturation curve.
pub fn brooks_corey_theta(soil: &SoilParameters, p: f64) -> f64 {
    if p <= soil.bubbling_pressure {
        soil.theta_min + (soil.theta_max - soil.theta_min) * (p / soil.bubbling_pressure).powf(-soil.lambda)
    } else {
        soil.theta_max
    }
}

/// Relative permeability as a function of saturation.
pub fn brooks_corey_kr(soil: &SoilParameters, theta: f64) -> Result<f64> {
    if !(soil.theta_min..=soil.theta_max).contains(&theta) {
        return Err(Error::InvalidArgument(format!(
            "saturation {theta} outside [{}, {}]",
            soil.theta_min, soil.theta_max
        )));
    }
    let base = (theta - soil.theta_min) / (soil.theta_max - soil.theta_min);
    Ok(base.powf(3.0 + 2.0 / soil.lambda))
}

/// Relative permeability as a function of pressure, in closed form.
pub fn theta_q_richards(soil: &SoilParameters, p: f64) -> f64 {
    if p <= soil.bubbling_pressure {
        (p / soil.bubbling_pressure).powf(-soil.exponent())
    } else {
        1.0
    }
}

/// Pressure derivative of [`theta_q_richards`]; the saturated side (zero) is
/// used at the bubbling pressure.
pub fn theta_q_richards_derivative(soil: &SoilParameters, p: f64) -> f64 {
    if p < soil.bubbling_pressure {
        let m = soil.exponent();
        -m / soil.bubbling_pressure * (p / soil.bubbling_pressure).powf(-m - 1.0)
    } else {
        0.0
    }
}

/// A parametrized linear or quasilinear elliptic problem on the unit square
/// with homogeneous Dirichlet conditions.
#[derive(Clone)]
pub struct ProblemDefinition {
    pub id: String,
    pub coefficient: AffineCoefficient,
    pub source: SourceFn,
    pub parameter_domain: ParameterDomain,
    /// When set, the parameter is the unknown pressure itself.
    pub nonlinear: bool,
    pub epsilon: f64,
    pub soils: Option<[SoilParameters; 4]>,
}

impl fmt::Debug for ProblemDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemDefinition")
            .field("id", &self.id)
            .field("coefficient", &self.coefficient)
            .field("parameter_domain", &self.parameter_domain)
            .field("nonlinear", &self.nonlinear)
            .field("epsilon", &self.epsilon)
            .finish()
    }
}

impl ProblemDefinition {
    /// Coarse mesh with `n_coarse` cells per direction refined `levels` times.
    pub fn hierarchy(&self, n_coarse: usize, levels: usize) -> Result<MeshHierarchy> {
        MeshHierarchy::unit_square(n_coarse, levels)
    }
}

/// Overrides for the built-in model problems.
#[derive(Debug, Clone, Default)]
pub struct ModelOptions {
    pub epsilon: Option<f64>,
    pub domain: Option<ParameterDomain>,
    pub soils: Option<[SoilParameters; 4]>,
}

fn oscillation_a1(eps: f64) -> FieldFn {
    Arc::new(move |x: Point| {
        let c = (2.0 * PI * x[0] / eps).cos();
        [[5.0 / (PI * PI) / (4.0 + 2.0 * c), 0.0], [0.0, (5.0 + 2.5 * c) / (4.0 * PI)]]
    })
}

fn oscillation_a2(eps: f64) -> FieldFn {
    Arc::new(move |x: Point| {
        let s = (2.0 * PI * (2.0 * x[0]).sqrt() / eps).sin() * (4.5 * PI * x[1] * x[1] / eps).sin();
        scaled_identity((10.0 + 9.0 * s) / 100.0)
    })
}

fn oscillation_a3(eps: f64) -> FieldFn {
    Arc::new(move |x: Point| {
        let cells = (x[0] / eps).floor() + (x[1] / eps).floor();
        let g = ((x[0] + x[1]).floor() + cells).sin() + ((x[1] - x[0]).floor() + cells).cos();
        scaled_identity(3.0 / 25.0 + g / 20.0)
    })
}

fn oscillation_a4(eps: f64) -> FieldFn {
    Arc::new(move |x: Point| {
        let mut c = 1.0;
        for j in 0..=4 {
            for i in 0..=j {
                let fi = i as f64;
                let arg = (fi * x[1] - x[0] / (1.0 + fi)).floor()
                    + (fi * x[0] / eps).floor()
                    + (x[1] / eps).floor();
                c += 0.1 * 2.0 / (j as f64 + 1.0) * arg.cos();
            }
        }
        let h = if 0.5 < c && c < 1.0 {
            c.powi(4)
        } else if 1.0 < c && c < 1.5 {
            c.powf(1.5)
        } else {
            c
        };
        scaled_identity(h)
    })
}

fn oscillating_fields(eps: f64) -> [FieldFn; 4] {
    [oscillation_a1(eps), oscillation_a2(eps), oscillation_a3(eps), oscillation_a4(eps)]
}

fn unit_source() -> SourceFn {
    Arc::new(|_, _| 1.0)
}

/// The linear model problem with four oscillating affine terms on `D = [0, 5]`.
pub fn model_problem_1() -> ProblemDefinition {
    model_problem_1_with(&ModelOptions::default())
}

pub fn model_problem_1_with(options: &ModelOptions) -> ProblemDefinition {
    let eps = options.epsilon.unwrap_or(0.1);
    let theta: Vec<ScalarFn> = vec![
        Arc::new(|mu: f64| 2.0 + (4.0 * mu).sin()),
        Arc::new(|mu: f64| 2.0 + mu * mu - mu.abs().sqrt().cos()),
        Arc::new(|mu: f64| 2.0 + mu.abs().sqrt().cos()),
        Arc::new(|mu: f64| 1.0 + mu.abs().sqrt() + 0.1 * mu.abs().powf(1.5)),
    ];
    let derivatives: Vec<ScalarFn> = vec![
        Arc::new(|mu: f64| 4.0 * (4.0 * mu).cos()),
        Arc::new(|mu: f64| {
            let r = mu.abs().sqrt();
            if r == 0.0 {
                0.0
            } else {
                2.0 * mu + r.sin() * mu.signum() / (2.0 * r)
            }
        }),
        Arc::new(|mu: f64| {
            let r = mu.abs().sqrt();
            if r == 0.0 {
                0.0
            } else {
                -r.sin() * mu.signum() / (2.0 * r)
            }
        }),
        Arc::new(|mu: f64| {
            let r = mu.abs().sqrt();
            if r == 0.0 {
                0.0
            } else {
                mu.signum() * (0.5 / r + 0.15 * r)
            }
        }),
    ];
    let coefficient = AffineCoefficient::new(theta, oscillating_fields(eps).to_vec())
        .and_then(|c| c.with_derivatives(derivatives))
        .expect("model problem 1 is well formed");
    ProblemDefinition {
        id: "mp1".into(),
        coefficient,
        source: unit_source(),
        parameter_domain: options.domain.unwrap_or(ParameterDomain { lower: 0.0, upper: 5.0 }),
        nonlinear: false,
        epsilon: eps,
        soils: None,
    }
}

/// Rectangles `[x0, x1] × [y0, y1]` occupied by the four soils.
pub fn subdomains(eps: f64) -> [[f64; 4]; 4] {
    let lo = 0.5 - eps;
    let hi = 0.5 + eps;
    [[0.0, hi, 0.0, hi], [lo, 1.0, 0.0, hi], [0.0, hi, lo, 1.0], [lo, 1.0, lo, 1.0]]
}

fn indicator(rect: [f64; 4], x: Point) -> bool {
    rect[0] <= x[0] && x[0] <= rect[1] && rect[2] <= x[1] && x[1] <= rect[3]
}

/// The stationary Richards problem with four overlapping soils on
/// `D = [-2, -0.0726]`.
pub fn model_problem_2() -> ProblemDefinition {
    model_problem_2_with(&ModelOptions::default())
}

pub fn model_problem_2_with(options: &ModelOptions) -> ProblemDefinition {
    let eps = options.epsilon.unwrap_or(0.1);
    let soils = options.soils.unwrap_or(DEFAULT_SOILS);
    let rects = subdomains(eps);
    let fields: Vec<FieldFn> = oscillating_fields(eps)
        .into_iter()
        .zip(rects)
        .map(|(field, rect)| -> FieldFn {
            Arc::new(move |x: Point| if indicator(rect, x) { field(x) } else { [[0.0; 2]; 2] })
        })
        .collect();
    let theta: Vec<ScalarFn> = soils
        .iter()
        .map(|&s| -> ScalarFn { Arc::new(move |p| theta_q_richards(&s, p)) })
        .collect();
    let derivatives: Vec<ScalarFn> = soils
        .iter()
        .map(|&s| -> ScalarFn { Arc::new(move |p| theta_q_richards_derivative(&s, p)) })
        .collect();
    let coefficient = AffineCoefficient::new(theta, fields)
        .and_then(|c| c.with_derivatives(derivatives))
        .expect("model problem 2 is well formed");
    ProblemDefinition {
        id: "mp2".into(),
        coefficient,
        source: unit_source(),
        parameter_domain: options.domain.unwrap_or(ParameterDomain { lower: -2.0, upper: -0.0726 }),
        nonlinear: true,
        epsilon: eps,
        soils: Some(soils),
    }
}

/// Looks up a built-in problem by name.
pub fn problem_by_name(name: &str, options: &ModelOptions) -> Result<ProblemDefinition> {
    match name {
        "mp1" => Ok(model_problem_1_with(options)),
        "mp2" => Ok(model_problem_2_with(options)),
        other => Err(Error::InvalidArgument(format!("unknown problem '{other}'"))),
    }
}
