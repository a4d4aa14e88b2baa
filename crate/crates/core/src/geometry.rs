//! Numerical substrate: vector fields on coordinate domains, fixed-step RK4
//! flows with step-doubling error estimates, finite differences, and Lie
//! brackets.
//!
//! Escape from a domain (or past the blow-up bound) is a verdict, not a bug:
//! [`Error::EscapeDetected`] carries the last in-domain time so completeness
//! probes can report escape times.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Central-difference step, scaled by `max(1, |coords|_inf)` at the point.
pub const DEFAULT_FD_STEP: f64 = 1e-5;
/// Trajectory norm beyond which a flow counts as escaped.
pub const DEFAULT_BLOWUP_BOUND: f64 = 1e8;
/// Default integrator resolution: steps per unit time.
pub const DEFAULT_STEPS_PER_UNIT: usize = 1000;

/// A time-independent vector field on a coordinate domain.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, p: &DVector<f64>) -> DVector<f64>;
    /// Exact Jacobian when the family provides one; `None` falls back to
    /// central differences.
    fn jacobian(&self, _p: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// A time-dependent vector field.
pub trait TimeDependentField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, p: &DVector<f64>) -> DVector<f64>;
}

/// View an autonomous field as a time-dependent one.
pub struct Autonomous<'a>(pub &'a dyn VectorField);

impl TimeDependentField for Autonomous<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, _t: f64, p: &DVector<f64>) -> DVector<f64> {
        self.0.eval(p)
    }
}

/// Affine field `s -> A s + b`, the workhorse family with exact Jacobian.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineField {
    pub linear: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineField {
    pub fn new(linear: DMatrix<f64>, offset: DVector<f64>) -> Self {
        assert_eq!(linear.nrows(), linear.ncols());
        assert_eq!(linear.nrows(), offset.len());
        AffineField { linear, offset }
    }

    pub fn zero(dim: usize) -> Self {
        AffineField {
            linear: DMatrix::zeros(dim, dim),
            offset: DVector::zeros(dim),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.linear.iter().all(|x| *x == 0.0) && self.offset.iter().all(|x| *x == 0.0)
    }

    /// Augmented matrix `[[A, b], [0, 0]]` acting on `(s, 1)`.
    pub fn augmented(&self) -> DMatrix<f64> {
        let k = self.offset.len();
        let mut m = DMatrix::zeros(k + 1, k + 1);
        m.view_mut((0, 0), (k, k)).copy_from(&self.linear);
        m.view_mut((0, k), (k, 1)).copy_from(&self.offset);
        m
    }
}

impl VectorField for AffineField {
    fn dim(&self) -> usize {
        self.offset.len()
    }
    fn eval(&self, p: &DVector<f64>) -> DVector<f64> {
        &self.linear * p + &self.offset
    }
    fn jacobian(&self, _p: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.linear.clone())
    }
}

/// Exact bracket of affine fields:
/// `[A1 s + b1, A2 s + b2] = (A2 A1 - A1 A2) s + (A2 b1 - A1 b2)`.
pub fn affine_bracket(x: &AffineField, y: &AffineField) -> AffineField {
    AffineField::new(
        &y.linear * &x.linear - &x.linear * &y.linear,
        &y.linear * &x.offset - &x.linear * &y.offset,
    )
}

/// Field defined by a closure; Jacobians come from finite differences.
pub struct FnField<F: Fn(&DVector<f64>) -> DVector<f64> + Sync> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&DVector<f64>) -> DVector<f64> + Sync> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, p: &DVector<f64>) -> DVector<f64> {
        (self.f)(p)
    }
}

/// Time-dependent field from a closure.
pub struct FnTimeField<F: Fn(f64, &DVector<f64>) -> DVector<f64> + Sync> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(f64, &DVector<f64>) -> DVector<f64> + Sync> TimeDependentField for FnTimeField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, p: &DVector<f64>) -> DVector<f64> {
        (self.f)(t, p)
    }
}

/// Central-difference Jacobian with the crate's scaled step.
pub fn fd_jacobian(field: &dyn VectorField, p: &DVector<f64>) -> DMatrix<f64> {
    fd_jacobian_scaled(field, p, 1.0)
}

pub fn fd_jacobian_scaled(field: &dyn VectorField, p: &DVector<f64>, scale: f64) -> DMatrix<f64> {
    let n = p.len();
    let h = DEFAULT_FD_STEP * scale * p.amax().max(1.0);
    let mut jac = DMatrix::zeros(field.dim(), n);
    for j in 0..n {
        let mut hi = p.clone();
        let mut lo = p.clone();
        hi[j] += h;
        lo[j] -= h;
        let col = (field.eval(&hi) - field.eval(&lo)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

/// `[X, Y](at) = DY(at).X(at) - DX(at).Y(at)`, exact Jacobians when available.
pub fn lie_bracket(x: &dyn VectorField, y: &dyn VectorField, at: &DVector<f64>) -> Result<DVector<f64>> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: y.dim(),
        });
    }
    if at.len() != x.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: at.len(),
        });
    }
    let jx = x.jacobian(at).unwrap_or_else(|| fd_jacobian(x, at));
    let jy = y.jacobian(at).unwrap_or_else(|| fd_jacobian(y, at));
    Ok(jy * x.eval(at) - jx * y.eval(at))
}

/// Geometric model of the state space: where points live and how a raw RK4
/// step is retracted back onto the model.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Euclidean,
    /// Coordinates wrap into `[0, 2*pi)` after each step.
    Torus,
    /// Unit sphere embedded in R^3; states renormalize after each step.
    Sphere,
    /// Product of a Euclidean block of `base_dim` coordinates with a fiber
    /// model on the remaining ones (horizontal-lift flows live here).
    Product { base_dim: usize, fiber: Box<Model> },
}

/// Open subset cutting the model down (sub-bundle restrictions).
#[derive(Clone, Debug, PartialEq)]
pub enum Restriction {
    Box { lo: DVector<f64>, hi: DVector<f64> },
    Ball { center: DVector<f64>, radius: f64 },
}

impl Restriction {
    pub fn contains(&self, p: &DVector<f64>) -> bool {
        match self {
            Restriction::Box { lo, hi } => {
                p.iter().zip(lo.iter().zip(hi.iter())).all(|(x, (l, h))| x > l && x < h)
            }
            Restriction::Ball { center, radius } => (p - center).norm() < *radius,
        }
    }
}

/// Flow domain: a model, an optional open restriction and a blow-up bound.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDomain {
    pub model: Model,
    pub restriction: Option<Restriction>,
    pub blowup_bound: f64,
}

impl FlowDomain {
    pub fn unbounded() -> Self {
        FlowDomain {
            model: Model::Euclidean,
            restriction: None,
            blowup_bound: DEFAULT_BLOWUP_BOUND,
        }
    }

    pub fn with_restriction(mut self, r: Restriction) -> Self {
        self.restriction = Some(r);
        self
    }

    /// Retract a raw integration step back onto the model.
    pub fn post_step(&self, p: &mut DVector<f64>) {
        retract(&self.model, p);
    }

    pub fn contains(&self, p: &DVector<f64>) -> bool {
        if !p.iter().all(|x| x.is_finite()) {
            return false;
        }
        if p.norm() > self.blowup_bound {
            return false;
        }
        match &self.restriction {
            Some(r) => r.contains(p),
            None => true,
        }
    }
}

fn retract(model: &Model, p: &mut DVector<f64>) {
    match model {
        Model::Euclidean => {}
        Model::Torus => {
            let tau = std::f64::consts::TAU;
            for x in p.iter_mut() {
                *x = x.rem_euclid(tau);
            }
        }
        Model::Sphere => {
            let n = p.norm();
            if n > 0.0 && n.is_finite() {
                *p /= n;
            }
        }
        Model::Product { base_dim, fiber } => {
            let k = p.len() - base_dim;
            let mut tail = p.rows(*base_dim, k).into_owned();
            retract(fiber, &mut tail);
            p.rows_mut(*base_dim, k).copy_from(&tail);
        }
    }
}

/// Endpoint of a flow together with its step-doubling error estimate.
#[derive(Clone, Debug)]
pub struct FlowResult {
    pub end: DVector<f64>,
    pub error_estimate: f64,
}

/// Flow endpoint plus the full sampled trajectory of the fine run.
#[derive(Clone, Debug)]
pub struct FlowTrace {
    pub result: FlowResult,
    pub samples: Vec<(f64, DVector<f64>)>,
}

fn rk4_step(
    f: &dyn TimeDependentField,
    t: f64,
    y: &DVector<f64>,
    h: f64,
    dom: &FlowDomain,
) -> DVector<f64> {
    let k1 = f.eval(t, y);
    let k2 = f.eval(t + 0.5 * h, &(y + 0.5 * h * &k1));
    let k3 = f.eval(t + 0.5 * h, &(y + 0.5 * h * &k2));
    let k4 = f.eval(t + h, &(y + h * &k3));
    let mut next = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    dom.post_step(&mut next);
    next
}

/// Refine the escape time inside the step that left the domain: bisect on the
/// substep length, returning the last in-domain `(dt, state)`.
fn refine_escape(
    f: &dyn TimeDependentField,
    t: f64,
    y: &DVector<f64>,
    h: f64,
    dom: &FlowDomain,
) -> (f64, DVector<f64>) {
    let mut lo = 0.0;
    let mut hi = h;
    let mut state = y.clone();
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        let trial = rk4_step(f, t, y, mid, dom);
        if dom.contains(&trial) {
            lo = mid;
            state = trial;
        } else {
            hi = mid;
        }
    }
    (lo, state)
}

fn run_fixed(
    f: &dyn TimeDependentField,
    start: &DVector<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
    dom: &FlowDomain,
    mut record: Option<&mut Vec<(f64, DVector<f64>)>>,
) -> Result<DVector<f64>> {
    let h = (t1 - t0) / steps as f64;
    let mut y = start.clone();
    if !dom.contains(&y) {
        return Err(Error::EscapeDetected {
            t_escape: t0,
            last: y,
        });
    }
    if let Some(rec) = record.as_deref_mut() {
        rec.push((t0, y.clone()));
    }
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let next = rk4_step(f, t, &y, h, dom);
        if !dom.contains(&next) {
            let (dt, last) = refine_escape(f, t, &y, h, dom);
            return Err(Error::EscapeDetected {
                t_escape: t + dt,
                last,
            });
        }
        y = next;
        if let Some(rec) = record.as_deref_mut() {
            rec.push((t + h, y.clone()));
        }
    }
    Ok(y)
}

/// Classical fixed-step RK4 flow of `field` from `start` over `[t0, t1]`.
///
/// The error estimate comes from step doubling: the endpoint difference
/// between runs at `steps` and `2 * steps`. The finer endpoint is returned.
pub fn integrate_flow(
    field: &dyn TimeDependentField,
    start: &DVector<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
    dom: &FlowDomain,
) -> Result<FlowResult> {
    assert!(steps >= 1, "steps must be >= 1");
    let fine = run_fixed(field, start, t0, t1, 2 * steps, dom, None)?;
    let est = match run_fixed(field, start, t0, t1, steps, dom, None) {
        Ok(coarse) => (&fine - coarse).norm(),
        // The coarse run grazed the boundary while the fine one stayed in;
        // fall back to its distance at escape as a conservative estimate.
        Err(Error::EscapeDetected { last, .. }) => (&fine - last).norm(),
        Err(e) => return Err(e),
    };
    Ok(FlowResult {
        end: fine,
        error_estimate: est,
    })
}

/// As [`integrate_flow`], additionally recording the fine-run samples.
pub fn integrate_flow_trace(
    field: &dyn TimeDependentField,
    start: &DVector<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
    dom: &FlowDomain,
) -> Result<FlowTrace> {
    assert!(steps >= 1, "steps must be >= 1");
    let mut samples = Vec::with_capacity(2 * steps + 1);
    let fine = run_fixed(field, start, t0, t1, 2 * steps, dom, Some(&mut samples))?;
    let est = match run_fixed(field, start, t0, t1, steps, dom, None) {
        Ok(coarse) => (&fine - coarse).norm(),
        Err(Error::EscapeDetected { last, .. }) => (&fine - last).norm(),
        Err(e) => return Err(e),
    };
    Ok(FlowTrace {
        result: FlowResult {
            end: fine,
            error_estimate: est,
        },
        samples,
    })
}

/// Convenience: flow of an autonomous field.
pub fn integrate_autonomous(
    field: &dyn VectorField,
    start: &DVector<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
    dom: &FlowDomain,
) -> Result<FlowResult> {
    integrate_flow(&Autonomous(field), start, t0, t1, steps, dom)
}

/// Composite flow
/// `Fl^X_{-s} o Fl^Y_{-t} o Fl^X_s o Fl^Y_t` applied to `at`
/// (rightmost factor acts first).
pub fn flow_commutator(
    x: &dyn VectorField,
    y: &dyn VectorField,
    at: &DVector<f64>,
    t: f64,
    s: f64,
    steps_per_unit: usize,
    dom: &FlowDomain,
) -> Result<DVector<f64>> {
    let steps = |dt: f64| ((dt.abs() * steps_per_unit as f64).ceil() as usize).max(1);
    let mut p = at.clone();
    for (field, dt) in [(y, t), (x, s), (y, -t), (x, -s)] {
        if dt == 0.0 {
            continue;
        }
        p = integrate_autonomous(field, &p, 0.0, dt, steps(dt), dom)?.end;
    }
    Ok(p)
}
