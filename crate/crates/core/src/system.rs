//! Canonical presentation of a system of vector fields on a fiber bundle:
//! base atlas with affine transitions, fiber model, per-chart action of the
//! algebra, bundle transitions, section brackets, completeness probes and
//! associated systems built from group-valued cocycles.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    integrate_autonomous, AffineField, FlowDomain, Model, Restriction, VectorField,
    DEFAULT_STEPS_PER_UNIT,
};
use crate::lie::{GroupElement, GroupKind, LieAlgebra, Representation};
use crate::poly::{self, PolyMap};

pub const TRANSITION_COMPAT_TOL: f64 = 1e-7;
pub const SECTION_COMPAT_TOL: f64 = 1e-8;
pub const PUSHFORWARD_TOL: f64 = 1e-6;
pub const MONIC_SV_RATIO: f64 = 1e-8;
pub const COCYCLE_TOL: f64 = 1e-8;

/// Open coordinate box of a chart; the chart center has coordinates zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartBox {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl ChartBox {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        for i in 0..lo.len() {
            if !(lo[i] < 0.0 && 0.0 < hi[i]) {
                return Err(Error::validation(
                    "chart_box",
                    "chart box must contain the origin (the chart center)",
                ));
            }
        }
        Ok(ChartBox { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.lo.len()
            && x.iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .all(|(v, (l, h))| v > l && v < h)
    }

    /// Deterministic interior sample grid, shrunk by `margin` from the walls.
    pub fn sample_grid(&self, per_dim: usize, margin: f64) -> Vec<DVector<f64>> {
        let m = self.dim();
        let count = per_dim.pow(m as u32);
        let mut out = Vec::with_capacity(count);
        for flat in 0..count {
            let mut idx = flat;
            let mut x = DVector::zeros(m);
            for d in 0..m {
                let k = idx % per_dim;
                idx /= per_dim;
                let lo = self.lo[d] * (1.0 - margin);
                let hi = self.hi[d] * (1.0 - margin);
                let f = if per_dim == 1 {
                    0.5
                } else {
                    k as f64 / (per_dim - 1) as f64
                };
                x[d] = lo + f * (hi - lo);
            }
            out.push(x);
        }
        out
    }
}

/// Affine chart change `coords_dst = a coords_src + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineChartMap {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl AffineChartMap {
    pub fn identity(m: usize) -> Self {
        AffineChartMap {
            a: DMatrix::identity(m, m),
            b: DVector::zeros(m),
        }
    }

    pub fn shift(b: DVector<f64>) -> Self {
        AffineChartMap {
            a: DMatrix::identity(b.len(), b.len()),
            b,
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b
    }

    pub fn push_tangent(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.a * xi
    }
}

/// Fiber part of a bundle transition over one overlap component.
#[derive(Clone)]
pub enum TransitionMap {
    Identity,
    Constant(GroupElement),
    /// Evaluated on demand (reconstructed cocycles).
    Computed(Arc<dyn Fn(&DVector<f64>) -> Result<GroupElement> + Send + Sync>),
}

impl std::fmt::Debug for TransitionMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransitionMap::Identity => write!(f, "Identity"),
            TransitionMap::Constant(g) => write!(f, "Constant({:?})", g.mat),
            TransitionMap::Computed(_) => write!(f, "Computed(..)"),
        }
    }
}

impl TransitionMap {
    pub fn eval(&self, x_src: &DVector<f64>, group_dim: usize, kind: GroupKind) -> Result<GroupElement> {
        match self {
            TransitionMap::Identity => Ok(GroupElement::identity(group_dim, kind)),
            TransitionMap::Constant(g) => Ok(g.clone()),
            TransitionMap::Computed(f) => f(x_src),
        }
    }
}

/// One component of a chart overlap: the membership box in source
/// coordinates, the affine base map to the destination chart, and the fiber
/// transition over it.
#[derive(Clone, Debug)]
pub struct OverlapComponent {
    pub domain: ChartBoxFree,
    pub base_map: AffineChartMap,
    pub fiber: TransitionMap,
}

/// Box not required to contain the origin (overlap components rarely do).
#[derive(Clone, Debug, PartialEq)]
pub struct ChartBoxFree {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl ChartBoxFree {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        ChartBoxFree { lo, hi }
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.lo.len()
            && x.iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .all(|(v, (l, h))| v > l && v < h)
    }

    pub fn sample_grid(&self, per_dim: usize, margin: f64) -> Vec<DVector<f64>> {
        let m = self.lo.len();
        let count = per_dim.pow(m as u32);
        let mut out = Vec::with_capacity(count);
        for flat in 0..count {
            let mut idx = flat;
            let mut x = DVector::zeros(m);
            for d in 0..m {
                let k = idx % per_dim;
                idx /= per_dim;
                let w = self.hi[d] - self.lo[d];
                let lo = self.lo[d] + margin * w;
                let hi = self.hi[d] - margin * w;
                let f = if per_dim == 1 {
                    0.5
                } else {
                    k as f64 / (per_dim - 1) as f64
                };
                x[d] = lo + f * (hi - lo);
            }
            out.push(x);
        }
        out
    }
}

/// Point of the base, tagged with the chart its coordinates refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct BasePoint {
    pub chart: usize,
    pub coords: DVector<f64>,
}

impl BasePoint {
    pub fn new(chart: usize, coords: DVector<f64>) -> Self {
        BasePoint { chart, coords }
    }
}

/// Base manifold as charts plus pairwise affine transitions.
#[derive(Clone, Debug, Default)]
pub struct BaseAtlas {
    pub charts: Vec<ChartBox>,
    /// Keyed by `(from, to)`; components listed in a fixed order.
    pub overlaps: BTreeMap<(usize, usize), Vec<OverlapComponent>>,
}

impl BaseAtlas {
    pub fn single_chart(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        Ok(BaseAtlas {
            charts: vec![ChartBox::new(lo, hi)?],
            overlaps: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.charts.first().map(|c| c.dim()).unwrap_or(0)
    }

    pub fn contains(&self, p: &BasePoint) -> bool {
        p.chart < self.charts.len() && self.charts[p.chart].contains(&p.coords)
    }

    /// Express `p` in chart `dst` through an overlap component.
    pub fn to_chart(&self, p: &BasePoint, dst: usize) -> Result<BasePoint> {
        if p.chart == dst {
            return Ok(p.clone());
        }
        let comps = self
            .overlaps
            .get(&(p.chart, dst))
            .ok_or(Error::ChartMismatch { chart: dst })?;
        for c in comps {
            if c.domain.contains(&p.coords) {
                return Ok(BasePoint::new(dst, c.base_map.apply(&p.coords)));
            }
        }
        Err(Error::ChartMismatch { chart: dst })
    }

    /// The overlap component (and its index) through which `p` transitions
    /// into chart `dst`.
    pub fn component_for(&self, p: &BasePoint, dst: usize) -> Result<(usize, &OverlapComponent)> {
        let comps = self
            .overlaps
            .get(&(p.chart, dst))
            .ok_or(Error::ChartMismatch { chart: dst })?;
        comps
            .iter()
            .enumerate()
            .find(|(_, c)| c.domain.contains(&p.coords))
            .ok_or(Error::ChartMismatch { chart: dst })
    }

    /// Consistency of the base transitions: pair inverses and the cocycle
    /// condition on sampled triple overlaps.
    pub fn validate(&self) -> Result<()> {
        for (&(a, b), comps) in &self.overlaps {
            if a >= self.charts.len() || b >= self.charts.len() {
                return Err(Error::validation("atlas_index", "overlap names unknown chart"));
            }
            for comp in comps {
                for x in comp.domain.sample_grid(3, 0.05) {
                    if !self.charts[a].contains(&x) {
                        return Err(Error::validation(
                            "overlap_domain",
                            format!("overlap ({a},{b}) component leaves chart {a}"),
                        ));
                    }
                    let y = comp.base_map.apply(&x);
                    if !self.charts[b].contains(&y) {
                        return Err(Error::validation(
                            "overlap_range",
                            format!("overlap ({a},{b}) maps outside chart {b}"),
                        ));
                    }
                    // Inverse consistency through the reverse overlap.
                    let back = self.to_chart(&BasePoint::new(b, y), a)?;
                    if (back.coords - &x).amax() > 1e-10 {
                        return Err(Error::validation(
                            "transition_inverse",
                            format!("({a},{b}) transition not inverted by ({b},{a})"),
                        ));
                    }
                }
            }
        }
        // Cocycle condition on triples, where triple overlaps exist.
        for (&(a, b), comps_ab) in &self.overlaps {
            for (&(b2, c), _) in &self.overlaps {
                if b2 != b || c == a {
                    continue;
                }
                for comp in comps_ab {
                    for x in comp.domain.sample_grid(3, 0.05) {
                        let pa = BasePoint::new(a, x.clone());
                        let via_b = self
                            .to_chart(&pa, b)
                            .and_then(|pb| self.to_chart(&pb, c));
                        let direct = self.to_chart(&pa, c);
                        if let (Ok(v), Ok(d)) = (via_b, direct) {
                            if (v.coords - d.coords).amax() > 1e-10 {
                                return Err(Error::validation(
                                    "base_cocycle",
                                    format!("charts ({a},{b},{c}) violate the cocycle condition"),
                                ));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Standard fiber: model plus an optional open restriction.
#[derive(Clone, Debug, PartialEq)]
pub struct FiberModel {
    pub model: Model,
    pub dim: usize,
    pub restriction: Option<Restriction>,
}

impl FiberModel {
    pub fn euclidean(dim: usize) -> Self {
        FiberModel {
            model: Model::Euclidean,
            dim,
            restriction: None,
        }
    }

    pub fn sphere() -> Self {
        FiberModel {
            model: Model::Sphere,
            dim: 3,
            restriction: None,
        }
    }

    pub fn torus(dim: usize) -> Self {
        FiberModel {
            model: Model::Torus,
            dim,
            restriction: None,
        }
    }

    pub fn domain(&self, blowup_bound: f64) -> FlowDomain {
        FlowDomain {
            model: self.model.clone(),
            restriction: self.restriction.clone(),
            blowup_bound,
        }
    }

    pub fn contains(&self, s: &DVector<f64>) -> bool {
        s.len() == self.dim && self.domain(f64::INFINITY).contains(s)
    }

    /// Deterministic fiber samples inside the restriction.
    pub fn sample_points(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        let mut guard = 0;
        while out.len() < count && guard < 10_000 {
            guard += 1;
            let p = match self.model {
                Model::Sphere => {
                    let mut v = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0f64));
                    let n = v.norm();
                    if n < 1e-3 {
                        continue;
                    }
                    v /= n;
                    v
                }
                Model::Torus => {
                    DVector::from_fn(self.dim, |_, _| rng.gen_range(0.0..std::f64::consts::TAU))
                }
                _ => match &self.restriction {
                    Some(Restriction::Box { lo, hi }) => DVector::from_fn(self.dim, |i, _| {
                        let w = hi[i] - lo[i];
                        rng.gen_range((lo[i] + 0.05 * w)..(hi[i] - 0.05 * w))
                    }),
                    Some(Restriction::Ball { center, radius }) => {
                        let v = DVector::from_fn(self.dim, |_, _| rng.gen_range(-1.0..1.0f64));
                        center + v * (0.9 * radius / (self.dim as f64).sqrt())
                    }
                    None => DVector::from_fn(self.dim, |_, _| rng.gen_range(-1.5..1.5f64)),
                },
            };
            if self.contains(&p) {
                out.push(p);
            }
        }
        out
    }
}

/// Canonical presentation of a system of vector fields over a bundle.
#[derive(Clone, Debug)]
pub struct SystemSpec {
    pub base: BaseAtlas,
    pub fiber: FiberModel,
    pub algebra: LieAlgebra,
    /// Per-chart action of the algebra on the standard fiber.
    pub actions: Vec<Representation>,
    pub group_kind: GroupKind,
    pub blowup_bound: f64,
}

impl SystemSpec {
    pub fn base_dim(&self) -> usize {
        self.base.dim()
    }

    pub fn fiber_dim(&self) -> usize {
        self.fiber.dim
    }

    pub fn algebra_dim(&self) -> usize {
        self.algebra.dim()
    }

    pub fn action(&self, chart: usize) -> &Representation {
        &self.actions[chart]
    }

    /// Square size of the matrix group realizing fiber transports.
    pub fn group_matrix_dim(&self) -> usize {
        if self.actions[0].needs_augmentation() {
            self.fiber_dim() + 1
        } else {
            self.fiber_dim()
        }
    }

    pub fn group_identity(&self) -> GroupElement {
        GroupElement::identity(self.group_matrix_dim(), self.group_kind)
    }

    pub fn flow_domain(&self) -> FlowDomain {
        self.fiber.domain(self.blowup_bound)
    }

    pub fn require_chart_point(&self, chart: usize, x: &DVector<f64>) -> Result<()> {
        if chart >= self.base.charts.len() || !self.base.charts[chart].contains(x) {
            return Err(Error::ChartMismatch { chart });
        }
        Ok(())
    }

    /// Fundamental fiber field of `v` over chart `chart`.
    pub fn fundamental(&self, chart: usize, v: &DVector<f64>) -> Result<AffineField> {
        self.actions[chart].fundamental_field(v)
    }

    /// Evaluate the system map on `(xi_x, v)` at fiber point `s`: the base
    /// part passes through untouched, the vertical part is the fundamental
    /// field of `v` at `s`.
    pub fn eval_action(
        &self,
        chart: usize,
        x: &DVector<f64>,
        xi: &DVector<f64>,
        v: &DVector<f64>,
        s: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        self.require_chart_point(chart, x)?;
        if !self.fiber.contains(s) {
            return Err(Error::DomainError);
        }
        if xi.len() != self.base_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.base_dim(),
                got: xi.len(),
            });
        }
        let field = self.fundamental(chart, v)?;
        Ok((xi.clone(), field.eval(s)))
    }

    /// Fiber transition element of overlap `(from, to)` at `x` (coordinates
    /// of `from`).
    pub fn transition_element(
        &self,
        from: usize,
        to: usize,
        x: &DVector<f64>,
    ) -> Result<GroupElement> {
        let (_, comp) = self
            .base
            .component_for(&BasePoint::new(from, x.clone()), to)?;
        comp.fiber
            .eval(x, self.group_matrix_dim(), self.group_kind)
    }

    /// Shrink the fiber domain; completeness is typically lost.
    pub fn restrict_to_subbundle(&self, restriction: Restriction) -> Result<SystemSpec> {
        match &restriction {
            Restriction::Box { lo, hi } => {
                if lo.len() != self.fiber_dim() || lo.iter().zip(hi.iter()).any(|(l, h)| l >= h) {
                    return Err(Error::EmptyFiber);
                }
            }
            Restriction::Ball { radius, .. } => {
                if *radius <= 0.0 {
                    return Err(Error::EmptyFiber);
                }
            }
        }
        let mut out = self.clone();
        out.fiber.restriction = Some(restriction);
        Ok(out)
    }

    /// Drop any fiber restriction (the unrestricted parent system).
    pub fn without_restriction(&self) -> SystemSpec {
        let mut out = self.clone();
        out.fiber.restriction = None;
        out
    }

    /// Validate everything cheap and structural; the residual checks live in
    /// the probe functions below.
    pub fn validate(&self) -> Result<()> {
        if self.actions.len() != self.base.charts.len() {
            return Err(Error::validation(
                "actions_per_chart",
                "one action per chart required",
            ));
        }
        self.base.validate()?;
        for rep in &self.actions {
            if rep.algebra != self.algebra {
                return Err(Error::validation(
                    "algebra_mismatch",
                    "chart action built over a different algebra",
                ));
            }
            if rep.fiber_dim() != self.fiber_dim() {
                return Err(Error::validation(
                    "fiber_dim",
                    "action fields do not match the fiber dimension",
                ));
            }
            rep.check_bracket_compatibility()?;
            rep.check_tangency(&self.fiber.model, 50, 17)?;
        }
        let res = self.transition_compat_residual(3, 20)?;
        if res > TRANSITION_COMPAT_TOL {
            return Err(Error::validation(
                "transition_compat",
                format!("residual {res:.3e}"),
            ));
        }
        Ok(())
    }

    /// On overlaps the pushforward of a vertical field must match the
    /// adjoint-twisted field of the destination chart:
    /// `psi_* rho^a(v) = rho^b(Ad(psi) v)`. Exact in matrices for constant
    /// transitions; returns the worst sampled residual.
    pub fn transition_compat_residual(&self, grid: usize, _fiber_samples: usize) -> Result<f64> {
        let mut worst = 0.0f64;
        for (&(a, b), comps) in &self.base.overlaps {
            for comp in comps {
                for x in comp.domain.sample_grid(grid, 0.1) {
                    let psi = comp
                        .fiber
                        .eval(&x, self.group_matrix_dim(), self.group_kind)?;
                    let psi_inv = psi.inverse()?;
                    for i in 0..self.algebra_dim() {
                        let mut v = DVector::zeros(self.algebra_dim());
                        v[i] = 1.0;
                        let m_a = self.actions[a].action_matrix(&v)?;
                        // Pushforward through s -> psi s conjugates the matrix.
                        let pushed = &psi.mat * m_a * &psi_inv.mat;
                        let (w, res) = crate::lie::project_onto_matrix_span(
                            &(0..self.algebra_dim())
                                .map(|k| {
                                    let mut e = DVector::zeros(self.algebra_dim());
                                    e[k] = 1.0;
                                    self.actions[b].action_matrix(&e).expect("basis")
                                })
                                .collect::<Vec<_>>(),
                            &pushed,
                        );
                        worst = worst.max(res);
                        // The twist must itself be Ad(psi): compare fields.
                        let twisted = self.actions[b].action_matrix(&w)?;
                        worst = worst.max((twisted - pushed).amax());
                    }
                }
            }
        }
        Ok(worst)
    }
}

/// Section of the system bundle in per-chart data: a base field `X` and a
/// `V`-valued function `v`, both polynomial with exact derivatives.
#[derive(Clone, Debug)]
pub struct SectionH {
    pub charts: BTreeMap<usize, SectionChart>,
}

#[derive(Clone, Debug)]
pub struct SectionChart {
    /// Polynomial base field on the chart box (`m -> m`).
    pub base_field: PolyMap,
    /// Polynomial `V`-valued coefficient (`m -> d`).
    pub v_map: PolyMap,
}

impl SectionH {
    pub fn on_chart(chart: usize, base_field: PolyMap, v_map: PolyMap) -> Self {
        let mut charts = BTreeMap::new();
        charts.insert(chart, SectionChart { base_field, v_map });
        SectionH { charts }
    }

    /// Vertical section: the base field is exactly zero.
    pub fn vertical(chart: usize, m: usize, v_map: PolyMap) -> Self {
        SectionH::on_chart(chart, PolyMap::zero(m, m), v_map)
    }

    pub fn chart_data(&self, chart: usize) -> Result<&SectionChart> {
        self.charts
            .get(&chart)
            .ok_or(Error::ChartMismatch { chart })
    }

    /// Exactly-zero base field on every chart.
    pub fn is_vertical(&self) -> bool {
        self.charts.values().all(|c| c.base_field.is_zero())
    }
}

/// Bracket of two sections over a common chart:
/// base `[X1, X2]`, vertical `[v1, v2]^V + Dv2.X1 - Dv1.X2`, all exact.
pub fn bracket_sections(
    sys: &SystemSpec,
    h1: &SectionH,
    h2: &SectionH,
    chart: usize,
) -> Result<SectionH> {
    let c1 = h1.chart_data(chart)?;
    let c2 = h2.chart_data(chart)?;
    let base = poly::poly_bracket(&c1.base_field, &c2.base_field);
    let v = poly::pointwise_algebra_bracket(&c1.v_map, &c2.v_map, &sys.algebra)
        .add(&poly::directional_derivative(&c2.v_map, &c1.base_field))
        .add(&poly::directional_derivative(&c1.v_map, &c2.base_field).scale(-1.0));
    Ok(SectionH::on_chart(chart, base, v))
}

/// Worst sampled residual of the pushforward property:
/// the product-space field of `bracket_sections` against the numerical
/// bracket of the two product-space fields of the inputs.
pub fn pushforward_bracket_residual(
    sys: &SystemSpec,
    h1: &SectionH,
    h2: &SectionH,
    chart: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let br = bracket_sections(sys, h1, h2, chart)?;
    let m = sys.base_dim();
    let k = sys.fiber_dim();
    let product = |sec: &SectionChart| {
        let base_field = sec.base_field.clone();
        let v_map = sec.v_map.clone();
        let rep = sys.actions[chart].clone();
        crate::geometry::FnField {
            dim: m + k,
            f: move |z: &DVector<f64>| {
                let x = z.rows(0, m).into_owned();
                let s = z.rows(m, k).into_owned();
                let xb = base_field.eval(&x);
                let vert = rep
                    .fundamental_field(&v_map.eval(&x))
                    .expect("v dims")
                    .eval(&s);
                let mut out = DVector::zeros(m + k);
                out.rows_mut(0, m).copy_from(&xb);
                out.rows_mut(m, k).copy_from(&vert);
                out
            },
        }
    };
    let f1 = product(h1.chart_data(chart)?);
    let f2 = product(h2.chart_data(chart)?);
    let fb = product(br.chart_data(chart)?);

    let xs = sys.base.charts[chart].sample_grid(3, 0.3);
    let ss = sys.fiber.sample_points(samples.max(3), seed);
    let mut worst = 0.0f64;
    for x in &xs {
        for s in &ss {
            let mut z = DVector::zeros(m + k);
            z.rows_mut(0, m).copy_from(x);
            z.rows_mut(m, k).copy_from(s);
            let numeric = crate::geometry::lie_bracket(&f1, &f2, &z)?;
            let exact = fb.eval(&z);
            worst = worst.max((numeric - exact).amax());
        }
    }
    Ok(worst)
}

/// Agreement of a section's chart data across overlaps under the induced
/// transitions: `v^b = Ad(psi) v^a` plus the logarithmic-derivative term,
/// which vanishes for the constant transitions used here.
pub fn section_compat_residual(sys: &SystemSpec, h: &SectionH, grid: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for (&(a, b), comps) in &sys.base.overlaps {
        let (Some(ca), Some(cb)) = (h.charts.get(&a), h.charts.get(&b)) else {
            continue;
        };
        for comp in comps {
            for x in comp.domain.sample_grid(grid, 0.1) {
                let y = comp.base_map.apply(&x);
                let psi = comp
                    .fiber
                    .eval(&x, sys.group_matrix_dim(), sys.group_kind)?;
                let va = ca.v_map.eval(&x);
                let vb = cb.v_map.eval(&y);
                let (ad_va, res) =
                    crate::lie::adjoint_with_residual(&sys.actions[b], &psi, &va)?;
                worst = worst.max(res).max((vb - ad_va).amax());
                let xa = ca.base_field.eval(&x);
                let xb = cb.base_field.eval(&y);
                worst = worst.max((comp.base_map.push_tangent(&xa) - xb).amax());
            }
        }
    }
    Ok(worst)
}

/// Completeness verdict of a probe.
#[derive(Clone, Debug)]
pub enum CompletenessVerdict {
    Complete { horizon: f64 },
    Escaped { t_escape: f64, start: DVector<f64> },
}

impl CompletenessVerdict {
    pub fn is_complete(&self) -> bool {
        matches!(self, CompletenessVerdict::Complete { .. })
    }
}

/// Integrate the fundamental field of `v` from sampled fiber starts over
/// `[-horizon, horizon]`; escape is a verdict, not an error.
pub fn completeness_probe(
    sys: &SystemSpec,
    chart: usize,
    v: &DVector<f64>,
    horizon: f64,
    samples: usize,
    seed: u64,
) -> Result<CompletenessVerdict> {
    assert!(horizon > 0.0);
    let field = sys.fundamental(chart, v)?;
    let dom = sys.flow_domain();
    let steps = ((horizon * DEFAULT_STEPS_PER_UNIT as f64 / 10.0).ceil() as usize).clamp(10, 200_000);
    for start in sys.fiber.sample_points(samples, seed) {
        for dir in [1.0, -1.0] {
            match integrate_autonomous(&field, &start, 0.0, dir * horizon, steps, &dom) {
                Ok(_) => {}
                Err(Error::EscapeDetected { t_escape, .. }) => {
                    return Ok(CompletenessVerdict::Escaped {
                        t_escape,
                        start,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(CompletenessVerdict::Complete { horizon })
}

/// Monic probe: stack the fundamental fields of a basis of `V` at sampled
/// fiber points and test full column rank by the singular-value ratio.
#[derive(Clone, Debug)]
pub struct MonicVerdict {
    pub monic: bool,
    pub worst_ratio: f64,
}

pub fn check_monic(sys: &SystemSpec, samples: usize, seed: u64) -> Result<MonicVerdict> {
    let d = sys.algebra_dim();
    let k = sys.fiber_dim();
    assert!(samples >= d, "need at least dim V fiber samples");
    let mut worst_ratio = f64::INFINITY;
    for rep in &sys.actions {
        let points = sys.fiber.sample_points(samples, seed);
        let mut stacked = DMatrix::zeros(points.len() * k, d);
        for (r, p) in points.iter().enumerate() {
            for i in 0..d {
                let mut e = DVector::zeros(d);
                e[i] = 1.0;
                let val = rep.fundamental_field(&e)?.eval(p);
                stacked.view_mut((r * k, i), (k, 1)).copy_from(&val);
            }
        }
        let svd = stacked.svd(false, false);
        let max_sv = svd.singular_values.max();
        let min_sv = svd.singular_values.min();
        let ratio = if max_sv > 0.0 { min_sv / max_sv } else { 0.0 };
        worst_ratio = worst_ratio.min(ratio);
    }
    Ok(MonicVerdict {
        monic: worst_ratio > MONIC_SV_RATIO,
        worst_ratio,
    })
}

/// Group-valued cocycle data for building an associated system: per overlap
/// component of the base atlas, a fiber transition.
pub struct CocycleSpec {
    pub base: BaseAtlas,
    pub kind: GroupKind,
}

/// Build the system induced on an associated bundle from a group-valued
/// cocycle and an action: the algebra is the group's, the per-chart action is
/// the fundamental-field family, transitions act by the cocycle.
pub fn build_associated_system(
    cocycle: CocycleSpec,
    action: Representation,
    fiber: FiberModel,
    blowup_bound: f64,
) -> Result<SystemSpec> {
    let charts = cocycle.base.charts.len();
    let sys = SystemSpec {
        base: cocycle.base,
        fiber,
        algebra: action.algebra.clone(),
        actions: vec![action; charts],
        group_kind: cocycle.kind,
        blowup_bound,
    };
    check_cocycle_condition(&sys)?;
    sys.validate()?;
    Ok(sys)
}

/// Cocycle condition of the fiber transitions: pairwise inverses and triple
/// products at sampled points.
pub fn check_cocycle_condition(sys: &SystemSpec) -> Result<()> {
    let n = sys.group_matrix_dim();
    let kind = sys.group_kind;
    let mut worst = 0.0f64;
    let mut index = 0usize;
    let mut count = 0usize;
    for (&(a, b), comps) in &sys.base.overlaps {
        for comp in comps {
            for x in comp.domain.sample_grid(3, 0.1) {
                let fwd = comp.fiber.eval(&x, n, kind)?;
                let y = comp.base_map.apply(&x);
                let back = sys.transition_element(b, a, &y)?;
                let res = (back.mat * &fwd.mat - DMatrix::identity(n, n)).amax();
                if res > worst {
                    worst = res;
                    index = count;
                }
                count += 1;
                // Triple products where a third chart also covers x.
                for c in 0..sys.base.charts.len() {
                    if c == a || c == b {
                        continue;
                    }
                    let pa = BasePoint::new(a, x.clone());
                    if let (Ok(g_bc), Ok(g_ca)) = (
                        sys.base
                            .to_chart(&pa, b)
                            .and_then(|pb| sys.transition_element(b, c, &pb.coords)),
                        sys.base
                            .to_chart(&pa, c)
                            .and_then(|pc| sys.transition_element(c, a, &pc.coords)),
                    ) {
                        let triple = g_ca.mat * g_bc.mat * &fwd.mat;
                        let res = (triple - DMatrix::identity(n, n)).amax();
                        if res > worst {
                            worst = res;
                            index = count;
                        }
                        count += 1;
                    }
                }
            }
        }
    }
    if worst > COCYCLE_TOL {
        return Err(Error::CocycleViolation {
            residual: worst,
            index,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn so2_action() -> Representation {
        let j = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        Representation::new(
            LieAlgebra::abelian(1),
            vec![AffineField::new(j, DVector::zeros(2))],
        )
        .unwrap()
    }

    fn rotation_system() -> SystemSpec {
        SystemSpec {
            base: BaseAtlas::single_chart(dvector![-5.0, -5.0], dvector![5.0, 5.0]).unwrap(),
            fiber: FiberModel::euclidean(2),
            algebra: LieAlgebra::abelian(1),
            actions: vec![so2_action()],
            group_kind: GroupKind::Rotation,
            blowup_bound: 1e8,
        }
    }

    fn translation_system() -> SystemSpec {
        // Translation action on the line: one generator s -> 1.
        let rep = Representation::new(
            LieAlgebra::abelian(1),
            vec![AffineField::new(DMatrix::zeros(1, 1), dvector![1.0])],
        )
        .unwrap();
        SystemSpec {
            base: BaseAtlas::single_chart(dvector![-60.0], dvector![60.0]).unwrap(),
            fiber: FiberModel::euclidean(1),
            algebra: LieAlgebra::abelian(1),
            actions: vec![rep],
            group_kind: GroupKind::AffineAug,
            blowup_bound: 1e8,
        }
    }

    #[test]
    fn eval_action_linearity_and_values() {
        let sys = rotation_system();
        let x = dvector![0.5, 0.5];
        let xi = dvector![1.0, 2.0];
        let s = dvector![1.0, 0.0];
        // v = 0 gives a vanishing vertical part.
        let (bx, vert) = sys
            .eval_action(0, &x, &xi, &dvector![0.0], &s)
            .unwrap();
        assert_relative_eq!((bx - &xi).amax(), 0.0);
        assert_relative_eq!(vert.amax(), 0.0);
        // Rotation generator at (1, 0) points to (0, 1).
        let (_, vert) = sys
            .eval_action(0, &x, &dvector![0.0, 0.0], &dvector![1.0], &s)
            .unwrap();
        assert_relative_eq!((vert.clone() - dvector![0.0, 1.0]).amax(), 0.0);
        // Fiber-linearity in v.
        let (_, vert2) = sys
            .eval_action(0, &x, &dvector![0.0, 0.0], &dvector![2.0], &s)
            .unwrap();
        assert_relative_eq!((vert2 - 2.0 * vert).amax(), 0.0);
    }

    #[test]
    fn bracket_of_constant_vertical_sections_is_structure_constant() {
        // On an so(3)-type scenario the V-part is the algebra bracket.
        let l1 = DMatrix::from_row_slice(3, 3, &[0., 0., 0., 0., 0., -1., 0., 1., 0.]);
        let l2 = DMatrix::from_row_slice(3, 3, &[0., 0., 1., 0., 0., 0., -1., 0., 0.]);
        let l3 = DMatrix::from_row_slice(3, 3, &[0., -1., 0., 1., 0., 0., 0., 0., 0.]);
        let rep = Representation::new(
            LieAlgebra::so3(),
            vec![
                AffineField::new(-l1, DVector::zeros(3)),
                AffineField::new(-l2, DVector::zeros(3)),
                AffineField::new(-l3, DVector::zeros(3)),
            ],
        )
        .unwrap();
        let sys = SystemSpec {
            base: BaseAtlas::single_chart(dvector![-2.0, -2.0], dvector![2.0, 2.0]).unwrap(),
            fiber: FiberModel::sphere(),
            algebra: LieAlgebra::so3(),
            actions: vec![rep],
            group_kind: GroupKind::Rotation,
            blowup_bound: 1e8,
        };
        let m = 2;
        let h1 = SectionH::vertical(0, m, PolyMap::constant(m, &dvector![1.0, 0.0, 0.0]));
        let h2 = SectionH::vertical(0, m, PolyMap::constant(m, &dvector![0.0, 1.0, 0.0]));
        let br = bracket_sections(&sys, &h1, &h2, 0).unwrap();
        assert!(br.is_vertical(), "bracket of verticals is vertical");
        let v = br.chart_data(0).unwrap().v_map.eval(&dvector![0.3, -0.4]);
        assert_relative_eq!((v - dvector![0.0, 0.0, 1.0]).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn bracket_antisymmetry_gives_zero_section() {
        let sys = rotation_system();
        let h = SectionH::on_chart(
            0,
            PolyMap::monomial(2, 2, 0, 1.0, &[0, 1]),
            PolyMap::monomial(2, 1, 0, 0.7, &[1, 0]),
        );
        let br = bracket_sections(&sys, &h, &h, 0).unwrap();
        assert!(br.chart_data(0).unwrap().base_field.is_zero());
        assert!(br.chart_data(0).unwrap().v_map.is_zero());
    }

    #[test]
    fn directional_derivative_section_bracket_oracle() {
        // X1 = d/dx, v1 = 0; X2 = 0, v2(x) = x e1 on abelian V:
        // bracket is vertical with v = e1 (directional derivative).
        let sys = rotation_system();
        let h1 = SectionH::on_chart(
            0,
            PolyMap::constant(2, &dvector![1.0, 0.0]),
            PolyMap::zero(2, 1),
        );
        let h2 = SectionH::vertical(0, 2, PolyMap::monomial(2, 1, 0, 1.0, &[1, 0]));
        let br = bracket_sections(&sys, &h1, &h2, 0).unwrap();
        assert!(br.is_vertical());
        let v = br.chart_data(0).unwrap().v_map.eval(&dvector![1.7, -0.3]);
        assert_relative_eq!(v[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn vertical_bracket_is_pointwise_in_the_section_values() {
        // Two pairs of vertical sections agreeing at x0 but with different
        // derivatives produce the same bracket value at x0 (order-0 operator).
        let l1 = DMatrix::from_row_slice(3, 3, &[0., 0., 0., 0., 0., -1., 0., 1., 0.]);
        let l2 = DMatrix::from_row_slice(3, 3, &[0., 0., 1., 0., 0., 0., -1., 0., 0.]);
        let l3 = DMatrix::from_row_slice(3, 3, &[0., -1., 0., 1., 0., 0., 0., 0., 0.]);
        let rep = Representation::new(
            LieAlgebra::so3(),
            vec![
                AffineField::new(-l1, DVector::zeros(3)),
                AffineField::new(-l2, DVector::zeros(3)),
                AffineField::new(-l3, DVector::zeros(3)),
            ],
        )
        .unwrap();
        let sys = SystemSpec {
            base: BaseAtlas::single_chart(dvector![-2.0, -2.0], dvector![2.0, 2.0]).unwrap(),
            fiber: FiberModel::sphere(),
            algebra: LieAlgebra::so3(),
            actions: vec![rep],
            group_kind: GroupKind::Rotation,
            blowup_bound: 1e8,
        };
        let x0 = dvector![0.0, 0.0];
        let v1_const = PolyMap::constant(2, &dvector![1.0, 0.0, 0.0]);
        let v1_vary = v1_const.add(&PolyMap::monomial(2, 3, 2, 2.0, &[1, 0]));
        let v2 = PolyMap::constant(2, &dvector![0.0, 1.0, 0.0]);
        let b1 = bracket_sections(
            &sys,
            &SectionH::vertical(0, 2, v1_const),
            &SectionH::vertical(0, 2, v2.clone()),
            0,
        )
        .unwrap();
        let b2 = bracket_sections(
            &sys,
            &SectionH::vertical(0, 2, v1_vary),
            &SectionH::vertical(0, 2, v2),
            0,
        )
        .unwrap();
        let val1 = b1.chart_data(0).unwrap().v_map.eval(&x0);
        let val2 = b2.chart_data(0).unwrap().v_map.eval(&x0);
        assert_relative_eq!((val1 - val2).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn pushforward_residual_small_for_random_sections() {
        let sys = rotation_system();
        let h1 = SectionH::on_chart(
            0,
            PolyMap::affine(
                &DMatrix::from_row_slice(2, 2, &[0.2, -0.1, 0.4, 0.3]),
                &dvector![1.0, 0.0],
            ),
            PolyMap::monomial(2, 1, 0, 0.8, &[1, 1]),
        );
        let h2 = SectionH::on_chart(
            0,
            PolyMap::monomial(2, 2, 1, 1.0, &[1, 0]),
            PolyMap::monomial(2, 1, 0, -0.5, &[0, 2]),
        );
        let res = pushforward_bracket_residual(&sys, &h1, &h2, 0, 5, 3).unwrap();
        assert!(res < PUSHFORWARD_TOL, "residual {res}");
    }

    #[test]
    fn completeness_probe_verdicts() {
        let sys = rotation_system();
        // v = 0: complete trivially.
        let v0 = completeness_probe(&sys, 0, &dvector![0.0], 10.0, 5, 1).unwrap();
        assert!(v0.is_complete());
        // Rotations: bounded circular orbits, complete over a long horizon.
        let v1 = completeness_probe(&sys, 0, &dvector![1.0], 100.0, 5, 2).unwrap();
        assert!(v1.is_complete());

        // Translation restricted to (0, 1): escapes at distance/speed.
        let restricted = translation_system()
            .restrict_to_subbundle(Restriction::Box {
                lo: dvector![0.0],
                hi: dvector![1.0],
            })
            .unwrap();
        match completeness_probe(&restricted, 0, &dvector![1.0], 2.0, 8, 3).unwrap() {
            CompletenessVerdict::Escaped { t_escape, start } => {
                let expected = (1.0 - start[0]).min(start[0]);
                assert!(
                    (t_escape - expected).abs() < 1e-3,
                    "escape {t_escape} vs {expected}"
                );
            }
            other => panic!("expected escape, got {other:?}"),
        }
    }

    #[test]
    fn restriction_preserving_orbits_stays_complete() {
        let sys = rotation_system()
            .restrict_to_subbundle(Restriction::Ball {
                center: dvector![0.0, 0.0],
                radius: 1.0,
            })
            .unwrap();
        let verdict = completeness_probe(&sys, 0, &dvector![1.0], 50.0, 6, 4).unwrap();
        assert!(verdict.is_complete(), "circular orbits stay inside the disk");
    }

    #[test]
    fn empty_restriction_is_rejected() {
        let sys = rotation_system();
        let err = sys
            .restrict_to_subbundle(Restriction::Ball {
                center: dvector![0.0, 0.0],
                radius: 0.0,
            })
            .unwrap_err();
        assert!(matches!(err, Error::EmptyFiber));
    }

    #[test]
    fn monic_check_detects_trivial_actions() {
        let sys = rotation_system();
        assert!(check_monic(&sys, 6, 5).unwrap().monic);

        // Trivial action: all generators zero.
        let trivial_rep = Representation::new(
            LieAlgebra::abelian(1),
            vec![AffineField::zero(2)],
        )
        .unwrap();
        let mut sys2 = rotation_system();
        sys2.actions = vec![trivial_rep];
        assert!(!check_monic(&sys2, 6, 5).unwrap().monic);
    }

    #[test]
    fn associated_system_from_trivial_cocycle_is_valid() {
        let base = BaseAtlas::single_chart(dvector![-5.0, -5.0], dvector![5.0, 5.0]).unwrap();
        let sys = build_associated_system(
            CocycleSpec {
                base,
                kind: GroupKind::Rotation,
            },
            so2_action(),
            FiberModel::euclidean(2),
            1e8,
        )
        .unwrap();
        assert!(check_monic(&sys, 6, 7).unwrap().monic);
    }
}
