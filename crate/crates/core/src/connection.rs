//! Connections respecting a system, from splittings: Christoffel fields,
//! horizontal lift and vertical projection, parallel transport by two
//! independent routes (fiber ODE and group-level left-invariant ODE),
//! curvature by two independent routes (exact form vs bracket of lifts),
//! holonomy sampling and the flow-commutator checks.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::curve::Curve;
use crate::error::{Error, Result};
use crate::geometry::{
    integrate_flow_trace, AffineField, FlowDomain, FnField, FnTimeField, Model, Restriction,
    VectorField,
};
use crate::lie::{
    adjoint_with_residual, integrate_left_invariant, log_matrix, project_onto_matrix_span,
    GroupElement, GroupPath,
};
use crate::system::{AffineChartMap, BasePoint, SystemSpec};

pub const TRANSPORT_AGREEMENT_TOL: f64 = 1e-7;
pub const CURVATURE_AGREEMENT_TOL: f64 = 1e-5;
pub const HOLONOMY_MEMBERSHIP_TOL: f64 = 1e-6;
pub const AD_PULLBACK_TOL: f64 = 1e-5;
pub const CLAIM2_TOL: f64 = 1e-4;
pub const SMALL_LOOP_TOL: f64 = 1e-3;
/// Central-difference step for pullbacks through transport maps.
pub const PULLBACK_FD_STEP: f64 = 1e-4;

/// Splitting of the system sequence in chart data: per chart, `m` polynomial
/// `V`-valued component functions (the dx^i coefficients), with exact
/// partial derivatives. A splitting determines the connection.
#[derive(Clone, Debug)]
pub struct Splitting {
    pub charts: Vec<SplittingChart>,
}

#[derive(Clone, Debug)]
pub struct SplittingChart {
    /// `comps[i]: U_alpha -> V` is the coefficient of `dx^i`.
    pub comps: Vec<crate::poly::PolyMap>,
}

impl Splitting {
    pub fn zero(sys: &SystemSpec) -> Splitting {
        let m = sys.base_dim();
        let d = sys.algebra_dim();
        Splitting {
            charts: (0..sys.base.charts.len())
                .map(|_| SplittingChart {
                    comps: (0..m).map(|_| crate::poly::PolyMap::zero(m, d)).collect(),
                })
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.charts
            .iter()
            .all(|c| c.comps.iter().all(|p| p.is_zero()))
    }

    /// Uniform scaling of every component.
    pub fn scaled(&self, factor: f64) -> Splitting {
        Splitting {
            charts: self
                .charts
                .iter()
                .map(|c| SplittingChart {
                    comps: c.comps.iter().map(|p| p.scale(factor)).collect(),
                })
                .collect(),
        }
    }

    /// Random polynomial splitting (degree <= 2), for cross-check batteries.
    pub fn random_polynomial(sys: &SystemSpec, scale: f64, rng: &mut ChaCha8Rng) -> Splitting {
        let m = sys.base_dim();
        let d = sys.algebra_dim();
        let charts = (0..sys.base.charts.len())
            .map(|_| {
                let comps = (0..m)
                    .map(|_| {
                        let mut map = crate::poly::PolyMap::zero(m, d);
                        for out in 0..d {
                            for powers in monomial_powers(m, 2) {
                                let c: f64 = rng.gen_range(-scale..scale);
                                map = map.add(&crate::poly::PolyMap::monomial(
                                    m, d, out, c, &powers,
                                ));
                            }
                        }
                        map
                    })
                    .collect();
                SplittingChart { comps }
            })
            .collect();
        Splitting { charts }
    }

    /// Splitting value as a `d x m` matrix: column `i` is `sigma_i(x)`.
    pub fn value(&self, chart: usize, x: &DVector<f64>) -> DMatrix<f64> {
        let comps = &self.charts[chart].comps;
        let d = comps[0].n_out;
        let mut s = DMatrix::zeros(d, comps.len());
        for (i, c) in comps.iter().enumerate() {
            s.set_column(i, &c.eval(x));
        }
        s
    }

    /// `sigma(xi) in V` at `x`.
    pub fn apply(&self, chart: usize, x: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
        self.value(chart, x) * xi
    }

    /// Exact partial `d sigma_j / d x_i` at `x` (a vector in `V`).
    pub fn partial(&self, chart: usize, x: &DVector<f64>, i: usize, j: usize) -> DVector<f64> {
        self.charts[chart].comps[j].partial(i).eval(x)
    }

    /// Derivative of the splitting matrix along `xi`: `d/dt S(x + t xi)`.
    pub fn value_derivative(
        &self,
        chart: usize,
        x: &DVector<f64>,
        xi: &DVector<f64>,
    ) -> DMatrix<f64> {
        let comps = &self.charts[chart].comps;
        let d = comps[0].n_out;
        let mut s = DMatrix::zeros(d, comps.len());
        for (j, c) in comps.iter().enumerate() {
            s.set_column(j, &(c.jacobian(x) * xi));
        }
        s
    }

    /// Chart-compatibility across overlaps: the splitting transforms by the
    /// adjoint twist of the transition (plus a logarithmic-derivative term
    /// that vanishes for the constant transitions used here). Worst residual.
    pub fn compat_residual(&self, sys: &SystemSpec, grid: usize) -> Result<f64> {
        let mut worst = 0.0f64;
        for (&(a, b), comps) in &sys.base.overlaps {
            for comp in comps {
                for x in comp.domain.sample_grid(grid, 0.1) {
                    let y = comp.base_map.apply(&x);
                    let psi = comp
                        .fiber
                        .eval(&x, sys.group_matrix_dim(), sys.group_kind)?;
                    for i in 0..sys.base_dim() {
                        let mut xi = DVector::zeros(sys.base_dim());
                        xi[i] = 1.0;
                        let va = self.apply(a, &x, &xi);
                        let (ad_va, res) = adjoint_with_residual(&sys.actions[b], &psi, &va)?;
                        let vb = self.apply(b, &y, &comp.base_map.push_tangent(&xi));
                        worst = worst.max(res).max((vb - ad_va).amax());
                    }
                }
            }
        }
        Ok(worst)
    }
}

fn monomial_powers(m: usize, max_deg: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut stack = vec![vec![]];
    while let Some(cur) = stack.pop() {
        if cur.len() == m {
            let deg: u32 = cur.iter().sum();
            if deg <= max_deg {
                out.push(cur);
            }
            continue;
        }
        for p in 0..=max_deg {
            let mut next = cur.clone();
            next.push(p);
            stack.push(next);
        }
    }
    out.sort();
    out
}

/// The Christoffel field of the connection at `(x, xi)`: the fiber field
/// realizing `sigma(xi)` under the chart action. Linear in `xi`.
pub fn christoffel(
    sys: &SystemSpec,
    sp: &Splitting,
    chart: usize,
    x: &DVector<f64>,
    xi: &DVector<f64>,
) -> Result<AffineField> {
    sys.require_chart_point(chart, x)?;
    sys.fundamental(chart, &sp.apply(chart, x, xi))
}

/// Horizontal lift of `(xi, e)`: base part passes through, vertical part is
/// the Christoffel field at `e`.
pub fn horizontal_lift(
    sys: &SystemSpec,
    sp: &Splitting,
    chart: usize,
    x: &DVector<f64>,
    xi: &DVector<f64>,
    e: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if !sys.fiber.contains(e) {
        return Err(Error::DomainError);
    }
    let gamma = christoffel(sys, sp, chart, x, xi)?;
    Ok((xi.clone(), gamma.eval(e)))
}

/// Projection onto the vertical bundle along the horizontal one:
/// `(Y_base, Y_vert) -> Y_vert - Gamma(Y_base)(e)`. Idempotent; kills lifts.
pub fn vertical_projection(
    sys: &SystemSpec,
    sp: &Splitting,
    chart: usize,
    x: &DVector<f64>,
    e: &DVector<f64>,
    y_base: &DVector<f64>,
    y_vert: &DVector<f64>,
) -> Result<DVector<f64>> {
    let gamma = christoffel(sys, sp, chart, x, y_base)?;
    Ok(y_vert - gamma.eval(e))
}

/// Options shared by the transport routines.
#[derive(Clone, Copy, Debug)]
pub struct TransportOptions {
    /// RK4 steps per unit of curve parameter.
    pub steps_per_unit: usize,
}

impl Default for TransportOptions {
    fn default() -> Self {
        TransportOptions {
            steps_per_unit: crate::geometry::DEFAULT_STEPS_PER_UNIT,
        }
    }
}

impl TransportOptions {
    pub fn with_steps(steps_per_unit: usize) -> Self {
        TransportOptions { steps_per_unit }
    }

    fn leg_steps(&self, span: f64) -> usize {
        ((span * self.steps_per_unit as f64).ceil() as usize).max(4)
    }
}

/// Result of a parallel transport: sampled base and fiber paths, an optional
/// group path, and the step-doubling error estimate.
///
/// When present, the group path holds the *fiber-acting* elements `h(t)` with
/// `h(0) = e` and fiber point `u(t) = h(t) u_0`; `h(t)` is the inverse of the
/// left-invariant solution `g(t)` of `g' = g M(xi)`.
#[derive(Clone, Debug)]
pub struct TransportResult {
    pub times: Vec<f64>,
    pub base: Vec<BasePoint>,
    pub fiber: Vec<DVector<f64>>,
    pub group: Option<GroupPath>,
    pub error_estimate: f64,
}

impl TransportResult {
    pub fn end_fiber(&self) -> &DVector<f64> {
        self.fiber.last().expect("non-empty transport")
    }

    pub fn end_base(&self) -> &BasePoint {
        self.base.last().expect("non-empty transport")
    }

    /// Fiber map of the whole transport as a group element, when reducible.
    pub fn end_group(&self) -> Option<&GroupElement> {
        self.group.as_ref().map(|g| g.end())
    }

    /// Worst mismatch between `h(t) u_0` and the recorded fiber path.
    pub fn group_action_residual(&self, sys: &SystemSpec) -> Option<f64> {
        let path = self.group.as_ref()?;
        let u0 = self.fiber.first()?;
        let mut worst = 0.0f64;
        for (elem, fiber) in path.elems.iter().zip(self.fiber.iter()) {
            let acted = elem.apply_fiber(u0, &sys.fiber.model);
            worst = worst.max((acted - fiber).amax());
        }
        Some(worst)
    }

    /// Sup-distance of the fiber paths over the common time grid.
    pub fn sup_distance(&self, other: &TransportResult) -> f64 {
        let mut worst = 0.0f64;
        let mut j = 0usize;
        for (i, t) in self.times.iter().enumerate() {
            while j + 1 < other.times.len() && other.times[j] < t - 1e-12 {
                j += 1;
            }
            if (other.times[j] - t).abs() < 1e-9 {
                worst = worst.max((&self.fiber[i] - &other.fiber[j]).norm());
            }
        }
        worst
    }

    /// CSV trace: `t, base coords, fiber coords[, group entries]`.
    pub fn write_trace<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let m = self.base.first().map(|b| b.coords.len()).unwrap_or(0);
        let k = self.fiber.first().map(|f| f.len()).unwrap_or(0);
        let mut header: Vec<String> = vec!["t".into()];
        header.extend((0..m).map(|i| format!("base{i}")));
        header.extend((0..k).map(|i| format!("fiber{i}")));
        if let Some(g) = &self.group {
            let n = g.elems[0].dim();
            for r in 0..n {
                for c in 0..n {
                    header.push(format!("g{r}{c}"));
                }
            }
        }
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.times.len() {
            let mut row: Vec<String> = vec![format!("{:.12}", self.times[i])];
            row.extend(self.base[i].coords.iter().map(|v| format!("{v:.12}")));
            row.extend(self.fiber[i].iter().map(|v| format!("{v:.12}")));
            if let Some(g) = &self.group {
                let mat = &g.elems[i].mat;
                for r in 0..mat.nrows() {
                    for c in 0..mat.ncols() {
                        row.push(format!("{:.12}", mat[(r, c)]));
                    }
                }
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// One leg of a curve walk: a maximal stretch inside a single chart, with the
/// path re-expressed in that chart and the transition element applied on
/// entry.
pub(crate) struct Leg<'c> {
    pub(crate) chart: usize,
    pub(crate) t0: f64,
    pub(crate) t1: f64,
    piece: &'c crate::curve::CurvePiece,
    transform: Option<AffineChartMap>,
    pub(crate) entry: Option<GroupElement>,
}

impl Leg<'_> {
    pub(crate) fn eval(&self, t: f64) -> DVector<f64> {
        let raw = self.piece.eval(t);
        match &self.transform {
            Some(map) => map.apply(&raw),
            None => raw,
        }
    }

    pub(crate) fn deriv(&self, t: f64) -> DVector<f64> {
        let raw = self.piece.derivative(t);
        match &self.transform {
            Some(map) => map.push_tangent(&raw),
            None => raw,
        }
    }
}

/// Walk the curve across charts: junctions between declared pieces apply the
/// overlap transition; a piece leaving its chart mid-flight is split at a
/// crossing time found by bisection on chart membership.
pub(crate) fn curve_legs<'c>(sys: &SystemSpec, curve: &'c Curve, t_end: f64) -> Result<Vec<Leg<'c>>> {
    let mut legs: Vec<Leg<'c>> = Vec::new();
    let mut cur_chart: Option<usize> = None;
    let mut cur_coords: Option<DVector<f64>> = None;

    for piece in &curve.pieces {
        if piece.t0 >= t_end - 1e-15 {
            break;
        }
        let p1 = piece.t1.min(t_end);
        let mut entry = None;
        // Junction with the previous leg.
        if let (Some(pc), Some(px)) = (cur_chart, cur_coords.as_ref()) {
            let start = piece.eval(piece.t0);
            if pc == piece.chart {
                if (px - &start).amax() > 1e-9 {
                    return Err(Error::validation(
                        "curve_continuity",
                        "consecutive pieces disagree at their junction",
                    ));
                }
            } else {
                let from = BasePoint::new(pc, px.clone());
                let (_, comp) = sys.base.component_for(&from, piece.chart)?;
                let mapped = comp.base_map.apply(px);
                if (mapped - &start).amax() > 1e-9 {
                    return Err(Error::validation(
                        "curve_continuity",
                        "transition of the previous endpoint misses the next piece",
                    ));
                }
                entry = Some(comp.fiber.eval(px, sys.group_matrix_dim(), sys.group_kind)?);
            }
        }

        // Split the piece wherever it exits its current chart.
        let mut seg_start = piece.t0;
        let mut chart = piece.chart;
        let mut transform: Option<AffineChartMap> = None;
        let mut seg_entry = entry;
        loop {
            let eval_at = |t: f64| -> DVector<f64> {
                let raw = piece.eval(t);
                match &transform {
                    Some(map) => map.apply(&raw),
                    None => raw,
                }
            };
            if !sys.base.charts[chart].contains(&eval_at(seg_start)) {
                return Err(Error::ChartMismatch { chart });
            }
            // Scan for the first exit from the chart box.
            let scan = 256;
            let mut exit_at: Option<f64> = None;
            for i in 1..=scan {
                let t = seg_start + (p1 - seg_start) * i as f64 / scan as f64;
                if !sys.base.charts[chart].contains(&eval_at(t)) {
                    // Bisect the crossing time inside the bracketing interval.
                    let mut lo = seg_start + (p1 - seg_start) * (i - 1) as f64 / scan as f64;
                    let mut hi = t;
                    for _ in 0..80 {
                        let mid = 0.5 * (lo + hi);
                        if sys.base.charts[chart].contains(&eval_at(mid)) {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    exit_at = Some(lo);
                    break;
                }
            }
            match exit_at {
                None => {
                    legs.push(Leg {
                        chart,
                        t0: seg_start,
                        t1: p1,
                        piece,
                        transform: transform.clone(),
                        entry: seg_entry.take(),
                    });
                    cur_chart = Some(chart);
                    cur_coords = Some(eval_at(p1));
                    break;
                }
                Some(t_exit) => {
                    // Switch a hair before the boundary, inside some overlap.
                    let delta = ((p1 - seg_start) * 1e-6).max(1e-12);
                    let t_switch = t_exit - delta;
                    if t_switch <= seg_start {
                        return Err(Error::validation(
                            "chart_cover",
                            "curve leaves the atlas immediately after entering a chart",
                        ));
                    }
                    let at = eval_at(t_switch);
                    let here = BasePoint::new(chart, at.clone());
                    let mut next: Option<(usize, AffineChartMap, GroupElement)> = None;
                    for other in 0..sys.base.charts.len() {
                        if other == chart {
                            continue;
                        }
                        if let Ok((_, comp)) = sys.base.component_for(&here, other) {
                            // Require the curve to continue in `other`.
                            let probe = comp
                                .base_map
                                .apply(&eval_at((t_exit + 10.0 * delta).min(p1)));
                            if sys.base.charts[other].contains(&probe) {
                                let g = comp.fiber.eval(
                                    &at,
                                    sys.group_matrix_dim(),
                                    sys.group_kind,
                                )?;
                                next = Some((other, comp.base_map.clone(), g));
                                break;
                            }
                        }
                    }
                    let Some((next_chart, map, g)) = next else {
                        return Err(Error::validation(
                            "chart_cover",
                            format!("no chart covers the curve past t = {t_exit:.6}"),
                        ));
                    };
                    legs.push(Leg {
                        chart,
                        t0: seg_start,
                        t1: t_switch,
                        piece,
                        transform: transform.clone(),
                        entry: seg_entry.take(),
                    });
                    seg_entry = Some(g);
                    // Compose the chart change onto the running transform.
                    transform = Some(match transform {
                        None => map,
                        Some(prev) => AffineChartMap {
                            a: &map.a * &prev.a,
                            b: &map.a * &prev.b + &map.b,
                        },
                    });
                    chart = next_chart;
                    seg_start = t_switch;
                }
            }
        }
        if piece.t1 >= t_end {
            break;
        }
    }
    if legs.is_empty() {
        return Err(Error::validation(
            "curve_empty",
            "no curve pieces before t_end",
        ));
    }
    Ok(legs)
}

/// Parallel transport by integrating the time-dependent Christoffel field on
/// the fiber, pieced across charts. Never escapes on complete systems;
/// escapes report the last in-domain time on restricted ones.
pub fn transport_direct(
    sys: &SystemSpec,
    sp: &Splitting,
    curve: &Curve,
    t_end: f64,
    u0: &DVector<f64>,
    opts: &TransportOptions,
) -> Result<TransportResult> {
    if !sys.fiber.contains(u0) {
        return Err(Error::DomainError);
    }
    let legs = curve_legs(sys, curve, t_end)?;
    let dom = sys.flow_domain();
    let mut times = Vec::new();
    let mut base = Vec::new();
    let mut fiber = Vec::new();
    let mut err = 0.0f64;
    let mut u = u0.clone();
    for leg in &legs {
        if let Some(g) = &leg.entry {
            u = g.apply_fiber(&u, &sys.fiber.model);
        }
        let chart = leg.chart;
        let rep = sys.action(chart);
        let comps = &sp.charts[chart].comps;
        let field = FnTimeField {
            dim: sys.fiber_dim(),
            f: |t: f64, s: &DVector<f64>| {
                let x = leg.eval(t);
                let xi = leg.deriv(t);
                let mut v = DVector::zeros(comps[0].n_out);
                for (i, c) in comps.iter().enumerate() {
                    if xi[i] != 0.0 {
                        v += c.eval(&x) * xi[i];
                    }
                }
                rep.fundamental_field(&v).expect("dims validated").eval(s)
            },
        };
        let steps = opts.leg_steps(leg.t1 - leg.t0);
        let trace = integrate_flow_trace(&field, &u, leg.t0, leg.t1, steps, &dom)?;
        err += trace.result.error_estimate;
        for (t, s) in &trace.samples {
            times.push(*t);
            base.push(BasePoint::new(chart, leg.eval(*t)));
            fiber.push(s.clone());
        }
        u = trace.result.end;
    }
    Ok(TransportResult {
        times,
        base,
        fiber,
        group: None,
        error_estimate: err,
    })
}

/// Parallel transport at the group level: per leg, solve the left-invariant
/// equation `g' = g M(sigma(c'))` and act on the fiber through the inverse
/// path `h = g^{-1}`, composing transitions at chart changes.
pub fn transport_group(
    sys: &SystemSpec,
    sp: &Splitting,
    curve: &Curve,
    t_end: f64,
    u0: &DVector<f64>,
    opts: &TransportOptions,
) -> Result<TransportResult> {
    if !sys.fiber.contains(u0) {
        return Err(Error::DomainError);
    }
    let legs = curve_legs(sys, curve, t_end)?;
    let mut times = Vec::new();
    let mut base = Vec::new();
    let mut elems: Vec<GroupElement> = Vec::new();
    let mut err = 0.0f64;
    let mut acc = sys.group_identity();
    for leg in &legs {
        if let Some(g) = &leg.entry {
            acc = g.compose(&acc);
        }
        let chart = leg.chart;
        let gens = sys.action(chart).group_generators();
        let span = leg.t1 - leg.t0;
        let xi = |tau: f64| -> DVector<f64> {
            let t = leg.t0 + tau;
            sp.apply(chart, &leg.eval(t), &leg.deriv(t))
        };
        let steps = opts.leg_steps(span);
        let fine = integrate_left_invariant(&xi, &gens, sys.group_kind, span, steps)?;
        let coarse =
            integrate_left_invariant(&xi, &gens, sys.group_kind, span, (steps / 2).max(2))?;
        err += (&fine.end().mat - &coarse.end().mat).amax();
        for (tau, g) in fine.times.iter().zip(fine.elems.iter()) {
            let t = leg.t0 + tau;
            let h = g.inverse()?.compose(&acc);
            times.push(t);
            base.push(BasePoint::new(chart, leg.eval(t)));
            elems.push(h);
        }
        acc = fine.end().inverse()?.compose(&acc);
    }
    let fiber = elems
        .iter()
        .map(|h| h.apply_fiber(u0, &sys.fiber.model))
        .collect();
    Ok(TransportResult {
        times: times.clone(),
        base,
        fiber,
        group: Some(GroupPath { times, elems }),
        error_estimate: err,
    })
}

/// Value of the curvature form on a pair of base tangents: the exact-algebra
/// route `d sigma(X1, X2) + [sigma(X1), sigma(X2)]^V`, antisymmetric.
#[derive(Clone, Debug)]
pub struct CurvatureValue {
    pub v: DVector<f64>,
    pub as_field: AffineField,
}

pub fn curvature_formula(
    sys: &SystemSpec,
    sp: &Splitting,
    chart: usize,
    x: &DVector<f64>,
    x1: &DVector<f64>,
    x2: &DVector<f64>,
) -> Result<CurvatureValue> {
    sys.require_chart_point(chart, x)?;
    let m = sys.base_dim();
    let d = sys.algebra_dim();
    let mut v = DVector::zeros(d);
    for i in 0..m {
        for j in 0..m {
            let w = x1[i] * x2[j];
            if w == 0.0 {
                continue;
            }
            let dsig = sp.partial(chart, x, i, j) - sp.partial(chart, x, j, i);
            v += w * dsig;
        }
    }
    let s1 = sp.apply(chart, x, x1);
    let s2 = sp.apply(chart, x, x2);
    v += sys.algebra.bracket(&s1, &s2)?;
    let as_field = sys.fundamental(chart, &v)?;
    Ok(CurvatureValue { v, as_field })
}

/// Horizontal lift of the constant extension of `xi`, as a field on the
/// product `U_alpha x S` (no exact Jacobian: the bracket route differentiates
/// it by central differences, keeping the two curvature routes independent).
fn horizontal_product_field<'a>(
    sys: &'a SystemSpec,
    sp: &'a Splitting,
    chart: usize,
    xi: DVector<f64>,
) -> FnField<impl Fn(&DVector<f64>) -> DVector<f64> + Sync + 'a> {
    let m = sys.base_dim();
    let k = sys.fiber_dim();
    FnField {
        dim: m + k,
        f: move |z: &DVector<f64>| {
            let x = z.rows(0, m).into_owned();
            let s = z.rows(m, k).into_owned();
            let v = sp.apply(chart, &x, &xi);
            let vert = sys
                .fundamental(chart, &v)
                .expect("dims validated")
                .eval(&s);
            let mut out = DVector::zeros(m + k);
            out.rows_mut(0, m).copy_from(&xi);
            out.rows_mut(m, k).copy_from(&vert);
            out
        },
    }
}

/// Curvature by the bracket route: vertical projection of the Lie bracket of
/// the two horizontal lifts on `U_alpha x S`, evaluated at `(x, e)`.
pub fn curvature_bracket(
    sys: &SystemSpec,
    sp: &Splitting,
    chart: usize,
    x: &DVector<f64>,
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    e: &DVector<f64>,
    fd_scale: f64,
) -> Result<DVector<f64>> {
    sys.require_chart_point(chart, x)?;
    let m = sys.base_dim();
    let k = sys.fiber_dim();
    let f1 = horizontal_product_field(sys, sp, chart, x1.clone());
    let f2 = horizontal_product_field(sys, sp, chart, x2.clone());
    let mut z = DVector::zeros(m + k);
    z.rows_mut(0, m).copy_from(x);
    z.rows_mut(m, k).copy_from(e);
    let j1 = crate::geometry::fd_jacobian_scaled(&f1, &z, fd_scale);
    let j2 = crate::geometry::fd_jacobian_scaled(&f2, &z, fd_scale);
    let br = j2 * f1.eval(&z) - j1 * f2.eval(&z);
    let b_base = br.rows(0, m).into_owned();
    let b_vert = br.rows(m, k).into_owned();
    vertical_projection(sys, sp, chart, x, e, &b_base, &b_vert)
}

/// Transport around a closed loop; returns the transport data and, when the
/// scenario is group-reducible, the fiber map of the loop as a group element.
pub fn holonomy_loop(
    sys: &SystemSpec,
    sp: &Splitting,
    curve: &Curve,
    u0: &DVector<f64>,
    opts: &TransportOptions,
) -> Result<(TransportResult, Option<GroupElement>)> {
    curve.require_closed()?;
    let result = transport_group(sys, sp, curve, 1.0, u0, opts)?;
    let end = result.end_group().cloned();
    Ok((result, end))
}

/// Sampled estimate of the holonomy algebra: pullbacks of curvature values
/// along transport, expressed in `V`, with their numerical rank.
#[derive(Clone, Debug)]
pub struct HolonomyAlgebraEstimate {
    pub samples: Vec<DVector<f64>>,
    pub rank: usize,
    pub basis: Vec<DVector<f64>>,
    pub worst_projection_residual: f64,
}

/// Rank threshold: singular values above `1e-8 * sigma_max` count.
pub const HOLONOMY_RANK_THRESHOLD: f64 = 1e-8;

/// For each path `c` from the base point and each coordinate tangent pair at
/// its endpoint: evaluate the curvature, pull it back through the transport
/// (`Ad` of the left-invariant end element) and collect the result in `V`.
pub fn holonomy_algebra_sample(
    sys: &SystemSpec,
    sp: &Splitting,
    paths: &[Curve],
    opts: &TransportOptions,
) -> Result<HolonomyAlgebraEstimate> {
    let d = sys.algebra_dim();
    let m = sys.base_dim();
    let mut samples = Vec::new();
    let mut worst = 0.0f64;
    let u0 = sys.fiber.sample_points(1, 9).pop().expect("fiber sample");
    for c in paths {
        let result = transport_group(sys, sp, c, 1.0, &u0, opts)?;
        let end = result.end_base().clone();
        let h_end = result.end_group().expect("group transport").clone();
        // The left-invariant end element is the inverse of the fiber map.
        let g_end = h_end.inverse()?;
        for i in 0..m {
            for j in (i + 1)..m {
                let mut x1 = DVector::zeros(m);
                x1[i] = 1.0;
                let mut x2 = DVector::zeros(m);
                x2[j] = 1.0;
                let curv = curvature_formula(sys, sp, end.chart, &end.coords, &x1, &x2)?;
                let (pulled, res) =
                    adjoint_with_residual(&sys.actions[end.chart], &g_end, &curv.v)?;
                worst = worst.max(res);
                if res > HOLONOMY_MEMBERSHIP_TOL {
                    return Err(Error::BasisProjectionError {
                        residual: res,
                        tolerance: HOLONOMY_MEMBERSHIP_TOL,
                    });
                }
                samples.push(pulled);
            }
        }
    }
    // Numerical rank by singular values of the sample matrix.
    let mut mat = DMatrix::zeros(d, samples.len().max(1));
    for (c, s) in samples.iter().enumerate() {
        mat.set_column(c, s);
    }
    let svd = mat.svd(true, false);
    let smax = svd.singular_values.max();
    let rank = if smax <= 0.0 || !smax.is_finite() {
        0
    } else {
        svd.singular_values
            .iter()
            .filter(|s| **s > HOLONOMY_RANK_THRESHOLD * smax)
            .count()
    };
    let basis = match svd.u.as_ref() {
        Some(u) => (0..rank).map(|c| u.column(c).into_owned()).collect(),
        None => Vec::new(),
    };
    Ok(HolonomyAlgebraEstimate {
        samples,
        rank,
        basis,
        worst_projection_residual: worst,
    })
}

/// Two independent routes to the transport-pullback of a fundamental field:
/// flow conjugation by central differences through nearby transports vs the
/// adjoint formula through the group path. Returns the worst residual over
/// the requested transport times and fiber samples.
pub fn ad_pullback_check(
    sys: &SystemSpec,
    sp: &Splitting,
    curve: &Curve,
    v: &DVector<f64>,
    t_fracs: &[f64],
    fiber_samples: usize,
    opts: &TransportOptions,
) -> Result<f64> {
    let start_chart = curve.eval(0.0).0;
    let k = sys.fiber_dim();
    let samples = sys.fiber.sample_points(fiber_samples, 23);
    let mut worst = 0.0f64;
    for &t in t_fracs {
        if t == 0.0 {
            continue;
        }
        let group_route = transport_group(sys, sp, curve, t, &samples[0], opts)?;
        let h_end = group_route.end_group().expect("group transport").clone();
        let g_end = h_end.inverse()?;
        let end = group_route.end_base().clone();
        let (ad_v, res) = adjoint_with_residual(&sys.actions[start_chart], &g_end, v)?;
        worst = worst.max(res);
        let pulled_exact = sys.fundamental(start_chart, &ad_v)?;
        let field_at_end = sys.fundamental(end.chart, v)?;
        let transport_of = |s: &DVector<f64>| -> Result<DVector<f64>> {
            Ok(transport_direct(sys, sp, curve, t, s, opts)?
                .end_fiber()
                .clone())
        };
        for s in &samples {
            // Ambient Jacobian of the transport map by central differences
            // (the sphere model retracts internally, so the radial direction
            // collapses and the least-squares solve below absorbs it).
            let mut jac = DMatrix::zeros(k, k);
            for j in 0..k {
                let mut hi = s.clone();
                let mut lo = s.clone();
                hi[j] += PULLBACK_FD_STEP;
                lo[j] -= PULLBACK_FD_STEP;
                let col = (transport_of(&hi)? - transport_of(&lo)?) / (2.0 * PULLBACK_FD_STEP);
                jac.set_column(j, &col);
            }
            let s_end = transport_of(s)?;
            let w = field_at_end.eval(&s_end);
            // Solve T(Pt) y = w in the least-squares sense; the generous
            // cutoff drops the radial direction the sphere model collapses,
            // which in a finite-difference Jacobian survives only as noise.
            let y = crate::lie::lstsq_with_cutoff(&jac, &w, 1e-5);
            let expect = pulled_exact.eval(s);
            worst = worst.max((y - expect).amax());
        }
    }
    Ok(worst)
}

/// The composite flow
/// `f_{t,s} = Fl^{CX}_{-s} o Fl^{CY}_{-t} o Fl^{CX}_s o Fl^{CY}_t`
/// of the horizontal lifts of two base directions, acting on the fiber over
/// `x` (the base returns to `x` because the constant extensions commute).
pub fn flow_commutator_lifts(
    sys: &SystemSpec,
    sp: &Splitting,
    chart: usize,
    x: &DVector<f64>,
    dir_x: &DVector<f64>,
    dir_y: &DVector<f64>,
    t: f64,
    s: f64,
    e: &DVector<f64>,
    steps_per_unit: usize,
) -> Result<DVector<f64>> {
    let m = sys.base_dim();
    let k = sys.fiber_dim();
    let cx = horizontal_product_field(sys, sp, chart, dir_x.clone());
    let cy = horizontal_product_field(sys, sp, chart, dir_y.clone());
    let dom = product_domain(sys, chart);
    let mut z = DVector::zeros(m + k);
    z.rows_mut(0, m).copy_from(x);
    z.rows_mut(m, k).copy_from(e);
    let out = crate::geometry::flow_commutator(&cx, &cy, &z, t, s, steps_per_unit, &dom)?;
    Ok(out.rows(m, k).into_owned())
}

fn product_domain(sys: &SystemSpec, chart: usize) -> FlowDomain {
    let m = sys.base_dim();
    let k = sys.fiber_dim();
    let chart_box = &sys.base.charts[chart];
    let mut lo = DVector::from_element(m + k, f64::NEG_INFINITY);
    let mut hi = DVector::from_element(m + k, f64::INFINITY);
    lo.rows_mut(0, m).copy_from(&chart_box.lo);
    hi.rows_mut(0, m).copy_from(&chart_box.hi);
    if let Some(Restriction::Box { lo: flo, hi: fhi }) = &sys.fiber.restriction {
        lo.rows_mut(m, k).copy_from(flo);
        hi.rows_mut(m, k).copy_from(fhi);
    }
    FlowDomain {
        model: Model::Product {
            base_dim: m,
            fiber: Box::new(sys.fiber.model.clone()),
        },
        restriction: Some(Restriction::Box { lo, hi }),
        blowup_bound: sys.blowup_bound,
    }
}

/// For each `(t, s)` on the grid: build `Z = (d/dt f_{t,s}) o f_{t,s}^{-1}`
/// by central differences in `t`, sample it over the fiber and project onto
/// the span of the fundamental fields. Returns the worst projection residual.
pub fn claim2_check(
    sys: &SystemSpec,
    sp: &Splitting,
    chart: usize,
    x: &DVector<f64>,
    dir_x: &DVector<f64>,
    dir_y: &DVector<f64>,
    t_grid: &[f64],
    s_grid: &[f64],
    fiber_samples: usize,
    steps_per_unit: usize,
) -> Result<f64> {
    let d = sys.algebra_dim();
    let k = sys.fiber_dim();
    let samples = sys.fiber.sample_points(fiber_samples, 31);
    let delta = 1e-4;
    let mut worst = 0.0f64;
    for &t in t_grid {
        for &s in s_grid {
            let mut rows = Vec::with_capacity(samples.len());
            for e in &samples {
                // q = f_{t,s}^{-1}(e): swap the two fields and the two times.
                let q = flow_commutator_lifts(
                    sys, sp, chart, x, dir_y, dir_x, s, t, e, steps_per_unit,
                )?;
                let hi = flow_commutator_lifts(
                    sys,
                    sp,
                    chart,
                    x,
                    dir_x,
                    dir_y,
                    t + delta,
                    s,
                    &q,
                    steps_per_unit,
                )?;
                let lo = flow_commutator_lifts(
                    sys,
                    sp,
                    chart,
                    x,
                    dir_x,
                    dir_y,
                    t - delta,
                    s,
                    &q,
                    steps_per_unit,
                )?;
                rows.push((e.clone(), (hi - lo) / (2.0 * delta)));
            }
            // Least-squares projection of the sampled field onto span{rho(e_i)}.
            let mut a = DMatrix::zeros(samples.len() * k, d);
            let mut b = DVector::zeros(samples.len() * k);
            for (r, (e, z)) in rows.iter().enumerate() {
                for i in 0..d {
                    let mut ei = DVector::zeros(d);
                    ei[i] = 1.0;
                    let val = sys.fundamental(chart, &ei)?.eval(e);
                    a.view_mut((r * k, i), (k, 1)).copy_from(&val);
                }
                b.rows_mut(r * k, k).copy_from(z);
            }
            let coeffs = crate::lie::lstsq(&a, &b);
            let res = (&a * coeffs - &b).amax();
            worst = worst.max(res);
        }
    }
    Ok(worst)
}

/// Per-epsilon data and the extrapolated limit of the shrinking-rectangle
/// holonomy, expressed in `V`.
#[derive(Clone, Debug)]
pub struct SmallLoopResult {
    pub per_eps: Vec<(f64, DVector<f64>)>,
    pub extrapolated: DVector<f64>,
}

/// Holonomy of the counterclockwise coordinate rectangle of side `eps`
/// spanned by axes `(i, j)` at `x`: matrix logarithm of the fiber-acting end
/// element, projected onto the action matrices and divided by `eps^2`, then
/// Richardson-extrapolated in `eps`. Converges to
/// `+curvature_formula(x, e_i, e_j)` with this orientation convention.
pub fn small_loop_limit(
    sys: &SystemSpec,
    sp: &Splitting,
    chart: usize,
    x: &DVector<f64>,
    axis_i: usize,
    axis_j: usize,
    epsilons: &[f64],
    opts: &TransportOptions,
) -> Result<SmallLoopResult> {
    assert!(epsilons.len() >= 3, "need at least three epsilon values");
    let d = sys.algebra_dim();
    let action_basis: Vec<DMatrix<f64>> = (0..d)
        .map(|i| {
            let mut e = DVector::zeros(d);
            e[i] = 1.0;
            sys.actions[chart].action_matrix(&e).expect("basis")
        })
        .collect();
    let u0 = sys.fiber.sample_points(1, 41).pop().expect("fiber sample");
    let mut per_eps = Vec::new();
    for &eps in epsilons {
        let loop_curve = Curve::coordinate_rectangle(chart, x, axis_i, axis_j, eps);
        let (_, end) = holonomy_loop(sys, sp, &loop_curve, &u0, opts)?;
        let h = end.expect("group transport");
        let log = log_matrix(&h)?;
        let (coeffs, res) = project_onto_matrix_span(&action_basis, &log);
        if res > HOLONOMY_MEMBERSHIP_TOL * eps * eps {
            return Err(Error::BasisProjectionError {
                residual: res,
                tolerance: HOLONOMY_MEMBERSHIP_TOL,
            });
        }
        per_eps.push((eps, coeffs / (eps * eps)));
    }
    // Iterated Richardson table in eps (leading error is O(eps)).
    let eps: Vec<f64> = per_eps.iter().map(|(e, _)| *e).collect();
    let mut table: Vec<DVector<f64>> = per_eps.iter().map(|(_, v)| v.clone()).collect();
    let mut level = 1usize;
    while table.len() > 1 {
        let mut next = Vec::with_capacity(table.len() - 1);
        for i in 0..table.len() - 1 {
            let r = eps[i] / eps[i + level];
            let v = (&table[i + 1] * r - &table[i]) / (r - 1.0);
            next.push(v);
        }
        table = next;
        level += 1;
    }
    Ok(SmallLoopResult {
        per_eps,
        extrapolated: table.pop().expect("non-empty"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{GroupKind, LieAlgebra, Representation};
    use rand::SeedableRng;
    use crate::poly::PolyMap;
    use crate::system::{BaseAtlas, FiberModel};
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    /// The running abelian fixture: base R^2, fiber R^2, V = R with the
    /// rotation action, splitting sigma = x dy (x) e1. The holonomy of a
    /// counterclockwise loop is the rotation by its enclosed area.
    fn abelian_fixture() -> (SystemSpec, Splitting) {
        let j = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let rep = Representation::new(
            LieAlgebra::abelian(1),
            vec![AffineField::new(j, DVector::zeros(2))],
        )
        .unwrap();
        let sys = SystemSpec {
            base: BaseAtlas::single_chart(dvector![-5.0, -5.0], dvector![5.0, 5.0]).unwrap(),
            fiber: FiberModel::euclidean(2),
            algebra: LieAlgebra::abelian(1),
            actions: vec![rep],
            group_kind: GroupKind::Rotation,
            blowup_bound: 1e8,
        };
        let sp = Splitting {
            charts: vec![SplittingChart {
                comps: vec![
                    PolyMap::zero(2, 1),
                    PolyMap::monomial(2, 1, 0, 1.0, &[1, 0]),
                ],
            }],
        };
        (sys, sp)
    }

    fn so3_fixture() -> (SystemSpec, Splitting) {
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
        // sigma = (y e1) dx + (x e2) dy: curvature e2 - e1 + x y e3.
        let sp = Splitting {
            charts: vec![SplittingChart {
                comps: vec![
                    PolyMap::monomial(2, 3, 0, 1.0, &[0, 1]),
                    PolyMap::monomial(2, 3, 1, 1.0, &[1, 0]),
                ],
            }],
        };
        (sys, sp)
    }

    fn unit_square(chart: usize) -> Curve {
        Curve::polyline(
            chart,
            &[
                dvector![0.0, 0.0],
                dvector![1.0, 0.0],
                dvector![1.0, 1.0],
                dvector![0.0, 1.0],
                dvector![0.0, 0.0],
            ],
        )
    }

    #[test]
    fn christoffel_values_from_direct_substitution() {
        let (sys, sp) = abelian_fixture();
        let x = dvector![2.0, 0.0];
        // sigma(d/dy) at x = 2: the field s -> 2 J s.
        let f = christoffel(&sys, &sp, 0, &x, &dvector![0.0, 1.0]).unwrap();
        let s = dvector![1.0, 0.0];
        assert_relative_eq!(
            (f.eval(&s) - dvector![0.0, 2.0]).amax(),
            0.0,
            epsilon = 1e-14
        );
        // sigma(d/dx) = 0 by construction.
        let f = christoffel(&sys, &sp, 0, &x, &dvector![1.0, 0.0]).unwrap();
        assert!(f.is_zero());
        // Zero splitting gives the zero field.
        let zero = Splitting::zero(&sys);
        let f = christoffel(&sys, &zero, 0, &x, &dvector![0.7, -0.4]).unwrap();
        assert!(f.is_zero());
    }

    #[test]
    fn lift_and_projection_identities() {
        let (sys, sp) = abelian_fixture();
        let x = dvector![2.0, 0.0];
        let e = dvector![1.0, 0.0];
        let xi = dvector![0.3, -1.2];
        let (bx, vert) = horizontal_lift(&sys, &sp, 0, &x, &xi, &e).unwrap();
        // Base projection returns the input tangent exactly.
        assert_relative_eq!((bx.clone() - &xi).amax(), 0.0);
        // The projection kills horizontal lifts.
        let proj = vertical_projection(&sys, &sp, 0, &x, &e, &bx, &vert).unwrap();
        assert_relative_eq!(proj.amax(), 0.0, epsilon = 1e-14);
        // Purely vertical vectors pass through unchanged.
        let y = dvector![0.4, 0.9];
        let once = vertical_projection(&sys, &sp, 0, &x, &e, &DVector::zeros(2), &y).unwrap();
        assert_relative_eq!((once.clone() - &y).amax(), 0.0);
        // (d/dy, 0) at x = (2, 0), e = (1, 0): -2 J e = (0, -2).
        let p = vertical_projection(&sys, &sp, 0, &x, &e, &dvector![0.0, 1.0], &DVector::zeros(2))
            .unwrap();
        assert_relative_eq!((p - dvector![0.0, -2.0]).amax(), 0.0, epsilon = 1e-14);
        // Additivity of the lift in xi.
        let (_, v1) = horizontal_lift(&sys, &sp, 0, &x, &dvector![1.0, 0.0], &e).unwrap();
        let (_, v2) = horizontal_lift(&sys, &sp, 0, &x, &dvector![0.0, 1.0], &e).unwrap();
        let (_, v12) = horizontal_lift(&sys, &sp, 0, &x, &dvector![1.0, 1.0], &e).unwrap();
        assert_relative_eq!((v1 + v2 - v12).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn abelian_square_loop_rotates_by_enclosed_area() {
        // Green's theorem oracle: the loop integral of x dy around the unit
        // square is its area, 1.0, so transport rotates the fiber by 1 rad.
        let (sys, sp) = abelian_fixture();
        let opts = TransportOptions::with_steps(4000);
        let u0 = dvector![1.0, 0.0];
        let direct = transport_direct(&sys, &sp, &unit_square(0), 1.0, &u0, &opts).unwrap();
        let expect = dvector![1.0f64.cos(), 1.0f64.sin()];
        assert!(
            (direct.end_fiber() - &expect).norm() < 1e-6,
            "direct end {:?}",
            direct.end_fiber()
        );

        let (result, end) = holonomy_loop(&sys, &sp, &unit_square(0), &u0, &opts).unwrap();
        let angle = end.unwrap().rotation_angle().unwrap();
        assert!((angle - 1.0).abs() < 1e-6, "angle {angle}");
        assert!(result.group_action_residual(&sys).unwrap() < 1e-9);
    }

    #[test]
    fn zero_splitting_transport_is_constant() {
        let (sys, _) = abelian_fixture();
        let sp = Splitting::zero(&sys);
        let opts = TransportOptions::default();
        let u0 = dvector![0.3, 0.4];
        let r = transport_direct(&sys, &sp, &unit_square(0), 1.0, &u0, &opts).unwrap();
        assert_relative_eq!((r.end_fiber() - &u0).amax(), 0.0, epsilon = 1e-13);
        let g = transport_group(&sys, &sp, &unit_square(0), 1.0, &u0, &opts).unwrap();
        let end = g.end_group().unwrap();
        assert!((&end.mat - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn dual_transports_agree_on_both_fixtures() {
        let opts = TransportOptions::with_steps(800);
        let sphere_start = {
            let v = dvector![0.3, -0.5, 0.81];
            let n = v.norm();
            v / n
        };
        let cases = [
            (
                abelian_fixture(),
                dvector![0.6, -0.2],
                Curve::polyline(
                    0,
                    &[dvector![0.0, 0.0], dvector![1.3, 0.7], dvector![0.4, 1.6]],
                ),
            ),
            (
                so3_fixture(),
                sphere_start,
                Curve::polyline(
                    0,
                    &[dvector![0.0, 0.0], dvector![0.8, 0.5], dvector![-0.3, 1.0]],
                ),
            ),
        ];
        for ((sys, sp), u0, curve) in cases {
            let a = transport_direct(&sys, &sp, &curve, 1.0, &u0, &opts).unwrap();
            let b = transport_group(&sys, &sp, &curve, 1.0, &u0, &opts).unwrap();
            let sup = a.sup_distance(&b);
            assert!(sup < TRANSPORT_AGREEMENT_TOL, "sup distance {sup}");
        }
    }

    #[test]
    fn incomplete_restriction_escapes_at_linear_hit_time() {
        // Unit-speed translation Christoffel on the fiber (0, 1) from 0.5.
        let rep = Representation::new(
            LieAlgebra::abelian(1),
            vec![AffineField::new(DMatrix::zeros(1, 1), dvector![1.0])],
        )
        .unwrap();
        let sys = SystemSpec {
            base: BaseAtlas::single_chart(dvector![-60.0], dvector![60.0]).unwrap(),
            fiber: FiberModel::euclidean(1),
            algebra: LieAlgebra::abelian(1),
            actions: vec![rep],
            group_kind: GroupKind::AffineAug,
            blowup_bound: 1e8,
        };
        let restricted = sys
            .restrict_to_subbundle(Restriction::Box {
                lo: dvector![0.0],
                hi: dvector![1.0],
            })
            .unwrap();
        let sp = Splitting {
            charts: vec![SplittingChart {
                comps: vec![PolyMap::constant(1, &dvector![1.0])],
            }],
        };
        let seg = Curve::polyline(0, &[dvector![0.0], dvector![1.0]]);
        let err = transport_direct(
            &restricted,
            &sp,
            &seg,
            1.0,
            &dvector![0.5],
            &TransportOptions::default(),
        )
        .unwrap_err();
        match err {
            Error::EscapeDetected { t_escape, .. } => {
                assert!((t_escape - 0.5).abs() < 1e-3, "t_escape {t_escape}")
            }
            other => panic!("expected escape, got {other:?}"),
        }
        // The unrestricted parent never escapes, even over long curves.
        let long = Curve::polyline(0, &[dvector![0.0], dvector![50.0], dvector![-50.0]]);
        let ok = transport_direct(
            &sys,
            &sp,
            &long,
            1.0,
            &dvector![0.5],
            &TransportOptions::default(),
        );
        assert!(ok.is_ok(), "complete parent must transport globally");
    }

    #[test]
    fn reparametrization_and_concatenation_invariance() {
        let (sys, sp) = abelian_fixture();
        let opts = TransportOptions::with_steps(1500);
        let u0 = dvector![1.0, 0.0];
        let c = Curve::polyline(
            0,
            &[dvector![0.0, 0.0], dvector![1.0, 0.2], dvector![0.5, 1.3]],
        );
        let direct = transport_direct(&sys, &sp, &c, 1.0, &u0, &opts).unwrap();
        let repar = transport_direct(&sys, &sp, &c.reparametrized(), 1.0, &u0, &opts).unwrap();
        assert!(
            (direct.end_fiber() - repar.end_fiber()).norm() < TRANSPORT_AGREEMENT_TOL,
            "reparametrization changed the endpoint"
        );

        let c1 = Curve::polyline(0, &[dvector![0.0, 0.0], dvector![1.0, 0.2]]);
        let c2 = Curve::polyline(0, &[dvector![1.0, 0.2], dvector![0.5, 1.3]]);
        let mid = transport_direct(&sys, &sp, &c1, 1.0, &u0, &opts).unwrap();
        let second = transport_direct(&sys, &sp, &c2, 1.0, mid.end_fiber(), &opts).unwrap();
        let joined =
            transport_direct(&sys, &sp, &Curve::concat(&[c1, c2]), 1.0, &u0, &opts).unwrap();
        assert!(
            (joined.end_fiber() - second.end_fiber()).norm() < TRANSPORT_AGREEMENT_TOL,
            "concatenation is not composition"
        );
    }

    #[test]
    fn curvature_formula_hand_values() {
        let (sys, sp) = abelian_fixture();
        let ex = dvector![1.0, 0.0];
        let ey = dvector![0.0, 1.0];
        for x in [dvector![0.0, 0.0], dvector![2.0, -1.0]] {
            let c = curvature_formula(&sys, &sp, 0, &x, &ex, &ey).unwrap();
            assert_relative_eq!(c.v[0], 1.0, epsilon = 1e-14);
            // Antisymmetry and the diagonal.
            let c_swap = curvature_formula(&sys, &sp, 0, &x, &ey, &ex).unwrap();
            assert_relative_eq!(c_swap.v[0], -1.0, epsilon = 1e-14);
            let c_diag = curvature_formula(&sys, &sp, 0, &x, &ex, &ex).unwrap();
            assert_relative_eq!(c_diag.v.amax(), 0.0, epsilon = 1e-14);
        }
        // Constant splitting on abelian V is flat.
        let flat = Splitting {
            charts: vec![SplittingChart {
                comps: vec![
                    PolyMap::constant(2, &dvector![0.7]),
                    PolyMap::constant(2, &dvector![-0.3]),
                ],
            }],
        };
        let c = curvature_formula(&sys, &flat, 0, &dvector![1.0, 1.0], &ex, &ey).unwrap();
        assert_relative_eq!(c.v.amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn so3_curvature_formula_matches_hand_computation() {
        let (sys, sp) = so3_fixture();
        let x = dvector![0.7, -0.4];
        let c =
            curvature_formula(&sys, &sp, 0, &x, &dvector![1.0, 0.0], &dvector![0.0, 1.0]).unwrap();
        // d sigma = e2 - e1; [sigma_x, sigma_y] = x y [e1, e2] = x y e3.
        let expect = dvector![-1.0, 1.0, 0.7 * -0.4];
        assert_relative_eq!((c.v - expect).amax(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn curvature_routes_agree_on_fixtures_and_random_splittings() {
        let (sys, sp) = abelian_fixture();
        let e = dvector![1.0, 0.0];
        let x = dvector![0.4, 0.2];
        let ex = dvector![1.0, 0.0];
        let ey = dvector![0.0, 1.0];
        let via_bracket = curvature_bracket(&sys, &sp, 0, &x, &ex, &ey, &e, 1.0).unwrap();
        let via_formula = curvature_formula(&sys, &sp, 0, &x, &ex, &ey)
            .unwrap()
            .as_field
            .eval(&e);
        assert!((via_bracket.clone() - dvector![0.0, 1.0]).amax() < 1e-5);
        assert!((via_bracket - via_formula).amax() < CURVATURE_AGREEMENT_TOL);

        // Randomized polynomial splittings, both fixtures.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for draw in 0..10 {
            let (sys, _) = if draw % 2 == 0 {
                abelian_fixture()
            } else {
                so3_fixture()
            };
            let sp = Splitting::random_polynomial(&sys, 0.6, &mut rng);
            let points = sys.fiber.sample_points(4, draw as u64);
            for e in &points {
                let x = dvector![rng.gen_range(-0.8..0.8f64), rng.gen_range(-0.8..0.8f64)];
                let via_bracket = curvature_bracket(&sys, &sp, 0, &x, &ex, &ey, e, 1.0).unwrap();
                let via_formula = curvature_formula(&sys, &sp, 0, &x, &ex, &ey)
                    .unwrap()
                    .as_field
                    .eval(e);
                let res = (via_bracket - via_formula).amax();
                assert!(res < CURVATURE_AGREEMENT_TOL, "draw {draw}: residual {res}");
            }
        }
    }

    #[test]
    fn holonomy_algebra_ranks() {
        // Flat: rank 0.
        let (sys, _) = abelian_fixture();
        let flat = Splitting::zero(&sys);
        let paths = vec![Curve::polyline(
            0,
            &[dvector![0.0, 0.0], dvector![1.0, 0.5]],
        )];
        let est =
            holonomy_algebra_sample(&sys, &flat, &paths, &TransportOptions::default()).unwrap();
        assert_eq!(est.rank, 0);

        // Abelian area scenario: rank 1, basis along e1.
        let (sys, sp) = abelian_fixture();
        let est =
            holonomy_algebra_sample(&sys, &sp, &paths, &TransportOptions::default()).unwrap();
        assert_eq!(est.rank, 1);
        assert_relative_eq!(est.basis[0][0].abs(), 1.0, epsilon = 1e-12);

        // so(3) with the generic splitting: rank 3 from varied endpoints.
        let (sys, sp) = so3_fixture();
        let mut paths = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let end = dvector![rng.gen_range(-1.2..1.2f64), rng.gen_range(-1.2..1.2f64)];
            let mid = dvector![rng.gen_range(-1.2..1.2f64), rng.gen_range(-1.2..1.2f64)];
            paths.push(Curve::polyline(0, &[dvector![0.0, 0.0], mid, end]));
        }
        let est =
            holonomy_algebra_sample(&sys, &sp, &paths, &TransportOptions::with_steps(400)).unwrap();
        assert_eq!(est.rank, 3);
    }

    #[test]
    fn ad_pullback_two_routes_agree() {
        // Abelian: the pullback equals the field itself (trivial adjoint).
        let (sys, sp) = abelian_fixture();
        let c = Curve::polyline(0, &[dvector![0.0, 0.0], dvector![1.0, 0.8]]);
        let res = ad_pullback_check(
            &sys,
            &sp,
            &c,
            &dvector![1.0],
            &[0.5, 1.0],
            3,
            &TransportOptions::default(),
        )
        .unwrap();
        assert!(res < 1e-6, "abelian residual {res}");

        let (sys, sp) = so3_fixture();
        let c = Curve::polyline(
            0,
            &[dvector![0.0, 0.0], dvector![0.9, 0.4], dvector![0.2, 1.1]],
        );
        let res = ad_pullback_check(
            &sys,
            &sp,
            &c,
            &dvector![0.3, -0.7, 0.5],
            &[0.4, 1.0],
            3,
            &TransportOptions::default(),
        )
        .unwrap();
        assert!(res < AD_PULLBACK_TOL, "so3 residual {res}");
    }

    #[test]
    fn claim2_projection_residuals() {
        let t_grid = [0.04, 0.12, 0.2];
        let s_grid = [0.04, 0.12, 0.2];
        let ex = dvector![1.0, 0.0];
        let ey = dvector![0.0, 1.0];

        let (sys, sp) = abelian_fixture();
        let res = claim2_check(
            &sys,
            &sp,
            0,
            &dvector![0.2, 0.1],
            &ex,
            &ey,
            &t_grid,
            &s_grid,
            4,
            400,
        )
        .unwrap();
        assert!(res < 1e-6, "abelian claim2 residual {res}");

        let (sys, sp) = so3_fixture();
        let res = claim2_check(
            &sys,
            &sp,
            0,
            &dvector![0.2, 0.1],
            &ex,
            &ey,
            &t_grid,
            &s_grid,
            4,
            400,
        )
        .unwrap();
        assert!(res < CLAIM2_TOL, "so3 claim2 residual {res}");
    }

    #[test]
    fn small_loop_limit_recovers_curvature() {
        let opts = TransportOptions::with_steps(1200);
        let eps = [0.2, 0.1, 0.05];

        // Flat splitting: all per-eps values vanish.
        let (sys, _) = abelian_fixture();
        let flat = Splitting::zero(&sys);
        let r = small_loop_limit(&sys, &flat, 0, &dvector![0.0, 0.0], 0, 1, &eps, &opts).unwrap();
        assert!(r.extrapolated.amax() < 1e-12);

        // Abelian: coefficient 1.0 at the origin (exact area law).
        let (sys, sp) = abelian_fixture();
        let r = small_loop_limit(&sys, &sp, 0, &dvector![0.0, 0.0], 0, 1, &eps, &opts).unwrap();
        assert!(
            (r.extrapolated[0] - 1.0).abs() < SMALL_LOOP_TOL,
            "{:?}",
            r.extrapolated
        );

        // so(3): matches the curvature formula after extrapolation.
        let (sys, sp) = so3_fixture();
        let x = dvector![0.4, -0.3];
        let r = small_loop_limit(&sys, &sp, 0, &x, 0, 1, &eps, &opts).unwrap();
        let expect =
            curvature_formula(&sys, &sp, 0, &x, &dvector![1.0, 0.0], &dvector![0.0, 1.0])
                .unwrap()
                .v;
        let err = (r.extrapolated.clone() - &expect).amax();
        assert!(err < SMALL_LOOP_TOL, "extrapolated error {err}");
        // Observed order >= 1: errors shrink at least linearly in eps.
        let e0 = (r.per_eps[0].1.clone() - &expect).norm();
        let e2 = (r.per_eps[2].1.clone() - &expect).norm();
        let order = (e0 / e2).ln() / (eps[0] / eps[2]).ln();
        assert!(order >= 1.0, "observed order {order}");
    }

    #[test]
    fn trace_csv_has_expected_columns() {
        let (sys, sp) = abelian_fixture();
        let r = transport_group(
            &sys,
            &sp,
            &unit_square(0),
            1.0,
            &dvector![1.0, 0.0],
            &TransportOptions::with_steps(16),
        )
        .unwrap();
        let mut buf = Vec::new();
        r.write_trace(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,base0,base1,fiber0,fiber1,g00,g01,g10,g11"
        );
        assert_eq!(lines.count(), r.times.len());
    }
}
