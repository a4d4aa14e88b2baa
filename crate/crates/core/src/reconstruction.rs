//! Reconstruction of a principal cocycle from parallel transport: a bundle
//! atlas built from radial transports, the group-valued transition cocycle it
//! induces, the consistency checks tying the two together, and the projection
//! of Christoffel fields onto the fundamental-field algebra.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::connection::{christoffel, transport_group, Splitting, TransportOptions};
use crate::curve::{Curve, PathFn};
use crate::error::{Error, Result};
use crate::geometry::VectorField;
use crate::lie::{lstsq, GroupElement};
use crate::system::{BaseAtlas, BasePoint, OverlapComponent, SystemSpec, TransitionMap};

pub const COCYCLE_SAMPLE_TOL: f64 = 1e-6;
pub const ATLAS_CONSISTENCY_TOL: f64 = 1e-6;
pub const ROUND_TRIP_TOL: f64 = 1e-6;
pub const PROJECTION_TOL: f64 = 1e-6;
/// Default sample count per overlap component.
pub const DEFAULT_OVERLAP_SAMPLES: usize = 16;

/// Radial atlas data: the base point (center of its chart) and one curve per
/// chart from the base point to that chart's center.
#[derive(Clone, Debug)]
pub struct RadialAtlas {
    pub base_point: BasePoint,
    pub center_curves: Vec<Curve>,
}

impl RadialAtlas {
    /// Base point must be a chart center and each center curve must run from
    /// it to the corresponding chart's center.
    pub fn validate(&self, sys: &SystemSpec) -> Result<()> {
        if self.base_point.coords.amax() > 1e-12 {
            return Err(Error::validation(
                "radial_base",
                "the base point must be the center of its chart",
            ));
        }
        if self.center_curves.len() != sys.base.charts.len() {
            return Err(Error::validation(
                "radial_charts",
                "one center curve per chart required",
            ));
        }
        for (alpha, c) in self.center_curves.iter().enumerate() {
            let (c0, x0) = c.eval(0.0);
            if c0 != self.base_point.chart || (x0 - &self.base_point.coords).amax() > 1e-12 {
                return Err(Error::validation(
                    "radial_start",
                    format!("center curve {alpha} does not start at the base point"),
                ));
            }
            let (c1, x1) = c.eval(1.0);
            if c1 != alpha || x1.amax() > 1e-12 {
                return Err(Error::validation(
                    "radial_end",
                    format!("center curve {alpha} does not end at chart {alpha}'s center"),
                ));
            }
        }
        Ok(())
    }

    /// The canonical radial atlas of a single-chart system.
    pub fn single_chart(sys: &SystemSpec) -> Result<RadialAtlas> {
        if sys.base.charts.len() != 1 {
            return Err(Error::validation(
                "radial_charts",
                "single-chart constructor on a multi-chart atlas",
            ));
        }
        let m = sys.base_dim();
        Ok(RadialAtlas {
            base_point: BasePoint::new(0, DVector::zeros(m)),
            center_curves: vec![Curve::single(
                0,
                PathFn::Point {
                    at: DVector::zeros(m),
                },
            )],
        })
    }
}

/// The radial curve of chart `alpha` through `x`: `t -> t * u_alpha(x)` in
/// chart coordinates. Stays inside the chart box because boxes contain the
/// origin.
pub fn radial_curve(sys: &SystemSpec, chart: usize, x: &DVector<f64>) -> Result<Curve> {
    sys.require_chart_point(chart, x)?;
    Ok(Curve::single(chart, PathFn::Radial { target: x.clone() }))
}

/// The fiber map of the bundle-atlas chart at `x`: the composite transport
/// along the center curve of `alpha` followed by the radial curve to `x`,
/// as a group element. At the chart center the radial leg is constant and
/// only the center transport remains.
pub fn bundle_chart_element(
    sys: &SystemSpec,
    sp: &Splitting,
    ratlas: &RadialAtlas,
    chart: usize,
    x: &DVector<f64>,
    opts: &TransportOptions,
) -> Result<GroupElement> {
    let composite = Curve::concat(&[
        ratlas.center_curves[chart].clone(),
        radial_curve(sys, chart, x)?,
    ]);
    let u0 = sys.fiber.sample_points(1, 3).pop().expect("fiber sample");
    let result = transport_group(sys, sp, &composite, 1.0, &u0, opts)?;
    Ok(result.end_group().expect("group transport").clone())
}

/// One sampled transition value: coordinates in the `from` chart and the
/// group element mapping `from`-chart fiber data to `to`-chart fiber data in
/// the reconstructed atlas.
#[derive(Clone, Debug)]
pub struct CocycleSample {
    pub coords: DVector<f64>,
    pub elem: GroupElement,
}

/// Sampled reconstructed cocycle, keyed by `(from, to)` like the system's
/// own transitions.
#[derive(Clone, Debug)]
pub struct Cocycle {
    pub entries: BTreeMap<(usize, usize), Vec<CocycleSample>>,
    pub worst_residual: f64,
}

/// The reconstructed transition at one point, computed through the
/// concatenated four-leg loop
/// `c_to . c_to^x . (c_from^x)^(-1) . (c_from)^(-1)`
/// reparametrized over the unit interval (transport is reparametrization
/// invariant, so the normalization is harmless).
pub fn reconstructed_transition(
    sys: &SystemSpec,
    sp: &Splitting,
    ratlas: &RadialAtlas,
    from: usize,
    to: usize,
    x_from: &DVector<f64>,
    opts: &TransportOptions,
) -> Result<GroupElement> {
    let x_to = sys
        .base
        .to_chart(&BasePoint::new(from, x_from.clone()), to)?;
    let loop_curve = Curve::concat(&[
        ratlas.center_curves[from].clone(),
        radial_curve(sys, from, x_from)?,
        radial_curve(sys, to, &x_to.coords)?.reverse(),
        ratlas.center_curves[to].clone().reverse(),
    ]);
    let u0 = sys.fiber.sample_points(1, 3).pop().expect("fiber sample");
    let result = transport_group(sys, sp, &loop_curve, 1.0, &u0, opts)?;
    Ok(result.end_group().expect("group transport").clone())
}

/// Build the sampled cocycle over every overlap component and verify the
/// cocycle identities: diagonal triviality, pairwise inverses and sampled
/// triple products. The worst violation is reported.
pub fn build_cocycle(
    sys: &SystemSpec,
    sp: &Splitting,
    ratlas: &RadialAtlas,
    samples_per_component: usize,
    opts: &TransportOptions,
) -> Result<Cocycle> {
    ratlas.validate(sys)?;
    let n = sys.group_matrix_dim();
    let per_dim = (samples_per_component as f64)
        .powf(1.0 / sys.base_dim() as f64)
        .round()
        .max(2.0) as usize;
    let mut entries: BTreeMap<(usize, usize), Vec<CocycleSample>> = BTreeMap::new();
    let mut worst = 0.0f64;
    let mut worst_index = 0usize;
    let mut count = 0usize;
    for (&(from, to), comps) in &sys.base.overlaps {
        let mut list = Vec::new();
        for comp in comps {
            for x in comp.domain.sample_grid(per_dim, 0.1) {
                let fwd = reconstructed_transition(sys, sp, ratlas, from, to, &x, opts)?;
                // Diagonal triviality at the same point.
                let diag = reconstructed_transition(sys, sp, ratlas, from, from, &x, opts)?;
                let diag_res = (&diag.mat - DMatrix::identity(n, n)).amax();
                // Pairwise inverse through the reverse overlap.
                let y = sys.base.to_chart(&BasePoint::new(from, x.clone()), to)?;
                let back = reconstructed_transition(sys, sp, ratlas, to, from, &y.coords, opts)?;
                let pair_res = (back.mat * &fwd.mat - DMatrix::identity(n, n)).amax();
                let res = diag_res.max(pair_res);
                if res > worst {
                    worst = res;
                    worst_index = count;
                }
                count += 1;
                list.push(CocycleSample {
                    coords: x,
                    elem: fwd,
                });
            }
        }
        entries.insert((from, to), list);
    }
    // Triple products on sampled points covered by three charts.
    for (&(a, b), comps) in &sys.base.overlaps {
        for comp in comps {
            for x in comp.domain.sample_grid(2, 0.15) {
                for c in 0..sys.base.charts.len() {
                    if c == a || c == b {
                        continue;
                    }
                    let pa = BasePoint::new(a, x.clone());
                    let (Ok(pb), Ok(pc)) =
                        (sys.base.to_chart(&pa, b), sys.base.to_chart(&pa, c))
                    else {
                        continue;
                    };
                    let g_ab = reconstructed_transition(sys, sp, ratlas, a, b, &x, opts)?;
                    let g_bc =
                        reconstructed_transition(sys, sp, ratlas, b, c, &pb.coords, opts)?;
                    let g_ca =
                        reconstructed_transition(sys, sp, ratlas, c, a, &pc.coords, opts)?;
                    let res =
                        (g_ca.mat * g_bc.mat * &g_ab.mat - DMatrix::identity(n, n)).amax();
                    if res > worst {
                        worst = res;
                        worst_index = count;
                    }
                    count += 1;
                }
            }
        }
    }
    if worst > COCYCLE_SAMPLE_TOL {
        return Err(Error::CocycleViolation {
            residual: worst,
            index: worst_index,
        });
    }
    Ok(Cocycle {
        entries,
        worst_residual: worst,
    })
}

/// The step-4 consistency identity: the transition computed from the two
/// bundle-atlas elements and the original overlap transition must equal the
/// concatenated-loop element. Worst residual over sampled points.
pub fn atlas_consistency_residual(
    sys: &SystemSpec,
    sp: &Splitting,
    ratlas: &RadialAtlas,
    opts: &TransportOptions,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for (&(from, to), comps) in &sys.base.overlaps {
        for comp in comps {
            for x in comp.domain.sample_grid(2, 0.1) {
                let via_loop = reconstructed_transition(sys, sp, ratlas, from, to, &x, opts)?;
                let a_from = bundle_chart_element(sys, sp, ratlas, from, &x, opts)?;
                let y = sys.base.to_chart(&BasePoint::new(from, x.clone()), to)?;
                let a_to = bundle_chart_element(sys, sp, ratlas, to, &y.coords, opts)?;
                let t_orig = sys.transition_element(from, to, &x)?;
                let assembled = a_to.inverse()?.mat * t_orig.mat * a_from.mat;
                worst = worst.max((assembled - &via_loop.mat).amax());
            }
        }
    }
    Ok(worst)
}

/// Least-squares projection of the Christoffel field at `(x, xi)` onto the
/// span of the fundamental fields, sampled over the fiber. For splittings of
/// the system this is exact by construction and returns the
/// principal-connection coefficient `sigma(xi)`; fields outside the algebra
/// trip the residual gate.
pub fn fundamental_field_projection(
    sys: &SystemSpec,
    sp: &Splitting,
    chart: usize,
    x: &DVector<f64>,
    xi: &DVector<f64>,
    fiber_samples: usize,
    seed: u64,
) -> Result<(DVector<f64>, f64)> {
    let field = christoffel(sys, sp, chart, x, xi)?;
    project_field_onto_algebra(sys, chart, &field, fiber_samples, seed)
}

/// Shared projection helper: sample `field` over the fiber and solve the
/// stacked least-squares system against the fundamental-field basis.
pub fn project_field_onto_algebra(
    sys: &SystemSpec,
    chart: usize,
    field: &dyn VectorField,
    fiber_samples: usize,
    seed: u64,
) -> Result<(DVector<f64>, f64)> {
    let d = sys.algebra_dim();
    let k = sys.fiber_dim();
    let points = sys.fiber.sample_points(fiber_samples.max(d + 1), seed);
    let mut a = DMatrix::zeros(points.len() * k, d);
    let mut b = DVector::zeros(points.len() * k);
    for (r, p) in points.iter().enumerate() {
        for i in 0..d {
            let mut ei = DVector::zeros(d);
            ei[i] = 1.0;
            let val = sys.fundamental(chart, &ei)?.eval(p);
            a.view_mut((r * k, i), (k, 1)).copy_from(&val);
        }
        b.rows_mut(r * k, k).copy_from(&field.eval(p));
    }
    let coeffs = lstsq(&a, &b);
    let residual = (&a * &coeffs - &b).amax();
    if residual > PROJECTION_TOL {
        return Err(Error::BasisProjectionError {
            residual,
            tolerance: PROJECTION_TOL,
        });
    }
    Ok((coeffs, residual))
}

/// Assemble the associated system glued by the reconstructed cocycle: the
/// same base atlas and action, with fiber transitions evaluated on demand
/// through transports of the original scenario.
pub fn reconstructed_system(
    sys: &SystemSpec,
    sp: &Splitting,
    ratlas: &RadialAtlas,
    opts: &TransportOptions,
) -> Result<SystemSpec> {
    ratlas.validate(sys)?;
    let shared = Arc::new((sys.clone(), sp.clone(), ratlas.clone(), *opts));
    let mut overlaps: BTreeMap<(usize, usize), Vec<OverlapComponent>> = BTreeMap::new();
    for (&(from, to), comps) in &sys.base.overlaps {
        let list = comps
            .iter()
            .map(|comp| {
                let ctx = Arc::clone(&shared);
                OverlapComponent {
                    domain: comp.domain.clone(),
                    base_map: comp.base_map.clone(),
                    fiber: TransitionMap::Computed(Arc::new(move |x: &DVector<f64>| {
                        let (sys, sp, ratlas, opts) = &*ctx;
                        reconstructed_transition(sys, sp, ratlas, from, to, x, opts)
                    })),
                }
            })
            .collect();
        overlaps.insert((from, to), list);
    }
    Ok(SystemSpec {
        base: BaseAtlas {
            charts: sys.base.charts.clone(),
            overlaps,
        },
        fiber: sys.fiber.clone(),
        algebra: sys.algebra.clone(),
        actions: sys.actions.clone(),
        group_kind: sys.group_kind,
        blowup_bound: sys.blowup_bound,
    })
}

/// Round trip of the reconstruction on a flat scenario (zero splitting): the
/// bundle-atlas elements intertwine transports of the original system with
/// transports of the reconstructed one,
/// `Pt_orig(c) = A_to(end) Pt_new(c) A_from(start)^(-1)`.
/// Returns the worst group-element residual over the given curves.
pub fn round_trip_residual(
    sys: &SystemSpec,
    sp: &Splitting,
    ratlas: &RadialAtlas,
    curves: &[&Curve],
    opts: &TransportOptions,
) -> Result<f64> {
    if !sp.is_zero() {
        return Err(Error::validation(
            "round_trip_flat",
            "the transport round trip compares zero-splitting connections; \
             the splitting must be zero",
        ));
    }
    let new_sys = reconstructed_system(sys, sp, ratlas, opts)?;
    let new_sp = Splitting::zero(&new_sys);
    let u0 = sys.fiber.sample_points(1, 5).pop().expect("fiber sample");
    let mut worst = 0.0f64;
    for curve in curves {
        let orig = transport_group(sys, sp, curve, 1.0, &u0, opts)?;
        let new = transport_group(&new_sys, &new_sp, curve, 1.0, &u0, opts)?;
        let (sc, scoords) = curve.eval(0.0);
        let (ec, ecoords_raw) = curve.eval(1.0);
        // The end base point in the chart the transports finished in.
        let end_base = orig.end_base().clone();
        let (ec, ecoords) = if end_base.chart == ec {
            (ec, ecoords_raw)
        } else {
            (end_base.chart, end_base.coords.clone())
        };
        let a_start = bundle_chart_element(sys, sp, ratlas, sc, &scoords, opts)?;
        let a_end = bundle_chart_element(sys, sp, ratlas, ec, &ecoords, opts)?;
        let lhs = orig.end_group().expect("group transport").mat.clone();
        let rhs =
            a_end.mat * &new.end_group().expect("group transport").mat * a_start.inverse()?.mat;
        worst = worst.max((lhs - rhs).amax());
    }
    Ok(worst)
}

/// JSON report of a reconstruction run.
#[derive(Serialize)]
pub struct ReconstructionReport {
    pub scenario: String,
    pub worst_cocycle_residual: f64,
    pub atlas_consistency_residual: f64,
    pub overlaps: Vec<OverlapReport>,
    pub projection_residuals: Vec<ProjectionReport>,
}

#[derive(Serialize)]
pub struct OverlapReport {
    pub from: usize,
    pub to: usize,
    pub samples: Vec<SampleReport>,
}

#[derive(Serialize)]
pub struct SampleReport {
    pub coords: Vec<f64>,
    pub element: Vec<Vec<f64>>,
}

#[derive(Serialize)]
pub struct ProjectionReport {
    pub chart: usize,
    pub coords: Vec<f64>,
    pub direction: usize,
    pub residual: f64,
}

/// Run the full reconstruction battery over a scenario and assemble the
/// report emitted by the command-line interface.
pub fn reconstruction_report(
    name: &str,
    sys: &SystemSpec,
    sp: &Splitting,
    ratlas: &RadialAtlas,
    samples_per_component: usize,
    opts: &TransportOptions,
) -> Result<ReconstructionReport> {
    let cocycle = build_cocycle(sys, sp, ratlas, samples_per_component, opts)?;
    let atlas_res = atlas_consistency_residual(sys, sp, ratlas, opts)?;
    let overlaps = cocycle
        .entries
        .iter()
        .map(|(&(from, to), samples)| OverlapReport {
            from,
            to,
            samples: samples
                .iter()
                .map(|s| SampleReport {
                    coords: s.coords.iter().copied().collect(),
                    element: (0..s.elem.mat.nrows())
                        .map(|r| (0..s.elem.mat.ncols()).map(|c| s.elem.mat[(r, c)]).collect())
                        .collect(),
                })
                .collect(),
        })
        .collect();
    let mut projections = Vec::new();
    for chart in 0..sys.base.charts.len() {
        for x in sys.base.charts[chart].sample_grid(2, 0.4) {
            for dir in 0..sys.base_dim() {
                let mut xi = DVector::zeros(sys.base_dim());
                xi[dir] = 1.0;
                let (_, residual) =
                    fundamental_field_projection(sys, sp, chart, &x, &xi, 8, 11)?;
                projections.push(ProjectionReport {
                    chart,
                    coords: x.iter().copied().collect(),
                    direction: dir,
                    residual,
                });
            }
        }
    }
    Ok(ReconstructionReport {
        scenario: name.to_string(),
        worst_cocycle_residual: cocycle.worst_residual,
        atlas_consistency_residual: atlas_res,
        overlaps,
        projection_residuals: projections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connection::holonomy_loop;
    use crate::geometry::FnField;
    use crate::scenario::load_scenario;
    use nalgebra::dvector;

    fn circle_radial_atlas() -> RadialAtlas {
        load_scenario("circle-base-winding")
            .unwrap()
            .radial_atlas()
            .unwrap()
    }

    #[test]
    fn bundle_atlas_reduces_to_center_transport_at_the_center() {
        let sc = load_scenario("abelian-area").unwrap();
        let ratlas = RadialAtlas::single_chart(&sc.system).unwrap();
        let opts = TransportOptions::with_steps(400);
        // At the chart center both legs are constant: the identity.
        let g = bundle_chart_element(
            &sc.system,
            &sc.splitting,
            &ratlas,
            0,
            &dvector![0.0, 0.0],
            &opts,
        )
        .unwrap();
        assert!((&g.mat - DMatrix::identity(2, 2)).amax() < 1e-12);

        // Flat splitting: identity everywhere.
        let flat = Splitting::zero(&sc.system);
        let g = bundle_chart_element(&sc.system, &flat, &ratlas, 0, &dvector![1.3, -0.7], &opts)
            .unwrap();
        assert!((&g.mat - DMatrix::identity(2, 2)).amax() < 1e-12);

        // Abelian scenario: rotation by the line integral of sigma along the
        // radial line to x, which for sigma = x dy along t -> t(x1, x2) is
        // the quadrature integral of t x1 x2 ... dt = x1 x2 / 2.
        let x = dvector![1.2, 0.8];
        let g = bundle_chart_element(&sc.system, &sc.splitting, &ratlas, 0, &x, &opts).unwrap();
        let h = g.rotation_angle().unwrap();
        let expect = -(x[0] * x[1]) / 2.0;
        // Fiber map is the inverse of the left-invariant solution; the sign
        // convention is pinned by the abelian loop oracle elsewhere. The
        // magnitude is the quadrature value.
        assert!(
            (h.abs() - expect.abs()).abs() < 1e-8,
            "angle {h}, quadrature {expect}"
        );
    }

    #[test]
    fn trivial_cocycle_for_single_chart_cover() {
        let sc = load_scenario("abelian-area").unwrap();
        let ratlas = RadialAtlas::single_chart(&sc.system).unwrap();
        let cocycle = build_cocycle(
            &sc.system,
            &sc.splitting,
            &ratlas,
            4,
            &TransportOptions::with_steps(200),
        )
        .unwrap();
        assert!(cocycle.entries.is_empty(), "no overlaps, no entries");
        assert_eq!(cocycle.worst_residual, 0.0);
    }

    #[test]
    fn circle_cocycle_satisfies_identities_and_reproduces_holonomy() {
        let sc = load_scenario("circle-base-winding").unwrap();
        let ratlas = circle_radial_atlas();
        let opts = TransportOptions::with_steps(200);
        let cocycle =
            build_cocycle(&sc.system, &sc.splitting, &ratlas, 4, &opts).unwrap();
        assert!(
            cocycle.worst_residual < COCYCLE_SAMPLE_TOL,
            "worst {}",
            cocycle.worst_residual
        );

        // Atlas consistency: loop route equals assembled route.
        let res = atlas_consistency_residual(&sc.system, &sc.splitting, &ratlas, &opts).unwrap();
        assert!(res < ATLAS_CONSISTENCY_TOL, "consistency residual {res}");

        // The reconstructed system reproduces the loop holonomy.
        let new_sys = reconstructed_system(&sc.system, &sc.splitting, &ratlas, &opts).unwrap();
        let new_sp = Splitting::zero(&new_sys);
        let u0 = dvector![1.0, 0.0];
        let (_, end_orig) = holonomy_loop(
            &sc.system,
            &sc.splitting,
            sc.curve("around").unwrap(),
            &u0,
            &opts,
        )
        .unwrap();
        let (_, end_new) = holonomy_loop(
            &new_sys,
            &new_sp,
            sc.curve("around").unwrap(),
            &u0,
            &opts,
        )
        .unwrap();
        let a0 = end_orig.unwrap().rotation_angle().unwrap();
        let a1 = end_new.unwrap().rotation_angle().unwrap();
        assert!(
            (a0 - a1).abs() < ROUND_TRIP_TOL,
            "holonomy changed: {a0} vs {a1}"
        );
    }

    #[test]
    fn round_trip_transports_agree_under_the_atlas_conjugation() {
        let sc = load_scenario("circle-base-winding").unwrap();
        let ratlas = circle_radial_atlas();
        let opts = TransportOptions::with_steps(200);
        let ca = sc.curve("cross-a").unwrap();
        let cb = sc.curve("cross-b").unwrap();
        let res = round_trip_residual(
            &sc.system,
            &sc.splitting,
            &ratlas,
            &[ca, cb],
            &opts,
        )
        .unwrap();
        assert!(res < ROUND_TRIP_TOL, "round trip residual {res}");
    }

    #[test]
    fn fundamental_projection_recovers_splitting_values() {
        let sc = load_scenario("abelian-area").unwrap();
        // tau = 0: zero coefficient, zero residual.
        let zero = Splitting::zero(&sc.system);
        let (v, res) =
            fundamental_field_projection(&sc.system, &zero, 0, &dvector![1.0, 0.5], &dvector![0.0, 1.0], 6, 2)
                .unwrap();
        assert!(v.amax() < 1e-12 && res < 1e-12);

        // Abelian scenario at x = (2, 0), xi = d/dy: coefficient 2 e1.
        let (v, res) = fundamental_field_projection(
            &sc.system,
            &sc.splitting,
            0,
            &dvector![2.0, 0.0],
            &dvector![0.0, 1.0],
            6,
            2,
        )
        .unwrap();
        assert!((v[0] - 2.0).abs() < 1e-10, "coefficient {v}");
        assert!(res < 1e-10, "residual {res}");

        // so(3) splittings project exactly as well.
        let so3 = load_scenario("so3-sphere").unwrap();
        let (v, res) = fundamental_field_projection(
            &so3.system,
            &so3.splitting,
            0,
            &dvector![0.7, -0.3],
            &dvector![1.0, 0.0],
            8,
            2,
        )
        .unwrap();
        let expect = so3.splitting.apply(0, &dvector![0.7, -0.3], &dvector![1.0, 0.0]);
        assert!((v - expect).amax() < 1e-10 && res < 1e-10);
    }

    #[test]
    fn adversarial_field_trips_the_projection_gate() {
        // s -> (s1^2, 0) is not a rotation field: the projection must refuse.
        let sc = load_scenario("abelian-area").unwrap();
        let field = FnField {
            dim: 2,
            f: |s: &DVector<f64>| dvector![s[0] * s[0], 0.0],
        };
        match project_field_onto_algebra(&sc.system, 0, &field, 8, 3) {
            Err(Error::BasisProjectionError { .. }) => {}
            other => panic!("expected projection failure, got {other:?}"),
        }
    }

    #[test]
    fn reconstruction_report_serializes() {
        let sc = load_scenario("circle-base-winding").unwrap();
        let ratlas = circle_radial_atlas();
        let report = reconstruction_report(
            &sc.name,
            &sc.system,
            &sc.splitting,
            &ratlas,
            4,
            &TransportOptions::with_steps(150),
        )
        .unwrap();
        let json = serde_json::to_string_pretty(&report).unwrap();
        assert!(json.contains("worst_cocycle_residual"));
        assert!(report.worst_cocycle_residual < COCYCLE_SAMPLE_TOL);
    }
}
