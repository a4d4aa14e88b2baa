//! The bundle of connections over the base, the fibered-product isomorphism
//! that makes its tangent spaces vector bundles, the extended system on the
//! product with the fiber, and the universal connection together with its
//! relatedness and transport identities.
//!
//! Points of the bundle of connections are chart-wise `d x m` matrices: the
//! splitting value at a base point, in the affine coordinates whose origin is
//! the zero splitting of the chart.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::connection::{Splitting, TransportOptions, TransportResult};
use crate::curve::Curve;
use crate::error::{Error, Result};
use crate::geometry::{integrate_flow_trace, FnTimeField, VectorField};
use crate::system::{BasePoint, SystemSpec};

pub const KAPPA_ROUNDTRIP_TOL: f64 = 1e-14;
pub const RELATEDNESS_TOL: f64 = 1e-10;
pub const UNIVERSAL_FACTORIZATION_TOL: f64 = 1e-7;
pub const VERTICAL_TRANSPORT_TOL: f64 = 1e-10;
pub const VIA_UNIVERSAL_TOL: f64 = 1e-6;

/// A point of the bundle of connections: base point plus the splitting value
/// as a `d x m` matrix.
#[derive(Clone, Debug)]
pub struct ConnPoint {
    pub base: BasePoint,
    pub value: DMatrix<f64>,
}

impl ConnPoint {
    pub fn new(base: BasePoint, value: DMatrix<f64>) -> Self {
        ConnPoint { base, value }
    }

    /// The point a splitting section assigns over `x`.
    pub fn of_splitting(sp: &Splitting, base: BasePoint) -> Self {
        let value = sp.value(base.chart, &base.coords);
        ConnPoint { base, value }
    }
}

/// Tangent vector to the bundle of connections at `foot`: a base velocity
/// and a value velocity.
#[derive(Clone, Debug)]
pub struct TangentC {
    pub foot: ConnPoint,
    pub base_vel: DVector<f64>,
    pub value_vel: DMatrix<f64>,
}

impl TangentC {
    pub fn new(foot: ConnPoint, base_vel: DVector<f64>, value_vel: DMatrix<f64>) -> Result<Self> {
        if base_vel.len() != foot.value.ncols() || value_vel.shape() != foot.value.shape() {
            return Err(Error::DimensionMismatch {
                expected: foot.value.ncols(),
                got: base_vel.len(),
            });
        }
        Ok(TangentC {
            foot,
            base_vel,
            value_vel,
        })
    }
}

/// A point of the extended bundle: a connection point and a fiber point over
/// the same base point.
#[derive(Clone, Debug)]
pub struct ExtendedPoint {
    pub conn: ConnPoint,
    pub fiber: DVector<f64>,
}

/// The fibered-product isomorphism: `(X, (xi', v)) -> (X, v - S xi')` where
/// `S` is the foot splitting value. The base parts must agree.
pub fn kappa(x: &TangentC, h_base: &DVector<f64>, h_v: &DVector<f64>) -> Result<DVector<f64>> {
    let res = (h_base - &x.base_vel).amax();
    if res > 1e-12 {
        return Err(Error::FiberedProductViolation { residual: res });
    }
    Ok(h_v - &x.foot.value * h_base)
}

/// Inverse of [`kappa`]: `(X, a) -> (X, (xi, a + S xi))` with `xi` the base
/// velocity of `X`.
pub fn kappa_inv(x: &TangentC, a: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let xi = x.base_vel.clone();
    let v = a + &x.foot.value * &xi;
    (xi, v)
}

/// Horizontal lift of the universal connection at `(X, e)`: the vertical part
/// applies the foot splitting to the base velocity and feeds the result to
/// the chart action. Independent of the value velocity of `X`.
pub fn universal_lift(
    sys: &SystemSpec,
    x: &TangentC,
    e: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    sys.require_chart_point(x.foot.base.chart, &x.foot.base.coords)?;
    if !sys.fiber.contains(e) {
        return Err(Error::DomainError);
    }
    let v = &x.foot.value * &x.base_vel;
    let vert = sys.fundamental(x.foot.base.chart, &v)?.eval(e);
    Ok((x.base_vel.clone(), vert))
}

/// Vertical projection of the universal connection: subtract the universal
/// lift's vertical part. Idempotent, annihilates lift outputs.
pub fn universal_projection(
    sys: &SystemSpec,
    x: &TangentC,
    y_fiber: &DVector<f64>,
    e: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (_, lift) = universal_lift(sys, x, e)?;
    Ok(y_fiber - lift)
}

/// Relatedness of a splitting's connection with the universal one: at
/// sampled `(x, xi, e)` the lift through the splitting section equals the
/// universal lift at the section's tangent image. Both sides are exact
/// algebra; the worst residual is returned. The same check runs for the two
/// vertical projections.
pub fn relatedness_check(
    sys: &SystemSpec,
    sp: &Splitting,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = sys.base_dim();
    let k = sys.fiber_dim();
    let mut worst = 0.0f64;
    let fiber_points = sys.fiber.sample_points(samples, seed ^ 0x5eed);
    for e in fiber_points.iter() {
        let chart = rng.gen_range(0..sys.base.charts.len());
        let chart_box = &sys.base.charts[chart];
        let x = DVector::from_fn(m, |i, _| {
            rng.gen_range((0.6 * chart_box.lo[i])..(0.6 * chart_box.hi[i]))
        });
        let xi = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0f64));
        // Connection-side lift.
        let gamma = crate::connection::horizontal_lift(sys, sp, chart, &x, &xi, e)?;
        // Universal lift at the tangent image of the splitting section:
        // foot sigma(x), base velocity xi, value velocity D sigma . xi.
        let foot = ConnPoint::of_splitting(sp, BasePoint::new(chart, x.clone()));
        let tangent = TangentC::new(
            foot,
            xi.clone(),
            sp.value_derivative(chart, &x, &xi),
        )?;
        let (base_out, vert) = universal_lift(sys, &tangent, e)?;
        worst = worst
            .max((base_out - &xi).amax())
            .max((&vert - &gamma.1).amax());
        // Vertical projections are related the same way.
        let y_vert = DVector::from_fn(k, |_, _| rng.gen_range(-1.0..1.0f64));
        let proj_conn =
            crate::connection::vertical_projection(sys, sp, chart, &x, e, &xi, &y_vert)?;
        let proj_univ = universal_projection(sys, &tangent, &y_vert, e)?;
        worst = worst.max((proj_conn - proj_univ).amax());
    }
    Ok(worst)
}

/// A piecewise-smooth curve in the bundle of connections: a base curve plus
/// the splitting-value path along it.
#[derive(Clone)]
pub enum ConnCurve {
    /// Image of a base curve under a splitting section: `t -> sigma(c(t))`.
    AlongSplitting { base: Curve, splitting: Splitting },
    /// Vertical segment over a fixed base point: affine interpolation
    /// `S(t) = (1 - t) from + t to` in the affine structure.
    Vertical {
        at: BasePoint,
        from: DMatrix<f64>,
        to: DMatrix<f64>,
    },
}

impl ConnCurve {
    pub fn eval(&self, t: f64) -> ConnPoint {
        match self {
            ConnCurve::AlongSplitting { base, splitting } => {
                let (chart, coords) = base.eval(t);
                let value = splitting.value(chart, &coords);
                ConnPoint::new(BasePoint::new(chart, coords), value)
            }
            ConnCurve::Vertical { at, from, to } => {
                ConnPoint::new(at.clone(), from * (1.0 - t) + to * t)
            }
        }
    }
}

/// Parallel transport of the universal connection along a curve in the
/// bundle of connections: the fiber obeys `e' = rho(S(t) xi(t))(e)`.
/// Vertical curves leave the fiber exactly in place.
pub fn universal_transport(
    sys: &SystemSpec,
    curve: &ConnCurve,
    t_end: f64,
    e0: &DVector<f64>,
    opts: &TransportOptions,
) -> Result<TransportResult> {
    if !sys.fiber.contains(e0) {
        return Err(Error::DomainError);
    }
    match curve {
        ConnCurve::Vertical { at, .. } => {
            // The universal Christoffel vanishes along vertical curves: the
            // base velocity is zero, so the fiber field is zero and the
            // integrator moves nothing at all.
            let steps = opts.steps_per_unit.max(4);
            let times: Vec<f64> = (0..=steps).map(|i| t_end * i as f64 / steps as f64).collect();
            Ok(TransportResult {
                base: vec![at.clone(); times.len()],
                fiber: vec![e0.clone(); times.len()],
                group: None,
                error_estimate: 0.0,
                times,
            })
        }
        ConnCurve::AlongSplitting { base, splitting } => {
            // The fiber velocity at time t applies the moving connection
            // point to the base velocity: e' = rho(S(t) xi(t))(e), the
            // universal lift evaluated along the section image.
            let legs = crate::connection::curve_legs(sys, base, t_end)?;
            let dom = sys.flow_domain();
            let mut times = Vec::new();
            let mut basepts = Vec::new();
            let mut fiber = Vec::new();
            let mut err = 0.0f64;
            let mut u = e0.clone();
            for leg in &legs {
                if let Some(g) = &leg.entry {
                    u = g.apply_fiber(&u, &sys.fiber.model);
                }
                let chart = leg.chart;
                let field = FnTimeField {
                    dim: sys.fiber_dim(),
                    f: |t: f64, s: &DVector<f64>| {
                        let point = ConnPoint::new(
                            BasePoint::new(chart, leg.eval(t)),
                            splitting.value(chart, &leg.eval(t)),
                        );
                        let v = &point.value * leg.deriv(t);
                        sys.fundamental(point.base.chart, &v)
                            .expect("dims validated")
                            .eval(s)
                    },
                };
                let steps =
                    (((leg.t1 - leg.t0) * opts.steps_per_unit as f64).ceil() as usize).max(4);
                let trace = integrate_flow_trace(&field, &u, leg.t0, leg.t1, steps, &dom)?;
                err += trace.result.error_estimate;
                for (t, s) in &trace.samples {
                    times.push(*t);
                    basepts.push(BasePoint::new(chart, leg.eval(*t)));
                    fiber.push(s.clone());
                }
                u = trace.result.end;
            }
            Ok(TransportResult {
                times,
                base: basepts,
                fiber,
                group: None,
                error_estimate: err,
            })
        }
    }
}

/// Transport factorization through the universal connection:
/// `pr2 o Pt_univ(sigma o c, t)` must equal `Pt_sigma(c, t)` on fibers.
/// Returns the sup distance of the two fiber paths.
pub fn universal_factorization_residual(
    sys: &SystemSpec,
    sp: &Splitting,
    curve: &Curve,
    t_end: f64,
    e0: &DVector<f64>,
    opts: &TransportOptions,
) -> Result<f64> {
    let univ = universal_transport(
        sys,
        &ConnCurve::AlongSplitting {
            base: curve.clone(),
            splitting: sp.clone(),
        },
        t_end,
        e0,
        opts,
    )?;
    let direct = crate::connection::transport_direct(sys, sp, curve, t_end, e0, opts)?;
    Ok(univ.sup_distance(&direct))
}

/// Reproduce the transport of a second connection through the universal one:
/// ride a vertical segment from `sigma` to `tau` over the start point, follow
/// the universal transport along `tau o c`, and ride the vertical segment
/// back at the end point. By the vertical-transport triviality the result
/// equals the direct transport of `tau`.
pub fn transport_via_universal(
    sys: &SystemSpec,
    tau: &Splitting,
    sigma: &Splitting,
    curve: &Curve,
    t_end: f64,
    e0: &DVector<f64>,
    opts: &TransportOptions,
) -> Result<DVector<f64>> {
    let (c0_chart, c0) = curve.eval(0.0);
    let (ct_chart, ct) = curve.eval(t_end);
    let b0 = ConnCurve::Vertical {
        at: BasePoint::new(c0_chart, c0.clone()),
        from: sigma.value(c0_chart, &c0),
        to: tau.value(c0_chart, &c0),
    };
    let main = ConnCurve::AlongSplitting {
        base: curve.clone(),
        splitting: tau.clone(),
    };
    let b_t_inv = ConnCurve::Vertical {
        at: BasePoint::new(ct_chart, ct.clone()),
        from: tau.value(ct_chart, &ct),
        to: sigma.value(ct_chart, &ct),
    };
    let leg1 = universal_transport(sys, &b0, 1.0, e0, opts)?;
    let leg2 = universal_transport(sys, &main, t_end, leg1.end_fiber(), opts)?;
    let leg3 = universal_transport(sys, &b_t_inv, 1.0, leg2.end_fiber(), opts)?;
    Ok(leg3.end_fiber().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connection::SplittingChart;
    use crate::geometry::AffineField;
    use crate::lie::{GroupKind, LieAlgebra, Representation};
    use crate::poly::PolyMap;
    use crate::system::{BaseAtlas, FiberModel};
    use approx::assert_relative_eq;
    use nalgebra::dvector;

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

    fn tangent_at(sp: &Splitting, chart: usize, x: DVector<f64>, xi: DVector<f64>) -> TangentC {
        let foot = ConnPoint::of_splitting(sp, BasePoint::new(chart, x.clone()));
        let vel = sp.value_derivative(chart, &x, &xi);
        TangentC::new(foot, xi, vel).unwrap()
    }

    #[test]
    fn kappa_round_trips_and_hand_values() {
        let (_, sp) = abelian_fixture();
        let x = tangent_at(&sp, 0, dvector![2.0, 0.0], dvector![0.4, -0.7]);
        // Round trip through the isomorphism is exact.
        let a = dvector![0.9];
        let (xi, v) = kappa_inv(&x, &a);
        let back = kappa(&x, &xi, &v).unwrap();
        assert_relative_eq!((back - &a).amax(), 0.0, epsilon = KAPPA_ROUNDTRIP_TOL);

        // Zero-splitting foot: kappa passes the V part through.
        let zero_foot = TangentC::new(
            ConnPoint::new(BasePoint::new(0, dvector![0.0, 0.0]), DMatrix::zeros(1, 2)),
            dvector![1.0, 2.0],
            DMatrix::zeros(1, 2),
        )
        .unwrap();
        let out = kappa(&zero_foot, &dvector![1.0, 2.0], &dvector![0.55]).unwrap();
        assert_relative_eq!(out[0], 0.55);

        // Foot with a single 2.0 entry in the (e1, dy) slot, h = (d/dy, 0):
        // a = -2.0 e1.
        let mut value = DMatrix::zeros(1, 2);
        value[(0, 1)] = 2.0;
        let foot = TangentC::new(
            ConnPoint::new(BasePoint::new(0, dvector![0.0, 0.0]), value),
            dvector![0.0, 1.0],
            DMatrix::zeros(1, 2),
        )
        .unwrap();
        let out = kappa(&foot, &dvector![0.0, 1.0], &dvector![0.0]).unwrap();
        assert_relative_eq!(out[0], -2.0);

        // Mismatched base parts violate the fibered product.
        let err = kappa(&foot, &dvector![1.0, 1.0], &dvector![0.0]).unwrap_err();
        assert!(matches!(err, Error::FiberedProductViolation { .. }));
    }

    #[test]
    fn universal_lift_and_projection() {
        let (sys, sp) = abelian_fixture();
        // Vertical tangent in C: lift has zero vertical part whatever the
        // value velocity.
        let foot = ConnPoint::of_splitting(&sp, BasePoint::new(0, dvector![2.0, 0.0]));
        let vertical = TangentC::new(
            foot.clone(),
            DVector::zeros(2),
            DMatrix::from_element(1, 2, 3.7),
        )
        .unwrap();
        let e = dvector![1.0, 0.0];
        let (_, vert) = universal_lift(&sys, &vertical, &e).unwrap();
        assert_relative_eq!(vert.amax(), 0.0);
        // And the projection leaves fiber vectors unchanged.
        let y = dvector![0.3, -0.8];
        let p = universal_projection(&sys, &vertical, &y, &e).unwrap();
        assert_relative_eq!((p - &y).amax(), 0.0);

        // Foot sigma(x) at x = (2, 0), xi = d/dy, e = (1, 0): vertical part
        // 2 J e = (0, 2).
        let t = tangent_at(&sp, 0, dvector![2.0, 0.0], dvector![0.0, 1.0]);
        let (_, vert) = universal_lift(&sys, &t, &e).unwrap();
        assert_relative_eq!((vert.clone() - dvector![0.0, 2.0]).amax(), 0.0, epsilon = 1e-14);
        // The projection annihilates the lift.
        let p = universal_projection(&sys, &t, &vert, &e).unwrap();
        assert_relative_eq!(p.amax(), 0.0, epsilon = 1e-14);

        // Linearity in X.
        let t1 = tangent_at(&sp, 0, dvector![2.0, 0.0], dvector![1.0, 0.0]);
        let t2 = tangent_at(&sp, 0, dvector![2.0, 0.0], dvector![1.0, 1.0]);
        let (_, v1) = universal_lift(&sys, &t1, &e).unwrap();
        let (_, v2) = universal_lift(&sys, &t2, &e).unwrap();
        let (_, vsum) = universal_lift(&sys, &t, &e).unwrap();
        assert_relative_eq!((v1 + vsum - v2).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn relatedness_residual_is_machine_exact() {
        let (sys, sp) = abelian_fixture();
        let res = relatedness_check(&sys, &sp, 100, 1).unwrap();
        assert!(res < RELATEDNESS_TOL, "residual {res}");

        // Constant splittings too.
        let sp_const = Splitting {
            charts: vec![SplittingChart {
                comps: vec![
                    PolyMap::constant(2, &dvector![0.4]),
                    PolyMap::constant(2, &dvector![-1.1]),
                ],
            }],
        };
        let res = relatedness_check(&sys, &sp_const, 50, 2).unwrap();
        assert!(res < RELATEDNESS_TOL, "residual {res}");
    }

    #[test]
    fn vertical_universal_transport_fixes_the_fiber() {
        let (sys, sp) = abelian_fixture();
        let at = BasePoint::new(0, dvector![1.0, 1.0]);
        let curve = ConnCurve::Vertical {
            at: at.clone(),
            from: sp.value(0, &at.coords),
            to: sp.value(0, &at.coords) * 3.0,
        };
        let e0 = dvector![0.7, -0.2];
        let r = universal_transport(&sys, &curve, 1.0, &e0, &TransportOptions::default()).unwrap();
        assert!(
            (r.end_fiber() - &e0).amax() <= VERTICAL_TRANSPORT_TOL,
            "vertical transport moved the fiber"
        );
        assert!(r.error_estimate <= VERTICAL_TRANSPORT_TOL);
    }

    #[test]
    fn universal_factorization_matches_direct_transport() {
        let (sys, sp) = abelian_fixture();
        let c = Curve::polyline(
            0,
            &[dvector![0.0, 0.0], dvector![1.0, 0.3], dvector![0.4, 1.2]],
        );
        let res = universal_factorization_residual(
            &sys,
            &sp,
            &c,
            1.0,
            &dvector![1.0, 0.0],
            &TransportOptions::default(),
        )
        .unwrap();
        assert!(res < UNIVERSAL_FACTORIZATION_TOL, "residual {res}");

        // sigma = 0: constant fiber through the universal route as well.
        let zero = Splitting::zero(&sys);
        let r = universal_transport(
            &sys,
            &ConnCurve::AlongSplitting {
                base: c,
                splitting: zero,
            },
            1.0,
            &dvector![0.3, 0.4],
            &TransportOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(
            (r.end_fiber() - dvector![0.3, 0.4]).amax(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn transport_of_other_connections_through_the_universal_one() {
        let (sys, sp) = abelian_fixture();
        let opts = TransportOptions::default();
        let c = Curve::polyline(
            0,
            &[dvector![0.0, 0.0], dvector![1.1, 0.2], dvector![0.3, 0.9]],
        );
        let e0 = dvector![1.0, 0.0];

        // tau = sigma reduces to the factorization identity.
        let same = transport_via_universal(&sys, &sp, &sp, &c, 1.0, &e0, &opts).unwrap();
        let direct = crate::connection::transport_direct(&sys, &sp, &c, 1.0, &e0, &opts).unwrap();
        assert!((same - direct.end_fiber()).norm() < VIA_UNIVERSAL_TOL);

        // tau = 2 sigma.
        let tau = sp.scaled(2.0);
        let via = transport_via_universal(&sys, &tau, &sp, &c, 1.0, &e0, &opts).unwrap();
        let direct = crate::connection::transport_direct(&sys, &tau, &c, 1.0, &e0, &opts).unwrap();
        assert!(
            (via - direct.end_fiber()).norm() < VIA_UNIVERSAL_TOL,
            "tau = 2 sigma disagrees"
        );

        // Randomized polynomial tau, several draws.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for draw in 0..5 {
            let tau = Splitting::random_polynomial(&sys, 0.5, &mut rng);
            let via = transport_via_universal(&sys, &tau, &sp, &c, 1.0, &e0, &opts).unwrap();
            let direct =
                crate::connection::transport_direct(&sys, &tau, &c, 1.0, &e0, &opts).unwrap();
            let res = (via - direct.end_fiber()).norm();
            assert!(res < VIA_UNIVERSAL_TOL, "draw {draw}: residual {res}");
        }
    }
}
