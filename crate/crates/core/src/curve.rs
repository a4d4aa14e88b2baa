//! Piecewise-smooth curves on chart domains with analytic derivatives.
//!
//! A curve is a list of pieces, each living in a declared chart and carrying
//! a closed-form path; the chart tags are opaque labels here and are
//! interpreted against an atlas by the transport machinery. Concatenation
//! reparametrizes each leg with a smooth bump that is flat at junctions.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::poly::PolyMap;

/// Closed-form path families on a single chart, `u in [0, 1]`.
#[derive(Clone, Debug)]
pub enum PathFn {
    /// Straight segment `from + u (to - from)`.
    Line { from: DVector<f64>, to: DVector<f64> },
    /// Constant point.
    Point { at: DVector<f64> },
    /// Polynomial in `u` (a `PolyMap` with one input).
    Poly { map: PolyMap },
    /// Circular arc in coordinates `(i, j)` around `center`.
    Arc {
        center: DVector<f64>,
        radius: f64,
        angle0: f64,
        angle1: f64,
        axes: (usize, usize),
    },
    /// Radial ray `u -> u * target` (chart coordinates of the target point).
    Radial { target: DVector<f64> },
}

impl PathFn {
    pub fn eval(&self, u: f64) -> DVector<f64> {
        match self {
            PathFn::Line { from, to } => from + u * (to - from),
            PathFn::Point { at } => at.clone(),
            PathFn::Poly { map } => map.eval(&DVector::from_element(1, u)),
            PathFn::Arc {
                center,
                radius,
                angle0,
                angle1,
                axes,
            } => {
                let th = angle0 + u * (angle1 - angle0);
                let mut p = center.clone();
                p[axes.0] += radius * th.cos();
                p[axes.1] += radius * th.sin();
                p
            }
            PathFn::Radial { target } => u * target,
        }
    }

    pub fn derivative(&self, u: f64) -> DVector<f64> {
        match self {
            PathFn::Line { from, to } => to - from,
            PathFn::Point { at } => DVector::zeros(at.len()),
            PathFn::Poly { map } => map.jacobian(&DVector::from_element(1, u)).column(0).into(),
            PathFn::Arc {
                center,
                radius,
                angle0,
                angle1,
                axes,
            } => {
                let th = angle0 + u * (angle1 - angle0);
                let dth = angle1 - angle0;
                let mut d = DVector::zeros(center.len());
                d[axes.0] = -radius * th.sin() * dth;
                d[axes.1] = radius * th.cos() * dth;
                d
            }
            PathFn::Radial { target } => target.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PathFn::Line { from, .. } => from.len(),
            PathFn::Point { at } => at.len(),
            PathFn::Poly { map } => map.n_out,
            PathFn::Arc { center, .. } => center.len(),
            PathFn::Radial { target } => target.len(),
        }
    }
}

/// Smooth bump reparametrization of `[0,1]`, flat at both ends:
/// `phi(u) = u - sin(2 pi u) / (2 pi)`, `phi'(0) = phi'(1) = 0`.
fn bump(u: f64) -> f64 {
    u - (std::f64::consts::TAU * u).sin() / std::f64::consts::TAU
}

fn bump_derivative(u: f64) -> f64 {
    1.0 - (std::f64::consts::TAU * u).cos()
}

/// One leg of a curve: a path in a chart over a parameter subinterval.
#[derive(Clone, Debug)]
pub struct CurvePiece {
    pub chart: usize,
    pub t0: f64,
    pub t1: f64,
    pub path: PathFn,
    /// When set, the local parameter runs through the junction-flat bump.
    pub bumped: bool,
    /// When set, the path is traversed backwards.
    pub reversed: bool,
}

impl CurvePiece {
    fn local(&self, t: f64) -> (f64, f64) {
        // Returns (u, du/dt) for the path parameter.
        let width = self.t1 - self.t0;
        let mut u = ((t - self.t0) / width).clamp(0.0, 1.0);
        let mut du = 1.0 / width;
        if self.bumped {
            du *= bump_derivative(u);
            u = bump(u);
        }
        if self.reversed {
            u = 1.0 - u;
            du = -du;
        }
        (u, du)
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        let (u, _) = self.local(t);
        self.path.eval(u)
    }

    pub fn derivative(&self, t: f64) -> DVector<f64> {
        let (u, du) = self.local(t);
        self.path.derivative(u) * du
    }
}

/// Piecewise-smooth curve over `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Curve {
    pub pieces: Vec<CurvePiece>,
}

impl Curve {
    /// A single-piece curve over the whole parameter interval.
    pub fn single(chart: usize, path: PathFn) -> Curve {
        Curve {
            pieces: vec![CurvePiece {
                chart,
                t0: 0.0,
                t1: 1.0,
                path,
                bumped: false,
                reversed: false,
            }],
        }
    }

    /// Polyline through `points` in one chart, one piece per segment.
    pub fn polyline(chart: usize, points: &[DVector<f64>]) -> Curve {
        assert!(points.len() >= 2, "polyline needs at least two points");
        let n = points.len() - 1;
        let pieces = (0..n)
            .map(|i| CurvePiece {
                chart,
                t0: i as f64 / n as f64,
                t1: (i + 1) as f64 / n as f64,
                path: PathFn::Line {
                    from: points[i].clone(),
                    to: points[i + 1].clone(),
                },
                bumped: false,
                reversed: false,
            })
            .collect();
        Curve { pieces }
    }

    /// Counterclockwise coordinate rectangle at `x` spanned by
    /// `eps * e_i` then `eps * e_j`.
    pub fn coordinate_rectangle(chart: usize, x: &DVector<f64>, i: usize, j: usize, eps: f64) -> Curve {
        let mut p1 = x.clone();
        p1[i] += eps;
        let mut p2 = p1.clone();
        p2[j] += eps;
        let mut p3 = x.clone();
        p3[j] += eps;
        Curve::polyline(chart, &[x.clone(), p1, p2, p3, x.clone()])
    }

    /// Multi-chart curve from explicit pieces laid out over equal
    /// subintervals in declaration order.
    pub fn from_chart_paths(paths: Vec<(usize, PathFn)>) -> Curve {
        let n = paths.len();
        assert!(n >= 1);
        let pieces = paths
            .into_iter()
            .enumerate()
            .map(|(i, (chart, path))| CurvePiece {
                chart,
                t0: i as f64 / n as f64,
                t1: (i + 1) as f64 / n as f64,
                path,
                bumped: false,
                reversed: false,
            })
            .collect();
        Curve { pieces }
    }

    pub fn dim(&self) -> usize {
        self.pieces[0].path.dim()
    }

    fn piece_at(&self, t: f64) -> &CurvePiece {
        let t = t.clamp(0.0, 1.0);
        self.pieces
            .iter()
            .find(|p| t <= p.t1)
            .unwrap_or_else(|| self.pieces.last().expect("non-empty curve"))
    }

    /// Chart label and coordinates at parameter `t`.
    pub fn eval(&self, t: f64) -> (usize, DVector<f64>) {
        let p = self.piece_at(t);
        (p.chart, p.eval(t))
    }

    /// Coordinate velocity at parameter `t` (within the piece's chart).
    pub fn derivative(&self, t: f64) -> DVector<f64> {
        self.piece_at(t).derivative(t)
    }

    /// Reverse orientation: `t -> 1 - t`.
    pub fn reverse(&self) -> Curve {
        let pieces = self
            .pieces
            .iter()
            .rev()
            .map(|p| CurvePiece {
                chart: p.chart,
                t0: 1.0 - p.t1,
                t1: 1.0 - p.t0,
                path: p.path.clone(),
                bumped: p.bumped,
                reversed: !p.reversed,
            })
            .collect();
        Curve { pieces }
    }

    /// Concatenate curves into one parametrized over `[0, 1]`, each leg
    /// bump-reparametrized so the junctions are flat.
    pub fn concat(curves: &[Curve]) -> Curve {
        let total: usize = curves.iter().map(|c| c.pieces.len()).sum();
        assert!(total >= 1);
        let n = curves.len() as f64;
        let mut pieces = Vec::with_capacity(total);
        for (ci, c) in curves.iter().enumerate() {
            let lo = ci as f64 / n;
            let width = 1.0 / n;
            for p in &c.pieces {
                pieces.push(CurvePiece {
                    chart: p.chart,
                    t0: lo + width * p.t0,
                    t1: lo + width * p.t1,
                    path: p.path.clone(),
                    bumped: true,
                    reversed: p.reversed,
                });
            }
        }
        Curve { pieces }
    }

    /// Monotone smooth reparametrization of the whole curve by the bump map.
    pub fn reparametrized(&self) -> Curve {
        Curve::concat(std::slice::from_ref(self))
    }

    /// Check endpoint closure in a single chart.
    pub fn require_closed(&self) -> Result<()> {
        let (c0, p0) = self.eval(0.0);
        let (c1, p1) = self.eval(1.0);
        if c0 != c1 || (p0 - p1).amax() > 1e-12 {
            return Err(Error::validation(
                "closed_curve",
                "curve endpoints do not coincide in a common chart",
            ));
        }
        Ok(())
    }
}
