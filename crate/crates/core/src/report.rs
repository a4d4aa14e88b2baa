//! Check-suite runner: turns a scenario into a deterministic pass/fail
//! report over the system, transport, curvature, holonomy, universal and
//! reconstruction suites.
//!
//! Reports are byte-identical for identical scenario, seed and step inputs;
//! wall-clock timings are attached only on request.

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::connection::{
    ad_pullback_check, claim2_check, curvature_bracket, curvature_formula,
    holonomy_algebra_sample, holonomy_loop, small_loop_limit, transport_direct, transport_group,
    Splitting, TransportOptions,
};
use crate::curve::Curve;
use crate::error::{Error, Result};
use crate::poly::PolyMap;
use crate::scenario::Scenario;
use crate::system::{
    bracket_sections, completeness_probe, check_monic, pushforward_bracket_residual, SectionH,
};
use crate::universal::{
    kappa, kappa_inv, relatedness_check, transport_via_universal, universal_factorization_residual,
    universal_transport, ConnCurve, ConnPoint, TangentC,
};

pub const REPORT_SCHEMA: &str = "fibersys-report/1";

/// Check groups selectable on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    System,
    Transport,
    Curvature,
    Holonomy,
    Universal,
    Reconstruction,
}

impl Suite {
    pub fn all() -> Vec<Suite> {
        vec![
            Suite::System,
            Suite::Transport,
            Suite::Curvature,
            Suite::Holonomy,
            Suite::Universal,
            Suite::Reconstruction,
        ]
    }

    pub fn parse(name: &str) -> Result<Suite> {
        Ok(match name {
            "system" => Suite::System,
            "transport" => Suite::Transport,
            "curvature" => Suite::Curvature,
            "holonomy" => Suite::Holonomy,
            "universal" => Suite::Universal,
            "reconstruction" | "reconstruct" => Suite::Reconstruction,
            other => {
                return Err(Error::validation(
                    "suite",
                    format!("unknown suite '{other}'"),
                ))
            }
        })
    }

    fn name(&self) -> &'static str {
        match self {
            Suite::System => "system",
            Suite::Transport => "transport",
            Suite::Curvature => "curvature",
            Suite::Holonomy => "holonomy",
            Suite::Universal => "universal",
            Suite::Reconstruction => "reconstruction",
        }
    }
}

/// One executed check.
#[derive(Clone, Debug, Serialize)]
pub struct CheckEntry {
    pub name: String,
    pub suite: &'static str,
    pub status: &'static str,
    pub residual: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<f64>,
}

impl CheckEntry {
    pub fn passed(&self) -> bool {
        self.status == "pass"
    }
}

/// Full report of a suite run.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub scenario: String,
    pub seed: u64,
    pub steps_per_unit: usize,
    pub tol_scale: f64,
    pub all_passed: bool,
    pub entries: Vec<CheckEntry>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "name,suite,status,residual,tolerance,note")?;
        for e in &self.entries {
            writeln!(
                w,
                "{},{},{},{:.6e},{:.3e},{}",
                e.name,
                e.suite,
                e.status,
                e.residual,
                e.tolerance,
                e.note.as_deref().unwrap_or("")
            )?;
        }
        Ok(())
    }
}

/// Configuration of a suite run.
#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    pub seed: u64,
    pub steps_per_unit: usize,
    pub tol_scale: f64,
    pub with_timing: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 7,
            steps_per_unit: crate::geometry::DEFAULT_STEPS_PER_UNIT,
            tol_scale: 1.0,
            with_timing: false,
        }
    }
}

struct Runner<'s> {
    sc: &'s Scenario,
    cfg: SuiteConfig,
    opts: TransportOptions,
    entries: Vec<CheckEntry>,
    check_index: u64,
}

impl<'s> Runner<'s> {
    fn rng(&mut self) -> ChaCha8Rng {
        self.check_index += 1;
        ChaCha8Rng::seed_from_u64(
            self.cfg
                .seed
                .wrapping_add(self.check_index.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        )
    }

    fn run<F>(&mut self, suite: Suite, name: &str, tolerance: f64, body: F)
    where
        F: FnOnce(&mut Self) -> Result<(f64, Option<String>)>,
    {
        let start = Instant::now();
        let scaled = tolerance * self.cfg.tol_scale;
        let (status, residual, note) = match body(self) {
            Ok((residual, note)) => {
                let status = if residual <= scaled { "pass" } else { "fail" };
                (status, residual, note)
            }
            Err(e) => ("fail", f64::INFINITY, Some(format!("error: {e}"))),
        };
        let runtime_ms = self
            .cfg
            .with_timing
            .then(|| start.elapsed().as_secs_f64() * 1e3);
        self.entries.push(CheckEntry {
            name: name.to_string(),
            suite: suite.name(),
            status,
            residual,
            tolerance: scaled,
            note,
            runtime_ms,
        });
    }

    fn skip(&mut self, suite: Suite, name: &str, why: &str) {
        self.entries.push(CheckEntry {
            name: name.to_string(),
            suite: suite.name(),
            status: "skip",
            residual: 0.0,
            tolerance: 0.0,
            note: Some(why.to_string()),
            runtime_ms: None,
        });
    }

    /// A point at the given box fractions of chart 0.
    fn box_point(&self, fracs: &[f64]) -> DVector<f64> {
        let b = &self.sc.system.base.charts[0];
        DVector::from_fn(b.dim(), |i, _| {
            b.lo[i] + fracs[i.min(fracs.len() - 1)] * (b.hi[i] - b.lo[i])
        })
    }

    /// Seeded polynomial curve staying well inside chart 0.
    fn random_curve(&mut self) -> Curve {
        let m = self.sc.system.base_dim();
        let b = self.sc.system.base.charts[0].clone();
        let mut rng = self.rng();
        let mut map = PolyMap::zero(1, m);
        for out in 0..m {
            let scale = 0.2 * b.lo[out].abs().min(b.hi[out]);
            for deg in 1..=2u32 {
                let c: f64 = rng.gen_range(-scale..scale);
                map = map.add(&PolyMap::monomial(1, m, out, c, &[deg]));
            }
        }
        Curve::single(0, crate::curve::PathFn::Poly { map })
    }

    fn fiber_start(&self) -> DVector<f64> {
        self.sc
            .system
            .fiber
            .sample_points(1, self.cfg.seed ^ 0xF1BE)
            .pop()
            .expect("fiber sample")
    }

    // -- system suite -----------------------------------------------------

    fn suite_system(&mut self) {
        let sys = &self.sc.system;
        self.run(Suite::System, "transition-compatibility", 1e-7, |r| {
            Ok((r.sc.system.transition_compat_residual(3, 10)?, None))
        });
        self.run(Suite::System, "monic-probe", 0.5, |r| {
            let verdict = check_monic(&r.sc.system, r.sc.system.algebra_dim() + 3, r.cfg.seed)?;
            Ok((
                if verdict.monic { 0.0 } else { 1.0 },
                Some(format!("singular value ratio {:.3e}", verdict.worst_ratio)),
            ))
        });
        self.run(Suite::System, "vertical-closure", 0.0, |r| {
            let m = r.sc.system.base_dim();
            let d = r.sc.system.algebra_dim();
            let mut rng = r.rng();
            let mk = |rng: &mut ChaCha8Rng| {
                let mut v = PolyMap::zero(m, d);
                for out in 0..d {
                    let powers: Vec<u32> = (0..m).map(|_| rng.gen_range(0..2u32)).collect();
                    let coeff: f64 = rng.gen_range(-1.0..1.0);
                    v = v.add(&PolyMap::monomial(m, d, out, coeff, &powers));
                }
                v
            };
            let h1 = SectionH::vertical(0, m, mk(&mut rng));
            let h2 = SectionH::vertical(0, m, mk(&mut rng));
            let br = bracket_sections(&r.sc.system, &h1, &h2, 0)?;
            Ok((
                if br.is_vertical() { 0.0 } else { 1.0 },
                Some("bracket of vertical sections stays vertical".into()),
            ))
        });
        self.run(
            Suite::System,
            "pushforward-bracket",
            self.sc.tolerances.pushforward,
            |r| {
                let m = r.sc.system.base_dim();
                let d = r.sc.system.algebra_dim();
                let mut rng = r.rng();
                let rand_section = |rng: &mut ChaCha8Rng| {
                    let mut base = PolyMap::zero(m, m);
                    let mut v = PolyMap::zero(m, d);
                    for out in 0..m {
                        let powers: Vec<u32> = (0..m).map(|_| rng.gen_range(0..2u32)).collect();
                        base = base.add(&PolyMap::monomial(
                            m,
                            m,
                            out,
                            rng.gen_range(-0.6..0.6),
                            &powers,
                        ));
                    }
                    for out in 0..d {
                        let powers: Vec<u32> = (0..m).map(|_| rng.gen_range(0..2u32)).collect();
                        v = v.add(&PolyMap::monomial(
                            m,
                            d,
                            out,
                            rng.gen_range(-0.6..0.6),
                            &powers,
                        ));
                    }
                    SectionH::on_chart(0, base, v)
                };
                let h1 = rand_section(&mut rng);
                let h2 = rand_section(&mut rng);
                Ok((
                    pushforward_bracket_residual(&r.sc.system, &h1, &h2, 0, 4, r.cfg.seed)?,
                    None,
                ))
            },
        );
        // Completeness probes of the vertical basis fields.
        let expect_complete = self.sc.meta.complete;
        self.run(Suite::System, "completeness-probe", 0.5, move |r| {
            let d = r.sc.system.algebra_dim();
            let mut all_complete = true;
            let mut first_escape = None;
            for i in 0..d {
                let mut v = DVector::zeros(d);
                v[i] = 1.0;
                let verdict = completeness_probe(&r.sc.system, 0, &v, 20.0, 4, r.cfg.seed)?;
                if let crate::system::CompletenessVerdict::Escaped { t_escape, .. } = verdict {
                    all_complete = false;
                    first_escape.get_or_insert(t_escape);
                }
            }
            let matches = all_complete == expect_complete;
            let note = match (expect_complete, first_escape) {
                (false, Some(t)) => format!("expected escape observed at t = {t:.4}"),
                (true, None) => "all vertical fields complete over the horizon".into(),
                (false, None) => "expected an escape but none occurred".into(),
                (true, Some(t)) => format!("unexpected escape at t = {t:.4}"),
            };
            Ok((if matches { 0.0 } else { 1.0 }, Some(note)))
        });
        let _ = sys;
    }

    // -- transport suite ----------------------------------------------------

    fn suite_transport(&mut self) {
        let tol = &self.sc.tolerances;
        if self.sc.meta.complete {
            let agreement_tol = tol.transport_agreement;
            self.run(Suite::Transport, "dual-agreement", agreement_tol, |r| {
                let u0 = r.fiber_start();
                let mut worst = 0.0f64;
                let mut curves: Vec<Curve> = r.sc.curves.values().cloned().collect();
                for _ in 0..3 {
                    let c = r.random_curve();
                    curves.push(c);
                }
                for c in &curves {
                    let a = transport_direct(&r.sc.system, &r.sc.splitting, c, 1.0, &u0, &r.opts)?;
                    let b = transport_group(&r.sc.system, &r.sc.splitting, c, 1.0, &u0, &r.opts)?;
                    worst = worst.max(a.sup_distance(&b));
                    if let Some(res) = b.group_action_residual(&r.sc.system) {
                        worst = worst.max(res);
                    }
                }
                Ok((worst, Some("direct vs group transport".into())))
            });
            self.run(
                Suite::Transport,
                "reparametrization-invariance",
                tol.transport_agreement,
                |r| {
                    let u0 = r.fiber_start();
                    let c = r.random_curve();
                    let a = transport_direct(&r.sc.system, &r.sc.splitting, &c, 1.0, &u0, &r.opts)?;
                    let b = transport_direct(
                        &r.sc.system,
                        &r.sc.splitting,
                        &c.reparametrized(),
                        1.0,
                        &u0,
                        &r.opts,
                    )?;
                    Ok(((a.end_fiber() - b.end_fiber()).norm(), None))
                },
            );
            self.run(
                Suite::Transport,
                "concatenation",
                tol.transport_agreement,
                |r| {
                    let u0 = r.fiber_start();
                    let mid = r.box_point(&[0.62]);
                    let end = r.box_point(&[0.38]);
                    let zero = DVector::zeros(r.sc.system.base_dim());
                    let c1 = Curve::polyline(0, &[zero.clone(), mid.clone()]);
                    let c2 = Curve::polyline(0, &[mid, end]);
                    let first =
                        transport_direct(&r.sc.system, &r.sc.splitting, &c1, 1.0, &u0, &r.opts)?;
                    let second = transport_direct(
                        &r.sc.system,
                        &r.sc.splitting,
                        &c2,
                        1.0,
                        first.end_fiber(),
                        &r.opts,
                    )?;
                    let joined = transport_direct(
                        &r.sc.system,
                        &r.sc.splitting,
                        &Curve::concat(&[c1, c2]),
                        1.0,
                        &u0,
                        &r.opts,
                    )?;
                    Ok(((joined.end_fiber() - second.end_fiber()).norm(), None))
                },
            );
            self.run(Suite::Transport, "long-curve-no-escape", 0.5, |r| {
                // Base length ~ 40 inside chart 0; global transport must hold.
                let m = r.sc.system.base_dim();
                let mut pts = vec![DVector::zeros(m)];
                for i in 0..10 {
                    let f = if i % 2 == 0 { 0.7 } else { 0.3 };
                    pts.push(r.box_point(&[f]));
                }
                let c = Curve::polyline(0, &pts);
                let u0 = r.fiber_start();
                match transport_direct(&r.sc.system, &r.sc.splitting, &c, 1.0, &u0, &r.opts) {
                    Ok(_) => Ok((0.0, None)),
                    Err(Error::EscapeDetected { t_escape, .. }) => Ok((
                        1.0,
                        Some(format!("escape at t = {t_escape:.4} on a complete system")),
                    )),
                    Err(e) => Err(e),
                }
            });
        } else {
            self.skip(
                Suite::Transport,
                "dual-agreement",
                "incomplete scenario: transport escapes by design",
            );
        }
        if let Some(exp) = self.sc.meta.expected_escape.clone() {
            self.run(Suite::Transport, "expected-escape", tol.escape_time, move |r| {
                let c = r.sc.curve(&exp.curve)?;
                let u0 = DVector::from_column_slice(&exp.start);
                match transport_direct(&r.sc.system, &r.sc.splitting, c, 1.0, &u0, &r.opts) {
                    Err(Error::EscapeDetected { t_escape, .. }) => Ok((
                        (t_escape - exp.time).abs(),
                        Some(format!(
                            "escape at t = {t_escape:.6}, oracle {:.6}",
                            exp.time
                        )),
                    )),
                    Ok(_) => Ok((f64::INFINITY, Some("no escape detected".into()))),
                    Err(e) => Err(e),
                }
            });
        }
    }

    // -- curvature suite ----------------------------------------------------

    fn suite_curvature(&mut self) {
        let tol = &self.sc.tolerances;
        if self.sc.system.base_dim() < 2 {
            self.skip(
                Suite::Curvature,
                "cross-check",
                "one-dimensional base: no tangent pairs",
            );
            return;
        }
        self.run(Suite::Curvature, "antisymmetry", 1e-13, |r| {
            let x = r.box_point(&[0.55, 0.45]);
            let mut rng = r.rng();
            let m = r.sc.system.base_dim();
            let x1 = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0f64));
            let x2 = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0f64));
            let a = curvature_formula(&r.sc.system, &r.sc.splitting, 0, &x, &x1, &x2)?;
            let b = curvature_formula(&r.sc.system, &r.sc.splitting, 0, &x, &x2, &x1)?;
            Ok(((a.v + b.v).amax(), None))
        });
        self.run(
            Suite::Curvature,
            "cross-check",
            tol.curvature_agreement,
            |r| {
                let mut rng = r.rng();
                let mut worst = 0.0f64;
                let m = r.sc.system.base_dim();
                let ex = DVector::from_fn(m, |i, _| if i == 0 { 1.0 } else { 0.0 });
                let ey = DVector::from_fn(m, |i, _| if i == 1 { 1.0 } else { 0.0 });
                for draw in 0..3 {
                    let sp = Splitting::random_polynomial(&r.sc.system, 0.5, &mut rng);
                    for e in r.sc.system.fiber.sample_points(5, r.cfg.seed + draw) {
                        let x = r.box_point(&[rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)]);
                        let via_bracket =
                            curvature_bracket(&r.sc.system, &sp, 0, &x, &ex, &ey, &e, 1.0)?;
                        let via_formula = {
                            use crate::geometry::VectorField;
                            curvature_formula(&r.sc.system, &sp, 0, &x, &ex, &ey)?
                                .as_field
                                .eval(&e)
                        };
                        worst = worst.max((via_bracket - via_formula).amax());
                    }
                }
                Ok((worst, Some("bracket route vs exact form".into())))
            },
        );
        self.run(Suite::Curvature, "small-loop-limit", tol.small_loop, |r| {
            let x = r.box_point(&[0.52, 0.47]);
            let result = small_loop_limit(
                &r.sc.system,
                &r.sc.splitting,
                0,
                &x,
                0,
                1,
                &[0.2, 0.1, 0.05],
                &r.opts,
            )?;
            let m = r.sc.system.base_dim();
            let ex = DVector::from_fn(m, |i, _| if i == 0 { 1.0 } else { 0.0 });
            let ey = DVector::from_fn(m, |i, _| if i == 1 { 1.0 } else { 0.0 });
            let expect = curvature_formula(&r.sc.system, &r.sc.splitting, 0, &x, &ex, &ey)?.v;
            Ok((
                (result.extrapolated - expect).amax(),
                Some("shrinking rectangles vs exact form".into()),
            ))
        });
    }

    // -- holonomy suite -----------------------------------------------------

    fn suite_holonomy(&mut self) {
        let tol = &self.sc.tolerances;
        if let Some((curve, expected)) = self.sc.meta.expected_loop_angle.clone() {
            self.run(Suite::Holonomy, "loop-angle", tol.holonomy_angle, move |r| {
                let c = r.sc.curve(&curve)?;
                let u0 = r.fiber_start();
                let (_, end) = holonomy_loop(&r.sc.system, &r.sc.splitting, c, &u0, &r.opts)?;
                let angle = end
                    .and_then(|g| g.rotation_angle())
                    .ok_or_else(|| Error::validation("loop_angle", "no rotation angle"))?;
                Ok((
                    (angle - expected).abs(),
                    Some(format!("angle {angle:.8}, oracle {expected:.8}")),
                ))
            });
        }
        if self.sc.system.base_dim() >= 2 && self.sc.meta.complete {
            if let Some(expected_rank) = self.sc.meta.expected_holonomy_rank {
                self.run(Suite::Holonomy, "algebra-rank", 0.5, move |r| {
                    let mut rng = r.rng();
                    let n_paths = if expected_rank > 1 { 20 } else { 3 };
                    let mut paths = Vec::new();
                    for _ in 0..n_paths {
                        let mid =
                            r.box_point(&[rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)]);
                        let end =
                            r.box_point(&[rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)]);
                        paths.push(Curve::polyline(
                            0,
                            &[DVector::zeros(r.sc.system.base_dim()), mid, end],
                        ));
                    }
                    let est = holonomy_algebra_sample(
                        &r.sc.system,
                        &r.sc.splitting,
                        &paths,
                        &r.opts,
                    )?;
                    Ok((
                        (est.rank as f64 - expected_rank as f64).abs(),
                        Some(format!(
                            "rank {} (expected {expected_rank}), worst membership {:.3e}",
                            est.rank, est.worst_projection_residual
                        )),
                    ))
                });
            }
            self.run(Suite::Holonomy, "ad-pullback", tol.ad_pullback, |r| {
                let c = r.random_curve();
                let d = r.sc.system.algebra_dim();
                let mut rng = r.rng();
                let v = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0f64));
                Ok((
                    ad_pullback_check(
                        &r.sc.system,
                        &r.sc.splitting,
                        &c,
                        &v,
                        &[0.5, 1.0],
                        3,
                        &r.opts,
                    )?,
                    Some("flow conjugation vs adjoint formula".into()),
                ))
            });
            self.run(Suite::Holonomy, "claim2-projection", tol.claim2, |r| {
                let x = r.box_point(&[0.55, 0.5]);
                let m = r.sc.system.base_dim();
                let ex = DVector::from_fn(m, |i, _| if i == 0 { 1.0 } else { 0.0 });
                let ey = DVector::from_fn(m, |i, _| if i == 1 { 1.0 } else { 0.0 });
                let grid = [0.1, 0.2];
                Ok((
                    claim2_check(
                        &r.sc.system,
                        &r.sc.splitting,
                        0,
                        &x,
                        &ex,
                        &ey,
                        &grid,
                        &grid,
                        3,
                        300,
                    )?,
                    Some("flow-commutator derivative stays in the algebra".into()),
                ))
            });
        } else if self.sc.system.base_dim() < 2 {
            self.skip(
                Suite::Holonomy,
                "claim2-projection",
                "one-dimensional base: no tangent pairs",
            );
        }
    }

    // -- universal suite ------------------------------------------------------

    fn suite_universal(&mut self) {
        let tol = &self.sc.tolerances;
        self.run(Suite::Universal, "kappa-roundtrip", 1e-14, |r| {
            let mut rng = r.rng();
            let m = r.sc.system.base_dim();
            let d = r.sc.system.algebra_dim();
            let mut worst = 0.0f64;
            for _ in 0..25 {
                let x = r.box_point(&[rng.gen_range(0.3..0.7)]);
                let foot = ConnPoint::of_splitting(
                    &r.sc.splitting,
                    crate::system::BasePoint::new(0, x),
                );
                let xi = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0f64));
                let tangent = TangentC::new(
                    foot,
                    xi.clone(),
                    nalgebra::DMatrix::from_fn(d, m, |_, _| rng.gen_range(-1.0..1.0f64)),
                )?;
                let a = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0f64));
                let (hb, hv) = kappa_inv(&tangent, &a);
                let back = kappa(&tangent, &hb, &hv)?;
                worst = worst.max((back - a).amax());
            }
            Ok((worst, None))
        });
        self.run(Suite::Universal, "relatedness", tol.relatedness, |r| {
            Ok((
                relatedness_check(&r.sc.system, &r.sc.splitting, 100, r.cfg.seed)?,
                Some("lift and projection through the section".into()),
            ))
        });
        self.run(
            Suite::Universal,
            "vertical-triviality",
            tol.vertical_transport,
            |r| {
                let x = r.box_point(&[0.5]);
                let at = crate::system::BasePoint::new(0, x.clone());
                let from = r.sc.splitting.value(0, &x);
                let to = &from * 3.0 + nalgebra::DMatrix::from_element(from.nrows(), from.ncols(), 0.4);
                let e0 = r.fiber_start();
                let result = universal_transport(
                    &r.sc.system,
                    &ConnCurve::Vertical { at, from, to },
                    1.0,
                    &e0,
                    &r.opts,
                )?;
                Ok((
                    (result.end_fiber() - &e0)
                        .amax()
                        .max(result.error_estimate),
                    None,
                ))
            },
        );
        if self.sc.meta.complete {
            self.run(
                Suite::Universal,
                "transport-factorization",
                tol.universal_factorization,
                |r| {
                    let c = r.random_curve();
                    let e0 = r.fiber_start();
                    Ok((
                        universal_factorization_residual(
                            &r.sc.system,
                            &r.sc.splitting,
                            &c,
                            1.0,
                            &e0,
                            &r.opts,
                        )?,
                        None,
                    ))
                },
            );
            self.run(Suite::Universal, "via-universal", tol.via_universal, |r| {
                let c = r.random_curve();
                let e0 = r.fiber_start();
                let mut worst = 0.0f64;
                let mut rng = r.rng();
                let taus = vec![
                    r.sc.splitting.scaled(2.0),
                    Splitting::random_polynomial(&r.sc.system, 0.4, &mut rng),
                ];
                for tau in &taus {
                    let via = transport_via_universal(
                        &r.sc.system,
                        tau,
                        &r.sc.splitting,
                        &c,
                        1.0,
                        &e0,
                        &r.opts,
                    )?;
                    let direct =
                        transport_direct(&r.sc.system, tau, &c, 1.0, &e0, &r.opts)?;
                    worst = worst.max((via - direct.end_fiber()).norm());
                }
                Ok((worst, Some("universal route vs direct transport".into())))
            });
        } else {
            self.skip(
                Suite::Universal,
                "transport-factorization",
                "incomplete scenario: transport escapes by design",
            );
        }
    }

    // -- reconstruction suite --------------------------------------------------

    fn suite_reconstruction(&mut self) {
        let tol = &self.sc.tolerances;
        let ratlas = match self.sc.radial_atlas() {
            Ok(r) => r,
            Err(e) => {
                self.skip(
                    Suite::Reconstruction,
                    "cocycle",
                    &format!("no radial atlas: {e}"),
                );
                return;
            }
        };
        if !self.sc.meta.complete {
            self.skip(
                Suite::Reconstruction,
                "cocycle",
                "incomplete scenario: transports escape by design",
            );
            return;
        }
        let ratlas2 = ratlas.clone();
        self.run(Suite::Reconstruction, "cocycle", tol.cocycle, move |r| {
            let cocycle = crate::reconstruction::build_cocycle(
                &r.sc.system,
                &r.sc.splitting,
                &ratlas2,
                4,
                &r.opts,
            )?;
            Ok((
                cocycle.worst_residual,
                Some(format!(
                    "{} overlap entries",
                    cocycle.entries.values().map(|v| v.len()).sum::<usize>()
                )),
            ))
        });
        let ratlas3 = ratlas.clone();
        self.run(
            Suite::Reconstruction,
            "atlas-consistency",
            tol.reconstruction_agreement,
            move |r| {
                Ok((
                    crate::reconstruction::atlas_consistency_residual(
                        &r.sc.system,
                        &r.sc.splitting,
                        &ratlas3,
                        &r.opts,
                    )?,
                    None,
                ))
            },
        );
        self.run(
            Suite::Reconstruction,
            "fundamental-projection",
            tol.fundamental_projection,
            |r| {
                let mut worst = 0.0f64;
                let m = r.sc.system.base_dim();
                for chart in 0..r.sc.system.base.charts.len() {
                    for x in r.sc.system.base.charts[chart].sample_grid(2, 0.4) {
                        for dir in 0..m {
                            let mut xi = DVector::zeros(m);
                            xi[dir] = 1.0;
                            let (_, res) = crate::reconstruction::fundamental_field_projection(
                                &r.sc.system,
                                &r.sc.splitting,
                                chart,
                                &x,
                                &xi,
                                8,
                                r.cfg.seed,
                            )?;
                            worst = worst.max(res);
                        }
                    }
                }
                Ok((worst, Some("Christoffel fields are fundamental".into())))
            },
        );
        if self.sc.splitting.is_zero() {
            let ratlas4 = ratlas.clone();
            self.run(
                Suite::Reconstruction,
                "round-trip-transports",
                tol.reconstruction_agreement,
                move |r| {
                    let curves: Vec<&Curve> = r.sc.curves.values().collect();
                    Ok((
                        crate::reconstruction::round_trip_residual(
                            &r.sc.system,
                            &r.sc.splitting,
                            &ratlas4,
                            &curves,
                            &r.opts,
                        )?,
                        Some("atlas elements intertwine old and new transports".into()),
                    ))
                },
            );
        } else {
            self.skip(
                Suite::Reconstruction,
                "round-trip-transports",
                "round trip compares flat connections; splitting is nonzero",
            );
        }
    }
}

/// Run the selected suites over a scenario. Failures become report entries,
/// never errors; the exit-code mapping lives with the caller.
pub fn run_check_suite(sc: &Scenario, suites: &[Suite], cfg: &SuiteConfig) -> Report {
    let mut runner = Runner {
        sc,
        cfg: *cfg,
        opts: TransportOptions::with_steps(cfg.steps_per_unit),
        entries: Vec::new(),
        check_index: 0,
    };
    for suite in suites {
        match suite {
            Suite::System => runner.suite_system(),
            Suite::Transport => runner.suite_transport(),
            Suite::Curvature => runner.suite_curvature(),
            Suite::Holonomy => runner.suite_holonomy(),
            Suite::Universal => runner.suite_universal(),
            Suite::Reconstruction => runner.suite_reconstruction(),
        }
    }
    let all_passed = runner.entries.iter().all(|e| e.status != "fail");
    Report {
        schema: REPORT_SCHEMA,
        scenario: sc.name.clone(),
        seed: cfg.seed,
        steps_per_unit: cfg.steps_per_unit,
        tol_scale: cfg.tol_scale,
        all_passed,
        entries: runner.entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::load_scenario;

    #[test]
    fn trivial_scenario_passes_everything_with_tiny_residuals() {
        let sc = load_scenario("trivial").unwrap();
        let cfg = SuiteConfig {
            steps_per_unit: 300,
            ..SuiteConfig::default()
        };
        let report = run_check_suite(&sc, &Suite::all(), &cfg);
        assert!(report.all_passed, "{}", report.to_json());
        for e in &report.entries {
            if e.status == "pass" {
                assert!(
                    e.residual < 1e-10 || e.tolerance >= 0.5,
                    "{}: residual {}",
                    e.name,
                    e.residual
                );
            }
        }
    }

    #[test]
    fn abelian_area_holonomy_suite_reports_unit_angle() {
        let sc = load_scenario("abelian-area").unwrap();
        let cfg = SuiteConfig {
            steps_per_unit: 1000,
            ..SuiteConfig::default()
        };
        let report = run_check_suite(&sc, &[Suite::Holonomy], &cfg);
        assert!(report.all_passed, "{}", report.to_json());
        let loop_entry = report
            .entries
            .iter()
            .find(|e| e.name == "loop-angle")
            .unwrap();
        assert!(loop_entry.residual < 1e-6);
    }

    #[test]
    fn incomplete_interval_escape_reports_as_pass() {
        let sc = load_scenario("incomplete-interval").unwrap();
        let report = run_check_suite(&sc, &[Suite::Transport, Suite::System], &SuiteConfig::default());
        assert!(report.all_passed, "{}", report.to_json());
        let escape = report
            .entries
            .iter()
            .find(|e| e.name == "expected-escape")
            .unwrap();
        assert_eq!(escape.status, "pass");
        assert!(escape.residual < 1e-3);
    }

    #[test]
    fn reports_are_byte_identical_for_equal_inputs() {
        let sc = load_scenario("abelian-area").unwrap();
        let cfg = SuiteConfig {
            steps_per_unit: 200,
            ..SuiteConfig::default()
        };
        let a = run_check_suite(&sc, &[Suite::Transport, Suite::Curvature], &cfg);
        let b = run_check_suite(&sc, &[Suite::Transport, Suite::Curvature], &cfg);
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn csv_output_has_a_row_per_entry() {
        let sc = load_scenario("trivial").unwrap();
        let cfg = SuiteConfig {
            steps_per_unit: 100,
            ..SuiteConfig::default()
        };
        let report = run_check_suite(&sc, &[Suite::System], &cfg);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), report.entries.len() + 1);
    }
}
