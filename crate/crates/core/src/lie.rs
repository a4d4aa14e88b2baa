//! Finite-dimensional Lie algebras via structure constants, matrix groups,
//! exponential and logarithm, adjoint action, left-invariant ODE integration
//! and fundamental vector fields of actions.
//!
//! Convention, fixed once and used everywhere: actions are treated as *right*
//! actions internally, realized by matrices through `act(s, g) = g^{-1} s`
//! (affine-augmented when offsets are present). With that choice the group
//! generator of a basis element is `M(e_i) = -augmented(A_i)`, which is a Lie
//! algebra homomorphism whenever the representation is bracket-compatible,
//! and the transport equation is the left-invariant ODE `g' = g M(xi(t))`.
//! Left actions are handled by negation at the scenario layer.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{AffineField, Model, VectorField};

pub const AD_PROJECTION_TOL: f64 = 1e-8;
pub const JACOBI_TOL: f64 = 1e-12;
pub const REP_BRACKET_TOL: f64 = 1e-9;
pub const GROUP_MEMBERSHIP_TOL: f64 = 1e-9;

/// Lie algebra given by structure constants `[e_i, e_j] = sum_k c[i][j][k] e_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LieAlgebra {
    dim: usize,
    /// Row-major table: entry `i * dim + j` holds `[e_i, e_j]` as a vector.
    table: Vec<DVector<f64>>,
}

impl LieAlgebra {
    /// Build from the full table; antisymmetry must hold exactly and the
    /// Jacobi identity within `1e-12`.
    pub fn new(dim: usize, table: Vec<DVector<f64>>) -> Result<Self> {
        if table.len() != dim * dim || table.iter().any(|v| v.len() != dim) {
            return Err(Error::validation(
                "structure_shape",
                "structure table must be dim x dim vectors of length dim",
            ));
        }
        let alg = LieAlgebra { dim, table };
        alg.check_antisymmetry()?;
        alg.check_jacobi()?;
        Ok(alg)
    }

    /// Build from entries for `i < j`; the rest follows by antisymmetry.
    pub fn from_upper(dim: usize, entries: &[(usize, usize, DVector<f64>)]) -> Result<Self> {
        let mut table = vec![DVector::zeros(dim); dim * dim];
        for (i, j, v) in entries {
            if *i >= dim || *j >= dim || *i == *j {
                return Err(Error::validation("structure_index", "bad bracket index"));
            }
            table[i * dim + j] = v.clone();
            table[j * dim + i] = -v;
        }
        LieAlgebra::new(dim, table)
    }

    pub fn abelian(dim: usize) -> Self {
        LieAlgebra {
            dim,
            table: vec![DVector::zeros(dim); dim * dim],
        }
    }

    /// so(3) with `[e1,e2]=e3, [e2,e3]=e1, [e3,e1]=e2`.
    pub fn so3() -> Self {
        let e = |k: usize| {
            let mut v = DVector::zeros(3);
            v[k] = 1.0;
            v
        };
        LieAlgebra::from_upper(3, &[(0, 1, e(2)), (1, 2, e(0)), (0, 2, -e(1))]).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn structure(&self, i: usize, j: usize) -> &DVector<f64> {
        &self.table[i * self.dim + j]
    }

    /// `[v, w]` by structure-constant contraction.
    pub fn bracket(&self, v: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim || w.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: if v.len() != self.dim { v.len() } else { w.len() },
            });
        }
        let mut out = DVector::zeros(self.dim);
        for i in 0..self.dim {
            if v[i] == 0.0 {
                continue;
            }
            for j in 0..self.dim {
                if w[j] == 0.0 {
                    continue;
                }
                out += v[i] * w[j] * self.structure(i, j);
            }
        }
        Ok(out)
    }

    fn check_antisymmetry(&self) -> Result<()> {
        for i in 0..self.dim {
            for j in 0..self.dim {
                let forward = self.structure(i, j);
                let backward = self.structure(j, i);
                if (forward + backward).amax() != 0.0 {
                    return Err(Error::validation(
                        "antisymmetry",
                        format!("c[{i}][{j}] != -c[{j}][{i}]"),
                    ));
                }
            }
        }
        Ok(())
    }

    fn check_jacobi(&self) -> Result<()> {
        let basis: Vec<DVector<f64>> = (0..self.dim)
            .map(|k| {
                let mut v = DVector::zeros(self.dim);
                v[k] = 1.0;
                v
            })
            .collect();
        for i in 0..self.dim {
            for j in 0..self.dim {
                for k in 0..self.dim {
                    let r = self.bracket(&basis[i], self.structure(j, k))?
                        + self.bracket(&basis[j], self.structure(k, i))?
                        + self.bracket(&basis[k], self.structure(i, j))?;
                    if r.amax() > JACOBI_TOL {
                        return Err(Error::validation(
                            "jacobi",
                            format!("residual {} at ({i},{j},{k})", r.amax()),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Realization of the algebra as affine vector fields `s -> A_i s + b_i` on
/// the fiber, one per basis element.
#[derive(Clone, Debug)]
pub struct Representation {
    pub algebra: LieAlgebra,
    pub generators: Vec<AffineField>,
}

impl Representation {
    pub fn new(algebra: LieAlgebra, generators: Vec<AffineField>) -> Result<Self> {
        if generators.len() != algebra.dim() {
            return Err(Error::DimensionMismatch {
                expected: algebra.dim(),
                got: generators.len(),
            });
        }
        let rep = Representation { algebra, generators };
        rep.check_bracket_compatibility()?;
        Ok(rep)
    }

    pub fn fiber_dim(&self) -> usize {
        self.generators
            .first()
            .map(|g| g.offset.len())
            .unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.algebra.dim()
    }

    /// The fiber field realizing `v` under the action.
    pub fn fundamental_field(&self, v: &DVector<f64>) -> Result<AffineField> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let k = self.fiber_dim();
        let mut linear = DMatrix::zeros(k, k);
        let mut offset = DVector::zeros(k);
        for (i, g) in self.generators.iter().enumerate() {
            if v[i] != 0.0 {
                linear += v[i] * &g.linear;
                offset += v[i] * &g.offset;
            }
        }
        Ok(AffineField::new(linear, offset))
    }

    /// Whether any generator carries a translation part; if so group elements
    /// live in the affine-augmented matrix group.
    pub fn needs_augmentation(&self) -> bool {
        self.generators.iter().any(|g| g.offset.amax() != 0.0)
    }

    /// The matrix of the fiber field of `v`, augmented when the family is
    /// genuinely affine.
    pub fn action_matrix(&self, v: &DVector<f64>) -> Result<DMatrix<f64>> {
        let f = self.fundamental_field(v)?;
        Ok(if self.needs_augmentation() {
            f.augmented()
        } else {
            f.linear
        })
    }

    /// Group generators `M(e_i) = -action_matrix(e_i)`; a Lie algebra
    /// homomorphism into matrices for bracket-compatible representations.
    pub fn group_generators(&self) -> Vec<DMatrix<f64>> {
        (0..self.dim())
            .map(|i| {
                let mut v = DVector::zeros(self.dim());
                v[i] = 1.0;
                -self.action_matrix(&v).expect("basis vector")
            })
            .collect()
    }

    /// Field-bracket compatibility `[rho(v), rho(w)] = rho([v,w]^V)`, exact
    /// for the affine family.
    pub fn check_bracket_compatibility(&self) -> Result<()> {
        let d = self.dim();
        for i in 0..d {
            for j in (i + 1)..d {
                let field_bracket =
                    crate::geometry::affine_bracket(&self.generators[i], &self.generators[j]);
                let algebra_side = self.fundamental_field(self.algebra.structure(i, j))?;
                let res = (&field_bracket.linear - &algebra_side.linear).amax().max(
                    (&field_bracket.offset - &algebra_side.offset).amax(),
                );
                if res > REP_BRACKET_TOL {
                    return Err(Error::validation(
                        "bracket_compat",
                        format!("generators {i},{j}: residual {res:.3e}"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Tangency of all generator fields to the model (spheres need it).
    pub fn check_tangency(&self, model: &Model, samples: usize, seed: u64) -> Result<()> {
        if !matches!(model, Model::Sphere) {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples {
            let mut p = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0f64));
            let n = p.norm();
            if n < 1e-6 {
                continue;
            }
            p /= n;
            for (i, g) in self.generators.iter().enumerate() {
                let v = g.eval(&p);
                if p.dot(&v).abs() > 1e-9 {
                    return Err(Error::validation(
                        "tangency",
                        format!("generator {i} not tangent to the sphere"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Matrix group flavor: drives membership residuals, retraction and inverses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKind {
    /// Orthogonal with determinant +1.
    Rotation,
    /// Augmented affine matrices: last row `(0, ..., 0, 1)`.
    AffineAug,
    /// No structure assumed; monitored by the blow-up bound only.
    General,
}

/// Element of a declared matrix group.
#[derive(Clone, Debug)]
pub struct GroupElement {
    pub mat: DMatrix<f64>,
    pub kind: GroupKind,
}

impl GroupElement {
    pub fn identity(n: usize, kind: GroupKind) -> Self {
        GroupElement {
            mat: DMatrix::identity(n, n),
            kind,
        }
    }

    pub fn new(mat: DMatrix<f64>, kind: GroupKind) -> Self {
        GroupElement { mat, kind }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    /// Distance from the declared group manifold.
    pub fn membership_residual(&self) -> f64 {
        let n = self.dim();
        match self.kind {
            GroupKind::Rotation => {
                let gram = self.mat.transpose() * &self.mat - DMatrix::identity(n, n);
                let det_defect = (self.mat.determinant() - 1.0).abs();
                gram.amax().max(det_defect)
            }
            GroupKind::AffineAug => {
                let mut res: f64 = (self.mat[(n - 1, n - 1)] - 1.0).abs();
                for j in 0..n - 1 {
                    res = res.max(self.mat[(n - 1, j)].abs());
                }
                res
            }
            GroupKind::General => 0.0,
        }
    }

    /// Retract onto the group manifold (used after every integration step).
    pub fn project(&mut self) {
        let n = self.dim();
        match self.kind {
            GroupKind::Rotation => {
                // Nearest rotation via SVD polar factor.
                let svd = self.mat.clone().svd(true, true);
                let u = svd.u.as_ref().expect("svd u");
                let vt = svd.v_t.as_ref().expect("svd v_t");
                let mut r = u * vt;
                if r.determinant() < 0.0 {
                    // Flip the last column of U to land in SO(n).
                    let mut u2 = u.clone();
                    let last = u2.ncols() - 1;
                    for i in 0..u2.nrows() {
                        u2[(i, last)] = -u2[(i, last)];
                    }
                    r = u2 * vt;
                }
                self.mat = r;
            }
            GroupKind::AffineAug => {
                for j in 0..n - 1 {
                    self.mat[(n - 1, j)] = 0.0;
                }
                self.mat[(n - 1, n - 1)] = 1.0;
            }
            GroupKind::General => {}
        }
    }

    pub fn inverse(&self) -> Result<GroupElement> {
        let mat = match self.kind {
            GroupKind::Rotation => self.mat.transpose(),
            _ => self
                .mat
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::validation("group_inverse", "singular group element"))?,
        };
        Ok(GroupElement {
            mat,
            kind: self.kind,
        })
    }

    pub fn compose(&self, rhs: &GroupElement) -> GroupElement {
        GroupElement {
            mat: &self.mat * &rhs.mat,
            kind: self.kind,
        }
    }

    /// Apply this element to a fiber point by plain (augmented) left matrix
    /// action `s -> g s`; the retraction of `model` is applied afterwards.
    pub fn apply_fiber(&self, s: &DVector<f64>, model: &Model) -> DVector<f64> {
        let n = self.dim();
        let mut out = if s.len() + 1 == n {
            let mut aug = DVector::zeros(n);
            aug.rows_mut(0, s.len()).copy_from(s);
            aug[n - 1] = 1.0;
            let r = &self.mat * aug;
            r.rows(0, s.len()).into_owned()
        } else {
            assert_eq!(s.len(), n, "group element size does not match fiber");
            &self.mat * s
        };
        let dom = crate::geometry::FlowDomain {
            model: model.clone(),
            restriction: None,
            blowup_bound: f64::INFINITY,
        };
        dom.post_step(&mut out);
        out
    }

    /// Rotation angle of a 2x2 rotation block (atan2 convention).
    pub fn rotation_angle(&self) -> Option<f64> {
        if self.dim() == 2 {
            Some(self.mat[(1, 0)].atan2(self.mat[(0, 0)]))
        } else {
            None
        }
    }
}

/// Sampled group-valued path with `g(t_0) = e`.
#[derive(Clone, Debug)]
pub struct GroupPath {
    pub times: Vec<f64>,
    pub elems: Vec<GroupElement>,
}

impl GroupPath {
    pub fn end(&self) -> &GroupElement {
        self.elems.last().expect("non-empty path")
    }
}

/// Matrix exponential by scaling-and-squaring with a series core;
/// `|exp(v) exp(-v) - I| < 1e-10` across the working range.
pub fn exp_matrix(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "exp of a square matrix");
    let norm = a.amax() * n as f64;
    let squarings = if norm > 0.25 {
        ((norm / 0.25).log2().ceil() as i32).max(0)
    } else {
        0
    };
    let b = a / 2f64.powi(squarings);
    let mut acc = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=24 {
        term = (&term * &b) / k as f64;
        acc += &term;
        if term.amax() < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        acc = &acc * &acc;
    }
    acc
}

/// Principal matrix logarithm by inverse scaling-and-squaring: repeated
/// Denman-Beavers square roots until `|g - I|` is small, then the Mercator
/// series. Restricted to elements near the identity component;
/// rotations with angle >= pi report [`Error::LogBranchError`].
pub fn log_matrix(g: &GroupElement) -> Result<DMatrix<f64>> {
    let n = g.dim();
    if g.kind == GroupKind::Rotation {
        // Principal-branch guard: rotation angle below pi means trace > -(n - 2).
        let tr = g.mat.trace();
        if tr <= -(n as f64 - 2.0) + 1e-9 {
            return Err(Error::LogBranchError);
        }
    }
    let mut y = g.mat.clone();
    let mut squarings = 0u32;
    while (&y - DMatrix::identity(n, n)).amax() > 0.35 {
        if squarings >= 40 {
            return Err(Error::LogBranchError);
        }
        y = denman_beavers_sqrt(&y)?;
        squarings += 1;
    }
    let x = &y - DMatrix::identity(n, n);
    let mut acc = DMatrix::zeros(n, n);
    let mut pow = DMatrix::identity(n, n);
    for k in 1..=40 {
        pow = &pow * &x;
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        acc += (sign / k as f64) * &pow;
        if pow.amax() < 1e-18 {
            break;
        }
    }
    Ok(acc * 2f64.powi(squarings as i32))
}

fn denman_beavers_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let mut y = m.clone();
    let mut z = DMatrix::identity(n, n);
    for _ in 0..60 {
        let y_inv = y
            .clone()
            .try_inverse()
            .ok_or(Error::LogBranchError)?;
        let z_inv = z
            .clone()
            .try_inverse()
            .ok_or(Error::LogBranchError)?;
        let y_next = 0.5 * (&y + z_inv);
        let z_next = 0.5 * (&z + y_inv);
        let delta = (&y_next - &y).amax();
        y = y_next;
        z = z_next;
        if delta < 1e-15 {
            break;
        }
    }
    Ok(y)
}

/// Least-squares projection of `target` onto `span{basis}`; returns the
/// coefficients and the absolute residual in the max norm.
pub fn project_onto_matrix_span(
    basis: &[DMatrix<f64>],
    target: &DMatrix<f64>,
) -> (DVector<f64>, f64) {
    let rows = target.nrows() * target.ncols();
    let mut a = DMatrix::zeros(rows, basis.len());
    for (j, b) in basis.iter().enumerate() {
        for (i, v) in b.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let rhs = DVector::from_column_slice(target.as_slice());
    let coeffs = lstsq(&a, &rhs);
    let residual = (&a * &coeffs - &rhs).amax();
    (coeffs, residual)
}

/// Minimum-norm least squares via SVD.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    lstsq_with_cutoff(a, b, 1e-12)
}

/// Minimum-norm least squares dropping singular values below
/// `rel_cutoff * sigma_max`; finite-difference systems need a generous
/// cutoff so noise along collapsed directions is not amplified.
pub fn lstsq_with_cutoff(a: &DMatrix<f64>, b: &DVector<f64>, rel_cutoff: f64) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = if smax > 0.0 { rel_cutoff * smax } else { rel_cutoff };
    svd.solve(b, eps).expect("svd solve")
}

/// Adjoint action `Ad(g) v`: conjugate the group generator of `v` and
/// re-express in the basis; the residual gate detects scenarios whose algebra
/// is not closed under this conjugation.
pub fn adjoint(rep: &Representation, g: &GroupElement, v: &DVector<f64>) -> Result<DVector<f64>> {
    let (coeffs, residual) = adjoint_with_residual(rep, g, v)?;
    if residual > AD_PROJECTION_TOL {
        return Err(Error::BasisProjectionError {
            residual,
            tolerance: AD_PROJECTION_TOL,
        });
    }
    Ok(coeffs)
}

pub fn adjoint_with_residual(
    rep: &Representation,
    g: &GroupElement,
    v: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let gens = rep.group_generators();
    let m_v = -rep.action_matrix(v)?;
    let conj = &g.mat * m_v * g.inverse()?.mat;
    Ok(project_onto_matrix_span(&gens, &conj))
}

/// Solve the left-invariant equation `g'(t) = g(t) M(xi(t))`, `g(0) = e`,
/// by RK4 with a per-step retraction onto the group manifold.
pub fn integrate_left_invariant(
    xi: &dyn Fn(f64) -> DVector<f64>,
    generators: &[DMatrix<f64>],
    kind: GroupKind,
    t1: f64,
    steps: usize,
) -> Result<GroupPath> {
    assert!(steps >= 1, "steps must be >= 1");
    let n = generators
        .first()
        .map(|m| m.nrows())
        .expect("at least one generator");
    let m_of = |t: f64| -> DMatrix<f64> {
        let coeffs = xi(t);
        let mut m = DMatrix::zeros(n, n);
        for (i, gen) in generators.iter().enumerate() {
            if coeffs[i] != 0.0 {
                m += coeffs[i] * gen;
            }
        }
        m
    };
    let h = t1 / steps as f64;
    let mut g = DMatrix::identity(n, n);
    let mut times = Vec::with_capacity(steps + 1);
    let mut elems = Vec::with_capacity(steps + 1);
    times.push(0.0);
    elems.push(GroupElement::identity(n, kind));
    for i in 0..steps {
        let t = i as f64 * h;
        let k1 = &g * m_of(t);
        let k2 = (&g + 0.5 * h * &k1) * m_of(t + 0.5 * h);
        let k3 = (&g + 0.5 * h * &k2) * m_of(t + 0.5 * h);
        let k4 = (&g + h * &k3) * m_of(t + h);
        g += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        let mut elem = GroupElement::new(g.clone(), kind);
        elem.project();
        g = elem.mat.clone();
        if g.amax() > crate::geometry::DEFAULT_BLOWUP_BOUND {
            return Err(Error::EscapeDetected {
                t_escape: t + h,
                last: DVector::from_column_slice(g.as_slice()),
            });
        }
        times.push(t + h);
        elems.push(elem);
    }
    Ok(GroupPath { times, elems })
}
