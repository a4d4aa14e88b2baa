//! Multivariate polynomial maps with exact derivatives.
//!
//! Section data, splitting components and base vector fields are all drawn
//! from this family, so every derivative a bracket or curvature formula needs
//! is available in closed form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::LieAlgebra;

/// One monomial `coeff * x^powers` contributing to output component `out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyTerm {
    pub out: usize,
    pub coeff: f64,
    pub powers: Vec<u32>,
}

/// Polynomial map `R^n_in -> R^n_out` stored as a sparse list of monomials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyMap {
    pub n_in: usize,
    pub n_out: usize,
    pub terms: Vec<PolyTerm>,
}

impl PolyMap {
    pub fn zero(n_in: usize, n_out: usize) -> Self {
        PolyMap {
            n_in,
            n_out,
            terms: Vec::new(),
        }
    }

    /// Constant map `x -> values`.
    pub fn constant(n_in: usize, values: &DVector<f64>) -> Self {
        let terms = values
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(out, c)| PolyTerm {
                out,
                coeff: *c,
                powers: vec![0; n_in],
            })
            .collect();
        PolyMap {
            n_in,
            n_out: values.len(),
            terms,
        }
    }

    /// Affine map `x -> a x + b`.
    pub fn affine(a: &DMatrix<f64>, b: &DVector<f64>) -> Self {
        let (n_out, n_in) = a.shape();
        assert_eq!(b.len(), n_out);
        let mut terms = Vec::new();
        for r in 0..n_out {
            for c in 0..n_in {
                if a[(r, c)] != 0.0 {
                    let mut powers = vec![0; n_in];
                    powers[c] = 1;
                    terms.push(PolyTerm {
                        out: r,
                        coeff: a[(r, c)],
                        powers,
                    });
                }
            }
            if b[r] != 0.0 {
                terms.push(PolyTerm {
                    out: r,
                    coeff: b[r],
                    powers: vec![0; n_in],
                });
            }
        }
        PolyMap { n_in, n_out, terms }
    }

    /// Single monomial convenience constructor.
    pub fn monomial(n_in: usize, n_out: usize, out: usize, coeff: f64, powers: &[u32]) -> Self {
        assert_eq!(powers.len(), n_in);
        assert!(out < n_out);
        PolyMap {
            n_in,
            n_out,
            terms: vec![PolyTerm {
                out,
                coeff,
                powers: powers.to_vec(),
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.terms {
            if t.out >= self.n_out || t.powers.len() != self.n_in {
                return Err(Error::validation(
                    "poly_shape",
                    format!(
                        "term targets output {} with {} exponents; map is {} -> {}",
                        t.out,
                        t.powers.len(),
                        self.n_in,
                        self.n_out
                    ),
                ));
            }
            if !t.coeff.is_finite() {
                return Err(Error::validation("poly_coeff", "non-finite coefficient"));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.coeff == 0.0)
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.n_in);
        let mut out = DVector::zeros(self.n_out);
        for t in &self.terms {
            let mut m = t.coeff;
            for (k, &p) in t.powers.iter().enumerate() {
                if p > 0 {
                    m *= x[k].powi(p as i32);
                }
            }
            out[t.out] += m;
        }
        out
    }

    /// Exact Jacobian at `x`.
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.n_out, self.n_in);
        for t in &self.terms {
            for j in 0..self.n_in {
                let pj = t.powers[j];
                if pj == 0 {
                    continue;
                }
                let mut m = t.coeff * pj as f64;
                for (k, &p) in t.powers.iter().enumerate() {
                    let p_eff = if k == j { p - 1 } else { p };
                    if p_eff > 0 {
                        m *= x[k].powi(p_eff as i32);
                    }
                }
                jac[(t.out, j)] += m;
            }
        }
        jac
    }

    /// Symbolic partial derivative with respect to input `j`.
    pub fn partial(&self, j: usize) -> PolyMap {
        assert!(j < self.n_in);
        let mut terms = Vec::new();
        for t in &self.terms {
            if t.powers[j] == 0 {
                continue;
            }
            let mut powers = t.powers.clone();
            powers[j] -= 1;
            terms.push(PolyTerm {
                out: t.out,
                coeff: t.coeff * t.powers[j] as f64,
                powers,
            });
        }
        PolyMap {
            n_in: self.n_in,
            n_out: self.n_out,
            terms,
        }
        .normalized()
    }

    pub fn add(&self, other: &PolyMap) -> PolyMap {
        assert_eq!(self.n_in, other.n_in);
        assert_eq!(self.n_out, other.n_out);
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        PolyMap {
            n_in: self.n_in,
            n_out: self.n_out,
            terms,
        }
        .normalized()
    }

    pub fn scale(&self, s: f64) -> PolyMap {
        let terms = self
            .terms
            .iter()
            .map(|t| PolyTerm {
                out: t.out,
                coeff: s * t.coeff,
                powers: t.powers.clone(),
            })
            .collect();
        PolyMap {
            n_in: self.n_in,
            n_out: self.n_out,
            terms,
        }
    }

    /// Collect like monomials and drop zero coefficients.
    pub fn normalized(mut self) -> PolyMap {
        self.terms
            .sort_by(|a, b| (a.out, &a.powers).cmp(&(b.out, &b.powers)));
        let mut merged: Vec<PolyTerm> = Vec::with_capacity(self.terms.len());
        for t in self.terms.into_iter() {
            if let Some(last) = merged.last_mut() {
                if last.out == t.out && last.powers == t.powers {
                    last.coeff += t.coeff;
                    continue;
                }
            }
            merged.push(t);
        }
        merged.retain(|t| t.coeff != 0.0);
        self.terms = merged;
        self
    }

    /// Scalar component `r` as a single-output map.
    fn component(&self, r: usize) -> PolyMap {
        let terms = self
            .terms
            .iter()
            .filter(|t| t.out == r)
            .map(|t| PolyTerm {
                out: 0,
                coeff: t.coeff,
                powers: t.powers.clone(),
            })
            .collect();
        PolyMap {
            n_in: self.n_in,
            n_out: 1,
            terms,
        }
    }

    pub fn max_degree(&self) -> u32 {
        self.terms
            .iter()
            .map(|t| t.powers.iter().sum())
            .max()
            .unwrap_or(0)
    }
}

/// Product of two scalar (single-output) polynomials, routed to output `out`.
fn scalar_product(a: &PolyMap, b: &PolyMap, out: usize) -> Vec<PolyTerm> {
    let mut terms = Vec::with_capacity(a.terms.len() * b.terms.len());
    for ta in &a.terms {
        for tb in &b.terms {
            let powers = ta
                .powers
                .iter()
                .zip(tb.powers.iter())
                .map(|(x, y)| x + y)
                .collect();
            terms.push(PolyTerm {
                out,
                coeff: ta.coeff * tb.coeff,
                powers,
            });
        }
    }
    terms
}

/// Directional derivative `x -> Df(x) . g(x)` of `f: R^m -> R^n` along the
/// vector field `g: R^m -> R^m`, exact.
pub fn directional_derivative(f: &PolyMap, g: &PolyMap) -> PolyMap {
    assert_eq!(f.n_in, g.n_in);
    assert_eq!(g.n_out, g.n_in);
    let mut terms = Vec::new();
    for r in 0..f.n_out {
        for i in 0..f.n_in {
            let dfi = f.component(r).partial(i);
            terms.extend(scalar_product(&dfi, &g.component(i), r));
        }
    }
    PolyMap {
        n_in: f.n_in,
        n_out: f.n_out,
        terms,
    }
    .normalized()
}

/// Lie bracket `[x, y] = Dy.x - Dx.y` of two polynomial vector fields, exact.
pub fn poly_bracket(x: &PolyMap, y: &PolyMap) -> PolyMap {
    assert_eq!(x.n_in, x.n_out);
    assert_eq!(y.n_in, y.n_out);
    assert_eq!(x.n_in, y.n_in);
    directional_derivative(y, x).add(&directional_derivative(x, y).scale(-1.0))
}

/// Pointwise algebra bracket of two polynomial `V`-valued maps:
/// `x -> [v(x), w(x)]^V`, exact via the structure constants.
pub fn pointwise_algebra_bracket(v: &PolyMap, w: &PolyMap, algebra: &LieAlgebra) -> PolyMap {
    assert_eq!(v.n_out, algebra.dim());
    assert_eq!(w.n_out, algebra.dim());
    assert_eq!(v.n_in, w.n_in);
    let d = algebra.dim();
    let mut terms = Vec::new();
    for a in 0..d {
        for b in 0..d {
            let cab = algebra.structure(a, b);
            for r in 0..d {
                if cab[r] == 0.0 {
                    continue;
                }
                let prod = scalar_product(&v.component(a), &w.component(b), r);
                terms.extend(prod.into_iter().map(|mut t| {
                    t.coeff *= cab[r];
                    t
                }));
            }
        }
    }
    PolyMap {
        n_in: v.n_in,
        n_out: d,
        terms,
    }
    .normalized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    #[test]
    fn eval_and_jacobian_match_hand_values() {
        // f(x, y) = (x^2 y, 3y)
        let f = PolyMap::monomial(2, 2, 0, 1.0, &[2, 1]).add(&PolyMap::monomial(
            2,
            2,
            1,
            3.0,
            &[0, 1],
        ));
        let p = dvector![2.0, 5.0];
        let v = f.eval(&p);
        assert_relative_eq!(v[0], 20.0);
        assert_relative_eq!(v[1], 15.0);
        let j = f.jacobian(&p);
        assert_relative_eq!(j[(0, 0)], 20.0); // 2xy
        assert_relative_eq!(j[(0, 1)], 4.0); // x^2
        assert_relative_eq!(j[(1, 1)], 3.0);
    }

    #[test]
    fn partial_matches_jacobian_column() {
        let f = PolyMap::monomial(2, 1, 0, 2.5, &[3, 2]);
        let p = dvector![1.3, -0.7];
        let dx = f.partial(0).eval(&p);
        let j = f.jacobian(&p);
        assert_relative_eq!(dx[0], j[(0, 0)], epsilon = 1e-14);
    }

    #[test]
    fn bracket_of_linear_fields_is_matrix_commutator() {
        // X(s) = A s, Y(s) = B s with [X,Y](s) = (BA - AB) s.
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let x = PolyMap::affine(&a, &DVector::zeros(2));
        let y = PolyMap::affine(&b, &DVector::zeros(2));
        let br = poly_bracket(&x, &y);
        let p = dvector![0.3, -1.1];
        let expect = (&b * &a - &a * &b) * &p;
        let got = br.eval(&p);
        assert_relative_eq!((got - expect).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn directional_derivative_is_exact() {
        // f(x,y) = x y, g = (y, -x): Df.g = y*y - x*x
        let f = PolyMap::monomial(2, 1, 0, 1.0, &[1, 1]);
        let g = PolyMap::monomial(2, 2, 0, 1.0, &[0, 1]).add(&PolyMap::monomial(
            2,
            2,
            1,
            -1.0,
            &[1, 0],
        ));
        let d = directional_derivative(&f, &g);
        let p = dvector![2.0, 3.0];
        assert_relative_eq!(d.eval(&p)[0], 9.0 - 4.0, epsilon = 1e-14);
    }
}
