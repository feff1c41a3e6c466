//! First-order differential-operator realization of a type-A Lie algebra on
//! polynomials over the big cell of the flag manifold.
//!
//! The unipotent chart is the ordered product `n(x) = prod_beta exp(x^beta
//! e_beta)` over the positive roots (height first, simple roots in index
//! order).  Conjugating a generator by `n(x)` and splitting off the
//! strictly-upper part yields the vector-field coefficients through a
//! triangular solve in root height; the Borel part contributes the
//! weight-dependent multiplication term.  Everything is exact: coefficients
//! live in [`Poly`] over any [`Scalar`] ring, so the homomorphism property can
//! be checked with a symbolic weight.

use crate::lie::{BasisIdx, LieAlgebra};
use crate::poly::{DiffOp, Poly};
use crate::scalar::{Scalar, SymPoly};

#[derive(Debug, thiserror::Error)]
pub enum FlagError {
    #[error("weight vector has length {got}, expected rank {want}")]
    BadWeightLength { got: usize, want: usize },
    #[error("triangular solve over root height left a nonzero remainder")]
    SolveRemainder,
    #[error("realization is not a homomorphism at basis pair ({0}, {1})")]
    NotHomomorphism(usize, usize),
    #[error("constant vector 1 is not a highest-weight vector: {0}")]
    NotHighestWeight(String),
}

/// Matrix with polynomial entries (defining representation over the chart).
type PMat<S> = Vec<Vec<Poly<S>>>;

fn pmat_zero<S: Scalar>(n: usize, nv: usize) -> PMat<S> {
    vec![vec![Poly::zero(nv); n]; n]
}

fn pmat_identity<S: Scalar>(n: usize, nv: usize) -> PMat<S> {
    let mut m = pmat_zero(n, nv);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = Poly::one(nv);
    }
    m
}

fn pmat_mul<S: Scalar>(a: &PMat<S>, b: &PMat<S>) -> PMat<S> {
    let n = a.len();
    let nv = a[0][0].nvars();
    let mut out = pmat_zero(n, nv);
    for i in 0..n {
        for k in 0..n {
            if a[i][k].is_zero() {
                continue;
            }
            for j in 0..n {
                if !b[k][j].is_zero() {
                    out[i][j] = out[i][j].add(&a[i][k].mul(&b[k][j]));
                }
            }
        }
    }
    out
}

fn pmat_is_zero<S: Scalar>(a: &PMat<S>) -> bool {
    a.iter().all(|r| r.iter().all(Poly::is_zero))
}

/// Realization data: one operator per basis element plus the screenings.
#[derive(Clone, Debug)]
pub struct Realization<S: Scalar> {
    pub algebra: LieAlgebra,
    /// Weight evaluated on the coroots, `lambda[i] = lambda(H_i)`.
    pub lambda: Vec<S>,
    ops: Vec<DiffOp<S>>,
    screenings: Vec<DiffOp<S>>,
}

impl<S: Scalar> Realization<S> {
    /// Build the realization for the given weight values `lambda(H_i)`.
    pub fn new(algebra: &LieAlgebra, lambda: Vec<S>) -> Result<Self, FlagError> {
        if lambda.len() != algebra.rank {
            return Err(FlagError::BadWeightLength {
                got: lambda.len(),
                want: algebra.rank,
            });
        }
        let s = algebra.num_positive_roots();
        let n = algebra.n;

        // chart n(x) = prod_k (1 + x_k e_k) in the positive-root order, and
        // its inverse via the nilpotent Neumann series
        let mut chart = pmat_identity::<S>(n, s);
        for (k, root) in algebra.positive_roots.iter().enumerate() {
            let mut factor = pmat_identity::<S>(n, s);
            factor[root.row][root.col] = Poly::var(s, k);
            chart = pmat_mul(&chart, &factor);
        }
        let mut nilpotent = chart.clone();
        for (i, row) in nilpotent.iter_mut().enumerate() {
            row[i] = row[i].sub(&Poly::one(s));
        }
        let mut chart_inv = pmat_identity::<S>(n, s);
        let mut power = pmat_identity::<S>(n, s);
        for step in 1..n {
            power = pmat_mul(&power, &nilpotent);
            for (ri, row) in power.iter().enumerate() {
                for (ci, p) in row.iter().enumerate() {
                    chart_inv[ri][ci] = if step % 2 == 1 {
                        chart_inv[ri][ci].sub(p)
                    } else {
                        chart_inv[ri][ci].add(p)
                    };
                }
            }
        }

        // chart vector fields V_k = (d chart / d x_k) chart^{-1}
        let vmats: Vec<PMat<S>> = (0..s)
            .map(|k| {
                let d: PMat<S> = chart
                    .iter()
                    .map(|row| row.iter().map(|p| p.derivative(k)).collect())
                    .collect();
                pmat_mul(&d, &chart_inv)
            })
            .collect();

        let solve = |mut upper: PMat<S>| -> Result<Vec<Poly<S>>, FlagError> {
            let mut coeffs = Vec::with_capacity(s);
            for (k, root) in algebra.positive_roots.iter().enumerate() {
                let c = upper[root.row][root.col].clone();
                if !c.is_zero() {
                    for (ri, row) in vmats[k].iter().enumerate() {
                        for (ci, p) in row.iter().enumerate() {
                            if !p.is_zero() {
                                upper[ri][ci] = upper[ri][ci].sub(&c.mul(p));
                            }
                        }
                    }
                }
                coeffs.push(c);
            }
            if pmat_is_zero(&upper) {
                Ok(coeffs)
            } else {
                Err(FlagError::SolveRemainder)
            }
        };

        let strict_upper = |m: &PMat<S>| -> PMat<S> {
            let mut out = pmat_zero(n, s);
            for i in 0..n {
                for j in (i + 1)..n {
                    out[i][j] = m[i][j].clone();
                }
            }
            out
        };

        let mut ops = Vec::with_capacity(algebra.dim());
        for flat in 0..algebra.dim() {
            let idx = algebra.basis_index(flat);
            let xm = algebra.basis_matrix(idx);
            let xp: PMat<S> = xm
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|q| Poly::constant(s, S::from_rat(q)))
                        .collect()
                })
                .collect();
            let ad = pmat_mul(&pmat_mul(&chart, &xp), &chart_inv);
            let first = solve(strict_upper(&ad))?;
            // Borel part: the weight kills the strictly-lower piece, so only
            // the diagonal survives; diag(d_1..d_n) has H_i-coefficient
            // d_1 + .. + d_i.
            let mut zeroth = Poly::zero(s);
            let mut partial = Poly::zero(s);
            for i in 0..algebra.rank {
                partial = partial.add(&ad[i][i]);
                if !partial.is_zero() {
                    zeroth = zeroth.add(&partial.scale(&lambda[i]));
                }
            }
            ops.push(DiffOp { first, zeroth });
        }

        // screening vector fields: expand the constant generator e_{alpha}
        // over the chart fields and flip the sign; one per positive root
        let mut screenings = Vec::with_capacity(s);
        for i in 0..s {
            let root = &algebra.positive_roots[i];
            let mut target = pmat_zero(n, s);
            target[root.row][root.col] = Poly::one(s);
            let coeffs = solve(target)?;
            screenings.push(DiffOp {
                first: coeffs.into_iter().map(|p| p.neg()).collect(),
                zeroth: Poly::zero(s),
            });
        }

        Ok(Realization {
            algebra: algebra.clone(),
            lambda,
            ops,
            screenings,
        })
    }

    /// Operator realizing a basis element.
    pub fn op(&self, idx: BasisIdx) -> &DiffOp<S> {
        &self.ops[self.algebra.flat_index(idx)]
    }

    /// Screening vector field attached to the i-th simple root.
    pub fn screening(&self, i: usize) -> &DiffOp<S> {
        &self.screenings[i]
    }

    /// Screening vector field attached to an arbitrary positive root index.
    pub fn screening_root(&self, k: usize) -> &DiffOp<S> {
        &self.screenings[k]
    }

    /// Pairing with the highest-weight vector: the constant term.
    pub fn hw_pairing(p: &Poly<S>) -> S {
        p.constant_term()
    }

    /// Apply `Scr_{w[0]} Scr_{w[1]} .. Scr_{w[m-1]}` (last entry innermost).
    pub fn screen_word(&self, word: &[usize], p: &Poly<S>) -> Poly<S> {
        let mut out = p.clone();
        for &i in word.iter().rev() {
            out = self.screenings[i].apply(&out);
        }
        out
    }

    /// Apply raising operators `E_{w[0]} E_{w[1]} .. E_{w[m-1]}` the same way.
    pub fn raise_word(&self, word: &[usize], p: &Poly<S>) -> Poly<S> {
        let mut out = p.clone();
        for &i in word.iter().rev() {
            out = self.op(BasisIdx::Pos(i)).apply(&out);
        }
        out
    }

    /// Check `[R(x_a), R(x_b)] = R([x_a, x_b])` over all basis pairs.
    pub fn verify_homomorphism(&self) -> Result<(), FlagError> {
        let dim = self.algebra.dim();
        let s = self.algebra.num_positive_roots();
        for a in 0..dim {
            for b in (a + 1)..dim {
                let lhs = self.ops[a].commutator(&self.ops[b]);
                let mut rhs = DiffOp::zero(s);
                for (m, c) in self.algebra.bracket(a, b) {
                    rhs = rhs.add(&self.ops[*m].scale(&S::from_rat(c)));
                }
                if !lhs.sub(&rhs).is_zero() {
                    return Err(FlagError::NotHomomorphism(a, b));
                }
            }
        }
        Ok(())
    }

    /// Check that the constant polynomial is a highest-weight vector:
    /// raising operators kill it and coroots scale it by the weight.
    pub fn verify_highest_weight(&self) -> Result<(), FlagError> {
        let s = self.algebra.num_positive_roots();
        let one = Poly::one(s);
        for k in 0..s {
            if !self.op(BasisIdx::Pos(k)).apply(&one).is_zero() {
                return Err(FlagError::NotHighestWeight(format!(
                    "raising operator {k} does not annihilate 1"
                )));
            }
        }
        for i in 0..self.algebra.rank {
            let got = self.op(BasisIdx::Cartan(i)).apply(&one);
            let want = Poly::constant(s, self.lambda[i].clone());
            if got != want {
                return Err(FlagError::NotHighestWeight(format!(
                    "coroot {i} acts with the wrong eigenvalue"
                )));
            }
        }
        Ok(())
    }
}

/// Realization with fully symbolic weight components `lambda_i`.
pub fn symbolic_realization(algebra: &LieAlgebra) -> Result<Realization<SymPoly>, FlagError> {
    let lambda: Vec<SymPoly> = (0..algebra.rank)
        .map(SymPoly::lambda)
        .collect();
    Realization::new(algebra, lambda)
}
