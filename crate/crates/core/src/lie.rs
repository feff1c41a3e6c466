//! Finite-dimensional Lie algebra data for the type-A series.
//!
//! Everything downstream (differential-operator realizations, free-field
//! currents, correlator blocks) consumes this struct rather than recomputing
//! root-system facts.  The construction works in the defining representation
//! of sl(l+1): root vectors are matrix units, the invariant form is the trace
//! form (which already satisfies `(alpha|alpha) = 2` for all roots and
//! `(e_alpha | e_{-alpha}) = 1`), and structure constants come out as exact
//! integers.  Weights are stored as rational coordinate vectors in the basis
//! of simple roots.

use crate::scalar::{qi, Q};
use num_traits::{One, Zero};
use serde::Serialize;
use std::collections::BTreeMap;

/// Dense small matrix over the rationals (defining representation).
pub type Mat = Vec<Vec<Q>>;

/// A weight written in simple-root coordinates.
pub type Weight = Vec<Q>;

pub fn mat_zero(n: usize) -> Mat {
    vec![vec![Q::zero(); n]; n]
}

pub fn mat_unit(n: usize, i: usize, j: usize) -> Mat {
    let mut m = mat_zero(n);
    m[i][j] = Q::one();
    m
}

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let mut out = mat_zero(n);
    for i in 0..n {
        for (k, aik) in a[i].iter().enumerate() {
            if aik.is_zero() {
                continue;
            }
            for j in 0..n {
                if !b[k][j].is_zero() {
                    out[i][j] += aik * &b[k][j];
                }
            }
        }
    }
    out
}

pub fn mat_sub(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x - y).collect())
        .collect()
}

pub fn mat_bracket(a: &Mat, b: &Mat) -> Mat {
    mat_sub(&mat_mul(a, b), &mat_mul(b, a))
}

pub fn mat_trace_prod(a: &Mat, b: &Mat) -> Q {
    let n = a.len();
    let mut t = Q::zero();
    for i in 0..n {
        for k in 0..n {
            if !a[i][k].is_zero() && !b[k][i].is_zero() {
                t += &a[i][k] * &b[k][i];
            }
        }
    }
    t
}

pub fn mat_is_zero(a: &Mat) -> bool {
    a.iter().all(|r| r.iter().all(|x| x.is_zero()))
}

/// One positive root together with its matrix-unit position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Root {
    /// Coefficients over the simple roots (all 0/1 in type A).
    pub coords: Vec<i64>,
    pub height: usize,
    /// `e_alpha = E_{row,col}` in the defining representation.
    pub row: usize,
    pub col: usize,
}

/// Index into the Chevalley basis `e_alpha (alpha > 0), e_{-alpha}, H_i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BasisIdx {
    Pos(usize),
    Neg(usize),
    Cartan(usize),
}

#[derive(Debug, thiserror::Error)]
pub enum LieError {
    #[error("unsupported algebra label `{0}`; expected A1, A2, A3, ...")]
    BadLabel(String),
}

/// Immutable root-system and structure-constant package.
#[derive(Clone, Debug)]
pub struct LieAlgebra {
    pub label: String,
    pub rank: usize,
    /// Size of the defining representation (`rank + 1`).
    pub n: usize,
    pub dual_coxeter: i64,
    /// Positive roots ordered by height, then by descending coordinate tuple
    /// (so the simple roots come in index order).
    pub positive_roots: Vec<Root>,
    /// Symmetrized Cartan matrix = Gram matrix of the simple roots.
    pub gram: Vec<Vec<Q>>,
    pub gram_inv: Vec<Vec<Q>>,
    /// Half the sum of the positive roots, in simple-root coordinates.
    pub rho: Weight,
    /// Bracket table over [`BasisIdx`] order: positives, negatives, Cartan.
    bracket: Vec<Vec<Vec<(usize, Q)>>>,
    /// Invariant (trace) form on the same index order.
    form: Vec<Vec<Q>>,
    /// `root_sum[a][b] = Some(c)` when `alpha_a + alpha_b = alpha_c`.
    root_sum: Vec<Vec<Option<usize>>>,
    /// Scaling applied to each `e_alpha` relative to the raw matrix unit.
    /// The trace form already gives `(e_alpha|e_{-alpha}) = 1`, so these are 1.
    pub basis_normalization: Vec<Q>,
}

impl LieAlgebra {
    /// Build `A_l` from a label like "A1" or "A2".
    pub fn from_label(label: &str) -> Result<LieAlgebra, LieError> {
        let rest = label
            .strip_prefix('A')
            .or_else(|| label.strip_prefix('a'))
            .ok_or_else(|| LieError::BadLabel(label.into()))?;
        let l: usize = rest.parse().map_err(|_| LieError::BadLabel(label.into()))?;
        if l == 0 || l > 6 {
            return Err(LieError::BadLabel(label.into()));
        }
        Ok(Self::type_a(l))
    }

    /// Build `A_l = sl(l+1)` with matrix-unit root vectors.
    pub fn type_a(l: usize) -> LieAlgebra {
        let n = l + 1;
        let mut roots = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                let mut coords = vec![0i64; l];
                for c in coords.iter_mut().take(b).skip(a) {
                    *c = 1;
                }
                roots.push(Root {
                    height: b - a,
                    coords,
                    row: a,
                    col: b,
                });
            }
        }
        roots.sort_by(|x, y| {
            x.height
                .cmp(&y.height)
                .then_with(|| y.coords.cmp(&x.coords))
        });

        let s = roots.len();
        let dim = 2 * s + l;
        let basis: Vec<Mat> = (0..dim)
            .map(|i| Self::basis_matrix_raw(&roots, n, Self::idx_of(i, s)))
            .collect();

        let mut gram = vec![vec![Q::zero(); l]; l];
        for i in 0..l {
            for j in 0..l {
                let d = i as i64 - j as i64;
                gram[i][j] = match d.abs() {
                    0 => qi(2),
                    1 => qi(-1),
                    _ => Q::zero(),
                };
            }
        }
        let gram_inv = invert_rational(&gram);

        let mut rho = vec![Q::zero(); l];
        for r in &roots {
            for (i, c) in r.coords.iter().enumerate() {
                rho[i] += Q::new((*c).into(), 2.into());
            }
        }

        let mut root_lookup: BTreeMap<Vec<i64>, usize> = BTreeMap::new();
        for (k, r) in roots.iter().enumerate() {
            root_lookup.insert(r.coords.clone(), k);
        }
        let mut root_sum = vec![vec![None; s]; s];
        for a in 0..s {
            for b in 0..s {
                let sum: Vec<i64> = roots[a]
                    .coords
                    .iter()
                    .zip(&roots[b].coords)
                    .map(|(x, y)| x + y)
                    .collect();
                root_sum[a][b] = root_lookup.get(&sum).copied();
            }
        }

        let mut bracket = vec![vec![Vec::new(); dim]; dim];
        let mut form = vec![vec![Q::zero(); dim]; dim];
        for a in 0..dim {
            for b in 0..dim {
                form[a][b] = mat_trace_prod(&basis[a], &basis[b]);
                let br = mat_bracket(&basis[a], &basis[b]);
                bracket[a][b] = Self::decompose_raw(&roots, l, &br);
            }
        }

        LieAlgebra {
            label: format!("A{l}"),
            rank: l,
            n,
            dual_coxeter: n as i64,
            positive_roots: roots,
            gram,
            gram_inv,
            rho,
            bracket,
            form,
            root_sum,
            basis_normalization: vec![Q::one(); s],
        }
    }

    pub fn num_positive_roots(&self) -> usize {
        self.positive_roots.len()
    }

    pub fn dim(&self) -> usize {
        2 * self.num_positive_roots() + self.rank
    }

    fn idx_of(flat: usize, s: usize) -> BasisIdx {
        if flat < s {
            BasisIdx::Pos(flat)
        } else if flat < 2 * s {
            BasisIdx::Neg(flat - s)
        } else {
            BasisIdx::Cartan(flat - 2 * s)
        }
    }

    pub fn flat_index(&self, idx: BasisIdx) -> usize {
        let s = self.num_positive_roots();
        match idx {
            BasisIdx::Pos(k) => k,
            BasisIdx::Neg(k) => s + k,
            BasisIdx::Cartan(i) => 2 * s + i,
        }
    }

    pub fn basis_index(&self, flat: usize) -> BasisIdx {
        Self::idx_of(flat, self.num_positive_roots())
    }

    fn basis_matrix_raw(roots: &[Root], n: usize, idx: BasisIdx) -> Mat {
        match idx {
            BasisIdx::Pos(k) => mat_unit(n, roots[k].row, roots[k].col),
            BasisIdx::Neg(k) => mat_unit(n, roots[k].col, roots[k].row),
            BasisIdx::Cartan(i) => {
                let mut m = mat_zero(n);
                m[i][i] = Q::one();
                m[i + 1][i + 1] = -Q::one();
                m
            }
        }
    }

    /// Matrix of a basis element in the defining representation.
    pub fn basis_matrix(&self, idx: BasisIdx) -> Mat {
        Self::basis_matrix_raw(&self.positive_roots, self.n, idx)
    }

    /// Expand a traceless matrix over the Chevalley basis.
    pub fn decompose(&self, m: &Mat) -> Vec<(usize, Q)> {
        Self::decompose_raw(&self.positive_roots, self.rank, m)
    }

    fn decompose_raw(roots: &[Root], l: usize, m: &Mat) -> Vec<(usize, Q)> {
        let s = roots.len();
        let mut out = Vec::new();
        for (k, r) in roots.iter().enumerate() {
            if !m[r.row][r.col].is_zero() {
                out.push((k, m[r.row][r.col].clone()));
            }
            if !m[r.col][r.row].is_zero() {
                out.push((s + k, m[r.col][r.row].clone()));
            }
        }
        // diag(d_1..d_n) traceless decomposes with H_i-coefficient d_1+..+d_i.
        let mut partial = Q::zero();
        for i in 0..l {
            partial += &m[i][i];
            if !partial.is_zero() {
                out.push((2 * s + i, partial.clone()));
            }
        }
        out
    }

    /// Structure constants of `[x_a, x_b]` over flat basis indices.
    pub fn bracket(&self, a: usize, b: usize) -> &[(usize, Q)] {
        &self.bracket[a][b]
    }

    /// Invariant form `(x_a | x_b)` over flat basis indices.
    pub fn form(&self, a: usize, b: usize) -> &Q {
        &self.form[a][b]
    }

    /// `f` such that `[e_alpha, e_beta] = f e_{alpha+beta}` for positive roots.
    pub fn f_const(&self, a: usize, b: usize) -> Option<(usize, Q)> {
        let c = self.root_sum[a][b]?;
        let fa = self.flat_index(BasisIdx::Pos(a));
        let fb = self.flat_index(BasisIdx::Pos(b));
        let fc = self.flat_index(BasisIdx::Pos(c));
        let coef = self
            .bracket(fa, fb)
            .iter()
            .find(|(i, _)| *i == fc)
            .map(|(_, q)| q.clone())
            .unwrap_or_else(Q::zero);
        Some((c, coef))
    }

    /// Index of `alpha_a + alpha_b` among the positive roots, if it is one.
    pub fn root_sum(&self, a: usize, b: usize) -> Option<usize> {
        self.root_sum[a][b]
    }

    /// Pick for each non-simple positive root a decomposition
    /// `alpha = alpha_i + beta` with non-vanishing structure constant.
    pub fn root_chain(&self, k: usize) -> Option<(usize, usize, Q)> {
        if self.positive_roots[k].height == 1 {
            return None;
        }
        for i in 0..self.rank {
            // simple root index among positive roots is i (height-1 prefix)
            for b in 0..self.num_positive_roots() {
                if self.root_sum[i][b] == Some(k) {
                    if let Some((_, f)) = self.f_const(i, b) {
                        if !f.is_zero() {
                            return Some((i, b, f));
                        }
                    }
                }
            }
        }
        None
    }

    /// Inner product of two weights in simple-root coordinates.
    pub fn weight_inner(&self, mu: &[Q], nu: &[Q]) -> Q {
        let mut acc = Q::zero();
        for i in 0..self.rank {
            for j in 0..self.rank {
                if !mu[i].is_zero() && !nu[j].is_zero() {
                    acc += &mu[i] * &self.gram[i][j] * &nu[j];
                }
            }
        }
        acc
    }

    /// `mu(H_i)` — evaluation on the i-th coroot (= `(mu|alpha_i)` in type A).
    pub fn weight_on_coroot(&self, mu: &[Q], i: usize) -> Q {
        let mut acc = Q::zero();
        for j in 0..self.rank {
            if !mu[j].is_zero() {
                acc += &mu[j] * &self.gram[j][i];
            }
        }
        acc
    }

    /// Coordinates of the k-th positive root as a rational weight.
    pub fn root_weight(&self, k: usize) -> Weight {
        self.positive_roots[k]
            .coords
            .iter()
            .map(|c| qi(*c))
            .collect()
    }

    /// `2 rho` as a weight.
    pub fn two_rho(&self) -> Weight {
        self.rho.iter().map(|c| c * qi(2)).collect()
    }

    /// Simple-root coordinates of the dual Cartan basis element `H^i`
    /// (so that `(H^i | H_j) = delta_ij`), expressed over the `H_j`.
    pub fn dual_cartan(&self, i: usize) -> Vec<Q> {
        self.gram_inv[i].clone()
    }

    /// Casimir eigenvalue datum `(lambda | lambda + 2 rho)`.
    pub fn casimir_eigenvalue(&self, lambda: &[Q]) -> Q {
        let shifted: Vec<Q> = lambda
            .iter()
            .zip(self.two_rho())
            .map(|(a, b)| a + b)
            .collect();
        self.weight_inner(lambda, &shifted)
    }

    /// Rows express an orthonormal Cartan basis over the coroots `H_j`
    /// (numeric; used by the torus-trace and KZB paths).
    pub fn orthonormal_cartan(&self) -> Vec<Vec<f64>> {
        let l = self.rank;
        let g: Vec<Vec<f64>> = self
            .gram
            .iter()
            .map(|row| row.iter().map(crate::scalar::rat_to_f64).collect())
            .collect();
        // Gram–Schmidt over the coroot basis with inner product G.
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(l);
        for i in 0..l {
            let mut v = vec![0.0; l];
            v[i] = 1.0;
            for prev in &rows {
                let mut ip = 0.0;
                for a in 0..l {
                    for b in 0..l {
                        ip += v[a] * g[a][b] * prev[b];
                    }
                }
                for (va, pa) in v.iter_mut().zip(prev) {
                    *va -= ip * pa;
                }
            }
            let mut nrm = 0.0;
            for a in 0..l {
                for b in 0..l {
                    nrm += v[a] * g[a][b] * v[b];
                }
            }
            let nrm = nrm.sqrt();
            for va in v.iter_mut() {
                *va /= nrm;
            }
            rows.push(v);
        }
        rows
    }

    /// JSON-friendly summary of the constructed data.
    pub fn describe(&self) -> AlgebraSummary {
        AlgebraSummary {
            label: self.label.clone(),
            rank: self.rank,
            dimension: self.dim(),
            dual_coxeter: self.dual_coxeter,
            positive_roots: self.positive_roots.clone(),
            cartan_matrix: self
                .gram
                .iter()
                .map(|r| r.iter().map(|q| q.to_string()).collect())
                .collect(),
            rho: self.rho.iter().map(|q| q.to_string()).collect(),
            basis_normalization: self
                .basis_normalization
                .iter()
                .map(|q| q.to_string())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AlgebraSummary {
    pub label: String,
    pub rank: usize,
    pub dimension: usize,
    pub dual_coxeter: i64,
    pub positive_roots: Vec<Root>,
    pub cartan_matrix: Vec<Vec<String>>,
    pub rho: Vec<String>,
    pub basis_normalization: Vec<String>,
}

/// Invert a small rational matrix by Gauss–Jordan elimination.
pub fn invert_rational(m: &Mat) -> Mat {
    let n = m.len();
    let mut a = m.clone();
    let mut inv = mat_zero(n);
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = Q::one();
    }
    for col in 0..n {
        let pivot = (col..n)
            .find(|&r| !a[r][col].is_zero())
            .expect("matrix is singular");
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col].clone();
        for j in 0..n {
            a[col][j] = &a[col][j] / &p;
            inv[col][j] = &inv[col][j] / &p;
        }
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = a[r][col].clone();
                for j in 0..n {
                    let s = &a[col][j] * &f;
                    a[r][j] -= s;
                    let s = &inv[col][j] * &f;
                    inv[r][j] -= s;
                }
            }
        }
    }
    inv
}
