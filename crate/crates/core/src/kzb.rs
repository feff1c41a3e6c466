//! Flatness-equation kernels and residual checks on the torus.
//!
//! The closed-form conformal block produced by [`crate::corr::integrand`],
//! integrated over a twisted cycle in the screening variables, solves a
//! system of three differential equations: a weight-zero constraint, one
//! first-order equation per insertion point, and a heat equation in the
//! nome.  This module supplies the pieces needed to check that numerically:
//!
//! - [`PolyModule`]: a degree-truncated polynomial module carrying the
//!   finite-dimensional representation each insertion point transforms in;
//! - [`omega_kernel`] / [`h_kernel`] / [`h_kernel_diag`]: the elliptic
//!   two-point kernels as matrices on tensor products of those modules,
//!   including the finite coincident-point limit;
//! - [`pi_factor`]: the free-field normalization prefactor;
//! - [`pochhammer_integral`]: quadrature over a double-commutator cycle
//!   with parallel transport of the integrand's branch choices;
//! - [`kzb_residual`]: finite-difference residuals of all three equations
//!   for the rank-one two-point block with a single screening.

use crate::corr::{self, CorrError, CorrValue};
use crate::flagdiff::{FlagError, Realization};
use crate::lie::{BasisIdx, LieAlgebra, Weight};
use crate::poly::Poly;
use crate::scalar::{qi, rat_to_f64, Q};
use crate::special;
use num_complex::Complex64;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

/// Errors raised while assembling kernels or integrating over cycles.
#[derive(Debug, Error)]
pub enum KzbError {
    #[error(transparent)]
    Corr(#[from] CorrError),
    #[error(transparent)]
    Flag(#[from] FlagError),
    #[error("module is not closed at degree cap {cap}: generator maps degree {from} out of the basis")]
    ModuleNotClosed { cap: u16, from: u16 },
    #[error("cycle does not close in the local system: monodromy defect {0:.3e}")]
    OpenCycle(f64),
    #[error("branch data changed shape along the path: {got} factors after {want}")]
    BranchMismatch { got: usize, want: usize },
    #[error("quadrature did not reach tolerance: error estimate {0:.3e} > {1:.3e}")]
    Quadrature(f64, f64),
    #[error("{0}")]
    Config(String),
}

fn re(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

// ---------------------------------------------------------------------------
// Truncated polynomial modules
// ---------------------------------------------------------------------------

/// A degree-truncated slice `span{ x^e : |e| <= cap }` of the polynomial
/// module of the first-order realization at a numeric weight.
///
/// For weights where the submodule actually closes at the cap (e.g. the
/// two-dimensional rank-one module at half the positive root) the generator
/// matrices are exact; otherwise [`PolyModule::matrix`] reports the escape.
pub struct PolyModule {
    algebra: LieAlgebra,
    real: Realization<Complex64>,
    lambda: Weight,
    basis: Vec<Vec<u16>>,
    weights: Vec<Weight>,
    cap: u16,
}

fn enumerate_exponents(nvars: usize, cap: u16) -> Vec<Vec<u16>> {
    // graded order: total degree first, then lexicographic
    let mut out: Vec<Vec<u16>> = vec![vec![0; nvars]];
    for degree in 1..=cap {
        let mut stack: Vec<Vec<u16>> = vec![Vec::new()];
        for v in 0..nvars {
            let mut next = Vec::new();
            for partial in &stack {
                let used: u16 = partial.iter().sum();
                let room = degree - used;
                let hi = if v + 1 == nvars { room..=room } else { 0..=room };
                for e in hi {
                    let mut p = partial.clone();
                    p.push(e);
                    next.push(p);
                }
            }
            stack = next;
        }
        out.extend(stack);
    }
    out
}

impl PolyModule {
    /// Build the module for a rational weight in simple-root coordinates.
    pub fn new(algebra: &LieAlgebra, lambda: &Weight, cap: u16) -> Result<Self, KzbError> {
        if lambda.len() != algebra.rank {
            return Err(KzbError::Config(format!(
                "weight has {} coordinates, algebra rank is {}",
                lambda.len(),
                algebra.rank
            )));
        }
        let lam_coroot: Vec<Complex64> = (0..algebra.rank)
            .map(|i| re(rat_to_f64(&algebra.weight_on_coroot(lambda, i))))
            .collect();
        let real = Realization::new(algebra, lam_coroot)?;
        let nv = algebra.num_positive_roots();
        let basis = enumerate_exponents(nv, cap);
        let weights = basis
            .iter()
            .map(|e| {
                let mut w = lambda.clone();
                for (k, &ek) in e.iter().enumerate() {
                    if ek == 0 {
                        continue;
                    }
                    let rw = algebra.root_weight(k);
                    for (wi, ri) in w.iter_mut().zip(&rw) {
                        *wi -= ri * qi(ek as i64);
                    }
                }
                w
            })
            .collect();
        Ok(PolyModule {
            algebra: algebra.clone(),
            real,
            lambda: lambda.clone(),
            basis,
            weights,
            cap,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// The realization the module was built from (shared with correlators).
    pub fn realization(&self) -> &Realization<Complex64> {
        &self.real
    }

    pub fn highest_weight(&self) -> &Weight {
        &self.lambda
    }

    /// Exact weight of the `j`-th basis monomial in simple-root coordinates.
    pub fn weight(&self, j: usize) -> &Weight {
        &self.weights[j]
    }

    /// The `j`-th basis monomial as a polynomial insertion.
    pub fn monomial(&self, j: usize) -> Poly<Complex64> {
        Poly::monomial(
            self.algebra.num_positive_roots(),
            self.basis[j].clone(),
            re(1.0),
        )
    }

    fn position(&self, exps: &[u16]) -> Option<usize> {
        self.basis.iter().position(|b| b == exps)
    }

    /// Matrix of a Chevalley generator in the monomial basis, columns
    /// indexed by the source monomial.  Errors if the action leaves the
    /// truncated basis.
    pub fn matrix(&self, idx: BasisIdx) -> Result<Vec<Vec<Complex64>>, KzbError> {
        let d = self.dim();
        let mut m = vec![vec![re(0.0); d]; d];
        for j in 0..d {
            let img = self.real.op(idx).apply(&self.monomial(j));
            for (exps, c) in img.terms() {
                let Some(row) = self.position(exps) else {
                    return Err(KzbError::ModuleNotClosed {
                        cap: self.cap,
                        from: self.basis[j].iter().sum(),
                    });
                };
                m[row][j] += *c;
            }
        }
        Ok(m)
    }

    /// Value of a basis monomial's weight on an orthonormal Cartan element
    /// expressed over the coroots.
    pub fn weight_on_orthonormal(&self, j: usize, hr: &[f64]) -> f64 {
        hr.iter()
            .enumerate()
            .map(|(c, coeff)| coeff * rat_to_f64(&self.algebra.weight_on_coroot(&self.weights[j], c)))
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Two-point kernels as matrices on tensor products
// ---------------------------------------------------------------------------

fn mat_mul(a: &[Vec<Complex64>], b: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
    let n = a.len();
    let mut out = vec![vec![re(0.0); n]; n];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, o) in row.iter_mut().enumerate() {
            for k in 0..n {
                *o += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// One two-point kernel evaluated at a point, stored through its action on
/// component arrays over `V_left (x) V_right`: `entries[a1*dr + b1][a*dr + b]`
/// is the coefficient by which the component at `(a1, b1)` feeds the
/// component at `(a, b)`.
pub struct KernelValue {
    pub dim_left: usize,
    pub dim_right: usize,
    pub entries: Vec<Vec<Complex64>>,
}

impl KernelValue {
    fn zero(dim_left: usize, dim_right: usize) -> Self {
        let n = dim_left * dim_right;
        KernelValue {
            dim_left,
            dim_right,
            entries: vec![vec![re(0.0); n]; n],
        }
    }

    fn add_pair(&mut self, coeff: Complex64, amat: &[Vec<Complex64>], bmat: &[Vec<Complex64>]) {
        let (dl, dr) = (self.dim_left, self.dim_right);
        for a in 0..dl {
            for a1 in 0..dl {
                if amat[a][a1].norm_sqr() == 0.0 {
                    continue;
                }
                for b in 0..dr {
                    for b1 in 0..dr {
                        self.entries[a1 * dr + b1][a * dr + b] += coeff * amat[a][a1] * bmat[b][b1];
                    }
                }
            }
        }
    }

    /// Action on an array of correlator components
    /// `comps[a][b] = Psi(v_a (x) v_b)`, where `a` always indexes the first
    /// insertion point.  `left_is_first` states which insertion point the
    /// kernel's left tensor slot acts on.  Component arrays transform
    /// covariantly: each tensor factor acts through its plain matrix, rows
    /// contracting against the components.
    pub fn co_apply(&self, comps: &[Vec<Complex64>], left_is_first: bool) -> Vec<Vec<Complex64>> {
        let (dl, dr) = (self.dim_left, self.dim_right);
        let (d1, d2) = (comps.len(), comps[0].len());
        if left_is_first {
            assert_eq!((dl, dr), (d1, d2), "kernel/component shape mismatch");
            let mut out = vec![vec![re(0.0); d2]; d1];
            for (a, row) in out.iter_mut().enumerate() {
                for (b, o) in row.iter_mut().enumerate() {
                    for a1 in 0..dl {
                        for b1 in 0..dr {
                            *o += self.entries[a1 * dr + b1][a * dr + b] * comps[a1][b1];
                        }
                    }
                }
            }
            out
        } else {
            // left slot acts on the second insertion point
            assert_eq!((dl, dr), (d2, d1), "kernel/component shape mismatch");
            let mut out = vec![vec![re(0.0); d2]; d1];
            for (a, row) in out.iter_mut().enumerate() {
                for (b, o) in row.iter_mut().enumerate() {
                    for b1 in 0..dl {
                        for a1 in 0..dr {
                            *o += self.entries[b1 * dr + a1][b * dr + a] * comps[a1][b1];
                        }
                    }
                }
            }
            out
        }
    }

    /// True when every nonzero entry preserves the total weight of the pair.
    pub fn preserves_weight(&self, left: &PolyModule, right: &PolyModule) -> bool {
        let (dl, dr) = (self.dim_left, self.dim_right);
        let total = |a: usize, b: usize| -> Weight {
            left.weight(a)
                .iter()
                .zip(right.weight(b))
                .map(|(x, y)| x + y)
                .collect()
        };
        for a1 in 0..dl {
            for b1 in 0..dr {
                for a in 0..dl {
                    for b in 0..dr {
                        let e = self.entries[a1 * dr + b1][a * dr + b];
                        if e.norm() > 1e-14 && total(a1, b1) != total(a, b) {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

/// Matrix of an orthonormal Cartan element on the module (diagonal).
fn cartan_matrix_on(module: &PolyModule, hr: &[f64]) -> Vec<Vec<Complex64>> {
    let d = module.dim();
    let mut m = vec![vec![re(0.0); d]; d];
    for (j, row) in m.iter_mut().enumerate() {
        row[j] = re(module.weight_on_orthonormal(j, hr));
    }
    m
}

struct RootData {
    emat: Vec<Vec<Complex64>>,
    fmat: Vec<Vec<Complex64>>,
    /// value of the root on the twist element
    a: Complex64,
    /// inverse pairing `1/(e|f)` making the two root vectors dual
    inv_form: Complex64,
}

fn root_data(module: &PolyModule, h_values: &[Complex64]) -> Result<Vec<RootData>, KzbError> {
    let algebra = &module.algebra;
    let s = algebra.num_positive_roots();
    (0..s)
        .map(|k| {
            let emat = module.matrix(BasisIdx::Pos(k))?;
            let fmat = module.matrix(BasisIdx::Neg(k))?;
            let a = corr::weight_on_h(&algebra.root_weight(k), h_values);
            let form = algebra.form(algebra.flat_index(BasisIdx::Pos(k)), algebra.flat_index(BasisIdx::Neg(k)));
            Ok(RootData {
                emat,
                fmat,
                a,
                inv_form: re(1.0 / rat_to_f64(form)),
            })
        })
        .collect()
}

/// The first-order connection kernel
/// `Omega(z, w) = -sum_{roots a} sigma_{-a(H)}(z/w) e_a (x) e_{-a}
///               - sum_r zeta(z/w) H_r (x) H_r`
/// as a matrix on `V_left (x) V_right` (left slot sits at `z`).
pub fn omega_kernel(
    z: Complex64,
    w: Complex64,
    q: Complex64,
    h_values: &[Complex64],
    left: &PolyModule,
    right: &PolyModule,
) -> Result<KernelValue, KzbError> {
    special::validate_nome(q).map_err(CorrError::from)?;
    let u = z / w;
    let mut kv = KernelValue::zero(left.dim(), right.dim());
    let roots_l = root_data(left, h_values)?;
    let roots_r = root_data(right, h_values)?;
    for (rl, rr) in roots_l.iter().zip(&roots_r) {
        // positive root: e_a = E, e_{-a} = F, a(H) = a
        let cpos = -special::sigma_kernel(-rl.a, u, q) * rl.inv_form;
        kv.add_pair(cpos, &rl.emat, &rr.fmat);
        // negative root: e_a = F, e_{-a} = E, a(H) = -a
        let cneg = -special::sigma_kernel(rl.a, u, q) * rl.inv_form;
        kv.add_pair(cneg, &rl.fmat, &rr.emat);
    }
    let zeta = special::zeta_kernel(u, q);
    for hr in left.algebra.orthonormal_cartan() {
        let hl = cartan_matrix_on(left, &hr);
        let hrdu = cartan_matrix_on(right, &hr);
        kv.add_pair(-zeta, &hl, &hrdu);
    }
    Ok(kv)
}

/// The heat-equation kernel at distinct points,
/// `H(z, w) = -sum_{roots a} (zeta(e^{a(H)} z/w) - zeta(e^{a(H)}))
///            sigma_{-a(H)}(z/w) e_a (x) e_{-a}
///           - sum_r (zeta(z/w)^2 + (z/w) zeta'(z/w))/2 H_r (x) H_r`.
pub fn h_kernel(
    z: Complex64,
    w: Complex64,
    q: Complex64,
    h_values: &[Complex64],
    left: &PolyModule,
    right: &PolyModule,
) -> Result<KernelValue, KzbError> {
    special::validate_nome(q).map_err(CorrError::from)?;
    let u = z / w;
    let mut kv = KernelValue::zero(left.dim(), right.dim());
    let roots_l = root_data(left, h_values)?;
    let roots_r = root_data(right, h_values)?;
    for (rl, rr) in roots_l.iter().zip(&roots_r) {
        let ea = rl.a.exp();
        let cpos = -(special::zeta_kernel(ea * u, q) - special::zeta_kernel(ea, q))
            * special::sigma_kernel(-rl.a, u, q)
            * rl.inv_form;
        kv.add_pair(cpos, &rl.emat, &rr.fmat);
        let eam = (-rl.a).exp();
        let cneg = -(special::zeta_kernel(eam * u, q) - special::zeta_kernel(eam, q))
            * special::sigma_kernel(rl.a, u, q)
            * rl.inv_form;
        kv.add_pair(cneg, &rl.fmat, &rr.emat);
    }
    let zeta = special::zeta_kernel(u, q);
    let cart = -(zeta * zeta + u * special::zeta_kernel_d1(u, q)) * 0.5;
    for hr in left.algebra.orthonormal_cartan() {
        let hl = cartan_matrix_on(left, &hr);
        let hrm = cartan_matrix_on(right, &hr);
        kv.add_pair(cart, &hl, &hrm);
    }
    Ok(kv)
}

/// How to treat the coincident-point term of the heat-equation kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiagMode {
    /// Keep the full finite limit: root terms and the regular part of the
    /// Cartan term (the double pole cancels exactly).
    FinitePart,
    /// Keep only the root terms of the limit.
    RootOnly,
    /// Drop the coincident-point term entirely.
    Omit,
}

/// Coincident-point limit of [`h_kernel`] as a single-slot operator: both
/// tensor factors act at the same point and compose, so each root term
/// contributes the product `e_a e_{-a}` scaled by
/// `-e^{a(H)} zeta'(e^{a(H)})`, and the Cartan term contributes `H_r H_r`
/// scaled by the finite part of `-(zeta(u)^2 + u zeta'(u))/2` at `u -> 1`.
pub fn h_kernel_diag(
    q: Complex64,
    h_values: &[Complex64],
    module: &PolyModule,
    mode: DiagMode,
) -> Result<Vec<Vec<Complex64>>, KzbError> {
    special::validate_nome(q).map_err(CorrError::from)?;
    let d = module.dim();
    let mut out = vec![vec![re(0.0); d]; d];
    if mode == DiagMode::Omit {
        return Ok(out);
    }
    for rd in root_data(module, h_values)? {
        let ea = rd.a.exp();
        let cpos = -ea * special::zeta_kernel_d1(ea, q) * rd.inv_form;
        // term e_a (x) e_{-a} applied as the product e_{-a} e_a
        let prod = mat_mul(&rd.fmat, &rd.emat);
        for (o, p) in out.iter_mut().flatten().zip(prod.iter().flatten()) {
            *o += cpos * p;
        }
        let eam = (-rd.a).exp();
        let cneg = -eam * special::zeta_kernel_d1(eam, q) * rd.inv_form;
        let prod = mat_mul(&rd.emat, &rd.fmat);
        for (o, p) in out.iter_mut().flatten().zip(prod.iter().flatten()) {
            *o += cneg * p;
        }
    }
    if mode == DiagMode::FinitePart {
        let cart = -special::zeta_sq_diag(q) * 0.5;
        for hr in module.algebra.orthonormal_cartan() {
            let hm = cartan_matrix_on(module, &hr);
            let prod = mat_mul(&hm, &hm);
            for (o, p) in out.iter_mut().flatten().zip(prod.iter().flatten()) {
                *o += cart * p;
            }
        }
    }
    Ok(out)
}

/// Apply a single-slot operator matrix to dual components on one insertion
/// point: `slot 0` contracts the first index, `slot 1` the second.
pub fn co_apply_slot(
    mat: &[Vec<Complex64>],
    comps: &[Vec<Complex64>],
    slot: usize,
) -> Vec<Vec<Complex64>> {
    let (d1, d2) = (comps.len(), comps[0].len());
    let mut out = vec![vec![re(0.0); d2]; d1];
    match slot {
        0 => {
            for (a, row) in out.iter_mut().enumerate() {
                for (b, o) in row.iter_mut().enumerate() {
                    for a1 in 0..d1 {
                        *o += mat[a1][a] * comps[a1][b];
                    }
                }
            }
        }
        1 => {
            for (a, row) in out.iter_mut().enumerate() {
                for (b, o) in row.iter_mut().enumerate() {
                    for b1 in 0..d2 {
                        *o += mat[b1][b] * comps[a][b1];
                    }
                }
            }
        }
        _ => panic!("slot must be 0 or 1"),
    }
    out
}

// ---------------------------------------------------------------------------
// Normalization prefactor
// ---------------------------------------------------------------------------

/// Free-field normalization factor
/// `Pi(q; H) = q^{dim g / 24} (q; q)_inf^rank
///             prod_{a > 0} 2 sinh(a(H)/2)
///             prod_{all roots a} (q e^{a(H)}; q)_inf`.
///
/// Vanishes linearly at `a(H) = 0`, cancelling the ghost character's pole.
pub fn pi_factor(
    algebra: &LieAlgebra,
    q: Complex64,
    h_values: &[Complex64],
) -> Result<Complex64, KzbError> {
    special::validate_nome(q).map_err(CorrError::from)?;
    if h_values.len() != algebra.rank {
        return Err(KzbError::Config(format!(
            "h_values has {} entries, algebra rank is {}",
            h_values.len(),
            algebra.rank
        )));
    }
    let mut out = q.powf(algebra.dim() as f64 / 24.0);
    let qq = special::qpoch(q, q);
    for _ in 0..algebra.rank {
        out *= qq;
    }
    for k in 0..algebra.num_positive_roots() {
        let a = corr::weight_on_h(&algebra.root_weight(k), h_values);
        out *= 2.0 * (a / 2.0).sinh();
        out *= special::qpoch(q * a.exp(), q) * special::qpoch(q * (-a).exp(), q);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Twisted-cycle quadrature
// ---------------------------------------------------------------------------

/// One smooth piece of an oriented integration path, parametrized on [0, 1].
enum PathPiece {
    Line {
        from: Complex64,
        to: Complex64,
    },
    /// Circular arc: angles in radians, traversed linearly from `a0` to
    /// `a1`; `a1 < a0` means clockwise.
    Arc {
        center: Complex64,
        radius: f64,
        a0: f64,
        a1: f64,
    },
}

impl PathPiece {
    fn point(&self, s: f64) -> Complex64 {
        match self {
            PathPiece::Line { from, to } => from + (to - from) * s,
            PathPiece::Arc {
                center,
                radius,
                a0,
                a1,
            } => center + Complex64::from_polar(*radius, a0 + (a1 - a0) * s),
        }
    }

    fn velocity(&self, s: f64) -> Complex64 {
        match self {
            PathPiece::Line { from, to } => to - from,
            PathPiece::Arc {
                center: _,
                radius,
                a0,
                a1,
            } => {
                Complex64::from_polar(*radius, a0 + (a1 - a0) * s)
                    * Complex64::new(0.0, a1 - a0)
            }
        }
    }
}

/// A closed path in the punctured plane along which a multivalued integrand
/// is transported factor by factor.
pub struct TwistedCycle {
    pieces: Vec<PathPiece>,
}

fn loop_pieces(base: Complex64, center: Complex64, radius: f64, ccw: bool) -> Vec<PathPiece> {
    let dir = (base - center) / (base - center).norm();
    let entry = center + dir * radius;
    let a0 = dir.arg();
    let a1 = if ccw { a0 + TAU } else { a0 - TAU };
    vec![
        PathPiece::Line { from: base, to: entry },
        PathPiece::Arc {
            center,
            radius,
            a0,
            a1,
        },
        PathPiece::Line { from: entry, to: base },
    ]
}

impl TwistedCycle {
    /// The double-commutator loop `l1 l2 l1^{-1} l2^{-1}` around two points,
    /// based at their midpoint.  Its total monodromy in any rank-one local
    /// system is trivial, so twisted integrands close along it.
    pub fn double_loop(z1: Complex64, z2: Complex64, radius: f64) -> Self {
        let base = (z1 + z2) * 0.5;
        let mut pieces = loop_pieces(base, z1, radius, true);
        pieces.extend(loop_pieces(base, z2, radius, true));
        pieces.extend(loop_pieces(base, z1, radius, false));
        pieces.extend(loop_pieces(base, z2, radius, false));
        TwistedCycle { pieces }
    }

    /// A single counterclockwise loop around one point; useful for residue
    /// checks, but open in a generic twisted local system.
    pub fn loop_around(base: Complex64, center: Complex64, radius: f64) -> Self {
        TwistedCycle {
            pieces: loop_pieces(base, center, radius, true),
        }
    }
}

/// Branch state carried along a path: one continued logarithm per recorded
/// multivalued factor.
struct BranchTransport {
    exponents: Vec<Complex64>,
    start: Vec<Complex64>,
    current: Vec<Complex64>,
    primed: bool,
}

impl BranchTransport {
    fn new() -> Self {
        BranchTransport {
            exponents: Vec::new(),
            start: Vec::new(),
            current: Vec::new(),
            primed: false,
        }
    }

    /// Continue each factor's logarithm from the previous node and return
    /// the integrand value on the transported branch.
    fn advance(&mut self, cv: &CorrValue) -> Result<Complex64, KzbError> {
        if !self.primed {
            self.exponents = cv.branch.iter().map(|b| b.exponent).collect();
            self.start = cv.branch.iter().map(|b| b.log).collect();
            self.current = self.start.clone();
            self.primed = true;
            return Ok(cv.value);
        }
        if cv.branch.len() != self.current.len() {
            return Err(KzbError::BranchMismatch {
                got: cv.branch.len(),
                want: self.current.len(),
            });
        }
        let mut adjust = re(0.0);
        for (j, entry) in cv.branch.iter().enumerate() {
            let winding = ((self.current[j].im - entry.log.im) / TAU).round();
            let cont = entry.log + Complex64::new(0.0, TAU * winding);
            adjust += entry.exponent * (cont - entry.log);
            self.current[j] = cont;
        }
        Ok(cv.value * adjust.exp())
    }

    /// `|prefactor(end)/prefactor(start) - 1|` after a full circuit; zero
    /// exactly when the cycle closes in the local system.
    fn closure_defect(&self) -> f64 {
        let mut total = re(0.0);
        for ((e, s), c) in self.exponents.iter().zip(&self.start).zip(&self.current) {
            total += e * (c - s);
        }
        (total.exp() - re(1.0)).norm()
    }
}

/// Result of a twisted-cycle quadrature.
#[derive(Clone, Copy, Debug)]
pub struct PochhammerResult {
    pub value: Complex64,
    /// Richardson error estimate from the last node doubling.
    pub quad_error: f64,
    /// Monodromy defect of the transported prefactor after the circuit.
    pub closure_defect: f64,
    /// Integrand evaluations per piece in the final pass.
    pub nodes: usize,
}

const CLOSURE_TOL: f64 = 1e-10;

fn integrate_once<F>(
    f: &mut F,
    cycle: &TwistedCycle,
    n: usize,
) -> Result<(Complex64, f64), KzbError>
where
    F: FnMut(Complex64) -> Result<CorrValue, KzbError>,
{
    let mut transport = BranchTransport::new();
    let mut total = re(0.0);
    let h = 1.0 / n as f64;
    for piece in &cycle.pieces {
        let mut acc = re(0.0);
        for i in 0..=n {
            let s = i as f64 * h;
            let cv = f(piece.point(s))?;
            let val = transport.advance(&cv)?;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += val * piece.velocity(s) * w;
        }
        total += acc * (h / 3.0);
    }
    Ok((total, transport.closure_defect()))
}

/// Integrate a multivalued integrand over a closed twisted cycle with
/// composite Simpson quadrature, doubling the node count until the
/// Richardson estimate drops below `tol` relative to the result's scale.
///
/// The integrand reports each multivalued factor through
/// [`CorrValue::branch`]; those factors are continued along the path, and
/// the run is rejected if the cycle fails to close in the resulting local
/// system.
pub fn pochhammer_integral<F>(
    mut f: F,
    cycle: &TwistedCycle,
    tol: f64,
    start_nodes: usize,
    max_doublings: usize,
) -> Result<PochhammerResult, KzbError>
where
    F: FnMut(Complex64) -> Result<CorrValue, KzbError>,
{
    let mut n = start_nodes.max(16);
    if n % 2 == 1 {
        n += 1;
    }
    let (mut prev, defect) = integrate_once(&mut f, cycle, n)?;
    if defect > CLOSURE_TOL {
        return Err(KzbError::OpenCycle(defect));
    }
    let mut err = f64::INFINITY;
    for _ in 0..max_doublings {
        n *= 2;
        let (val, defect) = integrate_once(&mut f, cycle, n)?;
        if defect > CLOSURE_TOL {
            return Err(KzbError::OpenCycle(defect));
        }
        // composite Simpson is fourth order
        err = (val - prev).norm() / 15.0;
        let scale = val.norm().max(1e-3);
        if err <= tol * scale {
            return Ok(PochhammerResult {
                value: val,
                quad_error: err,
                closure_defect: defect,
                nodes: n,
            });
        }
        prev = val;
    }
    Err(KzbError::Quadrature(err, tol))
}

// ---------------------------------------------------------------------------
// Flatness-equation residuals
// ---------------------------------------------------------------------------

/// Configuration of the rank-one residual check: two insertion points at
/// half the positive root, one screening, sector zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KzbConfig {
    /// Level shifted by the dual Coxeter number.
    pub kappa: f64,
    /// Elliptic nome.
    pub q: f64,
    /// Value of the positive root on the twist element.
    pub alpha_h: f64,
    /// Insertion points.
    pub z: [f64; 2],
    /// Base step for the central finite differences (Richardson-refined).
    pub fd_step: f64,
    /// Relative tolerance passed to the cycle quadrature.
    pub quad_tol: f64,
    /// Starting Simpson nodes per path piece.
    pub base_nodes: usize,
    /// Steps for the truncation-order sweep of the residuals (largest
    /// first); empty to skip the sweep.
    pub sweep_steps: Vec<f64>,
    /// Coincident-point treatment in the heat equation.
    pub diag: DiagMode,
}

impl Default for KzbConfig {
    fn default() -> Self {
        KzbConfig {
            kappa: 5.0,
            q: 0.2,
            alpha_h: 0.6,
            z: [1.0, 0.55],
            fd_step: 1e-4,
            quad_tol: 1e-11,
            base_nodes: 32,
            sweep_steps: vec![0.08, 0.04, 0.02],
            diag: DiagMode::FinitePart,
        }
    }
}

/// One reported component of the block.
#[derive(Clone, Debug, Serialize)]
pub struct ComponentReport {
    pub monomials: (usize, usize),
    pub re: f64,
    pub im: f64,
}

/// Residual norms of the three flatness equations for the two-point block.
#[derive(Clone, Debug, Serialize)]
pub struct ResidualReport {
    /// Weight-constraint residual; exactly zero by rational bookkeeping
    /// once the off-weight components vanish pointwise.
    #[serde(rename = "residual_I")]
    pub residual_i: f64,
    /// Worst relative residual of the two point equations.
    #[serde(rename = "residual_II")]
    pub residual_ii: f64,
    /// Relative residual of the heat equation.
    #[serde(rename = "residual_III")]
    pub residual_iii: f64,
    /// Largest Richardson estimate among the component integrals.
    pub quadrature_error: f64,
    /// Largest relative Richardson correction among the finite differences.
    pub fd_error: f64,
    /// Observed convergence order of the point-equation residual under the
    /// step sweep (difference-ratio estimate), if the sweep ran.
    pub fd_order_ii: Option<f64>,
    /// Observed convergence order of the heat-equation residual.
    pub fd_order_iii: Option<f64>,
    /// `(step, residual_II, residual_III)` rows of the sweep.
    pub residual_sweep: Vec<(f64, f64, f64)>,
    /// Nonvanishing block components at the base point.
    pub components: Vec<ComponentReport>,
    pub config: KzbConfig,
}

type V2 = [Complex64; 2];

fn v2_norm(v: &V2) -> f64 {
    (v[0].norm_sqr() + v[1].norm_sqr()).sqrt()
}

fn v2_sub(a: &V2, b: &V2) -> V2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn v2_scale(a: &V2, c: Complex64) -> V2 {
    [a[0] * c, a[1] * c]
}

fn v2_add(a: &V2, b: &V2) -> V2 {
    [a[0] + b[0], a[1] + b[1]]
}

/// The two live components `(x, 1)` and `(1, x)` packed as a 2x2 array.
fn as_array(live: &V2) -> Vec<Vec<Complex64>> {
    vec![vec![re(0.0), live[1]], vec![live[0], re(0.0)]]
}

fn live_of(arr: &[Vec<Complex64>]) -> V2 {
    [arr[1][0], arr[0][1]]
}

/// Finite-difference data of the two live components at the base point.
struct Derivatives {
    base: V2,
    /// `z_j d/dz_j` of the components, per insertion point.
    zlog: [V2; 2],
    /// first derivative along the orthonormal Cartan coordinate
    xi: V2,
    /// second derivative along the orthonormal Cartan coordinate
    xi2: V2,
    /// `q d/dq` of the components
    qlog: V2,
    fd_error: f64,
}

/// Which parameter a finite-difference shift moves.
#[derive(Clone, Copy)]
enum Shift {
    ZLog(usize),
    QLog,
    Xi,
}

struct BlockEvaluator<'a> {
    module: &'a PolyModule,
    cfg: &'a KzbConfig,
    cycle: &'a TwistedCycle,
    lambda: Weight,
    sector: Weight,
    /// value of the simple root on the orthonormal Cartan direction, so
    /// `d/dxi = dvec * d/d(alpha(H))`
    dvec: f64,
    /// Simpson nodes per piece, pinned after the first adaptive run so the
    /// quadrature error varies smoothly across stencil shifts.
    nodes: Option<usize>,
    quad_error: f64,
}

impl BlockEvaluator<'_> {
    /// One dual component `Phi(x^a (x) x^b)` at shifted parameters:
    /// `z_j -> z_j e^{dz_j}`, `q -> q e^{dlq}`, `alpha(H) -> alpha(H) +
    /// dxi * dvec`.
    fn eval_pair(
        &mut self,
        a: usize,
        b: usize,
        dz: [f64; 2],
        dlq: f64,
        dxi: f64,
    ) -> Result<Complex64, KzbError> {
        let q = re(self.cfg.q * dlq.exp());
        let zs = vec![
            re(self.cfg.z[0] * dz[0].exp()),
            re(self.cfg.z[1] * dz[1].exp()),
        ];
        let h = vec![re(self.cfg.alpha_h + dxi * self.dvec)];
        let kappa = re(self.cfg.kappa);
        let ps = vec![self.module.monomial(a), self.module.monomial(b)];
        let lambdas = vec![self.lambda.clone(), self.lambda.clone()];
        let word = [0usize];
        let module = self.module;
        let sector = self.sector.clone();
        let mut f = move |t: Complex64| {
            corr::integrand(
                module.realization(),
                &module.algebra,
                kappa,
                q,
                &h,
                &ps,
                &zs,
                &lambdas,
                &word,
                &[t],
                &sector,
            )
            .map_err(KzbError::from)
        };
        match self.nodes {
            None => {
                let res = pochhammer_integral(
                    &mut f,
                    self.cycle,
                    self.cfg.quad_tol,
                    self.cfg.base_nodes,
                    10,
                )?;
                // one extra doubling of margin before pinning
                self.nodes = Some(res.nodes * 2);
                let (val, defect) = integrate_once(&mut f, self.cycle, res.nodes * 2)?;
                if defect > CLOSURE_TOL {
                    return Err(KzbError::OpenCycle(defect));
                }
                let err = (val - res.value).norm() / 15.0;
                self.quad_error = self.quad_error.max(err / val.norm().max(1e-3));
                Ok(val)
            }
            Some(n) => {
                let (val, defect) = integrate_once(&mut f, self.cycle, n)?;
                if defect > CLOSURE_TOL {
                    return Err(KzbError::OpenCycle(defect));
                }
                Ok(val)
            }
        }
    }

    /// Both live components `(x, 1)` and `(1, x)` at shifted parameters.
    fn eval(&mut self, dz: [f64; 2], dlq: f64, dxi: f64) -> Result<V2, KzbError> {
        Ok([
            self.eval_pair(1, 0, dz, dlq, dxi)?,
            self.eval_pair(0, 1, dz, dlq, dxi)?,
        ])
    }

    fn shifted(&mut self, dir: Shift, amount: f64) -> Result<V2, KzbError> {
        match dir {
            Shift::ZLog(0) => self.eval([amount, 0.0], 0.0, 0.0),
            Shift::ZLog(_) => self.eval([0.0, amount], 0.0, 0.0),
            Shift::QLog => self.eval([0.0; 2], amount, 0.0),
            Shift::Xi => self.eval([0.0; 2], 0.0, amount),
        }
    }

    /// Central first derivative, optionally Richardson-refined from steps
    /// `h` and `h/2`.
    fn central(
        &mut self,
        dir: Shift,
        h: f64,
        richardson: bool,
        fd_error: &mut f64,
    ) -> Result<V2, KzbError> {
        let p1 = self.shifted(dir, h)?;
        let m1 = self.shifted(dir, -h)?;
        let d1 = v2_scale(&v2_sub(&p1, &m1), re(1.0 / (2.0 * h)));
        if !richardson {
            return Ok(d1);
        }
        let p2 = self.shifted(dir, h / 2.0)?;
        let m2 = self.shifted(dir, -h / 2.0)?;
        let d2 = v2_scale(&v2_sub(&p2, &m2), re(1.0 / h));
        let rich = v2_scale(&v2_sub(&v2_scale(&d2, re(4.0)), &d1), re(1.0 / 3.0));
        let corr = v2_norm(&v2_sub(&d2, &d1)) / 3.0;
        *fd_error = fd_error.max(corr / v2_norm(&rich).max(1e-12));
        Ok(rich)
    }

    /// Central first and second derivatives along the Cartan coordinate,
    /// sharing evaluations; Richardson-refined when asked.
    fn xi_pair(
        &mut self,
        base: &V2,
        h: f64,
        richardson: bool,
        fd_error: &mut f64,
    ) -> Result<(V2, V2), KzbError> {
        let p1 = self.shifted(Shift::Xi, h)?;
        let m1 = self.shifted(Shift::Xi, -h)?;
        let d1 = v2_scale(&v2_sub(&p1, &m1), re(1.0 / (2.0 * h)));
        let two_base = v2_scale(base, re(2.0));
        let s1 = v2_scale(&v2_sub(&v2_add(&p1, &m1), &two_base), re(1.0 / (h * h)));
        if !richardson {
            return Ok((d1, s1));
        }
        let hh = h / 2.0;
        let p2 = self.shifted(Shift::Xi, hh)?;
        let m2 = self.shifted(Shift::Xi, -hh)?;
        let d2 = v2_scale(&v2_sub(&p2, &m2), re(1.0 / h));
        let s2 = v2_scale(&v2_sub(&v2_add(&p2, &m2), &two_base), re(1.0 / (hh * hh)));
        let dr = v2_scale(&v2_sub(&v2_scale(&d2, re(4.0)), &d1), re(1.0 / 3.0));
        let sr = v2_scale(&v2_sub(&v2_scale(&s2, re(4.0)), &s1), re(1.0 / 3.0));
        let corr_d = v2_norm(&v2_sub(&d2, &d1)) / 3.0 / v2_norm(&dr).max(1e-12);
        let corr_s = v2_norm(&v2_sub(&s2, &s1)) / 3.0 / v2_norm(&sr).max(1e-12);
        *fd_error = fd_error.max(corr_d).max(corr_s);
        Ok((dr, sr))
    }

    /// Full derivative stencil at step `h`.
    fn derivatives(&mut self, h: f64, richardson: bool) -> Result<Derivatives, KzbError> {
        let base = self.eval([0.0; 2], 0.0, 0.0)?;
        let mut fd_error = 0.0;
        let z0 = self.central(Shift::ZLog(0), h, richardson, &mut fd_error)?;
        let z1 = self.central(Shift::ZLog(1), h, richardson, &mut fd_error)?;
        let qlog = self.central(Shift::QLog, h, richardson, &mut fd_error)?;
        let (xi, xi2) = self.xi_pair(&base, h, richardson, &mut fd_error)?;
        Ok(Derivatives {
            base,
            zlog: [z0, z1],
            xi,
            xi2,
            qlog,
            fd_error,
        })
    }
}

/// Monomial index sitting in slot `j` of a live component.
fn slot_monomial(comp: usize, j: usize) -> usize {
    // component 0 is (x, 1), component 1 is (1, x)
    match (comp, j) {
        (0, 0) | (1, 1) => 1,
        _ => 0,
    }
}

/// Relative residuals of the point equations and the heat equation given a
/// derivative stencil and the kernels at the base point.
fn assemble_residuals(
    module: &PolyModule,
    cfg: &KzbConfig,
    der: &Derivatives,
    c2: f64,
    wt_hr: &[f64; 2],
) -> Result<(f64, f64), KzbError> {
    let q = re(cfg.q);
    let h = vec![re(cfg.alpha_h)];
    let z = [re(cfg.z[0]), re(cfg.z[1])];
    let fbase = as_array(&der.base);
    let kappa = cfg.kappa;

    let om12 = omega_kernel(z[0], z[1], q, &h, module, module)?;
    let om21 = omega_kernel(z[1], z[0], q, &h, module, module)?;
    let mut worst_ii: f64 = 0.0;
    for j in 0..2 {
        let lhs = v2_add(
            &v2_scale(&der.zlog[j], re(kappa)),
            &v2_scale(&der.base, re(c2 / 2.0)),
        );
        let mut xi_term = [re(0.0); 2];
        for comp in 0..2 {
            xi_term[comp] = -re(wt_hr[slot_monomial(comp, j)]) * der.xi[comp];
        }
        let om_term = if j == 1 {
            live_of(&om12.co_apply(&fbase, true))
        } else {
            live_of(&om21.co_apply(&fbase, false))
        };
        let rhs = v2_add(&xi_term, &om_term);
        let scale = v2_norm(&lhs).max(v2_norm(&rhs)).max(1e-300);
        worst_ii = worst_ii.max(v2_norm(&v2_sub(&lhs, &rhs)) / scale);
    }

    let h12 = h_kernel(z[0], z[1], q, &h, module, module)?;
    let h21 = h_kernel(z[1], z[0], q, &h, module, module)?;
    let diag = h_kernel_diag(q, &h, module, cfg.diag)?;
    let mut rhs_arr = as_array(&der.xi2);
    let add = |target: &mut Vec<Vec<Complex64>>, piece: Vec<Vec<Complex64>>| {
        for (trow, prow) in target.iter_mut().zip(piece) {
            for (t, p) in trow.iter_mut().zip(prow) {
                *t += p;
            }
        }
    };
    add(&mut rhs_arr, h12.co_apply(&fbase, true));
    add(&mut rhs_arr, h21.co_apply(&fbase, false));
    add(&mut rhs_arr, co_apply_slot(&diag, &fbase, 0));
    add(&mut rhs_arr, co_apply_slot(&diag, &fbase, 1));
    let lhs = v2_scale(&der.qlog, re(2.0 * kappa));
    let rhs = live_of(&rhs_arr);
    let scale = v2_norm(&lhs).max(v2_norm(&rhs)).max(1e-300);
    let res_iii = v2_norm(&v2_sub(&lhs, &rhs)) / scale;
    Ok((worst_ii, res_iii))
}

/// Observed convergence order from three residuals at halved steps; the
/// difference ratio cancels any constant residual floor.
fn observed_order(r: &[f64]) -> Option<f64> {
    if r.len() < 3 {
        return None;
    }
    let num = r[0] - r[1];
    let den = r[1] - r[2];
    (num > 0.0 && den > 0.0).then(|| (num / den).log2())
}

/// Residuals of the three flatness equations for the rank-one two-point
/// block with a single screening charge: the block components are computed
/// by twisted-cycle quadrature of the closed-form integrand, differentiated
/// by Richardson-refined central differences, and substituted into the
/// weight constraint, the point equations, and the heat equation.
pub fn kzb_residual(cfg: &KzbConfig) -> Result<ResidualReport, KzbError> {
    if !(cfg.kappa > 2.0) {
        return Err(KzbError::Config(format!(
            "kappa = {} must exceed the dual Coxeter number",
            cfg.kappa
        )));
    }
    let algebra = LieAlgebra::type_a(1);
    let lambda: Weight = vec![Q::new(1.into(), 2.into())];
    let module = PolyModule::new(&algebra, &lambda, 1)?;
    let radius = 0.25 * (cfg.z[0] - cfg.z[1]).abs();
    let cycle = TwistedCycle::double_loop(re(cfg.z[0]), re(cfg.z[1]), radius);
    let hr = algebra.orthonormal_cartan().swap_remove(0);
    let simple: Weight = vec![qi(1)];
    let dvec: f64 = hr
        .iter()
        .enumerate()
        .map(|(j, c)| c * rat_to_f64(&algebra.weight_on_coroot(&simple, j)))
        .sum();
    let mut ev = BlockEvaluator {
        module: &module,
        cfg,
        cycle: &cycle,
        lambda: lambda.clone(),
        sector: vec![Q::zero()],
        dvec,
        nodes: None,
        quad_error: 0.0,
    };

    // Weight constraint: both live components carry exact total weight zero
    // (rational bookkeeping), and the two off-weight corners must vanish
    // pointwise, so the constraint residual is assembled from exact zeros.
    let live_total: Weight = module
        .weight(1)
        .iter()
        .zip(module.weight(0))
        .map(|(x, y)| x + y)
        .collect();
    let base = ev.eval([0.0; 2], 0.0, 0.0)?;
    let live_part = if live_total.iter().all(|c| c.is_zero()) {
        0.0
    } else {
        corr::weight_on_h(&live_total, &[re(cfg.alpha_h)]).norm() * v2_norm(&base)
    };
    let corner00 = ev.eval_pair(0, 0, [0.0; 2], 0.0, 0.0)?;
    let corner11 = ev.eval_pair(1, 1, [0.0; 2], 0.0, 0.0)?;
    let corner_part = cfg.alpha_h.abs() * corner00.norm().max(corner11.norm());
    let residual_i = live_part.max(corner_part);

    let c2 = rat_to_f64(&algebra.casimir_eigenvalue(&lambda));
    let wt_hr = [
        module.weight_on_orthonormal(0, &hr),
        module.weight_on_orthonormal(1, &hr),
    ];
    let der = ev.derivatives(cfg.fd_step, true)?;
    let (residual_ii, residual_iii) = assemble_residuals(&module, cfg, &der, c2, &wt_hr)?;

    let mut residual_sweep = Vec::new();
    for &s in &cfg.sweep_steps {
        let d = ev.derivatives(s, false)?;
        let (a, b) = assemble_residuals(&module, cfg, &d, c2, &wt_hr)?;
        residual_sweep.push((s, a, b));
    }
    let fd_order_ii = observed_order(&residual_sweep.iter().map(|r| r.1).collect::<Vec<_>>());
    let fd_order_iii = observed_order(&residual_sweep.iter().map(|r| r.2).collect::<Vec<_>>());

    Ok(ResidualReport {
        residual_i,
        residual_ii,
        residual_iii,
        quadrature_error: ev.quad_error,
        fd_error: der.fd_error,
        fd_order_ii,
        fd_order_iii,
        residual_sweep,
        components: vec![
            ComponentReport {
                monomials: (1, 0),
                re: der.base[0].re,
                im: der.base[0].im,
            },
            ComponentReport {
                monomials: (0, 1),
                re: der.base[1].re,
                im: der.base[1].im,
            },
        ],
        config: cfg.clone(),
    })
}
