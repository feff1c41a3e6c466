//! Ghost and free-boson Fock spaces with exact mode actions.
//!
//! States are monomials of creation operators on the vacuum — the creation
//! classes (`gamma[m<=0]`, `beta[m<0]`, `phi[m<0]`) commute with each other,
//! so a sorted multiset plus a boost count is a faithful representation.
//! Annihilators act by exact contraction:
//!
//! ```text
//!   [beta_a[m], gamma^b[n]] = delta_a^b delta_{m+n,0}
//!   [phi_i[m],  phi_j[n]]   = kappa (H_i|H_j) m delta_{m+n,0}
//!   [phi_i[0],  e^{p_j}]    = kappa (H_i|H_j) e^{p_j}
//! ```
//!
//! so applying any finite operator to a state needs no truncation at all;
//! truncated enumerations exist only to drive graded traces and matrix
//! assembly.  Scalars are generic: exact rationals or symbolic polynomials in
//! `kappa`/`lambda_i`/`c_i` for identity verification, complex doubles for
//! numeric traces.

use crate::lie::Weight;
use crate::scalar::{qi, Scalar, Q};
use num_complex::Complex64;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum FockError {
    #[error("operator is not grade-homogeneous: saw shifts {0:?} and {1:?}")]
    MixedShift(GradeShift, GradeShift),
    #[error("operator leaves the truncated space and the caller required a loss-free matrix")]
    Lossy,
}

/// A single oscillator or boost symbol `X[m]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModeSymbol {
    /// `beta_alpha[m]`, labeled by a positive-root index.
    Beta { alpha: u8, m: i32 },
    /// `gamma^alpha[m]`.
    Gamma { alpha: u8, m: i32 },
    /// `phi_i[m]`, labeled by a Cartan index.
    Phi { i: u8, m: i32 },
    /// The boost `e^{p_i}`.
    Boost { i: u8 },
}

impl ModeSymbol {
    /// Ordering class: creation < boost < zero mode < annihilation.
    fn class(&self) -> u8 {
        match *self {
            ModeSymbol::Gamma { m, .. } if m <= 0 => 0,
            ModeSymbol::Beta { m, .. } if m < 0 => 0,
            ModeSymbol::Phi { m, .. } if m < 0 => 0,
            ModeSymbol::Boost { .. } => 1,
            ModeSymbol::Phi { m: 0, .. } => 2,
            _ => 3,
        }
    }

    pub fn is_creation(&self) -> bool {
        self.class() == 0
    }
}

impl fmt::Display for ModeSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ModeSymbol::Beta { alpha, m } => write!(f, "beta_{}[{}]", alpha + 1, m),
            ModeSymbol::Gamma { alpha, m } => write!(f, "gamma^{}[{}]", alpha + 1, m),
            ModeSymbol::Phi { i, m } => write!(f, "phi_{}[{}]", i + 1, m),
            ModeSymbol::Boost { i } => write!(f, "e^p_{}", i + 1),
        }
    }
}

/// Creation generator with depth `d` meaning mode `-d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Gen {
    /// `gamma^alpha[-d]`, `d >= 0`.
    Gamma(u8, u16),
    /// `beta_alpha[-d]`, `d >= 1`.
    Beta(u8, u16),
    /// `phi_i[-d]`, `d >= 1`.
    Phi(u8, u16),
}

impl Gen {
    pub fn depth(&self) -> u16 {
        match *self {
            Gen::Gamma(_, d) | Gen::Beta(_, d) | Gen::Phi(_, d) => d,
        }
    }
}

/// Monomial of creation operators and boosts applied to the vacuum.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct FockState {
    /// Sorted `(generator, multiplicity)` pairs.
    occ: Vec<(Gen, u16)>,
    /// Boost exponents per Cartan direction (empty means all zero).
    boost: Vec<i32>,
}

impl FockState {
    pub fn vacuum() -> Self {
        FockState::default()
    }

    pub fn from_gens(mut gens: Vec<(Gen, u16)>) -> Self {
        gens.retain(|&(_, m)| m > 0);
        gens.sort();
        let mut occ: Vec<(Gen, u16)> = Vec::with_capacity(gens.len());
        for (g, m) in gens {
            if let Some(last) = occ.last_mut() {
                if last.0 == g {
                    last.1 += m;
                    continue;
                }
            }
            occ.push((g, m));
        }
        FockState { occ, boost: vec![] }
    }

    pub fn occupation(&self) -> &[(Gen, u16)] {
        &self.occ
    }

    pub fn boosts(&self) -> &[i32] {
        &self.boost
    }

    /// Conformal energy grade `sum d * multiplicity`.
    pub fn energy(&self) -> u32 {
        self.occ
            .iter()
            .map(|&(g, m)| g.depth() as u32 * m as u32)
            .sum()
    }

    /// Number of `gamma[0]` factors.
    pub fn gamma0_degree(&self) -> u32 {
        self.occ
            .iter()
            .filter(|&&(g, _)| matches!(g, Gen::Gamma(_, 0)))
            .map(|&(_, m)| m as u32)
            .sum()
    }

    fn with_gen_delta(&self, g: Gen, delta: i32) -> FockState {
        let mut occ = self.occ.clone();
        match occ.binary_search_by(|(h, _)| h.cmp(&g)) {
            Ok(pos) => {
                let m = occ[pos].1 as i32 + delta;
                debug_assert!(m >= 0);
                if m == 0 {
                    occ.remove(pos);
                } else {
                    occ[pos].1 = m as u16;
                }
            }
            Err(pos) => {
                debug_assert!(delta > 0);
                occ.insert(pos, (g, delta as u16));
            }
        }
        FockState {
            occ,
            boost: self.boost.clone(),
        }
    }

    fn with_boost(&self, i: usize, rank: usize) -> FockState {
        let mut boost = self.boost.clone();
        if boost.len() < rank {
            boost.resize(rank, 0);
        }
        boost[i] += 1;
        FockState {
            occ: self.occ.clone(),
            boost,
        }
    }

    /// Ghost charge as a weight in simple-root coordinates:
    /// each `gamma^alpha` counts `-alpha`, each `beta_alpha` counts `+alpha`.
    pub fn ghost_weight(&self, root_coords: &[Vec<i64>], rank: usize) -> Weight {
        let mut w = vec![qi(0); rank];
        for &(g, mult) in &self.occ {
            let (alpha, sign) = match g {
                Gen::Gamma(a, _) => (a as usize, -1i64),
                Gen::Beta(a, _) => (a as usize, 1),
                Gen::Phi(_, _) => continue,
            };
            for (k, c) in root_coords[alpha].iter().enumerate() {
                w[k] += qi(sign * c * mult as i64);
            }
        }
        w
    }
}

impl fmt::Display for FockState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &(g, m) in &self.occ {
            let s = match g {
                Gen::Gamma(a, d) => format!("gamma^{}[{}]", a + 1, -(d as i32)),
                Gen::Beta(a, d) => format!("beta_{}[{}]", a + 1, -(d as i32)),
                Gen::Phi(i, d) => format!("phi_{}[{}]", i + 1, -(d as i32)),
            };
            if m == 1 {
                write!(f, "{s} ")?;
            } else {
                write!(f, "{s}^{m} ")?;
            }
        }
        for (i, b) in self.boost.iter().enumerate() {
            if *b != 0 {
                write!(f, "e^{{{}p_{}}} ", b, i + 1)?;
            }
        }
        write!(f, "|vac>")
    }
}

/// The algebra-level data every mode action needs.
#[derive(Clone, Debug)]
pub struct FockContext<S: Scalar> {
    pub num_roots: usize,
    pub rank: usize,
    pub kappa: S,
    pub kappa_inv: S,
    /// Gram matrix `(H_i | H_j)` of the coroots.
    pub gram: Vec<Vec<Q>>,
    /// Momentum of the vacuum: `lambda(H_i)`.
    pub lambda: Vec<S>,
}

impl<S: Scalar> FockContext<S> {
    pub fn new(
        num_roots: usize,
        gram: Vec<Vec<Q>>,
        kappa: S,
        kappa_inv: S,
        lambda: Vec<S>,
    ) -> Self {
        let rank = gram.len();
        assert_eq!(lambda.len(), rank);
        FockContext {
            num_roots,
            rank,
            kappa,
            kappa_inv,
            gram,
            lambda,
        }
    }

    /// Eigenvalue of `phi_i[0]` on a state (momentum plus boost shifts).
    fn zero_mode(&self, i: usize, state: &FockState) -> S {
        let mut val = self.lambda[i].clone();
        for (j, b) in state.boost.iter().enumerate() {
            if *b != 0 {
                val = val.add(&self.kappa.scale_rat(&(&self.gram[i][j] * qi(*b as i64))));
            }
        }
        val
    }
}

/// Finite linear combination of Fock states.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVec<S: Scalar> {
    terms: BTreeMap<FockState, S>,
}

impl<S: Scalar> StateVec<S> {
    pub fn zero() -> Self {
        StateVec {
            terms: BTreeMap::new(),
        }
    }

    pub fn unit(state: FockState) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(state, S::one());
        StateVec { terms }
    }

    pub fn vacuum() -> Self {
        Self::unit(FockState::vacuum())
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&FockState, &S)> {
        self.terms.iter()
    }

    pub fn coeff(&self, s: &FockState) -> S {
        self.terms.get(s).cloned().unwrap_or_else(S::zero)
    }

    pub fn add_term(&mut self, state: FockState, c: S) {
        if c.is_zero() {
            return;
        }
        use std::collections::btree_map::Entry;
        match self.terms.entry(state) {
            Entry::Vacant(e) => {
                e.insert(c);
            }
            Entry::Occupied(mut e) => {
                let s = e.get().add(&c);
                if s.is_zero() {
                    e.remove();
                } else {
                    *e.get_mut() = s;
                }
            }
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (s, c) in &other.terms {
            out.add_term(s.clone(), c.clone());
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (s, c) in &other.terms {
            out.add_term(s.clone(), c.neg());
        }
        out
    }

    pub fn scale(&self, f: &S) -> Self {
        if f.is_zero() {
            return Self::zero();
        }
        let mut out = Self::zero();
        for (s, c) in &self.terms {
            out.add_term(s.clone(), c.mul(f));
        }
        out
    }

    /// Largest energy grade present (None when zero).
    pub fn max_energy(&self) -> Option<u32> {
        self.terms.keys().map(FockState::energy).max()
    }
}

/// Apply a single oscillator/boost symbol exactly.
pub fn apply_symbol<S: Scalar>(
    ctx: &FockContext<S>,
    sym: ModeSymbol,
    v: &StateVec<S>,
) -> StateVec<S> {
    let mut out = StateVec::zero();
    for (state, coef) in v.terms() {
        match sym {
            ModeSymbol::Gamma { alpha, m } if m <= 0 => {
                out.add_term(
                    state.with_gen_delta(Gen::Gamma(alpha, (-m) as u16), 1),
                    coef.clone(),
                );
            }
            ModeSymbol::Beta { alpha, m } if m < 0 => {
                out.add_term(
                    state.with_gen_delta(Gen::Beta(alpha, (-m) as u16), 1),
                    coef.clone(),
                );
            }
            ModeSymbol::Phi { i, m } if m < 0 => {
                out.add_term(
                    state.with_gen_delta(Gen::Phi(i, (-m) as u16), 1),
                    coef.clone(),
                );
            }
            ModeSymbol::Boost { i } => {
                out.add_term(state.with_boost(i as usize, ctx.rank), coef.clone());
            }
            ModeSymbol::Phi { i, m: 0 } => {
                let ev = ctx.zero_mode(i as usize, state);
                out.add_term(state.clone(), coef.mul(&ev));
            }
            ModeSymbol::Beta { alpha, m } => {
                // m >= 0 contracts against gamma^alpha[-m] with coefficient +mult
                let g = Gen::Gamma(alpha, m as u16);
                if let Ok(pos) = state.occ.binary_search_by(|(h, _)| h.cmp(&g)) {
                    let mult = state.occ[pos].1;
                    out.add_term(
                        state.with_gen_delta(g, -1),
                        coef.scale_rat(&qi(mult as i64)),
                    );
                }
            }
            ModeSymbol::Gamma { alpha, m } => {
                // m > 0 contracts against beta_alpha[-m] with coefficient -mult
                let g = Gen::Beta(alpha, m as u16);
                if let Ok(pos) = state.occ.binary_search_by(|(h, _)| h.cmp(&g)) {
                    let mult = state.occ[pos].1;
                    out.add_term(
                        state.with_gen_delta(g, -1),
                        coef.scale_rat(&qi(-(mult as i64))),
                    );
                }
            }
            ModeSymbol::Phi { i, m } => {
                // m > 0 contracts against every phi_j[-m] with kappa (H_i|H_j) m
                for &(g, mult) in &state.occ {
                    if let Gen::Phi(j, d) = g {
                        if d as i32 == m {
                            let factor = &ctx.gram[i as usize][j as usize]
                                * qi(m as i64)
                                * qi(mult as i64);
                            out.add_term(
                                state.with_gen_delta(g, -1),
                                coef.mul(&ctx.kappa).scale_rat(&factor),
                            );
                        }
                    }
                }
            }
        }
    }
    out
}

/// Apply an ordered product of symbols (rightmost acts first).
pub fn apply_monomial<S: Scalar>(
    ctx: &FockContext<S>,
    monomial: &[ModeSymbol],
    v: &StateVec<S>,
) -> StateVec<S> {
    let mut out = v.clone();
    for sym in monomial.iter().rev() {
        if out.is_zero() {
            return out;
        }
        out = apply_symbol(ctx, *sym, &out);
    }
    out
}

/// Scalar (or boost-proportional) commutator `[a, b]` of two symbols.
/// Returns `(rational factor, kappa power, replacement symbol)` — the
/// commutator is `factor * kappa^pow * replacement?` or zero.
fn symbol_commutator(
    gram: &[Vec<Q>],
    a: ModeSymbol,
    b: ModeSymbol,
) -> Option<(Q, u8, Option<ModeSymbol>)> {
    match (a, b) {
        (ModeSymbol::Beta { alpha: x, m }, ModeSymbol::Gamma { alpha: y, m: n }) => {
            if x == y && m + n == 0 {
                Some((qi(1), 0, None))
            } else {
                None
            }
        }
        (ModeSymbol::Gamma { alpha: x, m: n }, ModeSymbol::Beta { alpha: y, m }) => {
            if x == y && m + n == 0 {
                Some((qi(-1), 0, None))
            } else {
                None
            }
        }
        (ModeSymbol::Phi { i, m }, ModeSymbol::Phi { i: j, m: n }) => {
            if m + n == 0 && m != 0 {
                Some((&gram[i as usize][j as usize] * qi(m as i64), 1, None))
            } else {
                None
            }
        }
        (ModeSymbol::Phi { i, m: 0 }, ModeSymbol::Boost { i: j }) => Some((
            gram[i as usize][j as usize].clone(),
            1,
            Some(ModeSymbol::Boost { i: j }),
        )),
        (ModeSymbol::Boost { i: j }, ModeSymbol::Phi { i, m: 0 }) => Some((
            -gram[i as usize][j as usize].clone(),
            1,
            Some(ModeSymbol::Boost { i: j }),
        )),
        _ => None,
    }
}

/// Rewrite a monomial in normal order (creations, boosts, zero modes,
/// annihilators) and return the full expansion: the leading term is the
/// reordered monomial, the rest are the explicit commutator corrections.
pub fn normal_order<S: Scalar>(
    gram: &[Vec<Q>],
    kappa: &S,
    monomial: &[ModeSymbol],
) -> Vec<(S, Vec<ModeSymbol>)> {
    // find the first adjacent pair that is out of order
    let mut pos = None;
    for i in 0..monomial.len().saturating_sub(1) {
        if monomial[i].class() > monomial[i + 1].class() {
            pos = Some(i);
            break;
        }
    }
    let Some(i) = pos else {
        return vec![(S::one(), monomial.to_vec())];
    };
    let mut swapped = monomial.to_vec();
    swapped.swap(i, i + 1);
    let mut out = normal_order(gram, kappa, &swapped);
    if let Some((factor, kpow, replacement)) = symbol_commutator(gram, monomial[i], monomial[i + 1])
    {
        let mut shorter: Vec<ModeSymbol> = monomial[..i].to_vec();
        if let Some(r) = replacement {
            shorter.push(r);
        }
        shorter.extend_from_slice(&monomial[i + 2..]);
        let mut scalar = S::from_rat(&factor);
        for _ in 0..kpow {
            scalar = scalar.mul(kappa);
        }
        for (c, mono) in normal_order(gram, kappa, &shorter) {
            let c = c.mul(&scalar);
            // merge into the accumulating expansion
            if let Some(slot) = out.iter_mut().find(|(_, m)| *m == mono) {
                slot.0 = slot.0.add(&c);
            } else {
                out.push((c, mono));
            }
        }
    }
    out.retain(|(c, _)| !c.is_zero());
    out
}

/// One factor of a composite (normally ordered) field: a base oscillator
/// field with some number of z-derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimField {
    /// `d^r gamma^alpha(z)`, weight `r`.
    Gamma { alpha: u8, nderiv: u8 },
    /// `d^r beta_alpha(z)`, weight `1 + r`.
    Beta { alpha: u8, nderiv: u8 },
    /// `d^r dphi_i(z)` (the base field is already `dphi`), weight `1 + r`.
    DPhi { i: u8, nderiv: u8 },
}

impl PrimField {
    pub fn weight(&self) -> i32 {
        match *self {
            PrimField::Gamma { nderiv, .. } => nderiv as i32,
            PrimField::Beta { nderiv, .. } | PrimField::DPhi { nderiv, .. } => 1 + nderiv as i32,
        }
    }

    /// Mode `m` of this factor: an oscillator symbol and the rational factor
    /// coming from the z-derivatives (`(d A)[m] = -(m + h_A) A[m]`).
    fn mode(&self, m: i32) -> (ModeSymbol, Q) {
        match *self {
            PrimField::Gamma { alpha, nderiv } => {
                let mut f = qi(1);
                for j in 0..nderiv as i32 {
                    f *= qi((-(m + j)) as i64);
                }
                (ModeSymbol::Gamma { alpha, m }, f)
            }
            PrimField::Beta { alpha, nderiv } => {
                let mut f = qi(1);
                for j in 0..nderiv as i32 {
                    f *= qi((-(m + 1 + j)) as i64);
                }
                (ModeSymbol::Beta { alpha, m }, f)
            }
            PrimField::DPhi { i, nderiv } => {
                let mut f = qi(1);
                for j in 0..nderiv as i32 {
                    f *= qi((-(m + 1 + j)) as i64);
                }
                (ModeSymbol::Phi { i, m }, f)
            }
        }
    }
}

/// Normally ordered sum of products of primitive fields with coefficients.
#[derive(Clone, Debug)]
pub struct CompositeField<S: Scalar> {
    pub terms: Vec<(S, Vec<PrimField>)>,
}

impl<S: Scalar> CompositeField<S> {
    pub fn zero() -> Self {
        CompositeField { terms: vec![] }
    }

    pub fn add_term(&mut self, coef: S, factors: Vec<PrimField>) {
        if !coef.is_zero() {
            self.terms.push((coef, factors));
        }
    }

    pub fn extend(&mut self, other: &CompositeField<S>) {
        self.terms.extend(other.terms.iter().cloned());
    }

    pub fn scale(&self, f: &S) -> Self {
        CompositeField {
            terms: self
                .terms
                .iter()
                .map(|(c, fs)| (c.mul(f), fs.clone()))
                .collect(),
        }
    }

    /// Total conformal weight (must be uniform across terms).
    pub fn weight(&self) -> i32 {
        let w = self.terms[0].1.iter().map(PrimField::weight).sum();
        debug_assert!(self
            .terms
            .iter()
            .all(|(_, fs)| fs.iter().map(PrimField::weight).sum::<i32>() == w));
        w
    }

    /// Apply the mode `O[M]` of this composite field to a state vector,
    /// exactly: `O[M] = sum_{m_1+..+m_r = M} :F_1[m_1] .. F_r[m_r]:` and only
    /// finitely many tuples act nonzero on a finite-energy vector.
    pub fn apply_mode(&self, ctx: &FockContext<S>, big_m: i32, v: &StateVec<S>) -> StateVec<S> {
        let Some(e) = v.max_energy() else {
            return StateVec::zero();
        };
        let e = e as i32;
        let mut out = StateVec::zero();
        for (coef, factors) in &self.terms {
            let r = factors.len();
            // every factor mode must be <= e (larger annihilates everything),
            // and the remaining budget bounds each mode from below
            let mut modes = vec![0i32; r];
            enumerate_modes(&mut modes, 0, big_m, e, &mut |modes: &[i32]| {
                let mut symbols = Vec::with_capacity(r);
                let mut factor = qi(1);
                for (f, &m) in factors.iter().zip(modes) {
                    let (s, fr) = f.mode(m);
                    if fr.is_zero() {
                        return;
                    }
                    factor *= fr;
                    symbols.push(s);
                }
                // Wick order: stable partition, creations first — the classes
                // commute internally so no corrections arise here
                symbols.sort_by_key(|s| s.class());
                let applied = apply_monomial(ctx, &symbols, v);
                if !applied.is_zero() {
                    let c = coef.scale_rat(&factor);
                    for (st, sc) in applied.terms() {
                        out.add_term(st.clone(), sc.mul(&c));
                    }
                }
            });
        }
        out
    }
}

/// Enumerate mode tuples summing to `target` with each entry `<= cap` and
/// enough budget left for the remaining slots.
fn enumerate_modes(
    modes: &mut Vec<i32>,
    pos: usize,
    target: i32,
    cap: i32,
    f: &mut impl FnMut(&[i32]),
) {
    let r = modes.len();
    if pos == r {
        if target == 0 {
            f(modes);
        }
        return;
    }
    if pos + 1 == r {
        if target <= cap {
            modes[pos] = target;
            f(modes);
        }
        return;
    }
    let remaining = (r - pos - 1) as i32;
    let lo = target - remaining * cap;
    for m in lo..=cap {
        modes[pos] = m;
        enumerate_modes(modes, pos + 1, target - m, cap, f);
    }
}

/// Grade shift of an operator: change in energy and in ghost weight.
pub type GradeShift = (i64, Vec<Q>);

/// Specification of a truncated enumeration.
#[derive(Clone, Debug)]
pub struct SpaceSpec {
    pub energy_cap: u32,
    /// Cap on the number of `gamma[0]` factors (the energy-0 direction is
    /// infinite-dimensional without it).
    pub gamma0_cap: u32,
    pub include_ghosts: bool,
    pub include_bosons: bool,
}

/// Enumerated basis of states below the caps.
#[derive(Clone, Debug)]
pub struct FockSpace {
    pub spec: SpaceSpec,
    pub states: Vec<FockState>,
    index: HashMap<FockState, usize>,
}

impl FockSpace {
    pub fn enumerate(num_roots: usize, rank: usize, spec: SpaceSpec) -> FockSpace {
        // generator list in a fixed order
        let mut gens: Vec<Gen> = Vec::new();
        if spec.include_ghosts {
            for a in 0..num_roots as u8 {
                for d in 0..=spec.energy_cap as u16 {
                    gens.push(Gen::Gamma(a, d));
                }
                for d in 1..=spec.energy_cap as u16 {
                    gens.push(Gen::Beta(a, d));
                }
            }
        }
        if spec.include_bosons {
            for i in 0..rank as u8 {
                for d in 1..=spec.energy_cap as u16 {
                    gens.push(Gen::Phi(i, d));
                }
            }
        }
        let mut states = Vec::new();
        let mut stack: Vec<(Gen, u16)> = Vec::new();
        fn rec(
            gens: &[Gen],
            k: usize,
            energy_left: i64,
            gamma0_left: i64,
            stack: &mut Vec<(Gen, u16)>,
            states: &mut Vec<FockState>,
        ) {
            if k == gens.len() {
                states.push(FockState::from_gens(stack.clone()));
                return;
            }
            let g = gens[k];
            let d = g.depth() as i64;
            let max_mult = if d == 0 {
                gamma0_left
            } else {
                energy_left / d
            };
            for m in 0..=max_mult {
                if m > 0 {
                    stack.push((g, m as u16));
                }
                rec(
                    gens,
                    k + 1,
                    energy_left - m * d,
                    if d == 0 { gamma0_left - m } else { gamma0_left },
                    stack,
                    states,
                );
                if m > 0 {
                    stack.pop();
                }
            }
        }
        rec(
            &gens,
            0,
            spec.energy_cap as i64,
            spec.gamma0_cap as i64,
            &mut stack,
            &mut states,
        );
        states.sort();
        let index = states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        FockSpace {
            spec,
            states,
            index,
        }
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn position(&self, s: &FockState) -> Option<usize> {
        self.index.get(s).copied()
    }
}

/// Sparse matrix of an operator over a truncated basis.
#[derive(Clone, Debug)]
pub struct OperatorMatrix<S: Scalar> {
    pub dim: usize,
    /// `cols[j]` lists `(row, value)` of the image of basis state `j`.
    pub cols: Vec<Vec<(usize, S)>>,
    /// Set when some image component left the enumerated space.
    pub lossy: bool,
    /// Uniform grade shift of all entries, when the operator is homogeneous.
    pub shift: Option<GradeShift>,
}

impl<S: Scalar> OperatorMatrix<S> {
    /// Assemble by applying `op` to every basis state.
    pub fn assemble(
        space: &FockSpace,
        root_coords: &[Vec<i64>],
        rank: usize,
        op: impl Fn(&StateVec<S>) -> StateVec<S>,
    ) -> Result<OperatorMatrix<S>, FockError> {
        let mut cols = Vec::with_capacity(space.dim());
        let mut lossy = false;
        let mut shift: Option<GradeShift> = None;
        for s in &space.states {
            let image = op(&StateVec::unit(s.clone()));
            let mut col = Vec::new();
            for (t, c) in image.terms() {
                match space.position(t) {
                    Some(row) => {
                        let ds = (
                            t.energy() as i64 - s.energy() as i64,
                            weight_diff(t, s, root_coords, rank),
                        );
                        match &shift {
                            None => shift = Some(ds),
                            Some(old) if *old != ds => {
                                return Err(FockError::MixedShift(old.clone(), ds))
                            }
                            _ => {}
                        }
                        col.push((row, c.clone()));
                    }
                    None => lossy = true,
                }
            }
            col.sort_by_key(|&(r, _)| r);
            cols.push(col);
        }
        Ok(OperatorMatrix {
            dim: space.dim(),
            cols,
            lossy,
            shift,
        })
    }

    pub fn identity(space: &FockSpace, rank: usize) -> OperatorMatrix<S> {
        OperatorMatrix {
            dim: space.dim(),
            cols: (0..space.dim()).map(|j| vec![(j, S::one())]).collect(),
            lossy: false,
            shift: Some((0, vec![qi(0); rank])),
        }
    }

    pub fn mul(&self, other: &OperatorMatrix<S>) -> OperatorMatrix<S> {
        // self * other: apply other first
        let mut cols = Vec::with_capacity(self.dim);
        for j in 0..other.dim {
            let mut acc: BTreeMap<usize, S> = BTreeMap::new();
            for (mid, c1) in &other.cols[j] {
                for (row, c2) in &self.cols[*mid] {
                    let e = acc.entry(*row).or_insert_with(S::zero);
                    *e = e.add(&c1.mul(c2));
                }
            }
            cols.push(
                acc.into_iter()
                    .filter(|(_, c)| !c.is_zero())
                    .collect::<Vec<_>>(),
            );
        }
        let shift = match (&self.shift, &other.shift) {
            (Some((e1, w1)), Some((e2, w2))) => Some((
                e1 + e2,
                w1.iter().zip(w2).map(|(a, b)| a + b).collect::<Vec<Q>>(),
            )),
            _ => None,
        };
        OperatorMatrix {
            dim: self.dim,
            cols,
            lossy: self.lossy || other.lossy,
            shift,
        }
    }
}

fn weight_diff(t: &FockState, s: &FockState, root_coords: &[Vec<i64>], rank: usize) -> Vec<Q> {
    let wt = t.ghost_weight(root_coords, rank);
    let ws = s.ghost_weight(root_coords, rank);
    wt.iter().zip(&ws).map(|(a, b)| a - b).collect()
}

/// Graded trace `sum_s A[s,s] q^{E(s)} e^{w_s(H)}` over the enumerated basis;
/// `h_values[i] = alpha_i(H)` fixes the Cartan element.  Exactly zero for a
/// homogeneous operator with a nonzero grade shift.
pub fn weighted_trace(
    space: &FockSpace,
    a: &OperatorMatrix<Complex64>,
    q: Complex64,
    root_coords: &[Vec<i64>],
    rank: usize,
    h_values: &[Complex64],
) -> Complex64 {
    if let Some((de, dw)) = &a.shift {
        if *de != 0 || dw.iter().any(|x| !num_traits::Zero::is_zero(x)) {
            return Complex64::new(0.0, 0.0);
        }
    }
    let mut parts: Vec<Complex64> = Vec::with_capacity(space.dim());
    for (j, s) in space.states.iter().enumerate() {
        let diag = a.cols[j]
            .iter()
            .find(|&&(r, _)| r == j)
            .map(|&(_, c)| c)
            .unwrap_or_else(|| Complex64::new(0.0, 0.0));
        if diag.norm() == 0.0 {
            continue;
        }
        let w = s.ghost_weight(root_coords, rank);
        let mut expo = Complex64::new(0.0, 0.0);
        for (wi, hi) in w.iter().zip(h_values) {
            expo += Complex64::new(crate::scalar::rat_to_f64(wi), 0.0) * hi;
        }
        parts.push(diag * q.powu(s.energy()) * expo.exp());
    }
    crate::scalar::pairwise_sum(&mut parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::LieAlgebra;
    use crate::scalar::SymPoly;

    fn ctx_a1_symbolic() -> FockContext<SymPoly> {
        let g = LieAlgebra::type_a(1);
        FockContext::new(
            1,
            g.gram.clone(),
            SymPoly::kappa(),
            SymPoly::kappa_pow(-1),
            vec![SymPoly::lambda(0)],
        )
    }

    fn ctx_a2_symbolic() -> FockContext<SymPoly> {
        let g = LieAlgebra::type_a(2);
        FockContext::new(
            3,
            g.gram.clone(),
            SymPoly::kappa(),
            SymPoly::kappa_pow(-1),
            vec![SymPoly::lambda(0), SymPoly::lambda(1)],
        )
    }

    #[test]
    fn vacuum_annihilation() {
        let ctx = ctx_a1_symbolic();
        let vac = StateVec::vacuum();
        for sym in [
            ModeSymbol::Beta { alpha: 0, m: 0 },
            ModeSymbol::Beta { alpha: 0, m: 3 },
            ModeSymbol::Gamma { alpha: 0, m: 1 },
            ModeSymbol::Phi { i: 0, m: 2 },
        ] {
            assert!(apply_symbol(&ctx, sym, &vac).is_zero(), "{sym} on vacuum");
        }
    }

    #[test]
    fn zero_mode_eigenvalue_and_boost() {
        let ctx = ctx_a1_symbolic();
        let vac = StateVec::vacuum();
        let got = apply_symbol(&ctx, ModeSymbol::Phi { i: 0, m: 0 }, &vac);
        assert_eq!(got, vac.scale(&SymPoly::lambda(0)));
        // e^{p_1} then phi_1[0]: eigenvalue lambda_1 + kappa (H_1|H_1)
        let boosted = apply_symbol(&ctx, ModeSymbol::Boost { i: 0 }, &vac);
        let got = apply_symbol(&ctx, ModeSymbol::Phi { i: 0, m: 0 }, &boosted);
        let want = boosted.scale(
            &SymPoly::lambda(0).add(&SymPoly::kappa().scale(&crate::scalar::qi(2))),
        );
        assert_eq!(got, want);
    }

    #[test]
    fn canonical_commutators_on_probe_states() {
        let ctx = ctx_a2_symbolic();
        // a handful of probe states
        let probes = vec![
            StateVec::vacuum(),
            apply_monomial(
                &ctx,
                &[
                    ModeSymbol::Gamma { alpha: 0, m: 0 },
                    ModeSymbol::Gamma { alpha: 2, m: -1 },
                    ModeSymbol::Beta { alpha: 1, m: -2 },
                ],
                &StateVec::vacuum(),
            ),
            apply_monomial(
                &ctx,
                &[
                    ModeSymbol::Phi { i: 0, m: -1 },
                    ModeSymbol::Phi { i: 1, m: -1 },
                    ModeSymbol::Phi { i: 0, m: -3 },
                ],
                &StateVec::vacuum(),
            ),
        ];
        let commutator = |a: ModeSymbol, b: ModeSymbol, v: &StateVec<SymPoly>| {
            apply_symbol(&ctx, a, &apply_symbol(&ctx, b, v))
                .sub(&apply_symbol(&ctx, b, &apply_symbol(&ctx, a, v)))
        };
        for v in &probes {
            // [beta_a[m], gamma^b[n]] = delta delta
            for m in -2..=2 {
                for n in -2..=2 {
                    for a in 0..3u8 {
                        for b in 0..3u8 {
                            let got = commutator(
                                ModeSymbol::Beta { alpha: a, m },
                                ModeSymbol::Gamma { alpha: b, m: n },
                                v,
                            );
                            let want = if a == b && m + n == 0 {
                                v.clone()
                            } else {
                                StateVec::zero()
                            };
                            assert_eq!(got, want, "beta_{a}[{m}], gamma^{b}[{n}]");
                        }
                    }
                }
            }
            // [phi_i[m], phi_j[n]] = kappa (H_i|H_j) m delta_{m+n}
            for m in -2..=2i32 {
                for n in -2..=2i32 {
                    for i in 0..2u8 {
                        for j in 0..2u8 {
                            let got = commutator(
                                ModeSymbol::Phi { i, m },
                                ModeSymbol::Phi { i: j, m: n },
                                v,
                            );
                            let want = if m + n == 0 {
                                v.scale(
                                    &SymPoly::kappa().scale(
                                        &(&ctx.gram[i as usize][j as usize]
                                            * crate::scalar::qi(m as i64)),
                                    ),
                                )
                            } else {
                                StateVec::zero()
                            };
                            assert_eq!(got, want, "phi_{i}[{m}], phi_{j}[{n}]");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn normal_order_matches_contract_examples() {
        let g = LieAlgebra::type_a(2);
        let kappa = SymPoly::kappa();
        // gamma^a[1] beta_a[-1] = beta_a[-1] gamma^a[1] - 1
        let no = normal_order(
            &g.gram,
            &kappa,
            &[
                ModeSymbol::Gamma { alpha: 0, m: 1 },
                ModeSymbol::Beta { alpha: 0, m: -1 },
            ],
        );
        assert_eq!(no.len(), 2);
        assert_eq!(
            no[0],
            (
                SymPoly::one(),
                vec![
                    ModeSymbol::Beta { alpha: 0, m: -1 },
                    ModeSymbol::Gamma { alpha: 0, m: 1 },
                ]
            )
        );
        assert_eq!(no[1], (SymPoly::constant(crate::scalar::qi(-1)), vec![]));
        // already ordered: unchanged, no corrections
        let mono = vec![
            ModeSymbol::Gamma { alpha: 1, m: -2 },
            ModeSymbol::Beta { alpha: 0, m: 0 },
        ];
        assert_eq!(
            normal_order(&g.gram, &kappa, &mono),
            vec![(SymPoly::one(), mono.clone())]
        );
        // phi_i[2] phi_j[-2] = phi_j[-2] phi_i[2] + 2 kappa (H_i|H_j)
        let no = normal_order(
            &g.gram,
            &kappa,
            &[
                ModeSymbol::Phi { i: 0, m: 2 },
                ModeSymbol::Phi { i: 1, m: -2 },
            ],
        );
        assert_eq!(no.len(), 2);
        assert_eq!(
            no[0],
            (
                SymPoly::one(),
                vec![
                    ModeSymbol::Phi { i: 1, m: -2 },
                    ModeSymbol::Phi { i: 0, m: 2 },
                ]
            )
        );
        // (H_1|H_2) = -1: correction 2 kappa (-1)
        assert_eq!(no[1], (SymPoly::kappa().scale(&crate::scalar::qi(-2)), vec![]));
    }

    #[test]
    fn normal_order_preserves_operator_action() {
        let ctx = ctx_a2_symbolic();
        let g = LieAlgebra::type_a(2);
        let monomials: Vec<Vec<ModeSymbol>> = vec![
            vec![
                ModeSymbol::Gamma { alpha: 0, m: 1 },
                ModeSymbol::Beta { alpha: 0, m: -1 },
            ],
            vec![
                ModeSymbol::Phi { i: 0, m: 2 },
                ModeSymbol::Phi { i: 1, m: -2 },
                ModeSymbol::Gamma { alpha: 1, m: 0 },
            ],
            vec![
                ModeSymbol::Beta { alpha: 2, m: 1 },
                ModeSymbol::Gamma { alpha: 2, m: -1 },
                ModeSymbol::Phi { i: 1, m: 1 },
                ModeSymbol::Phi { i: 0, m: -1 },
            ],
            vec![
                ModeSymbol::Phi { i: 0, m: 0 },
                ModeSymbol::Boost { i: 1 },
                ModeSymbol::Gamma { alpha: 0, m: 2 },
                ModeSymbol::Beta { alpha: 0, m: -2 },
            ],
        ];
        let probes = vec![
            StateVec::vacuum(),
            apply_monomial(
                &ctx,
                &[
                    ModeSymbol::Gamma { alpha: 2, m: 0 },
                    ModeSymbol::Beta { alpha: 2, m: -1 },
                    ModeSymbol::Phi { i: 1, m: -1 },
                ],
                &StateVec::vacuum(),
            ),
        ];
        for mono in &monomials {
            let expansion = normal_order(&g.gram, &ctx.kappa, mono);
            for v in &probes {
                let direct = apply_monomial(&ctx, mono, v);
                let mut via = StateVec::zero();
                for (c, m) in &expansion {
                    via = via.add(&apply_monomial(&ctx, m, v).scale(c));
                }
                assert_eq!(direct, via, "monomial {mono:?}");
            }
        }
    }

    #[test]
    fn composite_mode_derivative_factors() {
        // (d gamma)[m] = -m gamma[m]: apply the weight-1 field d(gamma) at
        // mode -2 to the vacuum and compare
        let ctx = ctx_a1_symbolic();
        let mut f = CompositeField::zero();
        f.add_term(SymPoly::one(), vec![PrimField::Gamma { alpha: 0, nderiv: 1 }]);
        let got = f.apply_mode(&ctx, -2, &StateVec::vacuum());
        let want = apply_symbol(
            &ctx,
            ModeSymbol::Gamma { alpha: 0, m: -2 },
            &StateVec::vacuum(),
        )
        .scale(&SymPoly::constant(crate::scalar::qi(2)));
        assert_eq!(got, want);
    }

    #[test]
    fn composite_two_factor_mode_sum() {
        // :gamma^a beta_a:(z) at mode 0 on gamma^a[0]|0> = gamma counts
        let ctx = ctx_a1_symbolic();
        let mut f = CompositeField::zero();
        f.add_term(
            SymPoly::one(),
            vec![
                PrimField::Gamma { alpha: 0, nderiv: 0 },
                PrimField::Beta { alpha: 0, nderiv: 0 },
            ],
        );
        let one_gamma = apply_symbol(
            &ctx,
            ModeSymbol::Gamma { alpha: 0, m: 0 },
            &StateVec::vacuum(),
        );
        let got = f.apply_mode(&ctx, 0, &one_gamma);
        assert_eq!(got, one_gamma, ":gamma beta:[0] counts gamma factors");
        // and on the vacuum it vanishes
        assert!(f.apply_mode(&ctx, 0, &StateVec::vacuum()).is_zero());
    }

    #[test]
    fn space_enumeration_counts() {
        // A1 ghosts: energy <= 2, gamma0 <= 1:
        // energy part {1, 2 choices at E=1, 5 at E=2} times gamma0 in {0,1}
        let space = FockSpace::enumerate(
            1,
            1,
            SpaceSpec {
                energy_cap: 2,
                gamma0_cap: 1,
                include_ghosts: true,
                include_bosons: false,
            },
        );
        assert_eq!(space.dim(), 16);
        // bosons only, rank 2, energy <= 3: partitions with 2 colors
        // E=0:1, 1:2, 2:5, 3:10 -> 18
        let space = FockSpace::enumerate(
            0,
            2,
            SpaceSpec {
                energy_cap: 3,
                gamma0_cap: 0,
                include_ghosts: false,
                include_bosons: true,
            },
        );
        assert_eq!(space.dim(), 18);
    }

    #[test]
    fn ghost_character_from_weighted_trace() {
        // trace of the identity over the truncated ghost space against the
        // double product over (alpha, m); A1 with a fast-converging charge
        let g = LieAlgebra::type_a(1);
        let space = FockSpace::enumerate(
            1,
            1,
            SpaceSpec {
                energy_cap: 8,
                gamma0_cap: 26,
                include_ghosts: true,
                include_bosons: false,
            },
        );
        let a = OperatorMatrix::<Complex64>::identity(&space, 1);
        // convergence needs |e^{-a}| < 1 and |q e^{a}| < 1
        let q = Complex64::new(0.1, 0.0);
        let ah = Complex64::new(1.0, 0.0);
        let coords: Vec<Vec<i64>> = g.positive_roots.iter().map(|r| r.coords.clone()).collect();
        let got = weighted_trace(&space, &a, q, &coords, 1, &[ah]);
        let mut want = Complex64::new(1.0, 0.0);
        for m in 0..=200 {
            want /= Complex64::new(1.0, 0.0) - q.powi(m) * (-ah).exp();
            if m > 0 {
                want /= Complex64::new(1.0, 0.0) - q.powi(m) * ah.exp();
            }
        }
        // truncation error ~ q^{cap+1} times the state count at that grade
        assert!(
            (got - want).norm() / want.norm() < 1e-4,
            "{got} vs {want}"
        );
    }

    #[test]
    fn matrix_trace_cyclicity_on_safe_pair() {
        let g = LieAlgebra::type_a(1);
        let ctx = FockContext::new(
            1,
            g.gram.clone(),
            Complex64::new(3.7, 0.0),
            Complex64::new(1.0 / 3.7, 0.0),
            vec![Complex64::new(0.4, 0.0)],
        );
        let space = FockSpace::enumerate(
            1,
            1,
            SpaceSpec {
                energy_cap: 4,
                gamma0_cap: 3,
                include_ghosts: true,
                include_bosons: true,
            },
        );
        let coords: Vec<Vec<i64>> = g.positive_roots.iter().map(|r| r.coords.clone()).collect();
        // A = gamma^a[-1] beta_a[1] (energy-preserving), B = gamma count
        let a = OperatorMatrix::assemble(&space, &coords, 1, |v| {
            apply_monomial(
                &ctx,
                &[
                    ModeSymbol::Gamma { alpha: 0, m: -1 },
                    ModeSymbol::Beta { alpha: 0, m: 1 },
                ],
                v,
            )
        })
        .unwrap();
        let b = OperatorMatrix::assemble(&space, &coords, 1, |v| {
            apply_monomial(
                &ctx,
                &[
                    ModeSymbol::Gamma { alpha: 0, m: 0 },
                    ModeSymbol::Beta { alpha: 0, m: 0 },
                ],
                v,
            )
        })
        .unwrap();
        assert!(!a.lossy && !b.lossy);
        let q = Complex64::new(0.3, 0.0);
        let h = [Complex64::new(0.9, 0.0)];
        let tr_ab = weighted_trace(&space, &a.mul(&b), q, &coords, 1, &h);
        let tr_ba = weighted_trace(&space, &b.mul(&a), q, &coords, 1, &h);
        assert!((tr_ab - tr_ba).norm() < 1e-12);
    }

    #[test]
    fn off_diagonal_grade_shift_traces_to_zero() {
        let g = LieAlgebra::type_a(1);
        let ctx = FockContext::new(
            1,
            g.gram.clone(),
            Complex64::new(2.0, 0.0),
            Complex64::new(0.5, 0.0),
            vec![Complex64::new(0.0, 0.0)],
        );
        let space = FockSpace::enumerate(
            1,
            1,
            SpaceSpec {
                energy_cap: 3,
                gamma0_cap: 2,
                include_ghosts: true,
                include_bosons: false,
            },
        );
        let coords: Vec<Vec<i64>> = g.positive_roots.iter().map(|r| r.coords.clone()).collect();
        let a = OperatorMatrix::assemble(&space, &coords, 1, |v| {
            apply_symbol(&ctx, ModeSymbol::Gamma { alpha: 0, m: 0 }, v)
        })
        .unwrap();
        assert_eq!(a.shift.as_ref().map(|s| s.0), Some(0));
        let tr = weighted_trace(
            &space,
            &a,
            Complex64::new(0.4, 0.0),
            &coords,
            1,
            &[Complex64::new(1.0, 0.0)],
        );
        assert_eq!(tr, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn states_display_readably() {
        let st = FockState::from_gens(vec![
            (Gen::Gamma(0, 0), 2),
            (Gen::Beta(1, 3), 1),
            (Gen::Phi(0, 1), 1),
        ]);
        assert_eq!(format!("{st}"), "gamma^1[0]^2 beta_2[-3] phi_1[-1] |vac>");
        assert_eq!(st.energy(), 4);
        assert_eq!(st.gamma0_degree(), 2);
    }
}
