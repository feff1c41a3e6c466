//! Scalar rings used throughout the crate.
//!
//! Verification paths run over exact arithmetic: `BigRational` for plain
//! rational data and [`SymPoly`] (a sparse Laurent polynomial over the
//! rationals in a handful of named symbols) when a computation must stay
//! symbolic in the twist parameter `kappa`, the highest-weight evaluations
//! `lambda_i`, or the not-yet-solved current constants `c_i`.  Numeric paths
//! use `Complex64`.  The [`Scalar`] trait is the small common interface the
//! generic operator machinery needs.

use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use std::collections::BTreeMap;
use std::fmt;

pub type Q = BigRational;

/// Convenience constructor for an exact rational from an integer pair.
pub fn qr(num: i64, den: i64) -> Q {
    Q::new(BigInt::from(num), BigInt::from(den))
}

/// Convenience constructor for an exact integer rational.
pub fn qi(num: i64) -> Q {
    Q::from(BigInt::from(num))
}

/// Symbols a [`SymPoly`] may mention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    /// The twist parameter; negative exponents are allowed (it is invertible).
    Kappa,
    /// The evaluation `lambda(H_i)` of a symbolic weight on the i-th coroot.
    Lambda(u8),
    /// The i-th undetermined lowering-current constant.
    CConst(u8),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::Kappa => write!(f, "kappa"),
            Var::Lambda(i) => write!(f, "lambda{}", i + 1),
            Var::CConst(i) => write!(f, "c{}", i + 1),
        }
    }
}

/// A power product of symbols, kept sorted by symbol.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Mono(Vec<(Var, i32)>);

impl Mono {
    pub fn unit() -> Self {
        Mono(Vec::new())
    }

    pub fn var(v: Var, e: i32) -> Self {
        if e == 0 {
            Mono::unit()
        } else {
            Mono(vec![(v, e)])
        }
    }

    pub fn is_unit(&self) -> bool {
        self.0.is_empty()
    }

    pub fn exponent(&self, v: Var) -> i32 {
        self.0
            .iter()
            .find(|(w, _)| *w == v)
            .map(|(_, e)| *e)
            .unwrap_or(0)
    }

    pub fn mul(&self, other: &Mono) -> Mono {
        let mut out = Vec::with_capacity(self.0.len() + other.0.len());
        let (mut i, mut j) = (0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].0.cmp(&other.0[j].0) {
                std::cmp::Ordering::Less => {
                    out.push(self.0[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(other.0[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    let e = self.0[i].1 + other.0[j].1;
                    if e != 0 {
                        out.push((self.0[i].0, e));
                    }
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&self.0[i..]);
        out.extend_from_slice(&other.0[j..]);
        Mono(out)
    }

    /// `self / other` when every exponent of `other` is covered.
    pub fn try_div(&self, other: &Mono) -> Option<Mono> {
        let inv = Mono(other.0.iter().map(|&(v, e)| (v, -e)).collect());
        let q = self.mul(&inv);
        // Division is fine for Kappa (truly invertible); for other symbols a
        // negative exponent signals failure.
        if q.0.iter().any(|&(v, e)| v != Var::Kappa && e < 0) {
            None
        } else {
            Some(q)
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = (Var, i32)> + '_ {
        self.0.iter().copied()
    }
}

impl fmt::Display for Mono {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "1");
        }
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|(v, e)| {
                if *e == 1 {
                    format!("{v}")
                } else {
                    format!("{v}^{e}")
                }
            })
            .collect();
        write!(f, "{}", parts.join("*"))
    }
}

/// Sparse Laurent polynomial over the rationals in the symbols of [`Var`].
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SymPoly {
    terms: BTreeMap<Mono, Q>,
}

impl SymPoly {
    pub fn zero() -> Self {
        SymPoly {
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(c: Q) -> Self {
        let mut terms = BTreeMap::new();
        if !Zero::is_zero(&c) {
            terms.insert(Mono::unit(), c);
        }
        SymPoly { terms }
    }

    pub fn one() -> Self {
        SymPoly::constant(qi(1))
    }

    pub fn var(v: Var) -> Self {
        SymPoly::monomial(Mono::var(v, 1), qi(1))
    }

    pub fn kappa() -> Self {
        SymPoly::var(Var::Kappa)
    }

    pub fn kappa_pow(e: i32) -> Self {
        SymPoly::monomial(Mono::var(Var::Kappa, e), qi(1))
    }

    pub fn lambda(i: usize) -> Self {
        SymPoly::var(Var::Lambda(i as u8))
    }

    pub fn cconst(i: usize) -> Self {
        SymPoly::var(Var::CConst(i as u8))
    }

    pub fn monomial(m: Mono, c: Q) -> Self {
        let mut terms = BTreeMap::new();
        if !Zero::is_zero(&c) {
            terms.insert(m, c);
        }
        SymPoly { terms }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Mono, &Q)> {
        self.terms.iter()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    fn insert_add(&mut self, m: Mono, c: Q) {
        if Zero::is_zero(&c) {
            return;
        }
        use std::collections::btree_map::Entry;
        match self.terms.entry(m) {
            Entry::Vacant(e) => {
                e.insert(c);
            }
            Entry::Occupied(mut e) => {
                let s = e.get() + &c;
                if Zero::is_zero(&s) {
                    e.remove();
                } else {
                    *e.get_mut() = s;
                }
            }
        }
    }

    pub fn add(&self, other: &SymPoly) -> SymPoly {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.insert_add(m.clone(), c.clone());
        }
        out
    }

    pub fn sub(&self, other: &SymPoly) -> SymPoly {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.insert_add(m.clone(), -c.clone());
        }
        out
    }

    pub fn neg(&self) -> SymPoly {
        SymPoly {
            terms: self.terms.iter().map(|(m, c)| (m.clone(), -c.clone())).collect(),
        }
    }

    pub fn mul(&self, other: &SymPoly) -> SymPoly {
        let mut out = SymPoly::zero();
        for (m1, c1) in &self.terms {
            for (m2, c2) in &other.terms {
                out.insert_add(m1.mul(m2), c1 * c2);
            }
        }
        out
    }

    pub fn scale(&self, c: &Q) -> SymPoly {
        if Zero::is_zero(c) {
            return SymPoly::zero();
        }
        SymPoly {
            terms: self.terms.iter().map(|(m, v)| (m.clone(), v * c)).collect(),
        }
    }

    /// As a plain rational if no symbol appears.
    pub fn as_rational(&self) -> Option<Q> {
        match self.terms.len() {
            0 => Some(qi(0)),
            1 => {
                let (m, c) = self.terms.iter().next().unwrap();
                if m.is_unit() {
                    Some(c.clone())
                } else {
                    None
                }
            }
            _ => None,
        }
    }

    /// Substitute a polynomial for one symbol.
    pub fn subst(&self, v: Var, value: &SymPoly) -> SymPoly {
        let mut out = SymPoly::zero();
        for (m, c) in &self.terms {
            let e = m.exponent(v);
            let rest = Mono(m.vars().filter(|(w, _)| *w != v).collect());
            let mut term = SymPoly::monomial(rest, c.clone());
            if e != 0 {
                assert!(e > 0, "cannot substitute into a negative power of {v}");
                for _ in 0..e {
                    term = term.mul(value);
                }
            }
            out = out.add(&term);
        }
        out
    }

    /// Split as `a0 + sum_i a_i * c_i`, failing if any `c_i` appears with
    /// degree above one or inside a product of two `c` symbols.
    pub fn split_linear_cconst(&self, n: usize) -> Option<(SymPoly, Vec<SymPoly>)> {
        let mut a0 = SymPoly::zero();
        let mut lin = vec![SymPoly::zero(); n];
        for (m, c) in &self.terms {
            let cvars: Vec<(Var, i32)> = m
                .vars()
                .filter(|(v, _)| matches!(v, Var::CConst(_)))
                .collect();
            match cvars.len() {
                0 => a0.insert_add(m.clone(), c.clone()),
                1 => {
                    let (v, e) = cvars[0];
                    if e != 1 {
                        return None;
                    }
                    let Var::CConst(i) = v else { unreachable!() };
                    let rest = Mono(m.vars().filter(|(w, _)| !matches!(w, Var::CConst(_))).collect());
                    lin[i as usize].insert_add(rest, c.clone());
                }
                _ => return None,
            }
        }
        Some((a0, lin))
    }

    /// Exact division, if `other` divides every step of the reduction.
    pub fn try_div(&self, other: &SymPoly) -> Option<SymPoly> {
        if other.is_zero() {
            return None;
        }
        let (dm, dc) = other.terms.iter().next_back().unwrap();
        let mut rem = self.clone();
        let mut out = SymPoly::zero();
        let mut guard = 0usize;
        while !rem.is_zero() {
            guard += 1;
            // lead-term reduction over a Laurent ring need not terminate
            // (e.g. dividing 1 by kappa - 1 walks down forever), so a small
            // step bound doubles as the non-divisibility signal
            if guard > 512 {
                return None;
            }
            let (lm, lc) = rem.terms.iter().next_back().unwrap();
            let qm = lm.try_div(dm)?;
            let qc = lc / dc;
            let qt = SymPoly::monomial(qm, qc);
            rem = rem.sub(&qt.mul(other));
            out = out.add(&qt);
        }
        Some(out)
    }

    /// Numeric evaluation with the given values for `kappa`, `lambda_i` and `c_i`.
    pub fn eval(&self, kappa: Complex64, lambda: &[Complex64], c: &[Complex64]) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (m, coef) in &self.terms {
            let mut t = Complex64::new(rat_to_f64(coef), 0.0);
            for (v, e) in m.vars() {
                let base = match v {
                    Var::Kappa => kappa,
                    Var::Lambda(i) => lambda[i as usize],
                    Var::CConst(i) => c[i as usize],
                };
                t *= base.powi(e);
            }
            acc += t;
        }
        acc
    }
}

impl fmt::Display for SymPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (m, c) in self.terms.iter().rev() {
            let sign = if c.is_negative() { "-" } else { "+" };
            let mag = c.abs();
            if first {
                if c.is_negative() {
                    write!(f, "-")?;
                }
                first = false;
            } else {
                write!(f, " {sign} ")?;
            }
            if m.is_unit() {
                write!(f, "{mag}")?;
            } else if mag.is_one() {
                write!(f, "{m}")?;
            } else {
                write!(f, "{mag}*{m}")?;
            }
        }
        Ok(())
    }
}

/// Lossy conversion of an exact rational to `f64`.
pub fn rat_to_f64(q: &Q) -> f64 {
    use num_traits::ToPrimitive;
    q.to_f64().unwrap_or_else(|| {
        // Fall back to a quotient of truncated parts for huge values.
        let n = q.numer().to_f64().unwrap_or(f64::NAN);
        let d = q.denom().to_f64().unwrap_or(f64::NAN);
        n / d
    })
}

/// The ring interface the generic Fock/operator machinery is written against.
pub trait Scalar: Clone + PartialEq + fmt::Debug + Send + Sync + 'static {
    fn zero() -> Self;
    fn one() -> Self;
    fn is_zero(&self) -> bool;
    fn from_rat(r: &Q) -> Self;
    fn add(&self, o: &Self) -> Self;
    fn sub(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn neg(&self) -> Self;
    /// Human-readable rendering (used when printing operators).
    fn show(&self) -> String;

    fn from_i64(n: i64) -> Self {
        Self::from_rat(&qi(n))
    }
    fn scale_rat(&self, r: &Q) -> Self {
        self.mul(&Self::from_rat(r))
    }
}

impl Scalar for Q {
    fn zero() -> Self {
        qi(0)
    }
    fn one() -> Self {
        qi(1)
    }
    fn is_zero(&self) -> bool {
        Zero::is_zero(self)
    }
    fn from_rat(r: &Q) -> Self {
        r.clone()
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn neg(&self) -> Self {
        -self.clone()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Scalar for SymPoly {
    fn zero() -> Self {
        SymPoly::zero()
    }
    fn one() -> Self {
        SymPoly::one()
    }
    fn is_zero(&self) -> bool {
        SymPoly::is_zero(self)
    }
    fn from_rat(r: &Q) -> Self {
        SymPoly::constant(r.clone())
    }
    fn add(&self, o: &Self) -> Self {
        SymPoly::add(self, o)
    }
    fn sub(&self, o: &Self) -> Self {
        SymPoly::sub(self, o)
    }
    fn mul(&self, o: &Self) -> Self {
        SymPoly::mul(self, o)
    }
    fn neg(&self) -> Self {
        SymPoly::neg(self)
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Scalar for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn one() -> Self {
        Complex64::new(1.0, 0.0)
    }
    fn is_zero(&self) -> bool {
        self.re == 0.0 && self.im == 0.0
    }
    fn from_rat(r: &Q) -> Self {
        Complex64::new(rat_to_f64(r), 0.0)
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn neg(&self) -> Self {
        -self
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

/// Deterministic pairwise summation; used everywhere a numeric sum feeds a
/// reported value so that results do not depend on accumulation order.
pub fn pairwise_sum(values: &mut Vec<Complex64>) -> Complex64 {
    if values.is_empty() {
        return Complex64::new(0.0, 0.0);
    }
    let mut n = values.len();
    while n > 1 {
        let half = n / 2;
        for i in 0..half {
            let merged = values[2 * i] + values[2 * i + 1];
            values[i] = merged;
        }
        if n % 2 == 1 {
            values[half] = values[n - 1];
            n = half + 1;
        } else {
            n = half;
        }
    }
    values[0]
}
