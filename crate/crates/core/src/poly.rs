//! Polynomials in the big-cell coordinates and first-order differential
//! operators acting on them.
//!
//! One variable `x^alpha` is attached to each positive root.  The
//! differential operators produced by the realization are all first order,
//! `sum_alpha c_alpha(x) d/dx^alpha + c_0(x)`, and that class is closed under
//! commutators — so the operator type stores exactly those two pieces and the
//! commutator is computed in closed form.

use crate::scalar::Scalar;
use std::collections::BTreeMap;
use std::fmt;

/// Sparse polynomial in `nvars` commuting variables over a [`Scalar`] ring.
#[derive(Clone, Debug, PartialEq)]
pub struct Poly<S: Scalar> {
    nvars: usize,
    terms: BTreeMap<Vec<u16>, S>,
}

impl<S: Scalar> Poly<S> {
    pub fn zero(nvars: usize) -> Self {
        Poly {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: S) -> Self {
        let mut p = Self::zero(nvars);
        if !c.is_zero() {
            p.terms.insert(vec![0; nvars], c);
        }
        p
    }

    pub fn one(nvars: usize) -> Self {
        Self::constant(nvars, S::one())
    }

    pub fn var(nvars: usize, i: usize) -> Self {
        let mut e = vec![0u16; nvars];
        e[i] = 1;
        let mut p = Self::zero(nvars);
        p.terms.insert(e, S::one());
        p
    }

    pub fn monomial(nvars: usize, expts: Vec<u16>, c: S) -> Self {
        assert_eq!(expts.len(), nvars);
        let mut p = Self::zero(nvars);
        if !c.is_zero() {
            p.terms.insert(expts, c);
        }
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Vec<u16>, &S)> {
        self.terms.iter()
    }

    pub fn constant_term(&self) -> S {
        self.terms
            .get(&vec![0u16; self.nvars])
            .cloned()
            .unwrap_or_else(S::zero)
    }

    fn insert_add(&mut self, e: Vec<u16>, c: S) {
        if c.is_zero() {
            return;
        }
        match self.terms.entry(e) {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(c);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let s = o.get().add(&c);
                if s.is_zero() {
                    o.remove();
                } else {
                    *o.get_mut() = s;
                }
            }
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.nvars, other.nvars);
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.insert_add(e.clone(), c.clone());
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Self {
        Poly {
            nvars: self.nvars,
            terms: self
                .terms
                .iter()
                .map(|(e, c)| (e.clone(), c.neg()))
                .collect(),
        }
    }

    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.nvars, other.nvars);
        let mut out = Self::zero(self.nvars);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e: Vec<u16> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.insert_add(e, ca.mul(cb));
            }
        }
        out
    }

    pub fn scale(&self, s: &S) -> Self {
        if s.is_zero() {
            return Self::zero(self.nvars);
        }
        let mut out = Self::zero(self.nvars);
        for (e, c) in &self.terms {
            out.insert_add(e.clone(), c.mul(s));
        }
        out
    }

    /// Partial derivative with respect to variable `i`.
    pub fn derivative(&self, i: usize) -> Self {
        let mut out = Self::zero(self.nvars);
        for (e, c) in &self.terms {
            if e[i] == 0 {
                continue;
            }
            let mut e2 = e.clone();
            e2[i] -= 1;
            out.insert_add(e2, c.scale_rat(&crate::scalar::qi(e[i] as i64)));
        }
        out
    }

    /// Evaluate at a point of the coefficient ring.
    pub fn eval(&self, point: &[S]) -> S {
        assert_eq!(point.len(), self.nvars);
        let mut acc = S::zero();
        for (e, c) in &self.terms {
            let mut term = c.clone();
            for (i, &k) in e.iter().enumerate() {
                for _ in 0..k {
                    term = term.mul(&point[i]);
                }
            }
            acc = acc.add(&term);
        }
        acc
    }

    /// Change coefficient rings term by term.
    pub fn map<T: Scalar>(&self, f: impl Fn(&S) -> T) -> Poly<T> {
        let mut out = Poly::zero(self.nvars);
        for (e, c) in &self.terms {
            out.insert_add(e.clone(), f(c));
        }
        out
    }

    pub fn total_degree(&self) -> usize {
        self.terms
            .keys()
            .map(|e| e.iter().map(|&k| k as usize).sum())
            .max()
            .unwrap_or(0)
    }

    /// Render with the given variable names.
    pub fn display_with(&self, names: &[String]) -> String {
        if self.is_zero() {
            return "0".into();
        }
        let mut parts = Vec::new();
        for (e, c) in &self.terms {
            let mut factors = Vec::new();
            let unit_exp = e.iter().all(|&k| k == 0);
            if !unit_exp {
                for (i, &k) in e.iter().enumerate() {
                    match k {
                        0 => {}
                        1 => factors.push(names[i].clone()),
                        _ => factors.push(format!("{}^{}", names[i], k)),
                    }
                }
            }
            let cs = c.show();
            if unit_exp {
                parts.push(cs);
            } else if cs == "1" {
                parts.push(factors.join("*"));
            } else {
                parts.push(format!("{}*{}", cs, factors.join("*")));
            }
        }
        parts.join(" + ")
    }
}

/// First-order differential operator `sum_i first[i] d_i + zeroth`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffOp<S: Scalar> {
    pub first: Vec<Poly<S>>,
    pub zeroth: Poly<S>,
}

impl<S: Scalar> DiffOp<S> {
    pub fn zero(nvars: usize) -> Self {
        DiffOp {
            first: vec![Poly::zero(nvars); nvars],
            zeroth: Poly::zero(nvars),
        }
    }

    pub fn nvars(&self) -> usize {
        self.first.len()
    }

    pub fn is_zero(&self) -> bool {
        self.zeroth.is_zero() && self.first.iter().all(Poly::is_zero)
    }

    pub fn add(&self, other: &Self) -> Self {
        DiffOp {
            first: self
                .first
                .iter()
                .zip(&other.first)
                .map(|(a, b)| a.add(b))
                .collect(),
            zeroth: self.zeroth.add(&other.zeroth),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        DiffOp {
            first: self
                .first
                .iter()
                .zip(&other.first)
                .map(|(a, b)| a.sub(b))
                .collect(),
            zeroth: self.zeroth.sub(&other.zeroth),
        }
    }

    pub fn neg(&self) -> Self {
        DiffOp {
            first: self.first.iter().map(Poly::neg).collect(),
            zeroth: self.zeroth.neg(),
        }
    }

    pub fn scale(&self, s: &S) -> Self {
        DiffOp {
            first: self.first.iter().map(|p| p.scale(s)).collect(),
            zeroth: self.zeroth.scale(s),
        }
    }

    /// Apply to a polynomial.
    pub fn apply(&self, p: &Poly<S>) -> Poly<S> {
        let mut out = self.zeroth.mul(p);
        for (i, c) in self.first.iter().enumerate() {
            if !c.is_zero() {
                out = out.add(&c.mul(&p.derivative(i)));
            }
        }
        out
    }

    /// Commutator of two first-order operators (again first order).
    pub fn commutator(&self, other: &Self) -> Self {
        let n = self.nvars();
        let mut first = vec![Poly::zero(n); n];
        for (beta, f) in first.iter_mut().enumerate() {
            for alpha in 0..n {
                if !self.first[alpha].is_zero() {
                    *f = f.add(&self.first[alpha].mul(&other.first[beta].derivative(alpha)));
                }
                if !other.first[alpha].is_zero() {
                    *f = f.sub(&other.first[alpha].mul(&self.first[beta].derivative(alpha)));
                }
            }
        }
        let mut zeroth = Poly::zero(n);
        for alpha in 0..n {
            if !self.first[alpha].is_zero() {
                zeroth = zeroth.add(&self.first[alpha].mul(&other.zeroth.derivative(alpha)));
            }
            if !other.first[alpha].is_zero() {
                zeroth = zeroth.sub(&other.first[alpha].mul(&self.zeroth.derivative(alpha)));
            }
        }
        DiffOp { first, zeroth }
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(&S) -> T + Copy) -> DiffOp<T> {
        DiffOp {
            first: self.first.iter().map(|p| p.map(f)).collect(),
            zeroth: self.zeroth.map(f),
        }
    }

    /// Render with `d_{name}` for the derivative slots.
    pub fn display_with(&self, names: &[String]) -> String {
        let mut parts = Vec::new();
        for (i, c) in self.first.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            let cs = c.display_with(names);
            if cs == "1" {
                parts.push(format!("d_{}", names[i]));
            } else if c.num_terms() == 1 {
                parts.push(format!("{cs}*d_{}", names[i]));
            } else {
                parts.push(format!("({cs})*d_{}", names[i]));
            }
        }
        if !self.zeroth.is_zero() {
            parts.push(self.zeroth.display_with(names));
        }
        if parts.is_empty() {
            "0".into()
        } else {
            parts.join(" + ")
        }
    }
}

impl<S: Scalar> fmt::Display for DiffOp<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = (0..self.nvars()).map(|i| format!("x{}", i + 1)).collect();
        write!(f, "{}", self.display_with(&names))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{qi, Q};

    fn x(i: usize) -> Poly<Q> {
        Poly::var(3, i)
    }

    #[test]
    fn poly_arithmetic() {
        let p = x(0).mul(&x(1)).add(&Poly::constant(3, qi(2)));
        let q = x(0).sub(&x(2));
        let pq = p.mul(&q);
        // (x1 x2 + 2)(x1 - x3) has 4 terms
        assert_eq!(pq.num_terms(), 4);
        assert_eq!(pq.constant_term(), qi(0));
        let at = [qi(1), qi(2), qi(3)];
        assert_eq!(pq.eval(&at), (qi(2) + qi(2)) * (qi(1) - qi(3)));
    }

    #[test]
    fn derivative_leibniz() {
        let p = x(0).mul(&x(0)).mul(&x(1));
        let q = x(1).add(&Poly::one(3));
        let lhs = p.mul(&q).derivative(1);
        let rhs = p.derivative(1).mul(&q).add(&p.mul(&q.derivative(1)));
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn diffop_apply_and_commutator() {
        // D1 = x1 d2, D2 = d1 : [D1, D2] = -d2
        let n = 3;
        let mut d1 = DiffOp::zero(n);
        d1.first[1] = Poly::var(n, 0);
        let mut d2 = DiffOp::zero(n);
        d2.first[0] = Poly::one(n);
        let c = d1.commutator(&d2);
        let mut expect = DiffOp::zero(n);
        expect.first[1] = Poly::constant(n, qi(-1));
        assert_eq!(c, expect);

        // the commutator acts as the difference of compositions
        let p = x(0).mul(&x(1)).add(&x(1).mul(&x(2)));
        let lhs = c.apply(&p);
        let rhs = d1.apply(&d2.apply(&p)).sub(&d2.apply(&d1.apply(&p)));
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn zeroth_order_enters_commutator() {
        // D1 = d1 + x1, D2 = d1 + x1^2 : [D1, D2] = 2 x1 - 1... check via action
        let n = 1;
        let mut d1 = DiffOp::zero(n);
        d1.first[0] = Poly::one(n);
        d1.zeroth = Poly::var(n, 0);
        let mut d2 = DiffOp::zero(n);
        d2.first[0] = Poly::one(n);
        d2.zeroth = Poly::var(n, 0).mul(&Poly::var(n, 0));
        let c = d1.commutator(&d2);
        for k in 0..4u16 {
            let p: Poly<Q> = Poly::monomial(n, vec![k], qi(1));
            let lhs = c.apply(&p);
            let rhs = d1.apply(&d2.apply(&p)).sub(&d2.apply(&d1.apply(&p)));
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn display_is_readable() {
        let n = 2;
        let mut d = DiffOp::zero(n);
        d.first[0] = Poly::one(n);
        d.first[1] = Poly::var(n, 0).neg();
        d.zeroth = Poly::constant(n, qi(3));
        let names = vec!["x1".to_string(), "x2".to_string()];
        assert_eq!(d.display_with(&names), "d_x1 + -1*x1*d_x2 + 3");
    }
}
