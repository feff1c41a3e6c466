//! Odd Jacobi theta function in multiplicative coordinates, Dedekind eta,
//! q-Pochhammer products, and the elliptic kernels built from them.
//!
//! Conventions: the nome satisfies `|q| < 1`, points live on the torus
//! `C^* / q^Z`, and
//!
//! ```text
//!   theta(z; q) = i q^{1/8} sum_{n in Z} (-1)^n q^{n(n+1)/2} z^{n + 1/2}
//! ```
//!
//! with principal-branch half-integer powers.  The function is odd under
//! `z -> 1/z`, vanishes exactly on `q^Z`, and `theta'(1) = i eta(q)^3`.  The
//! kernels `sigma_c` and `w_c` are the unique meromorphic objects with a unit
//! residue and the twisted periodicity used by the screened correlation
//! blocks; `zeta` is the logarithmic derivative `z theta'(z)/theta(z)`.

use num_complex::Complex64;

#[derive(Debug, thiserror::Error)]
pub enum SpecialError {
    #[error("nome must satisfy |q| < 1, got |q| = {0}")]
    BadNome(f64),
    #[error("torus coordinate must be nonzero")]
    ZeroArgument,
}

/// Validate the nome once at an API boundary.
pub fn validate_nome(q: Complex64) -> Result<(), SpecialError> {
    if q.norm() < 1.0 {
        Ok(())
    } else {
        Err(SpecialError::BadNome(q.norm()))
    }
}

const ONE: Complex64 = Complex64::new(1.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// `theta` and its first `order` derivatives in `z` (so `order + 1` values).
pub fn theta_suite(z: Complex64, q: Complex64, order: usize) -> Vec<Complex64> {
    assert!(q.norm() < 1.0, "nome must satisfy |q| < 1");
    assert!(z.norm() > 0.0, "torus coordinate must be nonzero");
    let prefactor = I * q.powf(0.125);
    let lnq = q.norm().ln();
    let lnz = z.norm().ln().abs();
    // choose N with |q|^{n(n+1)/2} |z|^n below 1e-30 at the edge
    let mut n_max = 8usize;
    while n_max < 400 {
        let e = 0.5 * (n_max * (n_max + 1)) as f64 * lnq + n_max as f64 * lnz;
        if e < -70.0 {
            break;
        }
        n_max += 4;
    }
    let mut out = vec![Complex64::new(0.0, 0.0); order + 1];
    for n in -(n_max as i64)..=(n_max as i64) {
        let tri = (n * (n + 1)) / 2;
        let sign = if n.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
        let base = sign * q.powi(tri as i32);
        let p = n as f64 + 0.5;
        // z^{p - k} times the falling factorial p (p-1) .. (p-k+1)
        let mut fall = Complex64::new(1.0, 0.0);
        for (k, slot) in out.iter_mut().enumerate() {
            *slot += base * fall * z.powf(p - k as f64) * Complex64::new(1.0, 0.0);
            fall *= Complex64::new(p - k as f64, 0.0);
        }
    }
    for slot in out.iter_mut() {
        *slot *= prefactor;
    }
    out
}

/// Odd Jacobi theta function `theta(z; q)`.
pub fn theta11(z: Complex64, q: Complex64) -> Complex64 {
    theta_suite(z, q, 0)[0]
}

/// First z-derivative of theta.
pub fn theta11_d1(z: Complex64, q: Complex64) -> Complex64 {
    theta_suite(z, q, 1)[1]
}

/// q-Pochhammer product `(a; q)_infinity`.
pub fn qpoch(a: Complex64, q: Complex64) -> Complex64 {
    assert!(q.norm() < 1.0, "nome must satisfy |q| < 1");
    let mut prod = ONE;
    let mut aq = a;
    for _ in 0..10_000 {
        prod *= ONE - aq;
        aq *= q;
        if aq.norm() < 1e-30 {
            break;
        }
    }
    prod
}

/// Dedekind eta in the nome, `q^{1/24} (q; q)_infinity`.
pub fn eta(q: Complex64) -> Complex64 {
    q.powf(1.0 / 24.0) * qpoch(q, q)
}

/// Triple-product form of theta — an independent implementation used as an
/// oracle against the series form.
pub fn theta11_product(z: Complex64, q: Complex64) -> Complex64 {
    I * q.powf(0.125) * z.powf(0.5) * qpoch(q, q) * qpoch(z.inv(), q) * qpoch(q * z, q)
}

/// Logarithmic-derivative kernel `zeta(z) = z theta'(z) / theta(z)`.
pub fn zeta_kernel(z: Complex64, q: Complex64) -> Complex64 {
    let th = theta_suite(z, q, 1);
    z * th[1] / th[0]
}

/// Derivative `zeta'(z)`.
pub fn zeta_kernel_d1(z: Complex64, q: Complex64) -> Complex64 {
    let th = theta_suite(z, q, 2);
    let logd = th[1] / th[0];
    logd + z * (th[2] / th[0] - logd * logd)
}

/// Twisted propagator `sigma_c(z) = theta'(1) theta(e^{-c} z) /
/// (theta(e^{-c}) theta(z))`; unit residue at `z = 1`, multiplier `e^c`
/// under `z -> qz`.
pub fn sigma_kernel(c: Complex64, z: Complex64, q: Complex64) -> Complex64 {
    let ec = (-c).exp();
    let tp1 = theta11_d1(ONE, q);
    tp1 * theta11(ec * z, q) / (theta11(ec, q) * theta11(z, q))
}

/// Two-point twisted kernel `w_c(w, z) = sigma_c(z/w) / w`; simple pole at
/// `z = w` with residue 1.
pub fn w_kernel(c: Complex64, w: Complex64, z: Complex64, q: Complex64) -> Complex64 {
    sigma_kernel(c, z / w, q) / w
}

/// `theta''(1) / (2 theta'(1))`; identically -1/2 (the theta function is odd
/// under inversion), kept as a function so the identity can be asserted.
pub fn theta_c2(q: Complex64) -> Complex64 {
    let th = theta_suite(ONE, q, 2);
    th[2] / (2.0 * th[1])
}

/// `theta'''(1) / (6 theta'(1))`.
pub fn theta_c3(q: Complex64) -> Complex64 {
    let th = theta_suite(ONE, q, 3);
    th[3] / (6.0 * th[1])
}

/// Weierstrass-type expansion coefficient `e1 = 2 c3 - c2^2` of
/// `zeta(u) = 1/(u-1) + (1 + c2) + (c2 + e1)(u - 1) + ...`.
pub fn zeta_e1(q: Complex64) -> Complex64 {
    let c2 = theta_c2(q);
    let c3 = theta_c3(q);
    2.0 * c3 - c2 * c2
}

/// Finite diagonal value of `zeta(u)^2 + u zeta'(u)` as `u -> 1`: the pole
/// parts cancel because `c2 = -1/2`, leaving `3 e1 - 5/4`.
pub fn zeta_sq_diag(q: Complex64) -> Complex64 {
    3.0 * zeta_e1(q) - Complex64::new(1.25, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn close(a: Complex64, b: Complex64, tol: f64) {
        assert_abs_diff_eq!(a.re, b.re, epsilon = tol * (1.0 + b.norm()));
        assert_abs_diff_eq!(a.im, b.im, epsilon = tol * (1.0 + b.norm()));
    }

    fn grid() -> (Vec<Complex64>, Vec<Complex64>) {
        let qs = vec![c(0.1, 0.0), c(0.35, 0.0), c(0.2, 0.1), c(0.02, -0.3)];
        let zs = vec![
            c(0.7, 0.2),
            c(1.3, -0.4),
            c(0.05, 0.9),
            c(2.4, 0.3),
            c(0.4, -0.1),
        ];
        (qs, zs)
    }

    #[test]
    fn series_matches_triple_product() {
        let (qs, zs) = grid();
        for &q in &qs {
            for &z in &zs {
                close(theta11(z, q), theta11_product(z, q), 1e-12);
            }
        }
    }

    #[test]
    fn theta_vanishes_on_lattice_and_is_odd() {
        let (qs, zs) = grid();
        for &q in &qs {
            assert!(theta11(c(1.0, 0.0), q).norm() < 1e-13);
            assert!(theta11(q, q).norm() < 1e-12);
            for &z in &zs {
                close(theta11(z.inv(), q), -theta11(z, q), 1e-12);
            }
        }
    }

    #[test]
    fn quasi_periodicity() {
        let (qs, zs) = grid();
        for &q in &qs {
            for &z in &zs {
                // theta(qz) = -q^{-1/2} z^{-1} theta(z); for the grid points
                // the principal branches of (qz)^{1/2} and q^{1/2} z^{1/2}
                // agree only up to sign, so compare the absolute ratio and
                // the square of the law exactly.
                let lhs = theta11(q * z, q);
                let want = -q.powf(-0.5) * z.inv() * theta11(z, q);
                let ratio = lhs / want;
                close(ratio * ratio, c(1.0, 0.0), 1e-10);
            }
            // on the positive real nome the law holds on the nose
            if q.im == 0.0 && q.re > 0.0 {
                for &z in &zs {
                    let lhs = theta11(q * z, q);
                    let want = -q.powf(-0.5) * z.inv() * theta11(z, q);
                    close(lhs, want, 1e-10);
                }
            }
        }
    }

    #[test]
    fn derivative_at_one_is_eta_cubed() {
        for &q in &[c(0.1, 0.0), c(0.4, 0.0), c(0.15, 0.2)] {
            let e = eta(q);
            close(theta11_d1(c(1.0, 0.0), q), Complex64::i() * e * e * e, 1e-12);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let q = c(0.23, 0.0);
        let z = c(1.17, 0.41);
        let h = 1e-5;
        let suite = theta_suite(z, q, 3);
        for k in 1..=3usize {
            let fd = (theta_suite(z + c(h, 0.0), q, 3)[k - 1]
                - theta_suite(z - c(h, 0.0), q, 3)[k - 1])
                / c(2.0 * h, 0.0);
            close(suite[k], fd, 1e-7);
        }
    }

    #[test]
    fn zeta_is_odd_and_has_unit_residue_structure() {
        let q = c(0.3, 0.0);
        for &z in &[c(1.2, 0.3), c(0.6, -0.2), c(0.9, 0.7)] {
            close(zeta_kernel(z, q) + zeta_kernel(z.inv(), q), c(0.0, 0.0), 1e-11);
        }
        // zeta(u) ~ 1/(u-1) near u = 1
        let u = c(1.0 + 1e-6, 0.0);
        let val = zeta_kernel(u, q);
        assert!((val.re - 1e6).abs() / 1e6 < 1e-3);
    }

    #[test]
    fn zeta_derivative_matches_finite_differences() {
        let q = c(0.27, 0.0);
        let z = c(0.8, 0.35);
        let h = 1e-6;
        let fd = (zeta_kernel(z + c(h, 0.0), q) - zeta_kernel(z - c(h, 0.0), q)) / c(2.0 * h, 0.0);
        close(zeta_kernel_d1(z, q), fd, 1e-6);
    }

    #[test]
    fn sigma_inversion_antisymmetry() {
        // sigma_{-c}(1/x) = -sigma_c(x)
        let q = c(0.22, 0.0);
        let cc = c(0.57, 0.13);
        for &x in &[c(1.4, 0.2), c(0.65, -0.3)] {
            close(sigma_kernel(-cc, x.inv(), q), -sigma_kernel(cc, x, q), 1e-11);
        }
    }

    #[test]
    fn kernel_periodicity() {
        let q = c(0.18, 0.0);
        let cc = c(0.42, 0.0);
        let w = c(1.1, 0.2);
        let z = c(0.8, -0.3);
        // w_c(w, qz) = e^c w_c(w, z)
        close(
            w_kernel(cc, w, q * z, q),
            cc.exp() * w_kernel(cc, w, z, q),
            1e-10,
        );
        // w_c(qw, z) = q^{-1} e^{-c} w_c(w, z)
        close(
            w_kernel(cc, q * w, z, q),
            (-cc).exp() / q * w_kernel(cc, w, z, q),
            1e-10,
        );
        // and w_c(w, z) = sigma_c(z/w)/w by construction
        close(w_kernel(cc, w, z, q), sigma_kernel(cc, z / w, q) / w, 1e-14);
    }

    #[test]
    fn kernel_residue_is_one() {
        // quadrature of w_c(w, z) dz / (2 pi i) around z = w
        let q = c(0.25, 0.0);
        let cc = c(0.7, 0.2);
        let w = c(1.3, 0.4);
        let r = 0.05;
        let n = 4000;
        let mut acc = c(0.0, 0.0);
        for k in 0..n {
            let t = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / n as f64;
            let dz = c(r * t.cos(), r * t.sin());
            let deriv = c(-r * t.sin(), r * t.cos()) * (2.0 * std::f64::consts::PI / n as f64);
            acc += w_kernel(cc, w, w + dz, q) * deriv;
        }
        acc /= c(0.0, 2.0 * std::f64::consts::PI);
        close(acc, c(1.0, 0.0), 1e-8);
    }

    #[test]
    fn inversion_symmetry_pins_second_derivative() {
        for &q in &[c(0.1, 0.0), c(0.45, 0.0), c(0.2, 0.15)] {
            close(theta_c2(q), c(-0.5, 0.0), 1e-11);
        }
    }

    #[test]
    fn diagonal_value_of_zeta_square_kernel() {
        // zeta(u)^2 + u zeta'(u) extends over u = 1 with value 3 e1 - 5/4
        let q = c(0.31, 0.0);
        let want = zeta_sq_diag(q);
        for &eps in &[1e-3, 1e-4] {
            let u = c(1.0 + eps, 0.0);
            let got = zeta_kernel(u, q).powi(2) + u * zeta_kernel_d1(u, q);
            assert!((got - want).norm() < 40.0 * eps, "eps={eps}: {got} vs {want}");
        }
    }

    #[test]
    fn nome_validation() {
        assert!(validate_nome(c(0.5, 0.0)).is_ok());
        assert!(validate_nome(c(1.2, 0.0)).is_err());
    }
}
