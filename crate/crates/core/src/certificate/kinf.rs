use serde::{Deserialize, Serialize};

use super::CertificateError;

/// A sum of power terms `Σ a_k·r^{p_k}` with `a_k > 0`, `p_k ≥ 1`.
///
/// Every non-empty sum is class-K∞. The empty sum is the zero function, which
/// is only accepted where a gain may vanish (the input gains).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct KInfFn {
    terms: Vec<[f64; 2]>,
}

impl KInfFn {
    pub fn new(terms: Vec<[f64; 2]>) -> Result<Self, CertificateError> {
        for &[a, p] in &terms {
            if !(a > 0.0 && a.is_finite()) {
                return Err(CertificateError::KInf(format!("coefficient {a} must be positive and finite")));
            }
            if !(p >= 1.0 && p.is_finite()) {
                return Err(CertificateError::KInf(format!("exponent {p} must be at least 1")));
            }
        }
        Ok(KInfFn { terms })
    }

    /// `a·r^p`.
    pub fn power(a: f64, p: f64) -> Result<Self, CertificateError> {
        Self::new(vec![[a, p]])
    }

    pub fn zero() -> Self {
        KInfFn { terms: Vec::new() }
    }

    pub fn identity() -> Self {
        KInfFn { terms: vec![[1.0, 1.0]] }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[[f64; 2]] {
        &self.terms
    }

    /// `(a, p)` when the function is a single power term.
    pub fn single_term(&self) -> Option<(f64, f64)> {
        match self.terms.as_slice() {
            [[a, p]] => Some((*a, *p)),
            _ => None,
        }
    }

    pub fn eval(&self, r: f64) -> f64 {
        let r = r.max(0.0);
        self.terms.iter().map(|&[a, p]| a * pow(r, p)).sum()
    }

    /// Multiplies every coefficient by `s > 0`.
    pub fn scaled(&self, s: f64) -> Result<Self, CertificateError> {
        Self::new(self.terms.iter().map(|&[a, p]| [a * s, p]).collect())
    }

    /// The `r ≥ 0` with `self(r) = v`; closed form for one term, bisection otherwise.
    pub fn inverse(&self, v: f64) -> Result<f64, CertificateError> {
        if self.is_zero() {
            return Err(CertificateError::KInf("the zero function has no inverse".into()));
        }
        if !(v >= 0.0) {
            return Err(CertificateError::KInf(format!("cannot invert at negative value {v}")));
        }
        if v == 0.0 {
            return Ok(0.0);
        }
        if let Some((a, p)) = self.single_term() {
            return Ok((v / a).powf(1.0 / p));
        }
        let mut hi = 1.0;
        while self.eval(hi) < v {
            hi *= 2.0;
            if !hi.is_finite() {
                return Err(CertificateError::KInf(format!("value {v} out of range")));
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.eval(mid) < v {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(hi)
    }
}

fn pow(r: f64, p: f64) -> f64 {
    if p == p.trunc() && p.abs() < 64.0 {
        r.powi(p as i32)
    } else {
        r.powf(p)
    }
}

impl TryFrom<Vec<[f64; 2]>> for KInfFn {
    type Error = CertificateError;

    fn try_from(terms: Vec<[f64; 2]>) -> Result<Self, Self::Error> {
        KInfFn::new(terms)
    }
}

impl From<KInfFn> for Vec<[f64; 2]> {
    fn from(k: KInfFn) -> Self {
        k.terms
    }
}

impl std::fmt::Display for KInfFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        for (i, [a, p]) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{a}*r^{p}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_inverse() {
        let k = KInfFn::power(1.0, 2.0).unwrap();
        assert!((k.inverse(0.04).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(k.inverse(0.0).unwrap(), 0.0);
    }

    #[test]
    fn sum_inverse_by_bisection() {
        let k = KInfFn::new(vec![[4.0, 1.0], [1.0, 2.0]]).unwrap();
        for r in [0.0, 1e-3, 0.5, 2.0, 37.0] {
            let v = k.eval(r);
            assert!((k.inverse(v).unwrap() - r).abs() <= 1e-12 * (1.0 + r));
        }
    }

    #[test]
    fn rejects_bad_terms() {
        assert!(KInfFn::power(0.0, 2.0).is_err());
        assert!(KInfFn::power(1.0, 0.5).is_err());
        assert!(KInfFn::zero().inverse(1.0).is_err());
        assert_eq!(KInfFn::zero().eval(3.0), 0.0);
    }
}
