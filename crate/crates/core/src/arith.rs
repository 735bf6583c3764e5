//! Scalar abstraction (f64 vs exact rational) and small dense matrices.
//!
//! Every quantity that enters a propagator, a tree value or a counterterm
//! is computed through [`Scalar`], so the whole order-by-order pipeline can
//! run either in floating point or in exact rational arithmetic. Norms that
//! involve square roots or exponentials are reported as `f64` in both modes.

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, Zero};
use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

pub trait Scalar:
    Clone
    + PartialEq
    + PartialOrd
    + Debug
    + Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
{
    /// True when arithmetic is exact (no rounding).
    const EXACT: bool;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_i64(v: i64) -> Self;
    fn ratio(num: i64, den: i64) -> Self;
    fn to_f64(&self) -> f64;
    fn abs(&self) -> Self;
    fn is_zero(&self) -> bool;
    /// Integer power, negative exponents allowed (error on 0^-k).
    fn powi(&self, e: i64) -> Self;
}

impl Scalar for f64 {
    const EXACT: bool = false;

    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_i64(v: i64) -> Self {
        v as f64
    }
    fn ratio(num: i64, den: i64) -> Self {
        num as f64 / den as f64
    }
    fn to_f64(&self) -> f64 {
        *self
    }
    fn abs(&self) -> Self {
        f64::abs(*self)
    }
    fn is_zero(&self) -> bool {
        *self == 0.0
    }
    fn powi(&self, e: i64) -> Self {
        f64::powi(*self, e as i32)
    }
}

impl Scalar for BigRational {
    const EXACT: bool = true;

    fn zero() -> Self {
        <BigRational as Zero>::zero()
    }
    fn one() -> Self {
        <BigRational as One>::one()
    }
    fn from_i64(v: i64) -> Self {
        BigRational::from_integer(BigInt::from(v))
    }
    fn ratio(num: i64, den: i64) -> Self {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
    fn to_f64(&self) -> f64 {
        num::ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
    fn abs(&self) -> Self {
        Signed::abs(self)
    }
    fn is_zero(&self) -> bool {
        Zero::is_zero(self)
    }
    fn powi(&self, e: i64) -> Self {
        if e >= 0 {
            num::pow::pow(self.clone(), e as usize)
        } else {
            num::pow::pow(self.clone(), (-e) as usize).recip()
        }
    }
}

/// `base^e` for an integer base, in scalar type `S`.
pub fn int_pow<S: Scalar>(base: i64, e: i64) -> S {
    S::from_i64(base).powi(e)
}

/// Dense symmetric-friendly square matrix over a scalar.
///
/// Storage is plain row-major; symmetry is a property of the data, checked
/// where the contracts require it, not enforced by the type.
#[derive(Clone, PartialEq)]
pub struct Mat<S> {
    pub d: usize,
    pub a: Vec<S>,
}

impl<S: Debug> Debug for Mat<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Mat({}x{})", self.d, self.d)?;
        for i in 0..self.d {
            for j in 0..self.d {
                write!(f, " {:?}", &self.a[i * self.d + j])?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(d: usize) -> Self {
        Mat {
            d,
            a: vec![S::zero(); d * d],
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut m = Self::zeros(d);
        for i in 0..d {
            m.set(i, i, S::one());
        }
        m
    }

    pub fn from_fn(d: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut m = Self::zeros(d);
        for i in 0..d {
            for j in 0..d {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &S {
        &self.a[i * self.d + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.a[i * self.d + j] = v;
    }

    pub fn is_symmetric(&self) -> bool {
        for i in 0..self.d {
            for j in (i + 1)..self.d {
                if self.get(i, j) != self.get(j, i) {
                    return false;
                }
            }
        }
        true
    }

    pub fn transpose(&self) -> Self {
        Mat::from_fn(self.d, |i, j| self.get(j, i).clone())
    }

    pub fn scale(&self, c: &S) -> Self {
        Mat {
            d: self.d,
            a: self.a.iter().map(|v| v.clone() * c.clone()).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.d, other.d);
        Mat {
            d: self.d,
            a: self
                .a
                .iter()
                .zip(&other.a)
                .map(|(x, y)| x.clone() + y.clone())
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.d, other.d);
        Mat {
            d: self.d,
            a: self
                .a
                .iter()
                .zip(&other.a)
                .map(|(x, y)| x.clone() - y.clone())
                .collect(),
        }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.d, other.d);
        let d = self.d;
        Mat::from_fn(d, |i, j| {
            let mut acc = S::zero();
            for k in 0..d {
                acc += self.get(i, k).clone() * other.get(k, j).clone();
            }
            acc
        })
    }

    pub fn matvec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(self.d, v.len());
        (0..self.d)
            .map(|i| {
                let mut acc = S::zero();
                for k in 0..self.d {
                    acc += self.get(i, k).clone() * v[k].clone();
                }
                acc
            })
            .collect()
    }

    pub fn add_diag(&self, c: &S) -> Self {
        let mut m = self.clone();
        for i in 0..self.d {
            let v = m.get(i, i).clone() + c.clone();
            m.set(i, i, v);
        }
        m
    }

    pub fn max_abs(&self) -> S {
        let mut best = S::zero();
        for v in &self.a {
            let a = v.abs();
            if a > best {
                best = a;
            }
        }
        best
    }

    /// `||A||^2 = tr(A^T A) / d`, the normalized Frobenius square.
    pub fn rms_sq(&self) -> S {
        let mut acc = S::zero();
        for v in &self.a {
            acc += v.clone() * v.clone();
        }
        acc / S::from_i64(self.d as i64)
    }

    /// Gauss-Jordan inverse with partial pivoting. Exact in rational mode.
    pub fn inverse(&self) -> Result<Self> {
        let d = self.d;
        let mut a = self.clone();
        let mut inv: Mat<S> = Mat::identity(d);
        for col in 0..d {
            // pick pivot: largest |entry| (f64) / first nonzero (exact)
            let mut piv = None;
            let mut best = S::zero();
            for r in col..d {
                let v = a.get(r, col).abs();
                if !v.is_zero() && (piv.is_none() || (!S::EXACT && v > best)) {
                    piv = Some(r);
                    best = v;
                    if S::EXACT {
                        break;
                    }
                }
            }
            let piv = piv.ok_or(Error::SingularMatrix)?;
            if !S::EXACT && best.to_f64() < 1e-300 {
                return Err(Error::SingularMatrix);
            }
            if piv != col {
                for j in 0..d {
                    a.a.swap(piv * d + j, col * d + j);
                    inv.a.swap(piv * d + j, col * d + j);
                }
            }
            let p = a.get(col, col).clone();
            for j in 0..d {
                let v = a.get(col, j).clone() / p.clone();
                a.set(col, j, v);
                let w = inv.get(col, j).clone() / p.clone();
                inv.set(col, j, w);
            }
            for r in 0..d {
                if r == col {
                    continue;
                }
                let f = a.get(r, col).clone();
                if f.is_zero() {
                    continue;
                }
                for j in 0..d {
                    let v = a.get(r, j).clone() - f.clone() * a.get(col, j).clone();
                    a.set(r, j, v);
                    let w = inv.get(r, j).clone() - f.clone() * inv.get(col, j).clone();
                    inv.set(r, j, w);
                }
            }
        }
        Ok(inv)
    }

    pub fn solve(&self, rhs: &[S]) -> Result<Vec<S>> {
        Ok(self.inverse()?.matvec(rhs))
    }

    pub fn det(&self) -> S {
        let d = self.d;
        let mut a = self.clone();
        let mut det = S::one();
        for col in 0..d {
            let mut piv = None;
            let mut best = S::zero();
            for r in col..d {
                let v = a.get(r, col).abs();
                if !v.is_zero() && (piv.is_none() || (!S::EXACT && v > best)) {
                    piv = Some(r);
                    best = v;
                    if S::EXACT {
                        break;
                    }
                }
            }
            let piv = match piv {
                Some(p) => p,
                None => return S::zero(),
            };
            if piv != col {
                for j in 0..d {
                    a.a.swap(piv * d + j, col * d + j);
                }
                det = -det;
            }
            let p = a.get(col, col).clone();
            det = det * p.clone();
            for r in (col + 1)..d {
                let f = a.get(r, col).clone() / p.clone();
                if f.is_zero() {
                    continue;
                }
                for j in col..d {
                    let v = a.get(r, j).clone() - f.clone() * a.get(col, j).clone();
                    a.set(r, j, v);
                }
            }
        }
        det
    }

    pub fn to_f64_mat(&self) -> Mat<f64> {
        Mat {
            d: self.d,
            a: self.a.iter().map(|v| v.to_f64()).collect(),
        }
    }
}

impl Mat<f64> {
    /// Eigenvalues of a symmetric matrix, ascending.
    pub fn sym_eigenvalues(&self) -> Vec<f64> {
        let m = nalgebra::DMatrix::from_fn(self.d, self.d, |i, j| *self.get(i, j));
        let mut ev: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ev
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num::rational::BigRational;

    #[test]
    fn rational_inverse_exact() {
        let m = Mat::<BigRational>::from_fn(3, |i, j| {
            BigRational::ratio(1 + (i * 3 + j) as i64 % 5, 1 + ((i + 2 * j) % 3) as i64)
        });
        // make it nonsingular by adding a diagonal
        let m = m.add_diag(&BigRational::from_i64(7));
        let inv = m.inverse().unwrap();
        let prod = m.matmul(&inv);
        assert_eq!(prod, Mat::identity(3));
    }

    #[test]
    fn float_inverse_close() {
        let m = Mat::<f64>::from_fn(4, |i, j| if i == j { 3.0 } else { 1.0 / (1 + i + j) as f64 });
        let inv = m.inverse().unwrap();
        let prod = m.matmul(&inv);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn det_matches_product_of_pivots() {
        let m = Mat::<BigRational>::from_fn(2, |i, j| BigRational::from_i64((i + 2 * j + 1) as i64));
        // [[1,3],[2,4]] det = -2
        assert_eq!(m.det(), BigRational::from_i64(-2));
    }

    #[test]
    fn singular_detected() {
        let m = Mat::<BigRational>::from_fn(2, |_, _| BigRational::from_i64(1));
        assert!(m.inverse().is_err());
    }

    #[test]
    fn sym_eigen_sane() {
        let m = Mat::<f64>::from_fn(2, |i, j| if i == j { 2.0 } else { 1.0 });
        let ev = m.sym_eigenvalues();
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }
}
