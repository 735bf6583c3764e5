//! Symmetric block matrices on clusters: the three norms, shifted-divisor
//! states (x, y, nu), propagators on dyadic scales, and the resonant-case
//! Schur block decomposition with its counterterm solve.

use serde::Serialize;

use crate::arith::{Mat, Scalar};
use crate::error::{Error, Result};
use crate::lattice::{dist_sq, MVec};
use crate::smalldiv::{ChiVariant, FrequencyContext};

/// A symmetric matrix indexed by the members of one cluster.
#[derive(Clone, Debug)]
pub struct ClusterMatrix<S> {
    pub members: Vec<MVec>,
    pub mat: Mat<S>,
}

impl<S: Scalar> ClusterMatrix<S> {
    pub fn zeros(members: Vec<MVec>) -> Self {
        let d = members.len();
        ClusterMatrix {
            members,
            mat: Mat::zeros(d),
        }
    }

    pub fn d(&self) -> usize {
        self.members.len()
    }
}

/// sigma-norm weight exponent rho; the default follows
/// 1/rho = 1 + D (1 + D (D+2)!/2).
pub fn rho_default(d: usize) -> f64 {
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    1.0 / (1.0 + d as f64 * (1.0 + d as f64 * fact(d + 2) / 2.0))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Norms {
    /// max |A(i,j)|
    pub inf: f64,
    /// max |A(i,j)| exp(sigma |m_i - m_j|^rho)
    pub sigma: f64,
    /// sqrt(tr(A^T A)/d)
    pub rms: f64,
}

/// The three norms of a symmetric cluster matrix; errors on asymmetric input.
/// Also asserts the compatibility bracket d^{-1/2} ||A|| <= |A|_inf <= d^{1/2} ||A||.
pub fn matrix_norms<S: Scalar>(a: &ClusterMatrix<S>, sigma: f64, rho: f64) -> Result<Norms> {
    if !a.mat.is_symmetric() {
        return Err(Error::AsymmetricInput);
    }
    let d = a.d();
    let inf = a.mat.max_abs().to_f64();
    let rms = a.mat.rms_sq().to_f64().sqrt();
    let mut sg = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let w = (sigma * (dist_sq(&a.members[i], &a.members[j]) as f64).sqrt().powf(rho)).exp();
            sg = sg.max(a.mat.get(i, j).to_f64().abs() * w);
        }
    }
    let sd = (d as f64).sqrt();
    if inf > 1e-300 && !(rms / sd <= inf * (1.0 + 1e-9) && inf <= sd * rms * (1.0 + 1e-9)) {
        return Err(Error::InvariantViolation(format!(
            "norm bracket failed: rms {rms}, inf {inf}, d {d}"
        )));
    }
    Ok(Norms {
        inf,
        sigma: sg,
        rms,
    })
}

/// Derivative of the inverse w.r.t. one (independent) entry:
/// d A^{-1}(h,l) / d A(i,j) = -A^{-1}(h,i) A^{-1}(j,l).
pub fn dinv_entry(inv: &Mat<f64>, i: usize, j: usize, h: usize, l: usize) -> f64 {
    -inv.get(h, i) * inv.get(j, l)
}

/// Derivative of ||A|| w.r.t. entry (i,j): A(i,j) / (d ||A||).
pub fn dnorm_entry(a: &Mat<f64>, i: usize, j: usize) -> f64 {
    a.get(i, j) / (a.d as f64 * a.rms_sq().sqrt())
}

/// Shifted-divisor state at (n, p): the weighted divisor y, the inverse-norm
/// divisor x and the implicit eigenvalue shift nu with x = |delta + nu / p^{s1}|.
#[derive(Clone, Debug)]
pub struct DivisorState<S> {
    pub n: i64,
    pub p: i64,
    pub delta: S,
    pub y: S,
    pub chibar1_y: S,
    /// x^2, exact in rational mode.
    pub x_sq: S,
    pub x: f64,
    pub nu: f64,
    /// p^{-s} (delta I + p^{-s} chibar1(y) M)^{-1}; the propagator core.
    pub core: Mat<S>,
}

impl<S: Scalar> DivisorState<S> {
    /// |nu| / |M|_inf when M is nonzero; the empirical Lemma-2.4 ratio.
    pub fn nu_ratio(&self, m_inf: f64) -> Option<f64> {
        if m_inf > 0.0 && self.chibar1_y.to_f64() != 0.0 {
            Some(self.nu.abs() / m_inf)
        } else {
            None
        }
    }
}

/// Build the divisor state for cluster (n, p) of dimension d with
/// counterterm matrix `m` (zero matrix if absent).
pub fn divisor_state<S: Scalar>(
    ctx: &FrequencyContext<S>,
    n: i64,
    p: i64,
    d: usize,
    m: Option<&Mat<S>>,
) -> Result<DivisorState<S>> {
    let delta = ctx.delta(n, p);
    let y = ctx.y(n, p);
    let chib1 = ctx.chi(ChiVariant::ChiBar(1), &y);
    let p_s = ctx.p_pow_s(p);
    let mut shifted = Mat::<S>::zeros(d);
    for i in 0..d {
        shifted.set(i, i, delta.clone());
    }
    if !chib1.is_zero() {
        if let Some(mm) = m {
            assert_eq!(mm.d, d, "counterterm dimension mismatch");
            let w = chib1.clone() / p_s.clone();
            shifted = shifted.add(&mm.scale(&w));
        }
    }
    let inv = shifted
        .inverse()
        .map_err(|_| Error::SingularShiftedMatrix { n, p })?;
    // x = ||inv||^{-1}; x^2 = 1 / rms_sq(inv)
    let rms_sq = inv.rms_sq();
    let x_sq = S::one() / rms_sq;
    let x = x_sq.to_f64().sqrt();
    // nu solves x = |delta + nu / p^{s1}|, sign chosen to minimize |nu|
    let p_s1 = ctx.s1.pow_of::<S>(p).to_f64();
    let df = delta.to_f64();
    let nu_plus = (x - df) * p_s1;
    let nu_minus = (-x - df) * p_s1;
    let nu = if nu_plus.abs() <= nu_minus.abs() {
        nu_plus
    } else {
        nu_minus
    };
    let inv_scale = S::one() / p_s;
    let core = inv.scale(&inv_scale);
    Ok(DivisorState {
        n,
        p,
        delta,
        y,
        chibar1_y: chib1,
        x_sq,
        x,
        nu,
        core,
    })
}

/// Propagator G_{n,j,h,i} on scale h of type i (Definition of the multiscale
/// split): zero outside the cutoff windows, otherwise the cutoff-weighted
/// inverse of the shifted divisor matrix.
pub fn propagator<S: Scalar>(
    ctx: &FrequencyContext<S>,
    n: i64,
    p: i64,
    d: usize,
    h: i64,
    i: i8,
    m: Option<&Mat<S>>,
) -> Result<Mat<S>> {
    assert!((-1..=1).contains(&i));
    if i != 1 && h != -1 {
        return Ok(Mat::zeros(d));
    }
    let y = ctx.y(n, p);
    let bar = ctx.chi(ChiVariant::ChiBar(i), &y);
    if bar.is_zero() {
        return Ok(Mat::zeros(d));
    }
    let state = divisor_state(ctx, n, p, d, m)?;
    if i != 1 {
        return Ok(state.core.scale(&bar));
    }
    let chih = ctx.chi_sq(ChiVariant::ChiH(h), &state.x_sq);
    if chih.is_zero() {
        return Ok(Mat::zeros(d));
    }
    Ok(state.core.scale(&(bar * chih)))
}

/// Block decomposition of a symmetric matrix under a block multi-index
/// b in {1,0,-1}^d: permute to (1-block, 0-block, -1-block), factor
/// A = S Atilde S^T with Atilde = diag(A11 - A12 A22^{-1} A12^T, A22, A33).
#[derive(Clone, Debug)]
pub struct BlockDecomposition<S> {
    pub d: usize,
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    /// permuted position -> original index
    pub perm: Vec<usize>,
    /// B = A12 A22^{-1}, n1 x n2 (permuted order, rectangular stored densely)
    pub b_rows: Vec<Vec<S>>,
    /// Schur complement A11 - A12 A22^{-1} A12^T
    pub a11_tilde: Mat<S>,
    pub a22: Mat<S>,
    pub a33_diag: Vec<S>,
    /// S factor in ORIGINAL index order
    pub s_mat: Mat<S>,
    /// Atilde in ORIGINAL index order (conjugated back)
    pub a_tilde: Mat<S>,
}

fn permuted<S: Scalar>(a: &Mat<S>, perm: &[usize]) -> Mat<S> {
    Mat::from_fn(a.d, |i, j| a.get(perm[i], perm[j]).clone())
}

fn unpermuted<S: Scalar>(ap: &Mat<S>, perm: &[usize]) -> Mat<S> {
    let d = ap.d;
    let mut pos = vec![0usize; d];
    for (newi, &oldi) in perm.iter().enumerate() {
        pos[oldi] = newi;
    }
    Mat::from_fn(d, |i, j| ap.get(pos[i], pos[j]).clone())
}

pub fn resonant_block_decompose<S: Scalar>(
    a: &Mat<S>,
    b_idx: &[i8],
) -> Result<BlockDecomposition<S>> {
    let d = a.d;
    assert_eq!(b_idx.len(), d);
    if !a.is_symmetric() {
        return Err(Error::AsymmetricInput);
    }
    let mut perm: Vec<usize> = (0..d).collect();
    perm.sort_by_key(|&i| match b_idx[i] {
        1 => 0,
        0 => 1,
        -1 => 2,
        other => panic!("block index must be -1, 0 or 1, got {other}"),
    });
    let n1 = b_idx.iter().filter(|&&v| v == 1).count();
    let n2 = b_idx.iter().filter(|&&v| v == 0).count();
    let n3 = d - n1 - n2;
    let ap = permuted(a, &perm);
    // admissibility: the -1 block decouples and is diagonal
    for i in 0..d {
        for j in 0..d {
            let off_into_m1 = (i < n1 + n2) != (j < n1 + n2);
            let both_m1 = i >= n1 + n2 && j >= n1 + n2 && i != j;
            if (off_into_m1 || both_m1) && !ap.get(i, j).is_zero() {
                return Err(Error::InvariantViolation(
                    "inadmissible block structure: -1 sector must decouple diagonally".into(),
                ));
            }
        }
    }
    let a11 = Mat::from_fn(n1, |i, j| ap.get(i, j).clone());
    let a12: Vec<Vec<S>> = (0..n1)
        .map(|i| (0..n2).map(|j| ap.get(i, n1 + j).clone()).collect())
        .collect();
    let a22 = Mat::from_fn(n2, |i, j| ap.get(n1 + i, n1 + j).clone());
    let a22_inv = if n2 > 0 {
        a22.inverse().map_err(|_| Error::SingularA22)?
    } else {
        Mat::zeros(0)
    };
    // B = A12 A22^{-1}
    let b_rows: Vec<Vec<S>> = (0..n1)
        .map(|i| {
            (0..n2)
                .map(|j| {
                    let mut acc = S::zero();
                    for k in 0..n2 {
                        acc += a12[i][k].clone() * a22_inv.get(k, j).clone();
                    }
                    acc
                })
                .collect()
        })
        .collect();
    // A11~ = A11 - B A12^T
    let a11_tilde = Mat::from_fn(n1, |i, j| {
        let mut acc = a11.get(i, j).clone();
        for k in 0..n2 {
            acc -= b_rows[i][k].clone() * a12[j][k].clone();
        }
        acc
    });
    let a33_diag: Vec<S> = (0..n3).map(|i| ap.get(n1 + n2 + i, n1 + n2 + i).clone()).collect();
    // S (permuted order) = [[I, B, 0], [0, I, 0], [0, 0, I]]
    let sp = Mat::from_fn(d, |i, j| {
        if i == j {
            S::one()
        } else if i < n1 && (n1..n1 + n2).contains(&j) {
            b_rows[i][j - n1].clone()
        } else {
            S::zero()
        }
    });
    let atp = Mat::from_fn(d, |i, j| {
        if i < n1 && j < n1 {
            a11_tilde.get(i, j).clone()
        } else if (n1..n1 + n2).contains(&i) && (n1..n1 + n2).contains(&j) {
            a22.get(i - n1, j - n1).clone()
        } else if i == j {
            a33_diag[i - n1 - n2].clone()
        } else {
            S::zero()
        }
    });
    let s_mat = unpermuted(&sp, &perm);
    let a_tilde = unpermuted(&atp, &perm);
    // reconstruction identity
    let recon = s_mat.matmul(&a_tilde).matmul(&s_mat.transpose());
    if S::EXACT {
        if recon != *a {
            return Err(Error::InvariantViolation(
                "S Atilde S^T does not reconstruct A".into(),
            ));
        }
    } else {
        let scale = a.max_abs().to_f64().max(1.0);
        if recon.sub(a).max_abs().to_f64() > 1e-9 * scale {
            return Err(Error::InvariantViolation(
                "S Atilde S^T does not reconstruct A (float)".into(),
            ));
        }
    }
    Ok(BlockDecomposition {
        d,
        n1,
        n2,
        n3,
        perm,
        b_rows,
        a11_tilde,
        a22,
        a33_diag,
        s_mat,
        a_tilde,
    })
}

impl<S: Scalar> BlockDecomposition<S> {
    fn sp_inv(&self) -> Mat<S> {
        // [[I, -B, 0], [0, I, 0], [0, 0, I]] in permuted order
        Mat::from_fn(self.d, |i, j| {
            if i == j {
                S::one()
            } else if i < self.n1 && (self.n1..self.n1 + self.n2).contains(&j) {
                -self.b_rows[i][j - self.n1].clone()
            } else {
                S::zero()
            }
        })
    }

    /// Bare propagator piece for type i: p^{-s} S^{-T} diag-part S^{-1},
    /// in the ORIGINAL index order (no cutoff factors applied).
    pub fn bare_propagator(&self, i: i8, p_pow_s: &S) -> Result<Mat<S>> {
        let (n1, n2) = (self.n1, self.n2);
        let mid = match i {
            1 => {
                let inv = self
                    .a11_tilde
                    .inverse()
                    .map_err(|_| Error::SingularSchurBlock)?;
                Mat::from_fn(self.d, |a, b| {
                    if a < n1 && b < n1 {
                        inv.get(a, b).clone()
                    } else {
                        S::zero()
                    }
                })
            }
            0 => {
                let inv = if n2 > 0 {
                    self.a22.inverse().map_err(|_| Error::SingularA22)?
                } else {
                    Mat::zeros(0)
                };
                Mat::from_fn(self.d, |a, b| {
                    if (n1..n1 + n2).contains(&a) && (n1..n1 + n2).contains(&b) {
                        inv.get(a - n1, b - n1).clone()
                    } else {
                        S::zero()
                    }
                })
            }
            -1 => Mat::from_fn(self.d, |a, b| {
                if a == b && a >= n1 + n2 {
                    if self.a33_diag[a - n1 - n2].is_zero() {
                        S::zero() // caller must have checked invertibility
                    } else {
                        S::one() / self.a33_diag[a - n1 - n2].clone()
                    }
                } else {
                    S::zero()
                }
            }),
            _ => panic!("propagator type must be -1, 0 or 1"),
        };
        let spi = self.sp_inv();
        let gp = spi.transpose().matmul(&mid).matmul(&spi);
        let g = unpermuted(&gp, &self.perm);
        let w = S::one() / p_pow_s.clone();
        Ok(g.scale(&w))
    }

    /// Counterterm solving the cancellation condition
    /// G_{j,b,1,h} (L + T) G~_{j,b,1} = 0 with support only on the 1-block:
    /// in permuted coordinates L11 = -(T11 - B T12^T - T12 B^T + B T22 B^T).
    pub fn counterterm_from(&self, t: &Mat<S>) -> Result<Mat<S>> {
        if !t.is_symmetric() {
            return Err(Error::AsymmetricInput);
        }
        let tp = permuted(t, &self.perm);
        let (n1, n2) = (self.n1, self.n2);
        let mut l11 = Mat::<S>::zeros(n1);
        for i in 0..n1 {
            for j in 0..n1 {
                let mut acc = tp.get(i, j).clone();
                for k in 0..n2 {
                    // - B T12^T - T12 B^T
                    acc -= self.b_rows[i][k].clone() * tp.get(j, n1 + k).clone();
                    acc -= tp.get(i, n1 + k).clone() * self.b_rows[j][k].clone();
                }
                for k in 0..n2 {
                    for l in 0..n2 {
                        acc += self.b_rows[i][k].clone()
                            * tp.get(n1 + k, n1 + l).clone()
                            * self.b_rows[j][l].clone();
                    }
                }
                l11.set(i, j, -acc);
            }
        }
        let lp = Mat::from_fn(self.d, |i, j| {
            if i < n1 && j < n1 {
                l11.get(i, j).clone()
            } else {
                S::zero()
            }
        });
        Ok(unpermuted(&lp, &self.perm))
    }

    /// Residual of the cancellation equation for X = L + T:
    /// X11 - (B X12^T + X12 B^T) + B X22 B^T, in permuted coordinates.
    pub fn cancellation_residual(&self, x: &Mat<S>) -> Mat<S> {
        let xp = permuted(x, &self.perm);
        let (n1, n2) = (self.n1, self.n2);
        Mat::from_fn(n1, |i, j| {
            let mut acc = xp.get(i, j).clone();
            for k in 0..n2 {
                acc -= self.b_rows[i][k].clone() * xp.get(j, n1 + k).clone();
                acc -= xp.get(i, n1 + k).clone() * self.b_rows[j][k].clone();
            }
            for k in 0..n2 {
                for l in 0..n2 {
                    acc += self.b_rows[i][k].clone()
                        * xp.get(n1 + k, n1 + l).clone()
                        * self.b_rows[j][l].clone();
                }
            }
            acc
        })
    }
}
