//! Frequencies, small divisors, smooth cutoff partitions of unity and
//! Diophantine condition checkers.
//!
//! The divisor attached to a time-space mode is `delta = -omega*n + p + mu`
//! with `omega = D + mu - eps` (`mu = 0` and `omega = D - eps` in the
//! resonant mode). Cutoff functions come in one base profile `chi`, its
//! dyadic family `chi_h`, the coarse split `chibar_{-1,0,1}` and the tail
//! sums `C_h`. All evaluations go through the squared argument so that the
//! piecewise-linear profile stays inside rational arithmetic.

use serde::{Deserialize, Serialize};

use crate::arith::{int_pow, Scalar};
use crate::error::{Error, Result};

/// Exponent that is an integer in exact mode, arbitrary in float mode.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Expo {
    Int(i64),
    Real(f64),
}

impl Expo {
    pub fn as_f64(self) -> f64 {
        match self {
            Expo::Int(e) => e as f64,
            Expo::Real(e) => e,
        }
    }

    pub fn is_int(self) -> bool {
        matches!(self, Expo::Int(_))
    }

    /// `p^self` as a scalar; integer exponents use exact powers.
    pub fn pow_of<S: Scalar>(self, p: i64) -> S {
        match self {
            Expo::Int(e) => int_pow(p, e),
            Expo::Real(e) => {
                assert!(
                    !S::EXACT,
                    "real exponent {e} requested in exact arithmetic; \
                     use integer s and s2 (e.g. s=1, alpha=1/2) in rational mode"
                );
                f64_to_scalar::<S>((p as f64).powf(e))
            }
        }
    }
}

/// Exact dyadic conversion of a finite f64 into any scalar.
pub fn scalar_of_f64<S: Scalar>(v: f64) -> S {
    f64_to_scalar(v)
}

fn f64_to_scalar<S: Scalar>(v: f64) -> S {
    // encode v exactly as mant * 2^(e-53)
    let (m, e) = frexp(v);
    let mant = (m * 2f64.powi(53)) as i64;
    S::ratio(mant, 1) * S::ratio(2, 1).powi((e - 53) as i64)
}

fn frexp(v: f64) -> (f64, i32) {
    if v == 0.0 || !v.is_finite() {
        return (v, 0);
    }
    let bits = v.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    if exp == 0 {
        let (m, e) = frexp(v * 2f64.powi(64));
        (m, e - 64)
    } else {
        let mant = f64::from_bits((bits & !(0x7ffu64 << 52)) | (1022u64 << 52));
        (mant, exp - 1022)
    }
}

/// Named cutoff profile.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffProfile {
    /// C-infinity transition built from exp(1 - 1/u) factors.
    SmoothExp,
    /// Piecewise-linear profile in the squared argument; rational-exact.
    PiecewiseLinear,
}

/// Cutoff family parameters: profile plus the resonant-mode rescale
/// (`chi_h(32 x)` instead of `chi_h(x)` when `rescale_log2 = 5`).
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub profile: CutoffProfile,
    pub rescale_log2: u32,
}

impl CutoffSpec {
    pub fn plain(profile: CutoffProfile) -> Self {
        CutoffSpec {
            profile,
            rescale_log2: 0,
        }
    }
}

/// Base bump on the squared argument: 1 on |x|<=gamma, 0 on |x|>=2 gamma,
/// non-increasing in |x|, |chi'| <= C/gamma.
fn chi_base_sq<S: Scalar>(profile: CutoffProfile, gamma: &S, x_sq: &S) -> S {
    let gsq = gamma.clone() * gamma.clone();
    let four_gsq = gsq.clone() * S::from_i64(4);
    if *x_sq <= gsq {
        return S::one();
    }
    if *x_sq >= four_gsq {
        return S::zero();
    }
    match profile {
        CutoffProfile::PiecewiseLinear => {
            (four_gsq - x_sq.clone()) / (gsq * S::from_i64(3))
        }
        CutoffProfile::SmoothExp => {
            assert!(!S::EXACT, "smooth profile is float-only; use piecewise_linear in rational mode");
            let x = x_sq.to_f64().sqrt();
            let g = gamma.to_f64();
            let t = (x - g) / g; // in (0,1)
            let h = |u: f64| if u <= 0.0 { 0.0 } else { (1.0 - 1.0 / u).exp() };
            f64_to_scalar::<S>(h(1.0 - t) / (h(1.0 - t) + h(t)))
        }
    }
}

/// Which member of the cutoff family to evaluate.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ChiVariant {
    /// Base bump `chi`.
    Chi,
    /// Dyadic `chi_h`, `h >= -1`.
    ChiH(i64),
    /// Coarse `chibar_i`, `i` in {-1,0,1}.
    ChiBar(i8),
    /// Tail sum `C_h = sum_{h1 >= h+2} chi_{h1}`, equal to `chi(2^{h+2} x)`.
    CH(i64),
}

/// Evaluate a cutoff family member at `x` (not squared).
pub fn chi_family<S: Scalar>(spec: CutoffSpec, gamma: &S, variant: ChiVariant, x: &S) -> S {
    let x_sq = x.clone() * x.clone();
    chi_family_sq(spec, gamma, variant, &x_sq)
}

/// Same as [`chi_family`] on the squared argument (exact-mode entry point).
pub fn chi_family_sq<S: Scalar>(spec: CutoffSpec, gamma: &S, variant: ChiVariant, x_sq: &S) -> S {
    let base = |scale_log4: u32, xs: &S| -> S {
        let scaled = xs.clone() * int_pow::<S>(4, scale_log4 as i64);
        chi_base_sq(spec.profile, gamma, &scaled)
    };
    match variant {
        ChiVariant::Chi => base(0, x_sq),
        ChiVariant::ChiH(h) => {
            // resonant rescale applies to the dyadic family only
            let r = spec.rescale_log2;
            if h == -1 {
                S::one() - base(r, x_sq)
            } else {
                assert!(h >= 0);
                base(r + h as u32, x_sq) - base(r + h as u32 + 1, x_sq)
            }
        }
        ChiVariant::ChiBar(i) => match i {
            1 => base(3, x_sq),                       // chi(8x)
            0 => base(2, x_sq) - base(3, x_sq),       // chi(4x) - chi(8x)
            -1 => S::one() - base(2, x_sq),           // 1 - chi(4x)
            _ => panic!("chibar index must be -1, 0 or 1"),
        },
        ChiVariant::CH(h) => {
            assert!(h >= -1);
            base(spec.rescale_log2 + (h + 2) as u32, x_sq)
        }
    }
}

/// Scales `h` with `chi_h(x) != 0`, given the squared argument.
/// At most two values; empty when x = 0.
pub fn nonzero_scales<S: Scalar>(spec: CutoffSpec, gamma: &S, x_sq: &S) -> Vec<i64> {
    let mut out = Vec::with_capacity(2);
    let gsq = gamma.clone() * gamma.clone();
    let four_gsq = gsq.clone() * S::from_i64(4);
    let mut scaled = x_sq.clone() * int_pow::<S>(4, spec.rescale_log2 as i64);
    if scaled > gsq {
        out.push(-1);
    }
    if scaled.is_zero() {
        return out;
    }
    // chi_h != 0 (h >= 0) iff 4^h X < 4 g^2 and 4^{h+1} X > g^2
    for h in 0..=MAX_SCALE {
        if scaled >= four_gsq {
            break;
        }
        let next = scaled.clone() * S::from_i64(4);
        if next > gsq {
            out.push(h);
        }
        scaled = next;
    }
    out
}

pub const MAX_SCALE: i64 = 200;

/// Frequency and exponent bookkeeping shared by the whole pipeline.
#[derive(Clone, Debug)]
pub struct FrequencyContext<S> {
    pub d: usize,
    pub mu: S,
    pub eps: S,
    pub eps0: S,
    pub gamma: S,
    pub gamma0: S,
    pub tau0: i64,
    pub tau1: i64,
    pub tau: i64,
    /// Smoothing exponent of the nonlocal operator.
    pub s: Expo,
    /// s1 = s - 2 alpha.
    pub s1: Expo,
    /// s2 = s1 / 4; weights y = p^{s2} delta.
    pub s2: Expo,
    /// Cluster exponent; geometry only.
    pub alpha: f64,
    pub resonant: bool,
    pub cutoff: CutoffSpec,
}

impl<S: Scalar> FrequencyContext<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d: usize,
        s: Expo,
        mu: S,
        eps: S,
        eps0: S,
        gamma: S,
        gamma0: S,
        tau0: i64,
        tau1: i64,
        tau: i64,
        alpha: f64,
        resonant: bool,
        profile: CutoffProfile,
    ) -> Result<Self> {
        if d < 2 {
            return Err(Error::BadConfig("D must be >= 2".into()));
        }
        if tau1 <= tau0 + 1 {
            return Err(Error::BadConfig("tau1 must exceed tau0 + 1".into()));
        }
        if tau <= tau0 + 1 + d as i64 {
            return Err(Error::BadConfig("tau must exceed tau0 + 1 + D".into()));
        }
        let two_gamma = gamma.clone() + gamma.clone();
        if two_gamma > gamma0 {
            return Err(Error::BadConfig("gamma must be <= gamma0 / 2".into()));
        }
        if eps <= S::zero() || eps > eps0 {
            return Err(Error::BadConfig("eps must lie in (0, eps0]".into()));
        }
        if resonant && !mu.is_zero() {
            return Err(Error::BadConfig("resonant mode requires mu = 0".into()));
        }
        let (s1, s2) = if resonant {
            // the resonant scheme identifies y with delta
            (Expo::Int(0), Expo::Int(0))
        } else {
            match s {
                Expo::Int(si) => {
                    let s1f = si as f64 - 2.0 * alpha;
                    if S::EXACT {
                        let s1i = s1f.round() as i64;
                        if (s1f - s1i as f64).abs() > 1e-12 || s1i < 0 || s1i % 4 != 0 {
                            return Err(Error::BadConfig(
                                "rational mode needs s - 2 alpha a nonnegative multiple of 4 \
                                 (e.g. s=1, alpha=1/2)"
                                    .into(),
                            ));
                        }
                        (Expo::Int(s1i), Expo::Int(s1i / 4))
                    } else {
                        (Expo::Real(s1f), Expo::Real(s1f / 4.0))
                    }
                }
                Expo::Real(sf) => {
                    if S::EXACT {
                        return Err(Error::BadConfig(
                            "rational mode needs an integer smoothing exponent s".into(),
                        ));
                    }
                    let s1f = sf - 2.0 * alpha;
                    (Expo::Real(s1f), Expo::Real(s1f / 4.0))
                }
            }
        };
        if s2.as_f64() >= s.as_f64() && s.as_f64() > 0.0 {
            return Err(Error::BadConfig("s2 must stay below s".into()));
        }
        if S::EXACT && !s.is_int() {
            return Err(Error::BadConfig("rational mode needs integer s".into()));
        }
        if S::EXACT && profile == CutoffProfile::SmoothExp {
            return Err(Error::BadConfig(
                "rational mode needs the piecewise_linear cutoff profile".into(),
            ));
        }
        let cutoff = CutoffSpec {
            profile,
            rescale_log2: if resonant { 5 } else { 0 },
        };
        Ok(FrequencyContext {
            d,
            mu,
            eps,
            eps0,
            gamma,
            gamma0,
            tau0,
            tau1,
            tau,
            s,
            s1,
            s2,
            alpha,
            resonant,
            cutoff,
        })
    }

    /// omega = D + mu - eps (mu = 0 in the resonant case).
    pub fn omega(&self) -> S {
        S::from_i64(self.d as i64) + self.mu.clone() - self.eps.clone()
    }

    /// delta_{n,p} = -omega n + p + mu, the linear eigenvalue divided by |m|^{2s}.
    pub fn delta(&self, n: i64, p: i64) -> S {
        -self.omega() * S::from_i64(n) + S::from_i64(p) + self.mu.clone()
    }

    /// y_{n,p} = p^{s2} delta_{n,p}.
    pub fn y(&self, n: i64, p: i64) -> S {
        self.s2.pow_of::<S>(p) * self.delta(n, p)
    }

    pub fn p_pow_s(&self, p: i64) -> S {
        self.s.pow_of::<S>(p)
    }

    pub fn chi(&self, variant: ChiVariant, x: &S) -> S {
        chi_family(self.cutoff, &self.gamma, variant, x)
    }

    pub fn chi_sq(&self, variant: ChiVariant, x_sq: &S) -> S {
        chi_family_sq(self.cutoff, &self.gamma, variant, x_sq)
    }

    /// chibar_1(y_{n,p}); the weight in front of the counterterm.
    pub fn chibar1_y(&self, n: i64, p: i64) -> S {
        let y = self.y(n, p);
        self.chi(ChiVariant::ChiBar(1), &y)
    }

    /// Membership in the near-resonant index set Omega:
    /// -1/2 + (D + mu - eps0) n < p < (D + mu) n + 1/2 and (n,p) != (1,D).
    pub fn omega_membership(&self, n: i64, p: i64) -> bool {
        if n == 1 && p == self.d as i64 {
            return false;
        }
        let dmu = S::from_i64(self.d as i64) + self.mu.clone();
        let half = S::ratio(1, 2);
        let lower = (dmu.clone() - self.eps0.clone()) * S::from_i64(n) - half.clone();
        let upper = dmu * S::from_i64(n) + half;
        let pv = S::from_i64(p);
        pv > lower && pv < upper
    }
}

/// Outcome of a Diophantine scan with the first violation, if any.
#[derive(Clone, Debug, Serialize)]
pub struct DioCheck {
    pub ok: bool,
    pub witness: Option<DioWitness>,
    /// Smallest margin |value| * n^tau - gamma seen across the scan (f64).
    pub min_margin: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DioWitness {
    pub n: i64,
    pub p: i64,
    pub a: i64,
    pub value: f64,
}

/// Strong non-resonance of mu, Eq.-(2.1)-style scan:
/// |(D+mu) n - p - a mu| >= gamma0 / |n|^{tau0} for a in {0,1},
/// 0 < |n| <= n_max, all integer p, excluding (n,p) = (1,D).
pub fn check_mu_nonresonant<S: Scalar>(
    mu: &S,
    gamma0: &S,
    tau0: i64,
    n_max: i64,
    d: usize,
) -> DioCheck {
    let mut min_margin = f64::INFINITY;
    for n_abs in 1..=n_max {
        for n in [n_abs, -n_abs] {
            for a in 0..=1i64 {
                let target = (S::from_i64(d as i64) + mu.clone()) * S::from_i64(n)
                    - mu.clone() * S::from_i64(a);
                let p0 = target.to_f64().round() as i64;
                for p in [p0 - 1, p0, p0 + 1] {
                    if n == 1 && p == d as i64 {
                        continue;
                    }
                    let value = (target.clone() - S::from_i64(p)).abs();
                    let lhs = value.clone() * int_pow::<S>(n.abs(), tau0);
                    let margin = lhs.to_f64() - gamma0.to_f64();
                    if margin < min_margin {
                        min_margin = margin;
                    }
                    if lhs < *gamma0 {
                        return DioCheck {
                            ok: false,
                            witness: Some(DioWitness {
                                n,
                                p,
                                a,
                                value: value.to_f64(),
                            }),
                            min_margin: margin,
                        };
                    }
                }
            }
        }
    }
    DioCheck {
        ok: true,
        witness: None,
        min_margin,
    }
}

/// First Melnikov conditions: |omega n - p| >= gamma / n^{tau1}
/// for 1 <= n <= n_max and natural p.
pub fn check_melnikov_first<S: Scalar>(ctx: &FrequencyContext<S>, n_max: i64) -> DioCheck {
    let omega = ctx.omega();
    let mut min_margin = f64::INFINITY;
    for n in 1..=n_max {
        let target = omega.clone() * S::from_i64(n);
        let p0 = target.to_f64().round() as i64;
        for p in [p0 - 1, p0, p0 + 1] {
            if p < 0 {
                continue;
            }
            let value = (target.clone() - S::from_i64(p)).abs();
            let lhs = value.clone() * int_pow::<S>(n, ctx.tau1);
            let margin = lhs.to_f64() - ctx.gamma.to_f64();
            if margin < min_margin {
                min_margin = margin;
            }
            if lhs < ctx.gamma {
                return DioCheck {
                    ok: false,
                    witness: Some(DioWitness {
                        n,
                        p,
                        a: 0,
                        value: value.to_f64(),
                    }),
                    min_margin: margin,
                };
            }
        }
    }
    DioCheck {
        ok: true,
        witness: None,
        min_margin,
    }
}

/// Second Melnikov conditions over the supplied shifted divisors:
/// x_{n,j} >= gamma / n^tau for all admitted (n,j), where
/// `x_sq_of(n, p, cluster_index)` returns the squared shifted divisor.
/// Entries outside Omega are skipped.
pub fn check_melnikov_second<S: Scalar>(
    ctx: &FrequencyContext<S>,
    admitted: &[(i64, i64, usize)],
    mut x_sq_of: impl FnMut(i64, i64, usize) -> Result<S>,
) -> Result<DioCheck> {
    let mut min_margin = f64::INFINITY;
    for &(n, p, jidx) in admitted {
        if !ctx.omega_membership(n, p) {
            continue;
        }
        let x_sq = x_sq_of(n, p, jidx)?;
        // compare x^2 * n^{2 tau} >= gamma^2
        let lhs = x_sq.clone() * int_pow::<S>(n.abs(), 2 * ctx.tau);
        let gsq = ctx.gamma.clone() * ctx.gamma.clone();
        let margin = lhs.to_f64().sqrt() - ctx.gamma.to_f64();
        if margin < min_margin {
            min_margin = margin;
        }
        if lhs < gsq {
            return Ok(DioCheck {
                ok: false,
                witness: Some(DioWitness {
                    n,
                    p,
                    a: jidx as i64,
                    value: x_sq.to_f64().sqrt(),
                }),
                min_margin: margin,
            });
        }
    }
    Ok(DioCheck {
        ok: true,
        witness: None,
        min_margin,
    })
}

/// One grid point of a measure sweep.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub eps: f64,
    pub pass: bool,
    pub margin: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepResult {
    pub eps0: f64,
    pub grid_size: usize,
    pub fraction: f64,
    pub rows: Vec<SweepRow>,
    /// Maximal excluded sub-intervals of (0, eps0), merged.
    pub excluded: Vec<(f64, f64)>,
}

/// Sweep a predicate over a uniform grid in (0, eps0).
pub fn measure_sweep(
    eps0: f64,
    grid_size: usize,
    mut predicate: impl FnMut(f64) -> (bool, f64),
) -> SweepResult {
    assert!(grid_size >= 2, "grid too small for a sweep");
    let mut rows = Vec::with_capacity(grid_size);
    let mut pass_count = 0usize;
    for i in 1..=grid_size {
        let eps = eps0 * i as f64 / (grid_size as f64 + 1.0);
        let (pass, margin) = predicate(eps);
        if pass {
            pass_count += 1;
        }
        rows.push(SweepRow { eps, pass, margin });
    }
    let step = eps0 / (grid_size as f64 + 1.0);
    let mut excluded = Vec::new();
    let mut run: Option<(f64, f64)> = None;
    for row in &rows {
        if !row.pass {
            run = match run {
                None => Some((row.eps - step / 2.0, row.eps + step / 2.0)),
                Some((lo, _)) => Some((lo, row.eps + step / 2.0)),
            };
        } else if let Some(r) = run.take() {
            excluded.push(r);
        }
    }
    if let Some(r) = run {
        excluded.push(r);
    }
    SweepResult {
        eps0,
        grid_size,
        fraction: pass_count as f64 / grid_size as f64,
        rows,
        excluded,
    }
}

/// Pairs (n, p) whose weighted divisor is small, for the separation check.
pub fn small_weighted_divisors<S: Scalar>(
    ctx: &FrequencyContext<S>,
    s0: f64,
    n_max: i64,
    p_max: i64,
) -> Vec<(i64, i64, f64)> {
    let mut out = Vec::new();
    let half_gamma = ctx.gamma.to_f64() / 2.0;
    for n in 1..=n_max {
        for p in 1..=p_max {
            let dv = ctx.delta(n, p).to_f64().abs();
            let weighted = (p as f64).powf(s0) * dv;
            if weighted <= half_gamma {
                out.push((n, p, dv));
            }
        }
    }
    out
}

/// Separation property of simultaneously small weighted divisors: for any
/// two distinct small pairs with p >= p1, |n - n1| >= p1^{s0/tau1}.
/// Returns the violating pair, if any.
pub fn lemma_separation_violations<S: Scalar>(
    ctx: &FrequencyContext<S>,
    s0: f64,
    n_max: i64,
    p_max: i64,
) -> Vec<((i64, i64), (i64, i64))> {
    let small = small_weighted_divisors(ctx, s0, n_max, p_max);
    let mut bad = Vec::new();
    for (i, &(n, p, _)) in small.iter().enumerate() {
        for &(n1, p1, _) in &small[i + 1..] {
            let (hi, lo) = if p >= p1 { ((n, p), (n1, p1)) } else { ((n1, p1), (n, p)) };
            if hi == lo {
                continue;
            }
            let gap = (hi.0 - lo.0).abs() as f64;
            if gap < (lo.1 as f64).powf(s0 / ctx.tau1 as f64) {
                bad.push((hi, lo));
            }
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use num::rational::BigRational;

    type R = BigRational;

    fn float_ctx() -> FrequencyContext<f64> {
        FrequencyContext::new(
            2,
            Expo::Real(1.0),
            std::f64::consts::SQRT_2 - 1.0,
            1e-3,
            0.05,
            5e-3,
            1e-2,
            2,
            4,
            6,
            0.25,
            false,
            CutoffProfile::SmoothExp,
        )
        .unwrap()
    }

    fn rational_ctx() -> FrequencyContext<R> {
        FrequencyContext::new(
            2,
            Expo::Int(1),
            R::ratio(5009, 7500),
            R::ratio(1, 1000),
            R::ratio(1, 20),
            R::ratio(1, 200),
            R::ratio(1, 100),
            2,
            4,
            6,
            0.5,
            false,
            CutoffProfile::PiecewiseLinear,
        )
        .unwrap()
    }

    #[test]
    fn delta_at_unperturbed_mode_is_eps() {
        let ctx = rational_ctx();
        // delta_{1,D} = eps exactly
        assert_eq!(ctx.delta(1, 2), R::ratio(1, 1000));
    }

    #[test]
    fn delta_zero_frequency() {
        let ctx = float_ctx();
        let mut c2 = ctx.clone();
        c2.mu = 0.1;
        assert!((c2.delta(0, 5) - 5.1).abs() < 1e-15);
    }

    #[test]
    fn delta_resonant_example() {
        // n=13, p=25, D=2, mu=0, eps=0.01 -> -(2-0.01)*13 + 25 = -0.87
        let ctx = FrequencyContext::new(
            2,
            Expo::Real(1.0),
            0.0,
            0.01,
            0.05,
            5e-3,
            1e-2,
            2,
            4,
            6,
            0.25,
            true,
            CutoffProfile::SmoothExp,
        )
        .unwrap();
        assert!((ctx.delta(13, 25) - (-0.87)).abs() < 1e-12);
    }

    #[test]
    fn delta_is_affine_in_eps_with_slope_n() {
        let base = rational_ctx();
        let mut shifted = base.clone();
        let de = R::ratio(1, 7777);
        shifted.eps = base.eps.clone() + de.clone();
        for (n, p) in [(3, 7), (5, 11), (12, 29)] {
            let slope = (shifted.delta(n, p) - base.delta(n, p)) / de.clone();
            assert_eq!(slope, R::from_i64(n));
        }
    }

    #[test]
    fn chi_support_windows() {
        for profile in [CutoffProfile::SmoothExp, CutoffProfile::PiecewiseLinear] {
            let spec = CutoffSpec::plain(profile);
            let g = 0.0125f64;
            assert_eq!(chi_family(spec, &g, ChiVariant::Chi, &(0.5 * g)), 1.0);
            assert_eq!(chi_family(spec, &g, ChiVariant::Chi, &(3.0 * g)), 0.0);
            // chibar_1 windows per the gamma/8, gamma/4 thresholds
            assert_eq!(chi_family(spec, &g, ChiVariant::ChiBar(1), &(g / 16.0)), 1.0);
            assert_eq!(chi_family(spec, &g, ChiVariant::ChiBar(1), &(g / 2.0)), 0.0);
            // C_h plateau: 1 for |x| <= 2^{-h-2} gamma, 0 for |x| >= 2^{-h-1} gamma
            for h in [-1i64, 0, 3] {
                let hi = g * 2f64.powi((-h - 1) as i32);
                let lo = g * 2f64.powi((-h - 2) as i32);
                assert_eq!(chi_family(spec, &g, ChiVariant::CH(h), &(lo * 0.99)), 1.0);
                assert_eq!(chi_family(spec, &g, ChiVariant::CH(h), &(hi * 1.01)), 0.0);
            }
        }
    }

    #[test]
    fn partition_of_unity_telescopes() {
        let spec = CutoffSpec::plain(CutoffProfile::PiecewiseLinear);
        let g = R::ratio(1, 200);
        for k in 1..400 {
            let x = R::ratio(k, 13_001);
            if x.is_zero() {
                continue;
            }
            let mut sum = R::zero();
            for h in -1..=MAX_SCALE {
                sum += chi_family(spec, &g, ChiVariant::ChiH(h), &x);
                // beyond the active window everything is zero
                if h > 40 {
                    break;
                }
            }
            assert_eq!(sum, R::one(), "x = {k}/13001");
            let bars = chi_family(spec, &g, ChiVariant::ChiBar(-1), &x)
                + chi_family(spec, &g, ChiVariant::ChiBar(0), &x)
                + chi_family(spec, &g, ChiVariant::ChiBar(1), &x);
            assert_eq!(bars, R::one());
        }
    }

    #[test]
    fn at_most_two_scales_fire() {
        let spec = CutoffSpec::plain(CutoffProfile::SmoothExp);
        let g = 5e-3f64;
        for k in 1..2000 {
            let x = k as f64 * 1.37e-5;
            let scales = nonzero_scales(spec, &g, &(x * x));
            assert!(scales.len() <= 2, "x={x}: {scales:?}");
            for h in -1..=30 {
                let v = chi_family(spec, &g, ChiVariant::ChiH(h), &x);
                if v != 0.0 {
                    assert!(scales.contains(&h), "x={x} h={h} v={v}");
                    if h >= 0 {
                        assert!(2f64.powi((-h - 1) as i32) * g < x && x < 2f64.powi((-h + 1) as i32) * g);
                    }
                }
            }
        }
    }

    #[test]
    fn mu_zero_fails_immediately() {
        let chk = check_mu_nonresonant(&R::zero(), &R::ratio(1, 100), 2, 10, 2);
        assert!(!chk.ok);
        let w = chk.witness.unwrap();
        // exact resonance p = D n (the mirror (-1,-2) of the excluded pair)
        assert_eq!(w.p, 2 * w.n);
        assert_eq!(w.value, 0.0);
    }

    #[test]
    fn mu_half_is_resonant() {
        // half-integer mu has exact zeros: -(D+mu) - p - mu = 0 at p = -D-2mu,
        // so even n_max = 1 finds (n,p,a) = (-1,-3,1); (2,5,0) is another zero.
        let chk1 = check_mu_nonresonant(&R::ratio(1, 2), &R::ratio(1, 100), 2, 1, 2);
        assert!(!chk1.ok);
        assert_eq!(
            {
                let w = chk1.witness.unwrap();
                (w.n, w.p, w.a)
            },
            (-1, -3, 1)
        );
        let chk = check_mu_nonresonant(&R::ratio(1, 2), &R::ratio(1, 100), 2, 5, 2);
        assert!(!chk.ok);
    }

    #[test]
    fn sqrt2_surrogate_passes() {
        let mu = std::f64::consts::SQRT_2 - 1.0;
        let chk = check_mu_nonresonant(&mu, &1e-3, 2, 100, 2);
        assert!(chk.ok, "witness: {:?}", chk.witness);
    }

    #[test]
    fn melnikov_first_halfinteger_omega_fails() {
        // pick eps so that omega = 2.5: omega*2 = 5 integer
        let ctx = FrequencyContext::new(
            2,
            Expo::Real(1.0),
            0.52,
            0.02,
            0.05,
            5e-3,
            1e-2,
            2,
            4,
            6,
            0.25,
            false,
            CutoffProfile::SmoothExp,
        )
        .unwrap();
        assert!((ctx.omega() - 2.5).abs() < 1e-15);
        let chk = check_melnikov_first(&ctx, 10);
        assert!(!chk.ok);
        assert_eq!(chk.witness.unwrap().n, 2);
    }

    #[test]
    fn melnikov_first_vacuous_and_default_pass() {
        let ctx = float_ctx();
        assert!(check_melnikov_first(&ctx, 0).ok);
        assert!(check_melnikov_first(&ctx, 200).ok);
    }

    #[test]
    fn omega_membership_examples() {
        let mut ctx = float_ctx();
        ctx.mu = 0.1;
        ctx.eps0 = 0.05;
        assert!(ctx.omega_membership(10, 21));
        assert!(!ctx.omega_membership(10, 20));
        assert!(!ctx.omega_membership(1, 2)); // excluded index (1, D)
        assert!(!ctx.omega_membership(0, 1));
        assert!(!ctx.omega_membership(0, 5));
    }

    #[test]
    fn sweep_always_true_is_one() {
        let r = measure_sweep(0.1, 100, |_| (true, 1.0));
        assert_eq!(r.fraction, 1.0);
        assert!(r.excluded.is_empty());
    }

    #[test]
    fn sweep_excluded_intervals_merge() {
        let r = measure_sweep(1.0, 100, |e| (!(0.4..0.5).contains(&e), 0.0));
        assert_eq!(r.excluded.len(), 1);
        assert!(r.excluded[0].0 < 0.41 && r.excluded[0].1 > 0.49);
    }

    #[test]
    fn separation_holds_for_default_ctx() {
        let ctx = float_ctx();
        let bad = lemma_separation_violations(&ctx, 0.25, 60, 200);
        assert!(bad.is_empty(), "{bad:?}");
    }
}
