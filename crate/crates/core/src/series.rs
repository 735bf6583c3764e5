//! Order-by-order solver: the recursion for the coefficient maps u^{(k)},
//! the kernel-amplitude (Q) equation, the compatibility fixpoint fixing the
//! renormalized matrices M(eps), reconstruction and residual verification.
//!
//! Coefficients live on the full lattice in the exponential basis
//! u(x,t) = sum u_{n,m} e^{i(n t + m.x)} with real u_{n,m} odd under each
//! sign flip of m. The kernel modes (n = 1, |m|^2 = D) carry the order-0
//! data +-q and are excluded from the recursion; they are fixed by the
//! Q equation instead.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::arith::{Mat, Scalar};
use crate::error::{Error, Result};
use crate::lattice::{neg_count, norm_sq, ClusterId, LatticePartition, MVec};
use crate::smalldiv::{check_melnikov_first, check_melnikov_second, ChiVariant, FrequencyContext};
use crate::trees::{build_counterterm_table, omega_slots, CountertermTable, EvalEnv, MSlots};

pub type CoeffMap<S> = BTreeMap<(i64, MVec), S>;

/// Truncated power-series solution: per-order coefficient maps.
#[derive(Clone, Debug)]
pub struct SeriesSolution<S> {
    pub orders: Vec<CoeffMap<S>>,
}

impl<S: Scalar> SeriesSolution<S> {
    /// Order-0 data: +-q on the kernel sphere.
    pub fn seed(lat: &LatticePartition, q: &S) -> Self {
        let mut m0 = CoeffMap::new();
        for m in &lat.lambda1().members {
            let v = if neg_count(m) % 2 == 0 {
                q.clone()
            } else {
                -q.clone()
            };
            m0.insert((1, m.clone()), v);
        }
        SeriesSolution { orders: vec![m0] }
    }

    pub fn trunc(&self) -> usize {
        self.orders.len() - 1
    }

    /// Total coefficients at expansion parameter eta.
    pub fn total(&self, eta: &S) -> CoeffMap<S> {
        let mut out = CoeffMap::new();
        let mut w = S::one();
        for ord in &self.orders {
            for (k, v) in ord {
                let add = v.clone() * w.clone();
                let e = out.entry(k.clone()).or_insert_with(S::zero);
                *e += add;
            }
            w = w * eta.clone();
        }
        out.retain(|_, v| !v.is_zero());
        out
    }
}

fn conv2<S: Scalar>(a: &CoeffMap<S>, b: &CoeffMap<S>) -> CoeffMap<S> {
    let mut out = CoeffMap::new();
    for ((n1, m1), v1) in a {
        for ((n2, m2), v2) in b {
            let key = (
                n1 + n2,
                m1.iter().zip(m2).map(|(x, y)| x + y).collect::<MVec>(),
            );
            let e = out.entry(key).or_insert_with(S::zero);
            *e += v1.clone() * v2.clone();
        }
    }
    out
}

/// Cubic convolution with the conjugate third slot:
/// f_{n,m} = sum_{n1+n2-n3=n, m1+m2-m3=m} a b c.
fn conv3<S: Scalar>(a: &CoeffMap<S>, b: &CoeffMap<S>, c: &CoeffMap<S>) -> CoeffMap<S> {
    let ab = conv2(a, b);
    let mut out = CoeffMap::new();
    for ((n12, m12), v12) in &ab {
        for ((n3, m3), v3) in c {
            let key = (
                n12 - n3,
                m12.iter().zip(m3).map(|(x, y)| x - y).collect::<MVec>(),
            );
            let e = out.entry(key).or_insert_with(S::zero);
            *e += v12.clone() * v3.clone();
        }
    }
    out.retain(|_, v| !v.is_zero());
    out
}

/// F^{(k)}: the cubic convolution over orders summing to k - 1.
pub fn convolution_order<S: Scalar>(sol: &SeriesSolution<S>, k: usize) -> CoeffMap<S> {
    let mut out = CoeffMap::new();
    for k1 in 0..k {
        for k2 in 0..(k - k1) {
            let k3 = k - 1 - k1 - k2;
            let part = conv3(&sol.orders[k1], &sol.orders[k2], &sol.orders[k3]);
            for (key, v) in part {
                let e = out.entry(key).or_insert_with(S::zero);
                *e += v;
            }
        }
    }
    out.retain(|_, v| !v.is_zero());
    out
}

/// One recursion step: compute the order-k coefficients from orders < k.
pub fn recursion_step<S: Scalar>(
    env: &EvalEnv<S>,
    sol: &SeriesSolution<S>,
) -> Result<CoeffMap<S>> {
    let k = sol.orders.len();
    let f = convolution_order(sol, k);
    // group targets by (n, cluster)
    let mut groups: BTreeMap<(i64, ClusterId), ()> = BTreeMap::new();
    for (n, m) in f.keys() {
        if m.iter().all(|&c| c == 0) {
            continue; // absent mode; contributions cancel by antisymmetry
        }
        let (j, _) = env.lat.locate(m).ok_or_else(|| {
            Error::BadConfig(format!(
                "lattice partition too small for mode {m:?} (p = {})",
                norm_sq(m)
            ))
        })?;
        if *n == 1 && j == env.lat.lambda1_id() {
            continue; // kernel modes are fixed by the Q equation
        }
        groups.insert((*n, j), ());
    }
    // counterterm sources: slots with table entries and populated lower orders
    if let Some(table) = env.table {
        for r in 1..k {
            if let Some(per) = table.orders.get(r - 1) {
                for &(n, j) in per.keys() {
                    let lower = &sol.orders[k - r];
                    let cluster = env.lat.cluster(j);
                    if cluster
                        .members
                        .iter()
                        .any(|m| lower.contains_key(&(n, m.clone())))
                    {
                        groups.insert((n, j), ());
                    }
                }
            }
        }
    }
    let mut out = CoeffMap::new();
    for (n, j) in groups.into_keys() {
        let cluster = env.lat.cluster(j);
        let d = cluster.d();
        let lo = env.line_options(n, j)?;
        let mut rhs: Vec<S> = cluster
            .members
            .iter()
            .map(|m| f.get(&(n, m.clone())).cloned().unwrap_or_else(S::zero))
            .collect();
        if let Some(table) = env.table {
            for r in 1..k {
                let buckets = table.buckets(r, n, j);
                if buckets.is_none() && env.ctx.omega_membership(n, j.p) && r <= table.kmax() {
                    return Err(Error::MissingCounterterm { n, p: j.p, order: r });
                }
                if let Some(buckets) = buckets {
                    let l = buckets.l_assembled_dyadic(env.ctx, &lo.y, &lo.x_sq);
                    if l.max_abs().is_zero() {
                        continue;
                    }
                    let lower: Vec<S> = cluster
                        .members
                        .iter()
                        .map(|m| {
                            sol.orders[k - r]
                                .get(&(n, m.clone()))
                                .cloned()
                                .unwrap_or_else(S::zero)
                        })
                        .collect();
                    let add = l.matvec(&lower);
                    for (acc, v) in rhs.iter_mut().zip(add) {
                        *acc += v;
                    }
                }
            }
        }

        // U = p^{-s} (delta I + p^{-s} chibar1 M)^{-1} rhs
        let u = lo.core.matvec(&rhs);
        for (a, v) in u.into_iter().enumerate() {
            if !v.is_zero() {
                out.insert((n, cluster.members[a].clone()), v);
            }
        }
        let _ = d;
    }
    Ok(out)
}

/// Kernel convolution f_{1,V}(u) of a total coefficient map.
pub fn kernel_rhs<S: Scalar>(u: &CoeffMap<S>, d: usize) -> S {
    let v_target: MVec = vec![1; d];
    let f = conv3(u, u, u);
    f.get(&(1, v_target)).cloned().unwrap_or_else(S::zero)
}

#[derive(Clone, Debug, Serialize)]
pub struct QSolve {
    pub q: f64,
    /// Exact squared leading amplitude (eta = 0 branch only).
    pub q_sq_leading: Option<String>,
    pub iterations: usize,
    pub residual: f64,
}

/// Leading amplitude squared: q0^2 = D^s 3^{-D}, exact when s is an integer.
pub fn q0_squared<S: Scalar>(ctx: &FrequencyContext<S>) -> S {
    let three_d = crate::arith::int_pow::<S>(3, ctx.d as i64);
    ctx.s.pow_of::<S>(ctx.d as i64) / three_d
}

/// Pipeline state: counterterm table plus the series it produces.
pub struct Pipeline<'a, S: Scalar> {
    pub ctx: &'a FrequencyContext<S>,
    pub lat: &'a LatticePartition,
    pub m_slots: MSlots<S>,
    pub table: CountertermTable<S>,
    /// (n, j) slots tracked by the fixpoint.
    pub slots: Vec<(i64, ClusterId)>,
    pub trunc: usize,
}

impl<'a, S: Scalar> Pipeline<'a, S> {
    pub fn new(
        ctx: &'a FrequencyContext<S>,
        lat: &'a LatticePartition,
        trunc: usize,
        n_cap: i64,
    ) -> Self {
        let slots = omega_slots(ctx, lat, n_cap);
        Pipeline {
            ctx,
            lat,
            m_slots: MSlots::empty(),
            table: CountertermTable::empty(),
            slots,
            trunc,
        }
    }

    pub fn rebuild_table(&mut self, q: &S) -> Result<()> {
        let env = EvalEnv::new(self.ctx, self.lat, &self.m_slots, None, q.clone());
        self.table = build_counterterm_table(&env, self.trunc, &self.slots)?;
        Ok(())
    }

    /// Solve the series at the current table/M with amplitude q.
    pub fn run_series(&self, q: &S) -> Result<SeriesSolution<S>> {
        let env = EvalEnv::new(self.ctx, self.lat, &self.m_slots, Some(&self.table), q.clone());
        let mut sol = SeriesSolution::seed(self.lat, q);
        for _ in 1..=self.trunc {
            let next = recursion_step(&env, &sol)?;
            sol.orders.push(next);
        }
        Ok(sol)
    }

    /// Solve the Q equation D^s q = f_{1,V}(u(q)) at expansion parameter eta
    /// by damped Newton from q0; exact at eta = 0.
    pub fn solve_q(&mut self, eta: f64, tol: f64, max_iter: usize) -> Result<QSolve> {
        let q0_sq = q0_squared(self.ctx);
        let q0 = q0_sq.to_f64().sqrt();
        if eta == 0.0 {
            return Ok(QSolve {
                q: q0,
                q_sq_leading: Some(format!("{q0_sq}")),
                iterations: 0,
                residual: 0.0,
            });
        }
        assert!(
            !S::EXACT,
            "the eta != 0 Q-equation solve runs in float mode"
        );
        let ds = self.ctx.s.pow_of::<S>(self.ctx.d as i64).to_f64();
        let eta_s = crate::smalldiv::scalar_of_f64::<S>(eta);
        let g = |me: &mut Self, q: f64| -> Result<f64> {
            let qs = crate::smalldiv::scalar_of_f64::<S>(q);
            me.rebuild_table(&qs)?;
            let sol = me.run_series(&qs)?;
            let total = sol.total(&eta_s);
            Ok(ds * q - kernel_rhs(&total, me.ctx.d).to_f64())
        };
        let mut q = q0;
        let mut gq = g(self, q)?;
        for it in 0..max_iter {
            if gq.abs() <= tol {
                return Ok(QSolve {
                    q,
                    q_sq_leading: None,
                    iterations: it,
                    residual: gq.abs(),
                });
            }
            let dq = 1e-7 * q.abs().max(1e-3);
            let gp = g(self, q + dq)?;
            let slope = (gp - gq) / dq;
            if slope.abs() < 1e-12 {
                break;
            }
            let mut step = -gq / slope;
            // damping: halve until the residual does not grow
            for _ in 0..30 {
                let cand = q + step;
                let gc = g(self, cand)?;
                if gc.abs() < gq.abs() || step.abs() < 1e-15 {
                    q = cand;
                    gq = gc;
                    break;
                }
                step /= 2.0;
            }
        }
        if gq.abs() <= tol {
            Ok(QSolve {
                q,
                q_sq_leading: None,
                iterations: max_iter,
                residual: gq.abs(),
            })
        } else {
            Err(Error::NoConvergence {
                what: "Q equation".into(),
                iters: max_iter,
            })
        }
    }

    /// Compatibility fixpoint: M <- -(sum_k eta^k sum_h1 C_{h1}(x) bucket_{h1})
    /// over the tracked slots, with eta = eps, iterated to tolerance.
    /// Checks the Melnikov gates and the |M|_sigma <= K2 eps bound.
    pub fn compatibility_fixpoint(
        &mut self,
        q: &S,
        tol: f64,
        max_iter: usize,
        n_max_melnikov: i64,
        k2_bound: f64,
    ) -> Result<usize> {
        let first = check_melnikov_first(self.ctx, n_max_melnikov);
        if !first.ok {
            let w = first.witness.unwrap();
            return Err(Error::MelnikovFailure {
                n: w.n,
                p: w.p,
                margin: first.min_margin,
            });
        }
        let eta = self.ctx.eps.clone();
        for it in 0..max_iter {
            self.rebuild_table(q)?;
            let mut next = MSlots::empty();
            let mut delta_max = 0.0f64;
            for &(n, j) in &self.slots {
                let env = EvalEnv::new(self.ctx, self.lat, &self.m_slots, None, q.clone());
                let lo = env.line_options(n, j)?;
                let d = self.lat.cluster(j).d();
                let mut acc = Mat::<S>::zeros(d);
                let mut w = S::one();
                for k in 1..=self.trunc {
                    w = w.clone() * eta.clone();
                    if let Some(b) = self.table.buckets(k, n, j) {
                        // M = L / chibar1: the assembled tail sums without chibar1
                        let mut part = Mat::zeros(d);
                        for (&h1, m) in &b.buckets {
                            let c = self.ctx.chi_sq(ChiVariant::CH(h1), &lo.x_sq);
                            if !c.is_zero() {
                                part = part.sub(&m.scale(&c));
                            }
                        }
                        acc = acc.add(&part.scale(&w));
                    }
                }
                let prev = self.m_slots.get(n, j);
                let diff = match prev {
                    Some(p) => acc.sub(p).max_abs().to_f64(),
                    None => acc.max_abs().to_f64(),
                };
                delta_max = delta_max.max(diff);
                if !acc.max_abs().is_zero() {
                    next.0.insert((n, j), acc);
                }
            }
            self.m_slots = next;
            if delta_max <= tol {
                // second Melnikov conditions at the fixed point
                let admitted: Vec<(i64, i64, usize)> = self
                    .slots
                    .iter()
                    .map(|&(n, j)| (n, j.p, j.idx as usize))
                    .collect();
                let env = EvalEnv::new(self.ctx, self.lat, &self.m_slots, None, q.clone());
                let chk = check_melnikov_second(self.ctx, &admitted, |n, p, idx| {
                    let j = ClusterId { p, idx: idx as u32 };
                    Ok(env.line_options(n, j)?.x_sq.clone())
                })?;
                if !chk.ok {
                    let w = chk.witness.unwrap();
                    return Err(Error::MelnikovFailure {
                        n: w.n,
                        p: w.p,
                        margin: chk.min_margin,
                    });
                }
                // |M|_sigma <= K2 eps with the configured margin
                let rho = crate::blocks::rho_default(self.ctx.d);
                let sig = self.m_slots.max_sigma_norm(self.lat, 0.1, rho);
                let eps = self.ctx.eps.to_f64();
                if sig > k2_bound * eps {
                    return Err(Error::BoundViolation(format!(
                        "|M|_sigma = {sig} exceeds K2 eps = {}",
                        k2_bound * eps
                    )));
                }
                return Ok(it + 1);
            }
        }
        Err(Error::NoConvergence {
            what: "compatibility fixpoint".into(),
            iters: max_iter,
        })
    }
}

/// Residual of the renormalized equation plugged back into the original one:
/// r_{n,m} = |m|^{2s} delta_{n,m} u_{n,m} - eta f_{n,m}(u).
#[derive(Clone, Debug, Serialize)]
pub struct ResidualReport {
    pub max_abs: f64,
    pub support: usize,
    pub rows: Vec<((i64, String), f64)>,
}

pub fn residual<S: Scalar>(
    ctx: &FrequencyContext<S>,
    sol: &SeriesSolution<S>,
    eta: &S,
) -> ResidualReport {
    let u = sol.total(eta);
    let f = conv3(&u, &u, &u);
    let mut keys: std::collections::BTreeSet<(i64, MVec)> = u.keys().cloned().collect();
    keys.extend(f.keys().cloned());
    let mut max_abs = 0.0f64;
    let mut rows = Vec::new();
    for key in keys {
        let (n, m) = &key;
        let p = norm_sq(m);
        let lhs = if p == 0 {
            S::zero()
        } else {
            ctx.p_pow_s(p)
                * ctx.delta(*n, p)
                * u.get(&key).cloned().unwrap_or_else(S::zero)
        };
        let rhs = eta.clone() * f.get(&key).cloned().unwrap_or_else(S::zero);
        let r = (lhs - rhs).to_f64().abs();
        if r > max_abs {
            max_abs = r;
        }
        if r > 0.0 {
            rows.push(((*n, format!("{m:?}")), r));
        }
    }
    rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    rows.truncate(32);
    ResidualReport {
        max_abs,
        support: u.len(),
        rows,
    }
}

/// Real part of the field at grid points, in the sine-product basis of the
/// positive sector: u(x,t) = sum_{n, m > 0} u_{n,m} cos(n t) prod sin(m_i x_i).
pub fn reconstruct<S: Scalar>(
    sol: &SeriesSolution<S>,
    eta: &S,
    points: &[(Vec<f64>, f64)],
) -> Vec<f64> {
    let u = sol.total(eta);
    points
        .iter()
        .map(|(x, t)| {
            let mut acc = 0.0;
            for ((n, m), v) in &u {
                if m.iter().any(|&c| c <= 0) {
                    continue;
                }
                let mut w = (*n as f64 * t).cos();
                for (mi, xi) in m.iter().zip(x) {
                    w *= (*mi as f64 * xi).sin();
                }
                acc += v.to_f64() * w;
            }
            acc
        })
        .collect()
}

/// Least-squares slope of log(max residual) against log(eta).
pub fn fit_loglog_slope(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        let (lx, ly) = (x.ln(), y.max(1e-300).ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}
