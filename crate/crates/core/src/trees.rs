//! Labelled-tree expansion: enumeration of renormalized trees, of the full
//! expansion with counterterm insertions, and of the resonance families that
//! define the counterterms; tree values; cluster/resonance detection; the
//! scale-count (Bryuno) bound; Whitney extension factors.
//!
//! Trees are planar-rooted with ordered children. A cubic node's children
//! carry the sign pattern (+, +, -) positionally and the node factor 1
//! (the 1/3 of the vertex weight times the 3 orderings of the minus slot),
//! so the sum over enumerated trees reproduces the recursion term by term.
//! End-points carry the factor (-1)^{neg(m)} q on the kernel sphere.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use serde::Serialize;

use crate::arith::{Mat, Scalar};
use crate::blocks::divisor_state;
use crate::error::{Error, Result};
use crate::lattice::{neg_count, norm_sq, ClusterId, LatticePartition, MVec};
use crate::smalldiv::{nonzero_scales, ChiVariant, FrequencyContext};

/// Sentinel used on lines that carry no propagator (family root, e-line).
pub const NO_SCALE: i64 = -2;
pub const NO_TYPE: i8 = i8::MAX;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Kind {
    /// End-point with node factor (-1)^{neg(m)} q; n_v = 1.
    Leaf { sign: i8 },
    /// The single special end-point of a resonance family; factor 1.
    ELeaf,
    /// s_v = 3 node, order label 1, factor 1 after the sign-slot reordering.
    Cubic,
    /// s_v = 1 node of order r; factor L^{(r)}_{n,j,h}(b_exit, a_child).
    Counter { r: usize },
}

/// Labels of the line exiting a node.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LineLabel {
    pub n: i64,
    /// None on leaf lines of the kernel sphere cluster is still set;
    /// None only on the family e-line.
    pub j: Option<ClusterId>,
    /// index of m in the cluster
    pub a: u32,
    /// index of mprime in the cluster
    pub b: u32,
    pub m: MVec,
    pub mprime: MVec,
    pub i: i8,
    pub h: i64,
}

#[derive(Clone, Debug)]
pub struct TreeNode<S> {
    pub kind: Kind,
    pub children: Vec<Rc<TreeNode<S>>>,
    pub line: LineLabel,
    pub order: usize,
    /// Product of all propagators and node factors in this subtree,
    /// including this node's exiting propagator (1 for leaves and the
    /// family root).
    pub val: S,
}

pub type TreeRef<S> = Rc<TreeNode<S>>;

/// Positional sign of child `idx` under a node of kind `kind`.
pub fn child_sigma(kind: &Kind, idx: usize) -> i8 {
    match kind {
        Kind::Cubic => {
            if idx == 2 {
                -1
            } else {
                1
            }
        }
        Kind::Counter { .. } => 1,
        _ => unreachable!("leaves have no children"),
    }
}

/// Renormalized matrices M_{n,j}; absent entries are zero.
#[derive(Clone, Debug, Default)]
pub struct MSlots<S>(pub BTreeMap<(i64, ClusterId), Mat<S>>);

impl<S: Scalar> MSlots<S> {
    pub fn empty() -> Self {
        MSlots(BTreeMap::new())
    }

    pub fn get(&self, n: i64, j: ClusterId) -> Option<&Mat<S>> {
        self.0.get(&(n, j))
    }

    pub fn max_sigma_norm(&self, lat: &LatticePartition, sigma: f64, rho: f64) -> f64 {
        let mut best = 0.0f64;
        for ((_, j), m) in &self.0 {
            let cl = lat.cluster(*j);
            for a in 0..m.d {
                for b in 0..m.d {
                    let w = (sigma
                        * (crate::lattice::dist_sq(&cl.members[a], &cl.members[b]) as f64)
                            .sqrt()
                            .powf(rho))
                    .exp();
                    best = best.max(m.get(a, b).to_f64().abs() * w);
                }
            }
        }
        best
    }
}

/// Cutoff-weighted propagator options of one (n, j) line.
pub struct LineOptions<S> {
    pub d: usize,
    /// p^{-s} (delta I + p^{-s} chibar1(y) M)^{-1}
    pub core: Mat<S>,
    /// (i, h, scalar cutoff weight)
    pub opts: Vec<(i8, i64, S)>,
    pub x_sq: S,
    pub y: S,
    pub delta: S,
}

/// Evaluation environment: frequency data, lattice partition, renormalized
/// matrices, counterterm tables (full mode only) and the kernel amplitude q.
pub struct EvalEnv<'a, S: Scalar> {
    pub ctx: &'a FrequencyContext<S>,
    pub lat: &'a LatticePartition,
    pub m_slots: &'a MSlots<S>,
    pub table: Option<&'a CountertermTable<S>>,
    pub q: S,
    cache: RefCell<HashMap<(i64, ClusterId), Rc<LineOptions<S>>>>,
}

impl<'a, S: Scalar> EvalEnv<'a, S> {
    pub fn new(
        ctx: &'a FrequencyContext<S>,
        lat: &'a LatticePartition,
        m_slots: &'a MSlots<S>,
        table: Option<&'a CountertermTable<S>>,
        q: S,
    ) -> Self {
        EvalEnv {
            ctx,
            lat,
            m_slots,
            table,
            q,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn line_options(&self, n: i64, j: ClusterId) -> Result<Rc<LineOptions<S>>> {
        if let Some(v) = self.cache.borrow().get(&(n, j)) {
            return Ok(v.clone());
        }
        let cluster = self.lat.cluster(j);
        let d = cluster.d();
        let m = self.m_slots.get(n, j);
        let st = divisor_state(self.ctx, n, j.p, d, m)?;
        let mut opts = Vec::new();
        let wm1 = self.ctx.chi(ChiVariant::ChiBar(-1), &st.y);
        if !wm1.is_zero() {
            opts.push((-1i8, -1i64, wm1));
        }
        let w0 = self.ctx.chi(ChiVariant::ChiBar(0), &st.y);
        if !w0.is_zero() {
            opts.push((0, -1, w0));
        }
        let w1 = self.ctx.chi(ChiVariant::ChiBar(1), &st.y);
        if !w1.is_zero() {
            for h in nonzero_scales(self.ctx.cutoff, &self.ctx.gamma, &st.x_sq) {
                let wh = self.ctx.chi_sq(ChiVariant::ChiH(h), &st.x_sq);
                if !wh.is_zero() {
                    opts.push((1, h, w1.clone() * wh));
                }
            }
        }
        let lo = Rc::new(LineOptions {
            d,
            core: st.core,
            opts,
            x_sq: st.x_sq,
            y: st.y,
            delta: st.delta,
        });
        self.cache.borrow_mut().insert((n, j), lo.clone());
        Ok(lo)
    }
}

/// Enumeration mode.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TreeMode {
    /// Full expansion: counterterm nodes allowed, resonances kept.
    Full,
    /// Renormalized: no counterterm nodes, no resonances.
    Renormalized,
}

fn vec_comb(c1: &[i64], c2: &[i64], c3: &[i64]) -> MVec {
    c1.iter()
        .zip(c2)
        .zip(c3)
        .map(|((&x, &y), &z)| x + y - z)
        .collect()
}

/// Compositions (k1, k2, k3) with k1 + k2 + k3 = k.
fn compositions3(k: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for k1 in 0..=k {
        for k2 in 0..=(k - k1) {
            out.push((k1, k2, k - k1 - k2));
        }
    }
    out
}

/// Leaves: the kernel-sphere end-points with factor (-1)^{neg(m)} q.
fn leaves<S: Scalar>(env: &EvalEnv<S>) -> Vec<TreeRef<S>> {
    let l1 = env.lat.lambda1();
    let id = env.lat.lambda1_id();
    l1.members
        .iter()
        .enumerate()
        .map(|(a, m)| {
            let sign = if neg_count(m) % 2 == 0 { 1i8 } else { -1 };
            let val = if sign > 0 {
                env.q.clone()
            } else {
                -env.q.clone()
            };
            Rc::new(TreeNode {
                kind: Kind::Leaf { sign },
                children: Vec::new(),
                line: LineLabel {
                    n: 1,
                    j: Some(id),
                    a: a as u32,
                    b: a as u32,
                    m: m.clone(),
                    mprime: m.clone(),
                    i: -1,
                    h: -1,
                },
                order: 0,
                val,
            })
        })
        .collect()
}

/// Attach all admissible root-line labels (m-choice, type, scale) to a node
/// whose conserved labels are (n, mprime), multiplying the propagator entry
/// into the accumulated value. Yields nothing when the momentum leaves the
/// partition because it is the zero vector (those contributions cancel in
/// pairs by the Dirichlet antisymmetry).
#[allow(clippy::too_many_arguments)]
fn expand_root_lines<S: Scalar>(
    env: &EvalEnv<S>,
    kind: Kind,
    children: Vec<TreeRef<S>>,
    order: usize,
    n: i64,
    mprime: MVec,
    base_val: S,
    out: &mut Vec<TreeRef<S>>,
) -> Result<()> {
    if mprime.iter().all(|&c| c == 0) {
        return Ok(());
    }
    let p = norm_sq(&mprime);
    let (j, b) = env.lat.locate(&mprime).ok_or_else(|| {
        Error::BadConfig(format!(
            "lattice partition too small: no cluster for {mprime:?} (p = {p})"
        ))
    })?;
    // forbidden kernel label
    if n == 1 && j == env.lat.lambda1_id() {
        return Ok(());
    }
    let lo = env.line_options(n, j)?;
    let cluster = env.lat.cluster(j);
    for (i, h, w) in &lo.opts {
        if *i == -1 {
            let g = w.clone() * lo.core.get(b, b).clone();
            if g.is_zero() {
                continue;
            }
            out.push(Rc::new(TreeNode {
                kind: kind.clone(),
                children: children.clone(),
                line: LineLabel {
                    n,
                    j: Some(j),
                    a: b as u32,
                    b: b as u32,
                    m: mprime.clone(),
                    mprime: mprime.clone(),
                    i: *i,
                    h: *h,
                },
                order,
                val: base_val.clone() * g,
            }));
        } else {
            for a in 0..lo.d {
                let g = w.clone() * lo.core.get(a, b).clone();
                if g.is_zero() {
                    continue;
                }
                out.push(Rc::new(TreeNode {
                    kind: kind.clone(),
                    children: children.clone(),
                    line: LineLabel {
                        n,
                        j: Some(j),
                        a: a as u32,
                        b: b as u32,
                        m: cluster.members[a].clone(),
                        mprime: mprime.clone(),
                        i: *i,
                        h: *h,
                    },
                    order,
                    val: base_val.clone() * g,
                }));
            }
        }
    }
    Ok(())
}

/// All labelled trees of order 1..=kmax, per order, in the given mode.
/// In renormalized mode trees containing a resonance are dropped.
pub fn enumerate_orders<S: Scalar>(
    env: &EvalEnv<S>,
    kmax: usize,
    mode: TreeMode,
) -> Result<Vec<Vec<TreeRef<S>>>> {
    let mut levels: Vec<Vec<TreeRef<S>>> = vec![leaves(env)];
    for k in 1..=kmax {
        let mut out: Vec<TreeRef<S>> = Vec::new();
        for (k1, k2, k3) in compositions3(k - 1) {
            for c1 in &levels[k1] {
                for c2 in &levels[k2] {
                    for c3 in &levels[k3] {
                        let n = c1.line.n + c2.line.n - c3.line.n;
                        let mprime = vec_comb(&c1.line.m, &c2.line.m, &c3.line.m);
                        let base = c1.val.clone() * c2.val.clone() * c3.val.clone();
                        if base.is_zero() {
                            continue;
                        }
                        expand_root_lines(
                            env,
                            Kind::Cubic,
                            vec![c1.clone(), c2.clone(), c3.clone()],
                            k,
                            n,
                            mprime,
                            base,
                            &mut out,
                        )?;
                    }
                }
            }
        }
        if mode == TreeMode::Full {
            // counterterm nodes: order r node on top of an order k-r subtree
            let table = env
                .table
                .ok_or_else(|| Error::BadConfig("full mode needs a counterterm table".into()))?;
            for r in 1..=(k - 1).max(0) {
                if r > k - 1 {
                    break;
                }
                for c in levels[k - r].clone() {
                    // entering line must have type 0 or 1 and labels (n, j)
                    if !(c.line.i == 0 || c.line.i == 1) {
                        continue;
                    }
                    let (n, j) = (c.line.n, c.line.j.unwrap());
                    if !env.ctx.omega_membership(n, j.p) {
                        continue; // counterterms vanish off Omega
                    }
                    let lo = env.line_options(n, j)?;
                    let cluster = env.lat.cluster(j);
                    for (i, h, w) in &lo.opts {
                        if *i != 1 {
                            continue;
                        }
                        let l = table.l_at_scale(r, n, j, *h)?.ok_or(
                            Error::MissingCounterterm {
                                n,
                                p: j.p,
                                order: r,
                            },
                        )?;
                        for a in 0..lo.d {
                            for b_exit in 0..lo.d {
                                let g = w.clone() * lo.core.get(a, b_exit).clone();
                                let eta = l.get(b_exit, c.line.a as usize).clone();
                                let v = g * eta * c.val.clone();
                                if v.is_zero() {
                                    continue;
                                }
                                out.push(Rc::new(TreeNode {
                                    kind: Kind::Counter { r },
                                    children: vec![c.clone()],
                                    line: LineLabel {
                                        n,
                                        j: Some(j),
                                        a: a as u32,
                                        b: b_exit as u32,
                                        m: cluster.members[a].clone(),
                                        mprime: cluster.members[b_exit].clone(),
                                        i: 1,
                                        h: *h,
                                    },
                                    order: k,
                                    val: v,
                                }));
                            }
                        }
                    }
                }
            }
        }
        if mode == TreeMode::Renormalized {
            out.retain(|t| detect_resonances(t, env.ctx).is_empty());
        }
        levels.push(out);
    }
    Ok(levels)
}

/// Sum of tree values per root label (n, m) at order k.
pub fn tree_sum_map<S: Scalar>(
    env: &EvalEnv<S>,
    kmax: usize,
    mode: TreeMode,
) -> Result<Vec<BTreeMap<(i64, MVec), S>>> {
    let levels = enumerate_orders(env, kmax, mode)?;
    let mut out = Vec::with_capacity(kmax + 1);
    for level in levels.iter() {
        let mut map: BTreeMap<(i64, MVec), S> = BTreeMap::new();
        for t in level {
            let key = (t.line.n, t.line.m.clone());
            let e = map.entry(key).or_insert_with(S::zero);
            *e += t.val.clone();
        }
        map.retain(|_, v| !v.is_zero());
        out.push(map);
    }
    Ok(out)
}

/// Recompute the value of a labelled tree from its labels (the oracle for
/// the incrementally accumulated `val`).
pub fn evaluate_tree<S: Scalar>(env: &EvalEnv<S>, t: &TreeNode<S>) -> Result<S> {
    let mut v = match &t.kind {
        Kind::Leaf { sign } => {
            let q = env.q.clone();
            return Ok(if *sign > 0 { q } else { -q });
        }
        Kind::ELeaf => return Ok(S::one()),
        Kind::Cubic => S::one(),
        Kind::Counter { r } => {
            let table = env
                .table
                .ok_or_else(|| Error::BadConfig("counterterm node needs a table".into()))?;
            let (n, j) = (t.line.n, t.line.j.unwrap());
            let l = table.l_at_scale(*r, n, j, t.line.h)?.ok_or(
                Error::MissingCounterterm {
                    n,
                    p: j.p,
                    order: *r,
                },
            )?;
            l.get(t.line.b as usize, t.children[0].line.a as usize).clone()
        }
    };
    for c in &t.children {
        v = v * evaluate_tree(env, c)?;
    }
    if t.line.h == NO_SCALE {
        return Ok(v); // family root line carries no propagator
    }
    let (n, j) = (t.line.n, t.line.j.unwrap());
    let lo = env.line_options(n, j)?;
    let w = lo
        .opts
        .iter()
        .find(|(i, h, _)| *i == t.line.i && *h == t.line.h)
        .map(|(_, _, w)| w.clone())
        .unwrap_or_else(S::zero);
    Ok(v * w * lo.core.get(t.line.a as usize, t.line.b as usize).clone())
}

// ---------------------------------------------------------------------------
// clusters and resonances
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct FlatLine {
    /// index of the line / its source node in DFS order
    id: usize,
    /// id of the parent line (the line exiting the node this line enters)
    parent: Option<usize>,
    n: i64,
    j: Option<ClusterId>,
    i: i8,
    h: i64,
    /// real propagator line (not family root / e-line / leaf line is real too)
    internal: bool,
}

fn flatten<S: Scalar>(t: &TreeNode<S>) -> Vec<FlatLine> {
    fn rec<S: Scalar>(t: &TreeNode<S>, parent: Option<usize>, out: &mut Vec<FlatLine>) {
        let id = out.len();
        out.push(FlatLine {
            id,
            parent,
            n: t.line.n,
            j: t.line.j,
            i: t.line.i,
            h: t.line.h,
            internal: matches!(t.kind, Kind::Cubic | Kind::Counter { .. }) && t.line.h != NO_SCALE,
        });
        for c in &t.children {
            rec(c, Some(id), out);
        }
    }
    let mut out = Vec::new();
    rec(t, None, &mut out);
    out
}

fn is_ancestor(lines: &[FlatLine], anc: usize, mut node: usize) -> bool {
    while let Some(p) = lines[node].parent {
        if p == anc {
            return true;
        }
        node = p;
    }
    false
}

/// Largest cluster scale h such that n^tau >= 2^{h-2} (exact).
pub fn resonance_scale_cap(n: i64, tau: i64) -> i64 {
    let n = n.abs().max(1) as u128;
    let mut pow: u128 = 1;
    for _ in 0..tau {
        pow = pow.saturating_mul(n);
    }
    2 + (127 - pow.leading_zeros()) as i64
}

/// A detected resonance.
#[derive(Clone, Debug, Serialize)]
pub struct ResonanceRecord {
    /// 1 or 2
    pub kind: u8,
    /// scale of the cluster
    pub h_t: i64,
    /// (n, j) of the two external lines
    pub n: i64,
    pub j: ClusterId,
    /// exit line scale
    pub h_exit: i64,
    /// flat ids of exit and entering lines
    pub exit_line: usize,
    pub entering_line: usize,
    pub order: usize,
}

/// Detect all 1- and 2-resonances of a scale-assigned tree.
pub fn detect_resonances<S: Scalar>(
    t: &TreeNode<S>,
    ctx: &FrequencyContext<S>,
) -> Vec<ResonanceRecord> {
    let lines = flatten(t);
    let orders = subtree_orders(t);
    let mut out = Vec::new();
    for lout in &lines {
        if !(lout.internal && lout.i == 1) {
            continue;
        }
        for lin in &lines {
            if !(lin.internal && (lin.i == 0 || lin.i == 1)) {
                continue;
            }
            if !is_ancestor(&lines, lout.id, lin.id) {
                continue;
            }
            if lin.n != lout.n || lin.j != lout.j {
                continue;
            }
            // members of T: descendants of lout that are neither lin nor below lin
            let mut l_t: Vec<usize> = Vec::new();
            for l in &lines {
                if l.id != lout.id
                    && is_ancestor(&lines, lout.id, l.id)
                    && l.id != lin.id
                    && !is_ancestor(&lines, lin.id, l.id)
                {
                    l_t.push(l.id);
                }
            }
            if l_t.is_empty() {
                continue; // |V(T)| = 1
            }
            let h_t = l_t
                .iter()
                .filter(|&&id| lines[id].h != NO_SCALE)
                .map(|&id| lines[id].h)
                .max()
                .unwrap_or(-1);
            if lout.h <= h_t + 1 {
                continue;
            }
            if lin.i == 1 && lin.h <= h_t {
                continue; // not maximal as a cluster
            }
            if h_t > resonance_scale_cap(lout.n, ctx.tau) {
                continue;
            }
            // path from lin up to lout (lines strictly between)
            let mut path = Vec::new();
            let mut cur = lines[lin.id].parent;
            while let Some(pid) = cur {
                if pid == lout.id {
                    break;
                }
                path.push(pid);
                cur = lines[pid].parent;
            }
            // condition (ii): off-path lines of T must not repeat (n, j)
            let mut ok = true;
            for &id in &l_t {
                if path.contains(&id) {
                    continue;
                }
                let l = &lines[id];
                if l.j.is_some() && l.h != NO_SCALE && l.n == lin.n && l.j == lin.j {
                    ok = false;
                    break;
                }
            }
            if !ok {
                continue;
            }
            let order = orders
                .get(&lout.id)
                .copied()
                .unwrap_or(0)
                .saturating_sub(orders.get(&lin.id).copied().unwrap_or(0));
            out.push(ResonanceRecord {
                kind: if lin.i == 1 { 1 } else { 2 },
                h_t,
                n: lout.n,
                j: lout.j.unwrap(),
                h_exit: lout.h,
                exit_line: lout.id,
                entering_line: lin.id,
                order,
            });
        }
    }
    out
}

fn subtree_orders<S: Scalar>(t: &TreeNode<S>) -> HashMap<usize, usize> {
    fn rec<S: Scalar>(t: &TreeNode<S>, next: &mut usize, out: &mut HashMap<usize, usize>) {
        let id = *next;
        *next += 1;
        out.insert(id, t.order);
        for c in &t.children {
            rec(c, next, out);
        }
    }
    let mut out = HashMap::new();
    let mut next = 0;
    rec(t, &mut next, &mut out);
    out
}

/// Scale clusters of an assigned tree: for every scale h present, the maximal
/// connected line sets with h_l <= h containing a line of scale exactly h.
pub fn detect_clusters<S: Scalar>(t: &TreeNode<S>) -> Vec<(i64, Vec<usize>)> {
    let lines = flatten(t);
    let scales: std::collections::BTreeSet<i64> = lines
        .iter()
        .filter(|l| l.h != NO_SCALE)
        .map(|l| l.h)
        .collect();
    let mut out = Vec::new();
    for &h in &scales {
        // union-find over nodes joined by lines with h_l <= h
        let mut parent: Vec<usize> = (0..lines.len()).collect();
        fn find(p: &mut Vec<usize>, x: usize) -> usize {
            if p[x] != x {
                let r = find(p, p[x]);
                p[x] = r;
            }
            p[x]
        }
        for l in &lines {
            if l.h == NO_SCALE || l.h > h {
                continue;
            }
            if let Some(par) = l.parent {
                let (a, b) = (find(&mut parent, l.id), find(&mut parent, par));
                if a != b {
                    parent[a] = b;
                }
            }
        }
        let mut comps: HashMap<usize, Vec<usize>> = HashMap::new();
        for l in &lines {
            comps.entry(find(&mut parent, l.id)).or_default().push(l.id);
        }
        for (_, nodes) in comps {
            let has_h = nodes.iter().any(|&id| {
                lines[id].h == h
                    && lines[id].h != NO_SCALE
                    && lines[id].parent.map(|p| nodes.contains(&p)).unwrap_or(false)
            });
            if has_h && nodes.len() > 1 {
                let mut sorted = nodes;
                sorted.sort();
                out.push((h, sorted));
            }
        }
    }
    out.sort();
    out
}

// ---------------------------------------------------------------------------
// Bryuno scale-count bound
// ---------------------------------------------------------------------------

/// N_h: number of lines with i = 1 and scale >= h.
pub fn scale_counts<S: Scalar>(t: &TreeNode<S>) -> BTreeMap<i64, usize> {
    let lines = flatten(t);
    let mut out = BTreeMap::new();
    let hs: Vec<i64> = lines
        .iter()
        .filter(|l| l.internal && l.i == 1 && l.h >= 0)
        .map(|l| l.h)
        .collect();
    if hs.is_empty() {
        return out;
    }
    let hmax = *hs.iter().max().unwrap();
    for h in 0..=hmax {
        out.insert(h, hs.iter().filter(|&&x| x >= h).count());
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct BryunoReport {
    pub rows: Vec<(i64, usize, f64)>,
    pub ok: bool,
}

/// Assert N_h(theta) <= max{0, c k 2^{(2-h) beta / tau} - 1} for all h >= 0.
pub fn bryuno_assert<S: Scalar>(
    t: &TreeNode<S>,
    c: f64,
    beta: f64,
    tau: i64,
) -> Result<BryunoReport> {
    let k = t.order.max(1) as f64;
    let counts = scale_counts(t);
    let mut rows = Vec::new();
    let mut ok = true;
    for (&h, &nh) in &counts {
        let bound = (c * k * 2f64.powf((2 - h) as f64 * beta / tau as f64) - 1.0).max(0.0);
        rows.push((h, nh, bound));
        if nh as f64 > bound + 1e-9 {
            ok = false;
        }
    }
    if !ok {
        return Err(Error::BoundViolation(format!(
            "scale counts {rows:?} exceed the bound (c = {c})"
        )));
    }
    Ok(BryunoReport { rows, ok })
}

// ---------------------------------------------------------------------------
// resonance families and the counterterm table
// ---------------------------------------------------------------------------

/// Per-(n, j) family sums, bucketed by the family scale h1 = max internal
/// scale. `l_at_scale(h)` assembles -(sum of buckets below h-1).
#[derive(Clone, Debug)]
pub struct FamilyBuckets<S> {
    pub d: usize,
    pub buckets: BTreeMap<i64, Mat<S>>,
}

impl<S: Scalar> FamilyBuckets<S> {
    /// L^{(k)}_{n,j,h} = - sum_{h1 < h-1} bucket[h1].
    pub fn l_at_scale(&self, h: i64) -> Mat<S> {
        let mut acc = Mat::zeros(self.d);
        for (&h1, m) in &self.buckets {
            if h1 < h - 1 {
                acc = acc.sub(m);
            }
        }
        acc
    }

    /// Assembled counterterm via the tail sums:
    /// -chibar1(y) sum_{h1} C_{h1}(x) bucket[h1].
    pub fn l_assembled(&self, ctx: &FrequencyContext<S>, y: &S, x_sq: &S) -> Mat<S> {
        let chib1 = ctx.chi(ChiVariant::ChiBar(1), y);
        let mut acc = Mat::zeros(self.d);
        for (&h1, m) in &self.buckets {
            let w = ctx.chi_sq(ChiVariant::CH(h1), x_sq);
            if w.is_zero() {
                continue;
            }
            acc = acc.sub(&m.scale(&w));
        }
        acc.scale(&chib1)
    }

    /// Assembled via the dyadic split: sum_h chibar1 chi_h(x) L_{n,j,h}.
    pub fn l_assembled_dyadic(&self, ctx: &FrequencyContext<S>, y: &S, x_sq: &S) -> Mat<S> {
        let chib1 = ctx.chi(ChiVariant::ChiBar(1), y);
        let mut acc = Mat::zeros(self.d);
        for h in nonzero_scales(ctx.cutoff, &ctx.gamma, x_sq) {
            let w = ctx.chi_sq(ChiVariant::ChiH(h), x_sq);
            acc = acc.add(&self.l_at_scale(h).scale(&w));
        }
        acc.scale(&chib1)
    }
}

/// Counterterm tables per order: order k at index k-1.
#[derive(Default)]
pub struct CountertermTable<S> {
    pub orders: Vec<BTreeMap<(i64, ClusterId), FamilyBuckets<S>>>,
}

impl<S: Scalar> CountertermTable<S> {
    pub fn empty() -> Self {
        CountertermTable { orders: Vec::new() }
    }

    pub fn kmax(&self) -> usize {
        self.orders.len()
    }

    /// L^{(k)}_{n,j,h}; None when the slot is absent (zero off Omega).
    pub fn l_at_scale(&self, k: usize, n: i64, j: ClusterId, h: i64) -> Result<Option<Mat<S>>> {
        if k == 0 || k > self.orders.len() {
            return Err(Error::MissingCounterterm { n, p: j.p, order: k });
        }
        Ok(self.orders[k - 1].get(&(n, j)).map(|b| b.l_at_scale(h)))
    }

    pub fn buckets(&self, k: usize, n: i64, j: ClusterId) -> Option<&FamilyBuckets<S>> {
        self.orders.get(k - 1).and_then(|m| m.get(&(n, j)))
    }
}

/// One fully labelled resonance-family tree plus its root/entering data.
pub struct FamilyTree<S> {
    pub root: TreeRef<S>,
    /// index a with mprime_root = Lambda_j(a)
    pub a: usize,
    /// index b with m_e = Lambda_j(b)
    pub b: usize,
    /// family scale: max internal line scale
    pub h1: i64,
}

/// Enumerate the renormalized resonance families of order k at (n, j):
/// trees with a single special end-point carrying (n, m_e = Lambda_j(b)),
/// root line conserving to Lambda_j(a) with equal time frequency, unit
/// propagators on both external lines, no internal resonances.
pub fn enumerate_families<S: Scalar>(
    env: &EvalEnv<S>,
    k: usize,
    n: i64,
    j: ClusterId,
) -> Result<Vec<FamilyTree<S>>> {
    let cluster = env.lat.cluster(j).clone();
    let plain = enumerate_orders(env, k.saturating_sub(1), TreeMode::Renormalized)?;
    let mut out = Vec::new();
    for (b, m_e) in cluster.members.iter().enumerate() {
        let eleaf: TreeRef<S> = Rc::new(TreeNode {
            kind: Kind::ELeaf,
            children: Vec::new(),
            line: LineLabel {
                n,
                j: None,
                a: 0,
                b: 0,
                m: m_e.clone(),
                mprime: m_e.clone(),
                i: NO_TYPE,
                h: NO_SCALE,
            },
            order: 0,
            val: S::one(),
        });
        // family subtrees of order r containing the e-leaf, with a fully
        // optioned root line
        let mut fam_levels: Vec<Vec<TreeRef<S>>> = vec![vec![eleaf.clone()]];
        for r in 1..k {
            let mut level: Vec<TreeRef<S>> = Vec::new();
            for (k1, k2, k3) in compositions3(r - 1) {
                for e_slot in 0..3 {
                    let (ke, ka, kb) = match e_slot {
                        0 => (k1, k2, k3),
                        1 => (k2, k1, k3),
                        _ => (k3, k1, k2),
                    };
                    for fe in &fam_levels[ke] {
                        for ca in &plain[ka] {
                            for cb in &plain[kb] {
                                let (c1, c2, c3): (&TreeRef<S>, &TreeRef<S>, &TreeRef<S>) =
                                    match e_slot {
                                        0 => (fe, ca, cb),
                                        1 => (ca, fe, cb),
                                        _ => (ca, cb, fe),
                                    };
                                let nn = c1.line.n + c2.line.n - c3.line.n;
                                let mp = vec_comb(&c1.line.m, &c2.line.m, &c3.line.m);
                                let base = c1.val.clone() * c2.val.clone() * c3.val.clone();
                                if base.is_zero() {
                                    continue;
                                }
                                expand_root_lines(
                                    env,
                                    Kind::Cubic,
                                    vec![c1.clone(), c2.clone(), c3.clone()],
                                    r,
                                    nn,
                                    mp,
                                    base,
                                    &mut level,
                                )?;
                            }
                        }
                    }
                }
            }
            level.retain(|t| detect_resonances(t, env.ctx).is_empty());
            fam_levels.push(level);
        }
        // top node: root line without a propagator
        for (k1, k2, k3) in compositions3(k - 1) {
            for e_slot in 0..3 {
                let (ke, ka, kb) = match e_slot {
                    0 => (k1, k2, k3),
                    1 => (k2, k1, k3),
                    _ => (k3, k1, k2),
                };
                for fe in &fam_levels[ke] {
                    for ca in &plain[ka] {
                        for cb in &plain[kb] {
                            let (c1, c2, c3): (&TreeRef<S>, &TreeRef<S>, &TreeRef<S>) = match e_slot
                            {
                                0 => (fe, ca, cb),
                                1 => (ca, fe, cb),
                                _ => (ca, cb, fe),
                            };
                            let nn = c1.line.n + c2.line.n - c3.line.n;
                            if nn != n {
                                continue;
                            }
                            let mp = vec_comb(&c1.line.m, &c2.line.m, &c3.line.m);
                            let Some((jr, a)) = env.lat.locate(&mp) else {
                                continue;
                            };
                            if jr != j {
                                continue;
                            }
                            let val = c1.val.clone() * c2.val.clone() * c3.val.clone();
                            if val.is_zero() {
                                continue;
                            }
                            let root: TreeRef<S> = Rc::new(TreeNode {
                                kind: Kind::Cubic,
                                children: vec![c1.clone(), c2.clone(), c3.clone()],
                                line: LineLabel {
                                    n,
                                    j: Some(j),
                                    a: a as u32,
                                    b: a as u32,
                                    m: mp.clone(),
                                    mprime: mp,
                                    i: 1,
                                    h: NO_SCALE,
                                },
                                order: k,
                                val,
                            });
                            if !detect_resonances(&root, env.ctx).is_empty() {
                                continue;
                            }
                            let h1 = flatten(&root)
                                .iter()
                                .filter(|l| l.internal)
                                .map(|l| l.h)
                                .max()
                                .unwrap_or(-1);
                            // family existence: n^tau >= 2^{h1 - 2}
                            if h1 > resonance_scale_cap(n, env.ctx.tau) {
                                continue;
                            }
                            out.push(FamilyTree {
                                root,
                                a,
                                b,
                                h1,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Family sums bucketed by scale: the order-k counterterm data at (n, j).
/// Zero buckets when (n, j) is outside Omega.
pub fn counterterm_buckets<S: Scalar>(
    env: &EvalEnv<S>,
    k: usize,
    n: i64,
    j: ClusterId,
) -> Result<FamilyBuckets<S>> {
    let d = env.lat.cluster(j).d();
    let mut buckets: BTreeMap<i64, Mat<S>> = BTreeMap::new();
    if !env.ctx.omega_membership(n, j.p) {
        return Ok(FamilyBuckets { d, buckets });
    }
    for fam in enumerate_families(env, k, n, j)? {
        let e = buckets.entry(fam.h1).or_insert_with(|| Mat::zeros(d));
        let cur = e.get(fam.a, fam.b).clone() + fam.root.val.clone();
        e.set(fam.a, fam.b, cur);
    }
    buckets.retain(|_, m| !m.max_abs().is_zero());
    Ok(FamilyBuckets { d, buckets })
}

/// Build tables for orders 1..=kmax over the given (n, j) slots.
pub fn build_counterterm_table<S: Scalar>(
    env: &EvalEnv<S>,
    kmax: usize,
    slots: &[(i64, ClusterId)],
) -> Result<CountertermTable<S>> {
    let mut table = CountertermTable::empty();
    for k in 1..=kmax {
        let mut per = BTreeMap::new();
        for &(n, j) in slots {
            let b = counterterm_buckets(env, k, n, j)?;
            per.insert((n, j), b);
        }
        table.orders.push(per);
    }
    Ok(table)
}

/// All Omega slots with n <= n_cap and representable sphere p <= p_cap.
pub fn omega_slots<S: Scalar>(
    ctx: &FrequencyContext<S>,
    lat: &LatticePartition,
    n_cap: i64,
) -> Vec<(i64, ClusterId)> {
    let mut out = Vec::new();
    for n in 1..=n_cap {
        for p in lat.sphere_values() {
            if ctx.omega_membership(n, p) {
                for c in lat.sphere(p) {
                    out.push((
                        n,
                        ClusterId {
                            p,
                            idx: c.idx as u32,
                        },
                    ));
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// extension factors
// ---------------------------------------------------------------------------

/// Whitney extension factor of an assigned tree: the product of
/// chi_{-1}(|x_{n,j}| |n|^tau) over internal type-1 lines and of
/// chi_{-1}(|delta_1 - delta_2| |n_1 - n_2|^{tau_1}) over admissible pairs
/// (comparable lines, positive sign product along the path, types in {0,1},
/// different frequencies; in family mode both on or both off the e-root path).
pub fn extension_factor<S: Scalar>(env: &EvalEnv<S>, t: &TreeNode<S>) -> Result<S> {
    struct Info<S> {
        id: usize,
        parent: Option<usize>,
        sigma_to_parent: i8,
        n: i64,
        i: i8,
        delta: Option<S>,
        x_sq: Option<S>,
        internal: bool,
        on_e_path: bool,
    }
    fn rec<S: Scalar>(
        env: &EvalEnv<S>,
        t: &TreeNode<S>,
        parent: Option<usize>,
        sigma: i8,
        out: &mut Vec<Info<S>>,
    ) -> Result<bool> {
        let id = out.len();
        let internal = matches!(t.kind, Kind::Cubic | Kind::Counter { .. }) && t.line.h != NO_SCALE;
        let (delta, x_sq) = if let Some(j) = t.line.j {
            if internal || matches!(t.kind, Kind::Leaf { .. }) {
                let lo = env.line_options(t.line.n, j).ok();
                match lo {
                    Some(lo) => (Some(lo.delta.clone()), Some(lo.x_sq.clone())),
                    None => (None, None),
                }
            } else {
                (None, None)
            }
        } else {
            (None, None)
        };
        out.push(Info {
            id,
            parent,
            sigma_to_parent: sigma,
            n: t.line.n,
            i: t.line.i,
            delta,
            x_sq,
            internal,
            on_e_path: false,
        });
        let mut contains_e = matches!(t.kind, Kind::ELeaf);
        for (idx, c) in t.children.iter().enumerate() {
            let s = child_sigma(&t.kind, idx);
            let sub_e = rec(env, c, Some(id), s, out)?;
            contains_e = contains_e || sub_e;
        }
        if contains_e {
            out[id].on_e_path = true;
        }
        Ok(contains_e)
    }
    let mut infos: Vec<Info<S>> = Vec::new();
    rec(env, t, None, 1, &mut infos)?;
    let mut factor = S::one();
    let tau = env.ctx.tau;
    let tau1 = env.ctx.tau1;
    for l in &infos {
        if l.internal && l.i == 1 {
            if let Some(xsq) = &l.x_sq {
                let arg_sq = xsq.clone() * crate::arith::int_pow::<S>(l.n.abs().max(1), 2 * tau);
                factor = factor * one_minus_chi_sq(env.ctx, &arg_sq);
            }
        }
    }
    // pair factors
    for l1 in &infos {
        if !(l1.internal && (l1.i == 0 || l1.i == 1)) {
            continue;
        }
        for l2 in &infos {
            if !(l2.internal && (l2.i == 0 || l2.i == 1)) {
                continue;
            }
            // l1 strictly below l2
            let mut anc = false;
            let mut cur = infos[l1.id].parent;
            let mut sig = infos[l1.id].sigma_to_parent as i64;
            while let Some(p) = cur {
                if p == l2.id {
                    anc = true;
                    break;
                }
                sig *= infos[p].sigma_to_parent as i64;
                cur = infos[p].parent;
            }
            if !anc || sig != 1 || l1.n == l2.n {
                continue;
            }
            // family restriction: both on or both off the e-path
            let has_e = infos.iter().any(|x| x.on_e_path);
            if has_e && (infos[l1.id].on_e_path != infos[l2.id].on_e_path) {
                continue;
            }
            if let (Some(d1), Some(d2)) = (&infos[l1.id].delta, &infos[l2.id].delta) {
                let diff = d1.clone() - d2.clone();
                let gap = (l1.n - l2.n).abs().max(1);
                let arg_sq =
                    diff.clone() * diff * crate::arith::int_pow::<S>(gap, 2 * tau1);
                factor = factor * one_minus_chi_sq(env.ctx, &arg_sq);
            }
        }
    }
    Ok(factor)
}

fn one_minus_chi_sq<S: Scalar>(ctx: &FrequencyContext<S>, arg_sq: &S) -> S {
    S::one() - crate::smalldiv::chi_family_sq(
        crate::smalldiv::CutoffSpec::plain(ctx.cutoff.profile),
        &ctx.gamma,
        ChiVariant::Chi,
        arg_sq,
    )
}

/// Canonical serialization of a tree for golden tests.
pub fn tree_to_json<S: Scalar>(t: &TreeNode<S>) -> serde_json::Value {
    serde_json::json!({
        "kind": format!("{:?}", t.kind),
        "order": t.order,
        "line": {
            "n": t.line.n,
            "j": t.line.j.map(|j| (j.p, j.idx)),
            "m": t.line.m,
            "mprime": t.line.mprime,
            "a": t.line.a,
            "b": t.line.b,
            "i": t.line.i,
            "h": t.line.h,
        },
        "children": t.children.iter().map(|c| tree_to_json(c)).collect::<Vec<_>>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{enumerate_sphere, ClusterConstants, LatticePartition};
    use crate::smalldiv::CutoffProfile;
    use num::rational::BigRational;

    type R = BigRational;

    fn rational_ctx() -> FrequencyContext<R> {
        FrequencyContext::new(
            2,
            crate::smalldiv::Expo::Int(1),
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

    fn lattice() -> LatticePartition {
        LatticePartition::build(2, 250, ClusterConstants::defaults(0.5)).unwrap()
    }

    #[test]
    fn k1_tree_sum_matches_triple_scan() {
        let ctx = rational_ctx();
        let lat = lattice();
        let slots = MSlots::empty();
        let q = R::ratio(1, 3);
        let env = EvalEnv::new(&ctx, &lat, &slots, None, q.clone());
        let sums = tree_sum_map(&env, 1, TreeMode::Renormalized).unwrap();
        // independent oracle: brute force over ordered kernel triples
        let l1 = enumerate_sphere(2, 2, false);
        let mut expect: BTreeMap<(i64, MVec), R> = BTreeMap::new();
        for m1 in &l1 {
            for m2 in &l1 {
                for m3 in &l1 {
                    let m: MVec = m1
                        .iter()
                        .zip(m2)
                        .zip(m3)
                        .map(|((a, b), c)| a + b - c)
                        .collect();
                    if m.iter().all(|&c| c == 0) {
                        continue;
                    }
                    let p = norm_sq(&m);
                    if p == 2 {
                        continue; // kernel modes excluded from the recursion
                    }
                    let sgn = |v: &MVec| if neg_count(v) % 2 == 0 { 1i64 } else { -1 };
                    let w = R::from_i64(sgn(m1) * sgn(m2) * sgn(m3))
                        * q.clone()
                        * q.clone()
                        * q.clone();
                    // delta and 1/(p^s delta) scalar propagator: all spheres
                    // in range are singleton or pair clusters; for k=1 the
                    // conserved mprime determines the entry via the core
                    let (j, b) = lat.locate(&m).unwrap();
                    let lo = env.line_options(1, j).unwrap();
                    let cl = lat.cluster(j);
                    for a in 0..cl.d() {
                        let mut g = R::zero();
                        for (i, h, wopt) in &lo.opts {
                            let _ = h;
                            if *i == -1 && a != b {
                                continue;
                            }
                            g += wopt.clone() * lo.core.get(a, b).clone();
                        }
                        if g.is_zero() {
                            continue;
                        }
                        let e = expect
                            .entry((1, cl.members[a].clone()))
                            .or_insert_with(R::zero);
                        *e += w.clone() * g;
                    }
                }
            }
        }
        expect.retain(|_, v| !v.is_zero());
        assert_eq!(sums[1], expect);
        // spec example: the unique triple feeding (1, (3,3))
        let v33 = &sums[1][&(1, vec![3, 3])];
        let delta = ctx.delta(1, 18);
        let want = q.clone() * q.clone() * q.clone() / (R::from_i64(18) * delta);
        assert_eq!(v33.clone(), want);
    }

    #[test]
    fn nonunit_frequency_roots_are_empty() {
        let ctx = rational_ctx();
        let lat = lattice();
        let slots = MSlots::empty();
        let env = EvalEnv::new(&ctx, &lat, &slots, None, R::ratio(1, 2));
        let sums = tree_sum_map(&env, 2, TreeMode::Renormalized).unwrap();
        for k in 1..=2 {
            for (n, m) in sums[k].keys() {
                assert_eq!(*n, 1, "cubic trees stay at the base frequency");
                assert!(m.iter().all(|&c| c.abs() <= 2 * k as i64 + 1));
            }
        }
    }

    #[test]
    fn q_scaling_degree() {
        let ctx = rational_ctx();
        let lat = lattice();
        let slots = MSlots::empty();
        let env1 = EvalEnv::new(&ctx, &lat, &slots, None, R::ratio(1, 3));
        let env2 = EvalEnv::new(&ctx, &lat, &slots, None, R::ratio(2, 3));
        let s1 = tree_sum_map(&env1, 2, TreeMode::Renormalized).unwrap();
        let s2 = tree_sum_map(&env2, 2, TreeMode::Renormalized).unwrap();
        for k in 1..=2usize {
            let factor = R::from_i64(2).powi(2 * k as i64 + 1);
            for (key, v) in &s1[k] {
                assert_eq!(s2[k][key].clone(), v.clone() * factor.clone());
            }
        }
    }

    #[test]
    fn stored_values_match_reevaluation() {
        let ctx = rational_ctx();
        let lat = lattice();
        let slots = MSlots::empty();
        let env = EvalEnv::new(&ctx, &lat, &slots, None, R::ratio(1, 3));
        let levels = enumerate_orders(&env, 2, TreeMode::Renormalized).unwrap();
        for t in levels[2].iter().take(200) {
            let v = evaluate_tree(&env, t).unwrap();
            assert_eq!(v, t.val);
        }
    }

    #[test]
    fn counterterm_k1_matches_pair_scan() {
        let ctx = rational_ctx();
        let lat = lattice();
        let slots = MSlots::empty();
        let q = R::ratio(1, 3);
        let env = EvalEnv::new(&ctx, &lat, &slots, None, q.clone());
        // (55, sphere 145) is in Omega; the cluster {(-1,12),(1,12)} has
        // two members whose difference (2,0) is matched by kernel pairs
        assert!(ctx.omega_membership(55, 145));
        let (j, _) = lat.locate(&vec![1, 12]).unwrap();
        let cl = lat.cluster(j).clone();
        assert_eq!(cl.d(), 2);
        assert_eq!(cl.members, vec![vec![-1, 12], vec![1, 12]]);
        let buckets = counterterm_buckets(&env, 1, 55, j).unwrap();
        // independent oracle: single-node families, e at a positive slot,
        // L^{(1)}(a,b) = -[h >= 1] q^2 sum over kernel pairs with
        // m_plus - m_minus = member(a) - member(b)
        let l1 = enumerate_sphere(2, 2, false);
        let qq = q.clone() * q.clone();
        let expect = |a: usize, b: usize| -> R {
            let mut acc = R::zero();
            let diff: Vec<i64> = cl.members[a]
                .iter()
                .zip(&cl.members[b])
                .map(|(x, y)| x - y)
                .collect();
            for mp in &l1 {
                for mm in &l1 {
                    let d: Vec<i64> = mp.iter().zip(mm).map(|(x, y)| x - y).collect();
                    if d == diff {
                        let sgn = |v: &MVec| if neg_count(v) % 2 == 0 { 1i64 } else { -1 };
                        acc += R::from_i64(sgn(mp) * sgn(mm) * 2) * qq.clone(); // 2 slots for e
                    }
                }
            }
            acc
        };
        let l_h2 = buckets.l_at_scale(2);
        for a in 0..2 {
            for b in 0..2 {
                assert_eq!(l_h2.get(a, b).clone(), -expect(a, b), "entry ({a},{b})");
            }
        }
        // transpose symmetry and the h < 1 vanishing
        assert!(buckets.l_at_scale(0).max_abs().is_zero());
        assert_eq!(l_h2.get(0, 1), l_h2.get(1, 0));
        assert_eq!(l_h2.get(0, 0).clone(), -R::from_i64(8) * qq.clone());
        assert_eq!(l_h2.get(0, 1).clone(), R::from_i64(4) * qq.clone());
    }

    #[test]
    fn counterterm_off_omega_is_zero() {
        let ctx = rational_ctx();
        let lat = lattice();
        let slots = MSlots::empty();
        let env = EvalEnv::new(&ctx, &lat, &slots, None, R::ratio(1, 3));
        let (j, _) = lat.locate(&vec![1, 2]).unwrap(); // sphere 5
        assert!(!ctx.omega_membership(3, 5));
        let b = counterterm_buckets(&env, 1, 3, j).unwrap();
        assert!(b.buckets.is_empty());
    }

    #[test]
    fn assembled_counterterm_identity() {
        // sum_h chibar1 chi_h(x) L_{n,j,h} == -chibar1 sum_{h1} C_{h1}(x) bucket_{h1}
        let ctx = rational_ctx();
        let lat = lattice();
        let slots = MSlots::empty();
        let env = EvalEnv::new(&ctx, &lat, &slots, None, R::ratio(1, 3));
        // (4, sphere 10) has chibar1(y) = 1 for this context: delta = 1/2500
        assert!(ctx.omega_membership(4, 10));
        let (j, _) = lat.locate(&vec![1, 3]).unwrap();
        let buckets = counterterm_buckets(&env, 1, 4, j).unwrap();
        let lo = env.line_options(4, j).unwrap();
        let via_dyadic = buckets.l_assembled_dyadic(&ctx, &lo.y, &lo.x_sq);
        let via_tail = buckets.l_assembled(&ctx, &lo.y, &lo.x_sq);
        assert_eq!(via_dyadic, via_tail);
        assert!(!via_dyadic.max_abs().is_zero());
        assert!(via_dyadic.is_symmetric());
    }

    #[test]
    fn figure6_style_resonance_detection() {
        // hand-build: root line (n,j) at scale 3, below it a cluster of
        // scale -1 lines, entered by a line with the same (n,j) at scale 3.
        let ctx = rational_ctx();
        let lat = lattice();
        let (j, _) = lat.locate(&vec![1, 3]).unwrap();
        let leaf = |m: MVec| -> TreeRef<R> {
            Rc::new(TreeNode {
                kind: Kind::Leaf { sign: 1 },
                children: vec![],
                line: LineLabel {
                    n: 1,
                    j: Some(lat.lambda1_id()),
                    a: 0,
                    b: 0,
                    m: m.clone(),
                    mprime: m,
                    i: -1,
                    h: -1,
                },
                order: 0,
                val: R::one(),
            })
        };
        let mk_line = |n: i64, jj: ClusterId, i: i8, h: i64| LineLabel {
            n,
            j: Some(jj),
            a: 0,
            b: 0,
            m: vec![1, 3],
            mprime: vec![1, 3],
            i,
            h,
        };
        // entering subtree: cubic with root (4, j), i = 1, scale 3
        let deep = Rc::new(TreeNode {
            kind: Kind::Cubic,
            children: vec![leaf(vec![1, 1]), leaf(vec![1, 1]), leaf(vec![-1, -1])],
            line: mk_line(4, j, 1, 3),
            order: 1,
            val: R::one(),
        });
        // middle node: scale -1 line on a different sphere
        let (j5, _) = lat.locate(&vec![1, 2]).unwrap();
        let mid = Rc::new(TreeNode {
            kind: Kind::Cubic,
            children: vec![deep.clone(), leaf(vec![1, 1]), leaf(vec![-1, -1])],
            line: LineLabel {
                n: 4,
                j: Some(j5),
                a: 0,
                b: 0,
                m: vec![1, 2],
                mprime: vec![1, 2],
                i: -1,
                h: -1,
            },
            order: 2,
            val: R::one(),
        });
        // root: same (n, j) as the deep entering line, scale 3
        let root = TreeNode {
            kind: Kind::Cubic,
            children: vec![mid, leaf(vec![1, 1]), leaf(vec![-1, -1])],
            line: mk_line(4, j, 1, 3),
            order: 3,
            val: R::one(),
        };
        let res = detect_resonances(&root, &ctx);
        assert_eq!(res.len(), 1, "{res:?}");
        assert_eq!(res[0].kind, 1);
        assert_eq!(res[0].h_t, -1);
        assert_eq!(res[0].exit_line, 0);
        // same configuration with the entering line type 0 -> 2-resonance
        let mut deep2 = (*deep).clone();
        deep2.line.i = 0;
        deep2.line.h = -1;
        let mid2 = Rc::new(TreeNode {
            kind: Kind::Cubic,
            children: vec![Rc::new(deep2), leaf(vec![1, 1]), leaf(vec![-1, -1])],
            line: LineLabel {
                n: 4,
                j: Some(j5),
                a: 0,
                b: 0,
                m: vec![1, 2],
                mprime: vec![1, 2],
                i: -1,
                h: -1,
            },
            order: 2,
            val: R::one(),
        });
        let root2 = TreeNode {
            kind: Kind::Cubic,
            children: vec![mid2, leaf(vec![1, 1]), leaf(vec![-1, -1])],
            line: mk_line(4, j, 1, 3),
            order: 3,
            val: R::one(),
        };
        let res2 = detect_resonances(&root2, &ctx);
        assert_eq!(res2.len(), 1);
        assert_eq!(res2[0].kind, 2);
        // all scales -1: no clusters of scale >= 0, no resonances
        let root3 = TreeNode {
            kind: Kind::Cubic,
            children: vec![leaf(vec![1, 1]), leaf(vec![1, 1]), leaf(vec![-1, -1])],
            line: LineLabel {
                n: 1,
                j: Some(j5),
                a: 0,
                b: 0,
                m: vec![1, 2],
                mprime: vec![1, 2],
                i: -1,
                h: -1,
            },
            order: 1,
            val: R::one(),
        };
        assert!(detect_resonances(&root3, &ctx).is_empty());
        assert!(detect_clusters(&root3).iter().all(|(h, _)| *h < 0));
    }

    #[test]
    fn bryuno_trivial_and_violation() {
        let ctx = rational_ctx();
        let lat = lattice();
        let (j, _) = lat.locate(&vec![1, 3]).unwrap();
        let leaf = Rc::new(TreeNode {
            kind: Kind::Leaf { sign: 1 },
            children: vec![],
            line: LineLabel {
                n: 1,
                j: Some(lat.lambda1_id()),
                a: 0,
                b: 0,
                m: vec![1, 1],
                mprime: vec![1, 1],
                i: -1,
                h: -1,
            },
            order: 0,
            val: R::one(),
        });
        let all_low = TreeNode {
            kind: Kind::Cubic,
            children: vec![leaf.clone(), leaf.clone(), leaf.clone()],
            line: LineLabel {
                n: 1,
                j: Some(j),
                a: 0,
                b: 0,
                m: vec![1, 3],
                mprime: vec![1, 3],
                i: -1,
                h: -1,
            },
            order: 1,
            val: R::one(),
        };
        let rep = bryuno_assert(&all_low, 2.0, 1.0 / 3.0, 6).unwrap();
        assert!(rep.rows.is_empty());
        // deliberately inflated scale on a small tree violates the bound
        let inflated = TreeNode {
            line: LineLabel {
                i: 1,
                h: 40,
                ..all_low.line.clone()
            },
            ..all_low.clone()
        };
        assert!(bryuno_assert(&inflated, 2.0, 1.0 / 3.0, 6).is_err());
    }

    #[test]
    fn extension_factor_window() {
        let ctx = rational_ctx();
        let lat = lattice();
        let slots = MSlots::empty();
        let env = EvalEnv::new(&ctx, &lat, &slots, None, R::ratio(1, 3));
        let levels = enumerate_orders(&env, 2, TreeMode::Renormalized).unwrap();
        // all divisors here are order-1 sized, far above the Melnikov floor:
        // every factor argument is >= 2 gamma, so the factor is exactly 1
        for t in levels[2].iter().take(50) {
            let f = extension_factor(&env, t).unwrap();
            assert_eq!(f, R::one());
        }
    }

    #[test]
    fn golden_tree_json_stable() {
        let ctx = rational_ctx();
        let lat = lattice();
        let slots = MSlots::empty();
        let env = EvalEnv::new(&ctx, &lat, &slots, None, R::ratio(1, 3));
        let levels = enumerate_orders(&env, 1, TreeMode::Renormalized).unwrap();
        let t = levels[1]
            .iter()
            .find(|t| t.line.m == vec![3, 3])
            .expect("the (1,(3,3)) tree exists");
        let json = tree_to_json(t);
        let expect = serde_json::json!({
            "kind": "Cubic",
            "order": 1,
            "line": {
                "n": 1, "j": [18, 3], "m": [3, 3], "mprime": [3, 3],
                "a": 0, "b": 0, "i": -1, "h": -1,
            },
            "children": [
                {"kind": "Leaf { sign: 1 }", "order": 0,
                 "line": {"n": 1, "j": [2, 0], "m": [1, 1], "mprime": [1, 1],
                          "a": 3, "b": 3, "i": -1, "h": -1}, "children": []},
                {"kind": "Leaf { sign: 1 }", "order": 0,
                 "line": {"n": 1, "j": [2, 0], "m": [1, 1], "mprime": [1, 1],
                          "a": 3, "b": 3, "i": -1, "h": -1}, "children": []},
                {"kind": "Leaf { sign: 1 }", "order": 0,
                 "line": {"n": 1, "j": [2, 0], "m": [-1, -1], "mprime": [-1, -1],
                          "a": 0, "b": 0, "i": -1, "h": -1}, "children": []},
            ],
        });
        assert_eq!(json, expect);
    }
}
