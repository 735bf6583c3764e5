//! Lattice geometry: points on spheres, cluster partitions of each sphere,
//! the Bourgain partition of Z^D under Phi(m) = (m, |m|^2), and the
//! resonant-case cells pairing a spatial cell with its admitted time
//! frequencies.
//!
//! Clusters are connected components of a proximity graph. For D = 2 the
//! pairing threshold is 0.9 p^{1/6} (= 0.9 r^{1/3} in the radius r), which
//! provably forbids chains of three: three points of a circle of radius r
//! with pairwise gaps below r^{1/3} would span a triangle of area < 1/2,
//! impossible for lattice points. For D >= 3 the threshold is
//! `c2 * p^beta` with `beta = 2 alpha / (2D + (D+2)! D^2)`.

use serde::Serialize;
use std::collections::HashMap;

use crate::error::{Error, Result};

pub type MVec = Vec<i64>;

/// A time-space Fourier index.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Mode {
    pub n: i64,
    pub m: MVec,
}

pub fn norm_sq(m: &[i64]) -> i64 {
    m.iter().map(|c| c * c).sum()
}

pub fn dist_sq(a: &[i64], b: &[i64]) -> i64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// All m in Z^D (or Z_+^D) with |m|^2 = p, lexicographic order.
pub fn enumerate_sphere(p: i64, d: usize, positive_sector: bool) -> Vec<MVec> {
    assert!(p >= 1 && d >= 2);
    let mut out = Vec::new();
    let mut cur = vec![0i64; d];
    fn rec(p_left: i64, idx: usize, d: usize, positive: bool, cur: &mut MVec, out: &mut Vec<MVec>) {
        if idx == d {
            if p_left == 0 {
                out.push(cur.clone());
            }
            return;
        }
        let bound = (p_left as f64).sqrt() as i64 + 1;
        let lo = if positive { 1 } else { -bound };
        for c in lo..=bound {
            let sq = c * c;
            if sq > p_left {
                continue;
            }
            cur[idx] = c;
            rec(p_left - sq, idx + 1, d, positive, cur, out);
        }
        cur[idx] = 0;
    }
    rec(p, 0, d, positive_sector, &mut cur, &mut out);
    out.sort();
    out
}

/// Sign flip of the i-th component (the Dirichlet reflection).
pub fn sign_flip(m: &[i64], i: usize) -> MVec {
    let mut out = m.to_vec();
    out[i] = -out[i];
    out
}

/// Full sign orbit of a vector.
pub fn sign_orbit(m: &[i64]) -> Vec<MVec> {
    let d = m.len();
    let mut out = Vec::with_capacity(1 << d);
    for mask in 0..(1u32 << d) {
        let v: MVec = m
            .iter()
            .enumerate()
            .map(|(i, &c)| if mask >> i & 1 == 1 { -c } else { c })
            .collect();
        out.push(v);
    }
    out.sort();
    out.dedup();
    out
}

/// Number of negative components; the end-point sign is (-1)^neg.
pub fn neg_count(m: &[i64]) -> u32 {
    m.iter().filter(|&&c| c < 0).count() as u32
}

/// A same-sphere cluster Lambda_j.
#[derive(Clone, Debug, Serialize)]
pub struct SphereCluster {
    /// Index of the cluster within its sphere (lex order of first member).
    pub idx: usize,
    /// Common squared modulus of the members.
    pub p: i64,
    /// Members, lexicographically sorted; entry `a` backs matrix index `a`.
    pub members: Vec<MVec>,
    pub diam: f64,
    /// Sharper observed diameter exponent reference value p^{alpha/D}.
    pub diam_ref: f64,
}

impl SphereCluster {
    pub fn d(&self) -> usize {
        self.members.len()
    }

    pub fn member_index(&self, m: &[i64]) -> Option<usize> {
        self.members.iter().position(|x| x as &[i64] == m)
    }
}

/// Constants governing the partitions; calibrated at build time where the
/// source leaves them abstract.
#[derive(Clone, Debug, Serialize)]
pub struct ClusterConstants {
    /// Cardinality bound d_j <= c1 * p^alpha.
    pub c1: f64,
    /// Separation bound dist >= c2 * p^beta.
    pub c2: f64,
    /// Cluster exponent alpha.
    pub alpha: f64,
    /// D = 2 pairing coefficient for the p^{1/6} threshold.
    pub d2_threshold: f64,
    /// D = 2 emitted-separation coefficient at the p^{1/3} normalization.
    pub d2_separation_c2: f64,
}

impl ClusterConstants {
    pub fn defaults(alpha: f64) -> Self {
        ClusterConstants {
            c1: 3.0,
            c2: 1.0,
            alpha,
            d2_threshold: 0.9,
            // calibrated over all spheres p <= 1e4 (min separation / p^{1/3})
            d2_separation_c2: 0.13,
        }
    }

    /// beta from the separation lemma: 2 alpha / (2D + (D+2)! D^2).
    pub fn beta(&self, d: usize) -> f64 {
        let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
        2.0 * self.alpha / (2.0 * d as f64 + fact(d + 2) * (d * d) as f64)
    }

    /// Pairing threshold (squared) used by the proximity graph on sphere p.
    pub fn threshold_sq(&self, d: usize, p: i64) -> f64 {
        let t = if d == 2 {
            self.d2_threshold * (p as f64).powf(1.0 / 6.0)
        } else {
            self.c2 * (p as f64).powf(self.beta(d))
        };
        t * t
    }
}

fn connected_components(n: usize, mut adj: impl FnMut(usize, usize) -> bool) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            let r = find(parent, parent[x]);
            parent[x] = r;
        }
        parent[x]
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if adj(i, j) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    for g in &mut out {
        g.sort();
    }
    out.sort_by_key(|g| g[0]);
    out
}

/// Partition the points of one sphere into proximity clusters and verify
/// the cardinality/separation invariants for the configured constants.
pub fn cluster_sphere(points: &[MVec], d: usize, consts: &ClusterConstants) -> Result<Vec<SphereCluster>> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let p = norm_sq(&points[0]);
    for m in points {
        if norm_sq(m) != p {
            return Err(Error::InvariantViolation(format!(
                "cluster input not on one sphere: |{m:?}|^2 != {p}"
            )));
        }
    }
    let mut sorted: Vec<MVec> = points.to_vec();
    sorted.sort();
    sorted.dedup();
    let thr_sq = consts.threshold_sq(d, p);
    let comps = connected_components(sorted.len(), |i, j| {
        (dist_sq(&sorted[i], &sorted[j]) as f64) < thr_sq
    });
    let mut clusters = Vec::with_capacity(comps.len());
    for (idx, comp) in comps.iter().enumerate() {
        let members: Vec<MVec> = comp.iter().map(|&i| sorted[i].clone()).collect();
        let diam = members
            .iter()
            .flat_map(|a| members.iter().map(move |b| dist_sq(a, b)))
            .max()
            .unwrap_or(0) as f64;
        clusters.push(SphereCluster {
            idx,
            p,
            members,
            diam: diam.sqrt(),
            diam_ref: (p as f64).powf(consts.alpha / d as f64),
        });
    }
    verify_sphere_clusters(&clusters, d, consts)?;
    Ok(clusters)
}

/// The four separation-lemma invariants for one sphere's partition.
pub fn verify_sphere_clusters(
    clusters: &[SphereCluster],
    d: usize,
    consts: &ClusterConstants,
) -> Result<()> {
    if clusters.is_empty() {
        return Ok(());
    }
    let p = clusters[0].p;
    let pf = p as f64;
    for c in clusters {
        // (ii) cardinality
        let bound = if d == 2 {
            2.0
        } else {
            consts.c1 * pf.powf(consts.alpha)
        };
        if (c.d() as f64) > bound {
            return Err(Error::InvariantViolation(format!(
                "cluster on sphere p={p} has {} members, bound {bound:.3}",
                c.d()
            )));
        }
        // (iv) each member of a multi-point cluster has a close neighbour
        let thr_sq = consts.threshold_sq(d, p);
        if c.d() > 1 {
            for m in &c.members {
                let has = c
                    .members
                    .iter()
                    .any(|m2| m2 != m && (dist_sq(m, m2) as f64) < thr_sq);
                if !has {
                    return Err(Error::InvariantViolation(format!(
                        "member {m:?} of a multi-point cluster has no close neighbour"
                    )));
                }
            }
            let diam_bound = if d == 2 {
                consts.c1.max(2.0) * consts.d2_threshold * pf.powf(consts.alpha + 1.0 / 6.0)
            } else {
                consts.c1 * consts.c2 * pf.powf(consts.alpha + consts.beta(d))
            };
            if c.diam > diam_bound {
                return Err(Error::InvariantViolation(format!(
                    "cluster diameter {} exceeds bound {diam_bound}",
                    c.diam
                )));
            }
        }
    }
    // (iii) pairwise separation between distinct clusters on the sphere
    let sep_bound_sq = if d == 2 {
        let s = consts.d2_separation_c2 * pf.powf(1.0 / 3.0);
        s * s
    } else {
        let s = consts.c2 * pf.powf(consts.beta(d));
        s * s
    };
    for (i, a) in clusters.iter().enumerate() {
        for b in &clusters[i + 1..] {
            let min = a
                .members
                .iter()
                .flat_map(|x| b.members.iter().map(move |y| dist_sq(x, y)))
                .min()
                .unwrap() as f64;
            if min < sep_bound_sq {
                return Err(Error::InvariantViolation(format!(
                    "clusters {} and {} on sphere p={p} separated by {} < bound {}",
                    a.idx,
                    b.idx,
                    min.sqrt(),
                    sep_bound_sq.sqrt()
                )));
            }
        }
    }
    Ok(())
}

/// Identifier of a cluster: its sphere and its index within the sphere.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ClusterId {
    pub p: i64,
    pub idx: u32,
}

/// Eagerly built partition of all spheres with p <= p_max.
///
/// The sphere p = D is the fixed orbit cluster (all vectors with components
/// +-1) by definition; it hosts the kernel modes and is exempt from the
/// d_j <= 2 bound that the generic partition satisfies for D = 2.
pub struct LatticePartition {
    pub d: usize,
    pub p_max: i64,
    pub consts: ClusterConstants,
    spheres: HashMap<i64, Vec<SphereCluster>>,
    lookup: HashMap<MVec, (ClusterId, usize)>,
}

impl LatticePartition {
    pub fn build(d: usize, p_max: i64, consts: ClusterConstants) -> Result<Self> {
        let mut spheres = HashMap::new();
        let mut lookup = HashMap::new();
        for p in 1..=p_max {
            let pts = enumerate_sphere(p, d, false);
            if pts.is_empty() {
                continue;
            }
            let clusters = if p == d as i64 {
                // the orbit cluster, one block by definition
                let members = pts.clone();
                let diam = members
                    .iter()
                    .flat_map(|a| members.iter().map(move |b| dist_sq(a, b)))
                    .max()
                    .unwrap() as f64;
                vec![SphereCluster {
                    idx: 0,
                    p,
                    members,
                    diam: diam.sqrt(),
                    diam_ref: (p as f64).powf(consts.alpha / d as f64),
                }]
            } else {
                cluster_sphere(&pts, d, &consts)?
            };
            for c in &clusters {
                let id = ClusterId {
                    p,
                    idx: c.idx as u32,
                };
                for (a, m) in c.members.iter().enumerate() {
                    lookup.insert(m.clone(), (id, a));
                }
            }
            spheres.insert(p, clusters);
        }
        Ok(LatticePartition {
            d,
            p_max,
            consts,
            spheres,
            lookup,
        })
    }

    pub fn sphere(&self, p: i64) -> &[SphereCluster] {
        self.spheres.get(&p).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn cluster(&self, id: ClusterId) -> &SphereCluster {
        &self.spheres[&id.p][id.idx as usize]
    }

    /// Cluster id and member index of a lattice vector.
    pub fn locate(&self, m: &[i64]) -> Option<(ClusterId, usize)> {
        self.lookup.get(m).copied()
    }

    /// The orbit cluster hosting the kernel modes (sphere p = D).
    pub fn lambda1(&self) -> &SphereCluster {
        &self.spheres[&(self.d as i64)][0]
    }

    pub fn lambda1_id(&self) -> ClusterId {
        ClusterId {
            p: self.d as i64,
            idx: 0,
        }
    }

    /// All spheres present up to p_max, ascending.
    pub fn sphere_values(&self) -> Vec<i64> {
        let mut v: Vec<i64> = self.spheres.keys().copied().collect();
        v.sort();
        v
    }
}

/// A cell of the Bourgain partition of Z^D under Phi(m) = (m, |m|^2).
#[derive(Clone, Debug, Serialize)]
pub struct BourgainCell {
    pub idx: usize,
    /// min |m|^2 over the cell.
    pub p: i64,
    pub members: Vec<MVec>,
    pub diam: f64,
}

fn phi_dist_sq(a: &[i64], b: &[i64]) -> i64 {
    dist_sq(a, b) + (norm_sq(a) - norm_sq(b)).pow(2)
}

/// Partition a finite mode set by proximity of Phi(m) = (m, |m|^2).
///
/// The edge threshold between two points is `c2 * min(max(|m|^2,1))^beta`
/// with `beta = alpha / ((1 + 2^{D-1} D! (D+1)!) D)`.
pub fn bourgain_partition(modes: &[MVec], d: usize, alpha: f64, c2: f64) -> Result<Vec<BourgainCell>> {
    let mut sorted = modes.to_vec();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(Error::DuplicateInput(format!("{:?}", w[0])));
        }
    }
    let beta = bourgain_beta(d, alpha);
    if beta <= 0.0 {
        return Err(Error::BadConfig("alpha too small: beta <= 0".into()));
    }
    let thr = |m: &[i64], m2: &[i64]| -> f64 {
        let pa = norm_sq(m).max(1) as f64;
        let pb = norm_sq(m2).max(1) as f64;
        let t = c2 * pa.min(pb).powf(beta);
        t * t
    };
    let comps = connected_components(sorted.len(), |i, j| {
        (phi_dist_sq(&sorted[i], &sorted[j]) as f64) < thr(&sorted[i], &sorted[j])
    });
    let cells: Vec<BourgainCell> = comps
        .iter()
        .enumerate()
        .map(|(idx, comp)| {
            let members: Vec<MVec> = comp.iter().map(|&i| sorted[i].clone()).collect();
            let p = members.iter().map(|m| norm_sq(m)).min().unwrap();
            let diam = members
                .iter()
                .flat_map(|a| members.iter().map(move |b| dist_sq(a, b)))
                .max()
                .unwrap() as f64;
            BourgainCell {
                idx,
                p,
                members,
                diam: diam.sqrt(),
            }
        })
        .collect();
    Ok(cells)
}

pub fn bourgain_beta(d: usize, alpha: f64) -> f64 {
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    alpha / ((1.0 + 2f64.powi(d as i32 - 1) * fact(d) * fact(d + 1)) * d as f64)
}

/// Exhaustive verification of the Bourgain-cell bounds for a finite set.
pub fn verify_bourgain_cells(
    cells: &[BourgainCell],
    d: usize,
    alpha: f64,
    c1: f64,
    c2: f64,
) -> Result<()> {
    let beta = bourgain_beta(d, alpha);
    for c in cells {
        let pf = c.p.max(1) as f64;
        if (c.members.len() as f64) > c1 * pf.powf(alpha) {
            return Err(Error::InvariantViolation(format!(
                "cell {} has {} members > c1 p^alpha = {}",
                c.idx,
                c.members.len(),
                c1 * pf.powf(alpha)
            )));
        }
        if c.diam >= c1 * c2 * pf.powf(alpha + beta) && c.members.len() > 1 {
            return Err(Error::InvariantViolation(format!(
                "cell {} diameter {} >= bound {}",
                c.idx,
                c.diam,
                c1 * c2 * pf.powf(alpha + beta)
            )));
        }
    }
    for (i, a) in cells.iter().enumerate() {
        for b in &cells[i + 1..] {
            let bound = c2 * (a.p.max(1).min(b.p.max(1)) as f64).powf(beta);
            let min = a
                .members
                .iter()
                .flat_map(|x| b.members.iter().map(move |y| phi_dist_sq(x, y)))
                .min()
                .unwrap() as f64;
            if min.sqrt() < bound {
                return Err(Error::InvariantViolation(format!(
                    "cells {} and {} at Phi-distance {} < bound {}",
                    a.idx,
                    b.idx,
                    min.sqrt(),
                    bound
                )));
            }
        }
    }
    Ok(())
}

/// Resonant-case cell: spatial Bourgain cell plus admitted time frequencies.
#[derive(Clone, Debug, Serialize)]
pub struct ResonantCell {
    pub idx: usize,
    pub p: i64,
    /// Members (n, m): m in the cell, D n != |m|^2,
    /// -1/2 + (D - eps0) n <= |m|^2 <= D n + 1/2.
    pub members: Vec<Mode>,
}

impl ResonantCell {
    pub fn d(&self) -> usize {
        self.members.len()
    }
}

/// Collect the admitted (n, m) pairs of each Bourgain cell.
/// `eps0` is the width parameter of the admission window.
pub fn build_resonant_cells(
    cells: &[BourgainCell],
    d: usize,
    eps0: f64,
) -> Vec<ResonantCell> {
    let mut out = Vec::new();
    for cell in cells {
        let mut members = Vec::new();
        for m in &cell.members {
            let p = norm_sq(m);
            // admitted n: p <= D n + 1/2 and -1/2 + (D - eps0) n <= p, D n != p
            let n_lo = ((p as f64 - 0.5) / d as f64).ceil() as i64;
            let n_hi = ((p as f64 + 0.5) / (d as f64 - eps0)).floor() as i64;
            for n in n_lo.max(0)..=n_hi {
                if d as i64 * n == p {
                    continue;
                }
                let lower = -0.5 + (d as f64 - eps0) * n as f64;
                let upper = d as f64 * n as f64 + 0.5;
                if lower <= p as f64 && (p as f64) <= upper {
                    members.push(Mode { n, m: m.clone() });
                }
            }
        }
        members.sort();
        out.push(ResonantCell {
            idx: cell.idx,
            p: cell.p,
            members,
        });
    }
    out
}

/// JSON report row for the cluster CLI.
#[derive(Serialize)]
pub struct ClusterReport {
    pub j: usize,
    pub p_j: i64,
    pub d_j: usize,
    pub members: Vec<MVec>,
    pub diam: f64,
    pub min_separation: f64,
}

pub fn cluster_report(clusters: &[SphereCluster]) -> Vec<ClusterReport> {
    clusters
        .iter()
        .map(|c| {
            let min_sep = clusters
                .iter()
                .filter(|o| o.idx != c.idx)
                .flat_map(|o| {
                    c.members
                        .iter()
                        .flat_map(move |x| o.members.iter().map(move |y| dist_sq(x, y)))
                })
                .min()
                .map(|v| (v as f64).sqrt())
                .unwrap_or(f64::INFINITY);
            ClusterReport {
                j: c.idx,
                p_j: c.p,
                d_j: c.d(),
                members: c.members.clone(),
                diam: c.diam,
                min_separation: min_sep,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_p2_d2_is_the_orbit() {
        let pts = enumerate_sphere(2, 2, false);
        assert_eq!(
            pts,
            vec![vec![-1, -1], vec![-1, 1], vec![1, -1], vec![1, 1]]
        );
        let pos = enumerate_sphere(2, 2, true);
        assert_eq!(pos, vec![vec![1, 1]]);
    }

    #[test]
    fn sphere_p25_d2_has_12_points() {
        let pts = enumerate_sphere(25, 2, false);
        assert_eq!(pts.len(), 12);
        assert!(pts.contains(&vec![5, 0]) && pts.contains(&vec![3, 4]) && pts.contains(&vec![-4, 3]));
    }

    #[test]
    fn sphere_p7_d2_empty() {
        assert!(enumerate_sphere(7, 2, false).is_empty());
    }

    #[test]
    fn sphere_closed_under_sign_maps() {
        for p in [1, 2, 5, 10, 25, 50] {
            let pts = enumerate_sphere(p, 2, false);
            for m in &pts {
                for i in 0..2 {
                    assert!(pts.contains(&sign_flip(m, i)));
                }
            }
        }
    }

    #[test]
    fn cluster_p25_pairs_and_singletons() {
        let consts = ClusterConstants::defaults(0.5);
        // threshold 0.9 * 25^{1/6} ~ 1.54: sqrt2 < 1.54 < sqrt10
        let cl = cluster_sphere(&enumerate_sphere(25, 2, false), 2, &consts).unwrap();
        let sizes: Vec<usize> = cl.iter().map(|c| c.d()).collect();
        assert_eq!(cl.len(), 8);
        assert_eq!(sizes.iter().filter(|&&s| s == 2).count(), 4); // (3,4)-(4,3) type pairs
        assert_eq!(sizes.iter().filter(|&&s| s == 1).count(), 4); // (5,0) type
        let pair = cl.iter().find(|c| c.d() == 2).unwrap();
        assert_eq!(dist_sq(&pair.members[0], &pair.members[1]), 2);
    }

    #[test]
    fn singleton_input() {
        let consts = ClusterConstants::defaults(0.5);
        let cl = cluster_sphere(&[vec![3, 4]], 2, &consts).unwrap();
        assert_eq!(cl.len(), 1);
        assert_eq!(cl[0].d(), 1);
    }

    #[test]
    fn partition_property_small() {
        let consts = ClusterConstants::defaults(0.5);
        let lat = LatticePartition::build(2, 200, consts).unwrap();
        for p in lat.sphere_values() {
            let pts = enumerate_sphere(p, 2, false);
            let mut seen = 0usize;
            for c in lat.sphere(p) {
                seen += c.d();
                for (a, m) in c.members.iter().enumerate() {
                    let (id, ai) = lat.locate(m).unwrap();
                    assert_eq!(id.p, p);
                    assert_eq!(ai, a);
                }
            }
            assert_eq!(seen, pts.len(), "sphere {p} not partitioned");
        }
        // fiat orbit cluster
        assert_eq!(lat.lambda1().d(), 4);
    }

    #[test]
    fn d3_partition_invariants_small() {
        let consts = ClusterConstants::defaults(0.5);
        let lat = LatticePartition::build(3, 120, consts).unwrap();
        assert_eq!(lat.lambda1().d(), 8);
        assert!(!lat.sphere(5).is_empty());
    }

    #[test]
    fn bourgain_small_grid_verifies() {
        let mut modes = Vec::new();
        for x in -6..=6i64 {
            for y in -6..=6i64 {
                modes.push(vec![x, y]);
            }
        }
        let cells = bourgain_partition(&modes, 2, 0.2, 1.0).unwrap();
        let total: usize = cells.iter().map(|c| c.members.len()).sum();
        assert_eq!(total, modes.len());
        verify_bourgain_cells(&cells, 2, 0.2, 3.0, 1.0).unwrap();
    }

    #[test]
    fn bourgain_duplicate_rejected() {
        let err = bourgain_partition(&[vec![1, 1], vec![1, 1]], 2, 0.2, 1.0);
        assert!(matches!(err, Err(Error::DuplicateInput(_))));
    }

    #[test]
    fn bourgain_singleton() {
        let cells = bourgain_partition(&[vec![2, 3]], 2, 0.2, 1.0).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].diam, 0.0);
    }

    #[test]
    fn resonant_cells_examples() {
        // m = (1,1), D = 2: no admitted n (n = 1 is the excluded D n = |m|^2)
        let cell = BourgainCell {
            idx: 0,
            p: 2,
            members: vec![vec![1, 1]],
            diam: 0.0,
        };
        let rc = build_resonant_cells(&[cell], 2, 0.05);
        assert!(rc[0].members.is_empty());

        // m = (3,4): admitted n = 13 only (2*13 = 26 != 25, window check)
        let cell = BourgainCell {
            idx: 0,
            p: 25,
            members: vec![vec![3, 4]],
            diam: 0.0,
        };
        let rc = build_resonant_cells(&[cell], 2, 0.05);
        let ns: Vec<i64> = rc[0].members.iter().map(|md| md.n).collect();
        assert_eq!(ns, vec![13]);

        assert!(build_resonant_cells(&[], 2, 0.05).is_empty());
    }
}
