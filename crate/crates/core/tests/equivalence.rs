//! Cross-validation of the two coefficient routes: the renormalized tree
//! sums and the direct recursion must agree exactly in rational arithmetic,
//! and the full expansion with counterterm insertions must agree as well.

use lindstedt_core::lattice::{ClusterConstants, LatticePartition};
use lindstedt_core::series::{recursion_step, SeriesSolution};
use lindstedt_core::smalldiv::{CutoffProfile, Expo, FrequencyContext};
use lindstedt_core::trees::{
    build_counterterm_table, omega_slots, tree_sum_map, EvalEnv, MSlots, TreeMode,
};
use lindstedt_core::{Rat, Scalar};

fn ctx() -> FrequencyContext<Rat> {
    FrequencyContext::new(
        2,
        Expo::Int(1),
        Rat::ratio(5009, 7500),
        Rat::ratio(1, 1000),
        Rat::ratio(1, 20),
        Rat::ratio(1, 200),
        Rat::ratio(1, 100),
        2,
        4,
        6,
        0.5,
        false,
        CutoffProfile::PiecewiseLinear,
    )
    .unwrap()
}

fn recursion_orders(
    ctx: &FrequencyContext<Rat>,
    lat: &LatticePartition,
    slots: &MSlots<Rat>,
    table: Option<&lindstedt_core::trees::CountertermTable<Rat>>,
    q: &Rat,
    kmax: usize,
) -> Vec<std::collections::BTreeMap<(i64, Vec<i64>), Rat>> {
    let env = EvalEnv::new(ctx, lat, slots, table, q.clone());
    let mut sol = SeriesSolution::seed(lat, q);
    for _ in 1..=kmax {
        let next = recursion_step(&env, &sol).unwrap();
        sol.orders.push(next);
    }
    sol.orders
}

#[test]
fn renormalized_tree_sum_equals_recursion_exactly() {
    let ctx = ctx();
    let lat = LatticePartition::build(2, 120, ClusterConstants::defaults(0.5)).unwrap();
    let slots = MSlots::empty();
    let q = Rat::ratio(2, 5);
    let kmax = 3;

    let env = EvalEnv::new(&ctx, &lat, &slots, None, q.clone());
    let sums = tree_sum_map(&env, kmax, TreeMode::Renormalized).unwrap();
    let rec = recursion_orders(&ctx, &lat, &slots, None, &q, kmax);

    for k in 1..=kmax {
        assert_eq!(
            sums[k], rec[k],
            "order {k}: tree sum and recursion disagree"
        );
        assert!(!rec[k].is_empty(), "order {k} unexpectedly empty");
        // reality and the sign-flip antisymmetry of the coefficients
        for ((n, m), v) in &rec[k] {
            for i in 0..m.len() {
                let mut flipped = m.clone();
                flipped[i] = -flipped[i];
                let w = rec[k].get(&(*n, flipped));
                match w {
                    Some(w) => assert_eq!(w.clone(), -v.clone()),
                    None => assert!(v.is_zero()),
                }
            }
        }
    }
}

#[test]
fn full_tree_sum_with_counterterms_equals_recursion() {
    let ctx = ctx();
    let lat = LatticePartition::build(2, 120, ClusterConstants::defaults(0.5)).unwrap();
    let slots = MSlots::empty();
    let q = Rat::ratio(2, 5);
    let kmax = 3;

    // build tables over all Omega slots the supports can reach
    let env0 = EvalEnv::new(&ctx, &lat, &slots, None, q.clone());
    let omega = omega_slots(&ctx, &lat, 2 * kmax as i64 + 1);
    let table = build_counterterm_table(&env0, kmax - 1, &omega).unwrap();

    let env = EvalEnv::new(&ctx, &lat, &slots, Some(&table), q.clone());
    let sums = tree_sum_map(&env, kmax, TreeMode::Full).unwrap();
    let rec = recursion_orders(&ctx, &lat, &slots, Some(&table), &q, kmax);
    for k in 1..=kmax {
        assert_eq!(sums[k], rec[k], "order {k}: full expansion disagrees");
    }
}

#[test]
fn renormalized_equals_full_under_the_counterterm_choice() {
    // Lemma "u = sum over renormalized trees provided L is the family sum":
    // both enumerations must produce identical coefficient maps.
    let ctx = ctx();
    let lat = LatticePartition::build(2, 120, ClusterConstants::defaults(0.5)).unwrap();
    let slots = MSlots::empty();
    let q = Rat::ratio(1, 3);
    let kmax = 3;
    let env0 = EvalEnv::new(&ctx, &lat, &slots, None, q.clone());
    let omega = omega_slots(&ctx, &lat, 2 * kmax as i64 + 1);
    let table = build_counterterm_table(&env0, kmax - 1, &omega).unwrap();

    let env_full = EvalEnv::new(&ctx, &lat, &slots, Some(&table), q.clone());
    let full = tree_sum_map(&env_full, kmax, TreeMode::Full).unwrap();
    let env_ren = EvalEnv::new(&ctx, &lat, &slots, None, q.clone());
    let ren = tree_sum_map(&env_ren, kmax, TreeMode::Renormalized).unwrap();
    for k in 1..=kmax {
        assert_eq!(full[k], ren[k], "order {k}");
    }
}
