//! End-to-end cluster searches: exact recovery on embedded cascades and
//! Monte Carlo trends on cold random-energy Gibbs measures.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rpclab::cascades::{embed_rost, rpc_overlap_law, sample_rpc, DiscreteLaw, RpcParams};
use rpclab::clustering::{
    clean_clusters, cluster_masses, clustering_stats, greedy_tree_shape, pure_state_variant,
    search_exhaustion, AdmissibleSequence, AdmissibleTol,
};
use rpclab::measure::AtomicMeasure;
use rpclab::spinglass::{gibbs, rem_beta_c, sample_disorder, ModelSpec, ModelVariant};
use rpclab::trees::{enumerate, is_standard_order, TreeShape};

#[test]
fn cascade_search_recovers_subtree_partitions() {
    let params = RpcParams::new(vec![0.3, 0.8], vec![0.4, 0.8]).unwrap();
    let shape = TreeShape::new(vec![6, 6]).unwrap();
    let levels = vec![0.2, 0.6];
    let seq = AdmissibleSequence::new(
        levels.clone(),
        rpc_overlap_law(&params),
        AdmissibleTol::default(),
    )
    .unwrap();

    let mut successes = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(41_000 + seed);
        let cascade = sample_rpc(&params, &shape, &mut rng).unwrap();
        let measure = embed_rost(&cascade, params.q()).unwrap();
        let dust = measure.mass(measure.dust_index());
        let eps = (2.0 * dust).max(0.3);

        let tau = match greedy_tree_shape(cascade.tree(), eps) {
            Ok(t) => t,
            Err(_) => continue,
        };
        let found = search_exhaustion(&measure, &seq, eps, eps, &tau, 50, &mut rng).unwrap();
        let Some((family, _)) = found else { continue };
        successes += 1;

        let dec = clean_clusters(&family, &measure);
        for (vi, v) in enumerate(&tau).iter().enumerate() {
            let center = family.centers()[vi];
            let cluster = &dec.clusters[vi];
            if cluster.is_empty() {
                continue;
            }
            if center == measure.dust_index() {
                // A dust-centered ball holds the dust alone.
                assert_eq!(cluster, &vec![measure.dust_index()]);
                continue;
            }
            // A nonempty leaf-centered cluster is exactly the atom set of
            // the center's depth-|v| subtree.
            let anc = measure.leaf(center).ancestor(v.depth());
            let subtree: Vec<usize> = (0..measure.n_leaves())
                .filter(|&a| measure.leaf(a).ancestor(v.depth()) == anc)
                .collect();
            assert_eq!(cluster, &subtree, "cluster at {v} is not an exact subtree");
        }

        let mut stats_rng = ChaCha8Rng::seed_from_u64(7);
        let stats = clustering_stats(&measure, &dec, &levels, 0.05, 0, &mut stats_rng);
        assert_eq!(stats.f_total, 0.0);
        assert_eq!(stats.g_total, 0.0);

        let order = cluster_masses(&dec);
        assert!(is_standard_order(&order.tree));
        for &mass in order.tree.weights() {
            if mass == 0.0 {
                continue;
            }
            let matches_cascade = cascade
                .tree()
                .weights()
                .iter()
                .any(|&w| (w - mass).abs() <= 1e-9);
            assert!(
                matches_cascade || (mass - dust).abs() <= 1e-9,
                "recovered mass {mass} is neither a subtree mass nor the dust"
            );
        }
    }
    eprintln!("cascade search succeeded in {successes}/100 seeded runs");
    assert!(successes >= 90, "only {successes}/100 searches succeeded");
}

fn cold_rem() -> (ModelSpec, f64) {
    let beta = 2.0 * rem_beta_c();
    (
        ModelSpec {
            variant: ModelVariant::Rem,
            n: 10,
            beta,
        },
        beta,
    )
}

#[test]
fn cold_rem_statistics_stay_small() {
    let (model, beta) = cold_rem();
    let law = DiscreteLaw::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
    let seq = AdmissibleSequence::new(vec![0.5], law, AdmissibleTol::default()).unwrap();

    let hits: usize = (0..200u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(52_000 + i);
            let disorder = sample_disorder(&model, &mut rng).unwrap();
            let gm = gibbs(&disorder, beta);
            // Widen the family until a block passes; concentrated measures
            // pass with very few states.
            for m in 1..=6 {
                let shape = TreeShape::new(vec![m]).unwrap();
                let found =
                    search_exhaustion(&gm, &seq, 0.3, 0.3, &shape, 40, &mut rng).unwrap();
                if let Some((family, _)) = found {
                    let dec = clean_clusters(&family, &gm);
                    let mut stats_rng = ChaCha8Rng::seed_from_u64(1);
                    let stats = clustering_stats(&gm, &dec, &[0.5], 0.1, 0, &mut stats_rng);
                    return usize::from(stats.f_total + stats.g_total < 0.1);
                }
            }
            0
        })
        .sum();
    eprintln!("small-statistics disorders: {hits}/200");
    assert!(hits >= 160, "only {hits}/200 disorders had small statistics");
}

#[test]
fn cold_rem_top_state_concentrates() {
    let (model, beta) = cold_rem();
    let hits: usize = (0..200u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(63_000 + i);
            let disorder = sample_disorder(&model, &mut rng).unwrap();
            let gm = gibbs(&disorder, beta);
            for m in 1..=8 {
                let shape = TreeShape::new(vec![m]).unwrap();
                let report = pure_state_variant(&gm, 1.0, 0.2, 0.25, &shape, 60, &mut rng)
                    .unwrap();
                if let Some(report) = report {
                    let top = &report.leaves[0];
                    let bound = 0.25 * top.mass * top.mass + 0.05;
                    return usize::from(top.deviation <= bound);
                }
            }
            0
        })
        .sum();
    eprintln!("concentrated top states: {hits}/200");
    assert!(hits >= 150, "only {hits}/200 disorders concentrated");
}
