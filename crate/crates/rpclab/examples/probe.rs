// Calibration probe: measures the margins the integration tests will pin.
// Not part of the library; run with `cargo run --release --example probe`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rpclab::cascades::{
    embed_rost, ppp_arrivals, rpc_overlap_law, sample_pd, sample_rpc, DiscreteLaw, RpcParams,
};
use rpclab::clustering::{
    clean_clusters, search_exhaustion, AdmissibleSequence, AdmissibleTol, ClusterDecomposition,
};
use rpclab::diagnostics::{compare_to_rpc, indicator_approx_gap, pd_moment, talagrand_residual, MomentSpec};
use rpclab::measure::{AtomSampler, AtomicMeasure};
use rpclab::numeric::mean_and_se;
use rpclab::rates::{c_theta, pd_concentration_bound, phi_bound, ppp_localization_b};
use rpclab::spinglass::{gibbs, rem_beta_c, sample_disorder, GibbsMeasure, ModelSpec, ModelVariant};
use rpclab::trees::{TreeShape, Vertex, WeightedTree};

fn main() {
    probe_a_rates();
    probe_b_cascade_laws();
    probe_c_rem_pipeline();
}

fn probe_a_rates() {
    println!("== A1: 1/total vs c_theta(0.5) ==");
    let target = c_theta(0.5);
    for seed in 100u64..104 {
        let vals: Vec<f64> = (0..4000u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 1_000_000 + i);
                1.0 / sample_pd(0.5, 400, &mut rng).unwrap().total()
            })
            .collect();
        let (m, se) = mean_and_se(&vals);
        println!(
            "  seed {seed}: est {m:.6} target {target:.6} dev/sigma {:+.2}",
            (m - target) / se
        );
    }

    println!("== A2: tail means vs phi_bound ==");
    for &theta in &[0.25, 0.5, 0.75] {
        for &m in &[10usize, 100] {
            let tails: Vec<f64> = (0..800u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(110_000 + (theta * 100.0) as u64 * 1000 + i);
                    let pd = sample_pd(theta, 600, &mut rng).unwrap();
                    let atoms = pd.atoms();
                    let kept: f64 = atoms.iter().sum();
                    atoms[m..].iter().sum::<f64>() + (1.0 - kept)
                })
                .collect();
            let (est, se) = mean_and_se(&tails);
            let bound = phi_bound(m, theta);
            println!(
                "  theta {theta} m {m}: mean+3se {:.4} bound {bound:.4} margin {:.4}",
                est + 3.0 * se,
                bound - est - 3.0 * se
            );
        }
    }

    println!("== A3: arrival concentration n=20 delta=0.5 ==");
    let hits: u64 = (0..5000u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(120_000 + i);
            let pd = sample_pd(0.5, 20, &mut rng).unwrap();
            u64::from(pd.arrivals()[19] <= 20.0 / 1.5)
        })
        .sum();
    println!(
        "  freq {:.4} bound {:.4}",
        hits as f64 / 5000.0,
        pd_concentration_bound(20, 0.5)
    );

    println!("== A4: localization (eta, m) = (0.1, 3) theta 0.5 ==");
    let b = ppp_localization_b(0.1, 3, 0.5);
    let (lo, hi) = (b.powf(-0.5), b.powf(0.5));
    let hits: u64 = (0..2000u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(130_000 + i);
            let arr = ppp_arrivals(60, &mut rng);
            let count = arr.iter().filter(|&&t| t > lo && t < hi).count();
            u64::from(count <= 3)
        })
        .sum();
    println!("  b {b:.1} window ({lo:.4}, {hi:.2}) freq {} / 2000, eta 0.1", hits);
}

fn probe_b_cascade_laws() {
    println!("== B1: PD second moment over kept atoms, K=500 ==");
    for (j, &theta) in [0.25, 0.5, 0.75].iter().enumerate() {
        let sums: Vec<f64> = (0..4000u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(140_000 + j as u64 * 10_000 + i);
                let pd = sample_pd(theta, 500, &mut rng).unwrap();
                pd.atoms().iter().map(|v| v * v).sum::<f64>()
            })
            .collect();
        let (m, se) = mean_and_se(&sums);
        println!(
            "  theta {theta}: est {m:.5} target {:.5} dev/sigma {:+.2}",
            1.0 - theta,
            (m - (1.0 - theta)) / se
        );
    }

    println!("== B2/B3: embedding pair law + level moments, shape (24,24) ==");
    let params = RpcParams::new(vec![0.3, 0.7], vec![0.4, 0.8]).unwrap();
    let shape = TreeShape::uniform(2, 24).unwrap();
    let law = rpc_overlap_law(&params);
    let results: Vec<([u64; 3], f64, f64, f64)> = (0..300u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(150_000 + i);
            let c = sample_rpc(&params, &shape, &mut rng).unwrap();
            let emb = embed_rost(&c, params.q()).unwrap();
            let sampler = AtomSampler::new(&emb).unwrap();
            let mut counts = [0u64; 3];
            for _ in 0..100 {
                let a = sampler.draw(&mut rng);
                let b = sampler.draw(&mut rng);
                let r = emb.overlap(a, b);
                let k = if r < 0.2 {
                    0
                } else if r < 0.6 {
                    1
                } else {
                    2
                };
                counts[k] += 1;
            }
            // Level moments: depth-1 renormalized by the level sum, depth-2
            // renormalized per parent block.
            let tree = c.tree();
            let l1: Vec<f64> = (1..=24u32)
                .map(|i| tree.get(&Vertex::new(vec![i])).unwrap())
                .collect();
            let s1: f64 = l1.iter().sum();
            let m1: f64 = l1.iter().map(|w| (w / s1).powi(2)).sum();
            let mut m2 = 0.0;
            for p in 1..=24u32 {
                let parent = tree.get(&Vertex::new(vec![p])).unwrap();
                let block: f64 = (1..=24u32)
                    .map(|cdx| (tree.get(&Vertex::new(vec![p, cdx])).unwrap() / parent).powi(2))
                    .sum();
                m2 += block * (parent / s1);
            }
            (counts, m1, m2, c.dust())
        })
        .collect();
    let mut totals = [0u64; 3];
    for (c, _, _, _) in &results {
        for k in 0..3 {
            totals[k] += c[k];
        }
    }
    let n_pairs = 30_000.0;
    for k in 0..3 {
        let freq = totals[k] as f64 / n_pairs;
        let p = law.probs()[k];
        let sigma = (p * (1.0 - p) / n_pairs).sqrt();
        println!(
            "  level {k}: freq {freq:.4} law {p:.4} dev/sigma {:+.2}",
            (freq - p) / sigma
        );
    }
    let m1s: Vec<f64> = results.iter().map(|r| r.1).collect();
    let m2s: Vec<f64> = results.iter().map(|r| r.2).collect();
    let dust: Vec<f64> = results.iter().map(|r| r.3).collect();
    let (m1, se1) = mean_and_se(&m1s);
    let (m2, se2) = mean_and_se(&m2s);
    let (dm, _) = mean_and_se(&dust);
    println!(
        "  level-1 moment {m1:.4} target 0.7 dev/sigma {:+.2}; level-2 {m2:.4} target 0.3 dev/sigma {:+.2}; mean dust {dm:.4}",
        (m1 - 0.7) / se1,
        (m2 - 0.3) / se2
    );

    println!("== B4: dust vs phi_bound, r=1 zeta 0.5 m=100 ==");
    let p1 = RpcParams::new(vec![0.5], vec![0.6]).unwrap();
    let s1 = TreeShape::new(vec![100]).unwrap();
    let dusts: Vec<f64> = (0..300u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(160_000 + i);
            sample_rpc(&p1, &s1, &mut rng).unwrap().dust()
        })
        .collect();
    let (dm, dse) = mean_and_se(&dusts);
    let bound = phi_bound(100, 0.5);
    println!(
        "  mean dust {dm:.4} +3se {:.4} bound {bound:.4}",
        dm + 3.0 * dse
    );
}

struct RemRun {
    masses: Vec<f64>,
    gap: f64,
}

fn cluster_one(gm: &GibbsMeasure, rng: &mut ChaCha8Rng) -> Option<ClusterDecomposition> {
    let law = DiscreteLaw::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
    let seq = AdmissibleSequence::new(vec![0.5], law, AdmissibleTol::default()).unwrap();
    for m in 1..=8 {
        let shape = TreeShape::new(vec![m]).unwrap();
        if let Some((family, _)) = search_exhaustion(gm, &seq, 0.3, 0.3, &shape, 40, rng).unwrap() {
            return Some(clean_clusters(&family, gm));
        }
    }
    None
}

fn probe_c_rem_pipeline() {
    println!("== C: REM N=12 beta=2beta_c pipeline ==");
    let model = ModelSpec {
        variant: ModelVariant::Rem,
        n: 12,
        beta: 2.0 * rem_beta_c(),
    };
    let runs: Vec<Option<RemRun>> = (0..300u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(170_000 + i);
            let disorder = sample_disorder(&model, &mut rng).unwrap();
            let gm = gibbs(&disorder, model.beta);
            let dec = cluster_one(&gm, &mut rng)?;
            let mut masses = dec.masses.clone();
            masses.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let gap = indicator_approx_gap(&gm, &dec, 0.25, 0, &mut rng)
                .unwrap()
                .value;
            Some(RemRun { masses, gap })
        })
        .collect();
    let found: Vec<&RemRun> = runs.iter().flatten().collect();
    println!("  clustered {}/300 disorders", found.len());

    let samples: Vec<Vec<f64>> = found.iter().map(|r| r.masses.clone()).collect();
    let p2 = pd_moment(&samples, 2).unwrap();
    println!(
        "  sum m^2: {:.4} +- {:.4} target 0.5 dev/sigma {:+.2}",
        p2.value,
        p2.stderr,
        (p2.value - 0.5) / p2.stderr
    );
    for comp in [vec![2usize], vec![3], vec![2, 2]] {
        let t = talagrand_residual(&samples, &comp).unwrap();
        println!(
            "  talagrand {comp:?}: {:+.5} +- {:.5} ({:+.2} sigma)",
            t.value,
            t.stderr,
            t.value / t.stderr
        );
    }

    let shape = TreeShape::new(vec![4]).unwrap();
    let trees: Vec<WeightedTree> = found
        .iter()
        .map(|r| {
            WeightedTree::from_fn(shape.clone(), |v| {
                r.masses.get(v.path()[0] as usize - 1).copied().unwrap_or(0.0)
            })
        })
        .collect();
    let params = RpcParams::new(vec![0.5], vec![0.5]).unwrap();
    let moments = vec![
        MomentSpec::vertex(Vertex::new(vec![1]), 1).unwrap(),
        MomentSpec::vertex(Vertex::new(vec![1]), 2).unwrap(),
        MomentSpec::vertex(Vertex::new(vec![2]), 1).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(171_000);
    let gaps = compare_to_rpc(&trees, &params, &shape, &moments, 300, &mut rng).unwrap();
    for g in &gaps {
        println!(
            "  moment {}: emp {:.4} ref {:.4} gap {:+.4} ({:+.2} sigma)",
            g.moment,
            g.empirical.value,
            g.reference.value,
            g.gap.value,
            g.gap.value / g.gap.stderr
        );
    }

    let gap_vals: Vec<f64> = found.iter().map(|r| r.gap).collect();
    let (gm, gse) = mean_and_se(&gap_vals);
    let gmax = gap_vals.iter().cloned().fold(0.0f64, f64::max);
    println!("  indicator gap kappa=0.25: mean {gm:.4} se {gse:.5} max {gmax:.4}");
}
