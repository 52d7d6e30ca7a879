//! Gaussian energy landscapes on the hypercube at exactly enumerable sizes:
//! the random energy model, its hierarchical refinement, and mixed p-body
//! interactions, with Gibbs measures, replica overlap statistics, and
//! moment-interchange gap estimates.
//!
//! Configurations are indices into `0..2^N`; bit `i` set means spin `i` is
//! down. Everything enumerates all `2^N` states, so sizes are capped at
//! [`N_MAX`] and operations refuse larger systems rather than switching to
//! approximate algorithms.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascades::{CascadeError, OverlapMatrix};
use crate::measure::{AtomSampler, AtomicMeasure, MeasureError};
use crate::numeric::{logsumexp, mean, mean_and_se, walsh_hadamard};

/// Exact-enumeration cap on the spin count.
pub const N_MAX: usize = 14;

/// Interaction orders above this overflow the exact integer parity counts.
const P_MAX: u32 = 20;

/// Freezing point of the random energy model, sqrt(2 ln 2).
pub fn rem_beta_c() -> f64 {
    (2.0 * std::f64::consts::LN_2).sqrt()
}

#[derive(Debug, Error)]
pub enum SpinError {
    #[error("model: {0}")]
    BadModel(String),
    #[error("{n} spins exceeds the exact-enumeration cap {cap}")]
    TooLarge { n: usize, cap: usize },
    #[error("configurations have lengths {a} and {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("spin vectors must be nonempty with entries +1 or -1")]
    BadSpins,
    #[error("{name} = {value} is outside its allowed range")]
    BadParameter { name: &'static str, value: f64 },
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Matrix(#[from] CascadeError),
}

/// An energy model on {-1,+1}^N together with its inverse temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub variant: ModelVariant,
    #[serde(rename = "N")]
    pub n: usize,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum ModelVariant {
    /// Independent energy at every configuration.
    Rem,
    /// Spins split into blocks; energies accumulate along shared prefixes,
    /// block j carrying variance share zeta[j+1] - zeta[j].
    Grem { blocks: Vec<usize>, zeta: Vec<f64> },
    /// Sum of p-body interactions, coefficient beta_p per order.
    Pspin {
        #[serde(with = "order_keys")]
        betas: BTreeMap<u32, f64>,
    },
}

/// JSON object keys are strings; flattened enums skip the usual integer-key
/// coercion, so convert explicitly in both directions.
mod order_keys {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<u32, f64>, s: S) -> Result<S::Ok, S::Error> {
        let text: BTreeMap<String, f64> = m.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        text.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u32, f64>, D::Error> {
        let text = BTreeMap::<String, f64>::deserialize(d)?;
        text.into_iter()
            .map(|(k, v)| {
                k.parse::<u32>()
                    .map(|p| (p, v))
                    .map_err(|_| D::Error::custom(format!("interaction order {k:?} is not an integer")))
            })
            .collect()
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), SpinError> {
        if self.n == 0 {
            return Err(SpinError::BadModel("need at least one spin".into()));
        }
        if self.n > N_MAX {
            return Err(SpinError::TooLarge {
                n: self.n,
                cap: N_MAX,
            });
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(SpinError::BadParameter {
                name: "beta",
                value: self.beta,
            });
        }
        match &self.variant {
            ModelVariant::Rem => Ok(()),
            ModelVariant::Grem { blocks, zeta } => {
                if blocks.is_empty() || blocks.iter().any(|&b| b == 0) {
                    return Err(SpinError::BadModel("blocks must be nonempty".into()));
                }
                if blocks.iter().sum::<usize>() != self.n {
                    return Err(SpinError::BadModel(format!(
                        "blocks sum to {}, expected {}",
                        blocks.iter().sum::<usize>(),
                        self.n
                    )));
                }
                let ok_len = zeta.len() == blocks.len() + 1;
                let ok_ends = ok_len && zeta[0] == 0.0 && *zeta.last().unwrap() == 1.0;
                let ok_order = ok_ends && zeta.windows(2).all(|p| p[0] < p[1]);
                if !ok_order {
                    return Err(SpinError::BadModel(
                        "levels must rise strictly from 0 to 1, one step per block".into(),
                    ));
                }
                Ok(())
            }
            ModelVariant::Pspin { betas } => {
                if betas.is_empty() || betas.values().all(|b| *b == 0.0) {
                    return Err(SpinError::BadModel(
                        "need at least one nonzero interaction order".into(),
                    ));
                }
                if betas.values().any(|b| !b.is_finite()) {
                    return Err(SpinError::BadModel("coefficients must be finite".into()));
                }
                if let Some(&p) = betas.keys().find(|&&p| p == 0 || p > P_MAX) {
                    return Err(SpinError::BadModel(format!(
                        "interaction order {p} outside 1..={P_MAX}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn configurations(&self) -> usize {
        1 << self.n
    }
}

/// Spin vector of a configuration index; bit i set means spin i is -1.
pub fn spins(index: usize, n: usize) -> Vec<i8> {
    (0..n)
        .map(|i| if index >> i & 1 == 0 { 1 } else { -1 })
        .collect()
}

/// Configuration index of an explicit spin vector.
pub fn config_index(s: &[i8]) -> Result<usize, SpinError> {
    if s.is_empty() || s.len() > N_MAX {
        return Err(SpinError::BadSpins);
    }
    s.iter()
        .enumerate()
        .try_fold(0usize, |acc, (i, &v)| match v {
            1 => Ok(acc),
            -1 => Ok(acc | 1 << i),
            _ => Err(SpinError::BadSpins),
        })
}

/// Normalized inner product of two spin vectors.
pub fn overlap(s1: &[i8], s2: &[i8]) -> Result<f64, SpinError> {
    if s1.len() != s2.len() {
        return Err(SpinError::LengthMismatch {
            a: s1.len(),
            b: s2.len(),
        });
    }
    if s1.is_empty() {
        return Err(SpinError::BadSpins);
    }
    let mut dot = 0i64;
    for (&a, &b) in s1.iter().zip(s2) {
        if a.abs() != 1 || b.abs() != 1 {
            return Err(SpinError::BadSpins);
        }
        dot += (a as i64) * (b as i64);
    }
    Ok(dot as f64 / s1.len() as f64)
}

/// Overlap of two configuration indices on n spins.
pub fn overlap_indexed(a: usize, b: usize, n: usize) -> f64 {
    let differing = (a ^ b).count_ones() as f64;
    (n as f64 - 2.0 * differing) / n as f64
}

/// E H(a)H(b) under the model, evaluated exactly.
pub fn covariance(model: &ModelSpec, a: usize, b: usize) -> f64 {
    let size = 1usize << model.n;
    assert!(a < size && b < size, "configuration index out of range");
    let nf = model.n as f64;
    match &model.variant {
        ModelVariant::Rem => {
            if a == b {
                nf
            } else {
                0.0
            }
        }
        ModelVariant::Grem { blocks, zeta } => {
            // Prefix agreement is nested, so the variance shares telescope
            // to the level of the deepest agreeing block.
            let differ = a ^ b;
            let mut agree = 0.0;
            let mut cum = 0;
            for (j, &width) in blocks.iter().enumerate() {
                cum += width;
                if differ & ((1 << cum) - 1) != 0 {
                    break;
                }
                agree = zeta[j + 1];
            }
            nf * agree
        }
        ModelVariant::Pspin { betas } => {
            let r = overlap_indexed(a, b, model.n);
            nf * betas
                .iter()
                .map(|(&p, &bp)| bp * bp * r.powi(p as i32))
                .sum::<f64>()
        }
    }
}

/// Dense covariance target, row-major over configuration pairs. Quadratic
/// in 2^N, so capped at 8 spins.
pub fn covariance_matrix(model: &ModelSpec) -> Result<Vec<f64>, SpinError> {
    model.validate()?;
    if model.n > 8 {
        return Err(SpinError::TooLarge { n: model.n, cap: 8 });
    }
    let size = 1usize << model.n;
    Ok((0..size * size)
        .map(|k| covariance(model, k / size, k % size))
        .collect())
}

/// One draw of the Gaussian energy landscape.
#[derive(Debug, Clone)]
pub struct DisorderRealization {
    pub model: ModelSpec,
    /// Energy per configuration index, length 2^N.
    pub energies: Vec<f64>,
}

pub fn sample_disorder(
    model: &ModelSpec,
    rng: &mut impl Rng,
) -> Result<DisorderRealization, SpinError> {
    model.validate()?;
    let n = model.n;
    let size = 1usize << n;
    let energies = match &model.variant {
        ModelVariant::Rem => {
            let sd = (n as f64).sqrt();
            (0..size)
                .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                .collect()
        }
        ModelVariant::Grem { blocks, zeta } => {
            let mut h = vec![0.0; size];
            let mut cum = 0;
            for (j, &width) in blocks.iter().enumerate() {
                cum += width;
                let scale = (n as f64 * (zeta[j + 1] - zeta[j])).sqrt();
                let mask = (1usize << cum) - 1;
                let level: Vec<f64> = (0..1usize << cum)
                    .map(|_| rng.sample(StandardNormal))
                    .collect();
                for (s, e) in h.iter_mut().enumerate() {
                    *e += scale * level[s & mask];
                }
            }
            h
        }
        ModelVariant::Pspin { betas } => {
            // Grouping the monomial coefficients by the parity class of
            // their index multiset gives a character expansion with
            // independent Gaussian coefficients; one transform then
            // evaluates every configuration at once.
            let sd: Vec<f64> = walsh_variances(n, betas).iter().map(|v| v.sqrt()).collect();
            let mut coeffs: Vec<f64> = (0..size)
                .map(|set: usize| {
                    sd[set.count_ones() as usize] * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            walsh_hadamard(&mut coeffs);
            coeffs
        }
    };
    Ok(DisorderRealization {
        model: model.clone(),
        energies,
    })
}

/// Variance of the character coefficient on each parity-class size,
/// summed over interaction orders.
fn walsh_variances(n: usize, betas: &BTreeMap<u32, f64>) -> Vec<f64> {
    (0..=n)
        .map(|s| {
            betas
                .iter()
                .map(|(&p, &bp)| {
                    bp * bp * (n as f64).powi(1 - p as i32) * tuple_parity_count(n, p, s) as f64
                })
                .sum()
        })
        .collect()
}

/// Number of length-p index tuples over n sites whose odd-multiplicity set
/// has size s, via a character sum; exact integers for p <= P_MAX.
fn tuple_parity_count(n: usize, p: u32, s: usize) -> i128 {
    let mut total: i128 = 0;
    for j in 0..=s {
        let sign = if (s - j) % 2 == 0 { 1 } else { -1 };
        for l in 0..=(n - s) {
            let field = 2 * (j + l) as i128 - n as i128;
            total += sign * choose(s, j) * choose(n - s, l) * field.pow(p);
        }
    }
    debug_assert_eq!(total & ((1i128 << n) - 1), 0);
    total >> n
}

fn choose(n: usize, k: usize) -> i128 {
    let mut acc: i128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as i128 / (i + 1) as i128;
    }
    acc
}

/// Boltzmann weights of one realization at inverse temperature beta.
///
/// The Boltzmann factor is e^{-beta H}; the energies are centered Gaussians,
/// so negating them leaves the ensemble law unchanged.
#[derive(Debug, Clone)]
pub struct GibbsMeasure {
    pub model: ModelSpec,
    pub beta: f64,
    /// Normalized weight per configuration index.
    pub weights: Vec<f64>,
    /// Log of the partition function; kept in log form to survive large beta.
    pub ln_z: f64,
}

impl AtomicMeasure for GibbsMeasure {
    fn n_atoms(&self) -> usize {
        self.weights.len()
    }

    fn mass(&self, i: usize) -> f64 {
        self.weights[i]
    }

    fn overlap(&self, i: usize, j: usize) -> f64 {
        overlap_indexed(i, j, self.model.n)
    }
}

fn ln_partition(energies: &[f64], beta: f64) -> f64 {
    let scaled: Vec<f64> = energies.iter().map(|h| -beta * h).collect();
    logsumexp(&scaled)
}

pub fn gibbs(disorder: &DisorderRealization, beta: f64) -> GibbsMeasure {
    assert!(
        beta >= 0.0 && beta.is_finite(),
        "inverse temperature must be finite and nonnegative"
    );
    let scaled: Vec<f64> = disorder.energies.iter().map(|h| -beta * h).collect();
    let shift = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scaled.iter().map(|x| (x - shift).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    GibbsMeasure {
        model: disorder.model.clone(),
        beta,
        weights,
        ln_z: shift + total.ln(),
    }
}

/// Normalized log partition function of one realization.
pub fn free_energy(disorder: &DisorderRealization, beta: f64) -> f64 {
    assert!(
        beta >= 0.0 && beta.is_finite(),
        "inverse temperature must be finite and nonnegative"
    );
    ln_partition(&disorder.energies, beta) / disorder.model.n as f64
}

/// Mass the two-replica product measure puts on each XOR class: entry t
/// sums G(a)G(b) over pairs with a ^ b = t. The XOR self-convolution is a
/// squared transform, so this costs O(N 2^N) instead of O(4^N).
pub fn exact_pair_law(measure: &GibbsMeasure) -> Vec<f64> {
    let mut f = measure.weights.clone();
    walsh_hadamard(&mut f);
    for x in f.iter_mut() {
        *x *= *x;
    }
    walsh_hadamard(&mut f);
    let scale = 1.0 / measure.weights.len() as f64;
    for x in f.iter_mut() {
        *x *= scale;
    }
    f
}

/// Disorder-averaged law of the overlap between two independent replicas.
#[derive(Debug, Clone, Serialize)]
pub struct OverlapHistogram {
    /// bins + 1 edges spanning [-1, 1].
    pub edges: Vec<f64>,
    /// Mean bin mass across disorder realizations.
    pub mass: Vec<f64>,
    /// Standard error of each bin mass across realizations.
    pub stderr: Vec<f64>,
    /// "exact" pair summation or "mc" replica sampling.
    pub mode: String,
}

fn bin_of(r: f64, bins: usize) -> usize {
    (((r + 1.0) * 0.5 * bins as f64).floor() as usize).min(bins - 1)
}

/// Estimates the two-replica overlap law averaged over disorder.
///
/// `n_pairs = None` computes each realization's pair law exactly by
/// summation; `Some(k)` draws k replica pairs per realization instead.
/// Standard errors are across realizations, which are independent jobs on
/// seeded streams.
pub fn empirical_overlap_law(
    model: &ModelSpec,
    beta: f64,
    n_disorder: usize,
    n_pairs: Option<usize>,
    bins: usize,
    rng: &mut impl Rng,
) -> Result<OverlapHistogram, SpinError> {
    model.validate()?;
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(SpinError::BadParameter {
            name: "beta",
            value: beta,
        });
    }
    if bins == 0 {
        return Err(SpinError::BadParameter {
            name: "bins",
            value: 0.0,
        });
    }
    if n_disorder == 0 {
        return Err(SpinError::BadParameter {
            name: "n_disorder",
            value: 0.0,
        });
    }
    if n_pairs == Some(0) {
        return Err(SpinError::BadParameter {
            name: "n_pairs",
            value: 0.0,
        });
    }

    let seeds: Vec<u64> = (0..n_disorder).map(|_| rng.gen()).collect();
    let per_disorder: Vec<Vec<f64>> = seeds
        .into_par_iter()
        .map(|seed| {
            let mut job = ChaCha8Rng::seed_from_u64(seed);
            let disorder = sample_disorder(model, &mut job)?;
            let g = gibbs(&disorder, beta);
            let mut hist = vec![0.0; bins];
            match n_pairs {
                None => {
                    for (t, q) in exact_pair_law(&g).iter().enumerate() {
                        hist[bin_of(overlap_indexed(t, 0, model.n), bins)] += q;
                    }
                }
                Some(pairs) => {
                    let sampler = AtomSampler::new(&g)?;
                    let w = 1.0 / pairs as f64;
                    for _ in 0..pairs {
                        let a = sampler.draw(&mut job);
                        let b = sampler.draw(&mut job);
                        hist[bin_of(overlap_indexed(a, b, model.n), bins)] += w;
                    }
                }
            }
            Ok(hist)
        })
        .collect::<Result<_, SpinError>>()?;

    let mut mass = vec![0.0; bins];
    let mut stderr = vec![0.0; bins];
    let mut column = vec![0.0; n_disorder];
    for b in 0..bins {
        for (c, row) in column.iter_mut().zip(&per_disorder) {
            *c = row[b];
        }
        let (m, se) = mean_and_se(&column);
        mass[b] = m;
        stderr[b] = se;
    }
    let edges = (0..=bins)
        .map(|k| -1.0 + 2.0 * k as f64 / bins as f64)
        .collect();
    Ok(OverlapHistogram {
        edges,
        mass,
        stderr,
        mode: if n_pairs.is_none() { "exact" } else { "mc" }.to_string(),
    })
}

/// n independent configuration draws by Gibbs weight, as an overlap matrix.
pub fn sample_replicas(
    measure: &GibbsMeasure,
    n: usize,
    rng: &mut impl Rng,
) -> Result<OverlapMatrix, SpinError> {
    if n == 0 {
        return Err(SpinError::BadParameter {
            name: "n",
            value: 0.0,
        });
    }
    let sampler = AtomSampler::new(measure)?;
    let configs: Vec<usize> = (0..n).map(|_| sampler.draw(rng)).collect();
    Ok(OverlapMatrix::from_fn(n, |i, j| {
        overlap_indexed(configs[i], configs[j], measure.model.n)
    })?)
}

/// Gap between the a-th moment proxy (1/(aN)) log E[Z^a] and the quenched
/// mean (1/N) E[log Z], estimated over fresh disorder. Returns the gap and
/// a delta-method standard error for the moment term. For a < 0 the proxy
/// sits below the quenched mean, so the gap is nonpositive up to noise and
/// closes as a -> 0.
pub fn dfm_gap(
    model: &ModelSpec,
    beta: f64,
    a: f64,
    n_disorder: usize,
    rng: &mut impl Rng,
) -> Result<(f64, f64), SpinError> {
    model.validate()?;
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(SpinError::BadParameter {
            name: "beta",
            value: beta,
        });
    }
    let seeds: Vec<u64> = (0..n_disorder).map(|_| rng.gen()).collect();
    let ln_zs: Vec<f64> = seeds
        .into_par_iter()
        .map(|seed| {
            let mut job = ChaCha8Rng::seed_from_u64(seed);
            let disorder = sample_disorder(model, &mut job)?;
            Ok(ln_partition(&disorder.energies, beta))
        })
        .collect::<Result<_, SpinError>>()?;
    dfm_gap_from_ln_z(&ln_zs, a, model.n)
}

/// Same gap from precomputed log partition values.
pub fn dfm_gap_from_ln_z(ln_zs: &[f64], a: f64, n_spins: usize) -> Result<(f64, f64), SpinError> {
    if !(a < 0.0) || !a.is_finite() {
        return Err(SpinError::BadParameter { name: "a", value: a });
    }
    if ln_zs.len() < 2 {
        return Err(SpinError::BadParameter {
            name: "n_disorder",
            value: ln_zs.len() as f64,
        });
    }
    let spread_lo = ln_zs.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread_hi = ln_zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if spread_lo == spread_hi {
        // Deterministic Z: both terms coincide analytically, so report the
        // cancellation exactly instead of leaking mean-rounding slop.
        return Ok((0.0, 0.0));
    }
    let nf = n_spins as f64;
    let mean_ln = mean(ln_zs);
    // Centering at the mean keeps the exponent spread small; the extra
    // max-shift bounds every exponential by one.
    let centered: Vec<f64> = ln_zs.iter().map(|lz| a * (lz - mean_ln)).collect();
    let peak = centered.iter().cloned().fold(0.0f64, f64::max);
    let ratios: Vec<f64> = centered.iter().map(|c| (c - peak).exp()).collect();
    let (mean_ratio, se_ratio) = mean_and_se(&ratios);
    let gap = (peak + mean_ratio.ln()) / (a * nf);
    let se = se_ratio / mean_ratio / (a * nf).abs();
    Ok((gap, se))
}

/// Integer block sizes realizing target level fractions of n spins: rounds
/// to whole spins with every block at least one, spreading the residue by
/// largest remainder. Returns the blocks and the fractions actually
/// realized, so callers can record the rounding.
pub fn grem_blocks(n: usize, fractions: &[f64]) -> Result<(Vec<usize>, Vec<f64>), SpinError> {
    if fractions.is_empty() || fractions.len() > n {
        return Err(SpinError::BadModel(format!(
            "{} level fractions cannot tile {n} spins",
            fractions.len()
        )));
    }
    if fractions.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
        return Err(SpinError::BadModel("level fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SpinError::BadModel(format!(
            "level fractions sum to {total}, expected 1"
        )));
    }
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut blocks: Vec<usize> = raw.iter().map(|r| (r.floor() as usize).max(1)).collect();
    loop {
        let sum: usize = blocks.iter().sum();
        if sum == n {
            break;
        }
        if sum < n {
            let mut pick = 0;
            for i in 1..blocks.len() {
                if raw[i] - blocks[i] as f64 > raw[pick] - blocks[pick] as f64 {
                    pick = i;
                }
            }
            blocks[pick] += 1;
        } else {
            // Some block exceeds one spin whenever the total overshoots,
            // because there are at most n blocks.
            let mut pick = None;
            for i in 0..blocks.len() {
                if blocks[i] <= 1 {
                    continue;
                }
                match pick {
                    None => pick = Some(i),
                    Some(p) => {
                        if raw[i] - (blocks[i] as f64) < raw[p] - blocks[p] as f64 {
                            pick = Some(i);
                        }
                    }
                }
            }
            blocks[pick.expect("overshoot implies a shrinkable block")] -= 1;
        }
    }
    let realized = blocks.iter().map(|b| *b as f64 / n as f64).collect();
    Ok((blocks, realized))
}
