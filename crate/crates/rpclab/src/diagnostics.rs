//! Statistical checks of the replica identities on any replica source.
//!
//! A source is a random measure together with an overlap oracle: a truncated
//! cascade embedding, a Gibbs measure with fresh disorder per realization, or
//! a fixed measure. Every estimator here runs the same double average: draw
//! realizations of the measure, draw replicas inside each realization, and
//! average both levels. All terms of an identity are computed from the same
//! replica draws, so shared randomness cancels instead of inflating the
//! error; in the degenerate cases the defect vanishes identically rather
//! than merely in expectation.
//!
//! The checks cover the Ghirlanda-Guerra residual, ultrametric triangle
//! violations, negative-overlap mass, Poisson-Dirichlet moments and the
//! moment recursion they satisfy, the piecewise-linear overlap surrogate for
//! the same-cluster indicator, and joint-moment comparison of empirical
//! cluster masses against freshly sampled cascades.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::cascades::{embed_rost, sample_rpc, CascadeError, RostEmbedding, RpcParams};
use crate::clustering::{ClusterDecomposition, EXACT_SUMMATION_CAP};
use crate::measure::{validate_measure, AtomSampler, AtomicMeasure, MeasureError};
use crate::numeric::{column_means, delta_method_se, mean_and_se};
use crate::spinglass::{gibbs, sample_disorder, GibbsMeasure, ModelSpec, ModelVariant, SpinError};
use crate::trees::{enumerate, TreeShape, Vertex, WeightedTree};

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("{name} = {value} is outside its admissible range")]
    BadParameter { name: &'static str, value: f64 },
    #[error("test function touches replica {index} but only {n} enter the identity")]
    BadReplicaIndex { index: usize, n: usize },
    #[error("composition must be nonempty with every part at least 2, got {0:?}")]
    BadComposition(Vec<usize>),
    #[error("moment spec needs distinct non-root vertices with positive exponents")]
    BadMoment,
    #[error("moment vertex {0} lies outside the reference shape")]
    VertexOutsideShape(String),
    #[error("partition sample {index} has a negative part or mass above one")]
    BadPartition { index: usize },
    #[error("no samples supplied")]
    NoSamples,
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Spin(#[from] SpinError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// A Monte Carlo estimate and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimateWithError {
    pub value: f64,
    pub stderr: f64,
    /// Total draws behind the estimate; 0 flags an exact summation.
    pub n_samples: u64,
}

/// Effort for the two averaging levels: `disorders` independent realizations
/// of the random measure and `replicas` replica draws inside each. The
/// reported error is measured across realizations; with a single realization
/// it is measured across the replica draws instead, which is the only level
/// that varies there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Budget {
    pub disorders: usize,
    pub replicas: usize,
}

impl Budget {
    pub fn new(disorders: usize, replicas: usize) -> Self {
        Budget {
            disorders,
            replicas,
        }
    }

    pub fn total(&self) -> u64 {
        self.disorders as u64 * self.replicas as u64
    }
}

fn check_budget(b: Budget) -> Result<(), DiagError> {
    if b.disorders == 0 {
        return Err(DiagError::BadParameter {
            name: "budget.disorders",
            value: 0.0,
        });
    }
    if b.replicas == 0 {
        return Err(DiagError::BadParameter {
            name: "budget.replicas",
            value: 0.0,
        });
    }
    Ok(())
}

fn check_pos(name: &'static str, value: f64) -> Result<(), DiagError> {
    if !value.is_finite() || value <= 0.0 {
        return Err(DiagError::BadParameter { name, value });
    }
    Ok(())
}

/// A random measure that can be realized afresh for the outer average of
/// E<.>, exposing atoms and overlaps for the inner one.
pub trait ReplicaSource: Sync {
    type Measure: AtomicMeasure;

    /// Draws one realization of the measure.
    fn realize<R: Rng>(&self, rng: &mut R) -> Result<Self::Measure, DiagError>;

    /// Short name for report records.
    fn label(&self) -> String;
}

/// Truncated cascade embeddings, one fresh cascade per realization.
pub struct RpcSource {
    params: RpcParams,
    shape: TreeShape,
}

impl RpcSource {
    pub fn new(params: RpcParams, shape: TreeShape) -> Result<Self, DiagError> {
        if shape.depth() != params.depth() {
            return Err(DiagError::Cascade(CascadeError::DepthMismatch {
                shape: shape.depth(),
                params: params.depth(),
            }));
        }
        Ok(RpcSource { params, shape })
    }

    pub fn params(&self) -> &RpcParams {
        &self.params
    }

    pub fn shape(&self) -> &TreeShape {
        &self.shape
    }
}

impl ReplicaSource for RpcSource {
    type Measure = RostEmbedding;

    fn realize<R: Rng>(&self, rng: &mut R) -> Result<RostEmbedding, DiagError> {
        let weights = sample_rpc(&self.params, &self.shape, rng)?;
        Ok(embed_rost(&weights, self.params.q())?)
    }

    fn label(&self) -> String {
        format!(
            "rpc r={} m={:?}",
            self.params.depth(),
            self.shape.branching()
        )
    }
}

/// Gibbs measures of a spin-glass model, one disorder draw per realization.
pub struct GibbsSource {
    model: ModelSpec,
}

impl GibbsSource {
    pub fn new(model: ModelSpec) -> Result<Self, DiagError> {
        model.validate()?;
        Ok(GibbsSource { model })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }
}

impl ReplicaSource for GibbsSource {
    type Measure = GibbsMeasure;

    fn realize<R: Rng>(&self, rng: &mut R) -> Result<GibbsMeasure, DiagError> {
        let disorder = sample_disorder(&self.model, rng)?;
        Ok(gibbs(&disorder, self.model.beta))
    }

    fn label(&self) -> String {
        let tag = match self.model.variant {
            ModelVariant::Rem => "rem",
            ModelVariant::Grem { .. } => "grem",
            ModelVariant::Pspin { .. } => "pspin",
        };
        format!("{tag} N={} beta={}", self.model.n, self.model.beta)
    }
}

/// A fixed measure: realizations are identical, only the replicas vary.
pub struct FixedSource<M: AtomicMeasure + Clone + Sync> {
    pub measure: M,
}

impl<M: AtomicMeasure + Clone + Sync> FixedSource<M> {
    pub fn new(measure: M) -> Result<Self, DiagError> {
        validate_measure(&measure, 1e-9)?;
        Ok(FixedSource { measure })
    }
}

impl<M: AtomicMeasure + Clone + Sync> ReplicaSource for FixedSource<M> {
    type Measure = M;

    fn realize<R: Rng>(&self, _rng: &mut R) -> Result<M, DiagError> {
        Ok(self.measure.clone())
    }

    fn label(&self) -> String {
        "fixed".into()
    }
}

/// Bounded test function of the replica overlap array: products of threshold
/// indicators and monomials in single entries. This family is closed under
/// the identities' usage and keeps evaluation cheap.
#[derive(Debug, Clone)]
pub enum OverlapTestFn {
    One,
    /// 1{R_ij >= level}
    Threshold { i: usize, j: usize, level: f64 },
    /// R_ij^power
    Monomial { i: usize, j: usize, power: u32 },
    Product(Vec<OverlapTestFn>),
}

impl OverlapTestFn {
    fn max_replica(&self) -> usize {
        match self {
            OverlapTestFn::One => 0,
            OverlapTestFn::Threshold { i, j, .. } | OverlapTestFn::Monomial { i, j, .. } => {
                *i.max(j) + 1
            }
            OverlapTestFn::Product(fs) => fs.iter().map(|f| f.max_replica()).max().unwrap_or(0),
        }
    }

    /// Errors when the function reads replicas beyond the first `n`.
    pub fn check_arity(&self, n: usize) -> Result<(), DiagError> {
        let used = self.max_replica();
        if used > n {
            return Err(DiagError::BadReplicaIndex { index: used - 1, n });
        }
        Ok(())
    }

    fn eval<G: Fn(usize, usize) -> f64>(&self, g: &G) -> f64 {
        match self {
            OverlapTestFn::One => 1.0,
            OverlapTestFn::Threshold { i, j, level } => {
                if g(*i, *j) >= *level {
                    1.0
                } else {
                    0.0
                }
            }
            OverlapTestFn::Monomial { i, j, power } => g(*i, *j).powi(*power as i32),
            OverlapTestFn::Product(fs) => fs.iter().map(|f| f.eval(g)).product(),
        }
    }
}

/// The continuous factor psi(x) = x^power, power at most 6.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Psi {
    power: u32,
}

impl Psi {
    pub const MAX_POWER: u32 = 6;

    pub fn new(power: u32) -> Result<Self, DiagError> {
        if power > Self::MAX_POWER {
            return Err(DiagError::BadParameter {
                name: "psi power",
                value: power as f64,
            });
        }
        Ok(Psi { power })
    }

    pub fn identity() -> Self {
        Psi { power: 1 }
    }

    pub fn power(&self) -> u32 {
        self.power
    }

    pub fn eval(&self, x: f64) -> f64 {
        x.powi(self.power as i32)
    }
}

/// Per-unit statistic vectors for the double average: one mean vector per
/// realization, or the raw per-draw vectors when there is only one
/// realization. Seeds are pre-drawn sequentially and realizations evaluated
/// in parallel, so the result does not depend on the worker count.
fn unit_vectors<S, F>(
    src: &S,
    budget: Budget,
    dim: usize,
    rng: &mut impl Rng,
    draw_stat: F,
) -> Result<Vec<Vec<f64>>, DiagError>
where
    S: ReplicaSource,
    F: Fn(&S::Measure, &AtomSampler, &mut ChaCha8Rng, &mut [f64]) + Sync,
{
    check_budget(budget)?;
    let seeds: Vec<u64> = (0..budget.disorders).map(|_| rng.gen()).collect();
    let keep_draws = budget.disorders == 1;
    let groups: Result<Vec<Vec<Vec<f64>>>, DiagError> = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let measure = src.realize(&mut rng)?;
            let sampler = AtomSampler::new(&measure)?;
            let mut buf = vec![0.0; dim];
            if keep_draws {
                let mut draws = Vec::with_capacity(budget.replicas);
                for _ in 0..budget.replicas {
                    draw_stat(&measure, &sampler, &mut rng, &mut buf);
                    draws.push(buf.clone());
                }
                Ok(draws)
            } else {
                let mut sums = vec![0.0; dim];
                for _ in 0..budget.replicas {
                    draw_stat(&measure, &sampler, &mut rng, &mut buf);
                    for (s, b) in sums.iter_mut().zip(&buf) {
                        *s += *b;
                    }
                }
                for s in &mut sums {
                    *s /= budget.replicas as f64;
                }
                Ok(vec![sums])
            }
        })
        .collect();
    let mut units = Vec::with_capacity(if keep_draws {
        budget.replicas
    } else {
        budget.disorders
    });
    for group in groups? {
        units.extend(group);
    }
    Ok(units)
}

fn scalar_estimate(units: &[Vec<f64>], total: u64) -> EstimateWithError {
    let means = column_means(units);
    EstimateWithError {
        value: means[0],
        stderr: delta_method_se(units, &means, &[1.0]),
        n_samples: total,
    }
}

/// Absolute defect of the n-replica identity
///
///   n E<f(R^n) psi(R_{1,n+1})>
///     = E<f(R^n)> E<psi(R_{12})> + sum_{k=2}^n E<f(R^n) psi(R_{1k})>
///
/// estimated with shared replica draws. Each draw produces n+1 replicas; the
/// n-scaled fresh-pair term and the k-sum are folded into one statistic by
/// re-evaluating f on the n-replica minors that swap replica k with the
/// fresh one, so their common randomness cancels term by term. With f
/// constant the folded statistic equals psi of the fresh pair identically
/// and the reported defect is exactly zero at any budget, which is the
/// algebraic content of the identity at n = 1 replica function.
pub fn gg_residual<S: ReplicaSource>(
    src: &S,
    f: &OverlapTestFn,
    psi: Psi,
    n: usize,
    budget: Budget,
    rng: &mut impl Rng,
) -> Result<EstimateWithError, DiagError> {
    if n == 0 {
        return Err(DiagError::BadParameter {
            name: "n",
            value: 0.0,
        });
    }
    f.check_arity(n)?;
    let units = unit_vectors(src, budget, 3, rng, |measure, sampler, rng, buf| {
        let atoms: Vec<usize> = (0..=n).map(|_| sampler.draw(rng)).collect();
        let over = |i: usize, j: usize| measure.overlap(atoms[i], atoms[j]);
        let f_full = f.eval(&|i, j| over(i, j));
        let psi_fresh = psi.eval(over(0, n));
        let mut folded = 0.0;
        for k in 1..n {
            // Minor over all replicas but k: the pair (0, k) plays the fresh
            // role there, so this term estimates the left side too.
            let f_swap = f.eval(&|a, b| {
                let a = if a < k { a } else { a + 1 };
                let b = if b < k { b } else { b + 1 };
                over(a, b)
            });
            folded += (f_swap - f_full) * psi.eval(over(0, k));
        }
        folded += f_full * psi_fresh;
        buf[0] = folded;
        buf[1] = f_full;
        buf[2] = psi_fresh;
    })?;
    let m = column_means(&units);
    let defect = m[0] - m[1] * m[2];
    let grad = [1.0, -m[2], -m[1]];
    Ok(EstimateWithError {
        value: defect.abs(),
        stderr: delta_method_se(&units, &m, &grad),
        n_samples: budget.total(),
    })
}

/// Mass of ordered replica triples whose first overlap undercuts both others
/// by eps: E mu^x3(R_12 <= min(R_13, R_23) - eps). Zero draws land in the
/// event on any exact overlap tree, so the estimate and its error are then
/// exactly zero.
pub fn ultrametric_violation<S: ReplicaSource>(
    src: &S,
    eps: f64,
    budget: Budget,
    rng: &mut impl Rng,
) -> Result<EstimateWithError, DiagError> {
    if !eps.is_finite() || eps < 0.0 {
        return Err(DiagError::BadParameter {
            name: "eps",
            value: eps,
        });
    }
    let units = unit_vectors(src, budget, 1, rng, |measure, sampler, rng, buf| {
        let a = sampler.draw(rng);
        let b = sampler.draw(rng);
        let c = sampler.draw(rng);
        let r12 = measure.overlap(a, b);
        let r13 = measure.overlap(a, c);
        let r23 = measure.overlap(b, c);
        buf[0] = if r12 <= r13.min(r23) - eps { 1.0 } else { 0.0 };
    })?;
    Ok(scalar_estimate(&units, budget.total()))
}

/// Mass of replica pairs with overlap below -eps: E mu^x2(R_12 < -eps).
pub fn positivity_defect<S: ReplicaSource>(
    src: &S,
    eps: f64,
    budget: Budget,
    rng: &mut impl Rng,
) -> Result<EstimateWithError, DiagError> {
    check_pos("eps", eps)?;
    let units = unit_vectors(src, budget, 1, rng, |measure, sampler, rng, buf| {
        let a = sampler.draw(rng);
        let b = sampler.draw(rng);
        buf[0] = if measure.overlap(a, b) < -eps { 1.0 } else { 0.0 };
    })?;
    Ok(scalar_estimate(&units, budget.total()))
}

fn check_partitions(samples: &[Vec<f64>]) -> Result<(), DiagError> {
    if samples.is_empty() {
        return Err(DiagError::NoSamples);
    }
    for (index, s) in samples.iter().enumerate() {
        let negative = s.iter().any(|&v| v < -1e-12);
        let heavy = s.iter().sum::<f64>() > 1.0 + 1e-9;
        if negative || heavy {
            return Err(DiagError::BadPartition { index });
        }
    }
    Ok(())
}

/// Sample mean of the partition functional p_k(v) = sum_n v_n^k. Only k >= 2
/// is summable on mass partitions.
pub fn pd_moment(samples: &[Vec<f64>], k: u32) -> Result<EstimateWithError, DiagError> {
    if k < 2 {
        return Err(DiagError::BadParameter {
            name: "k",
            value: k as f64,
        });
    }
    check_partitions(samples)?;
    let units: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| vec![s.iter().map(|v| v.powi(k as i32)).sum()])
        .collect();
    Ok(scalar_estimate(&units, samples.len() as u64))
}

/// Absolute defect of the moment recursion for S(n_1,...,n_s) =
/// E prod_k p_{n_k}(v), with n = n_1 + ... + n_s:
///
///   n S(n_1+1, n_2,...,n_s) = S(2) S(n_1,...,n_s)
///     + (n_1 - 1) S(n_1,...,n_s)
///     + sum_{k=2}^s n_k S(n_2,...,n_1+n_k,...,n_s)
///
/// All S terms are estimated from the same partition samples; the error is
/// the delta-method deviation of the combination.
pub fn talagrand_residual(
    samples: &[Vec<f64>],
    composition: &[usize],
) -> Result<EstimateWithError, DiagError> {
    if composition.is_empty() || composition.iter().any(|&p| p < 2) {
        return Err(DiagError::BadComposition(composition.to_vec()));
    }
    check_partitions(samples)?;
    let s = composition.len();
    let n: usize = composition.iter().sum();
    let n1 = composition[0];

    // Statistic layout per sample: [lifted, pair, base, merged_2.., merged_s].
    let dim = 3 + (s - 1);
    let units: Vec<Vec<f64>> = samples
        .iter()
        .map(|sample| {
            let p = |e: usize| sample.iter().map(|v| v.powi(e as i32)).sum::<f64>();
            let powers: Vec<f64> = composition.iter().map(|&e| p(e)).collect();
            let base: f64 = powers.iter().product();
            let mut u = Vec::with_capacity(dim);
            // Same product with the first exponent raised by one.
            u.push(p(n1 + 1) * powers[1..].iter().product::<f64>());
            u.push(p(2));
            u.push(base);
            for k in 1..s {
                let rest: f64 = (1..s).filter(|&j| j != k).map(|j| powers[j]).product();
                u.push(p(n1 + composition[k]) * rest);
            }
            u
        })
        .collect();

    let m = column_means(&units);
    let mut defect = n as f64 * m[0] - m[1] * m[2] - (n1 as f64 - 1.0) * m[2];
    let mut grad = vec![n as f64, -m[2], -m[1] - (n1 as f64 - 1.0)];
    for k in 1..s {
        defect -= composition[k] as f64 * m[2 + k];
        grad.push(-(composition[k] as f64));
    }
    Ok(EstimateWithError {
        value: defect.abs(),
        stderr: delta_method_se(&units, &m, &grad),
        n_samples: samples.len() as u64,
    })
}

fn ramp(x: f64, lo: f64, hi: f64) -> f64 {
    if x < lo {
        0.0
    } else if x >= hi {
        1.0
    } else {
        (x - lo) / (hi - lo)
    }
}

/// Piecewise-linear overlap surrogate: 0 below q_r - kappa, 1 from q_r on,
/// linear in between.
pub fn phi_kappa(x: f64, q_r: f64, kappa: f64) -> Result<f64, DiagError> {
    check_pos("kappa", kappa)?;
    Ok(ramp(x, q_r - kappa, q_r))
}

/// Two-threshold variant: 0 up to q_star - kappa, 1 from q_star - lambda on.
/// Requires kappa > lambda > 0.
pub fn phi_kappa_lambda(x: f64, q_star: f64, kappa: f64, lambda: f64) -> Result<f64, DiagError> {
    check_pos("lambda", lambda)?;
    if !kappa.is_finite() || kappa <= lambda {
        return Err(DiagError::BadParameter {
            name: "kappa",
            value: kappa,
        });
    }
    Ok(ramp(x, q_star - kappa, q_star - lambda))
}

const MC_PAIRS_DEFAULT: usize = 100_000;

/// Mean absolute gap E mu^x2 |U_12 - phi_kappa(R_12)| between the same-leaf-
/// cluster indicator of `dec` and the overlap surrogate at the decomposition's
/// top level. Exact summation up to [`EXACT_SUMMATION_CAP`] atoms (error and
/// count then report 0), Monte Carlo pairs beyond; `mc_pairs` = 0 picks the
/// default.
pub fn indicator_approx_gap<M: AtomicMeasure + Sync>(
    measure: &M,
    dec: &ClusterDecomposition,
    kappa: f64,
    mc_pairs: usize,
    rng: &mut impl Rng,
) -> Result<EstimateWithError, DiagError> {
    check_pos("kappa", kappa)?;
    let q_r = *dec.q.last().ok_or(DiagError::BadParameter {
        name: "decomposition depth",
        value: 0.0,
    })?;
    let lo = q_r - kappa;
    let r = dec.shape.depth();
    let n = measure.n_atoms();

    // Leaf-cluster id per atom; cleaned clusters are disjoint so each atom
    // carries at most one.
    let mut label = vec![usize::MAX; n];
    for (v, cluster) in enumerate(&dec.shape).iter().zip(&dec.clusters) {
        if v.depth() == r {
            let id = dec.shape.index_of(v).expect("cluster vertex is in shape");
            for &a in cluster {
                label[a] = id;
            }
        }
    }
    let gap = |a: usize, b: usize| {
        let together = label[a] != usize::MAX && label[a] == label[b];
        let u = if together { 1.0 } else { 0.0 };
        (u - ramp(measure.overlap(a, b), lo, q_r)).abs()
    };

    if n <= EXACT_SUMMATION_CAP {
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|a| {
                let ma = measure.mass(a);
                if ma == 0.0 {
                    return 0.0;
                }
                (0..n).map(|b| ma * measure.mass(b) * gap(a, b)).sum()
            })
            .collect();
        return Ok(EstimateWithError {
            value: rows.iter().sum(),
            stderr: 0.0,
            n_samples: 0,
        });
    }

    let pairs = if mc_pairs == 0 { MC_PAIRS_DEFAULT } else { mc_pairs };
    let sampler = AtomSampler::new(measure)?;
    let units: Vec<Vec<f64>> = (0..pairs)
        .map(|_| vec![gap(sampler.draw(rng), sampler.draw(rng))])
        .collect();
    Ok(scalar_estimate(&units, pairs as u64))
}

/// A joint moment of tree weights: the product over the listed vertices of
/// the weight raised to its exponent. Vertices absent from a sample tree
/// carry weight zero, which is how shapes of different widths compare.
#[derive(Debug, Clone, Serialize)]
pub struct MomentSpec {
    powers: Vec<(Vertex, u32)>,
}

impl MomentSpec {
    pub fn new(powers: Vec<(Vertex, u32)>) -> Result<Self, DiagError> {
        let distinct = powers
            .iter()
            .enumerate()
            .all(|(i, (v, _))| powers[..i].iter().all(|(w, _)| w != v));
        if powers.is_empty()
            || powers.iter().any(|(v, p)| *p == 0 || v.is_root())
            || !distinct
        {
            return Err(DiagError::BadMoment);
        }
        Ok(MomentSpec { powers })
    }

    /// Single-vertex moment w_v^power.
    pub fn vertex(v: Vertex, power: u32) -> Result<Self, DiagError> {
        MomentSpec::new(vec![(v, power)])
    }

    pub fn powers(&self) -> &[(Vertex, u32)] {
        &self.powers
    }

    pub fn label(&self) -> String {
        self.powers
            .iter()
            .map(|(v, p)| format!("w[{v}]^{p}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn eval(&self, tree: &WeightedTree) -> f64 {
        self.powers
            .iter()
            .map(|(v, p)| tree.get(v).unwrap_or(0.0).powi(*p as i32))
            .product()
    }
}

/// One requested moment compared across the two ensembles.
#[derive(Debug, Clone, Serialize)]
pub struct MomentGap {
    pub moment: MomentSpec,
    pub empirical: EstimateWithError,
    pub reference: EstimateWithError,
    /// empirical - reference with the pooled error of both sides.
    pub gap: EstimateWithError,
}

fn column_estimate(rows: &[Vec<f64>], col: usize) -> EstimateWithError {
    let column: Vec<f64> = rows.iter().map(|r| r[col]).collect();
    let (value, stderr) = mean_and_se(&column);
    EstimateWithError {
        value,
        stderr,
        n_samples: rows.len() as u64,
    }
}

/// Compares joint moments of empirical weight trees against freshly sampled
/// cascades with the given parameters on the reference shape. Each entry
/// reports both one-sided estimates and their difference with pooled error.
pub fn compare_to_rpc(
    y: &[WeightedTree],
    params: &RpcParams,
    shape: &TreeShape,
    moments: &[MomentSpec],
    n_rpc: usize,
    rng: &mut impl Rng,
) -> Result<Vec<MomentGap>, DiagError> {
    if y.is_empty() {
        return Err(DiagError::NoSamples);
    }
    if n_rpc == 0 {
        return Err(DiagError::BadParameter {
            name: "n_rpc",
            value: 0.0,
        });
    }
    for spec in moments {
        for (v, _) in spec.powers() {
            if !shape.contains(v) {
                return Err(DiagError::VertexOutsideShape(v.to_string()));
            }
        }
    }
    let seeds: Vec<u64> = (0..n_rpc).map(|_| rng.gen()).collect();
    let reference: Result<Vec<Vec<f64>>, DiagError> = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cascade = sample_rpc(params, shape, &mut rng)?;
            Ok(moments.iter().map(|m| m.eval(cascade.tree())).collect())
        })
        .collect();
    let reference = reference?;
    let empirical: Vec<Vec<f64>> = y
        .iter()
        .map(|tree| moments.iter().map(|m| m.eval(tree)).collect())
        .collect();

    Ok(moments
        .iter()
        .enumerate()
        .map(|(col, spec)| {
            let e = column_estimate(&empirical, col);
            let r = column_estimate(&reference, col);
            MomentGap {
                moment: spec.clone(),
                empirical: e,
                reference: r,
                gap: EstimateWithError {
                    value: e.value - r.value,
                    stderr: (e.stderr * e.stderr + r.stderr * r.stderr).sqrt(),
                    n_samples: e.n_samples + r.n_samples,
                },
            }
        })
        .collect())
}

/// One test outcome as a flat report record.
#[derive(Debug, Clone, Serialize)]
pub struct DiagRecord {
    pub test: String,
    pub model: String,
    pub estimate: f64,
    pub stderr: f64,
    pub samples: u64,
    pub seed: u64,
}

impl DiagRecord {
    pub fn new(test: &str, model: &str, estimate: &EstimateWithError, seed: u64) -> Self {
        DiagRecord {
            test: test.into(),
            model: model.into(),
            estimate: estimate.value,
            stderr: estimate.stderr,
            samples: estimate.n_samples,
            seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record fields are plain")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascades::{sample_pd, CascadeWeights};
    use crate::clustering::{build_balls, clean_clusters, CleanReport};
    use crate::measure::VectorMeasure;
    use crate::spinglass::rem_beta_c;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Uniform measure on the N-cube with entries +-1/4, so every overlap is
    /// an exact multiple of 1/16 and tie comparisons are unambiguous.
    fn quarter_cube(n: u32) -> VectorMeasure {
        let size = 1usize << n;
        let vectors = (0..size)
            .map(|c| {
                (0..n)
                    .map(|b| if c >> b & 1 == 1 { -0.25 } else { 0.25 })
                    .collect()
            })
            .collect();
        VectorMeasure {
            vectors,
            masses: vec![1.0 / size as f64; size],
        }
    }

    fn wide_source() -> RpcSource {
        let params = RpcParams::new(vec![0.3, 0.7], vec![0.4, 0.8]).unwrap();
        RpcSource::new(params, TreeShape::uniform(2, 32)).unwrap()
    }

    #[test]
    fn constant_test_function_cancels_exactly() {
        let src = wide_source();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for power in [1u32, 3] {
            let e = gg_residual(
                &src,
                &OverlapTestFn::One,
                Psi::new(power).unwrap(),
                2,
                Budget::new(8, 64),
                &mut rng,
            )
            .unwrap();
            assert_eq!(e.value, 0.0);
            assert!(e.stderr <= 1e-12);
            assert_eq!(e.n_samples, 8 * 64);
        }
    }

    #[test]
    fn rpc_source_satisfies_the_identity_within_noise() {
        let params = RpcParams::new(vec![0.3, 0.7], vec![0.4, 0.8]).unwrap();
        let src = RpcSource::new(params, TreeShape::uniform(2, 64)).unwrap();
        let f = OverlapTestFn::Threshold {
            i: 0,
            j: 1,
            level: 0.4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let e = gg_residual(&src, &f, Psi::identity(), 2, Budget::new(96, 256), &mut rng).unwrap();
        assert!(
            e.value <= 3.0 * e.stderr,
            "residual {} exceeds 3 x {}",
            e.value,
            e.stderr
        );
        assert!(e.stderr > 0.0);
    }

    #[test]
    fn replica_index_bounds_are_checked() {
        let src = wide_source();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = OverlapTestFn::Threshold {
            i: 0,
            j: 2,
            level: 0.5,
        };
        let err = gg_residual(&src, &f, Psi::identity(), 2, Budget::new(1, 1), &mut rng);
        assert!(matches!(
            err,
            Err(DiagError::BadReplicaIndex { index: 2, n: 2 })
        ));
        let err = gg_residual(
            &src,
            &OverlapTestFn::One,
            Psi::identity(),
            0,
            Budget::new(1, 1),
            &mut rng,
        );
        assert!(matches!(err, Err(DiagError::BadParameter { name: "n", .. })));
        let err = gg_residual(
            &src,
            &OverlapTestFn::One,
            Psi::identity(),
            1,
            Budget::new(0, 5),
            &mut rng,
        );
        assert!(matches!(err, Err(DiagError::BadParameter { .. })));
    }

    #[test]
    fn test_functions_evaluate_products_and_monomials() {
        let g = |i: usize, j: usize| match (i.min(j), i.max(j)) {
            (0, 1) => 0.5,
            (0, 2) => -0.25,
            _ => 1.0,
        };
        let f = OverlapTestFn::Product(vec![
            OverlapTestFn::Threshold {
                i: 0,
                j: 1,
                level: 0.5,
            },
            OverlapTestFn::Monomial {
                i: 0,
                j: 2,
                power: 2,
            },
        ]);
        assert_abs_diff_eq!(f.eval(&g), 0.0625);
        assert!(f.check_arity(3).is_ok());
        assert!(f.check_arity(2).is_err());
        assert_eq!(OverlapTestFn::One.eval(&g), 1.0);
        assert!(Psi::new(7).is_err());
        assert_abs_diff_eq!(Psi::new(6).unwrap().eval(0.5), 0.015625);
    }

    #[test]
    fn exact_tree_reports_zero_violations() {
        let src = wide_source();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let u = ultrametric_violation(&src, 0.01, Budget::new(8, 64), &mut rng).unwrap();
        assert_eq!((u.value, u.stderr), (0.0, 0.0));
        let p = positivity_defect(&src, 0.01, Budget::new(8, 64), &mut rng).unwrap();
        assert_eq!((p.value, p.stderr), (0.0, 0.0));
        assert!(ultrametric_violation(&src, -0.1, Budget::new(1, 1), &mut rng).is_err());
        assert!(positivity_defect(&src, 0.0, Budget::new(1, 1), &mut rng).is_err());
    }

    #[test]
    fn hypercube_triples_match_exhaustive_count() {
        let cube = quarter_cube(8);
        // Ordered triples with R_12 <= min(R_13, R_23), ties included; the
        // overlap of atoms a and b is (8 - 2*popcount(a xor b))/16 exactly.
        let d = |a: usize, b: usize| ((a ^ b) as u32).count_ones() as i32;
        let mut hits = 0u64;
        for a in 0..256usize {
            for b in 0..256usize {
                let dab = d(a, b);
                for c in 0..256usize {
                    if dab >= d(a, c).max(d(b, c)) {
                        hits += 1;
                    }
                }
            }
        }
        let exact = hits as f64 / (256.0f64).powi(3);
        let src = FixedSource::new(cube).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let e = ultrametric_violation(&src, 0.0, Budget::new(1, 40_000), &mut rng).unwrap();
        assert!(
            (e.value - exact).abs() <= 3.0 * e.stderr,
            "estimate {} vs exact {exact} at stderr {}",
            e.value,
            e.stderr
        );
    }

    #[test]
    fn hypercube_negative_mass_matches_binomial_tail() {
        // R < -0.2 needs at least 6 of 8 disagreements: (28 + 8 + 1)/256.
        let exact = 37.0 / 256.0;
        let src = FixedSource::new(quarter_cube(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let e = positivity_defect(&src, 0.2, Budget::new(1, 60_000), &mut rng).unwrap();
        assert!((e.value - exact).abs() <= 3.0 * e.stderr);
        assert_eq!(e.n_samples, 60_000);
    }

    #[test]
    fn halving_samples_scales_the_error() {
        let src = FixedSource::new(quarter_cube(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let full = positivity_defect(&src, 0.2, Budget::new(1, 60_000), &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(136);
        let half = positivity_defect(&src, 0.2, Budget::new(1, 30_000), &mut rng).unwrap();
        let ratio = full.stderr / half.stderr;
        let target = 0.5f64.sqrt();
        assert!(
            ratio >= 0.9 * target && ratio <= 1.1 * target,
            "ratio {ratio}"
        );
    }

    #[test]
    fn rem_residuals_shrink_with_system_size() {
        let beta = 2.0 * rem_beta_c();
        let f = OverlapTestFn::Threshold {
            i: 0,
            j: 1,
            level: 0.5,
        };
        let mut values = Vec::new();
        for n in [8usize, 10, 12] {
            let src = GibbsSource::new(ModelSpec {
                variant: ModelVariant::Rem,
                n,
                beta,
            })
            .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(40 + n as u64);
            let e =
                gg_residual(&src, &f, Psi::identity(), 2, Budget::new(128, 128), &mut rng).unwrap();
            values.push(e.value);
        }
        assert!(
            values[0] >= values[1] && values[1] >= values[2],
            "expected a non-increasing sequence, got {values:?}"
        );
    }

    #[test]
    fn grem_negative_mass_shrinks_with_system_size() {
        let beta = 2.0 * rem_beta_c();
        let mut values = Vec::new();
        for n in [8usize, 12] {
            let src = GibbsSource::new(ModelSpec {
                variant: ModelVariant::Grem {
                    blocks: vec![n / 2, n - n / 2],
                    zeta: vec![0.0, 0.5, 1.0],
                },
                n,
                beta,
            })
            .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(60 + n as u64);
            let e = positivity_defect(&src, 1.0 / 3.0, Budget::new(256, 64), &mut rng).unwrap();
            values.push((e.value, e.stderr));
        }
        assert!(
            values[1].0 < values[0].0,
            "expected shrinking mass, got {values:?}"
        );
        let margin = values[0].0 - values[1].0;
        assert!(margin > 2.0 * values[0].1.hypot(values[1].1));
    }

    fn pd_batch(theta: f64, atoms: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| sample_pd(theta, atoms, &mut rng).unwrap().atoms)
            .collect()
    }

    #[test]
    fn pd_moments_match_closed_forms() {
        // E sum v^k for PD(theta) from the recursion: (1-theta), then
        // (2-theta)(1-theta)/2, then (3-theta)(2-theta)(1-theta)/6.
        let samples = pd_batch(0.5, 192, 4000, 70);
        for (k, truth) in [(2u32, 0.5), (3, 0.375), (4, 0.3125)] {
            let e = pd_moment(&samples, k).unwrap();
            assert!(
                (e.value - truth).abs() <= 3.0 * e.stderr,
                "k={k}: {} vs {truth} at {}",
                e.value,
                e.stderr
            );
        }
        let half = pd_moment(&samples[..2000], 2).unwrap();
        let full = pd_moment(&samples, 2).unwrap();
        let ratio = full.stderr / half.stderr;
        let target = 0.5f64.sqrt();
        assert!(ratio >= 0.9 * target && ratio <= 1.1 * target);
    }

    #[test]
    fn partition_inputs_are_validated() {
        assert!(matches!(pd_moment(&[], 2), Err(DiagError::NoSamples)));
        assert!(matches!(
            pd_moment(&[vec![0.5, 0.5]], 1),
            Err(DiagError::BadParameter { .. })
        ));
        let negative = vec![vec![0.5, -0.1]];
        assert!(matches!(
            pd_moment(&negative, 2),
            Err(DiagError::BadPartition { index: 0 })
        ));
        let heavy = vec![vec![0.5, 0.5], vec![0.9, 0.2]];
        assert!(matches!(
            pd_moment(&heavy, 2),
            Err(DiagError::BadPartition { index: 1 })
        ));
        assert!(matches!(
            talagrand_residual(&[vec![1.0]], &[]),
            Err(DiagError::BadComposition(_))
        ));
        assert!(matches!(
            talagrand_residual(&[vec![1.0]], &[2, 1]),
            Err(DiagError::BadComposition(_))
        ));
    }

    #[test]
    fn recursion_holds_on_pd_samples() {
        let samples = pd_batch(0.3, 256, 10_000, 71);
        for comp in [vec![2usize], vec![3], vec![2, 2]] {
            let e = talagrand_residual(&samples, &comp).unwrap();
            assert!(
                e.value <= 4.0 * e.stderr,
                "composition {comp:?}: defect {} at stderr {}",
                e.value,
                e.stderr
            );
        }
    }

    #[test]
    fn recursion_reduces_to_pair_identity() {
        let samples = pd_batch(0.5, 128, 500, 72);
        let s2 = pd_moment(&samples, 2).unwrap().value;
        let s3 = pd_moment(&samples, 3).unwrap().value;
        let direct = (2.0 * s3 - s2 * s2 - s2).abs();
        let resid = talagrand_residual(&samples, &[2]).unwrap();
        assert_abs_diff_eq!(resid.value, direct, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_partition_gives_exact_zero() {
        let samples = vec![vec![1.0, 0.0, 0.0]; 50];
        for comp in [vec![2usize], vec![4], vec![3, 2]] {
            let e = talagrand_residual(&samples, &comp).unwrap();
            assert_eq!((e.value, e.stderr), (0.0, 0.0));
        }
        let e = pd_moment(&samples, 5).unwrap();
        assert_eq!((e.value, e.stderr), (1.0, 0.0));
    }

    #[test]
    fn surrogate_is_a_unit_ramp() {
        assert_eq!(phi_kappa(0.75, 0.75, 0.25).unwrap(), 1.0);
        assert_eq!(phi_kappa(0.5, 0.75, 0.25).unwrap(), 0.0);
        assert_eq!(phi_kappa(0.625, 0.75, 0.25).unwrap(), 0.5);
        assert_eq!(phi_kappa(1.0, 0.75, 0.25).unwrap(), 1.0);
        assert!(phi_kappa(0.5, 0.75, 0.0).is_err());

        assert_eq!(phi_kappa_lambda(0.25, 0.75, 0.5, 0.25).unwrap(), 0.0);
        assert_eq!(phi_kappa_lambda(0.5, 0.75, 0.5, 0.25).unwrap(), 1.0);
        assert_eq!(phi_kappa_lambda(0.375, 0.75, 0.5, 0.25).unwrap(), 0.5);
        assert!(phi_kappa_lambda(0.5, 0.7, 0.1, 0.1).is_err());
        assert!(phi_kappa_lambda(0.5, 0.7, 0.3, 0.0).is_err());

        let grid = |t: f64| phi_kappa(t, 0.6, 0.25).unwrap();
        let mut last = 0.0;
        for i in 0..=1000 {
            let x = -1.0 + 2.0 * i as f64 / 1000.0;
            let y = grid(x);
            assert!((0.0..=1.0).contains(&y) && y >= last);
            last = y;
        }
    }

    fn embedded_cascade(seed: u64) -> (CascadeWeights, RostEmbedding, RpcParams, TreeShape) {
        let params = RpcParams::new(vec![0.3, 0.8], vec![0.4, 0.8]).unwrap();
        let shape = TreeShape::uniform(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cascade = sample_rpc(&params, &shape, &mut rng).unwrap();
        let emb = embed_rost(&cascade, params.q()).unwrap();
        (cascade, emb, params, shape)
    }

    #[test]
    fn gap_on_full_embedding_is_dust_squared() {
        let (cascade, emb, params, shape) = embedded_cascade(90);
        let centers: Vec<usize> = enumerate(&shape)
            .iter()
            .map(|v| {
                (0..emb.n_leaves())
                    .find(|&a| v.is_ancestor_of(emb.leaf(a)) || emb.leaf(a) == v)
                    .unwrap()
            })
            .collect();
        let family = build_balls(&emb, &shape, &centers, params.q());
        let dec = clean_clusters(&family, &emb);
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let gap = indicator_approx_gap(&emb, &dec, 0.3, 0, &mut rng).unwrap();
        // Distinct leaves sit below the ramp foot and cluster self-pairs at
        // its top, so only the unclustered dust self-pair contributes.
        let dust = cascade.dust();
        assert_abs_diff_eq!(gap.value, dust * dust, epsilon = 1e-15);
        assert!(gap.value <= 2.0 * dust);
        assert_eq!((gap.n_samples, gap.stderr), (0, 0.0));
    }

    fn everything_cluster(n_atoms: usize) -> ClusterDecomposition {
        ClusterDecomposition {
            shape: TreeShape::new(vec![1]).unwrap(),
            q: vec![1.0],
            clusters: vec![(0..n_atoms).collect()],
            masses: vec![1.0],
            report: CleanReport {
                eps_achieved: 0.0,
                delta_achieved: 0.0,
                depth_sums: vec![1.0],
                slacks: vec![],
                boundary_slacks: vec![],
            },
            stats: None,
        }
    }

    #[test]
    fn single_cluster_gap_matches_direct_sum() {
        let (_, emb, _, _) = embedded_cascade(92);
        let dec = everything_cluster(emb.n_atoms());
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let gap = indicator_approx_gap(&emb, &dec, 1.0, 0, &mut rng).unwrap();
        let mut direct = 0.0;
        for a in 0..emb.n_atoms() {
            for b in 0..emb.n_atoms() {
                let r = emb.overlap(a, b).clamp(0.0, 1.0);
                direct += emb.mass(a) * emb.mass(b) * (1.0 - r);
            }
        }
        assert_abs_diff_eq!(gap.value, direct, epsilon = 1e-12);
    }

    /// Uniform atoms that only overlap themselves; wide enough to force the
    /// pair-sampling path.
    struct WideMeasure(usize);

    impl AtomicMeasure for WideMeasure {
        fn n_atoms(&self) -> usize {
            self.0
        }
        fn mass(&self, _: usize) -> f64 {
            1.0 / self.0 as f64
        }
        fn overlap(&self, i: usize, j: usize) -> f64 {
            if i == j {
                1.0
            } else {
                0.0
            }
        }
    }

    #[test]
    fn monte_carlo_gap_agrees_on_a_wide_measure() {
        let measure = WideMeasure(5000);
        let dec = everything_cluster(5000);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gap = indicator_approx_gap(&measure, &dec, 1.0, 20_000, &mut rng).unwrap();
        let expected = 1.0 - 1.0 / 5000.0;
        assert!((gap.value - expected).abs() <= 5.0 * gap.stderr);
        assert_eq!(gap.n_samples, 20_000);
        assert!(gap.stderr > 0.0);
        assert!(indicator_approx_gap(&measure, &dec, 0.0, 1, &mut rng).is_err());
    }

    #[test]
    fn moment_specs_are_validated() {
        let v1 = Vertex::new(vec![1]);
        assert!(MomentSpec::new(vec![]).is_err());
        assert!(MomentSpec::new(vec![(v1.clone(), 0)]).is_err());
        assert!(MomentSpec::new(vec![(Vertex::root(), 1)]).is_err());
        assert!(MomentSpec::new(vec![(v1.clone(), 1), (v1.clone(), 2)]).is_err());

        let spec = MomentSpec::new(vec![(v1.clone(), 1), (Vertex::new(vec![1, 2]), 2)]).unwrap();
        assert_eq!(spec.label(), "w[[1]]^1 w[[1,2]]^2");

        let shape = TreeShape::uniform(2, 2);
        let tree = WeightedTree::from_fn(shape, |v| 0.1 * v.depth() as f64);
        assert_abs_diff_eq!(spec.eval(&tree), 0.1 * 0.04);
        // A vertex outside the sample tree contributes weight zero.
        let wide = MomentSpec::vertex(Vertex::new(vec![3]), 1).unwrap();
        assert_eq!(wide.eval(&tree), 0.0);
    }

    #[test]
    fn self_comparison_gaps_vanish() {
        let params = RpcParams::new(vec![0.4, 0.75], vec![0.5, 0.9]).unwrap();
        let shape = TreeShape::uniform(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let y: Vec<WeightedTree> = (0..300)
            .map(|_| sample_rpc(&params, &shape, &mut rng).unwrap().tree().clone())
            .collect();
        let verts = enumerate(&shape);
        let moments = vec![
            MomentSpec::vertex(verts[0].clone(), 1).unwrap(),
            MomentSpec::vertex(verts[0].clone(), 2).unwrap(),
            MomentSpec::new(vec![(verts[0].clone(), 1), (verts[1].clone(), 1)]).unwrap(),
            MomentSpec::vertex(verts.last().unwrap().clone(), 1).unwrap(),
        ];
        let gaps = compare_to_rpc(&y, &params, &shape, &moments, 300, &mut rng).unwrap();
        for g in &gaps {
            assert!(
                g.gap.value.abs() <= 3.0 * g.gap.stderr,
                "{}: gap {} at stderr {}",
                g.moment.label(),
                g.gap.value,
                g.gap.stderr
            );
            assert_eq!(g.empirical.n_samples, 300);
            assert_eq!(g.reference.n_samples, 300);
            assert_eq!(g.gap.n_samples, 600);
        }
    }

    #[test]
    fn depth_one_comparison_matches_plain_partition() {
        // A depth-1 cascade at zeta keeps the m largest of the same pooled,
        // tail-completed construction sample_pd uses, so the leading atoms
        // have identical laws on both sides.
        let shape = TreeShape::new(vec![24]).unwrap();
        let params = RpcParams::new(vec![0.35], vec![0.7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let y: Vec<WeightedTree> = (0..400)
            .map(|_| {
                let pd = sample_pd(0.35, 96, &mut rng).unwrap();
                WeightedTree::new(shape.clone(), pd.atoms[..24].to_vec()).unwrap()
            })
            .collect();
        let moments = vec![
            MomentSpec::vertex(Vertex::new(vec![1]), 1).unwrap(),
            MomentSpec::vertex(Vertex::new(vec![1]), 2).unwrap(),
            MomentSpec::vertex(Vertex::new(vec![24]), 1).unwrap(),
        ];
        let gaps = compare_to_rpc(&y, &params, &shape, &moments, 400, &mut rng).unwrap();
        for g in &gaps {
            assert!(
                g.gap.value.abs() <= 3.0 * g.gap.stderr,
                "{}: gap {} at stderr {}",
                g.moment.label(),
                g.gap.value,
                g.gap.stderr
            );
        }
    }

    #[test]
    fn comparison_inputs_are_validated() {
        let shape = TreeShape::uniform(1, 2);
        let params = RpcParams::new(vec![0.5], vec![0.6]).unwrap();
        let tree = WeightedTree::from_fn(shape.clone(), |_| 0.3);
        let m_in = vec![MomentSpec::vertex(Vertex::new(vec![1]), 1).unwrap()];
        let m_out = vec![MomentSpec::vertex(Vertex::new(vec![1, 1]), 1).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            compare_to_rpc(&[], &params, &shape, &m_in, 10, &mut rng),
            Err(DiagError::NoSamples)
        ));
        assert!(matches!(
            compare_to_rpc(&[tree.clone()], &params, &shape, &m_in, 0, &mut rng),
            Err(DiagError::BadParameter { .. })
        ));
        assert!(matches!(
            compare_to_rpc(&[tree], &params, &shape, &m_out, 10, &mut rng),
            Err(DiagError::VertexOutsideShape(_))
        ));
    }

    #[test]
    fn sources_describe_themselves() {
        assert_eq!(wide_source().label(), "rpc r=2 m=[32, 32]");
        let gibbs = GibbsSource::new(ModelSpec {
            variant: ModelVariant::Rem,
            n: 8,
            beta: 1.5,
        })
        .unwrap();
        assert_eq!(gibbs.label(), "rem N=8 beta=1.5");
        let fixed = FixedSource::new(quarter_cube(2)).unwrap();
        assert_eq!(fixed.label(), "fixed");
        let bad = VectorMeasure {
            vectors: vec![vec![0.5]],
            masses: vec![0.7],
        };
        assert!(FixedSource::new(bad).is_err());
        let mismatch = RpcSource::new(
            RpcParams::new(vec![0.5], vec![0.6]).unwrap(),
            TreeShape::uniform(2, 2),
        );
        assert!(mismatch.is_err());
    }

    #[test]
    fn records_serialize_flat() {
        let est = EstimateWithError {
            value: 0.5,
            stderr: 0.25,
            n_samples: 3,
        };
        let record = DiagRecord::new("gg_residual", "rem N=8 beta=1.5", &est, 7);
        assert_eq!(
            record.to_json(),
            r#"{"test":"gg_residual","model":"rem N=8 beta=1.5","estimate":0.5,"stderr":0.25,"samples":3,"seed":7}"#
        );
    }

    #[test]
    fn repeated_runs_reproduce_bitwise() {
        let src = wide_source();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(123);
            ultrametric_violation(&src, 0.0, Budget::new(6, 40), &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn constant_f_cancels_for_arbitrary_fixed_sources(
            raw_masses in proptest::collection::vec(0.05f64..1.0, 2..6),
            seed in 0u64..1000,
            power in 0u32..=6,
            n in 1usize..4,
        ) {
            let total: f64 = raw_masses.iter().sum();
            let k = raw_masses.len();
            // Entries bounded by 0.45 over at most 3 coordinates keep every
            // overlap inside [-1, 1].
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vectors: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    (0..3)
                        .map(|_| rand::Rng::gen_range(&mut rng, -0.45..0.45))
                        .collect()
                })
                .collect();
            let src = FixedSource::new(VectorMeasure {
                vectors,
                masses: raw_masses.iter().map(|m| m / total).collect(),
            })
            .unwrap();
            let e = gg_residual(
                &src,
                &OverlapTestFn::One,
                Psi::new(power).unwrap(),
                n,
                Budget::new(2, 8),
                &mut rng,
            )
            .unwrap();
            prop_assert_eq!(e.value, 0.0);
            prop_assert!(e.stderr <= 1e-12);
        }

        #[test]
        fn surrogate_stays_monotone_in_bounds(
            a in -1.0f64..1.0,
            b in -1.0f64..1.0,
            q in 0.05f64..1.0,
            lambda in 1e-4f64..0.4,
            extra in 1e-4f64..0.5,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let kappa = lambda + extra;
            let f_lo = phi_kappa(lo, q, kappa).unwrap();
            let f_hi = phi_kappa(hi, q, kappa).unwrap();
            prop_assert!((0.0..=1.0).contains(&f_lo));
            prop_assert!(f_lo <= f_hi);
            let g_lo = phi_kappa_lambda(lo, q, kappa, lambda).unwrap();
            let g_hi = phi_kappa_lambda(hi, q, kappa, lambda).unwrap();
            prop_assert!((0.0..=1.0).contains(&g_lo));
            prop_assert!(g_lo <= g_hi);
            prop_assert_eq!(phi_kappa_lambda(q - lambda, q, kappa, lambda).unwrap(), 1.0);
            prop_assert_eq!(phi_kappa_lambda(q - kappa, q, kappa, lambda).unwrap(), 0.0);
        }
    }
}
