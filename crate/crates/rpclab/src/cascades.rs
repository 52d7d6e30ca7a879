//! Poisson-Dirichlet samples, Ruelle probability cascades, their embedding
//! as random overlap structures, and overlap-matrix tree encodings.
//!
//! Atom weights come from the ranked transform u_k = T_k^{-1/theta} of
//! unit-rate Poisson arrivals T_k, which is exact for the intensity
//! theta x^{-(theta+1)} dx. Everything downstream is a finite truncation of an
//! infinite object; the conventions for what truncation keeps are spelled out
//! on [`sample_pd`] and [`sample_rpc`]. Cascades additionally support an exact
//! (truncation-free) replica sampler, [`sample_rpc_overlaps`], built from a
//! Chinese-restaurant representation; the two routes are cross-checked in the
//! integration tests.

use crate::measure::{AtomSampler, AtomicMeasure, MeasureError, validate_measure};
use crate::numeric::logsumexp;
use crate::trees::{TreeError, TreeShape, Vertex, WeightedTree, enumerate, is_standard_order, meet};
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("theta must lie strictly inside (0,1), got {0}")]
    ThetaOutOfRange(f64),
    #[error("need at least one atom")]
    EmptyAtomCount,
    #[error("zeta must be strictly increasing inside (0,1)")]
    BadZeta,
    #[error("overlap levels must be strictly increasing in (0,1]")]
    BadOverlapLevels,
    #[error("shape depth {shape} does not match parameter depth {params}")]
    DepthMismatch { shape: usize, params: usize },
    #[error("truncation too coarse: tail bound {bound:.4e} exceeds tolerance {tol:.4e}")]
    TruncationTooCoarse { bound: f64, tol: f64 },
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("matrix entry ({i},{j}) = {value} is not one of the overlap levels")]
    OffLevelEntry { i: usize, j: usize, value: f64 },
    #[error("diagonal entry {i} = {value} must sit at the top overlap level")]
    DiagonalBelowTop { i: usize, value: f64 },
    #[error("overlaps of replicas ({i},{j},{k}) violate the ultrametric inequality")]
    NonUltrametric { i: usize, j: usize, k: usize },
    #[error("bad overlap matrix: {0}")]
    BadMatrix(String),
    #[error("bad discrete law: {0}")]
    BadLaw(String),
    #[error("bad weight map: {0}")]
    BadWeightMap(String),
}

fn check_theta(theta: f64) -> Result<(), CascadeError> {
    if theta <= 0.0 || theta >= 1.0 || theta.is_nan() {
        return Err(CascadeError::ThetaOutOfRange(theta));
    }
    Ok(())
}

/// Levels strictly increasing, positive, capped at 1.
fn check_levels(q: &[f64]) -> Result<(), CascadeError> {
    let increasing = q.windows(2).all(|p| p[0] < p[1]);
    if q.is_empty() || q[0] <= 0.0 || *q.last().unwrap() > 1.0 || !increasing {
        return Err(CascadeError::BadOverlapLevels);
    }
    Ok(())
}

/// A finite law on an increasing grid of real values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteLaw {
    values: Vec<f64>,
    probs: Vec<f64>,
}

impl DiscreteLaw {
    /// Values strictly increasing; probabilities nonnegative and summing to 1.
    pub fn new(values: Vec<f64>, probs: Vec<f64>) -> Result<Self, CascadeError> {
        if values.len() != probs.len() || values.is_empty() {
            return Err(CascadeError::BadLaw(
                "value/probability lengths must match and be nonempty".into(),
            ));
        }
        if !values.windows(2).all(|p| p[0] < p[1]) {
            return Err(CascadeError::BadLaw("values must increase".into()));
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|&p| p < -1e-12) || (total - 1.0).abs() > 1e-9 {
            return Err(CascadeError::BadLaw(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(DiscreteLaw { values, probs })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().zip(&self.probs).map(|(v, p)| v * p).sum()
    }
}

/// Cumulative arrival times of a unit-rate Poisson process.
pub fn ppp_arrivals(count: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut t = 0.0;
    (0..count)
        .map(|_| {
            t += rng.sample::<f64, _>(Exp1);
            t
        })
        .collect()
}

/// Ranked atoms u_k = T_k^{-1/theta} from explicit arrival times.
pub fn ppp_atoms_from_arrivals(arrivals: &[f64], theta: f64) -> Result<Vec<f64>, CascadeError> {
    check_theta(theta)?;
    if arrivals.is_empty() {
        return Err(CascadeError::EmptyAtomCount);
    }
    Ok(arrivals.iter().map(|t| t.powf(-1.0 / theta)).collect())
}

/// The `count` largest atoms of the Poisson process with intensity
/// theta x^{-(theta+1)} dx on (0, inf), in decreasing order.
pub fn sample_ppp_ranked(
    theta: f64,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, CascadeError> {
    check_theta(theta)?;
    if count == 0 {
        return Err(CascadeError::EmptyAtomCount);
    }
    ppp_atoms_from_arrivals(&ppp_arrivals(count, rng), theta)
}

/// A truncated Poisson-Dirichlet sample.
///
/// The normalizing total S is the truncated atom sum plus the conditional
/// mean of the unsampled tail given the last arrival, so the atoms sum to
/// slightly less than 1 and the deficit estimates the truncated mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdSample {
    /// Normalized masses, decreasing.
    pub atoms: Vec<f64>,
    pub theta: f64,
    /// Poisson arrival times behind the atoms: atoms[k] = arrivals[k]^{-1/theta} / total.
    pub arrivals: Vec<f64>,
    /// Plain sum of the unnormalized atoms.
    pub atom_total: f64,
    /// Tail-completed normalizer S.
    pub total: f64,
    /// L = S^{-theta}; satisfies atoms[k]^theta * arrivals[k] = L for every k.
    pub normalizer: f64,
}

/// Deterministic core of [`sample_pd`]; useful for pinning atoms in tests.
pub fn pd_from_arrivals(arrivals: &[f64], theta: f64) -> Result<PdSample, CascadeError> {
    check_theta(theta)?;
    if arrivals.is_empty() {
        return Err(CascadeError::EmptyAtomCount);
    }
    let inv = 1.0 / theta;
    let ln_atoms: Vec<f64> = arrivals.iter().map(|t| -inv * t.ln()).collect();
    // Mean of sum_{k > K} T_k^{-1/theta} given T_K, integrating the intensity
    // of later arrivals: (theta/(1-theta)) T_K^{-(1-theta)/theta}.
    let last = *arrivals.last().unwrap();
    let ln_tail = (theta / (1.0 - theta)).ln() - (1.0 - theta) * inv * last.ln();
    let mut all = ln_atoms.clone();
    all.push(ln_tail);
    let ln_total = logsumexp(&all);
    let atoms: Vec<f64> = ln_atoms.iter().map(|l| (l - ln_total).exp()).collect();
    Ok(PdSample {
        atoms,
        theta,
        arrivals: arrivals.to_vec(),
        atom_total: ln_atoms.iter().map(|l| l.exp()).sum(),
        total: ln_total.exp(),
        normalizer: (-theta * ln_total).exp(),
    })
}

/// Poisson-Dirichlet(theta) sample truncated to `count` atoms.
pub fn sample_pd(theta: f64, count: usize, rng: &mut impl Rng) -> Result<PdSample, CascadeError> {
    check_theta(theta)?;
    if count == 0 {
        return Err(CascadeError::EmptyAtomCount);
    }
    pd_from_arrivals(&ppp_arrivals(count, rng), theta)
}

/// As [`sample_pd`], but refuses truncations whose mean lost mass, per the
/// tail bound from the rates module, exceeds `tail_tol`.
pub fn sample_pd_checked(
    theta: f64,
    count: usize,
    tail_tol: f64,
    rng: &mut impl Rng,
) -> Result<PdSample, CascadeError> {
    check_theta(theta)?;
    if count == 0 {
        return Err(CascadeError::EmptyAtomCount);
    }
    let bound = crate::rates::phi_bound(count as f64, theta).unwrap_or(f64::INFINITY);
    if bound > tail_tol {
        return Err(CascadeError::TruncationTooCoarse {
            bound,
            tol: tail_tol,
        });
    }
    sample_pd(theta, count, rng)
}

/// Parameters of a depth-r cascade: activity exponents zeta_0 < ... <
/// zeta_{r-1} in (0,1) and overlap levels 0 < q_1 < ... < q_r <= 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RpcParamsWire", into = "RpcParamsWire")]
pub struct RpcParams {
    zeta: Vec<f64>,
    q: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RpcParamsWire {
    zeta: Vec<f64>,
    q: Vec<f64>,
}

impl From<RpcParams> for RpcParamsWire {
    fn from(p: RpcParams) -> Self {
        RpcParamsWire { zeta: p.zeta, q: p.q }
    }
}

impl TryFrom<RpcParamsWire> for RpcParams {
    type Error = CascadeError;
    fn try_from(w: RpcParamsWire) -> Result<Self, Self::Error> {
        RpcParams::new(w.zeta, w.q)
    }
}

impl RpcParams {
    pub fn new(zeta: Vec<f64>, q: Vec<f64>) -> Result<Self, CascadeError> {
        let increasing = zeta.windows(2).all(|p| p[0] < p[1]);
        if zeta.is_empty() || zeta[0] <= 0.0 || *zeta.last().unwrap() >= 1.0 || !increasing {
            return Err(CascadeError::BadZeta);
        }
        check_levels(&q)?;
        if q.len() != zeta.len() {
            return Err(CascadeError::DepthMismatch {
                shape: q.len(),
                params: zeta.len(),
            });
        }
        Ok(RpcParams { zeta, q })
    }

    pub fn depth(&self) -> usize {
        self.zeta.len()
    }

    /// zeta_k for k = 0..r-1; vertices at depth k branch with this exponent.
    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    /// q_1..q_r.
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// q at a meet depth, with q_0 = 0.
    pub fn q_at(&self, depth: usize) -> f64 {
        if depth == 0 { 0.0 } else { self.q[depth - 1] }
    }
}

/// Vertex masses of a truncated cascade, in standard order, plus the mass
/// lost to truncation. Every internal mass is the sum over its kept children,
/// so all levels sum to 1 - dust.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CascadeWire", into = "CascadeWire")]
pub struct CascadeWeights {
    tree: WeightedTree,
    dust: f64,
}

impl CascadeWeights {
    /// No validity checks beyond shape alignment; [`validate_cascade`] reports
    /// on arbitrary inputs.
    pub fn from_parts(tree: WeightedTree, dust: f64) -> Self {
        CascadeWeights { tree, dust }
    }

    pub fn tree(&self) -> &WeightedTree {
        &self.tree
    }

    pub fn shape(&self) -> &TreeShape {
        self.tree.shape()
    }

    pub fn dust(&self) -> f64 {
        self.dust
    }

    pub fn depth(&self) -> usize {
        self.tree.shape().depth()
    }
}

#[derive(Serialize, Deserialize)]
struct CascadeWire {
    shape: Vec<usize>,
    weights: BTreeMap<String, f64>,
    dust: f64,
}

impl From<CascadeWeights> for CascadeWire {
    fn from(c: CascadeWeights) -> Self {
        let weights = enumerate(c.tree.shape())
            .iter()
            .zip(c.tree.weights())
            .map(|(v, &w)| (v.to_string(), w))
            .collect();
        CascadeWire {
            shape: c.tree.shape().branching().to_vec(),
            weights,
            dust: c.dust,
        }
    }
}

impl TryFrom<CascadeWire> for CascadeWeights {
    type Error = CascadeError;
    fn try_from(w: CascadeWire) -> Result<Self, Self::Error> {
        let shape = TreeShape::new(w.shape)?;
        if w.weights.len() != shape.cardinality() {
            return Err(CascadeError::BadWeightMap(format!(
                "{} entries for a shape with {} vertices",
                w.weights.len(),
                shape.cardinality()
            )));
        }
        let mut weights = Vec::with_capacity(shape.cardinality());
        for v in enumerate(&shape) {
            let key = v.to_string();
            let mass = w
                .weights
                .get(&key)
                .ok_or_else(|| CascadeError::BadWeightMap(format!("missing vertex {key}")))?;
            weights.push(*mass);
        }
        Ok(CascadeWeights {
            tree: WeightedTree::new(shape, weights)?,
            dust: w.dust,
        })
    }
}

/// Outcome of checking the cascade-space constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CascadeReport {
    /// Sibling blocks decreasing at every vertex.
    pub standard_order: bool,
    /// Each level's total mass is at most 1.
    pub level_sums_bounded: bool,
    /// Every internal mass dominates the sum of its children.
    pub parent_dominates: bool,
    /// Dust in [0,1] and equal to 1 minus the leaf total.
    pub dust_consistent: bool,
    /// All the sum inequalities hold with equality.
    pub proper: bool,
}

impl CascadeReport {
    pub fn is_valid(&self) -> bool {
        self.standard_order && self.level_sums_bounded && self.parent_dominates && self.dust_consistent
    }
}

/// Checks the constraints defining a cascade, to additive tolerance `tol`.
pub fn validate_cascade(c: &CascadeWeights, tol: f64) -> CascadeReport {
    let tree = &c.tree;
    let r = tree.shape().depth();
    let standard_order = is_standard_order(tree);

    let mut level_sums_bounded = true;
    let mut level_sums_full = true;
    for k in 1..=r {
        let s = tree.level_sum(k);
        if s > 1.0 + tol {
            level_sums_bounded = false;
        }
        if (s - 1.0).abs() > tol {
            level_sums_full = false;
        }
    }

    let mut parent_dominates = true;
    let mut parent_exact = true;
    for v in enumerate(tree.shape()) {
        if v.depth() == r {
            continue;
        }
        let own = tree.get(&v).unwrap();
        let child_sum: f64 = (1..=tree.shape().branching()[v.depth()] as u32)
            .map(|i| tree.get(&v.child(i)).unwrap())
            .sum();
        if own + tol < child_sum {
            parent_dominates = false;
        }
        if (own - child_sum).abs() > tol {
            parent_exact = false;
        }
    }

    let leaf_total = tree.level_sum(r);
    let dust_consistent = (c.dust - (1.0 - leaf_total)).abs() <= tol
        && c.dust >= -tol
        && c.dust <= 1.0 + tol;

    CascadeReport {
        standard_order,
        level_sums_bounded,
        parent_dominates,
        dust_consistent,
        proper: level_sums_full && parent_exact,
    }
}

/// Per-parent selection: ranks `pool`-sized blocks of child masses and keeps
/// the `keep` largest of each block. Returns the kept local indices per
/// parent (mass-decreasing) and each parent's kept total.
fn select_level(child_mass: &[f64], pool: usize, keep: usize) -> (Vec<f64>, Vec<Vec<usize>>) {
    let n_parents = child_mass.len() / pool;
    let mut parent_mass = Vec::with_capacity(n_parents);
    let mut kept = Vec::with_capacity(n_parents);
    for p in 0..n_parents {
        let block = &child_mass[p * pool..(p + 1) * pool];
        let mut idx: Vec<usize> = (0..pool).collect();
        idx.sort_by(|&a, &b| block[b].partial_cmp(&block[a]).expect("masses are not NaN"));
        idx.truncate(keep);
        parent_mass.push(idx.iter().map(|&l| block[l]).sum());
        kept.push(idx);
    }
    (parent_mass, kept)
}

/// Samples a cascade truncated to `shape`.
///
/// Each vertex at depth k spawns a pool of max(4 m_{k+1}, 32) ranked atoms
/// with exponent zeta_k; the kept children are the m_{k+1} of largest realized
/// subtree mass (selection is scale invariant, so it can run on unnormalized
/// products). The normalizer completes the deepest level's pools by the
/// conditional mean of their unsampled tails; shallower losses stay in the
/// dust, which is therefore always positive. Pool sizes multiply along the
/// depth, so memory grows with the product of per-level pools.
pub fn sample_rpc(
    params: &RpcParams,
    shape: &TreeShape,
    rng: &mut impl Rng,
) -> Result<CascadeWeights, CascadeError> {
    let r = params.depth();
    if shape.depth() != r {
        return Err(CascadeError::DepthMismatch {
            shape: shape.depth(),
            params: r,
        });
    }
    let pools: Vec<usize> = shape.branching().iter().map(|&m| (4 * m).max(32)).collect();

    // Unnormalized log masses level by level; log keeps tiny first arrivals
    // (huge atoms) from overflowing products.
    let mut ln_w: Vec<Vec<f64>> = vec![vec![0.0]];
    let mut ln_tail_terms: Vec<f64> = Vec::new();
    for k in 0..r {
        let zeta = params.zeta[k];
        let inv = 1.0 / zeta;
        let parents = ln_w.last().unwrap();
        let mut children = Vec::with_capacity(parents.len() * pools[k]);
        let mut gamma_last = Vec::with_capacity(parents.len());
        for &lpw in parents {
            let mut t = 0.0f64;
            for _ in 0..pools[k] {
                t += rng.sample::<f64, _>(Exp1);
                children.push(lpw - inv * t.ln());
            }
            gamma_last.push(t);
        }
        if k == r - 1 {
            // Conditional mean of each pool's unsampled tail given its last
            // arrival; only the deepest level has a finite completion.
            let c = (zeta / (1.0 - zeta)).ln();
            let e = (1.0 - zeta) * inv;
            ln_tail_terms = parents
                .iter()
                .zip(&gamma_last)
                .map(|(&lpw, &g)| lpw + c - e * g.ln())
                .collect();
        }
        ln_w.push(children);
    }

    let mut all = ln_w[r].clone();
    all.extend_from_slice(&ln_tail_terms);
    let ln_total = logsumexp(&all);

    // Normalized pooled leaf masses, then bottom-up kept-mass selection.
    let mut mass_at: Vec<Vec<f64>> = vec![Vec::new(); r + 1];
    mass_at[r] = ln_w[r].iter().map(|l| (l - ln_total).exp()).collect();
    let mut kept_locals: Vec<Vec<Vec<usize>>> = vec![Vec::new(); r];
    for k in (0..r).rev() {
        let (parent_mass, kept) = select_level(&mass_at[k + 1], pools[k], shape.branching()[k]);
        mass_at[k] = parent_mass;
        kept_locals[k] = kept;
    }

    // Kept children are already mass-decreasing, so the output lands in
    // standard order directly.
    let mut weights = vec![0.0; shape.cardinality()];
    let mut frontier: Vec<(Vertex, usize)> = vec![(Vertex::root(), 0)];
    for k in 0..r {
        let mut next = Vec::with_capacity(frontier.len() * shape.branching()[k]);
        for (v, g) in &frontier {
            for (ci, &local) in kept_locals[k][*g].iter().enumerate() {
                let child_v = v.child(ci as u32 + 1);
                let child_g = g * pools[k] + local;
                weights[shape.index_of(&child_v).expect("kept child is in shape")] =
                    mass_at[k + 1][child_g];
                next.push((child_v, child_g));
            }
        }
        frontier = next;
    }

    Ok(CascadeWeights {
        tree: WeightedTree::new(shape.clone(), weights)?,
        dust: 1.0 - mass_at[0][0],
    })
}

/// A cascade realized as an atomic measure on vectors with prescribed inner
/// products: leaves carry their cascade mass, one extra atom carries the
/// dust, and the overlap of two atoms is q at their meet depth. The overlap
/// oracle works on tree paths and is exact; [`RostEmbedding::h_vector`]
/// exposes the explicit coordinates for cross-checks.
#[derive(Debug, Clone, PartialEq)]
pub struct RostEmbedding {
    shape: TreeShape,
    leaves: Vec<Vertex>,
    /// Leaf masses in enumerate order, then the dust mass.
    masses: Vec<f64>,
    q: Vec<f64>,
}

/// Realizes `c` on overlap levels `q` (one per depth, strictly increasing).
pub fn embed_rost(c: &CascadeWeights, q: &[f64]) -> Result<RostEmbedding, CascadeError> {
    check_levels(q)?;
    let r = c.depth();
    if q.len() != r {
        return Err(CascadeError::DepthMismatch {
            shape: r,
            params: q.len(),
        });
    }
    let leaves: Vec<Vertex> = enumerate(c.shape())
        .into_iter()
        .filter(|v| v.depth() == r)
        .collect();
    let mut masses: Vec<f64> = leaves
        .iter()
        .map(|v| c.tree().get(v).expect("leaf is in shape"))
        .collect();
    masses.push(c.dust());
    Ok(RostEmbedding {
        shape: c.shape().clone(),
        leaves,
        masses,
        q: q.to_vec(),
    })
}

impl RostEmbedding {
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    /// Index of the dust atom (the last one).
    pub fn dust_index(&self) -> usize {
        self.masses.len() - 1
    }

    pub fn leaf(&self, atom: usize) -> &Vertex {
        &self.leaves[atom]
    }

    fn q_at(&self, depth: usize) -> f64 {
        if depth == 0 { 0.0 } else { self.q[depth - 1] }
    }

    /// Explicit coordinates of an atom's vector: one coordinate per non-root
    /// vertex (value sqrt(q_k - q_{k-1}) on each ancestor) plus a final
    /// coordinate reserved for the dust direction.
    pub fn h_vector(&self, atom: usize) -> Vec<f64> {
        let dim = self.shape.cardinality() + 1;
        let mut h = vec![0.0; dim];
        let top = *self.q.last().unwrap();
        if atom == self.dust_index() {
            h[dim - 1] = top.sqrt();
            return h;
        }
        let leaf = &self.leaves[atom];
        for d in 1..=leaf.depth() {
            let gap = self.q_at(d) - self.q_at(d - 1);
            h[self.shape.index_of(&leaf.ancestor(d)).expect("ancestor in shape")] = gap.sqrt();
        }
        h
    }
}

impl AtomicMeasure for RostEmbedding {
    fn n_atoms(&self) -> usize {
        self.masses.len()
    }

    fn mass(&self, atom: usize) -> f64 {
        self.masses[atom]
    }

    fn overlap(&self, a: usize, b: usize) -> f64 {
        let top = *self.q.last().unwrap();
        if a == b {
            return top;
        }
        let dust = self.dust_index();
        if a == dust || b == dust {
            return 0.0;
        }
        self.q_at(meet(&self.leaves[a], &self.leaves[b]).depth())
    }
}

/// Law of the overlap of two independent draws from an (untruncated) cascade:
/// mass zeta_k - zeta_{k-1} at q_k, reading zeta_{-1} = 0, zeta_r = 1.
pub fn rpc_overlap_law(params: &RpcParams) -> DiscreteLaw {
    let r = params.depth();
    let mut values = vec![0.0];
    values.extend_from_slice(&params.q);
    let mut probs = Vec::with_capacity(r + 1);
    let mut prev = 0.0;
    for &z in &params.zeta {
        probs.push(z - prev);
        prev = z;
    }
    probs.push(1.0 - prev);
    DiscreteLaw::new(values, probs).expect("valid parameters give a valid law")
}

/// Symmetric matrix of pairwise replica overlaps; the diagonal holds the
/// common self-overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    n: usize,
    /// Row-major, length n*n.
    data: Vec<f64>,
}

impl OverlapMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self, CascadeError> {
        if n == 0 || data.len() != n * n {
            return Err(CascadeError::BadMatrix(format!(
                "{} entries for claimed size {n}",
                data.len()
            )));
        }
        let m = OverlapMatrix { n, data };
        for i in 0..n {
            for j in 0..n {
                let e = m.entry(i, j);
                if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&e) {
                    return Err(CascadeError::BadMatrix(format!(
                        "entry ({i},{j}) = {e} outside [-1,1]"
                    )));
                }
                if (e - m.entry(j, i)).abs() > 1e-9 {
                    return Err(CascadeError::BadMatrix(format!(
                        "asymmetry at ({i},{j})"
                    )));
                }
            }
            if (m.entry(i, i) - m.entry(0, 0)).abs() > 1e-9 {
                return Err(CascadeError::BadMatrix(
                    "diagonal entries must share one self-overlap".into(),
                ));
            }
        }
        Ok(m)
    }

    /// Builds from the upper triangle of `f` (i <= j), mirroring for symmetry.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self, CascadeError> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let e = f(i, j);
                data[i * n + j] = e;
                data[j * n + i] = e;
            }
        }
        OverlapMatrix::new(n, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn self_overlap(&self) -> f64 {
        self.entry(0, 0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        crate::numeric::symmetric_eigenvalues(&self.data, self.n)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    /// Positive semi-definite up to eigenvalue slack 1e-9.
    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue() >= -1e-9
    }

    /// One header line `n=<n>`, then one comma-separated row per line.
    pub fn to_csv(&self) -> String {
        let mut out = format!("n={}\n", self.n);
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| self.entry(i, j).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, CascadeError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| CascadeError::BadMatrix("empty csv".into()))?;
        let n: usize = header
            .trim()
            .strip_prefix("n=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CascadeError::BadMatrix(format!("bad header {header:?}")))?;
        let mut data = Vec::with_capacity(n * n);
        for line in lines {
            for field in line.trim().split(',') {
                let x: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| CascadeError::BadMatrix(format!("bad entry {field:?}")))?;
                data.push(x);
            }
        }
        OverlapMatrix::new(n, data)
    }
}

/// Overlap matrix of `n` independent draws from an atomic measure.
pub fn sample_overlap_matrix(
    measure: &impl AtomicMeasure,
    n: usize,
    rng: &mut impl Rng,
) -> Result<OverlapMatrix, CascadeError> {
    if n == 0 {
        return Err(CascadeError::BadMatrix("zero replicas".into()));
    }
    validate_measure(measure, 1e-9)?;
    let sampler = AtomSampler::new(measure)?;
    let draws: Vec<usize> = (0..n).map(|_| sampler.draw(rng)).collect();
    OverlapMatrix::from_fn(n, |i, j| {
        if i == j {
            measure.self_overlap(draws[i])
        } else {
            measure.overlap(draws[i], draws[j])
        }
    })
}

/// Quantizes an overlap down to the grid {0, q_1, ..., q_r}: values below q_1
/// (negatives included) map to 0, values at or above q_r map to q_r.
pub fn gamma_map(x: f64, q: &[f64]) -> f64 {
    let mut out = 0.0;
    for &level in q {
        if x >= level {
            out = level;
        } else {
            break;
        }
    }
    out
}

/// Tree encoding of an ultrametric overlap matrix on levels {0, q_1..q_r}:
/// one root-leaf path of length r+1 per replica, meeting at depth k exactly
/// when their overlap is q_k. Distinct replicas always split by depth r+1,
/// so equal draws (overlap q_r) still get distinct leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapTree {
    q: Vec<f64>,
    paths: Vec<Vertex>,
}

impl OverlapTree {
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn paths(&self) -> &[Vertex] {
        &self.paths
    }

    pub fn depth(&self) -> usize {
        self.q.len() + 1
    }

    /// Reconstructs the overlap matrix the tree encodes.
    pub fn decode(&self) -> OverlapMatrix {
        let r = self.q.len();
        let q_at = |d: usize| if d == 0 { 0.0 } else { self.q[d - 1] };
        OverlapMatrix::from_fn(self.paths.len(), |i, j| {
            if i == j {
                q_at(r)
            } else {
                q_at(meet(&self.paths[i], &self.paths[j]).depth().min(r))
            }
        })
        .expect("paths decode to a valid matrix")
    }
}

/// Encodes `m` (entries drawn from {0, q_1..q_r}, diagonal q_r) as a depth
/// r+1 tree. Fails on any entry off the level grid and on any triple of
/// replicas violating the ultrametric inequality, naming the triple.
pub fn encode_overlap_tree(m: &OverlapMatrix, q: &[f64]) -> Result<OverlapTree, CascadeError> {
    check_levels(q)?;
    let r = q.len();
    let n = m.n();
    let level_of = |x: f64| -> Option<usize> {
        if x.abs() <= 1e-9 {
            return Some(0);
        }
        (0..r).find(|&k| (x - q[k]).abs() <= 1e-9).map(|k| k + 1)
    };

    let mut lev = vec![vec![0usize; n]; n];
    for i in 0..n {
        for j in 0..n {
            lev[i][j] = level_of(m.entry(i, j)).ok_or(CascadeError::OffLevelEntry {
                i,
                j,
                value: m.entry(i, j),
            })?;
        }
        if lev[i][i] != r {
            return Err(CascadeError::DiagonalBelowTop {
                i,
                value: m.entry(i, i),
            });
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            for k in 0..n {
                if k == i || k == j {
                    continue;
                }
                if lev[i][j] < lev[i][k].min(lev[j][k]) {
                    return Err(CascadeError::NonUltrametric { i, j, k });
                }
            }
        }
    }

    // Refine the all-replica block depth by depth; at depth d replicas stay
    // together iff their overlap level is >= d, which ultrametricity makes an
    // equivalence. Sub-blocks are numbered by first appearance.
    let mut paths: Vec<Vec<u32>> = vec![Vec::with_capacity(r + 1); n];
    let mut blocks: Vec<Vec<usize>> = vec![(0..n).collect()];
    for d in 1..=r + 1 {
        let mut next = Vec::new();
        for block in &blocks {
            let mut subs: Vec<Vec<usize>> = Vec::new();
            for &i in block {
                let joined = subs
                    .iter_mut()
                    .find(|s| d <= r && lev[s[0]][i] >= d);
                match joined {
                    Some(s) => s.push(i),
                    None => subs.push(vec![i]),
                }
            }
            for (ci, sub) in subs.into_iter().enumerate() {
                for &i in &sub {
                    paths[i].push(ci as u32 + 1);
                }
                next.push(sub);
            }
        }
        blocks = next;
    }

    Ok(OverlapTree {
        q: q.to_vec(),
        paths: paths.into_iter().map(Vertex::new).collect(),
    })
}

/// Chinese-restaurant partition with discount `d`: item i joins an occupied
/// table t with probability (n_t - d)/i and opens a new one with probability
/// (#tables * d)/i. Returns a table label per item, labels by first use.
fn crp_labels(discount: f64, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    debug_assert!((0.0..1.0).contains(&discount));
    let mut labels = Vec::with_capacity(n);
    let mut counts: Vec<usize> = Vec::new();
    for i in 0..n {
        if i == 0 {
            labels.push(0);
            counts.push(1);
            continue;
        }
        let u: f64 = rng.gen::<f64>() * i as f64;
        let mut acc = 0.0;
        let mut chosen = counts.len();
        for (t, &c) in counts.iter().enumerate() {
            acc += c as f64 - discount;
            if u < acc {
                chosen = t;
                break;
            }
        }
        if chosen == counts.len() {
            counts.push(1);
        } else {
            counts[chosen] += 1;
        }
        labels.push(chosen);
    }
    labels
}

/// Meet depths of `n` replicas drawn from the exact (untruncated) cascade
/// law: the deepest level is a Chinese-restaurant partition with discount
/// zeta_{r-1}, and level k arises by coagulating level k+1's blocks with
/// discount zeta_{k-1}/zeta_k. Entry (i,i) is r.
pub fn sample_rpc_meet_depths(
    params: &RpcParams,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<usize>> {
    let r = params.depth();
    // labels_by_depth[k-1][i]: block of replica i at depth k.
    let mut labels_by_depth: Vec<Vec<usize>> = Vec::with_capacity(r);
    let mut current = crp_labels(params.zeta[r - 1], n, rng);
    labels_by_depth.push(current.clone());
    for k in (1..r).rev() {
        let n_blocks = current.iter().max().map_or(0, |m| m + 1);
        let coag = crp_labels(params.zeta[k - 1] / params.zeta[k], n_blocks, rng);
        current = current.iter().map(|&b| coag[b]).collect();
        labels_by_depth.push(current.clone());
    }
    labels_by_depth.reverse();

    let mut meet = vec![vec![0usize; n]; n];
    for i in 0..n {
        meet[i][i] = r;
        for j in 0..i {
            let mut d = 0;
            for (k, labels) in labels_by_depth.iter().enumerate() {
                if labels[i] == labels[j] {
                    d = k + 1;
                } else {
                    break;
                }
            }
            meet[i][j] = d;
            meet[j][i] = d;
        }
    }
    meet
}

/// Overlap matrix of `n` replicas under the exact cascade law; pairs overlap
/// at q of their meet depth and the diagonal is q_r.
pub fn sample_rpc_overlaps(params: &RpcParams, n: usize, rng: &mut impl Rng) -> OverlapMatrix {
    let meet = sample_rpc_meet_depths(params, n, rng);
    OverlapMatrix::from_fn(n, |i, j| params.q_at(meet[i][j]))
        .expect("meet depths give a valid matrix")
}
