//! Hierarchical cluster search on finite atomic measures.
//!
//! The pipeline: validate a sequence of overlap levels against a reference
//! overlap law, draw center atoms for the vertices of a shaped tree, form the
//! nested balls around those centers, compute the singleton and pairwise ball
//! weights, test the exhaustion event on the weight array, and disjointify a
//! passing family into clusters. The clusters then feed the close/far
//! statistics, the standard-order mass rearrangement, the orthogonality
//! check, and the single-level variant that isolates top-overlap states.

use crate::cascades::DiscreteLaw;
use crate::measure::{validate_measure, AtomSampler, AtomicMeasure, MeasureError};
use crate::trees::{
    enumerate, meet, relation, standard_order, Relation, StandardOrder, TreeError, TreeShape,
    Vertex, WeightedTree,
};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

/// Largest support size for which pairwise statistics are computed by exact
/// double summation; bigger measures fall back to Monte Carlo with reported
/// standard errors. Every report records which mode produced it.
pub const EXACT_SUMMATION_CAP: usize = 4096;

/// Pair draws used by Monte Carlo statistics when the caller does not fix a
/// sample count.
const DEFAULT_MC_PAIRS: usize = 100_000;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("overlap levels must be strictly increasing inside (0,1]")]
    BadLevels,
    #[error("{name} = {value} is outside its allowed range")]
    BadParameter { name: &'static str, value: f64 },
    #[error("levels rejected by the reference law: {0}")]
    NotAdmissible(String),
    #[error("masses reach {available:.6} at depth {depth}, need {needed:.6}")]
    InsufficientMass {
        depth: usize,
        available: f64,
        needed: f64,
    },
    #[error("shape depth {shape} does not match level count {levels}")]
    DepthMismatch { shape: usize, levels: usize },
    #[error("the single-level state search needs a depth-1 shape, got depth {0}")]
    DeepShape(usize),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

fn check_levels(q: &[f64]) -> Result<(), ClusterError> {
    let increasing = q.windows(2).all(|p| p[0] < p[1]);
    if q.is_empty() || q[0] <= 0.0 || *q.last().unwrap() > 1.0 || !increasing {
        return Err(ClusterError::BadLevels);
    }
    Ok(())
}

fn check_nonneg(name: &'static str, value: f64) -> Result<(), ClusterError> {
    if !value.is_finite() || value < 0.0 {
        return Err(ClusterError::BadParameter { name, value });
    }
    Ok(())
}

/// Tolerances for accepting overlap levels against an empirical law. The
/// window criterion stands in for exact continuity points, which no purely
/// atomic law has: the mass in the open window around each level must stay
/// under `atom_cap`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AdmissibleTol {
    /// Half-width of the open window scanned around each level.
    pub window: f64,
    /// Largest window mass tolerated around a level.
    pub atom_cap: f64,
    /// Least mass required on each closed interval between consecutive levels.
    pub gap_floor: f64,
    /// Both edge intervals [0, q_1] and [q_r, 1] must carry at least this
    /// much mass and at most one minus it.
    pub edge_floor: f64,
}

impl Default for AdmissibleTol {
    fn default() -> Self {
        AdmissibleTol {
            window: 0.02,
            atom_cap: 0.05,
            gap_floor: 0.01,
            edge_floor: 0.01,
        }
    }
}

/// One measured admissibility condition.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConditionCheck {
    pub measured: f64,
    pub pass: bool,
}

/// Per-condition outcome of [`validate_admissible`].
#[derive(Debug, Clone, Serialize)]
pub struct AdmissibleReport {
    pub q: Vec<f64>,
    /// Mass in the open window around each level, against `atom_cap`.
    pub window_mass: Vec<ConditionCheck>,
    /// Mass of each closed interval between consecutive levels, against
    /// `gap_floor`.
    pub gap_mass: Vec<ConditionCheck>,
    /// Mass of [0, q_1] and of [q_r, 1], each required to lie between
    /// `edge_floor` and one minus it.
    pub edge_mass: [ConditionCheck; 2],
    pub pass: bool,
}

impl AdmissibleReport {
    fn failures(&self) -> String {
        let mut out = Vec::new();
        for (k, c) in self.window_mass.iter().enumerate() {
            if !c.pass {
                out.push(format!("window mass {:.4} at q_{}", c.measured, k + 1));
            }
        }
        for (k, c) in self.gap_mass.iter().enumerate() {
            if !c.pass {
                out.push(format!(
                    "gap mass {:.4} between q_{} and q_{}",
                    c.measured,
                    k + 1,
                    k + 2
                ));
            }
        }
        if !self.edge_mass[0].pass {
            out.push(format!("lower edge mass {:.4}", self.edge_mass[0].measured));
        }
        if !self.edge_mass[1].pass {
            out.push(format!("upper edge mass {:.4}", self.edge_mass[1].measured));
        }
        out.join("; ")
    }
}

fn law_mass(law: &DiscreteLaw, lo: f64, hi: f64, open: bool) -> f64 {
    law.values()
        .iter()
        .zip(law.probs())
        .filter(|(&v, _)| {
            if open {
                lo < v && v < hi
            } else {
                lo <= v && v <= hi
            }
        })
        .map(|(_, &p)| p)
        .sum()
}

/// Checks a level sequence against a reference overlap law: levels must sit
/// in sparse windows of the law, consecutive levels must have law mass
/// between them, and both edge intervals must carry nontrivial mass. Returns
/// the measured value of every condition; only a malformed level sequence is
/// an error.
pub fn validate_admissible(
    zeta_hat: &DiscreteLaw,
    q: &[f64],
    tol: AdmissibleTol,
) -> Result<AdmissibleReport, ClusterError> {
    check_levels(q)?;
    let window_mass: Vec<ConditionCheck> = q
        .iter()
        .map(|&qk| {
            let measured = law_mass(zeta_hat, qk - tol.window, qk + tol.window, true);
            ConditionCheck {
                measured,
                pass: measured <= tol.atom_cap,
            }
        })
        .collect();
    let gap_mass: Vec<ConditionCheck> = q
        .windows(2)
        .map(|pair| {
            let measured = law_mass(zeta_hat, pair[0], pair[1], false);
            ConditionCheck {
                measured,
                pass: measured >= tol.gap_floor,
            }
        })
        .collect();
    let edge = |measured: f64| ConditionCheck {
        measured,
        pass: tol.edge_floor <= measured && measured <= 1.0 - tol.edge_floor,
    };
    let edge_mass = [
        edge(law_mass(zeta_hat, 0.0, q[0], false)),
        edge(law_mass(zeta_hat, *q.last().unwrap(), 1.0, false)),
    ];
    let pass = window_mass.iter().all(|c| c.pass)
        && gap_mass.iter().all(|c| c.pass)
        && edge_mass.iter().all(|c| c.pass);
    Ok(AdmissibleReport {
        q: q.to_vec(),
        window_mass,
        gap_mass,
        edge_mass,
        pass,
    })
}

/// A level sequence that passed validation against its reference law.
#[derive(Debug, Clone)]
pub struct AdmissibleSequence {
    q: Vec<f64>,
    zeta_hat: DiscreteLaw,
    tol: AdmissibleTol,
}

impl AdmissibleSequence {
    /// Validates and stores the levels; rejects a sequence that fails any
    /// admissibility condition.
    pub fn new(
        q: Vec<f64>,
        zeta_hat: DiscreteLaw,
        tol: AdmissibleTol,
    ) -> Result<Self, ClusterError> {
        let report = validate_admissible(&zeta_hat, &q, tol)?;
        if !report.pass {
            return Err(ClusterError::NotAdmissible(report.failures()));
        }
        Ok(AdmissibleSequence { q, zeta_hat, tol })
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn depth(&self) -> usize {
        self.q.len()
    }

    /// Level at a 1-based depth; depth 0 reads as 0.
    pub fn q_at(&self, depth: usize) -> f64 {
        if depth == 0 {
            0.0
        } else {
            self.q[depth - 1]
        }
    }

    pub fn law(&self) -> &DiscreteLaw {
        &self.zeta_hat
    }

    pub fn tol(&self) -> AdmissibleTol {
        self.tol
    }

    pub fn report(&self) -> AdmissibleReport {
        validate_admissible(&self.zeta_hat, &self.q, self.tol).expect("levels already validated")
    }
}

/// Nested balls around per-vertex center atoms: the set at a vertex is the
/// intersection of the closed overlap balls of all its ancestors, itself
/// included, with radius read from the level of each depth.
#[derive(Debug, Clone, Serialize)]
pub struct BallFamily {
    shape: TreeShape,
    q: Vec<f64>,
    /// Center atom per non-root vertex, enumerate order.
    centers: Vec<usize>,
    /// Sorted atom ids per non-root vertex, enumerate order.
    balls: Vec<Vec<usize>>,
}

impl BallFamily {
    pub fn shape(&self) -> &TreeShape {
        &self.shape
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn centers(&self) -> &[usize] {
        &self.centers
    }

    pub fn center(&self, v: &Vertex) -> Option<usize> {
        self.shape.index_of(v).map(|i| self.centers[i])
    }

    pub fn ball(&self, v: &Vertex) -> Option<&[usize]> {
        self.shape.index_of(v).map(|i| self.balls[i].as_slice())
    }
}

/// Builds the nested ball family for `centers`, one atom per vertex of
/// `shape` in enumerate order. Membership uses the closed comparison, so an
/// atom exactly at a level is inside. Panics when the centers do not cover
/// the shape, an id is out of range, or the levels are malformed; those are
/// caller bugs, not data outcomes.
pub fn build_balls(
    measure: &impl AtomicMeasure,
    shape: &TreeShape,
    centers: &[usize],
    q: &[f64],
) -> BallFamily {
    assert_eq!(q.len(), shape.depth(), "one level per depth");
    assert!(check_levels(q).is_ok(), "levels must increase inside (0,1]");
    assert_eq!(centers.len(), shape.cardinality(), "one center per vertex");
    let n = measure.n_atoms();
    assert!(centers.iter().all(|&c| c < n), "center id out of range");

    let verts = enumerate(shape);
    let mut balls: Vec<Vec<usize>> = Vec::with_capacity(verts.len());
    for (vi, v) in verts.iter().enumerate() {
        let center = centers[vi];
        let radius = q[v.depth() - 1];
        let keep = |&a: &usize| measure.overlap(center, a) >= radius;
        let ball = match v.parent().and_then(|p| shape.index_of(&p)) {
            // Parents precede children in enumerate order, so the parent
            // ball is already built and nesting is free.
            Some(pi) => balls[pi].iter().copied().filter(|a| keep(a)).collect(),
            None => (0..n).filter(|a| keep(a)).collect(),
        };
        balls.push(ball);
    }
    BallFamily {
        shape: shape.clone(),
        q: q.to_vec(),
        centers: centers.to_vec(),
        balls,
    }
}

/// Masses of every single ball and every pairwise ball intersection of a
/// family, indexed by the family's vertices.
#[derive(Debug, Clone, Serialize)]
pub struct BallWeights {
    shape: TreeShape,
    singles: Vec<f64>,
    /// Upper-triangular pair masses over enumerate order.
    pairs: Vec<f64>,
}

fn pair_slot(i: usize, j: usize, n: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

impl BallWeights {
    /// Assembles weights computed elsewhere, e.g. exact subtree masses.
    /// `singles` follows enumerate order; `pairs` is the upper triangle in
    /// row-major order.
    pub fn from_parts(shape: TreeShape, singles: Vec<f64>, pairs: Vec<f64>) -> Self {
        let n = shape.cardinality();
        assert_eq!(singles.len(), n);
        assert_eq!(pairs.len(), n * (n - 1) / 2);
        BallWeights {
            shape,
            singles,
            pairs,
        }
    }

    pub fn shape(&self) -> &TreeShape {
        &self.shape
    }

    pub fn single(&self, v: &Vertex) -> Option<f64> {
        self.shape.index_of(v).map(|i| self.singles[i])
    }

    /// Mass of the intersection of two vertices' balls; equal vertices read
    /// the single weight.
    pub fn pair(&self, a: &Vertex, b: &Vertex) -> Option<f64> {
        let (i, j) = (self.shape.index_of(a)?, self.shape.index_of(b)?);
        if i == j {
            return Some(self.singles[i]);
        }
        let n = self.shape.cardinality();
        Some(self.pairs[pair_slot(i.min(j), i.max(j), n)])
    }
}

fn mass_of(measure: &impl AtomicMeasure, atoms: &[usize]) -> f64 {
    atoms.iter().map(|&a| measure.mass(a)).sum()
}

fn intersection_mass(measure: &impl AtomicMeasure, a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut total) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                total += measure.mass(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    total
}

/// Measures every ball and every pairwise intersection of the family.
pub fn ball_weights(measure: &impl AtomicMeasure, family: &BallFamily) -> BallWeights {
    let n = family.balls.len();
    let singles: Vec<f64> = family.balls.iter().map(|b| mass_of(measure, b)).collect();
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push(intersection_mass(measure, &family.balls[i], &family.balls[j]));
        }
    }
    BallWeights {
        shape: family.shape.clone(),
        singles,
        pairs,
    }
}

/// A vertex together with a measured value, for reports.
#[derive(Debug, Clone, Serialize)]
pub struct VertexValue {
    pub vertex: Vertex,
    pub value: f64,
}

/// Outcome of the exhaustion event test on a weight array.
#[derive(Debug, Clone, Serialize)]
pub struct ExhaustionReport {
    pub pass: bool,
    pub eps: f64,
    pub delta: f64,
    /// Sum of single weights per depth, 1-based.
    pub depth_sums: Vec<f64>,
    /// Parent weight minus the sum of its children's weights, per internal
    /// vertex.
    pub slacks: Vec<VertexValue>,
    /// Internal vertices whose slack is exactly zero. They pass the check;
    /// the flag records that the family tiles those parents with no room to
    /// spare.
    pub boundary_slacks: Vec<Vertex>,
    /// Total pair weight over unordered incomparable vertex pairs.
    pub cousin_total: f64,
    /// The bound the total must stay under: delta over the squared vertex
    /// count.
    pub cousin_cap: f64,
}

/// Tests the three clause families of the exhaustion event on `shape`, which
/// may be a sub-shape of the weight array's: per-depth sums must exceed
/// 1 - eps strictly, each internal vertex's slack must land in the half-open
/// window [0, eps), and the total cousin intersection weight must stay under
/// delta divided by the squared vertex count. An exactly-zero slack passes
/// and is flagged as a boundary case in the report.
pub fn check_exhaustion_event(
    w: &BallWeights,
    shape: &TreeShape,
    eps: f64,
    delta: f64,
) -> ExhaustionReport {
    assert!(
        shape.depth() <= w.shape().depth()
            && shape
                .branching()
                .iter()
                .zip(w.shape().branching())
                .all(|(s, ws)| s <= ws),
        "weights must cover the event shape"
    );
    let r = shape.depth();
    let verts = enumerate(shape);

    let mut depth_sums = vec![0.0; r];
    for v in &verts {
        depth_sums[v.depth() - 1] += w.single(v).expect("vertex covered");
    }

    let mut slacks = Vec::new();
    let mut boundary_slacks = Vec::new();
    for v in &verts {
        if v.depth() == r {
            continue;
        }
        let own = w.single(v).expect("vertex covered");
        let kids: f64 = (1..=shape.branching()[v.depth()] as u32)
            .map(|i| w.single(&v.child(i)).expect("child covered"))
            .sum();
        let slack = own - kids;
        if slack == 0.0 {
            boundary_slacks.push(v.clone());
        }
        slacks.push(VertexValue {
            vertex: v.clone(),
            value: slack,
        });
    }

    let mut cousin_total = 0.0;
    for (i, a) in verts.iter().enumerate() {
        for b in verts.iter().skip(i + 1) {
            if relation(a, b) == Relation::Cousins {
                cousin_total += w.pair(a, b).expect("pair covered");
            }
        }
    }
    let cousin_cap = delta / (shape.cardinality() as f64).powi(2);

    let pass = depth_sums.iter().all(|&s| s > 1.0 - eps)
        && slacks.iter().all(|s| 0.0 <= s.value && s.value < eps)
        && 0.0 <= cousin_total
        && cousin_total < cousin_cap;
    ExhaustionReport {
        pass,
        eps,
        delta,
        depth_sums,
        slacks,
        boundary_slacks,
        cousin_total,
        cousin_cap,
    }
}

fn level_vertices(m: &[usize], depth: usize) -> Vec<Vertex> {
    let mut level = vec![Vertex::root()];
    for &mk in &m[..depth] {
        let mut next = Vec::with_capacity(level.len() * mk);
        for v in &level {
            for i in 1..=mk as u32 {
                next.push(v.child(i));
            }
        }
        level = next;
    }
    level
}

/// Picks per-level branching counts from a tree of nested masses: the
/// smallest depth-1 count whose masses exceed 1 - eps strictly, then at each
/// deeper level the smallest count that recovers every chosen parent's mass
/// to within eps (closed comparison), raised until the level total again
/// exceeds 1 - eps. Masses that cannot reach a target are an error, since
/// the input was truncated too aggressively for this eps.
pub fn greedy_tree_shape(masses: &WeightedTree, eps: f64) -> Result<TreeShape, ClusterError> {
    check_nonneg("eps", eps)?;
    let bran = masses.shape().branching();
    let r = masses.shape().depth();
    let target = 1.0 - eps;

    let mut m: Vec<usize> = Vec::with_capacity(r);
    let mut acc = 0.0;
    let mut first = None;
    for i in 1..=bran[0] {
        acc += masses
            .get(&Vertex::root().child(i as u32))
            .expect("child in shape");
        if acc > target {
            first = Some(i);
            break;
        }
    }
    m.push(first.ok_or(ClusterError::InsufficientMass {
        depth: 1,
        available: acc,
        needed: target,
    })?);

    for k in 1..r {
        let parents = level_vertices(&m, k);
        // Least count recovering each parent to within eps of its own mass.
        let mut floor = 1usize;
        for p in &parents {
            let own = masses.get(p).expect("parent in shape");
            let goal = own - eps;
            let mut acc = 0.0;
            let mut got = None;
            for i in 1..=bran[k] {
                acc += masses.get(&p.child(i as u32)).expect("child in shape");
                if acc >= goal {
                    got = Some(i);
                    break;
                }
            }
            floor = floor.max(got.ok_or(ClusterError::InsufficientMass {
                depth: k + 1,
                available: acc,
                needed: goal,
            })?);
        }
        // Raise the common count until the whole level clears the target.
        let mut total = 0.0;
        let mut chosen = None;
        for cand in 1..=bran[k] {
            for p in &parents {
                total += masses.get(&p.child(cand as u32)).expect("child in shape");
            }
            if cand >= floor && total > target {
                chosen = Some(cand);
                break;
            }
        }
        m.push(chosen.ok_or(ClusterError::InsufficientMass {
            depth: k + 1,
            available: total,
            needed: target,
        })?);
    }
    Ok(TreeShape::new(m)?)
}

/// Core block scan shared by the public searches. Centers for every block
/// are drawn from the measure up front, so the outcome depends only on the
/// RNG stream and never on thread count; blocks are then checked in
/// parallel and the lowest passing index wins.
fn scan_blocks<M: AtomicMeasure + Sync>(
    measure: &M,
    q: &[f64],
    eps: f64,
    delta: f64,
    shape: &TreeShape,
    max_blocks: usize,
    rng: &mut impl Rng,
) -> Result<Option<(BallFamily, usize)>, ClusterError> {
    validate_measure(measure, 1e-9)?;
    check_levels(q)?;
    check_nonneg("eps", eps)?;
    check_nonneg("delta", delta)?;
    if shape.depth() != q.len() {
        return Err(ClusterError::DepthMismatch {
            shape: shape.depth(),
            levels: q.len(),
        });
    }
    let sampler = AtomSampler::new(measure)?;
    let card = shape.cardinality();
    let centers: Vec<usize> = (0..max_blocks * card).map(|_| sampler.draw(rng)).collect();

    let hit = (0..max_blocks).into_par_iter().find_first(|&b| {
        let family = build_balls(measure, shape, &centers[b * card..(b + 1) * card], q);
        let w = ball_weights(measure, &family);
        check_exhaustion_event(&w, shape, eps, delta).pass
    });
    Ok(hit.map(|b| {
        let family = build_balls(measure, shape, &centers[b * card..(b + 1) * card], q);
        (family, b + 1)
    }))
}

/// Draws up to `max_blocks` independent center blocks from the measure and
/// returns the first whose ball family passes the exhaustion event, along
/// with its 1-based block index. Exhausting the blocks without a pass is a
/// value, not an error.
pub fn search_exhaustion<M: AtomicMeasure + Sync>(
    measure: &M,
    q: &AdmissibleSequence,
    eps: f64,
    delta: f64,
    shape: &TreeShape,
    max_blocks: usize,
    rng: &mut impl Rng,
) -> Result<Option<(BallFamily, usize)>, ClusterError> {
    scan_blocks(measure, q.q(), eps, delta, shape, max_blocks, rng)
}

/// Exhaustion quality achieved by a cleaned decomposition. The cousin part
/// is exactly zero by construction, so only the eps side is measured.
#[derive(Debug, Clone, Serialize)]
pub struct CleanReport {
    /// Largest of the per-depth mass deficits and the parent slacks.
    pub eps_achieved: f64,
    /// Always zero: cleaned clusters at incomparable vertices are disjoint.
    pub delta_achieved: f64,
    pub depth_sums: Vec<f64>,
    pub slacks: Vec<VertexValue>,
    /// Internal vertices whose children tile them exactly.
    pub boundary_slacks: Vec<Vertex>,
}

/// Disjointified clusters on a shaped tree, together with the achieved
/// exhaustion quality and, once computed, the close/far statistics.
#[derive(Debug, Clone, Serialize)]
pub struct ClusterDecomposition {
    pub shape: TreeShape,
    /// Overlap levels the family was built at, one per depth.
    pub q: Vec<f64>,
    /// Sorted atom ids per vertex, enumerate order.
    pub clusters: Vec<Vec<usize>>,
    /// Cluster masses, enumerate order.
    pub masses: Vec<f64>,
    pub report: CleanReport,
    pub stats: Option<ClusteringStats>,
}

#[derive(Serialize)]
struct ClusterView<'a> {
    vertex: String,
    mass: f64,
    count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    atoms: Option<&'a [usize]>,
}

#[derive(Serialize)]
struct DecompositionView<'a> {
    shape: &'a [usize],
    q: &'a [f64],
    clusters: Vec<ClusterView<'a>>,
    report: &'a CleanReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    stats: &'a Option<ClusteringStats>,
}

impl ClusterDecomposition {
    /// Mass of the cluster at a vertex.
    pub fn mass(&self, v: &Vertex) -> Option<f64> {
        self.shape.index_of(v).map(|i| self.masses[i])
    }

    pub fn cluster(&self, v: &Vertex) -> Option<&[usize]> {
        self.shape.index_of(v).map(|i| self.clusters[i].as_slice())
    }

    /// JSON rendering; `include_atoms` controls whether per-vertex atom id
    /// lists appear or only their counts and masses, which keeps reports
    /// small for large supports.
    pub fn to_json(&self, include_atoms: bool) -> String {
        let verts = enumerate(&self.shape);
        let clusters = verts
            .iter()
            .enumerate()
            .map(|(i, v)| ClusterView {
                vertex: v.to_string(),
                mass: self.masses[i],
                count: self.clusters[i].len(),
                atoms: include_atoms.then_some(self.clusters[i].as_slice()),
            })
            .collect();
        let view = DecompositionView {
            shape: self.shape.branching(),
            q: &self.q,
            clusters,
            report: &self.report,
            stats: &self.stats,
        };
        serde_json::to_string_pretty(&view).expect("report serializes")
    }
}

/// Disjointifies a ball family by removing from each ball every atom that
/// also lies in the ball of an incomparable vertex. Clusters at incomparable
/// vertices are then exactly disjoint, the nesting along ancestor chains
/// survives, and each parent still contains the union of its children; the
/// report records the exhaustion quality that remains.
pub fn clean_clusters(
    family: &BallFamily,
    measure: &impl AtomicMeasure,
) -> ClusterDecomposition {
    let shape = family.shape.clone();
    let verts = enumerate(&shape);
    let n = measure.n_atoms();

    let in_ball: Vec<Vec<bool>> = family
        .balls
        .iter()
        .map(|ball| {
            let mut mask = vec![false; n];
            for &a in ball {
                mask[a] = true;
            }
            mask
        })
        .collect();
    let clusters: Vec<Vec<usize>> = verts
        .iter()
        .enumerate()
        .map(|(vi, v)| {
            let cousin_masks: Vec<&Vec<bool>> = verts
                .iter()
                .enumerate()
                .filter(|(_, u)| relation(v, u) == Relation::Cousins)
                .map(|(ui, _)| &in_ball[ui])
                .collect();
            family.balls[vi]
                .iter()
                .copied()
                .filter(|&a| cousin_masks.iter().all(|m| !m[a]))
                .collect()
        })
        .collect();
    let masses: Vec<f64> = clusters.iter().map(|c| mass_of(measure, c)).collect();

    let r = shape.depth();
    let mut depth_sums = vec![0.0; r];
    for (vi, v) in verts.iter().enumerate() {
        depth_sums[v.depth() - 1] += masses[vi];
    }
    let mut slacks = Vec::new();
    let mut boundary_slacks = Vec::new();
    for (vi, v) in verts.iter().enumerate() {
        if v.depth() == r {
            continue;
        }
        let kids: f64 = (1..=shape.branching()[v.depth()] as u32)
            .map(|i| {
                let ci = shape.index_of(&v.child(i)).expect("child in shape");
                masses[ci]
            })
            .sum();
        let slack = masses[vi] - kids;
        if slack == 0.0 {
            boundary_slacks.push(v.clone());
        }
        slacks.push(VertexValue {
            vertex: v.clone(),
            value: slack,
        });
    }
    let worst_deficit = depth_sums
        .iter()
        .map(|&s| 1.0 - s)
        .fold(0.0f64, |a, b| a.max(b));
    let worst_slack = slacks.iter().map(|s| s.value).fold(0.0f64, |a, b| a.max(b));

    ClusterDecomposition {
        shape,
        q: family.q.clone(),
        clusters,
        masses,
        report: CleanReport {
            eps_achieved: worst_deficit.max(worst_slack),
            delta_achieved: 0.0,
            depth_sums,
            slacks,
            boundary_slacks,
        },
        stats: None,
    }
}

/// Close statistic for one vertex: the two-replica probability that both
/// replicas land in the cluster yet overlap at most the vertex level minus
/// the margin.
#[derive(Debug, Clone, Serialize)]
pub struct VertexStat {
    pub vertex: Vertex,
    pub value: f64,
    pub stderr: f64,
}

/// Far statistic for one unordered incomparable pair: the probability that
/// replicas land one in each cluster yet overlap at least the level one past
/// their meet depth plus the margin. The ordered and reversed probabilities
/// coincide, so the pair is reported once.
#[derive(Debug, Clone, Serialize)]
pub struct PairStat {
    pub left: Vertex,
    pub right: Vertex,
    pub meet_depth: usize,
    pub value: f64,
    pub stderr: f64,
}

/// Close/far statistics of a decomposition at margin `a`, with `b` the worst
/// probability observed across both families.
#[derive(Debug, Clone, Serialize)]
pub struct ClusteringStats {
    pub a: f64,
    pub b: f64,
    pub f: Vec<VertexStat>,
    pub g: Vec<PairStat>,
    pub f_total: f64,
    pub g_total: f64,
    /// "exact" for full double sums, "mc" for pair sampling.
    pub mode: String,
    /// Pair draws in mc mode; zero when exact.
    pub samples: usize,
}

fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Computes the close statistic per vertex and the far statistic per
/// unordered incomparable pair of the decomposition, at margin `eps` around
/// the levels `q`. Supports up to [`EXACT_SUMMATION_CAP`] atoms are summed
/// exactly; larger ones are estimated from `mc_samples` replica pairs (zero
/// meaning a default of 100000) with binomial standard errors.
pub fn clustering_stats<M: AtomicMeasure + Sync>(
    measure: &M,
    dec: &ClusterDecomposition,
    q: &[f64],
    eps: f64,
    mc_samples: usize,
    rng: &mut impl Rng,
) -> ClusteringStats {
    assert_eq!(q.len(), dec.shape.depth(), "one level per depth");
    let verts = enumerate(&dec.shape);
    let cousin_pairs: Vec<(usize, usize, usize)> = verts
        .iter()
        .enumerate()
        .flat_map(|(i, a)| {
            verts
                .iter()
                .enumerate()
                .skip(i + 1)
                .filter(move |(_, b)| relation(a, b) == Relation::Cousins)
                .map(move |(j, b)| (i, j, meet(a, b).depth()))
        })
        .collect();
    let f_threshold = |vi: usize| q[verts[vi].depth() - 1] - eps;
    let g_threshold = |k: usize| q[k] + eps;

    let exact = measure.n_atoms() <= EXACT_SUMMATION_CAP;
    let (f, g, samples) = if exact {
        let f: Vec<VertexStat> = verts
            .par_iter()
            .enumerate()
            .map(|(vi, v)| {
                let t = f_threshold(vi);
                let c = &dec.clusters[vi];
                let mut value = 0.0;
                for &i in c {
                    for &j in c {
                        if measure.overlap(i, j) <= t {
                            value += measure.mass(i) * measure.mass(j);
                        }
                    }
                }
                VertexStat {
                    vertex: v.clone(),
                    value,
                    stderr: 0.0,
                }
            })
            .collect();
        let g: Vec<PairStat> = cousin_pairs
            .par_iter()
            .map(|&(vi, vj, k)| {
                let t = g_threshold(k);
                let mut value = 0.0;
                for &i in &dec.clusters[vi] {
                    for &j in &dec.clusters[vj] {
                        if measure.overlap(i, j) >= t {
                            value += measure.mass(i) * measure.mass(j);
                        }
                    }
                }
                PairStat {
                    left: verts[vi].clone(),
                    right: verts[vj].clone(),
                    meet_depth: k,
                    value,
                    stderr: 0.0,
                }
            })
            .collect();
        (f, g, 0)
    } else {
        let s = if mc_samples == 0 {
            DEFAULT_MC_PAIRS
        } else {
            mc_samples
        };
        let n = measure.n_atoms();
        let member: Vec<Vec<bool>> = dec
            .clusters
            .iter()
            .map(|c| {
                let mut mask = vec![false; n];
                for &a in c {
                    mask[a] = true;
                }
                mask
            })
            .collect();
        let sampler = AtomSampler::new(measure).expect("decomposition came from this measure");
        let mut f_hits = vec![0usize; verts.len()];
        let mut g_hits = vec![0usize; cousin_pairs.len()];
        for _ in 0..s {
            let (i, j) = (sampler.draw(rng), sampler.draw(rng));
            let ovl = measure.overlap(i, j);
            for (vi, hits) in f_hits.iter_mut().enumerate() {
                if member[vi][i] && member[vi][j] && ovl <= f_threshold(vi) {
                    *hits += 1;
                }
            }
            for (pi, &(vi, vj, k)) in cousin_pairs.iter().enumerate() {
                if member[vi][i] && member[vj][j] && ovl >= g_threshold(k) {
                    g_hits[pi] += 1;
                }
            }
        }
        let f = verts
            .iter()
            .enumerate()
            .map(|(vi, v)| {
                let p = f_hits[vi] as f64 / s as f64;
                VertexStat {
                    vertex: v.clone(),
                    value: p,
                    stderr: binomial_se(p, s),
                }
            })
            .collect();
        let g = cousin_pairs
            .iter()
            .enumerate()
            .map(|(pi, &(vi, vj, k))| {
                let p = g_hits[pi] as f64 / s as f64;
                PairStat {
                    left: verts[vi].clone(),
                    right: verts[vj].clone(),
                    meet_depth: k,
                    value: p,
                    stderr: binomial_se(p, s),
                }
            })
            .collect();
        (f, g, s)
    };

    let f_total: f64 = f.iter().map(|s| s.value).sum();
    let g_total: f64 = g.iter().map(|s| s.value).sum();
    let b = f
        .iter()
        .map(|s| s.value)
        .chain(g.iter().map(|s| s.value))
        .fold(0.0f64, |a, v| a.max(v));
    ClusteringStats {
        a: eps,
        b,
        f,
        g,
        f_total,
        g_total,
        mode: if exact { "exact" } else { "mc" }.into(),
        samples,
    }
}

/// Cluster masses rearranged into standard order, with the permutation that
/// produced the arrangement. Vertices without atoms contribute zeros.
pub fn cluster_masses(dec: &ClusterDecomposition) -> StandardOrder {
    let tree = WeightedTree::new(dec.shape.clone(), dec.masses.clone())
        .expect("masses align with the shape by construction");
    standard_order(&tree)
}

/// One off-diagonal term of the orthogonality check.
#[derive(Debug, Clone, Serialize)]
pub struct OrthogonalPair {
    pub k: usize,
    pub l: usize,
    pub value: f64,
}

/// Outcome of [`orthogonal_structure_check`].
#[derive(Debug, Clone, Serialize)]
pub struct OrthogonalReport {
    pub pass: bool,
    pub eps: f64,
    /// Mean absolute overlap restricted to each unordered pair of distinct
    /// sets, for the first `k0` sets.
    pub pairs: Vec<OrthogonalPair>,
    /// Masses of all supplied sets, for comparison against whatever mass
    /// floor the caller works with.
    pub masses: Vec<f64>,
    pub mode: String,
}

/// Exact double sums of the mean absolute overlap between distinct sets
/// among the first `k0`, passing when every value stays under `eps`. Cost
/// grows with the product of set sizes.
pub fn orthogonal_structure_check<M: AtomicMeasure + Sync>(
    measure: &M,
    clusters: &[Vec<usize>],
    eps: f64,
    k0: usize,
) -> OrthogonalReport {
    assert!(k0 <= clusters.len(), "k0 exceeds the cluster count");
    let index_pairs: Vec<(usize, usize)> = (0..k0)
        .flat_map(|k| (k + 1..k0).map(move |l| (k, l)))
        .collect();
    let pairs: Vec<OrthogonalPair> = index_pairs
        .par_iter()
        .map(|&(k, l)| {
            let mut value = 0.0;
            for &i in &clusters[k] {
                for &j in &clusters[l] {
                    value += measure.mass(i) * measure.mass(j) * measure.overlap(i, j).abs();
                }
            }
            OrthogonalPair { k, l, value }
        })
        .collect();
    let masses = clusters.iter().map(|c| mass_of(measure, c)).collect();
    OrthogonalReport {
        pass: pairs.iter().all(|p| p.value < eps),
        eps,
        pairs,
        masses,
        mode: "exact".into(),
    }
}

/// One leaf state of the single-level variant.
#[derive(Debug, Clone, Serialize)]
pub struct PureState {
    pub vertex: Vertex,
    pub center: usize,
    pub atoms: Vec<usize>,
    pub mass: f64,
    /// Mean absolute deviation of the overlap from `q_star` over pairs
    /// inside the state.
    pub deviation: f64,
    pub deviation_se: f64,
    /// Probability that two replicas near the center overlap above
    /// `q_star + delta`.
    pub h: f64,
    pub h_se: f64,
}

/// Outcome of [`pure_state_variant`].
#[derive(Debug, Clone, Serialize)]
pub struct PureStateReport {
    pub q_star: f64,
    pub delta: f64,
    /// 1-based index of the passing center block.
    pub block: usize,
    /// States in decreasing mass order.
    pub leaves: Vec<PureState>,
    pub h_total: f64,
    pub mode: String,
    pub samples: usize,
}

/// Runs the depth-1 search at the single level `q_star - delta`, cleans the
/// passing family, and reports the states in decreasing mass order together
/// with their overlap deviation integrals and the concentration statistic
/// `h`. The internal event runs at (eps/2, eps/2) so the cleaned family
/// achieves eps with exactly disjoint states. A scan that exhausts its
/// blocks returns `None`.
pub fn pure_state_variant<M: AtomicMeasure + Sync>(
    measure: &M,
    q_star: f64,
    delta: f64,
    eps: f64,
    shape: &TreeShape,
    max_blocks: usize,
    rng: &mut impl Rng,
) -> Result<Option<PureStateReport>, ClusterError> {
    if !(q_star > 0.0 && q_star <= 1.0) {
        return Err(ClusterError::BadParameter {
            name: "q_star",
            value: q_star,
        });
    }
    if !delta.is_finite() || delta <= 0.0 || delta >= q_star {
        return Err(ClusterError::BadParameter {
            name: "delta",
            value: delta,
        });
    }
    check_nonneg("eps", eps)?;
    if shape.depth() != 1 {
        return Err(ClusterError::DeepShape(shape.depth()));
    }

    let level = [q_star - delta];
    let found = scan_blocks(measure, &level, eps / 2.0, eps / 2.0, shape, max_blocks, rng)?;
    let Some((family, block)) = found else {
        return Ok(None);
    };
    let dec = clean_clusters(&family, measure);

    let mut order: Vec<usize> = (0..dec.clusters.len()).collect();
    order.sort_by(|&a, &b| dec.masses[b].partial_cmp(&dec.masses[a]).expect("finite"));

    let radius = q_star - delta - eps;
    let top = q_star + delta;
    let exact = measure.n_atoms() <= EXACT_SUMMATION_CAP;
    let samples = if exact { 0 } else { DEFAULT_MC_PAIRS };
    let verts = enumerate(&dec.shape);

    let leaves: Vec<PureState> = order
        .iter()
        .map(|&vi| {
            let atoms = &dec.clusters[vi];
            let center = family.centers[vi];
            let (deviation, deviation_se, h, h_se) = if exact {
                let mut dev = 0.0;
                for &i in atoms {
                    for &j in atoms {
                        dev += measure.mass(i)
                            * measure.mass(j)
                            * (measure.overlap(i, j) - q_star).abs();
                    }
                }
                // Two replicas near the center but far above q_star; the
                // near-ball widens the search radius by eps.
                let near: Vec<usize> = (0..measure.n_atoms())
                    .filter(|&a| measure.overlap(center, a) >= radius)
                    .collect();
                let mut h = 0.0;
                for &i in &near {
                    for &j in &near {
                        if measure.overlap(i, j) >= top {
                            h += measure.mass(i) * measure.mass(j);
                        }
                    }
                }
                (dev, 0.0, h, 0.0)
            } else {
                let sampler =
                    AtomSampler::new(measure).expect("measure validated by the scan");
                let mut member = vec![false; measure.n_atoms()];
                for &a in atoms {
                    member[a] = true;
                }
                let (mut dev_sum, mut dev_sq) = (0.0, 0.0);
                let mut h_hits = 0usize;
                for _ in 0..samples {
                    let (i, j) = (sampler.draw(rng), sampler.draw(rng));
                    let ovl = measure.overlap(i, j);
                    let d = if member[i] && member[j] {
                        (ovl - q_star).abs()
                    } else {
                        0.0
                    };
                    dev_sum += d;
                    dev_sq += d * d;
                    if measure.overlap(center, i) >= radius
                        && measure.overlap(center, j) >= radius
                        && ovl >= top
                    {
                        h_hits += 1;
                    }
                }
                let sf = samples as f64;
                let dev = dev_sum / sf;
                let dev_var = (dev_sq / sf - dev * dev).max(0.0) / sf;
                let h = h_hits as f64 / sf;
                (dev, dev_var.sqrt(), h, binomial_se(h, samples))
            };
            PureState {
                vertex: verts[vi].clone(),
                center,
                atoms: atoms.clone(),
                mass: dec.masses[vi],
                deviation,
                deviation_se,
                h,
                h_se,
            }
        })
        .collect();
    let h_total = leaves.iter().map(|s| s.h).sum();

    Ok(Some(PureStateReport {
        q_star,
        delta,
        block,
        leaves,
        h_total,
        mode: if exact { "exact" } else { "mc" }.into(),
        samples,
    }))
}
