//! Vertex algebra on the rooted tree of finite integer paths.
//!
//! A vertex is a path of positive integers; the empty path is the root. A
//! `TreeShape` fixes per-level branching counts (m_1, ..., m_r) and carves a
//! finite subtree out of the infinite tree. `WeightedTree` attaches a mass to
//! every non-root vertex of a shape and supports the recursive decreasing
//! rearrangement ("standard order") in which whole subtrees move with their
//! roots.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("vertex at depth {depth} has no children (tree depth is {max_depth})")]
    LeafHasNoChildren { depth: usize, max_depth: usize },
    #[error("vertex {vertex} does not fit shape {shape}")]
    VertexOutsideShape { vertex: String, shape: String },
    #[error("shape branching counts must all be at least 1")]
    EmptyBranch,
    #[error("weight vector has length {got}, shape has {want} vertices")]
    WeightLength { got: usize, want: usize },
    #[error("cannot parse {0:?} as a vertex path like \"[1,2,3]\"")]
    BadVertexString(String),
}

/// Path from the root; entries are 1-based child indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vertex {
    path: Vec<u32>,
}

impl Vertex {
    pub fn root() -> Self {
        Vertex { path: Vec::new() }
    }

    /// Panics if any entry is zero; child indices are 1-based.
    pub fn new(path: impl Into<Vec<u32>>) -> Self {
        let path = path.into();
        assert!(path.iter().all(|&c| c >= 1), "path entries are 1-based");
        Vertex { path }
    }

    pub fn depth(&self) -> usize {
        self.path.len()
    }

    pub fn is_root(&self) -> bool {
        self.path.is_empty()
    }

    pub fn path(&self) -> &[u32] {
        &self.path
    }

    pub fn parent(&self) -> Option<Vertex> {
        if self.is_root() {
            None
        } else {
            Some(Vertex {
                path: self.path[..self.path.len() - 1].to_vec(),
            })
        }
    }

    pub fn child(&self, index: u32) -> Vertex {
        assert!(index >= 1);
        let mut path = self.path.clone();
        path.push(index);
        Vertex { path }
    }

    /// True iff `self` is a proper prefix of `other`.
    pub fn is_ancestor_of(&self, other: &Vertex) -> bool {
        self.depth() < other.depth() && other.path[..self.depth()] == self.path[..]
    }

    /// Ancestor of `self` at the given depth (depth 0 is the root).
    pub fn ancestor(&self, depth: usize) -> Vertex {
        assert!(depth <= self.depth());
        Vertex {
            path: self.path[..depth].to_vec(),
        }
    }
}

impl fmt::Display for Vertex {
    /// Renders as a JSON-style integer array, e.g. `[1,2,3]`; root is `[]`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, c) in self.path.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "]")
    }
}

impl std::str::FromStr for Vertex {
    type Err = TreeError;

    /// Inverse of `Display`: parses `[1,2,3]` (root: `[]`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TreeError::BadVertexString(s.to_string());
        let inner = s
            .strip_prefix('[')
            .and_then(|t| t.strip_suffix(']'))
            .ok_or_else(bad)?;
        if inner.trim().is_empty() {
            return Ok(Vertex::root());
        }
        let mut path = Vec::new();
        for part in inner.split(',') {
            let c: u32 = part.trim().parse().map_err(|_| bad())?;
            if c == 0 {
                return Err(bad());
            }
            path.push(c);
        }
        Ok(Vertex { path })
    }
}

/// Least common ancestor: the longest common prefix of the two paths.
pub fn meet(a: &Vertex, b: &Vertex) -> Vertex {
    let k = a
        .path
        .iter()
        .zip(b.path.iter())
        .take_while(|(x, y)| x == y)
        .count();
    Vertex {
        path: a.path[..k].to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Equal,
    /// First argument is a strict ancestor of the second.
    Ancestor,
    /// First argument is a strict descendant of the second.
    Descendant,
    /// Neither is a prefix of the other.
    Cousins,
}

pub fn relation(a: &Vertex, b: &Vertex) -> Relation {
    let m = meet(a, b);
    match (m.depth() == a.depth(), m.depth() == b.depth()) {
        (true, true) => Relation::Equal,
        (true, false) => Relation::Ancestor,
        (false, true) => Relation::Descendant,
        (false, false) => Relation::Cousins,
    }
}

/// Branching counts (m_1, ..., m_r); level k vertices have m_{k+1} children.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TreeShape {
    m: Vec<usize>,
}

impl TreeShape {
    pub fn new(m: impl Into<Vec<usize>>) -> Result<Self, TreeError> {
        let m = m.into();
        if m.iter().any(|&c| c == 0) {
            return Err(TreeError::EmptyBranch);
        }
        Ok(TreeShape { m })
    }

    /// Uniform branching m at every one of r levels.
    pub fn uniform(r: usize, m: usize) -> Self {
        TreeShape::new(vec![m; r]).expect("m >= 1")
    }

    pub fn depth(&self) -> usize {
        self.m.len()
    }

    pub fn branching(&self) -> &[usize] {
        &self.m
    }

    /// Number of non-root vertices: sum over k of m_1 * ... * m_k.
    pub fn cardinality(&self) -> usize {
        let mut total = 0usize;
        let mut level = 1usize;
        for &mk in &self.m {
            level *= mk;
            total += level;
        }
        total
    }

    /// Position of `v` in `enumerate` order; None for the root and for
    /// vertices outside the shape.
    pub fn index_of(&self, v: &Vertex) -> Option<usize> {
        if !self.contains(v) || v.is_root() {
            return None;
        }
        // Depth-then-lex order: vertices shallower than v come first, then the
        // lexicographic rank of v's path within its own level.
        let mut offset = 0usize;
        let mut level = 1usize;
        for k in 0..v.depth() - 1 {
            level *= self.m[k];
            offset += level;
        }
        let mut rank = 0usize;
        for (k, &c) in v.path().iter().enumerate() {
            rank = rank * self.m[k] + (c as usize - 1);
        }
        Some(offset + rank)
    }

    pub fn contains(&self, v: &Vertex) -> bool {
        v.depth() <= self.depth()
            && v.path()
                .iter()
                .enumerate()
                .all(|(k, &c)| (c as usize) <= self.m[k])
    }
}

/// Children of `v` inside `shape`, in index order.
pub fn children(v: &Vertex, shape: &TreeShape) -> Result<Vec<Vertex>, TreeError> {
    if !shape.contains(v) {
        return Err(TreeError::VertexOutsideShape {
            vertex: v.to_string(),
            shape: format!("{:?}", shape.branching()),
        });
    }
    if v.depth() == shape.depth() {
        return Err(TreeError::LeafHasNoChildren {
            depth: v.depth(),
            max_depth: shape.depth(),
        });
    }
    let m = shape.m[v.depth()];
    Ok((1..=m as u32).map(|i| v.child(i)).collect())
}

/// Relabeling onto the i-th shifted copy of the shape: the first coordinate
/// gains (i-1) * m_1, so copy 1 is the identity. The root is fixed.
pub fn shift(v: &Vertex, shape: &TreeShape, i: usize) -> Vertex {
    assert!(i >= 1);
    if v.is_root() {
        return v.clone();
    }
    let mut path = v.path().to_vec();
    path[0] += ((i - 1) * shape.m[0]) as u32;
    Vertex { path }
}

/// All non-root vertices in depth-then-lexicographic order.
pub fn enumerate(shape: &TreeShape) -> Vec<Vertex> {
    let mut out = Vec::with_capacity(shape.cardinality());
    let mut level: Vec<Vertex> = vec![Vertex::root()];
    for &mk in &shape.m {
        let mut next = Vec::with_capacity(level.len() * mk);
        for v in &level {
            for i in 1..=mk as u32 {
                next.push(v.child(i));
            }
        }
        out.extend(next.iter().cloned());
        level = next;
    }
    out
}

/// Masses on the non-root vertices of a shape, stored in enumerate order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedTree {
    shape: TreeShape,
    weights: Vec<f64>,
}

impl WeightedTree {
    /// `weights` must be aligned with `enumerate(&shape)` and nonnegative.
    pub fn new(shape: TreeShape, weights: Vec<f64>) -> Result<Self, TreeError> {
        if weights.len() != shape.cardinality() {
            return Err(TreeError::WeightLength {
                got: weights.len(),
                want: shape.cardinality(),
            });
        }
        Ok(WeightedTree { shape, weights })
    }

    pub fn from_fn(shape: TreeShape, f: impl Fn(&Vertex) -> f64) -> Self {
        let weights = enumerate(&shape).iter().map(f).collect();
        WeightedTree { shape, weights }
    }

    pub fn shape(&self) -> &TreeShape {
        &self.shape
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn index_of(&self, v: &Vertex) -> Option<usize> {
        self.shape.index_of(v)
    }

    pub fn get(&self, v: &Vertex) -> Option<f64> {
        self.index_of(v).map(|i| self.weights[i])
    }

    /// Sum of the weights at one depth (1-based).
    pub fn level_sum(&self, depth: usize) -> f64 {
        let verts = enumerate(&self.shape);
        verts
            .iter()
            .zip(&self.weights)
            .filter(|(v, _)| v.depth() == depth)
            .map(|(_, w)| w)
            .sum()
    }
}

/// Rearrangement into standard order together with the permutation that
/// produced it: `perm[new_index] = old_index` over enumerate order.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardOrder {
    pub tree: WeightedTree,
    pub perm: Vec<usize>,
}

/// Recursive decreasing rearrangement. Sibling blocks are sorted by weight
/// (ties kept in original index order) and each subtree moves with its root.
pub fn standard_order(w: &WeightedTree) -> StandardOrder {
    let shape = w.shape().clone();
    let verts = enumerate(&shape);
    // old_path_of[new vertex] accumulated level by level.
    let mut relabel: Vec<(Vertex, Vertex)> = Vec::new(); // (new, old) pairs
    let mut frontier: Vec<(Vertex, Vertex)> = vec![(Vertex::root(), Vertex::root())];
    for (depth, &mk) in shape.branching().iter().enumerate() {
        let mut next = Vec::with_capacity(frontier.len() * mk);
        for (new_parent, old_parent) in &frontier {
            let mut kids: Vec<(u32, f64)> = (1..=mk as u32)
                .map(|i| {
                    let old_child = old_parent.child(i);
                    (i, w.get(&old_child).expect("child in shape"))
                })
                .collect();
            // Stable sort keeps equal weights in original index order.
            kids.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("weights are not NaN"));
            for (new_idx, (old_idx, _)) in kids.iter().enumerate() {
                let new_child = new_parent.child(new_idx as u32 + 1);
                let old_child = old_parent.child(*old_idx);
                next.push((new_child, old_child));
            }
        }
        relabel.extend(next.iter().cloned());
        frontier = next;
        let _ = depth;
    }

    let mut weights = vec![0.0; verts.len()];
    let mut perm = vec![0usize; verts.len()];
    for (new_v, old_v) in &relabel {
        let ni = w.index_of(new_v).expect("new vertex in shape");
        let oi = w.index_of(old_v).expect("old vertex in shape");
        weights[ni] = w.weights[oi];
        perm[ni] = oi;
    }
    StandardOrder {
        tree: WeightedTree { shape, weights },
        perm,
    }
}

/// True iff every sibling block is decreasing, recursively.
pub fn is_standard_order(w: &WeightedTree) -> bool {
    let mut frontier: Vec<Vertex> = vec![Vertex::root()];
    for &mk in w.shape().branching() {
        let mut next = Vec::with_capacity(frontier.len() * mk);
        for parent in &frontier {
            let ws: Vec<f64> = (1..=mk as u32)
                .map(|i| w.get(&parent.child(i)).expect("child in shape"))
                .collect();
            if ws.windows(2).any(|p| p[0] < p[1]) {
                return false;
            }
            next.extend((1..=mk as u32).map(|i| parent.child(i)));
        }
        frontier = next;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(path: &[u32]) -> Vertex {
        Vertex::new(path.to_vec())
    }

    #[test]
    fn meet_takes_longest_common_prefix() {
        assert_eq!(meet(&v(&[1, 2, 3]), &v(&[1, 2, 5])), v(&[1, 2]));
        assert_eq!(meet(&v(&[1]), &v(&[2])), Vertex::root());
        let a = v(&[3, 1, 4]);
        assert_eq!(meet(&a, &a), a);
    }

    #[test]
    fn meet_is_commutative_and_idempotent() {
        let cases = [
            (v(&[1, 2]), v(&[1, 3, 1])),
            (v(&[2]), v(&[2, 1])),
            (Vertex::root(), v(&[5])),
        ];
        for (a, b) in &cases {
            assert_eq!(meet(a, b), meet(b, a));
            let m = meet(a, b);
            assert_eq!(meet(&m, a), m);
            assert_eq!(meet(&m, &m), m);
        }
    }

    #[test]
    fn relation_classifies_pairs() {
        assert_eq!(relation(&v(&[1, 2]), &v(&[1, 2, 4])), Relation::Ancestor);
        assert_eq!(relation(&v(&[1, 2, 4]), &v(&[1, 2])), Relation::Descendant);
        assert_eq!(relation(&v(&[1, 3]), &v(&[2, 1])), Relation::Cousins);
        assert_eq!(relation(&v(&[2]), &v(&[2])), Relation::Equal);
    }

    #[test]
    fn children_follow_shape() {
        let shape = TreeShape::new(vec![2, 3]).unwrap();
        assert_eq!(
            children(&Vertex::root(), &shape).unwrap(),
            vec![v(&[1]), v(&[2])]
        );
        assert_eq!(
            children(&v(&[1]), &shape).unwrap(),
            vec![v(&[1, 1]), v(&[1, 2]), v(&[1, 3])]
        );
        assert!(matches!(
            children(&v(&[1, 1]), &shape),
            Err(TreeError::LeafHasNoChildren { .. })
        ));
    }

    #[test]
    fn shift_adds_multiples_of_first_branching() {
        let shape = TreeShape::new(vec![2, 2]).unwrap();
        assert_eq!(shift(&v(&[1, 1]), &shape, 2), v(&[3, 1]));
        assert_eq!(shift(&v(&[2, 1]), &shape, 1), v(&[2, 1]));
        assert_eq!(shift(&Vertex::root(), &shape, 7), Vertex::root());
    }

    #[test]
    fn enumerate_is_depth_then_lex() {
        let shape = TreeShape::new(vec![2, 1]).unwrap();
        assert_eq!(
            enumerate(&shape),
            vec![v(&[1]), v(&[2]), v(&[1, 1]), v(&[2, 1])]
        );
        let chain = TreeShape::new(vec![1, 1, 1]).unwrap();
        assert_eq!(enumerate(&chain).len(), 3);
        let flat = TreeShape::new(vec![3]).unwrap();
        assert_eq!(enumerate(&flat).len(), 3);
    }

    #[test]
    fn enumerate_counts_and_indexing_agree() {
        for m in [vec![2, 3], vec![3, 1, 2], vec![4]] {
            let shape = TreeShape::new(m).unwrap();
            let verts = enumerate(&shape);
            assert_eq!(verts.len(), shape.cardinality());
            let wt = WeightedTree::new(shape.clone(), vec![0.0; verts.len()]).unwrap();
            for (i, vert) in verts.iter().enumerate() {
                assert_eq!(wt.index_of(vert), Some(i), "vertex {vert}");
            }
            // All distinct.
            let mut seen = std::collections::HashSet::new();
            assert!(verts.iter().all(|x| seen.insert(x.clone())));
        }
    }

    #[test]
    fn standard_order_level_one() {
        let shape = TreeShape::new(vec![3]).unwrap();
        let wt = WeightedTree::new(shape, vec![0.2, 0.5, 0.3]).unwrap();
        let so = standard_order(&wt);
        assert_eq!(so.tree.weights(), &[0.5, 0.3, 0.2]);
        // 0-based permutation of old indices (2,3,1) in 1-based terms.
        assert_eq!(so.perm, vec![1, 2, 0]);
    }

    #[test]
    fn standard_order_already_sorted_is_identity() {
        let shape = TreeShape::new(vec![2, 2]).unwrap();
        let wt = WeightedTree::new(shape, vec![0.6, 0.4, 0.4, 0.2, 0.3, 0.1]).unwrap();
        let so = standard_order(&wt);
        assert_eq!(so.tree, wt);
        assert_eq!(so.perm, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn standard_order_moves_subtrees_with_roots() {
        // Weights {(1):0.3, (2):0.7, (1,1):0.3, (1,2):0, (2,1):0.2, (2,2):0.5}.
        let shape = TreeShape::new(vec![2, 2]).unwrap();
        let wt = WeightedTree::new(shape, vec![0.3, 0.7, 0.3, 0.0, 0.2, 0.5]).unwrap();
        let so = standard_order(&wt);
        // Root order becomes (2),(1); children of the new first vertex are the
        // old (2,2),(2,1) pair re-sorted to (0.5, 0.2).
        assert_eq!(so.tree.weights(), &[0.7, 0.3, 0.5, 0.2, 0.3, 0.0]);
    }

    /// Brute force over all sibling rearrangements: keep those that are
    /// recursively decreasing, and among them pick the stable one (smallest
    /// old-index sequence in enumerate order).
    fn standard_order_oracle(wt: &WeightedTree) -> Vec<f64> {
        fn rec(parent_old: &Vertex, wt: &WeightedTree, out: &mut Vec<Vec<Vertex>>) {
            // Produces, per parent in new-tree DFS order, the candidate old-child orders.
            let depth = parent_old.depth();
            if depth == wt.shape().depth() {
                return;
            }
            let m = wt.shape().branching()[depth];
            let mut perms: Vec<Vec<u32>> = Vec::new();
            permutations(&(1..=m as u32).collect::<Vec<_>>(), &mut vec![], &mut perms);
            let valid: Vec<Vec<u32>> = perms
                .into_iter()
                .filter(|p| {
                    let ws: Vec<f64> = p
                        .iter()
                        .map(|&i| wt.get(&parent_old.child(i)).unwrap())
                        .collect();
                    ws.windows(2).all(|q| q[0] >= q[1])
                })
                .collect();
            // Stable choice: lexicographically smallest index sequence.
            let best = valid.into_iter().min().unwrap();
            out.push(best.iter().map(|&i| parent_old.child(i)).collect());
        }

        fn permutations(items: &[u32], acc: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if acc.len() == items.len() {
                out.push(acc.clone());
                return;
            }
            for &x in items {
                if !acc.contains(&x) {
                    acc.push(x);
                    permutations(items, acc, out);
                    acc.pop();
                }
            }
        }

        // Walk the new tree breadth-first, resolving each parent's child order.
        let mut weights = Vec::new();
        let mut frontier: Vec<Vertex> = vec![Vertex::root()]; // old labels
        for _ in 0..wt.shape().depth() {
            let mut next = Vec::new();
            for old_parent in &frontier {
                let mut orders = Vec::new();
                rec(old_parent, wt, &mut orders);
                for old_child in &orders[0] {
                    weights.push(wt.get(old_child).unwrap());
                    next.push(old_child.clone());
                }
            }
            frontier = next;
        }
        weights
    }

    #[test]
    fn standard_order_matches_brute_force_on_depth_two() {
        let shape = TreeShape::new(vec![2, 2]).unwrap();
        let cases = [
            vec![0.3, 0.7, 0.3, 0.0, 0.2, 0.5],
            vec![0.1, 0.1, 0.4, 0.4, 0.2, 0.9],
            vec![0.5, 0.5, 0.0, 1.0, 1.0, 0.0],
        ];
        for weights in cases {
            let wt = WeightedTree::new(shape.clone(), weights).unwrap();
            let so = standard_order(&wt);
            assert_eq!(so.tree.weights(), standard_order_oracle(&wt).as_slice());
        }
    }

    #[test]
    fn standard_order_is_idempotent_and_preserves_level_multisets() {
        let shape = TreeShape::new(vec![3, 2]).unwrap();
        let wt = WeightedTree::new(
            shape,
            vec![0.2, 0.5, 0.3, 0.1, 0.05, 0.3, 0.15, 0.2, 0.05],
        )
        .unwrap();
        let once = standard_order(&wt);
        let twice = standard_order(&once.tree);
        assert_eq!(once.tree, twice.tree);
        assert!(is_standard_order(&once.tree));
        for depth in 1..=2 {
            let mut a: Vec<f64> = enumerate(wt.shape())
                .iter()
                .filter(|x| x.depth() == depth)
                .map(|x| wt.get(x).unwrap())
                .collect();
            let mut b: Vec<f64> = enumerate(once.tree.shape())
                .iter()
                .filter(|x| x.depth() == depth)
                .map(|x| once.tree.get(x).unwrap())
                .collect();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            assert_eq!(a, b);
        }
    }
}
