//! Directed trees and DAGs with deterministic traversal orders.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

pub type VertexId = usize;

/// Structure of a model: vertex `root` plus one in-edge per other vertex.
///
/// Every non-root vertex has exactly one incoming edge, which may have
/// several parents (a multi-parent edge of a DAG). Vertices without children
/// are leaves and carry the observations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    root: VertexId,
    parents: Vec<Vec<VertexId>>,
    children: Vec<Vec<VertexId>>,
    height: Vec<usize>,
    backward: Vec<VertexId>,
}

impl Graph {
    /// `in_edges[v]` lists the parents of `v`; the root's list must be empty.
    pub fn new(root: VertexId, in_edges: Vec<Vec<VertexId>>) -> Result<Self> {
        let n = in_edges.len();
        if root >= n {
            return Err(Error::UnknownVertex(root));
        }
        if !in_edges[root].is_empty() {
            return Err(Error::Structural("the root vertex cannot have parents".into()));
        }
        let mut children = vec![Vec::new(); n];
        for (v, pa) in in_edges.iter().enumerate() {
            if v != root && pa.is_empty() {
                return Err(Error::Structural(format!("vertex {v} has no parent")));
            }
            let distinct: BTreeSet<_> = pa.iter().collect();
            if distinct.len() != pa.len() {
                return Err(Error::Structural(format!("vertex {v} lists a parent twice")));
            }
            for &u in pa {
                if u >= n {
                    return Err(Error::UnknownVertex(u));
                }
                if u == v {
                    return Err(Error::Structural(format!("self-loop at vertex {v}")));
                }
                children[u].push(v);
            }
        }
        for c in &mut children {
            c.sort_unstable();
        }
        let height = heights(&children, root, n)?;
        let mut backward: Vec<VertexId> = (0..n).filter(|&v| v != root).collect();
        backward.sort_by_key(|&v| (height[v], v));
        Ok(Self { n, root, parents: in_edges, children, height, backward })
    }

    /// Builds a tree from `(parent, child)` pairs.
    pub fn tree(root: VertexId, n: usize, edges: &[(VertexId, VertexId)]) -> Result<Self> {
        let mut in_edges = vec![Vec::new(); n];
        for &(u, v) in edges {
            if v >= n {
                return Err(Error::UnknownVertex(v));
            }
            if !in_edges[v].is_empty() {
                return Err(Error::Structural(format!("vertex {v} has two incoming edges in a tree")));
            }
            in_edges[v].push(u);
        }
        Self::new(root, in_edges)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn root(&self) -> VertexId {
        self.root
    }

    pub fn is_tree(&self) -> bool {
        self.parents.iter().all(|p| p.len() <= 1)
    }

    fn check(&self, v: VertexId) -> Result<()> {
        if v < self.n {
            Ok(())
        } else {
            Err(Error::UnknownVertex(v))
        }
    }

    pub fn parents(&self, v: VertexId) -> Result<&[VertexId]> {
        self.check(v)?;
        Ok(&self.parents[v])
    }

    pub fn children(&self, v: VertexId) -> Result<&[VertexId]> {
        self.check(v)?;
        Ok(&self.children[v])
    }

    pub fn is_leaf(&self, v: VertexId) -> bool {
        v < self.n && v != self.root && self.children[v].is_empty()
    }

    pub fn leaves(&self) -> Vec<VertexId> {
        (0..self.n).filter(|&v| self.is_leaf(v)).collect()
    }

    /// Longest distance to a leaf.
    pub fn height(&self, v: VertexId) -> Result<usize> {
        self.check(v)?;
        Ok(self.height[v])
    }

    /// Leaves descending from `v`, ascending.
    pub fn leaves_of(&self, v: VertexId) -> Result<Vec<VertexId>> {
        self.check(v)?;
        let mut out = BTreeSet::new();
        let mut stack = vec![v];
        let mut seen = vec![false; self.n];
        while let Some(u) = stack.pop() {
            if seen[u] {
                continue;
            }
            seen[u] = true;
            if self.is_leaf(u) {
                out.insert(u);
            }
            stack.extend(&self.children[u]);
        }
        Ok(out.into_iter().collect())
    }

    /// Non-root vertices, children before parents; ties by (height, id).
    pub fn backward_order(&self) -> &[VertexId] {
        &self.backward
    }

    /// Reverse of [`Graph::backward_order`]: parents before children.
    pub fn forward_order(&self) -> Vec<VertexId> {
        self.backward.iter().rev().copied().collect()
    }
}

fn heights(children: &[Vec<VertexId>], root: VertexId, n: usize) -> Result<Vec<usize>> {
    // iterative DFS with colors; grey-on-grey is a cycle
    let mut color = vec![0u8; n];
    let mut height = vec![0usize; n];
    for start in 0..n {
        if color[start] != 0 {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        color[start] = 1;
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            if *next < children[v].len() {
                let c = children[v][*next];
                *next += 1;
                match color[c] {
                    0 => {
                        color[c] = 1;
                        stack.push((c, 0));
                    }
                    1 => return Err(Error::Structural(format!("cycle through vertex {c}"))),
                    _ => {}
                }
            } else {
                color[v] = 2;
                height[v] = children[v].iter().map(|&c| height[c] + 1).max().unwrap_or(0);
                stack.pop();
            }
        }
    }
    // every vertex must descend from the root
    let mut reach = vec![false; n];
    let mut stack = vec![root];
    while let Some(v) = stack.pop() {
        if !reach[v] {
            reach[v] = true;
            stack.extend(&children[v]);
        }
    }
    if let Some(v) = reach.iter().position(|r| !r) {
        return Err(Error::Structural(format!("vertex {v} is not reachable from the root")));
    }
    Ok(height)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Root 8; r→0, 0→{1,3}, 1→2, 2→7, 3→{4,6}, 4→5.
    pub(crate) fn example_tree() -> Graph {
        Graph::tree(8, 9, &[(8, 0), (0, 1), (0, 3), (1, 2), (2, 7), (3, 4), (3, 6), (4, 5)]).unwrap()
    }

    #[test]
    fn single_edge() {
        let g = Graph::tree(1, 2, &[(1, 0)]).unwrap();
        assert_eq!(g.backward_order(), &[0]);
        assert_eq!(g.forward_order(), vec![0]);
        assert!(g.is_tree());
    }

    #[test]
    fn example_tree_orders_and_sets() {
        let g = example_tree();
        assert_eq!(g.backward_order(), &[5, 6, 7, 2, 4, 1, 3, 0]);
        assert_eq!(g.forward_order(), vec![0, 3, 1, 4, 2, 7, 6, 5]);
        assert_eq!(g.children(3).unwrap(), &[4, 6]);
        assert!(g.children(5).unwrap().is_empty());
        assert_eq!(g.leaves_of(3).unwrap(), vec![5, 6]);
        assert_eq!(g.leaves(), vec![5, 6, 7]);
        assert_eq!(g.parents(2).unwrap(), &[1]);
        assert!(matches!(g.children(42), Err(Error::UnknownVertex(42))));
    }

    #[test]
    fn diamond_dag_and_errors() {
        // r=0 → 1a(1), 1b(2); {1,2} → 3; 3 → 4a(4), 4b(5)
        let g = Graph::new(0, vec![vec![], vec![0], vec![0], vec![1, 2], vec![3], vec![3]]).unwrap();
        assert!(!g.is_tree());
        let order = g.backward_order();
        let pos = |v| order.iter().position(|&u| u == v).unwrap();
        assert!(pos(4) < pos(3) && pos(5) < pos(3));
        assert!(pos(3) < pos(1) && pos(3) < pos(2));
        assert!(matches!(Graph::new(0, vec![vec![], vec![2], vec![1]]), Err(Error::Structural(_))));
        assert!(matches!(Graph::new(0, vec![vec![], vec![]]), Err(Error::Structural(_))));
        assert!(matches!(Graph::tree(0, 3, &[(0, 1), (0, 1)]), Err(Error::Structural(_))));
    }
}
