//! Dependency tree to adjacency matrix.
//!
//! Edges are undirected and every node carries a self-loop. The root has no
//! parent node; it is not added as a pseudo-node.

use thiserror::Error;

use crate::data::AdjacencyNorm;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("empty tree")]
    Empty,
    #[error("no root")]
    NoRoot,
    #[error("multiple roots at tokens {0:?}")]
    MultipleRoots(Vec<usize>),
    #[error("head {head} of token {token} out of range 0..={n}")]
    HeadOutOfRange { token: usize, head: usize, n: usize },
    #[error("cycle through token {0}")]
    Cycle(usize),
    #[error("{heads} heads given for {n} nodes")]
    Length { heads: usize, n: usize },
}

/// Checks that 1-based `heads` (0 = root) encode one rooted tree; returns the
/// 0-based root index.
pub fn check_tree(heads: &[usize]) -> Result<usize, TreeError> {
    let n = heads.len();
    if n == 0 {
        return Err(TreeError::Empty);
    }
    for (token, &head) in heads.iter().enumerate() {
        if head > n {
            return Err(TreeError::HeadOutOfRange { token, head, n });
        }
    }
    let roots: Vec<usize> = (0..n).filter(|&i| heads[i] == 0).collect();
    let root = match roots.as_slice() {
        [] => return Err(TreeError::NoRoot),
        [r] => *r,
        _ => return Err(TreeError::MultipleRoots(roots)),
    };
    // 0 = unvisited, 1 = on current path, 2 = reaches root
    let mut state = vec![0u8; n];
    state[root] = 2;
    for start in 0..n {
        let mut path = Vec::new();
        let mut cur = start;
        while state[cur] == 0 {
            state[cur] = 1;
            path.push(cur);
            cur = heads[cur] - 1;
        }
        if state[cur] == 1 {
            return Err(TreeError::Cycle(cur));
        }
        for p in path {
            state[p] = 2;
        }
    }
    Ok(root)
}

/// Symmetric 0/1 adjacency with self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyGraph {
    n: usize,
    adjacency: Vec<u8>,
}

impl DependencyGraph {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.adjacency[i * self.n + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.adjacency.chunks(self.n.max(1))
    }

    pub fn entry_sum(&self) -> usize {
        self.adjacency.iter().map(|&v| v as usize).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .adjacency
            .iter()
            .map(|&v| if v == 1 { T::one() } else { T::zero() })
            .collect();
        Tensor::from_vec(vec![self.n, self.n], data).expect("n*n entries")
    }
}

pub fn build_graph(heads: &[usize], n: usize) -> Result<DependencyGraph, TreeError> {
    if heads.len() != n {
        return Err(TreeError::Length {
            heads: heads.len(),
            n,
        });
    }
    check_tree(heads)?;
    let mut adjacency = vec![0u8; n * n];
    for (i, &head) in heads.iter().enumerate() {
        adjacency[i * n + i] = 1;
        if head > 0 {
            let j = head - 1;
            adjacency[i * n + j] = 1;
            adjacency[j * n + i] = 1;
        }
    }
    Ok(DependencyGraph { n, adjacency })
}

/// Real-valued adjacency for the GCN; `Degree` divides each row by its sum.
pub fn normalize<T: Scalar>(graph: &DependencyGraph, mode: AdjacencyNorm) -> Tensor<T> {
    let mut a = graph.to_tensor::<T>();
    if mode == AdjacencyNorm::Degree {
        for i in 0..graph.n() {
            let row = a.row_mut(i);
            // self-loop guarantees a positive sum
            let sum: T = row.iter().copied().sum();
            for v in row {
                *v /= sum;
            }
        }
    }
    a
}
