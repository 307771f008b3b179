//! Exact k-nearest-neighbour search. Neighbours are ordered by
//! `(squared distance, index)`, so ties go to the lower index on both paths.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::pcloud::{dist2, Point3};

/// Above this size the k-d tree is used.
pub const BRUTE_FORCE_MAX: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The `k` nearest neighbours of every point (self excluded), closest first.
pub fn knn_all(points: &[Point3], k: usize) -> Vec<Vec<usize>> {
    if points.len() <= BRUTE_FORCE_MAX {
        knn_brute_force(points, k)
    } else {
        let tree = KdTree::build(points);
        (0..points.len()).map(|i| tree.nearest(points, i, k)).collect()
    }
}

pub fn knn_brute_force(points: &[Point3], k: usize) -> Vec<Vec<usize>> {
    (0..points.len())
        .map(|i| {
            let mut cands: Vec<Candidate> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| Candidate {
                    d2: dist2(&points[i], &points[j]),
                    index: j,
                })
                .collect();
            let k = k.min(cands.len());
            if k < cands.len() {
                cands.select_nth_unstable(k);
                cands.truncate(k);
            }
            cands.sort_unstable();
            cands.into_iter().map(|c| c.index).collect()
        })
        .collect()
}

const LEAF_SIZE: usize = 8;

enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static k-d tree over point indices with median splits.
pub struct KdTree {
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        let mut tree = KdTree {
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(points, 0, points.len());
        }
        tree
    }

    fn build_node(&mut self, points: &[Point3], start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &mut self.order[start..end];
        let axis = widest_axis(points, slice);
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = points[slice[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(points, start, start + mid);
        let right = self.build_node(points, start + mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// `k` nearest neighbours of `points[query]`, excluding itself.
    pub fn nearest(&self, points: &[Point3], query: usize, k: usize) -> Vec<usize> {
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.search(0, points, query, k, &mut heap);
        }
        let mut out = heap.into_vec();
        out.sort_unstable();
        out.into_iter().map(|c| c.index).collect()
    }

    fn search(&self, node: usize, points: &[Point3], query: usize, k: usize, heap: &mut BinaryHeap<Candidate>) {
        let q = &points[query];
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &j in &self.order[start..end] {
                    if j == query {
                        continue;
                    }
                    let c = Candidate {
                        d2: dist2(q, &points[j]),
                        index: j,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("k > 0") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, points, query, k, heap);
                // `<=` keeps equal-distance candidates reachable for the index tie-break
                if heap.len() < k || diff * diff <= heap.peek().expect("non-empty").d2 {
                    self.search(far, points, query, k, heap);
                }
            }
        }
    }
}

fn widest_axis(points: &[Point3], idx: &[usize]) -> usize {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in idx {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0)
}
