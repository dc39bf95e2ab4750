//! Exact k-nearest-neighbor queries over 3D points with a static kd-tree.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static kd-tree; indices refer to the slice it was built from.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = (start + end) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// The `k` nearest points to `query` ordered by (distance, index),
    /// skipping `exclude`.
    pub fn nearest(&self, query: &Vector3<f64>, k: usize, exclude: Option<usize>) -> Vec<usize> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, exclude, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| c.index).collect()
    }

    fn search(
        &self,
        node: usize,
        q: &Vector3<f64>,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let c = Candidate {
                        dist2: (self.points[i] - q).norm_squared(),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, heap);
                // `<=` keeps equal-distance candidates with smaller indices reachable
                if heap.len() < k || diff * diff <= heap.peek().unwrap().dist2 {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }
}

/// The `n` splat centers nearest to `points[query]`, excluding the query
/// itself, with ties broken by index.
pub fn knn_neighbors(tree: &KdTree, query: usize, n: usize) -> Result<Vec<usize>> {
    if query >= tree.len() {
        return Err(Error::InvalidArgument(format!(
            "query index {query} out of range for {} points",
            tree.len()
        )));
    }
    if n == 0 || n >= tree.len() {
        return Err(Error::InvalidArgument(format!(
            "neighbor count {n} must be in [1, {})",
            tree.len()
        )));
    }
    Ok(tree.nearest(&tree.points[query], n, Some(query)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Vector3<f64>], q: usize, n: usize) -> Vec<usize> {
        let mut c: Vec<(f64, usize)> = (0..points.len())
            .filter(|&i| i != q)
            .map(|i| ((points[i] - points[q]).norm_squared(), i))
            .collect();
        c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        c.into_iter().take(n).map(|(_, i)| i).collect()
    }

    #[test]
    fn collinear_middle_query() {
        let pts = [0.0, 1.0, 3.0].map(|x| Vector3::new(x, 0.0, 0.0));
        let tree = KdTree::build(&pts);
        let mut nb = knn_neighbors(&tree, 1, 2).unwrap();
        nb.sort();
        assert_eq!(nb, vec![0, 2]);
    }

    #[test]
    fn all_others_when_n_is_count_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<_> = (0..30)
            .map(|_| Vector3::new(rng.random::<f64>(), rng.random(), rng.random()))
            .collect();
        let tree = KdTree::build(&pts);
        let mut nb = knn_neighbors(&tree, 4, 29).unwrap();
        nb.sort();
        assert_eq!(nb, (0..30).filter(|&i| i != 4).collect::<Vec<_>>());
        assert!(knn_neighbors(&tree, 4, 30).is_err());
        assert!(knn_neighbors(&tree, 4, 0).is_err());
    }

    #[test]
    fn matches_brute_force_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pts: Vec<_> = (0..200)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        // lattice points produce exact distance ties
        for i in 0..60 {
            pts.push(Vector3::new((i % 4) as f64, ((i / 4) % 5) as f64, (i / 20) as f64) * 0.25);
        }
        let tree = KdTree::build(&pts);
        for q in 0..pts.len() {
            assert_eq!(knn_neighbors(&tree, q, 5).unwrap(), brute(&pts, q, 5), "query {q}");
        }
    }
}
