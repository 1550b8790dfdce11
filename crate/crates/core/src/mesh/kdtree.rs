//! Exact k-nearest-neighbour search over a flat point array.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree. Results are keyed by slot (index into the coordinate array).
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    coords: Vec<f64>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    slot: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.slot.cmp(&other.slot))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    pub fn build(coords: &[f64], dim: usize) -> Self {
        let n = coords.len() / dim;
        let mut tree = Self {
            dim,
            coords: coords.to_vec(),
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        if n > 0 {
            tree.build_node(0, n);
        }
        tree
    }

    fn coord(&self, slot: usize, axis: usize) -> f64 {
        self.coords[slot * self.dim + axis]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split along the widest extent
        let mut axis = 0;
        let mut widest = -1.0;
        for a in 0..self.dim {
            let (lo, hi) = self.order[start..end].iter().fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), &s| {
                    let v = self.coord(s, a);
                    (lo.min(v), hi.max(v))
                },
            );
            if hi - lo > widest {
                widest = hi - lo;
                axis = a;
            }
        }
        let mid = (start + end) / 2;
        let (dim, coords) = (self.dim, &self.coords);
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            coords[a * dim + axis]
                .total_cmp(&coords[b * dim + axis])
                .then(a.cmp(&b))
        });
        let value = self.coord(self.order[mid], axis);
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn dist2(&self, slot: usize, x: &[f64]) -> f64 {
        self.coords[slot * self.dim..(slot + 1) * self.dim]
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// The `k` nearest slots with squared distances, ascending by
    /// `(distance, slot)`.
    pub fn nearest(&self, x: &[f64], k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.order.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, x, k, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.slot, c.dist2)).collect()
    }

    fn search(&self, node: usize, x: &[f64], k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &slot in &self.order[start..end] {
                    let c = Candidate {
                        dist2: self.dist2(slot, x),
                        slot,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = x[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, x, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().dist2 {
                    self.search(far, x, k, heap);
                }
            }
        }
    }

    /// Number of points within distance `r` of `x` (inclusive).
    pub fn count_within(&self, x: &[f64], r: f64) -> usize {
        if self.order.is_empty() {
            return 0;
        }
        self.count_node(0, x, r * r)
    }

    fn count_node(&self, node: usize, x: &[f64], r2: f64) -> usize {
        match self.nodes[node] {
            Node::Leaf { start, end } => self.order[start..end]
                .iter()
                .filter(|&&s| self.dist2(s, x) <= r2)
                .count(),
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = x[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                let mut c = self.count_node(near, x, r2);
                if diff * diff <= r2 {
                    c += self.count_node(far, x, r2);
                }
                c
            }
        }
    }
}
