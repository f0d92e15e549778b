//! Exact spatial queries over static point sets.
//!
//! A balanced kd-tree with the exactness contract: every query returns the
//! same indices, order, and distances as a brute-force linear scan. Ties in
//! distance are broken by lowest point index, which makes downstream neighbor
//! aggregation fully deterministic.

use crate::math::Vec3;

const LEAF_SIZE: usize = 16;

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

/// Immutable kd-tree over point positions. Queries are read-only and safe to
/// run concurrently.
#[derive(Debug, Clone)]
pub struct PointIndex {
    points: Vec<Vec3>,
    /// Point indices into the original input, permuted into tree order.
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: usize,
}

/// One query hit: original point index and Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist: f64,
}

impl PointIndex {
    /// Builds the index. Deterministic for a fixed input order.
    pub fn build(positions: &[Vec3]) -> PointIndex {
        let points = positions.to_vec();
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        let root = if points.is_empty() {
            nodes.push(Node::Leaf { start: 0, end: 0 });
            0
        } else {
            let n = points.len();
            build_recursive(&points, &mut order, 0, n, &mut nodes)
        };
        PointIndex { points, order, nodes, root }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn position(&self, index: usize) -> Vec3 {
        self.points[index]
    }

    /// Up to `k` nearest points to `q`, ascending by (distance, index).
    /// Points with `exclude[i] == true` are skipped. Returns fewer than `k`
    /// results when not enough points qualify.
    pub fn knn(&self, q: Vec3, k: usize, exclude: Option<&[bool]>) -> Vec<Neighbor> {
        let mut out = Vec::with_capacity(k);
        self.knn_into(q, k, f64::INFINITY, exclude, &mut out);
        out
    }

    /// `knn` bounded by a max radius, writing into a caller-owned buffer.
    /// Hot path for the renderer, which issues millions of these.
    pub fn knn_into(
        &self,
        q: Vec3,
        k: usize,
        max_radius: f64,
        exclude: Option<&[bool]>,
        out: &mut Vec<Neighbor>,
    ) {
        out.clear();
        if k == 0 || self.points.is_empty() {
            return;
        }
        let mut heap = CandidateSet::new(k, max_radius * max_radius);
        self.search(self.root, q, exclude, &mut heap);
        heap.drain_sorted(out);
    }

    /// All points within distance `r` of `q`, ascending by (distance, index).
    pub fn radius_query(&self, q: Vec3, r: f64) -> Vec<Neighbor> {
        let mut hits = Vec::new();
        self.radius_into(self.root, q, r * r, &mut hits);
        hits.sort_by(|a, b| (a.dist, a.index).partial_cmp(&(b.dist, b.index)).unwrap());
        hits
    }

    fn radius_into(&self, node: usize, q: Vec3, r_sq: f64, hits: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.order[start..end] {
                    let d_sq = q.dist_sq(self.points[idx as usize]);
                    if d_sq <= r_sq {
                        hits.push(Neighbor { index: idx as usize, dist: d_sq.sqrt() });
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let delta = q.axis(axis) - value;
                let (near, far) = if delta <= 0.0 { (left, right) } else { (right, left) };
                self.radius_into(near, q, r_sq, hits);
                if delta * delta <= r_sq {
                    self.radius_into(far, q, r_sq, hits);
                }
            }
        }
    }

    fn search(&self, node: usize, q: Vec3, exclude: Option<&[bool]>, heap: &mut CandidateSet) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.order[start..end] {
                    let idx = idx as usize;
                    if let Some(mask) = exclude {
                        if mask[idx] {
                            continue;
                        }
                    }
                    heap.offer(q.dist_sq(self.points[idx]), idx);
                }
            }
            Node::Split { axis, value, left, right } => {
                let delta = q.axis(axis) - value;
                let (near, far) = if delta <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, exclude, heap);
                // <= keeps equal-distance candidates visible so index
                // tie-breaks match brute force exactly.
                if delta * delta <= heap.bound() {
                    self.search(far, q, exclude, heap);
                }
            }
        }
    }
}

fn build_recursive(
    points: &[Vec3],
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return nodes.len() - 1;
    }
    // Split on the widest axis at the median; ties in coordinate fall back to
    // index order so the structure is reproducible.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &idx in &order[start..end] {
        let p = points[idx as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p.axis(a));
            hi[a] = hi[a].max(p.axis(a));
        }
    }
    let axis = (0..3)
        .max_by(|&i, &j| (hi[i] - lo[i]).total_cmp(&(hi[j] - lo[j])))
        .unwrap();
    let mid = (start + end) / 2;
    order[start..end].sort_unstable_by(|&i, &j| {
        points[i as usize]
            .axis(axis)
            .total_cmp(&points[j as usize].axis(axis))
            .then(i.cmp(&j))
    });
    let split_value = points[order[mid] as usize].axis(axis);
    let slot = nodes.len();
    nodes.push(Node::Leaf { start: 0, end: 0 }); // placeholder
    let left = build_recursive(points, order, start, mid, nodes);
    let right = build_recursive(points, order, mid, end, nodes);
    nodes[slot] = Node::Split { axis, value: split_value, left, right };
    slot
}

/// Bounded candidate set ordered by (squared distance, index).
struct CandidateSet {
    k: usize,
    max_dist_sq: f64,
    items: Vec<(f64, usize)>,
}

impl CandidateSet {
    fn new(k: usize, max_dist_sq: f64) -> Self {
        CandidateSet { k, max_dist_sq, items: Vec::with_capacity(k + 1) }
    }

    /// Pruning bound: squared distance beyond which no candidate can improve
    /// the set. Equal distances must still be offered (index tie-break), so
    /// callers compare with `<=`.
    fn bound(&self) -> f64 {
        if self.items.len() < self.k {
            self.max_dist_sq
        } else {
            self.items.last().unwrap().0.min(self.max_dist_sq)
        }
    }

    fn offer(&mut self, d_sq: f64, index: usize) {
        if d_sq > self.max_dist_sq {
            return;
        }
        let key = (d_sq, index);
        if self.items.len() == self.k {
            let worst = *self.items.last().unwrap();
            if key >= worst {
                return;
            }
        }
        let pos = self.items.partition_point(|&it| it < key);
        self.items.insert(pos, key);
        if self.items.len() > self.k {
            self.items.pop();
        }
    }

    fn drain_sorted(self, out: &mut Vec<Neighbor>) {
        for (d_sq, index) in self.items {
            out.push(Neighbor { index, dist: d_sq.sqrt() });
        }
    }
}
