//! Exact 3D nearest-neighbor queries over a kd-tree.
//!
//! Used for initial Gaussian scale estimation (k nearest neighbors) and for
//! point-cloud accuracy/completeness metrics (single nearest neighbor). The
//! queries are exact: distances match a brute-force scan bit for bit.

use nalgebra::Vector3;

use crate::scalar::Scalar;

struct Node {
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

pub struct KdTree3<T: Scalar> {
    points: Vec<Vector3<T>>,
    nodes: Vec<Node>,
    root: i32,
}

impl<T: Scalar> KdTree3<T> {
    pub fn build(points: Vec<Vector3<T>>) -> Self {
        let mut indices: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = Self::build_rec(&points, &mut indices, 0, &mut nodes);
        Self { points, nodes, root }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_rec(
        points: &[Vector3<T>],
        indices: &mut [u32],
        depth: usize,
        nodes: &mut Vec<Node>,
    ) -> i32 {
        if indices.is_empty() {
            return -1;
        }
        let axis = (depth % 3) as u8;
        let mid = indices.len() / 2;
        indices.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][axis as usize]
                .partial_cmp(&points[b as usize][axis as usize])
                .unwrap()
        });
        let point = indices[mid];
        let id = nodes.len() as i32;
        nodes.push(Node { point, axis, left: -1, right: -1 });
        let (lo, rest) = indices.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = Self::build_rec(points, lo, depth + 1, nodes);
        let right = Self::build_rec(points, hi, depth + 1, nodes);
        nodes[id as usize].left = left;
        nodes[id as usize].right = right;
        id
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, query: &Vector3<T>) -> Option<(u32, T)> {
        let mut best: Option<(u32, T)> = None;
        self.nearest_rec(self.root, query, u32::MAX, &mut best);
        best
    }

    /// The `k` nearest points, optionally excluding one index (the query
    /// itself when it belongs to the set). Ascending squared distance.
    pub fn k_nearest(&self, query: &Vector3<T>, k: usize, exclude: Option<u32>) -> Vec<(u32, T)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap: Vec<(u32, T)> = Vec::with_capacity(k + 1);
        self.k_nearest_rec(self.root, query, k, exclude.unwrap_or(u32::MAX), &mut heap);
        heap
    }

    fn nearest_rec(&self, node: i32, query: &Vector3<T>, exclude: u32, best: &mut Option<(u32, T)>) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        if n.point != exclude {
            let d2 = (self.points[n.point as usize] - query).norm_squared();
            if best.map_or(true, |(_, b)| d2 < b) {
                *best = Some((n.point, d2));
            }
        }
        let axis = n.axis as usize;
        let delta = query[axis] - self.points[n.point as usize][axis];
        let (near, far) = if delta < T::zero() { (n.left, n.right) } else { (n.right, n.left) };
        self.nearest_rec(near, query, exclude, best);
        if best.map_or(true, |(_, b)| delta * delta < b) {
            self.nearest_rec(far, query, exclude, best);
        }
    }

    fn k_nearest_rec(
        &self,
        node: i32,
        query: &Vector3<T>,
        k: usize,
        exclude: u32,
        heap: &mut Vec<(u32, T)>,
    ) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        if n.point != exclude {
            let d2 = (self.points[n.point as usize] - query).norm_squared();
            if heap.len() < k || d2 < heap.last().unwrap().1 {
                let pos = heap.partition_point(|&(_, d)| d <= d2);
                heap.insert(pos, (n.point, d2));
                if heap.len() > k {
                    heap.pop();
                }
            }
        }
        let axis = n.axis as usize;
        let delta = query[axis] - self.points[n.point as usize][axis];
        let (near, far) = if delta < T::zero() { (n.left, n.right) } else { (n.right, n.left) };
        self.k_nearest_rec(near, query, k, exclude, heap);
        if heap.len() < k || delta * delta < heap.last().unwrap().1 {
            self.k_nearest_rec(far, query, k, exclude, heap);
        }
    }
}
