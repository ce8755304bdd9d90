use nalgebra::Vector3;

/// Static kd-tree over 3D points answering exact nearest-neighbour
/// queries. Ties are broken toward the lowest point index.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, Debug)]
struct Node {
    point: u32,
    axis: u8,
    left: u32,
    right: u32,
}

const NONE: u32 = u32::MAX;

impl KdTree {
    /// Panics if `points` is empty.
    pub fn build(points: &[Vector3<f64>]) -> Self {
        assert!(!points.is_empty(), "kd-tree needs at least one point");
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = Self {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
        };
        tree.split(&mut order);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    fn split(&mut self, idx: &mut [u32]) -> u32 {
        if idx.is_empty() {
            return NONE;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in idx.iter() {
            lo = lo.inf(&self.points[i as usize]);
            hi = hi.sup(&self.points[i as usize]);
        }
        let axis = (hi - lo).imax();
        let pts = &self.points;
        idx.sort_unstable_by(|&a, &b| {
            pts[a as usize][axis]
                .total_cmp(&pts[b as usize][axis])
                .then(a.cmp(&b))
        });
        let mid = idx.len() / 2;
        let slot = self.nodes.len();
        self.nodes.push(Node {
            point: idx[mid],
            axis: axis as u8,
            left: NONE,
            right: NONE,
        });
        let (l, r) = idx.split_at_mut(mid);
        let left = self.split(l);
        let right = self.split(&mut r[1..]);
        self.nodes[slot].left = left;
        self.nodes[slot].right = right;
        slot as u32
    }

    /// Index of the nearest point and its Euclidean distance.
    pub fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        let mut best = (f64::INFINITY, u32::MAX);
        self.search(0, q, &mut best);
        (best.1 as usize, best.0.sqrt())
    }

    fn search(&self, node: u32, q: &Vector3<f64>, best: &mut (f64, u32)) {
        if node == NONE {
            return;
        }
        let n = self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d2 = (p - q).norm_squared();
        if d2 < best.0 || (d2 == best.0 && n.point < best.1) {
            *best = (d2, n.point);
        }
        let diff = q[n.axis as usize] - p[n.axis as usize];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, q, best);
        // `<=` keeps equidistant candidates on the far side reachable
        if diff * diff <= best.0 {
            self.search(far, q, best);
        }
    }
}

/// Linear-scan nearest neighbour with the same tie rule as [`KdTree`].
pub fn nearest_linear(points: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
    let mut best = (f64::INFINITY, 0usize);
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - q).norm_squared();
        if d2 < best.0 {
            best = (d2, i);
        }
    }
    (best.1, best.0.sqrt())
}
