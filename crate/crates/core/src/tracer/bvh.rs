//! Binned-SAH bounding volume hierarchy over triangle bounds.

use crate::geometry::{Ray, Triangle, Vec3};

use super::TraceError;

pub const MAX_LEAF_SIZE: usize = 4;
const SAH_BINS: usize = 16;
const TRAVERSAL_COST: f64 = 1.0;
const INTERSECT_COST: f64 = 1.0;
// Past this depth splits fall back to object medians, which bounds the
// traversal stack.
const MAX_SAH_DEPTH: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    /// Triangle bounds, padded slightly so hits on axis-aligned triangles are
    /// never culled by rounding in the slab test.
    pub fn of_triangle(tri: &Triangle) -> Self {
        let (min, max) = tri.bounds();
        let scale = min.abs().sup(&max.abs()).max();
        let pad = 1e-9 * (1.0 + scale);
        Self {
            min: min.add_scalar(-pad),
            max: max.add_scalar(pad),
        }
    }

    pub fn grow(&mut self, other: &Aabb) {
        self.min = self.min.inf(&other.min);
        self.max = self.max.sup(&other.max);
    }

    pub fn grow_point(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|a| self.min[a] > self.max[a])
    }

    pub fn centroid(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn surface_area(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let d = self.max - self.min;
        2.0 * (d.x * d.y + d.y * d.z + d.z * d.x)
    }

    pub fn contains(&self, other: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] <= other.min[a] && self.max[a] >= other.max[a])
    }

    pub fn overlaps(&self, other: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] <= other.max[a] && other.min[a] <= self.max[a])
    }

    /// Slab test; returns the parametric entry and exit distances.
    #[inline]
    pub fn intersect(&self, origin: &Vec3, inv_dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let lo = (self.min[a] - origin[a]) * inv_dir[a];
            let hi = (self.max[a] - origin[a]) * inv_dir[a];
            // NaN from 0 * inf means the origin lies on the slab plane: keep it.
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            if lo > t0 {
                t0 = lo;
            }
            if hi < t1 {
                t1 = hi;
            }
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BvhNode {
    pub bounds: Aabb,
    /// Interior: index of the left child (right child is `left + 1`).
    /// Leaf: offset into the primitive permutation.
    pub first: u32,
    /// Leaf primitive count; 0 marks an interior node.
    pub count: u32,
}

impl BvhNode {
    pub fn is_leaf(&self) -> bool {
        self.count > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bvh {
    pub nodes: Vec<BvhNode>,
    /// Triangle ids in leaf order.
    pub primitives: Vec<u32>,
}

#[derive(Clone, Copy)]
struct BuildItem {
    bounds: Aabb,
    centroid: Vec3,
    id: u32,
}

/// Builds a BVH over every triangle in `soup`.
pub fn bvh_build(soup: &[Triangle]) -> Result<Bvh, TraceError> {
    let ids: Vec<u32> = (0..soup.len() as u32).collect();
    bvh_build_subset(soup, &ids)
}

/// Builds a BVH over the listed triangle ids only.
pub fn bvh_build_subset(soup: &[Triangle], ids: &[u32]) -> Result<Bvh, TraceError> {
    if ids.is_empty() {
        return Err(TraceError::EmptyScene);
    }
    let mut items: Vec<BuildItem> = ids
        .iter()
        .map(|&id| {
            let bounds = Aabb::of_triangle(&soup[id as usize]);
            BuildItem {
                bounds,
                centroid: bounds.centroid(),
                id,
            }
        })
        .collect();
    let mut nodes = Vec::with_capacity(2 * items.len());
    nodes.push(BvhNode {
        bounds: Aabb::empty(),
        first: 0,
        count: 0,
    });
    build_recursive(&mut nodes, 0, &mut items, 0, 0);
    Ok(Bvh {
        nodes,
        primitives: items.iter().map(|it| it.id).collect(),
    })
}

fn build_recursive(
    nodes: &mut Vec<BvhNode>,
    node: usize,
    items: &mut [BuildItem],
    offset: usize,
    depth: usize,
) {
    let mut bounds = Aabb::empty();
    let mut centroid_bounds = Aabb::empty();
    for it in items.iter() {
        bounds.grow(&it.bounds);
        centroid_bounds.grow_point(&it.centroid);
    }
    nodes[node].bounds = bounds;

    if items.len() <= MAX_LEAF_SIZE {
        make_leaf(&mut nodes[node], offset, items.len());
        return;
    }

    let sah = if depth < MAX_SAH_DEPTH {
        best_sah_split(items, &bounds, &centroid_bounds)
    } else {
        None
    };
    let mid = match sah {
        Some((axis, split_pos)) => {
            let mid = partition(items, |it| it.centroid[axis] < split_pos);
            if mid == 0 || mid == items.len() {
                items.len() / 2
            } else {
                mid
            }
        }
        None => {
            // Centroids coincide, or the tree is already deep: median split.
            let axis = centroid_bounds.max - centroid_bounds.min;
            let axis = axis.imax();
            items.sort_by(|a, b| {
                a.centroid[axis]
                    .total_cmp(&b.centroid[axis])
                    .then(a.id.cmp(&b.id))
            });
            items.len() / 2
        }
    };

    let left = nodes.len();
    nodes.push(BvhNode {
        bounds: Aabb::empty(),
        first: 0,
        count: 0,
    });
    nodes.push(BvhNode {
        bounds: Aabb::empty(),
        first: 0,
        count: 0,
    });
    nodes[node].first = left as u32;
    nodes[node].count = 0;
    let (lo, hi) = items.split_at_mut(mid);
    build_recursive(nodes, left, lo, offset, depth + 1);
    build_recursive(nodes, left + 1, hi, offset + mid, depth + 1);
}

fn make_leaf(node: &mut BvhNode, offset: usize, count: usize) {
    node.first = offset as u32;
    node.count = count as u32;
}

// Stable two-way partition so the build is deterministic.
fn partition(items: &mut [BuildItem], pred: impl Fn(&BuildItem) -> bool) -> usize {
    let mut ordered: Vec<BuildItem> = items.iter().filter(|it| pred(it)).copied().collect();
    let mid = ordered.len();
    ordered.extend(items.iter().filter(|it| !pred(it)).copied());
    items.copy_from_slice(&ordered);
    mid
}

fn best_sah_split(
    items: &[BuildItem],
    bounds: &Aabb,
    centroid_bounds: &Aabb,
) -> Option<(usize, f64)> {
    let mut best: Option<(f64, usize, f64)> = None;
    let parent_area = bounds.surface_area().max(f64::MIN_POSITIVE);
    for axis in 0..3 {
        let lo = centroid_bounds.min[axis];
        let extent = centroid_bounds.max[axis] - lo;
        if !(extent > 0.0) {
            continue;
        }
        let scale = SAH_BINS as f64 / extent;
        let mut bins = [(Aabb::empty(), 0usize); SAH_BINS];
        for it in items {
            let b = (((it.centroid[axis] - lo) * scale) as usize).min(SAH_BINS - 1);
            bins[b].0.grow(&it.bounds);
            bins[b].1 += 1;
        }
        // Sweep from the right to get suffix areas and counts.
        let mut right_area = [0.0; SAH_BINS];
        let mut right_count = [0usize; SAH_BINS];
        let mut acc = Aabb::empty();
        let mut count = 0;
        for b in (1..SAH_BINS).rev() {
            acc.grow(&bins[b].0);
            count += bins[b].1;
            right_area[b] = acc.surface_area();
            right_count[b] = count;
        }
        let mut acc = Aabb::empty();
        let mut count = 0;
        for b in 0..SAH_BINS - 1 {
            acc.grow(&bins[b].0);
            count += bins[b].1;
            let rc = right_count[b + 1];
            if count == 0 || rc == 0 {
                continue;
            }
            let cost = TRAVERSAL_COST
                + INTERSECT_COST
                    * (acc.surface_area() * count as f64 + right_area[b + 1] * rc as f64)
                    / parent_area;
            if best.map_or(true, |(c, _, _)| cost < c) {
                best = Some((cost, axis, lo + (b + 1) as f64 / scale));
            }
        }
    }
    best.map(|(_, axis, pos)| (axis, pos))
}

impl Bvh {
    pub fn root_bounds(&self) -> Aabb {
        self.nodes[0].bounds
    }

    pub fn leaves(&self) -> impl Iterator<Item = &BvhNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    pub fn leaf_primitives(&self, node: &BvhNode) -> &[u32] {
        &self.primitives[node.first as usize..(node.first + node.count) as usize]
    }

    /// Visits candidate primitives roughly front to back.
    ///
    /// Every primitive in a leaf whose box overlaps `[t_lo, sink.cull_distance()]`
    /// is passed to `sink.visit`; the cull distance is re-read per node so the
    /// sink can shrink the interval as it collects hits.
    #[inline]
    pub fn traverse<S: TraversalSink>(&self, ray: &Ray, t_lo: f64, sink: &mut S) {
        let inv = ray.direction.map(|d| 1.0 / d);
        let mut stack = [0u32; 2 * MAX_SAH_DEPTH + 64];
        let mut sp = 0usize;
        match self.nodes[0].bounds.intersect(&ray.origin, &inv) {
            Some((t0, t1)) if t1 >= t_lo && t0 <= sink.cull_distance() => {}
            _ => return,
        }
        stack[sp] = 0;
        sp += 1;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp] as usize];
            if node.is_leaf() {
                for &id in self.leaf_primitives(node) {
                    sink.visit(id);
                }
                continue;
            }
            let limit = sink.cull_distance();
            let l = node.first as usize;
            let hit = |n: usize| match self.nodes[n].bounds.intersect(&ray.origin, &inv) {
                Some((t0, t1)) if t1 >= t_lo && t0 <= limit => Some(t0),
                _ => None,
            };
            match (hit(l), hit(l + 1)) {
                (Some(a), Some(b)) => {
                    // Far child first so the near one pops next.
                    let (near, far) = if a <= b { (l, l + 1) } else { (l + 1, l) };
                    stack[sp] = far as u32;
                    stack[sp + 1] = near as u32;
                    sp += 2;
                }
                (Some(_), None) => {
                    stack[sp] = l as u32;
                    sp += 1;
                }
                (None, Some(_)) => {
                    stack[sp] = (l + 1) as u32;
                    sp += 1;
                }
                (None, None) => {}
            }
        }
    }
}

pub trait TraversalSink {
    /// Nodes entered beyond this distance are skipped.
    fn cull_distance(&self) -> f64;
    fn visit(&mut self, id: u32);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tri(rng: &mut impl Rng, center: Vec3, size: f64) -> Triangle {
        let v = [0; 3].map(|_| center + Vec3::from_fn(|_, _| rng.gen_range(-size..size)));
        Triangle::new(v, 0.5, 1.0)
    }

    #[test]
    fn single_triangle_is_one_leaf() {
        let t = Triangle::new([Vec3::zeros(), Vec3::x(), Vec3::y()], 0.5, 1.0);
        let bvh = bvh_build(std::slice::from_ref(&t)).unwrap();
        assert_eq!(bvh.nodes.len(), 1);
        assert!(bvh.nodes[0].is_leaf());
        assert_eq!(bvh.nodes[0].bounds, Aabb::of_triangle(&t));
    }

    #[test]
    fn empty_scene_rejected() {
        assert!(matches!(bvh_build(&[]), Err(TraceError::EmptyScene)));
    }

    #[test]
    fn disjoint_clusters_split_at_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut soup: Vec<Triangle> = (0..40)
            .map(|_| random_tri(&mut rng, Vec3::new(-10.0, 0.0, 0.0), 1.0))
            .collect();
        soup.extend((0..40).map(|_| random_tri(&mut rng, Vec3::new(10.0, 0.0, 0.0), 1.0)));
        let bvh = bvh_build(&soup).unwrap();
        let root = bvh.nodes[0];
        assert!(!root.is_leaf());
        let l = bvh.nodes[root.first as usize].bounds;
        let r = bvh.nodes[root.first as usize + 1].bounds;
        assert!(!l.overlaps(&r));
    }

    #[test]
    fn partition_and_containment_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let soup: Vec<Triangle> = (0..500)
            .map(|_| {
                let c = Vec3::from_fn(|_, _| rng.gen_range(-5.0..5.0));
                random_tri(&mut rng, c, 0.5)
            })
            .collect();
        let bvh = bvh_build(&soup).unwrap();
        let mut seen = vec![0; soup.len()];
        let mut total = 0;
        for leaf in bvh.leaves() {
            assert!(leaf.count as usize <= MAX_LEAF_SIZE);
            total += leaf.count as usize;
            for &id in bvh.leaf_primitives(leaf) {
                seen[id as usize] += 1;
            }
        }
        assert_eq!(total, soup.len());
        assert!(seen.iter().all(|&c| c == 1));

        fn check(bvh: &Bvh, soup: &[Triangle], n: usize) -> Aabb {
            let node = bvh.nodes[n];
            if node.is_leaf() {
                for &id in bvh.leaf_primitives(&node) {
                    assert!(node.bounds.contains(&Aabb::of_triangle(&soup[id as usize])));
                }
            } else {
                for c in [node.first as usize, node.first as usize + 1] {
                    let child = check(bvh, soup, c);
                    assert!(node.bounds.contains(&child));
                }
            }
            node.bounds
        }
        check(&bvh, &soup, 0);

        assert_eq!(bvh, bvh_build(&soup).unwrap());
    }

    #[test]
    fn coincident_centroids_still_bounded_leaves() {
        let t = Triangle::new([Vec3::zeros(), Vec3::x(), Vec3::y()], 0.5, 1.0);
        let soup = vec![t; 37];
        let bvh = bvh_build(&soup).unwrap();
        assert!(bvh.leaves().all(|l| l.count as usize <= MAX_LEAF_SIZE));
        assert_eq!(bvh.leaves().map(|l| l.count as usize).sum::<usize>(), 37);
    }
}
