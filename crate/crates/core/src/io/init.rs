//! Seeding a triangle soup from a point cloud: one triangle per point, its
//! vertices drawn inside a sphere sized by the local point density.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{Triangle, Vec3};

use super::ply::PointCloud;
use super::IoError;

pub const MIN_POINTS: usize = 4;
const NEIGHBORS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub opacity: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            opacity: 0.28,
            sigma: 1.0,
            seed: 0,
        }
    }
}

/// Balanced 3-d tree stored implicitly: the median of `order[lo..hi]` is the
/// node, split on axis `depth % 3`.
struct KdTree<'a> {
    points: &'a [Vec3],
    order: Vec<usize>,
}

impl<'a> KdTree<'a> {
    fn new(points: &'a [Vec3]) -> Self {
        let mut tree = Self {
            points,
            order: (0..points.len()).collect(),
        };
        tree.build(0, points.len(), 0);
        tree
    }

    fn build(&mut self, lo: usize, hi: usize, depth: usize) {
        if hi - lo <= 1 {
            return;
        }
        let mid = (lo + hi) / 2;
        let axis = depth % 3;
        let pts = self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        self.build(lo, mid, depth + 1);
        self.build(mid + 1, hi, depth + 1);
    }

    /// Squared distances of the `k` nearest points to point `query`,
    /// excluding itself.
    fn nearest(&self, query: usize, k: usize) -> Vec<f64> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.search(query, k, 0, self.points.len(), 0, &mut best);
        best.into_iter().map(|(d, _)| d).collect()
    }

    fn search(
        &self,
        query: usize,
        k: usize,
        lo: usize,
        hi: usize,
        depth: usize,
        best: &mut Vec<(f64, usize)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let i = self.order[mid];
        let p = &self.points[query];
        if i != query {
            let d = (self.points[i] - p).norm_squared();
            if best.len() < k || d < best[k - 1].0 {
                let pos = best.partition_point(|e| (e.0, e.1) < (d, i));
                best.insert(pos, (d, i));
                best.truncate(k);
            }
        }
        let axis = depth % 3;
        let diff = p[axis] - self.points[i][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(query, k, near.0, near.1, depth + 1, best);
        if best.len() < k || diff * diff < best[k - 1].0 {
            self.search(query, k, far.0, far.1, depth + 1, best);
        }
    }
}

/// Mean distance from each point to its three nearest neighbors.
pub fn neighbor_radii(points: &[Vec3]) -> Vec<f64> {
    let tree = KdTree::new(points);
    (0..points.len())
        .map(|i| {
            let d = tree.nearest(i, NEIGHBORS);
            d.iter().map(|v| v.sqrt()).sum::<f64>() / d.len().max(1) as f64
        })
        .collect()
}

fn sample_in_ball(rng: &mut ChaCha8Rng, center: &Vec3, radius: f64) -> Vec3 {
    let dir = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
    let r = radius * rng.gen::<f64>().cbrt();
    center + dir * r
}

pub fn init_from_pointcloud(
    cloud: &PointCloud,
    cfg: &InitConfig,
) -> Result<Vec<Triangle>, IoError> {
    let n = cloud.positions.len();
    if n < MIN_POINTS {
        return Err(IoError::TooFewPoints {
            found: n,
            needed: MIN_POINTS,
        });
    }
    let radii = neighbor_radii(&cloud.positions);
    let (lo, hi) = cloud
        .positions
        .iter()
        .fold((cloud.positions[0], cloud.positions[0]), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        });
    let fallback = 1e-3 * (hi - lo).norm().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let soup = cloud
        .positions
        .iter()
        .zip(&cloud.colors)
        .zip(&radii)
        .map(|((p, rgb), &r)| {
            let r = if r > 0.0 { r } else { fallback };
            let mut tri = Triangle::new([*p; 3], cfg.opacity, cfg.sigma);
            for _ in 0..64 {
                tri.vertices = [0; 3].map(|_| sample_in_ball(&mut rng, p, r));
                tri.snap_to_f32();
                if !tri.is_degenerate() {
                    break;
                }
            }
            tri.set_base_color(*rgb);
            tri.snap_to_f32();
            tri
        })
        .collect();
    Ok(soup)
}
