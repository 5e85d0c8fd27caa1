//! Pruning, 4-way subdivision and relocation, driven by statistics gathered
//! over one densification interval.

use rand::Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};

use crate::autograd::GradientAccumulator;
use crate::geometry::{edge_normals, Triangle, Vec3};

use super::TrainConfig;

/// Largest angle, seen from `origin`, between a vertex direction and the
/// centroid direction. Invariant under scaling about `origin`.
pub fn occlusion_footprint(tri: &Triangle, origin: &Vec3) -> f64 {
    let c = tri.centroid() - origin;
    tri.vertices
        .iter()
        .map(|v| {
            let d = v - origin;
            d.cross(&c).norm().atan2(d.dot(&c))
        })
        .fold(0.0, f64::max)
}

/// Distinct views that hit a triangle, counted up to two.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ViewHits {
    first: u32,
    count: u8,
}

impl ViewHits {
    pub fn record(&mut self, view: u32) {
        match self.count {
            0 => {
                self.first = view;
                self.count = 1;
            }
            1 if view != self.first => self.count = 2,
            _ => {}
        }
    }

    pub fn count(&self) -> u32 {
        self.count as u32
    }
}

/// Per-triangle maxima collected since the last densification step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IntervalStats {
    pub max_weight: Vec<f64>,
    pub views: Vec<ViewHits>,
    pub max_footprint: Vec<f64>,
}

impl IntervalStats {
    pub fn new(n: usize) -> Self {
        Self {
            max_weight: vec![0.0; n],
            views: vec![ViewHits::default(); n],
            max_footprint: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.max_weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.max_weight.is_empty()
    }

    pub fn reset(&mut self, n: usize) {
        *self = Self::new(n);
    }

    /// Folds in one rendered view. Footprints are measured from `origin`
    /// (the camera center) for every triangle the view hit.
    pub fn record_view(
        &mut self,
        view: u32,
        acc: &GradientAccumulator,
        soup: &[Triangle],
        origin: &Vec3,
        use_footprint: bool,
    ) {
        for i in 0..soup.len() {
            if !acc.hit[i] {
                continue;
            }
            self.max_weight[i] = self.max_weight[i].max(acc.max_weight[i]);
            self.views[i].record(view);
            if use_footprint {
                self.max_footprint[i] =
                    self.max_footprint[i].max(occlusion_footprint(&soup[i], origin));
            }
        }
    }

    fn select(&self, keep: &[usize]) -> Self {
        Self {
            max_weight: keep.iter().map(|&i| self.max_weight[i]).collect(),
            views: keep.iter().map(|&i| self.views[i]).collect(),
            max_footprint: keep.iter().map(|&i| self.max_footprint[i]).collect(),
        }
    }
}

/// Which of the three pruning rules a triangle violates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PruneReasons {
    pub low_opacity: bool,
    pub low_importance: bool,
    pub few_views: bool,
}

impl PruneReasons {
    pub fn any(&self) -> bool {
        self.low_opacity || self.low_importance || self.few_views
    }
}

/// `n_views` is the number of training views; the view rule never asks for
/// more distinct views than exist.
pub fn prune_reasons(
    tri: &Triangle,
    stats: &IntervalStats,
    i: usize,
    cfg: &TrainConfig,
    n_views: usize,
) -> PruneReasons {
    let needed = cfg.min_view_hits.min(n_views as u32);
    PruneReasons {
        low_opacity: tri.opacity() < cfg.opacity_dead,
        low_importance: stats.max_weight[i] < cfg.importance_threshold,
        few_views: stats.views[i].count() < needed,
    }
}

/// Removes every triangle that violates a pruning rule. Returns the old
/// index of each survivor.
pub fn prune(
    soup: &mut Vec<Triangle>,
    stats: &mut IntervalStats,
    cfg: &TrainConfig,
    n_views: usize,
) -> Vec<usize> {
    let keep: Vec<usize> = (0..soup.len())
        .filter(|&i| !prune_reasons(&soup[i], stats, i, cfg, n_views).any())
        .collect();
    *soup = keep.iter().map(|&i| soup[i].clone()).collect();
    *stats = stats.select(&keep);
    keep
}

/// Opacity for each of two primitives that together stand in for one.
pub fn split_opacity(parent: f64) -> f64 {
    1.0 - (1.0 - parent).sqrt()
}

/// Midpoint subdivision into four similar triangles of a quarter the area.
/// Children inherit appearance and smoothness.
pub fn subdivide(tri: &Triangle) -> [Triangle; 4] {
    let [a, b, c] = tri.vertices;
    let (ab, bc, ca) = ((a + b) / 2.0, (b + c) / 2.0, (c + a) / 2.0);
    let opacity = split_opacity(tri.opacity());
    [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]].map(|v| {
        let mut child = tri.clone();
        child.vertices = v;
        child.opacity_logit = crate::geometry::logit(opacity);
        child
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub split: usize,
    pub relocated: usize,
}

/// Grows the soup towards `min(max_triangles, ceil(previous_count * add_shape))`:
/// first by subdividing triangles whose footprint exceeds `split_size`
/// (largest first), then by spawning shrunken, noisy copies of triangles
/// sampled in proportion to their importance. Returns, for each new slot,
/// the old index whose optimizer state it keeps.
pub fn densify(
    soup: &mut Vec<Triangle>,
    stats: &IntervalStats,
    cfg: &TrainConfig,
    previous_count: usize,
    rng: &mut impl Rng,
) -> (DensifyReport, Vec<Option<usize>>) {
    let grown = (previous_count as f64 * cfg.add_shape).ceil() as usize;
    let target = grown.min(cfg.max_triangles);
    let mut report = DensifyReport::default();

    let mut candidates: Vec<usize> = if cfg.use_footprint {
        (0..soup.len())
            .filter(|&i| stats.max_footprint[i] > cfg.split_size)
            .collect()
    } else {
        Vec::new()
    };
    candidates.sort_by(|&a, &b| {
        stats.max_footprint[b]
            .total_cmp(&stats.max_footprint[a])
            .then(a.cmp(&b))
    });
    let mut split = vec![false; soup.len()];
    let mut count = soup.len();
    for &i in &candidates {
        if count + 3 > target {
            break;
        }
        split[i] = true;
        count += 3;
    }

    let mut out = Vec::with_capacity(target.max(soup.len()));
    let mut origin = Vec::with_capacity(out.capacity());
    let mut weights = Vec::with_capacity(out.capacity());
    for (i, tri) in soup.iter().enumerate() {
        if split[i] {
            for child in subdivide(tri) {
                out.push(child);
                origin.push(None);
                weights.push(stats.max_weight[i] / 4.0);
            }
            report.split += 1;
        } else {
            out.push(tri.clone());
            origin.push(Some(i));
            weights.push(stats.max_weight[i]);
        }
    }

    let missing = target.saturating_sub(out.len());
    if missing > 0 && weights.iter().any(|&w| w > 0.0) {
        let dist = WeightedIndex::new(&weights).expect("positive total weight");
        for _ in 0..missing {
            let p = dist.sample(rng);
            let Some(child) = relocated_copy(&out[p], cfg.max_noise_factor, rng) else {
                continue;
            };
            let o = split_opacity(out[p].opacity());
            out[p].opacity_logit = crate::geometry::logit(o);
            out[p].snap_to_f32();
            out.push(child);
            origin.push(None);
            report.relocated += 1;
        }
    }
    for t in out.iter_mut() {
        t.snap_to_f32();
    }
    *soup = out;
    (report, origin)
}

/// The parent shrunk by half about its centroid, with Gaussian vertex noise
/// scaled by the child's inradius.
fn relocated_copy(parent: &Triangle, noise_factor: f64, rng: &mut impl Rng) -> Option<Triangle> {
    let c = parent.centroid();
    let mut child = parent.clone();
    child.vertices = parent.vertices.map(|v| c + (v - c) * 0.5);
    let r = edge_normals(&child).ok()?.inradius();
    let opacity = split_opacity(parent.opacity());
    child.opacity_logit = crate::geometry::logit(opacity);
    let scale = noise_factor * r;
    if scale > 0.0 {
        let normal = Normal::new(0.0, scale).ok()?;
        for _ in 0..8 {
            let mut moved = child.clone();
            for v in moved.vertices.iter_mut() {
                *v += Vec3::from_fn(|_, _| normal.sample(rng));
            }
            moved.snap_to_f32();
            if !moved.is_degenerate() {
                return Some(moved);
            }
        }
    }
    child.snap_to_f32();
    (!child.is_degenerate()).then_some(child)
}
