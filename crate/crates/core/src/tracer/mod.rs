//! k-closest semi-transparent ray tracing of triangle soups.
//!
//! Rays gather their nearest `k` hits in one BVH pass, composite them front to
//! back, and restart traversal behind the last composited hit until the
//! transmittance drops below the termination threshold or no hits remain.
//! Hits are ordered by `(t, triangle id)` so exact ties are resolved the same
//! way regardless of batching.

pub mod bvh;
pub mod camera;
pub mod effects;

use rayon::prelude::*;
use thiserror::Error;

use crate::appearance::{sh_basis, sh_eval_raw, MAX_SH_DEGREE};
use crate::geometry::{edge_normals, window_response, EdgeFrame, Ray, Triangle, Vec3};
use crate::raster::Image;

pub use bvh::{bvh_build, Aabb, Bvh, BvhNode};
pub use camera::{generate_rays, Camera, Intrinsics, PixelSampling, RayBatch, ThinLens};

pub const DEFAULT_K: usize = 16;
pub const T_TERM: f64 = 1e-3;
pub const ALPHA_MAX: f64 = 0.9999;
pub const RESPONSE_EPS: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("scene has no triangles")]
    EmptyScene,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceSettings {
    pub k: usize,
    pub t_term: f64,
    /// Highest SH band evaluated.
    pub sh_degree: usize,
}

impl Default for TraceSettings {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            t_term: T_TERM,
            sh_degree: MAX_SH_DEGREE,
        }
    }
}

/// A triangle soup prepared for tracing: edge frames plus a BVH over the
/// non-degenerate triangles.
pub struct Scene<'a> {
    pub soup: &'a [Triangle],
    frames: Vec<Option<EdgeFrame>>,
    opacity: Vec<f64>,
    bvh: Option<Bvh>,
}

impl<'a> Scene<'a> {
    pub fn new(soup: &'a [Triangle]) -> Self {
        let frames: Vec<Option<EdgeFrame>> = soup
            .iter()
            .map(|t| {
                if t.is_finite() {
                    edge_normals(t).ok()
                } else {
                    None
                }
            })
            .collect();
        let live: Vec<u32> = frames
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.as_ref().map(|_| i as u32))
            .collect();
        let bvh = bvh::bvh_build_subset(soup, &live).ok();
        Self {
            soup,
            opacity: soup.iter().map(Triangle::opacity).collect(),
            frames,
            bvh,
        }
    }

    pub fn frame(&self, id: usize) -> Option<&EdgeFrame> {
        self.frames[id].as_ref()
    }

    pub fn bvh(&self) -> Option<&Bvh> {
        self.bvh.as_ref()
    }

    pub fn opacity(&self, id: usize) -> f64 {
        self.opacity[id]
    }

    /// Candidate hit on triangle `id`: plane intersection with a response
    /// above [`RESPONSE_EPS`].
    #[inline]
    pub fn hit(&self, id: u32, ray: &Ray) -> Option<Hit> {
        let frame = self.frames[id as usize].as_ref()?;
        let (t, point) = frame.intersect(ray)?;
        let response = window_response(frame, self.soup[id as usize].sigma, &point);
        (response > RESPONSE_EPS).then_some(Hit {
            id,
            t,
            point,
            response,
        })
    }

    /// The `k` nearest hits ordered after `after` (exclusive, by `(t, id)`)
    /// and no farther than `t_max`.
    pub fn k_closest(&self, ray: &Ray, after: Option<HitKey>, t_max: f64, k: usize) -> HitBuffer {
        let mut sink = KClosestSink {
            scene: self,
            ray,
            after,
            t_max,
            buffer: HitBuffer::new(k),
        };
        if let Some(bvh) = &self.bvh {
            let t_lo = after.map_or(f64::NEG_INFINITY, |a| a.t);
            bvh.traverse(ray, t_lo, &mut sink);
        }
        sink.buffer
    }

    /// Front-to-back compositing along `ray` up to `t_max`. Per-hit records are
    /// appended to `record` when given.
    pub fn trace_segment(
        &self,
        ray: &Ray,
        t_max: f64,
        settings: &TraceSettings,
        mut record: Option<&mut Vec<HitRecord>>,
    ) -> CompositeState {
        let mut state = CompositeState::default();
        let k = settings.k.max(1);
        let basis = sh_basis(&ray.direction, settings.sh_degree);
        let mut after = None;
        'batches: loop {
            let buffer = self.k_closest(ray, after, t_max, k);
            for hit in buffer.hits() {
                let rec = self.composite(&mut state, hit, ray, &basis, settings.sh_degree);
                if let Some(r) = record.as_deref_mut() {
                    r.push(rec);
                }
                if state.transmittance < settings.t_term {
                    break 'batches;
                }
            }
            if !buffer.is_full() {
                break;
            }
            after = buffer.hits().last().map(Hit::key);
        }
        state
    }

    pub fn trace_ray(&self, ray: &Ray, settings: &TraceSettings) -> CompositeState {
        self.trace_segment(ray, f64::INFINITY, settings, None)
    }

    fn composite(
        &self,
        state: &mut CompositeState,
        hit: &Hit,
        ray: &Ray,
        basis: &[f64; 16],
        sh_degree: usize,
    ) -> HitRecord {
        let id = hit.id as usize;
        let tri = &self.soup[id];
        let raw_alpha = self.opacity[id] * hit.response;
        let alpha = raw_alpha.clamp(0.0, ALPHA_MAX);
        let raw = sh_eval_raw(&tri.sh, basis, sh_degree);
        let color = raw.map(|c| c.clamp(0.0, 1.0));
        let frame = self.frames[id]
            .as_ref()
            .expect("hit on degenerate triangle");
        let normal = if frame.face_normal.dot(&ray.direction) > 0.0 {
            -frame.face_normal
        } else {
            frame.face_normal
        };
        let t_before = state.transmittance;
        let w = t_before * alpha;
        for ch in 0..3 {
            state.color[ch] += w * color[ch];
        }
        state.depth += w * hit.t;
        state.normal += normal * w;
        state.transmittance = t_before * (1.0 - alpha);
        state.hits += 1;
        HitRecord {
            id: hit.id,
            t: hit.t,
            point: hit.point,
            response: hit.response,
            alpha,
            alpha_clamped: raw_alpha > ALPHA_MAX,
            color,
            color_active: raw.map(|c| c > 0.0 && c < 1.0),
            transmittance: t_before,
            normal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct HitKey {
    pub t: f64,
    pub id: u32,
}

impl HitKey {
    fn before(&self, other: &HitKey) -> bool {
        self.t < other.t || (self.t == other.t && self.id < other.id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub id: u32,
    pub t: f64,
    pub point: Vec3,
    pub response: f64,
}

impl Hit {
    pub fn key(&self) -> HitKey {
        HitKey {
            t: self.t,
            id: self.id,
        }
    }
}

/// Fixed-capacity buffer of hits sorted by `(t, id)`.
#[derive(Clone, Debug)]
pub struct HitBuffer {
    hits: Vec<Hit>,
    capacity: usize,
}

impl HitBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "k must be at least 1");
        Self {
            hits: Vec::with_capacity(capacity),
            capacity,
        }
    }

    pub fn hits(&self) -> &[Hit] {
        &self.hits
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.hits.len() == self.capacity
    }

    /// Insertion sort step; drops the farthest entry when over capacity.
    pub fn insert(&mut self, hit: Hit) {
        let key = hit.key();
        if self.is_full() && !key.before(&self.hits[self.capacity - 1].key()) {
            return;
        }
        let mut pos = self.hits.len();
        while pos > 0 && key.before(&self.hits[pos - 1].key()) {
            pos -= 1;
        }
        if self.is_full() {
            self.hits.pop();
        }
        self.hits.insert(pos, hit);
    }
}

struct KClosestSink<'s, 'a> {
    scene: &'s Scene<'a>,
    ray: &'s Ray,
    after: Option<HitKey>,
    t_max: f64,
    buffer: HitBuffer,
}

impl bvh::TraversalSink for KClosestSink<'_, '_> {
    #[inline]
    fn cull_distance(&self) -> f64 {
        if self.buffer.is_full() {
            self.buffer.hits[self.buffer.capacity - 1].t
        } else {
            self.t_max
        }
    }

    #[inline]
    fn visit(&mut self, id: u32) {
        let Some(hit) = self.scene.hit(id, self.ray) else {
            return;
        };
        if hit.t > self.t_max {
            return;
        }
        if let Some(after) = &self.after {
            if !after.before(&hit.key()) {
                return;
            }
        }
        self.buffer.insert(hit);
    }
}

/// Running front-to-back blend. Color, depth and normal are weighted by
/// `T_i * alpha_i`; the background is not included.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeState {
    pub color: [f64; 3],
    pub transmittance: f64,
    pub depth: f64,
    pub normal: Vec3,
    pub hits: usize,
}

impl Default for CompositeState {
    fn default() -> Self {
        Self {
            color: [0.0; 3],
            transmittance: 1.0,
            depth: 0.0,
            normal: Vec3::zeros(),
            hits: 0,
        }
    }
}

impl CompositeState {
    /// Final color over `background`.
    pub fn resolve(&self, background: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|ch| self.color[ch] + self.transmittance * background[ch])
    }
}

/// Everything the backward pass needs about one composited hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HitRecord {
    pub id: u32,
    pub t: f64,
    pub point: Vec3,
    pub response: f64,
    pub alpha: f64,
    pub alpha_clamped: bool,
    pub color: [f64; 3],
    /// Channels whose SH value was not clamped.
    pub color_active: [bool; 3],
    /// Transmittance in front of this hit.
    pub transmittance: f64,
    /// Face normal oriented against the ray.
    pub normal: Vec3,
}

pub fn trace_k_closest(scene: &Scene, ray: &Ray, t_start: f64, k: usize) -> HitBuffer {
    let after = HitKey {
        t: t_start,
        id: u32::MAX,
    };
    scene.k_closest(ray, Some(after), f64::INFINITY, k)
}

pub fn trace_ray(scene: &Scene, ray: &Ray, settings: &TraceSettings) -> CompositeState {
    scene.trace_ray(ray, settings)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub trace: TraceSettings,
    pub sampling: PixelSampling,
    pub samples_per_pixel: usize,
    pub background: [f64; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            trace: TraceSettings::default(),
            sampling: PixelSampling::Center,
            samples_per_pixel: 1,
            background: [0.0; 3],
        }
    }
}

/// Per-pixel render outputs. `color` includes the background.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: Image,
    pub depth: Vec<f64>,
    pub normal: Vec<Vec3>,
    pub transmittance: Vec<f64>,
}

impl RenderOutput {
    fn from_pixels(width: usize, height: usize, pixels: Vec<([f64; 3], CompositeState)>) -> Self {
        let mut color = Vec::with_capacity(pixels.len());
        let mut depth = Vec::with_capacity(pixels.len());
        let mut normal = Vec::with_capacity(pixels.len());
        let mut transmittance = Vec::with_capacity(pixels.len());
        for (c, s) in pixels {
            color.push(c);
            depth.push(s.depth);
            normal.push(s.normal);
            transmittance.push(s.transmittance);
        }
        Self {
            color: Image {
                width,
                height,
                pixels: color,
            },
            depth,
            normal,
            transmittance,
        }
    }
}

/// Traces every pixel of `camera` and averages its samples.
pub fn render_image(scene: &Scene, camera: &Camera, options: &RenderOptions) -> RenderOutput {
    let batch = generate_rays(camera, options.sampling, options.samples_per_pixel);
    render_batch(scene, &batch, |scene, ray| {
        let s = scene.trace_segment(ray, f64::INFINITY, &options.trace, None);
        (s.resolve(options.background), s)
    })
}

pub(crate) fn render_batch(
    scene: &Scene,
    batch: &RayBatch,
    trace: impl Fn(&Scene, &Ray) -> ([f64; 3], CompositeState) + Sync,
) -> RenderOutput {
    let spp = batch.samples_per_pixel;
    let pixels: Vec<([f64; 3], CompositeState)> = batch
        .rays
        .par_chunks(spp)
        .map(|samples| {
            // Identical samples (pinhole, center sampling) are traced once.
            let unique = if samples.iter().all(|r| r == &samples[0]) {
                &samples[..1]
            } else {
                samples
            };
            if unique.len() == 1 {
                return trace(scene, &unique[0]);
            }
            let mut color = [0.0; 3];
            let mut acc = CompositeState {
                transmittance: 0.0,
                ..CompositeState::default()
            };
            for ray in unique {
                let (c, s) = trace(scene, ray);
                for ch in 0..3 {
                    color[ch] += c[ch];
                }
                acc.depth += s.depth;
                acc.normal += s.normal;
                acc.transmittance += s.transmittance;
                acc.hits += s.hits;
            }
            let n = unique.len() as f64;
            acc.depth /= n;
            acc.normal /= n;
            acc.transmittance /= n;
            (color.map(|c| c / n), acc)
        })
        .collect();
    RenderOutput::from_pixels(batch.width, batch.height, pixels)
}
