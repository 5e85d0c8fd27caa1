//! Analytic backward pass from per-pixel loss gradients to triangle
//! parameters.
//!
//! The forward pass keeps, per ray, the ordered list of composited hits with
//! their transmittance, alpha and color. Backward walks that list from the
//! back, so every hit sees the blended contribution of everything behind it.

pub mod check;
pub mod fd;
pub mod window;

use rayon::prelude::*;

use crate::appearance::{coeffs_for_degree, sh_basis};
use crate::geometry::{Ray, ShCoefficients, Vec3, SH_COEFFS};
use crate::raster::Image;
use crate::tracer::{CompositeState, HitRecord, RenderOutput, Scene, TraceSettings};

pub use fd::central_difference;
pub use window::{backward_window, VertexGradMode, WindowGrad};

/// Pixels per work item in the forward and backward passes. Fixed so results
/// do not depend on the number of worker threads.
const PIXELS_PER_CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleGrad {
    pub vertices: [Vec3; 3],
    pub sh: ShCoefficients,
    pub opacity_logit: f64,
    pub sigma: f64,
}

impl Default for TriangleGrad {
    fn default() -> Self {
        Self {
            vertices: [Vec3::zeros(); 3],
            sh: [[0.0; 3]; SH_COEFFS],
            opacity_logit: 0.0,
            sigma: 0.0,
        }
    }
}

impl TriangleGrad {
    pub fn add(&mut self, other: &TriangleGrad) {
        for j in 0..3 {
            self.vertices[j] += other.vertices[j];
        }
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            for ch in 0..3 {
                a[ch] += b[ch];
            }
        }
        self.opacity_logit += other.opacity_logit;
        self.sigma += other.sigma;
    }

    pub fn is_finite(&self) -> bool {
        self.vertices
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
            && self.sh.iter().flatten().all(|x| x.is_finite())
            && self.opacity_logit.is_finite()
            && self.sigma.is_finite()
    }
}

/// Loss gradient with respect to one pixel's render outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PixelGrad {
    pub color: [f64; 3],
    pub depth: f64,
    pub normal: Vec3,
    /// Final transmittance (the background weight).
    pub transmittance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardSettings {
    pub sh_degree: usize,
    pub mode: VertexGradMode,
    pub background: [f64; 3],
}

/// Per-triangle gradients plus the statistics pruning needs.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientAccumulator {
    pub grads: Vec<TriangleGrad>,
    /// Largest `T * o * rho` seen for each triangle.
    pub max_weight: Vec<f64>,
    pub hit: Vec<bool>,
    /// Per-hit contributions discarded for being non-finite.
    pub nan_drops: u64,
}

impl GradientAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            grads: vec![TriangleGrad::default(); n],
            max_weight: vec![0.0; n],
            hit: vec![false; n],
            nan_drops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn merge(&mut self, other: &GradientAccumulator) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add(b);
        }
        for (a, b) in self.max_weight.iter_mut().zip(&other.max_weight) {
            *a = a.max(*b);
        }
        for (a, b) in self.hit.iter_mut().zip(&other.hit) {
            *a |= *b;
        }
        self.nan_drops += other.nan_drops;
    }
}

/// Final transmittance implied by a hit list.
pub fn final_transmittance(hits: &[HitRecord]) -> f64 {
    hits.last()
        .map_or(1.0, |h| h.transmittance * (1.0 - h.alpha))
}

/// Back-propagates one ray's loss gradient through its composited hits.
pub fn backward_ray(
    scene: &Scene,
    ray: &Ray,
    hits: &[HitRecord],
    upstream: &PixelGrad,
    settings: &BackwardSettings,
    acc: &mut GradientAccumulator,
) {
    if hits.is_empty() {
        return;
    }
    let basis = sh_basis(&ray.direction, settings.sh_degree);
    let n_coeffs = coeffs_for_degree(settings.sh_degree);
    let t_final = final_transmittance(hits);

    // Contributions of everything behind the current hit.
    let mut behind_color = settings.background.map(|b| b * t_final);
    let mut behind_depth = 0.0;
    let mut behind_normal = Vec3::zeros();

    for h in hits.iter().rev() {
        let id = h.id as usize;
        let tri = &scene.soup[id];
        let weight = h.transmittance * h.alpha;
        let keep = 1.0 - h.alpha;

        let mut dl_dalpha = 0.0;
        for ch in 0..3 {
            dl_dalpha +=
                upstream.color[ch] * (h.transmittance * h.color[ch] - behind_color[ch] / keep);
        }
        dl_dalpha += upstream.depth * (h.transmittance * h.t - behind_depth / keep);
        dl_dalpha += upstream
            .normal
            .dot(&(h.normal * h.transmittance - behind_normal / keep));
        dl_dalpha -= upstream.transmittance * t_final / keep;

        for ch in 0..3 {
            behind_color[ch] += weight * h.color[ch];
        }
        behind_depth += weight * h.t;
        behind_normal += h.normal * weight;

        let mut delta = TriangleGrad::default();
        for ch in 0..3 {
            if !h.color_active[ch] {
                continue;
            }
            let dl_dc = upstream.color[ch] * weight;
            for k in 0..n_coeffs {
                delta.sh[k][ch] = dl_dc * basis[k];
            }
        }

        let opacity = scene.opacity(id);
        let frame = scene
            .frame(id)
            .expect("recorded hit on degenerate triangle");
        if !h.alpha_clamped {
            delta.opacity_logit = dl_dalpha * h.response * opacity * (1.0 - opacity);
            let dl_drho = dl_dalpha * opacity;
            let wg = backward_window(tri, frame, ray, &h.point, dl_drho, settings.mode);
            delta.vertices = wg.vertices;
            delta.sigma = wg.sigma;
        }

        if upstream.normal != Vec3::zeros() {
            let g = window::face_normal_vjp(&tri.vertices, &h.normal, &(upstream.normal * weight));
            for j in 0..3 {
                delta.vertices[j] += g[j];
            }
        }
        if settings.mode == VertexGradMode::Exact && upstream.depth != 0.0 {
            let g = window::hit_distance_gradient(&tri.vertices, ray, &h.point);
            for j in 0..3 {
                delta.vertices[j] += g[j] * (upstream.depth * weight);
            }
        }

        let importance = h.transmittance * opacity * h.response;
        if importance > acc.max_weight[id] {
            acc.max_weight[id] = importance;
        }
        acc.hit[id] = true;
        if delta.is_finite() {
            acc.grads[id].add(&delta);
        } else {
            acc.nan_drops += 1;
        }
    }
}

/// Forward render that keeps every pixel's hit list for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub width: usize,
    pub height: usize,
    pub rays: Vec<Ray>,
    pub states: Vec<CompositeState>,
    hits: Vec<HitRecord>,
    offsets: Vec<usize>,
}

impl ForwardPass {
    pub fn hits(&self, pixel: usize) -> &[HitRecord] {
        &self.hits[self.offsets[pixel]..self.offsets[pixel + 1]]
    }

    pub fn total_hits(&self) -> usize {
        self.hits.len()
    }

    pub fn output(&self, background: [f64; 3]) -> RenderOutput {
        RenderOutput {
            color: Image {
                width: self.width,
                height: self.height,
                pixels: self.states.iter().map(|s| s.resolve(background)).collect(),
            },
            depth: self.states.iter().map(|s| s.depth).collect(),
            normal: self.states.iter().map(|s| s.normal).collect(),
            transmittance: self.states.iter().map(|s| s.transmittance).collect(),
        }
    }
}

/// One ray per pixel, row-major.
pub fn forward_pass(
    scene: &Scene,
    rays: Vec<Ray>,
    width: usize,
    height: usize,
    settings: &TraceSettings,
) -> ForwardPass {
    assert_eq!(rays.len(), width * height);
    let chunks: Vec<(Vec<CompositeState>, Vec<HitRecord>, Vec<usize>)> = rays
        .par_chunks(PIXELS_PER_CHUNK)
        .map(|chunk| {
            let mut states = Vec::with_capacity(chunk.len());
            let mut hits = Vec::new();
            let mut counts = Vec::with_capacity(chunk.len());
            for ray in chunk {
                let before = hits.len();
                states.push(scene.trace_segment(ray, f64::INFINITY, settings, Some(&mut hits)));
                counts.push(hits.len() - before);
            }
            (states, hits, counts)
        })
        .collect();
    let mut states = Vec::with_capacity(rays.len());
    let mut hits = Vec::with_capacity(chunks.iter().map(|c| c.1.len()).sum());
    let mut offsets = Vec::with_capacity(rays.len() + 1);
    offsets.push(0);
    for (s, h, counts) in chunks {
        states.extend(s);
        hits.extend(h);
        for c in counts {
            offsets.push(offsets.last().unwrap() + c);
        }
    }
    ForwardPass {
        width,
        height,
        rays,
        states,
        hits,
        offsets,
    }
}

/// Backward over every pixel. Each chunk accumulates privately; chunks are
/// merged in a fixed order.
pub fn backward_pass(
    scene: &Scene,
    forward: &ForwardPass,
    upstream: &[PixelGrad],
    settings: &BackwardSettings,
) -> GradientAccumulator {
    let n = scene.soup.len();
    let pixels: Vec<usize> = (0..forward.rays.len()).collect();
    let partials: Vec<GradientAccumulator> = pixels
        .par_chunks(PIXELS_PER_CHUNK)
        .map(|chunk| {
            let mut acc = GradientAccumulator::new(n);
            for &px in chunk {
                let hits = forward.hits(px);
                if hits.is_empty() {
                    continue;
                }
                backward_ray(
                    scene,
                    &forward.rays[px],
                    hits,
                    &upstream[px],
                    settings,
                    &mut acc,
                );
            }
            acc
        })
        .collect();
    let mut total = GradientAccumulator::new(n);
    for p in &partials {
        total.merge(p);
    }
    total
}
