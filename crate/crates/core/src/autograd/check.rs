//! Gradient certification: analytic gradients of a single-triangle render
//! against central finite differences over random (triangle, ray) pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::appearance::{sh_basis, sh_eval_raw, MAX_SH_DEGREE};
use crate::geometry::{edge_normals, window_response, Ray, Triangle, Vec3, SH_COEFFS};
use crate::tracer::{HitRecord, Scene, TraceSettings};

use super::fd::{central_difference, relative_error};
use super::{backward_ray, BackwardSettings, GradientAccumulator, PixelGrad, VertexGradMode};

pub const SH_TOLERANCE: f64 = 1e-5;
pub const OPACITY_TOLERANCE: f64 = 1e-4;
pub const SIGMA_TOLERANCE: f64 = 1e-4;
pub const VERTEX_TOLERANCE: f64 = 1e-3;

const SH_STEP: f64 = 1e-4;
const LOGIT_STEP: f64 = 1e-4;
const SIGMA_STEP: f64 = 1e-5;
const VERTEX_STEP: f64 = 1e-6;
const ERROR_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub tolerance: f64,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub trials: usize,
    /// Groups certified with the exact vertex gradient.
    pub groups: Vec<GroupReport>,
    /// Vertex error of the approximate gradient (fixed hit point and
    /// inradius); informational only.
    pub approximate_vertices: GroupReport,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupReport::passed)
    }
}

struct Trial {
    tri: Triangle,
    ray: Ray,
    upstream: PixelGrad,
    background: [f64; 3],
}

fn random_trial(rng: &mut ChaCha8Rng) -> Option<Trial> {
    let v = [0; 3].map(|_| Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0)));
    let mut tri = Triangle::new(v, rng.gen_range(0.1..0.9), rng.gen_range(0.2..3.0));
    if tri.area() < 0.05 {
        return None;
    }
    tri.set_base_color([0; 3].map(|_| rng.gen_range(0.25..0.75)));
    for k in 1..SH_COEFFS {
        for ch in 0..3 {
            tri.sh[k][ch] = rng.gen_range(-0.05..0.05);
        }
    }
    let frame = edge_normals(&tri).ok()?;
    let (b1, b2) = (rng.gen::<f64>(), rng.gen::<f64>());
    let (b1, b2) = if b1 + b2 > 1.0 {
        (1.0 - b1, 1.0 - b2)
    } else {
        (b1, b2)
    };
    let target = v[0] + (v[1] - v[0]) * b1 + (v[2] - v[0]) * b2;
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let origin = target
        + frame.face_normal * (side * rng.gen_range(1.0..4.0))
        + Vec3::from_fn(|_, _| rng.gen_range(-0.7..0.7));
    let ray = Ray::new(origin, target - origin);
    let (_, p) = frame.intersect(&ray)?;
    let rho = window_response(&frame, tri.sigma, &p);
    if !(0.05..=0.95).contains(&rho) {
        return None;
    }
    // Away from the kink where the nearest edge switches.
    let mut l: Vec<f64> = (0..3).map(|i| frame.edge_distance(i, &p)).collect();
    l.sort_by(f64::total_cmp);
    if l[2] - l[1] < 1e-3 * frame.inradius() {
        return None;
    }
    // Away from the color clamp.
    let raw = sh_eval_raw(
        &tri.sh,
        &sh_basis(&ray.direction, MAX_SH_DEGREE),
        MAX_SH_DEGREE,
    );
    if raw.iter().any(|c| !(0.02..0.98).contains(c)) {
        return None;
    }
    let upstream = PixelGrad {
        color: [0; 3].map(|_| rng.gen_range(-1.0..1.0)),
        depth: rng.gen_range(-0.2..0.2),
        normal: Vec3::from_fn(|_, _| rng.gen_range(-0.5..0.5)),
        transmittance: rng.gen_range(-0.5..0.5),
    };
    let background = [0; 3].map(|_| rng.gen_range(0.0..1.0));
    Some(Trial {
        tri,
        ray,
        upstream,
        background,
    })
}

fn trace_loss(trial: &Trial, tri: &Triangle) -> f64 {
    let soup = std::slice::from_ref(tri);
    let state =
        Scene::new(soup).trace_segment(&trial.ray, f64::INFINITY, &TraceSettings::default(), None);
    let c = state.resolve(trial.background);
    let up = &trial.upstream;
    (0..3).map(|ch| up.color[ch] * c[ch]).sum::<f64>()
        + up.depth * state.depth
        + up.normal.dot(&state.normal)
        + up.transmittance * state.transmittance
}

fn analytic(trial: &Trial, mode: VertexGradMode) -> Option<super::TriangleGrad> {
    let soup = std::slice::from_ref(&trial.tri);
    let scene = Scene::new(soup);
    let mut records: Vec<HitRecord> = Vec::new();
    scene.trace_segment(
        &trial.ray,
        f64::INFINITY,
        &TraceSettings::default(),
        Some(&mut records),
    );
    if records.len() != 1 {
        return None;
    }
    let settings = BackwardSettings {
        sh_degree: MAX_SH_DEGREE,
        mode,
        background: trial.background,
    };
    let mut acc = GradientAccumulator::new(1);
    backward_ray(
        &scene,
        &trial.ray,
        &records,
        &trial.upstream,
        &settings,
        &mut acc,
    );
    Some(acc.grads.swap_remove(0))
}

#[derive(Default)]
struct Stats {
    max: f64,
    sum: f64,
    n: usize,
}

impl Stats {
    fn push(&mut self, e: f64) {
        self.max = self.max.max(if e.is_nan() { f64::INFINITY } else { e });
        self.sum += e;
        self.n += 1;
    }

    fn report(&self, name: &'static str, tolerance: f64) -> GroupReport {
        GroupReport {
            name,
            max_rel_error: self.max,
            mean_rel_error: self.sum / self.n.max(1) as f64,
            tolerance,
        }
    }
}

/// Runs `trials` accepted (triangle, ray) pairs drawn from `seed`.
pub fn run_gradcheck(seed: u64, trials: usize) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sh, mut opacity, mut sigma, mut vertices, mut approx) = (
        Stats::default(),
        Stats::default(),
        Stats::default(),
        Stats::default(),
        Stats::default(),
    );
    let mut done = 0;
    while done < trials {
        let Some(trial) = random_trial(&mut rng) else {
            continue;
        };
        let Some(exact) = analytic(&trial, VertexGradMode::Exact) else {
            continue;
        };
        let approximate = analytic(&trial, VertexGradMode::Approximate).expect("same hit list");
        done += 1;
        let base = &trial.tri;

        let sh_x: Vec<f64> = base.sh.iter().flatten().copied().collect();
        let fd = central_difference(
            |x| {
                let mut t = base.clone();
                for (k, c) in t.sh.iter_mut().enumerate() {
                    c.copy_from_slice(&x[3 * k..3 * k + 3]);
                }
                trace_loss(&trial, &t)
            },
            &sh_x,
            SH_STEP,
        );
        let a: Vec<f64> = exact.sh.iter().flatten().copied().collect();
        sh.push(relative_error(&a, &fd, ERROR_FLOOR));

        let fd = central_difference(
            |x| {
                let mut t = base.clone();
                t.opacity_logit = x[0];
                trace_loss(&trial, &t)
            },
            &[base.opacity_logit],
            LOGIT_STEP,
        );
        opacity.push(relative_error(&[exact.opacity_logit], &fd, ERROR_FLOOR));

        let fd = central_difference(
            |x| {
                let mut t = base.clone();
                t.sigma = x[0];
                trace_loss(&trial, &t)
            },
            &[base.sigma],
            SIGMA_STEP,
        );
        sigma.push(relative_error(&[exact.sigma], &fd, ERROR_FLOOR));

        let v_x: Vec<f64> = base
            .vertices
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect();
        let fd = central_difference(
            |x| {
                let mut t = base.clone();
                for j in 0..3 {
                    t.vertices[j] = Vec3::new(x[3 * j], x[3 * j + 1], x[3 * j + 2]);
                }
                trace_loss(&trial, &t)
            },
            &v_x,
            VERTEX_STEP,
        );
        let flat = |g: &super::TriangleGrad| -> Vec<f64> {
            g.vertices.iter().flat_map(|v| v.iter().copied()).collect()
        };
        vertices.push(relative_error(&flat(&exact), &fd, ERROR_FLOOR));
        approx.push(relative_error(&flat(&approximate), &fd, ERROR_FLOOR));
    }
    GradcheckReport {
        trials,
        groups: vec![
            sh.report("sh", SH_TOLERANCE),
            opacity.report("opacity_logit", OPACITY_TOLERANCE),
            sigma.report("sigma", SIGMA_TOLERANCE),
            vertices.report("vertices", VERTEX_TOLERANCE),
        ],
        approximate_vertices: approx.report("vertices_approximate", VERTEX_TOLERANCE),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_gradcheck_passes() {
        let report = run_gradcheck(7, 50);
        for g in &report.groups {
            assert!(g.passed(), "{g:?}");
        }
        assert!(report.approximate_vertices.max_rel_error.is_finite());
    }

    #[test]
    fn gradcheck_is_deterministic() {
        assert_eq!(run_gradcheck(3, 10), run_gradcheck(3, 10));
    }
}
