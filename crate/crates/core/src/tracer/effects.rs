//! Single-bounce reflection/refraction off analytic surfaces, and
//! environment-map shading for rays that leave the scene.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::geometry::{Ray, Vec3, T_MIN};
use crate::raster::Image;

use super::{
    generate_rays, render_batch, Camera, CompositeState, RenderOptions, RenderOutput, Scene,
    TraceSettings,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EffectSurface {
    Plane { point: Vec3, normal: Vec3 },
    Sphere { center: Vec3, radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EffectMode {
    Reflect,
    /// `eta` is the index of the surface medium relative to the outside.
    Refract {
        eta: f64,
    },
}

/// Where a surface hit lies and which way its geometric normal faces.
#[derive(Clone, Copy, Debug)]
struct SurfaceHit {
    t: f64,
    point: Vec3,
    normal: Vec3,
}

impl EffectSurface {
    fn intersect(&self, ray: &Ray) -> Option<SurfaceHit> {
        match *self {
            EffectSurface::Plane { point, normal } => {
                let n = normal.normalize();
                let denom = n.dot(&ray.direction);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = n.dot(&(point - ray.origin)) / denom;
                (t > T_MIN).then(|| SurfaceHit {
                    t,
                    point: ray.at(t),
                    normal: n,
                })
            }
            EffectSurface::Sphere { center, radius } => {
                let oc = ray.origin - center;
                let b = oc.dot(&ray.direction);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [-b - sq, -b + sq].into_iter().find(|&t| t > T_MIN)?;
                let point = ray.at(t);
                Some(SurfaceHit {
                    t,
                    point,
                    normal: (point - center) / radius,
                })
            }
        }
    }
}

pub fn reflect(dir: &Vec3, normal: &Vec3) -> Vec3 {
    dir - normal * (2.0 * dir.dot(normal))
}

/// Snell refraction of `dir` through a surface with `normal` facing the
/// incoming side; `eta` is the ratio of incident to transmitted indices.
/// `None` on total internal reflection.
pub fn refract(dir: &Vec3, normal: &Vec3, eta: f64) -> Option<Vec3> {
    let cos_i = -dir.dot(normal);
    let k = 1.0 - eta * eta * (1.0 - cos_i * cos_i);
    if k < 0.0 {
        return None;
    }
    Some(dir * eta + normal * (eta * cos_i - k.sqrt()))
}

/// Equirectangular environment map. Longitude is measured around the world
/// `y` axis from `+z`; `v = 0` is the `-y` pole (up, given `+y` down).
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentMap {
    pub image: Image,
}

impl EnvironmentMap {
    pub fn constant(rgb: [f64; 3]) -> Self {
        Self {
            image: Image::filled(1, 1, rgb),
        }
    }

    pub fn lookup(&self, dir: &Vec3) -> [f64; 3] {
        let img = &self.image;
        let phi = dir.x.atan2(dir.z);
        let u = 0.5 + phi / (2.0 * PI);
        let v = (-dir.y).clamp(-1.0, 1.0).acos() / PI;
        let x = u * img.width as f64 - 0.5;
        let y = (v * img.height as f64 - 0.5).clamp(0.0, (img.height - 1) as f64);
        let x0 = x.floor();
        let y0 = y.floor();
        let (fx, fy) = (x - x0, y - y0);
        let w = img.width as i64;
        let wrap = |i: i64| i.rem_euclid(w) as usize;
        let (xa, xb) = (wrap(x0 as i64), wrap(x0 as i64 + 1));
        let ya = y0 as usize;
        let yb = (ya + 1).min(img.height - 1);
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let top = img.get(xa, ya)[ch] * (1.0 - fx) + img.get(xb, ya)[ch] * fx;
            let bottom = img.get(xa, yb)[ch] * (1.0 - fx) + img.get(xb, yb)[ch] * fx;
            out[ch] = top * (1.0 - fy) + bottom * fy;
        }
        out
    }
}

/// What a ray sees after leaving the triangle scene.
#[derive(Clone, Copy, Debug)]
pub enum MissShading<'e> {
    Background([f64; 3]),
    Environment(&'e EnvironmentMap),
}

impl MissShading<'_> {
    pub fn shade(&self, dir: &Vec3) -> [f64; 3] {
        match self {
            MissShading::Background(rgb) => *rgb,
            MissShading::Environment(env) => env.lookup(dir),
        }
    }
}

/// Counts secondary rays so callers can check the single-bounce contract.
#[derive(Debug, Default)]
pub struct BounceCounter {
    pub primaries: AtomicU64,
    pub secondaries: AtomicU64,
    /// Largest number of secondaries spawned for one primary ray.
    pub max_per_primary: AtomicU64,
}

impl BounceCounter {
    fn record(&self, spawned: u64) {
        self.primaries.fetch_add(1, Ordering::Relaxed);
        self.secondaries.fetch_add(spawned, Ordering::Relaxed);
        self.max_per_primary.fetch_max(spawned, Ordering::Relaxed);
    }
}

/// The primary ray composites triangles up to the effect surface; a surface
/// hit spawns exactly one reflected or refracted ray, whose traced color
/// stands in for the background of the primary segment.
pub fn trace_effect_ray(
    scene: &Scene,
    ray: &Ray,
    mode: EffectMode,
    surface: &EffectSurface,
    miss: MissShading,
    settings: &TraceSettings,
    counter: Option<&BounceCounter>,
) -> ([f64; 3], CompositeState) {
    let Some(hit) = surface.intersect(ray) else {
        let state = scene.trace_segment(ray, f64::INFINITY, settings, None);
        if let Some(c) = counter {
            c.record(0);
        }
        return (state.resolve(miss.shade(&ray.direction)), state);
    };
    let primary = scene.trace_segment(ray, hit.t, settings, None);
    if primary.transmittance < settings.t_term {
        if let Some(c) = counter {
            c.record(0);
        }
        return (primary.resolve([0.0; 3]), primary);
    }
    // Orient the normal against the incoming ray.
    let entering = hit.normal.dot(&ray.direction) < 0.0;
    let n = if entering { hit.normal } else { -hit.normal };
    let dir = match mode {
        EffectMode::Reflect => reflect(&ray.direction, &n),
        EffectMode::Refract { eta } => {
            let ratio = if entering { 1.0 / eta } else { eta };
            refract(&ray.direction, &n, ratio).unwrap_or_else(|| reflect(&ray.direction, &n))
        }
    };
    let secondary = Ray::new(hit.point, dir);
    let bounced = scene.trace_segment(&secondary, f64::INFINITY, settings, None);
    if let Some(c) = counter {
        c.record(1);
    }
    let behind = bounced.resolve(miss.shade(&secondary.direction));
    (primary.resolve(behind), primary)
}

/// One effect surface and what it does to rays that reach it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Effect {
    pub surface: EffectSurface,
    pub mode: EffectMode,
}

/// Like [`render_image`](super::render_image), with an optional effect
/// surface and environment map. With neither it renders exactly what
/// `render_image` does.
pub fn render_effects_image(
    scene: &Scene,
    camera: &Camera,
    options: &RenderOptions,
    effect: Option<&Effect>,
    environment: Option<&EnvironmentMap>,
    counter: Option<&BounceCounter>,
) -> RenderOutput {
    let batch = generate_rays(camera, options.sampling, options.samples_per_pixel);
    let miss = match environment {
        Some(env) => MissShading::Environment(env),
        None => MissShading::Background(options.background),
    };
    render_batch(scene, &batch, |scene, ray| match effect {
        Some(e) => trace_effect_ray(
            scene,
            ray,
            e.mode,
            &e.surface,
            miss,
            &options.trace,
            counter,
        ),
        None => {
            let s = scene.trace_segment(ray, f64::INFINITY, &options.trace, None);
            if let Some(c) = counter {
                c.record(0);
            }
            (s.resolve(miss.shade(&ray.direction)), s)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Triangle;

    #[test]
    fn mirror_plane_reflection_law() {
        let s = 0.5f64.sqrt();
        let d = Vec3::new(0.0, -s, -s);
        let r = reflect(&d, &Vec3::z());
        assert!((r - Vec3::new(0.0, -s, s)).norm() < 1e-15);
    }

    #[test]
    fn index_matched_refraction_is_identity() {
        let d = Vec3::new(0.3, -0.4, -0.8).normalize();
        let r = refract(&d, &Vec3::z(), 1.0).unwrap();
        assert!((r - d).norm() < 1e-12);
    }

    #[test]
    fn total_internal_reflection_detected() {
        let d = Vec3::new(0.9, 0.0, -0.1).normalize();
        assert!(refract(&d, &Vec3::z(), 1.5).is_none());
    }

    #[test]
    fn constant_envmap_lookup() {
        let env = EnvironmentMap::constant([0.3, 0.3, 0.3]);
        for d in [Vec3::x(), -Vec3::y(), Vec3::new(0.2, 0.9, -0.1).normalize()] {
            let c = env.lookup(&d);
            for ch in c {
                assert!((ch - 0.3).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn envmap_poles_and_seam() {
        let img = Image::from_fn(8, 4, |x, y| [x as f64, y as f64, 0.0]);
        let env = EnvironmentMap { image: img };
        assert_eq!(env.lookup(&-Vec3::y())[1], 0.0);
        assert_eq!(env.lookup(&Vec3::y())[1], 3.0);
        // Directions either side of the -z seam blend the same two columns.
        let a = env.lookup(&Vec3::new(1e-9, 0.0, -1.0));
        let b = env.lookup(&Vec3::new(-1e-9, 0.0, -1.0));
        assert!((a[0] - b[0]).abs() < 1e-6);
    }

    #[test]
    fn surface_hit_spawns_exactly_one_bounce() {
        let tri = Triangle::new(
            [
                Vec3::new(-5.0, 5.0, 2.0),
                Vec3::new(5.0, 5.0, 2.0),
                Vec3::new(0.0, -5.0, 2.0),
            ],
            0.99,
            0.01,
        );
        let soup = vec![tri];
        let scene = Scene::new(&soup);
        let counter = BounceCounter::default();
        let mirror = EffectSurface::Plane {
            point: Vec3::zeros(),
            normal: Vec3::z(),
        };
        let ray = Ray::new(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.1, 0.0, -1.0));
        let env = EnvironmentMap::constant([0.2, 0.4, 0.6]);
        let (c, _) = trace_effect_ray(
            &scene,
            &ray,
            EffectMode::Reflect,
            &mirror,
            MissShading::Environment(&env),
            &TraceSettings::default(),
            Some(&counter),
        );
        // The bounce hits the triangle: mostly its mid-gray color.
        assert!((c[0] - 0.5).abs() < 0.05, "{c:?}");
        assert_eq!(counter.secondaries.load(Ordering::Relaxed), 1);
        assert_eq!(counter.max_per_primary.load(Ordering::Relaxed), 1);

        let miss = Ray::new(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 1.0));
        let (c, _) = trace_effect_ray(
            &scene,
            &miss,
            EffectMode::Reflect,
            &mirror,
            MissShading::Environment(&env),
            &TraceSettings::default(),
            Some(&counter),
        );
        // Misses the mirror, passes through the triangle plane from behind at
        // z = 2 then sees the environment.
        assert!(c.iter().all(|v| v.is_finite()));
        assert_eq!(counter.primaries.load(Ordering::Relaxed), 2);
        assert_eq!(counter.secondaries.load(Ordering::Relaxed), 1);
    }
}
