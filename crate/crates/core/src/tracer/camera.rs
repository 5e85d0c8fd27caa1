//! Pinhole and thin-lens cameras producing world-space ray batches.
//!
//! Poses are world-to-camera (`x_cam = R x_world + t`), the camera looks down
//! `+z` with `+y` pointing down the image, and pixel `(i, j)` has its center at
//! `(i + 0.5, j + 0.5)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Mat3, Ray, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThinLens {
    /// Aperture radius in world units; 0 degenerates to a pinhole.
    pub aperture_radius: f64,
    /// Distance along the optical axis of the plane in focus.
    pub focal_distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
    pub lens: Option<ThinLens>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelSampling {
    Center,
    /// Uniform jitter inside the pixel footprint, seeded per pixel.
    Jittered {
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub width: usize,
    pub height: usize,
    pub samples_per_pixel: usize,
    /// Row-major pixels, `samples_per_pixel` consecutive rays each.
    pub rays: Vec<Ray>,
}

impl Camera {
    pub fn new(
        rotation: Mat3,
        translation: Vec3,
        intrinsics: Intrinsics,
        width: usize,
        height: usize,
    ) -> Self {
        Self {
            rotation,
            translation,
            intrinsics,
            width,
            height,
            lens: None,
        }
    }

    /// A camera at `eye` looking at `target`; `up` is the world direction that
    /// should appear upward in the image.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let fy = 0.5 * height as f64 / (0.5 * fov_y).tan();
        let intrinsics = Intrinsics {
            fx: fy,
            fy,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
        };
        Self::new(rotation, translation, intrinsics, width, height)
    }

    pub fn with_lens(mut self, lens: ThinLens) -> Self {
        self.lens = Some(lens);
        self
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn is_valid(&self) -> bool {
        self.intrinsics.fx > 0.0 && self.intrinsics.fy > 0.0 && self.width >= 1 && self.height >= 1
    }

    /// Camera-space direction (z = 1) through image coordinates `(u, v)`.
    fn camera_direction(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0)
    }

    fn to_world(&self, dir: &Vec3) -> Vec3 {
        self.rotation.transpose() * dir
    }

    pub fn pinhole_ray(&self, u: f64, v: f64) -> Ray {
        Ray::new(self.center(), self.to_world(&self.camera_direction(u, v)))
    }

    /// Thin-lens ray through `(u, v)` with `lens_sample` in the unit disk.
    pub fn lens_ray(&self, u: f64, v: f64, lens_sample: (f64, f64)) -> Ray {
        match self.lens {
            Some(lens) if lens.aperture_radius > 0.0 => {
                let d = self.camera_direction(u, v);
                let focus = d * lens.focal_distance;
                let origin_cam = Vec3::new(
                    lens.aperture_radius * lens_sample.0,
                    lens.aperture_radius * lens_sample.1,
                    0.0,
                );
                let origin = self.center() + self.to_world(&origin_cam);
                Ray::new(origin, self.to_world(&(focus - origin_cam)))
            }
            _ => self.pinhole_ray(u, v),
        }
    }
}

fn concentric_disk(a: f64, b: f64) -> (f64, f64) {
    let (x, y) = (2.0 * a - 1.0, 2.0 * b - 1.0);
    if x == 0.0 && y == 0.0 {
        return (0.0, 0.0);
    }
    let (r, theta) = if x.abs() > y.abs() {
        (x, std::f64::consts::FRAC_PI_4 * (y / x))
    } else {
        (
            y,
            std::f64::consts::FRAC_PI_2 - std::f64::consts::FRAC_PI_4 * (x / y),
        )
    };
    (r * theta.cos(), r * theta.sin())
}

pub fn generate_rays(
    camera: &Camera,
    sampling: PixelSampling,
    samples_per_pixel: usize,
) -> RayBatch {
    let spp = samples_per_pixel.max(1);
    let mut rays = Vec::with_capacity(camera.width * camera.height * spp);
    let thin_lens = camera.lens.map_or(false, |l| l.aperture_radius > 0.0);
    let seed = match sampling {
        PixelSampling::Center => 0,
        PixelSampling::Jittered { seed } => seed,
    };
    for j in 0..camera.height {
        for i in 0..camera.width {
            let pixel = (j * camera.width + i) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(pixel);
            for _ in 0..spp {
                let (du, dv) = match sampling {
                    PixelSampling::Center => (0.5, 0.5),
                    PixelSampling::Jittered { .. } => (rng.gen::<f64>(), rng.gen::<f64>()),
                };
                let (u, v) = (i as f64 + du, j as f64 + dv);
                let ray = if thin_lens {
                    let disk = concentric_disk(rng.gen(), rng.gen());
                    camera.lens_ray(u, v, disk)
                } else {
                    camera.pinhole_ray(u, v)
                };
                rays.push(ray);
            }
        }
    }
    RayBatch {
        width: camera.width,
        height: camera.height,
        samples_per_pixel: spp,
        rays,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera() -> Camera {
        Camera::look_at(
            Vec3::new(0.0, 0.0, -5.0),
            Vec3::zeros(),
            Vec3::new(0.0, -1.0, 0.0),
            0.8,
            9,
            7,
        )
    }

    #[test]
    fn zero_aperture_matches_pinhole() {
        let cam = camera();
        let lens = cam.clone().with_lens(ThinLens {
            aperture_radius: 0.0,
            focal_distance: 3.0,
        });
        for sampling in [PixelSampling::Center, PixelSampling::Jittered { seed: 4 }] {
            let a = generate_rays(&cam, sampling, 3);
            let b = generate_rays(&lens, sampling, 3);
            assert_eq!(a, b);
            assert!(a.rays.iter().all(|r| r.origin == cam.center()));
        }
    }

    #[test]
    fn center_pixel_looks_down_the_axis() {
        let cam = camera();
        let batch = generate_rays(&cam, PixelSampling::Center, 1);
        let center = batch.rays[3 * 9 + 4];
        assert!((center.direction - Vec3::z()).norm() < 1e-12);
        assert!((center.origin - Vec3::new(0.0, 0.0, -5.0)).norm() < 1e-12);
    }

    #[test]
    fn thin_lens_rays_converge_on_focal_plane() {
        let cam = camera().with_lens(ThinLens {
            aperture_radius: 0.2,
            focal_distance: 4.0,
        });
        let batch = generate_rays(&cam, PixelSampling::Jittered { seed: 9 }, 8);
        let px = &batch.rays[8 * (2 * 9 + 6)..8 * (2 * 9 + 7)];
        // All samples of a pixel pass within the pixel footprint on the focal plane.
        let hits: Vec<Vec3> = px
            .iter()
            .map(|r| {
                let t = (-5.0 + 4.0 - r.origin.z) / r.direction.z;
                r.at(t)
            })
            .collect();
        let spread = hits
            .iter()
            .map(|h| (h - hits[0]).norm())
            .fold(0.0, f64::max);
        let pixel_size = 4.0 / cam.intrinsics.fx;
        assert!(spread <= 1.5 * pixel_size, "spread {spread}");
        assert!(px.iter().any(|r| (r.origin - cam.center()).norm() > 1e-3));
        assert!(px
            .iter()
            .all(|r| (r.origin - cam.center()).norm() <= 0.2 + 1e-12));
    }

    #[test]
    fn jitter_is_deterministic_per_seed() {
        let cam = camera();
        let a = generate_rays(&cam, PixelSampling::Jittered { seed: 1 }, 2);
        let b = generate_rays(&cam, PixelSampling::Jittered { seed: 1 }, 2);
        let c = generate_rays(&cam, PixelSampling::Jittered { seed: 2 }, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
