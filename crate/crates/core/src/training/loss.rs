//! Training objective: `(1 - l_c) L1 + l_c D-SSIM + l_o L_o + l_n L_n + l_s L_s`,
//! plus the PSNR/SSIM metrics.

use crate::autograd::{PixelGrad, TriangleGrad};
use crate::geometry::{Ray, Triangle, Vec3};
use crate::raster::Image;

use super::{TrainConfig, TrainError};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 100.0;
/// Pixels with less accumulated weight carry no depth normal.
const NORMAL_MIN_WEIGHT: f64 = 1e-2;

fn check_shape(a: &Image, b: &Image) -> Result<(), TrainError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(TrainError::ShapeMismatch {
            left: (a.width, a.height),
            right: (b.width, b.height),
        })
    }
}

/// Mean absolute error over pixels and channels, with its gradient.
pub fn l1(rendered: &Image, gt: &Image) -> Result<(f64, Vec<[f64; 3]>), TrainError> {
    check_shape(rendered, gt)?;
    let n = (rendered.pixels.len() * 3) as f64;
    let mut sum = 0.0;
    let grad = rendered
        .pixels
        .iter()
        .zip(&gt.pixels)
        .map(|(r, g)| {
            [0, 1, 2].map(|ch| {
                let d = r[ch] - g[ch];
                sum += d.abs();
                if d > 0.0 {
                    1.0 / n
                } else if d < 0.0 {
                    -1.0 / n
                } else {
                    0.0
                }
            })
        })
        .collect();
    Ok((sum / n, grad))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter with zero padding. The kernel is symmetric, so
/// this operator is its own adjoint.
fn blur(data: &[f64], width: usize, height: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let xs = x as isize + k as isize - half;
                if xs >= 0 && (xs as usize) < width {
                    acc += w * row[xs as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for (k, w) in kernel.iter().enumerate() {
            let ys = y as isize + k as isize - half;
            if ys < 0 || ys as usize >= height {
                continue;
            }
            let src = &tmp[ys as usize * width..(ys as usize + 1) * width];
            let dst = &mut out[y * width..(y + 1) * width];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    out
}

/// Mean SSIM over pixels and channels, and optionally its gradient with
/// respect to `a`.
fn ssim_with_grad(a: &Image, b: &Image, want_grad: bool) -> (f64, Option<Vec<[f64; 3]>>) {
    let (w, h) = (a.width, a.height);
    let n = w * h;
    let kernel = gaussian_kernel();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![[0.0; 3]; n]);
    for ch in 0..3 {
        let x = a.channel(ch);
        let y = b.channel(ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = blur(&x, w, h, &kernel);
        let my = blur(&y, w, h, &kernel);
        let sxx = blur(&xx, w, h, &kernel);
        let syy = blur(&yy, w, h, &kernel);
        let sxy = blur(&xy, w, h, &kernel);
        let mut da = vec![0.0; n];
        let mut db = vec![0.0; n];
        let mut dc = vec![0.0; n];
        for p in 0..n {
            let (ux, uy) = (mx[p], my[p]);
            let vx = sxx[p] - ux * ux;
            let vy = syy[p] - uy * uy;
            let cxy = sxy[p] - ux * uy;
            let n1 = 2.0 * ux * uy + SSIM_C1;
            let n2 = 2.0 * cxy + SSIM_C2;
            let d1 = ux * ux + uy * uy + SSIM_C1;
            let d2 = vx + vy + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                let ds_dmx = 2.0 * uy * n2 / (d1 * d2) - s * 2.0 * ux / d1;
                let ds_dvx = -s / d2;
                let ds_dcxy = 2.0 * n1 / (d1 * d2);
                // Chain through vx = E[x^2] - mx^2 and cxy = E[xy] - mx my.
                da[p] = ds_dmx - 2.0 * ux * ds_dvx - uy * ds_dcxy;
                db[p] = ds_dvx;
                dc[p] = ds_dcxy;
            }
        }
        if let Some(g) = grad.as_mut() {
            let ba = blur(&da, w, h, &kernel);
            let bb = blur(&db, w, h, &kernel);
            let bc = blur(&dc, w, h, &kernel);
            let scale = 1.0 / (3 * n) as f64;
            for p in 0..n {
                g[p][ch] = scale * (ba[p] + 2.0 * x[p] * bb[p] + y[p] * bc[p]);
            }
        }
    }
    (total / (3 * n) as f64, grad)
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64, TrainError> {
    check_shape(a, b)?;
    Ok(ssim_with_grad(a, b, false).0)
}

/// `(1 - SSIM) / 2` and its gradient with respect to `rendered`.
pub fn dssim(rendered: &Image, gt: &Image) -> Result<(f64, Vec<[f64; 3]>), TrainError> {
    check_shape(rendered, gt)?;
    let (s, g) = ssim_with_grad(rendered, gt, true);
    let g = g
        .unwrap()
        .into_iter()
        .map(|p| p.map(|v| -0.5 * v))
        .collect();
    Ok(((1.0 - s) / 2.0, g))
}

/// PSNR in dB for images in [0, 1]; identical images report the cap.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, TrainError> {
    check_shape(a, b)?;
    let n = (a.pixels.len() * 3) as f64;
    let mse: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(p, q)| (0..3).map(|ch| (p[ch] - q[ch]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// `2 / |(v1 - v0) x (v2 - v0)|`.
pub fn loss_size(tri: &Triangle) -> f64 {
    2.0 / tri.cross().norm()
}

pub fn loss_size_grad(tri: &Triangle) -> [Vec3; 3] {
    let [v0, v1, v2] = tri.vertices;
    let (e1, e2) = (v1 - v0, v2 - v0);
    let c = e1.cross(&e2);
    let len = c.norm();
    let unit = c / len;
    let g1 = e2.cross(&unit);
    let g2 = unit.cross(&e1);
    let scale = -2.0 / (len * len);
    [-(g1 + g2) * scale, g1 * scale, g2 * scale]
}

/// Mean opacity, and its gradient with respect to each opacity logit.
pub fn loss_opacity(soup: &[Triangle]) -> (f64, Vec<f64>) {
    if soup.is_empty() {
        return (0.0, Vec::new());
    }
    let n = soup.len() as f64;
    let value = soup.iter().map(Triangle::opacity).sum::<f64>() / n;
    let grad = soup
        .iter()
        .map(|t| {
            let o = t.opacity();
            o * (1.0 - o) / n
        })
        .collect();
    (value, grad)
}

/// Render buffers the normal-consistency term needs.
#[derive(Clone, Copy, Debug)]
pub struct NormalInputs<'a> {
    pub width: usize,
    pub height: usize,
    /// One ray per pixel, row-major.
    pub rays: &'a [Ray],
    /// Weighted ray distance `sum T_i alpha_i t_i`.
    pub depth: &'a [f64],
    /// Weighted normal `sum T_i alpha_i n_i`.
    pub normal: &'a [Vec3],
    pub transmittance: &'a [f64],
}

/// Normal of the surface reconstructed from the depth map at pixel `(x, y)`,
/// facing the camera. `None` at the border or where coverage is too thin.
pub fn depth_normal(inputs: &NormalInputs, x: usize, y: usize) -> Option<Vec3> {
    let (w, h) = (inputs.width, inputs.height);
    if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
        return None;
    }
    let point = |px: usize, py: usize| -> Option<Vec3> {
        let i = py * w + px;
        let weight = 1.0 - inputs.transmittance[i];
        (weight > NORMAL_MIN_WEIGHT).then(|| inputs.rays[i].at(inputs.depth[i] / weight))
    };
    let dx = point(x + 1, y)? - point(x - 1, y)?;
    let dy = point(x, y + 1)? - point(x, y - 1)?;
    let n = dx.cross(&dy);
    let len = n.norm();
    if !(len > 0.0) || !len.is_finite() {
        return None;
    }
    let n = n / len;
    let dir = inputs.rays[y * w + x].direction;
    Some(if n.dot(&dir) > 0.0 { -n } else { n })
}

/// Mean over pixels of `sum_i w_i (1 - n_i . N_depth) = W - N . N_depth`.
/// The depth normal is treated as a constant, so gradients flow to the
/// composited normal only.
pub fn loss_normal(inputs: &NormalInputs) -> (f64, Vec<Vec3>) {
    let n = inputs.width * inputs.height;
    let mut grad = vec![Vec3::zeros(); n];
    let mut sum = 0.0;
    for y in 0..inputs.height {
        for x in 0..inputs.width {
            let Some(nd) = depth_normal(inputs, x, y) else {
                continue;
            };
            let i = y * inputs.width + x;
            let weight = 1.0 - inputs.transmittance[i];
            sum += weight - inputs.normal[i].dot(&nd);
            grad[i] = -nd / n as f64;
        }
    }
    (sum / n.max(1) as f64, grad)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub normal: f64,
    pub opacity: f64,
    pub size: f64,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub terms: LossTerms,
    /// Gradient with respect to each pixel's render outputs.
    pub pixel_grads: Vec<PixelGrad>,
    /// Gradients from the terms that depend on parameters directly.
    pub param_grads: Vec<TriangleGrad>,
}

pub fn loss_total(
    rendered: &Image,
    gt: &Image,
    soup: &[Triangle],
    cfg: &TrainConfig,
    normals: Option<&NormalInputs>,
) -> Result<LossOutput, TrainError> {
    let (l1_value, l1_grad) = l1(rendered, gt)?;
    let lc = cfg.lambda_dssim;
    let (dssim_value, dssim_grad) = if lc > 0.0 {
        dssim(rendered, gt)?
    } else {
        (0.0, vec![[0.0; 3]; rendered.pixels.len()])
    };
    let mut pixel_grads: Vec<PixelGrad> = l1_grad
        .iter()
        .zip(&dssim_grad)
        .map(|(a, b)| PixelGrad {
            color: [0, 1, 2].map(|ch| (1.0 - lc) * a[ch] + lc * b[ch]),
            ..PixelGrad::default()
        })
        .collect();

    let mut normal_value = 0.0;
    if let (Some(inputs), true) = (normals, cfg.lambda_normals > 0.0) {
        let (v, g) = loss_normal(inputs);
        normal_value = v;
        for (p, gn) in pixel_grads.iter_mut().zip(g) {
            p.normal = gn * cfg.lambda_normals;
        }
    }

    let mut param_grads = vec![TriangleGrad::default(); soup.len()];
    let (opacity_value, opacity_grad) = loss_opacity(soup);
    if cfg.lambda_opacity > 0.0 {
        for (p, g) in param_grads.iter_mut().zip(&opacity_grad) {
            p.opacity_logit = cfg.lambda_opacity * g;
        }
    }
    let n = soup.len().max(1) as f64;
    let mut size_value = 0.0;
    for (p, tri) in param_grads.iter_mut().zip(soup) {
        size_value += loss_size(tri) / n;
        if cfg.lambda_size > 0.0 {
            let g = loss_size_grad(tri);
            for j in 0..3 {
                p.vertices[j] = g[j] * (cfg.lambda_size / n);
            }
        }
    }

    let total = (1.0 - lc) * l1_value
        + lc * dssim_value
        + cfg.lambda_opacity * opacity_value
        + cfg.lambda_normals * normal_value
        + cfg.lambda_size * size_value;
    Ok(LossOutput {
        terms: LossTerms {
            total,
            l1: l1_value,
            dssim: dssim_value,
            normal: normal_value,
            opacity: opacity_value,
            size: size_value,
        },
        pixel_grads,
        param_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::central_difference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |_, _| [0; 3].map(|_| rng.gen_range(0.05..0.95)))
    }

    fn image_only() -> TrainConfig {
        TrainConfig {
            lambda_opacity: 0.0,
            lambda_normals: 0.0,
            lambda_size: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn identical_images_give_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 16, 12);
        let out = loss_total(&img, &img, &[], &image_only(), None).unwrap();
        assert!(out.terms.total.abs() < 1e-12);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_l1() {
        let a = Image::filled(8, 8, [0.3; 3]);
        let b = Image::filled(8, 8, [0.45; 3]);
        let cfg = TrainConfig {
            lambda_dssim: 0.0,
            ..image_only()
        };
        let out = loss_total(&a, &b, &[], &cfg, None).unwrap();
        assert!((out.terms.l1 - 0.15).abs() < 1e-12);
        assert!((out.terms.total - 0.15).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Image::new(4, 4);
        let b = Image::new(4, 5);
        assert!(matches!(l1(&a, &b), Err(TrainError::ShapeMismatch { .. })));
    }

    #[test]
    fn psnr_of_known_mse_and_symmetry() {
        let a = Image::filled(4, 4, [0.5; 3]);
        let b = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn dssim_of_negative_image_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 20, 20);
        let neg = a.map(|p| p.map(|v| 1.0 - v));
        let (d, _) = dssim(&a, &neg).unwrap();
        assert!(d > 0.0 && d <= 1.0, "{d}");
    }

    #[test]
    fn total_loss_gradient_matches_fd_on_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (14, 13);
        let gt = random_image(&mut rng, w, h);
        let r = random_image(&mut rng, w, h);
        let cfg = image_only();
        let out = loss_total(&r, &gt, &[], &cfg, None).unwrap();
        for _ in 0..20 {
            let px = rng.gen_range(0..w * h);
            let ch = rng.gen_range(0..3);
            let fd = central_difference(
                |x| {
                    let mut img = r.clone();
                    img.pixels[px][ch] = x[0];
                    loss_total(&img, &gt, &[], &cfg, None).unwrap().terms.total
                },
                &[r.pixels[px][ch]],
                1e-6,
            )[0];
            let a = out.pixel_grads[px].color[ch];
            assert!((a - fd).abs() < 1e-5 * fd.abs().max(1e-3), "{a} vs {fd}");
        }
    }

    #[test]
    fn dssim_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_image(&mut rng, 17, 15);
        let r = random_image(&mut rng, 17, 15);
        let (_, g) = dssim(&r, &gt).unwrap();
        for px in [0, 7, 100, 17 * 15 - 1] {
            for ch in 0..3 {
                let fd = central_difference(
                    |x| {
                        let mut img = r.clone();
                        img.pixels[px][ch] = x[0];
                        dssim(&img, &gt).unwrap().0
                    },
                    &[r.pixels[px][ch]],
                    1e-5,
                )[0];
                assert!(
                    (g[px][ch] - fd).abs() <= 1e-4 * fd.abs().max(1e-6),
                    "{} vs {fd}",
                    g[px][ch]
                );
            }
        }
    }

    #[test]
    fn size_loss_values_and_gradient() {
        let t = Triangle::new([Vec3::zeros(), Vec3::x(), Vec3::y()], 0.5, 1.0);
        assert!((loss_size(&t) - 2.0).abs() < 1e-15);
        let mut big = t.clone();
        big.vertices = big.vertices.map(|v| v * 2.0);
        assert!((loss_size(&big) - 0.5).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Triangle::new(
            [0; 3].map(|_| Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0))),
            0.5,
            1.0,
        );
        let g = loss_size_grad(&t);
        let x: Vec<f64> = t.vertices[1].iter().copied().collect();
        let fd = central_difference(
            |y| {
                let mut m = t.clone();
                m.vertices[1] = Vec3::new(y[0], y[1], y[2]);
                loss_size(&m)
            },
            &x,
            1e-6,
        );
        for k in 0..3 {
            assert!((g[1][k] - fd[k]).abs() < 1e-5 * (1.0 + fd[k].abs()));
        }
    }

    #[test]
    fn opacity_loss_limits_and_gradient() {
        let mut t = Triangle::new([Vec3::zeros(), Vec3::x(), Vec3::y()], 0.5, 1.0);
        t.opacity_logit = -800.0;
        assert!(loss_opacity(&[t.clone(), t.clone()]).0.abs() < 1e-300);
        t.opacity_logit = 800.0;
        assert_eq!(loss_opacity(&[t.clone()]).0, 1.0);

        let soup: Vec<Triangle> = [0.2, 0.7, 0.4]
            .iter()
            .map(|&o| Triangle::new([Vec3::zeros(), Vec3::x(), Vec3::y()], o, 1.0))
            .collect();
        let (_, g) = loss_opacity(&soup);
        for i in 0..3 {
            let fd = central_difference(
                |x| {
                    let mut s = soup.clone();
                    s[i].opacity_logit = x[0];
                    loss_opacity(&s).0
                },
                &[soup[i].opacity_logit],
                1e-4,
            )[0];
            assert!((g[i] - fd).abs() < 1e-6);
        }
    }

    fn flat_inputs(
        w: usize,
        h: usize,
        normal_of: impl Fn(usize) -> Vec3,
    ) -> (Vec<Ray>, Vec<f64>, Vec<Vec3>, Vec<f64>) {
        // Orthographic rays hitting the plane z = 2 head-on, fully covered.
        let rays: Vec<Ray> = (0..w * h)
            .map(|i| {
                Ray::new(
                    Vec3::new((i % w) as f64 * 0.1, (i / w) as f64 * 0.1, 0.0),
                    Vec3::z(),
                )
            })
            .collect();
        let depth = vec![2.0; w * h];
        let normal = (0..w * h).map(normal_of).collect();
        (rays, depth, normal, vec![0.0; w * h])
    }

    #[test]
    fn flat_plane_normal_loss_vanishes() {
        let (w, h) = (6, 5);
        let (rays, depth, normal, t) = flat_inputs(w, h, |_| -Vec3::z());
        let inputs = NormalInputs {
            width: w,
            height: h,
            rays: &rays,
            depth: &depth,
            normal: &normal,
            transmittance: &t,
        };
        assert!(loss_normal(&inputs).0.abs() < 1e-12);
    }

    #[test]
    fn random_normals_loss_in_range() {
        let (w, h) = (6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dirs: Vec<Vec3> = (0..w * h)
            .map(|_| Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize())
            .collect();
        let (rays, depth, normal, t) = flat_inputs(w, h, |i| dirs[i]);
        let inputs = NormalInputs {
            width: w,
            height: h,
            rays: &rays,
            depth: &depth,
            normal: &normal,
            transmittance: &t,
        };
        let v = loss_normal(&inputs).0;
        assert!((0.0..=2.0).contains(&v), "{v}");
    }
}
