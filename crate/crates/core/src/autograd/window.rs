//! Gradients of the window response with respect to vertices and smoothness.
//!
//! For the edge `i` that attains `phi(p)`, write `a = v_i - v_{i+2}`,
//! `b = v_{i+1} - v_{i+2}`, `c = v_i - v_{i+1}`. The closed-form matrices
//!
//! ```text
//! dN/dv_i     =  b c^T - (b.c) I + [a x b]_x
//! dN/dv_{i+1} = -(a c^T - (a.c) I + [a x b]_x)
//! dN/dv_{i+2} =  c c^T - (c.c) I
//! ```
//!
//! are the Jacobians of the *unnormalized* outward edge normal
//! `N = (a x b) x c`. The unit normal `n = N / |N|` needs the extra projection
//! `(I - n n^T) / |N|`; finite differences confirm this (see tests), so the
//! backward pass uses the projected form.

use serde::{Deserialize, Serialize};

use crate::geometry::{EdgeFrame, Mat3, Ray, Triangle, Vec3};

/// Which terms of the vertex gradient to keep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VertexGradMode {
    /// Hit point and incenter distance held fixed: only `dphi(p)/dv` through
    /// the edge normal and offset.
    Approximate,
    /// Full derivative, including the inradius (`phi(s)`) term and the motion
    /// of the ray-plane hit point.
    #[default]
    Exact,
}

/// Ratios below this are clamped inside `ln` for the smoothness gradient.
pub const RATIO_EPS: f64 = 1e-6;

fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Closed-form Jacobians of the unnormalized outward normal of edge `i`
/// with respect to `v_i`, `v_{i+1}`, `v_{i+2}` (in that order).
pub fn outward_normal_jacobians(v: &[Vec3; 3], i: usize) -> [Mat3; 3] {
    let (vi, vj, vk) = (v[i % 3], v[(i + 1) % 3], v[(i + 2) % 3]);
    let a = vi - vk;
    let b = vj - vk;
    let c = vi - vj;
    let id = Mat3::identity();
    let axb = skew(&a.cross(&b));
    [
        b * c.transpose() - id * b.dot(&c) + axb,
        -(a * c.transpose() - id * a.dot(&c) + axb),
        c * c.transpose() - id * c.dot(&c),
    ]
}

/// Unnormalized outward normal matching [`outward_normal_jacobians`].
pub fn outward_normal_raw(v: &[Vec3; 3], i: usize) -> Vec3 {
    -crate::geometry::edge_normal_raw(v, i)
}

/// Jacobians of the unit outward normal `frame.normals[i]`.
pub fn unit_normal_jacobians(v: &[Vec3; 3], frame: &EdgeFrame, i: usize) -> [Mat3; 3] {
    let raw = outward_normal_raw(v, i);
    let len = raw.norm();
    let n = frame.normals[i];
    // The frame may have flipped the normal for winding consistency.
    let sign = if n.dot(&raw) >= 0.0 { 1.0 } else { -1.0 };
    let proj = (Mat3::identity() - n * n.transpose()) * (sign / len);
    outward_normal_jacobians(v, i).map(|j| proj * j)
}

/// Gradient of the inradius with respect to each vertex.
pub fn inradius_gradient(v: &[Vec3; 3]) -> [Vec3; 3] {
    let e1 = v[1] - v[0];
    let e2 = v[2] - v[0];
    let cross = e1.cross(&e2);
    let len = cross.norm();
    let nh = cross / len;
    let area = 0.5 * len;
    let g1 = e2.cross(&nh) * 0.5;
    let g2 = nh.cross(&e1) * 0.5;
    let area_grad = [-(g1 + g2), g1, g2];
    let side = |a: usize, b: usize| (v[a] - v[b]).norm();
    let perimeter = side(0, 1) + side(1, 2) + side(2, 0);
    std::array::from_fn(|j| {
        let prev = (j + 2) % 3;
        let next = (j + 1) % 3;
        let dp = (v[j] - v[next]) / side(j, next) + (v[j] - v[prev]) / side(j, prev);
        (area_grad[j] * (2.0 * perimeter) - dp * (2.0 * area)) / (perimeter * perimeter)
    })
}

/// Gradient of the ray parameter `t` of the ray-plane hit with respect to
/// each vertex.
pub fn hit_distance_gradient(v: &[Vec3; 3], ray: &Ray, p: &Vec3) -> [Vec3; 3] {
    let e1 = v[1] - v[0];
    let e2 = v[2] - v[0];
    let n = e1.cross(&e2);
    let denom = n.dot(&ray.direction);
    let q = p - v[0];
    let g2 = -e2.cross(&q) / denom;
    let g3 = -q.cross(&e1) / denom;
    [n / denom - g2 - g3, g2, g3]
}

/// Vector-Jacobian product through the oriented unit face normal.
pub fn face_normal_vjp(v: &[Vec3; 3], oriented: &Vec3, upstream: &Vec3) -> [Vec3; 3] {
    let e1 = v[1] - v[0];
    let e2 = v[2] - v[0];
    let cross = e1.cross(&e2);
    let len = cross.norm();
    let sign = if oriented.dot(&cross) >= 0.0 {
        1.0
    } else {
        -1.0
    };
    let g = (upstream - oriented * oriented.dot(upstream)) * (sign / len);
    let g2 = e2.cross(&g);
    let g3 = g.cross(&e1);
    [-(g2 + g3), g2, g3]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowGrad {
    pub vertices: [Vec3; 3],
    pub sigma: f64,
}

/// Back-propagates `dL/drho` at hit point `p` (from `ray`) to the vertices
/// and smoothness factor.
pub fn backward_window(
    tri: &Triangle,
    frame: &EdgeFrame,
    ray: &Ray,
    p: &Vec3,
    dl_drho: f64,
    mode: VertexGradMode,
) -> WindowGrad {
    let (phi_p, i) = frame.phi(p);
    let phi_s = frame.phi_incenter;
    let ratio = phi_p / phi_s;
    let sigma = tri.sigma;
    if ratio <= crate::geometry::EDGE_RATIO_EPS {
        return WindowGrad {
            vertices: [Vec3::zeros(); 3],
            sigma: 0.0,
        };
    }
    let rho = ratio.powf(sigma);
    let dsigma = dl_drho * rho * ratio.max(RATIO_EPS).ln();

    let v = &tri.vertices;
    let dl_dphi_p = dl_drho * sigma * ratio.powf(sigma - 1.0) / phi_s;
    let jac = unit_normal_jacobians(v, frame, i);
    let n = frame.normals[i];
    let rel = p - v[i];
    let mut grads = [Vec3::zeros(); 3];
    for (slot, j) in jac.iter().enumerate() {
        grads[(i + slot) % 3] = j.transpose() * rel;
    }
    grads[i] -= n;

    if mode == VertexGradMode::Exact {
        let dt = hit_distance_gradient(v, ray, p);
        let along = n.dot(&ray.direction);
        for j in 0..3 {
            grads[j] += dt[j] * along;
        }
    }
    let mut out = grads.map(|g| g * dl_dphi_p);

    if mode == VertexGradMode::Exact {
        // phi(s) = -inradius.
        let dl_dphi_s = -dl_drho * sigma * rho / phi_s;
        let dr = inradius_gradient(v);
        for j in 0..3 {
            out[j] -= dr[j] * dl_dphi_s;
        }
    }
    WindowGrad {
        vertices: out,
        sigma: dsigma,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::fd::central_difference;
    use crate::geometry::{edge_normals, window_response};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_triangle(rng: &mut impl Rng) -> Triangle {
        loop {
            let v = [0; 3].map(|_| Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0)));
            let t = Triangle::new(v, 0.5, rng.gen_range(0.3..3.0));
            if t.area() > 0.05 {
                return t;
            }
        }
    }

    fn flat(v: &[Vec3; 3]) -> Vec<f64> {
        v.iter().flat_map(|x| x.iter().copied()).collect()
    }

    fn unflat(x: &[f64]) -> [Vec3; 3] {
        std::array::from_fn(|j| Vec3::new(x[3 * j], x[3 * j + 1], x[3 * j + 2]))
    }

    // Rows of the FD Jacobian of f: R^9 -> R^3 for vertex `j`.
    fn fd_jacobian(f: impl Fn(&[Vec3; 3]) -> Vec3, v: &[Vec3; 3], j: usize) -> Mat3 {
        let x = flat(v);
        let mut m = Mat3::zeros();
        for row in 0..3 {
            let g = central_difference(|y| f(&unflat(y))[row], &x, 1e-6);
            for col in 0..3 {
                m[(row, col)] = g[3 * j + col];
            }
        }
        m
    }

    #[test]
    fn closed_form_matrices_are_unnormalized_normal_jacobians() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let t = random_triangle(&mut rng);
            for i in 0..3 {
                let jac = outward_normal_jacobians(&t.vertices, i);
                for slot in 0..3 {
                    let fd = fd_jacobian(|v| outward_normal_raw(v, i), &t.vertices, (i + slot) % 3);
                    assert!(
                        (jac[slot] - fd).norm() < 1e-6 * (1.0 + fd.norm()),
                        "slot {slot}"
                    );
                }
            }
        }
    }

    #[test]
    fn unit_normal_jacobians_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let t = random_triangle(&mut rng);
            let frame = edge_normals(&t).unwrap();
            for i in 0..3 {
                let jac = unit_normal_jacobians(&t.vertices, &frame, i);
                for slot in 0..3 {
                    let fd = fd_jacobian(
                        |v| edge_normals(&Triangle::new(*v, 0.5, 1.0)).unwrap().normals[i],
                        &t.vertices,
                        (i + slot) % 3,
                    );
                    assert!((jac[slot] - fd).norm() < 1e-6 * (1.0 + fd.norm()));
                }
                // The raw closed form is off by the normalization.
                let raw = outward_normal_jacobians(&t.vertices, i);
                assert!((raw[2] - jac[2]).norm() > 1e-3);
            }
        }
    }

    #[test]
    fn inradius_and_hit_distance_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let t = random_triangle(&mut rng);
            let x = flat(&t.vertices);
            let fd = central_difference(
                |y| {
                    edge_normals(&Triangle::new(unflat(y), 0.5, 1.0))
                        .unwrap()
                        .inradius()
                },
                &x,
                1e-6,
            );
            let g = inradius_gradient(&t.vertices);
            assert!(
                (flat(&g)
                    .iter()
                    .zip(&fd)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max))
                    < 1e-6
            );

            let frame = edge_normals(&t).unwrap();
            let ray = Ray::new(
                frame.incenter + frame.face_normal * 2.0 + Vec3::new(0.1, 0.2, 0.0),
                -frame.face_normal + Vec3::new(0.05, -0.1, 0.02),
            );
            let Some((_, p)) = crate::geometry::intersect_plane(&t, &ray) else {
                continue;
            };
            let fd = central_difference(
                |y| {
                    crate::geometry::intersect_plane(&Triangle::new(unflat(y), 0.5, 1.0), &ray)
                        .unwrap()
                        .0
                },
                &x,
                1e-6,
            );
            let g = hit_distance_gradient(&t.vertices, &ray, &p);
            let err = flat(&g)
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(
                err < 1e-5 * (1.0 + fd.iter().map(|v| v.abs()).fold(0.0, f64::max)),
                "{err}"
            );
        }
    }

    #[test]
    fn face_normal_vjp_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..50 {
            let t = random_triangle(&mut rng);
            let up = Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let n0 = t.cross().normalize();
            let oriented = if rng.gen_bool(0.5) { n0 } else { -n0 };
            let sign = oriented.dot(&n0);
            let fd = central_difference(
                |y| {
                    let tri = Triangle::new(unflat(y), 0.5, 1.0);
                    (tri.cross().normalize() * sign).dot(&up)
                },
                &flat(&t.vertices),
                1e-6,
            );
            let g = face_normal_vjp(&t.vertices, &oriented, &up);
            let err = flat(&g)
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-6, "{err}");
        }
    }

    fn interior_hit(rng: &mut impl Rng, t: &Triangle) -> Option<(Ray, Vec3, f64)> {
        let frame = edge_normals(t).unwrap();
        let (b1, b2) = (rng.gen::<f64>(), rng.gen::<f64>());
        let (b1, b2) = if b1 + b2 > 1.0 {
            (1.0 - b1, 1.0 - b2)
        } else {
            (b1, b2)
        };
        let [v0, v1, v2] = t.vertices;
        let target = v0 + (v1 - v0) * b1 + (v2 - v0) * b2;
        let origin =
            target + frame.face_normal * 2.0 + Vec3::from_fn(|_, _| rng.gen_range(-0.5..0.5));
        let ray = Ray::new(origin, target - origin);
        let (_, p) = frame.intersect(&ray)?;
        let rho = window_response(&frame, t.sigma, &p);
        // Stay away from the kink where the nearest edge switches.
        let mut l: Vec<f64> = (0..3).map(|i| frame.edge_distance(i, &p)).collect();
        l.sort_by(f64::total_cmp);
        ((0.05..0.95).contains(&rho) && l[2] - l[1] > 1e-3).then_some((ray, p, rho))
    }

    #[test]
    fn exact_vertex_gradient_matches_fd_of_traced_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut checked = 0;
        while checked < 200 {
            let t = random_triangle(&mut rng);
            let Some((ray, p, _)) = interior_hit(&mut rng, &t) else {
                continue;
            };
            checked += 1;
            let frame = edge_normals(&t).unwrap();
            let g = backward_window(&t, &frame, &ray, &p, 1.0, VertexGradMode::Exact);
            let sigma = t.sigma;
            let fd = central_difference(
                |y| {
                    let tri = Triangle::new(unflat(y), 0.5, sigma);
                    let f = edge_normals(&tri).unwrap();
                    let (_, q) = f.intersect(&ray).unwrap();
                    window_response(&f, sigma, &q)
                },
                &flat(&t.vertices),
                1e-6,
            );
            let a = flat(&g.vertices);
            let num: f64 = a
                .iter()
                .zip(&fd)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            let den: f64 = fd.iter().map(|y| y * y).sum::<f64>().sqrt();
            assert!(num / den.max(1e-8) < 1e-5, "rel err {}", num / den);
        }
    }

    #[test]
    fn approximate_gradient_is_exact_for_fixed_point_and_inradius() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut checked = 0;
        while checked < 200 {
            let t = random_triangle(&mut rng);
            let Some((ray, p, _)) = interior_hit(&mut rng, &t) else {
                continue;
            };
            checked += 1;
            let frame = edge_normals(&t).unwrap();
            let g = backward_window(&t, &frame, &ray, &p, 1.0, VertexGradMode::Approximate);
            let (sigma, phi_s) = (t.sigma, frame.phi_incenter);
            let fd = central_difference(
                |y| {
                    let f = edge_normals(&Triangle::new(unflat(y), 0.5, sigma)).unwrap();
                    (f.phi(&p).0 / phi_s).powf(sigma)
                },
                &flat(&t.vertices),
                1e-6,
            );
            let a = flat(&g.vertices);
            let err = a
                .iter()
                .zip(&fd)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-6 * (1.0 + fd.iter().map(|y| y.abs()).fold(0.0, f64::max)));
        }
    }

    #[test]
    fn sigma_gradient_matches_fd_and_vanishes_at_incenter() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let mut checked = 0;
        while checked < 200 {
            let t = random_triangle(&mut rng);
            let Some((ray, p, _)) = interior_hit(&mut rng, &t) else {
                continue;
            };
            checked += 1;
            let frame = edge_normals(&t).unwrap();
            let g = backward_window(&t, &frame, &ray, &p, 1.0, VertexGradMode::Exact);
            let fd = central_difference(|s| window_response(&frame, s[0], &p), &[t.sigma], 1e-6)[0];
            assert!((g.sigma - fd).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        let t = random_triangle(&mut rng);
        let frame = edge_normals(&t).unwrap();
        let ray = Ray::new(frame.incenter + frame.face_normal, -frame.face_normal);
        let g = backward_window(
            &t,
            &frame,
            &ray,
            &frame.incenter,
            1.0,
            VertexGradMode::Exact,
        );
        assert_eq!(g.sigma, 0.0);
    }

    #[test]
    fn growing_response_pushes_nearest_edge_outward() {
        // Equilateral triangle in z = 0; p sits between the incenter and edge 0.
        let h = 3f64.sqrt() / 2.0;
        let t = Triangle::new(
            [
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.5, h, 0.0),
            ],
            0.5,
            1.0,
        );
        let frame = edge_normals(&t).unwrap();
        let p = Vec3::new(0.5, 0.5 * frame.incenter.y, 0.0);
        let ray = Ray::new(p + Vec3::z(), -Vec3::z());
        for mode in [VertexGradMode::Approximate, VertexGradMode::Exact] {
            let g = backward_window(&t, &frame, &ray, &p, 1.0, mode);
            // Ascent direction on rho: edge 0 (y = 0) vertices move to -y.
            assert!(g.vertices[0].y < 0.0 && g.vertices[1].y < 0.0, "{mode:?}");
            let step = 1e-4;
            let mut moved = t.clone();
            for j in 0..3 {
                moved.vertices[j] += g.vertices[j] * step;
            }
            let f = edge_normals(&moved).unwrap();
            let (_, q) = f.intersect(&ray).unwrap();
            assert!(window_response(&f, 1.0, &q) > window_response(&frame, 1.0, &p));
        }
    }
}
