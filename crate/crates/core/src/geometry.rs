//! Triangle primitives and the world-space window function.
//!
//! A triangle's response at a point `p` on its plane is
//! `ReLU(phi(p) / phi(s))^sigma`, where `phi(x) = max_i L_i(x)` is the largest
//! signed distance to the three edge lines (negative inside) and `s` is the
//! incenter. The response is 1 at the incenter and falls to 0 at the edges.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Number of SH coefficients per color channel (degree 3).
pub const SH_COEFFS: usize = 16;

/// SH coefficients stored coefficient-major: `sh[k][channel]`.
pub type ShCoefficients = [[f64; 3]; SH_COEFFS];

/// Triangles with area at or below this are degenerate.
pub const AREA_EPS: f64 = 1e-12;
pub const PLANE_EPS: f64 = 1e-6;
pub const PARALLEL_EPS: f64 = 1e-9;
pub const T_MIN: f64 = 1e-4;
/// Ratios `phi(p)/phi(s)` at or below this are treated as lying on an edge.
pub const EDGE_RATIO_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate triangle (area {area:e})")]
    DegenerateTriangle { area: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triangle {
    pub vertices: [Vec3; 3],
    pub sh: ShCoefficients,
    pub opacity_logit: f64,
    pub sigma: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Triangle {
    /// A triangle with zero SH (mid-gray) and the given opacity and smoothness.
    pub fn new(vertices: [Vec3; 3], opacity: f64, sigma: f64) -> Self {
        Self {
            vertices,
            sh: [[0.0; 3]; SH_COEFFS],
            opacity_logit: logit(opacity),
            sigma,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    /// Unnormalized face normal `(v2 - v1) x (v3 - v1)`.
    pub fn cross(&self) -> Vec3 {
        let [a, b, c] = &self.vertices;
        (b - a).cross(&(c - a))
    }

    pub fn area(&self) -> f64 {
        0.5 * self.cross().norm()
    }

    pub fn centroid(&self) -> Vec3 {
        let [a, b, c] = &self.vertices;
        (a + b + c) / 3.0
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.area() > AREA_EPS)
    }

    pub fn is_finite(&self) -> bool {
        self.vertices
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
            && self.sh.iter().flatten().all(|x| x.is_finite())
            && self.opacity_logit.is_finite()
            && self.sigma.is_finite()
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let [a, b, c] = &self.vertices;
        (a.inf(b).inf(c), a.sup(b).sup(c))
    }

    /// Band-0 color offset so that `sh_eval` returns `rgb` for any direction.
    pub fn set_base_color(&mut self, rgb: [f64; 3]) {
        for (ch, value) in rgb.into_iter().enumerate() {
            self.sh[0][ch] = (value - 0.5) / crate::appearance::SH_C0;
        }
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn snap_to_f32(&mut self) {
        let snap = |x: &mut f64| *x = *x as f32 as f64;
        for v in &mut self.vertices {
            v.iter_mut().for_each(snap);
        }
        self.sh.iter_mut().flatten().for_each(snap);
        snap(&mut self.opacity_logit);
        snap(&mut self.sigma);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Normalizes `direction`.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Per-triangle quantities derived from the vertices.
///
/// Edge `i` runs from `v[i]` to `v[i+1]` (indices mod 3). `L_i(p) = n_i . p + d_i`
/// is the signed in-plane distance to edge `i`, negative on the triangle side.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeFrame {
    pub normals: [Vec3; 3],
    pub offsets: [f64; 3],
    pub incenter: Vec3,
    pub face_normal: Vec3,
    /// `phi` at the incenter, i.e. minus the inradius.
    pub phi_incenter: f64,
    pub plane_offset: f64,
    pub area: f64,
}

/// Unnormalized inward edge normal
/// `N_i = [(v_i - v_{i+2}) x (v_{i+1} - v_{i+2})] x (v_{i+1} - v_i)`.
pub fn edge_normal_raw(v: &[Vec3; 3], i: usize) -> Vec3 {
    let (vi, vj, vk) = (&v[i % 3], &v[(i + 1) % 3], &v[(i + 2) % 3]);
    (vi - vk).cross(&(vj - vk)).cross(&(vj - vi))
}

pub fn incenter(v: &[Vec3; 3]) -> Vec3 {
    let a = (v[1] - v[2]).norm();
    let b = (v[2] - v[0]).norm();
    let c = (v[0] - v[1]).norm();
    (v[0] * a + v[1] * b + v[2] * c) / (a + b + c)
}

pub fn edge_normals(tri: &Triangle) -> Result<EdgeFrame, GeometryError> {
    let area = tri.area();
    if !(area > AREA_EPS) {
        return Err(GeometryError::DegenerateTriangle { area });
    }
    let v = &tri.vertices;
    let mut normals = [Vec3::zeros(); 3];
    let mut offsets = [0.0; 3];
    for i in 0..3 {
        // N_i points into the triangle; the window function wants outward normals.
        let mut n = -edge_normal_raw(v, i).normalize();
        let mut d = -n.dot(&v[i]);
        if n.dot(&v[(i + 2) % 3]) + d > 0.0 {
            n = -n;
            d = -d;
        }
        normals[i] = n;
        offsets[i] = d;
    }
    let s = incenter(v);
    let phi_incenter = (0..3)
        .map(|i| normals[i].dot(&s) + offsets[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let face_normal = tri.cross().normalize();
    Ok(EdgeFrame {
        normals,
        offsets,
        incenter: s,
        face_normal,
        phi_incenter,
        plane_offset: -face_normal.dot(&v[0]),
        area,
    })
}

impl EdgeFrame {
    pub fn edge_distance(&self, i: usize, p: &Vec3) -> f64 {
        self.normals[i].dot(p) + self.offsets[i]
    }

    /// `(phi(p), argmax edge)`.
    pub fn phi(&self, p: &Vec3) -> (f64, usize) {
        let mut best = (self.edge_distance(0, p), 0);
        for i in 1..3 {
            let l = self.edge_distance(i, p);
            if l > best.0 {
                best = (l, i);
            }
        }
        best
    }

    pub fn inradius(&self) -> f64 {
        -self.phi_incenter
    }

    /// `phi(p) / phi(s)`: 1 at the incenter, 0 on the nearest edge, negative outside.
    pub fn ratio(&self, p: &Vec3) -> f64 {
        self.phi(p).0 / self.phi_incenter
    }

    pub fn intersect(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        let denom = self.face_normal.dot(&ray.direction);
        if denom.abs() < PARALLEL_EPS {
            return None;
        }
        let t = -(self.face_normal.dot(&ray.origin) + self.plane_offset) / denom;
        if !(t > T_MIN) {
            return None;
        }
        Some((t, ray.at(t)))
    }

    /// Signed distance of `p` from the supporting plane.
    pub fn plane_distance(&self, p: &Vec3) -> f64 {
        self.face_normal.dot(p) + self.plane_offset
    }
}

pub fn response_from_ratio(ratio: f64, sigma: f64) -> f64 {
    if ratio <= EDGE_RATIO_EPS {
        0.0
    } else {
        ratio.powf(sigma)
    }
}

pub fn window_response(frame: &EdgeFrame, sigma: f64, p: &Vec3) -> f64 {
    response_from_ratio(frame.ratio(p), sigma)
}

/// Ray against the triangle's supporting plane. The window function decides
/// whether the hit lies inside the triangle.
pub fn intersect_plane(tri: &Triangle, ray: &Ray) -> Option<(f64, Vec3)> {
    let n = tri.cross();
    let len = n.norm();
    if !(len > 0.0) {
        return None;
    }
    let n = n / len;
    let denom = n.dot(&ray.direction);
    if denom.abs() < PARALLEL_EPS {
        return None;
    }
    let t = n.dot(&(tri.vertices[0] - ray.origin)) / denom;
    if !(t > T_MIN) {
        return None;
    }
    Some((t, ray.at(t)))
}
