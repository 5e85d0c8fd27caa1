//! Adam with one learning rate per parameter group.

use crate::autograd::TriangleGrad;
use crate::geometry::Triangle;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub sh: f64,
    pub opacity: f64,
    pub sigma: f64,
    pub vertices: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepReport {
    /// Triangles whose vertex update was undone because it made them
    /// degenerate or non-finite.
    pub reverted: usize,
}

/// First and second moments per triangle, with a per-triangle step count so
/// triangles created mid-run get their own bias correction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    m: Vec<TriangleGrad>,
    v: Vec<TriangleGrad>,
    steps: Vec<u32>,
}

#[inline]
fn update(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, bc1: f64, bc2: f64) {
    *m = BETA1 * *m + (1.0 - BETA1) * g;
    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
    if lr != 0.0 {
        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + EPSILON);
    }
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![TriangleGrad::default(); n],
            v: vec![TriangleGrad::default(); n],
            steps: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update of every triangle. Afterwards `sigma >= sigma_min`, every
    /// triangle stays non-degenerate and all parameters sit on the f32 grid.
    pub fn step(
        &mut self,
        soup: &mut [Triangle],
        grads: &[TriangleGrad],
        lr: &LearningRates,
        sigma_min: f64,
    ) -> StepReport {
        assert_eq!(soup.len(), self.m.len());
        assert_eq!(grads.len(), soup.len());
        let mut report = StepReport::default();
        for (i, (tri, g)) in soup.iter_mut().zip(grads).enumerate() {
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - BETA1.powi(t);
            let bc2 = 1.0 - BETA2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);

            for k in 0..tri.sh.len() {
                for ch in 0..3 {
                    update(
                        &mut tri.sh[k][ch],
                        g.sh[k][ch],
                        &mut m.sh[k][ch],
                        &mut v.sh[k][ch],
                        lr.sh,
                        bc1,
                        bc2,
                    );
                }
            }
            update(
                &mut tri.opacity_logit,
                g.opacity_logit,
                &mut m.opacity_logit,
                &mut v.opacity_logit,
                lr.opacity,
                bc1,
                bc2,
            );
            update(
                &mut tri.sigma,
                g.sigma,
                &mut m.sigma,
                &mut v.sigma,
                lr.sigma,
                bc1,
                bc2,
            );
            tri.sigma = tri.sigma.max(sigma_min);

            let before = tri.vertices;
            for j in 0..3 {
                for c in 0..3 {
                    update(
                        &mut tri.vertices[j][c],
                        g.vertices[j][c],
                        &mut m.vertices[j][c],
                        &mut v.vertices[j][c],
                        lr.vertices,
                        bc1,
                        bc2,
                    );
                }
            }
            tri.snap_to_f32();
            if tri.is_degenerate() || !tri.is_finite() {
                tri.vertices = before;
                m.vertices = [Default::default(); 3];
                v.vertices = [Default::default(); 3];
                report.reverted += 1;
            }
        }
        report
    }

    /// Rebuilds the moment arrays after the soup was edited: entry `i` of
    /// `origin` names the old triangle whose moments the new triangle `i`
    /// keeps, or `None` to start fresh.
    pub fn remap(&mut self, origin: &[Option<usize>]) {
        let take = |src: &[TriangleGrad]| -> Vec<TriangleGrad> {
            origin
                .iter()
                .map(|o| o.map_or_else(TriangleGrad::default, |j| src[j].clone()))
                .collect()
        };
        let m = take(&self.m);
        let v = take(&self.v);
        self.steps = origin
            .iter()
            .map(|o| o.map_or(0, |j| self.steps[j]))
            .collect();
        self.m = m;
        self.v = v;
    }
}
