use serde::{Deserialize, Serialize};

use crate::autograd::VertexGradMode;

use super::TrainError;

/// Every training hyperparameter. Unknown keys are rejected when
/// deserializing so typos in config files surface immediately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// D-SSIM weight against L1.
    pub lambda_dssim: f64,
    pub lambda_opacity: f64,
    pub lambda_normals: f64,
    pub lambda_size: f64,

    pub feature_lr: f64,
    pub opacity_lr: f64,
    pub lr_sigma: f64,
    #[serde(alias = "lr_triangles_points_init")]
    pub lr_vertices: f64,
    /// Vertex learning rate at the last iteration, relative to the initial.
    pub lr_vertices_final_factor: f64,
    pub sigma_min: f64,

    pub opacity_dead: f64,
    /// Minimum interval-max `T * o * rho` for a triangle to survive pruning.
    pub importance_threshold: f64,
    /// Distinct views that must hit a triangle per interval.
    pub min_view_hits: u32,
    /// Occlusion footprint (radians) above which a triangle is subdivided.
    pub split_size: f64,
    pub max_noise_factor: f64,
    pub add_shape: f64,
    pub densification_interval: usize,
    pub densify_from_iter: usize,
    pub densify_until_iter: usize,
    pub max_triangles: usize,
    /// When false, footprints are treated as zero (no subdivisions).
    pub use_footprint: bool,

    pub iterations: usize,
    /// Iterations between SH band increases.
    pub sh_warmup_interval: usize,
    pub sh_degree: usize,
    pub k: usize,
    pub t_term: f64,
    pub background: [f64; 3],
    pub vertex_grad_mode: VertexGradMode,
    pub seed: u64,

    pub log_interval: usize,
    pub checkpoint_interval: usize,
    pub test_render_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_dssim: 0.2,
            lambda_opacity: 0.0055,
            lambda_normals: 0.0001,
            lambda_size: 1e-8,
            feature_lr: 0.0025,
            opacity_lr: 0.014,
            lr_sigma: 0.0008,
            lr_vertices: 0.0011,
            lr_vertices_final_factor: 0.01,
            sigma_min: 1e-3,
            opacity_dead: 0.014,
            importance_threshold: 0.022,
            min_view_hits: 2,
            split_size: 0.019,
            max_noise_factor: 1.5,
            add_shape: 1.3,
            densification_interval: 500,
            densify_from_iter: 500,
            densify_until_iter: 25000,
            max_triangles: 1_000_000,
            use_footprint: true,
            iterations: 30000,
            sh_warmup_interval: 1000,
            sh_degree: 3,
            k: 16,
            t_term: 1e-3,
            background: [0.0; 3],
            vertex_grad_mode: VertexGradMode::Exact,
            seed: 0,
            log_interval: 100,
            checkpoint_interval: 5000,
            test_render_interval: 5000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |key: &str, why: &str| Err(TrainError::InvalidConfig(format!("{key}: {why}")));
        for (key, v) in [
            ("lambda_dssim", self.lambda_dssim),
            ("lambda_opacity", self.lambda_opacity),
            ("lambda_normals", self.lambda_normals),
            ("lambda_size", self.lambda_size),
            ("feature_lr", self.feature_lr),
            ("opacity_lr", self.opacity_lr),
            ("lr_sigma", self.lr_sigma),
            ("lr_vertices", self.lr_vertices),
            ("max_noise_factor", self.max_noise_factor),
            ("split_size", self.split_size),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(key, "must be finite and >= 0");
            }
        }
        if self.lambda_dssim > 1.0 {
            return bad("lambda_dssim", "must be in [0, 1]");
        }
        for (key, v) in [
            ("opacity_dead", self.opacity_dead),
            ("importance_threshold", self.importance_threshold),
            ("t_term", self.t_term),
            ("lr_vertices_final_factor", self.lr_vertices_final_factor),
        ] {
            if !(v > 0.0 && v < 1.0) && !(key == "lr_vertices_final_factor" && v == 1.0) {
                return bad(key, "must be in (0, 1)");
            }
        }
        if !(self.sigma_min > 0.0) {
            return bad("sigma_min", "must be > 0");
        }
        if !(self.add_shape >= 1.0) {
            return bad("add_shape", "must be >= 1");
        }
        for (key, v) in [
            ("densification_interval", self.densification_interval),
            ("sh_warmup_interval", self.sh_warmup_interval),
            ("k", self.k),
            ("log_interval", self.log_interval),
            ("checkpoint_interval", self.checkpoint_interval),
            ("test_render_interval", self.test_render_interval),
            ("max_triangles", self.max_triangles),
        ] {
            if v == 0 {
                return bad(key, "must be positive");
            }
        }
        if self.sh_degree > crate::appearance::MAX_SH_DEGREE {
            return bad("sh_degree", "must be <= 3");
        }
        if self.background.iter().any(|c| !c.is_finite()) {
            return bad("background", "must be finite");
        }
        Ok(())
    }

    /// SH degree active at `iteration`: one more band every warmup interval.
    pub fn active_sh_degree(&self, iteration: usize) -> usize {
        (iteration / self.sh_warmup_interval).min(self.sh_degree)
    }

    /// Exponential decay from `lr_vertices` to `lr_vertices * final_factor`.
    pub fn vertex_lr(&self, iteration: usize) -> f64 {
        let t = if self.iterations <= 1 {
            0.0
        } else {
            (iteration as f64 / (self.iterations - 1) as f64).min(1.0)
        };
        self.lr_vertices * self.lr_vertices_final_factor.powf(t)
    }

    pub fn is_densify_step(&self, iteration: usize) -> bool {
        iteration >= self.densify_from_iter
            && iteration < self.densify_until_iter
            && iteration > 0
            && iteration % self.densification_interval == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_hyperparameter_table() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.feature_lr, 0.0025);
        assert_eq!(c.opacity_lr, 0.014);
        assert_eq!(c.lambda_normals, 0.0001);
        assert_eq!(c.lambda_opacity, 0.0055);
        assert_eq!(c.lambda_size, 1e-8);
        assert_eq!(c.opacity_dead, 0.014);
        assert_eq!(c.importance_threshold, 0.022);
        assert_eq!(c.lr_sigma, 0.0008);
        assert_eq!(c.lr_vertices, 0.0011);
        assert_eq!(c.split_size, 0.019);
        assert_eq!(c.max_noise_factor, 1.5);
        assert_eq!(c.densification_interval, 500);
        assert_eq!(c.densify_from_iter, 500);
        assert_eq!(c.densify_until_iter, 25000);
        assert_eq!(c.add_shape, 1.3);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"feature_lrr": 1.0}"#).unwrap_err();
        assert!(err.to_string().contains("feature_lrr"));
        let c: TrainConfig =
            serde_json::from_str(r#"{"lr_triangles_points_init": 0.002}"#).unwrap();
        assert_eq!(c.lr_vertices, 0.002);
    }

    #[test]
    fn vertex_lr_decays_to_one_percent() {
        let c = TrainConfig {
            iterations: 101,
            ..TrainConfig::default()
        };
        assert_eq!(c.vertex_lr(0), c.lr_vertices);
        assert!((c.vertex_lr(100) - c.lr_vertices * 0.01).abs() < 1e-15);
        assert!(c.vertex_lr(50) < c.vertex_lr(49));
    }

    #[test]
    fn sh_warmup_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.active_sh_degree(0), 0);
        assert_eq!(c.active_sh_degree(1000), 1);
        assert_eq!(c.active_sh_degree(99_999), 3);
    }

    #[test]
    fn invalid_values_name_the_key() {
        let c = TrainConfig {
            opacity_dead: 1.5,
            ..TrainConfig::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("opacity_dead"), "{msg}");
    }
}
