//! The optimization loop: render a view, back-propagate, step, and
//! periodically prune and densify.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{backward_pass, forward_pass, BackwardSettings};
use crate::geometry::Triangle;
use crate::raster::Image;
use crate::tracer::{
    generate_rays, render_image, Camera, PixelSampling, RenderOptions, Scene, TraceSettings,
};

use super::adam::{Adam, LearningRates};
use super::densify::{densify, prune, IntervalStats};
use super::loss::{loss_total, psnr, ssim, NormalInputs};
use super::{TrainConfig, TrainError};

/// Consecutive non-finite losses tolerated before giving up.
pub const DIVERGENCE_PATIENCE: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    /// Linear RGB in [0, 1].
    pub image: Image,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<View>,
    pub test: Vec<View>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub total_loss: f64,
    pub l1: f64,
    pub dssim: f64,
    pub ln: f64,
    pub lo: f64,
    pub ls: f64,
    pub psnr: f64,
    pub n_triangles: usize,
    pub nan_drops: u64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub soup: Vec<Triangle>,
    pub adam: Adam,
    /// Iterations completed.
    pub iteration: usize,
    pub stats: IntervalStats,
    pub nan_drops: u64,
    nonfinite_streak: usize,
}

impl TrainState {
    pub fn new(soup: Vec<Triangle>) -> Self {
        Self::resume(soup, 0)
    }

    /// Continues from a saved soup. Optimizer moments and interval
    /// statistics restart from zero.
    pub fn resume(mut soup: Vec<Triangle>, iteration: usize) -> Self {
        for t in soup.iter_mut() {
            t.snap_to_f32();
        }
        let n = soup.len();
        Self {
            soup,
            adam: Adam::new(n),
            iteration,
            stats: IntervalStats::new(n),
            nan_drops: 0,
            nonfinite_streak: 0,
        }
    }
}

fn iteration_rng(seed: u64, iteration: usize, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((iteration as u64) << 8 | salt);
    rng
}

/// One optimization iteration on a randomly chosen training view.
pub fn train_step(
    state: &mut TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<MetricsRow, TrainError> {
    if dataset.train.is_empty() {
        return Err(TrainError::DatasetEmpty);
    }
    let it = state.iteration;
    let view_index = iteration_rng(cfg.seed, it, 0).gen_range(0..dataset.train.len());
    let view = &dataset.train[view_index];
    let degree = cfg.active_sh_degree(it);
    let trace = TraceSettings {
        k: cfg.k,
        t_term: cfg.t_term,
        sh_degree: degree,
    };

    let (terms, grads, render_psnr, acc_drops) = {
        let scene = Scene::new(&state.soup);
        let camera = &view.camera;
        let rays = generate_rays(camera, PixelSampling::Center, 1).rays;
        let fwd = forward_pass(&scene, rays, camera.width, camera.height, &trace);
        let out = fwd.output(cfg.background);
        let normals = NormalInputs {
            width: camera.width,
            height: camera.height,
            rays: &fwd.rays,
            depth: &out.depth,
            normal: &out.normal,
            transmittance: &out.transmittance,
        };
        let loss = loss_total(&out.color, &view.image, &state.soup, cfg, Some(&normals))?;
        let render_psnr = psnr(&out.color, &view.image)?;
        if !loss.terms.total.is_finite() {
            (loss.terms, None, render_psnr, 0)
        } else {
            let settings = BackwardSettings {
                sh_degree: degree,
                mode: cfg.vertex_grad_mode,
                background: cfg.background,
            };
            let mut acc = backward_pass(&scene, &fwd, &loss.pixel_grads, &settings);
            for (g, direct) in acc.grads.iter_mut().zip(&loss.param_grads) {
                g.add(direct);
            }
            state.stats.record_view(
                view_index as u32,
                &acc,
                &state.soup,
                &camera.center(),
                cfg.use_footprint,
            );
            let drops = acc.nan_drops;
            (loss.terms, Some(acc.grads), render_psnr, drops)
        }
    };
    state.nan_drops += acc_drops;

    match grads {
        None => {
            state.nonfinite_streak += 1;
            if state.nonfinite_streak >= DIVERGENCE_PATIENCE {
                return Err(TrainError::Diverged { iteration: it });
            }
        }
        Some(grads) => {
            state.nonfinite_streak = 0;
            let lr = LearningRates {
                sh: cfg.feature_lr,
                opacity: cfg.opacity_lr,
                sigma: cfg.lr_sigma,
                vertices: cfg.vertex_lr(it),
            };
            state.adam.step(&mut state.soup, &grads, &lr, cfg.sigma_min);
        }
    }
    state.iteration += 1;

    if cfg.is_densify_step(state.iteration) {
        densify_now(state, dataset, cfg);
    }

    Ok(MetricsRow {
        iteration: it,
        total_loss: terms.total,
        l1: terms.l1,
        dssim: terms.dssim,
        ln: terms.normal,
        lo: terms.opacity,
        ls: terms.size,
        psnr: render_psnr,
        n_triangles: state.soup.len(),
        nan_drops: state.nan_drops,
    })
}

/// Prune then densify, carrying optimizer state across the edit, and start
/// a fresh statistics interval.
pub fn densify_now(state: &mut TrainState, dataset: &Dataset, cfg: &TrainConfig) {
    let before = state.soup.len();
    let kept = prune(&mut state.soup, &mut state.stats, cfg, dataset.train.len());
    let mut rng = iteration_rng(cfg.seed, state.iteration, 1);
    let (_, origin) = densify(&mut state.soup, &state.stats, cfg, before, &mut rng);
    let mapped: Vec<Option<usize>> = origin.iter().map(|o| o.map(|j| kept[j])).collect();
    state.adam.remap(&mapped);
    state.stats.reset(state.soup.len());
}

/// Runs until `cfg.iterations`, handing every row to `observer`.
pub fn train(
    state: &mut TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&TrainState, &MetricsRow) -> Result<(), TrainError>,
) -> Result<(), TrainError> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(TrainError::DatasetEmpty);
    }
    while state.iteration < cfg.iterations {
        let row = train_step(state, dataset, cfg)?;
        observer(state, &row)?;
    }
    Ok(())
}

/// Renders a view at full SH degree with pixel-center rays.
pub fn render_view(soup: &[Triangle], camera: &Camera, cfg: &TrainConfig) -> Image {
    let scene = Scene::new(soup);
    let options = RenderOptions {
        trace: TraceSettings {
            k: cfg.k,
            t_term: cfg.t_term,
            sh_degree: cfg.sh_degree,
        },
        background: cfg.background,
        ..RenderOptions::default()
    };
    render_image(&scene, camera, &options).color
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn evaluate(
    soup: &[Triangle],
    views: &[View],
    cfg: &TrainConfig,
) -> Result<Vec<EvalRow>, TrainError> {
    views
        .iter()
        .map(|v| {
            let img = render_view(soup, &v.camera, cfg);
            Ok(EvalRow {
                view: v.name.clone(),
                psnr: psnr(&img, &v.image)?,
                ssim: ssim(&img, &v.image)?,
            })
        })
        .collect()
}

/// Append-only CSV of metric rows.
pub struct MetricsLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> MetricsLog<W> {
    /// `with_header` is false when appending to an existing log.
    pub fn new(inner: W, with_header: bool) -> Self {
        Self {
            writer: csv::WriterBuilder::new()
                .has_headers(with_header)
                .from_writer(inner),
        }
    }

    pub fn write(&mut self, row: &MetricsRow) -> std::io::Result<()> {
        self.writer.serialize(row).map_err(std::io::Error::other)?;
        self.writer.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn scene_soup(rng: &mut ChaCha8Rng, n: usize) -> Vec<Triangle> {
        (0..n)
            .map(|_| {
                let c = Vec3::new(
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.3..0.3),
                );
                let v = [0; 3].map(|_| c + Vec3::from_fn(|_, _| rng.gen_range(-0.3..0.3)));
                let mut t = Triangle::new(v, rng.gen_range(0.5..0.95), rng.gen_range(0.05..0.5));
                t.set_base_color([0; 3].map(|_| rng.gen_range(0.1..0.9)));
                t
            })
            .filter(|t| t.area() > 1e-3)
            .collect()
    }

    fn single_view_dataset(gt: &[Triangle], size: usize) -> Dataset {
        let camera = Camera::look_at(
            Vec3::new(0.0, 0.0, -4.0),
            Vec3::zeros(),
            -Vec3::y(),
            0.6,
            size,
            size,
        );
        let image = render_view(gt, &camera, &TrainConfig::default());
        Dataset {
            train: vec![View {
                name: "v0".into(),
                camera,
                image,
            }],
            test: Vec::new(),
        }
    }

    fn quick_cfg(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            densify_from_iter: 1_000_000,
            sh_warmup_interval: 100,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut state = TrainState::new(Vec::new());
        let err = train(
            &mut state,
            &Dataset::default(),
            &quick_cfg(1),
            |_, _| Ok(()),
        );
        assert!(matches!(err, Err(TrainError::DatasetEmpty)));
    }

    #[test]
    fn loss_decreases_and_count_constant_without_densify_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt = scene_soup(&mut rng, 30);
        let data = single_view_dataset(&gt, 32);
        let init = scene_soup(&mut rng, 30);
        let n = init.len();
        let mut state = TrainState::new(init);
        let mut rows = Vec::new();
        train(&mut state, &data, &quick_cfg(150), |s, r| {
            assert_eq!(s.soup.len(), n);
            rows.push(*r);
            Ok(())
        })
        .unwrap();
        let first: f64 = rows[..10].iter().map(|r| r.total_loss).sum();
        let last: f64 = rows[rows.len() - 10..].iter().map(|r| r.total_loss).sum();
        assert!(last < first * 0.8, "{first} -> {last}");
    }

    #[test]
    fn same_seed_same_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let gt = scene_soup(&mut rng, 20);
        let data = single_view_dataset(&gt, 24);
        let init = scene_soup(&mut rng, 20);
        let run = || {
            let mut state = TrainState::new(init.clone());
            let mut rows = Vec::new();
            let cfg = TrainConfig {
                densify_from_iter: 20,
                densification_interval: 20,
                ..quick_cfg(60)
            };
            train(&mut state, &data, &cfg, |_, r| {
                rows.push(*r);
                Ok(())
            })
            .unwrap();
            (rows, state.soup)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn metrics_log_appends_csv_rows() {
        let mut buf = Vec::new();
        {
            let mut log = MetricsLog::new(&mut buf, true);
            log.write(&MetricsRow {
                iteration: 3,
                n_triangles: 5,
                ..MetricsRow::default()
            })
            .unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,total_loss,l1,dssim,ln,lo,ls,psnr,n_triangles,nan_drops"
        );
        assert!(lines.next().unwrap().starts_with("3,"));
    }
}
