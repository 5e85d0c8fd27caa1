use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use utrice::autograd::check::run_gradcheck;
use utrice::geometry::{Triangle, Vec3};
use utrice::io::{
    init_from_pointcloud, load_checkpoint, load_dataset, load_manifest, load_png, load_point_cloud,
    load_triangle_ply, save_checkpoint, save_image, save_triangle_ply, CheckpointMeta, IoError,
    PlyImport,
};
use utrice::tracer::effects::{
    render_effects_image, Effect, EffectMode, EffectSurface, EnvironmentMap,
};
use utrice::tracer::{Camera, PixelSampling, RenderOptions, Scene, ThinLens, TraceSettings};
use utrice::training::{
    evaluate, render_view, train as run_training, EvalRow, MetricsLog, TrainConfig, TrainError,
    TrainState, View,
};

use crate::config::{to_toml, ConfigBuilder, RunConfig};
use crate::{CliError, ConfigArgs, EvalArgs, GradcheckArgs, RenderArgs, SceneArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.utrc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const PLY_FILE: &str = "scene.ply";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Ppm => "ppm",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<(), IoError> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn build_config(args: &ConfigArgs, base: &RunConfig) -> Result<RunConfig, CliError> {
    let mut b = ConfigBuilder::from_config(base);
    if let Some(path) = &args.config {
        b.merge_file(path)?;
    }
    b.merge_env(std::env::vars())?;
    if let Some(seed) = args.seed {
        b.set("train.seed", seed.into())?;
        b.set("init.seed", seed.into())?;
    }
    for o in &args.overrides {
        b.set_override(o)?;
    }
    Ok(b.build()?)
}

/// Training config stored in a checkpoint, if it has a readable one.
fn stored_config(meta: &CheckpointMeta) -> Option<RunConfig> {
    meta.config
        .clone()
        .and_then(|v| serde_json::from_value(v).ok())
}

fn load_scene(args: &SceneArgs) -> Result<(Vec<Triangle>, CheckpointMeta), IoError> {
    match (&args.checkpoint, &args.ply) {
        (Some(path), _) => load_checkpoint(path),
        (None, Some(path)) => {
            let mode = if args.lenient {
                PlyImport::Lenient
            } else {
                PlyImport::Strict
            };
            Ok((load_triangle_ply(path, mode)?, CheckpointMeta::default()))
        }
        (None, None) => unreachable!("clap requires one scene source"),
    }
}

/// Drops rows logged after the checkpoint was written, so a resumed run
/// continues the log without duplicates.
fn truncate_metrics(path: &Path, completed: usize) -> Result<bool, IoError> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(false),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut kept = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|f| f.parse::<usize>().ok())
                .is_some_and(|it| it < completed);
        if keep && !line.is_empty() {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(io_err(path))?;
    Ok(true)
}

fn save_state(out: &Path, state: &TrainState, cfg: &RunConfig) -> Result<(), IoError> {
    let meta = CheckpointMeta {
        iteration: state.iteration,
        init_opacity: Some(cfg.init.opacity),
        init_sigma: Some(cfg.init.sigma),
        seed: Some(cfg.train.seed),
        config: Some(serde_json::to_value(cfg).expect("config serializes")),
    };
    save_checkpoint(&out.join(CHECKPOINT_FILE), &state.soup, &meta)
}

fn render_test_views(
    out: &Path,
    soup: &[Triangle],
    views: &[View],
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<(), IoError> {
    let dir = out.join("renders");
    create_dir(&dir)?;
    for (i, v) in views.iter().enumerate() {
        let img = render_view(soup, &v.camera, cfg);
        save_image(
            &dir.join(format!("iter{iteration:06}_view{i:03}.png")),
            &img,
        )?;
    }
    Ok(())
}

fn print_eval(rows: &[EvalRow]) {
    println!("{:<32} {:>10} {:>8}", "view", "psnr", "ssim");
    for r in rows {
        println!("{:<32} {:>10.4} {:>8.5}", r.view, r.psnr, r.ssim);
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        println!(
            "{:<32} {:>10.4} {:>8.5}",
            "mean",
            rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            rows.iter().map(|r| r.ssim).sum::<f64>() / n
        );
    }
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let resumed = args.resume.as_deref().map(load_checkpoint).transpose()?;
    let base = resumed
        .as_ref()
        .and_then(|(_, meta)| stored_config(meta))
        .unwrap_or_default();
    let cfg = build_config(&args.config, &base)?;

    let out = &args.output;
    create_dir(out)?;
    std::fs::write(out.join(CONFIG_ECHO_FILE), to_toml(&cfg))
        .map_err(io_err(&out.join(CONFIG_ECHO_FILE)))?;

    let manifest = load_manifest(&args.manifest)?;
    let dataset = load_dataset(&manifest)?;

    let mut state = match resumed {
        Some((soup, meta)) => TrainState::resume(soup, meta.iteration),
        None => {
            let soup = match (&args.init_ply, manifest.point_cloud_path()) {
                (Some(ply), _) => {
                    let mode = if args.lenient { PlyImport::Lenient } else { PlyImport::Strict };
                    load_triangle_ply(ply, mode)?
                }
                (None, Some(points)) => init_from_pointcloud(&load_point_cloud(&points)?, &cfg.init)?,
                (None, None) => {
                    return Err(CliError::Usage(
                        "nothing to initialize from: the manifest has no point_cloud; pass --init-ply or --resume".into(),
                    ))
                }
            };
            TrainState::new(soup)
        }
    };

    let metrics_path = out.join(METRICS_FILE);
    let appending = args.resume.is_some() && truncate_metrics(&metrics_path, state.iteration)?;
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(appending)
        .truncate(!appending)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    let mut log = MetricsLog::new(file, !appending);

    let tc = &cfg.train;
    let started = Instant::now();
    eprintln!(
        "training {} triangles on {} views from iteration {} to {}",
        state.soup.len(),
        dataset.train.len(),
        state.iteration,
        tc.iterations
    );
    let observe = |state: &TrainState,
                   row: &utrice::training::MetricsRow|
     -> Result<(), TrainError> {
        let obs = |e: IoError| TrainError::Observer(e.to_string());
        log.write(row).map_err(|e| obs(io_err(&metrics_path)(e)))?;
        let done = state.iteration;
        if done % tc.log_interval == 0 {
            eprintln!(
                "iter {:>6}  loss {:.5}  l1 {:.5}  psnr {:6.2}  triangles {:>7}  nan_drops {}  {:.1}s",
                row.iteration,
                row.total_loss,
                row.l1,
                row.psnr,
                row.n_triangles,
                row.nan_drops,
                started.elapsed().as_secs_f64()
            );
        }
        if done % tc.checkpoint_interval == 0 {
            save_state(out, state, &cfg).map_err(obs)?;
        }
        if done % tc.test_render_interval == 0 && !dataset.test.is_empty() {
            render_test_views(out, &state.soup, &dataset.test, tc, done).map_err(obs)?;
        }
        Ok(())
    };
    run_training(&mut state, &dataset, tc, observe)?;

    save_state(out, &state, &cfg)?;
    save_triangle_ply(&out.join(PLY_FILE), &state.soup)?;
    if !dataset.test.is_empty() {
        render_test_views(out, &state.soup, &dataset.test, tc, state.iteration)?;
        print_eval(&evaluate(&state.soup, &dataset.test, tc)?);
    }
    eprintln!(
        "done: {} triangles, {:.1}s",
        state.soup.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn split_views(manifest_path: &Path, split: Split) -> Result<Vec<(String, Camera)>, IoError> {
    let m = load_manifest(manifest_path)?;
    let indices: Vec<usize> = match split {
        Split::Train => m.train_indices(),
        Split::Test => m.test.clone(),
        Split::All => (0..m.frames.len()).collect(),
    };
    Ok(indices
        .into_iter()
        .map(|i| {
            let f = &m.frames[i];
            let stem = f
                .image
                .file_stem()
                .map_or_else(|| format!("{i}"), |s| s.to_string_lossy().into_owned());
            (format!("{i:03}_{stem}"), f.camera())
        })
        .collect())
}

pub fn render(args: RenderArgs) -> Result<(), CliError> {
    let (soup, _) = load_scene(&args.scene)?;
    let target = Vec3::from(args.target);
    let eye = Vec3::from(args.eye);
    let cameras = match &args.manifest {
        Some(path) => split_views(path, args.split)?,
        None => {
            if args.width == 0 || args.height == 0 || !(args.fov > 0.0 && args.fov < 180.0) {
                return Err(CliError::Usage(
                    "--width/--height must be positive and --fov in (0, 180)".into(),
                ));
            }
            let cam = Camera::look_at(
                eye,
                target,
                Vec3::from(args.up),
                args.fov.to_radians(),
                args.width,
                args.height,
            );
            vec![("render".to_string(), cam)]
        }
    };
    if args.aperture < 0.0 || args.spp == 0 {
        return Err(CliError::Usage(
            "--aperture must be >= 0 and --spp >= 1".into(),
        ));
    }
    let effect = match (args.mirror_plane, args.refract_sphere) {
        (Some(p), _) => Some(Effect {
            surface: EffectSurface::Plane {
                point: Vec3::new(p[0], p[1], p[2]),
                normal: Vec3::new(p[3], p[4], p[5]),
            },
            mode: EffectMode::Reflect,
        }),
        (None, Some(s)) => {
            if !(s[3] > 0.0 && args.eta > 0.0) {
                return Err(CliError::Usage(
                    "--refract-sphere radius and --eta must be positive".into(),
                ));
            }
            Some(Effect {
                surface: EffectSurface::Sphere {
                    center: Vec3::new(s[0], s[1], s[2]),
                    radius: s[3],
                },
                mode: EffectMode::Refract { eta: args.eta },
            })
        }
        (None, None) => None,
    };
    let environment = args
        .envmap
        .as_deref()
        .map(load_png)
        .transpose()?
        .map(|image| EnvironmentMap { image });
    let options = RenderOptions {
        trace: TraceSettings {
            k: args.k.max(1),
            sh_degree: args.sh_degree.min(3),
            ..TraceSettings::default()
        },
        sampling: if args.spp > 1 {
            PixelSampling::Jittered { seed: args.seed }
        } else {
            PixelSampling::Center
        },
        samples_per_pixel: args.spp,
        background: args.background,
    };
    create_dir(&args.output)?;
    let scene = Scene::new(&soup);
    for (name, mut camera) in cameras {
        if args.aperture > 0.0 {
            let focal = args
                .focal_distance
                .unwrap_or_else(|| (target - camera.center()).norm());
            camera = camera.with_lens(ThinLens {
                aperture_radius: args.aperture,
                focal_distance: focal,
            });
        }
        let img = render_effects_image(
            &scene,
            &camera,
            &options,
            effect.as_ref(),
            environment.as_ref(),
            None,
        )
        .color;
        let path = args
            .output
            .join(format!("{name}.{}", args.format.extension()));
        save_image(&path, &img)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let (soup, meta) = load_scene(&args.scene)?;
    let mut cfg = stored_config(&meta).unwrap_or_default().train;
    if let Some(bg) = args.background {
        cfg.background = bg;
    }
    let manifest = load_manifest(&args.manifest)?;
    let dataset = load_dataset(&manifest)?;
    let views: Vec<View> = match args.split {
        Split::Train => dataset.train,
        Split::Test => dataset.test,
        Split::All => dataset.train.into_iter().chain(dataset.test).collect(),
    };
    if views.is_empty() {
        return Err(CliError::Usage(
            format!("the {:?} split is empty", args.split).to_lowercase(),
        ));
    }
    let rows = evaluate(&soup, &views, &cfg)?;
    print_eval(&rows);
    if let Some(path) = &args.output {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &rows {
            w.serialize(r)
                .map_err(|e| IoError::Malformed(e.to_string()))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| IoError::Malformed(e.to_string()))?;
        std::fs::write(path, bytes).map_err(io_err(path))?;
    }
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let report = run_gradcheck(args.seed, args.trials);
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "gradcheck: {} trials, seed {}",
        report.trials, args.seed
    );
    let _ = writeln!(
        out,
        "{:<24} {:>14} {:>14} {:>10}  status",
        "group", "max rel err", "mean rel err", "tolerance"
    );
    for g in &report.groups {
        let _ = writeln!(
            out,
            "{:<24} {:>14.3e} {:>14.3e} {:>10.0e}  {}",
            g.name,
            g.max_rel_error,
            g.mean_rel_error,
            g.tolerance,
            if g.passed() { "ok" } else { "FAIL" }
        );
    }
    let a = &report.approximate_vertices;
    let _ = writeln!(
        out,
        "{:<24} {:>14.3e} {:>14.3e} {:>10}  (informational)",
        a.name, a.max_rel_error, a.mean_rel_error, "-"
    );
    let _ = writeln!(out, "elapsed {:.2}s", started.elapsed().as_secs_f64());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Gradcheck)
    }
}
