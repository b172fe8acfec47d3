//! Command-line driver for the wildmesh pipeline: dataset synthesis,
//! staged adversarial training, mesh export, set-level evaluation, pose
//! reporting, and gradient verification. All behavior is config-time; every
//! command is deterministic in its configuration and seeds.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wildmesh::camera::{circular_distance, PARAM_NAMES};
use wildmesh::config::RunConfig;
use wildmesh::datagen::{
    generate_dataset, load_dataset, read_manifest, shape_mesh, split_records, DatasetManifest,
    MANIFEST_FILE,
};
use wildmesh::error::{Error, Result};
use wildmesh::fdcheck;
use wildmesh::metrics::{eval_report, matrix_to_csv};
use wildmesh::schedule::{
    camera_snapshot, load_checkpoint, sample_mesh, train_run, StepContext, TrainState,
};
use wildmesh::tetgrid::{read_obj, write_obj, TriMesh};

fn config_reference() -> String {
    format!(
        "Configuration keys and their defaults (TOML). Point --config at a file \
         holding any subset of these; unknown keys are rejected. --set overrides \
         individual keys, e.g. --set train.batch_size=16.\n\n{}",
        RunConfig::default().to_toml()
    )
}

#[derive(Parser)]
#[command(
    name = "wildmesh",
    version,
    about = "Textured 3D shape generation from silhouette+color image collections \
             with unknown cameras",
    after_long_help = config_reference()
)]
struct Cli {
    /// Configuration file (TOML); omitted means all defaults
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable, applied in order, last wins)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic dataset: images/, masks/, and manifest.json
    GenData,
    /// Run the staged adversarial training loop
    Train {
        /// Resume from a checkpoint instead of initializing fresh
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Score a directory of generated meshes against the dataset's held-out shapes
    Eval {
        /// Directory of generated .obj meshes (default: <out_dir>/meshes)
        #[arg(long, value_name = "DIR")]
        generated: Option<PathBuf>,
    },
    /// Draw shapes from a trained checkpoint and write them as OBJ files
    ExportMesh {
        /// Checkpoint to read (default: <out_dir>/checkpoints/final.wmck)
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Compare the learned pose distribution against the manifest's true cameras
    CameraReport {
        /// Checkpoint to read (default: <out_dir>/checkpoints/final.wmck)
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Verify analytic gradients against finite differences
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line =
                serde_json::json!({ "kind": e.kind(), "message": e.to_string() });
            eprintln!("error {line}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path, &cli.set)?,
        None => RunConfig::parse("", &cli.set)?,
    };
    for spec in &cli.set {
        println!("override applied: {spec}");
    }
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Train { resume } => cmd_train(&cfg, resume),
        Command::Eval { generated } => cmd_eval(&cfg, generated),
        Command::ExportMesh { checkpoint } => cmd_export_mesh(&cfg, checkpoint),
        Command::CameraReport { checkpoint } => cmd_camera_report(&cfg, checkpoint),
        Command::GradCheck { seed } => cmd_grad_check(seed),
    }
}

fn context(cfg: &RunConfig) -> StepContext<'_> {
    StepContext {
        train: &cfg.train,
        net: &cfg.net,
        render: &cfg.render,
        camera: &cfg.camera,
        fixed: &cfg.fixed_sampler,
    }
}

fn manifest_path(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.dataset_dir).join(MANIFEST_FILE)
}

fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.out_dir).join("checkpoints").join("final.wmck")
}

fn restored_state(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<TrainState> {
    let path = checkpoint.unwrap_or_else(|| default_checkpoint(cfg));
    if !path.exists() {
        return Err(Error::BadInput(format!("checkpoint {} does not exist", path.display())));
    }
    let ctx = context(cfg);
    let mut state = TrainState::new(&ctx)?;
    load_checkpoint(&mut state, &path)?;
    println!("loaded checkpoint {} (iteration {})", path.display(), state.iteration);
    Ok(state)
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let out = Path::new(&cfg.dataset_dir);
    let manifest = generate_dataset(&cfg.data, &cfg.camera, out)?;
    let echoed = cfg.echo(out)?;
    println!(
        "wrote {} records ({} shapes x {} views, {}x{} px) under {}",
        manifest.records.len(),
        manifest.config.shapes,
        manifest.config.views_per_shape,
        manifest.config.image_size,
        manifest.config.image_size,
        out.display()
    );
    println!("config echoed to {}", echoed.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, resume: Option<PathBuf>) -> Result<()> {
    let out = Path::new(&cfg.out_dir);
    let ds = load_dataset(&manifest_path(cfg))?;
    if ds.manifest.config.image_size != cfg.render.image_size {
        return Err(Error::BadConfig(format!(
            "dataset images are {}px but render.image_size is {}",
            ds.manifest.config.image_size, cfg.render.image_size
        )));
    }
    let ctx = context(cfg);
    let mut state = TrainState::new(&ctx)?;
    if let Some(path) = resume {
        load_checkpoint(&mut state, &path)?;
        println!("resumed from {} at iteration {}", path.display(), state.iteration);
    }
    let echoed = cfg.echo(out)?;
    println!("config echoed to {}", echoed.display());
    println!(
        "training on {} pairs for {} iterations (batch {})",
        ds.train.len(),
        cfg.train.total_iterations,
        cfg.train.batch_size
    );
    let reports = train_run(&mut state, &ds.train, &ctx, Some(out))?;
    if let Some(last) = reports.last() {
        println!(
            "finished at iteration {}: total {:.4}, d_rgb {:.4}, d_mask {:.4}",
            state.iteration, last.total, last.d_rgb, last.d_mask
        );
    }
    println!("losses: {}", out.join("losses.csv").display());
    println!("checkpoints: {}", out.join("checkpoints").display());
    Ok(())
}

/// The held-out reference shapes: one mesh per test-split shape id,
/// re-extracted from the manifest's stored analytic instances.
fn reference_meshes(manifest: &DatasetManifest) -> Result<Vec<TriMesh>> {
    let split = split_records(manifest);
    let mut ids: Vec<usize> =
        split.test.iter().map(|&i| manifest.records[i].shape_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::BadInput(
            "the dataset's test split is empty; add shapes or regenerate".into(),
        ));
    }
    ids.iter()
        .map(|&id| {
            shape_mesh(
                &manifest.shapes[id],
                manifest.config.grid_resolution,
                manifest.config.grid_half_extent,
            )
        })
        .collect()
}

fn cmd_eval(cfg: &RunConfig, generated: Option<PathBuf>) -> Result<()> {
    let out = Path::new(&cfg.out_dir);
    let gen_dir = generated.unwrap_or_else(|| out.join("meshes"));
    let mut paths: Vec<PathBuf> = match fs::read_dir(&gen_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "obj"))
            .collect(),
        Err(e) => {
            return Err(Error::BadInput(format!(
                "generated mesh directory {}: {e}",
                gen_dir.display()
            )))
        }
    };
    paths.sort();
    if paths.is_empty() {
        return Err(Error::BadInput(format!(
            "no .obj meshes in {}; run export-mesh first",
            gen_dir.display()
        )));
    }
    let generated: Vec<TriMesh> =
        paths.iter().map(|p| read_obj(p)).collect::<Result<_>>()?;
    let manifest = read_manifest(&manifest_path(cfg))?;
    let references = reference_meshes(&manifest)?;

    let (report, matrix) = eval_report(
        &generated,
        &references,
        cfg.eval.points_per_mesh,
        cfg.eval.seed,
        cfg.eval.chamfer_variant,
    )?;
    fs::create_dir_all(out)?;
    let report_path = out.join("eval.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "{} generated vs {} reference meshes: coverage {:.2}%, mmd x1000 {:.4}",
        report.generated, report.reference, report.coverage_pct, report.mmd_scaled
    );
    if let Some(w) = &report.ratio_warning {
        println!("warning: {w}");
    }
    println!("report: {}", report_path.display());
    if cfg.eval.write_distance_csv {
        let csv_path = out.join("distances.csv");
        fs::write(&csv_path, matrix_to_csv(&matrix))?;
        println!("distance matrix: {}", csv_path.display());
    }
    Ok(())
}

fn cmd_export_mesh(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let state = restored_state(cfg, checkpoint)?;
    let ctx = context(cfg);
    let dir = Path::new(&cfg.out_dir).join("meshes");
    fs::create_dir_all(&dir)?;
    let mut written = 0usize;
    for i in 0..cfg.eval.generated_count {
        match sample_mesh(&state, &ctx, cfg.eval.seed, i as u64) {
            Ok(mesh) => {
                let path = dir.join(format!("{i:03}.obj"));
                write_obj(&mesh, &path)?;
                written += 1;
            }
            Err(
                e @ (Error::CollapsedShape { .. }
                | Error::DegenerateSpread { .. }),
            ) => {
                println!("warning: draw {i} produced no surface ({e}); skipped");
            }
            Err(e) => return Err(e),
        }
    }
    if written == 0 {
        return Err(Error::CollapsedShape { surface_tets: 0, min: cfg.train.min_surface_tets });
    }
    println!("wrote {written} of {} meshes to {}", cfg.eval.generated_count, dir.display());
    Ok(())
}

fn cmd_camera_report(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let state = restored_state(cfg, checkpoint)?;
    let ctx = context(cfg);
    // Phase-4 checkpoints carry the frozen snapshot; earlier ones pool a
    // fresh probe set from the current weights.
    let learned = match &state.snapshot {
        Some(s) => s.clone(),
        None => camera_snapshot(&state.params, &state.generator, &ctx)?,
    };

    let manifest = read_manifest(&manifest_path(cfg))?;
    let n = manifest.records.len() as f64;
    let mut true_mean = [0.0_f64; 6];
    let mut true_sq = [0.0_f64; 6];
    for rec in &manifest.records {
        let raw =
            [rec.camera.theta, rec.camera.phi, rec.camera.k, rec.camera.d[0], rec.camera.d[1], rec.camera.d[2]];
        for j in 0..6 {
            true_mean[j] += raw[j];
            true_sq[j] += raw[j] * raw[j];
        }
    }
    for j in 0..6 {
        true_mean[j] /= n;
        true_sq[j] = (true_sq[j] / n - true_mean[j] * true_mean[j]).max(0.0).sqrt();
    }

    let mut csv = String::from("param,learned_mean,learned_std,true_mean,true_std,abs_error\n");
    println!("param     learned_mean  learned_std  true_mean  true_std  abs_error");
    for (j, name) in PARAM_NAMES.iter().enumerate() {
        // rotation lives on a circle; its error is the circular distance
        let err = if j == 0 {
            circular_distance(learned.mu[j], true_mean[j])
        } else {
            (learned.mu[j] - true_mean[j]).abs()
        };
        csv.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            learned.mu[j], learned.sigma[j], true_mean[j], true_sq[j], err
        ));
        println!(
            "{name:<9} {:>12.5} {:>12.5} {:>10.5} {:>9.5} {:>10.5}",
            learned.mu[j], learned.sigma[j], true_mean[j], true_sq[j], err
        );
    }
    let out = Path::new(&cfg.out_dir);
    fs::create_dir_all(out)?;
    let path = out.join("cameras.csv");
    fs::write(&path, csv)?;
    println!("report: {}", path.display());
    Ok(())
}

fn cmd_grad_check(seed: u64) -> Result<()> {
    let results = fdcheck::run_all(seed)?;
    print!("{}", fdcheck::table(&results));
    let failed: Vec<&str> =
        results.iter().filter(|r| !r.pass()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} gradient checks passed", results.len());
        Ok(())
    } else {
        Err(Error::BadInput(format!("gradient checks failed: {}", failed.join(", "))))
    }
}
