//! Command-line entry point: synthetic data generation, SLAM runs,
//! evaluation, and mesh export.

use clap::{Parser, Subcommand};
use semslam::checkpoint::Checkpoint;
use semslam::config::{parse_config, ResolvedConfig};
use semslam::dataset::{generate_scene, load_sequence, save_sequence, SceneSpec, SdfOracle};
use semslam::error::{Error, Result};
use semslam::mesh::save_ply;
use semslam::pose::CameraPose;
use semslam::runtime::{self, EvalOptions, SlamSystem};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "semslam", about = "Neural implicit semantic SLAM on RGB-D sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic room sequence (frames, intrinsics, trajectory, scene description).
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 150)]
        frames: usize,
        #[arg(long, default_value_t = 80)]
        width: usize,
        #[arg(long, default_value_t = 60)]
        height: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run SLAM over a sequence.
    Run {
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for trajectory, losses, and checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Optional key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config overrides, e.g. --set m_map=512 (highest precedence).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Use ground-truth poses; skip tracking.
        #[arg(long)]
        map_only: bool,
        /// Resume from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many frames (a checkpoint is still written).
        #[arg(long)]
        stop_after: Option<usize>,
        /// Print the resolved configuration with provenance and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Evaluate a finished run against ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Run directory written by `run`.
        #[arg(long)]
        run: PathBuf,
        /// Where to write the JSON report (defaults to <run>/metrics.json).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate depth/semantics on every k-th frame.
        #[arg(long, default_value_t = 50)]
        stride: usize,
        /// Volume cell size for mesh metrics; 0 disables them.
        #[arg(long, default_value_t = 0.03)]
        mesh_cell: f64,
    },
    /// Export the reconstructed scene mesh as a colored PLY.
    Mesh {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.03)]
        cell: f64,
    },
}

fn main() {
    if let Err(e) = dispatch() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn dispatch() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { seed, frames, width, height, out } => synth(seed, frames, width, height, &out),
        Command::Run { data, out, config, sets, map_only, resume, stop_after, print_config } => {
            cmd_run(&data, &out, config.as_deref(), &sets, map_only, resume, stop_after, print_config)
        }
        Command::Eval { data, run, out, stride, mesh_cell } => cmd_eval(&data, &run, out.as_deref(), stride, mesh_cell),
        Command::Mesh { data, run, out, cell } => cmd_mesh(&data, &run, &out, cell),
    }
}

fn synth(seed: u64, frames: usize, width: usize, height: usize, out: &Path) -> Result<()> {
    let spec = SceneSpec::desk_room(seed, frames, width, height);
    let (frames, _) = generate_scene(&spec, seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    spec.save(&out.join("scene.txt"))?;
    save_sequence(out, &frames)?;
    println!("wrote {} frames to {}", frames.len(), out.display());
    Ok(())
}

/// Load the dataset directory: scene description plus frame sequence.
fn load_data(data: &Path) -> Result<(SceneSpec, Vec<semslam::dataset::Frame>)> {
    let spec = SceneSpec::load(&data.join("scene.txt"))?;
    let frames = load_sequence(data)?;
    Ok((spec, frames))
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    sets: &[String],
    map_only: bool,
    resume: bool,
    stop_after: Option<usize>,
    print_config: bool,
) -> Result<()> {
    let resolved = parse_config(config, sets)?;
    if print_config {
        print!("{}", resolved.to_text());
        return Ok(());
    }
    let (spec, frames) = load_data(data)?;
    let mut sys = SlamSystem::new(&resolved.cfg, &spec)?;
    let output = runtime::run(&mut sys, &frames, &resolved, out, map_only, stop_after, resume)?;
    println!(
        "processed {} frames ({} keyframes); outputs in {}",
        output.poses.len(),
        output.keyframes.len(),
        out.display()
    );
    Ok(())
}

/// Rebuild a system from a run directory (resolved config + checkpoint) and
/// collect its estimated trajectory.
fn load_run(data: &Path, run: &Path) -> Result<(SlamSystem, Vec<semslam::dataset::Frame>, Vec<CameraPose>, SceneSpec)> {
    let cfg_text = std::fs::read_to_string(run.join("config_resolved.txt"))
        .map_err(|e| Error::io(&run.join("config_resolved.txt"), e))?;
    let resolved = ResolvedConfig::from_resolved_text(&cfg_text)?;
    let (spec, frames) = load_data(data)?;
    let mut sys = SlamSystem::new(&resolved.cfg, &spec)?;
    let ck = Checkpoint::load(&run.join("checkpoint.bin"))?;
    sys.store = ck.store;
    Ok((sys, frames, ck.poses, spec))
}

fn cmd_eval(data: &Path, run: &Path, out: Option<&Path>, stride: usize, mesh_cell: f64) -> Result<()> {
    let (sys, frames, poses, spec) = load_run(data, run)?;
    let oracle = SdfOracle::new(&spec);
    let opts = EvalOptions { frame_stride: stride, mesh_cell, ..EvalOptions::default() };
    let report = runtime::evaluate(&sys, &frames, &poses, Some(&oracle), &opts)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Eval(e.to_string()))?;
    let out_path = out.map(Path::to_path_buf).unwrap_or_else(|| run.join("metrics.json"));
    std::fs::write(&out_path, &json).map_err(|e| Error::io(&out_path, e))?;
    println!("{json}");
    Ok(())
}

fn cmd_mesh(data: &Path, run: &Path, out: &Path, cell: f64) -> Result<()> {
    let (sys, frames, poses, _) = load_run(data, run)?;
    if poses.len() != frames.len() {
        return Err(Error::Eval(format!(
            "run covers {} of {} frames; re-run without --stop-after before meshing",
            poses.len(),
            frames.len()
        )));
    }
    let views: Vec<_> = frames.iter().zip(&poses).map(|(f, p)| (*p, f.depth.clone())).collect();
    let mesh = runtime::extract_scene_mesh(&sys, &views, &frames[0].intrinsics, cell)?;
    save_ply(out, &mesh)?;
    println!("wrote {} vertices / {} triangles to {}", mesh.vertices.len(), mesh.triangles.len(), out.display());
    Ok(())
}
