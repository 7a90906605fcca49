use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use protogroup::checkpoint::Checkpoint;
use protogroup::eval::{
    activation_map, export_groups_ply, group_scene, grouping_metrics, linear_probe, truth_labels, Branch, ProbeConfig,
    ProbeData,
};
use protogroup::networks::ModelState;
use protogroup::pointcloud::ply::{load_ply, write_ply, Format};
use protogroup::pointcloud::synthetic::{generate_dataset, SceneRecipe};
use protogroup::rng::derive_seed;
use protogroup::segment::{segment_overlap, SegmentConfig};
use protogroup::trainer::{ensure_normals, load_scene_dir, load_scenes, ply_files, run_pretraining, TrainConfig};
use protogroup::{Error, Result};

#[derive(Parser)]
#[command(
    name = "protogroup",
    version,
    about = "Prototype segment grouping for point-cloud pre-training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train from a TOML config; writes checkpoints and report.csv.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Geometric over-segmentation of a whole cloud; writes `id segment` lines.
    Segment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = SegmentConfig::default().threshold)]
        threshold: f64,
        #[arg(long, default_value_t = SegmentConfig::default().min_segment_size)]
        min_size: usize,
        #[arg(long, default_value_t = SegmentConfig::default().k)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Groups a cloud with a checkpoint's teacher; writes `id label confidence` lines.
    Group {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a PLY with per-point `prototype` and `confidence`.
        #[arg(long)]
        ply: Option<PathBuf>,
    },
    /// Cosine similarity of every point to a query point; writes a PLY with `similarity`.
    ActivationMap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        query: u64,
        #[arg(long, default_value = "g")]
        branch: Branch,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear probe on frozen trunk features of labeled scenes.
    ///
    /// Uses `train/` and `test/` under DATA when present, otherwise the last
    /// quarter of the sorted files is held out.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ProbeConfig::default().iterations)]
        iterations: usize,
        /// Probe the checkpoint config's freshly initialized network instead.
        #[arg(long)]
        random_init: bool,
    },
    /// Writes labeled synthetic scenes as binary PLY files.
    GenData {
        #[arg(long)]
        recipe: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e
                .to_string()
                .replace('\\', "\\\\")
                .replace('"', "\\\"")
                .replace('\n', " ");
            eprintln!("error kind={} message=\"{}\"", e.kind(), msg);
            ExitCode::FAILURE
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_cloud(path: &Path, k: usize) -> Result<protogroup::PointCloud> {
    ensure_normals(load_ply(path)?, k)
}

/// The training config stored in a checkpoint, or defaults around its network.
fn train_config(ck: &Checkpoint) -> TrainConfig {
    TrainConfig::from_toml(&ck.config_text).unwrap_or_else(|_| TrainConfig {
        network: ck.state.config.clone(),
        ..TrainConfig::default()
    })
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let scenes = load_scenes(&cfg.data, config.parent())?;
            let report = run_pretraining(&scenes, &cfg, Some(&out))?;
            for w in &report.warnings {
                eprintln!("warning: {}", w);
            }
            match report.records.last() {
                Some(r) => println!(
                    "steps={} loss_group={:.6} loss_con={:.6} loss_overall={:.6}",
                    report.records.len(),
                    r.loss_group,
                    r.loss_con,
                    r.loss_overall
                ),
                None => println!("steps=0"),
            }
        }
        Command::Segment {
            input,
            threshold,
            min_size,
            k,
            out,
        } => {
            let cfg = SegmentConfig {
                threshold,
                k,
                min_segment_size: min_size,
            };
            let cloud = load_cloud(&input, cfg.k)?;
            let map = segment_overlap(&cloud, &cloud.ids, &cfg)?;
            map.save(&out)?;
            println!("points={} segments={}", cloud.len(), map.num_segments);
        }
        Command::Group {
            checkpoint,
            input,
            out,
            ply,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = train_config(&ck);
            let cloud = load_cloud(&input, cfg.segment.k)?;
            let sg = group_scene(&ck.state, &cloud, &cfg.segment, cfg.grouping.teacher_temperature())?;
            sg.groups.save(&sg.segments, &out)?;
            if let Some(path) = ply {
                export_groups_ply(&cloud, &sg, path, Format::BinaryLittleEndian)?;
            }
            let mut line = format!("points={} segments={}", cloud.len(), sg.segments.num_segments);
            if cloud.labels.is_some() {
                let m = grouping_metrics(&sg.groups.point_labels, &truth_labels(&cloud)?)?;
                line.push_str(&format!(
                    " purity={:.6} nmi={:.6} usage_entropy={:.6} clusters={}",
                    m.purity, m.nmi, m.usage_entropy, m.cluster_count
                ));
            }
            println!("{}", line);
        }
        Command::ActivationMap {
            checkpoint,
            input,
            query,
            branch,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cloud = load_ply(&input)?;
            let map = activation_map(&ck.state.teacher, &ck.state.config, &cloud, query, branch)?;
            map.save_ply(&cloud, &out, Format::BinaryLittleEndian)?;
            if map.degenerate {
                eprintln!("warning: query feature is zero; map is degenerate");
            }
            println!(
                "points={} zero_rows={} degenerate={}",
                cloud.len(),
                map.zero_rows,
                map.degenerate
            );
        }
        Command::Probe {
            checkpoint,
            data,
            out,
            iterations,
            random_init,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = train_config(&ck);
            let state = if random_init {
                ModelState::init(&ck.state.config, derive_seed(cfg.seed, &[1]))?
            } else {
                ck.state
            };
            let (train, test) = if data.join("train").is_dir() && data.join("test").is_dir() {
                (
                    load_scene_dir(&data.join("train"), cfg.segment.k)?,
                    load_scene_dir(&data.join("test"), cfg.segment.k)?,
                )
            } else {
                let mut all = load_scene_dir(&data, cfg.segment.k)?;
                if all.len() < 2 {
                    return Err(Error::EmptyInput("probe needs at least two scenes".into()));
                }
                let held = (all.len() / 4).max(1);
                let test = all.split_off(all.len() - held);
                (all, test)
            };
            let (mut tr, mut te) = (ProbeData::new(), ProbeData::new());
            for s in &train {
                tr.extend_from_cloud(&state.teacher, &state.config, &s.cloud)?;
            }
            for s in &test {
                te.extend_from_cloud(&state.teacher, &state.config, &s.cloud)?;
            }
            let probe_cfg = ProbeConfig {
                iterations,
                ..ProbeConfig::default()
            };
            let result = linear_probe(&tr, &te, &probe_cfg)?;
            std::fs::write(&out, result.to_csv()).map_err(|e| Error::io(&out, e))?;
            for c in &result.absent_from_training {
                eprintln!("warning: class {} absent from training, excluded from mean", c);
            }
            println!(
                "mean_accuracy={:.6} overall_accuracy={:.6}",
                result.mean_accuracy, result.overall_accuracy
            );
        }
        Command::GenData {
            recipe,
            seed,
            out,
            count,
        } => {
            let recipe = match recipe {
                Some(p) => SceneRecipe::load(p)?,
                None => SceneRecipe::default_room(),
            };
            create_dir(&out)?;
            if !ply_files(&out)?.is_empty() {
                return Err(Error::Precondition(format!(
                    "{} already contains .ply files",
                    out.display()
                )));
            }
            for (i, cloud) in generate_dataset(&recipe, count, seed)?.iter().enumerate() {
                write_ply(
                    out.join(format!("scene_{:03}.ply", i)),
                    cloud,
                    &[],
                    Format::BinaryLittleEndian,
                )?;
            }
            println!("scenes={}", count);
        }
    }
    Ok(())
}
