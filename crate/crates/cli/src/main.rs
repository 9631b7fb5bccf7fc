use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pgfl::checkpoint::Checkpoint;
use pgfl::config::RunConfig;
use pgfl::evaluator::{evaluate_model, write_features};
use pgfl::model::{Ablation, FeatureTag, Model};
use pgfl::responses::{region_attention_means, response_maps, write_response_maps};
use pgfl::rng::{stream, tag};
use pgfl::synth_data::{load_dataset, save_dataset, write_checksums, Dataset, Split};
use pgfl::trainer::verify::run_gradient_checks;
use pgfl::trainer::{TrainEvent, Trainer};
use pgfl::Error;

const SNAPSHOT_FILE: &str = "config.resolved.toml";

#[derive(Parser, Debug)]
#[command(name = "pgfl", version, about = "Pose-guided ReID training and evaluation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "pgfl-out")]
    out: PathBuf,
    /// Ablation row: baseline, sab, sab-i, sab-im, sab-feb or full.
    #[arg(long, global = true)]
    ablation: Option<String>,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic occluded dataset.
    GenData,
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Test hook: turn every stop-gradient into the identity.
        #[arg(long)]
        break_detach: bool,
    },
    /// Rank the query split against the gallery.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Matching feature: G, P, V, F or E.
        #[arg(long)]
        feature: Option<String>,
        /// Strip the pose branches first and evaluate the stripped model.
        #[arg(long)]
        export_mb_only: bool,
    },
    /// Finite-difference and stop-gradient checks on a tiny random model.
    Gradcheck {
        #[arg(long)]
        break_detach: bool,
    },
    /// Write channel-mean response and attention maps as CSV grids.
    DumpResponses {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "query")]
        split: String,
        /// Number of images from the start of the split.
        #[arg(long, default_value_t = 8)]
        limit: usize,
        /// Specific image names such as `query/3`; overrides `--limit`.
        #[arg(long)]
        images: Vec<String>,
    },
    /// Write an inference-only checkpoint without the pose branches.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::DumpResponses { .. } => "dump-responses",
            Command::Export { .. } => "export",
        }
    }
}

/// Process exit status for each error class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Integrity(_) => 3,
        Error::Capability(_) => 4,
        Error::CheckFailed(_) => 5,
        Error::Shape(_) | Error::Numeric(_) | Error::Evaluation(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pgfl {}: {e}", cli.command.name());
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> pgfl::Result<()> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Some(a) = &cli.common.ablation {
        cfg.ablation = Some(a.parse::<Ablation>()?);
    }
    let out = &cli.common.out;
    match &cli.command {
        Command::GenData => gen_data(cli, cfg, out),
        Command::Train { data, break_detach } => train(cli, cfg, out, data, *break_detach),
        Command::Eval { data, checkpoint, feature, export_mb_only } => eval(cli, cfg, out, data, checkpoint, feature.as_deref(), *export_mb_only),
        Command::Gradcheck { break_detach } => gradcheck(cli, cfg.resolve()?, out, *break_detach),
        Command::DumpResponses { data, checkpoint, split, limit, images } => dump_responses(cli, cfg, out, data, checkpoint, split, *limit, images),
        Command::Export { checkpoint } => export(cli, cfg.resolve()?, out, checkpoint),
    }
}

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn prepare_out(dir: &Path, force: bool, guarded: bool) -> pgfl::Result<()> {
    if guarded && is_nonempty_dir(dir) && !force {
        return Err(Error::Data(format!("{} is not empty; pass --force to overwrite", dir.display())));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_snapshot(cli: &Cli, cfg: &RunConfig, out: &Path) -> pgfl::Result<()> {
    let mut text = format!("# pgfl {}\n", cli.command.name());
    if let Some(p) = &cli.common.config {
        text.push_str(&format!("# config file: {}\n", p.display()));
    }
    for o in &cli.common.overrides {
        text.push_str(&format!("# override: {o}\n"));
    }
    text.push_str(&cfg.to_flat_toml()?);
    let path = out.join(SNAPSHOT_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn open_dataset(dir: &Path) -> pgfl::Result<Dataset> {
    if !dir.join(pgfl::synth_data::META_FILE).is_file() {
        return Err(Error::Data(format!("no dataset at {} (run gen-data first)", dir.display())));
    }
    load_dataset(dir)
}

fn gen_data(cli: &Cli, cfg: RunConfig, out: &Path) -> pgfl::Result<()> {
    let cfg = cfg.resolve()?;
    prepare_out(out, cli.common.force, true)?;
    if cli.common.force {
        for split in Split::ALL {
            let d = out.join(split.name());
            if d.is_dir() {
                fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
        }
    }
    let data = Dataset::generate(&cfg.data, cfg.seed)?;
    save_dataset(&data, out)?;
    write_snapshot(cli, &cfg, out)?;
    let digest = write_checksums(out)?;
    println!("train {} / query {} / gallery {} images in {}", data.train.len(), data.query.len(), data.gallery.len(), out.display());
    println!("checksum listing sha256 {digest}");
    Ok(())
}

fn train(cli: &Cli, mut cfg: RunConfig, out: &Path, data_dir: &Path, break_detach: bool) -> pgfl::Result<()> {
    let data = open_dataset(data_dir)?;
    cfg.data = data.config.clone();
    let cfg = cfg.resolve()?;
    prepare_out(out, cli.common.force, true)?;
    write_snapshot(cli, &cfg, out)?;
    let ck_dir = out.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let model = Model::<f32>::new(cfg.model.clone(), &mut stream(cfg.seed, &[tag::INIT]))?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.seed)?;
    trainer.break_detach = break_detach;
    let log_path = out.join("train_log.csv");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let milestones = cfg.train.schedule.milestones.clone();
    let epochs = cfg.train.schedule.epochs;
    let (mut sum, mut count) = (0.0, 0usize);
    trainer.run(&data.train, Some(&mut log), |ev| {
        match ev {
            TrainEvent::Step { loss, .. } => {
                sum += loss.total;
                count += 1;
            }
            TrainEvent::EpochEnd { epoch, trainer } => {
                eprintln!("epoch {:>3}/{epochs}  lr {:.2e}  mean loss {:.4}", epoch + 1, trainer.config.schedule.lr(epoch), sum / count.max(1) as f64);
                (sum, count) = (0.0, 0);
                let done = epoch + 1;
                if milestones.contains(&done) || done == epochs {
                    let ck = Checkpoint {
                        model: trainer.model.clone(),
                        optimizer: Some(trainer.optimizer.clone()),
                        epoch: done,
                        step: trainer.step,
                        seed: trainer.seed,
                    };
                    ck.save(&ck_dir.join(format!("epoch_{done:03}.pgck")))?;
                    if done == epochs {
                        ck.save(&out.join("model.pgck"))?;
                    }
                }
            }
        }
        Ok(())
    })?;
    println!("trained {} steps; final checkpoint {}", trainer.step, out.join("model.pgck").display());
    Ok(())
}

fn eval(cli: &Cli, mut cfg: RunConfig, out: &Path, data_dir: &Path, ck_path: &Path, feature: Option<&str>, export_mb_only: bool) -> pgfl::Result<()> {
    let data = open_dataset(data_dir)?;
    cfg.data = data.config.clone();
    if let Some(f) = feature {
        cfg.eval.feature = f.parse::<FeatureTag>()?;
    }
    let cfg = cfg.resolve()?;
    prepare_out(out, cli.common.force, false)?;
    write_snapshot(cli, &cfg, out)?;
    let mut ck = Checkpoint::load(ck_path)?;
    if export_mb_only {
        ck = ck.export_mb_only();
        ck.save(&out.join("model_mb.pgck"))?;
    }
    let tag = cfg.eval.feature;
    let (report, q, g) = evaluate_model(&ck.model, &data.query, &data.gallery, tag, cfg.eval.metric, &cfg.eval.extract)?;
    let stem = format!("report_{tag}");
    report.save(out, &stem)?;
    write_features(&out.join(format!("query_{tag}.pgft")), &q)?;
    write_features(&out.join(format!("gallery_{tag}.pgft")), &g)?;
    println!("{}", pgfl::evaluator::RankingReport::CSV_HEADER);
    println!("{}", report.csv_row());
    if !tag.needs_heatmaps() {
        println!("heatmap reads: {}", q.heatmap_reads + g.heatmap_reads);
    }
    Ok(())
}

fn gradcheck(cli: &Cli, cfg: RunConfig, out: &Path, break_detach: bool) -> pgfl::Result<()> {
    prepare_out(out, cli.common.force, false)?;
    write_snapshot(cli, &cfg, out)?;
    let outcomes = run_gradient_checks(cfg.seed, break_detach)?;
    let mut text = String::new();
    for o in &outcomes {
        text.push_str(&format!("{o}\n"));
    }
    print!("{text}");
    let path = out.join("gradcheck.txt");
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckFailed(format!("{} of {} checks failed: {}", failed.len(), outcomes.len(), failed.join(", "))))
    }
}

#[allow(clippy::too_many_arguments)]
fn dump_responses(cli: &Cli, cfg: RunConfig, out: &Path, data_dir: &Path, ck_path: &Path, split: &str, limit: usize, images: &[String]) -> pgfl::Result<()> {
    let data = open_dataset(data_dir)?;
    let mut cfg = cfg;
    cfg.data = data.config.clone();
    let cfg = cfg.resolve()?;
    let split = Split::ALL.into_iter().find(|s| s.name() == split).ok_or_else(|| Error::Config(format!("unknown split `{split}`")))?;
    prepare_out(out, cli.common.force, false)?;
    write_snapshot(cli, &cfg, out)?;
    let ck = Checkpoint::load(ck_path)?;
    let all = data.split(split);
    let chosen: Vec<_> = if images.is_empty() {
        all.iter().take(limit).cloned().collect()
    } else {
        images
            .iter()
            .map(|n| all.iter().find(|s| &s.name == n).cloned().ok_or_else(|| Error::Data(format!("no image `{n}` in split {}", split.name()))))
            .collect::<pgfl::Result<_>>()?
    };
    let maps = response_maps(&ck.model, &chosen)?;
    for (m, s) in maps.iter().zip(&chosen) {
        write_response_maps(out, m)?;
        match region_attention_means(m, s) {
            Some((occ, body)) => println!("{}: {}x{} grid, attention occluder {occ:.5} body {body:.5}", m.name, m.height, m.width),
            None => println!("{}: {}x{} grid", m.name, m.height, m.width),
        }
    }
    Ok(())
}

fn export(cli: &Cli, cfg: RunConfig, out: &Path, ck_path: &Path) -> pgfl::Result<()> {
    prepare_out(out, cli.common.force, false)?;
    write_snapshot(cli, &cfg, out)?;
    let ck = Checkpoint::load(ck_path)?;
    let mb = ck.export_mb_only();
    let path = out.join("model_mb.pgck");
    mb.save(&path)?;
    println!(
        "{} -> {}: {} -> {} trainable parameters",
        ck_path.display(),
        path.display(),
        ck.model.params.trainable_count(),
        mb.model.params.trainable_count()
    );
    Ok(())
}
