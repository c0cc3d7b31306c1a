use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use nwlab_core::data::codec::THRESHOLDS;
use nwlab_core::data::mnist::{GlyphBank, MovingMnistConfig};
use nwlab_core::data::{mnist_dataset, radar_dataset, Dataset};
use nwlab_core::engine::serialize::load_checkpoint;
use nwlab_core::experiments;
use nwlab_core::metrics::{HssVariant, LossMode};
use nwlab_core::networks::{presets, Network, NetworkConfig};
use nwlab_core::protocol::{
    report_emit, run_protocol, save_run, train_offline, NetworkModel, ProtocolStream, RunMode,
    RunReport, Schedule, TrainData,
};
use nwlab_core::{suite, Error};

#[derive(Parser)]
#[command(name = "nwlab", version, about = "Precipitation nowcasting lab")]
struct Cli {
    /// Dataset root; relative dataset paths resolve against it.
    #[arg(long, env = "NWLAB_DATA_DIR", global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Mnist,
    Radar,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Offline,
    Online,
}

#[derive(Clone, Copy, ValueEnum)]
enum Loss {
    Balanced,
    Plain,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    /// MovingMNIST++ test MSE of TrajGRU, ConvGRU and Conv2D.
    Ordering,
    /// Balanced vs plain loss on a radar-like stream.
    BalancedLoss,
    /// Offline vs online evaluation on a drifting stream.
    Online,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a MovingMNIST++ or synthetic radar dataset (NWD1).
    GenData {
        source: Source,
        #[arg(long)]
        out: PathBuf,
        /// Train/valid/test record counts.
        #[arg(long, value_delimiter = ',', default_values_t = [64usize, 8, 8])]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frames per radar episode.
        #[arg(long, default_value_t = 60)]
        episode_len: usize,
        /// Drift and intensity move across radar episodes.
        #[arg(long)]
        shift: bool,
        /// Real MNIST glyphs (IDX image file) instead of the procedural bank.
        #[arg(long)]
        idx: Option<PathBuf>,
    },
    /// Train a network from a run config.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        loss: Option<Loss>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the streaming protocol with a trained checkpoint.
    Evaluate {
        /// Directory written by `train`.
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "offline")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        label: Option<String>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Skill tables, Kendall matrix and lead-time curves for saved runs.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter count of a preset (or `all`).
    Params {
        preset: String,
        #[arg(long)]
        layers: bool,
    },
    /// Run one of the bundled small experiments.
    Experiment {
        which: Experiment,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long)]
        iterations: usize,
    },
}

/// Run config for `train`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    /// A shipped preset name or a path to a network TOML file.
    network: String,
    data: PathBuf,
    schedule: Schedule,
    #[serde(default)]
    seeds: Vec<u64>,
}

struct Ctx {
    data_dir: Option<PathBuf>,
}

impl Ctx {
    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.data_dir {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn network_config(spec: &str) -> nwlab_core::Result<NetworkConfig> {
    if presets::source(spec).is_none() && Path::new(spec).is_file() {
        return NetworkConfig::from_toml(&fs::read_to_string(spec)?);
    }
    presets::load(spec)
}

fn gen_data(
    ctx: &Ctx,
    source: Source,
    out: &Path,
    counts: [usize; 3],
    size: usize,
    seed: u64,
    episode_len: usize,
    shift: bool,
    idx: Option<&Path>,
) -> nwlab_core::Result<()> {
    let ds = match source {
        Source::Mnist => {
            let bank = match idx {
                Some(p) => GlyphBank::from_idx_file(&ctx.resolve(p))?,
                None => GlyphBank::procedural(10, seed),
            };
            let config = MovingMnistConfig {
                frame_size: size,
                ..Default::default()
            };
            mnist_dataset(&config, &bank, counts, seed)?
        }
        Source::Radar => {
            let base = if shift {
                experiments::shifting_stream_config()
            } else {
                experiments::radar_stream_config()
            };
            let config = nwlab_core::data::radar::RadarStreamConfig {
                size,
                frames_per_episode: episode_len,
                ..base
            };
            radar_dataset(&config, counts, seed)?
        }
    };
    let path = ctx.resolve(out);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    ds.save(&path)?;
    println!("wrote {} records to {}", ds.records.len(), path.display());
    Ok(())
}

fn train(
    ctx: &Ctx,
    config: &Path,
    out: &Path,
    iterations: Option<usize>,
    seed: Option<u64>,
    loss: Option<Loss>,
    data: Option<PathBuf>,
) -> nwlab_core::Result<()> {
    let mut rc: RunConfig = toml::from_str(&fs::read_to_string(config)?)?;
    if let Some(n) = iterations {
        rc.schedule.iterations = n;
    }
    if let Some(l) = loss {
        rc.schedule.loss = match l {
            Loss::Balanced => LossMode::Balanced,
            Loss::Plain => LossMode::Plain,
        };
    }
    if let Some(d) = data {
        rc.data = d;
    }
    let seeds = match seed {
        Some(s) => vec![s],
        None if rc.seeds.is_empty() => vec![rc.schedule.seed],
        None => rc.seeds.clone(),
    };
    let net_config = network_config(&rc.network)?;
    let ds = Dataset::load(&ctx.resolve(&rc.data))?;
    for &s in &seeds {
        let dir = if seeds.len() == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("seed{s}"))
        };
        let schedule = Schedule {
            seed: s,
            ..rc.schedule.clone()
        };
        let mut net = Network::<f32>::build(&net_config, s)?;
        let outcome = train_offline(&mut net, &TrainData::from_split(&ds), &schedule)?;
        outcome.save(&dir)?;
        fs::write(dir.join("network.toml"), net_config.to_toml())?;
        fs::write(dir.join("schedule.toml"), schedule.to_toml())?;
        let last = outcome.curve.last().map_or(f64::NAN, |p| p.loss);
        println!(
            "seed {s}: {} iterations, final loss {last:.4}, checkpoint in {}",
            outcome.iterations_run,
            dir.display()
        );
    }
    Ok(())
}

fn load_trained(run: &Path) -> nwlab_core::Result<(Network<f32>, Option<Schedule>)> {
    let config = NetworkConfig::from_toml(&fs::read_to_string(run.join("network.toml"))?)?;
    let mut net = Network::<f32>::build(&config, 0)?;
    net.load_state_dict(&load_checkpoint(&run.join("checkpoint.nwk"))?)?;
    let schedule = match fs::read_to_string(run.join("schedule.toml")) {
        Ok(text) => Some(Schedule::from_toml(&text)?),
        Err(_) => None,
    };
    Ok((net, schedule))
}

fn evaluate(
    ctx: &Ctx,
    run: &Path,
    data: &Path,
    mode: Mode,
    split: Split,
    out: &Path,
    label: Option<String>,
) -> nwlab_core::Result<()> {
    let (net, schedule) = load_trained(run)?;
    let ds = Dataset::load(&ctx.resolve(data))?;
    let [train, valid, test] = ds.split_ranges();
    let records = match split {
        Split::Train => train,
        Split::Valid => valid,
        Split::Test => test,
        Split::All => 0..ds.records.len(),
    };
    let c = &net.config;
    let stream = ProtocolStream::from_dataset(&ds, records, c.in_frames, c.out_frames)?;
    let label = label.unwrap_or_else(|| c.name.clone());
    let mut model = NetworkModel::new(net, label);
    if let Some(s) = schedule {
        model.loss = s.loss;
    }
    let mode = match mode {
        Mode::Offline => RunMode::Offline,
        Mode::Online => RunMode::Online,
    };
    let (mut report, preds) =
        run_protocol(&mut model, &stream, mode, &THRESHOLDS, HssVariant::Printed)?;
    report.config = run.display().to_string();
    save_run(out, &report, &preds)?;
    let a = &report.aggregate;
    println!("{} ({mode:?}) over {} segments", report.model, stream.len());
    for (t, (csi, hss)) in a.thresholds.iter().zip(a.csi.iter().zip(&a.hss)) {
        println!("  r >= {t:>4}: CSI {csi:.4}  HSS {hss:.4}");
    }
    println!(
        "  B-MSE {:.5}  B-MAE {:.5}  MSE {:.6}  MAE {:.6}",
        a.bmse, a.bmae, a.mse, a.mae
    );
    Ok(())
}

fn gradcheck(cases: usize, seed: u64) -> nwlab_core::Result<bool> {
    let results = suite::run_battery(cases, seed)?;
    let mut ok = true;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        ok &= r.passed();
        println!(
            "{:<28} {:>3} cases  max rel {:.3e}  {status}",
            r.op, r.cases, r.max_rel_error
        );
    }
    Ok(ok)
}

fn report(runs: &[PathBuf], out: &Path) -> nwlab_core::Result<()> {
    let reports = runs
        .iter()
        .map(|r| RunReport::from_toml(&fs::read_to_string(r.join("run.toml"))?))
        .collect::<nwlab_core::Result<Vec<_>>>()?;
    let art = report_emit(&reports, out)?;
    println!("skill table: {}", art.skill_table.display());
    if let Some(k) = &art.kendall_table {
        println!("kendall table: {}", k.display());
    }
    println!("lead-time table: {}", art.lead_table.display());
    println!("lead-time plot: {}", art.lead_plot.display());
    Ok(())
}

fn params(preset: &str, layers: bool) -> nwlab_core::Result<()> {
    let names: Vec<String> = if preset == "all" {
        presets::names().map(String::from).collect()
    } else {
        vec![preset.to_string()]
    };
    for n in names {
        let net = Network::<f32>::build(&network_config(&n)?, 0)?;
        println!(
            "{n}: {} ({:.2}M)",
            net.param_count(),
            net.param_count() as f64 / 1e6
        );
        if layers {
            for (l, c) in net.layer_param_counts() {
                println!("  {l:<10} {c}");
            }
        }
    }
    Ok(())
}

fn experiment(which: Experiment, seeds: &[u64], iterations: usize) -> nwlab_core::Result<()> {
    for &s in seeds {
        match which {
            Experiment::Ordering => {
                let t = experiments::mnist_ordering(s, iterations, [256, 16, 32])?;
                let row: Vec<String> = t.mse.iter().map(|(n, m)| format!("{n} {m:.6}")).collect();
                println!("seed {s}: {} ordered={}", row.join(", "), t.ordered());
            }
            Experiment::BalancedLoss => {
                let t = experiments::balanced_loss(s, iterations)?;
                println!(
                    "seed {s}: CSI balanced {:?} plain {:?} balanced_wins={}",
                    t.balanced.csi,
                    t.plain.csi,
                    t.balanced_wins()
                );
            }
            Experiment::Online => {
                let t = experiments::online_vs_offline(s, iterations)?;
                println!(
                    "seed {s}: B-MSE offline {:.5} online {:.5}",
                    t.offline.bmse, t.online.bmse
                );
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::NonFinite { .. } => 3,
        Error::Io(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let ctx = Ctx {
        data_dir: cli.data_dir,
    };
    let result = match cli.command {
        Command::GenData {
            source,
            out,
            counts,
            size,
            seed,
            episode_len,
            shift,
            idx,
        } => match <[usize; 3]>::try_from(counts) {
            Err(_) => Err(Error::InvalidArgument(
                "--counts takes train,valid,test".into(),
            )),
            Ok(counts) => gen_data(
                &ctx,
                source,
                &out,
                counts,
                size,
                seed,
                episode_len,
                shift,
                idx.as_deref(),
            ),
        },
        Command::Train {
            config,
            out,
            iterations,
            seed,
            loss,
            data,
        } => train(&ctx, &config, &out, iterations, seed, loss, data),
        Command::Evaluate {
            run,
            data,
            mode,
            split,
            out,
            label,
        } => evaluate(&ctx, &run, &data, mode, split, &out, label),
        Command::Gradcheck { cases, seed } => match gradcheck(cases, seed) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return ExitCode::from(2);
            }
            Err(e) => Err(e),
        },
        Command::Report { runs, out } => report(&runs, &out),
        Command::Params { preset, layers } => params(&preset, layers),
        Command::Experiment {
            which,
            seeds,
            iterations,
        } => experiment(which, &seeds, iterations),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
