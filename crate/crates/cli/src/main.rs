//! `spikedecode`: synthetic data generation, leave-one-session-out training,
//! evaluation, ablations, sweeps and energy reports.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spikedecode::checkpoint::{self, decoder_config, CHECKPOINT_VERSION};
use spikedecode::data::{generate_synthetic, SessionSet, SpikeTensor, Trial, SESSION_FILE_VERSION};
use spikedecode::energy::{
    ann_equivalent_layers, count_stack, load_model_specs, profile_model, EnergyRow,
};
use spikedecode::fusion::Decoder;
use spikedecode::training::{
    ablate, comparison_table, evaluate, format_sweep, run_loso, sweep, AblationGrid, LosoOptions,
    LosoResult, RunRecord, SweepParam,
};
use spikedecode::{Error, Result};

use crate::config::Settings;

const RESULTS_FORMAT_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "spikedecode", about = "Spiking-network spike-train decoder", disable_version_flag = true)]
struct Cli {
    /// Print the tool and file-format versions
    #[arg(long)]
    version: bool,
    #[command(subcommand)]
    cmd: Option<Cmd>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic session set
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Leave-one-session-out training
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Only hold out this session index
        #[arg(long)]
        session: Option<usize>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Accuracy of a checkpoint on every session
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write pooled feature vectors as CSV
        #[arg(long)]
        dump_features: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Block, neuron and fusion ablations
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// full, projector, or a custom grid given by the three list flags
        #[arg(long, default_value = "full")]
        grid: String,
        /// Comma-separated subset of full,no-tc,no-sc
        #[arg(long, value_delimiter = ',')]
        blocks: Option<Vec<String>>,
        /// Comma-separated neuron kinds
        #[arg(long, value_delimiter = ',')]
        neurons: Option<Vec<String>>,
        /// Comma-separated subset of off,on,pdf,pnav,none
        #[arg(long, value_delimiter = ',')]
        ff: Option<Vec<String>>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Accuracy and energy over hidden channels or projector width
    Sweep {
        #[arg(long)]
        data: PathBuf,
        /// ch or d
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Operation counts and energy per trial
    Energy {
        #[arg(long)]
        data: PathBuf,
        /// Trained decoder; a freshly initialised one otherwise
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON array of layer-stack descriptions to compare against
        #[arg(long)]
        baselines: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::Dimension(_) | Error::Shape { .. } => 2,
        Error::Io(_) | Error::Format(_) | Error::Truncated { .. } | Error::Checksum { .. } => 3,
        Error::Divergence { .. } | Error::Overflow { .. } => 4,
        _ => 1,
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn load_data(path: &Path) -> Result<SessionSet> {
    SessionSet::load(path)
}

fn options<'a>(s: &Settings) -> Result<LosoOptions<'a>> {
    Ok(LosoOptions {
        jobs: s.jobs(),
        energy: s.energy()?,
        ff_mode: s.ff_count()?,
        ..LosoOptions::default()
    })
}

fn progress(verbose: bool, r: &RunRecord) {
    if verbose {
        eprintln!(
            "{} session {} seed {}: {:.2}% after {} epochs",
            r.variant,
            r.session_id,
            r.seed,
            100.0 * r.test_accuracy,
            r.history.stopping_epoch
        );
    }
}

fn cmd_gen(out: &Path, s: &Settings) -> Result<()> {
    let data = generate_synthetic(&s.synth()?)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    data.save(out)?;
    println!(
        "sessions {}  trials {}  channels {}  bins {}  classes {}  mean rate {:.4}",
        data.sessions().len(),
        data.n_trials(),
        data.channels(),
        data.bins(),
        data.n_classes(),
        data.mean_firing_rate()
    );
    Ok(())
}

fn write_loso(dir: &Path, res: &LosoResult) -> Result<()> {
    write(dir, "results.jsonl", &res.to_jsonl())?;
    write(dir, "table.txt", &res.table.to_text())?;
    write(dir, "table.csv", &res.table.to_csv())
}

fn cmd_train(data_path: &Path, session: Option<usize>, s: &Settings) -> Result<()> {
    let data = load_data(data_path)?;
    let dcfg = s.decoder(data.channels(), data.bins(), data.n_classes())?;
    let tcfg = s.train()?;
    let dir = s.out_dir();
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let verbose = s.verbose();
    let hook = |r: &RunRecord, d: &Decoder| -> Result<()> {
        progress(verbose, r);
        checkpoint::save_checkpoint(d, ckpt_dir.join(format!("session{}_seed{}.ckpt", r.session_id, r.seed)))
    };
    let only = session.map(|i| [i]);
    let opts = LosoOptions {
        on_run: Some(&hook),
        sessions: only.as_ref().map(|a| &a[..]),
        ..options(s)?
    };
    let res = run_loso(&data, &dcfg, &tcfg, &opts)?;
    write_loso(&dir, &res)?;
    print!("{}", res.table.to_text());
    Ok(())
}

fn check_dims(decoder: &Decoder, data: &SessionSet) -> Result<()> {
    let c = decoder.model.config();
    let want = (c.c_in, c.bins, c.n_classes);
    let have = (data.channels(), data.bins(), data.n_classes());
    if want != have {
        return Err(Error::Dimension(format!(
            "checkpoint expects channels={} bins={} classes={}, data has channels={} bins={} classes={}",
            want.0, want.1, want.2, have.0, have.1, have.2
        )));
    }
    Ok(())
}

fn cmd_eval(ckpt: &Path, data_path: &Path, dump: Option<&Path>, s: &Settings) -> Result<()> {
    let decoder = checkpoint::load_checkpoint(ckpt)?;
    let data = load_data(data_path)?;
    check_dims(&decoder, &data)?;
    let mut text = format!("{:<10} {:>8} {:>12}\n", "session", "trials", "accuracy (%)");
    let mut csv = String::from("session,trials,accuracy\n");
    for sess in data.sessions() {
        let trials: Vec<&Trial> = sess.trials.iter().collect();
        let acc = 100.0 * evaluate(&decoder, &trials)?;
        let _ = writeln!(text, "{:<10} {:>8} {:>12.2}", sess.id, trials.len(), acc);
        let _ = writeln!(csv, "{},{},{}", sess.id, trials.len(), acc);
    }
    let all: Vec<&Trial> = data.trials().collect();
    let acc = 100.0 * evaluate(&decoder, &all)?;
    let _ = writeln!(text, "{:<10} {:>8} {:>12.2}", "all", all.len(), acc);
    let _ = writeln!(csv, "all,{},{}", all.len(), acc);
    write(&s.out_dir(), "eval.csv", &csv)?;
    print!("{text}");
    if let Some(path) = dump {
        let mut out = String::from("session,label");
        for i in 0..decoder.model.config().feature_width() {
            let _ = write!(out, ",f{i}");
        }
        out.push('\n');
        for sess in data.sessions() {
            let xs: Vec<&SpikeTensor> = sess.trials.iter().map(|t| &t.spikes).collect();
            for (chunk, trials) in xs.chunks(256).zip(sess.trials.chunks(256)) {
                let f = decoder.model.extract_features(chunk)?;
                for (i, t) in trials.iter().enumerate() {
                    let _ = write!(out, "{},{}", sess.id, t.label);
                    for v in f.row(i) {
                        let _ = write!(out, ",{v}");
                    }
                    out.push('\n');
                }
            }
        }
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, out)?;
    }
    Ok(())
}

fn parse_grid(
    grid: &str,
    blocks: Option<&[String]>,
    neurons: Option<&[String]>,
    ff: Option<&[String]>,
) -> Result<AblationGrid> {
    use spikedecode::neurons::NeuronKind;
    use spikedecode::training::{Blocks, FusionVariant};
    let mut g = match grid {
        "full" => AblationGrid::default(),
        "projector" => AblationGrid::projector_study(),
        other => return Err(Error::config("grid", format!("unknown grid {other:?}"))),
    };
    if let Some(b) = blocks {
        g.blocks = b
            .iter()
            .map(|s| match s.as_str() {
                "full" => Ok(Blocks::Full),
                "no-tc" => Ok(Blocks::NoTc),
                "no-sc" => Ok(Blocks::NoSc),
                _ => Err(Error::config("blocks", format!("unknown block setting {s:?}"))),
            })
            .collect::<Result<_>>()?;
    }
    if let Some(n) = neurons {
        g.neurons = n
            .iter()
            .map(|s| NeuronKind::parse(s).ok_or_else(|| Error::config("neurons", format!("unknown neuron {s:?}"))))
            .collect::<Result<_>>()?;
    }
    if let Some(f) = ff {
        g.fusion = f
            .iter()
            .map(|s| match s.as_str() {
                "off" => Ok(FusionVariant::Off),
                "on" => Ok(FusionVariant::On { pdf: true, pnav: true }),
                "pdf" => Ok(FusionVariant::On { pdf: true, pnav: false }),
                "pnav" => Ok(FusionVariant::On { pdf: false, pnav: true }),
                "none" => Ok(FusionVariant::On { pdf: false, pnav: false }),
                _ => Err(Error::config("ff", format!("unknown fusion setting {s:?}"))),
            })
            .collect::<Result<_>>()?;
    }
    Ok(g)
}

fn joined_jsonl(results: &[LosoResult]) -> String {
    results.iter().map(LosoResult::to_jsonl).collect()
}

fn cmd_ablate(data_path: &Path, grid: &AblationGrid, s: &Settings) -> Result<()> {
    let data = load_data(data_path)?;
    let base = s.decoder(data.channels(), data.bins(), data.n_classes())?;
    let tcfg = s.train()?;
    let verbose = s.verbose();
    let hook = |r: &RunRecord, _: &Decoder| -> Result<()> {
        progress(verbose, r);
        Ok(())
    };
    let opts = LosoOptions {
        on_run: Some(&hook),
        ..options(s)?
    };
    let results = ablate(&data, &base, &tcfg, grid, &opts)?;
    let (text, csv) = comparison_table(&results);
    let dir = s.out_dir();
    write(&dir, "ablation.jsonl", &joined_jsonl(&results))?;
    write(&dir, "ablation.txt", &text)?;
    write(&dir, "ablation.csv", &csv)?;
    println!("{} variants", results.len());
    print!("{text}");
    Ok(())
}

fn cmd_sweep(data_path: &Path, param: &str, values: &[usize], s: &Settings) -> Result<()> {
    let param = SweepParam::parse(param)
        .ok_or_else(|| Error::config("param", format!("unknown sweep parameter {param:?}")))?;
    let data = load_data(data_path)?;
    let mut base = s.decoder(data.channels(), data.bins(), data.n_classes())?;
    if param == SweepParam::D && base.fusion.is_none() {
        base.fusion = Some(s.fusion_config());
    }
    let tcfg = s.train()?;
    let verbose = s.verbose();
    let hook = |r: &RunRecord, _: &Decoder| -> Result<()> {
        progress(verbose, r);
        Ok(())
    };
    let opts = LosoOptions {
        on_run: Some(&hook),
        ..options(s)?
    };
    let (rows, results) = sweep(&data, &base, &tcfg, param, values, &opts)?;
    let (text, csv) = format_sweep(param, &rows);
    let dir = s.out_dir();
    write(&dir, "sweep.jsonl", &joined_jsonl(&results))?;
    write(&dir, "sweep.txt", &text)?;
    write(&dir, "sweep.csv", &csv)?;
    print!("{text}");
    Ok(())
}

fn cmd_energy(data_path: &Path, ckpt: Option<&Path>, baselines: Option<&Path>, s: &Settings) -> Result<()> {
    let data = load_data(data_path)?;
    let decoder = match ckpt {
        Some(p) => checkpoint::load_checkpoint(p)?,
        None => {
            let seed = s.train()?.seeds[0];
            s.decoder(data.channels(), data.bins(), data.n_classes())?.build(seed)?
        }
    };
    check_dims(&decoder, &data)?;
    let energy = s.energy()?;
    let ff_mode = s.ff_count()?;
    let trials: Vec<&SpikeTensor> = data.trials().map(|t| &t.spikes).collect();
    let prof = profile_model(&decoder, &trials, &energy, ff_mode)?;
    let params = Some(decoder.num_parameters() as u64);
    let mut rows = vec![
        EnergyRow::new("snn", params, prof.analytic, &energy),
        EnergyRow::new("snn (instrumented)", params, prof.instrumented, &energy),
        EnergyRow::new(
            "ann (same dims)",
            None,
            count_stack(&ann_equivalent_layers(&decoder, ff_mode), ff_mode),
            &energy,
        ),
    ];
    if let Some(path) = baselines {
        for spec in load_model_specs(path)? {
            rows.push(EnergyRow::new(spec.name.clone(), spec.params, spec.count(ff_mode), &energy));
        }
    }
    let (text, csv) = spikedecode::energy::format_energy_table(&rows, 0);
    let dir = s.out_dir();
    write(&dir, "energy.txt", &text)?;
    write(&dir, "energy.csv", &csv)?;
    let profile = serde_json::to_string_pretty(&prof).map_err(|e| Error::Format(e.to_string()))?;
    write(&dir, "energy_profile.json", &(profile + "\n"))?;
    println!(
        "trials {}  r_tc {:.4}  r_sc {:.4}  config {}",
        prof.trials,
        prof.r_tc,
        prof.r_sc,
        serde_json::to_string(&decoder_config(&decoder)).unwrap_or_default()
    );
    print!("{text}");
    Ok(())
}

fn print_versions() {
    println!("spikedecode {}", env!("CARGO_PKG_VERSION"));
    println!("session-set file (SPKD) v{SESSION_FILE_VERSION}");
    println!("checkpoint file (SPKC) v{CHECKPOINT_VERSION}");
    println!("results file (jsonl) v{RESULTS_FORMAT_VERSION}");
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen { out, settings } => cmd_gen(&out, &config::resolve(settings)?),
        Cmd::Train {
            data,
            session,
            settings,
        } => cmd_train(&data, session, &config::resolve(settings)?),
        Cmd::Eval {
            checkpoint,
            data,
            dump_features,
            settings,
        } => cmd_eval(&checkpoint, &data, dump_features.as_deref(), &config::resolve(settings)?),
        Cmd::Ablate {
            data,
            grid,
            blocks,
            neurons,
            ff,
            settings,
        } => {
            let g = parse_grid(&grid, blocks.as_deref(), neurons.as_deref(), ff.as_deref())?;
            cmd_ablate(&data, &g, &config::resolve(settings)?)
        }
        Cmd::Sweep {
            data,
            param,
            values,
            settings,
        } => cmd_sweep(&data, &param, &values, &config::resolve(settings)?),
        Cmd::Energy {
            data,
            checkpoint,
            baselines,
            settings,
        } => cmd_energy(&data, checkpoint.as_deref(), baselines.as_deref(), &config::resolve(settings)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.version {
        print_versions();
        return ExitCode::SUCCESS;
    }
    let Some(cmd) = cli.cmd else {
        eprintln!("no subcommand given; see --help");
        return ExitCode::from(2);
    };
    match run(cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
