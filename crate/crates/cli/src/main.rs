use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use gmk_core::attacks::{
    finetune_attack, flip_signs_attack, flip_sweep, overwrite_attack, sweep_csv, uchida_forge, AttackContext,
    AttackReport, ForgeConfig,
};
use gmk_core::data_io::{emit_tables, run_loaded, LoadedConfig, RunOverrides, RunSummary, TriggerSource};
use gmk_core::genmodels::{generator_from_checkpoint, ModelCheckpoint, TrainConfig};
use gmk_core::losses::UchidaSpec;
use gmk_core::verify::full_report;

#[derive(Parser, Debug)]
#[command(name = "gmk", version, about = "Watermark, verify and attack small generative models")]
struct Cli {
    /// Replaces the training seed (embed, ablations) or the query seed (verify).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for all outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured model with its watermark terms and verify it.
    Embed { config: PathBuf },
    /// Two-step ownership check of a checkpoint with the config's keys.
    Verify {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Attack a checkpoint and report owner metrics before and after.
    Attack {
        kind: AttackArg,
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training steps for finetune/overwrite (default: 20% of train.steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Fraction of signature channels to flip.
        #[arg(long, default_value_t = 0.1)]
        p: f64,
        /// Forged bit count for uchida-forge.
        #[arg(long, default_value_t = 64)]
        bits: usize,
    },
    /// Flip-fraction × seed sweep of the sign-flip attack.
    SweepFlips {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.25, 0.5, 1.0])]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
    },
    /// Train one run per λ value.
    AblateLambda {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 1.0, 10.0])]
        lambdas: Vec<f64>,
    },
    /// Train one run per (n, c) trigger setting.
    AblateNc {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [5usize])]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [0.0f32, -10.0])]
        c: Vec<f32>,
    },
    /// Summary table over finished run directories.
    Report { runs: Vec<PathBuf> },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AttackArg {
    Finetune,
    Overwrite,
    FlipSigns,
    UchidaForge,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// `<--out or output_dir>/<name>`, the same directory `embed` writes to.
fn out_dir(cli_out: &Option<PathBuf>, loaded: &LoadedConfig) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| loaded.resolve(&loaded.config.output_dir)).join(&loaded.config.name)
}

fn load(config: &Path, seed: Option<u64>) -> anyhow::Result<LoadedConfig> {
    let loaded = LoadedConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    Ok(match seed {
        Some(s) => {
            let mut c = loaded.config.clone();
            c.train.seed = s;
            loaded.with_config(c)?
        }
        None => loaded,
    })
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match &cli.command {
        Command::Embed { config } => {
            let run = gmk_core::data_io::run_experiment(config, &RunOverrides { seed: cli.seed, out: cli.out.clone() })?;
            print_run(&run);
            Ok(run.exit_code() as u8)
        }
        Command::Verify { config, checkpoint } => {
            let loaded = load(config, None)?;
            let Some(keys) = loaded.owner_keys()? else {
                bail!("config needs trigger, watermark and signature to verify");
            };
            let ckpt = ModelCheckpoint::load(checkpoint)?;
            let mut g = generator_from_checkpoint(&ckpt)?;
            let mut bb = loaded.config.eval.blackbox();
            if let Some(s) = cli.seed {
                bb.seed = s;
            }
            let report = full_report(&mut g, Some(&ckpt), &keys, &bb);
            let dir = out_dir(&cli.out, &loaded).join("verify");
            write(&dir.join("report.json"), &report.to_json())?;
            write(&dir.join("report.txt"), &report.summary())?;
            if let Some(s) = report.blackbox.as_ref().and_then(|b| b.samples.as_ref()) {
                write(&dir.join("qwm_samples.csv"), &s.to_csv())?;
            }
            print!("{}", report.summary());
            Ok(report.exit_code() as u8)
        }
        Command::Attack { kind, config, checkpoint, steps, p, bits } => {
            let loaded = load(config, None)?;
            let dir = out_dir(&cli.out, &loaded).join("attacks");
            let ckpt = ModelCheckpoint::load(checkpoint)?;
            let seed = cli.seed.unwrap_or(0);
            if let AttackArg::UchidaForge = kind {
                let forged = UchidaSpec::random_bits(*bits, seed ^ 0xb175);
                let r = uchida_forge(&ckpt, &forged, seed, &ForgeConfig::default())?;
                write(&dir.join("uchida_forge.json"), &serde_json::to_string_pretty(&r)?)?;
                println!("forged {} bits: BER {:.4} after {} iterations ({})", bits, r.ber, r.iterations, if r.success { "success" } else { "failed" });
                return Ok(0);
            }
            let Some(owner) = loaded.owner_keys()? else {
                bail!("config needs the owner's trigger, watermark and signature");
            };
            let data = loaded.dataset()?;
            let ctx = AttackContext { data: &data, owner: &owner, eval: loaded.config.eval.attack_eval() };
            let mut template: TrainConfig = loaded.train_config()?;
            template.steps = steps.unwrap_or(loaded.config.train.steps / 5);
            template.seed = seed;
            let results: Vec<(ModelCheckpoint, AttackReport)> = match kind {
                AttackArg::Finetune => vec![finetune_attack(&ckpt, &ctx, &template)?],
                AttackArg::Overwrite => {
                    let Some(attacker) = loaded.attacker_keys()? else {
                        bail!("overwrite needs an \"attacker\" section in the config");
                    };
                    overwrite_attack(&ckpt, &ctx, &attacker, &template)?
                }
                AttackArg::FlipSigns => vec![flip_signs_attack(&ckpt, &ctx, *p, seed)?],
                AttackArg::UchidaForge => unreachable!(),
            };
            fs::create_dir_all(&dir)?;
            let mut csv = format!("{}\n", AttackReport::CSV_HEADER);
            for (attacked, report) in &results {
                let stem = match &report.variant {
                    Some(v) => format!("{}_{v}", kind_name(*kind)),
                    None => kind_name(*kind).to_string(),
                };
                attacked.save(&dir.join(format!("{stem}.gmk")))?;
                write(&dir.join(format!("{stem}.json")), &report.to_json())?;
                csv.push_str(&report.to_csv());
                csv.push('\n');
            }
            write(&dir.join(format!("{}.csv", kind_name(*kind))), &csv)?;
            print!("{csv}");
            Ok(0)
        }
        Command::SweepFlips { config, checkpoint, fractions, seeds } => {
            let loaded = load(config, None)?;
            let Some(owner) = loaded.owner_keys()? else {
                bail!("config needs the owner's trigger, watermark and signature");
            };
            let data = loaded.dataset()?;
            let ctx = AttackContext { data: &data, owner: &owner, eval: loaded.config.eval.attack_eval() };
            let ckpt = ModelCheckpoint::load(checkpoint)?;
            log::info!("sweeping {} fractions x {} seeds", fractions.len(), seeds.len());
            let rows = flip_sweep(&ckpt, &ctx, fractions, seeds)?;
            let csv = sweep_csv(&rows);
            write(&out_dir(&cli.out, &loaded).join("flip_sweep.csv"), &csv)?;
            print!("{csv}");
            Ok(0)
        }
        Command::AblateLambda { config, lambdas } => {
            let loaded = load(config, cli.seed)?;
            let root = out_dir(&cli.out, &loaded);
            let mut csv = String::from("lambda,qwm_mean,control_qwm_mean,separation,fidelity_proxy,ber\n");
            for &lambda in lambdas {
                log::info!("ablation run lambda={lambda}");
                let mut c = loaded.config.clone();
                c.objective.lambda = lambda;
                c.name = format!("{}_lambda{lambda}", loaded.config.name);
                let run = run_loaded(&loaded.with_config(c)?, &root.join(format!("lambda_{lambda}")))?;
                csv.push_str(&format!("{lambda},{}\n", ablation_cols(&run)));
            }
            write(&root.join("ablation_lambda.csv"), &csv)?;
            print!("{csv}");
            Ok(0)
        }
        Command::AblateNc { config, n, c } => {
            let loaded = load(config, cli.seed)?;
            let root = out_dir(&cli.out, &loaded);
            let seed = match &loaded.config.trigger {
                Some(TriggerSource::Generate { seed, .. }) => *seed,
                _ => bail!("ablate-nc needs a generated trigger (\"source\": \"generate\")"),
            };
            let mut csv = String::from("n,c,qwm_mean,control_qwm_mean,separation,fidelity_proxy,ber\n");
            for &n in n {
                for &c in c {
                    log::info!("ablation run n={n} c={c}");
                    let mut cfg = loaded.config.clone();
                    cfg.trigger = Some(TriggerSource::Generate { n, c, seed });
                    cfg.name = format!("{}_n{n}_c{c}", loaded.config.name);
                    let run = run_loaded(&loaded.with_config(cfg)?, &root.join(format!("n{n}_c{c}")))?;
                    csv.push_str(&format!("{n},{c},{}\n", ablation_cols(&run)));
                }
            }
            write(&root.join("ablation_nc.csv"), &csv)?;
            print!("{csv}");
            Ok(0)
        }
        Command::Report { runs } => {
            let table = emit_tables(runs)?;
            if let Some(dir) = &cli.out {
                write(&dir.join("table.csv"), &table)?;
            }
            print!("{table}");
            Ok(0)
        }
    }
}

fn kind_name(k: AttackArg) -> &'static str {
    match k {
        AttackArg::Finetune => "finetune",
        AttackArg::Overwrite => "overwrite",
        AttackArg::FlipSigns => "flip_signs",
        AttackArg::UchidaForge => "uchida_forge",
    }
}

fn ablation_cols(run: &RunSummary) -> String {
    let f = |m: &str| run.metric(m).map(|v| v.to_string()).unwrap_or_else(|| "null".into());
    format!("{},{},{},{},{}", f("qwm_mean"), f("control_qwm_mean"), f("separation"), f("fidelity_proxy"), f("ber"))
}

fn print_run(run: &RunSummary) {
    println!("run directory: {}", run.dir.display());
    for m in &run.metrics {
        println!("  {:<18} {:.6}", m.metric, m.value);
    }
    if let Some(r) = &run.report {
        print!("{}", r.summary());
    }
}
