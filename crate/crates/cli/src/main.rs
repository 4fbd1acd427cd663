use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ncm_core::harness::{run_baselines, run_sweep, summarize, write_outputs, write_rows, write_summary, ExperimentConfig};
use ncm_core::jsonl::write_jsonl;
use ncm_core::rng::derive_seed;
use ncm_core::{
    corrupt_pairs, estimate_subspace, evaluate, generate_cf_pairs, generate_dataset, generate_mixture, random_pairing, train,
    verdict_table, CfPairSet, Dataset, LatentScm, NcmError, Result, SubspaceEstimate,
};

#[derive(Parser, Debug)]
#[command(name = "ncm", version, about = "Noisy counterfactual matching experiments")]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for seeds.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PairingArg {
    Oracle,
    Random,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the SCM and write `scm.toml` plus a dataset CSV.
    Generate {
        /// Domain to sample; the training mixture when absent.
        #[arg(long)]
        domain: Option<String>,
        /// Rows; defaults to the mixture size of the config.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value = "dataset.csv")]
        file: String,
    },
    /// Write a counterfactual pair set and its metadata sidecar.
    Pairs {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long, value_enum, default_value_t = PairingArg::Oracle)]
        pairing: PairingArg,
        /// SCM document; sampled from the config when absent.
        #[arg(long)]
        scm: Option<PathBuf>,
        /// Dataset to pair rows from (random pairing).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "pairs.csv")]
        file: String,
    },
    /// Train a model on a dataset, optionally removing the span of a pair set.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Truncation rank; `min(k, |I|)` when absent.
        #[arg(long)]
        r: Option<usize>,
        /// Dataset to evaluate on after training.
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Run the configured grid with bound verification and print verdicts.
    BoundCheck,
    /// Run the configured sweep.
    Sweep,
    /// ERM and oracle reference rows.
    Baselines,
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, String)> {
    let (mut cfg, text) = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            NcmError::Io(io) => NcmError::Config(format!("{}: {io}", path.display())),
            other => other,
        })?,
        None => {
            let cfg = ExperimentConfig::default();
            let text = cfg.to_toml_string();
            (cfg, text)
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok((cfg, text))
}

/// Config text as written to the output directory: verbatim, plus a
/// comment line for any command-line overrides.
fn echoed(cli: &Cli, text: &str) -> String {
    let mut out = String::new();
    if let Some(seed) = cli.seed {
        out.push_str(&format!("# --seed {seed}\n"));
    }
    if let Some(dir) = &cli.out {
        out.push_str(&format!("# --out {}\n", dir.display()));
    }
    out.push_str(text);
    out
}

fn first_run_seed(cfg: &ExperimentConfig) -> u64 {
    derive_seed(cfg.seed, "run", 0)
}

fn sample_scm_for(cfg: &ExperimentConfig) -> Result<LatentScm> {
    cfg.build_scm(derive_seed(first_run_seed(cfg), "scm", 0))
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let (cfg, text) = load_config(cli)?;
    let dir = cfg.output.dir.clone();
    let base = cfg.output.basename.clone();
    prepare_dir(&dir)?;
    std::fs::write(dir.join("config.toml"), echoed(cli, &text))?;

    match &cli.command {
        Command::Generate { domain, n, file } => {
            let scm = sample_scm_for(&cfg)?;
            std::fs::write(dir.join("scm.toml"), scm.to_toml())?;
            let seed = derive_seed(first_run_seed(&cfg), "train", 0);
            let ds = match domain {
                Some(id) => generate_dataset(&scm, id, n.unwrap_or(cfg.data.n_test), seed, false)?,
                None => generate_mixture(&scm, n.unwrap_or(cfg.data.n_train * scm.train_domains().count()), seed)?,
            };
            ds.save_csv(&dir.join(file))?;
            log::info!("wrote {} rows to {}", ds.len(), dir.join(file).display());
        }
        Command::Pairs { k, epsilon, pairing, scm, data, file } => {
            let k = k.unwrap_or(cfg.pairs.k);
            let run_seed = first_run_seed(&cfg);
            let clean = match pairing {
                PairingArg::Oracle => {
                    let scm = match scm {
                        Some(p) => LatentScm::from_toml(&std::fs::read_to_string(p)?)?,
                        None => sample_scm_for(&cfg)?,
                    };
                    let (src, dst) = cfg.pair_domains()?;
                    generate_cf_pairs(&scm, &src, &dst, k, derive_seed(run_seed, "pairs", 0))?
                }
                PairingArg::Random => {
                    let path = data.as_ref().ok_or_else(|| NcmError::invalid("random pairing needs --data"))?;
                    random_pairing(&Dataset::load_csv(path)?, k, derive_seed(run_seed, "pairs", 0))?
                }
            };
            let noisy = corrupt_pairs(&clean, *epsilon, derive_seed(run_seed, "noise", 0))?;
            noisy.save(&dir.join(file))?;
            log::info!("wrote {} pairs (epsilon {epsilon}) to {}", noisy.k(), dir.join(file).display());
        }
        Command::Train { data, pairs, r, eval } => {
            let ds = Dataset::load_csv(data)?;
            let estimate = match pairs {
                Some(p) => {
                    let set = CfPairSet::load(p)?;
                    let r = r.unwrap_or(set.k().min(cfg.scm.num_spurious));
                    estimate_subspace(&set.delta, r)?
                }
                None => match r {
                    Some(0) | None => SubspaceEstimate::identity(ds.dim()),
                    Some(_) => return Err(NcmError::invalid("--r > 0 needs --pairs")),
                },
            };
            let model = train(&ds, Some(&estimate), &cfg.train_config(derive_seed(first_run_seed(&cfg), "fit", 0)), cfg.model.loss_kind)?;
            model.save_csv(&dir.join("model.csv"))?;
            estimate.write_csv(std::fs::File::create(dir.join("subspace.csv"))?)?;
            let mut reports = vec![evaluate(&model, &ds)?];
            if let Some(path) = eval {
                reports.push(evaluate(&model, &Dataset::load_csv(path)?)?);
            }
            write_jsonl(std::fs::File::create(dir.join("eval.jsonl"))?, &reports)?;
            for rep in &reports {
                log::info!("n={} loss={:.5} accuracy={:.4}", rep.n, rep.mean_loss, rep.accuracy);
            }
        }
        Command::BoundCheck => {
            let mut cfg = cfg.clone();
            cfg.bounds.enabled = true;
            let res = run_sweep(&cfg, cli.jobs)?;
            write_outputs(&dir, &base, &res.rows, &res.reports, &echoed(cli, &text))?;
            let wedin: Vec<_> = res.reports.iter().filter_map(|r| r.wedin.clone()).collect();
            if !wedin.is_empty() {
                write_jsonl(std::fs::File::create(dir.join(format!("{base}_wedin.jsonl")))?, &wedin)?;
            }
            if !res.moment_checks.is_empty() {
                write_jsonl(std::fs::File::create(dir.join(format!("{base}_moment.jsonl")))?, &res.moment_checks)?;
            }
            print!("{}", verdict_table(&res.reports));
            let held = res.reports.iter().filter(|r| r.holds.theorem).count();
            println!("theorem-level bound held in {held}/{} runs", res.reports.len());
        }
        Command::Sweep => {
            let res = run_sweep(&cfg, cli.jobs)?;
            write_outputs(&dir, &base, &res.rows, &res.reports, &echoed(cli, &text))?;
            log::info!("wrote {} rows to {}", res.rows.len(), dir.join(format!("{base}.csv")).display());
        }
        Command::Baselines => {
            let rows = run_baselines(&cfg, cli.jobs)?;
            write_rows(std::fs::File::create(dir.join(format!("{base}_baselines.csv")))?, &rows)?;
            write_summary(std::fs::File::create(dir.join(format!("{base}_baselines_summary.csv")))?, &summarize(&rows))?;
            log::info!("wrote {} baseline rows", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
