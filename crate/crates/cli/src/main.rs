use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mad_core::attack::{
    evaluate, run_jacobian_attack, run_knockoff, train_attacker, AttackConfig, Strategy, Subversion,
};
use mad_core::defense::{DefendedEndpoint, DefenseKind, DefensePolicy, SurrogateSpec};
use mad_core::harness::{
    emit_results, expand_grid, run_ablation, run_angular_experiment, run_sweep, timing_report,
    ExperimentConfig, ResultsDump, Setup, SurrogateMode, OUT_DIR_ENV,
};
use mad_core::nn::build;
use mad_core::Result;

#[derive(Parser)]
#[command(name = "mad", version, about = "Prediction poisoning against model stealing: experiments")]
struct Cli {
    /// Output directory (overrides the config's `out_dir`).
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,
    /// Worker threads (overrides the config's `threads`).
    #[arg(long, global = true, env = "MAD_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (JSON).
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Whitebox,
    Blackbox,
}

#[derive(Subcommand)]
enum Command {
    /// Train the victim (or load its checkpoint) and report test accuracy.
    TrainVictim {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Where to save the checkpoint (defaults to the config's, else <out>/victim.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run one attack against one defense and save the transfer set.
    Attack {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Index into the config's attack list.
        #[arg(long, default_value_t = 0)]
        attack: usize,
        /// Defense as JSON, e.g. '{"kind":"mad","epsilon":0.5}'.
        #[arg(long, default_value = r#"{"kind":"none"}"#)]
        defense: String,
        /// Override the attack's query budget.
        #[arg(long)]
        budget: Option<usize>,
        /// Extra subversions: argmax_only, opt_adam, nquery:N, nquery_aug:N.
        #[arg(long = "subversion")]
        subversions: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep every (defense, ε, attack) in the config.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Angular-deviation histogram of online SGD under MAD.
    Angular {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Budgets to run; one histogram each.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 2.0])]
        epsilon: Vec<f64>,
        #[arg(long, value_enum, default_value = "whitebox")]
        mode: Mode,
        #[arg(long)]
        steps: Option<usize>,
        /// Use MAD-argmax instead of MAD.
        #[arg(long)]
        argmax: bool,
    },
    /// MAD, MAD-argmax, identity-G and random-y* over the ε grid.
    Ablation {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Per-query latency of each defense in the config.
    Timing {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, default_value_t = 200)]
        queries: usize,
    },
    /// Rewrite CSV and SVG files from a results.json dump.
    Emit {
        /// Path to results.json.
        input: PathBuf,
    },
}

fn parse_subversion(s: &str) -> std::result::Result<Subversion, String> {
    let (name, n) = match s.split_once(':') {
        Some((a, b)) => (a, Some(b.parse::<usize>().map_err(|e| format!("{s}: {e}"))?)),
        None => (s, None),
    };
    match (name, n) {
        ("argmax_only", None) => Ok(Subversion::ArgmaxOnly),
        ("opt_adam", None) => Ok(Subversion::OptAdam),
        ("nquery", Some(n)) => Ok(Subversion::Nquery { n }),
        ("nquery_aug", Some(n)) => Ok(Subversion::NqueryAug { n }),
        _ => Err(format!("unknown subversion {s:?}")),
    }
}

struct Env {
    out_dir: Option<PathBuf>,
    threads: Option<usize>,
}

impl Env {
    fn load(&self, path: &Path) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(t) = self.threads {
            cfg.threads = Some(t);
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = Some(d.clone());
        }
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| cfg.resolved_out_dir())
}

fn dump_for(cfg: &ExperimentConfig, setup: &Setup) -> Result<ResultsDump> {
    let mut dump = ResultsDump::new(cfg.seed);
    dump.config = serde_json::to_value(cfg)?;
    dump.num_classes = Some(setup.data.num_classes());
    dump.victim_accuracy = Some(setup.victim_accuracy);
    Ok(dump)
}

fn report(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    let env = Env {
        out_dir: cli.out_dir,
        threads: cli.threads,
    };
    match cli.command {
        Command::TrainVictim { cfg, checkpoint } => {
            let mut cfg = env.load(&cfg.config)?;
            let path = checkpoint
                .or_else(|| cfg.victim.checkpoint.clone())
                .unwrap_or_else(|| out_dir(&cfg).join("victim.json"));
            cfg.victim.checkpoint = Some(path.clone());
            let data = mad_core::harness::ExperimentData::load(&cfg.dataset)?;
            let (_, acc) = cfg.victim.obtain(&data)?;
            println!("victim {} test accuracy {:.4} ({})", cfg.victim.arch, acc, path.display());
        }
        Command::Attack {
            cfg,
            attack,
            defense,
            budget,
            subversions,
            seed,
        } => {
            let cfg = env.load(&cfg.config)?;
            let mut a: AttackConfig = cfg
                .attacks
                .get(attack)
                .cloned()
                .ok_or_else(|| mad_core::Error::InvalidArgument(format!("no attack at index {attack}")))?;
            if let Some(b) = budget {
                a.budget = b;
            }
            if let Some(s) = seed {
                a.seed = s;
            }
            for s in &subversions {
                a.subversions.push(parse_subversion(s).map_err(mad_core::Error::InvalidArgument)?);
            }
            a.validate()?;
            let policy: DefensePolicy = serde_json::from_str(&defense)?;
            let setup = Setup::new(&cfg)?;
            let threads = cfg.resolved_threads();
            let ep = DefendedEndpoint::new(setup.victim.clone(), policy.clone(), Some(setup.surrogate.clone()), cfg.seed)?
                .with_query_limit(a.budget)
                .with_threads(threads);
            let arch = setup.victim.arch_id().to_string();
            let (ts, pool) = if a.strategy == Strategy::Knockoff {
                (run_knockoff(&ep, &setup.data.pool, &a)?, &setup.data.pool)
            } else {
                (run_jacobian_attack(&ep, &setup.data.seed_pool, &a, &arch, threads)?, &setup.data.seed_pool)
            };
            let stolen = train_attacker(&ts, Some(pool), &a, &arch)?;
            let acc = evaluate(&stolen.model, &setup.data.test)?;
            let dir = out_dir(&cfg);
            std::fs::create_dir_all(&dir).map_err(|e| mad_core::Error::Io { path: dir.clone(), source: e })?;
            let stem = format!("{}-{}", a.tag(), policy.tag()).replace(['(', ')', '=', ','], "_");
            let ts_path = dir.join(format!("{stem}.transfer.json"));
            let model_path = dir.join(format!("{stem}.stolen.json"));
            ts.save(&ts_path)?;
            stolen.model.save(&model_path)?;
            println!(
                "{} vs {}: {} queries, victim {:.4}, attacker {:.4}",
                a.tag(),
                policy.tag(),
                ep.queries_issued(),
                setup.victim_accuracy,
                acc
            );
            report(&[ts_path, model_path]);
        }
        Command::Sweep { cfg } => {
            let cfg = env.load(&cfg.config)?;
            let setup = Setup::new(&cfg)?;
            let mut dump = dump_for(&cfg, &setup)?;
            dump.points = run_sweep(&cfg, &setup)?;
            report(&emit_results(&dump, out_dir(&cfg))?);
        }
        Command::Ablation { cfg } => {
            let cfg = env.load(&cfg.config)?;
            let setup = Setup::new(&cfg)?;
            let mut dump = dump_for(&cfg, &setup)?;
            dump.points = run_ablation(&cfg, &setup)?;
            report(&emit_results(&dump, out_dir(&cfg))?);
        }
        Command::Angular {
            cfg,
            epsilon,
            mode,
            steps,
            argmax,
        } => {
            let cfg = env.load(&cfg.config)?;
            let setup = Setup::new(&cfg)?;
            let mut acfg = cfg.angular.clone().unwrap_or_default();
            acfg.mode = match mode {
                Mode::Whitebox => SurrogateMode::Whitebox,
                Mode::Blackbox => SurrogateMode::Blackbox,
            };
            if let Some(s) = steps {
                acfg.steps = s;
            }
            let mut dump = dump_for(&cfg, &setup)?;
            let kind = if argmax { DefenseKind::MadArgmax } else { DefenseKind::Mad };
            for eps in epsilon {
                let policy = DefensePolicy::with_epsilon(kind, eps);
                let h = run_angular_experiment(
                    &setup.victim,
                    &setup.data.pool.inputs,
                    &setup.data.test,
                    &policy,
                    Some(&setup.surrogate),
                    &acfg,
                )?;
                println!("{} {:?}: mean deviation {:.1}°", h.defense_tag, h.mode, h.mean_theta);
                dump.histograms.push(h);
            }
            report(&emit_results(&dump, out_dir(&cfg))?);
        }
        Command::Timing { cfg, queries } => {
            let cfg = env.load(&cfg.config)?;
            let setup = Setup::new(&cfg)?;
            let mut dump = dump_for(&cfg, &setup)?;
            for policy in expand_grid(&cfg.defenses, cfg.epsilons.as_deref()) {
                let ep = DefendedEndpoint::new(setup.victim.clone(), policy, Some(setup.surrogate.clone()), cfg.seed)?;
                let t = timing_report(&ep, &setup.data.test.inputs, queries)?;
                println!("{:<40} {:>9.3} ± {:.3} ms", t.defense_tag, t.mean_ms, t.std_ms);
                dump.timings.push(t);
            }
            let shape = setup.data.input_shape().to_vec();
            for classes in [2, 10, 100] {
                let surrogate = SurrogateSpec::random(setup.victim.arch_id(), cfg.seed).build(
                    &shape,
                    classes,
                    None,
                    None,
                    &cfg.victim.train_cfg,
                )?;
                let victim = build(setup.victim.arch_id(), &shape, classes, None, cfg.seed)?;
                let ep = DefendedEndpoint::new(Arc::new(victim), DefensePolicy::mad(1.0), Some(Arc::new(surrogate)), 0)?;
                let mut t = timing_report(&ep, &setup.data.test.inputs, queries)?;
                t.defense_tag = format!("{} K={classes}", t.defense_tag);
                println!("{:<40} {:>9.3} ± {:.3} ms", t.defense_tag, t.mean_ms, t.std_ms);
                dump.timings.push(t);
            }
            report(&emit_results(&dump, out_dir(&cfg))?);
        }
        Command::Emit { input } => {
            let dump = ResultsDump::load(&input)?;
            let dir = env
                .out_dir
                .clone()
                .or_else(|| input.parent().map(Path::to_path_buf))
                .unwrap_or_default();
            report(&emit_results(&dump, dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subversion_syntax() {
        assert_eq!(parse_subversion("argmax_only"), Ok(Subversion::ArgmaxOnly));
        assert_eq!(parse_subversion("nquery:4"), Ok(Subversion::Nquery { n: 4 }));
        assert_eq!(parse_subversion("nquery_aug:2"), Ok(Subversion::NqueryAug { n: 2 }));
        assert!(parse_subversion("nquery").is_err());
        assert!(parse_subversion("argmax_only:3").is_err());
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
