//! `fiberlab` command-line driver.
//!
//! Every subcommand starts from the default experiment configuration, then
//! applies `--config <file>`, then `--set key.path=value` overrides, then the
//! dedicated flags. Tables and CSV go to stdout, progress to stderr.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fiberlab::complexity::{rmps, sci_notation};
use fiberlab::dbp::DbpConfig;
use fiberlab::experiment::{
    append_csv, dbp_complexity, evaluate_dbp, evaluate_nn, gnuplot_script, run_sweep, search_topology, simulate,
    train_equalizer, write_csv, Dataset, EqualizerConfig, ExperimentConfig, MetricsRow, Score, SweepMode,
    TrainedEqualizer,
};
use fiberlab::receiver::PolSelection;
use fiberlab::search::{preset, preset_topologies, Budget, Strategy};
use fiberlab::topology::{ArchKind, TopologySpec};
use fiberlab::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "fiberlab", version, about = "Nonlinear fiber link simulation and NN equalizer laboratory")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON experiment configuration (missing keys take defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set link.launch_power_dbm=3`.
    /// Values are parsed as JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    n_train_symbols: Option<usize>,
    #[arg(long, global = true)]
    n_test_symbols: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    launch_power_dbm: Option<f64>,
    #[arg(long, global = true)]
    target_q_db: Option<f64>,
    #[arg(long, global = true)]
    data_seed: Option<u64>,
    /// Comma-separated model seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true, value_enum)]
    polarizations: Option<Pols>,
    #[arg(long, global = true)]
    max_epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    patience_epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Pols {
    Both,
    X,
    Y,
}

impl From<Pols> for PolSelection {
    fn from(p: Pols) -> Self {
        match p {
            Pols::Both => PolSelection::Both,
            Pols::X => PolSelection::X,
            Pols::Y => PolSelection::Y,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Random,
    Surrogate,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration as JSON.
    Config,
    /// Simulate the train and test frames and write a dataset file.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an NN equalizer (one model per polarization).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        topo: TopologyArgs,
        /// Model seed (defaults to the first configured seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score an equalizer on the test frame and print a metrics row.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with_all = ["dbp", "cdc"])]
        model: Option<PathBuf>,
        #[arg(long, conflicts_with = "cdc")]
        dbp: bool,
        #[arg(long)]
        cdc: bool,
        #[arg(long, requires = "dbp")]
        steps_per_span: Option<usize>,
        /// Append the row to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report real multiplications per symbol.
    Complexity {
        /// Audit every preset against its reference figure.
        #[arg(long)]
        table1: bool,
        #[command(flatten)]
        topo: TopologyArgs,
        #[arg(long)]
        dbp: bool,
        #[arg(long, requires = "dbp")]
        steps_per_span: Option<usize>,
    },
    /// Search topologies of one architecture under a complexity budget.
    Search {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_arch)]
        arch: ArchKind,
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long, default_value_t = 1.1)]
        tolerance: f64,
        #[arg(long, value_enum, default_value = "surrogate")]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Append one row per trial to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the budget x architecture x seed sweep.
    Sweep {
        /// Reuse a dataset instead of simulating one.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "FIBERLAB_CACHE_DIR")]
        cache_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Also write a gnuplot script plotting the CSV.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TopologyArgs {
    /// Topology such as `mlp(10,10,25)` or `cnn_bilstm(2,5,10)@21`.
    #[arg(long, value_parser = parse_topology, conflicts_with = "preset")]
    topology: Option<TopologySpec>,
    /// Preset label: Best or "Topology 1" .. "Topology 6" (also t1..t6).
    #[arg(long, requires = "arch")]
    preset: Option<String>,
    #[arg(long, value_parser = parse_arch)]
    arch: Option<ArchKind>,
    /// Window length n_s (odd) replacing that of the chosen topology.
    #[arg(long)]
    memory: Option<usize>,
}

impl TopologyArgs {
    fn resolve(&self, fallback: &EqualizerConfig) -> Result<Option<TopologySpec>> {
        let spec = match (&self.topology, &self.preset, self.arch) {
            (Some(t), _, _) => Some(*t),
            (None, Some(label), Some(arch)) => Some(preset(label, arch)?),
            _ => fallback.topology()?,
        };
        Ok(spec.map(|s| match self.memory {
            Some(m) => s.with_memory(m),
            None => s,
        }))
    }
}

fn parse_arch(s: &str) -> std::result::Result<ArchKind, String> {
    ArchKind::parse(s).map_err(|e| e.to_string())
}

fn parse_topology(s: &str) -> std::result::Result<TopologySpec, String> {
    TopologySpec::parse(s).map_err(|e| e.to_string())
}

fn set_path(root: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidInput(format!("--set expects KEY=VALUE, got '{assignment}'")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    for part in key.split('.') {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidInput(format!("'{key}' does not name a configuration key")))?;
        node = obj.entry(part.to_string()).or_insert(serde_json::Value::Null);
    }
    *node = value;
    Ok(())
}

fn effective_config(o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if !o.set.is_empty() {
        let mut tree = serde_json::to_value(&cfg)?;
        for s in &o.set {
            set_path(&mut tree, s)?;
        }
        cfg = ExperimentConfig::from_json(&tree.to_string())?;
    }
    macro_rules! apply {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value {
                $field = v;
            }
        };
    }
    apply!(cfg.tx.n_train_symbols, o.n_train_symbols);
    apply!(cfg.tx.n_test_symbols, o.n_test_symbols);
    apply!(cfg.link.launch_power_dbm, o.launch_power_dbm);
    apply!(cfg.data_seed, o.data_seed);
    apply!(cfg.seeds, o.seeds.clone());
    apply!(cfg.polarizations, o.polarizations.map(PolSelection::from));
    apply!(cfg.train.max_epochs, o.max_epochs);
    apply!(cfg.train.batch_size, o.batch_size);
    apply!(cfg.train.learning_rate, o.learning_rate);
    apply!(cfg.train.patience_epochs, o.patience_epochs);
    if o.target_q_db.is_some() {
        cfg.target_q_db = o.target_q_db;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a dataset and adopts the configuration it was generated with for
/// everything that shapes the frames.
fn load_data(path: &Path, cfg: &mut ExperimentConfig) -> Result<Dataset> {
    let data = Dataset::load(path)?;
    let stored = &data.header.config;
    cfg.link = stored.link.clone();
    cfg.tx = stored.tx;
    cfg.target_q_db = stored.target_q_db;
    cfg.data_seed = stored.data_seed;
    cfg.polarizations = stored.polarizations;
    Ok(data)
}

fn print_rows(rows: &[MetricsRow], out: Option<&Path>) -> Result<()> {
    write_csv(rows, std::io::stdout().lock())?;
    if let Some(p) = out {
        append_csv(rows, p)?;
    }
    Ok(())
}

fn dbp_settings(cfg: &ExperimentConfig, steps: Option<usize>) -> DbpConfig {
    let mut d = match &cfg.equalizer {
        EqualizerConfig::Dbp(d) => *d,
        _ => DbpConfig::default(),
    };
    if let Some(s) = steps {
        d.steps_per_span = s;
    }
    d
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = effective_config(&cli.overrides)?;
    match cli.command {
        Command::Config => println!("{}", cfg.to_json_pretty()?),
        Command::Simulate { out } => {
            eprintln!(
                "simulating {} + {} symbols over {} spans",
                cfg.tx.n_train_symbols,
                cfg.tx.n_test_symbols,
                cfg.link.n_spans()
            );
            let data = simulate(&cfg)?;
            data.save(&out)?;
            let info = &data.header.test;
            eprintln!(
                "wrote {} (noise sigma {:.4}, config {})",
                out.display(),
                info.noise_sigma,
                &data.header.config_hash[..12]
            );
        }
        Command::Train { data, out, topo, seed } => {
            let data = load_data(&data, &mut cfg)?;
            let spec = topo
                .resolve(&cfg.equalizer)?
                .ok_or_else(|| Error::InvalidInput("no NN topology given (use --topology or --preset/--arch)".into()))?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            eprintln!("training {} ({} RMpS), seed {seed}", spec.describe(), rmps(&spec)?.total);
            let eq = train_equalizer(spec, &data.train, &cfg.train, seed, cfg.polarizations)?;
            for ((pol, _), r) in eq.models.iter().zip(&eq.reports) {
                let best = r.val_loss.get(r.best_epoch).copied().unwrap_or(f64::NAN);
                eprintln!("  {pol:?}: {} epochs, best validation loss {best:.4e}", r.epochs_run);
            }
            eq.save(&out)?;
        }
        Command::Evaluate {
            data,
            model,
            dbp,
            cdc,
            steps_per_span,
            out,
        } => {
            let data = load_data(&data, &mut cfg)?;
            let row = if let Some(path) = model {
                let eq = TrainedEqualizer::load(&path)?;
                let spec = eq.spec();
                let s = evaluate_nn(&eq, &data.test, cfg.polarizations)?;
                MetricsRow::new(spec.tag(), rmps(&spec)?.total, &s, eq.seed, eq.epochs)
            } else if dbp || matches!(cfg.equalizer, EqualizerConfig::Dbp(_)) && !cdc {
                let d = dbp_settings(&cfg, steps_per_span);
                let s = evaluate_dbp(&data, &d)?;
                let c = dbp_complexity(&cfg, &d)?;
                MetricsRow::new(format!("dbp-{}", d.steps_per_span), c.round() as u64, &s, cfg.data_seed, 0)
            } else {
                let m = fiberlab::receiver::metrics(&data.test.rx, &data.test.tx, cfg.polarizations);
                let s = Score {
                    q_db: m.q_factor_db,
                    ber: m.ber,
                    cdc_q_db: m.q_factor_db,
                    q_gain_db: 0.0,
                };
                MetricsRow::new("cdc".into(), 0, &s, cfg.data_seed, 0)
            };
            print_rows(&[row], out.as_deref())?;
        }
        Command::Complexity {
            table1,
            topo,
            dbp,
            steps_per_span,
        } => {
            let mut any = false;
            if table1 {
                any = true;
                let mut matched = 0;
                let presets = preset_topologies();
                println!("{:<12} {:<26} {:>12} {:>9} {:>9}  check", "label", "topology", "rmps", "computed", "printed");
                for p in &presets {
                    let total = rmps(&p.spec)?.total;
                    let computed = sci_notation(total, 2);
                    let ok = computed == p.printed_rmps;
                    matched += ok as usize;
                    println!(
                        "{:<12} {:<26} {:>12} {:>9} {:>9}  {}",
                        p.label,
                        p.spec.describe(),
                        total,
                        computed,
                        p.printed_rmps,
                        if ok { "pass" } else { "FAIL" }
                    );
                }
                println!("{matched}/{} presets match", presets.len());
            }
            if topo.topology.is_some() || topo.preset.is_some() {
                any = true;
                let spec = topo.resolve(&cfg.equalizer)?.expect("topology given");
                let r = rmps(&spec)?;
                println!("{}: {} RMpS ({})", spec.describe(), r.total, sci_notation(r.total, 2));
                for (term, v) in &r.breakdown {
                    println!("  {term:<4} {v:>14}");
                }
            }
            if dbp {
                any = true;
                let d = dbp_settings(&cfg, steps_per_span);
                let c = dbp_complexity(&cfg, &d)?;
                println!(
                    "dbp {} StPS, Nfft {}: {c:.1} RMpS (log10 {:.4})",
                    d.steps_per_span,
                    d.n_fft,
                    c.log10()
                );
            }
            if !any {
                let spec = cfg
                    .equalizer
                    .topology()?
                    .ok_or_else(|| Error::InvalidInput("nothing to report; pass --table1, --topology, --preset or --dbp".into()))?;
                println!("{}: {} RMpS", spec.describe(), rmps(&spec)?.total);
            }
        }
        Command::Search {
            data,
            arch,
            budget,
            tolerance,
            strategy,
            trials,
            seed,
            out,
        } => {
            let data = load_data(&data, &mut cfg)?;
            let budget = budget.map(|rmps| Budget { rmps, tolerance });
            let strategy = match strategy {
                StrategyArg::Random => Strategy::Random,
                StrategyArg::Surrogate => Strategy::Surrogate,
            };
            let (result, scores) = search_topology(&cfg, &data, arch, budget, strategy, trials, seed)?;
            let rows: Vec<MetricsRow> = result
                .history
                .iter()
                .zip(&scores)
                .map(|(t, s)| MetricsRow::new(t.spec.tag(), t.rmps, s, t.seed, t.epochs_used))
                .collect();
            print_rows(&rows, out.as_deref())?;
            eprintln!(
                "best: {} with validation Q {:.3} dB at {} RMpS",
                result.best.spec.describe(),
                result.best.score,
                result.best.rmps
            );
        }
        Command::Sweep {
            data,
            out,
            cache_dir,
            jobs,
            plot,
        } => {
            let data = match data {
                Some(p) => load_data(&p, &mut cfg)?,
                None => {
                    eprintln!("simulating dataset");
                    simulate(&cfg)?
                }
            };
            let cells = cfg.sweep.budgets.len() * cfg.sweep.archs.len() * cfg.seeds.len();
            let mode = match cfg.sweep.mode {
                SweepMode::Preset => "preset",
                SweepMode::Random => "random search",
                SweepMode::Surrogate => "surrogate search",
            };
            eprintln!("sweeping {cells} cells ({mode}, {jobs} jobs)");
            let (rows, stats) = run_sweep(&cfg, &data, cache_dir.as_deref(), jobs)?;
            write_csv(&rows, std::fs::File::create(&out)?)?;
            eprintln!("{} computed, {} cached; wrote {}", stats.computed, stats.cached, out.display());
            if let Some(p) = plot {
                let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                std::fs::write(&p, gnuplot_script(&name, &cfg.sweep.archs))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numerical(_) => 3,
                _ => 2,
            })
        }
    }
}
