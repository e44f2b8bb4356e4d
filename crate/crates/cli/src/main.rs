//! `dpaudit`: black-box differential privacy auditing from the command line.
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure, 4 when
//! `fault-demo` certifies a budget violation.

use clap::{Args, Parser, Subcommand};
use dpaudit_cli::config::{self, BaseDefaults, ExperimentConfig, Overrides};
use dpaudit_cli::engine;
use dpaudit_cli::results::{self, ResultRow};
use dpaudit_cli::toy::{self, ToyProtocol};
use dpaudit_cli::chart;
use dpaudit_core::dp::{self, PrivacyBudget};
use dpaudit_core::error::{Error, Result};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "dpaudit",
    version,
    about = "Audit differentially private training from the outside: plant coin-flip \
             canaries, train once, guess the coins, certify a lower bound on epsilon."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a dataset (synthetic canaries, multitask, or toy) as columnar text
    Gen {
        /// Dataset family: synthetic, multitask or toy
        #[arg(long, default_value = "synthetic")]
        kind: String,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Find the noise multiplier matching eps_target under the accountant
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run one audit configuration across its seeds
    Audit {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run a grid of configurations; rows stream to the output CSV
    Sweep {
        /// Grid axis as key=v1,v2,...; repeat for a cartesian product
        #[arg(long = "grid", value_name = "KEY=V1,V2,...")]
        grid: Vec<String>,
        /// Worker threads for independent runs (default 1, deterministic order)
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train with an injected fault and check the claimed budget; exits 4 on VIOLATION
    FaultDemo {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Memorization study on the toy generator over an (a, b) grid
    Toy {
        /// Label-signal weights to try
        #[arg(long = "a_values", default_value = "0,1")]
        a_values: String,
        /// Sample-noise weights to try
        #[arg(long = "b_values", default_value = "0,10,50")]
        b_values: String,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Render a line chart from a results CSV
    Report {
        /// Results CSV produced by audit/sweep
        #[arg(long)]
        input: PathBuf,
        /// Numeric column for the x axis
        #[arg(long, default_value = "m")]
        x: String,
        /// Numeric column for the y axis
        #[arg(long, default_value = "eps_lower")]
        y: String,
        /// Column whose distinct values become separate lines
        #[arg(long, default_value = "flow")]
        group: String,
        #[arg(long, default_value = "chart.svg")]
        out: PathBuf,
    },
}

/// Every config-file key as a flag of the same name; flags override the file,
/// which overrides DPAUDIT_SEED-free defaults. See `config` for the key list.
#[derive(Args)]
struct CommonArgs {
    /// Config file of flat `key = value` lines, # comments allowed
    #[arg(long)]
    config: Option<PathBuf>,
    /// baseline_o1, self_comp, multitask or toy
    #[arg(long)]
    flow: Option<String>,
    /// gaussian, orthogonal or mislabeled_toy
    #[arg(long = "canary_mode")]
    canary_mode: Option<String>,
    /// Number of audit canaries
    #[arg(long)]
    m: Option<usize>,
    /// Total training rows (multitask base / toy train size)
    #[arg(long)]
    n: Option<usize>,
    /// Holdout rows for test accuracy
    #[arg(long = "test_n")]
    test_n: Option<usize>,
    /// Input feature dimension
    #[arg(long = "d_x")]
    d_x: Option<usize>,
    /// Hidden layer width
    #[arg(long = "d_h")]
    d_h: Option<usize>,
    /// Main-task class count
    #[arg(long)]
    classes: Option<usize>,
    /// Tag vocabulary size for the multitask head
    #[arg(long = "tag_classes")]
    tag_classes: Option<usize>,
    /// Tags per canary
    #[arg(long = "tag_size")]
    tag_size: Option<usize>,
    /// Leading feature coordinates replaced by the trigger pattern
    #[arg(long = "trigger_dim")]
    trigger_dim: Option<usize>,
    /// Weight of the tag loss in multitask training
    #[arg(long)]
    lambda: Option<f64>,
    /// Privacy budget the run claims; calibrates sigma (exclusive with --sigma)
    #[arg(long = "eps_target")]
    eps_target: Option<f64>,
    /// Explicit noise multiplier (exclusive with --eps_target)
    #[arg(long)]
    sigma: Option<f64>,
    /// Canary feature scale
    #[arg(long)]
    sigma0: Option<f64>,
    /// Privacy parameter delta
    #[arg(long)]
    delta: Option<f64>,
    /// Poisson sampling rate per step
    #[arg(long)]
    q: Option<f64>,
    /// Optimizer steps
    #[arg(long)]
    epochs: Option<u64>,
    /// Learning rate
    #[arg(long)]
    eta: Option<f64>,
    /// Per-example clipping norm
    #[arg(long)]
    clip: Option<f64>,
    /// poisson or fixed_uniform
    #[arg(long = "batch_mode")]
    batch_mode: Option<String>,
    /// Guess budget; defaults to m (guess every canary)
    #[arg(long)]
    r: Option<usize>,
    /// binomial_tail or clopper_pearson
    #[arg(long)]
    estimator: Option<String>,
    /// Confidence level of the certified bound
    #[arg(long)]
    confidence: Option<f64>,
    /// Master seed; DPAUDIT_SEED overrides the default, --seed overrides both
    #[arg(long)]
    seed: Option<u64>,
    /// Run seeds seed..seed+num_seeds
    #[arg(long = "num_seeds")]
    num_seeds: Option<usize>,
    /// Explicit comma-separated seed list; wins over seed/num_seeds
    #[arg(long)]
    seeds: Option<String>,
    /// Injected training fault: none, no_noise, under_noise:<f>, no_clip, fixed_batches
    #[arg(long)]
    fault: Option<String>,
    /// Toy label-signal weight (0 or 1)
    #[arg(long)]
    a: Option<u8>,
    /// Toy sample-noise weight
    #[arg(long)]
    b: Option<f64>,
    /// Use the full-scale reference dimensions instead of desk scale
    #[arg(long = "full_scale", num_args = 0..=1, default_missing_value = "true")]
    full_scale: Option<bool>,
    /// Output path (CSV for runs, dataset file for gen)
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn to_overrides(&self) -> Result<Overrides> {
        let mut ov = Overrides::default();
        for (key, val) in [
            ("flow", &self.flow),
            ("canary_mode", &self.canary_mode),
            ("batch_mode", &self.batch_mode),
            ("estimator", &self.estimator),
            ("seeds", &self.seeds),
            ("fault", &self.fault),
        ] {
            if let Some(v) = val {
                ov.set(key, v)?;
            }
        }
        ov.m = self.m;
        ov.n = self.n;
        ov.test_n = self.test_n;
        ov.d_x = self.d_x;
        ov.d_h = self.d_h;
        ov.classes = self.classes;
        ov.tag_classes = self.tag_classes;
        ov.tag_size = self.tag_size;
        ov.trigger_dim = self.trigger_dim;
        ov.lambda = self.lambda;
        ov.eps_target = self.eps_target;
        ov.sigma = self.sigma;
        ov.sigma0 = self.sigma0;
        ov.delta = self.delta;
        ov.q = self.q;
        ov.epochs = self.epochs;
        ov.eta = self.eta;
        ov.clip = self.clip;
        ov.r = self.r;
        ov.confidence = self.confidence;
        ov.seed = self.seed;
        ov.num_seeds = self.num_seeds;
        ov.a = self.a;
        ov.b = self.b;
        ov.full_scale = self.full_scale;
        ov.out = self.out.clone();
        Ok(ov)
    }

    /// defaults < pre < file < DPAUDIT_SEED < flags < post. `pre` carries
    /// subcommand-specific defaults, `post` a sweep-grid cell.
    fn resolve_layers(
        &self,
        base: BaseDefaults,
        pre: Option<&Overrides>,
        post: Option<&Overrides>,
    ) -> Result<ExperimentConfig> {
        let file = match &self.config {
            Some(p) => Some(config::load_config_file(p)?),
            None => None,
        };
        let env = config::env_overrides()?;
        let cli = self.to_overrides()?;
        let mut layers: Vec<&Overrides> = Vec::new();
        if let Some(p) = pre {
            layers.push(p);
        }
        if let Some(f) = &file {
            layers.push(f);
        }
        layers.push(&env);
        layers.push(&cli);
        if let Some(p) = post {
            layers.push(p);
        }
        config::resolve(base, &layers)
    }

    fn resolve(&self, base: BaseDefaults) -> Result<ExperimentConfig> {
        self.resolve_layers(base, None, None)
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("dpaudit: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 3,
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Gen { kind, common } => {
            let cfg = common.resolve(BaseDefaults::Desk)?;
            let ds = engine::build_dataset(&kind, &cfg, cfg.seeds[0])?;
            match &cfg.out {
                Some(path) => {
                    let mut w = BufWriter::new(File::create(path)?);
                    ds.write_to(&mut w)?;
                    w.flush()?;
                    eprintln!("wrote {} dataset to {}", ds.kind(), path.display());
                }
                None => {
                    let stdout = std::io::stdout();
                    let mut w = BufWriter::new(stdout.lock());
                    ds.write_to(&mut w)?;
                    w.flush()?;
                }
            }
            Ok(0)
        }
        Cmd::Calibrate { common } => {
            let cfg = common.resolve(BaseDefaults::Desk)?;
            let eps = cfg
                .eps_target
                .ok_or_else(|| Error::config("calibrate needs eps_target"))?;
            let budget = PrivacyBudget::new(eps, cfg.delta)?;
            let sigma = dp::calibrate_sigma(&budget, cfg.q, cfg.epochs)?;
            let achieved = dp::rdp_epsilon(sigma, cfg.q, cfg.epochs, cfg.delta);
            println!("sigma = {sigma:.6}");
            println!(
                "achieved epsilon = {achieved:.6} (target {eps}, delta = {:e}, q = {}, steps = {})",
                cfg.delta, cfg.q, cfg.epochs
            );
            Ok(0)
        }
        Cmd::Audit { common } => {
            let cfg = common.resolve(BaseDefaults::Desk)?;
            let rows = with_optional_writer(&cfg, |w| {
                engine::run_experiment(&cfg, w)
            })?;
            print_rows(&rows);
            Ok(0)
        }
        Cmd::Sweep { grid, workers, common } => {
            let axes = parse_grid(&grid)?;
            let mut configs = Vec::new();
            for cell in cartesian(&axes) {
                // The cell layer sits above everything: a sweep axis beats
                // even an explicit flag for the same key.
                let extra = Overrides::from_pairs(
                    cell.iter().map(|(k, v)| (k.as_str(), v.as_str())),
                )?;
                configs.push(common.resolve_layers(BaseDefaults::Desk, None, Some(&extra))?);
            }
            let path = configs
                .first()
                .and_then(|c| c.out.clone())
                .unwrap_or_else(|| PathBuf::from("results.csv"));
            let mut writer = results::create_csv_file(&path)?;
            let rows = engine::run_jobs(&configs, workers.unwrap_or(1), Some(&mut writer))?;
            print_rows(&rows);
            eprintln!("wrote {} rows to {}", rows.len(), path.display());
            Ok(0)
        }
        Cmd::FaultDemo { common } => {
            // A demo without an explicit fault injects no_noise; pass
            // fault=none to run the soundness arm.
            let pre = Overrides::from_pairs([("fault", "no_noise")])?;
            let cfg = common.resolve_layers(BaseDefaults::Desk, Some(&pre), None)?;
            let report = with_optional_writer(&cfg, |w| {
                engine::run_fault_demo(&cfg, w)
            })?;
            println!(
                "fault = {}, claimed epsilon = {}",
                config::fault_str(cfg.fault),
                report.claimed
            );
            for row in &report.rows {
                let verdict = if row.eps_lower.is_finite() && row.eps_lower > report.claimed {
                    "VIOLATION"
                } else {
                    "ok"
                };
                println!(
                    "seed {:>4}: eps_lower = {:.4} (w = {}/{})  {verdict}",
                    row.seed, row.eps_lower, row.w, row.r
                );
            }
            if report.violation {
                println!("verdict: VIOLATION (certified lower bound exceeds the claimed budget)");
                Ok(4)
            } else {
                println!("verdict: PASS (no seed contradicts the claimed budget)");
                Ok(0)
            }
        }
        Cmd::Toy { a_values, b_values, common } => {
            let cfg = common.resolve(BaseDefaults::ToyDesk)?;
            let a_list: Vec<u8> = parse_list(&a_values, "a_values")?;
            let b_list: Vec<f64> = parse_list(&b_values, "b_values")?;
            let grid: Vec<(u8, f64)> = a_list
                .iter()
                .flat_map(|&a| b_list.iter().map(move |&b| (a, b)))
                .collect();
            let proto = ToyProtocol::from_config(&cfg);
            let cells = toy::run_toy_insight(&grid, &proto, &cfg.seeds)?;
            print!("{}", toy::format_toy_table(&cells));
            if let Some(path) = &cfg.out {
                let mut w = BufWriter::new(File::create(path)?);
                writeln!(w, "a,b,seed,train_acc,test_acc,gap,auc")?;
                for c in &cells {
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{}",
                        c.a, c.b, c.seed, c.train_acc, c.test_acc, c.gap, c.auc
                    )?;
                }
                w.flush()?;
                eprintln!("wrote {} cells to {}", cells.len(), path.display());
            }
            Ok(0)
        }
        Cmd::Report { input, x, y, group, out } => {
            let text = std::fs::read_to_string(&input)?;
            let rows = results::parse_csv(&text)?;
            let mut w = BufWriter::new(File::create(&out)?);
            chart::emit_chart(&rows, &x, &y, &group, &mut w)?;
            w.flush()?;
            eprintln!("wrote chart of {} rows to {}", rows.len(), out.display());
            Ok(0)
        }
    }
}

/// Runs `f` with a CSV writer when the config names an output file.
fn with_optional_writer<T>(
    cfg: &ExperimentConfig,
    f: impl FnOnce(Option<&mut results::CsvWriter<File>>) -> Result<T>,
) -> Result<T> {
    match &cfg.out {
        Some(path) => {
            let mut w = results::create_csv_file(path)?;
            let out = f(Some(&mut w))?;
            eprintln!("wrote results to {}", path.display());
            Ok(out)
        }
        None => f(None),
    }
}

fn print_rows(rows: &[ResultRow]) {
    println!(
        "{:<6} {:<12} {:<14} {:>6} {:>9} {:>9} {:>9} {:>8} {:>7} {:>8} {:>8} {:>8}",
        "seed", "flow", "canary_mode", "m", "sigma", "w/r", "eps_lower", "eps_opt", "auc",
        "train", "test", "wall_s"
    );
    for r in rows {
        println!(
            "{:<6} {:<12} {:<14} {:>6} {:>9.4} {:>9} {:>9.4} {:>8.4} {:>7.4} {:>8.4} {:>8.4} {:>8.2}",
            r.seed,
            r.flow,
            r.canary_mode,
            r.m,
            r.sigma,
            format!("{}/{}", r.w, r.r),
            r.eps_lower,
            r.eps_opt,
            r.auc,
            r.train_acc,
            r.test_acc,
            r.wall_seconds
        );
    }
}

fn parse_grid(flags: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    flags
        .iter()
        .map(|spec| {
            let (key, vals) = spec
                .split_once('=')
                .ok_or_else(|| Error::config(format!("grid axis {spec:?} is not key=v1,v2,...")))?;
            let values: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).collect();
            if values.is_empty() || values.iter().any(String::is_empty) {
                return Err(Error::config(format!("grid axis {spec:?} has empty values")));
            }
            Ok((key.trim().to_string(), values))
        })
        .collect()
}

/// Cartesian product of the grid axes; a single empty cell when no axes.
fn cartesian(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in axes {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in values {
                let mut c = cell.clone();
                c.push((key.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    cells
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|_| Error::config(format!("bad {what} entry {t:?}")))
        })
        .collect()
}
