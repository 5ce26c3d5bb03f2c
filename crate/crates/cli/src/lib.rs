//! The `normswitch` command line.
//!
//! Every command returns an exit code: 0 success, 1 check failure, 2
//! configuration or usage error, 3 dataset or input-file error, 4
//! incompatible inputs.

pub mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use normswitch::analytics::{
    bin_by_rf, import_trajectory, mu_sigma_divergence, trajectory_divergence, write_trajectory, DivergenceReport, RfRange, Which,
};
use normswitch::config::ExperimentConfig;
use normswitch::gradcheck::{run_suite, Suite};
use normswitch::switchable::Omega;
use normswitch::trainer::{self, metrics_csv, EpochMetrics, Observer, Snapshot, TrainOutput};
use normswitch::Error;

use svg::{line_chart, Series};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATASET: i32 = 3;
pub const EXIT_INCOMPATIBLE: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "normswitch", version, about = "Switchable normalization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Binning {
    /// Bin each layer's final value.
    Converged,
    /// Bin every logged epoch separately.
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WhichArg {
    Mu,
    Sigma,
    Both,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a network and write metrics, ratio trajectory and snapshots.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a snapshot instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Per-layer divergence between the mean and variance ratios of one run.
    Analyze {
        trajectory: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Comma-separated `lo:hi` ranges plus optional `all`.
        #[arg(long)]
        ranges: Option<String>,
        #[arg(long, value_enum, default_value_t = Binning::Converged)]
        binning: Binning,
    },
    /// Per-layer divergence between the ratios of two runs.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value_t = WhichArg::Both)]
        which: WhichArg,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        ranges: Option<String>,
    },
    /// Harden the ratios of a snapshot and finetune the rest.
    HardenFinetune {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Finite-difference checks of every backward pass.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train once per two-member normalizer subset and tabulate the results.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
}

/// A failed command: exit code plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Usage(_) | Error::Io(_) => EXIT_CONFIG,
            Error::Dataset(_) | Error::Parse { .. } | Error::Input(_) => EXIT_DATASET,
            Error::Incompatible(_) => EXIT_INCOMPATIBLE,
            Error::Numeric(_) => EXIT_CHECK,
        };
        Failure { code, message: e.to_string() }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: EXIT_CHECK, message: format!("cannot write {}: {e}", path.display()) }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| io_fail(path, e))
}

fn mkdir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| io_fail(path, e))
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Messages go to stdout/stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(cmd: Command) -> CmdResult {
    match cmd {
        Command::Run { config, out, resume, quiet } => cmd_run(&config, out, resume.as_deref(), quiet),
        Command::Analyze { trajectory, out, ranges, binning } => cmd_analyze(&trajectory, &out, ranges.as_deref(), binning),
        Command::Compare { a, b, which, out, ranges } => cmd_compare(&a, &b, which, &out, ranges.as_deref()),
        Command::HardenFinetune { snapshot, config, out, quiet } => cmd_harden_finetune(&snapshot, &config, out, quiet),
        Command::Gradcheck { module, inject_fault } => cmd_gradcheck(&module, inject_fault.as_deref()),
        Command::Ablate { config, out, quiet } => cmd_ablate(&config, out, quiet),
    }
}

/// Loads a config file, applies the seed override and the output directory.
pub fn load_config(path: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_env()?;
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Progress {
    quiet: bool,
    label: String,
}

impl Observer for Progress {
    fn on_epoch(&mut self, m: &EpochMetrics) {
        if self.quiet {
            return;
        }
        let test = match (m.test_loss, m.test_acc) {
            (Some(l), Some(a)) => format!(" test_loss {l:.4} test_acc {:.2}%", 100.0 * a),
            _ => String::new(),
        };
        eprintln!(
            "[{}] epoch {} lr {:.4} train_loss {:.4} train_acc {:.2}%{test}",
            self.label,
            m.epoch,
            m.lr,
            m.train_loss,
            100.0 * m.train_acc
        );
    }
}

/// Writes the standard artifacts of a training run into `cfg.out_dir`.
pub fn write_run_outputs(cfg: &ExperimentConfig, out: &TrainOutput) -> CmdResult {
    let dir = &cfg.out_dir;
    mkdir(dir)?;
    write(&dir.join("config.cfg"), cfg.to_text())?;
    write(&dir.join("metrics.csv"), metrics_csv(&out.metrics))?;
    let mut traj = Vec::new();
    write_trajectory(&out.trajectory, &mut traj)?;
    write(&dir.join("trajectory.csv"), traj)?;
    write(&dir.join("snapshot.bin"), out.snapshot.to_bytes())?;
    for (epoch, snap) in &out.snapshots {
        write(&dir.join(format!("snapshot_e{epoch}.bin")), snap.to_bytes())?;
    }
    Ok(())
}

fn cmd_run(config: &Path, out: Option<PathBuf>, resume: Option<&Path>, quiet: bool) -> CmdResult {
    let cfg = load_config(config, out)?;
    let mut progress = Progress { quiet, label: "run".into() };
    let result = match resume {
        Some(p) => {
            let snap = Snapshot::load(p)?;
            trainer::resume_observed(&cfg, &snap, &mut progress)?
        }
        None => trainer::train_observed(&cfg, &mut progress)?,
    };
    write_run_outputs(&cfg, &result)?;
    if !quiet {
        println!("wrote outputs to {}", cfg.out_dir.display());
    }
    Ok(())
}

fn cmd_harden_finetune(snapshot: &Path, config: &Path, out: Option<PathBuf>, quiet: bool) -> CmdResult {
    let cfg = load_config(config, out)?;
    let snap = Snapshot::load(snapshot)?;
    let mut progress = Progress { quiet, label: "harden-finetune".into() };
    let result = trainer::harden_finetune_observed(&snap, &cfg, &mut progress)?;
    write_run_outputs(&cfg, &result)?;
    if !quiet {
        println!("wrote outputs to {}", cfg.out_dir.display());
    }
    Ok(())
}

fn parse_ranges(s: Option<&str>) -> Result<Vec<RfRange>, Failure> {
    Ok(match s {
        Some(s) => RfRange::parse_list(s)?,
        None => RfRange::defaults(),
    })
}

/// File-name-safe form of a range label.
pub fn range_slug(r: &RfRange) -> String {
    match r.bounds {
        None => "all".into(),
        Some((lo, hi)) => format!("{lo}_{hi}"),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.11e}"))
}

fn report_csv(report: &DivergenceReport) -> String {
    let mut s = String::from("layer_id,rf,epoch,divergence\n");
    for l in &report.layers {
        for &(epoch, v) in &l.points {
            s.push_str(&format!("{},{},{epoch},{v:.11e}\n", l.layer_id, l.rf));
        }
    }
    s
}

fn range_bounds(r: &RfRange) -> (String, String) {
    match r.bounds {
        Some((lo, hi)) => (lo.to_string(), hi.to_string()),
        None => (String::new(), String::new()),
    }
}

fn binned_csv(report: &DivergenceReport, ranges: &[RfRange], binning: Binning) -> Result<String, Failure> {
    let mut s = String::new();
    match binning {
        Binning::Converged => {
            s.push_str("range,lo,hi,layers,mean\n");
            let finals = report.final_values();
            for (r, mean) in bin_by_rf(&finals, ranges)? {
                let (lo, hi) = range_bounds(&r);
                let n = finals.iter().filter(|(rf, _)| r.contains(*rf)).count();
                s.push_str(&format!("{},{lo},{hi},{n},{}\n", r.label, fmt_opt(mean)));
            }
        }
        Binning::PerEpoch => {
            s.push_str("epoch,range,lo,hi,mean\n");
            for (r, series) in report.binned_per_epoch(ranges)? {
                let (lo, hi) = range_bounds(&r);
                for (epoch, mean) in series {
                    s.push_str(&format!("{epoch},{},{lo},{hi},{}\n", r.label, fmt_opt(mean)));
                }
            }
        }
    }
    Ok(s)
}

/// One chart per range: every layer in the range as its own line.
fn range_charts(report: &DivergenceReport, ranges: &[RfRange], title: &str, dir: &Path, stem: &str) -> CmdResult {
    for r in ranges {
        let series: Vec<Series> = report
            .layers
            .iter()
            .filter(|l| r.contains(l.rf))
            .map(|l| Series {
                name: format!("layer {} (rf {})", l.layer_id, l.rf),
                points: l.points.iter().map(|&(e, v)| (e as f64, v)).collect(),
            })
            .collect();
        let chart = line_chart(&format!("{title}, RF {}", r.label), "epoch", "divergence", &series);
        write(&dir.join(format!("{stem}_rf_{}.svg", range_slug(r))), chart)?;
    }
    Ok(())
}

fn cmd_analyze(path: &Path, out: &Path, ranges: Option<&str>, binning: Binning) -> CmdResult {
    let ranges = parse_ranges(ranges)?;
    let traj = import_trajectory(path)?;
    let report = mu_sigma_divergence(&traj)?;
    mkdir(out)?;
    write(&out.join("divergence.csv"), report_csv(&report))?;
    write(&out.join("divergence_binned.csv"), binned_csv(&report, &ranges, binning)?)?;
    range_charts(&report, &ranges, "D(mu || sigma)", out, "divergence")?;
    println!("{} layers, {} ranges written to {}", report.layers.len(), ranges.len(), out.display());
    Ok(())
}

fn cmd_compare(a: &Path, b: &Path, which: WhichArg, out: &Path, ranges: Option<&str>) -> CmdResult {
    let ranges = parse_ranges(ranges)?;
    let ta = import_trajectory(a)?;
    let tb = import_trajectory(b)?;
    let picks = match which {
        WhichArg::Mu => vec![Which::Mu],
        WhichArg::Sigma => vec![Which::Sigma],
        WhichArg::Both => vec![Which::Mu, Which::Sigma],
    };
    let reports = picks.iter().map(|&w| Ok((w, trajectory_divergence(&ta, &tb, w)?))).collect::<Result<Vec<_>, Failure>>()?;
    mkdir(out)?;
    for (w, report) in reports {
        let stem = format!("compare_{}", w.name());
        write(&out.join(format!("{stem}.csv")), report_csv(&report))?;
        write(&out.join(format!("{stem}_binned.csv")), binned_csv(&report, &ranges, Binning::Converged)?)?;
        let series: Vec<Series> = ranges
            .iter()
            .map(|r| {
                let points = report
                    .layers
                    .iter()
                    .filter(|l| r.contains(l.rf))
                    .filter_map(|l| l.final_value().map(|v| (l.layer_id as f64, v)))
                    .collect();
                Series { name: r.label.clone(), points }
            })
            .filter(|s| !s.points.is_empty() && s.name != "ALL")
            .collect();
        let chart = line_chart(&format!("cross-run divergence of lambda_{}", w.name()), "layer", "divergence", &series);
        write(&out.join(format!("{stem}.svg")), chart)?;
        let max = report.final_values().iter().map(|v| v.1).fold(0.0, f64::max);
        println!("{stem}: {} layers, max final divergence {max:.6e}", report.layers.len());
    }
    Ok(())
}

fn cmd_gradcheck(module: &str, fault: Option<&str>) -> CmdResult {
    let suite = Suite::parse(module)?;
    let reports = run_suite(suite, fault)?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.report.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:12} {:26} worst rel err {:.3e} ({} coords, {} skipped)",
            r.module, r.op, r.report.max_rel_err, r.report.checked, r.report.skipped
        );
        if !r.report.passed() {
            failed.push(format!("{} (rel err {:.3e})", r.op, r.report.max_rel_err));
        }
    }
    if failed.is_empty() {
        println!("{} ops within tolerance", reports.len());
        Ok(())
    } else {
        Err(Failure { code: EXIT_CHECK, message: format!("gradient check failed: {}", failed.join(", ")) })
    }
}

/// One row of the subset ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub omega: Omega,
    pub final_metrics: EpochMetrics,
    /// Mean final ratios per canonical slot (IN, LN, BN).
    pub mean_mu: [f64; 3],
    pub mean_sigma: [f64; 3],
}

pub fn ablation_subsets() -> Vec<Omega> {
    ["ln,bn", "in,bn", "in,ln"].iter().map(|s| Omega::parse(s).expect("static subset")).collect()
}

/// Trains once per two-member subset; each run lands in `out_dir/omega_<a>_<b>`.
pub fn run_ablation(base: &ExperimentConfig, quiet: bool) -> Result<Vec<AblationRow>, Failure> {
    let mut rows = Vec::new();
    for omega in ablation_subsets() {
        let mut cfg = base.clone();
        cfg.omega = omega.clone();
        cfg.out_dir = base.out_dir.join(format!("omega_{}", omega.label().replace(',', "_")));
        let mut progress = Progress { quiet, label: format!("omega {}", omega.label()) };
        let out = trainer::train_observed(&cfg, &mut progress)?;
        write_run_outputs(&cfg, &out)?;
        let last = out.trajectory.last_epoch().unwrap_or(0);
        let recs = out.trajectory.at_epoch(last);
        let mut mean_mu = [0.0; 3];
        let mut mean_sigma = [0.0; 3];
        for r in &recs {
            for k in 0..3 {
                mean_mu[k] += r.lambda_mu[k] / recs.len() as f64;
                mean_sigma[k] += r.lambda_sigma[k] / recs.len() as f64;
            }
        }
        let final_metrics =
            *out.metrics.last().ok_or_else(|| Failure { code: EXIT_CONFIG, message: "no epochs were run".into() })?;
        rows.push(AblationRow { omega, final_metrics, mean_mu, mean_sigma });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> (String, String) {
    let mut csv = String::from("omega,train_loss,train_acc,test_loss,test_acc,mu_in,mu_ln,mu_bn,sigma_in,sigma_ln,sigma_bn\n");
    let mut md = String::from(
        "| omega | train acc | test acc | mean lambda_mu (in/ln/bn) | mean lambda_sigma (in/ln/bn) |\n|---|---|---|---|---|\n",
    );
    for r in rows {
        let m = &r.final_metrics;
        let ratios = |v: &[f64; 3]| v.iter().map(|x| format!("{x:.11e}")).collect::<Vec<_>>().join(",");
        csv.push_str(&format!(
            "\"{}\",{:.11e},{:.11e},{},{},{},{}\n",
            r.omega.label(),
            m.train_loss,
            m.train_acc,
            fmt_opt(m.test_loss),
            fmt_opt(m.test_acc),
            ratios(&r.mean_mu),
            ratios(&r.mean_sigma)
        ));
        let short = |v: &[f64; 3]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" / ");
        md.push_str(&format!(
            "| {{{}}} | {:.2}% | {} | {} | {} |\n",
            r.omega.label(),
            100.0 * m.train_acc,
            m.test_acc.map_or("-".into(), |a| format!("{:.2}%", 100.0 * a)),
            short(&r.mean_mu),
            short(&r.mean_sigma)
        ));
    }
    (csv, md)
}

fn cmd_ablate(config: &Path, out: Option<PathBuf>, quiet: bool) -> CmdResult {
    let cfg = load_config(config, out)?;
    if !cfg.norm.is_switchable() {
        return Err(Failure { code: EXIT_CONFIG, message: "ablation needs norm = sn or sn_tied".into() });
    }
    let rows = run_ablation(&cfg, quiet)?;
    let (csv, md) = ablation_table(&rows);
    mkdir(&cfg.out_dir)?;
    write(&cfg.out_dir.join("ablation.csv"), csv)?;
    write(&cfg.out_dir.join("ablation.md"), &md)?;
    print!("{md}");
    Ok(())
}
