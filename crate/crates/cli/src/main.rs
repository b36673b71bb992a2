use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use asyncrl_core::detector::{scan_dir, DetectorConfig};
use asyncrl_core::klmath::{kl_study, EstimatorKind};
use asyncrl_core::quant::{
    calibrate, format_errors, golden_input, quantize_mxfp8, quantize_nvfp4_pt, verify_golden, write_golden,
    Calibration, GoldenFixture, QuantizedTensor,
};
use asyncrl_core::runner::{emit_report, read_csv, run_rl, RunConfig, RunPaths, Thresholds};
use asyncrl_core::sched::{pack, CostModel};
use asyncrl_core::sync::demo::{run_chain_demo, ChainDemoConfig};
use asyncrl_core::sync::{BlobStore, LocalDirStore, MemStore};
use asyncrl_core::Exec;

const MXFP8_GOLDEN: &[u8] = include_bytes!("../../core/fixtures/mxfp8_golden.bin");
const NVFP4_GOLDEN: &[u8] = include_bytes!("../../core/fixtures/nvfp4_pt_golden.bin");
const CALIBRATION: &str = include_str!("../../core/fixtures/quant_calibration.json");

#[derive(Parser)]
#[command(
    name = "asyncrl",
    version,
    about = "Desk-scale asynchronous RL post-training experiments"
)]
struct Cli {
    /// Run data-parallel loops sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// End-to-end RL run; writes metrics.csv, summary.json, logs and weights.
    RunRl {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Use the small CI configuration instead of the desk defaults.
        #[arg(long, conflicts_with = "config")]
        smoke: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Monte Carlo bias/variance table of the k1/k2/k3 KL estimators.
    KlStudy {
        #[arg(long, default_value_t = 1_000_000)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1,2,3")]
        deltas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verifies the golden MXFP8/NVFP4 fixtures and the error ordering.
    QuantCheck {
        /// Directory holding mxfp8_golden.bin, nvfp4_pt_golden.bin and
        /// quant_calibration.json; the built-in copies are used when omitted.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Write freshly generated fixtures to this directory instead.
        #[arg(long)]
        regenerate: Option<PathBuf>,
    },
    /// Packs sequence lengths (one JSON array per line) onto ranks.
    PackBench {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        ranks: usize,
        #[arg(long, default_value_t = u64::MAX)]
        budget: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Publishes a delta-compressed version chain with injected writer kills.
    SyncDemo {
        /// Store directory; an in-memory store is used when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        versions: u64,
        #[arg(long, default_value_t = 10)]
        kills: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Counts responses whose thinking blocks contain a prefix chain.
    DetectPrefixBug {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Summarizes a metrics file and checks thresholds from a run config.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(RunConfig::from_json(&text)?)
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns whether the command's checks passed.
fn run(cli: Cli) -> Result<bool> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    match cli.cmd {
        Cmd::RunRl {
            config,
            out,
            smoke,
            seed,
            max_steps,
        } => {
            let mut cfg = match (&config, smoke) {
                (Some(p), _) => load_config(p)?,
                (None, true) => RunConfig::smoke(),
                (None, false) => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if max_steps.is_some() {
                cfg.train.max_steps = max_steps;
            }
            if cli.sequential {
                cfg.train.exec = Exec::Sequential;
            }
            cfg.validate()?;
            let result = run_rl(&cfg, Some(&out))?;
            let summary = emit_report(&result.rows, &cfg.thresholds);
            eprintln!(
                "{} steps, {} ticks, {} hotloads, {} requeues in {:.1}s",
                result.steps, result.ticks, result.hotloads, result.requeues, result.seconds
            );
            print_json(&summary)?;
            for f in &summary.failures {
                eprintln!("threshold failed: {f}");
            }
            Ok(summary.passed())
        }
        Cmd::KlStudy { n, deltas, seed, out } => {
            if n < 2 {
                bail!("n must be at least 2");
            }
            let table = kl_study(&deltas, n, seed, exec);
            write_or_print(out.as_deref(), &table.to_csv())?;
            // the unbiased estimators should sit within 3 standard errors
            let ok = deltas.iter().all(|&d| {
                [EstimatorKind::K1, EstimatorKind::K3].iter().all(|&k| {
                    table
                        .row(d, k)
                        .is_some_and(|r| (r.mean - r.analytic_kl).abs() <= 3.0 * r.std_error)
                })
            });
            Ok(ok)
        }
        Cmd::QuantCheck { fixtures, regenerate } => {
            if let Some(dir) = regenerate {
                fs::create_dir_all(&dir)?;
                let input = golden_input();
                let mx = GoldenFixture {
                    tensor: QuantizedTensor::Mxfp8(quantize_mxfp8(&input)?),
                    input: input.clone(),
                };
                let nv = GoldenFixture {
                    tensor: QuantizedTensor::Nvfp4Pt(quantize_nvfp4_pt(&input)?),
                    input,
                };
                fs::write(dir.join("mxfp8_golden.bin"), write_golden(&mx))?;
                fs::write(dir.join("nvfp4_pt_golden.bin"), write_golden(&nv))?;
                let cal = calibrate(64, 0..64, 0.25)?;
                fs::write(
                    dir.join("quant_calibration.json"),
                    serde_json::to_string_pretty(&cal)? + "\n",
                )?;
                eprintln!("wrote fixtures to {}", dir.display());
                return Ok(true);
            }
            let (mx, nv, cal) = match &fixtures {
                Some(d) => (
                    fs::read(d.join("mxfp8_golden.bin"))?,
                    fs::read(d.join("nvfp4_pt_golden.bin"))?,
                    fs::read_to_string(d.join("quant_calibration.json"))?,
                ),
                None => (MXFP8_GOLDEN.to_vec(), NVFP4_GOLDEN.to_vec(), CALIBRATION.to_string()),
            };
            let cal: Calibration = serde_json::from_str(&cal)?;
            let reports = vec![verify_golden(&mx)?, verify_golden(&nv)?];
            let (mx_err, nv_err) = format_errors(cal.size, cal.seeds.0)?;
            let ordering = 0.0 < mx_err && mx_err < nv_err;
            let within = mx_err < cal.mxfp8_threshold && nv_err < cal.nvfp4_pt_threshold;
            let ok = reports.iter().all(|r| r.ok()) && ordering && within;
            print_json(&serde_json::json!({
                "fixtures": reports,
                "mxfp8_error": mx_err,
                "nvfp4_pt_error": nv_err,
                "ordering_exact_lt_mxfp8_lt_nvfp4": ordering,
                "within_calibrated_thresholds": within,
                "ok": ok,
            }))?;
            Ok(ok)
        }
        Cmd::PackBench {
            input,
            ranks,
            budget,
            out,
        } => {
            let f = fs::File::open(&input).with_context(|| format!("reading {}", input.display()))?;
            let model = CostModel::default();
            let mut lines = String::new();
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let lengths: Vec<u64> =
                    serde_json::from_str(&line).with_context(|| format!("line {}: expected a JSON array", i + 1))?;
                let plan = pack(&lengths, ranks, &model, budget)?;
                let row = serde_json::json!({
                    "line": i + 1,
                    "assignment": plan.assignment,
                    "loads": plan.loads,
                    "tokens": plan.tokens,
                    "max_load": plan.max_load(),
                    "imbalance": plan.imbalance(),
                });
                lines.push_str(&serde_json::to_string(&row)?);
                lines.push('\n');
            }
            write_or_print(out.as_deref(), &lines)?;
            Ok(true)
        }
        Cmd::SyncDemo {
            out,
            versions,
            kills,
            seed,
        } => {
            let store: Arc<dyn BlobStore> = match &out {
                Some(d) => Arc::new(LocalDirStore::new(d)?),
                None => Arc::new(MemStore::new()),
            };
            if out.is_some() && asyncrl_core::sync::read_manifest(store.as_ref())?.head().is_some() {
                bail!("store already holds a manifest; use an empty directory");
            }
            let cfg = ChainDemoConfig {
                versions,
                kills,
                seed,
                ..Default::default()
            };
            let report = run_chain_demo(store, &cfg)?;
            print_json(&report)?;
            Ok(report.ok() && report.identical_ratio < 0.01 && report.changed_ratio <= 0.10)
        }
        Cmd::DetectPrefixBug { dir } => {
            let report = scan_dir(&dir, &DetectorConfig::default(), exec)?;
            print_json(&report)?;
            Ok(true)
        }
        Cmd::Report { metrics, config, out } => {
            let bytes = fs::read(&metrics).with_context(|| format!("reading {}", metrics.display()))?;
            let rows = read_csv(&bytes)?;
            let thresholds = match &config {
                Some(p) => load_config(p)?.thresholds,
                None => {
                    // a run directory carries its own config
                    let sibling = RunPaths {
                        root: metrics.parent().unwrap_or(Path::new(".")).to_path_buf(),
                    }
                    .config();
                    if sibling.exists() {
                        load_config(&sibling)?.thresholds
                    } else {
                        Thresholds::default()
                    }
                }
            };
            let summary = emit_report(&rows, &thresholds);
            if let Some(p) = &out {
                fs::write(p, serde_json::to_vec_pretty(&summary)?)?;
            }
            print_json(&summary)?;
            for f in &summary.failures {
                eprintln!("threshold failed: {f}");
            }
            Ok(summary.passed())
        }
    }
}
