//! `moelab` command line. Every subcommand takes an optional JSON lab config
//! plus flag overrides, prints JSON (or a table for `report`) on stdout, and on
//! failure prints `{"error": kind, "message": ...}` on stderr with a nonzero
//! exit status.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use moelab::convert::{certify, convert_model, probe_batches};
use moelab::harness::{dense_from_config, moe_from_config, train, LabConfig};
use moelab::model::{load_checkpoint, save_checkpoint, CheckpointMeta};
use moelab::precision::audit_entry;
use moelab::telemetry::{
    build_report, estimate_memory, full_expert_components, read_csv, round2, MemoryComponent,
    PrecisionPlan, Report,
};
use moelab::{Error, Result};

const DEFAULT_LOG_DIR: &str = "runs";

#[derive(Parser)]
#[command(
    name = "moelab",
    version,
    about = "Dense-to-MoE conversion and routing-health lab"
)]
struct Cli {
    /// Lab config (JSON); defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dense base model (random init plus configured pretraining).
    InitDense {
        #[arg(long)]
        out: PathBuf,
        /// Overrides `model.dense_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert a dense checkpoint into an MoE checkpoint.
    Convert {
        /// Dense checkpoint; built from the config when omitted.
        #[arg(long)]
        dense: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Certify that an MoE checkpoint reproduces its dense source.
    Verify {
        #[arg(long)]
        dense: PathBuf,
        #[arg(long)]
        moe: PathBuf,
        #[arg(long, default_value_t = 16)]
        probes: usize,
        /// Tokens per probe batch.
        #[arg(long, default_value_t = 32)]
        tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train an MoE stack and write the run directory.
    Train {
        /// Starting checkpoint; converted from the config when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Base directory for runs (the MOELAB_LOG_DIR variable wins).
        #[arg(long, default_value = DEFAULT_LOG_DIR)]
        log_dir: PathBuf,
    },
    /// Flag parameter updates that bf16 storage would round away.
    AuditBf16 {
        /// JSON list of {name, magnitude, grad_norm, lr}.
        #[arg(long)]
        input: PathBuf,
    },
    /// Per-layer routing health and band summary of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Print the report JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Training-memory table; the reference full-expert setup by default.
    EstimateMemory {
        /// JSON {"plan": {...}, "components": [...]}.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
struct AuditRequest {
    #[serde(default)]
    name: String,
    magnitude: f64,
    grad_norm: f64,
    lr: f64,
}

#[derive(Deserialize)]
struct MemoryRequest {
    #[serde(default)]
    plan: PrecisionPlan,
    components: Vec<MemoryComponent>,
}

fn load_config(path: Option<&Path>) -> Result<LabConfig> {
    match path {
        Some(p) => LabConfig::load(p),
        None => Ok(LabConfig::default()),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn meta_for(cfg: &LabConfig, step: u64) -> CheckpointMeta {
    CheckpointMeta {
        precision: cfg.precision,
        seed: cfg.train.seed,
        step,
    }
}

fn run(cli: Cli) -> Result<Value> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::InitDense { out, seed } => {
            if let Some(s) = seed {
                cfg.model.dense_seed = s;
            }
            let dense = dense_from_config(&cfg)?;
            save_checkpoint(&out, &dense, &meta_for(&cfg, 0))?;
            Ok(json!({"checkpoint": out, "params": dense.param_count()}))
        }
        Command::Convert { dense, out } => {
            let dense = match dense {
                Some(d) => load_checkpoint(&d)?.0,
                None => dense_from_config(&cfg)?,
            };
            let moe = convert_model(&dense, &cfg.conversion_config())?;
            save_checkpoint(&out, &moe, &meta_for(&cfg, 0))?;
            Ok(json!({"checkpoint": out, "params": moe.param_count()}))
        }
        Command::Verify {
            dense,
            moe,
            probes,
            tokens,
            seed,
        } => {
            if probes == 0 || tokens == 0 {
                return Err(Error::Argument("probes and tokens must be positive".into()));
            }
            let (dense, _) = load_checkpoint(&dense)?;
            let (moe, _) = load_checkpoint(&moe)?;
            let batches = probe_batches(probes, tokens, dense.hidden_dim, seed);
            let cert = certify(&dense, &moe, &batches)?;
            // an exact match prints as the integer 0
            let dev = if cert.max_abs_dev == 0.0 {
                json!(0)
            } else {
                json!(cert.max_abs_dev)
            };
            Ok(json!({"max_abs_dev": dev, "verdict": cert.verdict}))
        }
        Command::Train {
            init,
            steps,
            seed,
            log_dir,
        } => {
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(n) = steps {
                cfg.train.steps = Some(n);
            }
            cfg.validate()?;
            let stack = match init {
                Some(p) => load_checkpoint(&p)?.0,
                None => moe_from_config(&cfg)?,
            };
            let dir = cfg.run_dir(&log_dir);
            let out = train(stack, &cfg, Some(&dir))?;
            let last = out.losses.last();
            Ok(json!({
                "run_dir": dir,
                "steps": out.losses.len(),
                "final_loss": last.map(|l| l.total),
                "skipped_steps": out.skipped_steps,
                "layers": out.report.layers.iter().map(|l| json!({
                    "layer": l.layer,
                    "minority_fraction": l.minority_fraction_counts,
                    "status": l.status,
                })).collect::<Vec<_>>(),
            }))
        }
        Command::AuditBf16 { input } => {
            let reqs: Vec<AuditRequest> = read_json(&input)?;
            if reqs.is_empty() {
                return Err(Error::Argument("no parameters to audit".into()));
            }
            let entries = reqs
                .iter()
                .map(|r| audit_entry(&r.name, r.magnitude, r.grad_norm, r.lr))
                .collect::<Result<Vec<_>>>()?;
            Ok(serde_json::to_value(entries)?)
        }
        Command::Report { run, json } => {
            let cfg = if cli.config.is_some() {
                cfg
            } else {
                let path = run.join("config.json");
                if path.exists() {
                    LabConfig::load(&path)?
                } else {
                    cfg
                }
            };
            let file = fs::File::open(run.join("utilization.csv"))?;
            let records = read_csv(BufReader::new(file))?;
            // similarity needs the model, so reuse what training recorded
            let saved: Option<Report> = match fs::read(run.join("report.json")) {
                Ok(bytes) => Some(serde_json::from_slice(&bytes)?),
                Err(_) => None,
            };
            let homog = saved.map(|r| r.homogenization).unwrap_or_default();
            let report = build_report(&records, &cfg.telemetry, homog)?;
            if json {
                Ok(serde_json::to_value(report)?)
            } else {
                print!("{}", render_report(&report));
                Ok(Value::Null)
            }
        }
        Command::EstimateMemory { input } => {
            let req = match input {
                Some(p) => read_json(&p)?,
                None => MemoryRequest {
                    plan: PrecisionPlan::default(),
                    components: full_expert_components(),
                },
            };
            let mut table = estimate_memory(&req.components, &req.plan)?;
            for r in &mut table.rows {
                for v in [
                    &mut r.compute_gb,
                    &mut r.master_gb,
                    &mut r.grads_gb,
                    &mut r.optimizer_gb,
                    &mut r.total_gb,
                ] {
                    *v = round2(*v);
                }
            }
            table.total_gb = round2(table.total_gb);
            Ok(serde_json::to_value(table)?)
        }
    }
}

fn status_label<T: serde::Serialize>(s: &T) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn render_report(r: &Report) -> String {
    let mut s = String::from("layer  minority(counts)  minority(mass)  std     status\n");
    for l in &r.layers {
        s += &format!(
            "{:>5}  {:>16.4}  {:>14.4}  {:.4}  {}\n",
            l.layer,
            l.minority_fraction_counts,
            l.minority_fraction_mass,
            l.std,
            status_label(&l.status)
        );
    }
    if let Some(b) = &r.bands {
        let range = |x: moelab::telemetry::LayerRange| format!("{}-{}", x.first, x.last);
        s += &format!(
            "bands (1-based): shallow {} -> {} deadlocked, mid {} -> {}, deep {} -> {}{}\n",
            range(b.bands.shallow),
            b.shallow_deadlocks,
            range(b.bands.mid),
            b.mid_deadlocks,
            range(b.bands.deep),
            b.deep_deadlocks,
            if b.u_shape { " (U-shaped)" } else { "" }
        );
    }
    for e in &r.rebounds {
        s += &format!(
            "{} in layer {}: dip from step {}, recovered at step {} (peak {:.4})\n",
            status_label(&e.kind),
            e.layer,
            e.dip_start,
            e.recovery_step,
            e.peak
        );
    }
    s
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!(
                "{}",
                json!({"error": "usage", "message": e.to_string().trim_end()})
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
