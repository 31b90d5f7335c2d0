//! The `proto-ood` command-line front end.
//!
//! Every subcommand resolves one [`RunConfig`] (defaults, then the `--config`
//! TOML file, then `--set key=value` overrides, then dedicated flags) and
//! writes it as `resolved_config.toml` next to its outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::datasets::{
    generate_synthetic, load_split, save_detection_dump, save_split, SplitRole, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, save_metrics_report, score_split, source_of, Protocol};
use crate::numerics::{cosine_rows, COSINE_EPS};
use crate::proto_head::{ModelState, OodDecisionConfig};
use crate::trainer::{load_checkpoint, save_checkpoint, train, Ablation, TrainConfig};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const CHECKPOINT_FILE: &str = "model.pockpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TRAIN_SUMMARY: &str = "train_summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding the three `.posplit` files.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Everything a run needs, fully resolved before any work starts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synthetic: SyntheticConfig,
    pub train: TrainConfig,
    pub decision: OodDecisionConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Loads `file` (if any) over the defaults and applies `key=value`
    /// overrides, where keys are dotted paths such as `train.epochs`.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
            set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.train.validate()?;
        self.decision.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    fn write_beside(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join(RESOLVED_CONFIG), &self.to_toml())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Usage(format!("empty key in --set {key:?}")))?;
    let mut cursor = table;
    for part in parts {
        cursor = cursor
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("--set {key}: {part} is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Parser)]
#[command(
    name = "proto-ood",
    version,
    about = "Prototype-based OOD scoring: synthetic data, training, evaluation"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for both data generation and training.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Override any config key, e.g. `--set train.epochs=30`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    A,
    B,
    Both,
}

impl ProtocolArg {
    fn protocols(self) -> Vec<Protocol> {
        match self {
            ProtocolArg::A => vec![Protocol::A],
            ProtocolArg::B => vec![Protocol::B],
            ProtocolArg::Both => vec![Protocol::A, Protocol::B],
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train, ID-eval and OOD-eval splits.
    Synth,
    /// Train a model on `<data>/train.posplit`.
    Train {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// full, no-neg or no-con-no-neg.
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
    },
    /// Compute FPR95 and AUROC for a checkpoint.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// ID evaluation split (default `<data_dir>/id_eval.posplit`).
        #[arg(long, value_name = "PATH")]
        id: Option<PathBuf>,
        /// OOD evaluation split (default `<data_dir>/ood_eval.posplit`).
        #[arg(long, value_name = "PATH")]
        ood: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        protocol: ProtocolArg,
        #[arg(long, value_name = "F")]
        gamma: Option<f64>,
    },
    /// Write a detection dump with the energy of every record.
    Score {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        split: PathBuf,
        #[arg(long, value_name = "F")]
        gamma: Option<f64>,
    },
    /// Summarise the prototype bank of a checkpoint.
    Inspect {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses the process arguments, runs the subcommand and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = RunConfig::resolve(cli.common.config.as_deref(), &cli.common.set)?;
    if let Some(seed) = cli.common.seed {
        cfg.synthetic.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.common.out {
        cfg.paths.out_dir = out.clone();
    }
    match &cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Train { data, ablation } => {
            if let Some(d) = data {
                cfg.paths.data_dir = d.clone();
            }
            if let Some(a) = ablation {
                cfg.train.ablation = *a;
            }
            cmd_train(&cfg)
        }
        Command::Eval {
            checkpoint,
            id,
            ood,
            protocol,
            gamma,
        } => {
            apply_gamma(&mut cfg, *gamma)?;
            let id = id
                .clone()
                .unwrap_or_else(|| cfg.paths.data_dir.join(SplitRole::IdEval.file_name()));
            let ood = ood
                .clone()
                .unwrap_or_else(|| cfg.paths.data_dir.join(SplitRole::OodEval.file_name()));
            cmd_eval(
                &cfg,
                checkpoint,
                &id,
                &ood,
                &protocol.protocols(),
                gamma.is_some(),
            )
        }
        Command::Score {
            checkpoint,
            split,
            gamma,
        } => {
            apply_gamma(&mut cfg, *gamma)?;
            cmd_score(&cfg, checkpoint, split, gamma.is_some())
        }
        Command::Inspect { checkpoint } => cmd_inspect(&cfg, checkpoint, cli.common.out.is_some()),
    }
}

fn apply_gamma(cfg: &mut RunConfig, gamma: Option<f64>) -> Result<()> {
    if let Some(g) = gamma {
        cfg.decision.gamma = g;
        cfg.decision.validate()?;
    }
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let data = generate_synthetic(&cfg.synthetic)?;
    let out = &cfg.paths.out_dir;
    for split in [&data.train, &data.id_eval, &data.ood_eval] {
        save_split(split, out.join(split.role.file_name()))?;
        println!("{}: {} records", split.role, split.len());
    }
    cfg.write_beside(out)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let split = load_split(cfg.paths.data_dir.join(SplitRole::Train.file_name()))?;
    let (mut state, mut report) = train(&split, &cfg.train)?;
    state.decision = cfg.decision;
    let out = &cfg.paths.out_dir;
    let ckpt = out.join(CHECKPOINT_FILE);
    save_checkpoint(&state, &ckpt)?;
    report.checkpoint = Some(ckpt.clone());
    write_text(&out.join(TRAIN_LOG), &report.log_lines())?;
    write_text(&out.join(TRAIN_SUMMARY), &report.summary_json())?;
    cfg.write_beside(out)?;
    if let Some(last) = report.epochs.last() {
        println!(
            "trained {} epochs in {:.1}s, final loss {:.4}, checkpoint {}",
            report.epochs.len(),
            report.wall_clock_seconds,
            last.total,
            ckpt.display()
        );
    }
    Ok(())
}

/// The checkpoint's own decision rule unless `--gamma` overrode it.
fn load_model(cfg: &RunConfig, checkpoint: &Path, gamma_override: bool) -> Result<ModelState> {
    let mut state = load_checkpoint(checkpoint)?;
    if gamma_override {
        state.decision.gamma = cfg.decision.gamma;
    }
    Ok(state)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    id: &Path,
    ood: &Path,
    protocols: &[Protocol],
    gamma_override: bool,
) -> Result<()> {
    let state = load_model(cfg, checkpoint, gamma_override)?;
    let id_split = load_split(id)?;
    let ood_split = load_split(ood)?;
    let out = &cfg.paths.out_dir;
    for &protocol in protocols {
        let result = evaluate(&state, &id_split, &ood_split, protocol)?;
        for w in &result.warnings {
            eprintln!("warning: {w}");
        }
        let r = result.report;
        let path = out.join(format!(
            "metrics_{}.pometrics",
            protocol.as_str().to_lowercase()
        ));
        save_metrics_report(&r, &path)?;
        println!(
            "protocol {}: fpr95 {:.4} auroc {:.4} threshold {:.4} (n_id {}, n_ood {})",
            r.protocol, r.fpr95, r.auroc, r.threshold, r.n_id, r.n_ood
        );
    }
    cfg.write_beside(out)
}

pub fn cmd_score(
    cfg: &RunConfig,
    checkpoint: &Path,
    split_path: &Path,
    gamma_override: bool,
) -> Result<()> {
    let state = load_model(cfg, checkpoint, gamma_override)?;
    let split = load_split(split_path)?;
    let groups = score_split(&state, &split, source_of(split.role))?;
    let out = &cfg.paths.out_dir;
    let path = out.join(format!("{}.podump", split.role));
    save_detection_dump(&groups, &path)?;
    println!(
        "{}: scored {} records from {} images",
        path.display(),
        split.len(),
        groups.len()
    );
    cfg.write_beside(out)
}

/// Prints the summary; with `write` it is also saved to the output directory.
pub fn cmd_inspect(cfg: &RunConfig, checkpoint: &Path, write: bool) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let summary = inspect_summary(&state)?;
    print!("{summary}");
    if write {
        write_text(&cfg.paths.out_dir.join("inspect.txt"), &summary)?;
        cfg.write_beside(&cfg.paths.out_dir)?;
    }
    Ok(())
}

/// Prototype norms, seen flags and the pairwise cosine table.
pub fn inspect_summary(state: &ModelState) -> Result<String> {
    let bank = &state.bank;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "prototypes: {} x {} (alpha {}, {} seen)",
        bank.categories(),
        bank.dim(),
        bank.alpha(),
        bank.seen_count()
    );
    for (c, (norm, seen)) in bank.norms().iter().zip(bank.seen()).enumerate() {
        let _ = writeln!(
            out,
            "  category {c}: seen {} norm {norm:.6}",
            u8::from(*seen)
        );
    }
    let cos = cosine_rows(bank.prototypes(), bank.prototypes(), COSINE_EPS)?;
    out.push_str("pairwise cosine:\n");
    for row in cos.row_iter() {
        out.push_str(" ");
        for v in row {
            let _ = write!(out, " {v:>9.6}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proto_head::ModelConfig;

    #[test]
    fn overrides_use_dotted_keys() {
        let cfg = RunConfig::resolve(
            None,
            &[
                "train.epochs=30".into(),
                "synthetic.t=3".into(),
                "decision.reduction=max".into(),
            ],
        );
        // "max" is an alias accepted by FromStr but not by the serde name.
        assert!(cfg.is_err());
        let cfg =
            RunConfig::resolve(None, &["train.epochs=30".into(), "synthetic.t=3".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.synthetic.t, 3);
    }

    #[test]
    fn bad_override_syntax_is_a_usage_error() {
        let err = RunConfig::resolve(None, &["train.epochs".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = RunConfig::resolve(None, &["train.bogus=1".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn untrained_inspect_is_all_zero() {
        let state =
            ModelState::new(ModelConfig::default(), OodDecisionConfig::default(), 0).unwrap();
        let s = inspect_summary(&state).unwrap();
        assert!(s.contains("0 seen"));
        assert_eq!(s.matches("norm 0.000000").count(), 5);
    }

    #[test]
    fn cosine_table_is_symmetric_with_unit_diagonal() {
        let mut state = ModelState::new(
            ModelConfig {
                t: 3,
                h: 4,
                d: 2,
                ..Default::default()
            },
            OodDecisionConfig::default(),
            0,
        )
        .unwrap();
        let r = crate::numerics::Matrix::from_rows(&[[1.0, 0.5], [-0.3, 2.0], [0.7, 0.7]]).unwrap();
        state.bank.update(&r, &[0, 1, 2]).unwrap();
        let s = inspect_summary(&state).unwrap();
        let table: Vec<Vec<f64>> = s
            .lines()
            .skip_while(|l| !l.starts_with("pairwise"))
            .skip(1)
            .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
            .collect();
        for i in 0..3 {
            assert_eq!(table[i][i], 1.0);
            for j in 0..3 {
                assert_eq!(table[i][j], table[j][i]);
            }
        }
    }
}
