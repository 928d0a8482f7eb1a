//! Config resolution, experiment dispatch and deterministic output files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use eiprec::channel::io::{read_matrix, write_matrix};
use eiprec::error::{Error, Result};
use eiprec::eta::{default_order, estimate_eta, EstimatorConfig};
use eiprec::rie::{clean_channel, CleanSettings};
use eiprec::sim::{run_experiment, ExperimentKind, ExperimentResult, SimConfig};
use serde_json::{json, Map, Value};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("EIPREC_GIT_DESCRIBE"));

pub const SEED_ENV: &str = "EIPREC_SEED";
pub const THREADS_ENV: &str = "EIPREC_THREADS";

pub const SNR_NOTE: &str = "snr_db = 10*log10(P_total/sigma^2), P_total = 1, link channel entries of unit variance (CSI processing uses variance 1/A)";

#[derive(Debug, Parser)]
#[command(name = "eiprec", version = VERSION, about = "Eigen-inference CSI cleaning and quantized precoding experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Common {
    /// TOML file with flat experiment keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable. Values are parsed as TOML, falling
    /// back to a bare string.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, value_name = "DIR", default_value = "out", global = true)]
    pub out: PathBuf,
    #[arg(long, env = SEED_ENV, global = true)]
    pub seed: Option<u64>,
    #[arg(long, env = THREADS_ENV, global = true)]
    pub threads: Option<usize>,
    /// Print the resolved plan and exit.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[arg(long, global = true)]
    pub trials: Option<u64>,
    #[arg(long, global = true)]
    pub precoder: Option<String>,
    #[arg(long, global = true)]
    pub csi: Option<String>,
    #[arg(long, global = true)]
    pub bits: Option<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Eigenvalue histogram of the augmented channel against the analytic law.
    Spectra,
    /// Empirical CDF of the noise-level estimation error.
    EstimateEta,
    /// Cleaning MSE against antenna count, or clean one stored matrix.
    CleanCsi {
        /// Binary matrix file holding an observed channel to clean.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// BER against SNR.
    Ber,
    /// BER against the CSI noise level.
    Sweep,
}

impl Command {
    pub fn experiment(&self) -> ExperimentKind {
        match self {
            Command::Spectra => ExperimentKind::SpectrumCheck,
            Command::EstimateEta => ExperimentKind::EtaCdf,
            Command::CleanCsi { .. } => ExperimentKind::MseVsAntennas,
            Command::Ber => ExperimentKind::BerVsSnr,
            Command::Sweep => ExperimentKind::BerVsEta,
        }
    }
}

/// Parses `text` as a TOML value, or keeps it as a string.
fn parse_value(text: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {text}")) {
        Ok(mut t) => t.remove("v").expect("single key"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, kv: &str) -> Result<()> {
    let (k, v) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("override `{kv}` has an empty key")));
    }
    table.insert(k.to_string(), parse_value(v.trim()));
    Ok(())
}

/// Resolves file text plus `KEY=VALUE` overrides (applied in order) into a
/// validated configuration. Unknown keys and type mismatches are errors
/// that name the key.
pub fn parse_config(file: Option<&str>, overrides: &[String]) -> Result<SimConfig> {
    let mut table: toml::Table = match file {
        Some(text) => toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
        None => toml::Table::new(),
    };
    for kv in overrides {
        apply_override(&mut table, kv)?;
    }
    // Round-trip through text so errors carry the offending line.
    let merged = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    let cfg: SimConfig = toml::from_str(&merged).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl Common {
    /// Dedicated flags as overrides, applied after `--set`.
    fn flag_overrides(&self) -> Vec<String> {
        let mut out = self.set.clone();
        if let Some(s) = self.seed {
            out.push(format!("seed={s}"));
        }
        if let Some(t) = self.trials {
            out.push(format!("trials={t}"));
        }
        for (key, val) in [("precoder", &self.precoder), ("csi", &self.csi), ("bits", &self.bits)] {
            if let Some(v) = val {
                out.push(format!("{key}={}", list_literal(v)));
            }
        }
        out
    }

    pub fn resolve(&self) -> Result<SimConfig> {
        let text = match &self.config {
            Some(p) => Some(
                fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            ),
            None => None,
        };
        parse_config(text.as_deref(), &self.flag_overrides())
    }
}

/// `a,b` becomes a TOML list; numbers stay numbers.
fn list_literal(v: &str) -> String {
    let items: Vec<String> = v
        .split(',')
        .map(str::trim)
        .map(|s| {
            if s.parse::<f64>().is_ok() {
                s.to_string()
            } else {
                format!("\"{s}\"")
            }
        })
        .collect();
    if items.len() == 1 {
        items.into_iter().next().unwrap()
    } else {
        format!("[{}]", items.join(", "))
    }
}

pub fn config_toml(cfg: &SimConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

fn header_lines(cfg: &SimConfig, kind: &str) -> String {
    let mut s = format!("# experiment = \"{kind}\"\n# version = \"{VERSION}\"\n# seed = {}\n# {SNR_NOTE}\n", cfg.seed);
    for line in config_toml(cfg).lines() {
        s.push_str("# ");
        s.push_str(line);
        s.push('\n');
    }
    s
}

fn headline_json(res: &ExperimentResult) -> Value {
    let mut m = Map::new();
    for (k, v) in &res.headline {
        m.insert(k.clone(), json!(v));
    }
    Value::Object(m)
}

fn write_outputs(out: &Path, cfg: &SimConfig, res: &ExperimentResult) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let name = res.kind.name();
    let csv_path = out.join(format!("{name}.csv"));
    let mut buf = header_lines(cfg, name).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(&res.table.columns).map_err(csv_err)?;
        for row in &res.table.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush()?;
    }
    fs::write(&csv_path, buf)?;
    let summary = json!({
        "experiment": name,
        "version": VERSION,
        "seed": cfg.seed,
        "snr_definition": SNR_NOTE,
        "config": cfg,
        "config_toml": config_toml(cfg),
        "trials_run": res.aggregate.as_ref().map(|a| a.trials_run),
        "headline": headline_json(res),
    });
    let json_path = out.join(format!("{name}.json"));
    fs::write(&json_path, serde_json::to_string_pretty(&summary).map_err(json_err)? + "\n")?;
    Ok(vec![csv_path, json_path])
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Wall time lives in its own file so the data outputs stay byte-identical.
fn write_timing(out: &Path, name: &str, seconds: f64) -> Result<()> {
    let v = json!({ "experiment": name, "version": VERSION, "wall_time_s": seconds });
    fs::write(out.join(format!("{name}.timing.json")), v.to_string() + "\n")?;
    Ok(())
}

fn write_partial(out: &Path, name: &str, err: &Error) {
    if let Error::Trial {
        trial,
        partial: Some(agg),
        source,
    } = err
    {
        let v = json!({
            "experiment": name,
            "version": VERSION,
            "failed_trial": trial,
            "error": source.to_string(),
            "partial": agg,
        });
        if fs::create_dir_all(out).is_ok() {
            let _ = fs::write(out.join(format!("{name}.partial.json")), v.to_string() + "\n");
        }
    }
}

fn plan(cmd: &Command, cfg: &SimConfig, common: &Common) -> String {
    let kind = cmd.experiment();
    let mut s = String::new();
    let grid = cfg.grid().len();
    match cmd {
        Command::CleanCsi { input: Some(p) } => {
            s += &format!("plan: clean matrix {} -> {}\n", p.display(), common.out.join("cleaned.bin").display());
        }
        _ => {
            s += &format!("plan: {} -> {}\n", kind.name(), common.out.display());
            match kind {
                ExperimentKind::BerVsSnr | ExperimentKind::BerVsEta => {
                    s += &format!("grid points: {grid}, trials <= {}\n", cfg.trials);
                }
                ExperimentKind::SpectrumCheck => s += &format!("samples: {}\n", cfg.spectrum_samples),
                _ => s += &format!("trials: {}\n", cfg.trials),
            }
        }
    }
    s += &format!("threads: {}\n", common.threads.map_or("auto".to_string(), |t| t.to_string()));
    s += &config_toml(cfg);
    s
}

fn clean_file(input: &Path, cfg: &SimConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut f = fs::File::open(input)?;
    let x = read_matrix(&mut f)?;
    let dims = eiprec::channel::SystemDims::new(x.nrows(), x.ncols())?;
    let est_cfg = EstimatorConfig {
        order: cfg.estimator_order.unwrap_or_else(|| default_order(dims)),
        mode: cfg.theory,
        data_mode: cfg.corruption,
        c: cfg.c,
        ..Default::default()
    };
    let est = estimate_eta(&x, dims.q(), &est_cfg)?;
    let settings = CleanSettings {
        data_mode: cfg.corruption,
        c: cfg.c,
        variant: cfg.shrink,
    };
    let cleaned = clean_channel(&x, est.eta_hat, &settings)?;
    fs::create_dir_all(out)?;
    let bin = out.join("cleaned.bin");
    let mut w = fs::File::create(&bin)?;
    write_matrix(&mut w, &cleaned)?;
    w.flush()?;
    let summary = json!({
        "experiment": "clean_csi",
        "version": VERSION,
        "input": input.display().to_string(),
        "users": dims.users,
        "antennas": dims.antennas,
        "estimate": est,
        "config": cfg,
    });
    let js = out.join("clean_csi.json");
    fs::write(&js, serde_json::to_string_pretty(&summary).map_err(json_err)? + "\n")?;
    Ok(vec![bin, js])
}

/// Runs one command; returns the process exit code.
pub fn run(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    match run_inner(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            write_partial(&cli.common.out, cli.command.experiment().name(), &e);
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        2
    } else {
        1
    }
}

fn run_inner(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let common = &cli.common;
    let cfg = common.resolve()?;
    if common.threads == Some(0) {
        return Err(Error::Config("`threads` must be at least 1".into()));
    }
    if common.dry_run {
        write!(stdout, "{}", plan(&cli.command, &cfg, common))?;
        return Ok(());
    }
    let start = Instant::now();
    let (name, files) = match &cli.command {
        Command::CleanCsi { input: Some(p) } => ("clean_csi", clean_file(p, &cfg, &common.out)?),
        cmd => {
            let kind = cmd.experiment();
            let res = run_experiment(kind, &cfg, common.threads)?;
            for (k, v) in &res.headline {
                writeln!(stdout, "{k} = {v}")?;
            }
            (kind.name(), write_outputs(&common.out, &cfg, &res)?)
        }
    };
    write_timing(&common.out, name, start.elapsed().as_secs_f64())?;
    for f in files {
        writeln!(stdout, "wrote {}", f.display())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use eiprec::precoder::PrecoderKind;
    use eiprec::sim::CsiMode;

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg = parse_config(Some("users = 4\nantennas = 16\n"), &[]).unwrap();
        assert_eq!(cfg, SimConfig::new(4, 16));
    }

    #[test]
    fn override_beats_file() {
        let cfg = parse_config(Some("users = 4\nantennas = 16\neta = 0.5\n"), &["eta=0.3".into()]).unwrap();
        assert_eq!(cfg.eta, vec![0.3]);
    }

    #[test]
    fn scalar_or_list() {
        let cfg = parse_config(
            Some("users = 4\nantennas = [16, 32]\nsnr_db = [0, 5.5]\ncsi = \"perfect\"\n"),
            &["precoder=[\"zf\", \"wfq\"]".into()],
        )
        .unwrap();
        assert_eq!(cfg.antennas, vec![16, 32]);
        assert_eq!(cfg.snr_db, vec![0.0, 5.5]);
        assert_eq!(cfg.csi, vec![CsiMode::Perfect]);
        assert_eq!(cfg.precoder, vec![PrecoderKind::Zf, PrecoderKind::Wfq]);
    }

    #[test]
    fn errors_name_the_key() {
        let e = parse_config(Some("users = 4\nantennas = 16\n"), &["eta=0.3x".into()]).unwrap_err();
        assert!(e.is_config() && e.to_string().contains("eta"), "{e}");
        let e = parse_config(Some("users = 4\nantennas = 16\nbogus = 1\n"), &[]).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = parse_config(Some("antennas = 16\n"), &[]).unwrap_err();
        assert!(e.to_string().contains("users"), "{e}");
        assert!(parse_config(None, &["users".into()]).is_err());
    }

    #[test]
    fn flag_lists() {
        assert_eq!(list_literal("zf,wfq"), "[\"zf\", \"wfq\"]");
        assert_eq!(list_literal("4"), "4");
        assert_eq!(list_literal("1, 2"), "[1, 2]");
    }

    #[test]
    fn config_echo_round_trips() {
        let mut cfg = SimConfig::new(8, 64);
        cfg.eta = vec![0.1, 0.5];
        let again = parse_config(Some(&config_toml(&cfg)), &[]).unwrap();
        assert_eq!(cfg, again);
    }
}
