use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use eiprec::channel::io::write_matrix;
use eiprec::channel::{corrupt, gen_channel, CorruptionMode, CorruptionModel, SystemDims};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn eiprec(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eiprec"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("EIPREC_SEED")
        .env_remove("EIPREC_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &["--set", "users=4", "--set", "antennas=16"];

fn with(extra: &[&'static str]) -> Vec<&'static str> {
    SMALL.iter().copied().chain(extra.iter().copied()).collect()
}

#[test]
fn spectra_emits_density_columns() {
    let dir = tempfile::tempdir().unwrap();
    let o = eiprec(&[&["spectra"][..], &with(&["--set", "spectrum_samples=2"])].concat(), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("spectrum_check.csv")).unwrap();
    assert!(csv.contains("# seed = 0"));
    assert!(csv.contains("# users = 4"));
    assert!(csv.contains("bin_center,empirical_density,analytic_density,analytic_density_at_center"));
    let rows = csv.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 51);
    let js: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("spectrum_check.json")).unwrap()).unwrap();
    assert_eq!(js["config"]["users"], 4);
    assert!(js["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
    assert!(dir.path().join("spectrum_check.timing.json").exists());
}

#[test]
fn outputs_are_byte_identical_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = with(&["--set", "eta=0.3", "--csi", "perfect,ei_cleaned", "--precoder", "zf,wfq", "--bits", "0,2", "--trials", "8", "--set", "symbols_per_trial=10", "--set", "snr_db=[0, 10]"]);
    let oa = eiprec(&[&["ber", "--threads", "1"][..], &args].concat(), a.path());
    let ob = eiprec(&[&["ber", "--threads", "3"][..], &args].concat(), b.path());
    assert!(oa.status.success() && ob.status.success(), "{}", stderr(&oa));
    for f in ["ber_vs_snr.csv", "ber_vs_snr.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.path().join("ber_vs_snr.csv")).unwrap();
    assert!(csv.contains("snr_db,eta,antennas,users,precoder,csi_mode,bits,"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 2 * 2 * 2);
}

#[test]
fn estimate_eta_writes_cdf() {
    let dir = tempfile::tempdir().unwrap();
    let o = eiprec(&[&["estimate-eta"][..], &with(&["--set", "eta=0.5", "--trials", "10"])].concat(), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("eta_cdf.csv")).unwrap();
    let cdf: Vec<f64> = csv
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
        .collect();
    assert_eq!(cdf.len(), 101);
    assert!(cdf.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn seed_flag_beats_env_and_env_beats_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "users = 4\nantennas = 16\nseed = 1\n").unwrap();
    let run = |env: Option<&str>, flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_eiprec"));
        c.args(["spectra", "--dry-run", "--config"]).arg(&cfg).env_remove("EIPREC_SEED");
        if let Some(e) = env {
            c.env("EIPREC_SEED", e);
        }
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        String::from_utf8(c.output().unwrap().stdout).unwrap()
    };
    assert!(run(None, None).contains("seed = 1\n"));
    assert!(run(Some("7"), None).contains("seed = 7\n"));
    assert!(run(Some("7"), Some("9")).contains("seed = 9\n"));
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = eiprec(&[&["sweep", "--dry-run"][..], SMALL].concat(), &out);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("plan: ber_vs_eta"));
    assert!(!out.exists());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = eiprec(&[&["ber"][..], &with(&["--set", "eta=0.3x"])].concat(), dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("eta"), "{}", stderr(&o));
    let o = eiprec(&[&["ber"][..], &with(&["--set", "colour=3"])].concat(), dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"));
    let o = eiprec(&["ber", "--config", "/nonexistent.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = eiprec(&["spectra", "--set", "antennas=16"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("users"));
}

#[test]
fn clean_csi_input_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let dims = SystemDims::new(20, 128).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let h = gen_channel(dims, &mut r);
    let model = CorruptionModel::new(0.5, CorruptionMode::Additive, 1.0).unwrap();
    let x = corrupt(&h, &model, &mut r);
    let input = dir.path().join("obs.bin");
    write_matrix(&mut fs::File::create(&input).unwrap(), &x.h).unwrap();
    let o = eiprec(
        &["clean-csi", "--input", input.to_str().unwrap(), "--set", "users=20", "--set", "antennas=128"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let cleaned = eiprec::channel::io::read_matrix(&mut fs::File::open(dir.path().join("cleaned.bin")).unwrap()).unwrap();
    assert_eq!(cleaned.shape(), (20, 128));
    let err = |m: &eiprec::linalg::CMatrix| (m - &h.h).norm_squared();
    assert!(err(&cleaned) < err(&x.h));
    let js: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("clean_csi.json")).unwrap()).unwrap();
    let eta_hat = js["estimate"]["eta_hat"].as_f64().unwrap();
    assert!((eta_hat - 0.5).abs() < 0.1, "{eta_hat}");
}

#[test]
fn corrupt_input_is_numerical_or_config_failure() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.bin");
    fs::write(&input, b"not a matrix").unwrap();
    let o = eiprec(&["clean-csi", "--input", input.to_str().unwrap(), "--set", "users=4", "--set", "antennas=16"], dir.path());
    assert!(!o.status.success());
    assert!(matches!(o.status.code(), Some(1) | Some(2)));
}
