//! Exit codes, overrides and output files of the `mgflow` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tree2d.toml");

fn mgflow(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgflow"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, format!("seed = 2\nmixture = {FIXTURE:?}\n{body}")).unwrap();
    path
}

#[test]
fn sample_writes_samples_and_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n_trajectories = 64\nrecord_trajectories = 2\n");
    let out = dir.path().join("out");
    let o = mgflow(&["sample", "--alpha", "0.5"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let samples = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().next(), Some("x_0,x_1,class"));
    assert_eq!(samples.lines().count(), 65);
    let traj = std::fs::read_to_string(out.join("trajectory_1.csv")).unwrap();
    assert_eq!(traj.lines().count(), 17);
    assert!(!out.join("trajectory_2.csv").exists());
}

#[test]
fn overrides_collapse_sweep_axes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "n_trajectories = 64\npromote_top = 0\n[metrics]\nn_reference = 64\n[sweep]\nalpha = [0.0, 0.5]\nbeta = [0.2, 0.8]\n",
    );
    let out = dir.path().join("out");
    let o = mgflow(&["sweep", "--beta", "0.5", "--steps", "8"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let cols: Vec<&str> = r.split(',').collect();
        assert_eq!(cols[1].parse::<f64>().unwrap(), 0.5);
        assert_eq!(cols[3], "8");
        assert_eq!(cols[11], (64 * 8).to_string());
    }
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad_key = write_config(dir.path(), "n_trajectorys = 4\n");
    let o = mgflow(&["sample"], &bad_key, &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_trajectorys"));

    let cfg = write_config(dir.path(), "");
    assert_eq!(mgflow(&["sample", "--beta", "1.0"], &cfg, &out).status.code(), Some(1));
    assert_eq!(mgflow(&["sample"], &dir.path().join("missing.toml"), &out).status.code(), Some(1));

    let bad_rng = write_config(dir.path(), "rng = \"pcg64\"\n");
    assert_eq!(mgflow(&["check"], &bad_rng, &out).status.code(), Some(1));
}

#[test]
fn numeric_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nlr = 1e300\nsteps = 50\nbatch_size = 8\n");
    let o = mgflow(&["train"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn failed_checks_exit_3_and_name_the_failure() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(FIXTURE).unwrap().replace("weight = 0.0625", "weight = 0.05625");
    let mixture = dir.path().join("bad.toml");
    std::fs::write(&mixture, text).unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, format!("seed = 1\nmixture = {:?}\n", mixture)).unwrap();
    let out = dir.path().join("out");
    let o = mgflow(&["check"], &cfg, &out);
    assert_eq!(o.status.code(), Some(3));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL mixture validation")), "{stdout}");
    let csv = std::fs::read_to_string(out.join("check.csv")).unwrap();
    assert!(csv.contains("mixture validation"));
}

#[test]
fn train_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nsteps = 20\nbatch_size = 16\nhidden = 8\n");
    let out = dir.path().join("out");
    let o = mgflow(&["train", "--seed", "3"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = mgflow::mlp::Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert_eq!(ck.config.seed, 3);
    assert_eq!(ck.params.hidden(), 8);
    let loss = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 21);

    // the checkpoint drives a sampler
    let sampling = dir.path().join("mlp.toml");
    std::fs::write(
        &sampling,
        format!(
            "seed = 1\nmixture = {FIXTURE:?}\nn_trajectories = 16\n[field]\nkind = \"mlp\"\ncheckpoint = {:?}\n",
            out.join("checkpoint.json")
        ),
    )
    .unwrap();
    let o = mgflow(&["sample"], &sampling, &dir.path().join("mlp-out"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn toy_rejects_wrong_dimension_and_writes_panels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[guidance]\nalpha = 0.6\n[toy]\nlattice = 4\nn_trajectories = 4\n");
    let out = dir.path().join("out");
    let o = mgflow(&["toy"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["panel_baseline.svg", "panel_mg.svg", "panel_velocity.svg", "panel_xhat.svg", "quiver.csv"] {
        assert!(out.join(name).exists(), "{name}");
    }

    let line = dir.path().join("line.toml");
    std::fs::write(
        &line,
        "version = 1\ndim = 1\nn_classes = 1\n[[components]]\nweight = 1.0\nmean = [0.0]\ncov = [[1.0]]\nclass = 0\n",
    )
    .unwrap();
    let cfg = dir.path().join("line-cfg.toml");
    std::fs::write(&cfg, format!("seed = 1\nmixture = {line:?}\n")).unwrap();
    assert_eq!(mgflow(&["toy"], &cfg, &out).status.code(), Some(1));
}

#[test]
fn shipped_configs_parse() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    for name in ["sample", "sweep", "cfg_sweep", "train", "toy", "check", "mlp_sweep"] {
        let path = Path::new(dir).join(format!("{name}.toml"));
        mgflow::harness::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
