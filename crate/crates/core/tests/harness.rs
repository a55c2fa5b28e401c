//! End-to-end behavior of the sampling harness on the tree fixture.

use mgflow::flow::{integrate, FnField};
use mgflow::harness::config::{ConditionMode, ExperimentConfig, FieldSpec, Overrides};
use mgflow::harness::run::{reference_set, target_mixture, trajectory_input, write_sample_output};
use mgflow::harness::toy::{outward_fraction, toy_run, toy_run_with};
use mgflow::harness::{check, run_sample, run_sweep};
use mgflow::{Error, ExecPolicy, GaussianMixture, MetricReport, SampleSet};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tree2d.toml");

fn small(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(FIXTURE, seed);
    cfg.n_trajectories = 512;
    cfg.metrics.n_reference = 512;
    cfg.record_trajectories = 2;
    cfg.promote_top = 0;
    cfg
}

#[test]
fn empty_batch_is_an_error() {
    let mut cfg = small(1);
    cfg.n_trajectories = 0;
    assert!(matches!(run_sample(&cfg, ExecPolicy::Parallel), Err(Error::EmptySet(_))));
}

#[test]
fn sample_output_is_byte_identical_across_runs_and_policies() {
    let cfg = small(3);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (dir, policy) in dirs.iter().zip([ExecPolicy::Parallel, ExecPolicy::Sequential]) {
        write_sample_output(&run_sample(&cfg, policy).unwrap(), dir.path()).unwrap();
    }
    for name in ["samples.csv", "trajectory_0.csv", "trajectory_1.csv"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name} differs");
    }
}

#[test]
fn momentum_shares_the_noise_batch_but_moves_endpoints() {
    let base = small(5);
    let mut mg = base.clone();
    mg.apply(&Overrides { alpha: Some(0.6), ..Default::default() }).unwrap();
    let a = run_sample(&base, ExecPolicy::Parallel).unwrap();
    let b = run_sample(&mg, ExecPolicy::Parallel).unwrap();
    for (ra, rb) in a.trajectories.iter().zip(&b.trajectories) {
        assert_eq!(ra.steps[0].z, rb.steps[0].z);
        assert_ne!(ra.endpoint, rb.endpoint);
    }
    assert_eq!(a.samples.labels(), b.samples.labels());
}

#[test]
fn degenerate_sweep_equals_direct_sample_plus_metrics() {
    let mut cfg = small(7);
    cfg.guidance.alpha = 0.4;
    let sweep = run_sweep(&cfg, ExecPolicy::Parallel).unwrap();
    assert_eq!(sweep.rows.len(), 1);
    let gmm = cfg.load_mixture().unwrap();
    let reference =
        reference_set(&target_mixture(&cfg, &gmm).unwrap(), cfg.seed, 0, 512, ExecPolicy::Parallel).unwrap();
    let direct = run_sample(&cfg, ExecPolicy::Parallel).unwrap();
    let expected = MetricReport::compute(&reference, &direct.samples, 3, 0.2, ExecPolicy::Parallel).unwrap();
    assert_eq!(sweep.rows[0].report, Ok(expected));
    assert_eq!(sweep.rows[0].evaluations, 512 * 16);
}

#[test]
fn beta_is_inert_at_zero_alpha_and_plain_euler_matches() {
    let mut cfg = small(11);
    cfg.field = FieldSpec::Smoothed { epsilon: 0.1 };
    cfg.sweep.alpha = Some(vec![0.0, 0.4]);
    cfg.sweep.beta = Some(vec![0.0, 0.4, 0.8]);
    let sweep = run_sweep(&cfg, ExecPolicy::Parallel).unwrap();
    assert_eq!(sweep.rows.len(), 6);
    let zero: Vec<_> = sweep.rows.iter().filter(|r| r.alpha == 0.0).collect();
    assert_eq!(zero.len(), 3);
    assert!(zero.iter().all(|r| r.report == zero[0].report));
    let moving: Vec<_> = sweep.rows.iter().filter(|r| r.alpha > 0.0).collect();
    assert_ne!(moving[0].report, moving[2].report);

    // the same column from Euler alone
    let gmm = cfg.load_mixture().unwrap();
    let field = mgflow::SmoothedField::new(&gmm, 0.1).unwrap();
    let grid = cfg.grid.build().unwrap();
    let mut coords = Vec::new();
    for i in 0..cfg.n_trajectories {
        let (c, z0) = trajectory_input(&cfg, &gmm, i);
        coords.extend(integrate(&field, &grid, &z0, c).unwrap().endpoint);
    }
    let euler = SampleSet::from_flat(2, coords, None, "euler").unwrap();
    let reference = reference_set(&gmm, cfg.seed, 0, 512, ExecPolicy::Sequential).unwrap();
    let expected = MetricReport::compute(&reference, &euler, 3, 0.2, ExecPolicy::Sequential).unwrap();
    assert_eq!(zero[0].report, Ok(expected));
}

#[test]
fn failing_cells_are_recorded_in_row() {
    let mut cfg = small(13);
    cfg.n_trajectories = 3; // k = 3 needs at least 4 points
    cfg.sweep.alpha = Some(vec![0.0, 0.5]);
    cfg.promote_top = 2;
    let sweep = run_sweep(&cfg, ExecPolicy::Parallel).unwrap();
    assert_eq!(sweep.rows.len(), 2);
    assert!(sweep.rows.iter().all(|r| r.report.as_ref().is_err_and(|e| e.contains("invalid argument"))));
    assert!(sweep.promoted.is_empty());
    let mut csv = Vec::new();
    mgflow::harness::SweepResult::write_csv(&sweep.rows, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == 13));
}

#[test]
fn promotion_rescores_the_best_cells_at_four_times_size() {
    let mut cfg = small(17);
    cfg.n_trajectories = 128;
    cfg.metrics.n_reference = 128;
    cfg.sweep.alpha = Some(vec![0.0, 0.5, 1.0]);
    cfg.promote_top = 2;
    let sweep = run_sweep(&cfg, ExecPolicy::Parallel).unwrap();
    assert_eq!(sweep.promoted.len(), 2);
    let best = sweep.rows.iter().map(|r| r.report.as_ref().unwrap().frechet).fold(f64::INFINITY, f64::min);
    let first = sweep.rows.iter().find(|r| r.report.as_ref().unwrap().frechet == best).unwrap();
    assert_eq!(sweep.promoted[0].alpha, first.alpha);
    let m = sweep.promoted[0].report.as_ref().unwrap();
    assert_eq!((m.n_real, m.n_fake), (512, 512));
}

#[test]
fn class_condition_compares_against_that_class() {
    let mut cfg = small(19);
    cfg.condition = ConditionMode::Class;
    cfg.class = Some(1);
    let out = run_sample(&cfg, ExecPolicy::Parallel).unwrap();
    assert!(out.samples.labels().unwrap().iter().all(|&c| c == 1));
    // class 1 lives in the lower-left quadrant
    let mean_x: f64 = out.samples.points().map(|p| p[0] + p[1]).sum::<f64>() / out.samples.len() as f64;
    assert!(mean_x < -0.5, "{mean_x}");
}

#[test]
fn toy_baseline_equals_momentum_at_zero_alpha() {
    let mut cfg = small(23);
    cfg.toy.n_trajectories = 16;
    cfg.toy.lattice = 5;
    let run = toy_run(&cfg, ExecPolicy::Parallel).unwrap();
    assert_eq!(run.baseline, run.momentum);
    assert_eq!(run.arrows.len(), 25);
    assert_eq!(run.step_index, 8);
}

#[test]
fn toy_extrapolation_vanishes_on_constant_field() {
    let mut cfg = small(29);
    cfg.guidance.alpha = 0.8;
    cfg.toy.lattice = 4;
    let gmm = cfg.load_mixture().unwrap();
    let field = FnField::new(2, |_: &[f64], _, _| vec![0.3, -1.2]);
    for step in 1..16 {
        cfg.toy.step_index = Some(step);
        let run = toy_run_with(&cfg, &gmm, &field, ExecPolicy::Sequential).unwrap();
        assert!(run.arrows.iter().all(|a| a.g == [0.0, 0.0]), "step {step}");
    }
}

#[test]
fn mid_trajectory_extrapolation_points_away_from_modes() {
    let mut cfg = small(31);
    cfg.guidance.alpha = 0.6;
    cfg.guidance.beta = 0.8;
    cfg.toy.lattice = 41;
    let gmm = cfg.load_mixture().unwrap();
    let run = toy_run(&cfg, ExecPolicy::Parallel).unwrap();
    let (fraction, near) = outward_fraction(&run.arrows, &gmm, run.t).unwrap();
    assert!(near >= 30, "only {near} arrows near a mode");
    assert!(fraction > 0.5, "outward fraction {fraction} over {near}");
}

#[test]
fn toy_rejects_other_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("line.toml");
    std::fs::write(
        &path,
        "version = 1\ndim = 1\nn_classes = 1\n[[components]]\nweight = 1.0\nmean = [0.0]\ncov = [[1.0]]\nclass = 0\n",
    )
    .unwrap();
    let cfg = ExperimentConfig::new(&path, 1);
    assert!(matches!(toy_run(&cfg, ExecPolicy::Parallel), Err(Error::UnsupportedDimension { got: 1, expected: 2 })));
}

#[test]
fn toy_panels_are_written() {
    let mut cfg = small(37);
    cfg.guidance.alpha = 0.5;
    cfg.toy.n_trajectories = 8;
    cfg.toy.lattice = 6;
    let dir = tempfile::tempdir().unwrap();
    let files = mgflow::harness::emit_toy_panels(&cfg, dir.path(), ExecPolicy::Parallel).unwrap();
    assert_eq!(files.len(), 5);
    for f in &files[..4] {
        let s = std::fs::read_to_string(f).unwrap();
        assert!(s.starts_with("<svg") && s.contains("viewBox=\"0 0 800 800\""));
    }
    let quiver = std::fs::read_to_string(dir.path().join("quiver.csv")).unwrap();
    assert_eq!(quiver.lines().count(), 37);
}

#[test]
fn check_passes_on_the_fixture() {
    let cfg = ExperimentConfig::new(FIXTURE, 1);
    let report = check(&cfg, ExecPolicy::Parallel);
    assert!(report.passed(), "{}", report.render());
}

#[test]
fn check_names_a_corrupted_mixture() {
    let text = std::fs::read_to_string(FIXTURE).unwrap();
    let corrupted = text.replacen("weight = 0.0625", "weight = 0.0", 1).replacen("weight = 0.0625", "weight = 0.0", 1);
    let gmm: Result<GaussianMixture, _> = GaussianMixture::from_toml_str(&corrupted);
    assert!(gmm.is_err(), "weights summing to 0.875 must not load");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, text.replace("weight = 0.0625", "weight = 0.05625")).unwrap();
    let cfg = ExperimentConfig::new(&path, 1);
    let report = check(&cfg, ExecPolicy::Parallel);
    assert!(!report.passed());
    let failed: Vec<_> = report.items.iter().filter(|i| !i.passed).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].name, "mixture validation");
    assert!(failed[0].detail.contains("weight"), "{}", failed[0].detail);
}
