use awpo::config::RunConfig;
use awpo::dataset::{generate_source_video, FrameDataset};
use awpo::env::{GridConfig, Theme};
use awpo::metrics::{metrics_csv, METRICS_HEADER};
use awpo::nn::load_checkpoint;
use awpo::policy_eval::Estimator;
use awpo::train::{checkpoint_path, run_training};

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.total_steps = 768;
    c.eval_interval = 256;
    c.eval_episodes = 2;
    c.awpo.rollout_len = 256;
    c.awpo.minibatch = 32;
    c.awpo.policy_updates = 3;
    c.awpo.critic_updates = 3;
    c.awpo.inverse_updates = 3;
    c.awpo.buffer_capacity = 512;
    c.da.generator_steps = 2;
    c.da.n_critic = 2;
    c.da.batch_size = 16;
    c.checkpoint_interval = 2;
    c
}

fn source(theme: Theme) -> FrameDataset {
    generate_source_video(&GridConfig::default().with_theme(theme), 0.1, 200, 3)
        .unwrap()
        .dataset
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let idx = METRICS_HEADER.iter().position(|h| *h == name).unwrap();
    csv.lines().skip(1).map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn one_row_per_evaluation_point() {
    let out = run_training(&tiny(), None, None).unwrap();
    let steps: Vec<u64> = out.rows.iter().map(|r| r.env_steps).collect();
    assert_eq!(steps, vec![0, 256, 512, 768]);
    assert!(out.rows[0].train.is_none());
    let csv = metrics_csv(&out.rows);
    assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER.join(","));
    // No source data: the DA and inverse columns stay empty.
    assert!(column(&csv, "da_critic_estimate").iter().all(String::is_empty));
    assert!(column(&csv, "inv_action_accuracy").iter().all(String::is_empty));
    assert!(column(&csv, "wall_seconds").iter().all(|s| s == "0"));
    for r in &out.rows {
        assert!(r.eval_mean_reward.is_finite() && r.eval_std_reward == 0.0);
    }
}

#[test]
fn rows_stop_at_total_steps_when_it_is_not_a_rollout_multiple() {
    let mut c = tiny();
    c.total_steps = 600;
    c.eval_interval = 200;
    let out = run_training(&c, None, None).unwrap();
    let steps: Vec<u64> = out.rows.iter().map(|r| r.env_steps).collect();
    assert_eq!(steps, vec![0, 200, 400, 600]);
}

#[test]
fn zero_steps_writes_no_rows() {
    let mut c = tiny();
    c.total_steps = 0;
    let dir = tempfile::tempdir().unwrap();
    let out = run_training(&c, None, Some(dir.path())).unwrap();
    assert!(out.rows.is_empty());
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
}

#[test]
fn same_seed_same_bytes() {
    let a = metrics_csv(&run_training(&tiny(), None, None).unwrap().rows);
    let b = metrics_csv(&run_training(&tiny(), None, None).unwrap().rows);
    assert_eq!(a, b);
    let mut other = tiny();
    other.seed = 1;
    let c = metrics_csv(&run_training(&other, None, None).unwrap().rows);
    assert_ne!(a, c);
}

#[test]
fn pql_path_trains() {
    let mut c = tiny();
    c.awpo.estimator = Estimator::Pql;
    let out = run_training(&c, None, None).unwrap();
    assert_eq!(out.rows.len(), 4);
    let t = out.rows.last().unwrap().train.as_ref().unwrap();
    assert!(t.value_or_q_loss.is_finite() && t.policy_loss.is_finite());
}

#[test]
fn source_and_da_fill_their_columns() {
    let mut c = tiny();
    c.awpo.use_source = true;
    c.awpo.use_da = true;
    let ds = source(Theme::Thermal);
    let out = run_training(&c, Some(&ds), None).unwrap();
    let t = out.rows.last().unwrap().train.as_ref().unwrap();
    assert!(t.da_critic_estimate.unwrap().is_finite());
    let acc = t.inv_action_accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(t.inv_reward_mse.unwrap() >= 0.0);

    c.awpo.use_da = false;
    let out = run_training(&c, Some(&source(Theme::SourceVariant)), None).unwrap();
    let t = out.rows.last().unwrap().train.as_ref().unwrap();
    assert!(t.da_critic_estimate.is_none() && t.inv_action_accuracy.is_some());
}

#[test]
fn source_encoder_rate_zero_leaves_enc_s_untouched_without_da() {
    use awpo::nn::{ModelSet, Part};
    let mut c = tiny();
    c.awpo.use_source = true;
    c.awpo.source_encoder_lr_scale = 0.0;
    let out = run_training(&c, Some(&source(Theme::SourceVariant)), None).unwrap();
    let init = ModelSet::init(&c.arch, c.seed).unwrap();
    assert_eq!(out.models.net(Part::EncS).params, init.net(Part::EncS).params);
    assert_ne!(out.models.net(Part::EncT).params, init.net(Part::EncT).params);

    c.awpo.source_encoder_lr_scale = 0.5;
    let out = run_training(&c, Some(&source(Theme::SourceVariant)), None).unwrap();
    assert_ne!(out.models.net(Part::EncS).params, init.net(Part::EncS).params);
}

#[test]
fn missing_source_is_rejected() {
    let mut c = tiny();
    c.awpo.use_source = true;
    assert!(run_training(&c, None, None).is_err());
}

#[test]
fn checkpoints_land_on_interval_and_last_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_training(&tiny(), None, Some(dir.path())).unwrap();
    // Three iterations, interval two: after the second and the third.
    assert_eq!(out.checkpoints, vec![checkpoint_path(dir.path(), 2), checkpoint_path(dir.path(), 3)]);
    let ck = load_checkpoint(&out.checkpoints[1]).unwrap();
    assert_eq!(ck.iteration, 3);
    assert_eq!(ck.env_steps, 768);
    assert_eq!(ck.models, out.models);
    let bytes = std::fs::read(&out.checkpoints[1]).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let c = tiny();
    let again = RunConfig::from_json(&c.resolved_json()).unwrap();
    assert_eq!(again, c);
    let a = metrics_csv(&run_training(&c, None, None).unwrap().rows);
    let b = metrics_csv(&run_training(&again, None, None).unwrap().rows);
    assert_eq!(a, b);
}

#[test]
fn zero_temperature_is_a_config_error() {
    let err = RunConfig::from_json(r#"{"awpo":{"temperature":0.0}}"#).unwrap_err();
    assert!(err.to_string().contains("λ > 0"), "{err}");
}
