use std::path::Path;

use pgan_core::checkpoint::{self, Checkpoint};
use pgan_core::config::Config;
use pgan_core::nn::{self, HasParams};
use pgan_core::percdisc::DiscMode;
use pgan_core::trainer::{self, Domains, Runner, TrainState};
use pgan_core::Error;

const TOY: &str = include_str!("../../../configs/toy.toml");

fn tiny(extra: &[&str]) -> Config {
    let mut o: Vec<String> = [
        "data.toy_count=100",
        "data.resolution=16",
        "generator.downsamplings=1",
        "generator.res_blocks=1",
        "generator.width=4",
        "discriminator.mode=\"random_trunk\"",
        "discriminator.combiner_widths=[4, 4]",
        "discriminator.patch_levels=[2]",
        "discriminator.head_width=8",
        "train.pretrain_steps=3",
        "train.steps=6",
        "train.log_every=1",
        "train.checkpoint_every=3",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    Config::from_toml_with_overrides(TOY, &o).unwrap()
}

fn fresh(cfg: &Config) -> (TrainState, Domains) {
    let trunk = trainer::resolve_trunk(cfg).unwrap();
    (TrainState::new(cfg, &trunk).unwrap(), Domains::load(cfg).unwrap())
}

fn generator_bytes(state: &TrainState) -> Vec<(String, Vec<f32>)> {
    state
        .generator_params()
        .into_iter()
        .map(|(n, p)| (n, p.value().flatten_all().unwrap().to_vec1::<f32>().unwrap()))
        .collect()
}

fn run(cfg: &Config, dir: &Path) -> TrainState {
    trainer::run_training(cfg, dir, None, false).unwrap()
}

#[test]
fn every_shipped_config_parses() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            Config::load(&path, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 4);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = tiny(&[]);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full = run(&cfg, a.path());
    // step 6 = 3 pretraining + 3 adversarial, the mid-run checkpoint
    let mid = a.path().join("checkpoints/step_000006.safetensors");
    assert!(mid.is_file());
    let resumed = trainer::run_training(&cfg, b.path(), Some(&mid), false).unwrap();
    assert_eq!(resumed.step, full.step);
    assert_eq!(generator_bytes(&resumed), generator_bytes(&full));
}

#[test]
fn checkpoint_round_trip_restores_state() {
    let cfg = tiny(&[]);
    let dir = tempfile::tempdir().unwrap();
    let state = run(&cfg, dir.path());
    let path = checkpoint::resolve_checkpoint_path(dir.path()).unwrap();
    let back = checkpoint::load_checkpoint(&path, &cfg, false).unwrap();
    assert_eq!(back.step, state.step);
    assert_eq!(generator_bytes(&back), generator_bytes(&state));
    assert_eq!(back.trunk_checksum().unwrap(), state.trunk_checksum().unwrap());
    assert_eq!(back.running, state.running);
    let gens = checkpoint::load_generators(&path).unwrap();
    assert_eq!(gens.step, state.step);
    assert!(gens.g_yx.is_some());
    let meta = Checkpoint::read(&path).unwrap().meta;
    assert_eq!(meta.config_hash, cfg.hash());
}

#[test]
fn changed_config_needs_explicit_override() {
    let cfg = tiny(&[]);
    let dir = tempfile::tempdir().unwrap();
    run(&cfg, dir.path());
    let path = checkpoint::resolve_checkpoint_path(dir.path()).unwrap();
    let other = tiny(&["train.steps=9"]);
    assert!(matches!(
        checkpoint::load_checkpoint(&path, &other, false),
        Err(Error::Checkpoint(_))
    ));
    assert!(checkpoint::load_checkpoint(&path, &other, true).is_ok());
}

#[test]
fn trunk_moves_only_in_plain_mode() {
    for (mode, name, moves) in [
        (DiscMode::RandomTrunk, "random_trunk", false),
        (DiscMode::Plain, "plain", true),
    ] {
        let cfg = tiny(&[&format!("discriminator.mode=\"{name}\"")]);
        let (mut state, data) = fresh(&cfg);
        assert_eq!(state.d_y.mode, mode);
        let before = nn::params_checksum(&state.d_y.trunk_params()).unwrap();
        for _ in 0..3 {
            trainer::train_step(&mut state, &data).unwrap();
        }
        let after = nn::params_checksum(&state.d_y.trunk_params()).unwrap();
        assert_eq!(before != after, moves, "{name}");
    }
}

#[test]
fn updates_alternate_between_players() {
    let cfg = tiny(&[]);
    let (state, data) = fresh(&cfg);
    let mut rng = trainer::batch_rng(0, 0);
    let bx = data.x.next_batch(2, &mut rng).unwrap();
    let by = data.y.next_batch(2, &mut rng).unwrap();
    let g_vars: Vec<_> = state.generator_params().into_iter().filter_map(|(_, p)| p.var().cloned()).collect();
    let d_vars: Vec<_> = state.discriminator_params().into_iter().filter_map(|(_, p)| p.var().cloned()).collect();
    assert!(!g_vars.is_empty() && !d_vars.is_empty());

    let (d_grads, _) = trainer::discriminator_grads(&state, &bx, &by).unwrap();
    assert!(g_vars.iter().all(|v| d_grads.get(v.as_tensor()).is_none()));
    assert!(d_vars.iter().all(|v| d_grads.get(v.as_tensor()).is_some()));

    let mut report = pgan_core::objectives::LossReport::new(cfg.lambda_id(), cfg.losses.lambda_cyc);
    let g_grads = trainer::generator_grads(&state, &bx, &by, &mut report).unwrap();
    assert!(d_vars.iter().all(|v| g_grads.get(v.as_tensor()).is_none()));
    assert!(g_vars.iter().all(|v| g_grads.get(v.as_tensor()).is_some()));
    for key in ["adv_G", "identity", "cycle_fwd", "cycle_bwd"] {
        assert!(report.get(key).is_some(), "{key}");
    }
}

#[test]
fn single_mode_has_one_generator_and_no_cycle_terms() {
    let cfg = tiny(&["train.mode=\"single\""]);
    let (mut state, data) = fresh(&cfg);
    assert!(state.g_yx.is_none() && state.d_x.is_none());
    let report = trainer::train_step(&mut state, &data).unwrap();
    assert!(report.get("cycle_fwd").is_none());
    assert!(report.get("identity").is_some());
    assert_eq!(state.generators().len(), 1);
    assert!(state.g_xy.named_params().iter().all(|(n, _)| !n.starts_with("g_yx")));
}

#[test]
fn equal_seeds_give_equal_logs_and_weights() {
    let cfg = tiny(&[]);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = run(&cfg, a.path());
    let sb = run(&cfg, b.path());
    let la = std::fs::read_to_string(a.path().join("log.jsonl")).unwrap();
    let lb = std::fs::read_to_string(b.path().join("log.jsonl")).unwrap();
    assert_eq!(la.lines().count(), 9);
    assert_eq!(la, lb);
    assert_eq!(generator_bytes(&sa), generator_bytes(&sb));
}

#[test]
fn runner_appends_to_existing_log() {
    let cfg = tiny(&["train.steps=2", "train.checkpoint_every=0"]);
    let dir = tempfile::tempdir().unwrap();
    let (state, data) = fresh(&cfg);
    let mut r = Runner::new(state, data, dir.path()).unwrap();
    r.run().unwrap();
    assert!(r.dir.latest().unwrap().unwrap().is_file());
    let first = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(first.lines().count(), 5);
}
