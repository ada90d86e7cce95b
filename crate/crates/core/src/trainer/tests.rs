use super::*;
use crate::enforcer::BudgetConfig;
use crate::env::EnvConfig;
use crate::policy::{AgentRecord, PolicyConfig};

fn tiny(env: &str, mode: RunMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_env(env).unwrap();
    cfg.mode = mode;
    cfg.policy = PolicyConfig {
        hidden: 16,
        msg_dim: 8,
        n_protos: 6,
        ..PolicyConfig::default()
    };
    cfg.train = TrainConfig {
        workers: 1,
        batch_steps: 40,
        mini_updates: 2,
        epochs: 3,
        checkpoint_every: 0,
        ..TrainConfig::desk()
    };
    cfg
}

fn params_for(cfg: &ExperimentConfig) -> PolicyParams<f64> {
    let spec = cfg.env.spec().unwrap();
    PolicyParams::new(
        cfg.effective_policy(),
        spec.obs_dim,
        spec.action_sizes[0],
        &mut rng::seeded(5),
    )
    .unwrap()
}

fn ctx<'a>(
    cfg: &'a ExperimentConfig,
    p: &'a PolicyParams<f64>,
    stats: &'a EpochCommStats,
    mode: SampleMode,
) -> RolloutContext<'a> {
    RolloutContext {
        params: p,
        env: &cfg.env,
        regime: regime_for(cfg.mode, &Curriculum::default()),
        budget: &cfg.budget,
        stats,
        mode,
        record_messages: false,
    }
}

#[test]
fn quota_gives_whole_episodes() {
    let cfg = tiny("tj-easy", RunMode::FixedProto);
    let p = params_for(&cfg);
    let stats = EpochCommStats::default();
    let trajs = collect_rollouts(&ctx(&cfg, &p, &stats, SampleMode::Train), 1, 40, 1, 0).unwrap();
    assert_eq!(trajs.len(), 2);
    assert!(trajs.iter().all(|t| t.steps() == 20));
    assert!(collect_rollouts(&ctx(&cfg, &p, &stats, SampleMode::Train), 0, 40, 1, 0).is_err());
}

#[test]
fn rollouts_are_reproducible() {
    let cfg = tiny("tj-easy", RunMode::GatedProto);
    let p = params_for(&cfg);
    let stats = EpochCommStats::default();
    for mode in [SampleMode::Greedy, SampleMode::Train] {
        let a = collect_rollouts(&ctx(&cfg, &p, &stats, mode), 2, 40, 9, 3).unwrap();
        let b = collect_rollouts(&ctx(&cfg, &p, &stats, mode), 2, 40, 9, 3).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn open_gate_delivers_every_step() {
    let cfg = tiny("tj-easy", RunMode::FixedCts);
    let p = params_for(&cfg);
    let stats = EpochCommStats::default();
    let trajs = collect_rollouts(&ctx(&cfg, &p, &stats, SampleMode::Train), 1, 100, 2, 0).unwrap();
    for rec in trajs
        .iter()
        .flat_map(|t| t.records.iter().flatten())
        .filter(|r| r.alive)
    {
        assert!(rec.delivered && rec.attempt && !rec.gate_learned);
    }
    assert_eq!(summarize(&trajs).c, 1.0);
}

#[test]
fn returns_examples() {
    assert_eq!(discounted_returns(&[1.0, 1.0, 1.0], 1.0), vec![3.0, 2.0, 1.0]);
    assert_eq!(discounted_returns(&[0.5, -1.0, 2.0], 0.0), vec![0.5, -1.0, 2.0]);
    assert_eq!(discounted_returns(&[0.0; 4], 0.9), vec![0.0; 4]);
}

#[test]
fn returns_reset_at_life_boundaries() {
    let rec = |alive, spawned, r: f64| AgentRecord {
        alive,
        spawned,
        env_reward: r,
        value: 0.5,
        ..Default::default()
    };
    // one slot: life A (t=0,1), dead (t=2), life B (t=3), life C (t=4)
    let records = vec![
        vec![rec(true, true, 1.0)],
        vec![rec(true, false, 2.0)],
        vec![rec(false, false, 0.0)],
        vec![rec(true, true, 4.0)],
        vec![rec(true, true, 8.0)],
    ];
    let out = compute_returns(&records, 1.0);
    let g: Vec<f64> = out.iter().map(|r| r[0].1).collect();
    assert_eq!(g, vec![3.0, 2.0, 0.0, 4.0, 8.0]);
    assert_eq!(out[0][0].0, 2.5);
    assert_eq!(out[2][0], (0.0, 0.0));
}

#[test]
fn reward_bookkeeping_and_fractions() {
    let mut cfg = tiny("tj-easy", RunMode::Enforcer);
    cfg.budget = crate::enforcer::BudgetConfig::with_budget(EnforcerMode::Hard, 0.2);
    let p = params_for(&cfg);
    let stats = EpochCommStats::default();
    let mut c = ctx(&cfg, &p, &stats, SampleMode::Train);
    c.regime = PhaseRegime {
        gate_open: false,
        enforcer: EnforcerMode::Hard,
    };
    let trajs = collect_rollouts(&c, 1, 200, 4, 0).unwrap();
    let (mut delivered, mut alive) = (0, 0);
    for t in &trajs {
        let env: f64 = t.records.iter().flatten().map(|r| r.env_reward).sum();
        let shaping: f64 = t.records.iter().flatten().map(|r| r.shaping).sum();
        let total: f64 = t.records.iter().flatten().map(|r| r.reward()).sum();
        assert!((env - t.env_reward).abs() < 1e-9);
        assert!((shaping - t.shaping).abs() < 1e-9);
        assert!((env + shaping - total).abs() < 1e-9);
        assert!(t.delivered as f64 <= 0.2 * t.alive_steps as f64 + 1e-9);
        for r in t.records.iter().flatten() {
            assert!(!r.delivered || (r.alive && r.attempt));
            if r.alive {
                assert!(r.action_log_prob.is_finite() && r.gate_log_prob.is_finite());
            }
        }
        delivered += t.records.iter().flatten().filter(|r| r.alive && r.delivered).count();
        alive += t.records.iter().flatten().filter(|r| r.alive).count();
    }
    let s = summarize(&trajs);
    assert_eq!(s.c, delivered as f64 / alive as f64);
    assert!(s.c <= s.c_star);
}

#[test]
fn update_clips_and_changes_params() {
    let cfg = tiny("tj-easy", RunMode::FixedProto);
    let mut p = params_for(&cfg);
    let before = p.clone();
    let stats = EpochCommStats::default();
    let trajs = collect_rollouts(&ctx(&cfg, &p, &stats, SampleMode::Train), 1, 60, 3, 0).unwrap();
    let mut opt = RmsProp::new(0.001);
    let upd = reinforce_update(&trajs, &mut p, &mut opt, &cfg.train, 1.0).unwrap();
    assert!(upd.loss.is_finite() && upd.grad_norm > 0.0);
    assert_ne!(p.named_params()[0].1.data(), before.named_params()[0].1.data());

    // post-clip norm never exceeds the threshold
    let mut q = before.clone();
    q.zero_grad();
    for t in q.params_mut() {
        for g in t.grad_mut().unwrap() {
            *g = 3.0;
        }
    }
    let mut ps = q.params_mut();
    clip_grad_norm(&mut ps, 0.5);
    assert!(crate::tensor::grad_norm(&ps) <= 0.5 + 1e-12);
}

#[test]
fn zero_epochs_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny("tj-easy", RunMode::FixedCts);
    cfg.train.epochs = 0;
    let out = run_training(&cfg, 1, Some(dir.path()), None).unwrap();
    assert!(out.metrics.is_empty());
    assert_eq!(out.checkpoint.epoch, 0);
    assert!(dir.path().join("checkpoint.json").exists());
    assert_eq!(std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap(), "");
}

#[test]
fn training_is_reproducible_and_resumable() {
    let cfg = tiny("tj-easy", RunMode::GatedProto);
    let a = run_training(&cfg, 7, None, None).unwrap();
    let b = run_training(&cfg, 7, None, None).unwrap();
    let strip = |m: &[EpochMetrics]| m.iter().map(|x| x.without_timing()).collect::<Vec<_>>();
    assert_eq!(strip(&a.metrics), strip(&b.metrics));
    assert_eq!(a.checkpoint.tensors, b.checkpoint.tensors);

    // two epochs, then one more from the checkpoint
    let mut short = cfg.clone();
    short.train.epochs = 2;
    let first = run_training(&short, 7, None, None).unwrap();
    let rest = run_training(&cfg, 7, None, Some(first.checkpoint)).unwrap();
    assert_eq!(rest.metrics.len(), 1);
    assert_eq!(rest.metrics[0].without_timing(), a.metrics[2].without_timing());
    assert_eq!(rest.checkpoint.tensors, a.checkpoint.tensors);
}

#[test]
fn checkpoint_round_trip_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("tj-easy", RunMode::FixedProto);
    let out = run_training(&cfg, 3, Some(dir.path()), None).unwrap();
    let loaded = Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let rep = evaluate(&loaded, 20, 0).unwrap();
    assert_eq!(rep.c, 1.0);
    assert_eq!(rep.off_bank_messages, 0);
    assert_eq!(rep.proto_usage.len(), 6);
    assert!(matches!(evaluate(&loaded, 0, 0), Err(Error::Evaluation(_))));
    let mut wrong = loaded.clone();
    wrong.config.env = EnvConfig::preset("pp-5x5").unwrap();
    assert!(evaluate(&wrong, 5, 0).is_err());
}

#[test]
fn predator_prey_trains() {
    let cfg = tiny("pp-5x5", RunMode::GatedCts);
    let out = run_training(&cfg, 1, None, None).unwrap();
    assert_eq!(out.metrics.len(), 3);
    assert!(out.metrics.iter().all(|m| m.loss.is_finite()));
}

#[test]
fn forked_warm_up_matches_a_full_enforcer_run() {
    let mut cfg = tiny("tj-easy", RunMode::Enforcer);
    cfg.train.epochs = 6;
    cfg.curriculum.window = 1;
    cfg.curriculum.reward_threshold = Some(-1e9);
    cfg.curriculum.min_comm = 0.0;
    cfg.budget = BudgetConfig::with_budget(EnforcerMode::Hard, 0.2);
    let full = run_training(&cfg, 3, None, None).unwrap();

    let mut warm = cfg.clone();
    warm.budget = BudgetConfig::with_budget(EnforcerMode::Soft, 0.5);
    warm.train.stop_at_phase = Some(CurriculumPhase::SoftEnforce);
    let prefix = run_training(&warm, 3, None, None).unwrap();
    assert_eq!(prefix.checkpoint.curriculum.phase, CurriculumPhase::SoftEnforce);
    let cut = prefix.metrics.len();
    assert!(cut < 6);

    let forked = fork_checkpoint(&prefix.checkpoint, &cfg).unwrap();
    assert_eq!(forked.curriculum.phase, CurriculumPhase::HardEnforce);
    let rest = run_training(&cfg, 3, None, Some(forked)).unwrap();
    let strip = |m: &[EpochMetrics]| m.iter().map(|x| x.without_timing()).collect::<Vec<_>>();
    assert_eq!(strip(&rest.metrics), strip(&full.metrics[cut..]));
    assert_eq!(rest.checkpoint.tensors, full.checkpoint.tensors);
    assert!(fork_checkpoint(&rest.checkpoint, &cfg).is_err());
}
