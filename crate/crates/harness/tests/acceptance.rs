//! One line per acceptance criterion, written to stdout even when the
//! harness captures test output.
//!
//! Criteria 1, 2, 3, 5, 8 and 9 always run. The training criteria are
//! opt-in: `R2A_ACCEPTANCE_TRAINING=1` runs 4 and 6, `R2A_ACCEPTANCE_LONG=1`
//! runs 7 (several CPU hours).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use gridroboman::{task_set, Action, BoardState, Color, ObsScale, Pos, Task, ALL_TASKS};
use r2a_core::agent::{AgentModel, Learner, RetrievalSet};
use r2a_core::batch::TransitionBatch;
use r2a_core::nn::{attention, batched_attention};
use r2a_core::retrieval::{select_topk, Ranking};
use r2a_core::{ParamId, Tape, Tensor};
use r2a_harness::ablate::{retrieval_batch_invariance, slot_content_invariance};
use r2a_harness::dataset::{Dataset, GeneratorInfo, RetrievalSource};
use r2a_harness::eval::{aggregate, random_policy, EvalSettings};
use r2a_harness::generate::generate_dataset;
use r2a_harness::metrics::MetricsRow;
use r2a_harness::train::Trainer;
use r2a_harness::ExperimentConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-3;
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_INSTANCES: usize = 1000;
const FUZZ_STEPS: usize = 100_000;
const SEEDS: [u64; 3] = [0, 1, 2];

fn report(n: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n}: {verdict} {detail}");
}

fn skipped(n: u32, var: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n}: NOT RUN (set {var}=1)");
}

fn enabled(var: &str) -> bool {
    std::env::var(var).is_ok_and(|v| v == "1")
}

fn config(overrides: &[&str]) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.apply_overrides(overrides).unwrap();
    c.validate().unwrap();
    c
}

const WIDTH8: &[&str] = &[
    "tasks=3",
    "q_width=8",
    "summary_hidden=8",
    "slot_dim=8",
    "key_dim=8",
    "value_dim=8",
    "n_retrieval=3",
    "k_traj=2",
    "k_states=4",
    "batch_size=6",
    "target_period=3",
];

fn scripted(tasks: &[Task], episodes: usize) -> Dataset {
    generate_dataset(tasks, episodes, &GeneratorInfo::Scripted { epsilon: 0.2 }, 0).unwrap()
}

// ---------------------------------------------------------------- 1

fn loss_parts(learner: &Learner, batch: &TransitionBatch, set: &RetrievalSet, seed: u64) -> (f64, f64) {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, b) = learner.loss(&mut tape, batch, set, &mut rng).unwrap();
    (b.td + learner.model.cfg.aux_coef * b.aux, b.kl)
}

fn is_gaussian_head(name: &str) -> bool {
    ["post_mu", "post_logvar", "prior_mu", "prior_logvar", "state_prior_mu", "state_prior_logvar"]
        .iter()
        .any(|h| name.ends_with(&format!(".{h}.weight")) || name.ends_with(&format!(".{h}.bias")))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// `(error with detached inputs held fixed, error against the undetached loss)`.
fn gradient_errors(cfg: &ExperimentConfig, ds: &Dataset, draw: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(7000 + draw);
    let mut learner = Learner::new(cfg.agent_config(), &mut rng).unwrap();
    for v in learner.online.values_mut() {
        for x in v.data_mut() {
            *x += rng.random_range(-0.05..0.05);
        }
    }
    for v in learner.target.values_mut() {
        *v = v.map(|x| x * 0.5 + 0.01);
    }
    let tasks = cfg.task_list().unwrap();
    let batch = ds.sample_training_batch(cfg.batch_size, Some(&tasks), &mut rng).unwrap();
    let mut set = RetrievalSet::new();
    for &t in &tasks {
        let b = ds
            .sample_retrieval_batch(cfg.n_retrieval, RetrievalSource::TaskFiltered(t), 5, &mut rng)
            .unwrap();
        set.insert(t.index() as u8, b);
    }
    let seed = rng.random();
    let mut tape = Tape::new();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (total, _) = learner.loss(&mut tape, &batch, &set, &mut r).unwrap();
    let grads = tape.backward(total).unwrap().for_store(&learner.online);

    let beta = cfg.beta;
    let (mut analytic, mut numeric, mut undetached) = (Vec::new(), Vec::new(), Vec::new());
    for p in 0..learner.online.len() {
        let n = learner.online.values()[p].numel();
        let picks: Vec<usize> = (0..2.min(n)).map(|_| rng.random_range(0..n)).collect();
        for j in picks {
            let orig = learner.online.values()[p].data()[j];
            learner.online.values_mut()[p].data_mut()[j] = orig + GRAD_EPS;
            let up = loss_parts(&learner, &batch, &set, seed);
            learner.online.values_mut()[p].data_mut()[j] = orig - GRAD_EPS;
            let down = loss_parts(&learner, &batch, &set, seed);
            learner.online.values_mut()[p].data_mut()[j] = orig;
            let d_main = (up.0 - down.0) / (2.0 * GRAD_EPS);
            let d_kl = beta * (up.1 - down.1) / (2.0 * GRAD_EPS);
            let head = is_gaussian_head(learner.online.name(ParamId(p)));
            analytic.push(grads[p].data()[j]);
            numeric.push(d_main + if head { d_kl } else { 0.0 });
            undetached.push(d_main + d_kl);
        }
    }
    (rel_err(&analytic, &numeric), rel_err(&analytic, &undetached))
}

#[test]
fn criterion_1_loss_gradient_matches_finite_differences() {
    let started = Instant::now();
    let cfg = config(WIDTH8);
    let ds = scripted(task_set(3), 6);
    let (mut worst, mut worst_raw) = (0.0f64, 0.0f64);
    for draw in 0..20 {
        let (e, raw) = gradient_errors(&cfg, &ds, draw);
        worst = worst.max(e);
        worst_raw = worst_raw.max(raw);
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst < GRAD_TOL && secs < 300.0;
    report(
        1,
        pass,
        &format!(
            "max relative error {worst:.2e} < {GRAD_TOL:.0e} over 20 draws, eps {GRAD_EPS:.0e}, width 8, {secs:.1}s; \
             treating the KL inputs as trainable instead gives {worst_raw:.2e}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn randv<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[allow(clippy::type_complexity)]
fn brute_force_select(
    logits: &[f64],
    n: usize,
    len: usize,
    returns: &[f64],
    kt: usize,
    ks: usize,
    ranking: Ranking,
) -> (Vec<usize>, Vec<(usize, usize)>, Vec<f64>) {
    let full = softmax(logits);
    let score = |i: usize| match ranking {
        Ranking::Learned => full[i * len..(i + 1) * len].iter().sum::<f64>(),
        Ranking::ByReturn => returns[i],
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score(b).partial_cmp(&score(a)).unwrap().then(a.cmp(&b)));
    let mut trajs = order[..kt].to_vec();
    trajs.sort();
    let mut states: Vec<(usize, usize)> = trajs.iter().flat_map(|&i| (0..len).map(move |j| (i, j))).collect();
    states.sort_by(|a, b| full[b.0 * len + b.1].partial_cmp(&full[a.0 * len + a.1]).unwrap().then(a.cmp(b)));
    let mut kept = states[..ks].to_vec();
    kept.sort();
    let mass: f64 = kept.iter().map(|&(i, j)| full[i * len + j]).sum();
    let w = kept.iter().map(|&(i, j)| full[i * len + j] / mass).collect();
    (trajs, kept, w)
}

fn topk_mismatches(rng: &mut ChaCha8Rng) -> usize {
    let mut bad = 0;
    for inst in 0..ORACLE_INSTANCES {
        let n = rng.random_range(1..12);
        let len = rng.random_range(1..8);
        let kt = rng.random_range(1..=n);
        let ks = rng.random_range(1..=kt * len);
        let ranking = if inst % 2 == 0 { Ranking::ByReturn } else { Ranking::Learned };
        let logits = randv(rng, n * len);
        let returns: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        let sel = select_topk(&logits, n, len, &returns, kt, ks, ranking).unwrap();
        let (t, s, w) = brute_force_select(&logits, n, len, &returns, kt, ks, ranking);
        let ok = sel.trajectories == t
            && sel.states == s
            && sel.weights.iter().zip(&w).all(|(a, b)| (a - b).abs() < ORACLE_TOL);
        bad += !ok as usize;
    }
    bad
}

fn attention_mismatches(rng: &mut ChaCha8Rng) -> usize {
    let mut bad = 0;
    for _ in 0..ORACLE_INSTANCES {
        let (nq, nk, d, dv) = (
            rng.random_range(1..5),
            rng.random_range(1..7),
            rng.random_range(1..6),
            rng.random_range(1..5),
        );
        let (q, k, v) = (randv(rng, nq * d), randv(rng, nk * d), randv(rng, nk * dv));
        let mut tape = Tape::new();
        let qv = tape.constant(Tensor::from_vec(vec![nq, d], q.clone()).unwrap());
        let kv = tape.constant(Tensor::from_vec(vec![nk, d], k.clone()).unwrap());
        let vv = tape.constant(Tensor::from_vec(vec![nk, dv], v.clone()).unwrap());
        let (out, weights) = attention(&mut tape, qv, kv, vv).unwrap();
        let mut ok = true;
        for a in 0..nq {
            let logits: Vec<f64> = (0..nk)
                .map(|b| (0..d).map(|c| q[a * d + c] * k[b * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let w = softmax(&logits);
            for b in 0..nk {
                ok &= (tape.value(weights).data()[a * nk + b] - w[b]).abs() < ORACLE_TOL;
            }
            for c in 0..dv {
                let o: f64 = (0..nk).map(|b| w[b] * v[b * dv + c]).sum();
                ok &= (tape.value(out).data()[a * dv + c] - o).abs() < ORACLE_TOL;
            }
        }
        bad += !ok as usize;
    }
    bad
}

fn multi_head_mismatches(rng: &mut ChaCha8Rng) -> usize {
    let mut bad = 0;
    for _ in 0..ORACLE_INSTANCES {
        let heads = rng.random_range(1..4);
        let (b, nq, nk) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..6));
        let (dh, dvh) = (rng.random_range(1..4), rng.random_range(1..4));
        let (d, dv) = (heads * dh, heads * dvh);
        let (q, k, v) = (randv(rng, b * nq * d), randv(rng, b * nk * d), randv(rng, b * nk * dv));
        let mut tape = Tape::new();
        let qv = tape.constant(Tensor::from_vec(vec![b, nq, d], q.clone()).unwrap());
        let kv = tape.constant(Tensor::from_vec(vec![b, nk, d], k.clone()).unwrap());
        let vv = tape.constant(Tensor::from_vec(vec![b, nk, dv], v.clone()).unwrap());
        let att = batched_attention(&mut tape, qv, kv, vv, heads).unwrap();
        let out = tape.value(att.output).data();
        let mut ok = true;
        for bb in 0..b {
            for h in 0..heads {
                for a in 0..nq {
                    let logits: Vec<f64> = (0..nk)
                        .map(|j| {
                            (0..dh)
                                .map(|c| q[(bb * nq + a) * d + h * dh + c] * k[(bb * nk + j) * d + h * dh + c])
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let w = softmax(&logits);
                    let got_w = tape.value(att.weights[h]).data();
                    for j in 0..nk {
                        ok &= (got_w[(bb * nq + a) * nk + j] - w[j]).abs() < ORACLE_TOL;
                    }
                    for c in 0..dvh {
                        let o: f64 = (0..nk).map(|j| w[j] * v[(bb * nk + j) * dv + h * dvh + c]).sum();
                        ok &= (out[(bb * nq + a) * dv + h * dvh + c] - o).abs() < ORACLE_TOL;
                    }
                }
            }
        }
        bad += !ok as usize;
    }
    bad
}

#[test]
fn criterion_2_selection_and_attention_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let topk = topk_mismatches(&mut rng);
    let single = attention_mismatches(&mut rng);
    let multi = multi_head_mismatches(&mut rng);
    let pass = topk + single + multi == 0;
    report(
        2,
        pass,
        &format!(
            "mismatches over {ORACLE_INSTANCES} instances each: top-k {topk}, attention {single}, \
             multi-head {multi} (exact index sets, values within {ORACLE_TOL:.0e})"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

fn board(task: Task, robot: (i32, i32), objects: [(i32, i32); 3]) -> BoardState {
    BoardState {
        robot: Pos::new(robot.0, robot.1),
        objects: objects.map(|(x, y)| Pos::new(x, y)),
        statuses: [0; 3],
        held: None,
        step_count: 0,
        task,
    }
}

fn holding(mut s: BoardState, c: Color) -> BoardState {
    s.objects[c.index()] = s.robot;
    s.statuses[c.index()] = 1;
    s.held = Some(c);
    s
}

fn stacked(mut s: BoardState, top: Color, bottom: Color) -> BoardState {
    s.objects[top.index()] = s.objects[bottom.index()];
    s.statuses[top.index()] = 1;
    s.statuses[bottom.index()] = -1;
    s
}

/// `(task, state, expected reward)` covering every task family.
fn reward_table() -> Vec<(Task, BoardState, u8)> {
    use Color::{Blue, Green, Red};
    let spread = [(0, 0), (6, 0), (0, 6)];
    let t = |task: Task, robot, objects| board(task, robot, objects);
    vec![
        (Task::Touch(Red), t(Task::Touch(Red), (1, 0), spread), 1),
        (Task::Touch(Red), t(Task::Touch(Red), (2, 0), spread), 0),
        (Task::Touch(Red), holding(t(Task::Touch(Red), (1, 0), spread), Green), 0),
        (Task::Lift(Green), holding(t(Task::Lift(Green), (3, 3), spread), Green), 1),
        (Task::Lift(Green), holding(t(Task::Lift(Green), (3, 3), spread), Red), 0),
        (Task::TouchWith { held: Red, target: Blue }, holding(t(Task::TouchWith { held: Red, target: Blue }, (0, 5), spread), Red), 1),
        (Task::TouchWith { held: Red, target: Blue }, t(Task::TouchWith { held: Red, target: Blue }, (0, 5), spread), 0),
        (Task::Corner(Blue), t(Task::Corner(Blue), (3, 3), spread), 1),
        (Task::Corner(Blue), t(Task::Corner(Blue), (3, 3), [(0, 0), (6, 0), (3, 6)]), 0),
        (Task::Center(Red), t(Task::Center(Red), (0, 3), [(3, 3), (6, 0), (0, 6)]), 1),
        (Task::Center(Red), t(Task::Center(Red), (0, 3), spread), 0),
        (Task::Close(Red, Green), t(Task::Close(Red, Green), (3, 3), [(0, 0), (1, 1), (6, 6)]), 1),
        (Task::Close(Red, Green), t(Task::Close(Red, Green), (3, 3), [(0, 0), (2, 0), (6, 6)]), 0),
        (Task::Far(Red, Blue), t(Task::Far(Red, Blue), (3, 3), [(0, 0), (3, 3), (6, 6)]), 1),
        (Task::Far(Red, Blue), t(Task::Far(Red, Blue), (3, 3), [(0, 0), (3, 3), (6, 3)]), 0),
        (Task::Stack { top: Red, bottom: Blue }, stacked(t(Task::Stack { top: Red, bottom: Blue }, (3, 3), spread), Red, Blue), 1),
        (Task::Stack { top: Red, bottom: Blue }, stacked(t(Task::Stack { top: Red, bottom: Blue }, (3, 3), spread), Blue, Red), 0),
    ]
}

#[test]
fn criterion_3_rewards_and_dynamics() {
    let table = reward_table();
    let table_errors = table
        .iter()
        .filter(|(task, s, want)| s.check_invariants().is_err() || task.reward(s) != *want)
        .count();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut steps, mut violations) = (0, 0);
    while steps < FUZZ_STEPS {
        let task = ALL_TASKS[rng.random_range(0..ALL_TASKS.len())];
        let mut s = BoardState::reset(task, &mut rng);
        while !s.is_done() {
            let a = Action::from_index(rng.random_range(0..gridroboman::NUM_ACTIONS)).unwrap();
            let out = s.step(a).unwrap();
            let obs = s.observe(ObsScale::Normalized);
            let bad = s.check_invariants().is_err()
                || out.reward != task.reward(&s)
                || obs.iter().any(|v| !v.is_finite() || v.abs() > 1.0);
            violations += bad as usize;
            steps += 1;
        }
    }
    let pass = table_errors == 0 && violations == 0;
    report(
        3,
        pass,
        &format!("{table_errors}/{} reward table errors; {violations} violations in {steps} fuzzed steps", table.len()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

/// Single-task bottleneck sweep sized for the 30 minute budget.
const BETA_SWEEP: &[&str] = &[
    "tasks=touch_red",
    "q_width=64",
    "summary_hidden=32",
    "slot_dim=32",
    "key_dim=32",
    "value_dim=32",
    "n_retrieval=8",
    "k_traj=4",
    "k_states=10",
    "batch_size=64",
    "learning_rate=0.001",
    "target_period=500",
    "steps=3000",
    "eval_every=1000",
    "eval_episodes=5",
];

fn train(cfg: &ExperimentConfig, ds: &Dataset) -> Vec<MetricsRow> {
    Trainer::new(cfg, ds).unwrap().run(None).unwrap()
}

#[test]
fn criterion_4_bottleneck_penalty_orders_trained_kl() {
    if !enabled("R2A_ACCEPTANCE_TRAINING") {
        return skipped(4, "R2A_ACCEPTANCE_TRAINING");
    }
    let started = Instant::now();
    let ds = scripted(&[Task::Touch(Color::Red)], 500);
    let betas = [0.0, 0.3, 10.0];
    let mut lines = Vec::new();
    let mut monotone = 0;
    let mut non_negative = true;
    for seed in SEEDS {
        let kls: Vec<f64> = betas
            .iter()
            .map(|b| {
                let mut cfg = config(BETA_SWEEP);
                cfg.beta = *b;
                cfg.seed = seed;
                let rows = train(&cfg, &ds);
                non_negative &= rows.iter().all(|r| r.kl >= 0.0);
                rows.last().unwrap().kl
            })
            .collect();
        monotone += kls.windows(2).all(|w| w[0] > w[1]) as usize;
        lines.push(format!("seed {seed}: {:.3}/{:.4}/{:.5}", kls[0], kls[1], kls[2]));
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = monotone == SEEDS.len() && non_negative && secs < 1800.0;
    report(
        4,
        pass,
        &format!(
            "final kl at beta 0/0.3/10 decreasing for {monotone}/3 seeds ({}); kl >= 0 throughout: {non_negative}; {secs:.0}s",
            lines.join(", ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_ablation_mechanisms() {
    let ds = scripted(task_set(3), 12);
    let task = Task::Touch(Color::Green);
    let check = |ablation: &str| -> (bool, bool) {
        let cfg = config(&[WIDTH8, &[ablation, "n_retrieval=4"]].concat());
        let mut t = Trainer::new(&cfg, &ds).unwrap();
        for _ in 0..5 {
            t.train_step().unwrap();
        }
        let (m, s) = (&t.learner.model, &t.learner.online);
        (
            retrieval_batch_invariance(m, s, &ds, task, 4, 11).unwrap(),
            slot_content_invariance(m, s, &ds, task, 4, 11).unwrap(),
        )
    };
    let (a2_batch, _) = check("ablation=no_retrieval");
    let (_, a1_slots) = check("ablation=query_from_state");
    let (full_batch, full_slots) = check("ablation=none");
    let pass = a2_batch && a1_slots && !full_batch && !full_slots;
    report(
        5,
        pass,
        &format!(
            "no-retrieval variant bitwise invariant to the retrieval batch: {a2_batch}; state-query variant \
             bitwise invariant to slot contents: {a1_slots}; full model invariant to either: {}",
            full_batch || full_slots
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_6_single_task_learning() {
    if !enabled("R2A_ACCEPTANCE_TRAINING") {
        return skipped(6, "R2A_ACCEPTANCE_TRAINING");
    }
    let started = Instant::now();
    let ds = scripted(&[Task::Touch(Color::Red)], 500);
    let base = config(&[
        "mode=baseline",
        "tasks=touch_red",
        "steps=10000",
        "eval_every=2500",
        "learning_rate=0.001",
        "target_period=500",
    ]);
    let random = aggregate(&random_policy(&[Task::Touch(Color::Red)], &EvalSettings::from_config(&base)));
    let mut passed = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let rows = train(&cfg, &ds);
        let best = rows.iter().map(|r| r.mean_return).fold(f64::MIN, f64::max);
        let last = rows.last().unwrap().mean_return;
        passed += (best >= 5.0 * random) as usize;
        lines.push(format!("seed {seed}: best {best:.2}, final {last:.2}"));
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = passed == SEEDS.len() && secs < 1800.0;
    report(
        6,
        pass,
        &format!(
            "{passed}/3 seeds reach 5x random ({:.2}) within 10k steps ({}); {secs:.0}s",
            5.0 * random,
            lines.join(", ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

/// Desk-scale multi-task configuration shared by both agents.
const DESK: &[&str] = &[
    "q_width=64",
    "summary_hidden=32",
    "slot_dim=32",
    "key_dim=32",
    "value_dim=32",
    "n_retrieval=8",
    "k_traj=4",
    "k_states=10",
    "batch_size=64",
    "tasks_per_step=1",
    "learning_rate=0.001",
    "target_period=500",
    "eval_every=2500",
];

fn final_aggregate(tasks: &str, steps: u64, mode: &str, seed: u64, ds: &Dataset) -> f64 {
    let mut cfg = config(DESK);
    cfg.apply_overrides(&[format!("tasks={tasks}"), format!("mode={mode}"), format!("steps={steps}")])
        .unwrap();
    cfg.seed = seed;
    train(&cfg, ds).last().unwrap().mean_return
}

#[test]
fn criterion_7_retrieval_helps_under_capacity_pressure() {
    if !enabled("R2A_ACCEPTANCE_LONG") {
        return skipped(7, "R2A_ACCEPTANCE_LONG");
    }
    let started = Instant::now();
    let ds = scripted(task_set(10), 500);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mut ten = (Vec::new(), Vec::new());
    let mut three = (Vec::new(), Vec::new());
    for seed in SEEDS {
        ten.0.push(final_aggregate("10", 30_000, "ra", seed, &ds));
        ten.1.push(final_aggregate("10", 30_000, "baseline", seed, &ds));
        three.0.push(final_aggregate("3", 10_000, "ra", seed, &ds));
        three.1.push(final_aggregate("3", 10_000, "baseline", seed, &ds));
    }
    let r10 = mean(&ten.0) / mean(&ten.1);
    let r3 = mean(&three.0) / mean(&three.1);
    let hours = started.elapsed().as_secs_f64() / 3600.0;
    let pass = r10 >= 1.1 && r3 >= 0.95 && hours < 4.0;
    report(
        7,
        pass,
        &format!(
            "10 tasks: ra {:.3} vs baseline {:.3} (ratio {r10:.3}, need >= 1.1); 3 tasks: ra {:.3} vs \
             baseline {:.3} (ratio {r3:.3}, need >= 0.95); {hours:.2} h",
            mean(&ten.0),
            mean(&ten.1),
            mean(&three.0),
            mean(&three.1)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn cli(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_r2a"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .is_ok_and(|o| o.status.success())
}

/// The full CLI pipeline inside `root`, with relative paths so recorded
/// paths agree between runs.
fn pipeline(root: &Path) -> bool {
    fs::create_dir_all(root).unwrap();
    let mut ok = cli(root, &["gen-data", "--tasks", "3", "--episodes", "6", "--seed", "5", "--out", "data.grbm"]);
    let mut args = vec!["train", "--out", "train", "--set", "dataset=data.grbm"];
    for kv in WIDTH8.iter().chain(&["steps=4", "eval_every=2", "eval_episodes=2"]) {
        args.extend(["--set", kv]);
    }
    ok &= cli(root, &args);
    ok &= cli(root, &["eval", "--checkpoint", "train/checkpoint.r2ac", "--out", "eval"]);
    ok &= cli(root, &["plot", "--metrics", "train/metrics.csv", "--out", "curve.svg"]);
    ok
}

#[test]
fn criterion_8_cli_outputs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ran = pipeline(&a) && pipeline(&b);
    let (ta, tb) = (tree(&a), tree(&b));
    let pass = ran && ta.len() >= 8 && ta == tb;
    report(
        8,
        pass,
        &format!("gen-data, train, eval and plot run twice: {} files, identical: {}", ta.len(), ta == tb),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_summaries_are_causal() {
    let cfg = config(WIDTH8);
    let ds = scripted(task_set(3), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (model, store) = AgentModel::new(cfg.agent_config(), &mut rng).unwrap();
    let summ = model.summarizer.as_ref().unwrap();
    let bits = |t: &Tensor, r: usize| -> Vec<u64> { t.row(r).iter().map(|x| x.to_bits()).collect() };
    let mut violations = 0;
    for _ in 0..100 {
        let task = task_set(3)[rng.random_range(0..3)];
        let len = rng.random_range(2..51);
        let b = ds
            .sample_retrieval_batch(1, RetrievalSource::TaskFiltered(task), len, &mut rng)
            .unwrap();
        let len = b.len;
        let run = |obs: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_vec(vec![len, b.obs_dim], obs.to_vec()).unwrap());
            let s = model.encoder.encode(&mut tape, &store, x).unwrap();
            let inputs = summ.step_inputs(&mut tape, &store, s, &b).unwrap();
            let sums = summ.summarize(&mut tape, &store, inputs, 1, len).unwrap();
            (tape.value(sums.forward).clone(), tape.value(sums.backward).clone())
        };
        let (h0, b0) = run(&b.observations);
        let t = rng.random_range(0..len);
        let mut obs = b.observations.clone();
        for v in &mut obs[t * b.obs_dim..(t + 1) * b.obs_dim] {
            *v += rng.random_range(0.1..0.5);
        }
        let (h1, b1) = run(&obs);
        for step in 0..t {
            violations += (bits(&h0, step) != bits(&h1, step)) as usize;
        }
        for step in t + 1..len {
            violations += (bits(&b0, step) != bits(&b1, step)) as usize;
        }
        // the perturbed step itself must register in both directions
        violations += (bits(&h0, t) == bits(&h1, t)) as usize + (bits(&b0, t) == bits(&b1, t)) as usize;
    }
    let pass = violations == 0;
    report(
        9,
        pass,
        &format!("{violations} causality violations over 100 perturbed dataset trajectories"),
    );
    assert!(pass);
}
