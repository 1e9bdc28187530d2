//! Ablation suite and mechanism checks.

use std::fmt::Write as _;
use std::path::Path;

use gridroboman::Task;
use r2a_core::agent::{AgentModel, RetrievalSet};
use r2a_core::retrieval::{RetrievalMode, RetrievalParams, StepOptions};
use r2a_core::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Ablation, ExperimentConfig, Mode};
use crate::dataset::{Dataset, RetrievalSource};
use crate::error::{HarnessError, HarnessResult};
use crate::train::{write_file, Trainer};

pub const TABLE_SCHEMA: &str = "# r2a-ablation v1";
pub const K_VALUES: [usize; 3] = [5, 10, 20];

fn probe_observations(dataset: &Dataset, task: Task, n: usize) -> Vec<f64> {
    let ids = dataset.episodes_of(task);
    (0..n)
        .flat_map(|i| {
            let e = &dataset.episodes[ids[i % ids.len()]];
            e.observations[(7 * i) % e.observations.len()].map(|v| v as f64)
        })
        .collect()
}

fn q_bits(
    model: &AgentModel,
    store: &ParamStore,
    obs: &[f64],
    task: u8,
    set: &RetrievalSet,
    seed: u64,
) -> HarnessResult<Vec<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let n = obs.len() / model.cfg.obs_dim;
    let prep = model.prepare(&mut tape, store, set, &[task], false, &mut rng)?;
    let out = model.q_values(&mut tape, store, obs, &vec![task; n], &prep, StepOptions::default(), &mut rng)?;
    Ok(tape.value(out.q).data().iter().map(|v| v.to_bits()).collect())
}

/// Q-values of a no-retrieval agent are bitwise identical under two
/// disjoint retrieval batches.
pub fn retrieval_batch_invariance(
    model: &AgentModel,
    store: &ParamStore,
    dataset: &Dataset,
    task: Task,
    n_retrieval: usize,
    seed: u64,
) -> HarnessResult<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs = probe_observations(dataset, task, 16);
    let mut a = RetrievalSet::new();
    let mut b = RetrievalSet::new();
    let t = task.index() as u8;
    a.insert(t, dataset.sample_retrieval_batch(n_retrieval, RetrievalSource::TaskFiltered(task), 50, &mut rng)?);
    b.insert(t, dataset.sample_retrieval_batch(n_retrieval, RetrievalSource::Uniform, 50, &mut rng)?);
    Ok(q_bits(model, store, &obs, t, &a, seed)? == q_bits(model, store, &obs, t, &b, seed)?)
}

/// Outputs of a state-query agent are bitwise identical for two unrelated
/// slot memories.
pub fn slot_content_invariance(
    model: &AgentModel,
    store: &ParamStore,
    dataset: &Dataset,
    task: Task,
    n_retrieval: usize,
    seed: u64,
) -> HarnessResult<bool> {
    let ret = model
        .retrieval
        .as_ref()
        .ok_or_else(|| HarnessError::Config("slot check needs a retrieval agent".into()))?;
    let rcfg = &model.cfg.retrieval;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs = probe_observations(dataset, task, 16);
    let n = obs.len() / model.cfg.obs_dim;
    let mut set = RetrievalSet::new();
    let t = task.index() as u8;
    set.insert(t, dataset.sample_retrieval_batch(n_retrieval, RetrievalSource::TaskFiltered(task), 50, &mut rng)?);
    let slot_a: Tensor = RetrievalParams::initial_slots(rcfg, n, &mut rng);
    let slot_b: Tensor = slot_a.map(|v| 3.0 * v + 1.0);
    let run = |slots: &Tensor| -> HarnessResult<Vec<u64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let prep = model.prepare(&mut tape, store, &set, &[t], false, &mut rng)?;
        let x = tape.constant(Tensor::from_vec(vec![n, model.cfg.obs_dim], obs.clone()).map_err(r2a_core::agent::AgentError::from)?);
        let s = model.encoder.encode(&mut tape, store, x).map_err(r2a_core::agent::AgentError::from)?;
        let slots = tape.constant(slots.clone());
        let out = ret
            .step(&mut tape, store, rcfg, s, Some(slots), prep.by_task.get(&t), StepOptions::default(), &mut rng)
            .map_err(r2a_core::agent::AgentError::from)?;
        let mut bits: Vec<u64> = tape.value(out.state).data().iter().map(|v| v.to_bits()).collect();
        bits.extend(tape.value(out.kl).data().iter().map(|v| v.to_bits()));
        Ok(bits)
    };
    Ok(run(&slot_a)? == run(&slot_b)?)
}

/// `(variant name, config)` for every requested variant.
pub fn variant_configs(base: &ExperimentConfig) -> HarnessResult<Vec<(String, ExperimentConfig)>> {
    let mut out = Vec::new();
    for v in &base.variants {
        let mut c = base.clone();
        c.mode = Mode::Ra;
        c.ablation = Ablation::None;
        match v.as_str() {
            "baseline" => c.mode = Mode::Baseline,
            "ra" => {}
            "a1" => c.ablation = Ablation::QueryFromState,
            "a2" => c.ablation = Ablation::NoRetrieval,
            "a3" => c.ablation = Ablation::ShortContext,
            "no_ib" => c.ablation = Ablation::NoBottleneck,
            "k_sweep" => {
                for kt in K_VALUES {
                    for ks in K_VALUES {
                        let mut k = c.clone();
                        k.k_traj = kt;
                        k.k_states = ks;
                        out.push((format!("k{kt}x{ks}"), k));
                    }
                }
                continue;
            }
            other => return Err(HarnessError::Config(format!("unknown ablation variant `{other}`"))),
        }
        out.push((v.clone(), c));
    }
    for (name, c) in &out {
        c.validate()
            .map_err(|e| HarnessError::Config(format!("variant {name}: {e}")))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub final_return: f64,
    /// Final return over the baseline's for the same seed.
    pub relative: Option<f64>,
    /// Mechanism check result for the variants that have one.
    pub check: Option<bool>,
}

pub fn render_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{TABLE_SCHEMA}\nvariant,seed,final_return,relative_to_baseline,mechanism_check\n");
    for r in rows {
        let rel = r.relative.map(|x| x.to_string()).unwrap_or_default();
        let check = match r.check {
            Some(true) => "pass",
            Some(false) => "fail",
            None => "",
        };
        writeln!(s, "{},{},{},{},{}", r.variant, r.seed, r.final_return, rel, check).unwrap();
    }
    s
}

/// Train every variant for every seed, writing each run under
/// `out_dir/<variant>/seed<seed>` and the table to `out_dir/ablation.csv`.
pub fn run_ablation_suite(base: &ExperimentConfig, dataset: &Dataset, out_dir: &Path) -> HarnessResult<Vec<AblationRow>> {
    let variants = variant_configs(base)?;
    let probe_task = base.task_list()?[0];
    let mut rows = Vec::new();
    for (name, cfg) in &variants {
        for &seed in &base.seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            let mut trainer = Trainer::new(&c, dataset)?;
            let metrics = trainer.run(Some(&out_dir.join(name).join(format!("seed{seed}"))))?;
            let final_return = metrics.last().map_or(0.0, |m| m.mean_return);
            let model = &trainer.learner.model;
            let store = &trainer.learner.online;
            let check = match model.cfg.retrieval.mode {
                _ if !model.cfg.uses_retrieval() => None,
                RetrievalMode::NoRetrieval => Some(retrieval_batch_invariance(
                    model,
                    store,
                    dataset,
                    probe_task,
                    c.n_retrieval,
                    seed,
                )?),
                RetrievalMode::QueryFromState => Some(slot_content_invariance(
                    model,
                    store,
                    dataset,
                    probe_task,
                    c.n_retrieval,
                    seed,
                )?),
                RetrievalMode::Full => None,
            };
            rows.push(AblationRow {
                variant: name.clone(),
                seed,
                final_return,
                relative: None,
                check,
            });
        }
    }
    let baseline: Vec<(u64, f64)> = rows
        .iter()
        .filter(|r| r.variant == "baseline")
        .map(|r| (r.seed, r.final_return))
        .collect();
    for r in &mut rows {
        r.relative = baseline
            .iter()
            .find(|(s, _)| *s == r.seed)
            .filter(|(_, b)| *b != 0.0)
            .map(|(_, b)| r.final_return / b);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    write_file(&out_dir.join("config.txt"), base.render().as_bytes())?;
    write_file(&out_dir.join("ablation.csv"), render_table(&rows).as_bytes())?;
    Ok(rows)
}
