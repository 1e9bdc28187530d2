use std::time::Instant;

use gridroboman::{task_set, Task, ALL_TASKS};
use r2a_harness::dataset::{discounted_returns, DataError, Dataset, GeneratorInfo, RetrievalSource, MC_GAMMA};
use r2a_harness::generate::{generate_dataset, random_episode, scripted_episode, task_rng};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scripted(tasks: &[Task], n: usize, seed: u64) -> Dataset {
    generate_dataset(tasks, n, &GeneratorInfo::Scripted { epsilon: 0.2 }, seed).unwrap()
}

#[test]
fn round_trip_is_lossless_and_idempotent() {
    let ds = scripted(task_set(3), 4, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.grbm");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(back.episodes, ds.episodes);
    assert_eq!(back.encode(), std::fs::read(&path).unwrap());
    for (a, b) in back.episodes.iter().zip(&ds.episodes) {
        for (x, y) in a.observations.iter().flatten().zip(b.observations.iter().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    assert_eq!(scripted(task_set(3), 5, 1).encode(), scripted(task_set(3), 5, 1).encode());
    assert_ne!(scripted(task_set(3), 5, 1).encode(), scripted(task_set(3), 5, 2).encode());
    // a task's episodes do not depend on the other tasks generated with it
    let alone = scripted(&[Task::Lift(gridroboman::Color::Red)], 5, 1);
    let together = scripted(task_set(10), 5, 1);
    let ids = together.episodes_of(Task::Lift(gridroboman::Color::Red));
    for (i, &id) in ids.iter().enumerate() {
        assert_eq!(together.episodes[id], alone.episodes[i]);
    }
}

#[test]
fn manifest_counts_match_request() {
    let ds = scripted(task_set(10), 6, 0);
    assert_eq!(ds.manifest.episodes_per_task, 6);
    assert_eq!(ds.manifest.total_episodes, 60);
    assert_eq!(ds.manifest.tasks.len(), 10);
    for t in task_set(10) {
        assert_eq!(ds.episodes_of(*t).len(), 6);
    }
    for e in &ds.episodes {
        assert_eq!(e.actions.len(), 50);
        assert!(e.rewards.iter().all(|&r| r <= 1));
        assert!((0.0..=50.0).contains(&e.total_return()));
    }
}

#[test]
fn corrupt_files_are_rejected() {
    let ds = scripted(task_set(3), 2, 0);
    let bytes = ds.encode();

    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(matches!(Dataset::decode(&wrong), Err(DataError::BadMagic(_))));

    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(Dataset::decode(&version), Err(DataError::UnsupportedVersion(9))));

    assert!(matches!(Dataset::decode(&bytes[..bytes.len() - 1]), Err(DataError::Truncated(_))));
    assert!(matches!(Dataset::decode(&bytes[..3]), Err(DataError::Truncated(_))));
    assert!(Dataset::decode(&bytes[..20]).is_err());

    // reward byte outside {0, 1}
    let mut reward = bytes.clone();
    let last = reward.len() - 1;
    reward[last] = 2;
    assert!(matches!(Dataset::decode(&reward), Err(DataError::Inconsistent(_))));

    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Dataset::load(&dir.path().join("missing")), Err(DataError::Io { .. })));
}

#[test]
fn mc_returns_are_discounted_episode_sums() {
    let ds = scripted(task_set(3), 2, 3);
    for (e, mc) in ds.episodes.iter().zip(&ds.mc_returns) {
        for t in 0..50 {
            let oracle: f64 = (t..50).map(|k| MC_GAMMA.powi((k - t) as i32) * e.rewards[k] as f64).sum();
            assert!((mc[t] - oracle).abs() < 1e-9);
        }
    }
    assert_eq!(discounted_returns(&[1, 1], 1.0), vec![2.0, 1.0]);
}

#[test]
fn task_filtered_batches_only_hold_that_task() {
    let ds = scripted(task_set(10), 12, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for &t in task_set(10) {
        let b = ds.sample_retrieval_batch(8, RetrievalSource::TaskFiltered(t), 50, &mut rng).unwrap();
        assert_eq!(b.num_traj, 8);
        assert!(b.sources.iter().all(|s| s.task as usize == t.index()));
        let mut eps: Vec<usize> = b.sources.iter().map(|s| s.episode).collect();
        eps.sort_unstable();
        eps.dedup();
        assert_eq!(eps.len(), 8, "drawn without replacement");
    }
    let missing = ds.sample_retrieval_batch(2, RetrievalSource::TaskFiltered(ALL_TASKS[29]), 50, &mut rng);
    assert!(matches!(missing, Err(DataError::MissingTask(_))));
    let too_many = ds.sample_retrieval_batch(13, RetrievalSource::TaskFiltered(ALL_TASKS[0]), 50, &mut rng);
    assert!(matches!(too_many, Err(DataError::NotEnough { need: 13, have: 12 })));
}

#[test]
fn full_size_batch_is_a_permutation() {
    let ds = scripted(task_set(3), 4, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = ds.sample_retrieval_batch(12, RetrievalSource::Uniform, 50, &mut rng).unwrap();
    let mut eps: Vec<usize> = b.sources.iter().map(|s| s.episode).collect();
    eps.sort_unstable();
    assert_eq!(eps, (0..12).collect::<Vec<_>>());
    // retrieval rows carry the stored data
    let e = &ds.episodes[b.sources[3].episode];
    assert_eq!(b.actions[b.row(3, 17)], e.actions[17] as usize);
    assert_eq!(b.observations[b.row(3, 17) * 11 + 2], e.observations[17][2] as f64);
}

#[test]
fn uniform_retrieval_hits_every_trajectory() {
    let ds = scripted(task_set(3), 10, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut hits = vec![0usize; 30];
    for _ in 0..10_000 {
        let b = ds.sample_retrieval_batch(4, RetrievalSource::Uniform, 50, &mut rng).unwrap();
        for s in &b.sources {
            hits[s.episode] += 1;
        }
    }
    assert!(hits.iter().all(|&h| h > 0));
    // each trajectory is drawn with probability 4/30 per batch
    let expected = 10_000.0 * 4.0 / 30.0;
    let sd = (10_000.0 * (4.0 / 30.0) * (26.0 / 30.0) as f64).sqrt();
    for &h in &hits {
        assert!((h as f64 - expected).abs() < 5.0 * sd, "{h} vs {expected}");
    }
}

#[test]
fn short_context_windows_stay_inside_episodes() {
    let ds = scripted(task_set(3), 4, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let b = ds.sample_retrieval_batch(5, RetrievalSource::Uniform, 5, &mut rng).unwrap();
        assert_eq!(b.len, 5);
        for (i, s) in b.sources.iter().enumerate() {
            assert!(s.start + 5 <= 50);
            let e = &ds.episodes[s.episode];
            for j in 0..5 {
                assert_eq!(b.actions[b.row(i, j)], e.actions[s.start + j] as usize);
                assert_eq!(b.mc_returns[b.row(i, j)], ds.mc_returns[s.episode][s.start + j]);
            }
        }
    }
    assert!(ds.sample_retrieval_batch(2, RetrievalSource::Uniform, 0, &mut rng).is_err());
    assert!(ds.sample_retrieval_batch(2, RetrievalSource::Uniform, 51, &mut rng).is_err());
}

#[test]
fn training_batches_flag_episode_ends_and_cover_tasks_uniformly() {
    let ds = scripted(task_set(10), 5, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let b = ds.sample_training_batch(n, None, &mut rng).unwrap();
    b.validate().unwrap();
    let mut per_task = [0usize; 30];
    let mut dones = 0;
    for i in 0..n {
        per_task[b.tasks[i] as usize] += 1;
        if b.dones[i] {
            dones += 1;
            assert_eq!(&b.observations[i * 11..(i + 1) * 11], &b.next_observations[i * 11..(i + 1) * 11]);
        }
    }
    let p = 0.1;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    for t in task_set(10) {
        assert!((per_task[t.index()] as f64 - n as f64 * p).abs() < 3.0 * sd);
    }
    let pd = 1.0 / 50.0;
    assert!((dones as f64 - n as f64 * pd).abs() < 4.0 * (n as f64 * pd * (1.0 - pd)).sqrt());

    // the step after t is the next stored observation
    let small = ds.sample_training_batch(256, Some(&[ALL_TASKS[0]]), &mut rng).unwrap();
    assert_eq!(small.len(), 256);
    assert!(small.tasks.iter().all(|&t| t == 0));
    assert!(ds.sample_training_batch(4, Some(&[ALL_TASKS[29]]), &mut rng).is_err());
    assert!(ds.sample_training_batch(0, None, &mut rng).is_err());
}

#[test]
fn transitions_link_consecutive_steps() {
    let ds = scripted(&[ALL_TASKS[0]], 1, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = ds.sample_training_batch(500, None, &mut rng).unwrap();
    let e = &ds.episodes[0];
    let as_f64 = |o: &[f32; 11]| o.iter().map(|&v| v as f64).collect::<Vec<_>>();
    for i in 0..b.len() {
        let o = &b.observations[i * 11..(i + 1) * 11];
        let n = &b.next_observations[i * 11..(i + 1) * 11];
        let linked = (0..50).any(|t| {
            let next = if t == 49 { as_f64(&e.observations[t]) } else { as_f64(&e.observations[t + 1]) };
            as_f64(&e.observations[t]) == o && next == n && (t == 49) == b.dones[i]
        });
        assert!(linked, "row {i} is not a stored transition");
    }
}

#[test]
fn thirty_task_dataset_loads_quickly() {
    let ds = scripted(&ALL_TASKS, 100, 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.grbm");
    ds.save(&path).unwrap();
    let t = Instant::now();
    let back = Dataset::load(&path).unwrap();
    let secs = t.elapsed().as_secs_f64();
    assert_eq!(back.episodes.len(), 3000);
    assert!(secs < 1.0, "load took {secs:.3}s");
}

#[test]
fn scripted_expert_beats_random_by_tenfold() {
    let task = Task::Touch(gridroboman::Color::Red);
    let mut rng = task_rng(11, task);
    let scripted: f64 = (0..100).map(|_| scripted_episode(task, 0.2, &mut rng).total_return()).sum::<f64>() / 100.0;
    let random: f64 = (0..100).map(|_| random_episode(task, &mut rng).total_return()).sum::<f64>() / 100.0;
    assert!(scripted > 10.0 * random, "scripted {scripted} random {random}");
}

#[test]
fn stored_rewards_match_replayed_environment() {
    // replaying the stored actions from the same start reproduces rewards
    let task = ALL_TASKS[24];
    let mut rng = task_rng(4, task);
    let ep = scripted_episode(task, 0.2, &mut rng);
    let mut rng = task_rng(4, task);
    let mut state = gridroboman::BoardState::reset(task, &mut rng);
    for t in 0..50 {
        assert_eq!(state.observe(gridroboman::ObsScale::Normalized), ep.observations[t]);
        let out = state.step(gridroboman::Action::from_index(ep.actions[t] as usize).unwrap()).unwrap();
        assert_eq!(out.reward, ep.rewards[t]);
    }
}
