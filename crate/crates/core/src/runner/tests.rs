use super::*;

#[test]
fn best_of_k_examples() {
    let m = vec![vec![0.0, 0.0, 1.0, 1.0]];
    assert!((best_of_k(&m, 2).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    let m = vec![vec![0.3, 0.9, 0.1, 0.5], vec![1.0, 0.0, 0.0, 0.2]];
    let mean = m.iter().flatten().sum::<f64>() / 8.0;
    assert!((best_of_k(&m, 1).unwrap() - mean).abs() < 1e-15);
    assert!((best_of_k(&m, 4).unwrap() - (0.9 + 1.0) / 2.0).abs() < 1e-15);
    assert!(best_of_k(&m, 5).is_err());
    assert!(best_of_k(&m, 0).is_err());
}

/// Exhaustive subset enumeration.
fn best_of_k_brute(rewards: &[Vec<f64>], k: usize) -> f64 {
    let mut total = 0.0;
    for row in rewards {
        let g = row.len();
        let (mut sum, mut count) = (0.0, 0usize);
        for mask in 0u32..(1 << g) {
            if mask.count_ones() as usize == k {
                let m = (0..g)
                    .filter(|i| mask >> i & 1 == 1)
                    .map(|i| row[i])
                    .fold(f64::MIN, f64::max);
                sum += m;
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    total / rewards.len() as f64
}

#[test]
fn best_of_k_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let g = rng.gen_range(1..=8);
        let rows: Vec<Vec<f64>> = (0..rng.gen_range(1..4))
            .map(|_| (0..g).map(|_| (rng.gen_range(0..4) as f64) / 2.0).collect())
            .collect();
        for k in 1..=g {
            let a = best_of_k(&rows, k).unwrap();
            let b = best_of_k_brute(&rows, k);
            assert!((a - b).abs() < 1e-12, "{rows:?} k={k}: {a} vs {b}");
        }
    }
}

#[test]
fn config_rejects_unknown_keys() {
    assert!(RunConfig::from_json(r#"{"seed": 1}"#).is_ok());
    assert!(RunConfig::from_json(r#"{"seeed": 1}"#).is_err());
    assert!(RunConfig::from_json(r#"{"train": {"lr": 0.1, "bogus": 1}}"#).is_err());
    assert!(RunConfig::from_json(r#"{"eval": {"samples": 4, "best_of_k": 8}}"#).is_err());
    let c = RunConfig::default();
    let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(c, back);
}

fn tiny() -> RunConfig {
    let mut c = RunConfig::smoke();
    c.task.prompts = 12;
    c.eval.prompts = 4;
    c
}

#[test]
fn zero_steps_gives_empty_metrics() {
    let mut c = tiny();
    c.train.max_steps = Some(0);
    let dir = tempfile::tempdir().unwrap();
    let r = run_rl(&c, Some(dir.path())).unwrap();
    assert!(r.rows.is_empty());
    assert_eq!(r.final_version, 1);
    let paths = RunPaths {
        root: dir.path().into(),
    };
    assert!(read_csv(&std::fs::read(paths.metrics()).unwrap()).unwrap().is_empty());
    // the initial weights are published and reconstructible
    assert!(crate::sync::reconstruct(&LocalDirStore::new(dir.path()).unwrap(), 1).is_ok());
    let s = emit_report(&[], &Thresholds::default());
    assert!(!s.passed());
}

#[test]
fn tiny_run_is_reproducible_and_audited() {
    let c = tiny();
    let a = run_rl(&c, None).unwrap();
    let b = run_rl(&c, None).unwrap();
    assert_eq!(write_csv(&a.rows).unwrap(), write_csv(&b.rows).unwrap());
    let mut seq = c.clone();
    seq.train.exec = Exec::Sequential;
    let s = run_rl(&seq, None).unwrap();
    assert_eq!(write_csv(&a.rows).unwrap(), write_csv(&s.rows).unwrap());

    assert!(a.drained);
    assert!(a.steps > 0);
    crate::reconciler::check_single_epoch(&a.audit).unwrap();
    assert_eq!(a.train_rows().count() as u64, a.steps);
    assert!(a.max_staleness <= c.staleness.max_version_lag + 1);
    for r in &a.rows {
        assert!(r.mean_reward.is_finite() && r.best_of_k.is_finite());
    }
}

#[test]
fn artifacts_written_and_report_checks_thresholds() {
    let mut c = tiny();
    c.fleet.failure_rate = 0.1;
    let dir = tempfile::tempdir().unwrap();
    let r = run_rl(&c, Some(dir.path())).unwrap();
    let paths = RunPaths {
        root: dir.path().into(),
    };
    let rows = read_csv(&std::fs::read(paths.metrics()).unwrap()).unwrap();
    assert_eq!(rows, r.rows);
    let logged = crate::reconciler::read_audit(&paths.audit()).unwrap();
    assert_eq!(logged, r.audit);
    crate::reconciler::check_single_epoch(&logged).unwrap();
    let store = LocalDirStore::new(dir.path()).unwrap();
    let shards = crate::sync::reconstruct(&store, r.final_version).unwrap();
    assert!(ToyMoEParams::from_shards(c.model, &shards).is_ok());

    let s = emit_report(&rows, &Thresholds::default());
    assert!(s.passed(), "{:?}", s.failures);
    assert!(s.eval_mean_initial.unwrap().is_finite());
    let high = Thresholds {
        min_final_mean: Some(2.0),
        min_final_best_of_k: Some(2.0),
        ..Default::default()
    };
    let s = emit_report(&rows, &high);
    assert_eq!(
        s.failures,
        vec!["min_final_mean".to_string(), "min_final_best_of_k".to_string()]
    );
}
