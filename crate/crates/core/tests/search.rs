mod common;

use std::sync::OnceLock;

use cellsearch::data::{generate, DatasetConfig};
use cellsearch::genotype::{token_bounds, NUM_SLOTS, TOKENS_PER_STEP};
use cellsearch::search::{
    early_stop_decision, report, run_search, select_top_k, RunLog, RunningMean, SearchConfig,
    SearchRecord, Status, StopRule,
};
use cellsearch::segnet::{NetConfig, StaticNet};
use cellsearch::train::{precompute, CellTrainConfig, SeqFeatures};
use cellsearch::Error;
use common::rng;
use proptest::prelude::*;
use rand::Rng;

fn record(index: usize, tokens: Vec<usize>, final_reward: Option<f64>) -> SearchRecord {
    let reward = final_reward.unwrap_or(0.1);
    SearchRecord {
        index,
        tokens,
        status: if final_reward.is_some() { Status::Completed } else { Status::EarlyStopped },
        halfway_reward: reward,
        final_reward,
        reward,
        epochs_trained: 0,
        wall_time: 0.0,
        seed: 0,
    }
}

fn random_tokens<R: Rng>(k: usize, r: &mut R) -> Vec<usize> {
    (0..k).flat_map(|i| token_bounds(i)).map(|b| r.random_range(0..b)).collect()
}

fn log_of(k: usize, records: Vec<SearchRecord>) -> RunLog {
    let mut log = RunLog::new(SearchConfig {
        k,
        ..Default::default()
    });
    log.records = records;
    log
}

#[test]
fn early_stop_rule_arithmetic() {
    let mut h = RunningMean::default();
    assert!(!early_stop_decision(0.0, &h, StopRule::RunningMean));
    h.push(0.4);
    h.push(0.6);
    assert!(early_stop_decision(0.4, &h, StopRule::RunningMean));
    assert!(!early_stop_decision(0.6, &h, StopRule::RunningMean));
    assert!(!early_stop_decision(0.5, &h, StopRule::RunningMean));
    assert!(!early_stop_decision(-1.0, &h, StopRule::Never));
    assert!(early_stop_decision(2.0, &RunningMean::default(), StopRule::Always));
}

proptest! {
    #[test]
    fn streaming_mean_matches_batch_mean(xs in prop::collection::vec(0.0f64..1.0, 1..200)) {
        let mut h = RunningMean::default();
        for (i, &x) in xs.iter().enumerate() {
            h.push(x);
            let batch = xs[..=i].iter().sum::<f64>() / (i + 1) as f64;
            prop_assert!((h.mean().unwrap() - batch).abs() < 1e-12);
        }
        prop_assert_eq!(h.count(), xs.len());
    }
}

#[test]
fn top_k_basics() {
    let mut r = rng(1);
    let recs = vec![
        record(0, random_tokens(2, &mut r), Some(0.3)),
        record(1, random_tokens(2, &mut r), Some(0.7)),
        record(2, random_tokens(2, &mut r), None),
        record(3, random_tokens(2, &mut r), Some(0.5)),
    ];
    let log = log_of(2, recs);
    assert_eq!(select_top_k(&log, 1).unwrap()[0].index, 1);
    assert!(matches!(select_top_k(&log, 4), Err(Error::Search(_))));

    let equal = log_of(2, (0..5).map(|i| record(i, random_tokens(2, &mut r), Some(0.5))).collect());
    let idx: Vec<usize> = select_top_k(&equal, 3).unwrap().iter().map(|r| r.index).collect();
    assert_eq!(idx, vec![0, 1, 2]);
}

#[test]
fn top_k_matches_sort_oracle() {
    let mut r = rng(2);
    for _ in 0..1000 {
        let n = r.random_range(1..30);
        let recs: Vec<SearchRecord> = (0..n)
            .map(|i| {
                let done = r.random_bool(0.7);
                // Coarse rewards so ties are common.
                let fr = done.then(|| r.random_range(0..6) as f64 / 5.0);
                record(i, random_tokens(1, &mut r), fr)
            })
            .collect();
        let k = r.random_range(1..4);
        let log = log_of(1, recs.clone());
        // Oracle: stable sort of completed records by descending reward.
        let mut oracle: Vec<&SearchRecord> = recs.iter().filter(|r| r.final_reward.is_some()).collect();
        oracle.sort_by(|a, b| b.final_reward.partial_cmp(&a.final_reward).unwrap());
        match select_top_k(&log, k) {
            Ok(got) => {
                let want: Vec<usize> = oracle[..k].iter().map(|r| r.index).collect();
                assert_eq!(got.iter().map(|r| r.index).collect::<Vec<_>>(), want);
            }
            Err(_) => assert!(oracle.len() < k),
        }
    }
}

/// Brute-force token counts straight from the flat token lists.
fn count_oracle(log: &RunLog) -> [Vec<usize>; 3] {
    let mut ops = vec![0; 6];
    let mut aggs = vec![0; 6];
    let mut inputs = vec![0; NUM_SLOTS + 1];
    for r in &log.records {
        for step in r.tokens.chunks(TOKENS_PER_STEP) {
            inputs[step[0].min(NUM_SLOTS)] += 1;
            inputs[step[1].min(NUM_SLOTS)] += 1;
            ops[step[2]] += 1;
            ops[step[3]] += 1;
            aggs[step[4]] += 1;
        }
    }
    [ops, aggs, inputs]
}

#[test]
fn single_candidate_report_is_one_hot() {
    let tokens = vec![0, 0, 4, 4, 2];
    let log = log_of(1, vec![record(0, tokens, Some(0.4))]);
    let rep = report(&log, 8).unwrap();
    assert_eq!(rep.rewards, vec![(0, 0.4, 0.4)]);
    assert_eq!(rep.ops.rows[0].2, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    assert_eq!(rep.aggs.rows[0].2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    assert_eq!(rep.inputs.rows[0].2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn report_proportions_match_counting_oracle() {
    let mut r = rng(3);
    for trial in 0..50 {
        let k = 1 + trial % 4;
        let n = r.random_range(1..40);
        let recs = (0..n).map(|i| record(i, random_tokens(k, &mut r), Some(r.random()))).collect();
        let log = log_of(k, recs);
        let rep = report(&log, n).unwrap();
        assert_eq!(rep.rewards.len(), n);
        let oracle = count_oracle(&log);
        for (table, counts) in [&rep.ops, &rep.aggs, &rep.inputs].into_iter().zip(oracle) {
            assert_eq!(table.rows.len(), 1);
            let props = &table.rows[0].2;
            assert!((props.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let total: usize = counts.iter().sum();
            for (p, c) in props.iter().zip(&counts) {
                assert_eq!(*p, *c as f64 / total as f64);
            }
        }
        // Windowed rows also sum to one.
        let rep = report(&log, 7).unwrap();
        for table in [&rep.ops, &rep.aggs, &rep.inputs] {
            for row in &table.rows {
                assert!((row.2.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let last = rep.rewards.last().unwrap();
        let lo = n.saturating_sub(7);
        let ma = log.records[lo..].iter().map(|r| r.reward).sum::<f64>() / (n - lo) as f64;
        assert!((last.2 - ma).abs() < 1e-12);
    }
}

struct Small {
    net: StaticNet,
    train: Vec<SeqFeatures>,
    val: Vec<SeqFeatures>,
}

fn small() -> &'static Small {
    static S: OnceLock<Small> = OnceLock::new();
    S.get_or_init(|| {
        let ds = generate(&DatasetConfig {
            n_sequences: 10,
            ..Default::default()
        })
        .unwrap();
        let net = StaticNet::new(NetConfig::default(), &mut rng(4)).unwrap();
        let train = precompute(&net, &ds, &[0, 1, 2, 3, 4, 5]).unwrap();
        let val = precompute(&net, &ds, &[6, 7, 8, 9]).unwrap();
        Small { net, train, val }
    })
}

fn small_cfg(n: usize, rule: StopRule) -> SearchConfig {
    let mut cfg = SearchConfig {
        n_candidates: n,
        batch: 4,
        cell: CellTrainConfig {
            epochs: 3,
            batch_size: 3,
            ..Default::default()
        },
        seed: 5,
        ..Default::default()
    };
    cfg.early_stop.rule = rule;
    cfg
}

#[test]
fn one_candidate_one_update() {
    let s = small();
    let mut lines = 0;
    let out = run_search(&small_cfg(1, StopRule::RunningMean), &s.net, &s.train, &s.val, |_| {
        lines += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(out.log.records.len(), 1);
    assert_eq!(out.log.updates.len(), 1);
    assert_eq!(lines, 3);
    assert_eq!(out.log.records[0].status, Status::Completed);
    assert!(out.baseline.is_some());
}

#[test]
fn stop_rule_degeneracies() {
    let s = small();
    let never = run_search(&small_cfg(5, StopRule::Never), &s.net, &s.train, &s.val, |_| Ok(())).unwrap();
    assert!(never.log.records.iter().all(|r| r.status == Status::Completed && r.epochs_trained == 3));
    let always = run_search(&small_cfg(5, StopRule::Always), &s.net, &s.train, &s.val, |_| Ok(())).unwrap();
    for r in &always.log.records {
        assert_eq!(r.status, Status::EarlyStopped);
        assert_eq!(r.epochs_trained, 2);
        assert_eq!(r.final_reward, None);
        assert_eq!(r.reward, r.halfway_reward);
    }
    // Batches of 4 over 5 candidates: two controller updates.
    assert_eq!(always.log.updates.len(), 2);
}

#[test]
fn search_is_reproducible_and_log_round_trips() {
    let s = small();
    let cfg = small_cfg(6, StopRule::RunningMean);
    let a = run_search(&cfg, &s.net, &s.train, &s.val, |_| Ok(())).unwrap();
    let b = run_search(&cfg, &s.net, &s.train, &s.val, |_| Ok(())).unwrap();
    assert_eq!(a.log.digest(), b.log.digest());
    assert_eq!(a.controller.params().flat_values(), b.controller.params().flat_values());
    for r in &a.log.records {
        assert!((0.0..=1.0).contains(&r.reward));
        let expected = if r.status == Status::Completed { 3 } else { 2 };
        assert_eq!(r.epochs_trained, expected);
        assert_eq!(r.final_reward.is_some(), r.status == Status::Completed);
    }
    assert_eq!(a.log.records[0].status, Status::Completed);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    a.log.write_jsonl(&path).unwrap();
    let back = RunLog::read_jsonl(&path).unwrap();
    assert_eq!(back, a.log);
    assert!(matches!(RunLog::read_jsonl(&dir.path().join("nope")), Err(Error::MissingArtifact(_))));
}
