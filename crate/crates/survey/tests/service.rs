mod common;

use std::collections::BTreeSet;
use std::path::Path;

use advseg_survey::{aggregate_results, read_log, Model, Side, Survey, SurveyError, VoteLog, VoteRecord};
use proptest::prelude::*;

fn line_count(path: &Path) -> usize {
    std::fs::read_to_string(path).map(|s| s.lines().count()).unwrap_or(0)
}

fn record(dataset: &str, left: Model, chosen: Side, i: usize) -> VoteRecord {
    VoteRecord {
        pair_id: format!("p{i}"),
        dataset: dataset.into(),
        left_model: left,
        right_model: left.other(),
        chosen_side: chosen,
        session: format!("s{}", i % 7),
        timestamp: "2026-01-01T00:00:00Z".into(),
    }
}

#[test]
fn same_seed_same_assignments() {
    let dir = tempfile::tempdir().unwrap();
    common::write_content(&dir.path().join("content"), &[("bedroom", 12)]);
    let mut runs = Vec::new();
    for log in ["a.jsonl", "b.jsonl"] {
        let mut s = Survey::open(&dir.path().join("content"), &dir.path().join(log), 42).unwrap();
        let served: Vec<_> = (0..12)
            .map(|_| {
                let d = s.make_pair("bedroom", "sess").unwrap();
                (d.clone(), s.served(&d.pair_id).unwrap().clone())
            })
            .collect();
        runs.push(served);
    }
    assert_eq!(runs[0], runs[1]);
    let mut other = Survey::open(&dir.path().join("content"), &dir.path().join("c.jsonl"), 43).unwrap();
    let d = other.make_pair("bedroom", "sess").unwrap();
    assert_ne!(d, runs[0][0].0);
}

#[test]
fn pools_are_drawn_without_replacement_per_session() {
    let dir = tempfile::tempdir().unwrap();
    common::write_content(&dir.path().join("content"), &[("sheep", 9)]);
    let mut s = Survey::open(&dir.path().join("content"), &dir.path().join("v.jsonl"), 1).unwrap();
    let mut stems = BTreeSet::new();
    for _ in 0..9 {
        let d = s.make_pair("sheep", "one").unwrap();
        assert!(stems.insert(s.served(&d.pair_id).unwrap().stem.clone()));
    }
    assert_eq!(stems.len(), 9);
    assert!(matches!(s.make_pair("sheep", "one"), Err(SurveyError::Exhausted(_))));
    assert!(s.make_pair("sheep", "two").is_ok());
    assert!(matches!(s.make_pair("none", "one"), Err(SurveyError::UnknownDataset(_))));
}

#[test]
fn datasets_need_both_models() {
    let dir = tempfile::tempdir().unwrap();
    let content = dir.path().join("content");
    common::write_content(&content, &[("bedroom", 3)]);
    std::fs::create_dir_all(content.join("elephant").join("ours")).unwrap();
    let s = Survey::open(&content, &dir.path().join("v.jsonl"), 0).unwrap();
    assert_eq!(s.datasets(), vec!["bedroom".to_string()]);
    let empty = Survey::open(&dir.path().join("missing"), &dir.path().join("w.jsonl"), 0).unwrap();
    assert!(empty.datasets().is_empty());
}

#[test]
fn sides_are_uniform_over_ten_thousand_pairs() {
    let dir = tempfile::tempdir().unwrap();
    common::write_content(&dir.path().join("content"), &[("bedroom", 100)]);
    let mut s = Survey::open(&dir.path().join("content"), &dir.path().join("v.jsonl"), 7).unwrap();
    let mut left_ours = 0usize;
    for session in 0..100 {
        for _ in 0..100 {
            let d = s.make_pair("bedroom", &format!("s{session}")).unwrap();
            if s.served(&d.pair_id).unwrap().left_model == Model::Ours {
                left_ours += 1;
            }
        }
    }
    let freq = left_ours as f64 / 10_000.0;
    assert!((freq - 0.5).abs() <= 0.02, "left=ours frequency {freq}");
}

#[test]
fn votes_append_and_replays_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    common::write_content(&dir.path().join("content"), &[("bedroom", 4)]);
    let log = dir.path().join("votes.jsonl");
    let mut s = Survey::open(&dir.path().join("content"), &log, 3).unwrap();
    let d = s.make_pair("bedroom", "alice").unwrap();
    let rec = s.record_vote(&d.pair_id, Side::Left, "alice").unwrap();
    assert_eq!(line_count(&log), 1);
    assert_eq!(rec.chosen_model(), s.served(&d.pair_id).unwrap().left_model);

    assert!(matches!(s.record_vote(&d.pair_id, Side::Right, "alice"), Err(SurveyError::Duplicate(_))));
    assert_eq!(line_count(&log), 1);
    assert!(matches!(s.record_vote("ffffffffffffffff", Side::Left, "alice"), Err(SurveyError::UnknownPair(_))));
    assert_eq!(line_count(&log), 1);

    s.record_vote(&d.pair_id, Side::Right, "bob").unwrap();
    assert_eq!(line_count(&log), 2);
    assert_eq!(read_log(&log).unwrap(), s.records());
}

#[test]
fn reproduces_bedroom_split_from_115_votes() {
    let dir = tempfile::tempdir().unwrap();
    common::write_content(&dir.path().join("content"), &[("bedroom", 10), ("elephant", 3)]);
    let log = dir.path().join("votes.jsonl");
    let mut s = Survey::open(&dir.path().join("content"), &log, 11).unwrap();
    for i in 0..115 {
        let session = format!("user{}", i % 39);
        let d = s.make_pair("bedroom", &session).unwrap();
        let want = if i < 92 { Model::Ours } else { Model::Baseline };
        let side = if s.served(&d.pair_id).unwrap().left_model == want { Side::Left } else { Side::Right };
        s.record_vote(&d.pair_id, side, &session).unwrap();
    }
    assert_eq!(line_count(&log), 115);
    let r = s.results();
    assert_eq!(r.datasets.len(), 1);
    assert_eq!(r.datasets[0].votes, 115);
    assert_eq!(r.datasets[0].ours_percent, 80.0);
    assert_eq!(r.datasets[0].baseline_percent, 20.0);
    assert_eq!(r.notices, vec!["no votes for elephant".to_string()]);

    drop(s);
    let reopened = Survey::open(&dir.path().join("content"), &log, 11).unwrap();
    assert_eq!(reopened.results(), r);
}

#[test]
fn aggregate_examples() {
    let mut recs: Vec<VoteRecord> = (0..8).map(|i| record("x", Model::Ours, Side::Left, i)).collect();
    recs.extend((8..10).map(|i| record("x", Model::Ours, Side::Right, i)));
    let r = aggregate_results(&recs, &[]);
    assert_eq!((r.datasets[0].ours_percent, r.datasets[0].baseline_percent), (80.0, 20.0));
    let empty = aggregate_results(&[], &[]);
    assert!(empty.datasets.is_empty() && empty.notices.is_empty());
}

#[test]
fn log_rejects_invalid_records_and_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.jsonl");
    let mut log = VoteLog::open(&path).unwrap();
    let mut bad = record("x", Model::Ours, Side::Left, 0);
    bad.right_model = Model::Ours;
    assert!(matches!(log.append(&bad), Err(SurveyError::InvalidRecord(_))));
    log.append(&record("x", Model::Ours, Side::Left, 1)).unwrap();
    drop(log);
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{not json\n");
    std::fs::write(&path, text).unwrap();
    match read_log(&path) {
        Err(SurveyError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
}

fn arb_records() -> impl Strategy<Value = Vec<VoteRecord>> {
    prop::collection::vec((0usize..3, any::<bool>(), any::<bool>()), 0..60).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (d, left_ours, pick_left))| {
                let left = if left_ours { Model::Ours } else { Model::Baseline };
                let side = if pick_left { Side::Left } else { Side::Right };
                record(["bedroom", "sheep", "elephant"][d], left, side, i)
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn aggregation_is_side_blind(recs in arb_records(), flips in prop::collection::vec(any::<bool>(), 60)) {
        let flipped: Vec<VoteRecord> = recs
            .iter()
            .zip(&flips)
            .map(|(r, &f)| {
                if !f {
                    return r.clone();
                }
                VoteRecord {
                    left_model: r.right_model,
                    right_model: r.left_model,
                    chosen_side: r.chosen_side.flipped(),
                    ..r.clone()
                }
            })
            .collect();
        for (a, b) in recs.iter().zip(&flipped) {
            prop_assert_eq!(a.chosen_model(), b.chosen_model());
        }
        prop_assert_eq!(aggregate_results(&recs, &[]), aggregate_results(&flipped, &[]));
    }

    #[test]
    fn prefix_aggregates_are_stable(recs in arb_records(), cut in 0usize..60) {
        let cut = cut.min(recs.len());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        let mut log = VoteLog::open(&path).unwrap();
        for r in &recs[..cut] {
            log.append(r).unwrap();
        }
        let before = aggregate_results(&read_log(&path).unwrap(), &[]);
        for r in &recs[cut..] {
            log.append(r).unwrap();
        }
        let all = read_log(&path).unwrap();
        prop_assert_eq!(&all, &recs);
        prop_assert_eq!(aggregate_results(&all[..cut], &[]), before);
        for d in aggregate_results(&all, &[]).datasets {
            prop_assert!((d.ours_percent + d.baseline_percent - 100.0).abs() < 1e-9);
        }
    }
}
