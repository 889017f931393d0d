mod common;

use std::fs;

use hindsight::analysis::{cluster_goals, sample_for_review, HashedBowEmbedder, ReviewRecord};
use hindsight::augment::{emit_dataset, DpoRecord, OutputFormat};
use hindsight::judge::{MockJudge, ScriptedJudge};
use hindsight::pipeline::{
    read_checkpoint, read_results, run_pipeline, write_checkpoint, write_rejects, write_results, Disposition,
    PipelineError,
};
use hindsight::synth::{generate_corpus, TypeMix};
use hindsight::trajectory::{parse_corpus, write_corpus};
use hindsight::{PipelineConfig, Step, Trajectory};

use common::*;

fn corpus(n: usize) -> Vec<Trajectory> {
    generate_corpus(n, 7, &TypeMix::uniform()).unwrap().0
}

#[test]
fn counts_are_conserved() {
    let c = corpus(150);
    for multi_judge in [true, false] {
        let cfg = PipelineConfig { multi_judge, ..Default::default() };
        let out = run_pipeline(&c, &cfg, &MockJudge::new(3)).unwrap();
        let s = &out.stats;
        s.check().unwrap();
        assert_eq!(s.total, 150);
        assert_eq!(s.discarded_stage1 + s.relabel_attempted, s.total);
        assert_eq!(s.accepted + s.rejected, s.relabel_attempted);
        assert_eq!(s.accepted_by_path.total(), s.accepted);
        let by_type: u64 = s.per_failure_type.values().map(|t| t.total).sum();
        assert_eq!(by_type, s.total);
        assert_eq!(out.results.len(), c.len());
        for (r, t) in out.results.iter().zip(&c) {
            assert_eq!(r.id, t.id);
        }
    }
}

fn dump(dir: &std::path::Path, corpus: &[Trajectory], concurrency: usize) -> Vec<(String, Vec<u8>)> {
    let cfg = PipelineConfig { concurrency, ..Default::default() };
    let out = run_pipeline(corpus, &cfg, &MockJudge::new(11)).unwrap();
    let items = out.accepted_items(corpus);
    let mut files = vec![];
    write_results(&out.results, dir.join("decisions.jsonl")).unwrap();
    write_rejects(&out.results, dir.join("rejects.jsonl")).unwrap();
    for f in OutputFormat::ALL {
        emit_dataset(&items, f, dir.join(f.file_name())).unwrap();
    }
    fs::write(dir.join("stats.json"), serde_json::to_vec(&out.stats).unwrap()).unwrap();
    let mut names: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in names {
        files.push((n.to_string_lossy().into_owned(), fs::read(dir.join(&n)).unwrap()));
    }
    files
}

#[test]
fn parallel_output_is_byte_identical() {
    let c = corpus(200);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let serial = dump(a.path(), &c, 1);
    let parallel = dump(b.path(), &c, 8);
    assert_eq!(serial.len(), 6);
    assert_eq!(serial, parallel);
}

#[test]
fn jsonl_round_trips() {
    let c = corpus(40);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    write_corpus(&c, &p).unwrap();
    let back: Vec<Trajectory> = parse_corpus(fs::read(&p).unwrap().as_slice()).unwrap();
    assert_eq!(back, c);

    let out = run_pipeline(&c, &PipelineConfig::default(), &MockJudge::new(1)).unwrap();
    let rp = dir.path().join("r.jsonl");
    write_results(&out.results, &rp).unwrap();
    assert_eq!(read_results(&rp).unwrap(), out.results);
}

#[test]
fn checkpoint_lists_every_processed_id() {
    let c = corpus(30);
    let out = run_pipeline(&c, &PipelineConfig::default(), &MockJudge::new(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("checkpoint.txt");
    write_checkpoint(&out.results, &p).unwrap();
    let ids = read_checkpoint(&p).unwrap();
    assert_eq!(ids.len(), 30);
    assert!(c.iter().all(|t| ids.contains(&t.id)));
}

#[test]
fn everything_discarded_is_not_an_error() {
    let tool_failure = |i: usize| {
        Trajectory::new(
            format!("t{i}"),
            format!("Fetch the quote for ticker {i}."),
            vec![Step::new("call api", "quote()", "Error: connection refused")],
        )
    };
    let c: Vec<_> = (0..5).map(tool_failure).collect();
    let out = run_pipeline(&c, &PipelineConfig::default(), &MockJudge::new(0)).unwrap();
    assert_eq!(out.stats.discarded_stage1, 5);
    assert_eq!(out.stats.accepted, 0);
    assert_eq!(out.stats.acceptance_rate, 0.0);
    assert!(out.results.iter().all(|r| r.disposition == Disposition::DiscardedStage1));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("dpo.jsonl");
    assert_eq!(emit_dataset(&out.accepted_items(&c), OutputFormat::Dpo, &p).unwrap(), 0);
    assert_eq!(fs::read(&p).unwrap(), b"");
}

#[test]
fn empty_corpus_and_bad_config_fail() {
    let cfg = PipelineConfig::default();
    assert!(matches!(run_pipeline(&[], &cfg, &MockJudge::new(0)), Err(PipelineError::EmptyCorpus)));
    let bad = PipelineConfig { theta: 1.5, ..Default::default() };
    assert!(matches!(run_pipeline(&corpus(2), &bad, &MockJudge::new(0)), Err(PipelineError::Config(_))));
}

#[test]
fn copper_pair_flows_to_dpo() {
    let t = copper_trajectory();
    let outcome = hindsight::outcome::extract_rule(&t, &Default::default());
    let mut entries = stage3_entries(&outcome, COPPER_GOAL, &[(COPPER_HINDSIGHT, true, 0.87)]);
    entries.extend(second_entries(COPPER_HINDSIGHT, &t, &[(true, 0.91, "")]));
    let c = vec![t];
    let out = run_pipeline(&c, &PipelineConfig::default(), &ScriptedJudge::new(entries)).unwrap();
    assert_eq!(out.stats.accepted, 1);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("dpo.jsonl");
    emit_dataset(&out.accepted_items(&c), OutputFormat::Dpo, &p).unwrap();
    let rec: DpoRecord = serde_json::from_str(fs::read_to_string(&p).unwrap().trim()).unwrap();
    assert_eq!(rec.chosen_goal, COPPER_HINDSIGHT);
    assert_eq!(rec.rejected_goal, COPPER_GOAL);
    assert!(rec.weight > 0.0 && rec.weight <= 1.0);
}

#[test]
fn dpo_records_keep_their_own_weights() {
    let c = corpus(120);
    let out = run_pipeline(&c, &PipelineConfig::default(), &MockJudge::new(5)).unwrap();
    let items = out.accepted_items(&c);
    assert!(items.len() >= 3);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("dpo.jsonl");
    assert_eq!(emit_dataset(&items, OutputFormat::Dpo, &p).unwrap(), items.len());
    let recs: Vec<DpoRecord> = fs::read_to_string(&p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    for (rec, item) in recs.iter().zip(&items) {
        assert_eq!(rec.weight, item.assessment.severity_weight);
        assert_ne!(rec.chosen_goal, rec.rejected_goal);
    }
}

#[test]
fn review_export_hides_original_goal() {
    let c = corpus(120);
    let out = run_pipeline(&c, &PipelineConfig::default(), &MockJudge::new(5)).unwrap();
    let items = out.accepted_items(&c);
    let pairs: Vec<_> = items.iter().map(|i| (i.trajectory, i.decision)).collect();
    let sample = sample_for_review(&pairs, 5, 9).unwrap();
    assert_eq!(sample.len(), 5);
    assert_eq!(sample, sample_for_review(&pairs, 5, 9).unwrap());
    for r in &sample {
        let v = serde_json::to_value(r).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, ["hindsight_prompt", "steps", "trajectory_id"]);
        let goal = &c.iter().find(|t| t.id == r.trajectory_id).unwrap().goal;
        assert!(!serde_json::to_string(r).unwrap().contains(goal.as_str()));
    }
    let with_goal = r#"{"trajectory_id":"x","hindsight_prompt":"y","steps":[],"goal":"z"}"#;
    assert!(serde_json::from_str::<ReviewRecord>(with_goal).is_err());
}

#[test]
fn accepted_goals_cover_several_clusters() {
    let c = corpus(150);
    let out = run_pipeline(&c, &PipelineConfig::default(), &MockJudge::new(5)).unwrap();
    let goals: Vec<String> = out
        .results
        .iter()
        .filter_map(|r| r.accepted_parts().map(|(_, d)| d.hindsight_prompt.clone()))
        .collect();
    let d = cluster_goals(&goals, 6, &HashedBowEmbedder::default(), 1).unwrap();
    assert_eq!(d.cluster_assignments.len(), goals.len());
    assert!(d.coverage > 1 && d.coverage <= 6);
    assert!((d.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
