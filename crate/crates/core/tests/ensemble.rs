use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use relfuse::backends::{ModelBackend, RecordingBackend, TableModel};
use relfuse::decode::{EnsembleMember, EnsembleSession, StopConditions};
use relfuse::fusion::{AbsoluteDistribution, EnsembleConfig};
use relfuse::harness::toy::{build_toy_world, ToyWorld, ToyWorldConfig};
use relfuse::harness::{
    ablate_normalization, build_members, evaluate, evaluate_individual, select_main_model, sweep_anchor_count,
    EvalItem, ModelEntry,
};
use relfuse::relspace::EmbeddingTable;
use relfuse::vocab::{common_tokens, AnchorStrategy, Vocabulary};

fn world() -> &'static ToyWorld {
    static WORLD: OnceLock<ToyWorld> = OnceLock::new();
    WORLD.get_or_init(|| build_toy_world(&ToyWorldConfig::standard(7)).unwrap())
}

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn assert_golden(name: &str, actual: &str) {
    let path = golden(name);
    if std::env::var_os("RELFUSE_BLESS").is_some() {
        fs::write(&path, actual).unwrap();
    }
    assert_eq!(actual, fs::read_to_string(&path).unwrap(), "{name} drifted");
}

#[test]
fn common_tokens_match_a_brute_force_intersection() {
    let mut cfg = ToyWorldConfig::standard(7);
    let mut third = cfg.models[0].clone();
    third.name = "gamma".into();
    third.corpus.seed = 999;
    third.merges = 150;
    cfg.models.push(third);
    let w = build_toy_world(&cfg).unwrap();
    let vocabs: Vec<&Vocabulary> = w.models.iter().map(|m| m.vocab.as_ref()).collect();
    let common = common_tokens(&vocabs).unwrap();

    let mut oracle = BTreeSet::new();
    for a in vocabs[0].tokens() {
        for b in vocabs[1].tokens() {
            for c in vocabs[2].tokens() {
                if a.surface == b.surface && b.surface == c.surface {
                    oracle.insert(a.surface.clone());
                }
            }
        }
    }
    assert_eq!(common, oracle);
    assert!(common.len() > 30);
}

#[test]
fn recorded_trace_replays_through_tables() {
    let w = world();
    let recorders: Vec<Arc<RecordingBackend>> = w
        .models
        .iter()
        .map(|m| Arc::new(RecordingBackend::new(m.ngram.clone())))
        .collect();
    let entries: Vec<ModelEntry> = recorders
        .iter()
        .zip(&w.models)
        .map(|(r, m)| ModelEntry::new(r.clone(), m.embeddings.clone()))
        .collect();
    let (_, members) = build_members(&entries, AnchorStrategy::Full, true).unwrap();
    let stop = StopConditions::new(40, &[]);
    let prompt = w.dev[3].prompt();
    let original = EnsembleSession::new(members, 0, EnsembleConfig::default(), stop.clone())
        .unwrap()
        .generate(prompt)
        .unwrap();

    let replay: Vec<ModelEntry> = recorders
        .iter()
        .zip(&w.models)
        .map(|(r, m)| ModelEntry::new(Arc::new(r.to_table().unwrap()), m.embeddings.clone()))
        .collect();
    let (_, members) = build_members(&replay, AnchorStrategy::Full, true).unwrap();
    let replayed = EnsembleSession::new(members, 0, EnsembleConfig::default(), stop)
        .unwrap()
        .generate(prompt)
        .unwrap();
    assert_eq!(original.text, replayed.text);
    assert_eq!(original.trace.to_jsonl(), replayed.trace.to_jsonl());
}

#[test]
fn copy_task_trace_is_pinned() {
    let w = world();
    let person = &w.facts.people[0];
    let prompt = format!("{} {} lives in", person.sentences()[0], person.name);
    let (_, members) = build_members(&w.entries(), AnchorStrategy::Full, true).unwrap();
    let mut s = EnsembleSession::new(members, 0, EnsembleConfig::default(), w.stop.clone()).unwrap();
    let g = s.generate(&prompt).unwrap();
    assert_golden("copy_trace.jsonl", &format!("{}\n{}", g.text, g.trace.to_jsonl()));
}

#[test]
fn pinned_test_accuracy() {
    let w = world();
    let (_, members) = build_members(&w.entries(), AnchorStrategy::Full, true).unwrap();
    let cfg = EnsembleConfig::default();
    let mut lines = Vec::new();
    for main in 0..members.len() {
        let solo = evaluate_individual(&members, main, &cfg, &w.stop, &w.test).unwrap();
        let ens = evaluate(&members, main, &cfg, &w.stop, &w.test).unwrap();
        lines.push(format!("{main},{:.6},{:.6}\n", solo.accuracy, ens.accuracy));
    }
    assert_golden("test_accuracy.csv", &lines.concat());
}

fn letters() -> Arc<Vocabulary> {
    Arc::new(Vocabulary::from_surfaces(["a", "b", "c"].map(|s| s.as_bytes().to_vec())).unwrap())
}

fn embeddings() -> Arc<EmbeddingTable> {
    Arc::new(EmbeddingTable::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap())
}

#[test]
fn confident_model_decides_multiple_choice() {
    let vocab = letters();
    let mut sure = TableModel::uniform("sure", vocab.clone());
    sure.insert(vec![], vec![0.9, 0.05, 0.05]).unwrap();
    let unsure = TableModel::uniform("unsure", vocab);
    let entries = [
        ModelEntry::new(Arc::new(sure), embeddings()),
        ModelEntry::new(Arc::new(unsure), embeddings()),
    ];
    let (_, members) = build_members(&entries, AnchorStrategy::Full, true).unwrap();
    let item = EvalItem::Mc {
        prompt: String::new(),
        options: vec!["b".into(), "a".into()],
        gold: 1,
    };
    let cfg = EnsembleConfig::default().with_eta(0.3).with_steps(20);
    let stop = StopConditions::new(1, &[]);
    let alone = evaluate(&members[1..], 0, &cfg, &stop, std::slice::from_ref(&item)).unwrap();
    assert_eq!(alone.accuracy, 0.0, "ties keep the first option");
    let fused = evaluate(&members, 1, &cfg, &stop, &[item]).unwrap();
    assert_eq!(fused.accuracy, 1.0);
}

#[test]
fn sessions_keep_contexts_in_sync() {
    let w = world();
    let (_, members) = build_members(&w.entries(), AnchorStrategy::Full, true).unwrap();
    let mut s = EnsembleSession::new(members.clone(), 1, EnsembleConfig::default(), StopConditions::new(25, &[]))
        .unwrap();
    s.reset(w.test[5].prompt()).unwrap();
    for _ in 0..25 {
        s.ensemble_step().unwrap();
        let text = s.text().to_vec();
        for (ctx, m) in s.contexts().iter().zip(&members) {
            assert_eq!(m.backend.vocabulary().detokenize(ctx), text);
        }
    }
}

#[test]
fn decoding_is_deterministic() {
    let w = world();
    let (_, members) = build_members(&w.entries(), AnchorStrategy::Full, true).unwrap();
    let run = || {
        let mut s = EnsembleSession::new(members.clone(), 0, EnsembleConfig::default(), StopConditions::new(60, &[]))
            .unwrap();
        s.generate(w.dev[9].prompt()).unwrap().trace.to_jsonl()
    };
    assert_eq!(run(), run());
}

#[test]
fn main_selection_agrees_with_individual_evaluation() {
    let w = world();
    let (_, members) = build_members(&w.entries(), AnchorStrategy::Full, true).unwrap();
    let cfg = EnsembleConfig::default();
    let (main, scores) = select_main_model(&members, &cfg, &w.stop, &w.dev).unwrap();
    for (i, score) in scores.iter().enumerate() {
        let solo = evaluate(&members[i..=i], 0, &cfg, &w.stop, &w.dev).unwrap();
        assert_eq!(*score, solo.accuracy);
    }
    assert!(scores.iter().all(|s| *s <= scores[main]));
}

#[test]
fn anchor_sweep_endpoints() {
    let w = world();
    let entries = w.entries();
    let (full, members) = build_members(&entries, AnchorStrategy::Full, true).unwrap();
    let cfg = EnsembleConfig::default();
    let items = &w.dev[..30];
    let points = sweep_anchor_count(&entries, 0, &cfg, &w.stop, items, &[1, full.len()], 3, true).unwrap();
    let full_acc = evaluate(&members, 0, &cfg, &w.stop, items).unwrap().accuracy;
    assert_eq!(points.len(), 3);
    assert_eq!(points[0].value, AnchorStrategy::Sample { k: 1, seed: 3 });
    assert_eq!(points[1].accuracy, full_acc, "sampling every common token equals the full set");
    assert_eq!(points[2].accuracy, full_acc);
    assert!(sweep_anchor_count(&entries, 0, &cfg, &w.stop, items, &[full.len() + 1], 3, true).is_err());
}

#[test]
fn ablation_runs_both_arms() {
    let w = world();
    let cfg = EnsembleConfig::default();
    let a = ablate_normalization(&w.entries(), AnchorStrategy::Full, 0, &cfg, &w.stop, &w.dev[..20]).unwrap();
    for acc in [a.raw, a.normalized] {
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn member_vocabulary_must_match_matrix() {
    let w = world();
    let (_, members) = build_members(&w.entries(), AnchorStrategy::Full, true).unwrap();
    let swapped = vec![
        EnsembleMember::new(members[0].backend.clone(), members[1].matrix.clone()),
        members[1].clone(),
    ];
    assert!(EnsembleSession::new(swapped, 0, EnsembleConfig::default(), w.stop.clone()).is_err());
}

#[test]
fn uniform_members_emit_the_first_token() {
    let vocab = letters();
    let m = TableModel::uniform("u", vocab);
    let d = m.next_distribution(&[]).unwrap();
    assert_eq!(d, AbsoluteDistribution::uniform(3, 0));
    let entries = [ModelEntry::new(Arc::new(m), embeddings())];
    let (_, members) = build_members(&entries, AnchorStrategy::Full, true).unwrap();
    let mut s = EnsembleSession::new(members, 0, EnsembleConfig::default(), StopConditions::new(3, &[])).unwrap();
    assert_eq!(s.generate("").unwrap().text, "aaa");
}
