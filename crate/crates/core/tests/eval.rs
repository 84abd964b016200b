use pitlab::corpus::{CorpusBundle, Document, QaPair};
use pitlab::curriculum::build_qa_example;
use pitlab::eval::*;
use pitlab::model::{decays, ModelConfig, ModelState, Reduction};
use pitlab::optim::{AdamW, OptimConfig};
use pitlab::tokenizer::Vocab;
use proptest::prelude::*;

mod common;
use common::oracle::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn metrics_match_oracles_on_1000_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let g = random_text(&mut rng);
        // Bias toward related pairs so matches actually occur.
        let p = match rng.gen_range(0..3) {
            0 => g.clone(),
            1 => format!("{} {}", random_text(&mut rng), g),
            _ => random_text(&mut rng),
        };
        assert_eq!(exact_match(&p, &g), oracle_em(&p, &g), "{p:?} / {g:?}");
        assert_eq!(answer_recall(&p, &g), oracle_recall(&p, &g), "{p:?} / {g:?}");
        assert!((rouge_l(&p, &g) - oracle_rouge(&p, &g)).abs() < 1e-9, "{p:?} / {g:?}");
    }
}

#[test]
fn normalization_golden_cases() {
    for (input, want) in NORMALIZATION_GOLDEN {
        assert_eq!(normalize(input), want, "{input:?}");
    }
}

#[test]
fn metric_examples() {
    assert!(!exact_match("editing was handled by jennifer lame", "Jennifer Lame"));
    assert!(answer_recall("editing was handled by jennifer lame", "Jennifer Lame"));
    let r = rouge_l("greta gerwig and noah baumbach", "greta gerwig");
    assert!((r - 2.0 * 0.4 / 1.4).abs() < 1e-12);
    assert!(exact_match("Jennifer Lame", "jennifer lame."));
    assert_eq!(rouge_l("Jennifer Lame", "Jennifer Lame"), 1.0);
    assert!(exact_match("", "") && answer_recall("", ""));
    assert_eq!(rouge_l("", ""), 1.0);
    assert_eq!(rouge_l("", "x"), 0.0);
}

proptest! {
    #[test]
    fn em_implies_recall(p in "[a-zA-Z .,!]{0,30}", g in "[a-zA-Z .,!]{0,30}") {
        if exact_match(&p, &g) {
            prop_assert!(answer_recall(&p, &g));
            prop_assert_eq!(rouge_l(&p, &g), 1.0);
        }
        let r = rouge_l(&p, &g);
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn rouge_is_symmetric(p in "[a-d ]{0,20}", g in "[a-d ]{0,20}") {
        prop_assert!((rouge_l(&p, &g) - rouge_l(&g, &p)).abs() < 1e-12);
    }
}

fn pair(id: &str, doc: &str, q: &str, a: &str) -> QaPair {
    QaPair { id: id.into(), doc_id: doc.into(), domain: "film".into(), question: q.into(), answer: a.into() }
}

fn tiny_bundle() -> CorpusBundle {
    CorpusBundle {
        test_docs: vec![Document {
            id: "d1".into(),
            entity_id: "e1".into(),
            domain: "film".into(),
            title: "Oppenheimer".into(),
            text: "Oppenheimer is a film. Editing was handled by Jennifer Lame.".into(),
        }],
        test_qa: vec![pair("q1", "d1", "Who handled the editing of Oppenheimer?", "Jennifer Lame")],
        ..Default::default()
    }
}

fn model_for(b: &CorpusBundle, seed: u64) -> ModelState<f32> {
    let vocab = Vocab::build(b);
    ModelState::init(ModelConfig::new(1, 2, 32, 64, vocab.len(), seed), vocab).unwrap()
}

#[test]
fn memorized_pair_scores_full_marks() {
    let b = tiny_bundle();
    let mut m = model_for(&b, 0);
    let ex = build_qa_example(&b.test_qa[0], &m.vocab, 64).unwrap();
    let cfg = OptimConfig::new(1e-2, 150);
    let mut opt = AdamW::new(m.params());
    let names = m.names().to_vec();
    let decay: Vec<bool> = names.iter().map(|n| decays(n)).collect();
    for _ in 0..150 {
        let (_, g) = m.loss_and_grads(&[ex.scored()], Reduction::ExampleMean).unwrap();
        opt.step(&cfg, m.params_mut(), &g, &decay, &names, 1e-2).unwrap();
    }
    let r = evaluate_qa(&m, "test_qa", &b.test_qa, &b, EvalMode::ClosedBook, &EvalOptions::default()).unwrap();
    assert_eq!(r.exact_match, 1.0);
    assert_eq!(r.recall, 1.0);
    assert_eq!(r.format_rate, 1.0);
    assert_eq!(r.records[0].prediction, "jennifer lame");
}

#[test]
fn evaluation_errors() {
    let b = tiny_bundle();
    let m = model_for(&b, 0);
    assert!(matches!(
        evaluate_qa(&m, "x", &[], &b, EvalMode::ClosedBook, &EvalOptions::default()),
        Err(EvalError::Empty)
    ));
    let orphan = [pair("q2", "missing", "Who handled the editing of Oppenheimer?", "x")];
    assert!(matches!(
        evaluate_qa(&m, "x", &orphan, &b, EvalMode::OpenBook, &EvalOptions::default()),
        Err(EvalError::MissingDoc { .. })
    ));
    assert!(matches!(
        evaluate_qa(&m, "x", &b.test_qa, &b, EvalMode::FewShot { k: 5 }, &EvalOptions::default()),
        Err(EvalError::Exemplars { k: 5, available: 0 })
    ));
    assert!(doc_perplexity(&m, &[]).is_err());
}

#[test]
fn reports_are_pure_sorted_and_consistent() {
    let mut b = tiny_bundle();
    b.test_qa.insert(0, pair("q0", "d1", "Who handled the editing of Oppenheimer?", "Jennifer"));
    let m = model_for(&b, 3);
    let opts = EvalOptions { exemplar_pool: &b.test_qa, exemplar_seed: 1 };
    for mode in [EvalMode::ClosedBook, EvalMode::OpenBook, EvalMode::FewShot { k: 1 }] {
        let r1 = evaluate_qa(&m, "t", &b.test_qa, &b, mode, &opts).unwrap();
        let r2 = evaluate_qa(&m, "t", &b.test_qa, &b, mode, &opts).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["q0", "q1"]);
        for rec in &r1.records {
            assert!(!rec.exact_match || rec.recall);
        }
        let mean = r1.records.iter().map(|r| r.rouge_l).sum::<f64>() / 2.0;
        assert!((r1.rouge_l - mean).abs() < 1e-12);
        assert!(r1.exact_match <= r1.recall);
    }
}

#[test]
fn fresh_model_perplexity_is_near_vocab_size() {
    let words: Vec<String> = (0..250).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::from_texts(words.iter().map(String::as_str));
    assert_eq!(vocab.len(), 256);
    let m = ModelState::<f32>::init(ModelConfig::new(2, 2, 32, 64, vocab.len(), 1), vocab).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let docs: Vec<Document> = (0..20)
        .map(|i| Document {
            id: format!("d{i}"),
            entity_id: format!("e{i}"),
            domain: "x".into(),
            title: "t".into(),
            text: (0..30).map(|_| words.choose(&mut rng).unwrap().as_str()).collect::<Vec<_>>().join(" "),
        })
        .collect();
    let ppl = doc_perplexity(&m, &docs).unwrap();
    assert!((ppl - 256.0).abs() < 0.1 * 256.0, "{ppl}");
    let mut shuffled = docs.clone();
    shuffled.reverse();
    // Batches differ after reordering, so agreement is up to single-precision rounding.
    assert!((doc_perplexity(&m, &shuffled).unwrap() - ppl).abs() < 1e-6 * ppl);
    assert!(ppl >= 1.0);
}

#[test]
fn report_files_are_written() {
    let b = tiny_bundle();
    let m = model_for(&b, 0);
    let r = evaluate_qa(&m, "test_qa", &b.test_qa, &b, EvalMode::ClosedBook, &EvalOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (j, c) = (dir.path().join("r.json"), dir.path().join("r.csv"));
    r.write(&j, &c).unwrap();
    let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(&j).unwrap()).unwrap();
    assert_eq!(back, r);
    let mut rows = csv::Reader::from_path(&c).unwrap();
    assert_eq!(rows.records().count(), 1);
}
