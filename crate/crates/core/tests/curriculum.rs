mod common;

use common::token_nlls;
use pitlab::corpus::*;
use pitlab::curriculum::*;
use pitlab::eval::doc_perplexity;
use pitlab::model::{ModelConfig, ModelState, Reduction, Scored};
use pitlab::tensor::{Tape, Tensor};
use pitlab::tokenizer::{Vocab, BOS, NEWLINE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn opp_doc() -> Document {
    Document {
        id: "d1".into(),
        entity_id: "e1".into(),
        domain: "film".into(),
        title: "Oppenheimer".into(),
        text: "Oppenheimer is a film. Editing was handled by Jennifer Lame.".into(),
    }
}

fn opp_qa() -> QaPair {
    QaPair {
        id: "q1".into(),
        doc_id: "d1".into(),
        domain: "film".into(),
        question: "Who handled the editing of Oppenheimer?".into(),
        answer: "Jennifer Lame".into(),
    }
}

fn opp_vocab() -> Vocab {
    Vocab::from_texts([opp_doc().text.as_str(), opp_qa().question.as_str()])
}

#[test]
fn qa_example_weights_only_the_answer_and_terminator() {
    let vocab = opp_vocab();
    let ex = build_qa_example(&opp_qa(), &vocab, 64).unwrap();
    assert_eq!(ex.weights.len(), ex.tokens.len() - 1);
    let weighted: Vec<u32> =
        ex.weights.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(i, _)| ex.tokens[i + 1]).collect();
    let mut want = vocab.encode("jennifer lame");
    want.push(NEWLINE);
    assert_eq!(weighted, want);
    assert!(ex.weights.iter().all(|&w| w == 0.0 || w == 1.0));
    assert_eq!(ex.tokens[0], BOS);
    assert!(build_qa_example(&opp_qa(), &vocab, 8).is_err());
}

#[test]
fn doc_examples_uniform_and_answer_weighted() {
    let vocab = opp_vocab();
    let d = opp_doc();
    let u = build_doc_example(&d, &vocab, DocWeighting::Uniform, None, 64).unwrap();
    assert_eq!(u.weights.len(), u.tokens.len() - 1);
    assert_eq!(u.weights.iter().sum::<f64>() / u.weights.len() as f64, 1.0);
    assert_eq!(u.tokens[0], BOS);
    assert_ne!(*u.tokens.last().unwrap(), NEWLINE);

    let answers = vec!["Jennifer Lame".to_string()];
    let w = build_doc_example(&d, &vocab, DocWeighting::upweighted(), Some(&answers), 64).unwrap();
    let span = vocab.encode("jennifer lame");
    let start = w.tokens.windows(2).position(|x| x == span.as_slice()).unwrap();
    for (i, &wt) in w.weights.iter().enumerate() {
        let target = i + 1;
        let inside = target >= start && target < start + 2;
        assert_eq!(wt, if inside { 1.0 } else { 0.5 }, "position {target}");
    }
    assert!(build_doc_example(&d, &vocab, DocWeighting::upweighted(), None, 64).is_err());
    assert!(build_doc_example(&d, &vocab, DocWeighting::Uniform, None, 5).is_err());
}

#[test]
fn open_book_example_layout() {
    let vocab = opp_vocab();
    let ex = build_open_book_example(&opp_qa(), &opp_doc(), &vocab, 64).unwrap();
    let mut want = vec![BOS];
    want.extend(vocab.encode(&opp_doc().text));
    want.push(NEWLINE);
    want.extend(vocab.encode(&qa_prompt(&opp_qa().question)));
    let prompt_len = want.len();
    want.extend(vocab.encode("Jennifer Lame"));
    want.push(NEWLINE);
    assert_eq!(ex.tokens, want);
    assert_eq!(ex.weights.iter().filter(|&&w| w > 0.0).count(), 3);
    assert!(ex.weights[..prompt_len - 1].iter().all(|&w| w == 0.0));
}

#[test]
fn qa_loss_is_the_mean_answer_nll() {
    let vocab = opp_vocab();
    let m = ModelState::<f32>::init(ModelConfig::new(2, 2, 32, 64, vocab.len(), 4), vocab).unwrap();
    let ex = build_qa_example(&opp_qa(), &m.vocab, 64).unwrap();
    let nll = token_nlls(&m.cast::<f64>(), &ex.tokens);
    let (num, den) = nll.iter().zip(&ex.weights).fold((0.0, 0.0), |(n, d), (l, w)| (n + l * w, d + w));
    let loss = m.loss(&[ex.scored()], Reduction::ExampleMean).unwrap();
    assert!((loss - num / den).abs() < 1e-5, "{loss} vs {}", num / den);
}

#[test]
fn zero_weight_positions_contribute_nothing() {
    // Perturbing logits at zero-weight positions leaves the loss and the
    // gradient at the weighted positions unchanged.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, v) = (7, 9);
    let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
    let weights = [0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
    let base: Vec<f64> = (0..n * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let run = |logits: Vec<f64>| {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[n, v], logits).unwrap(), true);
        let l = tape.cross_entropy(x, &targets, &weights).unwrap();
        tape.backward(l).unwrap();
        (tape.value(l).unwrap().item(), tape.grad(x).unwrap().into_data())
    };
    let (l0, g0) = run(base.clone());
    let mut perturbed = base;
    for (row, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            for j in 0..v {
                perturbed[row * v + j] += rng.gen_range(-50.0..50.0);
            }
        }
    }
    let (l1, g1) = run(perturbed);
    assert_eq!(l0, l1);
    for (row, &w) in weights.iter().enumerate() {
        let r = row * v..(row + 1) * v;
        if w == 0.0 {
            assert!(g1[r].iter().all(|&g| g == 0.0));
        } else {
            assert_eq!(g0[r.clone()], g1[r]);
        }
    }
}

fn small_bundle() -> CorpusBundle {
    let counts = CorpusCounts {
        oldworld: [("film".to_string(), 6), ("music".to_string(), 3)].into(),
        train: [("film".to_string(), 6), ("politics".to_string(), 3)].into(),
        test: 4,
        retention: 6,
        qa_per_entity: 2,
        min_attributes: 3,
        max_attributes: 4,
        ..CorpusCounts::default()
    };
    generate_corpus(&Schema::builtin(), &counts, 21).unwrap().bundle
}

fn small_model(b: &CorpusBundle) -> ModelState<f32> {
    let vocab = Vocab::build(b);
    ModelState::init(ModelConfig::new(1, 2, 16, 128, vocab.len(), 0), vocab).unwrap()
}

#[test]
fn doc_loss_is_token_mean_nll_and_perplexity_is_its_exp() {
    let b = small_bundle();
    let m = small_model(&b);
    let examples: Vec<TrainExample> =
        b.test_docs.iter().map(|d| build_doc_example(d, &m.vocab, DocWeighting::Uniform, None, 128).unwrap()).collect();
    let all: Vec<f64> = examples.iter().flat_map(|e| token_nlls(&m.cast::<f64>(), &e.tokens)).collect();
    let oracle = all.iter().sum::<f64>() / all.len() as f64;
    let batch: Vec<Scored> = examples.iter().map(|e| e.scored()).collect();
    let l_d = m.loss(&batch, Reduction::TokenMean).unwrap();
    assert!((l_d - oracle).abs() < 1e-5);
    let ppl = doc_perplexity(&m, &b.test_docs).unwrap();
    assert!((ppl - l_d.exp()).abs() < 1e-6 * ppl);
    // A fresh model is close to uniform over the vocabulary.
    let ln_v = (m.config.vocab_size as f64).ln();
    assert!((l_d - ln_v).abs() < 0.1 * ln_v);
}

fn arrange_ids(
    groups: &[Group<String>],
    a: Arrangement,
    p: QaPosition,
    epochs: usize,
    seed: Option<u64>,
) -> Vec<String> {
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    arrange(groups, a, p, epochs, rng.as_mut()).unwrap()
}

proptest! {
    #[test]
    fn arranged_streams_repeat_each_item_epochs_times(
        sizes in prop::collection::vec(1usize..4, 1..6),
        epochs in 1usize..5,
        seed in any::<u64>(),
        grouped in any::<bool>(),
        before in any::<bool>(),
    ) {
        let groups: Vec<Group<String>> = sizes.iter().enumerate().map(|(g, &k)| Group {
            qas: (0..k).map(|i| format!("Q{g}.{i}")).collect(),
            doc: format!("D{g}"),
        }).collect();
        let a = if grouped { Arrangement::Grouped } else { Arrangement::Interleaved };
        let p = if before { QaPosition::Before } else { QaPosition::After };
        let s = arrange_ids(&groups, a, p, epochs, Some(seed));
        let total: usize = sizes.iter().map(|k| k + 1).sum();
        prop_assert_eq!(s.len(), epochs * total);
        for g in &groups {
            for item in g.qas.iter().chain(std::iter::once(&g.doc)) {
                prop_assert_eq!(s.iter().filter(|x| *x == item).count(), epochs);
            }
            // Position: every QA of a group precedes (or follows) its document
            // within the same cycle or block.
            let doc_pos: Vec<usize> = s.iter().enumerate().filter(|(_, x)| **x == g.doc).map(|(i, _)| i).collect();
            let qa_pos: Vec<usize> = s.iter().enumerate().filter(|(_, x)| g.qas.contains(x)).map(|(i, _)| i).collect();
            if before {
                prop_assert!(qa_pos[0] < doc_pos[0]);
            } else {
                prop_assert!(doc_pos[0] < qa_pos[0]);
            }
        }
    }
}

#[test]
fn interleaved_and_grouped_orders() {
    let groups = vec![
        Group { qas: vec!["Q1".to_string()], doc: "D1".to_string() },
        Group { qas: vec!["Q2".to_string()], doc: "D2".to_string() },
    ];
    let s = arrange_ids(&groups, Arrangement::Interleaved, QaPosition::Before, 3, None);
    assert_eq!(s, ["Q1", "D1", "Q2", "D2"].repeat(3));
    let s = arrange_ids(&groups, Arrangement::Grouped, QaPosition::Before, 3, None);
    assert_eq!(s, ["Q1", "Q1", "Q1", "D1", "D1", "D1", "Q2", "Q2", "Q2", "D2", "D2", "D2"]);
    let s = arrange_ids(&groups, Arrangement::Grouped, QaPosition::After, 2, None);
    assert_eq!(s, ["D1", "D1", "Q1", "Q1", "D2", "D2", "Q2", "Q2"]);
    let s = arrange_ids(&groups, Arrangement::Interleaved, QaPosition::After, 1, None);
    assert_eq!(s, ["D1", "Q1", "D2", "Q2"]);
}

#[test]
fn arranged_phase_schedule_covers_every_example() {
    let b = small_bundle();
    let m = small_model(&b);
    let o = PresetOptions::default();
    let spec = preset("pit_grouped_before", &o).unwrap();
    let phase = &spec.phases[0];
    let ex = phase_examples(phase, &b, &m.vocab, 128).unwrap();
    let sched = phase_schedule(phase, &ex, 3).unwrap();
    assert_eq!(sched.len(), 3);
    let flat: Vec<usize> = sched.concat();
    assert_eq!(flat.len(), 3 * ex.len());
    for i in 0..ex.len() {
        assert_eq!(flat.iter().filter(|&&j| j == i).count(), 3);
    }
    // Grouped/before: the first document is preceded by its QA block.
    let first_doc = flat.iter().position(|&i| ex[i].kind == ExampleKind::Document).unwrap();
    assert!(flat[..first_doc]
        .iter()
        .all(|&i| ex[i].kind == ExampleKind::Qa && ex[i].doc_id == ex[flat[first_doc]].doc_id));
}

#[test]
fn cross_domain_presets_train_on_other_domains() {
    let b = small_bundle();
    let m = small_model(&b);
    let spec = preset("pit_cross", &PresetOptions::default()).unwrap();
    let ex = phase_examples(&spec.phases[0], &b, &m.vocab, 128).unwrap();
    assert!(!ex.is_empty());
    let film: Vec<&str> = b.train_docs.iter().filter(|d| d.domain == "film").map(|d| d.id.as_str()).collect();
    assert!(ex.iter().all(|e| !film.contains(&e.doc_id.as_str())));
    let ex = phase_examples(&preset("pit", &PresetOptions::default()).unwrap().phases[0], &b, &m.vocab, 128).unwrap();
    assert!(ex.iter().all(|e| film.contains(&e.doc_id.as_str())));
}

#[test]
fn presets_follow_the_learning_rate_rule_and_epochs() {
    let o = PresetOptions::default();
    for name in preset_names() {
        let s = preset(name, &o).unwrap();
        for p in &s.phases {
            let want = if p.has_docs() { DOC_LR } else { QA_LR };
            assert_eq!(p.lr, want, "{name}/{}", p.name);
            assert_eq!(p.batch_size, DEFAULT_BATCH);
        }
    }
    let s = preset("pit", &o).unwrap();
    assert_eq!(s.phases.iter().map(|p| p.epochs).collect::<Vec<_>>(), [3, 10]);
    let s = preset("pit_minus", &o).unwrap();
    assert_eq!(
        s.phases.iter().map(|p| p.name.as_str()).collect::<Vec<_>>(),
        ["train_qa+train_doc", "train_qa", "test_doc"]
    );
    let scaled = preset("standard_it", &PresetOptions { lr_scale: 10.0, ..o.clone() }).unwrap();
    assert_eq!(scaled.phases[1].lr, 10.0 * QA_LR);
}

#[test]
fn spec_validation_catches_bad_phases() {
    let b = small_bundle();
    let mut s = preset("pit", &PresetOptions::default()).unwrap();
    s.validate(&b).unwrap();
    s.phases[0].epochs = 0;
    assert!(s.validate(&b).is_err());
    let mut empty = b.clone();
    empty.train_qa.clear();
    let s = preset("pit", &PresetOptions::default()).unwrap();
    assert!(s.validate(&empty).is_err());
    let s = CurriculumSpec { phases: vec![], ..s };
    assert!(s.validate(&b).is_err());
}

#[test]
fn empty_phase_is_an_error_and_runs_are_deterministic() {
    let b = small_bundle();
    let o = PresetOptions { doc_epochs: 2, pit_epochs: 1, batch_size: 4, lr_scale: 30.0, ..PresetOptions::default() };
    let spec = preset("pit", &o).unwrap();
    let run = || {
        let mut m = small_model(&b);
        let mut hook = |m: &ModelState<f32>, _: &str, _: usize| {
            Ok(Some(serde_json::json!(doc_perplexity(m, &b.test_docs).unwrap())))
        };
        let logs = run_curriculum(&mut m, &spec, &b, &mut hook).unwrap();
        (m, logs)
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(l1, l2);
    assert_eq!(m1.params(), m2.params());
    assert_eq!(l1.len(), 2);
    assert_eq!(l1[1].epochs.len(), 2);
    assert!(l1.iter().all(|p| p.epochs.iter().all(|e| e.mean_loss.is_finite())));

    let mut m = small_model(&b);
    let none: Vec<TrainExample> = Vec::new();
    let mut hook = |_: &ModelState<f32>, _: &str, _: usize| Ok(None);
    assert!(train_schedule(&mut m, "empty", &none, &[vec![]], 1e-3, 4, &mut hook).is_err());
}

#[test]
fn document_training_lowers_perplexity() {
    let b = small_bundle();
    let mut m = small_model(&b);
    let before = doc_perplexity(&m, &b.test_docs).unwrap();
    let phase = PhaseSpec {
        name: "test_doc".into(),
        datasets: vec![DatasetRef::new(Split::TestDocs, DomainFilter::All)],
        mixing: Mixing::Shuffled,
        arrangement: Arrangement::None,
        qa_position: QaPosition::Before,
        epochs: 30,
        lr: 1e-2,
        batch_size: 2,
    };
    let mut hook = |_: &ModelState<f32>, _: &str, _: usize| Ok(None);
    let (log, opt) = run_phase(&mut m, &phase, &b, 1, &mut hook).unwrap();
    assert_eq!(opt.t, log.steps);
    assert_eq!(log.steps, 30 * 2);
    let after = doc_perplexity(&m, &b.test_docs).unwrap();
    assert!(after < before / 10.0, "{before} -> {after}");
}
