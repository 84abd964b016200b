use std::collections::{BTreeMap, HashMap};
use std::fs;

use pitlab::corpus::*;
use pitlab::eval::normalize;
use proptest::prelude::*;

fn counts() -> CorpusCounts {
    CorpusCounts {
        oldworld: [("film".to_string(), 60), ("politics".to_string(), 20), ("music".to_string(), 20)].into(),
        train: [("film".to_string(), 30), ("politics".to_string(), 10), ("music".to_string(), 10)].into(),
        test: 16,
        retention: 24,
        ..CorpusCounts::default()
    }
}

/// Recovers attribute values from a document by locating each fact
/// template's fixed text around the `{value}` slot.
fn extract(domain: &DomainSchema, title: &str, text: &str) -> BTreeMap<String, String> {
    let mut found = BTreeMap::new();
    for a in &domain.attributes {
        for t in a.coref.iter().chain(&a.titled) {
            let t = t.replace("{title}", title);
            let (pre, post) = t.split_once("{value}").unwrap();
            let mut from = 0;
            while let Some(i) = text[from..].find(pre) {
                let start = from + i + pre.len();
                // The value ends at the template suffix, which closes a sentence.
                if let Some(j) = text[start..].find(post) {
                    let end = start + j + post.len();
                    if end == text.len() || text[end..].starts_with(' ') {
                        found.insert(a.name.clone(), text[start..start + j].to_string());
                    }
                }
                from = start;
            }
        }
    }
    found
}

/// Whole-word containment: "8 million" does not occur in "18 million".
fn contains_words(hay: &str, needle: &str) -> bool {
    format!(" {hay} ").contains(&format!(" {needle} "))
}

#[test]
fn extraction_oracle_recovers_every_attribute() {
    let schema = Schema::builtin();
    let g = generate_corpus(&schema, &counts(), 3).unwrap();
    let docs = g.bundle.doc_index();
    for (_, e) in &g.entities {
        let d = docs[format!("doc-{}", e.id).as_str()];
        let got = extract(schema.domain(&e.domain).unwrap(), &e.title, &d.text);
        let want: BTreeMap<String, String> = e.attributes.iter().cloned().collect();
        assert_eq!(got, want, "{}", d.text);
    }
}

#[test]
fn every_answer_is_a_substring_of_its_document() {
    let g = generate_corpus(&Schema::builtin(), &counts(), 4).unwrap();
    let b = &g.bundle;
    for s in [Split::OldworldQa, Split::TrainQa, Split::TestQa, Split::RetentionQa] {
        for q in b.qas(s) {
            let d = b.doc(&q.doc_id).unwrap();
            assert!(d.text.contains(&q.answer), "{} / {}", q.answer, d.text);
            assert!(q.question.contains(&d.title));
        }
    }
}

#[test]
fn test_answers_do_not_leak_into_other_documents_of_the_same_slot_and_domain() {
    let schema = Schema::builtin();
    let g = generate_corpus(&schema, &counts(), 5).unwrap();
    let test_split: HashMap<&str, &Entity> =
        g.entities.iter().filter(|(s, _)| *s == Split::TestDocs).map(|(_, e)| (e.id.as_str(), e)).collect();
    assert_eq!(test_split.len(), 16);
    let others: Vec<&Entity> = g.entities.iter().filter(|(s, _)| *s != Split::TestDocs).map(|(_, e)| e).collect();
    let docs = g.bundle.doc_index();
    for q in &g.bundle.test_qa {
        let attr = q.id.rsplit('-').next().unwrap();
        let ans = normalize(&q.answer);
        for e in others.iter().filter(|e| e.domain == q.domain) {
            let d = docs[format!("doc-{}", e.id).as_str()];
            let slot = extract(schema.domain(&e.domain).unwrap(), &e.title, &d.text);
            if let Some(v) = slot.get(attr) {
                assert!(!contains_words(&normalize(v), &ans), "{ans} leaks via {} {attr}", e.id);
            }
        }
    }
}

#[test]
fn generation_is_deterministic_and_sized() {
    let c = counts();
    let a = generate_corpus(&Schema::builtin(), &c, 9).unwrap().bundle;
    let b = generate_corpus(&Schema::builtin(), &c, 9).unwrap().bundle;
    assert_eq!(a, b);
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.oldworld_docs.len(), 100);
    assert_eq!(a.train_docs.len(), 50);
    assert_eq!(a.test_docs.len(), 16);
    assert_eq!(a.test_qa.len(), 16 * c.qa_per_entity);
    assert_eq!(a.retention_qa.len(), 24);
    let other = generate_corpus(&Schema::builtin(), &c, 10).unwrap().bundle;
    assert_ne!(a.hash(), other.hash());
}

#[test]
fn export_import_round_trip() {
    let b = generate_corpus(&Schema::builtin(), &counts(), 11).unwrap().bundle;
    let dir = tempfile::tempdir().unwrap();
    let manifest = b.export(dir.path()).unwrap();
    let back = import_bundle(&manifest).unwrap();
    assert_eq!(back, b);
    assert_eq!(back.hash(), b.hash());
}

fn fixture(dir: &std::path::Path, docs: &[&str], qas: &[&str]) -> std::path::PathBuf {
    fs::write(dir.join("docs.jsonl"), docs.join("\n")).unwrap();
    fs::write(dir.join("qa.jsonl"), qas.join("\n")).unwrap();
    let m = dir.join("bundle.json");
    fs::write(&m, r#"{"test_docs": "docs.jsonl", "test_qa": "qa.jsonl"}"#).unwrap();
    m
}

const DOC: &str = r#"{"id":"d1","entity_id":"e1","domain":"film","title":"Oppenheimer","text":"Oppenheimer is a film. Editing was handled by Jennifer Lame."}"#;

#[test]
fn imports_a_three_document_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let docs = [
        DOC,
        r#"{"id":"d2","entity_id":"e2","domain":"film","title":"Barbie","text":"Barbie is a film."}"#,
        r#"{"id":"d3","entity_id":"e3","domain":"film","title":"Tenet","text":"Tenet is a film."}"#,
    ];
    let qa = [
        r#"{"id":"q1","doc_id":"d1","domain":"film","question":"Who handled the editing of Oppenheimer?","answer":"Jennifer Lame"}"#,
    ];
    let b = import_bundle(&fixture(dir.path(), &docs, &qa)).unwrap();
    assert_eq!(b.test_docs.len(), 3);
    assert_eq!(b.test_qa.len(), 1);
}

#[test]
fn dangling_doc_id_names_the_qa() {
    let dir = tempfile::tempdir().unwrap();
    let qa = [r#"{"id":"q-missing","doc_id":"nope","domain":"film","question":"Who?","answer":"x"}"#];
    match import_bundle(&fixture(dir.path(), &[DOC], &qa)) {
        Err(CorpusError::Validation(issues)) => {
            assert!(issues.iter().any(|i| i.id.as_deref() == Some("q-missing")), "{issues:?}");
        }
        other => panic!("expected validation error, got {other:?}"),
    }
}

#[test]
fn malformed_and_duplicate_records_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let res = import_bundle(&fixture(dir.path(), &[DOC, DOC, "{not json"], &[]));
    match res {
        Err(CorpusError::Validation(issues)) => {
            assert!(issues.iter().any(|i| i.line == Some(3)), "{issues:?}");
            assert!(issues.iter().any(|i| i.message.contains("duplicate")), "{issues:?}");
        }
        other => panic!("expected validation error, got {other:?}"),
    }
}

#[test]
fn oppenheimer_editor_question() {
    let schema = Schema::builtin();
    let e = Entity {
        id: "e-opp".into(),
        domain: "film".into(),
        title: "Oppenheimer".into(),
        attributes: vec![("editor".into(), "Jennifer Lame".into()), ("director".into(), "Christopher Nolan".into())],
    };
    let film = schema.domain("film").unwrap();
    let q = make_qa(film, &e, "editor").unwrap();
    assert_eq!(q.question, "Who handled the editing of Oppenheimer?");
    assert_eq!(q.answer, "Jennifer Lame");
    assert!(make_qa(film, &e, "director").unwrap().question.contains("Oppenheimer"));
    assert!(matches!(make_qa(film, &e, "budget"), Err(CorpusError::UnknownAttribute { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn any_seed_gives_a_valid_leak_free_bundle(seed in 0u64..10_000) {
        let g = generate_corpus(&Schema::builtin(), &counts(), seed).unwrap();
        prop_assert!(g.bundle.validate().is_empty());
        let test_answers: Vec<(String, String, String)> = g.bundle.test_qa.iter()
            .map(|q| (q.domain.clone(), q.id.rsplit('-').next().unwrap().to_string(), normalize(&q.answer)))
            .collect();
        for (s, e) in &g.entities {
            if *s == Split::TestDocs { continue; }
            for (_, attr, ans) in test_answers.iter().filter(|t| t.0 == e.domain) {
                if let Some(v) = e.value(attr) {
                    prop_assert!(!contains_words(&normalize(v), ans));
                }
            }
        }
    }
}
