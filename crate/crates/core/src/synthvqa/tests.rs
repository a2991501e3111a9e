use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;

use super::*;
use crate::featstore::detect_concepts;

fn obj(class: &str, color: &str, row: usize, col: usize) -> SceneObject {
    SceneObject {
        class: class.into(),
        color: color.into(),
        row,
        col,
    }
}

fn scene(objects: Vec<SceneObject>) -> Scene {
    Scene {
        scene_id: "s".into(),
        split: Split::Train,
        objects,
        image_vec: Vec::new(),
    }
}

fn small(seed: u64, n: usize) -> (Dataset, SyntheticTables) {
    let tables = build_tables(seed);
    let cfg = GenConfig {
        seed,
        n_scenes: n,
        ..GenConfig::default()
    };
    (generate_dataset(&cfg, &tables.labels).unwrap(), tables)
}

/// Second oracle: reads the question text and a 3×3 grid, not the
/// structured form or the `Scene` helpers.
fn text_oracle(objects: &[SceneObject], question: &str) -> String {
    let mut grid: [[Option<(&str, &str)>; 3]; 3] = [[None; 3]; 3];
    for o in objects {
        grid[o.row][o.col] = Some((&o.class, &o.color));
    }
    let words: Vec<String> = question
        .trim_end_matches('?')
        .split(' ')
        .map(|w| w.to_lowercase())
        .collect();
    let cells = || (0..3).flat_map(|r| (0..3).map(move |c| (r, c)));
    let find = |class: &str| cells().find(|&(r, c)| matches!(grid[r][c], Some((k, _)) if k == class));
    let yn = |b: bool| if b { "yes" } else { "no" }.to_string();
    match words[0].as_str() {
        "how" => {
            let plural = &words[2];
            let class = OBJECT_CLASSES.iter().find(|c| format!("{c}s") == *plural).unwrap();
            cells()
                .filter(|&(r, c)| matches!(grid[r][c], Some((k, _)) if k == *class))
                .count()
                .to_string()
        }
        "what" => {
            let class = words.last().unwrap();
            let (r, c) = find(class).unwrap();
            grid[r][c].unwrap().1.to_string()
        }
        "is" if words[1] == "there" => yn(find(words.last().unwrap()).is_some()),
        "is" => {
            // is the A left of the B
            let (a, b) = (&words[2], &words[6]);
            let (_, ca) = find(a).unwrap();
            let (_, cb) = find(b).unwrap();
            yn(ca < cb)
        }
        other => panic!("unexpected question start {other}"),
    }
}

#[test]
fn answer_vocabulary_has_26_fixed_entries() {
    let v = AnswerVocabulary::standard();
    assert_eq!(v.len(), 26);
    let expected: Vec<&str> = vec![
        "yes", "no", "0", "1", "2", "3", "4", "5", "red", "green", "blue", "yellow", "white", "black", "brown",
        "gray", "chair", "table", "desk", "monitor", "keyboard", "lamp", "sofa", "bed", "cabinet", "cup",
    ];
    assert_eq!(v.answers(), expected.as_slice());
    assert_eq!(v.index_of("cup"), Some(25));
    assert!(AnswerVocabulary::new(vec!["a".into(), "a".into()]).is_err());
}

#[test]
fn oracle_spec_examples() {
    let v = AnswerVocabulary::standard();
    let one_chair = scene(vec![obj("chair", "red", 1, 1)]);
    let q = StructuredQuestion::Exists { class: "chair".into() };
    assert_eq!(q.text(), "Is there a chair?");
    assert_eq!(v.token(oracle_answer(&one_chair, &q, &v).unwrap()), "yes");

    let empty = scene(vec![]);
    let q = StructuredQuestion::Count { class: "chair".into() };
    assert_eq!(q.text(), "How many chairs are there?");
    assert_eq!(v.token(oracle_answer(&empty, &q, &v).unwrap()), "0");

    let s = scene(vec![obj("chair", "red", 0, 0), obj("table", "brown", 0, 2)]);
    let q = StructuredQuestion::LeftOf {
        class: "chair".into(),
        other: "table".into(),
    };
    assert_eq!(q.text(), "Is the chair left of the table?");
    assert_eq!(v.token(oracle_answer(&s, &q, &v).unwrap()), "yes");
    let rev = StructuredQuestion::LeftOf {
        class: "table".into(),
        other: "chair".into(),
    };
    assert_eq!(v.token(oracle_answer(&s, &rev, &v).unwrap()), "no");

    // Same column is not "left of".
    let s = scene(vec![obj("chair", "red", 0, 1), obj("table", "brown", 2, 1)]);
    assert_eq!(v.token(oracle_answer(&s, &q, &v).unwrap()), "no");

    // Color ambiguity resolves to the first object in position order.
    let s = scene(vec![obj("cup", "blue", 0, 2), obj("cup", "white", 1, 0)]);
    let q = StructuredQuestion::ColorOf { class: "cup".into() };
    assert_eq!(v.token(oracle_answer(&s, &q, &v).unwrap()), "blue");
}

#[test]
fn oracle_rejects_unanswerable_forms() {
    let v = AnswerVocabulary::standard();
    let s = scene(vec![obj("chair", "red", 0, 0)]);
    for q in [
        StructuredQuestion::ColorOf { class: "table".into() },
        StructuredQuestion::Exists { class: "spaceship".into() },
        StructuredQuestion::LeftOf {
            class: "chair".into(),
            other: "table".into(),
        },
        StructuredQuestion::LeftOf {
            class: "chair".into(),
            other: "chair".into(),
        },
    ] {
        assert!(matches!(oracle_answer(&s, &q, &v), Err(SynthError::Unanswerable(_))), "{q:?}");
    }
}

#[test]
fn gold_answers_match_oracle_recomputation() {
    let (data, _) = small(3, 400);
    assert_eq!(data.samples.len(), 1200);
    let scenes: BTreeMap<&str, &Scene> = data.scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let mut agree = 0;
    for s in &data.samples {
        let sc = scenes[s.scene_id.as_str()];
        if oracle_answer(sc, &s.structured, &data.answers).unwrap() == s.gold_answer {
            agree += 1;
        }
        assert_eq!(s.question, s.structured.text());
        assert_eq!(s.question_type, s.structured.question_type());
        assert_eq!(data.answers.token(s.gold_answer), s.answer);
        assert!(s.gold_answer < 26);
    }
    assert_eq!(agree, data.samples.len());
}

#[test]
fn independent_oracle_agrees() {
    let (data, _) = small(11, 300);
    let scenes: BTreeMap<&str, &Scene> = data.scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let mut checked = 0;
    for s in data.samples.iter().take(600) {
        let sc = scenes[s.scene_id.as_str()];
        assert_eq!(text_oracle(&sc.objects, &s.question), s.answer, "{}: {}", s.scene_id, s.question);
        checked += 1;
    }
    assert!(checked >= 200);
    let types: HashSet<QuestionType> = data.samples.iter().map(|s| s.question_type).collect();
    assert_eq!(types.len(), 4);
}

#[test]
fn scenes_respect_invariants() {
    let (data, _) = small(5, 500);
    for s in &data.scenes {
        assert!((1..=MAX_OBJECTS).contains(&s.objects.len()));
        let cells: Vec<usize> = s.objects.iter().map(SceneObject::cell).collect();
        assert!(cells.windows(2).all(|w| w[0] < w[1]), "distinct and sorted");
        assert!(s.objects.iter().all(|o| o.row < GRID && o.col < GRID));
        let norm: f64 = s.image_vec.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }
}

#[test]
fn splits_are_disjoint_by_scene() {
    let (data, _) = small(1, 2000);
    let val = data.scenes.iter().filter(|s| s.split == Split::Val).count();
    assert_eq!(val, 400);
    let mut split_of = BTreeMap::new();
    for s in &data.scenes {
        split_of.insert(s.scene_id.clone(), s.split);
    }
    for s in &data.samples {
        assert_eq!(split_of[&s.scene_id], s.split);
    }
    let train_scenes: HashSet<&str> = data.split(Split::Train).map(|s| s.scene_id.as_str()).collect();
    let val_scenes: HashSet<&str> = data.split(Split::Val).map(|s| s.scene_id.as_str()).collect();
    assert!(train_scenes.is_disjoint(&val_scenes));
}

#[test]
fn no_answer_dominates() {
    for seed in [0, 1, 2] {
        let (data, _) = small(seed, 2000);
        let mut counts = vec![0usize; 26];
        for s in &data.samples {
            counts[s.gold_answer] += 1;
        }
        let max = *counts.iter().max().unwrap() as f64 / data.samples.len() as f64;
        assert!(max <= 0.40, "seed {seed}: top answer share {max}");
    }
}

#[test]
fn insufficient_labels_are_reported() {
    let mut tables = build_tables(0);
    let mut partial = crate::featstore::EmbeddingTable::new("labels", IMAGE_DIM);
    for (t, v) in tables.labels.iter() {
        if t != "cup" && t != "gray" {
            partial.insert(t, v).unwrap();
        }
    }
    tables.labels = partial;
    match generate_dataset(&GenConfig::default(), &tables.labels) {
        Err(SynthError::InsufficientLabels(m)) => assert_eq!(m, vec!["cup".to_string(), "gray".to_string()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn single_object_images_detect_their_class() {
    let (data, tables) = small(2, 400);
    let mut n = 0;
    for s in data.scenes.iter().filter(|s| s.objects.len() == 1) {
        let d = detect_concepts(&s.image_vec, &tables.labels, 5).unwrap();
        assert_eq!(d.concepts[0].token, s.objects[0].class);
        n += 1;
    }
    assert!(n > 10);
}

#[test]
fn question_words_are_embedded() {
    let tables = build_tables(0);
    let (data, _) = small(0, 200);
    for s in &data.samples {
        for t in crate::featstore::tokenize(&s.question) {
            assert!(tables.words.contains(&t), "{t}");
        }
    }
    assert_eq!(tables.words.get("chairs"), tables.labels.get("chair"));
    assert_eq!(tables.words.get("red"), tables.labels.get("red"));
}

#[test]
fn synthetic_kg_construction() {
    let kg = build_synthetic_kg(&["chair"], &[]);
    assert!(kg.contains(&crate::kgstore::Triple::new("chair", "AtLocation", "room", 1.0)));
    let kg = build_synthetic_kg(&[], &["red", "green"]);
    assert!(kg.contains(&crate::kgstore::Triple::new("red", "Antonym", "green", 1.0)));

    // Hand count for the default world:
    // AtLocation: one per class = 10
    // Antonym: one per color = 8
    // RelatedTo: room {chair, lamp, sofa} 3 + kitchen {table, cabinet, cup} 3 + desk {monitor, keyboard} 1 = 7
    let kg = build_synthetic_kg(&OBJECT_CLASSES, &COLORS);
    let mut hist = BTreeMap::new();
    for t in &kg {
        *hist.entry(t.relation.as_str()).or_insert(0) += 1;
    }
    assert_eq!(hist, BTreeMap::from([("AtLocation", 10), ("Antonym", 8), ("RelatedTo", 7)]));
    let tables = build_tables(0);
    for t in &kg {
        for tok in [&t.head, &t.relation, &t.tail] {
            assert!(tables.kg.contains(tok), "{tok}");
        }
        t.validate().unwrap();
    }
}

#[test]
fn written_files_are_deterministic_and_load_back() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        seed: 7,
        n_scenes: 60,
        ..GenConfig::default()
    };
    let mut outputs = Vec::new();
    for dir in [a.path(), b.path()] {
        let tables = build_tables(cfg.seed);
        let data = generate_dataset(&cfg, &tables.labels).unwrap();
        let files = write_dataset(dir, &data, &tables, &cfg).unwrap();
        outputs.push((files, data, tables));
    }
    let (fa, data, tables) = &outputs[0];
    let (fb, _, _) = &outputs[1];
    for (pa, pb) in fa.all().iter().zip(fb.all()) {
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(&pb).unwrap(), "{}", pa.display());
    }
    let loaded = LoadedDataset::load(a.path()).unwrap();
    assert_eq!(&loaded.dataset, data);
    assert_eq!(&loaded.tables, tables);
    assert_eq!(loaded.config, cfg);

    let (index, meta) = crate::kgstore::ConceptIndex::load(fa.kg_prefix()).unwrap();
    assert_eq!(index.len(), 25);
    assert_eq!(meta.language, "en");
    let dump = std::fs::read(fa.assertions()).unwrap();
    let ingested = crate::kgstore::ingest(dump.as_slice(), "en").unwrap();
    assert_eq!(ingested.triples, index.triples());

    let other = generate_dataset(&GenConfig { seed: 8, ..cfg.clone() }, &tables.labels).unwrap();
    assert_ne!(&other, data);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_generated_sample_is_solvable(seed in 0u64..10_000, n in 1usize..40, q in 1usize..5) {
        let tables = build_tables(seed);
        let cfg = GenConfig { seed, n_scenes: n, questions_per_scene: q, ..GenConfig::default() };
        let data = generate_dataset(&cfg, &tables.labels).unwrap();
        prop_assert_eq!(data.samples.len(), n * q);
        for s in &data.samples {
            let sc = data.scenes.iter().find(|x| x.scene_id == s.scene_id).unwrap();
            prop_assert_eq!(oracle_answer(sc, &s.structured, &data.answers).unwrap(), s.gold_answer);
            prop_assert_eq!(text_oracle(&sc.objects, &s.question), s.answer.clone());
        }
    }
}
