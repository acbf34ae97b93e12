use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Barrier};

use mslayout_core::corpus::{
    compute_region_statistics, parse_annotations, render_annotations, Collection,
    DocumentAnnotation, Polygon, RegionClass, RegionInstance,
};
use mslayout_service::store::{Mode, Submission};
use mslayout_service::{ServiceError, Store};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn doc(id: &str, collection: Collection) -> DocumentAnnotation {
    DocumentAnnotation {
        doc_id: id.into(),
        image_path: format!("images/{id}.png"),
        width: 200,
        height: 100,
        collection,
        script: "Devanagari".into(),
        regions: Vec::new(),
    }
}

fn catalog(n: usize) -> Vec<DocumentAnnotation> {
    (0..n)
        .map(|i| {
            let coll = Collection::ALL[i % Collection::ALL.len()];
            doc(&format!("d{i}"), coll)
        })
        .collect()
}

fn rect(class: RegionClass, x: f64, y: f64) -> RegionInstance {
    RegionInstance::new(class, Polygon::rectangle(x, y, x + 20.0, y + 10.0).unwrap())
}

fn submission(mode: Mode, regions: Vec<RegionInstance>) -> Submission {
    Submission {
        mode,
        session_id: None,
        regions,
    }
}

fn random_regions(rng: &mut ChaCha8Rng) -> Vec<RegionInstance> {
    (0..rng.gen_range(0..5))
        .map(|_| {
            let class = RegionClass::ALL[rng.gen_range(0..RegionClass::COUNT)];
            rect(class, rng.gen_range(0.0..150.0), rng.gen_range(0.0..80.0))
        })
        .collect()
}

/// Drives `n` random submissions and returns the accepted revisions in order.
fn random_store(n: usize, docs: usize, seed: u64) -> (Store, Vec<mslayout_service::store::AnnotationRevision>) {
    let store = Store::open(catalog(docs), None, None).unwrap();
    let ids: Vec<String> = (0..3)
        .map(|i| store.register(&format!("annotator {i}")).unwrap().account.annotator_id)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::new();
    for _ in 0..n {
        let d = format!("d{}", rng.gen_range(0..docs));
        let who = &ids[rng.gen_range(0..ids.len())];
        let mode = if rng.gen_bool(0.5) { Mode::Correction } else { Mode::Fresh };
        match store.submit(who, &d, submission(mode, random_regions(&mut rng))) {
            Ok(rev) => log.push(rev),
            Err(ServiceError::Conflict(_)) => assert_eq!(mode, Mode::Correction),
            Err(e) => panic!("{e}"),
        }
    }
    (store, log)
}

#[test]
fn registration_assigns_distinct_ids() {
    let store = Store::open(Vec::new(), None, None).unwrap();
    let a = store.register("asha").unwrap();
    let b = store.register("asha").unwrap();
    assert_eq!(a.account.display_name, "asha");
    assert_ne!(a.account.annotator_id, b.account.annotator_id);
    assert_ne!(a.token, b.token);
    assert!(matches!(store.register("  "), Err(ServiceError::Validation(_))));
}

#[test]
fn concurrent_registrations_get_distinct_ids() {
    let store = Arc::new(Store::open(Vec::new(), None, None).unwrap());
    let handles: Vec<_> = (0..100)
        .map(|i| {
            let store = store.clone();
            std::thread::spawn(move || store.register(&format!("user{}", i % 7)).unwrap())
        })
        .collect();
    let ids: HashSet<String> = handles
        .into_iter()
        .map(|h| h.join().unwrap().account.annotator_id)
        .collect();
    assert_eq!(ids.len(), 100);
    assert_eq!(store.accounts().len(), 100);
}

#[test]
fn fresh_then_correction_records_parentage() {
    let store = Store::open(catalog(2), None, None).unwrap();
    let who = store.register("asha").unwrap().account.annotator_id;
    assert_eq!(store.current("d0").unwrap(), None);
    let r1 = store
        .submit(&who, "d0", submission(Mode::Fresh, vec![rect(RegionClass::Hole, 5.0, 5.0)]))
        .unwrap();
    assert_eq!((r1.revision, r1.parent), (1, None));
    let r2 = store
        .submit(&who, "d0", submission(Mode::Correction, vec![rect(RegionClass::Hole, 6.0, 5.0)]))
        .unwrap();
    assert_eq!((r2.revision, r2.parent, r2.mode), (2, Some(1), Mode::Correction));
    assert_eq!(store.current("d0").unwrap(), Some(r2.clone()));
    assert_eq!(store.history("d0").unwrap(), vec![r1, r2]);
}

#[test]
fn correction_without_prior_revision_conflicts() {
    let store = Store::open(catalog(1), None, None).unwrap();
    let who = store.register("asha").unwrap().account.annotator_id;
    let err = store.submit(&who, "d0", submission(Mode::Correction, vec![])).unwrap_err();
    assert!(matches!(err, ServiceError::Conflict(_)), "{err}");
    assert!(store.history("d0").unwrap().is_empty());
}

#[test]
fn invalid_region_reports_its_index() {
    let store = Store::open(catalog(1), None, None).unwrap();
    let who = store.register("asha").unwrap().account.annotator_id;
    let regions = vec![
        rect(RegionClass::Hole, 5.0, 5.0),
        rect(RegionClass::Picture, 500.0, 500.0),
    ];
    let err = store.submit(&who, "d0", submission(Mode::Fresh, regions)).unwrap_err();
    assert!(matches!(err, ServiceError::InvalidRegion { index: 1, .. }), "{err}");
    let err = store.submit(&who, "nope", submission(Mode::Fresh, vec![])).unwrap_err();
    assert!(matches!(err, ServiceError::NotFound(_)));
}

#[test]
fn out_of_bounds_vertices_are_clamped_on_submit() {
    let store = Store::open(catalog(1), None, None).unwrap();
    let who = store.register("asha").unwrap().account.annotator_id;
    let region = RegionInstance::new(
        RegionClass::Decorator,
        Polygon::rectangle(190.0, 90.0, 230.0, 120.0).unwrap(),
    );
    let rev = store.submit(&who, "d0", submission(Mode::Fresh, vec![region])).unwrap();
    assert_eq!(rev.regions[0].boundary.bounds(), (190.0, 90.0, 200.0, 100.0));
}

#[test]
fn concurrent_submissions_get_consecutive_revisions() {
    for _ in 0..20 {
        let store = Arc::new(Store::open(catalog(1), None, None).unwrap());
        let seed = store.register("seed").unwrap().account.annotator_id;
        store.submit(&seed, "d0", submission(Mode::Fresh, vec![])).unwrap();
        let barrier = Arc::new(Barrier::new(2));
        let handles: Vec<_> = [RegionClass::Hole, RegionClass::Picture]
            .into_iter()
            .map(|class| {
                let (store, barrier) = (store.clone(), barrier.clone());
                let who = store.register("w").unwrap().account.annotator_id;
                std::thread::spawn(move || {
                    barrier.wait();
                    store
                        .submit(&who, "d0", submission(Mode::Correction, vec![rect(class, 1.0, 1.0)]))
                        .unwrap()
                })
            })
            .collect();
        let mut revs: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        revs.sort_by_key(|r| r.revision);
        assert_eq!((revs[0].revision, revs[1].revision), (2, 3));
        assert_eq!(revs[0].parent, Some(1));
        assert_eq!(revs[1].parent, Some(2));
        let history = store.history("d0").unwrap();
        assert_eq!(history.len(), 3);
        assert_eq!(&history[1..], &revs[..]);
        assert_eq!(store.current("d0").unwrap().unwrap(), revs[1]);
    }
}

#[test]
fn analytics_of_an_empty_store_are_zero() {
    let store = Store::open(catalog(3), None, None).unwrap();
    let a = store.analytics();
    assert_eq!(a.revisions, 0);
    assert!(a.combined.values().all(|&n| n == 0));
    assert_eq!(a.combined.len(), RegionClass::COUNT);
    assert!(a.region_counts.iter().all(|c| c.counts.values().all(|&n| n == 0)));
    assert!(a.annotators.is_empty() && a.open_sessions.is_empty());
    assert!(a.progress.iter().all(|p| p.annotated == 0 && p.total == 1));
}

#[test]
fn analytics_count_current_regions() {
    let store = Store::open(catalog(1), None, None).unwrap();
    let who = store.register("asha").unwrap().account.annotator_id;
    store
        .submit(&who, "d0", submission(Mode::Fresh, vec![rect(RegionClass::Picture, 0.0, 0.0)]))
        .unwrap();
    let regions = vec![
        rect(RegionClass::CharacterLineSegment, 0.0, 0.0),
        rect(RegionClass::CharacterLineSegment, 0.0, 20.0),
        rect(RegionClass::Hole, 50.0, 50.0),
    ];
    store.submit(&who, "d0", submission(Mode::Correction, regions)).unwrap();
    let a = store.analytics();
    let nonzero: BTreeMap<RegionClass, usize> =
        a.combined.into_iter().filter(|&(_, n)| n > 0).collect();
    assert_eq!(
        nonzero,
        BTreeMap::from([(RegionClass::CharacterLineSegment, 2), (RegionClass::Hole, 1)])
    );
    assert_eq!(a.annotators[0].revisions, 2);
    assert_eq!(a.annotators[0].regions, 4);
    assert_eq!(a.annotators[0].documents, 1);
}

#[test]
fn analytics_match_a_replay_of_the_revision_log() {
    let (store, log) = random_store(200, 12, 5);
    assert!(log.len() > 150);
    let summary = store.analytics();
    assert_eq!(summary.revisions, log.len());

    let mut latest: BTreeMap<&str, &[RegionInstance]> = BTreeMap::new();
    let mut per_annotator: BTreeMap<&str, (HashSet<&str>, usize, usize)> = BTreeMap::new();
    for rev in &log {
        latest.insert(&rev.doc_id, &rev.regions);
        let e = per_annotator.entry(&rev.annotator_id).or_default();
        e.0.insert(&rev.doc_id);
        e.1 += 1;
        e.2 += rev.regions.len();
    }
    let docs = catalog(12);
    let mut expected: BTreeMap<(Collection, RegionClass), usize> = BTreeMap::new();
    for d in &docs {
        for r in latest.get(d.doc_id.as_str()).copied().unwrap_or(&[]) {
            *expected.entry((d.collection, r.region_class)).or_default() += 1;
        }
    }
    for row in &summary.region_counts {
        for (&class, &n) in &row.counts {
            assert_eq!(n, expected.get(&(row.collection, class)).copied().unwrap_or(0));
        }
    }
    for class in RegionClass::ALL {
        let total: usize = expected.iter().filter(|(k, _)| k.1 == class).map(|(_, n)| n).sum();
        assert_eq!(summary.combined[&class], total);
    }
    assert_eq!(summary.annotators.len(), per_annotator.len());
    for a in &summary.annotators {
        let (docs, revs, regions) = &per_annotator[a.annotator_id.as_str()];
        assert_eq!((a.documents, a.revisions, a.regions), (docs.len(), *revs, *regions));
    }
    for p in &summary.progress {
        let annotated = docs
            .iter()
            .filter(|d| d.collection == p.collection && latest.contains_key(d.doc_id.as_str()))
            .count();
        assert_eq!(p.annotated, annotated);
    }
}

#[test]
fn export_round_trips_and_agrees_with_analytics() {
    let empty = Store::open(Vec::new(), None, None).unwrap();
    assert!(parse_annotations(&render_annotations(&empty.export())).unwrap().is_empty());

    let (store, _) = random_store(50, 6, 9);
    let exported = parse_annotations(&render_annotations(&store.export())).unwrap();
    assert_eq!(exported, store.export());
    let stats = compute_region_statistics(&exported);
    let summary = store.analytics();
    for class in RegionClass::ALL {
        assert_eq!(summary.combined[&class], stats.combined(class));
    }
    for row in &summary.region_counts {
        for (&class, &n) in &row.counts {
            assert_eq!(n, stats.count(class, row.collection));
        }
    }

    let reimported = Store::open(exported.clone(), None, None).unwrap();
    assert_eq!(reimported.export(), exported);
}

#[test]
fn imported_corpus_exports_unchanged() {
    let mut docs = catalog(4);
    docs[1].regions = vec![rect(RegionClass::BoundaryLine, 3.0, 3.0)];
    docs[2].regions = vec![rect(RegionClass::LibraryMarker, 30.0, 3.0), rect(RegionClass::Hole, 9.0, 40.0)];
    let store = Store::open(docs.clone(), None, None).unwrap();
    assert_eq!(store.export(), docs);
    assert_eq!(store.current("d0").unwrap(), None);
    assert_eq!(store.current("d1").unwrap().unwrap().revision, 1);
}

#[test]
fn sessions_track_touched_documents_and_counts() {
    let store = Store::open(catalog(2), None, None).unwrap();
    let who = store.register("asha").unwrap().account.annotator_id;
    let other = store.register("ravi").unwrap().account.annotator_id;
    let s = store.open_session(&who).unwrap();
    let sub = |mode, regions| Submission {
        mode,
        session_id: Some(s.session_id.clone()),
        regions,
    };
    let a = rect(RegionClass::Hole, 1.0, 1.0);
    let b = rect(RegionClass::Picture, 40.0, 1.0);
    store.submit(&who, "d0", sub(Mode::Fresh, vec![a.clone()])).unwrap();
    store
        .submit(&who, "d0", sub(Mode::Correction, vec![rect(RegionClass::Hole, 2.0, 1.0), b]))
        .unwrap();
    store.submit(&who, "d1", sub(Mode::Fresh, vec![a])).unwrap();
    let err = store.submit(&other, "d1", sub(Mode::Fresh, vec![])).unwrap_err();
    assert!(matches!(err, ServiceError::Forbidden(_)));

    assert_eq!(store.analytics().open_sessions.len(), 1);
    let closed = store.close_session(&who, &s.session_id).unwrap();
    assert!(closed.ended_at.unwrap() >= closed.started_at);
    assert_eq!(closed.docs_touched.len(), 2);
    assert_eq!((closed.regions_created, closed.regions_edited), (3, 1));
    assert!(store.analytics().open_sessions.is_empty());
    assert!(matches!(
        store.submit(&who, "d0", sub(Mode::Fresh, vec![])),
        Err(ServiceError::Conflict(_))
    ));
    assert!(matches!(store.close_session(&who, &s.session_id), Err(ServiceError::Conflict(_))));
}

#[test]
fn unchanged_regions_keep_their_attribution() {
    let store = Store::open(catalog(1), None, None).unwrap();
    let first = store.register("asha").unwrap().account.annotator_id;
    let second = store.register("ravi").unwrap().account.annotator_id;
    let a = rect(RegionClass::Hole, 1.0, 1.0);
    store.submit(&first, "d0", submission(Mode::Fresh, vec![a.clone()])).unwrap();
    let rev = store
        .submit(&second, "d0", submission(Mode::Correction, vec![a, rect(RegionClass::Picture, 50.0, 5.0)]))
        .unwrap();
    assert_eq!(rev.regions[0].annotator_id.as_deref(), Some(first.as_str()));
    assert_eq!(rev.regions[0].revision, 1);
    assert_eq!(rev.regions[1].annotator_id.as_deref(), Some(second.as_str()));
    assert_eq!(rev.regions[1].revision, 2);
}

#[test]
fn log_replay_restores_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.jsonl");
    let mut docs = catalog(3);
    docs[0].regions = vec![rect(RegionClass::Hole, 1.0, 1.0)];
    let (export, history, sessions, token) = {
        let store = Store::open(docs.clone(), None, Some(&path)).unwrap();
        let reg = store.register("asha").unwrap();
        let s = store.open_session(&reg.account.annotator_id).unwrap();
        store
            .submit(
                &reg.account.annotator_id,
                "d0",
                Submission {
                    mode: Mode::Correction,
                    session_id: Some(s.session_id),
                    regions: vec![rect(RegionClass::Picture, 9.0, 9.0)],
                },
            )
            .unwrap();
        (store.export(), store.history("d0").unwrap(), store.sessions(), reg.token)
    };
    let store = Store::open(docs, None, Some(&path)).unwrap();
    assert_eq!(store.export(), export);
    assert_eq!(store.history("d0").unwrap(), history);
    assert_eq!(store.sessions(), sessions);
    assert_eq!(store.authenticate(&token).unwrap().display_name, "asha");
    let next = store.register("ravi").unwrap();
    assert_eq!(next.account.annotator_id, "annotator-2");
}

#[test]
fn corrupt_log_lines_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.jsonl");
    std::fs::write(&path, "{\"event\":\"registered\"}\n").unwrap();
    let err = Store::open(catalog(1), None, Some(&path)).err().unwrap();
    assert!(matches!(err, ServiceError::CorruptLog { line: 1, .. }), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn history_equals_the_insertion_log(seed in any::<u64>(), n in 1usize..60) {
        let (store, log) = random_store(n, 4, seed);
        for d in 0..4 {
            let id = format!("d{d}");
            let expected: Vec<_> = log.iter().filter(|r| r.doc_id == id).cloned().collect();
            let history = store.history(&id).unwrap();
            for (i, rev) in history.iter().enumerate() {
                prop_assert_eq!(rev.revision as usize, i + 1);
                if let Some(p) = rev.parent {
                    prop_assert_eq!(p, rev.revision - 1);
                }
            }
            prop_assert_eq!(store.current(&id).unwrap(), expected.last().cloned());
            prop_assert_eq!(history, expected);
        }
    }
}
