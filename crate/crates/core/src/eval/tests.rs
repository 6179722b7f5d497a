use super::*;
use crate::corpus::{apply_style, default_suite, generate_synthetic_corpus, Corpus, Split};
use crate::policy::model::standard_normal;
use crate::reward::classifier::train_style_classifier;
use crate::reward::embedder::train_style_embedder;
use crate::reward::RewardTrainConfig;
use crate::seed::rng_for;
use ndarray::{arr1, Array1};
use proptest::prelude::*;
use rand::Rng;
use std::sync::OnceLock;

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| generate_synthetic_corpus(&default_suite(), 120, 0).unwrap())
}

fn embedder() -> &'static StyleEmbedder {
    static E: OnceLock<StyleEmbedder> = OnceLock::new();
    E.get_or_init(|| train_style_embedder(corpus(), &RewardTrainConfig::default(), 0).unwrap())
}

fn classifier() -> &'static StyleClassifier {
    static C: OnceLock<StyleClassifier> = OnceLock::new();
    C.get_or_init(|| train_style_classifier(corpus(), &RewardTrainConfig::default(), 0).unwrap())
}

fn unit(rng: &mut impl Rng, d: usize) -> Array1<f64> {
    let v: Array1<f64> = (0..d).map(|_| standard_normal(rng)).collect();
    let n = v.dot(&v).sqrt();
    v / n
}

/// Independent transcription: normalize first, then the arc-cosine.
fn oracle_sim(u: &Array1<f64>, v: &Array1<f64>) -> f64 {
    let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let c: f64 = u.iter().zip(v).map(|(a, b)| (a / nu) * (b / nv)).sum();
    1.0 - c.clamp(-1.0, 1.0).acos() / std::f64::consts::PI
}

fn oracle_individual(out: &Array1<f64>, src: &Array1<f64>, tgt: &Array1<f64>) -> (f64, f64, f64) {
    let s_os = oracle_sim(out, src);
    let s_ot = oracle_sim(out, tgt);
    let s_ts = oracle_sim(tgt, src);
    let toward = (1.0 - f64::max(s_os, s_ts)) / (1.0 - s_ts);
    let away = f64::max(s_ot - s_ts, 0.0) / (1.0 - s_ts);
    let confusion = if s_ot > s_os { 1.0 } else { 0.0 };
    (toward, away, confusion)
}

#[test]
fn angular_sim_closed_forms() {
    let u = arr1(&[0.3, -1.2, 2.5]);
    let neg = -&u;
    assert_eq!(angular_sim(u.view(), u.view()).unwrap(), 1.0);
    assert_eq!(angular_sim(u.view(), neg.view()).unwrap(), 0.0);
    let a = arr1(&[1.0, 0.0]);
    let b = arr1(&[0.0, 3.0]);
    assert_eq!(angular_sim(a.view(), b.view()).unwrap(), 0.5);
    let z = arr1(&[0.0, 0.0]);
    assert!(angular_sim(a.view(), z.view()).is_err());
}

proptest! {
    #[test]
    fn angular_sim_is_symmetric_and_scale_invariant(
        u in proptest::collection::vec(-5.0f64..5.0, 4),
        v in proptest::collection::vec(-5.0f64..5.0, 4),
        k in 0.01f64..100.0,
    ) {
        let u = Array1::from(u);
        let v = Array1::from(v);
        prop_assume!(u.dot(&u) > 1e-6 && v.dot(&v) > 1e-6);
        let a = angular_sim(u.view(), v.view()).unwrap();
        let b = angular_sim(v.view(), u.view()).unwrap();
        let scaled = &u * k;
        let c = angular_sim(scaled.view(), v.view()).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((a - c).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn confusion_depends_only_on_the_comparison(seed in 0u64..10_000) {
        let mut rng = rng_for(seed, "confusion");
        let (o, s, t) = (unit(&mut rng, 5), unit(&mut rng, 5), unit(&mut rng, 5));
        let c = confusion_individual(o.view(), s.view(), t.view()).unwrap();
        // cosine is a monotone transform of the angular similarity
        let by_cos = if o.dot(&t) > o.dot(&s) { 1.0 } else { 0.0 };
        prop_assert_eq!(c, by_cos);
    }
}

#[test]
fn individual_formulas_match_the_oracle() {
    let mut rng = rng_for(0, "triples");
    for _ in 0..500 {
        let (o, s, t) = (unit(&mut rng, 8), unit(&mut rng, 8), unit(&mut rng, 8));
        let (ot, oa, oc) = oracle_individual(&o, &s, &t);
        let tw = toward_individual(o.view(), s.view(), t.view()).unwrap().unwrap();
        let aw = away_individual(o.view(), s.view(), t.view()).unwrap().unwrap();
        let cf = confusion_individual(o.view(), s.view(), t.view()).unwrap();
        assert!((tw - ot).abs() <= 1e-12, "{tw} vs {ot}");
        assert!((aw - oa).abs() <= 1e-12, "{aw} vs {oa}");
        assert_eq!(cf, oc);
    }
}

#[test]
fn individual_edge_cases() {
    let s = arr1(&[1.0, 0.0, 0.0]);
    let t = arr1(&[0.0, 1.0, 0.0]);
    assert_eq!(toward_individual(t.view(), s.view(), t.view()).unwrap(), Some(1.0));
    assert_eq!(away_individual(t.view(), s.view(), t.view()).unwrap(), Some(1.0));
    assert_eq!(toward_individual(s.view(), s.view(), t.view()).unwrap(), Some(0.0));
    assert_eq!(away_individual(s.view(), s.view(), t.view()).unwrap(), Some(0.0));
    assert_eq!(confusion_individual(t.view(), s.view(), t.view()).unwrap(), 1.0);
    let mid = arr1(&[1.0, 1.0, 0.0]);
    assert_eq!(confusion_individual(mid.view(), s.view(), t.view()).unwrap(), 0.0);
    assert_eq!(toward_individual(t.view(), s.view(), s.view()).unwrap(), None);
}

fn oracle_community(t: &DecisionTable) -> (Option<f64>, Option<f64>, f64) {
    let n = t.src_is_target.len() as i64;
    let sum = |v: &[bool]| v.iter().map(|b| *b as i64).sum::<i64>();
    let (ct_src, ct_out, cs_src, cs_out) = (
        sum(&t.src_is_target),
        sum(&t.out_is_target),
        sum(&t.src_is_source),
        sum(&t.out_is_source),
    );
    let toward = if n - ct_src == 0 {
        None
    } else {
        Some(f64::max((ct_out - ct_src) as f64 / (n - ct_src) as f64, 0.0))
    };
    let away = if cs_src == 0 {
        None
    } else {
        Some(f64::max((cs_src - cs_out) as f64 / cs_src as f64, 0.0))
    };
    let conf = (0..n as usize)
        .filter(|&i| t.out_is_target[i] as i64 - t.out_is_source[i] as i64 == 1)
        .count() as f64
        / n as f64;
    (toward, away, conf)
}

fn random_table(rng: &mut impl Rng, n: usize) -> DecisionTable {
    let mut col = |p: f64| (0..n).map(|_| rng.random::<f64>() < p).collect::<Vec<bool>>();
    DecisionTable {
        src_is_target: col(0.2),
        out_is_target: col(0.5),
        src_is_source: col(0.8),
        out_is_source: col(0.4),
    }
}

#[test]
fn community_formulas_match_the_oracle() {
    let mut rng = rng_for(1, "tables");
    for _ in 0..200 {
        for _pair in 0..6 {
            let t = random_table(&mut rng, 20);
            let c = community_pair_scores(&t).unwrap();
            let (ot, oa, oc) = oracle_community(&t);
            assert_eq!(c.toward, ot);
            assert_eq!(c.away, oa);
            assert_eq!(c.confusion, oc);
        }
    }
}

#[test]
fn community_edge_cases() {
    let n = 5;
    let all_target = DecisionTable {
        src_is_target: vec![false; n],
        out_is_target: vec![true; n],
        src_is_source: vec![true; n],
        out_is_source: vec![false; n],
    };
    let c = community_pair_scores(&all_target).unwrap();
    assert_eq!((c.toward, c.away, c.confusion), (Some(1.0), Some(1.0), 1.0));
    let unchanged = DecisionTable {
        src_is_target: vec![false, true, false, false, true],
        out_is_target: vec![false, true, false, false, true],
        src_is_source: vec![true, true, false, true, true],
        out_is_source: vec![true, true, false, true, true],
    };
    let c = community_pair_scores(&unchanged).unwrap();
    assert_eq!((c.toward, c.away), (Some(0.0), Some(0.0)));
    let degenerate = DecisionTable {
        src_is_target: vec![true; 2],
        out_is_target: vec![true; 2],
        src_is_source: vec![false; 2],
        out_is_source: vec![false; 2],
    };
    let c = community_pair_scores(&degenerate).unwrap();
    assert_eq!((c.toward, c.away), (None, None));
    assert!(community_pair_scores(&DecisionTable::default()).is_err());
}

#[test]
fn joint_score_cases() {
    assert_eq!(joint_score(1.0, 1.0, 1.0).unwrap(), 1.0);
    assert_eq!(joint_score(0.0, 0.4, 0.9).unwrap(), 0.0);
    assert!((joint_score(0.164, 0.748, 0.733).unwrap() - 0.507).abs() <= 1e-3);
    assert!(joint_score(-0.1, 0.5, 0.5).is_err());
}

proptest! {
    #[test]
    fn joint_is_bounded_by_its_largest_factor(t in 0.0f64..1.0, a in 0.0f64..1.0, c in 0.0f64..1.0) {
        let j = joint_score(t, a, c).unwrap();
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert!(j <= t.max(a).max(c) + 1e-15);
    }
}

/// Test-split texts of every style, as (id, style, text).
fn test_items() -> Vec<(String, String, String)> {
    corpus()
        .split_items(Split::Test)
        .into_iter()
        .map(|i| (i.id.clone(), i.style.clone(), i.text.clone()))
        .collect()
}

fn target_texts() -> BTreeMap<String, Vec<String>> {
    let mut m: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for item in corpus().split_items(Split::Val) {
        m.entry(item.style.clone()).or_default().push(item.text.clone());
    }
    m
}

/// Every test text sent to the next style, with the transferred text chosen by `f`.
fn records(f: impl Fn(&str, &str, &str) -> String) -> Vec<TransferRecord> {
    let styles = corpus().styles().to_vec();
    test_items()
        .into_iter()
        .map(|(id, s, text)| {
            let k = styles.iter().position(|x| *x == s).unwrap();
            let t = styles[(k + 1) % styles.len()].clone();
            TransferRecord {
                transferred_text: f(&text, &s, &t),
                id,
                source_text: text,
                source_style: s,
                target_style: t,
                neutral: None,
            }
        })
        .collect()
}

fn neutral_of(text: &str) -> String {
    crate::paraphraser::neutralize(text)
}

#[test]
fn gold_outputs_reach_full_oracle_confusion() {
    let suite = default_suite();
    let recs = records(|text, _, t| apply_style(&neutral_of(text), find_spec(&suite, t).unwrap()).unwrap());
    let models = StyleModels::Community { classifier: classifier() };
    let r = evaluate_run(&recs, models, Some(&suite)).unwrap();
    assert_eq!(r.oracle_confusion, Some(1.0));
    assert!(r.per_pair.iter().all(|p| p.oracle_confusion == Some(1.0)));
    assert!(r.toward > 0.9 && r.confusion > 0.9, "{r:?}");
    assert!(r.content > 1.0 - 1e-9);
}

#[test]
fn copying_the_source_scores_zero_toward() {
    let recs = records(|text, _, _| text.to_string());
    let tt = target_texts();
    let models = StyleModels::Individual {
        embedder: embedder(),
        target_texts: &tt,
    };
    let r = evaluate_run(&recs, models, Some(&default_suite())).unwrap();
    for p in &r.per_pair {
        assert_eq!(p.toward, Some(0.0));
        assert_eq!(p.away, Some(0.0));
        assert_eq!(p.confusion, 0.0);
        assert_eq!(p.content, 1.0);
    }
    assert_eq!(r.joint, 0.0);
    assert_eq!(r.oracle_confusion, Some(0.0));
}

#[test]
fn reports_are_bounded_deterministic_and_order_free() {
    let suite = default_suite();
    let mut recs = records(|text, _, t| {
        let spec = find_spec(&suite, t).unwrap();
        // half the outputs get transferred, the rest stay neutral
        if text.len() % 2 == 0 {
            apply_style(&neutral_of(text), spec).unwrap()
        } else {
            neutral_of(text)
        }
    });
    let tt = target_texts();
    for models in [
        StyleModels::Community { classifier: classifier() },
        StyleModels::Individual {
            embedder: embedder(),
            target_texts: &tt,
        },
    ] {
        let a = evaluate_run(&recs, models, Some(&suite)).unwrap();
        for v in [a.toward, a.away, a.confusion, a.content, a.joint, a.oracle_confusion.unwrap()] {
            assert!(v.is_finite() && (0.0..=1.0).contains(&v), "{a:?}");
        }
        assert!(a.joint <= a.toward.max(a.away).max(a.content));
        recs.reverse();
        let b = evaluate_run(&recs, models, Some(&suite)).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

#[test]
fn evaluate_run_preconditions() {
    let models = StyleModels::Community { classifier: classifier() };
    assert!(matches!(evaluate_run(&[], models, None), Err(Error::Data(_))));
    let mut recs = records(|text, _, _| text.to_string());
    recs[0].target_style = recs[0].source_style.clone();
    assert!(matches!(evaluate_run(&recs, models, None), Err(Error::Data(_))));
}

#[test]
fn records_round_trip() {
    let mut recs = records(|text, _, _| text.to_uppercase());
    recs[0].neutral = Some("n".into());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.jsonl");
    write_records(&path, &recs[..3]).unwrap();
    assert_eq!(read_records(&path).unwrap(), recs[..3].to_vec());
}

#[test]
fn pair_units_are_keyed_by_direction() {
    let recs = records(|text, _, _| text.to_uppercase());
    let r = evaluate_run(&recs, StyleModels::Community { classifier: classifier() }, Some(&default_suite())).unwrap();
    let u = pair_units(&r, "oracle_confusion").unwrap();
    assert_eq!(u.len(), r.per_pair.len());
    assert!(u.keys().all(|k| k.contains("->")));
    assert!(pair_units(&r, "fluency").is_err());
}

#[test]
fn document_units_decompose_the_record_level_aggregates() {
    let suite = default_suite();
    let recs = records(|text, _, t| {
        let spec = find_spec(&suite, t).unwrap();
        if text.len() % 2 == 0 {
            apply_style(&neutral_of(text), spec).unwrap()
        } else {
            neutral_of(text)
        }
    });
    let clf = classifier();
    let r = evaluate_run(&recs, StyleModels::Community { classifier: clf }, Some(&suite)).unwrap();
    let oracle = document_units(&recs, clf, Some(&suite), "oracle_confusion").unwrap();
    assert_eq!(oracle.len(), recs.len());
    let mean = oracle.values().sum::<f64>() / oracle.len() as f64;
    assert!((mean - r.oracle_confusion.unwrap()).abs() < 1e-12);
    let content = document_units(&recs, clf, None, "content").unwrap();
    assert!((content.values().sum::<f64>() / content.len() as f64 - r.content).abs() < 1e-12);

    // toward units exist exactly for sources not already classified as the target
    let toward = document_units(&recs, clf, None, "toward").unwrap();
    for rec in &recs {
        let key = format!("{}->{}", rec.id, rec.target_style);
        let already = clf.decision(&rec.source_text, &rec.target_style).unwrap();
        assert_eq!(toward.contains_key(&key), !already);
    }
    assert!(toward.values().chain(oracle.values()).all(|v| *v == 0.0 || *v == 1.0));
    assert!(document_units(&recs, clf, None, "oracle_confusion").is_err());
    assert!(document_units(&recs, clf, None, "fluency").is_err());
    let mut dup = recs.clone();
    dup.push(recs[0].clone());
    assert!(document_units(&dup, clf, None, "content").is_err());
}

#[test]
fn ttest_is_calibrated_under_the_null() {
    let cfg = TTestConfig::default();
    let mut rng = rng_for(7, "calibration");
    let reps = 1000;
    let mut rejections = 0;
    let mut shifted = 0;
    for i in 0..reps {
        let a: Vec<f64> = (0..40).map(|_| standard_normal(&mut rng)).collect();
        let b: Vec<f64> = (0..40).map(|_| standard_normal(&mut rng)).collect();
        if resampled_paired_ttest(&a, &b, &cfg, i).unwrap().significant {
            rejections += 1;
        }
        let c: Vec<f64> = b.iter().map(|v| v + 0.5).collect();
        if resampled_paired_ttest(&c, &b, &cfg, i).unwrap().significant {
            shifted += 1;
        }
    }
    let rate = rejections as f64 / reps as f64;
    assert!((0.02..=0.10).contains(&rate), "null rejection rate {rate}");
    assert_eq!(shifted, reps);
}
