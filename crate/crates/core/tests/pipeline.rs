use std::collections::BTreeMap;

use stylepo::corpus::{default_suite, generate_synthetic_corpus, Split};
use stylepo::eval::{evaluate_run, EvalMode, StyleModels, TransferRecord};
use stylepo::paraphraser::build_pseudo_parallel;
use stylepo::po::preference::preference_train;
use stylepo::po::{attach_exemplars, build_po_dataset, build_preference_pairs, generate_candidates, Algo, PoConfig};
use stylepo::policy::train::{train_sft, ExemplarPool};
use stylepo::policy::{GenerationConfig, PolicyMode, PolicyModel, TrainConfig};
use stylepo::reward::{train_style_classifier, train_style_embedder, RewardBackend, RewardConfig, RewardTrainConfig};
use stylepo::seed::derive_seed;

fn small(context_length: usize) -> TrainConfig {
    TrainConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        context_length,
        epochs: 1,
        learning_rate: 2e-3,
        batch_size: 8,
        val_fraction: 0.1,
    }
}

fn transfer_all(model: &PolicyModel, prompts: &[stylepo::po::PoPrompt], sources: &BTreeMap<String, String>) -> Vec<TransferRecord> {
    prompts
        .iter()
        .map(|p| {
            let text = p.render(model).unwrap();
            let out = model
                .generate(&text, &GenerationConfig::inference(derive_seed(0, &p.id)))
                .unwrap();
            TransferRecord {
                id: p.id.clone(),
                source_text: sources[&p.id].clone(),
                transferred_text: out,
                source_style: p.source_style.clone(),
                target_style: p.target_style.clone(),
                neutral: Some(p.neutral_text.clone()),
            }
        })
        .collect()
}

#[test]
fn community_pipeline_from_corpus_to_report() {
    let suite = default_suite();
    let corpus = generate_synthetic_corpus(&suite, 80, 2).unwrap();
    let (_, train) = build_pseudo_parallel(&corpus, Split::Train).unwrap();
    let (_, test) = build_pseudo_parallel(&corpus, Split::Test).unwrap();
    let (sft, log) = train_sft(&train, PolicyMode::Community, &small(192), 2).unwrap();
    assert_eq!(log.len(), 2);
    let backend = RewardBackend::Classifier(train_style_classifier(&corpus, &RewardTrainConfig::default(), 2).unwrap());

    let prompts = build_po_dataset(&train).unwrap();
    let config = PoConfig {
        epochs: 1,
        ..PoConfig::desk(Algo::Cpo)
    };
    let candidates = generate_candidates(&sft, &prompts, 2, &config.gen, 2).unwrap();
    let (pairs, stats) = build_preference_pairs(&prompts, &candidates, &backend, &RewardConfig::default(), 0.0).unwrap();
    assert_eq!(stats.pairs, pairs.len());
    assert_eq!(
        stats.prompts,
        stats.pairs + stats.skipped_identical + stats.skipped_margin + stats.skipped_missing
    );
    for p in &pairs {
        assert_ne!(p.prompt.source_style, p.prompt.target_style);
        assert!(p.reward_chosen > p.reward_rejected);
    }
    let mut policy = sft.clone();
    let epochs = preference_train(Algo::Cpo, &mut policy, None, &pairs, &config, 2).unwrap();
    assert_eq!(epochs.len(), 2);
    assert_ne!(policy, sft);

    let test_prompts = build_po_dataset(&test).unwrap();
    let sources: BTreeMap<String, String> = test.iter().map(|e| (e.id.clone(), e.target_text.clone())).collect();
    let records = transfer_all(&policy, &test_prompts, &sources);
    let RewardBackend::Classifier(classifier) = &backend else { unreachable!() };
    let report = evaluate_run(&records, StyleModels::Community { classifier }, Some(&suite)).unwrap();
    assert_eq!(report.mode, EvalMode::Community);
    assert_eq!(report.n_records, records.len());
    for v in [report.toward, report.away, report.confusion, report.content, report.joint] {
        assert!((0.0..=1.0).contains(&v), "{report:?}");
    }
    assert!(report.oracle_confusion.is_some());
}

#[test]
fn individual_pipeline_uses_exemplars_and_embeddings() {
    let suite = default_suite();
    let corpus = generate_synthetic_corpus(&suite, 60, 4).unwrap();
    let (_, train) = build_pseudo_parallel(&corpus, Split::Train).unwrap();
    let (_, test) = build_pseudo_parallel(&corpus, Split::Test).unwrap();
    let mode = PolicyMode::Individual { n_exemplars: 2 };
    let (sft, _) = train_sft(&train, mode, &small(384), 4).unwrap();
    assert!(sft.tokenizer.styles().is_empty(), "individual mode adds no style tokens");

    let mut prompts = build_po_dataset(&test).unwrap();
    attach_exemplars(&mut prompts, mode, &ExemplarPool::from_examples(&train), 4).unwrap();
    for p in &prompts {
        assert_eq!(p.exemplars.as_ref().unwrap().len(), 2);
        assert_eq!(p.render(&sft).unwrap().matches("[REF]").count(), 2);
    }
    let sources: BTreeMap<String, String> = test.iter().map(|e| (e.id.clone(), e.target_text.clone())).collect();
    let records = transfer_all(&sft, &prompts, &sources);

    let embedder = train_style_embedder(&corpus, &RewardTrainConfig::default(), 4).unwrap();
    let mut target_texts: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for item in corpus.split_items(Split::Val) {
        target_texts.entry(item.style.clone()).or_default().push(item.text.clone());
    }
    let report = evaluate_run(
        &records,
        StyleModels::Individual {
            embedder: &embedder,
            target_texts: &target_texts,
        },
        None,
    )
    .unwrap();
    assert_eq!(report.mode, EvalMode::Individual);
    for v in [report.toward, report.away, report.confusion, report.content, report.joint] {
        assert!((0.0..=1.0).contains(&v), "{report:?}");
    }
    assert!(report.oracle_confusion.is_none());
}
