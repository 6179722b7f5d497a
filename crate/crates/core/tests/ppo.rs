use std::sync::OnceLock;

use stylepo::corpus::{default_suite, generate_synthetic_corpus, Split};
use stylepo::paraphraser::build_pseudo_parallel;
use stylepo::po::ppo::PpoRun;
use stylepo::po::{build_po_dataset, ppo_train, Algo, PoConfig, PoPrompt};
use stylepo::policy::train::train_sft;
use stylepo::policy::{PolicyMode, PolicyModel, TrainConfig};
use stylepo::reward::{train_style_classifier, Component, RewardBackend, RewardConfig, RewardTrainConfig};

struct Fixture {
    sft: PolicyModel,
    backend: RewardBackend,
    prompts: Vec<PoPrompt>,
}

/// A briefly trained community policy on the four synthetic styles.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let corpus = generate_synthetic_corpus(&default_suite(), 100, 11).unwrap();
        let (_, examples) = build_pseudo_parallel(&corpus, Split::Train).unwrap();
        let config = TrainConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            context_length: 192,
            epochs: 3,
            learning_rate: 2e-3,
            batch_size: 8,
            val_fraction: 0.1,
        };
        let (sft, _) = train_sft(&examples, PolicyMode::Community, &config, 11).unwrap();
        let backend = RewardBackend::Classifier(train_style_classifier(&corpus, &RewardTrainConfig::default(), 11).unwrap());
        let prompts = build_po_dataset(&examples).unwrap().into_iter().take(64).collect();
        Fixture { sft, backend, prompts }
    })
}

fn run(beta: f64, components: &[Component]) -> PpoRun {
    let f = fixture();
    let config = PoConfig {
        beta,
        epochs: 5,
        reward: RewardConfig::with_components(components),
        ..PoConfig::desk(Algo::Ppo)
    };
    let mut policy = f.sft.clone();
    ppo_train(&mut policy, &f.sft, &f.backend, &f.prompts, &config, 5).unwrap()
}

#[test]
fn toward_and_away_reward_rises_over_training() {
    let run = run(0.2, &[Component::Toward, Component::Away]);
    let first = &run.epochs[0];
    let last = run.epochs.last().unwrap();
    assert!(last.reward > first.reward, "{first:?} -> {last:?}");
    // the total is the sum of the enabled components
    for e in &run.epochs {
        assert!((e.reward - (e.toward + e.away)).abs() < 1e-9);
    }
}

#[test]
fn a_larger_kl_coefficient_keeps_the_policy_closer_to_the_reference() {
    let loose = run(0.2, &[Component::Toward, Component::Away]);
    let tight = run(2.0, &[Component::Toward, Component::Away]);
    let kl = |r: &PpoRun| r.epochs.last().unwrap().kl;
    assert!(kl(&tight) < kl(&loose), "beta 2.0: {}, beta 0.2: {}", kl(&tight), kl(&loose));
    // both start from the reference, where the sampled KL is zero
    assert_eq!(loose.epochs[0].kl, 0.0);
    assert_eq!(tight.epochs[0].kl, 0.0);
}
