use std::sync::OnceLock;

use proptest::prelude::*;

use satlearn::data::{generate_corpus, Corpus, DatasetSplits, GeneratorConfig, SplitManifest};
use satlearn::metrics::{evaluate, RunKey, Split};
use satlearn::model::{HeadId, Model, ModelConfig};
use satlearn::train::{
    contrastive_pretrain, few_shot_train, finetune, supervised_train, TrainConfig,
};
use satlearn::{ParamSet, Role};

struct Fixture {
    corpus: Corpus,
    splits: DatasetSplits,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let corpus = generate_corpus(&GeneratorConfig {
            num_labeled: 600,
            num_unlabeled: 500,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let m =
            SplitManifest::build(&corpus.labeled, &corpus.unlabeled, (0.5, 0.15), 0.2, 1).unwrap();
        let splits = m.materialize(&corpus.labeled, &corpus.unlabeled).unwrap();
        Fixture { corpus, splits }
    })
}

fn small_model(f: &Fixture, seed: u64) -> Model {
    Model::new(ModelConfig {
        vocab_size: f.corpus.vocab.len(),
        embed_dim: 8,
        gru_hidden: 8,
        head_hidden: 8,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 16,
        min_steps: 10,
        min_val_interval: 10,
        seed,
        ..TrainConfig::default()
    }
}

fn layers_equal(a: &ParamSet, b: &ParamSet, role: Role) -> bool {
    a.layers_with_role(role)
        .zip(b.layers_with_role(role))
        .all(|((_, x), (_, y))| x == y)
}

#[test]
fn splits_validate_and_cover_both_test_domains() {
    let s = &fixture().splits;
    s.validate().unwrap();
    assert!(!s.test_in_domain.is_empty() && !s.test_out_of_domain.is_empty());
    assert!(!s.unsup_train.is_empty() && !s.unsup_validation.is_empty());
    let ood = s.out_of_domain_skills();
    assert!(s.train.iter().all(|x| !ood.contains(x.skill.as_str())));
}

#[test]
fn pretrain_then_finetune_end_to_end() {
    let f = fixture();
    let model = small_model(f, 3);
    let init = model.init_params();
    let (pre, pre_report) = contrastive_pretrain(
        &model,
        &init,
        &f.splits.unsup_train,
        &f.splits.unsup_validation,
        &quick(3),
    )
    .unwrap();
    assert!(pre_report.steps > 0);
    assert!(!layers_equal(&init, &pre, Role::Body));
    // The satisfaction head is untouched by pretraining.
    assert!(layers_equal(&init, &pre, Role::HeadT));

    let (tuned, report) = finetune(
        &model,
        &pre,
        &f.splits.train,
        &f.splits.validation,
        &quick(3),
    )
    .unwrap();
    assert!(report.steps > 0);
    assert!(layers_equal(&pre, &tuned, Role::HeadS));

    let splits = [
        (Split::InDomain, f.splits.test_in_domain.as_slice()),
        (Split::OutOfDomain, f.splits.test_out_of_domain.as_slice()),
    ];
    let run = RunKey {
        method: "pretrain_finetune".into(),
        n_labeled: f.splits.train.len(),
        seed: 3,
    };
    let recs = evaluate(&model, &tuned, &splits, HeadId::Satisfaction, &run).unwrap();
    assert_eq!(recs.len(), 2);
    for r in &recs {
        assert!((0.0..=1.0).contains(&r.auc_roc) && (0.0..=1.0).contains(&r.auc_pr));
    }
}

#[test]
fn training_is_reproducible_per_seed() {
    let f = fixture();
    let train = &f.splits.train[..64];
    let run = |seed| {
        let model = small_model(f, seed);
        supervised_train(
            &model,
            &model.init_params(),
            train,
            &f.splits.validation,
            &quick(seed),
        )
        .unwrap()
        .0
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn few_shot_reports_joint_and_finetune_phases() {
    let f = fixture();
    let model = small_model(f, 6);
    let cfg = TrainConfig {
        joint_steps: 30,
        ..quick(6)
    };
    let (params, report) = few_shot_train(
        &model,
        &model.init_params(),
        &f.splits.unsup_train,
        &f.splits.train[..64],
        &f.splits.validation,
        &cfg,
    )
    .unwrap();
    model.check(&params).unwrap();
    assert_eq!(report.method, "few_shot");
    assert!(report.finetune.is_some());
    assert!(!report.layer_acceptance.is_empty());
}

#[test]
fn checkpoints_survive_a_round_trip() {
    let f = fixture();
    let model = small_model(f, 8);
    let p = model.init_params();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("ckpt");
    p.save(&stem).unwrap();
    assert_eq!(ParamSet::load_matching(&stem, &p).unwrap(), p);
    let other = small_model(f, 9);
    assert_eq!(
        ParamSet::load_matching(&stem, &other.init_params()).unwrap(),
        p
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn satisfaction_scores_are_probabilities(seed in 0u64..1000, start in 0usize..200) {
        let f = fixture();
        let model = small_model(f, seed);
        let p = model.init_params();
        let batch = &f.splits.test_in_domain[start % f.splits.test_in_domain.len()..];
        let batch = &batch[..batch.len().min(8)];
        let scores = satlearn::metrics::score(&model, &p, batch, HeadId::Satisfaction).unwrap();
        prop_assert_eq!(scores.len(), batch.len());
        prop_assert!(scores.iter().all(|s| *s > 0.0 && *s < 1.0));
    }

    #[test]
    fn corpus_generation_is_a_function_of_its_seed(seed in 0u64..50) {
        let cfg = GeneratorConfig { num_labeled: 40, num_unlabeled: 40, seed, ..GeneratorConfig::default() };
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.labeled.len(), 40);
        prop_assert!(a.labeled.iter().all(|s| s.label.is_some() && s.validate().is_ok()));
        prop_assert!(a.unlabeled.iter().all(|s| s.label.is_none()));
    }
}
