use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::tokenize::WordTokenizer;

fn tiny_config(attention: bool) -> SiameseConfig {
    SiameseConfig {
        lstm_hidden: 3,
        dense1_units: 4,
        dense2_units: 2,
        use_attention: attention,
        attention_units: 3,
        max_tokens: 6,
        seed: 11,
        ..SiameseConfig::new(4)
    }
}

fn tiny_table() -> EmbeddingTable {
    EmbeddingTable::random(["head", "ache", "pain", "cranial", "fever", "cough"], 4, 0.5, 3)
}

fn tiny_model(attention: bool) -> SiameseModel {
    SiameseModel::build(tiny_config(attention), &tiny_table(), Arc::new(WordTokenizer)).unwrap()
}

fn tiny_batch(m: &SiameseModel) -> Vec<EncodedPair> {
    vec![
        m.encode_pair("head ache", "cranial pain", 1),
        m.encode_pair("fever", "cough cough", 0),
        m.encode_pair("pain head", "unknownword ache", 1),
        m.encode_pair("cranial", "fever pain cough", 0),
    ]
}

fn grad_check(mut model: SiameseModel, loss: Loss) {
    model.config.loss = loss;
    let batch = tiny_batch(&model);
    let (_, analytic) = model.loss_and_grad(&batch);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = model.params[i];
        model.params[i] = orig + h;
        let up = model.loss(&batch);
        model.params[i] = orig - h;
        let down = model.loss(&batch);
        model.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = a.abs() + numeric.abs();
        if denom > 1e-7 {
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    assert!(worst < 1e-4, "max relative gradient error {worst}");
}

#[test]
fn gradients_match_finite_differences() {
    grad_check(tiny_model(false), Loss::Bce);
    grad_check(tiny_model(false), Loss::Mse);
}

#[test]
fn attention_gradients_match_finite_differences() {
    grad_check(tiny_model(true), Loss::Bce);
    grad_check(tiny_model(true), Loss::Mse);
}

#[test]
fn attention_adds_its_parameters() {
    let plain = tiny_model(false);
    let att = tiny_model(true);
    let c = att.config();
    let extra = c.attention_units * 2 * c.lstm_hidden + 2 * c.attention_units;
    assert_eq!(att.num_params() - plain.num_params(), extra);
}

#[test]
fn parameter_count_matches_architecture() {
    let m = tiny_model(false);
    let (v, e, h, d1, d2) = (7, 4, 3, 4, 2);
    let lstm = 4 * h * e + 4 * h * h + 4 * h;
    let expected = v * e + 2 * lstm + d1 * 2 * h + d1 + d2 * d1 + d2;
    assert_eq!(m.num_params(), expected);
    let total: usize = m.param_tensors().iter().map(|t| t.shape[0] * t.shape[1]).sum();
    assert_eq!(total, expected);
}

#[test]
fn forget_bias_starts_at_one() {
    let m = tiny_model(false);
    let b = m.layout.fw.b.slice(&m.params);
    assert_eq!(&b[3..6], &[1.0, 1.0, 1.0]);
    assert!(b[..3].iter().chain(&b[6..]).all(|&x| x == 0.0));
}

#[test]
fn embedding_rows_come_from_table() {
    let table = tiny_table();
    let m = tiny_model(false);
    let emb = m.layout.emb;
    assert_eq!(emb.row(&m.params, 0), table.oov_vector());
    for i in 0..table.len() {
        assert_eq!(emb.row(&m.params, i + 1), table.row(i));
    }
    assert_eq!(m.encode_text("never seen"), vec![OOV_ROW, OOV_ROW]);
}

#[test]
fn dim_mismatch_is_rejected() {
    let cfg = SiameseConfig::new(5);
    assert!(SiameseModel::build(cfg, &tiny_table(), Arc::new(WordTokenizer)).is_err());
}

#[test]
fn empty_string_scores_are_defined() {
    let m = tiny_model(true);
    let s = m.similarity_text("", "head");
    assert!(s > 0.0 && s <= 1.0);
    assert_eq!(m.similarity_text("", ""), 1.0);
}

#[test]
fn sequences_are_clipped_to_max_tokens() {
    let m = tiny_model(false);
    let long = "head ache pain cranial fever cough head ache";
    assert_eq!(m.encode_text(long).len(), 6);
    let ids: Vec<u32> = (1..=7).chain([1, 2, 3]).collect();
    assert_eq!(m.tower(&ids), m.tower(&ids[..6]));
}

#[test]
fn bce_gradient_is_zero_when_clipped() {
    let (v, g) = pair_loss(Loss::Bce, 0.0, 0);
    assert!((v - -(1e-7f64).ln()).abs() < 1e-6);
    assert_eq!(g, 0.0);
    let (_, g) = pair_loss(Loss::Bce, 40.0, 1);
    assert_eq!(g, 0.0);
    let (_, g) = pair_loss(Loss::Bce, 1.0, 1);
    assert_eq!(g, 1.0);
}

#[test]
fn loss_decreases_and_training_is_deterministic() {
    let mut cfg = tiny_config(false);
    cfg.learning_rate = 0.01;
    cfg.batch_size = 2;
    cfg.epochs = 30;
    let build = || SiameseModel::build(cfg.clone(), &tiny_table(), Arc::new(WordTokenizer)).unwrap();
    let pairs = tiny_batch(&build());
    let mut t = Trainer::new(build());
    let report = t.fit(&pairs, &pairs).unwrap().clone();
    assert_eq!(report.epochs_run(), 30);
    assert!(report.epoch_losses[29] < report.epoch_losses[0]);
    assert_eq!(report.valid_metrics.len(), 30);

    let mut again = Trainer::new(build());
    again.fit(&pairs, &pairs).unwrap();
    assert_eq!(again.model().weights_checksum(), report.weights_checksum);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let mut cfg = tiny_config(true);
    cfg.batch_size = 3;
    cfg.epochs = 6;
    let build = || SiameseModel::build(cfg.clone(), &tiny_table(), Arc::new(WordTokenizer)).unwrap();
    let pairs = tiny_batch(&build());

    let mut straight = Trainer::new(build());
    straight.fit(&pairs, &[]).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut first = Trainer::new(build());
    first.fit_until(&pairs, &[], 2).unwrap();
    Checkpoint::from_trainer(&first).save(&path).unwrap();
    let mut resumed = Checkpoint::load(&path)
        .unwrap()
        .into_trainer(Arc::new(WordTokenizer))
        .unwrap();
    resumed.fit(&pairs, &[]).unwrap();

    assert_eq!(resumed.model().params(), straight.model().params());
    assert_eq!(resumed.report().epoch_losses, straight.report().epoch_losses);
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let m = tiny_model(true);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    Checkpoint::from_model(&m).save(&path).unwrap();
    let back = Checkpoint::load(&path)
        .unwrap()
        .into_model(Arc::new(WordTokenizer))
        .unwrap();
    assert_eq!(back.params(), m.params());
    assert_eq!(back.weights_checksum(), m.weights_checksum());
    assert_eq!(back.similarity_text("head", "ache"), m.similarity_text("head", "ache"));

    let mut c = Checkpoint::load(&path).unwrap();
    c.config.lstm_hidden = 4;
    c.save(&path).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));

    let c = Checkpoint::from_model(&m);
    let err = c
        .into_model(Arc::new(crate::tokenize::WhitespaceTokenizer))
        .unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)));
}

#[test]
fn single_class_training_is_rejected() {
    let m = tiny_model(false);
    let pairs: Vec<_> = tiny_batch(&m).into_iter().filter(|p| p.label == 1).collect();
    assert!(matches!(Trainer::new(m).fit(&pairs, &[]), Err(Error::Training(_))));
}

#[test]
fn loss_and_grad_is_thread_count_independent() {
    let m = tiny_model(true);
    let mut batch = Vec::new();
    for _ in 0..10 {
        batch.extend(tiny_batch(&m));
    }
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let a = single.install(|| m.loss_and_grad(&batch));
    let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let b = many.install(|| m.loss_and_grad(&batch));
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["head", "ache", "pain", "cranial", "fever", "cough", "zzz", ""]).prop_map(String::from)
}

fn phrase() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 0..5).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_is_symmetric_bounded_and_reflexive(a in phrase(), b in phrase(), att in any::<bool>()) {
        let m = tiny_model(att);
        let ab = m.similarity_text(&a, &b);
        let ba = m.similarity_text(&b, &a);
        prop_assert_eq!(ab, ba);
        prop_assert!(ab > 0.0 && ab <= 1.0);
        prop_assert_eq!(m.similarity_text(&a, &a), 1.0);
    }
}
