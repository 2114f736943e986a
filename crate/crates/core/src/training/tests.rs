use super::*;
use crate::data::synthetic::{generate, SynthConfig};
use crate::data::stratified_split;
use crate::encoder::{Activation, EncoderConfig, Pooling, Vocabulary};
use crate::models::ModelConfig;
use crate::nncore::Tensor;

fn pairs(n: usize) -> Vec<Pair> {
    (0..n)
        .map(|i| Pair {
            text: i,
            topic: 0,
            label: (i % 2) as f64,
        })
        .collect()
}

#[test]
fn batches_cover_pairs_and_reshuffle() {
    let p = pairs(25);
    let b = make_pair_batches(&p, 12, 3, 0).unwrap();
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![12, 12, 1]);
    let mut seen: Vec<usize> = b.iter().flatten().map(|p| p.text).collect();
    seen.sort();
    assert_eq!(seen, (0..25).collect::<Vec<_>>());
    assert_ne!(b, make_pair_batches(&p, 12, 3, 1).unwrap());
    assert_eq!(b, make_pair_batches(&p, 12, 3, 0).unwrap());
    assert!(make_pair_batches(&[], 12, 3, 0).is_err());
}

#[test]
fn pure_decay_step() {
    let mut reg = ParamRegistry::new();
    let w = reg.register("w", Tensor::filled(&[1], 1.0), false).unwrap();
    let g = reg.register("g", Tensor::filled(&[1], 1.0), true).unwrap();
    let mut opt = AdamW::new(&reg, 0.01);
    opt.step(&mut reg, &[None, None], 0.1).unwrap();
    assert!((reg.tensor(w).data()[0] - 0.999).abs() < 1e-15);
    assert_eq!(reg.tensor(g).data()[0], 1.0);
}

#[test]
fn non_finite_gradient_aborts() {
    let mut reg = ParamRegistry::new();
    reg.register("w", Tensor::filled(&[2], 1.0), false).unwrap();
    let mut opt = AdamW::new(&reg, 0.01);
    let err = opt.step(&mut reg, &[Some(vec![0.0, f64::NAN])], 0.1).unwrap_err();
    assert!(err.to_string().contains("w[1]"));
}

#[test]
fn schedule_shape() {
    assert_eq!(learning_rate_at(5, 1e-3, 10, 100), 0.5e-3);
    assert_eq!(learning_rate_at(10, 1e-3, 10, 100), 1e-3);
    assert!((learning_rate_at(55, 1e-3, 10, 100) - 0.5e-3).abs() < 1e-18);
    assert_eq!(learning_rate_at(100, 1e-3, 10, 100), 0.0);
    let cfg = TrainConfig {
        warmup_steps: Some(50),
        ..TrainConfig::default()
    };
    assert!(cfg.warmup_for(40).is_err());
    assert_eq!(TrainConfig::default().warmup_for(200).unwrap(), 20);
}

#[test]
fn early_stopping_semantics() {
    let mut s = EarlyStopping::new(3);
    let metrics = [0.9, 0.8, 0.7, 0.6, 0.5];
    let mut stopped_at = None;
    for (k, &m) in metrics.iter().enumerate() {
        let epoch = k + 1;
        if s.update(epoch, m).1 {
            stopped_at = Some(epoch);
            break;
        }
    }
    assert_eq!(stopped_at, Some(4));
    assert_eq!(s.best(), Some((1, 0.9)));
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 16,
        num_layers: 1,
        num_heads: 2,
        ffn_hidden: 32,
        max_len: 32,
        dropout: 0.0,
        activation: Activation::Gelu,
        pooling: Pooling::Mean,
    }
}

fn small_dataset() -> Dataset {
    generate(&SynthConfig {
        num_texts: 20,
        num_topics: 3,
        num_groups: 3,
        keywords_per_topic: 2,
        filler_vocab: 20,
        min_words: 3,
        max_words: 6,
        background_rate: 0.1,
        second_topic_rate: 0.0,
        distractor_rate: 0.0,
        extra_groups: 2,
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn model_for(name: &str, ds: &Dataset, dropout: f64) -> Model {
    let mut cfg = ModelConfig::preset(name, tiny_encoder()).unwrap();
    cfg.head_dropout = dropout;
    cfg.encoder.dropout = dropout;
    let vocab = Vocabulary::build(
        ds.texts
            .iter()
            .map(|t| t.text.as_str())
            .chain(ds.topics.iter().map(|t| t.description.as_str()))
            .chain(ds.topics.iter().map(|t| t.name.as_str())),
        1,
    );
    Model::new(cfg, vocab, 2).unwrap()
}

#[test]
fn accumulation_equals_single_large_batch() {
    let ds = small_dataset();
    let model = model_for("bi_concat_sub_mult", &ds, 0.0);
    let topic_strings = rendered_topics(&model, &ds);
    let topics: Vec<&str> = topic_strings.iter().map(String::as_str).collect();
    let texts: Vec<&str> = ds.texts.iter().map(|t| t.text.as_str()).collect();
    let all = labeled_pairs(&ds, &ds.text_ids());
    let all = &all[..20];
    let micro: Vec<Vec<Pair>> = all.chunks(6).map(<[Pair]>::to_vec).collect();
    let (acc, loss_a) = accumulate_step(&model, &texts, &topics, &micro, None).unwrap();
    let (one, loss_b) = accumulate_step(&model, &texts, &topics, &[all.to_vec()], None).unwrap();
    assert!((loss_a - loss_b).abs() < 1e-12);
    for (a, b) in acc.iter().zip(&one) {
        match (a, b) {
            (Some(a), Some(b)) => {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
            (None, None) => {}
            _ => panic!("gradient present in only one run"),
        }
    }
    let mut m1 = model.clone();
    let mut m2 = model.clone();
    AdamW::new(m1.params(), 0.01).step(m1.params_mut(), &acc, 1e-3).unwrap();
    AdamW::new(m2.params(), 0.01).step(m2.params_mut(), &one, 1e-3).unwrap();
    for ((_, _, p), (_, _, q)) in m1.params().iter().zip(m2.params().iter()) {
        for (x, y) in p.tensor.data().iter().zip(q.tensor.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_gradient_step_only_decays_weights() {
    let ds = small_dataset();
    let mut model = model_for("bi_concat", &ds, 0.0);
    let before = model.params().clone();
    let n = before.len();
    AdamW::new(&before, 0.01).step(model.params_mut(), &vec![None; n], 0.1).unwrap();
    for ((_, name, old), (_, _, new)) in before.iter().zip(model.params().iter()) {
        for (a, b) in old.tensor.data().iter().zip(new.tensor.data()) {
            let expected = if old.is_gain_or_bias { *a } else { a - 0.1 * 0.01 * a };
            assert_eq!(*b, expected, "{name}");
        }
    }
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let ds = small_dataset();
    let split = stratified_split(&ds.texts, &ds.labels, [0.7, 0.15, 0.15], 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        grad_accum_steps: 1,
        learning_rate: 3e-3,
        max_epochs: 8,
        patience: 8,
        seed: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = model_for("bi_concat_sub_mult", &ds, 0.1);
        let mut seen = 0;
        let out = train(&mut m, &ds, &split.train, &split.val, &cfg, &mut |b| seen += b.len()).unwrap();
        assert_eq!(seen, labeled_pairs(&ds, &split.train).len() * out.log.len());
        (out, m)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a.log, b.log);
    assert_eq!(ma.params(), mb.params());
    let first = a.log.first().unwrap().train_loss;
    let last = a.log.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
    assert!(a.log.iter().all(|r| r.val_micro_map <= a.best_val_micro_map));
    let again = evaluate(&ma, &ds, &split.val, 1.0).unwrap().micro_ap;
    assert_eq!(again, a.best_val_micro_map);

    let mut buf = Vec::new();
    write_log_csv(&a.log, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,step,train_loss,val_micro_mAP,lr");
}

#[test]
fn evaluate_cross_scores_only_labeled_pairs() {
    let ds = small_dataset();
    let model = model_for("cross", &ds, 0.0);
    let ids = ds.text_ids();
    let r = evaluate(&model, &ds, &ids, 1.0).unwrap();
    assert_eq!(model.encode_calls(), ds.labels.len());
    assert_eq!(r.num_labeled_pairs, ds.labels.len());
}
