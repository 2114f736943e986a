use super::*;
use crate::encoder::{Activation, EncoderConfig};
use crate::nncore::grad_check;

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_hidden: 16,
        max_len: 24,
        dropout: 0.0,
        activation: Activation::Gelu,
        pooling: Pooling::Mean,
    }
}

fn vocab() -> Vocabulary {
    Vocabulary::build(
        ["the pool was great", "noisy room near the lift", "pool: swimming", "noise: sound levels"],
        1,
    )
}

fn model(name: &str) -> Model {
    let mut cfg = ModelConfig::preset(name, tiny_encoder()).unwrap();
    cfg.head_dropout = 0.0;
    Model::new(cfg, vocab(), 3).unwrap()
}

fn zero_head(m: &mut Model) {
    let names: Vec<String> = m
        .params()
        .iter()
        .filter(|(_, n, _)| n.starts_with("head."))
        .map(|(_, n, _)| n.to_string())
        .collect();
    for n in names {
        let id = m.params().id(&n).unwrap();
        m.params_mut().tensor_mut(id).data_mut().fill(0.0);
    }
}

#[test]
fn combine_example() {
    let reg = ParamRegistry::new();
    let mut t = Tape::new(&reg);
    let u = t.constant(Tensor::row(vec![1.0, 2.0]));
    let v = t.constant(Tensor::row(vec![3.0, 4.0]));
    let e = combine(&mut t, u, v, CombinationMode::ConcatSubMult).unwrap();
    assert_eq!(t.value(e).data(), &[1.0, 2.0, 3.0, 4.0, -2.0, -2.0, 3.0, 8.0]);
    let e = combine(&mut t, u, u, CombinationMode::ConcatSub).unwrap();
    assert_eq!(&t.value(e).data()[4..], &[0.0, 0.0]);
    let w = t.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
    assert!(combine(&mut t, u, w, CombinationMode::Concat).is_err());
}

#[test]
fn dimension_ladder() {
    assert_eq!(CombinationMode::Concat.width(64), Some(128));
    assert_eq!(CombinationMode::ConcatSub.width(64), Some(192));
    assert_eq!(CombinationMode::ConcatSubMult.width(64), Some(256));
    assert_eq!(CombinationMode::Cosine.width(64), None);
    for (name, d_e) in [("bi_concat", 16), ("bi_concat_sub", 24), ("bi_concat_sub_mult", 32)] {
        let m = model(name);
        let w1 = m.params().by_name("head.ffn1.weight").unwrap();
        assert_eq!(w1.tensor.shape(), &[d_e, 8]);
        assert_eq!(m.params().by_name("head.ffn2.weight").unwrap().tensor.shape(), &[8, 1]);
    }
    assert!(model("bi_cosine").params().iter().all(|(_, n, _)| !n.starts_with("head")));
    assert_eq!(model("cross").params().by_name("head.weight").unwrap().tensor.shape(), &[8, 1]);
}

#[test]
fn config_rules() {
    let mut cfg = ModelConfig::preset("bi_concat", tiny_encoder()).unwrap();
    cfg.combination = Some(CombinationMode::Cosine);
    assert!(cfg.validate().is_err());
    let mut cfg = ModelConfig::preset("cross", tiny_encoder()).unwrap();
    cfg.combination = Some(CombinationMode::Concat);
    assert!(cfg.validate().is_err());
    assert_eq!(ModelConfig::preset("bi_cosine", tiny_encoder()).unwrap().encoder.pooling, Pooling::Mean);
    assert_eq!(ModelConfig::preset("bi_concat", tiny_encoder()).unwrap().encoder.pooling, Pooling::Cls);
    assert!(ModelConfig::preset("nope", tiny_encoder()).is_err());
    for name in MODEL_NAMES {
        let cfg = ModelConfig::preset(name, tiny_encoder()).unwrap();
        assert_eq!(cfg.name(), name);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), cfg);
    }
}

#[test]
fn zero_head_gives_one_half() {
    for name in ["cross", "bi_concat", "bi_concat_sub_mult"] {
        let mut m = model(name);
        zero_head(&mut m);
        let s = m.score_pairs(&["the pool was great", "x"], &["pool: swimming", "noise: sound"]).unwrap();
        assert_eq!(s, vec![0.5, 0.5], "{name}");
    }
}

#[test]
fn cosine_outputs_and_loss() {
    let reg = ParamRegistry::new();
    let mut t = Tape::new(&reg);
    let u = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 3.0]]).unwrap());
    let v = t.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap());
    let c = t.cosine_rows(u, v).unwrap();
    assert_eq!(t.value(c).data()[0], 0.0);
    assert!((t.value(c).data()[1] - 1.0).abs() < 1e-15);
    let one = t.constant(Tensor::from_rows(&[vec![1.0]]).unwrap());
    let l = t.mse(one, &[1.0]).unwrap();
    assert_eq!(t.value(l).item(), 0.0);

    let m = model("bi_cosine");
    let s = m.score_pairs(&["the pool was great"], &["pool: swimming"]).unwrap()[0];
    assert!((0.0..=1.0).contains(&s));
}

#[test]
fn shared_text_encoding_matches_independent_encoding() {
    for name in ["bi_concat_sub_mult", "bi_cosine"] {
        let m = model(name);
        let text = "the pool was great";
        let both = m.score_pairs(&[text, text], &["pool: swimming", "noise: sound levels"]).unwrap();
        m.reset_counters();
        let a = m.score_pairs(&[text], &["pool: swimming"]).unwrap();
        let b = m.score_pairs(&[text], &["noise: sound levels"]).unwrap();
        assert_eq!(both, vec![a[0], b[0]], "{name}");
        assert_eq!(m.encode_calls(), 4);
    }
}

#[test]
fn encode_counts() {
    let texts: Vec<String> = (0..5).map(|i| format!("the pool {i}")).collect();
    let topics: Vec<String> = (0..3).map(|i| format!("noise {i}")).collect();
    let tx: Vec<&str> = texts.iter().map(String::as_str).collect();
    let tp: Vec<&str> = topics.iter().map(String::as_str).collect();
    for name in MODEL_NAMES {
        let m = model(name);
        let s = m.score_matrix(&tx, &tp).unwrap();
        assert_eq!((s.len(), s[0].len()), (5, 3));
        let expected = if name == "cross" { 15 } else { 8 };
        assert_eq!(m.encode_calls(), expected, "{name}");
        assert_eq!(m.head_evals(), 15, "{name}");
        assert!(s.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn score_matrix_agrees_with_pairs() {
    let texts = ["the pool was great", "noisy room", "lift"];
    let topics = ["pool: swimming", "noise: sound levels"];
    for name in MODEL_NAMES {
        let m = model(name);
        let matrix = m.score_matrix(&texts, &topics).unwrap();
        for (i, x) in texts.iter().enumerate() {
            for (j, t) in topics.iter().enumerate() {
                let single = m.score_pairs(&[x], &[t]).unwrap()[0];
                assert!((matrix[i][j] - single).abs() < 1e-12, "{name}");
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let texts = ["the pool was great", "noisy room near the lift", "the pool was great"];
    let topics = ["pool: swimming", "pool: swimming", "noise: sound levels"];
    let labels = [1.0, 0.0, 0.0];
    for name in MODEL_NAMES {
        let m = model(name);
        let report = grad_check(m.params(), 1e-5, 1e-4, |t| {
            let out = m.forward_pairs(t, &texts, &topics)?;
            m.loss(t, out, &labels)
        })
        .unwrap();
        assert!(report.passed(), "{name}: {report:?}");
    }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for name in MODEL_NAMES {
        let m = model(name);
        let path = dir.path().join(name);
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
        assert_eq!(back.fingerprint().unwrap(), m.fingerprint().unwrap());
        let s = ["the pool was great"];
        let t = ["pool: swimming"];
        assert_eq!(back.score_pairs(&s, &t).unwrap(), m.score_pairs(&s, &t).unwrap());
    }
    let m = model("cross");
    let path = dir.path().join("tampered");
    m.save(&path).unwrap();
    let mut cfg = m.config().clone();
    cfg.head_dropout = 0.2;
    std::fs::write(path.join("config.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    assert!(matches!(Model::load(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn topic_rendering() {
    assert_eq!(TopicRendering::NameDescription.render("Pool", "swimming"), "Pool: swimming");
    assert_eq!(TopicRendering::Description.render("Pool", "swimming"), "swimming");
}
