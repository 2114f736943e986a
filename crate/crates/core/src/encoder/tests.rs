use super::*;

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_hidden: 12,
        max_len: 16,
        dropout: 0.0,
        activation: Activation::Gelu,
        pooling: Pooling::Mean,
    }
}

fn setup(config: &EncoderConfig, vocab_size: usize) -> (ParamRegistry, EncoderParams) {
    let mut reg = ParamRegistry::new();
    let mut init = Initializer::new(7);
    let enc = EncoderParams::register(&mut reg, &mut init, "encoder", config, vocab_size).unwrap();
    (reg, enc)
}

#[test]
fn tokenize_examples() {
    let vocab = Vocabulary::build(["great view !", "bad room"], 1);
    let seq = tokenize("Great view!", &vocab, true, 128);
    let expected = vec![CLS, vocab.id("great"), vocab.id("view"), vocab.id("!")];
    assert_eq!(seq.ids, expected);
    assert!(seq.mask.iter().all(|&m| m));

    assert_eq!(tokenize("", &vocab, true, 128).ids, vec![CLS]);
    assert_eq!(tokenize("unseen", &vocab, false, 128).ids, vec![UNK]);

    let long = "word ".repeat(10_000);
    let seq = tokenize(&long, &vocab, true, 128);
    assert_eq!(seq.len(), 128);
    assert!(seq.mask.iter().all(|&m| m));
}

#[test]
fn pair_truncates_text_first() {
    let vocab = Vocabulary::build(["a b c d e f topic name"], 1);
    let seq = tokenize_pair("a b c d e f", "topic name", &vocab, 8);
    assert_eq!(seq.len(), 8);
    assert_eq!(seq.ids[0], CLS);
    assert_eq!(&seq.ids[4..], &[SEP, vocab.id("topic"), vocab.id("name"), SEP]);
    assert_eq!(&seq.ids[1..4], &[vocab.id("a"), vocab.id("b"), vocab.id("c")]);

    let swapped = tokenize_pair("topic name", "a b c d e f", &vocab, 32);
    assert_ne!(swapped.ids, tokenize_pair("a b c d e f", "topic name", &vocab, 32).ids);
}

#[test]
fn pair_segments_mark_topic_half() {
    let vocab = Vocabulary::build(["a b topic name"], 1);
    let seq = tokenize_pair("a b", "topic name", &vocab, 16);
    assert_eq!(seq.segments, vec![0, 0, 0, 0, 1, 1, 1]);
    assert!(tokenize("a b", &vocab, true, 16).segments.iter().all(|&s| s == 0));
}

#[test]
fn config_validation() {
    let mut c = tiny_config();
    c.num_heads = 3;
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.dropout = 1.0;
    assert!(c.validate().is_err());
    assert!(EncoderConfig::default().validate().is_ok());
}

#[test]
fn encode_shape_and_determinism() {
    let cfg = EncoderConfig {
        d_model: 64,
        ..tiny_config()
    };
    let (reg, enc) = setup(&cfg, 20);
    let seq = TokenSequence::new(vec![2, 5, 6, 7, 8, 9, 10], 16);
    let batch = PaddedBatch::dynamic(&[&seq]).unwrap();
    let run = || {
        let mut t = Tape::new(&reg);
        let h = enc.encode(&mut t, &batch).unwrap();
        t.value(h).clone()
    };
    let a = run();
    assert_eq!(a.shape(), &[7, 64]);
    assert_eq!(a, run());
}

#[test]
fn padding_leaves_real_tokens_unchanged() {
    let (reg, enc) = setup(&tiny_config(), 20);
    let short = TokenSequence::new(vec![2, 5, 6], 16);
    let long = TokenSequence::new(vec![2, 7, 8, 9, 10, 11], 16);
    let alone = PaddedBatch::dynamic(&[&short]).unwrap();
    let together = PaddedBatch::dynamic(&[&short, &long]).unwrap();
    assert_eq!(together.seq_len, 6);

    for pooling in [Pooling::Cls, Pooling::Mean, Pooling::Max] {
        let mut t = Tape::new(&reg);
        let h = enc.encode(&mut t, &alone).unwrap();
        let solo_tokens = t.value(h).data().to_vec();
        let p = enc.encode_pooled(&mut t, &alone, pooling).unwrap();
        let solo = t.value(p).data().to_vec();

        let mut t = Tape::new(&reg);
        let h = enc.encode(&mut t, &together).unwrap();
        assert_eq!(&t.value(h).data()[..3 * 8], &solo_tokens[..]);
        let p = enc.encode_pooled(&mut t, &together, pooling).unwrap();
        for (a, b) in t.value(p).row_slice(0).iter().zip(&solo) {
            assert!((a - b).abs() <= 1e-12, "{pooling}");
        }
    }
}

#[test]
fn encode_rejects_bad_inputs() {
    let (reg, enc) = setup(&tiny_config(), 20);
    let mut t = Tape::new(&reg);
    let too_long = TokenSequence::new(vec![4; 17], 17);
    let b = PaddedBatch::dynamic(&[&too_long]).unwrap();
    assert!(matches!(enc.encode(&mut t, &b), Err(Error::Length { len: 17, max: 16 })));
    let bad = TokenSequence::new(vec![2, 20], 16);
    let b = PaddedBatch::dynamic(&[&bad]).unwrap();
    assert!(matches!(enc.encode(&mut t, &b), Err(Error::TokenOutOfRange { id: 20, .. })));
}

#[test]
fn dynamic_padding_pads_to_batch_max() {
    let seqs: Vec<TokenSequence> = [5, 7, 6]
        .iter()
        .map(|&n| TokenSequence::new(vec![4; n], 128))
        .collect();
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let b = PaddedBatch::dynamic(&refs).unwrap();
    assert_eq!(b.seq_len, 7);
    assert_eq!(b.mask.iter().filter(|&&m| !m).count(), 2 + 1);
    let same: Vec<TokenSequence> = (0..3).map(|_| TokenSequence::new(vec![4; 5], 128)).collect();
    let refs: Vec<&TokenSequence> = same.iter().collect();
    let b = PaddedBatch::dynamic(&refs).unwrap();
    assert!(b.mask.iter().all(|&m| m));
}

#[test]
fn gain_and_bias_flags() {
    let (reg, _) = setup(&tiny_config(), 20);
    for (_, name, p) in reg.iter() {
        let expected = name.contains("gain") || name.contains("bias") || name.contains(".b");
        assert_eq!(p.is_gain_or_bias, expected, "{name}");
    }
}

#[test]
fn attach_finds_registered_weights() {
    let (reg, enc) = setup(&tiny_config(), 20);
    let again = EncoderParams::attach(&reg, "encoder", &tiny_config(), 20).unwrap();
    let seq = TokenSequence::new(vec![2, 3, 4], 16);
    let b = PaddedBatch::dynamic(&[&seq]).unwrap();
    let mut t = Tape::new(&reg);
    let x = enc.encode(&mut t, &b).unwrap();
    let y = again.encode(&mut t, &b).unwrap();
    assert_eq!(t.value(x), t.value(y));
    assert!(EncoderParams::attach(&reg, "other", &tiny_config(), 20).is_err());
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let (reg, enc) = setup(&tiny_config(), 12);
    let a = TokenSequence::new(vec![2, 5, 6, 7], 16);
    let b = TokenSequence::new(vec![2, 8], 16);
    let batch = PaddedBatch::dynamic(&[&a, &b]).unwrap();
    let report = crate::nncore::grad_check(&reg, 1e-5, 1e-4, |t| {
        let p = enc.encode_pooled(t, &batch, Pooling::Mean)?;
        let sq = t.mul(p, p)?;
        Ok(t.sum(sq))
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}
