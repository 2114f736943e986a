use std::io::{BufRead, BufReader, Cursor, Read, Write};
use std::sync::Arc;

use super::*;
use crate::data::synthetic::{generate, SynthConfig};
use crate::data::Dataset;
use crate::encoder::{Activation, EncoderConfig, Pooling, Vocabulary};
use crate::models::ModelConfig;

fn corpus() -> Dataset {
    generate(&SynthConfig {
        num_texts: 40,
        num_topics: 10,
        num_groups: 2,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn model(name: &str, ds: &Dataset) -> Model {
    let enc = EncoderConfig {
        d_model: 16,
        num_layers: 1,
        num_heads: 2,
        ffn_hidden: 32,
        max_len: 32,
        dropout: 0.1,
        activation: Activation::Gelu,
        pooling: Pooling::Mean,
    };
    let mut cfg = ModelConfig::preset(name, enc).unwrap();
    cfg.init_std = 0.1;
    let vocab = Vocabulary::build(
        ds.texts
            .iter()
            .map(|t| t.text.as_str())
            .chain(ds.topics.iter().map(|t| t.description.as_str())),
        1,
    );
    Model::new(cfg, vocab, 7).unwrap()
}

fn texts(ds: &Dataset) -> (Vec<String>, Vec<&str>) {
    (
        ds.texts.iter().map(|t| t.text_id.clone()).collect(),
        ds.texts.iter().map(|t| t.text.as_str()).collect(),
    )
}

#[test]
fn cache_encodes_each_topic_once() {
    let ds = corpus();
    let m = model("bi_concat_sub_mult", &ds);
    m.reset_counters();
    let cache = build_topic_cache(&m, &ds.topics).unwrap();
    assert_eq!(m.encode_calls(), ds.topics.len());
    assert_eq!(cache.len(), 10);
    assert_eq!(cache, build_topic_cache(&m, &ds.topics).unwrap());
    assert!(matches!(
        build_topic_cache(&model("cross", &ds), &ds.topics),
        Err(Error::UnsupportedArchitecture(_))
    ));
    assert!(build_topic_cache(&m, &[]).is_err());
}

#[test]
fn predict_batch_counts_and_matches_single_inference() {
    let ds = corpus();
    let m = model("bi_concat_sub_mult", &ds);
    let cache = build_topic_cache(&m, &ds.topics).unwrap();
    let (ids, xs) = texts(&ds);
    m.reset_counters();
    let out = predict_batch(&ids[..5], &xs[..5], &cache, &m).unwrap();
    assert_eq!(m.encode_calls(), 5);
    assert_eq!(m.head_evals(), 50);
    for (i, row) in out.scores.iter().enumerate() {
        let single = predict_batch(&ids[i..=i], &xs[i..=i], &cache, &m).unwrap();
        for (a, b) in row.iter().zip(&single.scores[0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    let empty = predict_batch(&[], &[], &cache, &m).unwrap();
    assert!(empty.scores.is_empty());
}

#[test]
fn stale_cache_is_refused() {
    let ds = corpus();
    let mut m = model("bi_cosine", &ds);
    let cache = build_topic_cache(&m, &ds.topics).unwrap();
    let id = m.params().ids().next().unwrap();
    m.params_mut().tensor_mut(id).data_mut()[0] += 1e-3;
    let (ids, xs) = texts(&ds);
    assert!(matches!(
        predict_batch(&ids, &xs, &cache, &m),
        Err(Error::StaleCache { .. })
    ));
    assert!(matches!(Predictor::new(m, cache), Err(Error::StaleCache { .. })));
}

#[test]
fn padding_and_bucketing_leave_scores_unchanged() {
    let ds = corpus();
    let p = Predictor::warm(model("bi_concat_sub_mult", &ds), &ds.topics).unwrap();
    let (_, xs) = texts(&ds);
    let one = BatchOptions {
        max_batch: 1,
        dynamic_padding: true,
        bucket_by_length: false,
    };
    let reference = p.score(&xs, &one).unwrap();
    for opts in [
        BatchOptions {
            max_batch: 16,
            dynamic_padding: true,
            bucket_by_length: false,
        },
        BatchOptions {
            max_batch: 16,
            dynamic_padding: false,
            bucket_by_length: false,
        },
        BatchOptions {
            max_batch: 7,
            dynamic_padding: true,
            bucket_by_length: true,
        },
    ] {
        let got = p.score(&xs, &opts).unwrap();
        for (a, b) in got.iter().flatten().zip(reference.iter().flatten()) {
            assert!((a - b).abs() < 1e-6, "{opts:?}");
        }
    }
}

#[test]
fn dynamic_pad_uses_batch_maximum() {
    let seqs: Vec<TokenSequence> = [5, 7, 6].iter().map(|&n| TokenSequence::new(vec![4; n], 32)).collect();
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let b = dynamic_pad(&refs).unwrap();
    assert_eq!(b.seq_len, 7);
    assert_eq!(b.mask.iter().filter(|&&m| !m).count(), 3);
    let same: Vec<TokenSequence> = (0..3).map(|_| TokenSequence::new(vec![4; 6], 32)).collect();
    let refs: Vec<&TokenSequence> = same.iter().collect();
    assert!(dynamic_pad(&refs).unwrap().mask.iter().all(|&m| m));
}

#[test]
fn buckets_group_similar_lengths() {
    let b = length_buckets(&[9, 2, 5, 2, 8], 2, true);
    assert_eq!(b, vec![vec![1, 3], vec![2, 4], vec![0]]);
    assert_eq!(length_buckets(&[9, 2, 5], 2, false), vec![vec![0, 1], vec![2]]);
}

#[test]
fn window_size_trigger_fires_immediately() {
    let mut w = WindowBatcher::new(WindowConfig::default()).unwrap();
    let mut out = Vec::new();
    for i in 0..300 {
        out.extend(w.push(i, 0));
    }
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].items.len(), 300);
    assert_eq!(out[0].trigger, Trigger::Size);
    assert_eq!(out[0].dispatched_at, 0);
    assert!(w.is_empty());
}

#[test]
fn window_time_trigger_after_silence() {
    let mut w = WindowBatcher::new(WindowConfig::default()).unwrap();
    for i in 0..10 {
        assert!(w.push(i, 1_000 * i as u64).is_none());
    }
    assert!(w.poll(2_999_999).is_none());
    let b = w.poll(3_000_000).unwrap();
    assert_eq!(b.items, (0..10).collect::<Vec<_>>());
    assert_eq!(b.trigger, Trigger::Time);
}

#[test]
fn size_two_pairs_events() {
    let mut w = WindowBatcher::new(WindowConfig {
        max_batch_size: 2,
        max_window_us: 10_000_000,
    })
    .unwrap();
    let batches: Vec<Vec<u64>> = (0..4u64).filter_map(|t| w.push(t, t * 1_000_000)).map(|b| b.items).collect();
    assert_eq!(batches, vec![vec![0, 1], vec![2, 3]]);
}

#[test]
fn simulator_answers_every_event_once() {
    let events: Vec<SimEvent> = (0..5_000)
        .map(|i| SimEvent {
            id: i,
            arrival_us: i * 700 + (i % 13) * 50,
        })
        .collect();
    let mut events = events;
    events.sort_by_key(|e| e.arrival_us);
    let cfg = SimConfig {
        window: WindowConfig {
            max_batch_size: 64,
            max_window_us: 100_000,
        },
        tick_us: 1_000,
        ..SimConfig::default()
    };
    let r = simulate(&events, &cfg).unwrap();
    let mut ids: Vec<u64> = r.responses.iter().map(|x| x.id).collect();
    ids.sort();
    assert_eq!(ids, (0..5_000).collect::<Vec<_>>());
    assert_eq!(r.rejected, 0);
    assert!(r.max_dispatch_delay_us <= 100_000 + 1_000);
    assert!(r.batches.iter().all(|b| b.size <= 64));
    assert!(r.max_in_flight <= 1);
    assert_eq!(simulate(&events, &cfg).unwrap(), r);
}

#[test]
fn overflow_is_rejected_explicitly() {
    let events: Vec<SimEvent> = (0..1_000).map(|i| SimEvent { id: i, arrival_us: i }).collect();
    let cfg = SimConfig {
        window: WindowConfig {
            max_batch_size: 10,
            max_window_us: 1_000,
        },
        queue_capacity: 50,
        concurrency: 2,
        service_fixed_us: 100_000,
        ..SimConfig::default()
    };
    let r = simulate(&events, &cfg).unwrap();
    assert!(r.rejected > 0);
    assert_eq!(r.accepted + r.rejected, 1_000);
    assert_eq!(r.responses.len(), 1_000);
    assert_eq!(r.max_in_flight, 2);
    let scored = r.responses.iter().filter(|x| x.outcome == SimOutcome::Scored).count();
    assert_eq!(scored, r.accepted);
}

#[test]
fn unsorted_events_are_refused() {
    let events = [SimEvent { id: 0, arrival_us: 5 }, SimEvent { id: 1, arrival_us: 4 }];
    assert!(simulate(&events, &SimConfig::default()).is_err());
}

fn server_config() -> ServerConfig {
    ServerConfig {
        window: WindowConfig {
            max_batch_size: 4,
            max_window_us: 20_000,
        },
        concurrency: 2,
        ..ServerConfig::default()
    }
}

#[test]
fn line_server_answers_each_request() {
    let ds = corpus();
    let p = Arc::new(Predictor::warm(model("bi_concat_sub_mult", &ds), &ds.topics).unwrap());
    let mut input = String::new();
    for (i, t) in ds.texts.iter().take(9).enumerate() {
        input.push_str(&serde_json::to_string(&Request { id: i.into(), text: t.text.clone() }).unwrap());
        input.push('\n');
    }
    input.push_str("{not json\n");
    let mut out = Vec::new();
    let stats = serve_lines(Cursor::new(input), &mut out, Arc::clone(&p), server_config()).unwrap();
    assert_eq!(stats.requests, 10);
    assert_eq!(stats.responses, 10);
    assert_eq!(stats.malformed, 1);
    let responses: Vec<Response> = out
        .lines()
        .map(|l| serde_json::from_str(&l.unwrap()).unwrap())
        .collect();
    assert_eq!(responses.iter().filter(|r| r.error.is_some()).count(), 1);
    for r in responses.iter().filter(|r| r.error.is_none()) {
        let i = r.id.as_u64().unwrap() as usize;
        let expected = p.score(&[ds.texts[i].text.as_str()], &BatchOptions::default()).unwrap();
        let scores = r.scores.as_ref().unwrap();
        assert_eq!(scores.keys().cloned().collect::<Vec<_>>(), p.cache().topic_ids);
        for (a, b) in scores.values().zip(&expected[0]) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(r.model_hash.as_deref(), Some(p.model_hash()));
    }
}

#[test]
fn tcp_server_round_trip() {
    let ds = corpus();
    let p = Arc::new(Predictor::warm(model("bi_cosine", &ds), &ds.topics).unwrap());
    let (tx, rx) = std::sync::mpsc::channel();
    let server = std::thread::spawn(move || {
        serve_tcp("127.0.0.1:0", p, server_config(), Some(1), |addr| tx.send(addr).unwrap()).unwrap();
    });
    let addr = rx.recv().unwrap();
    let mut stream = std::net::TcpStream::connect(addr).unwrap();
    for i in 0..3 {
        writeln!(stream, "{{\"id\": \"r{i}\", \"text\": \"{}\"}}", ds.texts[i].text).unwrap();
    }
    stream.shutdown(std::net::Shutdown::Write).unwrap();
    let mut body = String::new();
    stream.read_to_string(&mut body).unwrap();
    server.join().unwrap();
    let mut ids: Vec<String> = BufReader::new(body.as_bytes())
        .lines()
        .map(|l| serde_json::from_str::<Response>(&l.unwrap()).unwrap().id.as_str().unwrap().to_string())
        .collect();
    ids.sort();
    assert_eq!(ids, vec!["r0", "r1", "r2"]);
}

fn write_input(dir: &std::path::Path, ds: &Dataset, n: usize) -> std::path::PathBuf {
    let path = dir.join("history.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    for i in 0..n {
        let t = &ds.texts[i % ds.texts.len()];
        writeln!(f, "{}", serde_json::json!({"text_id": format!("h{i}"), "text": t.text})).unwrap();
        if i == 17 {
            writeln!(f, "{{\"text_id\": 5}}").unwrap();
        }
    }
    path
}

#[test]
fn backfill_conserves_rows_and_resumes() {
    let ds = corpus();
    let p = Predictor::warm(model("bi_concat_sub_mult", &ds), &ds.topics).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let input = write_input(dir.path(), &ds, 1_000);
    let cfg = BackfillConfig {
        window_size: 64,
        ..BackfillConfig::default()
    };

    let full = dir.path().join("full.jsonl");
    let s = backfill(&input, &full, &dir.path().join("full.progress"), &p, &cfg).unwrap();
    assert!(s.complete);
    assert_eq!(s.rows_written, 1_000);
    assert_eq!(s.malformed, 1);
    let full_body = std::fs::read_to_string(&full).unwrap();
    assert_eq!(full_body.lines().count(), 1_000);

    let plain = dir.path().join("plain.jsonl");
    let unbucketed = BackfillConfig {
        batch: BatchOptions {
            bucket_by_length: false,
            ..BatchOptions::default()
        },
        ..cfg
    };
    backfill(&input, &plain, &dir.path().join("plain.progress"), &p, &unbucketed).unwrap();
    for (a, b) in full_body.lines().zip(std::fs::read_to_string(&plain).unwrap().lines()) {
        let a: serde_json::Value = serde_json::from_str(a).unwrap();
        let b: serde_json::Value = serde_json::from_str(b).unwrap();
        assert_eq!(a["text_id"], b["text_id"]);
        for (x, y) in a["scores"].as_object().unwrap().values().zip(b["scores"].as_object().unwrap().values()) {
            assert!((x.as_f64().unwrap() - y.as_f64().unwrap()).abs() < 1e-6);
        }
    }

    let part = dir.path().join("part.jsonl");
    let progress = dir.path().join("part.progress");
    let first = backfill(&input, &part, &progress, &p, &BackfillConfig { stop_after: Some(500), ..cfg }).unwrap();
    assert!(!first.complete);
    assert_eq!(first.lines_read, 500);
    // Simulate a crash that left a partial window behind the checkpoint.
    std::fs::OpenOptions::new()
        .append(true)
        .open(&part)
        .unwrap()
        .write_all(b"{\"text_id\":\"torn")
        .unwrap();
    let second = backfill(&input, &part, &progress, &p, &cfg).unwrap();
    assert_eq!(second.resumed_from_line, 500);
    assert!(second.complete);
    assert_eq!(std::fs::read_to_string(&part).unwrap(), full_body);
}

#[test]
fn cost_model_and_csv() {
    assert!((cost_per_million(8_000.0, DEFAULT_PRICE_PER_MIN) - 7.5).abs() < 1e-9);
    let rows = vec![
        BenchRow {
            batch_size: 300,
            concurrency: 1,
            throughput_per_min: Some(8_000.0),
            usd_per_1m: Some(7.5),
        },
        BenchRow {
            batch_size: 1,
            concurrency: 50,
            throughput_per_min: None,
            usd_per_1m: None,
        },
    ];
    let mut out = Vec::new();
    write_benchmark_csv(&rows, &mut out).unwrap();
    assert_eq!(
        String::from_utf8(out).unwrap(),
        "batch_size,concurrency,throughput_per_min,usd_per_1m\n300,1,8000.00,7.50\n1,50,,\n"
    );
    assert_eq!(BenchConfig::grid(&[1, 8], &[1, 2]), vec![(1, 1), (1, 2), (8, 1), (8, 2)]);
}

#[test]
fn benchmark_reports_every_configuration() {
    let ds = corpus();
    let p = Predictor::warm(model("bi_concat_sub_mult", &ds), &ds.topics).unwrap();
    let (_, xs) = texts(&ds);
    let cfg = BenchConfig {
        configs: vec![(1, 1), (4, 2), (0, 1)],
        duration_ms: 50,
        ..BenchConfig::default()
    };
    let rows = benchmark(&p, &xs, &cfg).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].throughput_per_min.unwrap() > 0.0);
    assert!(rows[1].throughput_per_min.unwrap() > 0.0);
    assert!(rows[2].throughput_per_min.is_none());
    let r = &rows[0];
    let expected = cost_per_million(r.throughput_per_min.unwrap(), DEFAULT_PRICE_PER_MIN);
    assert_eq!(r.usd_per_1m, Some(expected));
}
