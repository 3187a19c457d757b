use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;

use proptest::prelude::*;

use super::*;
use crate::diffcore::finite_diff_check_all;

fn tiny_corpus() -> TextCorpus {
    TextCorpus::new(
        vec!["alpha".into(), "beta".into()],
        vec![
            vec!["red stripes and red lines".into(), "lines red".into()],
            vec!["blue dots in a lattice".into(), "dots dots blue".into()],
        ],
    )
    .unwrap()
}

fn tiny_lm(corpus: &TextCorpus, seed: u64) -> SmallLm<f64> {
    let cfg = LmConfig {
        d: 4,
        heads: 2,
        ff_width: 8,
        max_len: 4,
    };
    SmallLm::init(cfg, corpus.vocab_size(), &mut nn::rng(seed)).unwrap()
}

#[test]
fn prompt_suite_shape_and_order() {
    let s = render_cot_prompts("MEMS").unwrap();
    assert_eq!(s.prompts.len(), 8);
    assert!(s.prompts[0].contains("Provide an overview"));
    assert!(s.prompts[0].starts_with("Introduction:"));
    assert!(s.prompts[7].starts_with("Future Directions:"));
    assert!(s.prompts.iter().all(|p| p.contains("MEMS")));
    assert_eq!(s, render_cot_prompts("MEMS").unwrap());
    let total: usize = SEM_CATEGORIES
        .iter()
        .map(|c| render_cot_prompts(c).unwrap().prompts.len())
        .sum();
    assert_eq!(total, 80);
}

#[test]
fn empty_category_is_rejected() {
    assert!(matches!(render_cot_prompts(""), Err(Error::EmptyCategoryName)));
    assert!(matches!(render_cot_prompts("  "), Err(Error::EmptyCategoryName)));
}

#[test]
fn bundled_fixture_matches_rendered_prompts() {
    let f = Fixture::bundled();
    assert_eq!(f.len(), 80);
    for c in SEM_CATEGORIES {
        assert!(f.covers(c), "{c}");
        let suite = render_cot_prompts(c).unwrap();
        for (i, p) in suite.prompts.iter().enumerate() {
            let r = f.get(c, i as u8 + 1).unwrap();
            assert_eq!(&r.prompt, p);
            assert!(!r.response.trim().is_empty());
        }
    }
    let mems = f.get("MEMS", 1).unwrap();
    assert!(mems.response.contains("Micro-Electro-Mechanical Systems"));
}

#[test]
fn replay_is_deterministic_and_reports_misses() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fx.jsonl");
    Fixture::bundled().save(&path).unwrap();
    let suite = render_cot_prompts("films").unwrap();
    let a = fetch_description(&suite, ClientMode::Replay, &path).unwrap();
    let b = fetch_description(&suite, ClientMode::Replay, &path).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 8);

    let mut partial = Fixture::default();
    for r in Fixture::bundled().records().filter(|r| !(r.category == "films" && r.prompt_id == 5)) {
        partial.insert(r.clone()).unwrap();
    }
    partial.save(&path).unwrap();
    match fetch_description(&suite, ClientMode::Replay, &path) {
        Err(Error::FixtureMiss { category, prompt_id }) => {
            assert_eq!(category, "films");
            assert_eq!(prompt_id, 5);
        }
        other => panic!("expected FixtureMiss, got {other:?}"),
    }
}

#[test]
fn fixture_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fx.jsonl");
    let f = Fixture::bundled();
    f.save(&path).unwrap();
    assert_eq!(Fixture::load(&path).unwrap(), f);
    let bad = FixtureRecord {
        category: "x".into(),
        prompt_id: 9,
        prompt: String::new(),
        response: String::new(),
    };
    assert!(Fixture::default().insert(bad).is_err());
}

/// Serves `n` chat-completion requests, echoing the prompt, and hands each
/// request body back to the test.
fn mock_server(n: usize) -> (String, mpsc::Receiver<serde_json::Value>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for stream in listener.incoming().take(n) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let prompt = req["messages"][0]["content"].as_str().unwrap().to_string();
            tx.send(req).unwrap();
            let reply = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": format!("answer to {prompt}")}}]})
                .to_string();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.len(),
                reply
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1/chat/completions"), rx)
}

#[test]
fn live_client_sends_deterministic_decoding_and_records() {
    let (endpoint, rx) = mock_server(8);
    let client = LiveClient {
        endpoint,
        model: "test-model".into(),
        api_key: Some("k".into()),
        timeout: Duration::from_secs(10),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rec.jsonl");
    let suite = render_cot_prompts("tips").unwrap();
    let docs = fetch_live(&suite, &client, &path).unwrap();
    assert_eq!(docs.len(), 8);
    for (i, d) in docs.iter().enumerate() {
        assert_eq!(d, &format!("answer to {}", suite.prompts[i]));
        let req = rx.recv().unwrap();
        assert_eq!(req["temperature"], 0);
        assert_eq!(req["top_p"], 1);
        assert_eq!(req["model"], "test-model");
    }
    // The recording replays without the network.
    assert_eq!(fetch_description(&suite, ClientMode::Replay, &path).unwrap(), docs);
}

#[test]
fn live_client_transport_failure() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let client = LiveClient {
        endpoint: format!("http://{addr}/"),
        model: "m".into(),
        api_key: None,
        timeout: Duration::from_secs(5),
    };
    assert!(matches!(client.complete("hi"), Err(Error::TransportError(_))));
}

#[test]
fn vocabulary_rules() {
    let c = tiny_corpus();
    assert_eq!(c.token(PAD_ID), Some("<pad>"));
    assert_eq!(c.token(MASK_ID), Some("<mask>"));
    assert_eq!(c.token(UNK_ID), Some("<unk>"));
    // red ×3, dots ×3, then blue/lines ×2, then singletons.
    let order: Vec<&str> = (3..c.vocab_size()).map(|i| c.token(i).unwrap()).collect();
    assert_eq!(
        order,
        ["dots", "red", "blue", "lines", "a", "and", "in", "lattice", "stripes"]
    );
    assert_eq!(tokenize_text("", &c), Vec::<usize>::new());
    assert_eq!(tokenize_text("Zebra", &c), vec![UNK_ID]);
    assert_eq!(tokenize_text("RED, dots!", &c), vec![c.id("red"), c.id("dots")]);

    let f = TextCorpus::from_fixture(&Fixture::bundled()).unwrap();
    let ids = tokenize_text("MEMS devices", &f);
    assert_eq!(ids.len(), 2);
    assert_eq!(ids, vec![f.id("mems"), f.id("devices")]);
    assert!(ids.iter().all(|&i| i > UNK_ID));
    assert_eq!(TextCorpus::from_fixture(&Fixture::bundled()).unwrap(), f);
}

#[test]
fn empty_corpus_is_rejected() {
    let r = TextCorpus::new(vec!["a".into()], vec![vec!["  ,, ".into()]]);
    assert!(matches!(r, Err(Error::EmptyCorpus)));
}

#[test]
fn mask_count_follows_ceiling_rule() {
    let mut r = nn::rng(1);
    assert_eq!(mask_positions(10, 0.01, &mut r).len(), 1);
    assert_eq!(mask_positions(10, 0.15, &mut r).len(), 2);
    assert_eq!(mask_positions(20, 0.15, &mut r).len(), 3);
    let a = mask_positions(50, 0.15, &mut nn::rng(9));
    let b = mask_positions(50, 0.15, &mut nn::rng(9));
    assert_eq!(a, b);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn mlm_single_position_objective_is_finite() {
    let c = tiny_corpus();
    let lm = tiny_lm(&c, 0);
    let mut g = Graph::new();
    let bound = lm.params.bind(&mut g);
    let seq = tokenize_text("red stripes and red", &c);
    let masked = mask_positions(seq.len(), 0.01, &mut nn::rng(0));
    assert_eq!(masked.len(), 1);
    let l = record_mlm_loss(&mut g, &bound, &lm.cfg, &seq, &masked).unwrap();
    assert!(g.value(l).data()[0].is_finite());
}

#[test]
fn mlm_training_reduces_loss_and_is_seeded() {
    let c = tiny_corpus();
    let lm = tiny_lm(&c, 3);
    let opts = MlmOptions {
        mask_rate: 0.3,
        epochs: 60,
        seed: 5,
        lr: 1e-2,
    };
    let (trained, trace) = mlm_pretrain(&c, &lm, &opts).unwrap();
    assert_eq!(trace.len(), 60);
    let head: f64 = trace[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = trace[55..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
    assert_ne!(trained.params, lm.params);
    let (again, trace2) = mlm_pretrain(&c, &lm, &opts).unwrap();
    assert_eq!(trace, trace2);
    assert_eq!(again.params, trained.params);
}

#[test]
fn mlm_rejects_bad_rate() {
    let c = tiny_corpus();
    let lm = tiny_lm(&c, 0);
    for rate in [0.0, 1.0, -0.5] {
        let opts = MlmOptions {
            mask_rate: rate,
            ..MlmOptions::default()
        };
        assert!(mlm_pretrain(&c, &lm, &opts).is_err());
    }
}

#[test]
fn encode_shapes_purity_and_order_sensitivity() {
    let c = tiny_corpus();
    let lm = tiny_lm(&c, 1);
    assert_eq!(encode_text(&[4], &lm).unwrap().shape(), [1, 4]);
    assert!(matches!(encode_text(&[], &lm), Err(Error::EmptySequence)));
    let a = encode_text(&[3, 4, 5], &lm).unwrap();
    assert_eq!(a, encode_text(&[3, 4, 5], &lm).unwrap());
    let b = encode_text(&[5, 4, 3], &lm).unwrap();
    assert_ne!(a.rows(1, 2).unwrap(), b.rows(1, 2).unwrap());
    // Chunking: max_len = 4 splits 6 tokens into 4 + 2.
    let long = encode_text(&[3, 4, 5, 6, 7, 8], &lm).unwrap();
    assert_eq!(long.shape(), [6, 4]);
    assert_eq!(long.rows(0, 4).unwrap(), encode_text(&[3, 4, 5, 6], &lm).unwrap());
    assert_eq!(long.rows(4, 6).unwrap(), encode_text(&[7, 8], &lm).unwrap());
}

#[test]
fn sinusoidal_table_values() {
    let t: Tensor<f64> = sinusoidal_positions(3, 4);
    assert_eq!(t.at(0, 0), 0.0);
    assert_eq!(t.at(0, 1), 1.0);
    assert!((t.at(2, 0) - 2f64.sin()).abs() < 1e-15);
    assert!((t.at(2, 3) - (2.0 / 100.0f64).cos()).abs() < 1e-15);
}

#[test]
fn pool_small_cases() {
    let row = [0.3, -1.2, 2.0];
    let h = Tensor::<f64>::from_f64([4, 3], &row.repeat(4)).unwrap();
    let u = Tensor::from_f64([1, 3], &[0.7, 0.1, -0.4]).unwrap();
    let (p, _) = attention_pool(&h, &u).unwrap();
    for j in 0..3 {
        assert!((p.data()[j] - row[j]).abs() < 1e-15);
    }

    let h = Tensor::<f64>::from_f64([3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
    let (p, alpha) = attention_pool(&h, &Tensor::zeros([1, 2])).unwrap();
    assert!(alpha.iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
    assert!((p.data()[0] - 3.0).abs() < 1e-12 && (p.data()[1] - 5.0).abs() < 1e-12);

    // Hand logits uᵀh_i = (0.5, -1, 2).
    let h = Tensor::<f64>::from_f64([3, 2], &[0.5, 0.0, -1.0, 0.0, 2.0, 1.0]).unwrap();
    let u = Tensor::from_f64([1, 2], &[1.0, 0.0]).unwrap();
    let (p, alpha) = attention_pool(&h, &u).unwrap();
    let e = [0.5f64.exp(), (-1.0f64).exp(), 2.0f64.exp()];
    let z: f64 = e.iter().sum();
    let want = [(0.5 * e[0] - e[1] + 2.0 * e[2]) / z, e[2] / z];
    for k in 0..3 {
        assert!((alpha[k] - e[k] / z).abs() < 1e-12);
    }
    assert!((p.data()[0] - want[0]).abs() < 1e-6 && (p.data()[1] - want[1]).abs() < 1e-6);
}

fn bank(rows: &[&[f64]], v: &[f64]) -> TextKnowledgeBank<f64> {
    let d = v.len();
    TextKnowledgeBank {
        categories: (0..rows.len()).map(|i| format!("c{i}")).collect(),
        h_text: Tensor::from_f64([rows.len(), d], &rows.concat()).unwrap(),
        u: Tensor::zeros([1, d]),
        v: Tensor::from_f64([1, d], v).unwrap(),
    }
}

#[test]
fn matching_ties_and_zero_vector() {
    let h = Tensor::from_f64([1, 2], &[0.4, -0.9]).unwrap();
    let m = match_text_embedding(&h, &bank(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]], &[0.3, 0.8])).unwrap();
    assert_eq!(m.beta, 0);
    assert!(m.probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    let m = match_text_embedding(&h, &bank(&[&[1.0, 2.0], &[-3.0, 5.0]], &[0.0, 0.0])).unwrap();
    assert_eq!(m.beta, 0);
    assert!(m.probs.iter().all(|&p| (p - 0.5).abs() < 1e-15));
}

#[test]
fn matching_against_brute_force() {
    let rows: [&[f64]; 3] = [&[1.0, 0.0, 2.0], &[0.5, 1.5, -1.0], &[-1.0, 2.0, 0.5]];
    let v = [0.6, -0.2, 1.1];
    let h = [0.9, 0.4, -0.3];
    let m = match_text_embedding(&Tensor::from_f64([1, 3], &h).unwrap(), &bank(&rows, &v)).unwrap();
    let scores: Vec<f64> = rows
        .iter()
        .map(|r| (0..3).map(|j| v[j] * r[j] * h[j]).sum())
        .collect();
    let mut best = 0;
    for k in 1..3 {
        if scores[k] > scores[best] {
            best = k;
        }
    }
    for k in 0..3 {
        assert!((m.scores[k] - scores[k]).abs() < 1e-12);
    }
    assert_eq!(m.beta, best);
    assert_eq!(m.h_text_fus.data(), rows[best]);
}

#[test]
fn incomplete_bank_is_rejected() {
    let mut b = bank(&[&[1.0, 2.0], &[3.0, 4.0]], &[1.0, 1.0]);
    b.categories.push("extra".into());
    let h = Tensor::from_f64([1, 2], &[1.0, 1.0]).unwrap();
    assert!(matches!(match_text_embedding(&h, &b), Err(Error::IncompleteBank(_))));
}

#[test]
fn bank_build_is_deterministic_and_zero_for_missing() {
    let build = || {
        let corpus = TextCorpus::from_fixture(&Fixture::bundled()).unwrap();
        let cfg = LmConfig {
            d: 8,
            heads: 2,
            ff_width: 16,
            max_len: 128,
        };
        let lm = SmallLm::<f64>::init(cfg, corpus.vocab_size(), &mut nn::rng(4)).unwrap();
        let mut heads = ParamSet::new();
        init_text_heads(&mut heads, 8);
        let cats: Vec<String> = ["films", "unknown", "tips"].iter().map(|s| s.to_string()).collect();
        let bank = TextKnowledgeBank::build(&corpus, &lm, &heads, &cats).unwrap();
        (corpus, bank)
    };
    let (c1, b1) = build();
    let (c2, b2) = build();
    assert_eq!(c1, c2);
    assert_eq!(b1, b2);
    assert_eq!(b1.h_text.shape(), [3, 8]);
    assert!(b1.h_text.rows(1, 2).unwrap().data().iter().all(|&x| x == 0.0));
    assert!(b1.h_text.rows(0, 1).unwrap().data().iter().any(|&x| x != 0.0));
}

#[test]
fn text_path_gradients_match_finite_differences() {
    let c = tiny_corpus();
    let lm = tiny_lm(&c, 7);
    let mut params = lm.params.clone();
    let mut r = nn::rng(8);
    params.insert(POOL_NAME, nn::uniform(&mut r, &[1, 4], 0.5));
    params.insert(MATCH_NAME, nn::uniform(&mut r, &[1, 4], 1.0));
    let lists = category_token_lists(&c, &c.categories);
    let h_fus = nn::uniform::<f64>(&mut r, &[1, 4], 1.0);
    let cfg = lm.cfg;
    let obj = move |g: &mut Graph<f64>, b: &BoundParams| {
        let bank = record_bank(g, b, &cfg, &lists)?;
        let h = g.constant(h_fus.clone());
        let (_, probs) = record_match_scores(g, h, bank, b.var(MATCH_NAME)?)?;
        let ce = cross_entropy(g, probs, &[1])?;
        let seq = [3, 4, 5];
        let mlm = record_mlm_loss(g, b, &cfg, &seq, &[1])?;
        g.add(ce, mlm)
    };
    let (worst, name) = finite_diff_check_all(&obj, &params, 1e-5).unwrap();
    assert!(worst < 1e-4, "{name}: {worst}");
}

proptest! {
    #[test]
    fn pool_weights_normalize_and_stay_in_hull(
        m in 1usize..9,
        d in 1usize..6,
        seed in 0u64..1000,
    ) {
        let mut r = nn::rng(seed);
        let h = nn::uniform::<f64>(&mut r, &[m, d], 3.0);
        let u = nn::uniform::<f64>(&mut r, &[1, d], 3.0);
        let (p, alpha) = attention_pool(&h, &u).unwrap();
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        prop_assert!(alpha.iter().all(|&a| a >= 0.0));
        for j in 0..d {
            let col: Vec<f64> = (0..m).map(|i| h.at(i, j)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p.data()[j] >= lo - 1e-12 && p.data()[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn match_probabilities_normalize_and_ignore_shifts(
        c in 2usize..6,
        d in 1usize..6,
        seed in 0u64..1000,
        shift in -20.0f64..20.0,
    ) {
        let mut r = nn::rng(seed);
        let b = TextKnowledgeBank {
            categories: (0..c).map(|i| i.to_string()).collect(),
            h_text: nn::uniform::<f64>(&mut r, &[c, d], 2.0),
            u: Tensor::zeros([1, d]),
            v: nn::uniform(&mut r, &[1, d], 2.0),
        };
        let h = nn::uniform::<f64>(&mut r, &[1, d], 2.0);
        let m = match_text_embedding(&h, &b).unwrap();
        prop_assert!((m.probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let shifted: Vec<f64> = m.scores.iter().map(|s| s + shift).collect();
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::row(shifted));
        let p = g.softmax(s, 1).unwrap();
        prop_assert_eq!(nn::argmax(g.value(p).data()), nn::argmax(&m.probs));
    }
}
