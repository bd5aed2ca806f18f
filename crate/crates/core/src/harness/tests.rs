use proptest::prelude::*;

use super::checkpoint::{from_raw, to_raw};
use super::config::{model_from_kv, parse_kv};
use super::*;
use crate::assessment::{select_sets, ActivationLedger, ModuleKind};
use crate::expansion::attach_operators;
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::rng;
use crate::staging::{pre_assess, StagePlan, TrainMode};
use crate::ApexError;

#[test]
fn tokenizer_examples() {
    assert_eq!(tokenize_bytes(b"AB").tokens, vec![BOS, 65, 66]);
    assert_eq!(tokenize_bytes(b"").tokens, vec![BOS]);
    let c = tokenize_documents(&[b"x", b"yz"]);
    assert_eq!(c.tokens, vec![BOS, 120, BOS, 121, 122]);
    assert_eq!(detokenize(&c.tokens), b"xyz");
    assert_ne!(tokenize_bytes(b"a").digest, tokenize_bytes(b"b").digest);
    assert!(synthetic_corpus(5000, 1).tokens.iter().all(|&t| t < VOCAB_SIZE));
    assert_eq!([PAD, EOS, UNK], [256, 258, 259]);
}

#[test]
fn batch_examples() {
    let toks: Vec<usize> = (0..101).collect();
    let epoch = batch_iter(&toks, 10, 2, 0, true).unwrap();
    assert_eq!(windows(&toks, 10).unwrap().len(), 9);
    assert_eq!(epoch.len(), 4);
    let toks: Vec<usize> = (0..110).collect();
    assert_eq!(windows(&toks, 10).unwrap().len(), 10);
    assert_eq!(batch_iter(&toks, 10, 2, 0, true).unwrap().len(), 5);
    let ordered = batch_iter(&toks, 10, 2, 0, false).unwrap();
    assert_eq!(ordered[0][0][0], 0);
    assert_eq!(ordered[0][1][0], 11);
    assert_eq!(ordered[4][1][0], 99);
    assert_eq!(batch_iter(&toks, 10, 2, 7, true).unwrap(), batch_iter(&toks, 10, 2, 7, true).unwrap());
    assert!(matches!(windows(&toks[..5], 10), Err(ApexError::Data(_))));
}

#[test]
fn stream_reshuffles_each_epoch() {
    let toks: Vec<usize> = (0..66).collect();
    let mut s = BatchStream::new(&toks, 10, 2, 3, true).unwrap();
    assert_eq!(s.batches_per_epoch(), 3);
    let first: Vec<_> = (0..3).map(|_| s.next_batch()).collect();
    let second: Vec<_> = (0..3).map(|_| s.next_batch()).collect();
    assert_eq!(s.epoch(), 1);
    let flat = |e: &Vec<Vec<&[usize]>>| {
        let mut v: Vec<usize> = e.iter().flatten().map(|w| w[0]).collect();
        v.sort_unstable();
        v
    };
    assert_eq!(flat(&first), flat(&second));
    assert_ne!(first, second);
}

#[test]
fn split_is_prefix_suffix() {
    let toks: Vec<usize> = (0..100).collect();
    let (a, b) = split_train_eval(&toks, 0.9);
    assert_eq!((a.len(), b.len(), b[0]), (90, 10, 90));
}

fn tiny() -> ModelConfig {
    ModelConfig { n_layers: 2, d_model: 16, n_heads: 4, d_ffn: 16, vocab_size: 260, max_seq_len: 8, seed: 2, ..Default::default() }
}

fn full_state(seed: u64) -> CheckpointState {
    let cfg = ModelConfig { seed, ..tiny() };
    let params = ModelParams::<f32>::init(&cfg).unwrap();
    let toks = synthetic_corpus(400, seed).tokens;
    let samples: Vec<&[usize]> = toks.chunks_exact(8).take(20).collect();
    let ledger = pre_assess(&params, &samples, 0.25, 0.125, 4).unwrap();
    let sets = select_sets(&ledger, 0.25, 0.25, crate::assessment::Strategy::Rank, 0).unwrap();
    let mut ops = attach_operators(&params, &sets, seed).unwrap();
    let mut r = rng::seeded(seed);
    for (_, t) in ops.named_mut() {
        *t = rng::gaussian(&mut r, t.dims(), 0.1);
    }
    ops.ops[1].trainable = false;
    CheckpointState {
        params,
        operators: ops,
        ledger: Some(ledger),
        plan: Some(StagePlan { mode: TrainMode::Partial, act_regu_lambda: 0.125, ..StagePlan::default() }),
        counters: Counters { stage: 2, global_step: 77, tokens_seen: 77 * 512 },
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let state = full_state(4);
    save_checkpoint(&a, &state).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded, state);
    save_checkpoint(&b, &loaded).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let l = loaded.ledger.unwrap();
    let orig = state.ledger.unwrap();
    for layer in 0..2 {
        for kind in [ModuleKind::Mha, ModuleKind::Ffn] {
            assert_eq!(l.module(layer, kind).scores, orig.module(layer, kind).scores);
            assert_eq!(l.module(layer, kind).samples, orig.module(layer, kind).samples);
        }
    }
    assert_eq!(l.samples_seen, orig.samples_seen);
}

#[test]
fn minimal_checkpoint_round_trips() {
    let state = CheckpointState::new(ModelParams::init(&tiny()).unwrap());
    assert_eq!(decode(&encode(&state)).unwrap(), state);
}

#[test]
fn corrupt_inputs_are_rejected() {
    let bytes = encode(&full_state(1));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(ApexError::Format { ref record, .. }) if record == "header"));
    let mut ver = bytes.clone();
    ver[4] = 9;
    assert!(matches!(decode(&ver), Err(ApexError::Format { .. })));
    match decode(&bytes[..bytes.len() - 3]) {
        Err(ApexError::Format { record, reason }) => {
            assert_eq!(reason, "truncated");
            assert!(!record.is_empty());
        }
        other => panic!("expected a format error, got {other:?}"),
    }
    let mut raw = RawCheckpoint::from_bytes(&bytes).unwrap();
    raw.records.get_mut("head").unwrap().data = RecordData::F64(vec![0.0; 16 * 260]);
    match from_raw(&raw) {
        Err(ApexError::Format { record, .. }) => assert_eq!(record, "head"),
        other => panic!("expected a format error, got {other:?}"),
    }
    let mut raw = RawCheckpoint::from_bytes(&bytes).unwrap();
    raw.records.remove("layer1.wd");
    assert!(matches!(from_raw(&raw), Err(ApexError::Format { ref record, .. }) if record == "layer1.wd"));
}

#[test]
fn record_order_does_not_matter() {
    let state = full_state(3);
    let raw = to_raw(&state);
    // write records in reverse name order by hand
    let canonical = raw.to_bytes();
    let header_end = {
        let hlen = u32::from_le_bytes(canonical[8..12].try_into().unwrap()) as usize;
        12 + hlen
    };
    let mut chunks: Vec<Vec<u8>> = Vec::new();
    for (name, rec) in &raw.records {
        let mut one = RawCheckpoint::default();
        one.records.insert(name.clone(), rec.clone());
        let b = one.to_bytes();
        chunks.push(b[12..].to_vec());
    }
    let mut reordered = canonical[..header_end].to_vec();
    for c in chunks.iter().rev() {
        reordered.extend_from_slice(c);
    }
    assert_ne!(reordered, canonical);
    assert_eq!(decode(&reordered).unwrap(), state);
}

#[test]
fn config_parsing() {
    let text = "# toy\nmodel.d_model = 32\nmodel.n_heads=2\nplan.stages=4\nplan.lr=0.01\nplan.mode=partial\n";
    let (cfg, plan) = load_config(text).unwrap();
    assert_eq!((cfg.d_model, cfg.n_heads), (32, 2));
    assert_eq!(plan.stages, 4);
    assert_eq!(plan.stage_lrs, StagePlan::decaying_lrs(0.01, 4));
    assert_eq!(plan.mode, TrainMode::Partial);
    assert!(matches!(load_config("model.widht=3"), Err(ApexError::Config(_))));
    assert!(matches!(load_config("model.d_model"), Err(ApexError::Config(_))));
    assert!(matches!(load_config("a=1\na=2"), Err(ApexError::Config(_))));
    assert!(matches!(load_config("model.d_model=30\nmodel.n_heads=4"), Err(ApexError::Config(_))));
    let mut m = parse_kv("model.activation=gelu").unwrap();
    assert_eq!(model_from_kv(&mut m, tiny()).unwrap().activation.name(), "gelu");
}

#[test]
fn empty_ledger_round_trips() {
    let params = ModelParams::<f32>::init(&tiny()).unwrap();
    let mut state = CheckpointState::new(params);
    state.ledger = Some(ActivationLedger::new(&tiny(), 0.25, 0.25).unwrap());
    assert_eq!(decode(&encode(&state)).unwrap(), state);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn bytes_round_trip(data in proptest::collection::vec(any::<u8>(), 0..1024)) {
        let c = tokenize_bytes(&data);
        prop_assert_eq!(c.tokens.len(), data.len() + 1);
        prop_assert_eq!(detokenize(&c.tokens), data);
    }

    #[test]
    fn checkpoints_round_trip(seed in 0u64..1000) {
        let state = full_state(seed);
        let bytes = encode(&state);
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back), bytes);
        prop_assert_eq!(back, state);
    }
}
