use proptest::prelude::*;
use rand::Rng;

use super::*;
use super::Strategy;
use crate::model::{forward_batch, ffn_forward, ModelConfig, ModelParams, ParamVars};
use crate::numerics::{rms_norm, rng, Tape, Tensor};

fn cfg(layers: usize, heads: usize, d_ffn: usize) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        d_model: heads * 2,
        n_heads: heads,
        d_ffn,
        vocab_size: 16,
        max_seq_len: 8,
        seed: 1,
        ..Default::default()
    }
}

/// Independent recount: rank by pairwise comparison instead of sorting.
fn recount(samples: &[Vec<f64>], k: usize) -> Vec<i64> {
    let n = samples[0].len();
    let mut s = vec![0i64; n];
    for v in samples {
        for i in 0..n {
            let above = (0..n).filter(|&j| v[j] > v[i] || (v[j] == v[i] && j < i)).count();
            let below = (0..n).filter(|&j| v[j] < v[i] || (v[j] == v[i] && j < i)).count();
            if above < k {
                s[i] += 1;
            }
            if below < k {
                s[i] -= 1;
            }
        }
    }
    s
}

#[test]
fn component_count_examples() {
    assert_eq!(component_count(32, 0.1875).unwrap(), 6);
    assert_eq!(component_count(16, 0.125).unwrap(), 2);
    assert_eq!(component_count(4, 0.01).unwrap(), 1);
    assert!(matches!(component_count(4, 0.3), Err(crate::ApexError::Config(_))));
    assert!(matches!(component_count(4, 0.0), Err(crate::ApexError::Config(_))));
}

#[test]
fn single_sample_votes() {
    let mut m = ModuleStats::new(4);
    update_scores(&mut m, &[4.0, 1.0, 2.0, 3.0], 0.25).unwrap();
    assert_eq!(m.scores, vec![1, -1, 0, 0]);
    update_scores(&mut m, &[1.0, 4.0, 3.0, 2.0], 0.25).unwrap();
    assert_eq!(m.scores, vec![0, 0, 0, 0]);
    assert!(matches!(update_scores(&mut m, &[1.0], 0.25), Err(crate::ApexError::Shape(_))));
}

#[test]
fn streamed_scores_equal_recount() {
    let mut r = rng::seeded(7);
    let samples: Vec<Vec<f64>> = (0..100).map(|_| (0..12).map(|_| r.random::<f64>()).collect()).collect();
    let mut m = ModuleStats::new(12);
    for s in &samples {
        update_scores(&mut m, s, 0.25).unwrap();
    }
    assert_eq!(m.scores, recount(&samples, 3));
    assert_eq!(m.scores.iter().sum::<i64>(), 0);
}

#[test]
fn selection_examples() {
    let c = cfg(1, 4, 4);
    let mut ledger = ActivationLedger::new(&c, 0.25, 0.25).unwrap();
    ledger.samples_seen = 1;
    ledger.mha[0].scores = vec![5, -2, 0, 3];
    ledger.ffn[0].scores = vec![2, 2, 0, -1];
    let sets = select_sets(&ledger, 0.25, 0.25, Strategy::Rank, 0).unwrap();
    assert_eq!(sets.layers[0].mha_pos, vec![0]);
    assert_eq!(sets.layers[0].mha_neg, vec![1]);
    assert_eq!(sets.layers[0].ffn_pos, vec![0]);
    assert_eq!(sets.layers[0].ffn_neg, vec![3]);
}

#[test]
fn all_equal_scores_still_give_disjoint_sets() {
    let c = cfg(1, 4, 8);
    let mut ledger = ActivationLedger::new(&c, 0.25, 0.25).unwrap();
    ledger.samples_seen = 1;
    let sets = select_sets(&ledger, 0.25, 0.25, Strategy::Rank, 0).unwrap();
    assert_eq!(sets.layers[0].mha_pos, vec![0]);
    assert_eq!(sets.layers[0].mha_neg, vec![1]);
    assert_eq!(sets.layers[0].ffn_pos, vec![0, 1]);
    assert_eq!(sets.layers[0].ffn_neg, vec![2, 3]);
}

#[test]
fn random_selection_is_reproducible() {
    let c = cfg(2, 4, 16);
    let ledger = ActivationLedger::new(&c, 0.25, 0.25).unwrap();
    let a = select_sets(&ledger, 0.25, 0.25, Strategy::Random, 9).unwrap();
    let b = select_sets(&ledger, 0.25, 0.25, Strategy::Random, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.layers[1].ffn_pos.len(), 4);
    a.validate().unwrap();
}

#[test]
fn empty_ledger_rejected_for_rank_and_avg() {
    let ledger = ActivationLedger::new(&cfg(1, 4, 8), 0.25, 0.25).unwrap();
    for s in [Strategy::Rank, Strategy::Avg] {
        assert!(matches!(select_sets(&ledger, 0.25, 0.25, s, 0), Err(crate::ApexError::State(_))));
    }
}

#[test]
fn avg_strategy_uses_mean_norms() {
    let c = cfg(1, 4, 4);
    let mut ledger = ActivationLedger::new(&c, 0.25, 0.25).unwrap();
    // Component 2 wins most votes but component 3 has the largest mean.
    for norms in [[1.0, 0.0, 5.0, 4.0], [1.0, 0.0, 5.0, 4.0], [1.0, 0.0, 0.5, 100.0]] {
        update_scores(&mut ledger.mha[0], &norms, 0.25).unwrap();
        update_scores(&mut ledger.ffn[0], &norms, 0.25).unwrap();
        ledger.samples_seen += 1;
    }
    let rank = select_sets(&ledger, 0.25, 0.25, Strategy::Rank, 0).unwrap();
    let avg = select_sets(&ledger, 0.25, 0.25, Strategy::Avg, 0).unwrap();
    assert_eq!(rank.layers[0].mha_pos, vec![2]);
    assert_eq!(avg.layers[0].mha_pos, vec![3]);
}

#[test]
fn std_report_cases() {
    let c = cfg(1, 2, 4);
    let mut ledger = ActivationLedger::new(&c, 0.25, 0.25).unwrap();
    assert!(matches!(activation_std_report(&ledger), Err(crate::ApexError::State(_))));
    update_scores(&mut ledger.mha[0], &[1.0, 3.0], 0.25).unwrap();
    update_scores(&mut ledger.ffn[0], &[2.0, 2.0, 2.0, 2.0], 0.25).unwrap();
    ledger.samples_seen = 1;
    let rep = activation_std_report(&ledger).unwrap();
    assert_eq!(rep[0].std, 1.0);
    assert_eq!(rep[1].std, 0.0);
}

#[test]
fn std_report_matches_two_pass_oracle() {
    let c = cfg(2, 4, 16);
    let mut ledger = ActivationLedger::new(&c, 0.25, 0.25).unwrap();
    let mut r = rng::seeded(3);
    let mut kept = Vec::new();
    for _ in 0..20 {
        let v: Vec<f64> = (0..16).map(|_| r.random::<f64>() * 10.0).collect();
        update_scores(&mut ledger.ffn[1], &v, 0.25).unwrap();
        kept.push(v);
    }
    ledger.samples_seen = 20;
    let means: Vec<f64> = (0..16).map(|c| kept.iter().map(|v| v[c]).sum::<f64>() / 20.0).collect();
    let mu = means.iter().sum::<f64>() / 16.0;
    let oracle = (means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / 16.0).sqrt();
    let rep = activation_std_report(&ledger).unwrap();
    let got = rep.iter().find(|m| m.layer == 1 && m.kind == ModuleKind::Ffn).unwrap().std;
    assert!((got - oracle).abs() < 1e-6);
}

#[test]
fn ledger_records_traces_and_resets() {
    let c = cfg(2, 4, 8);
    let p = ModelParams::<f32>::init(&c).unwrap();
    let mut ledger = ActivationLedger::new(&c, 0.25, 0.25).unwrap();
    let (_, trace) = forward_batch(&p, None, &[&[1, 2, 3], &[4, 5, 6]], true).unwrap();
    ledger.record(&trace.unwrap()).unwrap();
    assert_eq!(ledger.samples_seen, 2);
    assert_eq!(ledger.mha[1].samples, 2);
    assert_eq!(ledger.component_rows().len(), 2 * (4 + 8));
    ledger.reset();
    assert_eq!(ledger, ActivationLedger::new(&c, 0.25, 0.25).unwrap());
}

#[test]
fn empty_mask_is_a_no_op() {
    let p = ModelParams::<f32>::init(&cfg(1, 4, 8)).unwrap();
    assert!(mask_components(&p, 0, ModuleKind::Mha, &[]).unwrap().bits_eq(&p));
    assert!(matches!(mask_components(&p, 0, ModuleKind::Ffn, &[8]), Err(crate::ApexError::Index(_))));
    assert!(matches!(mask_components(&p, 3, ModuleKind::Ffn, &[0]), Err(crate::ApexError::Index(_))));
}

#[test]
fn masking_every_head_leaves_ffn_and_residual() {
    let c = cfg(2, 4, 8);
    let p = ModelParams::<f64>::init(&c).unwrap();
    let mut m = p.clone();
    for l in 0..2 {
        m = mask_components(&m, l, ModuleKind::Mha, &[0, 1, 2, 3]).unwrap();
    }
    let tokens = [3usize, 1, 4, 1, 5];
    let (logits, _) = forward_batch(&m, None, &[&tokens], false).unwrap();

    // Reference without any attention path.
    let d = c.d_model;
    let mut x = Tensor::<f64>::zeros(&[tokens.len(), d]);
    for (i, &t) in tokens.iter().enumerate() {
        for j in 0..d {
            x.set(i, j, p.tok_emb.at(t, j) + p.pos_emb.at(i, j));
        }
    }
    for l in &p.layers {
        let h = rms_norm(&x, &l.ffn_norm, c.norm_eps).unwrap();
        let (f, _) = ffn_forward(&h, l, &c, false).unwrap();
        x = x.zip_map(&f, |a, b| a + b).unwrap();
    }
    let h = rms_norm(&x, &p.final_norm, c.norm_eps).unwrap();
    let oracle = crate::numerics::matmul(&h, &p.head).unwrap();
    assert!(logits.max_abs_diff(&oracle) < 1e-12);
}

/// Forward with explicit multiplicative masks on head outputs / gate activations.
fn gated_reference(p: &ModelParams<f64>, tokens: &[usize], head_mask: &[f64], chan_mask: &[f64]) -> Tensor<f64> {
    let c = &p.config;
    let mut tape = Tape::new();
    let v = ParamVars::register(&mut tape, p, false);
    let l = tokens.len();
    let pos: Vec<usize> = (0..l).collect();
    let a = tape.embed(v.tok_emb, tokens).unwrap();
    let b = tape.embed(v.pos_emb, &pos).unwrap();
    let mut x = tape.add(a, b).unwrap();
    let dh = c.d_head();
    let hm: Vec<f64> = (0..l).flat_map(|_| (0..c.d_model).map(|j| head_mask[j / dh])).collect();
    let cm: Vec<f64> = (0..l).flat_map(|_| chan_mask.iter().copied()).collect();
    let hm = tape.constant(Tensor::new(vec![l, c.d_model], hm).unwrap());
    let cm = tape.constant(Tensor::new(vec![l, c.d_ffn], cm).unwrap());
    for (i, lv) in v.layers.iter().enumerate() {
        let h = tape.rms_norm(x, lv.attn_norm, c.norm_eps).unwrap();
        let q = tape.matmul(h, lv.wq).unwrap();
        let k = tape.matmul(h, lv.wk).unwrap();
        let vv = tape.matmul(h, lv.wv).unwrap();
        let mut heads = tape.attention(q, k, vv, c.n_heads, l, true).unwrap();
        if i == 0 {
            heads = tape.mul(heads, hm).unwrap();
        }
        let o = tape.matmul(heads, lv.wo).unwrap();
        x = tape.add(x, o).unwrap();
        let h = tape.rms_norm(x, lv.ffn_norm, c.norm_eps).unwrap();
        let u = tape.matmul(h, lv.wu).unwrap();
        let g = tape.matmul(h, lv.wg).unwrap();
        let mut g = tape.activate(g, c.activation);
        if i == 0 {
            g = tape.mul(g, cm).unwrap();
        }
        let glu = tape.mul(u, g).unwrap();
        let f = tape.matmul(glu, lv.wd).unwrap();
        x = tape.add(x, f).unwrap();
    }
    let h = tape.rms_norm(x, v.final_norm, c.norm_eps).unwrap();
    let out = tape.matmul(h, v.head).unwrap();
    tape.value(out).clone()
}

proptest! {
    #[test]
    fn streaming_equals_batch_recount(vals in prop::collection::vec(prop::collection::vec(0u32..6, 8), 1..30)) {
        let samples: Vec<Vec<f64>> = vals.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
        let mut m = ModuleStats::new(8);
        for s in &samples {
            update_scores(&mut m, s, 0.25).unwrap();
        }
        prop_assert_eq!(m.scores, recount(&samples, 2));
    }

    #[test]
    fn rank_selection_ignores_positive_rescaling(
        vals in prop::collection::vec(prop::collection::vec(1u32..1000, 8), 1..10),
        scale_exp in -20i32..20,
        mul in 0.1f64..10.0,
    ) {
        let c = cfg(1, 4, 8);
        let mut a = ActivationLedger::new(&c, 0.25, 0.25).unwrap();
        let mut b = a.clone();
        let mut d = a.clone();
        for v in &vals {
            let base: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            let pow2: Vec<f64> = base.iter().map(|x| x * 2f64.powi(scale_exp)).collect();
            let scaled: Vec<f64> = base.iter().map(|x| x * mul).collect();
            update_scores(&mut a.ffn[0], &base, 0.25).unwrap();
            update_scores(&mut b.ffn[0], &pow2, 0.25).unwrap();
            update_scores(&mut d.ffn[0], &scaled, 0.25).unwrap();
            for l in [&mut a, &mut b, &mut d] {
                update_scores(&mut l.mha[0], &base[..4], 0.25).unwrap();
                l.samples_seen += 1;
            }
        }
        let sa = select_sets(&a, 0.25, 0.25, Strategy::Rank, 0).unwrap();
        prop_assert_eq!(&sa, &select_sets(&b, 0.25, 0.25, Strategy::Rank, 0).unwrap());
        prop_assert_eq!(&sa, &select_sets(&d, 0.25, 0.25, Strategy::Rank, 0).unwrap());
    }

    #[test]
    fn sets_are_disjoint_and_balanced(seed in 0u64..1000, strat in 0usize..3) {
        let c = cfg(2, 8, 16);
        let mut ledger = ActivationLedger::new(&c, 0.25, 0.25).unwrap();
        let mut r = rng::seeded(seed);
        for _ in 0..5 {
            for l in 0..2 {
                let h: Vec<f64> = (0..8).map(|_| r.random_range(0..4) as f64).collect();
                let f: Vec<f64> = (0..16).map(|_| r.random_range(0..4) as f64).collect();
                update_scores(&mut ledger.mha[l], &h, 0.25).unwrap();
                update_scores(&mut ledger.ffn[l], &f, 0.25).unwrap();
            }
            ledger.samples_seen += 1;
        }
        let strategy = [Strategy::Rank, Strategy::Avg, Strategy::Random][strat];
        let sets = select_sets(&ledger, 0.25, 0.1875, strategy, seed).unwrap();
        sets.validate().unwrap();
        for l in &sets.layers {
            prop_assert_eq!(l.mha_pos.len(), 2);
            prop_assert_eq!(l.ffn_neg.len(), 3);
        }
    }

    #[test]
    fn weight_masking_equals_output_gating(head in 0usize..4, chans in prop::collection::btree_set(0usize..8, 0..4), seed in 0u64..100) {
        let mut c = cfg(2, 4, 8);
        c.seed = seed;
        let p = ModelParams::<f64>::init(&c).unwrap();
        let chans: Vec<usize> = chans.into_iter().collect();
        let m = mask_components(&p, 0, ModuleKind::Mha, &[head]).unwrap();
        let m = mask_components(&m, 0, ModuleKind::Ffn, &chans).unwrap();
        let tokens = [2usize, 7, 1, 8];
        let (got, _) = forward_batch(&m, None, &[&tokens], false).unwrap();
        let mut hm = vec![1.0; 4];
        hm[head] = 0.0;
        let cm: Vec<f64> = (0..8).map(|i| if chans.contains(&i) { 0.0 } else { 1.0 }).collect();
        let want = gated_reference(&p, &tokens, &hm, &cm);
        prop_assert!(got.max_abs_diff(&want) <= 1e-6);
    }
}

#[test]
fn mask_selection_counts() {
    let c = cfg(1, 4, 20);
    let mut ledger = ActivationLedger::new(&c, 0.25, 0.25).unwrap();
    let f: Vec<f64> = (0..20).map(|i| i as f64).collect();
    update_scores(&mut ledger.ffn[0], &f, 0.25).unwrap();
    update_scores(&mut ledger.mha[0], &[1.0, 2.0, 3.0, 4.0], 0.25).unwrap();
    ledger.samples_seen = 1;
    let top = mask_selection(&ledger, MaskWhich::Top, 0.1, 0).unwrap();
    assert_eq!(top[0].2, Vec::<usize>::new());
    assert_eq!(top[1].2, vec![18, 19]);
    let min = mask_selection(&ledger, MaskWhich::Min, 0.1, 0).unwrap();
    assert_eq!(min[1].2, vec![0, 1]);
}
