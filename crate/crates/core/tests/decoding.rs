use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use avsr::decoding::{
    beam_search, ctc_prefix_score, ctc_sequence_score, levenshtein, lm_score, rover, DecodeConfig, DecoderScorer,
    TokenScorer,
};
use avsr::encoder::ConformerConfig;
use avsr::training::TransformerDecoder;
use avsr_autograd::nn::Builder;
use avsr_autograd::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - z).collect()
}

/// Per-frame log-probabilities drawn at random.
fn random_logp(rng: &mut ChaCha8Rng, t: usize, classes: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t)
        .map(|_| log_softmax(&(0..classes).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>()))
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if p != blank && Some(p) != prev {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Brute-force path enumeration: (log P(output starts with prefix), log P(output == prefix)).
fn enumerate(logp: &Tensor, prefix: &[usize]) -> (f64, f64) {
    let (t, c) = (logp.rows(), logp.cols());
    let (mut as_prefix, mut exact) = (0.0, 0.0);
    for code in 0..c.pow(t as u32) {
        let path: Vec<usize> = (0..t).map(|i| code / c.pow(i as u32) % c).collect();
        let p: f64 = path.iter().enumerate().map(|(i, &k)| logp.at(i, k)).sum::<f64>().exp();
        let out = collapse(&path, c - 1);
        if out.starts_with(prefix) {
            as_prefix += p;
        }
        if out == prefix {
            exact += p;
        }
    }
    (as_prefix.ln(), exact.ln())
}

fn sequences(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..vocab {
                let mut x: Vec<usize> = s.clone();
                x.push(c);
                next.push(x);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn prefix_scores_match_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let l2 = 2.0f64.ln();
    let uniform = Tensor::full(&[2, 2], -l2);
    assert!((ctc_prefix_score(&uniform, &[0], 1) - 0.75f64.ln()).abs() < 1e-12);
    for t in 1..=4 {
        for classes in 2..=3 {
            let logp = random_logp(&mut rng, t, classes);
            for p in sequences(classes - 1, t) {
                let (pre, exact) = enumerate(&logp, &p);
                let got = ctc_prefix_score(&logp, &p, classes - 1);
                assert!((got - pre).abs() < 1e-9 || (got.is_infinite() && pre.is_infinite()), "{p:?}");
                let got = ctc_sequence_score(&logp, &p, classes - 1);
                assert!((got - exact).abs() < 1e-9 || (got.is_infinite() && exact.is_infinite()), "{p:?}");
            }
        }
    }
}

#[test]
fn prefix_probability_is_conserved() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in 1..=4 {
        for classes in 2..=3 {
            let logp = random_logp(&mut rng, t, classes);
            let v = classes - 1;
            for p in sequences(v, t) {
                let mut total = ctc_sequence_score(&logp, &p, v).exp();
                for c in 0..v {
                    let mut q = p.clone();
                    q.push(c);
                    total += ctc_prefix_score(&logp, &q, v).exp();
                }
                let want = ctc_prefix_score(&logp, &p, v).exp();
                assert!((total - want).abs() < 1e-12, "T={t} {p:?}: {total} vs {want}");
            }
        }
    }
}

/// A scorer whose distribution is an arbitrary function of the prefix.
struct HashScorer {
    seed: u64,
    classes: usize,
}

impl TokenScorer for HashScorer {
    fn next_logprobs(&self, prefix: &[usize]) -> avsr::Result<Vec<f64>> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        Ok(log_softmax(&(0..self.classes).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>()))
    }
}

fn seq_logprob(s: &dyn TokenScorer, tokens: &[usize], eos: usize) -> f64 {
    (0..=tokens.len())
        .map(|i| {
            let lp = s.next_logprobs(&tokens[..i]).unwrap();
            lp[if i < tokens.len() { tokens[i] } else { eos }]
        })
        .sum()
}

fn exhaustive_best(logp: &Tensor, att: &dyn TokenScorer, lm: &dyn TokenScorer, wc: f64, wl: f64, max_len: usize) -> (Vec<usize>, f64) {
    let eos = logp.cols() - 1;
    sequences(eos, max_len)
        .into_iter()
        .map(|y| {
            let (_, ctc) = enumerate(logp, &y);
            let s = (1.0 - wc) * seq_logprob(att, &y, eos) + wc * ctc + wl * seq_logprob(lm, &y, eos);
            (y, s)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

#[test]
fn full_beam_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..12u64 {
        let vocab = 2 + (case % 2) as usize;
        let t = 3 + (case % 3) as usize;
        let logp = random_logp(&mut rng, t, vocab + 1);
        let att = HashScorer { seed: case, classes: vocab + 1 };
        let lm = HashScorer { seed: 100 + case, classes: vocab + 1 };
        let cfg = DecodeConfig {
            beam: vocab.pow(2),
            ctc_weight: 0.3,
            lm_weight: 0.2,
            nbest: 1,
            max_len: Some(3),
        };
        let best = &beam_search(&logp, &att, Some(&lm), &cfg).unwrap()[0];
        let (y, s) = exhaustive_best(&logp, &att, &lm, 0.3, 0.2, 3);
        assert_eq!(best.tokens, y, "case {case}");
        assert!((best.combined - s).abs() < 1e-9);
        let parts = 0.7 * best.score_att + 0.3 * best.score_ctc + 0.2 * best.score_lm;
        assert!((best.combined - parts).abs() < 1e-12);
    }
}

#[test]
fn nbest_is_sorted_and_beam_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..20u64 {
        let logp = random_logp(&mut rng, 6, 5);
        let att = HashScorer { seed: case, classes: 5 };
        let lm = HashScorer { seed: 50 + case, classes: 5 };
        let mut prev = f64::NEG_INFINITY;
        for beam in [1, 2, 4, 8] {
            let cfg = DecodeConfig { beam, nbest: 5, ..Default::default() };
            let out = beam_search(&logp, &att, Some(&lm), &cfg).unwrap();
            for w in out.windows(2) {
                assert!(w[0].combined >= w[1].combined);
            }
            assert!(out[0].combined >= prev - 1e-12, "case {case} beam {beam}");
            prev = out[0].combined;
        }
    }
}

fn tiny_decoder(vocab: usize, memories: usize, seed: u64) -> (ParamStore, TransformerDecoder) {
    let cfg = ConformerConfig { d_model: 8, n_head: 2, d_ffn: 16, conv_kernel: 3 };
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dec = TransformerDecoder::new(&mut Builder::new(&mut ps, &mut rng), &cfg, 1, vocab, memories).unwrap();
    (ps, dec)
}

#[test]
fn attention_only_weights_reproduce_teacher_forced_nll() {
    let (ps, dec) = tiny_decoder(4, 1, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mem = Tensor::from_rows(&(0..5).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<_>>()).unwrap();
    let scorer = DecoderScorer::new(&ps, &dec, vec![(mem.clone(), vec![true; 5])]);
    let logp = random_logp(&mut rng, 5, 5);
    let cfg = DecodeConfig { beam: 3, ctc_weight: 0.0, lm_weight: 0.0, nbest: 3, max_len: Some(6) };
    let out = beam_search(&logp, &scorer, None, &cfg).unwrap();
    let best = &out[0];
    assert_eq!(best.combined, best.score_att);
    if !best.tokens.is_empty() {
        let mut g = Graph::new(&ps);
        let m = g.constant(mem);
        let valid = vec![true; 5];
        let mems = [avsr::training::Memory { value: m, valid: &valid }];
        let nll = dec.nll(&mut g, &best.tokens, &mems, 0.0).unwrap();
        assert!((g.value(nll).data()[0] + best.score_att).abs() < 1e-9);
    }
}

#[test]
fn lm_scores_are_causal_and_repeatable() {
    let (ps, lm) = tiny_decoder(5, 0, 7);
    let s = DecoderScorer::new(&ps, &lm, vec![]);
    let a = s.next_logprobs(&[1, 2]).unwrap();
    let b = s.next_logprobs(&[1, 2, 3]).unwrap();
    let c = s.next_logprobs(&[1, 2, 4]).unwrap();
    assert_ne!(b, c);
    assert_eq!(a, s.next_logprobs(&[1, 2]).unwrap());
    // The distribution after [1, 2] is read at the same position in both longer inputs.
    let mut g = Graph::new(&ps);
    let l1 = lm.logits(&mut g, &[1, 2, 3], &[]).unwrap();
    let l2 = lm.logits(&mut g, &[1, 2, 4], &[]).unwrap();
    for r in 0..3 {
        assert!(g.value(l1).row(r).iter().zip(g.value(l2).row(r)).all(|(x, y)| (x - y).abs() < 1e-12));
    }
    assert_eq!(lm_score(&s, &[1, 2]).unwrap(), lm_score(&s, &[1, 2]).unwrap());
}

#[test]
fn empty_encoder_output_is_rejected() {
    let att = HashScorer { seed: 0, classes: 3 };
    assert!(beam_search(&Tensor::zeros(&[0, 3]), &att, None, &DecodeConfig::default()).is_err());
}

proptest! {
    #[test]
    fn distance_is_symmetric_and_rover_is_bounded(
        a in prop::collection::vec(0usize..4, 0..6),
        b in prop::collection::vec(0usize..4, 0..6),
        c in prop::collection::vec(0usize..4, 0..6),
    ) {
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert_eq!(levenshtein(&a, &a), 0);
        let out = rover(&[a.clone(), b.clone(), c.clone()]).unwrap();
        prop_assert!(out.len() <= a.len() + b.len() + c.len());
        prop_assert_eq!(rover(&[a.clone(), a.clone()]).unwrap(), a);
    }
}
