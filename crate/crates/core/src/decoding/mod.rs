//! Joint CTC/attention beam search with language-model shallow fusion,
//! error rates and ROVER combination.

pub mod ctc_prefix;
pub mod rover;

use std::collections::BTreeMap;
use std::path::Path;

use avsr_autograd::{Graph, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::HASH_PREFIX;
use crate::training::{Memory, TransformerDecoder};
use crate::{Error, Result};

pub use ctc_prefix::{ctc_prefix_score, ctc_sequence_score, CtcPrefixScorer, CtcState};
pub use rover::{rover, WordTransitionNetwork};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub ctc_weight: f64,
    pub lm_weight: f64,
    pub nbest: usize,
    /// Overrides the default limit of twice the encoder length.
    pub max_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 10,
            ctc_weight: 0.3,
            lm_weight: 0.2,
            nbest: 1,
            max_len: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.nbest == 0 {
            return Err(Error::Config("beam and nbest must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::Config(format!("ctc_weight {} outside [0, 1]", self.ctc_weight)));
        }
        if !(self.lm_weight >= 0.0) {
            return Err(Error::Config(format!("lm_weight {} is negative", self.lm_weight)));
        }
        if self.max_len == Some(0) {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score_att: f64,
    pub score_ctc: f64,
    pub score_lm: f64,
    pub combined: f64,
}

/// Autoregressive next-token distribution over `vocab + 1` classes, the last
/// being end of sequence.
pub trait TokenScorer {
    fn next_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// A decoder bound to fixed encoder memories. With no memories it is a
/// language model.
pub struct DecoderScorer<'a> {
    params: &'a ParamStore,
    decoder: &'a TransformerDecoder,
    memories: Vec<(Tensor, Vec<bool>)>,
}

impl<'a> DecoderScorer<'a> {
    pub fn new(params: &'a ParamStore, decoder: &'a TransformerDecoder, memories: Vec<(Tensor, Vec<bool>)>) -> Self {
        Self {
            params,
            decoder,
            memories,
        }
    }
}

impl TokenScorer for DecoderScorer<'_> {
    fn next_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(self.params);
        let vars: Vec<_> = self.memories.iter().map(|(t, _)| g.constant(t.clone())).collect();
        let mems: Vec<Memory> = vars
            .iter()
            .zip(&self.memories)
            .map(|(&value, (_, valid))| Memory { value, valid })
            .collect();
        self.decoder.next_logprobs(&mut g, prefix, &mems)
    }
}

/// Sum of log-probabilities of `tokens <eos>`.
pub fn lm_score(lm: &dyn TokenScorer, tokens: &[usize]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::Empty("cannot score an empty token sequence".into()));
    }
    let mut total = 0.0;
    for i in 0..=tokens.len() {
        let lp = lm.next_logprobs(&tokens[..i])?;
        let next = if i < tokens.len() { tokens[i] } else { lp.len() - 1 };
        total += lp[next];
    }
    Ok(total)
}

fn weighted(w: f64, x: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * x
    }
}

struct Live {
    tokens: Vec<usize>,
    att: f64,
    lm: f64,
    ctc: CtcState,
    combined: f64,
}

/// Attention-driven beam search. `ctc_logp` holds CTC log-probabilities
/// `[T, vocab + 1]` with blank last. Hypotheses end on eos or at the length
/// limit, both before pruning; search stops once no live hypothesis can beat
/// the best ended one.
pub fn beam_search(
    ctc_logp: &Tensor,
    att: &dyn TokenScorer,
    lm: Option<&dyn TokenScorer>,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    if ctc_logp.rows() == 0 {
        return Err(Error::Empty("encoder output has no frames".into()));
    }
    let eos = ctc_logp.cols() - 1;
    let (wc, wl) = (cfg.ctc_weight, cfg.lm_weight);
    let wa = 1.0 - wc;
    let lm = if wl > 0.0 { lm } else { None };
    let max_len = cfg.max_len.unwrap_or(2 * ctc_logp.rows());
    let ctc = CtcPrefixScorer::new(ctc_logp, eos);
    let combine = |a: f64, c: f64, l: f64| weighted(wa, a) + weighted(wc, c) + weighted(wl, l);

    let mut live = vec![Live {
        tokens: Vec::new(),
        att: 0.0,
        lm: 0.0,
        ctc: ctc.initial(),
        combined: 0.0,
    }];
    let mut ended: Vec<Hypothesis> = Vec::new();
    let end = |tokens: Vec<usize>, a: f64, l: f64, st: &CtcState| {
        let c = ctc.final_score(st);
        Hypothesis {
            tokens,
            score_att: a,
            score_ctc: c,
            score_lm: l,
            combined: combine(a, c, l),
        }
    };
    let next_of = |s: Option<&dyn TokenScorer>, p: &[usize]| -> Result<Option<Vec<f64>>> {
        s.map(|s| s.next_logprobs(p)).transpose()
    };
    while !live.is_empty() {
        let mut cand = Vec::new();
        for h in &live {
            let a_lp = att.next_logprobs(&h.tokens)?;
            if a_lp.len() != eos + 1 {
                return Err(Error::LengthMismatch {
                    what: "attention classes".into(),
                    expected: eos + 1,
                    got: a_lp.len(),
                });
            }
            let l_lp = next_of(lm, &h.tokens)?;
            let lm_at = |k: usize| l_lp.as_ref().map_or(0.0, |v| v[k]);
            ended.push(end(h.tokens.clone(), h.att + a_lp[eos], h.lm + lm_at(eos), &h.ctc));
            for c in 0..eos {
                let st = ctc.extend(&h.ctc, c);
                let a = h.att + a_lp[c];
                let l = h.lm + lm_at(c);
                let mut tokens = h.tokens.clone();
                tokens.push(c);
                let combined = combine(a, st.prefix_score, l);
                cand.push(Live {
                    tokens,
                    att: a,
                    lm: l,
                    ctc: st,
                    combined,
                });
            }
        }
        let (full, mut cand): (Vec<Live>, Vec<Live>) = cand.into_iter().partition(|h| h.tokens.len() >= max_len);
        for h in full {
            if h.combined == f64::NEG_INFINITY {
                continue;
            }
            let a_lp = att.next_logprobs(&h.tokens)?;
            let l = h.lm + next_of(lm, &h.tokens)?.map_or(0.0, |v| v[eos]);
            ended.push(end(h.tokens, h.att + a_lp[eos], l, &h.ctc));
        }
        cand.sort_by(|x, y| y.combined.total_cmp(&x.combined));
        cand.truncate(cfg.beam);
        cand.retain(|h| h.combined > f64::NEG_INFINITY);
        live = cand;
        let best_end = ended.iter().map(|h| h.combined).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.combined).fold(f64::NEG_INFINITY, f64::max);
        if best_end >= best_live {
            break;
        }
    }
    ended.sort_by(|x, y| y.combined.total_cmp(&x.combined));
    ended.truncate(cfg.nbest);
    Ok(ended)
}

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

pub fn cer(reference: &[usize], hyp: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("reference transcript is empty".into()));
    }
    Ok(levenshtein(reference, hyp) as f64 / reference.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_cer: f64,
    pub per_utt: BTreeMap<String, f64>,
}

/// Corpus-level error rate: total edits over total reference length. A
/// missing hypothesis counts as empty.
pub fn evaluate(refs: &[(String, Vec<usize>)], hyps: &BTreeMap<String, Vec<usize>>) -> Result<EvalReport> {
    if refs.is_empty() {
        return Err(Error::Empty("no references to score".into()));
    }
    let (mut edits, mut total) = (0usize, 0usize);
    let mut per_utt = BTreeMap::new();
    for (id, r) in refs {
        let h = match hyps.get(id) {
            Some(h) => h.as_slice(),
            None => {
                log::warn!("{id}: no hypothesis, scored as empty");
                &[]
            }
        };
        per_utt.insert(id.clone(), cer(r, h)?);
        edits += levenshtein(r, h);
        total += r.len();
    }
    Ok(EvalReport {
        overall_cer: edits as f64 / total as f64,
        per_utt,
    })
}

/// One line of a hypothesis file.
#[derive(Clone, Debug, PartialEq)]
pub struct HypLine {
    pub id: String,
    pub score: f64,
    pub tokens: Vec<usize>,
}

pub fn write_hyps(path: &Path, lines: &[HypLine], hash: Option<&str>) -> Result<()> {
    let mut s = String::new();
    if let Some(h) = hash {
        s.push_str(HASH_PREFIX);
        s.push_str(h);
        s.push('\n');
    }
    for l in lines {
        s.push_str(&l.id);
        s.push(' ');
        s.push_str(&format!("{}", l.score));
        for t in &l.tokens {
            s.push_str(&format!(" {t}"));
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a hypothesis file and the config hash in its header, if any.
pub fn read_hyps(path: &Path) -> Result<(Option<String>, Vec<HypLine>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "run `decode` first".into(),
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let hash = text.lines().next().and_then(|l| l.strip_prefix(HASH_PREFIX)).map(str::to_string);
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let bad = |what: &str| Error::format(path, format!("line {}: {what}", n + 1));
        let id = it.next().ok_or_else(|| bad("missing id"))?.to_string();
        let score = it
            .next()
            .ok_or_else(|| bad("missing score"))?
            .parse::<f64>()
            .map_err(|_| bad("bad score"))?;
        let tokens = it
            .map(|t| t.parse::<usize>().map_err(|_| bad("bad token")))
            .collect::<Result<_>>()?;
        out.push(HypLine { id, score, tokens });
    }
    Ok((hash, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cer_examples() {
        assert_eq!(cer(&[0, 1, 2], &[0, 1, 2]).unwrap(), 0.0);
        assert!((cer(&[0, 1, 2], &[0, 9, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cer(&[0, 1], &[]).unwrap(), 1.0);
        assert!(cer(&[], &[1]).is_err());
    }

    #[test]
    fn hyp_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.txt");
        let lines = vec![
            HypLine {
                id: "u1".into(),
                score: -1.25,
                tokens: vec![3, 1],
            },
            HypLine {
                id: "u2".into(),
                score: -0.5,
                tokens: vec![],
            },
        ];
        write_hyps(&p, &lines, Some("abc")).unwrap();
        assert_eq!(read_hyps(&p).unwrap(), (Some("abc".to_string()), lines.clone()));
        write_hyps(&p, &lines, None).unwrap();
        assert_eq!(read_hyps(&p).unwrap(), (None, lines));
    }

    struct Fixed(Vec<f64>);
    impl TokenScorer for Fixed {
        fn next_logprobs(&self, _: &[usize]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn uniform_lm_score() {
        let lm = Fixed(vec![(0.2f64).ln(); 5]);
        assert!((lm_score(&lm, &[1, 2]).unwrap() - 3.0 * 0.2f64.ln()).abs() < 1e-12);
        assert!(lm_score(&lm, &[]).is_err());
    }
}
