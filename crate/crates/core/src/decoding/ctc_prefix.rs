//! CTC prefix probabilities by the blank / non-blank forward recursion.

use avsr_autograd::Tensor;

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Forward variables of one prefix: `r_n[t]` / `r_b[t]` are the log
/// probabilities of emitting exactly the prefix within frames `0..=t`, ending
/// in its last label or in blank.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcState {
    r_n: Vec<f64>,
    r_b: Vec<f64>,
    last: Option<usize>,
    /// Log probability that a CTC output starts with the prefix.
    pub prefix_score: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct CtcPrefixScorer<'a> {
    logp: &'a Tensor,
    blank: usize,
}

impl<'a> CtcPrefixScorer<'a> {
    /// `logp` holds per-frame log-probabilities `[T, C]`.
    pub fn new(logp: &'a Tensor, blank: usize) -> Self {
        Self { logp, blank }
    }

    pub fn initial(&self) -> CtcState {
        let t_len = self.logp.rows();
        let mut r_b = vec![f64::NEG_INFINITY; t_len];
        let mut acc = 0.0;
        for (t, r) in r_b.iter_mut().enumerate() {
            acc += self.logp.at(t, self.blank);
            *r = acc;
        }
        CtcState {
            r_n: vec![f64::NEG_INFINITY; t_len],
            r_b,
            last: None,
            prefix_score: 0.0,
        }
    }

    pub fn extend(&self, st: &CtcState, c: usize) -> CtcState {
        let t_len = self.logp.rows();
        let neg = f64::NEG_INFINITY;
        let mut r_n = vec![neg; t_len];
        let mut r_b = vec![neg; t_len];
        if st.last.is_none() {
            r_n[0] = self.logp.at(0, c);
        }
        let mut psi = r_n[0];
        for t in 1..t_len {
            let phi = if st.last == Some(c) {
                st.r_b[t - 1]
            } else {
                lse2(st.r_b[t - 1], st.r_n[t - 1])
            };
            r_n[t] = lse2(r_n[t - 1], phi) + self.logp.at(t, c);
            r_b[t] = lse2(r_n[t - 1], r_b[t - 1]) + self.logp.at(t, self.blank);
            psi = lse2(psi, phi + self.logp.at(t, c));
        }
        CtcState {
            r_n,
            r_b,
            last: Some(c),
            prefix_score: psi,
        }
    }

    /// Log probability that the CTC output is exactly the prefix.
    pub fn final_score(&self, st: &CtcState) -> f64 {
        let t = self.logp.rows() - 1;
        lse2(st.r_n[t], st.r_b[t])
    }
}

pub fn ctc_prefix_score(logp: &Tensor, prefix: &[usize], blank: usize) -> f64 {
    let s = CtcPrefixScorer::new(logp, blank);
    prefix.iter().fold(s.initial(), |st, &c| s.extend(&st, c)).prefix_score
}

/// Log probability that the CTC output equals `seq` exactly.
pub fn ctc_sequence_score(logp: &Tensor, seq: &[usize], blank: usize) -> f64 {
    let s = CtcPrefixScorer::new(logp, blank);
    let st = seq.iter().fold(s.initial(), |st, &c| s.extend(&st, c));
    s.final_score(&st)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_frame_examples() {
        let logp = Tensor::full(&[2, 2], 0.5f64.ln());
        assert_eq!(ctc_prefix_score(&logp, &[], 1), 0.0);
        assert!((ctc_prefix_score(&logp, &[0], 1) - 0.75f64.ln()).abs() < 1e-12);
        assert!((ctc_sequence_score(&logp, &[0], 1) - 0.75f64.ln()).abs() < 1e-12);
        assert!((ctc_sequence_score(&logp, &[], 1) - 0.25f64.ln()).abs() < 1e-12);
    }
}
