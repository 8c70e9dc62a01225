//! CTC loss by the forward-backward recursion over the blank-augmented target.

use avsr_autograd::{log_sum_exp, Graph, Tensor, Var};

use crate::{Error, Result};

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

/// Frames needed to emit `target`: one per label plus a blank between
/// repeated neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// `logp` (`[T, C]`), and its gradient with respect to `logp`.
pub fn ctc_nll(logp: &Tensor, target: &[usize], blank: usize) -> Result<(f64, Tensor)> {
    let (t_len, c) = (logp.rows(), logp.cols());
    if let Some(&bad) = target.iter().find(|&&y| y >= c || y == blank) {
        return Err(Error::Config(format!("CTC target label {bad} invalid for {c} classes, blank {blank}")));
    }
    let required = min_frames(target);
    if t_len < required || t_len == 0 {
        return Err(Error::CtcInfeasible {
            frames: t_len,
            target_len: target.len(),
            required: required.max(1),
        });
    }
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { blank } else { target[s / 2] };
    let skip_ok = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);
    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = logp.at(0, blank);
    if s_len > 1 {
        alpha[1] = logp.at(0, label(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = lse2(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if skip_ok(s) {
                a = lse2(a, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = a + logp.at(t, label(s));
        }
    }
    let mut beta = vec![neg; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = logp.at(t_len - 1, label(s_len - 1));
    if s_len > 1 {
        beta[last + s_len - 2] = logp.at(t_len - 1, label(s_len - 2));
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                b = lse2(b, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = lse2(b, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = b + logp.at(t, label(s));
        }
    }
    let ll = lse2(alpha[last + s_len - 1], if s_len > 1 { alpha[last + s_len - 2] } else { neg });
    if ll == neg {
        return Err(Error::CtcInfeasible {
            frames: t_len,
            target_len: target.len(),
            required,
        });
    }
    // d(-ll)/d logp[t,k] = -sum_{s: label(s)=k} alpha_t(s) beta_t(s) / (p_t(k) P).
    let mut grad = Tensor::zeros(&[t_len, c]);
    for t in 0..t_len {
        let mut acc: Vec<Vec<f64>> = vec![Vec::new(); c];
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            if v > neg {
                acc[label(s)].push(v);
            }
        }
        let row = grad.row_mut(t);
        for (k, vals) in acc.iter().enumerate() {
            if !vals.is_empty() {
                row[k] = -(log_sum_exp(vals) - logp.at(t, k) - ll).exp();
            }
        }
    }
    Ok((-ll, grad))
}

/// CTC negative log-likelihood of raw `logits` as a graph node.
pub fn ctc_loss(g: &mut Graph, logits: Var, target: &[usize], blank: usize) -> Result<Var> {
    let lp = g.log_softmax(logits);
    let (nll, grad) = ctc_nll(g.value(lp), target, blank)?;
    Ok(g.custom_scalar(lp, nll, grad)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_three_classes_single_label() {
        let logp = Tensor::full(&[2, 3], -(3f64).ln());
        let (nll, _) = ctc_nll(&logp, &[0], 2).unwrap();
        assert!((nll - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_lengths() {
        let logp = Tensor::full(&[2, 3], -(3f64).ln());
        assert!(matches!(ctc_nll(&logp, &[0, 0], 2), Err(Error::CtcInfeasible { required: 3, .. })));
        assert!(ctc_nll(&logp, &[0, 1], 2).is_ok());
        assert_eq!(min_frames(&[1, 1, 2, 2, 2]), 8);
    }

    #[test]
    fn occupancy_rows_sum_to_one() {
        let logp = Tensor::full(&[5, 4], -(4f64).ln());
        let (_, g) = ctc_nll(&logp, &[1, 2], 3).unwrap();
        for t in 0..5 {
            assert!((g.row(t).iter().sum::<f64>() + 1.0).abs() < 1e-12);
        }
    }
}
