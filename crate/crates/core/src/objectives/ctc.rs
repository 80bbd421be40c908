//! CTC forward–backward in log space.

use crate::scalar::Scalar;

use super::ObjectiveError;

/// `[blank, y1, blank, y2, …, yL, blank]`
pub(crate) fn extend_with_blanks(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

/// Fewest frames any alignment of `target` needs: one per label plus one
/// blank between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under time-major `log_probs`
/// (`frames × vocab`, row-major) and its gradient with respect to
/// `log_probs`, which is minus the state occupation posterior.
pub fn ctc_loss<S: Scalar>(
    log_probs: &[S],
    frames: usize,
    vocab: usize,
    target: &[usize],
    blank: usize,
) -> Result<(S, Vec<S>), ObjectiveError> {
    assert_eq!(log_probs.len(), frames * vocab, "log_probs must be frames × vocab");
    if let Some(&bad) = target.iter().find(|&&y| y >= vocab || y == blank) {
        return Err(ObjectiveError::InvalidTarget(bad));
    }
    if frames == 0 || min_frames(target) > frames {
        return Err(ObjectiveError::InfeasibleTarget {
            frames,
            labels: target.len(),
        });
    }
    let ext = extend_with_blanks(target, blank);
    let s_len = ext.len();
    let ninf = S::neg_infinity();
    let lp = |t: usize, s: usize| log_probs[t * vocab + ext[s]];
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    // alpha[t][s]: paths through (t, s), emissions up to and including t
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = a.log_add_exp(prev[s - 1]);
            }
            if can_skip(s) {
                a = a.log_add_exp(prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + lp(t, s) };
        }
    }
    let last = &alpha[(frames - 1) * s_len..];
    let log_like = if s_len > 1 {
        last[s_len - 1].log_add_exp(last[s_len - 2])
    } else {
        last[0]
    };

    // beta[t][s]: emissions strictly after t, given state s at t
    let mut beta = vec![ninf; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = S::zero();
    if s_len > 1 {
        beta[(frames - 1) * s_len + s_len - 2] = S::zero();
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let nb = (t + 1) * s_len;
            let mut b = beta[nb + s] + lp(t + 1, s);
            if s + 1 < s_len {
                b = b.log_add_exp(beta[nb + s + 1] + lp(t + 1, s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = b.log_add_exp(beta[nb + s + 2] + lp(t + 1, s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut grad = vec![S::zero(); frames * vocab];
    for t in 0..frames {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s];
            if occ != ninf {
                grad[t * vocab + ext[s]] -= (occ - log_like).exp();
            }
        }
    }
    Ok((-log_like, grad))
}
