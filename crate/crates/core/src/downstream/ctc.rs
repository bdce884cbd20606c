//! CTC loss by the forward–backward recursion in log space.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Index of the blank symbol.
pub const BLANK: usize = 0;

/// Minimum number of frames needed to emit `labels`: one per label plus a
/// separating blank between each pair of equal neighbours.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn check_feasible(frames: usize, labels: &[usize]) -> Result<()> {
    let required = min_frames(labels);
    if frames < required {
        return Err(Error::Infeasible { frames, required });
    }
    Ok(())
}

fn lse2<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Negative log-likelihood and its gradient w.r.t. every entry of
/// `log_probs` (`[L × V]`). Rows are not required to be normalized here;
/// the gradient treats each entry as an independent input.
pub fn ctc_loss_and_grad<T: Scalar>(
    log_probs: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    if log_probs.rank() != 2 {
        return Err(Error::Shape {
            op: "ctc_loss",
            lhs: log_probs.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (len, vocab) = (log_probs.rows(), log_probs.cols());
    if labels.is_empty() {
        return Err(Error::Contract("CTC needs at least one label".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= vocab) {
        return Err(Error::Contract(format!(
            "label id {bad} outside 1..{vocab}"
        )));
    }
    check_feasible(len, labels)?;

    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let lp = |t: usize, s: usize| log_probs.data()[t * vocab + ext[s]];
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = T::neg_infinity();

    let mut alpha = vec![ninf; len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, s) };
        }
    }
    let last = (len - 1) * s_len;
    let log_p = lse2(alpha[last + s_len - 1], alpha[last + s_len - 2]);
    if !log_p.is_finite() {
        return Err(Error::NonFinite { op: "ctc_loss" });
    }

    // beta excludes the emission at its own frame.
    let mut beta = vec![ninf; len * s_len];
    beta[last + s_len - 1] = T::zero();
    beta[last + s_len - 2] = T::zero();
    for t in (0..len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut acc = beta[next + s] + lp(t + 1, s);
            if s + 1 < s_len {
                acc = lse2(acc, beta[next + s + 1] + lp(t + 1, s + 1));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = lse2(acc, beta[next + s + 2] + lp(t + 1, s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = Tensor::zeros(&[len, vocab]);
    for t in 0..len {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            let occupancy = (a + b - log_p).exp();
            let k = t * vocab + ext[s];
            grad.data_mut()[k] = grad.data()[k] - occupancy;
        }
    }
    Ok((-log_p, grad))
}

/// CTC loss of a log-normalized `[L × V]` matrix.
pub fn ctc_loss<T: Scalar>(log_probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let tol = T::lit(1e-9);
    for t in 0..log_probs.rows() {
        let lse = crate::tensor::log_sum_exp(log_probs.row(t));
        if (lse).abs() > tol {
            return Err(Error::Contract(format!(
                "row {t} of log_probs is not log-normalized (logsumexp {lse})"
            )));
        }
    }
    Ok(ctc_loss_and_grad(log_probs, labels)?.0)
}

/// Records the CTC loss of node `log_probs` on the tape.
pub fn ctc_loss_on<T: Scalar>(g: &mut Graph<T>, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let (loss, grad) = ctc_loss_and_grad(g.value(log_probs), labels)?;
    g.scalar_with_grad("ctc_loss", log_probs, loss, grad)
}
