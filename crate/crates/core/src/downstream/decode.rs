use super::ctc::BLANK;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Best-path decoding: per-frame argmax (lowest index wins ties), merge
/// consecutive repeats, drop blanks.
pub fn greedy_decode<T: Scalar>(log_probs: &Tensor<T>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let best = row
            .iter()
            .enumerate()
            .fold(
                (0, row[0]),
                |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
            )
            .0;
        if best != BLANK && prev != Some(best) {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}
