//! Shared helpers for unit tests.

use crate::matrix::Matrix;
use crate::tape::{Gradients, NodeId};

/// Central finite differences (step 1e-5) against tape gradients; returns
/// the worst scale-aware relative error over all parameter entries.
pub(crate) fn max_fd_error(
    params: &[Matrix],
    ids: &[NodeId],
    grads: &Gradients,
    eval: impl Fn(&[Matrix]) -> f64,
) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (pi, id) in ids.iter().enumerate() {
        let g = grads.get(*id).expect("parameter reaches the loss");
        for j in 0..params[pi].data().len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[j] += h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = g.data()[j];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}
