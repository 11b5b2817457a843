"""Cross-entropy over logits, with its gradient."""

import numpy as np

from fedreg.errors import NumericError


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-softmax at the true class.

    logits: (B, C); labels: (B,) int class indices in [0, C).
    Returns (loss, dloss/dlogits) with dlogits = (softmax - onehot) / B.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"labels shape {labels.shape} does not match logits batch {B}")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"label out of range [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - lse[:, None]
    loss = -log_probs[np.arange(B), labels].mean()
    if not np.isfinite(loss):
        raise NumericError("non-finite cross-entropy")
    dlogits = np.exp(log_probs)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    return loss, dlogits
