"""Training objectives between a target label distribution and a student output.

``p_prev`` is the target (ground truth or a refinery's soft label) and
``p_cur`` the student's softmax output.  Scalar losses average over any
leading batch dimensions.  Values are computed in float64.
"""
import numpy as np

from .data import check_simplex
from .exceptions import InvalidInputError

LOG_CLAMP = 1e-12
SIMPLEX_ATOL = 1e-5

LOSS_CHOICES = ("kl_label_to_output", "kl_output_to_label", "cross_entropy_soft", "l2_prob")


def check_loss_choice(choice):
    if choice not in LOSS_CHOICES:
        raise InvalidInputError(f"unknown loss {choice!r}; choose from {', '.join(LOSS_CHOICES)}")
    return choice


def _pair(p_prev, p_cur):
    p = check_simplex(np.asarray(p_prev, np.float64), SIMPLEX_ATOL, "target distribution")
    q = check_simplex(np.asarray(p_cur, np.float64), SIMPLEX_ATOL, "output distribution")
    if p.shape != q.shape:
        raise InvalidInputError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    return p, q


def _xlogy(x, y):
    # x * log(y) with 0 * log(anything) == 0
    return np.where(x > 0, x * np.log(np.maximum(y, LOG_CLAMP)), 0.0)


def _mean(per_sample):
    return float(np.mean(per_sample))


def entropy(p):
    p = check_simplex(np.asarray(p, np.float64), SIMPLEX_ATOL)
    return _mean(-_xlogy(p, p).sum(axis=-1))


def kl_label_to_output(p_prev, p_cur):
    """KL(p_prev || p_cur) = sum p_prev (log p_prev - log p_cur)."""
    p, q = _pair(p_prev, p_cur)
    return _mean((_xlogy(p, p) - _xlogy(p, q)).sum(axis=-1))


def cross_entropy_soft(p_prev, p_cur):
    """-sum p_prev log p_cur; equals KL(p_prev || p_cur) + H(p_prev)."""
    p, q = _pair(p_prev, p_cur)
    return _mean(-_xlogy(p, q).sum(axis=-1))


def kl_output_to_label(p_prev, p_cur):
    """KL(p_cur || p_prev); the target is clamped away from zero inside the log."""
    p, q = _pair(p_prev, p_cur)
    return _mean((_xlogy(q, q) - _xlogy(q, p)).sum(axis=-1))


def l2_prob(p_prev, p_cur):
    """Squared Euclidean distance between the two probability vectors."""
    p, q = _pair(p_prev, p_cur)
    return _mean(((p - q) ** 2).sum(axis=-1))


LOSS_FUNCTIONS = {
    "kl_label_to_output": kl_label_to_output,
    "kl_output_to_label": kl_output_to_label,
    "cross_entropy_soft": cross_entropy_soft,
    "l2_prob": l2_prob,
}


def log_softmax(logits):
    z = np.asarray(logits, np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss_from_logits(choice, p_prev, student_logits):
    """Batch-mean loss with the student's log-probabilities taken from its logits."""
    check_loss_choice(choice)
    p = check_simplex(np.asarray(p_prev, np.float64), SIMPLEX_ATOL, "target distribution")
    logq = log_softmax(student_logits)
    q = np.exp(logq)
    if choice == "l2_prob":
        per = ((p - q) ** 2).sum(axis=-1)
    elif choice == "kl_output_to_label":
        per = (q * (logq - np.log(np.maximum(p, LOG_CLAMP)))).sum(axis=-1)
    else:
        per = -np.where(p > 0, p * logq, 0.0).sum(axis=-1)
        if choice == "kl_label_to_output":
            per += _xlogy(p, p).sum(axis=-1)
    return _mean(per)


def _through_softmax(q, dl_dq):
    # vector-Jacobian product of softmax: q * (a - <q, a>)
    return q * (dl_dq - (q * dl_dq).sum(axis=-1, keepdims=True))


def loss_grad_wrt_logits(choice, p_prev, student_logits):
    """Gradient of the batch-mean loss with respect to the student's logits.

    Returns an array shaped like ``student_logits`` in its dtype.
    """
    check_loss_choice(choice)
    z = np.asarray(student_logits)
    p = check_simplex(np.asarray(p_prev, np.float64), SIMPLEX_ATOL, "target distribution")
    if p.shape != z.shape:
        raise InvalidInputError(f"target shape {p.shape} does not match logits {z.shape}")
    logq = log_softmax(z)
    q = np.exp(logq)
    if choice in ("kl_label_to_output", "cross_entropy_soft"):
        # entropy of the target does not depend on the logits, so both share this form
        g = q * p.sum(axis=-1, keepdims=True) - p
    elif choice == "kl_output_to_label":
        g = _through_softmax(q, logq - np.log(np.maximum(p, LOG_CLAMP)))
    else:
        g = _through_softmax(q, 2.0 * (q - p))
    n = int(np.prod(z.shape[:-1])) if z.ndim > 1 else 1
    out_dtype = z.dtype if np.issubdtype(z.dtype, np.floating) else np.float64
    return (g / n).astype(out_dtype)
