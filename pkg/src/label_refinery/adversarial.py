"""One-step input jittering that increases teacher-student disagreement."""
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import ConfigError, InvalidInputError
from .losses import LOG_CLAMP, log_softmax, loss_grad_wrt_logits
from .nn import softmax

CLIP_MODES = ("none", "input_range")


@dataclass(frozen=True)
class AdversarialConfig:
    """Step size, clipping and the first epoch at which jittered crops are added."""

    eta: float = 1.0
    clip: str = "input_range"
    enabled_from_epoch: int = 0

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError("eta must be positive", field="adversarial.eta")
        if self.clip not in CLIP_MODES:
            raise ConfigError(f"clip must be one of {CLIP_MODES}", field="adversarial.clip")
        if self.enabled_from_epoch < 0:
            raise ConfigError("must be non-negative", field="adversarial.enabled_from_epoch")

    def to_dict(self):
        return asdict(self)


def jitter(teacher, student, crop_batch, eta=1.0, clip="none", input_range=None, teacher_labels=None):
    """Move each crop one raw-gradient step up the KL(teacher || student) surface.

    The step is ``eta`` times the input gradient of the summed per-crop KL
    (not its sign).  When ``teacher_labels`` is omitted they are the teacher's
    softmax on ``crop_batch`` and the gradient flows through both networks;
    supplied labels (a static table, hardened outputs) are held constant.
    Both networks run with batch statistics and neither has its parameters or
    running statistics changed.
    """
    x = np.asarray(crop_batch, dtype=np.float32)
    if eta == 0:
        return x.copy()
    through_teacher = teacher_labels is None
    if through_teacher:
        t_logits = teacher.forward(x, bn_mode="train", update_stats=False)
        teacher_labels = softmax(t_logits.astype(np.float64))
    try:
        logits = student.forward(x, bn_mode="train", update_stats=False)
        # loss_grad_wrt_logits averages over the batch; undo that to get per-crop gradients
        g = loss_grad_wrt_logits("kl_label_to_output", teacher_labels, logits) * len(x)
        _, dx = student.backward(g, need_input_grad=True)
        if through_teacher:
            p = teacher_labels
            a = np.log(np.maximum(p, LOG_CLAMP)) - log_softmax(logits)
            g_t = p * (a - (p * a).sum(axis=1, keepdims=True))
            _, dx_t = teacher.backward(g_t.astype(t_logits.dtype), need_input_grad=True)
            dx = dx + dx_t
    finally:
        student.clear_cache()
        teacher.clear_cache()
    out = x + np.float32(eta) * dx
    if clip == "input_range":
        if input_range is None:
            raise InvalidInputError("clip='input_range' needs the dataset's input range")
        lo, hi = (np.asarray(v, np.float32).reshape(1, -1, 1, 1) for v in input_range)
        out = np.clip(out, lo, hi)
    elif clip != "none":
        raise InvalidInputError(f"unknown clip mode {clip!r}")
    return out.astype(np.float32)


def compose_batch(natural, adversarial):
    """Interleave natural and jittered crops: ``[nat0, adv0, nat1, adv1, ...]``."""
    natural = np.asarray(natural)
    adversarial = np.asarray(adversarial)
    if natural.shape != adversarial.shape:
        raise InvalidInputError(f"shape mismatch: {natural.shape} vs {adversarial.shape}")
    out = np.empty((2 * natural.shape[0],) + natural.shape[1:], dtype=natural.dtype)
    out[0::2] = natural
    out[1::2] = adversarial
    return out
