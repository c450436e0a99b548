"""Entropy maps and the loss zoo for source-free adaptation.

Array conventions used across the package:
  probability map  float (H, W, C) or batched (N, H, W, C), rows sum to 1
  entropy map      float (H, W) or (N, H, W), normalized to [0, 1]
  hard label mask  int   (H, W) or (N, H, W), values in {0..C-1} or IGNORE
  negative mask    uint8 (H, W, C) or (N, H, W, C), binary per-class flags

Every loss returns a LossValue whose ``grad`` is the analytic gradient with
respect to the probability map (same shape as the input). Use
``probs_grad_to_logits_grad`` to chain through a softmax head.

All losses average over pixels (over contributing pixels for masked
losses), so magnitudes are resolution independent.
"""

import dataclasses

import numpy as np

EPS = 1e-12           # inside every logarithm
IGNORE_LABEL = 255    # reserved sentinel for unsupervised pixels
CONFIDENCE_GATE = 0.968  # teacher max-probability gate for consistency


@dataclasses.dataclass
class LossValue:
    value: float
    contributing_pixels: int
    grad: np.ndarray | None = None

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"non-finite loss value: {self.value}")


def _flat(p):
    """View an (..., C) map as (pixels, C)."""
    return p.reshape(-1, p.shape[-1])


def softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def probs_grad_to_logits_grad(p, dp):
    """Chain a d(loss)/d(probs) gradient through the softmax that produced p."""
    inner = np.sum(dp * p, axis=-1, keepdims=True)
    return p * (dp - inner)


def validate_probability_map(p, tol=1e-5):
    if p.ndim not in (3, 4) or p.shape[-1] < 2:
        raise ValueError(f"probability map must be (..., H, W, C>=2), got {p.shape}")
    if np.min(p) < -tol or np.max(p) > 1 + tol:
        raise ValueError("probability map entries outside [0, 1]")
    sums = p.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > tol:
        raise ValueError("probability map rows do not sum to 1")


def compute_entropy_map(p):
    """Per-pixel Shannon entropy in nats, divided by ln C so values sit in [0, 1]."""
    if p.shape[-1] < 2:
        raise ValueError(f"need at least 2 classes, got shape {p.shape}")
    h = -np.sum(p * np.log(p + EPS), axis=-1) / np.log(p.shape[-1])
    return np.clip(h, 0.0, 1.0)


def _entropy_and_grad(p):
    """Normalized entropy plus d(entropy)/d(p), without the [0,1] clip."""
    lnc = np.log(p.shape[-1])
    logs = np.log(p + EPS)
    h = -np.sum(p * logs, axis=-1) / lnc
    dh = -(logs + p / (p + EPS)) / lnc
    return h, dh


def curriculum_entropy_loss(p, alpha, gamma):
    """Entropy weighted by (1-h)^gamma: confident pixels dominate early."""
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    h, dh = _entropy_and_grad(p)
    hc = np.clip(h, 0.0, 1.0)
    one_m = 1.0 - hc
    n_pix = hc.size
    value = float(alpha * np.mean(one_m ** gamma * hc))
    # d/dh [ (1-h)^g h ] = (1-h)^g - g h (1-h)^(g-1); the g term vanishes at g=0
    if gamma == 0:
        outer = np.ones_like(hc)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            edge = np.where(one_m > 0, one_m ** (gamma - 1.0), 0.0)
        outer = one_m ** gamma - gamma * hc * edge
    scale = alpha * outer / n_pix
    grad = scale[..., None] * dh
    return LossValue(value, n_pix, grad)


def weighted_diversity_loss(p, lambda_w):
    """Negative entropy of the confidence-weighted mean prediction.

    Pixel weights are exp(-lambda_w * h); the weighted mean is normalized to
    a distribution before taking sum(p_hat * log p_hat). Minimizing this
    pushes the aggregate prediction toward covering all classes, so values
    live in [-ln C, 0].
    """
    if lambda_w < 0:
        raise ValueError(f"lambda_w must be >= 0, got {lambda_w}")
    h, dh = _entropy_and_grad(p)
    w = np.exp(-lambda_w * h)
    w_sum = float(w.sum())
    pf = _flat(p)
    wf = w.reshape(-1)
    p_hat = (wf[:, None] * pf).sum(axis=0) / w_sum
    logs = np.log(p_hat + EPS)
    value = float(np.sum(p_hat * logs))

    a = logs + p_hat / (p_hat + EPS)                    # dL/dp_hat
    dw = (-lambda_w * wf)[:, None] * dh.reshape(-1, p.shape[-1])  # dw/dp per pixel
    resid = (pf - p_hat[None, :]) @ a                   # sum_k a_k (p_k - p_hat_k)
    grad_f = (a[None, :] * wf[:, None] + dw * resid[:, None]) / w_sum
    return LossValue(value, wf.size, grad_f.reshape(p.shape))


def _check_labels(labels, num_classes):
    bad = (labels != IGNORE_LABEL) & ((labels < 0) | (labels >= num_classes))
    if np.any(bad):
        raise ValueError(
            f"labels contain values outside 0..{num_classes - 1} and IGNORE")


def cross_entropy_loss(p, labels):
    """Mean -log p[label] over non-IGNORE pixels; zero when fully ignored."""
    c = p.shape[-1]
    _check_labels(labels, c)
    pf = _flat(p)
    lf = labels.reshape(-1)
    keep = lf != IGNORE_LABEL
    n_keep = int(keep.sum())
    grad = np.zeros_like(pf)
    if n_keep == 0:
        return LossValue(0.0, 0, grad.reshape(p.shape))
    idx = np.flatnonzero(keep)
    picked = pf[idx, lf[idx]]
    value = float(np.mean(-np.log(picked + EPS)))
    grad[idx, lf[idx]] = -1.0 / (picked + EPS) / n_keep
    return LossValue(value, n_keep, grad.reshape(p.shape))


def negative_pseudo_loss(p, flags):
    """Mean, over pixels holding at least one flag, of sum_c flag * -log(1-p)."""
    if flags.shape != p.shape:
        raise ValueError(f"flag shape {flags.shape} != map shape {p.shape}")
    ff = _flat(flags).astype(p.dtype)
    pf = _flat(p)
    flagged = ff.any(axis=1)
    n_flag = int(flagged.sum())
    if n_flag == 0:
        return LossValue(0.0, 0, np.zeros_like(p))
    per_entry = -np.log(1.0 - pf + EPS) * ff
    value = float(per_entry.sum() / n_flag)
    grad = (ff / (1.0 - pf + EPS) / n_flag).reshape(p.shape)
    return LossValue(value, n_flag, grad)


def bidirectional_loss(ppl, npl):
    """Unweighted sum of the positive and negative pseudo-label objectives."""
    grad = None
    if ppl.grad is not None and npl.grad is not None:
        grad = ppl.grad + npl.grad
    elif ppl.grad is not None or npl.grad is not None:
        grad = ppl.grad if ppl.grad is not None else npl.grad
    return LossValue(ppl.value + npl.value,
                     ppl.contributing_pixels + npl.contributing_pixels, grad)


def kd_loss(teacher, student):
    """Mean per-pixel KL(teacher || student); gradient flows into student only."""
    if teacher.shape != student.shape:
        raise ValueError(f"shape mismatch {teacher.shape} vs {student.shape}")
    n_pix = int(np.prod(teacher.shape[:-1]))
    t, s = teacher, student
    value = float(np.sum(t * np.log((t + EPS) / (s + EPS))) / n_pix)
    grad = -t / (s + EPS) / n_pix
    return LossValue(value, n_pix, grad)


def consistency_loss(teacher, student, confidence_mask=None):
    """Cross-entropy against the teacher's argmax, gated at max prob >= 0.968.

    ``confidence_mask`` (binary, one entry per pixel) lets callers exclude
    extra pixels on top of the built-in confidence gate.
    """
    gate = teacher.max(axis=-1) >= CONFIDENCE_GATE
    if confidence_mask is not None:
        gate = gate & confidence_mask.astype(bool)
    labels = np.where(gate, teacher.argmax(axis=-1), IGNORE_LABEL)
    return cross_entropy_loss(student, labels)
