"""
Reverse-KL distillation losses and their closed-form logit gradients.

With p = softmax(z) and K = KL(p || q) the gradient is
dK/dz(v) = p(v) * (log p(v) - log q(v) - K), which equals minus the exact
policy-gradient expectation E_{v~p}[A(v) dlog p(v)/dz] with A = log q - log p.
Targets are plain log-probability arrays; nothing here differentiates through
them.
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax

from utils.errors import RejectedInputError
from utils.signal_core import LogDist, ViewFamily


@dataclass(frozen=True)
class LossGrad:
    loss: float
    dz: np.ndarray


def _logp(dist):
    return dist.logp if isinstance(dist, LogDist) else np.asarray(dist, dtype=np.float64)


def _check_vocab(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise RejectedInputError(f"vocabulary size mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def reverse_kl(p, q):
    """KL(p || q) = sum_v p(v) (log p(v) - log q(v))"""
    logp, logq = _logp(p), _logp(q)
    _check_vocab(logp, logq)
    return float(max(np.sum(np.exp(logp) * (logp - logq)), 0.0))


def forward_kl(q, p):
    """KL(q || p); only used as an aggregation oracle, never trained on"""
    return reverse_kl(q, p)


def rkl_grad_logits(z, q):
    """
    Loss and logit gradient of KL(softmax(z) || q).

    Parameters:
    - z (array): student logits, shape (V,)
    - q (LogDist or array): target log-probabilities, treated as a constant

    Returns:
    - LossGrad
    """
    z = np.asarray(z, dtype=np.float64)
    logq = _logp(q)
    _check_vocab(z, logq)
    logp = log_softmax(z)
    p = np.exp(logp)
    gap = logp - logq
    loss = float(np.sum(p * gap))
    dz = p * (gap - loss)
    return LossGrad(loss=max(loss, 0.0), dz=dz)


def cross_entropy_grad_logits(z, token):
    """Loss and logit gradient of -log softmax(z)[token]"""
    z = np.asarray(z, dtype=np.float64)
    if not 0 <= token < z.shape[-1]:
        raise RejectedInputError(f"token {token} outside vocabulary of size {z.shape[-1]}")
    logp = log_softmax(z)
    dz = np.exp(logp)
    dz[token] -= 1.0
    return LossGrad(loss=float(-logp[token]), dz=dz)


def sampled_advantage(p, target, token):
    """log target(token) - log p(token) at the sampled token"""
    logp, logt = _logp(p), _logp(target)
    _check_vocab(logp, logt)
    if not 0 <= token < logp.shape[-1]:
        raise RejectedInputError(f"token {token} outside vocabulary of size {logp.shape[-1]}")
    return float(logt[token] - logp[token])


def policy_gradient_identity_check(z, q):
    """
    Compare the exact policy-gradient expectation with the reverse-KL gradient.

    The expectation over v ~ p is summed over the whole vocabulary, so the
    comparison is between exact quantities, not stochastic estimates.

    Returns:
    - float: max abs difference between E_p[A(v) dlog p(v)/dz] and -dKL/dz
    """
    z = np.asarray(z, dtype=np.float64)
    logq = _logp(q)
    _check_vocab(z, logq)
    logp = log_softmax(z)
    p = np.exp(logp)
    advantage = logq - logp
    # rows: d log p(v) / dz = onehot(v) - p
    score = np.eye(z.shape[-1]) - p[None, :]
    expectation = (p * advantage) @ score
    return float(np.max(np.abs(expectation + rkl_grad_logits(z, logq).dz)))


def sequence_loss(records: Sequence[Tuple[np.ndarray, object]], normalize_by_length=False):
    """
    Sum (or length-average) reverse KL over the positions of one rollout.

    Parameters:
    - records (list): (logits, target) pairs, one per generated position
    - normalize_by_length (bool): divide loss and gradients by the rollout length

    Returns:
    - tuple: (total loss, list of per-position LossGrad)
    """
    if not records:
        raise RejectedInputError("sequence_loss needs at least one position")
    grads: List[LossGrad] = [rkl_grad_logits(z, q) for z, q in records]
    if normalize_by_length:
        scale = 1.0 / len(grads)
        grads = [LossGrad(loss=g.loss * scale, dz=g.dz * scale) for g in grads]
    return float(sum(g.loss for g in grads)), grads


def avg_reverse_kl(q, fam: ViewFamily):
    """sum_m w_m KL(q || q^(m))"""
    w = fam.resolved_weights()
    return float(sum(w_m * reverse_kl(q, view) for w_m, view in zip(w, fam.views)))


def avg_forward_kl(fam: ViewFamily, q):
    """sum_m w_m KL(q^(m) || q)"""
    w = fam.resolved_weights()
    return float(sum(w_m * forward_kl(view, q) for w_m, view in zip(w, fam.views)))
