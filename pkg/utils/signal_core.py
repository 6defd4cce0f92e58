"""
Multi-view target construction.

A student next-token distribution p and M view-conditioned teacher distributions
q^(m) are turned into per-view advantages, the geometric consensus and
arithmetic marginal pooled targets, the cross-view residual J between them, the
residual gate lambda = C * R and the reconstructed target q*.

Every function works on the trailing vocabulary axis, so the same code serves a
single prefix (logp of shape (V,), views of shape (M, V)) and a whole rollout
(logp of shape (T, V), views of shape (T, M, V)).
"""
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from utils.errors import ConsistencyError, RejectedInputError

LOG_FLOOR = -45.0
DEFAULT_EPSILON = 1e-8

# Residual tolerances: clamp above RESIDUAL_ERROR, fail below it
RESIDUAL_ERROR = -1e-6
NORM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class LogDist:
    """Normalized distribution(s) over the vocabulary, natural-log space"""
    logp: np.ndarray

    @property
    def probs(self):
        return np.exp(self.logp)

    @property
    def vocab_size(self):
        return self.logp.shape[-1]


@dataclass(frozen=True)
class ViewFamily:
    """
    The M view-conditioned teacher distributions at one or more prefixes.

    logq has shape (..., M, V). weights, when given, is a nonnegative vector of
    length M summing to one; None means uniform 1/M.
    """
    logq: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.logq.ndim < 2 or self.logq.shape[-2] < 1:
            raise RejectedInputError("a view family needs at least one view")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (self.size,):
                raise RejectedInputError(f"expected {self.size} view weights, got shape {w.shape}")
            if np.any(w < 0) or abs(w.sum() - 1.0) > NORM_TOLERANCE:
                raise RejectedInputError("view weights must be nonnegative and sum to 1")
            object.__setattr__(self, "weights", w)

    @classmethod
    def from_views(cls, views: Sequence[LogDist], weights=None):
        sizes = {v.vocab_size for v in views}
        if len(sizes) > 1:
            raise RejectedInputError(f"views disagree on vocabulary size: {sorted(sizes)}")
        return cls(np.stack([v.logp for v in views], axis=-2), weights)

    @property
    def size(self):
        return self.logq.shape[-2]

    @property
    def vocab_size(self):
        return self.logq.shape[-1]

    @property
    def views(self):
        return [LogDist(self.logq[..., m, :]) for m in range(self.size)]

    def resolved_weights(self):
        if self.weights is None:
            return np.full(self.size, 1.0 / self.size)
        return self.weights


@dataclass(frozen=True)
class PooledSignal:
    delta: np.ndarray          # per-view advantages, (..., M, V)
    a_geo: np.ndarray          # consensus advantage A^G
    a_arith: np.ndarray        # arithmetic advantage A^A
    log_qg_unnorm: np.ndarray  # log of the unnormalized geometric score
    qg: LogDist                # normalized geometric consensus target
    qa: LogDist                # arithmetic marginal target
    residual: np.ndarray       # J
    c_gate: np.ndarray
    r_gate: np.ndarray
    lam: np.ndarray
    a_hat: np.ndarray
    qstar: LogDist

    def at(self, index):
        """The signal at one leading index, e.g. one rollout position"""
        parts = {}
        for f in fields(self):
            value = getattr(self, f.name)
            parts[f.name] = LogDist(value.logp[index]) if isinstance(value, LogDist) else value[index]
        return PooledSignal(**parts)


def normalize_log(x):
    """Shift log-scores so they log-sum-exp to zero along the vocabulary axis"""
    x = np.asarray(x, dtype=np.float64)
    return x - logsumexp(x, axis=-1, keepdims=True)


def as_logdist(logp, floor=LOG_FLOOR):
    """
    Ingest log-probabilities: normalize, then lift every entry to at least the floor.

    The lift mixes exp(floor) of mass into each entry and scales the rest by
    1 - V*exp(floor), so the result stays normalized and never drops below the floor.

    Parameters:
    - logp (array-like): log-probabilities (or unnormalized log-scores), vocabulary last
    - floor (float): lowest admissible log-probability

    Returns:
    - LogDist: floored and normalized distribution(s)
    """
    x = np.asarray(logp, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise RejectedInputError("empty distribution")
    if np.any(np.isnan(x)) or np.any(x == np.inf):
        raise RejectedInputError("log-probabilities contain NaN or +inf")
    logp = normalize_log(np.maximum(x, floor))
    keep = np.log1p(-x.shape[-1] * np.exp(floor))
    return LogDist(np.logaddexp(logp + keep, floor))


def _check_same_vocab(*sizes):
    if len(set(sizes)) > 1:
        raise RejectedInputError(f"vocabulary size mismatch: {sizes}")


def _weighted_view_sum(weights, x):
    # contracts the view axis (-2) of x against the weight vector
    return np.einsum("m,...mv->...v", weights, x)


def per_view_advantages(p: LogDist, fam: ViewFamily):
    """Delta^(m)(v) = log q^(m)(v) - log p(v)"""
    _check_same_vocab(p.vocab_size, fam.vocab_size)
    return fam.logq - p.logp[..., None, :]


def geometric_consensus(fam: ViewFamily):
    """
    Weighted geometric mean of the views.

    Returns:
    - tuple: (log of the unnormalized geometric score, normalized LogDist)
    """
    log_unnorm = _weighted_view_sum(fam.resolved_weights(), fam.logq)
    return log_unnorm, LogDist(normalize_log(log_unnorm))


def arithmetic_marginal(fam: ViewFamily):
    """Probability-space weighted mean of the views, in log space"""
    w = fam.resolved_weights()
    with np.errstate(divide="ignore"):
        log_w = np.log(w)
    return LogDist(logsumexp(fam.logq + log_w[:, None], axis=-2))


def cross_view_residual(qa: LogDist, log_qg_unnorm):
    """
    J(v) = log q^A(v) - log q~^G(v), nonnegative by the AM-GM inequality.

    Floating-point undershoot is clamped to zero; anything below -1e-6 means the
    inputs were not the pooled targets of one family.
    """
    _check_same_vocab(qa.vocab_size, np.shape(log_qg_unnorm)[-1])
    residual = qa.logp - log_qg_unnorm
    worst = residual.min()
    if worst < RESIDUAL_ERROR:
        raise ConsistencyError(f"cross-view residual {worst:.3e} is negative beyond tolerance")
    return np.maximum(residual, 0.0)


def consensus_advantage(delta, weights=None):
    """A^G(v) = sum_m w_m Delta^(m)(v)"""
    delta = np.asarray(delta, dtype=np.float64)
    if weights is None:
        weights = np.full(delta.shape[-2], 1.0 / delta.shape[-2])
    return _weighted_view_sum(weights, delta)


def gate(delta, a_geo, residual, epsilon=DEFAULT_EPSILON, weights=None):
    """
    Residual gate lambda = C * R.

    C is the alignment component: consensus magnitude over average per-view
    magnitude. R is the magnitude component: consensus magnitude against
    consensus plus residual.

    Returns:
    - tuple: (c, r, lambda), each in [0, 1]
    """
    if epsilon <= 0:
        raise RejectedInputError("epsilon must be positive")
    if weights is None:
        weights = np.full(delta.shape[-2], 1.0 / delta.shape[-2])
    magnitude = np.abs(a_geo)
    spread = _weighted_view_sum(weights, np.abs(delta))
    c = np.clip(magnitude / (spread + epsilon), 0.0, 1.0)
    r = np.clip(magnitude / (magnitude + residual + epsilon), 0.0, 1.0)
    return c, r, c * r


def reconstruct(log_qg_unnorm, a_geo, residual, lam):
    """
    Reweight the geometric consensus by exp(lambda * J) and renormalize.

    Returns:
    - tuple: (reconstructed advantage A-hat, reconstructed target q*)
    """
    boost = lam * residual
    return a_geo + boost, LogDist(normalize_log(log_qg_unnorm + boost))


def pool(p: LogDist, fam: ViewFamily, epsilon=DEFAULT_EPSILON, lambda_override=None):
    """
    Run the whole pipeline for one prefix (or a stack of prefixes).

    Parameters:
    - p (LogDist): student distribution(s), shape (..., V)
    - fam (ViewFamily): teacher views, shape (..., M, V)
    - epsilon (float): gate denominator constant
    - lambda_override (float or array, optional): replaces the computed gate;
      0 reproduces the geometric consensus target and 1 the arithmetic marginal

    Returns:
    - PooledSignal
    """
    weights = fam.resolved_weights()
    delta = per_view_advantages(p, fam)
    log_qg_unnorm, qg = geometric_consensus(fam)
    qa = arithmetic_marginal(fam)
    residual = cross_view_residual(qa, log_qg_unnorm)
    a_geo = consensus_advantage(delta, weights)
    c, r, lam = gate(delta, a_geo, residual, epsilon, weights)
    if lambda_override is not None:
        lam = np.broadcast_to(np.asarray(lambda_override, dtype=np.float64), a_geo.shape).copy()
    a_hat, qstar = reconstruct(log_qg_unnorm, a_geo, residual, lam)
    return PooledSignal(
        delta=delta,
        a_geo=a_geo,
        a_arith=qa.logp - p.logp,
        log_qg_unnorm=log_qg_unnorm,
        qg=qg,
        qa=qa,
        residual=residual,
        c_gate=c,
        r_gate=r,
        lam=lam,
        a_hat=a_hat,
        qstar=qstar,
    )


def pool_batch(p_rows, view_rows, weights=None, epsilon=DEFAULT_EPSILON, lambda_override=None):
    """Pool T prefixes at once from arrays of shape (T, V) and (T, M, V)"""
    return pool(LogDist(np.asarray(p_rows)), ViewFamily(np.asarray(view_rows), weights),
                epsilon, lambda_override)


def signal_violations(sig: PooledSignal, tol=NORM_TOLERANCE):
    """
    List the invariants a pooled signal breaks (empty when healthy).

    Checked: nonnegative residual, gates in [0, 1], bounded residual
    contribution, direction preservation and normalization of q*.
    """
    problems = []
    if sig.residual.min() < -tol:
        problems.append("negative residual")
    for name, values in (("c_gate", sig.c_gate), ("r_gate", sig.r_gate), ("lambda", sig.lam)):
        if values.min() < 0 or values.max() > 1:
            problems.append(f"{name} outside [0, 1]")
    if np.any(sig.lam * sig.residual > np.abs(sig.a_geo) + tol):
        problems.append("residual contribution exceeds consensus magnitude")
    decisive = np.abs(sig.a_geo) > 1e-12
    if np.any(np.sign(sig.a_hat[decisive]) * np.sign(sig.a_geo[decisive]) < 0):
        problems.append("reconstructed advantage flips the consensus direction")
    if np.max(np.abs(logsumexp(sig.qstar.logp, axis=-1))) > tol:
        problems.append("q* is not normalized")
    return problems
