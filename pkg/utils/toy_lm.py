"""
Tiny autoregressive model with hand-written backprop.

hidden = tanh(concat(embed of last W tokens) @ w_window
              + mean(embed of every prefix token) @ w_summary + b_window)
logits = hidden @ w_out + b_out

The window sees local context; the mean-summary path lets tokens far back in
the prefix (a privileged view placed before the problem) reach every later
position. The same parameters serve as student (bare prompt) and as teacher
(view context prepended, output treated as a constant).
"""
from dataclasses import dataclass, field, fields
from typing import List, Optional

import numpy as np
from scipy.special import log_softmax, softmax

from utils.errors import RejectedInputError
from utils.signal_core import LogDist, PooledSignal, as_logdist

BOS = 0
END = 1

ARGMAX_TEMPERATURE = 1e-6


@dataclass
class ToyLMParams:
    embed: np.ndarray      # (V, d)
    w_window: np.ndarray   # (W*d, H)
    b_window: np.ndarray   # (H,)
    w_summary: np.ndarray  # (d, H)
    w_out: np.ndarray      # (H, V)
    b_out: np.ndarray      # (V,)

    @property
    def vocab_size(self):
        return self.embed.shape[0]

    @property
    def width(self):
        return self.embed.shape[1]

    @property
    def window(self):
        return self.w_window.shape[0] // self.embed.shape[1]

    @property
    def hidden(self):
        return self.w_window.shape[1]

    def blocks(self):
        """(name, array) pairs in declaration order"""
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def copy(self):
        return ToyLMParams(**{name: value.copy() for name, value in self.blocks()})


def block_names():
    return [f.name for f in fields(ToyLMParams)]


def zeros_like(params):
    return ToyLMParams(**{name: np.zeros_like(value) for name, value in params.blocks()})


def add_params(a, b):
    return ToyLMParams(**{name: value + getattr(b, name) for name, value in a.blocks()})


def scale_params(a, factor):
    return ToyLMParams(**{name: value * factor for name, value in a.blocks()})


def global_norm(params):
    return float(np.sqrt(sum(np.sum(value * value) for _, value in params.blocks())))


def init_params(cfg, rng):
    """
    Draw fresh parameters.

    Parameters:
    - cfg (ModelConfig): vocabulary size, width, hidden size, window, init scale
    - rng (np.random.Generator): seeded generator

    Returns:
    - ToyLMParams: weights uniform in (-init_scale, init_scale), biases zero
    """
    s = cfg.init_scale
    v, d, h, w = cfg.vocab_size, cfg.width, cfg.hidden, cfg.window
    return ToyLMParams(
        embed=rng.uniform(-s, s, size=(v, d)),
        w_window=rng.uniform(-s, s, size=(w * d, h)),
        b_window=np.zeros(h),
        w_summary=rng.uniform(-s, s, size=(d, h)),
        w_out=rng.uniform(-s, s, size=(h, v)),
        b_out=np.zeros(v),
    )


@dataclass
class ForwardCache:
    window_ids: np.ndarray  # (N, W)
    counts: np.ndarray      # (N, V) token frequencies of each prefix
    x: np.ndarray           # (N, W*d)
    s: np.ndarray           # (N, d)
    h: np.ndarray           # (N, H)


def _validate_prefix(prefix, vocab_size):
    if len(prefix) == 0:
        raise RejectedInputError("prefix must hold at least one token")
    arr = np.asarray(prefix, dtype=np.int64)
    if arr.min() < 0 or arr.max() >= vocab_size:
        raise RejectedInputError(f"token index outside vocabulary of size {vocab_size}")
    return arr


def forward_batch(params: ToyLMParams, prefixes):
    """
    Logits for many prefixes in one pass.

    Returns:
    - tuple: (logits of shape (N, V), ForwardCache for backward_batch)
    """
    n, w, v = len(prefixes), params.window, params.vocab_size
    window_ids = np.full((n, w), BOS, dtype=np.int64)
    counts = np.zeros((n, v))
    for i, prefix in enumerate(prefixes):
        arr = _validate_prefix(prefix, v)
        tail = arr[-w:]
        window_ids[i, w - len(tail):] = tail
        counts[i] = np.bincount(arr, minlength=v) / len(arr)

    x = params.embed[window_ids].reshape(n, w * params.width)
    s = counts @ params.embed
    h = np.tanh(x @ params.w_window + s @ params.w_summary + params.b_window)
    z = h @ params.w_out + params.b_out
    return z, ForwardCache(window_ids=window_ids, counts=counts, x=x, s=s, h=h)


def backward_batch(params: ToyLMParams, cache: ForwardCache, dz):
    """Parameter gradients of sum_i z_i . dz_i"""
    dz = np.asarray(dz, dtype=np.float64).reshape(cache.h.shape[0], -1)
    d = params.width

    da = (dz @ params.w_out.T) * (1.0 - cache.h ** 2)
    dx = da @ params.w_window.T
    ds = da @ params.w_summary.T

    g_embed = cache.counts.T @ ds
    np.add.at(g_embed, cache.window_ids.ravel(), dx.reshape(-1, d))

    return ToyLMParams(
        embed=g_embed,
        w_window=cache.x.T @ da,
        b_window=da.sum(axis=0),
        w_summary=cache.s.T @ da,
        w_out=cache.h.T @ dz,
        b_out=dz.sum(axis=0),
    )


def forward(params: ToyLMParams, prefix):
    """Logits for a single prefix"""
    z, _ = forward_batch(params, [prefix])
    return z[0]


def backward(params: ToyLMParams, prefix, dz):
    """Exact gradients of forward(params, prefix) . dz"""
    _, cache = forward_batch(params, [prefix])
    return backward_batch(params, cache, np.asarray(dz)[None, :])


def student_dist(params: ToyLMParams, prefix) -> LogDist:
    return as_logdist(log_softmax(forward(params, prefix)))


def teacher_eval(params: ToyLMParams, view_context, prefix) -> LogDist:
    """
    Teacher distribution: the same model with a privileged view prepended.

    The result is a detached copy; nothing downstream routes gradients
    through it.
    """
    return student_dist(params, list(view_context) + list(prefix))


@dataclass
class StepTrace:
    logits: np.ndarray
    token: int
    signal: Optional[PooledSignal] = None


@dataclass
class Rollout:
    prompt: List[int]
    generated: List[int] = field(default_factory=list)
    steps: List[StepTrace] = field(default_factory=list)

    def prefixes(self):
        """Student prefixes h_t = prompt + generated[:t]"""
        return [self.prompt + self.generated[:t] for t in range(len(self.generated))]


def sample_token(z, temperature, rng):
    if temperature < ARGMAX_TEMPERATURE:
        return int(np.argmax(z))
    probs = softmax(np.asarray(z) / temperature)
    return int(rng.choice(len(probs), p=probs))


def sample_rollout(params: ToyLMParams, prompt, temperature, max_len, rng, terminator=END):
    """
    Sample a rollout from the student, stopping at the terminator or max_len.

    Temperatures below 1e-6 decode greedily.
    """
    if temperature < 0:
        raise RejectedInputError("temperature must be nonnegative")
    rollout = Rollout(prompt=list(prompt))
    prefix = list(prompt)
    for _ in range(max_len):
        z = forward(params, prefix)
        token = sample_token(z, temperature, rng)
        rollout.generated.append(token)
        rollout.steps.append(StepTrace(logits=z, token=token))
        prefix.append(token)
        if token == terminator:
            break
    return rollout


@dataclass
class AdamState:
    m: ToyLMParams
    v: ToyLMParams
    t: int = 0


def init_adam(params):
    return AdamState(m=zeros_like(params), v=zeros_like(params), t=0)


def clip_by_global_norm(grads, clip_norm):
    if clip_norm is None:
        return grads
    norm = global_norm(grads)
    if norm > clip_norm:
        return scale_params(grads, clip_norm / norm)
    return grads


def adam_step(params, grads, state, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
    """
    One bias-corrected Adam update.

    An all-zero gradient decays the moments and leaves the parameters as they
    are.

    Returns:
    - tuple: (new ToyLMParams, new AdamState)
    """
    grads = clip_by_global_norm(grads, clip_norm)
    t = state.t + 1
    m, v, new = {}, {}, {}
    skip = global_norm(grads) == 0.0
    for name, value in params.blocks():
        g = getattr(grads, name)
        m[name] = beta1 * getattr(state.m, name) + (1.0 - beta1) * g
        v[name] = beta2 * getattr(state.v, name) + (1.0 - beta2) * g * g
        if skip:
            new[name] = value.copy()
            continue
        m_hat = m[name] / (1.0 - beta1 ** t)
        v_hat = v[name] / (1.0 - beta2 ** t)
        new[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return ToyLMParams(**new), AdamState(m=ToyLMParams(**m), v=ToyLMParams(**v), t=t)
