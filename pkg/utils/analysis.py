"""
Post-hoc analyses of a trained model: the sign of token credit on incorrect
rollouts, and how often the residual gate opens at sampled tokens.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import pandas as pd

from utils.init import STREAM_ANALYSIS, spawn_rng
from utils.signal_core import pool_batch
from utils.task_synth import student_prompt, verify
from utils.toy_lm import sample_rollout
from utils.trainer import RESIDUAL_SUPPORT, student_rows, teacher_rows

logger = logging.getLogger(__name__)

CREDIT_METHODS = ("avsd", "opsd")
OPSD_VIEW = "full_solution"
HISTOGRAM_BINS = 20


@dataclass
class CreditReport:
    rollout_id: str
    method: str
    positions: List[Dict] = field(default_factory=list)
    fraction_wrong_sign: float = 0.0

    def to_record(self):
        return {
            "rollout_id": self.rollout_id,
            "method": self.method,
            "positions": self.positions,
            "fraction_wrong_sign": self.fraction_wrong_sign,
        }


def top_k_credit(advantages, tokens, k):
    """
    The k positions with the largest |advantage|, ties broken by position.

    Returns:
    - list of dicts with position, token, advantage and sign
    """
    advantages = np.asarray(advantages, dtype=np.float64)
    order = np.argsort(-np.abs(advantages), kind="stable")[:k]
    return [
        {"position": int(t), "token": int(tokens[t]), "advantage": float(advantages[t]),
         "sign": int(np.sign(advantages[t]))}
        for t in order
    ]


def wrong_sign_fraction(positions):
    """Share of selected positions whose credit is positive; 0 for an empty selection"""
    if not positions:
        return 0.0
    return sum(1 for p in positions if p["advantage"] > 0) / len(positions)


def sampled_credit(params, instance, rollout, cfg):
    """
    Sampled-token advantages along a rollout under both targets.

    Returns:
    - dict: method -> array of length T. `avsd` is the reconstructed advantage
      over cfg.views_used, `opsd` the single full-solution view's advantage.
    """
    _, _, student_logp = student_rows(params, rollout)
    rows = np.arange(len(rollout.generated))
    tokens = np.asarray(rollout.generated)

    signal = pool_batch(student_logp, teacher_rows(params, instance, rollout, cfg.views_used),
                        epsilon=cfg.epsilon)
    single = teacher_rows(params, instance, rollout, [OPSD_VIEW])[:, 0, :]
    return {
        "avsd": signal.a_hat[rows, tokens],
        "opsd": single[rows, tokens] - student_logp[rows, tokens],
    }


def credit_summary(reports, method):
    """Micro (over tokens) and macro (over rollouts) wrong-sign rates for one method"""
    chosen = [r for r in reports if r.method == method]
    tokens = [p for r in chosen for p in r.positions]
    if not chosen:
        return {"method": method, "rollouts": 0, "tokens": 0, "micro_wrong_sign": None,
                "macro_wrong_sign": None, "empty": True}
    return {
        "method": method,
        "rollouts": len(chosen),
        "tokens": len(tokens),
        "micro_wrong_sign": wrong_sign_fraction(tokens),
        "macro_wrong_sign": float(np.mean([r.fraction_wrong_sign for r in chosen])),
        "empty": False,
    }


def analyze_credit(params, instances, cfg, k=20, samples=1, seed=None):
    """
    Sample rollouts, keep the incorrect ones and report top-k credit signs.

    Parameters:
    - params (ToyLMParams): model under analysis
    - instances (list): TaskInstance list
    - cfg (TrainConfig): views, epsilon, rollout temperature and length
    - k (int): positions kept per rollout
    - samples (int): rollouts drawn per instance
    - seed (int, optional): defaults to cfg.seed

    Returns:
    - tuple: (list of CreditReport, pd.DataFrame with one summary row per method)
    """
    seed = cfg.seed if seed is None else seed
    reports = []
    sampled = 0
    for index, instance in enumerate(instances):
        rng = spawn_rng(seed, STREAM_ANALYSIS, index)
        for sample in range(samples):
            rollout = sample_rollout(params, student_prompt(instance), cfg.rollout_temperature,
                                     cfg.max_len, rng)
            sampled += 1
            if verify(instance, rollout):
                continue
            credit = sampled_credit(params, instance, rollout, cfg)
            for method in CREDIT_METHODS:
                positions = top_k_credit(credit[method], rollout.generated, k)
                reports.append(CreditReport(rollout_id=f"{instance.id}:{sample}", method=method,
                                            positions=positions,
                                            fraction_wrong_sign=wrong_sign_fraction(positions)))

    summary = pd.DataFrame([credit_summary(reports, m) for m in CREDIT_METHODS])
    if not reports:
        logger.warning("no incorrect rollouts found", extra={"sampled": sampled})
    return reports, summary


def gate_histogram(lam, bins=HISTOGRAM_BINS):
    counts, edges = np.histogram(np.asarray(lam, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    return pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "count": counts})


def gate_rates(lam, support, tau):
    """
    Both gate rates over a set of sampled positions.

    lambda_above_tau_rate counts positions with lambda > tau; gate_open_rate
    additionally requires the residual contribution lambda * J to be nonzero.
    """
    lam = np.asarray(lam, dtype=np.float64)
    support = np.asarray(support, dtype=np.float64)
    if lam.size == 0:
        return {"positions": 0, "lambda_above_tau_rate": 0.0, "gate_open_rate": 0.0, "mean_lambda": 0.0}
    above = lam > tau
    return {
        "positions": int(lam.size),
        "lambda_above_tau_rate": float(np.mean(above)),
        "gate_open_rate": float(np.mean(above & (support > RESIDUAL_SUPPORT))),
        "mean_lambda": float(np.mean(lam)),
    }


def analyze_gate(params, instances, cfg, tau=None, samples=1, seed=None):
    """
    Gate statistics at the tokens the student actually samples.

    Returns:
    - tuple: (summary dict, pd.DataFrame histogram of lambda over 20 bins)
    """
    tau = cfg.gate_tau if tau is None else tau
    seed = cfg.seed if seed is None else seed
    lam, support = [], []
    for index, instance in enumerate(instances):
        rng = spawn_rng(seed, STREAM_ANALYSIS, index)
        for _ in range(samples):
            rollout = sample_rollout(params, student_prompt(instance), cfg.rollout_temperature,
                                     cfg.max_len, rng)
            _, _, student_logp = student_rows(params, rollout)
            signal = pool_batch(student_logp, teacher_rows(params, instance, rollout, cfg.views_used),
                                epsilon=cfg.epsilon)
            rows = np.arange(len(rollout.generated))
            tokens = np.asarray(rollout.generated)
            lam.append(signal.lam[rows, tokens])
            support.append(signal.lam[rows, tokens] * signal.residual[rows, tokens])

    lam = np.concatenate(lam) if lam else np.zeros(0)
    support = np.concatenate(support) if support else np.zeros(0)
    summary = {"tau": float(tau), **gate_rates(lam, support, tau)}
    return summary, gate_histogram(lam)
