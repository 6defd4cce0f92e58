"""
On-policy multi-view self-distillation.

Each step samples one rollout per instance from the student (bare prompt, no
view), evaluates the same model with every privileged view prepended at each
rollout prefix, pools those teacher distributions into a target and takes one
Adam step on the summed reverse KL. The teacher forward passes never receive
gradients.
"""
import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
import pandas as pd
from scipy.special import log_softmax

from utils.config import TrainConfig, validate_config
from utils.errors import ConsistencyError, RejectedInputError
from utils.init import (STREAM_EVAL_DATA, STREAM_EVAL_SAMPLE, STREAM_INIT, STREAM_ROLLOUT,
                        STREAM_TRAIN_DATA, STREAM_WARMUP, spawn_rng)
from utils.rkl_loss import cross_entropy_grad_logits, sequence_loss
from utils.signal_core import as_logdist, pool_batch
from utils.task_synth import (OWN_ATTEMPT, STATIC_VIEWS, gen_instances, render_views,
                              student_prompt, verify, warmup_sequence)
from utils.toy_lm import (add_params, adam_step, backward_batch, forward_batch, init_adam,
                          init_params, sample_rollout, scale_params, zeros_like)

logger = logging.getLogger(__name__)

# lambda * J below this adds no residual support
RESIDUAL_SUPPORT = 1e-12

SCALING_ORDER = STATIC_VIEWS + (OWN_ATTEMPT,)


@dataclass
class StepLog:
    step: int
    mean_loss: float
    gate_open_rate: float
    lambda_above_tau_rate: float
    mean_lambda: float
    mean_rollout_length: float
    teacher_evals: int
    eval_accuracy: Optional[float] = None
    wall_time: float = 0.0

    def to_record(self, include_timing=False):
        record = dataclasses.asdict(self)
        if not include_timing:
            record.pop("wall_time")
        return record


@dataclass
class RolloutSignal:
    """Everything one rollout contributes to a step"""
    rollout: object
    student_logp: np.ndarray   # (T, V)
    view_logp: np.ndarray      # (T, M, V)
    signal: object             # PooledSignal over the T positions
    target_logp: np.ndarray    # (T, V), the distillation target actually used
    loss: float
    grads: object              # ToyLMParams

    @property
    def sampled_lambda(self):
        tokens = np.asarray(self.rollout.generated)
        return self.signal.lam[np.arange(len(tokens)), tokens]

    @property
    def sampled_support(self):
        tokens = np.asarray(self.rollout.generated)
        rows = np.arange(len(tokens))
        return self.signal.lam[rows, tokens] * self.signal.residual[rows, tokens]


def student_rows(params, rollout):
    """Student logits, forward cache and log-probabilities at every rollout prefix"""
    if not rollout.generated:
        raise RejectedInputError("rollout has no generated tokens")
    z, cache = forward_batch(params, rollout.prefixes())
    return z, cache, as_logdist(log_softmax(z, axis=-1)).logp


def teacher_rows(params, instance, rollout, views):
    """
    Teacher log-probabilities at every rollout prefix, shape (T, M, V).

    All M*T teacher prefixes go through a single batched forward pass; the
    cache is discarded, so nothing flows back into the teacher.
    """
    prefixes = rollout.prefixes()
    contexts = render_views(instance, views, rollout)
    rows = [ctx + prefix for ctx in contexts for prefix in prefixes]
    z, _ = forward_batch(params, rows)
    logq = as_logdist(log_softmax(z, axis=-1)).logp
    return logq.reshape(len(contexts), len(prefixes), -1).transpose(1, 0, 2)


def select_target(signal, view_logp, method):
    """The per-position target for each training method"""
    if method == "avsd":
        return signal.qstar.logp
    if method == "consensus_only":
        return signal.qg.logp
    if method == "arithmetic_only":
        return signal.qa.logp
    if method == "opsd":
        return view_logp[:, 0, :]
    raise RejectedInputError(f"unknown method {method!r}")


def rollout_signal(params, instance, rollout, cfg: TrainConfig):
    """
    Pool the teacher views along one rollout and differentiate the sequence loss.

    Parameters:
    - params (ToyLMParams): current weights, shared by student and teacher
    - instance (TaskInstance): problem and privileged views
    - rollout (Rollout): student sample, at least one generated token
    - cfg (TrainConfig): method, views, epsilon, gate override and length normalization

    Returns:
    - RolloutSignal
    """
    z_student, cache, student_logp = student_rows(params, rollout)
    view_logp = teacher_rows(params, instance, rollout, cfg.views_used)
    signal = pool_batch(student_logp, view_logp, epsilon=cfg.epsilon,
                        lambda_override=cfg.gate_override)
    for t, step in enumerate(rollout.steps):
        step.signal = signal.at(t)
    target = select_target(signal, view_logp, cfg.method)

    loss, per_position = sequence_loss(list(zip(z_student, target)), cfg.length_normalized)
    dz = np.stack([g.dz for g in per_position])
    grads = backward_batch(params, cache, dz)
    return RolloutSignal(rollout=rollout, student_logp=student_logp, view_logp=view_logp,
                         signal=signal, target_logp=target, loss=loss, grads=grads)


def _instance_signal(params, instance, cfg, rng):
    rollout = sample_rollout(params, student_prompt(instance), cfg.rollout_temperature,
                             cfg.max_len, rng)
    return rollout_signal(params, instance, rollout, cfg)


def train_step(params, batch, cfg: TrainConfig, rng, workers=None):
    """
    Gradients of the batch-mean distillation loss.

    Every instance gets its own child generator, so the result does not depend
    on how many workers sample rollouts; gradients are summed in batch order.

    Returns:
    - tuple: (ToyLMParams gradients, dict of StepLog fields)
    """
    if not batch:
        raise RejectedInputError("train_step needs at least one instance")
    workers = workers or cfg.workers
    rngs = rng.spawn(len(batch))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(lambda inst, r: _instance_signal(params, inst, cfg, r), batch, rngs))
    else:
        results = [_instance_signal(params, inst, cfg, r) for inst, r in zip(batch, rngs)]

    total = zeros_like(params)
    for result in results:
        total = add_params(total, result.grads)
    grads = scale_params(total, 1.0 / len(batch))

    lam = np.concatenate([r.sampled_lambda for r in results])
    support = np.concatenate([r.sampled_support for r in results])
    above = lam > cfg.gate_tau
    fields = {
        "mean_loss": float(np.mean([r.loss for r in results])),
        "gate_open_rate": float(np.mean(above & (support > RESIDUAL_SUPPORT))),
        "lambda_above_tau_rate": float(np.mean(above)),
        "mean_lambda": float(np.mean(lam)),
        "mean_rollout_length": float(np.mean([len(r.rollout.generated) for r in results])),
        "teacher_evals": int(sum(r.view_logp.shape[0] * r.view_logp.shape[1] for r in results)),
    }
    return grads, fields


def eval_avg_at_k(params, instances, k, temperature, rng, max_len=4):
    """
    Avg@k: mean over instances of the fraction of k sampled rollouts that verify.

    Returns:
    - float in [0, 1]
    """
    if k < 1:
        raise RejectedInputError("k must be at least 1")
    if not instances:
        raise RejectedInputError("no evaluation instances")
    rngs = rng.spawn(len(instances))
    scores = []
    for instance, inst_rng in zip(instances, rngs):
        prompt = student_prompt(instance)
        correct = sum(verify(instance, sample_rollout(params, prompt, temperature, max_len, inst_rng))
                      for _ in range(k))
        scores.append(correct / k)
    return float(np.mean(scores))


def held_out_instances(cfg: TrainConfig):
    return gen_instances(cfg.task, cfg.eval_instances, stream=STREAM_EVAL_DATA, seed=cfg.seed)


def train_instances(cfg: TrainConfig, step):
    """The batch for a 1-based step; every step draws fresh instances"""
    return gen_instances(cfg.task, cfg.batch_size, stream=STREAM_TRAIN_DATA,
                         start=(step - 1) * cfg.batch_size, seed=cfg.seed)


def context_warmup(params, cfg: TrainConfig):
    """
    Teach a fresh model to read privileged context.

    Trains next-token cross-entropy on sequences whose view comes from a
    different instance than the visible problem, so the model learns to copy
    the answer out of a view without learning the task itself.
    """
    kinds = list(dict.fromkeys(cfg.views_used))
    state = init_adam(params)
    for step in range(1, cfg.warmup_steps + 1):
        rng = spawn_rng(cfg.seed, STREAM_WARMUP, step)
        prefixes, targets = [], []
        for i in range(cfg.batch_size):
            sequence = warmup_sequence(cfg.task, rng, kinds[(step + i) % len(kinds)])
            for prefix, token in sequence.examples():
                prefixes.append(prefix)
                targets.append(token)
        z, cache = forward_batch(params, prefixes)
        losses = [cross_entropy_grad_logits(row, token) for row, token in zip(z, targets)]
        dz = np.stack([g.dz for g in losses]) / cfg.batch_size
        grads = backward_batch(params, cache, dz)
        params, state = adam_step(params, grads, state, lr=cfg.warmup_lr, beta1=cfg.optim.beta1,
                                  beta2=cfg.optim.beta2, eps=cfg.optim.eps,
                                  clip_norm=cfg.optim.clip_norm)
        if step % 100 == 0 or step == cfg.warmup_steps:
            logger.info("warm-up step", extra={"step": step,
                                                "loss": float(np.mean([g.loss for g in losses]))})
    return params


def teacher_view_accuracy(params, cfg: TrainConfig, count=64):
    """Share of held-out problems where the final-answer view makes the answer the teacher's top token"""
    instances = gen_instances(cfg.task, count, stream=STREAM_EVAL_DATA, seed=cfg.seed)
    rows = [render_views(i, ["final_answer"])[0] + student_prompt(i) for i in instances]
    z, _ = forward_batch(params, rows)
    answers = np.array([i.answer_tokens[0] for i in instances])
    return float(np.mean(np.argmax(z, axis=-1) == answers))


def initial_params(cfg: TrainConfig):
    """Fresh weights for the run seed, after the context warm-up if configured"""
    params = init_params(cfg.model_config, spawn_rng(cfg.seed, STREAM_INIT))
    if cfg.warmup_steps:
        params = context_warmup(params, cfg)
        accuracy = teacher_view_accuracy(params, cfg)
        logger.info("warm-up done", extra={"teacher_view_accuracy": accuracy})
        if accuracy < cfg.warmup_min_accuracy:
            raise ConsistencyError(
                f"after warm-up the teacher reads the final-answer view on {accuracy:.2f} of "
                f"problems, below warmup_min_accuracy={cfg.warmup_min_accuracy}")
    return params


def train_run(cfg: TrainConfig, params=None, opt_state=None, start_step=0,
              on_step: Optional[Callable] = None, on_checkpoint: Optional[Callable] = None):
    """
    Run training from start_step to cfg.steps.

    Parameters:
    - cfg (TrainConfig): validated run configuration
    - params (ToyLMParams, optional): weights to resume from; fresh ones otherwise
    - opt_state (AdamState, optional): optimizer moments to resume from
    - start_step (int): number of steps already completed
    - on_step (callable, optional): called with each StepLog as it is produced
    - on_checkpoint (callable, optional): called with (step, params, opt_state)
      every cfg.checkpoint_every steps

    Returns:
    - tuple: (final ToyLMParams, final AdamState, list of StepLog)
    """
    validate_config(cfg)
    if params is None:
        params = initial_params(cfg)
    if opt_state is None:
        opt_state = init_adam(params)
    eval_set = held_out_instances(cfg) if cfg.eval_every else []

    logs: List[StepLog] = []
    for step in range(start_step + 1, cfg.steps + 1):
        started = time.perf_counter()
        grads, fields = train_step(params, train_instances(cfg, step), cfg,
                                   spawn_rng(cfg.seed, STREAM_ROLLOUT, step))
        if not np.isfinite(fields["mean_loss"]):
            logger.warning("non-finite loss", extra={"step": step})
        params, opt_state = adam_step(params, grads, opt_state, lr=cfg.optim.lr,
                                      beta1=cfg.optim.beta1, beta2=cfg.optim.beta2,
                                      eps=cfg.optim.eps, clip_norm=cfg.optim.clip_norm)

        accuracy = None
        if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps):
            accuracy = eval_avg_at_k(params, eval_set, cfg.eval_k, cfg.eval_temperature,
                                     spawn_rng(cfg.seed, STREAM_EVAL_SAMPLE, step), cfg.max_len)
            logger.info("evaluation", extra={"step": step, "avg_at_k": accuracy, "k": cfg.eval_k})

        log = StepLog(step=step, eval_accuracy=accuracy,
                      wall_time=time.perf_counter() - started, **fields)
        logs.append(log)
        if on_step is not None:
            on_step(log)
        if on_checkpoint is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            on_checkpoint(step, params, opt_state)
    return params, opt_state, logs


def scaling_config(cfg: TrainConfig, view_count):
    """
    The run for one view count: the first view_count kinds in scaling order.

    A single view is the one-view baseline on the full solution.
    """
    if not 1 <= view_count <= len(SCALING_ORDER):
        raise RejectedInputError(f"view count must lie in [1, {len(SCALING_ORDER)}]")
    views = SCALING_ORDER[:view_count]
    method = "opsd" if view_count == 1 else "avsd"
    return dataclasses.replace(cfg, method=method, views_used=views)


def scale_views_experiment(cfg: TrainConfig, view_counts=(1, 2, 3, 4)):
    """
    Train once per view count on identical data and seeds.

    Returns:
    - pd.DataFrame: one row per view count, one `avg@k step N` column per
      evaluation step
    """
    rows = []
    for count in view_counts:
        run_cfg = scaling_config(cfg, count)
        logger.info("view-scaling run", extra={"view_count": count, "views": ",".join(run_cfg.views_used)})
        _, _, logs = train_run(run_cfg)
        row = {"view_count": count, "method": run_cfg.method, "views": ",".join(run_cfg.views_used)}
        for log in logs:
            if log.eval_accuracy is not None:
                row[f"avg@{cfg.eval_k} step {log.step}"] = log.eval_accuracy
        row["final_loss"] = logs[-1].mean_loss if logs else np.nan
        rows.append(row)
    return pd.DataFrame(rows)
