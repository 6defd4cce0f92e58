import dataclasses
import os

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from utils.config import ModelConfig, TaskConfig, TrainConfig, load_config
from utils.errors import ConfigError, ConsistencyError, RejectedInputError
from utils.init import STREAM_EVAL_DATA, STREAM_INIT, spawn_rng
from utils.task_synth import END, VIEW_MARKERS, digit, gen_instances, student_prompt
from utils.toy_lm import Rollout, adam_step, block_names, init_adam, init_params, sample_rollout
from utils.trainer import (StepLog, context_warmup, eval_avg_at_k, initial_params, rollout_signal,
                           scale_views_experiment, scaling_config, teacher_view_accuracy, train_instances,
                           train_run, train_step)


def max_diff(a, b):
    return max(float(np.max(np.abs(getattr(a, n) - getattr(b, n)))) for n in block_names())


def step_grads(params, cfg, step=1, seed=0):
    return train_step(params, train_instances(cfg, step), cfg, np.random.default_rng([seed, step]))


class TestTrainStep:
    def test_fields(self, tiny_config):
        params = initial_params(tiny_config)
        grads, fields = step_grads(params, tiny_config)
        assert set(fields) == {"mean_loss", "gate_open_rate", "lambda_above_tau_rate", "mean_lambda",
                               "mean_rollout_length", "teacher_evals"}
        for rate in ("gate_open_rate", "lambda_above_tau_rate", "mean_lambda"):
            assert 0.0 <= fields[rate] <= 1.0
        assert fields["gate_open_rate"] <= fields["lambda_above_tau_rate"]
        assert fields["teacher_evals"] == pytest.approx(
            len(tiny_config.views_used) * fields["mean_rollout_length"] * tiny_config.batch_size)
        assert np.isfinite(fields["mean_loss"])

    def test_worker_count_does_not_matter(self, tiny_config):
        params = initial_params(tiny_config)
        one, fields_one = train_step(params, train_instances(tiny_config, 1), tiny_config,
                                     np.random.default_rng(3), workers=1)
        many, fields_many = train_step(params, train_instances(tiny_config, 1), tiny_config,
                                       np.random.default_rng(3), workers=3)
        assert max_diff(one, many) == 0.0
        assert fields_one == fields_many

    def test_empty_batch(self, tiny_config):
        with pytest.raises(RejectedInputError):
            train_step(initial_params(tiny_config), [], tiny_config, np.random.default_rng(0))

    def test_student_prefix_has_no_view_tokens(self, tiny_config):
        params = initial_params(tiny_config)
        instance = train_instances(tiny_config, 1)[0]
        rollout = Rollout(prompt=student_prompt(instance), generated=[digit(1), END])
        result = rollout_signal(params, instance, rollout, tiny_config)
        markers = set(VIEW_MARKERS.values())
        assert all(not set(prefix) & markers for prefix in result.rollout.prefixes())
        assert result.view_logp.shape == (2, len(tiny_config.views_used), params.vocab_size)


    def test_steps_carry_their_signal(self, tiny_config):
        params = initial_params(tiny_config)
        instance = train_instances(tiny_config, 1)[0]
        rollout = sample_rollout(params, student_prompt(instance), 0.7, tiny_config.max_len,
                                 np.random.default_rng(5))
        result = rollout_signal(params, instance, rollout, tiny_config)
        assert len(rollout.steps) == len(rollout.generated)
        for t, step in enumerate(rollout.steps):
            assert_array_equal(step.signal.qstar.logp, result.signal.qstar.logp[t])
            assert_array_equal(step.signal.lam, result.signal.lam[t])
            assert step.signal.delta.shape == (len(tiny_config.views_used), params.vocab_size)


class TestDegeneracy:
    def test_duplicated_views_match_single_view(self, tiny_config):
        full = dataclasses.replace(tiny_config, normalize_by_length=False, batch_size=2)
        single = dataclasses.replace(full, method="opsd", views_used=("full_solution",))
        copies = ("full_solution",) * 3
        variants = [dataclasses.replace(full, method=m, views_used=copies)
                    for m in ("avsd", "consensus_only", "arithmetic_only")]

        params = initial_params(full)
        state = init_adam(params)
        for step in range(1, 51):
            reference, _ = step_grads(params, single, step)
            for cfg in variants:
                grads, _ = step_grads(params, cfg, step)
                assert max_diff(grads, reference) <= 1e-12, (cfg.method, step)
            params, state = adam_step(params, reference, state, lr=0.05)

    @pytest.mark.parametrize("override, method", [(0.0, "consensus_only"), (1.0, "arithmetic_only")])
    def test_forced_gate_recovers_pooled_targets(self, tiny_config, override, method):
        forced = dataclasses.replace(tiny_config, gate_override=override)
        plain = dataclasses.replace(tiny_config, method=method)
        params = initial_params(tiny_config)
        for step in (1, 2, 3):
            forced_grads, _ = step_grads(params, forced, step)
            plain_grads, _ = step_grads(params, plain, step)
            assert max_diff(forced_grads, plain_grads) <= 1e-12


class TestRun:
    def test_zero_steps(self, tiny_config):
        cfg = dataclasses.replace(tiny_config, steps=0)
        params, _, logs = train_run(cfg)
        fresh = init_params(cfg.model_config, spawn_rng(cfg.seed, STREAM_INIT))
        assert logs == []
        assert max_diff(params, fresh) == 0.0

    def test_deterministic(self, tiny_config):
        cfg = dataclasses.replace(tiny_config, eval_every=2)
        _, _, first = train_run(cfg)
        _, _, second = train_run(cfg)
        assert [l.to_record() for l in first] == [l.to_record() for l in second]
        assert [l.step for l in first] == [1, 2, 3]
        assert first[1].eval_accuracy is not None and first[0].eval_accuracy is None
        assert first[2].eval_accuracy is not None

    def test_resume_matches_uninterrupted(self, tiny_config):
        cfg = dataclasses.replace(tiny_config, steps=6, checkpoint_every=3)
        saved = {}
        final, _, logs = train_run(cfg, on_checkpoint=lambda step, p, s: saved.setdefault(step, (p, s)))
        assert sorted(saved) == [3, 6]
        params, state = saved[3]
        resumed, _, tail = train_run(cfg, params=params, opt_state=state, start_step=3)
        assert [l.to_record() for l in tail] == [l.to_record() for l in logs[3:]]
        assert max_diff(resumed, final) == 0.0

    def test_on_step_streams_every_log(self, tiny_config):
        seen = []
        _, _, logs = train_run(tiny_config, on_step=seen.append)
        assert seen == logs

    def test_validates(self, tiny_config):
        with pytest.raises(ConfigError):
            train_run(dataclasses.replace(tiny_config, method="opsd"))

    def test_warmup_changes_initial_params(self, tiny_config):
        cfg = dataclasses.replace(tiny_config, warmup_steps=2, batch_size=2)
        fresh = init_params(cfg.model_config, spawn_rng(cfg.seed, STREAM_INIT))
        assert max_diff(initial_params(cfg), fresh) > 0.0

    @pytest.mark.parametrize("method", ["avsd", "opsd", "consensus_only", "arithmetic_only"])
    def test_all_variants_finite(self, tiny_config, method):
        views = ("full_solution",) if method == "opsd" else ("full_solution", "final_answer",
                                                             "own_attempt_plus_reference")
        _, _, logs = train_run(dataclasses.replace(tiny_config, method=method, views_used=views, steps=4))
        assert all(np.isfinite(l.mean_loss) for l in logs)

    def test_timing_only_on_request(self):
        log = StepLog(step=1, mean_loss=0.1, gate_open_rate=0.0, lambda_above_tau_rate=0.0,
                      mean_lambda=0.0, mean_rollout_length=2.0, teacher_evals=6, wall_time=0.3)
        assert "wall_time" not in log.to_record()
        assert log.to_record(include_timing=True)["wall_time"] == 0.3


class TestContextWarmup:
    @pytest.fixture
    def warmup_config(self):
        return TrainConfig(views_used=("full_solution", "final_answer"), batch_size=16, warmup_steps=400,
                           task=TaskConfig(modulus=5, chain_length=2),
                           model=ModelConfig(width=8, hidden=32, window=8))

    def test_teacher_reads_final_answer_view(self, warmup_config):
        fresh = init_params(warmup_config.model_config, spawn_rng(warmup_config.seed, STREAM_INIT))
        assert teacher_view_accuracy(fresh, warmup_config) < 0.5
        warmed = context_warmup(fresh, warmup_config)
        assert teacher_view_accuracy(warmed, warmup_config) >= 0.9

    def test_accuracy_gate(self, warmup_config):
        cfg = dataclasses.replace(warmup_config, warmup_steps=2, warmup_min_accuracy=1.0)
        with pytest.raises(ConsistencyError, match="final-answer view"):
            initial_params(cfg)


class TestEvaluation:
    @pytest.fixture
    def instances(self):
        return gen_instances(TaskConfig(modulus=7), 200)

    def test_always_right(self, instances, tiny_config, monkeypatch):
        def oracle(params, prompt, temperature, max_len, rng):
            answer = next(i.answer_tokens for i in instances if list(i.problem_tokens) == prompt)
            return Rollout(prompt=prompt, generated=[*answer, END])

        monkeypatch.setattr("utils.trainer.sample_rollout", oracle)
        assert eval_avg_at_k(None, instances[:20], 8, 0.6, np.random.default_rng(0)) == 1.0

    def test_uniform_answers(self, instances, monkeypatch):
        def guess(params, prompt, temperature, max_len, rng):
            return Rollout(prompt=prompt, generated=[digit(rng.integers(0, 7)), END])

        monkeypatch.setattr("utils.trainer.sample_rollout", guess)
        score = eval_avg_at_k(None, instances, 8, 0.6, np.random.default_rng(1))
        sigma = np.sqrt((1 / 7) * (6 / 7) / (len(instances) * 8))
        assert abs(score - 1 / 7) <= 3 * sigma

    def test_k_one_is_accuracy(self, instances, monkeypatch):
        calls = iter(instances[:10])

        def alternate(params, prompt, temperature, max_len, rng):
            instance = next(calls)
            answer = list(instance.answer_tokens) if instance.id % 2 == 0 else []
            return Rollout(prompt=prompt, generated=[*answer, END])

        monkeypatch.setattr("utils.trainer.sample_rollout", alternate)
        assert eval_avg_at_k(None, instances[:10], 1, 0.0, np.random.default_rng(2)) == 0.5

    def test_rejects_k_zero(self, instances):
        with pytest.raises(RejectedInputError):
            eval_avg_at_k(None, instances, 0, 0.6, np.random.default_rng(0))


class TestViewScaling:
    def test_configs(self, tiny_config):
        assert scaling_config(tiny_config, 1).method == "opsd"
        assert scaling_config(tiny_config, 1).views_used == ("full_solution",)
        four = scaling_config(tiny_config, 4)
        assert four.views_used == ("full_solution", "partial_solution", "final_answer",
                                   "own_attempt_plus_reference")
        assert dataclasses.replace(four, views_used=tiny_config.views_used, method="avsd") == tiny_config

    def test_table(self, tiny_config):
        cfg = dataclasses.replace(tiny_config, steps=2, eval_every=1, eval_k=1, eval_instances=2)
        table = scale_views_experiment(cfg, (1, 2))
        assert list(table["view_count"]) == [1, 2]
        assert list(table["method"]) == ["opsd", "avsd"]
        assert {"avg@1 step 1", "avg@1 step 2"} <= set(table.columns)


@pytest.mark.slow
class TestDeskScale:
    def test_acceptance_run(self):
        root = os.path.join(os.path.dirname(__file__), "..", "configs", "acceptance.cfg")
        scores = []
        for seed in (0, 1, 2):
            cfg = load_config(root, seed=seed)
            if seed == 0:
                fresh = initial_params(dataclasses.replace(cfg, warmup_steps=0))
                baseline = eval_avg_at_k(fresh, gen_instances(cfg.task, 200, stream=STREAM_EVAL_DATA, seed=seed), 8,
                                         cfg.eval_temperature, np.random.default_rng(0), cfg.max_len)
                assert baseline <= 1 / 7 + 0.05
            _, _, logs = train_run(cfg)
            assert all(np.isfinite(l.mean_loss) for l in logs)
            scores.append(logs[-1].eval_accuracy)
        assert np.mean(scores) >= 0.90
