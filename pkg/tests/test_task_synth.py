import numpy as np
import pytest

from utils.config import TaskConfig
from utils.errors import RejectedInputError
from utils.task_synth import (DIGIT_BASE, END, EQ, OWN_ATTEMPT, SEP, STEP, VIEW_MARKERS, build_instance,
                              digit, extract_answer, gen_instance, gen_instances, instance_from_record,
                              instance_to_record, partial_step_count, render_views, student_prompt,
                              verify, warmup_sequence)
from utils.toy_lm import BOS, Rollout


def split_steps(tokens):
    steps, current = [], []
    for token in tokens:
        if token == STEP:
            steps.append(current)
            current = []
        else:
            current.append(token)
    steps.append(current)
    return steps


class TestGeneration:
    def test_modular_answer(self):
        cfg = TaskConfig(modulus=7, chain_length=2, operators=("add",))
        instance = build_instance(0, [3, 5], ["add"], cfg)
        assert instance.answer_tokens == (digit(1),)
        assert instance.problem_tokens == (BOS, digit(3), 5, digit(5), EQ)

    def test_partial_keeps_one_of_two_steps(self):
        cfg = TaskConfig(modulus=7, chain_length=2, partial_fraction=0.5)
        instance = build_instance(0, [3, 5], ["add"], cfg)
        assert len(split_steps(instance.view_body("partial_solution"))) == 1

    @pytest.mark.parametrize("n_steps, fraction, expected", [(2, 0.5, 1), (3, 0.5, 1), (4, 0.5, 2),
                                                             (3, 0.01, 1), (3, 0.99, 2)])
    def test_partial_step_count(self, n_steps, fraction, expected):
        assert partial_step_count(n_steps, fraction) == expected

    def test_seeded(self):
        cfg = TaskConfig(seed=3)
        assert gen_instances(cfg, 5) == gen_instances(cfg, 5)
        assert gen_instances(cfg, 3, start=2)[0] == gen_instances(cfg, 5)[2]

    def test_chain_matches_brute_force(self):
        cfg = TaskConfig(modulus=11, chain_length=4, operators=("add", "sub", "mul"))
        ops = {5: lambda a, b: a + b, 6: lambda a, b: a - b, 7: lambda a, b: a * b}
        for instance in gen_instances(cfg, 10000):
            tokens = instance.problem_tokens[1:-1]
            value = tokens[0] - DIGIT_BASE
            for op, operand in zip(tokens[1::2], tokens[2::2]):
                value = ops[op](value, operand - DIGIT_BASE) % 11
            assert instance.answer_tokens == (digit(value),)
            assert instance.chain[-1] == value

    def test_vocabulary_is_closed(self):
        cfg = TaskConfig(modulus=5, chain_length=3, operators=("add", "mul"))
        for instance in gen_instances(cfg, 200):
            tokens = list(instance.problem_tokens)
            for context in render_views(instance, ["full_solution", "partial_solution", "final_answer"]):
                tokens.extend(context)
            assert max(tokens) < instance.vocab_size


class TestViews:
    @pytest.fixture
    def instance(self):
        return gen_instance(TaskConfig(modulus=7, chain_length=3), np.random.default_rng(4))

    def test_wrapping(self, instance):
        answer, = render_views(instance, ["final_answer"])
        assert answer == [VIEW_MARKERS["final_answer"], *instance.answer_tokens, SEP]

    def test_full_solution_holds_every_step_and_answer(self, instance):
        body = list(instance.view_body("full_solution"))
        assert body[-2:] == [EQ, *instance.answer_tokens]
        steps = split_steps(body[:-2])
        assert len(steps) == len(instance.chain)
        assert [s[-1] - DIGIT_BASE for s in steps] == list(instance.chain)

    def test_partial_is_strict_prefix(self):
        for instance in gen_instances(TaskConfig(chain_length=4, partial_fraction=0.5), 1000):
            full = split_steps(list(instance.view_body("full_solution"))[:-2])
            partial = split_steps(list(instance.view_body("partial_solution")))
            assert 1 <= len(partial) < len(full)
            assert partial == full[:len(partial)]

    def test_own_attempt_needs_rollout(self, instance):
        with pytest.raises(RejectedInputError):
            render_views(instance, [OWN_ATTEMPT])

    def test_own_attempt_body(self, instance):
        rollout = Rollout(prompt=student_prompt(instance), generated=[digit(2), END])
        context, = render_views(instance, [OWN_ATTEMPT], rollout)
        full = list(instance.view_body("full_solution"))
        assert context == [VIEW_MARKERS[OWN_ATTEMPT], digit(2), END, STEP, *full, SEP]

    def test_unknown_view(self, instance):
        with pytest.raises(RejectedInputError):
            render_views(instance, ["hint"])

    def test_prompt_has_no_view_tokens(self):
        for instance in gen_instances(TaskConfig(), 200):
            assert not set(student_prompt(instance)) & set(VIEW_MARKERS.values())


class TestVerify:
    @pytest.fixture
    def instance(self):
        return build_instance(0, [3, 5], ["add"], TaskConfig(modulus=7, chain_length=2))

    def test_correct(self, instance):
        rollout = Rollout(prompt=student_prompt(instance), generated=[digit(1), END])
        assert verify(instance, rollout)

    def test_empty(self, instance):
        assert not verify(instance, Rollout(prompt=student_prompt(instance), generated=[]))

    def test_missing_terminator(self, instance):
        rollout = Rollout(prompt=student_prompt(instance), generated=[digit(1), digit(1)])
        assert not verify(instance, rollout)

    def test_wrong_value(self, instance):
        rollout = Rollout(prompt=student_prompt(instance), generated=[digit(2), END])
        assert not verify(instance, rollout)

    def test_answer_after_a_written_step(self, instance):
        generated = [digit(3), 5, digit(5), EQ, digit(1), END]
        assert verify(instance, Rollout(prompt=student_prompt(instance), generated=generated))

    def test_extract_answer(self):
        assert extract_answer([EQ, digit(4), END, digit(6)]) == [digit(4)]
        assert extract_answer([digit(4), END]) is None


class TestWarmup:
    def test_target_comes_from_the_view(self):
        cfg = TaskConfig(modulus=7, chain_length=3)
        sequence = warmup_sequence(cfg, np.random.default_rng(0), "final_answer")
        assert sequence.context[0] == VIEW_MARKERS["final_answer"]
        assert sequence.targets == [sequence.context[1], END]
        pairs = sequence.examples()
        assert pairs[0][0] == sequence.context + sequence.prompt
        assert pairs[1][0] == pairs[0][0] + [pairs[0][1]]

    def test_own_attempt_kind(self):
        sequence = warmup_sequence(TaskConfig(), np.random.default_rng(1), OWN_ATTEMPT)
        assert sequence.context[0] == VIEW_MARKERS[OWN_ATTEMPT]


class TestRecords:
    def test_record_fields(self):
        instance = gen_instance(TaskConfig(), np.random.default_rng(2), index=9)
        record = instance_to_record(instance)
        assert record["id"] == 9
        assert record["vocab_size"] == 19
        assert [v["kind"] for v in record["views"]] == ["full_solution", "partial_solution", "final_answer"]
        assert instance_from_record(record) == instance

    def test_malformed(self):
        with pytest.raises(RejectedInputError):
            instance_from_record({"id": 1})
