"""
Synthetic modular-arithmetic tasks with privileged views.

A problem is a left-to-right chain a1 op a2 op ... an (mod m). The privileged
information is its worked solution, exposed to the teacher through several
views: the full solution, a partial solution (the first steps only), the final
answer, and the student's own attempt followed by the full solution.
"""
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from utils.config import VIEW_KINDS, TaskConfig
from utils.errors import RejectedInputError
from utils.init import STREAM_TASK, spawn_rng
from utils.toy_lm import BOS, END, Rollout

EQ = 2
STEP = 3
SEP = 4
OPERATOR_TOKENS = {"add": 5, "sub": 6, "mul": 7}
VIEW_MARKERS = {
    "full_solution": 8,
    "partial_solution": 9,
    "final_answer": 10,
    "own_attempt_plus_reference": 11,
}
DIGIT_BASE = 12

OWN_ATTEMPT = "own_attempt_plus_reference"
STATIC_VIEWS = ("full_solution", "partial_solution", "final_answer")

_APPLY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
}


def digit(value):
    return DIGIT_BASE + int(value)


@dataclass(frozen=True)
class TaskInstance:
    id: int
    modulus: int
    problem_tokens: Tuple[int, ...]
    answer_tokens: Tuple[int, ...]
    chain: Tuple[int, ...]
    views: Tuple[Tuple[str, Tuple[int, ...]], ...]

    @property
    def vocab_size(self):
        return DIGIT_BASE + self.modulus

    def view_body(self, kind):
        for name, body in self.views:
            if name == kind:
                return body
        raise RejectedInputError(f"instance {self.id} has no {kind} view")


def evaluate_chain(operands, operators, modulus):
    """Left-to-right chain values c1 = a1, ck = c(k-1) op ak (mod m)"""
    chain = [int(operands[0]) % modulus]
    for op, value in zip(operators, operands[1:]):
        chain.append(_APPLY[op](chain[-1], int(value)) % modulus)
    return chain


def _render_steps(operands, operators, chain):
    steps = [[digit(chain[0])]]
    for k in range(1, len(chain)):
        steps.append([digit(chain[k - 1]), OPERATOR_TOKENS[operators[k - 1]],
                      digit(operands[k]), EQ, digit(chain[k])])
    return steps


def _join_steps(steps):
    tokens = []
    for i, step in enumerate(steps):
        if i:
            tokens.append(STEP)
        tokens.extend(step)
    return tokens


def partial_step_count(n_steps, fraction):
    """Number of leading steps the partial view keeps, always a strict prefix"""
    return int(min(max(np.floor(n_steps * fraction), 1), n_steps - 1))


def build_instance(index, operands, operators, cfg: TaskConfig):
    chain = evaluate_chain(operands, operators, cfg.modulus)
    problem = [BOS, digit(operands[0])]
    for op, value in zip(operators, operands[1:]):
        problem.extend([OPERATOR_TOKENS[op], digit(value)])
    problem.append(EQ)

    answer = [digit(chain[-1])]
    steps = _render_steps(operands, operators, chain)
    full = _join_steps(steps) + [EQ] + answer
    partial = _join_steps(steps[:partial_step_count(len(steps), cfg.partial_fraction)])
    views = (
        ("full_solution", tuple(full)),
        ("partial_solution", tuple(partial)),
        ("final_answer", tuple(answer)),
    )
    return TaskInstance(
        id=int(index),
        modulus=cfg.modulus,
        problem_tokens=tuple(problem),
        answer_tokens=tuple(answer),
        chain=tuple(chain),
        views=views,
    )


def gen_instance(cfg: TaskConfig, rng, index=0):
    """Sample operands and operators, then render the problem and its views"""
    operands = rng.integers(0, cfg.modulus, size=cfg.chain_length)
    operators = [str(op) for op in rng.choice(list(cfg.operators), size=cfg.chain_length - 1)]
    return build_instance(index, operands, operators, cfg)


def gen_instances(cfg: TaskConfig, count, stream=STREAM_TASK, start=0, seed=None):
    """
    Generate a reproducible list of instances.

    Instance i draws from its own generator derived from (seed, stream, i), so
    any slice can be regenerated independently.
    """
    seed = cfg.seed if seed is None else seed
    return [gen_instance(cfg, spawn_rng(seed, stream, i), index=i) for i in range(start, start + count)]


def student_prompt(instance: TaskInstance):
    return list(instance.problem_tokens)


def render_views(instance: TaskInstance, which: Sequence[str], student_rollout=None):
    """
    Teacher contexts, one per requested view, in request order.

    Each context is [marker] ++ body ++ [SEP] and is placed before the problem in
    the teacher prefix. The own-attempt view needs the student's rollout.
    """
    contexts = []
    for kind in which:
        if kind not in VIEW_KINDS:
            raise RejectedInputError(f"unknown view kind {kind!r}")
        if kind == OWN_ATTEMPT:
            if student_rollout is None:
                raise RejectedInputError("the own-attempt view needs a student rollout")
            body = list(student_rollout.generated) + [STEP] + list(instance.view_body("full_solution"))
        else:
            body = list(instance.view_body(kind))
        contexts.append([VIEW_MARKERS[kind]] + body + [SEP])
    return contexts


def extract_answer(tokens):
    """Tokens between the last EQ and the first END after it, or None"""
    tokens = list(tokens)
    if END not in tokens:
        return None
    end = tokens.index(END)
    head = tokens[:end]
    if EQ not in head:
        return None
    last_eq = len(head) - 1 - head[::-1].index(EQ)
    return head[last_eq + 1:]


def verify(instance: TaskInstance, rollout):
    """True iff the rollout ends its answer with END and the answer matches"""
    if not rollout.generated or END not in rollout.generated:
        return False
    answer = extract_answer(list(rollout.prompt) + list(rollout.generated))
    return answer is not None and tuple(answer) == tuple(instance.answer_tokens)


@dataclass(frozen=True)
class WarmupSequence:
    context: List[int]
    prompt: List[int]
    targets: List[int]

    def examples(self):
        """(prefix, next token) pairs covering every target"""
        prefix = self.context + self.prompt
        pairs = []
        for token in self.targets:
            pairs.append((list(prefix), token))
            prefix = prefix + [token]
        return pairs


def warmup_sequence(cfg: TaskConfig, rng, kind):
    """
    A context-reading example: a view from one random instance, the problem of
    another, and the first instance's answer as the target.

    The problem never predicts the target, so training on these sequences
    teaches the model to read views without teaching it the task.
    """
    source = gen_instance(cfg, rng)
    distractor = gen_instance(cfg, rng)
    attempt = None
    if kind == OWN_ATTEMPT:
        attempt = Rollout(prompt=[], generated=[digit(rng.integers(0, cfg.modulus)), END])
    context = render_views(source, [kind], attempt)[0]
    return WarmupSequence(context=context, prompt=student_prompt(distractor),
                          targets=list(source.answer_tokens) + [END])


def instance_to_record(instance: TaskInstance) -> Dict:
    return {
        "id": instance.id,
        "problem": list(instance.problem_tokens),
        "answer": list(instance.answer_tokens),
        "chain": list(instance.chain),
        "views": [{"kind": kind, "tokens": list(body)} for kind, body in instance.views],
        "modulus": instance.modulus,
        "vocab_size": instance.vocab_size,
    }


def instance_from_record(record: Dict) -> TaskInstance:
    try:
        return TaskInstance(
            id=int(record["id"]),
            modulus=int(record["modulus"]),
            problem_tokens=tuple(record["problem"]),
            answer_tokens=tuple(record["answer"]),
            chain=tuple(record["chain"]),
            views=tuple((v["kind"], tuple(v["tokens"])) for v in record["views"]),
        )
    except (KeyError, TypeError) as e:
        raise RejectedInputError(f"malformed dataset record: {e}") from None
