"""Shared builders for hand-constructed trajectories and controlled envs."""

from __future__ import annotations

import math

import numpy as np
import pytest

from axpo.env import EnvSpec, ToolEnv
from axpo.trajectory import Group, Segment, Step, Trajectory

# Reserved opening-marker id for hand-built trajectories (tests that never
# touch a policy don't care about the actual id).
MARKER = 9


def think_step(action: int = 0, p: float = 0.5) -> Step:
    return Step(action, Segment.THINK, logp_old=math.log(p))


def marker_step(action: int = MARKER) -> Step:
    return Step(action, Segment.TOOL_CALL, logp_old=0.0, mask=False)


def arg_step(action: int = 0, p: float = 0.5) -> Step:
    return Step(action, Segment.TOOL_CALL, logp_old=math.log(p))


def obs_step(action: int = 0) -> Step:
    return Step(action, Segment.OBSERVATION, logp_old=None, mask=False)


def answer_step(action: int = 0, p: float = 0.5) -> Step:
    return Step(action, Segment.ANSWER, logp_old=math.log(p))


def plain_traj(qid: int = 0, reward: int = 0, **meta) -> Trajectory:
    return Trajectory(
        question_id=qid, steps=(think_step(), answer_step()), reward=reward, turn_count=1, **meta
    )


def tool_traj(
    qid: int = 0,
    reward: int = 0,
    think_action: int = 1,
    args: tuple[tuple[int, float], ...] = ((0, 0.5),),
    answer: int = 0,
    **meta,
) -> Trajectory:
    """Single-call trajectory; args are (action_id, sampling probability)."""
    steps = [think_step(think_action), marker_step()]
    steps.extend(arg_step(a, p) for a, p in args)
    steps.append(obs_step(args[0][0]))
    steps.append(answer_step(answer))
    return Trajectory(question_id=qid, steps=tuple(steps), reward=reward, turn_count=1, **meta)


def group_of(*trajs: Trajectory) -> Group:
    return Group(question_id=trajs[0].question_id, rollouts=tuple(trajs))


@pytest.fixture
def mini_env() -> ToolEnv:
    return ToolEnv(
        EnvSpec(
            num_questions=4,
            tool_necessary_fraction=0.5,
            intents_per_question=2,
            variants_per_intent=3,
            seed=7,
        )
    )


def one_hot_policy(policy, ctx, action, logit: float = 500.0):
    """Concentrate a decision node's mass on one action (in place)."""
    if ctx[0] == "think":
        row = policy.think_logits[ctx[1]]
    elif ctx[0] == "call":
        _, q, intent, j = ctx
        row = policy.call_logits[q, intent, j]
    else:
        row = policy.answer_logits[ctx[1]]
    row[:] = 0.0
    row[action] = logit
    return policy


def rng(*key) -> np.random.Generator:
    return np.random.default_rng(key if key else 0)
