"""Tabular softmax policy over per-question decision nodes.

Three node families per question:
  * think node: chooses NO_TOOL (action 0) or one of m tool intents (1..m)
  * call nodes: per (intent, call step), choose one of v call-argument ids;
    the first argument id is the tool-call variant the environment grades
  * answer node: chooses an answer id

Exact probabilities, exact KL, and bit-exact text checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .trajectory import NotToolUsing, Prefix, Segment, Trajectory

NO_TOOL = 0  # think-node action id for answering without a tool


@dataclass(frozen=True)
class PolicyShape:
    num_questions: int
    num_intents: int
    call_steps: int
    num_variants: int
    num_answers: int

    @property
    def tool_open_id(self) -> int:
        """Reserved action id for the tool-call opening marker."""
        return self.num_intents + 1


# Decision contexts: hashable handles naming one softmax node.
#   ("think", q)  |  ("call", q, intent, j)  |  ("answer", q)
Context = tuple


class TabularPolicy:
    """Per-question logits; probabilities are softmax(logits / temperature)."""

    def __init__(
        self,
        shape: PolicyShape,
        think_logits: np.ndarray,
        call_logits: np.ndarray,
        answer_logits: np.ndarray,
        temperature: float = 1.0,
    ):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        s = shape
        assert think_logits.shape == (s.num_questions, 1 + s.num_intents)
        assert call_logits.shape == (s.num_questions, s.num_intents, s.call_steps, s.num_variants)
        assert answer_logits.shape == (s.num_questions, s.num_answers)
        self.shape = shape
        self.think_logits = np.asarray(think_logits, dtype=np.float64)
        self.call_logits = np.asarray(call_logits, dtype=np.float64)
        self.answer_logits = np.asarray(answer_logits, dtype=np.float64)
        self.temperature = float(temperature)

    @classmethod
    def zeros(cls, shape: PolicyShape, temperature: float = 1.0) -> "TabularPolicy":
        s = shape
        return cls(
            shape,
            np.zeros((s.num_questions, 1 + s.num_intents)),
            np.zeros((s.num_questions, s.num_intents, s.call_steps, s.num_variants)),
            np.zeros((s.num_questions, s.num_answers)),
            temperature=temperature,
        )

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(
            self.shape,
            self.think_logits.copy(),
            self.call_logits.copy(),
            self.answer_logits.copy(),
            self.temperature,
        )

    # -- probabilities --------------------------------------------------

    def _logits(self, ctx: Context) -> np.ndarray:
        kind = ctx[0]
        if kind == "think":
            return self.think_logits[ctx[1]]
        if kind == "call":
            _, q, intent, j = ctx
            return self.call_logits[q, intent, j]
        if kind == "answer":
            return self.answer_logits[ctx[1]]
        raise KeyError(f"unknown decision context {ctx!r}")

    def probs(self, ctx: Context) -> np.ndarray:
        return softmax(self._logits(ctx) / self.temperature)

    def logp(self, ctx: Context, action: int) -> float:
        z = self._logits(ctx) / self.temperature
        z = z - np.max(z)
        return float(z[action] - np.log(np.sum(np.exp(z))))

    def tool_attempt_prob(self, question_id: int) -> float:
        """Total think-node mass on tool intents."""
        return float(1.0 - self.probs(("think", question_id))[NO_TOOL])


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def exact_kl(policy: TabularPolicy, ref_policy: TabularPolicy, ctx: Context) -> float:
    """Exact discrete KL(policy || ref_policy) at one decision node."""
    p = policy.probs(ctx)
    q = ref_policy.probs(ctx)
    return float(np.sum(p * (np.log(p) - np.log(q))))


def confidence(traj: Trajectory, prefix: Prefix) -> float:
    """Mean policy probability over the argument steps of the first tool call.

    The opening marker step (the prefix's last step) is excluded.
    """
    if not traj.is_tool_using():
        raise NotToolUsing("confidence is defined only for tool-using rollouts")
    if traj.steps[prefix.cut_index].segment is not Segment.TOOL_CALL:
        raise ValueError("prefix cut does not sit at a tool-call opening")
    probs = []
    for s in traj.steps[prefix.cut_index + 1 :]:
        if s.segment is not Segment.TOOL_CALL:
            break
        probs.append(np.exp(s.logp_old))
    if not probs:
        raise ValueError("first tool call has no argument steps")
    return float(np.mean(probs))


def decision_contexts(traj: Trajectory) -> list[Optional[tuple[Context, int]]]:
    """Per-step (context, action) pairs; None for observation and marker steps.

    The opening marker is deterministic given the think step's intent choice,
    so it has no decision node. Contexts are derived structurally: the think
    step fixes the intent, tool-call argument steps index call nodes in run
    order, and the answer step maps to the answer node.
    """
    q = traj.question_id
    out: list[Optional[tuple[Context, int]]] = []
    intent: Optional[int] = None
    call_j = -1  # -1 while at the opening marker of a call run
    prev_seg: Optional[Segment] = None
    for s in traj.steps:
        if s.segment is Segment.THINK:
            out.append((("think", q), s.action_id))
            intent = s.action_id - 1 if s.action_id != NO_TOOL else None
        elif s.segment is Segment.TOOL_CALL:
            if prev_seg is not Segment.TOOL_CALL:
                call_j = -1
                out.append(None)  # opening marker
            else:
                call_j += 1
                if intent is None:
                    raise ValueError("tool call without a tool-intent think step")
                out.append((("call", q, intent, call_j), s.action_id))
        elif s.segment is Segment.OBSERVATION:
            out.append(None)
        else:  # ANSWER
            out.append((("answer", q), s.action_id))
        prev_seg = s.segment
    return out


# -- checkpoints --------------------------------------------------------
#
# Binary-free structured text (JSON); floats round-trip bit-exactly.


def save_policy(policy: TabularPolicy, path: Path, step: int = 0) -> None:
    s = policy.shape
    obj = {
        "step": step,
        "shape": {
            "num_questions": s.num_questions,
            "num_intents": s.num_intents,
            "call_steps": s.call_steps,
            "num_variants": s.num_variants,
            "num_answers": s.num_answers,
        },
        "temperature": policy.temperature,
        "think_logits": policy.think_logits.tolist(),
        "call_logits": policy.call_logits.tolist(),
        "answer_logits": policy.answer_logits.tolist(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj), encoding="utf-8")
    tmp.replace(path)


def load_policy(path: Path) -> tuple[TabularPolicy, int]:
    obj = json.loads(path.read_text(encoding="utf-8"))
    shape = PolicyShape(**obj["shape"])
    policy = TabularPolicy(
        shape,
        np.array(obj["think_logits"], dtype=np.float64),
        np.array(obj["call_logits"], dtype=np.float64),
        np.array(obj["answer_logits"], dtype=np.float64),
        temperature=obj["temperature"],
    )
    return policy, int(obj["step"])
