import math

import pytest

from axpo.diagnostics import (
    InsufficientRollouts,
    StepMetrics,
    all_wrong_rate,
    cluster_count,
    compute_step_metrics,
    first_call_sequence,
    group_by_question,
    metrics_row,
    parse_metrics_csv,
    pass_at_k,
    post_resampling_all_wrong_tool,
    read_audit_log,
    recovery_rate,
    tool_use_rate,
    write_audit_records,
)
from axpo.env import make_env, sample_continuation, sample_rollout
from axpo.trajectory import first_tool_prefix

from conftest import plain_traj, rng, tool_traj


def groups_from(spec: dict) -> dict:
    """spec: question -> list of (is_tool, reward)."""
    out = {}
    for q, rollouts in spec.items():
        out[q] = [
            tool_traj(qid=q, reward=rw) if is_tool else plain_traj(qid=q, reward=rw)
            for is_tool, rw in rollouts
        ]
    return out


class TestToolUseRate:
    def test_no_tools(self):
        groups = groups_from({0: [(False, 0)] * 4, 1: [(False, 1)] * 4})
        rate, hist = tool_use_rate(groups)
        assert rate == 0.0
        assert hist == [2, 0, 0, 0, 0]

    def test_all_tools(self):
        groups = groups_from({0: [(True, 0)] * 3})
        rate, hist = tool_use_rate(groups)
        assert rate == 1.0
        assert hist == [0, 0, 0, 1]

    def test_two_of_eight_in_each_group(self):
        spec = {q: [(True, 0)] * 2 + [(False, 0)] * 6 for q in range(8)}
        rate, hist = tool_use_rate(groups_from(spec))
        assert rate == 0.25
        assert hist == [0, 0, 8, 0, 0, 0, 0, 0, 0]

    def test_resamples_excluded_from_grouping(self):
        trajs = [plain_traj(qid=0), tool_traj(qid=0, is_resample=True)]
        groups = group_by_question(trajs)
        assert len(groups[0]) == 1


class TestAllWrongRate:
    def test_all_correct(self):
        groups = groups_from({0: [(True, 1), (False, 1)]})
        assert all_wrong_rate(groups) == (0.0, 0.0)

    def test_all_wrong(self):
        groups = groups_from({0: [(True, 0), (False, 0)], 1: [(True, 0), (False, 0)]})
        assert all_wrong_rate(groups) == (1.0, 1.0)

    def test_four_of_ten(self):
        spec = {}
        for q in range(10):
            wrong = q < 4
            spec[q] = [(True, 0 if wrong else 1), (True, 0), (False, 1)]
        tool, _ = all_wrong_rate(groups_from(spec))
        assert tool == 0.4

    def test_absent_when_subgroup_missing(self):
        groups = groups_from({0: [(False, 1)] * 2})
        tool, no_tool = all_wrong_rate(groups)
        assert tool is None and no_tool == 0.0

    def test_post_resampling_excludes_recovered(self):
        spec = {q: [(True, 0), (True, 0)] for q in range(4)}
        groups = groups_from(spec)
        assert post_resampling_all_wrong_tool(groups, set()) == 1.0
        assert post_resampling_all_wrong_tool(groups, {0, 2}) == 0.5
        pre = all_wrong_rate(groups)[0]
        assert post_resampling_all_wrong_tool(groups, {1}) <= pre


class TestRecoveryRate:
    def test_absent_without_triggers(self):
        assert recovery_rate([]) is None

    def test_every_selected_recovers(self):
        records = [
            {"step": 1, "question_id": q, "source_index": 0, "rewards": [1, 0], "recovery": 1}
            for q in range(5)
        ]
        assert recovery_rate(records) == 1.0

    def test_fifty_triggered_six_recovered(self):
        records = []
        for q in range(50):
            rec = 1 if q < 6 else 0
            records.append(
                {"step": 1, "question_id": q, "source_index": 0, "rewards": [rec], "recovery": rec}
            )
        assert recovery_rate(records) == pytest.approx(0.12, abs=1e-15)

    def test_null_records_count_as_triggered(self):
        records = [
            {"step": 1, "question_id": 0, "source_index": None, "rewards": [], "recovery": None},
            {"step": 1, "question_id": 1, "source_index": 0, "rewards": [1], "recovery": 1},
        ]
        assert recovery_rate(records) == 0.5


class TestPassAtK:
    def test_single_question(self):
        assert pass_at_k({0: [1, 0, 0, 0]}, 1) == 0.25
        assert pass_at_k({0: [1, 0, 0, 0]}, 4) == 1.0

    def test_all_zero(self):
        rewards = {q: [0, 0, 0, 0] for q in range(3)}
        assert pass_at_k(rewards, 1) == 0.0
        assert pass_at_k(rewards, 4) == 0.0

    def test_binomial_pass_at_four(self):
        r = rng(60)
        rewards = {q: list(r.integers(0, 2, size=4)) for q in range(1_000)}
        expected = 1 - 0.5**4
        se = math.sqrt(expected * (1 - expected) / 1_000)
        assert abs(pass_at_k(rewards, 4) - expected) < 3 * se

    def test_insufficient_rollouts(self):
        with pytest.raises(InsufficientRollouts):
            pass_at_k({0: [1, 0]}, 4)
        with pytest.raises(InsufficientRollouts):
            pass_at_k({}, 1)

    def test_pass1_never_exceeds_pass4(self):
        r = rng(61)
        for _ in range(50):
            rewards = {q: list(r.integers(0, 2, size=4)) for q in range(20)}
            assert pass_at_k(rewards, 1) <= pass_at_k(rewards, 4)


class TestClusterCount:
    def test_identical_calls(self):
        assert cluster_count([(1, 2)] * 16) == 1

    def test_three_distinct(self):
        assert cluster_count([(0,), (0,), (1,), (2,)]) == 3

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            cluster_count([])

    def test_gap_env_resamples_diverge(self):
        env = make_env("gap-env", seed=9)
        policy = env.initial_policy()
        r = rng(62)
        counts = []
        attempts = 0
        while len(counts) < 100 and attempts < 10_000:
            attempts += 1
            traj = sample_rollout(policy, env, int(r.integers(0, env.num_questions)), r)
            if not traj.is_tool_using():
                continue
            prefix = first_tool_prefix(traj)
            calls = [
                first_call_sequence(sample_continuation(policy, env, prefix, r))
                for _ in range(16)
            ]
            counts.append(cluster_count(calls))
        assert sum(counts) / len(counts) > 1.0


class TestMetricsIO:
    def test_audit_log_round_trip(self, tmp_path):
        records = [
            {"step": 3, "question_id": 1, "source_index": 0, "confidence": 0.25,
             "rewards": [0, 1, 0, 0], "recovery": 1},
            {"step": 3, "question_id": 2, "source_index": None, "confidence": None,
             "rewards": [], "recovery": None},
        ]
        path = tmp_path / "audit.jsonl"
        with path.open("w") as fh:
            write_audit_records(records, fh)
        assert read_audit_log(path) == {3: records}

    def test_metrics_csv_round_trip(self, tmp_path):
        m = StepMetrics(
            step=4, tool_use_rate=0.375, all_wrong_tool=None, all_wrong_no_tool=0.2,
            recovery_rate=1 / 3, mean_reward=0.5, pass1_eval=None, pass4_eval=None,
            extra_continuations=8,
        )
        path = tmp_path / "metrics.csv"
        path.write_text("step,tool_use_rate,all_wrong_tool,all_wrong_no_tool,recovery_rate,"
                        "mean_reward,pass1_eval,pass4_eval,extra_continuations\n"
                        + metrics_row(m) + "\n")
        (row,) = parse_metrics_csv(path)
        assert row["step"] == 4
        assert row["all_wrong_tool"] is None
        assert row["recovery_rate"] == 1 / 3  # bit-exact via repr round trip
        assert row["extra_continuations"] == 8

    def test_compute_step_metrics_counts(self):
        trajs = [tool_traj(qid=0, reward=0), tool_traj(qid=0, reward=0),
                 plain_traj(qid=1, reward=1), plain_traj(qid=1, reward=0)]
        audit = [{"step": 1, "question_id": 0, "source_index": 0, "confidence": 0.5,
                  "rewards": [0, 1, 0, 0], "recovery": 1}]
        m = compute_step_metrics(1, trajs, audit)
        assert m.tool_use_rate == 0.5
        assert m.all_wrong_tool == 0.0  # question 0 recovered
        assert m.all_wrong_no_tool == 0.0
        assert m.recovery_rate == 1.0
        assert m.mean_reward == 0.25
        assert m.extra_continuations == 4
