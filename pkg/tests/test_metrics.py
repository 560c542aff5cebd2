from __future__ import annotations

import random
import statistics

from evoplan.service.metrics import ExtraTokensResult, RunSummary, extra_tokens


def summary(backbone, task_id, goal, billed):
    return RunSummary(backbone=backbone, task_id=task_id, goal_score=goal, billed_tokens=billed)


def brute_force(method, baseline, threshold):
    """Flat re-derivation: sort-based medians, no shared code with the unit."""
    by_backbone = {}
    for m in method:
        if m.goal_score is None or m.goal_score < threshold:
            continue
        match = [b for b in baseline if b.backbone == m.backbone and b.task_id == m.task_id]
        if not match:
            continue
        by_backbone.setdefault(m.backbone, []).append(m.billed_tokens - match[0].billed_tokens)

    def median(xs):
        xs = sorted(xs)
        mid = len(xs) // 2
        return float(xs[mid]) if len(xs) % 2 else (xs[mid - 1] + xs[mid]) / 2.0

    per = {k: median(v) for k, v in by_backbone.items()}
    return per, (median(list(per.values())) if per else None)


class TestExtraTokens:
    def test_worked_example_median_of_medians(self):
        # extras A: [1, 5, 3] -> 3; B: [2, 2] -> 2; C: [10] -> 10; aggregate 3
        method, baseline = [], []
        for backbone, extras in [("A", [1, 5, 3]), ("B", [2, 2]), ("C", [10])]:
            for i, extra in enumerate(extras):
                task_id = f"{backbone}-{i}"
                baseline.append(summary(backbone, task_id, 1.0, 1000))
                method.append(summary(backbone, task_id, 1.0, 1000 + extra))
        result = extra_tokens(method, baseline)
        assert result.per_backbone == {"A": 3, "B": 2, "C": 10}
        assert result.aggregate == 3

    def test_single_backbone_single_case(self):
        result = extra_tokens(
            [summary("A", "t", 0.9, 500)], [summary("A", "t", 0.1, 480)]
        )
        assert result.per_backbone == {"A": 20}
        assert result.aggregate == 20

    def test_method_cheaper_gives_negative_aggregate(self):
        result = extra_tokens(
            [summary("A", "t", 1.0, 300)], [summary("A", "t", 1.0, 480)]
        )
        assert result.aggregate == -180

    def test_unsolved_cases_excluded(self):
        method = [summary("A", "t1", 0.69, 999), summary("A", "t2", 0.7, 510)]
        baseline = [summary("A", "t1", 1.0, 100), summary("A", "t2", 1.0, 500)]
        result = extra_tokens(method, baseline, solved_threshold=0.7)
        assert result.per_backbone == {"A": 10}  # 0.69 misses the threshold
        assert result.matched_cases == 1

    def test_unmatched_task_ids_excluded(self):
        result = extra_tokens([summary("A", "t1", 1.0, 100)], [summary("A", "other", 1.0, 50)])
        assert result.per_backbone == {}
        assert result.aggregate is None

    def test_no_matches_is_empty_not_error(self):
        result = extra_tokens([], [])
        assert result == ExtraTokensResult(per_backbone={}, aggregate=None, matched_cases=0)

    def test_randomized_oracle_equivalence(self):
        rng = random.Random(991)
        for _ in range(300):
            backbones = [f"b{i}" for i in range(rng.randint(1, 5))]
            n_cases = rng.randint(0, 100)
            method, baseline = [], []
            for i in range(n_cases):
                backbone = rng.choice(backbones)
                task_id = f"t{i}"
                goal = rng.choice([0.0, 0.5, 0.69, 0.7, 0.9, 1.0])
                m_billed = rng.randint(0, 5000)
                b_billed = rng.randint(0, 5000)
                method.append(summary(backbone, task_id, goal, m_billed))
                if rng.random() > 0.1:  # some cases lack a baseline match
                    baseline.append(summary(backbone, task_id, 1.0, b_billed))
            result = extra_tokens(method, baseline, solved_threshold=0.7)
            per, aggregate = brute_force(method, baseline, 0.7)
            assert result.per_backbone == per
            assert result.aggregate == aggregate

    def test_median_definition_matches_statistics_module(self):
        assert statistics.median([1, 5, 3]) == 3
        assert statistics.median([3, 2, 10]) == 3
