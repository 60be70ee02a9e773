import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcan.evaluation import (
    Candidate,
    MetricsReport,
    QueryGroup,
    average_precision,
    group_scores,
    mean_metrics,
    precision_at_1,
    rank,
    recall_at,
    reciprocal_rank,
)


def group(labels, scores, qid="q"):
    return QueryGroup(qid, tuple(Candidate(str(i), l, s) for i, (l, s) in enumerate(zip(labels, scores))))


class TestRank:
    def test_descending(self):
        assert [c.doc_id for c in rank(group([0, 1], [0.1, 0.9]))] == ["1", "0"]

    def test_ties_keep_input_order(self):
        assert [c.doc_id for c in rank(group([0, 1, 0], [0.5, 0.5, 0.5]))] == ["0", "1", "2"]

    def test_singleton(self):
        g = group([1], [0.3])
        assert rank(g) == list(g.candidates)


class TestAveragePrecision:
    def test_first_of_five(self):
        assert average_precision(group([1, 0, 0, 0, 0], [5, 4, 3, 2, 1])) == 1.0

    def test_single_relevant_second(self):
        assert average_precision(group([0, 1, 0], [3, 2, 1])) == 0.5

    def test_two_relevant_ranks_one_and_three(self):
        ap = average_precision(group([1, 0, 1, 0], [4, 3, 2, 1]))
        assert ap == (1 + 2 / 3) / 2
        assert abs(ap - 5 / 6) <= np.spacing(5 / 6)

    def test_no_relevant(self):
        with pytest.raises(ValueError):
            average_precision(group([0, 0], [1, 2]))


class TestMeanMetrics:
    def test_two_group_fixture(self):
        report = mean_metrics([group([1, 0], [2, 1], "a"), group([0, 1, 0], [3, 2, 1], "b")])
        assert report.map == 0.75
        assert report.mrr == 0.75
        assert report.p_at_1 == 0.5
        assert report.recall == {(2, 1): 1.0}

    def test_perfect_ranking(self):
        report = mean_metrics([group([1, 0, 0], [3, 2, 1], str(i)) for i in range(4)])
        assert report.map == report.mrr == report.p_at_1 == 1.0

    def test_recall_restricted_by_group_size(self):
        ten = [group([0] * 4 + [1] + [0] * 5, list(range(10, 0, -1)), "ten")]
        report = mean_metrics(ten + [group([1, 0], [1, 2], "two")])
        assert report.recall == {(2, 1): 0.0, (10, 1): 0.0, (10, 2): 0.0, (10, 5): 1.0}
        assert recall_at(ten[0], 5) == 1.0 and recall_at(ten[0], 4) == 0.0

    def test_groups_without_relevant_are_dropped(self):
        report = mean_metrics([group([1, 0], [2, 1], "a"), group([0, 0], [2, 1], "b")])
        assert (report.evaluated, report.dropped, report.map) == (1, 1, 1.0)

    def test_nothing_to_evaluate(self):
        with pytest.raises(ValueError):
            mean_metrics([group([0], [1.0])])
        with pytest.raises(ValueError):
            mean_metrics([])

    def test_invalid_groups(self):
        with pytest.raises(ValueError):
            group([2], [1.0])
        with pytest.raises(ValueError):
            group([1], [float("nan")])
        with pytest.raises(ValueError):
            QueryGroup("q", ())

    def test_serialization(self):
        report = mean_metrics([group([0, 1, 0], [3, 2, 1], "b")])
        values = MetricsReport.parse_tsv(report.to_tsv())
        assert values["MAP"] == 0.5 and values["evaluated_groups"] == 1
        assert "MAP = 0.5000" in report.to_text()
        assert report["P@1"] == 0.0

    def test_group_scores_bundles_in_order(self):
        groups = group_scores(["b", "a", "b"], ["0", "0", "1"], [1, 0, 0], [0.1, 0.2, 0.3])
        assert [g.query_id for g in groups] == ["b", "a"]
        assert [c.score for c in groups[0].candidates] == [0.1, 0.3]


def random_groups(seed, n=100):
    rng = np.random.default_rng(seed)
    groups = []
    for g in range(n):
        size = int(rng.integers(2, 11))
        labels = rng.integers(0, 2, size=size)
        labels[rng.integers(size)] = 1
        groups.append(group(labels.tolist(), rng.normal(size=size).tolist(), str(g)))
    return groups


def transform(groups, fn):
    return [QueryGroup(g.query_id, tuple(Candidate(c.doc_id, c.label, fn(c.score)) for c in g.candidates)) for g in groups]


class TestInvariance:
    @pytest.mark.parametrize(
        "fn", [lambda s: 3.0 * s - 7.0, lambda s: float(np.exp(s)), lambda s: s**3, lambda s: float(np.arctan(s))]
    )
    def test_monotone_transform(self, fn):
        groups = random_groups(0)
        assert mean_metrics(transform(groups, fn)).as_dict() == mean_metrics(groups).as_dict()

    def test_candidate_permutation(self):
        groups = random_groups(1)
        rng = np.random.default_rng(2)
        shuffled = [QueryGroup(g.query_id, tuple(g.candidates[i] for i in rng.permutation(len(g.candidates)))) for g in groups]
        assert mean_metrics(shuffled).as_dict() == mean_metrics(groups).as_dict()

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.booleans(), st.floats(-100, 100)), min_size=1, max_size=12))
    def test_metrics_in_unit_interval(self, rows):
        rows = [(True, rows[0][1])] + rows[1:]
        g = group([int(l) for l, _ in rows], [s for _, s in rows])
        for value in (average_precision(g), reciprocal_rank(g), precision_at_1(g)):
            assert 0.0 <= value <= 1.0
