import itertools
import json
import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from moemos.dataset import Dataset, Sample
from moemos.metrics import (METRICS, MetricsReport, accuracy, average_ranks, competition_rank, evaluate_model,
                            format_value, kendall_tau_b, pearson, rank_table, rank_table_json, render_rank_table,
                            spearman, system_metrics, utterance_metrics)
from moemos.model import MoeConfig, init_model
from moemos.numkernel import RngState
from moemos.synthgen import SynthConfig, generate_dataset


def test_perfect_prediction():
    r = utterance_metrics([1.0, 2.5, 4.0], [1.0, 2.5, 4.0])
    assert (r.mse, r.lcc, r.srcc, r.ktau, r.n) == (0.0, 1.0, 1.0, 1.0, 3)


def test_examples():
    assert utterance_metrics([1, 2], [2, 4]).mse == 2.5
    r = utterance_metrics([1, 2, 3], [3, 2, 1])
    assert r.lcc == pytest.approx(-1, abs=1e-15) and r.srcc == pytest.approx(-1, abs=1e-15) and r.ktau == -1
    assert spearman([1, 1, 2], [1, 2, 3]) == pytest.approx(1.5 / math.sqrt(3), abs=1e-12)
    assert spearman([1, 1, 2], [1, 2, 3]) == pytest.approx(0.866025, abs=1e-6)
    assert kendall_tau_b([1, 2, 2, 3], [1, 2, 3, 4]) == pytest.approx(5 / math.sqrt(30), abs=1e-15)
    assert kendall_tau_b([1, 2, 2, 3], [1, 2, 3, 4]) == pytest.approx(0.912871, abs=1e-6)


def test_average_ranks():
    assert average_ranks([10, 20, 10, 5]).tolist() == [2.5, 4.0, 2.5, 1.0]


def test_undefined_correlations_are_none():
    r = utterance_metrics([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
    assert r.lcc is None and r.srcc is None and r.ktau is None and r.mse == pytest.approx(2 / 3)
    assert utterance_metrics([1.0, 2.0], [3.0, 3.0]).ktau is None


def test_input_errors():
    with pytest.raises(ValueError):
        utterance_metrics([1.0], [1.0])
    with pytest.raises(ValueError):
        utterance_metrics([1.0, 2.0], [1.0, 2.0, 3.0])


def test_system_examples():
    r = system_metrics([3, 3, 4, 4], [3, 3, 4, 4], ["A", "A", "B", "B"])
    assert r.level == "system" and r.mse == 0 and r.srcc == 1 and r.n == 2
    with pytest.raises(ValueError):
        system_metrics([1, 2], [1, 2], ["A", "A"])


def test_system_means_then_metrics():
    pred, true = [1.0, 3.0, 5.0, 5.0, 2.0], [2.0, 2.0, 4.0, 4.0, 1.0]
    ids = ["b", "b", "a", "a", "c"]
    r = system_metrics(pred, true, ids)
    ref = utterance_metrics([5.0, 2.0, 2.0], [4.0, 2.0, 1.0])
    assert r.to_dict() == {**ref.to_dict(), "level": "system"}


def test_system_mse_below_utterance_mse_monte_carlo():
    rng = np.random.default_rng(11)
    wins = 0
    for _ in range(50):
        sys_true = rng.uniform(1, 5, 8)
        ids = np.repeat(np.arange(8), 25)
        true = sys_true[ids] + rng.normal(0, 0.3, ids.size)
        pred = true + rng.normal(0, 0.5, ids.size)
        wins += system_metrics(pred, true, ids.tolist()).mse < utterance_metrics(pred, true).mse
    assert wins == 50


def test_competition_rank_examples():
    ktau = [0.547, 0.705, 0.789, 0.779, 0.750, 0.758, 0.758]
    assert competition_rank(ktau, True) == [7, 6, 1, 2, 5, 3, 3]
    # printed ranks from the leaderboard, shifted by one unlisted team
    assert [r + 1 for r in competition_rank(ktau, True)] == [8, 7, 2, 3, 6, 4, 4]
    assert competition_rank([0.4] * 5, True) == [1] * 5
    assert competition_rank([0.9, 0.7, 0.5, 0.1], True) == [1, 2, 3, 4]
    assert competition_rank([0.3, 0.1, 0.3, 0.2], False) == [3, 1, 3, 2]


def test_format_round_half_even():
    assert format_value(0.9125) == "0.912"
    assert format_value(0.9135) == "0.914"
    assert format_value(None) == "n/a"
    assert format_value(0.1) == "0.100"


def _rep(mse, lcc, srcc, ktau, level="utterance"):
    return MetricsReport(level, mse, lcc, srcc, ktau, 10)


def test_singleton_table():
    rows = rank_table([("only", _rep(0.3, 0.8, 0.7, 0.6))])
    assert rows[0]["ranks"] == {m: 1 for m in METRICS}
    text = render_rank_table([("only", _rep(0.3, 0.8, 0.7, 0.6))])
    assert "Utterance-level" in text and "0.300" in text
    with pytest.raises(ValueError):
        rank_table([])


def test_table_with_undefined_metric():
    rows = rank_table([("a", _rep(0.2, None, 0.5, 0.4)), ("b", _rep(0.1, 0.9, 0.6, 0.4))])
    assert rows[0]["ranks"]["lcc"] is None and rows[1]["ranks"]["lcc"] == 1
    assert rows[0]["ranks"]["ktau"] == rows[1]["ranks"]["ktau"] == 1


def test_json_keeps_full_precision():
    v = 0.123456789012345
    doc = json.loads(rank_table_json([("x", _rep(v, 0.5, 0.5, 0.5)), ("y", _rep(0.2, 0.1, 0.1, 0.1))]))
    assert doc["rows"][0]["raw"]["mse"] == v and doc["rows"][0]["ranks"]["lcc"] == 1


# -- properties ------------------------------------------------------------

def tied_vectors(min_n=2, max_n=50):
    # small integer grids guarantee plenty of ties
    return st.integers(min_n, max_n).flatmap(lambda n: st.tuples(
        st.lists(st.integers(0, 6), min_size=n, max_size=n),
        st.lists(st.floats(-5, 5, allow_nan=False, width=32) | st.integers(0, 4).map(float),
                 min_size=n, max_size=n)))


def brute_tau_b(x, y):
    c = d = tx = ty = 0
    for i, j in itertools.combinations(range(len(x)), 2):
        a, b = np.sign(x[i] - x[j]), np.sign(y[i] - y[j])
        if a == 0:
            tx += 1
        if b == 0:
            ty += 1
        if a * b > 0:
            c += 1
        elif a * b < 0:
            d += 1
    n0 = len(x) * (len(x) - 1) // 2
    den = (n0 - tx) * (n0 - ty)
    return None if den == 0 else (c - d) / math.sqrt(den)


@settings(max_examples=150, deadline=None)
@given(tied_vectors())
def test_kendall_matches_brute_force(xy):
    x, y = np.array(xy[0], float), np.array(xy[1], float)
    fast, slow = kendall_tau_b(x, y), brute_tau_b(x, y)
    assert (fast is None) == (slow is None)
    if fast is not None:
        assert fast == pytest.approx(slow, abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(tied_vectors())
def test_against_scipy(xy):
    x, y = np.array(xy[0], float), np.array(xy[1], float)
    r = utterance_metrics(x, y)
    if r.lcc is None:
        assert np.ptp(x) == 0 or np.ptp(y) == 0
        return
    assert r.lcc == pytest.approx(scipy.stats.pearsonr(x, y)[0], abs=1e-9)
    assert r.srcc == pytest.approx(scipy.stats.spearmanr(x, y)[0], abs=1e-9)
    assert r.ktau == pytest.approx(scipy.stats.kendalltau(x, y, variant="b")[0], abs=1e-9)
    assert r.srcc == pearson(average_ranks(x), average_ranks(y))


@settings(max_examples=100, deadline=None)
@given(tied_vectors(3, 30), st.floats(0.01, 100), st.floats(-100, 100))
def test_affine_invariance(xy, scale, shift):
    x, y = np.array(xy[0], float), np.array(xy[1], float)
    a, b = utterance_metrics(x, y), utterance_metrics(scale * x + shift, y)
    for m in ("lcc", "srcc", "ktau"):
        u, v = getattr(a, m), getattr(b, m)
        assert (u is None) == (v is None)
        if u is not None:
            assert u == pytest.approx(v, abs=1e-9)
    assert a.srcc == b.srcc and a.ktau == b.ktau  # ranks are identical


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.integers(0, 5), st.integers(0, 5)),
                min_size=1, max_size=9))
def test_rank_raw_consistency(rows):
    entries = [(f"t{i}", _rep(*(v / 10 for v in r))) for i, r in enumerate(rows)]
    table = rank_table(entries)
    for m in METRICS:
        for a, b in itertools.permutations(table, 2):
            va, vb = a["raw"][m], b["raw"][m]
            better = va < vb if m == "mse" else va > vb
            if va == vb:
                assert a["ranks"][m] == b["ranks"][m]
            elif better:
                assert a["ranks"][m] < b["ranks"][m]


@settings(max_examples=100)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=40), st.floats(-10, 10))
def test_correlation_ranges(x, shift):
    y = np.array(x) ** 2 + shift
    r = utterance_metrics(x, y)
    assert r.mse >= 0
    for m in ("lcc", "srcc", "ktau"):
        v = getattr(r, m)
        assert v is None or -1.0 <= v <= 1.0


# -- evaluate_model --------------------------------------------------------

class OracleModel:
    def __init__(self, d: Dataset):
        self.lookup = {tuple(e): m for e, m in zip(d.embeddings, d.mos)}
        self.labels = d.labels

    def forward(self, X, train=False):
        class Out:
            pass
        o = Out()
        o.mos_pred = np.array([self.lookup[tuple(x)] for x in X])
        o.class_logits = np.eye(4)[self.labels]
        return o


@pytest.fixture(scope="module")
def synth():
    return generate_dataset(SynthConfig(dim=16, per_system=100, aux_per_system=0))[0]


def test_oracle_model(synth):
    utt, sysm, acc = evaluate_model(OracleModel(synth), synth)
    assert utt.mse == 0 and sysm.mse == 0 and acc == 1.0


def test_random_model_near_chance_and_deterministic(synth):
    # class heads are i.i.d. at init, so accuracy averaged over random models is 1/K
    hits = []
    for seed in range(40):
        m = init_model(MoeConfig(input_dim=16, n_classes=4), RngState(seed))
        a, b = evaluate_model(m, synth), evaluate_model(m, synth)
        assert a == b
        hits.append(a[2])
    se = np.std(hits, ddof=1) / math.sqrt(len(hits))
    assert abs(np.mean(hits) - 0.25) <= 4 * se + 1e-9


def test_evaluate_requires_labels(synth):
    s = Sample("u", "sys00", np.zeros(16))
    d = Dataset((s, *synth.samples[:3]))
    with pytest.raises(ValueError):
        evaluate_model(init_model(MoeConfig(input_dim=16, n_classes=4), RngState(0)), d)


def test_accuracy():
    assert accuracy([[0.1, 0.9], [2.0, 1.0], [0.0, 0.0]], [1, 0, 1]) == pytest.approx(2 / 3)
