import json
import math
import random

import pytest

import mtdlab


def softmax(logits):
    m = max(logits)
    e = [math.exp(x - m) for x in logits]
    s = sum(e)
    return [x / s for x in e]


def test_version():
    assert mtdlab.__version__ == "0.1.0"


def test_mtd_matches_kl_of_softmaxes():
    rng = random.Random(1)
    f = [rng.gauss(0, 2) for _ in range(12)]
    q = [rng.gauss(0, 2) for _ in range(12)]
    p, m = softmax(f), softmax(q)
    kl = sum(a * math.log(a / b) for a, b in zip(p, m))
    assert mtdlab.mtd(f, q) == pytest.approx(kl, rel=1e-10)
    assert mtdlab.kl_divergence(p, m) == pytest.approx(kl, rel=1e-10)
    assert mtdlab.mtd(f, f) == 0.0


def test_geodesic_endpoints_and_fold_flag():
    p = [0.7, 0.2, 0.1]
    m = [0.1, 0.3, 0.6]
    assert mtdlab.geodesic_interpolate(p, m, 0.0)[0] == p
    assert mtdlab.geodesic_interpolate(p, m, 1.0)[0] == m
    probs, folded = mtdlab.geodesic_interpolate(p, m, -3.0)
    assert folded
    assert sum(probs) == pytest.approx(1.0, abs=1e-12)


def test_fixed_entropy_projection():
    s = [0.5, 0.3, 0.15, 0.05]
    probs, t = mtdlab.fixed_entropy_project(s, 1.0)
    assert mtdlab.entropy(probs) == pytest.approx(1.0, abs=1e-9)
    assert t > 0


def test_steered_distribution_alpha_zero_is_tempered_softmax():
    f = [1.0, 0.5, -0.3, 2.0]
    q = [0.2, 1.5, 0.1, -1.0]
    probs, diag = mtdlab.steered_distribution(f, q, temperature=0.8, alpha=0.0)
    ref = mtdlab.softmax_with_temperature(f, 0.8)
    assert probs == pytest.approx(ref, abs=1e-6)
    assert diag["mtd"] > 0
    one_hot, _ = mtdlab.steered_distribution(f, q, alpha=0.3, top_k=1)
    assert sorted(one_hot) == [0.0, 0.0, 0.0, 1.0]


def test_invalid_inputs_raise():
    with pytest.raises(ValueError):
        mtdlab.entropy([0.5, 0.6])
    with pytest.raises(ValueError):
        mtdlab.softmax_with_temperature([1.0, 2.0], 0.0)
    with pytest.raises(ArithmeticError):
        mtdlab.pearson([1, 1, 1, 1], [1, 2, 3, 4])


def test_pfa_levels_are_consistent():
    for level in range(1, 11):
        pfa = mtdlab.generate_pfa(level, 7)
        dl = mtdlab.description_length(pfa)
        assert mtdlab.complexity_level(dl) == level
        assert json.loads(pfa)["n_states"] >= 1


def test_creative_scoring_of_enumerated_items():
    for task in ("sibling_discovery", "triangle_discovery", "circle_construction", "line_construction"):
        spec = mtdlab.make_creative_world(task, 3)
        items = mtdlab.enumerate_valid_items(spec)
        assert items
        scores = mtdlab.score_items(spec, items[:5] + items[:5])
        assert scores["validity"] == 1.0
        assert scores["uniqueness"] == pytest.approx(len({tuple(i) for i in items[:5]}) / 10)


def test_trace_round_trip(tmp_path):
    trace = {
        "vocab_size": 3,
        "records": [
            {"token_id": 1, "full_logits": [0.0, 1.0, 2.0], "mtp_logits": [0.5, 0.5, 0.5]},
            {"token_id": 2, "full_logits": [1.0, 0.0, -1.0], "mtp_logits": [0.0, 0.0, 3.0]},
        ],
        "meta": {"task": "copy"},
    }
    path = str(tmp_path / "t.mtdt")
    mtdlab.write_trace(trace, path)
    assert mtdlab.read_trace(path) == trace
    stats = mtdlab.sequence_stats(trace)
    assert stats["cum_mtd"] == pytest.approx(sum(stats["per_token_mtd"]))


def test_analysis_helpers():
    x = [1.0, 2.0, 3.0, 4.0, 5.0]
    assert mtdlab.pearson(x, [2 * v + 1 for v in x]) == pytest.approx(1.0)
    lo, hi = mtdlab.bootstrap_ci(x, "mean", 2000, 0.95, 1)
    assert lo < 3.0 < hi
    norm = mtdlab.normalize_task_scores({"a": 1.0, "b": 3.0})
    assert norm == pytest.approx({"a": 0.5, "b": 1.5})
    acc, _, _ = mtdlab.pairwise_selection_accuracy([0.0, 1.0], [2.0, 3.0])
    assert acc == 1.0


def test_default_config_round_trips():
    cfg = json.loads(mtdlab.default_config())
    assert cfg["seeds"] == [0, 1, 2]
    with pytest.raises(RuntimeError):
        mtdlab.run_stage("gen-assets", json.dumps({"model": {"d_model": "big"}}))
