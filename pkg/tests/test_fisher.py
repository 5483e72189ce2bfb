import json
import math

import numpy as np
import pytest
import torch

from fisher_surgery.fisher.estimator import EstimatorMode, FimDiagonal, estimate_fim_diagonal
from fisher_surgery.fisher.oracle import brute_force_fim_oracle
from fisher_surgery.fisher.probe import draw_probe
from fisher_surgery.fisher.ranking import (
    LayerScoreVector,
    aggregate_layer_scores,
    rank_layers,
    select_layers,
)
from fisher_surgery.fisher.score_file import read_score_file, write_score_file
from fisher_surgery.models import (
    Example,
    LayerGroup,
    LayerPartition,
    build_reference_model,
    grad_log_prob,
    log_prob,
)
from fisher_surgery.utils.errors import InputError, NumericError, RefusalError

from .helpers import build_with_examples, scaled_scores, tabular_examples


def _scores(*values):
    return LayerScoreVector(
        scores=tuple(values), group_names=tuple(f"layer_{i}" for i in range(len(values)))
    )


def _two_layer_partition():
    return LayerPartition(
        ranked_groups=(LayerGroup("layer_0", ("a",)), LayerGroup("layer_1", ("b",))),
        preamble_group=LayerGroup("preamble", ()),
        head_group=LayerGroup("head", ()),
    )


def _fim(values):
    return FimDiagonal(
        values={k: torch.tensor(v, dtype=torch.float64) for k, v in values.items()},
        probe_size=1,
        estimator_mode=EstimatorMode.exact,
        seed=0,
        probe_digest="test",
    )


# ---- Estimator vs oracle ----

@pytest.mark.parametrize("kind", ["linear-softmax", "tiny-mlp", "tiny-transformer"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_estimator_matches_oracle(kind, seed):
    model, examples = build_with_examples(kind, seed=seed)
    fast = estimate_fim_diagonal(model, examples)
    slow = brute_force_fim_oracle(model, examples)
    assert fast.values.keys() == slow.values.keys()
    for name in fast.values:
        torch.testing.assert_close(fast.values[name], slow.values[name], rtol=1e-8, atol=1e-14)


def test_two_class_fisher_has_closed_form():
    model = build_reference_model("linear-softmax", {"input_dim": 3, "num_classes": 2}, seed=4)
    example = Example(inputs=(1.0, -2.0, 0.5), label=0)
    p0, p1 = log_prob(model, example).exp().tolist()
    x = torch.tensor(example.inputs, dtype=torch.float64)

    fim = estimate_fim_diagonal(model, [example])
    expected = p0 * p1 * x ** 2
    torch.testing.assert_close(fim.values["layers.0.weight"][0], expected)
    torch.testing.assert_close(fim.values["layers.0.weight"][1], expected)
    torch.testing.assert_close(
        fim.values["layers.0.bias"], torch.tensor([p0 * p1, p0 * p1], dtype=torch.float64)
    )


def test_uniform_model_fisher():
    """Zero weights: every entry of class row k is (C-1)/C^2 * x^2."""
    num_classes = 4
    model = build_reference_model(
        "linear-softmax", {"input_dim": 2, "num_classes": num_classes}, seed=0
    )
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    example = Example(inputs=(3.0, -1.0), label=2)
    fim = estimate_fim_diagonal(model, [example])
    x = torch.tensor(example.inputs, dtype=torch.float64)
    expected = (num_classes - 1) / num_classes ** 2 * x ** 2
    for row in fim.values["layers.0.weight"]:
        torch.testing.assert_close(row, expected)


def test_zero_head_silences_everything_below(mlp_model, mlp_examples):
    with torch.no_grad():
        mlp_model.head.weight.zero_()
    fim = estimate_fim_diagonal(mlp_model, mlp_examples[:5])
    partition = mlp_model.partition
    for name, value in fim.values.items():
        if partition.group_of(name) != "head":
            assert torch.count_nonzero(value) == 0, name
    assert torch.count_nonzero(fim.values["head.bias"]) > 0


def test_single_example_is_probability_weighted_sum():
    model = build_reference_model("linear-softmax", {"input_dim": 2, "num_classes": 2}, seed=9)
    example = Example(inputs=(0.7, -0.2), label=1)
    probs = log_prob(model, example).exp()
    g0 = grad_log_prob(model, example, 0)
    g1 = grad_log_prob(model, example, 1)
    fim = estimate_fim_diagonal(model, [example])
    for name in fim.values:
        manual = probs[0] * g0[name] ** 2 + probs[1] * g1[name] ** 2
        torch.testing.assert_close(fim.values[name], manual)


def test_empirical_mode_uses_observed_labels(mlp_model, mlp_examples):
    probe = mlp_examples[:4]
    fim = estimate_fim_diagonal(mlp_model, probe, mode="empirical")
    assert fim.estimator_mode == EstimatorMode.empirical
    for name in fim.values:
        manual = sum(grad_log_prob(mlp_model, ex, ex.label)[name] ** 2 for ex in probe) / len(probe)
        torch.testing.assert_close(fim.values[name], manual)


def test_sampled_mode_approaches_exact():
    model = build_reference_model("linear-softmax", {"input_dim": 3, "num_classes": 3}, seed=5)
    examples = tabular_examples(4, 3, 3, seed=5)
    exact = aggregate_layer_scores(estimate_fim_diagonal(model, examples), model.partition)
    sampled = aggregate_layer_scores(
        estimate_fim_diagonal(model, examples, mode="sampled", seed=3, num_samples=10000),
        model.partition,
    )
    assert sampled.scores[0] == pytest.approx(exact.scores[0], rel=0.05)


def test_sampled_mode_is_seeded(mlp_model, mlp_examples):
    first = estimate_fim_diagonal(mlp_model, mlp_examples[:6], mode="sampled", seed=11)
    second = estimate_fim_diagonal(mlp_model, mlp_examples[:6], mode="sampled", seed=11)
    for name in first.values:
        assert torch.equal(first.values[name], second.values[name])


def test_regression_exact_fisher_is_squared_mean_gradient():
    model = build_reference_model(
        "tiny-mlp", {"input_dim": 4, "task_kind": "regression", "num_classes": 1}, seed=2
    )
    example = Example(inputs=(0.1, 0.4, -0.3, 0.8), label=0.0)
    mean = log_prob(model, example)[0].item()
    # unit residual makes grad log p equal the gradient of the mean
    unit = grad_log_prob(model, example, mean + 1.0)
    fim = estimate_fim_diagonal(model, [example])
    for name in fim.values:
        torch.testing.assert_close(fim.values[name], unit[name] ** 2)


def test_probe_order_does_not_matter(mlp_model, mlp_examples):
    forward = aggregate_layer_scores(estimate_fim_diagonal(mlp_model, mlp_examples), mlp_model.partition)
    backward = aggregate_layer_scores(
        estimate_fim_diagonal(mlp_model, list(reversed(mlp_examples))), mlp_model.partition
    )
    for a, b in zip(forward.scores, backward.scores):
        assert abs(a - b) <= 1e-10 * max(a, 1.0)
    assert rank_layers(forward).order == rank_layers(backward).order


def test_empty_probe_rejected(mlp_model):
    with pytest.raises(InputError):
        estimate_fim_diagonal(mlp_model, [])
    with pytest.raises(InputError):
        brute_force_fim_oracle(mlp_model, [])


def test_oracle_refuses_large_problems():
    regression = build_reference_model(
        "tiny-mlp", {"input_dim": 2, "task_kind": "regression", "num_classes": 1}, seed=0
    )
    with pytest.raises(RefusalError):
        brute_force_fim_oracle(regression, [Example(inputs=(0.0, 1.0), label=0.5)])

    many_classes = build_reference_model("linear-softmax", {"input_dim": 2, "num_classes": 17}, seed=0)
    with pytest.raises(RefusalError):
        brute_force_fim_oracle(many_classes, [Example(inputs=(0.0, 1.0), label=0)])


def test_non_finite_weights_raise_numeric_error():
    model = build_reference_model("linear-softmax", {"input_dim": 2, "num_classes": 2}, seed=0)
    with torch.no_grad():
        model.layers[0].weight[0, 0] = float("inf")
    with pytest.raises(NumericError) as exc:
        estimate_fim_diagonal(model, [Example(inputs=(1.0, 1.0), label=0)])
    assert exc.value.group == "layer_0"


# ---- Aggregation ----

def test_layer_score_is_frobenius_norm():
    partition = _two_layer_partition()
    fim = _fim({"a": [3.0, 4.0], "b": [0.0, 0.0]})
    assert aggregate_layer_scores(fim, partition).scores == (5.0, 0.0)
    normalized = aggregate_layer_scores(fim, partition, normalized=True)
    assert normalized.scores[0] == pytest.approx(5.0 / math.sqrt(2))
    assert normalized.normalized


def test_all_zero_diagonal_gives_zero_scores():
    scores = aggregate_layer_scores(_fim({"a": [0.0], "b": [0.0, 0.0]}), _two_layer_partition())
    assert scores.scores == (0.0, 0.0)
    assert rank_layers(scores).order == (0, 1)


def test_aggregate_matches_independent_reduction(mlp_model, mlp_examples):
    fim = estimate_fim_diagonal(mlp_model, mlp_examples)
    scores = aggregate_layer_scores(fim, mlp_model.partition)
    for group, score in zip(mlp_model.partition.ranked_groups, scores.scores):
        squares = sum(float(np.sum(fim.values[name].numpy() ** 2)) for name in group.parameter_names)
        assert score == pytest.approx(math.sqrt(squares), rel=1e-12)


def test_mismatched_layout_rejected():
    with pytest.raises(InputError):
        aggregate_layer_scores(_fim({"a": [1.0]}), _two_layer_partition())


# ---- Ranking and selection ----

@pytest.mark.parametrize(
    "values, order",
    [
        ((0.1, 0.5, 0.3), (1, 2, 0)),
        ((0.2, 0.2, 0.1), (0, 1, 2)),
        ((1.0, 3.0, 3.0, 2.0), (1, 2, 3, 0)),
    ],
)
def test_rank_layers_orders_by_score(values, order):
    ranking = rank_layers(_scores(*values))
    assert ranking.order == order


def test_ranking_is_scale_invariant():
    scores = _scores(0.4, 0.9, 0.1, 0.6)
    assert rank_layers(scaled_scores(scores, 1e-3)).order == rank_layers(scores).order
    assert rank_layers(scaled_scores(scores, 250.0)).order == rank_layers(scores).order


def test_positions_invert_order():
    ranking = rank_layers(_scores(0.1, 0.5, 0.3))
    assert ranking.positions == [2, 0, 1]
    assert ranking.ordered_names == ["layer_1", "layer_2", "layer_0"]


def test_negative_scores_rejected():
    with pytest.raises(InputError):
        _scores(0.1, -0.2)


def test_select_top_and_bottom():
    ranking = rank_layers(_scores(0.1, 0.5, 0.3, 0.2))  # order 1, 2, 3, 0
    top = select_layers(ranking, 2, "top")
    assert top.trainable == {
        "preamble": False, "layer_0": False, "layer_1": True,
        "layer_2": True, "layer_3": False, "head": True,
    }
    assert top.provenance.variant == "top-2"

    bottom = select_layers(ranking, 1, "bottom")
    assert bottom.trainable_groups == ["layer_0", "head"]


def test_top_and_bottom_complement():
    ranking = rank_layers(_scores(0.3, 0.1, 0.7, 0.2, 0.5))
    n = ranking.num_layers
    for k in range(1, n):
        top = set(select_layers(ranking, k, "top").trainable_groups) - {"head"}
        bottom = set(select_layers(ranking, n - k, "bottom").trainable_groups) - {"head"}
        assert not top & bottom
        assert top | bottom == set(ranking.group_names)


def test_select_all_layers_keeps_preamble_frozen():
    ranking = rank_layers(_scores(0.3, 0.1))
    mask = select_layers(ranking, 2)
    assert mask.frozen_groups == ["preamble"]


@pytest.mark.parametrize("k", [0, 4, -1])
def test_select_rejects_out_of_range_k(k):
    with pytest.raises(InputError):
        select_layers(rank_layers(_scores(0.3, 0.1, 0.2)), k)


# ---- Probe ----

def test_draw_probe_clamps_and_is_deterministic(mlp_examples):
    small = draw_probe(mlp_examples[:5], size=10, seed=0)
    assert small.size == 5
    assert small.clamped

    first = draw_probe(mlp_examples, size=8, seed=3)
    second = draw_probe(mlp_examples, size=8, seed=3)
    assert first.digest == second.digest
    assert first.size == 8 and not first.clamped
    assert set(first.examples) <= set(mlp_examples)


def test_draw_probe_rejects_bad_input(mlp_examples):
    with pytest.raises(InputError):
        draw_probe(mlp_examples, size=0)
    with pytest.raises(InputError):
        draw_probe([], size=5)


# ---- Score file ----

def test_score_files_differ_only_in_timestamp(tmp_path, mlp_model, mlp_examples):
    payloads = []
    for name in ("first.json", "second.json"):
        probe = draw_probe(mlp_examples, size=10, seed=1)
        scores = aggregate_layer_scores(estimate_fim_diagonal(mlp_model, probe), mlp_model.partition)
        path = write_score_file(
            tmp_path / name, scores, rank_layers(scores), mlp_model.architecture_digest()
        )
        data = json.loads(path.read_text())
        assert "timestamp" in data
        data.pop("timestamp")
        payloads.append(data)
    assert payloads[0] == payloads[1]


def test_score_file_read_back(tmp_path):
    scores = _scores(0.1, 0.5, 0.3)
    ranking = rank_layers(scores)
    path = write_score_file(tmp_path / "scores.json", scores, ranking, "abc")
    loaded_scores, loaded_ranking, data = read_score_file(path)
    assert loaded_scores.scores == scores.scores
    assert loaded_ranking.order == ranking.order
    assert data["model_digest"] == "abc"


def test_read_score_file_rejects_other_json(tmp_path):
    path = tmp_path / "other.json"
    path.write_text(json.dumps({"hello": 1}))
    with pytest.raises(InputError):
        read_score_file(path)
