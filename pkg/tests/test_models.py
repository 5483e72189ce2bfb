import math

import pytest
import torch

from fisher_surgery.models import (
    Example,
    TaskKind,
    build_reference_model,
    grad_log_prob,
    log_prob,
)
from fisher_surgery.storage import (
    list_checkpoints,
    load_snapshot,
    restore,
    save_snapshot,
    snapshot,
)
from fisher_surgery.utils.errors import ConfigurationError, InputError, SnapshotError
from fisher_surgery.utils.io import load_json, save_json

from .helpers import build_with_examples

KINDS = ["linear-softmax", "tiny-mlp", "tiny-transformer"]


@pytest.mark.parametrize("kind", KINDS)
def test_partition_covers_every_parameter_once(kind):
    """Group parameter counts add up to the model total and groups are disjoint."""
    model, _ = build_with_examples(kind)
    partition = model.partition
    names = [set(group.parameter_names) for group in partition.groups]
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            assert not names[i] & names[j]
    assert sum(model.parameter_count(g.name) for g in partition.groups) == model.parameter_count()
    assert set().union(*names) == {name for name, _ in model.named_parameters()}


def test_tiny_mlp_parameter_count_matches_shapes():
    model = build_reference_model(
        "tiny-mlp", {"num_layers": 3, "hidden_width": 16, "input_dim": 8, "num_classes": 4}, seed=1
    )
    # preamble 8x16+16, three blocks of two 16x16+16 projections, head 16x4+4
    assert model.parameter_count() == 144 + 3 * 544 + 68 == 1844
    assert model.partition.num_layers == 3


def test_transformer_build_is_deterministic():
    config = {"num_layers": 4, "hidden_width": 32, "num_classes": 2}
    first = build_reference_model("tiny-transformer", config, seed=7)
    second = build_reference_model("tiny-transformer", config, seed=7)
    assert first.partition.ranked_names == ("layer_0", "layer_1", "layer_2", "layer_3")
    assert snapshot(first).digest == snapshot(second).digest
    other = build_reference_model("tiny-transformer", config, seed=8)
    assert snapshot(other).digest != snapshot(first).digest


def test_linear_softmax_has_one_ranked_group():
    model = build_reference_model("linear-softmax", {"input_dim": 3, "num_classes": 2}, seed=0)
    partition = model.partition
    assert partition.num_layers == 1
    assert partition.ranked_groups[0].parameter_names == ("layers.0.weight", "layers.0.bias")
    assert partition.preamble_group.parameter_names == ()
    assert partition.head_group.parameter_names == ()


@pytest.mark.parametrize(
    "config",
    [
        {"num_layers": 0},
        {"hidden_width": 0},
        {"num_classes": 1},
        {"unknown_key": 3},
    ],
)
def test_invalid_model_config_raises(config):
    with pytest.raises(ConfigurationError) as exc:
        build_reference_model("tiny-mlp", config, seed=0)
    assert exc.value.key.startswith("model")


@pytest.mark.parametrize("kind", KINDS)
def test_log_prob_is_normalized(kind):
    model, examples = build_with_examples(kind)
    for example in examples:
        total = log_prob(model, example).exp().sum().item()
        assert total == pytest.approx(1.0, abs=1e-6)


def test_zero_weights_give_uniform_distribution():
    model = build_reference_model("linear-softmax", {"input_dim": 3, "num_classes": 4}, seed=0)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    probs = log_prob(model, Example(inputs=(0.3, -1.0, 2.0), label=0)).exp()
    torch.testing.assert_close(probs, torch.full((4,), 0.25, dtype=torch.float64))


def test_hand_computed_softmax():
    model = build_reference_model("linear-softmax", {"input_dim": 2, "num_classes": 2}, seed=0)
    with torch.no_grad():
        model.layers[0].weight.copy_(torch.tensor([[1.0, 0.0], [0.0, 0.0]]))
        model.layers[0].bias.zero_()
    result = log_prob(model, Example(inputs=(2.0, 0.0), label=0))
    norm = math.log(math.exp(2.0) + 1.0)
    assert result[0].item() == pytest.approx(2.0 - norm, abs=1e-12)
    assert result[1].item() == pytest.approx(-norm, abs=1e-12)


def test_logistic_gradient_matches_closed_form():
    model = build_reference_model("linear-softmax", {"input_dim": 3, "num_classes": 2}, seed=3)
    example = Example(inputs=(0.5, -1.5, 2.0), label=1)
    p1 = log_prob(model, example).exp()[1].item()
    grads = grad_log_prob(model, example, 1)
    x = torch.tensor(example.inputs, dtype=torch.float64)
    torch.testing.assert_close(grads["layers.0.weight"][1], (1 - p1) * x, rtol=0, atol=1e-8)
    torch.testing.assert_close(grads["layers.0.weight"][0], -(1 - p1) * x, rtol=0, atol=1e-8)


def _flat_params(model):
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def _set_flat(model, flat):
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            p.copy_(flat[offset:offset + n].view_as(p))
            offset += n


@pytest.mark.parametrize("kind", KINDS)
def test_gradient_matches_central_differences(kind):
    """Directional derivative along random directions vs central differences (step 1e-5)."""
    model, examples = build_with_examples(kind, seed=2, n=20)
    generator = torch.Generator().manual_seed(0)
    base = _flat_params(model)
    eps = 1e-5
    for i, example in enumerate(examples):
        c = i % model.num_classes
        direction = torch.randn(base.shape, generator=generator, dtype=torch.float64)
        direction /= direction.norm()

        grads = grad_log_prob(model, example, c)
        analytic = sum(
            (grads[name].reshape(-1) * d).sum()
            for (name, _), d in zip(
                model.named_parameters(),
                torch.split(direction, [p.numel() for p in model.parameters()]),
            )
        ).item()

        _set_flat(model, base + eps * direction)
        up = log_prob(model, example)[c].item()
        _set_flat(model, base - eps * direction)
        down = log_prob(model, example)[c].item()
        _set_flat(model, base)

        numeric = (up - down) / (2 * eps)
        assert abs(numeric - analytic) <= 1e-4 * max(abs(analytic), 1e-4)


def test_padding_positions_get_zero_gradient():
    model = build_reference_model(
        "tiny-transformer", {"num_layers": 2, "hidden_width": 8, "max_seq_len": 8}, seed=0
    )
    grads = grad_log_prob(model, Example(inputs=(5, 9, 11), label=0), 1)
    assert torch.count_nonzero(grads["preamble.position.weight"][3:]) == 0
    assert torch.count_nonzero(grads["preamble.token.weight"][0]) == 0
    assert torch.count_nonzero(grads["preamble.position.weight"][:3]) > 0


def test_invalid_inputs_raise(mlp_model):
    example = Example(inputs=(0.1, 0.2, 0.3, 0.4), label=0)
    with pytest.raises(InputError):
        grad_log_prob(mlp_model, example, 3)
    with pytest.raises(InputError):
        log_prob(mlp_model, Example(inputs=(0.1, 0.2), label=0))

    text_model = build_reference_model("tiny-transformer", {"vocab_size": 16}, seed=0)
    with pytest.raises(InputError):
        log_prob(text_model, Example(inputs=(3, 99), label=0))
    with pytest.raises(InputError):
        log_prob(text_model, Example(inputs=(0, 0), label=0))


def test_regression_gradient_is_residual_times_mean_gradient():
    model = build_reference_model(
        "tiny-mlp", {"input_dim": 4, "task_kind": "regression", "num_classes": 1}, seed=0
    )
    assert model.task_kind == TaskKind.regression
    example = Example(inputs=(0.2, -0.1, 0.4, 1.0), label=1.5)
    mean, variance = log_prob(model, example).tolist()
    assert variance == 1.0
    at_mean = grad_log_prob(model, example, mean)
    for g in at_mean.values():
        torch.testing.assert_close(g, torch.zeros_like(g), rtol=0, atol=1e-12)
    shifted = grad_log_prob(model, example, mean + 2.0)
    unit = grad_log_prob(model, example, mean + 1.0)
    for name in shifted:
        torch.testing.assert_close(shifted[name], 2.0 * unit[name])


def test_snapshot_restore_round_trip(mlp_model, mlp_examples):
    before = snapshot(mlp_model)
    optimizer = torch.optim.SGD(mlp_model.parameters(), lr=0.1)
    loss = -mlp_model(mlp_model.encode(mlp_examples)).log_softmax(-1)[:, 0].mean()
    loss.backward()
    optimizer.step()
    assert snapshot(mlp_model).digest != before.digest

    restore(mlp_model, before)
    assert snapshot(mlp_model).digest == before.digest


def test_restore_into_other_architecture_fails():
    small = build_reference_model("tiny-mlp", {"num_layers": 3}, seed=0)
    large = build_reference_model("tiny-mlp", {"num_layers": 4}, seed=0)
    with pytest.raises(SnapshotError):
        restore(large, snapshot(small))


def test_snapshot_files(tmp_path, mlp_model):
    for epoch in (5, 0, 2):
        save_snapshot(snapshot(mlp_model, epoch=epoch), tmp_path)
    paths = list_checkpoints(tmp_path)
    assert [p.name for p in paths] == ["ckpt_epoch0.json", "ckpt_epoch2.json", "ckpt_epoch5.json"]

    loaded = load_snapshot(paths[1])
    assert loaded.epoch == 2
    assert loaded.digest == snapshot(mlp_model).digest

    manifest = load_json(paths[1])
    manifest["content_digest"] = "0" * 64
    save_json(manifest, paths[1], include_timestamp=False)
    with pytest.raises(SnapshotError):
        load_snapshot(paths[1])
