from dataclasses import replace

import numpy as np

from fisher_surgery.models import Example, build_reference_model


def scaled_scores(scores, factor):
    return replace(scores, scores=tuple(s * factor for s in scores.scores))


def tabular_examples(n, dim, num_classes, seed=0):
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((n, dim))
    labels = rng.integers(0, num_classes, size=n)
    return [Example(inputs=tuple(row.tolist()), label=int(y)) for row, y in zip(features, labels)]


def token_examples(n, vocab_size, max_len, num_classes, seed=0):
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(n):
        length = int(rng.integers(2, max_len + 1))
        tokens = tuple(int(t) for t in rng.integers(3, vocab_size, size=length))
        examples.append(Example(inputs=tokens, label=int(rng.integers(0, num_classes))))
    return examples


def build_with_examples(kind, seed=0, n=6):
    """A small reference model of each kind plus compatible examples."""
    if kind == "linear-softmax":
        model = build_reference_model(kind, {"input_dim": 3, "num_classes": 3}, seed=seed)
        return model, tabular_examples(n, 3, 3, seed)
    if kind == "tiny-mlp":
        model = build_reference_model(
            kind, {"num_layers": 3, "hidden_width": 8, "input_dim": 4, "num_classes": 3}, seed=seed
        )
        return model, tabular_examples(n, 4, 3, seed)
    model = build_reference_model(
        kind,
        {"num_layers": 4, "hidden_width": 8, "vocab_size": 32, "max_seq_len": 6, "num_classes": 2},
        seed=seed,
    )
    return model, token_examples(n, 32, 6, 2, seed)


def planted_task_entry(task_id, seed=0, **overrides):
    source = {
        "type": "planted",
        "num_layers": 2,
        "planted_layer": 1,
        "strength": 0.5,
        "hidden_width": 8,
        "input_dim": 4,
        "num_classes": 2,
        "n_train": 24,
        "n_eval": 12,
        "n_probe": 8,
    }
    source.update(overrides)
    return {"task_id": task_id, "source": source, "seed": seed}
