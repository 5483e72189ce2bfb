import logging
import math
from typing import Any, Dict, List, Sequence, Type, Union

import torch
import torch.nn.functional as F
from torch import nn

from ..utils.config import parse_config
from ..utils.errors import InputError
from .base import DTYPE, LayeredClassifier
from .config import ModelConfig, ModelKind
from .data_classes import PAD_ID, Example

logger = logging.getLogger(__name__)


def _scale_output_projection(linear: nn.Linear, scale: float) -> None:
    with torch.no_grad():
        linear.weight.mul_(scale)
        linear.bias.zero_()


class FeedForward(nn.Module):
    """fc2(gelu(fc1(h))); fc1 is the block's input-side projection."""

    def __init__(self, width: int, residual_scale: float):
        super().__init__()
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)
        _scale_output_projection(self.fc2, residual_scale)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(h)))


class TabularModel(LayeredClassifier):
    """Shared input handling for the feature-vector models."""

    def encode(self, examples: Sequence[Example]) -> torch.Tensor:
        if not examples:
            raise InputError("cannot encode an empty batch")
        for example in examples:
            if len(example.inputs) != self.config.input_dim:
                raise InputError(
                    f"expected {self.config.input_dim} features, got {len(example.inputs)}"
                )
        return torch.tensor([list(map(float, ex.inputs)) for ex in examples], dtype=DTYPE)


class LinearSoftmax(TabularModel):
    """A single linear map to logits: one ranked layer, identity preamble, empty head."""

    output_bias = "layers.0.bias"

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.preamble = nn.Identity()
        self.layers = nn.ModuleList([nn.Linear(config.input_dim, config.output_dim)])
        self.head = nn.Identity()

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        return self.layers[0](self.preamble(inputs))

    def planted_input(self, layer_index: int) -> List[str]:
        return [f"layers.{layer_index}.weight", f"layers.{layer_index}.bias"]

    def planted_output(self, layer_index: int) -> List[str]:
        return []


class ResidualBlock(nn.Module):
    def __init__(self, width: int, residual_scale: float):
        super().__init__()
        self.ff = FeedForward(width, residual_scale)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.ff(h)


class TinyMLP(TabularModel):
    """Input projection (preamble), L residual GELU blocks, linear head."""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        width = config.hidden_width
        self.preamble = nn.Linear(config.input_dim, width)
        self.layers = nn.ModuleList(
            [ResidualBlock(width, config.residual_scale) for _ in range(config.num_layers)]
        )
        self.head = nn.Linear(width, config.output_dim)

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        h = self.preamble(inputs)
        for layer in self.layers:
            h = layer(h)
        return self.head(h)

    def planted_input(self, layer_index: int) -> List[str]:
        return [f"layers.{layer_index}.ff.fc1.weight", f"layers.{layer_index}.ff.fc1.bias"]

    def planted_output(self, layer_index: int) -> List[str]:
        return [f"layers.{layer_index}.ff.fc2.weight"]


class Embeddings(nn.Module):
    def __init__(self, vocab_size: int, max_seq_len: int, width: int):
        super().__init__()
        self.token = nn.Embedding(vocab_size, width, padding_idx=PAD_ID)
        self.position = nn.Embedding(max_seq_len, width)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(tokens.shape[1], device=tokens.device)
        return self.token(tokens) + self.position(positions)[None, :, :]


class SelfAttention(nn.Module):
    def __init__(self, width: int, num_heads: int, residual_scale: float):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = width // num_heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        _scale_output_projection(self.proj, residual_scale)

    def forward(self, h: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        n, t, width = h.shape
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q, k, v = (x.view(n, t, self.num_heads, self.head_dim).transpose(1, 2) for x in (q, k, v))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        # padded keys are invisible; every sequence has at least one real token
        scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(n, t, width))


class EncoderBlock(nn.Module):
    def __init__(self, width: int, num_heads: int, residual_scale: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, num_heads, residual_scale)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = FeedForward(width, residual_scale)

    def forward(self, h: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        h = h + self.attn(self.ln1(h), pad_mask)
        return h + self.mlp(self.ln2(h))


class PooledHead(nn.Module):
    """Masked mean pooling over real tokens, LayerNorm, linear classifier."""

    def __init__(self, width: int, output_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, output_dim)

    def forward(self, h: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        keep = (~pad_mask).to(h.dtype)[:, :, None]
        pooled = (h * keep).sum(dim=1) / keep.sum(dim=1)
        return self.out(self.norm(pooled))


class TinyTransformer(LayeredClassifier):
    """Token + position embeddings (preamble), L pre-norm encoder blocks, pooled head."""

    output_bias = "head.out.bias"

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        width = config.hidden_width
        self.preamble = Embeddings(config.vocab_size, config.max_seq_len, width)
        self.layers = nn.ModuleList(
            [
                EncoderBlock(width, config.num_heads, config.residual_scale)
                for _ in range(config.num_layers)
            ]
        )
        self.head = PooledHead(width, config.output_dim)

    def encode(self, examples: Sequence[Example]) -> torch.Tensor:
        if not examples:
            raise InputError("cannot encode an empty batch")
        max_len = self.config.max_seq_len
        rows = []
        for example in examples:
            tokens = list(example.inputs)
            if not tokens:
                raise InputError("token sequence is empty")
            if len(tokens) > max_len:
                raise InputError(f"sequence length {len(tokens)} exceeds max_seq_len {max_len}")
            for token in tokens:
                if not isinstance(token, int) or not 0 <= token < self.config.vocab_size:
                    raise InputError(
                        f"token id {token!r} outside vocabulary [0, {self.config.vocab_size})"
                    )
            if all(token == PAD_ID for token in tokens):
                raise InputError("token sequence contains only padding")
            rows.append(tokens + [PAD_ID] * (max_len - len(tokens)))
        return torch.tensor(rows, dtype=torch.long)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        pad_mask = tokens == PAD_ID
        h = self.preamble(tokens)
        for layer in self.layers:
            h = layer(h, pad_mask)
        return self.head(h, pad_mask)

    def planted_input(self, layer_index: int) -> List[str]:
        return [f"layers.{layer_index}.mlp.fc1.weight", f"layers.{layer_index}.mlp.fc1.bias"]

    def planted_output(self, layer_index: int) -> List[str]:
        return [f"layers.{layer_index}.mlp.fc2.weight"]


MODEL_REGISTRY: Dict[ModelKind, Type[LayeredClassifier]] = {
    ModelKind.linear_softmax: LinearSoftmax,
    ModelKind.tiny_mlp: TinyMLP,
    ModelKind.tiny_transformer: TinyTransformer,
}


def build_reference_model(
    kind: Union[str, ModelKind],
    config: Union[ModelConfig, Dict[str, Any], None] = None,
    seed: int = 0,
) -> LayeredClassifier:
    """Deterministically initialize one of the three reference models in float64."""
    data = config.model_dump() if isinstance(config, ModelConfig) else dict(config or {})
    data.update({"kind": kind, "seed": seed})
    resolved = parse_config(ModelConfig, data, prefix="model")

    # fork the global RNG so building a model never perturbs the caller's stream
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MODEL_REGISTRY[resolved.kind](resolved)
    model = model.to(DTYPE)
    _ = model.partition  # validates totality and disjointness up front
    logger.debug(
        f"Built {resolved.kind.value} with {model.partition.num_layers} ranked layers, "
        f"{model.parameter_count()} parameters (seed={seed})"
    )
    return model


def build_from_config(config: ModelConfig) -> LayeredClassifier:
    return build_reference_model(config.kind, config, config.seed)
