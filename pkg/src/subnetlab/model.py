"""Pre-norm transformer encoder for sentence-pair classification.

Attention heads and MLP layers are the maskable components.  Each one can be
gated: ``z * output + (1 - z) * mean`` where ``mean`` is the component's
average output over training data.  ``z = 1`` is the full model and
``z = 0`` is a mean ablation.
"""

from __future__ import annotations

import contextlib
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_NEG = -1e9


class ConfigurationError(ValueError):
    """Inconsistent model configuration or mask assignment."""


class InputError(ValueError):
    """Batch contents that the model cannot consume."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 32
    d_mlp: int | None = None
    vocab_size: int = 64
    max_positions: int = 32
    n_labels: int = 2
    init_scale: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_mlp is None:
            object.__setattr__(self, "d_mlp", 4 * self.d_model)
        for key in ("n_layers", "n_heads", "d_model", "d_mlp", "vocab_size",
                    "max_positions", "n_labels"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.d_model % self.n_heads:
            raise ConfigurationError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_components(self) -> int:
        return self.n_layers * (self.n_heads + 1)

    def component_names(self) -> list[str]:
        """Heads first (layer-major), then one MLP per layer."""
        heads = [f"L{l}.H{h}" for l in range(self.n_layers) for h in range(self.n_heads)]
        return heads + [f"L{l}.MLP" for l in range(self.n_layers)]

    def component_weights(self) -> np.ndarray:
        """Parameter count of every maskable component, in component order."""
        d, hd, dm = self.d_model, self.head_dim, self.d_mlp
        head = 4 * d * hd + 3 * hd + d
        mlp = 2 * d * dm + dm + d
        return np.array([head] * (self.n_layers * self.n_heads) + [mlp] * self.n_layers,
                        dtype=np.float64)


@dataclass
class PairBatch:
    """Encoded sentence pairs: ``[CLS] premise [SEP] hypothesis [SEP] PAD*``."""

    token_ids: np.ndarray
    segment_ids: np.ndarray
    valid: np.ndarray
    labels: np.ndarray
    subcases: tuple[str, ...] = ()

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.int64)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.subcases:
            self.subcases = ("id",) * len(self.labels)
        self.subcases = tuple(self.subcases)

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    def take(self, idx) -> "PairBatch":
        idx = np.asarray(idx)
        return PairBatch(self.token_ids[idx], self.segment_ids[idx], self.valid[idx],
                         self.labels[idx], tuple(self.subcases[i] for i in idx))

    def subset(self, subcase: str) -> "PairBatch":
        return self.take(np.array([i for i, s in enumerate(self.subcases) if s == subcase],
                                  dtype=np.int64))

    @staticmethod
    def concat(batches: Sequence["PairBatch"]) -> "PairBatch":
        width = max(b.token_ids.shape[1] for b in batches)

        def pad(a, fill):
            return np.pad(a, ((0, 0), (0, width - a.shape[1])), constant_values=fill)

        return PairBatch(
            np.concatenate([pad(b.token_ids, 0) for b in batches]),
            np.concatenate([pad(b.segment_ids, 0) for b in batches]),
            np.concatenate([pad(b.valid, False) for b in batches]),
            np.concatenate([b.labels for b in batches]),
            sum((b.subcases for b in batches), ()),
        )


@dataclass
class MaskAssignment:
    """Gate value (and replacement mean) for every maskable component.

    Gates may be numpy arrays or :class:`Tensor` objects; tensors let the
    pruner differentiate through them.
    """

    head_gate: object
    mlp_gate: object
    head_mean: np.ndarray | None = None
    mlp_mean: np.ndarray | None = None

    @classmethod
    def ones(cls, config: ModelConfig) -> "MaskAssignment":
        return cls(np.ones((config.n_layers, config.n_heads)), np.ones(config.n_layers))

    @classmethod
    def from_vector(cls, config: ModelConfig, z, means: "ComponentMeans | None") -> "MaskAssignment":
        """Split a component-ordered gate vector (array or Tensor)."""
        nh = config.n_layers * config.n_heads
        if isinstance(z, Tensor):
            head = T.reshape(z[:nh], (config.n_layers, config.n_heads))
            mlp = z[nh:]
        else:
            z = np.asarray(z, dtype=np.float64)
            head = z[:nh].reshape(config.n_layers, config.n_heads)
            mlp = z[nh:]
        return cls(head, mlp,
                   None if means is None else means.head,
                   None if means is None else means.mlp)

    def validate(self, config: ModelConfig) -> None:
        hg, mg = _gate_values(self.head_gate), _gate_values(self.mlp_gate)
        if hg.shape != (config.n_layers, config.n_heads):
            raise ConfigurationError(f"head_gate shape {hg.shape} does not match model")
        if mg.shape != (config.n_layers,):
            raise ConfigurationError(f"mlp_gate shape {mg.shape} does not match model")
        for name, g in (("head", hg), ("mlp", mg)):
            if np.any(g < 0) or np.any(g > 1) or not np.all(np.isfinite(g)):
                raise ConfigurationError(f"{name} gates must lie in [0, 1]")
        if np.any(hg < 1) and self.head_mean is None:
            raise ConfigurationError("head gate below 1 but no head means supplied")
        if np.any(mg < 1) and self.mlp_mean is None:
            raise ConfigurationError("MLP gate below 1 but no MLP means supplied")

    def is_identity(self) -> bool:
        return (not isinstance(self.head_gate, Tensor) and not isinstance(self.mlp_gate, Tensor)
                and bool(np.all(_gate_values(self.head_gate) == 1))
                and bool(np.all(_gate_values(self.mlp_gate) == 1)))


def _gate_values(g) -> np.ndarray:
    return np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)


@dataclass
class ComponentMeans:
    """Mean output of each component over valid training positions."""

    head: np.ndarray  # (n_layers, n_heads, d_model)
    mlp: np.ndarray  # (n_layers, d_model)
    n_examples: int = 0
    n_tokens: int = 0

    def vector(self, component: int, config: ModelConfig) -> np.ndarray:
        nh = config.n_layers * config.n_heads
        if component < nh:
            return self.head[component // config.n_heads, component % config.n_heads]
        return self.mlp[component - nh]


@dataclass
class ForwardResult:
    logits: Tensor
    attention: list[np.ndarray] | None = None
    head_out: list[np.ndarray] | None = None
    mlp_out: list[np.ndarray] | None = None


class Model:
    """Parameters plus config; the forward pass lives in :func:`forward`."""

    def __init__(self, config: ModelConfig, params: "OrderedDict[str, Tensor]"):
        self.config = config
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state(self, state) -> None:
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise ConfigurationError(f"shape mismatch for {k}: {v.shape}")
            self.params[k].data = np.asarray(v, dtype=np.float64).copy()

    def copy(self) -> "Model":
        return Model(self.config, OrderedDict(
            (k, Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k))
            for k, v in self.params.items()))

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily mark every parameter as constant."""
        saved = {k: p.requires_grad for k, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for k, p in self.params.items():
                p.requires_grad = saved[k]


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d, h, hd, dm = config.d_model, config.n_heads, config.head_dim, config.d_mlp
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["tok_emb"] = (config.vocab_size, d)
    shapes["pos_emb"] = (config.max_positions, d)
    shapes["seg_emb"] = (2, d)
    for l in range(config.n_layers):
        p = f"layers.{l}."
        shapes[p + "ln1_g"] = (d,)
        shapes[p + "ln1_b"] = (d,)
        for name in ("W_Q", "W_K", "W_V"):
            shapes[p + name] = (h, d, hd)
            shapes[p + "b_" + name[-1]] = (h, 1, hd)
        shapes[p + "W_O"] = (h, hd, d)
        shapes[p + "b_O"] = (h, 1, d)
        shapes[p + "ln2_g"] = (d,)
        shapes[p + "ln2_b"] = (d,)
        shapes[p + "W_U"] = (d, dm)
        shapes[p + "b_U"] = (dm,)
        shapes[p + "W_D"] = (dm, d)
        shapes[p + "b_D"] = (d,)
    shapes["lnf_g"] = (d,)
    shapes["lnf_b"] = (d,)
    shapes["W_cls"] = (d, config.n_labels)
    shapes["b_cls"] = (config.n_labels,)
    return shapes


def init_model(config: ModelConfig, seed: int) -> Model:
    """Normal(0, init_scale) weights, zero biases, unit layer-norm gains.

    Values are rounded through float32 so checkpoints reproduce them exactly.
    """
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            data = np.ones(shape)
        elif leaf.startswith("b_") or leaf.endswith("_b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, config.init_scale, size=shape)
        data = data.astype(np.float32).astype(np.float64)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return Model(config, params)


@dataclass
class Dropout:
    """Inverted dropout with an explicit generator (training only)."""

    rate: float
    rng: np.random.Generator

    def __call__(self, x: Tensor) -> Tensor:
        if self.rate <= 0.0:
            return x
        keep = self.rng.random(x.shape) >= self.rate
        return x * Tensor(keep / (1.0 - self.rate))


def _ln(x: Tensor, g: Tensor, b: Tensor, eps: float) -> Tensor:
    return T.layer_norm(x, eps=eps) * g + b


def _gated(out: Tensor, gate, mean: np.ndarray | None) -> Tensor:
    """``gate * out + (1 - gate) * mean``; gate broadcasts over batch/positions."""
    if isinstance(gate, Tensor):
        one_minus = 1.0 - gate
        return out * gate + one_minus * Tensor(mean)
    gate = np.asarray(gate, dtype=np.float64)
    if mean is None:
        return out * Tensor(gate)
    return out * Tensor(gate) + Tensor((1.0 - gate) * mean)


def attention_layer(x: Tensor, params: dict, layer: int, config: ModelConfig,
                    attn_bias: np.ndarray, head_gate=None, head_mean: np.ndarray | None = None,
                    record: ForwardResult | None = None,
                    dropout: Dropout | None = None) -> Tensor:
    """``x + sum_i gate_i * Attn_i(LN(x)) W_O_i + (1 - gate_i) * mean_i``.

    ``head_gate`` has one entry per head (array or Tensor) or is ``None`` for
    the ungated layer.  ``attn_bias`` is additive, shaped (1, B, 1, T).
    """
    p = f"layers.{layer}."
    b, t, d = x.shape
    nh, hd = config.n_heads, config.head_dim
    h = _ln(x, params[p + "ln1_g"], params[p + "ln1_b"], config.ln_eps)
    # head-major layout: (H, B*T, .) keeps the batched matmuls few and large
    h2 = T.reshape(h, (1, b * t, d))
    q = T.reshape(h2 @ params[p + "W_Q"] + params[p + "b_Q"], (nh, b, t, hd))
    k = T.reshape(h2 @ params[p + "W_K"] + params[p + "b_K"], (nh, b, t, hd))
    v = T.reshape(h2 @ params[p + "W_V"] + params[p + "b_V"], (nh, b, t, hd))
    scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd)) + Tensor(attn_bias)
    attn = T.softmax(scores)  # (H, B, T, T)
    if dropout is not None:
        attn = dropout(attn)
    ctx = T.reshape(attn @ v, (nh, b * t, hd))
    heads = ctx @ params[p + "W_O"] + params[p + "b_O"]  # (H, B*T, d)
    if record is not None:
        if record.attention is not None:
            record.attention.append(attn.data.transpose(1, 0, 2, 3).copy())
        if record.head_out is not None:
            record.head_out.append(heads.data.reshape(nh, b, t, d).transpose(1, 0, 2, 3).copy())
    if head_gate is not None:
        gate = (T.reshape(head_gate, (nh, 1, 1)) if isinstance(head_gate, Tensor)
                else np.asarray(head_gate, dtype=np.float64).reshape(nh, 1, 1))
        mean = None if head_mean is None else head_mean.reshape(nh, 1, d)
        heads = _gated(heads, gate, mean)
    out = T.reshape(T.sum_(heads, axis=0), (b, t, d))
    return x + (dropout(out) if dropout is not None else out)


def mlp_layer(x: Tensor, params: dict, layer: int, config: ModelConfig,
              gate=None, mean: np.ndarray | None = None,
              record: ForwardResult | None = None,
              dropout: Dropout | None = None) -> Tensor:
    """``x + gate * GeLU(LN(x) W_U) W_D + (1 - gate) * mean``."""
    p = f"layers.{layer}."
    h = _ln(x, params[p + "ln2_g"], params[p + "ln2_b"], config.ln_eps)
    out = T.gelu(h @ params[p + "W_U"] + params[p + "b_U"]) @ params[p + "W_D"] + params[p + "b_D"]
    if record is not None and record.mlp_out is not None:
        record.mlp_out.append(out.data.copy())
    if gate is not None:
        out = _gated(out, gate, mean)
    return x + (dropout(out) if dropout is not None else out)


def check_batch(config: ModelConfig, batch: PairBatch) -> None:
    ids = batch.token_ids
    if ids.ndim != 2:
        raise InputError(f"token_ids must be (batch, seq), got {ids.shape}")
    if ids.shape[1] > config.max_positions:
        raise InputError(f"sequence length {ids.shape[1]} exceeds max_positions "
                         f"{config.max_positions}")
    bad = np.nonzero((ids < 0) | (ids >= config.vocab_size))
    if bad[0].size:
        i, j = int(bad[0][0]), int(bad[1][0])
        raise InputError(f"example {i}: token id {int(ids[i, j])} at position {j} "
                         f"outside vocabulary of size {config.vocab_size}")


def forward(model: Model, batch: PairBatch, masks: MaskAssignment | None = None,
            capture_attention: bool = False, capture_components: bool = False,
            dropout: Dropout | None = None) -> ForwardResult:
    """Logits for a batch; optionally the attention maps and raw component outputs.

    ``dropout`` (training only) applies to the embeddings, attention
    probabilities and both residual branches.
    """
    cfg = model.config
    check_batch(cfg, batch)
    prm = model.params
    if masks is not None:
        masks.validate(cfg)
        if masks.is_identity():
            masks = None
    b, t = batch.token_ids.shape
    x = (T.embedding(prm["tok_emb"], batch.token_ids)
         + prm["pos_emb"][:t]
         + T.embedding(prm["seg_emb"], batch.segment_ids))
    if dropout is not None:
        x = dropout(x)
    attn_bias = np.where(batch.valid, 0.0, MASK_NEG)[None, :, None, :]
    record = ForwardResult(
        logits=None,  # type: ignore[arg-type]
        attention=[] if capture_attention else None,
        head_out=[] if capture_components else None,
        mlp_out=[] if capture_components else None,
    )
    rec = record if (capture_attention or capture_components) else None
    for l in range(cfg.n_layers):
        hg = hm = mg = mm = None
        if masks is not None:
            hg = masks.head_gate[l]
            mg = masks.mlp_gate[l]
            hm = None if masks.head_mean is None else masks.head_mean[l]
            mm = None if masks.mlp_mean is None else masks.mlp_mean[l]
        x = attention_layer(x, prm, l, cfg, attn_bias, hg, hm, rec, dropout)
        x = mlp_layer(x, prm, l, cfg, mg, mm, rec, dropout)
    cls = _ln(x[:, 0, :], prm["lnf_g"], prm["lnf_b"], cfg.ln_eps)
    record.logits = cls @ prm["W_cls"] + prm["b_cls"]
    return record


def predict(model: Model, batch: PairBatch, masks: MaskAssignment | None = None,
            chunk: int = 512) -> np.ndarray:
    """Logits as a numpy array, evaluated in fixed-order chunks."""
    out = []
    for start in range(0, len(batch), chunk):
        part = batch.take(np.arange(start, min(start + chunk, len(batch))))
        out.append(forward(model, part, masks).logits.data)
    if not out:
        return np.zeros((0, model.config.n_labels))
    return np.concatenate(out)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count (independent of :func:`param_shapes`)."""
    d, h, hd, dm, v = (config.d_model, config.n_heads, config.head_dim, config.d_mlp,
                       config.vocab_size)
    emb = v * d + config.max_positions * d + 2 * d
    per_layer = 2 * d + h * (3 * (d * hd + hd) + hd * d + d) + 2 * d + d * dm + dm + dm * d + d
    head = 2 * d + d * config.n_labels + config.n_labels
    return emb + config.n_layers * per_layer + head

