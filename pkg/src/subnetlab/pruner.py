"""Mask-only pruning: frozen weights, KL faithfulness, Lagrangian sparsity control."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gates as G
from . import tensor as T
from .model import ComponentMeans, ConfigurationError, MaskAssignment, Model, PairBatch, forward, predict
from .tensor import DimensionError, Tensor
from .trainer import batch_indices, trim

log = logging.getLogger(__name__)

RUN_LOG_HEADER = ("step", "target", "expected_sparsity", "kl", "lambda1", "lambda2")


class PruneDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"KL loss became non-finite at step {step}")
        self.step = step


def desk_schedule(target_sparsity: float) -> tuple[int, int]:
    """(warmup_steps, total_steps): the BERT-scale step formulas scaled by 1/20."""
    pct = 100.0 * target_sparsity
    warmup = int(round(325 + 2.5 * pct))
    return warmup, warmup + int(round(0.3 * pct))


@dataclass(frozen=True)
class PruneConfig:
    target_sparsity: float = 0.5
    seed: int = 42
    lr_log_alpha: float = 0.1
    lr_lambda: float = 1.0
    warmup_steps: int | None = None
    total_steps: int | None = None
    batch_size: int = 32
    eval_every: int = 50
    threshold_grid_stride: float = 0.05
    init_log_alpha: float = 2.0
    init_noise: float = 0.01
    log_alpha_clip: float | None = None
    log_alpha_betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ValueError("target_sparsity must lie in [0, 1)")
        if self.lr_log_alpha <= 0 or self.lr_lambda <= 0:
            raise ValueError("learning rates must be positive")
        if len(self.log_alpha_betas) != 2 or not all(0 <= b < 1 for b in self.log_alpha_betas):
            raise ValueError("log_alpha_betas must be two values in [0, 1)")
        if self.log_alpha_clip is not None and self.log_alpha_clip <= 0:
            raise ValueError("log_alpha_clip must be positive")
        warmup, total = self.schedule()
        if warmup > total:
            raise ValueError(f"warmup_steps={warmup} exceeds total_steps={total}")

    def schedule(self) -> tuple[int, int]:
        warmup, total = desk_schedule(self.target_sparsity)
        if self.warmup_steps is not None:
            total = total - warmup + self.warmup_steps
            warmup = self.warmup_steps
        if self.total_steps is not None:
            total = self.total_steps
        return warmup, total

    def threshold_grid(self) -> np.ndarray:
        n = int(round(1.0 / self.threshold_grid_stride))
        return np.round(np.arange(n + 1) * self.threshold_grid_stride, 10)


# ---------------------------------------------------------------------------
# Means and loss
# ---------------------------------------------------------------------------


def compute_mean_activations(model: Model, dataset: PairBatch, chunk: int = 512) -> ComponentMeans:
    """Average output of every head (after its output projection) and every MLP,
    over all valid positions of ``dataset``; one streaming float64 pass."""
    if len(dataset) == 0:
        raise ValueError("compute_mean_activations needs a nonempty dataset")
    cfg = model.config
    head_sum = np.zeros((cfg.n_layers, cfg.n_heads, cfg.d_model))
    mlp_sum = np.zeros((cfg.n_layers, cfg.d_model))
    tokens = 0
    for start in range(0, len(dataset), chunk):
        part = dataset.take(np.arange(start, min(start + chunk, len(dataset))))
        res = forward(model, part, capture_components=True)
        valid = part.valid.astype(np.float64)
        tokens += int(part.valid.sum())
        for l in range(cfg.n_layers):
            head_sum[l] += np.einsum("bhtd,bt->hd", res.head_out[l], valid)
            mlp_sum[l] += np.einsum("btd,bt->d", res.mlp_out[l], valid)
    return ComponentMeans(head_sum / tokens, mlp_sum / tokens, len(dataset), tokens)


def kl_faithfulness_loss(full_logits, gated_logits) -> Tensor:
    """Mean over examples of KL(softmax(full) || softmax(gated)); full is a constant."""
    full = np.asarray(full_logits.data if isinstance(full_logits, Tensor) else full_logits,
                      dtype=np.float64)
    gated = gated_logits if isinstance(gated_logits, Tensor) else Tensor(gated_logits)
    if full.shape != gated.shape:
        raise DimensionError(f"kl loss: full logits {full.shape} vs gated {gated.shape}")
    log_p = T.log_softmax(Tensor(full)).data
    p = np.exp(log_p)
    log_q = T.log_softmax(gated)
    per_example = T.sum_(Tensor(p) * (Tensor(log_p) - log_q), axis=-1)
    return T.mean(per_example)


# ---------------------------------------------------------------------------
# Pruning loop
# ---------------------------------------------------------------------------


@dataclass
class PruneResult:
    gates: G.GateSet
    subnetwork: G.Subnetwork
    log: list[dict]
    trajectory: list[tuple[int, np.ndarray]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def prune(model: Model, train_data: PairBatch, config: PruneConfig,
          means: ComponentMeans | None = None,
          full_logits: np.ndarray | None = None) -> PruneResult:
    """Learn hard-concrete gates for every head and MLP with model weights frozen.

    ``full_logits`` may hold the full model's logits for ``train_data`` (row
    aligned); otherwise they are recomputed per batch.
    """
    cfg = model.config
    if means is None:
        means = compute_mean_activations(model, train_data)
    rng = np.random.default_rng([config.seed, 7])
    init = config.init_log_alpha + config.init_noise * rng.standard_normal(cfg.n_components)
    gates = G.GateSet.create(cfg.component_weights(), cfg.component_names(), init=init)
    b1, b2 = config.log_alpha_betas
    adam = T.AdamState.for_param(gates.log_alpha, lr=config.lr_log_alpha, beta1=b1, beta2=b2)
    warmup, total = config.schedule()
    state = G.LagrangianState(final_target=config.target_sparsity, warmup_steps=warmup,
                              lr_lambda=config.lr_lambda)
    run_log: list[dict] = []
    trajectory = [(0, gates.values().copy())]
    n = len(train_data)
    with model.frozen():
        for step in range(total):
            state.target = G.target_schedule(step, warmup, config.target_sparsity)
            idx = batch_indices(step, n, config.batch_size, config.seed + 1_000_003)
            batch = trim(train_data.take(idx))
            full = full_logits[idx] if full_logits is not None else predict(model, batch)
            z = G.sample_gates(gates, G.uniform_draws(len(gates), config.seed, step))
            gated = forward(model, batch, MaskAssignment.from_vector(cfg, z, means)).logits
            kl = kl_faithfulness_loss(full, gated)
            if not np.isfinite(kl.item()):
                raise PruneDiverged(step)
            t = G.expected_sparsity(gates)
            loss = kl + G.lagrangian_penalty(t, state)
            loss.backward()
            T.adam_step([gates.log_alpha], [adam])
            if config.log_alpha_clip is not None:
                np.clip(gates.log_alpha.data, -config.log_alpha_clip, config.log_alpha_clip,
                        out=gates.log_alpha.data)
            run_log.append({"step": step, "target": state.target,
                            "expected_sparsity": t.item(), "kl": kl.item(),
                            "lambda1": state.lambda1, "lambda2": state.lambda2})
            G.lagrangian_update(state, t.item())
            if (step + 1) % config.eval_every == 0:
                trajectory.append((step + 1, gates.values().copy()))
    if trajectory[-1][0] != total:
        trajectory.append((total, gates.values().copy()))
    threshold = G.choose_threshold(gates, config.target_sparsity, config.threshold_grid())
    sub = G.discretize(gates, threshold)
    sub.seed = config.seed
    sub.target_sparsity = config.target_sparsity
    warnings = []
    slack = gates.param_weight.max() / gates.param_weight.sum() + config.threshold_grid_stride
    if abs(sub.sparsity - config.target_sparsity) > slack:
        msg = (f"seed {config.seed}: discretized sparsity {sub.sparsity:.3f} misses target "
               f"{config.target_sparsity:.3f}")
        log.warning(msg)
        warnings.append(msg)
    return PruneResult(gates, sub, run_log, trajectory, warnings)


def apply_subnetwork(model: Model, subnetwork: G.Subnetwork,
                     means: ComponentMeans | None) -> MaskAssignment:
    """Kept components get gate 1; dropped ones are replaced by their mean."""
    cfg = model.config
    if subnetwork.keep.shape != (cfg.n_components,):
        raise ConfigurationError(f"subnetwork has {subnetwork.keep.size} components, "
                                 f"model has {cfg.n_components}")
    dropped = np.nonzero(~subnetwork.keep)[0]
    if dropped.size:
        if means is None:
            raise ConfigurationError("dropped components need cached means")
        for c in dropped:
            if not np.all(np.isfinite(means.vector(int(c), cfg))):
                raise ConfigurationError(f"missing mean for component {cfg.component_names()[c]}")
    return MaskAssignment.from_vector(cfg, subnetwork.keep.astype(np.float64), means)


def config_dict(config: PruneConfig) -> dict:
    return asdict(config)
