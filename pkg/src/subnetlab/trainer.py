"""Supervised fine-tuning with periodic checkpoints, and accuracy evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import Dropout, MaskAssignment, Model, PairBatch, forward, predict
from .taskgen import DatasetBundle, encode

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: "Checkpoint | None"):
        super().__init__(f"non-finite training loss at step {step}")
        self.step = step
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    total_steps: int = 3000
    checkpoint_every: int = 250
    eval_every: int = 250
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_seq_len: int = 32
    dropout: float = 0.0

    def __post_init__(self):
        for key in ("batch_size", "checkpoint_every", "eval_every", "max_seq_len"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive")
        if self.total_steps < 0 or self.lr < 0:
            raise ValueError("total_steps and lr must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class Checkpoint:
    step: int
    params: "OrderedDict[str, np.ndarray]"
    adam: list[T.AdamState]
    fingerprint: str
    rng_cursor: int

    def model(self, config) -> Model:
        from .model import init_model

        m = init_model(config, 0)
        m.load_state(self.params)
        return m


@dataclass
class EncodedData:
    """Model-ready splits: training data, ID validation, and OOD subcases."""

    train: PairBatch
    id_val: PairBatch
    ood: PairBatch
    vocab: list[str] = field(default_factory=list)

    @classmethod
    def from_bundle(cls, bundle: DatasetBundle, width: int | None = None) -> "EncodedData":
        ood = [e for subcase in bundle.ood.values() for e in subcase]
        all_ex = bundle.train + bundle.id_val + ood
        width = width or max(len(e.premise) + len(e.hypothesis) + 3 for e in all_ex)
        return cls(encode(bundle.train, bundle.vocab, width),
                   encode(bundle.id_val, bundle.vocab, width),
                   encode(ood, bundle.vocab, width), list(bundle.vocab))

    def eval_set(self) -> PairBatch:
        return PairBatch.concat([self.id_val, self.ood])


def trim(batch: PairBatch) -> PairBatch:
    """Drop trailing all-padding columns."""
    used = np.nonzero(batch.valid.any(axis=0))[0]
    width = int(used[-1]) + 1 if used.size else 1
    if width == batch.token_ids.shape[1]:
        return batch
    return PairBatch(batch.token_ids[:, :width], batch.segment_ids[:, :width],
                     batch.valid[:, :width], batch.labels, batch.subcases)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    counts: "OrderedDict[str, tuple[int, int]]"
    loss: "OrderedDict[str, float]" = field(default_factory=OrderedDict)

    def accuracy(self, subcase: str) -> float:
        correct, total = self.counts[subcase]
        return correct / total

    @property
    def overall(self) -> float:
        correct = sum(c for c, _ in self.counts.values())
        total = sum(t for _, t in self.counts.values())
        return correct / total if total else float("nan")

    @property
    def subcases(self) -> list[str]:
        return list(self.counts)

    def id_accuracy(self) -> float:
        return self.accuracy("id")

    def ood_accuracy(self) -> float:
        """Unweighted mean over OOD subcases."""
        accs = [self.accuracy(s) for s in self.counts if s != "id"]
        return float(np.mean(accs)) if accs else float("nan")

    def mixed_accuracy(self) -> float:
        return 0.5 * (self.id_accuracy() + self.ood_accuracy())

    def selector(self, name: str) -> float:
        if name == "id":
            return self.id_accuracy()
        if name == "ood":
            return self.ood_accuracy()
        if name == "mixed":
            return self.mixed_accuracy()
        return self.accuracy(name)

    def to_dict(self) -> dict:
        return {s: {"correct": c, "total": t, "accuracy": c / t}
                for s, (c, t) in self.counts.items()}


def _cross_entropy_np(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels]


def evaluate(model: Model, dataset: PairBatch, masks: MaskAssignment | None = None,
             logits: np.ndarray | None = None) -> EvalReport:
    """Per-subcase accuracy (and mean cross-entropy) of ``model`` on ``dataset``."""
    if logits is None:
        logits = predict(model, dataset, masks)
    pred = logits.argmax(axis=1)
    ce = _cross_entropy_np(logits, dataset.labels) if len(dataset) else np.zeros(0)
    tags = np.asarray(dataset.subcases, dtype=object)
    counts: OrderedDict[str, tuple[int, int]] = OrderedDict()
    losses: OrderedDict[str, float] = OrderedDict()
    for sub in dict.fromkeys(dataset.subcases):
        sel = tags == sub
        total = int(sel.sum())
        if total == 0:
            log.warning("subcase %s is empty; omitted", sub)
            continue
        counts[sub] = (int((pred[sel] == dataset.labels[sel]).sum()), total)
        losses[sub] = float(ce[sel].mean())
    return EvalReport(counts, losses)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def fingerprint(model_config, train_config: TrainConfig) -> str:
    blob = json.dumps({"model": asdict(model_config), "train": asdict(train_config)},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Indices for ``step``: epoch-wise permutations that depend only on (seed, epoch)."""
    per_epoch = max(1, n // batch_size)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[pos * batch_size:(pos + 1) * batch_size]


def _snapshot(model: Model, states, step, fp) -> Checkpoint:
    adam = [T.AdamState(s.m.copy(), s.v.copy(), s.step, s.beta1, s.beta2, s.eps, s.lr)
            for s in states]
    return Checkpoint(step, model.state(), adam, fp, step)


def dropout_for(step: int, config: TrainConfig) -> Dropout | None:
    """Dropout whose random stream depends only on (seed, step)."""
    if config.dropout <= 0.0:
        return None
    bitgen = np.random.Philox(key=[config.seed, 1], counter=[0, step, 0, 0])
    return Dropout(config.dropout, np.random.Generator(bitgen))


def _loss(model: Model, batch: PairBatch, dropout: Dropout | None = None):
    logits = forward(model, batch, dropout=dropout).logits
    picked = T.log_softmax(logits)[np.arange(len(batch)), batch.labels]
    return T.mean(picked) * -1.0, logits.data


@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]
    metrics: list[dict]


def fine_tune(model: Model, data: EncodedData, config: TrainConfig,
              resume: Checkpoint | None = None,
              on_checkpoint: Callable[[Checkpoint], None] | None = None,
              total_steps: int | None = None) -> TrainResult:
    """Cross-entropy training with Adam; checkpoints at step 0, every
    ``checkpoint_every`` steps and at the final step.

    ``total_steps`` overrides the config (used to stop early while keeping the
    fingerprint of the full run).
    """
    end = config.total_steps if total_steps is None else total_steps
    params = model.parameters()
    fp = fingerprint(model.config, config)
    if resume is None:
        states = [T.AdamState.for_param(p, config.lr, config.beta1, config.beta2,
                                        config.adam_eps) for p in params]
        start = 0
    else:
        model.load_state(resume.params)
        states = [T.AdamState(s.m.copy(), s.v.copy(), s.step, s.beta1, s.beta2, s.eps, s.lr)
                  for s in resume.adam]
        start = resume.step
    eval_set = data.eval_set()
    checkpoints: list[Checkpoint] = []
    metrics: list[dict] = []
    run_loss, run_correct, run_seen = 0.0, 0, 0
    last_good: Checkpoint | None = None

    def record(step):
        nonlocal run_loss, run_correct, run_seen
        if run_seen:
            metrics.append({"step": step, "split": "train", "subcase": "all",
                            "accuracy": run_correct / run_seen, "loss": run_loss / run_seen})
        report = evaluate(model, eval_set)
        for sub in report.subcases:
            metrics.append({"step": step, "split": "id_val" if sub == "id" else "ood",
                            "subcase": sub, "accuracy": report.accuracy(sub),
                            "loss": report.loss[sub]})
        run_loss, run_correct, run_seen = 0.0, 0, 0

    def checkpoint(step):
        nonlocal last_good
        ck = _snapshot(model, states, step, fp)
        checkpoints.append(ck)
        last_good = ck
        if on_checkpoint is not None:
            on_checkpoint(ck)

    if start == 0:
        record(0)
        checkpoint(0)
    else:
        last_good = resume
    n = len(data.train)
    for step in range(start + 1, end + 1):
        batch = trim(data.train.take(batch_indices(step - 1, n, config.batch_size, config.seed)))
        loss, logits = _loss(model, batch, dropout_for(step, config))
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(step, last_good)
        loss.backward()
        T.adam_step(params, states, storage_dtype=np.float32)
        run_loss += value * len(batch)
        run_correct += int((logits.argmax(1) == batch.labels).sum())
        run_seen += len(batch)
        if step % config.eval_every == 0 or step == end:
            record(step)
        if step % config.checkpoint_every == 0 or step == end:
            checkpoint(step)
    return TrainResult(checkpoints, metrics)


def restore(model: Model, checkpoint: Checkpoint) -> Model:
    model.load_state(checkpoint.params)
    return model


def subcase_order(reports: Sequence[EvalReport]) -> list[str]:
    seen: dict[str, None] = {}
    for r in reports:
        seen.update(dict.fromkeys(r.subcases))
    return list(seen)
