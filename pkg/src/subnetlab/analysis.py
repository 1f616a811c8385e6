"""Measurements over collections of pruned subnetworks.

Effective size, head membership frequencies, rank agreement, the all-seed
core and its random-baseline expectation, mean-ablation sweeps and the
repeated-token attention statistic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .gates import Subnetwork
from .model import ComponentMeans, MaskAssignment, Model, PairBatch
from .trainer import EvalReport, evaluate

SELECTORS = ("id", "ood", "mixed")


@dataclass(frozen=True)
class FaithfulnessQuery:
    selectors: tuple[str, ...] = SELECTORS
    tolerance: float = 0.03
    grid: tuple[float, ...] = tuple(round(0.05 * k, 2) for k in range(1, 20))
    seeds: tuple[int, ...] = (42, 43, 44)

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if any(not 0.0 <= s <= 1.0 for s in self.grid):
            raise ValueError("grid sparsities must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Effective size
# ---------------------------------------------------------------------------


@dataclass
class EffectiveSize:
    size: dict[str, float]
    chosen: dict[str, float | None]
    full_accuracy: dict[str, float]
    curve: dict[float, dict[str, float]] = field(default_factory=dict)
    subnetworks: dict[float, list[Subnetwork]] = field(default_factory=dict)

    def retained(self, selector: str) -> float | None:
        """Mean actual retained fraction of the subnetworks behind ``size``."""
        s = self.chosen[selector]
        if s is None:
            return None
        return float(np.mean([1.0 - sub.sparsity for sub in self.subnetworks[s]]))


def effective_size(model: Model, eval_set: PairBatch, query: FaithfulnessQuery,
                   prune_fn: Callable[[float, int], Subnetwork],
                   means: ComponentMeans,
                   full_report: EvalReport | None = None) -> EffectiveSize:
    """1 - (highest grid sparsity whose seed-averaged accuracy stays within
    ``tolerance`` of the full model), per selector; 1.0 when nothing is faithful.

    Grid points are visited from sparsest to densest and the scan stops once
    every selector has found its answer, so the result equals a full scan.
    """
    full = full_report or evaluate(model, eval_set)
    full_acc = {s: full.selector(s) for s in query.selectors}
    chosen: dict[str, float | None] = {s: None for s in query.selectors}
    curve: dict[float, dict[str, float]] = {}
    subs: dict[float, list[Subnetwork]] = {}
    for sparsity in sorted(query.grid, reverse=True):
        if all(chosen[s] is not None for s in query.selectors):
            break
        reports = []
        subs[sparsity] = []
        for seed in query.seeds:
            sub = prune_fn(sparsity, seed)
            subs[sparsity].append(sub)
            masks = MaskAssignment.from_vector(model.config, sub.keep.astype(float), means)
            reports.append(evaluate(model, eval_set, masks))
        curve[sparsity] = {s: float(np.mean([r.selector(s) for r in reports]))
                           for s in query.selectors}
        for s in query.selectors:
            if chosen[s] is None and abs(curve[sparsity][s] - full_acc[s]) <= query.tolerance + 1e-12:
                chosen[s] = sparsity
    size = {s: 1.0 if chosen[s] is None else round(1.0 - chosen[s], 10) for s in query.selectors}
    return EffectiveSize(size, chosen, full_acc, curve, subs)


# ---------------------------------------------------------------------------
# Frequencies, rank agreement, intersection
# ---------------------------------------------------------------------------


@dataclass
class FrequencyTable:
    names: list[str]
    counts: np.ndarray
    collection: int
    is_head: np.ndarray

    def heads(self) -> dict[str, int]:
        return {n: int(c) for n, c, h in zip(self.names, self.counts, self.is_head) if h}

    def mlps(self) -> dict[str, int]:
        return {n: int(c) for n, c, h in zip(self.names, self.counts, self.is_head) if not h}

    def head_counts(self) -> np.ndarray:
        return self.counts[self.is_head]


def _check_space(subnetworks: Sequence[Subnetwork]) -> None:
    if not subnetworks:
        raise ValueError("need at least one subnetwork")
    ref = subnetworks[0]
    for s in subnetworks[1:]:
        if s.keep.shape != ref.keep.shape or (s.names and ref.names and s.names != ref.names):
            raise ValueError("subnetworks are over different component spaces")


def head_frequencies(subnetworks: Sequence[Subnetwork]) -> FrequencyTable:
    """How many subnetworks keep each component; heads and MLPs flagged apart."""
    _check_space(subnetworks)
    keep = np.stack([s.keep for s in subnetworks])
    names = list(subnetworks[0].names) or [str(i) for i in range(keep.shape[1])]
    is_head = np.array([not n.endswith("MLP") for n in names])
    return FrequencyTable(names, keep.sum(axis=0).astype(int), len(subnetworks), is_head)


@dataclass
class SpearmanResult:
    rho: float | None
    p_value: float | None
    n: int

    @property
    def defined(self) -> bool:
        return self.rho is not None


def spearman_rho(a: Sequence[float], b: Sequence[float]) -> SpearmanResult:
    """Average-rank Spearman coefficient; two-sided p-value from the t
    approximation with n - 2 degrees of freedom.  Constant input gives an
    undefined result (``rho is None``)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("spearman_rho needs two 1-D vectors of equal length")
    n = a.size
    if n < 3:
        raise ValueError("spearman_rho needs at least 3 observations")
    ra, rb = stats.rankdata(a), stats.rankdata(b)
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = math.sqrt(float((da * da).sum() * (db * db).sum()))
    if denom == 0.0:
        return SpearmanResult(None, None, n)
    rho = float(np.clip((da * db).sum() / denom, -1.0, 1.0))
    if abs(rho) == 1.0:
        return SpearmanResult(rho, 0.0, n)
    tstat = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = float(2.0 * stats.t.sf(abs(tstat), n - 2))
    return SpearmanResult(rho, p, n)


def core_intersection(subnetworks: Sequence[Subnetwork]) -> list[int]:
    """Indices of components kept by every subnetwork."""
    _check_space(subnetworks)
    keep = np.logical_and.reduce([s.keep for s in subnetworks])
    return [int(i) for i in np.nonzero(keep)[0]]


def expected_random_intersection(n_components: int, keep_prob: float, n_subnetworks: int) -> float:
    """Expected size of the intersection of independent random keep-sets."""
    if not 0.0 <= keep_prob <= 1.0:
        raise ValueError("keep_prob must lie in [0, 1]")
    return n_components * keep_prob ** n_subnetworks


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


@dataclass
class AblationRow:
    components: tuple[str, ...]
    accuracy: dict[str, float]
    delta: dict[str, float]
    superadditivity: dict[str, float] | None = None

    @property
    def label(self) -> str:
        return "none" if not self.components else "&".join(self.components)


def ablation_masks(model: Model, components: Iterable[str], means: ComponentMeans) -> MaskAssignment:
    names = model.config.component_names()
    keep = np.ones(len(names))
    for c in components:
        if c not in names:
            raise ValueError(f"unknown component {c!r}")
        keep[names.index(c)] = 0.0
    return MaskAssignment.from_vector(model.config, keep, means)


def ablation_sweep(model: Model, component_sets: Sequence[Sequence[str]],
                   datasets: PairBatch, means: ComponentMeans) -> list[AblationRow]:
    """Mean-ablate each set from the full model.

    Accuracies are keyed by subcase.  For multi-component sets the
    ``superadditivity`` entry is joint delta minus the sum of singleton deltas;
    negative values mean the joint drop is larger than the parts.
    """
    names = model.config.component_names()
    for cs in component_sets:
        for c in cs:
            if c not in names:
                raise ValueError(f"unknown component {c!r}")
    base = evaluate(model, datasets)
    base_acc = {s: base.accuracy(s) for s in base.subcases}
    cache: dict[tuple[str, ...], dict[str, float]] = {(): base_acc}

    def acc_for(cs: tuple[str, ...]) -> dict[str, float]:
        if cs not in cache:
            rep = evaluate(model, datasets, ablation_masks(model, cs, means))
            cache[cs] = {s: rep.accuracy(s) for s in rep.subcases}
        return cache[cs]

    rows = [AblationRow((), dict(base_acc), {s: 0.0 for s in base_acc})]
    for cs in component_sets:
        key = tuple(cs)
        if not key:
            continue
        acc = acc_for(key)
        delta = {s: acc[s] - base_acc[s] for s in acc}
        superadd = None
        if len(key) > 1:
            singles = [acc_for((c,)) for c in key]
            superadd = {s: delta[s] - sum(single[s] - base_acc[s] for single in singles)
                        for s in acc}
        rows.append(AblationRow(key, acc, delta, superadd))
    return rows


# ---------------------------------------------------------------------------
# Attention between repeated tokens
# ---------------------------------------------------------------------------


def repeated_token_attention(attention: Sequence[np.ndarray], batch: PairBatch,
                             special_ids: Iterable[int] = (0, 1, 2)) -> np.ndarray:
    """Fraction of attention that tokens occurring in both sentences pay to
    the same token type in the other sentence, micro-averaged over the batch.

    ``attention`` is one (B, H, T, T) array per layer.  Returns an
    (n_layers, n_heads) array; heads with no qualifying queries get NaN.
    """
    ids = batch.token_ids
    special = np.isin(ids, list(special_ids))
    content = batch.valid & ~special
    prem = content & (batch.segment_ids == 0)
    hyp = content & (batch.segment_ids == 1)
    same = ids[:, :, None] == ids[:, None, :]
    opposite = (prem[:, :, None] & hyp[:, None, :]) | (hyp[:, :, None] & prem[:, None, :])
    target = same & opposite  # (B, Tq, Tk)
    query = target.any(axis=2)  # query's token appears in the other sentence
    valid_k = batch.valid[:, None, :]
    out = np.full((len(attention), attention[0].shape[1]), np.nan)
    for l, a in enumerate(attention):
        num = np.einsum("bhqk,bqk->h", a, (target & query[:, :, None]).astype(np.float64))
        den = np.einsum("bhqk,bqk->h", a, (query[:, :, None] & valid_k).astype(np.float64))
        with np.errstate(invalid="ignore", divide="ignore"):
            out[l] = np.where(den > 0, num / den, np.nan)
    return out


def collect_attention(model: Model, batch: PairBatch, chunk: int = 256) -> np.ndarray:
    """Repeated-token attention over a whole dataset (micro-averaged across chunks)."""
    from .model import forward

    cfg = model.config
    num = np.zeros((cfg.n_layers, cfg.n_heads))
    den = np.zeros((cfg.n_layers, cfg.n_heads))
    for start in range(0, len(batch), chunk):
        part = batch.take(np.arange(start, min(start + chunk, len(batch))))
        res = forward(model, part, capture_attention=True)
        n_, d_ = _overlap_sums(res.attention, part)
        num += n_
        den += d_
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / den, np.nan)


def _overlap_sums(attention, batch, special_ids=(0, 1, 2)):
    ids = batch.token_ids
    content = batch.valid & ~np.isin(ids, list(special_ids))
    prem = content & (batch.segment_ids == 0)
    hyp = content & (batch.segment_ids == 1)
    target = (ids[:, :, None] == ids[:, None, :]) & (
        (prem[:, :, None] & hyp[:, None, :]) | (hyp[:, :, None] & prem[:, None, :]))
    query = target.any(axis=2)
    tq = (target & query[:, :, None]).astype(np.float64)
    vq = (query[:, :, None] & batch.valid[:, None, :]).astype(np.float64)
    num = np.stack([np.einsum("bhqk,bqk->h", a, tq) for a in attention])
    den = np.stack([np.einsum("bhqk,bqk->h", a, vq) for a in attention])
    return num, den


def mapping_rows(mapping: Mapping[str, float]) -> list[tuple[str, float]]:
    return sorted(mapping.items())
