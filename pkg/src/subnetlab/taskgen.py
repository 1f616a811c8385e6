"""Synthetic sentence-pair task with a planted lexical-overlap heuristic.

Premises are ``filler* [IF] e1 [f e3] v e2 filler*`` and hypotheses are a
three-token clause ``a v b``.  The ground truth is structural: the
hypothesis is entailed iff ``a`` is the premise subject (its first entity),
``b`` is the object (first entity after the verb), the verbs agree, and no
``[IF]`` precedes the verb.

In-domain data makes "high word overlap => entailment" right almost all the
time.  Three adversarial subcases break it with 100% overlap:

* ``swap``      premise ``e1 v e2``, hypothesis ``e2 v e1``
* ``embed-if``  premise ``[IF] e1 v e2``, hypothesis ``e1 v e2``
* ``prep-like`` premise ``e1 f e3 v e2``, hypothesis ``e3 v e2``
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import PairBatch

log = logging.getLogger(__name__)

PAD, CLS, SEP, IF = "[PAD]", "[CLS]", "[SEP]", "[IF]"
SPECIALS = (PAD, CLS, SEP, IF)
OOD_SUBCASES = ("swap", "embed-if", "prep-like")
ENTAIL, NON_ENTAIL = 1, 0


class SchemaError(ValueError):
    """A dataset record violates the line format."""


class IngestionError(ValueError):
    """A dataset record references tokens outside the vocabulary."""


@dataclass(frozen=True)
class Example:
    premise: tuple[str, ...]
    hypothesis: tuple[str, ...]
    label: int
    subcase: str = "id"

    def to_json(self) -> str:
        return json.dumps({"premise": list(self.premise), "hypothesis": list(self.hypothesis),
                           "label": self.label, "subcase": self.subcase})


@dataclass(frozen=True)
class TaskSpec:
    n_entities: int = 24
    n_verbs: int = 8
    n_fillers: int = 12
    n_train: int = 20000
    n_val: int = 2000
    n_ood: int = 500
    heuristic_purity: float = 0.95
    adversarial_mix: tuple[float, float, float] = (0.5, 0.25, 0.25)
    pp_rate: float = 0.3
    if_distractor_rate: float = 0.15
    max_fillers: int = 2
    seed: int = 0

    def vocabulary(self) -> list[str]:
        return (list(SPECIALS)
                + [f"e{i}" for i in range(self.n_entities)]
                + [f"v{i}" for i in range(self.n_verbs)]
                + [f"f{i}" for i in range(self.n_fillers)])

    def max_length(self) -> int:
        premise = 2 * self.max_fillers + 1 + 5
        return 3 + premise + 3


@dataclass
class DatasetBundle:
    vocab: list[str]
    train: list[Example]
    id_val: list[Example]
    ood: dict[str, list[Example]] = field(default_factory=dict)

    def splits(self) -> dict[str, list[Example]]:
        out = {"train": self.train, "id_val": self.id_val}
        out.update({f"ood_{k}": v for k, v in self.ood.items()})
        return out


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------


def _kind(tok: str) -> str:
    if tok in SPECIALS:
        return tok
    return tok[0]


def parse_premise(premise: Sequence[str]) -> tuple[str | None, str | None, str | None, bool]:
    """(subject, verb, object, governed-by-IF) for a premise token sequence."""
    subj = verb = obj = None
    governed = False
    for tok in premise:
        k = _kind(tok)
        if verb is None:
            if tok == IF:
                governed = True
            elif k == "e" and subj is None:
                subj = tok
            elif k == "v":
                verb = tok
        elif k == "e":
            obj = tok
            break
    return subj, verb, obj, governed


def label_pair(premise: Sequence[str], hypothesis: Sequence[str]) -> int:
    """Entailment iff the hypothesis clause matches the premise's main clause."""
    subj, verb, obj, governed = parse_premise(premise)
    if len(hypothesis) != 3 or governed:
        return NON_ENTAIL
    return ENTAIL if tuple(hypothesis) == (subj, verb, obj) else NON_ENTAIL


def overlap(premise: Sequence[str], hypothesis: Sequence[str]) -> float:
    """Fraction of hypothesis tokens that also occur in the premise."""
    if not hypothesis:
        return 0.0
    pset = set(premise)
    return sum(t in pset for t in hypothesis) / len(hypothesis)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


class _Sampler:
    def __init__(self, spec: TaskSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.entities = [f"e{i}" for i in range(spec.n_entities)]
        self.verbs = [f"v{i}" for i in range(spec.n_verbs)]
        self.fillers = [f"f{i}" for i in range(spec.n_fillers)]

    def premise(self, *, pp: bool, governing_if: bool, distractor_if: bool):
        rng, spec = self.rng, self.spec
        ents = rng.choice(len(self.entities), size=3, replace=False)
        e1, e2, e3 = (self.entities[i] for i in ents)
        v = self.verbs[rng.integers(len(self.verbs))]
        n_lead = int(rng.integers(0, spec.max_fillers + 1))
        n_trail = int(rng.integers(0, spec.max_fillers + 1))
        fill = [self.fillers[i] for i in
                rng.choice(len(self.fillers), size=n_lead + n_trail + 1, replace=False)]
        lead, trail, prep = fill[:n_lead], fill[n_lead:n_lead + n_trail], fill[-1]
        core = [e1] + ([prep, e3] if pp else []) + [v, e2]
        if distractor_if:
            trail = trail[:]
            trail.insert(int(rng.integers(0, len(trail) + 1)), IF)
        premise = lead + ([IF] if governing_if else []) + core + trail
        return tuple(premise), (e1, v, e2, e3)

    def fresh_pair(self, used: Iterable[str]) -> tuple[str, str]:
        pool = [e for e in self.entities if e not in set(used)]
        i, j = self.rng.choice(len(pool), size=2, replace=False)
        return pool[i], pool[j]

    def adversarial(self, kind: str, subcase: str) -> Example:
        if kind == "swap":
            prem, (e1, v, e2, _) = self.premise(pp=False, governing_if=False,
                                                distractor_if=False)
            hyp = (e2, v, e1)
        elif kind == "embed-if":
            prem, (e1, v, e2, _) = self.premise(pp=False, governing_if=True,
                                                distractor_if=False)
            hyp = (e1, v, e2)
        elif kind == "prep-like":
            prem, (e1, v, e2, e3) = self.premise(pp=True, governing_if=False,
                                                 distractor_if=False)
            hyp = (e3, v, e2)
        else:
            raise ValueError(f"unknown adversarial kind {kind!r}")
        return Example(prem, hyp, NON_ENTAIL, subcase)

    def in_domain(self, label: int) -> Example:
        rng, spec = self.rng, self.spec
        pp = bool(rng.random() < spec.pp_rate)
        if label == ENTAIL:
            distract = bool(rng.random() < spec.if_distractor_rate)
            prem, (e1, v, e2, _) = self.premise(pp=pp, governing_if=False, distractor_if=distract)
            return Example(prem, (e1, v, e2), ENTAIL, "id")
        if rng.random() < spec.heuristic_purity:
            distract = bool(rng.random() < spec.if_distractor_rate)
            prem, (e1, v, e2, e3) = self.premise(pp=pp, governing_if=False,
                                                 distractor_if=distract)
            a, b = self.fresh_pair((e1, e2, e3))
            return Example(prem, (a, v, b), NON_ENTAIL, "id")
        mix = np.asarray(spec.adversarial_mix, dtype=np.float64)
        kind = OOD_SUBCASES[int(rng.choice(len(OOD_SUBCASES), p=mix / mix.sum()))]
        return self.adversarial(kind, "id")


def _check_spec(spec: TaskSpec) -> None:
    for key in ("n_entities", "n_verbs", "n_fillers", "n_train", "n_val", "n_ood"):
        if getattr(spec, key) <= 0:
            raise ValueError(f"{key} must be positive")
    if not 0.5 < spec.heuristic_purity <= 1.0:
        raise ValueError("heuristic_purity must lie in (0.5, 1]")
    if spec.n_entities < 5:
        raise ValueError("need at least 5 entities (three in the premise, two fresh)")
    if spec.n_fillers < 2 * spec.max_fillers + 1:
        raise ValueError(f"need at least {2 * spec.max_fillers + 1} fillers for "
                         f"max_fillers={spec.max_fillers}")
    # distinct (subject, verb, object, first filler) combinations
    capacity = spec.n_entities * (spec.n_entities - 1) * spec.n_verbs * spec.n_fillers
    requested = spec.n_train + spec.n_val
    if capacity < requested:
        raise ValueError(f"vocabulary too small: {capacity} distinct premises for "
                         f"{requested} requested examples")


def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.array([ENTAIL, NON_ENTAIL] * (n // 2) + [ENTAIL] * (n % 2))
    return labels[rng.permutation(n)]


def generate_task(spec: TaskSpec) -> DatasetBundle:
    """Deterministic bundle: train, id_val and one OOD split per adversarial subcase."""
    _check_spec(spec)
    root = np.random.SeedSequence(spec.seed)
    s_train, s_val, s_ood = root.spawn(3)

    def split(seed_seq, n):
        rng = np.random.default_rng(seed_seq)
        sampler = _Sampler(spec, rng)
        return [sampler.in_domain(int(lab)) for lab in _balanced_labels(n, rng)]

    train = split(s_train, spec.n_train)
    id_val = split(s_val, spec.n_val)
    ood = {}
    for name, ss in zip(OOD_SUBCASES, s_ood.spawn(len(OOD_SUBCASES))):
        sampler = _Sampler(spec, np.random.default_rng(ss))
        ood[name] = [sampler.adversarial(name, name) for _ in range(spec.n_ood)]
    bundle = DatasetBundle(spec.vocabulary(), train, id_val, ood)
    for ex in (e for part in bundle.splits().values() for e in part):
        assert label_pair(ex.premise, ex.hypothesis) == ex.label, ex
    return bundle


# ---------------------------------------------------------------------------
# Encoding and files
# ---------------------------------------------------------------------------


def encode(examples: Sequence[Example], vocab: Sequence[str], width: int | None = None) -> PairBatch:
    """``[CLS] premise [SEP] hypothesis [SEP]`` with segment ids 0/1 and right padding."""
    index = {tok: i for i, tok in enumerate(vocab)}
    lengths = [len(e.premise) + len(e.hypothesis) + 3 for e in examples]
    width = width or max(lengths, default=1)
    n = len(examples)
    ids = np.full((n, width), index[PAD], dtype=np.int64)
    seg = np.zeros((n, width), dtype=np.int64)
    valid = np.zeros((n, width), dtype=bool)
    for i, ex in enumerate(examples):
        toks = [CLS, *ex.premise, SEP, *ex.hypothesis, SEP]
        if len(toks) > width:
            raise ValueError(f"example {i} has {len(toks)} tokens, width is {width}")
        ids[i, :len(toks)] = [index[t] for t in toks]
        seg[i, len(ex.premise) + 2:len(toks)] = 1
        valid[i, :len(toks)] = True
    return PairBatch(ids, seg, valid, np.array([e.label for e in examples], dtype=np.int64),
                     tuple(e.subcase for e in examples))


def save_jsonl(path: str | Path, examples: Iterable[Example]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")
    tmp.replace(path)


def load_jsonl(path: str | Path, vocab: Sequence[str]) -> list[Example]:
    """Read one split; every token must be in ``vocab``."""
    known = set(vocab)
    out: list[Example] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise SchemaError(f"{path}:{lineno}: record must be an object")
            for key in ("premise", "hypothesis", "label", "subcase"):
                if key not in rec:
                    raise SchemaError(f"{path}:{lineno}: missing field {key!r}")
            if rec["label"] not in (0, 1) or isinstance(rec["label"], bool):
                raise SchemaError(f"{path}:{lineno}: label must be 0 or 1, got {rec['label']!r}")
            if not isinstance(rec["subcase"], str):
                raise SchemaError(f"{path}:{lineno}: subcase must be a string")
            for key in ("premise", "hypothesis"):
                if not isinstance(rec[key], list) or not all(isinstance(t, str) for t in rec[key]):
                    raise SchemaError(f"{path}:{lineno}: {key} must be a list of tokens")
                unknown = [t for t in rec[key] if t not in known]
                if unknown:
                    raise IngestionError(f"{path}:{lineno}: unknown tokens {unknown}")
            out.append(Example(tuple(rec["premise"]), tuple(rec["hypothesis"]),
                               int(rec["label"]), rec["subcase"]))
    if not out:
        log.warning("%s: no examples found", path)
    return out


def save_vocab(path: str | Path, vocab: Sequence[str]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(t + "\n" for t in vocab))
    tmp.replace(path)


def load_vocab(path: str | Path) -> list[str]:
    return [line.rstrip("\n") for line in Path(path).read_text().splitlines()]


def save_bundle(directory: str | Path, bundle: DatasetBundle) -> dict[str, str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_vocab(directory / "vocab.txt", bundle.vocab)
    files = {"vocab": "vocab.txt"}
    for name, examples in bundle.splits().items():
        save_jsonl(directory / f"{name}.jsonl", examples)
        files[name] = f"{name}.jsonl"
    return files


def load_bundle(directory: str | Path) -> DatasetBundle:
    directory = Path(directory)
    vocab = load_vocab(directory / "vocab.txt")
    train = load_jsonl(directory / "train.jsonl", vocab)
    id_val = load_jsonl(directory / "id_val.jsonl", vocab)
    ood = {}
    for path in sorted(directory.glob("ood_*.jsonl")):
        ood[path.stem[len("ood_"):]] = load_jsonl(path, vocab)
    ordered = {k: ood[k] for k in OOD_SUBCASES if k in ood}
    ordered.update({k: v for k, v in ood.items() if k not in ordered})
    return DatasetBundle(vocab, train, id_val, ordered)


def spec_dict(spec: TaskSpec) -> dict:
    return asdict(spec)
