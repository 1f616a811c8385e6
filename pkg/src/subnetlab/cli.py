"""``subnetlab`` command line: one subcommand per pipeline stage.

All stages share an output root (``--out``); each writes into its own
subdirectory and reads the artifacts of earlier stages from their fixed
locations::

    data/            gen-data
    train/           train        (checkpoints/step_NNNNNN, metrics.csv)
    prune/           prune        (subnetworks.csv, prune_accuracy.csv, runs/)
    ablation/        ablate       (ablation.csv)
    effective_size/  effective-size
    analysis/        analyze
    attention/       attn-overlap
    report/          report
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import plots
from .analysis import (ablation_sweep, collect_attention, core_intersection, effective_size,
                       expected_random_intersection, head_frequencies, spearman_rho)
from .gates import Subnetwork
from .model import ComponentMeans, Model, init_model, predict
from .persist import (CONFIG_FILE, ArtifactError, atomic_write, checkpoint_dir, checkpoint_dirs,
                      load_checkpoint, read_csv, save_checkpoint, write_csv, write_manifest)
from .pruner import RUN_LOG_HEADER, apply_subnetwork, compute_mean_activations, prune
from .runconfig import ConfigError, RunConfig, known_keys
from .taskgen import generate_task, load_bundle, save_bundle
from .trainer import EncodedData, evaluate, fine_tune, fingerprint

log = logging.getLogger("subnetlab")

COMMANDS = ("gen-data", "train", "prune", "ablate", "effective-size", "analyze",
            "attn-overlap", "report")

METRICS_HEADER = ("step", "split", "subcase", "accuracy", "loss")
EFFECTIVE_SIZE_HEADER = ("step", "selector", "effective_size")
CURVE_HEADER = ("step", "sparsity", "selector", "accuracy")
FREQUENCY_HEADER = ("component", "count", "collection")
ABLATION_HEADER = ("set", "dataset", "subcase", "accuracy", "delta", "superadditivity")
OVERLAP_HEADER = ("layer", "head", "fraction")
SUBNETWORK_HEADER = ("sparsity", "seed", "threshold", "achieved_sparsity", "keep")
PRUNE_ACC_HEADER = ("sparsity", "seed", "subcase", "accuracy")
SUMMARY_HEADER = ("metric", "value")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Shared loading helpers
# ---------------------------------------------------------------------------


def _require(path: Path) -> Path:
    if not path.exists():
        raise ArtifactError(f"missing input {path}")
    return path


def _load_data(root: Path) -> EncodedData:
    data_dir = _require(root / "data")
    _require(data_dir / "train.jsonl")
    bundle = load_bundle(data_dir)
    return EncodedData.from_bundle(bundle)


def _load_model(root: Path, cfg: RunConfig, data: EncodedData, step: int | None = None):
    dirs = checkpoint_dirs(_require(root / "train"))
    if not dirs:
        raise ArtifactError(f"missing input {root / 'train' / 'checkpoints'}")
    path = dirs[-1] if step is None else _require(checkpoint_dir(root / "train", step))
    ck = load_checkpoint(path)
    model_cfg = cfg.model_config(data.vocab)
    expected = fingerprint(model_cfg, cfg.train_config())
    if ck.fingerprint != expected:
        raise ArtifactError(f"{path}: checkpoint fingerprint {ck.fingerprint} does not match "
                            f"the configuration ({expected})")
    return ck.model(model_cfg), ck


def _means_set(cfg: RunConfig, data: EncodedData):
    n = cfg.get("analysis.means_examples")
    if n and n < len(data.train):
        return data.train.take(np.arange(n))
    return data.train


def _finish(out: Path, cfg: RunConfig, kind: str, extra: dict | None = None) -> None:
    atomic_write(out / CONFIG_FILE, cfg.text())
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*")
                   if p.is_file() and p.name != "manifest.json")
    write_manifest(out, kind, files, extra)


def _tag(sparsity: float) -> str:
    return f"s{sparsity:.2f}"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, root: Path, jobs: int) -> None:
    spec = cfg.task_spec()
    bundle = generate_task(spec)
    out = root / "data"
    save_bundle(out, bundle)
    sizes = {name: len(v) for name, v in bundle.splits().items()}
    _finish(out, cfg, "data", {"sizes": sizes})
    log.info("wrote %s (%s)", out, sizes)


def cmd_train(cfg: RunConfig, root: Path, jobs: int) -> None:
    data = _load_data(root)
    model_cfg = cfg.model_config(data.vocab)
    train_cfg = cfg.train_config()
    out = root / "train"
    model = init_model(model_cfg, train_cfg.seed)

    def on_checkpoint(ck):
        save_checkpoint(checkpoint_dir(out, ck.step), ck)

    result = fine_tune(model, data, train_cfg, on_checkpoint=on_checkpoint)
    write_csv(out / "metrics.csv", METRICS_HEADER, result.metrics)
    curve = [r for r in result.metrics if r["split"] != "train"]
    write_csv(out / "accuracy_curve.csv", METRICS_HEADER, curve)
    plots.line_plot(out / "accuracy_curve.csv", "step", "accuracy", "subcase",
                    out / "accuracy_curve.svg", title="accuracy during training")
    _finish(out, cfg, "train", {"fingerprint": fingerprint(model_cfg, train_cfg),
                                "steps": [ck.step for ck in result.checkpoints]})


def _prune_one(args):
    """Worker for one (sparsity, seed) pair; loads everything it needs."""
    root, values, sparsity, seed, shared = args
    cfg = RunConfig(values)
    if shared is None:
        data = _load_data(root)
        model, _ = _load_model(root, cfg, data, cfg.get("prune.checkpoint"))
        means = _load_means(root / "prune")
        full_logits = predict(model, data.train)
    else:
        data, model, means, full_logits = shared
    res = prune(model, data.train, cfg.prune_config(sparsity, seed), means=means,
                full_logits=full_logits)
    report = evaluate(model, data.eval_set(), apply_subnetwork(model, res.subnetwork, means))
    return sparsity, seed, res.subnetwork, res.log, report


def _save_means(path: Path, means: ComponentMeans) -> None:
    import io

    buf = io.BytesIO()
    np.savez(buf, head=means.head, mlp=means.mlp, n_examples=means.n_examples,
             n_tokens=means.n_tokens)
    atomic_write(path, buf.getvalue())


def _load_means(prune_dir: Path) -> ComponentMeans:
    with np.load(_require(prune_dir / "means.npz")) as z:
        return ComponentMeans(z["head"], z["mlp"], int(z["n_examples"]), int(z["n_tokens"]))


def cmd_prune(cfg: RunConfig, root: Path, jobs: int) -> None:
    data = _load_data(root)
    model, ck = _load_model(root, cfg, data, cfg.get("prune.checkpoint"))
    out = root / "prune"
    means = compute_mean_activations(model, _means_set(cfg, data))
    _save_means(out / "means.npz", means)
    tasks = [(s, seed) for s in cfg.get("prune.sparsities") for seed in cfg.get("run.seeds")]
    if jobs > 1:
        payload = [(root, cfg.values, s, seed, None) for s, seed in tasks]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_prune_one, payload))
    else:
        shared = (data, model, means, predict(model, data.train))
        results = [_prune_one((root, cfg.values, s, seed, shared)) for s, seed in tasks]
    sub_rows, acc_rows = [], []
    for sparsity, seed, sub, run_log, report in results:
        run_dir = out / "runs" / f"{_tag(sparsity)}_seed{seed}"
        write_csv(run_dir / "run_log.csv", RUN_LOG_HEADER, run_log)
        atomic_write(run_dir / "subnetwork.json", json.dumps(sub.to_dict(), indent=1))
        sub_rows.append((sparsity, seed, sub.threshold, sub.sparsity,
                         "".join("1" if k else "0" for k in sub.keep)))
        acc_rows += [(sparsity, seed, s, report.accuracy(s)) for s in report.subcases]
    full = evaluate(model, data.eval_set())
    acc_rows += [(0.0, "full", s, full.accuracy(s)) for s in full.subcases]
    write_csv(out / "subnetworks.csv", SUBNETWORK_HEADER, sub_rows)
    write_csv(out / "prune_accuracy.csv", PRUNE_ACC_HEADER, acc_rows)
    plots.scatter_plot(out / "prune_accuracy.csv", "sparsity", "accuracy", "subcase",
                       out / "prune_accuracy.svg", title="subnetwork accuracy by sparsity")
    _finish(out, cfg, "prune", {"checkpoint_step": ck.step,
                                "components": model.config.component_names()})


def _load_subnetworks(root: Path, model: Model | None = None) -> dict[float, list[Subnetwork]]:
    _, rows = read_csv(root / "prune" / "subnetworks.csv")
    out: dict[float, list[Subnetwork]] = {}
    for r in rows:
        sparsity, seed = float(r["sparsity"]), int(r["seed"])
        sub = Subnetwork.from_dict(json.loads(
            _require(root / "prune" / "runs" / f"{_tag(sparsity)}_seed{seed}" /
                     "subnetwork.json").read_text()))
        out.setdefault(sparsity, []).append(sub)
    if not out:
        raise ArtifactError(f"no subnetworks listed in {root / 'prune' / 'subnetworks.csv'}")
    return out


def _parse_sets(entries: Sequence[str]) -> list[list[str]]:
    return [[c for c in e.split("+") if c] for e in entries if e]


def cmd_ablate(cfg: RunConfig, root: Path, jobs: int) -> None:
    data = _load_data(root)
    model, _ = _load_model(root, cfg, data, cfg.get("prune.checkpoint"))
    means = _load_means(root / "prune")
    sets = _parse_sets(cfg.get("analysis.ablate"))
    if not sets:
        collections = _load_subnetworks(root)
        everything = [s for subs in collections.values() for s in subs]
        names = model.config.component_names()
        core = [names[i] for i in core_intersection(everything) if not names[i].endswith("MLP")]
        sets = [[c] for c in core] + ([core] if len(core) > 1 else [])
        log.info("ablating core heads %s", core)
    rows = ablation_sweep(model, sets, data.eval_set(), means)
    out_rows = []
    for row in rows:
        for sub, acc in row.accuracy.items():
            sa = row.superadditivity[sub] if row.superadditivity is not None else None
            out_rows.append((row.label, "id" if sub == "id" else "ood", sub, acc,
                             row.delta[sub], sa))
    out = root / "ablation"
    write_csv(out / "ablation.csv", ABLATION_HEADER, out_rows)
    _finish(out, cfg, "ablation")


def cmd_effective_size(cfg: RunConfig, root: Path, jobs: int) -> None:
    data = _load_data(root)
    query = cfg.query()
    steps = list(cfg.get("analysis.checkpoints"))
    if not steps:
        steps = [load_checkpoint(p).step for p in checkpoint_dirs(_require(root / "train"))]
    if not steps:
        raise ArtifactError(f"missing input {root / 'train' / 'checkpoints'}")
    eval_set = data.eval_set()
    size_rows, curve_rows = [], []
    for step in steps:
        model, _ = _load_model(root, cfg, data, step)
        means = compute_mean_activations(model, _means_set(cfg, data))
        full_logits = predict(model, data.train)

        def prune_fn(sparsity, seed, model=model, means=means, full_logits=full_logits):
            return prune(model, data.train, cfg.prune_config(sparsity, seed), means=means,
                         full_logits=full_logits).subnetwork

        res = effective_size(model, eval_set, query, prune_fn, means)
        size_rows += [(step, s, res.size[s]) for s in query.selectors]
        curve_rows += [(step, sp, s, acc) for sp in sorted(res.curve)
                       for s, acc in res.curve[sp].items()]
        log.info("step %d effective size %s", step, res.size)
    out = root / "effective_size"
    write_csv(out / "effective_size.csv", EFFECTIVE_SIZE_HEADER, size_rows)
    write_csv(out / "effective_size_curve.csv", CURVE_HEADER, curve_rows)
    plots.line_plot(out / "effective_size.csv", "step", "effective_size", "selector",
                    out / "effective_size.svg", title="effective size over training")
    _finish(out, cfg, "effective_size")


def cmd_analyze(cfg: RunConfig, root: Path, jobs: int) -> None:
    collections = _load_subnetworks(root)
    out = root / "analysis"
    summary = []
    tables = {}
    for sparsity in sorted(collections):
        subs = collections[sparsity]
        table = head_frequencies(subs)
        tables[sparsity] = table
        d = out / _tag(sparsity)
        write_csv(d / "frequencies.csv", FREQUENCY_HEADER,
                  [(n, int(c), table.collection) for n, c in zip(table.names, table.counts)])
        plots.head_heatmap(d / "frequencies.csv", "count", d / "frequencies.svg",
                           title=f"head frequency at sparsity {sparsity:.2f}")
        core = [table.names[i] for i in core_intersection(subs) if table.is_head[i]]
        keep_prob = float(np.mean([s.keep[table.is_head].mean() for s in subs]))
        n_heads = int(table.is_head.sum())
        summary += [
            (f"{_tag(sparsity)}.collection", len(subs)),
            (f"{_tag(sparsity)}.core_heads", ";".join(core)),
            (f"{_tag(sparsity)}.core_size", len(core)),
            (f"{_tag(sparsity)}.mean_head_keep", keep_prob),
            (f"{_tag(sparsity)}.expected_random_intersection",
             expected_random_intersection(n_heads, keep_prob, len(subs))),
        ]
    levels = sorted(tables)
    for a, b in zip(levels, levels[1:]):
        rho = spearman_rho(tables[a].head_counts(), tables[b].head_counts())
        key = f"spearman.{_tag(a)}_{_tag(b)}"
        summary += [(f"{key}.rho", "undefined" if rho.rho is None else rho.rho),
                    (f"{key}.p_value", "undefined" if rho.p_value is None else rho.p_value)]
    everything = [s for subs in collections.values() for s in subs]
    names = tables[levels[0]].names
    summary.append(("all.core_components",
                    ";".join(names[i] for i in core_intersection(everything))))
    write_csv(out / "summary.csv", SUMMARY_HEADER, summary)
    _finish(out, cfg, "analysis")


def cmd_attn_overlap(cfg: RunConfig, root: Path, jobs: int) -> None:
    data = _load_data(root)
    model, _ = _load_model(root, cfg, data, cfg.get("prune.checkpoint"))
    ev = data.eval_set()
    n = min(cfg.get("analysis.attention_examples") or len(ev), len(ev))
    frac = collect_attention(model, ev.take(np.arange(n)))
    rows = [(l, h, frac[l, h]) for l in range(frac.shape[0]) for h in range(frac.shape[1])]
    out = root / "attention"
    write_csv(out / "attention_overlap.csv", OVERLAP_HEADER, rows)
    plots.head_heatmap(out / "attention_overlap.csv", "fraction", out / "attention_overlap.svg",
                       title="attention between repeated tokens")
    _finish(out, cfg, "attention", {"examples": n, "mean_fraction": float(np.nanmean(frac))})


def cmd_report(cfg: RunConfig, root: Path, jobs: int) -> None:
    out = root / "report"
    csvs = sorted(p for p in root.rglob("*.csv")
                  if out not in p.parents and "runs" not in p.relative_to(root).parts)
    if not csvs:
        raise ArtifactError(f"no inputs found under {root}")
    lines = ["# Run report", ""]
    index = []
    for path in csvs:
        header, rows = read_csv(path)
        rel = path.relative_to(root)
        index.append((str(rel), len(rows), ",".join(header)))
        lines += [f"## {rel}", "", "| " + " | ".join(header) + " |",
                  "|" + "---|" * len(header)]
        for r in rows[:40]:
            lines.append("| " + " | ".join(r[h] for h in header) + " |")
        if len(rows) > 40:
            lines.append(f"| ... {len(rows) - 40} more rows |")
        lines.append("")
    atomic_write(out / "report.md", "\n".join(lines))
    write_csv(out / "summary.csv", ("file", "rows", "columns"), index)
    _finish(out, cfg, "report")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "prune": cmd_prune,
    "ablate": cmd_ablate,
    "effective-size": cmd_effective_size,
    "analyze": cmd_analyze,
    "attn-overlap": cmd_attn_overlap,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="subnetlab",
        description="Subnetwork discovery and analysis pipeline.",
        epilog="Any config key may be overridden as --section.key=value.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="key = value configuration file")
    p.add_argument("--seed", type=int, help="base seed for data generation and training")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for prune sweeps")
    p.add_argument("--out", default="runs", help="output root directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(extra: Sequence[str], parser: argparse.ArgumentParser) -> dict[str, str]:
    keys = known_keys()
    out = {}
    for tok in extra:
        if not tok.startswith("--") or "=" not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        key, value = tok[2:].split("=", 1)
        if key not in keys:
            raise UsageError(f"unknown config key {key!r}")
        out[key] = value
    return out


def run_command(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _overrides(extra, parser)
        if args.seed is not None:
            overrides["run.seed"] = str(args.seed)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = RunConfig.load(args.config, overrides)
    except FileNotFoundError as exc:
        parser.print_usage(sys.stderr)
        print(f"subnetlab: error: config file not found: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"subnetlab: error: {exc}", file=sys.stderr)
        return 2
    root = Path(args.out)
    try:
        HANDLERS[args.command](cfg, root, args.jobs)
    except ArtifactError as exc:
        print(f"subnetlab: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, ValueError, OSError, FloatingPointError) as exc:
        print(f"subnetlab: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
