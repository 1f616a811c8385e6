"""On-disk formats: checkpoints, CSV tables, key=value configs and manifests.

Every writer goes through a temporary file and ``os.replace`` so readers
never see a half-written artifact.
"""

from __future__ import annotations

import csv
import io
import json
import os
from collections import OrderedDict
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .tensor import AdamState
from .trainer import Checkpoint

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
CONFIG_FILE = "config.txt"


class ArtifactError(RuntimeError):
    """A stored artifact is missing, truncated or inconsistent."""


def atomic_write(path: str | Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _f32(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype="<f4")


def save_checkpoint(directory: str | Path, checkpoint: Checkpoint) -> Path:
    """Write ``manifest.json`` and ``weights.bin`` (little-endian float32).

    Tensors are the model parameters followed by the Adam first and second
    moments, each listed with its byte offset in the manifest.
    """
    directory = Path(directory)
    entries = []
    blobs = []
    offset = 0

    def add(name, array):
        nonlocal offset
        raw = _f32(array).tobytes()
        entries.append({"name": name, "shape": list(array.shape), "dtype": "f32",
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    names = list(checkpoint.params)
    for name in names:
        add(name, checkpoint.params[name])
    for name, st in zip(names, checkpoint.adam):
        add(f"adam.m.{name}", st.m)
        add(f"adam.v.{name}", st.v)
    adam_meta = [{"step": st.step, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps,
                  "lr": st.lr} for st in checkpoint.adam]
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "checkpoint",
        "step": checkpoint.step,
        "fingerprint": checkpoint.fingerprint,
        "rng_cursor": checkpoint.rng_cursor,
        "total_bytes": offset,
        "tensors": entries,
        "adam": adam_meta,
    }
    atomic_write(directory / WEIGHTS, b"".join(blobs))
    atomic_write(directory / MANIFEST, json.dumps(manifest, indent=1))
    return directory


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    mpath, wpath = directory / MANIFEST, directory / WEIGHTS
    for p in (mpath, wpath):
        if not p.exists():
            raise ArtifactError(f"missing checkpoint file {p}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ArtifactError(f"{mpath}: unsupported schema version {manifest.get('schema_version')}")
    raw = wpath.read_bytes()
    if len(raw) != manifest["total_bytes"]:
        raise ArtifactError(f"{wpath}: expected {manifest['total_bytes']} bytes, found {len(raw)}")
    tensors: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "f32":
            raise ArtifactError(f"{mpath}: tensor {e['name']} has dtype {e['dtype']}")
        arr = np.frombuffer(raw, dtype="<f4", count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    names = [e["name"] for e in manifest["tensors"] if not e["name"].startswith("adam.")]
    params = OrderedDict((n, tensors[n]) for n in names)
    adam = [AdamState(tensors[f"adam.m.{n}"], tensors[f"adam.v.{n}"], **meta)
            for n, meta in zip(names, manifest["adam"])]
    return Checkpoint(manifest["step"], params, adam, manifest["fingerprint"],
                      manifest["rng_cursor"])


def checkpoint_dirs(run_dir: str | Path) -> list[Path]:
    """Checkpoint subdirectories ``step_XXXXXX`` of a training run, by step."""
    root = Path(run_dir) / "checkpoints"
    if not root.is_dir():
        return []
    return sorted(p for p in root.iterdir() if (p / MANIFEST).exists())


def checkpoint_dir(run_dir: str | Path, step: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"step_{step:06d}"


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(v: Any) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if np.isfinite(v) else ("nan" if np.isnan(v) else str(float(v)))
    if v is None:
        return ""
    return str(v)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Mapping | Sequence]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        values = [row[h] for h in header] if isinstance(row, Mapping) else list(row)
        if len(values) != len(header):
            raise ValueError(f"row has {len(values)} fields, header has {len(header)}")
        w.writerow([_fmt(v) for v in values])
    atomic_write(path, buf.getvalue())
    return Path(path)


def read_csv(path: str | Path) -> tuple[list[str], list[dict[str, str]]]:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing input {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


# ---------------------------------------------------------------------------
# key = value configuration
# ---------------------------------------------------------------------------


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``section.key = value`` lines; ``#`` starts a comment; later keys win."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def format_config(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {_fmt_config(v)}\n" for k, v in sorted(values.items()))


def _fmt_config(v: Any) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt_config(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return _fmt(v)


def write_manifest(directory: str | Path, kind: str, files: Sequence[str],
                   extra: Mapping[str, Any] | None = None) -> Path:
    """Schema-versioned description of one output directory."""
    body = {"schema_version": SCHEMA_VERSION, "kind": kind, "files": sorted(files)}
    if extra:
        body.update(extra)
    path = Path(directory) / MANIFEST
    atomic_write(path, json.dumps(body, indent=1, sort_keys=True))
    return path
