"""Checkpoints: one flat float64 blob plus a JSON manifest of names and shapes."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .encoder import EncoderParams, ShapeError
from .prototypes import CentroidBank

FORMAT = 1
BLOB = "tensors.bin"
MANIFEST = "tensors.json"


class CheckpointError(ValueError):
    pass


def _entries(params: EncoderParams, bank: CentroidBank):
    for name in sorted(params.tensors):
        yield "param", name, params.tensors[name]
    for name in sorted(params.buffers):
        yield "buffer", name, params.buffers[name]
    yield "bank", "c_s", bank.c_s
    yield "bank", "c_t", bank.c_t


def save_checkpoint(path, params: EncoderParams, bank: CentroidBank, config=None, epoch: int = 0) -> Path:
    """Write ``path/tensors.bin`` and ``path/tensors.json``; returns ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for kind, name, arr in _entries(params, bank):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append(dict(kind=kind, name=name, shape=list(arr.shape), offset=offset))
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = dict(
        format=FORMAT,
        epoch=epoch,
        encoder=dict(
            sizes=list(params.sizes),
            head_hidden=params.head_hidden,
            d_head=params.d_head,
            dropout=params.dropout,
            use_head=params.use_head,
            bn_momentum=params.bn_momentum,
            bn_eps=params.bn_eps,
        ),
        bank=dict(init_s=bank.init_s.tolist(), init_t=bank.init_t.tolist(), ema_momentum=bank.ema_momentum),
        config=None if config is None else _jsonable(asdict(config)),
        tensors=entries,
    )
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def load_checkpoint(path):
    """Returns ``(params, bank, manifest)``. Shapes are checked against the encoder layout."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        blob = np.frombuffer((path / BLOB).read_bytes(), dtype="<f8")
    except FileNotFoundError as e:
        raise CheckpointError(f"missing checkpoint file {e.filename}") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path / MANIFEST}: {e}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    enc = manifest["encoder"]
    params = EncoderParams(tensors={}, buffers={}, **enc)
    bank_arrays = {}
    used = 0
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        size = int(np.prod(shape, dtype=np.int64))
        start = e["offset"]
        if start < 0 or start + size > blob.size:
            raise CheckpointError(f"tensor {e['name']} runs past the end of {BLOB}")
        arr = blob[start:start + size].reshape(shape).copy()
        used += size
        target = {"param": params.tensors, "buffer": params.buffers, "bank": bank_arrays}.get(e["kind"])
        if target is None:
            raise CheckpointError(f"unknown tensor kind {e['kind']!r}")
        target[e["name"]] = arr
    if used != blob.size:
        raise CheckpointError(f"{BLOB} holds {blob.size} values, manifest accounts for {used}")
    try:
        params.validate()
    except ShapeError as e:
        raise CheckpointError(str(e)) from None
    b = manifest["bank"]
    n = len(b["init_s"])
    for key in ("c_s", "c_t"):
        if key not in bank_arrays or bank_arrays[key].shape != (n, params.out_dim):
            raise CheckpointError(f"bank tensor {key} missing or misshapen")
    bank = CentroidBank(bank_arrays["c_s"], bank_arrays["c_t"], np.array(b["init_s"], dtype=bool),
                        np.array(b["init_t"], dtype=bool), b["ema_momentum"])
    return params, bank, manifest
