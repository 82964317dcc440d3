"""Single-file checkpoint archives shared by the GAN and the detector.

An archive is a ``torch.save`` payload holding a config echo, named
parameter tensors per network, optimizer state, epoch/step counters, the
training history and free-form metadata (config digest, seed). Writes are
atomic.
"""

from __future__ import annotations

import hashlib
import io
import os
import pickle
import zipfile
from pathlib import Path

import torch

from .exceptions import CheckpointError

FORMAT = "vis2therm-checkpoint"
VERSION = 1


def save_checkpoint(
    path,
    kind: str,
    config: dict,
    params: dict[str, dict[str, torch.Tensor]],
    optimizer: dict | None = None,
    epoch: int = 0,
    step: int = 0,
    history: list | None = None,
    meta: dict | None = None,
) -> Path:
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": config,
        "params": {net: {k: v.detach().cpu().clone() for k, v in sd.items()} for net, sd in params.items()},
        "optimizer": optimizer or {},
        "epoch": int(epoch),
        "step": int(step),
        "history": history or [],
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # serializing through a buffer keeps the archive's internal folder name
    # independent of the file name, so equal payloads give equal bytes
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buffer.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (RuntimeError, pickle.UnpicklingError, zipfile.BadZipFile, EOFError, io.UnsupportedOperation, ValueError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from None
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} archive")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if kind is not None and payload.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {payload.get('kind')!r}")
    return payload


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def state_digest(state: dict[str, torch.Tensor]) -> str:
    """SHA-256 over parameter names, dtypes, shapes and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
