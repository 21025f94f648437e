"""Shared checkpoint format for both model families.

Layout of a ``.ckpt`` file:

- 8-byte magic ``PGCKPT01``
- little-endian uint64: manifest byte length
- UTF-8 JSON manifest: model kind, config, metadata, and a tensor table
  of ``{name, shape, dtype: "f32", offset}`` entries (offsets are relative
  to the start of the payload)
- concatenated little-endian float32 payloads

Round-tripping is bit-exact: tensors are serialized from float32 storage
without any re-encoding.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .mdlm_model import MdlmConfig, MdlmTransformer
from .partition_model import PartitionConfig, PartitionTransformer

MAGIC = b"PGCKPT01"


def _tensor_payload(t: torch.Tensor) -> bytes:
    arr = t.detach().to(torch.float32).contiguous().numpy()
    return arr.astype("<f4", copy=False).tobytes()


def save_checkpoint(
    path,
    model: torch.nn.Module,
    *,
    ema_state: Optional[dict[str, torch.Tensor]] = None,
    metadata: Optional[dict] = None,
) -> None:
    """Write model weights (and optional EMA shadow weights) to ``path``.

    The manifest records the model kind ("pgm" or "mdlm") and its config
    so :func:`load_checkpoint` can rebuild the module.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: list[tuple[str, torch.Tensor]] = list(model.state_dict().items())
    if ema_state is not None:
        tensors += [("ema." + k, v) for k, v in ema_state.items()]

    table = []
    payload = bytearray()
    for name, t in tensors:
        data = _tensor_payload(t)
        table.append({"name": name, "shape": list(t.shape), "dtype": "f32", "offset": len(payload)})
        payload.extend(data)

    manifest = {
        "format": "pgckpt-1",
        "kind": model.family,
        "config": dataclasses.asdict(model.cfg),
        "metadata": metadata or {},
        "tensors": table,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(bytes(payload))


def read_manifest(path) -> dict:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (n,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(n).decode("utf-8"))


def load_checkpoint(path, *, use_ema: bool = False):
    """Rebuild the model from ``path``.

    Args:
        use_ema: Load the EMA shadow weights instead of the raw ones
            (falls back to raw when no EMA tensors were saved).

    Returns:
        ``(model, manifest)``.
    """
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (n,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(n).decode("utf-8"))
        payload = f.read()

    kind = manifest["kind"]
    if kind == "pgm":
        model = PartitionTransformer(PartitionConfig(**manifest["config"]))
    elif kind == "mdlm":
        model = MdlmTransformer(MdlmConfig(**manifest["config"]))
    else:
        raise ValueError(f"unknown model kind {kind!r}")

    entries = {e["name"]: e for e in manifest["tensors"]}

    def fetch(name: str) -> torch.Tensor:
        e = entries[name]
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
        return torch.from_numpy(arr.copy()).view(*e["shape"])

    state = {}
    for name in model.state_dict():
        key = "ema." + name if use_ema and ("ema." + name) in entries else name
        state[name] = fetch(key)
    model.load_state_dict(state)
    return model, manifest


def load_ema_state(path) -> Optional[dict[str, torch.Tensor]]:
    """The raw EMA tensor dict stored in a checkpoint, or None."""
    path = Path(path)
    manifest = read_manifest(path)
    names = [e["name"] for e in manifest["tensors"] if e["name"].startswith("ema.")]
    if not names:
        return None
    model, _ = load_checkpoint(path, use_ema=True)
    return {k: v for k, v in model.state_dict().items()}
