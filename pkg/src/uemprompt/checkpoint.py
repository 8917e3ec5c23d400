"""Single-file checkpoint holding LM and UEM parameters, Adam state and run metadata.

Layout::

    UEMCKPT v1\\n
    <header byte length>\\n
    <header: compact JSON, sorted keys>
    <tensor bytes, little-endian, in header order>

The header lists every tensor's name, group (param / adam_m / adam_v), dtype,
shape and byte offset.  Serialization is a pure function of its inputs, so a
save -> load -> save cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import RNG_ALGORITHM, Tensor
from .model import AdamState

MAGIC = b"UEMCKPT v1\n"
FORMAT_VERSION = 1
GROUPS = ("param", "adam_m", "adam_v")


class CheckpointError(ValueError):
    """Unreadable checkpoint or one that does not fit the expected model."""


@dataclass
class Checkpoint:
    config: dict
    vocab: list[str]
    genres: list[str]
    params: dict[str, Tensor]
    opt: AdamState
    step: int
    seed: int

    @property
    def rng_state(self) -> dict:
        return {"algorithm": RNG_ALGORITHM, "seed": self.seed}


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    arrays = {
        "param": {k: t.data for k, t in ckpt.params.items()},
        "adam_m": ckpt.opt.m,
        "adam_v": ckpt.opt.v,
    }
    for group in GROUPS:
        for name in sorted(arrays[group]):
            arr = np.ascontiguousarray(arrays[group][name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            entries.append({"group": group, "name": name, "dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config,
        "vocab": ckpt.vocab,
        "genres": ckpt.genres,
        "step": ckpt.step,
        "rng": ckpt.rng_state,
        "adam": {"beta1": ckpt.opt.beta1, "beta2": ckpt.opt.beta2, "eps": ckpt.opt.eps, "step": ckpt.opt.step},
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return MAGIC + f"{len(head)}\n".encode() + head + b"".join(blobs)


def from_bytes(buf: bytes) -> Checkpoint:
    if not buf.startswith(MAGIC):
        raise CheckpointError("not a UEM checkpoint (bad magic)")
    rest = buf[len(MAGIC):]
    nl = rest.find(b"\n")
    try:
        hlen = int(rest[:nl])
        header = json.loads(rest[nl + 1 : nl + 1 + hlen].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    body = rest[nl + 1 + hlen :]
    groups: dict[str, dict[str, np.ndarray]] = {g: {} for g in GROUPS}
    for ent in header["tensors"]:
        dt = np.dtype(ent["dtype"]).newbyteorder("<")
        end = ent["offset"] + ent["nbytes"]
        if end > len(body):
            raise CheckpointError(f"tensor {ent['name']} runs past end of file")
        arr = np.frombuffer(body[ent["offset"] : end], dtype=dt).astype(np.dtype(ent["dtype"]))
        groups[ent["group"]][ent["name"]] = arr.reshape(ent["shape"]).copy()
    adam = header["adam"]
    params = {k: Tensor(v, requires_grad=True, dtype=v.dtype) for k, v in groups["param"].items()}
    opt = AdamState(adam["beta1"], adam["beta2"], adam["eps"], adam["step"], groups["adam_m"], groups["adam_v"])
    return Checkpoint(header["config"], header["vocab"], header["genres"], params, opt, header["step"], header["rng"]["seed"])


def save(ckpt: Checkpoint, path) -> None:
    """Write atomically via a temp file in the same directory."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(ckpt))
        fh.flush()
        os.fsync(fh.fileno())
    tmp.replace(path)


CHECKPOINT_NAME = "model.ckpt"


def load(path) -> Checkpoint:
    """Read a checkpoint file, or the ``model.ckpt`` inside a run directory."""
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    try:
        return from_bytes(Path(path).read_bytes())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None


def validate_shapes(ckpt: Checkpoint, template: dict[str, Tensor]) -> None:
    """Every tensor must exist with the shape the configured model allocates."""
    want = {k: t.shape for k, t in template.items()}
    got = {k: t.shape for k, t in ckpt.params.items()}
    if set(want) != set(got):
        missing, extra = sorted(set(want) - set(got)), sorted(set(got) - set(want))
        raise CheckpointError(f"checkpoint tensors do not match config (missing {missing[:5]}, unexpected {extra[:5]})")
    for k in sorted(want):
        if want[k] != got[k]:
            raise CheckpointError(f"tensor {k}: checkpoint shape {got[k]} != configured {want[k]}")
        for group in (ckpt.opt.m, ckpt.opt.v):
            if k in group and group[k].shape != want[k]:
                raise CheckpointError(f"optimizer state for {k} has shape {group[k].shape}")
