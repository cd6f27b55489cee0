"""
Checkpoint files.

Layout: 8-byte magic, 4-byte little-endian format version, 8-byte
little-endian header length, the UTF-8 JSON header (sorted keys, compact
separators), then little-endian float64 blobs: every parameter in header
order, then the first-moment accumulators, then the second-moment ones.
"""
import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from modules.errors import CheckpointError
from modules.gradcore import OptimizerState, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"PHYDIFF\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_HEADER_KEYS = ("config_digest", "step", "optimizer", "params")
_OPTIMIZER_KEYS = ("step", "learning_rate", "beta1", "beta2", "eps")


@dataclass
class Checkpoint:
    config_digest: str
    step: int
    params: Dict[str, Tensor]
    optimizer: OptimizerState


def _header(ckpt: Checkpoint) -> bytes:
    opt = ckpt.optimizer
    header = {
        "config_digest": ckpt.config_digest,
        "step": int(ckpt.step),
        "optimizer": {
            "step": int(opt.step),
            "learning_rate": float(opt.learning_rate),
            "beta1": float(opt.beta1),
            "beta2": float(opt.beta2),
            "eps": float(opt.eps),
        },
        "params": [[name, list(value.shape)] for name, value in ckpt.params.items()],
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    header = _header(ckpt)
    names = list(ckpt.params)
    for name in names:
        if name not in ckpt.optimizer.m or name not in ckpt.optimizer.v:
            raise CheckpointError(f"optimizer state has no accumulators for {name}")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        f.write(header)
        for store in (ckpt.params, ckpt.optimizer.m, ckpt.optimizer.v):
            for name in names:
                f.write(np.ascontiguousarray(store[name], dtype="<f8").tobytes())
    logger.info(f"Saved checkpoint {path} (step {ckpt.step}, {sum(p.size for p in ckpt.params.values())} parameters)")


def _check_header(header: object, path: str) -> None:
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header is not a JSON object")
    for key in _HEADER_KEYS:
        if key not in header:
            raise CheckpointError(f"{path}: header is missing '{key}'")
    if not isinstance(header["optimizer"], dict):
        raise CheckpointError(f"{path}: header field 'optimizer' is not an object")
    for key in _OPTIMIZER_KEYS:
        if key not in header["optimizer"]:
            raise CheckpointError(f"{path}: header is missing 'optimizer.{key}'")


def load_checkpoint(path: str, expected_digest: Optional[str] = None) -> Checkpoint:
    """Read a checkpoint; a different config digest than `expected_digest` is refused."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")

    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated before the header")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a phydiff checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")
    body = _PREFIX.size + header_len
    if len(data) < body:
        raise CheckpointError(f"{path}: truncated inside the header")
    try:
        header = json.loads(data[_PREFIX.size:body].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}")
    _check_header(header, path)

    if expected_digest is not None and header["config_digest"] != expected_digest:
        raise CheckpointError(
            f"{path}: config digest {header['config_digest'][:12]} does not match "
            f"{expected_digest[:12]}; the network or scenario settings changed"
        )

    try:
        layout = [(str(name), tuple(int(d) for d in shape)) for name, shape in header["params"]]
    except (TypeError, ValueError):
        raise CheckpointError(f"{path}: header field 'params' is not a list of [name, shape] pairs")
    sizes = [int(np.prod(shape, dtype=np.int64)) for _, shape in layout]
    expected_len = body + 3 * 8 * sum(sizes)
    if len(data) != expected_len:
        kind = "truncated" if len(data) < expected_len else "has trailing bytes"
        raise CheckpointError(f"{path}: {kind} ({len(data)} bytes, expected {expected_len})")

    offset = body
    stores = []
    for _ in range(3):
        store = {}
        for (name, shape), size in zip(layout, sizes):
            store[name] = np.frombuffer(data, dtype="<f8", count=size, offset=offset).astype(np.float64).reshape(shape)
            offset += 8 * size
        stores.append(store)
    params, m, v = stores

    opt = header["optimizer"]
    optimizer = OptimizerState(
        m=m, v=v, step=opt["step"], learning_rate=opt["learning_rate"],
        beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"],
    )
    logger.info(f"Loaded checkpoint {path} (step {header['step']}, {sum(sizes)} parameters)")
    return Checkpoint(config_digest=header["config_digest"], step=header["step"], params=params, optimizer=optimizer)
