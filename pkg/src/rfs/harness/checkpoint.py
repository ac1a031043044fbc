"""Binary weight files.

Layout, all integers little-endian::

    b"RFSW" | u32 version | u32 kind | u32 meta_len | meta (UTF-8 JSON)
           | u64 n_floats | n_floats * float32 | sha256 of everything before

``meta`` records each network's layer dims and activations plus the few
scalars a model needs (mode, bounds, ...). Every learnable array is stored
in single precision, which is also how the models hold them, so a
save/load round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..diffcore import Mlp
from ..flowpolicy import VelocityField
from ..modulation import ModulationPolicy
from ..rl_offline import CriticPair

MAGIC = b"RFSW"
FORMAT_VERSION = 1
KINDS = ("velocity_field", "modulation_policy", "value_net", "critic_pair")
_HASH_LEN = 32


class CheckpointError(ValueError):
    """Base class for unreadable or mismatched weight files."""


class MagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class KindError(CheckpointError):
    pass


class HashError(CheckpointError):
    pass


def model_kind(model) -> str:
    if isinstance(model, VelocityField):
        return "velocity_field"
    if isinstance(model, ModulationPolicy):
        return "modulation_policy"
    if isinstance(model, CriticPair):
        return "critic_pair"
    if isinstance(model, Mlp):
        return "value_net"
    raise TypeError(f"cannot checkpoint a {type(model).__name__}")


def _net_meta(net: Mlp) -> dict:
    return {"layer_dims": list(net.layer_dims), "activations": list(net.activations)}


def _flatten(model) -> tuple[dict, list[np.ndarray]]:
    kind = model_kind(model)
    if kind == "velocity_field":
        meta = {
            "nets": [_net_meta(model.net)],
            "action_dim": model.action_dim,
            "state_dim": model.state_dim,
            "chunk_len": model.chunk_len,
            "action_scale": model.action_scale,
        }
        arrays = model.net.params() + [model.state_mean, model.state_std]
    elif kind == "modulation_policy":
        meta = {
            "nets": [_net_meta(model.net)],
            "mode": model.mode.value,
            "obs_dim": model.obs_dim,
            "flat_dim": model.flat_dim,
            "a0_scale": model.a0_scale,
            "residual_bound": model.residual_bound,
        }
        arrays = model.net.params() + [model.log_std_a0, model.log_std_ar]
    elif kind == "critic_pair":
        nets = [model.q1, model.q2, model.q1_target, model.q2_target]
        meta = {
            "nets": [_net_meta(n) for n in nets],
            "variant": model.variant.value,
            "obs_dim": model.obs_dim,
            "flat_dim": model.flat_dim,
            "updates": model.updates,
        }
        arrays = [p for n in nets for p in n.params()]
    else:
        meta = {"nets": [_net_meta(model)]}
        arrays = model.params()
    for a in arrays:
        a = np.asarray(a)
        if not np.all(np.isfinite(a)):
            raise ValueError("refusing to save non-finite parameters")
        if not np.array_equal(a.astype(np.float32).astype(a.dtype), a):
            raise ValueError("parameter not representable in single precision")
    return meta, arrays


def checkpoint_bytes(model) -> bytes:
    kind = model_kind(model)
    meta, arrays = _flatten(model)
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    payload = np.concatenate([np.asarray(a, dtype="<f4").reshape(-1) for a in arrays]) if arrays else np.zeros(0, "<f4")
    body = b"".join([
        MAGIC,
        struct.pack("<III", FORMAT_VERSION, KINDS.index(kind), len(meta_blob)),
        meta_blob,
        struct.pack("<Q", payload.size),
        payload.astype("<f4").tobytes(),
    ])
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, model) -> str:
    """Write ``model`` to ``path``; returns the hex content hash."""
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)
    return data[-_HASH_LEN:].hex()


def _build_net(meta: dict, take) -> Mlp:
    net = Mlp(meta["layer_dims"], activations=meta["activations"])
    net.set_params([take(p.shape) for p in net.params()])
    return net


def load_checkpoint(path, kind: str | None = None):
    """Read a weight file, validating magic, hash, version and (optionally) kind."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise MagicError(f"{path}: not an RFSW weight file")
    body, digest = data[:-_HASH_LEN], data[-_HASH_LEN:]
    if len(data) < 4 + 12 + 8 + _HASH_LEN or hashlib.sha256(body).digest() != digest:
        raise HashError(f"{path}: content hash mismatch (truncated or corrupted)")
    version, kind_idx, meta_len = struct.unpack_from("<III", body, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if kind_idx >= len(KINDS):
        raise KindError(f"{path}: unknown model kind {kind_idx}")
    found = KINDS[kind_idx]
    if kind is not None and found != kind:
        raise KindError(f"{path}: holds a {found}, expected a {kind}")
    off = 16
    meta = json.loads(body[off : off + meta_len].decode())
    off += meta_len
    (n,) = struct.unpack_from("<Q", body, off)
    off += 8
    payload = np.frombuffer(body, dtype="<f4", count=n, offset=off).astype(np.float32)
    if off + 4 * n != len(body):
        raise CheckpointError(f"{path}: payload length disagrees with header")
    cursor = [0]

    def take(shape):
        size = int(np.prod(shape))
        if cursor[0] + size > n:
            raise CheckpointError(f"{path}: payload shorter than its layer dims")
        out = payload[cursor[0] : cursor[0] + size].reshape(shape).copy()
        cursor[0] += size
        return out

    nets = meta["nets"]
    if found == "velocity_field":
        net = _build_net(nets[0], take)
        model = VelocityField(meta["action_dim"], meta["state_dim"], meta["chunk_len"],
                              action_scale=meta["action_scale"], net=net)
        model.state_mean = take((meta["state_dim"],)).astype(np.float64)
        model.state_std = take((meta["state_dim"],)).astype(np.float64)
    elif found == "modulation_policy":
        net = _build_net(nets[0], take)
        model = ModulationPolicy(meta["mode"], meta["obs_dim"], meta["flat_dim"], a0_scale=meta["a0_scale"],
                                 residual_bound=meta["residual_bound"], net=net)
        model.log_std_a0 = take((meta["flat_dim"],))
        model.log_std_ar = take((meta["flat_dim"],))
    elif found == "critic_pair":
        model = CriticPair(meta["variant"], meta["obs_dim"], meta["flat_dim"], hidden=(1,))
        model.q1, model.q2, model.q1_target, model.q2_target = (_build_net(m, take) for m in nets)
        model.updates = meta["updates"]
    else:
        model = _build_net(nets[0], take)
    if cursor[0] != n:
        raise CheckpointError(f"{path}: {n - cursor[0]} unread parameters")
    return model
