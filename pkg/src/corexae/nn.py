"""MLPs, named parameter storage, Adam, and the binary checkpoint format."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor

ACTIVATIONS = {"relu": T.relu, "tanh": T.tanh, "identity": lambda x: x}

MAGIC = b"CXAE"
FORMAT_VERSION = 1

Key = tuple[str, int, str]


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected network: ``layer_widths`` runs input -> ... -> output."""

    layer_widths: tuple[int, ...]
    activations: tuple[str, ...]
    output_heads: tuple[tuple[str, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        object.__setattr__(self, "output_heads", tuple((str(n), int(w)) for n, w in self.output_heads))
        if len(self.layer_widths) < 2:
            raise ValueError("an MLP needs an input width and at least one layer")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive: {self.layer_widths}")
        if len(self.activations) != len(self.layer_widths) - 2:
            raise ValueError(
                f"{len(self.layer_widths) - 2} hidden layers need as many activations, got {len(self.activations)}"
            )
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if sum(w for _, w in self.output_heads) != self.layer_widths[-1]:
            raise ValueError("output head widths must sum to the final layer width")

    @classmethod
    def build(cls, n_in: int, hidden, heads, activation: str = "relu") -> "MlpSpec":
        hidden = list(hidden)
        return cls(
            (n_in, *hidden, sum(w for _, w in heads)),
            (activation,) * len(hidden),
            tuple(heads),
        )

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "activations": list(self.activations),
            "output_heads": [list(h) for h in self.output_heads],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MlpSpec":
        return cls(tuple(d["layer_widths"]), tuple(d["activations"]), tuple(tuple(h) for h in d["output_heads"]))


class ParameterStore:
    """Parameter tensors keyed by ``(model_id, layer, role)``.

    Updates swap in new tensors; the version counter increments on every write
    after creation.
    """

    def __init__(self):
        self._params: dict[Key, Tensor] = {}
        self.version = 0

    def add(self, key: Key, value) -> Tensor:
        if key in self._params:
            raise KeyError(f"duplicate parameter key {key}")
        t = T.parameter(value, name="/".join(map(str, key)))
        self._params[key] = t
        return t

    def set(self, key: Key, value) -> None:
        old = self._params[key]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != old.shape:
            raise T.ShapeError(f"shape mismatch for {key}: stored {old.shape}, new {value.shape}")
        self._params[key] = T.parameter(value, name=old.name)
        self.version += 1

    def bind(self, key: Key, tensor: T.Tensor) -> None:
        """Swap in an existing tensor (e.g. a gradient-check probe) without copying."""
        old = self._params[key]
        if tensor.shape != old.shape:
            raise T.ShapeError(f"shape mismatch for {key}: stored {old.shape}, new {tensor.shape}")
        self._params[key] = tensor
        self.version += 1

    def __getitem__(self, key: Key) -> Tensor:
        return self._params[key]

    def __contains__(self, key) -> bool:
        return key in self._params

    def __iter__(self) -> Iterator[Key]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def keys(self):
        return self._params.keys()

    def items(self):
        return self._params.items()

    def copy(self) -> "ParameterStore":
        """Snapshot sharing the current (immutable) tensors; later writes to either store do not leak."""
        out = ParameterStore()
        out._params = dict(self._params)
        out.version = self.version
        return out

    def fingerprint(self) -> int:
        """CRC-32 over keys and values; identifies a parameter snapshot."""
        crc = 0
        for key in sorted(self._params, key=_key_str):
            crc = zlib.crc32(_key_str(key).encode(), crc)
            crc = zlib.crc32(self._params[key].value.astype("<f8").tobytes(), crc)
        return crc


def init_params(spec: MlpSpec, rng: Rng, store: ParameterStore, model_id: str) -> None:
    """Glorot-uniform weights, zero biases."""
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        store.add((model_id, i, "weight"), rng.uniform(-a, a, (fan_in, fan_out)))
        store.add((model_id, i, "bias"), np.zeros(fan_out))


def mlp_forward(spec: MlpSpec, params: ParameterStore, x, model_id: str) -> dict[str, Tensor]:
    if x.shape[-1] != spec.layer_widths[0]:
        raise T.ShapeError(f"input width {x.shape[-1]} does not match network input {spec.layer_widths[0]}")
    h = x
    for i in range(spec.n_layers):
        h = h @ params[(model_id, i, "weight")] + params[(model_id, i, "bias")]
        if i < spec.n_layers - 1:
            h = ACTIVATIONS[spec.activations[i]](h)
    out, start = {}, 0
    for name, width in spec.output_heads:
        out[name] = h if len(spec.output_heads) == 1 else h[:, start:start + width]
        start += width
    return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: ParameterStore, grads: Mapping[Key, np.ndarray]) -> None:
    """Bias-corrected Adam update for every key in ``grads`` (gradient *descent*)."""
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {_key_str(key)}")
        if g.shape != params[key].shape:
            raise T.ShapeError(f"gradient shape {g.shape} does not match parameter {_key_str(key)} {params[key].shape}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for key, g in grads.items():
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(g)
            state.v[key] = np.zeros_like(g)
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        params.set(key, params[key].value - update)


# --- checkpoint file ------------------------------------------------------

def _key_str(key: Key) -> str:
    return "/".join(str(k) for k in key)


def _parse_key(s: str) -> Key:
    model_id, layer, role = s.rsplit("/", 2)
    return (model_id, int(layer), role)


def save_params(store: ParameterStore, path, header: Mapping | None = None) -> None:
    """Write ``CXAE`` checkpoint: version, JSON header, records, trailing CRC-32."""
    header_bytes = json.dumps(dict(header or {}), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header_bytes)), header_bytes,
             struct.pack("<I", len(store))]
    for key, t in store.items():
        kb = _key_str(key).encode()
        parts.append(struct.pack("<I", len(kb)))
        parts.append(kb)
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(t.value.astype("<f8").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_checkpoint(path) -> tuple[dict, dict[Key, np.ndarray]]:
    """Parse a checkpoint into ``(header, {key: array})`` after verifying it."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint: expected magic {MAGIC!r}, got {raw[:4]!r}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (file truncated or corrupt)")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})")
    pos = 12
    header = json.loads(body[pos:pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    arrays: dict[Key, np.ndarray] = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        key = _parse_key(body[pos:pos + klen].decode())
        pos += klen
        (rank,) = struct.unpack_from("<I", body, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arrays[key] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(body):
        raise CheckpointError("trailing bytes after parameter records")
    return header, arrays


def load_params(path, into: ParameterStore | None = None) -> tuple[ParameterStore, dict]:
    """Load a checkpoint, optionally into an existing store whose shapes must match."""
    header, arrays = read_checkpoint(path)
    if into is None:
        store = ParameterStore()
        for key, arr in arrays.items():
            store.add(key, arr)
        return store, header
    missing = set(into.keys()) ^ set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint keys differ from model: {sorted(map(_key_str, missing))[:5]}")
    for key, arr in arrays.items():
        if arr.shape != into[key].shape:
            raise CheckpointError(f"shape mismatch for {_key_str(key)}: model {into[key].shape}, checkpoint {arr.shape}")
    for key, arr in arrays.items():
        into.set(key, arr)
    return into, header
