"""Task plugins: vectors injected into a frozen backbone, plus their file format.

A :class:`PluginPack` holds everything task-specific: the plugin vectors
(one prefix matrix for embedding mode, one key/value pair per layer for
layer mode), the label map, and replacement embedding rows for the label
words.  Nothing in here ever writes to backbone arrays.

File layout (little endian)::

    header  magic "PTPL" | version u16 | mode u8 | l_p u32 | layers u32 |
            hidden u32 | model hash u64 | CRC32(payload) u32 | payload length u64
    payload vectors as f32 (embedding: l_p x h; layer: theta_k, theta_v per layer)
            label map: schema u8 | shared_bi u8 | count u32 |
                       count x (label length u32, label UTF-8, token id u32)
            deltas: count u32 | count x (token id u32, h x f32)
            meta: task length u32, task UTF-8 | seed i64
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import (
    BadMagicError,
    ChecksumError,
    ContractError,
    DataError,
    HashMismatchError,
    ModeError,
    ShapeError,
    TruncatedError,
    VersionMismatchError,
)
from .labelwords import BIO2, FLAT, LabelMap

EMBEDDING = "embedding"
LAYER = "layer"
MODES = (EMBEDDING, LAYER)

PLUGIN_MAGIC = b"PTPL"
PLUGIN_VERSION = 1
_HEADER = struct.Struct("<4sHBIIIQIQ")
_MODE_CODE = {EMBEDDING: 0, LAYER: 1}
_SCHEMA_CODE = {BIO2: 0, FLAT: 1}


@dataclass
class PluginMeta:
    model_hash: int | None = None
    task: str = ""
    format_version: int = PLUGIN_VERSION
    seed: int = 0


@dataclass(eq=False)
class PluginPack:
    mode: str
    l_p: int
    hidden: int
    n_layers: int
    vectors: object  # (l_p, h) array, or list of (theta_k, theta_v) pairs
    label_map: LabelMap = field(default_factory=LabelMap)
    deltas: dict[int, np.ndarray] = field(default_factory=dict)
    meta: PluginMeta = field(default_factory=PluginMeta)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ModeError(f"unknown plugin mode {self.mode!r}")
        if self.l_p < 0:
            raise ContractError("plugin length must be non-negative")
        shape = (self.l_p, self.hidden)
        if self.mode == EMBEDDING:
            if np.shape(self.vectors) != shape:
                raise ShapeError(f"embedding plugin must be {shape}, got {np.shape(self.vectors)}")
        else:
            if len(self.vectors) != self.n_layers:
                raise ShapeError(f"layer plugin needs {self.n_layers} (theta_k, theta_v) pairs")
            for tk, tv in self.vectors:
                if np.shape(tk) != shape or np.shape(tv) != shape:
                    raise ShapeError(f"layer plugin vectors must be {shape}")
        for w, row in self.deltas.items():
            if np.shape(row) != (self.hidden,):
                raise ShapeError(f"delta row for token {w} must have {self.hidden} values")
        if not set(self.deltas) <= set(self.label_map.entries.values()):
            raise ContractError("label-word deltas must belong to label-map words")

    def arrays(self) -> list[np.ndarray]:
        if self.mode == EMBEDDING:
            return [self.vectors]
        return [a for pair in self.vectors for a in pair]

    def vector_param_count(self) -> int:
        return sum(int(np.size(a)) for a in self.arrays())

    def delta_param_count(self) -> int:
        return len(self.deltas) * self.hidden

    def __eq__(self, other) -> bool:
        if not isinstance(other, PluginPack):
            return NotImplemented
        if (self.mode, self.l_p, self.hidden, self.n_layers) != (other.mode, other.l_p, other.hidden, other.n_layers):
            return False
        if self.label_map != other.label_map or self.meta != other.meta:
            return False
        if not all(_bits_equal(a, b) for a, b in zip(self.arrays(), other.arrays())):
            return False
        if sorted(self.deltas) != sorted(other.deltas):
            return False
        return all(_bits_equal(self.deltas[w], other.deltas[w]) for w in self.deltas)


def _bits_equal(a, b) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def init_plugin(config, mode: str, l_p: int, seed: int = 0, model_hash: int | None = None, task: str = "") -> PluginPack:
    """Fresh plugin with N(0, 0.02) vectors and no label words yet."""
    if l_p < 0:
        raise ContractError("plugin length must be non-negative")
    if mode not in MODES:
        raise ModeError(f"unknown plugin mode {mode!r}")
    rng = np.random.default_rng(seed)
    h = config.hidden

    def draw():
        return rng.normal(0.0, 0.02, size=(l_p, h)).astype(np.float32)

    if mode == EMBEDDING:
        vectors = draw()
    else:
        vectors = [(draw(), draw()) for _ in range(config.layers)]
    return PluginPack(mode, l_p, h, config.layers, vectors, meta=PluginMeta(model_hash, task, PLUGIN_VERSION, seed))


def check_compatible(plugin, weights) -> None:
    cfg = weights.config
    if plugin.hidden != cfg.hidden:
        raise ShapeError(f"plugin hidden size {plugin.hidden} != model hidden size {cfg.hidden}")
    if plugin.mode == LAYER and plugin.n_layers != cfg.layers:
        raise ShapeError(f"plugin has {plugin.n_layers} layers, model has {cfg.layers}")
    meta = getattr(plugin, "meta", None)
    if meta is not None and meta.model_hash is not None and meta.model_hash != weights.fingerprint():
        raise HashMismatchError(
            f"plugin was trained against backbone {meta.model_hash:016x}, this one is {weights.fingerprint():016x}"
        )


# ---------------------------------------------------------------------------
# injection
# ---------------------------------------------------------------------------


def _prepend(rows: Tensor, x: Tensor) -> Tensor:
    rows = rows if isinstance(rows, Tensor) else Tensor(rows)
    x = x if isinstance(x, Tensor) else Tensor(x)
    if rows.shape[-1] != x.shape[-1]:
        raise ShapeError(f"plugin width {rows.shape[-1]} != hidden width {x.shape[-1]}")
    if x.ndim == 3:
        rows = dc.broadcast_to(rows, (x.shape[0],) + rows.shape)
    return dc.concat([rows, x], axis=x.ndim - 2)


def inject_embedding_rows(x: Tensor, prefix: Tensor) -> Tensor:
    """``[prefix; x]`` along the sequence axis, broadcasting ``prefix`` over a batch."""
    return _prepend(prefix, x)


def inject_embedding(x, pack: PluginPack) -> Tensor:
    """Prepend the plugin rows to embedded input ``x`` ((n, h) or (B, n, h))."""
    if pack.mode != EMBEDDING:
        raise ModeError("inject_embedding needs an embedding-mode plugin")
    return _prepend(pack.vectors, x)


def inject_layer_kv(k: Tensor, v: Tensor, theta_k: Tensor, theta_v: Tensor) -> tuple[Tensor, Tensor]:
    return _prepend(theta_k, k), _prepend(theta_v, v)


def inject_layer(k, v, pack: PluginPack, layer: int) -> tuple[Tensor, Tensor]:
    """``([theta_k; K], [theta_v; V])`` for 1-based ``layer``."""
    if pack.mode != LAYER:
        raise ModeError("inject_layer needs a layer-mode plugin")
    if not 1 <= layer <= pack.n_layers:
        raise ContractError(f"layer {layer} outside 1..{pack.n_layers}")
    tk, tv = pack.vectors[layer - 1]
    return inject_layer_kv(k, v, tk, tv)


def patched_table(weights, pack: PluginPack) -> np.ndarray:
    """Token embedding matrix with the pack's label-word rows substituted (a copy)."""
    table = weights.tok_emb
    if not pack.deltas:
        return table
    table = table.copy()
    for w, row in pack.deltas.items():
        if not 0 <= w < table.shape[0]:
            raise ContractError(f"delta token id {w} outside vocabulary")
        table[w] = row
    return table


def apply_labelword_deltas(weights, pack: PluginPack):
    """Backbone view whose embedding rows (hence tied LM-head columns) carry the deltas.

    All other arrays are shared with ``weights``; nothing is written to them.
    """
    check_compatible(pack, weights)
    if not pack.deltas:
        return weights
    from .model import ModelWeights

    return ModelWeights(
        weights.config, patched_table(weights, pack), weights.pos_emb, weights.layers,
        weights.lnf_g, weights.lnf_b, weights.lm_bias, _fingerprint=weights.fingerprint(),
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def plugin_to_bytes(pack: PluginPack) -> bytes:
    pack.validate()
    parts = [_f32(a) for a in pack.arrays()]
    lm = pack.label_map
    parts.append(struct.pack("<BBI", _SCHEMA_CODE[lm.schema], int(lm.shared_bi), len(lm.entries)))
    for label, w in sorted(lm.entries.items()):
        raw = label.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", w))
    parts.append(struct.pack("<I", len(pack.deltas)))
    for w in sorted(pack.deltas):
        parts.append(struct.pack("<I", w) + _f32(pack.deltas[w]))
    task = pack.meta.task.encode("utf-8")
    parts.append(struct.pack("<I", len(task)) + task + struct.pack("<q", pack.meta.seed))
    payload = b"".join(parts)
    model_hash = pack.meta.model_hash or 0
    header = _HEADER.pack(
        PLUGIN_MAGIC, pack.meta.format_version, _MODE_CODE[pack.mode], pack.l_p, pack.n_layers,
        pack.hidden, model_hash, zlib.crc32(payload), len(payload),
    )
    return header + payload


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedError("plugin payload truncated")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)


def plugin_from_bytes(blob: bytes) -> PluginPack:
    if len(blob) < _HEADER.size:
        raise TruncatedError("plugin file shorter than its header")
    magic, version, mode_code, l_p, n_layers, hidden, model_hash, crc, payload_len = _HEADER.unpack_from(blob)
    if magic != PLUGIN_MAGIC:
        raise BadMagicError(f"not a plugin file (magic {magic!r})")
    if version != PLUGIN_VERSION:
        raise VersionMismatchError(f"plugin format version {version}, expected {PLUGIN_VERSION}")
    payload = blob[_HEADER.size :]
    if len(payload) < payload_len:
        raise TruncatedError("plugin payload truncated")
    if len(payload) > payload_len:
        raise DataError("trailing bytes after plugin payload")
    if zlib.crc32(payload) != crc:
        raise ChecksumError("plugin payload failed its CRC32 check")
    modes = {v: k for k, v in _MODE_CODE.items()}
    if mode_code not in modes:
        raise DataError(f"unknown plugin mode code {mode_code}")
    mode = modes[mode_code]
    r = _Reader(payload)
    if mode == EMBEDDING:
        vectors = r.floats((l_p, hidden))
    else:
        vectors = [(r.floats((l_p, hidden)), r.floats((l_p, hidden))) for _ in range(n_layers)]
    schema_code, shared, count = r.unpack("<BBI")
    schemas = {v: k for k, v in _SCHEMA_CODE.items()}
    if schema_code not in schemas:
        raise DataError(f"unknown label schema code {schema_code}")
    entries = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        label = r.take(n).decode("utf-8")
        (w,) = r.unpack("<I")
        entries[label] = w
    (n_deltas,) = r.unpack("<I")
    deltas = {}
    for _ in range(n_deltas):
        (w,) = r.unpack("<I")
        deltas[w] = r.floats((hidden,))
    (n,) = r.unpack("<I")
    task = r.take(n).decode("utf-8")
    (seed,) = r.unpack("<q")
    if r.off != len(payload):
        raise DataError("plugin payload has unparsed trailing bytes")
    label_map = LabelMap(entries, schemas[schema_code], bool(shared))
    meta = PluginMeta(model_hash or None, task, version, seed)
    return PluginPack(mode, l_p, hidden, n_layers, vectors, label_map, deltas, meta)


def save_plugin(pack: PluginPack, path) -> None:
    from .util import atomic_write_bytes

    atomic_write_bytes(Path(path), plugin_to_bytes(pack))


def load_plugin(path, weights=None) -> PluginPack:
    """Read a plugin file; with ``weights`` given, refuse a pack trained on another backbone."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read plugin {path}: {exc}") from exc
    pack = plugin_from_bytes(blob)
    if weights is not None:
        check_compatible(pack, weights)
    return pack


def plugin_file_size(mode: str, l_p: int, hidden: int, n_layers: int, label_map: LabelMap, n_deltas: int, task: str = "") -> int:
    """Exact byte count of a serialized pack, from the layout above."""
    groups = 1 if mode == EMBEDDING else 2 * n_layers
    vectors = 4 * groups * l_p * hidden
    labels = 6 + sum(4 + len(lbl.encode("utf-8")) + 4 for lbl in label_map.entries)
    deltas = 4 + n_deltas * (4 + 4 * hidden)
    meta = 4 + len(task.encode("utf-8")) + 8
    return _HEADER.size + vectors + labels + deltas + meta
