"""Toy decoder-only transformer driven by explicit position IDs and arbitrary masks.

Every reduction is done one query row at a time over exactly that row's
visible keys. A row therefore gets bit-identical numbers whether it is
computed in a full prefill, in an incremental step against the KV cache, or in
a standalone serial run that sees the same keys. Masked keys never enter the
softmax, which is the same as adding -inf to their scores.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CacheDesyncError, ConfigError, ShapeError
from .layout import SequenceLayout
from .mask import AttentionMask
from .vocab import N_SPECIAL, SpecialTokens, eos_for_vocab

DTYPE = np.float32


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 263
    layers: int = 2
    heads: int = 2
    head_dim: int = 16
    hidden_dim: int = 32
    ffn_dim: int = 64
    max_positions: int = 8192
    seed: int = 0
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("vocab_size", "layers", "heads", "head_dim", "hidden_dim", "ffn_dim",
                     "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden_dim != self.heads * self.head_dim:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} != heads*head_dim {self.heads * self.head_dim}")
        if self.head_dim % 2:
            raise ConfigError("rotary encoding needs an even head_dim")
        if self.vocab_size <= N_SPECIAL + 1:
            raise ConfigError("vocab_size must leave room for EOS and six special tokens")


@dataclass(frozen=True)
class PositionScheme:
    """How model-facing position IDs are derived from a layout.

    same-seq        branch tokens share positions per step; serial tokens use
                    their flattened position (the default)
    same-max        serial tokens after a stage continue from the longest branch
    same-rearrange  like same-seq while a stage decodes; once it closes its
                    tokens are renumbered in flattened order (forces re-prefill)
    fixed-interval  branch b gets a reserved window of ``interval`` positions
    """

    variant: str = "same-seq"
    interval: int | None = None

    VARIANTS = ("same-seq", "same-max", "same-rearrange", "fixed-interval")

    def __post_init__(self):
        if self.variant not in self.VARIANTS:
            raise ConfigError(f"unknown position scheme {self.variant!r}")
        if self.variant == "fixed-interval" and not (self.interval and self.interval > 0):
            raise ConfigError("fixed-interval needs a positive interval")

    @classmethod
    def parse(cls, text: str) -> "PositionScheme":
        name, _, arg = text.partition(":")
        return cls(name, int(arg) if arg else None)

    def __str__(self):
        return f"{self.variant}:{self.interval}" if self.interval else self.variant


SAME_SEQ = PositionScheme()


def scheme_positions(layout: SequenceLayout, scheme: PositionScheme = SAME_SEQ) -> list[int]:
    if scheme.variant == "same-seq":
        return layout.position_ids()
    out: list[int] = []
    next_pos = 1
    current = 0
    start = 0

    def stage_end(block) -> int:
        info = layout.stages[current - 1]
        if scheme.variant == "same-max":
            return start + max(info.branch_lengths)
        if scheme.variant == "fixed-interval":
            return start + info.branch_count * scheme.interval
        return block.members[0].position_id  # same-rearrange: flattened position

    for block in layout.blocks:
        if current and block.stage != current:
            next_pos = stage_end(block)
            current = 0
        if block.kind == "serial":
            out.append(next_pos)
            next_pos += 1
            continue
        if block.stage != current:
            current = block.stage
            start = next_pos
        for m in block.members:
            if scheme.variant == "fixed-interval":
                out.append(start + (m.branch - 1) * scheme.interval + m.branch_offset)
            else:
                out.append(start + m.branch_offset)
    if scheme.variant == "same-rearrange":
        for info in layout.stages:
            if not info.open:
                for t in layout.tokens:
                    if t.stage == info.stage:
                        out[t.seq] = t.seq + 1
    return out


class Model:
    """Weights plus config; immutable after construction and shareable across sessions."""

    def __init__(self, config: ModelConfig, weights: dict[str, np.ndarray]):
        self.config = config
        self.weights = weights
        self.specials = SpecialTokens.for_vocab(config.vocab_size)
        self.eos_id = eos_for_vocab(config.vocab_size)
        half = config.head_dim // 2
        self._inv_freq = config.rope_base ** (-np.arange(half, dtype=np.float64) * 2 / config.head_dim)
        for arr in weights.values():
            arr.setflags(write=False)

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def w(self, name: str) -> np.ndarray:
        return self.weights[name]

    def checksum(self, prefix: str = "layers.0.") -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(self.weights[name].tobytes())
        return h.hexdigest()

    def rotary(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        angles = np.asarray(positions, dtype=np.float64)[:, None] * self._inv_freq[None, :]
        return np.cos(angles).astype(DTYPE), np.sin(angles).astype(DTYPE)

    def save(self, path) -> None:
        save_weights(self, path)


def init_model(config: ModelConfig) -> Model:
    rng = np.random.default_rng(config.seed)
    d, f, v = config.hidden_dim, config.ffn_dim, config.vocab_size

    def normal(*shape, scale):
        return (rng.standard_normal(shape) * scale).astype(DTYPE)

    weights = {"embed": normal(v, d, scale=1.0)}
    for layer in range(config.layers):
        p = f"layers.{layer}."
        weights[p + "attn_norm"] = np.ones(d, dtype=DTYPE)
        weights[p + "wq"] = normal(d, d, scale=d ** -0.5)
        weights[p + "wk"] = normal(d, d, scale=d ** -0.5)
        weights[p + "wv"] = normal(d, d, scale=d ** -0.5)
        weights[p + "wo"] = normal(d, d, scale=d ** -0.5)
        weights[p + "ffn_norm"] = np.ones(d, dtype=DTYPE)
        weights[p + "w1"] = normal(d, f, scale=d ** -0.5)
        weights[p + "w2"] = normal(f, d, scale=f ** -0.5)
    weights["final_norm"] = np.ones(d, dtype=DTYPE)
    weights["lm_head"] = normal(d, v, scale=d ** -0.5)
    return Model(config, weights)


class KvCache:
    """Per-layer keys and values in flattened token order.

    ``layout`` (optional) is the layout the entries mirror; when set, every
    incremental forward must leave ``len == layout.flattened_len``.
    """

    def __init__(self, model: Model, layout: SequenceLayout | None = None, capacity: int = 64):
        cfg = model.config
        self.layout = layout
        self.len = 0
        self._shape = (cfg.layers, cfg.heads, cfg.head_dim)
        self.keys = np.zeros((cfg.layers, capacity, cfg.heads, cfg.head_dim), dtype=DTYPE)
        self.values = np.zeros_like(self.keys)
        self.positions = np.zeros(capacity, dtype=np.int64)
        self.token_ids = np.zeros(capacity, dtype=np.int64)

    def reserve(self, n: int) -> None:
        cap = self.keys.shape[1]
        if n <= cap:
            return
        new_cap = max(n, 2 * cap)
        grow = ((0, 0), (0, new_cap - cap), (0, 0), (0, 0))
        self.keys = np.pad(self.keys, grow)
        self.values = np.pad(self.values, grow)
        self.positions = np.pad(self.positions, (0, new_cap - cap))
        self.token_ids = np.pad(self.token_ids, (0, new_cap - cap))

    def truncate(self, n: int) -> None:
        if not 0 <= n <= self.len:
            raise CacheDesyncError(f"cannot truncate cache of length {self.len} to {n}")
        self.len = n


def _rms(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x) + DTYPE(1e-6)) * weight


def _gelu(x: np.ndarray) -> np.ndarray:
    return DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(DTYPE(0.7978845608) * (x + DTYPE(0.044715) * x ** 3)))


def _rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: (heads, head_dim), half-split rotation
    half = x.shape[-1] // 2
    x1, x2 = x[:, :half], x[:, half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _run(model: Model, cache: KvCache, token_ids: Sequence[int], position_ids: Sequence[int],
         mask: AttentionMask) -> np.ndarray:
    cfg = model.config
    n = len(token_ids)
    start = cache.len
    if len(position_ids) != n:
        raise ShapeError(f"{n} tokens but {len(position_ids)} position ids")
    if mask.shape != (n, start + n):
        raise ShapeError(f"mask shape {mask.shape} != {(n, start + n)}")
    ids = np.asarray(token_ids, dtype=np.int64)
    pos = np.asarray(position_ids, dtype=np.int64)
    if n and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ShapeError("token id outside vocabulary")
    if n and (pos.min() < 0 or pos.max() > cfg.max_positions):
        raise ShapeError(f"position id outside [0, {cfg.max_positions}]")

    cache.reserve(start + n)
    cache.positions[start:start + n] = pos
    cache.token_ids[start:start + n] = ids
    H, hd = cfg.heads, cfg.head_dim
    scale = DTYPE(1.0 / np.sqrt(hd))
    cos, sin = model.rotary(pos)
    visible = [mask.visible_indices(i) for i in range(n)]
    for i, vis in enumerate(visible):
        if len(vis) == 0:
            raise ShapeError(f"row {i} has no visible keys")

    x = model.w("embed")[ids].copy()
    q = np.empty((n, H, hd), dtype=DTYPE)
    for layer in range(cfg.layers):
        p = f"layers.{layer}."
        wq, wk, wv, wo = (model.w(p + k) for k in ("wq", "wk", "wv", "wo"))
        w1, w2 = model.w(p + "w1"), model.w(p + "w2")
        keys, values = cache.keys[layer], cache.values[layer]
        for i in range(n):
            h = _rms(x[i], model.w(p + "attn_norm"))
            q[i] = _rope((h @ wq).reshape(H, hd), cos[i], sin[i])
            keys[start + i] = _rope((h @ wk).reshape(H, hd), cos[i], sin[i])
            values[start + i] = (h @ wv).reshape(H, hd)
        for i in range(n):
            k_vis, v_vis = keys[visible[i]], values[visible[i]]
            out = np.empty((H, hd), dtype=DTYPE)
            for head in range(H):
                scores = (k_vis[:, head, :] @ q[i, head]) * scale
                weights = np.exp(scores - scores.max())
                weights /= weights.sum()
                out[head] = weights @ v_vis[:, head, :]
            x[i] += out.reshape(-1) @ wo
            x[i] += _gelu(_rms(x[i], model.w(p + "ffn_norm")) @ w1) @ w2
    cache.len = start + n
    lm_head, final = model.w("lm_head"), model.w("final_norm")
    logits = np.empty((n, cfg.vocab_size), dtype=DTYPE)
    for i in range(n):
        logits[i] = _rms(x[i], final) @ lm_head
    return logits


def _as_mask(mask, n: int, offset: int) -> AttentionMask:
    if isinstance(mask, AttentionMask):
        return mask
    arr = np.asarray(mask)
    if arr.dtype != bool:
        arr = arr == 0  # additive form: 0 visible, -inf/large negative masked
    return AttentionMask(arr.shape[0], arr.shape[1], offset, dense=arr)


def forward_full(model: Model, token_ids: Sequence[int], position_ids: Sequence[int],
                 mask) -> np.ndarray:
    """Logits for every token of a whole sequence under an arbitrary mask.

    ``mask`` is an :class:`AttentionMask`, a boolean matrix, or an additive
    float matrix (0 visible, negative infinity or a large negative value masked).
    """
    if len(token_ids) != len(position_ids):
        raise ShapeError(f"{len(token_ids)} tokens but {len(position_ids)} position ids")
    return _run(model, KvCache(model, capacity=max(1, len(token_ids))), token_ids, position_ids,
                _as_mask(mask, len(token_ids), 0))


def forward_incremental(model: Model, cache: KvCache, new_token_ids: Sequence[int],
                        new_position_ids: Sequence[int], mask_rows) -> np.ndarray:
    """Extend ``cache`` by the new tokens and return their logits."""
    n = len(new_token_ids)
    if cache.layout is not None and cache.len + n != cache.layout.flattened_len:
        raise CacheDesyncError(
            f"cache holds {cache.len} tokens, +{n} new != layout length {cache.layout.flattened_len}")
    return _run(model, cache, new_token_ids, new_position_ids, _as_mask(mask_rows, n, cache.len))


# -- weight files ----------------------------------------------------------

MAGIC = b"ASPDWGT1"


def save_weights(model: Model, path) -> None:
    """Write ``MAGIC | u64 header length | JSON header | little-endian float32 data``."""
    tensors, offset = [], 0
    for name in sorted(model.weights):
        arr = model.weights[name]
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = json.dumps({"config": dataclasses.asdict(model.config), "dtype": "<f4",
                         "tensors": tensors}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in sorted(model.weights):
            fh.write(model.weights[name].astype("<f4").tobytes())


def load_weights(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ConfigError(f"{path}: not a weight file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    weights = {}
    for t in header["tensors"]:
        buf = raw[base + t["offset"]: base + t["offset"] + t["nbytes"]]
        weights[t["name"]] = np.frombuffer(buf, dtype="<f4").astype(DTYPE).reshape(t["shape"])
    return Model(ModelConfig(**header["config"]), weights)
