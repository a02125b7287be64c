"""Deterministic toy decoder with tree-mask attention and a prunable KV cache.

The model is a decoder-only stack: token embedding plus sinusoidal
positions, then L blocks of single-head self-attention and a two-layer
feed-forward, each with a residual connection and a parameter-free layer
norm, finished by a head tied to the embedding matrix.  All arithmetic is
float64.

Weights come from a named fixed generator (a 64-bit linear congruential
stream mapped to uniform(-0.1, 0.1)) so the same config reproduces the
same model anywhere.

Every forward pass is computed one position at a time with
matrix-vector products only.  The pipelined decoder and the sequential
oracle therefore execute bit-identical float operations, which makes
greedy-token equivalence an exact check instead of a tolerance one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, ShapeError, TreeStructureError

_LCG_MUL = 6364136223846793005
_LCG_INC = 1442695040888963407
_MASK64 = (1 << 64) - 1


def lcg_uniform_stream(seed: int, count: int) -> np.ndarray:
    """``count`` samples of uniform(-0.1, 0.1) from a 64-bit LCG.

    state' = state * 6364136223846793005 + 1442695040888963407 (mod 2^64);
    each state maps to [0, 1) via its top 53 bits.
    """
    state = seed & _MASK64
    out = np.empty(count)
    for i in range(count):
        state = (state * _LCG_MUL + _LCG_INC) & _MASK64
        out[i] = (state >> 11) / float(1 << 53)
    return out * 0.2 - 0.1


@dataclass(frozen=True)
class ToyModelConfig:
    vocab: int
    hidden: int
    layers: int
    seed: int

    def __post_init__(self):
        if self.vocab < 16:
            raise ShapeError("vocab must be at least 16")
        if self.hidden % 2 != 0:
            raise ShapeError("hidden dim must be even (sinusoidal positions)")
        if self.layers < 2:
            raise ShapeError("at least 2 layers required for meaningful sharding")

    @property
    def ffn_hidden(self) -> int:
        return 2 * self.hidden

    @property
    def param_count(self) -> int:
        # embedding (tied head) + per layer: Wq,Wk,Wv,Wo (d*d each) + W1 (d*2d) + W2 (2d*d)
        d = self.hidden
        return self.vocab * d + self.layers * (4 * d * d + 2 * d * self.ffn_hidden)


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean()
    var = x.var()
    return (x - mu) / np.sqrt(var + 1e-6)


_freq_cache: dict[int, np.ndarray] = {}


def _sin_position(pos: int, d: int) -> np.ndarray:
    freqs = _freq_cache.get(d)
    if freqs is None:
        half = d // 2
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
        _freq_cache[d] = freqs
    angles = pos * freqs
    enc = np.empty(d)
    enc[0::2] = np.sin(angles)
    enc[1::2] = np.cos(angles)
    return enc


class KvCache:
    """Per-layer key/value rows aligned to tree node ids.

    Rows are kept in insertion order.  Prefix rows (verified tokens) are
    flagged and can never be pruned; speculative rows carry the uid of
    their tree node and are dropped or promoted as the tree evolves.
    """

    def __init__(self, num_layers: int, hidden: int):
        self.num_layers = num_layers
        self.hidden = hidden
        # contiguous grow-by-doubling buffers; a stage only fills the
        # layers it hosts, the rest stay at count 0
        self._keys = [np.empty((8, hidden)) for _ in range(num_layers)]
        self._values = [np.empty((8, hidden)) for _ in range(num_layers)]
        self._counts = [0] * num_layers
        # shared across layers: row alignment metadata
        self.uids: list[int] = []  # -1 for prefix rows
        self.positions: list[int] = []
        self.prefix_flags: list[bool] = []

    def __len__(self) -> int:
        return len(self.uids)

    @property
    def keys(self) -> list[np.ndarray]:
        return [self._keys[l][: self._counts[l]] for l in range(self.num_layers)]

    @property
    def values(self) -> list[np.ndarray]:
        return [self._values[l][: self._counts[l]] for l in range(self.num_layers)]

    def begin_row(self, uid: int, position: int, prefix: bool) -> None:
        self.uids.append(uid)
        self.positions.append(position)
        self.prefix_flags.append(prefix)

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        c = self._counts[layer]
        if c == self._keys[layer].shape[0]:
            cap = max(8, 2 * c)
            for bufs in (self._keys, self._values):
                grown = np.empty((cap, self.hidden))
                grown[:c] = bufs[layer][:c]
                bufs[layer] = grown
        self._keys[layer][c] = k
        self._values[layer][c] = v
        self._counts[layer] = c + 1

    def speculative_uids(self) -> set[int]:
        return {u for u, p in zip(self.uids, self.prefix_flags) if not p}

    def rows_for(self, allowed_uids: set[int]) -> list[int]:
        """Indices of prefix rows plus speculative rows with allowed uids."""
        return [
            i
            for i, (u, p) in enumerate(zip(self.uids, self.prefix_flags))
            if p or u in allowed_uids
        ]

    def gather(self, layer: int, rows: list[int]) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(rows, dtype=np.intp)
        return self._keys[layer][idx], self._values[layer][idx]

    def promote(self, uids: set[int]) -> None:
        """Mark speculative rows as verified prefix."""
        for i, u in enumerate(self.uids):
            if u in uids:
                self.prefix_flags[i] = True
                self.uids[i] = -1

    def prune(self, keep_uids: set[int]) -> None:
        """Drop speculative rows outside ``keep_uids``; prefix rows stay."""
        keep = [i for i, (u, p) in enumerate(zip(self.uids, self.prefix_flags)) if p or u in keep_uids]
        self._restrict(keep)

    def drop_speculative(self) -> None:
        self._restrict([i for i, p in enumerate(self.prefix_flags) if p])

    def _restrict(self, keep: list[int]) -> None:
        idx = np.asarray(keep, dtype=np.intp)
        for layer in range(self.num_layers):
            if self._counts[layer] == 0:
                continue  # layer not hosted by this cache's stage
            self._keys[layer] = self._keys[layer][idx].copy()
            self._values[layer] = self._values[layer][idx].copy()
            self._counts[layer] = len(keep)
        self.uids = [self.uids[i] for i in keep]
        self.positions = [self.positions[i] for i in keep]
        self.prefix_flags = [self.prefix_flags[i] for i in keep]

    def clone(self) -> "KvCache":
        c = KvCache(self.num_layers, self.hidden)
        c._keys = [buf.copy() for buf in self._keys]
        c._values = [buf.copy() for buf in self._values]
        c._counts = list(self._counts)
        c.uids = list(self.uids)
        c.positions = list(self.positions)
        c.prefix_flags = list(self.prefix_flags)
        return c


class ToyModel:
    def __init__(self, cfg: ToyModelConfig):
        self.cfg = cfg
        d = cfg.hidden
        f = cfg.ffn_hidden
        stream = lcg_uniform_stream(cfg.seed, cfg.param_count)
        pos = 0

        def take(shape) -> np.ndarray:
            nonlocal pos
            size = int(np.prod(shape))
            chunk = stream[pos : pos + size].reshape(shape)
            pos += size
            return chunk

        self.embedding = take((cfg.vocab, d))
        self.layers: list[LayerWeights] = []
        for _ in range(cfg.layers):
            self.layers.append(
                LayerWeights(
                    wq=take((d, d)),
                    wk=take((d, d)),
                    wv=take((d, d)),
                    wo=take((d, d)),
                    w1=take((d, f)),
                    w2=take((f, d)),
                )
            )
        assert pos == cfg.param_count

    # --- basic pieces ----------------------------------------------------

    def embed(self, token: int, position: int) -> np.ndarray:
        return self.embedding[token] + _sin_position(position, self.cfg.hidden)

    def head(self, x: np.ndarray) -> np.ndarray:
        """Vocabulary logits from a final-layer embedding (tied weights)."""
        return self.embedding @ _layer_norm(x)

    def greedy_token(self, x: np.ndarray) -> int:
        # np.argmax returns the first maximum: ties break to the lowest id.
        return int(np.argmax(self.head(x)))

    def layer_step(
        self,
        layer: int,
        x: np.ndarray,
        cache: KvCache,
        rows: list[int],
        append: bool,
    ) -> np.ndarray:
        """One block applied to one position, attending to ``rows`` plus self."""
        w = self.layers[layer]
        d = self.cfg.hidden
        h = _layer_norm(x)
        q = h @ w.wq
        k = h @ w.wk
        v = h @ w.wv
        if append:
            cache.append(layer, k, v)
        # ``rows`` never contains this position's own row; self goes last,
        # matching the sequential oracle's row order exactly.
        ks, vs = cache.gather(layer, rows)
        ks = np.concatenate([ks, k[None, :]])
        vs = np.concatenate([vs, v[None, :]])
        scores = ks @ q / np.sqrt(d)
        scores -= scores.max()
        weights = np.exp(scores)
        weights /= weights.sum()
        attn = weights @ vs
        x = x + attn @ w.wo
        h2 = _layer_norm(x)
        x = x + np.maximum(h2 @ w.w1, 0.0) @ w.w2
        return x

    def forward_position(
        self,
        x: np.ndarray,
        cache: KvCache,
        allowed_rows: list[int],
        layer_range: tuple[int, int] | None = None,
        append: bool = True,
        uid: int = -1,
        position: int = 0,
        prefix: bool = False,
    ) -> np.ndarray:
        """Run ``layer_range`` blocks on one position.

        ``allowed_rows`` indexes cache rows this position may attend to
        (the verified prefix plus its tree ancestors); the position always
        attends to itself.  With ``append`` the new K/V rows extend the
        cache; ``begin_row`` is called once before the first layer.
        """
        lo, hi = layer_range if layer_range is not None else (0, self.cfg.layers)
        if append:
            cache.begin_row(uid, position, prefix)
        for layer in range(lo, hi):
            x = self.layer_step(layer, x, cache, allowed_rows, append)
        return x


def init_model(cfg: ToyModelConfig) -> ToyModel:
    return ToyModel(cfg)


def forward_tree(
    model: ToyModel,
    cache: KvCache,
    nodes: list[tuple[int, int, int, set[int]]],
    embeddings: np.ndarray | None = None,
    layer_range: tuple[int, int] | None = None,
    append: bool = True,
) -> np.ndarray:
    """Forward a batch of tree nodes sharing one cache.

    ``nodes`` holds (uid, token, position, ancestor_uids) in BFS order;
    attention for each node is restricted to the verified prefix plus its
    ancestors.  Returns the output embeddings, one row per node.  When
    ``embeddings`` is given they are used as the block inputs (mid-pipeline
    hand-off); otherwise the nodes are embedded from scratch.
    """
    outputs = []
    for idx, (uid, token, position, ancestors) in enumerate(nodes):
        if embeddings is None:
            x = model.embed(token, position)
        else:
            x = embeddings[idx]
        rows = cache.rows_for(ancestors)
        if not append:
            # recompute pass over an already-cached node: its own row is in
            # the cache as prefix, but self-attention is added explicitly
            rows = [i for i in rows if cache.positions[i] != position]
        x = model.forward_position(
            x,
            cache,
            rows,
            layer_range=layer_range,
            append=append,
            uid=uid,
            position=position,
        )
        outputs.append(x)
    return np.stack(outputs)


def kv_prune(cache: KvCache, keep_uids: set[int]) -> None:
    """Drop speculative rows outside the row-or-column survivor set.

    The verified prefix is always retained; asking to drop it is a
    contract violation (prefix rows are simply not part of ``keep_uids``
    because they carry uid -1).
    """
    if -1 in keep_uids:
        raise ContractViolation("prefix rows are retained implicitly; do not name them")
    cache.prune(keep_uids)


def sequential_decode(model: ToyModel, prompt: list[int], steps: int) -> list[int]:
    """Greedy autoregressive continuation: the losslessness oracle."""
    if not prompt:
        raise TreeStructureError("prompt must be non-empty")
    cache = KvCache(model.cfg.layers, model.cfg.hidden)
    x = None
    for pos, token in enumerate(prompt):
        rows = list(range(len(cache)))
        x = model.forward_position(
            model.embed(token, pos), cache, rows, uid=-1, position=pos, prefix=True
        )
    out: list[int] = []
    pos = len(prompt)
    for _ in range(steps):
        token = model.greedy_token(x)
        out.append(token)
        rows = list(range(len(cache)))
        x = model.forward_position(
            model.embed(token, pos), cache, rows, uid=-1, position=pos, prefix=True
        )
        pos += 1
    return out


# --- checkpoint format -----------------------------------------------------
#
# Little-endian: header {V: u32, d: u32, L: u32, seed: u64}, then the raw
# float64 weight blobs in generation order: embedding (V*d), then per layer
# Wq, Wk, Wv, Wo, W1, W2 (row-major).

def save_checkpoint(model: ToyModel, path: str) -> None:
    cfg = model.cfg
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IIIQ", cfg.vocab, cfg.hidden, cfg.layers, cfg.seed))
        fh.write(model.embedding.astype("<f8").tobytes())
        for w in model.layers:
            for tensor in (w.wq, w.wk, w.wv, w.wo, w.w1, w.w2):
                fh.write(tensor.astype("<f8").tobytes())


def load_checkpoint(path: str) -> ToyModel:
    with open(path, "rb") as fh:
        header = fh.read(20)
        vocab, hidden, layers, seed = struct.unpack("<IIIQ", header)
        cfg = ToyModelConfig(vocab=vocab, hidden=hidden, layers=layers, seed=seed)
        model = ToyModel.__new__(ToyModel)
        model.cfg = cfg
        d, f = hidden, cfg.ffn_hidden

        def read(shape) -> np.ndarray:
            size = int(np.prod(shape))
            buf = fh.read(8 * size)
            if len(buf) != 8 * size:
                raise ShapeError("truncated checkpoint")
            return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()

        model.embedding = read((vocab, d))
        model.layers = []
        for _ in range(layers):
            model.layers.append(
                LayerWeights(
                    wq=read((d, d)),
                    wk=read((d, d)),
                    wv=read((d, d)),
                    wo=read((d, d)),
                    w1=read((d, f)),
                    w2=read((f, d)),
                )
            )
        if fh.read(1):
            raise ShapeError("trailing bytes in checkpoint")
    return model
