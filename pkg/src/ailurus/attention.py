"""Multiplicity-weighted multi-head self-attention and pre-norm ViT blocks.

A representative token that stands for ``m`` merged tokens enters every
softmax with an additive ``log(m)`` bias on its logit, which is the same as
counting it ``m`` times in the normalisation. With unit multiplicities this
is ordinary scaled dot-product attention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.special import erf

from ._io import atomic_write_bytes, atomic_write_text

__all__ = [
    "BlockWeights",
    "WeightedSequence",
    "attention_weights",
    "weighted_attention",
    "block_forward",
    "init_block_weights",
    "save_block_weights",
    "load_block_weights",
]

LN_EPS = 1e-6
MLP_RATIO = 4


@dataclass(frozen=True, eq=False)
class BlockWeights:
    """Parameters of one pre-norm encoder block (float32 storage).

    Projections act on row vectors: ``q = x @ wq``.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    num_heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        hidden = self.w1.shape[1]
        expected = {
            "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "w1": (d, hidden), "b1": (hidden,), "w2": (hidden, d), "b2": (d,),
            "ln1_g": (d,), "ln1_b": (d,), "ln2_g": (d,), "ln2_b": (d,),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)
        if self.num_heads < 1 or d % self.num_heads:
            raise ValueError(f"{self.num_heads} heads do not divide dim {d}")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "num_heads"}

    def replace(self, **changes) -> "BlockWeights":
        heads = changes.pop("num_heads", self.num_heads)
        params = self.tensors()
        params.update(changes)
        return BlockWeights(num_heads=heads, **params)


@dataclass(frozen=True, eq=False)
class WeightedSequence:
    tokens: np.ndarray
    log_weights: np.ndarray

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float32)
        logw = np.asarray(self.log_weights, dtype=np.float64)
        if tokens.ndim != 2 or logw.shape != (tokens.shape[0],):
            raise ValueError(f"tokens {tokens.shape} and log_weights {logw.shape} disagree")
        if not np.isfinite(logw).all() or (logw < 0).any():
            raise ValueError("log_weights must be finite and non-negative")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "log_weights", logw)

    @classmethod
    def unweighted(cls, tokens) -> "WeightedSequence":
        tokens = np.asarray(tokens)
        return cls(tokens, np.zeros(tokens.shape[0]))


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, num_heads, d // num_heads).transpose(1, 0, 2)


def attention_weights(q, k, log_weights, num_heads: int, scale: float | None = None) -> np.ndarray:
    """Row-stochastic attention maps, shape ``(heads, len(q), len(k))``."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape[1] != k.shape[1] or q.shape[1] % num_heads:
        raise ValueError(f"incompatible q {q.shape} / k {k.shape} for {num_heads} heads")
    logw = np.asarray(log_weights, dtype=np.float64)
    if logw.shape != (k.shape[0],):
        raise ValueError(f"log_weights shape {logw.shape} does not match {k.shape[0]} keys")
    if scale is None:
        scale = np.sqrt(q.shape[1] / num_heads)
    logits = _split_heads(q, num_heads) @ _split_heads(k, num_heads).transpose(0, 2, 1) / scale
    logits += logw[None, None, :]
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite attention logits")
    logits -= logits.max(axis=-1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs


def weighted_attention(q, k, v, log_weights, num_heads: int, scale: float | None = None) -> np.ndarray:
    """Softmax attention where key ``j`` counts ``exp(log_weights[j])`` times.

    Returns float64 ``(len(q), dim)`` with heads concatenated.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != np.shape(k):
        raise ValueError(f"value shape {v.shape} does not match keys {np.shape(k)}")
    probs = attention_weights(q, k, log_weights, num_heads, scale)
    out = probs @ _split_heads(v, num_heads)
    return out.transpose(1, 0, 2).reshape(len(probs[0]), v.shape[1])


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def block_forward(seq: WeightedSequence, weights: BlockWeights) -> WeightedSequence:
    """``x + Attn(LN(x))`` followed by ``+ MLP(LN(.))``; multiplicities pass through."""
    x = seq.tokens.astype(np.float64)
    if x.shape[1] != weights.dim:
        raise ValueError(f"sequence dim {x.shape[1]} does not match block dim {weights.dim}")
    f64 = lambda a: a.astype(np.float64)  # noqa: E731

    h = _layer_norm(x, f64(weights.ln1_g), f64(weights.ln1_b))
    attn = weighted_attention(h @ f64(weights.wq), h @ f64(weights.wk), h @ f64(weights.wv),
                              seq.log_weights, weights.num_heads)
    x = x + attn @ f64(weights.wo)

    h = _layer_norm(x, f64(weights.ln2_g), f64(weights.ln2_b))
    x = x + _gelu(h @ f64(weights.w1) + f64(weights.b1)) @ f64(weights.w2) + f64(weights.b2)
    return WeightedSequence(x.astype(np.float32), seq.log_weights)


def init_block_weights(dim: int, heads: int, layer_count: int, seed: int = 0) -> list[BlockWeights]:
    """Seeded Gaussian matrices with std ``1/sqrt(dim)``; zero biases, unit LN gains."""
    if heads < 1 or dim % heads:
        raise ValueError(f"{heads} heads do not divide dim {dim}")
    rng = np.random.default_rng(seed)
    hidden = MLP_RATIO * dim
    std = 1.0 / np.sqrt(dim)
    out = []
    for _ in range(layer_count):
        mat = lambda r, c: (rng.standard_normal((r, c)) * std).astype(np.float32)  # noqa: E731
        out.append(BlockWeights(
            wq=mat(dim, dim), wk=mat(dim, dim), wv=mat(dim, dim), wo=mat(dim, dim),
            w1=mat(dim, hidden), b1=np.zeros(hidden, np.float32),
            w2=mat(hidden, dim), b2=np.zeros(dim, np.float32),
            ln1_g=np.ones(dim, np.float32), ln1_b=np.zeros(dim, np.float32),
            ln2_g=np.ones(dim, np.float32), ln2_b=np.zeros(dim, np.float32),
            num_heads=heads,
        ))
    return out


def save_block_weights(layers: list[BlockWeights], path) -> None:
    """Write ``NAME.json`` (tensor table) + ``NAME.bin`` (concatenated f32le tensors)."""
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    table, chunks, offset = [], [], 0
    for li, layer in enumerate(layers):
        for name, arr in layer.tensors().items():
            raw = arr.astype("<f4").tobytes()
            table.append({"name": f"layer{li}.{name}", "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
    meta = {
        "dtype": "f32le",
        "layers": len(layers),
        "dim": layers[0].dim if layers else 0,
        "num_heads": layers[0].num_heads if layers else 0,
        "tensors": table,
    }
    atomic_write_bytes(path.with_name(path.name + ".bin"), b"".join(chunks))
    atomic_write_text(path.with_name(path.name + ".json"), json.dumps(meta, indent=1) + "\n")


def load_block_weights(path) -> list[BlockWeights]:
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    raw = path.with_name(path.name + ".bin").read_bytes()
    layers: list[dict] = [{} for _ in range(meta["layers"])]
    for entry in meta["tensors"]:
        layer_name, tensor = entry["name"].split(".", 1)
        count = int(np.prod(entry["shape"]))
        end = entry["offset"] + 4 * count
        if end > len(raw):
            raise ValueError(f"truncated payload for tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=entry["offset"])
        layers[int(layer_name[len("layer"):])][tensor] = arr.reshape(entry["shape"]).astype(np.float32)
    return [BlockWeights(num_heads=meta["num_heads"], **params) for params in layers]
