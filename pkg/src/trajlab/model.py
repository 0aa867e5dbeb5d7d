"""Transformer trunk: token + learned positional embeddings, rotary attention,
pre-norm residual blocks, token-prediction head, embedding extraction.

One trunk serves all pre-training objectives; attention mode (bidirectional
or causal) is chosen per forward call. Rotary rotations are applied to
queries and keys by absolute window position on top of the learned absolute
positional table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor
from .tokenizer import KIND_OBS, TokenSequence

BIDIRECTIONAL = "bidirectional"
CAUSAL = "causal"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    vocab_size: int
    context_window: int
    mlp_ratio: int = 2
    rope_theta: float = 10000.0
    tie_output: bool = False
    preset: str = "desk"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model // self.n_heads % 2 != 0:
            raise ValueError("head dim must be even for rotary rotation")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self):
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "vocab_size": self.vocab_size,
            "context_window": self.context_window,
            "mlp_ratio": self.mlp_ratio,
            "rope_theta": self.rope_theta,
            "tie_output": self.tie_output,
            "preset": self.preset,
        }

    @staticmethod
    def from_dict(d):
        return ModelConfig(
            n_layers=int(d["n_layers"]),
            n_heads=int(d["n_heads"]),
            d_model=int(d["d_model"]),
            vocab_size=int(d["vocab_size"]),
            context_window=int(d["context_window"]),
            mlp_ratio=int(d.get("mlp_ratio", 2)),
            rope_theta=float(d.get("rope_theta", 10000.0)),
            tie_output=bool(d.get("tie_output", False)),
            preset=str(d.get("preset", "desk")),
        )


def desk_config(vocab_size: int, context_window: int = 128, **kw) -> ModelConfig:
    return ModelConfig(4, 4, 64, vocab_size, context_window, preset="desk", **kw)


def paper_config(vocab_size: int, context_window: int = 128, **kw) -> ModelConfig:
    return ModelConfig(10, 8, 256, vocab_size, context_window, preset="paper", **kw)


def count_params(config: ModelConfig) -> int:
    """Exact analytic parameter count for this architecture."""
    d, v = config.d_model, config.vocab_size
    per_layer = 4 * d * d + 2 * config.mlp_ratio * d * d + 4 * d
    total = v * d + config.context_window * d + config.n_layers * per_layer + 2 * d
    if not config.tie_output:
        total += d * v
    return total


def init_weights(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng([int(seed), 0x7261])
    w: dict[str, Tensor] = {}

    def param(name, shape, std=0.02):
        w[name] = Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

    def ones(name, n):
        w[name] = Tensor(np.ones(n, dtype=dtype), requires_grad=True)

    def zeros(name, n):
        w[name] = Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

    d = config.d_model
    param("tok_emb", (config.vocab_size, d))
    param("pos_emb", (config.context_window, d))
    for i in range(config.n_layers):
        ones(f"layer{i}.ln1.g", d)
        zeros(f"layer{i}.ln1.b", d)
        for nm in ("wq", "wk", "wv", "wo"):
            param(f"layer{i}.attn.{nm}", (d, d))
        ones(f"layer{i}.ln2.g", d)
        zeros(f"layer{i}.ln2.b", d)
        param(f"layer{i}.mlp.w1", (d, config.mlp_ratio * d))
        param(f"layer{i}.mlp.w2", (config.mlp_ratio * d, d))
    ones("lnf.g", d)
    zeros("lnf.b", d)
    if not config.tie_output:
        param("head", (d, config.vocab_size))
    assert sum(t.size for t in w.values()) == count_params(config)
    return w


def _rope_tables(config: ModelConfig, T: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = config.head_dim // 2
    freqs = config.rope_theta ** (-np.arange(half) * 2.0 / config.head_dim)
    angles = np.arange(T)[:, None] * freqs[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))[None, None, :, :]


def trunk_hidden(
    weights: dict[str, Tensor],
    config: ModelConfig,
    ids: np.ndarray,
    mode: str = BIDIRECTIONAL,
    return_attn: bool = False,
    start_layer: int = 0,
    x0: Tensor | None = None,
):
    """Hidden states (B, T, d_model) after the final layer norm, as a graph
    tensor. ``start_layer``/``x0`` resume mid-stack from precomputed
    activations (used by last-layer fine-tuning)."""
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    B, T = ids.shape
    if T > config.context_window:
        raise nc.ShapeError(f"sequence length {T} exceeds context window {config.context_window}")
    if mode not in (BIDIRECTIONAL, CAUSAL):
        raise ValueError(f"unknown attention mode '{mode}'")

    dtype = weights["tok_emb"].dtype
    cos, sin = _rope_tables(config, T, dtype)
    attn_mask = _causal_mask(T) if mode == CAUSAL else None
    scale = 1.0 / np.sqrt(config.head_dim)
    H, dh = config.n_heads, config.head_dim

    if x0 is not None:
        x = x0
    else:
        x = nc.add(
            nc.embedding_lookup(weights["tok_emb"], ids),
            nc.embedding_lookup(weights["pos_emb"], np.arange(T)),
        )
    attn_records = []
    for i in range(start_layer, config.n_layers):
        h = nc.layer_norm(x, weights[f"layer{i}.ln1.g"], weights[f"layer{i}.ln1.b"])
        q = nc.matmul(h, weights[f"layer{i}.attn.wq"])
        k = nc.matmul(h, weights[f"layer{i}.attn.wk"])
        v = nc.matmul(h, weights[f"layer{i}.attn.wv"])
        # (B, T, D) -> (B, H, T, dh)
        q = nc.transpose(nc.reshape(q, (B, T, H, dh)), (0, 2, 1, 3))
        k = nc.transpose(nc.reshape(k, (B, T, H, dh)), (0, 2, 1, 3))
        v = nc.transpose(nc.reshape(v, (B, T, H, dh)), (0, 2, 1, 3))
        q = nc.apply_rotary(q, cos, sin)
        k = nc.apply_rotary(k, cos, sin)
        scores = nc.mul(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), scale)
        probs = nc.softmax(scores, mask=attn_mask)
        if return_attn:
            attn_records.append(probs.data)
        ctx = nc.matmul(probs, v)
        ctx = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (B, T, config.d_model))
        x = nc.add(x, nc.matmul(ctx, weights[f"layer{i}.attn.wo"]))
        h2 = nc.layer_norm(x, weights[f"layer{i}.ln2.g"], weights[f"layer{i}.ln2.b"])
        mid = nc.gelu(nc.matmul(h2, weights[f"layer{i}.mlp.w1"]))
        x = nc.add(x, nc.matmul(mid, weights[f"layer{i}.mlp.w2"]))

    hidden = nc.layer_norm(x, weights["lnf.g"], weights["lnf.b"])
    if return_attn:
        return hidden, attn_records
    return hidden


def project_vocab(weights: dict[str, Tensor], config: ModelConfig, hidden: Tensor) -> Tensor:
    """Map hidden states to vocab logits (tied or untied head)."""
    if config.tie_output:
        return nc.matmul(hidden, nc.transpose(weights["tok_emb"], (1, 0)))
    return nc.matmul(hidden, weights["head"])


def forward(
    weights: dict[str, Tensor],
    config: ModelConfig,
    ids: np.ndarray,
    mode: str = BIDIRECTIONAL,
    return_attn: bool = False,
):
    """Run the trunk over a (B, T) id batch.

    Returns (logits, hidden) with shapes (B, T, V) and (B, T, d_model);
    ``hidden`` is the final-layer-norm output used as the embedding stream.
    With ``return_attn`` a third value collects per-layer attention weights.
    """
    if return_attn:
        hidden, attn = trunk_hidden(weights, config, ids, mode, return_attn=True)
        return project_vocab(weights, config, hidden), hidden, attn
    hidden = trunk_hidden(weights, config, ids, mode)
    return project_vocab(weights, config, hidden), hidden


def masked_logits(weights: dict[str, Tensor], config: ModelConfig, ids: np.ndarray,
                  loss_mask: np.ndarray, mode: str = BIDIRECTIONAL):
    """Vocab logits only at the positions selected by ``loss_mask``.

    Avoids projecting every position through the vocab head; returns
    (logits_at_selected, flat_row_indices).
    """
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    B, T = ids.shape
    hidden = trunk_hidden(weights, config, ids, mode)
    flat = nc.reshape(hidden, (B * T, config.d_model))
    rows = np.nonzero(loss_mask.reshape(-1))[0]
    sel = nc.take_rows(flat, rows)
    return project_vocab(weights, config, sel), rows


def hidden_only(weights: dict[str, Tensor], config: ModelConfig, ids: np.ndarray,
                mode: str = BIDIRECTIONAL) -> np.ndarray:
    """Forward-only hidden states (no graph, no vocab projection)."""
    with nc.no_grad():
        return trunk_hidden(weights, config, ids, mode).data


def extract_embedding(weights: dict[str, Tensor], config: ModelConfig,
                      window: TokenSequence, mode: str = BIDIRECTIONAL) -> np.ndarray:
    """Embedding at the last observed token of a window ending on an
    observation block; this vector is the surrogate state fed to policies."""
    if window.kinds[-1] != KIND_OBS or window.components[-1] != window.k_tok - 1:
        raise ValueError("window does not end on a complete observation block")
    hidden = hidden_only(weights, config, window.tokens[None, :], mode)
    return hidden[0, -1]


def embed_token_matrix(weights: dict[str, Tensor], config: ModelConfig,
                       token_matrix: np.ndarray, mode: str = BIDIRECTIONAL,
                       batch_size: int = 512) -> np.ndarray:
    """Last-position embeddings for many windows at once (forward-only)."""
    outs = []
    for lo in range(0, token_matrix.shape[0], batch_size):
        hidden = hidden_only(weights, config, token_matrix[lo : lo + batch_size], mode)
        outs.append(hidden[:, -1].copy())
    return np.concatenate(outs, axis=0)


# ------------------------------------------------------------- persistence


def save_model(path, weights: dict[str, Tensor], config: ModelConfig, meta: dict,
               config_digest: str = "") -> None:
    blobs = {name: t.data for name, t in weights.items()}
    full_meta = {"model_config": config.to_dict(), **meta}
    nc.save_checkpoint(path, blobs, full_meta, config_digest)


def load_model(path):
    """Returns (weights, config, meta, digest).

    Accepts both plain containers and training checkpoints where weights are
    prefixed ``w:`` alongside optimizer moment blobs.
    """
    blobs, meta, digest = nc.load_checkpoint(path)
    config = ModelConfig.from_dict(meta["model_config"])
    if any(k.startswith("w:") for k in blobs):
        items = {k[2:]: v for k, v in blobs.items() if k.startswith("w:")}
    else:
        items = blobs
    weights = {name: Tensor(arr, requires_grad=True) for name, arr in items.items()}
    return weights, config, meta, digest


def weight_checksums(weights: dict[str, Tensor]) -> dict[str, int]:
    import zlib

    return {name: zlib.crc32(np.ascontiguousarray(t.data).tobytes()) for name, t in weights.items()}
