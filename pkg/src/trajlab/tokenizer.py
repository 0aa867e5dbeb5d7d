"""Component-level discretization and window assembly.

Raw component values are clipped to a per-component symmetric range R taken
from the dataset manifest, scaled to [-1, 1], mu-law companded and binned
uniformly (1024 left-closed bins, the top bin right-closed). Token streams
interleave K observation tokens then L action tokens per timestep; fixed
windows carry one environment token at position 0 and always end on a
complete observation block.

A modality-level variant (one token per whole state or action, built from a
mixed-radix product code over coarse per-component bins) exists for the
tokenization-granularity comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import ComponentStats, Trajectory
from .envs import EnvSpec

KIND_ENV = 0
KIND_OBS = 1
KIND_ACT = 2
KIND_PAD = 3


@dataclass(frozen=True)
class QuantizerConfig:
    n_bins: int = 1024
    mu: float = 255.0
    context_window: int = 128
    stride_blocks: int = 1

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")

    def to_dict(self):
        return {
            "n_bins": self.n_bins,
            "mu": self.mu,
            "context_window": self.context_window,
            "stride_blocks": self.stride_blocks,
        }

    @staticmethod
    def from_dict(d):
        return QuantizerConfig(
            n_bins=int(d["n_bins"]),
            mu=float(d["mu"]),
            context_window=int(d["context_window"]),
            stride_blocks=int(d["stride_blocks"]),
        )


@dataclass(frozen=True)
class Vocabulary:
    """Disjoint id ranges: values, env tokens, MASK, PAD."""

    value_count: int
    n_envs: int

    @property
    def mask_id(self) -> int:
        return self.value_count + self.n_envs

    @property
    def pad_id(self) -> int:
        return self.value_count + self.n_envs + 1

    @property
    def size(self) -> int:
        return self.value_count + self.n_envs + 2

    def env_token(self, env_id: int) -> int:
        if not 0 <= env_id < self.n_envs:
            raise ValueError(f"env_id {env_id} outside [0, {self.n_envs})")
        return self.value_count + env_id

    def is_value(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        return (ids >= 0) & (ids < self.value_count)


@dataclass
class TokenizedTrajectory:
    """Raw token stream for one trajectory (no env token, no padding)."""

    tokens: np.ndarray  # (N,) int32
    kinds: np.ndarray  # (N,) int8
    timesteps: np.ndarray  # (N,) int32
    components: np.ndarray  # (N,) int32
    env_id: int
    k_tok: int  # observation tokens per timestep
    l_tok: int  # action tokens per timestep
    length: int  # timesteps

    @property
    def block_len(self) -> int:
        return self.k_tok + self.l_tok


@dataclass
class TokenSequence:
    """One fixed-size window: env token at position 0, then a stream slice."""

    tokens: np.ndarray
    kinds: np.ndarray
    timesteps: np.ndarray
    components: np.ndarray
    env_id: int
    k_tok: int
    l_tok: int
    padded: bool = False

    def __len__(self):
        return self.tokens.shape[0]


# --------------------------------------------------------------- scalar codec


def _compand(x: np.ndarray, mu: float) -> np.ndarray:
    return np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)


def _expand(y: np.ndarray, mu: float) -> np.ndarray:
    return np.sign(y) * (np.expm1(np.abs(y) * np.log1p(mu))) / mu


def encode_value(x, stats: ComponentStats, config: QuantizerConfig) -> np.ndarray:
    """Clip to [-R, R], compand to [-1, 1], bin uniformly; returns int32 ids."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("cannot encode non-finite value")
    r = stats.clip
    scaled = np.clip(x, -r, r) / r
    y = _compand(scaled, config.mu)
    bins = np.floor((y + 1.0) * 0.5 * config.n_bins).astype(np.int32)
    return np.clip(bins, 0, config.n_bins - 1)


def decode_token(ids, stats: ComponentStats, config: QuantizerConfig) -> np.ndarray:
    """Bin center, inverse-companded and unscaled. Value tokens only."""
    ids = np.asarray(ids)
    if (ids < 0).any() or (ids >= config.n_bins).any():
        raise ValueError("decode_token expects value-token ids")
    y = (2.0 * (ids + 0.5) / config.n_bins) - 1.0
    return _expand(y, config.mu) * stats.clip


# ----------------------------------------------------------- component level


class ComponentTokenizer:
    """One token per scalar state/action component."""

    level = "component"

    def __init__(self, spec: EnvSpec, stats: dict, config: QuantizerConfig, vocab: Vocabulary):
        self.spec = spec
        self.stats = stats  # {"obs": [ComponentStats]*K, "act": [...]*L}
        self.config = config
        self.vocab = vocab
        self.k_tok = spec.obs_dim
        self.l_tok = spec.act_dim

    def encode_obs(self, obs: np.ndarray) -> np.ndarray:
        """(..., K) values -> (..., K) token ids."""
        obs = np.asarray(obs, dtype=np.float64)
        out = np.empty(obs.shape, dtype=np.int32)
        for j in range(self.spec.obs_dim):
            out[..., j] = encode_value(obs[..., j], self.stats["obs"][j], self.config)
        return out

    def encode_act(self, act: np.ndarray) -> np.ndarray:
        act = np.asarray(act, dtype=np.float64)
        out = np.empty(act.shape, dtype=np.int32)
        for j in range(self.spec.act_dim):
            out[..., j] = encode_value(act[..., j], self.stats["act"][j], self.config)
        return out

    def decode_obs(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        out = np.empty(ids.shape, dtype=np.float64)
        for j in range(self.spec.obs_dim):
            out[..., j] = decode_token(ids[..., j], self.stats["obs"][j], self.config)
        return out

    def decode_act(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        out = np.empty(ids.shape, dtype=np.float64)
        for j in range(self.spec.act_dim):
            out[..., j] = decode_token(ids[..., j], self.stats["act"][j], self.config)
        return out

    def encode_trajectory(self, traj: Trajectory) -> TokenizedTrajectory:
        T = traj.length
        K, L = self.spec.obs_dim, self.spec.act_dim
        block = K + L
        obs_ids = self.encode_obs(traj.observations)
        act_ids = self.encode_act(traj.actions)
        tokens = np.empty(T * block, dtype=np.int32)
        kinds = np.empty(T * block, dtype=np.int8)
        steps = np.repeat(np.arange(T, dtype=np.int32), block)
        comps = np.empty(T * block, dtype=np.int32)
        view = tokens.reshape(T, block)
        view[:, :K] = obs_ids
        view[:, K:] = act_ids
        kview = kinds.reshape(T, block)
        kview[:, :K] = KIND_OBS
        kview[:, K:] = KIND_ACT
        cview = comps.reshape(T, block)
        cview[:, :K] = np.arange(K)
        cview[:, K:] = np.arange(L)
        return TokenizedTrajectory(
            tokens=tokens,
            kinds=kinds,
            timesteps=steps,
            components=comps,
            env_id=traj.env_id,
            k_tok=K,
            l_tok=L,
            length=T,
        )

    def meta(self) -> dict:
        return {
            "level": self.level,
            "config": self.config.to_dict(),
            "env_id": self.spec.env_id,
            "stats": {
                kind: [s.to_dict() for s in lst] for kind, lst in self.stats.items()
            },
        }


# ------------------------------------------------------------ modality level


def max_modality_bins(dim: int, cap: int = 4096) -> int:
    """Largest per-component bin count whose product code stays under ``cap``."""
    m = int(np.floor(cap ** (1.0 / dim)))
    return max(m, 2)


class ModalityTokenizer:
    """One token per whole state and one per whole action.

    Components are binned at coarse resolution and joined as a mixed-radix
    code; state and action codes share one value-token id space, so the
    vocabulary matches the component tokenizer's layout conventions.
    """

    level = "modality"
    CAP = 4096

    def __init__(self, spec: EnvSpec, stats: dict, config: QuantizerConfig,
                 obs_bins: int = 9, act_bins: int = 9):
        if obs_bins**spec.obs_dim > self.CAP:
            raise ValueError(
                f"modality codebook overflow: {obs_bins}^{spec.obs_dim} > {self.CAP}; "
                f"use obs_bins <= {max_modality_bins(spec.obs_dim, self.CAP)}"
            )
        if act_bins**spec.act_dim > self.CAP:
            raise ValueError(
                f"modality codebook overflow: {act_bins}^{spec.act_dim} > {self.CAP}; "
                f"use act_bins <= {max_modality_bins(spec.act_dim, self.CAP)}"
            )
        self.spec = spec
        self.stats = stats
        self.obs_bins = obs_bins
        self.act_bins = act_bins
        self.obs_codes = obs_bins**spec.obs_dim
        self.act_codes = act_bins**spec.act_dim
        self.config = config
        self._obs_cfg = QuantizerConfig(
            n_bins=obs_bins, mu=config.mu,
            context_window=config.context_window, stride_blocks=config.stride_blocks,
        )
        self._act_cfg = QuantizerConfig(
            n_bins=act_bins, mu=config.mu,
            context_window=config.context_window, stride_blocks=config.stride_blocks,
        )
        self.k_tok = 1
        self.l_tok = 1

    @property
    def value_count(self) -> int:
        return max(self.obs_codes, self.act_codes)

    def _pack(self, mat: np.ndarray, stats_list, cfg, bins: int) -> np.ndarray:
        code = np.zeros(mat.shape[:-1], dtype=np.int64)
        radix = 1
        for j in range(mat.shape[-1]):
            b = encode_value(mat[..., j], stats_list[j], cfg)
            code += b.astype(np.int64) * radix
            radix *= bins
        return code.astype(np.int32)

    def _unpack(self, code: np.ndarray, stats_list, cfg, bins: int, dim: int) -> np.ndarray:
        code = np.asarray(code).astype(np.int64)
        out = np.empty(code.shape + (dim,), dtype=np.float64)
        for j in range(dim):
            b = code % bins
            out[..., j] = decode_token(b, stats_list[j], cfg)
            code = code // bins
        return out

    def encode_obs(self, obs: np.ndarray) -> np.ndarray:
        return self._pack(np.asarray(obs, dtype=np.float64), self.stats["obs"], self._obs_cfg, self.obs_bins)[..., None]

    def encode_act(self, act: np.ndarray) -> np.ndarray:
        return self._pack(np.asarray(act, dtype=np.float64), self.stats["act"], self._act_cfg, self.act_bins)[..., None]

    def decode_obs(self, code: np.ndarray) -> np.ndarray:
        return self._unpack(np.asarray(code)[..., 0], self.stats["obs"], self._obs_cfg, self.obs_bins, self.spec.obs_dim)

    def decode_act(self, code: np.ndarray) -> np.ndarray:
        return self._unpack(np.asarray(code)[..., 0], self.stats["act"], self._act_cfg, self.act_bins, self.spec.act_dim)

    def encode_trajectory(self, traj: Trajectory) -> TokenizedTrajectory:
        T = traj.length
        obs_codes = self.encode_obs(traj.observations)[:, 0]
        act_codes = self.encode_act(traj.actions)[:, 0]
        tokens = np.empty(T * 2, dtype=np.int32)
        tokens[0::2] = obs_codes
        tokens[1::2] = act_codes
        kinds = np.empty(T * 2, dtype=np.int8)
        kinds[0::2] = KIND_OBS
        kinds[1::2] = KIND_ACT
        steps = np.repeat(np.arange(T, dtype=np.int32), 2)
        comps = np.zeros(T * 2, dtype=np.int32)
        return TokenizedTrajectory(
            tokens=tokens, kinds=kinds, timesteps=steps, components=comps,
            env_id=traj.env_id, k_tok=1, l_tok=1, length=T,
        )

    def meta(self) -> dict:
        return {
            "level": self.level,
            "config": self.config.to_dict(),
            "env_id": self.spec.env_id,
            "obs_bins": self.obs_bins,
            "act_bins": self.act_bins,
            "stats": {
                kind: [s.to_dict() for s in lst] for kind, lst in self.stats.items()
            },
        }


# ----------------------------------------------------------------- windows


def window_ending_at(stream: TokenizedTrajectory, t: int, vocab: Vocabulary,
                     config: QuantizerConfig) -> TokenSequence:
    """Window of exactly ``context_window`` tokens ending at the end of
    timestep ``t``'s observation block, env token at position 0 and PAD fill
    at the front when history is short."""
    ctx = config.context_window
    block = stream.block_len
    end = t * block + stream.k_tok  # exclusive
    if end > stream.tokens.shape[0]:
        raise ValueError(f"timestep {t} beyond trajectory length {stream.length}")
    body = ctx - 1
    start = end - body
    pad = max(0, -start)
    lo = max(0, start)
    tokens = np.empty(ctx, dtype=np.int32)
    kinds = np.empty(ctx, dtype=np.int8)
    steps = np.full(ctx, -1, dtype=np.int32)
    comps = np.full(ctx, -1, dtype=np.int32)
    tokens[0] = vocab.env_token(stream.env_id)
    kinds[0] = KIND_ENV
    if pad:
        tokens[1 : 1 + pad] = vocab.pad_id
        kinds[1 : 1 + pad] = KIND_PAD
    tokens[1 + pad :] = stream.tokens[lo:end]
    kinds[1 + pad :] = stream.kinds[lo:end]
    steps[1 + pad :] = stream.timesteps[lo:end]
    comps[1 + pad :] = stream.components[lo:end]
    return TokenSequence(
        tokens=tokens, kinds=kinds, timesteps=steps, components=comps,
        env_id=stream.env_id, k_tok=stream.k_tok, l_tok=stream.l_tok,
        padded=pad > 0,
    )


def full_window_timesteps(stream: TokenizedTrajectory, config: QuantizerConfig) -> np.ndarray:
    """Timesteps t whose window needs no padding, at the configured stride."""
    ctx = config.context_window
    block = stream.block_len
    # smallest t with t*block + k_tok >= ctx - 1
    t_min = int(np.ceil((ctx - 1 - stream.k_tok) / block))
    t_min = max(t_min, 0)
    return np.arange(t_min, stream.length, config.stride_blocks, dtype=np.int64)


def windows(stream: TokenizedTrajectory, vocab: Vocabulary, config: QuantizerConfig):
    """Stream of full windows; a too-short trajectory yields one padded window."""
    ts = full_window_timesteps(stream, config)
    if ts.size == 0:
        yield window_ending_at(stream, stream.length - 1, vocab, config)
        return
    for t in ts:
        yield window_ending_at(stream, int(t), vocab, config)


def component_vocab(n_bins: int, n_envs: int) -> Vocabulary:
    return Vocabulary(value_count=n_bins, n_envs=n_envs)


def tokenizer_for(spec: EnvSpec, stats: dict, config: QuantizerConfig,
                  level: str = "component", vocab: Vocabulary | None = None,
                  obs_bins: int = 9, act_bins: int = 9):
    if level == "component":
        if vocab is None:
            raise ValueError("component tokenizer needs a vocabulary")
        return ComponentTokenizer(spec, stats, config, vocab)
    if level == "modality":
        return ModalityTokenizer(spec, stats, config, obs_bins=obs_bins, act_bins=act_bins)
    raise ValueError(f"unknown tokenization level '{level}'")
