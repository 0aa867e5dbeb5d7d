"""Scripted expert controllers, noisy rollout collection, dataset persistence.

Each built-in environment has an analytic controller (PD / energy shaping /
Jacobian-transpose) that produces near-expert demonstrations; Gaussian action
noise gives stochastic coverage. Collection keeps the top fraction of
episodes by return. Datasets serialize to a length-prefixed binary format
with a checksummed manifest so streaming readers can trust partial scans.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import Env, EnvSpec, make_env

MAGIC = b"PSTA"
VERSION = 1


class DatasetFormatError(RuntimeError):
    """Bad magic, version mismatch, or checksum failure while reading."""


@dataclass
class ExpertController:
    env_id: int
    noise_scale: float = 0.1
    params: dict = field(default_factory=dict)


@dataclass
class Trajectory:
    """One episode: time-aligned (s_t, a_t, r_t) with replay provenance."""

    env_id: int
    observations: np.ndarray  # (T, K), s_t observed before a_t
    actions: np.ndarray  # (T, L), executed (noisy, clipped) actions
    rewards: np.ndarray  # (T,)
    source: dict = field(default_factory=dict)  # controller tag, noise, reset seed

    def __post_init__(self):
        T = self.observations.shape[0]
        if not (self.actions.shape[0] == T and self.rewards.shape[0] == T):
            raise ValueError("observations/actions/rewards lengths differ")
        for arr in (self.observations, self.actions, self.rewards):
            if not np.isfinite(arr).all():
                raise ValueError("trajectory contains non-finite values")

    @property
    def length(self) -> int:
        return self.observations.shape[0]

    @property
    def returns(self) -> float:
        return float(self.rewards.sum())


@dataclass
class CollectResult:
    trajectories: list
    dropped: int = 0

    def __iter__(self):
        return iter(self.trajectories)

    def __len__(self):
        return len(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]


# ------------------------------------------------------------ controllers


def expert_for(spec: EnvSpec, noise_scale: float = 0.1) -> ExpertController:
    return ExpertController(env_id=spec.env_id, noise_scale=noise_scale)


def _wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def expert_action(ctrl: ExpertController, spec: EnvSpec, obs: np.ndarray) -> np.ndarray:
    """Deterministic expert action from a batch of observations."""
    p = spec.physics
    if spec.name == "pointmass2d":
        vx = obs[:, 2]
        ax = 0.4 * (8.0 - vx)
        ay = np.zeros_like(ax)
        act = np.stack([ax, ay], axis=1)
    elif spec.name == "pendulum":
        cos_t, sin_t, om = obs[:, 0], obs[:, 1], obs[:, 2]
        th = np.arctan2(sin_t, cos_t)
        mgl = p["mass"] * p["gravity"] * p["length"]
        energy = 0.5 * p["mass"] * p["length"] ** 2 * om**2 - mgl * cos_t
        swing = 2.0 * om * (mgl - energy)
        hold = -4.0 * _wrap_angle(th - np.pi) - 1.0 * om
        near_top = cos_t < -0.9
        act = np.where(near_top, hold, swing)[:, None]
    elif spec.name == "cartpole-c":
        x, xd, cos_t, sin_t, thd = obs.T
        balance = 12.0 * sin_t + 2.5 * thd
        drift = 0.35 * (xd - 1.5) + 0.05 * x
        act = (balance + drift)[:, None]
    elif spec.name == "twolink":
        q1 = np.arctan2(obs[:, 1], obs[:, 0])
        q12 = q1 + np.arctan2(obs[:, 3], obs[:, 2])
        dq1, dq2 = obs[:, 4], obs[:, 5]
        ex, ey = obs[:, 6], obs[:, 7]
        l1, l2 = p["l1"], p["l2"]
        j11, j12 = -l1 * np.sin(q1) - l2 * np.sin(q12), -l2 * np.sin(q12)
        j21, j22 = l1 * np.cos(q1) + l2 * np.cos(q12), l2 * np.cos(q12)
        tip_vx = j11 * dq1 + j12 * dq2
        tip_vy = j21 * dq1 + j22 * dq2
        fx = 4.0 * ex - 1.2 * tip_vx
        fy = 4.0 * ey - 1.2 * tip_vy
        tau1 = j11 * fx + j21 * fy + p["gravity"] * p["grav_gain"] * np.cos(q1)
        tau2 = j12 * fx + j22 * fy + p["gravity"] * p["grav_gain"] * 0.5 * np.cos(q12)
        act = np.stack([tau1, tau2], axis=1) / p["torque"]
    else:
        raise KeyError(f"no expert for '{spec.name}'")
    return np.clip(act, -1.0, 1.0)


def random_action(rng: np.random.Generator, batch: int, act_dim: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(batch, act_dim))


# -------------------------------------------------------------- collection


def _episode_seed(base_seed: int, index: int) -> list[int]:
    return [int(base_seed), int(index)]


def rollout_episodes(
    env: Env,
    action_fn,
    n_episodes: int,
    seed: int,
    horizon: int | None = None,
) -> CollectResult:
    """Run episodes in lockstep; ``action_fn(obs, step, rng)`` supplies actions."""
    spec = env.spec
    T = horizon if horizon is not None else spec.horizon
    rng = np.random.default_rng([int(seed), 7701])
    states = [env.reset(_episode_seed(seed, i), batch=1) for i in range(n_episodes)]
    internal = np.concatenate([s.internal for s in states], axis=0)
    from .envs import EnvState

    state = EnvState(
        internal=internal,
        steps=np.zeros(n_episodes, dtype=np.int64),
        observation=np.concatenate([s.observation for s in states], axis=0),
        error=np.zeros(n_episodes, dtype=bool),
    )
    obs_log = np.empty((T, n_episodes, spec.obs_dim))
    act_log = np.empty((T, n_episodes, spec.act_dim))
    rew_log = np.empty((T, n_episodes))
    for t in range(T):
        obs_log[t] = state.observation
        action = np.clip(action_fn(state.observation, t, rng), -1.0, 1.0)
        act_log[t] = action
        state, reward, _ = env.step(state, action)
        rew_log[t] = reward

    trajectories = []
    dropped = 0
    for i in range(n_episodes):
        if state.error[i]:
            dropped += 1
            continue
        trajectories.append(
            Trajectory(
                env_id=spec.env_id,
                observations=obs_log[:, i].copy(),
                actions=act_log[:, i].copy(),
                rewards=rew_log[:, i].copy(),
                source={"seed": _episode_seed(seed, i), "horizon": T},
            )
        )
    return CollectResult(trajectories, dropped)


def collect(
    spec: EnvSpec,
    controller: ExpertController,
    n_episodes: int,
    seed: int,
    keep_fraction: float = 0.2,
    horizon: int | None = None,
) -> CollectResult:
    """Noisy expert rollouts, keeping the top ``keep_fraction`` by return."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    env = make_env(spec)

    def policy(obs, step, rng):
        act = expert_action(controller, spec, obs)
        if controller.noise_scale > 0:
            act = act + controller.noise_scale * rng.standard_normal(act.shape)
        return act

    result = rollout_episodes(env, policy, n_episodes, seed, horizon)
    for traj in result.trajectories:
        traj.source.update({"controller": "scripted", "noise_scale": controller.noise_scale})
    if keep_fraction is not None and keep_fraction < 1.0:
        k = max(1, int(round(keep_fraction * len(result.trajectories))))
        ranked = sorted(result.trajectories, key=lambda t: t.returns, reverse=True)
        result.trajectories = ranked[:k]
    return result


def replay_matches(spec: EnvSpec, traj: Trajectory) -> bool:
    """Feed recorded actions from the recorded seed; check bitwise observation match."""
    env = make_env(spec)
    state = env.reset(traj.source["seed"], batch=1)
    for t in range(traj.length):
        if not (state.observation[0] == traj.observations[t]).all():
            return False
        state, _, _ = env.step(state, traj.actions[t : t + 1])
    return True


# ----------------------------------------------------------------- dataset


@dataclass
class ComponentStats:
    minimum: float
    maximum: float
    mean: float
    std: float
    clip: float  # R: symmetric clip range used by the tokenizer

    def to_dict(self):
        return {
            "min": self.minimum,
            "max": self.maximum,
            "mean": self.mean,
            "std": self.std,
            "clip": self.clip,
        }

    @staticmethod
    def from_dict(d):
        return ComponentStats(d["min"], d["max"], d["mean"], d["std"], d["clip"])


@dataclass
class DatasetManifest:
    dataset_id: str
    env_specs: dict  # env_id -> EnvSpec dict
    counts: dict  # env_id -> n trajectories
    token_count: int  # sum of T * (K + L), raw-data tokens only
    stats: dict  # env_id -> {"obs": [ComponentStats...], "act": [...]}
    references: dict = field(default_factory=dict)  # env_id -> {expert, random, episodes}
    config_digest: str = ""

    def to_dict(self):
        return {
            "dataset_id": self.dataset_id,
            "env_specs": {str(k): v for k, v in self.env_specs.items()},
            "counts": {str(k): v for k, v in self.counts.items()},
            "token_count": self.token_count,
            "stats": {
                str(k): {
                    "obs": [s.to_dict() for s in v["obs"]],
                    "act": [s.to_dict() for s in v["act"]],
                }
                for k, v in self.stats.items()
            },
            "references": {str(k): v for k, v in self.references.items()},
            "config_digest": self.config_digest,
        }

    @staticmethod
    def from_dict(d):
        return DatasetManifest(
            dataset_id=d["dataset_id"],
            env_specs={int(k): v for k, v in d["env_specs"].items()},
            counts={int(k): int(v) for k, v in d["counts"].items()},
            token_count=int(d["token_count"]),
            stats={
                int(k): {
                    "obs": [ComponentStats.from_dict(s) for s in v["obs"]],
                    "act": [ComponentStats.from_dict(s) for s in v["act"]],
                }
                for k, v in d["stats"].items()
            },
            references={int(k): v for k, v in d.get("references", {}).items()},
            config_digest=d.get("config_digest", ""),
        )


@dataclass
class Dataset:
    manifest: DatasetManifest
    trajectories: list

    def for_env(self, env_id: int) -> list:
        return [t for t in self.trajectories if t.env_id == env_id]

    def spec(self, env_id: int) -> EnvSpec:
        return EnvSpec.from_dict(self.manifest.env_specs[env_id])


CLIP_PERCENTILE = 99.9
MIN_CLIP = 1e-6


def compute_component_stats(trajectories: list, spec: EnvSpec) -> dict:
    """Per-component min/max/mean/std plus the symmetric clip range R.

    R is the 99.9th percentile of |x| over this dataset, floored away from 0
    so constant components stay encodable.
    """
    obs = np.concatenate([t.observations for t in trajectories], axis=0)
    act = np.concatenate([t.actions for t in trajectories], axis=0)

    def stats_of(mat):
        out = []
        for j in range(mat.shape[1]):
            col = mat[:, j]
            clip = max(float(np.percentile(np.abs(col), CLIP_PERCENTILE)), MIN_CLIP)
            out.append(
                ComponentStats(
                    minimum=float(col.min()),
                    maximum=float(col.max()),
                    mean=float(col.mean()),
                    std=float(col.std()),
                    clip=clip,
                )
            )
        return out

    return {"obs": stats_of(obs), "act": stats_of(act)}


def trajectory_tokens(traj: Trajectory, spec: EnvSpec) -> int:
    return traj.length * spec.block_len


def equal_token_budget(groups: list) -> int:
    """Largest budget every env can satisfy: n_envs times the smallest env total."""
    totals = [sum(trajectory_tokens(t, spec) for t in trajs) for spec, trajs in groups]
    return len(groups) * min(totals)


def build_multidomain(
    groups: list,
    token_budget: int | None = None,
    dataset_id: str = "dataset",
    config_digest: str = "",
) -> Dataset:
    """Concatenate per-env trajectory lists into one dataset.

    ``groups`` is a list of (EnvSpec, [Trajectory]). With a ``token_budget``,
    each env contributes ~budget/n_envs tokens (trajectory granularity);
    normalization stats are computed only from what is kept.
    """
    if not groups:
        raise ValueError("no environments given")
    kept: list = []
    counts: dict = {}
    env_specs: dict = {}
    for spec, trajs in groups:
        if not trajs:
            raise ValueError(f"empty trajectory list for env {spec.name}")
        env_specs[spec.env_id] = spec.to_dict()
        if token_budget is None:
            chosen = list(trajs)
        else:
            share = token_budget / len(groups)
            chosen = []
            used = 0
            for t in trajs:
                if used >= share:
                    break
                chosen.append(t)
                used += trajectory_tokens(t, spec)
        counts[spec.env_id] = len(chosen)
        kept.extend(chosen)

    stats = {}
    token_count = 0
    for spec, _ in groups:
        env_trajs = [t for t in kept if t.env_id == spec.env_id]
        stats[spec.env_id] = compute_component_stats(env_trajs, spec)
        token_count += sum(trajectory_tokens(t, spec) for t in env_trajs)

    manifest = DatasetManifest(
        dataset_id=dataset_id,
        env_specs=env_specs,
        counts=counts,
        token_count=token_count,
        stats=stats,
        config_digest=config_digest,
    )
    return Dataset(manifest=manifest, trajectories=kept)


# --------------------------------------------------------------- reference returns


def compute_reference_returns(spec: EnvSpec, episodes: int = 256, seed: int = 0,
                              horizon: int | None = None) -> dict:
    """Mean return of the noise-free expert and the uniform-random policy."""
    env = make_env(spec)
    ctrl = expert_for(spec, noise_scale=0.0)

    expert = rollout_episodes(
        env, lambda obs, t, rng: expert_action(ctrl, spec, obs), episodes, seed, horizon
    )
    rand = rollout_episodes(
        env,
        lambda obs, t, rng: random_action(rng, obs.shape[0], spec.act_dim),
        episodes,
        seed + 1,
        horizon,
    )
    expert_mean = float(np.mean([t.returns for t in expert.trajectories]))
    random_mean = float(np.mean([t.returns for t in rand.trajectories]))
    return {"expert": expert_mean, "random": random_mean, "episodes": episodes}


def attach_references(dataset: Dataset, episodes: int = 256, seed: int = 0,
                      horizon: int | None = None) -> None:
    for env_id in dataset.manifest.env_specs:
        spec = dataset.spec(env_id)
        dataset.manifest.references[env_id] = compute_reference_returns(
            spec, episodes=episodes, seed=seed, horizon=horizon
        )


# ------------------------------------------------------------ serialization


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_dataset(dataset: Dataset, path) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    manifest_bytes = _canonical_json(dataset.manifest.to_dict())
    parts.append(struct.pack("<I", len(manifest_bytes)))
    parts.append(manifest_bytes)
    parts.append(struct.pack("<I", zlib.crc32(manifest_bytes) & 0xFFFFFFFF))
    parts.append(struct.pack("<I", len(dataset.trajectories)))
    for traj in dataset.trajectories:
        T, K = traj.observations.shape
        L = traj.actions.shape[1]
        source_bytes = _canonical_json(traj.source)
        rec = [
            struct.pack("<HIHH", traj.env_id, T, K, L),
            struct.pack("<I", len(source_bytes)),
            source_bytes,
            np.ascontiguousarray(traj.observations, dtype=np.float64).tobytes(),
            np.ascontiguousarray(traj.actions, dtype=np.float64).tobytes(),
            np.ascontiguousarray(traj.rewards, dtype=np.float64).tobytes(),
        ]
        body = b"".join(rec)
        parts.append(struct.pack("<I", len(body)))
        parts.append(body)
        parts.append(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    off = 0
    if raw[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {raw[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    manifest_bytes = raw[off : off + mlen]
    off += mlen
    (mcrc,) = struct.unpack_from("<I", raw, off)
    off += 4
    if zlib.crc32(manifest_bytes) & 0xFFFFFFFF != mcrc:
        raise DatasetFormatError("manifest checksum mismatch")
    manifest = DatasetManifest.from_dict(json.loads(manifest_bytes.decode("utf-8")))
    (n_records,) = struct.unpack_from("<I", raw, off)
    off += 4
    trajectories = []
    for _ in range(n_records):
        if off + 4 > len(raw):
            raise DatasetFormatError("truncated file: record header missing")
        (blen,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + blen + 4 > len(raw):
            raise DatasetFormatError("truncated file: record body missing")
        body = raw[off : off + blen]
        off += blen
        (crc,) = struct.unpack_from("<I", raw, off)
        off += 4
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise DatasetFormatError("record checksum mismatch")
        env_id, T, K, L = struct.unpack_from("<HIHH", body, 0)
        boff = struct.calcsize("<HIHH")
        (slen,) = struct.unpack_from("<I", body, boff)
        boff += 4
        source = json.loads(body[boff : boff + slen].decode("utf-8"))
        boff += slen
        obs = np.frombuffer(body, dtype=np.float64, count=T * K, offset=boff).reshape(T, K).copy()
        boff += 8 * T * K
        act = np.frombuffer(body, dtype=np.float64, count=T * L, offset=boff).reshape(T, L).copy()
        boff += 8 * T * L
        rew = np.frombuffer(body, dtype=np.float64, count=T, offset=boff).copy()
        trajectories.append(
            Trajectory(env_id=env_id, observations=obs, actions=act, rewards=rew, source=source)
        )
    return Dataset(manifest=manifest, trajectories=trajectories)
