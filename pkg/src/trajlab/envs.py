"""Analytic continuous-control environments plus evaluation wrappers.

Four cheap, deterministic, dependency-free environments with heterogeneous
observation/action sizes stand in for heavyweight physics backends:

* ``pointmass2d`` (K=4, L=2): thrust-driven point mass on a ground plane in a
  vertical plane; reward is forward velocity minus a control penalty.
* ``pendulum`` (K=3, L=1): torque-limited swing-up; reward is tip height
  minus a control penalty.
* ``cartpole-c`` (K=5, L=1): continuous-force cartpole; reward is cart
  velocity plus uprightness minus a control penalty.
* ``twolink`` (K=8, L=2): planar two-link reacher under gravity; reward is
  negative tip-target distance minus a control penalty.

All dynamics are semi-implicit Euler with per-env substeps; ``step`` is a
pure function of (state, action, spec) so recorded trajectories replay
bitwise. States carry a leading batch dimension so many episodes can run in
lockstep.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    """Identity, dimensions and physics constants of one environment."""

    env_id: int
    name: str
    obs_dim: int
    act_dim: int
    physics: dict = field(default_factory=dict)
    dt: float = 0.05
    horizon: int = 200

    @property
    def block_len(self) -> int:
        """Tokens per timestep at component level: K observation + L action."""
        return self.obs_dim + self.act_dim

    def to_dict(self) -> dict:
        return {
            "env_id": self.env_id,
            "name": self.name,
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "physics": dict(self.physics),
            "dt": self.dt,
            "horizon": self.horizon,
        }

    @staticmethod
    def from_dict(d: dict) -> "EnvSpec":
        return EnvSpec(
            env_id=int(d["env_id"]),
            name=str(d["name"]),
            obs_dim=int(d["obs_dim"]),
            act_dim=int(d["act_dim"]),
            physics={k: float(v) for k, v in d["physics"].items()},
            dt=float(d["dt"]),
            horizon=int(d["horizon"]),
        )


@dataclass
class EnvState:
    """Batched environment state; ``observation`` is derived from ``internal``."""

    internal: np.ndarray  # (B, D) physics state
    steps: np.ndarray  # (B,) int step counter
    observation: np.ndarray  # (B, K)
    error: np.ndarray  # (B,) bool, set when dynamics produced NaN

    @property
    def batch(self) -> int:
        return self.internal.shape[0]


# --------------------------------------------------------------- dynamics

_POINTMASS = dict(gravity=9.81, thrust=8.0, drag=0.4, substeps=8)
_PENDULUM = dict(gravity=9.81, length=1.0, mass=1.0, torque=2.5, damping=0.08, substeps=64)
_CARTPOLE = dict(gravity=9.81, cart_mass=1.0, pole_mass=0.1, pole_len=0.5, force=10.0, damping=0.05, substeps=16)
_TWOLINK = dict(gravity=9.81, l1=0.6, l2=0.6, inertia=0.35, torque=6.0, damping=0.25, grav_gain=0.35, substeps=16)


def builtin_roster() -> list[EnvSpec]:
    """The four desk environments with unique ids 0..3."""
    return [
        EnvSpec(0, "pointmass2d", 4, 2, dict(_POINTMASS)),
        EnvSpec(1, "pendulum", 3, 1, dict(_PENDULUM)),
        EnvSpec(2, "cartpole-c", 5, 1, dict(_CARTPOLE)),
        EnvSpec(3, "twolink", 8, 2, dict(_TWOLINK)),
    ]


def spec_by_name(name: str) -> EnvSpec:
    for spec in builtin_roster():
        if spec.name == name:
            return spec
    raise KeyError(f"unknown environment '{name}'")


def _obs_pointmass(p, internal):
    return internal.copy()


def _obs_pendulum(p, internal):
    th, om = internal[:, 0], internal[:, 1]
    return np.stack([np.cos(th), np.sin(th), om], axis=1)


def _obs_cartpole(p, internal):
    x, xd, th, thd = internal.T
    return np.stack([x, xd, np.cos(th), np.sin(th), thd], axis=1)


def _obs_twolink(p, internal):
    q1, q2, dq1, dq2, tx, ty = internal.T
    l1, l2 = p["l1"], p["l2"]
    tipx = l1 * np.cos(q1) + l2 * np.cos(q1 + q2)
    tipy = l1 * np.sin(q1) + l2 * np.sin(q1 + q2)
    return np.stack(
        [np.cos(q1), np.sin(q1), np.cos(q2), np.sin(q2), dq1, dq2, tx - tipx, ty - tipy], axis=1
    )


def _step_pointmass(p, dt, internal, action, g_mult):
    x, y, vx, vy = (internal[:, i].copy() for i in range(4))
    n = int(p["substeps"])
    h = dt / n
    g = p["gravity"] * g_mult
    for _ in range(n):
        vx = vx + h * (p["thrust"] * action[:, 0] - p["drag"] * vx)
        vy = vy + h * (p["thrust"] * action[:, 1] - g - p["drag"] * vy)
        x = x + h * vx
        y = y + h * vy
        landed = y <= 0.0
        y = np.where(landed, 0.0, y)
        vy = np.where(landed & (vy < 0.0), 0.0, vy)
    new = np.stack([x, y, vx, vy], axis=1)
    reward = (x - internal[:, 0]) / dt - 0.05 * (action * action).sum(axis=1)
    return new, reward


def _step_pendulum(p, dt, internal, action, g_mult):
    th, om = internal[:, 0].copy(), internal[:, 1].copy()
    n = int(p["substeps"])
    h = dt / n
    g = p["gravity"] * g_mult
    ml2 = p["mass"] * p["length"] ** 2
    for _ in range(n):
        acc = (
            -(g / p["length"]) * np.sin(th)
            + p["torque"] * action[:, 0] / ml2
            - p["damping"] * om
        )
        om = om + h * acc
        th = th + h * om
    new = np.stack([th, om], axis=1)
    reward = -np.cos(th) - 0.05 * (action[:, 0] ** 2)
    return new, reward


def _step_cartpole(p, dt, internal, action, g_mult):
    x, xd, th, thd = (internal[:, i].copy() for i in range(4))
    n = int(p["substeps"])
    h = dt / n
    g = p["gravity"] * g_mult
    mc, mp, lp = p["cart_mass"], p["pole_mass"], p["pole_len"]
    total = mc + mp
    for _ in range(n):
        force = p["force"] * action[:, 0]
        sin, cos = np.sin(th), np.cos(th)
        tmp = (force + mp * lp * thd * thd * sin) / total
        th_acc = (g * sin - cos * tmp) / (lp * (4.0 / 3.0 - mp * cos * cos / total))
        x_acc = tmp - mp * lp * th_acc * cos / total
        xd = xd + h * (x_acc - p["damping"] * xd)
        thd = thd + h * (th_acc - p["damping"] * thd)
        x = x + h * xd
        th = th + h * thd
    new = np.stack([x, xd, th, thd], axis=1)
    reward = (x - internal[:, 0]) / dt + np.cos(th) - 0.05 * (action[:, 0] ** 2)
    return new, reward


def _step_twolink(p, dt, internal, action, g_mult):
    q1, q2, dq1, dq2 = (internal[:, i].copy() for i in range(4))
    tx, ty = internal[:, 4], internal[:, 5]
    n = int(p["substeps"])
    h = dt / n
    g = p["gravity"] * g_mult
    inv_i = 1.0 / p["inertia"]
    for _ in range(n):
        grav1 = g * p["grav_gain"] * np.cos(q1)
        grav2 = g * p["grav_gain"] * 0.5 * np.cos(q1 + q2)
        dq1 = dq1 + h * inv_i * (p["torque"] * action[:, 0] - grav1 - p["damping"] * dq1 / inv_i)
        dq2 = dq2 + h * inv_i * (p["torque"] * action[:, 1] - grav2 - p["damping"] * dq2 / inv_i)
        q1 = q1 + h * dq1
        q2 = q2 + h * dq2
    l1, l2 = p["l1"], p["l2"]
    tipx = l1 * np.cos(q1) + l2 * np.cos(q1 + q2)
    tipy = l1 * np.sin(q1) + l2 * np.sin(q1 + q2)
    dist = np.sqrt((tx - tipx) ** 2 + (ty - tipy) ** 2)
    new = np.stack([q1, q2, dq1, dq2, tx, ty], axis=1)
    reward = -dist - 0.05 * (action * action).sum(axis=1)
    return new, reward


_DYNAMICS = {
    "pointmass2d": (_step_pointmass, _obs_pointmass, 4),
    "pendulum": (_step_pendulum, _obs_pendulum, 2),
    "cartpole-c": (_step_cartpole, _obs_cartpole, 4),
    "twolink": (_step_twolink, _obs_twolink, 6),
}


def _nominal_internal(spec: EnvSpec, rng: np.random.Generator, batch: int) -> np.ndarray:
    scale = 0.05
    if spec.name == "pointmass2d":
        base = np.zeros((batch, 4))
        base += scale * rng.standard_normal((batch, 4))
        base[:, 1] = np.abs(base[:, 1])  # start on or above ground
    elif spec.name == "pendulum":
        base = np.zeros((batch, 2))
        base += scale * rng.standard_normal((batch, 2))
    elif spec.name == "cartpole-c":
        base = np.zeros((batch, 4))
        base += scale * rng.standard_normal((batch, 4))
    elif spec.name == "twolink":
        base = np.zeros((batch, 6))
        base[:, 0] = np.pi / 2  # arm pointing up
        base[:, :4] += scale * rng.standard_normal((batch, 4))
        # reachable target on the upper half annulus
        ang = rng.uniform(0.2, np.pi - 0.2, size=batch)
        rad = rng.uniform(0.5, 1.0, size=batch)
        base[:, 4] = rad * np.cos(ang)
        base[:, 5] = rad * np.sin(ang)
    else:
        raise KeyError(f"unknown environment '{spec.name}'")
    return base


class Env:
    """Binds an EnvSpec to reset/step; wrappers subclass this."""

    def __init__(self, spec: EnvSpec):
        self.spec = spec

    def reset(self, seed, batch: int = 1) -> EnvState:
        """Deterministic batched initial state: nominal pose plus seeded noise.

        ``seed`` may be an int or a sequence of ints (episode-derived keys).
        """
        key = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]
        rng = np.random.default_rng(key + [self.spec.env_id])
        internal = self._reset_internal(rng, batch)
        return EnvState(
            internal=internal,
            steps=np.zeros(batch, dtype=np.int64),
            observation=self._observe(internal),
            error=np.zeros(batch, dtype=bool),
        )

    def _reset_internal(self, rng, batch):
        return _nominal_internal(self.spec, rng, batch)

    def _observe(self, internal: np.ndarray) -> np.ndarray:
        return _DYNAMICS[self.spec.name][1](self.spec.physics, internal)

    def _gravity_multiplier(self) -> float:
        return 1.0

    def step(self, state: EnvState, action: np.ndarray):
        """Advance one control step; returns (new_state, reward, done).

        Pure in (state, action): no RNG, so replays are bitwise. Actions
        outside [-1, 1] are clipped with a warning. NaN dynamics mark the
        episode as errored and done.
        """
        action = np.asarray(action, dtype=np.float64)
        if action.ndim == 1:
            action = action[None, :]
        if action.shape != (state.batch, self.spec.act_dim):
            raise ValueError(
                f"action shape {action.shape} != ({state.batch}, {self.spec.act_dim})"
            )
        if np.abs(action).max(initial=0.0) > 1.0:
            warnings.warn("action outside [-1, 1]; clipping", stacklevel=2)
            action = np.clip(action, -1.0, 1.0)

        step_fn = _DYNAMICS[self.spec.name][0]
        new_internal, reward = step_fn(
            self.spec.physics, self.spec.dt, state.internal, action, self._gravity_multiplier()
        )
        bad = ~np.isfinite(new_internal).all(axis=1)
        if bad.any():
            new_internal = np.where(bad[:, None], state.internal, new_internal)
            reward = np.where(bad, 0.0, reward)
        steps = state.steps + 1
        new_state = EnvState(
            internal=new_internal,
            steps=steps,
            observation=self._observe(new_internal),
            error=state.error | bad,
        )
        done = (steps >= self.spec.horizon) | new_state.error
        return new_state, reward, done


class GravityWrapper(Env):
    """Scales only the gravity term of the inner dynamics."""

    def __init__(self, inner: Env, multiplier: float):
        if multiplier <= 0:
            raise ValueError("gravity multiplier must be positive")
        super().__init__(inner.spec)
        self.inner = inner
        self.multiplier = float(multiplier)

    def _reset_internal(self, rng, batch):
        return self.inner._reset_internal(rng, batch)

    def _observe(self, internal):
        return self.inner._observe(internal)

    def _gravity_multiplier(self) -> float:
        return self.inner._gravity_multiplier() * self.multiplier


class SensorFailureWrapper(Env):
    """Zeroes one observation coordinate, leaving everything else untouched."""

    def __init__(self, inner: Env, failed_index: int):
        if not 0 <= failed_index < inner.spec.obs_dim:
            raise ValueError(f"failed_index {failed_index} outside [0, {inner.spec.obs_dim})")
        super().__init__(inner.spec)
        self.inner = inner
        self.failed_index = int(failed_index)

    def _reset_internal(self, rng, batch):
        return self.inner._reset_internal(rng, batch)

    def _gravity_multiplier(self) -> float:
        return self.inner._gravity_multiplier()

    def _observe(self, internal):
        obs = self.inner._observe(internal)
        obs[:, self.failed_index] = 0.0
        return obs


def make_env(spec: EnvSpec) -> Env:
    return Env(spec)


def with_horizon(spec: EnvSpec, horizon: int) -> EnvSpec:
    return replace(spec, horizon=int(horizon))


def pendulum_energy(spec: EnvSpec, internal: np.ndarray) -> np.ndarray:
    """Total mechanical energy of the pendulum (oracle for conservation tests)."""
    p = spec.physics
    th, om = internal[:, 0], internal[:, 1]
    kinetic = 0.5 * p["mass"] * p["length"] ** 2 * om**2
    potential = -p["mass"] * p["gravity"] * p["length"] * np.cos(th)
    return kinetic + potential
