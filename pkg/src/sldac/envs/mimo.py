"""Delay-constrained downlink power control for a multi-user MIMO cell.

The base station picks per-user powers and an RZF regularization factor each
slot.  The objective is total transmit power; user k's constraint keeps its
average queueing delay (in slots, via Little's law) below ``delay_bounds[k]``.
Channels follow a geometric ULA model and are redrawn i.i.d. every slot.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..nn import FeatureMap
from .base import CmdpEnv


@dataclass
class MuMimoConfig:
    n_antennas: int = 8
    n_users: int = 4
    bandwidth: float = 10e6             # Hz
    slot: float = 1e-3                  # s
    noise_density_dbm: float = -100.0   # dBm/Hz
    arrival_low: float = 0.0            # bit/s
    arrival_high: float = 20e6          # bit/s
    n_paths: int = 4
    angular_spread_deg: float = 5.0
    gain_low_db: float = -10.0
    gain_high_db: float = 10.0
    delay_bounds: list = field(default_factory=lambda: [4.0] * 4)   # slots
    power_low: float = 0.0              # W
    power_high: float = 1.0             # W
    alpha_low: float = 1e-3
    alpha_high: float = 1e2
    path_gains_db: list | None = None
    mean_aods_deg: list | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_antennas < self.n_users:
            raise ValueError("need at least as many antennas as users")
        positive = ("bandwidth", "slot", "arrival_high", "n_paths", "n_users")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.angular_spread_deg < 0 or self.arrival_low < 0:
            raise ValueError("angular spread and arrival floor must be nonnegative")
        if len(self.delay_bounds) != self.n_users:
            raise ValueError("one delay bound per user is required")
        if not (0 <= self.power_low < self.power_high and 0 <= self.alpha_low < self.alpha_high):
            raise ValueError("invalid action boxes")
        # large-scale geometry is fixed per configuration
        rng = np.random.default_rng(self.seed)
        if self.path_gains_db is None:
            self.path_gains_db = rng.uniform(self.gain_low_db, self.gain_high_db, self.n_users).tolist()
        if self.mean_aods_deg is None:
            self.mean_aods_deg = rng.uniform(-60.0, 60.0, self.n_users).tolist()

    @property
    def noise_power(self) -> float:
        """Per-user noise power in W over the whole band."""
        return 10.0 ** ((self.noise_density_dbm - 30.0) / 10.0) * self.bandwidth

    @property
    def mean_arrival(self) -> np.ndarray:
        return np.full(self.n_users, 0.5 * (self.arrival_low + self.arrival_high))

    @property
    def path_gains(self) -> np.ndarray:
        return 10.0 ** (np.asarray(self.path_gains_db) / 10.0)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "MuMimoConfig":
        return cls(**d)


def steering_vector(n_antennas: int, aod) -> np.ndarray:
    """Half-wavelength ULA response; ``aod`` in radians, scalar or array (returns one column per angle)."""
    n = np.arange(n_antennas)[:, None]
    return np.exp(1j * np.pi * n * np.sin(np.atleast_1d(aod))[None, :])


def sample_channel(cfg: MuMimoConfig, rng: np.random.Generator) -> np.ndarray:
    """K x N_t matrix whose k-th row is h_k^H."""
    K, Np = cfg.n_users, cfg.n_paths
    spread = np.deg2rad(cfg.angular_spread_deg) / np.sqrt(2.0)   # Laplace scale for the given std
    mean = np.deg2rad(np.asarray(cfg.mean_aods_deg))
    offsets = rng.laplace(0.0, spread, size=(K, Np)) if spread > 0 else np.zeros((K, Np))
    aods = mean[:, None] + offsets
    powers = rng.exponential(1.0, size=(K, Np))
    powers *= cfg.path_gains[:, None] / powers.sum(axis=1, keepdims=True)
    gains = np.sqrt(powers / 2.0) * (rng.standard_normal((K, Np)) + 1j * rng.standard_normal((K, Np)))
    H = np.empty((K, cfg.n_antennas), dtype=np.complex128)
    for k in range(K):
        h = steering_vector(cfg.n_antennas, aods[k]) @ gains[k]
        H[k] = h.conj()
    return H


def rzf_precode(H, alpha_z: float) -> np.ndarray:
    """Columns v_k of H^H (H H^H + alpha I)^{-1}, each scaled to unit norm (N_t x K)."""
    H = np.asarray(H, dtype=np.complex128)
    K = H.shape[0]
    if H.shape[1] < K:
        raise ValueError("RZF needs N_t >= K")
    if alpha_z < 0:
        raise ValueError("alpha_z must be nonnegative")
    gram = H @ H.conj().T + alpha_z * np.eye(K)
    if np.linalg.cond(gram) > 1e14:
        raise np.linalg.LinAlgError("regularized Gram matrix is singular")
    V = H.conj().T @ np.linalg.inv(gram)
    return V / np.linalg.norm(V, axis=0, keepdims=True)


def user_rates(H, V, powers, bandwidth: float, noise_power) -> np.ndarray:
    """Shannon rates with inter-user interference through the other users' beams."""
    gains = np.abs(np.asarray(H) @ np.asarray(V)) ** 2        # gains[k, j] = |h_k^H v_j|^2
    p = np.asarray(powers, dtype=np.float64)
    signal = p * np.diag(gains)
    interference = gains @ p - signal
    sinr = signal / (interference + noise_power)
    return bandwidth * np.log2(1.0 + sinr)


def queue_update(q, arrivals_bits, served_bits) -> np.ndarray:
    return np.maximum(np.asarray(arrivals_bits) - np.asarray(served_bits) + np.asarray(q), 0.0)


def mimo_step(cfg: MuMimoConfig, state, action, rng: np.random.Generator):
    """state = (Q, H), action = (P, alpha_z) inside their boxes; returns ((Q', H'), costs)."""
    Q, H = state
    P, alpha_z = action
    P = np.asarray(P, dtype=np.float64)
    if np.any(P < cfg.power_low - 1e-12) or np.any(P > cfg.power_high + 1e-12):
        raise AssertionError("power outside its box")
    if not cfg.alpha_low - 1e-12 <= alpha_z <= cfg.alpha_high + 1e-12:
        raise AssertionError("alpha_z outside its box")
    V = rzf_precode(H, alpha_z)
    R = user_rates(H, V, P, cfg.bandwidth, cfg.noise_power)
    A = rng.uniform(cfg.arrival_low, cfg.arrival_high, cfg.n_users)
    Q_next = queue_update(Q, A * cfg.slot, R * cfg.slot)
    H_next = sample_channel(cfg, rng)
    delay_slots = Q_next / (cfg.mean_arrival * cfg.slot)
    costs = np.concatenate([[P.sum()], delay_slots - np.asarray(cfg.delay_bounds)])
    return (Q_next, H_next), costs


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class MuMimoEnv(CmdpEnv):
    """Flat-vector wrapper: state = [Q, Re H, Im H]; raw actions are squashed into the boxes."""

    def __init__(self, cfg: MuMimoConfig):
        self.cfg = cfg
        K, N = cfg.n_users, cfg.n_antennas
        self.state_dim = K + 2 * K * N
        self.action_dim = K + 1
        self.constraint_offsets = np.asarray(cfg.delay_bounds, dtype=np.float64)
        queue_scale = 10.0 * cfg.mean_arrival * cfg.slot
        h_scale = np.repeat(np.sqrt(cfg.path_gains), N)
        # scaled so typical states land well inside the unit ball
        bound = np.concatenate([queue_scale, h_scale, h_scale]) * np.sqrt(self.state_dim)
        self._phi_s = FeatureMap(bound)
        self._phi_sa = FeatureMap(np.concatenate([bound, np.full(self.action_dim, np.sqrt(self.action_dim) * 2.0)]))

    def squash(self, raw):
        raw = np.asarray(raw, dtype=np.float64)
        c = self.cfg
        u = _sigmoid(raw)
        P = c.power_low + (c.power_high - c.power_low) * u[..., :-1]
        alpha = c.alpha_low + (c.alpha_high - c.alpha_low) * u[..., -1]
        return P, alpha

    def pack(self, Q, H) -> np.ndarray:
        return np.concatenate([Q, H.real.ravel(), H.imag.ravel()])

    def unpack(self, state):
        K, N = self.cfg.n_users, self.cfg.n_antennas
        Q = state[:K]
        H = state[K:K + K * N].reshape(K, N) + 1j * state[K + K * N:].reshape(K, N)
        return Q, H

    def reset(self, rng):
        return self.pack(np.zeros(self.cfg.n_users), sample_channel(self.cfg, rng))

    def step(self, state, action, rng):
        P, alpha = self.squash(action)
        (Q, H), costs = mimo_step(self.cfg, self.unpack(np.asarray(state)), (P, float(alpha)), rng)
        return self.pack(Q, H), costs

    def state_features(self, states):
        return self._phi_s(states)

    def critic_features(self, states, actions):
        u = 2.0 * _sigmoid(np.asarray(actions, dtype=np.float64)) - 1.0
        return self._phi_sa(np.concatenate([states, u], axis=-1))
