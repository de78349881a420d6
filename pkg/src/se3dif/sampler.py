"""Annealed Langevin sampling on SE(3).

Particles move by left-multiplied exponential updates, so they never leave
the group. Every particle owns its own random stream (spawned from the
config seed) and particles are processed in fixed-size blocks, which makes
serial and threaded runs produce identical bits.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from se3dif import liegroup as lg
from se3dif.energymodel import EnergyModel, GraspField
from se3dif.errors import ConfigError

BLOCK = 32


@dataclass
class SamplerConfig:
    n_particles: int = 200
    step_rate: float = 0.3
    inner_steps: int = 30
    polish: bool = True
    polish_steps: int = 20
    init_mean: np.ndarray | None = None  # defaults to the identity (object frame origin)
    init_sigma: float | None = None  # defaults to the largest noise scale
    seed: int = 0
    record: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.n_particles < 1:
            raise ConfigError("n_particles must be >= 1")
        if self.step_rate < 0:
            raise ConfigError("step_rate must be >= 0")
        if self.inner_steps < 1 or self.polish_steps < 0:
            raise ConfigError("inner_steps must be >= 1 and polish_steps >= 0")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown sampler options: {sorted(unknown)}")
        d = dict(d)
        if d.get("init_mean") is not None:
            d["init_mean"] = np.asarray(d["init_mean"], dtype=float)
        return cls(**d)


@dataclass
class SampleTrace:
    poses: np.ndarray
    energies: np.ndarray
    levels: list = field(default_factory=list)  # (k, poses) snapshots when recording


def _as_field(model):
    return GraspField(model) if isinstance(model, EnergyModel) else model


def step_size(noise_scales, k: int, step_rate: float) -> float:
    return step_rate * noise_scales[k - 1] / noise_scales[-1]


def particle_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _draw(rngs, shape=(6,)) -> np.ndarray:
    return np.stack([r.standard_normal(shape) for r in rngs])


def langevin_step(model, poses, k: int, step_rate: float, rng=None, noise: bool = True) -> np.ndarray:
    """One update ``Exp(-(a^2 / 2) DE/DH + a xi) H`` with ``a = step_rate sigma_k / sigma_L``.

    ``rng`` is a Generator, a seed, or a list with one Generator per pose.
    """
    fld = _as_field(model)
    poses = np.asarray(poses, dtype=float)
    single = poses.ndim == 2
    if single:
        poses = poses[None]
    alpha = step_size(fld.noise_scales, k, step_rate)
    _, grad = fld.energy_grad(poses, k)
    twist = -0.5 * alpha**2 * grad
    if noise and alpha > 0:
        if isinstance(rng, (list, tuple)):
            xi = _draw(rng)
        else:
            xi = np.random.default_rng(rng).standard_normal(grad.shape)
        twist = twist + alpha * xi
    out = lg.compose(lg.expmap(twist), poses)
    return out[0] if single else out


def _run_block(fld, poses, rngs, cfg: SamplerConfig):
    levels = len(fld.noise_scales)
    trace = []
    for k in range(levels, 0, -1):
        for _ in range(cfg.inner_steps):
            poses = langevin_step(fld, poses, k, cfg.step_rate, rngs)
        if cfg.record:
            trace.append((k, poses.copy()))
    if cfg.polish:
        for _ in range(cfg.polish_steps):
            poses = langevin_step(fld, poses, 1, cfg.step_rate, noise=False)
        if cfg.record:
            trace.append((0, poses.copy()))
    energy, _ = fld.energy_grad(poses, 1)
    return poses, energy, trace


def initial_particles(fld, cfg: SamplerConfig, rngs) -> np.ndarray:
    mean = lg.identity() if cfg.init_mean is None else np.asarray(cfg.init_mean, dtype=float)
    sigma = fld.noise_scales[-1] if cfg.init_sigma is None else cfg.init_sigma
    return lg.compose(mean, lg.expmap(sigma * _draw(rngs)))


def sample(model, config: SamplerConfig | None = None) -> SampleTrace:
    """Anneal ``n_particles`` poses from level L down to 1 and sort them by final energy."""
    cfg = config or SamplerConfig()
    fld = _as_field(model)
    rngs = particle_rngs(cfg.seed, cfg.n_particles)
    poses = initial_particles(fld, cfg, rngs)
    blocks = [slice(i, min(i + BLOCK, cfg.n_particles)) for i in range(0, cfg.n_particles, BLOCK)]

    def work(sl):
        return _run_block(fld, poses[sl], rngs[sl], cfg)

    if cfg.threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(work, blocks))
    else:
        results = [work(sl) for sl in blocks]
    final = np.concatenate([r[0] for r in results])
    energy = np.concatenate([r[1] for r in results])
    order = np.argsort(energy, kind="stable")
    levels = []
    if cfg.record:
        for j in range(len(results[0][2])):
            k = results[0][2][j][0]
            levels.append((k, np.concatenate([r[2][j][1] for r in results])))
    return SampleTrace(final[order], energy[order], levels)
