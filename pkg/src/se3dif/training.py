"""Joint SDF and denoising score matching training."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from se3dif import liegroup as lg
from se3dif.datagen import GraspDataset, SdfDataset
from se3dif.energymodel import EnergyModel
from se3dif.errors import AngleNearPi, ConfigError, NonFiniteLoss

MAX_RESAMPLE = 10


@dataclass
class TrainConfig:
    steps: int = 5000
    object_batch: int = 1
    grasp_batch: int = 64
    sdf_batch: int = 128
    levels: int = 10
    sigma_min: float = 0.01
    sigma_max: float = 0.5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    optimizer: str = "adam"
    lr_schedule: str = "cosine"
    lr_final: float = 1e-5
    dsm_weight: float = 1.0
    sdf_weight: float = 10.0
    sigma_weighting: bool = True
    per_sample_levels: bool = True
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        for name in ("object_batch", "grasp_batch", "sdf_batch", "levels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("need 0 < sigma_min < sigma_max")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    dsm: list = field(default_factory=list)
    sdf: list = field(default_factory=list)
    total: list = field(default_factory=list)
    wall_clock: float = 0.0
    checksum: str = ""

    def write_metrics(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step\tdsm\tsdf\ttotal\n")
            for i, (a, b, c) in enumerate(zip(self.dsm, self.sdf, self.total)):
                fh.write(f"{i}\t{a!r}\t{b!r}\t{c!r}\n")


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def perturb(grasps: np.ndarray, sigma, rng: np.random.Generator):
    """Noisy poses ``H Exp(eps)`` and the Gaussian target score at them.

    Perturbations whose relative rotation lands within the log-map's unsafe
    zone near pi are redrawn, at most ``MAX_RESAMPLE`` times.
    """
    b = grasps.shape[0]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (b,))
    eps = sigma[:, None] * rng.standard_normal((b, 6))
    for _ in range(MAX_RESAMPLE + 1):
        noisy = lg.compose(grasps, lg.expmap(eps))
        try:
            score = lg.lie_gaussian_score(lg.LieGaussian(grasps, sigma), noisy)
        except AngleNearPi as err:
            bad = np.unique(np.asarray(err.indices).reshape(-1)) if err.indices is not None else np.arange(b)
            eps[bad] = sigma[bad, None] * rng.standard_normal((len(bad), 6))
            continue
        return noisy, score
    raise AngleNearPi(f"perturbation still near pi after {MAX_RESAMPLE} redraws")


def dsm_loss(model: EnergyModel, grasps, object_pose, code_index, k, rng, sigma_weighting: bool = True,
             noisy=None, target=None):
    """Score matching loss ``mean_b w_b |DE/DH(noisy_b) + score_b|^2`` and its parameter gradients.

    ``k`` may be one level or one per grasp. ``w_b = sigma_k^2`` when
    ``sigma_weighting`` is on, else 1. Passing ``noisy``/``target`` skips the
    perturbation (used by tests with a frozen draw).
    """
    grasps = np.asarray(grasps, dtype=float).reshape(-1, 4, 4)
    b = grasps.shape[0]
    sigma = np.broadcast_to(model.sigma(k), (b,))
    if noisy is None:
        noisy, target = perturb(grasps, sigma, np.random.default_rng(rng))
    _, pose_grad, state = model.energy_and_pose_grad(noisy, object_pose, code_index, k, return_state=True)
    w = sigma**2 if sigma_weighting else np.ones(b)
    resid = pose_grad + target
    loss = float(np.mean(w * np.sum(resid**2, axis=1)))
    # d/dtheta |g + s|^2 = 2 <dg/dtheta, g + s>: one directional second-order pass
    direction = 2.0 * w[:, None] * resid / b
    grads, _, _ = model.directional_param_grads(noisy, object_pose, code_index, k, direction, state=state)
    return loss, grads


def sdf_loss(model: EnergyModel, points, targets, object_pose=None, code_index=0, k=1):
    """Mean squared SDF error at object-frame points.

    When ``object_pose`` is given, ``points`` are world points and are moved
    into the object frame first.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    if object_pose is not None:
        x = lg.transform_point(lg.inverse(np.asarray(object_pose, dtype=float)), x)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    pred = model.sdf(x, code_index, k)
    err = pred - targets
    m = len(targets)
    _, grads = model.sdf_param_grads(x, code_index, k, 2.0 * err / m)
    return float(np.mean(err**2)), grads


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: dict, lr=1e-3):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            params[name] -= self.lr * g


def _make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr)
    return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "constant" or cfg.steps <= 1:
        return cfg.lr
    frac = step / (cfg.steps - 1)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + np.cos(np.pi * frac))


def _accumulate(total: dict, grads: dict, scale: float) -> None:
    for name, g in grads.items():
        total[name] += scale * g


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------


@dataclass
class ObjectData:
    """Training data of one object: successful grasps (object frame) and SDF samples."""

    grasps: GraspDataset
    sdf: SdfDataset
    code_index: int = 0


def as_object_data(datasets) -> list[ObjectData]:
    if isinstance(datasets, ObjectData):
        return [datasets]
    if isinstance(datasets, tuple) and len(datasets) == 2 and isinstance(datasets[0], GraspDataset):
        return [ObjectData(*datasets)]
    return [d if isinstance(d, ObjectData) else ObjectData(*d, code_index=i) for i, d in enumerate(datasets)]


def train(model: EnergyModel, datasets, config: TrainConfig | None = None, callback=None):
    """Run ``config.steps`` Adam (or SGD) updates on a copy of ``model``.

    Each step draws a noise level ``k`` uniformly (per grasp when
    ``per_sample_levels`` is set), a minibatch of objects, grasps and SDF
    points, and descends the weighted sum of both losses.
    """
    cfg = config or TrainConfig()
    objects = as_object_data(datasets)
    model = model.copy()
    report = TrainReport()
    t0 = time.perf_counter()
    if cfg.steps == 0:
        report.checksum = model.checksum()
        return model, report
    if len(model.noise_scales) != cfg.levels:
        raise ConfigError("model noise levels do not match the training config")
    rng = np.random.default_rng(cfg.seed)
    opt = _make_optimizer(cfg, model.params)
    identity = lg.identity()
    for step in range(cfg.steps):
        grads = {name: np.zeros_like(v) for name, v in model.params.items()}
        picked = rng.choice(len(objects), size=min(cfg.object_batch, len(objects)), replace=False)
        if cfg.per_sample_levels:
            k = rng.integers(1, cfg.levels + 1, size=cfg.grasp_batch)
        else:
            k = int(rng.integers(1, cfg.levels + 1))
        l_dsm = l_sdf = 0.0
        for oi in picked:
            obj = objects[oi]
            scale = 1.0 / len(picked)
            if len(obj.grasps):
                idx = rng.integers(0, len(obj.grasps), size=cfg.grasp_batch)
                loss, g = dsm_loss(model, obj.grasps.poses[idx], identity, obj.code_index, k, rng,
                                   cfg.sigma_weighting)
                l_dsm += scale * loss
                _accumulate(grads, g, scale * cfg.dsm_weight)
            if len(obj.sdf):
                idx = rng.integers(0, len(obj.sdf), size=cfg.sdf_batch)
                loss, g = sdf_loss(model, obj.sdf.points[idx], obj.sdf.values[idx], None, obj.code_index,
                                   k if np.ndim(k) == 0 else 1)
                l_sdf += scale * loss
                _accumulate(grads, g, scale * cfg.sdf_weight)
        total = cfg.dsm_weight * l_dsm + cfg.sdf_weight * l_sdf
        if not np.isfinite(total):
            raise NonFiniteLoss(step, total)
        report.dsm.append(l_dsm)
        report.sdf.append(l_sdf)
        report.total.append(total)
        opt.lr = learning_rate(cfg, step)
        opt.step(model.params, grads)
        if callback is not None:
            callback(step, model, report)
    report.wall_clock = time.perf_counter() - t0
    report.checksum = model.checksum()
    return model, report


def held_out_loss(model: EnergyModel, datasets, n_grasps: int = 512, seed: int = 123) -> float:
    """Total loss on one fixed draw of grasps, levels and perturbations, plus every SDF sample.

    Unlike the per-step minibatch losses in a report, the draw depends only
    on ``seed``, so models from different steps are compared on equal terms.
    """
    total = 0.0
    for obj in as_object_data(datasets):
        rng = np.random.default_rng([seed, obj.code_index])
        if len(obj.grasps):
            idx = rng.integers(0, len(obj.grasps), size=n_grasps)
            k = rng.integers(1, model.n_levels + 1, size=n_grasps)
            grasps = obj.grasps.poses[idx]
            noisy, target = perturb(grasps, model.sigma(k), rng)
            total += dsm_loss(model, grasps, lg.identity(), obj.code_index, k, None, noisy=noisy, target=target)[0]
        if len(obj.sdf):
            total += sdf_loss(model, obj.sdf.points, obj.sdf.values, None, obj.code_index)[0]
    return total
