"""Noise-conditioned energy field over grasp poses.

A grasp pose is turned into a fixed set of gripper points, the points are
moved into the object frame, a per-point feature encoder (conditioned on the
object's shape code and on the noise level) predicts an SDF value plus extra
features, and a decoder maps the flattened features to a scalar energy.

Both networks are small softplus MLPs written directly in numpy. Besides the
usual reverse pass they support a forward tangent pass, which is what the
denoising loss needs: its parameter gradient is the gradient of a directional
derivative of the energy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from se3dif import liegroup as lg

# --------------------------------------------------------------------------
# gripper
# --------------------------------------------------------------------------

GRIPPER_WIDTH = 0.08
GRIPPER_DEPTH = 0.11


@dataclass(frozen=True)
class GripperPointSet:
    """Canonical points rigidly attached to the gripper frame (z = approach)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 4:
            raise ValueError("gripper needs at least 4 points of shape (N, 3)")
        if np.linalg.matrix_rank(pts - pts.mean(axis=0), tol=1e-9) < 3:
            raise ValueError("gripper points are coplanar; the pose would not be identifiable")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def parallel_jaw_gripper(width: float = GRIPPER_WIDTH, depth: float = GRIPPER_DEPTH) -> GripperPointSet:
    """Wrist, palm center, two finger bases and two fingertips.

    The palm center is the frame origin. Fingertips sit ``0.06`` m ahead of the
    palm, the wrist sits behind it so that wrist-to-tip spans ``depth``. The
    wrist is offset sideways by 2 cm to break the finger-plane symmetry.
    """
    half = 0.5 * width
    finger = 0.06
    return GripperPointSet(
        np.array(
            [
                [0.0, 0.02, finger - depth],
                [0.0, 0.0, 0.0],
                [half, 0.0, 0.0],
                [-half, 0.0, 0.0],
                [half, 0.0, finger],
                [-half, 0.0, finger],
            ]
        )
    )


# --------------------------------------------------------------------------
# MLP with tangents
# --------------------------------------------------------------------------


def softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_sigmoid(x):
    """Softplus and its derivative from a single exponential."""
    e = np.exp(-np.abs(x))
    sp = np.maximum(x, 0.0) + np.log1p(e)
    inv = 1.0 / (1.0 + e)
    return sp, np.where(x >= 0.0, inv, e * inv)


@dataclass
class _Cache:
    inputs: list = field(default_factory=list)
    tangents: list = field(default_factory=list)
    dpre: list = field(default_factory=list)
    sig: list = field(default_factory=list)


def mlp_forward(layers, x, dx=None):
    """Run a softplus MLP (final layer linear). ``dx`` is an optional input tangent."""
    cache = _Cache()
    h, dh = x, dx
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        cache.inputs.append(h)
        cache.tangents.append(dh)
        p = h @ w + b
        dp = None if dh is None else dh @ w
        if i < last:
            h, s = _softplus_sigmoid(p)
            cache.dpre.append(dp)
            cache.sig.append(s)
            dh = None if dp is None else s * dp
        else:
            h, dh = p, dp
    return h, dh, cache


def mlp_tangent(layers, cache, dx):
    """Push an input tangent through an already evaluated MLP, filling ``cache``."""
    dh = dx
    last = len(layers) - 1
    for i, (w, _) in enumerate(layers):
        cache.tangents[i] = dh
        dp = dh @ w
        if i < last:
            cache.dpre[i] = dp
            dh = cache.sig[i] * dp
        else:
            dh = dp
    return dh


def mlp_backward(layers, cache, g_out, dg_out=None, want_params=True):
    """Reverse pass through :func:`mlp_forward`.

    ``g_out`` and ``dg_out`` are the adjoints of the primal and tangent
    outputs. Returns ``(param_grads, g_in, dg_in)`` with ``param_grads`` a
    list of ``(dW, db)`` (``None`` entries if ``want_params`` is false).
    """
    grads = [None] * len(layers)
    g, dg = g_out, dg_out
    last = len(layers) - 1
    for i in range(last, -1, -1):
        w, _ = layers[i]
        if i < last:
            s = cache.sig[i]
            gp = g * s
            if dg is not None:
                gdp = dg * s
                gp = gp + dg * cache.dpre[i] * s * (1.0 - s)
            else:
                gdp = None
        else:
            gp, gdp = g, dg
        if want_params:
            dw = cache.inputs[i].T @ gp
            if gdp is not None and cache.tangents[i] is not None:
                dw = dw + cache.tangents[i].T @ gdp
            grads[i] = (dw, gp.sum(axis=0))
        g = gp @ w.T
        dg = None if gdp is None else gdp @ w.T
    return grads, g, dg


# --------------------------------------------------------------------------
# energy model
# --------------------------------------------------------------------------


def geometric_noise_scales(sigma_min: float = 0.01, sigma_max: float = 0.5, levels: int = 10) -> np.ndarray:
    """``sigma_k = sigma_max (sigma_min / sigma_max)^((L - k) / (L - 1))``, k = 1..L."""
    if levels == 1:
        return np.array([sigma_max])
    k = np.arange(1, levels + 1)
    return sigma_max * (sigma_min / sigma_max) ** ((levels - k) / (levels - 1))


@dataclass
class EnergyEval:
    energy: np.ndarray
    sdf_per_point: np.ndarray
    pose_grad: np.ndarray | None = None
    param_grads: dict | None = None


class EnergyModel:
    """Parameters and evaluation of the grasp energy field.

    ``params`` is an ordered dict of arrays: ``encoder.{i}.weight``,
    ``encoder.{i}.bias``, ``decoder.{i}.weight``, ``decoder.{i}.bias`` and
    ``codes`` (one shape code per object row). Noise levels are 1-based.
    """

    def __init__(
        self,
        params: dict,
        noise_scales,
        gripper: GripperPointSet | None = None,
        point_scale: float = 0.02,
        sigma_scaled: bool = True,
        sdf_scale: float = 0.1,
    ):
        self.params = params
        self.noise_scales = np.asarray(noise_scales, dtype=float)
        if np.any(self.noise_scales <= 0) or np.any(np.diff(self.noise_scales) <= 0):
            raise ValueError("noise scales must be positive and strictly increasing")
        self.gripper = gripper or parallel_jaw_gripper()
        self.point_scale = float(point_scale)
        self.sigma_scaled = bool(sigma_scaled)
        self.sdf_scale = float(sdf_scale)
        self.n_enc = sum(1 for k in params if k.startswith("encoder.") and k.endswith(".weight"))
        self.n_dec = sum(1 for k in params if k.startswith("decoder.") and k.endswith(".weight"))
        self._check_shapes()

    # -- construction -------------------------------------------------------

    @classmethod
    def create(
        cls,
        n_objects: int = 1,
        code_dim: int = 8,
        feature_dim: int = 7,
        encoder_hidden=(128, 128, 128, 128),
        decoder_hidden=(128, 128, 128),
        noise_scales=None,
        gripper: GripperPointSet | None = None,
        point_scale: float = 0.02,
        sigma_scaled: bool = True,
        seed: int = 0,
    ) -> "EnergyModel":
        rng = np.random.default_rng(seed)
        gripper = gripper or parallel_jaw_gripper()
        if noise_scales is None:
            noise_scales = geometric_noise_scales()
        params = {}
        enc_sizes = [3 + code_dim + 1, *encoder_hidden, 1 + feature_dim]
        dec_sizes = [len(gripper) * (1 + feature_dim), *decoder_hidden, 1]
        for prefix, sizes in (("encoder", enc_sizes), ("decoder", dec_sizes)):
            for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                params[f"{prefix}.{i}.weight"] = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
                params[f"{prefix}.{i}.bias"] = np.zeros(fan_out)
        params["codes"] = 0.01 * rng.standard_normal((n_objects, code_dim))
        return cls(params, noise_scales, gripper, point_scale, sigma_scaled)

    def copy(self) -> "EnergyModel":
        return EnergyModel(
            {k: v.copy() for k, v in self.params.items()},
            self.noise_scales.copy(),
            self.gripper,
            self.point_scale,
            self.sigma_scaled,
            self.sdf_scale,
        )

    def _check_shapes(self):
        p = self.params
        enc_in = p["encoder.0.weight"].shape[0]
        if enc_in != 3 + self.code_dim + 1:
            raise ValueError("encoder input must be point + code + noise embedding")
        enc_out = p[f"encoder.{self.n_enc - 1}.weight"].shape[1]
        if p["decoder.0.weight"].shape[0] != len(self.gripper) * enc_out:
            raise ValueError("decoder input must equal N * (1 + psi)")
        if p[f"decoder.{self.n_dec - 1}.weight"].shape[1] != 1:
            raise ValueError("decoder must output a scalar")
        for prefix, n in (("encoder", self.n_enc), ("decoder", self.n_dec)):
            for i in range(n - 1):
                if p[f"{prefix}.{i}.weight"].shape[1] != p[f"{prefix}.{i + 1}.weight"].shape[0]:
                    raise ValueError(f"{prefix} layer {i} does not chain into layer {i + 1}")

    # -- introspection -------------------------------------------------------

    @property
    def code_dim(self) -> int:
        return self.params["codes"].shape[1]

    @property
    def n_objects(self) -> int:
        return self.params["codes"].shape[0]

    @property
    def n_levels(self) -> int:
        return len(self.noise_scales)

    @property
    def feature_dim(self) -> int:
        return self.params[f"encoder.{self.n_enc - 1}.weight"].shape[1] - 1

    def sigma(self, k) -> np.ndarray:
        k = np.asarray(k)
        if np.any(k < 1) or np.any(k > self.n_levels):
            raise IndexError(f"noise level must be in 1..{self.n_levels}")
        return self.noise_scales[k - 1]

    def hyperparameters(self) -> dict:
        return {
            "n_points": len(self.gripper),
            "feature_dim": self.feature_dim,
            "code_dim": self.code_dim,
            "n_objects": self.n_objects,
            "encoder_hidden": [self.params[f"encoder.{i}.weight"].shape[1] for i in range(self.n_enc - 1)],
            "decoder_hidden": [self.params[f"decoder.{i}.weight"].shape[1] for i in range(self.n_dec - 1)],
            "noise_scales": self.noise_scales.tolist(),
            "point_scale": self.point_scale,
            "sigma_scaled": self.sigma_scaled,
            "sdf_scale": self.sdf_scale,
            "gripper_points": self.gripper.points.tolist(),
        }

    def layers(self, prefix: str) -> list:
        n = self.n_enc if prefix == "encoder" else self.n_dec
        return [(self.params[f"{prefix}.{i}.weight"], self.params[f"{prefix}.{i}.bias"]) for i in range(n)]

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()

    # -- encoding -------------------------------------------------------------

    def world_points(self, grasps: np.ndarray) -> np.ndarray:
        """Gripper points in the world frame, ``(B, N, 3)``."""
        return np.einsum("bij,nj->bni", lg.rotation(grasps), self.gripper.points) + lg.translation(grasps)[:, None, :]

    def encode_pose_points(self, grasps, object_pose) -> np.ndarray:
        """Gripper points expressed in the object frame, ``(B, N, 3)``."""
        grasps, object_pose = _batch(grasps, object_pose)
        rel = lg.compose(lg.inverse(object_pose), grasps)
        return self.world_points(rel)

    def _encoder_inputs(self, x_obj, code_index, k):
        """Stack encoder rows ``[x / scale, z, log sigma]`` for points ``(B, M, 3)``."""
        b, m, _ = x_obj.shape
        codes = self.params["codes"][np.broadcast_to(np.asarray(code_index), (b,))]
        logsig = np.log(np.broadcast_to(self.sigma(k), (b,)))
        rows = np.empty((b, m, 3 + self.code_dim + 1))
        rows[..., :3] = x_obj / self.point_scale
        rows[..., 3:-1] = codes[:, None, :]
        rows[..., -1] = logsig[:, None]
        return rows.reshape(b * m, -1)

    # -- evaluation -------------------------------------------------------------

    def _run(self, grasps, object_pose, code_index, k, direction=None):
        grasps, object_pose = _batch(grasps, object_pose)
        b = grasps.shape[0]
        n = len(self.gripper)
        x_world = self.world_points(grasps)
        r_obj = lg.rotation(object_pose)
        t_obj = lg.translation(object_pose)
        x_obj = np.einsum("bji,bnj->bni", r_obj, x_world - t_obj[:, None, :])
        enc_in = self._encoder_inputs(x_obj, code_index, k)
        d_in = None if direction is None else self._input_tangent(x_world, r_obj, direction)
        enc_layers = self.layers("encoder")
        dec_layers = self.layers("decoder")
        feats, dfeats, enc_cache = mlp_forward(enc_layers, enc_in, d_in)
        width = feats.shape[1]
        flat = feats.reshape(b, n * width)
        dflat = None if dfeats is None else dfeats.reshape(b, n * width)
        energy, denergy, dec_cache = mlp_forward(dec_layers, flat, dflat)
        out_scale = self._output_scale(k, b)
        energy = energy * out_scale
        if denergy is not None:
            denergy = denergy * out_scale
        state = dict(
            b=b,
            n=n,
            width=width,
            x_world=x_world,
            r_obj=r_obj,
            enc_cache=enc_cache,
            dec_cache=dec_cache,
            enc_layers=enc_layers,
            dec_layers=dec_layers,
            code_index=np.broadcast_to(np.asarray(code_index), (b,)),
            out_scale=out_scale,
        )
        sdf = self.sdf_scale * feats[:, 0].reshape(b, n)
        return energy[:, 0], sdf, denergy, state

    def _input_tangent(self, x_world, r_obj, direction):
        """Encoder-input tangent induced by a world twist per grasp."""
        b, n, _ = x_world.shape
        u = np.asarray(direction, dtype=float).reshape(b, 6)
        vel = u[:, None, :3] + np.cross(u[:, None, 3:], x_world)
        vel_obj = np.einsum("bji,bnj->bni", r_obj, vel)
        d_in = np.zeros((b * n, 3 + self.code_dim + 1))
        d_in[:, :3] = vel_obj.reshape(b * n, 3) / self.point_scale
        return d_in

    def _output_scale(self, k, b):
        """Per-sample factor on the decoder output: ``1 / sigma_k`` or 1."""
        if not self.sigma_scaled:
            return np.ones((b, 1))
        return (1.0 / np.broadcast_to(self.sigma(k), (b,)))[:, None]

    def _pose_grad_from_input_grad(self, state, g_in):
        b, n = state["b"], state["n"]
        g_obj = g_in[:, :3].reshape(b, n, 3) / self.point_scale
        g_world = np.einsum("bij,bnj->bni", state["r_obj"], g_obj)
        lin = g_world.sum(axis=1)
        ang = np.cross(state["x_world"], g_world).sum(axis=1)
        return np.concatenate([lin, ang], axis=1)

    def _collect(self, state, enc_grads, dec_grads, g_in):
        grads = {}
        for prefix, gl in (("encoder", enc_grads), ("decoder", dec_grads)):
            for i, (dw, db) in enumerate(gl):
                grads[f"{prefix}.{i}.weight"] = dw
                grads[f"{prefix}.{i}.bias"] = db
        b, n = state["b"], state["n"]
        g_codes = g_in[:, 3 : 3 + self.code_dim].reshape(b, n, -1).sum(axis=1)
        codes = np.zeros_like(self.params["codes"])
        np.add.at(codes, state["code_index"], g_codes)
        grads["codes"] = codes
        return grads

    def forward(self, grasps, object_pose, code_index=0, k=1) -> EnergyEval:
        energy, sdf, _, _ = self._run(grasps, object_pose, code_index, k)
        return EnergyEval(energy=energy, sdf_per_point=sdf)

    def energy_and_pose_grad(self, grasps, object_pose, code_index=0, k=1, return_state=False):
        """Energies ``(B,)`` and left-perturbation pose gradients ``(B, 6)``.

        With ``return_state`` the forward caches come back too, so a following
        :meth:`directional_param_grads` call can skip the primal pass.
        """
        energy, _, _, st = self._run(grasps, object_pose, code_index, k)
        _, g_flat, _ = mlp_backward(st["dec_layers"], st["dec_cache"], st["out_scale"], want_params=False)
        g_feats = g_flat.reshape(st["b"] * st["n"], st["width"])
        _, g_in, _ = mlp_backward(st["enc_layers"], st["enc_cache"], g_feats, want_params=False)
        grad = self._pose_grad_from_input_grad(st, g_in)
        if return_state:
            st["energy"] = energy
            return energy, grad, st
        return energy, grad

    def backward(self, grasps, object_pose, code_index=0, k=1) -> EnergyEval:
        """Energy, pose gradient and the parameter gradient of ``sum_b E_b``."""
        energy, sdf, _, st = self._run(grasps, object_pose, code_index, k)
        dec_grads, g_flat, _ = mlp_backward(st["dec_layers"], st["dec_cache"], st["out_scale"])
        g_feats = g_flat.reshape(st["b"] * st["n"], st["width"])
        enc_grads, g_in, _ = mlp_backward(st["enc_layers"], st["enc_cache"], g_feats)
        pose_grad = self._pose_grad_from_input_grad(st, g_in)
        return EnergyEval(energy, sdf, pose_grad, self._collect(st, enc_grads, dec_grads, g_in))

    def directional_param_grads(self, grasps, object_pose, code_index, k, direction, state=None):
        """Gradient w.r.t. parameters of ``sum_b <DE/DH_b, u_b>``.

        Returns ``(param_grads, directional derivatives (B,), energies (B,))``.
        This is the second-order quantity behind the DSM loss. ``state`` from
        :meth:`energy_and_pose_grad` on the same inputs avoids recomputation.
        """
        if state is None:
            energy, _, denergy, st = self._run(grasps, object_pose, code_index, k, direction=direction)
        else:
            st, energy = state, state["energy"]
            d_in = self._input_tangent(st["x_world"], st["r_obj"], direction)
            dfeats = mlp_tangent(st["enc_layers"], st["enc_cache"], d_in)
            dflat = dfeats.reshape(st["b"], st["n"] * st["width"])
            denergy = mlp_tangent(st["dec_layers"], st["dec_cache"], dflat) * st["out_scale"]
        b = st["b"]
        dec_grads, g_flat, dg_flat = mlp_backward(
            st["dec_layers"], st["dec_cache"], np.zeros((b, 1)), st["out_scale"]
        )
        w = st["width"]
        enc_grads, g_in, _ = mlp_backward(
            st["enc_layers"], st["enc_cache"], g_flat.reshape(b * st["n"], w), dg_flat.reshape(b * st["n"], w)
        )
        return self._collect(st, enc_grads, dec_grads, g_in), denergy[:, 0], energy

    def sdf(self, x, code_index=0, k=1, want_grad=False):
        """SDF head at bare object-frame points ``(M, 3)``; optional gradient w.r.t. ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = self._sdf_run(x, code_index, k)
        if not want_grad:
            return out[0]
        sdf, cache, layers = out
        g_out = np.zeros((x.shape[0], self.feature_dim + 1))
        g_out[:, 0] = self.sdf_scale
        _, g_in, _ = mlp_backward(layers, cache, g_out, want_params=False)
        return sdf, g_in[:, :3] / self.point_scale

    def _sdf_run(self, x, code_index, k):
        rows = self._encoder_inputs(x[None], code_index, k)
        layers = self.layers("encoder")
        feats, _, cache = mlp_forward(layers, rows)
        return self.sdf_scale * feats[:, 0], cache, layers

    def sdf_param_grads(self, x, code_index, k, g_sdf):
        """Parameter gradient of ``sum_m g_m sdf(x_m)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        sdf, cache, layers = self._sdf_run(x, code_index, k)
        g_out = np.zeros((x.shape[0], self.feature_dim + 1))
        g_out[:, 0] = self.sdf_scale * g_sdf
        enc_grads, g_in, _ = mlp_backward(layers, cache, g_out)
        grads = {name: np.zeros_like(v) for name, v in self.params.items()}
        for i, (dw, db) in enumerate(enc_grads):
            grads[f"encoder.{i}.weight"] = dw
            grads[f"encoder.{i}.bias"] = db
        grads["codes"][code_index] += g_in[:, 3 : 3 + self.code_dim].sum(axis=0)
        return sdf, grads


def _batch(grasps, object_pose):
    grasps = np.asarray(grasps, dtype=float)
    if grasps.ndim == 2:
        grasps = grasps[None]
    object_pose = np.asarray(object_pose, dtype=float)
    object_pose = np.broadcast_to(object_pose, grasps.shape)
    return grasps, object_pose


class GraspField:
    """Energy field of one object at a fixed world pose, as seen by samplers."""

    def __init__(self, model: EnergyModel, object_pose=None, code_index: int = 0):
        self.model = model
        self.object_pose = lg.identity() if object_pose is None else np.asarray(object_pose, dtype=float)
        self.code_index = code_index

    @property
    def noise_scales(self):
        return self.model.noise_scales

    def energy(self, poses, k):
        return self.model.forward(poses, self.object_pose, self.code_index, k).energy

    def energy_grad(self, poses, k):
        return self.model.energy_and_pose_grad(poses, self.object_pose, self.code_index, k)


# function-style aliases for the module's public operations


def encode_pose_points(model: EnergyModel, grasp, object_pose) -> np.ndarray:
    return model.encode_pose_points(grasp, object_pose)


def energy_forward(model: EnergyModel, grasp, object_pose, code_index=0, k=1) -> EnergyEval:
    return model.forward(grasp, object_pose, code_index, k)


def energy_backward(model: EnergyModel, grasp, object_pose, code_index=0, k=1) -> EnergyEval:
    return model.backward(grasp, object_pose, code_index, k)


def sdf_forward(model: EnergyModel, x, code_index=0, k=1):
    return model.sdf(x, code_index, k)
