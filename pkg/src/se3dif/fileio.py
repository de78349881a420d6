"""Versioned structured-text files for checkpoints, datasets, pose sets and trajectories.

Everything is JSON with a ``schema`` tag. Floats are written with ``repr``
precision, so loading and re-saving a file reproduces it byte for byte.
Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from se3dif import liegroup as lg
from se3dif.datagen import GraspDataset, SdfDataset
from se3dif.energymodel import EnergyModel, GripperPointSet
from se3dif.errors import SchemaError

CHECKPOINT_SCHEMA = "se3dif.checkpoint/1"
GRASPS_SCHEMA = "se3dif.grasps/1"
SDF_SCHEMA = "se3dif.sdf/1"
POSES_SCHEMA = "se3dif.poses/1"
TRAJECTORY_SCHEMA = "se3dif.trajectory/1"
REPORT_SCHEMA = "se3dif.report/1"
CLOUD_SCHEMA = "se3dif.pointcloud/1"


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"


def write_json(path, doc: dict) -> None:
    atomic_write_text(path, dumps(doc))


def read_json(path, schema: str | None = None) -> dict:
    doc = json.loads(Path(path).read_text())
    if schema is not None:
        check_schema(doc, schema)
    return doc


def check_schema(doc: dict, schema: str) -> None:
    found = doc.get("schema") if isinstance(doc, dict) else None
    if found != schema:
        raise SchemaError(f"expected schema {schema!r}, found {found!r}")


def array_record(name: str, arr) -> dict:
    arr = np.asarray(arr, dtype=float)
    return {"name": name, "shape": list(arr.shape), "values": arr.ravel().tolist()}


def array_from_record(rec: dict) -> np.ndarray:
    shape = tuple(int(s) for s in rec["shape"])
    values = np.asarray(rec["values"], dtype=float)
    if values.size != int(np.prod(shape)):
        raise SchemaError(f"array {rec.get('name')!r} has {values.size} values for shape {shape}")
    return values.reshape(shape)


def pose_rows(poses) -> list:
    """Each pose as translation (3) followed by the row-major rotation (9)."""
    poses = np.asarray(poses, dtype=float).reshape(-1, 4, 4)
    flat = np.concatenate([poses[:, :3, 3], poses[:, :3, :3].reshape(-1, 9)], axis=1)
    return flat.tolist()


def poses_from_rows(rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=float).reshape(-1, 12)
    return lg.make_pose(rows[:, 3:].reshape(-1, 3, 3), rows[:, :3])


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def checkpoint_dict(model: EnergyModel, step: int = 0, lineage: dict | None = None) -> dict:
    return {
        "schema": CHECKPOINT_SCHEMA,
        "hyperparameters": model.hyperparameters(),
        "step": int(step),
        "lineage": dict(lineage or {}),
        "arrays": [array_record(name, arr) for name, arr in model.params.items()],
    }


def model_from_checkpoint(doc: dict) -> EnergyModel:
    check_schema(doc, CHECKPOINT_SCHEMA)
    hp = doc["hyperparameters"]
    params = {rec["name"]: array_from_record(rec) for rec in doc["arrays"]}
    gripper = GripperPointSet(np.asarray(hp["gripper_points"], dtype=float))
    model = EnergyModel(params, hp["noise_scales"], gripper, hp["point_scale"], hp["sigma_scaled"], hp["sdf_scale"])
    if model.hyperparameters() != hp:
        raise SchemaError("checkpoint hyperparameters disagree with its arrays")
    return model


def save_checkpoint(path, model: EnergyModel, step: int = 0, lineage: dict | None = None) -> None:
    write_json(path, checkpoint_dict(model, step, lineage))


def load_checkpoint(path) -> tuple[EnergyModel, dict]:
    """Model plus the checkpoint's ``step`` and ``lineage`` metadata."""
    doc = read_json(path, CHECKPOINT_SCHEMA)
    return model_from_checkpoint(doc), {"step": doc["step"], "lineage": doc["lineage"]}


# --------------------------------------------------------------------------
# datasets and pose sets
# --------------------------------------------------------------------------


def save_grasps(path, data: GraspDataset, meta: dict | None = None) -> None:
    write_json(path, {"schema": GRASPS_SCHEMA, "meta": dict(meta or {}), "poses": pose_rows(data.poses),
                      "labels": np.asarray(data.labels, dtype=int).tolist()})


def load_grasps(path) -> GraspDataset:
    doc = read_json(path, GRASPS_SCHEMA)
    return GraspDataset(poses_from_rows(doc["poses"]), np.asarray(doc["labels"], dtype=int))


def save_sdf(path, data: SdfDataset, meta: dict | None = None) -> None:
    write_json(path, {"schema": SDF_SCHEMA, "meta": dict(meta or {}), "points": np.asarray(data.points).tolist(),
                      "values": np.asarray(data.values).tolist()})


def load_sdf(path) -> SdfDataset:
    doc = read_json(path, SDF_SCHEMA)
    return SdfDataset(np.asarray(doc["points"], dtype=float).reshape(-1, 3), np.asarray(doc["values"], dtype=float))


def save_poses(path, poses, energies=None, meta: dict | None = None) -> None:
    doc = {"schema": POSES_SCHEMA, "meta": dict(meta or {}), "poses": pose_rows(poses)}
    if energies is not None:
        doc["energies"] = np.asarray(energies, dtype=float).tolist()
    write_json(path, doc)


def load_poses(path) -> tuple[np.ndarray, np.ndarray | None]:
    doc = read_json(path, POSES_SCHEMA)
    energies = doc.get("energies")
    return poses_from_rows(doc["poses"]), None if energies is None else np.asarray(energies, dtype=float)


def save_pointcloud(path, points, meta: dict | None = None) -> None:
    write_json(path, {"schema": CLOUD_SCHEMA, "meta": dict(meta or {}), "points": np.asarray(points).tolist()})


def load_pointcloud(path) -> np.ndarray:
    return np.asarray(read_json(path, CLOUD_SCHEMA)["points"], dtype=float).reshape(-1, 3)


# --------------------------------------------------------------------------
# trajectories, histories and reports
# --------------------------------------------------------------------------


def save_trajectory(path, waypoints, seed: int, cost: float, breakdown: dict, meta: dict | None = None) -> None:
    write_json(path, {
        "schema": TRAJECTORY_SCHEMA,
        "seed": int(seed),
        "cost": float(cost),
        "breakdown": {k: float(v) for k, v in breakdown.items()},
        "meta": dict(meta or {}),
        "waypoints": np.asarray(waypoints, dtype=float).tolist(),
    })


def load_trajectory(path) -> tuple[np.ndarray, dict]:
    doc = read_json(path, TRAJECTORY_SCHEMA)
    return np.asarray(doc["waypoints"], dtype=float), {k: v for k, v in doc.items() if k != "waypoints"}


def write_table(path, header: list, rows) -> None:
    """Tab-separated table with a header row; floats use ``repr``."""
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_history(path, history) -> None:
    """Per-step cost of every particle: one row per step, one column per particle."""
    history = np.asarray(history, dtype=float)
    header = ["step"] + [f"particle_{i}" for i in range(history.shape[0])]
    write_table(path, header, ([s, *history[:, s]] for s in range(history.shape[1])))


def save_report(path, report: dict) -> None:
    write_json(path, {"schema": REPORT_SCHEMA, **report})
