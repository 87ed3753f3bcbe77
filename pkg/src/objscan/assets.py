"""Procedural furniture catalog and demo scene authoring.

Every model is a composition of boxes and cylinders, authored with its base
on z = 0 and its footprint centered at the origin.  The catalog manifest and
scene files are plain JSON so they can be written by hand.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .meshio import TriMesh, box_mesh, cylinder_mesh, load_mesh, save_obj

CATALOG_VERSION = 1
SCENE_VERSION = 1


def make_table() -> TriMesh:
    top = box_mesh(size=(1.2, 0.7, 0.06), center=(0.0, 0.0, 0.69))
    legs = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            legs.append(box_mesh(size=(0.06, 0.06, 0.66), center=(sx * 0.52, sy * 0.27, 0.33)))
    return TriMesh.concat([top] + legs)


def make_chair() -> TriMesh:
    seat = box_mesh(size=(0.45, 0.45, 0.06), center=(0.0, 0.0, 0.42))
    back = box_mesh(size=(0.45, 0.06, 0.45), center=(0.0, -0.195, 0.675))
    legs = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            legs.append(box_mesh(size=(0.05, 0.05, 0.39), center=(sx * 0.19, sy * 0.19, 0.195)))
    return TriMesh.concat([seat, back] + legs)


def make_sofa() -> TriMesh:
    base = box_mesh(size=(1.6, 0.8, 0.42), center=(0.0, 0.0, 0.21))
    back = box_mesh(size=(1.6, 0.22, 0.45), center=(0.0, -0.29, 0.645))
    arms = [
        box_mesh(size=(0.22, 0.8, 0.24), center=(-0.69, 0.0, 0.54)),
        box_mesh(size=(0.22, 0.8, 0.24), center=(0.69, 0.0, 0.54)),
    ]
    return TriMesh.concat([base, back] + arms)


def make_shelf() -> TriMesh:
    sides = [
        box_mesh(size=(0.05, 0.32, 1.5), center=(-0.4, 0.0, 0.75)),
        box_mesh(size=(0.05, 0.32, 1.5), center=(0.4, 0.0, 0.75)),
    ]
    boards = [
        box_mesh(size=(0.75, 0.32, 0.04), center=(0.0, 0.0, z))
        for z in (0.04, 0.52, 1.0, 1.47)
    ]
    return TriMesh.concat(sides + boards)


def make_lamp() -> TriMesh:
    base = cylinder_mesh(radius=0.16, height=0.05, center=(0.0, 0.0, 0.025), segments=16)
    pole = cylinder_mesh(radius=0.025, height=1.25, center=(0.0, 0.0, 0.675), segments=10)
    shade = cylinder_mesh(radius=0.19, height=0.28, center=(0.0, 0.0, 1.44), segments=16)
    return TriMesh.concat([base, pole, shade])


def make_cabinet() -> TriMesh:
    body = box_mesh(size=(0.8, 0.45, 1.0), center=(0.0, 0.0, 0.55))
    plinth = box_mesh(size=(0.7, 0.36, 0.05), center=(0.0, 0.0, 0.025))
    return TriMesh.concat([body, plinth])


CATALOG_BUILDERS = {
    "table": make_table,
    "chair": make_chair,
    "sofa": make_sofa,
    "shelf": make_shelf,
    "lamp": make_lamp,
    "cabinet": make_cabinet,
}


def catalog_meshes(names=None) -> dict[str, TriMesh]:
    names = list(CATALOG_BUILDERS) if names is None else list(names)
    return {name: CATALOG_BUILDERS[name]() for name in names}


def write_catalog(directory, names=None) -> Path:
    """Write model OBJ files plus the manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    models = []
    for name, mesh in catalog_meshes(names).items():
        fname = f"{name}.obj"
        save_obj(directory / fname, mesh)
        models.append({"id": name, "file": fname, "label": name})
    manifest = {"version": CATALOG_VERSION, "models": models}
    path = directory / "catalog.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_catalog(manifest_path) -> dict:
    """Load a catalog manifest into {model id: {mesh, label}} plus label table."""
    manifest_path = Path(manifest_path)
    spec = json.loads(manifest_path.read_text(encoding="utf-8"))
    if spec.get("version") != CATALOG_VERSION:
        raise ValueError(f"unsupported catalog version: {spec.get('version')!r}")
    models = {}
    label_names = []
    for entry in spec["models"]:
        if "label" not in entry or not entry["label"]:
            raise ValueError(f"model {entry.get('id')!r} has no label")
        mesh = load_mesh(manifest_path.parent / entry["file"])
        if entry["label"] not in label_names:
            label_names.append(entry["label"])
        models[entry["id"]] = {"mesh": mesh, "label": entry["label"]}
    if not models:
        raise ValueError("empty catalog")
    return {"models": models, "label_names": label_names}


def demo_room_dict() -> dict:
    """A 7x7 m room with five catalog models, all gaps at least 0.5 m."""
    return {
        "version": SCENE_VERSION,
        "name": "room5",
        "entry": [0.8, 0.8],
        "floor": {"height": 0.0, "polygon": [[0.0, 0.0], [7.0, 0.0], [7.0, 7.0], [0.0, 7.0]]},
        "wall_height": 2.5,
        "objects": [
            {"id": 1, "model": "table", "position": [3.5, 5.0], "yaw_deg": 0.0, "scale": 1.0},
            {"id": 2, "model": "chair", "position": [1.3, 3.5], "yaw_deg": 90.0, "scale": 1.0},
            {"id": 3, "model": "sofa", "position": [5.3, 2.0], "yaw_deg": 0.0, "scale": 1.0},
            {"id": 4, "model": "shelf", "position": [1.2, 5.8], "yaw_deg": 0.0, "scale": 1.0},
            {"id": 5, "model": "lamp", "position": [5.5, 5.5], "yaw_deg": 0.0, "scale": 1.0},
        ],
    }


def empty_room_dict(side: float = 4.0) -> dict:
    return {
        "version": SCENE_VERSION,
        "name": "empty",
        "entry": [0.8, 0.8],
        "floor": {"height": 0.0, "polygon": [[0.0, 0.0], [side, 0.0], [side, side], [0.0, side]]},
        "wall_height": 2.5,
        "objects": [],
    }


def write_scene(path, scene_dict: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scene_dict, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def scene_clearances(scene_dict: dict, meshes: dict[str, TriMesh]) -> dict:
    """Minimum object-object and object-wall horizontal AABB gaps, for checks."""
    boxes = []
    for obj in scene_dict["objects"]:
        mesh = meshes[obj["model"]].transformed(
            scale=obj.get("scale", 1.0),
            yaw=np.deg2rad(obj.get("yaw_deg", 0.0)),
            translation=(obj["position"][0], obj["position"][1], scene_dict["floor"]["height"]),
        )
        lo, hi = mesh.bounds()
        boxes.append((lo[:2], hi[:2]))
    poly = np.asarray(scene_dict["floor"]["polygon"], dtype=np.float64)
    room_lo, room_hi = poly.min(axis=0), poly.max(axis=0)
    obj_gap = np.inf
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            (lo_i, hi_i), (lo_j, hi_j) = boxes[i], boxes[j]
            gap = max(np.max(lo_j - hi_i), np.max(lo_i - hi_j))
            obj_gap = min(obj_gap, gap)
    wall_gap = np.inf
    for lo, hi in boxes:
        wall_gap = min(wall_gap, np.min(lo - room_lo), np.min(room_hi - hi))
    return {"object_object": float(obj_gap), "object_wall": float(wall_gap)}
