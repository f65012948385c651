"""Synthetic multi-object scenes with ground-truth boxes and masks.

Scenes hold 2-6 flat-colored shapes (rectangle, circle, triangle, cross =
classes 1-4) over a noisy dark background. Colors are class-keyed with
jitter so small convnets can learn the tasks, and placement keeps box
overlap small enough that every box stays mostly visible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import rng_stream
from .tensor import Tensor, load_tensor, save_tensor

NUM_SHAPE_CLASSES = 4  # rectangle, circle, triangle, cross
NUM_MASK_CLASSES = NUM_SHAPE_CLASSES + 1  # + background 0

# base fill color per class; jittered per object
_PALETTE = {
    1: (0.85, 0.20, 0.20),
    2: (0.20, 0.80, 0.25),
    3: (0.25, 0.35, 0.90),
    4: (0.90, 0.85, 0.20),
}

_MANIFEST_FORMAT = "ebad-dataset-v1"


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    image_side: int = 32
    min_objects: int = 2
    max_objects: int = 6
    min_size_frac: float = 0.20
    max_size_frac: float = 0.34
    min_center_dist_frac: float = 0.21
    max_box_overlap: float = 0.05

    def __post_init__(self):
        if self.image_side not in (32, 64):
            raise ValueError(f"image_side must be 32 or 64, got {self.image_side}")
        if not (2 <= self.min_objects <= self.max_objects <= 6):
            raise ValueError("object count range must sit inside [2, 6]")

    def to_dict(self) -> dict:
        return {
            "image_side": self.image_side,
            "min_objects": self.min_objects,
            "max_objects": self.max_objects,
            "min_size_frac": self.min_size_frac,
            "max_size_frac": self.max_size_frac,
            "min_center_dist_frac": self.min_center_dist_frac,
            "max_box_overlap": self.max_box_overlap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "x_min": self.x_min,
            "y_min": self.y_min,
            "x_max": self.x_max,
            "y_max": self.y_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthBox":
        return cls(**d)


@dataclass(frozen=True)
class Scene:
    image: Tensor  # H x W x 3 in [0, 1]
    boxes: tuple[GroundTruthBox, ...]
    mask: np.ndarray = field(repr=False)  # H x W int64 class map

    def __post_init__(self):
        side = self.image.shape[0]
        if self.image.shape != (side, side, 3) or self.mask.shape != (side, side):
            raise ValueError("image/mask shapes inconsistent")


@dataclass(frozen=True)
class SceneDataset:
    seed: int
    spec: SceneSpec
    scenes: tuple[Scene, ...]

    def __len__(self) -> int:
        return len(self.scenes)

    def __getitem__(self, i: int) -> Scene:
        return self.scenes[i]


def _shape_mask(class_id: int, x0, y0, x1, y1, side: int) -> np.ndarray:
    """Pixel-center rasterization of one shape inside its real-valued box."""
    cy, cx = np.mgrid[0:side, 0:side] + 0.5
    if class_id == 1:  # rectangle fills its box
        return (cx >= x0) & (cx < x1) & (cy >= y0) & (cy < y1)
    xc, yc = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    w, h = x1 - x0, y1 - y0
    if class_id == 2:  # circle
        r = min(w, h) / 2.0
        return (cx - xc) ** 2 + (cy - yc) ** 2 <= r * r
    if class_id == 3:  # triangle, apex flattened to half width so the box stays mostly filled
        v = np.clip((cy - y0) / h, 0.0, 1.0)
        halfw = (w / 2.0) * (0.5 + 0.5 * v)
        return (np.abs(cx - xc) <= halfw) & (cy >= y0) & (cy < y1)
    if class_id == 4:  # cross of two half-width bars
        in_x = np.abs(cx - xc) <= w / 2.0
        in_y = np.abs(cy - yc) <= h / 2.0
        return (in_x & (np.abs(cy - yc) <= h / 4.0)) | (in_y & (np.abs(cx - xc) <= w / 4.0))
    raise ValueError(f"unknown shape class {class_id}")


def _overlap_frac(a, b) -> float:
    """Box intersection area over the smaller box area."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / min(area_a, area_b)


def gen_scene(seed: int, spec: SceneSpec) -> Scene:
    """Deterministic scene for (seed, spec); raises DatasetError if no
    feasible placement is found within 1000 rejection samples."""
    rng = rng_stream(seed, "scene")
    side = spec.image_side

    bg = 0.12 + 0.18 * rng.random() + rng.uniform(-0.03, 0.03, size=3)
    image = np.tile(bg, (side, side, 1))
    mask = np.zeros((side, side), dtype=np.int64)

    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    min_dist = spec.min_center_dist_frac * side
    # 1000 rejection samples per object overall; restart the whole layout when
    # a greedy sequence paints itself into a corner
    budget = 1000 * n_objects
    placed: list[tuple[int, float, float, float, float]] = []
    while True:
        placed = []
        stuck = False
        while len(placed) < n_objects and not stuck:
            for _ in range(min(200, budget)):
                budget -= 1
                class_id = int(rng.integers(1, NUM_SHAPE_CLASSES + 1))
                w = rng.uniform(spec.min_size_frac, spec.max_size_frac) * side
                if class_id == 1:
                    h = min(w * rng.uniform(0.7, 1.4), spec.max_size_frac * side * 1.4)
                elif class_id == 2:
                    h = w  # tight square box around the circle
                else:
                    h = w * rng.uniform(0.9, 1.1)
                xc = rng.uniform(w / 2 + 1, side - w / 2 - 1)
                yc = rng.uniform(h / 2 + 1, side - h / 2 - 1)
                cand = (class_id, xc - w / 2, yc - h / 2, xc + w / 2, yc + h / 2)
                ok = True
                for prev in placed:
                    pxc, pyc = (prev[1] + prev[3]) / 2, (prev[2] + prev[4]) / 2
                    if (xc - pxc) ** 2 + (yc - pyc) ** 2 < min_dist * min_dist:
                        ok = False
                        break
                    if _overlap_frac(cand[1:], prev[1:]) > spec.max_box_overlap:
                        ok = False
                        break
                if ok:
                    placed.append(cand)
                    break
            else:
                stuck = True
        if not stuck:
            break
        if budget <= 0:
            raise DatasetError(
                f"no feasible placement after 1000 samples per object for spec {spec.to_dict()}"
            )

    boxes = []
    for class_id, x0, y0, x1, y1 in placed:
        color = np.clip(np.asarray(_PALETTE[class_id]) + rng.uniform(-0.08, 0.08, 3), 0.02, 0.98)
        cover = _shape_mask(class_id, x0, y0, x1, y1, side)
        image[cover] = color
        mask[cover] = class_id
        boxes.append(GroundTruthBox(class_id, x0, y0, x1, y1))

    image = np.clip(image + rng.uniform(-0.03, 0.03, size=image.shape), 0.0, 1.0)
    return Scene(image=Tensor(image), boxes=tuple(boxes), mask=mask)


def make_dataset(seed: int, count: int, spec: SceneSpec) -> SceneDataset:
    if count < 1:
        raise ValueError("count must be >= 1")
    scene_rng_keys = [rng_stream(seed, "dataset", i).integers(0, 2**63) for i in range(count)]
    scenes = tuple(gen_scene(int(k), spec) for k in scene_rng_keys)
    return SceneDataset(seed=seed, spec=spec, scenes=scenes)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_ppm(image: Tensor, path) -> None:
    """8-bit binary P6 dump for human inspection."""
    arr = np.clip(np.rint(image.data * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def save_dataset(dataset: SceneDataset, out_dir, ppm: bool = False) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, scene in enumerate(dataset.scenes):
        img_name, mask_name, boxes_name = (
            f"img_{i:05d}.ebt",
            f"mask_{i:05d}.ebt",
            f"boxes_{i:05d}.json",
        )
        save_tensor(scene.image, out / img_name)
        save_tensor(Tensor(scene.mask.astype(np.float64)), out / mask_name)
        (out / boxes_name).write_text(
            json.dumps([b.to_dict() for b in scene.boxes], sort_keys=True)
        )
        for name in (img_name, mask_name, boxes_name):
            files[name] = _sha256(out / name)
        if ppm:
            write_ppm(scene.image, out / f"img_{i:05d}.ppm")
    manifest = {
        "format": _MANIFEST_FORMAT,
        "seed": dataset.seed,
        "count": len(dataset.scenes),
        "spec": dataset.spec.to_dict(),
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def load_dataset(in_dir) -> SceneDataset:
    src = Path(in_dir)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"cannot read manifest in {src}: {e}") from e
    if manifest.get("format") != _MANIFEST_FORMAT:
        raise DatasetError(f"unexpected manifest format {manifest.get('format')!r}")
    for name, digest in manifest["files"].items():
        path = src / name
        if not path.exists():
            raise DatasetError(f"missing file {name}")
        if _sha256(path) != digest:
            raise DatasetError(f"checksum mismatch for {name}")
    scenes = []
    for i in range(manifest["count"]):
        image = load_tensor(src / f"img_{i:05d}.ebt")
        mask = load_tensor(src / f"mask_{i:05d}.ebt").data.astype(np.int64)
        boxes = tuple(
            GroundTruthBox.from_dict(d)
            for d in json.loads((src / f"boxes_{i:05d}.json").read_text())
        )
        scenes.append(Scene(image=image, boxes=boxes, mask=mask))
    return SceneDataset(
        seed=manifest["seed"],
        spec=SceneSpec.from_dict(manifest["spec"]),
        scenes=tuple(scenes),
    )
