"""Toy dense-prediction model families, their training, and whitebox losses.

Five families share a small conv vocabulary but differ deliberately in loss
formulation so ensemble loss scales are heterogeneous:

  s1  segmenter, mean-reduced cross-entropy
  s2  segmenter (narrower), sum-reduced cross-entropy scaled by 1/100
  s3  segmenter with an auxiliary head, loss = main + 0.5 * aux
  d1  grid detector, sum-reduced objectness CE + class CE + L1 boxes
  d2  grid detector, focal-style weighting, mean-reduced

Detectors predict on a fixed 8x8 grid; each ground-truth box trains the cell
containing its center.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import graph as G
from .data import GroundTruthBox, Scene, SceneDataset
from .metrics import iou
from .seeding import rng_stream
from .tensor import Tensor, load_tensor, save_tensor

SEG_CLASSES = 5  # background + 4 shapes
DET_CLASSES = 4
GRID = 8
DEFAULT_TAU = 0.3
NMS_IOU = 0.5

FAMILY_TASK = {
    "s1": "segmentation",
    "s2": "segmentation",
    "s3": "segmentation",
    "d1": "detection",
    "d2": "detection",
}


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training loss became non-finite at epoch {epoch} ({loss})")
        self.epoch = epoch


@dataclass(frozen=True)
class SegPrediction:
    logits: Tensor  # H x W x K
    class_map: np.ndarray = field(repr=False)  # H x W int64, argmax ties -> lowest class


@dataclass(frozen=True)
class DetBox:
    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: float

    @property
    def box(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class DetPrediction:
    boxes: tuple[DetBox, ...]


@dataclass(frozen=True)
class SurrogateModel:
    family: str
    task: str
    image_side: int
    hyper: dict
    params: dict  # name -> Tensor, frozen after training
    predict_graph: G.CompGraph
    loss_graph: G.CompGraph

    def loss(self, image: Tensor, target) -> tuple[float, Tensor]:
        """Training loss and its gradient w.r.t. the input image."""
        if self.task == "segmentation":
            return seg_loss(self, image, target)
        return det_loss(self, image, target)


def default_hyper(family: str, image_side: int) -> dict:
    width = 14 if family.startswith("s") else 16
    lr = {
        "s1": 0.25,
        "s2": 0.25 * 100.0 / image_side**2,  # compensates the sum/100 reduction
        "s3": 0.2,
        "d1": 0.004,  # sum-reduced losses carry ~64x mean-scale gradients
        "d2": 0.25,
    }[family]
    return {"width": width, "epochs": 20, "lr": lr}


def _seg_graphs(side: int, width: int, family: str):
    def backbone(b: G.GraphBuilder):
        img = b.input("image", (side, side, 3))
        h1 = b.relu(b.conv2d(img, b.input("w1", (3, 3, 3, width)), b.input("b1", (width,)), pad=1))
        h2 = b.relu(b.conv2d(h1, b.input("w2", (3, 3, width, width)), b.input("b2", (width,)), pad=1))
        logits = b.conv2d(h2, b.input("w3", (3, 3, width, SEG_CLASSES)), b.input("b3", (SEG_CLASSES,)), pad=1)
        return h1, logits

    pb = G.GraphBuilder()
    _, logits = backbone(pb)
    pb.output("logits", logits)

    lb = G.GraphBuilder()
    h1, logits = backbone(lb)
    labels = lb.input("labels", (side, side))
    if family == "s1":
        loss = lb.cross_entropy(logits, labels, "mean")
    elif family == "s2":
        loss = lb.scale(lb.cross_entropy(logits, labels, "sum"), 0.01)
    elif family == "s3":
        aux_logits = lb.conv2d(
            h1, lb.input("wa", (1, 1, width, SEG_CLASSES)), lb.input("ba", (SEG_CLASSES,))
        )
        main = lb.cross_entropy(logits, labels, "mean")
        aux = lb.cross_entropy(aux_logits, labels, "mean")
        loss = lb.add(main, lb.scale(aux, 0.5))
    else:
        raise ValueError(f"unknown segmenter family {family!r}")
    lb.output("loss", loss)
    return pb.build(), lb.build()


def _det_graphs(side: int, width: int, family: str):
    if side % GRID != 0 or side // GRID not in (4, 8):
        raise ValueError(f"image side {side} does not map onto an {GRID}x{GRID} grid")
    stages = {4: 2, 8: 3}[side // GRID]
    head_ch = 2 + DET_CLASSES + 4

    def backbone(b: G.GraphBuilder):
        h = b.input("image", (side, side, 3))
        cin = 3
        for s in range(stages):
            h = b.relu(
                b.conv2d(
                    h,
                    b.input(f"w{s + 1}", (3, 3, cin, width)),
                    b.input(f"b{s + 1}", (width,)),
                    stride=2,
                    pad=1,
                )
            )
            cin = width
        head = b.conv2d(h, b.input("wh", (3, 3, width, head_ch)), b.input("bh", (head_ch,)), pad=1)
        return head

    pb = G.GraphBuilder()
    pb.output("head", backbone(pb))

    lb = G.GraphBuilder()
    head = backbone(lb)
    full = ((0, GRID, 1), (0, GRID, 1))
    obj_logits = lb.slice(head, (*full, (0, 2, 1)))
    cls_logits = lb.slice(head, (*full, (2, 2 + DET_CLASSES, 1)))
    box_pred = lb.slice(head, (*full, (2 + DET_CLASSES, head_ch, 1)))

    cls_onehot = lb.input("cls_onehot", (GRID, GRID, DET_CLASSES))
    box_targets = lb.input("box_targets", (GRID, GRID, 4))
    obj_mask = lb.input("obj_mask", (GRID, GRID))

    pt_cls = lb.reduce_sum(lb.mul(lb.softmax(cls_logits), cls_onehot), axis=2)
    nll_cls = lb.scale(lb.log(pt_cls), -1.0)
    diff = lb.add(box_pred, lb.scale(box_targets, -1.0))
    l1 = lb.reduce_sum(lb.add(lb.relu(diff), lb.relu(lb.scale(diff, -1.0))), axis=2)

    if family == "d1":
        obj_loss = lb.cross_entropy(obj_logits, lb.input("obj_labels", (GRID, GRID)), "sum")
        cls_loss = lb.reduce_sum(lb.mul(nll_cls, obj_mask))
        box_loss = lb.reduce_sum(lb.mul(l1, obj_mask))
        loss = lb.add(lb.add(obj_loss, cls_loss), box_loss)
    elif family == "d2":
        ones = lb.input("ones", (GRID, GRID))
        obj_onehot = lb.input("obj_onehot", (GRID, GRID, 2))
        cells = float(GRID * GRID)

        pt_obj = lb.reduce_sum(lb.mul(lb.softmax(obj_logits), obj_onehot), axis=2)
        om_obj = lb.add(ones, lb.scale(pt_obj, -1.0))
        focal_obj = lb.mul(lb.mul(om_obj, om_obj), lb.scale(lb.log(pt_obj), -1.0))
        obj_loss = lb.scale(lb.reduce_sum(focal_obj), 1.0 / cells)

        om_cls = lb.add(ones, lb.scale(pt_cls, -1.0))
        focal_cls = lb.mul(lb.mul(om_cls, om_cls), lb.mul(nll_cls, obj_mask))
        cls_loss = lb.scale(lb.reduce_sum(focal_cls), 1.0 / cells)

        box_loss = lb.scale(lb.reduce_sum(lb.mul(l1, obj_mask)), 1.0 / cells)
        loss = lb.add(lb.add(obj_loss, cls_loss), box_loss)
    else:
        raise ValueError(f"unknown detector family {family!r}")
    lb.output("loss", loss)
    return pb.build(), lb.build()


def build_graphs(family: str, image_side: int, width: int):
    if family.startswith("s"):
        return _seg_graphs(image_side, width, family)
    return _det_graphs(image_side, width, family)


# loss-graph inputs that are data, not trainable parameters
NON_PARAM_INPUTS = frozenset(
    {"image", "labels", "obj_labels", "obj_onehot", "cls_onehot", "box_targets", "obj_mask", "ones"}
)


def param_names(loss_graph: G.CompGraph) -> list[str]:
    return sorted(set(loss_graph.inputs) - NON_PARAM_INPUTS)


def _init_params(loss_graph: G.CompGraph, seed: int) -> dict:
    params = {}
    for idx, name in enumerate(param_names(loss_graph)):
        shape = loss_graph.input_shapes[name]
        if name.startswith("b"):
            params[name] = Tensor(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[:-1]))
            rng = rng_stream(seed, "init", idx)
            params[name] = Tensor(rng.normal(size=shape) * np.sqrt(2.0 / fan_in))
    return params


def encode_det_targets(boxes, image_side: int) -> dict:
    """Per-cell training targets for an 8x8 grid head. Each box lands in the
    cell containing its center; later boxes overwrite on collision."""
    stride = image_side / GRID
    obj_labels = np.zeros((GRID, GRID))
    cls_onehot = np.zeros((GRID, GRID, DET_CLASSES))
    box_targets = np.zeros((GRID, GRID, 4))
    for b in boxes:
        xc, yc = (b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0
        ci, cj = min(GRID - 1, int(yc / stride)), min(GRID - 1, int(xc / stride))
        obj_labels[ci, cj] = 1.0
        cls_onehot[ci, cj] = 0.0
        cls_onehot[ci, cj, b.class_id - 1] = 1.0
        box_targets[ci, cj] = (
            xc / stride - cj,
            yc / stride - ci,
            (b.x_max - b.x_min) / image_side,
            (b.y_max - b.y_min) / image_side,
        )
    obj_onehot = np.zeros((GRID, GRID, 2))
    obj_onehot[..., 0] = 1.0 - obj_labels
    obj_onehot[..., 1] = obj_labels
    return {
        "obj_labels": obj_labels,
        "obj_onehot": obj_onehot,
        "cls_onehot": cls_onehot,
        "box_targets": box_targets,
        "obj_mask": obj_labels.copy(),
        "ones": np.ones((GRID, GRID)),
    }


def _loss_bindings(model: SurrogateModel, image: Tensor, target) -> dict:
    binds = {name: t for name, t in model.params.items()}
    binds["image"] = image
    if model.task == "segmentation":
        target = np.asarray(target.data if isinstance(target, Tensor) else target)
        binds["labels"] = Tensor(target.astype(np.float64))
    else:
        encoded = encode_det_targets(target, model.image_side)
        for name in model.loss_graph.inputs:
            if name in encoded:
                binds[name] = Tensor(encoded[name])
    return binds


def seg_loss(model: SurrogateModel, image: Tensor, target_map) -> tuple[float, Tensor]:
    """Family training loss against a class map, and its input-image gradient."""
    if model.task != "segmentation":
        raise ValueError(f"{model.family} is not a segmenter")
    loss, grads = G.gradients(model.loss_graph, _loss_bindings(model, image, target_map), "loss", ["image"])
    return loss, grads["image"]


def det_loss(model: SurrogateModel, image: Tensor, target_boxes) -> tuple[float, Tensor]:
    """Family training loss against a box list, and its input-image gradient."""
    if model.task != "detection":
        raise ValueError(f"{model.family} is not a detector")
    loss, grads = G.gradients(model.loss_graph, _loss_bindings(model, image, target_boxes), "loss", ["image"])
    return loss, grads["image"]


def predict_seg(model: SurrogateModel, image: Tensor) -> SegPrediction:
    if model.task != "segmentation":
        raise ValueError(f"{model.family} is not a segmenter")
    logits = G.forward(model.predict_graph, {**model.params, "image": image})["logits"]
    # np.argmax returns the first maximum, i.e. the lowest class on ties
    return SegPrediction(logits=logits, class_map=np.argmax(logits.data, axis=-1))


def nms(boxes: list[DetBox], iou_threshold: float = NMS_IOU) -> list[DetBox]:
    """Greedy per-class suppression of boxes overlapping a kept box."""
    kept: list[DetBox] = []
    order = sorted(boxes, key=lambda b: (-b.score, b.x_min, b.y_min, b.x_max, b.y_max))
    for cand in order:
        if any(
            k.class_id == cand.class_id and iou(k.box, cand.box) > iou_threshold
            for k in kept
        ):
            continue
        kept.append(cand)
    return kept


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_det(model: SurrogateModel, image: Tensor, tau: float = DEFAULT_TAU) -> DetPrediction:
    if model.task != "detection":
        raise ValueError(f"{model.family} is not a detector")
    head = G.forward(model.predict_graph, {**model.params, "image": image})["head"].data
    side = model.image_side
    stride = side / GRID
    p_obj = _softmax_np(head[..., 0:2])[..., 1]
    p_cls = _softmax_np(head[..., 2 : 2 + DET_CLASSES])
    raw = head[..., 2 + DET_CLASSES :]
    candidates = []
    for ci in range(GRID):
        for cj in range(GRID):
            score = float(p_obj[ci, cj] * p_cls[ci, cj].max())
            if score < tau:
                continue
            class_id = int(np.argmax(p_cls[ci, cj])) + 1
            tx, ty = np.clip(raw[ci, cj, 0], 0.0, 1.0), np.clip(raw[ci, cj, 1], 0.0, 1.0)
            tw = np.clip(raw[ci, cj, 2], 2.0 / side, 1.0)
            th = np.clip(raw[ci, cj, 3], 2.0 / side, 1.0)
            xc, yc = (cj + tx) * stride, (ci + ty) * stride
            w, h = tw * side, th * side
            candidates.append(
                DetBox(
                    class_id=class_id,
                    x_min=float(np.clip(xc - w / 2, 0, side)),
                    y_min=float(np.clip(yc - h / 2, 0, side)),
                    x_max=float(np.clip(xc + w / 2, 0, side)),
                    y_max=float(np.clip(yc + h / 2, 0, side)),
                    score=score,
                )
            )
    return DetPrediction(boxes=tuple(nms(candidates)))


def train_model(family: str, dataset: SceneDataset, hyper: dict | None = None, seed: int = 0) -> SurrogateModel:
    """Plain per-scene SGD on the family loss; deterministic given seed.

    Raises TrainingDivergedError when the loss goes non-finite.
    """
    if family not in FAMILY_TASK:
        raise ValueError(f"unknown family {family!r}")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    side = dataset.spec.image_side
    hp = default_hyper(family, side)
    if hyper:
        hp.update(hyper)
    task = FAMILY_TASK[family]
    predict_graph, loss_graph = build_graphs(family, side, hp["width"])
    params = {k: v.data.copy() for k, v in _init_params(loss_graph, seed).items()}
    names = param_names(loss_graph)

    if task == "segmentation":
        targets = [{"labels": Tensor(s.mask.astype(np.float64))} for s in dataset.scenes]
    else:
        wanted = [n for n in loss_graph.inputs if n not in params and n != "image"]
        targets = []
        for s in dataset.scenes:
            enc = encode_det_targets(s.boxes, side)
            targets.append({n: Tensor(enc[n]) for n in wanted})

    lr = hp["lr"]
    for epoch in range(hp["epochs"]):
        order = rng_stream(seed, "order", epoch).permutation(len(dataset))
        for i in order:
            binds = {n: Tensor(v) for n, v in params.items()}
            binds["image"] = dataset.scenes[i].image
            binds.update(targets[i])
            loss, grads = G.gradients(loss_graph, binds, "loss", names)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            for n in names:
                params[n] -= lr * grads[n].data
    return SurrogateModel(
        family=family,
        task=task,
        image_side=side,
        hyper=hp,
        params={n: Tensor(v) for n, v in params.items()},
        predict_graph=predict_graph,
        loss_graph=loss_graph,
    )


def evaluate_seg_accuracy(model: SurrogateModel, scenes) -> float:
    """Mean per-pixel accuracy against ground-truth masks."""
    accs = [
        (predict_seg(model, s.image).class_map == s.mask).mean() for s in scenes
    ]
    return float(np.mean(accs))


def evaluate_det_recall(model: SurrogateModel, scenes, tau: float = DEFAULT_TAU, iou_threshold: float = 0.5) -> float:
    """Fraction of ground-truth boxes matched by a same-class prediction
    with IoU above the threshold."""
    hit = total = 0
    for s in scenes:
        pred = predict_det(model, s.image, tau)
        for gt in s.boxes:
            total += 1
            gt_box = (gt.x_min, gt.y_min, gt.x_max, gt.y_max)
            if any(
                p.class_id == gt.class_id and iou(p.box, gt_box) > iou_threshold
                for p in pred.boxes
            ):
                hit += 1
    return hit / total if total else 0.0


def save_model(model: SurrogateModel, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arch = {
        "family": model.family,
        "task": model.task,
        "image_side": model.image_side,
        "hyper": model.hyper,
    }
    (out / "arch.json").write_text(json.dumps(arch, sort_keys=True, indent=1))
    for name, t in model.params.items():
        save_tensor(t, out / f"param_{name}.ebt")


def load_model(in_dir) -> SurrogateModel:
    src = Path(in_dir)
    arch = json.loads((src / "arch.json").read_text())
    predict_graph, loss_graph = build_graphs(
        arch["family"], arch["image_side"], arch["hyper"]["width"]
    )
    params = {}
    for path in sorted(src.glob("param_*.ebt")):
        params[path.stem.removeprefix("param_")] = load_tensor(path)
    return SurrogateModel(
        family=arch["family"],
        task=arch["task"],
        image_side=arch["image_side"],
        hyper=arch["hyper"],
        params=params,
        predict_graph=predict_graph,
        loss_graph=loss_graph,
    )
