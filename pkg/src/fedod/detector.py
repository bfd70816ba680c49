"""Tiny two-scale anchor-based single-stage detector.

Backbone: conv(3->16, k8 s4 p2)+relu -> stride-4 map, conv(16->16, k5 s2 p2)
+relu -> stride-8 map. Each scale has its own 1x1 classification head
(A*C channels, channel ``a*C + c``) and regression head (A*4 channels,
channel ``a*4 + k`` for dx, dy, dw, dh).
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import boxkit, tensornn as tnn
from .boxkit import DetectionSet

NUM_CLASSES = 5
IMAGE_SIZE = 64
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
SMOOTH_L1_BETA = 1.0 / 9.0
POS_IOU = 0.5
NEG_IOU = 0.4
PRIOR_PROB = 0.01
MAX_LOG_SCALE = float(np.log(1000.0 / 16.0))
# regression targets are scaled by these (dx, dy, dw, dh) weights, RetinaNet-style
BOX_CODER_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
DEFAULT_SCORE_THRESHOLD = 0.05
# per-model NMS before any fusion. Synthetic objects are mostly disjoint, so a
# strict cut removes the detector's offset near-duplicates at little recall cost.
DEFAULT_PREDICT_NMS = 0.1
MAX_PRE_NMS = 100


@dataclass(frozen=True)
class ArchSpec:
    num_classes: int = NUM_CLASSES
    channels: int = 16
    image_size: int = IMAGE_SIZE
    # anchor side lengths (normalized) per scale; len == anchors per cell
    anchor_sizes: tuple[tuple[float, ...], ...] = ((0.10, 0.14, 0.19), (0.20, 0.27, 0.36))
    strides: tuple[int, ...] = (4, 8)

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_sizes[0])

    def descriptor(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "channels": self.channels,
            "image_size": self.image_size,
            "anchor_sizes": [list(s) for s in self.anchor_sizes],
            "strides": list(self.strides),
        }

    @classmethod
    def from_descriptor(cls, d: dict) -> "ArchSpec":
        return cls(
            num_classes=d["num_classes"],
            channels=d["channels"],
            image_size=d["image_size"],
            anchor_sizes=tuple(tuple(s) for s in d["anchor_sizes"]),
            strides=tuple(d["strides"]),
        )

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c, a, k = self.channels, self.num_anchors, self.num_classes
        shapes = {
            "backbone.conv1.weight": (c, 3, 8, 8),
            "backbone.conv1.bias": (c,),
            "backbone.conv2.weight": (c, c, 5, 5),
            "backbone.conv2.bias": (c,),
        }
        for lvl in range(len(self.strides)):
            shapes[f"cls_head.{lvl}.weight"] = (a * k, c, 1, 1)
            shapes[f"cls_head.{lvl}.bias"] = (a * k,)
            shapes[f"reg_head.{lvl}.weight"] = (a * 4, c, 1, 1)
            shapes[f"reg_head.{lvl}.bias"] = (a * 4,)
        return shapes


class ArchitectureMismatch(ValueError):
    pass


@dataclass
class DetectorModel:
    """Parameter container; treat as a value and ``copy()`` before mutating."""

    params: dict[str, np.ndarray]
    arch: ArchSpec = field(default_factory=ArchSpec)

    @classmethod
    def init(cls, seed: int = 0, arch: ArchSpec | None = None) -> "DetectorModel":
        arch = arch or ArchSpec()
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in arch.param_shapes().items():
            if name.endswith("weight"):
                fan_in = int(np.prod(shape[1:]))
                std = np.sqrt(2.0 / fan_in) if name.startswith("backbone") else 0.01
                params[name] = rng.normal(0.0, std, size=shape)
            elif name.startswith("cls_head"):
                params[name] = np.full(shape, -np.log((1 - PRIOR_PROB) / PRIOR_PROB))
            else:
                params[name] = np.zeros(shape)
        return cls(params, arch)

    @classmethod
    def zeros(cls, arch: ArchSpec | None = None) -> "DetectorModel":
        arch = arch or ArchSpec()
        return cls({n: np.zeros(s) for n, s in arch.param_shapes().items()}, arch)

    def copy(self) -> "DetectorModel":
        return DetectorModel({k: v.copy() for k, v in self.params.items()}, self.arch)

    def parameters(self) -> list[tnn.Parameter]:
        return [tnn.Parameter(n, v) for n, v in self.params.items()]

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def to_bytes(self) -> bytes:
        return tnn.encode_tensors(self.params, {"arch": self.arch.descriptor()})

    @classmethod
    def from_bytes(cls, blob: bytes, expect: ArchSpec | None = None) -> "DetectorModel":
        tensors, desc = tnn.decode_tensors(blob)
        return cls._validated(tensors, desc, expect)

    def save(self, path) -> None:
        tnn.save_tensors(path, self.params, {"arch": self.arch.descriptor()})

    @classmethod
    def load(cls, path, expect: ArchSpec | None = None) -> "DetectorModel":
        tensors, desc = tnn.load_tensors(path)
        return cls._validated(tensors, desc, expect)

    @classmethod
    def _validated(cls, tensors, desc, expect):
        if "arch" not in desc:
            raise tnn.CheckpointError("checkpoint has no architecture descriptor")
        arch = ArchSpec.from_descriptor(desc["arch"])
        if expect is not None and arch != expect:
            raise ArchitectureMismatch(f"checkpoint arch {arch} != expected {expect}")
        shapes = arch.param_shapes()
        if list(tensors) != list(shapes) or any(tensors[n].shape != s for n, s in shapes.items()):
            raise ArchitectureMismatch("checkpoint tensors do not match the architecture descriptor")
        return cls(tensors, arch)

    def same_architecture(self, other: "DetectorModel") -> bool:
        return self.arch == other.arch and all(
            other.params.get(n) is not None and other.params[n].shape == v.shape for n, v in self.params.items()
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, DetectorModel):
            return NotImplemented
        return self.arch == other.arch and list(self.params) == list(other.params) and all(
            np.array_equal(v, other.params[k]) for k, v in self.params.items()
        )


def check_same_architecture(models) -> None:
    first = models[0]
    for m in models[1:]:
        if not first.same_architecture(m):
            raise ArchitectureMismatch("models do not share one architecture")


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ModelOutput:
    features: list[np.ndarray]
    cls_maps: list[np.ndarray]
    reg_maps: list[np.ndarray]
    cache: dict | None = field(default=None, repr=False, compare=False)


def forward(model: DetectorModel, image: np.ndarray, keep_cache: bool = False) -> ModelOutput:
    """Forward pass on [3,H,W] or [N,3,H,W]; H and W must be divisible by 8."""
    x = np.asarray(image, dtype=tnn.DTYPE)
    if x.ndim not in (3, 4) or x.shape[-3] != 3:
        raise tnn.ShapeError(f"expected [3,H,W] or [N,3,H,W] image, got {x.shape}")
    if x.shape[-1] % 8 or x.shape[-2] % 8:
        raise tnn.ShapeError(f"image spatial size {x.shape[-2:]} not divisible by 8")
    p = model.params
    c1, k1 = tnn.conv2d_forward(x, p["backbone.conv1.weight"], p["backbone.conv1.bias"], 4, 2)
    f1, m1 = tnn.relu_forward(c1)
    c2, k2 = tnn.conv2d_forward(f1, p["backbone.conv2.weight"], p["backbone.conv2.bias"], 2, 2)
    f2, m2 = tnn.relu_forward(c2)
    feats = [f1, f2]
    cls_maps, reg_maps, head_caches = [], [], []
    for lvl, f in enumerate(feats):
        cm, ck = tnn.conv2d_forward(f, p[f"cls_head.{lvl}.weight"], p[f"cls_head.{lvl}.bias"])
        rm, rk = tnn.conv2d_forward(f, p[f"reg_head.{lvl}.weight"], p[f"reg_head.{lvl}.bias"])
        cls_maps.append(cm)
        reg_maps.append(rm)
        head_caches.append((ck, rk))
    cache = {"k1": k1, "m1": m1, "k2": k2, "m2": m2, "heads": head_caches} if keep_cache else None
    return ModelOutput(feats, cls_maps, reg_maps, cache)


def backward(model: DetectorModel, out: ModelOutput, dfeat, dcls, dreg) -> dict[str, np.ndarray]:
    """Gradients for every parameter given upstream grads per scale (None = zero)."""
    if out.cache is None:
        raise ValueError("forward() must be called with keep_cache=True")
    c = out.cache
    grads = {}
    dfs = []
    for lvl, (ck, rk) in enumerate(c["heads"]):
        df = np.zeros_like(out.features[lvl]) if dfeat is None or dfeat[lvl] is None else dfeat[lvl].copy()
        g_cls = np.zeros_like(out.cls_maps[lvl]) if dcls is None or dcls[lvl] is None else dcls[lvl]
        g_reg = np.zeros_like(out.reg_maps[lvl]) if dreg is None or dreg[lvl] is None else dreg[lvl]
        dx, grads[f"cls_head.{lvl}.weight"], grads[f"cls_head.{lvl}.bias"] = tnn.conv2d_backward(g_cls, ck)
        df += dx
        dx, grads[f"reg_head.{lvl}.weight"], grads[f"reg_head.{lvl}.bias"] = tnn.conv2d_backward(g_reg, rk)
        df += dx
        dfs.append(df)
    dc2 = tnn.relu_backward(dfs[1], c["m2"])
    dx, grads["backbone.conv2.weight"], grads["backbone.conv2.bias"] = tnn.conv2d_backward(dc2, c["k2"])
    dc1 = tnn.relu_backward(dfs[0] + dx, c["m1"])
    _, grads["backbone.conv1.weight"], grads["backbone.conv1.bias"] = tnn.conv2d_backward(dc1, c["k1"], input_grad=False)
    return {n: grads[n] for n in model.params}


# ---------------------------------------------------------------------------
# anchors, box coding
# ---------------------------------------------------------------------------


def make_anchors(arch: ArchSpec, image_size: int | None = None) -> list[np.ndarray]:
    """Per-scale anchors as [H*W*A, 4] arrays in (row, col, anchor) order."""
    return [a.copy() for a in _anchors(arch, image_size or arch.image_size)]


@functools.lru_cache(maxsize=16)
def _anchors(arch: ArchSpec, size: int) -> tuple[np.ndarray, ...]:
    out = []
    for stride, sizes in zip(arch.strides, arch.anchor_sizes):
        g = size // stride
        centers = (np.arange(g) + 0.5) * stride / size
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        s = np.asarray(sizes)
        x1 = cx[:, :, None] - s / 2
        y1 = cy[:, :, None] - s / 2
        x2 = cx[:, :, None] + s / 2
        y2 = cy[:, :, None] + s / 2
        out.append(np.stack([x1, y1, x2, y2], axis=-1).reshape(-1, 4))
    return tuple(out)


def encode_boxes(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bcx = boxes[:, 0] + 0.5 * bw
    bcy = boxes[:, 1] + 0.5 * bh
    wx, wy, ww, wh = BOX_CODER_WEIGHTS
    return np.stack(
        [wx * (bcx - acx) / aw, wy * (bcy - acy) / ah, ww * np.log(bw / aw), wh * np.log(bh / ah)], axis=1
    )


def decode_offsets(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    wx, wy, ww, wh = BOX_CODER_WEIGHTS
    cx = acx + deltas[:, 0] / wx * aw
    cy = acy + deltas[:, 1] / wy * ah
    w = aw * np.exp(np.clip(deltas[:, 2] / ww, -MAX_LOG_SCALE, MAX_LOG_SCALE))
    h = ah * np.exp(np.clip(deltas[:, 3] / wh, -MAX_LOG_SCALE, MAX_LOG_SCALE))
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    return np.clip(boxes, 0.0, 1.0)


def _flatten_map(m: np.ndarray, per_anchor: int) -> np.ndarray:
    """[A*P, H, W] -> [H*W*A, P] matching make_anchors ordering."""
    ap, h, w = m.shape
    a = ap // per_anchor
    return m.reshape(a, per_anchor, h, w).transpose(2, 3, 0, 1).reshape(h * w * a, per_anchor)


def _unflatten_grad(g: np.ndarray, shape, per_anchor: int) -> np.ndarray:
    ap, h, w = shape
    a = ap // per_anchor
    return g.reshape(h, w, a, per_anchor).transpose(2, 3, 0, 1).reshape(shape)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def decode(
    output: ModelOutput, arch: ArchSpec, score_threshold: float = DEFAULT_SCORE_THRESHOLD, index: int | None = None
) -> DetectionSet:
    """Boxes for one image; ``index`` selects an image from a batched output.

    At most MAX_PRE_NMS highest-scoring anchors are decoded.
    """
    if not 0.0 <= score_threshold < 1.0:
        raise ValueError("score_threshold must be in [0, 1)")
    anchors = _anchors(arch, _input_size(output, arch))
    parts = []
    for lvl, anc in enumerate(anchors):
        cm = output.cls_maps[lvl]
        rm = output.reg_maps[lvl]
        if cm.ndim == 4:
            cm, rm = cm[index or 0], rm[index or 0]
        scores = _sigmoid(_flatten_map(cm, arch.num_classes))
        best = scores.argmax(axis=1)
        best_score = scores[np.arange(len(best)), best]
        hit = np.flatnonzero(best_score > score_threshold)
        if len(hit) == 0:
            continue
        boxes = decode_offsets(anc[hit], _flatten_map(rm, 4)[hit])
        parts.append(DetectionSet(boxes, best_score[hit], best[hit]))
    dets = DetectionSet.concat(parts)
    if len(dets) > MAX_PRE_NMS:
        dets = dets.take(boxkit.priority_order(dets)[:MAX_PRE_NMS])
    return dets


# ---------------------------------------------------------------------------
# detection loss
# ---------------------------------------------------------------------------


@dataclass
class AnchorTargets:
    """Per-image assignment over all anchors (scales concatenated)."""

    labels: np.ndarray  # class id for positives, -1 negative, -2 ignored
    reg_targets: np.ndarray  # [n_anchors, 4], valid where labels >= 0


def assign_targets(
    anchors: np.ndarray, gt: DetectionSet, pos_iou: float = POS_IOU, neg_iou: float = NEG_IOU
) -> AnchorTargets:
    """IoU matching; each ground-truth box's best anchor is also made positive."""
    n = len(anchors)
    labels = np.full(n, -1, dtype=np.int64)
    reg = np.zeros((n, 4))
    if len(gt) == 0:
        return AnchorTargets(labels, reg)
    ious = boxkit.iou_matrix(anchors, gt.boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = -2
    pos = best_iou >= pos_iou
    # low-quality matches: the best anchor per gt box
    for j in range(len(gt)):
        col = ious[:, j]
        if col.max() > 0:
            i = int(col.argmax())
            best_gt[i] = j
            pos[i] = True
    labels[pos] = gt.labels[best_gt[pos]]
    reg[pos] = encode_boxes(anchors[pos], gt.boxes[best_gt[pos]])
    return AnchorTargets(labels, reg)


def _focal_terms(logits: np.ndarray, onehot: np.ndarray, gamma=FOCAL_GAMMA, alpha=FOCAL_ALPHA):
    """Elementwise sigmoid focal loss and its derivative w.r.t. logits."""
    p = _sigmoid(logits)
    log_p = -np.logaddexp(0.0, -logits)
    log_1p = -np.logaddexp(0.0, logits)
    pos_loss = -alpha * (1 - p) ** gamma * log_p
    neg_loss = -(1 - alpha) * p**gamma * log_1p
    pos_grad = alpha * (1 - p) ** gamma * (gamma * p * log_p - (1 - p))
    neg_grad = (1 - alpha) * p**gamma * (p - gamma * (1 - p) * log_1p)
    loss = np.where(onehot, pos_loss, neg_loss)
    grad = np.where(onehot, pos_grad, neg_grad)
    return loss, grad


def _smooth_l1(diff: np.ndarray, beta=SMOOTH_L1_BETA):
    ad = np.abs(diff)
    loss = np.where(ad < beta, 0.5 * diff * diff / beta, ad - 0.5 * beta)
    grad = np.where(ad < beta, diff / beta, np.sign(diff))
    return loss, grad


def detection_loss_and_grads(output: ModelOutput, targets: list[AnchorTargets], arch: ArchSpec):
    """Focal + smooth-L1 loss over a batch; returns (loss, parts, dcls, dreg).

    Both terms are summed over the batch and divided by max(1, #positives).
    """
    num_c = arch.num_classes
    batched = output.cls_maps[0].ndim == 4
    cls_maps = output.cls_maps if batched else [m[None] for m in output.cls_maps]
    reg_maps = output.reg_maps if batched else [m[None] for m in output.reg_maps]
    n_img = cls_maps[0].shape[0]
    if len(targets) != n_img:
        raise ValueError(f"{len(targets)} target sets for {n_img} images")
    sizes = [m.shape[2] * m.shape[3] * arch.num_anchors for m in cls_maps]
    splits = np.cumsum(sizes)[:-1]
    total_pos = sum(int((t.labels >= 0).sum()) for t in targets)
    norm = max(1, total_pos)
    cls_loss = reg_loss = 0.0
    dcls = [np.zeros_like(m) for m in cls_maps]
    dreg = [np.zeros_like(m) for m in reg_maps]
    for b, tg in enumerate(targets):
        logits = np.concatenate([_flatten_map(m[b], num_c) for m in cls_maps])
        deltas = np.concatenate([_flatten_map(m[b], 4) for m in reg_maps])
        valid = tg.labels != -2
        onehot = np.zeros_like(logits, dtype=bool)
        pos = tg.labels >= 0
        onehot[np.flatnonzero(pos), tg.labels[pos]] = True
        fl, fg = _focal_terms(logits, onehot)
        fl = fl * valid[:, None]
        fg = fg * valid[:, None]
        cls_loss += fl.sum()
        sl, sg = _smooth_l1(deltas - tg.reg_targets)
        sl = sl * pos[:, None]
        sg = sg * pos[:, None]
        reg_loss += sl.sum()
        for lvl, (gc, gr) in enumerate(zip(np.split(fg, splits), np.split(sg, splits))):
            dcls[lvl][b] = _unflatten_grad(gc / norm, cls_maps[lvl].shape[1:], num_c)
            dreg[lvl][b] = _unflatten_grad(gr / norm, reg_maps[lvl].shape[1:], 4)
    if not batched:
        dcls = [g[0] for g in dcls]
        dreg = [g[0] for g in dreg]
    cls_loss /= norm
    reg_loss /= norm
    return cls_loss + reg_loss, {"cls": cls_loss, "reg": reg_loss}, dcls, dreg


def targets_for(gts: list[DetectionSet], arch: ArchSpec, image_size: int | None = None) -> list[AnchorTargets]:
    anchors = np.concatenate(_anchors(arch, image_size or arch.image_size))
    return [assign_targets(anchors, g) for g in gts]


def _input_size(output: ModelOutput, arch: ArchSpec) -> int:
    return output.features[0].shape[-1] * arch.strides[0]


def detection_loss(output: ModelOutput, ground_truth, arch: ArchSpec | None = None) -> float:
    """Scalar detection loss for one image (DetectionSet) or a batch (list)."""
    arch = arch or ArchSpec()
    gts = [ground_truth] if isinstance(ground_truth, DetectionSet) else list(ground_truth)
    return detection_loss_and_grads(output, targets_for(gts, arch, _input_size(output, arch)), arch)[0]


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    lr: float = 0.01
    batch_size: int = 8


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def batch_grads(model: DetectorModel, images, targets):
    out = forward(model, images, keep_cache=True)
    loss, parts, dcls, dreg = detection_loss_and_grads(out, targets, model.arch)
    return loss, backward(model, out, None, dcls, dreg)


def train_local(
    model: DetectorModel,
    dataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 8,
    log=None,
    start_epoch: int = 0,
):
    """Minibatch SGD on the detection loss; returns a new model.

    ``dataset`` is any object with ``images`` ([N,3,H,W]) and
    ``ground_truth`` (one DetectionSet per image) attributes. ``log``, when
    given, receives the mean training loss of every epoch. ``start_epoch``
    resumes a run: the shuffle stream skips the epochs already done, so
    training a checkpoint from epoch k to n matches one straight run to n.
    """
    n = len(dataset.images)
    if n == 0:
        raise ValueError("train_local needs a non-empty dataset")
    targets = dataset_targets(dataset, model.arch)
    trained = model.copy()
    params = trained.parameters()
    rng = np.random.default_rng(seed)
    for _ in range(start_epoch):
        rng.permutation(n)
    for _ in range(start_epoch, epochs):
        total = 0.0
        for idx in minibatches(n, batch_size, rng):
            loss, grads = batch_grads(trained, dataset.images[idx], [targets[i] for i in idx])
            for p in params:
                p.grad = grads[p.name]
            tnn.sgd_step(params, lr)
            trained.params = {p.name: p.value for p in params}
            total += loss * len(idx)
        if log is not None:
            log.append(total / n)
    return trained


def dataset_targets(dataset, arch: ArchSpec) -> list[AnchorTargets]:
    """Anchor targets for a dataset, cached on the dataset object per architecture."""
    key = (arch, dataset.images.shape[-1])
    cache = getattr(dataset, "_target_cache", None)
    if cache is not None and key in cache:
        return cache[key]
    targets = targets_for(dataset.ground_truth, arch, key[1])
    try:
        if cache is None:
            cache = {}
            object.__setattr__(dataset, "_target_cache", cache)
        cache[key] = targets
    except (AttributeError, TypeError):
        # read-only dataset objects just skip the cache
        pass
    return targets


def predict(
    model: DetectorModel,
    image,
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
    nms_threshold: float = DEFAULT_PREDICT_NMS,
) -> DetectionSet:
    out = forward(model, image)
    return boxkit.nms(decode(out, model.arch, score_threshold), nms_threshold)


def predict_batch(
    model: DetectorModel,
    images,
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
    nms_threshold: float = DEFAULT_PREDICT_NMS,
    chunk: int = 100,
) -> list[DetectionSet]:
    results = []
    for start in range(0, len(images), chunk):
        out = forward(model, images[start : start + chunk])
        for b in range(out.cls_maps[0].shape[0]):
            results.append(boxkit.nms(decode(out, model.arch, score_threshold, index=b), nms_threshold))
    return results
