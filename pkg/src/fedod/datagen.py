"""Seedable synthetic multi-domain detection benchmark.

One large server domain and four small client domains. Clients 1-2 share a
domain, clients 3-4 share another; trucks (3) and motorcycles (4) only
appear on clients 3-4.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxkit import DetectionSet, iou_matrix

CLASS_NAMES = ("car", "pedestrian", "rider", "truck", "motorcycle")
IMAGE_SIZE = 64
MAX_PLACEMENT_TRIES = 100
MAX_PAIR_IOU = 0.3
# IoU alone lets a small box hide inside a big one; cap the covered fraction too
MAX_COVERED_FRACTION = 0.5
CONTRAST_FLOOR = 0.2

# per-class fill colour (RGB) and texture (kind, period)
CLASS_STYLE = {
    0: ((0.95, 0.25, 0.20), ("hstripes", 4)),
    1: ((0.20, 0.90, 0.30), ("vstripes", 4)),
    2: ((0.25, 0.35, 0.95), ("checker", 4)),
    3: ((0.95, 0.85, 0.15), ("solid", 0)),
    4: ((0.90, 0.30, 0.90), ("dots", 3)),
}


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    background_mean: tuple[float, float, float]
    background_noise: float
    class_priors: dict[int, float]
    object_count_range: tuple[int, int] = (1, 4)
    size_range: tuple[float, float] = (0.12, 0.32)
    # scales object colours toward the background; models domain appearance shift
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    texture_strength: float = 0.35

    def __post_init__(self):
        if not self.class_priors:
            raise ValueError("class palette must be non-empty")
        lo, hi = self.size_range
        if not 0 < lo <= hi <= 0.5:
            raise ValueError(f"size_range {self.size_range} must lie in (0, 0.5]")

    @property
    def class_palette(self) -> tuple[int, ...]:
        return tuple(sorted(self.class_priors))

    def to_dict(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "background_mean": list(self.background_mean),
            "background_noise": self.background_noise,
            "class_priors": {str(k): v for k, v in sorted(self.class_priors.items())},
            "object_count_range": list(self.object_count_range),
            "size_range": list(self.size_range),
            "tint": list(self.tint),
            "texture_strength": self.texture_strength,
        }


SERVER_DOMAIN = DomainSpec(
    "server",
    background_mean=(0.20, 0.22, 0.18),
    background_noise=0.05,
    class_priors={0: 0.45, 1: 0.35, 2: 0.20},
)
CITY_DOMAIN = DomainSpec(
    "city",
    background_mean=(0.62, 0.60, 0.55),
    background_noise=0.08,
    class_priors={0: 0.40, 1: 0.35, 2: 0.25},
    tint=(0.75, 0.8, 0.9),
    texture_strength=0.5,
)
HARBOR_DOMAIN = DomainSpec(
    "harbor",
    background_mean=(0.35, 0.45, 0.50),
    background_noise=0.06,
    class_priors={0: 0.25, 1: 0.15, 2: 0.10, 3: 0.25, 4: 0.25},
    tint=(0.85, 0.8, 0.75),
)


@dataclass
class Scene:
    image: np.ndarray  # [3, 64, 64]
    ground_truth: DetectionSet
    domain_id: str


@dataclass
class Split:
    """A list of scenes stored column-wise for batched training."""

    name: str
    images: np.ndarray  # [N, 3, H, W]
    ground_truth: list[DetectionSet]
    domain_id: str
    _target_cache: dict | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.images)

    def class_histogram(self, num_classes: int = len(CLASS_NAMES)) -> np.ndarray:
        counts = np.zeros(num_classes, dtype=np.int64)
        for g in self.ground_truth:
            counts += np.bincount(g.labels, minlength=num_classes)[:num_classes]
        return counts

    def checksum(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(_boxes_csv(self.ground_truth).encode())
        return h.hexdigest()

    def subset(self, idx) -> "Split":
        idx = list(idx)
        return Split(self.name, self.images[idx], [self.ground_truth[i] for i in idx], self.domain_id)


def _texture(kind: str, period: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "hstripes":
        return ((yy // (period // 2)) % 2).astype(float)
    if kind == "vstripes":
        return ((xx // (period // 2)) % 2).astype(float)
    if kind == "checker":
        return (((yy // (period // 2)) + (xx // (period // 2))) % 2).astype(float)
    if kind == "dots":
        return ((yy % period == 1) & (xx % period == 1)).astype(float)
    return np.zeros((h, w))


def _placement_ok(box, placed: np.ndarray) -> bool:
    if iou_matrix(np.array([box]), placed).max() > MAX_PAIR_IOU:
        return False
    iw = np.clip(np.minimum(box[2], placed[:, 2]) - np.maximum(box[0], placed[:, 0]), 0, None)
    ih = np.clip(np.minimum(box[3], placed[:, 3]) - np.maximum(box[1], placed[:, 1]), 0, None)
    smaller = np.minimum((box[2] - box[0]) * (box[3] - box[1]), (placed[:, 2] - placed[:, 0]) * (placed[:, 3] - placed[:, 1]))
    return bool((iw * ih <= MAX_COVERED_FRACTION * smaller).all())


def render_scene(spec: DomainSpec, rng: np.random.Generator, size: int = IMAGE_SIZE) -> Scene:
    """Noise background plus textured rectangles; placement keeps pairwise IoU <= 0.3."""
    bg = np.asarray(spec.background_mean)[:, None, None]
    image = bg + rng.normal(0.0, spec.background_noise, size=(3, size, size))
    classes = np.array(spec.class_palette)
    priors = np.array([spec.class_priors[c] for c in classes], dtype=float)
    priors /= priors.sum()
    lo_n, hi_n = spec.object_count_range
    k = int(rng.integers(lo_n, hi_n + 1))
    placed: list[tuple[float, float, float, float]] = []
    labels: list[int] = []
    for _ in range(k):
        cls = int(rng.choice(classes, p=priors))
        for _try in range(MAX_PLACEMENT_TRIES):
            w = rng.uniform(*spec.size_range)
            h = float(np.clip(w * rng.uniform(0.75, 1.33), *spec.size_range))
            # snap to the pixel grid so ground truth is exact
            pw, ph = max(2, round(w * size)), max(2, round(h * size))
            px = int(rng.integers(0, size - pw + 1))
            py = int(rng.integers(0, size - ph + 1))
            box = (px / size, py / size, (px + pw) / size, (py + ph) / size)
            if not placed or _placement_ok(box, np.array(placed)):
                break
        else:
            continue
        colour, (kind, period) = CLASS_STYLE[cls]
        fill = np.asarray(colour) * np.asarray(spec.tint)
        if np.abs(fill - spec.background_mean).max() < CONTRAST_FLOOR:
            # too close to the background in every channel: invert the whole colour
            fill = 1.0 - fill
        tex = _texture(kind, period, ph, pw)
        patch = fill[:, None, None] * (1.0 - spec.texture_strength * tex)[None]
        patch = patch + rng.normal(0.0, spec.background_noise * 0.5, size=patch.shape)
        image[:, py : py + ph, px : px + pw] = patch
        placed.append(box)
        labels.append(cls)
    gt = DetectionSet(np.array(placed).reshape(-1, 4), np.ones(len(labels)), np.array(labels, dtype=np.int64))
    return Scene(np.clip(image, 0.0, 1.0), gt, spec.domain_id)


def render_split(name: str, spec: DomainSpec, n: int, seed) -> Split:
    rng = np.random.default_rng(seed)
    scenes = [render_scene(spec, rng) for _ in range(n)]
    images = np.stack([s.image for s in scenes]) if scenes else np.zeros((0, 3, IMAGE_SIZE, IMAGE_SIZE))
    return Split(name, images, [s.ground_truth for s in scenes], spec.domain_id)


@dataclass
class Benchmark:
    server_train: Split
    server_test: Split
    client_train: dict[int, Split]
    client_test: dict[int, Split]
    domains: dict[str, DomainSpec]
    seed: int

    @property
    def client_ids(self) -> list[int]:
        return sorted(self.client_train)

    def union_test(self) -> Split:
        parts = [self.server_test] + [self.client_test[c] for c in self.client_ids]
        return Split(
            "union_test",
            np.concatenate([p.images for p in parts]),
            [g for p in parts for g in p.ground_truth],
            "union",
        )

    def splits(self) -> dict[str, Split]:
        out = {"server_train": self.server_train, "server_test": self.server_test}
        for c in self.client_ids:
            out[f"client_{c}_train"] = self.client_train[c]
            out[f"client_{c}_test"] = self.client_test[c]
        return out


CLIENT_DOMAINS = {1: CITY_DOMAIN, 2: CITY_DOMAIN, 3: HARBOR_DOMAIN, 4: HARBOR_DOMAIN}


def build_benchmark(
    seed: int = 0,
    server_train: int = 2000,
    server_test: int = 400,
    client_train: int = 150,
    client_test: int = 100,
    num_clients: int = 4,
) -> Benchmark:
    """Render every split from child seeds of one master seed."""
    if num_clients != 4:
        raise ValueError("the benchmark layout defines exactly 4 clients")
    children = np.random.SeedSequence(seed).spawn(2 + 2 * num_clients)
    clients_tr, clients_te = {}, {}
    for i, c in enumerate(range(1, num_clients + 1)):
        spec = CLIENT_DOMAINS[c]
        clients_tr[c] = render_split(f"client_{c}_train", spec, client_train, children[2 + 2 * i])
        clients_te[c] = render_split(f"client_{c}_test", spec, client_test, children[3 + 2 * i])
    return Benchmark(
        server_train=render_split("server_train", SERVER_DOMAIN, server_train, children[0]),
        server_test=render_split("server_test", SERVER_DOMAIN, server_test, children[1]),
        client_train=clients_tr,
        client_test=clients_te,
        domains={d.domain_id: d for d in (SERVER_DOMAIN, CITY_DOMAIN, HARBOR_DOMAIN)},
        seed=seed,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _boxes_csv(gts: list[DetectionSet]) -> str:
    lines = ["image_id,class_id,x1,y1,x2,y2"]
    for i, g in enumerate(gts):
        for b, lab in zip(g.boxes, g.labels):
            lines.append(f"{i},{int(lab)}," + ",".join(repr(float(v)) for v in b))
    return "\n".join(lines) + "\n"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_split(split: Split, directory: Path) -> dict:
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "images.npy", np.ascontiguousarray(split.images, dtype="<f8"))
    (directory / "boxes.csv").write_text(_boxes_csv(split.ground_truth))
    return {
        "count": len(split),
        "domain_id": split.domain_id,
        "images_sha256": _sha256(directory / "images.npy"),
        "boxes_sha256": _sha256(directory / "boxes.csv"),
    }


def load_split(name: str, directory: Path, domain_id: str, expected: dict | None = None) -> Split:
    images_path, boxes_path = directory / "images.npy", directory / "boxes.csv"
    if expected is not None:
        for path, key in ((images_path, "images_sha256"), (boxes_path, "boxes_sha256")):
            if not path.exists():
                raise FileNotFoundError(f"missing split file {path}")
            if _sha256(path) != expected[key]:
                raise ValueError(f"checksum mismatch for {path}")
    images = np.load(images_path)
    per_image: list[list] = [[] for _ in range(len(images))]
    with boxes_path.open() as fh:
        for row in csv.DictReader(fh):
            per_image[int(row["image_id"])].append(
                (int(row["class_id"]), float(row["x1"]), float(row["y1"]), float(row["x2"]), float(row["y2"]))
            )
    gts = []
    for rows in per_image:
        arr = np.array([r[1:] for r in rows]).reshape(-1, 4)
        gts.append(DetectionSet(arr, np.ones(len(rows)), np.array([r[0] for r in rows], dtype=np.int64)))
    return Split(name, images, gts, domain_id)


def save_benchmark(bench: Benchmark, directory) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "seed": bench.seed,
        "classes": list(CLASS_NAMES),
        "domains": {k: v.to_dict() for k, v in sorted(bench.domains.items())},
        "client_domains": {str(c): CLIENT_DOMAINS[c].domain_id for c in bench.client_ids},
        "splits": {name: save_split(split, directory / name) for name, split in bench.splits().items()},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_benchmark(directory) -> Benchmark:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    splits = {
        name: load_split(name, directory / name, meta["domain_id"], meta) for name, meta in manifest["splits"].items()
    }
    ids = sorted(int(n.split("_")[1]) for n in splits if n.startswith("client_") and n.endswith("_train"))
    domains = {
        k: DomainSpec(
            v["domain_id"],
            tuple(v["background_mean"]),
            v["background_noise"],
            {int(c): p for c, p in v["class_priors"].items()},
            tuple(v["object_count_range"]),
            tuple(v["size_range"]),
            tuple(v["tint"]),
            v["texture_strength"],
        )
        for k, v in manifest["domains"].items()
    }
    return Benchmark(
        server_train=splits["server_train"],
        server_test=splits["server_test"],
        client_train={c: splits[f"client_{c}_train"] for c in ids},
        client_test={c: splits[f"client_{c}_test"] for c in ids},
        domains=domains,
        seed=manifest["seed"],
    )
