"""Datasets: a seeded synthetic fine-grained generator, manifest files, and preprocessing."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndtensor as nt
from .attention import identity_coords
from .fileio import FormatError, read_jsonl, write_jsonl

MANIFEST_SCHEMA = "cascadehash.manifest/1"
SPLITS = ("train", "test", "retrieval")
IMAGE_SIZE = 64
EVAL_RESIZE = 72


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator parameters.

    A class is three binary part attributes: stripe period on the body, stripe
    orientation, and appendage hue.  Classes share layout and colour
    statistics and differ only in these local parts.  Body shape (disc or
    square), pose, scale, illumination, background and hue vary per image.
    """

    num_classes: int = 8
    train_per_class: int = 50
    test_per_class: int = 50
    retrieval_per_class: int = 0
    seed: int = 0
    size: int = IMAGE_SIZE
    body_radius: tuple = (14.0, 19.0)
    appendage_offset: float = 1.0  # centre distance in body radii
    appendage_radius: float = 9.0
    stroke_width: tuple = (2.0, 3.5)  # stripe half-period in pixels, fine / coarse
    hue_jitter: float = 0.08
    illumination: tuple = (0.55, 1.45)
    noise: float = 0.04

    def __post_init__(self):
        if not 2 <= self.num_classes <= 8:
            raise ValueError("the synthetic generator supports 2..8 classes")
        if self.train_per_class < 1:
            raise ValueError("train_per_class must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["body_radius"] = list(self.body_radius)
        d["illumination"] = list(self.illumination)
        d["stroke_width"] = list(self.stroke_width)
        return d


def _class_attributes(c: int) -> tuple[int, int, int]:
    """(stripe period, stripe orientation, appendage hue) bits of class ``c``."""
    return (c >> 2) & 1, (c >> 1) & 1, c & 1


def render_synthetic(spec: SyntheticSpec, cls: int, rng: np.random.Generator) -> np.ndarray:
    """One 3 x S x S image in [0, 1]."""
    s = spec.size
    period, stripes, hue = _class_attributes(cls)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)

    # smooth random background
    coarse = rng.uniform(0.2, 0.6, (3, 4, 4))
    bg = nt.grid_sample(nt.Tensor(coarse[None]), nt.Tensor(identity_coords(s, s)[None])).data[0]

    r = rng.uniform(*spec.body_radius)
    # keep the far edge of the appendage inside the frame for every angle
    reach = min(r * spec.appendage_offset + spec.appendage_radius, s / 2 - 1)
    cy, cx = rng.uniform(reach, s - reach, size=2)
    theta = rng.uniform(0, 2 * np.pi)
    dy, dx = yy - cy, xx - cx
    # rotate body coordinates so squares and stripes are not axis aligned in pixel space
    rot = rng.uniform(-0.35, 0.35)
    u = np.cos(rot) * dx + np.sin(rot) * dy
    v = -np.sin(rot) * dx + np.cos(rot) * dy
    if rng.random() < 0.5:
        body = np.sqrt(u * u + v * v) <= r
    else:
        body = np.maximum(np.abs(u), np.abs(v)) <= r * 0.88
    phase = rng.uniform(0, 2 * np.pi)
    coord = v if stripes == 0 else u
    stripe = np.sin(np.pi * coord / spec.stroke_width[period] + phase) > 0

    base = np.array([0.55, 0.42, 0.30]) + rng.normal(0, spec.hue_jitter, 3)
    img = bg.copy()
    for ch in range(3):
        tone = np.where(stripe, base[ch] * 1.25, base[ch] * 0.65)
        img[ch] = np.where(body, tone, img[ch])

    ay = cy + np.sin(theta) * r * spec.appendage_offset
    ax = cx + np.cos(theta) * r * spec.appendage_offset
    app = (yy - ay) ** 2 + (xx - ax) ** 2 <= spec.appendage_radius**2
    warm = np.array([0.85, 0.45, 0.25]) if hue == 0 else np.array([0.35, 0.55, 0.85])
    app_col = np.clip(warm + rng.normal(0, spec.hue_jitter, 3), 0, 1)
    for ch in range(3):
        img[ch] = np.where(app, app_col[ch], img[ch])

    gain = rng.uniform(*spec.illumination)
    offset = rng.uniform(-0.15, 0.15)
    img = img * gain + offset + rng.normal(0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass
class Dataset:
    images: np.ndarray  # N x 3 x H x W float64 in [0, 1]
    labels: np.ndarray  # N int64
    splits: np.ndarray  # N str
    num_classes: int
    meta: dict = field(default_factory=dict)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.images[idx], self.labels[idx]


def generate_synthetic(spec: SyntheticSpec) -> tuple[np.ndarray, list[dict]]:
    """Return ``(store, records)``: uint8 N x 3 x S x S images and manifest records."""
    per_split = [("train", spec.train_per_class), ("test", spec.test_per_class), ("retrieval", spec.retrieval_per_class)]
    images, records = [], []
    for split_id, (split, count) in enumerate(per_split):
        for cls in range(spec.num_classes):
            for j in range(count):
                rng = np.random.default_rng([spec.seed, split_id, cls, j])
                img = render_synthetic(spec, cls, rng)
                records.append({"id": len(records), "class": cls, "split": split, "source": f"store:{len(images)}"})
                images.append(np.rint(img * 255.0).astype(np.uint8))
    return np.stack(images), records


def synthetic_dataset(spec: SyntheticSpec = SyntheticSpec()) -> Dataset:
    """In-memory equivalent of ``gen_data`` followed by ``load_manifest``."""
    store, records = generate_synthetic(spec)
    return Dataset(
        store.astype(np.float64) / 255.0,
        np.array([r["class"] for r in records], dtype=np.int64),
        np.array([r["split"] for r in records]),
        spec.num_classes,
        {"synthetic": spec.to_dict()},
    )


def store_checksum(store: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(json.dumps([list(store.shape), store.dtype.str]).encode())
    h.update(np.ascontiguousarray(store).tobytes())
    return "sha256:" + h.hexdigest()


def write_dataset(out_dir, store: np.ndarray, records: list[dict], num_classes: int, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "images.npy", store, allow_pickle=False)
    header = {
        "schema": MANIFEST_SCHEMA,
        "num_classes": num_classes,
        "store": "images.npy",
        "checksum": store_checksum(store),
        "count": len(records),
    }
    header.update(extra or {})
    path = out / "manifest.jsonl"
    write_jsonl(path, [header] + records)
    return path


def gen_data(out_dir, spec: SyntheticSpec = SyntheticSpec()) -> Path:
    store, records = generate_synthetic(spec)
    return write_dataset(out_dir, store, records, spec.num_classes, {"synthetic": spec.to_dict()})


def _load_image_file(path: Path, size: int) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB").resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    return arr.transpose(2, 0, 1)


def load_manifest(path, image_size: int = IMAGE_SIZE) -> Dataset:
    """Read a manifest and its images, verifying the store checksum."""
    path = Path(path)
    rows = read_jsonl(path)
    if not rows or rows[0].get("schema") != MANIFEST_SCHEMA:
        raise FormatError(f"schema: expected {MANIFEST_SCHEMA!r} on the first line")
    header, records = rows[0], rows[1:]
    l = header.get("num_classes")
    if not isinstance(l, int) or l < 2:
        raise FormatError("num_classes: must be an integer >= 2")
    if header.get("count", len(records)) != len(records):
        raise FormatError(f"count: header says {header['count']}, found {len(records)} records")
    store = None
    if "store" in header:
        store = np.load(path.parent / header["store"], allow_pickle=False)
        if store_checksum(store) != header.get("checksum"):
            raise FormatError("checksum: image store does not match the manifest")
    images, labels, splits = [], [], []
    for i, rec in enumerate(records):
        for key in ("class", "split", "source"):
            if key not in rec:
                raise FormatError(f"record {i}: missing field {key!r}")
        cls, split, src = rec["class"], rec["split"], rec["source"]
        if not isinstance(cls, int) or not 0 <= cls < l:
            raise FormatError(f"record {i}: class {cls!r} outside [0, {l})")
        if split not in SPLITS:
            raise FormatError(f"record {i}: unknown split {split!r}")
        if src.startswith("store:"):
            if store is None:
                raise FormatError(f"record {i}: store reference without a store")
            images.append(store[int(src[6:])])
        else:
            images.append(_load_image_file(path.parent / src, image_size))
        labels.append(cls)
        splits.append(split)
    if set(labels) != set(range(l)):
        raise FormatError(f"class: ids are not dense in [0, {l})")
    imgs = np.stack(images).astype(np.float64) / 255.0
    return Dataset(imgs, np.asarray(labels, dtype=np.int64), np.asarray(splits), l, header)


def folder_manifest(root, out_path, test_fraction: float = 0.5, seed: int = 0) -> Path:
    """Build a manifest for ``root/<class_name>/*.{png,jpg,jpeg}`` with a seeded split."""
    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    rng = np.random.default_rng(seed)
    records = []
    for cid, name in enumerate(classes):
        files = sorted(f for f in (root / name).iterdir() if f.suffix.lower() in {".png", ".jpg", ".jpeg"})
        test = set(rng.permutation(len(files))[: int(round(len(files) * test_fraction))].tolist())
        for j, f in enumerate(files):
            split = "test" if j in test else "train"
            src = os.path.relpath(f.resolve(), Path(out_path).resolve().parent)
            records.append({"id": len(records), "class": cid, "split": split, "source": src})
    header = {"schema": MANIFEST_SCHEMA, "num_classes": len(classes), "count": len(records), "class_names": classes}
    write_jsonl(out_path, [header] + records)
    return Path(out_path)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def _crop_coords(size: int, top: float, left: float, side: float, out: int) -> np.ndarray:
    """Grid sampling a square window (pixel units, align-corners) at ``out`` x ``out``."""
    to_norm = lambda p: 2.0 * p / (size - 1) - 1.0  # noqa: E731
    ys = to_norm(np.linspace(top, top + side - 1, out))
    xs = to_norm(np.linspace(left, left + side - 1, out))
    return np.stack(np.meshgrid(xs, ys), axis=-1)


@dataclass(frozen=True)
class AugmentDraw:
    scale: float  # crop area fraction
    top: float
    left: float
    flip: bool


def augment_draw(seed: int, sample_id: int, epoch: int, size: int = IMAGE_SIZE, scale=(0.7, 1.0)) -> AugmentDraw:
    """Augmentation randomness for one (seed, sample, epoch) triple."""
    rng = np.random.default_rng([seed, sample_id, epoch, 0xA06])
    area = rng.uniform(*scale)
    side = np.sqrt(area) * size
    top = rng.uniform(0.0, size - side)
    left = rng.uniform(0.0, size - side)
    return AugmentDraw(float(area), float(top), float(left), bool(rng.random() < 0.5))


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1].copy()


def augment_batch(images: np.ndarray, draws: list[AugmentDraw]) -> np.ndarray:
    """Random-area square crop resized back to full size, then optional horizontal flip."""
    n, _, h, w = images.shape
    coords = []
    for d in draws:
        side = np.sqrt(d.scale) * h
        g = _crop_coords(h, d.top, d.left, side, h)
        if d.flip:
            g = g[:, ::-1].copy()
        coords.append(g)
    return nt.grid_sample(nt.Tensor(images), nt.Tensor(np.stack(coords))).data


def augment_train(image: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    return augment_batch(np.asarray(image, dtype=np.float64)[None], [draw])[0]


def preprocess_eval(images: np.ndarray, resize: int = EVAL_RESIZE, out: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize to ``resize`` x ``resize`` then take the centred ``out`` x ``out`` window."""
    imgs = np.asarray(images, dtype=np.float64)
    single = imgs.ndim == 3
    if single:
        imgs = imgs[None]
    n = imgs.shape[0]
    if imgs.shape[2:] != (resize, resize):
        grid = np.broadcast_to(identity_coords(resize, resize), (n, resize, resize, 2)).copy()
        imgs = nt.grid_sample(nt.Tensor(imgs), nt.Tensor(grid)).data
    o = (resize - out) // 2
    res = np.ascontiguousarray(imgs[:, :, o : o + out, o : o + out])
    return res[0] if single else res


def nearest_centroid_accuracy(train_x, train_y, test_x, test_y) -> float:
    """Pixel-space nearest class-mean classifier; a difficulty probe for synthetic data."""
    tx = train_x.reshape(len(train_x), -1)
    qx = test_x.reshape(len(test_x), -1)
    classes = np.unique(train_y)
    cent = np.stack([tx[train_y == c].mean(axis=0) for c in classes])
    d = ((qx[:, None, :] - cent[None]) ** 2).sum(-1)
    return float(np.mean(classes[d.argmin(axis=1)] == test_y))


def class_spread(images, labels) -> tuple[float, float]:
    """``(between, within)`` per-pixel spreads.

    ``between`` is the mean squared distance between two class-mean images,
    averaged over class pairs and pixels; ``within`` is the per-pixel variance
    inside a class, averaged over classes and pixels.
    """
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    means = np.stack([x[labels == c].mean(axis=0) for c in classes])
    within = float(np.mean([x[labels == c].var(axis=0).mean() for c in classes]))
    diffs = [np.mean((means[i] - means[j]) ** 2) for i in range(len(classes)) for j in range(i + 1, len(classes))]
    return float(np.mean(diffs)), within
