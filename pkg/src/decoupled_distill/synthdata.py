"""Synthetic shape scenes, day/night domain shift, and the on-disk dataset format.

Randomness comes from numpy's Philox-4x64 counter-based generator. Sample ``i``
of a split is drawn from key ``seed`` with counter ``[0, 0, split_tag, i]``,
so every sample is reproducible on its own and splits never share a stream.

On-disk layout of one split directory::

    manifest.json              {"format", "size", "count", "seed", "domain",
                                "labeled", "source", "ids"}
    images.bin                 little-endian float32, C order [count, 3, size, size]
    annotations.jsonl          one {"id", "boxes": [{"cx","cy","w","h","class"[,"score"]}]}
                               per line, in manifest order (labeled splits only)
    hidden_annotations.jsonl   same format; ground truth of unlabeled splits
"""
from __future__ import annotations

import contextlib
import json
import os
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .geometry import BBox, iou

FORMAT_VERSION = 1
SHAPES = ("circle", "triangle", "square", "diamond")


class DatasetFormatError(ValueError):
    def __init__(self, path, offset: int, msg: str):
        super().__init__(f"{path}: offset {offset}: {msg}")
        self.path = Path(path)
        self.offset = offset


# ---------------------------------------------------------------- access audit

class AccessAudit:
    """Records every read of ground-truth annotations with the active stage."""

    def __init__(self):
        self.entries: list[tuple[str, str, str, int]] = []
        self._stage = "idle"

    @contextlib.contextmanager
    def stage(self, name: str):
        prev, self._stage = self._stage, name
        try:
            yield self
        finally:
            self._stage = prev

    def record(self, dataset: str, kind: str, count: int):
        self.entries.append((self._stage, dataset, kind, count))

    def gt_reads(self, stage: str | None = None) -> list[tuple[str, str, str, int]]:
        return [e for e in self.entries
                if e[2] in ("ground_truth", "hidden") and (stage is None or e[0] == stage)]

    def lines(self) -> list[str]:
        return [f"stage={s} dataset={d} kind={k} count={n}" for s, d, k, n in self.entries]

    def write(self, path):
        Path(path).write_text("".join(line + "\n" for line in self.lines()))


# ---------------------------------------------------------------- types

@dataclass
class SceneConfig:
    image_size: int = 64
    shapes: tuple[str, ...] = ("circle", "triangle")
    objects: tuple[int, int] = (1, 4)
    size_range: tuple[float, float] = (0.15, 0.45)
    noise_amplitude: float = 0.08
    seed: int = 0
    max_overlap: float = 0.3

    def __post_init__(self):
        lo, hi = self.objects
        if lo < 0 or hi < lo:
            raise ValueError(f"bad objects range {self.objects}")
        s0, s1 = self.size_range
        if not 0 < s0 <= s1 <= 1:
            raise ValueError(f"size range must lie in (0, 1], got {self.size_range}")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown or not self.shapes:
            raise ValueError(f"unknown shapes {sorted(unknown)}")

    @property
    def num_classes(self) -> int:
        return len(self.shapes)


@dataclass
class Sample:
    image: np.ndarray
    annotations: list[BBox]
    id: str
    domain_tag: str = "day"


@dataclass
class Dataset:
    """Images plus (possibly hidden) box annotations for one split.

    ``source`` is ``"ground_truth"`` or ``"pseudo"``. Reads of ground-truth
    boxes, visible or hidden, are reported to ``audit`` when one is attached.
    """
    images: np.ndarray
    ids: list[str]
    boxes: list[list[BBox]] | None = None
    hidden: list[list[BBox]] | None = None
    domain: str = "day"
    seed: int = 0
    source: str = "ground_truth"
    name: str = "dataset"
    audit: AccessAudit | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if len(self.images) != len(self.ids):
            raise ValueError("images and ids differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate sample ids")

    def __len__(self):
        return len(self.ids)

    @property
    def labeled(self) -> bool:
        return self.boxes is not None

    @property
    def image_size(self) -> int:
        return self.images.shape[-1] if len(self.images.shape) == 4 else 0

    def batch(self, indices) -> np.ndarray:
        return self.images[np.asarray(indices, dtype=np.intp)].astype(np.float64)

    def _log(self, kind: str, count: int):
        if self.audit is not None:
            self.audit.record(self.name, kind, count)

    def annotations(self, indices=None) -> list[list[BBox]]:
        if self.boxes is None:
            raise ValueError(f"dataset {self.name!r} is unlabeled")
        sel = range(len(self)) if indices is None else indices
        out = [self.boxes[i] for i in sel]
        self._log(self.source, len(out))
        return out

    def hidden_annotations(self) -> list[list[BBox]]:
        if self.hidden is None:
            raise ValueError(f"dataset {self.name!r} has no hidden annotations")
        self._log("hidden", len(self.hidden))
        return list(self.hidden)

    def ground_truth(self) -> list[list[BBox]]:
        """Visible boxes if labeled, else the hidden ones (for evaluation)."""
        return self.annotations() if self.labeled else self.hidden_annotations()

    def __getitem__(self, i: int) -> Sample:
        ann = self.annotations([i])[0] if self.labeled else []
        return Sample(self.images[i].astype(np.float64), list(ann), self.ids[i], self.domain)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, indices, name: str | None = None) -> Dataset:
        idx = [int(i) for i in indices]
        return replace(
            self,
            images=self.images[idx],
            ids=[self.ids[i] for i in idx],
            boxes=None if self.boxes is None else [self.boxes[i] for i in idx],
            hidden=None if self.hidden is None else [self.hidden[i] for i in idx],
            name=name or self.name,
        )

    def unlabeled(self, name: str | None = None) -> Dataset:
        """Same images with visible labels moved to the hidden slot."""
        hidden = self.boxes if self.boxes is not None else self.hidden
        return replace(self, boxes=None, hidden=hidden, name=name or self.name)


# ---------------------------------------------------------------- generation

def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    tag = zlib.crc32(split.encode())
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, tag, index]))


def _shape_mask(kind: str, cx: float, cy: float, size: float, angle: float,
                xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, tuple[float, float, float, float]]:
    """Pixel mask and exact (x0, y0, x1, y1) extent of a filled shape."""
    r = size / 2
    if kind == "circle":
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        return mask, (cx - r, cy - r, cx + r, cy + r)
    if kind == "square":
        mask = (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r)
        return mask, (cx - r, cy - r, cx + r, cy + r)
    if kind == "diamond":
        mask = np.abs(xs - cx) + np.abs(ys - cy) <= r
        return mask, (cx - r, cy - r, cx + r, cy + r)
    # triangle: equilateral, circumradius r, rotated by angle
    t = angle + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    vx, vy = cx + r * np.cos(t), cy + r * np.sin(t)
    mask = np.ones_like(xs, dtype=bool)
    for a in range(3):
        b = (a + 1) % 3
        cross = (vx[b] - vx[a]) * (ys - vy[a]) - (vy[b] - vy[a]) * (xs - vx[a])
        mask &= cross >= 0
    return mask, (vx.min(), vy.min(), vx.max(), vy.max())


def _background(rng: np.random.Generator, size: int, amp: float) -> tuple[np.ndarray, np.ndarray]:
    base = rng.uniform(0.25, 0.75, size=3)
    coarse = rng.uniform(-1.0, 1.0, size=(3, 5, 5))
    # bilinear upsample of a coarse grid gives a smooth texture
    pos = np.linspace(0, 4, size)
    i0 = np.minimum(np.floor(pos).astype(int), 3)
    f = pos - i0
    rowsmooth = coarse[:, i0, :] * (1 - f)[None, :, None] + coarse[:, i0 + 1, :] * f[None, :, None]
    smooth = rowsmooth[:, :, i0] * (1 - f)[None, None, :] + rowsmooth[:, :, i0 + 1] * f[None, None, :]
    fine = rng.uniform(-1.0, 1.0, size=(3, size, size))
    img = base[:, None, None] + amp * (1.5 * smooth + 0.5 * fine)
    return img, base


def render_sample(cfg: SceneConfig, index: int, split: str = "train"):
    """Returns (image float32 [3,S,S], boxes, per-object pixel masks)."""
    rng = sample_rng(cfg.seed, split, index)
    s = cfg.image_size
    img, base = _background(rng, s, cfg.noise_amplitude)
    coords = (np.arange(s) + 0.5) / s
    xs, ys = np.meshgrid(coords, coords)
    n_obj = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))
    boxes: list[BBox] = []
    masks: list[np.ndarray] = []
    occupied = np.zeros((s, s), dtype=bool)
    for _ in range(n_obj):
        cls = int(rng.integers(0, cfg.num_classes))
        kind = cfg.shapes[cls]
        for _attempt in range(100):
            size = float(rng.uniform(*cfg.size_range))
            angle = float(rng.uniform(0, 2 * np.pi))
            cx = float(rng.uniform(size / 2, 1 - size / 2))
            cy = float(rng.uniform(size / 2, 1 - size / 2))
            mask, _ = _shape_mask(kind, cx, cy, size, angle, xs, ys)
            if not mask.any():
                continue
            # label = pixel extent of the drawn shape
            rows, cols = np.nonzero(mask)
            x0, x1 = cols.min() / s, (cols.max() + 1) / s
            y0, y1 = rows.min() / s, (rows.max() + 1) / s
            box = BBox((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, cls, 1.0)
            # shapes may not touch: every label stays fully visible
            if (not (mask & occupied).any()
                    and all(iou(box, other) <= cfg.max_overlap for other in boxes)):
                break
        else:
            continue
        while True:
            color = rng.uniform(0.0, 1.0, size=3)
            if np.abs(color - base).mean() > 0.3:
                break
        img[:, mask] = color[:, None]
        occupied |= mask
        boxes.append(box)
        masks.append(mask)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img, boxes, masks


def gen_dataset(cfg: SceneConfig, n: int, labeled: bool = True, split: str = "train",
                domain: str = "day") -> Dataset:
    if n < 0:
        raise ValueError("n must be >= 0")
    s = cfg.image_size
    images = np.zeros((n, 3, s, s), dtype=np.float32)
    boxes = []
    for i in range(n):
        img, b, _ = render_sample(cfg, i, split)
        images[i] = img
        boxes.append(b)
    ids = [f"{split}-{i:06d}" for i in range(n)]
    ds = Dataset(images, ids, boxes=boxes, domain=domain, seed=cfg.seed, name=split)
    if domain == "night":
        ds = shift_dataset(ds, seed=cfg.seed)
    return ds if labeled else ds.unlabeled()


# ---------------------------------------------------------------- domain shift

NIGHT = dict(brightness=0.35, noise_sigma=0.05, blue_gain=1.15)


def night_image(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = np.asarray(image, dtype=np.float64) * NIGHT["brightness"]
    out = np.clip(out + rng.normal(0.0, NIGHT["noise_sigma"], size=out.shape), 0.0, 1.0)
    out[2] = np.clip(out[2] * NIGHT["blue_gain"], 0.0, 1.0)
    return out.astype(np.float32).astype(np.float64)


def apply_domain_shift(s: Sample, shift: str = "night", seed: int = 0, index: int = 0) -> Sample:
    if shift != "night":
        raise ValueError(f"unknown domain shift {shift!r}")
    rng = sample_rng(seed, f"shift-{shift}:{s.id}", index)
    return Sample(night_image(s.image, rng), list(s.annotations), s.id, shift)


def shift_dataset(ds: Dataset, shift: str = "night", seed: int = 0) -> Dataset:
    if shift != "night":
        raise ValueError(f"unknown domain shift {shift!r}")
    images = np.empty_like(ds.images)
    for i in range(len(ds)):
        images[i] = night_image(ds.images[i], sample_rng(seed, f"shift-{shift}:{ds.ids[i]}", 0))
    return replace(ds, images=images, domain=shift)


# ---------------------------------------------------------------- io

def _boxes_to_json(boxes: Sequence[BBox], with_score: bool) -> list[dict]:
    out = []
    for b in boxes:
        d = {"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h, "class": b.class_id}
        if with_score:
            d["score"] = b.score
        out.append(d)
    return out


def _write_jsonl(path: Path, ids, boxes, with_score):
    with open(path, "w") as f:
        for sid, bs in zip(ids, boxes):
            f.write(json.dumps({"id": sid, "boxes": _boxes_to_json(bs, with_score)}) + "\n")


def write_dataset(d: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    size = d.images.shape[-1] if d.images.ndim == 4 else 0
    manifest = {
        "format": FORMAT_VERSION, "size": size, "count": len(d), "seed": d.seed,
        "domain": d.domain, "labeled": d.labeled, "source": d.source, "ids": list(d.ids),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    d.images.astype("<f4").tofile(directory / "images.bin")
    pseudo = d.source == "pseudo"
    # raw attribute access: writing is not a training read
    if d.boxes is not None:
        _write_jsonl(directory / "annotations.jsonl", d.ids, d.boxes, pseudo)
    else:
        with contextlib.suppress(FileNotFoundError):
            os.remove(directory / "annotations.jsonl")
    if d.hidden is not None:
        _write_jsonl(directory / "hidden_annotations.jsonl", d.ids, d.hidden, False)
    return directory


def _read_jsonl(path: Path, ids: list[str]) -> list[list[BBox]]:
    out: list[list[BBox]] = []
    offset = 0
    with open(path, "rb") as f:
        for lineno, raw in enumerate(f):
            start, offset = offset, offset + len(raw)
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                boxes = [BBox(float(b["cx"]), float(b["cy"]), float(b["w"]), float(b["h"]),
                              int(b["class"]), float(b.get("score", 1.0))) for b in rec["boxes"]]
                sid = rec["id"]
            except (ValueError, KeyError, TypeError) as e:
                raise DatasetFormatError(path, start, f"line {lineno + 1}: {e}") from None
            if len(out) >= len(ids) or sid != ids[len(out)]:
                raise DatasetFormatError(path, start, f"line {lineno + 1}: unexpected id {sid!r}")
            out.append(boxes)
    if len(out) != len(ids):
        raise DatasetFormatError(path, offset, f"expected {len(ids)} records, found {len(out)}")
    return out


def read_dataset(directory, name: str | None = None, audit: AccessAudit | None = None) -> Dataset:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    try:
        text = mpath.read_text()
    except FileNotFoundError:
        raise DatasetFormatError(mpath, 0, "missing manifest") from None
    try:
        m = json.loads(text)
        size, count, ids = int(m["size"]), int(m["count"]), list(m["ids"])
        labeled = bool(m["labeled"])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(mpath, e.pos, e.msg) from None
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetFormatError(mpath, 0, f"bad manifest field: {e}") from None
    if len(ids) != count:
        raise DatasetFormatError(mpath, 0, f"count {count} but {len(ids)} ids")
    ipath = directory / "images.bin"
    expected = count * 3 * size * size * 4
    try:
        nbytes = ipath.stat().st_size
    except FileNotFoundError:
        raise DatasetFormatError(ipath, 0, "missing image file") from None
    if nbytes != expected:
        raise DatasetFormatError(ipath, min(nbytes, expected), f"expected {expected} bytes, found {nbytes}")
    images = np.fromfile(ipath, dtype="<f4").astype(np.float32).reshape(count, 3, size, size)
    apath = directory / "annotations.jsonl"
    boxes = None
    if labeled:
        if not apath.exists():
            raise DatasetFormatError(apath, 0, "labeled split without annotation file")
        boxes = _read_jsonl(apath, ids)
    hpath = directory / "hidden_annotations.jsonl"
    hidden = _read_jsonl(hpath, ids) if hpath.exists() else None
    return Dataset(images, ids, boxes=boxes, hidden=hidden, domain=m.get("domain", "day"),
                   seed=int(m.get("seed", 0)), source=m.get("source", "ground_truth"),
                   name=name or directory.name, audit=audit)
