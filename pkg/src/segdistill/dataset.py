"""Dataset layout, manifest I/O, and batch preparation.

A dataset directory holds ``manifest.tsv`` plus ``images/`` (P6) and
``labels/`` (P5, void = 255).  Manifest rows are UTF-8, tab-separated:
``id<TAB>domain<TAB>image-path[<TAB>label-path]`` with paths relative to the
directory; unlabeled samples omit the label column.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import netpbm
from .errors import DataError, FormatError
from .preprocess import preprocess_image
from .rng import RngState
from .scenes import (VOID, Palette, flying_cars_composite, generate_dense_scene,
                     generate_sparse_scene, generate_unlabeled_scene, get_palette)

DOMAINS = ("dense", "sparse", "unlabeled")
MANIFEST = "manifest.tsv"


@dataclass
class Sample:
    id: str
    domain: str
    image: np.ndarray               # uint8 HxWx3
    labels: np.ndarray | None       # uint8 HxW or None (unlabeled)


def write_dataset(directory, samples) -> None:
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "labels"), exist_ok=True)
    rows = []
    for s in samples:
        if s.domain not in DOMAINS:
            raise DataError(f"sample {s.id!r}: unknown domain {s.domain!r}")
        image_rel = f"images/{s.id}.ppm"
        netpbm.write_ppm(os.path.join(directory, image_rel), s.image)
        row = [s.id, s.domain, image_rel]
        if s.labels is not None:
            label_rel = f"labels/{s.id}.pgm"
            netpbm.write_pgm(os.path.join(directory, label_rel), s.labels)
            row.append(label_rel)
        rows.append(row)
    with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8",
              newline="") as fh:
        csv.writer(fh, delimiter="\t", lineterminator="\n").writerows(rows)


def read_dataset(directory) -> list[Sample]:
    manifest = os.path.join(directory, MANIFEST)
    if not os.path.exists(manifest):
        raise DataError(f"{directory}: missing {MANIFEST}")
    samples = []
    seen = set()
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) not in (3, 4):
                raise FormatError(f"{manifest}:{lineno}: expected 3 or 4 "
                                  f"tab-separated fields, got {len(fields)}")
            sid, domain, image_rel = fields[:3]
            if domain not in DOMAINS:
                raise FormatError(f"{manifest}:{lineno}: unknown domain "
                                  f"{domain!r}")
            if sid in seen:
                raise FormatError(f"{manifest}:{lineno}: duplicate sample id "
                                  f"{sid!r}")
            seen.add(sid)
            image_path = os.path.join(directory, image_rel)
            if not os.path.exists(image_path):
                raise DataError(f"{manifest}:{lineno}: image file "
                                f"{image_rel!r} not found")
            image = netpbm.read_ppm(image_path)
            labels = None
            if len(fields) == 4:
                label_path = os.path.join(directory, fields[3])
                if not os.path.exists(label_path):
                    raise DataError(f"{manifest}:{lineno}: label file "
                                    f"{fields[3]!r} not found")
                labels = netpbm.read_pgm(label_path)
                if labels.shape != image.shape[:2]:
                    raise DataError(f"{manifest}:{lineno}: label size "
                                    f"{labels.shape} does not match image "
                                    f"{image.shape[:2]}")
            elif domain != "unlabeled":
                raise FormatError(f"{manifest}:{lineno}: {domain} sample "
                                  f"{sid!r} is missing its label column")
            samples.append(Sample(sid, domain, image, labels))
    return samples


# ---------------------------------------------------------------------------
# generation

def generate_dataset(directory, seed: int, num_dense: int, num_sparse: int,
                     num_unlabeled: int, width: int, height: int,
                     num_classes: int = 8, dense_objects=(0, 3),
                     sparse_objects=(1, 6)) -> list[Sample]:
    """Generate and write a synthetic dataset; returns the samples."""
    if width % 16 or height % 16:
        raise DataError(f"scene size {width}x{height} must be divisible by 16")
    palette = get_palette(num_classes)
    root = RngState(seed)
    samples = []
    for i in range(num_dense):
        gen = root.child(0).child(i).generator()
        image, labels = generate_dense_scene(gen, palette, width, height,
                                             objects=dense_objects)
        samples.append(Sample(f"dense_{i:05d}", "dense", image, labels))
    for i in range(num_sparse):
        gen = root.child(1).child(i).generator()
        image, labels = generate_sparse_scene(gen, palette, width, height,
                                              objects=sparse_objects)
        samples.append(Sample(f"sparse_{i:05d}", "sparse", image, labels))
    for i in range(num_unlabeled):
        gen = root.child(2).child(i).generator()
        image = generate_unlabeled_scene(gen, palette, width, height)
        samples.append(Sample(f"unlabeled_{i:05d}", "unlabeled", image, None))
    write_dataset(directory, samples)
    write_stats(os.path.join(directory, "stats.csv"), palette, samples)
    return samples


def write_stats(path, palette: Palette, samples) -> None:
    """Per-domain class pixel shares (percent), void included."""
    shares = {}
    for domain in DOMAINS:
        counts = np.zeros(palette.num_classes + 1, dtype=np.int64)
        total = 0
        for s in samples:
            if s.domain != domain or s.labels is None:
                continue
            flat = s.labels.reshape(-1)
            counts[:-1] += np.bincount(flat[flat != VOID],
                                       minlength=palette.num_classes)
            counts[-1] += int((flat == VOID).sum())
            total += flat.size
        if total:
            shares[domain] = counts / total * 100.0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["class"] + list(shares))
        for i, name in enumerate(list(palette.names) + ["void"]):
            out.writerow([name] + [f"{shares[d][i]:.3f}" for d in shares])


def make_composites(seed: int, palette: Palette, dense_samples,
                    objects=(1, 3)) -> list[Sample]:
    """Flying-object composites: one augmented copy per dense sample."""
    root = RngState(seed).child(3)
    out = []
    for i, s in enumerate(dense_samples):
        gen = root.child(i).generator()
        image, labels = flying_cars_composite(gen, palette, s.image, s.labels,
                                              objects=objects)
        out.append(Sample(f"{s.id}_fc", "dense", image, labels))
    return out


# ---------------------------------------------------------------------------
# batch preparation

@dataclass
class PreparedSet:
    """Preprocessed image stack ready for the training loop."""
    images: np.ndarray              # float32 (M, 3, H, W)
    labels: np.ndarray | None       # uint8 (M, H, W)
    ids: tuple[str, ...]

    def __len__(self):
        return self.images.shape[0]


def prepare(samples, dtype=np.float32) -> PreparedSet:
    samples = list(samples)
    if not samples:
        raise DataError("prepare: empty sample list")
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise DataError(f"prepare: mixed image sizes {sorted(shapes)}")
    images = np.stack([preprocess_image(s.image, dtype=dtype) for s in samples])
    labels = None
    if all(s.labels is not None for s in samples):
        labels = np.stack([s.labels for s in samples])
    return PreparedSet(images, labels, tuple(s.id for s in samples))


def remap_to_objects(labels, object_class_ids) -> np.ndarray:
    """Map full-space labels onto the object task: channel 0 is the catch-all
    for everything else (including void background), objects follow
    ``object_class_ids`` order."""
    out = np.zeros_like(labels)
    for channel, global_id in enumerate(object_class_ids, start=1):
        out[labels == global_id] = channel
    return out
