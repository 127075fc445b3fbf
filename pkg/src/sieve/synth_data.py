"""Synthetic "needle" visual-QA corpus: colored geometric shapes on a dark
canvas, with questions about color and relative position. Gold answers and
gold boxes come straight from the construction, so every sample is
answerable from the manifest alone."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .metrics import BBox
from .numerics import RngStream, seed_stream

COLOR_RGB = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 230),
    "yellow": (230, 220, 40),
    "purple": (160, 50, 200),
    "orange": (240, 150, 30),
}
SHAPE_NAMES = ("circle", "square", "triangle")
BACKGROUND = (24, 24, 24)
EDGE_MARGIN = 2      # pixels kept clear of the canvas border
GAP = 2              # minimum pixel gap between shape boxes
MAX_PLACEMENT_TRIES = 25


@dataclass
class Sample:
    sample_id: str
    image: np.ndarray                       # H x W x 3 uint8
    question: str
    gold_answer: str
    gold_boxes: list[tuple[str, BBox]]      # (object name, box)


def _shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean size x size mask of the filled shape."""
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "circle":
        c = (size - 1) / 2.0
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0 - 0.5) ** 2
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "triangle":
        # upward triangle: row y spans a widening band around the center
        c = (size - 1) / 2.0
        half = (yy + 1) * (size / 2.0) / size
        return np.abs(xx - c) <= half
    raise ValueError(f"unknown shape {shape!r}")


def _tight_bbox(mask: np.ndarray, top: int, left: int) -> BBox:
    rows = np.any(mask, axis=1).nonzero()[0]
    cols = np.any(mask, axis=0).nonzero()[0]
    return BBox(
        x_min=left + int(cols[0]),
        y_min=top + int(rows[0]),
        x_max=left + int(cols[-1]) + 1,
        y_max=top + int(rows[-1]) + 1,
    )


def _boxes_overlap(a: BBox, b: BBox, gap: int) -> bool:
    return not (
        a.x_max + gap <= b.x_min
        or b.x_max + gap <= a.x_min
        or a.y_max + gap <= b.y_min
        or b.y_max + gap <= a.y_min
    )


def generate_sample(
    rng: RngStream, sample_id: str = "sample", image_side: int = 64
) -> Sample:
    """Place 1-3 non-overlapping shapes (one per shape type at most) and ask
    either a color question or a left-of question."""
    image = np.empty((image_side, image_side, 3), dtype=np.uint8)
    image[:] = BACKGROUND

    n_shapes, rng = rng.integers(1, 4)
    n_shapes = int(n_shapes)
    pool = list(SHAPE_NAMES)
    chosen = []
    for _ in range(n_shapes):
        pick, rng = rng.integers(0, len(pool))
        chosen.append(pool.pop(int(pick)))

    placed: list[tuple[str, str, BBox]] = []   # (shape, color, box)
    for shape in chosen:
        color_idx, rng = rng.integers(0, len(COLOR_RGB))
        color = list(COLOR_RGB)[int(color_idx)]
        size_v, rng = rng.integers(10, 19)
        size = int(size_v)
        for _ in range(MAX_PLACEMENT_TRIES):
            top_v, rng = rng.integers(EDGE_MARGIN, image_side - EDGE_MARGIN - size)
            left_v, rng = rng.integers(EDGE_MARGIN, image_side - EDGE_MARGIN - size)
            top, left = int(top_v), int(left_v)
            mask = _shape_mask(shape, size)
            box = _tight_bbox(mask, top, left)
            if all(not _boxes_overlap(box, b, GAP) for _, _, b in placed):
                region = image[top : top + size, left : left + size]
                region[mask] = COLOR_RGB[color]
                placed.append((shape, color, box))
                break
        # placement failure after bounded retries: shape skipped; at least
        # one shape always fits on an empty canvas

    target_v, rng = rng.integers(0, len(placed))
    shape, color, _ = placed[int(target_v)]
    kind_v, rng = rng.integers(0, 10)
    if len(placed) >= 2 and int(kind_v) < 3:
        other_idx, rng = rng.integers(0, len(placed))
        other_idx = int(other_idx)
        if placed[other_idx][0] == shape:
            other_idx = (other_idx + 1) % len(placed)
            if placed[other_idx][0] == shape:
                other_idx = (other_idx + 1) % len(placed)
        other_shape, _, other_box = placed[other_idx]
        _, _, box = placed[int(target_v)]
        question = f"is the {shape} left of the {other_shape} ?"
        center = (box.x_min + box.x_max) / 2
        other_center = (other_box.x_min + other_box.x_max) / 2
        answer = "yes" if center < other_center else "no"
    else:
        question = f"what color is the {shape} ?"
        answer = color

    return Sample(
        sample_id=sample_id,
        image=image,
        question=question,
        gold_answer=answer,
        gold_boxes=[(s, b) for s, _, b in placed],
    )


# ---------------------------------------------------------------------------
# P6 PPM I/O
# ---------------------------------------------------------------------------

def write_ppm(image: np.ndarray, path) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected H x W x 3 image, got {image.shape}")
    h, w = image.shape[:2]
    path = Path(path)
    tmp = path.with_name("." + path.name + ".tmp")
    tmp.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes())
    tmp.replace(path)


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ShapeError(f"not a P6 PPM: {path}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ShapeError(f"unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------

def generate_dataset(
    n: int, seed: int, path, image_side: int = 64
) -> list[dict]:
    """Write n samples (P6 images + JSON-lines manifest); returns the
    manifest records."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    root = seed_stream(seed).split("synth-data")
    records = []
    for i in range(n):
        sample_id = f"sample_{i:05d}"
        sample = generate_sample(root.split(sample_id), sample_id, image_side)
        rel = f"images/{sample_id}.ppm"
        write_ppm(sample.image, path / rel)
        records.append(
            {
                "sample_id": sample_id,
                "image": rel,
                "question": sample.question,
                "gold_answer": sample.gold_answer,
                "gold_boxes": [
                    {"name": name, "bbox": box.to_list()}
                    for name, box in sample.gold_boxes
                ],
            }
        )
    manifest = path / "manifest.jsonl"
    tmp = manifest.with_name("." + manifest.name + ".tmp")
    with open(tmp, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    tmp.replace(manifest)
    return records


def load_dataset(path) -> list[Sample]:
    path = Path(path)
    samples = []
    with open(path / "manifest.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            samples.append(
                Sample(
                    sample_id=rec["sample_id"],
                    image=read_ppm(path / rec["image"]),
                    question=rec["question"],
                    gold_answer=rec["gold_answer"],
                    gold_boxes=[
                        (gb["name"], BBox(*gb["bbox"])) for gb in rec["gold_boxes"]
                    ],
                )
            )
    return samples
