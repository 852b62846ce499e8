"""Procedural stand-in dataset with class signal in face, context and body.

Each scene holds one principal person (large face near the centre) and, for
roughly half the scenes, one or two smaller distractors near the left/right
edges. Class identity is encoded three ways:

* face patch: stripe texture whose orientation depends on the class
* background: class hue plus a stripe motif at a class-specific angle
* body: stick-figure pose (hand and foot placement) per class
"""

from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np

from .data import DEFAULT_SIDECAR, DatasetSpec, write_sidecar
from .errors import ValidationError
from .imageio import write_image, write_mask
from .model import CLASS_NAMES
from .params import make_rng

SCENE_H, SCENE_W = 360, 640
KEYPOINTS = ("head", "neck", "left_hand", "right_hand", "pelvis", "left_foot", "right_foot")

# hand offsets from the neck, in face-size units
_HANDS = {
    "angry": ((-0.7, 0.9), (0.7, 0.9)),
    "disgust": ((-0.3, -0.3), (0.9, 0.7)),
    "fear": ((-0.5, -0.6), (0.5, -0.6)),
    "happy": ((-1.0, -1.0), (1.0, -1.0)),
    "sad": ((-0.15, 1.2), (0.15, 1.2)),
    "surprise": ((-1.3, 0.0), (1.3, 0.0)),
    "neutral": ((-0.45, 1.2), (0.45, 1.2)),
}
_HUES = np.array(
    [
        (0.75, 0.25, 0.25),
        (0.45, 0.6, 0.2),
        (0.4, 0.3, 0.6),
        (0.9, 0.75, 0.3),
        (0.25, 0.35, 0.55),
        (0.85, 0.5, 0.7),
        (0.55, 0.55, 0.55),
    ]
)


def _segment_mask(shape, p0, p1, radius: float) -> np.ndarray:
    h, w = shape
    (x0, y0), (x1, y1) = p0, p1
    lo_x = max(int(min(x0, x1) - radius - 1), 0)
    hi_x = min(int(max(x0, x1) + radius + 2), w)
    lo_y = max(int(min(y0, y1) - radius - 1), 0)
    hi_y = min(int(max(y0, y1) + radius + 2), h)
    out = np.zeros(shape, dtype=bool)
    if lo_x >= hi_x or lo_y >= hi_y:
        return out
    ys, xs = np.mgrid[lo_y:hi_y, lo_x:hi_x]
    dx, dy = x1 - x0, y1 - y0
    length2 = dx * dx + dy * dy
    t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / length2, 0.0, 1.0) if length2 > 0 else 0.0
    px, py = x0 + t * dx, y0 + t * dy
    out[lo_y:hi_y, lo_x:hi_x] = (xs - px) ** 2 + (ys - py) ** 2 <= radius * radius
    return out


def _face_texture(size: int, label: int, rng) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    theta = label * math.pi / len(CLASS_NAMES)
    period = size / 3.5
    stripes = 0.5 + 0.5 * np.sin(2 * math.pi * (xs * math.cos(theta) + ys * math.sin(theta)) / period)
    skin = np.array([0.85, 0.66, 0.52]) + rng.uniform(-0.05, 0.05, 3)
    tex = skin * (0.7 + 0.3 * stripes[:, :, None])
    # eyes and mouth so the patch reads as a face; identical across classes
    for ex in (0.3, 0.7):
        eye = (xs - ex * size) ** 2 + (ys - 0.38 * size) ** 2 <= (0.07 * size) ** 2
        tex[eye] = 0.1
    mouth = (np.abs(ys - 0.72 * size) <= 0.04 * size) & (np.abs(xs - 0.5 * size) <= 0.2 * size)
    tex[mouth] = 0.2
    return np.clip(tex, 0.0, 1.0)


def _background(label: int, rng) -> np.ndarray:
    ys, xs = np.mgrid[0:SCENE_H, 0:SCENE_W]
    theta = label * math.pi / len(CLASS_NAMES) + math.pi / 14
    phase = rng.uniform(0, 2 * math.pi)
    motif = np.sin(2 * math.pi * (xs * math.cos(theta) + ys * math.sin(theta)) / 40.0 + phase)
    base = _HUES[label] + rng.uniform(-0.05, 0.05, 3)
    img = base * (0.8 + 0.15 * motif[:, :, None])
    img += rng.normal(0.0, 0.02, img.shape)
    return img


def _draw_person(img, cx: float, top: float, size: int, label: int, rng):
    """Paint face + stick body; returns (face box, person mask, keypoints)."""
    shape = img.shape[:2]
    s = float(size)
    neck = (cx, top + s)
    pelvis = (cx + rng.uniform(-0.05, 0.05) * s, neck[1] + 1.2 * s)
    (lhx, lhy), (rhx, rhy) = _HANDS[CLASS_NAMES[label]]
    jit = lambda: rng.uniform(-0.08, 0.08) * s  # noqa: E731
    lhand = (neck[0] + lhx * s + jit(), neck[1] + lhy * s + jit())
    rhand = (neck[0] + rhx * s + jit(), neck[1] + rhy * s + jit())
    spread = (0.15 + 0.07 * label) * s
    lfoot = (pelvis[0] - spread + jit(), pelvis[1] + 0.85 * s)
    rfoot = (pelvis[0] + spread + jit(), pelvis[1] + 0.85 * s)
    radius = max(2.0, s / 9)
    body = np.zeros(shape, dtype=bool)
    for p0, p1 in ((neck, pelvis), (neck, lhand), (neck, rhand), (pelvis, lfoot), (pelvis, rfoot)):
        body |= _segment_mask(shape, p0, p1, radius)
    img[body] = np.array([0.2, 0.3, 0.6]) + rng.uniform(-0.03, 0.03, 3)
    x0, y0 = int(round(cx - s / 2)), int(round(top))
    box = [x0, y0, size, size]
    fy0, fx0 = max(y0, 0), max(x0, 0)
    fy1, fx1 = min(y0 + size, shape[0]), min(x0 + size, shape[1])
    tex = _face_texture(size, label, rng)
    img[fy0:fy1, fx0:fx1] = tex[fy0 - y0 : fy1 - y0, fx0 - x0 : fx1 - x0]
    mask = body.copy()
    mask[fy0:fy1, fx0:fx1] = True
    head = (cx, top + s / 2)
    keypoints = [[round(p[0], 2), round(p[1], 2)] for p in (head, neck, lhand, rhand, pelvis, lfoot, rfoot)]
    return box, mask.astype(np.uint8), keypoints


def render_scene(label: int, rng) -> dict:
    """One synthetic scene: image, principal box/mask/keypoints and all candidates."""
    img = _background(label, rng)
    people = []
    n_distractors = int(rng.choice([0, 0, 1, 2]))
    sides = rng.permutation([0, 1])
    for k in range(n_distractors):
        size = int(rng.integers(30, 43))
        side = sides[k % 2]
        cx = rng.uniform(size, 0.18 * SCENE_W) if side == 0 else rng.uniform(0.82 * SCENE_W, SCENE_W - size)
        top = rng.uniform(0.15 * SCENE_H, 0.35 * SCENE_H)
        other = int(rng.integers(0, len(CLASS_NAMES)))
        box, mask, _ = _draw_person(img, cx, top, size, other, rng)
        people.append((box, mask))
    size = int(rng.integers(64, 85))
    cx = SCENE_W / 2 + rng.uniform(-40, 40)
    top = 0.22 * SCENE_H + rng.uniform(-10, 10)
    box, mask, keypoints = _draw_person(img, cx, top, size, label, rng)
    return {
        "image": np.clip(img, 0.0, 1.0),
        "face": box,
        "mask": mask,
        "keypoints": keypoints,
        "distractors": people,
    }


def generate_synthetic(n_per_class: int, seed: int, outdir: str | os.PathLike) -> DatasetSpec:
    """Write ``7 * n_per_class`` PPM scenes, PGM person masks and the sidecar."""
    if n_per_class < 1:
        raise ValidationError(f"n_per_class must be >= 1, got {n_per_class}")
    root = Path(outdir)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for label, name in enumerate(CLASS_NAMES):
        (root / name).mkdir(exist_ok=True)
        for i in range(n_per_class):
            rng = make_rng(seed, label, i)
            scene = render_scene(label, rng)
            stem = f"{name}/{name}_{i:04d}"
            write_image(root / f"{stem}.ppm", scene["image"])
            people = [(scene["face"], scene["mask"])] + scene["distractors"]
            order = rng.permutation(len(people))
            faces, masks = [], []
            for rank, j in enumerate(order):
                box, mask = people[j]
                path = f"{stem}_m{rank}.pgm"
                write_mask(root / path, mask)
                masks.append(path)
                faces.append(box + [round(float(rng.uniform(0.6, 1.0)), 3)])
                if j == 0:
                    principal_mask = path
            records.append(
                {
                    "image": f"{stem}.ppm",
                    "label": name,
                    "face": scene["face"],
                    "faces": faces,
                    "mask": principal_mask,
                    "masks": masks,
                    "keypoints": scene["keypoints"],
                }
            )
    write_sidecar(root / DEFAULT_SIDECAR, records)
    return DatasetSpec(str(root), DEFAULT_SIDECAR, split=None)
