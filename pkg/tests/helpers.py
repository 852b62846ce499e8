"""Small dataset builders shared by the test modules."""

import hashlib
from pathlib import Path

import numpy as np

from mcaer.data import DatasetSpec, write_sidecar
from mcaer.imageio import write_image
from mcaer.model import CLASS_NAMES


def make_tiny_dataset(root: Path, per_class: int = 10) -> DatasetSpec:
    """Flat-colour 12x16 images, one face box each."""
    root.mkdir(parents=True, exist_ok=True)
    recs = []
    for label, name in enumerate(CLASS_NAMES):
        (root / name).mkdir(exist_ok=True)
        for i in range(per_class):
            rel = f"{name}/img{i:03d}.ppm"
            write_image(root / rel, np.full((12, 16, 3), (label + 1) / 8))
            recs.append({"image": rel, "label": name, "face": [4, 2, 6, 6], "mask": None})
    write_sidecar(root / "annotations.jsonl", recs)
    return DatasetSpec(str(root))


def tree_digest(root) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
