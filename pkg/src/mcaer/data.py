"""Dataset layout, annotation sidecar, seeded splits and per-sample cue preparation.

Layout::

    root/
      angry/ disgust/ fear/ happy/ sad/ surprise/ neutral/   image files
      annotations.jsonl                                       one JSON record per line

Sidecar record fields: ``image`` (path relative to root), ``label`` (class
name), ``face`` ([x, y, w, h]), optional ``faces`` (candidate boxes, each
[x, y, w, h] or [x, y, w, h, confidence]), optional ``mask`` (relative path
or null), optional ``masks`` (candidate mask paths), optional ``keypoints``
(list of [x, y]).
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .cues import (
    CueBundle,
    FaceBox,
    crop_face,
    fallback_face,
    occlude_face,
    remove_background,
    select_principal_face,
)
from .errors import DatasetError, MissingCueError, NoFaceError, ParseError, ValidationError
from .imageio import read_mask, read_rgb
from .model import CLASS_NAMES, StreamConfig
from .params import make_rng
from .preprocessing import PrepConfig, context_base, prep_body, prep_face, random_crop

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_SIDECAR = "annotations.jsonl"


# -- sidecar ---------------------------------------------------------------


def read_sidecar(path: str | os.PathLike) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict) or "image" not in rec or "label" not in rec:
                raise ParseError(f"{path}: record needs 'image' and 'label'", lineno)
            records.append(rec)
    return records


def dump_record(rec: dict) -> str:
    return json.dumps(rec, separators=(", ", ": "))


def write_sidecar(path: str | os.PathLike, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dump_record(rec) + "\n")


# -- dataset spec and splitting ----------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    root: str
    annotations: Optional[str] = None
    split: Optional[str] = "train"
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_seed: int = 0

    def __post_init__(self):
        if self.split is not None and self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS} or None, got {self.split!r}")
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ValidationError(f"need three non-negative split fractions, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValidationError(f"split fractions must sum to 1, got {self.fractions}")

    @property
    def sidecar_path(self) -> Path:
        p = Path(self.annotations or DEFAULT_SIDECAR)
        return p if p.is_absolute() else Path(self.root) / p

    def with_split(self, split: Optional[str]) -> "DatasetSpec":
        return DatasetSpec(self.root, self.annotations, split, self.fractions, self.split_seed)


def split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    """(train, val, test) sizes: val and test are floored, the remainder goes to train."""
    n_val = math.floor(fractions[1] * n + 1e-9)
    n_test = math.floor(fractions[2] * n + 1e-9)
    return n - n_val - n_test, n_val, n_test


def assign_splits(paths_by_class: dict[int, list[str]], fractions, seed: int) -> dict[str, str]:
    """Map each image path to a split via a seeded per-class shuffle."""
    out = {}
    for label in sorted(paths_by_class):
        paths = sorted(paths_by_class[label])
        perm = make_rng(seed, label).permutation(len(paths))
        n_train, n_val, _ = split_counts(len(paths), fractions)
        for rank, i in enumerate(perm):
            out[paths[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


@dataclass
class SampleRef:
    """Lazy handle on one annotated image."""

    root: str
    record: dict
    label: int

    @property
    def image_path(self) -> Path:
        return Path(self.root) / self.record["image"]

    def candidate_faces(self) -> list[FaceBox]:
        return [FaceBox.from_seq(b) for b in self.record.get("faces") or []]

    def load(self, lenient: bool = False) -> CueBundle:
        image = read_rgb(self.image_path)
        h, w = image.shape[:2]
        rec = self.record
        fallback = False
        if rec.get("face") is not None:
            face = FaceBox.from_seq(rec["face"]).clip(w, h)
        else:
            clipped = [b for b in (c.clip(w, h) for c in self.candidate_faces()) if b is not None]
            face = select_principal_face(clipped, w, h) if clipped else None
        if face is None:
            if not lenient:
                raise NoFaceError(f"{self.image_path}: no face annotation")
            face, fallback = fallback_face(w, h), True
        mask = read_mask(Path(self.root) / rec["mask"]) if rec.get("mask") else None
        return CueBundle(image, face, mask, self.label, face_fallback=fallback)


def _check_layout(root: Path) -> None:
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    missing = [c for c in CLASS_NAMES if not (root / c).is_dir()]
    if missing:
        raise DatasetError(f"{root}: missing class directories {missing}")
    unknown = sorted(
        p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith(".") and p.name not in CLASS_NAMES
    )
    if unknown:
        raise DatasetError(f"{root}: unknown class folders {unknown}; expected {list(CLASS_NAMES)}")


def load_dataset(spec: DatasetSpec) -> list[SampleRef]:
    """Validated, split-filtered sample references ordered by (label, path)."""
    root = Path(spec.root)
    _check_layout(root)
    sidecar = spec.sidecar_path
    if not sidecar.is_file():
        raise DatasetError(f"annotation sidecar {sidecar} not found")
    refs = []
    seen = set()
    for lineno, rec in enumerate(read_sidecar(sidecar), start=1):
        rel = rec["image"]
        label = rec["label"]
        if label not in CLASS_NAMES:
            raise DatasetError(f"{sidecar}:{lineno}: unknown label {label!r}")
        folder = Path(rel).parts[0] if Path(rel).parts else ""
        if folder != label:
            raise DatasetError(f"{sidecar}:{lineno}: {rel} is labelled {label!r} but lives in {folder!r}")
        if not (root / rel).is_file():
            raise DatasetError(f"{sidecar}:{lineno}: image {root / rel} does not exist")
        if rec.get("mask") and not (root / rec["mask"]).is_file():
            raise DatasetError(f"{sidecar}:{lineno}: mask {root / rec['mask']} does not exist")
        if rel in seen:
            raise DatasetError(f"{sidecar}:{lineno}: duplicate entry for {rel}")
        seen.add(rel)
        refs.append(SampleRef(str(root), rec, CLASS_NAMES.index(label)))
    if spec.split is not None:
        by_class: dict[int, list[str]] = {}
        for r in refs:
            by_class.setdefault(r.label, []).append(r.record["image"])
        assignment = assign_splits(by_class, spec.fractions, spec.split_seed)
        refs = [r for r in refs if assignment[r.record["image"]] == spec.split]
    return sorted(refs, key=lambda r: (r.label, r.record["image"]))


# -- prepared tensors --------------------------------------------------------


def keypoint_heatmaps(keypoints, img_w: int, img_h: int, size: int = 64, sigma: float = 2.0) -> np.ndarray:
    """Gaussian target maps [J,size,size] for keypoints given in scene pixels."""
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    ys, xs = np.mgrid[0:size, 0:size]
    out = np.zeros((len(kp), size, size))
    for j, (x, y) in enumerate(kp):
        if not (0 <= x < img_w and 0 <= y < img_h):
            continue
        cx, cy = x * size / img_w, y * size / img_h
        out[j] = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))
    return out


@dataclass
class PreparedSample:
    face: np.ndarray
    context: np.ndarray  # deterministic part; random crop is applied per epoch
    body: Optional[np.ndarray]
    body_present: bool
    label: int
    heatmaps: Optional[np.ndarray] = None
    face_fallback: bool = False


def prepare_bundle(
    bundle: CueBundle,
    model_config: StreamConfig,
    prep: PrepConfig = PrepConfig(),
    lenient: bool = False,
    dtype=np.float32,
    keypoints=None,
) -> PreparedSample:
    face = prep_face(crop_face(bundle.image, bundle.face), prep, dtype)
    ctx = context_base(occlude_face(bundle.image, bundle.face), prep, dtype)
    body, present, heat = None, True, None
    if "body" in model_config.enabled_streams:
        if not model_config.body_use_mask:
            body = prep_body(bundle.image, prep, dtype)
        elif bundle.mask is not None:
            body = prep_body(remove_background(bundle.image, bundle.mask), prep, dtype)
        elif lenient:
            s = prep.body_size
            body, present = np.zeros((3, s, s), dtype=dtype), False
        else:
            raise MissingCueError("no person mask for the body stream (strict mode)")
        if keypoints is not None and model_config.num_joints > 0:
            h, w = bundle.image.shape[:2]
            size = model_config.body_size // 4
            heat = keypoint_heatmaps(keypoints, w, h, size).astype(dtype)
            if heat.shape[0] != model_config.num_joints:
                heat = None
    return PreparedSample(face, ctx, body, present, -1 if bundle.label is None else bundle.label, heat, bundle.face_fallback)


@dataclass
class Batch:
    inputs: dict
    labels: np.ndarray
    body_present: Optional[np.ndarray]
    heatmaps: Optional[np.ndarray] = None


class CueDataset:
    """Sample references plus per-stream preparation, optionally memoized in memory."""

    def __init__(
        self,
        refs: Sequence[SampleRef],
        model_config: StreamConfig,
        prep: PrepConfig = PrepConfig(),
        lenient: bool = False,
        cache: bool = True,
        dtype=np.float32,
    ):
        self.refs = list(refs)
        self.model_config = model_config
        self.prep = prep
        self.lenient = lenient
        self.cache = cache
        self.dtype = dtype
        self._memo: dict[int, PreparedSample] = {}

    def __len__(self) -> int:
        return len(self.refs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.refs], dtype=np.int64)

    def sample(self, i: int) -> PreparedSample:
        if i in self._memo:
            return self._memo[i]
        ref = self.refs[i]
        bundle = ref.load(self.lenient)
        s = prepare_bundle(
            bundle, self.model_config, self.prep, self.lenient, self.dtype, ref.record.get("keypoints")
        )
        if self.cache:
            self._memo[i] = s
        return s

    def batch(self, indices: Sequence[int], train: bool = False, seed: int = 0, epoch: int = 0) -> Batch:
        samples = [self.sample(int(i)) for i in indices]
        if train:
            ctx = [random_crop(s.context, self.prep.crop_pad, make_rng(seed, 2, epoch, int(i))) for s, i in zip(samples, indices)]
        else:
            ctx = [s.context for s in samples]
        inputs = {"face": np.stack([s.face for s in samples]), "context": np.stack(ctx)}
        present = None
        heat = None
        if "body" in self.model_config.enabled_streams:
            inputs["body"] = np.stack([s.body for s in samples])
            present = np.array([s.body_present for s in samples])
            if all(s.heatmaps is not None for s in samples):
                heat = np.stack([s.heatmaps for s in samples])
        labels = np.array([s.label for s in samples], dtype=np.int64)
        return Batch(inputs, labels, present, heat)
