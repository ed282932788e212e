"""Face-image I/O, label-preserving augmentation and training manifests.

Frames live at ``<frames>/videos/<video_id>/<frame_index>.png``.  A manifest
is a JSON Lines file with one :class:`ManifestEntry` per line.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .keyframes import I_FRAME, NON_I, FrameIndexReport
from .rng import RandomSource

log = logging.getLogger(__name__)

REGIMES = ("K", "K_aug", "N", "K_plus_N")
LABELS = {"real": 0, "fake": 1}


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# images


def load_image(path, size: int | None = None) -> np.ndarray:
    """RGB image as float32 ``3 x S x S`` in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    h, w, _ = arr.shape
    if h != w or (size is not None and h != size):
        want = f"{size}x{size}" if size else "square"
        raise DataError(f"image {path} is {w}x{h}, expected {want}")
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path, chw: np.ndarray) -> None:
    arr = np.clip(np.asarray(chw).transpose(1, 2, 0) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


# ---------------------------------------------------------------------------
# augmentation: the eight symmetries of the square


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def vflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


def transpose_image(img: np.ndarray) -> np.ndarray:
    return img.transpose(0, 2, 1).copy()


def rotate90(img: np.ndarray, quarter_turns: int) -> np.ndarray:
    return np.rot90(img, quarter_turns, axes=(1, 2)).copy()


def apply_symmetry(img: np.ndarray, code: int) -> np.ndarray:
    """``code`` in 0..7: quarter turns ``code % 4``, then a transpose if ``code >= 4``.

    Together these cover every rotation, flip and transpose; code 0 is the identity.
    """
    out = rotate90(img, code % 4)
    return transpose_image(out) if code >= 4 else out


def augment(img: np.ndarray, rng: RandomSource) -> np.ndarray:
    if img.ndim != 3 or img.shape[1] != img.shape[2]:
        raise DataError(f"augment needs a square 3 x S x S image, got {img.shape}")
    return apply_symmetry(img, rng.randbelow(8))


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    frame_index: int
    frame_kind: str
    label: int
    split: str
    image_path: str
    augment: int = 0  # 0 is the original frame, k > 0 a random symmetry variant

    @property
    def key(self) -> tuple[str, int, int]:
        return self.video_id, self.frame_index, self.augment


def write_manifest(entries, path) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(asdict(e)) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise DataError(f"{path}:{n}: bad manifest line: {exc}") from exc
    keys = [e.key for e in entries]
    if len(set(keys)) != len(keys):
        raise DataError(f"{path}: duplicate (video_id, frame_index, augment) entries")
    return entries


def _parse_label(value, video_id: str) -> int:
    if isinstance(value, str) and value.lower() in LABELS:
        return LABELS[value.lower()]
    if value in (0, 1, "0", "1"):
        return int(value)
    raise DataError(f"video {video_id}: label must be real/fake, got {value!r}")


def read_labels(path) -> dict[str, tuple[int, str]]:
    """``video_id -> (label, split)`` from JSON or CSV (``video_id,label[,split]``)."""
    path = Path(path)
    text = path.read_text()
    out: dict[str, tuple[int, str]] = {}
    if path.suffix == ".json":
        for vid, v in json.loads(text).items():
            if isinstance(v, dict):
                out[vid] = (_parse_label(v.get("label"), vid), v.get("split", "train"))
            else:
                out[vid] = (_parse_label(v, vid), "train")
        return out
    for row in csv.reader(text.splitlines()):
        if not row or row[0].startswith("#") or row[0] == "video_id":
            continue
        split = row[2].strip() if len(row) > 2 and row[2].strip() else "train"
        out[row[0].strip()] = (_parse_label(row[1].strip(), row[0]), split)
    return out


def scan_frames(frames_dir) -> dict[str, dict[int, Path]]:
    root = Path(frames_dir) / "videos"
    if not root.is_dir():
        raise DataError(f"{frames_dir} has no videos/ directory")
    found: dict[str, dict[int, Path]] = {}
    for vdir in sorted(p for p in root.iterdir() if p.is_dir()):
        frames = {}
        for f in vdir.glob("*.png"):
            if f.stem.isdigit():
                frames[int(f.stem)] = f
        found[vdir.name] = frames
    return found


def _entry(vid, idx, kind, label, split, path, aug=0) -> ManifestEntry:
    return ManifestEntry(vid, idx, kind, label, split, str(path), aug)


def build_manifest(
    frames_dir,
    keyframe_reports: dict[str, FrameIndexReport],
    labels: dict[str, tuple[int, str]],
    regime: str,
    real_normal_multiplier: int = 3,
    rng: RandomSource | None = None,
    normal_per_fake: int = 1,
    aug_factor: int = 3,
) -> list[ManifestEntry]:
    """Select frames for one training regime.

    K keeps keyframes; K_aug repeats each keyframe ``aug_factor`` times
    (variant 0 is the original); N draws ``normal_per_fake`` non-keyframes
    per fake video and ``real_normal_multiplier`` times as many per real
    video; K_plus_N is the union of K and N.
    """
    if regime not in REGIMES:
        raise DataError(f"unknown regime {regime!r}; choose from {REGIMES}")
    rng = rng if rng is not None else RandomSource(0)
    frames = scan_frames(frames_dir)
    missing = sorted(set(frames) - set(labels))
    if missing:
        raise DataError(f"no label for videos {missing[:5]}")
    no_report = sorted(v for v in frames if v not in keyframe_reports)
    if no_report:
        raise DataError(f"no keyframe report for videos {no_report[:5]}")

    entries: list[ManifestEntry] = []
    for vid in sorted(frames):
        label, split = labels[vid]
        kinds = dict(keyframe_reports[vid].entries)
        on_disk = frames[vid]
        for idx in sorted(on_disk):
            if idx not in kinds:
                raise DataError(f"frame {idx} of {vid} is outside its keyframe report ({len(kinds)} frames)")
        keys = [i for i in sorted(on_disk) if kinds[i] == I_FRAME]
        normals = [i for i in sorted(on_disk) if kinds[i] == NON_I]

        if regime in ("K", "K_aug", "K_plus_N"):
            copies = aug_factor if regime == "K_aug" else 1
            for i in keys:
                entries += [_entry(vid, i, I_FRAME, label, split, on_disk[i], a) for a in range(copies)]
        if regime in ("N", "K_plus_N"):
            want = normal_per_fake * (real_normal_multiplier if label == 0 else 1)
            picked = rng.sample(normals, min(want, len(normals)))
            entries += [_entry(vid, i, NON_I, label, split, on_disk[i]) for i in sorted(picked)]

    if not entries:
        raise DataError(f"regime {regime} selected no frames")
    n_real = sum(e.label == 0 for e in entries)
    n_fake = len(entries) - n_real
    if max(n_real, n_fake) > 1.1 * max(1, min(n_real, n_fake)):
        log.warning("manifest unbalanced: %d real vs %d fake", n_real, n_fake)
    return entries


def load_reports(paths) -> dict[str, FrameIndexReport]:
    """Keyframe reports keyed by the stem of their source video."""
    out = {}
    for p in paths:
        rep = FrameIndexReport.from_jsonl(Path(p).read_text())
        out[Path(rep.source).stem] = rep
    return out


def manifest_arrays(entries, size: int, cache: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stacked images and labels in manifest order."""
    cache = {} if cache is None else cache
    imgs = []
    for e in entries:
        if e.image_path not in cache:
            cache[e.image_path] = load_image(e.image_path, size)
        imgs.append(cache[e.image_path])
    labels = np.array([e.label for e in entries], dtype=np.int64)
    return np.stack(imgs) if imgs else np.zeros((0, 3, size, size), np.float32), labels
