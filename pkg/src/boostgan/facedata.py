"""Face pair ingestion, occlusion synthesis and batch construction.

Images are float32 arrays of shape (H, W, C) with values in [0, 1].
Keypoint and mask centers are (x, y) pixel coordinates: x is the column,
y is the row.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image

KEYPOINT_ORDER = ("left_eye", "right_eye", "nose_tip", "mouth_center")
DEFAULT_MASK_SIZE = 32
DEFAULT_FILL = 1.0
DATA_ROOT_ENV = "BOOSTGAN_DATA_ROOT"


class BoundsError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class KeypointSet:
    left_eye: Tuple[float, float]
    right_eye: Tuple[float, float]
    nose_tip: Tuple[float, float]
    mouth_center: Tuple[float, float]

    @classmethod
    def from_flat(cls, values: Sequence[float]) -> "KeypointSet":
        if len(values) != 8:
            raise ValueError(f"expected 8 keypoint numbers, got {len(values)}")
        v = [float(x) for x in values]
        return cls((v[0], v[1]), (v[2], v[3]), (v[4], v[5]), (v[6], v[7]))

    def as_list(self) -> List[Tuple[float, float]]:
        return [getattr(self, name) for name in KEYPOINT_ORDER]

    def flat(self) -> List[float]:
        return [c for pt in self.as_list() for c in pt]

    def check_bounds(self, height: int, width: int) -> None:
        for name, (x, y) in zip(KEYPOINT_ORDER, self.as_list()):
            if not (0 <= x < width and 0 <= y < height):
                raise BoundsError(
                    f"keypoint {name}=({x}, {y}) outside {width}x{height} image"
                )


@dataclass(frozen=True)
class OcclusionSpec:
    center: Tuple[int, int]
    size: int = DEFAULT_MASK_SIZE
    fill_value: float = DEFAULT_FILL

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"mask size must be >= 1, got {self.size}")
        if not 0.0 <= self.fill_value <= 1.0:
            raise ValueError(f"fill_value must lie in [0, 1], got {self.fill_value}")

    def rect(self, height: int, width: int) -> Tuple[int, int, int, int]:
        """Clipped half-open (row0, row1, col0, col1) covered by the mask."""
        x, y = self.center
        half = self.size // 2
        r0, c0 = y - half, x - half
        return (max(r0, 0), min(r0 + self.size, height),
                max(c0, 0), min(c0 + self.size, width))

    def to_json(self) -> dict:
        return {"center": list(self.center), "size": self.size,
                "fill_value": self.fill_value}


@dataclass
class FaceSample:
    profile: np.ndarray
    frontal_gt: np.ndarray
    keypoints: KeypointSet
    identity: int
    pose_deg: int

    def __post_init__(self):
        if self.profile.shape != self.frontal_gt.shape:
            raise ValueError(
                f"profile {self.profile.shape} and frontal {self.frontal_gt.shape} differ"
            )
        if self.identity < 0:
            raise ValueError(f"identity must be >= 0, got {self.identity}")


@dataclass
class OccludedQuadruple:
    images: List[np.ndarray]
    specs: List[OcclusionSpec]

    def __post_init__(self):
        if len(self.images) != 4 or len(self.specs) != 4:
            raise ValueError("an occluded quadruple holds exactly 4 images and 4 specs")
        shapes = {im.shape for im in self.images}
        if len(shapes) != 1:
            raise ValueError(f"quadruple members differ in shape: {sorted(shapes)}")

    def stack(self) -> np.ndarray:
        return np.stack(self.images)


@dataclass(frozen=True)
class ManifestRecord:
    profile_path: str
    frontal_path: str
    identity: int
    pose_deg: int
    keypoints: KeypointSet


@dataclass
class DatasetManifest:
    records: List[ManifestRecord]
    root_dir: Path
    source: Path | None = field(default=None, compare=False)

    def __len__(self):
        return len(self.records)

    def resolve(self, rel: str) -> Path:
        return self.root_dir / rel

    def identities(self) -> List[int]:
        return sorted({r.identity for r in self.records})


def _mask_center(center) -> Tuple[int, int]:
    return int(round(center[0])), int(round(center[1]))


def apply_mask(image: np.ndarray, spec: OcclusionSpec) -> np.ndarray:
    h, w = image.shape[:2]
    x, y = spec.center
    if not (0 <= x < w and 0 <= y < h):
        raise BoundsError(f"mask center ({x}, {y}) outside {w}x{h} image")
    out = image.copy()
    r0, r1, c0, c1 = spec.rect(h, w)
    out[r0:r1, c0:c1, ...] = spec.fill_value
    return out


def make_keypoint_quadruple(sample: FaceSample, size: int = DEFAULT_MASK_SIZE,
                            fill: float = DEFAULT_FILL) -> OccludedQuadruple:
    h, w = sample.profile.shape[:2]
    sample.keypoints.check_bounds(h, w)
    specs = [OcclusionSpec(_mask_center(pt), size, fill) for pt in sample.keypoints.as_list()]
    return OccludedQuadruple([apply_mask(sample.profile, s) for s in specs], specs)


def random_specs(height: int, width: int, seed: int, count: int = 4,
                 size: int = DEFAULT_MASK_SIZE, fill: float = DEFAULT_FILL) -> List[OcclusionSpec]:
    rng = np.random.default_rng(seed)
    xs = rng.integers(0, width, size=count)
    ys = rng.integers(0, height, size=count)
    return [OcclusionSpec((int(x), int(y)), size, fill) for x, y in zip(xs, ys)]


def make_random_quadruple(sample: FaceSample, seed: int, size: int = DEFAULT_MASK_SIZE,
                          fill: float = DEFAULT_FILL) -> OccludedQuadruple:
    h, w = sample.profile.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {w}x{h} smaller than the {size}x{size} occluder")
    specs = random_specs(h, w, seed, 4, size, fill)
    return OccludedQuadruple([apply_mask(sample.profile, s) for s in specs], specs)


def make_quadruple(sample: FaceSample, mode: str, seed: int) -> OccludedQuadruple:
    if mode == "keypoint":
        return make_keypoint_quadruple(sample)
    if mode == "random":
        return make_random_quadruple(sample, seed)
    raise ValueError(f"unknown occlusion mode {mode!r}; expected 'keypoint' or 'random'")


# ---------------------------------------------------------------- image io

def load_image(path) -> np.ndarray:
    return _load_image_cached(str(path)).copy()


@lru_cache(maxsize=512)
def _load_image_cached(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(str(path), format="PNG")


# ---------------------------------------------------------------- manifest

_RECORD_KEYS = {"profile_path", "frontal_path", "identity", "pose_deg", "keypoints"}


def _parse_record(obj, lineno: int, source) -> ManifestRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"{source}:{lineno}: record is not a JSON object")
    missing = _RECORD_KEYS - obj.keys()
    extra = obj.keys() - _RECORD_KEYS
    if missing or extra:
        raise ManifestError(
            f"{source}:{lineno}: bad keys (missing={sorted(missing)}, unknown={sorted(extra)})"
        )
    try:
        identity = int(obj["identity"])
        pose = int(obj["pose_deg"])
        kps = KeypointSet.from_flat(obj["keypoints"])
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"{source}:{lineno}: {exc}") from None
    if identity < 0:
        raise ManifestError(f"{source}:{lineno}: negative identity {identity}")
    return ManifestRecord(str(obj["profile_path"]), str(obj["frontal_path"]), identity, pose, kps)


def load_manifest(path, root_dir=None) -> DatasetManifest:
    """Read a line-delimited JSON manifest and check that every file exists.

    ``root_dir`` defaults to ``$BOOSTGAN_DATA_ROOT`` and then to the
    manifest's own directory.
    """
    path = Path(path)
    if root_dir is None:
        root_dir = os.environ.get(DATA_ROOT_ENV) or path.parent
    root = Path(root_dir)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
        rec = _parse_record(obj, lineno, path)
        for rel in (rec.profile_path, rec.frontal_path):
            if not (root / rel).is_file():
                raise ManifestError(f"{path}:{lineno}: missing image file {root / rel}")
        records.append(rec)
    manifest = DatasetManifest(records, root, path)
    _check_frontal_coverage(manifest)
    return manifest


def _check_frontal_coverage(manifest: DatasetManifest) -> None:
    seen = set()
    for rec in manifest.records:
        if rec.frontal_path:
            seen.add(rec.identity)
    lacking = set(manifest.identities()) - seen
    if lacking:
        raise ManifestError(f"identities without a frontal record: {sorted(lacking)}")


def write_manifest(path, records: Sequence[ManifestRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({
                "profile_path": r.profile_path,
                "frontal_path": r.frontal_path,
                "identity": r.identity,
                "pose_deg": r.pose_deg,
                "keypoints": r.keypoints.flat(),
            }) + "\n")


def load_sample(manifest: DatasetManifest, index: int) -> FaceSample:
    if not 0 <= index < len(manifest.records):
        raise IndexError(f"record index {index} out of range for {len(manifest.records)} records")
    rec = manifest.records[index]
    try:
        profile = load_image(manifest.resolve(rec.profile_path))
        frontal = load_image(manifest.resolve(rec.frontal_path))
    except OSError as exc:
        raise ManifestError(f"record {index}: {exc}") from None
    return FaceSample(profile, frontal, rec.keypoints, rec.identity, rec.pose_deg)


def sample_seed(seed: int, index: int) -> int:
    """Per-sample occlusion seed, independent of worker scheduling."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_batch(manifest: DatasetManifest, indices: Sequence[int], mode: str = "keypoint",
               seed: int = 0) -> List[Tuple[OccludedQuadruple, FaceSample]]:
    batch = []
    for i in indices:
        sample = load_sample(manifest, int(i))
        batch.append((make_quadruple(sample, mode, sample_seed(seed, int(i))), sample))
    return batch
