"""Procedural synthetic faces for zero-data runs of the whole pipeline.

Each identity is a fixed layout of flat-colored shapes (face oval, hair
band, eyes, brows, nose, mouth).  A pose in degrees yaws the layout by a
horizontal foreshortening plus a shear, so non-frontal renders move and
squash the identity cues.  Keypoints go through the same map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .facedata import KeypointSet, ManifestRecord, save_image, write_manifest

SIZE = 128
BACKGROUND = (0.42, 0.45, 0.50)
DEFAULT_POSES = (15, -30, 45, -60)
SHADE = 0.7


@dataclass(frozen=True)
class FaceLayout:
    face_rx: float
    face_ry: float
    skin: tuple
    hair: tuple
    hair_depth: float
    eye_dx: float
    eye_y: float
    eye_r: float
    iris: tuple
    brow_tilt: float
    nose_len: float
    nose_w: float
    mouth_y: float
    mouth_w: float
    lip: tuple


def identity_layout(identity: int, seed: int = 0) -> FaceLayout:
    rng = np.random.default_rng([seed, identity, 7919])
    # two skin and two hair tones: colour alone never singles out an identity
    skin_tones = [(0.93, 0.78, 0.64), (0.70, 0.52, 0.38)]
    hair_tones = [(0.15, 0.10, 0.06), (0.62, 0.48, 0.25)]
    return FaceLayout(
        face_rx=float(rng.uniform(34, 46)),
        face_ry=float(rng.uniform(44, 54)),
        skin=skin_tones[identity % 2],
        hair=hair_tones[(identity // 2) % 2],
        hair_depth=float(rng.uniform(10, 26)),
        eye_dx=float(rng.uniform(13, 22)),
        eye_y=float(rng.uniform(48, 60)),
        eye_r=float(rng.uniform(3.5, 7.0)),
        iris=(0.25, 0.30, 0.45),
        brow_tilt=float(rng.uniform(-0.35, 0.35)),
        nose_len=float(rng.uniform(12, 24)),
        nose_w=float(rng.uniform(4, 9)),
        mouth_y=float(rng.uniform(90, 100)),
        mouth_w=float(rng.uniform(10, 24)),
        lip=(0.72, 0.32, 0.33),
    )


_CX, _CY = SIZE / 2.0, SIZE / 2.0 + 4.0


def _pose_terms(pose_deg: float):
    t = math.radians(pose_deg)
    return math.cos(t), math.sin(t)


def pose_forward(x, y, pose_deg: float):
    """Frontal-layout coordinates to posed-image coordinates."""
    c, s = _pose_terms(pose_deg)
    xp = _CX + (x - _CX) * c + 0.35 * (y - _CY) * s + 14.0 * s
    return xp, y


def pose_inverse(xp, yp, pose_deg: float):
    c, s = _pose_terms(pose_deg)
    x = _CX + (xp - _CX - 0.35 * (yp - _CY) * s - 14.0 * s) / c
    return x, yp


def _paint(img, mask, color):
    img[mask] = color


def render(layout: FaceLayout, pose_deg: float = 0.0, size: int = SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    x, y = pose_inverse(xx, yy, pose_deg)
    img = np.empty((size, size, 3), dtype=np.float64)
    img[...] = BACKGROUND
    L = layout

    face = ((x - _CX) / L.face_rx) ** 2 + ((y - _CY) / L.face_ry) ** 2 <= 1.0
    _paint(img, face, L.skin)
    top = _CY - L.face_ry
    hair = face & (y < top + L.hair_depth)
    _paint(img, hair, L.hair)

    for side in (-1, 1):
        ex = _CX + side * L.eye_dx
        white = ((x - ex) / (L.eye_r * 1.6)) ** 2 + ((y - L.eye_y) / L.eye_r) ** 2 <= 1.0
        _paint(img, white & face, (0.97, 0.97, 0.97))
        iris = (x - ex) ** 2 + (y - L.eye_y) ** 2 <= (0.6 * L.eye_r) ** 2
        _paint(img, iris & face, L.iris)
        by = L.eye_y - L.eye_r - 4.0 + side * L.brow_tilt * (x - ex)
        brow = (np.abs(x - ex) <= L.eye_r * 1.7) & (np.abs(y - by) <= 1.5)
        _paint(img, brow & face, L.hair)

    nose_top = L.eye_y + 2.0
    nose_tip = nose_top + L.nose_len
    frac = np.clip((y - nose_top) / max(L.nose_len, 1e-6), 0.0, 1.0)
    nose = (y >= nose_top) & (y <= nose_tip) & (np.abs(x - _CX) <= 1.0 + frac * L.nose_w / 2)
    _paint(img, nose, tuple(0.82 * v for v in L.skin))

    mouth = (np.abs(x - _CX) <= L.mouth_w / 2) & (np.abs(y - L.mouth_y) <= 2.5)
    _paint(img, mouth & face, L.lip)

    # side lighting: the half turned away from the camera darkens with yaw
    s = math.sin(math.radians(pose_deg))
    ramp = np.clip(0.5 - s * (xx - SIZE / 2.0) / SIZE * 1.6, 0.0, 1.0)
    shade = 1.0 - SHADE * abs(s) * ramp
    img[face] *= shade[face][:, None]
    return img.astype(np.float32)


def keypoints(layout: FaceLayout, pose_deg: float = 0.0) -> KeypointSet:
    nose_tip_y = layout.eye_y + 2.0 + layout.nose_len
    pts = [(_CX - layout.eye_dx, layout.eye_y), (_CX + layout.eye_dx, layout.eye_y),
           (_CX, nose_tip_y), (_CX, layout.mouth_y)]
    out = []
    for x, y in pts:
        xp, yp = pose_forward(x, y, pose_deg)
        out.append((float(np.clip(xp, 0, SIZE - 1)), float(np.clip(yp, 0, SIZE - 1))))
    return KeypointSet(*out)


def write_fixture(out_dir, n_identities: int = 8, poses: Sequence[int] = DEFAULT_POSES,
                  seed: int = 0) -> Path:
    """Render the fixture as PNGs plus ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records: List[ManifestRecord] = []
    for ident in range(n_identities):
        layout = identity_layout(ident, seed)
        frontal = f"id{ident:03d}_frontal.png"
        save_image(out / frontal, render(layout, 0))
        for pose in poses:
            name = f"id{ident:03d}_pose{pose:+03d}.png"
            save_image(out / name, render(layout, pose))
            records.append(ManifestRecord(name, frontal, ident, int(pose), keypoints(layout, pose)))
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest
