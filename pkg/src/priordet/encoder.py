"""Frozen target-embedding encoders for cropped proposal regions.

Crops are resized to 128x128, optionally augmented, and mapped to a
512-d L2-normalized embedding. Two backends ship:

- toy_projection: grayscale 32x32 downsample (plus a constant bias
  feature) through a fixed seeded linear projection; deterministic and
  dependency-free, used for tests and desk-scale runs.
- file_weights: the same featurization with the projection matrix read
  from a manifest+blob weights file, so externally computed projections
  can be plugged in. Any object with an `encode_batch` method works as a
  drop-in backend for the trainer.

The manifest+blob scheme (shared with model checkpoints): a text
manifest of `name<TAB>dtype<TAB>dim0,dim1,...` lines next to a raw blob
of little-endian float32 tensors concatenated in manifest order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import BackendError, CropError
from .geometry import BoxXYXY

PATCH_SIZE = 128
EMBED_DIM = 512
_FEAT_SIDE = 32
_FEAT_DIM = _FEAT_SIDE * _FEAT_SIDE + 1  # +1 constant bias feature
_GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Patch:
    """A 128x128x3 crop with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.shape != (PATCH_SIZE, PATCH_SIZE, 3):
            raise ValueError(f"patch must be {PATCH_SIZE}x{PATCH_SIZE}x3, got {self.pixels.shape}")


def crop_resize(image: np.ndarray, box: BoxXYXY) -> Patch:
    """Crop a fractional box out of an image and bilinearly resize to
    128x128. Boxes that round to an empty pixel rect are expanded to at
    least 2x2 pixels; fully out-of-frame boxes raise CropError."""
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    x1 = int(round(box.x1 * w))
    x2 = int(round(box.x2 * w))
    y1 = int(round(box.y1 * h))
    y2 = int(round(box.y2 * h))
    if x1 >= w or y1 >= h or x2 <= 0 or y2 <= 0:
        raise CropError(f"box {box.as_tuple()} lies outside a {w}x{h} image")
    # expand degenerate rects to >= 2x2 pixels, staying in frame
    if x2 - x1 < 2:
        x1 = max(0, min(x1, w - 2))
        x2 = x1 + 2
    if y2 - y1 < 2:
        y1 = max(0, min(y1, h - 2))
        y2 = y1 + 2
    x1, y1 = max(0, x1), max(0, y1)
    x2, y2 = min(w, x2), min(h, y2)
    crop = image[y1:y2, x1:x2]
    resized = cv2.resize(crop, (PATCH_SIZE, PATCH_SIZE), interpolation=cv2.INTER_LINEAR)
    return Patch(pixels=np.clip(resized, 0.0, 1.0))


def flip_horizontal(patch: Patch) -> Patch:
    return Patch(pixels=np.ascontiguousarray(patch.pixels[:, ::-1]))


def augment(patch: Patch, seed: int) -> Patch:
    """Seeded per-crop augmentation: horizontal flip (p=0.5), brightness
    and contrast jitter (+-0.2), Gaussian blur (p=0.2, sigma in [0.1, 1]).
    Output clamped to [0, 1]."""
    rng = np.random.default_rng(seed)
    pixels = patch.pixels
    if rng.random() < 0.5:
        pixels = pixels[:, ::-1]
    contrast = 1.0 + rng.uniform(-0.2, 0.2)
    brightness = rng.uniform(-0.2, 0.2)
    pixels = (pixels - 0.5) * contrast + 0.5 + brightness
    if rng.random() < 0.2:
        sigma = rng.uniform(0.1, 1.0)
        pixels = gaussian_filter(pixels, sigma=(sigma, sigma, 0))
    return Patch(pixels=np.clip(pixels, 0.0, 1.0).astype(np.float32))


def _features(patch: Patch) -> np.ndarray:
    """Grayscale 32x32 block-mean downsample, flattened, with a trailing
    constant 1 so the feature vector is never all-zero."""
    gray = patch.pixels.astype(np.float64) @ _GRAY_WEIGHTS
    block = PATCH_SIZE // _FEAT_SIDE
    pooled = gray.reshape(_FEAT_SIDE, block, _FEAT_SIDE, block).mean(axis=(1, 3))
    return np.concatenate([pooled.ravel(), [1.0]])


class ToyProjectionEncoder:
    """Frozen seeded linear projection to a unit-norm 512-d embedding."""

    kind = "toy_projection"
    output_dim = EMBED_DIM

    def __init__(self, seed: int = 0):
        self.seed = seed
        rng = np.random.default_rng(seed)
        self._weight = rng.standard_normal((_FEAT_DIM, EMBED_DIM)) / np.sqrt(_FEAT_DIM)
        self._weight.setflags(write=False)

    def encode(self, patch: Patch) -> np.ndarray:
        z = _features(patch) @ self._weight
        return z / np.linalg.norm(z)

    def encode_batch(self, patches: Sequence[Patch]) -> np.ndarray:
        # per-patch loop keeps batch output bit-identical to single encodes
        if not patches:
            return np.zeros((0, EMBED_DIM))
        return np.stack([self.encode(p) for p in patches])

    def state_bytes(self) -> bytes:
        """Backend state fingerprint; used to assert frozenness."""
        return self._weight.astype("<f4").tobytes()


class FileWeightsEncoder:
    """Projection encoder whose weight matrix is loaded from a
    manifest+blob weights file (tensor name `projection`, optional
    `bias`). The projection must map the 1025-d featurization to 512."""

    kind = "file_weights"
    output_dim = EMBED_DIM

    def __init__(self, path_prefix: str):
        self.path_prefix = str(path_prefix)
        try:
            tensors = read_manifest_blob(self.path_prefix)
        except FileNotFoundError as e:
            raise BackendError(f"weights file missing: {e}") from e
        if "projection" not in tensors:
            raise BackendError("weights file lacks a 'projection' tensor")
        weight = tensors["projection"].astype(np.float64)
        if weight.shape != (_FEAT_DIM, EMBED_DIM):
            raise BackendError(
                f"projection shape {weight.shape} != ({_FEAT_DIM}, {EMBED_DIM})"
            )
        bias = tensors.get("bias")
        if bias is not None and bias.shape != (EMBED_DIM,):
            raise BackendError(f"bias shape {bias.shape} != ({EMBED_DIM},)")
        self._weight = weight
        self._bias = None if bias is None else bias.astype(np.float64)
        self._weight.setflags(write=False)

    def encode(self, patch: Patch) -> np.ndarray:
        z = _features(patch) @ self._weight
        if self._bias is not None:
            z = z + self._bias
        norm = np.linalg.norm(z)
        if norm == 0.0:
            raise BackendError("file weights produced a zero embedding")
        return z / norm

    def encode_batch(self, patches: Sequence[Patch]) -> np.ndarray:
        if not patches:
            return np.zeros((0, EMBED_DIM))
        return np.stack([self.encode(p) for p in patches])

    def state_bytes(self) -> bytes:
        parts = [self._weight.astype("<f4").tobytes()]
        if self._bias is not None:
            parts.append(self._bias.astype("<f4").tobytes())
        return b"".join(parts)


def make_encoder(kind: str, seed: int = 0, weights_path: str | None = None):
    if kind == "toy_projection":
        return ToyProjectionEncoder(seed=seed)
    if kind == "file_weights":
        if not weights_path:
            raise BackendError("file_weights backend requires a weights path")
        return FileWeightsEncoder(weights_path)
    raise BackendError(f"unknown encoder backend kind: {kind!r}")


# ---------------------------------------------------------------------------
# Manifest + blob tensor files (shared with detector checkpoints)
# ---------------------------------------------------------------------------


def write_manifest_blob(path_prefix: str, tensors: dict[str, np.ndarray]) -> None:
    """Write `<prefix>.manifest` and `<prefix>.bin`. Tensors are stored as
    little-endian float32 in manifest order."""
    path_prefix = str(path_prefix)
    with open(path_prefix + ".manifest", "w") as mf, open(path_prefix + ".bin", "wb") as bf:
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            shape = ",".join(str(d) for d in arr.shape)
            mf.write(f"{name}\tf4\t{shape}\n")
            bf.write(arr.tobytes())


def read_manifest_blob(path_prefix: str) -> dict[str, np.ndarray]:
    """Read tensors written by write_manifest_blob. The blob length must
    match the manifest exactly."""
    path_prefix = str(path_prefix)
    manifest_path = path_prefix + ".manifest"
    blob_path = path_prefix + ".bin"
    if not os.path.exists(manifest_path) or not os.path.exists(blob_path):
        raise FileNotFoundError(f"{manifest_path} / {blob_path}")
    entries = []
    with open(manifest_path) as mf:
        for line in mf:
            line = line.rstrip("\n")
            if not line:
                continue
            name, dtype, shape_s = line.split("\t")
            if dtype != "f4":
                raise BackendError(f"unsupported dtype {dtype!r} for tensor {name!r}")
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            entries.append((name, shape))
    blob = open(blob_path, "rb").read()
    expected = sum(int(np.prod(s)) for _, s in entries) * 4
    if len(blob) != expected:
        raise BackendError(
            f"blob length {len(blob)} does not match manifest ({expected} bytes)"
        )
    out: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in entries:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        out[name] = arr.reshape(shape).copy()
        offset += count * 4
    return out
