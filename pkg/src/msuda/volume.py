"""Volume/label containers, file IO, and the preprocessing chain.

All images are 3D scalar grids indexed (x, y, z) with physical voxel
spacing in mm. Files are stored as a JSON sidecar header plus a raw
payload (little-endian float32 for images, uint8 for labels) with the
x axis varying fastest, so round trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

FORMAT_ID = "msuda-volume-v1"
CANONICAL_ORIENTATION = "RAI"

# segmentation classes
CLASS_BACKGROUND = 0
CLASS_INTRA = 1   # intra-meatal tumor component
CLASS_EXTRA = 2   # extra-meatal tumor component
CLASS_COCHLEA = 3
ALL_CLASSES = (CLASS_BACKGROUND, CLASS_INTRA, CLASS_EXTRA, CLASS_COCHLEA)

MODALITIES = ("source", "target", "synthetic-target")

_OPPOSITE = {"R": "L", "L": "R", "A": "P", "P": "A", "I": "S", "S": "I"}
_AXIS_FAMILY = {"R": 0, "L": 0, "A": 1, "P": 1, "I": 2, "S": 2}


class VolumeError(ValueError):
    """Malformed volume data or inconsistent volume files."""


def _check_geometry(data, spacing):
    if data.ndim != 3:
        raise VolumeError(f"expected 3D data, got shape {data.shape}")
    if min(data.shape) < 1:
        raise VolumeError(f"all dims must be >= 1, got {data.shape}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise VolumeError(f"spacing must be 3 positive floats, got {spacing}")


def _check_orientation(orientation):
    if (len(orientation) != 3
            or any(c not in _AXIS_FAMILY for c in orientation)
            or sorted(_AXIS_FAMILY[c] for c in orientation) != [0, 1, 2]):
        raise VolumeError(f"bad orientation tag {orientation!r}")


@dataclass
class Volume:
    """A 3D scalar image with physical spacing and acquisition metadata."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    orientation: str = CANONICAL_ORIENTATION
    site_id: str | None = None
    modality: str | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(self.data, self.spacing)
        _check_orientation(self.orientation)
        if not np.isfinite(self.data).all():
            raise VolumeError("volume contains non-finite values")
        if self.modality is not None and self.modality not in MODALITIES:
            raise VolumeError(f"unknown modality {self.modality!r}")

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data):
        return replace(self, data=np.asarray(data, dtype=np.float32))


@dataclass
class LabelMap:
    """A 3D integer grid over classes 0..3, geometry-matched to a Volume."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    orientation: str = CANONICAL_ORIENTATION
    site_id: str | None = None
    modality: str | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(self.data, self.spacing)
        _check_orientation(self.orientation)
        if self.data.max(initial=0) > max(ALL_CLASSES):
            raise VolumeError(
                f"label values must be in {ALL_CLASSES}, found max {self.data.max()}")

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data):
        return replace(self, data=np.asarray(data, dtype=np.uint8))


@dataclass
class PreprocessConfig:
    """Settings for the reorient/resample/crop/normalize chain."""

    target_spacing: tuple = (0.41, 0.41, 1.0)
    crop_shape: tuple = (256, 144, 32)
    clip_percentiles: tuple = (0.0, 99.9)
    output_range: tuple = (-1.0, 1.0)

    def __post_init__(self):
        self.target_spacing = tuple(float(s) for s in self.target_spacing)
        self.crop_shape = tuple(int(c) for c in self.crop_shape)
        self.clip_percentiles = tuple(float(p) for p in self.clip_percentiles)
        self.output_range = tuple(float(r) for r in self.output_range)
        if any(c <= 0 for c in self.crop_shape):
            raise VolumeError(f"crop dims must be positive, got {self.crop_shape}")
        lo, hi = self.clip_percentiles
        if not (0 <= lo < hi <= 100):
            raise VolumeError(f"need 0 <= lo < hi <= 100 percentiles, got {lo}, {hi}")
        if self.output_range[0] >= self.output_range[1]:
            raise VolumeError(f"output range must be increasing, got {self.output_range}")
        if any(s <= 0 for s in self.target_spacing):
            raise VolumeError(f"target spacing must be positive, got {self.target_spacing}")


# ---------------------------------------------------------------------------
# file IO: <name>.json header + <name>.raw payload, x varying fastest
# ---------------------------------------------------------------------------

def _paths(path):
    path = Path(path)
    if path.suffix == ".json":
        base = path.with_suffix("")
    elif path.suffix == ".raw":
        base = path.with_suffix("")
    else:
        base = path
    return base.with_suffix(".json"), base.with_suffix(".raw")


def _save(obj, path, kind, np_dtype, dtype_name):
    header_path, raw_path = _paths(path)
    if kind == "image" and not np.isfinite(obj.data).all():
        raise VolumeError("refusing to save non-finite values")
    header = {
        "format": FORMAT_ID,
        "kind": kind,
        "dims": list(obj.data.shape),
        "spacing": list(obj.spacing),
        "orientation": obj.orientation,
        "dtype": dtype_name,
        "site_id": obj.site_id,
        "modality": obj.modality,
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    with open(header_path, "w") as f:
        json.dump(header, f, indent=1, sort_keys=True)
        f.write("\n")
    payload = np.ascontiguousarray(obj.data.astype(np_dtype).flatten(order="F"))
    raw_path.write_bytes(payload.tobytes())


def _load(path, expected_kind, np_dtype):
    header_path, raw_path = _paths(path)
    if not header_path.exists():
        raise FileNotFoundError(f"missing header {header_path}")
    with open(header_path) as f:
        header = json.load(f)
    if header.get("format") != FORMAT_ID:
        raise VolumeError(f"unknown format id {header.get('format')!r} in {header_path}")
    if header.get("kind") != expected_kind:
        raise VolumeError(
            f"expected kind {expected_kind!r}, found {header.get('kind')!r} in {header_path}")
    dims = tuple(int(d) for d in header["dims"])
    raw = raw_path.read_bytes()
    expected_bytes = int(np.prod(dims)) * np.dtype(np_dtype).itemsize
    if len(raw) != expected_bytes:
        raise VolumeError(
            f"payload size mismatch in {raw_path}: header implies "
            f"{expected_bytes} bytes, file has {len(raw)}")
    data = np.frombuffer(raw, dtype=np_dtype).reshape(dims, order="F")
    return data.copy(), header


def save_volume(v: Volume, path) -> None:
    _save(v, path, "image", "<f4", "float32")


def load_volume(path) -> Volume:
    data, header = _load(path, "image", "<f4")
    return Volume(data, tuple(header["spacing"]), header["orientation"],
                  header.get("site_id"), header.get("modality"))


def save_labelmap(l: LabelMap, path) -> None:
    _save(l, path, "label", "u1", "uint8")


def load_labelmap(path) -> LabelMap:
    data, header = _load(path, "label", "u1")
    return LabelMap(data, tuple(header["spacing"]), header["orientation"],
                    header.get("site_id"), header.get("modality"))


# ---------------------------------------------------------------------------
# preprocessing operations
# ---------------------------------------------------------------------------

def reorient(obj, target: str = CANONICAL_ORIENTATION):
    """Permute/flip axes so the orientation tag becomes `target`."""
    _check_orientation(target)
    src = obj.orientation
    if src == target:
        return replace(obj)
    perm = []
    flips = []
    for letter in target:
        fam = _AXIS_FAMILY[letter]
        axis = next(i for i, c in enumerate(src) if _AXIS_FAMILY[c] == fam)
        perm.append(axis)
        flips.append(src[axis] == _OPPOSITE[letter])
    data = np.transpose(obj.data, perm)
    spacing = tuple(obj.spacing[a] for a in perm)
    for ax, flip in enumerate(flips):
        if flip:
            data = np.flip(data, axis=ax)
    return replace(obj, data=np.ascontiguousarray(data), spacing=spacing,
                   orientation=target)


def reorient_point(point, dims, src: str, target: str = CANONICAL_ORIENTATION):
    """Map a voxel coordinate through the same permutation/flip as reorient."""
    _check_orientation(src)
    _check_orientation(target)
    out = []
    for letter in target:
        fam = _AXIS_FAMILY[letter]
        axis = next(i for i, c in enumerate(src) if _AXIS_FAMILY[c] == fam)
        p = point[axis]
        if src[axis] == _OPPOSITE[letter]:
            p = dims[axis] - 1 - p
        out.append(int(p))
    return tuple(out)


def resample(obj, target_spacing):
    """Resample to a new voxel spacing.

    Output dims are round(in_dims * in_spacing / target_spacing), at least 1.
    Volumes use trilinear interpolation, label maps nearest-neighbor, both
    with edge clamping, so labels never gain class codes absent in the input.
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target_spacing):
        raise VolumeError(f"target spacing must be positive, got {target_spacing}")
    in_dims = obj.data.shape
    out_dims = tuple(max(1, int(round(n * s_in / s_out)))
                     for n, s_in, s_out in zip(in_dims, obj.spacing, target_spacing))
    # output voxel i samples input coordinate i * (target / in) along each axis
    axes = [np.arange(n_out, dtype=np.float64) * (s_out / s_in)
            for n_out, s_out, s_in in zip(out_dims, target_spacing, obj.spacing)]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.ravel() for g in grid])
    order = 0 if isinstance(obj, LabelMap) else 1
    src = obj.data.astype(np.float64) if order == 1 else obj.data
    out = map_coordinates(src, coords, order=order, mode="nearest")
    out = out.reshape(out_dims)
    return replace(obj, data=out.astype(obj.data.dtype), spacing=target_spacing)


def crop_about_landmark(obj, center, crop_shape):
    """Crop a fixed-shape block centered on a voxel, zero-padding as needed.

    The center voxel lands at floor(crop_shape / 2) of the output.
    """
    crop_shape = tuple(int(c) for c in crop_shape)
    if any(c <= 0 for c in crop_shape):
        raise VolumeError(f"crop dims must be positive, got {crop_shape}")
    data = obj.data
    out = np.zeros(crop_shape, dtype=data.dtype)
    src_lo, src_hi, dst_lo, dst_hi = [], [], [], []
    for ax in range(3):
        start = int(center[ax]) - crop_shape[ax] // 2
        s_lo = max(0, start)
        s_hi = min(data.shape[ax], start + crop_shape[ax])
        if s_lo >= s_hi:  # crop entirely outside: all zeros along this axis
            return replace(obj, data=out)
        src_lo.append(s_lo)
        src_hi.append(s_hi)
        dst_lo.append(s_lo - start)
        dst_hi.append(s_hi - start)
    out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
        data[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
    return replace(obj, data=out)


def normalize(v: Volume, cfg: PreprocessConfig) -> Volume:
    """Z-score, clip to percentiles of the z-scored values, rescale.

    Degenerate volumes (constant, or a degenerate clip window) map to all
    zeros rather than dividing by zero.
    """
    x = v.data.astype(np.float64)
    std = x.std()
    if std == 0:
        return v.with_data(np.zeros_like(x, dtype=np.float32))
    z = (x - x.mean()) / std
    lo = np.percentile(z, cfg.clip_percentiles[0])
    hi = np.percentile(z, cfg.clip_percentiles[1])
    if hi - lo <= 0:
        return v.with_data(np.zeros_like(x, dtype=np.float32))
    z = np.clip(z, lo, hi)
    out_lo, out_hi = cfg.output_range
    out = (z - lo) / (hi - lo) * (out_hi - out_lo) + out_lo
    return v.with_data(out.astype(np.float32))


def label_centroid(lbl: LabelMap, cls: int = CLASS_COCHLEA):
    """Rounded centroid voxel of a class, or None when the class is absent."""
    idx = np.argwhere(lbl.data == cls)
    if idx.size == 0:
        return None
    return tuple(int(round(c)) for c in idx.mean(axis=0))


def preprocess_case(img: Volume, lbl: LabelMap | None, landmark, cfg: PreprocessConfig):
    """Run the full chain: reorient, resample, crop about landmark, normalize.

    `landmark` is a voxel coordinate in the raw image; when None it falls
    back to the cochlea-label centroid, then to the volume center. Returns
    (image, label-or-None, landmark-after-crop).
    """
    raw_dims = img.data.shape
    raw_orientation = img.orientation
    img = reorient(img, CANONICAL_ORIENTATION)
    if lbl is not None:
        if lbl.data.shape != raw_dims:
            raise VolumeError("label geometry does not match image")
        lbl = reorient(lbl, CANONICAL_ORIENTATION)
    if landmark is not None:
        landmark = reorient_point(landmark, raw_dims, raw_orientation,
                                  CANONICAL_ORIENTATION)

    spacing_in = img.spacing
    img = resample(img, cfg.target_spacing)
    if lbl is not None:
        lbl = resample(lbl, cfg.target_spacing)

    if landmark is None and lbl is not None:
        landmark = label_centroid(lbl, CLASS_COCHLEA)
    if landmark is None:
        landmark = tuple(n // 2 for n in img.data.shape)
    else:
        landmark = tuple(
            min(max(int(round(p * s_in / s_out)), 0), n - 1)
            for p, s_in, s_out, n in zip(landmark, spacing_in,
                                         cfg.target_spacing, img.data.shape))

    img = crop_about_landmark(img, landmark, cfg.crop_shape)
    if lbl is not None:
        lbl = crop_about_landmark(lbl, landmark, cfg.crop_shape)
    img = normalize(img, cfg)
    out_landmark = tuple(c // 2 for c in cfg.crop_shape)
    return img, lbl, out_landmark
