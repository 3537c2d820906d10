"""Synthetic multi-structure cohorts, volume containers and slice augmentation.

Volumes are stored depth-major: ``data[z, y, x]``. A cohort on disk is a
directory of ``case_<id>/image`` and ``case_<id>/mask`` volume directories,
each holding ``header.json`` and a little-endian ``data.raw`` payload.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Raised when a volume directory cannot be decoded."""


@dataclass
class Volume:
    """3D scalar grid with physical voxel spacing.

    ``kind`` is ``"f32"`` for grayscale images in [0, 1] and ``"u8"`` for
    label masks in [0, classes - 1].
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "f32"
    classes: int = 0

    def __post_init__(self):
        if self.kind not in _DTYPES:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr, dtype=_DTYPES[self.kind].newbyteorder("="))
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing_mm}")
        if self.kind == "f32":
            if not np.all(np.isfinite(self.data)) or self.data.min() < 0 or self.data.max() > 1:
                raise ValueError("grayscale values must lie in [0, 1]")
        elif self.classes and self.data.max() >= self.classes:
            raise ValueError(f"label {int(self.data.max())} out of range for {self.classes} classes")

    @property
    def depth(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def header(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "depth": self.depth,
            "spacing_mm": list(self.spacing_mm),
            "dtype": self.kind,
            "classes": self.classes,
        }

    def payload(self) -> bytes:
        return self.data.astype(_DTYPES[self.kind], copy=False).tobytes()


@dataclass
class PatientCase:
    case_id: str
    image: Volume
    mask: Volume

    def __post_init__(self):
        if self.image.data.shape != self.mask.data.shape:
            raise ValueError(f"case {self.case_id}: image/mask shapes differ")
        if self.image.spacing_mm != self.mask.spacing_mm:
            raise ValueError(f"case {self.case_id}: image/mask spacing differ")


@dataclass
class CohortSpec:
    n_patients: int = 6
    slice_size: int = 64
    depth: int = 32
    n_structures: int = 3
    noise_sigma: float = 0.05
    bias_field_strength: float = 0.08
    seed: int = 0
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 2.0)
    max_retries: int = 200

    @property
    def classes(self) -> int:
        return self.n_structures + 1

    def validate(self) -> None:
        if self.n_patients < 2:
            raise ValueError("n_patients must be >= 2")
        if self.slice_size < 16 or self.slice_size % 16:
            raise ValueError(f"slice_size must be a positive multiple of 16, got {self.slice_size}")
        if self.depth < 4:
            raise ValueError("depth must be >= 4")
        if self.n_structures < 1:
            raise ValueError("n_structures must be >= 1")
        if self.noise_sigma < 0 or self.bias_field_strength < 0:
            raise ValueError("noise_sigma and bias_field_strength must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError("spacing_mm must be 3 positive values")


@dataclass
class AugmentParams:
    max_scale_delta: float = 0.1
    max_rotation_deg: float = 15.0
    max_shift_frac: float = 0.1

    def __post_init__(self):
        if min(self.max_scale_delta, self.max_rotation_deg, self.max_shift_frac) < 0:
            raise ValueError("augmentation ranges must be non-negative")
        if self.max_scale_delta >= 1:
            raise ValueError("max_scale_delta must be < 1")


# ---------------------------------------------------------------------------
# cohort generation

# per-structure (x, y, z) aspect multipliers, cycled when n_structures > 3:
# a wide flat body, a compact round one, an elongated one along z
_ASPECTS = ((1.35, 0.95, 0.75), (1.0, 1.0, 0.9), (0.7, 0.75, 1.35))
_MIN_FRACTION = 0.005
# radius ranges as fractions of the slice size (in-plane) and of the depth (z)
_RADIUS_RANGE = (0.11, 0.15)
_Z_RADIUS_RANGE = (0.22, 0.3)


def _structure_mask(shape, center, radii, angle, waves, amp) -> np.ndarray:
    z, y, x = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    dz, dy, dx = z - center[0], y - center[1], x - center[2]
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / radii[0]
    v = (-s * dx + c * dy) / radii[1]
    w = dz / radii[2]
    r = np.sqrt(u * u + v * v + w * w)
    rs = np.maximum(r, 1e-9)
    # low-frequency perturbation of the unit boundary, a function of direction only
    bump = np.zeros_like(r)
    for freq, phase, weight in waves:
        bump += weight * np.cos((freq[0] * u + freq[1] * v + freq[2] * w) / rs + phase)
    return r < 1.0 + amp * bump


def _bias_field(shape, rng) -> np.ndarray:
    grids = np.meshgrid(*(np.linspace(0.0, 1.0, n) for n in shape), indexing="ij")
    field_ = np.zeros(shape)
    total = 0.0
    for _ in range(3):
        k = rng.uniform(0.2, 1.0, size=3)
        weight = rng.uniform(0.5, 1.0)
        field_ += weight * np.cos(np.pi * sum(ki * g for ki, g in zip(k, grids)) + rng.uniform(0, 2 * np.pi))
        total += weight
    return field_ / total


def _generate_case(spec: CohortSpec, rng: np.random.Generator, case_id: str) -> PatientCase:
    shape = (spec.depth, spec.slice_size, spec.slice_size)
    n_vox = float(np.prod(shape))
    structuring = np.ones((3, 3, 3), dtype=bool)
    labels = np.zeros(shape, dtype=np.uint8)
    occupied = np.zeros(shape, dtype=bool)
    size, depth = spec.slice_size, spec.depth
    # shrink in-plane radii when many structures must share one slice plane
    crowd = min(1.0, np.sqrt(3.0 / spec.n_structures))

    for k in range(spec.n_structures):
        aspect = _ASPECTS[k % len(_ASPECTS)]
        for _ in range(spec.max_retries):
            base = rng.uniform(*_RADIUS_RANGE) * size * crowd
            radii = np.array([base * aspect[0], base * aspect[1], rng.uniform(*_Z_RADIUS_RANGE) * depth * aspect[2]])
            margin_xy = 1.05 * max(radii[0], radii[1]) + 1
            margin_z = min(radii[2] + 1, depth / 2 - 1)
            center = np.array([
                rng.uniform(margin_z, depth - 1 - margin_z),
                rng.uniform(margin_xy, size - 1 - margin_xy),
                rng.uniform(margin_xy, size - 1 - margin_xy),
            ])
            angle = rng.uniform(-np.pi / 6, np.pi / 6)
            waves = [(rng.normal(0, 2.0, size=3), rng.uniform(0, 2 * np.pi), rng.uniform(0.3, 1.0))
                     for _ in range(3)]
            amp = 0.12 / sum(wt for _, _, wt in waves)
            blob = _structure_mask(shape, center, radii, angle, waves, amp)
            if blob.sum() < _MIN_FRACTION * n_vox:
                continue
            if np.any(blob & occupied):
                continue
            labels[blob] = k + 1
            occupied |= ndimage.binary_dilation(blob, structure=structuring)
            break
        else:
            raise RuntimeError(
                f"case {case_id}: could not place structure {k + 1} without overlap "
                f"after {spec.max_retries} retries")

    background = 0.12 + rng.uniform(-0.03, 0.03)
    ladder = np.linspace(0.4, 0.88, spec.n_structures) if spec.n_structures > 1 else np.array([0.65])
    intensity = np.empty(spec.classes)
    intensity[0] = background
    intensity[1:] = ladder + rng.uniform(-0.04, 0.04, size=spec.n_structures)
    image = intensity[labels]
    image = image + spec.bias_field_strength * _bias_field(shape, rng)
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    spacing = tuple(spec.spacing_mm)
    return PatientCase(
        case_id=case_id,
        image=Volume(image, spacing, "f32", spec.classes),
        mask=Volume(labels, spacing, "u8", spec.classes),
    )


def generate_cohort(spec: CohortSpec) -> list[PatientCase]:
    """Generate ``spec.n_patients`` synthetic cases, bit-identical per seed.

    Each case holds ``n_structures`` disjoint, perturbed ellipsoids labelled
    1..n over background 0; the image is a per-structure intensity plus a
    smooth additive bias field and Gaussian noise, clipped to [0, 1].
    """
    spec.validate()
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_patients)
    return [_generate_case(spec, np.random.default_rng(child), f"{i:03d}") for i, child in enumerate(children)]


# ---------------------------------------------------------------------------
# volume and cohort I/O


def save_volume(v: Volume, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "header.json").write_text(json.dumps(v.header(), indent=2, sort_keys=True) + "\n")
    (directory / "data.raw").write_bytes(v.payload())


def load_volume(directory) -> Volume:
    directory = Path(directory)
    try:
        header = json.loads((directory / "header.json").read_text())
        dims = [int(header[k]) for k in ("depth", "height", "width")]
        spacing = tuple(float(s) for s in header["spacing_mm"])
        dtype_name = header["dtype"]
        classes = int(header.get("classes", 0))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise VolumeFormatError(f"{directory}: malformed header ({exc})") from exc
    if dtype_name not in _DTYPES:
        raise VolumeFormatError(f"{directory}: unknown dtype {dtype_name!r}")
    if len(spacing) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{directory}: malformed header dimensions")
    dtype = _DTYPES[dtype_name]
    raw = (directory / "data.raw").read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{directory}: payload has {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype=dtype).reshape(dims)
    try:
        return Volume(data.copy(), spacing, dtype_name, classes)
    except ValueError as exc:
        raise VolumeFormatError(f"{directory}: {exc}") from exc


def save_cohort(cases: Sequence[PatientCase], root) -> None:
    root = Path(root)
    for case in cases:
        save_volume(case.image, root / f"case_{case.case_id}" / "image")
        save_volume(case.mask, root / f"case_{case.case_id}" / "mask")


def load_cohort(root) -> list[PatientCase]:
    root = Path(root)
    case_dirs = sorted(p for p in root.glob("case_*") if p.is_dir())
    if not case_dirs:
        raise FileNotFoundError(f"no case_* directories under {root}")
    return [
        PatientCase(p.name[len("case_"):], load_volume(p / "image"), load_volume(p / "mask"))
        for p in case_dirs
    ]


def cohort_hash(cases: Sequence[PatientCase]) -> str:
    """SHA-256 over case ids, headers and payloads, in case-id order."""
    h = hashlib.sha256()
    for case in sorted(cases, key=lambda c: c.case_id):
        h.update(case.case_id.encode())
        for vol in (case.image, case.mask):
            h.update(json.dumps(vol.header(), sort_keys=True).encode())
            h.update(vol.payload())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# slices, encoding, augmentation


def one_hot(mask_slice: np.ndarray, classes: int) -> np.ndarray:
    """Encode a label grid as a ``(classes, *mask.shape)`` float32 indicator array."""
    mask_slice = np.asarray(mask_slice)
    if mask_slice.size and (mask_slice.min() < 0 or mask_slice.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes - 1}]")
    channels = np.arange(classes).reshape((classes,) + (1,) * mask_slice.ndim)
    return (mask_slice[None] == channels).astype(np.float32)


def affine_pair(image: np.ndarray, mask: np.ndarray, scale: float = 1.0, angle_deg: float = 0.0,
                shift=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Apply one scale/rotation/shift about the slice centre to an image and its mask.

    Positive angles rotate counter-clockwise as displayed (row index pointing
    down). ``shift`` is ``(dy, dx)`` in pixels. The image is resampled
    bilinearly, the mask by nearest neighbour; both are zero-filled.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape or image.ndim != 2:
        raise ValueError(f"image and mask must be matching 2D arrays, got {image.shape} and {mask.shape}")
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    # forward map in (row, col): rotate then scale about the centre, then shift
    forward = scale * np.array([[c, -s], [s, c]])
    inverse = np.linalg.inv(forward)
    center = (np.array(image.shape, dtype=np.float64) - 1) / 2
    offset = center - inverse @ (center + np.asarray(shift, dtype=np.float64))
    out_img = ndimage.affine_transform(image.astype(np.float32), inverse, offset, order=1,
                                       mode="constant", cval=0.0)
    out_mask = ndimage.affine_transform(mask, inverse, offset, order=0, mode="constant", cval=0)
    return out_img.astype(np.float32), out_mask.astype(mask.dtype)


def augment(image_slice: np.ndarray, mask_slice: np.ndarray, params: AugmentParams,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    scale = 1.0 + rng.uniform(-params.max_scale_delta, params.max_scale_delta)
    angle = rng.uniform(-params.max_rotation_deg, params.max_rotation_deg)
    shift = rng.uniform(-params.max_shift_frac, params.max_shift_frac, size=2) * np.array(image_slice.shape)
    return affine_pair(image_slice, mask_slice, scale, angle, shift)


@dataclass
class SlicePool:
    """All axial slices of a set of cases, as stacked arrays."""

    images: np.ndarray  # (N, H, W) float32
    masks: np.ndarray  # (N, H, W) uint8
    index: list[tuple[str, int]] = field(default_factory=list)  # (case_id, z) per slice

    @classmethod
    def from_cases(cls, cases: Sequence[PatientCase]) -> SlicePool:
        images = np.concatenate([c.image.data for c in cases], axis=0)
        masks = np.concatenate([c.mask.data for c in cases], axis=0)
        index = [(c.case_id, z) for c in cases for z in range(c.image.depth)]
        return cls(images, masks, index)

    def __len__(self) -> int:
        return len(self.images)

    def batches(self, batch_size: int, rng: np.random.Generator,
                augment_params: AugmentParams | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Shuffle the pool and yield (images, masks) batches without replacement.

        A trailing batch of a single slice is dropped: batch-statistics
        normalisation is undefined for it.
        """
        order = rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                break
            imgs, msks = self.images[idx], self.masks[idx]
            if augment_params is not None:
                pairs = [augment(i, m, augment_params, rng) for i, m in zip(imgs, msks)]
                imgs = np.stack([p[0] for p in pairs])
                msks = np.stack([p[1] for p in pairs])
            yield imgs, msks
