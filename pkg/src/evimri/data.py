"""Volume ingestion, preprocessing, augmentation, patches, splits, synthetic data.

Volumes are (H, W, C) arrays with C slices along the last axis and a
per-axis voxel spacing in mm.  The pipeline conventions, applied uniformly:
intensities live in [-1, 1]; pixels that leave the frame (rotation, crop
overhang) are filled with -1; crop windows are centered on the biopsy
location; boundary slices are replicated when a neighbor is missing.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass

import h5py
import numpy as np
from scipy import ndimage

MODALITIES = ("T2", "ADC")
DOMAINS = ("source_3T", "target_1p5T")
ROTATION_ANGLES = tuple(range(0, 100, 5))  # 20-fold augmentation
PATCH_SIZE = 64
FILL_VALUE = -1.0


@dataclass
class VolumeRecord:
    voxels: np.ndarray
    spacing: tuple[float, float, float]
    patient_id: str
    modality: str
    domain: str
    biopsy_location: tuple[int, int, int] | None = None
    label: int | None = None
    gleason: int | None = None
    rotation_deg: int = 0

    def __post_init__(self) -> None:
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 3:
            raise ValueError("voxels must be a 3D (H, W, C) array")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError("spacing components must be positive")
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.biopsy_location is not None:
            self.biopsy_location = tuple(int(v) for v in self.biopsy_location)
            if not 0 <= self.biopsy_location[2] < self.voxels.shape[2]:
                raise ValueError("biopsy slice index outside the volume")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")

    def replace(self, **changes) -> "VolumeRecord":
        return dataclasses.replace(self, **changes)


@dataclass
class PatchRecord:
    pixels: np.ndarray
    patient_id: str
    modalities: tuple[str, ...]
    rotation_deg: int
    label: int | None

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[:2] != (PATCH_SIZE, PATCH_SIZE):
            raise ValueError(f"patch must be {PATCH_SIZE}x{PATCH_SIZE}xK")
        if self.pixels.shape[2] not in (2, 3, 6):
            raise ValueError("patch depth must be 2, 3 or 6 channels")
        if self.pixels.min() < -1 - 1e-9 or self.pixels.max() > 1 + 1e-9:
            raise ValueError("patch values must lie in [-1, 1]")
        if self.rotation_deg not in ROTATION_ANGLES:
            raise ValueError(f"rotation_deg must be one of {ROTATION_ANGLES}")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        self.modalities = tuple(self.modalities)

    @property
    def patch_id(self) -> str:
        return f"{self.patient_id}/rot{self.rotation_deg:03d}"


@dataclass(frozen=True)
class SplitManifest:
    train: frozenset[str]
    val: frozenset[str]
    test: frozenset[str]
    stage: str

    def __post_init__(self) -> None:
        if self.stage not in ("translation", "classification"):
            raise ValueError(f"unknown stage {self.stage!r}")
        parts = (frozenset(self.train), frozenset(self.val), frozenset(self.test))
        object.__setattr__(self, "train", parts[0])
        object.__setattr__(self, "val", parts[1])
        object.__setattr__(self, "test", parts[2])
        if (parts[0] & parts[1]) or (parts[0] & parts[2]) or (parts[1] & parts[2]):
            raise ValueError("split partitions must be pairwise disjoint")

    def partition_of(self, patient_id: str) -> str | None:
        for name in ("train", "val", "test"):
            if patient_id in getattr(self, name):
                return name
        return None

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "train": sorted(self.train),
            "val": sorted(self.val),
            "test": sorted(self.test),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(
            train=frozenset(d["train"]),
            val=frozenset(d["val"]),
            test=frozenset(d["test"]),
            stage=d["stage"],
        )


# --------------------------------------------------------------------------
# resampling and normalization


def _axis_weight_matrix(n_in: int, src: float, dst: float, radius: int = 3) -> np.ndarray:
    """Row-normalized cosine-windowed sinc weights for one axis.

    The kernel is stretched by the downsampling factor to suppress
    aliasing; output positions that fall (numerically) on an input knot
    snap to it exactly, so integer-aligned grids reproduce input samples
    bit-for-bit.
    """
    n_out = max(1, int(math.floor(n_in * src / dst + 0.5)))
    scale = dst / src
    stretch = max(1.0, scale)
    support = radius * stretch
    weights = np.zeros((n_out, n_in))
    for i in range(n_out):
        pos = i * scale
        nearest = int(round(pos))
        if abs(pos - nearest) < 1e-9 and 0 <= nearest < n_in:
            weights[i, nearest] = 1.0
            continue
        lo = max(0, int(math.ceil(pos - support)))
        hi = min(n_in - 1, int(math.floor(pos + support)))
        taps = np.arange(lo, hi + 1)
        t = (taps - pos) / stretch
        w = np.sinc(t) * np.cos(np.pi * t / (2.0 * radius))
        w[np.abs(t) >= radius] = 0.0
        weights[i, lo : hi + 1] = w / w.sum()
    return weights


def resample_volume(volume: VolumeRecord, target_spacing) -> VolumeRecord:
    """Resample a volume onto a grid with the requested voxel spacing."""
    if len(target_spacing) != 3 or min(target_spacing) <= 0:
        raise ValueError("target spacing components must be positive")
    out = volume.voxels
    for axis in range(3):
        src, dst = volume.spacing[axis], float(target_spacing[axis])
        if src == dst:
            continue
        w = _axis_weight_matrix(out.shape[axis], src, dst)
        moved = np.moveaxis(out, axis, 0)
        moved = np.tensordot(w, moved, axes=(1, 0))
        out = np.moveaxis(moved, 0, axis)
    biopsy = volume.biopsy_location
    if biopsy is not None:
        ratios = [volume.spacing[a] / float(target_spacing[a]) for a in range(3)]
        biopsy = tuple(
            int(np.clip(round(biopsy[a] * ratios[a]), 0, out.shape[a] - 1)) for a in range(3)
        )
    return volume.replace(voxels=out.copy(), spacing=tuple(float(s) for s in target_spacing), biopsy_location=biopsy)


def normalize_intensity(volume: VolumeRecord) -> VolumeRecord:
    """Affine rescale so min -> -1 and max -> +1; constant volumes map to -1."""
    v = volume.voxels
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return volume.replace(voxels=np.full_like(v, FILL_VALUE))
    return volume.replace(voxels=(v - lo) / (hi - lo) * 2.0 - 1.0)


# --------------------------------------------------------------------------
# augmentation and patch extraction


def _rotate_point(row: float, col: float, angle_deg: float, shape) -> tuple[float, float]:
    # matches scipy.ndimage.rotate: content at p lands at c + R(p - c)
    cr, cc = (shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0
    th = math.radians(angle_deg)
    dr, dc = row - cr, col - cc
    return (
        cr + math.cos(th) * dr - math.sin(th) * dc,
        cc + math.sin(th) * dr + math.cos(th) * dc,
    )


def augment_rotations(volume: VolumeRecord) -> list[VolumeRecord]:
    """The 20 in-plane rotated copies (0..95 deg in 5-deg steps).

    Rotation is about the slice-normal axis with bilinear interpolation and
    -1 fill; the biopsy (row, col) is rotated along with the image so the
    lesion stays under the tag.
    """
    copies = []
    for angle in ROTATION_ANGLES:
        if angle == 0:
            copies.append(volume.replace(voxels=volume.voxels.copy(), rotation_deg=0))
            continue
        rotated = ndimage.rotate(
            volume.voxels, angle, axes=(0, 1), reshape=False, order=1, mode="constant", cval=FILL_VALUE
        )
        biopsy = volume.biopsy_location
        if biopsy is not None:
            r, c = _rotate_point(biopsy[0], biopsy[1], angle, volume.voxels.shape)
            biopsy = (
                int(np.clip(round(r), 0, volume.voxels.shape[0] - 1)),
                int(np.clip(round(c), 0, volume.voxels.shape[1] - 1)),
                biopsy[2],
            )
        copies.append(
            volume.replace(voxels=np.clip(rotated, -1.0, 1.0), biopsy_location=biopsy, rotation_deg=angle)
        )
    return copies


def extract_patch(volume: VolumeRecord, patch_size: int = PATCH_SIZE) -> PatchRecord:
    """Cut the 64x64x3 window centered on the biopsy across three slices.

    Uses slices (s-1, s, s+1) with edge replication when the biopsy sits on
    a boundary slice; window overhang beyond the image edge is filled with
    -1 so the lesion stays centered.
    """
    if volume.biopsy_location is None:
        raise ValueError("volume has no biopsy location to crop around")
    row, col, sl = volume.biopsy_location
    h, w, n_slices = volume.voxels.shape
    half = patch_size // 2
    slice_ids = [max(0, sl - 1), sl, min(n_slices - 1, sl + 1)]
    out = np.full((patch_size, patch_size, 3), FILL_VALUE)
    r0, c0 = row - half, col - half
    src_r = slice(max(0, r0), min(h, r0 + patch_size))
    src_c = slice(max(0, c0), min(w, c0 + patch_size))
    dst_r = slice(src_r.start - r0, src_r.stop - r0)
    dst_c = slice(src_c.start - c0, src_c.stop - c0)
    for k, s in enumerate(slice_ids):
        out[dst_r, dst_c, k] = volume.voxels[src_r, src_c, s]
    return PatchRecord(
        pixels=np.clip(out, -1.0, 1.0),
        patient_id=volume.patient_id,
        modalities=(volume.modality,),
        rotation_deg=volume.rotation_deg,
        label=volume.label,
    )


_STACK_LAYOUTS = {
    "mpmri": "center",
    "mpmri_coteaching": "center",
    "vol_mpmri": "full",
    "ms_mpmri": "full",
}


def stack_modalities(t2: PatchRecord, adc: PatchRecord, variant: str) -> PatchRecord:
    """Combine T2 and ADC patches into the channel layout of a variant.

    ``center`` layouts keep only the suspicious slice of each modality
    (2 channels); ``full`` layouts concatenate all six slices T2-first.
    """
    if variant not in _STACK_LAYOUTS:
        raise ValueError(f"variant {variant!r} does not stack two modalities")
    if t2.patient_id != adc.patient_id:
        raise ValueError("patches belong to different patients")
    if t2.rotation_deg != adc.rotation_deg:
        raise ValueError("patches carry different rotation tags")
    if t2.label != adc.label:
        raise ValueError("patches disagree on the label")
    if _STACK_LAYOUTS[variant] == "center":
        pixels = np.stack([t2.pixels[:, :, 1], adc.pixels[:, :, 1]], axis=-1)
    else:
        pixels = np.concatenate([t2.pixels, adc.pixels], axis=-1)
    return PatchRecord(
        pixels=pixels,
        patient_id=t2.patient_id,
        modalities=("T2", "ADC"),
        rotation_deg=t2.rotation_deg,
        label=t2.label,
    )


def unstack_modalities(patch: PatchRecord) -> dict[str, np.ndarray]:
    """Inverse of stack_modalities' channel packing (T2 first, ADC second)."""
    if patch.modalities != ("T2", "ADC"):
        raise ValueError("patch does not hold a T2+ADC stack")
    half = patch.pixels.shape[2] // 2
    return {"T2": patch.pixels[:, :, :half], "ADC": patch.pixels[:, :, half:]}


# --------------------------------------------------------------------------
# splits


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_splits(
    records,
    stage: str,
    seed: int,
    val_fraction: float | None = None,
    test_fraction: float | None = None,
) -> SplitManifest:
    """Patient-exclusive train/val(/test) partitions at the stated ratios.

    Translation stage: 90/10 train/val over all patients, no test set.
    Classification stage: the test set is drawn from target-domain patients
    (the standalone local test set, ~1/3 of them), then the remaining pool
    is split 80/20 into train/val.  Deterministic for a given seed.
    """
    if stage == "translation":
        val_fraction = 0.1 if val_fraction is None else val_fraction
    elif stage == "classification":
        val_fraction = 0.2 if val_fraction is None else val_fraction
        test_fraction = 0.33 if test_fraction is None else test_fraction
    else:
        raise ValueError(f"unknown stage {stage!r}")

    domain_by_patient: dict[str, str] = {}
    for rec in records:
        prev = domain_by_patient.setdefault(rec.patient_id, rec.domain)
        if prev != rec.domain:
            raise ValueError(f"patient {rec.patient_id} appears in two domains")
    patients = sorted(domain_by_patient)
    if not patients:
        raise ValueError("no records to split")
    rng = np.random.default_rng(seed)

    if stage == "translation":
        # hold out the fraction per domain so validation sees both datasets
        train: set[str] = set()
        val: set[str] = set()
        for domain in sorted({d for d in domain_by_patient.values()}):
            order = sorted(p for p, d in domain_by_patient.items() if d == domain)
            rng.shuffle(order)
            n_val = max(1, _round_half_up(val_fraction * len(order)))
            if n_val >= len(order):
                raise ValueError(f"too few {domain} patients for a train/val split")
            val.update(order[:n_val])
            train.update(order[n_val:])
        return SplitManifest(train=frozenset(train), val=frozenset(val), test=frozenset(), stage=stage)

    targets = sorted(p for p, d in domain_by_patient.items() if d == "target_1p5T")
    if not targets:
        raise ValueError("classification split needs target-domain patients for the test set")
    rng.shuffle(targets)
    n_test = max(1, _round_half_up(test_fraction * len(targets)))
    if n_test >= len(targets) and len(targets) == len(patients):
        raise ValueError("too few patients to carve out a standalone test set")
    test = set(targets[:n_test])
    pool = [p for p in patients if p not in test]
    rng.shuffle(pool)
    n_val = max(1, _round_half_up(val_fraction * len(pool)))
    if n_val >= len(pool):
        raise ValueError("too few patients left for a train/val split")
    return SplitManifest(
        train=frozenset(pool[n_val:]), val=frozenset(pool[:n_val]), test=frozenset(test), stage=stage
    )


# --------------------------------------------------------------------------
# slice <-> volume


def volume_to_slices(volume: VolumeRecord) -> list[np.ndarray]:
    """Split a volume into its C slices (views are copied)."""
    return [volume.voxels[:, :, i].copy() for i in range(volume.voxels.shape[2])]


def volume_metadata(volume: VolumeRecord) -> dict:
    return {
        "spacing": volume.spacing,
        "patient_id": volume.patient_id,
        "modality": volume.modality,
        "domain": volume.domain,
        "biopsy_location": volume.biopsy_location,
        "label": volume.label,
        "gleason": volume.gleason,
        "rotation_deg": volume.rotation_deg,
        "num_slices": volume.voxels.shape[2],
    }


def slices_to_volume(slices, meta: dict) -> VolumeRecord:
    """Restack slices into a volume carrying the given metadata."""
    if not slices:
        raise ValueError("no slices to stack")
    shapes = {s.shape for s in slices}
    if len(shapes) != 1:
        raise ValueError("slices have inconsistent shapes")
    expected = meta.get("num_slices")
    if expected is not None and expected != len(slices):
        raise ValueError(f"metadata expects {expected} slices, got {len(slices)}")
    voxels = np.stack(slices, axis=-1)
    meta = {k: v for k, v in meta.items() if k != "num_slices"}
    return VolumeRecord(voxels=voxels, **meta)


# --------------------------------------------------------------------------
# synthetic two-domain corpus


@dataclass(frozen=True)
class SynthDataset:
    """Synthetic records plus the planted ground truth behind them."""

    records: list[VolumeRecord]
    true_labels: dict[str, int]
    flipped_patients: frozenset[str]
    cluster_patients: frozenset[str]

    @property
    def patients(self) -> list[str]:
        return sorted(self.true_labels)


def _smooth_field(rng: np.random.Generator, size, sigma, lo: float, hi: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(size), sigma=sigma)
    fmin, fmax = field.min(), field.max()
    if fmax == fmin:
        return np.full(size, (lo + hi) / 2.0)
    return (field - fmin) / (fmax - fmin) * (hi - lo) + lo


def _lesion_profile(size, center, sigma: float) -> np.ndarray:
    rows = np.arange(size[0])[:, None, None]
    cols = np.arange(size[1])[None, :, None]
    sls = np.arange(size[2])[None, None, :]
    d2 = (rows - center[0]) ** 2 + (cols - center[1]) ** 2 + ((sls - center[2]) * 2.5) ** 2
    return np.exp(-d2 / (2.0 * sigma**2))


def synth_two_domain_dataset(
    n_patients: int,
    seed: int,
    size: tuple[int, int, int] = (64, 64, 8),
    domains: tuple[str, ...] = DOMAINS,
    noise_fraction: float = 0.0,
    lesion_margin: float = 0.8,
    shift_strength: float = 1.0,
    spacing: tuple[float, float, float] = (0.5, 0.5, 3.0),
) -> SynthDataset:
    """Generate a desk-scale two-domain corpus with planted ground truth.

    Each patient gets a T2-like and an ADC-like volume in one acquisition
    domain.  Lesion intensity at the biopsy center differs between classes
    by exactly ``lesion_margin`` (sign-flipped on ADC).  Target-domain
    volumes receive a global blur+contrast shift of ``shift_strength``.

    ``noise_fraction`` plants label noise concentrated in one cluster:
    2*round(noise_fraction*n) patients share a distinctive marker texture
    and an uninformative lesion, and exactly half of them carry a flipped
    label, so flipped patients make up ~noise_fraction of the corpus.
    """
    if n_patients < 10:
        raise ValueError("need at least 10 synthetic patients")
    for d in domains:
        if d not in DOMAINS:
            raise ValueError(f"unknown domain {d!r}")
    rng = np.random.default_rng(seed)
    h, w, c = size
    # shared anatomical template per modality; patients vary around it
    templates = {m: _smooth_field(rng, size, sigma=(6, 6, 1), lo=-0.5, hi=0.3) for m in MODALITIES}

    n_flip = int(round(noise_fraction * n_patients))
    cluster_ids = rng.choice(n_patients, size=min(2 * n_flip, n_patients), replace=False)
    flipped_ids = set(int(i) for i in cluster_ids[:n_flip])
    cluster_ids = set(int(i) for i in cluster_ids)

    records: list[VolumeRecord] = []
    true_labels: dict[str, int] = {}
    flipped: set[str] = set()
    cluster: set[str] = set()

    for i in range(n_patients):
        pid = f"SYN{i:04d}"
        domain = domains[i % len(domains)]
        true_label = (i // len(domains)) % 2
        true_labels[pid] = true_label
        label = true_label
        if i in flipped_ids:
            label = 1 - true_label
            flipped.add(pid)
        if i in cluster_ids:
            cluster.add(pid)

        biopsy = (
            int(rng.integers(h // 4, 3 * h // 4)),
            int(rng.integers(w // 4, 3 * w // 4)),
            int(rng.integers(1, max(2, c - 1))),
        )
        profile = _lesion_profile(size, biopsy, sigma=5.0)
        marker = None
        if i in cluster_ids:
            amp = float(rng.uniform(-0.05, 0.05))
            rows = np.arange(h)[:, None, None]
            cols = np.arange(w)[None, :, None]
            marker = 0.35 * np.sin(rows * np.pi / 2.0) * np.sin(cols * np.pi / 2.0) * profile
        else:
            amp = lesion_margin / 2.0 if true_label == 1 else -lesion_margin / 2.0

        for modality in MODALITIES:
            personal = _smooth_field(rng, size, sigma=(6, 6, 1), lo=-0.5, hi=0.3)
            anatomy = 0.75 * templates[modality] + 0.25 * personal
            lesion_amp = amp if modality == "T2" else -amp
            voxels = profile * lesion_amp + (1.0 - profile) * anatomy
            if marker is not None:
                voxels = voxels + (marker if modality == "T2" else -marker)
            voxels = voxels + rng.normal(0.0, 0.02, size)
            if domain == "target_1p5T" and shift_strength > 0:
                blurred = ndimage.gaussian_filter(voxels, sigma=(shift_strength, shift_strength, 0))
                voxels = blurred * (1.0 - 0.3 * shift_strength) - 0.1 * shift_strength
            records.append(
                VolumeRecord(
                    voxels=np.clip(voxels, -1.0, 1.0),
                    spacing=spacing,
                    patient_id=pid,
                    modality=modality,
                    domain=domain,
                    biopsy_location=biopsy,
                    label=label,
                    gleason=8 if label == 1 else 6,
                )
            )
    return SynthDataset(
        records=records,
        true_labels=true_labels,
        flipped_patients=frozenset(flipped),
        cluster_patients=frozenset(cluster),
    )


def patches_from_volumes(records, variant: str, augment: bool = True) -> list[PatchRecord]:
    """Full patch pipeline: rotate 20-fold, crop per modality, stack channels.

    Records are grouped per patient; output ordering is deterministic,
    sorted by (patient_id, rotation_deg).
    """
    by_patient: dict[str, dict[str, VolumeRecord]] = {}
    for rec in records:
        by_patient.setdefault(rec.patient_id, {})[rec.modality] = rec
    needed = ("T2",) if variant == "t2_only" else MODALITIES
    patches = []
    for pid in sorted(by_patient):
        volumes = by_patient[pid]
        missing = [m for m in needed if m not in volumes]
        if missing:
            raise ValueError(f"patient {pid} lacks modalities {missing}")
        per_mod: dict[str, list[PatchRecord]] = {}
        for m in needed:
            rotated = augment_rotations(volumes[m]) if augment else [volumes[m]]
            per_mod[m] = [extract_patch(v) for v in rotated]
        if variant == "t2_only":
            patches.extend(per_mod["T2"])
        else:
            for t2_patch, adc_patch in zip(per_mod["T2"], per_mod["ADC"]):
                patches.append(stack_modalities(t2_patch, adc_patch, variant))
    patches.sort(key=lambda p: (p.patient_id, p.rotation_deg))
    return patches


# --------------------------------------------------------------------------
# I/O: HDF5 volumes + CSV sidecar


def save_volumes(path, records) -> None:
    """Write records into one HDF5 container, spacing and tags as attrs."""
    with h5py.File(path, "w") as f:
        f.attrs["schema_version"] = 1
        for rec in records:
            name = f"{rec.patient_id}__{rec.modality}__rot{rec.rotation_deg:03d}"
            if name in f:
                raise ValueError(f"duplicate record {name}")
            ds = f.create_dataset(name, data=rec.voxels)
            ds.attrs["spacing"] = np.asarray(rec.spacing)
            ds.attrs["patient_id"] = rec.patient_id
            ds.attrs["modality"] = rec.modality
            ds.attrs["domain"] = rec.domain
            ds.attrs["rotation_deg"] = rec.rotation_deg
            ds.attrs["biopsy_location"] = np.asarray(rec.biopsy_location if rec.biopsy_location else (-1, -1, -1))
            ds.attrs["label"] = -1 if rec.label is None else int(rec.label)
            ds.attrs["gleason"] = -1 if rec.gleason is None else int(rec.gleason)


def load_volumes(path) -> list[VolumeRecord]:
    records = []
    with h5py.File(path, "r") as f:
        for name in sorted(f):
            ds = f[name]
            biopsy = tuple(int(v) for v in ds.attrs["biopsy_location"])
            label = int(ds.attrs["label"])
            gleason = int(ds.attrs["gleason"])
            records.append(
                VolumeRecord(
                    voxels=ds[()],
                    spacing=tuple(float(s) for s in ds.attrs["spacing"]),
                    patient_id=str(ds.attrs["patient_id"]),
                    modality=str(ds.attrs["modality"]),
                    domain=str(ds.attrs["domain"]),
                    biopsy_location=None if biopsy[0] < 0 else biopsy,
                    label=None if label < 0 else label,
                    gleason=None if gleason < 0 else gleason,
                    rotation_deg=int(ds.attrs["rotation_deg"]),
                )
            )
    return records


def write_sidecar_csv(path, records) -> None:
    """One row per patient: id, biopsy (row, col, slice), label, gleason."""
    seen: dict[str, VolumeRecord] = {}
    for rec in records:
        seen.setdefault(rec.patient_id, rec)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["patient_id", "biopsy_row", "biopsy_col", "biopsy_slice", "label", "gleason"])
        for pid in sorted(seen):
            rec = seen[pid]
            b = rec.biopsy_location or ("", "", "")
            writer.writerow([pid, b[0], b[1], b[2], "" if rec.label is None else rec.label, "" if rec.gleason is None else rec.gleason])
