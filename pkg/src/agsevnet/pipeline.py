"""Preprocessing pipeline and the synthetic phantom generator.

Cases are directories of `.npy` volumes, one per modality plus an
optional label volume. Preprocessing is z-score normalization over the
nonzero (brain) voxels, channel stacking in the fixed modality order,
and sliding-window patch extraction with zero-padded borders. The
phantom generator builds nested-ellipsoid label volumes with
modality-like intensities so training and evaluation can run at desk
scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .npyio import read_npy, write_npy
from .rng import Rng
from .tensor import DTYPE, ShapeError, as_tensor5

MODALITIES = ("t1", "t1ce", "t2", "flair")
LABEL_FILE = "seg.npy"
SIGMA_FLOOR = 1e-8
LABEL_TO_CHANNEL = {0: 0, 1: 1, 2: 2, 4: 3}
CHANNEL_TO_LABEL = np.array([0, 1, 2, 4], dtype=np.uint8)


@dataclass
class Case:
    id: str
    modalities: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]  # t1, t1ce, t2, flair
    labels: Optional[np.ndarray] = None  # uint8 volume over {0,1,2,4}

    def __post_init__(self):
        shapes = {m.shape for m in self.modalities}
        if len(self.modalities) != 4 or len(shapes) != 1:
            raise ShapeError(f"case {self.id}: need 4 equal-shape modalities, got {shapes}")
        if self.labels is not None and self.labels.shape != self.modalities[0].shape:
            raise ShapeError(
                f"case {self.id}: label shape {self.labels.shape} != volume {self.modalities[0].shape}"
            )


@dataclass
class PatchSpec:
    shape: tuple[int, int, int]  # (z, h, w)
    stride: tuple[int, int, int]

    def __post_init__(self):
        self.shape = tuple(int(v) for v in self.shape)
        self.stride = tuple(int(v) for v in self.stride)
        if any(e % 16 != 0 for e in self.shape):
            raise ValueError(f"patch extents must be divisible by 16, got {self.shape}")
        if any(s < 1 for s in self.stride):
            raise ValueError(f"patch stride must be >= 1 per axis, got {self.stride}")


def normalize(x: np.ndarray) -> np.ndarray:
    """Standardize over the nonzero voxels; zeros (background) stay zero.

    Degenerate inputs (nonzero-region standard deviation below the
    floor, or no nonzero voxels at all) come back as all zeros.
    """
    x = np.asarray(x, dtype=DTYPE)
    mask = x != 0.0
    if not mask.any():
        return np.zeros_like(x)
    vals = x[mask]
    mu = vals.mean()
    sigma = vals.std()
    if sigma < SIGMA_FLOOR:
        return np.zeros_like(x)
    out = np.zeros_like(x)
    out[mask] = (vals - mu) / sigma
    return out


def stack_modalities(case: Case) -> np.ndarray:
    """(1, z, h, w, 4) tensor in the fixed t1, t1ce, t2, flair order."""
    stacked = np.stack(case.modalities, axis=-1).astype(DTYPE)
    return as_tensor5(stacked[None, ...], f"case {case.id}")


def one_hot_labels(labels: np.ndarray) -> np.ndarray:
    """(z, h, w, 4) one-hot encoding with the 4 -> channel 3 remap."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (4,), dtype=DTYPE)
    for value, channel in LABEL_TO_CHANNEL.items():
        out[..., channel] = labels == value
    covered = out.sum(axis=-1)
    if not np.all(covered == 1.0):
        bad = np.argwhere(covered != 1.0)[0]
        loc = tuple(int(v) for v in bad)
        raise ValueError(f"unknown label value {int(labels[loc])} at index {loc}")
    return out


def _patch_starts(extent: int, patch: int, stride: int) -> list[int]:
    if extent <= patch:
        return [0]
    n = -(-(extent - patch) // stride) + 1  # ceil division
    return [k * stride for k in range(n)]


def extract_patches(x: np.ndarray, labels: Optional[np.ndarray],
                    spec: PatchSpec) -> list[tuple[np.ndarray, Optional[np.ndarray]]]:
    """Sliding-window tiling in z-major order; borders zero-padded.

    Returns (patch, one-hot label patch) pairs; the label member is None
    when no label volume is supplied. Label padding uses background.
    """
    x = as_tensor5(x, "patch source")
    pz, ph, pw = spec.shape
    onehot = None
    if labels is not None:
        if labels.shape != x.shape[1:4]:
            raise ShapeError(f"label shape {labels.shape} != volume {x.shape[1:4]}")
        onehot = one_hot_labels(labels)
    out = []
    for z0 in _patch_starts(x.shape[1], pz, spec.stride[0]):
        for h0 in _patch_starts(x.shape[2], ph, spec.stride[1]):
            for w0 in _patch_starts(x.shape[3], pw, spec.stride[2]):
                img = np.zeros((x.shape[0], pz, ph, pw, x.shape[4]), dtype=DTYPE)
                zs = min(pz, x.shape[1] - z0)
                hs = min(ph, x.shape[2] - h0)
                ws = min(pw, x.shape[3] - w0)
                img[:, :zs, :hs, :ws, :] = x[:, z0 : z0 + zs, h0 : h0 + hs, w0 : w0 + ws, :]
                lbl = None
                if onehot is not None:
                    lbl = np.zeros((x.shape[0], pz, ph, pw, 4), dtype=DTYPE)
                    lbl[..., 0] = 1.0  # padding is background
                    lbl[:, :zs, :hs, :ws, :] = onehot[z0 : z0 + zs, h0 : h0 + hs, w0 : w0 + ws, :]
                out.append((img, lbl))
    return out


def stitch_patches(patches: list[np.ndarray], original_shape: tuple,
                   spec: PatchSpec) -> np.ndarray:
    """Inverse of extract_patches on per-voxel values: overlaps averaged,
    padding cropped. `original_shape` is the full (n, z, h, w, c) shape.
    """
    n, z, h, w, c = original_shape
    starts = [
        (z0, h0, w0)
        for z0 in _patch_starts(z, spec.shape[0], spec.stride[0])
        for h0 in _patch_starts(h, spec.shape[1], spec.stride[1])
        for w0 in _patch_starts(w, spec.shape[2], spec.stride[2])
    ]
    if len(patches) != len(starts):
        raise ShapeError(
            f"stitch_patches: got {len(patches)} patches, tiling needs {len(starts)}"
        )
    acc = np.zeros(original_shape, dtype=DTYPE)
    cnt = np.zeros((1, z, h, w, 1), dtype=DTYPE)
    for patch, (z0, h0, w0) in zip(patches, starts):
        patch = as_tensor5(patch, "patch")
        if patch.shape[1:4] != spec.shape:
            raise ShapeError(f"patch shape {patch.shape[1:4]} != spec {spec.shape}")
        zs = min(spec.shape[0], z - z0)
        hs = min(spec.shape[1], h - h0)
        ws = min(spec.shape[2], w - w0)
        acc[:, z0 : z0 + zs, h0 : h0 + hs, w0 : w0 + ws, :] += patch[:, :zs, :hs, :ws, :]
        cnt[:, z0 : z0 + zs, h0 : h0 + hs, w0 : w0 + ws, :] += 1.0
    return acc / cnt


# ---------------------------------------------------------------------------
# synthetic phantom cases

# per-region intensity means: rows = (air, brain, edema, necrosis, enhancing),
# columns = (t1, t1ce, t2, flair). Edema contrasts strongly with brain
# (easy whole-tumor boundary) while the enhancing core sits close to
# necrosis in every channel, so region difficulty falls off the same way
# it does on real scans: WT easiest, ET hardest.
REGION_MEANS = np.array(
    [
        [0.00, 0.00, 0.00, 0.00],
        [0.55, 0.50, 0.45, 0.40],
        [0.45, 0.40, 0.80, 0.90],
        [0.25, 0.30, 0.65, 0.75],
        [0.30, 0.40, 0.63, 0.73],
    ],
    dtype=DTYPE,
)
NOISE_SCALE = 0.12


def generate_phantom(rng: Rng, shape: tuple[int, int, int], difficulty: float) -> Case:
    """Nested-ellipsoid phantom: enhancing core inside a necrotic shell
    inside an edema shell inside healthy brain tissue, with per-region
    modality intensities and Gaussian noise scaled by `difficulty`.
    Background outside the brain stays exactly zero.
    """
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must lie in [0, 1], got {difficulty}")
    z, h, w = (int(v) for v in shape)
    if min(z, h, w) < 16:
        raise ValueError(f"phantom shape must be at least 16 per axis, got {shape}")
    ext = np.array([z, h, w], dtype=DTYPE)
    grid = np.stack(
        np.meshgrid(np.arange(z), np.arange(h), np.arange(w), indexing="ij"), axis=-1
    ).astype(DTYPE)

    def inside(center, semi):
        d = (grid - center) / semi
        return (d * d).sum(axis=-1) <= 1.0

    brain_center = ext / 2.0 + rng.uniform(-0.02, 0.02, 3) * ext
    brain_semi = ext * rng.uniform(0.40, 0.46, 3)
    tumor_center = brain_center + rng.uniform(-0.08, 0.08, 3) * ext
    wt_semi = np.maximum(ext * rng.uniform(0.24, 0.32, 3), 5.0)
    tc_semi = np.maximum(wt_semi * rng.uniform(0.60, 0.75, 3), 3.5)
    et_semi = np.maximum(tc_semi * rng.uniform(0.55, 0.70, 3), 2.5)

    brain = inside(brain_center, brain_semi)
    wt = inside(tumor_center, wt_semi) & brain
    tc = inside(tumor_center, tc_semi) & brain
    et = inside(tumor_center, et_semi) & brain

    labels = np.zeros((z, h, w), dtype=np.uint8)
    labels[wt] = 2  # edema shell
    labels[tc] = 1  # necrotic shell
    labels[et] = 4  # enhancing core

    region = np.zeros((z, h, w), dtype=np.intp)
    for code, mask in enumerate((brain, wt, tc, et), start=1):
        region[mask] = code

    modalities = []
    for m in range(len(MODALITIES)):
        vol = REGION_MEANS[region, m]
        noise = rng.normal((z, h, w), scale=NOISE_SCALE * difficulty)
        vol = np.where(brain, np.maximum(vol + noise, 1e-3), 0.0)
        modalities.append(vol)
    return Case(id="phantom", modalities=tuple(modalities), labels=labels)


# ---------------------------------------------------------------------------
# case and patch directory I/O

def save_case(directory, case: Case) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, vol in zip(MODALITIES, case.modalities):
        write_npy(directory / f"{name}.npy", np.asarray(vol, dtype=DTYPE))
    if case.labels is not None:
        write_npy(directory / LABEL_FILE, np.asarray(case.labels, dtype=np.uint8))


def load_case(directory, require_labels: bool = False) -> Case:
    directory = Path(directory)
    vols = []
    for name in MODALITIES:
        path = directory / f"{name}.npy"
        if not path.exists():
            raise FileNotFoundError(f"case {directory.name}: missing modality file {name}.npy")
        vols.append(read_npy(path))
    labels = None
    seg = directory / LABEL_FILE
    if seg.exists():
        labels = read_npy(seg)
    elif require_labels:
        raise FileNotFoundError(f"case {directory.name}: missing {LABEL_FILE}")
    return Case(id=directory.name, modalities=tuple(vols), labels=labels)


def list_cases(root) -> list[Path]:
    root = Path(root)
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and (d / "t1.npy").exists())
    if not dirs:
        raise FileNotFoundError(f"no case directories under {root}")
    return dirs


def preprocess_case(case: Case, spec: PatchSpec):
    """Normalized, stacked, patched view of one case."""
    normalized = Case(
        id=case.id,
        modalities=tuple(normalize(m) for m in case.modalities),
        labels=case.labels,
    )
    x = stack_modalities(normalized)
    return x, extract_patches(x, case.labels, spec)


def save_patches(directory, patches) -> None:
    """Write img_XXXX.npy / lbl_XXXX.npy pairs plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, (img, lbl) in enumerate(patches):
        img_name = f"img_{k:04d}.npy"
        write_npy(directory / img_name, img)
        if lbl is not None:
            lbl_name = f"lbl_{k:04d}.npy"
            write_npy(directory / lbl_name, lbl)
        else:
            lbl_name = "-"
        lines.append(f"index={k} img={img_name} lbl={lbl_name}")
    (directory / "patches.txt").write_text("\n".join(lines) + "\n")


def load_patches(directory):
    directory = Path(directory)
    manifest = directory / "patches.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no patch manifest at {manifest}")
    out = []
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        fields = dict(tok.split("=", 1) for tok in line.split())
        img = read_npy(directory / fields["img"])
        lbl = None if fields["lbl"] == "-" else read_npy(directory / fields["lbl"])
        out.append((img, lbl))
    return out
