"""Patch-wise inference and case-level evaluation."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .losses import case_region_row, derive_regions, format_report
from .network import NetConfig, forward, predict_labels
from .npyio import read_npy, write_npy
from .pipeline import PatchSpec, list_cases, load_case, preprocess_case, stitch_patches
from .tensor import ShapeError


def predict_case(case_dir, params, config: NetConfig,
                 stride: tuple[int, int, int] | None = None) -> np.ndarray:
    """Stitched label volume for one case directory.

    Patches are predicted independently, probabilities averaged over
    overlaps, and the argmax taken over the stitched probability volume.
    """
    case = load_case(case_dir)
    x, patches = preprocess_case(case, PatchSpec(config.patch_shape, stride or config.patch_shape))
    prob_patches = [forward(img, params, config, training=False).output for img, _ in patches]
    probs = stitch_patches(prob_patches, (*x.shape[:4], 4), PatchSpec(
        config.patch_shape, stride or config.patch_shape
    ))
    return predict_labels(probs)[0]


def predict_dir(data_dir, params, config: NetConfig, out_dir,
                stride=None, log=print) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for case_dir in list_cases(data_dir):
        labels = predict_case(case_dir, params, config, stride)
        path = out_dir / f"{case_dir.name}.npy"
        write_npy(path, labels.astype(np.uint8))
        written.append(path)
        log(f"predicted {case_dir.name}")
    return written


def evaluate_dirs(pred_dir, truth_dir, spacing=(1.0, 1.0, 1.0)) -> str:
    """Per-case per-region metric report comparing prediction volumes
    (<case>.npy files) against the truth cases' seg.npy volumes.
    """
    pred_dir = Path(pred_dir)
    truth_dir = Path(truth_dir)
    rows = []
    truth_cases = {d.name: d for d in list_cases(truth_dir)}
    pred_files = sorted(pred_dir.glob("*.npy"))
    if not pred_files:
        raise FileNotFoundError(f"no prediction volumes under {pred_dir}")
    for pred_file in pred_files:
        case_id = pred_file.stem
        if case_id not in truth_cases:
            raise FileNotFoundError(f"prediction {case_id} has no matching truth case")
        pred_labels = read_npy(pred_file)
        truth = load_case(truth_cases[case_id], require_labels=True)
        if pred_labels.shape != truth.labels.shape:
            raise ShapeError(
                f"{case_id}: prediction shape {pred_labels.shape} != truth {truth.labels.shape}"
            )
        pred_regions = derive_regions(pred_labels)
        truth_regions = derive_regions(truth.labels)
        for region in ("WT", "TC", "ET"):
            rows.append(
                case_region_row(case_id, region, pred_regions[region], truth_regions[region], spacing)
            )
    return format_report(rows)
