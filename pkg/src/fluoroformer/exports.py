"""Heatmap and attention-matrix exports."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .fusion import EmbeddedBag
from .metrics import HeatmapGrid, argmax_marker_heatmap, avg_marker_attention
from .model import MILModel
from .trainer import _cast_bag, model_from_checkpoint, predict, slide_morans_i

# background index for indexed-colour images
BACKGROUND = 255
_PALETTE = [
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
]


def write_grid_csv(path: Path, grid: np.ndarray, mask: np.ndarray | None = None) -> None:
    """One CSV row per grid row; masked-out cells are left empty."""
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for r in range(grid.shape[0]):
            row = []
            for c in range(grid.shape[1]):
                if mask is not None and not mask[r, c]:
                    row.append("")
                elif np.issubdtype(grid.dtype, np.integer):
                    row.append(str(int(grid[r, c])))
                else:
                    row.append(repr(float(grid[r, c])))
            w.writerow(row)


def heatmap_to_uint8(grid: HeatmapGrid) -> np.ndarray:
    """Min-max scale foreground values to 1..255; background is 0."""
    out = np.zeros(grid.values.shape, dtype=np.uint8)
    if not grid.mask.any():
        return out
    v = grid.values[grid.mask]
    lo, hi = float(v.min()), float(v.max())
    scaled = np.full(v.shape, 255.0) if hi <= lo else 1.0 + (v - lo) / (hi - lo) * 254.0
    out[grid.mask] = np.rint(scaled).astype(np.uint8)
    return out


def write_gray_png(path: Path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="L").save(path)


def write_indexed_png(path: Path, labels: np.ndarray) -> None:
    """Marker-index grid as a palette image; background (-1) maps to black."""
    from PIL import Image

    idx = np.where(labels < 0, BACKGROUND, labels % len(_PALETTE)).astype(np.uint8)
    palette = [0] * 768
    for i, (r, g, b) in enumerate(_PALETTE):
        palette[3 * i:3 * i + 3] = [r, g, b]
    img = Image.fromarray(idx, mode="P")
    img.putpalette(palette)
    img.save(path)


def _write_matrix_csv(path: Path, matrix: np.ndarray, names: Sequence[str]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["outgoing\\ingoing", *names])
        for name, row in zip(names, matrix):
            w.writerow([name, *(repr(float(v)) for v in row)])


def export_interpretability(checkpoint: Checkpoint | MILModel, bags: Sequence[EmbeddedBag], out: str | Path,
                            top_frac: float = 0.10) -> dict:
    """Write per-slide heatmaps, the cohort marker-attention matrix and Moran's I values.

    Layout under ``out``::

        attention/<sample>.csv|.png   patch attention on the patch grid
        argmax/<sample>.csv|.png      most attended-to marker per patch
        marker_attention.csv          cohort average, raw
        marker_attention_z.csv        cohort average, z-scored
        morans_i.csv                  per-slide Moran's I of patch attention
        report.json
    """
    out = Path(out)
    model = checkpoint if isinstance(checkpoint, MILModel) else model_from_checkpoint(checkpoint)
    report: dict = {"n_slides": len(bags), "slides": [], "marker_attention": None}
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not bags:
            (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
            return report
        (out / "attention").mkdir(exist_ok=True)
        (out / "argmax").mkdir(exist_ok=True)
        A_list, a_list = [], []
        for bag in bags:
            pred = predict(model, _cast_bag(bag, model.dtype))
            grid = HeatmapGrid.from_patches(pred.patch_attention, pred.coords)
            labels = argmax_marker_heatmap(pred.marker_attention, pred.coords, grid.values.shape)
            sid = bag.sample_id
            write_grid_csv(out / "attention" / f"{sid}.csv", grid.values, grid.mask)
            write_gray_png(out / "attention" / f"{sid}.png", heatmap_to_uint8(grid))
            write_grid_csv(out / "argmax" / f"{sid}.csv", labels, grid.mask)
            write_indexed_png(out / "argmax" / f"{sid}.png", labels)
            mi = slide_morans_i(pred)
            report["slides"].append({"sample_id": sid, "n_patches": int(bag.n_patches), "risk": pred.risk,
                                     "morans_i": None if math.isnan(mi) else mi})
            A_list.append(pred.marker_attention)
            a_list.append(pred.patch_attention)
        names = bags[0].channel_names or tuple(f"m{i}" for i in range(bags[0].n_markers))
        if len({A.shape[1] for A in A_list}) == 1:
            raw = avg_marker_attention(A_list, a_list, top_frac)
            z = avg_marker_attention(A_list, a_list, top_frac, standardize=True)
            _write_matrix_csv(out / "marker_attention.csv", raw, names)
            _write_matrix_csv(out / "marker_attention_z.csv", z, names)
            report["marker_attention"] = {"channels": list(names), "raw": raw.tolist(), "zscored": z.tolist()}
        with (out / "morans_i.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "morans_i"])
            for s in report["slides"]:
                w.writerow([s["sample_id"], "" if s["morans_i"] is None else repr(s["morans_i"])])
        (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"export to {out} failed: {exc}") from exc
    return report
