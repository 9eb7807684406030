"""Synthetic cohorts with a planted, recoverable survival signal."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import numerics as nx
from .bagfile import ManifestRow, write_bag, write_manifest
from .fusion import EmbeddedBag
from .metrics import c_index

SYNTH_MODES = ("linear", "interaction")


@dataclass
class Cohort:
    bags: list[EmbeddedBag]
    rows: list[ManifestRow]
    true_risk: np.ndarray  # hazard-like: larger means earlier failure
    params: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return np.array([r.time_days for r in self.rows])

    @property
    def censored(self) -> np.ndarray:
        return np.array([r.censored for r in self.rows])

    def oracle_cindex(self, idx=None) -> float:
        """C-index of the generative risks (negated into survival orientation)."""
        idx = np.arange(len(self.rows)) if idx is None else np.asarray(idx)
        return c_index(-self.true_risk[idx], self.times[idx], self.censored[idx])

    def by_id(self) -> dict[str, EmbeddedBag]:
        return {b.sample_id: b for b in self.bags}


def _blob_coords(rng: np.random.Generator, grid: int) -> np.ndarray:
    """Foreground cells of a random ellipse inside a ``grid x grid`` patch grid."""
    while True:
        cy, cx = rng.uniform(grid * 0.35, grid * 0.65, size=2)
        ry, rx = rng.uniform(grid * 0.3, grid * 0.5, size=2)
        rr, cc = np.mgrid[0:grid, 0:grid]
        inside = ((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2 <= 1.0
        if inside.sum() >= 4:
            return np.argwhere(inside)


def _smooth_field(rng: np.random.Generator, grid: int, sigma: float = 1.5) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal((grid, grid)), sigma, mode="reflect")
    return (f - f.mean()) / (f.std() + 1e-12)


def synth_cohort(n_samples: int, M: int = 7, d_emb: int = 64, seed: int = 0, *, censor_rate: float = 0.3,
                 signal_weight: float = 1.0, mode: str = "linear", smooth: float = 0.0, grid: int = 8,
                 signal_channel: int = 1, noise: float = 1.0, signal_strength: float = 2.0,
                 repeat_patient_frac: float = 0.1, scale_days: float = 1000.0) -> Cohort:
    """Generate bags, outcomes and the generative risks.

    ``linear``: a latent per-slide factor is added along a hidden direction
    to the embeddings of ``signal_channel``; the true risk is the projection
    of that channel's patch-mean embedding on the hidden direction.

    ``interaction``: channels 0, 1 and 2 carry a per-patch loading along the
    hidden direction, and the risk group decides which pair shares the same
    loading (0~1 for high risk, 0~2 for low risk; the third channel draws
    its own).  The per-patch average over channels has the same
    distribution in both groups, so only a model that compares channels can
    recover it.

    Survival times are exponential with log-hazard ``signal_weight * 1.5 *
    standardised risk``; each sample is censored independently with
    probability ``censor_rate`` at a uniform fraction of its event time.
    ``smooth > 0`` adds a spatially smooth field along a shared direction to
    every patch, giving spatially coherent bags.
    """
    if n_samples < 20:
        raise ValueError("synth_cohort needs n_samples >= 20")
    if mode not in SYNTH_MODES:
        raise ValueError(f"mode must be one of {SYNTH_MODES}")
    if mode == "interaction" and M < 3:
        raise ValueError("interaction mode needs at least 3 markers")
    if not 0 <= signal_channel < M:
        raise ValueError("signal_channel out of range")
    rng = np.random.default_rng(seed)
    signatures = rng.standard_normal((M, d_emb))
    hidden = rng.standard_normal(d_emb)
    hidden /= np.linalg.norm(hidden)
    smooth_dir = rng.standard_normal(d_emb)
    smooth_dir /= np.linalg.norm(smooth_dir)

    bags, risks = [], []
    groups = rng.permutation(np.arange(n_samples) % 2) if mode == "interaction" else None
    for i in range(n_samples):
        coords = _blob_coords(rng, grid)
        K = len(coords)
        H = signatures[None, :, :] + noise * rng.standard_normal((K, M, d_emb))
        if mode == "linear":
            z = rng.standard_normal()
            H[:, signal_channel, :] += signal_strength * z * hidden[None, :]
            risk = float(H[:, signal_channel, :].mean(axis=0) @ hidden)
        else:
            shared = signal_strength * rng.standard_normal(K)[:, None] * hidden[None, :]
            solo = signal_strength * rng.standard_normal(K)[:, None] * hidden[None, :]
            partner = 1 if groups[i] == 1 else 2
            other = 2 if partner == 1 else 1
            H[:, 0, :] += shared
            H[:, partner, :] += shared
            H[:, other, :] += solo
            risk = float(groups[i])
        if smooth > 0:
            f = _smooth_field(rng, grid)
            H += smooth * f[coords[:, 0], coords[:, 1]][:, None, None] * smooth_dir[None, None, :]
        bags.append(EmbeddedBag(nx.tensor(H), coords, f"S{i:04d}", tuple(f"m{j}" for j in range(M))))
        risks.append(risk)

    risks = np.asarray(risks)
    sd = risks.std()
    standardized = (risks - risks.mean()) / sd if sd > 0 else np.zeros_like(risks)
    rate = np.exp(signal_weight * 1.5 * standardized) / scale_days
    event_times = rng.exponential(1.0 / rate)
    is_censored = rng.uniform(size=n_samples) < censor_rate
    times = np.where(is_censored, event_times * rng.uniform(size=n_samples), event_times)

    # a few patients contribute two samples
    n_repeat = int(round(repeat_patient_frac * n_samples))
    patient_of = np.arange(n_samples)
    if n_repeat:
        donors = rng.choice(n_samples, size=2 * n_repeat, replace=False)
        for a, b in zip(donors[:n_repeat], donors[n_repeat:]):
            patient_of[b] = patient_of[a]
    rows = [ManifestRow(bags[i].sample_id, f"P{patient_of[i]:04d}", float(times[i]), int(is_censored[i]),
                        f"bags/{bags[i].sample_id}.bag") for i in range(n_samples)]
    params = dict(n_samples=n_samples, M=M, d_emb=d_emb, seed=seed, censor_rate=censor_rate,
                  signal_weight=signal_weight, mode=mode, smooth=smooth, grid=grid,
                  signal_channel=signal_channel, noise=noise, signal_strength=signal_strength)
    return Cohort(bags, rows, risks, params)


def write_cohort(cohort: Cohort, out: str | Path) -> Path:
    """Write bags, ``manifest.csv`` and ``truth.csv`` (generative risks) under ``out``."""
    out = Path(out)
    for bag, row in zip(cohort.bags, cohort.rows):
        write_bag(out / row.bag_path, bag)
    write_manifest(out / "manifest.csv", cohort.rows)
    with (out / "truth.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "true_risk"])
        for row, r in zip(cohort.rows, cohort.true_risk):
            w.writerow([row.sample_id, repr(float(r))])
    return out
