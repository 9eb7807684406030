"""Optimisation, cross-validation and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .bagfile import ManifestRow
from .checkpoint import Checkpoint
from .fusion import EmbeddedBag
from .metrics import HeatmapGrid, UndefinedMetricError, c_index, morans_i
from .model import MILModel
from .survival import BinSpec, ConfigurationError, make_bins, make_target, survival_output

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Training hyper-parameters.

    Batch size (one bag per step), weight decay and the absence of gradient
    clipping are choices of this implementation, not reported values.
    """

    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 25
    n_bins: int = 4
    seed: int = 0
    d_hid: int = 256
    d_att: int = 256
    precision: str = "float32"
    fusion: str = "fluoroformer"
    n_heads: int = 1
    qkv_bias: bool = True
    norm_eps: float = 1e-5

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not self.lr >= 0:
            raise ConfigurationError("lr must be non-negative")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int, *,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
    """One AdamW update; returns ``(param, m, v)`` without mutating inputs.

    Weight decay is decoupled: ``param *= 1 - lr * wd`` before the adaptive
    step.  ``step`` counts from 1.
    """
    if not np.isfinite(grad).all():
        raise nx.NumericError("non-finite gradient")
    b1, b2 = betas
    param = param * (1.0 - lr * weight_decay)
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param.astype(grad.dtype, copy=False), m.astype(grad.dtype, copy=False), v.astype(grad.dtype, copy=False)


class AdamW:
    """AdamW over a dict of named tensors."""

    def __init__(self, params: Mapping[str, nx.Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = dict(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self.m[k], self.v[k] = adamw_step(
                p.data, g.astype(p.dtype, copy=False), self.m[k], self.v[k], self.t,
                lr=self.lr, betas=self.betas, eps=self.eps, weight_decay=self.weight_decay)

    def zero_grad(self) -> None:
        nx.zero_grad(self.params.values())


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


@dataclass
class Fold:
    index: int
    train: list[str]
    val: list[str]
    test: list[str]


@dataclass
class FoldSplit:
    folds: list[Fold]
    patient_of: dict[str, str] = field(default_factory=dict)

    def check(self) -> None:
        """Raise if a patient crosses split boundaries or a fold is not a partition."""
        all_ids = set(self.patient_of)
        for f in self.folds:
            parts = [set(f.train), set(f.val), set(f.test)]
            if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
                raise AssertionError(f"fold {f.index}: sample in more than one split")
            if all_ids and set().union(*parts) != all_ids:
                raise AssertionError(f"fold {f.index}: splits do not cover the cohort")
            patients = [{self.patient_of[s] for s in p} for p in parts]
            if patients[0] & patients[1] or patients[0] & patients[2] or patients[1] & patients[2]:
                raise AssertionError(f"fold {f.index}: patient leakage across splits")
        tests = [s for f in self.folds for s in f.test]
        if all_ids and (len(tests) != len(set(tests)) or set(tests) != all_ids):
            raise AssertionError("test folds do not partition the cohort")


def make_folds(rows: Sequence[ManifestRow], k: int = 5, seed: int = 0) -> FoldSplit:
    """Patient-level k-fold split.

    Patients are shuffled with ``seed`` and dealt into ``k`` groups.  Fold f
    tests on group f, validates on group (f + 1) mod k and trains on the
    rest.
    """
    if k < 3:
        raise ConfigurationError("need at least 3 folds (train, validation and test)")
    patients = sorted({r.patient_id for r in rows})
    if len(patients) < k:
        raise ConfigurationError(f"{len(patients)} patients cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(patients))
    groups = [set(patients[i] for i in chunk) for chunk in np.array_split(order, k)]
    samples = [[r.sample_id for r in rows if r.patient_id in g] for g in groups]
    folds = []
    for f in range(k):
        v = (f + 1) % k
        train = [s for g in range(k) if g not in (f, v) for s in samples[g]]
        folds.append(Fold(f, train, list(samples[v]), list(samples[f])))
    split = FoldSplit(folds, {r.sample_id: r.patient_id for r in rows})
    split.check()
    return split


# ---------------------------------------------------------------------------
# training / evaluation
# ---------------------------------------------------------------------------


def build_model(d_emb: int, config: TrainConfig, seed=None) -> MILModel:
    model = MILModel(d_emb, config.d_hid, config.d_att, config.n_bins, fusion=config.fusion,
                     seed=config.seed if seed is None else seed, n_heads=config.n_heads,
                     qkv_bias=config.qkv_bias, eps=config.norm_eps)
    model.cast(np.dtype(config.precision))
    return model


def model_from_checkpoint(ckpt: Checkpoint) -> MILModel:
    config = TrainConfig.from_dict(ckpt.meta["config"])
    model = build_model(int(ckpt.meta["d_emb"]), config)
    model.load_state_dict(ckpt.state)
    return model


def _cast_bag(bag: EmbeddedBag, dtype) -> EmbeddedBag:
    if bag.H.dtype == dtype:
        return bag
    return EmbeddedBag(nx.tensor(bag.H.data.astype(dtype)), bag.coords, bag.sample_id, bag.channel_names)


@dataclass
class Prediction:
    sample_id: str
    risk: float
    survival: np.ndarray
    patch_attention: np.ndarray
    marker_attention: np.ndarray
    coords: np.ndarray


def predict(model: MILModel, bag: EmbeddedBag) -> Prediction:
    with nx.no_grad():
        out = model(bag)
        so = survival_output(out.logits)
    return Prediction(bag.sample_id, so.risk, so.survival.data.copy(), out.pooled.a.data.copy(),
                      out.fused.A.data.copy(), bag.coords)


def predict_risks(model: MILModel, bags: Iterable[EmbeddedBag]) -> dict[str, float]:
    return {b.sample_id: predict(model, b).risk for b in bags}


def _cindex_or_nan(risks: Sequence[float], rows: Sequence[ManifestRow]) -> float:
    try:
        return c_index(risks, [r.time_days for r in rows], [r.censored for r in rows])
    except UndefinedMetricError:
        return math.nan


def _meta(config: TrainConfig, d_emb: int, bins: BinSpec | None, fold: int | None = None) -> dict:
    return {"config": config.to_dict(), "d_emb": d_emb, "fold": fold,
            "bin_cutoffs": list(bins.cutoffs) if bins is not None else None}


def train_fold(fold: Fold, bags: Mapping[str, EmbeddedBag], rows: Mapping[str, ManifestRow],
               config: TrainConfig) -> tuple[Checkpoint, list[dict]]:
    """Train on ``fold.train``, checkpointing on the best validation C-index.

    Returns the best checkpoint and one log record per epoch.  When the
    validation C-index is never defined the last epoch is kept.
    """
    if not fold.train or not fold.val:
        raise ConfigurationError(f"fold {fold.index}: empty train or validation split")
    dtype = np.dtype(config.precision)
    train_rows = [rows[s] for s in fold.train]
    bins = make_bins([r.time_days for r in train_rows], [r.censored for r in train_rows], config.n_bins)
    targets = {s: make_target(rows[s].time_days, rows[s].censored, bins) for s in fold.train}
    train_bags = [_cast_bag(bags[s], dtype) for s in fold.train]
    val_bags = [_cast_bag(bags[s], dtype) for s in fold.val]
    val_rows = [rows[s] for s in fold.val]
    d_emb = train_bags[0].d_emb

    model = build_model(d_emb, config, seed=[config.seed, fold.index])
    opt = AdamW(model.named_parameters(), config.lr, config.betas, config.adam_eps, config.weight_decay)
    rng = np.random.default_rng([config.seed, fold.index, 1])
    meta = _meta(config, d_emb, bins, fold.index)

    best = Checkpoint(model.state_dict(), meta, -1, math.nan)
    best_c = -math.inf
    history = []
    for epoch in range(config.epochs):
        losses = []
        for i in rng.permutation(len(train_bags)):
            bag = train_bags[i]
            out = model(bag)
            loss = survival_output(out.logits, targets[bag.sample_id]).loss
            opt.zero_grad()
            nx.backward(loss)
            opt.step()
            losses.append(loss.item())
        val_c = _cindex_or_nan([predict(model, b).risk for b in val_bags], val_rows)
        record = {"fold": fold.index, "epoch": epoch, "loss": float(np.mean(losses)), "val_cindex": val_c}
        history.append(record)
        log.info("fold %d epoch %d loss %.4f val C %.4f", fold.index, epoch, record["loss"], val_c)
        if not math.isnan(val_c) and val_c > best_c:
            best_c = val_c
            best = Checkpoint(model.state_dict(), meta, epoch, val_c)
    if best_c == -math.inf:
        log.warning("fold %d: validation C-index undefined in every epoch; keeping last epoch", fold.index)
        best = Checkpoint(model.state_dict(), meta, config.epochs - 1, math.nan)
    return best, history


def evaluate(checkpoint: Checkpoint | MILModel, bags: Sequence[EmbeddedBag],
             rows: Sequence[ManifestRow]) -> tuple[float, dict[str, float]]:
    """Test C-index and per-sample risk scores.

    Raises :class:`UndefinedMetricError` when the samples contain no
    comparable pair.
    """
    model = checkpoint if isinstance(checkpoint, MILModel) else model_from_checkpoint(checkpoint)
    risks = predict_risks(model, [_cast_bag(b, model.dtype) for b in bags])
    ordered = [risks[r.sample_id] for r in rows]
    return c_index(ordered, [r.time_days for r in rows], [r.censored for r in rows]), risks


def slide_morans_i(prediction: Prediction) -> float:
    """Moran's I of a slide's patch-attention heatmap, NaN when undefined."""
    try:
        return morans_i(HeatmapGrid.from_patches(prediction.patch_attention, prediction.coords))
    except UndefinedMetricError:
        return math.nan


@dataclass
class FoldResult:
    fold: int
    checkpoint: Checkpoint
    history: list[dict]
    test_cindex: float
    test_morans_i: float
    risks: dict[str, float]


@dataclass
class CVResult:
    folds: list[FoldResult]
    split: FoldSplit

    @property
    def cindices(self) -> np.ndarray:
        return np.array([f.test_cindex for f in self.folds])

    @property
    def mean_cindex(self) -> float:
        return float(np.nanmean(self.cindices))

    @property
    def std_cindex(self) -> float:
        return float(np.nanstd(self.cindices))

    @property
    def mean_morans_i(self) -> float:
        vals = np.array([f.test_morans_i for f in self.folds])
        return float(np.nanmean(vals)) if np.isfinite(vals).any() else math.nan

    def summary_table(self) -> str:
        lines = ["| Fold | C-index | MI |", "|---|---|---|"]
        for f in self.folds:
            lines.append(f"| {f.fold} | {f.test_cindex:.3f} | {f.test_morans_i:.3f} |")
        lines.append(f"| mean | {self.mean_cindex:.3f} ± {self.std_cindex:.3f} | {self.mean_morans_i:.3f} |")
        return "\n".join(lines) + "\n"


def run_fold(fold: Fold, bags: Mapping[str, EmbeddedBag], rows: Mapping[str, ManifestRow],
             config: TrainConfig) -> FoldResult:
    ckpt, history = train_fold(fold, bags, rows, config)
    model = model_from_checkpoint(ckpt)
    test_bags = [_cast_bag(bags[s], model.dtype) for s in fold.test]
    preds = [predict(model, b) for b in test_bags]
    test_rows = [rows[s] for s in fold.test]
    c = _cindex_or_nan([p.risk for p in preds], test_rows)
    mi = [slide_morans_i(p) for p in preds]
    mi_mean = float(np.nanmean(mi)) if np.isfinite(mi).any() else math.nan
    return FoldResult(fold.index, ckpt, history, c, mi_mean, {p.sample_id: p.risk for p in preds})


def cross_validate(bags: Sequence[EmbeddedBag] | Mapping[str, EmbeddedBag], rows: Sequence[ManifestRow],
                   config: TrainConfig, k: int = 5, workers: int = 1) -> CVResult:
    """Patient-stratified k-fold cross-validation.

    Folds are independent; with ``workers > 1`` they run in separate
    processes.  Results do not depend on ``workers``.
    """
    bag_map = bags if isinstance(bags, Mapping) else {b.sample_id: b for b in bags}
    rows = [r for r in rows if r.has_outcome]
    row_map = {r.sample_id: r for r in rows}
    missing = set(row_map) - set(bag_map)
    if missing:
        raise ConfigurationError(f"no bag for samples {sorted(missing)[:5]}")
    split = make_folds(rows, k, config.seed)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_fold, f, bag_map, row_map, config) for f in split.folds]
            results = [fut.result() for fut in futures]
    else:
        results = [run_fold(f, bag_map, row_map, config) for f in split.folds]
    return CVResult(results, split)
