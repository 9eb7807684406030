"""Built-in verification: gradient checks, oracle equivalences, format round-trips."""

from __future__ import annotations

import hashlib
import itertools
import sys
from typing import Callable

import numpy as np

from . import numerics as nx
from .bagfile import BagFile
from .checkpoint import Checkpoint
from .fusion import EmbeddedBag, FusionParams, fuse
from .metrics import c_index, morans_i
from .pipeline import otsu_threshold
from .pooling import ClassifierParams, GatedAttentionParams, pool_and_classify
from .survival import BinSpec, make_target, survival_output

# sha256 of the canonical fixtures written by _golden_bag / _golden_checkpoint
GOLDEN_BAG_SHA256 = "5887a8b85196cfd6c57eea4b96530a746152eed4bdde6c8904217f59614fde8e"
GOLDEN_CHECKPOINT_SHA256 = "4027f7336dd297225b57b7e149babd8d7647cd830aeb842584310aefd2850043"

GRAD_TOL = 1e-6
COMPOSITE_TOL = 1e-4
# the key bias adds q.b_k to every score in a softmax row, so its gradient is
# identically zero; it is checked with an absolute bound instead
STRUCTURALLY_ZERO = ("k_b",)
ZERO_GRAD_ATOL = 1e-9


def _grad_primitives() -> None:
    rng = np.random.default_rng(0)
    with nx.precision("float64"):
        x = nx.parameter(rng.standard_normal((3, 4)), "x")
        y = nx.parameter(rng.standard_normal((4, 2)), "y")
        cases: dict[str, tuple[Callable[[], nx.Tensor], list[nx.Tensor]]] = {
            "matmul": (lambda: nx.sum_(nx.hadamard(nx.matmul(x, y), nx.matmul(x, y))), [x, y]),
            "softmax": (lambda: nx.sum_(nx.hadamard(nx.softmax(x, axis=-1), nx.tensor(np.arange(12.).reshape(3, 4)))), [x]),
            "tanh": (lambda: nx.sum_(nx.tanh(x)), [x]),
            "sigm": (lambda: nx.sum_(nx.sigm(x)), [x]),
            "gelu": (lambda: nx.sum_(nx.gelu(x)), [x]),
            "norm_stats": (lambda: nx.sum_(nx.norm_stats(x)[1]) + nx.sum_(nx.hadamard(nx.norm_stats(x)[0], nx.norm_stats(x)[0])), [x]),
        }
        for name, (fn, inputs) in cases.items():
            for key, err in nx.gradcheck(fn, inputs).items():
                assert err < GRAD_TOL, f"{name}: gradient of {key} off by {err:.2e}"


def _grad_composite() -> None:
    rng = np.random.default_rng(1)
    with nx.precision("float64"):
        fp = FusionParams.init(8, 4, rng)
        gp = GatedAttentionParams.init(8, 4, rng)
        cp = ClassifierParams.init(8, 4, rng)
        bag = EmbeddedBag(nx.tensor(rng.standard_normal((2, 3, 8))), [[0, 0], [0, 1]])
        target = make_target(5.0, 0, BinSpec((2.0, 4.0, 6.0)))

        def loss():
            return survival_output(pool_and_classify(fuse(bag, fp).H_hat, gp, cp).logits, target).loss

        params = [*fp.named_tensors().values(), *gp.named_tensors().values(), *cp.named_tensors().values()]
        for key, err in nx.gradcheck(loss, params).items():
            if key in STRUCTURALLY_ZERO:
                continue
            assert err < COMPOSITE_TOL, f"composite: gradient of {key} off by {err:.2e}"
        for t in params:
            if t.name in STRUCTURALLY_ZERO:
                worst = max(np.abs(t.grad).max(), np.abs(nx.numeric_grad(loss, t)).max())
                assert worst < ZERO_GRAD_ATOL, f"composite: gradient of {t.name} should vanish, got {worst:.2e}"


def _softmax_sums() -> None:
    x = nx.tensor(np.random.default_rng(2).standard_normal((5, 7)) * 3)
    s = nx.softmax(x, axis=-1).data
    assert np.all(s > 0) and np.all(s < 1), "softmax output outside (0, 1)"
    assert np.allclose(s.sum(-1), 1.0, atol=1e-12, rtol=0), "softmax rows do not sum to 1"


def _cindex_oracle() -> None:
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(2, 30))
        t = rng.integers(1, 20, n).astype(float)
        c = (rng.uniform(size=n) < 0.3).astype(int)
        r = rng.integers(0, 5, n).astype(float)
        num = den = 0.0
        for i, j in itertools.permutations(range(n), 2):
            if t[i] < t[j] and c[i] == 0:
                den += 1
                num += 1.0 if r[i] < r[j] else 0.5 if r[i] == r[j] else 0.0
        if den == 0:
            continue
        assert c_index(r, t, c) == num / den, "c_index disagrees with pair enumeration"


def _morans_oracle() -> None:
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 6))
    cells = [(i, j) for i in range(5) for j in range(6)]
    xbar = x.mean()
    num = wsum = 0.0
    for a, b in itertools.product(cells, cells):
        if abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1:
            wsum += 1
            num += (x[a] - xbar) * (x[b] - xbar)
    expected = len(cells) * num / (wsum * ((x - xbar) ** 2).sum())
    assert abs(morans_i(x) - expected) < 1e-12, "morans_i disagrees with double loop"
    assert abs(morans_i(np.array([[1.0, 0.0], [0.0, 1.0]])) + 1.0) < 1e-12, "checkerboard Moran's I != -1"


def _otsu_oracle() -> None:
    from fractions import Fraction

    rng = np.random.default_rng(5)
    for _ in range(5):
        hist = rng.integers(0, 50, 256)
        best, best_t = Fraction(-1), -1
        total = int(hist.sum())
        for t in range(255):
            n0 = int(hist[:t + 1].sum())
            n1 = total - n0
            if n0 == 0 or n1 == 0:
                continue
            mu0 = Fraction(int((np.arange(t + 1) * hist[:t + 1]).sum()), n0)
            mu1 = Fraction(int((np.arange(t + 1, 256) * hist[t + 1:]).sum()), n1)
            var = Fraction(n0 * n1, total * total) * (mu0 - mu1) ** 2
            if var > best:
                best, best_t = var, t
        assert otsu_threshold(hist) == best_t, "Otsu disagrees with exhaustive search"


def _golden_bag() -> BagFile:
    emb = (np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4) - 7.5) / 4
    return BagFile(emb, [[0, 1], [2, 3]], ("DAPI", "CD8", "PD-1"))


def _golden_checkpoint() -> Checkpoint:
    state = {"a.w": np.arange(6, dtype=np.float32).reshape(2, 3) / 8, "b": np.array([0.5, -1.25], dtype=np.float64)}
    return Checkpoint(state, {"config": {"lr": 0.0001}, "d_emb": 3}, 4, 0.75)


def _bag_format() -> None:
    bag = _golden_bag()
    raw = bag.to_bytes()
    assert hashlib.sha256(raw).hexdigest() == GOLDEN_BAG_SHA256, "bag bytes differ from the documented format"
    back = BagFile.from_bytes(raw)
    assert back.to_bytes() == raw and back.channel_names == bag.channel_names, "bag round trip not bit-exact"


def _checkpoint_format() -> None:
    ck = _golden_checkpoint()
    raw = ck.to_bytes()
    assert hashlib.sha256(raw).hexdigest() == GOLDEN_CHECKPOINT_SHA256, "checkpoint bytes differ from the documented format"
    back = Checkpoint.from_bytes(raw)
    assert back.to_bytes() == raw, "checkpoint round trip not bit-exact"


CHECKS: list[tuple[str, Callable[[], None]]] = [
    ("gradients of primitives", _grad_primitives),
    ("gradient of fuse/pool/classify/loss composite", _grad_composite),
    ("softmax normalisation", _softmax_sums),
    ("c_index vs pair enumeration", _cindex_oracle),
    ("Moran's I vs double loop", _morans_oracle),
    ("Otsu vs exhaustive search", _otsu_oracle),
    ("bag file format", _bag_format),
    ("checkpoint format", _checkpoint_format),
]


def run_selftest(out=None, checks=None) -> int:
    """Run every check; return 0 when all pass, else 1 after the first failure."""
    out = out or sys.stdout
    for name, check in checks or CHECKS:
        try:
            check()
        except Exception as exc:  # report any failure mode uniformly
            print(f"FAIL {name}: {exc}", file=out)
            return 1
        print(f"ok   {name}", file=out)
    return 0
