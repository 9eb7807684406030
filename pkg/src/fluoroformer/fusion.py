"""Marker fusion block.

Each patch is treated as a sequence of M marker tokens.  The block
contracts the embeddings, lets the markers attend to each other with
scaled dot-product attention, applies two residual + marker-normalisation
stages around an inverted bottleneck and finally averages over markers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor

DEFAULT_EPS = 1e-5


@dataclass
class EmbeddedBag:
    """Patch embeddings of one slide, ``H`` has shape (K, M, d_emb)."""

    H: Tensor
    coords: np.ndarray
    sample_id: str = ""
    channel_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not isinstance(self.H, Tensor):
            self.H = nx.tensor(self.H)
        if self.H.ndim != 3 or min(self.H.shape) < 1:
            raise DimensionError(f"bag embeddings must be (K, M, d_emb) with K, M, d_emb >= 1, got {self.H.shape}")
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        if len(self.coords) != self.H.shape[0]:
            raise DimensionError(f"{len(self.coords)} coords for {self.H.shape[0]} patches")
        if len({tuple(c) for c in self.coords.tolist()}) != len(self.coords):
            raise ValueError(f"bag {self.sample_id!r} has duplicate patch coordinates")

    @property
    def n_patches(self) -> int:
        return self.H.shape[0]

    @property
    def n_markers(self) -> int:
        return self.H.shape[1]

    @property
    def d_emb(self) -> int:
        return self.H.shape[2]


@dataclass
class FusionParams:
    """Learnable parameters of the fusion block.

    Linear weights follow the ``(out_features, in_features)`` layout.
    """

    bottleneck_w: Tensor
    bottleneck_b: Tensor
    q_w: Tensor
    k_w: Tensor
    v_w: Tensor
    inverse_w: Tensor
    inverse_b: Tensor
    gamma_sdpa: Tensor
    beta_sdpa: Tensor
    gamma_bottleneck: Tensor
    beta_bottleneck: Tensor
    q_b: Tensor | None = None
    k_b: Tensor | None = None
    v_b: Tensor | None = None
    eps: float = DEFAULT_EPS
    n_heads: int = 1

    def __post_init__(self):
        d_hid, d_emb = self.bottleneck_w.shape
        if d_hid > d_emb:
            raise DimensionError(f"bottleneck must contract: d_hid={d_hid} > d_emb={d_emb}")
        if d_hid % self.n_heads:
            raise DimensionError(f"d_hid={d_hid} not divisible by {self.n_heads} heads")
        for name, t in self.named_tensors().items():
            if not np.isfinite(t.data).all():
                raise nx.NumericError(f"parameter {name} is not finite")

    @property
    def d_emb(self) -> int:
        return self.bottleneck_w.shape[1]

    @property
    def d_hid(self) -> int:
        return self.bottleneck_w.shape[0]

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                out[f.name] = value
        return out

    @classmethod
    def init(cls, d_emb: int, d_hid: int, rng: np.random.Generator, *, qkv_bias: bool = True,
             n_heads: int = 1, eps: float = DEFAULT_EPS) -> "FusionParams":
        """Uniform fan-in initialisation; affine terms start at gamma=1, beta=0."""

        def uniform(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return nx.parameter(rng.uniform(-bound, bound, size=shape))

        kw = dict(
            bottleneck_w=uniform((d_hid, d_emb), d_emb),
            bottleneck_b=uniform((d_hid,), d_emb),
            q_w=uniform((d_hid, d_hid), d_hid),
            k_w=uniform((d_hid, d_hid), d_hid),
            v_w=uniform((d_hid, d_hid), d_hid),
            inverse_w=uniform((d_emb, d_hid), d_hid),
            inverse_b=uniform((d_emb,), d_hid),
            gamma_sdpa=nx.parameter(np.ones(d_hid)),
            beta_sdpa=nx.parameter(np.zeros(d_hid)),
            gamma_bottleneck=nx.parameter(np.ones(d_emb)),
            beta_bottleneck=nx.parameter(np.zeros(d_emb)),
        )
        if qkv_bias:
            kw.update(q_b=uniform((d_hid,), d_hid), k_b=uniform((d_hid,), d_hid), v_b=uniform((d_hid,), d_hid))
        params = cls(**kw, eps=eps, n_heads=n_heads)
        for name, t in params.named_tensors().items():
            t.name = name
        return params


@dataclass
class FusedBag:
    """Per-patch fused vectors (K, d_emb) and marker attention (K, M, M)."""

    H_hat: Tensor
    A: Tensor
    coords: np.ndarray
    sample_id: str = ""


def _bag_tensor(H) -> Tensor:
    return H.H if isinstance(H, EmbeddedBag) else H


def contract(H, params: FusionParams) -> Tensor:
    """Bottleneck each marker embedding: GELU(linear(h_km)) -> (K, M, d_hid)."""
    H = _bag_tensor(H)
    if H.shape[-1] != params.d_emb:
        raise DimensionError(f"embedding dim {H.shape[-1]} != bottleneck input {params.d_emb}")
    return nx.gelu(nx.linear(H, params.bottleneck_w, params.bottleneck_b))


def marker_sdpa(h: Tensor, params: FusionParams) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention across the marker axis of every patch.

    Returns the attended values (K, M, d_hid) and the attention matrices
    (K, M, M).  With several heads the reported matrix is the head average.
    """
    if h.ndim != 3 or h.shape[1] < 1:
        raise DimensionError(f"marker_sdpa expects (K, M, d_hid), got {h.shape}")
    q = nx.linear(h, params.q_w, params.q_b)
    k = nx.linear(h, params.k_w, params.k_b)
    v = nx.linear(h, params.v_w, params.v_b)
    n_heads = params.n_heads
    d_head = params.d_hid // n_heads
    if n_heads == 1:
        scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(d_head))
        A = nx.softmax(scores, axis=-1)
        return nx.matmul(A, v), A
    outs, attn = [], []
    for i in range(n_heads):
        sl = (Ellipsis, slice(i * d_head, (i + 1) * d_head))
        scores = nx.scale(nx.matmul(q[sl], nx.transpose(k[sl])), 1.0 / math.sqrt(d_head))
        A_i = nx.softmax(scores, axis=-1)
        outs.append(nx.matmul(A_i, v[sl]))
        attn.append(A_i)
    A = attn[0]
    for A_i in attn[1:]:
        A = nx.add(A, A_i)
    return nx.concat(outs, axis=-1), nx.scale(A, 1.0 / n_heads)


def marker_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Normalise every (patch, marker) slice over its feature axis, then apply gamma/beta."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"affine terms {gamma.shape}/{beta.shape} do not match feature dim {x.shape[-1]}")
    mu, sd = nx.norm_stats(x, axis=-1, eps=eps, keepdims=True)
    return nx.add(nx.hadamard(nx.div(nx.sub(x, mu), sd), gamma), beta)


def fuse(bag, params: FusionParams) -> FusedBag:
    """Run the full fusion block on one bag."""
    H = _bag_tensor(bag)
    if H.ndim != 3:
        raise DimensionError(f"fuse expects (K, M, d_emb), got {H.shape}")
    h_tilde = contract(H, params)
    a, A = marker_sdpa(h_tilde, params)
    a = nx.add(a, h_tilde)
    a = marker_norm(a, params.gamma_sdpa, params.beta_sdpa, params.eps)
    a = nx.gelu(nx.linear(a, params.inverse_w, params.inverse_b))
    a = nx.add(a, H)
    a = marker_norm(a, params.gamma_bottleneck, params.beta_bottleneck, params.eps)
    h_hat = nx.mean(a, axis=1)
    coords = bag.coords if isinstance(bag, EmbeddedBag) else np.zeros((H.shape[0], 2), dtype=np.int64)
    sample_id = bag.sample_id if isinstance(bag, EmbeddedBag) else ""
    return FusedBag(h_hat, A, coords, sample_id)


def channel_mean(bag) -> FusedBag:
    """Parameter-free fusion: plain average over markers.

    Used as the baseline fusion and, with M=1, as the pass-through that
    reduces the model to ordinary gated-attention MIL.
    """
    H = _bag_tensor(bag)
    K, M, _ = H.shape
    A = nx.tensor(np.full((K, M, M), 1.0 / M, dtype=H.dtype))
    coords = bag.coords if isinstance(bag, EmbeddedBag) else np.zeros((K, 2), dtype=np.int64)
    sample_id = bag.sample_id if isinstance(bag, EmbeddedBag) else ""
    return FusedBag(nx.mean(H, axis=1), A, coords, sample_id)
