"""Gated attention pooling over patches and the linear output head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor


@dataclass
class GatedAttentionParams:
    V: Tensor  # (d_att, d_emb)
    V_b: Tensor
    U: Tensor  # (d_att, d_emb)
    U_b: Tensor
    w: Tensor  # (d_att, 1)
    w_b: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        return {"V": self.V, "V_b": self.V_b, "U": self.U, "U_b": self.U_b, "w": self.w, "w_b": self.w_b}

    @classmethod
    def init(cls, d_emb: int, d_att: int, rng: np.random.Generator) -> "GatedAttentionParams":
        b_in, b_att = 1.0 / math.sqrt(d_emb), 1.0 / math.sqrt(d_att)
        params = cls(
            V=nx.parameter(rng.uniform(-b_in, b_in, (d_att, d_emb))),
            V_b=nx.parameter(rng.uniform(-b_in, b_in, d_att)),
            U=nx.parameter(rng.uniform(-b_in, b_in, (d_att, d_emb))),
            U_b=nx.parameter(rng.uniform(-b_in, b_in, d_att)),
            w=nx.parameter(rng.uniform(-b_att, b_att, (d_att, 1))),
            w_b=nx.parameter(rng.uniform(-b_att, b_att, 1)),
        )
        for name, t in params.named_tensors().items():
            t.name = name
        return params


@dataclass
class ClassifierParams:
    W: Tensor  # (n_bins, d_emb)
    b: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}

    @classmethod
    def init(cls, d_emb: int, n_bins: int, rng: np.random.Generator) -> "ClassifierParams":
        bound = 1.0 / math.sqrt(d_emb)
        params = cls(
            W=nx.parameter(rng.uniform(-bound, bound, (n_bins, d_emb))),
            b=nx.parameter(rng.uniform(-bound, bound, n_bins)),
        )
        params.W.name, params.b.name = "W", "b"
        return params


@dataclass
class PoolOutput:
    h_bag: Tensor
    a: Tensor
    logits: Tensor


def gated_attention(H_hat: Tensor, theta: GatedAttentionParams) -> Tensor:
    """Patch weights ``softmax_k(w^T (tanh(V h_k) * sigm(U h_k)))``."""
    if H_hat.ndim != 2 or H_hat.shape[0] < 1:
        raise DimensionError(f"gated_attention expects (K, d_emb) with K >= 1, got {H_hat.shape}")
    if H_hat.shape[1] != theta.V.shape[1]:
        raise DimensionError(f"embedding dim {H_hat.shape[1]} != attention input {theta.V.shape[1]}")
    gate = nx.hadamard(nx.tanh(nx.linear(H_hat, theta.V, theta.V_b)),
                       nx.sigm(nx.linear(H_hat, theta.U, theta.U_b)))
    scores = nx.add(nx.matmul(gate, theta.w), theta.w_b)
    return nx.softmax(nx.reshape(scores, (H_hat.shape[0],)), axis=0)


def weighted_sum(H_hat: Tensor, a: Tensor) -> Tensor:
    K, d = H_hat.shape
    return nx.reshape(nx.matmul(nx.reshape(a, (1, K)), H_hat), (d,))


def pool(H_hat: Tensor, theta: GatedAttentionParams) -> Tensor:
    """Attention-weighted sum of the patch vectors."""
    return weighted_sum(H_hat, gated_attention(H_hat, theta))


def classify(h_bag: Tensor, phi: ClassifierParams) -> Tensor:
    if h_bag.shape != (phi.W.shape[1],):
        raise DimensionError(f"slide vector {h_bag.shape} does not match head {phi.W.shape}")
    return nx.linear(h_bag, phi.W, phi.b)


def pool_and_classify(H_hat: Tensor, theta: GatedAttentionParams, phi: ClassifierParams) -> PoolOutput:
    a = gated_attention(H_hat, theta)
    h_bag = weighted_sum(H_hat, a)
    return PoolOutput(h_bag, a, classify(h_bag, phi))
