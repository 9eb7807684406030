"""Full MIL model: marker fusion, gated attention pooling, hazard head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .fusion import EmbeddedBag, FusedBag, FusionParams, channel_mean, fuse
from .numerics import Tensor
from .pooling import ClassifierParams, GatedAttentionParams, PoolOutput, pool_and_classify

FUSION_KINDS = ("fluoroformer", "mean")


@dataclass
class ModelOutput:
    pooled: PoolOutput
    fused: FusedBag

    @property
    def logits(self) -> Tensor:
        return self.pooled.logits


class MILModel:
    """Fusion block + gated attention pooling + linear head.

    ``fusion="mean"`` replaces the fusion block with a plain marker
    average, which for single-marker (H&E) bags is the identity.
    """

    def __init__(self, d_emb: int, d_hid: int = 256, d_att: int = 256, n_bins: int = 4, *,
                 fusion: str = "fluoroformer", seed: int = 0, n_heads: int = 1, qkv_bias: bool = True,
                 eps: float = 1e-5):
        if fusion not in FUSION_KINDS:
            raise ValueError(f"fusion must be one of {FUSION_KINDS}, got {fusion!r}")
        self.d_emb, self.d_hid, self.d_att, self.n_bins = d_emb, d_hid, d_att, n_bins
        self.fusion_kind = fusion
        rng = np.random.default_rng(seed)
        self.fusion = FusionParams.init(d_emb, d_hid, rng, qkv_bias=qkv_bias, n_heads=n_heads, eps=eps) \
            if fusion == "fluoroformer" else None
        self.attention = GatedAttentionParams.init(d_emb, d_att, rng)
        self.head = ClassifierParams.init(d_emb, n_bins, rng)
        self.cast(nx.get_dtype())

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.fusion is not None:
            out.update({f"fusion.{k}": v for k, v in self.fusion.named_tensors().items()})
        out.update({f"attention.{k}": v for k, v in self.attention.named_tensors().items()})
        out.update({f"head.{k}": v for k, v in self.head.named_tensors().items()})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def cast(self, dtype) -> None:
        for t in self.parameters():
            t.data = t.data.astype(dtype)

    @property
    def dtype(self):
        return self.head.W.dtype

    def zero_grad(self) -> None:
        nx.zero_grad(self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(params) != set(state):
            missing, extra = set(params) - set(state), set(state) - set(params)
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], copy=True)

    def fuse(self, bag: EmbeddedBag) -> FusedBag:
        if bag.H.dtype != self.dtype:
            bag = EmbeddedBag(nx.tensor(bag.H.data.astype(self.dtype)), bag.coords, bag.sample_id, bag.channel_names)
        if self.fusion is None:
            return channel_mean(bag)
        return fuse(bag, self.fusion)

    def __call__(self, bag: EmbeddedBag) -> ModelOutput:
        fused = self.fuse(bag)
        return ModelOutput(pool_and_classify(fused.H_hat, self.attention, self.head), fused)
