"""Gated pooling attention over per-view embeddings.

Each view embedding (S_I, H_I) is flattened to a vector v of length
M = S_I * H_I and scored with

    logit_i = w . ( tanh(Z v_i) * sigmoid(G v_i) )

The softmax of the logits gives mixing weights on the probability simplex,
and the pooled embedding is the weighted sum of the original views. The
score is a function of each view's content alone, so reordering the views
permutes the weights and leaves the pooled embedding unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import autodiff as ad
from .autodiff import SeededRng, Tensor
from .errors import ShapeError


@dataclass
class GatedPoolParams:
    w: Tensor  # (1, K)
    z: Tensor  # (K, M)
    g: Tensor  # (K, M)

    @property
    def k(self) -> int:
        return self.w.shape[1]

    @property
    def m(self) -> int:
        return self.z.shape[1]

    @classmethod
    def create(cls, rng: SeededRng, k: int, m: int, std: float = 0.02) -> "GatedPoolParams":
        if k < 1 or m < 1:
            raise ShapeError(f"gate needs k >= 1 and m >= 1, got k={k}, m={m}")
        return cls(w=rng.normal_tensor((1, k), std),
                   z=rng.normal_tensor((k, m), std),
                   g=rng.normal_tensor((k, m), std))

    def params(self) -> dict[str, Tensor]:
        return {"fusion.w": self.w, "fusion.z": self.z, "fusion.g": self.g}


@dataclass
class FusionOutput:
    alpha: Tensor  # (N, 1), entries on the simplex
    fused: Tensor  # (S_I, H_I)


@dataclass
class ProjectionLayer:
    weight: Tensor  # (H_I, H_T)
    bias: Tensor    # (H_T,)

    @classmethod
    def create(cls, rng: SeededRng, d_in: int, d_out: int, std: float = 0.02) -> "ProjectionLayer":
        return cls(weight=rng.normal_tensor((d_in, d_out), std), bias=ad.zeros((d_out,)))

    def params(self) -> dict[str, Tensor]:
        return {"proj.weight": self.weight, "proj.bias": self.bias}


def attention_logits(views: Sequence[Tensor], gate: GatedPoolParams) -> Tensor:
    """Per-view gate scores as an (N, 1) tensor."""
    m = gate.z.shape[1]
    logits = []
    for v in views:
        if v.size != m:
            raise ShapeError(f"view of shape {v.shape} does not flatten to gate width {m}")
        col = ad.reshape(v, (m, 1))
        gated = ad.hadamard(ad.tanh(ad.matmul(gate.z, col)), ad.sigmoid(ad.matmul(gate.g, col)))
        logits.append(ad.matmul(gate.w, gated))
    return ad.concat_rows(logits)


def fuse(views: Sequence[Tensor], gate: GatedPoolParams) -> FusionOutput:
    """Pool N view embeddings into one, weighted on the softmax simplex."""
    if len(views) == 0:
        raise ShapeError("fuse needs at least one view")
    shape = views[0].shape
    for v in views:
        if v.shape != shape:
            raise ShapeError(f"view shapes differ: {shape} vs {v.shape}")
    alpha = ad.softmax(attention_logits(views, gate), axis=0)
    fused = None
    for i, v in enumerate(views):
        term = ad.scalar_mul(ad.slice_rows(alpha, i, i + 1), v)
        fused = term if fused is None else ad.add(fused, term)
    return FusionOutput(alpha=alpha, fused=fused)


def project_and_concat(fused: Tensor, proj: ProjectionLayer, text_emb: Tensor) -> Tensor:
    """Project the pooled image embedding to the text width, then stack
    text rows first and image rows second."""
    if fused.shape[1] != proj.weight.shape[0]:
        raise ShapeError(f"fused width {fused.shape[1]} does not match projection input {proj.weight.shape[0]}")
    if text_emb.shape[1] != proj.weight.shape[1]:
        raise ShapeError(f"text width {text_emb.shape[1]} does not match projection output {proj.weight.shape[1]}")
    image_rows = ad.add_bias(ad.matmul(fused, proj.weight), proj.bias)
    return ad.concat_rows([text_emb, image_rows])
