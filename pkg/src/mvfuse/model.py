"""Full multi-view QA model: patch embedder -> gated fusion -> projection
-> encoder-decoder LM, with one flat named-parameter registry.

Parameter groups by name prefix: ``vision.`` (always frozen in training),
``fusion.``, ``proj.``, ``lm.``, and adapter arrays ending in
``.lora_a`` / ``.lora_b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from . import autodiff as ad
from .autodiff import SeededRng, Tensor
from .data import CAMERA_NAMES, QASample
from .errors import ConfigError
from .fusion import FusionOutput, GatedPoolParams, ProjectionLayer, fuse, project_and_concat
from .lm import (BOS_ID, EOS_ID, PAD_ID, InitScales, LanguageModel, ModelSpec,
                 Tokenizer, attach_lora, quantize_lm)
from .vision import Image, PatchEmbedder, load_ppm


@dataclass
class MultiViewQAModel:
    spec: ModelSpec
    tokenizer: Tokenizer
    patch_embedder: PatchEmbedder
    gate: GatedPoolParams
    projection: ProjectionLayer
    lm: LanguageModel

    @classmethod
    def create(cls, spec: ModelSpec, tokenizer: Tokenizer, seed: int,
               scales: InitScales | None = None) -> "MultiViewQAModel":
        if len(tokenizer) != spec.vocab_size:
            raise ConfigError(f"tokenizer size {len(tokenizer)} != spec vocab {spec.vocab_size}")
        rng = SeededRng(seed)
        return cls(
            spec=spec,
            tokenizer=tokenizer,
            patch_embedder=PatchEmbedder.create(rng.spawn(1), spec.patch, spec.image_h,
                                                spec.image_w, spec.h_i),
            gate=GatedPoolParams.create(rng.spawn(2), spec.k, spec.m),
            projection=ProjectionLayer.create(rng.spawn(3), spec.h_i, spec.h_t),
            lm=LanguageModel(spec, rng.spawn(4), scales),
        )

    # -- parameters -------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.patch_embedder.params())
        out.update(self.gate.params())
        out.update(self.projection.params())
        out.update(self.lm.all_params())
        return out

    def set_trainable(self, groups: tuple[str, ...]) -> None:
        """Mark exactly the given groups trainable.

        Groups: "fusion", "proj", "lm" (base weights, not adapters),
        "lora", "vision". The patch embedder additionally honours its own
        frozen flag regardless of the request.
        """
        for name, t in self.params().items():
            if name.endswith(".lora_a") or name.endswith(".lora_b"):
                on = "lora" in groups
            elif name.startswith("lm."):
                on = "lm" in groups and name not in self.lm.quantized
            elif name.startswith("fusion."):
                on = "fusion" in groups
            elif name.startswith("proj."):
                on = "proj" in groups
            else:  # vision.*
                on = "vision" in groups and not self.patch_embedder.frozen
            t.requires_grad = on

    def trainable_params(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.params().items() if t.requires_grad}

    # -- forward ----------------------------------------------------------

    def question_ids(self, question: str) -> list[int]:
        return self.tokenizer.tokenize(question) + [EOS_ID]

    def load_views(self, sample: QASample) -> list[Image]:
        return [_cached_ppm(sample.views[cam]) for cam in CAMERA_NAMES]

    def multimodal_embedding(self, question: str, views: list[Image]) -> tuple[Tensor, FusionOutput]:
        """Text rows first, pooled+projected image rows second, positions added."""
        from .vision import embed_view
        q_ids = self.question_ids(question)
        text_emb = self.lm.embed_tokens(q_ids)
        view_embs = [embed_view(img, self.patch_embedder) for img in views]
        fo = fuse(view_embs, self.gate)
        mm = project_and_concat(fo.fused, self.projection, text_emb)
        return self.lm.add_positions(mm, "lm.enc_pos"), fo

    def answer_loss(self, question: str, answer: str, views: list[Image]) -> Tensor:
        """Teacher-forced mean cross entropy over answer tokens + eos."""
        mm, _ = self.multimodal_embedding(question, views)
        enc_out = self.lm.encode(mm)
        a_ids = self.tokenizer.tokenize(answer)
        dec_in = [BOS_ID] + a_ids
        targets = a_ids + [EOS_ID]
        logits = self.lm.decode(dec_in, enc_out)
        return ad.cross_entropy(logits, targets, PAD_ID)

    def sample_loss(self, sample: QASample) -> Tensor:
        return self.answer_loss(sample.question, sample.answer, self.load_views(sample))

    def generate(self, question: str, views: list[Image], max_len: int = 24) -> str:
        mm, _ = self.multimodal_embedding(question, views)
        ids = self.lm.greedy_generate(mm, max_len)
        return self.tokenizer.detokenize(ids)

    def generate_for(self, sample: QASample, max_len: int = 24) -> str:
        return self.generate(sample.question, self.load_views(sample), max_len)

    # -- variants -----------------------------------------------------------

    def with_lora(self, targets=("wq", "wv"), rank: int = 4, alpha: float = 8.0,
                  seed: int = 0) -> "MultiViewQAModel":
        attach_lora(self.lm, targets, rank, alpha, SeededRng(seed))
        return self

    def quantized(self) -> "MultiViewQAModel":
        quantize_lm(self.lm)
        return self


@lru_cache(maxsize=256)
def _cached_ppm(path: str) -> Image:
    return load_ppm(path)
