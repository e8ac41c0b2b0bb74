"""Small encoder-decoder language model plus tokenizer, LoRA, and int8 tools.

The transformer is pre-norm with learned absolute position embeddings and
an untied output projection by default. Attention query/value matrices can
carry low-rank adapters, and any weight matrix can be swapped for a
symmetric per-tensor int8 quantized version (the quantized base is frozen
by construction; adapters stay in float).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SeededRng, Tensor
from .errors import ConfigError, ShapeError

PAD_ID, EOS_ID, UNK_ID, BOS_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<eos>", "<unk>", "<bos>")

_WORD_RE = re.compile(r"[a-z0-9_]+|[^a-z0-9_\s]")


def words(text: str) -> list[str]:
    """Lowercase and split into word runs and single punctuation marks."""
    return _WORD_RE.findall(text.lower())


class Tokenizer:
    """Whitespace/punctuation tokenizer over a corpus-built vocabulary.

    Ids 0..3 are pad/eos/unk/bos; the rest follow the vocabulary order.
    ``detokenize(tokenize(s))`` equals the canonical form of ``s`` (lowercase,
    single-space separated tokens) whenever every token is in vocabulary.
    """

    def __init__(self, vocab: Sequence[str]):
        vocab = list(vocab)
        if vocab[: len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
            raise ConfigError("vocabulary must start with the four special tokens")
        if len(set(vocab)) != len(vocab):
            raise ConfigError("vocabulary contains duplicates")
        self.vocab = vocab
        self._ids = {tok: i for i, tok in enumerate(vocab)}

    @classmethod
    def build(cls, corpus: Sequence[str]) -> "Tokenizer":
        seen: set[str] = set()
        for text in corpus:
            seen.update(words(text))
        return cls(list(SPECIAL_TOKENS) + sorted(seen))

    def __len__(self) -> int:
        return len(self.vocab)

    def tokenize(self, text: str) -> list[int]:
        return [self._ids.get(tok, UNK_ID) for tok in words(text)]

    def detokenize(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            out.append(self.vocab[i] if 0 <= i < len(self.vocab) else SPECIAL_TOKENS[UNK_ID])
        return " ".join(out)

    @staticmethod
    def normalize(text: str) -> str:
        return " ".join(words(text))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.vocab) + "\n")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        with open(path, encoding="utf-8") as fh:
            vocab = [line.rstrip("\n") for line in fh if line.strip()]
        return cls(vocab)


@dataclass
class ModelSpec:
    """Complete architecture description, shared by the runnable model and
    the cost estimator."""

    h_t: int = 64            # model width
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 64
    max_seq: int = 64
    k: int = 128             # fusion gate width
    s_i: int = 16            # patches per view
    h_i: int = 64            # view embedding width
    patch: int = 16
    image_h: int = 64
    image_w: int = 64
    tie_embeddings: bool = False

    def __post_init__(self):
        counts = (self.h_t, self.n_heads, self.d_ff, self.vocab_size, self.max_seq,
                  self.k, self.s_i, self.h_i, self.patch, self.image_h, self.image_w)
        if any(c <= 0 for c in counts) or self.n_enc_layers < 0 or self.n_dec_layers < 0:
            raise ConfigError("all ModelSpec counts must be positive")
        if self.h_t % self.n_heads:
            raise ConfigError(f"width {self.h_t} not divisible by {self.n_heads} heads")
        if self.s_i != (self.image_h // self.patch) * (self.image_w // self.patch):
            raise ConfigError(f"s_i={self.s_i} inconsistent with image {self.image_h}x{self.image_w}, patch {self.patch}")

    @property
    def m(self) -> int:
        return self.s_i * self.h_i

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelSpec keys: {sorted(unknown)}")
        return cls(**d)


def desk_spec(vocab_size: int, **overrides) -> ModelSpec:
    """Default desk-scale configuration; trains in minutes on a laptop CPU."""
    return ModelSpec(vocab_size=vocab_size, **overrides)


@dataclass
class LoraAdapter:
    """Low-rank delta on one weight matrix: W x -> W x + (alpha/rank) B(A x).

    Stored row-major for this codebase's x @ W convention: ``a`` maps input
    to rank space (d_in, r) and ``b`` maps rank space to output (r, d_out).
    ``b`` starts at zero so attaching an adapter never changes the forward
    pass until training moves it.
    """

    target: str
    rank: int
    alpha: float
    a: Tensor
    b: Tensor

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta_matrix(self) -> np.ndarray:
        return (self.a.view() @ self.b.view()) * self.scaling


@dataclass
class QuantizedLinear:
    """Symmetric per-tensor int8 weights with a float scale.

    dequantized = scale * q, with scale = max|w| / 127 (1.0 for an all-zero
    matrix), so every entry's round-trip error is at most scale / 2.
    """

    q: np.ndarray        # int8, original matrix shape
    scale: float
    shape: tuple[int, int]

    def dequant(self) -> np.ndarray:
        return self.q.astype(np.float64) * self.scale


def quantize_int8(weights: np.ndarray) -> QuantizedLinear:
    w = np.asarray(weights, dtype=np.float64)
    amax = float(np.abs(w).max()) if w.size else 0.0
    scale = amax / 127.0 if amax > 0.0 else 1.0
    q = np.clip(np.rint(w / scale), -127, 127).astype(np.int8)
    return QuantizedLinear(q=q, scale=scale, shape=tuple(w.shape))


def dequant_matmul(q: QuantizedLinear, x: Tensor) -> Tensor:
    """x @ dequantized(q); gradients flow to x only."""
    return ad.matmul(x, Tensor(q.dequant()))


def _norm_params(rng: SeededRng, dim: int, gain_init: float = 1.0) -> tuple[Tensor, Tensor]:
    return Tensor(np.full(dim, gain_init)), ad.zeros((dim,))


@dataclass
class InitScales:
    """Initialization scales for the language model.

    The vision and fusion sides are fixed at std 0.02; these knobs cover
    only the LM. The defaults are tuned for very short training schedules:
    encoder attention starts small so input rows (the image content in
    particular) stay visible in the residual stream, decoder attention
    starts larger so prefix positions produce well-separated features, the
    output head starts near zero so early logits are dominated by what
    training writes into it rather than by init noise, and the final norm
    gain is raised so those small learned head weights reach decisive logit
    ranges within a short schedule.
    """

    embed: float = 0.5
    pos: float = 0.5
    enc_attn: float = 0.08
    dec_attn: float = 0.3
    cross_attn: float = 0.3
    ffn: float = 0.1
    head: float = 1e-4
    final_gain: float = 192.0


class LanguageModel:
    """Encoder-decoder stack operating on single (unbatched) sequences."""

    def __init__(self, spec: ModelSpec, rng: SeededRng, scales: InitScales | None = None):
        self.spec = spec
        sc = scales or InitScales()
        self.scales = sc
        h, v = spec.h_t, spec.vocab_size
        p: dict[str, Tensor] = {}
        p["lm.tok_emb"] = rng.normal_tensor((v, h), sc.embed)
        p["lm.enc_pos"] = rng.normal_tensor((spec.max_seq, h), sc.pos)
        p["lm.dec_pos"] = rng.normal_tensor((spec.max_seq, h), sc.pos)
        for i in range(spec.n_enc_layers):
            pre = f"lm.enc.{i}"
            p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.bias"] = _norm_params(rng, h)
            for name in ("wq", "wk", "wv", "wo"):
                p[f"{pre}.attn.{name}"] = rng.normal_tensor((h, h), sc.enc_attn)
            p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.bias"] = _norm_params(rng, h)
            p[f"{pre}.ffn.w1"] = rng.normal_tensor((h, spec.d_ff), sc.ffn)
            p[f"{pre}.ffn.b1"] = ad.zeros((spec.d_ff,))
            p[f"{pre}.ffn.w2"] = rng.normal_tensor((spec.d_ff, h), sc.ffn)
            p[f"{pre}.ffn.b2"] = ad.zeros((h,))
        for i in range(spec.n_dec_layers):
            pre = f"lm.dec.{i}"
            p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.bias"] = _norm_params(rng, h)
            for name in ("wq", "wk", "wv", "wo"):
                p[f"{pre}.self.{name}"] = rng.normal_tensor((h, h), sc.dec_attn)
            p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.bias"] = _norm_params(rng, h)
            for name in ("wq", "wk", "wv", "wo"):
                p[f"{pre}.cross.{name}"] = rng.normal_tensor((h, h), sc.cross_attn)
            p[f"{pre}.ln3.gain"], p[f"{pre}.ln3.bias"] = _norm_params(rng, h)
            p[f"{pre}.ffn.w1"] = rng.normal_tensor((h, spec.d_ff), sc.ffn)
            p[f"{pre}.ffn.b1"] = ad.zeros((spec.d_ff,))
            p[f"{pre}.ffn.w2"] = rng.normal_tensor((spec.d_ff, h), sc.ffn)
            p[f"{pre}.ffn.b2"] = ad.zeros((h,))
        p["lm.enc_final.gain"], p["lm.enc_final.bias"] = _norm_params(rng, h)
        p["lm.dec_final.gain"], p["lm.dec_final.bias"] = _norm_params(rng, h, sc.final_gain)
        if not spec.tie_embeddings:
            p["lm.head.weight"] = rng.normal_tensor((h, v), sc.head)
            p["lm.head.bias"] = ad.zeros((v,))
        self.params = p
        self.lora: dict[str, LoraAdapter] = {}
        self.quantized: dict[str, QuantizedLinear] = {}

    # -- parameter plumbing ------------------------------------------------

    def all_params(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for target, adapter in self.lora.items():
            out[f"{target}.lora_a"] = adapter.a
            out[f"{target}.lora_b"] = adapter.b
        return out

    def _linear(self, name: str, x: Tensor) -> Tensor:
        if name in self.quantized:
            out = dequant_matmul(self.quantized[name], x)
        else:
            out = ad.matmul(x, self.params[name])
        adapter = self.lora.get(name)
        if adapter is not None:
            delta = ad.matmul(ad.matmul(x, adapter.a), adapter.b)
            out = ad.add(out, ad.scale(delta, adapter.scaling))
        return out

    def _weight_names(self) -> list[str]:
        return [n for n, t in self.params.items() if len(t.shape) == 2 and "pos" not in n and "emb" not in n]

    # -- attention ----------------------------------------------------------

    def _attention(self, prefix: str, q_in: Tensor, kv_in: Tensor,
                   causal: bool, key_mask: np.ndarray | None) -> Tensor:
        spec = self.spec
        dh = spec.h_t // spec.n_heads
        q = self._linear(f"{prefix}.wq", q_in)
        k = self._linear(f"{prefix}.wk", kv_in)
        v = self._linear(f"{prefix}.wv", kv_in)
        s_q, s_kv = q.shape[0], k.shape[0]
        bias = np.zeros((s_q, s_kv))
        if causal:
            bias += np.triu(np.full((s_q, s_kv), -1e9), k=1)
        if key_mask is not None:
            bias += np.where(np.asarray(key_mask, dtype=bool), 0.0, -1e9)[None, :]
        bias_t = Tensor(bias) if (causal or key_mask is not None) else None
        heads = []
        for hd in range(spec.n_heads):
            c0, c1 = hd * dh, (hd + 1) * dh
            qh = ad.slice_cols(q, c0, c1)
            kh = ad.slice_cols(k, c0, c1)
            vh = ad.slice_cols(v, c0, c1)
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
            if bias_t is not None:
                scores = ad.add(scores, bias_t)
            heads.append(ad.matmul(ad.softmax(scores, axis=1), vh))
        return self._linear(f"{prefix}.wo", ad.concat_cols(heads))

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        hmid = ad.relu(ad.add_bias(self._linear(f"{prefix}.w1", x), self.params[f"{prefix}.b1"]))
        return ad.add_bias(self._linear(f"{prefix}.w2", hmid), self.params[f"{prefix}.b2"])

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"])

    # -- public forward passes ----------------------------------------------

    def encode(self, mm_emb: Tensor, pad_mask: Sequence[int] | None = None) -> Tensor:
        """Run the encoder stack over an already-embedded sequence.

        ``pad_mask`` marks real positions with 1; masked positions are
        excluded as attention keys so no other position depends on them.
        """
        s = mm_emb.shape[0]
        if mm_emb.shape[1] != self.spec.h_t:
            raise ShapeError(f"encoder input width {mm_emb.shape[1]} != model width {self.spec.h_t}")
        mask = None
        if pad_mask is not None:
            mask = np.asarray(pad_mask)
            if mask.shape != (s,):
                raise ShapeError(f"pad mask length {mask.shape} does not match sequence {s}")
        x = mm_emb
        for i in range(self.spec.n_enc_layers):
            pre = f"lm.enc.{i}"
            normed = self._ln(f"{pre}.ln1", x)
            x = ad.add(x, self._attention(f"{pre}.attn", normed, normed, causal=False, key_mask=mask))
            x = ad.add(x, self._ffn(f"{pre}.ffn", self._ln(f"{pre}.ln2", x)))
        if self.spec.n_enc_layers > 0:
            x = self._ln("lm.enc_final", x)
        return x

    def embed_tokens(self, ids: Sequence[int], table: str = "lm.tok_emb") -> Tensor:
        return ad.embedding_lookup(self.params[table], ids)

    def add_positions(self, x: Tensor, table: str) -> Tensor:
        s = x.shape[0]
        if s > self.spec.max_seq:
            raise ShapeError(f"sequence length {s} exceeds max_seq {self.spec.max_seq}")
        return ad.add(x, ad.slice_rows(self.params[table], 0, s))

    def decode(self, dec_ids: Sequence[int], enc_out: Tensor,
               enc_mask: Sequence[int] | None = None) -> Tensor:
        """Teacher-forced decoder pass; returns (T, vocab) logits."""
        x = self.add_positions(self.embed_tokens(dec_ids), "lm.dec_pos")
        kmask = np.asarray(enc_mask) if enc_mask is not None else None
        for i in range(self.spec.n_dec_layers):
            pre = f"lm.dec.{i}"
            normed = self._ln(f"{pre}.ln1", x)
            x = ad.add(x, self._attention(f"{pre}.self", normed, normed, causal=True, key_mask=None))
            x = ad.add(x, self._attention(f"{pre}.cross", self._ln(f"{pre}.ln2", x),
                                          enc_out, causal=False, key_mask=kmask))
            x = ad.add(x, self._ffn(f"{pre}.ffn", self._ln(f"{pre}.ln3", x)))
        x = self._ln("lm.dec_final", x)
        if self.spec.tie_embeddings:
            return ad.matmul(x, ad.transpose(self.params["lm.tok_emb"]))
        return ad.add_bias(self._linear("lm.head.weight", x), self.params["lm.head.bias"])

    def greedy_generate(self, mm_emb: Tensor, max_len: int,
                        pad_mask: Sequence[int] | None = None) -> list[int]:
        """Argmax decoding until eos or ``max_len`` tokens; deterministic."""
        if max_len < 1:
            raise ConfigError("max_len must be >= 1")
        enc_out = self.encode(mm_emb, pad_mask)
        ids = [BOS_ID]
        out: list[int] = []
        for _ in range(max_len):
            logits = self.decode(ids, enc_out, enc_mask=pad_mask)
            nxt = int(np.argmax(logits.view()[-1]))
            if nxt == EOS_ID:
                break
            out.append(nxt)
            ids.append(nxt)
            if len(ids) >= self.spec.max_seq:
                break
        return out


def attach_lora(model: LanguageModel, targets: Sequence[str] = ("wq", "wv"),
                rank: int = 4, alpha: float = 8.0, rng: SeededRng | None = None,
                std: float = 0.02) -> LanguageModel:
    """Add adapters to every attention matrix whose leaf name is in ``targets``.

    ``b`` is zero-initialized, so the adapted model's outputs are
    bit-identical to the base until training updates the adapter.
    """
    rng = rng or SeededRng(0)
    known = {"wq", "wk", "wv", "wo"}
    bad = set(targets) - known
    if bad:
        raise ConfigError(f"unknown LoRA targets {sorted(bad)}; expected a subset of {sorted(known)}")
    matched = False
    for name, t in model.params.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in targets and (".attn." in name or ".self." in name or ".cross." in name):
            d_in, d_out = t.shape
            model.lora[name] = LoraAdapter(
                target=name, rank=rank, alpha=alpha,
                a=rng.normal_tensor((d_in, rank), std),
                b=ad.zeros((rank, d_out)))
            matched = True
    if not matched:
        raise ConfigError(f"no attention matrices matched LoRA targets {list(targets)}")
    return model


def merge_lora(model: LanguageModel) -> None:
    """Fold every adapter into its base matrix: W += (alpha/rank) A B."""
    for name, adapter in model.lora.items():
        if name in model.quantized:
            raise ConfigError(f"cannot merge an adapter into quantized weights ({name})")
        self_w = model.params[name]
        self_w.data += adapter.delta_matrix().reshape(-1)
    model.lora.clear()


def quantize_lm(model: LanguageModel, targets: Sequence[str] | None = None) -> LanguageModel:
    """Replace LM weight matrices with int8 versions (frozen by construction)."""
    names = targets if targets is not None else model._weight_names()
    for name in names:
        if name not in model.params:
            raise ConfigError(f"unknown weight matrix {name!r}")
        t = model.params[name]
        model.quantized[name] = quantize_int8(t.view())
        t.requires_grad = False
    return model
