"""Patch-projection image embedding.

An image is sliced into non-overlapping PxP patches (left-to-right,
top-to-bottom), each patch is flattened channel-major and sent through one
shared linear map, and a learned positional embedding is added. No
attention blocks and no class token: the embedder's output rows correspond
one-to-one to patches.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import SeededRng, Tensor
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class Image:
    """RGB image, channels-first float64 pixels in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[0] != 3:
            raise DataError(f"image must have shape (3, h, w), got {p.shape}")
        if p.dtype != np.float64:
            object.__setattr__(self, "pixels", p.astype(np.float64))
            p = self.pixels
        if p.min() < 0.0 or p.max() > 1.0:
            raise DataError("pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


def load_ppm(path) -> Image:
    """Read a binary PPM (P6, maxval 255) into an Image."""
    with open(path, "rb") as fh:
        blob = fh.read()
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed; pixel data starts after one whitespace byte.
    pos = 0
    tokens = []
    while len(tokens) < 4:
        m = re.match(rb"(?:\s*(?:#[^\n]*\n)?)*\s*(\S+)", blob[pos:])
        if not m:
            raise DataError(f"{path}: truncated PPM header")
        tokens.append(m.group(1))
        pos += m.end()
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a P6 PPM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    raw = blob[pos + 1 : pos + 1 + 3 * width * height]
    if len(raw) != 3 * width * height:
        raise DataError(f"{path}: pixel payload truncated")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return Image(arr.transpose(2, 0, 1).astype(np.float64) / 255.0)


def save_ppm(path, img: Image) -> None:
    arr = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.width, img.height))
        fh.write(arr.transpose(1, 2, 0).tobytes())


def patchify(img: Image, patch_size: int) -> Tensor:
    """Slice an image into rows of flattened PxP patches.

    Row r holds patch r in left-to-right, top-to-bottom order; each row is
    the row-major flattening of that patch's (3, P, P) block.
    """
    p = int(patch_size)
    h, w = img.height, img.width
    if p <= 0 or h % p or w % p:
        raise ConfigError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    blocks = img.pixels.reshape(3, gh, p, gw, p).transpose(1, 3, 0, 2, 4)
    return Tensor(blocks.reshape(gh * gw, 3 * p * p))


@dataclass
class PatchEmbedder:
    """Shared linear patch projection plus positional embedding.

    ``frozen`` embeds the training-time contract: when set, none of the
    three parameter tensors may receive gradient updates in any stage.
    """

    patch_size: int
    image_h: int
    image_w: int
    proj: Tensor      # (3 * P^2, H_I)
    bias: Tensor      # (H_I,)
    pos: Tensor       # (S_I, H_I)
    frozen: bool = True

    @property
    def n_patches(self) -> int:
        return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)

    @property
    def embed_dim(self) -> int:
        return self.proj.shape[1]

    @classmethod
    def create(cls, rng: SeededRng, patch_size: int, image_h: int, image_w: int,
               embed_dim: int, std: float = 0.02, frozen: bool = True) -> "PatchEmbedder":
        if image_h % patch_size or image_w % patch_size:
            raise ConfigError(f"image {image_h}x{image_w} not divisible by patch {patch_size}")
        s_i = (image_h // patch_size) * (image_w // patch_size)
        d_in = 3 * patch_size * patch_size
        return cls(
            patch_size=patch_size,
            image_h=image_h,
            image_w=image_w,
            proj=rng.normal_tensor((d_in, embed_dim), std),
            bias=ad.zeros((embed_dim,)),
            pos=rng.normal_tensor((s_i, embed_dim), std),
            frozen=frozen,
        )

    def params(self) -> dict[str, Tensor]:
        return {"vision.proj": self.proj, "vision.bias": self.bias, "vision.pos": self.pos}


def embed_view(img: Image, pe: PatchEmbedder) -> Tensor:
    """One camera image -> (S_I, H_I) patch-sequence embedding."""
    if img.height != pe.image_h or img.width != pe.image_w:
        raise ConfigError(
            f"image {img.height}x{img.width} does not match embedder "
            f"configuration {pe.image_h}x{pe.image_w}")
    x = patchify(img, pe.patch_size)
    return ad.add(ad.add_bias(ad.matmul(x, pe.proj), pe.bias), pe.pos)
