"""Small vision-transformer encoder that emits one embedding per patch."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Configuration values or weights are mutually inconsistent."""


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 32
    num_heads: int = 4
    num_layers: int = 2
    mlp_ratio: float = 2.0
    dropout_rate: float = 0.1
    channels: int = 1

    def __post_init__(self):
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.num_heads <= 0 or self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """(c, h, w) or (b, c, h, w) -> (num_patches, c*p*p), row-major patch order.

    Each row is the patch flattened channel-first, then row, then column.
    """
    batched = image.ndim == 4
    x = image if batched else T.reshape(image, (1,) + image.shape)
    b, c, h, w = x.shape
    if h != w or h % patch_size:
        raise ConfigError(f"image {h}x{w} cannot be tiled by {patch_size}px patches")
    g = h // patch_size
    x = T.reshape(x, (b, c, g, patch_size, g, patch_size))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (b, g * g, c * patch_size * patch_size))
    return x if batched else T.reshape(x, x.shape[1:])


def unpatchify(patches: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    """Inverse of :func:`patchify` on plain arrays, unbatched."""
    n = patches.shape[0]
    g = int(round(math.sqrt(n)))
    x = patches.reshape(g, g, channels, patch_size, patch_size)
    return x.transpose(2, 0, 3, 1, 4).reshape(channels, g * patch_size, g * patch_size)


def _normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_vit_weights(cfg: ViTConfig, rng: np.random.Generator, prefix: str = "vit.") -> dict[str, Tensor]:
    d, h = cfg.embed_dim, cfg.mlp_dim
    w: dict[str, Tensor] = {
        "patch.proj": _normal(rng, (cfg.patch_dim, d)),
        "patch.bias": _zeros((d,)),
        "patch.pos": _normal(rng, (cfg.num_patches, d)),
    }
    for i in range(cfg.num_layers):
        p = f"block{i}."
        w[p + "ln1.g"] = _ones((d,))
        w[p + "ln1.b"] = _zeros((d,))
        for name in ("q", "k", "v", "o"):
            w[p + f"attn.w{name}"] = _normal(rng, (d, d))
            w[p + f"attn.b{name}"] = _zeros((d,))
        w[p + "ln2.g"] = _ones((d,))
        w[p + "ln2.b"] = _zeros((d,))
        w[p + "mlp.w1"] = _normal(rng, (d, h))
        w[p + "mlp.b1"] = _zeros((h,))
        w[p + "mlp.w2"] = _normal(rng, (h, d))
        w[p + "mlp.b2"] = _zeros((d,))
    w["ln_f.g"] = _ones((d,))
    w["ln_f.b"] = _zeros((d,))
    return {prefix + k: v for k, v in w.items()}


def multi_head_self_attention(x: Tensor, weights: dict[str, Tensor], num_heads: int,
                              prefix: str = "", return_attention: bool = False):
    """softmax(Q K^T / sqrt(d_head)) V per head, heads concatenated, then projected.

    ``x`` is (n, d) or (b, n, d). ``weights`` holds ``{prefix}wq``/``bq`` etc.
    """
    batched = x.ndim == 3
    if not batched:
        x = T.reshape(x, (1,) + x.shape)
    b, n, d = x.shape
    if num_heads <= 0 or d % num_heads:
        raise ConfigError(f"embed dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def heads(name):
        y = T.matmul(x, weights[prefix + "w" + name]) + weights[prefix + "b" + name]
        return T.transpose(T.reshape(y, (b, n, num_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = T.softmax_lastdim(scores)
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    out = T.matmul(ctx, weights[prefix + "wo"]) + weights[prefix + "bo"]
    if not batched:
        out = T.reshape(out, (n, d))
    if return_attention:
        return out, attn.data if batched else attn.data[0]
    return out


def check_weights(cfg: ViTConfig, weights: dict[str, Tensor], prefix: str = "vit.") -> None:
    expected = init_vit_weights(cfg, np.random.default_rng(0), prefix)
    for name, ref in expected.items():
        got = weights.get(name)
        if got is None:
            raise ConfigError(f"missing encoder weight {name!r}")
        if got.shape != ref.shape:
            raise ConfigError(f"encoder weight {name!r} has shape {got.shape}, config implies {ref.shape}")


def encode(image: Tensor, cfg: ViTConfig, weights: dict[str, Tensor], *, training: bool = False,
           key: tuple[int, int] = (0, 0), prefix: str = "vit.") -> Tensor:
    """Per-patch embeddings after ``num_layers`` pre-norm transformer blocks.

    ``image`` is (c, h, w) or (b, c, h, w); output is (num_patches, d) or
    (b, num_patches, d). ``key`` = (run seed, step) seeds dropout.
    """
    proj = weights.get(prefix + "patch.proj")
    if proj is None or proj.shape != (cfg.patch_dim, cfg.embed_dim):
        check_weights(cfg, weights, prefix)
    if image.shape[-1] != cfg.image_size or image.shape[-3] != cfg.channels:
        raise ConfigError(f"image shape {image.shape} does not match config ({cfg.channels}, {cfg.image_size}, {cfg.image_size})")
    w = weights
    rate = cfg.dropout_rate
    x = T.matmul(patchify(image, cfg.patch_size), w[prefix + "patch.proj"]) + w[prefix + "patch.bias"]
    x = x + w[prefix + "patch.pos"]
    x = T.dropout(x, rate, training, (key[0], 0, key[1]))
    for i in range(cfg.num_layers):
        p = f"{prefix}block{i}."
        h = T.layernorm(x, w[p + "ln1.g"], w[p + "ln1.b"])
        h = multi_head_self_attention(h, w, cfg.num_heads, prefix=p + "attn.")
        x = x + T.dropout(h, rate, training, (key[0], 10 * i + 1, key[1]))
        h = T.layernorm(x, w[p + "ln2.g"], w[p + "ln2.b"])
        h = T.gelu(T.matmul(h, w[p + "mlp.w1"]) + w[p + "mlp.b1"])
        h = T.matmul(h, w[p + "mlp.w2"]) + w[p + "mlp.b2"]
        x = x + T.dropout(h, rate, training, (key[0], 10 * i + 2, key[1]))
    return T.layernorm(x, w[prefix + "ln_f.g"], w[prefix + "ln_f.b"])


def passthrough_encode(image: Tensor, cfg: ViTConfig) -> Tensor:
    """Ablation encoder: raw flattened patches, no learned transform."""
    return patchify(image, cfg.patch_size)
