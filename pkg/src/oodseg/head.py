"""Two-channel anomaly head: stacked Conv-BN-ReLU blocks over frozen features.

The head is the only trainable component in the pipeline.  Forward and
backward passes are written out by hand in float64 numpy, including the
batch-normalization gradient, so they can be verified against central
finite differences.  Convolutions use zero padding and odd kernels
(1x1 by default, so each block is a per-pixel linear map).

Batch statistics are taken over the spatial positions of the single
[D, H, W] feature map being processed; train-mode forwards update the
running statistics in place, eval-mode forwards are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorio import read_tensor, write_tensor

OUT_CHANNELS = 2


class HeadShapeError(ValueError):
    """Feature map incompatible with the head configuration."""


@dataclass(frozen=True)
class HeadConfig:
    feature_dim: int
    blocks: int = 3
    hidden: int = 32
    kernel_size: int = 1
    use_batchnorm: bool = True
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {self.blocks}")
        if self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ValueError(f"bn_momentum must be in [0, 1), got {self.bn_momentum}")
        if self.bn_epsilon <= 0.0:
            raise ValueError(f"bn_epsilon must be positive, got {self.bn_epsilon}")


@dataclass
class BlockParams:
    w: np.ndarray  # [out, in, k, k]
    b: np.ndarray  # [out]
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    run_mean: np.ndarray | None = None
    run_var: np.ndarray | None = None


@dataclass
class HeadParams:
    config: HeadConfig
    blocks: list[BlockParams] = field(default_factory=list)
    out_w: np.ndarray = None  # [2, hidden]
    out_b: np.ndarray = None  # [2]

    def trainable(self) -> list[tuple[str, np.ndarray]]:
        """Gradient-carrying leaves in a fixed order (running stats excluded)."""
        leaves = []
        for i, blk in enumerate(self.blocks):
            leaves.append((f"block{i}.w", blk.w))
            leaves.append((f"block{i}.b", blk.b))
            if blk.gamma is not None:
                leaves.append((f"block{i}.gamma", blk.gamma))
                leaves.append((f"block{i}.beta", blk.beta))
        leaves.append(("out.w", self.out_w))
        leaves.append(("out.b", self.out_b))
        return leaves

    def n_parameters(self) -> int:
        n = sum(arr.size for _, arr in self.trainable())
        for blk in self.blocks:
            if blk.run_mean is not None:
                n += blk.run_mean.size + blk.run_var.size
        return n


def expected_n_parameters(cfg: HeadConfig) -> int:
    k2 = cfg.kernel_size**2
    n = 0
    c_in = cfg.feature_dim
    for _ in range(cfg.blocks):
        n += cfg.hidden * c_in * k2 + cfg.hidden  # conv w + b
        if cfg.use_batchnorm:
            n += 4 * cfg.hidden  # gamma, beta, running mean, running var
        c_in = cfg.hidden
    n += OUT_CHANNELS * cfg.hidden + OUT_CHANNELS
    return n


def head_init(cfg: HeadConfig, seed: int) -> HeadParams:
    """Fresh parameters: He-style conv weights from a seeded PRNG, neutral rest."""
    rng = np.random.default_rng(seed)
    blocks = []
    c_in = cfg.feature_dim
    k = cfg.kernel_size
    for _ in range(cfg.blocks):
        fan_in = c_in * k * k
        blk = BlockParams(
            w=rng.standard_normal((cfg.hidden, c_in, k, k)) * np.sqrt(2.0 / fan_in),
            b=np.zeros(cfg.hidden),
        )
        if cfg.use_batchnorm:
            blk.gamma = np.ones(cfg.hidden)
            blk.beta = np.zeros(cfg.hidden)
            blk.run_mean = np.zeros(cfg.hidden)
            blk.run_var = np.ones(cfg.hidden)
        blocks.append(blk)
        c_in = cfg.hidden
    out_w = rng.standard_normal((OUT_CHANNELS, cfg.hidden)) * np.sqrt(2.0 / cfg.hidden)
    return HeadParams(config=cfg, blocks=blocks, out_w=out_w, out_b=np.zeros(OUT_CHANNELS))


def _conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # zero-padded 'same' convolution, accumulated one kernel tap at a time
    k = w.shape[2]
    if k == 1:
        co, ci = w.shape[0], w.shape[1]
        out = (w.reshape(co, ci) @ x.reshape(ci, -1)).reshape(co, x.shape[1], x.shape[2])
    else:
        r = k // 2
        _, h, wd = x.shape
        xp = np.pad(x, ((0, 0), (r, r), (r, r)))
        out = np.zeros((w.shape[0], h, wd))
        for di in range(k):
            for dj in range(k):
                out += np.tensordot(w[:, :, di, dj], xp[:, di : di + h, dj : dj + wd], axes=1)
    return out + b[:, None, None]


def _conv2d_backward(x: np.ndarray, w: np.ndarray, dz: np.ndarray):
    k = w.shape[2]
    if k == 1:
        co, ci = w.shape[0], w.shape[1]
        dz2 = dz.reshape(co, -1)
        dw = (dz2 @ x.reshape(ci, -1).T)[:, :, None, None]
        dx = (w.reshape(co, ci).T @ dz2).reshape(x.shape)
    else:
        r = k // 2
        _, h, wd = x.shape
        xp = np.pad(x, ((0, 0), (r, r), (r, r)))
        dw = np.empty_like(w)
        dxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                win = xp[:, di : di + h, dj : dj + wd]
                dw[:, :, di, dj] = np.tensordot(dz, win, axes=((1, 2), (1, 2)))
                dxp[:, di : di + h, dj : dj + wd] += np.tensordot(w[:, :, di, dj].T, dz, axes=1)
        dx = dxp[:, r : r + h, r : r + wd]
    db = dz.sum(axis=(1, 2))
    return dw, db, dx


@dataclass
class _BlockCache:
    x_in: np.ndarray
    xhat: np.ndarray | None
    inv_std: np.ndarray | None
    y: np.ndarray  # pre-ReLU activation


@dataclass
class HeadCache:
    params: HeadParams
    blocks: list[_BlockCache]
    a_last: np.ndarray


def head_forward(params: HeadParams, features: np.ndarray, mode: str = "eval"):
    """Run the head over [D, H, W] features; returns (logits [2, H, W], cache).

    Train mode normalizes with this map's own spatial statistics, updates
    running statistics in place, and returns the cache needed by
    ``head_backward``.  Eval mode uses running statistics and returns None
    for the cache.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = params.config
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != cfg.feature_dim:
        raise HeadShapeError(f"expected [{cfg.feature_dim}, H, W] features, got {x.shape}")
    train = mode == "train"
    caches: list[_BlockCache] = []
    for blk in params.blocks:
        if blk.gamma is not None and not train:
            # eval-mode batchnorm is a fixed per-channel affine map, so fold
            # it into the convolution: one matmul and one ReLU per block
            scale = blk.gamma / np.sqrt(blk.run_var + cfg.bn_epsilon)
            w = blk.w * scale[:, None, None, None]
            b = blk.b * scale + blk.beta - blk.run_mean * scale
            x = np.maximum(_conv2d(x, w, b), 0.0)
            continue
        z = _conv2d(x, blk.w, blk.b)
        if blk.gamma is not None:
            n = z.shape[1] * z.shape[2]
            mu = z.mean(axis=(1, 2))
            z -= mu[:, None, None]
            var = np.einsum("chw,chw->c", z, z) / n
            inv_std = 1.0 / np.sqrt(var + cfg.bn_epsilon)
            z *= inv_std[:, None, None]
            xhat = z
            m = cfg.bn_momentum
            blk.run_mean[:] = m * blk.run_mean + (1.0 - m) * mu
            blk.run_var[:] = m * blk.run_var + (1.0 - m) * var
            y = xhat * blk.gamma[:, None, None]
            y += blk.beta[:, None, None]
        else:
            xhat, inv_std, y = None, None, z
        if train:
            caches.append(_BlockCache(x_in=x, xhat=xhat, inv_std=inv_std, y=y))
        x = np.maximum(y, 0.0)
    flat = params.out_w @ x.reshape(x.shape[0], -1)
    logits = flat.reshape(OUT_CHANNELS, x.shape[1], x.shape[2]) + params.out_b[:, None, None]
    if not train:
        return logits, None
    return logits, HeadCache(params=params, blocks=caches, a_last=x)


def head_backward(params: HeadParams, cache: HeadCache, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss wrt every trainable leaf.

    ``grad_logits`` is dLoss/dlogits at the head output.  Gradients flow
    through the train-mode batch statistics; no gradient is produced for
    the (frozen) input features.
    """
    if cache is None or cache.params is not params:
        raise ValueError("cache does not belong to these parameters")
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != (OUT_CHANNELS,) + cache.a_last.shape[1:]:
        raise ValueError(f"grad shape {g.shape} does not match logits")
    grads: dict[str, np.ndarray] = {}
    g2 = g.reshape(OUT_CHANNELS, -1)
    a2 = cache.a_last.reshape(cache.a_last.shape[0], -1)
    grads["out.w"] = g2 @ a2.T
    grads["out.b"] = g.sum(axis=(1, 2))
    da = (params.out_w.T @ g2).reshape(cache.a_last.shape)
    for i in reversed(range(len(params.blocks))):
        blk, bc = params.blocks[i], cache.blocks[i]
        # da is always a freshly allocated upstream gradient, safe to reuse
        da *= bc.y > 0.0
        dy = da
        if blk.gamma is not None:
            n = dy.shape[1] * dy.shape[2]
            grads[f"block{i}.gamma"] = np.einsum("chw,chw->c", dy, bc.xhat)
            grads[f"block{i}.beta"] = dy.sum(axis=(1, 2))
            dy *= blk.gamma[:, None, None]
            s1 = dy.sum(axis=(1, 2))
            s2 = np.einsum("chw,chw->c", dy, bc.xhat)
            dy -= (s1 / n)[:, None, None]
            dy -= bc.xhat * (s2 / n)[:, None, None]
            dy *= bc.inv_std[:, None, None]
        dz = dy
        dw, db, da = _conv2d_backward(bc.x_in, blk.w, dz)
        grads[f"block{i}.w"] = dw
        grads[f"block{i}.b"] = db
    return grads


# ---------------------------------------------------------------------------
# checkpointing: one TNSR file per array plus a plain-text manifest

_MANIFEST = "head.txt"


def save_head(params: HeadParams, out_dir: str | Path, extra: dict[str, str] | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = params.config
    lines = [
        f"feature_dim={cfg.feature_dim}",
        f"blocks={cfg.blocks}",
        f"hidden={cfg.hidden}",
        f"kernel_size={cfg.kernel_size}",
        f"use_batchnorm={int(cfg.use_batchnorm)}",
        f"bn_momentum={cfg.bn_momentum!r}",
        f"bn_epsilon={cfg.bn_epsilon!r}",
    ]
    for key, val in (extra or {}).items():
        lines.append(f"{key}={val}")
    (out / _MANIFEST).write_text("\n".join(lines) + "\n")
    for i, blk in enumerate(params.blocks):
        write_tensor(out / f"block{i}_w.tnsr", blk.w)
        write_tensor(out / f"block{i}_b.tnsr", blk.b)
        if blk.gamma is not None:
            write_tensor(out / f"block{i}_gamma.tnsr", blk.gamma)
            write_tensor(out / f"block{i}_beta.tnsr", blk.beta)
            write_tensor(out / f"block{i}_run_mean.tnsr", blk.run_mean)
            write_tensor(out / f"block{i}_run_var.tnsr", blk.run_var)
    write_tensor(out / "out_w.tnsr", params.out_w)
    write_tensor(out / "out_b.tnsr", params.out_b)


def read_head_manifest(ckpt_dir: str | Path) -> dict[str, str]:
    meta = {}
    for line in (Path(ckpt_dir) / _MANIFEST).read_text().splitlines():
        if line.strip():
            key, _, val = line.partition("=")
            meta[key] = val
    return meta


def load_head(ckpt_dir: str | Path) -> HeadParams:
    ckpt = Path(ckpt_dir)
    meta = read_head_manifest(ckpt)
    cfg = HeadConfig(
        feature_dim=int(meta["feature_dim"]),
        blocks=int(meta["blocks"]),
        hidden=int(meta["hidden"]),
        kernel_size=int(meta["kernel_size"]),
        use_batchnorm=bool(int(meta["use_batchnorm"])),
        bn_momentum=float(meta["bn_momentum"]),
        bn_epsilon=float(meta["bn_epsilon"]),
    )
    blocks = []
    for i in range(cfg.blocks):
        blk = BlockParams(
            w=read_tensor(ckpt / f"block{i}_w.tnsr"),
            b=read_tensor(ckpt / f"block{i}_b.tnsr"),
        )
        if cfg.use_batchnorm:
            blk.gamma = read_tensor(ckpt / f"block{i}_gamma.tnsr")
            blk.beta = read_tensor(ckpt / f"block{i}_beta.tnsr")
            blk.run_mean = read_tensor(ckpt / f"block{i}_run_mean.tnsr")
            blk.run_var = read_tensor(ckpt / f"block{i}_run_var.tnsr")
        blocks.append(blk)
    params = HeadParams(
        config=cfg,
        blocks=blocks,
        out_w=read_tensor(ckpt / "out_w.tnsr"),
        out_b=read_tensor(ckpt / "out_b.tnsr"),
    )
    expected = expected_n_parameters(cfg)
    if params.n_parameters() != expected:
        raise ValueError(f"checkpoint holds {params.n_parameters()} parameters, config implies {expected}")
    return params
