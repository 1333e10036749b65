"""Text-conditioned triplane generator.

A linear projection lifts the averaged prompt embedding into three feature
planes (XY, XZ, YZ); a stack of conditioned blocks then refines them. Each
block applies, in order and each behind its own residual connection:

  1. multihead cross-attention (every plane pixel queries the text tokens),
  2. a 3D-aware 3x3 convolution whose input concatenates, per pixel, the
     plane's own features with axis-aligned feature means gathered from the
     other two planes along the shared coordinates, followed by ReLU,
  3. a depthwise 7x7 convolution and an inverted channel MLP (C -> 4C -> C
     with GELU), each residual on its own.

With every sub-module's last layer zero-initialized the whole stack is the
identity, so training starts from the raw projection triplane.

Plane layout: planes[0] = XY with axes (x, y), planes[1] = XZ with (x, z),
planes[2] = YZ with (y, z); channel-first (3, C, H, W).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .embedding import PromptEmbedding


@dataclass
class TriplaneConfig:
    channels: int = 16
    plane_size: int = 32
    blocks: int = 2
    heads: int = 4
    text_channels: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.channels % self.heads:
            raise ValueError("attention head count must divide the channel count")
        if min(self.channels, self.plane_size, self.heads, self.text_channels) < 1:
            raise ValueError("triplane config dimensions must be positive")
        if self.blocks < 0:
            raise ValueError("block count must be >= 0")


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    lim = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=shape)


class TriplaneGenerator:
    """Owns the projection and block parameters; weights are plain Tensors."""

    def __init__(self, cfg: TriplaneConfig):
        cfg.validate()
        self.cfg = cfg
        c, hw, ce = cfg.channels, cfg.plane_size, cfg.text_channels
        rng = np.random.default_rng(cfg.seed)
        p: dict[str, T.Tensor] = {}

        def add(name, arr):
            p[name] = T.parameter(arr, name=name)

        add("proj.w", _uniform(rng, ce, (ce, 3 * c * hw * hw)))
        add("proj.b", np.zeros(3 * c * hw * hw))
        for i in range(cfg.blocks):
            pre = f"block{i}."
            add(pre + "attn.wq", _uniform(rng, c, (c, c)))
            add(pre + "attn.bq", np.zeros(c))
            add(pre + "attn.wk", _uniform(rng, ce, (ce, c)))
            add(pre + "attn.bk", np.zeros(c))
            add(pre + "attn.wv", _uniform(rng, ce, (ce, c)))
            add(pre + "attn.bv", np.zeros(c))
            add(pre + "attn.wo", np.zeros((c, c)))  # zero-init: block starts as identity
            add(pre + "attn.bo", np.zeros(c))
            add(pre + "aware.w", np.zeros((c, 3 * c, 3, 3)))
            add(pre + "aware.b", np.zeros(c))
            add(pre + "dw.w", np.zeros((c, 1, 7, 7)))
            add(pre + "dw.b", np.zeros(c))
            add(pre + "ffn.w1", _uniform(rng, c, (c, 4 * c)))
            add(pre + "ffn.b1", np.zeros(4 * c))
            add(pre + "ffn.w2", np.zeros((4 * c, c)))
            add(pre + "ffn.b2", np.zeros(c))
        self._params = p

    def parameters(self) -> dict[str, T.Tensor]:
        return self._params

    # -- sub-modules -----------------------------------------------------------

    def project(self, mean_emb) -> T.Tensor:
        """Affine map of the averaged embedding, reshaped to (3, C, H, W)."""
        cfg = self.cfg
        e = mean_emb if isinstance(mean_emb, T.Tensor) else T.Tensor(
            np.asarray(mean_emb, dtype=T.default_dtype()))
        flat = e.reshape(1, cfg.text_channels) @ self._params["proj.w"]
        flat = flat + self._params["proj.b"]
        return flat.reshape(3, cfg.channels, cfg.plane_size, cfg.plane_size)

    def cross_attention(self, planes: T.Tensor, tokens: T.Tensor, block: int) -> T.Tensor:
        """Residual: every pixel of every plane attends over the text tokens."""
        cfg = self.cfg
        c, hw = cfg.channels, cfg.plane_size
        heads, hd = cfg.heads, cfg.channels // cfg.heads
        p = self._params
        pre = f"block{block}.attn."
        pix = planes.transpose(0, 2, 3, 1).reshape(3 * hw * hw, c)
        q = pix @ p[pre + "wq"] + p[pre + "bq"]
        k = tokens @ p[pre + "wk"] + p[pre + "bk"]
        v = tokens @ p[pre + "wv"] + p[pre + "bv"]
        outs = []
        for h in range(heads):
            sl = slice(h * hd, (h + 1) * hd)
            scores = (q[:, sl] @ k[:, sl].T) * (1.0 / math.sqrt(hd))
            att = T.softmax(scores, axis=-1)
            outs.append(att @ v[:, sl])
        merged = T.concat(outs, axis=1) @ p[pre + "wo"] + p[pre + "bo"]
        return merged.reshape(3, hw, hw, c).transpose(0, 3, 1, 2)

    def aware3d_conv(self, planes: T.Tensor, block: int) -> T.Tensor:
        """Residual (pre-ReLU): 3x3 conv over [self, mean over the off-axis of
        the two partner planes] per pixel. Index conventions per module doc."""
        cfg = self.cfg
        c, hw = cfg.channels, cfg.plane_size
        xy, xz, yz = planes[0], planes[1], planes[2]

        def span(vec, axis):
            # vec: (C, S) -> (C, H, W) constant along `axis`
            if axis == 0:  # varies along second axis
                return T.bcast_to(vec.reshape(c, 1, hw), (c, hw, hw))
            return T.bcast_to(vec.reshape(c, hw, 1), (c, hw, hw))

        gathered = [
            # XY pixel (x, y): mean_z XZ[x, :], mean_z YZ[y, :]
            T.concat([xy, span(xz.mean(axis=2), 1), span(yz.mean(axis=2), 0)], axis=0),
            # XZ pixel (x, z): mean_y XY[x, :], mean_y YZ[:, z]
            T.concat([xz, span(xy.mean(axis=2), 1), span(yz.mean(axis=1), 0)], axis=0),
            # YZ pixel (y, z): mean_x XY[:, y], mean_x XZ[:, z]
            T.concat([yz, span(xy.mean(axis=1), 1), span(xz.mean(axis=1), 0)], axis=0),
        ]
        stacked = T.stack(gathered, axis=0)  # (3, 3C, H, W)
        p = self._params
        out = T.conv2d(stacked, p[f"block{block}.aware.w"], padding=1)
        bias = T.bcast_to(p[f"block{block}.aware.b"].reshape(1, c, 1, 1), out.shape)
        return out + bias

    def convnext_ffn(self, planes: T.Tensor, block: int) -> T.Tensor:
        """Residual: depthwise 7x7 (own residual) then inverted channel MLP."""
        cfg = self.cfg
        c, hw = cfg.channels, cfg.plane_size
        p = self._params
        pre = f"block{block}."
        dwr = T.conv2d(planes, p[pre + "dw.w"], padding=3, groups=c)
        dwr = dwr + T.bcast_to(p[pre + "dw.b"].reshape(1, c, 1, 1), dwr.shape)
        h = planes + dwr
        pix = h.transpose(0, 2, 3, 1).reshape(3 * hw * hw, c)
        z = T.gelu(pix @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"])
        z = z @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
        mlpr = z.reshape(3, hw, hw, c).transpose(0, 3, 1, 2)
        return dwr + mlpr

    # -- full forward -----------------------------------------------------------

    def generate(self, emb: PromptEmbedding) -> T.Tensor:
        """Project and refine; returns (3, C, H, W). Deterministic per weights."""
        tokens = T.Tensor(np.asarray(emb.token_rows, dtype=T.default_dtype()))
        if tokens.shape[0] < 1:
            raise ValueError("embedding has no non-pad tokens")
        x = self.project(emb.mean)
        for i in range(self.cfg.blocks):
            # out = inp + (attention + conv + ffn residuals); identity at zero init
            x = x + self.cross_attention(x, tokens, i)
            x = x + T.relu(self.aware3d_conv(x, i))
            x = x + self.convnext_ffn(x, i)
            if not np.isfinite(x.data).all():
                raise RuntimeError(f"non-finite triplane activations in block {i}")
        return x
