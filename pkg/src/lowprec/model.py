"""A small pre-norm transformer with explicit forward/backward passes.

Layout::

    tokens (B, T, d_in) -> embed -> [embed_norm] -> blocks -> norm -> mean over T -> head

Each block computes::

    x' = x  + gamma1 * attn(norm1(x))
    y  = x' + gamma2 * mlp(norm2(x'))

The gamma terms are learnable per-channel vectors when layer-scale is on and
are left out otherwise. The attention in/out projections and the two MLP
projections go through :mod:`lowprec.linear` with the configured mode; the
embedding, head, norms and the softmax attention itself stay in working
precision.

The code is dtype-agnostic: float32 parameters give working-precision
training, float64 parameters make finite-difference checks meaningful.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .linear import LinearMode, linear_backward, linear_forward
from .numerics import WORKING_DTYPE, matmul, rng_from_seed

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class LayerScale:
    enabled: bool = False
    init: float = 0.0


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    dim: int = 128
    heads: int = 4
    mlp_ratio: float = 4.0
    layer_scale: LayerScale = field(default_factory=LayerScale)
    linear_mode: LinearMode = field(default_factory=LinearMode)
    embed_norm: bool = True

    def __post_init__(self):
        if self.depth < 1 or self.dim < 1 or self.heads < 1:
            raise ValueError("depth, dim and heads must be positive")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.hidden < 1 or self.hidden != self.mlp_ratio * self.dim:
            raise ValueError("mlp_ratio * dim must be a positive integer")

    @property
    def hidden(self) -> int:
        return int(round(self.mlp_ratio * self.dim))


def init_params(cfg: ModelConfig, input_dim: int, out_dim: int, seed: int,
                dtype=WORKING_DTYPE) -> Dict[str, np.ndarray]:
    """Parameters keyed by name, embedding first.

    Projection weights are Gaussian with stdev ``1/sqrt(fan_in)``; norms start
    at identity; layer-scale vectors start at ``cfg.layer_scale.init``.
    """
    rng = rng_from_seed(seed)
    d, h = cfg.dim, cfg.hidden

    def dense(out_f, in_f):
        return (rng.standard_normal((out_f, in_f)) / math.sqrt(in_f)).astype(dtype)

    p = {"embed.weight": dense(d, input_dim)}
    if cfg.embed_norm:
        p["embed_norm.weight"] = np.ones(d, dtype)
        p["embed_norm.bias"] = np.zeros(d, dtype)
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        p[b + "norm1.weight"] = np.ones(d, dtype)
        p[b + "norm1.bias"] = np.zeros(d, dtype)
        p[b + "attn.in_proj.weight"] = dense(3 * d, d)
        p[b + "attn.out_proj.weight"] = dense(d, d)
        if cfg.layer_scale.enabled:
            p[b + "gamma1"] = np.full(d, cfg.layer_scale.init, dtype)
        p[b + "norm2.weight"] = np.ones(d, dtype)
        p[b + "norm2.bias"] = np.zeros(d, dtype)
        p[b + "mlp.fc1.weight"] = dense(h, d)
        p[b + "mlp.fc2.weight"] = dense(d, h)
        if cfg.layer_scale.enabled:
            p[b + "gamma2"] = np.full(d, cfg.layer_scale.init, dtype)
    p["norm.weight"] = np.ones(d, dtype)
    p["norm.bias"] = np.zeros(d, dtype)
    p["head.weight"] = dense(out_dim, d)
    p["head.bias"] = np.zeros(out_dim, dtype)
    return p


# -- elementwise pieces ------------------------------------------------------

def layer_norm(x, w, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * w + b, (xhat, rstd, w)


def layer_norm_backward(dy, cache):
    xhat, rstd, w = cache
    dw = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * w
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dw, db


def gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(dy, x, t):
    dt = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


def softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


# -- attention and block -------------------------------------------------------

def _attention(qkv, batch, seq, heads):
    d = qkv.shape[1] // 3
    hd = d // heads
    q, k, v = (qkv[:, i * d:(i + 1) * d].reshape(batch, seq, heads, hd).transpose(0, 2, 1, 3)
               for i in range(3))
    scale = 1.0 / math.sqrt(hd)
    probs = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
    o = (probs @ v).transpose(0, 2, 1, 3).reshape(batch * seq, d)
    return o, (q, k, v, probs, scale)


def _attention_backward(do, cache, batch, seq, heads):
    q, k, v, probs, scale = cache
    d = do.shape[1]
    hd = d // heads
    do = do.reshape(batch, seq, heads, hd).transpose(0, 2, 1, 3)
    dprobs = do @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ do
    ds = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    parts = [t.transpose(0, 2, 1, 3).reshape(batch * seq, d) for t in (dq, dk, dv)]
    return np.concatenate(parts, axis=1)


def block_forward(params, prefix: str, x, cfg: ModelConfig, batch: int, seq: int):
    """One pre-norm block on token rows ``x`` of shape (batch*seq, dim)."""
    mode = cfg.linear_mode
    ls = cfg.layer_scale.enabled
    a, ln1 = layer_norm(x, params[prefix + "norm1.weight"], params[prefix + "norm1.bias"])
    qkv, c_in = linear_forward(mode, a, params[prefix + "attn.in_proj.weight"])
    o, c_attn = _attention(qkv, batch, seq, cfg.heads)
    attn_out, c_out = linear_forward(mode, o, params[prefix + "attn.out_proj.weight"])
    x1 = x + params[prefix + "gamma1"] * attn_out if ls else x + attn_out

    c, ln2 = layer_norm(x1, params[prefix + "norm2.weight"], params[prefix + "norm2.bias"])
    f1, c_fc1 = linear_forward(mode, c, params[prefix + "mlp.fc1.weight"])
    act, t = gelu(f1)
    f2, c_fc2 = linear_forward(mode, act, params[prefix + "mlp.fc2.weight"])
    y = x1 + params[prefix + "gamma2"] * f2 if ls else x1 + f2
    cache = dict(ln1=ln1, c_in=c_in, c_attn=c_attn, c_out=c_out, attn_out=attn_out,
                 ln2=ln2, c_fc1=c_fc1, f1=f1, t=t, c_fc2=c_fc2, f2=f2)
    return y, cache


def block_backward(params, prefix: str, dy, cache, cfg: ModelConfig, batch: int, seq: int, grads: dict):
    mode = cfg.linear_mode
    ls = cfg.layer_scale.enabled
    if ls:
        grads[prefix + "gamma2"] = (dy * cache["f2"]).sum(axis=0)
        df2 = dy * params[prefix + "gamma2"]
    else:
        df2 = dy
    dact, grads[prefix + "mlp.fc2.weight"] = linear_backward(mode, cache["c_fc2"], df2)
    df1 = gelu_backward(dact, cache["f1"], cache["t"])
    dc, grads[prefix + "mlp.fc1.weight"] = linear_backward(mode, cache["c_fc1"], df1)
    dx1_ln, grads[prefix + "norm2.weight"], grads[prefix + "norm2.bias"] = layer_norm_backward(dc, cache["ln2"])
    dx1 = dy + dx1_ln

    if ls:
        grads[prefix + "gamma1"] = (dx1 * cache["attn_out"]).sum(axis=0)
        dattn = dx1 * params[prefix + "gamma1"]
    else:
        dattn = dx1
    do, grads[prefix + "attn.out_proj.weight"] = linear_backward(mode, cache["c_out"], dattn)
    dqkv = _attention_backward(do, cache["c_attn"], batch, seq, cfg.heads)
    da, grads[prefix + "attn.in_proj.weight"] = linear_backward(mode, cache["c_in"], dqkv)
    dx_ln, grads[prefix + "norm1.weight"], grads[prefix + "norm1.bias"] = layer_norm_backward(da, cache["ln1"])
    return dx1 + dx_ln


def transformer_block(x, params, cfg: ModelConfig, index: int = 0, batch: int = 1):
    """Apply block ``index`` to ``x`` of shape (tokens, dim), split into ``batch`` sequences."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != cfg.dim or x.shape[0] % batch:
        raise ValueError(f"expected (tokens, {cfg.dim}) input divisible into {batch} sequences, got {x.shape}")
    y, _ = block_forward(params, f"blocks.{index}.", x, cfg, batch, x.shape[0] // batch)
    return y


# -- whole model ---------------------------------------------------------------

@dataclass
class ForwardCache:
    batch: int
    seq: int
    embed_ctx: object
    embed_ln: object
    blocks: list
    final_ln: object
    pooled: np.ndarray
    feat_absmean: list


def forward(params, x, cfg: ModelConfig):
    """Model outputs for ``x`` of shape (batch, seq, input_dim), plus the backward cache."""
    batch, seq, d_in = x.shape
    rows = x.reshape(batch * seq, d_in)
    std = LinearMode("Standard")
    h, embed_ctx = linear_forward(std, rows, params["embed.weight"])
    embed_ln = None
    if cfg.embed_norm:
        h, embed_ln = layer_norm(h, params["embed_norm.weight"], params["embed_norm.bias"])
    caches, feats = [], []
    for i in range(cfg.depth):
        h, c = block_forward(params, f"blocks.{i}.", h, cfg, batch, seq)
        caches.append(c)
        feats.append(float(np.mean(np.abs(h), dtype=np.float64)))
    z, final_ln = layer_norm(h, params["norm.weight"], params["norm.bias"])
    pooled = z.reshape(batch, seq, -1).mean(axis=1)
    out = matmul(pooled, params["head.weight"]) + params["head.bias"]
    return out, ForwardCache(batch, seq, embed_ctx, embed_ln, caches, final_ln, pooled, feats)


def backward(params, cache: ForwardCache, dout, cfg: ModelConfig) -> Dict[str, np.ndarray]:
    """Gradients for every parameter given d(loss)/d(outputs)."""
    grads: Dict[str, np.ndarray] = {}
    batch, seq = cache.batch, cache.seq
    grads["head.weight"] = matmul(dout.T, cache.pooled.T)
    grads["head.bias"] = dout.sum(axis=0)
    dpooled = matmul(dout, params["head.weight"].T)
    dz = np.repeat(dpooled / seq, seq, axis=0)
    dh, grads["norm.weight"], grads["norm.bias"] = layer_norm_backward(dz, cache.final_ln)
    for i in reversed(range(cfg.depth)):
        dh = block_backward(params, f"blocks.{i}.", dh, cache.blocks[i], cfg, batch, seq, grads)
    if cfg.embed_norm:
        dh, grads["embed_norm.weight"], grads["embed_norm.bias"] = layer_norm_backward(dh, cache.embed_ln)
    _, grads["embed.weight"] = linear_backward(LinearMode("Standard"), cache.embed_ctx, dh)
    return {name: grads[name].astype(params[name].dtype, copy=False) for name in params}


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits64 = logits.astype(np.float64)
    shifted = logits64 - logits64.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(logz - shifted[np.arange(n), labels]))
    probs = np.exp(shifted - logz[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, (probs / n).astype(logits.dtype)


def squared_error(pred, target):
    diff = pred.astype(np.float64) - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 * diff / diff.size).astype(pred.dtype)
