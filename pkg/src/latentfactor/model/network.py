"""Stock embedder: per-stock window -> (alpha, beta, sigma, nu), plus the factor prior.

The same weights are applied to every stock.  A window of shape
``(N, lookback + 1, channels)`` passes through a one-layer input MLP, a
two-layer sequence model (pre-norm causal self-attention or LSTM) whose last
position is kept, and a two-layer MLP on that state concatenated with the
static features.  Linear heads produce the per-stock decoder parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..numerics import Tensor
from ..numerics import ops
from .config import ModelConfig

INIT_SIGMA = 1.0
INIT_NU_EXCESS = 6.0  # nu = 4 + softplus(.) = 10 at initialization
PRIOR_PARAMS = ("prior_sigma", "prior_nu")


def softplus_inv(y: float) -> float:
    return float(y + math.log(-math.expm1(-y)))


def _kaiming(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in) if fan_in else 0.0
    return rng.uniform(-bound, bound, size=shape)


def init_weights(config: ModelConfig, n_ts: int, n_static: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh weights for ``n_ts`` time-series and ``n_static`` static channels.

    Inputs carry ``1 + n_ts + 1`` channels: the return, the time-series
    features and a presence flag.
    """
    H, F = config.hidden, config.factors
    d_in = n_ts + 2
    w: dict[str, np.ndarray] = {}
    w["in_W"] = _kaiming(rng, d_in, (d_in, H))
    w["in_b"] = np.zeros(H)
    for layer in range(config.seq_layers):
        p = f"seq{layer}_"
        if config.arch == "attention":
            w[p + "ln1_g"] = np.ones(H)
            w[p + "ln1_b"] = np.zeros(H)
            w[p + "Wqkv"] = _kaiming(rng, H, (H, 3 * H))
            w[p + "Wo"] = _kaiming(rng, H, (H, H))
            w[p + "bo"] = np.zeros(H)
            w[p + "ln2_g"] = np.ones(H)
            w[p + "ln2_b"] = np.zeros(H)
            w[p + "ff_W1"] = _kaiming(rng, H, (H, 2 * H))
            w[p + "ff_b1"] = np.zeros(2 * H)
            w[p + "ff_W2"] = _kaiming(rng, 2 * H, (2 * H, H))
            w[p + "ff_b2"] = np.zeros(H)
        else:
            w[p + "Wx"] = _kaiming(rng, H, (H, 4 * H))
            w[p + "Wh"] = _kaiming(rng, H, (H, 4 * H))
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0  # forget gate open
            w[p + "b"] = b
    if config.arch == "attention":
        w["lnf_g"] = np.ones(H)
        w["lnf_b"] = np.zeros(H)
    w["post1_W"] = _kaiming(rng, H + n_static, (H + n_static, H))
    w["post1_b"] = np.zeros(H)
    w["post2_W"] = _kaiming(rng, H, (H, H))
    w["post2_b"] = np.zeros(H)
    # heads start small so the initial marginals are set by the biases
    w["alpha_w"] = 0.01 * _kaiming(rng, H, (H,))
    w["alpha_b"] = np.zeros(())
    w["beta_W"] = 0.1 * _kaiming(rng, H, (H, F))
    w["beta_b"] = np.zeros(F)
    w["sigma_w"] = 0.01 * _kaiming(rng, H, (H,))
    w["sigma_b"] = np.full((), softplus_inv(INIT_SIGMA))
    w["nu_w"] = 0.01 * _kaiming(rng, H, (H,))
    w["nu_b"] = np.full((), softplus_inv(INIT_NU_EXCESS))
    w["prior_sigma"] = np.full(F, softplus_inv(1.0))
    w["prior_nu"] = np.full(F, softplus_inv(INIT_NU_EXCESS))
    return w


def input_dims(weights: dict[str, np.ndarray]) -> tuple[int, int]:
    """(time-series channels, static channels) expected by ``weights``."""
    n_ts = weights["in_W"].shape[0] - 2
    H = weights["in_W"].shape[1]
    return n_ts, weights["post1_W"].shape[0] - H


def positional_encoding(length: int, width: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class Dropout:
    """Inverted dropout drawing masks from ``rng``; a no-op when ``rng`` is None."""

    def __init__(self, rate: float, rng: np.random.Generator | None):
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if self.rng is None or self.rate == 0.0:
            return x
        keep = self.rng.random(x.shape) >= self.rate
        return x * Tensor(keep / (1.0 - self.rate))


@dataclass
class EmbedOutput:
    alpha: Tensor
    beta: Tensor
    sigma: Tensor
    nu: Tensor


def _attention_block(x: Tensor, w: dict, p: str, heads: int, mask: np.ndarray, drop: Dropout,
                     last_only: bool) -> Tensor:
    N, L, H = x.shape
    dh = H // heads
    h = ops.layer_norm(x, w[p + "ln1_g"], w[p + "ln1_b"])
    qkv = ops.matmul(h, w[p + "Wqkv"])  # (N, L, 3H)
    qkv = ops.transpose(ops.reshape(qkv, (N, L, 3, heads, dh)), (2, 0, 3, 1, 4))  # (3, N, h, L, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    if last_only:
        q = q[:, :, L - 1:, :]
        mask = mask[L - 1:, :]
        x = x[:, L - 1:, :]
    scores = ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh)) + Tensor(mask)
    att = drop(ops.softmax(scores, axis=-1))
    ctx = ops.matmul(att, v)  # (N, h, Lq, dh)
    Lq = ctx.shape[2]
    ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (N, Lq, H))
    x = x + drop(ops.matmul(ctx, w[p + "Wo"]) + w[p + "bo"])
    h = ops.layer_norm(x, w[p + "ln2_g"], w[p + "ln2_b"])
    h = drop(ops.gelu(ops.matmul(h, w[p + "ff_W1"]) + w[p + "ff_b1"]))
    return x + drop(ops.matmul(h, w[p + "ff_W2"]) + w[p + "ff_b2"])


def _lstm_layer(x: Tensor, w: dict, p: str, drop: Dropout) -> Tensor:
    N, L, H = x.shape
    gates_x = ops.matmul(x, w[p + "Wx"]) + w[p + "b"]  # (N, L, 4H)
    h = Tensor(np.zeros((N, H)))
    c = Tensor(np.zeros((N, H)))
    outs = []
    for t in range(L):
        g = gates_x[:, t, :] + ops.matmul(h, w[p + "Wh"])
        i = ops.sigmoid(g[:, :H])
        f = ops.sigmoid(g[:, H:2 * H])
        o = ops.sigmoid(g[:, 2 * H:3 * H])
        u = ops.tanh(g[:, 3 * H:])
        c = f * c + i * u
        h = o * ops.tanh(c)
        outs.append(h)
    return drop(ops.stack(outs, axis=1))


def embed(weights: dict, config: ModelConfig, sequences: np.ndarray, static: np.ndarray,
          rng: np.random.Generator | None = None) -> EmbedOutput:
    """Per-stock decoder parameters for one date.

    ``weights`` maps names to :class:`Tensor` (or arrays).  Dropout is active
    only when ``rng`` is given.
    """
    w = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in weights.items()}
    n_ts, n_static = input_dims({k: v.data for k, v in w.items() if k in ("in_W", "post1_W")})
    seq = np.asarray(sequences, dtype=np.float64)
    static = np.asarray(static, dtype=np.float64)
    N = seq.shape[0]
    if seq.ndim != 3 or seq.shape[1] != config.lookback + 1 or seq.shape[2] != n_ts + 2:
        raise ValueError(f"window shape {seq.shape} does not match (N, {config.lookback + 1}, {n_ts + 2})")
    if static.shape != (N, n_static):
        raise ValueError(f"static features {static.shape} do not match ({N}, {n_static})")
    H = config.hidden
    L = seq.shape[1]
    drop = Dropout(config.dropout, rng)
    x = drop(ops.gelu(ops.matmul(Tensor(seq), w["in_W"]) + w["in_b"]))
    if config.arch == "attention":
        x = x + Tensor(positional_encoding(L, H))
        mask = np.triu(np.full((L, L), -1e30), k=1)
        for layer in range(config.seq_layers):
            last = layer == config.seq_layers - 1
            x = _attention_block(x, w, f"seq{layer}_", config.heads, mask, drop, last_only=last)
        h2 = ops.layer_norm(x[:, x.shape[1] - 1, :], w["lnf_g"], w["lnf_b"])
    else:
        for layer in range(config.seq_layers):
            x = _lstm_layer(x, w, f"seq{layer}_", drop)
        h2 = x[:, L - 1, :]
    h = ops.concat([h2, Tensor(static)], axis=1) if n_static else h2
    h = drop(ops.gelu(ops.matmul(h, w["post1_W"]) + w["post1_b"]))
    h3 = drop(ops.gelu(ops.matmul(h, w["post2_W"]) + w["post2_b"]))
    alpha = ops.matmul(h3, w["alpha_w"]) + w["alpha_b"]
    beta = ops.matmul(h3, w["beta_W"]) + w["beta_b"]
    sigma = ops.softplus(ops.matmul(h3, w["sigma_w"]) + w["sigma_b"])
    nu = ops.softplus(ops.matmul(h3, w["nu_w"]) + w["nu_b"]) + 4.0
    return EmbedOutput(alpha, beta, sigma, nu)


def prior_tensors(weights: dict) -> tuple[Tensor, Tensor]:
    """Factor prior scales and degrees of freedom (location is fixed at zero)."""
    ps = weights["prior_sigma"]
    pn = weights["prior_nu"]
    ps = ps if isinstance(ps, Tensor) else Tensor(ps)
    pn = pn if isinstance(pn, Tensor) else Tensor(pn)
    return ops.softplus(ps), ops.softplus(pn) + 4.0
