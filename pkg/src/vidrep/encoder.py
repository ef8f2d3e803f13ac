"""Single-layer multi-head self-attention encoder over frame descriptors.

The encoder refines a sequence of frame descriptors in place (output keeps
the input's f x d shape) and exposes exact analytic gradients for every
parameter and for the input, so the contrastive trainer needs no autodiff
framework. Architecture, in forward order:

    Q = x Wq, K = x Wk, V = x Wv          (per-head slices of width d/H)
    P = softmax(Q Kt / sqrt(d))           (padded keys masked to -inf)
    attn = concat_heads(P V) Wo           (+ dropout when training)
    h1 = LayerNorm(x + attn)
    ffn = relu(h1 W1 + b1)                (+ dropout when training)
    out = LayerNorm(h1 + ffn W2 + b2)     (padded rows zeroed)

There is no positional encoding, so the map is permutation-equivariant over
frames; that property is load-bearing for the tests. All math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .validation import (
    DegenerateInputError,
    DimensionMismatchError,
    MalformedInputError,
    as_mask,
)

LAYERNORM_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 1024
    heads: int = 8
    ffn_dim: int = 2048
    dropout_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.ffn_dim < 1:
            raise MalformedInputError("dim, heads, and ffn_dim must be positive")
        if self.dim % self.heads != 0:
            raise MalformedInputError(
                f"dim {self.dim} is not divisible by heads {self.heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise MalformedInputError("dropout_rate must lie in [0, 1)")


@dataclass
class EncoderParams:
    """All learnable tensors. Field order is the checkpoint serialization order."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "EncoderParams":
        return EncoderParams(**{k: v.copy() for k, v in self.as_dict().items()})

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def ffn_dim(self) -> int:
        return self.ffn_w1.shape[1]


PARAM_NAMES = tuple(f.name for f in fields(EncoderParams))


def zeros_like_params(params: EncoderParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.as_dict().items()}


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_encoder(config: EncoderConfig) -> EncoderParams:
    """Deterministic Xavier-uniform initialization from ``config.seed``."""
    d, ffn = config.dim, config.ffn_dim
    rng = np.random.default_rng(config.seed)
    return EncoderParams(
        w_q=_xavier(rng, d, d),
        w_k=_xavier(rng, d, d),
        w_v=_xavier(rng, d, d),
        w_o=_xavier(rng, d, d),
        ffn_w1=_xavier(rng, d, ffn),
        ffn_b1=np.zeros(ffn),
        ffn_w2=_xavier(rng, ffn, d),
        ffn_b2=np.zeros(d),
        ln1_gain=np.ones(d),
        ln1_bias=np.zeros(d),
        ln2_gain=np.ones(d),
        ln2_bias=np.zeros(d),
    )


def _check_inputs(params: EncoderParams, x: np.ndarray, mask) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise MalformedInputError(f"frame sequence must be 2-D, got shape {x.shape}")
    if x.shape[1] != params.dim:
        raise DimensionMismatchError(
            f"sequence dimension {x.shape[1]} does not match encoder dim {params.dim}"
        )
    mask = as_mask(mask if mask is not None else np.ones(x.shape[0], dtype=bool), x.shape[0])
    return x, mask


def _layernorm(u: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = u.mean(axis=1, keepdims=True)
    var = u.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = (u - mu) * inv_std
    return xhat * gain + bias, xhat, inv_std


def _layernorm_backward(dy, xhat, inv_std, gain):
    dxhat = dy * gain
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    du = inv_std * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return du, dgain, dbias


def _dropout_mask(rng, shape, rate: float) -> np.ndarray:
    # Inverted dropout: multiply by kept/(1-rate) so evaluation is identity.
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def forward(
    params: EncoderParams,
    x: np.ndarray,
    mask=None,
    *,
    heads: int,
    training: bool = False,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, dict]:
    """Run the encoder, returning the refined sequence and a backward cache."""
    x, mask = _check_inputs(params, x, mask)
    f, d = x.shape
    if d % heads != 0:
        raise DimensionMismatchError(f"dim {d} is not divisible by heads {heads}")
    dh = d // heads
    scale = 1.0 / np.sqrt(d)

    q = x @ params.w_q
    k = x @ params.w_k
    v = x @ params.w_v

    attn_p = np.empty((heads, f, f))
    o = np.empty((f, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = (q[:, sl] @ k[:, sl].T) * scale
        logits[:, ~mask] = -np.inf
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        attn_p[h] = p
        o[:, sl] = p @ v[:, sl]

    use_dropout = training and dropout_rate > 0.0
    if use_dropout:
        if rng is None:
            raise MalformedInputError("training-mode dropout requires an rng")
        drop_attn = _dropout_mask(rng, (f, d), dropout_rate)
    else:
        drop_attn = None

    attn_out = o @ params.w_o
    if drop_attn is not None:
        attn_out = attn_out * drop_attn

    r1 = x + attn_out
    h1, xhat1, inv_std1 = _layernorm(r1, params.ln1_gain, params.ln1_bias)

    z1 = h1 @ params.ffn_w1 + params.ffn_b1
    act = np.maximum(z1, 0.0)
    if use_dropout:
        drop_ffn = _dropout_mask(rng, act.shape, dropout_rate)
        act_d = act * drop_ffn
    else:
        drop_ffn = None
        act_d = act

    r2 = h1 + act_d @ params.ffn_w2 + params.ffn_b2
    h2, xhat2, inv_std2 = _layernorm(r2, params.ln2_gain, params.ln2_bias)
    out = h2 * mask[:, None]

    cache = {
        "x": x,
        "mask": mask,
        "heads": heads,
        "scale": scale,
        "q": q,
        "k": k,
        "v": v,
        "attn_p": attn_p,
        "o": o,
        "drop_attn": drop_attn,
        "xhat1": xhat1,
        "inv_std1": inv_std1,
        "h1": h1,
        "z1": z1,
        "act_d": act_d,
        "drop_ffn": drop_ffn,
        "xhat2": xhat2,
        "inv_std2": inv_std2,
    }
    return out, cache


def backward(
    params: EncoderParams, cache: dict, upstream: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Exact gradients of ``forward`` w.r.t. every parameter and the input."""
    x, mask = cache["x"], cache["mask"]
    heads, scale = cache["heads"], cache["scale"]
    f, d = x.shape
    dh = d // heads
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != x.shape:
        raise DimensionMismatchError(
            f"upstream gradient shape {upstream.shape} does not match {x.shape}"
        )

    grads: dict[str, np.ndarray] = {}

    dh2 = upstream * mask[:, None]
    dr2, grads["ln2_gain"], grads["ln2_bias"] = _layernorm_backward(
        dh2, cache["xhat2"], cache["inv_std2"], params.ln2_gain
    )

    dh1 = dr2.copy()
    dz2 = dr2
    grads["ffn_w2"] = cache["act_d"].T @ dz2
    grads["ffn_b2"] = dz2.sum(axis=0)
    dact = dz2 @ params.ffn_w2.T
    if cache["drop_ffn"] is not None:
        dact = dact * cache["drop_ffn"]
    dz1 = dact * (cache["z1"] > 0.0)
    grads["ffn_w1"] = cache["h1"].T @ dz1
    grads["ffn_b1"] = dz1.sum(axis=0)
    dh1 += dz1 @ params.ffn_w1.T

    dr1, grads["ln1_gain"], grads["ln1_bias"] = _layernorm_backward(
        dh1, cache["xhat1"], cache["inv_std1"], params.ln1_gain
    )

    dx = dr1.copy()
    dattn = dr1
    if cache["drop_attn"] is not None:
        dattn = dattn * cache["drop_attn"]
    grads["w_o"] = cache["o"].T @ dattn
    do = dattn @ params.w_o.T

    q, k, v, attn_p = cache["q"], cache["k"], cache["v"], cache["attn_p"]
    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dv = np.empty_like(v)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        p = attn_p[h]
        do_h = do[:, sl]
        dv[:, sl] = p.T @ do_h
        dp = do_h @ v[:, sl].T
        da = p * (dp - (dp * p).sum(axis=1, keepdims=True))
        dq[:, sl] = (da @ k[:, sl]) * scale
        dk[:, sl] = (da.T @ q[:, sl]) * scale

    grads["w_q"] = x.T @ dq
    grads["w_k"] = x.T @ dk
    grads["w_v"] = x.T @ dv
    dx += dq @ params.w_q.T + dk @ params.w_k.T + dv @ params.w_v.T
    return grads, dx


def encode_frames(
    params: EncoderParams,
    x: np.ndarray,
    mask=None,
    *,
    heads: int,
    training: bool = False,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Refined frame descriptors; same shape as the input sequence."""
    out, _ = forward(
        params, x, mask, heads=heads, training=training,
        dropout_rate=dropout_rate, rng=rng,
    )
    return out


def encoder_backward(
    params: EncoderParams,
    x: np.ndarray,
    mask,
    upstream: np.ndarray,
    *,
    heads: int,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of the evaluation-mode forward map for a given upstream."""
    _, cache = forward(params, x, mask, heads=heads, training=False)
    return backward(params, cache, upstream)


def aggregate_video(refined: np.ndarray, mask=None) -> np.ndarray:
    """Mean over unmasked rows followed by L2 normalization."""
    refined = np.asarray(refined, dtype=np.float64)
    if refined.ndim != 2:
        raise MalformedInputError(f"expected 2-D sequence, got shape {refined.shape}")
    mask = as_mask(mask if mask is not None else np.ones(refined.shape[0], dtype=bool),
                   refined.shape[0])
    mean = refined[mask].mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm <= 1e-12:
        raise DegenerateInputError("mean of refined frames is numerically zero")
    return mean / norm


def mean_attention_response(
    params: EncoderParams, x: np.ndarray, mask=None, *, heads: int
) -> np.ndarray:
    """Attention weight received per frame, averaged over heads and queries.

    Restricted to unmasked frames and renormalized to sum to one; masked
    positions report zero.
    """
    _, cache = forward(params, x, mask, heads=heads, training=False)
    mask = cache["mask"]
    p = cache["attn_p"][:, mask, :]  # drop padded queries
    response = p.mean(axis=(0, 1))
    response = response * mask
    total = response.sum()
    if total <= 0.0:
        raise DegenerateInputError("attention response sums to zero")
    return response / total
