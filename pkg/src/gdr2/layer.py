"""Gated DeltaNet-2 token mixer at toy scale, with a hand-written backward.

Pipeline per token stream ``x`` of shape ``(..., L, d_model)``:

    q, k, v   linear -> causal depthwise conv -> SiLU  (q, k then L2 per head)
    b, w      sigmoid projections (b doubled in negative-eigenvalue mode)
    g         -exp(a) * softplus(x W_f + delta)
    o         Gated Delta Rule-2 over value heads (key side repeated per group)
    y         (RMSNorm(o) * SiLU(x W_gate)) W_o

``rule="kda"`` and ``rule="gdn"`` build the same layer with tied gates: one
scalar ``beta`` per key head feeds both ``b`` and ``w``; ``gdn`` also uses one
scalar decay per head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rules
from .backward import backward_chunked
from .chunkwise import DEFAULT_CHUNK, forward_chunked
from .core import ContractError, DimensionError, L2_EPS, RMS_EPS, dtype_of, sigmoid, silu, softplus

PARAM_NAMES = ("wq", "wk", "wv", "wb", "ww", "wf", "a", "delta", "wgate", "wo", "conv_q", "conv_k", "conv_v", "rms")
RULES = ("gdr2", "kda", "gdn")
INIT_GAIN = 2.0 ** -2.5


@dataclass
class LayerConfig:
    d_model: int = 16
    H: int = 2
    H_v: int = 2
    d_k: int = 8
    d_v: int = 8
    conv_width: int = 4
    chunk_size: int = DEFAULT_CHUNK
    neg_eig: bool = False
    precision: str = "f64"
    rule: str = "gdr2"
    solve_precision: str = "binary64"

    def __post_init__(self):
        for name in ("d_model", "H", "H_v", "d_k", "d_v", "conv_width", "chunk_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.H_v % self.H:
            raise ContractError("H_v must be a multiple of H")
        if self.rule not in RULES:
            raise ContractError(f"rule must be one of {RULES}")

    @property
    def dtype(self) -> np.dtype:
        return dtype_of(self.precision)

    @property
    def group(self) -> int:
        return self.H_v // self.H

    @property
    def tied(self) -> bool:
        return self.rule != "gdr2"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        dm, kd, vd = self.d_model, self.H * self.d_k, self.H_v * self.d_v
        scalar_decay = self.rule == "gdn"
        return {
            "wq": (dm, kd),
            "wk": (dm, kd),
            "wv": (dm, vd),
            "wb": (dm, self.H) if self.tied else (dm, kd),
            "ww": (dm, 0) if self.tied else (dm, vd),
            "wf": (dm, self.H) if scalar_decay else (dm, kd),
            "a": (self.H,),
            "delta": (self.H,) if scalar_decay else (kd,),
            "wgate": (dm, vd),
            "wo": (vd, dm),
            "conv_q": (self.conv_width, kd),
            "conv_k": (self.conv_width, kd),
            "conv_v": (self.conv_width, vd),
            "rms": (self.H_v, self.d_v),
        }


def _xavier(rng, shape, gain=INIT_GAIN):
    fan_in, fan_out = shape
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out)) if fan_in + fan_out else 0.0
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: LayerConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Xavier-uniform linear weights (gain 2^-2.5), slow initial forgetting."""
    shapes = cfg.param_shapes()
    p = {}
    for name in ("wq", "wk", "wv", "wb", "ww", "wf", "wgate", "wo"):
        p[name] = _xavier(rng, shapes[name])
    for name in ("conv_q", "conv_k", "conv_v"):
        bound = 1.0 / np.sqrt(cfg.conv_width)
        p[name] = rng.uniform(-bound, bound, size=shapes[name])
    # exp(a) log-spaced over [1, 8] across heads; softplus(delta) chosen so the
    # zero-input decay alpha spans [0.9, 0.999] across channels.
    p["a"] = np.log(np.geomspace(1.0, 8.0, cfg.H)) if cfg.H > 1 else np.zeros(1)
    per_head = 1 if cfg.rule == "gdn" else cfg.d_k
    alpha0 = np.linspace(0.9, 0.999, per_head) if per_head > 1 else np.array([0.95])
    sp = -np.log(alpha0)[None, :] / np.exp(p["a"])[:, None]
    p["delta"] = np.log(np.expm1(sp)).reshape(-1)
    p["rms"] = np.ones(shapes["rms"])
    return {k: p[k].astype(cfg.dtype) for k in PARAM_NAMES}


def check_params(params: dict, cfg: LayerConfig) -> None:
    for name, shape in cfg.param_shapes().items():
        if name not in params:
            raise ContractError(f"missing parameter {name!r}")
        if params[name].shape != shape:
            raise DimensionError(f"{name}: expected {shape}, got {params[name].shape}")


# -- small differentiable pieces ---------------------------------------------

def causal_conv(p: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Depthwise causal conv: ``c[t] = sum_j kernel[j] * p[t-j]`` with zero history."""
    L = p.shape[-2]
    out = kernel[0] * p
    for j in range(1, min(kernel.shape[0], L)):
        out[..., j:, :] += kernel[j] * p[..., : L - j, :]
    return out


def causal_conv_backward(dc: np.ndarray, p: np.ndarray, kernel: np.ndarray):
    L = p.shape[-2]
    dp = kernel[0] * dc
    dkern = np.zeros_like(kernel)
    dkern[0] = np.sum(dc * p, axis=tuple(range(dc.ndim - 1)))
    for j in range(1, min(kernel.shape[0], L)):
        dp[..., : L - j, :] += kernel[j] * dc[..., j:, :]
        dkern[j] = np.sum(dc[..., j:, :] * p[..., : L - j, :], axis=tuple(range(dc.ndim - 1)))
    return dp, dkern


def _silu_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _l2_backward(dy: np.ndarray, x: np.ndarray, eps: float = L2_EPS) -> np.ndarray:
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    safe = np.maximum(norm, eps)
    y = x / safe
    proj = dy - y * np.sum(y * dy, axis=-1, keepdims=True)
    return np.where(norm >= eps, proj, dy) / safe


def _rms_backward(dy: np.ndarray, v: np.ndarray, weight: np.ndarray, eps: float = RMS_EPS):
    n = v.shape[-1]
    r = 1.0 / np.sqrt(np.mean(v * v, axis=-1, keepdims=True) + eps)
    u = dy * weight
    dv = r * u - (r ** 3) * v * np.sum(u * v, axis=-1, keepdims=True) / n
    dweight = dy * v * r
    return dv, dweight


def _heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    """``(..., L, n*d) -> (..., n, L, d)``."""
    shp = x.shape[:-1] + (n_heads, x.shape[-1] // n_heads)
    return np.moveaxis(x.reshape(shp), -2, -3)


def _unheads(x: np.ndarray) -> np.ndarray:
    """``(..., n, L, d) -> (..., L, n*d)``."""
    x = np.moveaxis(x, -3, -2)
    return x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _sum_all_but_last(x: np.ndarray, keep: int = 1) -> np.ndarray:
    return np.sum(x.reshape((-1,) + x.shape[x.ndim - keep:]), axis=0)


def _linear_grad(x: np.ndarray, dz: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])


# -- forward stages -----------------------------------------------------------

def project_qkv(params: dict, cfg: LayerConfig, x: np.ndarray, cache: dict | None = None):
    """Per-head ``q, k`` of shape ``(..., H, L, d_k)`` and ``v`` of ``(..., H_v, L, d_v)``."""
    out = {}
    for path, n_heads in (("q", cfg.H), ("k", cfg.H), ("v", cfg.H_v)):
        pre = x @ params["w" + path]
        conv = causal_conv(pre, params["conv_" + path])
        act = _heads(silu(conv), n_heads)
        out[path] = act if path == "v" else l2_normalize_heads(act)
        if cache is not None:
            cache[path] = (pre, conv, act)
    return out["q"], out["k"], out["v"]


def l2_normalize_heads(x: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / np.maximum(norm, L2_EPS)


def compute_gates(params: dict, cfg: LayerConfig, x: np.ndarray, cache: dict | None = None):
    """Erase gate ``B`` of shape ``(..., H, L, d_k)`` and write gate ``W`` of
    ``(..., H_v, L, d_v)``."""
    zb = x @ params["wb"]
    scale = 2.0 if cfg.neg_eig else 1.0
    if cfg.tied:
        beta = sigmoid(zb)  # (..., L, H)
        B = scale * np.broadcast_to(np.moveaxis(beta, -1, -2)[..., None], beta.shape[:-2] + (cfg.H, x.shape[-2], cfg.d_k))
        beta_v = np.moveaxis(beta, -1, -2)[..., _group_index(cfg), :]
        W = np.broadcast_to(beta_v[..., None], beta_v.shape + (cfg.d_v,))
        B, W = np.array(B), np.array(W)
    else:
        zw = x @ params["ww"]
        B = scale * _heads(sigmoid(zb), cfg.H)
        W = _heads(sigmoid(zw), cfg.H_v)
        if cache is not None:
            cache["zw"] = zw
    if cache is not None:
        cache["zb"] = zb
    return B, W


def compute_log_decay(params: dict, cfg: LayerConfig, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """Log-decay ``g = -exp(a) * softplus(x W_f + delta)``, shape ``(..., H, L, d_k)``.

    Evaluated in at least binary32 and never positive.
    """
    dt = np.promote_types(cfg.dtype, np.float32)
    f = (x @ params["wf"]).astype(dt) + params["delta"].astype(dt)
    slope = np.exp(params["a"].astype(dt))
    if cfg.rule == "gdn":
        g = -slope * softplus(f)  # (..., L, H)
        G = np.broadcast_to(np.moveaxis(g, -1, -2)[..., None], g.shape[:-2] + (cfg.H, x.shape[-2], cfg.d_k))
        G = np.array(G)
    else:
        g = -np.repeat(slope, cfg.d_k) * softplus(f)
        G = _heads(g, cfg.H)
    if cache is not None:
        cache["f"] = f
    return G.astype(cfg.dtype)


def _group_index(cfg: LayerConfig) -> np.ndarray:
    # Value head j reads key head j mod H: groups are tiled replicas.
    return np.arange(cfg.H_v) % cfg.H


def broadcast_group_heads(tensors, group_factor: int):
    """Replicate key-side tensors ``(..., H, L, d)`` onto ``H * group_factor`` value heads."""
    if group_factor < 1:
        raise ContractError("group factor must be >= 1")
    out = []
    for t in tensors:
        reps = [1] * t.ndim
        reps[-3] = group_factor
        out.append(np.tile(t, reps))
    return out


def reduce_group_heads(grad: np.ndarray, H: int) -> np.ndarray:
    """Adjoint of :func:`broadcast_group_heads`: sum over the group replicas."""
    H_v = grad.shape[-3]
    if H_v % H:
        raise ContractError("value heads must be a multiple of key heads")
    shp = grad.shape[:-3] + (H_v // H, H) + grad.shape[-2:]
    return grad.reshape(shp).sum(axis=-4)


@dataclass
class DecodeState:
    """Recurrent state per value head plus the conv history of each path."""

    S: np.ndarray
    conv: dict[str, np.ndarray] = field(default_factory=dict)


def init_decode_state(cfg: LayerConfig, lead: tuple[int, ...] = ()) -> DecodeState:
    S = np.zeros(lead + (cfg.H_v, cfg.d_k, cfg.d_v), dtype=np.float64)
    widths = {"q": cfg.H * cfg.d_k, "k": cfg.H * cfg.d_k, "v": cfg.H_v * cfg.d_v}
    conv = {p: np.zeros(lead + (cfg.conv_width - 1, c), dtype=cfg.dtype) for p, c in widths.items()}
    return DecodeState(S, conv)


def _conv_tail(pre: np.ndarray, width: int) -> np.ndarray:
    L = pre.shape[-2]
    n = width - 1
    tail = np.zeros(pre.shape[:-2] + (n, pre.shape[-1]), dtype=pre.dtype)
    m = min(n, L)
    if m:
        tail[..., n - m:, :] = pre[..., L - m:, :]
    return tail


def _mixer_inputs(params, cfg, x, cache=None):
    q, k, v = project_qkv(params, cfg, x, cache)
    B, W = compute_gates(params, cfg, x, cache)
    G = compute_log_decay(params, cfg, x, cache)
    q, k, B, G = broadcast_group_heads((q, k, B, G), cfg.group)
    return q, k, v, B, W, G


def _output_block(params, cfg, x, o, cache=None):
    n = rms_norm_heads(o, params["rms"])
    zg = _heads(x @ params["wgate"], cfg.H_v)
    gated = n * silu(zg)
    y = _unheads(gated) @ params["wo"]
    if cache is not None:
        cache.update(o=o, zg=zg, gated=gated)
    return y


def rms_norm_heads(o: np.ndarray, weight: np.ndarray) -> np.ndarray:
    ms = np.mean(o * o, axis=-1, keepdims=True)
    return o / np.sqrt(ms + RMS_EPS) * weight[:, None, :]


def forward_layer(params: dict, cfg: LayerConfig, x: np.ndarray, mode: str = "chunked", return_cache: bool = False):
    """Run the mixer over ``x`` of shape ``(..., L, d_model)``.

    Returns ``(y, final_state)`` or ``(y, final_state, cache)``. ``mode`` is
    ``"chunked"`` (WY engine) or ``"decode"`` (token by token).
    """
    x = np.asarray(x, dtype=cfg.dtype)
    if x.shape[-1] != cfg.d_model:
        raise DimensionError(f"x has width {x.shape[-1]}, expected {cfg.d_model}")
    if mode == "decode":
        state = init_decode_state(cfg, x.shape[:-2])
        ys = []
        for t in range(x.shape[-2]):
            y_t, state = decode_step(params, cfg, state, x[..., t, :])
            ys.append(y_t)
        return np.stack(ys, axis=-2), state
    if mode != "chunked":
        raise ContractError(f"unknown mode {mode!r}")
    cache: dict = {"x": x}
    q, k, v, B, W, G = _mixer_inputs(params, cfg, x, cache)
    fwd = forward_chunked(q, k, v, B, W, G, cfg.chunk_size, solve_precision=cfg.solve_precision)
    cache.update(fwd=fwd, B=B, W=W, G=G)
    o = fwd.outputs
    if x.shape[-2] == 1:
        # a one-token stream is a single step; read it the way decode does so the modes agree exactly
        S0 = np.zeros(x.shape[:-2] + (cfg.H_v, cfg.d_k, cfg.d_v))
        o = _recurrent_step(cfg, S0, q, k, v, B, W, G)[1]
    y = _output_block(params, cfg, x, o, cache)
    conv = {p: _conv_tail(cache[p][0], cfg.conv_width) for p in ("q", "k", "v")}
    state = DecodeState(fwd.final_state.astype(np.float64), conv)
    if return_cache:
        return y, state, cache
    return y, state


def decode_step(params: dict, cfg: LayerConfig, state: DecodeState, x_t: np.ndarray):
    """Consume one token ``x_t`` of shape ``(..., d_model)``; state stays in binary64."""
    x1 = np.asarray(x_t, dtype=cfg.dtype)[..., None, :]
    conv = {}
    acts = {}
    for path, n_heads in (("q", cfg.H), ("k", cfg.H), ("v", cfg.H_v)):
        pre = x1 @ params["w" + path]
        hist = np.concatenate([state.conv[path], pre], axis=-2)
        kern = params["conv_" + path]
        c = sum(kern[j] * hist[..., -1 - j, :] for j in range(cfg.conv_width))
        act = _heads(silu(c)[..., None, :], n_heads)
        acts[path] = act if path == "v" else l2_normalize_heads(act)
        conv[path] = hist[..., 1:, :]
    B, W = compute_gates(params, cfg, x1)
    G = compute_log_decay(params, cfg, x1)
    q, k, B, G = broadcast_group_heads((acts["q"], acts["k"], B, G), cfg.group)
    v = acts["v"]

    S, o = _recurrent_step(cfg, state.S, q, k, v, B, W, G)
    y = _output_block(params, cfg, x1, o)[..., 0, :]
    return y, DecodeState(S, conv)


def _recurrent_step(cfg: LayerConfig, S, q, k, v, B, W, G):
    """One token of the rule on value heads, state in binary64; tensors are ``(..., H_v, 1, d)``."""

    def tok(t):
        return t[..., 0, :].astype(np.float64)

    if cfg.rule == "kda" and not cfg.neg_eig:
        S = rules.step_kda(S, tok(k), tok(v), np.exp(tok(G)), tok(W)[..., 0])
    elif cfg.rule == "gdn" and not cfg.neg_eig:
        S = rules.step_gdn(S, tok(k), tok(v), np.exp(tok(G)[..., 0]), tok(W)[..., 0])
    else:
        gates = rules.TokenGates(k=tok(k), v=tok(v), b=tok(B), w=tok(W), alpha=np.exp(tok(G)))
        S, _ = rules.step_gdr2(S, gates, neg_eig=cfg.neg_eig)
    return S, rules.read_output(S, tok(q))[..., None, :].astype(cfg.dtype)


# -- backward -----------------------------------------------------------------

def backward_layer(params: dict, cfg: LayerConfig, cache: dict, dY: np.ndarray, dstate: np.ndarray | None = None):
    """Gradients of every parameter and of ``x`` given ``dL/dy``.

    ``cache`` comes from ``forward_layer(..., return_cache=True)``; ``dstate``
    optionally carries a gradient for the final recurrent state.
    """
    if not cache or "fwd" not in cache:
        raise ContractError("forward activations missing; run forward_layer(return_cache=True)")
    x = cache["x"]
    grads = {name: np.zeros_like(params[name]) for name in PARAM_NAMES}

    # output projection, gate and norm
    grads["wo"] = _linear_grad(_unheads(cache["gated"]), dY)
    dgated = _heads(dY @ params["wo"].T, cfg.H_v)
    o, zg = cache["o"], cache["zg"]
    n = rms_norm_heads(o, params["rms"])
    dn = dgated * silu(zg)
    dzg = dgated * n * _silu_grad(zg)
    grads["wgate"] = _linear_grad(x, _unheads(dzg))
    dx = _unheads(dzg) @ params["wgate"].T
    do, drms = _rms_backward(dn, o, params["rms"][:, None, :])
    grads["rms"] = np.sum(drms.reshape((-1,) + drms.shape[-3:]), axis=(0, 2))

    # recurrent core
    fwd = cache["fwd"]
    dS = None if dstate is None else np.asarray(dstate, dtype=o.dtype)
    cg = backward_chunked(fwd, do, dS)
    dq, dk, dB, dG = (reduce_group_heads(t, cfg.H) for t in (cg.dQ, cg.dK, cg.dB, cg.dG))
    dv, dW = cg.dV, cg.dW

    # decay branch
    f = cache["f"]
    slope = np.exp(params["a"].astype(f.dtype))
    if cfg.rule == "gdn":
        dg = np.moveaxis(dG.sum(axis=-1), -2, -1)  # (..., L, H)
        sp = softplus(f)
        grads["a"] = _sum_all_but_last(-dg * slope * sp).astype(params["a"].dtype)
        df = -dg * slope * sigmoid(f)
    else:
        dg = _unheads(dG)
        sp = softplus(f)
        slope_c = np.repeat(slope, cfg.d_k)
        per_chan = _sum_all_but_last(-dg * slope_c * sp)
        grads["a"] = per_chan.reshape(cfg.H, cfg.d_k).sum(axis=-1).astype(params["a"].dtype)
        df = -dg * slope_c * sigmoid(f)
    grads["delta"] = _sum_all_but_last(df).astype(params["delta"].dtype)
    grads["wf"] = _linear_grad(x, df).astype(params["wf"].dtype)
    dx = dx + (df @ params["wf"].T.astype(df.dtype)).astype(dx.dtype)

    # gates
    scale = 2.0 if cfg.neg_eig else 1.0
    zb = cache["zb"]
    if cfg.tied:
        dbeta = np.moveaxis(dB.sum(axis=-1), -2, -1)  # (..., L, H)
        dW_heads = np.moveaxis(dW.sum(axis=-1), -2, -1)  # (..., L, H_v)
        dbeta = scale * dbeta + dW_heads.reshape(dW_heads.shape[:-1] + (cfg.group, cfg.H)).sum(axis=-2)
        sb = sigmoid(zb)
        dzb = dbeta * sb * (1 - sb)
    else:
        sb = sigmoid(zb)
        dzb = scale * _unheads(dB) * sb * (1 - sb)
        sw = sigmoid(cache["zw"])
        dzw = _unheads(dW) * sw * (1 - sw)
        grads["ww"] = _linear_grad(x, dzw)
        dx = dx + dzw @ params["ww"].T
    grads["wb"] = _linear_grad(x, dzb)
    dx = dx + dzb @ params["wb"].T

    # q, k, v paths
    for path, dpath in (("q", dq), ("k", dk), ("v", dv)):
        pre, conv, act = cache[path]
        dact = dpath if path == "v" else _l2_backward(dpath, act)
        dconv = _unheads(dact) * _silu_grad(conv)
        dpre, dkern = causal_conv_backward(dconv, pre, params["conv_" + path])
        grads["conv_" + path] = dkern
        grads["w" + path] = _linear_grad(x, dpre)
        dx = dx + dpre @ params["w" + path].T
    return grads, dx
