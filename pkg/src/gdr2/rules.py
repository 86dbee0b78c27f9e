"""Tokenwise recurrences for the linear-attention / delta-rule family.

These step functions are the ground truth that the chunkwise engine and the
layer are checked against. States are ``(..., d_k, d_v)`` arrays and reads are
``o = S^T q``. All delta-family steps are written in residual form
``S = S_bar + k (z - S_bar^T e)^T`` so that tied gate settings reproduce the
simpler rules bit for bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import ContractError, DimensionError


class RuleKind(enum.Enum):
    LINEAR_ATTENTION = "linear_attention"
    MAMBA2 = "mamba2"
    DELTANET = "deltanet"
    GATED_DELTANET = "gdn"
    KDA = "kda"
    GDR2 = "gdr2"


@dataclass
class TokenGates:
    """Per-token inputs to one recurrence step.

    Fields not used by a rule may stay ``None``. ``alpha`` may be a scalar
    (Mamba-2, Gated DeltaNet) or a ``d_k`` vector (KDA, GDR2); if only ``g`` is
    given, ``alpha = exp(g)``.
    """

    k: np.ndarray
    v: np.ndarray
    q: np.ndarray | None = None
    alpha: np.ndarray | float | None = None
    beta: np.ndarray | float | None = None
    b: np.ndarray | None = None
    w: np.ndarray | None = None
    g: np.ndarray | None = None

    def decay(self):
        if self.alpha is not None:
            return self.alpha
        if self.g is not None:
            return np.exp(self.g)
        return None


def _check_range(name: str, x, lo: float, hi: float, lo_open: bool = False) -> None:
    x = np.asarray(x)
    bad = (x > hi) | ((x <= lo) if lo_open else (x < lo)) | ~np.isfinite(x)
    if np.any(bad):
        brace = "(" if lo_open else "["
        raise ContractError(f"{name} outside {brace}{lo}, {hi}]")


def _check_state(state: np.ndarray, k: np.ndarray, v: np.ndarray) -> None:
    if state.shape[-2] != k.shape[-1] or state.shape[-1] != v.shape[-1]:
        raise DimensionError(f"state {state.shape} vs k {k.shape}, v {v.shape}")


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., :, None] * b[..., None, :]


def _read(state: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``state^T x`` with batch dims."""
    return (x[..., None, :] @ state)[..., 0, :]


def _delta_edit(s_bar: np.ndarray, k: np.ndarray, e: np.ndarray, z: np.ndarray) -> np.ndarray:
    return s_bar + _outer(k, z - _read(s_bar, e))


def step_linear_attention(state: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    _check_state(state, k, v)
    return state + _outer(k, v)


def step_mamba2(state: np.ndarray, k: np.ndarray, v: np.ndarray, alpha, check: bool = True) -> np.ndarray:
    if check:
        _check_state(state, k, v)
        _check_range("alpha", alpha, 0.0, 1.0, lo_open=True)
    alpha = np.asarray(alpha)[..., None, None]
    return alpha * state + _outer(k, v)


def step_deltanet(state: np.ndarray, k: np.ndarray, v: np.ndarray, beta, check: bool = True) -> np.ndarray:
    if check:
        _check_state(state, k, v)
        _check_range("beta", beta, 0.0, 1.0)
    beta = np.asarray(beta)[..., None]
    return _delta_edit(state, k, beta * k, beta * v)


def step_gdn(state: np.ndarray, k: np.ndarray, v: np.ndarray, alpha, beta, check: bool = True) -> np.ndarray:
    if check:
        _check_state(state, k, v)
        _check_range("alpha", alpha, 0.0, 1.0, lo_open=True)
        _check_range("beta", beta, 0.0, 1.0)
    beta = np.asarray(beta)[..., None]
    s_bar = np.asarray(alpha)[..., None, None] * state
    return _delta_edit(s_bar, k, beta * k, beta * v)


def step_kda(state: np.ndarray, k: np.ndarray, v: np.ndarray, alpha_vec, beta, check: bool = True) -> np.ndarray:
    if check:
        _check_state(state, k, v)
        if np.shape(alpha_vec)[-1:] != k.shape[-1:]:
            raise DimensionError("alpha_vec must have d_k entries")
        _check_range("alpha", alpha_vec, 0.0, 1.0, lo_open=True)
        _check_range("beta", beta, 0.0, 1.0)
    beta = np.asarray(beta)[..., None]
    s_bar = np.asarray(alpha_vec)[..., :, None] * state
    return _delta_edit(s_bar, k, beta * k, beta * v)


def step_gdr2(state: np.ndarray, gates: TokenGates, neg_eig: bool = False, check: bool = True):
    """One Gated Delta Rule-2 step.

    Returns ``(S_t, r)`` where ``r = S_bar^T (b * k)`` is the content read
    along the erase direction before the write.
    """
    k, v, b, w = gates.k, gates.v, gates.b, gates.w
    alpha = gates.decay()
    if check:
        _check_state(state, k, v)
        if b.shape[-1] != k.shape[-1] or w.shape[-1] != v.shape[-1]:
            raise DimensionError("gate widths must match d_k / d_v")
        _check_range("alpha", alpha, 0.0, 1.0, lo_open=True)
        _check_range("b", b, 0.0, 2.0 if neg_eig else 1.0)
        _check_range("w", w, 0.0, 1.0)
    s_bar = np.asarray(alpha)[..., :, None] * state
    e = b * k
    z = w * v
    r = _read(s_bar, e)
    return s_bar + _outer(k, z - r), r


def read_output(state: np.ndarray, q: np.ndarray) -> np.ndarray:
    if state.shape[-2] != q.shape[-1]:
        raise DimensionError(f"state {state.shape} vs q {q.shape}")
    return _read(state, q)


def online_objective(s: np.ndarray, s_bar: np.ndarray, k, e, z) -> float:
    """Local fast-weight objective minimized by the GDR2 update."""
    if s.shape != s_bar.shape or s.shape[0] != len(k) or s.shape[1] != len(z):
        raise DimensionError("objective shapes disagree")
    target = z - s_bar.T @ e
    return float(np.sum((s - s_bar) ** 2) - 2.0 * np.dot(s.T @ k, target))


def online_objective_grad(s: np.ndarray, s_bar: np.ndarray, k, e, z) -> np.ndarray:
    return 2.0 * (s - s_bar) - 2.0 * np.outer(k, z - s_bar.T @ e)


def step(rule: RuleKind, state: np.ndarray, gates: TokenGates, neg_eig: bool = False, check: bool = True):
    if rule is RuleKind.LINEAR_ATTENTION:
        return step_linear_attention(state, gates.k, gates.v)
    if rule is RuleKind.MAMBA2:
        return step_mamba2(state, gates.k, gates.v, gates.decay(), check)
    if rule is RuleKind.DELTANET:
        return step_deltanet(state, gates.k, gates.v, gates.beta, check)
    if rule is RuleKind.GATED_DELTANET:
        return step_gdn(state, gates.k, gates.v, gates.decay(), gates.beta, check)
    if rule is RuleKind.KDA:
        return step_kda(state, gates.k, gates.v, gates.decay(), gates.beta, check)
    if rule is RuleKind.GDR2:
        return step_gdr2(state, gates, neg_eig, check)[0]
    raise ContractError(f"unknown rule {rule}")


def run_sequence_reference(rule: RuleKind, tokens: list[TokenGates], s0: np.ndarray, neg_eig: bool = False):
    """Step through ``tokens`` in order.

    Returns ``(outputs, states)``: outputs are ``(L, d_v)`` reads ``S_t^T q_t``
    and ``states[t]`` is ``S_{t+1}`` (the state after token ``t``).
    """
    state = np.asarray(s0)
    outputs, states = [], []
    for tok in tokens:
        state = step(rule, state, tok, neg_eig)
        states.append(state)
        outputs.append(read_output(state, tok.q))
    return np.stack(outputs, axis=-2), states


def gdr2_reference(q, k, v, b, w, g, s0=None, neg_eig: bool = False, check: bool = True, keep_states: bool = False):
    """Array form of the GDR2 tokenwise recurrence.

    Inputs are ``(..., L, d)`` arrays with the token axis second to last.
    Returns ``(O, S_final)`` or ``(O, S_final, states)`` with ``keep_states``.
    """
    L = k.shape[-2]
    if s0 is None:
        s0 = np.zeros(k.shape[:-2] + (k.shape[-1], v.shape[-1]), dtype=np.result_type(k, v))
    alpha = np.exp(g)
    state = s0
    lead = np.broadcast_shapes(*(x.shape[:-2] for x in (q, k, v, b, w, g)), np.shape(s0)[:-2])
    out = np.empty(lead + (L, v.shape[-1]), dtype=np.result_type(q, k, v, b, w, state))
    states = []
    for t in range(L):
        tok = TokenGates(k=k[..., t, :], v=v[..., t, :], b=b[..., t, :], w=w[..., t, :], alpha=alpha[..., t, :])
        state, _ = step_gdr2(state, tok, neg_eig, check)
        out[..., t, :] = _read(state, q[..., t, :])
        if keep_states:
            states.append(state)
    if keep_states:
        return out, state, states
    return out, state
