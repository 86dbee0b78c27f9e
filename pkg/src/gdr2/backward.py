"""Gate-aware analytic backward of the chunkwise GDR2 forward.

Per chunk the reverse pass runs: output path, state path, residual relation,
WY auxiliaries (gates inside the accumulation), triangular inverse, the
``T`` / score constructions, the elementwise gate relations and finally the
reverse cumulative sum that maps cumulative-decay gradients onto ``g``.
Chunks are visited in reverse order with the state gradient threaded across
chunk boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chunkwise import ChunkInputs, ChunkWorkspace, ForwardResult, recompute_workspaces
from .core import ContractError, DimensionError, reverse_cumsum_rows


def _t(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


@dataclass
class ChunkGrads:
    dQ: np.ndarray
    dK: np.ndarray
    dV: np.ndarray
    dB: np.ndarray
    dW: np.ndarray
    dG: np.ndarray
    dS0: np.ndarray | list[np.ndarray]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"q": self.dQ, "k": self.dK, "v": self.dV, "b": self.dB, "w": self.dW, "g": self.dG}


def vjp_output(dO: np.ndarray, ws: ChunkWorkspace, s0: np.ndarray):
    """Returns ``(dAqk, dR, dQgamma, dS0)`` from ``O = Qgamma S0 + Aqk R``."""
    if dO.shape[-2:] != ws.R.shape[-2:]:
        raise DimensionError(f"dO {dO.shape} vs chunk output {ws.R.shape}")
    dAqk = np.tril(dO @ _t(ws.R))
    dR = _t(ws.Aqk) @ dO
    dQgamma = dO @ _t(s0)
    dS0 = _t(ws.Qgamma) @ dO
    return dAqk, dR, dQgamma, dS0


def vjp_state(dS_C: np.ndarray, ws: ChunkWorkspace, s0: np.ndarray):
    """Returns ``(dR, dKtail, dS0, dgamma_C)`` from
    ``S_C = Diag(gamma_C) S0 + Ktail^T R``."""
    if dS_C.shape[-2:] != s0.shape[-2:]:
        raise DimensionError(f"dS_C {dS_C.shape} vs state {s0.shape}")
    dR = ws.Ktail @ dS_C
    dKtail = ws.R @ _t(dS_C)
    dS0 = ws.gamma_C[..., :, None] * dS_C
    dgamma_C = np.sum(dS_C * s0, axis=-1)
    return dR, dKtail, dS0, dgamma_C


def vjp_residual(dR: np.ndarray, ws: ChunkWorkspace, s0: np.ndarray):
    """Returns ``(dU, dY, dS0)`` from ``R = U - Y S0``."""
    if dR.shape[-2:] != ws.U.shape[-2:]:
        raise DimensionError("dR shape disagrees with U")
    return dR, -(dR @ _t(s0)), -(_t(ws.Y) @ dR)


def vjp_wy(dU: np.ndarray, dY: np.ndarray, ws: ChunkWorkspace, post_scale: bool = False):
    """Returns ``(dA, dZ, dEbar)`` from ``U = A Z`` and ``Y = A Ebar``.

    The gates live inside ``Z = W*V`` and ``Ebar = gamma*(B*K)`` and so enter
    the ``dA`` accumulation directly. ``post_scale=True`` instead accumulates
    against ``V`` and ``gamma*K`` and rescales columns by the per-row gate
    means; that is exact only for tied scalar gates and exists as a control.
    """
    if dU.shape != ws.U.shape or dY.shape != ws.Y.shape:
        raise DimensionError("dU/dY shapes disagree with U/Y")
    if post_scale:
        inp = ws.inputs
        w_bar = np.mean(inp.w, axis=-1)[..., None, :]
        b_bar = np.mean(inp.b, axis=-1)[..., None, :]
        dA = (dU @ _t(inp.v)) * w_bar + (dY @ _t(ws.gamma * inp.k)) * b_bar
    else:
        dA = dU @ _t(ws.Z) + dY @ _t(ws.Ebar)
    At = _t(ws.A)
    return dA, At @ dU, At @ dY


def vjp_inverse(dA: np.ndarray, A: np.ndarray) -> np.ndarray:
    """``dT`` for ``A = (I + T)^{-1}``; only the strictly lower part is live."""
    if dA.shape[-2:] != A.shape[-2:]:
        raise DimensionError("dA and A disagree")
    At = _t(A)
    return -np.tril(At @ dA @ At, -1)


def vjp_T_and_scores(dT: np.ndarray, dAqk: np.ndarray, ws: ChunkWorkspace):
    """Returns ``(dEbar, dKbar, dQgamma)`` from ``T = tril(Ebar Kbar^T, -1)``
    and ``Aqk = tril(Qgamma Kbar^T)``."""
    dEbar = dT @ ws.Kbar
    dKbar = _t(dT) @ ws.Ebar + _t(dAqk) @ ws.Qgamma
    dQgamma = dAqk @ ws.Kbar
    return dEbar, dKbar, dQgamma


def vjp_elementwise(dEbar, dKbar, dQgamma, dKtail, dZ, dgamma_C, inputs: ChunkInputs, gamma: np.ndarray,
                    log_gamma: np.ndarray | None = None):
    """Map gradients of the derived chunk matrices onto the raw inputs.

    Returns ``(dQ, dK, dV, dB, dW, dgamma)``; ``dgamma`` collects every
    appearance of the cumulative decay (erase rows, normalized keys, decayed
    queries, and the end-of-chunk factor through the state and tail keys).
    """
    q, k, v, b, w = inputs.q, inputs.k, inputs.v, inputs.b, inputs.w
    if log_gamma is None:
        inv = 1.0 / gamma
    else:
        inv = np.exp(-log_gamma).astype(gamma.dtype)
    gamma_C = gamma[..., -1:, :]
    # Ktail_r = gamma_C * Kbar_r
    dKbar = dKbar + dKtail * gamma_C
    Kbar = k * inv
    dgC = dgamma_C + np.sum(dKtail * Kbar, axis=-2)

    dW = dZ * v
    dV = dZ * w
    dB = dEbar * gamma * k
    dK = dEbar * gamma * b + dKbar * inv
    dQ = dQgamma * gamma
    dgamma = dEbar * b * k - dKbar * Kbar * inv + dQgamma * q
    dgamma[..., -1, :] += dgC
    return dQ, dK, dV, dB, dW, dgamma


def vjp_decay(dgamma: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """``dg`` from ``gamma_r = exp(sum_{i<=r} g_i)``."""
    if dgamma.shape != gamma.shape:
        raise DimensionError("dgamma and gamma disagree")
    return reverse_cumsum_rows(dgamma * gamma)


def backward_chunk(ws: ChunkWorkspace, dO: np.ndarray, dS_C: np.ndarray, post_scale: bool = False):
    """Full reverse pass through one chunk. Returns per-token grads and ``dS0``."""
    s0 = ws.s0
    dAqk, dR, dQgamma, dS0 = vjp_output(dO, ws, s0)
    dR_s, dKtail, dS0_s, dgamma_C = vjp_state(dS_C, ws, s0)
    dR = dR + dR_s
    dS0 = dS0 + dS0_s
    dU, dY, dS0_r = vjp_residual(dR, ws, s0)
    dS0 = dS0 + dS0_r
    dA, dZ, dEbar = vjp_wy(dU, dY, ws, post_scale)
    dT = vjp_inverse(dA, ws.A)
    dEbar_t, dKbar, dQgamma_s = vjp_T_and_scores(dT, dAqk, ws)
    dEbar = dEbar + dEbar_t
    dQgamma = dQgamma + dQgamma_s
    dQ, dK, dV, dB, dW, dgamma = vjp_elementwise(
        dEbar, dKbar, dQgamma, dKtail, dZ, dgamma_C, ws.inputs, ws.gamma, ws.log_gamma
    )
    dG = vjp_decay(dgamma, ws.gamma)
    return ChunkGrads(dQ, dK, dV, dB, dW, dG, dS0)


def backward_chunked(result: ForwardResult, dO: np.ndarray, dS_final=None, post_scale: bool = False) -> ChunkGrads:
    """Reverse pass over every chunk of a forward result.

    ``dS_final`` is the gradient of the final state (or one per packed
    sequence). The returned ``dS0`` is an array for a single sequence and a
    list for packed batches.
    """
    workspaces = recompute_workspaces(result)
    if workspaces is None or any(ws.R is None for ws in workspaces):
        raise ContractError("forward workspaces are missing")
    inp = result.inputs
    n_seq = len(result.final_states)
    if dS_final is None:
        dS_final = [np.zeros_like(s) for s in result.final_states]
    elif n_seq == 1 and not isinstance(dS_final, (list, tuple)):
        dS_final = [dS_final]
    if len(dS_final) != n_seq:
        raise ContractError("need one final-state gradient per sequence")
    if dO.shape[-2:] != result.outputs.shape[-2:]:
        raise DimensionError(f"dO {dO.shape} vs outputs {result.outputs.shape}")

    lead = result.outputs.shape[:-2]
    dt = result.outputs.dtype

    def zeros_like_input(x):
        return np.zeros(lead + x.shape[-2:], dtype=dt)

    grads = {n: zeros_like_input(getattr(inp, n)) for n in ("q", "k", "v", "b", "w", "g")}
    dS0s: list[np.ndarray | None] = [None] * n_seq
    dS = None
    for ch, ws in zip(reversed(result.chunks), reversed(workspaces)):
        if ch.last:
            dS = np.broadcast_to(dS_final[ch.seq], lead + result.final_states[ch.seq].shape[-2:]).astype(dt)
        cg = backward_chunk(ws, dO[..., ch.start:ch.end, :], dS, post_scale)
        for name, val in cg.as_dict().items():
            grads[name][..., ch.start:ch.end, :] = val
        dS = cg.dS0
        if ch.first:
            dS0s[ch.seq] = dS
    dS0 = dS0s[0] if n_seq == 1 else dS0s
    return ChunkGrads(grads["q"], grads["k"], grads["v"], grads["b"], grads["w"], grads["g"], dS0)


def tied_beta_gradient(dB_row: np.ndarray, dW_row: np.ndarray):
    """Gradient of a scalar ``beta`` feeding ``b = beta*1`` and ``w = beta*1``."""
    return np.sum(dB_row, axis=-1) + np.sum(dW_row, axis=-1)
