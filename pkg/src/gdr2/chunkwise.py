"""Chunkwise WY-form forward pass for Gated Delta Rule-2.

Inside a chunk the state is decay-normalized, which turns the recurrence
into a product of rank-one edits ``I - k_bar e_bar^T``. Their accumulated
effect is captured by the unit lower triangular inverse ``A = (I + T)^{-1}``
and the two auxiliaries ``Y = A E_bar`` (erase side) and ``U = A Z`` (write
side). Only the end-of-chunk state is carried sequentially; every intra-chunk
quantity is computed for all chunks at once.

Token tensors are ``(..., L, d)`` with arbitrary leading dims (heads, batch).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .core import ContractError, DimensionError, cumsum_rows, unitriangular_inverse

DEFAULT_CHUNK = 64
SOLVE_PRECISIONS = ("binary64", "input")
TILE_ELEMENTS = 1 << 17


class DecayUnderflowError(ContractError):
    """Cumulative decay fell below the representable range of the engine."""


_UNDERFLOW = {np.dtype(np.float32): 1e-30, np.dtype(np.float64): 1e-290}


@dataclass
class ChunkInputs:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    b: np.ndarray
    w: np.ndarray
    g: np.ndarray

    def take(self, idx) -> "ChunkInputs":
        return ChunkInputs(*(np.ascontiguousarray(x[..., idx, :]) for x in (self.q, self.k, self.v, self.b, self.w, self.g)))

    @property
    def dtype(self):
        return np.result_type(self.q, self.k, self.v, self.b, self.w)


@dataclass
class ChunkWorkspace:
    """Derived per-chunk tensors retained for the backward pass."""

    inputs: ChunkInputs
    log_gamma: np.ndarray
    gamma: np.ndarray
    Kbar: np.ndarray
    Ebar: np.ndarray
    Z: np.ndarray
    T: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    U: np.ndarray
    Ktail: np.ndarray
    Qgamma: np.ndarray
    Aqk: np.ndarray
    s0: np.ndarray | None = None
    R: np.ndarray | None = None

    @property
    def gamma_C(self) -> np.ndarray:
        return self.gamma[..., -1, :]


def _log_cumsum(G: np.ndarray) -> np.ndarray:
    if np.any(G > 0):
        raise ContractError("log-decay must be <= 0")
    return cumsum_rows(G, dtype=np.float64)


def cumulate_decay(G: np.ndarray) -> np.ndarray:
    """``gamma_r = exp(sum_{i<=r} g_i)``; the running sum is kept in binary64."""
    dt = np.result_type(G, np.float32)
    return np.exp(_log_cumsum(G)).astype(dt)


def build_gate_matrices(inputs: ChunkInputs, gamma: np.ndarray, log_gamma: np.ndarray | None = None):
    """Return ``(Kbar, Ebar, Z)``."""
    if np.any(gamma <= 0):
        raise DecayUnderflowError("cumulative decay reached zero")
    dt = inputs.dtype
    inv = np.exp(-log_gamma).astype(dt) if log_gamma is not None else 1.0 / gamma
    Kbar = inputs.k * inv
    Ebar = gamma * (inputs.b * inputs.k)
    Z = inputs.w * inputs.v
    return Kbar, Ebar, Z


@functools.lru_cache(maxsize=64)
def _tri_mask(n: int, k: int, dtype: np.dtype) -> np.ndarray:
    return np.tri(n, k=k, dtype=dtype)


def build_T_and_scores(Q: np.ndarray, Kbar: np.ndarray, Ebar: np.ndarray, gamma: np.ndarray):
    """Return ``(T, Aqk, Qgamma)``.

    ``T`` is the strictly lower part of ``Ebar Kbar^T``; ``Aqk`` is the causal
    (diagonal included) part of ``Qgamma Kbar^T``.
    """
    if Q.shape[-1] != Kbar.shape[-1] or Ebar.shape != Kbar.shape:
        raise DimensionError("Q, Kbar, Ebar widths disagree")
    n = Q.shape[-2]
    Kt = np.swapaxes(Kbar, -1, -2)
    T = Ebar @ Kt
    T *= _tri_mask(n, -1, T.dtype)
    Qgamma = gamma * Q
    # Entries above the diagonal carry gamma_r/gamma_s > 1 and are discarded;
    # the underflow guard keeps them finite.
    Aqk = Qgamma @ Kt
    Aqk *= _tri_mask(n, 0, Aqk.dtype)
    return T, Aqk, Qgamma


def build_wy_aux(T: np.ndarray, Ebar: np.ndarray, Z: np.ndarray, solve_precision: str = "binary64"):
    """Return ``(A, Y, U)`` with ``A = (I+T)^{-1}``, ``Y = A Ebar``, ``U = A Z``."""
    if solve_precision not in SOLVE_PRECISIONS:
        raise ContractError(f"solve_precision must be one of {SOLVE_PRECISIONS}")
    dt = T.dtype
    solve_dt = np.float64 if solve_precision == "binary64" else dt
    A = unitriangular_inverse(T.astype(solve_dt, copy=False), check=False).astype(dt, copy=False)
    return A, A @ Ebar, A @ Z


def tail_keys(k: np.ndarray, log_gamma: np.ndarray) -> np.ndarray:
    """Rows ``(gamma_C / gamma_r) * k_r`` with the ratio taken in log space."""
    ratio = np.exp(log_gamma[..., -1:, :] - log_gamma)
    return (ratio * k).astype(k.dtype, copy=False)


def chunk_state_update(s0: np.ndarray, gamma_C: np.ndarray, Ktail: np.ndarray, Y: np.ndarray, U: np.ndarray):
    """Return ``(S_1, R)`` with ``R = U - Y S_0`` and
    ``S_1 = Diag(gamma_C) S_0 + Ktail^T R``."""
    if Y.shape[-1] != s0.shape[-2] or U.shape[-1] != s0.shape[-1]:
        raise DimensionError(f"state {s0.shape} vs Y {Y.shape}, U {U.shape}")
    R = U - Y @ s0
    s1 = gamma_C[..., :, None] * s0 + np.swapaxes(Ktail, -1, -2) @ R
    return s1, R


def chunk_output(Qgamma: np.ndarray, Aqk: np.ndarray, s0: np.ndarray, R: np.ndarray) -> np.ndarray:
    if Qgamma.shape[-1] != s0.shape[-2]:
        raise DimensionError("Qgamma and state disagree")
    return Qgamma @ s0 + Aqk @ R


def build_workspace(inputs: ChunkInputs, solve_precision: str = "binary64",
                    log_gamma: np.ndarray | None = None) -> ChunkWorkspace:
    """All state-independent tensors of a chunk (or a stack of chunks).

    ``log_gamma`` may be passed when the cumulative log-decay is already known.
    """
    dt = inputs.dtype
    if log_gamma is None:
        log_gamma = _log_cumsum(inputs.g)
    if log_gamma.size and log_gamma.min() < np.log(_UNDERFLOW[np.dtype(dt)]):
        raise DecayUnderflowError(
            f"cumulative decay below {_UNDERFLOW[np.dtype(dt)]:g} in {np.dtype(dt).name}; use a smaller chunk"
        )
    # The running sums stay in binary64; the exponentials are taken in the
    # engine precision.
    lg = log_gamma.astype(dt, copy=False)
    gamma = np.exp(lg)
    Kbar, Ebar, Z = build_gate_matrices(inputs, gamma, lg)
    T, Aqk, Qgamma = build_T_and_scores(inputs.q, Kbar, Ebar, gamma)
    A, Y, U = build_wy_aux(T, Ebar, Z, solve_precision)
    Ktail = tail_keys(inputs.k, lg)
    return ChunkWorkspace(inputs, log_gamma, gamma, Kbar, Ebar, Z, T, A, Y, U, Ktail, Qgamma, Aqk)


def prefix_state(ws: ChunkWorkspace, s0: np.ndarray, r: int) -> np.ndarray:
    """State after the first ``r`` tokens of the chunk (1-based)."""
    C = ws.Kbar.shape[-2]
    if not 1 <= r <= C:
        raise ContractError(f"prefix length {r} outside [1, {C}]")
    R = ws.R if ws.R is not None else ws.U - ws.Y @ s0
    s_hat = s0 + np.swapaxes(ws.Kbar[..., :r, :], -1, -2) @ R[..., :r, :]
    return ws.gamma[..., r - 1, :, None] * s_hat


def _workspace_slice(ws: ChunkWorkspace, n: int) -> ChunkWorkspace:
    """Chunk ``n`` of a workspace whose arrays carry a chunk axis at -3."""

    def pick(x):
        return x[..., n, :, :]

    inp = ChunkInputs(*(pick(x) for x in (ws.inputs.q, ws.inputs.k, ws.inputs.v, ws.inputs.b, ws.inputs.w, ws.inputs.g)))
    return ChunkWorkspace(
        inp, pick(ws.log_gamma), pick(ws.gamma), pick(ws.Kbar), pick(ws.Ebar), pick(ws.Z), pick(ws.T),
        pick(ws.A), pick(ws.Y), pick(ws.U), pick(ws.Ktail), pick(ws.Qgamma), pick(ws.Aqk),
    )


@dataclass
class Chunk:
    seq: int
    start: int
    end: int
    first: bool
    last: bool

    @property
    def size(self) -> int:
        return self.end - self.start


def chunk_index(cu_seqlens, chunk_size: int) -> list[Chunk]:
    """Chunk boundaries restart at every sequence boundary."""
    if chunk_size < 1:
        raise ContractError("chunk_size must be >= 1")
    chunks = []
    for s in range(len(cu_seqlens) - 1):
        a, b = int(cu_seqlens[s]), int(cu_seqlens[s + 1])
        starts = list(range(a, b, chunk_size))
        for i, st in enumerate(starts):
            chunks.append(Chunk(s, st, min(st + chunk_size, b), i == 0, i == len(starts) - 1))
    return chunks


def validate_cu_seqlens(cu_seqlens, total: int) -> np.ndarray:
    cu = np.asarray(cu_seqlens)
    if cu.ndim != 1 or cu.size < 2 or not np.issubdtype(cu.dtype, np.integer):
        raise ContractError("cu_seqlens must be a 1-D integer array with at least two offsets")
    if cu[0] != 0:
        raise ContractError("cu_seqlens[0] must be 0")
    if np.any(np.diff(cu) <= 0):
        raise ContractError("cu_seqlens must be strictly increasing (segments nonempty)")
    if cu[-1] != total:
        raise ContractError(f"cu_seqlens[-1]={cu[-1]} but {total} tokens were given")
    return cu


@dataclass
class ForwardResult:
    outputs: np.ndarray
    final_states: list[np.ndarray]
    chunks: list[Chunk]
    workspaces: list[ChunkWorkspace] | None
    inputs: ChunkInputs
    chunk_states: list[np.ndarray] = field(default_factory=list)
    solve_precision: str = "binary64"

    @property
    def final_state(self) -> np.ndarray:
        return self.final_states[-1]


def _stack_chunks(inputs: ChunkInputs, chunks: list[Chunk], ids: list[int]):
    """Inputs of equal-length chunks with a chunk axis at -3.

    Runs of back-to-back chunks are reshaped views; anything else is gathered.
    """
    size = chunks[ids[0]].size
    first = chunks[ids[0]].start
    if all(chunks[i].start == first + n * size for n, i in enumerate(ids)):
        span = slice(first, first + len(ids) * size)

        def view(x):
            part = np.ascontiguousarray(x[..., span, :])
            return part.reshape(part.shape[:-2] + (len(ids), size, part.shape[-1]))

        return ChunkInputs(*(view(x) for x in (inputs.q, inputs.k, inputs.v, inputs.b, inputs.w, inputs.g))), span
    idx = np.array([np.arange(chunks[i].start, chunks[i].end) for i in ids])
    return inputs.take(idx), None


@dataclass
class _ChunkGroup:
    ids: list[int]
    stacked: ChunkWorkspace
    span: slice | None


def _intra_chunk(inputs: ChunkInputs, chunks: list[Chunk], solve_precision: str) -> list[_ChunkGroup]:
    """State-independent workspaces; chunks of equal length are computed stacked."""
    by_size: dict[int, list[int]] = {}
    for i, ch in enumerate(chunks):
        by_size.setdefault(ch.size, []).append(i)
    lead = int(np.prod(np.broadcast_shapes(*(x.shape[:-2] for x in (inputs.q, inputs.k, inputs.v)))))
    groups = []
    for size, ids in by_size.items():
        # Tiles sized so that one C x C workspace matrix per tile stays cache resident.
        tile = max(1, TILE_ELEMENTS // (lead * size * size))
        stacked, span = _stack_chunks(inputs, chunks, ids)
        log_gamma = _log_cumsum(stacked.g)
        for lo in range(0, len(ids), tile):
            part = slice(lo, lo + tile)
            sub = ChunkInputs(*(x[..., part, :, :] for x in (stacked.q, stacked.k, stacked.v, stacked.b, stacked.w, stacked.g)))
            sub_span = None
            if span is not None:
                first = span.start + lo * size
                sub_span = slice(first, first + len(ids[part]) * size)
            ws = build_workspace(sub, solve_precision, log_gamma[..., part, :, :])
            groups.append(_ChunkGroup(ids[part], ws, sub_span))
    return groups


def chunk_transition(ws: ChunkWorkspace):
    """``(M, B)`` with ``S_1 = M S_0 + B`` for the chunk(s) in ``ws``.

    Substituting ``R = U - Y S_0`` into the end-of-chunk update gives
    ``M = Diag(gamma_C) - Ktail^T Y`` and ``B = Ktail^T U``; both are state
    independent, so the sequential pass is one product per chunk.
    """
    Kt = np.swapaxes(ws.Ktail, -1, -2)
    M = -(Kt @ ws.Y)
    diag = np.einsum("...ii->...i", M)
    diag += ws.gamma_C
    return M, Kt @ ws.U


def _residuals_and_slices(groups: list[_ChunkGroup], starts: list, n_chunks: int, retain: bool):
    """Stacked residuals ``R = U - Y S_0`` per group and, if asked, per-chunk workspaces."""
    workspaces: list[ChunkWorkspace | None] = [None] * n_chunks
    residuals = []
    for grp in groups:
        S0 = np.stack([starts[i] for i in grp.ids], axis=-3)
        R = grp.stacked.U - grp.stacked.Y @ S0
        residuals.append((S0, R))
        if retain:
            for n, i in enumerate(grp.ids):
                ws = _workspace_slice(grp.stacked, n)
                ws.s0, ws.R = starts[i], R[..., n, :, :]
                workspaces[i] = ws
    return residuals, workspaces


def _run(inputs: ChunkInputs, chunks: list[Chunk], s0s: list[np.ndarray], solve_precision: str, retain: bool):
    dt = inputs.dtype
    lead = np.broadcast_shapes(inputs.q.shape[:-2], inputs.k.shape[:-2], inputs.v.shape[:-2])
    L = inputs.k.shape[-2]
    dv = inputs.v.shape[-1]
    groups = _intra_chunk(inputs, chunks, solve_precision)
    where = {}
    transitions = []
    for g, grp in enumerate(groups):
        transitions.append(chunk_transition(grp.stacked))
        for n, i in enumerate(grp.ids):
            where[i] = (g, n)
    finals, starts = [], []
    state = None
    # Only the state recurrence is sequential.
    for i, ch in enumerate(chunks):
        if ch.first:
            state = np.broadcast_to(s0s[ch.seq], lead + s0s[ch.seq].shape[-2:]).astype(dt)
        starts.append(state)
        g, n = where[i]
        M, B = transitions[g]
        state = M[..., n, :, :] @ state + B[..., n, :, :]
        if ch.last:
            finals.append(state)
    residuals, workspaces = _residuals_and_slices(groups, starts, len(chunks), retain)
    outputs = np.empty(lead + (L, dv), dtype=dt)
    for grp, (S0, R) in zip(groups, residuals):
        O = chunk_output(grp.stacked.Qgamma, grp.stacked.Aqk, S0, R)
        if grp.span is not None:
            outputs[..., grp.span, :] = O.reshape(O.shape[:-3] + (-1, dv))
        else:
            for n, i in enumerate(grp.ids):
                outputs[..., chunks[i].start:chunks[i].end, :] = O[..., n, :, :]
    return ForwardResult(outputs, finals, chunks, workspaces if retain else None, inputs, starts, solve_precision)


def _check_inputs(q, k, v, b, w, g) -> ChunkInputs:
    if k.shape[-2] < 1:
        raise ContractError("sequence must contain at least one token")
    if not (q.shape[-2:] == k.shape[-2:] == b.shape[-2:] == g.shape[-2:]):
        raise DimensionError("q, k, b, g must share (L, d_k)")
    if v.shape[-2:] != w.shape[-2:] or v.shape[-2] != k.shape[-2]:
        raise DimensionError("v, w must share (L, d_v) with the same L")
    return ChunkInputs(q, k, v, b, w, g)


def _zero_state(inputs: ChunkInputs) -> np.ndarray:
    return np.zeros((inputs.k.shape[-1], inputs.v.shape[-1]), dtype=inputs.dtype)


def forward_chunked(q, k, v, b, w, g, chunk_size: int = DEFAULT_CHUNK, s0=None,
                    solve_precision: str = "binary64", retain: bool = True) -> ForwardResult:
    """Chunkwise forward over one sequence (per leading index).

    The last chunk may be shorter than ``chunk_size``; it is processed at its
    own length rather than padded.
    """
    inputs = _check_inputs(q, k, v, b, w, g)
    L = k.shape[-2]
    chunks = chunk_index([0, L], chunk_size)
    s0 = _zero_state(inputs) if s0 is None else np.asarray(s0)
    return _run(inputs, chunks, [s0], solve_precision, retain)


@dataclass
class PackedBatch:
    """Several sequences concatenated along the token axis.

    ``cu_seqlens`` holds offsets with ``cu_seqlens[0] = 0`` and
    ``cu_seqlens[-1]`` equal to the total token count.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    b: np.ndarray
    w: np.ndarray
    g: np.ndarray
    cu_seqlens: np.ndarray
    s0: list[np.ndarray] | None = None

    @property
    def num_sequences(self) -> int:
        return len(self.cu_seqlens) - 1

    @classmethod
    def pack(cls, sequences: list[dict], s0=None) -> "PackedBatch":
        names = ("q", "k", "v", "b", "w", "g")
        cat = {n: np.concatenate([s[n] for s in sequences], axis=-2) for n in names}
        lens = [s["k"].shape[-2] for s in sequences]
        return cls(**cat, cu_seqlens=np.concatenate([[0], np.cumsum(lens)]).astype(np.int64), s0=s0)


def forward_packed(batch: PackedBatch, chunk_size: int = DEFAULT_CHUNK,
                   solve_precision: str = "binary64", retain: bool = True) -> ForwardResult:
    """Forward over a packed batch; the state resets at every sequence start."""
    inputs = _check_inputs(batch.q, batch.k, batch.v, batch.b, batch.w, batch.g)
    cu = validate_cu_seqlens(batch.cu_seqlens, inputs.k.shape[-2])
    chunks = chunk_index(cu, chunk_size)
    if batch.s0 is None:
        s0s = [_zero_state(inputs)] * (len(cu) - 1)
    else:
        if len(batch.s0) != len(cu) - 1:
            raise ContractError("need one initial state per sequence")
        s0s = [np.asarray(s) for s in batch.s0]
    return _run(inputs, chunks, s0s, solve_precision, retain)


def recompute_workspaces(result: ForwardResult) -> list[ChunkWorkspace]:
    """Rebuild workspaces from inputs and stored chunk-start states."""
    if result.workspaces is not None:
        return result.workspaces
    groups = _intra_chunk(result.inputs, result.chunks, result.solve_precision)
    _, workspaces = _residuals_and_slices(groups, result.chunk_states, len(result.chunks), True)
    return workspaces
