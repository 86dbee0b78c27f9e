import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gdr2 import rules
from gdr2.checks import random_inputs
from gdr2.chunkwise import (ChunkInputs, DecayUnderflowError, PackedBatch, build_gate_matrices, build_T_and_scores,
                            build_workspace, build_wy_aux, chunk_index, chunk_output, chunk_state_update, cumulate_decay,
                            forward_chunked, forward_packed, prefix_state, recompute_workspaces, tail_keys)
from gdr2.core import ContractError, DimensionError, make_rng

NAMES = ("q", "k", "v", "b", "w", "g")


def args(x):
    return [x[n] for n in NAMES]


def chunk(rng, C=8, dk=4, dv=3, lead=()):
    x = random_inputs(rng, lead, C, dk, dv)
    return x, ChunkInputs(*args(x))


def max_abs(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)), initial=0.0))


# -- decay and gate matrices --------------------------------------------------------

def test_cumulate_decay_cases():
    assert np.array_equal(cumulate_decay(np.zeros((5, 3))), np.ones((5, 3)))
    gamma = cumulate_decay(np.array([[0.0, 0.0], [np.log(0.5), 0.0]]))
    assert np.allclose(gamma[1], [0.5, 1.0], rtol=0, atol=1e-16)


def test_cumulate_decay_ratio_oracle():
    g = make_rng(0).uniform(-0.3, 0.0, size=(64, 5))
    gamma = cumulate_decay(g)
    assert np.max(np.abs(gamma[1:] / gamma[:-1] - np.exp(g[1:]))) <= 1e-12


def test_cumulate_decay_rejects_positive_log_decay():
    with pytest.raises(ContractError):
        cumulate_decay(np.array([[0.1]]))


def test_gate_matrices_trivial():
    rng = make_rng(1)
    x, inp = chunk(rng)
    inp = ChunkInputs(inp.q, inp.k, inp.v, np.ones_like(inp.b), np.ones_like(inp.w), inp.g)
    Kbar, Ebar, Z = build_gate_matrices(inp, np.ones_like(inp.k))
    assert np.array_equal(Kbar, inp.k) and np.array_equal(Ebar, inp.k) and np.array_equal(Z, inp.v)
    inp0 = ChunkInputs(inp.q, inp.k, inp.v, inp.b, np.zeros_like(inp.w), inp.g)
    assert not np.any(build_gate_matrices(inp0, np.ones_like(inp.k))[2])


def test_gate_matrices_pairwise_entries():
    rng = make_rng(2)
    x, inp = chunk(rng, C=10)
    gamma = cumulate_decay(inp.g)
    Kbar, Ebar, _ = build_gate_matrices(inp, gamma)
    G = np.cumsum(inp.g, axis=0)
    for r in range(10):
        for s in range(10):
            direct = np.sum(inp.b[r] * inp.k[r] * np.exp(G[r] - G[s]) * inp.k[s])
            assert abs(Ebar[r] @ Kbar[s] - direct) <= 1e-12


def test_T_and_scores_cases():
    rng = make_rng(3)
    x, inp = chunk(rng, C=1)
    gamma = cumulate_decay(inp.g)
    Kbar, Ebar, _ = build_gate_matrices(inp, gamma)
    T, Aqk, _ = build_T_and_scores(inp.q, Kbar, Ebar, gamma)
    assert np.array_equal(T, [[0.0]])
    assert abs(Aqk[0, 0] - inp.q[0] @ inp.k[0]) <= 1e-15

    x, inp = chunk(rng, C=6)
    ones = np.ones_like(inp.k)
    Kbar, Ebar, _ = build_gate_matrices(ChunkInputs(inp.q, inp.k, inp.v, ones, inp.w, inp.g), ones)
    T, _, _ = build_T_and_scores(inp.q, Kbar, Ebar, ones)
    assert np.max(np.abs(T - np.tril(inp.k @ inp.k.T, -1))) <= 1e-15


def test_T_and_scores_per_entry():
    rng = make_rng(4)
    x, inp = chunk(rng, C=16, dk=5)
    gamma = cumulate_decay(inp.g)
    Kbar, Ebar, _ = build_gate_matrices(inp, gamma)
    T, Aqk, _ = build_T_and_scores(inp.q, Kbar, Ebar, gamma)
    G = np.cumsum(inp.g, axis=0)
    for r in range(16):
        for s in range(16):
            ratio = np.exp(G[r] - G[s])
            t_ref = np.sum(inp.b[r] * inp.k[r] * ratio * inp.k[s]) if s < r else 0.0
            a_ref = np.sum(inp.q[r] * ratio * inp.k[s]) if s <= r else 0.0
            assert abs(T[r, s] - t_ref) <= 1e-12
            assert abs(Aqk[r, s] - a_ref) <= 1e-12


def test_wy_aux_identity_when_T_zero():
    rng = make_rng(5)
    E, Z = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    A, Y, U = build_wy_aux(np.zeros((6, 6)), E, Z)
    assert np.array_equal(A, np.eye(6)) and np.array_equal(Y, E) and np.array_equal(U, Z)


def test_wy_aux_row_recurrences():
    rng = make_rng(6)
    ws = build_workspace(chunk(rng, C=16, dk=6, dv=5)[1])
    for r in range(16):
        y_ref = ws.Ebar[r] - sum((ws.Ebar[r] @ ws.Kbar[s]) * ws.Y[s] for s in range(r))
        u_ref = ws.Z[r] - sum((ws.Ebar[r] @ ws.Kbar[s]) * ws.U[s] for s in range(r))
        assert max_abs(ws.Y[r], y_ref) <= 1e-10
        assert max_abs(ws.U[r], u_ref) <= 1e-10


def test_wy_aux_rejects_unknown_solve_precision():
    with pytest.raises(ContractError):
        build_wy_aux(np.zeros((2, 2)), np.ones((2, 1)), np.ones((2, 1)), "binary16")


def test_tail_keys_log_space_ratio():
    rng = make_rng(7)
    x, inp = chunk(rng, C=9)
    lg = np.cumsum(inp.g, axis=0)
    Kt = tail_keys(inp.k, lg)
    assert max_abs(Kt, np.exp(lg[-1] - lg) * inp.k) <= 1e-15
    assert np.array_equal(Kt[-1], inp.k[-1])


# -- chunk state update and output --------------------------------------------------

def test_state_update_from_zero():
    rng = make_rng(8)
    ws = build_workspace(chunk(rng)[1])
    s1, R = chunk_state_update(np.zeros((4, 3)), ws.gamma_C, ws.Ktail, ws.Y, ws.U)
    assert np.array_equal(R, ws.U)
    assert np.array_equal(s1, ws.Ktail.T @ ws.U)


def test_state_update_single_token_is_a_step():
    rng = make_rng(9)
    x, inp = chunk(rng, C=1)
    s0 = rng.normal(size=(4, 3))
    ws = build_workspace(inp)
    s1, R = chunk_state_update(s0, ws.gamma_C, ws.Ktail, ws.Y, ws.U)
    tok = rules.TokenGates(k=inp.k[0], v=inp.v[0], b=inp.b[0], w=inp.w[0], g=inp.g[0])
    assert max_abs(s1, rules.step_gdr2(s0, tok)[0]) <= 1e-14


def test_state_update_and_output_full_chunk():
    rng = make_rng(10)
    x, inp = chunk(rng, C=64, dk=8, dv=6)
    s0 = rng.normal(size=(8, 6))
    ws = build_workspace(inp)
    s1, R = chunk_state_update(s0, ws.gamma_C, ws.Ktail, ws.Y, ws.U)
    O_ref, S_ref = rules.gdr2_reference(*args(x), s0=s0)
    assert max_abs(s1, S_ref) <= 1e-10
    assert max_abs(chunk_output(ws.Qgamma, ws.Aqk, s0, R), O_ref) <= 1e-10


def test_residual_linear_system():
    rng = make_rng(11)
    x, inp = chunk(rng, C=32, dk=6, dv=5)
    s0 = rng.normal(size=(6, 5))
    ws = build_workspace(inp)
    _, R = chunk_state_update(s0, ws.gamma_C, ws.Ktail, ws.Y, ws.U)
    assert max_abs((np.eye(32) + ws.T) @ R, ws.Z - ws.Ebar @ s0) <= 1e-10


def test_output_single_token_from_zero():
    rng = make_rng(12)
    x, inp = chunk(rng, C=1)
    ws = build_workspace(inp)
    s0 = np.zeros((4, 3))
    _, R = chunk_state_update(s0, ws.gamma_C, ws.Ktail, ws.Y, ws.U)
    o = chunk_output(ws.Qgamma, ws.Aqk, s0, R)
    assert max_abs(o[0], (inp.q[0] @ inp.k[0]) * inp.w[0] * inp.v[0]) <= 1e-15


def test_output_zero_queries():
    rng = make_rng(13)
    x, inp = chunk(rng)
    inp = ChunkInputs(np.zeros_like(inp.q), inp.k, inp.v, inp.b, inp.w, inp.g)
    ws = build_workspace(inp)
    s0 = rng.normal(size=(4, 3))
    _, R = chunk_state_update(s0, ws.gamma_C, ws.Ktail, ws.Y, ws.U)
    assert not np.any(chunk_output(ws.Qgamma, ws.Aqk, s0, R))


def test_state_update_shape_error():
    rng = make_rng(14)
    ws = build_workspace(chunk(rng)[1])
    with pytest.raises(DimensionError):
        chunk_state_update(np.zeros((3, 3)), ws.gamma_C, ws.Ktail, ws.Y, ws.U)


def test_tied_chunk_factors():
    rng = make_rng(15)
    x, inp = chunk(rng, C=12, dk=5, dv=4)
    beta = rng.uniform(size=(12, 1))
    inp = ChunkInputs(inp.q, inp.k, inp.v, np.repeat(beta, 5, 1), np.repeat(beta, 4, 1), inp.g)
    ws = build_workspace(inp)
    assert max_abs(ws.Ebar, beta * ws.gamma * ws.gamma * ws.Kbar) <= 1e-14
    assert max_abs(ws.Z, beta * inp.v) <= 1e-14


# -- prefix states --------------------------------------------------------------------

def test_prefix_states():
    rng = make_rng(16)
    x, inp = chunk(rng, C=20, dk=5, dv=4)
    s0 = rng.normal(size=(5, 4))
    ws = build_workspace(inp)
    s1, R = chunk_state_update(s0, ws.gamma_C, ws.Ktail, ws.Y, ws.U)
    _, _, states = rules.gdr2_reference(*args(x), s0=s0, keep_states=True)
    assert max_abs(prefix_state(ws, s0, 20), s1) <= 1e-14
    tok = rules.TokenGates(k=inp.k[0], v=inp.v[0], b=inp.b[0], w=inp.w[0], g=inp.g[0])
    assert max_abs(prefix_state(ws, s0, 1), rules.step_gdr2(s0, tok)[0]) <= 1e-14
    for r in range(1, 21):
        assert max_abs(prefix_state(ws, s0, r), states[r - 1]) <= 1e-10
    with pytest.raises(ContractError):
        prefix_state(ws, s0, 0)


# -- whole-sequence engine ---------------------------------------------------------------

@pytest.mark.parametrize("C", [2, 16, 64])
def test_forward_matches_tokenwise_long(C):
    rng = make_rng(17)
    x = random_inputs(rng, (2,), 256, 16, 8)
    s0 = rng.normal(size=(2, 16, 8))
    O_ref, S_ref = rules.gdr2_reference(*args(x), s0=s0)
    res = forward_chunked(*args(x), chunk_size=C, s0=s0)
    assert max_abs(res.outputs, O_ref) <= 1e-10
    assert max_abs(res.final_state, S_ref) <= 1e-10


def test_forward_chunk_of_one_collapses_to_tokenwise():
    rng = make_rng(18)
    x = random_inputs(rng, (), 50, 6, 5)
    s0 = rng.normal(size=(6, 5))
    O_ref, S_ref = rules.gdr2_reference(*args(x), s0=s0)
    res = forward_chunked(*args(x), chunk_size=1, s0=s0)
    assert max_abs(res.outputs, O_ref) <= 1e-14
    assert max_abs(res.final_state, S_ref) <= 1e-14


def test_forward_single_chunk_when_C_exceeds_L():
    rng = make_rng(19)
    x = random_inputs(rng, (), 30, 4, 4)
    res = forward_chunked(*args(x), chunk_size=64)
    assert len(res.chunks) == 1
    ws = build_workspace(ChunkInputs(*args(x)))
    s1, R = chunk_state_update(np.zeros((4, 4)), ws.gamma_C, ws.Ktail, ws.Y, ws.U)
    assert np.array_equal(res.final_state, s1)


def test_ragged_last_chunk_matches_trimmed_exact_division():
    rng = make_rng(20)
    x = random_inputs(rng, (), 48, 4, 3)
    long = forward_chunked(*args(x), chunk_size=16)
    short = forward_chunked(*[a[:41] for a in args(x)], chunk_size=16)
    assert [c.size for c in short.chunks] == [16, 16, 9]
    assert max_abs(short.outputs, long.outputs[:41]) <= 1e-14
    O_ref, S_ref = rules.gdr2_reference(*[a[:41] for a in args(x)])
    assert max_abs(short.final_state, S_ref) <= 1e-10


def test_binary32_forward_tolerance():
    rng = make_rng(21)
    x = {n: a.astype(np.float32) for n, a in random_inputs(rng, (2,), 200, 16, 16).items()}
    O_ref, S_ref = rules.gdr2_reference(*[a.astype(np.float64) for a in args(x)])
    for sp in ("binary64", "input"):
        res = forward_chunked(*args(x), chunk_size=64, solve_precision=sp)
        assert res.outputs.dtype == np.float32
        assert max_abs(res.outputs, O_ref) <= 5e-3
        assert max_abs(res.final_state, S_ref) <= 5e-3


def test_recompute_is_bitwise_equal_to_retained():
    rng = make_rng(22)
    x = random_inputs(rng, (2,), 70, 5, 4)
    s0 = rng.normal(size=(2, 5, 4))
    kept = forward_chunked(*args(x), chunk_size=16, s0=s0)
    lean = forward_chunked(*args(x), chunk_size=16, s0=s0, retain=False)
    assert lean.workspaces is None
    assert np.array_equal(kept.outputs, lean.outputs)
    for a, b in zip(kept.workspaces, recompute_workspaces(lean)):
        for name in ("gamma", "Kbar", "Ebar", "Z", "T", "A", "Y", "U", "Ktail", "Qgamma", "Aqk", "s0", "R"):
            assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_decay_underflow_raises_in_binary32():
    rng = make_rng(23)
    x = {n: a.astype(np.float32) for n, a in random_inputs(rng, (), 64, 4, 4, decay=(-2.0, -1.5)).items()}
    with pytest.raises(DecayUnderflowError):
        forward_chunked(*args(x), chunk_size=64)
    forward_chunked(*args(x), chunk_size=8)


def test_input_contracts():
    rng = make_rng(24)
    x = random_inputs(rng, (), 10, 4, 3)
    with pytest.raises(DimensionError):
        forward_chunked(x["q"][:, :3], *args(x)[1:])
    with pytest.raises(ContractError):
        forward_chunked(*args(x), chunk_size=0)
    bad = dict(x, g=np.abs(x["g"]))
    with pytest.raises(ContractError):
        forward_chunked(*args(bad))


# -- packing ----------------------------------------------------------------------------

def test_chunk_index_restarts_at_boundaries():
    chunks = chunk_index([0, 5, 6, 23], 4)
    assert [(c.start, c.end) for c in chunks] == [(0, 4), (4, 5), (5, 6), (6, 10), (10, 14), (14, 18), (18, 22), (22, 23)]
    assert [c.first for c in chunks] == [True, False, True, True, False, False, False, False]


@pytest.mark.parametrize("cu", [[1, 5], [0, 3, 3], [0, 4], [0], np.array([0.0, 4.0])])
def test_cu_seqlens_validation(cu):
    rng = make_rng(25)
    x = random_inputs(rng, (), 5, 4, 3)
    with pytest.raises(ContractError):
        forward_packed(PackedBatch(*args(x), cu_seqlens=np.asarray(cu)))


def test_packed_one_sequence_equals_unpacked():
    rng = make_rng(26)
    x = random_inputs(rng, (), 40, 4, 3)
    s0 = rng.normal(size=(4, 3))
    packed = forward_packed(PackedBatch.pack([x], [s0]), chunk_size=16)
    single = forward_chunked(*args(x), chunk_size=16, s0=s0)
    assert np.array_equal(packed.outputs, single.outputs)
    assert np.array_equal(packed.final_states[0], single.final_state)


def test_packed_ragged_sequences():
    rng = make_rng(27)
    seqs = [random_inputs(rng, (), m, 4, 3) for m in (5, 1, 17)]
    s0s = [rng.normal(size=(4, 3)) for _ in seqs]
    packed = forward_packed(PackedBatch.pack(seqs, s0s), chunk_size=4)
    lo = 0
    for seq, s0, fs in zip(seqs, s0s, packed.final_states):
        single = forward_chunked(*args(seq), chunk_size=4, s0=s0)
        m = seq["k"].shape[0]
        assert max_abs(packed.outputs[lo:lo + m], single.outputs) <= 1e-14
        assert max_abs(fs, single.final_state) <= 1e-14
        lo += m


@given(lens=st.lists(st.integers(1, 40), min_size=1, max_size=5), C=st.integers(1, 20), seed=st.integers(0, 2**31 - 1))
def test_property_packing_matches_separate_runs(lens, C, seed):
    rng = make_rng(seed)
    seqs = [random_inputs(rng, (2,), m, 3, 2) for m in lens]
    s0s = [rng.normal(size=(2, 3, 2)) for _ in lens]
    packed = forward_packed(PackedBatch.pack(seqs, s0s), chunk_size=C)
    lo = 0
    for seq, s0, fs in zip(seqs, s0s, packed.final_states):
        O_ref, S_ref = rules.gdr2_reference(*args(seq), s0=s0)
        m = seq["k"].shape[-2]
        assert max_abs(packed.outputs[..., lo:lo + m, :], O_ref) <= 1e-10
        assert max_abs(fs, S_ref) <= 1e-10
        lo += m


@given(L=st.integers(1, 80), C=st.integers(1, 70), dk=st.integers(1, 6), dv=st.integers(1, 6),
       seed=st.integers(0, 2**31 - 1))
def test_property_chunked_equals_tokenwise(L, C, dk, dv, seed):
    rng = make_rng(seed)
    x = random_inputs(rng, (), L, dk, dv)
    s0 = rng.normal(size=(dk, dv))
    O_ref, S_ref = rules.gdr2_reference(*args(x), s0=s0)
    res = forward_chunked(*args(x), chunk_size=C, s0=s0)
    assert max_abs(res.outputs, O_ref) <= 1e-10
    assert max_abs(res.final_state, S_ref) <= 1e-10
