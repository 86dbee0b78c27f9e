import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gdr2 import rules
from gdr2.core import ContractError, DimensionError, l2_normalize_rows, make_rng
from gdr2.rules import RuleKind, TokenGates


def unit(rng, *shape):
    return l2_normalize_rows(rng.normal(size=shape))


def gdr2(S, k, v, b, w, alpha, neg_eig=False):
    return rules.step_gdr2(S, TokenGates(k=k, v=v, b=b, w=w, alpha=alpha), neg_eig=neg_eig)[0]


# -- hand cases ---------------------------------------------------------------------

def test_linear_attention_outer_product():
    out = rules.step_linear_attention(np.zeros((2, 1)), np.array([1.0, 0.0]), np.array([3.0]))
    assert np.array_equal(out, [[3.0], [0.0]])


def test_linear_attention_orthogonal_retrieval():
    S = np.zeros((3, 2))
    keys, vals = np.eye(3)[:2], np.array([[1.0, -2.0], [0.5, 4.0]])
    for k, v in zip(keys, vals):
        S = rules.step_linear_attention(S, k, v)
    for k, v in zip(keys, vals):
        assert np.array_equal(rules.read_output(S, k), v)


def test_linear_attention_masked_matrix_form():
    rng = make_rng(0)
    L, dk, dv = 32, 5, 3
    Q, K, V = rng.normal(size=(L, dk)), rng.normal(size=(L, dk)), rng.normal(size=(L, dv))
    toks = [TokenGates(k=K[t], v=V[t], q=Q[t]) for t in range(L)]
    O, _ = rules.run_sequence_reference(RuleKind.LINEAR_ATTENTION, toks, np.zeros((dk, dv)))
    parallel = (np.tril(Q @ K.T)) @ V
    assert np.max(np.abs(O - parallel)) <= 1e-12


def test_mamba2_cases():
    rng = make_rng(1)
    S, k, v = rng.normal(size=(3, 2)), rng.normal(size=3), rng.normal(size=2)
    assert np.array_equal(rules.step_mamba2(S, k, v, 1.0), rules.step_linear_attention(S, k, v))
    assert np.array_equal(rules.step_mamba2(np.array([[2.0]]), np.zeros(1), np.zeros(1), 0.5), [[1.0]])


def test_mamba2_cumulative_read_factor():
    # a single write at step i is read at step t with factor prod_{i<s<=t} alpha_s
    rng = make_rng(2)
    L, i = 16, 4
    alphas = rng.uniform(0.5, 1.0, size=L)
    k = np.array([1.0, 0.0])
    S = np.zeros((2, 1))
    for t in range(L):
        v = np.array([1.0]) if t == i else np.zeros(1)
        S = rules.step_mamba2(S, k, v, alphas[t])
        if t >= i:
            factor = np.prod(alphas[i + 1:t + 1])
            assert abs(rules.read_output(S, k)[0] - factor) <= 1e-12


def test_deltanet_cases():
    rng = make_rng(3)
    S, k, v = rng.normal(size=(4, 3)), unit(rng, 4), rng.normal(size=3)
    assert np.array_equal(rules.step_deltanet(S, k, v, 0.0), S)
    u = rng.normal(size=3)
    out = rules.step_deltanet(np.outer(k, u), k, v, 1.0)
    assert np.max(np.abs(out - np.outer(k, v))) <= 1e-15


def test_gdn_reductions_bitwise():
    rng = make_rng(4)
    S, k, v = rng.normal(size=(4, 3)), unit(rng, 4), rng.normal(size=3)
    assert np.array_equal(rules.step_gdn(S, k, v, 1.0, 0.3), rules.step_deltanet(S, k, v, 0.3))
    assert np.array_equal(rules.step_gdn(S, k, v, 0.7, 0.0), rules.step_mamba2(S, k, 0.0 * v, 0.7))


def test_kda_cases():
    rng = make_rng(5)
    S, k, v = rng.normal(size=(4, 3)), unit(rng, 4), rng.normal(size=3)
    assert np.array_equal(rules.step_kda(S, k, v, np.full(4, 0.8), 0.4), rules.step_gdn(S, k, v, 0.8, 0.4))
    out = rules.step_kda(np.diag([2.0, 2.0]), np.array([1.0, 0.0]), np.zeros(2), np.array([0.5, 0.25]), 0.0)
    assert np.array_equal(out, [[1.0, 0.0], [0.0, 0.5]])


def test_gdr2_zero_state_write():
    S = gdr2(np.zeros((2, 2)), np.array([1.0, 0.0]), np.array([2.0, 4.0]), np.ones(2), np.array([0.5, 1.0]), np.ones(2))
    assert np.array_equal(S, [[1.0, 4.0], [0.0, 0.0]])


def test_gdr2_erase_only():
    S = gdr2(np.eye(2), np.array([1.0, 0.0]), np.array([7.0, -3.0]), np.ones(2), np.zeros(2), np.ones(2))
    assert np.array_equal(S, [[0.0, 0.0], [0.0, 1.0]])


def test_gdr2_pure_decay():
    S = gdr2(np.diag([2.0, 2.0]), np.array([0.6, 0.8]), np.ones(2), np.zeros(2), np.zeros(2), np.array([0.5, 0.25]))
    assert np.array_equal(S, [[1.0, 0.0], [0.0, 0.5]])


def test_gdr2_returns_erase_read():
    rng = make_rng(6)
    S, k, v = rng.normal(size=(4, 3)), unit(rng, 4), rng.normal(size=3)
    b, w, a = rng.uniform(size=4), rng.uniform(size=3), rng.uniform(0.5, 1, size=4)
    _, r = rules.step_gdr2(S, TokenGates(k=k, v=v, b=b, w=w, alpha=a))
    assert np.max(np.abs(r - (a[:, None] * S).T @ (b * k))) <= 1e-15


def test_read_output_cases():
    assert np.array_equal(rules.read_output(np.array([[3.0], [0.0]]), np.array([1.0, 0.0])), [3.0])
    assert np.array_equal(rules.read_output(np.ones((2, 3)), np.zeros(2)), np.zeros(3))
    rng = make_rng(7)
    S, q = rng.normal(size=(5, 4)), rng.normal(size=5)
    loop = [sum(S[i, j] * q[i] for i in range(5)) for j in range(4)]
    assert np.max(np.abs(rules.read_output(S, q) - loop)) <= 1e-15


# -- reductions ----------------------------------------------------------------------

@given(seed=st.integers(0, 2**31 - 1), dk=st.integers(1, 8), dv=st.integers(1, 8))
def test_property_reduction_lattice(seed, dk, dv):
    rng = make_rng(seed)
    S, k, v = rng.normal(size=(dk, dv)), unit(rng, dk), rng.normal(size=dv)
    beta, a = rng.uniform(), rng.uniform(0.01, 1.0)
    avec = rng.uniform(0.01, 1.0, size=dk)
    kda = rules.step_kda(S, k, v, avec, beta)
    assert np.max(np.abs(gdr2(S, k, v, np.full(dk, beta), np.full(dv, beta), avec) - kda)) <= 1e-15
    gdn = rules.step_gdn(S, k, v, a, beta)
    assert np.max(np.abs(rules.step_kda(S, k, v, np.full(dk, a), beta) - gdn)) <= 1e-15
    assert np.max(np.abs(rules.step_gdn(S, k, v, a, 0.0) - rules.step_mamba2(S, k, 0.0 * v, a))) <= 1e-15
    assert np.max(np.abs(rules.step_gdn(S, k, v, 1.0, beta) - rules.step_deltanet(S, k, v, beta))) <= 1e-15
    # b = 0, w = 1 and a scalar decay is exactly Mamba-2
    assert np.max(np.abs(gdr2(S, k, v, np.zeros(dk), np.ones(dv), np.full(dk, a))
                         - rules.step_mamba2(S, k, v, a))) <= 1e-15


def test_deltanet_is_tied_gdr2_without_decay():
    rng = make_rng(8)
    S, k, v, beta = rng.normal(size=(4, 3)), unit(rng, 4), rng.normal(size=3), 0.35
    out = gdr2(S, k, v, np.full(4, beta), np.full(3, beta), np.ones(4))
    assert np.max(np.abs(out - rules.step_deltanet(S, k, v, beta))) <= 1e-15


def test_tied_sequence_matches_kda_bitwise():
    rng = make_rng(9)
    L, dk, dv = 20, 4, 3
    s0 = rng.normal(size=(dk, dv))
    tied, kda = [], []
    for _ in range(L):
        k, v, q = unit(rng, dk), rng.normal(size=dv), rng.normal(size=dk)
        beta, a = rng.uniform(), rng.uniform(0.5, 1.0, size=dk)
        tied.append(TokenGates(k=k, v=v, q=q, b=np.full(dk, beta), w=np.full(dv, beta), alpha=a))
        kda.append(TokenGates(k=k, v=v, q=q, beta=beta, alpha=a))
    O1, S1 = rules.run_sequence_reference(RuleKind.GDR2, tied, s0)
    O2, S2 = rules.run_sequence_reference(RuleKind.KDA, kda, s0)
    assert np.array_equal(O1, O2)
    assert np.array_equal(S1[-1], S2[-1])


def test_sequence_length_one_is_a_step():
    rng = make_rng(10)
    s0, k, v, q = rng.normal(size=(3, 2)), unit(rng, 3), rng.normal(size=2), rng.normal(size=3)
    tok = TokenGates(k=k, v=v, q=q, b=rng.uniform(size=3), w=rng.uniform(size=2), alpha=rng.uniform(0.5, 1, size=3))
    O, states = rules.run_sequence_reference(RuleKind.GDR2, [tok], s0)
    S1 = rules.step_gdr2(s0, tok)[0]
    assert np.array_equal(states[0], S1)
    assert np.array_equal(O[0], rules.read_output(S1, q))


def test_array_reference_matches_token_list():
    rng = make_rng(11)
    L, dk, dv = 17, 4, 5
    q, k = unit(rng, 2, L, dk), unit(rng, 2, L, dk)
    v, b, w = rng.normal(size=(2, L, dv)), rng.uniform(size=(2, L, dk)), rng.uniform(size=(2, L, dv))
    g = rng.uniform(-0.5, -0.01, size=(2, L, dk))
    s0 = rng.normal(size=(2, dk, dv))
    O, S = rules.gdr2_reference(q, k, v, b, w, g, s0=s0)
    for h in range(2):
        toks = [TokenGates(k=k[h, t], v=v[h, t], q=q[h, t], b=b[h, t], w=w[h, t], g=g[h, t]) for t in range(L)]
        O_h, states = rules.run_sequence_reference(RuleKind.GDR2, toks, s0[h])
        assert np.array_equal(O[h], O_h)
        assert np.array_equal(S[h], states[-1])


# -- objective view ------------------------------------------------------------------

def test_objective_zero_at_rest():
    rng = make_rng(12)
    Sb = rng.normal(size=(3, 2))
    assert rules.online_objective(Sb, Sb, np.zeros(3), rng.normal(size=3), rng.normal(size=2)) == 0.0


@given(seed=st.integers(0, 2**31 - 1), dk=st.integers(1, 8), dv=st.integers(1, 8), neg=st.booleans())
def test_property_update_minimizes_objective(seed, dk, dv, neg):
    rng = make_rng(seed)
    S, k, v = rng.normal(size=(dk, dv)), unit(rng, dk), rng.normal(size=dv)
    b = rng.uniform(0, 2.0 if neg else 1.0, size=dk)
    w, a = rng.uniform(size=dv), rng.uniform(0.01, 1.0, size=dk)
    S_new = gdr2(S, k, v, b, w, a, neg_eig=neg)
    Sb = a[:, None] * S
    grad = rules.online_objective_grad(S_new, Sb, k, b * k, w * v)
    assert np.max(np.abs(grad)) <= 1e-12


def test_objective_gradient_matches_finite_differences():
    rng = make_rng(13)
    dk, dv, h = 4, 3, 1e-5
    S, Sb = rng.normal(size=(dk, dv)), rng.normal(size=(dk, dv))
    k, e, z = rng.normal(size=dk), rng.normal(size=dk), rng.normal(size=dv)
    analytic = rules.online_objective_grad(S, Sb, k, e, z)
    fd = np.zeros_like(S)
    for idx in np.ndindex(S.shape):
        up, down = S.copy(), S.copy()
        up[idx] += h
        down[idx] -= h
        fd[idx] = (rules.online_objective(up, Sb, k, e, z) - rules.online_objective(down, Sb, k, e, z)) / (2 * h)
    assert np.max(np.abs(analytic - fd)) / np.max(np.abs(fd)) <= 1e-7


def test_projector_overwrite():
    rng = make_rng(14)
    for _ in range(10):
        S, k, v = rng.normal(size=(6, 4)), unit(rng, 6), rng.normal(size=4)
        out = gdr2(S, k, v, np.ones(6), np.ones(4), np.ones(6))
        assert np.max(np.abs(rules.read_output(out, k) - v)) <= 1e-12


# -- contracts ----------------------------------------------------------------------

def test_gate_ranges_are_errors_not_clamps():
    S, k, v = np.zeros((2, 2)), np.array([1.0, 0.0]), np.ones(2)
    with pytest.raises(ContractError):
        gdr2(S, k, v, np.array([1.5, 0.0]), np.ones(2), np.ones(2))
    with pytest.raises(ContractError):
        gdr2(S, k, v, np.ones(2), np.array([-0.1, 0.0]), np.ones(2))
    with pytest.raises(ContractError):
        gdr2(S, k, v, np.ones(2), np.ones(2), np.array([0.0, 1.0]))
    with pytest.raises(ContractError):
        rules.step_deltanet(S, k, v, 1.2)


def test_neg_eig_widens_erase_range():
    S, k, v = np.eye(2), np.array([1.0, 0.0]), np.zeros(2)
    out = gdr2(S, k, v, np.array([2.0, 2.0]), np.zeros(2), np.ones(2), neg_eig=True)
    # erase factor I - 2 k k^T reflects the key direction
    assert np.array_equal(out, [[-1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ContractError):
        gdr2(S, k, v, np.array([2.1, 0.0]), np.zeros(2), np.ones(2), neg_eig=True)


def test_neg_eig_in_range_is_bitwise_identical():
    rng = make_rng(15)
    S, k, v = rng.normal(size=(4, 3)), unit(rng, 4), rng.normal(size=3)
    b, w, a = rng.uniform(size=4), rng.uniform(size=3), rng.uniform(0.5, 1, size=4)
    assert np.array_equal(gdr2(S, k, v, b, w, a, neg_eig=True), gdr2(S, k, v, b, w, a))


def test_shape_errors():
    with pytest.raises(DimensionError):
        rules.step_linear_attention(np.zeros((3, 2)), np.ones(2), np.ones(2))
    with pytest.raises(DimensionError):
        rules.read_output(np.zeros((3, 2)), np.ones(2))
    with pytest.raises(DimensionError):
        rules.step_kda(np.zeros((2, 2)), np.ones(2), np.ones(2), np.ones(3), 0.5)
