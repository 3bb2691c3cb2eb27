import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lsmwave.errors import ConfigError, NumericalError
from lsmwave.fem import (
    CoefficientField,
    NormWorkspace,
    assemble_full,
    assemble_mass,
    assemble_stiffness,
    build_pou,
    constant_coefficient,
    element_mass,
    element_stiffness,
    localize,
    nodal_interpolate,
    norm,
    random_coefficient,
)
from lsmwave.mesh import ElementSet, build_hierarchy, coarse_supports


@pytest.fixture
def m1():
    return build_hierarchy(1, 0.5, 0.25)


def test_mass_1d(m1):
    M = assemble_mass(m1).toarray()
    expected = np.array([[1 / 6, 1 / 24, 0], [1 / 24, 1 / 6, 1 / 24], [0, 1 / 24, 1 / 6]])
    assert np.allclose(M, expected, rtol=0, atol=1e-15)


def test_stiffness_1d(m1):
    S = assemble_stiffness(m1, constant_coefficient(m1)).toarray()
    assert np.allclose(S, [[8, -4, 0], [-4, 8, -4], [0, -4, 8]], rtol=0, atol=1e-13)


def test_element_matrices_2d():
    h = 0.125
    ref = np.array([[4, 2, 2, 1], [2, 4, 1, 2], [2, 1, 4, 2], [1, 2, 2, 4]]) * h * h / 36
    assert np.allclose(element_mass(2, h), ref, rtol=1e-15)
    k = element_stiffness(2, h)
    assert np.allclose(np.diag(k), 2 / 3)
    # local nodes: 0=(0,0) 1=(1,0) 2=(0,1) 3=(1,1)
    assert np.isclose(k[0, 1], -1 / 6) and np.isclose(k[0, 2], -1 / 6)
    assert np.isclose(k[0, 3], -1 / 3)


def test_mass_row_sums_equal_measure():
    m = build_hierarchy(2, 0.25, 0.125)
    M, _ = assemble_full(m)
    assert np.isclose(M.sum(), 1.0, rtol=1e-14)


def test_stiffness_scales_with_coefficient():
    m = build_hierarchy(2, 0.25, 0.125)
    S1 = assemble_stiffness(m, constant_coefficient(m, 1.0))
    S3 = assemble_stiffness(m, constant_coefficient(m, 3.0))
    assert np.array_equal((3.0 * S1).toarray(), S3.toarray())


def test_exact_symmetry():
    m = build_hierarchy(2, 0.25, 2 ** -5)
    A = random_coefficient(m, seed=3, eps_A=2 ** -3, alpha=1.0, beta=8.0)
    for K in (assemble_mass(m), assemble_stiffness(m, A)):
        assert (K != K.T).nnz == 0


def test_stiffness_kills_constants_away_from_boundary():
    m = build_hierarchy(2, 0.25, 2 ** -4)
    S = assemble_stiffness(m, constant_coefficient(m))
    r = S @ np.ones(S.shape[0])
    g = m.node_grid_index[m.free_nodes]
    far = np.all((g >= 2) & (g <= m.n_fine - 2), axis=1)
    assert np.max(np.abs(r[far])) <= 1e-12


def test_stiffness_spectral_bounds():
    m = build_hierarchy(2, 0.25, 2 ** -4)
    A = random_coefficient(m, seed=7, eps_A=2 ** -3, alpha=0.5, beta=4.0)
    S1 = assemble_stiffness(m, constant_coefficient(m))
    SA = assemble_stiffness(m, A)
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.standard_normal(S1.shape[0])
        q1, qa = x @ (S1 @ x), x @ (SA @ x)
        assert qa >= 0
        assert 0.5 * q1 * (1 - 1e-12) <= qa <= 4.0 * q1 * (1 + 1e-12)


def test_empty_region_rejected():
    m = build_hierarchy(2, 0.25, 0.125)
    with pytest.raises(ConfigError):
        assemble_mass(m, ElementSet(m, [0]))


def test_coefficient_validation():
    with pytest.raises(ConfigError):
        CoefficientField(np.array([0.5, 2.0]), 1.0, 2.0)
    with pytest.raises(ConfigError):
        CoefficientField(np.array([1.0]), 0.0, 2.0)


def test_random_coefficient_deterministic_and_blocky():
    m = build_hierarchy(2, 2 ** -4, 2 ** -8)
    A = random_coefficient(m, seed=5, eps_A=2 ** -5, alpha=1.0, beta=8.0)
    B = random_coefficient(m, seed=5, eps_A=2 ** -5, alpha=1.0, beta=8.0)
    assert np.array_equal(A.values, B.values)
    grid = A.values.reshape(m.element_shape)
    blocks = grid.reshape(32, 8, 32, 8)
    assert np.all(blocks == blocks[:, :1, :, :1])
    assert A.values.min() >= 1.0 and A.values.max() <= 8.0


def test_random_coefficient_degenerate_and_misaligned():
    m = build_hierarchy(1, 0.25, 2 ** -5)
    A = random_coefficient(m, seed=1, eps_A=2 ** -3, alpha=2.0, beta=2.0)
    assert np.all(A.values == 2.0)
    with pytest.raises(ConfigError):
        random_coefficient(m, seed=1, eps_A=2 ** -6, alpha=1.0, beta=2.0)


def test_coefficient_roundtrip(tmp_path):
    m = build_hierarchy(2, 0.25, 2 ** -4)
    A = random_coefficient(m, seed=2, eps_A=2 ** -3, alpha=1.0, beta=3.0)
    A.save_csv(tmp_path / "a.csv")
    A.save_binary(tmp_path / "a.bin")
    assert np.array_equal(CoefficientField.load_csv(tmp_path / "a.csv", 1.0, 3.0).values, A.values)
    assert np.array_equal(CoefficientField.load_binary(tmp_path / "a.bin", 1.0, 3.0).values, A.values)


def test_interpolation_examples(m1):
    one = nodal_interpolate(m1, lambda x, t: np.ones(len(x)))
    assert list(one) == [0, 1, 1, 1, 0]
    lin = nodal_interpolate(m1, lambda x, t: x[:, 0])
    assert np.allclose(lin[1:4], [0.25, 0.5, 0.75])
    v = np.array([0.0, 0.3, -1.0, 2.0, 0.0])
    assert np.array_equal(nodal_interpolate(m1, lambda x, t: v), v)


def test_interpolation_rejects_nonfinite(m1):
    with pytest.raises(NumericalError):
        nodal_interpolate(m1, lambda x, t: np.full(len(x), np.nan))


def test_pou_1d_values():
    m = build_hierarchy(1, 0.25, 0.125)
    pou = build_pou(m)
    assert len(pou) == 3
    w = pou.weight_vector(1)
    assert w[4] == 1.0 and w[3] == 0.5


def test_pou_single_node_takes_boundary_hats():
    # With one interior coarse node the folded boundary hats make Lambda = 1.
    m = build_hierarchy(1, 0.5, 0.25)
    v = nodal_interpolate(m, lambda x, t: np.ones(len(x)))
    assert list(localize(v, build_pou(m), 0)[1:4]) == [1.0, 1.0, 1.0]


@pytest.mark.parametrize("d,H,h", [(1, 0.25, 2 ** -5), (2, 0.25, 2 ** -4), (2, 0.125, 2 ** -6)])
def test_pou_sums_to_one_and_bounded(d, H, h):
    m = build_hierarchy(d, H, h)
    pou = build_pou(m)
    total = sum(pou.weight_vector(i) for i in range(len(pou)))
    assert np.array_equal(total, np.ones(m.num_nodes))
    for i in range(len(pou)):
        assert pou.weights[i].min() >= 0 and pou.weights[i].max() <= 1
        assert pou.nodes[i].size <= (2 * m.ratio + 1) ** d
        assert np.array_equal(pou.nodes[i], np.sort(pou.nodes[i]))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), d=st.sampled_from([1, 2]))
def test_localize_reconstructs(seed, d):
    m = build_hierarchy(d, 0.25, 2 ** -4)
    pou = build_pou(m)
    v = np.random.default_rng(seed).standard_normal(m.num_nodes)
    v[m.boundary_mask] = 0
    parts = [localize(v, pou, i) for i in range(len(pou))]
    s = np.zeros_like(v)
    for p in parts:
        s += p
    assert np.max(np.abs(s - v)) <= 1e-15 * np.max(np.abs(v))
    for i, p in enumerate(parts):
        outside = np.setdiff1d(np.arange(m.num_nodes), pou.nodes[i])
        assert np.all(p[outside] == 0)


def test_localize_outside_support_is_zero():
    m = build_hierarchy(1, 0.25, 0.125)
    pou = build_pou(m)
    v = np.zeros(m.num_nodes)
    v[7] = 1.0
    assert not np.any(localize(v, pou, 0))


def test_norm_examples(m1):
    ws = NormWorkspace(m1, constant_coefficient(m1), 0.25)
    v = np.array([0, 0, 1.0, 0, 0])
    assert np.isclose(norm(ws, "L2", v) ** 2, 1 / 6)
    assert np.isclose(norm(ws, "a", v) ** 2, 8)
    assert np.isclose(norm(ws, "triple", v) ** 2, 7 / 24)
    assert norm(ws, "triple", np.zeros(5)) == 0


def test_norm_pair_kinds(m1):
    tau = 0.25
    ws = NormWorkspace(m1, constant_coefficient(m1), tau)
    u0 = np.array([0, 0.2, 1.0, -0.3, 0])
    u1 = np.array([0, 0.5, 0.1, 0.7, 0])
    vel, mid = (u1 - u0) / tau, (u0 + u1) / 2
    assert np.isclose(norm(ws, "energy", u0, u1) ** 2, ws.l2_sq(vel) + ws.a_sq(mid))
    assert np.isclose(norm(ws, "Eh", u0, u1) ** 2, ws.triple_sq(vel) + ws.triple_sq(mid) / tau ** 2)
    assert np.isclose(norm(ws, "hT", [u0, u1], 0.5) ** 2, 0.5 * (ws.a_sq(u0) + ws.a_sq(u1)))


def test_norm_errors(m1):
    ws = NormWorkspace(m1, constant_coefficient(m1), 0.25)
    with pytest.raises(ConfigError):
        norm(ws, "L2", np.zeros(4))
    with pytest.raises(ConfigError):
        norm(ws, "bogus", np.zeros(5))


def test_region_norms_are_additive():
    m = build_hierarchy(2, 0.25, 2 ** -4)
    A = random_coefficient(m, seed=4, eps_A=2 ** -3, alpha=1.0, beta=2.0)
    ws = NormWorkspace(m, A, 2 ** -4)
    v = np.random.default_rng(1).standard_normal(m.num_nodes)
    part = coarse_supports(m)[4]
    rest = part.complement()
    for kind in ("L2", "a", "triple"):
        whole = norm(ws, kind, v) ** 2
        split = norm(ws.restrict(part), kind, v) ** 2 + norm(ws.restrict(rest), kind, v) ** 2
        assert np.isclose(whole, split, rtol=1e-13)


def test_norm_matches_matrices():
    m = build_hierarchy(2, 0.25, 2 ** -4)
    A = random_coefficient(m, seed=4, eps_A=2 ** -3, alpha=1.0, beta=2.0)
    M, S = assemble_mass(m), assemble_stiffness(m, A)
    v = np.zeros(m.num_nodes)
    v[m.free_nodes] = np.random.default_rng(2).standard_normal(m.free_nodes.size)
    x = v[m.free_nodes]
    ws = NormWorkspace(m, A, 0.1)
    assert np.isclose(ws.l2_sq(v), x @ M @ x, rtol=1e-13)
    assert np.isclose(ws.a_sq(v), x @ S @ x, rtol=1e-13)


def test_norm_equivalence_constants():
    """min(tau, h/tau) ||v||_Eh <= C1 ||v||_E and ||v||_E <= C2 ||v||_Eh with bounded C1, C2."""
    rng = np.random.default_rng(11)
    c1, c2 = [], []
    for k in (3, 4, 5):
        h = 2.0 ** -k
        for tau in (h / 2, h, 2 * h):
            m = build_hierarchy(2, 0.5, h)
            ws = NormWorkspace(m, constant_coefficient(m), tau)
            for _ in range(10):
                u0, u1 = np.zeros(m.num_nodes), np.zeros(m.num_nodes)
                u0[m.free_nodes] = rng.standard_normal(m.free_nodes.size)
                u1[m.free_nodes] = rng.standard_normal(m.free_nodes.size)
                e, eh = ws.energy(u0, u1), ws.eh(u0, u1)
                c1.append(min(tau, h / tau) * eh / e)
                c2.append(e / eh)
    assert max(c1) < 10 and max(c2) < 10
