import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import softmax

from conftest import ellipsoid_mesh, random_rotation
from specssm import descnet
from specssm.fmap import (LossWeights, PairState, TrainConfig, default_tau, grad_pair, history_to_csv, loss_bij,
                          loss_components, loss_iso, loss_orth, loss_point, make_view, prepare_shape, solve_fmap,
                          total_loss, train, training_view)
from specssm.geomcore import DataError, Mesh
from specssm.spectral import cotan_laplacian, eigenbasis

TINY_NET = dict(widths=(8, 8, 8), d_out=8, hops=(1, 2, 3))


def tiny_shape(n=30, axes=(3.0, 2.0, 1.2), m=6):
    mesh = ellipsoid_mesh(n, axes)
    return prepare_shape(mesh, eigenbasis(cotan_laplacian(mesh), m), k=5)


def rotation_nd(rng, m):
    q, r = np.linalg.qr(rng.normal(size=(m, m)))
    return q * np.sign(np.diag(r))


# ------------------------------------------------------------------ solve


@given(st.integers(0, 2**31), st.integers(2, 20))
def test_planted_linear_map_is_recovered(seed, m):
    rng = np.random.default_rng(seed)
    A_i = rng.normal(size=(m, m + 7))
    R = rng.normal(size=(m, m))
    np.testing.assert_allclose(solve_fmap(A_i, R @ A_i, eps=0.0), R, atol=1e-6 * max(1, np.abs(R).max()))


def test_identical_descriptors_give_identity(rng):
    A = rng.normal(size=(20, 40))
    np.testing.assert_allclose(solve_fmap(A, A, eps=0.0), np.eye(20), atol=1e-8)


def test_solution_is_optimal_under_perturbation(rng):
    A_i, A_j = rng.normal(size=(6, 15)), rng.normal(size=(6, 15))
    eps = 0.3
    C = solve_fmap(A_i, A_j, eps)

    def objective(X):
        return np.sum((X @ A_i - A_j) ** 2) + eps * np.sum(X * X)

    base = objective(C)
    for _ in range(100):
        d = rng.normal(size=C.shape)
        assert objective(C + 1e-3 * d / np.linalg.norm(d)) >= base


def test_default_ridge_matches_closed_form(rng):
    A_i, A_j = rng.normal(size=(5, 12)), rng.normal(size=(5, 12))
    eps = 1e-6 * np.trace(A_i @ A_i.T) / 5
    expected = A_j @ A_i.T @ np.linalg.inv(A_i @ A_i.T + eps * np.eye(5))
    np.testing.assert_allclose(solve_fmap(A_i, A_j), expected, rtol=1e-10)


def test_solve_rejects_bad_input():
    with pytest.raises(DataError):
        solve_fmap(np.full((2, 3), np.nan), np.zeros((2, 3)))
    with pytest.raises(DataError):
        solve_fmap(np.ones((2, 3)), np.ones((2, 4)))


# ----------------------------------------------------------------- losses


def test_bijectivity_examples(rng):
    eye = np.eye(2)
    assert loss_bij(eye, eye) == 0
    np.testing.assert_allclose(loss_bij(2 * eye, eye), 2 * np.sqrt(2), rtol=1e-15)
    C = rng.normal(size=(6, 6))
    assert loss_bij(C, np.linalg.inv(C)) < 1e-8


def test_orthogonality_examples(rng):
    Q1, Q2 = rotation_nd(rng, 5), rotation_nd(rng, 5)
    assert loss_orth(Q1, Q2) < 1e-10
    np.testing.assert_allclose(loss_orth(np.zeros((5, 5)), np.zeros((5, 5))), 2 * np.sqrt(5), rtol=1e-15)
    d = 0.1
    C = np.diag([1.0, 1 + d, 1 - d, 1.0])
    direct = np.sqrt(((1 + d) ** 2 - 1) ** 2 + ((1 - d) ** 2 - 1) ** 2)
    np.testing.assert_allclose(loss_orth(C, np.eye(4)), direct, rtol=1e-14)


def test_isometry_examples(rng):
    lam = np.sort(rng.random(5))
    D = np.diag(rng.normal(size=5))
    assert loss_iso(D, D, lam, lam) == 0
    lam_j = np.sort(rng.random(5))
    expected = 2 * np.linalg.norm(lam - lam_j)
    np.testing.assert_allclose(loss_iso(np.eye(5), np.eye(5), lam, lam_j), expected, rtol=1e-14)
    C1, C2 = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    np.testing.assert_allclose(loss_iso(C1, C2, 3 * lam, 3 * lam_j), 3 * loss_iso(C1, C2, lam, lam_j), rtol=1e-13)


def dense_point_loss(C_ij, C_ji, psi_i, psi_j, D_i, D_j, tau):
    """Straightforward dense evaluation of the two soft-map transfer errors."""
    pi_ij = softmax(tau * psi_j @ C_ij @ psi_i.T, axis=1)
    pi_ji = softmax(tau * psi_i @ C_ji @ psi_j.T, axis=1)
    return (np.sum((pi_ij @ D_i - D_j) ** 2) / len(D_j)
            + np.sum((pi_ji @ D_j - D_i) ** 2) / len(D_i))


@given(st.integers(0, 2**31))
@settings(max_examples=20)
def test_point_loss_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    m, n, d = 4, 10, 3
    psi_i, psi_j = rng.normal(size=(n, m)), rng.normal(size=(n + 2, m))
    D_i, D_j = rng.normal(size=(n, d)), rng.normal(size=(n + 2, d))
    C_ij, C_ji = rng.normal(size=(m, m)), rng.normal(size=(m, m))
    tau = default_tau(m)
    np.testing.assert_allclose(loss_point(C_ij, C_ji, psi_i, psi_j, D_i, D_j),
                               dense_point_loss(C_ij, C_ji, psi_i, psi_j, D_i, D_j, tau), rtol=1e-12)


def test_point_loss_zero_cases(rng):
    psi = rotation_nd(rng, 10)[:, :10]
    D = rng.normal(size=(10, 3))
    assert loss_point(np.eye(10), np.eye(10), psi, psi, D, D, tau=1e4) < 1e-12
    const = np.ones((10, 2))
    C = rng.normal(size=(4, 4))
    assert loss_point(C, C, rng.normal(size=(10, 4)), rng.normal(size=(10, 4)), const, const) < 1e-28


def test_losses_are_nonnegative(rng):
    for _ in range(20):
        state = PairState(*rng.normal(size=(2, 4, 4)), np.sort(rng.random(4)), np.sort(rng.random(4)),
                          rng.normal(size=(9, 4)), rng.normal(size=(7, 4)), rng.normal(size=(9, 2)),
                          rng.normal(size=(7, 2)))
        assert all(v >= 0 for v in loss_components(state).values())


def test_total_loss_is_weighted_sum(rng):
    state = PairState(*rng.normal(size=(2, 4, 4)), np.sort(rng.random(4)), np.sort(rng.random(4)),
                      rng.normal(size=(9, 4)), rng.normal(size=(7, 4)), rng.normal(size=(9, 2)),
                      rng.normal(size=(7, 2)))
    comps = loss_components(state)
    np.testing.assert_allclose(total_loss(state), sum(comps.values()), rtol=1e-12)
    assert total_loss(state, LossWeights(1, 0, 0, 0)) == comps["bij"]
    zero = PairState(np.eye(3), np.eye(3), np.ones(3), np.ones(3), np.eye(3), np.eye(3),
                     np.ones((3, 1)), np.ones((3, 1)))
    assert total_loss(zero) < 1e-28


# -------------------------------------------------------------- gradients


@pytest.fixture(scope="module")
def tiny_pair():
    a, b = tiny_shape(30), tiny_shape(28, axes=(2.5, 2.2, 1.0))
    rng = np.random.default_rng(7)
    return (make_view(a, a.mesh.vertices @ random_rotation(rng).T, None, 5),
            make_view(b, b.mesh.vertices, None, 5))


def pair_fd(net, vi, vj, weights, h=1e-5):
    params = net.params()
    out = []
    for pi, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            vals = []
            for s in (1, -1):
                q = [x.copy() for x in params]
                q[pi][idx] += s * h
                F_net = net.with_params(q)
                vals.append(grad_pair(F_net, vi, vj, weights).total)
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        out.append(g)
    return out


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_pair_gradient_matches_central_differences(tiny_pair, seed):
    vi, vj = tiny_pair
    net = descnet.init_weights(**TINY_NET, seed=seed)
    rng = np.random.default_rng(seed)
    net = net.with_params([p + 0.05 * rng.normal(size=p.shape) for p in net.params()])
    weights = LossWeights(1.0, 1.0, 1.0, 1.0)
    res = grad_pair(net, vi, vj, weights)
    numeric = pair_fd(net, vi, vj, weights)
    scale = max(np.abs(g).max() for g in res.grads)
    for a, n in zip(res.grads, numeric):
        np.testing.assert_allclose(a, n, rtol=2e-4, atol=1e-6 * scale)


def test_subsampled_view_gradient_direction(tiny_pair, rng):
    a = tiny_shape(30)
    vi = make_view(a, a.mesh.vertices, np.arange(0, 30, 2), 5)
    vj = tiny_pair[1]
    net = descnet.init_weights(**TINY_NET, seed=3)
    res = grad_pair(net, vi, vj)
    d = [rng.normal(size=p.shape) for p in net.params()]
    h = 1e-6

    def f(t):
        return grad_pair(net.with_params([p + t * q for p, q in zip(net.params(), d)]), vi, vj).total

    np.testing.assert_allclose(sum(np.sum(g * q) for g, q in zip(res.grads, d)), (f(h) - f(-h)) / (2 * h), rtol=2e-4)


def test_doubling_weights_doubles_gradients(tiny_pair):
    vi, vj = tiny_pair
    net = descnet.init_weights(**TINY_NET, seed=4)
    w = LossWeights(0.5, 0.2, 0.3, 2.0)
    g1 = grad_pair(net, vi, vj, w).grads
    g2 = grad_pair(net, vi, vj, LossWeights(*(2 * x for x in w.as_tuple()))).grads
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(b, 2 * a, rtol=1e-12, atol=1e-300)


def test_identical_views_have_no_bijectivity_signal(tiny_pair):
    vi = tiny_pair[1]
    net = descnet.init_weights(**TINY_NET, seed=5)
    res = grad_pair(net, vi, vi, LossWeights(1, 0, 0, 0), eps=0.0)
    assert res.components["bij"] < 1e-10
    assert max(np.abs(g).max() for g in res.grads) < 1e-6


def test_rotation_leaves_spectrum_unchanged():
    shape = tiny_shape(60)
    rng = np.random.default_rng(0)
    cfg = TrainConfig(n_train=40, rotate=True, deform_sigma=0.0, k=5)
    moved = Mesh(shape.mesh.vertices @ random_rotation(rng).T, shape.mesh.faces)
    a = eigenbasis(cotan_laplacian(moved), 6).evals
    np.testing.assert_allclose(a[1:], shape.basis.evals[1:], rtol=1e-8)
    assert training_view(shape, rng, cfg).evals is shape.basis.evals


# ---------------------------------------------------------------- training


@pytest.fixture(scope="module")
def tiny_dataset():
    return [tiny_shape(60, axes=(3 + 0.2 * i, 2.0, 1.2 - 0.05 * i)) for i in range(4)]


def small_config(**kw):
    base = dict(iterations=6, n_train=40, k=5, widths=(8, 8, 8), d_out=8, lr=1e-2)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_iterations_returns_initial_net(tiny_dataset):
    net = descnet.init_weights(**TINY_NET, seed=2)
    res = train(tiny_dataset, small_config(iterations=0), net=net)
    for a, b in zip(res.net.params(), net.params()):
        np.testing.assert_array_equal(a, b)
    assert res.history.shape == (0, 5)


def test_training_is_deterministic(tiny_dataset):
    a = train(tiny_dataset, small_config(seed=3))
    b = train(tiny_dataset, small_config(seed=3))
    np.testing.assert_array_equal(a.history, b.history)
    for pa, pb in zip(a.net.params(), b.net.params()):
        np.testing.assert_array_equal(pa, pb)
    c = train(tiny_dataset, small_config(seed=4))
    assert not np.array_equal(a.history, c.history)


def test_training_needs_two_shapes(tiny_dataset):
    with pytest.raises(DataError):
        train(tiny_dataset[:1], small_config())


def test_history_csv_header(tiny_dataset):
    res = train(tiny_dataset, small_config(iterations=2))
    lines = history_to_csv(res.history).splitlines()
    assert lines[0] == "iteration,total,bij,orth,iso,point" and len(lines) == 3


def test_config_text_roundtrip():
    cfg = TrainConfig(iterations=7, lr=0.02, rotate=False, widths=(4, 5, 6), tau=2.5)
    back = TrainConfig.from_mapping(dict(line.split(" = ") for line in cfg.to_text().splitlines()))
    assert back == cfg
    with pytest.raises(DataError):
        TrainConfig(lr=0)


@pytest.mark.slow
def test_training_lowers_the_loss_on_a_synthetic_family():
    from specssm.benchmark import prepare_family
    from specssm.synth import FamilySpec, generate_family

    meshes = [m.mesh for m in generate_family(FamilySpec(n_shapes=20, resolution=500))]
    shapes = prepare_family(meshes, 20, 10)
    res = train(shapes, TrainConfig(iterations=200, n_train=300, lr=3e-3, widths=(16, 16, 16), d_out=32))
    k = len(res.history) // 10
    assert np.median(res.history[-k:, 0]) < np.median(res.history[:k, 0])
