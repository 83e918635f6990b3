import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpr.features import ExtractorParams, PyramidSpec, extract, pyramid_pool
from fpr.foreground import ForegroundClassifier
from fpr.reconstruction import (
    GalleryFactor,
    NonDifferentiableError,
    RidgeParams,
    avg_distance,
    distance_gradients,
    distance_matrix,
    fpr_distance,
    fpr_match,
    reconstruct,
    residual_errors,
    ridge_coefficients,
)
from fpr.tensor_io import read_tensor
from oracles import central_diff, residual_norms_loop, ridge_gd

MIN_NORM = RidgeParams(0.0, allow_min_norm=True)

# Nesterov gradient-descent oracle on the seed-3 instance (6x5 Y, 6x3 X, beta 0.01)
ORACLE_W_SEED3 = np.array([
    [-0.31452446111066873, 0.5713544550225695, 0.7736511519521843],
    [0.01940202080164216, 0.1880478361202615, 0.078578229473183],
    [2.171074435101891, -2.66389848400481, 0.4032866872011832],
    [0.7737137582510561, -0.21258101637372742, 0.8695256509758141],
    [0.6866105617048031, -0.05895070016680028, 0.5253669028504032],
])
ORACLE_E_SEED3 = np.array([2.4728590227180653, 0.06449024694507723, 0.43176539128316743])

# central differences through the oracle solver, seed-9 instance (4x3 X, 4x5 Y, beta 0.01)
FD_DX_SEED9 = np.array([
    [-0.05434334294784903, 0.07783318000109674, -0.03324751726707653],
    [0.11071898060321937, -0.15876516118173978, 0.06779252987865192],
    [0.04731562684157086, -0.06771138180983183, 0.02893128831504832],
    [0.10327795832709706, -0.148236378336164, 0.06327669503924938],
])
FD_DY_SEED9_ROW1 = np.array(
    [0.5033985959107534, 0.23166389619688751, -0.09699186164779937, 1.2543450884916485, 0.8582854643612857]
)


def seed3():
    rng = np.random.default_rng(3)
    Y = rng.standard_normal((6, 5))
    X = rng.standard_normal((6, 3))
    return X, Y


def seed9():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((4, 3))
    Y = rng.standard_normal((4, 5))
    H = rng.uniform(0.2, 1, 3)
    return X, Y, H


def test_scalar_normal_equation():
    Y = np.array([[1.0], [0.0]])
    X = np.array([[2.0], [0.0]])
    assert ridge_coefficients(X, Y, MIN_NORM).tolist() == [[2.0]]
    W = ridge_coefficients(X, Y, RidgeParams(1.0))
    np.testing.assert_allclose(W, [[1.0]], rtol=0, atol=1e-15)
    np.testing.assert_allclose(residual_errors(X, Y, W), [1.0], rtol=0, atol=1e-15)


def test_seed3_matches_frozen_oracle():
    X, Y = seed3()
    W = ridge_coefficients(X, Y, RidgeParams(0.01))
    assert np.max(np.abs(W - ORACLE_W_SEED3)) < 1e-4
    np.testing.assert_allclose(W, ORACLE_W_SEED3, rtol=0, atol=1e-9)
    e = residual_errors(X, Y, W)
    assert np.max(np.abs(e - ORACLE_E_SEED3)) < 1e-6
    assert avg_distance(e) == pytest.approx(sum(e) / 3, rel=1e-15)


def test_seed3_matches_live_oracle():
    X, Y = seed3()
    W = ridge_gd(X, Y, 0.01)
    np.testing.assert_allclose(ridge_coefficients(X, Y, RidgeParams(0.01)), W, atol=1e-9)
    np.testing.assert_allclose(residual_norms_loop(X, Y, W), ORACLE_E_SEED3, atol=1e-9)


def test_factor_residual_matches_primal_form():
    X, Y = seed3()
    f = GalleryFactor(Y, RidgeParams(0.01))
    e_dual = np.linalg.norm(f.residual(X), axis=0)
    e_primal = residual_errors(X, Y, f.coefficients(X))
    np.testing.assert_allclose(e_dual, e_primal, rtol=1e-12)


def test_ridge_params_validation():
    with pytest.raises(ValueError):
        RidgeParams(0.0)
    with pytest.raises(ValueError):
        RidgeParams(-1.0)
    assert RidgeParams().beta == 0.01


def test_non_finite_rejected():
    X, Y = seed3()
    X[0, 0] = np.nan
    with pytest.raises(ValueError):
        ridge_coefficients(X, Y)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        ridge_coefficients(np.ones((3, 2)), np.ones((4, 2)))
    with pytest.raises(ValueError):
        residual_errors(np.ones((3, 2)), np.ones((3, 2)), np.ones((3, 2)))


def test_avg_distance():
    assert avg_distance([1, 2]) == 1.5
    assert avg_distance([0, 0, 0]) == 0
    with pytest.raises(ValueError):
        avg_distance([])


def test_fpr_distance_examples():
    assert fpr_distance([1, 2], [0.5, 0.5]) == 1.5
    assert fpr_distance([5, 1], [0, 1]) == 1
    e = [0.3, 1.7, 2.2]
    assert fpr_distance(e, [1, 1, 1], normalize=True) == pytest.approx(avg_distance(e), rel=1e-15)
    with pytest.raises(ValueError):
        fpr_distance([1, 2], [1])
    with pytest.raises(ValueError):
        fpr_distance([1, 2], [0, 0], normalize=True)
    with pytest.raises(ValueError):
        fpr_distance([1, 2], [0.5, 1.5])


def _instance(seed, d=None, n=None, m=None):
    rng = np.random.default_rng(seed)
    d = d or int(rng.integers(1, 9))
    n = n or int(rng.integers(1, 11))
    m = m or int(rng.integers(1, 11))
    return rng.standard_normal((d, n)), rng.standard_normal((d, m)), rng


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1e-3, 1e-2, 1e-1, 1.0]))
def test_normal_equation_residual(seed, beta):
    X, Y, _ = _instance(seed)
    W = ridge_coefficients(X, Y, RidgeParams(beta))
    lhs = (Y.T @ Y + beta * np.eye(Y.shape[1])) @ W
    rhs = Y.T @ X
    assert np.max(np.abs(lhs - rhs)) / max(1.0, np.max(np.abs(rhs))) < 1e-10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_exact_recovery(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 9))
    m = int(rng.integers(1, 11))
    Y = rng.standard_normal((d, m))
    X = Y @ rng.standard_normal((m, int(rng.integers(1, 11))))
    W = ridge_coefficients(X, Y, MIN_NORM)
    assert np.max(residual_errors(X, Y, W)) < 1e-8
    assert np.max(reconstruct(X, GalleryFactor(Y, MIN_NORM)).errors) < 1e-8


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ridge_monotonicity(seed):
    X, Y, _ = _instance(seed)
    grid = [0.0, 1e-3, 1e-2, 1e-1, 1.0]
    errs = [GalleryFactor(Y, RidgeParams(b, allow_min_norm=True)).residual(X) for b in grid]
    errs = [np.linalg.norm(r, axis=0) for r in errs]
    for lo, hi in zip(errs, errs[1:]):
        assert np.all(lo <= hi + 1e-12 * (1 + np.abs(hi)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_one_hot_weight_picks_error(seed):
    X, Y, rng = _instance(seed)
    res = reconstruct(X, GalleryFactor(Y))
    m = int(rng.integers(X.shape[1]))
    h = np.zeros(X.shape[1])
    h[m] = 1.0
    assert fpr_distance(res.errors, h) == res.errors[m]


def test_squared_mode():
    X, Y = seed3()
    f = GalleryFactor(Y)
    np.testing.assert_allclose(reconstruct(X, f, squared=True).errors, reconstruct(X, f).errors ** 2)


def test_self_match_min_norm():
    fmap = np.random.default_rng(0).standard_normal((5, 3, 4))
    assert fpr_match(fmap, fmap, ridge=MIN_NORM).distance < 1e-8


def test_alignment_free_sizes():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((4, 4, 6))
    b = rng.standard_normal((6, 2, 6))
    for res in (fpr_match(a, b), fpr_match(b, a)):
        assert np.isfinite(res.distance) and res.distance >= 0
        assert np.all(res.errors >= 0)
    assert fpr_match(a, b).coefficients.shape == (pyramid_pool(b).n, pyramid_pool(a).n)


def test_weighted_match_uses_classifier():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((4, 4, 3)), rng.standard_normal((3, 5, 3))
    res = fpr_match(a, b, classifier=ForegroundClassifier.zeros(3))
    np.testing.assert_allclose(res.weights_used, 0.5)
    assert res.distance == pytest.approx(0.5 * np.sum(res.errors))
    unweighted = fpr_match(a, b)
    assert unweighted.distance == pytest.approx(np.mean(unweighted.errors))
    assert set(res.to_dict()) == {"distance", "errors", "weights"}


def test_pair_ranking_on_clean_gallery(manifests, measurement):
    """Untrained extractor: same-identity pairs beat impostor pairs in most draws."""
    from fpr.training import TrainState

    state = TrainState.initial(42)
    gallery = manifests["gallery"]
    groups = gallery.by_identity()
    ids = list(groups)
    rng = np.random.default_rng(42)
    feats = {}

    def feat(i):
        if i not in feats:
            feats[i] = extract(read_tensor(gallery.entries[i].tensor_path), state.extractor)
        return feats[i]

    wins = 0
    n = measurement["pair_trials"]
    for _ in range(n):
        a, b = rng.choice(len(ids), 2, replace=False)
        i, j = rng.choice(groups[ids[a]], 2, replace=False)
        k = rng.choice(groups[ids[b]])
        wins += fpr_match(feat(i), feat(j)).distance < fpr_match(feat(i), feat(k)).distance
    assert wins / n >= measurement["pair_threshold"]
    assert wins / n == measurement["pair_same_closer"]


def test_grad_dh_is_errors():
    Y = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 2.0]])
    g = distance_gradients(X, Y, [0.3, 0.7], MIN_NORM)
    np.testing.assert_allclose(g.dH, [1.0, 2.0])
    # X orthogonal to span(Y): residual is X itself
    np.testing.assert_allclose(g.dX, np.array([[0, 0], [0, 0], [0.3, 0.7]]), atol=1e-15)


def test_grad_seed9_against_frozen_fd():
    X, Y, H = seed9()
    g = distance_gradients(X, Y, H, RidgeParams(0.01))
    assert np.max(np.abs(g.dX - FD_DX_SEED9) / np.abs(FD_DX_SEED9)) < 1e-4
    assert np.max(np.abs(g.dY[1] - FD_DY_SEED9_ROW1) / np.abs(FD_DY_SEED9_ROW1)) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_grad_against_live_fd(seed):
    X, Y, rng = _instance(seed + 100)
    H = rng.uniform(0, 1, X.shape[1])
    ridge = RidgeParams(0.01)
    g = distance_gradients(X, Y, H, ridge)

    def D(Xv, Yv):
        return float(H @ reconstruct(Xv, GalleryFactor(Yv, ridge)).errors)

    for analytic, numeric in ((g.dX, central_diff(lambda x: D(x, Y), X)),
                              (g.dY, central_diff(lambda y: D(X, y), Y))):
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        assert np.max(np.abs(analytic - numeric) / scale) < 1e-4


def test_grad_kink_reported_and_clamped():
    Y = np.eye(2)
    X = np.array([[1.0, 0.5], [0.0, 0.5]])
    with pytest.raises(NonDifferentiableError) as info:
        distance_gradients(X, Y, [1.0, 1.0], MIN_NORM)
    assert info.value.locations == [0, 1]
    g = distance_gradients(X, Y, [1.0, 1.0], MIN_NORM, clamp=True)
    assert np.all(np.isfinite(g.dX))


def test_distance_matrix_matches_pairwise():
    rng = np.random.default_rng(4)
    probes = [rng.standard_normal((3, n)) for n in (2, 5, 4)]
    gals = [rng.standard_normal((3, m)) for m in (3, 6)]
    hs = [rng.uniform(0, 1, p.shape[1]) for p in probes]
    D = distance_matrix(probes, [GalleryFactor(g) for g in gals], hs)
    for i, (p, h) in enumerate(zip(probes, hs)):
        for j, g in enumerate(gals):
            assert D[i, j] == pytest.approx(reconstruct(p, GalleryFactor(g), h).distance, rel=1e-12)


def test_extractor_features_match_path():
    params = ExtractorParams.random(np.random.default_rng(0), 4, 4, 2, 5)
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((12, 8)), rng.standard_normal((10, 8))
    fa, fb = extract(a, params, PyramidSpec()), extract(b, params, PyramidSpec())
    assert fpr_match(fa, fb).distance >= 0
