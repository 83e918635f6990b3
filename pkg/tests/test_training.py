import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpr.features import PyramidSpec, pool_backward, pyramid_pool
from fpr.reconstruction import GalleryFactor, RidgeParams, distance_gradients, reconstruct
from fpr.tensor_io import DatasetManifest, ManifestEntry, SynthConfig, generate_synthetic, load_manifest
from fpr.training import (
    TrainConfig,
    TrainingDiverged,
    TrainState,
    batch_hard_triplet,
    get_params,
    grad_check,
    history_csv,
    load_checkpoint,
    load_samples,
    num_extractor_params,
    param_names,
    pk_sample,
    save_checkpoint,
    toy_batch,
    total_loss,
    train_toy,
)
from oracles import triplet_brute


def fake_manifest(n_ids, per_id):
    entries = [ManifestEntry(f"{i}_{k}.fprt", i, k % 2) for i in range(n_ids) for k in range(per_id)]
    return DatasetManifest(entries, "train")


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.P, cfg.K, cfg.alpha, cfg.tau, cfg.beta, cfg.epochs) == (16, 4, 0.02, 0.35, 0.01, 200)
    for bad in (dict(P=1), dict(K=1), dict(margin=0), dict(alpha=-1), dict(beta=0), dict(learning_rate=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


def test_pk_full_coverage():
    m = fake_manifest(16, 4)
    batch = pk_sample(m, 16, 4, np.random.default_rng(0))
    assert len(batch) == 64
    assert sorted(batch) == list(range(64))


def test_pk_small_and_deterministic():
    m = fake_manifest(5, 3)
    a = pk_sample(m, 2, 2, np.random.default_rng(9))
    b = pk_sample(m, 2, 2, np.random.default_rng(9))
    assert a == b and len(a) == 4
    ids = [m.entries[i].identity for i in a]
    assert len(set(ids)) == 2 and ids[0] == ids[1] and ids[2] == ids[3]


def test_pk_replacement_and_errors():
    m = fake_manifest(3, 2)
    batch = pk_sample(m, 3, 4, np.random.default_rng(0))
    assert len(batch) == 12
    with pytest.raises(ValueError):
        pk_sample(m, 4, 2, np.random.default_rng(0))


def test_triplet_margin_satisfied():
    ids = [0, 0, 1, 1]
    d = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0]], float)
    res = batch_hard_triplet(d, ids, 0.3)
    assert res.loss == 0 and not res.grad.any()


def test_triplet_single_anchor_arithmetic():
    ids = [0, 0, 1, 1]
    same = np.equal.outer(ids, ids)
    d = np.where(same, 0.0, 10.0)
    d[0, 1], d[0, 2], d[0, 3] = 2.0, 1.0, 5.0
    res = batch_hard_triplet(d, ids, 0.3)
    assert res.loss == pytest.approx(1.3)
    assert res.grad[0, 1] == 1 and res.grad[0, 2] == -1
    assert res.active.tolist() == [True, False, False, False]


def test_triplet_seed11_brute():
    rng = np.random.default_rng(11)
    d = rng.uniform(0, 2, (8, 8))
    ids = [0, 0, 1, 1, 2, 2, 3, 3]
    res = batch_hard_triplet(d, ids, 0.3)
    loss, grad = triplet_brute(d, ids, 0.3)
    assert res.loss == loss
    assert np.array_equal(res.grad, grad)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 4), st.integers(2, 4), st.integers(0, 2**32 - 1), st.booleans())
def test_triplet_equals_brute(P, K, seed, quantize):
    rng = np.random.default_rng(seed)
    n = P * K
    d = rng.uniform(0, 2, (n, n))
    if quantize:
        d = np.round(d * 2) / 2  # force ties
    ids = list(rng.permutation(np.repeat(np.arange(P), K)))
    res = batch_hard_triplet(d, ids, 0.3)
    loss, grad = triplet_brute(d, ids, 0.3)
    assert res.loss == loss
    assert np.array_equal(res.grad, grad)
    # inactive anchors contribute nothing
    assert not res.grad[~res.active].any()


def test_triplet_tie_lowest_index():
    ids = [0, 0, 0, 1, 1, 1]
    d = np.ones((6, 6))
    res = batch_hard_triplet(d, ids, 0.3)
    assert res.hardest_pos[0] == 1 and res.hardest_neg[0] == 3
    assert res.hardest_pos[1] == 0


def test_triplet_validation():
    with pytest.raises(ValueError):
        batch_hard_triplet(np.zeros((3, 3)), [0, 0, 1], 0.3)
    with pytest.raises(ValueError):
        batch_hard_triplet(np.zeros((2, 2)), [0, 0], 0.3)
    with pytest.raises(ValueError):
        batch_hard_triplet(np.full((4, 4), np.nan), [0, 0, 1, 1], 0.3)


@pytest.fixture(scope="module")
def toy13():
    return toy_batch(13)


def test_alpha_zero_total_is_triplet(toy13):
    samples, state = toy13
    res = total_loss(samples, state, TrainConfig(P=2, K=2, alpha=0.0))
    assert res.total == res.triplet


def test_alpha_linearity(toy13):
    samples, state = toy13
    L = {a: total_loss(samples, state, TrainConfig(P=2, K=2, alpha=a)).total for a in (0.0, 0.02, 0.04)}
    assert L[0.04] - L[0.0] == pytest.approx(2 * (L[0.02] - L[0.0]), rel=1e-12)


def test_alpha_gradient_accounting(toy13):
    samples, state = toy13
    g0 = total_loss(samples, state, TrainConfig(P=2, K=2, alpha=0.0)).grad
    g1 = total_loss(samples, state, TrainConfig(P=2, K=2, alpha=0.5)).grad
    n_ext = num_extractor_params(state)
    # with alpha = 0 the classifier still learns through the H path of the triplet loss
    assert np.any(g0[n_ext:] != 0)
    # and the foreground loss contributes exactly linearly in alpha
    g2 = total_loss(samples, state, TrainConfig(P=2, K=2, alpha=1.0)).grad
    np.testing.assert_allclose(g2 - g0, 2 * (g1 - g0), rtol=1e-10, atol=1e-14)


def test_fixed_h_leaves_classifier_untouched(toy13):
    samples, state = toy13
    from fpr.features import extract
    from fpr.foreground import foreground_probs

    hs = [foreground_probs(extract(s.image, state.extractor).columns, state.classifier) for s in samples]
    res = total_loss(samples, state, TrainConfig(P=2, K=2), fixed_h=hs)
    assert not res.grad[num_extractor_params(state):].any()
    assert res.fpg == 0.0


def test_full_path_gradient_seed13(toy13):
    samples, state = toy13
    rep = grad_check(samples, state, TrainConfig(P=2, K=2), n_probes=100, seed=13)
    assert rep.n_checked > 0
    assert rep.max_rel_error < 1e-3


def test_linear_path_gradient_seed7():
    samples, state = toy_batch(7)
    rep = grad_check(samples, state, TrainConfig(P=2, K=2), n_probes=100, seed=7, freeze_h=True)
    assert all(c < num_extractor_params(state) for c in rep.coordinates)
    assert rep.max_rel_error < 1e-6


def test_grad_check_eps_bounds(toy13):
    samples, state = toy13
    for eps in (1e-8, 1e-2):
        with pytest.raises(ValueError):
            grad_check(samples, state, TrainConfig(P=2, K=2), n_probes=1, eps=eps)


def test_dead_path_map_entry():
    """A map entry that loses every max-pool contest has zero analytic and zero FD derivative."""
    rng = np.random.default_rng(21)
    fmap = rng.standard_normal((4, 4, 3))
    spec = PyramidSpec.from_pairs([(2, 2)])
    gal = rng.standard_normal((3, 5))
    ridge = RidgeParams(0.01)
    H = rng.uniform(0.2, 1, 4)

    def D(m):
        return reconstruct(pyramid_pool(m, spec).columns, GalleryFactor(gal, ridge), H).distance

    fs = pyramid_pool(fmap, spec)
    g = distance_gradients(fs.columns, gal, H, ridge)
    grad_map = pool_backward(fs, g.dX)
    chan = np.broadcast_to(np.arange(3)[:, None], fs.argmax.shape)
    winners = {(int(w) // 4, int(w) % 4, int(c)) for w, c in zip(fs.argmax.ravel(), chan.ravel())}
    dead = [(i, j, c) for i in range(4) for j in range(4) for c in range(3) if (i, j, c) not in winners]
    assert dead
    for i, j, c in dead:
        assert grad_map[i, j, c] == 0.0
        plus, minus = fmap.copy(), fmap.copy()
        plus[i, j, c] += 1e-5
        minus[i, j, c] -= 1e-5
        assert (D(plus) - D(minus)) / 2e-5 == 0.0


def test_param_names_align():
    state = TrainState.initial(0, 4, 4, 2, 3)
    assert len(param_names(state)) == get_params(state).size
    assert param_names(state)[0] == "extractor.projection[0, 0]"


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    generate_synthetic(SynthConfig(num_identities=4, images_per_identity=2, occlusion_fraction=0.3, seed=3), out)
    return load_manifest(out / "train.txt")


def test_epochs_zero_is_init(tiny_data):
    cfg = TrainConfig(P=2, K=2, epochs=0, seed=5)
    state = train_toy(tiny_data, cfg)
    init = TrainState.initial(5)
    assert np.array_equal(get_params(state), get_params(init))
    assert state.history == [] and state.epoch == 0


def test_training_deterministic(tiny_data, tmp_path):
    cfg = TrainConfig(P=2, K=2, epochs=3, seed=5)
    a = train_toy(tiny_data, cfg, checkpoint_dir=tmp_path / "a")
    b = train_toy(tiny_data, cfg, checkpoint_dir=tmp_path / "b")
    assert get_params(a).tobytes() == get_params(b).tobytes()
    assert len(a.history) == 3 == a.epoch
    for name in ("extractor_projection.fprt", "classifier_weight.fprt", "loss_history.csv", "meta.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_training_diverges_loudly(tiny_data):
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train_toy(tiny_data, TrainConfig(P=2, K=2, epochs=3, learning_rate=1e150))


def test_training_needs_masks(tmp_path, tiny_data):
    entries = [ManifestEntry(e.tensor_path, e.identity, e.camera) for e in tiny_data.entries]
    with pytest.raises(ValueError, match="mask"):
        train_toy(DatasetManifest(entries), TrainConfig(P=2, K=2, epochs=1))


def test_checkpoint_round_trip(tmp_path):
    state = TrainState.initial(3)
    state.history = [(1.0, 2.0, 1.04), (0.5, 1.5, 0.53)]
    state.epoch = 2
    save_checkpoint(tmp_path, state, "cfg")
    back = load_checkpoint(tmp_path)
    assert back.epoch == 2 and back.history == state.history
    assert np.array_equal(get_params(back), get_params(state))
    assert history_csv(state.history).splitlines()[0] == "epoch,l_tri,l_fpg,l_total"
    meta = (tmp_path / "meta.txt").read_text()
    assert "epoch=2" in meta and "config_sha256=" in meta


def test_desk_training_reduces_loss(trained):
    state, seconds = trained
    assert len(state.history) == 30
    assert state.history[-1][2] < state.history[0][2]
    assert seconds <= 60


def test_load_samples_reads_masks(tiny_data):
    samples = load_samples(tiny_data, [0, 1])
    assert samples[0].mask is not None and samples[0].image.dtype == np.float64
