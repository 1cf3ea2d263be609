import numpy as np
import pytest
from sklearn.base import clone

from ckbsim.ckb import (CKBNetwork, CKBModel, CKBRegressor, CKBStore, ChannelKnowledge,
                        channel_to_target, generate_channel_knowledge, heldout_mse,
                        perturb_knowledge, predict_network, sample_features, sample_targets,
                        target_to_channel, train_ckb)
from ckbsim.datastore import load_checkpoint, save_checkpoint
from ckbsim.errors import ConfigError, DimensionError, KnowledgeLookupError, NumericError
from ckbsim.metrics import mse
from ckbsim.tensorkit import Tensor, precision
from ckbsim.tensorkit import functional as F


def _xy(dataset, idx):
    samples, manifest = dataset
    chosen = [samples[i] for i in idx]
    return sample_features(chosen, manifest), sample_targets(chosen, manifest.c_h)


def test_zero_head_gives_zero_knowledge(small_dataset):
    samples, manifest = small_dataset
    X, _ = _xy(small_dataset, range(4))
    net = CKBNetwork(np.random.default_rng(0))
    pred = predict_network(net, X)
    assert pred.shape == (4, 512) and np.all(pred == 0)
    model = CKBModel(CKBRegressor(), manifest.c_h)
    model.regressor.network_ = net
    ks = generate_channel_knowledge(model, samples[:4], manifest)
    assert all(k.H_ne.shape == (16, 16) and np.all(k.H_ne == 0) for k in ks)


def test_feature_layout(small_dataset):
    samples, manifest = small_dataset
    X = sample_features(samples[:3], manifest)
    assert X.shape == (3, 6 + 1856 + 28)
    assert np.allclose(X[:, -28:].sum(axis=1), 1, atol=1e-6) or np.all(X[:, -28:].sum(1) <= 1)
    stored = sample_features(samples[:3], manifest, radius="stored")
    adaptive = sample_features(samples[:3], manifest, radius="adaptive")
    assert np.allclose(stored, adaptive, atol=1e-7)
    merged = sample_features(samples[:3], manifest, radius=20, z_eff=4)
    assert merged.shape == (3, 6 + 1856 + 4)
    no_loc = sample_features(samples[:3], manifest, use_location=False)
    assert np.all(no_loc[:, :6] == 0)


def test_dimension_mismatch(small_dataset):
    X, _ = _xy(small_dataset, range(2))
    net = CKBNetwork(np.random.default_rng(0))
    with pytest.raises(DimensionError):
        net.forward_features(X[:, :-1])


def test_normalization_round_trip(small_dataset):
    samples, manifest = small_dataset
    for s in samples[:5]:
        y = channel_to_target(s.H, manifest.c_h)
        assert y.shape == (512,)
        assert np.array_equal(target_to_channel(y, manifest.c_h), s.H.astype(np.complex128))
    assert y[0] == s.H[0, 0].real / manifest.c_h and y[1] == s.H[0, 0].imag / manifest.c_h


def test_overfit_one_sample(small_dataset):
    samples, manifest = small_dataset
    X, y = _xy(small_dataset, [5, 5])  # one sample, batch statistics need two rows
    reg = CKBRegressor(epochs=400, patience=None, max_steps=400).fit(X, y)
    model = CKBModel(reg, manifest.c_h)
    h_ne = model.generate([samples[5]], manifest)[0]
    err = mse(h_ne / manifest.c_h, samples[5].H / manifest.c_h)
    assert err <= 1e-6


@pytest.mark.slow
def test_overfit_eight_samples(small_dataset):
    X, y = _xy(small_dataset, range(8))
    reg = CKBRegressor(epochs=2000, batch_size=8, patience=None, max_steps=2000).fit(X, y)
    assert len(reg.history_) == 2000
    assert reg.history_[-1][1] <= 1e-4


def test_loss_matches_metric(small_dataset):
    X, y = _xy(small_dataset, range(6))
    net = CKBNetwork(np.random.default_rng(1))
    net.head.weight.data[:] = np.random.default_rng(2).standard_normal(
        net.head.weight.shape).astype(net.head.weight.data.dtype)
    net.train()
    pred = net.forward_features(X)
    loss = F.mse_loss(pred, Tensor(y))
    assert abs(float(loss.data) - mse(pred.data.astype(np.float64), y)) <= 1e-6 * max(
        1.0, float(loss.data))


def test_monotone_overfit_small_lr(small_dataset):
    X, y = _xy(small_dataset, [2, 9])
    reg = CKBRegressor(epochs=60, lr=1e-4, patience=None).fit(X, y)
    train = [h[1] for h in reg.history_]
    assert all(b <= a for a, b in zip(train, train[1:]))


def test_deterministic_training(small_dataset):
    X, y = _xy(small_dataset, range(12))
    a = CKBRegressor(epochs=3, batch_size=4).fit(X, y)
    b = CKBRegressor(epochs=3, batch_size=4).fit(X, y)
    assert a.history_ == b.history_
    assert np.array_equal(a.predict(X), b.predict(X))
    c = CKBRegressor(epochs=3, batch_size=4, seed=7).fit(X, y)
    assert c.history_ != a.history_


def test_sklearn_api():
    reg = CKBRegressor(fusion="linear", epochs=5)
    twin = clone(reg)
    assert twin.get_params() == reg.get_params()
    assert twin.get_params()["fusion"] == "linear"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_reports_step(small_dataset):
    X, y = _xy(small_dataset, range(4))
    with pytest.raises(NumericError, match=r"step \d+"):
        CKBRegressor(epochs=20, lr=1e30, patience=None).fit(X, y)


def test_resume_continues_identically(small_dataset, tmp_path):
    X, y = _xy(small_dataset, range(12))
    Xv, yv = _xy(small_dataset, range(12, 16))
    with precision(np.float64):
        full = CKBRegressor(epochs=6, batch_size=4, patience=None).fit(X, y, eval_set=(Xv, yv))
        first = CKBRegressor(epochs=3, batch_size=4, patience=None).fit(X, y, eval_set=(Xv, yv))
        params, meta = first.training_state()
        save_checkpoint(params, tmp_path / "ckb.ckpt", meta)
        resumed = CKBRegressor(epochs=6, batch_size=4, patience=None).fit(
            X, y, eval_set=(Xv, yv),
            resume=load_checkpoint(tmp_path / "ckb.ckpt", with_meta=True))
    assert resumed.history_ == full.history_
    assert np.array_equal(resumed.predict(X), full.predict(X))


def test_early_stopping_restores_best(small_dataset):
    X, y = _xy(small_dataset, range(12))
    Xv, yv = _xy(small_dataset, range(12, 18))
    reg = CKBRegressor(epochs=40, batch_size=4, patience=3).fit(X, y, eval_set=(Xv, yv))
    vals = [h[2] for h in reg.history_]
    assert len(vals) < 40 or min(vals) == reg.best_score_
    assert reg.best_score_ == min(vals)
    assert np.isclose(np.mean((reg.predict(Xv) - yv) ** 2), reg.best_score_, rtol=1e-5)


def test_train_ckb(small_dataset):
    samples, manifest = small_dataset
    model, history, (train, test) = train_ckb(samples, manifest, epochs=2)
    assert (len(train), len(test)) == (18, 6)
    assert [h[0] for h in history] == [1, 2]
    assert np.isfinite(heldout_mse(model, test, manifest))
    with pytest.raises(ConfigError):
        train_ckb(samples[:7], manifest)


def test_store(small_dataset):
    samples, manifest = small_dataset
    model, _, (train, test) = train_ckb(samples, manifest, epochs=1)
    store = CKBStore.build(model, train, manifest)
    assert len(store) == len(train)
    assert all(s.index in store for s in train)
    a = store.lookup(train[0].index)
    assert store.lookup(train[0].index) is a
    assert np.array_equal(a.H_ne, store.lookup(train[0].index).H_ne)
    novel = store.lookup(test[0].index, test[0])
    assert np.array_equal(novel.H_ne, model.generate([test[0]], manifest)[0].astype(np.complex64))
    bare = CKBStore(store.entries)
    with pytest.raises(KnowledgeLookupError):
        bare.lookup(test[0].index)


def test_knowledge_validation():
    with pytest.raises(ConfigError):
        ChannelKnowledge(np.zeros((2, 2)), "guessed")
    with pytest.raises(ConfigError):
        ChannelKnowledge(np.full((2, 2), np.nan))


def test_perturb_zero():
    H = np.random.default_rng(0).standard_normal((16, 16)) + 0j
    k = perturb_knowledge(H, 0.0)
    assert np.array_equal(k.H_ne, H) and k.source == "perturbed"
    with pytest.raises(ConfigError):
        perturb_knowledge(H, -1)


def test_perturb_ratio():
    rng = np.random.default_rng(1)
    ratios = []
    for i in range(100):
        H = rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16))
        E = perturb_knowledge(H, 1e-2, seed=i).H_ne - H
        ratios.append(np.sqrt(np.mean(np.abs(E) ** 2) / np.mean(np.abs(H) ** 2)))
    assert abs(np.mean(ratios) - 1e-2) <= 0.05 * 1e-2


def test_perturb_seeds():
    H = np.ones((16, 16), dtype=np.complex128)
    a = perturb_knowledge(H, 0.1, seed=1).H_ne - H
    b = perturb_knowledge(H, 0.1, seed=2).H_ne - H
    assert not np.array_equal(a, b)
    assert abs(np.std(a) - np.std(b)) < 0.2 * np.std(a)
    assert np.array_equal(a, perturb_knowledge(H, 0.1, seed=1).H_ne - H)
