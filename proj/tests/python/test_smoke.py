"""Smoke tests for the python bindings: every exported surface gets exercised
once at desk scale."""

import math

import numpy as np
import pytest

import voxrep


def test_paa_window_means():
    series = np.arange(1, 11, dtype=np.float32).reshape(10, 1, 1, 1)
    out = voxrep.paa(series, 5)
    assert out.shape == (2, 1, 1, 1)
    assert out[0, 0, 0, 0] == pytest.approx(3.0)
    assert out[1, 0, 0, 0] == pytest.approx(8.0)

    with pytest.raises(voxrep.VoxrepError):
        voxrep.paa(series, 11)


def test_rescale_and_threshold_endpoints():
    vol = np.array([0.0, 0.04, 0.05, 1.0], dtype=np.float32).reshape(1, 4, 1, 1)
    out = voxrep.rescale_and_threshold(vol).ravel()
    assert out[0] == 0.0
    assert out[1] == 0.0  # below 0.05 is cut
    assert out[2] == pytest.approx(0.05)
    assert out[3] == pytest.approx(1.0)


def test_nifti_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    vol = rng.normal(size=(3, 4, 5, 6)).astype(np.float32)
    path = str(tmp_path / "probe.nii.gz")
    voxrep.save_nifti(path, vol, tr_seconds=0.735)
    back, tr = voxrep.load_nifti(path)
    assert back.shape == (3, 4, 5, 6)
    assert tr == pytest.approx(0.735)
    np.testing.assert_array_equal(back, vol)


def test_kl_closed_forms():
    assert voxrep.kl_divergence([0.0, 0.0], [0.0, 0.0]) == pytest.approx(0.0)
    assert voxrep.kl_divergence([1.0], [0.0]) == pytest.approx(0.5)


def test_metrics():
    assert voxrep.roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == pytest.approx(1.0)
    assert voxrep.mae([0.0], [4.0]) == pytest.approx(4.0)
    assert voxrep.pearson([1.0, 2.0, 3.0], [5.0, 7.0, 9.0]) == pytest.approx(1.0)
    assert voxrep.r2([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0)
    with pytest.raises(voxrep.VoxrepError):
        voxrep.roc_auc([0.5, 0.6], [1, 1])


def test_vae_shapes_training_and_checkpoint(tmp_path):
    rng = np.random.default_rng(11)
    model = voxrep.Vae(latent_dim=6, input_spatial=(8, 8, 8), seed=4,
                       encoder_channels=[4, 8, 8, 16, 16])
    vols = rng.uniform(size=(12, 8, 8, 8)).astype(np.float32)
    mu, log_var = model.encode(vols)
    assert mu.shape == (12, 6)
    assert log_var.shape == (12, 6)
    assert np.isfinite(mu).all()

    recon = model.decode(mu[:2])
    assert recon.shape == (2, 8, 8, 8)

    history = model.train(vols[:9], vols[9:], epochs=3, batch_size=4, lr=1e-3, seed=7)
    assert len(history) == 3
    assert history[-1]["train_total"] < history[0]["train_total"] * 5  # finite and sane

    latents = model.infer_latents(vols[:5])
    assert latents.shape == (5, 6)
    np.testing.assert_array_equal(latents, model.infer_latents(vols[:5]))

    path = str(tmp_path / "model.vae")
    model.save(path)
    again = voxrep.Vae.load(path)
    np.testing.assert_array_equal(again.infer_latents(vols[:5]), latents)

    diff = model.group_difference([latents[:3]], [latents[3:]], quantile=0.8)
    assert diff.shape == (8, 8, 8)
    survivors = np.count_nonzero(diff)
    assert survivors == math.floor(0.2 * 512) + 1


def test_incremental_pca_whitening():
    rng = np.random.default_rng(13)
    basis = rng.normal(size=(5, 30))
    data = rng.normal(size=(200, 5)) @ basis + 0.01 * rng.normal(size=(200, 30)) + 0.5
    model = voxrep.IncrementalPca(4)
    model.partial_fit(data[:100])
    model.partial_fit(data[100:])
    assert model.n_samples_seen == 200
    codes = model.transform_whitened(data)
    assert codes.shape == (200, 4)
    np.testing.assert_allclose(codes.var(axis=0, ddof=1), 1.0, atol=1e-2)


def test_linear_heads_and_knn():
    rng = np.random.default_rng(17)
    x = np.vstack([rng.normal(size=(20, 2)) - 2.5, rng.normal(size=(20, 2)) + 2.5])
    y = [0] * 20 + [1] * 20
    svm = voxrep.train_linear_svm(x, y, c=1.0)
    scores = svm.decision(x)
    assert voxrep.roc_auc(scores.tolist(), y) == pytest.approx(1.0)

    xs = np.linspace(-2, 2, 12).reshape(-1, 1)
    ys = (2.0 * xs[:, 0] + 1.0).tolist()
    svr = voxrep.train_linear_svr(xs, ys, c=10.0, epsilon=0.1)
    assert svr.weights.ravel()[0] == pytest.approx(2.0, rel=0.05)

    pred, frac = voxrep.knn_predict(x, [float(v) for v in y], x[:1], k=3, task="classify")
    assert pred == 0.0
    assert frac == pytest.approx(0.0)


def test_lstm_head_overfits_toy_signal():
    rng = np.random.default_rng(19)
    n, timesteps, width = 8, 6, 3
    x = rng.normal(scale=0.3, size=(n, timesteps, width)).astype(np.float32)
    y = np.array([i % 2 for i in range(n)], dtype=np.float64)
    x[:, :, 0] += np.where(y[:, None] == 1, 0.8, -0.8)

    head = voxrep.LstmHead(input_dim=width, timesteps=timesteps, classification=True, seed=3)
    head.fit(x, y, epochs=150, lr=1e-3, patience=150, dropout=0.1, seed=5)
    logits = head.predict(x)
    assert ((logits > 0) == (y == 1)).all()
    np.testing.assert_array_equal(logits, head.predict(x))


def test_generate_cohort(tmp_path):
    out = str(tmp_path / "cohort")
    manifest = voxrep.generate_cohort(out, n_subjects=4, grid=(10, 10, 10),
                                      timepoints=5, noise_sigma=0.0, seed=23)
    vol, tr = voxrep.load_nifti(out + "/sub-0000.nii")
    assert vol.shape == (5, 10, 10, 10)
    assert tr == pytest.approx(2.0)
    header = open(manifest).readline().strip()
    assert header == "subject_id,path,age,sex,diagnosis,fold"
