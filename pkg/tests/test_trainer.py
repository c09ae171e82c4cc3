import numpy as np
import pytest

from case_tal import trainer
from case_tal.data_io import Dataset, Video
from case_tal.errors import InputError, NumericalError
from case_tal.network import forward, init_model
from case_tal.trainer import AdamState, TrainConfig, adam_step, make_labels, sample_snippets, train


def toy_dataset(n=8, T=8, D=4, seed=0):
    """Two linearly separable classes; the first half of each video is the action."""
    rng = np.random.default_rng(seed)
    vids = []
    for i in range(n):
        c = i % 2
        X = rng.normal(size=(T, D)) * 0.3
        X[: T // 2, c] += 3.0
        vids.append(Video(f"v{i}", X, X + 0.1 * rng.normal(size=X.shape), [c], []))
    return Dataset(2, ["a", "b"], 1.0, vids)


def small_config(**kw):
    base = dict(T=8, B=8, K=4, hidden=8, epochs=3, lr=1e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_sample_snippets_examples():
    X = np.arange(12.0).reshape(6, 2)
    assert np.array_equal(sample_snippets(X, 6), X)
    F = np.arange(4.0)[:, None]
    assert sample_snippets(F, 2)[:, 0].tolist() == [0, 2]
    assert sample_snippets(F[:2], 4)[:, 0].tolist() == [0, 1, 0, 1]


def test_sample_snippets_indices_in_range():
    for L in range(1, 30):
        for T in (1, 5, 16):
            out = sample_snippets(np.arange(L, dtype=float)[:, None], T)
            assert out.shape == (T, 1) and out.max() < L


def test_adam_examples():
    p = {"w": np.array([0.5, -1.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    assert p["w"].tolist() == [0.5, -1.0]

    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=0.1)
    assert p["w"][0] == pytest.approx(-0.1, abs=1e-6)

    p, st = {"w": np.array([0.0])}, AdamState()
    adam_step(p, {"w": np.array([1.0])}, st, lr=0.1)
    first = p["w"].copy()
    adam_step(p, {"w": np.array([1.0])}, st, lr=0.1)
    assert st.step == 2 and p["w"][0] != first[0]


def test_adam_rejects_non_finite():
    with pytest.raises(NumericalError, match="rgb.W"):
        adam_step({"rgb.W": np.zeros(1)}, {"rgb.W": np.array([np.nan])}, AdamState())


@pytest.mark.parametrize("kw", [dict(T=0), dict(gamma=1.0), dict(omega=1.5), dict(k_topk=9),
                                dict(scc_input="x"), dict(scc_fusion="x"), dict(lambda_s=-1)])
def test_config_validation(kw):
    with pytest.raises(InputError):
        small_config(**kw).validate()


def test_config_from_dict_rejects_unknown():
    with pytest.raises(InputError):
        TrainConfig.from_dict({"bogus": 1})
    assert TrainConfig.from_dict({"T": 60}).topk == 7


def test_foreground_label_count_matches_union_of_topk_sets():
    ds = toy_dataset()
    cfg = small_config(k_topk=3)
    params = init_model(4, 8, 2, 4, seed=1)
    X = trainer._batch_arrays(ds.videos, cfg.T)
    Y = np.stack([v.label_vector(2) for v in ds.videos])
    acts = {s: forward(X[s], sp) for s, sp in params.streams().items()}
    labels = make_labels(acts, Y, [cfg.T] * len(ds.videos), trainer.initial_qc(cfg.K), cfg)
    for b, sl in enumerate(trainer._slices(labels.lengths)):
        pos = set()
        for c in np.flatnonzero(Y[b]):
            pos |= set(labels.gamma_sets[b][c].tolist())
        assert labels.qa.qa[sl].sum() == len(pos)
    assert np.allclose(labels.qs.sum(1), 1) and labels.qc.shape == (4, 2)


def test_video_loss_decreases_without_clustering_terms():
    cfg = small_config(epochs=50, lr=3e-3, lambda_s=0.0, lambda_c=0.0)
    lv = np.array([r["l_v"] for r in train(cfg, toy_dataset()).metrics])
    assert len(lv) == 50
    assert np.mean(np.diff(lv) < 0) >= 0.9


def test_training_is_deterministic():
    a = train(small_config(), toy_dataset())
    b = train(small_config(), toy_dataset())
    for name, arr in a.params.named_tensors().items():
        assert np.array_equal(arr, b.params.named_tensors()[name])
    assert np.array_equal(a.qc, b.qc)


def test_threaded_training_matches_serial():
    a = train(small_config(), toy_dataset())
    b = train(small_config(threads=2), toy_dataset())
    for name, arr in a.params.named_tensors().items():
        assert np.allclose(arr, b.params.named_tensors()[name], atol=1e-12)


def test_metrics_rows_are_finite_and_complete():
    rows = []
    res = train(small_config(), toy_dataset(), on_iteration=rows.append)
    assert rows == res.metrics and len(rows) == 3
    for r in rows:
        for key in ("l_v", "l_a", "l_s", "l_c", "total", "H_qc", "H_qs", "H_mean_ps"):
            assert np.isfinite(r[key])


def test_label_hook_sees_every_batch():
    seen = []
    train(small_config(B=4), toy_dataset(), label_hook=lambda it, ids, lab: seen.append((it, len(ids))))
    assert seen == [(i, 4) for i in range(6)]


def test_empty_dataset_rejected():
    with pytest.raises(InputError):
        train(small_config(), Dataset(2, ["a", "b"], 1.0, []))


def test_mean_stream_reduction_halves_total():
    cfg = small_config()
    params = init_model(4, 8, 2, 4, seed=0)
    ds = toy_dataset()
    X = trainer._batch_arrays(ds.videos, cfg.T)
    Y = np.stack([v.label_vector(2) for v in ds.videos])
    acts = {s: forward(X[s], sp) for s, sp in params.streams().items()}
    labels = make_labels(acts, Y, [cfg.T] * 8, trainer.initial_qc(4), cfg)
    summed, g1 = trainer.loss_and_grads(params, X, labels, cfg)
    cfg.stream_reduction = "mean"
    meaned, g2 = trainer.loss_and_grads(params, X, labels, cfg)
    assert meaned.total == pytest.approx(summed.total / 2)
    assert np.allclose(g2["rgb"]["W_video"], g1["rgb"]["W_video"] / 2)
