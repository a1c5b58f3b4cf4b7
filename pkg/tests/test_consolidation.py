import numpy as np
import pytest

from fewmol import autodiff as ad
from fewmol import consolidation as con
from fewmol.params import ParamStore, ParamView


def scalar_stub_loss(x, y):
    def loss(view, sample):
        sx, sy = sample
        pred = ad.scale(view.leaf("theta"), sx)
        err = ad.add(pred, ad.constant(np.full((1, 1), -sy)))
        return ad.sum_all(ad.mul(err, err))

    return loss


def test_fisher_toy_scalar_value_34():
    store = ParamStore()
    store.add("theta", [[1.0]])
    data = [(1.0, 0.0), (2.0, 0.0)]
    fisher = con.estimate_fisher(store, ["theta"], data, scalar_stub_loss(None, None))
    assert fisher.f_hat.shape == (1, 1)
    assert fisher.f_hat[0, 0] == 34.0
    assert fisher.f_tilde[0] == 34.0
    assert fisher.samples == 2


def test_fisher_invariant_under_duplication():
    store = ParamStore()
    store.add("theta", [[1.0]])
    data = [(1.0, 0.0), (2.0, 0.0)]
    f1 = con.estimate_fisher(store, ["theta"], data, scalar_stub_loss(None, None))
    f2 = con.estimate_fisher(store, ["theta"], data * 5, scalar_stub_loss(None, None))
    assert np.array_equal(f1.f_hat, f2.f_hat)


def test_fisher_zero_for_unused_row():
    store = ParamStore()
    store.add("emb", np.ones((3, 2)))

    def loss(view, sample):
        picked = ad.gather(view.leaf("emb"), np.array([0]))  # row 1 and 2 unused
        return ad.sum_all(ad.mul(picked, picked))

    fisher = con.estimate_fisher(store, ["emb"], [0, 1], loss)
    assert np.all(fisher.f_hat[0] > 0.0)
    assert np.array_equal(fisher.f_hat[1:], np.zeros((2, 2)))


def test_fisher_empty_data_rejected():
    store = ParamStore()
    store.add("theta", [[1.0]])
    with pytest.raises(con.FisherError, match="nonempty"):
        con.estimate_fisher(store, ["theta"], [], scalar_stub_loss(None, None))


def make_phi_store(values):
    store = ParamStore()
    store.add("phi", np.array(values, dtype=np.float64))
    return store


def test_zero_displacement_gives_zero_for_all_modes():
    store = make_phi_store(np.arange(6.0).reshape(2, 3))
    anchor = store.snapshot(["phi"])
    fisher = con.FisherDiag(f_hat=np.ones((2, 3)), f_tilde=np.full(2, 3.0), samples=1)
    for mode in ("IM", "FIM", "EFIM"):
        v = con.penalty_value(mode, store, anchor, ["phi"], fisher)
        assert v == 0.0
    assert con.penalty_value("none", store, anchor, ["phi"]) == 0.0


def test_im_hand_value():
    anchor = {"phi": np.zeros((2, 3))}
    store = make_phi_store(np.full((2, 3), 0.1))
    assert abs(con.penalty_value("IM", store, anchor, ["phi"]) - 0.03) < 1e-15


def test_efim_vs_fim_cancellation():
    """Row displacement [0.5, -0.5]: EFIM charges nothing, FIM charges 0.5."""
    anchor = {"phi": np.zeros((1, 2))}
    store = make_phi_store([[0.5, -0.5]])
    fisher = con.FisherDiag(f_hat=np.array([[1.0, 3.0]]), f_tilde=np.array([4.0]), samples=1)
    assert con.penalty_value("EFIM", store, anchor, ["phi"], fisher) == 0.0
    assert con.penalty_value("FIM", store, anchor, ["phi"], fisher) == 0.5


def test_penalties_nonnegative_random():
    rng = np.random.default_rng(8)
    for _ in range(50):
        e, d = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        store = make_phi_store(rng.normal(size=(e, d)))
        anchor = {"phi": rng.normal(size=(e, d))}
        f_hat = rng.uniform(0, 2, size=(e, d))
        fisher = con.FisherDiag(f_hat=f_hat, f_tilde=f_hat.sum(axis=1), samples=1)
        for mode in ("IM", "FIM", "EFIM"):
            assert con.penalty_value(mode, store, anchor, ["phi"], fisher) >= 0.0


def test_penalty_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    anchor_arr = rng.normal(size=(3, 4))
    f_hat = rng.uniform(0.1, 2.0, size=(3, 4))
    fisher = con.FisherDiag(f_hat=f_hat, f_tilde=f_hat.sum(axis=1), samples=1)
    store = make_phi_store(rng.normal(size=(3, 4)))
    for mode in ("IM", "FIM", "EFIM"):

        def graph(b):
            view = ParamView(store, leaves={"phi": b["phi"]})
            return con.penalty(mode, view, {"phi": anchor_arr}, ["phi"], fisher)

        err = ad.finite_diff_check(graph, {"phi": store.get("phi")})
        assert err < 1e-4, f"{mode}: {err}"


def test_penalty_requires_fisher_for_weighted_modes():
    store = make_phi_store(np.zeros((1, 2)))
    with pytest.raises(ValueError, match="fisher"):
        con.penalty_value("FIM", store, {"phi": np.zeros((1, 2))}, ["phi"], None)


def test_penalty_shape_mismatch():
    store = make_phi_store(np.zeros((2, 2)))
    with pytest.raises(ValueError, match="anchor"):
        con.penalty_value("IM", store, {"phi": np.zeros((3, 2))}, ["phi"])


def test_f_tilde_row_sum_decomposition():
    rng = np.random.default_rng(10)
    f_hat = rng.uniform(0, 3, size=(7, 5))
    fisher = con.FisherDiag(f_hat=f_hat, f_tilde=f_hat.sum(axis=1), samples=3)
    assert np.max(np.abs(fisher.f_tilde - fisher.f_hat.sum(axis=1))) <= 1e-12
    with pytest.raises(con.FisherError):
        con.FisherDiag(f_hat=f_hat, f_tilde=f_hat.sum(axis=1) + 1e-6, samples=3)


def test_fisher_io_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    f_hat = rng.uniform(0, 1, size=(4, 3))
    fisher = con.FisherDiag(f_hat=f_hat, f_tilde=f_hat.sum(axis=1), samples=9)
    path = tmp_path / "fisher.json"
    con.save_fisher(fisher, path)
    loaded = con.load_fisher(path)
    assert np.array_equal(loaded.f_hat, fisher.f_hat)
    assert np.array_equal(loaded.f_tilde, fisher.f_tilde)
    assert loaded.samples == 9


def test_fisher_io_shape_guards(tmp_path):
    rng = np.random.default_rng(2)
    f_hat = rng.uniform(0, 1, size=(4, 3))
    fisher = con.FisherDiag(f_hat=f_hat, f_tilde=f_hat.sum(axis=1), samples=9)
    path = tmp_path / "fisher.json"
    con.save_fisher(fisher, path)
    with pytest.raises(con.FisherError, match="rows"):
        con.load_fisher(path, expect_rows=5)
    with pytest.raises(con.FisherError, match="width"):
        con.load_fisher(path, expect_d=7)
