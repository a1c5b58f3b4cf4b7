import numpy as np
import pytest

from fewmol import autodiff as ad
from fewmol import encoder as enc
from fewmol import smiles as sm
from fewmol.params import ParamStore, ParamView, check_shapes, load_checkpoint, save_checkpoint


def small_setup(d=4, d1=6, n_layers=2, seed=0):
    cfg = enc.EncoderConfig(d=d, d1=d1, n_layers=n_layers)
    store = ParamStore()
    enc.init_encoder_params(store, cfg, np.random.default_rng(seed))
    return cfg, store


def hand_single_layer(store, layer, h0, he, src, dst, n_atoms, mode="eval"):
    """Loop-free-of-the-implementation oracle: explicit per-atom aggregation."""
    d = h0.shape[1]
    agg = np.zeros_like(h0)
    for v in range(n_atoms):
        agg[v] = h0[v].copy()
    for k in range(len(src)):
        agg[dst[k]] += h0[src[k]]
        agg[dst[k]] += he[k]
    u = agg @ store.get(f"mp.layer{layer}.w1") + store.get(f"mp.layer{layer}.b1")
    u = np.maximum(u, 0.0)
    u = u @ store.get(f"mp.layer{layer}.w2") + store.get(f"mp.layer{layer}.b2")
    if mode == "eval":
        mu = store.get(f"mp.layer{layer}.bn.running_mean")
        var = store.get(f"mp.layer{layer}.bn.running_var")
    else:
        mu, var = u.mean(axis=0), u.var(axis=0)
    xhat = (u - mu) / np.sqrt(var + 1e-5)
    out = xhat * store.get(f"mp.layer{layer}.bn.gamma") + store.get(f"mp.layer{layer}.bn.beta")
    return np.maximum(out, 0.0)


def test_embed_zero_tables_give_zero():
    cfg, store = small_setup()
    for name in enc.embedding_table_names(cfg):
        store.get(name)[:] = 0.0
    batch = enc.BatchGraph([sm.featurize(sm.parse_smiles("CCO"))])
    h = enc.embed_atoms(ParamView(store), batch)
    assert np.array_equal(h.data, np.zeros((3, cfg.d)))


def test_embed_one_hot_lookup():
    cfg, store = small_setup()
    for name in enc.embedding_table_names(cfg):
        store.get(name)[:] = 0.0
    row = sm.SYMBOL_TO_Z["C"] - 1
    store.get("emb.atom.0")[row] = np.array([0.0, 1.0, 0.0, 0.0])
    batch = enc.BatchGraph([sm.featurize(sm.parse_smiles("C"))])
    h = enc.embed_atoms(ParamView(store), batch)
    assert np.array_equal(h.data[0], [0.0, 1.0, 0.0, 0.0])


def test_embed_is_sum_of_families():
    cfg, store = small_setup(seed=3)
    batch = enc.BatchGraph([sm.featurize(sm.parse_smiles("C"))])
    h = enc.embed_atoms(ParamView(store), batch)
    z_idx, c_idx = batch.atom_idx[0]
    expected = store.get("emb.atom.0")[z_idx] + store.get("emb.atom.1")[c_idx]
    assert np.allclose(h.data[0], expected, atol=1e-15)


def test_isolated_atom_layer_reduces_to_self_term():
    cfg, store = small_setup(seed=5)
    batch = enc.BatchGraph([sm.featurize(sm.parse_smiles("C"))])
    view = ParamView(store)
    h0 = enc.embed_atoms(view, batch)
    out = enc.message_passing_layer(view, 0, h0, enc.embed_bonds(view, batch, 0), batch, "eval")
    oracle = hand_single_layer(store, 0, h0.data, np.zeros((0, cfg.d)), [], [], 1)
    assert np.allclose(out.data, oracle, atol=1e-12)


def test_zero_mlp_gives_zero_output():
    cfg, store = small_setup(seed=1)
    for l in range(cfg.n_layers):
        store.get(f"mp.layer{l}.w1")[:] = 0.0
        store.get(f"mp.layer{l}.w2")[:] = 0.0
        store.get(f"mp.layer{l}.b1")[:] = 0.0
        store.get(f"mp.layer{l}.b2")[:] = 0.0
    batch = enc.BatchGraph([sm.featurize(sm.parse_smiles("CCO"))])
    view = ParamView(store)
    h0 = enc.embed_atoms(view, batch)
    out = enc.message_passing_layer(view, 0, h0, enc.embed_bonds(view, batch, 0), batch, "eval")
    assert np.array_equal(out.data, np.zeros((3, cfg.d)))


@pytest.mark.parametrize("text", ["CCO", "C1CC1", "C(C)C", "C=CC#N"])
@pytest.mark.parametrize("mode", ["eval", "train"])
def test_single_layer_matches_hand_oracle(text, mode):
    cfg, store = small_setup(seed=9)
    rng = np.random.default_rng(4)
    for l in range(cfg.n_layers):
        store.get(f"mp.layer{l}.bn.running_mean")[:] = rng.normal(size=cfg.d)
        store.get(f"mp.layer{l}.bn.running_var")[:] = rng.uniform(0.5, 2.0, size=cfg.d)
    feat = sm.featurize(sm.parse_smiles(text))
    batch = enc.BatchGraph([feat])
    view = ParamView(store)
    h0 = enc.embed_atoms(view, batch)
    he = enc.embed_bonds(view, batch, 0)
    out = enc.message_passing_layer(view, 0, h0, he, batch, mode)
    he_data = he.data if he is not None else np.zeros((0, cfg.d))
    oracle = hand_single_layer(store, 0, h0.data, he_data, feat.bond_src, feat.bond_dst, batch.n_atoms, mode)
    assert np.max(np.abs(out.data - oracle)) < 1e-9


def test_path_graph_middle_atom_hand_expansion():
    """Fully hand-expanded aggregation for B in A-B-C, no loops shared with the impl."""
    cfg, store = small_setup(seed=21)
    feat = sm.featurize(sm.parse_smiles("CNO"))  # distinct elements -> distinct embeddings
    batch = enc.BatchGraph([feat])
    view = ParamView(store)
    h0 = enc.embed_atoms(view, batch).data
    he = enc.embed_bonds(view, batch, 0).data

    # directed bonds are (0,1),(1,0),(1,2),(2,1); B receives (0->1) and (2->1)
    agg_b = h0[1] + h0[0] + h0[2] + he[0] + he[3]
    u = agg_b @ store.get("mp.layer0.w1") + store.get("mp.layer0.b1")
    u = np.maximum(u, 0.0) @ store.get("mp.layer0.w2") + store.get("mp.layer0.b2")
    xhat = (u - store.get("mp.layer0.bn.running_mean")) / np.sqrt(store.get("mp.layer0.bn.running_var") + 1e-5)
    expected_b = np.maximum(xhat * store.get("mp.layer0.bn.gamma") + store.get("mp.layer0.bn.beta"), 0.0)

    out = enc.message_passing_layer(
        view, 0, enc.embed_atoms(view, batch), enc.embed_bonds(view, batch, 0), batch, "eval"
    )
    assert np.max(np.abs(out.data[1] - expected_b)) < 1e-9


def test_two_atom_readout_is_mean():
    cfg, store = small_setup(seed=2)
    batch = enc.BatchGraph([sm.featurize(sm.parse_smiles("CO"))])
    out = enc.encode_batch(ParamView(store), batch)
    assert np.allclose(out.h_m.data[0], out.atom_final.data.mean(axis=0), atol=1e-12)


def test_permutation_invariance():
    cfg, store = small_setup(d=6, d1=9, n_layers=3, seed=13)
    rng = np.random.default_rng(99)
    texts = ["CC(C)O", "c1ccccc1", "C1CC1CNO", "CC(=O)OC", "FC(F)(F)CBr"]
    for _ in range(40):
        text = texts[rng.integers(len(texts))]
        m = sm.parse_smiles(text)
        perm = list(rng.permutation(m.n_atoms))
        h1 = enc.encode_batch(ParamView(store), enc.BatchGraph([sm.featurize(m)])).h_m.data
        h2 = enc.encode_batch(ParamView(store), enc.BatchGraph([sm.featurize(m.permuted(perm))])).h_m.data
        assert np.max(np.abs(h1 - h2)) < 1e-9


def test_batched_equals_individual_encoding():
    cfg, store = small_setup(seed=7)
    mols = [sm.featurize(sm.parse_smiles(t)) for t in ["CCO", "C1CC1", "N#CC"]]
    batch_out = enc.encode_batch(ParamView(store), enc.BatchGraph(mols)).h_m.data
    for i, f in enumerate(mols):
        single = enc.encode_batch(ParamView(store), enc.BatchGraph([f])).h_m.data[0]
        assert np.max(np.abs(batch_out[i] - single)) < 1e-9


def test_count_parameters_paper_values():
    cfg = enc.EncoderConfig(d=300, d1=600, n_layers=5)
    full = enc.count_parameters(cfg, d2=50, tuning_mode="full", context_enabled=False)
    assert full.message_passing_trainable == 1_807_500
    pin = enc.count_parameters(cfg, d2=50, tuning_mode="pin", context_enabled=False)
    assert pin.adapter_trainable == 154_750
    assert pin.delta_n == 1_652_750
    assert full.message_passing_full - pin.adapter_formula_no_context == pin.delta_n


def test_count_parameters_context_widening():
    cfg = enc.EncoderConfig(d=300, d1=600, n_layers=5)
    rep = enc.count_parameters(cfg, d2=50, tuning_mode="pin", context_enabled=True)
    assert rep.adapter_context_extra == 2 * 50 * 50 * 5
    assert rep.adapter_trainable == rep.adapter_formula_no_context + rep.adapter_context_extra


def test_count_parameters_matches_enumeration():
    from fewmol.adapter import AdapterConfig, init_adapter_params

    for d, d1, d2, L in [(4, 6, 2, 2), (8, 16, 3, 3), (300, 600, 50, 5)]:
        cfg = enc.EncoderConfig(d=d, d1=d1, n_layers=L)
        store = ParamStore()
        enc.init_encoder_params(store, cfg, np.random.default_rng(0))
        init_adapter_params(store, AdapterConfig(d=d, d2=d2, context_enabled=False), L, np.random.default_rng(1))
        mp = sum(store.get(n).size for n in store.names() if n.startswith("mp.") and "running" not in n)
        adapters = sum(store.get(n).size for n in store.names() if n.startswith("adapter."))
        emb = sum(store.get(n).size for n in store.names() if n.startswith("emb.") and n != enc.MASK_NAME)
        rep = enc.count_parameters(cfg, d2=d2, tuning_mode="pin", context_enabled=False)
        assert mp == rep.message_passing_full
        assert adapters == rep.adapter_formula_no_context == rep.adapter_trainable
        assert emb == rep.embedding_trainable_exact


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    cfg, store = small_setup(seed=31)
    store.set_frozen("mp.layer0.w1", True)
    path = tmp_path / "ckpt.json"
    save_checkpoint(store, path, cfg.to_dict())
    loaded, loaded_cfg = load_checkpoint(path)
    assert loaded_cfg == cfg.to_dict()
    assert loaded.names() == store.names()
    for name in store.names():
        assert np.array_equal(loaded.get(name), store.get(name))
        assert loaded.is_frozen(name) == store.is_frozen(name)


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    cfg, store = small_setup(d=4, d1=6)
    path = tmp_path / "ckpt.json"
    save_checkpoint(store, path, cfg.to_dict())
    loaded, _ = load_checkpoint(path)
    other = enc.EncoderConfig(d=8, d1=6, n_layers=2)
    with pytest.raises(Exception, match="emb.atom.0"):
        check_shapes(loaded, enc.expected_shapes(other))


def test_checkpoint_unknown_version(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format_version": 99, "tensors": {}}')
    with pytest.raises(Exception, match="format_version"):
        load_checkpoint(path)


def test_frozen_update_rejected():
    from fewmol.params import FrozenParamError

    cfg, store = small_setup()
    store.set_frozen("mp.layer0.w1", True)
    with pytest.raises(FrozenParamError):
        store.apply_updates({"mp.layer0.w1": np.zeros((cfg.d, cfg.d1))}, lr=0.1)


def test_full_encoder_gradient_matches_finite_differences():
    """End-to-end gradient through embed + 2 layers + readout + BCE."""
    cfg, store = small_setup(d=3, d1=4, n_layers=2, seed=17)
    feats = [sm.featurize(sm.parse_smiles(t)) for t in ["CCO", "C=N"]]
    batch = enc.BatchGraph(feats)
    y = np.array([[1.0], [0.0]])
    names = [n for n in store.names() if "running" not in n and n != enc.MASK_NAME]

    def graph(b):
        view = ParamView(store, leaves={n: b[n] for n in names})
        out = enc.encode_batch(view, batch, mode="eval")
        w = ad.constant(np.full((cfg.d, 1), 0.3))
        logits = ad.matmul(out.h_m, w)
        return ad.sum_all(ad.bce_logits(logits, ad.constant(y)))

    bindings = {n: store.get(n) for n in names}
    err = ad.finite_diff_check(graph, bindings, coord_limit=60, rng=np.random.default_rng(0))
    assert err < 1e-4
