import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gluestick import numerics
from gluestick.errors import DimensionError, NumericError, TopologyError
from gluestick.gluecore import Correction, CorrectionSet, compute_gap, prime_correction, prime_model
from gluestick.pruner import PruneSpec, prune_checkpoint
from gluestick.runtime import (CorrectedLayer, MacCounter, Model, apply_corrections, corrected_forward,
                               correction_params, cost_report, layer_cost, model_forward)
from gluestick.weightstore import Checkpoint, LayerRecord, encode_nm, sparse_storage_bytes

from oracles import dense_replay, naive_matmul, random_nm_dense
from toys import replay_layers, toy_checkpoint


def _layer(rng, d_out=6, d_in=8, r=None, dtype=np.float64):
    dense = rng.standard_normal((d_out, d_in)).astype(dtype)
    ck = Checkpoint({"w": dense}, [LayerRecord("w", "linear", d_in, d_out)])
    pruned = prune_checkpoint(ck, PruneSpec("magnitude", 2, 4, {"w"})).tensors["w"]
    bias = rng.standard_normal(d_out).astype(dtype)
    corr = None if r is None else prime_correction(dense, pruned, r, layer="w")
    return dense, pruned, bias, CorrectedLayer("w", pruned, bias, corr)


def test_no_correction_is_pruned_product(rng):
    _, pruned, bias, layer = _layer(rng)
    x = rng.standard_normal(8)
    np.testing.assert_allclose(corrected_forward(layer, x), pruned.to_dense() @ x + bias, atol=1e-14)


@pytest.mark.parametrize("dtype, tol", [(np.float64, 1e-10), (np.float32, 1e-5)])
def test_full_rank_matches_dense(rng, dtype, tol):
    dense, pruned, bias, layer = _layer(rng, 6, 8, 6, dtype)
    if dtype == np.float32:
        c = layer.correction
        layer = layer.with_correction(Correction("w", 6, c.A.astype(np.float32), c.B.astype(np.float32)))
    x = rng.standard_normal((8, 3)).astype(dtype)
    assert np.abs(layer.forward(x) - (dense.astype(float) @ x + bias[:, None])).max() <= tol


def test_rank2_matches_reconstruction_oracle(rng):
    _, pruned, bias, layer = _layer(rng, 6, 8, 2)
    x = rng.standard_normal(8)
    w = pruned.to_dense() + naive_matmul(layer.correction.A, layer.correction.B.T)
    np.testing.assert_allclose(layer.forward(x), naive_matmul(w, x[:, None]).ravel() + bias, atol=1e-12)


def test_forward_errors(rng):
    _, _, _, layer = _layer(rng, r=1)
    with pytest.raises(DimensionError):
        layer.forward(np.ones(7))
    with pytest.raises(NumericError):
        layer.forward(np.full(8, np.inf))
    with pytest.raises(DimensionError):
        CorrectedLayer("w", layer.pruned, None, Correction("w", 1, np.ones((5, 1)), np.ones((8, 1))))


def test_error_bound(rng):
    for r in range(1, 6):
        dense, pruned, bias, layer = _layer(rng, 6, 8, r)
        s = numerics.svd_full(compute_gap(dense, pruned)).S
        x = rng.standard_normal(8)
        err = np.linalg.norm(layer.forward(x) - (dense @ x + bias))
        assert err <= np.linalg.norm(x) * s[r] * (1 + 1e-9) + 1e-12
        assert err <= np.linalg.norm(x) * np.sqrt(np.sum(s[r:] ** 2)) + 1e-12


def test_sparse_values_untouched(rng):
    _, pruned, _, layer = _layer(rng, r=2)
    before = pruned.values.tobytes() + pruned.meta.tobytes()
    x = rng.standard_normal((8, 4))
    for _ in range(1000):
        layer.forward(x)
    assert pruned.values.tobytes() + pruned.meta.tobytes() == before


def test_identity_model():
    m = Model.from_checkpoint(Checkpoint({"w": np.eye(3)}, [LayerRecord("w", "linear", 3, 3)]))
    assert model_forward(m, [1.0, 2.0, 3.0]).tolist() == [1.0, 2.0, 3.0]


@pytest.mark.parametrize("act", ["relu", "tanh", "identity"])
def test_model_matches_replay(rng, act):
    ck = toy_checkpoint(rng, (8, 6, 5, 3), act=act)
    x = rng.standard_normal(8)
    np.testing.assert_allclose(model_forward(ck, x), dense_replay(replay_layers(ck), x), atol=1e-12)


def test_full_rank_two_layer_model(rng):
    dense = toy_checkpoint(rng, (8, 8, 4))
    pruned = prune_checkpoint(dense, PruneSpec("magnitude", 2, 4, {"fc0", "fc1"}))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cs = prime_model(dense, pruned, 64)  # clamped to each layer's full rank
    model = apply_corrections(Model.from_checkpoint(pruned), cs)
    x = rng.standard_normal((8, 5))
    np.testing.assert_allclose(model.forward(x), model_forward(dense, x), atol=1e-10)


def test_apply_corrections_counts(rng):
    dense = toy_checkpoint(rng, (8, 8, 4))
    pruned = prune_checkpoint(dense, PruneSpec("magnitude", 2, 4, {"fc0"}))
    base = Model.from_checkpoint(pruned)
    assert apply_corrections(base, CorrectionSet()) is base
    cs = prime_model(dense, pruned, 2)
    out = apply_corrections(base, cs)
    wrapped = [n for n, l in out.layers.items() if getattr(l, "correction", None) is not None]
    assert wrapped == ["fc0"]
    assert base.layers["fc0"].correction is None
    with pytest.raises(TopologyError):
        apply_corrections(base, CorrectionSet({"fc1": Correction("fc1", 1, np.ones((4, 1)), np.ones((8, 1)))}))
    with pytest.raises(TopologyError):
        apply_corrections(base, CorrectionSet({"zz": Correction("zz", 1, np.ones((4, 1)), np.ones((8, 1)))}))


def test_cost_formulas():
    assert correction_params(4096, 4096, 500) == 4_096_000
    assert correction_params(4096, 4096, 500) / (4096 * 4096) == pytest.approx(0.2441, abs=1e-4)
    s = encode_nm(np.zeros((8, 16), dtype=np.float32), 2, 4, kept=np.tile([0, 1], (8, 4, 1)))
    lc = layer_cost(CorrectedLayer("s", s))
    assert lc.sparse_macs * 2 == lc.dense_macs
    assert lc.param_bytes_sparse == sparse_storage_bytes(8, 16, 2, 4)


def test_cost_matches_instrumented_counts(rng):
    dense = toy_checkpoint(rng, (8, 12, 8, 4), dtype=np.float32)
    pruned = prune_checkpoint(dense, PruneSpec("magnitude", 2, 4, {"fc0", "fc1"}))
    model = apply_corrections(Model.from_checkpoint(pruned), prime_model(dense, pruned, 3))
    counter = MacCounter()
    model.forward(rng.standard_normal(8), counter=counter)
    rep = cost_report(model)
    for row in rep.layers:
        assert counter.by_layer[row.layer] == row.macs
    assert counter.total == rep.total.macs
    hand = {"fc0": (12 * 8 // 2, (8 + 12) * 3), "fc1": (8 * 12 // 2, (12 + 8) * 3), "fc2": (4 * 8, 0)}
    for row in rep.layers:
        assert (row.sparse_macs, row.correction_macs) == hand[row.layer]
    assert rep.total.correction_macs == sum(v[1] for v in hand.values())


def test_cost_csv(tmp_path, rng):
    model = Model.from_checkpoint(toy_checkpoint(rng))
    cost_report(model).to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0].startswith("layer,d_in,d_out,r,dense_macs") and lines[-1].startswith("TOTAL,")
    assert len(lines) == 1 + 2 + 1


def test_embedding_layer(rng):
    table = rng.standard_normal((3, 2))
    w = rng.standard_normal((2, 6))
    topo = [LayerRecord("enc", "linear", 4, 4), LayerRecord("emb", "embedding", 4, 6), LayerRecord("out", "linear", 6, 2)]
    ck = Checkpoint({"enc": np.eye(4), "emb": table, "out": w}, topo)
    x = rng.standard_normal(4)
    np.testing.assert_allclose(model_forward(ck, x, 2), w @ np.concatenate([x, table[2]]), atol=1e-14)
