import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gluestick import numerics
from gluestick.errors import DimensionError, FormatError, TopologyError, ValidationError
from gluestick.gluecore import (RankClampWarning, compute_gap, corrections_from_checkpoint,
                                corrections_to_checkpoint, load_corrections, prime_correction, prime_model,
                                save_corrections, select_components, verify_provenance)
from gluestick.pruner import PruneSpec, prune_checkpoint
from gluestick.weightstore import Checkpoint, LayerRecord, encode_nm, read_checkpoint

from oracles import random_nm_dense
from toys import toy_checkpoint


def _zero_sparse(rows, cols, n=2, m=4):
    kept = np.tile(np.arange(n), (rows, cols // m, 1))
    return encode_nm(np.zeros((rows, cols)), n, m, kept=kept)


def test_gap_zero_when_nothing_removed(rng):
    w, _ = random_nm_dense(rng, 3, 8, 2, 4)
    assert not compute_gap(w, encode_nm(w, 2, 4)).any()


def test_gap_identity():
    kept = np.array([[[0]], [[0]]])
    pruned = encode_nm(np.zeros((2, 2)), 1, 2, kept=kept)
    assert np.array_equal(compute_gap(np.eye(2), pruned), np.eye(2))


def test_gap_positions(rng):
    w = rng.standard_normal((4, 8))
    _, mask = random_nm_dense(rng, 4, 8, 2, 4)
    kept = np.nonzero(mask.reshape(4, 2, 4))[2].reshape(4, 2, 2)
    gap = compute_gap(w, encode_nm(np.where(mask, w, 0.0), 2, 4, kept=kept))
    assert np.array_equal(gap != 0, ~mask)
    assert np.array_equal(gap[~mask], w[~mask])
    with pytest.raises(DimensionError):
        compute_gap(np.ones((4, 4)), encode_nm(np.zeros((4, 8)), 2, 4))


def test_prime_diagonal_gap():
    dense = np.zeros((4, 4))
    dense[0, 2], dense[1, 3], dense[2, 0] = 3.0, 2.0, 1.0  # pruned slots hold 3, 2, 1
    c = prime_correction(dense, _zero_sparse(4, 4), 1)
    assert np.linalg.norm(c.A[:, 0]) == pytest.approx(3.0, abs=1e-14)
    assert numerics.frobenius_norm(dense - c.delta()) == pytest.approx(math.sqrt(5), abs=1e-14)


def test_prime_full_rank_exact(rng):
    dense = rng.standard_normal((6, 8))
    pruned = prune_checkpoint(Checkpoint({"w": dense}, [LayerRecord("w", "linear", 8, 6)]),
                              PruneSpec("magnitude", 2, 4, {"w"})).tensors["w"]
    gap = compute_gap(dense, pruned)
    c = prime_correction(dense, pruned, 6)
    assert numerics.frobenius_norm(gap - c.delta()) <= 1e-6 * numerics.frobenius_norm(gap)


def test_prime_residual_matches_full_svd_oracle(rng):
    dense = rng.standard_normal((10, 8))
    pruned = _zero_sparse(10, 8)
    gap = compute_gap(dense, pruned)
    s = np.linalg.svd(gap, compute_uv=False)
    c = prime_correction(dense, pruned, 2)
    assert numerics.frobenius_norm(gap - c.delta()) == pytest.approx(math.sqrt(np.sum(s[2:] ** 2)), rel=1e-10)
    np.testing.assert_allclose(np.linalg.norm(c.A, axis=0), s[:2], rtol=1e-12)
    assert np.abs(c.B.T @ c.B - np.eye(2)).max() < 1e-12


def test_prime_rank_bounds(rng):
    with pytest.raises(ValidationError):
        prime_correction(np.ones((4, 4)), _zero_sparse(4, 4), 0)
    with pytest.raises(ValidationError):
        prime_correction(np.ones((4, 4)), _zero_sparse(4, 4), 5)


def test_random_selection_is_seeded():
    a = select_components(10, 3, "random_r", 7)
    assert np.array_equal(a, select_components(10, 3, "random_r", 7))
    assert len(set(a.tolist())) == 3 and np.all(np.diff(a) > 0)
    with pytest.raises(ValidationError):
        select_components(10, 3, "random_r")
    with pytest.raises(ValidationError):
        select_components(10, 3, "best")


@given(st.integers(0, 2 ** 31), st.integers(2, 8), st.integers(2, 8), st.data())
def test_top_r_never_worse_than_random(seed, rows, cols_groups, data):
    rng = np.random.default_rng(seed)
    cols = cols_groups * 4
    dense = rng.standard_normal((rows, cols))
    pruned = _zero_sparse(rows, cols)
    gap = compute_gap(dense, pruned)
    r = data.draw(st.integers(1, min(rows, cols)))
    top = numerics.frobenius_norm(gap - prime_correction(dense, pruned, r).delta())
    rnd = numerics.frobenius_norm(gap - prime_correction(dense, pruned, r, "random_r", seed).delta())
    assert top <= rnd * (1 + 1e-12) + 1e-12


def test_residual_monotone_in_r(rng):
    dense, pruned = rng.standard_normal((7, 12)), _zero_sparse(7, 12)
    gap = compute_gap(dense, pruned)
    res = [numerics.frobenius_norm(gap - prime_correction(dense, pruned, r).delta()) for r in range(1, 8)]
    assert all(b <= a + 1e-12 for a, b in zip(res, res[1:]))


def _toy_pair(rng, dims=(8, 8, 4)):
    dense = toy_checkpoint(rng, dims)
    names = {rec.name for rec in dense.linear_layers()}
    return dense, prune_checkpoint(dense, PruneSpec("magnitude", 2, 4, names))


def test_prime_model_empty(rng):
    dense = toy_checkpoint(rng)
    assert len(prime_model(dense, prune_checkpoint(dense, PruneSpec("magnitude")), 1)) == 0


def test_prime_model_single_tiny_layer():
    dense = Checkpoint({"w": np.array([[1.0, 2.0, 3.0, 4.0]])}, [LayerRecord("w", "linear", 4, 1)])
    pruned = prune_checkpoint(dense, PruneSpec("magnitude", 2, 4, {"w"}))
    cs = prime_model(dense, pruned, 1)
    assert len(cs) == 1 and cs["w"].r == 1 and cs["w"].n_params == 5


def test_prime_model_matches_per_layer(rng):
    dense, pruned = _toy_pair(rng, (8, 8, 8, 4))
    before = (dense.hash(), pruned.hash())
    cs = prime_model(dense, pruned, 2)
    assert (dense.hash(), pruned.hash()) == before
    assert set(cs.corrections) == {"fc0", "fc1", "fc2"}
    for name, c in cs.corrections.items():
        ref = prime_correction(dense.tensors[name], pruned.tensors[name], 2)
        assert np.array_equal(c.A, ref.A) and np.array_equal(c.B, ref.B)
        assert c.n_params == (c.d_in + c.d_out) * 2
    assert cs.provenance["dense_hash"] == dense.hash() and cs.provenance["r"] == "2"


def test_prime_model_clamps_rank(rng):
    dense, pruned = _toy_pair(rng, (8, 8, 4))
    with pytest.warns(RankClampWarning):
        cs = prime_model(dense, pruned, 6)
    assert cs["fc0"].r == 6 and cs["fc1"].r == 4


def test_prime_model_topology_mismatch(rng):
    dense, pruned = _toy_pair(rng)
    other = toy_checkpoint(rng, (8, 4, 4))
    with pytest.raises(TopologyError):
        prime_model(other, pruned, 1)


def test_save_load_round_trip(tmp_path, rng):
    dense, pruned = _toy_pair(rng)
    cs = prime_model(dense, pruned, 2, "random_r", 3)
    save_corrections(cs, tmp_path / "c.glue")
    back = load_corrections(tmp_path / "c.glue", dense, pruned)
    save_corrections(back, tmp_path / "d.glue")
    assert (tmp_path / "c.glue").read_bytes() == (tmp_path / "d.glue").read_bytes()
    assert read_checkpoint(tmp_path / "c.glue").tensors["fc0.A"].dtype == np.float32
    assert back.provenance["selection"] == "random_r" and back.provenance["seed"] == "3"
    np.testing.assert_allclose(back["fc1"].A, cs["fc1"].A, rtol=1e-6, atol=1e-6)


def test_provenance_mismatch(tmp_path, rng):
    dense, pruned = _toy_pair(rng)
    save_corrections(prime_model(dense, pruned, 1), tmp_path / "c.glue")
    with pytest.raises(ValidationError, match="dense_hash"):
        load_corrections(tmp_path / "c.glue", toy_checkpoint(rng), pruned)


def test_missing_factor_pair(rng):
    dense, pruned = _toy_pair(rng)
    ck = corrections_to_checkpoint(prime_model(dense, pruned, 1))
    del ck.tensors["fc0.B"]
    with pytest.raises(FormatError):
        corrections_from_checkpoint(ck)
