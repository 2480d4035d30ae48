"""Small checkpoints for tests."""

import numpy as np

from gluestick.weightstore import Checkpoint, LayerRecord


def toy_checkpoint(rng, dims=(8, 8, 4), act="relu", dtype=np.float64, bias=True, tags=None):
    """Linear layers ``fc0..`` of the given widths with ``act`` between them."""
    tensors, topo = {}, []
    n = len(dims) - 1
    for i in range(n):
        name = f"fc{i}"
        tensors[name] = rng.standard_normal((dims[i + 1], dims[i])).astype(dtype)
        if bias:
            tensors[f"{name}.bias"] = rng.standard_normal((1, dims[i + 1])).astype(dtype)
        topo.append(LayerRecord(name, "linear", dims[i], dims[i + 1], tag=(tags[i] if tags else "")))
        if i < n - 1:
            topo.append(LayerRecord(f"act{i}", "nonlinearity", dims[i + 1], dims[i + 1], op=act))
    return Checkpoint(tensors, topo, {"model": "toy"})


def replay_layers(ckpt):
    """``[(W, b, act)]`` list for the dense replay oracle."""
    out = []
    topo = ckpt.topology
    for i, rec in enumerate(topo):
        if rec.kind != "linear":
            continue
        w = ckpt.tensors[rec.name]
        w = w.to_dense() if hasattr(w, "to_dense") else np.asarray(w)
        b = ckpt.tensors.get(f"{rec.name}.bias")
        nxt = topo[i + 1] if i + 1 < len(topo) else None
        act = nxt.op if nxt is not None and nxt.kind == "nonlinearity" else None
        out.append((w.astype(float), None if b is None else np.asarray(b, dtype=float).ravel(), act))
    return out
