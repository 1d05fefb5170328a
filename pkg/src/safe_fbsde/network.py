"""Value-gradient predictor: two stacked LSTM layers and a linear head.

The same parameters are shared across every timestep of a rollout; the
prediction at time t depends on the whole state prefix through the
recurrent state. The scalar initial value estimate and the initial
hidden/cell states of both layers are trainable alongside the weights.

Parameters live in plain dataclasses of float64 arrays; wrapping them in
tape Vars (`wrap_params`) makes every operation differentiable end to end.
Archives are a single file: one JSON manifest line followed by the raw
little-endian float64 tensor blob.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import diff_engine as de

HIDDEN = 16

_GATES = ("w_i", "w_f", "w_g", "w_o", "b_i", "b_f", "b_g", "b_o")


@dataclass
class LstmLayerParams:
    """Gate weights over [input, hidden] concatenation, plus biases."""

    w_i: Any
    w_f: Any
    w_g: Any
    w_o: Any
    b_i: Any
    b_f: Any
    b_g: Any
    b_o: Any


@dataclass
class NetworkParams:
    layer1: LstmLayerParams
    layer2: LstmLayerParams
    head_w: Any  # (HIDDEN, n_x)
    head_b: Any  # (n_x,)
    psi: Any  # scalar: value estimate at the initial state/time
    h0_1: Any
    c0_1: Any
    h0_2: Any
    c0_2: Any
    n_x: int


@dataclass
class RecurrentState:
    h1: Any
    c1: Any
    h2: Any
    c2: Any


def param_count(n_x: int) -> int:
    """Closed-form number of trainable scalars."""
    return (
        4 * HIDDEN * (n_x + HIDDEN + 1)
        + 4 * HIDDEN * (HIDDEN + HIDDEN + 1)
        + (HIDDEN * n_x + n_x)
        + 1
        + 4 * HIDDEN
    )


def init_params(stream: np.random.Generator, n_x: int) -> NetworkParams:
    """Uniform(+-1/sqrt(fan_in)) weights, forget bias 1, zero everything else."""
    if n_x < 1:
        raise ValueError(f"n_x must be >= 1, got {n_x}")

    def layer(in_dim: int) -> LstmLayerParams:
        fan = in_dim + HIDDEN
        bound = 1.0 / np.sqrt(fan)
        ws = {g: stream.uniform(-bound, bound, size=(fan, HIDDEN)) for g in _GATES[:4]}
        bs = {g: np.zeros(HIDDEN) for g in _GATES[4:]}
        bs["b_f"] = np.ones(HIDDEN)
        return LstmLayerParams(**ws, **bs)

    head_bound = 1.0 / np.sqrt(HIDDEN)
    return NetworkParams(
        layer1=layer(n_x),
        layer2=layer(HIDDEN),
        head_w=stream.uniform(-head_bound, head_bound, size=(HIDDEN, n_x)),
        head_b=np.zeros(n_x),
        psi=np.zeros(()),
        h0_1=np.zeros(HIDDEN),
        c0_1=np.zeros(HIDDEN),
        h0_2=np.zeros(HIDDEN),
        c0_2=np.zeros(HIDDEN),
        n_x=n_x,
    )


def initial_state(params: NetworkParams, batch: int) -> RecurrentState:
    return RecurrentState(
        h1=de.broadcast_rows(params.h0_1, batch),
        c1=de.broadcast_rows(params.c0_1, batch),
        h2=de.broadcast_rows(params.h0_2, batch),
        c2=de.broadcast_rows(params.c0_2, batch),
    )


def _cell(layer: LstmLayerParams, x, h, c):
    z = de.concat([x, h], axis=1)
    gate_i = de.sigmoid(z @ layer.w_i + layer.b_i)
    gate_f = de.sigmoid(z @ layer.w_f + layer.b_f)
    gate_g = de.tanh(z @ layer.w_g + layer.b_g)
    gate_o = de.sigmoid(z @ layer.w_o + layer.b_o)
    c_new = gate_f * c + gate_i * gate_g
    h_new = gate_o * de.tanh(c_new)
    return h_new, c_new


def predict_vx(params: NetworkParams, x_t, state: RecurrentState):
    """One shared-weight forward pass: (M, n_x) state -> (M, n_x) value gradient."""
    h1, c1 = _cell(params.layer1, x_t, state.h1, state.c1)
    h2, c2 = _cell(params.layer2, h1, state.h2, state.c2)
    v_x = h2 @ params.head_w + params.head_b
    return v_x, RecurrentState(h1=h1, c1=c1, h2=h2, c2=c2)


# -- named flattening ------------------------------------------------------


def to_dict(params: NetworkParams) -> dict:
    out = {}
    for lname, layer in (("layer1", params.layer1), ("layer2", params.layer2)):
        for g in _GATES:
            out[f"{lname}.{g}"] = getattr(layer, g)
    out["head.w"] = params.head_w
    out["head.b"] = params.head_b
    out["psi"] = params.psi
    for n in ("h0_1", "c0_1", "h0_2", "c0_2"):
        out[n] = getattr(params, n)
    return out


def from_dict(tensors: dict, n_x: int) -> NetworkParams:
    def layer(lname: str) -> LstmLayerParams:
        return LstmLayerParams(**{g: tensors[f"{lname}.{g}"] for g in _GATES})

    return NetworkParams(
        layer1=layer("layer1"),
        layer2=layer("layer2"),
        head_w=tensors["head.w"],
        head_b=tensors["head.b"],
        psi=tensors["psi"],
        h0_1=tensors["h0_1"],
        c0_1=tensors["c0_1"],
        h0_2=tensors["h0_2"],
        c0_2=tensors["c0_2"],
        n_x=n_x,
    )


def wrap_params(params: NetworkParams):
    """Wrap every tensor in a named Var; returns (var_params, name->Var)."""
    leaves = {k: de.Var(np.array(v, dtype=np.float64, copy=True), name=k) for k, v in to_dict(params).items()}
    return from_dict(leaves, params.n_x), leaves


ARCHIVE_FORMAT = "safe-fbsde-tensors-v1"


def save_params(params: NetworkParams, path) -> None:
    """Single-file archive: JSON manifest line + little-endian float64 blob."""
    tensors = to_dict(params)
    manifest = {"format": ARCHIVE_FORMAT, "dtype": "<f8", "n_x": params.n_x, "tensors": []}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(de.value_of(tensors[name])).astype("<f8", order="C")
        manifest["tensors"].append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode("ascii") + b"\n")
        for b in blobs:
            f.write(b)


def load_params(path) -> NetworkParams:
    raw = Path(path).read_bytes()
    header, _, blob = raw.partition(b"\n")
    manifest = json.loads(header.decode("ascii"))
    if manifest.get("format") != ARCHIVE_FORMAT:
        raise ValueError(f"unrecognized parameter archive {path}")
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64)
    return from_dict(tensors, int(manifest["n_x"]))
