"""The scene field: two shallow MLP decoders over the joint encoding.

field(x) concatenates the one-blob encoding of the normalized coordinate
with the interpolated hash-grid feature, decodes SDF plus a geometric
feature h through the geometry MLP, and decodes color from (one-blob, h)
through the color MLP with a sigmoid head. A small hand-rolled tape records
the intermediates so the backward pass can produce exact gradients for every
parameter and for the query points; gradients accumulate (+=) across batches.

Everything is float64. The matmul helper below pins the BLAS kernel path so
that batched evaluation and a pointwise loop agree bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .encoding import (
    GridTape,
    HashGridConfig,
    HashGridParams,
    OneBlobConfig,
    OneBlobTape,
    SceneBounds,
    grid_interpolate,
    grid_interpolate_backward,
    init_hash_grid,
    level_resolutions,
    one_blob_backward,
    one_blob_encode,
)
from .errors import TapeMismatch

CHECKPOINT_VERSION = 1


def stable_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x @ w with a fixed kernel path.

    Single-row inputs hit a gemv routine and matrices with fewer than 4
    columns hit a narrow kernel, both of which reorder the reduction relative
    to the general gemm path; pad to force the same path so per-row results
    do not depend on batch size.
    """
    n = x.shape[0]
    m = w.shape[1]
    xp = np.vstack([x, x[:1]]) if n == 1 else x
    if m < 4:
        wp = np.zeros((w.shape[0], 4))
        wp[:, :m] = w
        out = xp @ wp
        return out[:n, :m]
    return (xp @ w)[:n]


@dataclass
class MlpParams:
    """Plain fully connected stack; weights[i] is (fan_in, fan_out)."""

    weights: list
    biases: list
    activation: str = "relu"

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]


def init_mlp(dims: list[int], rng: np.random.Generator) -> MlpParams:
    """Uniform +-sqrt(1/fan_in) init for weights and biases."""
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(1.0 / fan_in)
        ws.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        bs.append(rng.uniform(-bound, bound, fan_out))
    return MlpParams(weights=ws, biases=bs)


@dataclass
class MlpTape:
    inputs: list       # input to each layer, (N, fan_in)
    preacts: list      # pre-activation of hidden layers, (N, fan_out)
    out: np.ndarray    # final output after head activation


def mlp_forward(mlp: MlpParams, x: np.ndarray, out_act: str | None = None):
    inputs, preacts = [], []
    h = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        inputs.append(h)
        z = stable_matmul(h, w) + b
        if i < last:
            preacts.append(z)
            h = np.maximum(z, 0.0)
        else:
            h = z
    if out_act == "sigmoid":
        h = 1.0 / (1.0 + np.exp(-h))
    elif out_act is not None:
        raise ValueError(f"unknown output activation {out_act!r}")
    return h, MlpTape(inputs=inputs, preacts=preacts, out=h)


def mlp_backward(
    mlp: MlpParams, tape: MlpTape, grad_out: np.ndarray, out_act: str | None = None
):
    """Returns (grad_x, [grad_W...], [grad_b...]); fresh arrays, batch-summed."""
    g = grad_out
    if out_act == "sigmoid":
        g = g * tape.out * (1.0 - tape.out)
    grad_ws = [None] * len(mlp.weights)
    grad_bs = [None] * len(mlp.weights)
    last = len(mlp.weights) - 1
    for i in range(last, -1, -1):
        grad_ws[i] = tape.inputs[i].T @ g
        grad_bs[i] = g.sum(axis=0)
        g = g @ mlp.weights[i].T
        if i > 0:
            g = g * (tape.preacts[i - 1] > 0.0)
    return g, grad_ws, grad_bs


@dataclass
class SceneParams:
    """All learnable state plus the static encode configuration."""

    grid: HashGridParams
    geo: MlpParams
    color: MlpParams
    bounds: SceneBounds
    oneblob: OneBlobConfig
    h_dim: int

    def validate(self) -> None:
        ob_dim = 3 * self.oneblob.bins
        if self.geo.in_dim != ob_dim + self.grid.output_dim:
            raise ValueError("geometry MLP input dim mismatch")
        if self.geo.out_dim != 1 + self.h_dim:
            raise ValueError("geometry MLP output dim mismatch")
        if self.color.in_dim != ob_dim + self.h_dim:
            raise ValueError("color MLP input dim mismatch")
        if self.color.out_dim != 3:
            raise ValueError("color MLP output dim mismatch")


def init_scene_params(
    grid_cfg: HashGridConfig,
    oneblob_cfg: OneBlobConfig,
    bounds: SceneBounds,
    hidden: int,
    h_dim: int,
    truncation: float,
    rng: np.random.Generator,
) -> SceneParams:
    grid = init_hash_grid(grid_cfg, bounds, rng)
    ob_dim = 3 * oneblob_cfg.bins
    geo = init_mlp([ob_dim + grid.output_dim, hidden, 1 + h_dim], rng)
    color = init_mlp([ob_dim + h_dim, hidden, 3], rng)
    # untouched space should read as free space: bias the SDF head to +tr
    geo.biases[-1][0] = truncation
    params = SceneParams(
        grid=grid, geo=geo, color=color, bounds=bounds, oneblob=oneblob_cfg, h_dim=h_dim
    )
    params.validate()
    return params


@dataclass
class FieldOutput:
    sdf: np.ndarray     # (N,)
    color: np.ndarray   # (N, 3) in (0,1)
    h: np.ndarray       # (N, h_dim)


@dataclass
class FieldTape:
    ob: OneBlobTape
    grid: GridTape
    geo: MlpTape
    col: MlpTape
    gamma: np.ndarray
    n: int
    params_token: int


def field_forward(params: SceneParams, x: np.ndarray) -> tuple[FieldOutput, FieldTape]:
    """Evaluate (sdf, color, h) at world points x (N, 3)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    u = params.bounds.normalize(x)
    gamma, ob_tape = one_blob_encode(u, params.oneblob)
    gfeat, grid_tape = grid_interpolate(params.grid, params.bounds, x)
    geo_in = np.concatenate([gamma, gfeat], axis=1)
    geo_out, geo_tape = mlp_forward(params.geo, geo_in)
    sdf = geo_out[:, 0]
    h = geo_out[:, 1:]
    col_in = np.concatenate([gamma, h], axis=1)
    color, col_tape = mlp_forward(params.color, col_in, out_act="sigmoid")
    out = FieldOutput(sdf=sdf, color=color, h=h)
    tape = FieldTape(
        ob=ob_tape,
        grid=grid_tape,
        geo=geo_tape,
        col=col_tape,
        gamma=gamma,
        n=x.shape[0],
        params_token=id(params),
    )
    return out, tape


@dataclass
class SceneGrads:
    """Gradient buffers mirroring SceneParams; accumulated with +=."""

    grid: list
    geo_w: list
    geo_b: list
    color_w: list
    color_b: list

    @staticmethod
    def zeros(params: SceneParams) -> "SceneGrads":
        return SceneGrads(
            grid=[np.zeros_like(t) for t in params.grid.features],
            geo_w=[np.zeros_like(w) for w in params.geo.weights],
            geo_b=[np.zeros_like(b) for b in params.geo.biases],
            color_w=[np.zeros_like(w) for w in params.color.weights],
            color_b=[np.zeros_like(b) for b in params.color.biases],
        )

    def arrays(self) -> list:
        return self.grid + self.geo_w + self.geo_b + self.color_w + self.color_b


def param_arrays(params: SceneParams) -> list:
    """Learnable arrays in the same order as SceneGrads.arrays()."""
    return (
        params.grid.features
        + params.geo.weights
        + params.geo.biases
        + params.color.weights
        + params.color.biases
    )


def field_backward(
    params: SceneParams,
    tape: FieldTape,
    grad_sdf: np.ndarray,
    grad_color: np.ndarray,
    grads: SceneGrads | None,
    need_x_grad: bool = False,
) -> np.ndarray | None:
    """Accumulate dL/dparams into grads given dL/dsdf and dL/dcolor.

    Returns dL/dx (world meters) when need_x_grad is set. Pass grads=None to
    skip the parameter scatter (tracking holds the field frozen).
    """
    if tape.params_token != id(params):
        raise TapeMismatch("tape was recorded against different SceneParams")
    if grad_sdf.shape[0] != tape.n or grad_color.shape[0] != tape.n:
        raise TapeMismatch("gradient batch size does not match tape")
    ob_dim = 3 * params.oneblob.bins

    g_colin, cw, cb = mlp_backward(params.color, tape.col, grad_color, out_act="sigmoid")
    g_gamma_c = g_colin[:, :ob_dim]
    g_h = g_colin[:, ob_dim:]

    geo_grad_out = np.concatenate([grad_sdf[:, None], g_h], axis=1)
    g_geoin, gw, gb = mlp_backward(params.geo, tape.geo, geo_grad_out)
    g_gamma = g_geoin[:, :ob_dim] + g_gamma_c
    g_gfeat = g_geoin[:, ob_dim:]

    if grads is not None:
        for i in range(len(gw)):
            grads.geo_w[i] += gw[i]
            grads.geo_b[i] += gb[i]
        for i in range(len(cw)):
            grads.color_w[i] += cw[i]
            grads.color_b[i] += cb[i]
    grad_x = grid_interpolate_backward(
        params.grid,
        tape.grid,
        g_gfeat,
        grads.grid if grads is not None else None,
        need_x_grad=need_x_grad,
    )
    if need_x_grad:
        g_u = one_blob_backward(tape.ob, g_gamma)
        grad_x = grad_x + g_u / params.bounds.extent
    return grad_x


def save_checkpoint(params: SceneParams, path) -> None:
    """Single-file serialization: arrays in npz plus a JSON header."""
    header = {
        "version": CHECKPOINT_VERSION,
        "grid_config": {
            "levels": params.grid.config.levels,
            "r_min": params.grid.config.r_min,
            "finest_voxel": params.grid.config.finest_voxel,
            "table_size_log2": params.grid.config.table_size_log2,
            "feature_dim": params.grid.config.feature_dim,
        },
        "oneblob_bins": params.oneblob.bins,
        "h_dim": params.h_dim,
        "bounds_min": params.bounds.min.tolist(),
        "bounds_max": params.bounds.max.tolist(),
        "n_grid_levels": len(params.grid.features),
        "n_geo_layers": len(params.geo.weights),
        "n_color_layers": len(params.color.weights),
    }
    arrays = {"header_json": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for i, t in enumerate(params.grid.features):
        arrays[f"grid_{i}"] = t
    for i, (w, b) in enumerate(zip(params.geo.weights, params.geo.biases)):
        arrays[f"geo_w{i}"] = w
        arrays[f"geo_b{i}"] = b
    for i, (w, b) in enumerate(zip(params.color.weights, params.color.biases)):
        arrays[f"color_w{i}"] = w
        arrays[f"color_b{i}"] = b
    np.savez_compressed(path, **arrays)


def load_checkpoint(path) -> SceneParams:
    with np.load(path) as data:
        header = json.loads(bytes(data["header_json"]).decode())
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        bounds = SceneBounds(
            min=np.array(header["bounds_min"]), max=np.array(header["bounds_max"])
        )
        grid_cfg = HashGridConfig(**header["grid_config"])
        feats = [np.array(data[f"grid_{i}"]) for i in range(header["n_grid_levels"])]
        grid = HashGridParams(
            features=feats, config=grid_cfg, resolutions=level_resolutions(grid_cfg, bounds)
        )
        geo = MlpParams(
            weights=[np.array(data[f"geo_w{i}"]) for i in range(header["n_geo_layers"])],
            biases=[np.array(data[f"geo_b{i}"]) for i in range(header["n_geo_layers"])],
        )
        color = MlpParams(
            weights=[np.array(data[f"color_w{i}"]) for i in range(header["n_color_layers"])],
            biases=[np.array(data[f"color_b{i}"]) for i in range(header["n_color_layers"])],
        )
        params = SceneParams(
            grid=grid,
            geo=geo,
            color=color,
            bounds=bounds,
            oneblob=OneBlobConfig(bins=header["oneblob_bins"]),
            h_dim=header["h_dim"],
        )
    params.validate()
    return params


def field_functions(params: SceneParams):
    """Adapters matching the renderer's field_eval / field_grad protocol."""

    def ev(x: np.ndarray):
        out, tape = field_forward(params, x)
        return out.sdf, out.color, tape

    def bw(tape, grad_sdf, grad_color, grads, need_x_grad):
        return field_backward(params, tape, grad_sdf, grad_color, grads, need_x_grad)

    return ev, bw
