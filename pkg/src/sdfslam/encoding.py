"""Input encodings: one-blob coordinate kernels and a multiresolution hash grid.

A world point is normalized into the unit cube by the scene bounds, encoded
per axis by a bank of Gaussian bin kernels (one-blob), and in parallel looked
up in L levels of trilinearly interpolated feature tables whose per-axis
resolutions grow geometrically from r_min to r_max. Coarse levels whose
vertex count fits the table are indexed densely (row-major); finer levels use
the classic XOR-of-primes spatial hash.

All arrays are float64; gradients for the tables and for the query point are
exact (the bin truncation and the voxel-face kinks are treated as constants,
matching the finite-difference tolerances used in the tests).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfBounds, OutOfUnitCube

# Spatial hash primes; the first is 1 so the x coordinate enters unmixed.
HASH_PRIMES = (1, 2654435761, 805459861)

# One-blob activations below this threshold are flushed to zero (the kernel
# support is effectively +-4 sigma).
ONEBLOB_TRUNCATION = 1e-8

# Slack for "inside the unit cube" / "inside bounds" checks.
BOUNDS_EPS = 1e-9

# Corner offsets of a voxel, x varying fastest.
OFFSETS = np.array(
    [[i & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)], dtype=np.int64
)


@dataclass(frozen=True)
class SceneBounds:
    """Axis-aligned box enclosing the scene, meters."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", np.asarray(self.min, dtype=np.float64))
        object.__setattr__(self, "max", np.asarray(self.max, dtype=np.float64))
        if not np.all(self.max > self.min):
            raise ValueError("bounds max must exceed min componentwise")

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """Map world points into [0,1]^3, rejecting points outside bounds."""
        x = np.asarray(x, dtype=np.float64)
        u = (x - self.min) / self.extent
        if np.any(u < -BOUNDS_EPS) or np.any(u > 1.0 + BOUNDS_EPS):
            worst = float(np.max(np.abs(u - np.clip(u, 0.0, 1.0))))
            raise OutOfBounds(f"point outside scene bounds by {worst:.3g} (normalized)")
        return np.clip(u, 0.0, 1.0)


@dataclass(frozen=True)
class OneBlobConfig:
    bins: int = 16

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("one-blob needs at least 2 bins")


@dataclass
class OneBlobTape:
    u: np.ndarray          # normalized coords actually encoded, (N, 3)
    act: np.ndarray        # truncated activations, (N, 3, bins)
    cfg: OneBlobConfig


def one_blob_encode(u: np.ndarray, cfg: OneBlobConfig) -> tuple[np.ndarray, OneBlobTape]:
    """Per-axis Gaussian bin activations, concatenated over the 3 axes.

    u: (N, 3) coordinates in the unit cube. Returns ((N, 3*bins), tape).
    Kernel centers are (i + 0.5)/bins with sigma = 1/bins, unnormalized, no
    wrap-around; activations below the truncation threshold become exactly 0.
    """
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < -BOUNDS_EPS) or np.any(u > 1.0 + BOUNDS_EPS):
        raise OutOfUnitCube("one-blob input outside [0,1] by more than 1e-9")
    u = np.clip(u, 0.0, 1.0)
    bins = cfg.bins
    centers = (np.arange(bins) + 0.5) / bins
    sigma = 1.0 / bins
    z = (u[..., None] - centers) / sigma
    act = np.exp(-0.5 * z * z)
    act[act < ONEBLOB_TRUNCATION] = 0.0
    tape = OneBlobTape(u=u, act=act, cfg=cfg)
    return act.reshape(u.shape[0], 3 * bins), tape


def one_blob_backward(tape: OneBlobTape, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of sum(grad_out * encoding) w.r.t. the normalized coords."""
    bins = tape.cfg.bins
    centers = (np.arange(bins) + 0.5) / bins
    sigma = 1.0 / bins
    g = grad_out.reshape(tape.act.shape)
    dact_du = tape.act * (centers - tape.u[..., None]) / sigma**2
    return np.sum(g * dact_du, axis=-1)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    r_min: int = 16
    finest_voxel: float = 0.02   # meters; sets r_max from the largest extent
    table_size_log2: int = 13
    feature_dim: int = 2
    force_hash: bool = False     # testing hook: disable the dense fallback

    def __post_init__(self):
        if self.levels < 1 or self.r_min < 1:
            raise ValueError("levels and r_min must be positive")
        if self.finest_voxel <= 0.0:
            raise ValueError("finest_voxel must be positive")

    @property
    def table_size(self) -> int:
        return 2**self.table_size_log2


def level_resolutions(cfg: HashGridConfig, bounds: SceneBounds) -> tuple[int, ...]:
    """Per-level cell counts, geometric from r_min to ceil(extent/voxel)."""
    r_max = int(np.ceil(np.max(bounds.extent) / cfg.finest_voxel))
    r_max = max(r_max, cfg.r_min)
    if cfg.levels == 1:
        return (r_max,)
    b = np.exp((np.log(r_max) - np.log(cfg.r_min)) / (cfg.levels - 1))
    # the 1e-9 guard keeps the top level from rounding to r_max - 1
    return tuple(int(np.floor(cfg.r_min * b**l + 1e-9)) for l in range(cfg.levels))


@dataclass
class HashGridParams:
    """Learnable feature tables plus the static level layout."""

    features: list            # per level: (table_size, feature_dim) float64
    config: HashGridConfig
    resolutions: tuple

    @property
    def output_dim(self) -> int:
        return self.config.levels * self.config.feature_dim


def init_hash_grid(
    cfg: HashGridConfig, bounds: SceneBounds, rng: np.random.Generator
) -> HashGridParams:
    """Fresh grid with features uniform in +-1e-4 (keeps the early SDF flat)."""
    res = level_resolutions(cfg, bounds)
    feats = [
        rng.uniform(-1e-4, 1e-4, (cfg.table_size, cfg.feature_dim)) for _ in res
    ]
    return HashGridParams(features=feats, config=cfg, resolutions=res)


def hash_index(
    cell: np.ndarray, level_res: int, table_size: int, force_hash: bool = False
) -> np.ndarray:
    """Map integer vertex coords to table slots.

    Dense row-major indexing (x + y*(res+1) + z*(res+1)^2) whenever the
    level's vertex lattice fits the table; XOR-of-primes hashing otherwise.
    """
    cell = np.asarray(cell, dtype=np.int64)
    squeeze = cell.ndim == 1
    cell = np.atleast_2d(cell)
    n_vertices = (level_res + 1) ** 3
    if n_vertices <= table_size and not force_hash:
        idx = cell[:, 0] + cell[:, 1] * (level_res + 1) + cell[:, 2] * (level_res + 1) ** 2
    else:
        idx = (
            cell[:, 0] * HASH_PRIMES[0]
            ^ cell[:, 1] * HASH_PRIMES[1]
            ^ cell[:, 2] * HASH_PRIMES[2]
        ) % table_size
    return idx[0] if squeeze else idx


def trilinear_weights(frac: np.ndarray) -> np.ndarray:
    """(..., 3) in-cell fractions -> (..., 8) corner weights (sum to 1)."""
    frac = np.atleast_2d(frac)
    tx = (1.0 - frac[..., 0], frac[..., 0])
    ty = (1.0 - frac[..., 1], frac[..., 1])
    tz = (1.0 - frac[..., 2], frac[..., 2])
    w = np.empty(frac.shape[:-1] + (8,))
    for c, (ox, oy, oz) in enumerate(OFFSETS):
        w[..., c] = tx[ox] * ty[oy] * tz[oz]
    return w


@dataclass
class GridTape:
    """Level-stacked lookup record.

    idx (L,N,8) indexes the level-concatenated feature table (level l's
    slots live in [l*table_size, (l+1)*table_size)); frac is (L,N,3) and
    scale (L,3) is d frac / d x_world per level.
    """

    idx: np.ndarray
    frac: np.ndarray
    scale: np.ndarray
    n: int
    token: int = field(default=0)


def _all_level_indices(params: HashGridParams, cell: np.ndarray) -> np.ndarray:
    """Concatenated-table slots for the 8 corners of (L, N, 3) base cells.

    Matches hash_index per level (dense row-major when the level fits the
    table, XOR hash otherwise) shifted by level * table_size.  Dense levels
    form a prefix because resolutions ascend.  table_size is a power of two
    so the modulo reduces to a mask (coords and primes are non-negative).
    """
    table = params.config.table_size
    mask = table - 1
    levels = len(params.resolutions)
    res = np.asarray(params.resolutions, dtype=np.int64)
    nd = 0 if params.config.force_hash else int(np.sum((res + 1) ** 3 <= table))
    r1 = (res[:nd] + 1)[:, None]
    off = (np.arange(levels, dtype=np.int64) * table)[:, None]
    cx, cy, cz = cell[..., 0], cell[..., 1], cell[..., 2]
    idx = np.empty(cell.shape[:2] + (8,), dtype=np.int64)
    for c, (ox, oy, oz) in enumerate(OFFSETS):
        x = cx + ox if ox else cx
        y = cy + oy if oy else cy
        z = cz + oz if oz else cz
        idx[:nd, :, c] = x[:nd] + (y[:nd] + z[:nd] * r1) * r1 + off[:nd]
        hashed = x[nd:] ^ y[nd:] * HASH_PRIMES[1] ^ z[nd:] * HASH_PRIMES[2]
        idx[nd:, :, c] = (hashed & mask) + off[nd:]
    return idx


def grid_interpolate(
    params: HashGridParams, bounds: SceneBounds, x: np.ndarray
) -> tuple[np.ndarray, GridTape]:
    """Concatenated trilinear feature lookup over all levels.

    x: (N, 3) world points inside bounds. Returns ((N, L*F), tape).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    u = bounds.normalize(x)
    n = x.shape[0]
    fdim = params.config.feature_dim
    levels = len(params.resolutions)
    res = np.asarray(params.resolutions, dtype=np.float64)

    pos = u[None, :, :] * res[:, None, None]                        # (L, N, 3)
    cell = np.clip(
        np.floor(pos).astype(np.int64), 0, (res - 1).astype(np.int64)[:, None, None]
    )
    frac = pos - cell
    idx = _all_level_indices(params, cell)                          # (L, N, 8)

    w = trilinear_weights(frac)                                     # (L, N, 8)
    stacked = np.concatenate(params.features, axis=0)               # (L*T, F)
    gathered = stacked[idx]                                         # (L, N, 8, F)
    feat = np.einsum("lnc,lncf->lnf", w, gathered)
    out = feat.transpose(1, 0, 2).reshape(n, levels * fdim)

    scale = res[:, None] / bounds.extent[None, :]                   # (L, 3)
    return out, GridTape(idx=idx, frac=frac, scale=scale, n=n, token=id(params))


def grid_interpolate_backward(
    params: HashGridParams,
    tape: GridTape,
    grad_out: np.ndarray,
    grad_tables: list | None,
    need_x_grad: bool = False,
) -> np.ndarray | None:
    """Scatter grad_out into per-table gradients; optionally return dL/dx.

    grad_tables entries are accumulated in place (+=). The x gradient is in
    world meters (the chain through the bounds normalization is included).
    Tables must not have been mutated since the forward pass: the x gradient
    re-gathers corner features from params instead of storing them.
    """
    fdim = params.config.feature_dim
    table = params.config.table_size
    levels = tape.idx.shape[0]
    g = grad_out.reshape(tape.n, levels, fdim).transpose(1, 0, 2)   # (L, N, F)
    w = trilinear_weights(tape.frac)                                # (L, N, 8)

    if grad_tables is not None:
        contrib = w[..., None] * g[:, :, None, :]                   # (L, N, 8, F)
        flat = tape.idx.ravel()
        for f in range(fdim):
            counts = np.bincount(
                flat, weights=contrib[..., f].ravel(), minlength=levels * table
            ).reshape(levels, table)
            for lvl in range(levels):
                grad_tables[lvl][:, f] += counts[lvl]

    if not need_x_grad:
        return None
    stacked = np.concatenate(params.features, axis=0)
    gathered = stacked[tape.idx]                                    # (L, N, 8, F)
    dot = np.einsum("lncf,lnf->lnc", gathered, g)                   # (L, N, 8)
    tx = (1.0 - tape.frac[..., 0], tape.frac[..., 0])
    ty = (1.0 - tape.frac[..., 1], tape.frac[..., 1])
    tz = (1.0 - tape.frac[..., 2], tape.frac[..., 2])
    acc = np.zeros((3,) + tape.frac.shape[:2])                      # (3, L, N)
    for c, (ox, oy, oz) in enumerate(OFFSETS):
        d = dot[..., c]
        acc[0] += (d if ox else -d) * ty[oy] * tz[oz]
        acc[1] += (d if oy else -d) * tx[ox] * tz[oz]
        acc[2] += (d if oz else -d) * tx[ox] * ty[oy]
    return np.einsum("dln,ld->nd", acc, tape.scale)


@dataclass
class SmoothTape:
    base: np.ndarray       # (3,) coarse-vertex origin of the region
    region: int
    gtape: GridTape
    dx: np.ndarray
    dy: np.ndarray
    dz: np.ndarray


def smoothness_sample(
    params: HashGridParams,
    bounds: SceneBounds,
    region_size: int,
    rng: np.random.Generator,
) -> tuple[float, SmoothTape]:
    """Feature-metric smoothness over a random sub-box of coarse vertices.

    Interpolates the full multi-level feature at a region_size^3 block of
    coarsest-level vertex positions and averages squared adjacent differences
    along the three axes over the |G| = region_size^3 vertices.
    """
    if region_size < 2:
        raise ValueError("smoothness region must span at least 2 vertices")
    res0 = params.resolutions[0]
    region = min(region_size, res0 + 1)
    base = rng.integers(0, res0 + 1 - region + 1, size=3)
    ax = np.arange(region)
    ii, jj, kk = np.meshgrid(ax, ax, ax, indexing="ij")
    offsets = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
    pos = bounds.min + bounds.extent * (base + offsets) / res0
    feats, gtape = grid_interpolate(params, bounds, pos)
    f3 = feats.reshape(region, region, region, -1)
    dx = f3[1:, :, :, :] - f3[:-1, :, :, :]
    dy = f3[:, 1:, :, :] - f3[:, :-1, :, :]
    dz = f3[:, :, 1:, :] - f3[:, :, :-1, :]
    loss = (np.sum(dx**2) + np.sum(dy**2) + np.sum(dz**2)) / region**3
    return float(loss), SmoothTape(base=base, region=region, gtape=gtape, dx=dx, dy=dy, dz=dz)


def smoothness_backward(
    params: HashGridParams, tape: SmoothTape, grad_tables: list, scale: float
) -> None:
    """Accumulate scale * d(smoothness)/d(features) into grad_tables."""
    r = tape.region
    lf = params.output_dim
    grad_f = np.zeros((r, r, r, lf))
    c = 2.0 * scale / r**3
    grad_f[1:, :, :, :] += c * tape.dx
    grad_f[:-1, :, :, :] -= c * tape.dx
    grad_f[:, 1:, :, :] += c * tape.dy
    grad_f[:, :-1, :, :] -= c * tape.dy
    grad_f[:, :, 1:, :] += c * tape.dz
    grad_f[:, :, :-1, :] -= c * tape.dz
    grid_interpolate_backward(params, tape.gtape, grad_f.reshape(-1, lf), grad_tables)
