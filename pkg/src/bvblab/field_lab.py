"""Discrete grid laboratory: fields on uniform box grids, finite-difference
operator application, jump synthesis and detection, densities, Riesz
potentials, polynomial projections, and the structure / quasi-continuity
checks built on them.

Discretization conventions (chosen so that piecewise-constant jumps register
exactly one crossing per grid column and axis-aligned interface densities are
exact):

* fields are sampled at cell centers;
* operators act by forward differences of step h composed per multi-index;
* a boundary layer of width k cells carries zero mass and is thereby excluded
  from every region query;
* cell masses are densities times h^n, so region sums approximate measures.

Half-ball membership around a point x uses the centered inner product
``<nu, y - x>``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .ellipticity import sphere_grid
from .operator_algebra import DiffOperator, PolynomialField, b_tensor, ell_bound
from .tensor_core import (
    SymIndexSet,
    mi_binom,
    mi_factorial,
    mi_order,
    mi_power,
    mi_sub,
    multiindex_enumerate,
)

GRID_MAGIC = b"BVBGRID\x00"
GRID_VERSION = 1


class QuasiContinuityViolation(RuntimeError):
    """A nonzero polynomial-approximation error over a region of zero mass."""


# --- grids and measures -------------------------------------------------------

def _as_box(lo, hi, n: int) -> tuple[np.ndarray, np.ndarray]:
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,)).copy()
    if not np.all(hi > lo):
        raise ValueError("box upper corner must exceed lower corner")
    return lo, hi


def _grid_dims(lo: np.ndarray, hi: np.ndarray, h: float) -> tuple[int, ...]:
    counts = (hi - lo) / h
    rounded = np.rint(counts)
    if not np.allclose(counts, rounded, rtol=0, atol=1e-9 * np.maximum(1, np.abs(counts)).max()):
        raise ValueError(f"box extents {hi - lo} are not integer multiples of h={h}")
    return tuple(int(c) for c in rounded)


@dataclass(frozen=True)
class GridField:
    """A V-valued function sampled at the cell centers of a uniform box grid."""

    box_lo: np.ndarray
    box_hi: np.ndarray
    h: float
    values: np.ndarray  # (*dims, dim_v)

    def __post_init__(self):
        lo, hi = _as_box(self.box_lo, self.box_hi, len(np.atleast_1d(self.box_lo)))
        object.__setattr__(self, "box_lo", lo)
        object.__setattr__(self, "box_hi", hi)
        vals = np.asarray(self.values, dtype=float)
        dims = _grid_dims(lo, hi, self.h)
        if vals.shape[:-1] != dims:
            raise ValueError(f"values shape {vals.shape} does not match grid dims {dims}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return len(self.box_lo)

    @property
    def dim_v(self) -> int:
        return self.values.shape[-1]

    @property
    def dims(self) -> tuple[int, ...]:
        return self.values.shape[:-1]

    def axis_centers(self, i: int) -> np.ndarray:
        return self.box_lo[i] + (np.arange(self.dims[i]) + 0.5) * self.h

    def center_grid(self) -> np.ndarray:
        """Cell centers as an (*dims, n) array."""
        axes = [self.axis_centers(i) for i in range(self.n)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def cell_centers(self) -> np.ndarray:
        """Cell centers flattened to (num_cells, n), C order."""
        return self.center_grid().reshape(-1, self.n)

    def save(self, path: str) -> None:
        """Little-endian binary: 16-byte magic/version, header, row-major data."""
        with open(path, "wb") as f:
            f.write(GRID_MAGIC + struct.pack("<II", GRID_VERSION, 0))
            f.write(struct.pack("<I", self.n))
            f.write(struct.pack(f"<{self.n}d", *self.box_lo))
            f.write(struct.pack(f"<{self.n}d", *self.box_hi))
            f.write(struct.pack("<d", self.h))
            f.write(struct.pack("<I", self.dim_v))
            f.write(struct.pack(f"<{self.n}I", *self.dims))
            f.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "GridField":
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != GRID_MAGIC:
                raise ValueError("not a grid-field file (bad magic)")
            version, _ = struct.unpack("<II", f.read(8))
            if version != GRID_VERSION:
                raise ValueError(f"unsupported grid-field version {version}")
            (n,) = struct.unpack("<I", f.read(4))
            lo = np.array(struct.unpack(f"<{n}d", f.read(8 * n)))
            hi = np.array(struct.unpack(f"<{n}d", f.read(8 * n)))
            (h,) = struct.unpack("<d", f.read(8))
            (dim_v,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{n}I", f.read(4 * n))
            count = int(np.prod(dims)) * dim_v
            data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(*dims, dim_v)
            return cls(lo, hi, h, data.astype(float))


@dataclass(frozen=True)
class MeasureField:
    """A W-valued measure discretized as one mass vector per grid cell."""

    box_lo: np.ndarray
    box_hi: np.ndarray
    h: float
    cell_masses: np.ndarray  # (*dims, dim_w)

    def __post_init__(self):
        lo, hi = _as_box(self.box_lo, self.box_hi, len(np.atleast_1d(self.box_lo)))
        object.__setattr__(self, "box_lo", lo)
        object.__setattr__(self, "box_hi", hi)
        m = np.asarray(self.cell_masses, dtype=float)
        if m.shape[:-1] != _grid_dims(lo, hi, self.h):
            raise ValueError("cell_masses shape does not match grid dims")
        if not np.all(np.isfinite(m)):
            raise ValueError("cell masses must be finite")
        object.__setattr__(self, "cell_masses", m)

    @property
    def n(self) -> int:
        return len(self.box_lo)

    @property
    def dim_w(self) -> int:
        return self.cell_masses.shape[-1]

    @property
    def dims(self) -> tuple[int, ...]:
        return self.cell_masses.shape[:-1]

    def axis_centers(self, i: int) -> np.ndarray:
        return self.box_lo[i] + (np.arange(self.dims[i]) + 0.5) * self.h

    def cell_centers(self) -> np.ndarray:
        axes = [self.axis_centers(i) for i in range(self.n)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return grid.reshape(-1, self.n)

    def mass_norms(self) -> np.ndarray:
        """Per-cell Euclidean mass, flattened; the discrete total variation."""
        return np.linalg.norm(self.cell_masses.reshape(-1, self.dim_w), axis=1)


@dataclass(frozen=True)
class JumpTriple:
    """One-sided values and orientation (a, b, nu) of an approximate jump.

    The pair ((a, b), nu) is equivalent to ((b, a), -nu); `normalized` picks
    the representative whose first nonzero normal component is positive.
    """

    a: np.ndarray
    b: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        nu = np.asarray(self.nu, dtype=float)
        if not np.linalg.norm(a - b) > 0:
            raise ValueError("jump values must differ")
        nrm = np.linalg.norm(nu)
        if not nrm > 0:
            raise ValueError("normal must be nonzero")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "nu", nu / nrm)

    def normalized(self) -> "JumpTriple":
        for c in self.nu:
            if abs(c) > 1e-12:
                if c < 0:
                    return JumpTriple(self.b, self.a, -self.nu)
                break
        return self


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        rel = points - np.asarray(self.center, dtype=float)
        return np.einsum("...i,...i->...", rel, rel) < self.radius ** 2


@dataclass(frozen=True)
class BoxRegion:
    lo: np.ndarray
    hi: np.ndarray

    def contains(self, points: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        return np.all((points >= lo) & (points <= hi), axis=-1)


@dataclass
class DensityProfile:
    """``tv(B_r(x)) / r^(n-1)`` per radius; no extrapolation below grid scale."""

    center: np.ndarray
    radii: list[float]
    values: list[float]

    def to_csv(self, path: str) -> None:
        write_profile_csv(path, self.radii, self.values)


def write_profile_csv(path: str, radii, values, header=("r", "value")) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for r, v in zip(radii, values):
            f.write(f"{r!r},{v!r}\n")


# --- discrete operator application ---------------------------------------------

def discrete_apply(op: DiffOperator, field: GridField) -> MeasureField:
    """Apply ``op`` by composed forward differences; masses are density * h^n.

    The boundary layer of width k cells (all sides) carries zero mass.
    """
    if op.n != field.n or op.dim_v != field.dim_v:
        raise ValueError("operator and field dimensions differ")
    if any(d < op.k + 1 for d in field.dims):
        raise ValueError(f"grid needs at least k+1={op.k + 1} cells per axis")
    dims = field.dims
    density = np.zeros(dims + (op.dim_w,))
    for alpha, mat in op.coeffs.items():
        d = field.values
        for axis, a in enumerate(alpha):
            for _ in range(a):
                d = np.diff(d, axis=axis)
        target = tuple(slice(0, dims[i] - alpha[i]) for i in range(op.n))
        density[target] += d @ mat.T
    density /= field.h ** op.k
    k = op.k
    for axis in range(op.n):
        sl_lo = tuple(slice(None) if i != axis else slice(0, k) for i in range(op.n))
        sl_hi = tuple(slice(None) if i != axis else slice(dims[axis] - k, None) for i in range(op.n))
        density[sl_lo] = 0.0
        density[sl_hi] = 0.0
    return MeasureField(field.box_lo, field.box_hi, field.h, density * field.h ** op.n)


def total_variation(mu: MeasureField, region) -> float:
    """Sum of cell mass norms over cells whose center lies in the region."""
    centers = mu.cell_centers()
    mask = region.contains(centers)
    if not np.any(mask):
        return 0.0
    return float(np.sum(mu.mass_norms()[mask]))


# --- synthesis ------------------------------------------------------------------

def synth_jump(p_plus: PolynomialField, p_minus: PolynomialField, nu: np.ndarray,
               offset: float, box, h: float) -> GridField:
    """Field equal to p_plus on the side ``<y - offset*nu, nu> >= 0``, p_minus below."""
    nu = np.asarray(nu, dtype=float)
    nrm = np.linalg.norm(nu)
    if not nrm > 0:
        raise ValueError("normal must be nonzero")
    nu = nu / nrm
    lo, hi = _as_box(box[0], box[1], len(nu))
    dims = _grid_dims(lo, hi, h)
    axes = [lo[i] + (np.arange(dims[i]) + 0.5) * h for i in range(len(nu))]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    signed = np.einsum("...i,i->...", centers - offset * nu, nu)
    vplus = p_plus(centers)
    vminus = p_minus(centers)
    values = np.where(signed[..., None] >= 0, vplus, vminus)
    return GridField(lo, hi, h, values)


def constant_field(value: np.ndarray, box, h: float, n: int) -> GridField:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    lo, hi = _as_box(box[0], box[1], n)
    dims = _grid_dims(lo, hi, h)
    return GridField(lo, hi, h, np.broadcast_to(value, dims + (len(value),)).copy())


def field_from_function(fn, box, h: float, n: int, dim_v: int) -> GridField:
    """Sample ``fn(centers) -> (..., dim_v)`` on the grid."""
    lo, hi = _as_box(box[0], box[1], n)
    dims = _grid_dims(lo, hi, h)
    axes = [lo[i] + (np.arange(dims[i]) + 0.5) * h for i in range(n)]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vals = np.asarray(fn(centers), dtype=float)
    if vals.shape != dims + (dim_v,):
        raise ValueError("field function returned wrong shape")
    return GridField(lo, hi, h, vals)


# --- one-sided averages and jump detection --------------------------------------

def _check_ball_inside(field: GridField, x: np.ndarray, r: float) -> None:
    if np.any(x - r < field.box_lo) or np.any(x + r > field.box_hi):
        raise ValueError(f"ball B_{r}({x}) is not inside the grid box")


def half_ball_avg(field: GridField, x: np.ndarray, nu: np.ndarray, r: float,
                  side: str) -> np.ndarray:
    """Mean of cell values with center in the nu-oriented half of B_r(x)."""
    if side not in ("+", "-"):
        raise ValueError("side must be '+' or '-'")
    x = np.asarray(x, dtype=float)
    nu = np.asarray(nu, dtype=float)
    nu = nu / np.linalg.norm(nu)
    _check_ball_inside(field, x, r)
    centers = field.cell_centers()
    rel = centers - x
    in_ball = np.einsum("ci,ci->c", rel, rel) < r * r
    proj = rel @ nu
    mask = in_ball & ((proj > 0) if side == "+" else (proj < 0))
    count = int(mask.sum())
    if count < 20:
        raise ValueError(f"half-ball contains only {count} cells (need >= 20)")
    return field.values.reshape(-1, field.dim_v)[mask].mean(axis=0)


def _refined_direction_scan(field: GridField, x: np.ndarray, r: float,
                            resolution: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Direction maximizing the one-sided mean gap at radius r.

    Coarse hemisphere grid followed by two rounds of shrinking-cap refinement;
    ties resolve to the first maximizer in scan order.
    """
    values = field.values.reshape(-1, field.dim_v)
    centers = field.cell_centers()
    step = math.pi / resolution

    def scan(dirs):
        mp, mn, cp, cn = _kernels.half_ball_means(values, centers, x, dirs, r)
        gaps = np.linalg.norm(mp - mn, axis=1)
        gaps[(cp < 1) | (cn < 1)] = -1.0
        best = int(np.argmax(gaps))
        return dirs[best], mp[best], mn[best]

    best_nu, mp, mn = scan(sphere_grid(field.n, resolution))
    for shrink in (4.0, 16.0):
        cap = step / shrink * 4.0
        local = _cap_grid(best_nu, cap, 48 if field.n == 3 else 17)
        best_nu, mp, mn = scan(local)
    return best_nu, mp, mn


def _cap_grid(center: np.ndarray, cap: float, count: int) -> np.ndarray:
    """Deterministic unit directions within angular radius ``cap`` of center."""
    n = len(center)
    basis = np.linalg.svd(center[None, :])[2][1:]
    if n == 2:
        ang = np.linspace(-cap, cap, count)
        return np.cos(ang)[:, None] * center + np.sin(ang)[:, None] * basis[0]
    i = np.arange(count)
    golden = (1 + math.sqrt(5.0)) / 2
    rho = cap * np.sqrt((i + 0.5) / count)
    theta = 2 * math.pi * i / golden
    tang = np.cos(theta)[:, None] * basis[0] + np.sin(theta)[:, None] * basis[1]
    dirs = np.cos(rho)[:, None] * center + np.sin(rho)[:, None] * tang
    return np.vstack([center, dirs / np.linalg.norm(dirs, axis=1, keepdims=True)])


def grid_noise_floor(field: GridField) -> float:
    """Median per-axis successive-difference magnitude: the h-scale variation
    of the smooth part, robust against a lower-dimensional jump set."""
    floors = []
    for axis in range(field.n):
        d = np.diff(field.values, axis=axis)
        mags = np.linalg.norm(d, axis=-1)
        if mags.size:
            floors.append(float(np.median(mags)))
    return max(floors) if floors else 0.0


def jump_detect(field: GridField, x: np.ndarray, radii, nu_grid_resolution: int = 48,
                noise_floor: float | None = None) -> JumpTriple | None:
    """Detect an approximate jump of the field at x, if any.

    Scans unit directions for the largest one-sided mean gap at the smallest
    radius, refines the direction locally, then accepts only when the
    one-sided means are Cauchy along the radii (successive variation below
    5% of the gap) and the gap clears 10x the grid noise floor.  Returns the
    normalized triple, or None.
    """
    x = np.asarray(x, dtype=float)
    radii = [float(r) for r in radii]
    if any(r2 >= r1 for r1, r2 in zip(radii, radii[1:])):
        raise ValueError("radii must be strictly decreasing")
    for r in radii:
        _check_ball_inside(field, x, r)
    if noise_floor is None:
        noise_floor = grid_noise_floor(field)

    nu, mp_small, mn_small = _refined_direction_scan(field, x, radii[-1], nu_grid_resolution)
    a, b = mp_small, mn_small
    gap = float(np.linalg.norm(a - b))
    if gap <= 10.0 * noise_floor or gap == 0.0:
        return None

    path_p, path_n = [], []
    for r in radii:
        try:
            path_p.append(half_ball_avg(field, x, nu, r, "+"))
            path_n.append(half_ball_avg(field, x, nu, r, "-"))
        except ValueError:
            return None
    for seq in (path_p, path_n):
        for u1, u2 in zip(seq, seq[1:]):
            if np.linalg.norm(u2 - u1) >= 0.05 * gap:
                return None
    return JumpTriple(a, b, nu).normalized()


# --- densities and potentials ----------------------------------------------------

def upper_density(mu: MeasureField, x: np.ndarray, radii) -> DensityProfile:
    """Profile ``tv(B_r(x)) / r^(n-1)``; the profile itself is the deliverable,
    nothing is extrapolated below grid scale."""
    x = np.asarray(x, dtype=float)
    radii = [float(r) for r in radii]
    if any(r2 >= r1 for r1, r2 in zip(radii, radii[1:])):
        raise ValueError("radii must be strictly decreasing")
    if any(r < 2 * mu.h for r in radii):
        raise ValueError("radii must be at least 2h")
    vals = [total_variation(mu, Ball(x, r)) / r ** (mu.n - 1) for r in radii]
    return DensityProfile(center=x, radii=radii, values=vals)


def _cell_of(mu: MeasureField, x: np.ndarray) -> int:
    """Flat index of the cell containing x, or -1 if outside the grid."""
    if np.any(x < mu.box_lo) or np.any(x > mu.box_hi):
        return -1
    idx = np.minimum(((x - mu.box_lo) / mu.h).astype(int), np.array(mu.dims) - 1)
    return int(np.ravel_multi_index(tuple(idx), mu.dims))


def riesz_potential(mu: MeasureField, x: np.ndarray, s: float) -> float:
    """``sum over cells != cell(x) of |x - center|^-(n-s) * |mass|``.

    The self cell is omitted rather than kernel-capped, keeping point-mass
    cases exact; the induced underestimate is O(h^s) for absolutely
    continuous measures.
    """
    if not 0 < s < mu.n:
        raise ValueError("require 0 < s < n")
    x = np.asarray(x, dtype=float)
    return _kernels.riesz_sum(mu.cell_centers(), mu.mass_norms(), x,
                              float(mu.n - s), _cell_of(mu, x))


def annulus_bound(mu: MeasureField, m: int, radii, outer: float = 1.0) -> list[float]:
    """Scaled annulus integrals ``r^m * sum over r <= |c| < outer of
    |c|^-(n-1+m) |mass|`` around the origin, one value per radius."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if np.any(mu.box_lo >= 0) or np.any(mu.box_hi <= 0):
        raise ValueError("the origin must be in the grid interior")
    radii = np.asarray([float(r) for r in radii])
    dists = np.linalg.norm(mu.cell_centers(), axis=1)
    sums = _kernels.annulus_sums(dists, mu.mass_norms(), radii,
                                 float(mu.n - 1 + m), float(outer))
    return [float(r ** m * s) for r, s in zip(radii, sums)]


# --- polynomial projection --------------------------------------------------------

@lru_cache(maxsize=256)
def _bump_derivative_fn(n: int, eta: tuple[int, ...]):
    """d^eta of exp(-1/(1-|zeta|^2)) in scaled coordinates, as a numpy callable."""
    import sympy as sp

    zs = sp.symbols(f"_z0:{n}")
    s = sum(z ** 2 for z in zs)
    expr = sp.exp(-1 / (1 - s))
    for i, e in enumerate(eta):
        for _ in range(e):
            expr = sp.diff(expr, zs[i])
    return sp.lambdify(zs, sp.simplify(expr), "numpy")


class StandardBump:
    """The profile exp(-1/(1-|zeta|^2)) scaled to B_r(x); z-derivatives
    evaluate analytically in the scaled coordinate."""

    def __init__(self, x: np.ndarray, r: float):
        self.x = np.asarray(x, dtype=float)
        self.r = float(r)

    def raw(self, points: np.ndarray, eta: tuple[int, ...]) -> np.ndarray:
        """d^eta_z of the unnormalized profile at absolute points."""
        zeta = (points - self.x) / self.r
        s = np.einsum("...i,...i->...", zeta, zeta)
        inside = s < 1.0 - 1e-12
        out = np.zeros(points.shape[:-1])
        if np.any(inside):
            fn = _bump_derivative_fn(points.shape[-1], tuple(eta))
            args = [zeta[inside][..., i] for i in range(points.shape[-1])]
            out[inside] = fn(*args)
        return out / self.r ** mi_order(tuple(eta))


def _gauss_cell_offsets(n: int, h: float, order: int):
    """Tensor Gauss-Legendre nodes/weights for averaging over one grid cell."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    pts_1d = 0.5 * h * nodes
    w_1d = 0.5 * weights  # averages to 1 over the cell
    offs = np.stack(np.meshgrid(*([pts_1d] * n), indexing="ij"), axis=-1).reshape(-1, n)
    ws = np.prod(
        np.stack(np.meshgrid(*([w_1d] * n), indexing="ij"), axis=-1).reshape(-1, n),
        axis=1,
    )
    return offs, ws


def poly_project(field: GridField, x: np.ndarray, r: float, ell: int,
                 bump: StandardBump | None = None,
                 cell_quad_order: int | None = None) -> PolynomialField:
    """Moment-based polynomial projection of degree <= ell-1 on B_r(x).

    Computes, by cell quadrature with the bump derivatives expanded
    analytically, the polynomial whose value at y is the integral over the
    ball of ``sum_{|beta|<=ell-1} d^beta_z((z-y)^beta / beta! w(z)) u(z)``.
    The analytic factor ``z^gamma d^eta w`` is integrated over each cell by a
    tensor Gauss rule while the field keeps its cell-center value, and the
    bump is normalized to unit integral under the same rule.  Reproduces
    polynomials of degree <= ell-1 up to the remaining quadrature error.
    """
    if ell < 1:
        raise ValueError("ell must be >= 1")
    x = np.asarray(x, dtype=float)
    _check_ball_inside(field, x, r)
    centers = field.cell_centers()
    rel = centers - x
    in_ball = np.einsum("ci,ci->c", rel, rel) < (r + 0.5 * field.h * math.sqrt(field.n)) ** 2
    if int(in_ball.sum()) < 8 ** field.n:
        raise ValueError(
            f"quadrature underresolved: {int(in_ball.sum())} cells in B_r "
            f"(need >= {8 ** field.n})"
        )
    pts = centers[in_ball]
    vals = field.values.reshape(-1, field.dim_v)[in_ball]
    hv = field.h ** field.n

    if bump is None:
        bump = StandardBump(x, r)
    if cell_quad_order is None:
        cell_quad_order = 6 if field.n <= 2 else 3
    offs, ws = _gauss_cell_offsets(field.n, field.h, cell_quad_order)

    betas = [b for deg in range(ell) for b in multiindex_enumerate(field.n, deg)]
    etas = sorted({e for b in betas for e in _sub_indices(b)})
    pairs = sorted({(eta, gamma) for eta in etas for gamma in _sub_indices(eta)})

    # Cell averages of the analytic factor g(z) = z^gamma d^eta w(z) and of
    # its first and second moments about the cell center.  The field enters
    # through a second-order expansion about each center (finite-difference
    # derivatives), so reproduction of quadratics is limited only by the
    # in-cell Gauss integration of g.
    gbar = {pair: np.zeros(len(pts)) for pair in pairs}
    gm1 = {pair: np.zeros((len(pts), field.n)) for pair in pairs}
    gm2 = {pair: np.zeros((len(pts), field.n, field.n)) for pair in pairs}
    zbar = np.zeros(len(pts))  # cell average of the raw profile
    for off, w in zip(offs, ws):
        sub = pts + off
        raw = {eta: bump.raw(sub, eta) for eta in etas}
        zbar += w * raw[(0,) * field.n]
        outer = np.outer(off, off)
        for eta, gamma in pairs:
            g = mi_power(sub, gamma) * raw[eta]
            gbar[(eta, gamma)] += w * g
            gm1[(eta, gamma)] += (w * g)[:, None] * off
            gm2[(eta, gamma)] += (w * g)[:, None, None] * outer

    norm = float(np.sum(zbar) * hv)
    if norm <= 0:
        raise ValueError("bump quadrature is degenerate on this grid")

    axes = tuple(range(field.n))
    grad_full = np.stack(np.gradient(field.values, field.h, axis=axes), axis=-1)
    grads = grad_full.reshape(-1, field.dim_v, field.n)[in_ball]
    hess_cols = [np.stack(np.gradient(grad_full[..., a], field.h, axis=axes), axis=-1)
                 for a in range(field.n)]
    hess = np.stack(hess_cols, axis=-2).reshape(-1, field.dim_v, field.n, field.n)[in_ball]

    # moments[(eta, gamma)] = integral of z^gamma d^eta w(z) u(z)
    moments = {}
    for pair in pairs:
        zeroth = (gbar[pair][:, None] * vals).sum(axis=0)
        first = np.einsum("cvi,ci->v", grads, gm1[pair])
        second = 0.5 * np.einsum("cvab,cab->v", hess, gm2[pair])
        moments[pair] = (zeroth + first + second) * hv / norm

    coeffs: dict[tuple[int, ...], np.ndarray] = {}
    for delta_deg in range(ell):
        for delta in multiindex_enumerate(field.n, delta_deg):
            acc = np.zeros(field.dim_v)
            for beta in betas:
                for eta in _sub_indices(beta):
                    if mi_sub(eta, delta) is None:
                        continue
                    c = mi_binom(beta, eta) * mi_binom(eta, delta) / mi_factorial(eta)
                    acc += c * moments[(eta, mi_sub(eta, delta))]
            coeffs[delta] = (-1.0) ** mi_order(delta) * acc
    return PolynomialField(field.n, field.dim_v, coeffs)


@lru_cache(maxsize=4096)
def _sub_indices(beta: tuple[int, ...]) -> tuple[tuple[int, ...], ...]:
    """All multi-indices <= beta entrywise."""
    ranges = [range(b + 1) for b in beta]
    out = [()]
    for r in ranges:
        out = [prefix + (v,) for prefix in out for v in r]
    return tuple(out)


# --- verification surrogates ------------------------------------------------------

@dataclass
class QuasiContinuityResult:
    radii: list[float]
    ratios: list[float]
    numerators: list[float]
    denominators: list[float]
    flagged_zero: list[bool]
    ell: int


def quasi_continuity_ratio(field: GridField, op: DiffOperator, x: np.ndarray,
                           radii, d_max: int = 6,
                           zero_numerator_tol: float = 1e-12) -> QuasiContinuityResult:
    """Ratio of the polynomial-approximation error to the scaled ball mass.

    Numerator: mean over B_r(x) of |u - P_{x,r} u|; denominator:
    ``tv(B_r(x)) / r^(n-1)``.  A vanishing denominator with numerator below
    ``zero_numerator_tol`` is reported as ratio 0 and flagged; a vanishing
    denominator with a larger numerator raises, since boundedness of the
    ratio is the whole point of the check.
    """
    ell = ell_bound(op, d_max)  # raises StabilizationError if not C-elliptic
    x = np.asarray(x, dtype=float)
    mu = discrete_apply(op, field)
    centers = field.cell_centers()
    values = field.values.reshape(-1, field.dim_v)
    ratios, nums, dens, flags = [], [], [], []
    for r in radii:
        r = float(r)
        proj = poly_project(field, x, r, ell)
        rel = centers - x
        mask = np.einsum("ci,ci->c", rel, rel) < r * r
        resid = values[mask] - proj(centers[mask])
        num = float(np.linalg.norm(resid, axis=1).mean())
        den = total_variation(mu, Ball(x, r)) / r ** (field.n - 1)
        nums.append(num)
        dens.append(den)
        if den < 1e-14:
            if num <= zero_numerator_tol:
                ratios.append(0.0)
                flags.append(True)
                continue
            raise QuasiContinuityViolation(
                f"zero ball mass at r={r} but approximation error {num:.3e}"
            )
        ratios.append(num / den)
        flags.append(False)
    return QuasiContinuityResult(
        radii=[float(r) for r in radii], ratios=ratios, numerators=nums,
        denominators=dens, flagged_zero=flags, ell=ell,
    )


def hyperplane_box_area(nu: np.ndarray, offset: float, lo: np.ndarray,
                        hi: np.ndarray) -> float:
    """Exact (n-1)-measure of ``{y: <y - offset*nu, nu> = 0}`` inside the box.

    Implemented for n = 2 (clipped segment length) and n = 3 (clipped polygon
    area via edge intersections).
    """
    nu = np.asarray(nu, dtype=float)
    nu = nu / np.linalg.norm(nu)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = len(nu)
    p0 = offset * nu
    if n == 2:
        tang = np.array([-nu[1], nu[0]])
        tmin, tmax = -np.inf, np.inf
        for i in range(2):
            if abs(tang[i]) < 1e-15:
                if not lo[i] - 1e-12 <= p0[i] <= hi[i] + 1e-12:
                    return 0.0
                continue
            t1 = (lo[i] - p0[i]) / tang[i]
            t2 = (hi[i] - p0[i]) / tang[i]
            tmin = max(tmin, min(t1, t2))
            tmax = min(tmax, max(t1, t2))
        return max(0.0, tmax - tmin)
    if n == 3:
        # intersect the plane with the 12 box edges
        corners = np.array([[lo[i] if not (m >> i) & 1 else hi[i] for i in range(3)]
                            for m in range(8)])
        pts = []
        for i in range(8):
            for j in range(i + 1, 8):
                if bin(i ^ j).count("1") != 1:
                    continue
                si = (corners[i] - p0) @ nu
                sj = (corners[j] - p0) @ nu
                if si * sj > 0:
                    continue
                if abs(si - sj) < 1e-15:
                    continue
                t = si / (si - sj)
                pts.append(corners[i] + t * (corners[j] - corners[i]))
        if len(pts) < 3:
            return 0.0
        pts = np.array(pts)
        basis = np.linalg.svd(nu[None, :])[2][1:]
        uv = (pts - pts.mean(axis=0)) @ basis.T
        order = np.argsort(np.arctan2(uv[:, 1], uv[:, 0]))
        uv = uv[order]
        x_, y_ = uv[:, 0], uv[:, 1]
        return float(0.5 * abs(np.dot(x_, np.roll(y_, -1)) - np.dot(y_, np.roll(x_, -1))))
    raise NotImplementedError("hyperplane area only implemented for n in (2, 3)")


@dataclass
class StructureReport:
    measured: np.ndarray
    expected: np.ndarray
    rel_error: float
    h: float
    tube_cells: int
    interface_area: float

    def to_dict(self) -> dict:
        return {
            "measured": self.measured.tolist(),
            "expected": self.expected.tolist(),
            "rel_error": self.rel_error,
            "h": self.h,
            "tube_cells": self.tube_cells,
            "interface_area": self.interface_area,
        }


def structure_check(op: DiffOperator, field: GridField, expected: JumpTriple,
                    nu: np.ndarray, offset: float,
                    region: BoxRegion | None = None) -> StructureReport:
    """Compare the tube-averaged interface density of ``op(field)`` with the
    jump-part prediction ``symbol(nu)(a - b)``.

    Sums cell masses over a width-3h tube around the known interface inside
    ``region`` (default: the box shrunk by the boundary layer plus one tube
    width) and divides by the exact interface area in that region.
    """
    if op.k != 1:
        raise ValueError("structure_check requires a first-order operator")
    nu = np.asarray(nu, dtype=float)
    nu = nu / np.linalg.norm(nu)
    mu = discrete_apply(op, field)
    h = field.h
    if region is None:
        margin = (op.k + 2) * h
        region = BoxRegion(field.box_lo + margin, field.box_hi - margin)
    centers = mu.cell_centers()
    signed = (centers - offset * nu) @ nu
    mask = region.contains(centers) & (np.abs(signed) <= 1.5 * h)
    masses = mu.cell_masses.reshape(-1, mu.dim_w)[mask]
    total = masses.sum(axis=0)
    area = hyperplane_box_area(nu, offset, np.asarray(region.lo, dtype=float),
                               np.asarray(region.hi, dtype=float))
    if area <= 0:
        raise ValueError("interface does not intersect the query region")
    measured = total / area
    predicted = b_tensor(op, expected.a - expected.b, nu)
    rel = float(np.linalg.norm(measured - predicted) / np.linalg.norm(predicted))
    return StructureReport(
        measured=measured, expected=predicted, rel_error=rel, h=h,
        tube_cells=int(mask.sum()), interface_area=area,
    )


def structure_convergence(op: DiffOperator, triple: JumpTriple, offset: float,
                          box, h_list) -> dict:
    """Run the structure check across grid spacings and fit the error order."""
    errs = []
    for h in h_list:
        p_plus = PolynomialField(op.n, op.dim_v, {(0,) * op.n: triple.a})
        p_minus = PolynomialField(op.n, op.dim_v, {(0,) * op.n: triple.b})
        field = synth_jump(p_plus, p_minus, triple.nu, offset, box, h)
        rep = structure_check(op, field, triple, triple.nu, offset)
        errs.append(rep.rel_error)
    hs = np.asarray([float(h) for h in h_list])
    errs_arr = np.asarray(errs)
    if np.all(errs_arr > 0):
        order = float(np.polyfit(np.log(hs), np.log(errs_arr), 1)[0])
    else:
        order = math.inf
    return {"h": list(hs), "rel_errors": errs, "fitted_order": order}


def rank_one_solve(f_diff: np.ndarray, nu: np.ndarray, m: int):
    """Least-squares solve of ``a (x)^m nu = f_diff`` for a in V.

    ``f_diff`` has shape (dim_v, C(n+m-1, m)) in symmetric coordinates.
    Returns a when the relative residual is below 1e-8, else None; for m = 0
    the tensor is the vector itself.
    """
    nu = np.asarray(nu, dtype=float)
    nrm = np.linalg.norm(nu)
    if not nrm > 0:
        raise ValueError("normal must be nonzero")
    nu = nu / nrm
    f = np.atleast_2d(np.asarray(f_diff, dtype=float))
    idx = SymIndexSet(len(nu), m)
    if f.shape[1] != idx.size:
        raise ValueError(f"tensor has {f.shape[1]} columns, expected {idx.size}")
    p = np.array([mi_power(nu, b) for b in idx.indices])
    a = f @ p / float(p @ p)
    resid = np.linalg.norm(np.outer(a, p) - f)
    scale = np.linalg.norm(f)
    if scale == 0.0:
        return np.zeros(f.shape[0])
    if resid / scale < 1e-8:
        return a
    return None
