"""Shared data model: control problems, grids, fields, regions and trajectories."""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

_MAGIC = b"SFFIELD1"


class DomainError(ValueError):
    """A query point lies outside the domain where an object is defined."""


class ValidationError(ValueError):
    """An input violates a structural requirement; the message names the field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name
        self.msg = message


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent counter-based stream for ``(seed, *keys)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(k) for k in keys]])
    return np.random.Generator(np.random.Philox(ss))


def to_jsonable(obj):
    """Recursively convert numpy scalars/arrays; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if np.isnan(x):
            return "nan"
        if np.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def _batch(x, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got shape {x.shape}")
    return np.ascontiguousarray(x), single


# ---------------------------------------------------------------------------
# control problem


@dataclass
class ControlProblem:
    """Control-affine problem ``y' = f(y) + B(y) u`` with cost ``ell + beta/2 |u|^2``.

    ``f``, ``B`` and ``ell`` act on batches: ``f(Y) -> (n, d)``,
    ``B(Y) -> (n, d, m)`` and ``ell(Y) -> (n,)`` for ``Y`` of shape ``(n, d)``.
    """

    f: Callable[[np.ndarray], np.ndarray]
    B: Callable[[np.ndarray], np.ndarray]
    ell: Callable[[np.ndarray], np.ndarray]
    beta: float
    dim: int
    ctrl_dim: int
    name: str = "problem"

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta <= 0:
            raise ValidationError("beta", f"must be positive, got {self.beta}")
        if self.dim < 1 or self.ctrl_dim < 1:
            raise ValidationError("dim", "state and control dimensions must be >= 1")

    def drift(self, y) -> np.ndarray:
        Y, single = _batch(y, self.dim)
        out = np.asarray(self.f(Y), dtype=float).reshape(len(Y), self.dim)
        return out[0] if single else out

    def control_matrix(self, y) -> np.ndarray:
        Y, single = _batch(y, self.dim)
        out = np.asarray(self.B(Y), dtype=float).reshape(len(Y), self.dim, self.ctrl_dim)
        return out[0] if single else out

    def running_state_cost(self, y) -> np.ndarray:
        Y, single = _batch(y, self.dim)
        out = np.asarray(self.ell(Y), dtype=float).reshape(len(Y))
        return out[0] if single else out

    def velocity(self, y, u) -> np.ndarray:
        Y, single = _batch(y, self.dim)
        U = np.atleast_2d(np.asarray(u, dtype=float))
        out = self.drift(Y) + np.einsum("nij,nj->ni", self.control_matrix(Y), U)
        return out[0] if single else out

    def running_cost(self, y, u) -> np.ndarray:
        Y, single = _batch(y, self.dim)
        U = np.atleast_2d(np.asarray(u, dtype=float))
        out = self.running_state_cost(Y) + 0.5 * self.beta * np.sum(U * U, axis=1)
        return out[0] if single else out


# ---------------------------------------------------------------------------
# grids and fields


@dataclass(frozen=True)
class BoxGrid:
    """Tensor grid on ``[lower, upper]`` with ``points`` nodes per axis."""

    lower: tuple
    upper: tuple
    points: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        pts = tuple(int(v) for v in np.atleast_1d(self.points))
        if not (len(lo) == len(hi) == len(pts)):
            raise ValidationError("grid", "lower, upper and points must have equal length")
        for a, (l, u, n) in enumerate(zip(lo, hi, pts)):
            if not (np.isfinite(l) and np.isfinite(u)) or u <= l:
                raise ValidationError("grid.bounds", f"axis {a}: need lower < upper, got [{l}, {u}]")
            if n < 2:
                raise ValidationError("grid.points", f"axis {a}: need at least 2 nodes, got {n}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "points", pts)

    @property
    def dim(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple:
        return self.points

    @property
    def spacing(self) -> np.ndarray:
        return (np.array(self.upper) - np.array(self.lower)) / (np.array(self.points) - 1)

    @property
    def size(self) -> int:
        return int(np.prod(self.points))

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(np.array(self.upper) - np.array(self.lower)))

    def axes(self) -> list:
        return [np.linspace(l, u, n) for l, u, n in zip(self.lower, self.upper, self.points)]

    def nodes(self) -> np.ndarray:
        """All nodes, row-major, shape ``(size, dim)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def contains(self, x, tol: float = 1e-12) -> np.ndarray:
        X = np.atleast_2d(np.asarray(x, dtype=float))
        span = np.array(self.upper) - np.array(self.lower)
        lo = np.array(self.lower) - tol * span
        hi = np.array(self.upper) + tol * span
        return np.all((X >= lo) & (X <= hi), axis=1)

    def with_margin(self, margin: float) -> "BoxGrid":
        """Sub-grid of nodes at distance >= ``margin`` from the boundary."""
        h = self.spacing
        k = np.ceil(margin / h - 1e-9).astype(int)
        pts = np.array(self.points) - 2 * k
        if np.any(pts < 2):
            raise DomainError(f"margin {margin} leaves fewer than 2 nodes per axis")
        lo = np.array(self.lower) + k * h
        hi = np.array(self.upper) - k * h
        return BoxGrid(tuple(lo), tuple(hi), tuple(pts))

    def covering(self, lower, upper) -> "BoxGrid":
        """Smallest node-aligned sub-grid whose box contains ``[lower, upper]``."""
        h = self.spacing
        lo0 = np.array(self.lower)
        i0 = np.clip(np.floor((np.asarray(lower, dtype=float) - lo0) / h + 1e-9).astype(int), 0, None)
        i1 = np.minimum(np.ceil((np.asarray(upper, dtype=float) - lo0) / h - 1e-9).astype(int),
                        np.array(self.points) - 1)
        return BoxGrid(tuple(lo0 + i0 * h), tuple(lo0 + i1 * h), tuple(i1 - i0 + 1))

    def node_offset(self, other: "BoxGrid") -> np.ndarray:
        """Integer index of ``other``'s first node inside this grid (aligned sub-grids)."""
        k = (np.array(other.lower) - np.array(self.lower)) / self.spacing
        ki = np.rint(k).astype(int)
        if np.any(np.abs(k - ki) > 1e-6):
            raise ValueError("grids are not node-aligned")
        return ki

    def level(self, y) -> np.ndarray:
        """Signed box distance, negative inside."""
        Y = np.atleast_2d(np.asarray(y, dtype=float))
        return np.max(np.maximum(np.array(self.lower) - Y, Y - np.array(self.upper)), axis=1)


def _pad_cubic(values: np.ndarray) -> np.ndarray:
    """One ghost layer per axis, cubic-exact extrapolation."""
    v = values
    for a in range(v.ndim):
        v = np.moveaxis(v, a, 0)
        if v.shape[0] >= 3:
            lo = 3 * v[0] - 3 * v[1] + v[2]
            hi = 3 * v[-1] - 3 * v[-2] + v[-3]
        else:
            lo = 2 * v[0] - v[1]
            hi = 2 * v[-1] - v[-2]
        v = np.concatenate([lo[None], v, hi[None]], axis=0)
        v = np.moveaxis(v, 0, a)
    return np.ascontiguousarray(v)


def nodal_gradient(values: np.ndarray, spacing) -> np.ndarray:
    """Second-order finite-difference gradient, shape ``values.shape + (d,)``."""
    grads = np.gradient(values, *[float(h) for h in spacing], edge_order=2)
    if values.ndim == 1:
        grads = [grads]
    return np.stack(grads, axis=-1)


class ScalarField:
    """Nodal values on a ``BoxGrid`` with multilinear or cubic interpolation.

    Gradients are taken by finite differences of the nodal data and the
    gradient field is interpolated with the same order as the values;
    boundary nodes use one-sided second-order stencils.
    """

    def __init__(self, grid: BoxGrid, values, order: str = "linear", name: str = "field"):
        values = np.asarray(values, dtype=float)
        if values.size != grid.size:
            raise ValidationError("values", f"expected {grid.size} nodal values, got {values.size}")
        values = values.reshape(grid.shape)
        if not np.all(np.isfinite(values)):
            raise ValidationError("values", "nodal values must be finite")
        if order not in ("linear", "cubic"):
            raise ValidationError("order", f"unknown interpolation order {order!r}")
        self.grid = grid
        self.values = values
        self.order = order
        self.name = name
        self._flat = np.ascontiguousarray(values.ravel())
        self._padded = None
        self._grad_fields = None
        self._shape = np.array(grid.shape, dtype=np.intp)
        self._lower = np.array(grid.lower)
        self._step = grid.spacing

    # -- construction helpers
    @classmethod
    def from_function(cls, grid: BoxGrid, fn, order: str = "linear", name: str = "field"):
        return cls(grid, np.asarray(fn(grid.nodes()), dtype=float), order=order, name=name)

    def with_order(self, order: str) -> "ScalarField":
        return ScalarField(self.grid, self.values, order=order, name=self.name)

    @property
    def dim(self) -> int:
        return self.grid.dim

    # -- evaluation
    def _check(self, X: np.ndarray):
        inside = self.grid.contains(X)
        if not np.all(inside):
            bad = X[~inside][0]
            raise DomainError(f"{self.name}: point {bad} outside grid box {self.grid.lower}..{self.grid.upper}")

    def _interp(self, flat, padded, X):
        out = np.empty(len(X))
        if self.order == "linear":
            kernels.interp_linear(flat, self._shape, self._lower, self._step, X, out)
        else:
            kernels.interp_cubic(padded, self._shape, self._lower, self._step, X, out)
        return out

    def eval(self, x) -> np.ndarray:
        X, single = _batch(x, self.dim)
        self._check(X)
        if self.order == "cubic" and self._padded is None:
            self._padded = _pad_cubic(self.values).ravel()
        out = self._interp(self._flat, self._padded, X)
        return out[0] if single else out

    __call__ = eval

    def nodal_gradient(self) -> np.ndarray:
        return nodal_gradient(self.values, self._step)

    def gradient(self, x) -> np.ndarray:
        X, single = _batch(x, self.dim)
        self._check(X)
        if self._grad_fields is None:
            g = self.nodal_gradient()
            logger.debug("%s: one-sided stencils on boundary nodes", self.name)
            comps = [np.ascontiguousarray(g[..., a]) for a in range(self.dim)]
            pads = [_pad_cubic(c).ravel() if self.order == "cubic" else None for c in comps]
            self._grad_fields = [(c.ravel(), p) for c, p in zip(comps, pads)]
        out = np.stack([self._interp(f, p, X) for f, p in self._grad_fields], axis=1)
        return out[0] if single else out

    # -- norms
    def sup_norm(self, region=None) -> float:
        return sup_norm(self, region)

    def lipschitz_estimate(self, region=None, n_pairs: int = 20000, seed: int = 0) -> float:
        return lipschitz_estimate(self, region, n_pairs=n_pairs, seed=seed)

    # -- serialization
    def to_bytes(self) -> bytes:
        d = self.dim
        head = _MAGIC + struct.pack("<I", d)
        head += struct.pack(f"<{d}d", *self.grid.lower)
        head += struct.pack(f"<{d}d", *self.grid.upper)
        head += struct.pack(f"<{d}Q", *self.grid.points)
        return head + self._flat.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, order: str = "linear", name: str = "field") -> "ScalarField":
        if data[:8] != _MAGIC:
            raise ValidationError("header", "not a field file (bad magic)")
        (d,) = struct.unpack_from("<I", data, 8)
        off = 12
        lo = struct.unpack_from(f"<{d}d", data, off)
        off += 8 * d
        hi = struct.unpack_from(f"<{d}d", data, off)
        off += 8 * d
        pts = struct.unpack_from(f"<{d}Q", data, off)
        off += 8 * d
        grid = BoxGrid(lo, hi, pts)
        vals = np.frombuffer(data, dtype="<f8", offset=off)
        if vals.size != grid.size:
            raise ValidationError("payload", f"expected {grid.size} values, found {vals.size}")
        return cls(grid, vals.astype(float), order=order, name=name)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, order: str = "linear", name: str = "field") -> "ScalarField":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), order=order, name=name)

    def to_csv(self, quantity: str = "value") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{a}" for a in range(self.dim)] + [quantity])
        for x, v in zip(self.grid.nodes(), self._flat):
            w.writerow([repr(float(c)) for c in x] + [repr(float(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, order: str = "linear", name: str = "field") -> "ScalarField":
        rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("#")]
        data = np.array([[float(c) for c in r] for r in rows[1:]])
        pts = data[:, :-1]
        axes = [np.unique(pts[:, a]) for a in range(pts.shape[1])]
        grid = BoxGrid(tuple(ax[0] for ax in axes), tuple(ax[-1] for ax in axes), tuple(len(ax) for ax in axes))
        order_idx = np.lexsort(pts.T[::-1])
        return cls(grid, data[order_idx, -1], order=order, name=name)


# ---------------------------------------------------------------------------
# regions


class Region:
    """Base class: ``level(y) < 0`` inside, plus a bounding box for sampling."""

    bbox: tuple

    def level(self, y) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def contains(self, y) -> np.ndarray:
        return self.level(y) <= 0.0

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        lo, hi = np.asarray(self.bbox[0]), np.asarray(self.bbox[1])
        out = []
        got = 0
        while got < n:
            cand = rng.uniform(lo, hi, size=(max(2 * (n - got), 64), len(lo)))
            cand = cand[self.contains(cand)]
            out.append(cand)
            got += len(cand)
        return np.concatenate(out)[:n]

    def volume(self, n: int = 200000, seed: int = 0) -> float:
        lo, hi = np.asarray(self.bbox[0]), np.asarray(self.bbox[1])
        pts = make_rng(seed, 7).uniform(lo, hi, size=(n, len(lo)))
        return float(np.prod(hi - lo) * np.mean(self.contains(pts)))


@dataclass
class Box(Region):
    lower: Sequence[float]
    upper: Sequence[float]

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        self.bbox = (self.lower, self.upper)

    def level(self, y):
        Y = np.atleast_2d(np.asarray(y, dtype=float))
        return np.max(np.maximum(self.lower - Y, Y - self.upper), axis=1)

    def volume(self, n: int = 0, seed: int = 0) -> float:
        return float(np.prod(self.upper - self.lower))


@dataclass
class Ball(Region):
    center: Sequence[float]
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.radius <= 0:
            raise ValidationError("radius", "must be positive")
        self.bbox = (self.center - self.radius, self.center + self.radius)

    def level(self, y):
        Y = np.atleast_2d(np.asarray(y, dtype=float))
        return np.linalg.norm(Y - self.center, axis=1) - self.radius

    def sample(self, n, rng):
        d = len(self.center)
        g = rng.normal(size=(n, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = self.radius * rng.uniform(size=n) ** (1.0 / d)
        return self.center + g * r[:, None]

    def volume(self, n: int = 0, seed: int = 0) -> float:
        from math import gamma, pi

        d = len(self.center)
        return float(pi ** (d / 2) / gamma(d / 2 + 1) * self.radius**d)


@dataclass
class SubLevel(Region):
    """``{ y : fn(y) < level }`` intersected with a bounding box."""

    fn: Callable[[np.ndarray], np.ndarray]
    threshold: float
    lower: Sequence[float]
    upper: Sequence[float]

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        self.bbox = (self.lower, self.upper)

    def level(self, y):
        Y = np.atleast_2d(np.asarray(y, dtype=float))
        box = np.max(np.maximum(self.lower - Y, Y - self.upper), axis=1)
        return np.maximum(np.asarray(self.fn(Y), dtype=float) - self.threshold, box)


@dataclass
class RegionSample:
    """Region plus the concrete points used to evaluate sup/integral quantities."""

    region: Region
    points: np.ndarray
    mode: str = "mc"
    seed: Optional[int] = None

    @classmethod
    def monte_carlo(cls, region: Region, count: int, seed: int) -> "RegionSample":
        return cls(region, region.sample(count, make_rng(seed, 1)), "mc", seed)

    @classmethod
    def on_grid(cls, region: Region, grid: BoxGrid) -> "RegionSample":
        nodes = grid.nodes()
        return cls(region, nodes[region.contains(nodes)], "grid", None)

    def __len__(self):
        return len(self.points)


# ---------------------------------------------------------------------------
# norms and constants


def _points_for(obj, region) -> np.ndarray:
    if isinstance(region, RegionSample):
        return region.points
    if isinstance(obj, ScalarField):
        nodes = obj.grid.nodes()
        return nodes if region is None else nodes[region.contains(nodes)]
    if region is None:
        raise ValueError("a region is required for callables")
    return region.sample(20000, make_rng(0, 3))


def _eval(obj, X):
    out = obj.eval(X) if isinstance(obj, ScalarField) else obj(X)
    return np.asarray(out, dtype=float).reshape(len(X), -1)


def sup_norm(obj, region=None) -> float:
    """Maximum absolute value over the region's sample (grid nodes for fields)."""
    X = _points_for(obj, region)
    if len(X) == 0:
        raise DomainError("empty region")
    return float(np.max(np.abs(_eval(obj, X))))


def lipschitz_estimate(obj, region=None, n_pairs: int = 20000, seed: int = 0,
                       norm: str = "euclid", max_dist: Optional[float] = None) -> float:
    """Sampled lower estimate of the Lipschitz constant on ``region``.

    Uses random pairs of sample points (optionally limited to distance
    ``max_dist``) and, for fields, all axis-neighbour node pairs.
    ``norm="entrywise"`` measures value differences by the largest entry.
    """
    X = _points_for(obj, region)
    if not isinstance(obj, ScalarField) and (len(X) < 2 or np.ptp(X, axis=0).max() == 0.0):
        raise ValidationError("region", "degenerate region (fewer than two distinct points)")
    rng = make_rng(seed, 5)
    best = 0.0
    if len(X) >= 2:
        i = rng.integers(0, len(X), n_pairs)
        if max_dist is None:
            j = rng.integers(0, len(X), n_pairs)
            P, Q = X[i], X[j]
        else:
            P = X[i]
            dirs = rng.normal(size=P.shape)
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            Q = P + dirs * (max_dist * rng.uniform(size=(len(P), 1)))
            if region is not None:
                reg = region.region if isinstance(region, RegionSample) else region
                keep = reg.contains(Q)
                P, Q = P[keep], Q[keep]
        dist = np.linalg.norm(P - Q, axis=1)
        ok = dist > 1e-12
        if ok.any():
            dv = _eval(obj, P[ok]) - _eval(obj, Q[ok])
            num = np.max(np.abs(dv), axis=1) if norm == "entrywise" else np.linalg.norm(dv, axis=1)
            best = float(np.max(num / dist[ok]))
    if isinstance(obj, ScalarField):
        reg = region.region if isinstance(region, RegionSample) else region
        mask = None if reg is None else reg.contains(obj.grid.nodes()).reshape(obj.grid.shape)
        for a, h in enumerate(obj.grid.spacing):
            dv = np.abs(np.diff(obj.values, axis=a)) / h
            if mask is not None:
                sl0 = [slice(None)] * obj.dim
                sl1 = [slice(None)] * obj.dim
                sl0[a] = slice(0, -1)
                sl1[a] = slice(1, None)
                m = mask[tuple(sl0)] & mask[tuple(sl1)]
                dv = dv[m]
            if dv.size:
                best = max(best, float(dv.max()))
    return best


def matrix_lipschitz(Bfun, region, n_pairs: int = 20000, seed: int = 0) -> tuple[float, float, float]:
    """Entrywise Lipschitz seminorm and oscillation of a matrix field.

    Returns ``(seminorm + oscillation, seminorm, oscillation)``.
    """
    X = _points_for(None, region) if isinstance(region, RegionSample) else region.sample(4000, make_rng(seed, 9))
    rng = make_rng(seed, 11)
    i = rng.integers(0, len(X), n_pairs)
    j = rng.integers(0, len(X), n_pairs)
    P, Q = X[i], X[j]
    dist = np.linalg.norm(P - Q, axis=1)
    ok = dist > 1e-12
    BP = np.asarray(Bfun(P[ok])).reshape(ok.sum(), -1)
    BQ = np.asarray(Bfun(Q[ok])).reshape(ok.sum(), -1)
    diff = np.max(np.abs(BP - BQ), axis=1)
    semi = float(np.max(diff / dist[ok])) if ok.any() else 0.0
    osc = float(np.max(diff)) if ok.any() else 0.0
    logger.debug("||B||_Lip components: seminorm=%.3g oscillation=%.3g", semi, osc)
    return semi + osc, semi, osc


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Closed-loop trajectory with its control, running cost and exit status."""

    t: np.ndarray
    y: np.ndarray
    u: np.ndarray
    running_cost: np.ndarray
    cost: float
    status: str = "completed"
    exit_time: Optional[float] = None
    diagnostic: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def final_state(self) -> np.ndarray:
        return self.y[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d, m = self.y.shape[1], self.u.shape[1]
        w.writerow(["t"] + [f"y{a}" for a in range(d)] + [f"u{a}" for a in range(m)] + ["running_cost"])
        for k in range(len(self.t)):
            w.writerow([repr(float(self.t[k]))] + [repr(float(v)) for v in self.y[k]]
                       + [repr(float(v)) for v in self.u[k]] + [repr(float(self.running_cost[k]))])
        return buf.getvalue()
