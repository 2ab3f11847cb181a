"""Moreau envelopes, mollification and the constants attached to them."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .core import BoxGrid, DomainError, Region, RegionSample, ScalarField, ValidationError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# stencils


def _offsets_within(spacing, radius: float, strict: bool = False):
    """Integer offsets with physical length <= radius, sorted by length."""
    spacing = np.asarray(spacing, dtype=float)
    kmax = np.floor(radius / spacing + 1e-9).astype(int)
    axes = [np.arange(-k, k + 1) for k in kmax]
    mesh = np.meshgrid(*axes, indexing="ij")
    offs = np.stack([m.ravel() for m in mesh], axis=1)
    d2 = np.sum((offs * spacing) ** 2, axis=1)
    keep = d2 < radius**2 if strict else d2 <= radius**2 * (1 + 1e-12)
    offs, d2 = offs[keep], d2[keep]
    order = np.lexsort((*offs.T[::-1], d2))
    return np.ascontiguousarray(offs[order], dtype=np.intp), np.ascontiguousarray(d2[order])


def bump(s) -> np.ndarray:
    """Unnormalized bump ``exp(-1/(1-|s|^2))`` on the unit ball."""
    s = np.asarray(s, dtype=float)
    r2 = s * s if s.ndim <= 1 else np.sum(s * s, axis=-1)
    out = np.zeros_like(r2, dtype=float)
    inside = r2 < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out


def mollifier_stencil(spacing, eps: float):
    """Grid offsets and weights of the scaled bump, normalized to unit mass."""
    spacing = np.asarray(spacing, dtype=float)
    if np.any(eps < 2 * spacing - 1e-12):
        raise ValidationError("eps", f"radius {eps} is below two grid spacings {2 * spacing.max():.4g}")
    offs, _ = _offsets_within(spacing, eps, strict=True)
    w = bump(offs * spacing / eps)
    keep = w > 0
    offs, w = offs[keep], w[keep]
    return np.ascontiguousarray(offs), w / w.sum()


# ---------------------------------------------------------------------------
# inner domain and a priori bounds


@dataclass
class InnerDomain:
    """Points whose Moreau minimizers provably stay inside the grid box.

    ``bound="paper"`` uses the uniform margin ``2 sqrt(lam ||phi||_inf)``;
    ``bound="local"`` uses ``sqrt(2 lam (phi(x) - min phi))`` pointwise.
    """

    grid: BoxGrid
    lam: float
    margin: float
    bound: str = "paper"
    phi: Optional[ScalarField] = None
    phi_min: float = 0.0

    @property
    def lower(self):
        return np.array(self.grid.lower) + self.margin

    @property
    def upper(self):
        return np.array(self.grid.upper) - self.margin

    @property
    def empty(self) -> bool:
        if self.bound == "paper":
            return bool(np.any(self.lower > self.upper))
        return not np.any(self.contains(self.grid.nodes()))

    def radius(self, x) -> np.ndarray:
        X = np.atleast_2d(np.asarray(x, dtype=float))
        if self.bound == "paper":
            return np.full(len(X), self.margin)
        inside = self.grid.contains(X)
        r = np.full(len(X), np.inf)
        if inside.any():
            v = self.phi.eval(X[inside])
            r[inside] = np.sqrt(2.0 * self.lam * np.maximum(v - self.phi_min, 0.0))
        return np.minimum(r, self.margin)

    def contains(self, x) -> np.ndarray:
        X = np.atleast_2d(np.asarray(x, dtype=float))
        dist = -self.grid.level(X)
        # boundary tolerance so the shrunk box is closed in floating point
        return dist >= self.radius(X) - 1e-12 * (1.0 + self.margin)

    def contains_region(self, region: Region, pad: float = 0.0, n: int = 4000, seed: int = 0) -> bool:
        """Sampled check that ``region + B(0, pad)`` lies in the inner domain."""
        from .core import make_rng

        rng = make_rng(seed, 21)
        pts = region.sample(n, rng)
        if pad > 0:
            d = pts.shape[1]
            dirs = rng.normal(size=(n, d))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            pts = np.concatenate([pts, pts + pad * dirs])
        return bool(np.all(self.contains(pts)))


def inner_domain(phi: ScalarField, lam: float, bound: str = "paper") -> InnerDomain:
    """Inner domain of ``M_lam phi`` on ``phi``'s grid box; raises ``DomainError`` when empty."""
    dom = _inner(phi, lam, bound)
    if dom.empty:
        raise DomainError(f"inner domain empty for lambda={lam:g} (margin {dom.margin:.4g})")
    return dom


def _inner(phi: ScalarField, lam: float, bound: str) -> InnerDomain:
    if lam <= 0:
        raise ValidationError("lambda", "must be positive")
    if bound not in ("paper", "local"):
        raise ValidationError("bound", f"unknown bound {bound!r}")
    sup = float(np.max(np.abs(phi.values)))
    margin = 2.0 * np.sqrt(lam * sup)
    return InnerDomain(phi.grid, lam, margin, bound, phi, float(phi.values.min()))


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha <= 1.0:
        raise ValidationError("alpha", f"Hoelder exponent must lie in (0, 1], got {alpha}")


def displacement_bound(lam: float, kind: str, sup: float = 0.0, lip: float = 0.0,
                       C: float = 0.0, alpha: float = 1.0) -> float:
    """A priori bound on ``|x - y|`` for minimizers ``y`` of the Moreau problem at ``x``."""
    if kind == "bounded":
        return 2.0 * np.sqrt(lam * sup)
    if kind == "lipschitz":
        return 2.0 * lam * lip
    if kind == "hoelder":
        _check_alpha(alpha)
        return (2.0 * C * lam) ** (1.0 / (2.0 - alpha))
    raise ValueError(kind)


def gap_bound(lam: float, C: float, alpha: float) -> float:
    """Bound on ``phi - M_lam phi`` for an alpha-Hoelder ``phi`` with constant C."""
    _check_alpha(alpha)
    return C ** (2.0 / (2.0 - alpha)) * 2.0 ** (alpha / (2.0 - alpha)) * lam ** (alpha / (2.0 - alpha))


# ---------------------------------------------------------------------------
# Moreau envelope


class MoreauField:
    """Nodal Moreau envelope with its minimizers.

    ``values`` and ``displacement`` are ``ScalarField`` objects on the
    output grid; ``argmin`` holds one minimizer per node.
    """

    def __init__(self, values: ScalarField, argmin: np.ndarray, lam: float, inner: InnerDomain,
                 source_name: str = "phi"):
        self.values = values
        self.argmin = np.asarray(argmin, dtype=float).reshape(values.grid.size, values.dim)
        self.lam = float(lam)
        self.inner = inner
        self.source_name = source_name
        disp = np.linalg.norm(values.grid.nodes() - self.argmin, axis=1)
        self.displacement = ScalarField(values.grid, disp, order="linear", name="displacement")
        self._grad = None

    @property
    def grid(self) -> BoxGrid:
        return self.values.grid

    def eval(self, x):
        return self.values.eval(x)

    __call__ = eval

    def gradient(self, x):
        """``(x - y(x)) / lam`` interpolated from the nodes."""
        if self._grad is None:
            g = (self.grid.nodes() - self.argmin) / self.lam
            self._grad = [ScalarField(self.grid, g[:, a], order=self.values.order) for a in range(self.values.dim)]
        X = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.stack([f.eval(X) for f in self._grad], axis=1)
        return out[0] if np.asarray(x).ndim == 1 else out

    def save(self, prefix) -> None:
        self.values.save(f"{prefix}.value.bin")
        self.displacement.save(f"{prefix}.displacement.bin")
        meta = {
            "lambda": self.lam,
            "bound": self.inner.bound,
            "margin": self.inner.margin,
            "source": self.source_name,
        }
        with open(f"{prefix}.meta.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
        np.save(f"{prefix}.argmin.npy", self.argmin)

    @classmethod
    def load(cls, prefix, phi: Optional[ScalarField] = None) -> "MoreauField":
        with open(f"{prefix}.meta.json") as fh:
            meta = json.load(fh)
        values = ScalarField.load(f"{prefix}.value.bin", name="moreau")
        if os.path.exists(f"{prefix}.argmin.npy"):
            argmin = np.load(f"{prefix}.argmin.npy")
        else:
            argmin = values.grid.nodes()
        inner = InnerDomain(values.grid if phi is None else phi.grid, meta["lambda"], meta["margin"],
                            meta["bound"], phi, 0.0 if phi is None else float(phi.values.min()))
        return cls(values, argmin, meta["lambda"], inner, meta["source"])


def _refine(phi: ScalarField, X: np.ndarray, Y: np.ndarray, best: np.ndarray, lam: float):
    """One damped Newton step on ``phi~(y) + |x-y|^2/(2 lam)`` from the nodal minimizer."""
    grid = phi.grid
    g = phi.gradient(Y) + (Y - X) / lam
    H = _nodal_hessian(phi)
    idx = np.rint((Y - np.array(grid.lower)) / grid.spacing).astype(int)
    idx = np.clip(idx, 0, np.array(grid.shape) - 1)
    Hy = H[tuple(idx.T)] + np.eye(phi.dim) / lam
    eig_min = np.linalg.eigvalsh(Hy)[:, 0]
    Hy[eig_min <= 0.1 / lam] = np.eye(phi.dim) / lam
    step = -np.linalg.solve(Hy, g[..., None])[..., 0]
    newY, newV = Y.copy(), best.copy()
    todo = np.ones(len(X), dtype=bool)
    t = 1.0
    for _ in range(6):
        cand = Y + t * step
        ok = todo & grid.contains(cand)
        if ok.any():
            val = phi.eval(cand[ok]) + np.sum((X[ok] - cand[ok]) ** 2, axis=1) / (2 * lam)
            better = val < best[ok] - 1e-15 * (1 + np.abs(best[ok]))
            sel = np.flatnonzero(ok)[better]
            newY[sel] = cand[sel]
            newV[sel] = val[better]
            todo[sel] = False
        if not todo.any():
            break
        t *= 0.5
    return newY, newV


def _nodal_hessian(phi: ScalarField) -> np.ndarray:
    cached = getattr(phi, "_hess_cache", None)
    if cached is not None:
        return cached
    g = phi.nodal_gradient()
    H = np.stack([np.stack(np.gradient(g[..., a], *phi.grid.spacing, edge_order=2), axis=-1)
                  if phi.dim > 1 else np.gradient(g[..., a], phi.grid.spacing[0], edge_order=2)[..., None]
                  for a in range(phi.dim)], axis=-2)
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    phi._hess_cache = H
    return H


def moreau_envelope(phi: ScalarField, lam: float, out_grid: Optional[BoxGrid] = None,
                    refine: bool = True, bound: str = "paper") -> MoreauField:
    """Moreau envelope ``min_y phi(y) + |x - y|^2 / (2 lam)`` at grid nodes.

    Nodes are scanned exactly within the provable search radius
    ``min(2 sqrt(lam ||phi||_inf), sqrt(2 lam (phi(x) - min phi)))``, then
    one damped Newton step on the interpolated objective may lower the value.
    ``out_grid`` must be a node-aligned sub-grid of ``phi.grid``.
    """
    if lam <= 0 or not np.isfinite(lam):
        raise ValidationError("lambda", f"must be positive, got {lam}")
    grid = phi.grid
    out_grid = grid if out_grid is None else out_grid
    k0 = grid.node_offset(out_grid)
    sub_idx = [np.arange(n) + k for n, k in zip(out_grid.shape, k0)]
    mesh = np.meshgrid(*sub_idx, indexing="ij")
    out_nodes = np.ravel_multi_index(tuple(m.ravel() for m in mesh), grid.shape).astype(np.intp)
    flat = np.ascontiguousarray(phi.values.ravel())
    sup = float(np.max(np.abs(flat)))
    r_paper = 2.0 * np.sqrt(lam * sup)
    r_local = np.sqrt(2.0 * lam * np.maximum(flat[out_nodes] - flat.min(), 0.0))
    radius2 = np.ascontiguousarray(np.minimum(r_local, r_paper) ** 2 * (1 + 1e-12) + 1e-300)
    offs, d2 = _offsets_within(grid.spacing, float(np.sqrt(radius2.max())) + 1e-12)
    out_val = np.empty(len(out_nodes))
    out_arg = np.empty(len(out_nodes), dtype=np.intp)
    kernels.grid_minplus(flat, np.array(grid.shape, dtype=np.intp), offs, d2, out_nodes, radius2,
                         float(lam), out_val, out_arg)
    nodes = grid.nodes()
    X = nodes[out_nodes]
    Y = nodes[out_arg]
    if refine:
        Y, out_val = _refine(phi, X, Y, out_val, lam)
    inner = _inner(phi, lam, bound)
    if inner.empty:
        logger.warning("inner domain empty for lambda=%g (margin %.4g)", lam, inner.margin)
    values = ScalarField(out_grid, out_val, order=phi.order, name=f"moreau[{phi.name}]")
    logger.debug("moreau lam=%g: %d nodes, %d offsets, max displacement %.4g", lam, len(out_nodes), len(offs),
                 float(np.max(np.linalg.norm(X - Y, axis=1))))
    return MoreauField(values, Y, lam, inner, phi.name)


# ---------------------------------------------------------------------------
# mollification


class MollifiedField(ScalarField):
    """Discrete convolution with the bump kernel; defined on the ``eps``-shrunk box."""

    def __init__(self, grid, values, eps: float, source: str, order: str = "cubic"):
        super().__init__(grid, values, order=order, name=f"mollified[{source}]")
        self.eps = float(eps)
        self.source = source


def mollify(phi, eps: float, order: str = "cubic") -> MollifiedField:
    """Convolve nodal values with the normalized bump of radius ``eps``.

    The result lives on the nodes at distance >= ``eps`` from the box
    boundary so that every stencil is complete.
    """
    field = phi.values if isinstance(phi, MoreauField) else phi
    if eps <= 0 or not np.isfinite(eps):
        raise ValidationError("eps", f"must be positive, got {eps}")
    grid = field.grid
    offs, w = mollifier_stencil(grid.spacing, eps)
    out_grid = grid.with_margin(eps)
    k0 = grid.node_offset(out_grid)
    sub_idx = [np.arange(n) + k for n, k in zip(out_grid.shape, k0)]
    mesh = np.meshgrid(*sub_idx, indexing="ij")
    out_nodes = np.ravel_multi_index(tuple(m.ravel() for m in mesh), grid.shape).astype(np.intp)
    out = np.empty(len(out_nodes))
    kernels.grid_convolve(np.ascontiguousarray(field.values.ravel()), np.array(grid.shape, dtype=np.intp),
                          offs, w, out_nodes, out)
    return MollifiedField(out_grid, out, eps, field.name, order=order)


# ---------------------------------------------------------------------------
# constants


def semiconcavity_constant(phi, region: Optional[Region] = None) -> float:
    """Largest eigenvalue of the finite-difference Hessian over interior nodes."""
    field = phi.values if isinstance(phi, MoreauField) else phi
    H = _nodal_hessian(field).copy()
    d = field.dim
    inner = tuple(slice(1, -1) for _ in range(d))
    # pure second differences are exact 3-point stencils; mixed terms central
    v = field.values
    h = field.grid.spacing
    for a in range(d):
        sl_p = [slice(1, -1)] * d
        sl_m = [slice(1, -1)] * d
        sl_p[a] = slice(2, None)
        sl_m[a] = slice(0, -2)
        H[inner + (a, a)] = (v[tuple(sl_p)] - 2 * v[inner] + v[tuple(sl_m)]) / h[a] ** 2
    Hin = H[inner].reshape(-1, d, d)
    nodes = field.grid.nodes().reshape(tuple(field.grid.shape) + (d,))[inner].reshape(-1, d)
    if region is not None:
        reg = region.region if isinstance(region, RegionSample) else region
        keep = reg.contains(nodes)
        Hin = Hin[keep]
    if len(Hin) == 0:
        raise DomainError("no interior nodes in region")
    return float(np.max(np.linalg.eigvalsh(Hin)[:, -1]))


def hjb_defect(moreau: MoreauField, ell_lip: float, f_lip: float, B_lip: float, beta: float) -> ScalarField:
    """Pointwise HJB defect ``h_lam`` of a Moreau envelope, as a nodal field."""
    r = moreau.displacement.values.ravel()
    lam = moreau.lam
    h = (ell_lip + B_lip**2 * r**2 / (beta * lam**2) + f_lip * r / lam) * r
    return ScalarField(moreau.grid, h, order="linear", name="hjb_defect")


def hjb_defect_rate(lam: float, C: float, alpha: float, ell_lip: float, f_lip: float, B_lip: float,
                    beta: float) -> float:
    """Hoelder-rate bound on the HJB defect (up to the constant ``C``)."""
    return C * (ell_lip * lam ** (1.0 / (2.0 - alpha))
                + B_lip**2 / beta * lam ** ((2.0 * alpha - 1.0) / (2.0 - alpha))
                + f_lip * lam ** (alpha / (2.0 - alpha)))


def hoelder_estimate(phi: ScalarField, alpha: float, region: Optional[Region] = None,
                     n_pairs: int = 20000, seed: int = 0) -> float:
    """Sampled Hoelder constant ``sup |phi(x)-phi(y)| / |x-y|^alpha``."""
    from .core import make_rng

    nodes = phi.grid.nodes()
    if region is not None:
        nodes = nodes[region.contains(nodes)]
    rng = make_rng(seed, 31)
    i = rng.integers(0, len(nodes), n_pairs)
    j = rng.integers(0, len(nodes), n_pairs)
    dist = np.linalg.norm(nodes[i] - nodes[j], axis=1)
    ok = dist > 0
    dv = np.abs(phi.eval(nodes[i][ok]) - phi.eval(nodes[j][ok]))
    return float(np.max(dv / dist[ok] ** alpha))
