"""Pinhole cameras, voxel traversal, and line restrictions of expansions.

A ray is walked through the level's uniform grid by collecting every axis
plane crossing between the domain entry and exit, giving one segment per
traversed box.  Inside a box the field is the box's Taylor polynomial, so
its restriction to the segment is an exact degree-``rho`` univariate
polynomial (``line2poly``); conversely a weighted segment can be inserted
into a moment grid in closed form (``line2taylor`` and its
polynomial-weighted variant), which is what makes integral layers
differentiable without sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expansion import _monomials, box_centers, find_box
from .kernel import level_resolution
from .multiindex import MultiIndexTable, build_table

MIN_SEGMENT = 1e-12  # grazing segments shorter than this are dropped


@dataclass
class Camera:
    """Pinhole camera; rays go through pixel centers."""

    position: np.ndarray       # (3,)
    look_at: np.ndarray        # (3,)
    up: np.ndarray             # (3,)
    fov_deg: float
    width: int
    height: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        return fwd, right, down


@dataclass
class RayBundle:
    """Origins and unit directions, one row per ray."""

    origins: np.ndarray        # (R, 3)
    directions: np.ndarray     # (R, 3)

    @property
    def count(self) -> int:
        return self.origins.shape[0]


def generate_rays(camera: Camera) -> RayBundle:
    """One ray per pixel, row-major over (height, width)."""
    fwd, right, down = camera.basis()
    tan = np.tan(np.radians(camera.fov_deg) / 2.0)
    aspect = camera.width / camera.height
    # pixel centers in normalized image plane coordinates
    xs = (np.arange(camera.width) + 0.5) / camera.width * 2.0 - 1.0
    ys = (np.arange(camera.height) + 0.5) / camera.height * 2.0 - 1.0
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    dirs = (fwd[None, :]
            + gx.reshape(-1, 1) * (tan * aspect) * right[None, :]
            + gy.reshape(-1, 1) * tan * down[None, :])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return RayBundle(origins=origins, directions=dirs)


@dataclass
class Traversal:
    """Flattened per-segment view of a bundle walked through a grid level.

    Segments are sorted by ray then by entry parameter.  ``offsets`` has
    one extra entry so ray i owns segments offsets[i]:offsets[i+1].
    """

    level: int
    ray_id: np.ndarray         # (S,) int
    t0: np.ndarray             # (S,)
    t1: np.ndarray             # (S,)
    box: np.ndarray            # (S, 3) int
    offsets: np.ndarray        # (R+1,) int
    t_enter: np.ndarray        # (R,) domain entry parameter (nan if missed)

    @property
    def count(self) -> int:
        return self.ray_id.size


def domain_span(bundle: RayBundle) -> tuple[np.ndarray, np.ndarray]:
    """Entry/exit parameters of each ray against (-1, 1)^3 (slab test).

    Rays that miss get t_in > t_out.  Entry is clamped to 0 for origins
    inside the domain.
    """
    o, d = bundle.origins, bundle.directions
    with np.errstate(divide="ignore", invalid="ignore"):
        lo = (-1.0 - o) / d
        hi = (1.0 - o) / d
    near = np.where(np.isnan(lo), -np.inf, np.minimum(lo, hi))
    far = np.where(np.isnan(hi), np.inf, np.maximum(lo, hi))
    # axis-parallel rays: the slab constrains only if the origin is inside it
    par = d == 0.0
    inside = np.abs(o) < 1.0
    near = np.where(par, np.where(inside, -np.inf, np.inf), near)
    far = np.where(par, np.where(inside, np.inf, -np.inf), far)
    t_in = np.maximum(near.max(axis=1), 0.0)
    t_out = far.min(axis=1)
    return t_in, t_out


def traverse(bundle: RayBundle, level: int) -> Traversal:
    """Split each ray into per-box segments at the given grid level."""
    res = level_resolution(level)
    width = 2.0 / res
    o, d = bundle.origins, bundle.directions
    R = bundle.count
    t_in, t_out = domain_span(bundle)
    hit = t_in < t_out

    planes = -1.0 + width * np.arange(res + 1)                     # (res+1,)
    with np.errstate(divide="ignore", invalid="ignore"):
        ts = (planes[None, None, :] - o[:, :, None]) / d[:, :, None]
    ts = ts.reshape(R, -1)
    ts = np.where(np.isfinite(ts), ts, np.inf)
    # keep crossings strictly inside the span; park the rest at the exit
    ts = np.where((ts > t_in[:, None]) & (ts < t_out[:, None]), ts,
                  t_out[:, None])
    ts.sort(axis=1)
    bounds = np.concatenate([t_in[:, None], ts, t_out[:, None]], axis=1)
    starts = bounds[:, :-1]
    ends = bounds[:, 1:]
    keep = (ends - starts > MIN_SEGMENT) & hit[:, None]

    ray_id = np.broadcast_to(np.arange(R)[:, None], keep.shape)[keep]
    t0 = starts[keep]
    t1 = ends[keep]
    mid = o[ray_id] + 0.5 * (t0 + t1)[:, None] * d[ray_id]
    # nudge midpoints of boundary-hugging segments inward
    mid = np.clip(mid, -1.0 + 1e-15, 1.0 - 1e-15)
    box = find_box(level, mid)
    counts = np.bincount(ray_id, minlength=R)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    t_enter = np.where(hit, t_in, np.nan)
    return Traversal(level=level, ray_id=ray_id, t0=t0, t1=t1, box=box,
                     offsets=offsets, t_enter=t_enter)


# -- line restriction / insertion kernels ---------------------------------

_SEG_CHUNK = 65536   # segments per block in the vectorized kernels

_NODE_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}
_GAUSS_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _cheb_nodes(rho: int) -> tuple[np.ndarray, np.ndarray]:
    """Chebyshev-Lobatto nodes on [-1, 1] and the inverse of their monomial
    Vandermonde; values at the nodes map to exact polynomial coefficients."""
    if rho not in _NODE_CACHE:
        u = np.cos(np.pi * np.arange(rho + 1) / rho)
        V = u[:, None] ** np.arange(rho + 1)[None, :]
        _NODE_CACHE[rho] = (u, np.linalg.inv(V))
    return _NODE_CACHE[rho]


def _gauss(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n not in _GAUSS_CACHE:
        _GAUSS_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GAUSS_CACHE[n]


def line2poly(coeffs: np.ndarray, d: np.ndarray, r: np.ndarray,
              rho: int, scale: float = 1.0) -> np.ndarray:
    """Restrict box Taylor expansions to lines x(t) = (center + d) + t r.

    coeffs: (S, C, P) local coefficient blocks; d: (S, 3) offsets of the
    line base points from their box centers; r: (S, 3) directions.
    Returns ascending polynomial coefficients (S, C, rho + 1), exact.

    The restriction is itself a degree-``rho`` polynomial, so it is
    recovered exactly from values at rho + 1 Chebyshev nodes spread over
    t in [-scale, scale]; pass the working segment length as ``scale``
    to keep the sample points near the box.
    """
    u, vinv = _cheb_nodes(rho)
    table = build_table(rho)
    S, C = coeffs.shape[0], coeffs.shape[1]
    G = rho + 1
    out = np.empty((S, C, G))
    rescale = scale ** np.arange(G)
    for lo in range(0, S, _SEG_CHUNK):
        hi = min(lo + _SEG_CHUNK, S)
        pts = (d[lo:hi, None, :]
               + (scale * u)[None, :, None] * r[lo:hi, None, :])
        mono = _monomials(table, pts.reshape(-1, 3)).reshape(hi - lo, G, -1)
        vals = np.einsum("scp,sgp->scg", coeffs[lo:hi], mono)
        out[lo:hi] = (vals @ vinv.T) / rescale[None, None, :]
    return out


def line2taylor(d: np.ndarray, r: np.ndarray, s: np.ndarray,
                rho: int) -> np.ndarray:
    """Moments of a unit-weight segment: entry n is
    (1/n!) * integral_0^s prod_a (d_a + x r_a)^(n_a) dx, shape (S, P)."""
    ones = np.ones((d.shape[0], 1))
    return line2taylor_h(d, r, s, ones, rho)


def line2taylor_h(d: np.ndarray, r: np.ndarray, s: np.ndarray,
                  h: np.ndarray, rho: int) -> np.ndarray:
    """Moments of a segment carrying polynomial weight h(x) (ascending
    coefficients, shape (S, H)): entry n is
    (1/n!) * integral_0^s h(x) prod_a (d_a + x r_a)^(n_a) dx.

    The integrand is polynomial of degree rho + H - 1, so a Gauss-Legendre
    rule of ceil((rho + H) / 2) points per segment is exact.
    """
    table = build_table(rho)
    S, H = h.shape[0], h.shape[1]
    G = (rho + H - 1) // 2 + 1
    x, gw = _gauss(G)
    out = np.empty((S, table.size))
    for lo in range(0, S, _SEG_CHUNK):
        hi = min(lo + _SEG_CHUNK, S)
        half = 0.5 * s[lo:hi]
        t = half[:, None] * (x[None, :] + 1.0)                 # (m, G)
        hv = np.zeros_like(t)
        for mu in range(H - 1, -1, -1):
            hv = hv * t + h[lo:hi, mu:mu + 1]
        pts = d[lo:hi, None, :] + t[..., None] * r[lo:hi, None, :]
        mono = _monomials(table, pts.reshape(-1, 3)).reshape(hi - lo, G, -1)
        out[lo:hi] = np.einsum("sgp,sg->sp", mono,
                               hv * (half[:, None] * gw[None, :]))
    return out


def segment_geometry(trav: Traversal, bundle: RayBundle,
                     level: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-segment (d, r, s): base-point offset from box center, direction,
    and segment length in the ray parameter."""
    o = bundle.origins[trav.ray_id]
    r = bundle.directions[trav.ray_id]
    base = o + trav.t0[:, None] * r
    d = base - box_centers(level, trav.box)
    s = trav.t1 - trav.t0
    return d, r, s
