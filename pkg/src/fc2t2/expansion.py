"""Multilevel Taylor-expansion pipeline over a uniform voxel hierarchy.

Sources are sorted into finest-level moment grids (P2M), coarsened with the
stride-2 binomial shift kernel (M2M), converted to local expansions level by
level with parity-aware hole stencils (M2L), pushed back down (L2L) and
finally queried anywhere in the open domain (-1, 1)^3 through an accessor
(L2P).  Every stage is linear in the weights and deterministic for a fixed
source order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flops
from .kernel import (COARSEST_LEVEL, KernelModel, M2LTable, fit_m2l_tables,
                     level_box_width, level_resolution)
from .multiindex import MultiIndexTable


class DomainError(ValueError):
    """A location lies on or outside the boundary of (-1, 1)^3."""


class StageError(ValueError):
    """A grid of the wrong kind/level was fed to a pipeline stage."""


@dataclass
class SourceSet:
    """Continuous source locations and per-channel weights."""

    p: np.ndarray    # (N, 3), strictly inside (-1, 1)^3
    w: np.ndarray    # (N, C)

    def __post_init__(self):
        self.p = np.atleast_2d(np.asarray(self.p, dtype=np.float64))
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim == 1:
            self.w = self.w[:, None]
        if self.p.shape[0] != self.w.shape[0]:
            raise ValueError("p and w disagree on the number of sources")
        if self.p.size and np.max(np.abs(self.p)) >= 1.0:
            raise DomainError("source locations must lie strictly inside (-1, 1)^3")

    @property
    def n(self) -> int:
        return self.p.shape[0]

    @property
    def channels(self) -> int:
        return self.w.shape[1]


@dataclass
class ExpansionGrid:
    """Per-level voxel grid of P-vector expansion coefficients."""

    level: int
    kind: str                   # "M" (outgoing moments) or "L" (local Taylor)
    data: np.ndarray            # (res, res, res, C, P)
    rho: int

    @property
    def res(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def box_width(self) -> float:
        return level_box_width(self.level)


def box_centers(level: int, idx: np.ndarray) -> np.ndarray:
    """Centers of boxes with integer index triples ``idx`` (..., 3)."""
    w = level_box_width(level)
    return -1.0 + (np.asarray(idx, dtype=np.float64) + 0.5) * w


def find_box(level: int, q: np.ndarray) -> np.ndarray:
    """Integer box index triple for in-domain points (..., 3), half-open boxes.

    Clipped to the valid range: points within rounding distance of the
    boundary (q + 1 can round up to exactly 2) land in the edge box.
    """
    res = level_resolution(level)
    b = np.floor((np.asarray(q) + 1.0) * (res / 2.0)).astype(np.int64)
    return np.clip(b, 0, res - 1)


def _monomials(table: MultiIndexTable, d: np.ndarray) -> np.ndarray:
    """Rows of d^n / n! for each table entry; d shape (M, 3) -> (M, P).

    Built from per-axis power tables by gather-and-multiply; exponents are
    tiny, so repeated multiplication beats generic pow by a wide margin.
    """
    e = table.entries
    rho = int(e.max()) if e.size else 0
    out = np.empty((d.shape[0], table.size))
    pows = np.empty((3, d.shape[0], rho + 1))
    pows[:, :, 0] = 1.0
    for k in range(1, rho + 1):
        pows[:, :, k] = pows[:, :, k - 1] * d.T
    out[:] = pows[0][:, e[:, 0]]
    out *= pows[1][:, e[:, 1]]
    out *= pows[2][:, e[:, 2]]
    out /= table.entry_factorial()[None, :]
    return out


def _shift_kernel(table: MultiIndexTable, d: np.ndarray, mode: str) -> np.ndarray:
    """Binomial re-centering kernel for a child-center offset ``d`` (3,).

    mode "m2m": K[n, k] = d^(n-k) / (n-k)!  for k <= n   (moment coarsening)
    mode "l2l": K[n, k] = d^(k-n) / (k-n)!  for k >= n   (local refinement)
    """
    e = table.entries
    f = table.factorial
    if mode == "m2m":
        diff = e[:, None, :] - e[None, :, :]
    else:
        diff = e[None, :, :] - e[:, None, :]
    ok = np.all(diff >= 0, axis=2)
    diff = np.where(ok[:, :, None], diff, 0)
    K = (d[None, None, :] ** diff).prod(axis=2)
    K /= f[diff[..., 0]] * f[diff[..., 1]] * f[diff[..., 2]]
    return np.where(ok, K, 0.0)


def _axis_slices(res: int, delta: int, parity: int | None) -> tuple[slice, slice] | None:
    """Target/source slice pair along one axis for stencil offset ``delta``.

    ``parity`` restricts targets to even (0) or odd (1) indices; None means
    every index.  Returns None when no target survives the bounds.
    """
    step = 1 if parity is None else 2
    lo = max(0, -delta)
    hi = min(res - 1, res - 1 - delta)
    if parity is not None:
        if lo % 2 != parity:
            lo += 1
        if hi % 2 != parity:
            hi -= 1
    if lo > hi:
        return None
    return slice(lo, hi + 1, step), slice(lo + delta, hi + delta + 1, step)


class Engine:
    """A configured transform: kernel, hierarchy depth, prefit tables."""

    def __init__(self, kernel: KernelModel, levels: int, lsq: bool = True,
                 nodes_per_axis: int = 6, admissibility_tol: float = 1e-3,
                 check_admissibility: bool = True):
        if levels < COARSEST_LEVEL:
            raise StageError(f"levels must be >= {COARSEST_LEVEL}")
        self.kernel = kernel
        self.levels = levels
        self.rho = kernel.rho
        self.table = kernel.table
        self.lsq = lsq
        self.m2l_tables = fit_m2l_tables(
            kernel, levels, lsq=lsq, nodes_per_axis=nodes_per_axis,
            admissibility_tol=admissibility_tol, check=check_admissibility)
        half = {}
        for cx in (0, 1):
            for cy in (0, 1):
                for cz in (0, 1):
                    half[(cx, cy, cz)] = np.array([cx - 0.5, cy - 0.5, cz - 0.5])
        self._child_offsets = half
        self.flops = flops.FlopCounter()
        self.expansion_count = 0

    # -- pipeline stages ---------------------------------------------------

    def zero_grid(self, level: int, channels: int, kind: str) -> ExpansionGrid:
        res = level_resolution(level)
        data = np.zeros((res, res, res, channels, self.table.size))
        return ExpansionGrid(level=level, kind=kind, data=data, rho=self.rho)

    def p2m(self, sources: SourceSet) -> ExpansionGrid:
        """Sort sources into finest-level moments."""
        grid = self.zero_grid(self.levels, sources.channels, "M")
        if sources.n:
            res = grid.res
            b = find_box(self.levels, sources.p)
            d = sources.p - box_centers(self.levels, b)
            mono = _monomials(self.table, d)                       # (N, P)
            flat = grid.data.reshape(res ** 3, sources.channels, self.table.size)
            fb = (b[:, 0] * res + b[:, 1]) * res + b[:, 2]
            np.add.at(flat, fb, sources.w[:, :, None] * mono[:, None, :])
        self.flops.add("p2m", flops.p2m_flops(sources.n, self.rho, self.table.size))
        return grid

    def m2m(self, fine: ExpansionGrid) -> ExpansionGrid:
        """Aggregate 2x2x2 children into one-level-coarser moments."""
        if fine.kind != "M":
            raise StageError("m2m expects an M grid")
        if fine.level <= COARSEST_LEVEL:
            raise StageError("already at the coarsest level")
        coarse = self.zero_grid(fine.level - 1, fine.channels, "M")
        wf = fine.box_width
        for child, off in self._child_offsets.items():
            K = _shift_kernel(self.table, off * wf, "m2m")
            sub = fine.data[child[0]::2, child[1]::2, child[2]::2]
            coarse.data += sub @ K.T
        self.flops.add("m2m", flops.translate_flops(coarse.res, self.table.size))
        return coarse

    def l2l(self, coarse: ExpansionGrid) -> ExpansionGrid:
        """Re-center coarse local expansions into the 8 children (additive)."""
        if coarse.kind != "L":
            raise StageError("l2l expects an L grid")
        fine = self.zero_grid(coarse.level + 1, coarse.channels, "L")
        wf = fine.box_width
        for child, off in self._child_offsets.items():
            K = _shift_kernel(self.table, off * wf, "l2l")
            fine.data[child[0]::2, child[1]::2, child[2]::2] = coarse.data @ K.T
        self.flops.add("l2l", flops.translate_flops(coarse.res, self.table.size))
        return fine

    def m2l(self, m: ExpansionGrid, table: M2LTable) -> ExpansionGrid:
        """Contract moments against the level's stencil into local expansions."""
        if m.kind != "M":
            raise StageError("m2l expects an M grid")
        if m.level != table.level:
            raise StageError(f"grid level {m.level} != table level {table.level}")
        out = self.zero_grid(m.level, m.channels, "L")
        res = m.res
        parity_stencil = not table.nearfield and table.level != COARSEST_LEVEL
        n_flops = 0
        for i in range(table.offsets.shape[0]):
            if not table.active[i]:
                continue
            off = table.offsets[i]
            sl = []
            ok = True
            for axis in range(3):
                delta = int(off[axis])
                parity = None
                if parity_stencil and abs(delta) == 3:
                    # reach-3 offsets only occur for one target parity:
                    # odd targets see -3, even targets see +3
                    parity = 1 if delta == -3 else 0
                pair = _axis_slices(res, delta, parity)
                if pair is None:
                    ok = False
                    break
                sl.append(pair)
            if not ok:
                continue
            tgt = (sl[0][0], sl[1][0], sl[2][0])
            src = (sl[0][1], sl[1][1], sl[2][1])
            block = np.ascontiguousarray(m.data[src])
            prod = block.reshape(-1, self.table.size) @ table.coeffs[i].T
            out.data[tgt] += prod.reshape(block.shape)
            n_flops += block.size * self.table.size * 2
        self.flops.add("m2l", n_flops)
        return out

    # -- orchestration -----------------------------------------------------

    def expand_from_moments(self, m_finest: ExpansionGrid) -> "Accessor":
        """Run the full M2M / M2L / L2L cascade from prebuilt finest moments."""
        self.expansion_count += 1
        m_grids = {self.levels: m_finest}
        for level in range(self.levels, COARSEST_LEVEL, -1):
            m_grids[level - 1] = self.m2m(m_grids[level])
        l_grid = self.m2l(m_grids[COARSEST_LEVEL], self.m2l_tables["far"][COARSEST_LEVEL])
        for level in range(COARSEST_LEVEL + 1, self.levels + 1):
            l_next = self.m2l(m_grids[level], self.m2l_tables["far"][level])
            l_next.data += self.l2l(l_grid).data
            l_grid = l_next
        near = self.m2l(m_grids[self.levels], self.m2l_tables["near"])
        l_grid.data += near.data
        return Accessor(l_grid, self.table, self.flops)

    def expand(self, sources: SourceSet) -> "Accessor":
        """Full pipeline: sources to a queryable finest-level local grid."""
        return self.expand_from_moments(self.p2m(sources))


def axis_points(n: int, a: float = -1.0, b: float = 1.0) -> np.ndarray:
    """linspace-style query axis; bare domain endpoints are nudged inward so
    queries stay strictly inside the open domain."""
    lo = np.nextafter(-1.0, 0.0) if a <= -1.0 else a
    hi = np.nextafter(1.0, 0.0) if b >= 1.0 else b
    return np.linspace(lo, hi, n)


class Accessor:
    """Read-only value/derivative queries against a finest-level L grid."""

    def __init__(self, grid: ExpansionGrid, table: MultiIndexTable,
                 counter: flops.FlopCounter | None = None):
        if grid.kind != "L":
            raise StageError("accessor requires an L grid")
        self.grid = grid
        self.table = table
        self._counter = counter
        self._shift1 = self._shift_indices(1)
        self._shift2 = self._shift_indices(2)

    def _shift_indices(self, order: int) -> list[np.ndarray]:
        """Index maps realizing coefficient-space differentiation.

        For a derivative direction with offset multi-index ``s``, entry j of
        the map holds the ordinal of (entries[j] + s), or -1 if it leaves
        the table; the gradient's coefficient j is the mapped coefficient.
        """
        if order == 1:
            shifts = [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
        else:
            shifts = [(2, 0, 0), (0, 2, 0), (0, 0, 2),
                      (1, 1, 0), (1, 0, 1), (0, 1, 1)]
        maps = []
        for s in shifts:
            idx = np.full(self.table.size, -1, dtype=np.int64)
            for j, n in enumerate(self.table.entries):
                tgt = (int(n[0] + s[0]), int(n[1] + s[1]), int(n[2] + s[2]))
                if tgt in self.table:
                    idx[j] = self.table.index_of(tgt)
            maps.append(idx)
        return maps

    @property
    def channels(self) -> int:
        return self.grid.channels

    def _local(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        if q.size and np.max(np.abs(q)) >= 1.0:
            raise DomainError("query locations must lie strictly inside (-1, 1)^3")
        b = find_box(self.grid.level, q)
        d = q - box_centers(self.grid.level, b)
        coeffs = self.grid.data[b[:, 0], b[:, 1], b[:, 2]]         # (M, C, P)
        return coeffs, d

    def box_coeffs(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Expansion coefficient blocks and in-box offsets for query points."""
        return self._local(q)

    def value(self, q: np.ndarray) -> np.ndarray:
        """Field values at points (M, 3) -> (M, C)."""
        coeffs, d = self._local(q)
        mono = _monomials(self.table, d)
        if self._counter is not None:
            self._counter.add("l2p", flops.l2p_flops(d.shape[0], self.table.rho,
                                                     self.table.size))
        return np.einsum("mcp,mp->mc", coeffs, mono)

    def _shifted_contraction(self, q: np.ndarray, maps: list[np.ndarray]) -> np.ndarray:
        coeffs, d = self._local(q)
        mono = _monomials(self.table, d)
        out = np.empty((d.shape[0], self.grid.channels, len(maps)))
        for i, idx in enumerate(maps):
            ok = idx >= 0
            sel = coeffs[:, :, idx[ok]]
            out[:, :, i] = np.einsum("mcp,mp->mc", sel, mono[:, ok])
        return out

    def partials(self, q: np.ndarray) -> np.ndarray:
        """Gradient of the box polynomial at each point, (M, C, 3)."""
        return self._shifted_contraction(np.atleast_2d(q), self._shift1)

    def partials2(self, q: np.ndarray) -> np.ndarray:
        """Second partials (xx, yy, zz, xy, xz, yz) at each point, (M, C, 6)."""
        return self._shifted_contraction(np.atleast_2d(q), self._shift2)

    # -- volume queries ----------------------------------------------------

    def _vol_points(self, xs, ys, zs) -> tuple[np.ndarray, tuple[int, int, int]]:
        xs, ys, zs = (np.atleast_1d(np.asarray(a, dtype=np.float64))
                      for a in (xs, ys, zs))
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        return pts, (xs.size, ys.size, zs.size)

    def value_vol(self, xs, ys, zs) -> np.ndarray:
        """Meshgrid values, shape (C, len(xs), len(ys), len(zs))."""
        pts, shape = self._vol_points(xs, ys, zs)
        v = self.value(pts)                                        # (M, C)
        return np.moveaxis(v.reshape(*shape, self.channels), 3, 0)

    def partials_vol(self, xs, ys, zs) -> np.ndarray:
        pts, shape = self._vol_points(xs, ys, zs)
        v = self.partials(pts)
        return np.moveaxis(v.reshape(*shape, self.channels, 3), 3, 0)

    def partials2_vol(self, xs, ys, zs) -> np.ndarray:
        pts, shape = self._vol_points(xs, ys, zs)
        v = self.partials2(pts)
        return np.moveaxis(v.reshape(*shape, self.channels, 6), 3, 0)
