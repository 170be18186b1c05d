"""Brute-force reference implementations.

Everything here is deliberately direct and O(N*M): exact pairwise kernel
sums with closed-form Gaussian derivatives, dense quadrature for line
integrals, and bisection for ray roots.  The fast pipeline is validated
against these, never the other way around.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import KernelModel

_CHUNK = 2048  # targets per block; keeps the pairwise buffer modest


def naive_sum(kernel: KernelModel, p: np.ndarray, w: np.ndarray,
              q: np.ndarray) -> np.ndarray:
    """Exact field sum_i w_i psi(q - p_i); returns (M, C)."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    out = np.empty((q.shape[0], w.shape[1]))
    for lo in range(0, q.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, q.shape[0])
        diff = q[lo:hi, None, :] - p[None, :, :]
        k = np.exp(-kernel.alpha * np.sum(diff * diff, axis=2))    # (m, N)
        out[lo:hi] = k @ w
    return out


def naive_grads(kernel: KernelModel, p: np.ndarray, w: np.ndarray,
                q: np.ndarray) -> np.ndarray:
    """Exact spatial gradient of the field at targets; returns (M, C, 3).

    grad psi(x) = -2 alpha x psi(x).
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    out = np.empty((q.shape[0], w.shape[1], 3))
    for lo in range(0, q.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, q.shape[0])
        diff = q[lo:hi, None, :] - p[None, :, :]                   # (m, N, 3)
        k = np.exp(-kernel.alpha * np.sum(diff * diff, axis=2))
        g = -2.0 * kernel.alpha * diff * k[:, :, None]             # (m, N, 3)
        out[lo:hi] = np.einsum("mna,nc->mca", g, w)
    return out


def line_values(kernel: KernelModel, p: np.ndarray, w: np.ndarray,
                origin: np.ndarray, direction: np.ndarray,
                ts: np.ndarray) -> np.ndarray:
    """Exact field along a ray at parameters ``ts``; returns (T, C)."""
    pts = origin[None, :] + ts[:, None] * direction[None, :]
    return naive_sum(kernel, p, w, pts)


def naive_field(kernel: KernelModel, p: np.ndarray, w: np.ndarray):
    """Field sampler ``pts -> (n, C)`` closing over an exact pairwise sum;
    interchangeable with an accessor's ``value`` in the oracles below."""
    return lambda pts: naive_sum(kernel, p, w, pts)


def _grid_breakpoints(origin: np.ndarray, direction: np.ndarray,
                      t0: float, t1: float, level: int) -> np.ndarray:
    """Ray parameters of the 2^(level+1) grid plane crossings inside
    (t0, t1), plus the endpoints; computed directly from the planes."""
    res = 2 ** (level + 1)
    planes = -1.0 + (2.0 / res) * np.arange(res + 1)
    cuts = [np.array([t0, t1])]
    for a in range(3):
        if direction[a] != 0.0:
            ts = (planes - origin[a]) / direction[a]
            cuts.append(ts[(ts > t0) & (ts < t1)])
    return np.unique(np.concatenate(cuts))


def quadrature_line_integral(field, origin: np.ndarray, direction: np.ndarray,
                             t0: float, t1: float, n: int = 4096,
                             level: int | None = None) -> np.ndarray:
    """Dense quadrature of a sampled field over [t0, t1]; returns (C,).

    ``field`` maps points (n, 3) to values (n, C).  Without ``level`` this
    is the composite midpoint rule.  With ``level`` the interval is split
    at the grid plane crossings and an 8-point Gauss-Legendre rule is tiled
    inside each piece, so a piecewise-polynomial field (smooth between
    crossings) is integrated to rounding accuracy with ~n samples.
    """
    if level is None:
        ts = t0 + (np.arange(n) + 0.5) * (t1 - t0) / n
        wts = np.full(n, (t1 - t0) / n)
    else:
        bp = _grid_breakpoints(origin, direction, t0, t1, level)
        x, gw = np.polynomial.legendre.leggauss(8)
        lens = np.diff(bp)
        tiles = np.maximum((n * lens / max(t1 - t0, 1e-300) / 8).astype(int), 1)
        ts_list, w_list = [], []
        for lo, length, m in zip(bp[:-1], lens, tiles):
            edges = lo + length / m * np.arange(m + 1)
            mids = 0.5 * (edges[:-1] + edges[1:])
            half = length / m / 2.0
            ts_list.append((mids[:, None] + half * x[None, :]).ravel())
            w_list.append(np.broadcast_to(half * gw[None, :], (m, 8)).ravel())
        ts = np.concatenate(ts_list)
        wts = np.concatenate(w_list)
    pts = origin[None, :] + ts[:, None] * direction[None, :]
    return wts @ field(pts)


def quadrature_render(field, origin: np.ndarray, direction: np.ndarray,
                      t0: float, t1: float,
                      background: np.ndarray | None = None,
                      n: int = 4096) -> tuple[np.ndarray, float]:
    """Emission/absorption rendering of one ray by dense midpoint quadrature
    with the exact exponential.

    ``field`` maps points (n, 3) to (n, 1 + C) with the density in channel
    0 (clipped here) and colors in the rest.  Returns (rgb, t_inf).
    """
    dt = (t1 - t0) / n
    ts = t0 + (np.arange(n) + 0.5) * dt
    pts = origin[None, :] + ts[:, None] * direction[None, :]
    vals = field(pts)
    sigma = np.maximum(vals[:, 0], 0.0)
    colors = vals[:, 1:]
    depth = np.cumsum(sigma) * dt
    trans = np.exp(-(depth - sigma * dt / 2.0))    # midpoint transmittance
    out = (trans[:, None] * sigma[:, None] * colors).sum(axis=0) * dt
    t_inf = float(np.exp(-depth[-1]))
    if background is not None:
        out = out + t_inf * np.asarray(background, dtype=np.float64)
    return out, t_inf


def quadrature_render_rays(field, origins: np.ndarray, directions: np.ndarray,
                           t0: np.ndarray, t1: np.ndarray,
                           background: np.ndarray | None = None,
                           n: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``quadrature_render`` over a bundle of rays.

    Returns (rgb (R, C), t_inf (R,)); rays with empty spans render pure
    background.
    """
    length = np.maximum(t1 - t0, 0.0)
    dt = length / n                                        # (R,)
    ts = t0[:, None] + (np.arange(n)[None, :] + 0.5) * dt[:, None]
    pts = origins[:, None, :] + ts[..., None] * directions[:, None, :]
    vals = field(pts.reshape(-1, 3)).reshape(origins.shape[0], n, -1)
    sigma = np.maximum(vals[..., 0], 0.0)
    colors = vals[..., 1:]
    depth = np.cumsum(sigma, axis=1) * dt[:, None]
    trans = np.exp(-(depth - sigma * dt[:, None] / 2.0))
    rgb = np.einsum("rs,rsc->rc", trans * sigma, colors) * dt[:, None]
    t_inf = np.exp(-depth[:, -1])
    if background is not None:
        rgb = rgb + t_inf[:, None] * np.asarray(background, dtype=np.float64)
    return rgb, t_inf


def quadrature_render_grads(kernel: KernelModel, p: np.ndarray,
                            w_sigma: np.ndarray, w_color: np.ndarray,
                            origins: np.ndarray, directions: np.ndarray,
                            t0: np.ndarray, t1: np.ndarray,
                            y_bar: np.ndarray,
                            background: np.ndarray | None = None,
                            n: int = 128) -> tuple[np.ndarray, np.ndarray,
                                                   np.ndarray, np.ndarray]:
    """Loss gradients of the midpoint renderer by direct backpropagation.

    Differentiates exactly the computation of ``quadrature_render_rays``
    applied to a pairwise Gaussian mixture (density channel relu-clipped):
    given the output cotangent ``y_bar`` (R, C), returns
    (rgb, w_sigma_bar (N, 1), w_color_bar (N, C), p_bar (N, 3)).
    Everything is closed form -- the only approximation in this training
    path is the quadrature rule itself.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    w_sigma = np.asarray(w_sigma, dtype=np.float64).reshape(p.shape[0], 1)
    w_color = np.asarray(w_color, dtype=np.float64)
    R, C = y_bar.shape[0], w_color.shape[1]
    length = np.maximum(t1 - t0, 0.0)
    dt = length / n                                               # (R,)
    ts = t0[:, None] + (np.arange(n)[None, :] + 0.5) * dt[:, None]
    pts = (origins[:, None, :] + ts[..., None] * directions[:, None, :]
           ).reshape(-1, 3)                                       # (R*n, 3)

    w_all = np.concatenate([w_sigma, w_color], axis=1)
    vals = naive_sum(kernel, p, w_all, pts).reshape(R, n, 1 + C)
    raw = vals[..., 0]
    gate = raw > 0.0
    sigma = np.where(gate, raw, 0.0)
    colors = vals[..., 1:]
    depth = np.cumsum(sigma, axis=1) * dt[:, None]
    trans = np.exp(-(depth - sigma * dt[:, None] / 2.0))
    gterm = trans * sigma * dt[:, None]                           # (R, n)
    rgb = np.einsum("rs,rsc->rc", gterm, colors)
    t_inf = np.exp(-depth[:, -1])
    bg = (np.zeros(C) if background is None
          else np.asarray(background, dtype=np.float64))
    rgb = rgb + t_inf[:, None] * bg

    # cotangents of the sampled field channels
    e = np.einsum("rc,rsc->rs", y_bar, colors)                    # (R, n)
    s_term = gterm * e
    suffix = np.cumsum(s_term[:, ::-1], axis=1)[:, ::-1] - s_term
    a_sig = dt[:, None] * (trans * e - suffix - 0.5 * s_term
                           - (y_bar @ bg)[:, None] * t_inf[:, None])
    a_sig = np.where(gate, a_sig, 0.0).reshape(-1)                # (R*n,)
    b_col = (gterm[..., None] * y_bar[:, None, :]).reshape(-1, C)

    # accumulate over sample points in blocks
    w_sigma_bar = np.zeros((p.shape[0], 1))
    w_color_bar = np.zeros_like(w_color)
    p_bar = np.zeros_like(p)
    for lo in range(0, pts.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, pts.shape[0])
        diff = pts[lo:hi, None, :] - p[None, :, :]                # (m, N, 3)
        k = np.exp(-kernel.alpha * np.sum(diff * diff, axis=2))
        w_sigma_bar[:, 0] += a_sig[lo:hi] @ k
        w_color_bar += k.T @ b_col[lo:hi]
        scal = (a_sig[lo:hi, None] * w_sigma[None, :, 0]
                + b_col[lo:hi] @ w_color.T)                       # (m, N)
        p_bar += 2.0 * kernel.alpha * np.einsum("mn,mna->na", scal * k, diff)
    return rgb, w_sigma_bar, w_color_bar, p_bar


def scan_first_root(f, t0: float, t1: float, step: float,
                    tol: float = 1e-12) -> float:
    """First positive-to-nonpositive crossing of a scalar callable on a grid
    walk of [t0, t1], refined by bisection; nan on miss."""
    ts = np.arange(t0, t1 + step, step)
    ts[-1] = min(ts[-1], t1)
    prev_t, prev_f = ts[0], f(ts[0])
    if prev_f <= 0.0:
        return float(prev_t)
    for t in ts[1:]:
        ft = f(t)
        if ft <= 0.0:
            lo, hi = prev_t, t
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                if f(mid) > 0.0:
                    lo = mid
                else:
                    hi = mid
            return 0.5 * (lo + hi)
        prev_t, prev_f = t, ft
    return float("nan")


def bisect_root(f, lo: float, hi: float, iters: int = 200) -> float:
    """Bisection on a sign change of a scalar callable."""
    flo = f(lo)
    fhi = f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise ValueError("no sign change on the bracket")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0:
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class OracleReport:
    """Error summary of a fast result against its brute-force reference."""

    name: str
    rel_l2: float
    max_abs: float

    @staticmethod
    def compare(name: str, fast: np.ndarray, exact: np.ndarray) -> "OracleReport":
        fast = np.asarray(fast, dtype=np.float64)
        exact = np.asarray(exact, dtype=np.float64)
        denom = float(np.linalg.norm(exact))
        num = float(np.linalg.norm(fast - exact))
        rel = num / denom if denom > 0 else num
        return OracleReport(name=name, rel_l2=rel,
                            max_abs=float(np.max(np.abs(fast - exact))))
