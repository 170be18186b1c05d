"""Low-degree univariate polynomial algebra and closed-form root finding.

Coefficients are stored ascending (``coeffs[i]`` multiplies ``x**i``).
Degrees stay small: ray restrictions of the 3D expansion are quartic, and
the transmittance machinery composes/multiplies a handful of quartics.
Roots of polynomials up to degree 4 are found in closed form (quadratic
formula, Cardano, Ferrari) followed by one Newton polish step, since the
closed forms alone are fragile near repeated roots.
"""

from __future__ import annotations

import math

import numpy as np

DEGREE_CAP = 32
# relative threshold below which a leading coefficient is treated as zero
LEADING_EPS = 1e-12
# accumulated optical depth beyond which rays terminate; the exp(-x) fit
# below is only trustworthy on [0, 5]
EXP_CUTOFF = 4.5
EXP_FIT_RANGE = 5.0


class DegreeError(ValueError):
    """Raised when a polynomial operation would exceed the degree cap."""


def poly_eval(coeffs: np.ndarray, x) -> np.ndarray:
    """Horner evaluation of an ascending-coefficient polynomial."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.zeros_like(x, dtype=np.float64)
    for c in coeffs[::-1]:
        y = y * x + c
    return y


def poly_integrate(coeffs: np.ndarray) -> np.ndarray:
    """Antiderivative with zero constant term."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.size + 1 > DEGREE_CAP + 1:
        raise DegreeError("integration exceeds degree cap")
    out = np.empty(coeffs.size + 1)
    out[0] = 0.0
    out[1:] = coeffs / np.arange(1, coeffs.size + 1)
    return out


def poly_differentiate(coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.size <= 1:
        return np.zeros(1)
    return coeffs[1:] * np.arange(1, coeffs.size)


def poly_add(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n = max(p.size, q.size)
    out = np.zeros(n)
    out[: p.size] += p
    out[: q.size] += q
    return out


def poly_mul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if (p.size - 1) + (q.size - 1) > DEGREE_CAP:
        raise DegreeError("product exceeds degree cap")
    return np.convolve(p, q)


def poly_compose(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Coefficients of p(q(x)), Horner-style in q."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if (p.size - 1) * max(q.size - 1, 0) > DEGREE_CAP:
        raise DegreeError("composition exceeds degree cap")
    out = np.zeros(1)
    for c in p[::-1]:
        out = poly_add(np.convolve(out, q), np.array([c]))
    return out


def _newton_polish(coeffs: np.ndarray, x: float) -> float:
    d = poly_differentiate(coeffs)
    fx = float(poly_eval(coeffs, x))
    dfx = float(poly_eval(d, x))
    if dfx != 0.0 and math.isfinite(dfx):
        step = fx / dfx
        if math.isfinite(step):
            x = x - step
    return x


def _roots_linear(a1: float, a0: float) -> list[float]:
    if a1 == 0.0:
        return []
    return [-a0 / a1]


def _roots_quadratic(a2: float, a1: float, a0: float) -> list[float]:
    disc = a1 * a1 - 4.0 * a2 * a0
    if disc < 0.0:
        return []
    if disc == 0.0:
        return [-a1 / (2.0 * a2)]
    # numerically stable form avoids cancellation in one of the roots
    sq = math.sqrt(disc)
    q = -0.5 * (a1 + math.copysign(sq, a1))
    r1 = q / a2
    r2 = a0 / q if q != 0.0 else -a1 / (2.0 * a2)
    return [r1, r2]


def _roots_cubic(a3: float, a2: float, a1: float, a0: float) -> list[float]:
    # Cardano on the depressed cubic t^3 + p t + q, x = t - a2/(3 a3)
    b, c, d = a2 / a3, a1 / a3, a0 / a3
    shift = b / 3.0
    p = c - b * b / 3.0
    q = 2.0 * b ** 3 / 27.0 - b * c / 3.0 + d
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    roots: list[float]
    if disc > 0.0:
        s = math.sqrt(disc)
        u = math.copysign(abs(-q / 2.0 + s) ** (1.0 / 3.0), -q / 2.0 + s)
        v = math.copysign(abs(-q / 2.0 - s) ** (1.0 / 3.0), -q / 2.0 - s)
        roots = [u + v]
    elif disc == 0.0:
        if q == 0.0:
            roots = [0.0]
        else:
            u = math.copysign(abs(q / 2.0) ** (1.0 / 3.0), q / 2.0)
            roots = [-2.0 * u, u]
    else:
        # three real roots, trigonometric form
        m = 2.0 * math.sqrt(-p / 3.0)
        theta = math.acos(max(-1.0, min(1.0, 3.0 * q / (p * m)))) / 3.0
        roots = [m * math.cos(theta - 2.0 * math.pi * k / 3.0) for k in range(3)]
    return [r - shift for r in roots]


def _roots_quartic(a4: float, a3: float, a2: float, a1: float, a0: float) -> list[float]:
    # Ferrari: depress to y^4 + p y^2 + q y + r with x = y - a3/(4 a4),
    # then split via a real root of the resolvent cubic.
    b, c, d, e = a3 / a4, a2 / a4, a1 / a4, a0 / a4
    shift = b / 4.0
    p = c - 3.0 * b * b / 8.0
    q = d - b * c / 2.0 + b ** 3 / 8.0
    r = e - b * d / 4.0 + b * b * c / 16.0 - 3.0 * b ** 4 / 256.0

    if abs(q) < LEADING_EPS * max(1.0, abs(p), abs(r)):
        # biquadratic: quadratic in y^2
        ys = []
        for z in _roots_quadratic(1.0, p, r):
            if z > 0.0:
                ys.extend([math.sqrt(z), -math.sqrt(z)])
            elif z == 0.0:
                ys.append(0.0)
        return [y - shift for y in ys]

    # resolvent: z^3 - p z^2 - 4 r z + (4 p r - q^2) = 0; pick a real root
    # with z - p > 0 so the square root below is real
    res = _roots_cubic(1.0, -p, -4.0 * r, 4.0 * p * r - q * q)
    z = max(res)
    s2 = z - p
    if s2 <= 0.0:
        s2 = max(s2, 0.0)
    s = math.sqrt(s2)
    ys: list[float] = []
    if s == 0.0:
        ys.extend(y for z2 in _roots_quadratic(1.0, 0.0, r) if z2 >= 0.0
                  for y in ([math.sqrt(z2), -math.sqrt(z2)] if z2 > 0 else [0.0]))
    else:
        t = q / (2.0 * s)
        # descartes split: (y^2 + s y + (z/2 - t))(y^2 - s y + (z/2 + t))
        ys.extend(_roots_quadratic(1.0, s, z / 2.0 - t))
        ys.extend(_roots_quadratic(1.0, -s, z / 2.0 + t))
    return [y - shift for y in ys]


def quartic_roots(coeffs: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """All real roots of a polynomial of degree <= 4, sorted ascending.

    Closed forms per degree, one Newton polish per root, duplicates within
    ``tol`` of each other merged.  A leading coefficient smaller than
    ``LEADING_EPS`` relative to the largest coefficient demotes the degree.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.size > 5:
        raise DegreeError("closed-form root finding only covers degree <= 4")
    c = np.zeros(5)
    c[: coeffs.size] = coeffs
    scale = np.max(np.abs(c))
    if scale == 0.0:
        raise ValueError("zero polynomial has no well-defined roots")
    deg = 4
    while deg > 0 and abs(c[deg]) < LEADING_EPS * scale:
        deg -= 1
    if deg == 0:
        return np.empty(0)
    if deg == 1:
        raw = _roots_linear(c[1], c[0])
    elif deg == 2:
        raw = _roots_quadratic(c[2], c[1], c[0])
    elif deg == 3:
        raw = _roots_cubic(c[3], c[2], c[1], c[0])
    else:
        raw = _roots_quartic(c[4], c[3], c[2], c[1], c[0])
    polished = sorted(_newton_polish(c[: deg + 1], x) for x in raw)
    out: list[float] = []
    for x in polished:
        if not out or abs(x - out[-1]) > tol * max(1.0, abs(x)):
            out.append(x)
    return np.array(out)


_MEXP_CACHE: dict[str, object] = {}


def fit_exp_poly() -> np.ndarray:
    """Degree-4 least-squares fit of exp(-x) over Chebyshev nodes on [0, 5],
    constrained to the exact value 1 at x = 0 (so zero optical depth is
    perfectly transparent).

    Cached; callers treat exp(-x) as 0 beyond x = 5.
    """
    if "coeffs" not in _MEXP_CACHE:
        n_nodes = 64
        k = np.arange(n_nodes)
        nodes = 2.5 + 2.5 * np.cos((2 * k + 1) * np.pi / (2 * n_nodes))
        V = nodes[:, None] ** np.arange(1, 5)[None, :]
        tail, *_ = np.linalg.lstsq(V, np.exp(-nodes) - 1.0, rcond=None)
        coeffs = np.concatenate([[1.0], tail])
        grid = np.linspace(0.0, EXP_FIT_RANGE, 4001)
        err = float(np.max(np.abs(poly_eval(coeffs, grid) - np.exp(-grid))))
        _MEXP_CACHE["coeffs"] = coeffs
        _MEXP_CACHE["max_err"] = err
    return np.array(_MEXP_CACHE["coeffs"])


def mexp_fit_bound() -> float:
    """Max abs error of the cached exp(-x) fit over [0, 5]."""
    fit_exp_poly()
    return float(_MEXP_CACHE["max_err"])


def mexp(x) -> np.ndarray:
    """Fitted exp(-x), clamped to 0 beyond the fit range."""
    x = np.asarray(x, dtype=np.float64)
    y = poly_eval(fit_exp_poly(), x)
    return np.where(x > EXP_FIT_RANGE, 0.0, y)
