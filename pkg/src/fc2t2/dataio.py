"""Dataset loading, image output, and checkpoint persistence.

All binary formats are little-endian and byte-exact:

* points:      magic ``FCPT`` | version u32 | M u64 | C u32 | M rows of
               (x, y, z, v1..vC) float64
* checkpoints: magic ``FCCK`` | version u32 | levels u32 | rho u32 |
               kernel u32 (0 = gaussian) | alpha f64 | N u64 | C u32 |
               bias f64 | p (N*3 f64) | w (N*C f64) | has_opt u32
* images:      binary PPM (P6), 8-bit, round-half-up quantization; a
               ``.png`` path uses the same interface via matplotlib

Mesh-to-SDF sampling is out of scope; the analytic samplers at the bottom
(sphere, box, torus, unions) generate desk-scale training sets instead.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .ray import Camera

POINTS_MAGIC = b"FCPT"
CHECKPOINT_MAGIC = b"FCCK"
POINTS_VERSION = 1
CHECKPOINT_VERSION = 1
_KERNEL_CODES = {"gaussian": 0}
_KERNEL_NAMES = {v: k for k, v in _KERNEL_CODES.items()}


class FormatError(ValueError):
    """Raised on malformed or unsupported file contents."""


@dataclass
class PointSampleSet:
    """Point locations with per-point values (signed distances, colors...)."""

    locations: np.ndarray          # (M, 3)
    values: np.ndarray             # (M, C)

    def __post_init__(self):
        self.locations = np.atleast_2d(np.asarray(self.locations,
                                                  dtype=np.float64))
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        bad = np.flatnonzero(np.any(np.abs(self.locations) >= 1.0, axis=1))
        if bad.size:
            raise FormatError(f"point {bad[0]} lies outside (-1, 1)^3")

    @property
    def count(self) -> int:
        return self.locations.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


def normalize_locations(raw: np.ndarray, margin: float = 0.05
                        ) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Affine map of arbitrary points into (-1, 1)^3 with a relative margin.

    Returns the mapped points and the (scale, offset) pair realizing
    ``mapped = (raw - offset) * scale``.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    lo = raw.min(axis=0)
    hi = raw.max(axis=0)
    center = 0.5 * (lo + hi)
    half = np.maximum(0.5 * (hi - lo), 1e-12) * (1.0 + margin)
    scale = 1.0 / half
    return (raw - center) * scale, (scale, center)


# -- point sets ------------------------------------------------------------

def save_points(path: str, points: PointSampleSet,
                fmt: str | None = None) -> None:
    fmt = fmt or ("csv" if str(path).endswith(".csv") else "binary")
    if fmt == "csv":
        C = points.channels
        header = "x,y,z," + ",".join(f"v{i + 1}" for i in range(C))
        data = np.concatenate([points.locations, points.values], axis=1)
        np.savetxt(path, data, delimiter=",", header=header, comments="",
                   fmt="%.17g")
    else:
        with open(path, "wb") as f:
            f.write(POINTS_MAGIC)
            f.write(struct.pack("<IQI", POINTS_VERSION, points.count,
                                points.channels))
            rows = np.concatenate([points.locations, points.values], axis=1)
            f.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())


def load_points(path: str, fmt: str | None = None) -> PointSampleSet:
    fmt = fmt or ("csv" if str(path).endswith(".csv") else "binary")
    if fmt == "csv":
        with open(path) as f:
            lines = [ln.strip() for ln in f if ln.strip()]
        if not lines:
            raise FormatError(f"{path}: empty points file")
        cols = lines[0].split(",")
        if cols[:3] != ["x", "y", "z"]:
            raise FormatError(f"{path}:1: expected header starting x,y,z")
        rows = []
        for i, ln in enumerate(lines[1:], start=2):
            parts = ln.split(",")
            if len(parts) != len(cols):
                raise FormatError(f"{path}:{i}: expected {len(cols)} columns")
            try:
                rows.append([float(x) for x in parts])
            except ValueError as exc:
                raise FormatError(f"{path}:{i}: {exc}") from None
        data = np.array(rows)
    else:
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != POINTS_MAGIC:
                raise FormatError(f"{path}: bad magic {magic!r}")
            version, m, c = struct.unpack("<IQI", f.read(16))
            if version > POINTS_VERSION:
                raise FormatError(f"{path}: unsupported version {version}")
            buf = f.read(m * (3 + c) * 8)
            if len(buf) != m * (3 + c) * 8:
                raise FormatError(f"{path}: truncated payload")
            data = np.frombuffer(buf, dtype="<f8").reshape(m, 3 + c).copy()
    return PointSampleSet(locations=data[:, :3], values=data[:, 3:])


# -- cameras ---------------------------------------------------------------

_CAMERA_FIELDS = ("eye", "gaze", "up", "fov_y", "width", "height")


def load_cameras(path: str) -> list[tuple[Camera, str | None]]:
    """JSON list of frames: {eye[3], gaze[3], up[3], fov_y, width, height,
    image?}; gaze and up are normalized on load."""
    with open(path) as f:
        frames = json.load(f)
    out = []
    for i, frame in enumerate(frames):
        for name in _CAMERA_FIELDS:
            if name not in frame:
                raise FormatError(f"{path}[{i}]: missing field {name!r}")
        eye = np.asarray(frame["eye"], dtype=np.float64)
        gaze = np.asarray(frame["gaze"], dtype=np.float64)
        up = np.asarray(frame["up"], dtype=np.float64)
        for name, v in (("gaze", gaze), ("up", up)):
            norm = np.linalg.norm(v)
            if not np.isfinite(norm) or norm == 0.0:
                raise FormatError(f"{path}[{i}]: {name} is not normalizable")
        gaze = gaze / np.linalg.norm(gaze)
        cam = Camera(position=eye, look_at=eye + gaze,
                     up=up / np.linalg.norm(up),
                     fov_deg=float(frame["fov_y"]),
                     width=int(frame["width"]), height=int(frame["height"]))
        out.append((cam, frame.get("image")))
    return out


def save_cameras(path: str, frames: list[tuple[Camera, str | None]]) -> None:
    rows = []
    for cam, image in frames:
        gaze = cam.look_at - cam.position
        rows.append({"eye": list(cam.position), "gaze": list(gaze),
                     "up": list(cam.up), "fov_y": cam.fov_deg,
                     "width": cam.width, "height": cam.height,
                     **({"image": image} if image else {})})
    with open(path, "w") as f:
        json.dump(rows, f, indent=1)


# -- images ----------------------------------------------------------------

def _quantize(pixels: np.ndarray) -> np.ndarray:
    """[0, 1] floats to u8 with round-half-up."""
    return np.floor(np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(path: str, pixels: np.ndarray) -> None:
    """H x W x 3 reals in [0, 1] to binary PPM (P6) or PNG by extension."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = np.repeat(pixels[:, :, None], 3, axis=2)
    q = _quantize(pixels)
    if str(path).endswith(".png"):
        import matplotlib.image
        matplotlib.image.imsave(path, q)
        return
    h, w = q.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(q.tobytes())


def load_image(path: str) -> np.ndarray:
    """Image file back to H x W x 3 floats in [0, 1]."""
    if str(path).endswith(".png"):
        import matplotlib.image
        img = matplotlib.image.imread(path)
        return np.asarray(img, dtype=np.float64)[:, :, :3]
    with open(path, "rb") as f:
        if f.read(2) != b"P6":
            raise FormatError(f"{path}: not a P6 PPM")
        fields = []
        while len(fields) < 3:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: truncated header")
            stripped = line.split(b"#")[0].split()
            fields.extend(int(tok) for tok in stripped)
        w, h, maxval = fields[:3]
        if maxval != 255:
            raise FormatError(f"{path}: only 8-bit PPM supported")
        buf = f.read(w * h * 3)
        if len(buf) != w * h * 3:
            raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(buf, dtype=np.uint8).reshape(h, w, 3) / 255.0


# -- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    levels: int
    rho: int
    kernel: str
    alpha: float
    p: np.ndarray                  # (N, 3)
    w: np.ndarray                  # (N, C)
    bias: float = 0.0
    version: int = CHECKPOINT_VERSION
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    p = np.ascontiguousarray(ckpt.p, dtype="<f8")
    w = np.ascontiguousarray(ckpt.w, dtype="<f8")
    n, c = w.shape
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IIIId", CHECKPOINT_VERSION, ckpt.levels,
                            ckpt.rho, _KERNEL_CODES[ckpt.kernel], ckpt.alpha))
        f.write(struct.pack("<QId", n, c, ckpt.bias))
        f.write(p.tobytes())
        f.write(w.tobytes())
        f.write(struct.pack("<I", 0))          # no optimizer state


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        version, levels, rho, kcode, alpha = struct.unpack("<IIIId",
                                                           f.read(24))
        if version > CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        n, c, bias = struct.unpack("<QId", f.read(20))
        pb = f.read(n * 3 * 8)
        wb = f.read(n * c * 8)
        if len(pb) != n * 24 or len(wb) != n * c * 8:
            raise FormatError(f"{path}: truncated parameter block")
    return Checkpoint(levels=levels, rho=rho, kernel=_KERNEL_NAMES[kcode],
                      alpha=alpha, p=np.frombuffer(pb, "<f8").reshape(n, 3).copy(),
                      w=np.frombuffer(wb, "<f8").reshape(n, c).copy(),
                      bias=bias, version=version)


# -- analytic SDF samplers -------------------------------------------------

def sdf_sphere(center, radius: float):
    center = np.asarray(center, dtype=np.float64)
    return lambda q: np.linalg.norm(q - center, axis=-1) - radius


def sdf_box(center, half):
    center = np.asarray(center, dtype=np.float64)
    half = np.asarray(half, dtype=np.float64)

    def f(q):
        d = np.abs(q - center) - half
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(d.max(axis=-1), 0.0)
        return outside + inside
    return f


def sdf_torus(center, major: float, minor: float):
    center = np.asarray(center, dtype=np.float64)

    def f(q):
        d = q - center
        ring = np.hypot(np.hypot(d[..., 0], d[..., 2]) - major, d[..., 1])
        return ring - minor
    return f


def sdf_union(*fs):
    return lambda q: np.minimum.reduce([f(q) for f in fs])


def sample_sdf(sdf, count: int, seed: int = 0,
               margin: float = 0.05) -> PointSampleSet:
    """Uniform random sample locations inside the domain with SDF values."""
    rng = np.random.default_rng(seed)
    q = rng.uniform(-1.0 + margin, 1.0 - margin, (count, 3))
    return PointSampleSet(locations=q, values=sdf(q))
