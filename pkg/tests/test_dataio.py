import json
import struct

import numpy as np
import pytest

from fc2t2 import dataio
from fc2t2.ray import Camera


def _points(n=7, c=2, seed=0):
    rng = np.random.default_rng(seed)
    return dataio.PointSampleSet(locations=rng.uniform(-0.9, 0.9, (n, 3)),
                                 values=rng.normal(size=(n, c)))


def test_point_set_rejects_boundary_points():
    with pytest.raises(dataio.FormatError, match="point 1"):
        dataio.PointSampleSet(locations=np.array([[0.0, 0.0, 0.0],
                                                  [1.0, 0.0, 0.0]]),
                              values=np.zeros(2))


def test_points_csv_roundtrip(tmp_path):
    pts = _points()
    path = tmp_path / "pts.csv"
    dataio.save_points(str(path), pts)
    back = dataio.load_points(str(path))
    assert np.array_equal(back.locations, pts.locations)
    assert np.array_equal(back.values, pts.values)


def test_points_csv_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x,y,z,v1\n0.1,0.2,0.3\n")
    with pytest.raises(dataio.FormatError, match=":2:"):
        dataio.load_points(str(path))
    path.write_text("a,b,c,v1\n")
    with pytest.raises(dataio.FormatError, match="x,y,z"):
        dataio.load_points(str(path))


def test_points_binary_roundtrip_and_layout(tmp_path):
    pts = _points(n=3, c=1)
    path = tmp_path / "pts.fcpt"
    dataio.save_points(str(path), pts)
    raw = path.read_bytes()
    assert raw[:4] == b"FCPT"
    version, m, c = struct.unpack("<IQI", raw[4:20])
    assert (version, m, c) == (1, 3, 1)
    assert len(raw) == 20 + 3 * 4 * 8
    back = dataio.load_points(str(path))
    assert np.array_equal(back.locations, pts.locations)
    assert np.array_equal(back.values, pts.values)


def test_points_binary_rejects_corruption(tmp_path):
    pts = _points(n=3, c=1)
    path = tmp_path / "pts.fcpt"
    dataio.save_points(str(path), pts)
    raw = path.read_bytes()
    (tmp_path / "trunc.fcpt").write_bytes(raw[:-8])
    with pytest.raises(dataio.FormatError, match="truncated"):
        dataio.load_points(str(tmp_path / "trunc.fcpt"))
    (tmp_path / "magic.fcpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(dataio.FormatError, match="magic"):
        dataio.load_points(str(tmp_path / "magic.fcpt"))


def test_normalize_locations():
    raw = np.array([[0.0, 10.0, -5.0], [2.0, 20.0, 5.0]])
    mapped, (scale, offset) = dataio.normalize_locations(raw, margin=0.05)
    assert np.max(np.abs(mapped)) <= 1.0 / 1.05 + 1e-12
    assert np.allclose((raw - offset) * scale, mapped)


def test_cameras_roundtrip(tmp_path):
    cam = Camera(position=np.array([0.0, 0.0, -2.0]), look_at=np.zeros(3),
                 up=np.array([0.0, 1.0, 0.0]), fov_deg=45.0, width=8,
                 height=6)
    path = tmp_path / "cams.json"
    dataio.save_cameras(str(path), [(cam, "img0.ppm"), (cam, None)])
    frames = dataio.load_cameras(str(path))
    assert len(frames) == 2
    back, image = frames[0]
    assert image == "img0.ppm"
    assert frames[1][1] is None
    assert np.allclose(back.position, cam.position)
    assert back.width == 8 and back.height == 6
    fwd = back.look_at - back.position
    assert np.allclose(fwd / np.linalg.norm(fwd), [0.0, 0.0, 1.0])


def test_cameras_missing_field(tmp_path):
    path = tmp_path / "cams.json"
    path.write_text(json.dumps([{"eye": [0, 0, -2], "gaze": [0, 0, 1],
                                 "up": [0, 1, 0], "fov_y": 45.0,
                                 "width": 4}]))
    with pytest.raises(dataio.FormatError, match="height"):
        dataio.load_cameras(str(path))


def test_image_ppm_roundtrip_and_quantization(tmp_path):
    img = np.zeros((2, 2, 3))
    img[0, 0] = [0.5, 1.0, 0.0]          # 0.5 * 255 + 0.5 rounds up to 128
    img[1, 1] = [2.0, -1.0, 0.25]        # clipped
    path = tmp_path / "img.ppm"
    dataio.save_image(str(path), img)
    back = dataio.load_image(str(path))
    assert back.shape == (2, 2, 3)
    assert back[0, 0, 0] == pytest.approx(128 / 255.0)
    assert back[1, 1, 0] == 1.0 and back[1, 1, 1] == 0.0
    assert np.max(np.abs(back - np.clip(img, 0, 1))) <= 0.5 / 255.0 + 1e-12


def test_image_grayscale_broadcast(tmp_path):
    img = np.array([[0.0, 1.0]])
    path = tmp_path / "g.ppm"
    dataio.save_image(str(path), img)
    back = dataio.load_image(str(path))
    assert back.shape == (1, 2, 3)
    assert np.allclose(back[0, 1], 1.0)


def test_image_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(dataio.FormatError, match="P6"):
        dataio.load_image(str(path))


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(3)
    ckpt = dataio.Checkpoint(levels=4, rho=4, kernel="gaussian", alpha=200.0,
                             p=rng.uniform(-0.9, 0.9, (11, 3)),
                             w=rng.normal(size=(11, 2)), bias=-0.125)
    a = tmp_path / "a.ckpt"
    b = tmp_path / "b.ckpt"
    dataio.save_checkpoint(str(a), ckpt)
    dataio.save_checkpoint(str(b), ckpt)
    assert a.read_bytes() == b.read_bytes()
    back = dataio.load_checkpoint(str(a))
    assert (back.levels, back.rho, back.kernel) == (4, 4, "gaussian")
    assert back.alpha == 200.0 and back.bias == -0.125
    assert np.array_equal(back.p, ckpt.p)
    assert np.array_equal(back.w, ckpt.w)


def test_checkpoint_rejects_future_version_and_truncation(tmp_path):
    ckpt = dataio.Checkpoint(levels=3, rho=4, kernel="gaussian", alpha=50.0,
                             p=np.zeros((2, 3)), w=np.ones((2, 1)))
    path = tmp_path / "c.ckpt"
    dataio.save_checkpoint(str(path), ckpt)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", dataio.CHECKPOINT_VERSION + 1)
    (tmp_path / "future.ckpt").write_bytes(bytes(raw))
    with pytest.raises(dataio.FormatError, match="version"):
        dataio.load_checkpoint(str(tmp_path / "future.ckpt"))
    (tmp_path / "trunc.ckpt").write_bytes(path.read_bytes()[:-20])
    with pytest.raises(dataio.FormatError, match="truncated"):
        dataio.load_checkpoint(str(tmp_path / "trunc.ckpt"))


def test_sdf_samplers():
    sphere = dataio.sdf_sphere((0, 0, 0), 0.5)
    assert sphere(np.array([0.5, 0.0, 0.0])) == pytest.approx(0.0)
    box = dataio.sdf_box((0, 0, 0), (0.2, 0.2, 0.2))
    assert box(np.array([0.0, 0.0, 0.0])) == pytest.approx(-0.2)
    assert box(np.array([0.4, 0.0, 0.0])) == pytest.approx(0.2)
    torus = dataio.sdf_torus((0, 0, 0), 0.5, 0.1)
    assert torus(np.array([0.5, 0.0, 0.0])) == pytest.approx(-0.1)
    union = dataio.sdf_union(sphere, box)
    q = np.array([0.3, 0.0, 0.0])
    assert union(q) == pytest.approx(min(sphere(q), box(q)))

    pts = dataio.sample_sdf(sphere, 100, seed=2)
    assert pts.count == 100 and pts.channels == 1
    assert np.allclose(pts.values[:, 0], sphere(pts.locations))
    again = dataio.sample_sdf(sphere, 100, seed=2)
    assert np.array_equal(pts.locations, again.locations)
