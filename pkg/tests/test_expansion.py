import numpy as np
import pytest

from fc2t2.expansion import (Accessor, DomainError, Engine, SourceSet,
                             StageError, axis_points, box_centers, find_box)
from fc2t2.kernel import KernelModel, level_box_width
from fc2t2.oracle import OracleReport, naive_grads, naive_sum


@pytest.fixture(scope="module")
def engine():
    return Engine(KernelModel("gaussian", 200.0, 4), 4, lsq=True)


@pytest.fixture(scope="module")
def cloud():
    rng = np.random.default_rng(7)
    p = rng.uniform(-0.95, 0.95, (1000, 3))
    w = rng.normal(size=(1000, 2))
    q = rng.uniform(-0.95, 0.95, (1000, 3))
    return p, w, q


def test_find_box_and_centers():
    # level 2: 8 boxes of width 0.25 per axis
    b = find_box(2, np.array([[-0.999, 0.0, 0.999]]))
    assert tuple(b[0]) == (0, 4, 7)
    c = box_centers(2, b)[0]
    assert c[0] == pytest.approx(-0.875)
    assert c[1] == pytest.approx(0.125)


def test_sources_outside_domain_rejected():
    with pytest.raises(DomainError):
        SourceSet(np.array([[0.0, 1.0, 0.0]]), np.array([1.0]))


def test_p2m_single_source_moments(engine):
    p = np.array([[0.3, -0.2, 0.11]])
    s = SourceSet(p, np.array([2.0]))
    grid = engine.p2m(s)
    b = find_box(4, p)[0]
    d = p[0] - box_centers(4, b[None, :])[0]
    t = engine.table
    block = grid.data[b[0], b[1], b[2], 0]
    assert block[t.index_of((0, 0, 0))] == pytest.approx(2.0)
    assert block[t.index_of((1, 0, 0))] == pytest.approx(2.0 * d[0])
    assert block[t.index_of((2, 0, 0))] == pytest.approx(2.0 * d[0] ** 2 / 2)
    # only one box touched
    assert np.count_nonzero(grid.data.sum(axis=(3, 4))) == 1


def test_m2m_preserves_low_moments(engine, cloud):
    """Total mass and first moments (about a shared origin) survive
    coarsening exactly."""
    p, w, _ = cloud
    fine = engine.p2m(SourceSet(p, w))
    coarse = engine.m2m(fine)
    t = engine.table
    for grid in (fine, coarse):
        res = grid.res
        idx = np.indices((res, res, res)).reshape(3, -1).T
        centers = box_centers(grid.level, idx)
        flat = grid.data.reshape(-1, grid.channels, t.size)
        mass = flat[:, :, t.index_of((0, 0, 0))].sum(axis=0)
        mx = (flat[:, :, t.index_of((1, 0, 0))]
              + flat[:, :, t.index_of((0, 0, 0))] * centers[:, 0:1]).sum(axis=0)
        if grid is fine:
            ref_mass, ref_mx = mass, mx
        else:
            assert np.allclose(mass, ref_mass, atol=1e-12)
            assert np.allclose(mx, ref_mx, atol=1e-12)


def test_l2l_exact_on_polynomials(engine):
    """Re-centering a degree-rho polynomial is exact: refine a random coarse
    L grid and compare point evaluations through parent and child."""
    rng = np.random.default_rng(3)
    coarse = engine.zero_grid(3, 1, "L")
    coarse.data[:] = rng.normal(size=coarse.data.shape)
    fine = engine.l2l(coarse)
    q = rng.uniform(-0.999, 0.999, (200, 3))
    acc_c = Accessor(coarse, engine.table)
    acc_f = Accessor(fine, engine.table)
    assert np.allclose(acc_c.value(q), acc_f.value(q), atol=1e-10)


def test_l2l_constant_propagates(engine):
    coarse = engine.zero_grid(3, 1, "L")
    coarse.data[..., 0] = 3.5
    fine = engine.l2l(coarse)
    assert np.allclose(fine.data[..., 0], 3.5)
    assert np.allclose(fine.data[..., 1:], 0.0)


def test_m2l_zero_in_zero_out(engine):
    m = engine.zero_grid(4, 1, "M")
    out = engine.m2l(m, engine.m2l_tables["far"][4])
    assert not out.data.any()


def test_m2l_hole_contributes_nothing(engine):
    """A source's far-field pass writes nothing into boxes inside its hole."""
    p = np.array([[0.01, 0.01, 0.01]])
    m = engine.p2m(SourceSet(p, np.array([1.0])))
    out = engine.m2l(m, engine.m2l_tables["far"][4])
    b = find_box(4, p)[0]
    assert not out.data[b[0], b[1], b[2]].any()
    assert not out.data[b[0] + 1, b[1] - 1, b[2]].any()


def test_stage_kind_checks(engine):
    l = engine.zero_grid(4, 1, "L")
    with pytest.raises(StageError):
        engine.m2m(l)
    with pytest.raises(StageError):
        engine.l2l(engine.zero_grid(4, 1, "M"))
    with pytest.raises(StageError):
        engine.m2l(l, engine.m2l_tables["far"][4])


def test_expand_matches_naive(engine, cloud):
    p, w, q = cloud
    acc = engine.expand(SourceSet(p, w))
    rep = OracleReport.compare("value", acc.value(q),
                               naive_sum(engine.kernel, p, w, q))
    assert rep.rel_l2 <= 1e-2


def test_expand_linear_in_weights(engine, cloud):
    p, w, q = cloud
    a1 = engine.expand(SourceSet(p, w)).value(q)
    a2 = engine.expand(SourceSet(p, 2.0 * w)).value(q)
    assert np.allclose(a2, 2.0 * a1, rtol=0, atol=1e-9 * np.max(np.abs(a1)))


def test_partials_match_naive_gradients(engine, cloud):
    p, w, q = cloud
    acc = engine.expand(SourceSet(p, w))
    rep = OracleReport.compare("grad", acc.partials(q),
                               naive_grads(engine.kernel, p, w, q))
    assert rep.rel_l2 <= 5e-2  # one derivative order less accurate


def test_partials2_match_finite_differences(engine, cloud):
    p, w, _ = cloud
    acc = engine.expand(SourceSet(p, w))
    q = np.array([[0.105, -0.2, 0.33]])
    h = 1e-5
    second = acc.partials2(q)[0, 0]
    # xx by central difference of values (same box polynomial)
    ex = np.array([h, 0, 0])
    fd_xx = (acc.value(q + ex)[0, 0] - 2 * acc.value(q)[0, 0]
             + acc.value(q - ex)[0, 0]) / h ** 2
    assert second[0] == pytest.approx(fd_xx, rel=1e-4, abs=1e-4)
    # xy by cross difference
    ey = np.array([0, h, 0])
    fd_xy = (acc.value(q + ex + ey) - acc.value(q + ex - ey)
             - acc.value(q - ex + ey) + acc.value(q - ex - ey))[0, 0] / (4 * h * h)
    assert second[3] == pytest.approx(fd_xy, rel=1e-4, abs=1e-4)


def test_hole_tiling_every_displacement_once(engine):
    """Across all levels, every finest-level box pair is resolved by exactly
    one table (far at some level, or the finest near field)."""
    rng = np.random.default_rng(5)
    finest = engine.levels
    res = 2 ** (finest + 1)
    for _ in range(50):
        src = rng.integers(0, res, 3)
        tgt = rng.integers(0, res, 3)
        owners = []
        s, t = src.copy(), tgt.copy()
        if np.max(np.abs(s - t)) <= 1:
            owners.append("near")
        for level in range(finest, 1, -1):
            delta = s - t
            tab = engine.m2l_tables["far"][level]
            reach = np.max(np.abs(tab.offsets))
            inside = np.max(np.abs(delta)) <= reach
            in_hole = np.max(np.abs(delta)) <= 1
            parity_ok = True
            if level != 2:
                for ax in range(3):
                    if delta[ax] == -3 and t[ax] % 2 == 0:
                        parity_ok = False
                    if delta[ax] == 3 and t[ax] % 2 == 1:
                        parity_ok = False
            if inside and not in_hole and parity_ok:
                owners.append(f"far{level}")
            s //= 2
            t //= 2
        assert len(owners) == 1, (src, tgt, owners)


def test_query_outside_domain_rejected(engine, cloud):
    p, w, _ = cloud
    acc = engine.expand(SourceSet(p, w))
    with pytest.raises(DomainError):
        acc.value(np.array([[1.0, 0.0, 0.0]]))


def test_vol_query_shape(engine, cloud):
    p, w, _ = cloud
    acc = engine.expand(SourceSet(p, w))
    out = acc.value_vol(axis_points(4), axis_points(3), axis_points(1))
    assert out.shape == (2, 4, 3, 1)
    # consistency with pointwise queries
    xs = axis_points(4)
    v = acc.value(np.array([[xs[1], axis_points(3)[0], axis_points(1)[0]]]))
    assert out[:, 1, 0, 0] == pytest.approx(v[0], rel=1e-12)


def test_axis_points_nudged_inside():
    xs = axis_points(5)
    assert xs[0] > -1.0 and xs[-1] < 1.0


def test_expansion_counter(engine, cloud):
    p, w, q = cloud
    before = engine.expansion_count
    engine.expand(SourceSet(p, w))
    assert engine.expansion_count == before + 1


def test_flop_model_per_point_counts():
    eng = Engine(KernelModel("gaussian", 200.0, 4), 4, lsq=True,
                 check_admissibility=False)
    rng = np.random.default_rng(0)
    p = rng.uniform(-0.5, 0.5, (10, 3))
    acc = eng.expand(SourceSet(p, np.ones(10)))
    assert eng.flops.stages["p2m"] == 10 * 106
    acc.value(rng.uniform(-0.5, 0.5, (7, 3)))
    assert eng.flops.stages["l2p"] == 7 * 176
