import math

import numpy as np
import pytest

from latentflow.boids import (AgentMotion, BoidsParams, BoidsState, Bounds,
                              boids_step, rasterize_agent_flow)

# ---------------------------------------------------------------------------
# Independent oracle, written rule by rule from the steering definitions.
# Neighbor reductions are correctly rounded (fsum) and the three weighted
# terms are summed separation + alignment + cohesion, matching the documented
# arithmetic order, so agreement is exact.
# ---------------------------------------------------------------------------


def _limit(vec, cap):
    m = math.hypot(vec[0], vec[1])
    if m > cap:
        return (vec[0] * (cap / m), vec[1] * (cap / m))
    return vec


def _separation_rule(i, pos, prm):
    offs = [(pos[i][0] - pos[j][0], pos[i][1] - pos[j][1])
            for j in range(len(pos)) if j != i
            and 0.0 < math.hypot(pos[j][0] - pos[i][0], pos[j][1] - pos[i][1])
            < prm.separation_radius]
    return (math.fsum(o[0] for o in offs), math.fsum(o[1] for o in offs))


def _perceived(i, pos, prm):
    return [j for j in range(len(pos)) if j != i
            and 0.0 < math.hypot(pos[j][0] - pos[i][0], pos[j][1] - pos[i][1])
            < prm.perception_radius]


def _alignment_rule(i, pos, vel, prm):
    nbrs = _perceived(i, pos, prm)
    if not nbrs:
        return (0.0, 0.0)
    k = len(nbrs)
    return (math.fsum(vel[j][0] for j in nbrs) / k - vel[i][0],
            math.fsum(vel[j][1] for j in nbrs) / k - vel[i][1])


def _cohesion_rule(i, pos, vel, prm):
    nbrs = _perceived(i, pos, prm)
    if not nbrs:
        return (0.0, 0.0)
    k = len(nbrs)
    return (math.fsum(pos[j][0] for j in nbrs) / k - pos[i][0],
            math.fsum(pos[j][1] for j in nbrs) / k - pos[i][1])


def _bounce(x, vx, size, policy):
    if policy == "wrap":
        return x % size, vx
    if x < 0.0:
        return -x, -vx
    if x > size:
        return 2.0 * size - x, -vx
    return x, vx


def oracle_step(pos, vel, prm, bounds):
    out_p, out_v = [], []
    for i in range(len(pos)):
        sep = _limit(_separation_rule(i, pos, prm), prm.max_force)
        ali = _limit(_alignment_rule(i, pos, vel, prm), prm.max_force)
        coh = _limit(_cohesion_rule(i, pos, vel, prm), prm.max_force)
        sx = prm.w_sep * sep[0] + prm.w_align * ali[0] + prm.w_coh * coh[0]
        sy = prm.w_sep * sep[1] + prm.w_align * ali[1] + prm.w_coh * coh[1]
        vx, vy = _limit((vel[i][0] + sx, vel[i][1] + sy), prm.max_speed)
        x, vx = _bounce(pos[i][0] + vx, vx, bounds.width, bounds.policy)
        y, vy = _bounce(pos[i][1] + vy, vy, bounds.height, bounds.policy)
        out_p.append((x, y))
        out_v.append((vx, vy))
    return out_p, out_v


def random_state(n, seed, policy="wrap"):
    rng = np.random.default_rng(seed)
    prm = BoidsParams()
    bounds = Bounds(256.0, 256.0, policy)
    pos = rng.uniform(20, 236, size=(n, 2))
    vel = rng.uniform(-2, 2, size=(n, 2))
    return BoidsState(pos, vel, prm, bounds)


def test_single_agent_advances_unperturbed():
    st = BoidsState(np.array([[10.0, 20.0]]), np.array([[1.0, 0.0]]),
                    BoidsParams(), Bounds(64, 64, "wrap"))
    new, motions = boids_step(st)
    assert np.array_equal(new.positions, [[11.0, 20.0]])
    assert np.array_equal(new.velocities, [[1.0, 0.0]])
    assert motions == [AgentMotion((10.0, 20.0), (1.0, 0.0))]


def test_two_distant_agents_behave_independently():
    prm = BoidsParams(perception_radius=10.0)
    st = BoidsState(np.array([[10.0, 10.0], [200.0, 200.0]]),
                    np.array([[1.0, 0.5], [-1.0, 0.0]]), prm, Bounds(256, 256))
    new, _ = boids_step(st)
    assert np.array_equal(new.positions, [[11.0, 10.5], [199.0, 200.0]])
    assert np.array_equal(new.velocities, st.velocities)


def test_empty_state_is_a_noop():
    st = BoidsState(np.zeros((0, 2)), np.zeros((0, 2)), BoidsParams(), Bounds(10, 10))
    new, motions = boids_step(st)
    assert len(new) == 0 and motions == []


def test_hundred_steps_match_oracle_bitwise():
    st = random_state(10, seed=123)
    pos = [tuple(map(float, p)) for p in st.positions]
    vel = [tuple(map(float, v)) for v in st.velocities]
    for _ in range(100):
        st, _ = boids_step(st)
        pos, vel = oracle_step(pos, vel, st.params, st.bounds)
    assert np.array_equal(st.positions, np.array(pos))
    assert np.array_equal(st.velocities, np.array(vel))


def test_speed_clamp_holds_after_every_step():
    st = random_state(20, seed=5)
    for _ in range(30):
        st, _ = boids_step(st)
        speed = np.hypot(st.velocities[:, 0], st.velocities[:, 1])
        assert speed.max() <= st.params.max_speed + 1e-12
        assert st.positions.min() >= 0
        assert st.positions[:, 0].max() <= st.bounds.width
        assert st.positions[:, 1].max() <= st.bounds.height


def test_permutation_equivariance_exact():
    st = random_state(12, seed=9)
    perm = np.random.default_rng(1).permutation(12)
    st_perm = BoidsState(st.positions[perm], st.velocities[perm], st.params, st.bounds)
    a, _ = boids_step(st)
    b, _ = boids_step(st_perm)
    assert np.array_equal(a.positions[perm], b.positions)
    assert np.array_equal(a.velocities[perm], b.velocities)


def test_mirror_symmetry_about_vertical_axis():
    st = random_state(15, seed=21, policy="wrap")
    w = st.bounds.width
    mirrored = BoidsState(np.column_stack([w - st.positions[:, 0], st.positions[:, 1]]),
                          np.column_stack([-st.velocities[:, 0], st.velocities[:, 1]]),
                          st.params, st.bounds)
    a, _ = boids_step(st)
    b, _ = boids_step(mirrored)
    assert np.allclose((w - a.positions[:, 0]) % w, b.positions[:, 0] % w, atol=1e-9)
    assert np.allclose(a.positions[:, 1], b.positions[:, 1], atol=1e-9)
    assert np.allclose(-a.velocities[:, 0], b.velocities[:, 0], atol=1e-9)


def test_reflect_policy_bounces():
    st = BoidsState(np.array([[63.5, 32.0]]), np.array([[2.0, 0.0]]),
                    BoidsParams(), Bounds(64, 64, "reflect"))
    new, motions = boids_step(st)
    assert new.positions[0, 0] == pytest.approx(62.5)
    assert new.velocities[0, 0] == -2.0
    # displacement reports the unfolded step
    assert motions[0].displacement == (2.0, 0.0)


def test_state_validates_speed():
    with pytest.raises(ValueError):
        BoidsState(np.zeros((1, 2)), np.array([[99.0, 0.0]]),
                   BoidsParams(max_speed=4.0), Bounds(10, 10))


# --- rasterize_agent_flow --------------------------------------------------


def test_rasterize_no_agents_zero_flow():
    f = rasterize_agent_flow([], 3, (16, 16))
    assert not f.u.any() and not f.v.any()
    assert f.convention == "forward"


def test_rasterize_single_disk():
    f = rasterize_agent_flow([AgentMotion((8.0, 8.0), (2.0, 1.0))], 3, (16, 16))
    ys, xs = np.mgrid[0:16, 0:16]
    disk = (xs - 8) ** 2 + (ys - 8) ** 2 <= 9
    assert np.all(f.u[disk] == 2.0) and np.all(f.v[disk] == 1.0)
    assert not f.u[~disk].any() and not f.v[~disk].any()


def test_rasterize_overlap_averages():
    f = rasterize_agent_flow([AgentMotion((6.0, 8.0), (2.0, 0.0)),
                              AgentMotion((10.0, 8.0), (0.0, 2.0))], 3, (16, 16))
    ys, xs = np.mgrid[0:16, 0:16]
    d1 = (xs - 6) ** 2 + (ys - 8) ** 2 <= 9
    d2 = (xs - 10) ** 2 + (ys - 8) ** 2 <= 9
    both = d1 & d2
    assert both.any()
    assert np.allclose(f.u[both], 1.0) and np.allclose(f.v[both], 1.0)
    only1 = d1 & ~d2
    assert np.allclose(f.u[only1], 2.0) and np.allclose(f.v[only1], 0.0)


def test_rasterize_rejects_tiny_radius():
    with pytest.raises(ValueError):
        rasterize_agent_flow([], 0.5, (8, 8))
