import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mbsocnav import kernels
from mbsocnav.errors import ContractViolation
from mbsocnav.lidar import LaserScan, LidarConfig, scan
from mbsocnav.obsmap import (GridConfig, Norms, Observation, ScanHistory, affine_warp, build_stack,
                             denormalize_vector, goal_relative, motion_content_split, normalize_action,
                             denormalize_action, normalize_observation, normalize_vector,
                             propagate_proprioception, rasterize_scan, read_pgm, relative_poses, write_pgm)
from mbsocnav.sim import Action, AgentState, Circle, Pose2, Segment, WorldState, step_agent

G = GridConfig()
DENSE = LidarConfig(n_beams=2049)


def three_beam(ranges):
    cfg = LidarConfig(n_beams=3)  # angles -pi/2, 0, +pi/2
    return LaserScan(np.array(ranges, dtype=np.float64), cfg, Pose2())


def wall_world(pose, x_wall=3.03, extra=()):
    return WorldState(agents=(AgentState(pose, goal=(50.0, 0.0)),),
                      obstacles=(Segment((x_wall, -20.0), (x_wall, 20.0)),) + tuple(extra))


# -- rasterization ------------------------------------------------------------

def test_hit_straight_ahead_lands_on_anchor_column():
    g = rasterize_scan(three_beam([6.0, 1.0, 6.0]), Pose2(), G)
    assert g[53, 32] == 1.0
    assert g.sum() == 1.0


def test_max_range_beams_leave_grid_empty():
    assert rasterize_scan(three_beam([6.0, 6.0, 6.0]), Pose2(), G).sum() == 0


def test_out_of_bounds_hit_discarded():
    # right-hand beam at 4 m lateral is past the 3.2 m half width
    assert rasterize_scan(three_beam([4.0, 6.0, 6.0]), Pose2(), G).sum() == 0


def test_anchor_arithmetic():
    assert G.cell_of(0.0, 0.0) == (63, 32)
    assert G.cell_of(1.0, 0.0) == (53, 32)
    assert G.cell_of(0.0, 0.5) == (63, 27)  # left is decreasing column
    assert G.cell_of(0.0, -0.5) == (63, 37)


def test_relative_pose_moves_hits():
    # scan taken 0.5 m behind the target frame: its 1 m hit is 0.5 m ahead
    g = rasterize_scan(three_beam([6.0, 1.0, 6.0]), Pose2(-0.5, 0.0, 0.0), G)
    assert g[58, 32] == 1.0 and g.sum() == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_rasterize_invariant_to_beam_order(seed):
    rng = np.random.default_rng(seed)
    ang = np.sort(rng.uniform(-math.pi / 2, math.pi / 2, 50))
    rng_ = rng.uniform(0.1, 6.0, 50)
    rng_[rng.random(50) < 0.2] = 6.0
    perm = rng.permutation(50)
    a = kernels.rasterize(rng_, ang, 6.0, 0.2, -0.1, 0.3, 64, 64, 0.1)
    b = kernels.rasterize(rng_[perm], ang[perm], 6.0, 0.2, -0.1, 0.3, 64, 64, 0.1)
    assert np.array_equal(a, b)


# -- stacks -------------------------------------------------------------------

def test_build_stack_length_checked():
    s = three_beam([6.0, 1.0, 6.0])
    with pytest.raises(ContractViolation):
        build_stack([s] * 9, [Pose2()] * 9)
    with pytest.raises(ContractViolation):
        build_stack([s] * 10, [Pose2()] * 9)


def test_stationary_robot_static_world_identical_frames():
    pose = Pose2(0.0, 0.0, 0.4)
    world = wall_world(pose, extra=(Circle((1.5, 1.0), 0.4),))
    s = scan(world, 0)
    stack = build_stack([s] * 10, [pose] * 10)
    assert stack.shape == (10, 64, 64)
    assert all(np.array_equal(stack[0], f) for f in stack)
    motion, content = motion_content_split(stack)
    assert not motion.any()
    assert content is stack[-1] or np.array_equal(content, stack[-1])


def _frames_along(poses):
    scans = [scan(wall_world(p), 0, DENSE) for p in poses]
    return build_stack(scans, poses)


def test_forward_whole_cell_motion_aligns_wall():
    poses = [Pose2()]
    for _ in range(9):
        poses.append(step_agent(poses[-1], Action(1.0, 0.0), 0.1))
    stack = _frames_along(poses)
    wall_row = G.cell_of(3.03 - poses[-1].x, 0.0)[0]
    assert stack[-1][wall_row].all()
    motion, _ = motion_content_split(stack)
    assert not motion.any()


@settings(max_examples=15, deadline=None)
@given(st.lists(st.tuples(st.integers(-1, 1), st.integers(-1, 1)), min_size=9, max_size=9))
def test_ego_disentanglement_integer_cell_paths(steps):
    # static wall, zero rotation, every displacement a whole number of cells
    cells = np.cumsum([(0, 0)] + steps, axis=0)
    poses = [Pose2(0.1 * int(cx), 0.1 * int(cy), 0.0) for cx, cy in cells]
    stack = _frames_along(poses)
    motion, _ = motion_content_split(stack)
    assert stack[-1].sum() > 0
    assert not motion.any()


def _peer_cells(robot, peer_xy, radius, lid):
    # independent footprint: quadratic ray-circle roots mapped through the anchor arithmetic
    cells = set()
    for a in robot.theta + lid.beam_angles():
        d = (math.cos(a), math.sin(a))
        fx, fy = robot.x - peer_xy[0], robot.y - peer_xy[1]
        b = fx * d[0] + fy * d[1]
        disc = b * b - (fx * fx + fy * fy - radius ** 2)
        if disc < 0:
            continue
        t = -b - math.sqrt(disc)
        if t < 0 or t >= lid.max_range:
            continue
        r, c = G.cell_of(t * math.cos(a - robot.theta), t * math.sin(a - robot.theta))
        if 0 <= r < 64 and 0 <= c < 64:
            cells.add((r, c))
    return cells


def test_moving_peer_static_robot_diffs_only_at_peer():
    lid = LidarConfig(n_beams=720)
    robot = Pose2()
    static = Circle((3.0, 2.0), 0.3)
    scans, feet = [], []
    for k in range(10):
        peer = (2.0, -1.5 + 0.1 * k)
        world = WorldState(agents=(AgentState(robot, goal=(9.0, 0.0)), AgentState(Pose2(*peer), goal=(0.0, 9.0))),
                           obstacles=(static,))
        scans.append(scan(world, 0, lid))
        feet.append(_peer_cells(robot, peer, 0.3, lid))
    stack = build_stack(scans, [robot] * 10)
    motion, _ = motion_content_split(stack)
    for i in range(9):
        changed = set(map(tuple, np.argwhere(motion[i] != 0)))
        assert changed
        assert changed <= feet[i] | feet[i + 1]
    # the static obstacle's cells never change
    peerless = scan(WorldState(agents=(AgentState(robot, goal=(9.0, 0.0)),), obstacles=(static,)), 0, lid)
    base = rasterize_scan(peerless, Pose2(), G)
    for f in stack:
        assert np.array_equal(f * base, base)


def test_motion_diff_one_moving_cell():
    stack = np.zeros((10, 64, 64))
    for k in range(10):
        stack[k, 20, 10 + k] = 1.0
    motion, content = motion_content_split(stack)
    for m in motion:
        assert (m == 1).sum() == 1 and (m == -1).sum() == 1 and (m != 0).sum() == 2
    assert np.array_equal(content, stack[9])


def test_split_rejects_wrong_length():
    with pytest.raises(ContractViolation):
        motion_content_split(np.zeros((9, 64, 64)))


def test_scan_history_window():
    s0 = LaserScan(np.full(3, 6.0), LidarConfig(n_beams=3), Pose2(0.0, 0.0, 0.0))
    h = ScanHistory(s0)
    ranges, rel = h.window()
    assert ranges.shape == (10, 3) and not rel.any()
    s1 = LaserScan(np.array([6.0, 1.0, 6.0]), LidarConfig(n_beams=3), Pose2(0.5, 0.0, 0.0))
    h.push(s1)
    ranges, rel = h.window()
    assert np.array_equal(ranges[-1], s1.ranges)
    assert np.allclose(rel[0], [-0.5, 0.0, 0.0])
    assert h.stack()[-1][53, 32] == 1.0


def test_relative_poses_rotation():
    rel = relative_poses([Pose2(1.0, 0.0, 0.0), Pose2(0.0, 0.0, math.pi / 2)])
    # the older pose sits on the newest robot's right, heading -90 degrees
    assert np.allclose(rel[0], [0.0, -1.0, -math.pi / 2])
    assert np.array_equal(rel[1], np.zeros(3))


# -- warping ------------------------------------------------------------------

def random_grid(rng, p=0.2):
    return (rng.random((64, 64)) < p).astype(np.float64)


def test_identity_warp_is_bit_exact(rng):
    g = rng.random((64, 64))
    assert np.array_equal(affine_warp(g, Pose2()), g)


def test_forward_one_cell_warp_shifts_rows(rng):
    g = random_grid(rng)
    out = affine_warp(g, Pose2(0.1, 0.0, 0.0))
    assert np.array_equal(out[1:], g[:-1])
    assert not out[0].any()


@settings(max_examples=60, deadline=None)
@given(st.integers(-6, 6), st.integers(-6, 6), st.sampled_from([0.0, math.pi / 2, math.pi, -math.pi / 2]),
       st.integers(0, 2 ** 32 - 1))
def test_warp_inverse_integer_cells(kx, ky, th, seed):
    g = random_grid(np.random.default_rng(seed))
    m = Pose2(0.1 * kx, 0.1 * ky, th)
    back = affine_warp(affine_warp(g, m), m.inverse())
    interior = affine_warp(affine_warp(np.ones((64, 64)), m), m.inverse()) == 1.0
    assert np.abs(back - g)[interior].max(initial=0.0) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-math.pi, math.pi), st.integers(0, 2 ** 32 - 1))
def test_warp_keeps_unit_interval(x, y, th, seed):
    g = np.random.default_rng(seed).random((64, 64))
    out = affine_warp(g, Pose2(x, y, th))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_rasterize_then_warp_matches_rasterize_at_moved_pose():
    # both conventions agree: a whole-cell forward step equals re-rasterizing from the new pose
    s = scan(wall_world(Pose2()), 0, DENSE)
    before = rasterize_scan(s, Pose2(), G)
    moved = rasterize_scan(s, Pose2(-0.3, 0.0, 0.0), G)
    assert np.array_equal(affine_warp(before, Pose2(0.3, 0.0, 0.0)), moved)


# -- proprioception and normalization -----------------------------------------

def test_goal_dead_ahead_after_forward_step():
    (d, b), vel = propagate_proprioception((2.0, 0.0), Action(), Action(1.0, 0.0), 0.1)
    assert d == pytest.approx(1.9, abs=1e-12) and b == pytest.approx(0.0, abs=1e-12)
    assert vel == Action(1.0, 0.0)


def test_zero_action_keeps_goal():
    (d, b), _ = propagate_proprioception((3.0, 0.7), Action(0.5, 0.2), Action(), 0.1)
    assert d == pytest.approx(3.0, abs=1e-12) and b == pytest.approx(0.7, abs=1e-12)


def test_pure_rotation_decreases_bearing():
    (d, b), _ = propagate_proprioception((2.5, 0.3), Action(), Action(0.0, 1.5), 0.1)
    assert d == pytest.approx(2.5, abs=1e-12) and b == pytest.approx(0.15, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-math.pi, math.pi),
       st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 1), st.floats(-1.5, 1.5))
def test_proprioception_matches_simulated_step(x, y, th, gx, gy, v, w):
    pose = Pose2(x, y, th)
    if math.hypot(gx - x, gy - y) < 0.05:
        return
    act = Action(v, w)
    want = goal_relative(step_agent(pose, act, 0.1), (gx, gy))
    (d, b), _ = propagate_proprioception(goal_relative(pose, (gx, gy)), Action(), act, 0.1)
    assert d == pytest.approx(want[0], abs=1e-9)
    assert math.cos(b - want[1]) == pytest.approx(1.0, abs=1e-9)


def test_normalization_examples():
    lo = normalize_vector((0.0, 0.0), Action(0.0, -1.5))
    hi = normalize_vector((5.0, 0.0), Action(1.0, 1.5))
    assert lo[3] == 0.0 and hi[3] == 1.0
    assert hi[0] == pytest.approx(0.5) and lo[1] == pytest.approx(0.5)
    assert hi[2] == 1.0
    assert normalize_vector((25.0, 0.0), Action())[0] == 1.0
    maps, vec = normalize_observation(Observation(np.zeros((10, 64, 64)), (5.0, 0.0), Action()))
    assert maps.dtype == np.float32 and vec[0] == pytest.approx(0.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 10), st.floats(-math.pi, math.pi), st.floats(0, 1), st.floats(-1.5, 1.5))
def test_normalization_round_trip(d, b, v, w):
    (d2, b2), a2 = denormalize_vector(normalize_vector((d, b), Action(v, w)), Norms())
    assert d2 == pytest.approx(d, abs=1e-5) and b2 == pytest.approx(b, abs=1e-5)
    assert a2.v == pytest.approx(v, abs=1e-6) and a2.w == pytest.approx(w, abs=1e-5)
    a3 = denormalize_action(normalize_action(Action(v, w)))
    assert a3.v == pytest.approx(v, abs=1e-6) and a3.w == pytest.approx(w, abs=1e-5)


def test_observation_rejects_negative_distance():
    with pytest.raises(ContractViolation):
        Observation(np.zeros((10, 64, 64)), (-1.0, 0.0), Action())


# -- export -------------------------------------------------------------------

def test_pgm_round_trip(tmp_path, rng):
    g = random_grid(rng)
    path = tmp_path / "grid.pgm"
    write_pgm(path, g)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n64 64\n255\n")
    img = read_pgm(path)
    assert img.dtype == np.uint8 and img.shape == (64, 64)
    assert np.array_equal(img, (g * 255).astype(np.uint8))
