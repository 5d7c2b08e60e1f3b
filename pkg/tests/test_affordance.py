import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from afflab import affordance as aff
from afflab import convnet
from afflab.affordance import Action, AffordanceMap
from afflab.binsim import GraspCommand, SuctionCommand
from afflab.errors import InvalidTarget, NoValidAction
from afflab.heightmap import Heightmap


def zero_params():
    return convnet.NetParams({k: np.zeros(s, np.float32) for k, s in convnet.param_shapes().items()})


def test_zero_params_give_one_half(rng):
    x = rng.standard_normal((4, 12, 12)).astype(np.float32)
    assert (aff.predict_suction(zero_params(), x).values == 0.5).all()


def test_probability_stays_inside_open_interval():
    p = aff.probability(np.array([-1e6, -50.0, 0.0, 50.0, 1e6]))
    assert (p > 0).all() and (p < 1).all()


def test_suction_is_sigmoid_of_logits(rng):
    params = convnet.init_params(4)
    x = rng.standard_normal((4, 12, 12)).astype(np.float32)
    logits, _ = convnet.forward(params, x)
    m = aff.predict_suction(params, x)
    assert m.K == 1 and m.task == "suction"
    np.testing.assert_array_equal(m.values[0], aff.probability(logits))


def test_grasp_planes_and_identity_plane(rng):
    params = convnet.init_params(4)
    x = rng.standard_normal((4, 16, 16)).astype(np.float32)
    m = aff.predict_grasp(params, x)
    assert m.K == 16 and m.angle_step == pytest.approx(math.radians(22.5))
    np.testing.assert_array_equal(m.values[0], aff.predict_suction(params, x).values[0])
    assert m.valid[0].all() and not m.valid[1].all()
    assert (m.values[~m.valid] == 0).all()
    assert (m.values[m.valid] > 0).all() and (m.values[m.valid] < 1).all()


def symmetric_input(rng, n=16):
    # small integers keep the sum exact, so the symmetry is bitwise
    a = rng.integers(-8, 9, (4, n, n)).astype(np.float32) / 8
    return (a + np.rot90(a, 1, (1, 2)) + np.rot90(a, 2, (1, 2)) + np.rot90(a, 3, (1, 2))).copy()


def test_symmetric_input_repeats_every_quarter_turn(rng):
    params = convnet.init_params(1)
    x = symmetric_input(rng)
    m = aff.predict_grasp(params, x, "nearest")
    for k in range(12):
        np.testing.assert_array_equal(m.valid[k], m.valid[k + 4])
        np.testing.assert_allclose(m.values[k], m.values[k + 4], atol=1e-6)
    np.testing.assert_array_equal(m.values[0], m.values[4])


@given(st.integers(0, 15), st.integers(0, 2 ** 31 - 1))
def test_frame_pixel_maps_back_to_its_source(k, seed):
    rng = np.random.default_rng(seed)
    x = rng.random((1, 20, 20)).astype(np.float32)
    rot, valid = aff.rotate_input(x, k, "nearest")
    for r, c in np.argwhere(valid)[::7]:
        sr, sc = aff.frame_to_pixel((r, c), k, (20, 20))
        assert rot[0, r, c] == x[0, sr, sc]


def test_rotation_geometry_oracle():
    # a frame pixel of plane k comes from rotating its offset by +k*22.5 degrees
    H = W = 16
    cx = cy = 7.5
    a = math.radians(3 * 22.5)
    dx, dy = 7 - cx, 5 - cy
    expect = (round(cy + math.sin(a) * dx + math.cos(a) * dy), round(cx + math.cos(a) * dx - math.sin(a) * dy))
    vals = np.full((16, H, W), 0.1)
    vals[3, 5, 7] = 0.9
    act = aff.select_action(AffordanceMap("grasp", vals, np.ones(vals.shape, bool)))
    assert (act.angle_index, act.frame_pixel) == (3, (5, 7))
    assert act.pixel == expect


def test_single_valid_entry_is_chosen():
    vals = np.random.default_rng(0).random((16, 8, 8))
    valid = np.zeros(vals.shape, bool)
    valid[5, 2, 6] = True
    m = AffordanceMap("grasp", vals, np.ones(vals.shape, bool))
    for mode in ("greedy", "boltzmann"):
        a = aff.select_action(m, mode, np.random.default_rng(1), valid)
        assert (a.angle_index, a.frame_pixel) == (5, (2, 6))


def test_no_valid_entry():
    m = AffordanceMap("suction", np.full((1, 4, 4), 0.5), np.ones((1, 4, 4), bool))
    with pytest.raises(NoValidAction):
        aff.select_action(m, valid=np.zeros((1, 4, 4), bool))
    with pytest.raises(ValueError):
        aff.select_action(m, "softmax")


def test_boltzmann_cold_limit():
    m = AffordanceMap("suction", np.array([[[0.9, 0.1]]]), np.ones((1, 1, 2), bool))
    rng = np.random.default_rng(0)
    picks = [aff.select_action(m, "boltzmann", rng, tau=0.01).pixel for _ in range(10_000)]
    assert sum(p == (0, 0) for p in picks) / len(picks) >= 0.999


def test_boltzmann_frequencies_follow_softmax():
    vals = np.array([[[0.2, 0.3, 0.5]]])
    m = AffordanceMap("suction", vals, np.ones(vals.shape, bool))
    rng = np.random.default_rng(5)
    counts = np.zeros(3)
    for _ in range(20_000):
        counts[aff.select_action(m, "boltzmann", rng, tau=0.1).pixel[1]] += 1
    p = np.exp(vals[0, 0] / 0.1)
    np.testing.assert_allclose(counts / counts.sum(), p / p.sum(), atol=0.015)


def test_greedy_ties_use_rng():
    m = AffordanceMap("suction", np.full((1, 6, 6), 0.5), np.ones((1, 6, 6), bool))
    rng = np.random.default_rng(0)
    assert len({aff.select_action(m, "greedy", rng).pixel for _ in range(50)}) > 10


@given(st.integers(0, 2 ** 31 - 1))
def test_greedy_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    v = rng.random((16, 6, 6))
    a = aff.select_action(AffordanceMap("grasp", v, np.ones(v.shape, bool)))
    b = aff.select_action(AffordanceMap("grasp", np.tanh(3 * v) ** 3, np.ones(v.shape, bool)))
    assert a == Action(a.pixel, b.angle_index, a.value, b.frame_pixel) and a.pixel == b.pixel


def flat_hm(H=8, W=8, depth=0.02):
    return Heightmap(np.zeros((H, W, 3), np.float32), np.full((H, W), depth, np.float32), (0.0, 0.0),
                     0.003, np.ones((H, W), bool))


def test_action_to_command_arithmetic():
    hm = flat_hm()
    cmd = aff.action_to_command(Action((0, 0), 0, 0.5, (0, 0)), hm, "suction")
    assert isinstance(cmd, SuctionCommand)
    assert cmd.p == pytest.approx((0.0015, 0.0015, 0.02))
    cmd = aff.action_to_command(Action((2, 5), 8, 0.5, (2, 5)), hm, "grasp")
    assert isinstance(cmd, GraspCommand)
    assert cmd.p[:2] == pytest.approx((0.0165, 0.0075))
    assert cmd.theta == pytest.approx(math.pi)


def test_action_to_command_rejects_bad_pixels():
    hm = flat_hm()
    hm.valid[1, 1] = False
    with pytest.raises(InvalidTarget):
        aff.action_to_command(Action((1, 1), 0, 0.5, (1, 1)), hm, "suction")
    with pytest.raises(InvalidTarget):
        aff.action_to_command(Action((8, 0), 0, 0.5, (8, 0)), hm, "suction")


def rotate_quarter_ccw(x):
    """The exact lattice rotation that plane k+4 undoes relative to plane k."""
    return np.ascontiguousarray(np.rot90(x, -1, axes=(-2, -1)))


@given(st.integers(0, 2 ** 31 - 1))
def test_greedy_grasp_is_equivariant_to_quarter_turns(seed):
    rng = np.random.default_rng(seed)
    params = convnet.init_params(seed % 3)
    n = 24
    x = rng.standard_normal((4, n, n)).astype(np.float32)
    m = aff.predict_grasp(params, x, "nearest")
    flat = np.sort(m.values[m.valid])
    if flat[-1] - flat[-2] <= 1e-6:
        return
    a = aff.select_action(m)
    b = aff.select_action(aff.predict_grasp(params, rotate_quarter_ccw(x), "nearest"))
    assert b.angle_index == (a.angle_index + 4) % 16
    r, c = a.pixel
    assert b.pixel == (c, n - 1 - r)
