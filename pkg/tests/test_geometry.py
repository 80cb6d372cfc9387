import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pushident.errors import EmptyObject
from pushident.geometry import (BodyState, GridObject, PushAction, Trajectory, add_distance,
                                add_loss, decompose_footprint, expand_state, fit_body, wrap_angle)

from conftest import rect_object


def bitmap(rows):
    return np.array([[ch == "#" for ch in r] for r in rows])


def test_full_rectangle_has_28_cells():
    obj = decompose_footprint(np.ones((7, 4), dtype=bool), 0.02)
    assert obj.n == 28
    assert len(obj.contour_cells) == 18  # 4x7 ring


def test_single_cell_has_four_normals():
    obj = decompose_footprint(np.ones((1, 1), dtype=bool), 0.05)
    assert obj.n == 1
    assert obj.contour_cells == (0,)
    normals = sorted(tuple(n) for n in obj.normals_of(0))
    assert normals == [(-1.0, 0.0), (0.0, -1.0), (0.0, 1.0), (1.0, 0.0)]


def test_ell_without_corner_contour():
    obj = decompose_footprint(bitmap(["##.", "###", "###"]), 0.02)
    assert obj.n == 8
    # the middle cell touches the missing corner only diagonally, so it
    # has no free side and is not a contour cell
    free = [i for i, (c, r) in enumerate(obj.cells)
            if any((c + dc, r + dr) not in obj.cells
                   for dc, dr in ((1, 0), (-1, 0), (0, 1), (0, -1)))]
    assert list(obj.contour_cells) == free
    assert len(obj.contour_cells) == 7


def test_empty_footprint_raises():
    with pytest.raises(EmptyObject):
        decompose_footprint(np.zeros((3, 3), dtype=bool), 0.02)
    # every cell less than half covered
    with pytest.raises(EmptyObject):
        decompose_footprint(np.array([[1, 0], [0, 0]], dtype=bool), 0.02, pixel_size=0.01)


def test_half_coverage_rule_with_fine_pixels():
    # 4x4 pixels of 1 cm onto 2 cm cells; the top-left cell gets 2 of 4 pixels
    bm = bitmap(["#...", "##..", "####", "####"])
    obj = decompose_footprint(bm, 0.02, pixel_size=0.01)
    assert sorted(obj.cells) == [(0, 0), (0, 1), (1, 0)]


def test_polygon_input_matches_bitmap():
    square = np.array([[0.0, 0.0], [0.06, 0.0], [0.06, 0.04], [0.0, 0.04]])
    obj = decompose_footprint(square, 0.02)
    assert obj.n == 6


def test_largest_component_kept():
    obj = decompose_footprint(bitmap(["##.#", "##.."]), 0.02)
    assert obj.n == 4


def test_rerasterizing_is_idempotent():
    obj = decompose_footprint(bitmap([".##.", "####", "#..#", "####"]), 0.02)
    again = decompose_footprint(obj.bitmap(), 0.02)
    assert again.n == obj.n
    assert np.allclose(np.sort(again.offsets, axis=0), np.sort(obj.offsets, axis=0))


def test_contour_normals_point_outside(hammer_obj):
    cells = set(hammer_obj.cells)
    for i, nrm in hammer_obj.contour:
        assert abs(np.linalg.norm(nrm) - 1) < 1e-9
        c, r = hammer_obj.cells[i]
        assert (c + int(nrm[0]), r + int(nrm[1])) not in cells


def test_disconnected_cells_rejected():
    with pytest.raises(ValueError):
        GridObject(0.02, ((0, 0), (2, 0)))


def test_expand_identity_single_cell():
    obj = GridObject(0.02, ((0, 0),))
    assert np.array_equal(expand_state(obj, BodyState(np.zeros(2))), [0.0, 0.0, 0.0])


def test_expand_quarter_turn():
    obj = GridObject(0.02, ((0, 0), (1, 0)))  # offsets (-0.01, 0) and (0.01, 0)
    x = expand_state(obj, BodyState(np.array([0.3, -0.1]), math.pi / 2)).reshape(2, 3)
    assert np.allclose(x[1, :2], [0.3, -0.1 + 0.01], atol=1e-12)
    assert np.allclose(x[:, 2], math.pi / 2)


poses = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-10, 10))


@settings(max_examples=50, deadline=None)
@given(poses)
def test_expand_keeps_cell_distances(pose):
    obj = rect_object(4, 7)
    x = expand_state(obj, BodyState(np.array(pose[:2]), pose[2])).reshape(-1, 3)
    d = np.linalg.norm(x[:, None, :2] - x[None, :, :2], axis=-1)
    d0 = np.linalg.norm(obj.offsets[:, None] - obj.offsets[None], axis=-1)
    assert np.abs(d - d0).max() < 1e-9
    assert np.ptp(x[:, 2]) < 1e-9


@settings(max_examples=50, deadline=None)
@given(poses)
def test_fit_body_inverts_expand(pose):
    obj = rect_object(3, 2)
    body = BodyState(np.array(pose[:2]), pose[2])
    back = fit_body(obj, expand_state(obj, body))
    assert np.allclose(back.position, body.position, atol=1e-12)
    assert abs(wrap_angle(back.rotation - body.rotation)) < 1e-12


def test_add_loss_examples(rng):
    a = rng.normal(size=12)
    assert add_loss(a, a) == 0.0
    b = a.copy()
    b[3:5] += [0.03, 0.04]
    assert add_loss(a, b) == pytest.approx(0.05, abs=1e-12)
    c = rng.normal(size=12)
    d = a - c
    d[2::3] = (d[2::3] + np.pi) % (2 * np.pi) - np.pi
    assert add_loss(a, c) == pytest.approx(math.sqrt(sum(v * v for v in d)), rel=1e-12)


def test_add_loss_wraps_angles():
    a = np.array([0.0, 0.0, math.pi - 0.01])
    b = np.array([0.0, 0.0, -math.pi + 0.01])
    assert add_loss(a, b) == pytest.approx(0.02, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6),
       st.lists(st.floats(-5, 5), min_size=6, max_size=6))
def test_add_loss_symmetric_nonnegative(a, b):
    a, b = np.array(a), np.array(b)
    assert add_loss(a, b) >= 0
    assert add_loss(a, b) == pytest.approx(add_loss(b, a), rel=1e-12, abs=1e-12)


def test_add_loss_length_mismatch():
    with pytest.raises(ValueError):
        add_loss(np.zeros(3), np.zeros(6))


def test_add_distance_translation(bar):
    assert add_distance(bar, [0, 0, 0], [0.03, 0.04, 0]) == pytest.approx(0.05)


def test_push_action_generalized_is_sparse():
    a = PushAction(2, [1.5, -0.5])
    g = a.generalized(4)
    assert g.shape == (12,)
    assert np.array_equal(np.nonzero(g)[0], [6, 7])
    assert g[8] == 0.0  # no contact torque


def test_push_action_validation(bar):
    with pytest.raises(ValueError):
        PushAction(0, [np.nan, 0.0])
    with pytest.raises(ValueError):
        PushAction(0, [1.0, 0.0], duration=0.0)
    obj = rect_object(3, 3)
    with pytest.raises(ValueError):
        PushAction(4, [1.0, 0.0]).validate(obj)  # center cell


def test_body_state_wraps_rotation():
    assert BodyState(np.zeros(2), 3 * math.pi).rotation == pytest.approx(math.pi)
    with pytest.raises(ValueError):
        BodyState(np.array([np.inf, 0.0]))


def test_trajectory_finite_differences(bar):
    bodies = [BodyState(np.zeros(2)), BodyState(np.array([0.02, 0.0]), 0.1)]
    traj = Trajectory.from_bodies(bar, bodies, [PushAction(0, [1.0, 0.0])], 0.5)
    assert traj.T == 1
    v = traj.velocities[0].reshape(-1, 3)
    assert np.allclose(v[:, 2], 0.2)
    assert np.all(traj.velocities[-1] == 0)
    assert traj.prefix(0).T == 0
