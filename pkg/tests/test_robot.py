import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from dyngrasp import robot
from dyngrasp.robot import (Capsule, Joint, RobotModel, fk, ik_damped,
                            ik_multistart, jacobian, joint_frames,
                            manipulability, planar_2link, planar_chain,
                            reachability_dataset, self_collision, spatial_7dof)
from dyngrasp.se3 import Pose

from conftest import planar_ik_solutions, random_pose


@pytest.fixture(scope="module")
def arm2():
    return planar_2link()


@pytest.fixture(scope="module")
def arm7():
    return spatial_7dof()


# --- forward kinematics -------------------------------------------------------

def test_fk_stretched(arm2):
    p = fk(arm2, [0.0, 0.0])
    assert np.allclose(p.translation, [2.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(p.rotation, np.eye(3), atol=1e-12)


def test_fk_rotated_base_joint(arm2):
    p = fk(arm2, [np.pi / 2, 0.0])
    assert np.allclose(p.translation, [0.0, 2.0, 0.0], atol=1e-12)


def test_fk_matches_matrix_product_oracle(rng, arm7):
    for _ in range(10):
        q = rng.uniform(-1.5, 1.5, arm7.dof)
        m = arm7.base_pose.matrix()
        for joint, angle in zip(arm7.joints, q):
            rot = np.eye(4)
            rot[:3, :3] = Rotation.from_rotvec(joint.axis * angle).as_matrix()
            m = m @ joint.origin.matrix() @ rot
        m = m @ arm7.tool_offset.matrix()
        assert np.max(np.abs(fk(arm7, q).matrix() - m)) < 1e-10


# --- jacobian -------------------------------------------------------------------

def test_jacobian_single_revolute():
    model = RobotModel((Joint([0, 0, 1], Pose.identity(), (-np.pi, np.pi)),),
                       Pose(np.eye(3), [1.0, 0.0, 0.0]))
    j = jacobian(model, [0.0])
    assert np.allclose(j[:3, 0], [0.0, 1.0, 0.0], atol=1e-12)
    assert np.allclose(j[3:, 0], [0.0, 0.0, 1.0], atol=1e-12)


def test_jacobian_matches_finite_differences(rng, arm7):
    h = 1e-6
    for _ in range(25):
        q = rng.uniform(-1.5, 1.5, arm7.dof)
        j = jacobian(arm7, q)
        for k in range(arm7.dof):
            dq = np.zeros(arm7.dof)
            dq[k] = h
            pp, pm = fk(arm7, q + dq), fk(arm7, q - dq)
            lin = (pp.translation - pm.translation) / (2 * h)
            ang = Rotation.from_matrix(pp.rotation @ pm.rotation.T).as_rotvec() / (2 * h)
            assert np.max(np.abs(j[:3, k] - lin)) < 1e-6
            assert np.max(np.abs(j[3:, k] - ang)) < 1e-6


def test_jacobian_angular_columns_ignore_downstream_joints(rng, arm7):
    q = rng.uniform(-1.0, 1.0, arm7.dof)
    j = jacobian(arm7, q)
    for k in range(2, arm7.dof):
        q2 = q.copy()
        q2[k:] = rng.uniform(-1.0, 1.0, arm7.dof - k)
        j2 = jacobian(arm7, q2)
        assert np.allclose(j[3:, :k], j2[3:, :k], atol=1e-12)


# --- manipulability --------------------------------------------------------------

def test_manipulability_zero_when_stretched(arm2):
    assert manipulability(arm2, [0.3, 0.0]) == pytest.approx(0.0, abs=1e-12)


def test_manipulability_closed_form(arm2, rng):
    for q2 in rng.uniform(-np.pi, np.pi, 20):
        q = np.array([rng.uniform(-np.pi, np.pi), q2])
        assert manipulability(arm2, q) == pytest.approx(abs(np.sin(q2)), abs=1e-9)
    assert manipulability(arm2, [0.0, np.pi / 2]) == pytest.approx(1.0, abs=1e-12)


def test_manipulability_invariant_to_base_rotation(arm7, rng):
    q = rng.uniform(-1.0, 1.0, arm7.dof)
    base = random_pose(rng)
    rotated = RobotModel(arm7.joints, arm7.tool_offset, arm7.link_capsules, base)
    assert manipulability(rotated, q) == pytest.approx(manipulability(arm7, q), rel=1e-9)


# --- damped least squares IK -------------------------------------------------------

def test_ik_fixed_point(arm7, rng):
    q0 = rng.uniform(-1.0, 1.0, arm7.dof)
    target = fk(arm7, q0)
    q = ik_damped(arm7, target, q0, iters=5)
    assert np.allclose(q, q0, atol=1e-12)


def test_ik_2link_reachable(arm2, rng):
    q_true = np.array([0.4, 1.1])
    target = fk(arm2, q_true)
    for _ in range(5):
        q0 = rng.uniform(-2.5, 2.5, 2)
        q = ik_damped(arm2, target, q0, iters=50, position_only=True)
        err = np.linalg.norm(fk(arm2, q).translation - target.translation)
        assert err < 1e-6


def test_ik_unreachable_target_converges_to_boundary(arm2):
    target = Pose(np.eye(3), [3.0, 0.0, 0.0])
    q = ik_damped(arm2, target, np.array([0.4, 0.6]), iters=300, position_only=True)
    residual = np.linalg.norm(fk(arm2, q).translation - target.translation)
    assert residual == pytest.approx(1.0, abs=0.05)  # 3.0 target, 2.0 max reach


# --- multi-start IK -----------------------------------------------------------------

def test_multistart_finds_both_elbow_solutions(arm2):
    q_up = np.array([0.5, 0.9])
    target = fk(arm2, q_up)
    # closed form: the elbow-down twin keeps the position with q2 negated
    # and q1 advanced by twice the wrist angle (l1 == l2)
    gamma = np.arctan2(np.sin(q_up[1]), 1.0 + np.cos(q_up[1]))
    q_down = np.array([q_up[0] + 2.0 * gamma, -q_up[1]])
    assert np.allclose(fk(arm2, q_down).translation, target.translation, atol=1e-12)
    sols = ik_multistart(arm2, target, n_starts=40, refine_iters=150, seed=3,
                         position_only=True)
    assert len(sols) == 2
    cost = np.array([[np.max(np.abs(o - s)) for s in sols] for o in (q_up, q_down)])
    from scipy.optimize import linear_sum_assignment
    r, c = linear_sum_assignment(cost)
    assert np.all(cost[r, c] < 1e-3)


def test_multistart_deterministic(arm2):
    target = fk(arm2, [0.5, 0.9])
    a = ik_multistart(arm2, target, n_starts=25, refine_iters=150, seed=11,
                      position_only=True)
    b = ik_multistart(arm2, target, n_starts=25, refine_iters=150, seed=11,
                      position_only=True)
    assert len(a) == len(b)
    for qa, qb in zip(a, b):
        assert np.array_equal(qa, qb)


def test_multistart_solutions_satisfy_postconditions(arm7):
    q_true = np.array([0.3, 0.5, -0.4, 0.9, 0.2, -0.7, 0.1])
    target = fk(arm7, q_true)
    sols = ik_multistart(arm7, target, n_starts=30, refine_iters=150, seed=5)
    assert sols
    lo, hi = arm7.limits_arrays()
    for q in sols:
        err = robot.pose_error(fk(arm7, q), target)
        assert np.linalg.norm(err[:3]) <= robot.IK_TOL_POS
        assert np.linalg.norm(err[3:]) <= robot.IK_TOL_ROT
        assert np.all(q >= lo) and np.all(q <= hi)
        assert not self_collision(arm7, q)


# --- self collision ------------------------------------------------------------------

def test_no_self_collision_stretched():
    chain = planar_chain([0.5, 0.5, 0.5, 0.5], radius=0.04)
    assert not self_collision(chain, np.zeros(4))


def test_self_collision_folded_chain():
    chain = planar_chain([0.5, 0.5, 0.5, 0.5], radius=0.04)
    # fold joints 1 and 2 hard so link 3 lies back on link 0
    assert self_collision(chain, [0.0, 3.0, 3.0, 0.0])


def test_adjacent_links_exempt(arm2):
    # fully folded two-link arm: capsules overlap but they are adjacent
    assert not self_collision(arm2, [0.0, 3.1])


# --- reachability ---------------------------------------------------------------------

def test_reachability_dataset_unfiltered_count(arm2):
    poses = reachability_dataset(arm2, 200, table_height=-np.inf, seed=0)
    assert len(poses) == 200


def test_reachability_dataset_height_filter(arm7):
    poses = reachability_dataset(arm7, 300, table_height=0.0, seed=1)
    assert poses
    for p in poses:
        assert p.translation[2] >= 0.1


def test_reachability_dataset_max_reach(arm7):
    poses = reachability_dataset(arm7, 300, seed=2)
    reach = 0.34 + 0.40 + 0.40 + 0.126 + 0.1
    for p in poses:
        assert np.linalg.norm(p.translation) <= reach + 1e-9


def test_reachability_dataset_deterministic(arm2):
    a = reachability_dataset(arm2, 50, seed=9)
    b = reachability_dataset(arm2, 50, seed=9)
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.matrix(), pb.matrix())


@pytest.fixture(scope="module")
def reach2(arm2):
    return robot.fit_reachability(arm2, 600, seed=0, k_range=(2, 4, 8),
                                  em_max_iter=30)


def test_filter_reachable_keeps_dense_drops_far(arm2, reach2):
    from dyngrasp.grasp import GraspPose
    dense_pose = fk(arm2, [0.3, 0.8])
    far_pose = Pose(np.eye(3), [10.0, 0.0, 0.0])
    grasps = [GraspPose(dense_pose, 0.05, [0.025, 0, 0], [-0.025, 0, 0], -1.0),
              GraspPose(far_pose, 0.05, [10.025, 0, 0], [9.975, 0, 0], -1.0)]
    kept = robot.filter_reachable(reach2, grasps)
    assert len(kept) == 1
    assert kept[0].pose is grasps[0].pose


def test_robot_json_roundtrip(arm7, tmp_path, rng):
    path = tmp_path / "robot.json"
    robot.save_robot_json(path, arm7)
    loaded = robot.load_robot_json(path)
    q = rng.uniform(-1.0, 1.0, arm7.dof)
    assert np.allclose(fk(loaded, q).matrix(), fk(arm7, q).matrix(), atol=1e-15)
    for ca, cb in zip(loaded.link_capsules, arm7.link_capsules):
        assert ca.link == cb.link and ca.body == cb.body and ca.radius == cb.radius
        assert np.array_equal(ca.p0, cb.p0) and np.array_equal(ca.p1, cb.p1)
