# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""Unit tests for the detvs.kinematics module."""

# Relax pylint a bit for unit tests.
# pylint: disable=missing-function-docstring


from typing import Tuple

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from detvs.config import DetVSConfig
from detvs.errors import KinematicsError
from detvs.kinematics import (
    IK_METHODS,
    IKSettings,
    KinematicChain,
    Pose,
    RevoluteJoint,
    axis_rotation,
    forward_kinematics,
    jacobian,
    load_chain,
    solve_ik,
)

from .detvs_uthelpers import DetVSTests


Vec3 = Tuple[float, float, float]

coords = st.floats(-1.0, 1.0, allow_nan=False)
vectors = st.tuples(coords, coords, coords)


def _planar2() -> KinematicChain:
    return KinematicChain.from_yaml(
        DetVSTests.get_resource_path("yaml", "planar2.yaml")
    )


def test_axis_rotation() -> None:
    rot = axis_rotation((0, 0, 1), math.pi / 2)
    assert np.allclose(rot @ np.array([1.0, 0, 0]), [0, 1, 0])
    assert np.isclose(np.linalg.det(rot), 1.0)


def test_pose_init() -> None:
    pose = Pose()
    assert pose.isclose(Pose.identity())
    assert np.array_equal(pose.matrix, np.eye(4))

    with pytest.raises(KinematicsError):
        Pose(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(KinematicsError):
        Pose(2 * np.eye(3))
    with pytest.raises(KinematicsError):
        Pose(np.eye(3), (1.0, 2.0))
    with pytest.raises(KinematicsError):
        Pose.from_matrix(np.eye(3))

    # Poses are immutable.
    with pytest.raises(ValueError):
        pose.translation[0] = 1.0


def test_pose_look_at() -> None:
    pose = Pose.look_at((0, 0, 1), (1, 0, 1))
    # Optical axis (z) towards the target, y down.
    assert np.allclose(pose.rotation[:, 2], [1, 0, 0])
    assert np.allclose(pose.rotation[:, 1], [0, 0, -1])
    with pytest.raises(KinematicsError):
        Pose.look_at((0, 0, 0), (0, 0, 1))


@given(vectors, vectors, vectors)
def test_pose_inverse(rotvec: Vec3, translation: Vec3, point: Vec3) -> None:
    pose = Pose.from_rotvec(rotvec, translation)
    assert (pose @ pose.inverse()).isclose(Pose.identity(), atol=1e-9)
    back = pose.inverse().apply(pose.apply(point))
    assert np.allclose(back, point, atol=1e-9)


@given(vectors, vectors, vectors, vectors, vectors)
def test_pose_composition(
    rv_a: Vec3, t_a: Vec3, rv_b: Vec3, t_b: Vec3, point: Vec3
) -> None:
    a = Pose.from_rotvec(rv_a, t_a)
    b = Pose.from_rotvec(rv_b, t_b)
    assert np.allclose(
        (a @ b).apply(point), a.apply(b.apply(point)), atol=1e-9
    )
    assert np.allclose((a @ b).matrix, a.matrix @ b.matrix, atol=1e-9)


def test_pose_rotation_error() -> None:
    a = Pose.from_rotvec((0.0, 0.0, 0.1))
    b = Pose.identity()
    assert np.allclose(a.rotation_error(b), [0.0, 0.0, 0.1])
    assert np.allclose(a.rotation_error(a), 0.0)


def test_chain_from_yaml() -> None:
    chain = _planar2()
    assert chain.name == "planar2"
    assert chain.dof == 2
    assert [j.name for j in chain.joints] == ["shoulder", "elbow"]
    assert np.allclose(chain.home, [0.0, 0.5])
    assert np.isclose(chain.reach, 0.5)

    with pytest.raises(KinematicsError):
        KinematicChain.from_yaml(
            DetVSTests.get_resource_path("yaml", "invalid-axis.yaml")
        )
    with pytest.raises(KinematicChain.Error):
        KinematicChain.from_yaml(
            DetVSTests.get_resource_path("yaml", "not-yaml.yaml")
        )
    with pytest.raises(KinematicChain.Error):
        KinematicChain.from_yaml("not/a/chain.yaml")


def test_load_chain_bundled() -> None:
    chain = load_chain("arm7.yaml")
    assert chain.dof == 7
    assert chain.within_bounds(chain.home)
    # By path.
    chain = load_chain(DetVSTests.get_resource_path("yaml", "planar2.yaml"))
    assert chain.dof == 2


def test_chain_bounds() -> None:
    chain = _planar2()
    assert chain.within_bounds((0.0, 0.0))
    assert not chain.within_bounds((0.0, 3.5))
    assert np.allclose(chain.clip((0.0, 3.5)), (0.0, 3.0))
    with pytest.raises(KinematicsError):
        chain.check((0.0, 0.0, 0.0))
    q = chain.random_config(DetVSTests.rng(), margin=0.1)
    assert chain.within_bounds(q)


def test_forward_kinematics_planar() -> None:
    chain = _planar2()
    assert np.allclose(
        forward_kinematics(chain, (0.0, 0.0)).translation, (0.5, 0.0, 0.0)
    )
    # Rotation about y by +90 deg maps x to -z.
    assert np.allclose(
        forward_kinematics(chain, (math.pi / 2, 0.0)).translation,
        (0.0, 0.0, -0.5),
    )
    assert np.allclose(
        forward_kinematics(chain, (0.0, math.pi / 2)).translation,
        (0.3, 0.0, -0.2),
    )
    with pytest.raises(KinematicsError):
        forward_kinematics(chain, (0.0,))


def test_chain_concat() -> None:
    arm = load_chain("arm7.yaml")
    tail = _planar2()
    both = arm.concat(tail)
    assert both.dof == arm.dof + tail.dof
    rng = DetVSTests.rng(1)
    for _ in range(5):
        qa = arm.random_config(rng)
        qb = tail.random_config(rng)
        expected = forward_kinematics(arm, qa) @ forward_kinematics(tail, qb)
        actual = forward_kinematics(both, np.concatenate((qa, qb)))
        assert actual.isclose(expected, atol=1e-12)


def _random_chain(rng: np.random.Generator, dof: int) -> KinematicChain:
    joints = []
    for i in range(dof):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        origin = Pose.from_rotvec(
            rng.uniform(-math.pi, math.pi, 3) / math.sqrt(3),
            rng.uniform(-0.3, 0.3, 3),
        )
        joints.append(
            RevoluteJoint(
                f"j{i}",
                (float(axis[0]), float(axis[1]), float(axis[2])),
                origin,
                -math.pi,
                math.pi,
            )
        )
    tip = Pose.from_rotvec(rng.uniform(-1, 1, 3), rng.uniform(-0.2, 0.2, 3))
    return KinematicChain(joints, tip=tip, name=f"random{dof}")


def _numeric_jacobian(
    chain: KinematicChain, q: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    jac = np.zeros((6, chain.dof))
    for i in range(chain.dof):
        dq = np.zeros(chain.dof)
        dq[i] = eps
        plus = forward_kinematics(chain, q + dq)
        minus = forward_kinematics(chain, q - dq)
        jac[:3, i] = (plus.translation - minus.translation) / (2 * eps)
        jac[3:, i] = plus.rotation_error(minus) / (2 * eps)
    return jac


def test_jacobian_finite_differences() -> None:
    arm = load_chain("arm7.yaml")
    rng = DetVSTests.rng(2)
    for n in range(100):
        chain = arm if n % 2 else _random_chain(rng, int(rng.integers(1, 8)))
        q = chain.random_config(rng, margin=0.05)
        jac = jacobian(chain, q)
        assert jac.shape == (6, chain.dof)
        numeric = _numeric_jacobian(chain, q)
        err = np.linalg.norm(jac - numeric) / np.linalg.norm(jac)
        assert err < 1e-5, chain.name
        # Unit joint axes.
        assert np.allclose(np.linalg.norm(jac[3:], axis=0), 1.0)


def test_jacobian_single_joint() -> None:
    joint = RevoluteJoint("z", (0.0, 0.0, 1.0), Pose.identity(), -3.0, 3.0)
    chain = KinematicChain([joint], tip=Pose(translation=(0.3, 0.0, 0.0)))
    jac = jacobian(chain, (0.0,))
    assert np.allclose(jac[:3, 0], (0.0, 0.3, 0.0))
    assert np.allclose(jac[3:, 0], (0.0, 0.0, 1.0))
    assert np.allclose(
        forward_kinematics(chain, (math.pi / 2,)).translation,
        (0.0, 0.3, 0.0),
    )

    # All joints at the base, no tip offset.
    joints = [
        RevoluteJoint(f"j{i}", axis, Pose.identity(), -3.0, 3.0)
        for i, axis in enumerate(((0.0, 0.0, 1.0), (0.0, 1.0, 0.0)))
    ]
    chain = KinematicChain(joints)
    jac = jacobian(chain, (0.4, -0.7))
    assert np.array_equal(jac[:3], np.zeros((3, 2)))
    assert np.allclose(jac[3:, 0], (0.0, 0.0, 1.0))


def test_forward_kinematics_matrix_product() -> None:
    rng = DetVSTests.rng(4)
    chain = _random_chain(rng, 7)
    for _ in range(20):
        q = chain.random_config(rng)
        expected = np.eye(4)
        for joint, angle in zip(chain.joints, q):
            rot = np.eye(4)
            rot[:3, :3] = Rotation.from_rotvec(
                angle * np.asarray(joint.axis)
            ).as_matrix()
            expected = expected @ joint.origin.matrix @ rot
        expected = expected @ chain.tip.matrix
        actual = forward_kinematics(chain, q).matrix
        assert np.allclose(actual, expected, rtol=0.0, atol=1e-12)


@pytest.mark.parametrize("method", IK_METHODS)
def test_solve_ik_position(method: str) -> None:
    chain = _planar2()
    target = forward_kinematics(chain, (0.4, -0.8)).translation
    res = solve_ik(chain, target, chain.home, method=method, tol=1e-12)
    assert res.converged
    assert res.residual < 1e-6
    assert chain.within_bounds(res.q)
    assert np.allclose(
        forward_kinematics(chain, res.q).translation, target, atol=1e-6
    )
    # Residual history starts at the seed and ends at the best iterate.
    assert res.history[0] >= res.history[-1]


@pytest.mark.parametrize("method", IK_METHODS)
def test_solve_ik_pose(method: str) -> None:
    chain = load_chain("arm7.yaml")
    rng = DetVSTests.rng(3)
    q_goal = chain.clip(chain.home + rng.uniform(-0.1, 0.1, chain.dof))
    target = forward_kinematics(chain, q_goal)
    res = solve_ik(chain, target, chain.home, method=method, max_iter=500)
    assert res.converged
    reached = forward_kinematics(chain, res.q)
    assert np.linalg.norm(reached.translation - target.translation) < 1e-4
    assert np.linalg.norm(reached.rotation_error(target)) < 1e-3


@pytest.mark.parametrize("method,targets", [("trf", 500), ("slsqp", 100)])
def test_solve_ik_arm7_roundtrip(method: str, targets: int) -> None:
    chain = load_chain("arm7.yaml")
    settings = IKSettings(method=method)
    rng = DetVSTests.rng(5)
    for _ in range(targets):
        q_goal = chain.random_config(rng, margin=0.05)
        target = forward_kinematics(chain, q_goal).translation
        seed = chain.clip(q_goal + rng.normal(0.0, 0.05, chain.dof))
        res = settings.solve(chain, target, seed)
        reached = forward_kinematics(chain, res.q).translation
        assert np.linalg.norm(reached - target) < 1e-8
        assert res.converged
        assert chain.within_bounds(res.q)


@pytest.mark.parametrize("method", IK_METHODS)
def test_solve_ik_unreachable(method: str) -> None:
    chain = _planar2()
    res = solve_ik(chain, (2.0, 0.0, 0.0), chain.home, method=method)
    assert not res.converged
    # Best effort: fully stretched towards the target.
    assert np.isclose(res.residual, 1.5, rtol=0.0, atol=1e-6)
    assert chain.within_bounds(res.q)


def test_solve_ik_history() -> None:
    chain = load_chain("arm7.yaml")
    rng = DetVSTests.rng(6)
    for _ in range(10):
        target = forward_kinematics(chain, chain.random_config(rng))
        res = solve_ik(chain, target, chain.home, method="trf")
        assert np.all(np.diff(res.history) <= 0)
        assert res.history[-1] == pytest.approx(res.residual)


def test_solve_ik_errors() -> None:
    chain = _planar2()
    with pytest.raises(KinematicsError):
        solve_ik(chain, (0.3, 0.0, 0.0), (0.0, 3.5))
    with pytest.raises(KinematicsError):
        solve_ik(chain, (0.3, 0.0), chain.home)
    with pytest.raises(KinematicsError):
        solve_ik(chain, (0.3, 0.0, 0.0), chain.home, method="newton")


def test_solve_ik_at_target() -> None:
    chain = _planar2()
    target = forward_kinematics(chain, chain.home).translation
    res = solve_ik(chain, target, chain.home)
    assert res.converged
    assert res.iterations == 0
    assert np.array_equal(res.q, chain.home)


def test_iksettings_from_config() -> None:
    cfg = DetVSTests.tiny_config()
    settings = IKSettings.from_config(cfg)
    assert settings.method == "trf"
    assert settings.tol == 1e-8
    cfg.set("kinematics.ik_method", "newton")
    with pytest.raises(DetVSConfig.Error):
        IKSettings.from_config(cfg)
