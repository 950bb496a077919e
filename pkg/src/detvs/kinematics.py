# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""Serial-chain kinematics.

- rigid transforms: Pose
- revolute serial chains: RevoluteJoint, KinematicChain
- forward kinematics and geometric Jacobian
- bound-constrained nonlinear least squares inverse kinematics

Chains are described by YAML files (see detvs/res/arm7.yaml):

    name: arm7
    base: {xyz: [0.0, -0.2, 0.25], rpy: [0.0, 0.0, 0.0]}
    joints:
      - name: shoulder_pitch
        axis: [0, 1, 0]
        xyz: [0, 0, 0]
        rpy: [0, 0, 0]
        limits: [-2.6, 2.6]
    tip: {xyz: [0, 0, -0.08]}

Each joint's "xyz" and "rpy" (radians, extrinsic X-Y-Z) describe the fixed
transform from the previous joint frame (or the base) to the joint frame,
the joint then rotates about "axis" expressed in its own frame.

Functions are pure: safe for concurrent use.

Unit tests and examples: tests/test_detvs_kinematics.py
"""


from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from dataclasses import dataclass, field
import logging
import os

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import least_squares, minimize
from scipy.spatial.transform import Rotation
import yaml

from detvs.config import DetVSConfig
from detvs.errors import KinematicsError


_LOG = logging.getLogger(__name__)

JointConfig = NDArray[np.float64]
"""Joint angles (radians), one per chain joint."""


def axis_rotation(axis: ArrayLike, angle: float) -> NDArray[np.float64]:
    """Rotation matrix about a unit axis (Rodrigues' formula).

    Args:
        axis: Unit rotation axis.
        angle: Rotation angle in radians.
    """
    x, y, z = np.asarray(axis, dtype=np.float64)
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


class Pose:
    """Rigid transform: rotation (orthonormal, det +1) and translation (m).

    Poses are immutable, composition (@) and inversion are closed.
    """

    ORTHO_TOL = 1e-9
    """Tolerance on orthonormality and determinant checks."""

    _rotation: NDArray[np.float64]
    _translation: NDArray[np.float64]

    @classmethod
    def identity(cls) -> "Pose":
        """The identity transform."""
        return cls._make(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> "Pose":
        """Initialize from a 4x4 homogeneous matrix."""
        mat = np.asarray(matrix, dtype=np.float64)
        if mat.shape != (4, 4):
            raise KinematicsError(f"not a 4x4 matrix: {mat.shape}")
        return cls(mat[:3, :3], mat[:3, 3])

    @classmethod
    def from_rotvec(
        cls, rotvec: ArrayLike, translation: Optional[ArrayLike] = None
    ) -> "Pose":
        """Initialize from a rotation vector (axis times angle, radians)."""
        rot = Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64))
        return cls(rot.as_matrix(), translation)

    @classmethod
    def from_rpy(
        cls, rpy: ArrayLike, translation: Optional[ArrayLike] = None
    ) -> "Pose":
        """Initialize from roll, pitch, yaw (extrinsic X-Y-Z, radians)."""
        rot = Rotation.from_euler("xyz", np.asarray(rpy, dtype=np.float64))
        return cls(rot.as_matrix(), translation)

    @classmethod
    def look_at(
        cls,
        eye: ArrayLike,
        target: ArrayLike,
        up: ArrayLike = (0.0, 0.0, 1.0),
    ) -> "Pose":
        """Camera pose with its optical axis (z) pointing at a target.

        Camera frame convention: z forward, x right, y down.

        Args:
            eye: Camera position.
            target: Point the optical axis goes through.
            up: World up direction, must not be parallel to the optical axis.
        """
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        norm = np.linalg.norm(x)
        if norm < 1e-12:
            raise KinematicsError("optical axis parallel to up direction")
        x /= norm
        y = np.cross(z, x)
        return cls(np.column_stack((x, y, z)), eye)

    @classmethod
    def _make(
        cls, rotation: NDArray[np.float64], translation: NDArray[np.float64]
    ) -> "Pose":
        # Trusted construction: skip validation (closed operations).
        pose = cls.__new__(cls)
        pose._rotation = rotation
        pose._translation = translation
        pose._rotation.flags.writeable = False
        pose._translation.flags.writeable = False
        return pose

    def __init__(
        self,
        rotation: Optional[ArrayLike] = None,
        translation: Optional[ArrayLike] = None,
    ) -> None:
        """Initialize pose.

        Args:
            rotation: 3x3 rotation matrix, defaults to identity.
            translation: 3-vector (m), defaults to zero.

        Raises:
            KinematicsError: Not a proper rotation, or invalid shapes.
        """
        rot = np.eye(3) if rotation is None else np.array(rotation, float)
        trans = np.zeros(3)
        if translation is not None:
            trans = np.array(translation, float)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise KinematicsError(
                f"invalid pose shapes: {rot.shape}, {trans.shape}"
            )
        if not np.allclose(rot.T @ rot, np.eye(3), rtol=0, atol=self.ORTHO_TOL):
            raise KinematicsError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > self.ORTHO_TOL:
            raise KinematicsError("rotation determinant is not +1")
        self._rotation = rot
        self._translation = trans
        self._rotation.flags.writeable = False
        self._translation.flags.writeable = False

    @property
    def rotation(self) -> NDArray[np.float64]:
        """3x3 rotation matrix (read-only)."""
        return self._rotation

    @property
    def translation(self) -> NDArray[np.float64]:
        """Translation 3-vector in meters (read-only)."""
        return self._translation

    @property
    def matrix(self) -> NDArray[np.float64]:
        """4x4 homogeneous matrix."""
        mat = np.eye(4)
        mat[:3, :3] = self._rotation
        mat[:3, 3] = self._translation
        return mat

    def inverse(self) -> "Pose":
        """Inverse transform."""
        rot_t = self._rotation.T.copy()
        return Pose._make(rot_t, -rot_t @ self._translation)

    def apply(self, points: ArrayLike) -> NDArray[np.float64]:
        """Transform points (3-vector or Nx3 array)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self._rotation.T + self._translation

    def with_translation(self, translation: ArrayLike) -> "Pose":
        """Same rotation, new translation."""
        return Pose._make(
            self._rotation.copy(), np.array(translation, dtype=np.float64)
        )

    def rotation_error(self, other: "Pose") -> NDArray[np.float64]:
        """Rotation vector of self.R @ other.R^T (base frame, radians)."""
        rel = self._rotation @ other.rotation.T
        return np.asarray(Rotation.from_matrix(rel).as_rotvec())

    def isclose(self, other: "Pose", atol: float = 1e-12) -> bool:
        """Element-wise comparison of rotations and translations."""
        return bool(
            np.allclose(self._rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(
                self._translation, other.translation, rtol=0, atol=atol
            )
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        """Composition: (a @ b).apply(p) == a.apply(b.apply(p))."""
        return Pose._make(
            self._rotation @ other.rotation,
            self._rotation @ other.translation + self._translation,
        )

    def __repr__(self) -> str:
        rotvec = Rotation.from_matrix(self._rotation).as_rotvec()
        return f"Pose(rotvec={rotvec.round(6)}, t={self._translation.round(6)})"


@dataclass(frozen=True)
class RevoluteJoint:
    """Revolute joint descriptor."""

    name: str
    """Joint name."""

    axis: Tuple[float, float, float]
    """Unit rotation axis in the joint frame."""

    origin: Pose
    """Fixed transform from the parent frame to the joint frame."""

    lower: float
    """Lower angle limit (radians)."""

    upper: float
    """Upper angle limit (radians)."""


class KinematicChain:
    """Serial chain of revolute joints, from base (torso) frame to tip."""

    class Error(BaseException):
        """Failed to load a chain description file."""

    _name: str
    _joints: Tuple[RevoluteJoint, ...]
    _tip: Pose
    _lower: NDArray[np.float64]
    _upper: NDArray[np.float64]
    _home: NDArray[np.float64]

    @classmethod
    def from_yaml(cls, path: str) -> "KinematicChain":
        """Load a chain description file.

        Args:
            path: Path to the YAML chain description.

        Raises:
            KinematicChain.Error: I/O or YAML error.
            KinematicsError: Invalid chain description.
        """
        try:
            with open(path, mode="r", encoding="utf-8") as f:
                raw = yaml.safe_load(f)
        except (OSError, yaml.YAMLError) as e:
            raise KinematicChain.Error(f"{path}: {e}") from e
        if not isinstance(raw, dict):
            raise KinematicsError(f"{path}: not a chain description")
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "KinematicChain":
        """Initialize from a parsed chain description.

        Raises:
            KinematicsError: Invalid chain description.
        """
        try:
            base = _pose_from_dict(raw.get("base") or {})
            joints: List[RevoluteJoint] = []
            for i, rj in enumerate(raw.get("joints") or []):
                origin = _pose_from_dict(rj)
                if i == 0:
                    origin = base @ origin
                axis = np.asarray(rj["axis"], dtype=np.float64)
                axis = axis / np.linalg.norm(axis)
                lower, upper = (float(v) for v in rj["limits"])
                joints.append(
                    RevoluteJoint(
                        str(rj.get("name", f"joint{i}")),
                        (float(axis[0]), float(axis[1]), float(axis[2])),
                        origin,
                        lower,
                        upper,
                    )
                )
            tip = _pose_from_dict(raw.get("tip") or {})
            if not joints:
                tip = base @ tip
        except (KeyError, TypeError, ValueError) as e:
            raise KinematicsError(f"invalid chain description: {e}") from e
        return cls(joints, tip, str(raw.get("name", "chain")), raw.get("home"))

    def __init__(
        self,
        joints: Sequence[RevoluteJoint],
        tip: Optional[Pose] = None,
        name: str = "chain",
        home: Optional[ArrayLike] = None,
    ) -> None:
        """Initialize chain.

        Args:
            joints: Joints, from base to tip.
            tip: Fixed transform from the last joint frame to the tip
              (flange), defaults to identity.
            name: Chain name.
            home: Nominal joint angles used as default IK seed,
              defaults to the mid-range angles.

        Raises:
            KinematicsError: Non-unit axes, empty joint ranges,
              or home angles out of bounds.
        """
        for joint in joints:
            if abs(np.linalg.norm(joint.axis) - 1.0) > 1e-9:
                raise KinematicsError(
                    f"{joint.name}: axis is not a unit vector"
                )
            if not joint.lower < joint.upper:
                raise KinematicsError(f"{joint.name}: empty joint range")
        self._name = name
        self._joints = tuple(joints)
        self._tip = tip or Pose.identity()
        self._lower = np.array([j.lower for j in joints], dtype=np.float64)
        self._upper = np.array([j.upper for j in joints], dtype=np.float64)
        if home is None:
            self._home = 0.5 * (self._lower + self._upper)
        else:
            self._home = self.check(home)
            if not self.within_bounds(self._home):
                raise KinematicsError(f"{name}: home angles out of bounds")

    @property
    def name(self) -> str:
        """Chain name."""
        return self._name

    @property
    def joints(self) -> Tuple[RevoluteJoint, ...]:
        """Joints, from base to tip."""
        return self._joints

    @property
    def tip(self) -> Pose:
        """Fixed transform from the last joint frame to the tip."""
        return self._tip

    @property
    def dof(self) -> int:
        """Number of joints."""
        return len(self._joints)

    @property
    def lower_bounds(self) -> NDArray[np.float64]:
        """Per-joint lower angle limits (radians)."""
        return self._lower.copy()

    @property
    def upper_bounds(self) -> NDArray[np.float64]:
        """Per-joint upper angle limits (radians)."""
        return self._upper.copy()

    @property
    def home(self) -> JointConfig:
        """Nominal joint angles (default IK seed)."""
        return self._home.copy()

    @property
    def reach(self) -> float:
        """Upper bound of the tip distance from the first joint (m)."""
        lengths = [
            np.linalg.norm(j.origin.translation) for j in self._joints[1:]
        ]
        return float(sum(lengths) + np.linalg.norm(self._tip.translation))

    def check(self, q: ArrayLike) -> JointConfig:
        """Validate joint vector dimension.

        Returns:
            The joint vector as a float array.

        Raises:
            KinematicsError: Dimension mismatch.
        """
        arr = np.asarray(q, dtype=np.float64)
        if arr.shape != (self.dof,):
            raise KinematicsError(
                f"{self._name}: expected {self.dof} joint angles, "
                f"got {arr.shape}"
            )
        return arr

    def within_bounds(self, q: ArrayLike, atol: float = 0.0) -> bool:
        """Whether joint angles are within the chain limits."""
        arr = self.check(q)
        return bool(
            np.all(arr >= self._lower - atol)
            and np.all(arr <= self._upper + atol)
        )

    def clip(self, q: ArrayLike) -> JointConfig:
        """Clip joint angles to the chain limits."""
        return np.clip(self.check(q), self._lower, self._upper)

    def random_config(
        self, rng: np.random.Generator, margin: float = 0.0
    ) -> JointConfig:
        """Uniform random joint angles within the (shrunk) limits."""
        span = self._upper - self._lower
        lo = self._lower + margin * span
        return rng.uniform(lo, self._upper - margin * span)

    def concat(self, other: "KinematicChain") -> "KinematicChain":
        """Chain composition: other is mounted on this chain's tip.

        forward_kinematics(a.concat(b), qa ++ qb)
        == forward_kinematics(a, qa) @ forward_kinematics(b, qb)
        """
        joints = list(self._joints)
        if other.joints:
            first = other.joints[0]
            joints.append(
                RevoluteJoint(
                    first.name,
                    first.axis,
                    self._tip @ first.origin,
                    first.lower,
                    first.upper,
                )
            )
            joints.extend(other.joints[1:])
            tip = other.tip
        else:
            tip = self._tip @ other.tip
        return KinematicChain(
            joints,
            tip,
            f"{self._name}+{other.name}",
            np.concatenate((self._home, other.home)),
        )


def _pose_from_dict(raw: Mapping[str, Any]) -> Pose:
    xyz = raw.get("xyz", (0.0, 0.0, 0.0))
    rpy = raw.get("rpy", (0.0, 0.0, 0.0))
    return Pose.from_rpy(rpy, xyz)


def _joint_frames(
    chain: KinematicChain, q: JointConfig
) -> Tuple[List[NDArray[np.float64]], List[NDArray[np.float64]], Pose]:
    # Joint positions and axes in the base frame, and the tip pose.
    positions: List[NDArray[np.float64]] = []
    axes: List[NDArray[np.float64]] = []
    rot = np.eye(3)
    trans = np.zeros(3)
    for joint, angle in zip(chain.joints, q):
        trans = rot @ joint.origin.translation + trans
        rot = rot @ joint.origin.rotation
        positions.append(trans)
        axes.append(rot @ np.asarray(joint.axis))
        rot = rot @ axis_rotation(joint.axis, angle)
    tip = chain.tip
    end = Pose._make(rot @ tip.rotation, rot @ tip.translation + trans)
    return positions, axes, end


def forward_kinematics(chain: KinematicChain, q: ArrayLike) -> Pose:
    """Tip pose in the base (torso) frame.

    Args:
        chain: The kinematic chain.
        q: Joint angles (radians).

    Raises:
        KinematicsError: Dimension mismatch.
    """
    return _joint_frames(chain, chain.check(q))[2]


def jacobian(chain: KinematicChain, q: ArrayLike) -> NDArray[np.float64]:
    """Geometric Jacobian at the tip, 6 x n.

    Rows 0-2 map joint rates to the tip linear velocity,
    rows 3-5 to its angular velocity, both in the base frame.

    Raises:
        KinematicsError: Dimension mismatch.
    """
    positions, axes, end = _joint_frames(chain, chain.check(q))
    jac = np.zeros((6, chain.dof))
    for i, (pos, axis) in enumerate(zip(positions, axes)):
        jac[:3, i] = np.cross(axis, end.translation - pos)
        jac[3:, i] = axis
    return jac


IKTarget = Union[Pose, ArrayLike]


@dataclass(frozen=True)
class IKResult:
    """Inverse kinematics solution."""

    q: JointConfig
    """Best joint angles found, within bounds."""

    residual: float
    """Euclidean norm of the final residual (m, or weighted m for poses)."""

    converged: bool
    """Whether the squared residual reached the tolerance."""

    iterations: int
    """Number of solver iterations (or function evaluations)."""

    history: Tuple[float, ...] = field(default=())
    """Residual norms of the accepted iterates."""


IK_METHODS = ("trf", "slsqp")
"""Supported solvers: scipy trust-region reflective least squares,
and sequential least squares programming."""

# Residual evaluations allowed to "trf", per joint and per max_iter.
_TRF_EVALS_PER_JOINT = 3


def solve_ik(
    chain: KinematicChain,
    target: IKTarget,
    seed: ArrayLike,
    tol: float = 1e-8,
    max_iter: int = 100,
    method: str = "trf",
    orientation_weight: float = 0.1,
) -> IKResult:
    """Bound-constrained inverse kinematics.

    Minimizes |fk(q) - target|^2 subject to lb <= q <= ub,
    warm-started from the seed (typically the current joint angles).

    If the target is a position, the objective is position-only.
    If the target is a Pose, the objective stacks the position error
    and the rotation vector error scaled by orientation_weight (m/rad).

    Args:
        chain: The kinematic chain.
        target: Target tip position (3-vector) or pose.
        seed: Initial joint angles, within bounds.
        tol: Tolerance on the squared residual (m^2).
        max_iter: Maximum number of solver iterations ("slsqp"); "trf"
          may evaluate the residual up to 3 * dof times as often.
        method: One of IK_METHODS.
        orientation_weight: Meters per radian of rotation error.

    Returns:
        The best joint angles found, flagged converged if
        the squared residual is within tolerance.

    Raises:
        KinematicsError: Dimension mismatch, seed out of bounds,
          or unknown method.
    """
    q0 = chain.check(seed)
    if not chain.within_bounds(q0, atol=1e-12):
        raise KinematicsError(f"{chain.name}: seed out of bounds")
    q0 = chain.clip(q0)
    lower, upper = chain.lower_bounds, chain.upper_bounds

    target_pose = target if isinstance(target, Pose) else None
    target_pos = (
        target.translation
        if isinstance(target, Pose)
        else np.asarray(target, dtype=np.float64)
    )
    if target_pos.shape != (3,):
        raise KinematicsError(f"invalid IK target shape: {target_pos.shape}")

    def residual(q: NDArray[np.float64]) -> NDArray[np.float64]:
        end = forward_kinematics(chain, q)
        err = end.translation - target_pos
        if target_pose is None:
            return err
        rot_err = orientation_weight * end.rotation_error(target_pose)
        return np.concatenate((err, rot_err))

    def residual_jac(q: NDArray[np.float64]) -> NDArray[np.float64]:
        jac = jacobian(chain, q)
        if target_pose is None:
            return jac[:3]
        return np.vstack((jac[:3], orientation_weight * jac[3:]))

    # Residual norms of the accepted iterates.
    history: List[float] = [float(np.linalg.norm(residual(q0)))]

    if history[0] == 0.0:
        return IKResult(q0, 0.0, True, 0, tuple(history))

    if method == "trf":
        best: Dict[str, Any] = {"q": q0, "norm": history[0]}

        def tracked(q: NDArray[np.float64]) -> NDArray[np.float64]:
            res = residual(q)
            norm = float(np.linalg.norm(res))
            # Trust-region steps are accepted iff they reduce the cost.
            if norm < best["norm"]:
                best["q"], best["norm"] = q.copy(), norm
                history.append(norm)
            return res

        sol = least_squares(
            tracked,
            q0,
            jac=residual_jac,
            bounds=(lower, upper),
            method="trf",
            xtol=1e-15,
            ftol=1e-15,
            gtol=1e-15,
            max_nfev=max_iter * _TRF_EVALS_PER_JOINT * max(chain.dof, 1),
        )
        q_best = chain.clip(best["q"])
        iterations = int(sol.nfev)

    elif method == "slsqp":

        def cost(q: NDArray[np.float64]) -> float:
            res = residual(q)
            return float(0.5 * res @ res)

        def cost_grad(q: NDArray[np.float64]) -> NDArray[np.float64]:
            return residual_jac(q).T @ residual(q)

        def on_iteration(q: NDArray[np.float64]) -> None:
            history.append(float(np.linalg.norm(residual(q))))

        sol = minimize(
            cost,
            q0,
            jac=cost_grad,
            method="SLSQP",
            bounds=list(zip(lower, upper)),
            callback=on_iteration,
            options={"maxiter": max_iter, "ftol": 1e-24},
        )
        q_best = chain.clip(sol.x)
        iterations = int(sol.nit)

    else:
        raise KinematicsError(f"unknown IK method: {method}")

    norm = float(np.linalg.norm(residual(q_best)))
    converged = norm**2 <= tol
    if not converged:
        _LOG.debug("IK not converged: residual %.3g m", norm)
    return IKResult(q_best, norm, converged, iterations, tuple(history))


@dataclass(frozen=True)
class IKSettings:
    """Inverse kinematics solver settings."""

    method: str = "trf"
    tol: float = 1e-8
    max_iter: int = 100
    orientation_weight: float = 0.1

    @classmethod
    def from_config(cls, cfg: DetVSConfig) -> "IKSettings":
        """Solver settings from the "kinematics.*" options.

        Raises:
            DetVSConfig.Error: Invalid options.
        """
        settings = cls(
            cfg.getstr("kinematics.ik_method"),
            cfg.getfloat("kinematics.ik_tol"),
            cfg.getint("kinematics.ik_max_iter"),
            cfg.getfloat("kinematics.orientation_weight"),
        )
        if settings.method not in IK_METHODS:
            raise DetVSConfig.Error(
                f"kinematics.ik_method: unknown method {settings.method}"
            )
        return settings

    def solve(
        self, chain: KinematicChain, target: IKTarget, seed: ArrayLike
    ) -> IKResult:
        """Solve IK with these settings."""
        return solve_ik(
            chain,
            target,
            seed,
            tol=self.tol,
            max_iter=self.max_iter,
            method=self.method,
            orientation_weight=self.orientation_weight,
        )


def load_chain(name: str) -> KinematicChain:
    """Load a chain by file path, or by bundled resource name.

    Args:
        name: Path to a YAML chain file, or a file name in detvs/res/.

    Raises:
        KinematicChain.Error: I/O or YAML error.
        KinematicsError: Invalid chain description.
    """
    path = name
    if not os.path.isfile(name):
        path = DetVSConfig.bundled_file("res", name)
    return KinematicChain.from_yaml(path)
