# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""Synthetic two-camera scene.

Stand-in for the physical rig:

- pinhole cameras: a head camera on a yaw/pitch neck, a fixed torso camera
- a tool rigidly grasped by the arm end-effector
- a screw head target, rendered as a disc with a slot line
- rasterized observations with pixel noise and ellipse distractors

Frames: torso frame x forward, y left, z up; camera frames z forward,
x right, y down. Pixel centers lie at integer coordinates.

Rendering is pure given an explicit numpy Generator: the number of
random draws per image does not depend on the scene state, so that
identical seeds yield identical noise whatever the geometry.

Unit tests and examples: tests/test_detvs_scene.py
"""


from typing import Optional, Tuple

from dataclasses import dataclass, field, replace
import logging
import math

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from detvs.config import DetVSConfig
from detvs.errors import (
    BehindCameraError,
    GroupAbortedError,
    KinematicsError,
    OutOfViewError,
)
from detvs.kinematics import (
    IKSettings,
    JointConfig,
    KinematicChain,
    Pose,
    RevoluteJoint,
    axis_rotation,
    forward_kinematics,
    load_chain,
)


_LOG = logging.getLogger(__name__)

Image = NDArray[np.float32]
"""H x W x C intensities in [0, 1]."""


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera."""

    name: str
    """Camera name ("head", "torso")."""

    fx: float
    fy: float
    """Focal lengths (pixels)."""

    cx: float
    cy: float
    """Principal point (pixels)."""

    width: int
    height: int
    """Image size (pixels)."""

    pose: Pose = field(default_factory=Pose.identity)
    """Camera pose in the torso frame."""

    @classmethod
    def from_fov(
        cls, name: str, fov: float, width: int, height: int, pose: Pose
    ) -> "CameraModel":
        """Camera with square pixels and a diagonal field of view.

        Args:
            name: Camera name.
            fov: Diagonal field of view (degrees).
            width: Image width (pixels).
            height: Image height (pixels).
            pose: Camera pose in the torso frame.
        """
        half_diag = 0.5 * math.hypot(width, height)
        f = half_diag / math.tan(math.radians(fov) / 2.0)
        return cls(
            name,
            f,
            f,
            (width - 1) / 2.0,
            (height - 1) / 2.0,
            width,
            height,
            pose,
        )

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"{self.name}: focal lengths must be > 0")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"{self.name}: principal point outside image")

    @property
    def intrinsics(self) -> NDArray[np.float64]:
        """3x3 intrinsic matrix."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def with_pose(self, pose: Pose) -> "CameraModel":
        """Same intrinsics, new pose."""
        return replace(self, pose=pose)

    def contains(self, uv: ArrayLike) -> bool:
        """Whether pixel coordinates lie inside the image."""
        u, v = np.asarray(uv, dtype=np.float64)
        return bool(0 <= u <= self.width - 1 and 0 <= v <= self.height - 1)


def project_point(camera: CameraModel, point: ArrayLike) -> NDArray[np.float64]:
    """Pinhole projection of a torso frame point.

    Returns:
        Pixel coordinates (u, v) = (fx x/z + cx, fy y/z + cy),
        with (x, y, z) the point in the camera frame.

    Raises:
        BehindCameraError: Non-positive depth.
    """
    x, y, z = camera.pose.inverse().apply(point)
    if z <= 0:
        raise BehindCameraError(f"point behind the {camera.name} camera")
    return np.array(
        [camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy]
    )


class CameraRig:
    """Head camera on a yaw/pitch neck, and fixed torso camera."""

    _head: CameraModel
    _torso: CameraModel
    _neck: KinematicChain

    def __init__(
        self,
        head: CameraModel,
        torso: CameraModel,
        yaw_limits: Tuple[float, float] = (-1.0, 1.0),
        pitch_limits: Tuple[float, float] = (-0.6, 0.6),
    ) -> None:
        """Initialize rig.

        Args:
            head: Head camera, posed at its mount (zero yaw and pitch).
            torso: Torso camera.
            yaw_limits: Head yaw bounds (radians).
            pitch_limits: Head pitch bounds (radians).
        """
        self._head = head
        self._torso = torso
        # Yaw turns about the torso vertical, expressed in the mount frame.
        yaw_axis = head.pose.rotation.T @ np.array([0.0, 0.0, 1.0])
        self._neck = KinematicChain(
            [
                RevoluteJoint(
                    "head_yaw",
                    (
                        float(yaw_axis[0]),
                        float(yaw_axis[1]),
                        float(yaw_axis[2]),
                    ),
                    head.pose,
                    *yaw_limits,
                ),
                RevoluteJoint(
                    "head_pitch",
                    (1.0, 0.0, 0.0),
                    Pose.identity(),
                    *pitch_limits,
                ),
            ],
            name="neck",
            home=(0.0, 0.0),
        )

    @property
    def head(self) -> CameraModel:
        """Head camera at its mount pose."""
        return self._head

    @property
    def torso(self) -> CameraModel:
        """Torso camera."""
        return self._torso

    @property
    def neck(self) -> KinematicChain:
        """Two-joint chain (yaw, pitch) carrying the head camera."""
        return self._neck

    def head_camera_pose(self, yaw: float, pitch: float) -> Pose:
        """Head camera pose in the torso frame.

        mount @ yaw-rotation @ pitch-rotation

        Raises:
            KinematicsError: Angles out of the head joint bounds.
        """
        if not self._neck.within_bounds((yaw, pitch)):
            raise KinematicsError(
                f"head angles out of bounds: yaw={yaw:.4f}, pitch={pitch:.4f}"
            )
        yaw_joint, pitch_joint = self._neck.joints
        rot = (
            self._head.pose.rotation
            @ axis_rotation(yaw_joint.axis, yaw)
            @ axis_rotation(pitch_joint.axis, pitch)
        )
        return Pose(rot, self._head.pose.translation)

    def cameras(
        self, yaw: float, pitch: float
    ) -> Tuple[CameraModel, CameraModel]:
        """Head and torso cameras for given head angles."""
        head = self._head.with_pose(self.head_camera_pose(yaw, pitch))
        return head, self._torso


@dataclass(frozen=True)
class NoiseConfig:
    """Image noise."""

    sigma: float = 0.01
    """Gaussian pixel noise standard deviation, in [0, 0.05]."""

    distractors: int = 2
    """Maximum number of ellipse distractors per image, in [0, 3]."""

    def __post_init__(self) -> None:
        if not 0 <= self.sigma <= 0.05:
            raise ValueError(f"noise sigma out of [0, 0.05]: {self.sigma}")
        if not 0 <= self.distractors <= 3:
            raise ValueError(f"distractors out of [0, 3]: {self.distractors}")

    @classmethod
    def off(cls) -> "NoiseConfig":
        """No noise, no distractors."""
        return cls(0.0, 0)


@dataclass(frozen=True)
class RenderConfig:
    """Feature appearance."""

    tip_radius: float = 0.005
    min_radius_px: float = 1.0
    slot_ratio: float = 0.2
    background: float = 0.1
    screw_intensity: float = 0.55
    slot_intensity: float = 0.25
    tip_intensity: float = 1.0
    channels: int = 1


@dataclass(frozen=True)
class SceneState:
    """Geometric state of the scene, torso frame."""

    end_effector_pose: Pose
    grasp_transform: Pose
    """Tool frame in the end-effector frame, its origin is the tool tip."""

    screw_pose: Pose
    """Screw frame: origin at the head center, z along the surface normal,
    x along the slot."""

    head_yaw: float = 0.0
    head_pitch: float = 0.0
    screw_radius: float = 0.010
    """Rendered screw head radius (m)."""

    @property
    def tool_pose(self) -> Pose:
        """Tool pose in the torso frame."""
        return self.end_effector_pose @ self.grasp_transform

    @property
    def tool_tip(self) -> NDArray[np.float64]:
        """Tool tip position."""
        return self.end_effector_pose.apply(self.grasp_transform.translation)

    @property
    def distance(self) -> NDArray[np.float64]:
        """True tool-minus-screw distance vector."""
        return self.tool_tip - self.screw_pose.translation


@dataclass(frozen=True)
class Observation:
    """Images from both cameras, and the head joint angles."""

    head_image: Image
    torso_image: Image
    head_yaw: float
    head_pitch: float


def _disc(
    uu: NDArray[np.float64],
    vv: NDArray[np.float64],
    uv: NDArray[np.float64],
    r: float,
) -> NDArray[np.float64]:
    # Anti-aliased coverage: one pixel wide linear edge.
    dist = np.hypot(uu - uv[0], vv - uv[1])
    return np.clip(r + 0.5 - dist, 0.0, 1.0)


def _segment(
    uu: NDArray[np.float64],
    vv: NDArray[np.float64],
    a: NDArray[np.float64],
    b: NDArray[np.float64],
    half_width: float,
) -> NDArray[np.float64]:
    ab = b - a
    len2 = float(ab @ ab)
    if len2 > 0:
        proj = (uu - a[0]) * ab[0] + (vv - a[1]) * ab[1]
        t = np.clip(proj / len2, 0.0, 1.0)
    else:
        t = np.zeros_like(uu)
    dist = np.hypot(uu - (a[0] + t * ab[0]), vv - (a[1] + t * ab[1]))
    return np.clip(half_width + 0.5 - dist, 0.0, 1.0)


def _ellipse(
    uu: NDArray[np.float64],
    vv: NDArray[np.float64],
    params: NDArray[np.float64],
) -> NDArray[np.float64]:
    u0, v0, a, b, theta = params[:5]
    c, s = math.cos(theta), math.sin(theta)
    x = (uu - u0) * c + (vv - v0) * s
    y = -(uu - u0) * s + (vv - v0) * c
    rho = np.sqrt((x / a) ** 2 + (y / b) ** 2)
    return np.clip((1.0 - rho) * min(a, b) + 0.5, 0.0, 1.0)


def _blend(
    img: NDArray[np.float64], cover: NDArray[np.float64], intensity: float
) -> None:
    img += cover * (intensity - img)


def _feature_px(
    camera: CameraModel, point: NDArray[np.float64], feature: str
) -> NDArray[np.float64]:
    try:
        uv = project_point(camera, point)
    except BehindCameraError as e:
        raise OutOfViewError(camera.name, feature) from e
    if not camera.contains(uv):
        raise OutOfViewError(camera.name, feature)
    return uv


def _radius_px(
    camera: CameraModel, point: NDArray[np.float64], r: float
) -> float:
    depth = float(camera.pose.inverse().apply(point)[2])
    return camera.fx * r / depth


def check_in_view(state: SceneState, rig: CameraRig) -> None:
    """Check that the tool tip and the screw center project inside both images.

    Raises:
        OutOfViewError: A feature is outside an image.
        KinematicsError: Head angles out of bounds.
    """
    for camera in rig.cameras(state.head_yaw, state.head_pitch):
        _feature_px(camera, state.screw_pose.translation, "screw")
        _feature_px(camera, state.tool_tip, "tool tip")


def _render_image(
    camera: CameraModel,
    state: SceneState,
    render: RenderConfig,
    noise: NoiseConfig,
    rng: np.random.Generator,
) -> Image:
    w, h = camera.width, camera.height
    # Fixed number of draws per image, whatever the state.
    n_distractors = int(rng.integers(0, noise.distractors + 1))
    ellipses = rng.uniform(
        (0.0, 0.0, 1.5, 1.5, 0.0, 0.2),
        (w - 1.0, h - 1.0, 6.0, 6.0, math.pi, 0.8),
        size=(noise.distractors, 6),
    )
    pixel_noise = rng.normal(0.0, 1.0, size=(h, w)) * noise.sigma

    center = state.screw_pose.translation
    tip = state.tool_tip
    screw_uv = _feature_px(camera, center, "screw")
    tip_uv = _feature_px(camera, tip, "tool tip")

    uu, vv = np.meshgrid(
        np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64)
    )
    img = np.full((h, w), render.background, dtype=np.float64)
    for params in ellipses[:n_distractors]:
        _blend(img, _ellipse(uu, vv, params), float(params[5]))

    screw_r = max(
        _radius_px(camera, center, state.screw_radius), render.min_radius_px
    )
    screw_cover = _disc(uu, vv, screw_uv, screw_r)
    _blend(img, screw_cover, render.screw_intensity)

    slot_dir = state.screw_pose.rotation[:, 0] * state.screw_radius
    try:
        a = project_point(camera, center - slot_dir)
        b = project_point(camera, center + slot_dir)
        slot = _segment(uu, vv, a, b, render.slot_ratio * screw_r)
        _blend(img, slot * screw_cover, render.slot_intensity)
    except BehindCameraError:
        pass

    tip_r = max(
        _radius_px(camera, tip, render.tip_radius), render.min_radius_px
    )
    _blend(img, _disc(uu, vv, tip_uv, tip_r), render.tip_intensity)

    img = np.clip(img + pixel_noise, 0.0, 1.0).astype(np.float32)
    return np.repeat(img[:, :, np.newaxis], render.channels, axis=2)


def render_observation(
    state: SceneState,
    rig: CameraRig,
    render: RenderConfig,
    noise: NoiseConfig,
    rng: np.random.Generator,
) -> Observation:
    """Rasterize both camera images.

    The screw head is a filled disc crossed by a slot line, the tool tip a
    small disc on top; radii scale with inverse depth, and never go below
    the minimum radius in pixels.

    Args:
        state: Scene state.
        rig: Camera rig.
        render: Feature appearance.
        noise: Pixel noise and distractors.
        rng: Random generator, the head image draws first.

    Raises:
        OutOfViewError: A feature is outside an image.
        KinematicsError: Head angles out of bounds.
    """
    head, torso = rig.cameras(state.head_yaw, state.head_pitch)
    return Observation(
        _render_image(head, state, render, noise, rng),
        _render_image(torso, state, render, noise, rng),
        state.head_yaw,
        state.head_pitch,
    )


@dataclass(frozen=True)
class Placement:
    """Random placement of screws, grasps and head angles."""

    screw_center: Tuple[float, float, float] = (0.40, 0.0, 0.0)
    screw_jitter: float = 0.03
    rotation_error: float = math.radians(5.0)
    """Bound of the per-axis tool-object rotational error (radians)."""
    grasp_length: float = 0.10
    grasp_jitter: float = 0.01
    grasp_tilt: float = math.radians(5.0)
    head_jitter: float = 0.05
    retries: int = 50


@dataclass(frozen=True)
class TaskSetup:
    """A screw, a grasp, and the aligned end-effector configuration.

    Shared by a measurement group, or by a servo trial.
    """

    screw_pose: Pose
    screw_radius: float
    grasp: Pose
    rotation_error: NDArray[np.float64]
    """Rotation vector of the end-effector orientation error (radians)."""
    aligned_pose: Pose
    """End-effector pose placing the tool tip on the screw center."""
    q_aligned: JointConfig
    """Joint angles of the aligned pose (nominal chain)."""

    def state(
        self,
        displacement: ArrayLike = (0.0, 0.0, 0.0),
        yaw: float = 0.0,
        pitch: float = 0.0,
    ) -> SceneState:
        """Scene state with the end-effector translated from alignment."""
        ee = self.aligned_pose.with_translation(
            self.aligned_pose.translation
            + np.asarray(displacement, dtype=np.float64)
        )
        return SceneState(
            ee, self.grasp, self.screw_pose, yaw, pitch, self.screw_radius
        )


def quantize_joints(q: ArrayLike, bits: int) -> JointConfig:
    """Round joint angles to the encoder resolution.

    Args:
        q: Joint angles (radians).
        bits: Encoder bits per turn, 0 for ideal encoders.
    """
    arr = np.asarray(q, dtype=np.float64)
    if bits <= 0:
        return arr
    step = 2.0 * math.pi / (1 << bits)
    return np.round(arr / step) * step


class SceneSim:
    """Scene simulator: camera rig, arm, rendering and placement settings."""

    _rig: CameraRig
    _chain: KinematicChain
    _render: RenderConfig
    _noise: NoiseConfig
    _placement: Placement
    _ik: IKSettings
    _calibration: NDArray[np.float64]
    _encoder_bits: int

    @classmethod
    def from_config(
        cls, cfg: DetVSConfig, rng: Optional[np.random.Generator] = None
    ) -> "SceneSim":
        """Simulator from the "scene.*", "dataset.*" and "kinematics.*" options.

        Args:
            cfg: Configuration.
            rng: Draws the calibration offsets if scene.calibration_sigma
              is not zero.

        Raises:
            DetVSConfig.Error: Invalid options.
        """
        width = cfg.getint("scene.image_width")
        height = cfg.getint("scene.image_height")
        try:
            head = CameraModel.from_fov(
                "head",
                cfg.getfloat("scene.head_fov"),
                width,
                height,
                Pose.look_at(
                    cfg.getfloats("scene.head_eye"),
                    cfg.getfloats("scene.head_look_at"),
                ),
            )
            torso = CameraModel.from_fov(
                "torso",
                cfg.getfloat("scene.torso_fov"),
                width,
                height,
                Pose.look_at(
                    cfg.getfloats("scene.torso_eye"),
                    cfg.getfloats("scene.torso_look_at"),
                ),
            )
            yaw_lo, yaw_hi = cfg.getfloats("scene.head_yaw_limits")
            pitch_lo, pitch_hi = cfg.getfloats("scene.head_pitch_limits")
            rig = CameraRig(head, torso, (yaw_lo, yaw_hi), (pitch_lo, pitch_hi))
            noise = NoiseConfig(
                cfg.getfloat("scene.noise_sigma"),
                cfg.getint("scene.distractors"),
            )
            cx, cy, cz = cfg.getfloats("scene.screw_center")
        except (ValueError, KinematicsError) as e:
            raise DetVSConfig.Error(f"scene: {e}") from e

        render = RenderConfig(
            cfg.getfloat("scene.tip_radius"),
            cfg.getfloat("scene.min_radius_px"),
            cfg.getfloat("scene.slot_ratio"),
            cfg.getfloat("scene.background"),
            cfg.getfloat("scene.screw_intensity"),
            cfg.getfloat("scene.slot_intensity"),
            cfg.getfloat("scene.tip_intensity"),
            cfg.getint("scene.channels"),
        )
        placement = Placement(
            (cx, cy, cz),
            cfg.getfloat("scene.screw_jitter"),
            math.radians(cfg.getfloat("dataset.rotation_error")),
            cfg.getfloat("dataset.grasp_length"),
            cfg.getfloat("dataset.grasp_jitter"),
            math.radians(cfg.getfloat("dataset.grasp_tilt")),
            cfg.getfloat("scene.head_jitter"),
            cfg.getint("dataset.retries"),
        )
        try:
            chain = load_chain(cfg.getstr("kinematics.arm_chain"))
        except (KinematicChain.Error, KinematicsError) as e:
            raise DetVSConfig.Error(f"kinematics.arm_chain: {e}") from e

        calibration = np.zeros(chain.dof)
        sigma = cfg.getfloat("scene.calibration_sigma")
        if sigma > 0:
            rng = rng or np.random.default_rng(cfg.getint("detvs.seed"))
            calibration = rng.normal(0.0, sigma, chain.dof)

        return cls(
            rig,
            chain,
            render=render,
            noise=noise,
            placement=placement,
            ik=IKSettings.from_config(cfg),
            calibration=calibration,
            encoder_bits=cfg.getint("scene.encoder_bits"),
        )

    def __init__(
        self,
        rig: CameraRig,
        chain: KinematicChain,
        render: Optional[RenderConfig] = None,
        noise: Optional[NoiseConfig] = None,
        placement: Optional[Placement] = None,
        ik: Optional[IKSettings] = None,
        calibration: Optional[ArrayLike] = None,
        encoder_bits: int = 0,
    ) -> None:
        """Initialize simulator.

        Args:
            rig: Camera rig.
            chain: Nominal arm chain, base in the torso frame.
            render: Feature appearance.
            noise: Image noise.
            placement: Random placement settings.
            ik: IK solver settings.
            calibration: Zero-point offsets of the simulated arm joints
              with respect to the nominal chain (radians).
            encoder_bits: Encoder resolution of the simulated arm,
              0 for ideal encoders.
        """
        self._rig = rig
        self._chain = chain
        self._render = render or RenderConfig()
        self._noise = noise or NoiseConfig()
        self._placement = placement or Placement()
        self._ik = ik or IKSettings()
        self._calibration = (
            np.zeros(chain.dof)
            if calibration is None
            else chain.check(calibration).copy()
        )
        self._encoder_bits = encoder_bits

    @property
    def rig(self) -> CameraRig:
        """Camera rig."""
        return self._rig

    @property
    def chain(self) -> KinematicChain:
        """Nominal arm chain."""
        return self._chain

    @property
    def render_config(self) -> RenderConfig:
        """Feature appearance."""
        return self._render

    @property
    def noise(self) -> NoiseConfig:
        """Image noise."""
        return self._noise

    @property
    def placement(self) -> Placement:
        """Random placement settings."""
        return self._placement

    @property
    def ik(self) -> IKSettings:
        """IK solver settings."""
        return self._ik

    @property
    def calibration(self) -> NDArray[np.float64]:
        """Zero-point offsets of the simulated arm (radians)."""
        return self._calibration.copy()

    @property
    def encoder_bits(self) -> int:
        """Encoder resolution of the simulated arm, 0 if ideal."""
        return self._encoder_bits

    def with_noise(self, noise: NoiseConfig) -> "SceneSim":
        """Same simulator, other noise settings."""
        return SceneSim(
            self._rig,
            self._chain,
            self._render,
            noise,
            self._placement,
            self._ik,
            self._calibration,
            self._encoder_bits,
        )

    def actuate(self, q_cmd: ArrayLike) -> JointConfig:
        """Joint angles reached for a command, as read by the encoders."""
        return quantize_joints(self._chain.clip(q_cmd), self._encoder_bits)

    def true_ee_pose(self, q: ArrayLike) -> Pose:
        """End-effector pose of the simulated arm for joint readings."""
        q_true = self._chain.check(q) + self._calibration
        return forward_kinematics(self._chain, q_true)

    def nominal_ee_pose(self, q: ArrayLike) -> Pose:
        """End-effector pose of the nominal chain (bookkeeping)."""
        return forward_kinematics(self._chain, q)

    def render(
        self, state: SceneState, rng: np.random.Generator
    ) -> Observation:
        """Render an observation with this simulator's settings.

        Raises:
            OutOfViewError: A feature is outside an image.
        """
        return render_observation(
            state, self._rig, self._render, self._noise, rng
        )

    def in_view(self, state: SceneState) -> bool:
        """Whether both features project inside both images."""
        try:
            check_in_view(state, self._rig)
        except (OutOfViewError, KinematicsError):
            return False
        return True

    def reach(
        self, pose: Pose, seed: Optional[ArrayLike] = None
    ) -> Optional[JointConfig]:
        """Joint angles realizing an end-effector pose, None if unreachable."""
        res = self._ik.solve(
            self._chain, pose, self._chain.home if seed is None else seed
        )
        return res.q if res.converged else None

    def random_head_angles(
        self, rng: np.random.Generator
    ) -> Tuple[float, float]:
        """Random head yaw and pitch within the jitter amplitude and bounds."""
        jitter = self._placement.head_jitter
        yaw, pitch = rng.uniform(-jitter, jitter, size=2)
        lo, hi = self._rig.neck.lower_bounds, self._rig.neck.upper_bounds
        return (
            float(np.clip(yaw, lo[0], hi[0])),
            float(np.clip(pitch, lo[1], hi[1])),
        )

    def sample_task(
        self, rng: np.random.Generator, screw_radius: float = 0.010
    ) -> TaskSetup:
        """Random screw placement, grasp and end-effector orientation.

        The aligned configuration (tool tip on the screw center) must be
        reachable, and both features in view of both cameras at zero head
        angles.

        Raises:
            GroupAbortedError: No valid placement after the configured
              number of retries.
        """
        pl = self._placement
        for _ in range(max(pl.retries, 1)):
            xy = rng.uniform(-pl.screw_jitter, pl.screw_jitter, size=2)
            center = np.asarray(pl.screw_center) + np.array([xy[0], xy[1], 0.0])
            slot = float(rng.uniform(0.0, math.pi))
            screw = Pose(Rotation.from_euler("z", slot).as_matrix(), center)

            tilt = rng.uniform(-pl.grasp_tilt, pl.grasp_tilt, size=2)
            offset = rng.uniform(-pl.grasp_jitter, pl.grasp_jitter, size=2)
            grasp = Pose.from_rpy(
                (tilt[0], tilt[1], 0.0),
                (offset[0], offset[1], -pl.grasp_length),
            )

            rot_err = rng.uniform(-pl.rotation_error, pl.rotation_error, size=3)
            rot = Rotation.from_euler("xyz", rot_err).as_matrix()
            ee_pos = center - rot @ grasp.translation
            aligned = Pose(rot, ee_pos)

            state = SceneState(aligned, grasp, screw, screw_radius=screw_radius)
            if not self.in_view(state):
                _LOG.debug("task placement out of view, retrying")
                continue
            q = self.reach(aligned)
            if q is None:
                _LOG.debug("task placement unreachable, retrying")
                continue
            return TaskSetup(
                screw,
                screw_radius,
                grasp,
                Rotation.from_matrix(rot).as_rotvec(),
                aligned,
                q,
            )
        raise GroupAbortedError(
            f"no reachable screw placement after {pl.retries} attempts"
        )

    def degenerate_state(
        self,
        task: TaskSetup,
        offset: float,
        yaw: float = 0.0,
        pitch: float = 0.0,
    ) -> SceneState:
        """Tool tip on the line through the head camera and the screw center.

        In the head image the tip projects onto the screw center whatever
        the offset: only the torso camera disambiguates the distance.

        Args:
            task: The task setup.
            offset: Tip distance from the screw center, towards the
              head camera (m).
            yaw: Head yaw.
            pitch: Head pitch.
        """
        center = task.screw_pose.translation
        eye = self._rig.head_camera_pose(yaw, pitch).translation
        los = (eye - center) / np.linalg.norm(eye - center)
        tip = center + offset * los
        aligned = task.aligned_pose
        ee = aligned.with_translation(aligned.translation + (tip - center))
        return SceneState(
            ee, task.grasp, task.screw_pose, yaw, pitch, task.screw_radius
        )
