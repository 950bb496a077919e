# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""Dual-frequency visual servoing.

- estimate ticks (default 10 Hz): observe, estimate the tool-minus-screw
  distance, and update the end-effector target position
- control ticks (default 50 Hz): proportional velocity towards the target,
  integrated into an intermediate target position, converted to joint
  commands by inverse kinematics seeded with the current joint angles

The end-effector orientation is held constant: between two estimates the
commanded trajectory is a straight line in position space.

Time is logical: ticks advance by 1/control_rate, estimate ticks occur
every control_rate/estimate_rate control ticks.

Unit tests and examples: tests/test_detvs_controller.py
"""


from typing import Deque, List, Optional, Protocol, Sequence, Tuple

from collections import deque
from dataclasses import dataclass, field
import logging
import math

import numpy as np
from numpy.typing import ArrayLike, NDArray

from detvs.config import DetVSConfig
from detvs.errors import GroupAbortedError, KinematicsError, OutOfViewError
from detvs.kinematics import (
    IKSettings,
    JointConfig,
    KinematicChain,
    Pose,
    forward_kinematics,
)
from detvs.mph import HeadBank, select_and_decode
from detvs.model import Estimator, predict
from detvs.scene import SceneSim, SceneState, TaskSetup, check_in_view


_LOG = logging.getLogger(__name__)


@dataclass(frozen=True)
class ServoConfig:
    """Servo loop settings."""

    estimate_rate: float = 10.0
    """Hz."""
    control_rate: float = 50.0
    """Hz."""
    kp: float = 2.0
    """Proportional coefficient (1/s)."""
    success_tolerance: float = 0.002
    """Tool tip to screw center distance of a successful trial (m)."""
    max_duration: float = 10.0
    """s."""
    dwell: float = 0.5
    """Convergence dwell period (s)."""
    settle_motion: float = 5e-5
    """End-effector motion bound over the dwell period (m)."""

    def __post_init__(self) -> None:
        if not (self.estimate_rate > 0 and self.control_rate > 0):
            raise ValueError("rates must be > 0")
        ratio = self.control_rate / self.estimate_rate
        if ratio < 1 or not math.isclose(ratio, round(ratio)):
            raise ValueError(
                "control rate must be an integer multiple of the estimate rate"
            )
        if not self.kp > 0:
            raise ValueError("kp must be > 0")
        if not self.success_tolerance > 0:
            raise ValueError("success tolerance must be > 0")

    @classmethod
    def from_config(
        cls, cfg: DetVSConfig, success_tolerance: Optional[float] = None
    ) -> "ServoConfig":
        """Loop settings from the "servo.*" options.

        Args:
            cfg: Configuration.
            success_tolerance: Tolerance of the task tier, defaults to the
              coarse (first) tier.

        Raises:
            DetVSConfig.Error: Invalid options.
        """
        tol = success_tolerance or cfg.getfloats("harness.tolerance")[0]
        try:
            return cls(
                cfg.getfloat("servo.estimate_rate"),
                cfg.getfloat("servo.control_rate"),
                cfg.getfloat("servo.kp"),
                tol,
                cfg.getfloat("servo.max_duration"),
                cfg.getfloat("servo.dwell"),
                cfg.getfloat("servo.settle_motion"),
            )
        except ValueError as e:
            raise DetVSConfig.Error(f"servo: {e}") from e

    @property
    def dt(self) -> float:
        """Control period (s)."""
        return 1.0 / self.control_rate

    @property
    def ticks_per_estimate(self) -> int:
        """Control ticks between two estimate ticks."""
        return int(round(self.control_rate / self.estimate_rate))


@dataclass(frozen=True)
class Estimate:
    """Distance estimate."""

    distance: NDArray[np.float64]
    """Tool minus target (m)."""
    head: int = -1
    """Selected perception head, -1 if not applicable."""


class DistanceEstimator(Protocol):
    """Source of tool-minus-target distance estimates."""

    name: str

    def estimate(
        self, state: SceneState, sim: SceneSim, rng: np.random.Generator
    ) -> Estimate:
        """Estimate the distance in a scene state."""


class OracleEstimator:
    """Simulator ground truth."""

    name = "oracle"

    def estimate(
        self, state: SceneState, sim: SceneSim, rng: np.random.Generator
    ) -> Estimate:
        return Estimate(state.distance)


class NoisyOracleEstimator:
    """Ground truth plus isotropic Gaussian noise."""

    name = "noisy-oracle"

    def __init__(self, sigma: float) -> None:
        self.sigma = sigma

    def estimate(
        self, state: SceneState, sim: SceneSim, rng: np.random.Generator
    ) -> Estimate:
        return Estimate(state.distance + rng.normal(0.0, self.sigma, 3))


class LearnedEstimator:
    """Rendered observation through a trained network."""

    def __init__(
        self, model: Estimator, bank: HeadBank, name: str = "mph"
    ) -> None:
        self.model = model
        self.bank = bank
        self.name = name

    def estimate(
        self, state: SceneState, sim: SceneSim, rng: np.random.Generator
    ) -> Estimate:
        out = predict(self.model, sim.render(state, rng))
        dec = select_and_decode(
            out.distances.double().numpy(),
            out.logits.double().numpy(),
            self.bank,
        )
        return Estimate(np.asarray(dec.distance), int(dec.head))


def update_target(
    current: ArrayLike, estimate: ArrayLike
) -> NDArray[np.float64]:
    """End-effector target position.

    Moving the end-effector by -estimate moves the tool by -estimate.
    """
    return np.asarray(current, dtype=np.float64) - np.asarray(
        estimate, dtype=np.float64
    )


@dataclass(frozen=True)
class ControlState:
    """Fast loop state."""

    q: JointConfig
    """Current joint angles (readings)."""
    command: JointConfig
    """Last joint command."""
    intermediate: NDArray[np.float64]
    """Intermediate target position (m)."""
    rotation: NDArray[np.float64]
    """Held end-effector orientation."""

    @classmethod
    def start(cls, chain: KinematicChain, q: ArrayLike) -> "ControlState":
        """State at rest at joint angles q."""
        pose = forward_kinematics(chain, q)
        arr = chain.check(q).copy()
        return cls(arr, arr, pose.translation.copy(), pose.rotation.copy())


@dataclass(frozen=True)
class TickResult:
    """Outcome of a control tick."""

    state: ControlState
    velocity: NDArray[np.float64]
    ik_residual: float
    ik_converged: bool

    @property
    def command(self) -> JointConfig:
        """Joint command."""
        return self.state.command


def control_tick(
    state: ControlState,
    target: ArrayLike,
    cfg: ServoConfig,
    chain: KinematicChain,
    ik: Optional[IKSettings] = None,
) -> TickResult:
    """One fast loop iteration.

    v = kp (target - current); intermediate += v dt;
    command = IK(intermediate, held orientation), seeded with the
    current joint angles. If IK does not converge the previous command
    and intermediate target are held.
    """
    ik = ik or IKSettings()
    current = forward_kinematics(chain, state.q).translation
    velocity = cfg.kp * (np.asarray(target, dtype=np.float64) - current)
    intermediate = state.intermediate + velocity * cfg.dt
    res = ik.solve(chain, Pose(state.rotation, intermediate), state.q)
    if res.converged:
        command = res.q
    else:
        _LOG.debug("IK not converged (%.3g m), holding command", res.residual)
        command = state.command
        intermediate = state.intermediate
    return TickResult(
        ControlState(state.q, command, intermediate, state.rotation),
        velocity,
        res.residual,
        res.converged,
    )


@dataclass(frozen=True)
class TraceRecord:
    """One control tick."""

    t: float
    estimate_tick: bool
    error: NDArray[np.float64]
    """True tool-minus-screw distance (m)."""
    estimate: NDArray[np.float64]
    """Distance estimate, NaN if not an estimate tick."""
    head: int
    velocity: NDArray[np.float64]
    q: JointConfig
    """Joint command."""
    ik_residual: float


@dataclass
class ServoTrace:
    """Per-tick log of a trial."""

    records: List[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def errors(self) -> NDArray[np.float64]:
        """True error norms per tick (m)."""
        return np.array([np.linalg.norm(r.error) for r in self.records])

    def header(self) -> List[str]:
        """CSV header."""
        dof = len(self.records[0].q) if self.records else 0
        return (
            ["t", "estimate_tick", "err_x", "err_y", "err_z"]
            + ["est_x", "est_y", "est_z", "head", "v_x", "v_y", "v_z"]
            + [f"q{i}" for i in range(dof)]
            + ["ik_residual"]
        )

    def rows(self) -> List[List[str]]:
        """CSV rows."""
        return [
            [f"{r.t:.6f}", str(int(r.estimate_tick))]
            + [repr(float(x)) for x in r.error]
            + [repr(float(x)) for x in r.estimate]
            + [str(r.head)]
            + [repr(float(x)) for x in r.velocity]
            + [repr(float(x)) for x in r.q]
            + [repr(r.ik_residual)]
            for r in self.records
        ]


@dataclass(frozen=True)
class ServoResult:
    """Trial outcome."""

    trace: ServoTrace
    success: bool
    final_error: float
    """True tool tip to screw center distance at termination (m)."""
    converged: bool
    """Whether the loop detected convergence before the time limit."""
    reason: str = ""
    """Failure reason."""


@dataclass(frozen=True)
class TrialStart:
    """Initial condition of a trial."""

    task: TaskSetup
    q0: JointConfig
    head_yaw: float = 0.0
    head_pitch: float = 0.0


def sample_start(
    sim: SceneSim,
    rng: np.random.Generator,
    screw_radius: float = 0.010,
    distance_range: Tuple[float, float] = (0.064, 0.128),
) -> TrialStart:
    """Random reachable initial condition with features in view.

    The tool is displaced from the screw center by a distance drawn
    in distance_range, on the upper hemisphere.

    Raises:
        GroupAbortedError: No valid start after the configured retries.
    """
    task = sim.sample_task(rng, screw_radius)
    for _ in range(max(sim.placement.retries, 1)):
        direction = rng.normal(size=3)
        direction[2] = abs(direction[2])
        direction /= np.linalg.norm(direction)
        delta = rng.uniform(*distance_range) * direction
        yaw, pitch = sim.random_head_angles(rng)
        state = task.state(delta, yaw, pitch)
        if not sim.in_view(state):
            continue
        q0 = sim.reach(state.end_effector_pose, task.q_aligned)
        if q0 is not None:
            return TrialStart(task, q0, yaw, pitch)
    raise GroupAbortedError("no valid trial start")


def run_servo(
    sim: SceneSim,
    chain: KinematicChain,
    estimator: DistanceEstimator,
    cfg: ServoConfig,
    rng: np.random.Generator,
    start: Optional[TrialStart] = None,
) -> ServoResult:
    """Closed-loop servo trial against the simulator.

    The arm is commanded through the nominal chain and observed through
    the simulated arm (calibration offsets, encoder quantization).

    Termination: convergence (estimate norm below half the success
    tolerance, end-effector motion below settle_motion over the dwell
    period), features out of view, or the time limit.
    Success iff the final true distance is within the success tolerance.

    Args:
        sim: Scene simulator.
        chain: Nominal arm chain.
        estimator: Distance estimator.
        cfg: Loop settings.
        rng: Random generator (start sampling, rendering, estimator noise).
        start: Initial condition, sampled if None.
    """
    if start is None:
        start = sample_start(sim, rng)
    task = start.task
    ctrl = ControlState.start(chain, sim.actuate(start.q0))
    n_est = cfg.ticks_per_estimate
    n_ticks = int(round(cfg.max_duration / cfg.dt))
    dwell_ticks = int(round(cfg.dwell / cfg.dt))
    window: Deque[NDArray[np.float64]] = deque(maxlen=dwell_ticks + 1)
    trace = ServoTrace()
    target = forward_kinematics(chain, ctrl.q).translation
    nan3 = np.full(3, np.nan)
    converged = False
    reason = ""

    def scene_state(q: JointConfig) -> SceneState:
        return SceneState(
            sim.true_ee_pose(q),
            task.grasp,
            task.screw_pose,
            start.head_yaw,  # type: ignore[union-attr]
            start.head_pitch,  # type: ignore[union-attr]
            task.screw_radius,
        )

    state = scene_state(ctrl.q)
    for k in range(n_ticks + 1):
        t = k * cfg.dt
        current = forward_kinematics(chain, ctrl.q).translation
        window.append(current)
        estimate, head, is_est = nan3, -1, k % n_est == 0

        if is_est:
            try:
                check_in_view(state, sim.rig)
            except (OutOfViewError, KinematicsError) as e:
                reason = str(e)
                _LOG.debug("trial aborted at t=%.2f s: %s", t, reason)
                break
            est = estimator.estimate(state, sim, rng)
            estimate, head = est.distance, est.head
            target = update_target(current, estimate)
            motion = max(np.linalg.norm(p - current) for p in window)
            if (
                k >= dwell_ticks
                and np.linalg.norm(estimate) < cfg.success_tolerance / 2
                and motion < cfg.settle_motion
            ):
                converged = True
                trace.records.append(
                    TraceRecord(
                        t,
                        True,
                        state.distance,
                        estimate,
                        head,
                        np.zeros(3),
                        ctrl.command,
                        0.0,
                    )
                )
                break

        tick = control_tick(ctrl, target, cfg, chain, sim.ik)
        trace.records.append(
            TraceRecord(
                t,
                is_est,
                state.distance,
                estimate,
                head,
                tick.velocity,
                tick.command,
                tick.ik_residual,
            )
        )
        q = sim.actuate(tick.command)
        ctrl = ControlState(
            q, tick.command, tick.state.intermediate, ctrl.rotation
        )
        state = scene_state(q)

    final_error = float(np.linalg.norm(state.distance))
    success = not reason and final_error <= cfg.success_tolerance
    _LOG.debug(
        "trial %s: final error %.6f m, %d ticks",
        "success" if success else "failure",
        final_error,
        len(trace),
    )
    return ServoResult(trace, success, final_error, converged, reason)


def estimator_for(
    name: str,
    cfg: DetVSConfig,
    model: Optional[Estimator] = None,
    bank: Optional[HeadBank] = None,
) -> DistanceEstimator:
    """Estimator by name: "oracle", "noisy-oracle", or a model variant.

    Raises:
        ValueError: A model variant without a model.
    """
    if name == "oracle":
        return OracleEstimator()
    if name == "noisy-oracle":
        return NoisyOracleEstimator(cfg.getfloat("servo.noise_sigma"))
    if model is None or bank is None:
        raise ValueError(f"estimator {name}: no model")
    return LearnedEstimator(model, bank, name)


def success_rate(results: Sequence[ServoResult]) -> float:
    """Fraction of successful trials, NaN if none."""
    if not results:
        return float("nan")
    return sum(r.success for r in results) / len(results)
