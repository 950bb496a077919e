# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""Measurement groups, ground truth and dataset files.

A measurement group pairs one benchmark, where the tool tip is aligned
with the screw center, with data points where the end-effector is
translated away while its rotation and the tool grasp are held fixed.
Under these conditions the tool displacement equals the end-effector
displacement, and the ground truth distance of a data point is obtained
by subtracting the benchmark end-effector position (benchmark subtraction).

Dataset file layout (little-endian):

    header:
        magic           8 bytes     b"DETVSDS\\0"
        version         u16
        reserved        u16
        config digest   32 bytes    SHA-256 of the configuration
        height          u32
        width           u32
        channels        u32
        count           u32         number of records
    record:
        length          u32         payload size in bytes
        group id        u32
        tier            u16
        reserved        u16
        head yaw        f64
        head pitch      f64
        d_r             3 x f64     meters, torso frame
        head image      H x W x C f32, row-major
        torso image     H x W x C f32, row-major

Unit tests and examples: tests/test_detvs_dataset.py
"""


from typing import (
    Callable,
    Iterator,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
)

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import hashlib
import logging
import struct

import numpy as np
from numpy.typing import ArrayLike, NDArray

from detvs.errors import GroupAbortedError, IntegrityError, OutOfRangeError
from detvs.kinematics import (
    JointConfig,
    KinematicChain,
    Pose,
    forward_kinematics,
)
from detvs.mph import HeadBank
from detvs.scene import Observation, SceneSim


_LOG = logging.getLogger(__name__)


@dataclass(frozen=True)
class Sample:
    """One observation with its ground truth distance vector."""

    observation: Observation
    d_r: NDArray[np.float64]
    """Tool minus aligned (benchmark) position, torso frame (m)."""
    group_id: int = 0
    tier: int = 0


@dataclass(frozen=True)
class DataPoint:
    """Recorded end-effector pose and observation."""

    ee_pose: Pose
    observation: Observation
    q: Optional[JointConfig] = None
    """Joint angles realizing the pose."""
    tool_tip: Optional[NDArray[np.float64]] = None
    """Simulator ground truth tool tip position, never used by bookkeeping."""


@dataclass(frozen=True)
class GroupMeta:
    """Between-group variation."""

    screw_pose: Pose
    grasp: Pose
    rotation_error: NDArray[np.float64]
    """Rotation vector of the injected rotational error (radians)."""
    screw_radius: float = 0.010


@dataclass(frozen=True)
class MeasurementGroup:
    """One benchmark and its data points."""

    benchmark: DataPoint
    points: List[DataPoint]
    meta: GroupMeta
    group_id: int = 0
    tier: int = 0


def _random_displacement(
    bank: HeadBank, rng: np.random.Generator
) -> NDArray[np.float64]:
    # Norm stratified over the head intervals, direction uniform on the
    # upper hemisphere.
    head = bank.heads[int(rng.integers(bank.n_heads))]
    norm = rng.uniform(head.lo, head.hi)
    direction = rng.normal(size=3)
    direction[2] = abs(direction[2])
    direction /= np.linalg.norm(direction)
    return norm * direction


def collect_group(
    sim: SceneSim,
    chain: KinematicChain,
    bank: HeadBank,
    n_points: int,
    rng: np.random.Generator,
    *,
    group_id: int = 0,
    tier: int = 0,
    screw_radius: float = 0.010,
) -> MeasurementGroup:
    """Collect one measurement group in the simulator.

    The screw, the grasp and the end-effector rotation (with a bounded
    random error) are drawn once. The benchmark places the tool tip on the
    screw center; each data point translates the end-effector by a random
    displacement with norm below the bank upper bound, and draws random
    head angles. Poses must be reachable, and features in view of both
    cameras.

    Args:
        sim: Scene simulator.
        chain: Arm chain used for reachability.
        bank: Head bank, defines the displacement range and strata.
        n_points: Number of data points.
        rng: Random generator.
        group_id: Group identifier stored in the samples.
        tier: Task tier index stored in the samples.
        screw_radius: Rendered screw head radius (m).

    Raises:
        GroupAbortedError: No valid placement after the configured
          number of retries.
    """
    task = sim.sample_task(rng, screw_radius)
    yaw, pitch = sim.random_head_angles(rng)
    bench_state = task.state((0.0, 0.0, 0.0), yaw, pitch)
    benchmark = DataPoint(
        task.aligned_pose,
        sim.render(bench_state, rng),
        task.q_aligned,
        bench_state.tool_tip,
    )

    retries = max(sim.placement.retries, 1)
    points: List[DataPoint] = []
    for i in range(n_points):
        for _ in range(retries):
            delta = _random_displacement(bank, rng)
            yaw, pitch = sim.random_head_angles(rng)
            if not np.linalg.norm(delta) < bank.upper:
                continue
            state = task.state(delta, yaw, pitch)
            if not sim.in_view(state):
                continue
            q = sim.ik.solve(chain, state.end_effector_pose, task.q_aligned)
            if not q.converged:
                continue
            points.append(
                DataPoint(
                    state.end_effector_pose,
                    sim.render(state, rng),
                    q.q,
                    state.tool_tip,
                )
            )
            break
        else:
            _LOG.warning("group %d: point %d not placed", group_id, i)
            raise GroupAbortedError(
                f"group {group_id}: point {i} not placed "
                f"after {retries} attempts"
            )

    meta = GroupMeta(
        task.screw_pose, task.grasp, task.rotation_error, screw_radius
    )
    return MeasurementGroup(benchmark, points, meta, group_id, tier)


def compute_ground_truth(
    group: MeasurementGroup, rot_tol: float = 1e-12
) -> List[Sample]:
    """Benchmark subtraction.

    d_r(point) = p_ee(point) - p_ee(benchmark), torso frame.

    Args:
        group: The measurement group.
        rot_tol: Tolerance on rotation matrix entries.

    Raises:
        IntegrityError: An end-effector rotation differs from the
          benchmark's: tool and end-effector displacements are no
          longer equivalent.
    """
    bench = group.benchmark.ee_pose
    samples: List[Sample] = []
    for i, point in enumerate(group.points):
        diff = np.max(np.abs(point.ee_pose.rotation - bench.rotation))
        if diff > rot_tol:
            raise IntegrityError(
                f"group {group.group_id}, point {i}: "
                f"end-effector rotation differs from benchmark ({diff:.3g})"
            )
        samples.append(
            Sample(
                point.observation,
                point.ee_pose.translation - bench.translation,
                group.group_id,
                group.tier,
            )
        )
    return samples


@dataclass(frozen=True)
class EquivalenceReport:
    """Tool versus end-effector displacements, one row per pose pair."""

    tool_displacement: NDArray[np.float64]
    """p_tb - p_ta, from the tool poses (N x 3)."""

    ee_displacement: NDArray[np.float64]
    """p_eb - p_ea (N x 3)."""

    predicted: NDArray[np.float64]
    """R_de p_ta + p_de - p_ta, tool displacement predicted from the
    end-effector transform (N x 3)."""

    rotation_angle: NDArray[np.float64]
    """Angle of R_de (radians, N)."""

    @property
    def residual(self) -> NDArray[np.float64]:
        """Tool minus end-effector displacement (N x 3)."""
        return self.tool_displacement - self.ee_displacement

    @property
    def max_residual(self) -> float:
        """Largest residual norm (m)."""
        if not len(self.residual):
            return 0.0
        return float(np.max(np.linalg.norm(self.residual, axis=1)))

    def consistent(self, atol: float = 1e-12, rot_tol: float = 1e-12) -> bool:
        """Whether displacements agree wherever rotations are equal."""
        equal = self.rotation_angle <= rot_tol
        norms = np.linalg.norm(self.residual, axis=1)
        return bool(np.all(norms[equal] < atol))


def verify_equivalence(
    grasp: Pose, poses_a: Sequence[Pose], poses_b: Sequence[Pose]
) -> EquivalenceReport:
    """Compare tool and end-effector displacements.

    Tool poses are T_t = T_e @ grasp. With T_de = T_eb @ inv(T_ea), the
    tool displacement is R_de p_ta + p_de - p_ta, which reduces to the
    end-effector displacement p_eb - p_ea when R_de is the identity.

    Args:
        grasp: Tool pose in the end-effector frame.
        poses_a: End-effector poses at positions a.
        poses_b: End-effector poses at positions b.
    """
    if len(poses_a) != len(poses_b):
        raise ValueError("pose sequences differ in length")
    tool = np.zeros((len(poses_a), 3))
    ee = np.zeros_like(tool)
    predicted = np.zeros_like(tool)
    angle = np.zeros(len(poses_a))
    for i, (ea, eb) in enumerate(zip(poses_a, poses_b)):
        ta, tb = ea @ grasp, eb @ grasp
        de = eb @ ea.inverse()
        tool[i] = tb.translation - ta.translation
        ee[i] = eb.translation - ea.translation
        predicted[i] = (
            de.rotation @ ta.translation + de.translation - ta.translation
        )
        angle[i] = np.linalg.norm(eb.rotation_error(ea))
    report = EquivalenceReport(tool, ee, predicted, angle)
    if not report.consistent():
        _LOG.warning(
            "tool and end-effector displacements differ for equal rotations"
        )
    return report


@dataclass(frozen=True)
class CalibrationReport:
    """Ground truth errors caused by joint zero-point offsets."""

    position_error: NDArray[np.float64]
    """Tool position error of nominal bookkeeping, per point (m)."""

    displacement_error: NDArray[np.float64]
    """Error of the benchmark-subtracted displacement, per point (m)."""

    displacement: NDArray[np.float64]
    """True tool displacement norm, per point (m)."""


def verify_calibration_cancellation(
    chain: KinematicChain,
    offsets: ArrayLike,
    grasp: Pose,
    q_bench: ArrayLike,
    q_points: Sequence[ArrayLike],
) -> CalibrationReport:
    """Effect of calibration offsets on benchmark subtraction.

    The true arm reaches fk(q + offsets) while bookkeeping computes fk(q).
    Absolute tool positions are wrong to first order in the offsets; the
    subtraction cancels that term, and leaves an error that scales with
    the product of the offsets and the joint displacement.

    Args:
        chain: Nominal arm chain.
        offsets: Joint zero-point offsets (radians).
        grasp: Tool pose in the end-effector frame.
        q_bench: Benchmark joint readings.
        q_points: Data point joint readings.
    """
    dq = chain.check(offsets)

    def tool_positions(q: ArrayLike) -> Tuple[NDArray[np.float64], ...]:
        nominal = forward_kinematics(chain, q).apply(grasp.translation)
        true = forward_kinematics(chain, chain.check(q) + dq).apply(
            grasp.translation
        )
        return nominal, true

    bench_nominal, bench_true = tool_positions(q_bench)
    position_error = []
    displacement_error = []
    displacement = []
    for q in q_points:
        nominal, true = tool_positions(q)
        position_error.append(np.linalg.norm(true - nominal))
        d_true = true - bench_true
        d_nominal = nominal - bench_nominal
        displacement_error.append(np.linalg.norm(d_true - d_nominal))
        displacement.append(np.linalg.norm(d_true))
    return CalibrationReport(
        np.array(position_error),
        np.array(displacement_error),
        np.array(displacement),
    )


@dataclass(frozen=True)
class EncodedTarget:
    """Training targets of one sample."""

    d_o: NDArray[np.float64]
    """Per-head amplified distance, clipped to [-3, 3] (n_heads x 3)."""

    con_o: NDArray[np.float64]
    """One-hot confidence target (n_heads)."""

    @property
    def head(self) -> int:
        """Index of the designated head."""
        return int(np.argmax(self.con_o))


CLIP = 3.0
"""Bound of the amplified distance targets."""


def encode_targets(d_r: ArrayLike, bank: HeadBank) -> EncodedTarget:
    """Encode a distance vector for every head.

    d_o(h) = clip(d_r / mu_h, -3, 3) elementwise; con_o is one-hot at
    the head whose interval contains |d_r|.

    Raises:
        OutOfRangeError: |d_r| not below the bank upper bound.
    """
    vec = np.asarray(d_r, dtype=np.float64)
    head = bank.head_index(float(np.linalg.norm(vec)))
    d_o = np.clip(vec[np.newaxis, :] / bank.mus[:, np.newaxis], -CLIP, CLIP)
    con_o = np.zeros(bank.n_heads)
    con_o[head] = 1.0
    return EncodedTarget(d_o, con_o)


def encode_batch(
    d_r: ArrayLike, bank: HeadBank
) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Vectorized encode_targets.

    Returns:
        d_o (N x n_heads x 3) and con_o (N x n_heads).

    Raises:
        OutOfRangeError: A norm is not below the bank upper bound.
    """
    vec = np.asarray(d_r, dtype=np.float64).reshape(-1, 3)
    heads = bank.head_indices(np.linalg.norm(vec, axis=1))
    scaled = vec[:, np.newaxis, :] / bank.mus[np.newaxis, :, np.newaxis]
    con_o = np.zeros((len(vec), bank.n_heads))
    con_o[np.arange(len(vec)), heads] = 1.0
    return np.clip(scaled, -CLIP, CLIP), con_o


def head_histogram(d_r: ArrayLike, bank: HeadBank) -> NDArray[np.int64]:
    """Number of distance vectors per head interval."""
    _, con_o = encode_batch(d_r, bank)
    return con_o.sum(axis=0).astype(np.int64)


class DatasetArrays(NamedTuple):
    """Dataset as stacked arrays."""

    head_images: NDArray[np.float32]
    torso_images: NDArray[np.float32]
    angles: NDArray[np.float64]
    """Head yaw and pitch (N x 2)."""
    d_r: NDArray[np.float64]
    group_ids: NDArray[np.int64]
    tiers: NDArray[np.int64]


def split_groups(
    arrays: DatasetArrays, held_out: int
) -> Tuple[DatasetArrays, DatasetArrays]:
    """Split off the samples of the last measurement groups.

    Groups are ordered by id.

    Args:
        arrays: The dataset.
        held_out: Number of groups to hold out, 0 for none.

    Returns:
        The remaining and the held-out samples.

    Raises:
        ValueError: Negative count, or no group left.
    """
    ids = np.unique(arrays.group_ids)
    if held_out < 0 or (held_out and held_out >= len(ids)):
        raise ValueError(
            f"cannot hold out {held_out} of {len(ids)} measurement groups"
        )
    mask = np.isin(arrays.group_ids, ids[len(ids) - held_out :])
    return (
        DatasetArrays(*(a[~mask] for a in arrays)),
        DatasetArrays(*(a[mask] for a in arrays)),
    )


@dataclass
class Dataset:
    """In-memory dataset."""

    samples: List[Sample]
    config_digest: str = ""
    """Hex SHA-256 of the generating configuration."""

    image_shape: Tuple[int, int, int] = field(default=(0, 0, 0))
    """Height, width, channels."""

    def __post_init__(self) -> None:
        if self.samples and self.image_shape == (0, 0, 0):
            shape = self.samples[0].observation.head_image.shape
            self.image_shape = (shape[0], shape[1], shape[2])

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def arrays(self) -> DatasetArrays:
        """Stack samples into arrays."""
        h, w, c = self.image_shape
        if not self.samples:
            return DatasetArrays(
                np.zeros((0, h, w, c), np.float32),
                np.zeros((0, h, w, c), np.float32),
                np.zeros((0, 2)),
                np.zeros((0, 3)),
                np.zeros(0, np.int64),
                np.zeros(0, np.int64),
            )
        return DatasetArrays(
            np.stack([s.observation.head_image for s in self.samples]),
            np.stack([s.observation.torso_image for s in self.samples]),
            np.array(
                [
                    (s.observation.head_yaw, s.observation.head_pitch)
                    for s in self.samples
                ]
            ),
            np.stack([s.d_r for s in self.samples]),
            np.array([s.group_id for s in self.samples], np.int64),
            np.array([s.tier for s in self.samples], np.int64),
        )


class DatasetFile:
    """Dataset file codec."""

    MAGIC = b"DETVSDS\x00"
    VERSION = 1

    _HEADER = struct.Struct("<8sHH32sIIII")
    _RECORD = struct.Struct("<IHHdd3d")
    _LENGTH = struct.Struct("<I")

    class Error(BaseException):
        """Failed to read or write a dataset file."""

    @classmethod
    def write(cls, path: str, dataset: Dataset) -> str:
        """Write a dataset file.

        Returns:
            Hex SHA-256 of the file content.

        Raises:
            DatasetFile.Error: I/O error, or inconsistent image shapes.
        """
        h, w, c = dataset.image_shape
        digest = bytes.fromhex(dataset.config_digest or "")
        sha = hashlib.sha256()
        try:
            with open(path, "wb") as f:
                header = cls._HEADER.pack(
                    cls.MAGIC,
                    cls.VERSION,
                    0,
                    digest.ljust(32, b"\x00"),
                    h,
                    w,
                    c,
                    len(dataset),
                )
                f.write(header)
                sha.update(header)
                for sample in dataset:
                    obs = sample.observation
                    for img in (obs.head_image, obs.torso_image):
                        if img.shape != (h, w, c):
                            raise DatasetFile.Error(
                                f"{path}: image shape {img.shape}, "
                                f"expected {(h, w, c)}"
                            )
                    payload = b"".join(
                        (
                            cls._RECORD.pack(
                                sample.group_id,
                                sample.tier,
                                0,
                                obs.head_yaw,
                                obs.head_pitch,
                                *(float(x) for x in sample.d_r),
                            ),
                            obs.head_image.astype("<f4").tobytes(),
                            obs.torso_image.astype("<f4").tobytes(),
                        )
                    )
                    record = cls._LENGTH.pack(len(payload)) + payload
                    f.write(record)
                    sha.update(record)
        except OSError as e:
            raise DatasetFile.Error(f"{path}: {e.strerror}") from e
        _LOG.info("dataset: %s (%d samples)", path, len(dataset))
        return sha.hexdigest()

    @classmethod
    def read(cls, path: str) -> Dataset:
        """Read a dataset file.

        Raises:
            DatasetFile.Error: I/O error, unsupported version, or corrupted
              content.
        """
        try:
            with open(path, "rb") as f:
                raw = f.read()
        except OSError as e:
            raise DatasetFile.Error(f"{path}: {e.strerror}") from e

        try:
            magic, version, _, digest, h, w, c, count = (
                cls._HEADER.unpack_from(raw)
            )
            if magic != cls.MAGIC:
                raise DatasetFile.Error(f"{path}: not a dataset file")
            if version != cls.VERSION:
                raise DatasetFile.Error(
                    f"{path}: unsupported version {version}"
                )

            n_pixels = h * w * c
            offset = cls._HEADER.size
            samples: List[Sample] = []
            for _ in range(count):
                (length,) = cls._LENGTH.unpack_from(raw, offset)
                offset += cls._LENGTH.size
                if length != cls._RECORD.size + 8 * n_pixels:
                    raise DatasetFile.Error(
                        f"{path}: invalid record length {length}"
                    )
                group_id, tier, _, yaw, pitch, *d_r = cls._RECORD.unpack_from(
                    raw, offset
                )
                pos = offset + cls._RECORD.size
                images = np.frombuffer(raw, "<f4", 2 * n_pixels, pos)
                head = images[:n_pixels].reshape(h, w, c).astype(np.float32)
                torso = images[n_pixels:].reshape(h, w, c).astype(np.float32)
                samples.append(
                    Sample(
                        Observation(head, torso, yaw, pitch),
                        np.array(d_r),
                        group_id,
                        tier,
                    )
                )
                offset += length
        except (struct.error, ValueError) as e:
            raise DatasetFile.Error(
                f"{path}: truncated or corrupted: {e}"
            ) from e
        if offset != len(raw):
            raise DatasetFile.Error(f"{path}: trailing bytes")

        return Dataset(samples, digest.hex(), (h, w, c))


@dataclass(frozen=True)
class GroupJob:
    """Generation parameters of one group."""

    group_id: int
    tier: int
    screw_radius: float
    seed: np.random.SeedSequence


def _run_group(
    sim: SceneSim,
    bank: HeadBank,
    points_range: Tuple[int, int],
    job: GroupJob,
) -> List[Sample]:
    rng = np.random.default_rng(job.seed)
    n_points = int(rng.integers(points_range[0], points_range[1] + 1))
    group = collect_group(
        sim,
        sim.chain,
        bank,
        n_points,
        rng,
        group_id=job.group_id,
        tier=job.tier,
        screw_radius=job.screw_radius,
    )
    return compute_ground_truth(group)


def generate_dataset(
    sim: SceneSim,
    bank: HeadBank,
    n_groups: int,
    points_range: Tuple[int, int],
    screw_radii: Sequence[float],
    seed: int,
    workers: int = 1,
    on_group: Optional[Callable[[int], None]] = None,
) -> List[Sample]:
    """Collect measurement groups, and apply benchmark subtraction.

    Groups are assigned to the task tiers round-robin, each group draws
    from its own child seed: the result does not depend on the number of
    workers.

    Args:
        sim: Scene simulator.
        bank: Head bank.
        n_groups: Number of groups.
        points_range: Inclusive range of data points per group.
        screw_radii: Screw head radius of each tier (m).
        seed: Master seed.
        workers: Worker processes, 1 to run in the calling process.
        on_group: Called with the group id as groups complete.

    Raises:
        GroupAbortedError: A group could not be placed.
    """
    lo, hi = points_range
    if not 0 < lo <= hi:
        raise ValueError(f"invalid points range: {points_range}")
    seeds = np.random.SeedSequence(seed).spawn(n_groups)
    jobs = [
        GroupJob(i, i % len(screw_radii), screw_radii[i % len(screw_radii)], s)
        for i, s in enumerate(seeds)
    ]
    samples: List[Sample] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_group, sim, bank, points_range, job)
                for job in jobs
            ]
            for job, future in zip(jobs, futures):
                samples.extend(future.result())
                if on_group:
                    on_group(job.group_id)
    else:
        for job in jobs:
            samples.extend(_run_group(sim, bank, points_range, job))
            if on_group:
                on_group(job.group_id)
    return samples
