# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""Unit tests for the detvs.dataset module."""

# Relax pylint a bit for unit tests.
# pylint: disable=missing-function-docstring


from typing import List

from pathlib import Path
import dataclasses
import math

import numpy as np
import pytest

from detvs.dataset import (
    CLIP,
    Dataset,
    DatasetFile,
    MeasurementGroup,
    collect_group,
    compute_ground_truth,
    encode_batch,
    encode_targets,
    generate_dataset,
    head_histogram,
    verify_calibration_cancellation,
    verify_equivalence,
)
from detvs.errors import IntegrityError, OutOfRangeError
from detvs.kinematics import Pose, axis_rotation, load_chain
from detvs.mph import HeadBank

from .detvs_uthelpers import DetVSTests


BANK = HeadBank.default()
RADII = (0.012, 0.010, 0.008)


def _sample_group(seed: int = 0, n_points: int = 3) -> MeasurementGroup:
    sim = DetVSTests.get_sample_sim()
    return collect_group(
        sim, sim.chain, BANK, n_points, DetVSTests.rng(seed), group_id=7
    )


def test_collect_group() -> None:
    group = _sample_group()
    assert len(group.points) == 3
    assert group.group_id == 7
    bench = group.benchmark
    # The benchmark tool tip is on the screw center.
    assert np.allclose(
        bench.tool_tip, group.meta.screw_pose.translation, atol=1e-12
    )
    assert np.linalg.norm(group.meta.rotation_error) <= math.radians(15.0)
    for point in group.points:
        # Rotation and grasp held fixed within the group.
        assert np.array_equal(point.ee_pose.rotation, bench.ee_pose.rotation)
        d_ee = point.ee_pose.translation - bench.ee_pose.translation
        d_tool = point.tool_tip - bench.tool_tip
        assert np.allclose(d_ee, d_tool, atol=1e-12)
        assert np.linalg.norm(d_ee) < BANK.upper
        assert point.observation.head_image.shape == (16, 16, 1)


def test_compute_ground_truth() -> None:
    group = _sample_group(1)
    samples = compute_ground_truth(group)
    assert len(samples) == len(group.points)
    for sample, point in zip(samples, group.points):
        assert sample.group_id == 7
        assert sample.observation is point.observation
        assert np.allclose(
            sample.d_r, point.tool_tip - group.benchmark.tool_tip, atol=1e-12
        )


def test_compute_ground_truth_rotated() -> None:
    group = _sample_group(2)
    point = group.points[1]
    pose = point.ee_pose
    tilted = Pose(
        pose.rotation @ axis_rotation((0, 0, 1), 1e-6), pose.translation
    )
    points = list(group.points)
    points[1] = dataclasses.replace(point, ee_pose=tilted)
    with pytest.raises(IntegrityError):
        compute_ground_truth(dataclasses.replace(group, points=points))


def test_verify_equivalence() -> None:
    grasp = Pose.from_rotvec((0.05, -0.03, 0.0), (0.01, 0.0, -0.1))
    rng = DetVSTests.rng(3)
    poses_a, poses_b = [], []
    for _ in range(10):
        ea = Pose.from_rotvec(rng.uniform(-1, 1, 3), rng.uniform(-0.5, 0.5, 3))
        poses_a.append(ea)
        poses_b.append(
            Pose(ea.rotation, ea.translation + rng.uniform(-0.1, 0.1, 3))
        )
    report = verify_equivalence(grasp, poses_a, poses_b)
    assert report.consistent()
    assert report.max_residual < 1e-12
    assert np.allclose(report.rotation_angle, 0.0)

    # 10 degrees of end-effector rotation: displacements diverge.
    ea = poses_a[0]
    eb = Pose(
        ea.rotation @ axis_rotation((0, 0, 1), math.radians(10)),
        ea.translation + (0.02, 0.0, 0.0),
    )
    report = verify_equivalence(grasp, [ea], [eb])
    assert np.isclose(report.rotation_angle[0], math.radians(10))
    assert report.max_residual > 1e-3
    assert np.allclose(report.predicted, report.tool_displacement, atol=1e-12)
    assert np.allclose(
        report.predicted - report.ee_displacement, report.residual, atol=1e-12
    )
    # Unequal rotations are not held against consistency.
    assert report.consistent()

    with pytest.raises(ValueError):
        verify_equivalence(grasp, [ea], [])


def test_verify_calibration_cancellation() -> None:
    chain = load_chain("arm7.yaml")
    grasp = Pose(translation=(0.0, 0.0, -0.1))
    rng = DetVSTests.rng(4)
    q_points = [
        chain.clip(chain.home + rng.uniform(-0.02, 0.02, chain.dof))
        for _ in range(5)
    ]

    report = verify_calibration_cancellation(
        chain, np.zeros(chain.dof), grasp, chain.home, q_points
    )
    assert np.allclose(report.position_error, 0.0)
    assert np.allclose(report.displacement_error, 0.0)

    offsets = rng.normal(0.0, 1e-3, chain.dof)
    report = verify_calibration_cancellation(
        chain, offsets, grasp, chain.home, q_points
    )
    assert len(report.displacement) == 5
    assert np.all(report.position_error > 1e-5)
    # Benchmark subtraction cancels the first-order term.
    assert np.all(report.displacement_error < 0.1 * report.position_error)


def test_encode_targets() -> None:
    target = encode_targets((0.024, 0.0, 0.0), BANK)
    assert target.head == 1
    assert np.array_equal(target.con_o, (0.0, 1.0, 0.0, 0.0))
    assert np.allclose(target.d_o[1], (1.0, 0.0, 0.0))
    assert np.allclose(target.d_o[0], (CLIP, 0.0, 0.0))
    assert np.allclose(target.d_o[3], (0.25, 0.0, 0.0))

    target = encode_targets((0.096, 0.0, 0.0), BANK)
    assert target.head == 3
    assert np.allclose(target.d_o[0], (3.0, 0.0, 0.0))
    assert np.allclose(target.d_o[3], (1.0, 0.0, 0.0))

    # Negative components clip symmetrically.
    target = encode_targets((0.0, -0.03, -0.04), BANK)
    assert target.head == 2
    assert np.allclose(target.d_o[0], (0.0, -3.0, -3.0))

    assert encode_targets((0.0, 0.0, 0.0), BANK).head == 0
    with pytest.raises(OutOfRangeError):
        encode_targets((0.128, 0.0, 0.0), BANK)
    with pytest.raises(OutOfRangeError):
        encode_targets((0.1, 0.1, 0.0), BANK)


def test_encode_batch() -> None:
    d_r = DetVSTests.rng(5).uniform(-0.07, 0.07, (20, 3))
    d_o, con_o = encode_batch(d_r, BANK)
    assert d_o.shape == (20, 4, 3)
    assert con_o.shape == (20, 4)
    assert np.all(np.abs(d_o) <= CLIP)
    for i, vec in enumerate(d_r):
        target = encode_targets(vec, BANK)
        assert np.array_equal(d_o[i], target.d_o)
        assert np.array_equal(con_o[i], target.con_o)

    with pytest.raises(OutOfRangeError):
        encode_batch([[0.2, 0.0, 0.0]], BANK)


def test_head_histogram() -> None:
    d_r = [
        (0.01, 0.0, 0.0),
        (0.02, 0.0, 0.0),
        (0.0, 0.03, 0.0),
        (0.0, 0.0, 0.1),
    ]
    assert np.array_equal(head_histogram(d_r, BANK), (1, 2, 0, 1))
    sph = HeadBank.single()
    assert np.array_equal(head_histogram(d_r, sph), (4,))


def test_dataset_arrays() -> None:
    samples = compute_ground_truth(_sample_group(6))
    dataset = Dataset(samples, "00" * 32)
    assert dataset.image_shape == (16, 16, 1)
    arrays = dataset.arrays()
    assert arrays.head_images.shape == (3, 16, 16, 1)
    assert arrays.angles.shape == (3, 2)
    assert np.array_equal(arrays.group_ids, (7, 7, 7))

    empty = Dataset([], image_shape=(16, 16, 1)).arrays()
    assert empty.torso_images.shape == (0, 16, 16, 1)
    assert empty.d_r.shape == (0, 3)


def test_dataset_file(tmp_path: Path) -> None:
    cfg = DetVSTests.tiny_config()
    samples = compute_ground_truth(_sample_group(8))
    dataset = Dataset(samples, cfg.digest())

    path1 = str(tmp_path / "a.bin")
    path2 = str(tmp_path / "b.bin")
    sha = DatasetFile.write(path1, dataset)
    assert len(sha) == 64
    # Same content, same digest.
    assert DatasetFile.write(path2, dataset) == sha

    loaded = DatasetFile.read(path1)
    assert len(loaded) == len(dataset)
    assert loaded.config_digest == cfg.digest()
    assert loaded.image_shape == (16, 16, 1)
    for a, b in zip(dataset, loaded):
        assert np.array_equal(a.d_r, b.d_r)
        assert a.group_id == b.group_id and a.tier == b.tier
        assert a.observation.head_yaw == b.observation.head_yaw
        assert (
            a.observation.torso_image.tobytes()
            == b.observation.torso_image.tobytes()
        )

    empty = str(tmp_path / "empty.bin")
    DatasetFile.write(empty, Dataset([], cfg.digest(), (16, 16, 1)))
    assert len(DatasetFile.read(empty)) == 0


def test_dataset_file_errors(tmp_path: Path) -> None:
    samples = compute_ground_truth(_sample_group(9, n_points=2))
    path = tmp_path / "dataset.bin"
    DatasetFile.write(str(path), Dataset(samples))
    raw = path.read_bytes()

    with pytest.raises(DatasetFile.Error):
        DatasetFile.read(str(tmp_path / "missing.bin"))

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTADSET" + raw[8:])
    with pytest.raises(DatasetFile.Error):
        DatasetFile.read(str(bad))

    bad.write_bytes(raw[:8] + b"\x09\x00" + raw[10:])
    with pytest.raises(DatasetFile.Error):
        DatasetFile.read(str(bad))

    bad.write_bytes(raw[:-10])
    with pytest.raises(DatasetFile.Error):
        DatasetFile.read(str(bad))

    bad.write_bytes(raw + b"\x00")
    with pytest.raises(DatasetFile.Error):
        DatasetFile.read(str(bad))

    with pytest.raises(DatasetFile.Error):
        DatasetFile.write(
            str(tmp_path / "no" / "such" / "dir.bin"), Dataset(samples)
        )


def test_generate_dataset() -> None:
    sim = DetVSTests.get_sample_sim()
    seen: List[int] = []
    samples = generate_dataset(
        sim, BANK, 2, (3, 4), RADII, seed=11, on_group=seen.append
    )
    assert seen == [0, 1]
    assert 6 <= len(samples) <= 8
    assert {s.group_id for s in samples} == {0, 1}
    # Round-robin tier assignment.
    for s in samples:
        assert s.tier == s.group_id % len(RADII)
    assert all(np.linalg.norm(s.d_r) < BANK.upper for s in samples)

    again = generate_dataset(sim, BANK, 2, (3, 4), RADII, seed=11)
    assert len(again) == len(samples)
    for a, b in zip(samples, again):
        assert np.array_equal(a.d_r, b.d_r)
        assert (
            a.observation.head_image.tobytes()
            == b.observation.head_image.tobytes()
        )

    other = generate_dataset(sim, BANK, 2, (3, 4), RADII, seed=12)
    assert not np.array_equal(samples[0].d_r, other[0].d_r)

    with pytest.raises(ValueError):
        generate_dataset(sim, BANK, 1, (0, 4), RADII, seed=0)
    with pytest.raises(ValueError):
        generate_dataset(sim, BANK, 1, (5, 4), RADII, seed=0)
