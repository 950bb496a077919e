# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""Domain errors.

All exceptional conditions raised by the kinematics, scene, dataset,
head bank, model and controller APIs derive from DetVSError.

File codecs and configuration loaders use nested Error classes instead
(e.g. DatasetFile.Error, DetVSConfig.Error).
"""

from typing import Optional


class DetVSError(Exception):
    """Base for detvs errors."""

    _msg: Optional[str]

    def __init__(self, msg: Optional[str] = None) -> None:
        """An error happened.

        Args:
            msg: A message describing the error.
        """
        super().__init__(msg)
        self._msg = msg

    @property
    def msg(self) -> str:
        """A (may be empty) message describing the error."""
        return self._msg or ""


class KinematicsError(DetVSError):
    """Invalid chain description, joint vector or joint angles."""


class BehindCameraError(DetVSError):
    """A point does not lie in front of a camera."""


class OutOfViewError(DetVSError):
    """A scene feature projects outside a camera image."""

    _camera: str

    def __init__(self, camera: str, feature: str) -> None:
        """New error.

        Args:
            camera: Name of the camera that does not see the feature.
            feature: Name of the feature ("tool tip" or "screw").
        """
        super().__init__(f"{feature} out of view of the {camera} camera")
        self._camera = camera

    @property
    def camera(self) -> str:
        """Name of the camera that does not see the feature."""
        return self._camera


class GroupAbortedError(DetVSError):
    """A measurement group could not be collected."""


class IntegrityError(DetVSError):
    """A measurement group violates the kinematic equivalence premise."""


class OutOfRangeError(DetVSError):
    """A distance lies outside the head bank's operational range."""


class NonFiniteError(DetVSError):
    """Non-finite values where finite values are required."""

    _layer: Optional[int]

    def __init__(self, msg: str, layer: Optional[int] = None) -> None:
        """New error.

        Args:
            msg: A message describing the error.
            layer: Index of the network layer that produced
              the non-finite activations, if any.
        """
        if layer is not None:
            msg = f"{msg} (layer {layer})"
        super().__init__(msg)
        self._layer = layer

    @property
    def layer(self) -> Optional[int]:
        """Index of the faulty network layer, if any."""
        return self._layer


class TrainingDivergedError(DetVSError):
    """The training loss became non-finite."""

    _epoch: int

    def __init__(self, epoch: int) -> None:
        """New error.

        Args:
            epoch: Index of the epoch at which the loss diverged.
        """
        super().__init__(f"training diverged at epoch {epoch}")
        self._epoch = epoch

    @property
    def epoch(self) -> int:
        """Index of the epoch at which the loss diverged."""
        return self._epoch
