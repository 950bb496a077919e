# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""Helpers for DetVS unit tests."""

from typing import Generator, Optional

from pathlib import Path
import contextlib
import os

import numpy as np

from detvs.config import DetVSConfig
from detvs.harness import ExperimentConfig
from detvs.scene import NoiseConfig, SceneSim


class DetVSTests:
    """Access test resource files, small configurations, etc."""

    RES_BASE = os.path.join(Path(__file__).parent.parent, "tests", "res")
    """Unit tests resource files directory."""

    _sample_sim: Optional[SceneSim] = None

    @classmethod
    def get_resource_path(cls, *name: str) -> str:
        """Get path to a test resource file.

        Args:
            name: Path components relative to the resources directory.
        """
        return os.path.join(cls.RES_BASE, *name)

    @classmethod
    def tiny_config(cls, run_dir: Optional[str] = None) -> DetVSConfig:
        """Bundled defaults, shrunk for unit tests (tests/res/ini/tiny.ini).

        Args:
            run_dir: Run directory, e.g. a pytest tmp_path.
        """
        cfg = DetVSConfig(DetVSConfig.bundled_file("detvs.ini"))
        cfg.load_ini_file(cls.get_resource_path("ini", "tiny.ini"))
        if run_dir:
            cfg.set("detvs.run_dir", str(run_dir))
        return cfg

    @classmethod
    def tiny_experiment(cls, run_dir: str) -> ExperimentConfig:
        """Validated tiny experiment settings."""
        return ExperimentConfig.from_config(cls.tiny_config(run_dir))

    @classmethod
    def get_sample_sim(cls) -> SceneSim:
        """Scene simulator of the tiny configuration, without image noise."""
        if not cls._sample_sim:
            sim = SceneSim.from_config(cls.tiny_config())
            cls._sample_sim = sim.with_noise(NoiseConfig.off())
        return cls._sample_sim

    @classmethod
    def rng(cls, seed: int = 0) -> np.random.Generator:
        """Seeded random generator."""
        return np.random.default_rng(seed)

    @classmethod
    @contextlib.contextmanager
    def mock_env(
        cls, name: str, value: Optional[str]
    ) -> Generator[None, None, None]:
        """Temporarily set (or unset if None) an environment variable."""
        old = os.environ.get(name)
        try:
            if value is None:
                os.environ.pop(name, None)
            else:
                os.environ[name] = value
            yield
        finally:
            if old is None:
                os.environ.pop(name, None)
            else:
                os.environ[name] = old
