# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""Unit tests for the detvs.config module."""

# Relax pylint a bit for unit tests.
# pylint: disable=missing-function-docstring


from pathlib import Path
import os

import pytest

from detvs.config import DetVSConfig

from .detvs_uthelpers import DetVSTests


def test_detvsconfig_load_ini_file() -> None:
    # 1. Initialize configuration with a single file.
    cfg = DetVSConfig(DetVSTests.get_resource_path("ini", "test.ini"))
    assert cfg.getstr("test.string") == "a string"
    assert not cfg.has_option("not.an_option")
    # 2. Load user's specific configuration (overrides defaults).
    cfg.load_ini_file(DetVSTests.get_resource_path("ini", "override.ini"))
    assert cfg.getstr("test.string") == "overridden"
    assert cfg.getstr("test.new") == "new"
    assert len(cfg.sources) == 2

    # Should not fault.
    cfg.load_ini_file("not/a/config/file.ini", fail_early=False)
    assert len(cfg.sources) == 2

    with pytest.raises(DetVSConfig.Error):
        cfg.load_ini_file("not/a/config/file.ini")


def test_detvsconfig_getbool() -> None:
    cfg = DetVSConfig(DetVSTests.get_resource_path("ini", "test.ini"))

    assert cfg.getbool("test.true")
    assert not cfg.getbool("test.false")
    # Invalid values fall back when asked to.
    assert cfg.getbool("test.bool.inval", True)
    assert cfg.getbool("undefined.option", True)
    with pytest.raises(DetVSConfig.Error):
        cfg.getbool("test.bool.inval")


def test_detvsconfig_getint() -> None:
    cfg = DetVSConfig(DetVSTests.get_resource_path("ini", "test.ini"))

    assert cfg.getint("test.int") == 255
    assert cfg.getint("test.hex") == 0xFF
    assert cfg.getint("test.int.inval", -1) == -1
    with pytest.raises(DetVSConfig.Error):
        cfg.getint("test.int.inval")
    with pytest.raises(DetVSConfig.Error):
        cfg.getint("undefined.option")


def test_detvsconfig_getfloat() -> None:
    cfg = DetVSConfig(DetVSTests.get_resource_path("ini", "test.ini"))

    assert cfg.getfloat("test.float") == 0.5
    assert cfg.getfloat("test.float.sci") == 1e-3
    assert cfg.getfloats("test.floats") == (0.4, 0.0, -0.1)
    assert cfg.getfloats("test.floats.inval", (1.0,)) == (1.0,)
    with pytest.raises(DetVSConfig.Error):
        cfg.getfloats("test.floats.inval")
    # Empty values are invalid floats.
    with pytest.raises(DetVSConfig.Error):
        cfg.getfloat("test.novalue")


def test_detvsconfig_getstr() -> None:
    cfg = DetVSConfig(DetVSTests.get_resource_path("ini", "test.ini"))

    assert cfg.getstr("test.string") == "a string"
    assert cfg.getstr("test.string.quoted") == "quoted string "
    assert cfg.getstr("test.string.unicode") == "❯"
    assert cfg.getstrs("test.strings") == ("coarse", "medium", "fine")
    assert cfg.getstr("undefined.option", "any") == "any"
    # Empty values map to empty strings.
    assert cfg.getstr("test.novalue") == ""
    with pytest.raises(DetVSConfig.Error):
        cfg.getstr("undefined.option")
    # Option names are dotted.
    with pytest.raises(DetVSConfig.Error):
        cfg.getstr("nodot")


def test_detvsconfig_interpolation() -> None:
    cfg = DetVSConfig(DetVSTests.get_resource_path("ini", "test.ini"))
    assert cfg.getstr("test.interpolation") == "hello world"
    assert cfg.getstr("test.cross") == "cross-section interpolation"


def test_detvsconfig_set() -> None:
    cfg = DetVSConfig(DetVSTests.get_resource_path("ini", "test.ini"))
    cfg.set("test.int", "42")
    assert cfg.getint("test.int") == 42
    cfg.set("new.option", "value")
    assert cfg.getstr("new.option") == "value"


def test_detvsconfig_digest() -> None:
    cfg1 = DetVSConfig(DetVSTests.get_resource_path("ini", "test.ini"))
    cfg2 = DetVSConfig(DetVSTests.get_resource_path("ini", "test.ini"))
    assert cfg1.digest() == cfg2.digest()
    assert len(cfg1.digest()) == 64

    # Setting an option to its current value does not change the digest.
    cfg2.set("test.int", "255")
    assert cfg1.digest() == cfg2.digest()

    cfg2.set("test.int", "254")
    assert cfg1.digest() != cfg2.digest()


def test_detvsconfig_user_files(tmp_path: Path) -> None:
    with DetVSTests.mock_env("XDG_CONFIG_HOME", str(tmp_path)):
        cfg = DetVSConfig(DetVSConfig.bundled_file("detvs.ini"))
        if os.name == "posix" and cfg.app_dir.startswith(str(tmp_path)):
            assert cfg.init_user_files() == 0
            assert os.path.isfile(cfg.get_user_file("detvs.ini"))
            assert os.path.isfile(cfg.get_user_file("theme.ini"))
            # Existing files are not overwritten.
            assert cfg.init_user_files() == 0


def test_detvsconfig_defaults() -> None:
    detvs_ini = os.path.abspath(
        os.path.join(
            os.path.dirname(__file__), "..", "src", "detvs", "detvs.ini"
        )
    )
    assert os.path.isfile(detvs_ini)
    cfg = DetVSConfig(detvs_ini)

    assert cfg.getint("detvs.seed") == 0
    assert cfg.getint("detvs.workers") == 1
    assert cfg.getstr("kinematics.arm_chain") == "arm7.yaml"

    # Head bank.
    assert cfg.getfloats("heads.mu") == (0.008, 0.024, 0.048, 0.096)
    assert cfg.getfloats("heads.sigma") == (0.008, 0.008, 0.016, 0.032)
    assert cfg.getfloats("heads.alpha") == (1.6, 1.0, 1.0, 1.0)

    # Image noise within its documented ranges.
    assert 0 <= cfg.getfloat("scene.noise_sigma") <= 0.05
    assert 0 <= cfg.getint("scene.distractors") <= 3
    assert cfg.getint("scene.encoder_bits") == 0

    # Servo loop.
    assert cfg.getfloat("servo.estimate_rate") == 10
    assert cfg.getfloat("servo.control_rate") == 50
    assert cfg.getfloat("servo.kp") == 2.0

    # Tolerance tiers.
    assert cfg.getstrs("harness.tiers") == ("coarse", "medium", "fine")
    assert cfg.getfloats("harness.tolerance") == (0.002, 0.0015, 0.001)
    assert cfg.getint("harness.trials") == 100

    # Artifact names.
    assert cfg.getstr("train.checkpoint").format(variant="mph") == "mph.ckpt"
