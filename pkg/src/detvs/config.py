# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""DetVS configuration.

DetVS is configured by simple INI files named "detvs.ini":

- the bundled configuration file which sets the default configuration
  and documents every option (type, unit, default)
- an optional user's configuration file which customizes the defaults

Options are addressed with dotted names, "section.key":
e.g. "scene.image_width" is the key "image_width" of the section "[scene]".

Unlike preferences that may safely fall back to a default value,
experiment parameters must be valid: getters without an explicit
fallback raise DetVSConfig.Error for missing or invalid options.

Unit tests and examples: tests/test_detvs_config.py
"""


from typing import Optional, List, Tuple, TypeVar

import configparser
import hashlib
import logging
import os
import shutil
import sys


_LOG = logging.getLogger(__name__)

_T = TypeVar("_T")


class DetVSConfig:
    """DetVS configuration and application data."""

    class Error(BaseException):
        """Error loading configuration file or accessing an option."""

    @classmethod
    def getinstance(cls) -> "DetVSConfig":
        """Access the configuration instance."""
        return _detvsconf

    # Parsed configuration.
    _cfg: configparser.ConfigParser

    # Path to the per-user DetVS configuration directory.
    _app_dir: str

    # Paths of the successfully loaded files, in load order.
    _sources: List[str]

    def __init__(self, path: Optional[str] = None) -> None:
        """Initialize DetVS configuration.

        If a configuration path is explicitly set,
        only this configuration file is loaded.

        Otherwise, proceed to default configuration initialization:

        - 1st, load bundled default configuration file
        - then, load user's configuration file to customize defaults

        Args:
            path: Path to configuration file,
              or None for default configuration initialization.

        Raises:
            DetVSConfig.Error: Failed to read or parse the unique
              configuration file.
        """
        self._app_dir = self._init_app_dir()
        self._sources = []
        self._cfg = configparser.ConfigParser(
            interpolation=configparser.ExtendedInterpolation()
        )

        if path:
            self.load_ini_file(path, fail_early=True)
        else:
            self.load_ini_file(self.bundled_file("detvs.ini"), fail_early=True)
            path = self.get_user_file("detvs.ini")
            if os.path.isfile(path):
                self.load_ini_file(path, fail_early=False)

    @staticmethod
    def bundled_file(*paths: str) -> str:
        """Get path to a resource file bundled with the package.

        Args:
            paths: Path components relative to the package directory.
        """
        return os.path.join(os.path.dirname(os.path.abspath(__file__)), *paths)

    @property
    def app_dir(self) -> str:
        r"""Path to the per-user DetVS configuration directory.

        Location is platform-dependent:

        - POSIX: "$XDG_CONFIG_HOME/detvs", or "~/.config/detvs"
        - Windows: "%LOCALAPPDATA%\DetVS"
        - macOS: "~/Library/DetVS"

        The directory is not granted to exist.
        """
        return self._app_dir

    @property
    def sources(self) -> List[str]:
        """Configuration files loaded so far, in load order."""
        return list(self._sources)

    def init_user_files(self) -> int:
        """Initialize per-user configuration files.

        Returns:
            Zero on success, a negative errno value otherwise.
        """
        dst = self._app_dir
        try:
            os.makedirs(self._app_dir, mode=0o750, exist_ok=True)
            for src in (
                self.bundled_file("detvs.ini"),
                self.bundled_file("rich", "theme.ini"),
            ):
                dst = self.get_user_file(os.path.basename(src))
                if os.path.exists(dst):
                    _LOG.warning("File exists, skipped: %s", dst)
                else:
                    shutil.copyfile(src, dst)
                    _LOG.info("User file: %s", dst)
            return 0

        except OSError as e:
            _LOG.error("Failed to create file: %s (%s)", dst, e.strerror)
            return -(e.errno or 1)

    def get_user_file(self, *paths: str) -> str:
        """Get path to a user file within the DetVS application directory.

        Args:
            paths: Relative path to the resource.
        """
        return os.path.join(self._app_dir, *paths)

    def has_option(self, option: str) -> bool:
        """Whether a dotted option is defined."""
        section, key = self._split(option)
        return self._cfg.has_option(section, key)

    def getbool(self, option: str, fallback: Optional[bool] = None) -> bool:
        """Access a configuration option's value as a boolean.

        Boolean:
        - True: '1', 'yes', 'true', and 'on'
        - False: '0', 'no', 'false', and 'off'

        Args:
            option: The option's dotted name.
            fallback: If set, represents the fall-back value
              for an undefined option or an invalid value.

        Returns:
            The option's value as a boolean.

        Raises:
            DetVSConfig.Error: Undefined or invalid option, and no fallback.
        """
        section, key = self._split(option)
        try:
            return self._cfg.getboolean(section, key)
        except (configparser.Error, ValueError) as e:
            return self._fallback(option, e, fallback)

    def getint(self, option: str, fallback: Optional[int] = None) -> int:
        """Access a configuration option's value as an integer.

        Integers:

        - base-2, -8, -10 and -16 are supported
        - if not base 10, the actual base is determined
          by the prefix "0b/0B" (base-2), "0o/0O" (base-8),
          or "0x/0X" (base-16)

        Args:
            option: The option's dotted name.
            fallback: If set, represents the fall-back value
              for an undefined option or an invalid value.

        Returns:
            The option's value as an integer.

        Raises:
            DetVSConfig.Error: Undefined or invalid option, and no fallback.
        """
        section, key = self._split(option)
        try:
            return int(self._cfg.get(section, key), base=0)
        except (configparser.Error, ValueError) as e:
            return self._fallback(option, e, fallback)

    def getfloat(self, option: str, fallback: Optional[float] = None) -> float:
        """Access a configuration option's value as float.

        Args:
            option: The option's dotted name.
            fallback: If set, represents the fall-back value
              for an undefined option or an invalid value.

        Returns:
            The option's value as a float.

        Raises:
            DetVSConfig.Error: Undefined or invalid option, and no fallback.
        """
        section, key = self._split(option)
        try:
            return float(self._cfg.get(section, key))
        except (configparser.Error, ValueError) as e:
            return self._fallback(option, e, fallback)

    def getfloats(
        self, option: str, fallback: Optional[Tuple[float, ...]] = None
    ) -> Tuple[float, ...]:
        """Access a configuration option's value as a list of floats.

        Values are comma-separated, e.g. "0.4, 0.0, 0.0".

        Args:
            option: The option's dotted name.
            fallback: If set, represents the fall-back value
              for an undefined option or an invalid value.

        Returns:
            The option's values.

        Raises:
            DetVSConfig.Error: Undefined or invalid option, and no fallback.
        """
        section, key = self._split(option)
        try:
            return tuple(
                float(tok) for tok in self._cfg.get(section, key).split(",")
            )
        except (configparser.Error, ValueError) as e:
            return self._fallback(option, e, fallback)

    def getstrs(
        self, option: str, fallback: Optional[Tuple[str, ...]] = None
    ) -> Tuple[str, ...]:
        """Access a configuration option's value as a list of strings.

        Values are comma-separated, surrounding spaces are stripped.

        Args:
            option: The option's dotted name.
            fallback: If set, represents the fall-back value
              for an undefined option or an invalid value.

        Returns:
            The option's values.

        Raises:
            DetVSConfig.Error: Undefined or invalid option, and no fallback.
        """
        section, key = self._split(option)
        try:
            val = self._cfg.get(section, key).strip('"')
        except configparser.Error as e:
            return self._fallback(option, e, fallback)
        return tuple(tok.strip() for tok in val.split(",") if tok.strip())

    def getstr(self, option: str, fallback: Optional[str] = None) -> str:
        """Access a configuration option's value as a string.

        Double-quotes are optional, and stripped.
        Multi-line values are joined with spaces.

        Args:
            option: The option's dotted name.
            fallback: If set, represents the fall-back value
              for an undefined option or an invalid value.

        Returns:
            The option's value as a string.

        Raises:
            DetVSConfig.Error: Undefined option, and no fallback.
        """
        section, key = self._split(option)
        try:
            val = self._cfg.get(section, key).strip('"')
            return val.replace("\n", " ")
        except configparser.Error as e:
            return self._fallback(option, e, fallback)

    def set(self, option: str, value: str) -> None:
        """Set an option's value (e.g. CLI overrides such as "--seed").

        Args:
            option: The option's dotted name.
            value: The option's value as it would appear in an INI file.
        """
        section, key = self._split(option)
        if not self._cfg.has_section(section):
            self._cfg.add_section(section)
        self._cfg.set(section, key, value)

    def digest(self) -> str:
        """SHA-256 of the canonical option dump.

        Options are interpolated and sorted by section and key,
        so that two configurations with the same effective values
        have the same digest, whatever their layout or comments.
        """
        sha = hashlib.sha256()
        for section in sorted(self._cfg.sections()):
            for key in sorted(self._cfg.options(section)):
                val = self._cfg.get(section, key).strip('"')
                sha.update(f"{section}.{key}={val}\n".encode("utf-8"))
        return sha.hexdigest()

    def load_ini_file(self, path: str, fail_early: bool = True) -> None:
        """Load options from configuration file (INI format).

        Overrides already loaded values with the same keys.

        Args:
            path: Path to a configuration file.
            fail_early: If set, fault when we can't open the file for reading,
              or its content is invalid. This is the default.

        Raises:
            DetVSConfig.Error: Failed to load configuration file.
        """
        try:
            with open(path, "r", encoding="utf-8") as f:
                self._cfg.read_file(f)
            self._sources.append(os.path.abspath(path))

        except (OSError, configparser.Error) as e:
            if isinstance(e, OSError):
                msg = f"{path}: {e.strerror}"
            else:
                msg = e.message
            if fail_early:
                raise DetVSConfig.Error(msg) from e
            _LOG.warning("Failed to load configuration file: %s", msg)

    @staticmethod
    def _split(option: str) -> Tuple[str, str]:
        section, sep, key = option.partition(".")
        if not sep:
            raise DetVSConfig.Error(f"not a dotted option name: {option}")
        return section, key

    @staticmethod
    def _fallback(option: str, cause: Exception, fallback: Optional[_T]) -> _T:
        if fallback is None:
            raise DetVSConfig.Error(f"{option}: {cause}") from cause
        _LOG.warning("configuration error: %s: %s", option, cause)
        return fallback

    @staticmethod
    def _init_app_dir() -> str:
        if sys.platform == "darwin":
            return os.path.abspath(
                os.path.join(os.path.expanduser("~"), "Library", "DetVS")
            )
        if os.name == "nt":
            local_app_data = os.environ.get(
                "LOCALAPPDATA",
                os.path.join(os.path.expanduser("~"), "AppData", "Local"),
            )
            return os.path.abspath(os.path.join(local_app_data, "DetVS"))
        xdg_cfg_home = os.environ.get(
            "XDG_CONFIG_HOME",
            os.path.join(os.path.expanduser("~"), ".config"),
        )
        return os.path.abspath(os.path.join(xdg_cfg_home, "detvs"))


_detvsconf = DetVSConfig()
