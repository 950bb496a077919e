# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""Experiment orchestration.

Subcommand implementations behind the CLI:

- gen-data: measurement groups over the task tiers, dataset file
- train: one model variant, checkpoint and history CSV
- eval: seeded servo trials per estimator and tolerance tier, result table
- servo: servo trials with one estimator, per-trial trace CSVs
- gcw-table: GCW samples of the head bank
- degenerate: decoding of degenerate-geometry scenes

Every subcommand writes its artifacts to the run directory,
and records them in the run manifest ("manifest.yaml").

Unit tests and examples: tests/test_detvs_harness.py
"""


from typing import (
    Any,
    Callable,
    Dict,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
)

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata
import csv
import hashlib
import logging
import os

import numpy as np
import yaml

from detvs import __version__
from detvs.config import DetVSConfig
from detvs.controller import (
    DistanceEstimator,
    LearnedEstimator,
    OracleEstimator,
    ServoConfig,
    ServoResult,
    estimator_for,
    run_servo,
    sample_start,
)
from detvs.dataset import (
    Dataset,
    DatasetArrays,
    DatasetFile,
    generate_dataset,
    head_histogram,
)
from detvs.errors import OutOfViewError
from detvs.mph import HeadBank, LossConfig, select_and_decode
from detvs.model import (
    VARIANTS,
    CheckpointFile,
    EpochStats,
    Estimator,
    ModelConfig,
    TrainConfig,
    build_model,
    predict,
    train,
)
from detvs.rich.views import ResultTableView, render_text
from detvs.scene import SceneSim


_LOG = logging.getLogger(__name__)

Progress = Callable[[int], None]
"""Called with the number of completed work items."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment settings.

    Sub-configurations are built once at load time: an invalid option
    fails before any work starts.
    """

    cfg: DetVSConfig
    run_dir: str
    seed: int
    workers: int
    tiers: Tuple[str, ...]
    tolerances: Tuple[float, ...]
    """Success tolerances per tier, strictly decreasing (m)."""
    screw_radii: Tuple[float, ...]
    groups: int
    points_range: Tuple[int, int]
    trials: int
    loss: LossConfig
    train: TrainConfig
    model: ModelConfig
    servo: ServoConfig
    digest: str

    @classmethod
    def from_config(cls, cfg: DetVSConfig) -> "ExperimentConfig":
        """Validate a configuration.

        Raises:
            DetVSConfig.Error: Invalid or inconsistent options.
        """
        tiers = tuple(cfg.getstrs("harness.tiers"))
        tolerances = tuple(cfg.getfloats("harness.tolerance"))
        radii = tuple(cfg.getfloats("harness.screw_radius"))
        if not tiers or not len(tiers) == len(tolerances) == len(radii):
            raise DetVSConfig.Error(
                "harness: tiers, tolerance and screw_radius lengths differ"
            )
        if any(a <= b for a, b in zip(tolerances, tolerances[1:])):
            raise DetVSConfig.Error(
                "harness.tolerance: must be strictly decreasing"
            )
        if any(t <= 0 for t in tolerances) or any(r <= 0 for r in radii):
            raise DetVSConfig.Error("harness: tolerances and radii must be > 0")
        points = (
            cfg.getint("dataset.points_min"),
            cfg.getint("dataset.points_max"),
        )
        if not 0 < points[0] <= points[1]:
            raise DetVSConfig.Error(f"dataset: invalid points range {points}")
        groups = cfg.getint("dataset.groups")
        trials = cfg.getint("harness.trials")
        if groups < 0 or trials < 0:
            raise DetVSConfig.Error("dataset.groups and harness.trials: >= 0")

        # Fail early on invalid scene and bank options.
        SceneSim.from_config(cfg)
        bank = HeadBank.from_config(cfg, "mph")
        loss = LossConfig.from_config(cfg)
        train_cfg = TrainConfig.from_config(cfg)
        if not 0 <= train_cfg.validation_groups < max(groups, 1):
            raise DetVSConfig.Error(
                "train.validation_groups: must be in [0, dataset.groups)"
            )

        return cls(
            cfg,
            cfg.getstr("detvs.run_dir"),
            cfg.getint("detvs.seed"),
            max(cfg.getint("detvs.workers"), 1),
            tiers,
            tolerances,
            radii,
            groups,
            points,
            trials,
            loss,
            train_cfg,
            ModelConfig.from_config(cfg, bank.n_heads),
            ServoConfig.from_config(cfg, tolerances[0]),
            cfg.digest(),
        )

    def path(self, option: str, **kwargs: str) -> str:
        """Path of an artifact file option, relative to the run directory."""
        name = self.cfg.getstr(option).format(**kwargs)
        return os.path.join(self.run_dir, name)

    def sim(self) -> SceneSim:
        """Scene simulator."""
        return SceneSim.from_config(self.cfg)

    def bank(self, variant: str = "mph") -> HeadBank:
        """Head bank of a model variant."""
        return HeadBank.from_config(self.cfg, variant)

    def servo_config(self, tier: int) -> ServoConfig:
        """Loop settings with the success tolerance of a tier."""
        return ServoConfig.from_config(self.cfg, self.tolerances[tier])

    def tier_index(self, name: str) -> int:
        """Index of a tier by name.

        Raises:
            DetVSConfig.Error: Unknown tier.
        """
        try:
            return self.tiers.index(name)
        except ValueError as e:
            raise DetVSConfig.Error(f"unknown tier: {name}") from e


def sha256_file(path: str) -> str:
    """Hex SHA-256 of a file."""
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            sha.update(chunk)
    return sha.hexdigest()


def _versions() -> Dict[str, str]:
    versions = {"detvs": __version__}
    for dist in ("numpy", "scipy", "torch", "PyYAML", "rich"):
        try:
            versions[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            versions[dist] = "unknown"
    return versions


def write_manifest(
    xcfg: ExperimentConfig,
    subcommand: str,
    artifacts: Mapping[str, str],
    seeds: Optional[Mapping[str, Any]] = None,
) -> str:
    """Record a run in the run directory manifest.

    The manifest maps each subcommand to its last run:
    configuration digest, seeds, package versions and artifact digests.

    Args:
        xcfg: Experiment settings.
        subcommand: CLI subcommand.
        artifacts: SHA-256 digests by artifact path.
        seeds: Seeds of the run, defaults to the master seed.

    Returns:
        Path to the manifest.
    """
    path = os.path.join(xcfg.run_dir, "manifest.yaml")
    content: Dict[str, Any] = {}
    if os.path.isfile(path):
        with open(path, "r", encoding="utf-8") as f:
            try:
                content = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                _LOG.warning("ignoring corrupted manifest %s: %s", path, e)
    content[subcommand] = {
        "config_digest": xcfg.digest,
        "seeds": dict(seeds or {"seed": xcfg.seed}),
        "versions": _versions(),
        "artifacts": {
            os.path.relpath(p, xcfg.run_dir): sha
            for p, sha in artifacts.items()
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(content, f, sort_keys=True)
    _LOG.info("manifest: %s", path)
    return path


def _write_csv(path: str, header: Sequence[str], rows: List[List[str]]) -> str:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return sha256_file(path)


@dataclass(frozen=True)
class GenDataResult:
    """Dataset generation summary."""

    path: str
    sha256: str
    samples: int
    histogram: Tuple[int, ...]
    """Samples per head interval."""


def cmd_gen_data(
    xcfg: ExperimentConfig, progress: Optional[Progress] = None
) -> GenDataResult:
    """Collect the dataset and write it to the run directory.

    Raises:
        GroupAbortedError: Unreachable screw placement.
        DatasetFile.Error: I/O error.
    """
    os.makedirs(xcfg.run_dir, exist_ok=True)
    sim = xcfg.sim()
    bank = xcfg.bank("mph")
    done = 0

    def on_group(_: int) -> None:
        nonlocal done
        done += 1
        if progress:
            progress(done)

    samples = generate_dataset(
        sim,
        bank,
        xcfg.groups,
        xcfg.points_range,
        xcfg.screw_radii,
        xcfg.seed,
        workers=xcfg.workers,
        on_group=on_group,
    )
    shape = (
        xcfg.cfg.getint("scene.image_height"),
        xcfg.cfg.getint("scene.image_width"),
        xcfg.cfg.getint("scene.channels"),
    )
    dataset = Dataset(samples, xcfg.digest, shape)
    path = xcfg.path("dataset.file")
    sha = DatasetFile.write(path, dataset)
    hist = head_histogram(dataset.arrays().d_r, bank)
    write_manifest(xcfg, "gen-data", {path: sha})
    return GenDataResult(path, sha, len(dataset), tuple(int(n) for n in hist))


def load_arrays(xcfg: ExperimentConfig) -> DatasetArrays:
    """Dataset of the run directory, as arrays.

    Raises:
        DatasetFile.Error: Missing or invalid dataset file.
    """
    dataset = DatasetFile.read(xcfg.path("dataset.file"))
    if dataset.config_digest != xcfg.digest:
        _LOG.debug("dataset generated with another configuration")
    return dataset.arrays()


@dataclass(frozen=True)
class TrainResult:
    """Training summary."""

    variant: str
    checkpoint: str
    sha256: str
    history_path: str
    history: List[EpochStats]


def cmd_train(
    xcfg: ExperimentConfig,
    variant: str,
    progress: Optional[Progress] = None,
) -> TrainResult:
    """Train a model variant on the run directory dataset.

    Raises:
        DatasetFile.Error: Missing or invalid dataset.
        TrainingDivergedError: Non-finite loss.
        ValueError: Unknown variant, empty dataset.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown model variant: {variant}")
    arrays = load_arrays(xcfg)
    bank = xcfg.bank(variant)
    model = build_model(xcfg.model, variant, xcfg.seed)

    def on_epoch(stats: EpochStats) -> None:
        if progress:
            progress(stats.epoch)

    history = train(
        model, arrays, bank, xcfg.loss, xcfg.train, xcfg.seed, on_epoch
    )
    history_path = xcfg.path("train.history", variant=variant)
    hist_sha = _write_csv(
        history_path,
        EpochStats.HEADER,
        [
            [
                str(s.epoch),
                repr(s.loss),
                repr(s.distance_loss),
                repr(s.confidence_loss),
                repr(s.close_range_error),
            ]
            for s in history
        ],
    )
    ckpt = xcfg.path("train.checkpoint", variant=variant)
    sha = CheckpointFile.write(
        ckpt,
        model,
        variant,
        {"seed": xcfg.seed, "epochs": len(history), "config": xcfg.digest},
    )
    write_manifest(
        xcfg, f"train-{variant}", {ckpt: sha, history_path: hist_sha}
    )
    return TrainResult(variant, ckpt, sha, history_path, history)


def load_estimator(
    xcfg: ExperimentConfig, path: str
) -> Tuple[Estimator, HeadBank, str]:
    """Model, head bank and variant of a checkpoint.

    Raises:
        CheckpointFile.Error: Missing or invalid checkpoint.
    """
    ckpt = CheckpointFile.read(path)
    return ckpt.build(), xcfg.bank(ckpt.variant), ckpt.variant


@dataclass(frozen=True)
class ResultRow:
    """Trials of one estimator at one tolerance tier."""

    estimator: str
    tier: str
    tolerance: float
    trials: int
    successes: int
    ce_mean: float
    """Mean final error over all trials (m), NaN if no trial."""
    ce_std: float

    HEADER = (
        "estimator",
        "tier",
        "tolerance",
        "trials",
        "success_rate",
        "ce_mean",
        "ce_std",
    )

    @classmethod
    def from_results(
        cls,
        estimator: str,
        tier: str,
        tolerance: float,
        results: Sequence[ServoResult],
    ) -> "ResultRow":
        """Aggregate trial outcomes."""
        errors = np.array([r.final_error for r in results])
        nan = float("nan")
        return cls(
            estimator,
            tier,
            tolerance,
            len(results),
            sum(r.success for r in results),
            float(errors.mean()) if len(errors) else nan,
            float(errors.std()) if len(errors) else nan,
        )

    @property
    def success_rate(self) -> float:
        """Fraction of successful trials, NaN if no trial."""
        return self.successes / self.trials if self.trials else float("nan")

    def to_csv(self) -> List[str]:
        """CSV row."""
        return [
            self.estimator,
            self.tier,
            repr(self.tolerance),
            str(self.trials),
            repr(self.success_rate),
            repr(self.ce_mean),
            repr(self.ce_std),
        ]


@dataclass
class ResultTable:
    """Success rate and convergence error per estimator and tier."""

    rows: List[ResultRow] = field(default_factory=list)

    def row(self, estimator: str, tier: str) -> ResultRow:
        """Row of an estimator and tier.

        Raises:
            KeyError: No such row.
        """
        for r in self.rows:
            if (r.estimator, r.tier) == (estimator, tier):
                return r
        raise KeyError((estimator, tier))

    def write_csv(self, path: str) -> str:
        """Write the table as CSV, answer the file digest."""
        return _write_csv(
            path, ResultRow.HEADER, [r.to_csv() for r in self.rows]
        )


def trial_rng(seed: int, tier: int, trial: int) -> np.random.Generator:
    """Random generator of one trial.

    Trial starts depend on the seed, tier and trial index only:
    every estimator faces the same starts.
    """
    return np.random.default_rng([seed, tier, trial])


def _run_trial(
    sim: SceneSim,
    estimator: DistanceEstimator,
    cfg: ServoConfig,
    screw_radius: float,
    distance_range: Tuple[float, float],
    seed: Tuple[int, int, int],
) -> ServoResult:
    rng = trial_rng(*seed)
    start = sample_start(sim, rng, screw_radius, distance_range)
    return run_servo(sim, sim.chain, estimator, cfg, rng, start)


def run_trials(
    xcfg: ExperimentConfig,
    sim: SceneSim,
    estimator: DistanceEstimator,
    tier: int,
    trials: int,
    progress: Optional[Progress] = None,
) -> List[ServoResult]:
    """Seeded servo trials at a tolerance tier.

    Initial tool distances are drawn in the interval of the farthest head.

    Raises:
        GroupAbortedError: No valid trial start.
    """
    bank = xcfg.bank("mph")
    far = bank.heads[-1]
    args = (
        sim,
        estimator,
        xcfg.servo_config(tier),
        xcfg.screw_radii[tier],
        (far.lo, far.hi),
    )
    seeds = [(xcfg.seed, tier, i) for i in range(trials)]
    results: List[ServoResult] = []
    if xcfg.workers > 1 and trials > 1:
        with ProcessPoolExecutor(max_workers=xcfg.workers) as pool:
            futures = [pool.submit(_run_trial, *args, s) for s in seeds]
            for future in futures:
                results.append(future.result())
                if progress:
                    progress(len(results))
    else:
        for s in seeds:
            results.append(_run_trial(*args, s))
            if progress:
                progress(len(results))
    return results


def cmd_eval(
    xcfg: ExperimentConfig,
    checkpoints: Sequence[str],
    trials: Optional[int] = None,
    oracle: bool = True,
    progress: Optional[Progress] = None,
) -> ResultTable:
    """Servo trials per estimator and tier, result table.

    Writes the table as CSV and aligned text to the run directory.

    Args:
        xcfg: Experiment settings.
        checkpoints: Checkpoint paths of the evaluated variants.
        trials: Trials per estimator and tier, defaults to harness.trials.
        oracle: Whether to add the oracle estimator row.
        progress: Called with the number of completed trials.

    Raises:
        CheckpointFile.Error: Missing or invalid checkpoint.
    """
    n_trials = xcfg.trials if trials is None else trials
    if n_trials < 0:
        raise ValueError(f"invalid trial count: {n_trials}")
    estimators: List[DistanceEstimator] = [OracleEstimator()] if oracle else []
    for path in checkpoints:
        model, bank, variant = load_estimator(xcfg, path)
        estimators.append(LearnedEstimator(model, bank, variant))

    table = ResultTable()
    if n_trials > 0:
        sim = xcfg.sim()
        done = 0
        for estimator in estimators:
            for tier, name in enumerate(xcfg.tiers):

                def on_trial(n: int) -> None:
                    if progress:
                        progress(done + n)

                results = run_trials(
                    xcfg, sim, estimator, tier, n_trials, on_trial
                )
                done += len(results)
                row = ResultRow.from_results(
                    estimator.name, name, xcfg.tolerances[tier], results
                )
                _LOG.info(
                    "%s/%s: SR %.3f, CE %.6f m",
                    row.estimator,
                    row.tier,
                    row.success_rate,
                    row.ce_mean,
                )
                table.rows.append(row)

    os.makedirs(xcfg.run_dir, exist_ok=True)
    csv_path = xcfg.path("harness.results")
    txt_path = os.path.splitext(csv_path)[0] + ".txt"
    artifacts = {csv_path: table.write_csv(csv_path)}
    with open(txt_path, "w", encoding="utf-8") as f:
        f.write(render_text(ResultTableView(table)))
    artifacts[txt_path] = sha256_file(txt_path)
    write_manifest(
        xcfg,
        "eval",
        artifacts,
        {"seed": xcfg.seed, "trials": n_trials},
    )
    return table


@dataclass(frozen=True)
class ServoRunResult:
    """Trials of the servo subcommand."""

    estimator: str
    tier: str
    tolerance: float
    results: List[ServoResult]
    traces: List[str]
    """Trace CSV paths, one per trial."""


def cmd_servo(
    xcfg: ExperimentConfig,
    estimator_name: str,
    checkpoint: Optional[str] = None,
    trials: Optional[int] = None,
    tier: Optional[str] = None,
    progress: Optional[Progress] = None,
) -> ServoRunResult:
    """Servo trials with one estimator, and their traces.

    Args:
        xcfg: Experiment settings.
        estimator_name: "oracle", "noisy-oracle", or "model".
        checkpoint: Checkpoint path of the "model" estimator.
        trials: Trial count, defaults to harness.trials.
        tier: Tolerance tier name, defaults to the first tier.
        progress: Called with the number of completed trials.

    Raises:
        CheckpointFile.Error: Missing or invalid checkpoint.
        ValueError: Model estimator without checkpoint.
    """
    n_trials = xcfg.trials if trials is None else trials
    tier_idx = xcfg.tier_index(tier) if tier else 0
    if estimator_name == "model":
        if not checkpoint:
            raise ValueError("model estimator without checkpoint")
        model, bank, variant = load_estimator(xcfg, checkpoint)
        estimator = estimator_for(variant, xcfg.cfg, model, bank)
    else:
        estimator = estimator_for(estimator_name, xcfg.cfg)

    results = run_trials(
        xcfg, xcfg.sim(), estimator, tier_idx, n_trials, progress
    )
    trace_dir = os.path.join(xcfg.run_dir, "servo", estimator.name)
    os.makedirs(trace_dir, exist_ok=True)
    traces: List[str] = []
    artifacts: Dict[str, str] = {}
    for i, res in enumerate(results):
        path = os.path.join(trace_dir, f"trial-{i:03d}.csv")
        artifacts[path] = _write_csv(path, res.trace.header(), res.trace.rows())
        traces.append(path)
    write_manifest(
        xcfg,
        f"servo-{estimator.name}",
        artifacts,
        {"seed": xcfg.seed, "trials": n_trials},
    )
    return ServoRunResult(
        estimator.name,
        xcfg.tiers[tier_idx],
        xcfg.tolerances[tier_idx],
        results,
        traces,
    )


def cmd_gcw_table(xcfg: ExperimentConfig) -> str:
    """GCW samples of the head bank over [0, 0.14] m, as CSV.

    Returns:
        Path to the CSV file.
    """
    bank = xcfg.bank("mph")
    xs, weights = bank.gcw_table()
    os.makedirs(xcfg.run_dir, exist_ok=True)
    path = xcfg.path("harness.gcw_table")
    sha = _write_csv(
        path,
        ["x"] + [h.name for h in bank.heads],
        [
            [repr(float(x))] + [repr(float(w)) for w in row]
            for x, row in zip(xs, weights)
        ],
    )
    write_manifest(xcfg, "gcw-table", {path: sha})
    return path


@dataclass(frozen=True)
class DegenerateResult:
    """Decoding of degenerate-geometry scenes."""

    instances: int
    successes: int
    errors: Tuple[float, ...]
    """Decoding error per instance (m), inf if features were out of view."""
    tolerance: float

    @property
    def success_rate(self) -> float:
        """Fraction of instances decoded within tolerance."""
        if not self.instances:
            return float("nan")
        return self.successes / self.instances


def cmd_degenerate(
    xcfg: ExperimentConfig,
    checkpoint: str,
    instances: Optional[int] = None,
) -> DegenerateResult:
    """Decode scenes with the tool tip on the head camera line of sight.

    An instance succeeds when the decoding error is below the coarse
    tolerance.

    Raises:
        CheckpointFile.Error: Missing or invalid checkpoint.
        GroupAbortedError: Unreachable screw placement.
    """
    n = instances
    if n is None:
        n = xcfg.cfg.getint("harness.degenerate_instances")
    offset = xcfg.cfg.getfloat("harness.degenerate_offset")
    model, bank, _ = load_estimator(xcfg, checkpoint)
    os.makedirs(xcfg.run_dir, exist_ok=True)
    sim = xcfg.sim()
    tolerance = xcfg.tolerances[0]
    errors: List[float] = []
    for i in range(n):
        rng = np.random.default_rng([xcfg.seed, 0xDE6, i])
        task = sim.sample_task(rng, xcfg.screw_radii[0])
        yaw, pitch = sim.random_head_angles(rng)
        state = sim.degenerate_state(task, offset, yaw, pitch)
        try:
            obs = sim.render(state, rng)
        except OutOfViewError as e:
            _LOG.debug("degenerate instance %d: %s", i, e)
            errors.append(float("inf"))
            continue
        out = predict(model, obs)
        dec = select_and_decode(
            out.distances.double().numpy(), out.logits.double().numpy(), bank
        )
        errors.append(float(np.linalg.norm(dec.distance - state.distance)))

    result = DegenerateResult(
        n, sum(e < tolerance for e in errors), tuple(errors), tolerance
    )
    write_manifest(
        xcfg, "degenerate", {}, {"seed": xcfg.seed, "instances": n}
    )
    return result
