# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""Multi-perception-head mathematics.

A head bank partitions the operational distance range into confidence
intervals [mu - sigma, mu + sigma), one per perception head.
Each head outputs the distance vector amplified by its gain 1/mu,
and one confidence logit; confidences are a softmax across heads.

- Gaussian clipped weight (GCW): the distance loss weight of a head,
  1 within its interval, Gaussian decay outside, continuous everywhere
- combined loss: cross-entropy over head confidences plus
  k times the GCW-weighted L1 distance losses
- inference: select the most confident head, multiply its output by mu

Unit tests and examples: tests/test_detvs_mph.py
"""


from typing import Iterable, NamedTuple, Optional, Tuple, Union, overload

from dataclasses import dataclass
import math

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import softmax
import torch
import torch.nn.functional as F

from detvs.config import DetVSConfig
from detvs.errors import NonFiniteError, OutOfRangeError


@dataclass(frozen=True)
class PerceptionHeadSpec:
    """One perception head: confidence interval, GCW decay and gain."""

    name: str
    """Head name, e.g. "Head1"."""

    mu: float
    """Interval mean (m)."""

    sigma: float
    """Interval half-width, GCW standard deviation (m)."""

    alpha: float
    """GCW decay coefficient."""

    lo: float
    """Interval lower bound, inclusive (m)."""

    hi: float
    """Interval upper bound, exclusive (m)."""

    @classmethod
    def from_stats(
        cls, name: str, mu: float, sigma: float, alpha: float
    ) -> "PerceptionHeadSpec":
        """Head whose interval is [mu - sigma, mu + sigma)."""
        return cls(name, mu, sigma, alpha, mu - sigma, mu + sigma)

    def __post_init__(self) -> None:
        if not (self.mu > 0 and self.sigma > 0 and self.alpha > 0):
            raise ValueError(f"{self.name}: mu, sigma and alpha must be > 0")
        if not 0 <= self.lo < self.hi:
            raise ValueError(f"{self.name}: invalid interval")

    @property
    def gain(self) -> float:
        """Output gain (1/m)."""
        return 1.0 / self.mu

    def contains(self, x: float) -> bool:
        """Whether a distance norm lies in the confidence interval."""
        return self.lo <= x < self.hi


@overload
def gcw(head: PerceptionHeadSpec, x: float) -> float:
    ...


@overload
def gcw(
    head: PerceptionHeadSpec, x: NDArray[np.float64]
) -> NDArray[np.float64]:
    ...


def gcw(
    head: PerceptionHeadSpec, x: Union[float, NDArray[np.float64]]
) -> Union[float, NDArray[np.float64]]:
    """Gaussian clipped weight of a head at distance norm x.

        gcw(x) = min(exp(alpha^2 / 2) * exp(-(alpha (x - mu) / sigma)^2 / 2), 1)

    Equals 1 on [mu - sigma, mu + sigma], is continuous, strictly
    positive, and strictly decreasing in |x - mu| outside the interval.

    Args:
        head: The perception head.
        x: Distance norm(s) in meters, x >= 0.
    """
    z = (np.asarray(x, dtype=np.float64) - head.mu) / head.sigma
    # Single exponential: exact cancellation at the interval bounds.
    w = np.minimum(np.exp(0.5 * head.alpha**2 * (1.0 - z * z)), 1.0)
    if np.ndim(w) == 0:
        return float(w)
    return w


class HeadBank:
    """Ordered, interval-partitioning set of perception heads."""

    TABLE = (
        ("Head1", 0.008, 0.008, 1.6),
        ("Head2", 0.024, 0.008, 1.0),
        ("Head3", 0.048, 0.016, 1.0),
        ("Head4", 0.096, 0.032, 1.0),
    )
    """Default heads: name, mu (m), sigma (m), alpha."""

    _heads: Tuple[PerceptionHeadSpec, ...]
    _uniform: bool

    @classmethod
    def default(cls) -> "HeadBank":
        """The default four-head bank, covering [0, 0.128) m."""
        return cls(
            PerceptionHeadSpec.from_stats(name, mu, sigma, alpha)
            for name, mu, sigma, alpha in cls.TABLE
        )

    @classmethod
    def single(cls, gain: float = 20.0, upper: float = 0.128) -> "HeadBank":
        """Single-head bank (SPH ablation).

        One head with a fixed gain covering [0, upper),
        and a uniform distance loss weight.

        Args:
            gain: Output gain (1/m).
            upper: Operational range upper bound (m).
        """
        mu = 1.0 / gain
        head = PerceptionHeadSpec("SPH", mu, upper / 2.0, 1.0, 0.0, upper)
        return cls([head], uniform_weight=True)

    @classmethod
    def from_config(
        cls, cfg: DetVSConfig, variant: str = "mph"
    ) -> "HeadBank":
        """Head bank for a model variant.

        Args:
            cfg: Configuration ("heads.*" options).
            variant: "mph" for the multi-head bank, "sph" or "plain"
              for the single-head bank.

        Raises:
            DetVSConfig.Error: Invalid head options.
        """
        mus = cfg.getfloats("heads.mu")
        sigmas = cfg.getfloats("heads.sigma")
        alphas = cfg.getfloats("heads.alpha")
        if not len(mus) == len(sigmas) == len(alphas):
            raise DetVSConfig.Error("heads: mu, sigma and alpha lengths differ")
        try:
            bank = cls(
                PerceptionHeadSpec.from_stats(f"Head{i + 1}", mu, sigma, alpha)
                for i, (mu, sigma, alpha) in enumerate(zip(mus, sigmas, alphas))
            )
        except ValueError as e:
            raise DetVSConfig.Error(f"heads: {e}") from e
        if variant == "mph":
            return bank
        return cls.single(cfg.getfloat("heads.sph_gain"), bank.upper)

    def __init__(
        self,
        heads: Iterable[PerceptionHeadSpec],
        uniform_weight: bool = False,
    ) -> None:
        """Initialize bank.

        Args:
            heads: Heads ordered by distance.
            uniform_weight: If set, the distance loss weight of every head
              is 1 (no GCW).

        Raises:
            ValueError: Intervals do not partition [0, upper).
        """
        self._heads = tuple(heads)
        self._uniform = uniform_weight
        if not self._heads:
            raise ValueError("empty head bank")
        if not math.isclose(self._heads[0].lo, 0.0, abs_tol=1e-15):
            raise ValueError("head intervals must start at 0")
        for prev, head in zip(self._heads, self._heads[1:]):
            if not math.isclose(prev.hi, head.lo, rel_tol=1e-12):
                raise ValueError(f"{prev.name}, {head.name}: not contiguous")

    @property
    def heads(self) -> Tuple[PerceptionHeadSpec, ...]:
        """Heads ordered by distance."""
        return self._heads

    @property
    def n_heads(self) -> int:
        """Number of heads."""
        return len(self._heads)

    @property
    def uniform_weight(self) -> bool:
        """Whether GCW weighting is disabled."""
        return self._uniform

    @property
    def upper(self) -> float:
        """Operational range upper bound (m), exclusive."""
        return self._heads[-1].hi

    @property
    def mus(self) -> NDArray[np.float64]:
        """Head means (m)."""
        return np.array([h.mu for h in self._heads])

    def head_index(self, norm: float) -> int:
        """Index of the head whose interval contains a distance norm.

        Intervals are matched by upper bound, in order, so that
        contiguous bounds that differ by rounding never overlap.

        Raises:
            OutOfRangeError: Norm outside [0, upper).
        """
        if norm >= 0:
            for i, head in enumerate(self._heads):
                if norm < head.hi:
                    return i
        raise OutOfRangeError(
            f"distance {norm:.6f} m outside [0, {self.upper}) m"
        )

    def head_indices(self, norms: ArrayLike) -> NDArray[np.int64]:
        """Vectorized head_index.

        Raises:
            OutOfRangeError: A norm is outside [0, upper).
        """
        x = np.asarray(norms, dtype=np.float64)
        if np.any(x < 0) or np.any(x >= self.upper):
            raise OutOfRangeError(
                f"distances outside [0, {self.upper}) m"
            )
        his = np.array([h.hi for h in self._heads])
        return np.searchsorted(his, x, side="right").astype(np.int64)

    def weights(self, norms: ArrayLike) -> NDArray[np.float64]:
        """Distance loss weights, shape (*norms.shape, n_heads)."""
        x = np.asarray(norms, dtype=np.float64)
        if self._uniform:
            return np.ones((*x.shape, self.n_heads))
        return np.stack([gcw(head, x) for head in self._heads], axis=-1)

    def gcw_table(
        self, stop: float = 0.14, step: float = 0.0005
    ) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        """GCW samples over [0, stop] m.

        Returns:
            Distances, shape (N,), and weights, shape (N, n_heads).
        """
        xs = np.round(np.arange(0.0, stop + step / 2, step), 10)
        return xs, np.stack([gcw(h, xs) for h in self._heads], axis=-1)

    def __len__(self) -> int:
        return len(self._heads)


@dataclass(frozen=True)
class LossConfig:
    """Combined loss settings."""

    k: float = 1.0
    """Weight of the distance loss with respect to the confidence loss."""

    def __post_init__(self) -> None:
        if not self.k > 0:
            raise ValueError("k must be > 0")

    @classmethod
    def from_config(cls, cfg: DetVSConfig) -> "LossConfig":
        """Loss settings from the "loss.*" options."""
        try:
            return cls(cfg.getfloat("loss.k"))
        except ValueError as e:
            raise DetVSConfig.Error(f"loss: {e}") from e


class HeadOutputs(NamedTuple):
    """Network outputs for a batch."""

    distances: torch.Tensor
    """Amplified distance estimates, shape (B, n_heads, 3)."""

    logits: torch.Tensor
    """Confidence logits, shape (B, n_heads)."""


class LossTerms(NamedTuple):
    """Per-sample loss terms, shape (B,)."""

    confidence: torch.Tensor
    """Cross-entropy of the head confidences."""

    distance: torch.Tensor
    """k times the GCW-weighted L1 distance losses."""

    @property
    def total(self) -> torch.Tensor:
        """Per-sample combined loss."""
        return self.confidence + self.distance


def mph_loss_terms(
    pred: HeadOutputs,
    d_o: torch.Tensor,
    con_o: torch.Tensor,
    d_r_norm: torch.Tensor,
    bank: HeadBank,
    cfg: LossConfig,
) -> LossTerms:
    """Per-sample confidence and distance loss terms.

    Args:
        pred: Network outputs.
        d_o: Encoded distance targets, shape (B, n_heads, 3).
        con_o: One-hot confidence targets, shape (B, n_heads).
        d_r_norm: True distance norms (m), shape (B,).
        bank: The head bank.
        cfg: Loss settings.

    Raises:
        NonFiniteError: Non-finite inputs.
        ValueError: Head count mismatch.
    """
    if pred.logits.shape[-1] != bank.n_heads or d_o.shape[-2] != bank.n_heads:
        raise ValueError("head count does not match the head bank")
    for name, tensor in (
        ("distances", pred.distances),
        ("logits", pred.logits),
        ("d_o", d_o),
        ("d_r_norm", d_r_norm),
    ):
        if not bool(torch.isfinite(tensor).all()):
            raise NonFiniteError(f"non-finite loss input: {name}")

    confidence = F.cross_entropy(
        pred.logits, con_o.argmax(dim=-1), reduction="none"
    )
    weights = torch.as_tensor(
        bank.weights(d_r_norm.detach().cpu().numpy()),
        dtype=pred.distances.dtype,
        device=pred.distances.device,
    )
    l1 = (d_o - pred.distances).abs().sum(dim=-1)
    distance = cfg.k * (weights * l1).sum(dim=-1)
    return LossTerms(confidence, distance)


def mph_loss(
    pred: HeadOutputs,
    d_o: torch.Tensor,
    con_o: torch.Tensor,
    d_r_norm: torch.Tensor,
    bank: HeadBank,
    cfg: LossConfig,
) -> torch.Tensor:
    """Per-sample combined loss, shape (B,).

    CE(con_o, softmax(logits)) + k * sum_h gcw_h(|d_r|) * L1(d_o(h), pred(h))

    The batch mean (1/n factor) is left to the caller, see MPHLoss.
    """
    return mph_loss_terms(pred, d_o, con_o, d_r_norm, bank, cfg).total


class MPHLoss(torch.nn.Module):
    """Batch-mean combined loss."""

    def __init__(
        self, bank: HeadBank, cfg: Optional[LossConfig] = None
    ) -> None:
        super().__init__()
        self.bank = bank
        self.cfg = cfg or LossConfig()

    def forward(
        self,
        pred: HeadOutputs,
        d_o: torch.Tensor,
        con_o: torch.Tensor,
        d_r_norm: torch.Tensor,
    ) -> torch.Tensor:
        return mph_loss(pred, d_o, con_o, d_r_norm, self.bank, self.cfg).mean()


@dataclass(frozen=True)
class Decoded:
    """Head selection and decoded distance."""

    head: NDArray[np.int64]
    """Selected head index, shape (B,) or ()."""

    distance: NDArray[np.float64]
    """Decoded distance vector (m), shape (B, 3) or (3,)."""

    confidence: NDArray[np.float64]
    """Softmax confidences, shape (B, n_heads) or (n_heads,)."""


def select_and_decode(
    distances: ArrayLike, logits: ArrayLike, bank: HeadBank
) -> Decoded:
    """Select the most confident head and decode its distance output.

    Ties are resolved in favor of the lowest head index.

    Args:
        distances: Amplified outputs, shape (..., n_heads, 3).
        logits: Confidence logits, shape (..., n_heads).
        bank: The head bank.

    Raises:
        NonFiniteError: Non-finite logits.
    """
    dist = np.asarray(distances, dtype=np.float64)
    lg = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(lg)):
        raise NonFiniteError("non-finite confidence logits")
    conf = softmax(lg, axis=-1)
    head = np.argmax(conf, axis=-1)
    selected = np.take_along_axis(
        dist, head[..., np.newaxis, np.newaxis], axis=-2
    )[..., 0, :]
    return Decoded(head, bank.mus[head][..., np.newaxis] * selected, conf)
