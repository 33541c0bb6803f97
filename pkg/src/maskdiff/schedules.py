"""Noise schedules for continuous-time masked diffusion.

Every schedule is a quantile map: draw ``t ~ U(0, 1)`` and the masking rate
``1 - alpha_t`` is ``Q(t)``. Deterministic schedules (linear, cosine) are
closed forms; the Gaussian schedules use the normal or mixture quantile.
For those, ``|d alpha_t / dt|`` follows from the inverse-function rule,
``1 / pdf(Q(t))``.

``tau`` is training progress, the fraction of training completed, in [0, 1].
Only the bimodal schedule depends on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import ClassVar, Union

import numpy as np
from scipy.special import ndtr, ndtri

ArrayLike = Union[float, np.ndarray]

DEFAULT_CLAMP_EPS = 1e-4
BISECTION_TOL = 1e-10
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ScheduleDomainError(ValueError):
    pass


def _normal_pdf(x, mean, std):
    z = (x - mean) / std
    return _INV_SQRT_2PI / std * np.exp(-0.5 * z * z)


def _check_domain(t, tau):
    t = np.asarray(t, dtype=np.float64)
    if not np.all((t > 0.0) & (t < 1.0)):
        raise ScheduleDomainError(f"t must lie in the open interval (0, 1), got {t}")
    if not (0.0 <= tau <= 1.0):
        raise ScheduleDomainError(f"tau must lie in [0, 1], got {tau}")
    return t


def _unwrap(x: np.ndarray, like) -> ArrayLike:
    return float(x) if np.ndim(like) == 0 else x


@dataclass(frozen=True)
class Schedule:
    """Base class. Subclasses provide the raw quantile and derivative."""

    clamp_eps: float = field(default=DEFAULT_CLAMP_EPS, kw_only=True)

    name: ClassVar[str] = "base"

    def __post_init__(self):
        if not (0.0 < self.clamp_eps <= 0.01):
            raise ValueError(f"clamp_eps must be in (0, 0.01], got {self.clamp_eps}")

    # -- subclass hooks (vectorised, no domain checks) -----------------------
    def _quantile(self, t: np.ndarray, tau: float) -> np.ndarray:
        raise NotImplementedError

    def _alpha_prime(self, t: np.ndarray, rate: np.ndarray, tau: float) -> np.ndarray:
        raise NotImplementedError

    def _time_for_rate(self, rate: np.ndarray, tau: float) -> np.ndarray:
        raise NotImplementedError

    # -- public API -----------------------------------------------------------
    def masking_rate(self, t: ArrayLike, tau: float = 0.0) -> ArrayLike:
        """Return ``1 - alpha_t``, clamped into ``[eps, 1 - eps]``."""
        tt = _check_domain(t, tau)
        rate = np.clip(self._quantile(tt, tau), self.clamp_eps, 1.0 - self.clamp_eps)
        return _unwrap(rate, t)

    def alpha_prime_magnitude(self, t: ArrayLike, tau: float = 0.0) -> ArrayLike:
        """Return ``|d alpha_t / dt|`` at ``t``."""
        tt = _check_domain(t, tau)
        rate = np.clip(self._quantile(tt, tau), self.clamp_eps, 1.0 - self.clamp_eps)
        return _unwrap(self._alpha_prime(tt, rate, tau), t)

    def time_for_rate(self, rate: ArrayLike, tau: float = 0.0) -> ArrayLike:
        """Invert the schedule: the ``t`` whose masking rate is ``rate``.

        The result is pushed into the open unit interval so it can be fed
        straight back into :meth:`masking_rate`.
        """
        r = np.asarray(rate, dtype=np.float64)
        if not np.all((r > 0.0) & (r < 1.0)):
            raise ScheduleDomainError(f"rate must lie in (0, 1), got {rate}")
        t = np.clip(self._time_for_rate(r, tau), 1e-12, 1.0 - 1e-12)
        return _unwrap(t, rate)

    def sample_time(self, rng: np.random.Generator, tau: float = 0.0) -> "TimeSample":
        t = rng.random()
        while t == 0.0:
            t = rng.random()
        return TimeSample(t=t, masking_rate=self.masking_rate(t, tau), tau=tau)

    def expected_masking_rate(
        self, tau: float = 0.0, n_samples: int = 100_000, seed: int = 20250101
    ) -> tuple[float, float]:
        """Monte-Carlo mean masking rate and its standard error."""
        if n_samples < 10_000:
            raise ValueError("n_samples must be at least 10^4")
        rng = np.random.default_rng(seed)
        t = rng.random(n_samples)
        t[t == 0.0] = 0.5
        rates = self.masking_rate(t, tau)
        return float(rates.mean()), float(rates.std(ddof=1) / math.sqrt(n_samples))

    def describe(self) -> dict:
        """Flat parameter dict, used when echoing configs and in checkpoints."""
        out = {"schedule": self.name}
        for key, value in self.__dict__.items():
            out[key] = value
        return out


@dataclass(frozen=True)
class Linear(Schedule):
    name: ClassVar[str] = "linear"

    def _quantile(self, t, tau):
        return t

    def _alpha_prime(self, t, rate, tau):
        return np.ones_like(t)

    def _time_for_rate(self, rate, tau):
        return rate


@dataclass(frozen=True)
class Cosine(Schedule):
    """``alpha_t = cos(pi/2 (1 - t))``.

    Under this parameterisation ``t -> 1`` is the clean end, so the masking
    rate *decreases* in ``t``. The distribution of rates under uniform ``t``
    is the same as for the usual ``1 - cos(pi t / 2)`` form.
    """

    name: ClassVar[str] = "cosine"

    def _quantile(self, t, tau):
        return 1.0 - np.cos(0.5 * np.pi * (1.0 - t))

    def _alpha_prime(self, t, rate, tau):
        return 0.5 * np.pi * np.sin(0.5 * np.pi * (1.0 - t))

    def _time_for_rate(self, rate, tau):
        return 1.0 - np.arccos(1.0 - rate) * 2.0 / np.pi


@dataclass(frozen=True)
class SimpleGaussian(Schedule):
    mean: float = 0.3
    std: float = 0.1

    name: ClassVar[str] = "gaussian"

    def __post_init__(self):
        super().__post_init__()
        if not (math.isfinite(self.mean) and math.isfinite(self.std)) or self.std <= 0:
            raise ValueError("gaussian schedule needs finite mean and std > 0")

    def _quantile(self, t, tau):
        return self.mean + self.std * ndtri(t)

    def _alpha_prime(self, t, rate, tau):
        return 1.0 / _normal_pdf(rate, self.mean, self.std)

    def _time_for_rate(self, rate, tau):
        return ndtr((rate - self.mean) / self.std)


@dataclass(frozen=True)
class BimodalGaussian(Schedule):
    """Two-component mixture whose right mode drifts upward with ``tau``.

    ``mu2(tau) = mu2_lo + (mu2_hi - mu2_lo) * (1 - exp(-tau))``
    """

    w1: float = 0.6
    mu1: float = 0.12
    sigma1: float = 0.02
    mu2_lo: float = 0.4
    mu2_hi: float = 0.85
    sigma2: float = 0.08
    bisection_tol: float = BISECTION_TOL

    name: ClassVar[str] = "bimodal"

    def __post_init__(self):
        super().__post_init__()
        params = (self.w1, self.mu1, self.sigma1, self.mu2_lo, self.mu2_hi, self.sigma2)
        if not all(math.isfinite(p) for p in params):
            raise ValueError("bimodal parameters must be finite")
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ValueError("sigma1 and sigma2 must be positive")
        if not (0.0 < self.w1 < 1.0):
            raise ValueError("w1 must lie in (0, 1)")
        if not (0.0 < self.mu2_lo < self.mu2_hi < 1.0):
            raise ValueError("need 0 < mu2_lo < mu2_hi < 1")

    def right_mode_mean(self, tau: float) -> float:
        return self.mu2_lo + (self.mu2_hi - self.mu2_lo) * (1.0 - math.exp(-tau))

    def cdf(self, x: ArrayLike, tau: float = 0.0) -> np.ndarray:
        mu2 = self.right_mode_mean(tau)
        return self.w1 * ndtr((x - self.mu1) / self.sigma1) + (1.0 - self.w1) * ndtr(
            (x - mu2) / self.sigma2
        )

    def pdf(self, x: ArrayLike, tau: float = 0.0) -> np.ndarray:
        mu2 = self.right_mode_mean(tau)
        return self.w1 * _normal_pdf(x, self.mu1, self.sigma1) + (1.0 - self.w1) * _normal_pdf(
            x, mu2, self.sigma2
        )

    def _quantile(self, t, tau):
        mu2 = self.right_mode_mean(tau)
        lo = np.full_like(t, min(0.0, self.mu1 - 12 * self.sigma1, mu2 - 12 * self.sigma2))
        hi = np.full_like(t, max(1.0, self.mu1 + 12 * self.sigma1, mu2 + 12 * self.sigma2))
        # the CDF is strictly increasing, so plain bisection converges
        n_iter = int(math.ceil(math.log2((hi.flat[0] - lo.flat[0]) / self.bisection_tol)))
        for _ in range(n_iter):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid, tau) < t
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def _alpha_prime(self, t, rate, tau):
        return 1.0 / self.pdf(rate, tau)

    def _time_for_rate(self, rate, tau):
        return self.cdf(rate, tau)


@dataclass(frozen=True)
class Constant(Schedule):
    """Degenerate schedule with a fixed masking rate (plain MLM).

    The derivative is zero, so it only makes sense with derivative power 0.
    """

    rate: float = 0.15

    name: ClassVar[str] = "constant"

    def __post_init__(self):
        super().__post_init__()
        if not (0.0 < self.rate < 1.0):
            raise ValueError("constant rate must lie in (0, 1)")

    def _quantile(self, t, tau):
        return np.full_like(t, self.rate)

    def _alpha_prime(self, t, rate, tau):
        return np.zeros_like(t)

    def _time_for_rate(self, rate, tau):
        return np.full_like(rate, 0.5)


@dataclass(frozen=True)
class TimeSample:
    t: float
    masking_rate: float
    tau: float


SCHEDULES: dict[str, type[Schedule]] = {
    cls.name: cls for cls in (Linear, Cosine, SimpleGaussian, BimodalGaussian, Constant)
}


def make_schedule(name: str, **params) -> Schedule:
    try:
        cls = SCHEDULES[name]
    except KeyError:
        raise ValueError(f"unknown schedule {name!r}; choose from {sorted(SCHEDULES)}") from None
    return cls(**params)


# Functional aliases mirroring the method API.
def masking_rate(kind: Schedule, t: ArrayLike, tau: float = 0.0) -> ArrayLike:
    return kind.masking_rate(t, tau)


def alpha_prime_magnitude(kind: Schedule, t: ArrayLike, tau: float = 0.0) -> ArrayLike:
    return kind.alpha_prime_magnitude(t, tau)


def sample_time(kind: Schedule, rng: np.random.Generator, tau: float = 0.0) -> TimeSample:
    return kind.sample_time(rng, tau)


def expected_masking_rate(kind: Schedule, tau: float = 0.0, n_samples: int = 100_000):
    return kind.expected_masking_rate(tau, n_samples)
