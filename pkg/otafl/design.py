"""Contains pre-scaler construction and the round policies compared in
the experiments: the minimum noise variance and zero-bias designs, and
the Vanilla OTA, BB-FL Interior and BB-FL Alternating baselines.
"""

import abc
import enum
import logging
import math
from typing import NamedTuple, Optional, Union

import numpy as np
import numpy.typing as npt

import params
from otafl import OtaflException
from otafl.ota import (
    PreScalerSet,
    RoundOutcome,
    check_gradient_norms,
    ota_round,
    transmit_threshold,
)
from otafl.wireless import Deployment

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
BoolArray = npt.NDArray[np.bool_]
ComplexArray = npt.NDArray[np.complex128]
PathLossSource = Union[Deployment, FloatArray]

INV_E = math.exp(-1.0)
BRANCH_SLACK = 1e-12


class PolicyKind(enum.Enum):
    """Aggregation policies."""

    MIN_VARIANCE = "min_variance"
    ZERO_BIAS = "zero_bias"
    VANILLA_OTA = "vanilla_ota"
    BBFL_INTERIOR = "bbfl_interior"
    BBFL_ALTERNATING = "bbfl_alternating"
    IDEAL = "ideal"

    def __repr__(self) -> str:
        """Get a string representation of self.

        Returns:
            str: String representation of self.

        """
        return f"<{self.__class__.__name__}.{self.name}>"

    @property
    def is_prescaled(self) -> bool:
        """Whether the policy uses fixed pre-scalers."""
        return self in (PolicyKind.MIN_VARIANCE, PolicyKind.ZERO_BIAS)

    @classmethod
    def parse(cls, name: str) -> "PolicyKind":
        """Look a policy up by its value, e.g. "zero_bias".

        Raises:
            otafl.design.UnknownPolicyException: For an unknown name.

        """
        try:
            return cls(name.strip().lower().replace("-", "_"))
        except ValueError as error:
            raise UnknownPolicyException(
                params.MESSAGES.UNKNOWN_POLICY.format(name)
            ) from error


def _path_losses(source: PathLossSource) -> FloatArray:
    if isinstance(source, Deployment):
        return source.path_losses
    return np.asarray(source, dtype=np.float64).reshape(-1)


def lambert_w0(x: float) -> float:
    """Principal branch W0 of the Lambert W function.

    Solves W e^W = x with W >= -1 by Halley iteration, started from the
    branch-point series near -1/e, from log1p(x) for moderate x and from
    the asymptotic log(x) - log(log(x)) for large x.

    Args:
        x (float): Argument, x >= -1/e.

    Returns:
        float: W0(x).

    Raises:
        otafl.design.LambertDomainException: If x < -1/e.

    """
    if x < -INV_E or math.isnan(x):
        raise LambertDomainException(params.MESSAGES.LAMBERT_DOMAIN.format(x))
    if x == 0.0:
        return 0.0
    if x < -0.32:
        p = math.sqrt(max(2.0 * (math.e * x + 1.0), 0.0))
        if p == 0.0:
            return -1.0
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p**3
    elif x < math.e:
        w = math.log1p(x)
    else:
        log_x = math.log(x)
        w = log_x - math.log(log_x) + math.log(log_x) / log_x
    for _ in range(100):
        exp_w = math.exp(w)
        residual = w * exp_w - x
        w_plus_one = w + 1.0
        if residual == 0.0 or w_plus_one == 0.0:
            break
        step = residual / (
            exp_w * w_plus_one - (w + 2.0) * residual / (2.0 * w_plus_one)
        )
        w -= step
        if abs(step) <= max(1e-14, 4.0 * np.finfo(float).eps * abs(w)):
            break
    return max(w, -1.0)


def max_alpha_prescalers(
    path_losses: FloatArray, dimension: int, energy_per_sample: float, g_max: float
) -> FloatArray:
    """Per-device maximizers sqrt(d Lambda_m E_s / (2 G_max^2)) of
    alpha_m.
    """
    return np.asarray(
        np.sqrt(dimension * path_losses * energy_per_sample / (2.0 * g_max**2))
    )


def min_variance_prescalers(
    source: PathLossSource, dimension: int, energy_per_sample: float, g_max: float
) -> PreScalerSet:
    """Minimum noise variance design: every device maximizes its own
    alpha_m, hence alpha, and transmits with probability e^(-1/2).

    Args:
        source (Union[otafl.wireless.Deployment, FloatArray]):
            Deployment or its path losses.
        dimension (int): Model dimension d.
        energy_per_sample (float): E_s.
        g_max (float): G_max.

    Returns:
        otafl.ota.PreScalerSet: The design.

    """
    path_losses = _path_losses(source)
    return PreScalerSet(
        max_alpha_prescalers(path_losses, dimension, energy_per_sample, g_max),
        path_losses,
        dimension,
        energy_per_sample,
        g_max,
    )


def zero_bias_prescalers(
    source: PathLossSource, dimension: int, energy_per_sample: float, g_max: float
) -> PreScalerSet:
    """Minimum noise variance zero-bias design.

    Every device is tuned to the largest alpha the weakest device can
    reach, a = alpha_N(gamma~_N) = gamma~_N e^(-1/2). With
    c_m = G_max^2 / (d Lambda_m E_s), gamma e^(-c_m gamma^2) = a is
    solved by gamma = sqrt(-W0(-2 c_m a^2) / (2 c_m)), the smaller root.

    Args:
        source (Union[otafl.wireless.Deployment, FloatArray]):
            Deployment or its path losses.
        dimension (int): Model dimension d.
        energy_per_sample (float): E_s.
        g_max (float): G_max.

    Returns:
        otafl.ota.PreScalerSet: A design with alpha_m = a for every m,
            hence uniform participation.

    Raises:
        otafl.design.ZeroBiasInfeasibleException: If the target lies
            beyond the reach of a device (only through round-off).

    """
    path_losses = _path_losses(source)
    maximizers = max_alpha_prescalers(path_losses, dimension, energy_per_sample, g_max)
    worst = int(np.argmin(path_losses))
    target = maximizers[worst] * math.exp(-0.5)
    gammas = np.empty_like(path_losses)
    for device, path_loss in enumerate(path_losses):
        curvature = g_max**2 / (dimension * path_loss * energy_per_sample)
        argument = -2.0 * curvature * target**2
        if argument < -INV_E - BRANCH_SLACK:
            raise ZeroBiasInfeasibleException(
                params.MESSAGES.ZERO_BIAS_INFEASIBLE.format(device)
            )
        branch = lambert_w0(max(argument, -INV_E))
        gammas[device] = math.sqrt(-branch / (2.0 * curvature))
    return PreScalerSet(gammas, path_losses, dimension, energy_per_sample, g_max)


def _scheduled_inversion_round(
    gradients: FloatArray,
    fading: ComplexArray,
    noise: npt.ArrayLike,
    dimension: int,
    energy_per_sample: float,
    g_max: float,
    scheduled: BoolArray,
) -> Optional[RoundOutcome]:
    """Full channel inversion of the scheduled devices with the common
    scaler gamma_t = min_m sqrt(d E_s) |h_m| / G_max over them.
    """
    gains = np.abs(fading)
    if np.any(gains[scheduled] == 0.0):
        logger.warning(params.MESSAGES.ZERO_CHANNEL)
        return None
    norms = check_gradient_norms(gradients, g_max)
    common = transmit_threshold(dimension, energy_per_sample, g_max) * float(
        np.min(gains[scheduled])
    )
    received = common * gradients[scheduled].sum(axis=0) + np.real(np.asarray(noise))
    energy = np.zeros(gradients.shape[0])
    energy[scheduled] = (
        common**2 * norms[scheduled] ** 2 / (dimension * gains[scheduled] ** 2)
    )
    estimate = received / (int(scheduled.sum()) * common)
    return RoundOutcome(scheduled.copy(), received, estimate, energy)


def vanilla_ota_round(
    gradients: FloatArray,
    fading: ComplexArray,
    noise: npt.ArrayLike,
    dimension: int,
    energy_per_sample: float,
    g_max: float,
) -> Optional[RoundOutcome]:
    """Zero instantaneous bias round: every device inverts its channel
    and the weakest instantaneous channel sets the common scaler.

    Returns:
        Optional[otafl.ota.RoundOutcome]: The round, or None (with a
            warning) if some channel is exactly zero.

    """
    scheduled = np.ones(gradients.shape[0], dtype=bool)
    return _scheduled_inversion_round(
        gradients, fading, noise, dimension, energy_per_sample, g_max, scheduled
    )


def interior_mask(deployment: Deployment, r_in: float) -> BoolArray:
    """Devices within distance r_in of the receiver.

    Raises:
        otafl.design.EmptyInteriorException: If no device qualifies.

    """
    mask = np.asarray(deployment.distances <= r_in)
    if not mask.any():
        raise EmptyInteriorException(params.MESSAGES.EMPTY_INTERIOR.format(r_in))
    return mask


def bbfl_interior_round(
    gradients: FloatArray,
    fading: ComplexArray,
    noise: npt.ArrayLike,
    dimension: int,
    energy_per_sample: float,
    g_max: float,
    interior: BoolArray,
) -> Optional[RoundOutcome]:
    """Vanilla OTA round restricted to the interior devices; the
    post-scaler counts interior devices only.
    """
    return _scheduled_inversion_round(
        gradients, fading, noise, dimension, energy_per_sample, g_max, interior
    )


def bbfl_alternating_round(
    gradients: FloatArray,
    fading: ComplexArray,
    noise: npt.ArrayLike,
    dimension: int,
    energy_per_sample: float,
    g_max: float,
    interior: BoolArray,
    mix_probability: float,
    rng: np.random.Generator,
) -> Optional[RoundOutcome]:
    """With probability mix_probability an all-device vanilla round,
    otherwise an interior round.
    """
    all_devices = rng.uniform() < mix_probability
    scheduled = np.ones_like(interior) if all_devices else interior
    return _scheduled_inversion_round(
        gradients, fading, noise, dimension, energy_per_sample, g_max, scheduled
    )


class PolicyRound(NamedTuple):
    """A round outcome with the weight each device's gradient carries
    in the estimate.
    """

    outcome: RoundOutcome
    weights: FloatArray


class RoundPolicy(abc.ABC):
    """A rule producing the gradient estimate of one round."""

    kind = PolicyKind.IDEAL

    @abc.abstractmethod
    def aggregate(
        self,
        gradients: FloatArray,
        fading: ComplexArray,
        noise: FloatArray,
        rng: np.random.Generator,
    ) -> Optional[PolicyRound]:
        """Aggregate one round of local gradients.

        Args:
            gradients (FloatArray): Local gradients, shape (N, d).
            fading (ComplexArray): Channel coefficients, shape (N,).
            noise (FloatArray): Real receiver noise, length d.
            rng (numpy.random.Generator): Policy-internal stream.

        Returns:
            Optional[otafl.design.PolicyRound]: The round, or None if
                it had to be skipped.

        """


class IdealPolicy(RoundPolicy):
    """Error-free aggregation (1/N) sum_m g_m."""

    kind = PolicyKind.IDEAL

    def aggregate(
        self,
        gradients: FloatArray,
        fading: ComplexArray,
        noise: FloatArray,
        rng: np.random.Generator,
    ) -> Optional[PolicyRound]:
        n_devices = gradients.shape[0]
        mean = gradients.mean(axis=0)
        outcome = RoundOutcome(
            np.ones(n_devices, dtype=bool), mean, mean, np.zeros(n_devices)
        )
        return PolicyRound(outcome, np.full(n_devices, 1.0 / n_devices))


class PreScaledPolicy(RoundPolicy):
    """Fixed pre-scalers with truncated channel inversion."""

    def __init__(self, prescalers: PreScalerSet, kind: PolicyKind) -> None:
        """Initialize a new PreScaledPolicy object.

        Args:
            prescalers (otafl.ota.PreScalerSet): Fixed design.
            kind (otafl.design.PolicyKind): MIN_VARIANCE or ZERO_BIAS.

        """
        self.prescalers = prescalers
        self.kind = kind

    def aggregate(
        self,
        gradients: FloatArray,
        fading: ComplexArray,
        noise: FloatArray,
        rng: np.random.Generator,
    ) -> Optional[PolicyRound]:
        outcome = ota_round(gradients, fading, noise, self.prescalers)
        weights = np.where(outcome.chi, self.prescalers.gammas, 0.0)
        return PolicyRound(outcome, weights / self.prescalers.alpha)


class InversionPolicy(RoundPolicy):
    """Instantaneous-CSI baselines built on full channel inversion.

    With interior None every device is scheduled (Vanilla OTA); with
    mix_probability None only the interior is (BB-FL Interior);
    otherwise each round picks all devices with probability
    mix_probability (BB-FL Alternating).
    """

    def __init__(
        self,
        dimension: int,
        energy_per_sample: float,
        g_max: float,
        interior: Optional[BoolArray] = None,
        mix_probability: Optional[float] = None,
    ) -> None:
        """Initialize a new InversionPolicy object.

        Args:
            dimension (int): Model dimension d.
            energy_per_sample (float): E_s.
            g_max (float): G_max.
            interior (Optional[BoolArray]): Interior device mask.
            mix_probability (Optional[float]): All-device round
                probability of the alternating variant.

        """
        self.dimension = dimension
        self.energy_per_sample = energy_per_sample
        self.g_max = g_max
        self.interior = interior
        self.mix_probability = mix_probability
        if interior is None:
            self.kind = PolicyKind.VANILLA_OTA
        elif mix_probability is None:
            self.kind = PolicyKind.BBFL_INTERIOR
        else:
            self.kind = PolicyKind.BBFL_ALTERNATING

    def aggregate(
        self,
        gradients: FloatArray,
        fading: ComplexArray,
        noise: FloatArray,
        rng: np.random.Generator,
    ) -> Optional[PolicyRound]:
        common = (gradients, fading, noise, self.dimension, self.energy_per_sample)
        if self.interior is None:
            outcome = vanilla_ota_round(*common, self.g_max)
        elif self.mix_probability is None:
            outcome = bbfl_interior_round(*common, self.g_max, self.interior)
        else:
            outcome = bbfl_alternating_round(
                *common, self.g_max, self.interior, self.mix_probability, rng
            )
        if outcome is None:
            return None
        return PolicyRound(outcome, outcome.chi / float(outcome.chi.sum()))


def build_policy(
    kind: PolicyKind,
    deployment: Deployment,
    dimension: int,
    energy_per_sample: float,
    g_max: float,
    r_in: float,
    mix_probability: float = params.EXPERIMENT.MIX_PROBABILITY,
) -> RoundPolicy:
    """Construct the round policy of a given kind for a deployment.

    Raises:
        otafl.design.EmptyInteriorException: If a BB-FL policy has no
            interior device.

    """
    if kind is PolicyKind.IDEAL:
        return IdealPolicy()
    if kind is PolicyKind.MIN_VARIANCE:
        return PreScaledPolicy(
            min_variance_prescalers(deployment, dimension, energy_per_sample, g_max),
            kind,
        )
    if kind is PolicyKind.ZERO_BIAS:
        return PreScaledPolicy(
            zero_bias_prescalers(deployment, dimension, energy_per_sample, g_max),
            kind,
        )
    if kind is PolicyKind.VANILLA_OTA:
        return InversionPolicy(dimension, energy_per_sample, g_max)
    interior = interior_mask(deployment, r_in)
    if kind is PolicyKind.BBFL_INTERIOR:
        return InversionPolicy(dimension, energy_per_sample, g_max, interior)
    return InversionPolicy(
        dimension, energy_per_sample, g_max, interior, mix_probability
    )


class UnknownPolicyException(OtaflException):
    """Raised when a policy name is not recognized."""


class LambertDomainException(OtaflException):
    """Raised when W0 is evaluated below the branch point -1/e."""


class ZeroBiasInfeasibleException(OtaflException):
    """Raised when a device cannot reach the zero-bias target."""


class EmptyInteriorException(OtaflException):
    """Raised when a BB-FL policy schedules no interior device."""
