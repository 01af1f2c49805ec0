"""Contains the over-the-air aggregation machinery: truncated channel
inversion decisions, the received-signal model, post-scaled gradient
estimates, participation levels and the analytic error variance.
"""

import dataclasses
import logging
from typing import Any, Dict, NamedTuple, Optional, Union

import numpy as np
import numpy.typing as npt

import params
from otafl import OtaflException

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
BoolArray = npt.NDArray[np.bool_]
ArrayLike = Union[float, FloatArray]


def transmit_threshold(dimension: int, energy_per_sample: float, g_max: float) -> float:
    """sqrt(d E_s) / G_max: the factor turning |h| into the largest
    affordable pre-scaler.
    """
    return float(np.sqrt(dimension * energy_per_sample) / g_max)


def transmit_decision(
    gamma: float,
    channel_gain: float,
    dimension: int,
    energy_per_sample: float,
    g_max: float,
) -> bool:
    """Truncated channel inversion rule: transmit iff
    gamma <= sqrt(d E_s) |h| / G_max (inclusive).
    """
    return bool(
        gamma <= transmit_threshold(dimension, energy_per_sample, g_max) * channel_gain
    )


def transmit_probability(
    gamma: ArrayLike,
    path_loss: ArrayLike,
    dimension: int,
    energy_per_sample: float,
    g_max: float,
) -> ArrayLike:
    """Rayleigh tail P(|h|^2 >= gamma^2 G^2 / (d E_s)), that is
    exp(-gamma^2 G_max^2 / (d Lambda E_s)).
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    result = np.exp(
        -(gamma**2) * g_max**2 / (dimension * np.asarray(path_loss) * energy_per_sample)
    )
    return float(result) if result.ndim == 0 else result


def alpha_m(
    gamma: ArrayLike,
    path_loss: ArrayLike,
    dimension: int,
    energy_per_sample: float,
    g_max: float,
) -> ArrayLike:
    """Expected received amplitude of one device,
    gamma * exp(-gamma^2 G_max^2 / (d Lambda E_s)).
    """
    probability = transmit_probability(
        gamma, path_loss, dimension, energy_per_sample, g_max
    )
    result = np.asarray(gamma, dtype=np.float64) * probability
    return float(result) if result.ndim == 0 else result


@dataclasses.dataclass
class PreScalerSet:
    """Fixed per-device pre-scalers and everything derived from them.

    Class instance attributes:
        gammas (FloatArray): Pre-scalers gamma_m > 0.
        path_losses (FloatArray): Average path losses Lambda_m.
        dimension (int): Model dimension d.
        energy_per_sample (float): E_s.
        g_max (float): Gradient norm bound G_max.

    """

    gammas: FloatArray
    path_losses: FloatArray
    dimension: int
    energy_per_sample: float
    g_max: float

    def __post_init__(self) -> None:
        self.gammas = np.asarray(self.gammas, dtype=np.float64).reshape(-1)
        self.path_losses = np.asarray(self.path_losses, dtype=np.float64).reshape(-1)
        if self.gammas.shape != self.path_losses.shape:
            raise InvalidPreScalerException(
                params.MESSAGES.PRESCALER_SHAPE.format(
                    self.gammas.size, self.path_losses.size
                )
            )
        for name, value in (
            ("gamma", self.gammas.min(initial=np.inf)),
            ("path loss", self.path_losses.min(initial=np.inf)),
            ("dimension", self.dimension),
            ("E_s", self.energy_per_sample),
            ("G_max", self.g_max),
        ):
            if not value > 0:
                raise InvalidPreScalerException(
                    params.MESSAGES.NON_POSITIVE.format(name, value)
                )

    def __len__(self) -> int:
        return int(self.gammas.size)

    @property
    def transmit_probabilities(self) -> FloatArray:
        """Per-device transmit probabilities P_m."""
        return np.asarray(
            transmit_probability(
                self.gammas,
                self.path_losses,
                self.dimension,
                self.energy_per_sample,
                self.g_max,
            )
        )

    @property
    def alphas(self) -> FloatArray:
        """Per-device alpha_m = gamma_m * P_m."""
        return self.gammas * self.transmit_probabilities

    @property
    def alpha(self) -> float:
        """Post-scaler alpha = sum_m alpha_m."""
        return float(np.sum(self.alphas))

    @property
    def participation(self) -> FloatArray:
        """Participation levels p_m = alpha_m / alpha."""
        return participation_levels(self)

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready per-device table plus the global post-scaler."""
        return {
            "dimension": self.dimension,
            "energy_per_sample": self.energy_per_sample,
            "g_max": self.g_max,
            "alpha": self.alpha,
            "devices": [
                {
                    "device": device,
                    "path_loss": float(self.path_losses[device]),
                    "gamma": float(self.gammas[device]),
                    "alpha_m": float(self.alphas[device]),
                    "transmit_probability": float(self.transmit_probabilities[device]),
                    "participation": float(self.participation[device]),
                }
                for device in range(len(self))
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PreScalerSet":
        """Inverse of to_dict."""
        devices = sorted(data["devices"], key=lambda entry: int(entry["device"]))
        return cls(
            np.array([entry["gamma"] for entry in devices]),
            np.array([entry["path_loss"] for entry in devices]),
            int(data["dimension"]),
            float(data["energy_per_sample"]),
            float(data["g_max"]),
        )


def participation_levels(prescalers: PreScalerSet) -> FloatArray:
    """p_m = alpha_m / alpha, a point of the probability simplex.

    Raises:
        otafl.ota.ZeroAlphaException: If every alpha_m is zero.

    """
    alphas = prescalers.alphas
    total = float(np.sum(alphas))
    if not total > 0:
        raise ZeroAlphaException(params.MESSAGES.ZERO_ALPHA)
    return np.asarray(alphas / total)


class RoundOutcome(NamedTuple):
    """Result of one over-the-air aggregation round.

    chi holds the transmit indicators, received the real received
    vector y_t, estimate the post-scaled gradient estimate and energy
    the per-sample energy ||x_m||^2 / d of each device (0 when silent).
    """

    chi: BoolArray
    received: FloatArray
    estimate: FloatArray
    energy: FloatArray


def check_gradient_norms(gradients: FloatArray, g_max: float) -> FloatArray:
    """Return the gradient norms, enforcing ||g_m|| <= G_max.

    Raises:
        otafl.ota.GmaxViolationException: Naming the first offending
            device.

    """
    norms = np.linalg.norm(gradients, axis=1)
    violations = np.flatnonzero(norms > g_max)
    if violations.size:
        device = int(violations[0])
        raise GmaxViolationException(
            params.MESSAGES.GMAX_VIOLATION.format(norms[device], device, g_max),
            device,
            float(norms[device]),
        )
    return np.asarray(norms)


def ota_round(
    gradients: FloatArray,
    fading: npt.NDArray[np.complex128],
    noise: npt.ArrayLike,
    prescalers: PreScalerSet,
) -> RoundOutcome:
    """Simulate one round of pre-scaled truncated channel inversion.

    Transmitting devices send (gamma_m / h_m) g_m, so the channel term
    of the received signal is exactly the real sum of chi_m gamma_m g_m;
    the receiver adds the real part of the noise and divides by alpha.

    Args:
        gradients (FloatArray): Local gradients, shape (N, d).
        fading (ComplexArray): Channel coefficients h_m, shape (N,).
        noise (ArrayLike): Receiver noise of length d; only its real
            part enters the estimate.
        prescalers (otafl.ota.PreScalerSet): Pre-scaler design.

    Returns:
        otafl.ota.RoundOutcome: Indicators, received vector, estimate
            and energy values.

    Raises:
        otafl.ota.GmaxViolationException: If some ||g_m|| > G_max.
        otafl.ota.ZeroAlphaException: If every alpha_m is zero.

    """
    alpha = prescalers.alpha
    if not alpha > 0:
        raise ZeroAlphaException(params.MESSAGES.ZERO_ALPHA)
    norms = check_gradient_norms(gradients, prescalers.g_max)
    gains = np.abs(fading)
    threshold = transmit_threshold(
        prescalers.dimension, prescalers.energy_per_sample, prescalers.g_max
    )
    chi = prescalers.gammas <= threshold * gains
    weights = np.where(chi, prescalers.gammas, 0.0)
    received = weights @ gradients + np.real(np.asarray(noise))
    energy = np.zeros(len(prescalers))
    energy[chi] = (
        prescalers.gammas[chi] ** 2
        * norms[chi] ** 2
        / (prescalers.dimension * gains[chi] ** 2)
    )
    return RoundOutcome(chi, received, received / alpha, energy)


def expected_estimate(gradients: FloatArray, prescalers: PreScalerSet) -> FloatArray:
    """g~ = sum_m p_m g_m, the conditional mean of the estimate."""
    return np.asarray(prescalers.participation @ gradients)


class VarianceTerms(NamedTuple):
    """Transmission and noise addends of the estimate variance."""

    transmission: float
    noise: float

    @property
    def total(self) -> float:
        """Sum of both addends."""
        return self.transmission + self.noise


class ErrorVariance(NamedTuple):
    """E||g^ - g~||^2, exact for given gradients, bounded via G_max."""

    exact: Optional[VarianceTerms]
    bounded: VarianceTerms


def _variance_terms(
    prescalers: PreScalerSet, squared_norms: FloatArray, noise_psd: float
) -> VarianceTerms:
    p = prescalers.participation
    # devices whose alpha_m underflowed to 0 never contribute
    active = p > 0
    transmission = float(
        np.sum(
            p[active] ** 2
            * squared_norms[active]
            * (prescalers.gammas[active] / prescalers.alphas[active] - 1.0)
        )
    )
    return VarianceTerms(
        transmission, prescalers.dimension * noise_psd / prescalers.alpha**2
    )


def error_variance(
    prescalers: PreScalerSet,
    noise_psd: float,
    gradients: Optional[FloatArray] = None,
) -> ErrorVariance:
    """Conditional error variance of the estimate given w_t.

    sum_m p_m^2 ||g_m||^2 (gamma_m / alpha_m - 1) + d N_0 / alpha^2,
    with ||g_m|| replaced by G_max in the bounded form (sigma^2).

    Args:
        prescalers (otafl.ota.PreScalerSet): Pre-scaler design.
        noise_psd (float): N_0.
        gradients (Optional[FloatArray]): Local gradients, shape (N, d).
            If None only the bounded form is computed.

    Returns:
        otafl.ota.ErrorVariance: Exact and bounded decompositions.

    """
    bounded = _variance_terms(
        prescalers, np.full(len(prescalers), prescalers.g_max**2), noise_psd
    )
    exact = None
    if gradients is not None:
        exact = _variance_terms(
            prescalers, np.sum(np.asarray(gradients) ** 2, axis=1), noise_psd
        )
    return ErrorVariance(exact, bounded)


class InvalidPreScalerException(OtaflException):
    """Raised when a pre-scaler set has a non-positive entry."""


class ZeroAlphaException(OtaflException):
    """Raised when the post-scaler alpha vanishes."""


class GmaxViolationException(OtaflException):
    """Raised when a local gradient exceeds the G_max bound.

    Class instance attributes:
        device (int): Offending device index.
        norm (float): Its gradient norm.

    """

    def __init__(self, message: str, device: int, norm: float) -> None:
        super().__init__(message)
        self.device = device
        self.norm = norm
