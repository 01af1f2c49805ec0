"""Contains the optimality-error bound of biased over-the-air FL: the
four-term breakdown (initialization, model bias, transmission variance,
noise variance), the model-bias bound, the admissible stepsize range
and the assembly of every constant the bound consumes.
"""

import dataclasses
import enum
import logging
import math
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

import params
from otafl import OtaflException
from otafl.dataset import DeviceDataset
from otafl.model import DEFAULT_LOSS, LossConfig, ModelParams, solve_minimizer
from otafl.ota import PreScalerSet, error_variance

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]


class InitialErrorSource(enum.Enum):
    """How sqrt(E~_0) = ||w_0 - w~|| was obtained."""

    SOLVED = "solved"
    TRIANGLE = "triangle"


@dataclasses.dataclass(frozen=True)
class BoundConstants:
    """Everything the bound consumes for one pre-scaler design.

    Class instance attributes:
        n_devices (int): N.
        dimension (int): d.
        g_max (float): G_max.
        kappa (float): Gradient dissimilarity at w*.
        energy_per_sample (float): E_s.
        noise_psd (float): N_0.
        stepsize (float): eta.
        mu_tilde (float): sum_m p_m mu_m.
        l_tilde (float): sum_m p_m L_m.
        mu (float): (1/N) sum_m mu_m.
        smoothness (float): (1/N) sum_m L_m.
        initial_error (float): sqrt(E_0) = ||w_0 - w*||.
        surrogate_initial_error (float): sqrt(E~_0) = ||w_0 - w~||.
        initial_error_source (otafl.bound.InitialErrorSource): Whether
            sqrt(E~_0) was solved for or bounded via the triangle
            inequality.

    """

    n_devices: int
    dimension: int
    g_max: float
    kappa: float
    energy_per_sample: float
    noise_psd: float
    stepsize: float
    mu_tilde: float
    l_tilde: float
    mu: float
    smoothness: float
    initial_error: float
    surrogate_initial_error: float
    initial_error_source: InitialErrorSource = InitialErrorSource.SOLVED

    def __post_init__(self) -> None:
        if not 0 < self.mu_tilde <= self.l_tilde or self.kappa < 0:
            raise InvalidConstantsException(
                params.MESSAGES.BAD_CONSTANTS.format(
                    self.mu_tilde, self.l_tilde, self.kappa
                )
            )

    def with_stepsize(self, stepsize: float) -> "BoundConstants":
        """Copy of self with another stepsize."""
        return dataclasses.replace(self, stepsize=stepsize)

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready representation."""
        data = dataclasses.asdict(self)
        data["initial_error_source"] = self.initial_error_source.value
        return data


def assemble_constants(
    prescalers: PreScalerSet,
    local_strong_convexity: Sequence[float],
    local_smoothness: Sequence[float],
    kappa: float,
    noise_psd: float,
    stepsize: float,
    w_start: ModelParams,
    w_star: ModelParams,
    w_tilde: Optional[ModelParams] = None,
) -> BoundConstants:
    """Weight the per-device constants by the design's participation
    and compute the initial errors.

    Without w_tilde, sqrt(E~_0) is bounded by sqrt(E_0) plus the
    model-bias bound.

    Returns:
        otafl.bound.BoundConstants: The assembled constants.

    """
    p = prescalers.participation
    mus = np.asarray(local_strong_convexity, dtype=np.float64)
    smooth = np.asarray(local_smoothness, dtype=np.float64)
    mu_tilde = float(p @ mus)
    initial_error = float(np.linalg.norm(np.asarray(w_start) - np.asarray(w_star)))
    if w_tilde is None:
        surrogate = initial_error + bias_bound_value(len(p), kappa, mu_tilde, p)
        source = InitialErrorSource.TRIANGLE
    else:
        surrogate = float(np.linalg.norm(np.asarray(w_start) - np.asarray(w_tilde)))
        source = InitialErrorSource.SOLVED
    return BoundConstants(
        n_devices=len(p),
        dimension=prescalers.dimension,
        g_max=prescalers.g_max,
        kappa=kappa,
        energy_per_sample=prescalers.energy_per_sample,
        noise_psd=noise_psd,
        stepsize=stepsize,
        mu_tilde=mu_tilde,
        l_tilde=float(p @ smooth),
        mu=float(np.mean(mus)),
        smoothness=float(np.mean(smooth)),
        initial_error=initial_error,
        surrogate_initial_error=surrogate,
        initial_error_source=source,
    )


def stepsize_range(constants: BoundConstants) -> Tuple[float, float]:
    """Admissible stepsizes [0, 2 / (mu~ + L~)]."""
    return (0.0, 2.0 / (constants.mu_tilde + constants.l_tilde))


def check_stepsize(constants: BoundConstants) -> None:
    """Enforce the admissible stepsize range.

    Raises:
        otafl.bound.StepsizeRangeException: Outside the range.

    """
    low, high = stepsize_range(constants)
    if not low <= constants.stepsize <= high:
        raise StepsizeRangeException(
            params.MESSAGES.STEPSIZE_RANGE.format(constants.stepsize, high)
        )


def sigma_squared(prescalers: PreScalerSet, constants: BoundConstants) -> float:
    """sigma^2, the G_max-bounded error variance of the estimate."""
    return error_variance(prescalers, constants.noise_psd).bounded.total


def bias_bound_value(
    n_devices: int, kappa: float, mu_tilde: float, participation: FloatArray
) -> float:
    """(N kappa / mu~) max_m |1/N - p_m|."""
    deviation = float(np.max(np.abs(1.0 / n_devices - np.asarray(participation))))
    return n_devices * kappa / mu_tilde * deviation


def model_bias_bound(constants: BoundConstants, participation: FloatArray) -> float:
    """Upper bound on the model bias ||w~ - w*||."""
    return bias_bound_value(
        constants.n_devices, constants.kappa, constants.mu_tilde, participation
    )


def true_model_bias(
    datasets: Sequence[DeviceDataset],
    participation: FloatArray,
    w_star: ModelParams,
    cfg: LossConfig = DEFAULT_LOSS,
    tol: float = params.LEARNING.MINIMIZER_TOL,
) -> Tuple[float, ModelParams]:
    """Solve for w~ = argmin sum_m p_m f_m; return ||w~ - w*||, w~."""
    w_tilde = solve_minimizer(datasets, participation, cfg, tol).params
    return float(np.linalg.norm(w_tilde - w_star)), w_tilde


class BoundBreakdown(NamedTuple):
    """The four addends of the bound after t rounds and their total."""

    round_index: int
    initialization: float
    model_bias: float
    transmission_variance: float
    noise_variance: float
    total: float


def optimality_error_bound(
    t: int, constants: BoundConstants, prescalers: PreScalerSet
) -> BoundBreakdown:
    """Bound on sqrt(E||w_t - w*||^2) after t rounds.

    init + bias + sqrt((eta / mu~) (trans + noise)) with
    init = (1 - eta mu~)^t sqrt(E~_0),
    bias = (N kappa / mu~) max_m |1/N - p_m|,
    trans = sum_m p_m^2 G_max^2 (gamma_m / alpha_m - 1) and
    noise = d N_0 / alpha^2.

    Args:
        t (int): Round index.
        constants (otafl.bound.BoundConstants): Bound constants.
        prescalers (otafl.ota.PreScalerSet): The design whose
            participation enters the bias term.

    Returns:
        otafl.bound.BoundBreakdown: The breakdown.

    Raises:
        otafl.bound.StepsizeRangeException: If eta is not admissible.

    """
    check_stepsize(constants)
    variance = error_variance(prescalers, constants.noise_psd).bounded
    contraction = (1.0 - constants.stepsize * constants.mu_tilde) ** t
    initialization = contraction * constants.surrogate_initial_error
    bias = model_bias_bound(constants, prescalers.participation)
    spread = math.sqrt(constants.stepsize / constants.mu_tilde * variance.total)
    return BoundBreakdown(
        t,
        initialization,
        bias,
        variance.transmission,
        variance.noise,
        initialization + bias + spread,
    )


def surrogate_error_bound(
    t: int, constants: BoundConstants, prescalers: PreScalerSet
) -> float:
    """Bound on E||w_t - w~||^2 from the one-step recursion:
    (1 - eta mu~)^(2t) E~_0 + (eta / mu~) sigma^2.
    """
    check_stepsize(constants)
    contraction = (1.0 - constants.stepsize * constants.mu_tilde) ** (2 * t)
    return (
        contraction * constants.surrogate_initial_error**2
        + constants.stepsize / constants.mu_tilde * sigma_squared(prescalers, constants)
    )


def bound_curve(
    rounds: Sequence[int], constants: BoundConstants, prescalers: PreScalerSet
) -> List[BoundBreakdown]:
    """Breakdowns at each of the given rounds."""
    return [optimality_error_bound(t, constants, prescalers) for t in rounds]


class InvalidConstantsException(OtaflException):
    """Raised when constants violate 0 < mu~ <= L~ or kappa >= 0."""


class StepsizeRangeException(OtaflException):
    """Raised when eta lies outside [0, 2 / (mu~ + L~)]."""
