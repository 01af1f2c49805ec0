"""Contains the physical-layer model: radio configuration, unit
conversions, log-distance path loss, device deployment, Rayleigh fading
and receiver noise.
"""

import dataclasses
import json
import logging
import pathlib
from typing import Any, Dict, Optional

import numpy as np
import numpy.typing as npt

import params
from otafl import OtaflException

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
ComplexArray = npt.NDArray[np.complex128]


def dbm_to_watts(dbm: float) -> float:
    """Convert a power level from dBm to watts."""
    return float(10.0 ** ((dbm - 30.0) / 10.0))


def db_to_linear(db: float) -> float:
    """Convert a ratio from dB to linear scale."""
    return float(10.0 ** (db / 10.0))


@dataclasses.dataclass(frozen=True)
class RadioConfig:
    """Radio parameters of the deployment.

    The carrier frequency is recorded for completeness; the path loss
    is anchored at a fixed reference loss, so it is not used in any
    computation.
    """

    bandwidth_hz: float = params.RADIO.BANDWIDTH_HZ
    carrier_hz: float = params.RADIO.CARRIER_HZ
    tx_power_dbm: float = params.RADIO.TX_POWER_DBM
    noise_psd_dbm_per_hz: float = params.RADIO.NOISE_PSD_DBM_PER_HZ
    pathloss_exponent: float = params.RADIO.PATHLOSS_EXPONENT
    ref_loss_db: float = params.RADIO.REF_LOSS_DB
    ref_distance_m: float = params.RADIO.REF_DISTANCE_M
    r_max_m: float = params.RADIO.R_MAX_M

    def __post_init__(self) -> None:
        for name in (
            "bandwidth_hz",
            "carrier_hz",
            "pathloss_exponent",
            "ref_distance_m",
            "r_max_m",
        ):
            value = getattr(self, name)
            if not value > 0:
                raise InvalidRadioConfigException(
                    params.MESSAGES.NON_POSITIVE.format(name, value)
                )

    @property
    def tx_power_w(self) -> float:
        """Transmit power P_tx in watts."""
        return dbm_to_watts(self.tx_power_dbm)

    @property
    def noise_psd(self) -> float:
        """Noise power spectral density N_0 in W/Hz."""
        return dbm_to_watts(self.noise_psd_dbm_per_hz)

    @property
    def energy_per_sample(self) -> float:
        """Average energy per channel use E_s = P_tx / B."""
        return self.tx_power_w / self.bandwidth_hz


DEFAULT_RADIO = RadioConfig()


def path_loss_linear(distance_m: float, cfg: RadioConfig = DEFAULT_RADIO) -> float:
    """Average path loss gain Lambda of the log-distance model.

    PL_dB = ref_loss_db + 10 * beta * log10(r / r_ref) and
    Lambda = 10^(-PL_dB / 10).

    Args:
        distance_m (float): Device-to-receiver distance in meters.
        cfg (otafl.wireless.RadioConfig): Radio parameters.

    Returns:
        float: Linear power gain in (0, 1].

    Raises:
        otafl.wireless.InvalidDistanceException: If distance_m <= 0.

    """
    if not distance_m > 0:
        raise InvalidDistanceException(
            params.MESSAGES.NON_POSITIVE.format("distance", distance_m)
        )
    loss_db = cfg.ref_loss_db + 10.0 * cfg.pathloss_exponent * np.log10(
        distance_m / cfg.ref_distance_m
    )
    return float(10.0 ** (-loss_db / 10.0))


@dataclasses.dataclass
class Deployment:
    """Device positions around the receiver at the origin and their
    average path losses.
    """

    positions: FloatArray
    path_losses: FloatArray

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.path_losses = np.asarray(self.path_losses, dtype=np.float64).reshape(-1)
        if self.positions.shape[0] != self.path_losses.size:
            raise InvalidDeploymentException(
                params.MESSAGES.DEPLOYMENT_SHAPE.format(
                    self.positions.shape[0], self.path_losses.size
                )
            )
        if np.any(self.path_losses <= 0):
            raise InvalidDeploymentException(
                params.MESSAGES.NON_POSITIVE.format("path loss", self.path_losses.min())
            )

    def __len__(self) -> int:
        return int(self.path_losses.size)

    @property
    def distances(self) -> FloatArray:
        """Distances r_m to the receiver."""
        return np.asarray(np.hypot(self.positions[:, 0], self.positions[:, 1]))

    def order_by_decreasing_path_loss(self) -> npt.NDArray[np.int64]:
        """Device indices from the weakest (largest loss) to the
        strongest average channel.
        """
        return np.argsort(self.path_losses, kind="stable").astype(np.int64)

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready representation."""
        return {
            "positions": self.positions.tolist(),
            "distances": self.distances.tolist(),
            "path_losses": self.path_losses.tolist(),
        }

    @classmethod
    def from_dict(
        cls, data: Dict[str, Any], cfg: RadioConfig = DEFAULT_RADIO
    ) -> "Deployment":
        """Inverse of to_dict.

        Raises:
            otafl.wireless.DeploymentRadiusException: If a device lies
                outside (0, r_max].

        """
        deployment = cls(np.array(data["positions"]), np.array(data["path_losses"]))
        distances = deployment.distances
        outside = np.flatnonzero(
            (distances <= 0) | (distances > cfg.r_max_m * (1 + 1e-12))
        )
        if outside.size:
            device = int(outside[0])
            raise DeploymentRadiusException(
                params.MESSAGES.DEPLOYMENT_RADIUS.format(
                    device, distances[device], cfg.r_max_m
                )
            )
        return deployment

    def save(self, path: pathlib.Path) -> None:
        """Write the deployment as JSON."""
        with open(path, "w", encoding="utf-8") as ofile:
            json.dump(self.to_dict(), ofile, indent=2)

    @classmethod
    def load(
        cls, path: pathlib.Path, cfg: RadioConfig = DEFAULT_RADIO
    ) -> "Deployment":
        """Read a deployment written by save."""
        with open(path, "r", encoding="utf-8") as ifile:
            return cls.from_dict(json.load(ifile), cfg)

    @classmethod
    def at_distances(
        cls, distances: FloatArray, cfg: RadioConfig = DEFAULT_RADIO
    ) -> "Deployment":
        """Pin devices on the x axis at the given distances."""
        distances = np.asarray(distances, dtype=np.float64)
        positions = np.column_stack([distances, np.zeros_like(distances)])
        return cls(positions, np.array([path_loss_linear(r, cfg) for r in distances]))


def deploy_uniform_disk(
    n_devices: int,
    rng: np.random.Generator,
    cfg: RadioConfig = DEFAULT_RADIO,
    uniform_in_radius: bool = False,
    min_distance_m: Optional[float] = None,
) -> Deployment:
    """Drop devices uniformly over the disk of radius r_max.

    Radii are r_max * sqrt(U) (uniform over the area) or r_max * U when
    uniform_in_radius is set, then floored at the reference distance.

    Args:
        n_devices (int): Number of devices N >= 1.
        rng (numpy.random.Generator): Deployment stream.
        cfg (otafl.wireless.RadioConfig): Radio parameters.
        uniform_in_radius (bool): Sample the radius uniformly instead.
        min_distance_m (Optional[float]): Distance floor. Defaults to
            the path-loss reference distance.

    Returns:
        otafl.wireless.Deployment: The drawn deployment.

    """
    if n_devices < 1:
        raise InvalidDeploymentException(
            params.MESSAGES.NON_POSITIVE.format("device count", n_devices)
        )
    floor = cfg.ref_distance_m if min_distance_m is None else min_distance_m
    u = rng.uniform(size=n_devices)
    angles = 2.0 * np.pi * rng.uniform(size=n_devices)
    radii = cfg.r_max_m * (u if uniform_in_radius else np.sqrt(u))
    radii = np.clip(radii, floor, cfg.r_max_m)
    positions = np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])
    deployment = Deployment(
        positions, np.array([path_loss_linear(r, cfg) for r in radii])
    )
    logger.info(
        "Deployed %d devices, path loss %.1f..%.1f dB",
        n_devices,
        -10 * np.log10(deployment.path_losses.max()),
        -10 * np.log10(deployment.path_losses.min()),
    )
    return deployment


def draw_fading(
    path_losses: FloatArray, rng: np.random.Generator, rounds: Optional[int] = None
) -> ComplexArray:
    """Draw Rayleigh coefficients h ~ CN(0, Lambda_m).

    Args:
        path_losses (FloatArray): Average path losses Lambda_m > 0.
        rng (numpy.random.Generator): Fading stream.
        rounds (Optional[int]): If given, draw that many independent
            rounds, shape (rounds, N); otherwise one round, shape
            (N,).

    Returns:
        ComplexArray: sqrt(Lambda_m / 2) * (a + ib), a and b standard
            normal.

    Raises:
        otafl.wireless.InvalidDeploymentException: If some
            Lambda_m <= 0.

    """
    path_losses = np.asarray(path_losses, dtype=np.float64)
    if np.any(path_losses <= 0):
        raise InvalidDeploymentException(
            params.MESSAGES.NON_POSITIVE.format("path loss", path_losses.min())
        )
    shape = path_losses.shape if rounds is None else (rounds,) + path_losses.shape
    parts = rng.standard_normal(shape + (2,))
    return np.sqrt(path_losses / 2.0) * (parts[..., 0] + 1j * parts[..., 1])


def draw_noise(
    dimension: int, noise_psd: float, rng: np.random.Generator
) -> ComplexArray:
    """Draw circularly-symmetric receiver noise z ~ CN(0, N_0 I)."""
    parts = rng.standard_normal((dimension, 2))
    return np.sqrt(noise_psd / 2.0) * (parts[:, 0] + 1j * parts[:, 1])


def draw_real_noise(
    dimension: int, noise_psd: float, rng: np.random.Generator
) -> FloatArray:
    """Draw the real aggregation noise, variance N_0 per dimension, so
    that E||z||^2 = d N_0 for the real d-vector the receiver keeps.
    """
    return np.sqrt(noise_psd) * rng.standard_normal(dimension)


class InvalidRadioConfigException(OtaflException):
    """Raised when a radio parameter is not strictly positive."""


class InvalidDistanceException(OtaflException):
    """Raised when a non-positive distance is converted to path loss."""


class InvalidDeploymentException(OtaflException):
    """Raised on an empty deployment or a non-positive path loss."""


class DeploymentRadiusException(OtaflException):
    """Raised when a loaded device lies outside the deployment disk."""
