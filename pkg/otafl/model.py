"""Contains the softmax-regression learning core: local, global and
weighted losses and gradients, the centralized minimizer, the
estimators of the constants the convergence bound consumes, and test
accuracy.

Parameter layout: w is the concatenation of C per-class sub-parameters
w^(c), each holding input_dim weights followed by one bias entry, so a
feature vector x enters as x~ = (x, 1).
"""

import dataclasses
import logging
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
import numpy.typing as npt

import params
from otafl import OtaflException
from otafl.dataset import DeviceDataset, ExamplePool

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
ModelParams = FloatArray


@dataclasses.dataclass(frozen=True)
class LossConfig:
    """Regularized cross-entropy configuration.

    reg is also the strong-convexity constant mu_m of every device.
    softmax_enabled=False drops the cross-entropy term, leaving the
    quadratic reg/2 * ||w||^2 (a sanity mode for solver tests).
    """

    reg: float = params.LEARNING.REG
    n_classes: int = params.LEARNING.N_CLASSES
    softmax_enabled: bool = True

    def __post_init__(self) -> None:
        if not self.reg > 0:
            raise InvalidLossConfigException(
                params.MESSAGES.NON_POSITIVE.format("reg", self.reg)
            )
        if self.n_classes < 1:
            raise InvalidLossConfigException(
                params.MESSAGES.NON_POSITIVE.format("n_classes", self.n_classes)
            )

    def param_dim(self, input_dim: int) -> int:
        """Length d of the parameter vector for a given input length."""
        return self.n_classes * (input_dim + 1)

    def zero_params(self, input_dim: int) -> ModelParams:
        """The all-zero parameter vector."""
        return np.zeros(self.param_dim(input_dim))


DEFAULT_LOSS = LossConfig()


class Minimizer(NamedTuple):
    """A minimizer and the objective value it attains."""

    params: ModelParams
    loss: float


def augment(features: FloatArray) -> FloatArray:
    """Append the constant-1 bias feature to every row."""
    features = np.atleast_2d(features)
    return np.hstack([features, np.ones((features.shape[0], 1))])


def _class_blocks(w: ModelParams, input_dim: int, cfg: LossConfig) -> FloatArray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size != cfg.param_dim(input_dim):
        raise DimensionMismatchException(
            params.MESSAGES.DIMENSION_MISMATCH.format(
                w.size, cfg.n_classes, input_dim + 1
            )
        )
    return w.reshape(cfg.n_classes, input_dim + 1)


def _check_labels(dataset: DeviceDataset, cfg: LossConfig) -> None:
    top = int(dataset.labels.max())
    if top >= cfg.n_classes:
        raise LabelOutOfRangeException(
            params.MESSAGES.LABEL_RANGE.format(dataset.device_id, top, cfg.n_classes)
        )


def log_softmax(logits: FloatArray) -> FloatArray:
    """Row-wise log-softmax via a shifted log-sum-exp."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: FloatArray) -> FloatArray:
    """Row-wise softmax."""
    return np.exp(log_softmax(logits))


def local_loss(
    w: ModelParams, dataset: DeviceDataset, cfg: LossConfig = DEFAULT_LOSS
) -> float:
    """Local objective f_m(w): mean regularized cross-entropy.

    Args:
        w (ModelParams): Parameter vector of length d.
        dataset (otafl.dataset.DeviceDataset): Device dataset.
        cfg (otafl.model.LossConfig): Loss configuration.

    Returns:
        float: (reg/2)||w||^2 plus the mean negative log-likelihood.

    Raises:
        otafl.model.DimensionMismatchException: If w does not match
            the dataset's input length.

    """
    blocks = _class_blocks(w, dataset.input_dim, cfg)
    value = 0.5 * cfg.reg * float(np.dot(w, w))
    if cfg.softmax_enabled:
        _check_labels(dataset, cfg)
        logp = log_softmax(augment(dataset.features) @ blocks.T)
        value -= float(np.mean(logp[np.arange(len(dataset)), dataset.labels]))
    return value


def local_gradient(
    w: ModelParams, dataset: DeviceDataset, cfg: LossConfig = DEFAULT_LOSS
) -> FloatArray:
    """Local gradient g_m = grad f_m(w).

    Per class c the block is reg*w^(c) plus the mean over examples of
    (softmax_c(x~) - 1{c = label}) * x~.

    Args:
        w (ModelParams): Parameter vector of length d.
        dataset (otafl.dataset.DeviceDataset): Device dataset.
        cfg (otafl.model.LossConfig): Loss configuration.

    Returns:
        FloatArray: Gradient of length d.

    Raises:
        otafl.model.DimensionMismatchException: If w does not match
            the dataset's input length.

    """
    blocks = _class_blocks(w, dataset.input_dim, cfg)
    grad = cfg.reg * blocks
    if cfg.softmax_enabled:
        _check_labels(dataset, cfg)
        features = augment(dataset.features)
        residual = softmax(features @ blocks.T)
        residual[np.arange(len(dataset)), dataset.labels] -= 1.0
        grad = grad + residual.T @ features / len(dataset)
    return grad.reshape(-1)


def check_weights(weights: Sequence[float], n_devices: int) -> FloatArray:
    """Validate a participation vector (non-negative, sums to 1).

    Raises:
        otafl.model.InvalidWeightsException: On a malformed vector.

    """
    p = np.asarray(weights, dtype=np.float64)
    if p.shape != (n_devices,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise InvalidWeightsException(params.MESSAGES.BAD_WEIGHTS)
    return p


def uniform_weights(n_devices: int) -> FloatArray:
    """The uniform participation vector 1/N."""
    if n_devices < 1:
        raise NoDevicesException(params.MESSAGES.NO_DEVICES)
    return np.full(n_devices, 1.0 / n_devices)


def weighted_loss(
    w: ModelParams,
    datasets: Sequence[DeviceDataset],
    weights: Sequence[float],
    cfg: LossConfig = DEFAULT_LOSS,
) -> float:
    """Inconsistent objective F~(w) = sum_m p_m f_m(w).

    Raises:
        otafl.model.NoDevicesException: If datasets is empty.
        otafl.model.InvalidWeightsException: On a malformed weights
            vector.

    """
    if not datasets:
        raise NoDevicesException(params.MESSAGES.NO_DEVICES)
    p = check_weights(weights, len(datasets))
    value = 0.0
    for p_m, dataset in zip(p, datasets):
        value += p_m * local_loss(w, dataset, cfg)
    return value


def weighted_gradient(
    w: ModelParams,
    datasets: Sequence[DeviceDataset],
    weights: Sequence[float],
    cfg: LossConfig = DEFAULT_LOSS,
) -> FloatArray:
    """Gradient of F~ at w, summed in device order."""
    if not datasets:
        raise NoDevicesException(params.MESSAGES.NO_DEVICES)
    p = check_weights(weights, len(datasets))
    grad = np.zeros_like(np.asarray(w, dtype=np.float64))
    for p_m, dataset in zip(p, datasets):
        grad += p_m * local_gradient(w, dataset, cfg)
    return grad


def global_loss(
    w: ModelParams, datasets: Sequence[DeviceDataset], cfg: LossConfig = DEFAULT_LOSS
) -> float:
    """Global objective F(w) = (1/N) sum_m f_m(w)."""
    return weighted_loss(w, datasets, uniform_weights(len(datasets)), cfg)


def global_gradient(
    w: ModelParams, datasets: Sequence[DeviceDataset], cfg: LossConfig = DEFAULT_LOSS
) -> FloatArray:
    """Global gradient (1/N) sum_m g_m."""
    return weighted_gradient(w, datasets, uniform_weights(len(datasets)), cfg)


def local_gradients(
    w: ModelParams, datasets: Sequence[DeviceDataset], cfg: LossConfig = DEFAULT_LOSS
) -> FloatArray:
    """Stack every device's local gradient into an (N, d) array."""
    return np.stack([local_gradient(w, dataset, cfg) for dataset in datasets])


def estimate_smoothness(
    dataset: DeviceDataset,
    cfg: LossConfig = DEFAULT_LOSS,
    tol: float = params.LEARNING.POWER_ITER_TOL,
    max_iter: int = params.LEARNING.POWER_ITER_MAX_ITER,
) -> float:
    """Smoothness constant L_m = reg + lambda_max(mean x~ x~^T) / 2.

    lambda_max comes from power iteration on the Gram operator
    v -> X~^T (X~ v) / n; the Gram matrix itself is never formed.

    Args:
        dataset (otafl.dataset.DeviceDataset): Device dataset.
        cfg (otafl.model.LossConfig): Loss configuration.
        tol (float): Relative tolerance on successive eigenvalue
            estimates.
        max_iter (int): Iteration cap.

    Returns:
        float: Upper bound on the Lipschitz constant of local_gradient.

    Raises:
        otafl.model.PowerIterationException: If the cap is reached.

    """
    if not cfg.softmax_enabled:
        return cfg.reg
    features = augment(dataset.features)
    n_samples = features.shape[0]
    vector = np.random.default_rng(params.STREAMS.SOLVER).standard_normal(
        features.shape[1]
    )
    vector /= np.linalg.norm(vector)
    eigenvalue = 0.0
    for _ in range(max_iter):
        image = features.T @ (features @ vector) / n_samples
        estimate = float(np.dot(vector, image))
        norm = float(np.linalg.norm(image))
        if norm == 0.0:
            return cfg.reg
        vector = image / norm
        if abs(estimate - eigenvalue) <= tol * abs(estimate):
            return cfg.reg + 0.5 * estimate
        eigenvalue = estimate
    raise PowerIterationException(params.MESSAGES.POWER_ITERATION.format(max_iter))


def solve_minimizer(
    datasets: Sequence[DeviceDataset],
    weights: Optional[Sequence[float]] = None,
    cfg: LossConfig = DEFAULT_LOSS,
    tol: float = params.LEARNING.MINIMIZER_TOL,
    start: Optional[ModelParams] = None,
    max_iter: int = params.LEARNING.MINIMIZER_MAX_ITER,
) -> Minimizer:
    """Minimize sum_m p_m f_m by Nesterov-accelerated gradient descent.

    The stepsize is 1/L~ and the momentum (sqrt(L~) - sqrt(mu)) /
    (sqrt(L~) + sqrt(mu)), with L~ = sum_m p_m L_m and mu = reg; strong
    convexity makes the minimizer unique. Uniform weights (the default)
    solve for w*.

    Args:
        datasets (Sequence[otafl.dataset.DeviceDataset]): Device
            datasets.
        weights (Optional[Sequence[float]]): Participation vector p.
            Defaults to uniform.
        cfg (otafl.model.LossConfig): Loss configuration.
        tol (float): Gradient-norm tolerance.
        start (Optional[ModelParams]): Initial iterate. Defaults to 0.
        max_iter (int): Iteration cap.

    Returns:
        otafl.model.Minimizer: w with ||grad|| <= tol and its objective
            value.

    Raises:
        otafl.model.MinimizerNotConvergedException: If the cap is
            reached; carries the best iterate found.

    """
    if not tol > 0:
        raise InvalidLossConfigException(
            params.MESSAGES.NON_POSITIVE.format("tol", tol)
        )
    if not datasets:
        raise NoDevicesException(params.MESSAGES.NO_DEVICES)
    p = (
        uniform_weights(len(datasets))
        if weights is None
        else check_weights(weights, len(datasets))
    )
    smoothness = float(
        np.dot(p, [estimate_smoothness(dataset, cfg) for dataset in datasets])
    )
    momentum = (np.sqrt(smoothness) - np.sqrt(cfg.reg)) / (
        np.sqrt(smoothness) + np.sqrt(cfg.reg)
    )
    current = (
        cfg.zero_params(datasets[0].input_dim)
        if start is None
        else np.array(start, dtype=np.float64)
    )
    previous = current.copy()
    best, best_norm = current.copy(), np.inf
    for iteration in range(max_iter):
        lookahead = current + momentum * (current - previous)
        grad = weighted_gradient(lookahead, datasets, p, cfg)
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < best_norm:
            best, best_norm = lookahead.copy(), grad_norm
        if grad_norm <= tol:
            logger.debug(
                "Minimizer converged in %d iterations (|grad| = %.3e)",
                iteration,
                grad_norm,
            )
            return Minimizer(lookahead, weighted_loss(lookahead, datasets, p, cfg))
        previous, current = current, lookahead - grad / smoothness
    raise MinimizerNotConvergedException(
        params.MESSAGES.NOT_CONVERGED.format(max_iter, best_norm), best, best_norm
    )


def solve_global_minimizer(
    datasets: Sequence[DeviceDataset],
    tol: float = params.LEARNING.MINIMIZER_TOL,
    cfg: LossConfig = DEFAULT_LOSS,
    start: Optional[ModelParams] = None,
) -> Minimizer:
    """Compute w* = argmin F(w) and F(w*).

    See otafl.model.solve_minimizer.
    """
    return solve_minimizer(datasets, None, cfg, tol, start)


def estimate_kappa(
    datasets: Sequence[DeviceDataset],
    w_star: ModelParams,
    cfg: LossConfig = DEFAULT_LOSS,
) -> float:
    """kappa = sqrt((1/N) sum_m ||grad f_m(w*)||^2)."""
    gradients = local_gradients(w_star, datasets, cfg)
    return float(np.sqrt(np.mean(np.sum(gradients**2, axis=1))))


def warmup_trajectory(
    datasets: Sequence[DeviceDataset],
    start: ModelParams,
    stepsize: float,
    rounds: int,
    cfg: LossConfig = DEFAULT_LOSS,
) -> List[ModelParams]:
    """Iterates of error-free centralized gradient descent on F.

    Returns:
        List[ModelParams]: rounds + 1 iterates, starting with start.

    """
    trajectory = [np.array(start, dtype=np.float64)]
    for _ in range(rounds):
        w = trajectory[-1]
        trajectory.append(w - stepsize * global_gradient(w, datasets, cfg))
    return trajectory


def estimate_gmax(
    datasets: Sequence[DeviceDataset],
    trajectory: Sequence[ModelParams],
    cfg: LossConfig = DEFAULT_LOSS,
    safety: float = params.EXPERIMENT.GMAX_SAFETY,
    floor: float = params.LEARNING.GMAX_FLOOR,
) -> float:
    """G_max = safety * max of ||g_m|| over iterates and devices.

    Raises:
        otafl.model.EmptyTrajectoryException: If trajectory is empty.

    """
    if not trajectory:
        raise EmptyTrajectoryException(params.MESSAGES.EMPTY_TRAJECTORY)
    largest = max(
        float(np.max(np.linalg.norm(local_gradients(w, datasets, cfg), axis=1)))
        for w in trajectory
    )
    return max(safety * largest, floor)


def predict(
    w: ModelParams, features: FloatArray, cfg: LossConfig = DEFAULT_LOSS
) -> npt.NDArray[np.int64]:
    """Argmax-class prediction; ties go to the lowest class index."""
    features = np.atleast_2d(features)
    blocks = _class_blocks(w, features.shape[1], cfg)
    return np.argmax(augment(features) @ blocks.T, axis=1).astype(np.int64)


def test_accuracy(
    w: ModelParams, test_set: ExamplePool, cfg: LossConfig = DEFAULT_LOSS
) -> float:
    """Fraction of test examples classified correctly.

    Raises:
        otafl.model.EmptyTestSetException: If test_set is empty.

    """
    if not len(test_set):
        raise EmptyTestSetException(params.MESSAGES.EMPTY_TEST_SET)
    return float(np.mean(predict(w, test_set.features, cfg) == test_set.labels))


def normalized_accuracy(
    w: ModelParams,
    w_star: ModelParams,
    test_set: ExamplePool,
    cfg: LossConfig = DEFAULT_LOSS,
) -> float:
    """Accuracy of w relative to that of the global minimizer w*.

    Raises:
        otafl.model.ZeroReferenceAccuracyException: If w* classifies
            nothing correctly.

    """
    reference = test_accuracy(w_star, test_set, cfg)
    if reference <= 0:
        raise ZeroReferenceAccuracyException(params.MESSAGES.ZERO_REFERENCE_ACCURACY)
    return test_accuracy(w, test_set, cfg) / reference


class InvalidLossConfigException(OtaflException):
    """Raised when a loss or solver parameter is not positive."""


class DimensionMismatchException(OtaflException):
    """Raised when a parameter vector does not fit the features."""


class LabelOutOfRangeException(OtaflException):
    """Raised when a label is not below the class count."""


class NoDevicesException(OtaflException):
    """Raised when an operation needs at least one device."""


class InvalidWeightsException(OtaflException):
    """Raised when participation weights are not a simplex vector."""


class PowerIterationException(OtaflException):
    """Raised when power iteration exceeds its iteration cap."""


class EmptyTrajectoryException(OtaflException):
    """Raised when G_max is estimated from an empty trajectory."""


class EmptyTestSetException(OtaflException):
    """Raised when accuracy is requested on an empty test set."""


class ZeroReferenceAccuracyException(OtaflException):
    """Raised when normalizing by a zero reference accuracy."""


class MinimizerNotConvergedException(OtaflException):
    """Raised when the minimizer reaches its iteration cap.

    Class instance attributes:
        best_params (ModelParams): Iterate with the smallest gradient
            norm seen.
        best_gradient_norm (float): Its gradient norm.

    """

    def __init__(
        self, message: str, best_params: ModelParams, best_gradient_norm: float
    ) -> None:
        super().__init__(message)
        self.best_params = best_params
        self.best_gradient_norm = best_gradient_norm
