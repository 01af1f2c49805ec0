"""Contains experiment orchestration: configuration, the shared
experiment setup, the federated training loop under every aggregation
policy, stepsize grid search, replicate averaging and the policy
comparison.
"""

import concurrent.futures
import dataclasses
import functools
import json
import logging
import math
import pathlib
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib  # type: ignore[no-redef]
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

import params
from otafl import OtaflException
from otafl.bound import (
    BoundBreakdown,
    BoundConstants,
    assemble_constants,
    bound_curve,
    check_stepsize,
    model_bias_bound,
    stepsize_range,
    surrogate_error_bound,
    true_model_bias,
)
from otafl.dataset import (
    DeviceDataset,
    ExamplePool,
    load_mnist,
    partition_one_class_per_device,
    sample_subset,
    synthetic_class_means,
    synthetic_pool,
)
from otafl.design import PolicyKind, PreScaledPolicy, RoundPolicy, build_policy
from otafl.model import (
    LossConfig,
    ModelParams,
    ZeroReferenceAccuracyException,
    estimate_gmax,
    estimate_kappa,
    estimate_smoothness,
    global_loss,
    local_gradients,
    solve_global_minimizer,
    test_accuracy,
    warmup_trajectory,
)
from otafl.ota import GmaxViolationException, PreScalerSet
from otafl.rng import Streams
from otafl.wireless import (
    DEFAULT_RADIO,
    Deployment,
    RadioConfig,
    deploy_uniform_disk,
    draw_fading,
    draw_real_noise,
)

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]

DEFAULT_POLICIES = (
    PolicyKind.MIN_VARIANCE,
    PolicyKind.ZERO_BIAS,
    PolicyKind.VANILLA_OTA,
    PolicyKind.BBFL_INTERIOR,
    PolicyKind.BBFL_ALTERNATING,
)


@dataclasses.dataclass
class ExperimentConfig:
    """Configuration of one experiment.

    Defaults reproduce the reference setting: 10 devices holding 10
    examples of a single class each, a 4000 ms training budget and 50
    replicates. Without mnist_dir a synthetic image-like data source of
    input_dim pixels is used.

    stepsizes maps a policy name to a fixed stepsize; policies without
    an entry get theirs from a grid search over grid (or, if grid is
    None, grid_points logarithmic points spanning [grid_low, grid_high]
    times the policy's stepsize scale).
    """

    radio: RadioConfig = DEFAULT_RADIO
    n_devices: int = params.EXPERIMENT.N_DEVICES
    mnist_dir: Optional[str] = None
    input_dim: int = params.LEARNING.INPUT_DIM
    samples_per_class: int = params.EXPERIMENT.SAMPLES_PER_CLASS
    test_size: int = params.EXPERIMENT.TEST_SIZE
    reg: float = params.LEARNING.REG
    budget_ms: float = params.EXPERIMENT.BUDGET_MS
    policies: Tuple[PolicyKind, ...] = DEFAULT_POLICIES
    stepsizes: Dict[str, float] = dataclasses.field(default_factory=dict)
    grid: Optional[List[float]] = None
    grid_points: int = params.EXPERIMENT.GRID_POINTS
    grid_low: float = params.EXPERIMENT.GRID_LOW
    grid_high: float = params.EXPERIMENT.GRID_HIGH
    grid_replicates: int = params.EXPERIMENT.GRID_REPLICATES
    replicates: int = params.EXPERIMENT.REPLICATES
    seed: int = params.EXPERIMENT.SEED
    log_every: int = params.EXPERIMENT.LOG_EVERY
    gmax_safety: float = params.EXPERIMENT.GMAX_SAFETY
    r_in_fraction: float = params.EXPERIMENT.R_IN_FRACTION
    mix_probability: float = params.EXPERIMENT.MIX_PROBABILITY
    divergence_factor: float = params.EXPERIMENT.DIVERGENCE_FACTOR
    uniform_in_radius: bool = False
    deployment_file: Optional[str] = None
    workers: int = 1
    trace: Optional[str] = None

    def __post_init__(self) -> None:
        self.policies = tuple(
            kind if isinstance(kind, PolicyKind) else PolicyKind.parse(kind)
            for kind in self.policies
        )
        self.stepsizes = {
            PolicyKind.parse(name).value: float(value)
            for name, value in self.stepsizes.items()
        }
        for name in (
            "n_devices",
            "input_dim",
            "samples_per_class",
            "test_size",
            "reg",
            "budget_ms",
            "grid_points",
            "grid_low",
            "grid_high",
            "grid_replicates",
            "replicates",
            "log_every",
            "gmax_safety",
            "divergence_factor",
            "workers",
        ):
            value = getattr(self, name)
            if not value > 0:
                raise InvalidConfigException(
                    params.MESSAGES.BAD_CONFIG_VALUE.format(name, value)
                )
        if self.seed < 0:
            raise InvalidConfigException(
                params.MESSAGES.BAD_CONFIG_VALUE.format("seed", self.seed)
            )
        if not 0 < self.r_in_fraction <= 1:
            raise InvalidConfigException(
                params.MESSAGES.BAD_CONFIG_VALUE.format(
                    "r_in_fraction", self.r_in_fraction
                )
            )
        if not 0 <= self.mix_probability <= 1:
            raise InvalidConfigException(
                params.MESSAGES.BAD_CONFIG_VALUE.format(
                    "mix_probability", self.mix_probability
                )
            )
        for name, value in self.stepsizes.items():
            if not value > 0:
                raise InvalidConfigException(
                    params.MESSAGES.BAD_CONFIG_VALUE.format(f"stepsizes.{name}", value)
                )
        if self.grid is not None and not self.grid:
            raise EmptyGridException(params.MESSAGES.EMPTY_GRID)

    @property
    def r_in(self) -> float:
        """Interior radius of the BB-FL baselines in meters."""
        return self.r_in_fraction * self.radio.r_max_m

    def replace(self, **changes: Any) -> "ExperimentConfig":
        """Copy of self with some fields changed; None values are
        ignored so that unset command-line flags keep file values.
        """
        return dataclasses.replace(
            self, **{key: value for key, value in changes.items() if value is not None}
        )


def _check_keys(data: Dict[str, Any], allowed: Sequence[str], prefix: str) -> None:
    for key in data:
        if key not in allowed:
            raise InvalidConfigException(
                params.MESSAGES.BAD_CONFIG_KEY.format(prefix + key)
            )


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    """Build an ExperimentConfig from a nested mapping.

    Keys match the dataclass field names; the radio parameters live in
    a nested "radio" table keyed by RadioConfig field names.

    Raises:
        otafl.harness.InvalidConfigException: On an unknown key or an
            invalid value.

    """
    data = dict(data)
    _check_keys(
        data, [field.name for field in dataclasses.fields(ExperimentConfig)], ""
    )
    if "radio" in data:
        radio = data["radio"]
        if not isinstance(radio, dict):
            raise InvalidConfigException(
                params.MESSAGES.BAD_CONFIG_VALUE.format("radio", radio)
            )
        _check_keys(
            radio, [field.name for field in dataclasses.fields(RadioConfig)], "radio."
        )
        data["radio"] = RadioConfig(**radio)
    if "policies" in data:
        data["policies"] = tuple(data["policies"])
    try:
        return ExperimentConfig(**data)
    except TypeError as error:
        raise InvalidConfigException(
            params.MESSAGES.BAD_CONFIG_VALUE.format("configuration", str(error))
        ) from error


def load_config(path: pathlib.Path) -> ExperimentConfig:
    """Read an ExperimentConfig from a .json or .toml file.

    Args:
        path (pathlib.Path): Configuration file path.

    Returns:
        otafl.harness.ExperimentConfig: The configuration, defaults
            filled in from params.

    Raises:
        otafl.harness.InvalidConfigException: On an unsupported file
            type, an unknown key or an invalid value.

    """
    suffix = path.suffix.lower()
    if suffix == ".json":
        with open(path, "r", encoding="utf-8") as ifile:
            data = json.load(ifile)
    elif suffix == ".toml":
        with open(path, "rb") as bfile:
            data = tomllib.load(bfile)
    else:
        raise InvalidConfigException(params.MESSAGES.BAD_CONFIG_FILE.format(path))
    logger.info("Loaded configuration from %s", path)
    return config_from_dict(data)


def load_design(path: pathlib.Path, kind: PolicyKind) -> PreScalerSet:
    """Read the pre-scalers of one policy from a design.json written by
    the design command.

    Raises:
        otafl.harness.InvalidConfigException: If the file holds no
            design of kind.

    """
    with open(path, "r", encoding="utf-8") as ifile:
        table = json.load(ifile)
    if kind.value not in table:
        raise InvalidConfigException(
            params.MESSAGES.BAD_CONFIG_VALUE.format("design", str(path))
        )
    return PreScalerSet.from_dict(table[kind.value])


def rounds_from_budget(cfg: ExperimentConfig, dimension: int) -> int:
    """Number of rounds T = floor(budget_s * B / d) that fit the
    training budget, every round uploading d samples at B samples/s.

    Raises:
        otafl.harness.BudgetTooShortException: If not even one round
            fits.

    """
    rounds = math.floor(
        cfg.budget_ms * cfg.radio.bandwidth_hz / (1000.0 * dimension) * (1 + 1e-12)
    )
    if rounds < 1:
        raise BudgetTooShortException(
            params.MESSAGES.BUDGET_TOO_SHORT.format(
                cfg.budget_ms, elapsed_ms(1, dimension, cfg.radio.bandwidth_hz)
            )
        )
    return rounds


def elapsed_ms(rounds: int, dimension: int, bandwidth_hz: float) -> float:
    """Wall-clock time of the given number of rounds in milliseconds."""
    return rounds * dimension / bandwidth_hz * 1000.0


@dataclasses.dataclass
class ExperimentSetup:
    """Everything shared by the runs of one experiment: deployment,
    data partition, test set, global minimizer and estimated constants.

    Class instance attributes:
        config (otafl.harness.ExperimentConfig): Configuration.
        deployment (otafl.wireless.Deployment): Fixed deployment.
        datasets (List[otafl.dataset.DeviceDataset]): Device datasets.
        test_set (otafl.dataset.ExamplePool): Held-out examples.
        loss_cfg (otafl.model.LossConfig): Loss configuration.
        w_start (ModelParams): Initial model w_0.
        w_star (ModelParams): Global minimizer w*.
        optimum_loss (float): F(w*).
        reference_accuracy (float): Test accuracy of w*.
        kappa (float): Gradient dissimilarity at w*.
        g_max (float): Gradient norm bound G_max.
        smoothness (FloatArray): Per-device L_m.
        rounds (int): Rounds T within the budget.

    """

    config: ExperimentConfig
    deployment: Deployment
    datasets: List[DeviceDataset]
    test_set: ExamplePool
    loss_cfg: LossConfig
    w_start: ModelParams
    w_star: ModelParams
    optimum_loss: float
    reference_accuracy: float
    kappa: float
    g_max: float
    smoothness: FloatArray
    rounds: int
    _policies: Dict[PolicyKind, RoundPolicy] = dataclasses.field(
        default_factory=dict, repr=False
    )

    @property
    def dimension(self) -> int:
        """Model dimension d."""
        return int(self.w_start.size)

    @property
    def energy_per_sample(self) -> float:
        """E_s of the radio configuration."""
        return self.config.radio.energy_per_sample

    @property
    def noise_psd(self) -> float:
        """N_0 of the radio configuration."""
        return self.config.radio.noise_psd

    def policy(self, kind: PolicyKind) -> RoundPolicy:
        """The round policy of a kind, built once per setup."""
        if kind not in self._policies:
            self._policies[kind] = build_policy(
                kind,
                self.deployment,
                self.dimension,
                self.energy_per_sample,
                self.g_max,
                self.config.r_in,
                self.config.mix_probability,
            )
        return self._policies[kind]

    def prescalers(self, kind: PolicyKind) -> PreScalerSet:
        """Pre-scaler design of MIN_VARIANCE or ZERO_BIAS."""
        policy = self.policy(kind)
        if not isinstance(policy, PreScaledPolicy):
            raise NotPreScaledException(
                params.MESSAGES.NOT_PRESCALED.format(kind.value)
            )
        return policy.prescalers

    def use_design(self, kind: PolicyKind, prescalers: PreScalerSet) -> None:
        """Replace the computed design of a pre-scaled policy, e.g. with
        one read by otafl.harness.load_design.

        Raises:
            otafl.harness.NotPreScaledException: For a baseline policy.
            otafl.harness.DesignMismatchException: If the design was
                made for another deployment or model dimension.

        """
        if not kind.is_prescaled:
            raise NotPreScaledException(
                params.MESSAGES.NOT_PRESCALED.format(kind.value)
            )
        if (
            prescalers.dimension != self.dimension
            or len(prescalers) != len(self.deployment)
            or not np.allclose(
                prescalers.path_losses, self.deployment.path_losses, rtol=1e-9, atol=0
            )
        ):
            raise DesignMismatchException(
                params.MESSAGES.DESIGN_MISMATCH.format(kind.value)
            )
        self._policies[kind] = PreScaledPolicy(prescalers, kind)

    def bound_constants(
        self,
        kind: PolicyKind,
        stepsize: float,
        w_tilde: Optional[ModelParams] = None,
    ) -> BoundConstants:
        """Bound constants of a pre-scaled policy at a stepsize."""
        return assemble_constants(
            self.prescalers(kind),
            np.full(len(self.datasets), self.loss_cfg.reg),
            self.smoothness,
            self.kappa,
            self.noise_psd,
            stepsize,
            self.w_start,
            self.w_star,
            w_tilde,
        )

    def stepsize_scale(self, kind: PolicyKind) -> float:
        """Upper end 2 / (mu~ + L~) of the admissible stepsizes of a
        pre-scaled policy, 2 / (mu + L) of the uniform objective
        otherwise.
        """
        if kind.is_prescaled:
            return stepsize_range(self.bound_constants(kind, 0.0))[1]
        return 2.0 / (self.loss_cfg.reg + float(np.mean(self.smoothness)))

    def normalized_accuracy(self, w: ModelParams) -> float:
        """Test accuracy of w relative to that of w*."""
        return test_accuracy(w, self.test_set, self.loss_cfg) / self.reference_accuracy


def _load_data(
    cfg: ExperimentConfig, rng: np.random.Generator
) -> Tuple[List[DeviceDataset], ExamplePool]:
    if cfg.mnist_dir is not None:
        directory = pathlib.Path(cfg.mnist_dir)
        train, test = load_mnist(directory, "train"), load_mnist(directory, "test")
    else:
        means = synthetic_class_means(rng, cfg.n_devices, cfg.input_dim)
        train = synthetic_pool(means, cfg.samples_per_class, rng)
        test = synthetic_pool(means, -(-cfg.test_size // cfg.n_devices), rng)
    datasets = partition_one_class_per_device(
        train, cfg.n_devices, cfg.samples_per_class, rng
    )
    return datasets, sample_subset(test, cfg.test_size, rng)


def prepare_experiment(cfg: ExperimentConfig) -> ExperimentSetup:
    """Draw the deployment and the data, solve for w* and estimate every
    constant the runs and the bound need.

    The deployment comes from cfg.deployment_file when set. G_max is
    the safety factor times the largest local gradient norm seen along
    error-free gradient descent from w_0 over the whole budget.

    Args:
        cfg (otafl.harness.ExperimentConfig): Configuration.

    Returns:
        otafl.harness.ExperimentSetup: The shared setup.

    Raises:
        otafl.model.ZeroReferenceAccuracyException: If w* classifies
            no test example correctly.

    """
    streams = Streams(cfg.seed)
    if cfg.deployment_file is not None:
        deployment = Deployment.load(pathlib.Path(cfg.deployment_file), cfg.radio)
        if len(deployment) != cfg.n_devices:
            raise InvalidConfigException(
                params.MESSAGES.BAD_CONFIG_VALUE.format(
                    "deployment_file", cfg.deployment_file
                )
            )
    else:
        deployment = deploy_uniform_disk(
            cfg.n_devices, streams.deployment(), cfg.radio, cfg.uniform_in_radius
        )
    datasets, test_set = _load_data(cfg, streams.data())
    loss_cfg = LossConfig(reg=cfg.reg, n_classes=cfg.n_devices)
    w_start = loss_cfg.zero_params(datasets[0].input_dim)
    rounds = rounds_from_budget(cfg, w_start.size)

    minimizer = solve_global_minimizer(datasets, cfg=loss_cfg)
    kappa = estimate_kappa(datasets, minimizer.params, loss_cfg)
    smoothness = np.array(
        [estimate_smoothness(dataset, loss_cfg) for dataset in datasets]
    )
    trajectory = warmup_trajectory(
        datasets, w_start, 1.0 / float(np.mean(smoothness)), rounds, loss_cfg
    )
    g_max = estimate_gmax(datasets, trajectory, loss_cfg, cfg.gmax_safety)
    reference_accuracy = test_accuracy(minimizer.params, test_set, loss_cfg)
    if reference_accuracy <= 0:
        raise ZeroReferenceAccuracyException(params.MESSAGES.ZERO_REFERENCE_ACCURACY)
    logger.info(
        "Setup: d=%d T=%d F(w*)=%.6f kappa=%.4e G_max=%.4e L=%.4e..%.4e acc(w*)=%.4f",
        w_start.size,
        rounds,
        minimizer.loss,
        kappa,
        g_max,
        smoothness.min(),
        smoothness.max(),
        reference_accuracy,
    )
    return ExperimentSetup(
        config=cfg,
        deployment=deployment,
        datasets=datasets,
        test_set=test_set,
        loss_cfg=loss_cfg,
        w_start=w_start,
        w_star=minimizer.params,
        optimum_loss=minimizer.loss,
        reference_accuracy=reference_accuracy,
        kappa=kappa,
        g_max=g_max,
        smoothness=smoothness,
        rounds=rounds,
    )


class RoundRecord(NamedTuple):
    """Metrics of one logged round.

    distance is ||w_t - w*||; chi holds the transmit indicators of the
    round's aggregation (all False at the final logged round, which
    does not aggregate).
    """

    round_index: int
    elapsed_ms: float
    loss: float
    accuracy: float
    distance: float
    chi: Tuple[bool, ...]


@dataclasses.dataclass
class RunResult:
    """Outcome of one training run of one policy.

    Class instance attributes:
        kind (otafl.design.PolicyKind): Policy.
        stepsize (float): Stepsize eta.
        replicate (int): Replicate index.
        records (List[otafl.harness.RoundRecord]): Logged rounds.
        transmit_frequency (FloatArray): Fraction of rounds each device
            transmitted in.
        participation (FloatArray): Time-average weight of each
            device's gradient in the estimate.
        skipped_rounds (int): Rounds skipped on a zero channel.
        final_params (ModelParams): w_T.
        trace (List[Dict[str, Any]]): Round trace entries, if collected.

    """

    kind: PolicyKind
    stepsize: float
    replicate: int
    records: List[RoundRecord]
    transmit_frequency: FloatArray
    participation: FloatArray
    skipped_rounds: int
    final_params: ModelParams
    trace: List[Dict[str, Any]] = dataclasses.field(default_factory=list)

    @property
    def times(self) -> FloatArray:
        """Elapsed milliseconds of the logged rounds."""
        return np.array([record.elapsed_ms for record in self.records])

    @property
    def losses(self) -> FloatArray:
        """F(w_t) at the logged rounds."""
        return np.array([record.loss for record in self.records])

    @property
    def accuracies(self) -> FloatArray:
        """Normalized accuracy at the logged rounds."""
        return np.array([record.accuracy for record in self.records])

    @property
    def distances(self) -> FloatArray:
        """||w_t - w*|| at the logged rounds."""
        return np.array([record.distance for record in self.records])

    @property
    def final_loss(self) -> float:
        """F(w_T)."""
        return self.records[-1].loss


def run_experiment(
    setup: ExperimentSetup,
    kind: PolicyKind,
    stepsize: float,
    replicate: int = 0,
    collect_trace: bool = False,
    stop_on_divergence: bool = False,
) -> RunResult:
    """Train for T rounds of w_(t+1) = w_t - eta * g^_t under a policy.

    Every round draws the fading and the noise before the policy acts,
    so all policies of one replicate see the same channel and noise
    realizations. The downlink broadcast of w_t is error-free.

    Args:
        setup (otafl.harness.ExperimentSetup): Shared setup.
        kind (otafl.design.PolicyKind): Policy.
        stepsize (float): Stepsize eta > 0; for pre-scaled policies it
            must lie in [0, 2 / (mu~ + L~)].
        replicate (int): Replicate index selecting the random
            sub-streams.
        collect_trace (bool): Whether to keep round trace entries.
        stop_on_divergence (bool): Raise DivergedException once the
            loss exceeds divergence_factor times F(w_0).

    Returns:
        otafl.harness.RunResult: Deterministic per (setup, kind,
            stepsize, replicate).

    Raises:
        otafl.ota.GmaxViolationException: If a local gradient exceeds
            G_max mid-run.
        otafl.bound.StepsizeRangeException: If a pre-scaled policy gets
            an inadmissible stepsize.
        otafl.harness.DivergedException: See stop_on_divergence.

    """
    cfg = setup.config
    if not stepsize > 0:
        raise InvalidConfigException(
            params.MESSAGES.BAD_CONFIG_VALUE.format("stepsize", stepsize)
        )
    if kind.is_prescaled:
        check_stepsize(setup.bound_constants(kind, stepsize))
    policy = setup.policy(kind)
    streams = Streams(cfg.seed)
    fading_rng = streams.fading(replicate)
    noise_rng = streams.noise(replicate)
    policy_rng = streams.policy(replicate)
    n_devices = len(setup.datasets)
    path_losses = setup.deployment.path_losses

    w = setup.w_start.copy()
    initial_loss = global_loss(w, setup.datasets, setup.loss_cfg)
    records = []  # type: List[RoundRecord]
    trace = []  # type: List[Dict[str, Any]]
    transmissions = np.zeros(n_devices)
    weight_sum = np.zeros(n_devices)
    skipped = 0
    chi = np.zeros(n_devices, dtype=bool)
    for t in range(setup.rounds + 1):
        if t % cfg.log_every == 0 or t == setup.rounds:
            loss = global_loss(w, setup.datasets, setup.loss_cfg)
            records.append(
                RoundRecord(
                    t,
                    elapsed_ms(t, setup.dimension, cfg.radio.bandwidth_hz),
                    loss,
                    setup.normalized_accuracy(w),
                    float(np.linalg.norm(w - setup.w_star)),
                    tuple(bool(value) for value in chi),
                )
            )
            if stop_on_divergence and not loss <= cfg.divergence_factor * initial_loss:
                raise DivergedException(
                    params.MESSAGES.DIVERGED.format(kind.value, stepsize, t)
                )
        if t == setup.rounds:
            break
        gradients = local_gradients(w, setup.datasets, setup.loss_cfg)
        fading = draw_fading(path_losses, fading_rng)
        noise = draw_real_noise(setup.dimension, setup.noise_psd, noise_rng)
        try:
            result = policy.aggregate(gradients, fading, noise, policy_rng)
        except GmaxViolationException:
            logger.error(
                "%s aborted at round %d of replicate %d", kind.value, t, replicate
            )
            raise
        if result is None:
            skipped += 1
            chi = np.zeros(n_devices, dtype=bool)
            continue
        chi = result.outcome.chi
        transmissions += chi
        weight_sum += result.weights
        w = w - stepsize * result.outcome.estimate
        if collect_trace and t % cfg.log_every == 0:
            trace.append(
                {
                    "policy": kind.value,
                    "replicate": replicate,
                    "round": t,
                    "chi": [int(value) for value in chi],
                    "estimate_norm": float(np.linalg.norm(result.outcome.estimate)),
                }
            )
        logger.debug(
            "%s r%d t=%d transmitted=%d |g^|=%.4e",
            kind.value,
            replicate,
            t,
            int(chi.sum()),
            float(np.linalg.norm(result.outcome.estimate)),
        )
    return RunResult(
        kind,
        stepsize,
        replicate,
        records,
        transmissions / setup.rounds,
        weight_sum / setup.rounds,
        skipped,
        w,
        trace,
    )


def run_replicates(
    setup: ExperimentSetup,
    kind: PolicyKind,
    stepsize: float,
    replicates: Sequence[int],
    workers: int = 1,
    collect_trace: bool = False,
    stop_on_divergence: bool = False,
) -> List[RunResult]:
    """Run a policy over several replicates, in parallel processes when
    workers > 1, and return the results sorted by replicate index.
    """
    job = functools.partial(
        run_experiment,
        setup,
        kind,
        stepsize,
        collect_trace=collect_trace,
        stop_on_divergence=stop_on_divergence,
    )
    if workers <= 1 or len(replicates) <= 1:
        results = [job(replicate) for replicate in replicates]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(job, replicates))
    return sorted(results, key=lambda result: result.replicate)


def default_grid(setup: ExperimentSetup, kind: PolicyKind) -> List[float]:
    """Logarithmic grid over [grid_low, grid_high] times the policy's
    stepsize scale.
    """
    cfg = setup.config
    scale = setup.stepsize_scale(kind)
    return list(
        scale
        * np.logspace(
            np.log10(cfg.grid_low), np.log10(cfg.grid_high), cfg.grid_points
        )
    )


class StepsizeChoice(NamedTuple):
    """Grid search outcome: the chosen stepsize and, per grid point,
    the mean final loss (None when the point diverged).
    """

    kind: PolicyKind
    stepsize: float
    mean_final_loss: Dict[float, Optional[float]]


def grid_search_stepsize(
    setup: ExperimentSetup,
    kind: PolicyKind,
    grid: Optional[Sequence[float]] = None,
    replicates: Optional[int] = None,
) -> StepsizeChoice:
    """Pick the stepsize minimizing the mean final loss over a fixed
    replicate set.

    Points above 2 / (mu~ + L~) are dropped for the pre-scaled
    policies. A point diverges when the loss exceeds divergence_factor
    times F(w_0) or a gradient exceeds G_max. Ties go to the smaller
    stepsize.

    Args:
        setup (otafl.harness.ExperimentSetup): Shared setup.
        kind (otafl.design.PolicyKind): Policy.
        grid (Optional[Sequence[float]]): Candidate stepsizes. Defaults
            to cfg.grid or the default logarithmic grid.
        replicates (Optional[int]): Replicates 0..R-1 evaluated per
            point. Defaults to cfg.grid_replicates.

    Returns:
        otafl.harness.StepsizeChoice: The choice and the grid losses.

    Raises:
        otafl.harness.EmptyGridException: If no admissible point
            remains.
        otafl.harness.AllDivergedException: If every point diverged.

    """
    cfg = setup.config
    if grid is None:
        grid = cfg.grid if cfg.grid is not None else default_grid(setup, kind)
    candidates = sorted({float(value) for value in grid if value > 0})
    if kind.is_prescaled:
        limit = setup.stepsize_scale(kind)
        clipped = [value for value in candidates if value > limit]
        if clipped:
            logger.warning(
                "%s: dropped grid points %s above the admissible limit %.4e",
                kind.value,
                clipped,
                limit,
            )
        candidates = [value for value in candidates if value <= limit]
    if not candidates:
        raise EmptyGridException(params.MESSAGES.EMPTY_GRID)
    count = cfg.grid_replicates if replicates is None else replicates
    replicate_ids = list(range(count))

    losses = {}  # type: Dict[float, Optional[float]]
    for stepsize in candidates:
        try:
            results = run_replicates(
                setup,
                kind,
                stepsize,
                replicate_ids,
                cfg.workers,
                stop_on_divergence=True,
            )
        except (DivergedException, GmaxViolationException) as error:
            logger.warning(
                "%s: stepsize %.4e diverged (%s)", kind.value, stepsize, error
            )
            losses[stepsize] = None
            continue
        losses[stepsize] = float(np.mean([result.final_loss for result in results]))
        logger.debug(
            "%s: stepsize %.4e -> %.6f", kind.value, stepsize, losses[stepsize]
        )

    finite = {key: value for key, value in losses.items() if value is not None}
    if not finite:
        raise AllDivergedException(params.MESSAGES.ALL_DIVERGED.format(candidates))
    # min keeps the first of equal values, the smaller stepsize
    best = min(finite, key=finite.__getitem__)
    logger.info("%s: chose stepsize %.4e", kind.value, best)
    return StepsizeChoice(kind, best, losses)


def resolve_stepsize(setup: ExperimentSetup, kind: PolicyKind) -> float:
    """Configured stepsize of a policy, or the grid search choice."""
    fixed = setup.config.stepsizes.get(kind.value)
    if fixed is not None:
        return fixed
    return grid_search_stepsize(setup, kind).stepsize


def standard_error(samples: FloatArray) -> FloatArray:
    """Standard error of the mean along the first axis (0 for a single
    sample).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        return np.zeros(samples.shape[1:])
    return np.asarray(samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0]))


@dataclasses.dataclass
class PolicySummary:
    """Replicate averages of one policy.

    Curves are indexed by the logged rounds; participation arrays are
    indexed by device.
    """

    kind: PolicyKind
    stepsize: float
    replicates: int
    rounds: npt.NDArray[np.int64]
    times: FloatArray
    loss_mean: FloatArray
    loss_stderr: FloatArray
    accuracy_mean: FloatArray
    accuracy_stderr: FloatArray
    distance_rms: FloatArray
    transmit_frequency: FloatArray
    participation: FloatArray
    path_losses: FloatArray
    skipped_rounds: int

    @property
    def final_loss(self) -> float:
        """Mean F(w_T)."""
        return float(self.loss_mean[-1])

    @property
    def final_accuracy(self) -> float:
        """Mean normalized accuracy at round T."""
        return float(self.accuracy_mean[-1])


def summarize_runs(
    setup: ExperimentSetup, results: Sequence[RunResult]
) -> PolicySummary:
    """Average replicate results of one policy."""
    losses = np.stack([result.losses for result in results])
    accuracies = np.stack([result.accuracies for result in results])
    distances = np.stack([result.distances for result in results])
    return PolicySummary(
        kind=results[0].kind,
        stepsize=results[0].stepsize,
        replicates=len(results),
        rounds=np.array([record.round_index for record in results[0].records]),
        times=results[0].times,
        loss_mean=losses.mean(axis=0),
        loss_stderr=standard_error(losses),
        accuracy_mean=accuracies.mean(axis=0),
        accuracy_stderr=standard_error(accuracies),
        distance_rms=np.sqrt(np.mean(distances**2, axis=0)),
        transmit_frequency=np.mean(
            [result.transmit_frequency for result in results], axis=0
        ),
        participation=np.mean([result.participation for result in results], axis=0),
        path_losses=setup.deployment.path_losses.copy(),
        skipped_rounds=sum(result.skipped_rounds for result in results),
    )


def time_to_target(
    times: FloatArray, values: FloatArray, target: float, decreasing: bool = True
) -> Optional[float]:
    """First logged time at which a curve reaches a target (at or below
    it when decreasing, at or above otherwise); None if never.
    """
    reached = values <= target if decreasing else values >= target
    hits = np.flatnonzero(reached)
    return float(times[hits[0]]) if hits.size else None


@dataclasses.dataclass
class ComparisonReport:
    """Policy comparison: per-policy summaries, the device order by
    decreasing path loss and time-reduction ratios.

    loss_ratios[k] is the time the reference policy needs to reach its
    own final mean loss divided by the time policy k needs to reach it
    (None if k never does); accuracy_ratios likewise with the final
    mean normalized accuracy.
    """

    summaries: Dict[PolicyKind, PolicySummary]
    order: npt.NDArray[np.int64]
    reference: Optional[PolicyKind]
    loss_ratios: Dict[PolicyKind, Optional[float]]
    accuracy_ratios: Dict[PolicyKind, Optional[float]]
    constants: Dict[str, float]
    traces: List[Dict[str, Any]] = dataclasses.field(default_factory=list)


def _ratios(
    summaries: Dict[PolicyKind, PolicySummary],
    reference: PolicySummary,
    use_accuracy: bool,
) -> Dict[PolicyKind, Optional[float]]:
    if use_accuracy:
        target = reference.final_accuracy
        reference_time = time_to_target(
            reference.times, reference.accuracy_mean, target, decreasing=False
        )
    else:
        target = reference.final_loss
        reference_time = time_to_target(reference.times, reference.loss_mean, target)
    ratios = {}  # type: Dict[PolicyKind, Optional[float]]
    for kind, summary in summaries.items():
        curve = summary.accuracy_mean if use_accuracy else summary.loss_mean
        reached = time_to_target(summary.times, curve, target, not use_accuracy)
        if reached is None or reference_time is None:
            ratios[kind] = None
        elif reached == 0.0:
            ratios[kind] = math.inf if reference_time > 0 else 1.0
        else:
            ratios[kind] = reference_time / reached
    return ratios


def build_report(
    summaries: Sequence[PolicySummary],
    reference: Optional[PolicyKind] = PolicyKind.VANILLA_OTA,
    constants: Optional[Dict[str, float]] = None,
) -> ComparisonReport:
    """Assemble a ComparisonReport from policy summaries.

    Raises:
        otafl.harness.InconsistentDeploymentException: If the summaries
            were not produced on one deployment.

    """
    first = summaries[0]
    for summary in summaries[1:]:
        if summary.path_losses.shape != first.path_losses.shape or not np.array_equal(
            summary.path_losses, first.path_losses
        ):
            raise InconsistentDeploymentException(
                params.MESSAGES.INCONSISTENT_DEPLOYMENT
            )
    by_kind = {summary.kind: summary for summary in summaries}
    if reference not in by_kind:
        reference = None
    loss_ratios = {}  # type: Dict[PolicyKind, Optional[float]]
    accuracy_ratios = {}  # type: Dict[PolicyKind, Optional[float]]
    if reference is not None:
        loss_ratios = _ratios(by_kind, by_kind[reference], use_accuracy=False)
        accuracy_ratios = _ratios(by_kind, by_kind[reference], use_accuracy=True)
    order = np.argsort(first.path_losses, kind="stable").astype(np.int64)
    return ComparisonReport(
        by_kind, order, reference, loss_ratios, accuracy_ratios, constants or {}
    )


def setup_constants(setup: ExperimentSetup) -> Dict[str, float]:
    """Scalar constants of a setup, for the summary output."""
    return {
        "dimension": float(setup.dimension),
        "rounds": float(setup.rounds),
        "optimum_loss": setup.optimum_loss,
        "reference_accuracy": setup.reference_accuracy,
        "kappa": setup.kappa,
        "g_max": setup.g_max,
        "smoothness_min": float(setup.smoothness.min()),
        "smoothness_max": float(setup.smoothness.max()),
        "energy_per_sample": setup.energy_per_sample,
        "noise_psd": setup.noise_psd,
    }


def compare_policies(
    setup: ExperimentSetup,
    kinds: Optional[Sequence[PolicyKind]] = None,
    replicates: Optional[int] = None,
    collect_trace: bool = False,
) -> ComparisonReport:
    """Run every policy on the shared setup and compare them.

    All policies use the same deployment, data partition and replicate
    sub-streams. Stepsizes come from the configuration or a grid
    search.

    Args:
        setup (otafl.harness.ExperimentSetup): Shared setup.
        kinds (Optional[Sequence[otafl.design.PolicyKind]]): Policies.
            Defaults to cfg.policies.
        replicates (Optional[int]): Replicate count. Defaults to
            cfg.replicates.
        collect_trace (bool): Whether to gather round trace entries.

    Returns:
        otafl.harness.ComparisonReport: The comparison.

    """
    cfg = setup.config
    kinds = list(cfg.policies if kinds is None else kinds)
    replicate_ids = list(range(cfg.replicates if replicates is None else replicates))
    summaries = []
    traces = []  # type: List[Dict[str, Any]]
    for kind in kinds:
        stepsize = resolve_stepsize(setup, kind)
        results = run_replicates(
            setup, kind, stepsize, replicate_ids, cfg.workers, collect_trace
        )
        summary = summarize_runs(setup, results)
        summaries.append(summary)
        for result in results:
            traces.extend(result.trace)
        logger.info(
            "%s done: eta=%.4e final loss %.6f +- %.6f, accuracy %.4f",
            kind.value,
            stepsize,
            summary.final_loss,
            float(summary.loss_stderr[-1]),
            summary.final_accuracy,
        )
    report = build_report(summaries, constants=setup_constants(setup))
    report.traces = traces
    return report


class BoundReport(NamedTuple):
    """Bound of a pre-scaled policy at its stepsize, with the true
    model bias and, when replicates were run, the empirical
    sqrt(E||w_t - w*||^2) at the logged rounds.
    """

    kind: PolicyKind
    constants: BoundConstants
    prescalers: PreScalerSet
    breakdowns: List[BoundBreakdown]
    surrogate: List[float]
    model_bias_bound: float
    true_model_bias: float
    empirical: Optional[FloatArray]


def evaluate_bound(
    setup: ExperimentSetup,
    kind: PolicyKind = PolicyKind.MIN_VARIANCE,
    stepsize: Optional[float] = None,
    replicates: int = 0,
) -> BoundReport:
    """Evaluate the optimality-error bound of a pre-scaled policy at
    the logged rounds.

    w~ is solved for, so sqrt(E~_0) is exact. The default stepsize is
    the configured one or 1 / L~.

    Raises:
        otafl.harness.NotPreScaledException: For a policy without
            pre-scalers.
        otafl.bound.StepsizeRangeException: If the stepsize is not
            admissible.

    """
    prescalers = setup.prescalers(kind)
    bias, w_tilde = true_model_bias(
        setup.datasets, prescalers.participation, setup.w_star, setup.loss_cfg
    )
    constants = setup.bound_constants(kind, 0.0, w_tilde)
    if stepsize is None:
        stepsize = setup.config.stepsizes.get(kind.value, 1.0 / constants.l_tilde)
    constants = constants.with_stepsize(stepsize)
    check_stepsize(constants)
    rounds = list(range(0, setup.rounds + 1, setup.config.log_every))
    if rounds[-1] != setup.rounds:
        rounds.append(setup.rounds)
    empirical = None
    if replicates > 0:
        results = run_replicates(
            setup, kind, stepsize, list(range(replicates)), setup.config.workers
        )
        empirical = summarize_runs(setup, results).distance_rms
    return BoundReport(
        kind,
        constants,
        prescalers,
        bound_curve(rounds, constants, prescalers),
        [surrogate_error_bound(t, constants, prescalers) for t in rounds],
        model_bias_bound(constants, prescalers.participation),
        bias,
        empirical,
    )


class InvalidConfigException(OtaflException):
    """Raised on an unknown configuration key or an invalid value."""


class BudgetTooShortException(OtaflException):
    """Raised when the training budget does not fit a single round."""


class NotPreScaledException(OtaflException):
    """Raised when pre-scalers are requested of a baseline policy."""


class DivergedException(OtaflException):
    """Raised when a run's loss exceeds the divergence threshold."""


class EmptyGridException(OtaflException):
    """Raised when no admissible stepsize is left in a grid."""


class AllDivergedException(OtaflException):
    """Raised when every stepsize of a grid diverged."""


class InconsistentDeploymentException(OtaflException):
    """Raised when compared policies ran on different deployments."""


class DesignMismatchException(OtaflException):
    """Raised when a loaded design does not fit the experiment."""
