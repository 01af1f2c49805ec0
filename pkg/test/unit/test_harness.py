import dataclasses
import json
import pathlib
import tempfile
import types
import unittest
from unittest import mock

import numpy as np

from otafl.bound import StepsizeRangeException
from otafl.design import PolicyKind
from otafl.harness import (
    AllDivergedException,
    BudgetTooShortException,
    DesignMismatchException,
    DivergedException,
    EmptyGridException,
    ExperimentConfig,
    InconsistentDeploymentException,
    InvalidConfigException,
    NotPreScaledException,
    build_report,
    compare_policies,
    config_from_dict,
    default_grid,
    elapsed_ms,
    evaluate_bound,
    grid_search_stepsize,
    load_config,
    load_design,
    prepare_experiment,
    resolve_stepsize,
    rounds_from_budget,
    run_experiment,
    run_replicates,
    standard_error,
    summarize_runs,
    time_to_target,
)
from otafl.ota import GmaxViolationException
from otafl.wireless import Deployment, RadioConfig

QUIET_RADIO = RadioConfig(noise_psd_dbm_per_hz=-250.0)
FIXED_STEPSIZES = {kind.value: 0.1 for kind in PolicyKind}


def small_config(**changes):
    values = {
        "radio": QUIET_RADIO,
        "n_devices": 3,
        "input_dim": 6,
        "samples_per_class": 5,
        "test_size": 30,
        "budget_ms": 0.5,
        "replicates": 2,
        "grid_replicates": 1,
        "gmax_safety": 3.0,
        "stepsizes": dict(FIXED_STEPSIZES),
        "seed": 7,
    }
    values.update(changes)
    return ExperimentConfig(**values)


def fake_results(final_loss, replicates):
    return [
        types.SimpleNamespace(final_loss=final_loss, replicate=replicate)
        for replicate in replicates
    ]


class RoundsTest(unittest.TestCase):
    def test_reference_budget(self):
        self.assertEqual(509, rounds_from_budget(ExperimentConfig(), 7850))

    def test_single_round(self):
        self.assertEqual(1, rounds_from_budget(ExperimentConfig(budget_ms=7.85), 7850))

    def test_too_short(self):
        with self.assertRaises(BudgetTooShortException):
            rounds_from_budget(ExperimentConfig(budget_ms=1.0), 7850)

    def test_elapsed(self):
        self.assertAlmostEqual(3995.65, elapsed_ms(509, 7850, 1e6))
        self.assertEqual(0.0, elapsed_ms(0, 7850, 1e6))


class ConfigTest(unittest.TestCase):
    def setUp(self):
        super().setUp()
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.tmp_path = pathlib.Path(self.tmp.name)

    def test_defaults(self):
        cfg = ExperimentConfig()
        self.assertEqual(10, cfg.n_devices)
        self.assertEqual(50, cfg.replicates)
        self.assertAlmostEqual(120.0, cfg.r_in)
        self.assertEqual(5, len(cfg.policies))
        self.assertNotIn(PolicyKind.IDEAL, cfg.policies)

    def test_invalid_values(self):
        for changes in (
            {"n_devices": 0},
            {"budget_ms": -1.0},
            {"replicates": 0},
            {"seed": -1},
            {"r_in_fraction": 1.5},
            {"r_in_fraction": 0.0},
            {"mix_probability": -0.1},
            {"stepsizes": {"zero_bias": 0.0}},
        ):
            with self.subTest(changes=changes):
                with self.assertRaises(InvalidConfigException):
                    ExperimentConfig(**changes)

    def test_empty_grid(self):
        with self.assertRaises(EmptyGridException):
            ExperimentConfig(grid=[])

    def test_policy_names(self):
        cfg = ExperimentConfig(
            policies=("zero_bias", PolicyKind.IDEAL), stepsizes={"Zero-Bias": 1}
        )
        self.assertEqual((PolicyKind.ZERO_BIAS, PolicyKind.IDEAL), cfg.policies)
        self.assertEqual({"zero_bias": 1.0}, cfg.stepsizes)

    def test_replace_ignores_none(self):
        cfg = ExperimentConfig(seed=3).replace(seed=None, replicates=4)
        self.assertEqual(3, cfg.seed)
        self.assertEqual(4, cfg.replicates)

    def test_from_dict(self):
        cfg = config_from_dict(
            {
                "n_devices": 4,
                "policies": ["min_variance", "vanilla_ota"],
                "radio": {"r_max_m": 100.0, "tx_power_dbm": 10.0},
            }
        )
        self.assertEqual(4, cfg.n_devices)
        self.assertEqual(100.0, cfg.radio.r_max_m)
        self.assertEqual(10.0, cfg.radio.tx_power_dbm)
        self.assertAlmostEqual(60.0, cfg.r_in)
        self.assertEqual(
            (PolicyKind.MIN_VARIANCE, PolicyKind.VANILLA_OTA), cfg.policies
        )

    def test_from_dict_errors(self):
        for data in (
            {"n_device": 4},
            {"radio": {"r_max": 100.0}},
            {"radio": 3},
            {"n_devices": "many"},
        ):
            with self.subTest(data=data):
                with self.assertRaises(InvalidConfigException):
                    config_from_dict(data)

    def test_load_json(self):
        path = self.tmp_path.joinpath("cfg.json")
        path.write_text(
            json.dumps({"seed": 11, "stepsizes": {"ideal": 0.5}}), encoding="utf-8"
        )
        cfg = load_config(path)
        self.assertEqual(11, cfg.seed)
        self.assertEqual({"ideal": 0.5}, cfg.stepsizes)

    def test_load_toml(self):
        path = self.tmp_path.joinpath("cfg.toml")
        path.write_text(
            "budget_ms = 100.0\nreplicates = 3\n\n[radio]\nbandwidth_hz = 2e6\n",
            encoding="utf-8",
        )
        cfg = load_config(path)
        self.assertEqual(100.0, cfg.budget_ms)
        self.assertEqual(3, cfg.replicates)
        self.assertEqual(2e6, cfg.radio.bandwidth_hz)

    def test_load_unsupported(self):
        path = self.tmp_path.joinpath("cfg.yaml")
        path.write_text("seed: 1\n", encoding="utf-8")
        with self.assertRaises(InvalidConfigException):
            load_config(path)


class StatisticsTest(unittest.TestCase):
    def test_standard_error(self):
        np.testing.assert_allclose(
            [1.0, 0.0], standard_error(np.array([[1.0, 2.0], [3.0, 2.0]]))
        )
        np.testing.assert_array_equal(
            [0.0, 0.0], standard_error(np.array([[1.0, 5.0]]))
        )

    def test_time_to_target(self):
        times = np.array([0.0, 1.0, 2.0, 3.0])
        losses = np.array([4.0, 3.0, 2.0, 1.0])
        self.assertEqual(2.0, time_to_target(times, losses, 2.0))
        self.assertIsNone(time_to_target(times, losses, 0.5))
        self.assertEqual(
            1.0, time_to_target(times, -losses, -3.5, decreasing=False)
        )


class ExperimentTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        tmp = tempfile.TemporaryDirectory()
        cls.addClassCleanup(tmp.cleanup)
        path = pathlib.Path(tmp.name).joinpath("deployment.json")
        Deployment.at_distances([30.0, 90.0, 170.0]).save(path)
        cls.setup = prepare_experiment(small_config(deployment_file=str(path)))

    def test_setup(self):
        self.assertEqual(21, self.setup.dimension)
        self.assertEqual(23, self.setup.rounds)
        self.assertEqual(3, len(self.setup.datasets))
        self.assertEqual(30, len(self.setup.test_set))
        self.assertEqual((3,), self.setup.smoothness.shape)
        self.assertTrue(np.all(self.setup.smoothness > self.setup.loss_cfg.reg))
        self.assertFalse(np.any(self.setup.w_start))
        self.assertGreater(self.setup.reference_accuracy, 0.0)
        self.assertGreater(self.setup.kappa, 0.0)
        self.assertGreater(self.setup.g_max, 0.0)

    def test_loaded_design(self):
        setup = prepare_experiment(self.setup.config)
        computed = setup.prescalers(PolicyKind.ZERO_BIAS)
        with tempfile.TemporaryDirectory() as directory:
            path = pathlib.Path(directory).joinpath("design.json")
            table = {"zero_bias": computed.to_dict()}
            table["zero_bias"]["devices"][0]["gamma"] *= 0.5
            path.write_text(json.dumps(table), encoding="utf-8")
            loaded = load_design(path, PolicyKind.ZERO_BIAS)
            with self.assertRaises(InvalidConfigException):
                load_design(path, PolicyKind.MIN_VARIANCE)
        setup.use_design(PolicyKind.ZERO_BIAS, loaded)
        self.assertIs(loaded, setup.prescalers(PolicyKind.ZERO_BIAS))
        self.assertEqual(0.5 * computed.gammas[0], loaded.gammas[0])
        with self.assertRaises(NotPreScaledException):
            setup.use_design(PolicyKind.VANILLA_OTA, loaded)
        shifted = dataclasses.replace(loaded, path_losses=2 * loaded.path_losses)
        wider = dataclasses.replace(loaded, dimension=loaded.dimension + 1)
        for design in (shifted, wider):
            with self.subTest(design=design):
                with self.assertRaises(DesignMismatchException):
                    setup.use_design(PolicyKind.ZERO_BIAS, design)

    def test_setup_is_deterministic(self):
        other = prepare_experiment(self.setup.config)
        np.testing.assert_array_equal(
            self.setup.deployment.path_losses, other.deployment.path_losses
        )
        np.testing.assert_array_equal(self.setup.w_star, other.w_star)
        self.assertEqual(self.setup.g_max, other.g_max)
        drawn = [prepare_experiment(small_config(seed=seed)) for seed in (7, 7, 8)]
        np.testing.assert_array_equal(
            drawn[0].deployment.positions, drawn[1].deployment.positions
        )
        self.assertFalse(
            np.array_equal(drawn[0].deployment.positions, drawn[2].deployment.positions)
        )

    def test_deployment_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = pathlib.Path(tmp).joinpath("deployment.json")
            Deployment.at_distances([10.0, 50.0, 150.0]).save(path)
            setup = prepare_experiment(small_config(deployment_file=str(path)))
            np.testing.assert_allclose([10.0, 50.0, 150.0], setup.deployment.distances)
            Deployment.at_distances([10.0, 50.0]).save(path)
            with self.assertRaises(InvalidConfigException):
                prepare_experiment(small_config(deployment_file=str(path)))

    def test_prescalers(self):
        prescalers = self.setup.prescalers(PolicyKind.MIN_VARIANCE)
        self.assertEqual(3, len(prescalers))
        self.assertIs(
            self.setup.policy(PolicyKind.MIN_VARIANCE),
            self.setup.policy(PolicyKind.MIN_VARIANCE),
        )
        with self.assertRaises(NotPreScaledException):
            self.setup.prescalers(PolicyKind.VANILLA_OTA)

    def test_stepsize_scale(self):
        constants = self.setup.bound_constants(PolicyKind.ZERO_BIAS, 0.1)
        self.assertAlmostEqual(
            2.0 / (constants.mu_tilde + constants.l_tilde),
            self.setup.stepsize_scale(PolicyKind.ZERO_BIAS),
        )
        self.assertAlmostEqual(
            2.0 / (self.setup.loss_cfg.reg + float(np.mean(self.setup.smoothness))),
            self.setup.stepsize_scale(PolicyKind.VANILLA_OTA),
        )

    def test_records(self):
        result = run_experiment(self.setup, PolicyKind.MIN_VARIANCE, 0.1)
        self.assertEqual(
            [0, 5, 10, 15, 20, 23], [record.round_index for record in result.records]
        )
        np.testing.assert_allclose([0.0, 0.105, 0.21, 0.315, 0.42, 0.483], result.times)
        self.assertEqual((3,), result.transmit_frequency.shape)
        self.assertTrue(np.all(result.transmit_frequency >= 0))
        self.assertTrue(np.all(result.transmit_frequency <= 1))
        self.assertEqual(result.records[-1].loss, result.final_loss)

    def test_run_is_deterministic(self):
        for kind in (PolicyKind.ZERO_BIAS, PolicyKind.BBFL_ALTERNATING):
            with self.subTest(kind=kind):
                first = run_experiment(self.setup, kind, 0.1, replicate=1)
                second = run_experiment(self.setup, kind, 0.1, replicate=1)
                np.testing.assert_array_equal(first.final_params, second.final_params)
                np.testing.assert_array_equal(first.losses, second.losses)

    def test_replicates_differ(self):
        first = run_experiment(self.setup, PolicyKind.MIN_VARIANCE, 0.1, replicate=0)
        second = run_experiment(self.setup, PolicyKind.MIN_VARIANCE, 0.1, replicate=1)
        self.assertFalse(np.array_equal(first.final_params, second.final_params))

    def test_ideal_contracts(self):
        setup = dataclasses.replace(
            self.setup, config=self.setup.config.replace(log_every=1), _policies={}
        )
        result = run_experiment(setup, PolicyKind.IDEAL, 0.1)
        self.assertEqual(24, len(result.records))
        self.assertTrue(np.all(np.diff(result.losses) <= 1e-12))
        self.assertTrue(np.all(np.diff(result.distances) <= 1e-12))
        np.testing.assert_allclose(np.full(3, 1 / 3), result.participation)

    def test_vanilla_schedules_everyone(self):
        result = run_experiment(self.setup, PolicyKind.VANILLA_OTA, 0.1)
        np.testing.assert_array_equal(np.ones(3), result.transmit_frequency)
        np.testing.assert_allclose(np.full(3, 1 / 3), result.participation)
        self.assertEqual(0, result.skipped_rounds)

    def test_common_random_numbers(self):
        setup = dataclasses.replace(
            self.setup,
            config=self.setup.config.replace(r_in_fraction=1.0),
            _policies={},
        )
        vanilla = run_experiment(setup, PolicyKind.VANILLA_OTA, 0.1, replicate=1)
        interior = run_experiment(setup, PolicyKind.BBFL_INTERIOR, 0.1, replicate=1)
        np.testing.assert_array_equal(vanilla.final_params, interior.final_params)

    def test_trace(self):
        result = run_experiment(
            self.setup, PolicyKind.ZERO_BIAS, 0.1, collect_trace=True
        )
        self.assertEqual([0, 5, 10, 15, 20], [entry["round"] for entry in result.trace])
        for entry in result.trace:
            self.assertEqual("zero_bias", entry["policy"])
            self.assertEqual(0, entry["replicate"])
            self.assertEqual(3, len(entry["chi"]))
            self.assertGreaterEqual(entry["estimate_norm"], 0.0)
        untraced = run_experiment(self.setup, PolicyKind.ZERO_BIAS, 0.1)
        self.assertEqual([], untraced.trace)

    def test_invalid_stepsize(self):
        with self.assertRaises(StepsizeRangeException):
            run_experiment(self.setup, PolicyKind.MIN_VARIANCE, 100.0)
        with self.assertRaises(InvalidConfigException):
            run_experiment(self.setup, PolicyKind.VANILLA_OTA, 0.0)

    def test_gmax_violation(self):
        setup = dataclasses.replace(self.setup, g_max=1e-9, _policies={})
        with self.assertLogs("otafl.harness", level="ERROR"):
            with self.assertRaises(GmaxViolationException):
                run_experiment(setup, PolicyKind.MIN_VARIANCE, 0.1)

    def test_divergence(self):
        setup = dataclasses.replace(
            self.setup, config=self.setup.config.replace(divergence_factor=1e-6)
        )
        with self.assertRaises(DivergedException):
            run_experiment(setup, PolicyKind.VANILLA_OTA, 0.1, stop_on_divergence=True)
        run_experiment(setup, PolicyKind.VANILLA_OTA, 0.1)

    def test_run_replicates(self):
        results = run_replicates(self.setup, PolicyKind.MIN_VARIANCE, 0.1, [2, 0, 1])
        self.assertEqual([0, 1, 2], [result.replicate for result in results])
        single = run_experiment(self.setup, PolicyKind.MIN_VARIANCE, 0.1, replicate=2)
        np.testing.assert_array_equal(single.final_params, results[2].final_params)

    def test_parallel_matches_serial(self):
        serial = run_replicates(self.setup, PolicyKind.ZERO_BIAS, 0.1, [0, 1, 2])
        parallel = run_replicates(
            self.setup, PolicyKind.ZERO_BIAS, 0.1, [0, 1, 2], workers=2
        )
        for one, other in zip(serial, parallel):
            self.assertEqual(one.replicate, other.replicate)
            np.testing.assert_array_equal(one.final_params, other.final_params)
            np.testing.assert_array_equal(one.losses, other.losses)

    def test_summarize(self):
        results = run_replicates(self.setup, PolicyKind.MIN_VARIANCE, 0.1, [0, 1])
        summary = summarize_runs(self.setup, results)
        self.assertEqual(2, summary.replicates)
        np.testing.assert_array_equal([0, 5, 10, 15, 20, 23], summary.rounds)
        np.testing.assert_allclose(
            (results[0].losses + results[1].losses) / 2, summary.loss_mean
        )
        np.testing.assert_allclose(
            np.sqrt((results[0].distances ** 2 + results[1].distances ** 2) / 2),
            summary.distance_rms,
        )
        self.assertEqual(float(summary.loss_mean[-1]), summary.final_loss)
        np.testing.assert_array_equal(
            self.setup.deployment.path_losses, summary.path_losses
        )

    def test_default_grid(self):
        setup = dataclasses.replace(
            self.setup,
            config=self.setup.config.replace(
                grid_points=4, grid_low=0.01, grid_high=1.0
            ),
        )
        scale = setup.stepsize_scale(PolicyKind.VANILLA_OTA)
        np.testing.assert_allclose(
            scale * np.array([0.01, 0.01 ** (2 / 3), 0.01 ** (1 / 3), 1.0]),
            default_grid(setup, PolicyKind.VANILLA_OTA),
        )

    def test_grid_singleton(self):
        choice = grid_search_stepsize(self.setup, PolicyKind.VANILLA_OTA, grid=[0.1])
        self.assertEqual(0.1, choice.stepsize)
        self.assertEqual([0.1], list(choice.mean_final_loss))

    def test_grid_drops_inadmissible(self):
        with self.assertLogs("otafl.harness", level="WARNING"):
            choice = grid_search_stepsize(
                self.setup, PolicyKind.MIN_VARIANCE, grid=[0.1, 100.0]
            )
        self.assertEqual(0.1, choice.stepsize)
        with self.assertRaises(EmptyGridException):
            grid_search_stepsize(self.setup, PolicyKind.MIN_VARIANCE, grid=[100.0])

    def test_grid_selection(self):
        def fake_run(setup, kind, stepsize, replicates, workers, **kwargs):
            if stepsize > 0.3:
                raise DivergedException("diverged")
            return fake_results({0.1: 2.0, 0.2: 1.0, 0.3: 1.0}[stepsize], replicates)

        with mock.patch("otafl.harness.run_replicates", side_effect=fake_run):
            choice = grid_search_stepsize(
                self.setup, PolicyKind.VANILLA_OTA, grid=[0.4, 0.3, 0.1, 0.2, 0.1]
            )
        self.assertEqual(0.2, choice.stepsize)
        self.assertEqual(
            {0.1: 2.0, 0.2: 1.0, 0.3: 1.0, 0.4: None}, choice.mean_final_loss
        )

    def test_grid_all_diverged(self):
        with mock.patch(
            "otafl.harness.run_replicates",
            side_effect=GmaxViolationException("violation", 0, 2.0),
        ):
            with self.assertRaises(AllDivergedException):
                grid_search_stepsize(
                    self.setup, PolicyKind.VANILLA_OTA, grid=[0.1, 0.2]
                )

    def test_resolve_stepsize(self):
        self.assertEqual(0.1, resolve_stepsize(self.setup, PolicyKind.ZERO_BIAS))
        setup = dataclasses.replace(
            self.setup, config=self.setup.config.replace(stepsizes={}, grid=[0.05])
        )
        with mock.patch(
            "otafl.harness.run_replicates",
            side_effect=lambda setup, kind, stepsize, replicates, workers, **kwargs: (
                fake_results(1.0, replicates)
            ),
        ) as run_mock:
            self.assertEqual(0.05, resolve_stepsize(setup, PolicyKind.ZERO_BIAS))
        run_mock.assert_called_once()

    def test_compare_policies(self):
        kinds = [PolicyKind.IDEAL, PolicyKind.VANILLA_OTA, PolicyKind.MIN_VARIANCE]
        report = compare_policies(self.setup, kinds, replicates=1, collect_trace=True)
        self.assertEqual(kinds, list(report.summaries))
        self.assertIs(PolicyKind.VANILLA_OTA, report.reference)
        self.assertEqual(1.0, report.loss_ratios[PolicyKind.VANILLA_OTA])
        self.assertEqual(1.0, report.accuracy_ratios[PolicyKind.VANILLA_OTA])
        np.testing.assert_array_equal(
            self.setup.deployment.order_by_decreasing_path_loss(), report.order
        )
        self.assertEqual(23.0, report.constants["rounds"])
        self.assertEqual(
            {"ideal", "vanilla_ota", "min_variance"},
            {entry["policy"] for entry in report.traces},
        )

    def test_report_without_reference(self):
        results = run_replicates(self.setup, PolicyKind.ZERO_BIAS, 0.1, [0])
        report = build_report([summarize_runs(self.setup, results)])
        self.assertIsNone(report.reference)
        self.assertEqual({}, report.loss_ratios)
        self.assertEqual({}, report.constants)

    def test_inconsistent_deployment(self):
        results = run_replicates(self.setup, PolicyKind.ZERO_BIAS, 0.1, [0])
        summary = summarize_runs(self.setup, results)
        other = dataclasses.replace(summary, path_losses=summary.path_losses * 2)
        with self.assertRaises(InconsistentDeploymentException):
            build_report([summary, other])

    def test_evaluate_bound(self):
        bound = evaluate_bound(self.setup, PolicyKind.MIN_VARIANCE, replicates=2)
        self.assertEqual(0.1, bound.constants.stepsize)
        self.assertEqual(
            [0, 5, 10, 15, 20, 23],
            [breakdown.round_index for breakdown in bound.breakdowns],
        )
        self.assertEqual(6, len(bound.surrogate))
        self.assertEqual((6,), bound.empirical.shape)
        self.assertAlmostEqual(
            float(np.linalg.norm(self.setup.w_start - self.setup.w_star)),
            bound.empirical[0],
        )
        self.assertLessEqual(bound.empirical[0], bound.breakdowns[0].total)
        self.assertLessEqual(bound.true_model_bias, bound.model_bias_bound + 1e-6)

    def test_evaluate_bound_defaults(self):
        setup = dataclasses.replace(
            self.setup, config=self.setup.config.replace(stepsizes={})
        )
        bound = evaluate_bound(setup, PolicyKind.ZERO_BIAS)
        self.assertAlmostEqual(1.0 / bound.constants.l_tilde, bound.constants.stepsize)
        self.assertIsNone(bound.empirical)
        with self.assertRaises(NotPreScaledException):
            evaluate_bound(self.setup, PolicyKind.BBFL_INTERIOR)
