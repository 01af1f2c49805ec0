import pathlib
import tempfile
import unittest

import numpy as np
import scipy.stats

from otafl.wireless import (
    DEFAULT_RADIO,
    Deployment,
    DeploymentRadiusException,
    InvalidDeploymentException,
    InvalidDistanceException,
    InvalidRadioConfigException,
    RadioConfig,
    db_to_linear,
    dbm_to_watts,
    deploy_uniform_disk,
    draw_fading,
    draw_noise,
    draw_real_noise,
    path_loss_linear,
)


class ConversionTest(unittest.TestCase):
    def test_dbm_to_watts(self):
        for dbm, watts in ((20.0, 0.1), (-174.0, 3.9810717055e-21), (30.0, 1.0)):
            with self.subTest(dbm=dbm):
                self.assertAlmostEqual(1.0, dbm_to_watts(dbm) / watts, places=9)

    def test_db_to_linear(self):
        self.assertEqual(1.0, db_to_linear(0.0))
        self.assertAlmostEqual(100.0, db_to_linear(20.0))

    def test_radio_config(self):
        self.assertAlmostEqual(1e-7, DEFAULT_RADIO.energy_per_sample, places=20)
        self.assertAlmostEqual(1.0, DEFAULT_RADIO.noise_psd / 3.9810717055e-21)
        with self.assertRaises(InvalidRadioConfigException):
            RadioConfig(bandwidth_hz=0.0)


class PathLossTest(unittest.TestCase):
    def test_path_loss(self):
        for distance, expected in ((1.0, 1e-4), (10.0, 10**-6.2), (200.0, 8.665e-10)):
            with self.subTest(distance=distance):
                self.assertLessEqual(
                    abs(path_loss_linear(distance) - expected), 1e-3 * expected
                )

    def test_non_positive_distance(self):
        for distance in (0.0, -3.0):
            with self.subTest(distance=distance):
                with self.assertRaises(InvalidDistanceException):
                    path_loss_linear(distance)


class DeploymentTest(unittest.TestCase):
    def test_deterministic(self):
        first = deploy_uniform_disk(10, np.random.default_rng(42))
        second = deploy_uniform_disk(10, np.random.default_rng(42))
        np.testing.assert_array_equal(first.positions, second.positions)
        np.testing.assert_array_equal(first.path_losses, second.path_losses)

    def test_within_disk(self):
        deployment = deploy_uniform_disk(500, np.random.default_rng(1))
        self.assertTrue(np.all(deployment.distances <= 200.0 + 1e-9))
        self.assertTrue(np.all(deployment.distances >= 1.0 - 1e-9))
        expected = [path_loss_linear(r) for r in deployment.distances]
        np.testing.assert_allclose(expected, deployment.path_losses, rtol=1e-9)

    def test_uniform_area_moment(self):
        deployment = deploy_uniform_disk(100_000, np.random.default_rng(7))
        mean_square = np.mean(deployment.distances**2)
        self.assertLessEqual(abs(mean_square - 200.0**2 / 2), 0.01 * 200.0**2 / 2)

    def test_uniform_in_radius(self):
        deployment = deploy_uniform_disk(
            100_000, np.random.default_rng(7), uniform_in_radius=True
        )
        self.assertLessEqual(abs(np.mean(deployment.distances) - 100.0), 1.0)

    def test_pinned(self):
        deployment = Deployment.at_distances([1.0])
        self.assertAlmostEqual(1.0, deployment.path_losses[0] / 1e-4)
        deployment = Deployment.at_distances([150.0, 20.0, 80.0])
        np.testing.assert_array_equal(
            [0, 2, 1], deployment.order_by_decreasing_path_loss()
        )

    def test_save_load(self):
        deployment = deploy_uniform_disk(5, np.random.default_rng(3))
        with tempfile.TemporaryDirectory() as directory:
            path = pathlib.Path(directory).joinpath("deployment.json")
            deployment.save(path)
            loaded = Deployment.load(path)
        np.testing.assert_allclose(deployment.positions, loaded.positions)
        np.testing.assert_allclose(deployment.path_losses, loaded.path_losses)

    def test_load_outside_disk(self):
        deployment = Deployment.at_distances([50.0, 250.0])
        with self.assertRaises(DeploymentRadiusException) as context:
            Deployment.from_dict(deployment.to_dict())
        self.assertIn("Device 1", str(context.exception))
        wide = RadioConfig(r_max_m=300.0)
        loaded = Deployment.from_dict(deployment.to_dict(), wide)
        np.testing.assert_allclose([50.0, 250.0], loaded.distances)
        with tempfile.TemporaryDirectory() as directory:
            path = pathlib.Path(directory).joinpath("deployment.json")
            deployment.save(path)
            with self.assertRaises(DeploymentRadiusException):
                Deployment.load(path)

    def test_load_at_origin(self):
        data = {"positions": [[0.0, 0.0]], "path_losses": [1e-4]}
        with self.assertRaises(DeploymentRadiusException):
            Deployment.from_dict(data)

    def test_invalid(self):
        with self.assertRaises(InvalidDeploymentException):
            deploy_uniform_disk(0, np.random.default_rng(0))
        with self.assertRaises(InvalidDeploymentException):
            Deployment(np.zeros((1, 2)), [0.0])
        with self.assertRaises(InvalidDeploymentException):
            Deployment(np.ones((2, 2)), [1e-4])


class FadingNoiseTest(unittest.TestCase):
    def test_fading_power(self):
        path_losses = np.array([1e-4, 3e-7, 8e-10])
        fading = draw_fading(path_losses, np.random.default_rng(0), rounds=1_000_000)
        self.assertEqual((1_000_000, 3), fading.shape)
        power = np.mean(np.abs(fading) ** 2, axis=0)
        np.testing.assert_allclose(path_losses, power, rtol=0.01)

    def test_fading_power_is_exponential(self):
        path_losses = np.array([1e-4, 3e-7, 8e-10])
        fading = draw_fading(path_losses, np.random.default_rng(17), rounds=100_000)
        for device, path_loss in enumerate(path_losses):
            with self.subTest(path_loss=path_loss):
                normalized = np.abs(fading[:, device]) ** 2 / path_loss
                result = scipy.stats.kstest(normalized, "expon")
                self.assertGreater(result.pvalue, 0.01)

    def test_single_round_shape(self):
        fading = draw_fading(np.array([1e-4, 1e-5]), np.random.default_rng(0))
        self.assertEqual((2,), fading.shape)

    def test_zero_path_loss(self):
        with self.assertRaises(InvalidDeploymentException):
            draw_fading(np.array([1e-4, 0.0]), np.random.default_rng(0))

    def test_noise_power(self):
        rng = np.random.default_rng(5)
        noise_psd = 4e-21
        for draw in (draw_noise, draw_real_noise):
            with self.subTest(draw=draw.__name__):
                energy = np.mean(
                    [
                        np.sum(np.abs(draw(100, noise_psd, rng)) ** 2)
                        for _ in range(10_000)
                    ]
                )
                self.assertLessEqual(
                    abs(energy - 100 * noise_psd), 0.02 * 100 * noise_psd
                )
