import io
import os
import unittest
from fractions import Fraction
from unittest import mock

import numpy as np
from numpy.testing import assert_allclose

from tffquant.errors import ConfigError, NumericalError, ShapeError
from tffquant.robustness import (
    ConsistentLpProblem,
    NoiseExperimentConfig,
    NoiseRow,
    consistent_experiment,
    consistent_reconstruct,
    format_r,
    loglog_slope,
    noise_mse_experiment,
    wiener_experiment,
    wiener_shrinkage,
    write_csv,
)
from tffquant.sysdeps import parallel_map, worker_count
from tffquant.tff import build_fusion_frame, random_rotation


class TestNoiseExperiment(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cfg = NoiseExperimentConfig(
            d=4, redundancies=(1, "1.5", 2), trials=4000, seed=3
        )
        cls.rows = noise_mse_experiment(cfg)

    def test_baseline_mse(self):
        self.assertEqual(self.rows[0].r, 1)
        self.assertAlmostEqual(self.rows[0].mse, 0.1, delta=0.005)
        self.assertEqual(self.rows[0].ratio, 1.0)

    def test_ratios_follow_inverse_redundancy(self):
        self.assertEqual(self.rows[1].r, Fraction(3, 2))
        self.assertAlmostEqual(self.rows[1].ratio, 2 / 3, delta=0.05)
        self.assertAlmostEqual(self.rows[2].ratio, 1 / 2, delta=0.05)
        self.assertAlmostEqual(self.rows[0].slope, -1.0, delta=0.15)

    def test_mse_times_redundancy_is_flat(self):
        cfg = NoiseExperimentConfig(
            d=8, redundancies=(1, "1.5", 2, 3), trials=3000, seed=5
        )
        rows = noise_mse_experiment(cfg)
        self.assertEqual(rows[-1].r, 3)
        baseline = rows[0].mse
        for row in rows:
            self.assertAlmostEqual(row.mse * float(row.r) / baseline, 1.0, delta=0.15)

    def test_needs_baseline(self):
        with self.assertRaises(ConfigError):
            noise_mse_experiment(NoiseExperimentConfig(redundancies=(2,), trials=2))

    def test_bad_config(self):
        bad = ({"d": 0}, {"trials": 0}, {"quantizer": "lloyd"}, {"redundancies": ()})
        for kwargs in bad:
            with self.assertRaises(ConfigError):
                NoiseExperimentConfig(**kwargs).validate()

    def test_uniform_quantizer(self):
        cfg = NoiseExperimentConfig(
            d=8, redundancies=(1, 2, 4), trials=300, quantizer="uniform-memoryless"
        )
        rows = noise_mse_experiment(cfg)
        self.assertLess(rows[-1].mse, rows[0].mse)

    def test_independent_of_thread_count(self):
        cfg = NoiseExperimentConfig(d=8, redundancies=(1, 2), trials=64, seed=11)
        with mock.patch.dict(os.environ, {"FQ_THREADS": "1"}):
            single = noise_mse_experiment(cfg)
        with mock.patch.dict(os.environ, {"FQ_THREADS": "3"}):
            several = noise_mse_experiment(cfg)
        self.assertEqual([row.mse for row in single], [row.mse for row in several])


class TestWiener(unittest.TestCase):
    def test_gain(self):
        frame = build_fusion_frame(4, 1)
        self.assertEqual(wiener_shrinkage(frame, 1.0, 0.0).gain, 1.0)
        self.assertEqual(wiener_shrinkage(frame, 1.0, 1.0).gain, 0.5)
        self.assertEqual(wiener_shrinkage(frame, 0.0, 1.0).gain, 0.0)

    def test_bad_variances(self):
        frame = build_fusion_frame(4, 1)
        with self.assertRaises(ConfigError):
            wiener_shrinkage(frame, 0.0, 0.0)
        with self.assertRaises(ConfigError):
            wiener_shrinkage(frame, -1.0, 1.0)

    def test_reduction_at_zero_db(self):
        cfg = NoiseExperimentConfig(d=8, redundancies=(2,), snr_db=0.0, trials=5000)
        (row,) = wiener_experiment(cfg)
        self.assertEqual(row.r, 2)
        self.assertAlmostEqual(row.plain_mse, 4.0, delta=0.2)
        self.assertAlmostEqual(row.reduction, 0.25, delta=0.04)


class TestConsistent(unittest.TestCase):
    def test_single_coefficient(self):
        problem = ConsistentLpProblem(np.array([[1.0]]), np.array([0.5]), 0.25)
        x = consistent_reconstruct(problem)
        self.assertLessEqual(abs(x[0] - 0.5), 0.125 + 1e-12)

    def test_orthogonal_basis(self):
        rng = np.random.Generator(np.random.PCG64(4))
        rotation = random_rotation(8, 5)
        x = rng.standard_normal(8)
        observed = 0.25 * np.rint(rotation.T @ x / 0.25)
        estimate = consistent_reconstruct(ConsistentLpProblem(rotation, observed, 0.25))
        self.assertTrue(np.all(np.abs(rotation.T @ (estimate - x)) <= 0.25 + 1e-9))

    def test_empty_cell(self):
        problem = ConsistentLpProblem(np.array([[1.0, 1.0]]), np.array([0.0, 1.0]), 0.5)
        with self.assertRaises(NumericalError) as caught:
            consistent_reconstruct(problem, max_sweeps=50)
        self.assertGreater(caught.exception.violation, 0.0)

    def test_problem_checks(self):
        with self.assertRaises(ShapeError):
            ConsistentLpProblem(np.eye(2), np.zeros(3))
        with self.assertRaises(ConfigError):
            ConsistentLpProblem(np.eye(2), np.zeros(2), 0.0)

    def test_box_center(self):
        problem = ConsistentLpProblem(np.eye(3), np.array([0.5, -1.0, 2.0]), 0.5)
        center, radius = problem.chebyshev_center()
        assert_allclose(center, [0.5, -1.0, 2.0], atol=1e-7)
        self.assertAlmostEqual(radius, 0.25, places=7)
        assert_allclose(consistent_reconstruct(problem), center, atol=1e-7)

    def test_central_point_is_interior(self):
        frame = build_fusion_frame(8, 4, seed=11)
        unit = 2.0 * frame.vectorized
        rng = np.random.Generator(np.random.PCG64(8))
        for _ in range(20):
            x = rng.standard_normal(8)
            problem = ConsistentLpProblem(unit, 0.25 * np.rint(unit.T @ x / 0.25), 0.25)
            central = consistent_reconstruct(problem)
            self.assertLess(float(np.max(problem.violations(central))), 0.0)
            first = consistent_reconstruct(problem, center=False)
            self.assertLessEqual(float(np.max(problem.violations(first))), 1e-9)

    def test_experiment(self):
        rows = consistent_experiment(d=8, redundancies=(1, 2, 4, 8), trials=500, seed=2)
        self.assertEqual([row.r for row in rows], [1, 2, 4, 8])
        for row in rows:
            self.assertEqual(row.trials, 500)
            self.assertLessEqual(row.consistent_mse, row.linear_mse + 1e-12)
        self.assertAlmostEqual(rows[0].consistent_mse, rows[0].linear_mse, places=9)
        self.assertLess(rows[-1].consistent_mse, 0.9 * rows[-1].linear_mse)
        self.assertLessEqual(rows[0].slope, -1.2)
        linear = loglog_slope([row.r for row in rows], [row.linear_mse for row in rows])
        self.assertAlmostEqual(linear, -1.0, delta=0.2)


class TestReporting(unittest.TestCase):
    def test_slope(self):
        self.assertAlmostEqual(loglog_slope([1, 2, 4], [1.0, 0.5, 0.25]), -1.0)
        self.assertTrue(np.isnan(loglog_slope([2], [1.0])))

    def test_format_r(self):
        self.assertEqual(format_r(2), "2")
        self.assertEqual(format_r(Fraction(3, 2)), "1.5")

    def test_csv(self):
        stream = io.StringIO()
        write_csv([NoiseRow(Fraction(3, 2), 10, 0.0666666, 0.6666666, -1.0)], stream)
        self.assertEqual(
            stream.getvalue(),
            "r,trials,mse,ratio,slope\n1.5,10,0.0666666,0.666667,-1\n",
        )


class TestSysdeps(unittest.TestCase):
    def test_worker_count(self):
        with mock.patch.dict(os.environ, {"FQ_THREADS": "2"}):
            self.assertEqual(worker_count(), 2)
        with mock.patch.dict(os.environ, {"FQ_THREADS": "0"}):
            with self.assertRaises(ConfigError):
                worker_count()
        with mock.patch.dict(os.environ, {"FQ_THREADS": "many"}):
            with self.assertRaises(ConfigError):
                worker_count()

    def test_parallel_map_keeps_order(self):
        with mock.patch.dict(os.environ, {"FQ_THREADS": "4"}):
            self.assertEqual(
                parallel_map(lambda n: n * n, range(10)), [n * n for n in range(10)]
            )


if __name__ == "__main__":
    unittest.main()
