"""
Monte Carlo checks of how fusion frame redundancy buys robustness.

* :func:`noise_mse_experiment`: additive noise on frame coefficients; the
  reconstruction error falls like ``1/r``.
* :func:`wiener_experiment`: scalar Wiener shrinkage of noisy coefficients
  against plain synthesis.
* :func:`consistent_experiment`: uniform quantization of unit-norm frame
  coefficients, comparing linear reconstruction with a central point of
  the consistency cell (error approaching ``1/r**2``).

Every trial draws from its own stream, seeded by ``(seed, trial)``, so
results do not depend on how trials are spread over threads.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Tuple, Union

import numpy as np
from scipy import optimize

from tffquant.errors import ConfigError, NumericalError, ShapeError
from tffquant.frameops import analysis, synthesis
from tffquant.sysdeps import parallel_map
from tffquant.tff import as_fraction, build_fusion_frame, frame_seed

LOG = logging.getLogger(__name__)

QUANTIZERS = ("additive-gaussian", "uniform-memoryless")
MAX_SWEEPS = 100_000
MAX_NEWTON_STEPS = 50


@dataclass
class NoiseExperimentConfig:
    """
    Settings shared by the noise and Wiener experiments.

    ``snr_db`` is the ratio of mean coefficient power to noise variance.
    """

    d: int = 4
    redundancies: Tuple[Union[Fraction, float, str], ...] = (1, Fraction(3, 2), 2)
    snr_db: float = 10.0
    trials: int = 1000
    seed: int = 0
    quantizer: str = "additive-gaussian"

    def validate(self):
        if self.d < 1:
            raise ConfigError(f"dimension must be positive, got {self.d}")
        if self.trials < 1:
            raise ConfigError(f"trials must be positive, got {self.trials}")
        if not math.isfinite(self.snr_db):
            raise ConfigError(f"snr_db must be finite, got {self.snr_db}")
        if self.quantizer not in QUANTIZERS:
            raise ConfigError(f"quantizer must be one of {QUANTIZERS}")
        if not self.redundancies:
            raise ConfigError("at least one redundancy is required")
        return self


@dataclass
class NoiseRow:
    """One row of a noise table."""

    r: Fraction
    trials: int
    mse: float
    ratio: float
    slope: float


def _trial_rng(seed, trial):
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(trial,)))
    )


def _frames(d, redundancies, seed):
    return [
        build_fusion_frame(d, as_fraction(r), frame_seed(seed, index))
        for index, r in enumerate(redundancies)
    ]


def loglog_slope(rs, mses):
    """
    Least-squares slope of ``log(mse)`` against ``log(r)``.

    :rtype: float
    """
    rs = np.log(np.asarray([float(r) for r in rs]))
    mses = np.log(np.asarray(mses, dtype=np.float64))
    if rs.size < 2 or np.ptp(rs) == 0:
        return float("nan")
    return float(np.polyfit(rs, mses, 1)[0])


def _noisy(coefficients, snr_db, quantizer, rng):
    power = float(np.mean(coefficients**2))
    noise_var = power / 10.0 ** (snr_db / 10.0)
    if quantizer == "uniform-memoryless":
        step = math.sqrt(12.0 * noise_var)
        if step == 0.0:
            return coefficients.copy()
        return step * np.rint(coefficients / step)
    return coefficients + math.sqrt(noise_var) * rng.standard_normal(coefficients.shape)


def noise_mse_experiment(cfg):
    """
    Mean reconstruction error of unit-norm signals under coefficient noise.

    :param NoiseExperimentConfig cfg: Settings; must include ``r = 1``.
    :rtype: list
    :returns: :class:`NoiseRow` per redundancy, ratios relative to ``r = 1``.
    """
    cfg.validate()
    requested = [as_fraction(r) for r in cfg.redundancies]
    if 1 not in requested:
        raise ConfigError("redundancies must include 1 as the baseline")
    frames = _frames(cfg.d, requested, cfg.seed)

    def run(trial):
        rng = _trial_rng(cfg.seed, trial)
        x = rng.standard_normal(cfg.d)
        x /= np.linalg.norm(x)
        errors = []
        for frame in frames:
            coefficients = analysis(frame, x).data
            noisy = _noisy(coefficients, cfg.snr_db, cfg.quantizer, rng)
            errors.append(float(np.sum((synthesis(frame, noisy) - x) ** 2)))
        return errors

    errors = np.asarray(parallel_map(run, range(cfg.trials)))
    mses = errors.mean(axis=0)
    baseline = mses[requested.index(1)]
    realized = [frame.redundancy for frame in frames]
    slope = loglog_slope(realized, mses)
    rows = [
        NoiseRow(r, cfg.trials, float(mse), float(mse / baseline), slope)
        for r, mse in zip(realized, mses)
    ]
    for row in rows:
        LOG.info("noise r=%s mse=%.6g ratio=%.4f", row.r, row.mse, row.ratio)
    return rows


class WienerReconstructor:
    """
    Synthesis after scalar shrinkage of the coefficients by ``gain``.
    """

    def __init__(self, frame, gain):
        self.frame = frame
        self.gain = gain

    def __call__(self, coefficients):
        return synthesis(self.frame, self.gain * np.asarray(coefficients))


def wiener_shrinkage(frame, signal_var, noise_var):
    """
    Diagonal Wiener reconstruction with ``c = s / (s + n)``.

    :param FusionFrame frame: The frame.
    :param float signal_var: Per-coefficient signal variance.
    :param float noise_var: Per-coefficient noise variance.
    :rtype: WienerReconstructor
    """
    if signal_var < 0 or noise_var < 0:
        raise ConfigError("variances must be non-negative")
    if signal_var == 0 and noise_var == 0:
        raise ConfigError("signal and noise variance cannot both be zero")
    return WienerReconstructor(frame, signal_var / (signal_var + noise_var))


@dataclass
class WienerRow:
    """Plain against shrunk reconstruction at one redundancy."""

    r: Fraction
    trials: int
    plain_mse: float
    wiener_mse: float

    @property
    def reduction(self):
        return 1.0 - self.wiener_mse / self.plain_mse


def wiener_experiment(cfg, signal_var=1.0):
    """
    Compare plain synthesis with Wiener shrinkage for white Gaussian signals
    ``x ~ N(0, signal_var I)`` and white coefficient noise at ``snr_db``.

    :rtype: list
    :returns: :class:`WienerRow` per redundancy.
    """
    cfg.validate()
    requested = [as_fraction(r) for r in cfg.redundancies]
    frames = _frames(cfg.d, requested, cfg.seed)
    setups = []
    for frame in frames:
        coefficient_var = signal_var / float(frame.redundancy)
        noise_var = coefficient_var / 10.0 ** (cfg.snr_db / 10.0)
        setups.append(
            (frame, noise_var, wiener_shrinkage(frame, coefficient_var, noise_var))
        )

    def run(trial):
        rng = _trial_rng(cfg.seed, trial)
        x = math.sqrt(signal_var) * rng.standard_normal(cfg.d)
        errors = []
        for frame, noise_var, shrink in setups:
            coefficients = analysis(frame, x).data
            noisy = coefficients + math.sqrt(noise_var) * rng.standard_normal(
                coefficients.shape
            )
            errors.append(
                (
                    float(np.sum((synthesis(frame, noisy) - x) ** 2)),
                    float(np.sum((shrink(noisy) - x) ** 2)),
                )
            )
        return errors

    errors = np.asarray(parallel_map(run, range(cfg.trials)))
    means = errors.mean(axis=0)
    return [
        WienerRow(frame.redundancy, cfg.trials, float(plain), float(shrunk))
        for (frame, _, _), (plain, shrunk) in zip(setups, means)
    ]


@dataclass
class ConsistentLpProblem:
    """
    Find ``x`` with ``|A^T x - y_hat| <= step / 2`` entrywise.

    :param numpy.ndarray synthesis: Frame matrix ``A`` (``d x m``), one
        frame vector per column.
    :param numpy.ndarray observed: Quantized coefficients ``y_hat``.
    :param step: Quantization step, scalar or one per coefficient.
    """

    synthesis: np.ndarray
    observed: np.ndarray
    step: Union[float, np.ndarray] = field(default=1.0)

    def __post_init__(self):
        self.synthesis = np.atleast_2d(np.asarray(self.synthesis, dtype=np.float64))
        self.observed = np.atleast_1d(np.asarray(self.observed, dtype=np.float64))
        if self.observed.shape != (self.synthesis.shape[1],):
            raise ShapeError(
                f"{self.observed.shape[0]} observations for "
                f"{self.synthesis.shape[1]} frame vectors"
            )
        step = np.broadcast_to(
            np.asarray(self.step, dtype=np.float64), self.observed.shape
        )
        if np.any(step <= 0):
            raise ConfigError("quantization step must be positive")
        self.step = step

    def violations(self, x):
        """Per-constraint excess over the half step (non-positive when met)."""
        residual = self.synthesis.T @ x - self.observed
        return np.abs(residual) - self.step / 2

    def chebyshev_center(self):
        """
        Center and radius of the largest ball inside the cell, from the
        linear program ``max t`` subject to
        ``+-(a_j^T x - y_j) + |a_j| t <= step_j / 2``.

        :rtype: tuple
        :returns: ``(center, radius)``.
        """
        frame = self.synthesis
        d = frame.shape[0]
        norms = np.linalg.norm(frame, axis=0)[:, None]
        half = self.step / 2
        a_ub = np.vstack([np.hstack([frame.T, norms]), np.hstack([-frame.T, norms])])
        b_ub = np.concatenate([half + self.observed, half - self.observed])
        cost = np.zeros(d + 1)
        cost[-1] = -1.0
        result = optimize.linprog(
            cost,
            A_ub=a_ub,
            b_ub=b_ub,
            bounds=[(None, None)] * d + [(0, None)],
            method="highs",
        )
        if result.status != 0:
            raise NumericalError(f"consistency program failed: {result.message}")
        return result.x[:d], float(result.x[-1])

    def barrier(self, x):
        """
        Log barrier of the cell, ``inf`` outside its interior.
        """
        residual = self.synthesis.T @ x - self.observed
        upper = self.step / 2 - residual
        lower = self.step / 2 + residual
        if np.any(upper <= 0) or np.any(lower <= 0):
            return float("inf")
        return -float(np.sum(np.log(upper)) + np.sum(np.log(lower)))


def _analytic_center(problem, x, max_steps=MAX_NEWTON_STEPS):
    """
    Damped Newton iterations on the log barrier from the interior point
    ``x``; every iterate stays strictly inside the cell.
    """
    frame, observed, half = problem.synthesis, problem.observed, problem.step / 2
    value = problem.barrier(x)
    for _ in range(max_steps):
        residual = frame.T @ x - observed
        upper, lower = half - residual, half + residual
        gradient = frame @ (1.0 / upper - 1.0 / lower)
        hessian = (frame * (1.0 / upper**2 + 1.0 / lower**2)) @ frame.T
        direction = -np.linalg.lstsq(hessian, gradient, rcond=None)[0]
        decrement = float(-gradient @ direction)
        if decrement < 1e-14:
            break
        t = 1.0
        while t > 1e-10:
            candidate = x + t * direction
            candidate_value = problem.barrier(candidate)
            if candidate_value <= value - 0.25 * t * decrement:
                break
            t /= 2
        else:
            break
        x, value = candidate, candidate_value
    return x


def _project_cyclic(problem, tol, max_sweeps):
    frame = problem.synthesis
    observed, half = problem.observed, problem.step / 2
    norms = np.sum(frame**2, axis=0)
    x = np.linalg.lstsq(frame.T, observed, rcond=None)[0]
    worst = float("inf")
    for sweep in range(max_sweeps):
        excess = problem.violations(x)
        worst = float(np.max(excess, initial=0.0))
        if worst <= tol:
            LOG.debug("consistent point after %d sweeps", sweep)
            return x
        for j in np.flatnonzero(excess > 0):
            if norms[j] == 0.0:
                continue
            residual = frame[:, j] @ x - observed[j]
            if residual > half[j]:
                x = x - (residual - half[j]) / norms[j] * frame[:, j]
            elif residual < -half[j]:
                x = x - (residual + half[j]) / norms[j] * frame[:, j]
    raise NumericalError(
        f"no consistent point after {max_sweeps} sweeps "
        f"(max violation {worst:.3g}); the cell may be empty",
        violation=worst,
    )


def consistent_reconstruct(problem, tol=1e-9, max_sweeps=MAX_SWEEPS, center=True):
    """
    A point inside the quantization cell.

    Cyclic projections onto the violated slabs, started from the
    least-squares estimate, establish that the cell is not empty. With
    ``center`` set, the Chebyshev center of the cell is then refined to the
    analytic center, which sits near the middle of the cell instead of on
    the face closest to the linear estimate.

    :param ConsistentLpProblem problem: The cell.
    :param float tol: Largest constraint violation accepted.
    :param int max_sweeps: Sweep limit before giving up.
    :param bool center: Return a central point rather than the first
        consistent one.
    :rtype: numpy.ndarray
    """
    point = _project_cyclic(problem, tol, max_sweeps)
    if not center:
        return point
    start, radius = problem.chebyshev_center()
    if radius <= tol:
        return point
    return _analytic_center(problem, start)


@dataclass
class ConsistentRow:
    """Linear against consistent reconstruction at one redundancy."""

    r: Fraction
    trials: int
    linear_mse: float
    consistent_mse: float
    slope: float


def consistent_experiment(
    d=8, redundancies=(1, 2, 4, 8), trials=200, step=0.25, seed=0
):
    """
    Quantize the coefficients of unit-norm frame vectors
    ``sqrt(r) * P`` with step ``step`` and compare the linear estimate
    ``P y_hat / sqrt(r)`` with a consistent estimate.

    :rtype: list
    :returns: :class:`ConsistentRow` per redundancy; ``slope`` is the
        log-log slope of the consistent error.
    """
    if trials < 1:
        raise ConfigError(f"trials must be positive, got {trials}")
    if step <= 0:
        raise ConfigError(f"step must be positive, got {step}")
    frames = _frames(d, [as_fraction(r) for r in redundancies], seed)
    unit_frames = [math.sqrt(float(f.redundancy)) * f.vectorized for f in frames]

    def run(trial):
        rng = _trial_rng(seed, trial)
        x = rng.standard_normal(d)
        errors = []
        for frame, unit in zip(frames, unit_frames):
            observed = step * np.rint(unit.T @ x / step)
            linear = unit @ observed / float(frame.redundancy)
            problem = ConsistentLpProblem(unit, observed, step)
            consistent = consistent_reconstruct(problem)
            errors.append(
                (
                    float(np.sum((linear - x) ** 2)),
                    float(np.sum((consistent - x) ** 2)),
                )
            )
        return errors

    errors = np.asarray(parallel_map(run, range(trials)))
    means = errors.mean(axis=0)
    realized = [frame.redundancy for frame in frames]
    slope = loglog_slope(realized, means[:, 1])
    return [
        ConsistentRow(r, trials, float(linear), float(consistent), slope)
        for r, (linear, consistent) in zip(realized, means)
    ]


def format_r(r):
    r = as_fraction(r)
    return str(r.numerator) if r.denominator == 1 else f"{float(r):g}"


def write_csv(rows, stream):
    """
    Write result rows (dataclasses) as CSV with a header line.
    """
    rows = list(rows)
    if not rows:
        return
    names = list(rows[0].__dataclass_fields__)
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(names)
    for row in rows:
        values = []
        for name in names:
            value = getattr(row, name)
            if name == "r":
                values.append(format_r(value))
            elif isinstance(value, float):
                values.append(f"{value:.6g}")
            else:
                values.append(value)
        writer.writerow(values)
