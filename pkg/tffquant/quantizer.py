"""
Post-training quantization of linear layers in fusion frame space.

A layer ``Theta`` (``d_out x d_in``) is rewritten as
``D = P_out^T Theta P_in``, outliers of ``D`` are clipped at a multiple of
its standard deviation, and every row gets an asymmetric uniform grid.
Columns are then quantized in blocks, pushing each column's error onto the
columns that are still unquantized using the inverse Cholesky factor of the
damped Hessian ``H = C C^T`` of the calibration coefficients.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy import linalg

from tffquant.errors import ConfigError, NumericalError, ShapeError
from tffquant.frameops import FFCoefficients, analysis
from tffquant.tff import FrameParams, as_fraction, build_fusion_frame, frame_seed

LOG = logging.getLogger(__name__)

ACTIVATION_BITS = (4, 6, 8)


@dataclass
class QuantConfig:
    """
    Knobs of the quantizer.

    ``clip_sigmas=None`` disables clipping. ``redundancy`` is the target
    ``k*rho/d`` used for every frame of a model. ``rotate=False`` leaves
    out the seeded rotations, so redundancy 1 quantizes in the weight basis.
    """

    bits: int = 2
    clip_sigmas: Optional[float] = 2.0
    block_size: int = 128
    redundancy: Fraction = Fraction(11, 10)
    seed: int = 0
    damping_fraction: float = 0.01
    act_order: bool = False
    rotate: bool = True

    def __post_init__(self):
        self.redundancy = as_fraction(self.redundancy)

    def validate(self):
        """
        Raise :class:`~tffquant.errors.ConfigError` on out-of-range values.

        :returns: self
        """
        if not 2 <= self.bits <= 8:
            raise ConfigError(f"bits must be in 2..8, got {self.bits}")
        if self.clip_sigmas is not None and not self.clip_sigmas > 0:
            raise ConfigError(f"clip_sigmas must be positive, got {self.clip_sigmas}")
        if self.block_size < 1:
            raise ConfigError(f"block_size must be positive, got {self.block_size}")
        if self.redundancy < 1:
            raise ConfigError(f"redundancy must be at least 1, got {self.redundancy}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in 64 bits, got {self.seed}")
        if not self.damping_fraction >= 0:
            raise ConfigError(
                f"damping_fraction must be non-negative, got {self.damping_fraction}"
            )
        return self

    def plain_rotation(self):
        """
        Same settings at redundancy 1 without clipping: both sides of every
        layer get a random orthogonal rotation and nothing else.

        :rtype: QuantConfig
        """
        return replace(self, redundancy=1, clip_sigmas=None, rotate=True)


@dataclass(frozen=True)
class LayerWeights:
    """
    A named full-precision weight matrix, ``d_out x d_in``.
    """

    name: str
    theta: np.ndarray

    def __post_init__(self):
        if self.theta.ndim != 2:
            raise ShapeError(f"layer {self.name!r} weights must be 2-D")
        if not np.all(np.isfinite(self.theta)):
            raise ConfigError(f"layer {self.name!r} has non-finite weights")

    @property
    def shape(self):
        return self.theta.shape


class RowGrid:
    """
    Per-row asymmetric uniform grid. Scales and zero points are stored in
    FP32; dequantization runs in FP32 so the quantizer and the runtime see
    exactly the same values.

    :param numpy.ndarray scale: One positive scale per row.
    :param numpy.ndarray zero: One integer-valued zero point per row.
    :param int bits: Code width.
    """

    def __init__(self, scale, zero, bits):
        self.scale = np.asarray(scale, dtype=np.float32)
        self.zero = np.asarray(zero, dtype=np.float32)
        self.bits = bits
        if self.scale.shape != self.zero.shape or self.scale.ndim != 1:
            raise ShapeError("scale and zero must be vectors of equal length")

    @property
    def maxq(self):
        return (1 << self.bits) - 1

    @property
    def rows(self):
        return self.scale.shape[0]

    def _column(self, array, values):
        return array.reshape((-1,) + (1,) * (values.ndim - 1))

    def quantize(self, values):
        """
        Round to the nearest grid point of each row and clamp.

        :param numpy.ndarray values: A column (``rows``) or matrix with
            ``rows`` rows.
        :rtype: numpy.ndarray
        :returns: integer codes in ``[0, 2**bits - 1]``.
        """
        scale = self._column(self.scale.astype(np.float64), values)
        zero = self._column(self.zero.astype(np.float64), values)
        codes = np.rint(values / scale) + zero
        return np.clip(codes, 0, self.maxq).astype(np.int64)

    def dequantize(self, codes):
        """
        ``(codes - zero) * scale`` evaluated in FP32, returned as float64.
        """
        codes = np.asarray(codes)
        scale = self._column(self.scale, codes)
        zero = self._column(self.zero, codes)
        return ((codes.astype(np.float32) - zero) * scale).astype(np.float64)


def clip_2sigma(matrix, sigmas=2.0):
    """
    Clip every entry to ``[mu - sigmas*sigma, mu + sigmas*sigma]`` using
    the global mean and standard deviation. ``sigmas=None`` skips clipping
    but still reports the statistics.

    :rtype: tuple
    :returns: ``(clipped, mu, sigma)``
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    mu = float(matrix.mean()) if matrix.size else 0.0
    sigma = float(matrix.std()) if matrix.size else 0.0
    if sigmas is None or sigma == 0.0:
        return matrix.copy(), mu, sigma
    return np.clip(matrix, mu - sigmas * sigma, mu + sigmas * sigma), mu, sigma


def quant_grid_per_row(matrix, bits):
    """
    Asymmetric grid per row: ``scale = (max - min) / (2**bits - 1)`` and
    ``zero = rint(-min / scale)`` clamped to the code range.

    A constant row ``c`` gets ``scale = |c|`` with zero 0 (``c > 0``) or
    zero 1 (``c < 0``), so code 1 or code 0 reproduces ``c``; all-zero rows
    get scale 1 and zero 0.

    :rtype: RowGrid
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    maxq = (1 << bits) - 1
    low = matrix.min(axis=1)
    high = matrix.max(axis=1)
    span = high - low
    constant = span == 0
    scale = np.where(constant, np.where(low == 0, 1.0, np.abs(low)), span / maxq)
    zero = np.where(
        constant,
        np.where(low < 0, 1.0, 0.0),
        np.clip(np.rint(-low / scale), 0, maxq),
    )
    return RowGrid(scale, zero, bits)


def round_to_nearest(matrix, grid):
    """
    Plain round-to-nearest quantization on ``grid``; the baseline that the
    error-feedback quantizer is measured against.

    :rtype: numpy.ndarray
    """
    return grid.quantize(np.asarray(matrix, dtype=np.float64))


def proxy_loss(original, approx, hessian):
    """
    ``trace((D - D_hat) H (D - D_hat)^T)``

    :rtype: float
    """
    error = np.asarray(original, dtype=np.float64) - approx
    return float(np.einsum("ij,jk,ik->", error, hessian, error))


def proxy_loss_direct(original, approx, coefficients):
    """
    ``||(D - D_hat) C||_F^2``, equal to :func:`proxy_loss` with
    ``H = C C^T``.

    :rtype: float
    """
    if isinstance(coefficients, FFCoefficients):
        coefficients = coefficients.data
    error = np.asarray(original, dtype=np.float64) - approx
    return float(np.sum((error @ coefficients) ** 2))


class HessianAccumulator:
    """
    Running sum of ``C C^T`` over calibration batches.

    :param int size: Number of frame coefficients (``k*rho``).
    :param float damping_fraction: ``lambda = damping_fraction * mean(diag H)``.
    """

    def __init__(self, size, damping_fraction=0.01):
        self.h = np.zeros((size, size))
        self.sample_count = 0
        self.damping_fraction = damping_fraction

    @property
    def size(self):
        return self.h.shape[0]

    def add_batch(self, coefficients):
        """
        Accumulate one batch (``size x n``).
        """
        if isinstance(coefficients, FFCoefficients):
            coefficients = coefficients.data
        coefficients = np.asarray(coefficients, dtype=np.float64)
        if coefficients.ndim == 1:
            coefficients = coefficients[:, None]
        if coefficients.shape[0] != self.size:
            raise ShapeError(
                f"calibration batch has {coefficients.shape[0]} rows, "
                f"expected {self.size}"
            )
        gram = coefficients @ coefficients.T
        self.h += 0.5 * (gram + gram.T)
        self.sample_count += coefficients.shape[1]

    def damping(self, fraction=None):
        fraction = self.damping_fraction if fraction is None else fraction
        mean_diag = float(np.mean(np.diag(self.h))) if self.size else 0.0
        if mean_diag <= 0.0:
            return fraction if fraction > 0 else 1.0
        return fraction * mean_diag

    def damped(self, fraction=None):
        """
        ``H + lambda I``, positive definite as long as ``lambda > 0``.
        """
        return self.h + self.damping(fraction) * np.eye(self.size)


def hessian_from_calibration(batches, damping_fraction=0.01):
    """
    Accumulate ``H = sum C C^T`` over calibration coefficient batches.

    :rtype: HessianAccumulator
    """
    accumulator = None
    for batch in batches:
        data = batch.data if isinstance(batch, FFCoefficients) else np.asarray(batch)
        if accumulator is None:
            accumulator = HessianAccumulator(data.shape[0], damping_fraction)
        accumulator.add_batch(data)
    if accumulator is None or accumulator.sample_count == 0:
        raise ConfigError("empty calibration set")
    return accumulator


def _inverse_cholesky_upper(hessian):
    """
    Upper Cholesky factor of ``H^-1``.
    """
    lower = linalg.cholesky(hessian, lower=True)
    inverse = linalg.cho_solve((lower, True), np.eye(hessian.shape[0]))
    return linalg.cholesky(inverse, lower=False)


def _factor_with_retry(hessian, order):
    retry = 10 * hessian.damping_fraction or 0.1
    try:
        return _inverse_cholesky_upper(hessian.damped()[np.ix_(order, order)])
    except linalg.LinAlgError:
        LOG.warning(
            "Cholesky of damped Hessian failed, retrying with damping %g", retry
        )
    h = hessian.damped(retry)[np.ix_(order, order)]
    try:
        return _inverse_cholesky_upper(h)
    except linalg.LinAlgError as exc:
        raise NumericalError(
            f"Hessian is not positive definite even with damping {retry}; "
            "increase damping_fraction"
        ) from exc


def gptq_quantize(matrix, hessian, grid, block_size=128, act_order=False):
    """
    Quantize ``matrix`` column by column with error feedback.

    Within a block, the scaled error of column ``j`` is subtracted from the
    remaining block columns through row ``j`` of the upper inverse Cholesky
    factor; after each block, the accumulated block error updates all later
    columns at once. With ``H = I`` this is exactly round-to-nearest.

    :param numpy.ndarray matrix: Weights to quantize (``rows x cols``).
    :param HessianAccumulator hessian: Calibration Hessian (``cols x cols``).
    :param RowGrid grid: Per-row grid.
    :param int block_size: Columns per block.
    :param bool act_order: Process columns by decreasing Hessian diagonal.
    :rtype: tuple
    :returns: ``(codes, proxy_loss)`` with the loss measured on the
        undamped Hessian.
    """
    original = np.asarray(matrix, dtype=np.float64)
    rows, cols = original.shape
    if hessian.size != cols:
        raise ShapeError(f"Hessian of size {hessian.size} for {cols} columns")
    if grid.rows != rows:
        raise ShapeError(f"grid of {grid.rows} rows for {rows} rows")
    if block_size < 1:
        raise ConfigError(f"block_size must be positive, got {block_size}")

    if act_order:
        order = np.argsort(-np.diag(hessian.h), kind="stable")
    else:
        order = np.arange(cols)
    work = original[:, order].copy()
    hinv = _factor_with_retry(hessian, order)

    codes = np.zeros((rows, cols), dtype=np.int64)
    for start in range(0, cols, block_size):
        end = min(start + block_size, cols)
        block = work[:, start:end].copy()
        errors = np.zeros_like(block)
        hblock = hinv[start:end, start:end]
        for j in range(end - start):
            column = block[:, j]
            q = grid.quantize(column)
            codes[:, start + j] = q
            err = (column - grid.dequantize(q)) / hblock[j, j]
            errors[:, j] = err
            block[:, j + 1 :] -= np.outer(err, hblock[j, j + 1 :])
        work[:, end:] -= errors @ hinv[start:end, end:]

    if act_order:
        restored = np.empty_like(codes)
        restored[:, order] = codes
        codes = restored
    loss = proxy_loss(original, grid.dequantize(codes), hessian.h)
    return codes, loss


def quantize_activations(coefficients, n_bits):
    """
    Symmetric per-tensor quantization of frame coefficients:
    ``delta = max|C| / (2**(n-1) - 1)``, round half away from zero.

    :rtype: tuple
    :returns: ``(codes, delta)``; ``codes * delta`` is the dequantized
        tensor.
    """
    if n_bits not in ACTIVATION_BITS:
        raise ConfigError(f"activation bits must be one of {ACTIVATION_BITS}")
    if isinstance(coefficients, FFCoefficients):
        coefficients = coefficients.data
    coefficients = np.asarray(coefficients, dtype=np.float64)
    qmax = (1 << (n_bits - 1)) - 1
    peak = float(np.max(np.abs(coefficients))) if coefficients.size else 0.0
    delta = peak / qmax if peak > 0 else 1.0
    scaled = coefficients / delta
    codes = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(codes, -qmax, qmax).astype(np.int64), delta


def hidden_activation(values):
    """ReLU between consecutive layers."""
    return np.maximum(values, 0.0)


def transform_weights(theta, frame_out, frame_in):
    """
    ``D = P_out^T Theta P_in``

    :rtype: numpy.ndarray
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (frame_out.d, frame_in.d):
        raise ShapeError(
            f"weights of shape {theta.shape} do not match frames "
            f"({frame_out.d}, {frame_in.d})"
        )
    return frame_out.vectorized.T @ theta @ frame_in.vectorized


@dataclass(eq=False)
class QuantizedLayer:
    """
    A quantized layer as stored on disk: ``D_hat`` codes, the per-row grid,
    the clipping statistics and both frames.
    """

    name: str
    codes: np.ndarray
    row_scale: np.ndarray
    row_zero: np.ndarray
    clip_mu: float
    clip_sigma: float
    frame_out: FrameParams
    frame_in: FrameParams
    bits: int

    def __post_init__(self):
        expected = (self.frame_out.size, self.frame_in.size)
        if self.codes.shape != expected:
            raise ShapeError(
                f"layer {self.name!r} has codes of shape {self.codes.shape}, "
                f"expected {expected}"
            )
        if self.codes.size and (
            self.codes.min() < 0 or self.codes.max() >= (1 << self.bits)
        ):
            raise ConfigError(f"layer {self.name!r} has codes outside {self.bits} bits")
        self.row_scale = np.asarray(self.row_scale, dtype=np.float32)
        self.row_zero = np.asarray(self.row_zero, dtype=np.float32)
        # stored as f32 on disk
        self.clip_mu = float(np.float32(self.clip_mu))
        self.clip_sigma = float(np.float32(self.clip_sigma))

    @property
    def grid(self):
        return RowGrid(self.row_scale, self.row_zero, self.bits)

    @property
    def theta_shape(self):
        return (self.frame_out.d, self.frame_in.d)

    def dequantized(self):
        """``D_hat`` as float64."""
        return self.grid.dequantize(self.codes)


@dataclass(eq=False)
class LayerResult:
    """
    Output of :func:`quantize_layer`: the stored layer, the layer outputs
    ``P_out D_hat C`` fed to the next layer, and diagnostics.
    """

    layer: QuantizedLayer
    outputs: np.ndarray
    proxy_loss: float
    hessian: HessianAccumulator = field(repr=False)
    clip_fraction: float = 0.0


def quantize_layer(weights, activations, config, frames):
    """
    Quantize one layer in frame space.

    :param LayerWeights weights: Full-precision layer.
    :param numpy.ndarray activations: Layer inputs, ``d_in x n``.
    :param QuantConfig config: Quantizer settings.
    :param tuple frames: ``(frame_out, frame_in)``.
    :rtype: LayerResult
    """
    config.validate()
    frame_out, frame_in = frames
    coefficients = analysis(frame_in, activations)
    hessian = hessian_from_calibration([coefficients], config.damping_fraction)
    transformed = transform_weights(weights.theta, frame_out, frame_in)
    clipped, mu, sigma = clip_2sigma(transformed, config.clip_sigmas)
    clip_fraction = float(np.mean(clipped != transformed)) if clipped.size else 0.0
    grid = quant_grid_per_row(clipped, config.bits)
    codes, _ = gptq_quantize(
        clipped, hessian, grid, config.block_size, config.act_order
    )
    approx = grid.dequantize(codes)
    loss = proxy_loss(transformed, approx, hessian.h)
    outputs = frame_out.vectorized @ (approx @ coefficients.data)
    LOG.info(
        "layer %s: %dx%d in frame space, proxy loss %.6g, %.2f%% clipped",
        weights.name,
        codes.shape[0],
        codes.shape[1],
        loss,
        100.0 * clip_fraction,
    )
    layer = QuantizedLayer(
        name=weights.name,
        codes=codes.astype(np.uint8),
        row_scale=grid.scale,
        row_zero=grid.zero,
        clip_mu=mu,
        clip_sigma=sigma,
        frame_out=frame_out.params,
        frame_in=frame_in.params,
        bits=config.bits,
    )
    return LayerResult(layer, outputs, loss, hessian, clip_fraction)


def model_dimensions(layers):
    """
    Boundary dimensions ``[d_0, d_1, ..., d_L]`` of a chain of layers.

    :param list layers: :class:`LayerWeights` in forward order.
    :rtype: list
    """
    if not layers:
        raise ShapeError("model has no layers")
    dims = [layers[0].shape[1]]
    for previous, layer in zip([None] + layers[:-1], layers):
        if previous is not None and layer.shape[1] != previous.shape[0]:
            raise ShapeError(
                f"layer {layer.name!r} expects {layer.shape[1]} inputs but "
                f"{previous.name!r} produces {previous.shape[0]}"
            )
        dims.append(layer.shape[0])
    return dims


def build_model_frames(dims, config):
    """
    One frame per layer boundary, seeded with ``config.seed XOR boundary``.

    :rtype: list
    """
    return [
        build_fusion_frame(
            d, config.redundancy, frame_seed(config.seed, b), rotate=config.rotate
        )
        for b, d in enumerate(dims)
    ]


def quantize_model(layers, calibration, config):
    """
    Quantize a chain of layers, feeding each layer the quantized outputs of
    the previous one (after ReLU).

    :param layers: :class:`LayerWeights` in forward order, or a tensor
        container holding them.
    :param calibration: Calibration inputs, ``d_0 x n``, as an array or a
        container whose first tensor holds them.
    :param QuantConfig config: Quantizer settings.
    :rtype: list
    :returns: one :class:`LayerResult` per layer.
    """
    config.validate()
    if hasattr(layers, "layers"):
        layers = layers.layers()
    if hasattr(calibration, "first"):
        calibration = calibration.first("calibration")
    dims = model_dimensions(layers)
    calibration = np.asarray(calibration, dtype=np.float64)
    if calibration.ndim != 2 or calibration.shape[0] != dims[0]:
        raise ShapeError(
            f"calibration inputs of shape {calibration.shape} do not match "
            f"input dimension {dims[0]}"
        )
    if calibration.shape[1] == 0:
        raise ConfigError("empty calibration set")
    frames = build_model_frames(dims, config)
    results = []
    inputs = calibration
    for index, layer in enumerate(layers):
        result = quantize_layer(
            layer, inputs, config, (frames[index + 1], frames[index])
        )
        results.append(result)
        inputs = result.outputs
        if index + 1 < len(layers):
            inputs = hidden_activation(inputs)
    return results


def effective_redundancy(layer):
    """
    ``(r_out, r_in)`` of a quantized layer as floats.
    """
    return float(layer.frame_out.redundancy), float(layer.frame_in.redundancy)


def nominal_bits(layer):
    """
    ``bits * sqrt(r_out * r_in)``: ``bits * r`` when both sides share ``r``.
    """
    r_out, r_in = effective_redundancy(layer)
    return layer.bits * math.sqrt(r_out * r_in)
