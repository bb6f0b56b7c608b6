"""
Analysis and synthesis with a :class:`~tffquant.tff.FusionFrame`.

Because the frame is Parseval, synthesis after analysis is the identity:
``synthesis(F, analysis(F, X)) == X`` up to floating point error.
"""

from dataclasses import dataclass

import numpy as np

from tffquant.errors import ConfigError, ShapeError
from tffquant.tff import FrameParams


@dataclass(frozen=True, eq=False)
class FFCoefficients:
    """
    Fusion frame coefficients: ``k*rho`` rows, one column per sample (or a
    single vector).

    :param numpy.ndarray data: Coefficient array.
    :param FrameParams frame_params: Frame the coefficients belong to.
    """

    data: np.ndarray
    frame_params: FrameParams

    def __post_init__(self):
        if self.data.shape[0] != self.frame_params.size:
            raise ShapeError(
                f"{self.data.shape[0]} coefficient rows for a frame of size "
                f"{self.frame_params.size}"
            )

    @property
    def shape(self):
        return self.data.shape


def _as_matrix(values, rows, what):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim not in (1, 2):
        raise ShapeError(f"{what} must be a vector or a matrix, got {values.ndim}-D")
    if values.shape[0] != rows:
        raise ShapeError(f"{what} has {values.shape[0]} rows, expected {rows}")
    return values


def analysis(frame, signal):
    """
    Frame coefficients ``P^T X`` of a signal (vector or ``d x n`` matrix).

    :param FusionFrame frame: The frame.
    :param numpy.ndarray signal: Input with ``d`` rows.
    :rtype: FFCoefficients
    """
    signal = _as_matrix(signal, frame.d, "signal")
    return FFCoefficients(frame.vectorized.T @ signal, frame.params)


def synthesis(frame, coefficients):
    """
    Reconstruction ``P C`` from frame coefficients.

    :param FusionFrame frame: The frame.
    :param coefficients: :class:`FFCoefficients` or an array with ``k*rho``
        rows.
    :rtype: numpy.ndarray
    """
    if isinstance(coefficients, FFCoefficients):
        if coefficients.frame_params != frame.params:
            raise ShapeError("coefficients belong to a different frame")
        coefficients = coefficients.data
    coefficients = _as_matrix(coefficients, frame.params.size, "coefficients")
    return frame.vectorized @ coefficients


def project_subspace(frame, index, signal):
    """
    Weighted projection ``P_i P_i^T x`` onto subspace ``index`` (1-based).

    :rtype: numpy.ndarray
    """
    if not 1 <= index <= frame.k:
        raise ConfigError(f"subspace index {index} outside 1..{frame.k}")
    signal = _as_matrix(signal, frame.d, "signal")
    basis = frame.bases[index - 1]
    return basis @ (basis.T @ signal)


def subspace_projections(frame, signal):
    """
    All weighted subspace projections of ``signal``, stacked along a new
    first axis of length ``k``; they sum to ``signal``.

    :rtype: numpy.ndarray
    """
    return np.stack([project_subspace(frame, i, signal) for i in range(1, frame.k + 1)])


def frame_operator(frame):
    """
    Frame operator ``P P^T``, the identity for a Parseval frame.

    :rtype: numpy.ndarray
    """
    return frame.vectorized @ frame.vectorized.T


def frame_operator_deviation(frame):
    """
    Largest entry of ``|P P^T - I|``.

    :rtype: float
    """
    return float(np.max(np.abs(frame_operator(frame) - np.eye(frame.d))))
