"""
Scoring quantized models against their full-precision reference, and the
sweeps built on top of that:

* :func:`clip_sweep`: outlier clipping threshold, in standard deviations.
* :func:`calibration_sweep`: number of calibration samples.
* :func:`component_ablation`: error feedback alone, then frames, clipping
  and redundancy added one at a time.

Every sweep quantizes with :func:`~tffquant.quantizer.quantize_model` and
scores held-out data with :func:`evaluate`.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from tffquant.errors import ConfigError, FormatError, ShapeError
from tffquant.frameops import analysis
from tffquant.packfmt import PackedModel, storage_report
from tffquant.quantizer import (
    QuantConfig,
    hidden_activation,
    proxy_loss_direct,
    quantize_model,
    transform_weights,
)
from tffquant.runtime import load_layer, model_forward, reference_forward

LOG = logging.getLogger(__name__)

REPORT_SCHEMA = "tffquant.eval/1"

CLIP_SIGMAS = (1.0, 1.5, 2.0, 2.5, 3.0)
CALIBRATION_SIZES = (16, 32, 64, 128, 256)


def evaluate(model, reference, data, activation_bits=None):
    """
    Compare a quantized model with its full-precision reference on
    ``data`` (``d_0 x n``).

    :param PackedModel model: Quantized layers.
    :param list reference: :class:`~tffquant.quantizer.LayerWeights`.
    :param numpy.ndarray data: Evaluation inputs.
    :rtype: dict
    """
    loaded = [load_layer(record) for record in model.layers]
    if len(loaded) != len(reference):
        raise ShapeError(
            f"{len(loaded)} quantized layers but {len(reference)} reference layers"
        )
    for layer, weights in zip(loaded, reference):
        if layer.theta_shape != weights.shape:
            raise ShapeError(
                f"layer {layer.name!r} has shape {layer.theta_shape}, reference "
                f"{weights.name!r} has {weights.shape}"
            )
    per_layer = []
    inputs = data
    for index, (layer, weights) in enumerate(zip(loaded, reference)):
        coefficients = analysis(layer.frame_in, inputs)
        transformed = transform_weights(weights.theta, layer.frame_out, layer.frame_in)
        per_layer.append(
            {
                "name": layer.name,
                "proxy_loss": proxy_loss_direct(
                    transformed, layer.weights, coefficients
                ),
                "theta_mse": float(np.mean((layer.reconstruct() - weights.theta) ** 2)),
            }
        )
        inputs = layer.forward(inputs, activation_bits=activation_bits)
        if index + 1 < len(loaded):
            inputs = hidden_activation(inputs)
    quantized = model_forward(loaded, data, activation_bits=activation_bits)
    expected = reference_forward(reference, data)
    storage = storage_report(model)
    return {
        "schema": REPORT_SCHEMA,
        "config": {
            "layers": len(loaded),
            "samples": int(data.shape[1]),
            "activation_bits": activation_bits,
            "bits": [layer.record.bits for layer in loaded],
            "frames": [
                {
                    "out": [layer.frame_out.k, layer.frame_out.rho, layer.frame_out.d],
                    "in": [layer.frame_in.k, layer.frame_in.rho, layer.frame_in.d],
                    "seeds": [layer.frame_out.params.seed, layer.frame_in.params.seed],
                }
                for layer in loaded
            ],
        },
        "layers": per_layer,
        "output_mse": float(np.mean((quantized - expected) ** 2)),
        "storage": {
            "total_bytes": storage.total_bytes,
            "fp32_equivalent_bytes": storage.fp32_equivalent_bytes,
            "compression_ratio": storage.compression_ratio,
            "layers": [
                {
                    "name": entry.name,
                    "bytes": entry.total_bytes,
                    "nominal_bits": entry.nominal_bits,
                    "exact_bits": entry.exact_bits,
                }
                for entry in storage.layers
            ],
        },
    }


def _is_number(value):
    return (
        isinstance(value, (int, float))
        and not isinstance(value, bool)
        and math.isfinite(value)
    )


def validate_report(report):
    """
    Check an evaluation report against the ``tffquant.eval/1`` layout.

    :raises FormatError: on the first problem found.
    :returns: the report.
    """
    if not isinstance(report, dict) or report.get("schema") != REPORT_SCHEMA:
        raise FormatError(f"report schema must be {REPORT_SCHEMA!r}")
    for key, kind in (("config", dict), ("layers", list), ("storage", dict)):
        if not isinstance(report.get(key), kind):
            raise FormatError(f"report field {key!r} must be a {kind.__name__}")
    if not _is_number(report.get("output_mse")) or report["output_mse"] < 0:
        raise FormatError("report output_mse must be a non-negative number")
    for entry in report["layers"]:
        if not isinstance(entry, dict) or not isinstance(entry.get("name"), str):
            raise FormatError(f"bad layer entry {entry!r}")
        for key in ("proxy_loss", "theta_mse"):
            if not _is_number(entry.get(key)) or entry[key] < 0:
                raise FormatError(f"layer {entry['name']!r} has bad {key}")
    for key in ("total_bytes", "fp32_equivalent_bytes", "compression_ratio"):
        if not _is_number(report["storage"].get(key)):
            raise FormatError(f"storage field {key!r} must be a number")
    return report


def _as_layers(layers):
    if hasattr(layers, "layers"):
        layers = layers.layers()
    return list(layers)


def _as_inputs(values, what):
    if hasattr(values, "first"):
        values = values.first(what)
    return np.asarray(values, dtype=np.float64)


def _score(layers, calibration, data, config):
    results = quantize_model(layers, calibration, config)
    model = PackedModel([result.layer for result in results])
    report = evaluate(model, layers, data)
    clipped = sum(result.clip_fraction * result.layer.codes.size for result in results)
    total = sum(result.layer.codes.size for result in results)
    return {
        "proxy_loss": sum(entry["proxy_loss"] for entry in report["layers"]),
        "output_mse": report["output_mse"],
        "clip_fraction": clipped / total if total else 0.0,
        "total_bytes": report["storage"]["total_bytes"],
    }


@dataclass
class ClipRow:
    """
    One clipping threshold. ``clip_sigmas`` is empty (None) for the
    unclipped baseline.
    """

    clip_sigmas: Optional[float]
    clip_fraction: float
    proxy_loss: float
    output_mse: float


def clip_sweep(
    layers, calibration, data, sigmas=CLIP_SIGMAS, config=None, unclipped=True
):
    """
    Quantize the same model at several clipping thresholds and score each
    on held-out data. The sweep runs at redundancy 1 unless ``config`` says
    otherwise.

    :param list layers: :class:`~tffquant.quantizer.LayerWeights`.
    :param calibration: Calibration inputs, array or container.
    :param data: Evaluation inputs, array or container.
    :param sigmas: Thresholds in standard deviations.
    :param QuantConfig config: Settings shared by every point.
    :param bool unclipped: Append a row without clipping.
    :rtype: list
    """
    if not sigmas and not unclipped:
        raise ConfigError("clip sweep needs at least one threshold")
    config = config or QuantConfig(redundancy=1)
    layers = _as_layers(layers)
    calibration = _as_inputs(calibration, "calibration")
    data = _as_inputs(data, "data")
    points = [float(s) for s in sigmas] + ([None] if unclipped else [])
    rows = []
    for threshold in points:
        point = dataclasses.replace(config, clip_sigmas=threshold)
        score = _score(layers, calibration, data, point)
        rows.append(
            ClipRow(
                threshold,
                score["clip_fraction"],
                score["proxy_loss"],
                score["output_mse"],
            )
        )
    best = min(rows, key=lambda row: row.output_mse)
    LOG.info("lowest output error at clip_sigmas=%s", best.clip_sigmas)
    return rows


@dataclass
class CalibrationRow:
    """One calibration set size."""

    samples: int
    proxy_loss: float
    output_mse: float


def calibration_sweep(layers, calibration, data, sizes=CALIBRATION_SIZES, config=None):
    """
    Quantize with the first ``n`` calibration samples for each ``n`` in
    ``sizes`` and score every model on the same held-out data.

    :rtype: list
    """
    config = config or QuantConfig(redundancy=1)
    layers = _as_layers(layers)
    calibration = _as_inputs(calibration, "calibration")
    data = _as_inputs(data, "data")
    available = calibration.shape[1]
    if not sizes:
        raise ConfigError("calibration sweep needs at least one size")
    rows = []
    for samples in sizes:
        if not 1 <= samples <= available:
            raise ConfigError(
                f"calibration size {samples} outside 1..{available} available samples"
            )
        score = _score(layers, calibration[:, :samples], data, config)
        rows.append(CalibrationRow(samples, score["proxy_loss"], score["output_mse"]))
    return rows


ABLATION_STAGES = (
    ("gptq", {"redundancy": 1, "clip_sigmas": None, "rotate": False}),
    ("tff", {"redundancy": 1, "clip_sigmas": None, "rotate": True}),
    ("tff+clip", {"redundancy": 1}),
    ("tff+clip+redundancy", {}),
)


@dataclass
class AblationRow:
    """One stage of the component ablation."""

    stage: str
    r: Fraction
    clip_sigmas: Optional[float]
    proxy_loss: float
    output_mse: float
    total_bytes: int


def component_ablation(layers, calibration, data, config=None):
    """
    Score error-feedback quantization in the weight basis (``gptq``), then
    with a random orthogonal frame at redundancy 1 (``tff``, the plain
    rotation mode), then with outlier clipping, then with the redundancy
    of ``config``.

    :rtype: list
    """
    config = config or QuantConfig()
    if config.clip_sigmas is None:
        raise ConfigError("component ablation needs a clipping threshold")
    layers = _as_layers(layers)
    calibration = _as_inputs(calibration, "calibration")
    data = _as_inputs(data, "data")
    rows = []
    for stage, overrides in ABLATION_STAGES:
        stage_config = dataclasses.replace(config, **{"rotate": True, **overrides})
        score = _score(layers, calibration, data, stage_config)
        rows.append(
            AblationRow(
                stage,
                stage_config.redundancy,
                stage_config.clip_sigmas,
                score["proxy_loss"],
                score["output_mse"],
                score["total_bytes"],
            )
        )
        LOG.info("%s: output mse %.6g", stage, score["output_mse"])
    return rows
