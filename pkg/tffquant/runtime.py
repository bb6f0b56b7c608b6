"""
Inference with quantized layers.

Frames are regenerated from the stored parameters, so a model file only
carries codes, grids and a few integers per layer. A layer computes
``P_out D_hat P_in^T x``. The structured path splits each ``P`` into the
seeded rotation and the sparse Spectral Tetris part; the dense path
multiplies by the full ``P`` matrices.
"""

import logging

import numpy as np

from tffquant.container import TensorContainer
from tffquant.errors import ShapeError
from tffquant.packfmt import read_model
from tffquant.quantizer import hidden_activation, quantize_activations
from tffquant.tff import FusionFrame

LOG = logging.getLogger(__name__)


class LoadedLayer:
    """
    A quantized layer ready for inference.

    :param QuantizedLayer record: Layer as read from disk.
    """

    def __init__(self, record):
        self.record = record
        self.name = record.name
        self.frame_out = FusionFrame.from_params(record.frame_out)
        self.frame_in = FusionFrame.from_params(record.frame_in)
        self.weights = record.dequantized()

    @property
    def theta_shape(self):
        return self.record.theta_shape

    def analyze(self, inputs, structured=True):
        """``P_in^T X``"""
        frame = self.frame_in
        if not structured:
            return frame.vectorized.T @ inputs
        if frame.rotation is not None:
            inputs = frame.rotation.T @ inputs
        return frame.structure.T @ inputs

    def synthesize(self, coefficients, structured=True):
        """``P_out C``"""
        frame = self.frame_out
        if not structured:
            return frame.vectorized @ coefficients
        outputs = frame.structure @ coefficients
        if frame.rotation is not None:
            outputs = frame.rotation @ outputs
        return outputs

    def forward(self, inputs, structured=True, activation_bits=None):
        """
        Apply the layer to ``inputs`` (vector or ``d_in x n``).

        :param int activation_bits: Quantize the input frame coefficients to
            this many bits first (4, 6 or 8), or None for full precision.
        :rtype: numpy.ndarray
        """
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.shape[0] != self.frame_in.d:
            raise ShapeError(
                f"layer {self.name!r} expects {self.frame_in.d} inputs, "
                f"got {inputs.shape[0]}"
            )
        coefficients = self.analyze(inputs, structured)
        if activation_bits is not None:
            codes, delta = quantize_activations(coefficients, activation_bits)
            coefficients = codes * delta
        return self.synthesize(self.weights @ coefficients, structured)

    def reconstruct(self, structured=True):
        """
        ``Theta_hat = P_out D_hat P_in^T``
        """
        frame_out, frame_in = self.frame_out, self.frame_in
        if not structured:
            return frame_out.vectorized @ self.weights @ frame_in.vectorized.T
        theta = frame_out.structure @ (frame_in.structure @ self.weights.T).T
        if frame_out.rotation is not None:
            theta = frame_out.rotation @ theta
        if frame_in.rotation is not None:
            theta = theta @ frame_in.rotation.T
        return theta

    def __repr__(self):
        return f"LoadedLayer({self.name!r}, {self.frame_out!r}, {self.frame_in!r})"


def load_layer(record):
    """
    :rtype: LoadedLayer
    """
    return LoadedLayer(record)


def load_model(path):
    """
    Read a model file and prepare every layer for inference.

    :rtype: list
    """
    layers = [load_layer(record) for record in read_model(path).layers]
    LOG.info("loaded %d layers from %s", len(layers), path)
    return layers


def dequantize_weights(layer):
    """
    ``D_hat`` of a stored or loaded layer.
    """
    record = layer.record if isinstance(layer, LoadedLayer) else layer
    return record.dequantized()


def layer_forward(layer, inputs, structured=True, activation_bits=None):
    """
    Outputs ``P_out D_hat P_in^T A`` of one layer, without the ReLU.

    :param layer: :class:`LoadedLayer`, or a stored layer that is loaded
        on the fly.
    :param numpy.ndarray inputs: Activations, ``d_in x n``.
    :param bool structured: Use the sparse frame transforms.
    :param int activation_bits: Quantize the input coefficients first.
    :rtype: numpy.ndarray
    """
    if not isinstance(layer, LoadedLayer):
        layer = load_layer(layer)
    return layer.forward(inputs, structured, activation_bits)


def model_forward(layers, inputs, structured=True, activation_bits=None):
    """
    Run a chain of layers with ReLU in between.

    :rtype: numpy.ndarray
    """
    outputs = np.asarray(inputs, dtype=np.float64)
    for index, layer in enumerate(layers):
        outputs = layer.forward(outputs, structured, activation_bits)
        if index + 1 < len(layers):
            outputs = hidden_activation(outputs)
    return outputs


def reference_forward(weights, inputs):
    """
    Full-precision forward pass through :class:`LayerWeights`.
    """
    outputs = np.asarray(inputs, dtype=np.float64)
    for index, layer in enumerate(weights):
        outputs = layer.theta @ outputs
        if index + 1 < len(weights):
            outputs = hidden_activation(outputs)
    return outputs


def reconstruct_theta(layer, structured=True):
    """
    Explicit ``Theta_hat = P_out D_hat P_in^T`` for export or inspection.

    :rtype: numpy.ndarray
    """
    return layer.reconstruct(structured)


def weight_transform_op_count(layer):
    """
    Multiply-adds of the structured weight transform
    ``T_out D_hat T_in^T``, rotations excluded: every nonzero of ``T_in``
    touches one row of ``D_hat`` and every nonzero of ``T_out`` one column
    of the intermediate product.

    :rtype: int
    """
    frame_in, frame_out = layer.frame_in, layer.frame_out
    return (
        frame_in.structure.nnz * frame_out.params.size
        + frame_out.structure.nnz * frame_in.d
    )


def export_theta(layers, path=None):
    """
    Dense reconstructed weights of every layer, optionally written to an
    FQT1 container for a plain FP32 runtime.

    :rtype: TensorContainer
    """
    container = TensorContainer(
        (layer.name, reconstruct_theta(layer)) for layer in layers
    )
    if path is not None:
        container.write(path)
    return container
