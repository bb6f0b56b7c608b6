import math
import os
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from tffquant.container import TensorContainer
from tffquant.errors import ShapeError
from tffquant.packfmt import write_model
from tffquant.quantizer import (
    LayerWeights,
    QuantConfig,
    QuantizedLayer,
    quantize_model,
    transform_weights,
)
from tffquant.runtime import (
    LoadedLayer,
    dequantize_weights,
    export_theta,
    load_layer,
    layer_forward,
    load_model,
    model_forward,
    reconstruct_theta,
    reference_forward,
    weight_transform_op_count,
)
from tffquant.tff import FrameParams, build_fusion_frame


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def _record(frame_out, frame_in, codes=None, scale=1.0, zero=0.0, name="fc"):
    rows, cols = frame_out.size, frame_in.size
    if codes is None:
        codes = np.zeros((rows, cols), dtype=np.uint8)
    return QuantizedLayer(
        name=name,
        codes=np.asarray(codes, dtype=np.uint8),
        row_scale=np.full(rows, scale),
        row_zero=np.full(rows, zero),
        clip_mu=0.0,
        clip_sigma=1.0,
        frame_out=frame_out,
        frame_in=frame_in,
        bits=2,
    )


class TestLoadedLayer(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        rng = _rng(1)
        cls.weights = [
            LayerWeights("layer0", rng.standard_normal((64, 64)) / 8),
            LayerWeights("layer1", rng.standard_normal((16, 64)) / 8),
        ]
        cls.calibration = rng.standard_normal((64, 128))
        cls.inputs = rng.standard_normal((64, 10))
        config = QuantConfig(redundancy="1.1", seed=9)
        cls.results = quantize_model(cls.weights, cls.calibration, config)
        cls.layers = [load_layer(result.layer) for result in cls.results]

    def test_structured_matches_dense(self):
        layer = self.layers[0]
        structured = layer.forward(self.inputs)
        dense = layer.forward(self.inputs, structured=False)
        self.assertLessEqual(float(np.max(np.abs(structured - dense))), 1e-9)
        assert_allclose(
            layer.reconstruct(), layer.reconstruct(structured=False), atol=1e-9
        )

    def test_layer_forward_accepts_records(self):
        record = self.results[0].layer
        assert_array_equal(
            layer_forward(record, self.inputs), self.layers[0].forward(self.inputs)
        )

    def test_forward_matches_reconstruction(self):
        layer = self.layers[1]
        assert_allclose(
            layer.forward(self.inputs), layer.reconstruct() @ self.inputs, atol=1e-9
        )

    def test_file_round_trip_bit_identical(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.fqnt")
            write_model(path, [result.layer for result in self.results])
            loaded = load_model(path)
        for layer, result in zip(loaded, self.results):
            assert_array_equal(layer.weights, result.layer.dequantized())
            assert_array_equal(dequantize_weights(layer), result.layer.dequantized())
        assert_array_equal(
            model_forward(loaded, self.inputs), model_forward(self.layers, self.inputs)
        )

    def test_unquantized_weights_reconstruct_theta(self):
        layer = load_layer(self.results[0].layer)
        layer.weights = transform_weights(
            self.weights[0].theta, layer.frame_out, layer.frame_in
        )
        assert_allclose(reconstruct_theta(layer), self.weights[0].theta, atol=1e-9)

    def test_quantized_model_close_to_reference(self):
        expected = reference_forward(self.weights, self.inputs)
        error = np.mean((model_forward(self.layers, self.inputs) - expected) ** 2)
        self.assertLess(float(error), float(np.mean(expected**2)))

    def test_activation_bits(self):
        layer = self.layers[0]
        full = layer.forward(self.inputs)
        eight = layer.forward(self.inputs, activation_bits=8)
        relative = np.linalg.norm(eight - full) / np.linalg.norm(full)
        self.assertLess(float(relative), 0.05)

    def test_wrong_input_size(self):
        with self.assertRaises(ShapeError):
            self.layers[0].forward(np.ones(63))

    def test_export(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "theta.fqt")
            export_theta(self.layers, path)
            container = TensorContainer.read(path)
        self.assertEqual(container.names, ["layer0", "layer1"])
        assert_array_equal(
            container["layer1"], self.layers[1].reconstruct().astype(np.float32)
        )


class TestStructuredPath(unittest.TestCase):
    def test_matches_dense_across_frames(self):
        rng = _rng(31)
        shapes = [(64, 64, "1.1"), (30, 17, "1.5"), (11, 5, 2), (128, 96, "1.25")]
        for index, (d_out, d_in, redundancy) in enumerate(shapes):
            frame_out = build_fusion_frame(d_out, redundancy, seed=2 * index + 1)
            frame_in = build_fusion_frame(d_in, redundancy, seed=2 * index)
            shape = (frame_out.params.size, frame_in.params.size)
            codes = rng.integers(0, 4, size=shape)
            layer = load_layer(
                _record(frame_out.params, frame_in.params, codes, scale=0.1, zero=1.0)
            )
            inputs = rng.standard_normal((d_in, 7))
            structured = layer.forward(inputs)
            dense = layer.forward(inputs, structured=False)
            self.assertLessEqual(float(np.max(np.abs(structured - dense))), 1e-9)
            assert_allclose(
                layer.reconstruct(), layer.reconstruct(structured=False), atol=1e-9
            )


class TestSpecialLayers(unittest.TestCase):
    def test_zero_weights(self):
        params = FrameParams(3, 2, 4, seed=5)
        layer = LoadedLayer(_record(params, params, zero=2.0, codes=np.full((6, 6), 2)))
        assert_array_equal(layer.weights, np.zeros((6, 6)))
        assert_allclose(layer.reconstruct(), np.zeros((4, 4)), atol=0)

    def test_identity_coefficients_pass_through(self):
        params = FrameParams(3, 2, 4, rotated=False)
        layer = LoadedLayer(_record(params, params, codes=np.eye(6)))
        inputs = _rng(2).standard_normal((4, 5))
        assert_allclose(layer.forward(inputs), inputs, atol=1e-12)
        assert_allclose(layer.forward(inputs, structured=False), inputs, atol=1e-12)


class TestOpCount(unittest.TestCase):
    def test_scaling(self):
        normalized = []
        counts = []
        dims = (64, 128, 256)
        for d in dims:
            params = FrameParams(5, d // 4, d, seed=d)
            layer = load_layer(_record(params, params))
            count = weight_transform_op_count(layer)
            counts.append(count)
            r = float(params.redundancy)
            normalized.append(count / (d * d * (5 * r + math.log2(d))))
        self.assertLessEqual(normalized[-1], normalized[0] * 1.05)
        slope = np.polyfit(np.log(dims), np.log(counts), 1)[0]
        self.assertLessEqual(slope, 2.1)


if __name__ == "__main__":
    unittest.main()
