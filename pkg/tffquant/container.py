"""
Plain FP32 tensor container ("FQT1") used for full-precision weights,
calibration inputs and evaluation data::

    magic "FQT1" | u32 manifest_length | manifest (UTF-8 JSON) | payload

The manifest is a JSON list of ``{"name", "dtype": "f32", "shape",
"byte_offset"}`` entries in file order; offsets are relative to the start
of the payload, which holds little-endian FP32 data.
"""

import json
import logging
import math
import struct
from collections import OrderedDict

import numpy as np

from tffquant.errors import ConfigError, FormatError, ShapeError
from tffquant.packfmt import atomic_write
from tffquant.quantizer import LayerWeights

LOG = logging.getLogger(__name__)

MAGIC = b"FQT1"
_U32 = struct.Struct("<I")


class TensorContainer:
    """
    Ordered collection of named FP32 tensors.

    :param tensors: Optional iterable of ``(name, array)`` pairs.
    """

    def __init__(self, tensors=None):
        self._tensors = OrderedDict()
        for name, array in tensors or ():
            self.add(name, array)

    def add(self, name, array):
        if name in self._tensors:
            raise ConfigError(f"duplicate tensor name {name!r}")
        self._tensors[name] = np.ascontiguousarray(array, dtype=np.float32)

    def __getitem__(self, name):
        return self._tensors[name]

    def __len__(self):
        return len(self._tensors)

    def __iter__(self):
        return iter(self._tensors)

    @property
    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def first(self, what="container"):
        """
        The first tensor as a float64 matrix; calibration and data files
        hold a single ``d_0 x n`` matrix with one sample per column.
        """
        if not self._tensors:
            raise ShapeError(f"{what} holds no tensors")
        array = next(iter(self._tensors.values())).astype(np.float64)
        if array.ndim != 2:
            raise ShapeError(f"{what} tensor must be 2-D, got shape {array.shape}")
        return array

    def layers(self):
        """
        Every 2-D tensor as a :class:`~tffquant.quantizer.LayerWeights`, in
        file order.
        """
        layers = [
            LayerWeights(name, array.astype(np.float64))
            for name, array in self._tensors.items()
            if array.ndim == 2
        ]
        if not layers:
            raise ShapeError("model container holds no 2-D weight matrices")
        return layers

    def to_bytes(self):
        manifest = []
        chunks = []
        offset = 0
        for name, array in self._tensors.items():
            data = array.astype("<f4").tobytes()
            manifest.append(
                {
                    "name": name,
                    "dtype": "f32",
                    "shape": list(array.shape),
                    "byte_offset": offset,
                }
            )
            chunks.append(data)
            offset += len(data)
        header = json.dumps(manifest).encode("utf-8")
        return MAGIC + _U32.pack(len(header)) + header + b"".join(chunks)

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != MAGIC:
            raise FormatError(f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}", 0)
        if len(data) < 8:
            raise FormatError("truncated manifest length", 4)
        (length,) = _U32.unpack_from(data, 4)
        start = 8 + length
        if start > len(data):
            raise FormatError("manifest runs past end of file", 8)
        try:
            manifest = json.loads(bytes(data[8:start]).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable manifest: {exc}", 8) from exc
        if not isinstance(manifest, list):
            raise FormatError("manifest must be a JSON list", 8)
        container = cls()
        payload = memoryview(data)[start:]
        end = 0
        for entry in manifest:
            try:
                name = entry["name"]
                shape = tuple(int(n) for n in entry["shape"])
                offset = int(entry["byte_offset"])
                dtype = entry.get("dtype", "f32")
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"bad manifest entry {entry!r}", 8) from exc
            if dtype != "f32":
                raise FormatError(f"tensor {name!r} has unsupported dtype {dtype!r}", 8)
            nbytes = 4 * math.prod(shape)
            if offset < end or offset + nbytes > len(payload):
                raise FormatError(
                    f"tensor {name!r} lies outside the payload", start + offset
                )
            array = np.frombuffer(payload[offset : offset + nbytes], dtype="<f4")
            container.add(name, array.reshape(shape))
            end = offset + nbytes
        return container

    def write(self, path):
        atomic_write(path, self.to_bytes())
        LOG.info("wrote %d tensors to %s", len(self), path)

    @classmethod
    def read(cls, path):
        with open(path, "rb") as stream:
            return cls.from_bytes(stream.read())


def parse_mlp_spec(spec):
    """
    Parse ``"mlp:16,32,8"`` into layer widths ``[16, 32, 8]``.

    :rtype: list
    """
    kind, _, widths = spec.partition(":")
    if kind != "mlp" or not widths:
        raise ConfigError(f"demo spec must look like 'mlp:16,32,8', got {spec!r}")
    try:
        dims = [int(w) for w in widths.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad layer widths in {spec!r}") from exc
    if len(dims) < 2 or min(dims) < 1:
        raise ConfigError(f"demo spec needs at least two positive widths: {spec!r}")
    return dims


def make_demo_mlp(dims, outlier_fraction=0.01, samples=256, seed=0):
    """
    Synthetic MLP with Gaussian weights plus sparse outliers at 10 sigma,
    together with calibration and held-out data (one sample per column).

    :param list dims: Layer widths ``[d_0, ..., d_L]``.
    :param float outlier_fraction: Share of weights replaced by outliers.
    :param int samples: Columns in the calibration and data matrices.
    :param int seed: PRNG seed.
    :rtype: tuple
    :returns: ``(weights, calibration, data)`` containers.
    """
    if not 0 <= outlier_fraction < 1:
        raise ConfigError(f"outlier fraction must be in [0, 1), got {outlier_fraction}")
    if samples < 1:
        raise ConfigError(f"samples must be positive, got {samples}")
    rng = np.random.Generator(np.random.PCG64(seed))
    weights = TensorContainer()
    for index, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        sigma = 1.0 / math.sqrt(d_in)
        theta = rng.normal(0.0, sigma, size=(d_out, d_in))
        mask = rng.random(theta.shape) < outlier_fraction
        theta[mask] = 10.0 * sigma * rng.choice([-1.0, 1.0], size=int(mask.sum()))
        weights.add(f"layer{index}", theta)
    calibration = TensorContainer([("inputs", rng.standard_normal((dims[0], samples)))])
    data = TensorContainer([("inputs", rng.standard_normal((dims[0], samples)))])
    return weights, calibration, data
