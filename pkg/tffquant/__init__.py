"""
tffquant package defines names that may be imported directly from tffquant
"""
from .__version__ import VERSION
from .errors import TffQuantError, ConfigError, ConstructionError, ShapeError
from .errors import FormatError, ChecksumError, NumericalError
from .tff import FrameParams, FusionFrame, build_fusion_frame, validate_params
from .tff import spectral_tetris, read_descriptor, write_descriptor
from .frameops import FFCoefficients, analysis, synthesis, frame_operator_deviation
from .quantizer import QuantConfig, QuantizedLayer, LayerWeights, RowGrid
from .quantizer import quantize_layer, quantize_model, gptq_quantize
from .packfmt import PackedModel, read_model, write_model, storage_report
from .runtime import LoadedLayer, load_model, model_forward, reconstruct_theta
from .container import TensorContainer, make_demo_mlp
from .evaluation import evaluate, clip_sweep, calibration_sweep, component_ablation
