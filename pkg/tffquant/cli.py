"""
``tffq`` command line interface.

Results (CSV, JSON, listings) go to stdout; logs go to stderr through
rich. Exit codes: 0 success, 1 usage or configuration error, 2 data or
format error, 3 numerical failure.
"""

import io
import json
import logging
import os

import click
from rich.console import Console
from rich.logging import RichHandler

from tffquant.__version__ import VERSION
from tffquant.container import TensorContainer, make_demo_mlp, parse_mlp_spec
from tffquant.errors import (
    ConfigError,
    ConstructionError,
    FormatError,
    NumericalError,
    ShapeError,
)
from tffquant.evaluation import (
    CALIBRATION_SIZES,
    CLIP_SIGMAS,
    calibration_sweep,
    clip_sweep,
    component_ablation,
    evaluate,
    validate_report,
)
from tffquant.frameops import frame_operator_deviation
from tffquant.packfmt import (
    PACKED_BITS,
    atomic_write,
    inspect_lines,
    read_model,
    storage_report,
    write_model,
)
from tffquant.quantizer import QuantConfig, quantize_model
from tffquant.robustness import (
    QUANTIZERS,
    NoiseExperimentConfig,
    consistent_experiment,
    noise_mse_experiment,
    wiener_experiment,
    write_csv,
)
from tffquant.runtime import export_theta, load_layer
from tffquant.tff import as_fraction, build_fusion_frame, write_descriptor

LOG = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class RedundancyType(click.ParamType):
    """Redundancy as an exact fraction: ``1.1``, ``11/10`` or ``2``."""

    name = "redundancy"

    def convert(self, value, param, ctx):
        try:
            r = as_fraction(value)
        except ConfigError as exc:
            self.fail(str(exc), param, ctx)
        if r < 1:
            self.fail(f"redundancy must be at least 1, got {value}", param, ctx)
        return r


class RedundancyListType(click.ParamType):
    """Comma separated redundancies."""

    name = "redundancies"

    def convert(self, value, param, ctx):
        if not isinstance(value, str):
            return value
        single = RedundancyType()
        return tuple(
            single.convert(item.strip(), param, ctx) for item in value.split(",")
        )


class NumberListType(click.ParamType):
    """Comma separated numbers."""

    name = "numbers"

    def __init__(self, cast=float):
        self.cast = cast

    def convert(self, value, param, ctx):
        if not isinstance(value, str):
            return value
        try:
            return tuple(self.cast(item.strip()) for item in value.split(","))
        except ValueError:
            self.fail(f"{value!r} is not a comma separated list", param, ctx)


REDUNDANCY = RedundancyType()
REDUNDANCIES = RedundancyListType()
SIGMAS = NumberListType()
SIZES = NumberListType(int)


def configure_logging(verbosity):
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    logger = logging.getLogger("tffquant")
    logger.setLevel(level)
    if not any(isinstance(h, RichHandler) for h in logger.handlers):
        logger.addHandler(RichHandler(console=Console(stderr=True), show_path=False))


def _echo_csv(rows):
    buffer = io.StringIO()
    write_csv(rows, buffer)
    click.echo(buffer.getvalue(), nl=False)


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for INFO, -vv for DEBUG.")
@click.version_option(VERSION, prog_name="tffq")
def cli(verbose):
    """Fusion frame post-training quantization."""
    configure_logging(verbose)


@cli.command()
@click.option("--dim", type=int, required=True, help="Ambient dimension d.")
@click.option("--redundancy", type=REDUNDANCY, default="1", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="Write a descriptor.")
def frame(dim, redundancy, seed, out):
    """Build a tight fusion frame and report its parameters."""
    built = build_fusion_frame(dim, redundancy, seed)
    params = built.params
    deviation = frame_operator_deviation(built)
    LOG.info("Parseval deviation %.3g", deviation)
    r = params.redundancy
    click.echo(
        f"k={params.k} rho={params.rho} d={params.d} "
        f"redundancy={r.numerator}/{r.denominator} ({float(r):.4f}) "
        f"route={params.route} deviation={deviation:.3g}"
    )
    if out:
        atomic_write(out, write_descriptor(params).encode("utf-8"))


def _quant_config(
    bits, redundancy, clip_sigma, no_clip, block, seed, act_order, damping
):
    return QuantConfig(
        bits=bits,
        clip_sigmas=None if no_clip else clip_sigma,
        block_size=block,
        redundancy=redundancy,
        seed=seed,
        damping_fraction=damping,
        act_order=act_order,
    ).validate()


def _bench_inputs(weights, calib, data, spec, samples, seed):
    """
    Layers, calibration and evaluation inputs: the three files when given,
    otherwise a synthetic MLP.
    """
    paths = (weights, calib, data)
    if any(paths) and not all(paths):
        raise ConfigError("--weights, --calib and --data go together")
    if all(paths):
        return (
            TensorContainer.read(weights).layers(),
            TensorContainer.read(calib).first("calibration"),
            TensorContainer.read(data).first("data"),
        )
    demo_weights, calibration, held_out = make_demo_mlp(
        parse_mlp_spec(spec), samples=samples, seed=seed
    )
    return demo_weights.layers(), calibration.first(), held_out.first()


def bench_model_options(function):
    """Model inputs shared by the quantization sweeps."""
    options = (
        click.option("--weights", type=click.Path(dir_okay=False)),
        click.option("--calib", type=click.Path(dir_okay=False)),
        click.option("--data", type=click.Path(dir_okay=False)),
        click.option("--demo", "spec", default="mlp:64,128,64", show_default=True),
        click.option("--samples", type=int, default=256, show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option(
            "--bits",
            type=click.Choice([str(b) for b in PACKED_BITS]),
            default="2",
            show_default=True,
        ),
    )
    for option in reversed(options):
        function = option(function)
    return function


@cli.command()
@click.option("--weights", type=click.Path(dir_okay=False), required=True)
@click.option("--calib", type=click.Path(dir_okay=False), required=True)
@click.option(
    "--bits",
    type=click.Choice([str(b) for b in PACKED_BITS]),
    default="2",
    show_default=True,
)
@click.option("--redundancy", type=REDUNDANCY, default="1.1", show_default=True)
@click.option("--clip-sigma", type=float, default=2.0, show_default=True)
@click.option("--no-clip", is_flag=True, help="Disable outlier clipping.")
@click.option(
    "--plain-rotation",
    is_flag=True,
    help="Redundancy 1 without clipping: a random rotation of each side.",
)
@click.option("--block", type=int, default=128, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--act-order", is_flag=True, help="Quantize columns by saliency.")
@click.option("--damping", type=float, default=0.01, show_default=True)
@click.option("--compare-no-clip", is_flag=True, help="Also report the unclipped loss.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def quantize(
    weights,
    calib,
    bits,
    redundancy,
    clip_sigma,
    no_clip,
    plain_rotation,
    block,
    seed,
    act_order,
    damping,
    compare_no_clip,
    out,
):
    """Quantize a chain of weight matrices to an FQNT file."""
    config = _quant_config(
        int(bits), redundancy, clip_sigma, no_clip, block, seed, act_order, damping
    )
    if plain_rotation:
        config = config.plain_rotation()
    layers = TensorContainer.read(weights).layers()
    inputs = TensorContainer.read(calib).first("calibration")
    results = quantize_model(layers, inputs, config)
    model = write_model(out, [result.layer for result in results])
    for result in results:
        click.echo(
            f"{result.layer.name}: proxy_loss={result.proxy_loss:.6g} "
            f"clipped={100.0 * result.clip_fraction:.2f}%"
        )
    for line in storage_report(model).lines():
        click.echo(line)
    if compare_no_clip:
        unclipped = _quant_config(
            int(bits), redundancy, clip_sigma, True, block, seed, act_order, damping
        )
        baseline = quantize_model(layers, inputs, unclipped)
        total = sum(result.proxy_loss for result in results)
        click.echo(
            f"total proxy_loss: clip={total:.6g} "
            f"no-clip={sum(result.proxy_loss for result in baseline):.6g}"
        )


@cli.command(name="eval")
@click.option("--quantized", type=click.Path(dir_okay=False), required=True)
@click.option("--reference-weights", type=click.Path(dir_okay=False), required=True)
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--report", type=click.Path(dir_okay=False), required=True)
@click.option("--activation-bits", type=click.Choice(["4", "6", "8"]), default=None)
def evaluate_command(quantized, reference_weights, data, report, activation_bits):
    """Compare a quantized model with its full-precision reference."""
    result = evaluate(
        read_model(quantized),
        TensorContainer.read(reference_weights).layers(),
        TensorContainer.read(data).first("data"),
        int(activation_bits) if activation_bits else None,
    )
    validate_report(result)
    atomic_write(report, (json.dumps(result, indent=2) + "\n").encode("utf-8"))
    for entry in result["layers"]:
        click.echo(
            f"{entry['name']}: proxy_loss={entry['proxy_loss']:.6g} "
            f"theta_mse={entry['theta_mse']:.6g}"
        )
    click.echo(f"output_mse={result['output_mse']:.6g}")


@cli.command(name="export")
@click.option("--quantized", type=click.Path(dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def export_command(quantized, out):
    """Write the reconstructed dense weights to an FQT1 container."""
    layers = [load_layer(record) for record in read_model(quantized).layers]
    container = export_theta(layers, out)
    click.echo(f"wrote {len(container)} tensors to {out}")


@cli.command(name="bench-noise")
@click.option("--dim", type=int, default=4, show_default=True)
@click.option("--redundancies", type=REDUNDANCIES, default="1,1.5,2", show_default=True)
@click.option("--snr-db", type=float, default=10.0, show_default=True)
@click.option("--trials", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--quantizer",
    type=click.Choice(QUANTIZERS),
    default=QUANTIZERS[0],
    show_default=True,
)
def bench_noise(dim, redundancies, snr_db, trials, seed, quantizer):
    """Reconstruction error under coefficient noise, as CSV."""
    cfg = NoiseExperimentConfig(dim, redundancies, snr_db, trials, seed, quantizer)
    _echo_csv(noise_mse_experiment(cfg))


@cli.command(name="bench-wiener")
@click.option("--dim", type=int, default=8, show_default=True)
@click.option("--redundancies", type=REDUNDANCIES, default="1,2", show_default=True)
@click.option("--snr-db", type=float, default=0.0, show_default=True)
@click.option("--trials", type=int, default=5000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--signal-var", type=float, default=1.0, show_default=True)
def bench_wiener(dim, redundancies, snr_db, trials, seed, signal_var):
    """Plain synthesis against Wiener shrinkage, as CSV."""
    cfg = NoiseExperimentConfig(dim, redundancies, snr_db, trials, seed)
    _echo_csv(wiener_experiment(cfg, signal_var))


@cli.command(name="bench-consistent")
@click.option("--dim", type=int, default=8, show_default=True)
@click.option("--redundancies", type=REDUNDANCIES, default="1,2,4,8", show_default=True)
@click.option("--trials", type=int, default=200, show_default=True)
@click.option("--step", type=float, default=0.25, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def bench_consistent(dim, redundancies, trials, step, seed):
    """Linear against consistent reconstruction, as CSV."""
    _echo_csv(consistent_experiment(dim, redundancies, trials, step, seed))


@cli.command(name="bench-clip")
@bench_model_options
@click.option(
    "--sigmas",
    type=SIGMAS,
    default=",".join(f"{s:g}" for s in CLIP_SIGMAS),
    show_default=True,
)
@click.option("--redundancy", type=REDUNDANCY, default="1", show_default=True)
def bench_clip(weights, calib, data, spec, samples, seed, bits, sigmas, redundancy):
    """Output error against the clipping threshold, as CSV."""
    layers, calibration, held_out = _bench_inputs(
        weights, calib, data, spec, samples, seed
    )
    config = QuantConfig(bits=int(bits), redundancy=redundancy, seed=seed)
    _echo_csv(clip_sweep(layers, calibration, held_out, sigmas, config))


@cli.command(name="bench-calib")
@bench_model_options
@click.option(
    "--sizes",
    type=SIZES,
    default=",".join(str(n) for n in CALIBRATION_SIZES),
    show_default=True,
)
@click.option("--redundancy", type=REDUNDANCY, default="1", show_default=True)
def bench_calib(weights, calib, data, spec, samples, seed, bits, sizes, redundancy):
    """Output error against the number of calibration samples, as CSV."""
    layers, calibration, held_out = _bench_inputs(
        weights, calib, data, spec, samples, seed
    )
    config = QuantConfig(bits=int(bits), redundancy=redundancy, seed=seed)
    _echo_csv(calibration_sweep(layers, calibration, held_out, sizes, config))


@cli.command(name="bench-ablation")
@bench_model_options
@click.option("--redundancy", type=REDUNDANCY, default="1.1", show_default=True)
@click.option("--clip-sigma", type=float, default=2.0, show_default=True)
def bench_ablation(
    weights, calib, data, spec, samples, seed, bits, redundancy, clip_sigma
):
    """Quantizer components added one at a time, as CSV."""
    layers, calibration, held_out = _bench_inputs(
        weights, calib, data, spec, samples, seed
    )
    config = QuantConfig(
        bits=int(bits), clip_sigmas=clip_sigma, redundancy=redundancy, seed=seed
    )
    _echo_csv(component_ablation(layers, calibration, held_out, config))


@cli.command()
@click.option("--model", type=click.Path(dir_okay=False), required=True)
@click.pass_context
def inspect(ctx, model):
    """List the layers of an FQNT file and check their CRCs."""
    with open(model, "rb") as stream:
        lines, ok = inspect_lines(stream.read())
    for line in lines:
        click.echo(line)
    if not ok:
        ctx.exit(EXIT_DATA)


@cli.command()
@click.option("--demo", "spec", default="mlp:32,64,32", show_default=True)
@click.option("--outliers", type=float, default=0.01, show_default=True)
@click.option("--samples", type=int, default=256, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default=".")
def demo(spec, outliers, samples, seed, out_dir):
    """Write a synthetic MLP with calibration and evaluation data."""
    weights, calibration, data = make_demo_mlp(
        parse_mlp_spec(spec), outliers, samples, seed
    )
    os.makedirs(out_dir, exist_ok=True)
    for name, container in (
        ("weights.fqt", weights),
        ("calib.fqt", calibration),
        ("data.fqt", data),
    ):
        path = os.path.join(out_dir, name)
        container.write(path)
        click.echo(path)


def main(argv=None):
    """
    Console entry point; maps exceptions onto the documented exit codes.

    :rtype: int
    """
    try:
        code = cli.main(args=argv, prog_name="tffq", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    except (FormatError, ShapeError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except (NumericalError, ConstructionError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_NUMERICAL
    return code if isinstance(code, int) else EXIT_OK
