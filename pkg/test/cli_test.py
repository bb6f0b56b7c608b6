import json
import os
import tempfile
import unittest
from unittest import mock

from click.testing import CliRunner

from tffquant.cli import (
    EXIT_DATA,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_USAGE,
    cli,
    main,
    validate_report,
)
from tffquant.errors import FormatError, NumericalError
from tffquant.packfmt import PackedModel
from tffquant.tff import read_descriptor


class TestFrameCommand(unittest.TestCase):
    def setUp(self):
        self.runner = CliRunner()

    def test_example(self):
        result = self.runner.invoke(cli, ["frame", "--dim", "4", "--redundancy", "1.5"])
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn(
            "k=3 rho=2 d=4 redundancy=3/2 (1.5000) route=complex", result.output
        )
        deviation = float(result.output.strip().rsplit("deviation=", 1)[1])
        self.assertLessEqual(deviation, 1e-9)

    def test_trivial(self):
        for args, expected in (
            (["--dim", "8", "--redundancy", "1.0"], "k=1 rho=8 d=8"),
            (["--dim", "11", "--redundancy", "1.9"], "k=1 rho=11 d=11"),
        ):
            result = self.runner.invoke(cli, ["frame"] + args)
            self.assertEqual(result.exit_code, 0, result.output)
            self.assertIn(expected, result.output)
            self.assertIn("route=trivial", result.output)

    def test_descriptor(self):
        with self.runner.isolated_filesystem():
            result = self.runner.invoke(
                cli,
                [
                    "frame",
                    "--dim",
                    "8",
                    "--redundancy",
                    "2",
                    "--seed",
                    "4",
                    "--out",
                    "f.txt",
                ],
            )
            self.assertEqual(result.exit_code, 0, result.output)
            with open("f.txt", encoding="utf-8") as stream:
                params = read_descriptor(stream.read())
        self.assertEqual((params.k, params.rho, params.d, params.seed), (4, 4, 8, 4))

    def test_version(self):
        result = self.runner.invoke(cli, ["--version"])
        self.assertEqual(result.exit_code, 0)
        self.assertIn("tffq", result.output)


class TestPipeline(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = cls.tmp.name
        runner = CliRunner()
        result = runner.invoke(
            cli,
            [
                "demo",
                "--demo",
                "mlp:16,32,8",
                "--samples",
                "64",
                "--out-dir",
                cls.dir,
            ],
        )
        assert result.exit_code == 0, result.output

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.dir, name)

    def quantize(self, out, *extra):
        args = [
            "quantize",
            "--weights",
            self.path("weights.fqt"),
            "--calib",
            self.path("calib.fqt"),
            "--out",
            self.path(out),
        ]
        return CliRunner().invoke(cli, args + list(extra))

    def test_quantize_deterministic(self):
        first = self.quantize("a.fqnt", "--seed", "3")
        second = self.quantize("b.fqnt", "--seed", "3")
        self.assertEqual(first.exit_code, 0, first.output)
        self.assertEqual(second.exit_code, 0, second.output)
        with open(self.path("a.fqnt"), "rb") as a, open(self.path("b.fqnt"), "rb") as b:
            self.assertEqual(a.read(), b.read())
        self.assertIn("layer0: proxy_loss=", first.output)
        self.assertIn("total: ", first.output)

    def test_compare_no_clip(self):
        result = self.quantize("c.fqnt", "--compare-no-clip")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("total proxy_loss: clip=", result.output)
        self.assertIn("no-clip=", result.output)

    def test_plain_rotation(self):
        result = self.quantize("p.fqnt", "--plain-rotation", "--redundancy", "2")
        self.assertEqual(result.exit_code, 0, result.output)
        with open(self.path("p.fqnt"), "rb") as stream:
            model = PackedModel.from_bytes(stream.read())
        for layer in model.layers:
            self.assertEqual(layer.frame_in.redundancy, 1)
            self.assertEqual(layer.frame_out.redundancy, 1)
            self.assertTrue(layer.frame_in.rotated)
        self.assertEqual(result.output.count("clipped=0.00%"), 2)

    def test_inspect(self):
        self.quantize("d.fqnt")
        result = CliRunner().invoke(cli, ["inspect", "--model", self.path("d.fqnt")])
        self.assertEqual(result.exit_code, 0, result.output)
        lines = result.output.strip().splitlines()
        self.assertTrue(lines[0].startswith("FQNT v1 layers=2"))
        self.assertTrue(all(line.endswith("CRC OK") for line in lines[1:]))

    def test_inspect_damaged(self):
        self.quantize("e.fqnt")
        with open(self.path("e.fqnt"), "rb") as stream:
            data = bytearray(stream.read())
        data[-5] ^= 0x55
        with open(self.path("e.fqnt"), "wb") as stream:
            stream.write(bytes(data))
        result = CliRunner().invoke(cli, ["inspect", "--model", self.path("e.fqnt")])
        self.assertEqual(result.exit_code, EXIT_DATA)
        self.assertIn("layer1", result.output)
        self.assertIn("CRC FAIL", result.output)

    def test_eval_report(self):
        self.quantize("f.fqnt")
        result = CliRunner().invoke(
            cli,
            [
                "eval",
                "--quantized",
                self.path("f.fqnt"),
                "--reference-weights",
                self.path("weights.fqt"),
                "--data",
                self.path("data.fqt"),
                "--report",
                self.path("report.json"),
            ],
        )
        self.assertEqual(result.exit_code, 0, result.output)
        with open(self.path("report.json"), encoding="utf-8") as stream:
            report = validate_report(json.load(stream))
        self.assertEqual(report["schema"], "tffquant.eval/1")
        self.assertEqual(
            [entry["name"] for entry in report["layers"]], ["layer0", "layer1"]
        )
        self.assertIn("output_mse=", result.output)

    def test_export(self):
        self.quantize("g.fqnt")
        result = CliRunner().invoke(
            cli,
            ["export", "--quantized", self.path("g.fqnt"), "--out", self.path("t.fqt")],
        )
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("wrote 2 tensors", result.output)


class TestBenchCommands(unittest.TestCase):
    def test_noise_deterministic(self):
        args = ["bench-noise", "--trials", "20", "--seed", "1"]
        first = CliRunner().invoke(cli, args)
        second = CliRunner().invoke(cli, args)
        self.assertEqual(first.exit_code, 0, first.output)
        self.assertEqual(first.output, second.output)
        lines = first.output.strip().splitlines()
        self.assertEqual(lines[0], "r,trials,mse,ratio,slope")
        self.assertEqual([line.split(",")[0] for line in lines[1:]], ["1", "1.5", "2"])

    def test_wiener(self):
        result = CliRunner().invoke(cli, ["bench-wiener", "--trials", "50"])
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertTrue(result.output.startswith("r,trials,plain_mse,wiener_mse"))

    def test_consistent(self):
        result = CliRunner().invoke(
            cli, ["bench-consistent", "--trials", "5", "--redundancies", "1,2"]
        )
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertEqual(len(result.output.strip().splitlines()), 3)


SMALL_MODEL = ["--demo", "mlp:16,32,8", "--samples", "64"]


class TestQuantizerBenchCommands(unittest.TestCase):
    def test_clip(self):
        args = ["bench-clip", "--sigmas", "1,2"] + SMALL_MODEL
        result = CliRunner().invoke(cli, args)
        self.assertEqual(result.exit_code, 0, result.output)
        lines = result.output.strip().splitlines()
        self.assertEqual(lines[0], "clip_sigmas,clip_fraction,proxy_loss,output_mse")
        self.assertEqual([line.split(",")[0] for line in lines[1:]], ["1", "2", ""])

    def test_calibration_sizes(self):
        args = ["bench-calib", "--sizes", "16,64"] + SMALL_MODEL
        result = CliRunner().invoke(cli, args)
        self.assertEqual(result.exit_code, 0, result.output)
        lines = result.output.strip().splitlines()
        self.assertEqual(lines[0], "samples,proxy_loss,output_mse")
        self.assertEqual([line.split(",")[0] for line in lines[1:]], ["16", "64"])

    def test_ablation(self):
        result = CliRunner().invoke(cli, ["bench-ablation"] + SMALL_MODEL)
        self.assertEqual(result.exit_code, 0, result.output)
        lines = result.output.strip().splitlines()
        self.assertEqual(
            lines[0], "stage,r,clip_sigmas,proxy_loss,output_mse,total_bytes"
        )
        self.assertEqual(
            [line.split(",")[:3] for line in lines[1:]],
            [
                ["gptq", "1", ""],
                ["tff", "1", ""],
                ["tff+clip", "1", "2"],
                ["tff+clip+redundancy", "1.1", "2"],
            ],
        )

    def test_usage_errors(self):
        with CliRunner().isolation():
            self.assertEqual(
                main(["bench-calib", "--sizes", "65"] + SMALL_MODEL), EXIT_USAGE
            )
            self.assertEqual(
                main(["bench-clip", "--weights", "w.fqt"] + SMALL_MODEL), EXIT_USAGE
            )
            self.assertEqual(
                main(["bench-clip", "--sigmas", "1,x"] + SMALL_MODEL), EXIT_USAGE
            )


class TestExitCodes(unittest.TestCase):
    def test_ok(self):
        with CliRunner().isolation():
            self.assertEqual(
                main(["frame", "--dim", "4", "--redundancy", "1.5"]), EXIT_OK
            )

    def test_usage(self):
        with CliRunner().isolation():
            self.assertEqual(
                main(["frame", "--dim", "4", "--redundancy", "0.5"]), EXIT_USAGE
            )
            self.assertEqual(main(["no-such-command"]), EXIT_USAGE)
            self.assertEqual(main(["frame", "--dim", "0"]), EXIT_USAGE)

    def test_missing_file(self):
        with CliRunner().isolation():
            self.assertEqual(
                main(["inspect", "--model", "/nonexistent/m.fqnt"]), EXIT_DATA
            )

    def test_corrupt_container(self):
        with tempfile.TemporaryDirectory() as tmp:
            weights = os.path.join(tmp, "w.fqt")
            with open(weights, "wb") as stream:
                stream.write(b"garbage")
            args = ["quantize", "--weights", weights, "--calib", weights]
            with CliRunner().isolation():
                code = main(args + ["--out", os.path.join(tmp, "m.fqnt")])
        self.assertEqual(code, EXIT_DATA)

    def test_numerical(self):
        with mock.patch(
            "tffquant.cli.build_fusion_frame", side_effect=NumericalError("boom")
        ):
            with CliRunner().isolation():
                self.assertEqual(main(["frame", "--dim", "4"]), EXIT_NUMERICAL)

    def test_bad_report(self):
        with self.assertRaises(FormatError):
            validate_report({"schema": "other"})


if __name__ == "__main__":
    unittest.main()
