import io
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path
from unittest import mock

from analytics import imaging
from analytics.dataset import generate_synthetic_dataset, truth_name
from analytics.metrics import evaluate_dataset
from lesionseg import settings
from lesionseg.cli import build_parser, cli_main, resolve_config
from lesionseg.runconfig import RunConfig
from lesionseg.settings import SLOW_TESTS, build_logging
from segmentation.exceptions import ConfigError
from segmentation.maps import BinaryMask
from segmentation.trainer.optimizer import DESK_LEARNING_RATE, FULL_LEARNING_RATE


def run_cli(*argv) -> int:
    with redirect_stdout(io.StringIO()), redirect_stderr(io.StringIO()):
        return cli_main([str(a) for a in argv])


class TempDirTestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()


class RunConfigTest(TempDirTestCase):
    def test_save_load_round_trip(self):
        config = RunConfig(
            preset="desk",
            working_size=96,
            seed=4,
            learning_rate=2.5e-5,
            aux_loss=True,
            crf_sigma_beta=13.0,
            crf_window=0,
            input_dir="in dir",
        )
        path = config.save(self.tmp / "run.conf")
        self.assertEqual(RunConfig.load(path), config)

        again = RunConfig.load(RunConfig.load(path).save(self.tmp / "again.conf"))
        self.assertEqual(again, config)
        self.assertEqual(
            (self.tmp / "run.conf").read_text(), (self.tmp / "again.conf").read_text()
        )

    def test_comments_and_defaults(self):
        path = self.tmp / "partial.conf"
        path.write_text("# only a few keys\n\nseed = 9\nlearning_rate =\ndecay_biases = false\n")
        config = RunConfig.load(path)
        self.assertEqual(config.seed, 9)
        self.assertIsNone(config.learning_rate)
        self.assertFalse(config.decay_biases)
        self.assertEqual(config.working_size, 224)

    def test_unknown_key_is_rejected(self):
        path = self.tmp / "bad.conf"
        path.write_text("seed = 1\nlearning_rat = 0.1\n")
        with self.assertRaises(ConfigError) as ctx:
            RunConfig.load(path)
        self.assertIn("learning_rat", ctx.exception.issues[0])

    def test_bad_values_are_collected(self):
        path = self.tmp / "bad.conf"
        path.write_text("seed = three\naux_loss = maybe\nworking_size = 100\n")
        with self.assertRaises(ConfigError) as ctx:
            RunConfig.load(path)
        self.assertEqual(len(ctx.exception.issues), 2)
        with self.assertRaises(ConfigError):
            RunConfig(working_size=100)

    def test_flag_overrides_win(self):
        path = RunConfig(seed=1, iterations=7).save(self.tmp / "run.conf")
        config = RunConfig.load(path, seed=5, iterations=None)
        self.assertEqual((config.seed, config.iterations), (5, 7))
        self.assertEqual(config.with_overrides(se_radius=2).se_radius, 2)
        with self.assertRaises(ConfigError):
            config.with_overrides(radius=2)

    def test_derived_stage_configs(self):
        self.assertEqual(RunConfig().sgd_config().learning_rate, DESK_LEARNING_RATE)
        self.assertEqual(RunConfig(preset="full").sgd_config().learning_rate, FULL_LEARNING_RATE)
        self.assertEqual(RunConfig(learning_rate=0.01).sgd_config().learning_rate, 0.01)
        self.assertEqual(RunConfig(seed=3).sgd_config().seed, 3)

        self.assertEqual(RunConfig().crf_params().window_radius, 9)
        self.assertIsNone(RunConfig(crf_window=0).crf_params().window_radius)
        self.assertEqual(RunConfig(crf_sigma_beta=20.0).crf_params().sigma_beta, 20.0)

        net = RunConfig(working_size=64, aggregation="mean").network_config()
        self.assertEqual(net.input_size, (64, 64))
        self.assertEqual(net.aggregation, "mean")

    def test_logging_file_handler_is_optional(self):
        self.assertEqual(list(build_logging("INFO", "")["handlers"]), ["console"])
        with_file = build_logging("debug", str(self.tmp / "run.log"))
        self.assertIn("file", with_file["handlers"])
        self.assertEqual(with_file["loggers"][""]["level"], "DEBUG")

    def test_configure_logging_defaults_to_settings_logging(self):
        with mock.patch("logging.config.dictConfig") as dict_config:
            settings.configure_logging()
            dict_config.assert_called_once_with(settings.LOGGING)
            settings.configure_logging("debug")
            self.assertEqual(dict_config.call_args.args[0]["loggers"][""]["level"], "DEBUG")


class CliTest(TempDirTestCase):
    def setUp(self):
        super().setUp()
        self.data = self.tmp / "data"
        self.ckpt = self.tmp / "model.ckpt"

    def synth_and_train(self, n=4, iterations=5):
        self.assertEqual(run_cli("synth", "--n", n, "--size", 64, "--seed", 3, "-o", self.data), 0)
        code = run_cli(
            "train",
            "-i", self.data,
            "-o", self.tmp / "train",
            "--checkpoint", self.ckpt,
            "--iterations", iterations,
            "--working-size", 64,
            "--seed", 3,
            "--loss-chart", self.tmp / "loss.html",
        )
        self.assertEqual(code, 0)

    def pipeline(self, out, *extra):
        return run_cli(
            "pipeline",
            "-i", self.data,
            "-o", out,
            "--checkpoint", self.ckpt,
            "--working-size", 64,
            "--crf-window", 3,
            "--crf-iters", 3,
            "--seed", 3,
            *extra,
        )

    def test_end_to_end_smoke(self):
        self.synth_and_train()
        self.assertTrue(self.ckpt.is_file())
        self.assertEqual(len((self.tmp / "train" / "train_loss.tsv").read_text().splitlines()), 5)
        self.assertTrue((self.tmp / "loss.html").is_file())
        self.assertTrue((self.tmp / "train" / "run.conf").is_file())

        out = self.tmp / "pred"
        self.assertEqual(self.pipeline(out, "--overlay", "--workers", 2), 0)
        for i in range(4):
            mask = imaging.load_mask(out / truth_name(f"synth_{i:04d}"))
            self.assertEqual(mask.shape, (64, 64))
            self.assertLessEqual(len(mask.components), 1)
            self.assertTrue((out / f"synth_{i:04d}_overlay.png").is_file())

        csv = self.tmp / "report.csv"
        code = run_cli("eval", "--pred", out, "--truth", self.data, "--csv", csv, "--chart", self.tmp / "j.html")
        self.assertEqual(code, 0)
        lines = csv.read_text().splitlines()
        self.assertEqual(lines[0], "stem,jaccard,dice")
        self.assertEqual(lines[-1], "count,4,")

    def test_pipeline_is_deterministic(self):
        self.synth_and_train()
        self.assertEqual(self.pipeline(self.tmp / "a", "--eval"), 0)
        self.assertEqual(self.pipeline(self.tmp / "b", "--eval", "--workers", 3), 0)
        names = sorted(p.name for p in (self.tmp / "a").iterdir())
        self.assertIn("metrics.csv", names)
        for name in names:
            self.assertEqual(
                (self.tmp / "a" / name).read_bytes(), (self.tmp / "b" / name).read_bytes(), name
            )

    def test_separate_stages_chain(self):
        self.synth_and_train(n=2)
        probs, refined, masks = self.tmp / "probs", self.tmp / "refined", self.tmp / "masks"
        common = ["--working-size", 32, "--seed", 3]
        self.assertEqual(
            run_cli("infer", "-i", self.data, "-o", probs, "--checkpoint", self.ckpt, *common), 0
        )
        prob = imaging.load_probability_map(probs / "synth_0000_prob.png")
        self.assertEqual(prob.shape, (64, 64))

        self.assertEqual(
            run_cli(
                "refine", "-i", self.data, "--probs", probs, "-o", refined,
                "--crf-window", 0, "--crf-omega1", 2, "--crf-sigma-beta", 20, *common,
            ),
            0,
        )
        self.assertEqual(run_cli("postprocess", "--probs", refined, "-o", masks, *common), 0)
        for stem in ("synth_0000", "synth_0001"):
            self.assertEqual(imaging.load_mask(masks / truth_name(stem)).shape, (64, 64))

    def test_working_size_image_keeps_its_size(self):
        self.synth_and_train(n=1, iterations=1)
        big = self.tmp / "big"
        generate_synthetic_dataset(1, 224, seed=1, out_dir=big)
        out = self.tmp / "pred"
        code = run_cli(
            "pipeline", "-i", big, "-o", out, "--checkpoint", self.ckpt, "--working-size", 224
        )
        self.assertEqual(code, 0)
        self.assertEqual(imaging.load_mask(out / truth_name("synth_0000")).shape, (224, 224))

    def test_truncated_image_is_skipped(self):
        self.synth_and_train(n=2)
        broken = self.data / "broken.png"
        broken.write_bytes((self.data / "synth_0000.png").read_bytes()[:60])
        out = self.tmp / "pred"
        with self.assertLogs("lesionseg.cli", level="WARNING") as logs:
            code = self.pipeline(out)
        self.assertEqual(code, 0)
        self.assertTrue(any("broken.png" in line for line in logs.output))
        self.assertTrue((out / truth_name("synth_0001")).is_file())
        self.assertFalse((out / truth_name("broken")).exists())

    def test_eval_with_mismatched_dirs_fails(self):
        pred = self.tmp / "pred"
        pred.mkdir()
        generate_synthetic_dataset(1, 32, seed=0, out_dir=self.data)
        imaging.save_mask(pred / truth_name("orphan"), BinaryMask.empty(32, 32))
        stderr = io.StringIO()
        with redirect_stderr(stderr), redirect_stdout(io.StringIO()):
            code = cli_main(["eval", "--pred", str(pred), "--truth", str(self.data)])
        self.assertEqual(code, 1)
        self.assertIn("orphan", stderr.getvalue())

    def test_crf_flags_reach_crf_params(self):
        args = build_parser().parse_args(
            [
                "refine",
                "--crf-omega1", "2",
                "--crf-omega2", "4.5",
                "--crf-sigma-alpha", "7",
                "--crf-sigma-beta", "20",
                "--crf-sigma-gamma", "1.5",
                "--crf-iters", "4",
            ]
        )
        params = resolve_config(args).crf_params()
        self.assertEqual(
            (params.omega1, params.omega2, params.sigma_alpha, params.sigma_beta, params.sigma_gamma),
            (2.0, 4.5, 7.0, 20.0, 1.5),
        )
        self.assertEqual(params.iterations, 4)

    def test_usage_errors(self):
        self.assertEqual(run_cli("segment"), 2)
        self.assertEqual(run_cli("eval", "--bogus"), 2)
        self.assertEqual(run_cli(), 2)

    def test_unknown_config_key_exits_nonzero(self):
        bad = self.tmp / "bad.conf"
        bad.write_text("colour = red\n")
        self.assertEqual(run_cli("synth", "--config", bad, "-o", self.data), 1)


@unittest.skipUnless(SLOW_TESTS, "set LESIONSEG_SLOW_TESTS=true to run")
class SyntheticQualityTest(TempDirTestCase):
    def test_held_out_jaccard(self):
        train_dir, test_dir = self.tmp / "train", self.tmp / "test"
        generate_synthetic_dataset(32, 64, seed=100, out_dir=train_dir)
        generate_synthetic_dataset(16, 64, seed=200, out_dir=test_dir)
        ckpt = self.tmp / "model.ckpt"

        code = run_cli(
            "train", "-i", train_dir, "-o", self.tmp / "run", "--checkpoint", ckpt,
            "--working-size", 64, "--iterations", 1000, "--seed", 0,
        )
        self.assertEqual(code, 0)
        out = self.tmp / "pred"
        code = run_cli(
            "pipeline", "-i", test_dir, "-o", out, "--checkpoint", ckpt, "--working-size", 64
        )
        self.assertEqual(code, 0)
        report = evaluate_dataset(out, test_dir)
        self.assertEqual(report.count, 16)
        self.assertGreaterEqual(report.mean_jaccard, 0.85)
