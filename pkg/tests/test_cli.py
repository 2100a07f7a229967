import numpy as np
import pytest

from felrec import cli
from felrec.cache import RepresentationCache
from felrec.config import ConfigError, RunConfig, read_config_file, resolve
from felrec.evaluator import score
from felrec.trainer import NonFiniteLossError, load_checkpoint

TINY = ["--dim", "8", "--num-layers", "1", "--num-heads", "2", "--ff-dim", "16", "--max-len", "8",
        "--epochs", "2", "--warmup-epochs", "1", "--batch-size", "64", "--queue-size", "128"]

FIXTURE = "".join(f"u{u}\ti{i}\t{t}\n" for u, i, t in [(1, 1, 5), (2, 1, 3), (1, 2, 5), (3, 3, 9), (2, 2, 1), (4, 1, 7), (1, 3, 8), (3, 4, 2), (5, 5, 10), (2, 4, 11)])


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "a.tsv", "--interactions", 2000, "--users", 120, "--items", 50, "--clusters", 3) == 0
    assert run("prepare", "--input", root / "a.tsv", "--out", root / "a") == 0
    return root


@pytest.fixture(scope="module")
def trained(prepared):
    assert run("train", "--data", prepared / "a", "--out", prepared / "run", *TINY) == 0
    return prepared / "run"


class TestPrepare:
    def test_byte_identical_reruns(self, tmp_path):
        (tmp_path / "f.tsv").write_text(FIXTURE, encoding="utf-8")
        outs = []
        for name in ("x", "y"):
            assert run("prepare", "--input", tmp_path / "f.tsv", "--out", tmp_path / name) == 0
            outs.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).iterdir())})
        assert outs[0] == outs[1]
        assert set(outs[0]) == {"train.tsv", "validation.tsv", "test.tsv", "vocab.tsv", "labels.tsv", "stats.json"}

    def test_fixture_contents(self, tmp_path):
        (tmp_path / "f.tsv").write_text(FIXTURE, encoding="utf-8")
        run("prepare", "--input", tmp_path / "f.tsv", "--out", tmp_path / "o")
        assert len((tmp_path / "o" / "train.tsv").read_text().splitlines()) == 8
        # Sorted by time: u2/i2 at t=1 comes first and gets dense ids 0.
        assert (tmp_path / "o" / "train.tsv").read_text().splitlines()[0] == "0\t0\t1"
        assert (tmp_path / "o" / "labels.tsv").read_text().split() == ["observed"]

    def test_missing_input(self, tmp_path):
        assert run("prepare", "--input", tmp_path / "nope.tsv", "--out", tmp_path / "o") == cli.EXIT_DATA

    def test_malformed_input(self, tmp_path, capsys):
        (tmp_path / "bad.tsv").write_text("a\tb\n", encoding="utf-8")
        assert run("prepare", "--input", tmp_path / "bad.tsv", "--out", tmp_path / "o") == cli.EXIT_DATA
        assert "bad.tsv:1" in capsys.readouterr().err

    def test_too_few_interactions(self, tmp_path):
        (tmp_path / "s.tsv").write_text(FIXTURE[: FIXTURE.index("u2\ti4")], encoding="utf-8")
        assert run("prepare", "--input", tmp_path / "s.tsv", "--out", tmp_path / "o") == cli.EXIT_DATA


class TestParams:
    def total(self, capsys, *flags):
        assert run("params", *flags) == 0
        line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("total")][0]
        return int(line.split()[-1].replace(",", ""))

    def test_defaults(self, capsys):
        assert self.total(capsys) == pytest.approx(480_000, rel=0.02)
        assert self.total(capsys, "--variant", "p") == pytest.approx(580_000, rel=0.02)

    def test_ablations(self, capsys):
        base = self.total(capsys)
        assert base - self.total(capsys, "--no-type") == 256
        assert base - self.total(capsys, "--share-mlp") == 33_280

    def test_config_file_and_override(self, capsys, tmp_path):
        (tmp_path / "c.txt").write_text("# small model\ndim = 32\nnum-heads = 2\n", encoding="utf-8")
        small = self.total(capsys, "--config", tmp_path / "c.txt")
        assert small < 100_000
        assert self.total(capsys, "--config", tmp_path / "c.txt", "--dim", 128) == self.total(capsys, "--num-heads", 2)


class TestUsageErrors:
    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            run("frobnicate")
        assert exc.value.code == cli.EXIT_USAGE

    def test_missing_required(self):
        with pytest.raises(SystemExit) as exc:
            run("eval", "--data", "x")
        assert exc.value.code == cli.EXIT_USAGE

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "c.txt").write_text("dimension = 3\n", encoding="utf-8")
        assert run("params", "--config", tmp_path / "c.txt") == cli.EXIT_USAGE

    def test_invalid_value(self):
        assert run("params", "--dim", 10, "--num-heads", 4) == cli.EXIT_USAGE

    def test_train_without_data(self, tmp_path):
        assert run("train", "--out", tmp_path / "r", *TINY) == cli.EXIT_USAGE


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = resolve(overrides={"dim": 16, "num_heads": 2, "share_mlp": True, "data": "d", "nn": True})
        cfg.write(tmp_path / "c.txt")
        assert resolve(tmp_path / "c.txt") == cfg

    def test_flags_override_file(self, tmp_path):
        (tmp_path / "c.txt").write_text("lr = 0.5\nseed = 3\n", encoding="utf-8")
        cfg = resolve(tmp_path / "c.txt", {"lr": 0.25, "seed": None})
        assert (cfg.train.lr, cfg.train.seed) == (0.25, 3)

    def test_seed_env_fallback(self, tmp_path):
        assert resolve(env={"FELREC_SEED": "42"}).train.seed == 42
        assert resolve(overrides={"seed": 7}, env={"FELREC_SEED": "42"}).train.seed == 7
        assert resolve(env={}).train.seed == 0

    def test_bad_lines(self, tmp_path):
        (tmp_path / "a").write_text("dim 3\n", encoding="utf-8")
        (tmp_path / "b").write_text("dim = three\n", encoding="utf-8")
        for name in ("a", "b"):
            with pytest.raises(ConfigError):
                read_config_file(tmp_path / name)

    def test_text_format(self):
        text = RunConfig(resolve().train).to_text()
        assert "variant = q\n" in text and "share_mlp = false\n" in text


class TestTrainAndEval:
    def test_outputs(self, trained):
        assert {p.name for p in trained.iterdir()} == {"config.txt", "checkpoint.felk", "curve.csv"}
        lines = (trained / "curve.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,val_rank" and len(lines) == 3

    def test_emitted_config_reproduces_run(self, prepared, trained):
        out = prepared / "rerun"
        assert run("train", "--config", trained / "config.txt", "--out", out) == 0
        assert (out / "checkpoint.felk").read_bytes() == (trained / "checkpoint.felk").read_bytes()

    def test_seed_from_environment(self, prepared, monkeypatch):
        monkeypatch.setenv("FELREC_SEED", "5")
        out = prepared / "seeded"
        assert run("train", "--data", prepared / "a", "--out", out, *TINY) == 0
        assert "seed = 5\n" in (out / "config.txt").read_text()
        assert load_checkpoint(out / "checkpoint.felk").config.seed == 5

    @pytest.mark.parametrize("mode", ["continue", "reset"])
    def test_eval_modes(self, prepared, trained, mode):
        out = prepared / f"eval-{mode}"
        assert run("eval", "--checkpoint", trained / "checkpoint.felk", "--data", prepared / "a", "--mode", mode, "--out", out, "--trace") == 0
        assert {p.name for p in out.iterdir()} == {"report.csv", "popularity.csv", "report.txt", "trace.csv"}
        rows = (out / "report.csv").read_text().splitlines()
        assert rows[-1].startswith("total,200,")
        assert len((out / "trace.csv").read_text().splitlines()) == 201

    def test_eval_deterministic(self, prepared, trained):
        for name in ("d1", "d2"):
            run("eval", "--checkpoint", trained / "checkpoint.felk", "--data", prepared / "a", "--out", prepared / name)
        assert (prepared / "d1" / "report.csv").read_bytes() == (prepared / "d2" / "report.csv").read_bytes()

    def test_nn_scoring(self, prepared, trained):
        plain, nn = prepared / "plain", prepared / "nn"
        run("eval", "--checkpoint", trained / "checkpoint.felk", "--data", prepared / "a", "--out", plain)
        assert run("eval", "--checkpoint", trained / "checkpoint.felk", "--data", prepared / "a", "--nn", "--nn-k", 3, "--out", nn) == 0
        assert (plain / "report.csv").read_bytes() != (nn / "report.csv").read_bytes()

    def test_zero_shot_other_dataset(self, prepared, trained):
        b = prepared / "b.tsv"
        run("synth", "--out", b, "--interactions", 1500, "--users", 90, "--items", 40, "--user-offset", 5000, "--item-offset", 5000, "--seed", 3)
        run("prepare", "--input", b, "--out", prepared / "b")
        out = prepared / "zs"
        assert run("eval", "--checkpoint", trained / "checkpoint.felk", "--data", prepared / "b", "--mode", "zero-shot", "--out", out) == 0
        assert (out / "report.csv").read_text().splitlines()[-1].startswith("total,150,")

    def test_missing_checkpoint(self, prepared, tmp_path):
        assert run("eval", "--checkpoint", tmp_path / "none.felk", "--data", prepared / "a", "--out", tmp_path / "o") == cli.EXIT_DATA

    def test_missing_prepared_split(self, trained, tmp_path):
        assert run("eval", "--checkpoint", trained / "checkpoint.felk", "--data", tmp_path, "--out", tmp_path / "o") == cli.EXIT_DATA

    def test_numeric_failure_exit_code(self, prepared, tmp_path, monkeypatch):
        def boom(self, train, validation):
            raise NonFiniteLossError(0, 3)

        monkeypatch.setattr(cli.Trainer, "fit", boom)
        assert run("train", "--data", prepared / "a", "--out", tmp_path / "r", *TINY) == cli.EXIT_NUMERIC


class TestExport:
    def test_cache_round_trip(self, trained, tmp_path):
        ckpt = load_checkpoint(trained / "checkpoint.felk")
        assert run("export", "--checkpoint", trained / "checkpoint.felk", "--what", "cache", "--out", tmp_path / "c.tsv") == 0
        original = ckpt.cache()
        lines = (tmp_path / "c.tsv").read_text().splitlines()
        assert len(lines) - 1 == original.size()
        back = RepresentationCache.from_tsv(tmp_path / "c.tsv")
        for kind in ("user", "item"):
            ids, vecs = original.matrix(kind)
            ids2, vecs2 = back.matrix(kind)
            np.testing.assert_array_equal(ids, ids2)
            np.testing.assert_array_equal(score(vecs[0], vecs), score(vecs2[0], vecs2))

    def test_curves(self, trained, tmp_path):
        assert run("export", "--checkpoint", trained / "checkpoint.felk", "--what", "curves", "--out", tmp_path / "k.csv") == 0
        assert (tmp_path / "k.csv").read_text() == (trained / "curve.csv").read_text()
