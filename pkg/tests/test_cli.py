import csv
import json

import pytest

from protoseg import cli

TINY_INI = """
[experiment]
variant = {variant}
seeds = 0, 1
output_dir = {out}

[dataset]
H = 16
W = 16
n_labeled = 4
n_unlabeled = 8
n_val = 4

[train]
epochs = 1
warmup_epochs = 1
batch_labeled = 2
batch_unlabeled = 4
K = 2
pixels_per_class = 50
eval_pixels_per_class = 50
"""


@pytest.fixture
def config(tmp_path):
    def make(variant="full", extra=""):
        p = tmp_path / f"{variant}.ini"
        p.write_text(TINY_INI.format(variant=variant, out=tmp_path / "runs") + extra)
        return p
    return make


class TestConfig:
    def test_round_trip_types(self, config):
        exp = cli.load_config(config(extra="tau = 0.9\nuse_proto = false\ngrad_clip = none\n"))
        assert exp.train.tau == 0.9 and exp.train.use_proto is False and exp.train.grad_clip is None
        assert exp.dataset.H == 16 and exp.seeds == (0, 1)

    @pytest.mark.parametrize("extra, field", [
        ("tau = 1.5\n", "tau"),
        ("tau = high\n", "train.tau"),
        ("bogus = 1\n", "train.bogus"),
    ])
    def test_field_level_errors(self, config, extra, field):
        with pytest.raises(cli.ConfigError, match=field):
            cli.load_config(config(extra=extra))

    def test_unknown_variant(self, config):
        with pytest.raises(cli.ConfigError, match="experiment.variant"):
            cli.load_config(config(variant="everything"))

    def test_invalid_config_exit_code(self, config, capsys):
        assert cli.main(["train", "--config", str(config(extra="lambda_u = -1\n"))]) != 0
        assert "lambda_u" in capsys.readouterr().err

    def test_variants_map_to_switches(self):
        assert set(cli.VARIANTS) == {"supervised_only", "linear_only", "proto_only", "no_proto_update", "full"}
        exp = cli.ExperimentConfig(variant="proto_only")
        assert exp.variant_config(0).use_linear is False


class TestTrain:
    def test_runs_writes_and_skips(self, config, tmp_path, capsys):
        cfg = config()
        out = tmp_path / "runs"
        assert cli.main(["train", "--config", str(cfg)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["schema"] == 1 and summary["seeds"] == [0, 1]
        assert set(summary["metrics"]["val_mIoU_linear"]) == {"mean", "std", "per_seed"}
        for s in (0, 1):
            assert (out / f"seed_{s}" / "final.pseg").exists()
            assert (out / f"seed_{s}" / "metrics.csv").exists()
        first = (out / "summary.json").read_bytes()
        stamp = (out / "seed_0" / "final.pseg").stat().st_mtime_ns

        # idempotent: finished seeds are not re-run
        assert cli.main(["train", "--config", str(cfg)]) == 0
        assert (out / "seed_0" / "final.pseg").stat().st_mtime_ns == stamp
        assert (out / "summary.json").read_bytes() == first

        # --force re-runs and reproduces the same bytes
        (out / "seed_0" / "stale.txt").write_text("x")
        assert cli.main(["train", "--config", str(cfg), "--force"]) == 0
        assert not (out / "seed_0" / "stale.txt").exists()
        assert (out / "summary.json").read_bytes() == first

    def test_single_seed_and_out(self, config, tmp_path):
        out = tmp_path / "elsewhere"
        assert cli.main(["train", "--config", str(config()), "--seed", "1", "--out", str(out)]) == 0
        assert json.loads((out / "summary.json").read_text())["seeds"] == [1]
        assert not (out / "seed_0").exists()

    def test_eval_matches_training_log(self, config, tmp_path, capsys):
        out = tmp_path / "runs"
        cli.main(["train", "--config", str(config()), "--seed", "0"])
        capsys.readouterr()
        assert cli.main(["eval", str(out / "seed_0" / "final.pseg")]) == 0
        report = json.loads(capsys.readouterr().out)
        with open(out / "seed_0" / "metrics.csv") as fh:
            last = list(csv.DictReader(fh))[-1]
        assert report["miou_linear"] == pytest.approx(float(last["val_mIoU_linear"]), abs=1e-9)
        assert report["miou_proto"] == pytest.approx(float(last["val_mIoU_proto"]), abs=1e-9)
        assert set(report["pseudo_labels"]) == {"precision", "recall", "coverage"}

    def test_eval_missing_file(self, tmp_path):
        assert cli.main(["eval", str(tmp_path / "nope.pseg")]) == 2

    def test_eval_corrupt_file(self, tmp_path):
        p = tmp_path / "bad.pseg"
        p.write_bytes(b"PSEG1" + b"\0" * 64)
        assert cli.main(["eval", str(p)]) not in (0, 2)


def test_ablate_tables(config, tmp_path):
    path = config()
    path.write_text(path.read_text().replace("epochs = 1\nwarmup", "epochs = 0\nwarmup"))
    exp = cli.load_config(path)
    tables = cli.ablate(exp, tmp_path / "abl", sweeps=("K", "tau"))
    assert [r["cell"] for r in tables["K"]] == ["K=1", "K=2", "K=4", "K=8"]
    assert len(tables["tau"]) == 6
    with open(tmp_path / "abl" / "ablation_K.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert {"val_mIoU_linear_seed0", "val_mIoU_linear_seed1"} <= set(rows[0])
    assert all(r["status"] == "ok" for r in rows)


def test_export_dataset(config, tmp_path):
    out = tmp_path / "ds"
    assert cli.main(["export-dataset", "--config", str(config()), "--out", str(out)]) == 0
    assert len(list(out.rglob("*.bin"))) == 16
