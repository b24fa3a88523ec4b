import csv
import json
import subprocess
import sys

import pytest

from v2xfuse import cli
from v2xfuse import harness
from v2xfuse.checkpoint import load_checkpoint
from v2xfuse.coop_fusion import AsrPolicy
from v2xfuse.harness import REGISTRY, Config, estimate_fusion_flops, run_scenario
from v2xfuse.metrics import dataset_metrics, mean_average_precision

SMALL = {"grid": {"x_range": [-8.0, 8.0], "y_range": [-8.0, 8.0]},
         "nodes": {"vehicle": {"position": [-7.0, 0.0], "keep_out": 1.0},
                   "infra": {"position": [7.0, 7.0], "keep_out": 1.0}},
         "scenes": {"min_objects": 2, "max_objects": 3}}


def tree(path):
    """Relative path -> bytes, with the wall-clock timings dropped from manifests."""
    out = {}
    for p in sorted(path.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == "manifest.json":
                m = json.loads(data)
                m.pop("timings")
                m.pop("out")
                data = json.dumps(m, sort_keys=True).encode()
            out[str(p.relative_to(path))] = data
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert cli.main(["gen", "--config", str(cfg), "--out", str(root / "sc"), "--count", "4", "--seed", "7"]) == 0
    assert cli.main(["train", "--config", str(cfg), "--scenarios", str(root / "sc"), "--out", str(root / "m"),
                     "--epochs", "2"]) == 0
    return root, cfg


class TestGen:
    def test_deterministic(self, tmp_path):
        for d in ("a", "b"):
            assert cli.main(["gen", "--out", str(tmp_path / d), "--count", "10", "--seed", "7"]) == 0
        a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
        assert len(a) == 12 and a == b

    def test_seed_matters(self, tmp_path):
        for d, s in (("a", "7"), ("b", "8")):
            cli.main(["gen", "--out", str(tmp_path / d), "--count", "2", "--seed", s])
        assert (tmp_path / "a/scene_00000.json").read_bytes() != (tmp_path / "b/scene_00000.json").read_bytes()

    def test_empty(self, tmp_path):
        assert cli.main(["gen", "--out", str(tmp_path), "--count", "0"]) == 0
        index = json.loads((tmp_path / "index.json").read_text())
        assert index["scenarios"] == [] and index["total_objects"] == 0
        assert cli.load_scenarios(tmp_path) == []

    def test_index_recount(self, workspace):
        root, _ = workspace
        index = json.loads((root / "sc/index.json").read_text())
        scenarios = cli.load_scenarios(root / "sc")
        assert index["total_objects"] == sum(len(s.scene.objects) for s in scenarios)
        assert [e["objects"] for e in index["scenarios"]] == [len(s.scene.objects) for s in scenarios]

    def test_files_reload_as_generated(self, workspace):
        root, cfg = workspace
        index = json.loads((root / "sc/index.json").read_text())
        conf = Config.load(cfg)
        for entry, s in zip(index["scenarios"], cli.load_scenarios(root / "sc")):
            assert s.scene.objects == harness.make_scenario(conf, entry["seed"]).scene.objects


class TestTrain:
    def test_log_has_one_row_per_step(self, workspace):
        root, _ = workspace
        with open(root / "m/loss.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 4
        assert [int(r["step"]) for r in rows] == list(range(1, 9))
        assert {r["config"] for r in rows} <= set(harness.TOKENS)
        assert load_checkpoint(root / "m/model.ckpt").step == 8

    def test_resume_with_no_extra_epochs_is_a_fixpoint(self, workspace, tmp_path):
        root, cfg = workspace
        before = {p: (root / "m" / p).read_bytes() for p in ("model.ckpt", "loss.csv")}
        assert cli.main(["train", "--config", str(cfg), "--scenarios", str(root / "sc"), "--out", str(root / "m"),
                         "--epochs", "2", "--resume"]) == 0
        assert {p: (root / "m" / p).read_bytes() for p in before} == before

    def test_resume_matches_uninterrupted(self, workspace, tmp_path, monkeypatch):
        root, cfg = workspace
        out = tmp_path / "m"
        real = harness.train

        def interrupted(state, scenarios, epochs, cfg, observations=None, on_step=None, on_epoch=None):
            def stop(epoch, st):
                on_epoch(epoch, st)
                raise KeyboardInterrupt

            return real(state, scenarios, epochs, cfg, observations, on_step, stop)

        monkeypatch.setattr(cli, "train", interrupted)
        with pytest.raises(KeyboardInterrupt):
            cli.main(["train", "--config", str(cfg), "--scenarios", str(root / "sc"), "--out", str(out),
                      "--epochs", "2"])
        monkeypatch.setattr(cli, "train", real)
        assert load_checkpoint(out / "model.ckpt").step == 4
        assert cli.main(["train", "--config", str(cfg), "--scenarios", str(root / "sc"), "--out", str(out),
                         "--epochs", "2", "--resume"]) == 0
        for p in ("model.ckpt", "loss.csv"):
            assert (out / p).read_bytes() == (root / "m" / p).read_bytes(), p

    def test_deterministic(self, workspace, tmp_path):
        root, cfg = workspace
        assert cli.main(["train", "--config", str(cfg), "--scenarios", str(root / "sc"), "--out", str(tmp_path),
                         "--epochs", "2"]) == 0
        ref = tree(root / "m")
        got = tree(tmp_path)
        assert set(got) == set(ref)
        assert all(got[k] == ref[k] for k in got if k != "manifest.json")

    def test_default_epochs(self):
        assert Config().raw["train"]["epochs"] == 20
        args = cli.build_parser().parse_args(["train", "--scenarios", "s", "--out", "o"])
        assert args.epochs is None  # falls through to the config default

    def test_nan_exits_4(self, workspace, tmp_path, monkeypatch, caplog):
        root, cfg = workspace
        monkeypatch.setattr(harness, "scenario_loss", lambda *a, **k: (float("nan"), None))
        code = cli.main(["train", "--config", str(cfg), "--scenarios", str(root / "sc"), "--out", str(tmp_path)])
        assert code == 4
        assert "step 0" in caplog.text


@pytest.fixture(scope="module")
def result(workspace):
    root, cfg = workspace
    assert cli.main(["eval", "--config", str(cfg), "--model", str(root / "m/model.ckpt"),
                     "--scenarios", str(root / "sc"), "--out", str(root / "e1"), "--configs", "all"]) == 0
    return root / "e1"


class TestEval:
    def test_nine_rows(self, result):
        with open(result / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["config"] for r in rows] == list(harness.TOKENS)
        with open(result / "metrics_long.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 9 * len(cli.METRIC_COLUMNS)
        assert len(json.loads((result / "metrics.json").read_text())["rows"]) == 9

    def test_deterministic_across_jobs(self, workspace, result):
        root, cfg = workspace
        assert cli.main(["eval", "--config", str(cfg), "--model", str(root / "m/model.ckpt"),
                         "--scenarios", str(root / "sc"), "--out", str(root / "e2"), "--jobs", "3"]) == 0
        a, b = tree(result), tree(root / "e2")
        for name in ("metrics.csv", "metrics.json", "metrics_long.csv"):
            assert a[name] == b[name]

    def test_matches_direct_library_calls(self, workspace, result):
        root, cfg = workspace
        conf = Config.load(cfg)
        model = load_checkpoint(root / "m/model.ckpt")
        scenarios = cli.load_scenarios(root / "sc")
        rows = json.loads((result / "metrics.json").read_text())["rows"]
        for row, c in zip(rows, REGISTRY):
            frames = [(run_scenario(s, c, model, conf.policy)[0], list(s.scene.objects)) for s in scenarios]
            m = dataset_metrics(frames, 0.5, 0.3)
            assert row["config"] == c.token
            assert (row["precision"], row["recall"], row["mean_iou_3d"], row["pos_rmse"], row["rot_rmse"]) == \
                   (m.precision, m.recall, m.mean_iou, m.pos_rmse, m.rot_rmse)
            assert row["map_3d"] == mean_average_precision(frames, 0.5)

    def test_iou_threshold_flag(self, workspace):
        root, cfg = workspace
        assert cli.main(["eval", "--config", str(cfg), "--model", str(root / "m/model.ckpt"), "--scenarios",
                         str(root / "sc"), "--out", str(root / "e3"), "--configs", "l+l", "--iou-threshold",
                         "0.1"]) == 0
        data = json.loads((root / "e3/metrics.json").read_text())
        assert data["iou_threshold"] == 0.1 and len(data["rows"]) == 1


class TestExitCodes:
    def test_unknown_config_token(self, workspace, capsys):
        root, _ = workspace
        code = cli.main(["eval", "--model", str(root / "m/model.ckpt"), "--scenarios", str(root / "sc"),
                         "--out", str(root / "ex"), "--configs", "lc+lc,zz"])
        assert code == 3

    def test_bad_config_file(self, tmp_path):
        (tmp_path / "c.json").write_text('{"grid": {"cell_size": 3.0}}')
        assert cli.main(["gen", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 3
        (tmp_path / "d.json").write_text("{")
        assert cli.main(["gen", "--config", str(tmp_path / "d.json"), "--out", str(tmp_path / "o")]) == 3

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert cli.main(["gen", "--out", str(blocker / "sub"), "--count", "1"]) == 2

    def test_missing_inputs(self, tmp_path):
        assert cli.main(["train", "--scenarios", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2
        assert cli.main(["eval", "--model", str(tmp_path / "none.ckpt"), "--scenarios", str(tmp_path),
                         "--out", str(tmp_path / "o")]) == 2

    def test_corrupt_model(self, workspace, tmp_path):
        root, _ = workspace
        (tmp_path / "bad.ckpt").write_bytes(b"HCFZ\x01")
        assert cli.main(["eval", "--model", str(tmp_path / "bad.ckpt"), "--scenarios", str(root / "sc"),
                         "--out", str(tmp_path / "o")]) == 2

    def test_usage_error(self):
        assert cli.main(["bogus"]) == 3


class TestFlops:
    def test_identity_policy(self, tmp_path):
        assert cli.main(["flops", "--policy", "1,1,1", "--grid", "64x64", "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "flops.json").read_text())
        assert all(r["reduction"] == 0.0 for r in report["rows"])
        assert report["heterogeneous_mean_reduction"] == 0.0

    def test_matches_direct_calls(self, tmp_path):
        assert cli.main(["flops", "--grid", "64x64", "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "flops.json").read_text())
        assert len(report["rows"]) == 9
        direct = [estimate_fusion_flops(c, AsrPolicy(4, 2, 1), 64, 64) for c in REGISTRY]
        for row, d in zip(report["rows"], direct):
            assert (row["config"], row["macs_with_asr"], row["macs_without_asr"], row["reduction"]) == \
                   (d.config, d.macs_with_asr, d.macs_without_asr, d.reduction)
        het = [d.reduction for d, c in zip(direct, REGISTRY) if c.heterogeneous]
        assert report["heterogeneous_mean_reduction"] == sum(het) / len(het)

    def test_bad_arguments(self):
        assert cli.main(["flops", "--policy", "4,2"]) == 3
        assert cli.main(["flops", "--grid", "30x32"]) == 3


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "v2xfuse", "flops", "--grid", "16x16"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert "heterogeneous mean reduction" in proc.stdout
