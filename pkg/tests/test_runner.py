import csv
import io
import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from loglearn import cli
from loglearn import runner as R
from loglearn.models import Model, load_model
from loglearn.synthetic import make_formation
from loglearn.data import wells_to_frame

BASE = """
[data]
synthetic = {"n_wells": 12, "length": 120}
target = synthetic
target_synthetic = {"n_wells": 10, "length": 120, "seed": 1, "prefix": "T", "offset_shift": 0.25}
test_wells = 4

[sampling]
interval_length = 20
samples_per_epoch = 32
batch_size = 16

[model]
hidden_size = 6
embedding_dim = 3

[train]
method = ae
epochs = 2

[transfer]
method = l2sp
epochs = 1

[eval]
labels = ["class"]
algorithms = ["gmm", "kmeans"]
pairs = 16
"""


def write_config(path, extra="", base=BASE):
    """Base config with ``extra`` sections merged in (later keys win)."""
    raw = R.parse_config_text(base)
    for sec, values in R.parse_config_text(extra).items():
        raw.setdefault(sec, {}).update(values)
    path.write_text(json.dumps(raw))
    return path


def run(tmp_path, command, extra="", seed=0, name="out"):
    cfg = write_config(tmp_path / f"{name}.json", extra)
    code = cli.main([command, "--config", str(cfg), "--seed", str(seed), "--out", str(tmp_path / name)])
    return code, tmp_path / name


def report(out):
    return pd.read_csv(out / "report.csv", float_precision="round_trip")


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pre")
    code, out = run(tmp, "pretrain")
    assert code == 0
    return out


class TestConfig:
    def test_hash_ignores_whitespace_and_order(self, tmp_path):
        a = R.parse_config_text("[train]\nmethod = ae\nepochs = 2\n[model]\nhidden_size = 6\n")
        b = R.parse_config_text("[model]\nhidden_size=6\n\n[train]\n epochs =   2\nmethod = ae\n")
        ha = R.ExperimentConfig.from_dict(a).config_hash()
        assert ha == R.ExperimentConfig.from_dict(b).config_hash()
        a["train"]["epochs"] = 3
        assert ha != R.ExperimentConfig.from_dict(a).config_hash()

    def test_ini_and_json_agree(self, tmp_path):
        (tmp_path / "c.ini").write_text(BASE)
        write_config(tmp_path / "c.json")
        assert R.load_config(tmp_path / "c.ini").config_hash() == R.load_config(tmp_path / "c.json").config_hash()

    def test_defaults(self):
        cfg = R.ExperimentConfig()
        assert cfg.train_config().epochs == 35
        assert cfg.train_config(method="siamese").lr == 0.01
        assert cfg.transfer_train_config().epochs == 15
        assert cfg.sampling.interval_length == 100

    @pytest.mark.parametrize("text", [
        "[bogus]\nx = 1\n",
        "[train]\nnot_a_key = 1\n",
        "[train]\nmethod = telepathy\n",
        "[sampling]\npairing = close_well_linking\nclose_param = 50\n",
        "[eval]\nlabels = ['astrology']\n",
        "[sweep]\ntrain.nope = [1, 2]\n",
    ])
    def test_rejected(self, text):
        with pytest.raises(R.ConfigError):
            R.ExperimentConfig.from_dict(R.parse_config_text(text))

    def test_missing_referenced_file(self, tmp_path):
        (tmp_path / "c.ini").write_text("[data]\nsource = missing.csv\n")
        with pytest.raises(R.ConfigError, match="missing.csv"):
            R.load_config(tmp_path / "c.ini")

    @pytest.mark.parametrize("n,expected", [(40, 10), (20, 10), (19, 5), (8, 2), (2, 1)])
    def test_test_well_count(self, n, expected):
        assert R.n_test_wells(n) == expected

    def test_child_seeds_independent_of_order(self):
        seeds = [R.child_seed(7, i) for i in range(5)]
        assert len(set(seeds)) == 5
        assert [R.child_seed(7, i) for i in reversed(range(5))] == seeds[::-1]


class TestExitCodes:
    def test_config_error(self, tmp_path):
        (tmp_path / "bad.ini").write_text("[train]\nepochs = abc\n")
        assert cli.main(["pretrain", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path)]) == 2

    def test_missing_config(self, tmp_path):
        assert cli.main(["pretrain", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path)]) == 2

    def test_data_error(self, tmp_path):
        frame = wells_to_frame(make_formation(4, 50)).drop(columns=["DTC"])
        frame.to_csv(tmp_path / "wells.csv", index=False)
        code, _ = run(tmp_path, "pretrain", f"[data]\nsource = {tmp_path / 'wells.csv'}\n")
        assert code == 3

    def test_numerical_abort_writes_partial_report(self, tmp_path):
        code, out = run(tmp_path, "pretrain", "[train]\nlr = 1e300\nepochs = 4\n")
        assert code == 4
        assert "aborted" in (out / "summary.txt").read_text()
        assert not (out / "model.llck").exists()

    def test_console_script(self, tmp_path):
        (tmp_path / "bad.ini").write_text("[train]\nepochs = abc\n")
        proc = subprocess.run([sys.executable, "-m", "loglearn", "eval", "--config", str(tmp_path / "bad.ini")],
                              capture_output=True, text=True, cwd=tmp_path)
        assert proc.returncode == 2
        assert "config error" in proc.stderr


class TestPretrain:
    def test_outputs(self, pretrained):
        for name in ("report.csv", "history.csv", "summary.txt", "timing.txt", "config.json",
                     "model.llck", "model.spec", "model.stats"):
            assert (pretrained / name).exists(), name
        rows = report(pretrained)
        assert list(rows.columns) == list(R.REPORT_COLUMNS)
        assert {"ari", "ami", "v_measure"} <= set(rows.metric)
        assert (rows.split == "validation").all()

    def test_reproducible_bytes(self, pretrained, tmp_path):
        code, again = run(tmp_path, "pretrain")
        assert code == 0
        for name in ("report.csv", "history.csv", "summary.txt", "model.llck", "model.spec"):
            assert (again / name).read_bytes() == (pretrained / name).read_bytes(), name

    def test_seed_changes_results(self, pretrained, tmp_path):
        _, other = run(tmp_path, "pretrain", seed=1)
        assert (other / "model.llck").read_bytes() != (pretrained / "model.llck").read_bytes()

    def test_zero_epochs_is_initialization(self, tmp_path):
        code, out = run(tmp_path, "pretrain", "[train]\nepochs = 0\n", seed=3)
        assert code == 0
        m = load_model(out / "model.llck")
        np.testing.assert_array_equal(m.params.flat(), Model(m.spec, seed=3).params.flat())
        assert report(out).shape[0] > 0

    def test_env_out_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LOGLEARN_OUT", str(tmp_path / "env"))
        cfg = write_config(tmp_path / "c.json", "[train]\nepochs = 0\n")
        assert cli.main(["pretrain", "--config", str(cfg)]) == 0
        assert (tmp_path / "env" / "report.csv").exists()


class TestEvalAndExport:
    def test_eval_reproduces_pretrain_rows(self, pretrained, tmp_path):
        extra = f"[eval]\ncheckpoint = {pretrained / 'model.llck'}\n"
        code, out = run(tmp_path, "eval", extra)
        assert code == 0
        a = report(pretrained).query("stage == 'pretrain' and metric == 'ari'").set_index("algo").value
        b = report(out).query("stage == 'eval' and metric == 'ari'").set_index("algo").value
        pd.testing.assert_series_equal(a.sort_index(), b.sort_index())

    def test_export_columns_and_bytes(self, pretrained, tmp_path):
        extra = f"[export]\ncheckpoint = {pretrained / 'model.llck'}\nsplit = validation\n"
        _, a = run(tmp_path, "export", extra, name="a")
        _, b = run(tmp_path, "export", extra, name="b")
        text = (a / "embeddings.csv").read_text()
        assert text == (b / "embeddings.csv").read_text()
        rows = list(csv.reader(io.StringIO(text)))
        dim = load_model(pretrained / "model.llck").spec.embedding_dim
        assert rows[0][:2] == ["well_id", "start_depth"]
        assert sum(h.startswith("z") for h in rows[0]) == dim
        keys = [(r[0], float(r[1])) for r in rows[1:]]
        assert keys == sorted(keys) and len(keys) > 0

    def test_export_empty_selection(self, pretrained, tmp_path):
        extra = f"[export]\ncheckpoint = {pretrained / 'model.llck'}\nwells = ['nope']\n"
        code, out = run(tmp_path, "export", extra)
        assert code == 0
        assert (out / "embeddings.csv").read_text().count("\n") == 1

    def test_eval_without_checkpoint(self, tmp_path):
        code, _ = run(tmp_path, "eval")
        assert code == 2


class TestTransfer:
    def anchor_extra(self, pretrained, body):
        return f"[transfer]\nanchor = {pretrained / 'model.llck'}\n{body}"

    def test_reproducible_bytes(self, pretrained, tmp_path):
        extra = self.anchor_extra(pretrained, "method = delta_bss\nk = 2\n")
        _, a = run(tmp_path, "transfer", extra, name="a")
        _, b = run(tmp_path, "transfer", extra, name="b")
        for name in ("report.csv", "history.csv", "model.llck"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_inline_anchor(self, tmp_path):
        code, out = run(tmp_path, "transfer")
        assert code == 0
        assert (out / "source" / "model.llck").exists()
        assert {"pretrain", "transfer:l2sp"} <= set(report(out).stage)

    def test_scratch_zero_epochs_is_random_init(self, pretrained, tmp_path):
        _, out = run(tmp_path, "transfer", self.anchor_extra(pretrained, "method = scratch\nepochs = 0\n"), seed=2)
        m = load_model(out / "model.llck")
        np.testing.assert_array_equal(m.params.flat(), Model(m.spec, seed=2).params.flat())

    def test_frozen_fine_tune_equals_anchor(self, pretrained, tmp_path):
        extra = self.anchor_extra(pretrained, "method = fine_tune\nfreeze = lower_k:4\n")
        _, out = run(tmp_path, "transfer", extra)
        anchor = load_model(pretrained / "model.llck")
        tuned = load_model(out / "model.llck")
        np.testing.assert_array_equal(tuned.params.flat(), anchor.params.flat())
        cfg = R.load_config(tmp_path / "out.json")
        target = R.prepare(cfg, "target")
        direct = R.evaluate(anchor, target.val, cfg, 0, "anchor", train_wells=target.train)
        got = report(out).query("stage == 'transfer:fine_tune'")
        assert [r["value"] for r in direct] == pytest.approx(got.value.tolist(), abs=0)

    def test_wells_used_sweep(self, pretrained, tmp_path):
        extra = self.anchor_extra(pretrained, "") + "[sweep]\ncommand = transfer\ntransfer.wells_used = [2, 4, 6]\n"
        code, out = run(tmp_path, "sweep", extra)
        assert code == 0
        summary = pd.read_csv(out / "summary.csv")
        assert summary.shape[0] == 3
        assert summary["transfer.wells_used"].tolist() == [2, 4, 6]

    def test_too_many_wells_used(self, pretrained, tmp_path):
        code, _ = run(tmp_path, "transfer", self.anchor_extra(pretrained, "wells_used = 50\n"))
        assert code == 3


class TestReverse:
    def test_rows_present(self, pretrained, tmp_path):
        code, out = run(tmp_path, "reverse", f"[transfer]\nanchor = {pretrained / 'model.llck'}\n")
        assert code == 0
        stages = set(report(out).stage)
        assert {"source:pre", "source:post", "source:retention"} <= stages

    def test_scratch_independent_of_anchor(self, pretrained, tmp_path):
        other = tmp_path / "other"
        assert run(tmp_path, "pretrain", seed=5, name="other")[0] == 0
        rows = []
        for name, ckpt in (("a", pretrained), ("b", other)):
            _, out = run(tmp_path, "reverse", f"[transfer]\nanchor = {ckpt / 'model.llck'}\nmethod = scratch\n", name=name)
            rows.append(report(out).query("stage == 'source:post'").value.tolist())
        assert rows[0] == rows[1]

    def test_large_lambda_retains_source(self, pretrained, tmp_path):
        extra = f"[transfer]\nanchor = {pretrained / 'model.llck'}\nmethod = l2sp\nlam = 1e6\nepochs = 2\n"
        _, out = run(tmp_path, "reverse", extra)
        rows = report(out)
        pre = rows.query("stage == 'source:pre' and metric == 'ari'").value.to_numpy()
        post = rows.query("stage == 'source:post' and metric == 'ari'").value.to_numpy()
        np.testing.assert_allclose(post, pre, atol=0.1)


class TestSweep:
    SW = "[sampling]\npairing = close_well_linking\nclose_param = 30\n[train]\nmethod = siamese\nepochs = 1\n"

    def test_single_point(self, tmp_path):
        code, out = run(tmp_path, "sweep", "[train]\nepochs = 0\n[sweep]\ntrain.lr = [0.01]\n")
        assert code == 0
        assert len(list((out / "runs").iterdir())) == 1

    def test_grid_and_coincidence(self, tmp_path):
        extra = self.SW + "[sweep]\nsampling.close_param = [30, 1000]\ntrain.lr = [0.01, 0.001, 0.0001]\n"
        code, out = run(tmp_path, "sweep", extra)
        assert code == 0
        summary = pd.read_csv(out / "summary.csv")
        assert summary.shape[0] == 6 and len(list((out / "runs").iterdir())) == 6
        assert summary.set_index("sampling.close_param").coincides_well_linking.groupby(level=0).min().to_dict() \
            == {30: 0, 1000: 1}
        plot = pd.read_csv(out / "plot.csv")
        assert list(plot.columns) == ["axis", "x", "series", "y"]

    def test_parallel_matches_serial(self, tmp_path, monkeypatch):
        extra = "[train]\nepochs = 1\n[sweep]\ntrain.lr = [0.01, 0.001]\n"
        _, serial = run(tmp_path, "sweep", extra, name="serial")
        monkeypatch.setenv("LOGLEARN_THREADS", "2")
        _, parallel = run(tmp_path, "sweep", extra, name="parallel")
        assert (serial / "summary.csv").read_bytes() == (parallel / "summary.csv").read_bytes()
        assert (serial / "report.csv").read_bytes() == (parallel / "report.csv").read_bytes()
