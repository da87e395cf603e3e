import csv

import numpy as np
import pytest

from statavg import records
from statavg.cli import main
from statavg.data import DataError, SynthSpec, synth_noniid_generate
from statavg.report import client_feature_table, feature_histograms, generate_report

CONFIG = """\
[run]
seed = 1
clients = 3

[data]
source = synth

[synth]
samples_per_client = 120
num_features = 3
num_classes = 3

[model]
hidden = 6

[federation]
strategies = StatAvg, FedBN
rounds = 4
local_epochs = 1
batch_size = 32
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("report")
    cfg = root / "run.ini"
    cfg.write_text(CONFIG)
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_curves_one_row_per_round(run_dir, tmp_path):
    written = generate_report(run_dir, tmp_path, figures=False)
    for s in ("StatAvg", "FedBN"):
        rows = read_csv(tmp_path / f"curve_{s}.csv")
        assert rows[0][:3] == ["round", "mean_test_accuracy", "mean_train_loss"]
        assert rows[0][3:] == ["client_1", "client_2", "client_3"]
        assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4]
    hist = list(records.read_records(run_dir / "history.jsonl"))
    first = next(h for h in hist if h["strategy"] == "StatAvg" and h["round"] == 1)
    assert float(read_csv(tmp_path / "curve_StatAvg.csv")[1][1]) == first["mean_test_accuracy"]
    assert not any(p.suffix == ".png" for p in written)


def test_histograms_share_edges(run_dir, tmp_path):
    generate_report(run_dir, tmp_path, features=["f1"], label="class_1", bins=12, figures=False)
    files = sorted(tmp_path.glob("hist_f1_class_1_raw_client*.csv"))
    assert len(files) == 3
    edges = [[(r[0], r[1]) for r in read_csv(f)[1:]] for f in files]
    assert len(edges[0]) == 12
    assert edges[0] == edges[1] == edges[2]


def test_feature_table_shape(run_dir, tmp_path):
    generate_report(run_dir, tmp_path, features=["f0", "f2"], figures=False)
    rows = read_csv(tmp_path / "client_feature_stats.csv")
    assert rows[0] == ["feature", "client_id", "mean", "variance"]
    # clients x {mean, variance} for each feature
    assert len(rows) == 1 + 2 * 3
    assert [r[1] for r in rows[1:4]] == ["1", "2", "3"]


def test_figures_written(run_dir, tmp_path):
    written = generate_report(run_dir, tmp_path, features=["f0"], bins=8)
    names = {p.name for p in written}
    assert "accuracy_curves.png" in names
    assert "confusion_StatAvg.png" in names and "confusion_FedBN.png" in names
    assert "hist_f0_all_raw.png" in names
    for p in written:
        assert p.stat().st_size > 0
    assert (tmp_path / "accuracy_curves.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_report_cli_default_out(run_dir, capsys):
    assert main(["report", str(run_dir), "--no-figures"]) == 0
    assert (run_dir / "report" / "curve_FedBN.csv").is_file()
    assert "curve_StatAvg.csv" in capsys.readouterr().out


def test_report_errors(run_dir, tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 3
    assert "history.jsonl" in capsys.readouterr().err
    assert main(["report", str(run_dir), "--out", str(tmp_path / "r"), "--features", "nope",
                 "--no-figures"]) == 3


def test_feature_histograms_direct():
    parts = synth_noniid_generate(SynthSpec(num_clients=2, samples_per_client=100, num_features=2,
                                            num_classes=2, seed=0))
    edges, counts = feature_histograms(parts, "f0", bins=5)
    assert len(edges) == 6
    assert sum(int(c.sum()) for c in counts.values()) == sum(p.train.num_samples for p in parts)
    with pytest.raises(DataError):
        feature_histograms(parts, "f0", label="zzz")
    table = client_feature_table(parts, ["f1"])
    got = {r["client_id"]: r["mean"] for r in table}
    for p in parts:
        assert got[p.client_id] == pytest.approx(float(np.mean(p.train.features[:, 1])), rel=1e-12)
