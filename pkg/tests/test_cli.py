"""End-to-end checks of the command-line pipeline on a tiny Darcy problem."""

import csv

import numpy as np
import pytest

from mffm import pipeline as pl
from mffm.cli import LOCK_NAME, main
from mffm.config import load_config
from mffm.container import load_container

TINY = """
[experiment]
benchmark = darcy
resolutions = 8, 16, 32
n_samples = 12
seed = {seed}
output_dir = {out}

[model]
hidden = 32, 32
blocks = 2, 2

[train]
lr = 1e-3
epochs_pretrain = 1
epochs_e2e = 1
batch_size = 4
dtype = float32
"""


def write_config(tmp_path, name="cfg.ini", seed=1, out=None):
    out = out or tmp_path / "out"
    p = tmp_path / name
    p.write_text(TINY.format(seed=seed, out=out))
    return str(p)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    for cmd in ("gen-data", "stats", "train-all", "finetune-e2e", "predict", "nfe-scan"):
        assert main([cmd, "--config", cfg]) == 0, cmd
    return tmp, cfg


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main([]) == 2
    assert main(["predict"]) == 2
    assert main(["predict", "--config", str(tmp_path / "missing.ini")]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\ncolour = red\n")
    assert main(["gen-data", "--config", str(bad)]) == 2
    assert "usage error" in capsys.readouterr().err


def test_runtime_errors_exit_1(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["predict", "--config", cfg]) == 1
    assert "gen-data" in capsys.readouterr().err
    assert main(["uq-eval", "--samples", "1", "--config", cfg]) == 1


def test_thread_variable_is_validated(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    monkeypatch.setenv("MFFM_THREADS", "many")
    assert main(["gen-data", "--config", cfg]) == 2


def test_lock_blocks_concurrent_use(tmp_path):
    cfg = write_config(tmp_path)
    (tmp_path / "out").mkdir()
    (tmp_path / "out" / LOCK_NAME).write_text("123")
    assert main(["gen-data", "--config", cfg]) == 1
    (tmp_path / "out" / LOCK_NAME).unlink()
    assert main(["gen-data", "--config", cfg]) == 0
    assert not (tmp_path / "out" / LOCK_NAME).exists()


def test_dataset_generation_is_deterministic(tmp_path):
    a = write_config(tmp_path, "a.ini", out=tmp_path / "a")
    b = write_config(tmp_path, "b.ini", out=tmp_path / "b")
    c = write_config(tmp_path, "c.ini", seed=2, out=tmp_path / "c")
    for cfg in (a, b, c):
        assert main(["gen-data", "--config", cfg]) == 0
    arr_a, meta_a = load_container(tmp_path / "a" / pl.DATA_FILE)
    arr_b, _ = load_container(tmp_path / "b" / pl.DATA_FILE)
    arr_c, _ = load_container(tmp_path / "c" / pl.DATA_FILE)
    assert all(np.array_equal(arr_a[k], arr_b[k]) for k in arr_a)
    assert not np.array_equal(arr_a["level_2"], arr_c["level_2"])
    assert sorted(np.bincount(arr_a["split"])) == [2, 2, 8]


def test_loaded_fields_are_unit_scale(tmp_path):
    cfg_path = write_config(tmp_path)
    assert main(["gen-data", "--config", cfg_path]) == 0
    data = pl.load_dataset(load_config(cfg_path))
    train_finest = data.part("train")[-1]
    assert np.sqrt(np.mean(train_finest ** 2)) == pytest.approx(1.0, rel=1e-12)
    raw, _ = load_container(tmp_path / "out" / pl.DATA_FILE)
    np.testing.assert_allclose(data.levels[0] * data.scale, raw["level_0"], rtol=1e-14)


def test_tampered_dataset_is_refused(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["gen-data", "--config", cfg]) == 0
    path = tmp_path / "out" / pl.DATA_FILE
    blob = bytearray(path.read_bytes())
    blob[-9] ^= 0xFF
    path.write_bytes(bytes(blob))
    assert main(["stats", "--config", cfg]) == 1


def test_pipeline_outputs(trained):
    tmp, cfg = trained
    out = tmp / "out"
    metrics = rows(out / pl.METRICS_FILE)
    assert [r["method"] for r in metrics] == ["bilinear", "mffm-cascade"]
    assert len({r["dataset_hash"] for r in metrics}) == 1
    arrays, _ = load_container(out / pl.PREDICTIONS_FILE)
    raw, _ = load_container(out / pl.DATA_FILE)
    np.testing.assert_allclose(arrays["truth"], raw["level_2"][raw["split"] == 2], rtol=1e-12)
    nfe = rows(out / pl.NFE_FILE)
    assert [int(r["nfe"]) for r in nfe] == [1, 2, 5, 10, 50]
    assert [int(r["total_nfe"]) for r in nfe] == [2, 4, 10, 20, 100]
    assert nfe[0]["nrmse"] == metrics[1]["nrmse"]
    for name in ("truth", "bilinear", "cascade", "abs_error"):
        assert (out / f"frame_{name}.pgm").read_bytes().startswith(b"P5\n32 32\n255\n")
    log = rows(out / "train_log_e2e.csv")
    assert [int(r["epoch"]) for r in log] == [0, 1]


def test_checkpoint_records_dataset_and_scale(trained):
    tmp, _ = trained
    model, meta = pl.load_checkpoint(tmp / "out" / pl.E2E_FILE)
    data, _ = load_container(tmp / "out" / pl.DATA_FILE)
    assert meta["dataset_hash"] == pl.dataset_hash(data)
    assert meta["field_scale"] > 0
    assert meta["selected"]["epoch"] in (0, 1)
    assert model.hierarchy.resolutions == (8, 16, 32)


def test_report_and_stale_dataset_refusal(trained, tmp_path):
    tmp, cfg = trained
    assert main(["report", "--config", cfg]) == 0
    report = rows(tmp / "out" / pl.REPORT_FILE)
    assert {r["section"] for r in report} == {"prediction", "nfe_scan"}
    # a regenerated dataset with another seed invalidates the checkpoints
    other = tmp_path / "other.ini"
    other.write_text(TINY.format(seed=9, out=tmp / "out"))
    assert main(["gen-data", "--config", str(other)]) == 0
    assert main(["predict", "--config", str(other)]) == 1
    assert main(["gen-data", "--config", cfg]) == 0
    assert main(["predict", "--config", cfg]) == 0


def test_report_refuses_mixed_datasets(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    pl.write_rows(out / pl.METRICS_FILE, [{"method": "bilinear", "nrmse": 0.1, "dataset_hash": "aa"}])
    pl.write_rows(out / pl.NFE_FILE, [{"nfe": 1, "total_nfe": 2, "nrmse": 0.1, "dataset_hash": "bb"}])
    assert main(["report", "--config", write_config(tmp_path)]) == 1


def test_ablation_matrix_has_six_rows(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["gen-data", "--config", cfg]) == 0
    assert main(["ablate", "--variant", "all", "--config", cfg]) == 0
    table = rows(tmp_path / "out" / "ablation.csv")
    assert [r["variant"] for r in table] == ["cascade", "noblur", "iid", "single", "field",
                                            "multires_single"]
    assert len({r["dataset_hash"] for r in table}) == 1
    by = {r["variant"]: r for r in table}
    assert by["field"]["source_statistics"] == "fields"
    budget = int(by["cascade"]["n_params"])
    assert abs(int(by["single"]["n_params"]) - budget) / budget < 0.15
    _, meta = pl.load_checkpoint(tmp_path / "out" / "ablation" / "iid" / "model.mffm")
    assert {s[0] for s in meta["sources"]} == {"iid_matched"}
