import csv
import io
import json
from contextlib import redirect_stdout

import numpy as np
import pytest

from sonar3d.cli import RunConfig, ConfigError, gen_dataset, main
from sonar3d.dataset import DatasetError, load_dataset
from sonar3d.mesh import TriangleMesh, bumpy_sphere, save_obj
from sonar3d.scene import SceneConfig


def tiny_config(**scene):
    cfg = RunConfig()
    cfg.scene = SceneConfig(**{"m_p": 1, "m_r": 2, **scene})
    return cfg


def _run(argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = main([str(a) for a in argv])
    return code, buf.getvalue()


def _rows(text):
    return list(csv.DictReader(io.StringIO(text.strip().split("\n\n")[0])))


@pytest.fixture(scope="module")
def tiny_truth():
    return bumpy_sphere(0.1, 3)


def test_pose_schedule_count():
    cfg = RunConfig()
    assert cfg.scene.m_p * cfg.scene.m_r == 16
    assert cfg.scene.roll_step == pytest.approx(np.pi / 8)


def test_dataset_round_trip(tmp_path, tiny_truth):
    root = gen_dataset(tmp_path / "ds", tiny_config(), tiny_truth)
    ds = load_dataset(root)
    manifest = json.loads((root / "manifest.json").read_text())
    assert len(ds.views) == 2 == manifest["n_views"]
    roles = {f["role"] for f in manifest["files"]}
    assert {"image", "labels", "meta", "poses", "truth"} <= roles
    v = ds.views[0]
    assert v.image.shape == ds.geometry.shape
    assert v.labels.dtype == np.uint8
    assert ds.truth().n_triangles == tiny_truth.n_triangles


@pytest.mark.parametrize("sigma", [0.0, 0.1])
def test_generation_is_byte_identical(tmp_path, tiny_truth, sigma):
    a = gen_dataset(tmp_path / "a", tiny_config(sigma=sigma, seed=7), tiny_truth)
    b = gen_dataset(tmp_path / "b", tiny_config(sigma=sigma, seed=7), tiny_truth)
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_checksum_mismatch_detected(tmp_path, tiny_truth):
    root = gen_dataset(tmp_path / "ds", tiny_config(), tiny_truth)
    img = root / "view_000.img"
    data = bytearray(img.read_bytes())
    data[0] ^= 0xFF
    img.write_bytes(bytes(data))
    with pytest.raises(DatasetError):
        load_dataset(root)
    load_dataset(root, verify=False)


def test_config_validation():
    d = RunConfig().to_dict()
    d["refine"]["d2"] = d["refine"]["d1"] / 2
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"nonsense": {}})
    assert RunConfig.from_dict(RunConfig().to_dict()).to_dict() == RunConfig().to_dict()


def test_cli_exit_codes(tmp_path):
    assert _run(["carve", tmp_path / "missing", "--out", tmp_path / "o"])[0] == 2
    assert _run(["gen", tmp_path / "x", "--d1", "0.05", "--d2", "0.01"])[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert _run(["gen", tmp_path / "y", "--config", bad])[0] == 2


def test_cli_pipeline_error_exit_code(tmp_path, tiny_truth):
    # object placed outside every beam: nothing to carve
    far = TriangleMesh(tiny_truth.vertices + [3.0, 3.0, 0.0], tiny_truth.triangles)
    t = tmp_path / "far.obj"
    save_obj(far, t)
    assert _run(["gen", tmp_path / "ds", "--m-p", 1, "--m-r", 2, "--truth", t, "--noise", 0,
                 "--no-multipath"])[0] == 0
    assert _run(["carve", tmp_path / "ds", "--out", tmp_path / "c"])[0] == 3


def test_cli_gen_carve_reconstruct_metrics(tmp_path, tiny_truth):
    t = tmp_path / "truth.obj"
    save_obj(tiny_truth, t)
    ds = tmp_path / "ds"
    code, out = _run(["gen", ds, "--m-p", 2, "--m-r", 4, "--truth", t])
    assert code == 0 and "8 views" in out

    code, out = _run(["carve", ds, "--out", tmp_path / "c", "--truth", t, "--triangles", 800])
    assert code == 0
    row = _rows(out)[0]
    assert 0 <= float(row["NVE"]) <= 1
    assert (tmp_path / "c" / "initial.obj").exists()

    code, out = _run(["reconstruct", ds, "--out", tmp_path / "r", "--truth", t, "--max-iter", 2,
                      "--init", tmp_path / "c" / "initial.obj", "--no-ghost-mask", "--dump-iters"])
    assert code == 0
    rows = _rows(out)
    assert {r["run"] for r in rows} == {"masked", "unmasked"}
    masked = [r for r in rows if r["run"] == "masked"]
    assert masked[0]["iteration"] == "0" and float(masked[0]["E_I"]) == 1.0
    assert all(r["NVE"] != "" for r in rows)
    assert sum(int(r["best"]) for r in masked) == 1
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert set(report["runs"]) == {"masked", "unmasked"}
    assert (tmp_path / "r" / "iterations.csv").exists()
    assert (tmp_path / "r" / "iter_000.obj").exists()

    code, out = _run(["metrics", tmp_path / "r" / "refined.obj", "--reference", t,
                      "--dataset", ds])
    assert code == 0
    summary, per_view = out.strip().split("\n\n")
    s = next(csv.DictReader(io.StringIO(summary)))
    assert 0 <= float(s["NVE"]) <= 1
    assert len(list(csv.DictReader(io.StringIO(per_view)))) == 8


def test_cli_max_iter_default_rows(tmp_path, tiny_truth):
    t = tmp_path / "truth.obj"
    save_obj(tiny_truth, t)
    ds = tmp_path / "ds"
    _run(["gen", ds, "--m-p", 1, "--m-r", 4, "--truth", t])
    code, out = _run(["reconstruct", ds, "--out", tmp_path / "r", "--triangles", 600,
                      "--resolution", 64])
    assert code == 0
    rows = _rows(out)
    assert len(rows) <= 7 and rows[0]["iteration"] == "0"


def test_cli_sweep_format(tmp_path, tiny_truth):
    t = tmp_path / "truth.obj"
    save_obj(tiny_truth, t)
    code, out = _run(["sweep-interface", "--out", tmp_path / "s", "--truth", t, "--levels", 0.1,
                      "--seeds", 2, "--iters", 1, "--m-p", 1, "--m-r", 4, "--triangles", 600,
                      "--resolution", 64])
    assert code == 0
    rows = _rows(out)
    assert [float(r["sigma"]) for r in rows] == [0.0, 0.1]
    assert all(int(r["n"]) == 2 for r in rows)
    assert float(rows[0]["nve_std"]) == 0.0
    assert float(rows[0]["delta_vs_flat"]) == 0.0
    assert (tmp_path / "s" / "sweep_runs.csv").exists()


def test_plots_are_written(tmp_path, tiny_truth):
    pytest.importorskip("matplotlib")
    t = tmp_path / "truth.obj"
    save_obj(tiny_truth, t)
    ds = tmp_path / "ds"
    assert _run(["gen", ds, "--m-p", 1, "--m-r", 2, "--truth", t, "--plots"])[0] == 0
    assert (ds / "view_000.png").stat().st_size > 0
