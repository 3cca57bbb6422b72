import json

import pytest
import yaml

from covslam.cli import main

SMALL = {"dataset": {"synth": {"width": 80, "height": 60, "fx": 50.0, "fy": 50.0, "n_frames": 6,
                               "orbit_degrees": 10.8}},
         "mapping": {"iters_per_frame": 2}, "eval_every": 2}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.yaml").write_text(yaml.safe_dump(SMALL))
    code = main(["run", "--config", str(root / "cfg.yaml"), "--format", "synth", "--mode", "det",
                 "--seed", "3", "--out", str(root / "out")])
    assert code == 0
    return root


def test_run_writes_metrics(run_dir):
    metrics = json.loads((run_dir / "out" / "metrics.json").read_text())
    assert metrics["n_frames"] == 6 and metrics["mapping_iterations"] == 12


def test_eval_recomputes(run_dir, capsys):
    out = run_dir / "eval.json"
    code = main(["eval", "--config", str(run_dir / "cfg.yaml"),
                 "--trajectory", str(run_dir / "out" / "trajectory.txt"),
                 "--checkpoint", str(run_dir / "out" / "map.npz"), "--out", str(out)])
    assert code == 0
    fresh = json.loads(out.read_text())
    saved = json.loads((run_dir / "out" / "metrics.json").read_text())
    assert fresh["ate_rmse_cm"] == pytest.approx(saved["ate_rmse_cm"])
    assert fresh["psnr_heldout"] == pytest.approx(saved["psnr_heldout"])


def test_render_pngs(run_dir):
    out = run_dir / "renders"
    code = main(["render", "--checkpoint", str(run_dir / "out" / "map.npz"),
                 "--poses", str(run_dir / "out" / "trajectory.txt"),
                 "--intrinsics", "25", "25", "19.75", "14.75", "40", "30", "--out", str(out), "--depth"])
    assert code == 0
    assert len(list(out.glob("render*.png"))) == 6
    assert len(list(out.glob("depth*.png"))) == 6


def test_bad_config_exit_code(tmp_path):
    (tmp_path / "bad.yaml").write_text("bogus: 1\n")
    assert main(["run", "--config", str(tmp_path / "bad.yaml")]) == 1


def test_missing_dataset_exit_code(tmp_path):
    assert main(["run", "--format", "tum", "--dataset", str(tmp_path / "none")]) == 1
