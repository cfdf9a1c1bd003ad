import csv
import shutil
import subprocess

import numpy as np
import pytest

from bevscan.cli import main
from bevscan.config import ConfigError, RunConfig, load_config, parse_config
from bevscan.metrics import MetricsReport
from bevscan.model import BevSegNet
from bevscan.synthscene import read_pgm
from bevscan.tensor import save_tensors

TINY = """# tiny run
grid_nx = 16
grid_nz = 16
steps = 2
accumulation = 1
train_size = 2
val_size = 2
vehicles_min = 2
vehicles_max = 4
log_every = 1
"""


def write_cfg(tmp_path, text=TINY, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


# config ----------------------------------------------------------------------------

def test_defaults_and_derived_objects():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.branches == ("forward", "forward_surround", "backward_surround")
    assert cfg.n_train == 2000 * 5
    mc = cfg.model_config()
    assert mc.bev_channels == 32 and mc.image_size == (64, 112) and mc.raster_channels == 0
    assert cfg.replace(modality="camera+lidar").model_config().raster_channels == 2


def test_parse_types_comments_and_booleans():
    cfg = parse_config("scan_fs = off  # ablate\n\nlr = 1e-3\nmodality = camera+radar\ncioe_pv = False\n")
    assert cfg.scan_fs is False and cfg.cioe_pv is False
    assert cfg.lr == 1e-3 and cfg.modality == "camera+radar"
    assert cfg.branches == ("forward", "backward_surround")


def test_round_trip_through_text():
    cfg = RunConfig(grid_nx=24, lr=3e-4, scan_bs=False, out_dir="x/y")
    assert parse_config(cfg.dumps()) == cfg


@pytest.mark.parametrize("text,needle", [
    ("steps = 3\nbogus = 1\n", "line 2: unknown key 'bogus'"),
    ("steps = 3\n\nthis line has no equals\n", "line 3: expected"),
    ("steps = 3\nsteps = 4\n", "line 2: duplicate key"),
    ("lr = fast\n", "line 1: bad value for lr"),
    ("scan_fs = maybe\n", "line 1: bad value for scan_fs"),
])
def test_malformed_lines_report_line_numbers(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


def test_semantic_validation():
    with pytest.raises(ConfigError):
        parse_config("grid_nx = 20\n")
    with pytest.raises(ConfigError):
        parse_config("modality = sonar\n")
    with pytest.raises(ConfigError):
        parse_config("vehicles_min = 5\nvehicles_max = 2\n")


def test_seed_environment_override(tmp_path):
    p = write_cfg(tmp_path, "seed = 3\n")
    assert load_config(p, env={}).seed == 3
    assert load_config(p, env={"BEVSCAN_SEED": "11"}).seed == 11
    with pytest.raises(ConfigError):
        load_config(p, env={"BEVSCAN_SEED": "eleven"})


# CLI ---------------------------------------------------------------------------------

def test_full_cli_cycle(tmp_path):
    cfg = write_cfg(tmp_path)
    gen, run, ev, ex = (tmp_path / d for d in ("gen", "run", "eval", "export"))
    assert main(["gen", "--config", str(cfg), "--out", str(gen), "-q"]) == 0
    rows = list(csv.DictReader(open(gen / "manifest.csv")))
    assert [r["split"] for r in rows] == ["train", "train", "val", "val"]
    assert (gen / "samples" / "val_0000" / "cam5.ppm").exists()
    assert (gen / "samples" / "val_0000" / "gt_seg.pgm").exists()

    assert main(["train", "--config", str(cfg), "--out", str(run), "-q"]) == 0
    assert (run / "final.ckpt").read_bytes()[:8] == b"BEVSCAN1"
    assert parse_config((run / "resolved_config.txt").read_text()) == load_config(cfg)
    log_rows = list(csv.DictReader(open(run / "train_log.csv")))
    assert [r["step"] for r in log_rows] == ["0", "1"]

    ckpt = str(run / "final.ckpt")
    assert main(["eval", "--config", str(cfg), "--checkpoint", ckpt, "--out", str(ev), "-q"]) == 0
    first = MetricsReport.read_csv(ev / "metrics.csv")
    assert set(first) == set(MetricsReport.keys()) | {"n_scenes"} and first["n_scenes"] == 2
    assert main(["eval", "--config", str(cfg), "--checkpoint", ckpt, "--out", str(ev / "again"), "-q"]) == 0
    assert (ev / "metrics.csv").read_bytes() == (ev / "again" / "metrics.csv").read_bytes()

    assert main(["export", "--config", str(cfg), "--checkpoint", ckpt, "--out", str(ex), "--sample", "1",
                 "-q"]) == 0
    d = ex / "val_0001"
    for name in ("pred_mask.pgm", "pred_prob.pgm", "gt_seg.pgm", "gt_seg_visible.pgm", "points.xyz", "cam0.ppm"):
        assert (d / name).exists()
    assert read_pgm(d / "pred_mask.pgm").shape == (16, 16)


def test_zero_logit_checkpoint_scores_zero(tmp_path):
    cfg_path = write_cfg(tmp_path)
    cfg = load_config(cfg_path)
    model = BevSegNet(cfg.model_config())
    for p in model.heads.seg.parameters():
        p.data[...] = 0.0
    save_tensors(tmp_path / "zero.ckpt", {f"model.{k}": v for k, v in model.state_dict().items()})
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(tmp_path / "zero.ckpt"),
                 "--out", str(tmp_path / "ev"), "-q"]) == 0
    m = MetricsReport.read_csv(tmp_path / "ev" / "metrics.csv")
    assert m["overall"] == 0.0 and m["overall_unfiltered"] == 0.0


def test_cli_errors_exit_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["train", "--config", str(tmp_path / "missing.cfg"), "-q"]) == 2
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o"), "-q"]) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTMAGIC" + b"\0" * 8)
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(bad), "--out", str(tmp_path / "o"), "-q"]) == 2
    assert "magic" in capsys.readouterr().err
    broken = write_cfg(tmp_path, "steps = 2\nsteps: 3\n", "broken.cfg")
    assert main(["gen", "--config", str(broken), "-q"]) == 2
    assert "line 2" in capsys.readouterr().err


def test_unknown_command_is_rejected():
    with pytest.raises(SystemExit):
        main(["fly", "--config", "x"])


def test_console_script_installed():
    exe = shutil.which("bevscan")
    assert exe is not None
    res = subprocess.run([exe, "--help"], capture_output=True, text=True, check=True)
    assert "gen" in res.stdout and "--checkpoint" in res.stdout
