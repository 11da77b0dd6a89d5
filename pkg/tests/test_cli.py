"""End-to-end runs of every subcommand on tiny 32x32 datasets."""
import csv
import io
import json
import math

import numpy as np
import pytest

from findnet import checkpoint, dataset
from findnet.cli import main, pgm16
from findnet.model import FindNetConfig, init_findnet
from findnet.numerics import fnt
from findnet.training import ScheduleConfig, lr_at

GEN = {"seed": 3, "geometry": {"size": 32, "n_angles": 48, "n_dets": 48},
       "phantom": {"n_ellipses": 4},
       "metal": {"count": 1, "radius_range": [1.0, 2.5]},
       "splits": {"train": 8, "val": 2, "test": 2}}

MODEL = {"stages": 2, "n_kernels": 4, "kernel_size": 5, "width": 4, "blocks": 1}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def read_csv(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    base = tmp_path_factory.mktemp("gen")
    cfg = write_json(base / "gen.json", GEN)
    assert main(["generate", "--config", cfg, "--out", str(base / "data")]) == 0
    return base / "data"


def train_config(tmp_path, **over):
    cfg = {"model": MODEL, "epochs": 5, "patience": 50,
           "optimizer": {"lr": 1e-3}, "schedule": {"warmup_steps": 6}}
    cfg.update(over)
    return write_json(tmp_path / "train.json", cfg)


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    base = tmp_path_factory.mktemp("train")
    cfg = train_config(base)
    assert main(["train", "--config", cfg, "--data", str(data), "--out", str(base / "run")]) == 0
    return base / "run"


# ------------------------------------------------------------------ generate

def test_generate_writes_all_samples(data):
    man = dataset.read_manifest(data)
    assert man["counts"] == {"train": 8, "val": 2, "test": 2}
    ids = [i for s in dataset.SPLITS for i in man["splits"][s]]
    assert len(set(ids)) == 12
    for sid in ids:
        d = data / "samples" / sid
        assert sorted(p.name for p in d.iterdir()) == \
            ["I.fnt", "X0.fnt", "Xgt.fnt", "Y.fnt", "meta.json"]
        assert fnt.load(d / "Y.fnt").shape == (32, 32)


def test_generate_is_byte_identical_on_rerun(data, tmp_path):
    cfg = write_json(tmp_path / "gen.json", GEN)
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    assert tree_bytes(tmp_path / "again") == tree_bytes(data)


def test_generate_seed_flag_changes_data(data, tmp_path):
    cfg = write_json(tmp_path / "gen.json", GEN)
    assert main(["generate", "--config", cfg, "--seed", "4", "--out", str(tmp_path / "o")]) == 0
    a = fnt.load(data / "samples/train_00000/Y.fnt")
    b = fnt.load(tmp_path / "o/samples/train_00000/Y.fnt")
    assert not np.array_equal(a, b)


def test_generate_negative_metal_count_is_a_usage_error(tmp_path, capsys):
    cfg = write_json(tmp_path / "gen.json", {**GEN, "metal": {"count": -1}})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "metal.count" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_generate_without_metal_flags_every_sample(tmp_path):
    g = {**GEN, "metal": {"count": 0}, "splits": {"train": 2, "val": 1, "test": 1}}
    cfg = write_json(tmp_path / "gen.json", g)
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    for d in (tmp_path / "o/samples").iterdir():
        meta = json.loads((d / "meta.json").read_text())
        assert meta["no_metal"] is True
        assert np.all(fnt.load(d / "I.fnt") == 1)


def test_generate_reports_failed_samples(tmp_path, capsys):
    g = {**GEN, "metal": {"count": 1, "radius_range": [14.0, 15.0]},
         "splits": {"train": 2, "val": 0, "test": 0}}
    cfg = write_json(tmp_path / "gen.json", g)
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "failed: train_00000" in err
    assert "train" in err.splitlines()[-1]


def test_generate_needs_an_output(capsys):
    assert main(["generate"]) == 2
    assert "--out" in capsys.readouterr().err


# ------------------------------------------------------------------ train

def test_train_writes_outputs(trained, capsys):
    for name in ("config.json", "history.csv", "steps.csv", "last/params.fnt",
                 "last/manifest.json", "last/resume.npz", "best/params.fnt"):
        assert (trained / name).exists(), name
    hist = read_csv(trained / "history.csv")
    assert [int(r["epoch"]) for r in hist] == [1, 2, 3, 4, 5]
    man = checkpoint.read_manifest(trained / "last")
    assert man["stages"] == 2 and man["use_gaussian"] is True
    assert man["step"] == 40


def test_train_lr_trace_follows_schedule(trained):
    steps = read_csv(trained / "steps.csv")
    sched = ScheduleConfig(6, 40, 0.0)
    lrs = [float(r["lr"]) for r in steps]
    assert [int(r["step"]) for r in steps] == list(range(1, 41))
    assert lrs == [lr_at(s - 1, sched, 1e-3) for s in range(1, 41)]
    assert all(a < b for a, b in zip(lrs[:5], lrs[1:6]))
    assert lrs[5] == 1e-3
    assert all(a >= b for a, b in zip(lrs[5:], lrs[6:]))
    assert all(math.isfinite(float(r["loss"])) for r in steps)


def test_train_resume_reproduces_uninterrupted_run(data, trained, tmp_path):
    cfg = train_config(tmp_path, epochs=2, schedule={"warmup_steps": 6, "total_steps": 40})
    out = str(tmp_path / "run")
    assert main(["train", "--config", cfg, "--data", str(data), "--out", out]) == 0
    cfg = train_config(tmp_path, epochs=5, schedule={"warmup_steps": 6, "total_steps": 40})
    assert main(["train", "--config", cfg, "--data", str(data), "--out", out, "--resume"]) == 0
    assert (tmp_path / "run/history.csv").read_text() == (trained / "history.csv").read_text()
    assert (tmp_path / "run/steps.csv").read_text() == (trained / "steps.csv").read_text()
    assert (tmp_path / "run/last/params.fnt").read_bytes() == \
        (trained / "last/params.fnt").read_bytes()


def test_train_ablation_flags_are_recorded(data, tmp_path):
    cfg = train_config(tmp_path, epochs=1)
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--data", str(data), "--out", str(out),
                 "--no-gaussian", "--alpha-zero", "--stages", "1"]) == 0
    man = checkpoint.read_manifest(out / "best")
    assert man["use_gaussian"] is False
    assert man["stages"] == 1
    assert man["alpha_schedule"] == [0.0]
    saved = json.loads((out / "config.json").read_text())
    assert saved["model"]["use_gaussian"] is False


def test_train_rejects_mismatched_geometry(data, tmp_path, capsys):
    cfg = train_config(tmp_path, epochs=1, geometry={"size": 64})
    assert main(["train", "--config", cfg, "--data", str(data),
                 "--out", str(tmp_path / "o")]) == 2
    assert "geometry" in capsys.readouterr().err


def test_train_rejects_unknown_config_key(data, tmp_path, capsys):
    cfg = train_config(tmp_path, learning_rate=1.0)
    assert main(["train", "--config", cfg, "--data", str(data),
                 "--out", str(tmp_path / "o")]) == 2
    assert "learning_rate" in capsys.readouterr().err


# ------------------------------------------------------------------ eval

def run_eval(data, out, *extra):
    return main(["eval", "--data", str(data), "--out", str(out), *extra])


def test_eval_oracle_scores_perfectly(data, tmp_path):
    assert run_eval(data, tmp_path, "--model", "oracle", "--split", "val") == 0
    rows = read_csv(tmp_path / "report.csv")
    assert len(rows) == 2
    assert all(float(r["mae"]) == 0.0 and float(r["ssim"]) == pytest.approx(1.0)
               for r in rows)
    summary = read_csv(tmp_path / "summary.csv")
    assert summary[-1]["group"] == "average"


def test_eval_self_baseline_gives_zero_improvement(data, tmp_path):
    assert run_eval(data, tmp_path / "li", "--model", "li") == 0
    assert run_eval(data, tmp_path / "again", "--model", "li",
                    "--baseline", str(tmp_path / "li/report.csv")) == 0
    avg = read_csv(tmp_path / "again/summary.csv")[-1]
    for k in ("mae_impr_pct", "ssim_impr_pct", "psnr_impr_pct"):
        assert float(avg[k]) == 0.0


def test_eval_checkpoint(data, trained, tmp_path, capsys):
    assert run_eval(data, tmp_path, "--checkpoint", str(trained / "best")) == 0
    out = capsys.readouterr().out
    assert out.startswith("group,mae,ssim,psnr")
    rows = read_csv(tmp_path / "report.csv")
    assert all(math.isfinite(float(r["mae"])) for r in rows)


def test_eval_missing_split_is_a_usage_error(data, tmp_path, capsys):
    assert run_eval(data, tmp_path, "--model", "li", "--split", "holdout") == 2
    assert "holdout" in capsys.readouterr().err


# ------------------------------------------------------------------ infer

def test_infer_stage_zero_returns_x0(data, trained, tmp_path):
    src = data / "samples/test_00000"
    assert main(["infer", "--checkpoint", str(trained / "best"), "--input", str(src),
                 "--out", str(tmp_path), "--stages", "0,2"]) == 0
    assert np.array_equal(fnt.load(tmp_path / "X_s0.fnt"), fnt.load(src / "X0.fnt"))
    assert (tmp_path / "X_s2.pgm").exists() and (tmp_path / "A_s2.fnt").exists()
    assert not (tmp_path / "X_s1.fnt").exists()


def test_infer_pgm_window_level(data, trained, tmp_path):
    src = data / "samples/test_00000"
    assert main(["infer", "--checkpoint", str(trained / "best"), "--input", str(src),
                 "--out", str(tmp_path), "--stages", "0",
                 "--window", "0.5", "--level", "0.25"]) == 0
    raw = (tmp_path / "X_s0.pgm").read_bytes()
    header = b"P5\n32 32\n65535\n"
    assert raw.startswith(header)
    pix = np.frombuffer(raw[len(header):], dtype=">u2").reshape(32, 32)
    x = fnt.load(src / "X0.fnt").astype(np.float64)
    expect = np.round(np.clip((x - 0.0) / 0.5, 0, 1) * 65535)
    assert np.array_equal(pix, expect)


def test_pgm16_clamps_and_rejects_bad_window():
    img = np.array([[-1.0, 0.0, 0.5], [1.0, 2.0, 0.25]])
    pix = np.frombuffer(pgm16(img, 1.0, 0.5)[len(b"P5\n3 2\n65535\n"):], dtype=">u2")
    assert pix.tolist() == [0, 0, 32768, 65535, 65535, 16384]
    from findnet.cli import UsageError
    with pytest.raises(UsageError):
        pgm16(img, 0.0, 0.5)


def test_infer_data_consistency_with_full_step(data, tmp_path):
    cfg = FindNetConfig(**MODEL)
    model = init_findnet(cfg, 0)
    for s in range(1, cfg.stages + 1):
        model.params[f"stage{s}.eta2_raw"] = np.array(40.0)
    checkpoint.save(tmp_path / "ck", model)
    src = data / "samples/test_00001"
    assert main(["infer", "--checkpoint", str(tmp_path / "ck"), "--input", str(src),
                 "--out", str(tmp_path / "o")]) == 0
    I = fnt.load(src / "I.fnt") > 0
    Y = fnt.load(src / "Y.fnt").astype(np.float64)
    for s in (1, 2):
        X = fnt.load(tmp_path / f"o/X_s{s}.fnt").astype(np.float64)
        A = fnt.load(tmp_path / f"o/A_s{s}.fnt").astype(np.float64)
        scale = np.maximum.reduce([np.abs(X), np.abs(A), np.abs(Y), np.ones_like(Y)])
        err = np.abs(X + A - Y)[I] / scale[I]
        assert err.max() <= 4 * np.finfo(np.float32).eps


def test_infer_explicit_paths_and_malformed_input(data, trained, tmp_path, capsys):
    src = data / "samples/test_00000"
    bad = tmp_path / "bad.fnt"
    good = (src / "Y.fnt").read_bytes()
    bad.write_bytes(good[:20])
    rc = main(["infer", "--checkpoint", str(trained / "best"), "--y", str(bad),
               "--mask", str(src / "I.fnt"), "--x0", str(src / "X0.fnt"),
               "--out", str(tmp_path / "o")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "bad.fnt" in err and "offset" in err


def test_infer_rejects_out_of_range_stage(data, trained, tmp_path, capsys):
    rc = main(["infer", "--checkpoint", str(trained / "best"),
               "--input", str(data / "samples/test_00000"), "--out", str(tmp_path),
               "--stages", "3"])
    assert rc == 2
    assert "outside" in capsys.readouterr().err


# ------------------------------------------------------------------ gradcheck

QUICK = {"full_model": False}


def test_gradcheck_passes_on_operator_and_block_checks(tmp_path, capsys):
    cfg = write_json(tmp_path / "g.json", QUICK)
    assert main(["gradcheck", "--config", cfg]) == 0
    out = capsys.readouterr().out
    for row in ("fourier_unit", "local_fourier_unit", "gffc[alpha=0.0]", "gffc[alpha=0.5]",
                "gffc[alpha=0.8]", "fe_resnet", "loss_total", "conv2d_transpose"):
        assert any(line.startswith(row + " ") and line.endswith("pass")
                   for line in out.splitlines()), row


def test_gradcheck_detects_a_broken_adjoint(tmp_path, capsys):
    cfg = write_json(tmp_path / "g.json", QUICK)
    assert main(["gradcheck", "--config", cfg, "--break", "conv2d"]) == 1
    cap = capsys.readouterr()
    assert "conv2d" in cap.err
    failing = [line.split()[0] for line in cap.out.splitlines() if line.endswith("FAIL")]
    assert "conv2d" in failing
    assert "exp" not in failing


def test_gradcheck_unknown_operator(capsys):
    assert main(["gradcheck", "--break", "nope"]) == 2
    assert "nope" in capsys.readouterr().err
