import json

import numpy as np
import pytest

from lrpe import cli, io, nn
from lrpe.equilibrium import save_checkpoint
from lrpe.experiment import ConfigError, ExperimentConfig, read_metrics_csv, run_experiment


SMALL = ["fine_size=16", "coarse_size=8", "views=12"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def sets(*items):
    out = []
    for it in items:
        out += ["--set", it]
    return out


def test_pipeline_roundtrip(tmp_path, capsys):
    img, sino, noisy = tmp_path / "p.lrim", tmp_path / "s.lrsg", tmp_path / "n.lrsg"
    s = sets(*SMALL)
    assert run(capsys, "phantom", *s, "--out", str(img), "--seed", "3", "--pgm")[0] == 0
    assert (tmp_path / "p.lrim.pgm").read_bytes().startswith(b"P5")
    assert run(capsys, "project", *s, "--image", str(img), "--out", str(sino),
               "--matrix-cache", str(tmp_path / "A.lrsm"))[0] == 0
    assert io.read_sinogram(sino).shape[0] == 12
    assert run(capsys, "noise", *s, "--sino", str(sino), "--out", str(noisy), "--level", "0.05")[0] == 0
    for cmd in ("fbp", "tv"):
        out = tmp_path / f"{cmd}.lrim"
        assert run(capsys, cmd, *s, "--sino", str(noisy), "--out", str(out))[0] == 0
        assert io.read_image(out).shape == (16, 16)
    code, text, _ = run(capsys, "metrics", "--image", str(tmp_path / "tv.lrim"), "--ref", str(img))
    assert code == 0
    kv = dict(line.split(" = ") for line in text.strip().splitlines())
    assert float(kv["psnr_db"]) > 10 and float(kv["ssim"]) <= 1.0


def test_metrics_identical_reports_inf(tmp_path, capsys):
    p = tmp_path / "a.lrim"
    io.write_image(p, np.random.default_rng(0).uniform(size=(12, 12)))
    code, text, _ = run(capsys, "metrics", "--image", str(p), "--ref", str(p))
    assert code == 0 and "psnr_db = inf" in text


def test_errors_are_machine_readable(tmp_path, capsys):
    code, _, err = run(capsys, "fbp", *sets(*SMALL), "--sino", str(tmp_path / "missing.lrsg"),
                       "--out", str(tmp_path / "x.lrim"))
    assert code == 1
    rec = json.loads(err.strip().splitlines()[-1])
    assert rec["error"] == "FileNotFoundError"
    code, _, err = run(capsys, "phantom", "--set", "bogus=1", "--out", str(tmp_path / "x.lrim"))
    assert code == 1 and json.loads(err.strip())["error"] == "ConfigError"


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "exp.txt"
    p.write_text("# toy\nfine_size = 16\ncoarse_size = 8\nmode = limited_angle\nangular_range = 90\n")
    cfg = ExperimentConfig.load(p, ["views=20", "noiseless=true"])
    g = cfg.geometry()
    assert g.fine_size == 16 and g.num_views == 20 and g.angle_end == 90.0 and cfg.noiseless
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p, ["angular_range=180"])
    with pytest.raises(ConfigError):
        ExperimentConfig.load(None, ["mode=sparse_view", "angular_range=90"])
    with pytest.raises(ConfigError):
        ExperimentConfig.load(None, ["views=many"])


def test_experiment_full_view_fbp(tmp_path):
    cfg = ExperimentConfig.load(None, ["fine_size=64", "coarse_size=16", "views=180", "phantom=disk",
                                       "noiseless=1", "methods=fbp", f"output_dir={tmp_path}"])
    res = run_experiment(cfg)
    assert res.rows[0].method == "fbp" and res.rows[0].psnr_db > 25


def test_experiment_deterministic_and_skips(tmp_path):
    base = SMALL + ["test_count=2", "tv_iters=50", "prior_iters=30", "stages=3",
                    "grad_checkpoint=" + str(tmp_path / "nope.lrpw")]
    ck = tmp_path / "m.lrpw"
    cfg_a = ExperimentConfig.load(None, base + [f"output_dir={tmp_path / 'a'}", f"lrpe_checkpoint={ck}"])
    save_checkpoint(ck, nn.xavier_init(0), cfg_a.lrpe_config(), cfg_a.geometry())
    cfg_b = ExperimentConfig.load(None, base + [f"output_dir={tmp_path / 'b'}", f"lrpe_checkpoint={ck}"])
    ra = run_experiment(cfg_a)
    run_experiment(cfg_b)
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a.splitlines()[0] == b"method,psnr_db,ssim,runtime_s"
    assert [r.method for r in read_metrics_csv(tmp_path / "a" / "metrics.csv")] == ["fbp", "tv", "lrpe"]
    assert "grad" in ra.skipped and "not found" in ra.skipped["grad"]
    assert (tmp_path / "a" / "skipped.txt").exists()
    for name in ("truth.lrim", "lrpe.pgm", "lrpe_trace.csv", "certificate.txt", "certificate_eps.csv"):
        assert (tmp_path / "a" / name).exists()


def test_cli_train_reconstruct_certify(tmp_path, capsys):
    s = sets(*SMALL, "train_count=2", "epochs=2", "stages=2", "prior_iters=20", "lr_init=1e-3")
    ck = tmp_path / "m.lrpw"
    code, text, err = run(capsys, "train", *s, "--out", str(ck), "--loss-csv", str(tmp_path / "loss.csv"))
    assert code == 0, err
    assert "final_loss" in text and (tmp_path / "m.lrpw.meta").exists()
    assert len((tmp_path / "loss.csv").read_text().splitlines()) == 3
    img, sino = tmp_path / "p.lrim", tmp_path / "s.lrsg"
    run(capsys, "phantom", *s, "--out", str(img))
    run(capsys, "project", *s, "--image", str(img), "--out", str(sino))
    code, _, err = run(capsys, "reconstruct", *s, "--checkpoint", str(ck), "--sino", str(sino),
                       "--out", str(tmp_path / "r.lrim"), "--trace", str(tmp_path / "t.csv"))
    assert code == 0, err
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 3
    code, text, err = run(capsys, "certify", *s, "--checkpoint", str(ck), "--sino", str(sino),
                          "--out", str(tmp_path / "c.txt"), "--csv", str(tmp_path / "c.csv"))
    assert code == 0, err
    assert "gamma" in io.read_kv(tmp_path / "c.txt")


def test_cli_experiment_prints_table(tmp_path, capsys):
    s = sets(*SMALL, "methods=fbp,lrpe", f"output_dir={tmp_path}")
    code, text, _ = run(capsys, "experiment", *s)
    assert code == 0
    assert "skipped = lrpe" in text and "method,psnr_db,ssim,runtime_s" in text
