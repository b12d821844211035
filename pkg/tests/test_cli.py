import json

import numpy as np
import pytest
import torch

from scalecodec import checkpoint as ckptio
from scalecodec.cli import main
from scalecodec.codec import latents
from scalecodec.data import save_png, synthetic_dataset
from scalecodec.evaluation import psnr
from scalecodec.training import Checkpoint
from scalecodec import transforms as T

TINY = """\
l_base = 2
l_enh = 3
hidden = 4
feature_channels = 3
image_size = 16
synthetic_train = 16
synthetic_val = 8
stage1_epochs = 1
stage2_epochs = 1
decay_interval = 1
preview_epochs = 1
proxy_epochs = 1
batch_size = 8
lambda_base_grid = 1, 10
lambda_enh_grid = 10, 100
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Train a proxy, a base, an enhancement and a joint checkpoint once for the module."""
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY)
    cfg = d / "tiny.cfg"
    assert main(["train-task", "--config", str(cfg), "--out", str(d / "proxy.ckpt")]) == 0
    assert main(["train-base", "--config", str(cfg), "--checkpoint", str(d / "proxy.ckpt"),
                 "--lambda-base", "3", "--out", str(d / "base.ckpt")]) == 0
    assert main(["train-enh", "--config", str(cfg), "--base-checkpoint", str(d / "base.ckpt"),
                 "--out", str(d / "enh.ckpt")]) == 0
    assert main(["train-joint", "--config", str(cfg), "--checkpoint", str(d / "proxy.ckpt"),
                 "--out", str(d / "joint.ckpt")]) == 0
    img = synthetic_dataset(1, seed=5, split="val", size=16).images[0]
    save_png(img, str(d / "img.png"))
    np.save(d / "img.npy", img.numpy())
    return d


def test_training_outputs(workdir):
    for name in ("base", "enh", "joint"):
        assert (workdir / f"{name}.ckpt").exists()
        assert (workdir / f"{name}.metrics.csv").read_text().startswith("epoch,loss,rate_bpp")
        assert "l_base = 2" in (workdir / f"{name}.config.txt").read_text()
    assert Checkpoint.load(workdir / "enh.ckpt").kind == "enh"


def test_training_reproducible(workdir, tmp_path):
    assert main(["train-base", "--config", str(workdir / "tiny.cfg"), "--checkpoint",
                 str(workdir / "proxy.ckpt"), "--lambda-base", "3", "--out", str(tmp_path / "b.ckpt")]) == 0
    assert (tmp_path / "b.ckpt").read_bytes() == (workdir / "base.ckpt").read_bytes()


def test_checkpoint_save_load_save_identical(workdir, tmp_path):
    ck = Checkpoint.load(workdir / "joint.ckpt")
    ck.save(tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == (workdir / "joint.ckpt").read_bytes()


def test_encode_decode_base_label_matches_pipeline(workdir, capsys):
    code, out, _ = run(capsys, "encode", workdir / "img.png", "--checkpoint", workdir / "base.ckpt",
                       "--layers", "base", "--out", workdir / "img.shmc")
    assert code == 0 and json.loads(out)["bytes"] == (workdir / "img.shmc").stat().st_size
    code, out, _ = run(capsys, "decode", workdir / "img.shmc", "--checkpoint", workdir / "base.ckpt",
                       "--layers", "base", "--out", workdir / "label.json")
    assert code == 0
    summary = json.loads((workdir / "label.json").read_text())
    ck = Checkpoint.load(workdir / "base.ckpt")
    from scalecodec.data import load_png
    from scalecodec.taskproxy import classify_from_features
    yb, _, _ = latents(load_png(str(workdir / "img.png")).unsqueeze(0), ck, False)
    direct = int(classify_from_features(T.lst_apply(yb, ck.params), ck.proxy()).argmax())
    assert summary["label"] == direct
    assert summary["features"]["shape"] == [3, 4, 4]


def test_encode_decode_recon_psnr_matches_in_memory(workdir, capsys):
    for name in ("enh", "joint"):
        shmc = workdir / f"{name}.shmc"
        assert run(capsys, "encode", workdir / "img.npy", "--checkpoint", workdir / f"{name}.ckpt",
                   "--layers", "base+enh", "--out", shmc)[0] == 0
        assert run(capsys, "decode", shmc, "--checkpoint", workdir / f"{name}.ckpt",
                   "--layers", "base+enh", "--out", workdir / f"{name}.npy")[0] == 0
        assert run(capsys, "decode", shmc, "--checkpoint", workdir / f"{name}.ckpt",
                   "--layers", "base+enh", "--out", workdir / f"{name}.png")[0] == 0
        x = torch.from_numpy(np.load(workdir / "img.npy"))
        decoded = torch.from_numpy(np.load(workdir / f"{name}.npy"))
        ck = Checkpoint.load(workdir / f"{name}.ckpt")
        yb, ye, preview = latents(x.unsqueeze(0), ck, True)
        with torch.no_grad():
            if name == "joint":
                rec = T.synthesize_joint(torch.cat([yb, ye], 1), ck.params)[0]
            else:
                rec = T.reconstruct(preview, T.synthesize_residual(ye, ck.params))[0]
        assert abs(psnr(x, decoded) - psnr(x, rec)) <= 1e-9


def test_base_only_stream_on_enh_checkpoint_gives_preview(workdir, capsys):
    shmc = workdir / "img_base_only.shmc"
    assert run(capsys, "encode", workdir / "img.npy", "--checkpoint", workdir / "enh.ckpt",
               "--layers", "base", "--out", shmc)[0] == 0
    assert run(capsys, "decode", shmc, "--checkpoint", workdir / "enh.ckpt", "--layers", "base+enh",
               "--out", workdir / "prev.npy")[0] == 0
    ck = Checkpoint.load(workdir / "enh.ckpt")
    x = torch.from_numpy(np.load(workdir / "img.npy"))
    yb, _, _ = latents(x.unsqueeze(0), ck, False)
    with torch.no_grad():
        preview = T.synthesize_preview(yb, ck.params)[0]
    assert np.array_equal(np.load(workdir / "prev.npy"), preview.numpy())


def test_model_mismatch(workdir, capsys):
    run(capsys, "encode", workdir / "img.png", "--checkpoint", workdir / "base.ckpt",
        "--out", workdir / "m.shmc")
    code, _, err = run(capsys, "decode", workdir / "m.shmc", "--checkpoint", workdir / "joint.ckpt",
                       "--out", workdir / "m.json")
    assert code == 2 and err.startswith("scalecodec: model-mismatch:")
    assert len(err.strip().splitlines()) == 1


def test_eval_and_bdrate(workdir, capsys):
    code, _, _ = run(capsys, "eval-task", "--config", workdir / "tiny.cfg", "--checkpoint",
                     workdir / "base.ckpt", "--checkpoint", workdir / "joint.ckpt",
                     "--out", workdir / "task.csv")
    assert code in (0, 2)  # two tiny checkpoints may tie on rate
    code, _, _ = run(capsys, "eval-recon", "--config", workdir / "tiny.cfg", "--no-coder",
                     "--checkpoint", workdir / "enh.ckpt", "--checkpoint", workdir / "joint.ckpt",
                     "--out", workdir / "recon.csv")
    assert code == 0
    assert (workdir / "recon.csv").read_text().startswith("bpp,quality")


def test_sweep(workdir, capsys, tmp_path):
    # a wide grid so that even two-epoch models land on distinct rates
    cfg = tmp_path / "sweep.cfg"
    cfg.write_text(TINY.replace("lambda_enh_grid = 10, 100", "lambda_enh_grid = 1, 100000")
                   .replace("stage1_epochs = 1", "stage1_epochs = 6"))
    code, out, _ = run(capsys, "sweep", "--config", cfg, "--kind", "enh",
                       "--base-checkpoint", workdir / "base.ckpt", "--no-coder", "--out", tmp_path)
    assert code == 0
    assert json.loads(out)["points"] == 2
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["enh_lambda1.ckpt", "enh_lambda100000.ckpt"]
    assert (tmp_path / "config.txt").exists()


def test_bdrate_identical(tmp_path, capsys):
    path = tmp_path / "ref.csv"
    path.write_text("bpp,quality\n0.2,30\n0.4,33\n0.8,36\n1.6,39\n")
    code, out, _ = run(capsys, "bdrate", path, path)
    assert code == 0 and json.loads(out) == {"bd_rate_percent": 0.0}


def test_bdrate_too_few_points(tmp_path, capsys):
    path = tmp_path / "ref.csv"
    path.write_text("bpp,quality\n0.2,30\n0.4,33\n")
    code, _, err = run(capsys, "bdrate", path, path)
    assert code == 2 and err.startswith("scalecodec: curve-error:")


def test_breakeven(capsys):
    code, out, _ = run(capsys, "breakeven", "--rb", "0.5", "--rt", "1.5")
    assert code == 0 and json.loads(out) == {"f_threshold": 0.5}


@pytest.mark.parametrize("argv", [[], ["breakeven", "--rb", "0.5"], ["encode"], ["bogus"],
                                  ["decode", "x.shmc", "--layers", "all"]])
def test_usage_errors_exit_1(argv, capsys):
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert err.strip().splitlines()[-1].startswith("scalecodec: usage-error:")


def test_missing_flag_exit_1(capsys):
    code, _, err = run(capsys, "train-base", "--out", "x.ckpt")
    assert code == 1 and "--checkpoint" in err


def test_config_error_reports_line(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("hidden = 4\nlbase = 3\n")
    code, _, err = run(capsys, "train-task", "--config", cfg, "--out", tmp_path / "p.ckpt")
    assert code == 1 and err.startswith("scalecodec: config-error: line 2:")
    assert "l_base" in err


def test_corrupt_checkpoint_exit_2(workdir, tmp_path, capsys):
    data = bytearray((workdir / "base.ckpt").read_bytes())
    data[40] ^= 1
    (tmp_path / "bad.ckpt").write_bytes(bytes(data))
    code, _, err = run(capsys, "encode", workdir / "img.png", "--checkpoint", tmp_path / "bad.ckpt",
                       "--out", tmp_path / "x.shmc")
    assert code == 2 and err.startswith("scalecodec: format-error:")


def test_truncated_bitstream_exit_2(workdir, tmp_path, capsys):
    data = (workdir / "img.shmc").read_bytes()
    (tmp_path / "t.shmc").write_bytes(data[:-2])
    code, _, err = run(capsys, "decode", tmp_path / "t.shmc", "--checkpoint", workdir / "base.ckpt",
                       "--out", tmp_path / "t.json")
    assert code == 2 and err.startswith("scalecodec: format-error:")


def test_missing_input_exit_2(workdir, tmp_path, capsys):
    code, _, err = run(capsys, "decode", tmp_path / "nope.shmc", "--checkpoint", workdir / "base.ckpt",
                       "--out", tmp_path / "t.json")
    assert code == 2 and err.startswith("scalecodec: file-not-found:")
