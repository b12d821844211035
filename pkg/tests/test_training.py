import csv

import numpy as np
import pytest
import torch

from scalecodec import transforms as T
from scalecodec.params import ParameterStore
from scalecodec.taskproxy import extract_reference_features
from scalecodec.training import (Checkpoint, TrainingDiverged, base_loss, enhancement_loss,
                                 joint_loss, learning_rate, preview_loss, train_base,
                                 train_enhancement, train_joint, write_metrics)

from _helpers import REL_TOL, fd_check


def _noise(shape, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=g, dtype=torch.float64) - 0.5


def _inputs(p, images, proxy):
    x = images.double()
    f_ref = extract_reference_features(images, proxy).double()
    return x, f_ref


def _perturbed_em(p, prefix):
    # move entropy parameters off their zero init so gradients are generic
    g = torch.Generator().manual_seed(11)
    for k in ("loc", "log_scale"):
        n = f"{prefix}.{k}"
        p[n] = p[n] + 0.3 * torch.randn(p[n].shape, generator=g)


def test_gradcheck_base_loss(tiny_config, tiny_params, tiny_proxy, images):
    p = tiny_params.clone()
    _perturbed_em(p, "base.em")
    x, f_ref = _inputs(p, images, tiny_proxy)
    noise = _noise((2, tiny_config.l_base, 2, 2), 1)
    fn = lambda q: base_loss(x, f_ref, q, 3.0, noise)[0]
    worst, checked = fd_check(fn, p, p.names("base") + p.names("lst"))
    assert checked > 40 and worst <= REL_TOL


def test_gradcheck_enhancement_loss(tiny_config, tiny_params, images):
    p = tiny_params.clone()
    _perturbed_em(p, "residual.em")
    x = images.double()
    noise = _noise((2, tiny_config.l_enh, 2, 2), 2)
    fn = lambda q: enhancement_loss(x, q, 50.0, noise)[0]
    names = p.names("preview") + p.names("residual")
    worst, checked = fd_check(fn, p, names)
    assert checked > 40 and worst <= REL_TOL


def test_gradcheck_joint_loss(tiny_config, tiny_params, tiny_proxy, images):
    p = tiny_params.clone()
    _perturbed_em(p, "joint.em")
    x, f_ref = _inputs(p, images, tiny_proxy)
    noise = _noise((2, tiny_config.l_base + tiny_config.l_enh, 2, 2), 3)
    fn = lambda q: joint_loss(x, f_ref, q, 3.0, 50.0, tiny_config.l_base, noise)[0]
    worst, checked = fd_check(fn, p, p.names("joint"))
    assert checked > 40 and worst <= REL_TOL


def test_enhancement_loss_gives_base_no_gradient(tiny_params, images):
    p = tiny_params.clone(requires_grad=True)
    enhancement_loss(images, p, 10.0, None)[0].backward()
    assert all(p[n].grad is None for n in p.names("base"))
    assert any(p[n].grad is not None for n in p.names("residual"))


def test_joint_base_distortion_sees_only_base_slice(tiny_config, tiny_params, tiny_proxy, images):
    p = tiny_params.clone()
    x, f_ref = _inputs(p, images, tiny_proxy)
    x = x.float()
    f_ref = f_ref.float()
    n1 = _noise((2, 5, 2, 2), 4).float()
    n2 = n1.clone()
    n2[:, 2:] += 0.2
    d1 = joint_loss(x, f_ref, p, 1.0, 1.0, 2, n1)[3]
    d2 = joint_loss(x, f_ref, p, 1.0, 1.0, 2, n2)[3]
    assert torch.equal(d1, d2)


def test_loss_terms_add_up(tiny_config, tiny_params, tiny_proxy, images):
    x, f_ref = _inputs(tiny_params, images, tiny_proxy)
    loss, rate, dist = base_loss(x.float(), f_ref.float(), tiny_params, 7.0, None)
    assert loss.item() == pytest.approx(rate.item() + 7.0 * dist.item(), rel=1e-6)
    assert rate.item() > 0 and dist.item() > 0


def test_learning_rate_schedule():
    from scalecodec.config import ExperimentConfig
    c = ExperimentConfig(stage1_epochs=4, stage2_epochs=6, stage1_lr=1e-3, decay_interval=2,
                         decay_power=1.0, lr_floor=1e-6)
    lrs = [learning_rate(e, c) for e in range(10)]
    assert lrs[:4] == [1e-3] * 4
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[4] == lrs[5] and lrs[-1] >= 1e-6 and lrs[-1] < 1e-3


def test_nan_loss_raises(tiny_params, tiny_proxy, images):
    x = images.clone()
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises((TrainingDiverged, ValueError)):
        base_loss(x, torch.zeros(2, 3, 4, 4), tiny_params, 1.0, None)


def test_train_base_then_enhancement_freezes_base(tiny_config, tiny_proxy, tiny_data, tmp_path):
    base = train_base(tiny_data, tiny_proxy, tiny_config, lambda_base=1.0, seed=5)
    assert base.kind == "base" and len(base.metrics) == 2
    frozen = {n: base.params.numpy(n).tobytes() for n in base.params.names("base") +
              base.params.names("taskproxy")}
    enh = train_enhancement(tiny_data, base, tiny_config, lambda_enh=10.0, seed=5)
    for n, b in frozen.items():
        assert enh.params.numpy(n).tobytes() == b
    assert enh.params.hash(["base"]) == base.params.hash(["base"])
    path = tmp_path / "m.csv"
    write_metrics(enh.metrics, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["epoch", "loss", "rate_bpp", "distortion", "lr"]


def test_training_is_deterministic(tiny_config, tiny_proxy, tiny_data):
    a = train_base(tiny_data, tiny_proxy, tiny_config, lambda_base=1.0, seed=9)
    b = train_base(tiny_data, tiny_proxy, tiny_config, lambda_base=1.0, seed=9)
    assert a.model_hash() == b.model_hash()


def test_resume_matches_uninterrupted(tiny_config, tiny_proxy, tiny_data):
    full = train_base(tiny_data, tiny_proxy, tiny_config, lambda_base=1.0, seed=2)
    half = train_base(tiny_data, tiny_proxy, tiny_config.replace(stage2_epochs=0), lambda_base=1.0, seed=2)
    resumed = train_base(tiny_data, tiny_proxy, tiny_config, lambda_base=1.0, seed=2,
                         resume=Checkpoint.from_arrays(half.to_arrays()))
    for n in full.params.names("base"):
        np.testing.assert_allclose(full.params.numpy(n), resumed.params.numpy(n), atol=1e-6)


def test_enhancement_requires_base_checkpoint(tiny_config, tiny_proxy, tiny_data):
    joint = train_joint(tiny_data, tiny_proxy, tiny_config, 1.0, 10.0, seed=1)
    with pytest.raises(ValueError):
        train_enhancement(tiny_data, joint, tiny_config)


def test_checkpoint_roundtrip(tiny_config, tiny_proxy, tiny_data, tmp_path):
    ck = train_joint(tiny_data, tiny_proxy, tiny_config, 1.0, 10.0, seed=2 ** 40 + 7)
    ck.save(tmp_path / "j.ckpt")
    back = Checkpoint.load(tmp_path / "j.ckpt")
    assert back.model_hash() == ck.model_hash()
    assert (back.kind, back.seed, back.l_base, back.epoch) == ("joint", 2 ** 40 + 7, 2, 2)
    assert back.escape == ck.escape and back.lambda_enh == 10.0
    assert back.proxy().hash() == tiny_proxy.hash()


def test_preview_loss_is_mse(tiny_params, images):
    from scalecodec.entropy import quantize
    yb = quantize(T.analyze_base(images, tiny_params), "round")
    expected = ((T.synthesize_preview(yb, tiny_params) - images) ** 2).mean()
    assert preview_loss(images, tiny_params).item() == pytest.approx(expected.item(), rel=1e-6)
