"""Registration network: construction, inference contract, gradients and the trainer."""

import numpy as np
import pytest
import torch

from xmas.data import PhantomConfig, generate_subject, normalize_subject
from xmas.errors import ConfigError, NumericError, ShapeError
from xmas.field import ScalarVolume, SpatialGrid
from xmas.losses import LossConfig
from xmas.regnet import (
    RegNetConfig,
    build_regnet,
    ema,
    load_state_blocks,
    make_batch,
    make_optimizer,
    parameter_count,
    predict_ddfs,
    reg_loss,
    register_atlas,
    state_blocks,
    train_reg,
)

GRID16 = SpatialGrid.cube(16)


def _pairs(n=2, side=16):
    cfg = PhantomConfig(grid=SpatialGrid.cube(side))
    subs = [normalize_subject(generate_subject(cfg, i)) for i in range(2 * n)]
    return [((subs[2 * i].image_a, subs[2 * i].label), (subs[2 * i + 1].image_b, subs[2 * i + 1].label)) for i in range(n)]


def _params(net):
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


def _off_grid(net):
    # keep x + u(x) away from integer nodes, where trilinear warps have kinks
    with torch.no_grad():
        net.head_u.bias.copy_(torch.tensor([0.37, -0.41, 0.29]))
        net.head_v.bias.copy_(torch.tensor([-0.33, 0.44, 0.38]))
    return net


def conv_params(cin, cout, k=3):
    return cin * cout * k ** 3 + cout


def test_parameter_count_closed_form():
    # encoder: 2->8->8, 8->16->16, 16->32->32; decoder: (32+16)->16->16, (16+8)->8->8; heads 8->3 twice
    expected = (
        conv_params(2, 8) + conv_params(8, 8)
        + conv_params(8, 16) + conv_params(16, 16)
        + conv_params(16, 32) + conv_params(32, 32)
        + conv_params(48, 16) + conv_params(16, 16)
        + conv_params(24, 8) + conv_params(8, 8)
        + 2 * conv_params(8, 3, k=1)
    )
    assert expected == 88774
    assert parameter_count(build_regnet(RegNetConfig())) == expected


def test_config_validation():
    with pytest.raises(ConfigError):
        RegNetConfig(input_grid=SpatialGrid.cube(20), levels=3)
    with pytest.raises(ConfigError):
        RegNetConfig(levels=0)
    cfg = RegNetConfig(input_grid=GRID16, levels=2, seed=4)
    assert RegNetConfig.from_dict(cfg.to_dict()) == cfg


def test_build_is_deterministic():
    a = state_blocks(build_regnet(RegNetConfig(seed=3)))
    b = state_blocks(build_regnet(RegNetConfig(seed=3)))
    c = state_blocks(build_regnet(RegNetConfig(seed=4)))
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_zero_init_predicts_identity():
    (atlas, target), = _pairs(1, side=32)
    net = build_regnet(RegNetConfig())
    u, v = predict_ddfs(net, atlas[0], target[0])
    assert u.vectors.shape == v.vectors.shape == (3, 32, 32, 32)
    assert not u.vectors.any() and not v.vectors.any()
    w_img, w_lab, _, _ = register_atlas(net, atlas, target[0])
    assert np.array_equal(w_img.values, atlas[0].values)
    assert np.array_equal(w_lab.labels, atlas[1].labels)
    assert w_lab.label_set == atlas[1].label_set


def test_predict_rejects_wrong_grid():
    net = build_regnet(RegNetConfig())
    vol = ScalarVolume.from_array(np.zeros((16, 16, 16)))
    with pytest.raises(ShapeError):
        predict_ddfs(net, vol, vol)


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    cfg = RegNetConfig(input_grid=SpatialGrid.cube(8), final_layer_zero_init=False, seed=1)
    net = _off_grid(build_regnet(cfg).double())
    pairs = _pairs(1, side=8)
    batch = make_batch(pairs, [0], (0, 1, 2), torch.float64)
    loss_cfg = LossConfig()
    params = list(net.parameters())
    (grad,) = [torch.autograd.grad(reg_loss(net, batch, loss_cfg).total, params)]
    rng = np.random.default_rng(0)
    analytic, numeric = [], []
    h = 1e-6
    for _ in range(24):
        k = int(rng.integers(len(params)))
        p = params[k]
        i = int(rng.integers(p.numel()))
        with torch.no_grad():
            idx = np.unravel_index(i, tuple(p.shape))
            old = p[idx].item()
            p[idx] = old + h
            plus = reg_loss(net, batch, loss_cfg).total.item()
            p[idx] = old - h
            minus = reg_loss(net, batch, loss_cfg).total.item()
            p[idx] = old
        numeric.append((plus - minus) / (2 * h))
        analytic.append(grad[k].reshape(-1)[i].item())
    a, n = np.array(analytic), np.array(numeric)
    assert np.linalg.norm(n) > 0
    assert np.linalg.norm(a - n) / np.linalg.norm(n) <= 1e-3


def test_zero_iterations_leave_params():
    net = build_regnet(RegNetConfig(input_grid=GRID16, levels=2, iterations=0))
    before = _params(net)
    net, history = train_reg(net, _pairs(1))
    assert history == []
    assert all(torch.equal(before[k], v) for k, v in net.state_dict().items())


def test_small_gradient_step_decreases_loss():
    cfg = RegNetConfig(input_grid=GRID16, levels=2)
    net = _off_grid(build_regnet(cfg).double())
    batch = make_batch(_pairs(1), [0], (0, 1, 2), torch.float64)
    loss = reg_loss(net, batch, LossConfig()).total
    params = list(net.parameters())
    grads = torch.autograd.grad(loss, params)
    with torch.no_grad():
        for p, g in zip(params, grads):
            p -= 1e-3 * g
    assert reg_loss(net, batch, LossConfig()).total.item() < loss.item()


def test_training_history_and_descent():
    cfg = RegNetConfig(input_grid=GRID16, levels=2, iterations=40, learning_rate=3e-3)
    net, history = train_reg(build_regnet(cfg), _pairs(2))
    assert len(history) == 40
    totals = [h.total for h in history]
    assert np.all(np.isfinite(totals))
    smooth = ema(totals)
    assert smooth[-1] <= totals[0]


def test_resume_reproduces_unbroken_run():
    cfg = RegNetConfig(input_grid=GRID16, levels=2, iterations=6)
    pairs = _pairs(2)
    full, hist_full = train_reg(build_regnet(cfg), pairs)

    net = build_regnet(cfg)
    opt = make_optimizer(net, cfg)
    net, h1 = train_reg(net, pairs, optimizer=opt, stop_iteration=3)
    blocks = state_blocks(net, opt)
    resumed = load_state_blocks(build_regnet(cfg), blocks)
    opt2 = make_optimizer(resumed, cfg)
    load_state_blocks(resumed, blocks, opt2, step=3)
    resumed, h2 = train_reg(resumed, pairs, optimizer=opt2, start_iteration=3)
    assert [h.total for h in hist_full] == [h.total for h in h1 + h2]
    for k, v in full.state_dict().items():
        assert torch.equal(v, resumed.state_dict()[k])


def test_nan_aborts_with_state():
    cfg = RegNetConfig(input_grid=GRID16, levels=2, iterations=3, final_layer_zero_init=False)
    net = build_regnet(cfg)
    with torch.no_grad():
        net.head_u.bias[0] = float("nan")
    with pytest.raises(NumericError) as info:
        train_reg(net, _pairs(1))
    assert info.value.state["iteration"] == 0
    assert "param_norms" in info.value.state


def test_ema():
    assert ema([1.0, 1.0, 1.0]) == [1.0, 1.0, 1.0]
    assert ema([0.0, 10.0], alpha=0.5) == [0.0, 5.0]
