import numpy as np
import pytest

from corrreg import autodiff as ad
from corrreg.drr import project, toy_geometry
from corrreg.encoder import (
    EncoderConfig, bind, encoder_forward, encoder_pose_gradient, global_branch, init_params, inn_forward,
    inn_inverse, net_loss_value, sfe_forward,
)
from corrreg.se3 import exp_map, perturb
from corrreg.volume import make_phantom

SMALL = EncoderConfig(input_size=32, channels=8, coupling_hidden=8, d_se=8, mlp_hidden=(16, 16, 8))


def image(seed, size=32):
    y, x = np.mgrid[:size, :size]
    r = np.random.default_rng(seed)
    cx, cy = r.uniform(8, size - 8, 2)
    return np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / 30.0) + 0.05 * r.normal(size=(size, size))


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(channels=6)
    with pytest.raises(ValueError):
        EncoderConfig(downsample=3)
    assert EncoderConfig().mlp_widths == (16, 64, 64, 32, 16)
    assert EncoderConfig.from_dict({"channels": 8}).channels == 8


def test_init_is_deterministic():
    a, b = init_params(SMALL, 3), init_params(SMALL, 3)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert a["log_sigma1"].shape == ()


def test_sfe_shape():
    P = bind(init_params(SMALL))
    assert sfe_forward(image(0), P, SMALL).shape == (8, 8, 8)
    with pytest.raises(ValueError):
        sfe_forward(np.zeros((30, 30)), P, SMALL)


def test_inn_reconstruction():
    P = bind(init_params(SMALL, 1))
    x = ad.Tensor(np.random.default_rng(0).normal(size=(8, 8, 8)))
    y = inn_forward(x, P, SMALL)
    assert np.abs(inn_inverse(y, P, SMALL).data - x.data).max() <= 1e-5


def test_linear_global_branch_is_linear():
    cfg = EncoderConfig(input_size=32, channels=8, linear_global=True)
    P = bind(init_params(cfg, 2))
    r = np.random.default_rng(1)
    a, b = r.normal(size=(8, 8, 8)), r.normal(size=(8, 8, 8))
    G = lambda v: global_branch(ad.Tensor(v), P, cfg).data  # noqa: E731
    assert np.allclose(G(2.0 * a - b), 2.0 * G(a) - G(b), atol=1e-10)


def test_identical_inputs_give_zero_features():
    params = init_params(SMALL, 4)
    img = image(2)
    out = encoder_forward(img, img.copy(), params, SMALL, record=False)
    assert not out.gld["Phi_g"].data.any()
    assert not out.gld["Phi_l"].data.any()


def test_net_loss_range():
    params = init_params(SMALL, 5)
    v = net_loss_value(image(3), image(4), params, SMALL)
    assert 0.0 < v < SMALL.d_se


def test_image_gradient_matches_finite_differences():
    params = init_params(SMALL, 6)
    I_x, I_m = image(5), image(6)
    out = encoder_forward(I_x, I_m, params, SMALL)
    g = ad.grad_wrt_input(out.tape, out.net_loss, out.I_m)
    r = np.random.default_rng(0)
    for _ in range(5):
        d = r.normal(size=I_m.shape)
        h = 1e-7  # small, so few relu kinks fall inside the stencil
        fd = (net_loss_value(I_x, I_m + h * d, params, SMALL) - net_loss_value(I_x, I_m - h * d, params, SMALL)) / (2 * h)
        assert float(np.sum(g * d)) == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_pose_gradient_matches_finite_differences_on_blob():
    V = make_phantom("blob", 32, spacing=2.0, sigma=(10.0, 14.0, 8.0), center=(4.0, -3.0, 0.0))
    geom = toy_geometry(32, step_mm=1.0)
    params = init_params(SMALL, 7)
    I_x = project(V, exp_map([0.1, -0.05, 0.08, 4, -3, 6]), geom).data
    pose = exp_map([0.02, 0.03, -0.01, -2, 1, 0])
    g = encoder_pose_gradient(V, pose, I_x, geom, params, SMALL).as_array()
    h = 1e-4
    fd = np.zeros(6)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        lp = net_loss_value(I_x, project(V, perturb(pose, e), geom).data, params, SMALL)
        lm = net_loss_value(I_x, project(V, perturb(pose, -e), geom).data, params, SMALL)
        fd[k] = (lp - lm) / (2 * h)
    assert np.abs(g - fd).max() <= 1e-2 * np.abs(fd).max()


def test_checkpoint_round_trip(tmp_path):
    params = init_params(SMALL, 8)
    ad.save_params(params, tmp_path / "enc")
    loaded, _ = ad.load_params(tmp_path / "enc")
    img_a, img_b = image(7), image(8)
    assert net_loss_value(img_a, img_b, loaded, SMALL) == pytest.approx(
        net_loss_value(img_a, img_b, params, SMALL), rel=1e-5)
