import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cncreg.checks import count_midpoint_violations, random_iwcnn
from cncreg.networks import (
    SILU_D1_SUP,
    SILU_D2_SUP,
    ConvexityError,
    ConvICNN,
    ConvSmoothNet,
    DenseICNN,
    DenseSmoothNet,
    IWCNN,
    LeakyRectifier,
    RegularizerCNC,
    bound_lipschitz_curvature,
    certify_weak_convexity,
    icnn_forward,
    iwcnn_forward,
    load_checkpoint,
    project_icnn_weights,
    project_regularizer,
    regularizer_gradient,
    regularizer_value,
    save_checkpoint,
    smoothnet_forward,
    torch_batch_fn,
)
from cncreg.theory import estimate_weak_convexity_modulus


def dense_reg(seed=0, dim=6, m=5, mu=0.1):
    torch.manual_seed(seed)
    convex = DenseICNN(dim, (12, 12))
    weak = IWCNN(DenseICNN(m, (8,)), DenseSmoothNet(4, (8, 8), m))
    return RegularizerCNC(convex, weak, mu, (dim,), (4,)).double()


def conv_reg(seed=0):
    torch.manual_seed(seed)
    convex = ConvICNN((8, 8), channels=4, n_layers=2, kernel=3)
    weak = IWCNN(DenseICNN(16, (8,)), ConvSmoothNet((4, 6), channels=3, n_layers=2, kernel=3, out_dim=16))
    return RegularizerCNC(convex, weak, 0.05, (8, 8), (4, 6)).double()


def activation_pattern(net, x):
    signs = []
    hooks = [m.register_forward_hook(lambda mod, inp, out: signs.append((inp[0] >= 0).clone()))
             for m in net.modules() if isinstance(m, LeakyRectifier)]
    try:
        with torch.no_grad():
            net(torch.as_tensor(x)[None])
    finally:
        for h in hooks:
            h.remove()
    return signs


def same_pattern(net, *points):
    pats = [activation_pattern(net, p) for p in points]
    return all(all(torch.equal(a, b) for a, b in zip(pats[0], q)) for q in pats[1:])


# -- ICNN ------------------------------------------------------------------


def test_icnn_zero_params_is_zero():
    net = DenseICNN(3, (4, 4)).double()
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    for x in np.random.default_rng(0).standard_normal((5, 3)):
        assert icnn_forward(net, x) == 0.0


def test_icnn_single_layer_identity():
    net = DenseICNN(1, (1,)).double()
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
        net.wx[0].weight.fill_(1.0)
        net.wz[0].weight.fill_(1.0)
    for x in (0.3, 2.0, 7.5):
        assert icnn_forward(net, [x]) == pytest.approx(x)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_dense_icnn_midpoint_convex(seed):
    torch.manual_seed(seed)
    net = DenseICNN(5, (16, 16, 16)).double()
    assert count_midpoint_violations(torch_batch_fn(net, (5,)), (5,), 1000, seed=seed, low=-3, high=3) == 0


def test_conv_icnn_midpoint_convex():
    torch.manual_seed(3)
    net = ConvICNN((10, 10), channels=6, n_layers=3, kernel=3).double()
    assert count_midpoint_violations(torch_batch_fn(net, (10, 10)), (10, 10), 2000, seed=1) == 0


def test_convex_part_is_mu_strongly_convex():
    reg = dense_reg(mu=0.3)
    f = lambda xs: reg.convex_value(torch.as_tensor(xs)).detach().numpy()  # noqa: E731
    assert count_midpoint_violations(f, (6,), 2000, seed=2, mu=0.3, low=-2, high=2, tol=1e-9) == 0


def test_negative_weight_raises():
    net = DenseICNN(2, (3, 3))
    with torch.no_grad():
        net.wz[0].weight[0, 0] = -0.1
    with pytest.raises(ConvexityError, match="convexity constraint violated"):
        net(torch.zeros(1, 2))
    net.constrained = False
    net(torch.zeros(1, 2))


def test_projection():
    net = DenseICNN(2, (3, 3))
    with torch.no_grad():
        net.wz[0].weight[0, 0] = -0.3
    before = [w.clone() for w in net.z_weights()]
    project_icnn_weights(net)
    assert float(net.wz[0].weight.detach()[0, 0]) == 0.0
    once = [w.clone() for w in net.z_weights()]
    project_icnn_weights(net)
    assert all(torch.equal(a, b) for a, b in zip(once, net.z_weights()))
    assert torch.equal(once[1], before[1])
    reg = RegularizerCNC(net, None, 0.1, (2,), (1,))
    assert project_regularizer(reg) is reg


# -- smooth nets -----------------------------------------------------------


def test_smoothnet_zero_weights_constant():
    net = DenseSmoothNet(3, (4,), 2).double()
    with torch.no_grad():
        net.layers[0].weight.zero_()
        net.layers[0].bias.fill_(0.7)
        net.layers[1].weight.fill_(1.0)
        net.layers[1].bias.fill_(-0.2)
    expect = 4 * 0.7 / (1 + math.exp(-0.7)) - 0.2
    for x in np.random.default_rng(0).standard_normal((3, 3)):
        assert np.allclose(smoothnet_forward(net, x), [expect, expect])


def test_silu_constants_on_grid():
    t = torch.linspace(-20, 20, 400_001, dtype=torch.float64, requires_grad=True)
    (d1,) = torch.autograd.grad(torch.nn.functional.silu(t).sum(), t, create_graph=True)
    (d2,) = torch.autograd.grad(d1.sum(), t)
    assert float(d1.detach().abs().max()) == pytest.approx(SILU_D1_SUP, abs=1e-6)
    assert float(d2.abs().max()) == pytest.approx(SILU_D2_SUP, abs=1e-6)


def test_hessian_symmetry_smoothnet():
    torch.manual_seed(0)
    net = DenseSmoothNet(4, (10, 10), 3).double()
    u = torch.randn(3, dtype=torch.float64)

    def grad(x):
        x = torch.as_tensor(x).requires_grad_(True)
        (g,) = torch.autograd.grad((net(x[None])[0] * u).sum(), x)
        return g.numpy()

    rng = np.random.default_rng(0)
    h = 1e-5
    for _ in range(5):
        x = rng.standard_normal(4)
        H = np.stack([(grad(x + h * e) - grad(x - h * e)) / (2 * h) for e in np.eye(4)], axis=1)
        assert np.abs(H - H.T).max() <= 1e-3 * max(1.0, np.abs(H).max())


def test_lipschitz_curvature_base_cases():
    net = DenseSmoothNet(3, (), 2).double()
    w = net.layers[0].weight.detach().numpy()
    lip, beta = bound_lipschitz_curvature(net)
    assert lip == pytest.approx(np.linalg.svd(w, compute_uv=False)[0])
    assert beta == 0.0
    ident = DenseSmoothNet(3, (), 3, activate_last=True).double()
    with torch.no_grad():
        ident.layers[0].weight.copy_(torch.eye(3))
    lip, beta = bound_lipschitz_curvature(ident)
    assert lip == pytest.approx(SILU_D1_SUP)
    assert beta == pytest.approx(SILU_D2_SUP)


def test_lipschitz_curvature_bounds_sampled_ratios():
    torch.manual_seed(1)
    net = DenseSmoothNet(3, (8,), 2).double()
    lip, beta = bound_lipschitz_curvature(net)
    rng = np.random.default_rng(0)
    a = torch.as_tensor(rng.uniform(-3, 3, (10_000, 3)))
    b = torch.as_tensor(rng.uniform(-3, 3, (10_000, 3)))
    d = (a - b).norm(dim=1)
    with torch.no_grad():
        val_ratio = (net(a) - net(b)).norm(dim=1) / d
    jac = lambda x: torch.func.vmap(torch.func.jacrev(lambda v: net(v[None])[0]))(x)  # noqa: E731
    jac_ratio = torch.linalg.matrix_norm(jac(a) - jac(b), ord=2) / d
    assert float(val_ratio.max()) <= lip
    assert float(jac_ratio.detach().max()) <= beta


def test_conv_bounds_are_positive_and_finite():
    reg = conv_reg()
    lip, beta = reg.modulus_bound()
    assert 0 < lip < math.inf and 0 < beta < math.inf
    l_c, b_c = bound_lipschitz_curvature(reg.convex)
    assert l_c > 0 and math.isnan(b_c)


# -- IWCNN and the regularizer --------------------------------------------


def test_iwcnn_identity_inner_equals_outer():
    torch.manual_seed(0)
    outer = DenseICNN(3, (6,)).double()
    inner = DenseSmoothNet(3, (), 3).double()
    with torch.no_grad():
        inner.layers[0].weight.copy_(torch.eye(3))
        inner.layers[0].bias.zero_()
    net = IWCNN(outer, inner)
    y = np.array([0.3, -1.2, 2.0])
    assert iwcnn_forward(net, y) == icnn_forward(outer, y)


def test_iwcnn_shape_mismatch():
    with pytest.raises(ValueError):
        IWCNN(DenseICNN(3, (4,)), DenseSmoothNet(2, (4,), 5))


def test_iwcnn_certificate_holds():
    for seed in range(5):
        reg = RegularizerCNC(None, random_iwcnn(seed), 0.0, (1,), (6,))
        cert = certify_weak_convexity(reg, 3000, seed=seed, box=(-2.0, 2.0))
        assert cert.holds
        assert 0 <= cert.empirical_rho <= cert.rho_bound


def test_iwcnn_can_be_nonconvex():
    # random search over small IWCNNs for a midpoint-convexity violation
    found = False
    for seed in range(20):
        f = torch_batch_fn(random_iwcnn(seed), (6,))
        if count_midpoint_violations(f, (6,), 500, seed=seed, low=-2, high=2) > 0:
            found = True
            break
    assert found


def test_certificate_for_convex_weak_part_is_zero():
    torch.manual_seed(0)
    inner = DenseSmoothNet(4, (), 4).double()
    with torch.no_grad():
        inner.layers[0].weight.copy_(torch.eye(4))
        inner.layers[0].bias.zero_()
    reg = RegularizerCNC(None, IWCNN(DenseICNN(4, (8, 8)).double(), inner), 0.0, (1,), (4,))
    cert = certify_weak_convexity(reg, 3000)
    assert cert.empirical_rho <= 1e-6


def test_negative_square_stub_modulus():
    class NegSquare(torch.nn.Module):
        def forward(self, y):
            return -(y * y).sum(dim=1)

    f = torch_batch_fn(NegSquare(), (3,))
    rho = estimate_weak_convexity_modulus(f, (-np.ones(3), np.ones(3)), 100_000, batched=True)
    assert rho == pytest.approx(1.0, rel=0.02)


def test_regularizer_value_examples(rng):
    reg = RegularizerCNC(None, None, 1.0, (2, 2), (3,))
    x = np.full((2, 2), 1.0)
    assert regularizer_value(reg, x, rng.standard_normal(3)) == pytest.approx(4.0)
    gx, gy = regularizer_gradient(reg, x, np.zeros(3))
    assert np.array_equal(gx, 2 * x) and not gy.any()
    assert reg.n_params() == 1


def test_regularizer_decomposition_and_additivity(rng):
    reg = dense_reg()
    x, y = rng.standard_normal(6), rng.standard_normal(4)
    total = regularizer_value(reg, x, y)
    parts = icnn_forward(reg.convex, x) + reg.mu * float(x @ x) + iwcnn_forward(reg.weak, y)
    assert total == pytest.approx(parts, rel=1e-12)
    z = np.zeros(4)
    x2 = rng.standard_normal(6)
    d1 = regularizer_value(reg, x, y) - regularizer_value(reg, x, z)
    d2 = regularizer_value(reg, x2, y) - regularizer_value(reg, x2, z)
    assert d1 == pytest.approx(d2, abs=1e-12)


def fd_check(reg, x, y, rng, h=1e-6):
    """Directional central differences vs the analytic gradient, same activation pattern."""
    gx, gy = regularizer_gradient(reg, x, y)
    for _ in range(3):
        vx, vy = rng.standard_normal(x.shape), rng.standard_normal(y.shape)
        nets_x = [reg.convex] if reg.convex is not None else []
        if not all(same_pattern(n, x + h * vx, x - h * vx, x) for n in nets_x):
            return False
        if not same_pattern(reg.weak.outer, *(reg.weak.inner(torch.as_tensor(p)[None])[0].detach()
                                               for p in (y + h * vy, y - h * vy, y))):
            return False
        fd = (regularizer_value(reg, x + h * vx, y + h * vy) - regularizer_value(reg, x - h * vx, y - h * vy)) / (2 * h)
        an = float(np.sum(gx * vx) + np.sum(gy * vy))
        assert abs(fd - an) <= 1e-4 * max(abs(an), 1e-3)
    return True


@pytest.mark.parametrize("make", [dense_reg, conv_reg])
def test_regularizer_gradient_finite_differences(make):
    reg = make()
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(20):
        x = rng.standard_normal(reg.image_shape)
        y = rng.standard_normal(reg.data_shape)
        checked += fd_check(reg, x, y, rng)
    assert checked >= 15


def test_chain_rule_toy():
    class Square(DenseSmoothNet):
        def __init__(self):
            super().__init__(1, (), 1)

        def forward(self, y):
            return y.reshape(y.shape[0], -1) ** 2

    torch.manual_seed(0)
    outer = DenseICNN(1, (4,)).double()
    reg = RegularizerCNC(None, IWCNN(outer, Square()), 0.0, (1,), (1,))
    for y in (0.4, -1.3, 2.2):
        _, gy = regularizer_gradient(reg, np.zeros(1), np.array([y]))
        u = torch.tensor([[y * y]], dtype=torch.float64, requires_grad=True)
        (hp,) = torch.autograd.grad(outer(u).sum(), u)
        assert gy[0] == pytest.approx(2 * y * float(hp), rel=1e-12)


def test_shape_validation():
    reg = dense_reg()
    with pytest.raises(ValueError):
        reg.value(np.zeros(5), np.zeros(4))


# -- checkpoints -----------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, rng):
    from cncreg.training import OptimizerState

    reg = conv_reg().float()
    opt = OptimizerState({n: torch.rand_like(p) for n, p in reg.named_parameters()}, step=7)
    save_checkpoint(reg, tmp_path, {"note": "x"}, opt)
    back, man, opt2 = load_checkpoint(tmp_path)
    assert int(man["n_params"]) == reg.n_params()
    assert man["note"] == "x"
    for (n, a), (_, b) in zip(reg.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), n
    assert opt2.step == 7
    assert all(torch.equal(opt.sq_avg[n], opt2.sq_avg[n]) for n in opt.sq_avg)
    x, y = rng.standard_normal((8, 8)), rng.standard_normal((4, 6))
    assert back.value(x, y) == reg.value(x, y)


def test_load_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope")
