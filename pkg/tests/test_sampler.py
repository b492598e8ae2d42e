import math

import pytest
import torch

from mfm.config import IntegratorConfig
from mfm.datagen import Population
from mfm.errors import IntegrationError
from mfm.model import build_flow_model
from mfm.sampler import integrate, push_forward
from helpers import toy_pairs

SMALL = dict(hidden_width=16, n_hidden=2, embed_dim=4, gcn_width=16, embedding_dim=8, n_gcn_layers=2)


def linear(x, t):
    return x


def test_constant_field_is_exact():
    c = torch.tensor([0.5, -2.0], dtype=torch.float64)
    x0 = torch.randn(7, 2, dtype=torch.float64)
    for scheme in ("euler", "rk4"):
        for steps in (1, 3, 64):
            out = integrate(lambda x, t: c.expand_as(x), x0, IntegratorConfig(scheme=scheme, steps=steps))
            torch.testing.assert_close(out, x0 + c, rtol=0, atol=1e-12)


def test_single_euler_step():
    x0 = torch.tensor([[1.0, 2.0]], dtype=torch.float64)
    out = integrate(lambda x, t: x * 3 + t, x0, IntegratorConfig(steps=1))
    assert out.tolist() == [[4.0, 8.0]]


def test_euler_first_order_and_rk4_accuracy():
    x0 = torch.tensor([[1.0, -0.5]], dtype=torch.float64)
    exact = math.e * x0
    err = {s: float((integrate(linear, x0, IntegratorConfig(steps=s)) - exact).abs().max()) for s in (50, 100)}
    assert 0.4 <= err[100] / err[50] <= 0.6
    rk4 = integrate(linear, x0, IntegratorConfig(scheme="rk4", steps=100))
    assert float((rk4 - exact).abs().max()) < 1e-6


def test_trajectory_endpoints_match():
    x0 = torch.randn(4, 2, dtype=torch.float64)
    for scheme in ("euler", "rk4"):
        plain = integrate(linear, x0, IntegratorConfig(scheme=scheme, steps=10))
        final, traj = integrate(linear, x0, IntegratorConfig(scheme=scheme, steps=10, record_trajectory=True))
        assert traj.shape == (11, 4, 2)
        assert torch.equal(traj[0], x0) and torch.equal(traj[-1], final) and torch.equal(final, plain)


def test_blowup_reports_step():
    x0 = torch.tensor([[1.0]], dtype=torch.float64)
    with pytest.raises(IntegrationError) as info:
        integrate(lambda x, t: x * 1e308, x0, IntegratorConfig(steps=10))
    assert info.value.step == 2


def _model(mode="MFM"):
    return build_flow_model(mode, 2, toy_pairs(3, 12), k=3, **SMALL)


def test_zero_output_layer_is_identity():
    model = _model()
    model.vf.out.zero_()
    src = toy_pairs(1, 15, seed=4, split="test", start_id=50)[0].source
    out = push_forward(model, src)
    assert torch.equal(out.points, src.points)
    assert (out.population_id, out.split, out.label) == (50, "test", "p50")


def test_permutation_equivariance_and_duplicates():
    model = _model()
    src = toy_pairs(1, 15, seed=5)[0].source
    src_dup = Population(torch.cat([src.points, src.points[:1]]), 0)
    perm = torch.randperm(15, generator=torch.Generator().manual_seed(0))
    cfg = IntegratorConfig(steps=20)
    out = push_forward(model, src, cfg).points
    out_perm = push_forward(model, Population(src.points[perm], 0), cfg).points
    torch.testing.assert_close(out_perm, out[perm], rtol=0, atol=1e-12)
    dup = push_forward(model, src_dup, cfg).points
    assert torch.equal(dup[0], dup[-1])


def test_rows_use_full_population_embedding():
    model = _model()
    src = toy_pairs(1, 15, seed=6)[0].source
    rows = torch.tensor([2, 5, 11])
    cfg = IntegratorConfig(steps=5)
    assert torch.equal(push_forward(model, src, cfg, rows).points, push_forward(model, src, cfg).points[rows])
