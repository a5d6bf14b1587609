import numpy as np
import pytest

from attractor import models
from attractor.checks import (AffineCell, affine_fixed_point, ift_errors, peak_activations,
                              phantom_errors, random_contraction, tiny_spec)
from attractor.diagnostics import ActivationCounter
from attractor.errors import ConfigError, ContractError, ShapeError
from attractor.implicit import (BackwardMode, backward_full_ift, backward_onestep, backward_phantom,
                                spectral_radius_estimate, vjp_cell)
from attractor.models import build_model
from attractor.nn import Module, TransformerBlock
from attractor.solver import PICARD, SolverConfig
from attractor.tensor import Parameter, Tensor, observe

TIGHT = SolverConfig(PICARD, tol=1e-14, t_max=5000, t_min=0)


class ScalarCell(Module):
    """T(y, c) = theta * y + c on a single scalar."""

    def __init__(self, theta):
        self.theta = Parameter(np.array([theta]))

    def __call__(self, y, c):
        return y * self.theta + c


def scalar_setup(theta=0.5, c=1.0):
    cell = ScalarCell(theta)
    y_star = np.array([[c / (1 - theta)]])
    return cell, y_star, np.array([[c]]), np.ones((1, 1))


def test_vjp_of_linear_scalar_cell():
    cell, y_star, c, w = scalar_setup()
    gy, gc, (gtheta,) = vjp_cell(cell, y_star, c, w, [cell.theta])
    assert gy.item() == 0.5 and gc.item() == 1.0 and gtheta.item() == 2.0


def test_vjp_with_zero_cotangent_is_zero():
    cell, y_star, c, _ = scalar_setup()
    gy, gc, (gtheta,) = vjp_cell(cell, y_star, c, np.zeros((1, 1)), [cell.theta])
    assert gy.item() == gc.item() == gtheta.item() == 0.0


def test_vjp_shape_mismatch():
    cell, y_star, c, _ = scalar_setup()
    with pytest.raises(ShapeError):
        vjp_cell(cell, y_star, c, np.ones((1, 2)), [cell.theta])


def test_vjp_of_block_cell_matches_finite_differences():
    rng = np.random.default_rng(0)
    block = TransformerBlock(8, 2, 16, 4, rng, np.float64, out_std=0.3)
    cell = lambda y, c: block(y + c) * 0.5
    y, c, w = (rng.standard_normal((1, 3, 8)) for _ in range(3))
    gy, gc, _ = vjp_cell(cell, y, c, w)
    f = lambda yy, cc: float(np.sum(cell(Tensor._wrap(yy), Tensor._wrap(cc)).data * w))
    h = 1e-6
    for idx in [(0, 0, 0), (0, 1, 3), (0, 2, 7)]:
        e = np.zeros_like(y)
        e[idx] = h
        assert gy[idx] == pytest.approx((f(y + e, c) - f(y - e, c)) / (2 * h), rel=1e-5, abs=1e-8)
        assert gc[idx] == pytest.approx((f(y, c + e) - f(y, c - e)) / (2 * h), rel=1e-5, abs=1e-8)


def test_onestep_on_scalar_cell():
    cell, y_star, c, v = scalar_setup()
    g = backward_onestep(cell, v, y_star, c, [cell.theta])
    assert cell.theta.grad.item() == 2.0 and g.grad_c.item() == 1.0


def test_onestep_equals_full_ift_when_the_state_jacobian_vanishes():
    cell, y_star, c, v = scalar_setup(theta=0.0)
    backward_onestep(cell, v, y_star, c, [cell.theta])
    one = cell.theta.grad.copy()
    cell.theta.grad = None
    backward_full_ift(cell, v, y_star, c, [cell.theta], TIGHT)
    assert np.array_equal(one, cell.theta.grad)


def test_onestep_error_within_neumann_remainder_bound():
    rng = np.random.default_rng(1)
    for _ in range(20):
        L = float(rng.uniform(0.1, 0.45))
        A = random_contraction(6, L, rng)
        cell = AffineCell(A)
        c, v = rng.standard_normal((1, 6)), rng.standard_normal((1, 6))
        y_star = affine_fixed_point(A, c)
        backward_onestep(cell, v, y_star, c, [cell.A])
        one = cell.A.grad.copy()
        cell.A.grad = None
        backward_full_ift(cell, v, y_star, c, [cell.A], TIGHT)
        full = cell.A.grad
        bound = L / (1 - L) * np.linalg.norm(v) * np.linalg.norm(y_star)
        assert np.linalg.norm(one - full) <= bound + 1e-12
        assert np.sum(one * full) / (np.linalg.norm(one) * np.linalg.norm(full)) > 0


def test_phantom_two_step_undamped_is_two_term_neumann():
    cell, y_star, c, v = scalar_setup()
    backward_phantom(cell, v, y_star, c, [cell.theta], k=2, damping=1.0)
    assert cell.theta.grad.item() == pytest.approx(3.0, abs=1e-15)


def test_phantom_converges_geometrically_to_the_exact_gradient():
    errs = []
    for k in (1, 2, 4, 8, 16, 32):
        cell, y_star, c, v = scalar_setup()
        backward_phantom(cell, v, y_star, c, [cell.theta], k=k, damping=1.0)
        errs.append(abs(cell.theta.grad.item() - 4.0))
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-8


def test_phantom_k_zero_is_rejected():
    cell, y_star, c, v = scalar_setup()
    with pytest.raises(ContractError):
        backward_phantom(cell, v, y_star, c, [cell.theta], k=0)
    with pytest.raises(ConfigError, match="backward.k"):
        BackwardMode("phantom", k=0)


def test_phantom_single_undamped_step_is_onestep_bit_for_bit():
    rng = np.random.default_rng(2)
    block = TransformerBlock(8, 2, 16, 4, rng, np.float64, out_std=0.3)
    cell = lambda y, c: block(y + c) * 0.5
    y, c, v = (rng.standard_normal((1, 4, 8)) for _ in range(3))
    params = block.parameters()
    a = backward_onestep(cell, v, y, c, params)
    ga = [p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    b = backward_phantom(cell, v, y, c, params, k=1, damping=1.0)
    assert np.array_equal(a.grad_c, b.grad_c)
    assert all(np.array_equal(x, p.grad) for x, p in zip(ga, params))


def test_phantom_error_shrinks_with_k_on_affine_cells():
    for seed in range(5):
        errs = phantom_errors(seed=seed)
        assert all(b < a for a, b in zip(errs, errs[1:]))


def test_full_ift_on_scalar_cell():
    cell, y_star, c, v = scalar_setup()
    g = backward_full_ift(cell, v, y_star, c, [cell.theta], TIGHT)
    assert g.adjoint.item() == pytest.approx(2.0, abs=1e-12)
    assert cell.theta.grad.item() == pytest.approx(4.0, abs=1e-12)


def test_full_ift_matches_dense_solve_and_bptt():
    dense, bptt = ift_errors(trials=20)
    assert dense < 1e-6 and bptt < 1e-4


def test_adjoint_non_convergence_warns_and_returns_best_iterate():
    cell = AffineCell(1.5 * np.eye(3))
    with pytest.warns(RuntimeWarning, match="adjoint"):
        g = backward_full_ift(cell, np.ones((1, 3)), np.zeros((1, 3)), np.ones((1, 3)), [cell.A],
                              SolverConfig(PICARD, tol=1e-8, t_max=10, t_min=0))
    assert not g.converged and np.all(np.isfinite(cell.A.grad))


def test_spectral_radius_on_affine_cells():
    est = spectral_radius_estimate(AffineCell(0.7 * np.eye(5)), np.zeros((1, 5)), np.ones((1, 5)), 20)
    assert abs(est - 0.7) < 1e-3
    est = spectral_radius_estimate(AffineCell(np.diag([0.9, 0.1])), np.zeros((1, 2)), np.ones((1, 2)), 200)
    assert abs(est - 0.9) < 1e-3


def test_spectral_radius_of_zero_jacobian_is_zero():
    cell = ScalarCell(0.0)
    assert spectral_radius_estimate(cell, np.zeros((1, 1)), np.ones((1, 1)), 10) == 0.0


def test_backbone_gradients_flow_only_through_the_proposal_slot(monkeypatch):
    real = models.implicit_backward

    def zero_proposal_grad(*args, **kw):
        g = real(*args, **kw)
        g.grad_c = np.zeros_like(g.grad_c)
        return g

    monkeypatch.setattr(models, "implicit_backward", zero_proposal_grad)
    m = build_model(tiny_spec(out_std=0.3), 0, np.float64)
    rng = np.random.default_rng(3)
    m.loss_and_grad(rng.integers(0, 11, (2, 6)), rng.integers(0, 11, (2, 6)))
    for name, p in m.backbone.named_parameters():
        assert p.grad is None or not np.any(p.grad), name
    assert any(np.any(p.grad) for p in m.cell.parameters() if p.grad is not None)


def _backward_peak(kind, k=3, t_max=8):
    spec = tiny_spec(out_std=0.3, backward=BackwardMode(kind, k=k),
                     solver=SolverConfig(tol=1e-12, t_max=t_max, t_min=2))
    rng = np.random.default_rng(4)
    return peak_activations(build_model(spec, 0), rng.integers(0, 11, (2, 6)), rng.integers(0, 11, (2, 6)))


@pytest.mark.parametrize("kind", ["onestep", "full_ift"])
@pytest.mark.filterwarnings("ignore:adjoint solve did not converge")
def test_backward_memory_is_constant_in_solver_iterations(kind):
    assert _backward_peak(kind, t_max=4) == _backward_peak(kind, t_max=32)


def test_phantom_memory_grows_linearly_in_k():
    peaks = [_backward_peak("phantom", k=k) for k in (1, 2, 3, 4)]
    steps = np.diff(peaks)
    assert steps[0] > 0 and np.all(steps == steps[0])
