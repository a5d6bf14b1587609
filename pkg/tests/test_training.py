import numpy as np
import pytest

from attractor.checks import tiny_spec
from attractor.errors import ConfigError, NumericError
from attractor.models import ATTRACTOR, DEQ, LOOPED, PLAIN, build_model
from attractor.tasks import TaskBatch
from attractor.tensor import Parameter
from attractor.training import (AdamState, DeepSupervisionState, Trainer, TrainConfig, adamw_step,
                                clip_gradients, lr_at)


def test_trapezoid_schedule_examples():
    cfg = TrainConfig(steps=100, lr=1.0, warmup=0.0, cooldown=0.5)
    assert lr_at(0, cfg) == 1.0 and lr_at(50, cfg) == 1.0 and lr_at(100, cfg) == 0.0
    assert lr_at(75, cfg) == pytest.approx(0.5)


def test_schedule_is_continuous_at_segment_boundaries():
    cfg = TrainConfig(steps=1000, lr=2.0, warmup=0.1, cooldown=0.3)
    slope = 2.0 / 100
    for b in (100, 700):
        assert abs(lr_at(b, cfg) - lr_at(b - 1, cfg)) <= slope + 1e-12
        assert abs(lr_at(b + 1, cfg) - lr_at(b, cfg)) <= slope + 1e-12
    assert lr_at(0, cfg) == 0.0


def test_config_validation_names_the_key():
    with pytest.raises(ConfigError, match="train.lr"):
        TrainConfig(lr=-1.0)
    with pytest.raises(ConfigError, match="train.cooldown"):
        TrainConfig(warmup=0.6, cooldown=0.6)


def _adam(params, grads, steps, cfg, lr):
    state = AdamState.for_params(params)
    for _ in range(steps):
        adamw_step(params, grads, state, cfg, lr)
    return state


def test_zero_gradients_leave_parameters_unchanged():
    p = Parameter(np.arange(4.0))
    _adam([p], [np.zeros(4)], 10, TrainConfig(), 0.1)
    assert np.array_equal(p.data, np.arange(4.0))


def test_constant_gradient_gives_sign_like_steps_of_size_lr():
    p = Parameter(np.zeros(3))
    _adam([p], [np.array([3.0, -0.5, 1e-3])], 200, TrainConfig(), 0.01)
    before = p.data.copy()
    _adam([p], [np.array([3.0, -0.5, 1e-3])], 1, TrainConfig(), 0.01)
    assert np.allclose(np.abs(p.data - before), 0.01, rtol=1e-6)


def test_quadratic_bowl_converges_to_the_optimum():
    target = np.array([1.5, -2.0, 0.25])
    p = Parameter(np.zeros(3))
    cfg = TrainConfig(steps=2000, lr=0.05)
    state = AdamState.for_params([p])
    for step in range(2000):
        adamw_step([p], [2 * (p.data - target)], state, cfg, lr_at(step, cfg))
    assert np.max(np.abs(p.data - target)) < 1e-6


def test_weight_decay_is_decoupled():
    p = Parameter(np.full(2, 2.0))
    _adam([p], [np.zeros(2)], 1, TrainConfig(weight_decay=0.1), 0.5)
    assert np.allclose(p.data, 2.0 * (1 - 0.05))


def test_clip_preserves_direction_and_bounds_norm():
    grads = [np.array([3.0, 4.0]), np.array([12.0])]
    clipped, norm = clip_gradients(grads, 1e-12)
    assert norm == 13.0
    flat = np.concatenate(clipped)
    assert np.linalg.norm(flat) <= 1e-12 * (1 + 1e-9)
    assert np.allclose(flat / np.linalg.norm(flat), np.array([3.0, 4.0, 12.0]) / 13.0)
    same, _ = clip_gradients(grads, 100.0)
    assert all(np.array_equal(a, b) for a, b in zip(same, grads))


def _batch(vocab=11, length=6, seed=0, batch=1):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, vocab, (batch, length))
    return TaskBatch(x, rng.integers(0, vocab, (batch, length)), np.ones((batch, length), bool))


def test_zero_learning_rate_leaves_parameters_bit_unchanged():
    m = build_model(tiny_spec(out_std=0.3), 0)
    before = {k: v.copy() for k, v in m.state_dict().items()}
    tr = Trainer(m, TrainConfig(steps=10, lr=0.0))
    rec = tr.train_step(_batch())
    assert rec.lr == 0.0 and tr.step == 1
    assert all(np.array_equal(before[k], v) for k, v in m.state_dict().items())


def test_non_finite_loss_aborts_with_the_step_index():
    m = build_model(tiny_spec(family=PLAIN, out_std=0.3), 0)
    m.embed.weight.data[0, 0] = np.nan
    tr = Trainer(m, TrainConfig(steps=10))
    tr.step = 7
    with pytest.raises(NumericError, match="step 7") as err:
        tr.train_step(TaskBatch(np.zeros((1, 3), int), np.zeros((1, 3), int), np.ones((1, 3), bool)))
    assert err.value.step == 7


def test_record_reports_solver_and_memory_statistics():
    tr = Trainer(build_model(tiny_spec(out_std=0.3), 0), TrainConfig(steps=10, rho_interval=1))
    rec = tr.train_step(_batch(batch=2))
    assert rec.iters_fwd >= 1 and rec.iters_bwd == 1 and rec.act_peak > 0
    assert rec.flops_backbone > 0 and rec.flops_cell > 0
    assert 0 <= rec.internalization_dist and 0 < rec.rho_estimate < 1


@pytest.mark.parametrize("family", [ATTRACTOR, LOOPED, PLAIN, DEQ])
def test_single_example_is_memorised(family):
    spec = tiny_spec(family=family, d=32, d_ff=64, heads=2, out_std=0.05 if family == DEQ else 0.0)
    tr = Trainer(build_model(spec, 0), TrainConfig(steps=500, lr=3e-3))
    batch = _batch()
    for _ in range(500):
        rec = tr.train_step(batch)
    assert rec.loss < 0.01


def test_training_is_deterministic():
    def run():
        tr = Trainer(build_model(tiny_spec(out_std=0.1), 3), TrainConfig(steps=5))
        return [tr.train_step(_batch(seed=s, batch=2)) for s in range(5)]

    assert repr(run()) == repr(run())


def _reasoning(**kw):
    return build_model(tiny_spec(deep_supervision=True, causal=False, pos_embedding=True, **kw), 0,
                       np.float64)


def test_step_zero_state_is_the_learned_embedding_broadcast():
    m = _reasoning()
    state = DeepSupervisionState(m.initial_state(3, 5))
    assert state.y.shape == (3, 5, 16)
    assert np.array_equal(state.y, np.broadcast_to(m.y_init.data, (3, 5, 16)))
    assert np.array_equal(state.z, np.broadcast_to(m.z_init.data, (3, 5, 16)))


def test_supervision_steps_are_detached_from_each_other():
    m = _reasoning(out_std=0.2)
    tr = Trainer(m, TrainConfig(steps=4, lr=0.0))
    b = _batch()
    state = DeepSupervisionState(m.initial_state(1, 6))
    _, _, nxt = tr.deep_supervision_step(b.inputs, b.targets, state, 0.0)
    assert isinstance(nxt.state, np.ndarray) and nxt.state.base is None
    _, _, after = tr.deep_supervision_step(b.inputs, b.targets, nxt, 0.0)
    grads = [p.grad.copy() if p.grad is not None else None for p in tr.params]
    # the same second step from a fresh copy of the carried state gives identical gradients
    _, _, again = tr.deep_supervision_step(b.inputs, b.targets, DeepSupervisionState(nxt.state.copy()), 0.0)
    for g, p in zip(grads, tr.params):
        assert (g is None and p.grad is None) or np.array_equal(g, p.grad)
    assert np.array_equal(after.state, again.state)


def test_deep_supervision_train_step_runs_every_supervision_step():
    m = _reasoning(out_std=0.2)
    tr = Trainer(m, TrainConfig(steps=4, supervision_steps=3))
    rec = tr.train_step(_batch(batch=2))
    assert np.isfinite(rec.loss) and rec.iters_bwd == m.spec.backward.k
    assert tr.opt.t == 3
