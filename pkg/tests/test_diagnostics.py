import json

import numpy as np
import pytest

from attractor.checks import peak_activations, tiny_spec
from attractor.diagnostics import (COLUMNS, ActivationCounter, FlopsCounter, TrainRecord, count_activations,
                                   export_metrics, internalization_metrics, pca2_trajectory, read_metrics,
                                   records_from_rows)
from attractor.errors import ContractError
from attractor.models import LOOPED, build_model
from attractor.solver import PICARD, SolverConfig
from attractor.tasks import TaskBatch
from attractor.tensor import Tape, flops_scope, observe

RNG = np.random.default_rng(0)
TOKENS = RNG.integers(0, 11, (2, 8))
TARGETS = RNG.integers(0, 11, (2, 8))


def _records(n=3):
    f32 = lambda x: float(np.float32(x))
    return [TrainRecord(step=i, loss=f32(1.0 / (i + 1)), iters_fwd=6 + i, iters_bwd=1,
                        internalization_dist=f32(0.1 * i), act_peak=100 * i, flops_backbone=10 ** 9 + i,
                        flops_cell=7 * i, lr=f32(3e-3), grad_norm=f32(0.3),
                        rho_estimate=float("nan")) for i in range(n)]


def test_counters_track_peak_and_reject_underflow():
    mem = ActivationCounter()
    mem.allocate(5)
    mem.allocate(3)
    mem.free(6)
    assert (mem.current, mem.peak) == (2, 8)
    with pytest.raises(ContractError):
        mem.free(3)
    flops = FlopsCounter()
    flops.add("cell", 4)
    flops.add("cell", 6)
    assert flops.get("cell") == 10 and flops.get("backbone") == 0 and flops.total == 10


def test_empty_tape_holds_no_activations():
    assert count_activations(Tape()) == 0


@pytest.mark.parametrize("fmt", ["csv", "jsonl"])
def test_export_round_trip(tmp_path, fmt):
    recs = _records()
    path = tmp_path / f"m.{fmt}"
    export_metrics(recs, path, fmt)
    back = records_from_rows(read_metrics(path))
    assert len(back) == len(recs)
    for a, b in zip(back, recs):
        for col in COLUMNS:
            x, y = getattr(a, col), getattr(b, col)
            if isinstance(y, int):
                assert x == y and isinstance(x, int)
            else:
                assert np.float32(x) == np.float32(y) or (np.isnan(x) and np.isnan(y))
    export_metrics(recs, tmp_path / f"again.{fmt}", fmt)
    assert path.read_bytes() == (tmp_path / f"again.{fmt}").read_bytes()


def test_empty_export_is_header_only(tmp_path):
    export_metrics([], tmp_path / "e.csv", "csv")
    assert (tmp_path / "e.csv").read_text().strip() == ",".join(COLUMNS)


def test_floats_keep_nine_significant_digits(tmp_path):
    rec = _records(2)[1]
    rec.loss = float(np.float32(1 / 3))
    export_metrics([rec], tmp_path / "m.jsonl", "jsonl")
    row = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])
    assert np.float32(row["loss"]) == np.float32(1 / 3)
    assert row["rho_estimate"] == "nan"


def test_export_to_unwritable_path_names_it(tmp_path):
    (tmp_path / "blocker").write_text("")
    with pytest.raises(OSError, match="blocker"):
        export_metrics(_records(), tmp_path / "blocker" / "m.csv", "csv")


def test_pca_of_collinear_trajectory_is_rank_one():
    direction = RNG.standard_normal(16)
    traj = [np.broadcast_to(t * direction, (1, 3, 16)).copy() for t in (0.0, 1.0, 1.5, 1.75, 1.875)]
    pts = pca2_trajectory(traj)
    assert pts.shape == (5, 2)
    spread = np.ptp(pts[:, 0])
    assert np.max(np.abs(pts[:, 1])) <= 1e-6 * spread


def test_pca_projection_never_expands_distances():
    traj = [RNG.standard_normal((1, 2, 8)) for _ in range(6)]
    pts = pca2_trajectory(traj, position=0)
    X = np.stack([s[0, 0] for s in traj])
    for i in range(6):
        for j in range(6):
            assert np.linalg.norm(pts[i] - pts[j]) <= np.linalg.norm(X[i] - X[j]) + 1e-12


def test_pca_of_converged_trajectory_ends_still():
    m = build_model(tiny_spec(out_std=0.3, solver=SolverConfig(PICARD, tol=1e-8, t_max=200, t_min=0)),
                    0, np.float64)
    out = m.forward(TOKENS, keep_trajectory=True)
    pts = pca2_trajectory(out.solver.trajectory)
    scale = np.ptp(pts[:, 0])
    assert np.linalg.norm(pts[-1] - pts[-2]) <= 10 * 1e-8 * max(scale, 1.0) * np.sqrt(16)


def test_pca_needs_three_iterates():
    with pytest.raises(ContractError):
        pca2_trajectory([np.zeros((1, 1, 2))] * 2)


def test_attractor_forward_flops_decompose_exactly():
    m = build_model(tiny_spec(out_std=0.3, solver=SolverConfig(PICARD, tol=1e-8, t_max=30, t_min=0)), 0)
    y0 = m.proposal(TOKENS)
    single = FlopsCounter()
    with observe(flops=single):
        m.proposal(TOKENS)
        with flops_scope("cell"):
            m.cell(y0, y0)
    total = FlopsCounter()
    with observe(flops=total):
        out = m.forward(TOKENS)
    k = out.solver.iterations
    assert total.get("backbone") == single.get("backbone")
    assert total.get("cell") == k * single.get("cell")
    # Picard overhead is one relative residual (3 flops per element) per iteration
    assert total.get("solver") == k * 3 * y0.size


def test_observers_never_change_outputs():
    m = build_model(tiny_spec(out_std=0.3), 0)
    plain = m.forward(TOKENS).logits
    with observe(memory=ActivationCounter(), flops=FlopsCounter()):
        watched = m.forward(TOKENS).logits
    assert np.array_equal(plain, watched)
    traced = m.forward(TOKENS, keep_trajectory=True).logits
    assert np.array_equal(plain, traced)


def test_looped_activation_counts_differ_by_per_iteration_cost():
    def peak(T):
        return peak_activations(build_model(tiny_spec(family=LOOPED, looped_T=T), 0), TOKENS, TARGETS)

    p2, p4, p6 = peak(2), peak(4), peak(6)
    assert p4 - p2 == p6 - p4 > 0


def test_attractor_peak_is_independent_of_iteration_budget():
    def peak(t_max):
        spec = tiny_spec(out_std=0.3, solver=SolverConfig(tol=1e-12, t_max=t_max, t_min=4))
        return peak_activations(build_model(spec, 0), TOKENS, TARGETS)

    assert peak(8) == peak(64)


def test_internalization_of_an_identity_cell_is_exact():
    # zero output projections with cell scale 0.5: T(y) = (y + y0) / 2 has y0 as fixed point
    m = build_model(tiny_spec(solver=SolverConfig(tol=1e-6, t_min=3)), 0, np.float64)
    batch = TaskBatch(TOKENS, TARGETS, np.ones(TOKENS.shape, bool))
    rep = internalization_metrics(m, [batch])
    assert rep.distance == 0.0 and rep.iterations == 3 and rep.converged_fraction == 1.0
    assert set(rep.loss_at_T) == {0, 1, 2, 4, 8, "converged"}
    assert all(v == pytest.approx(rep.loss_at_T[0]) for v in rep.loss_at_T.values())


def test_untrained_model_has_positive_distance():
    m = build_model(tiny_spec(out_std=0.3), 0, np.float64)
    rep = internalization_metrics(m, [TaskBatch(TOKENS, TARGETS, np.ones(TOKENS.shape, bool))])
    assert rep.distance > 0


def test_internalization_metrics_reject_plain_models():
    m = build_model(tiny_spec(family="plain"), 0)
    with pytest.raises(ContractError):
        internalization_metrics(m, [TaskBatch(TOKENS, TARGETS, np.ones(TOKENS.shape, bool))])
