import numpy as np
import pytest

from attractor import tensor as T
from attractor.checks import check_param_gradients, check_op_gradient
from attractor.errors import ContractError
from attractor.nn import (ADDITIVE, CONCAT, INITIAL_ONLY, AttractorCell, Backbone,
                          TiedEmbedding, TransformerBlock)
from attractor.tensor import Tape, Tensor

D, H, FF, L = 8, 2, 16, 6


def block(seed=0, out_std=0.3, causal=True):
    return TransformerBlock(D, H, FF, L, np.random.default_rng(seed), np.float64, causal, out_std)


def test_causality_probe_is_exact():
    rng = np.random.default_rng(0)
    b = block()
    h = rng.standard_normal((2, L, D))
    base = b(Tensor._wrap(h)).data
    for j in range(L):
        g = h.copy()
        g[:, j] += 1.0
        assert np.array_equal(b(Tensor._wrap(g)).data[:, :j], base[:, :j])


def test_bidirectional_flag_lets_future_positions_influence_the_past():
    rng = np.random.default_rng(1)
    b = block(causal=False)
    h = rng.standard_normal((1, L, D))
    g = h.copy()
    g[0, -1] += 1.0
    assert not np.allclose(b(Tensor._wrap(g)).data[0, 0], b(Tensor._wrap(h)).data[0, 0])


def test_zero_output_projections_make_the_block_an_identity():
    h = np.random.default_rng(2).standard_normal((2, L, D))
    assert np.array_equal(block(out_std=0.0)(Tensor._wrap(h)).data, h)


def test_sequence_longer_than_max_len_is_rejected():
    with pytest.raises(ContractError):
        block()(Tensor._wrap(np.zeros((1, L + 1, D))))


def test_block_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    b = block(seed=3)
    h = rng.standard_normal((2, 4, D))
    W = rng.standard_normal(h.shape)

    def lg():
        tape = Tape()
        with tape:
            out = b(Tensor._wrap(h))
        tape.backward(out, W)

    worst, where = check_param_gradients(b.parameters(), lg, lambda: float(np.sum(b(Tensor._wrap(h)).data * W)),
                                         samples=10)
    assert worst < 1e-4, where
    assert check_op_gradient(lambda x: b(x), [h]) < 1e-4


def test_empty_backbone_is_rms_norm():
    rng = np.random.default_rng(4)
    bb = Backbone(D, H, FF, 0, L, rng, np.float64)
    x = rng.standard_normal((1, L, D))
    assert np.array_equal(bb(Tensor._wrap(x)).data, T.rms_norm(Tensor._wrap(x), bb.norm_gain).data)


def test_decoded_proposal_is_a_distribution():
    rng = np.random.default_rng(5)
    emb = TiedEmbedding(13, D, rng, np.float64)
    bb = Backbone(D, H, FF, 2, L, rng, np.float64, out_std=0.3)
    y0 = bb(emb.embed(rng.integers(0, 13, (2, L))))
    p = T.softmax(emb.unembed(y0)).data
    assert np.allclose(p.sum(-1), 1.0, atol=1e-6)


def test_weight_tying_uses_one_storage():
    rng = np.random.default_rng(6)
    emb = TiedEmbedding(5, D, rng, np.float64)
    tok = np.array([[1, 2]])
    y = Tensor._wrap(np.ones((1, 2, D)))
    e0, u0 = emb.embed(tok).data.copy(), emb.unembed(y).data.copy()
    emb.weight.data[1:3] += 1.0
    assert not np.array_equal(emb.embed(tok).data, e0)
    assert not np.array_equal(emb.unembed(y).data, u0)


def cell(injection, seed=7):
    return AttractorCell(D, H, FF, 1, L, np.random.default_rng(seed), np.float64, injection, out_std=0.3)


def test_initial_only_ignores_the_proposal():
    rng = np.random.default_rng(8)
    c = cell(INITIAL_ONLY)
    y = Tensor._wrap(rng.standard_normal((1, L, D)))
    a = c(y, Tensor._wrap(rng.standard_normal((1, L, D)))).data
    b = c(y, Tensor._wrap(rng.standard_normal((1, L, D)))).data
    assert np.array_equal(a, b)


def test_additive_at_zero_state_is_the_cell_at_the_proposal():
    rng = np.random.default_rng(9)
    c = cell(ADDITIVE)
    y0 = Tensor._wrap(rng.standard_normal((1, L, D)))
    assert np.array_equal(c(Tensor._wrap(np.zeros((1, L, D))), y0).data, c.body(y0).data)


def test_concat_starts_as_additive():
    rng = np.random.default_rng(10)
    add, cat = cell(ADDITIVE, 11), cell(CONCAT, 11)
    y, y0 = (Tensor._wrap(rng.standard_normal((1, L, D))) for _ in range(2))
    assert np.allclose(add(y, y0).data, cat(y, y0).data, atol=1e-12)
    assert cat.inject_proj.shape == (2 * D, D)


def test_mode_width_mismatch_is_contract_error():
    with pytest.raises(ContractError):
        cell(ADDITIVE)(Tensor._wrap(np.zeros((1, L, D))), Tensor._wrap(np.zeros((1, L - 1, D))))


@pytest.mark.parametrize("injection", [ADDITIVE, CONCAT])
def test_cell_gradients_wrt_state_and_proposal(injection):
    rng = np.random.default_rng(12)
    c = cell(injection)
    args = [rng.standard_normal((1, 4, D)), rng.standard_normal((1, 4, D))]
    assert check_op_gradient(lambda y, y0: c(y, y0), args) < 1e-4


def test_parameter_count_does_not_depend_on_refinement_steps():
    c = cell(ADDITIVE)
    n = c.num_parameters()
    y = Tensor._wrap(np.zeros((1, L, D)))
    y0 = Tensor._wrap(np.ones((1, L, D)))
    for _ in range(5):
        y = c(y, y0)
    assert c.num_parameters() == n
    assert len({id(p) for p in c.parameters()}) == len(c.parameters())
