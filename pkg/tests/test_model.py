import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moemos.model import (MoeConfig, expert_forward, expert_utilization, gate_forward, init_model,
                          load_checkpoint, moe_forward, save_checkpoint)
from moemos.numkernel import RngState


def test_init_deterministic(small_cfg):
    a = init_model(small_cfg, RngState(11))
    b = init_model(small_cfg, RngState(11))
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.name == q.name and np.array_equal(p.values, q.values)


def test_experts_get_distinct_streams():
    m = init_model(MoeConfig(n_experts=4, input_dim=8, expert_hidden=(6, 5), expert_out_dim=3), RngState(0))
    firsts = [e[0][0].values for e in m.experts]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not np.array_equal(firsts[i], firsts[j])
    assert len({id(e[0][0]) for e in m.experts}) == 4


def test_biases_zero_and_glorot_bounds(small_model):
    for p in small_model.parameters():
        if p.name.endswith(".b"):
            assert not p.values.any()
        else:
            fan_out, fan_in = p.shape
            assert np.abs(p.values).max() <= np.sqrt(6 / (fan_in + fan_out))


@pytest.mark.parametrize("bad", [dict(n_experts=1), dict(expert_hidden=(4,)), dict(expert_hidden=(4, 4, 4, 4)),
                                 dict(n_classes=1), dict(dropout_rate=1.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        init_model(MoeConfig(**bad), RngState(0))


def test_gate_uniform_when_zeroed(small_model):
    W, b = small_model.gate[0]
    W.values[...] = 0
    assert np.allclose(gate_forward(small_model, np.ones(5)), 1 / 3, rtol=0, atol=1e-15)


def test_gate_two_experts_hand_value():
    m = init_model(MoeConfig(n_experts=2, input_dim=3, expert_hidden=(4, 4), expert_out_dim=2), RngState(0))
    W, b = m.gate[0]
    W.values[...] = 0
    b.values[...] = [np.log(2.0), 0.0]
    assert np.allclose(gate_forward(m, np.array([1.0, -2.0, 3.0])), [2 / 3, 1 / 3], rtol=0, atol=1e-15)


def test_gate_dimension_mismatch(small_model):
    with pytest.raises(ValueError, match="dimension"):
        gate_forward(small_model, np.ones(4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_gate_sums_to_one_and_shift_invariant(seed):
    rng = np.random.default_rng(seed)
    m = init_model(MoeConfig(n_experts=3, input_dim=4, expert_hidden=(3, 3), expert_out_dim=2,
                             n_classes=2), RngState(seed))
    x = rng.uniform(-3, 3, 4)
    g = gate_forward(m, x)
    assert abs(g.sum() - 1) <= 1e-12
    m.gate[0][1].values += rng.uniform(-50, 50)
    assert np.max(np.abs(gate_forward(m, x) - g)) <= 1e-12


def test_expert_eval_ignores_rng(small_model):
    x = np.linspace(-1, 1, 5)
    a = expert_forward(small_model, 1, x, train=False, rng=RngState(1))
    b = expert_forward(small_model, 1, x, train=False, rng=RngState(2))
    assert np.array_equal(a, b)
    c = expert_forward(small_model, 1, x, train=True, rng=RngState(1))
    d = expert_forward(small_model, 1, x, train=True, rng=RngState(2))
    assert not np.array_equal(c, d)


def test_expert_zero_input(small_model):
    assert not expert_forward(small_model, 0, np.zeros(5)).any()


def test_expert_index_out_of_range(small_model):
    with pytest.raises(IndexError):
        expert_forward(small_model, 3, np.zeros(5))


def test_expert_hand_computation():
    m = init_model(MoeConfig(n_experts=2, input_dim=2, expert_hidden=(2, 2), expert_out_dim=2,
                             dropout_rate=0.0, n_classes=2), RngState(0))
    layers = m.experts[0]
    layers[0][0].values[...] = [[1.0, -1.0], [2.0, 0.5]]
    layers[0][1].values[...] = [0.5, -3.0]
    layers[1][0].values[...] = np.eye(2)
    layers[2][0].values[...] = [[1.0, 1.0], [0.0, -2.0]]
    layers[2][1].values[...] = [0.25, 0.0]
    x = np.array([2.0, 1.0])
    # layer 0: [2-1+0.5, 4+0.5-3] = [1.5, 1.5] -> relu same; identity -> [1.5, 1.5]
    # out: [1.5+1.5+0.25, -3.0]
    assert expert_forward(m, 0, x).tolist() == [3.25, -3.0]


def test_one_hot_gate_selects_expert(small_model):
    W, b = small_model.gate[0]
    b.values[...] = [-1e3, 1e3, -1e3]
    x = np.array([0.3, -0.2, 0.1, 0.5, -0.4])
    out = moe_forward(small_model, x)
    assert np.max(np.abs(out.mixed_repr - expert_forward(small_model, 1, x))) <= 1e-9


def test_uniform_gate_averages_constant_experts():
    m = init_model(MoeConfig(n_experts=2, input_dim=3, expert_hidden=(4, 4), expert_out_dim=2), RngState(1))
    m.gate[0][0].values[...] = 0
    v, w = np.array([1.0, 2.0]), np.array([-3.0, 0.5])
    for expert, const in zip(m.experts, (v, w)):
        expert[-1][0].values[...] = 0
        expert[-1][1].values[...] = const
    out = moe_forward(m, np.array([0.1, 0.2, 0.3]))
    assert np.allclose(out.mixed_repr, (v + w) / 2, rtol=0, atol=1e-15)


def test_eval_mos_clamped_train_not():
    rng = np.random.default_rng(0)
    for seed in range(20):
        m = init_model(MoeConfig(n_experts=2, input_dim=3, expert_hidden=(4, 4), expert_out_dim=2), RngState(seed))
        m.mos_head[1].values[...] = rng.uniform(-20, 20)
        X = rng.normal(size=(16, 3)) * 5
        out = m.forward(X)
        assert out.mos_pred.min() >= 1.0 and out.mos_pred.max() <= 5.0
        assert np.array_equal(np.clip(out.mos_raw, 1, 5), out.mos_pred)
    tr = m.forward(X, train=True, rng=RngState(0))
    assert np.array_equal(tr.mos_pred, tr.mos_raw)


def test_mixture_is_linear_in_expert_outputs(small_model):
    rng = np.random.default_rng(3)
    g = rng.dirichlet(np.ones(3), size=4)
    E1, E2 = rng.normal(size=(4, 3, 2)), rng.normal(size=(4, 3, 2))
    mix = lambda E: np.einsum("bn,bnh->bh", g, E)  # noqa: E731
    assert np.allclose(mix(2.0 * E1 - 0.5 * E2), 2.0 * mix(E1) - 0.5 * mix(E2), rtol=0, atol=1e-12)


def test_batched_forward_matches_single(small_model):
    X = np.random.default_rng(1).normal(size=(6, 5))
    batch = small_model.forward(X)
    for i in range(6):
        single = small_model.forward(X[i])
        assert np.allclose(single.class_logits, batch.class_logits[i], rtol=0, atol=1e-12)
        assert single.mos_pred == pytest.approx(batch.mos_pred[i], abs=1e-12)


def test_utilization_examples():
    mean, freq = expert_utilization(np.full((5, 4), 0.25))
    assert mean.tolist() == [0.25] * 4 and freq.tolist() == [1.0, 0.0, 0.0, 0.0]
    mean, freq = expert_utilization(np.eye(3))
    assert np.allclose(mean, 1 / 3, rtol=0, atol=1e-15) and np.allclose(freq, 1 / 3, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        expert_utilization(np.zeros((0, 3)))


@given(st.integers(1, 20), st.integers(2, 6), st.integers(0, 1000))
def test_utilization_vectors_sum_to_one(B, N, seed):
    g = np.random.default_rng(seed).dirichlet(np.ones(N), size=B)
    mean, freq = expert_utilization(g)
    assert abs(mean.sum() - 1) <= 1e-12 and abs(freq.sum() - 1) <= 1e-12


def test_checkpoint_round_trip(tmp_path, small_model):
    small_model.gate[0][1].values[...] = [0.1, -0.2, 0.3]
    save_checkpoint(small_model, tmp_path / "m.moem")
    raw = (tmp_path / "m.moem").read_bytes()
    assert raw[:4] == b"MOEM" and struct.unpack_from("<I", raw, 4) == (1,)
    back = load_checkpoint(tmp_path / "m.moem")
    assert back.cfg == small_model.cfg
    for p, q in zip(small_model.parameters(), back.parameters()):
        assert p.name == q.name and np.array_equal(p.values, q.values)
    names = [p.name for p in back.parameters()]
    assert names[0].startswith("gate") and names[-1] == "cls_head.b" and names[-3] == "mos_head.b"


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError, match="checkpoint"):
        load_checkpoint(tmp_path / "x")


def test_gate_hidden_option():
    m = init_model(MoeConfig(n_experts=3, input_dim=4, expert_hidden=(5, 5), expert_out_dim=2,
                             gate_hidden=6), RngState(0))
    assert len(m.gate) == 2
    g = gate_forward(m, np.ones(4))
    assert g.shape == (3,) and abs(g.sum() - 1) <= 1e-12
