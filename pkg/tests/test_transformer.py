import numpy as np
import pytest

from dnd import autodiff as ad
from dnd.autodiff import Tensor, grad_check
from dnd.model import DndModel
from dnd.transformer import ContractError, ModelConfig, OpCounter, layer_forward

from conftest import make_layer


def test_model_config_invariants():
    with pytest.raises(ContractError):
        ModelConfig(d_model=16, n_heads=3, d_head=8)
    with pytest.raises(ContractError):
        ModelConfig(d_model=16, n_heads=2, d_head=8, max_seq_len=1)


def test_single_token_depends_only_on_itself(tiny_cfg, rng):
    layer = make_layer(tiny_cfg)
    x = rng.normal(size=(1, 1, 16))
    a = layer_forward(layer, Tensor(x), [0]).data
    b = layer_forward(layer, Tensor(x), [0]).data
    assert a.shape == (1, 1, 16) and np.array_equal(a, b)
    # one token attends only to itself: attention output equals its own value row
    full = layer_forward(layer, Tensor(np.concatenate([x, rng.normal(size=(1, 3, 16))], axis=1)), np.arange(4))
    assert np.array_equal(full.data[:, :1], a)


def test_future_permutation_leaves_token_zero(tiny_cfg, rng):
    layer = make_layer(tiny_cfg, gain=5.0)
    x = rng.normal(size=(1, 6, 16))
    y = x.copy()
    y[0, 1:] = y[0, 1:][rng.permutation(5)]
    a = layer_forward(layer, Tensor(x), np.arange(6)).data
    b = layer_forward(layer, Tensor(y), np.arange(6)).data
    assert np.array_equal(a[0, 0], b[0, 0])
    assert not np.allclose(a[0, 1:], b[0, 1:])


def test_layer_gradient_check(rng):
    cfg = ModelConfig(d_model=8, n_heads=2, d_head=4, n_layers=2, d_ff=12, max_seq_len=8)
    layer = make_layer(cfg, gain=10.0)
    proj = rng.normal(size=(1, 2, 8))
    x = rng.normal(size=(1, 2, 8))
    assert grad_check(lambda t: (layer_forward(layer, t, [0, 1]) * proj).sum(), x, eps=1e-5) < 1e-4


def test_layer_weight_gradients(rng):
    cfg = ModelConfig(d_model=8, n_heads=2, d_head=4, n_layers=2, d_ff=12, max_seq_len=8)
    layer = make_layer(cfg, gain=10.0)
    x = rng.normal(size=(2, 3, 8))
    proj = rng.normal(size=(2, 3, 8))
    for name, p in layer.named_parameters().items():
        orig = p

        def f(t, name=name):
            setattr(layer, name, t)
            try:
                return (layer_forward(layer, Tensor(x), np.arange(3)) * proj).sum()
            finally:
                setattr(layer, name, orig)

        assert grad_check(f, p.data.copy(), eps=1e-5) < 1e-4, name


def test_position_length_mismatch(tiny_cfg, rng):
    layer = make_layer(tiny_cfg)
    with pytest.raises(ContractError):
        layer_forward(layer, Tensor(rng.normal(size=(1, 3, 16))), [0, 1])
    with pytest.raises(ContractError):
        layer_forward(layer, Tensor(rng.normal(size=(1, 3, 16))), [0, 2, 1])


def test_sequence_longer_than_max(tiny_cfg, rng):
    layer = make_layer(tiny_cfg)
    with pytest.raises(ContractError):
        layer_forward(layer, Tensor(rng.normal(size=(1, 33, 16))), np.arange(33))


def test_padding_rows_do_not_affect_valid_rows(tiny_cfg, rng):
    layer = make_layer(tiny_cfg, gain=5.0)
    x = rng.normal(size=(1, 5, 16))
    short = layer_forward(layer, Tensor(x[:, :3]), np.arange(3)).data
    padded = layer_forward(layer, Tensor(x), np.arange(5), valid_lengths=np.array([3])).data
    assert np.allclose(short, padded[:, :3], rtol=0, atol=1e-14)


def test_op_counter_charges_valid_tokens(tiny_cfg, rng):
    layer = make_layer(tiny_cfg)
    c = OpCounter()
    layer_forward(layer, Tensor(rng.normal(size=(2, 4, 16))), np.arange(4), valid_lengths=np.array([4, 2]), counter=c)
    assert c.total("vanilla_attn") == 4 * 2 * 8 * (16 + 4)
    assert c.total("vanilla_ffn") == 6 * 16 * 24 * 6
    assert c.total("vanilla_proj") == 8 * 16 * 16 * 6


# -- whole model ----------------------------------------------------------
def test_dnd_disabled_equals_plain_model(tiny_cfg, rng):
    plain = DndModel(tiny_cfg, seed=3)
    dnd = DndModel(tiny_cfg, 1, 2, seed=3)
    for r in dnd.routers.values():
        r.weight.data = rng.normal(0, 10, 16)
    tok = rng.integers(0, 258, (2, 10))
    a, _ = plain(tok)
    b, traces = dnd(tok, dnd=False)
    assert traces == [] and a.data.tobytes() == b.data.tobytes()


def test_zero_routers_never_select(tiny_cfg, rng):
    plain = DndModel(tiny_cfg, seed=3)
    dnd = DndModel(tiny_cfg, 1, 2, seed=3)
    tok = rng.integers(0, 258, (3, 12))
    a, _ = plain(tok)
    b, traces = dnd(tok)
    assert all(not t.sel.mask.any() for t in traces)
    assert all(np.all(t.probs.data == 0.5) for t in traces)
    assert a.data.tobytes() == b.data.tobytes()


def test_only_configured_layers_emit_traces(tiny_cfg, rng):
    m = DndModel(tiny_cfg, 1, 2)
    _, traces = m(rng.integers(0, 258, (1, 5)))
    assert [t.layer for t in traces] == [1, 2]


def test_invalid_layer_range(tiny_cfg):
    with pytest.raises(ContractError):
        DndModel(tiny_cfg, 2, 1)
    with pytest.raises(ContractError):
        DndModel(tiny_cfg, 0, 4)


def test_token_out_of_vocab(tiny_cfg):
    with pytest.raises(IndexError):
        DndModel(tiny_cfg, 1, 2)(np.array([[1, 258]]))


def test_router_parameter_count(tiny_cfg):
    plain = DndModel(tiny_cfg)
    for ls, le in [(1, 2), (1, 1), (0, 3)]:
        m = DndModel(tiny_cfg, ls, le)
        n_dnd = le - ls + 1
        extra = n_dnd * (tiny_cfg.d_model + 1) + n_dnd
        assert m.num_parameters() - plain.num_parameters() == extra


def test_checkpoint_round_trip(tiny_cfg, rng, tmp_path):
    m = DndModel(tiny_cfg, 1, 2, seed=5)
    for r in m.routers.values():
        r.weight.data = rng.normal(0, 10, 16)
        r.tau = 0.4321
        r.ratio_buffer.extend([0.1, 0.3])
        r.topk_tau_buffer.extend([0.6])
    m.routers[1].beta.data = np.asarray(0.37)
    path = tmp_path / "m.bin"
    m.save(path, extra={"note": "x"})
    m2, extra = DndModel.load(path)
    assert extra == {"note": "x"}
    tok = rng.integers(0, 258, (2, 9))
    assert m(tok)[0].data.tobytes() == m2(tok)[0].data.tobytes()
    assert m2.routers[1].tau == 0.4321 and float(m2.routers[1].beta.data) == 0.37
    assert list(m2.routers[2].ratio_buffer) == [0.1, 0.3]


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(ContractError):
        DndModel.load(p)


def test_model_gradients_are_finite(tiny_cfg, rng):
    m = DndModel(tiny_cfg, 1, 2, seed=1)
    for r in m.routers.values():
        r.weight.data = rng.normal(0, 20, 16)
    tok = rng.integers(0, 258, (2, 8))
    logits, traces = m(tok)
    assert any(t.sel.mask.any() for t in traces)
    ad.cross_entropy(logits, rng.integers(0, 258, (2, 8))).backward()
    for name, p in m.named_parameters().items():
        assert p.grad is not None and np.all(np.isfinite(p.grad)), name
