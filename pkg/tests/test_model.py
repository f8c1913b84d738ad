import numpy as np
import pytest

from csaseg.errors import ConfigError, ShapeError
from csaseg.model import CsaModule, DecoderBlock, EncoderBlock, Network, NetworkConfig, forward
from csaseg.tensor import Tensor, no_grad


def rand(*shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape).astype(np.float32))


def test_widths_double_per_level():
    assert NetworkConfig(base_width=8).widths() == (8, 16, 32, 64)


def test_csa_levels_restricted():
    with pytest.raises(ConfigError):
        NetworkConfig(csa_levels=(1, 2))


def test_encoder_block_shapes():
    block = EncoderBlock(1, 1, 8, np.random.default_rng(0))
    f, p = block(rand(1, 1, 16, 16, 16))
    assert f.shape == (1, 8, 16, 16, 16)
    assert p.shape == (1, 8, 8, 8, 8)
    _, none = EncoderBlock(4, 8, 8, np.random.default_rng(0))(rand(1, 8, 4, 4, 4))
    assert none is None


def test_encoder_zero_input_gives_zero_features():
    block = EncoderBlock(1, 1, 4, np.random.default_rng(0))
    f, _ = block(Tensor(np.zeros((1, 1, 8, 8, 8), np.float32)))
    np.testing.assert_array_equal(f.data, 0.0)


def test_decoder_block_shapes():
    dec = DecoderBlock(3, 64, 32, np.random.default_rng(0))
    assert dec.conv1.conv.weight.shape[1] == 32 + 32  # skip channels + upsampled channels
    out = dec(rand(1, 64, 2, 2, 2), rand(1, 32, 4, 4, 4, seed=1))
    assert out.shape == (1, 32, 4, 4, 4)


def test_decoder_mismatch():
    dec = DecoderBlock(3, 8, 4, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        dec(rand(1, 8, 2, 2, 2), rand(1, 4, 5, 5, 5))


# -- CSA ---------------------------------------------------------------------------------

def make_csa(level=2, seed=0):
    return CsaModule(level, 8, 16, 32, 8, np.random.default_rng(seed))


def csa_inputs(seed=0):
    return rand(1, 8, 16, 16, 16, seed=seed), rand(1, 16, 8, 8, 8, seed=seed + 1), rand(1, 32, 4, 4, 4, seed=seed + 2)


@pytest.mark.parametrize("seed", range(3))
def test_attention_ranges_and_shapes(seed):
    csa = make_csa(seed=seed)
    f1, fl, fg = csa_inputs(seed)
    att1, fl_hat = csa.attention_1(f1, fl)
    assert att1.shape == (1, 1, 8, 8, 8)
    assert fl_hat.shape == fl.shape
    assert ((att1.data > 0) & (att1.data < 1)).all()
    out, att2 = csa.attention_2(fl_hat, fg)
    assert att2.shape == (1, 1, 4, 4, 4)
    assert ((att2.data > 0) & (att2.data < 1)).all()
    assert out.shape == fl.shape
    up = out.data / np.where(fl_hat.data == 0, 1, fl_hat.data)
    assert ((up > 0) & (up < 1)).all()
    # gating is contractive voxel by voxel
    assert (np.abs(out.data) <= np.abs(fl_hat.data)).all()


def test_forced_unit_attention_is_identity():
    csa = make_csa()
    f1, fl, _ = csa_inputs()
    _, fl_hat = csa.attention_1(f1, fl, force=1.0)
    np.testing.assert_array_equal(fl_hat.data, fl.data)


def test_zero_weights_give_half_gate():
    csa = make_csa()
    for conv in (csa.conv_g, csa.conv_lhat, csa.squeeze_2):
        conv.weight.data[...] = 0
        conv.bias.data[...] = 0
    f1, fl, fg = csa_inputs()
    _, fl_hat = csa.attention_1(f1, fl)
    out, att2 = csa.attention_2(fl_hat, fg)
    np.testing.assert_array_equal(att2.data, 0.5)
    np.testing.assert_allclose(out.data, 0.5 * fl_hat.data, rtol=1e-6)


def test_level3_alignment():
    csa = CsaModule(3, 4, 16, 32, 8, np.random.default_rng(0))
    att1, _ = csa.attention_1(rand(1, 4, 16, 16, 16), rand(1, 16, 4, 4, 4))
    assert att1.shape == (1, 1, 4, 4, 4)


def test_unaligned_inputs():
    csa = make_csa()
    with pytest.raises(ShapeError):
        csa.attention_1(rand(1, 8, 12, 12, 12), rand(1, 16, 8, 8, 8))
    with pytest.raises(ShapeError):
        csa.attention_2(rand(1, 16, 8, 8, 8), rand(1, 32, 8, 8, 8))


# -- network --------------------------------------------------------------------------

def test_forward_shape_and_softmax():
    net = Network(NetworkConfig(base_width=8), seed=0)
    x = rand(1, 1, 32, 32, 32)
    with no_grad():
        logits = net.logits(x)
        probs = forward(net, x)
    assert logits.shape == (1, 2, 32, 32, 32)
    assert probs.shape == (1, 2, 32, 32, 32)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-5)


def test_input_must_divide_by_8():
    with pytest.raises(ShapeError):
        Network(NetworkConfig(base_width=2))(rand(1, 1, 12, 16, 16))


def test_csa_called_exactly_at_levels_2_and_3(monkeypatch):
    calls = []
    original = CsaModule.__call__

    def spy(self, *args):
        calls.append(self.level)
        return original(self, *args)

    monkeypatch.setattr(CsaModule, "__call__", spy)
    net = Network(NetworkConfig(base_width=2), seed=0)
    with no_grad():
        net(rand(1, 1, 16, 16, 16))
    assert sorted(calls) == [2, 3]
    assert net.csa(1) is None


@pytest.mark.parametrize("level", [2, 3])
def test_disabling_csa_changes_output(level):
    net = Network(NetworkConfig(base_width=4), seed=1).eval()
    x = rand(1, 1, 16, 16, 16, seed=5)
    with no_grad():
        full = net(x).data
        saved = net.csa(level)
        setattr(net, f"csa{level}", None)
        ablated = net(x).data
        setattr(net, f"csa{level}", saved)
        again = net(x).data
    assert np.abs(full - ablated).max() > 1e-6
    np.testing.assert_array_equal(full, again)


def test_plain_unet_has_no_csa_parameters():
    plain = Network(NetworkConfig(base_width=8, csa_levels=()), seed=0)
    full = Network(NetworkConfig(base_width=8), seed=0)
    assert not any(n.startswith("csa") for n, _ in plain.named_parameters())
    assert full.parameter_count() > plain.parameter_count()


def test_parameter_count_reproducible():
    a = Network(NetworkConfig(base_width=8), seed=0)
    b = Network(NetworkConfig(base_width=8), seed=3)
    assert a.parameter_count() == b.parameter_count()


def test_eval_forward_deterministic():
    net = Network(NetworkConfig(base_width=2), seed=0).eval()
    x = rand(2, 1, 16, 16, 16)
    with no_grad():
        np.testing.assert_array_equal(net(x).data, net(x).data)


def test_every_parameter_receives_gradient():
    net = Network(NetworkConfig(base_width=2), seed=0)
    x = rand(2, 1, 16, 16, 16, seed=2)
    w = Tensor(np.random.default_rng(3).standard_normal((2, 2, 16, 16, 16)).astype(np.float32))
    (net(x) * w).sum().backward()
    dead = [n for n, p in net.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_checkpoint_round_trip(tmp_path):
    net = Network(NetworkConfig(base_width=2, csa_levels=(3,)), seed=4)
    net.train()
    with no_grad():
        net(rand(2, 1, 16, 16, 16))  # moves the running statistics off their defaults
    path = tmp_path / "net.ckpt"
    net.save(path)
    back = Network.load(path)
    assert back.cfg == net.cfg
    for (na, a), (nb, b) in zip(net.named_parameters(), back.named_parameters()):
        assert na == nb and a.data.tobytes() == b.data.tobytes()
    for (na, a), (nb, b) in zip(net.named_buffers(), back.named_buffers()):
        assert na == nb and a.tobytes() == b.tobytes()
    x = rand(1, 1, 16, 16, 16, seed=9)
    with no_grad():
        np.testing.assert_array_equal(net.eval()(x).data, back.eval()(x).data)


def test_checkpoint_manifest_is_text(tmp_path):
    path = tmp_path / "net.ckpt"
    Network(NetworkConfig(base_width=2), seed=0).save(path)
    head = path.read_bytes().split(b"END\n", 1)[0].decode()
    assert head.startswith("CSASEG-CHECKPOINT 1")
    assert "config base_width=2" in head
    assert "param enc1.conv1.conv.weight 2 1 3 3 3" in head


def test_checkpoint_for_plain_unet(tmp_path):
    path = tmp_path / "plain.ckpt"
    Network(NetworkConfig(base_width=2, csa_levels=()), seed=0).save(path)
    assert Network.load(path).cfg.csa_levels == ()
