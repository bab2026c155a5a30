import struct

import mpmath
import numpy as np
import pytest

from modinfuser import tensor as T
from modinfuser.layers import positional_encoding
from modinfuser.model import (
    CheckpointError,
    Discriminator,
    MEMode,
    ModelConfig,
    Translator,
    decode,
    discriminate,
    encode,
    infuse,
    load_models,
    modality_encoding,
    modality_table,
    read_checkpoint,
    save_models,
    translate,
    write_checkpoint,
)


def me_reference(m, c, classic=False):
    """The sinusoidal modality code evaluated with 50-digit arithmetic."""
    mpmath.mp.dps = 50
    out = []
    for ch in range(c):
        i = ch // 2
        if ch % 2 == 0:
            out.append(mpmath.sin(m / mpmath.power(10000, mpmath.mpf(2 * i) / c)))
        else:
            e = 2 * i if classic else 2 * i + 1
            out.append(mpmath.cos(m / mpmath.power(10000, mpmath.mpf(e) / c)))
    return np.array([float(v) for v in out])


@pytest.fixture(scope="module")
def small_gen():
    return Translator(seed=0, width=16, layers=2, heads=2)


class TestModalityEncoding:
    @pytest.mark.parametrize("c", [4, 16, 64])
    def test_zero_code(self, c):
        me = modality_encoding(0, c)
        np.testing.assert_array_equal(me[0, 0::2], 0.0)
        np.testing.assert_array_equal(me[0, 1::2], 1.0)

    @pytest.mark.parametrize("c", [2, 8, 64, 256])
    def test_first_channel_is_sin1(self, c):
        assert modality_encoding(1, c)[0, 0] == np.sin(1.0)
        assert modality_encoding(1, c)[0, 0] == pytest.approx(0.841471, abs=1e-6)

    @pytest.mark.parametrize("m", range(6))
    @pytest.mark.parametrize("c", [8, 64])
    @pytest.mark.parametrize("classic", [False, True])
    def test_high_precision(self, m, c, classic):
        np.testing.assert_allclose(modality_encoding(m, c, classic)[0], me_reference(m, c, classic), rtol=0, atol=1e-15)

    def test_asymmetric_cosine_exponent(self):
        # channel 1 uses 10000**(1/C), not 10000**0
        assert modality_encoding(1, 4)[0, 1] == pytest.approx(np.cos(1 / 10000 ** 0.25), abs=1e-15)
        assert modality_encoding(1, 4, classic=True)[0, 1] == pytest.approx(np.cos(1.0), abs=1e-15)

    def test_codes_distinct(self):
        table = modality_table(4, 64)
        dists = [np.linalg.norm(table[a] - table[b]) for a in range(4) for b in range(a)]
        assert min(dists) > 0.5

    def test_shape_and_errors(self):
        assert modality_encoding(3, 64).shape == (1, 64)
        with pytest.raises(ValueError, match="even"):
            modality_encoding(1, 7)
        with pytest.raises(ValueError):
            modality_encoding(-1, 8)


class TestGeometry:
    def test_desk_scale_shapes(self):
        gen = Translator(seed=0)
        x = T.Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 64, 64)))
        f = encode(x, gen)
        assert f.shape == (64, 4, 4)
        assert infuse(f, 2, gen).shape == f.shape
        y = decode(f, gen)
        assert y.shape == (1, 64, 64)
        assert np.all(np.abs(y.data) <= 1.0)

    def test_encoder_divides_by_16(self, small_gen):
        f = small_gen.encode(np.zeros((1, 1, 48, 32)))
        assert f.shape == (1, 16, 3, 2)

    @pytest.mark.slow
    def test_clinical_size(self):
        gen = Translator(seed=0, layers=1)
        with T.no_grad():
            assert gen.encode(np.zeros((1, 1, 240, 240))).shape == (1, 64, 15, 15)

    def test_indivisible_size(self, small_gen):
        with pytest.raises(T.ShapeError, match="16"):
            small_gen.encode(np.zeros((1, 1, 40, 40)))

    def test_different_inputs_different_features(self, small_gen):
        rng = np.random.default_rng(1)
        a = small_gen.encode(rng.uniform(-1, 1, (1, 1, 32, 32))).data
        b = small_gen.encode(rng.uniform(-1, 1, (1, 1, 32, 32))).data
        assert np.linalg.norm(a - b) > 0

    def test_translate_deterministic_and_bounded(self, small_gen):
        x = np.random.default_rng(2).uniform(-1, 1, (1, 32, 32))
        a, b = translate(x, 1, small_gen).data, translate(x, 1, small_gen).data
        assert a.tobytes() == b.tobytes()
        assert a.shape == (1, 32, 32)
        assert np.all(np.isfinite(a)) and np.abs(a).max() <= 1.0

    def test_decoder_passes_gradient(self, small_gen):
        f = T.Tensor(np.random.default_rng(3).normal(size=(1, 16, 2, 2)), requires_grad=True)
        T.backward(T.sum_(small_gen.decode(f)))
        assert np.abs(f.grad).sum() > 0


class TestInfuser:
    @pytest.mark.parametrize("mode", list(MEMode))
    def test_conditioning_changes_output(self, mode):
        gen = Translator(seed=0, width=16, layers=2, heads=2, mode=mode)
        if mode.learnable:
            gen.infuser.me_table.data = np.random.default_rng(0).normal(size=gen.infuser.me_table.shape)
        f = np.random.default_rng(4).normal(size=(1, 16, 2, 2))
        a, b = gen.infuse(f, [0]).data, gen.infuse(f, [1]).data
        assert a.shape == f.shape
        assert np.linalg.norm(a - b) > 0

    @pytest.mark.parametrize("mode,copies", [(MEMode.SINGLE, 1), (MEMode.CONSECUTIVE, 3)])
    def test_residual_algebra(self, mode, copies):
        gen = Translator(seed=5, width=16, layers=3, heads=2, mode=mode)
        for block in gen.infuser.blocks:
            for lin in (block.attn.out, block.ffn_out):
                lin.weight.data = np.zeros_like(lin.weight.data)
                lin.bias.data = np.zeros_like(lin.bias.data)
        f = np.random.default_rng(6).normal(size=(1, 16, 3, 2))
        out = gen.infuse(f, [2]).data
        flat = lambda t: t.reshape(16, 6).T  # noqa: E731
        residue = flat(out) - flat(f) - positional_encoding(6, 16)
        expected = np.repeat(copies * modality_encoding(2, 16), 6, axis=0)
        np.testing.assert_allclose(residue, expected, atol=1e-13)

    def test_target_out_of_range(self, small_gen):
        with pytest.raises(IndexError):
            small_gen.infuse(np.zeros((1, 16, 2, 2)), [4])

    def test_fixed_table_not_a_parameter(self, small_gen):
        names = dict(small_gen.named_parameters())
        assert not any("me_" in n for n in names)
        learn = Translator(seed=0, width=16, layers=1, heads=2, mode="learnable")
        assert "infuser.me_table" in dict(learn.named_parameters())

    def test_batched_targets(self, small_gen):
        f = np.random.default_rng(7).normal(size=(2, 16, 2, 2))
        both = small_gen.infuse(f, [0, 3]).data
        np.testing.assert_allclose(both[0], small_gen.infuse(f[:1], [0]).data[0], rtol=1e-13)
        np.testing.assert_allclose(both[1], small_gen.infuse(f[1:], [3]).data[0], rtol=1e-13)


class TestDiscriminator:
    def test_arity(self):
        disc = Discriminator(16, 4, seed=0)
        real, aux = discriminate(np.random.default_rng(0).uniform(-1, 1, (1, 32, 32)), disc)
        assert real.shape == () and aux.shape == (4,)
        np.testing.assert_allclose(T.softmax(aux).data.sum(), 1.0, rtol=1e-15)

    def test_gradient_reaches_input(self):
        disc = Discriminator(16, 4, seed=0)
        x = T.Tensor(np.random.default_rng(1).uniform(-1, 1, (1, 1, 32, 32)), requires_grad=True)
        real, _ = disc(x)
        T.backward(T.sum_(real))
        assert np.abs(x.grad).sum() > 0

    def test_rejects_multichannel(self):
        with pytest.raises(T.ShapeError):
            Discriminator(16, 4)(np.zeros((1, 2, 32, 32)))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"width": 12}, {"layers": 0}, {"modalities": 1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)


class TestCheckpoint:
    @pytest.mark.parametrize("mode", list(MEMode))
    def test_round_trip(self, tmp_path, mode):
        gen = Translator(seed=1, width=16, layers=2, heads=2, mode=mode)
        disc = Discriminator(16, 4, seed=1)
        path = tmp_path / "m.mfz"
        save_models(path, gen, disc, {"extra.x": np.arange(3.0)}, {"note": "hello=world"})
        gen2, disc2, rest, meta = load_models(path)
        assert gen2.cfg == gen.cfg
        for (k, a), (k2, b) in zip(gen.named_parameters(), gen2.named_parameters()):
            assert k == k2 and a.data.tobytes() == b.data.tobytes()
        for (_, a), (_, b) in zip(disc.named_parameters(), disc2.named_parameters()):
            assert a.data.tobytes() == b.data.tobytes()
        np.testing.assert_array_equal(rest["extra.x"], np.arange(3.0))
        assert meta["note"] == "hello=world"

    def test_bytes_stable(self, tmp_path):
        gen = Translator(seed=2, width=16, layers=1, heads=2)
        save_models(tmp_path / "a.mfz", gen)
        save_models(tmp_path / "b.mfz", gen)
        assert (tmp_path / "a.mfz").read_bytes() == (tmp_path / "b.mfz").read_bytes()

    def test_layout(self, tmp_path):
        cfg = ModelConfig(width=16, layers=2, modalities=3, mode="consecutive")
        write_checkpoint(tmp_path / "c.mfz", cfg, {"w": np.array([[1.5, -2.0]])})
        raw = (tmp_path / "c.mfz").read_bytes()
        assert raw[:4] == b"MFZ1"
        assert struct.unpack_from("<IIIB", raw, 4) == (16, 2, 3, 1)
        assert raw.endswith(struct.pack("<2d", 1.5, -2.0))
        cfg2, arrays, _ = read_checkpoint(tmp_path / "c.mfz")
        assert cfg2 == cfg
        np.testing.assert_array_equal(arrays["w"], [[1.5, -2.0]])

    @pytest.mark.parametrize("damage", ["magic", "truncate"])
    def test_corrupt(self, tmp_path, damage):
        path = tmp_path / "c.mfz"
        write_checkpoint(path, ModelConfig(width=16, layers=1), {"w": np.ones(4)})
        raw = path.read_bytes()
        path.write_bytes(b"XXXX" + raw[4:] if damage == "magic" else raw[:-5])
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_missing_parameter(self, tmp_path):
        gen = Translator(seed=0, width=16, layers=1, heads=2)
        state = gen.state_dict()
        state.pop("decoder.out.kernel")
        write_checkpoint(tmp_path / "x.mfz", gen.cfg, {f"G.{k}": v for k, v in state.items()})
        with pytest.raises((KeyError, CheckpointError)):
            load_models(tmp_path / "x.mfz")
