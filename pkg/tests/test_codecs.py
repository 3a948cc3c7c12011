"""Modality specs, latent codecs, prompt/context encoders, guided adaptation."""

import numpy as np
import pytest

import multiflow.tensor as T
from multiflow.codecs import (
    ContextEncoder,
    GuidedAdaptation,
    ImageLatentCodec,
    ModalityError,
    ModalitySpec,
    TextLatentCodec,
    build_adaptation,
    default_modalities,
    encode_context,
    encode_prompt,
    ImagePromptEncoder,
    TextPromptEncoder,
    resample_matrix,
)
from multiflow.tensor import Tensor, backward, grad_check


@pytest.fixture
def specs():
    return default_modalities()


class TestSpecs:
    def test_shared_embed_dim(self, specs):
        assert len({s.embed_dim for s in specs.values()}) == 1

    def test_text_latent_is_one_token(self, specs):
        assert specs["text"].latent_shape == (64, 1, 1)

    def test_image_latent(self, specs):
        assert specs["xray"].latent_shape == (4, 8, 8)

    def test_bad_spec(self):
        with pytest.raises(ModalityError):
            ModalitySpec("x", (0, 8, 8), 4, 64, "image")
        with pytest.raises(ModalityError):
            ModalitySpec("x", (4, 8, 8), 4, 64, "volume")


class TestLatentCodecs:
    def test_image_roundtrip_bit_exact(self):
        codec = ImageLatentCodec()
        img = np.random.default_rng(0).uniform(0, 1, (1, 16, 16))
        z = codec.encode(img)
        assert z.shape == (4, 8, 8)
        assert np.array_equal(codec.decode(z), img)

    def test_image_batched(self):
        codec = ImageLatentCodec()
        imgs = np.random.default_rng(1).uniform(0, 1, (5, 1, 16, 16))
        assert np.array_equal(codec.decode(codec.encode(imgs)), imgs)

    def test_space_to_depth_is_permutation(self):
        codec = ImageLatentCodec()
        img = np.arange(256, dtype=np.float64).reshape(1, 16, 16)
        z = codec.encode(img)
        assert sorted(z.reshape(-1)) == sorted(img.reshape(-1))
        # a 2x2 block lands on one latent pixel across channels
        assert set(z[:, 0, 0]) == {img[0, 0, 0], img[0, 0, 1], img[0, 1, 0], img[0, 1, 1]}

    def test_text_roundtrip_exact(self):
        codec = TextLatentCodec(vocab_size=32, max_tokens=16, dim=64)
        rng = np.random.default_rng(2)
        ids = rng.integers(0, 32, size=(10, 16))
        z = codec.encode(ids)
        assert z.shape == (10, 64, 1, 1)
        assert np.array_equal(codec.decode(z), ids)
        assert np.all(np.abs(z) <= 1.0)


class TestPromptEncoders:
    def test_unit_norm_contract(self, specs):
        enc = ImagePromptEncoder(specs["xray"], np.random.default_rng(0))
        x = np.random.default_rng(1).uniform(0, 1, (3, 1, 16, 16))
        emb = encode_prompt(enc, x)
        np.testing.assert_allclose(np.linalg.norm(emb.data, axis=1), 1.0, atol=1e-6)

    def test_determinism(self, specs):
        enc = ImagePromptEncoder(specs["ct"], np.random.default_rng(0))
        x = np.random.default_rng(1).uniform(0, 1, (1, 1, 16, 16))
        np.testing.assert_array_equal(enc(x).data, enc(x).data)

    def test_grad_check_through_encoder_8x8(self, specs):
        enc = ImagePromptEncoder(specs["xray"], np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).uniform(0, 1, (1, 1, 8, 8)))
        target = np.random.default_rng(2).normal(size=64)
        err = grad_check(lambda t: T.tsum(T.mul(enc(t), Tensor(target))), x)
        assert err < 1e-3

    def test_text_encoder_unit_norm_and_grads(self, specs):
        enc = TextPromptEncoder(specs["text"], np.random.default_rng(0), 32, 16)
        ids = np.random.default_rng(1).integers(0, 32, size=(4, 16))
        emb = enc(ids)
        np.testing.assert_allclose(np.linalg.norm(emb.data, axis=1), 1.0, atol=1e-6)
        loss = T.tsum(T.mul(emb, emb.detach()))
        backward(loss)
        assert enc.params["embed"].grad is not None

    def test_encoder_param_gradients_flow(self, specs):
        enc = ImagePromptEncoder(specs["xray"], np.random.default_rng(0))
        x = np.random.default_rng(1).uniform(0, 1, (2, 1, 16, 16))
        backward(T.tsum(T.mul(enc(x), 2.0)))
        for name, p in enc.params.items():
            assert p.grad is not None, name


class TestResample:
    def test_identity(self):
        np.testing.assert_array_equal(resample_matrix(4, 4), np.eye(4))

    def test_downsample_rows_mean(self):
        P = resample_matrix(8, 4)
        np.testing.assert_allclose(P.sum(axis=1), 1.0)
        x = np.arange(8.0)[:, None]
        np.testing.assert_allclose((P @ x)[:, 0], [0.5, 2.5, 4.5, 6.5])

    def test_upsample_repeats(self):
        P = resample_matrix(1, 4)
        np.testing.assert_allclose(P, np.ones((4, 1)))


class TestBuildAdaptation:
    def test_shape_contract(self, specs):
        z = np.random.default_rng(0).normal(size=(6, 64))
        f = build_adaptation(z, specs["xray"], source="text")
        assert f.tokens.shape == (4, 64)
        assert f.tokens.requires_grad

    def test_constant_source_gives_constant_rows(self, specs):
        z = np.tile(np.random.default_rng(1).normal(size=(1, 64)), (6, 1))
        f = build_adaptation(z, specs["xray"], F_emb=np.random.default_rng(2).normal(size=(64, 64)))
        rows = f.tokens.data
        assert np.abs(rows - rows[0]).max() < 1e-12

    def test_no_aliasing_with_source(self, specs):
        z = Tensor(np.random.default_rng(3).normal(size=(4, 64)))
        f = build_adaptation(z, specs["xray"])
        before = z.data.copy()
        f.tokens.data[:] = 123.0
        np.testing.assert_array_equal(z.data, before)

    def test_training_step_moves_f_not_source(self, specs):
        z = np.random.default_rng(4).normal(size=(4, 64))
        f = build_adaptation(z, specs["xray"])
        loss = T.tsum(T.mul(f.tokens, f.tokens))
        backward(loss)
        stepped = f.tokens.data - 0.1 * f.tokens.grad
        assert not np.allclose(stepped, f.tokens.data)

    def test_bad_context_len(self, specs):
        with pytest.raises(ModalityError):
            build_adaptation(np.zeros((2, 64)), ModalitySpec("x", (4, 8, 8), 4, 64, "image"),
                             phi_s=lambda z: z)  # wrong output rows
        with pytest.raises(ModalityError):
            build_adaptation(np.zeros((2, 32)), specs["xray"])


class TestContextEncoder:
    def test_token_count_contract(self, specs):
        rng = np.random.default_rng(0)
        V = ContextEncoder(specs["xray"], rng)
        f = build_adaptation(rng.normal(size=(4, 64)), specs["xray"])
        z = Tensor(rng.normal(size=(2, 4, 8, 8)))
        out = encode_context(V, z, f)
        assert out.shape == (2, 4 + 4, 64)

    def test_zero_residual_branch_is_identity(self, specs):
        rng = np.random.default_rng(1)
        V = ContextEncoder(specs["xray"], rng)
        assert np.all(V.params["attn.wo"].data == 0)
        f = build_adaptation(rng.normal(size=(4, 64)), specs["xray"])
        z = Tensor(rng.normal(size=(1, 4, 8, 8)))
        out = encode_context(V, z, f)
        lat = V.latent_tokens(z)
        expected = np.concatenate([lat.data, f.tokens.data[None]], axis=1)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_determinism(self, specs):
        rng = np.random.default_rng(2)
        V = ContextEncoder(specs["text"], rng)
        f = build_adaptation(rng.normal(size=(1, 64)), specs["text"])
        z = Tensor(rng.normal(size=(3, 64, 1, 1)))
        np.testing.assert_array_equal(encode_context(V, z, f).data,
                                      encode_context(V, z, f).data)

    def test_grad_check_through_encoder(self, specs):
        rng = np.random.default_rng(3)
        V = ContextEncoder(specs["xray"], rng)
        V.params["attn.wo"].data[:] = rng.normal(0, 0.2, V.params["attn.wo"].shape)
        f = build_adaptation(rng.normal(size=(4, 64)), specs["xray"])
        z = Tensor(rng.normal(size=(1, 4, 8, 8)))
        target = rng.normal(size=(1, 8, 64))

        def fz(t):
            return T.tsum(T.mul(encode_context(V, t, f), Tensor(target)))

        assert grad_check(fz, z, max_coords=48) < 1e-3

    def test_width_mismatch(self, specs):
        rng = np.random.default_rng(4)
        V = ContextEncoder(specs["xray"], rng)
        bad = GuidedAdaptation("x", Tensor(np.zeros((4, 32)), requires_grad=True))
        with pytest.raises(ModalityError):
            encode_context(V, Tensor(np.zeros((1, 4, 8, 8))), bad)
        with pytest.raises(ModalityError):
            V.latent_tokens(Tensor(np.zeros((1, 4, 4, 4))))
