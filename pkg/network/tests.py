import os
import tempfile

import numpy as np
from django.test import SimpleTestCase

from dsp.processing import NormStats
from tensorcore.exceptions import ConfigurationError, ContractViolation
from tensorcore.gradcheck import grad_check
from tensorcore.tensor import Tensor, precision

from .config import ModelConfig
from .encoders import RecurrentState, condition_step, context_window, encode_cb, encode_fb
from .layers import FiLMParams, film_apply
from .params import ModelParams, init_params, parameter_specs
from .services import AudioConditionedUNet
from .storage import ModelFormatError, fnv1a_64, load_model, save_model
from .unet import prepare_page, unet_forward


def randomize(params, prefixes, seed=0, scale=0.1):
    """Give the zero-initialized FiLM projections some signal."""
    rng = np.random.default_rng(seed)
    return params.replace({
        name: rng.standard_normal(tensor.shape) * scale
        for name, tensor in params.items()
        if any(name.startswith(p) for p in prefixes)
    })


def with_leaves(params, names, leaves):
    merged = dict(params)
    merged.update(zip(names, leaves))
    return ModelParams(merged)


class FiLMTests(SimpleTestCase):
    def film(self, channels, hidden, scale_bias=0.0, shift_bias=0.0):
        return FiLMParams(
            np.zeros((channels, hidden)),
            np.full(channels, scale_bias),
            np.zeros((channels, hidden)),
            np.full(channels, shift_bias),
        )

    def test_zero_projection_is_identity(self):
        x = np.random.default_rng(0).standard_normal((3, 4, 5))
        out = film_apply(x, np.ones(6), self.film(3, 6))
        np.testing.assert_array_equal(out.data, x.astype(np.float32))

    def test_scale_and_shift_arithmetic(self):
        # s = 1 + 1 = 2, t = -1
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out = film_apply(x, np.zeros(4), self.film(1, 4, scale_bias=1.0, shift_bias=-1.0))
        np.testing.assert_array_equal(out.data[0], [[1.0, 3.0], [5.0, 7.0]])

    def test_zero_scale_gives_constant_channel(self):
        x = np.random.default_rng(1).standard_normal((2, 3, 3))
        out = film_apply(x, np.zeros(4), self.film(2, 4, scale_bias=-1.0, shift_bias=0.5))
        self.assertTrue(np.all(out.data == np.float32(0.5)))

    def test_channel_mismatch(self):
        with self.assertRaises(ConfigurationError):
            film_apply(np.ones((3, 2, 2)), np.zeros(4), self.film(2, 4))


class ModelConfigTests(SimpleTestCase):
    def test_block_widths_double_and_mirror(self):
        config = ModelConfig()
        widths = [config.block_width(name) for name in config.block_names]
        self.assertEqual(widths, [8, 16, 32, 64, 128, 64, 32, 16, 8])
        self.assertEqual(config.encoder_blocks, "ABCDE")
        self.assertEqual(config.decoder_blocks, "FGHI")
        self.assertEqual(config.film_blocks, "BCDEFGH")

    def test_unknown_film_block(self):
        with self.assertRaises(ConfigurationError):
            ModelConfig(film_blocks="BZ")

    def test_window_too_short_for_pooling(self):
        with self.assertRaises(ConfigurationError):
            ModelConfig(context_frames=8)

    def test_dict_round_trip(self):
        config = ModelConfig.tiny(encoder_kind="fb")
        self.assertEqual(ModelConfig.from_dict(config.to_dict()), config)


class InitParamsTests(SimpleTestCase):
    def setUp(self):
        self.config = ModelConfig.tiny()
        self.params = init_params(self.config, seed=3)

    def test_weights_are_orthogonal(self):
        for name, shape, kind in parameter_specs(self.config):
            if kind != "weight":
                continue
            matrix = self.params[name].data.reshape(shape[0], -1).astype(np.float64)
            if matrix.shape[0] <= matrix.shape[1]:
                np.testing.assert_allclose(matrix @ matrix.T, np.eye(matrix.shape[0]), atol=1e-5, err_msg=name)
            else:
                np.testing.assert_allclose(matrix.T @ matrix, np.eye(matrix.shape[1]), atol=1e-5, err_msg=name)

    def test_biases_and_film_are_zero(self):
        for name, tensor in self.params.items():
            if name.endswith(".bias") or ".film." in name:
                self.assertFalse(tensor.data.any(), name)
            if name.endswith(".gain"):
                self.assertTrue(np.all(tensor.data == 1), name)

    def test_same_seed_is_bit_identical(self):
        again = init_params(self.config, seed=3)
        for name in self.params:
            self.assertEqual(self.params[name].data.tobytes(), again[name].data.tobytes())

    def test_film_matches_host_block(self):
        for name in self.config.film_blocks:
            width = self.config.block_width(name)
            self.assertEqual(self.params[f"unet.{name}.film.scale.weight"].shape, (width, self.config.hidden_size))
            self.assertEqual(self.params[f"unet.{name}.film.shift.bias"].shape, (width,))

    def test_initial_prediction_ignores_conditioning(self):
        rng = np.random.default_rng(0)
        page = rng.random((32, 48))
        first = unet_forward(page, rng.standard_normal(6), self.params, self.config)
        second = unet_forward(page, rng.standard_normal(6), self.params, self.config)
        self.assertEqual(first.data.tobytes(), second.data.tobytes())


class EncoderTests(SimpleTestCase):
    def test_context_encoder_shape_chain(self):
        config = ModelConfig()
        self.assertEqual(config.encoder_output_shape(), (4, 2))
        params = init_params(config, seed=0)
        self.assertEqual(params["encoder.dense.weight"].shape, (32, 768))
        window = np.random.default_rng(0).standard_normal((40, 78))
        embedding = encode_cb(window, params, config)
        self.assertEqual(embedding.shape, (32,))
        np.testing.assert_array_equal(embedding.data, encode_cb(window, params, config).data)

    def test_context_encoder_rejects_wrong_window(self):
        config = ModelConfig.tiny()
        params = init_params(config)
        with self.assertRaises(ContractViolation):
            encode_cb(np.zeros((7, 78)), params, config)

    def test_frame_encoder_zero_weights(self):
        config = ModelConfig.tiny(encoder_kind="fb")
        params = init_params(config)
        bias = np.array([0.5, -1.0, 2.0, 0.0])
        params = params.replace({
            "encoder.dense.weight": np.zeros((4, 78)),
            "encoder.ln_dense.bias": bias,
        })
        out = encode_fb(np.random.default_rng(0).standard_normal(78), params, config)
        expected = np.where(bias > 0, bias, np.expm1(bias)).astype(np.float32)
        np.testing.assert_allclose(out.data, expected, rtol=1e-6)

    def test_frame_encoder_grad_check(self):
        config = ModelConfig.tiny(encoder_kind="fb")
        params = init_params(config, seed=1).astype(np.float64)
        params = randomize(params, ["encoder.ln_dense"], seed=2)
        frame = np.random.default_rng(3).standard_normal(78)
        names = ["encoder.dense.weight", "encoder.dense.bias", "encoder.ln_dense.gain", "encoder.ln_dense.bias"]

        def fn(*leaves):
            return encode_fb(frame, with_leaves(params, names, leaves), config)

        report = grad_check(fn, [params[n] for n in names], step=1e-5, max_coords=40, name="encode_fb")
        self.assertLess(report.max_rel_error, 1e-4)

    def test_context_encoder_grad_check_on_default_network(self):
        config = ModelConfig()
        params = init_params(config, seed=1).astype(np.float64)
        window = np.random.default_rng(2).standard_normal((config.context_frames, config.n_bins))
        names = [
            "encoder.s0.conv1.weight", "encoder.s3.conv2.weight", "encoder.conv_out.weight", "encoder.dense.weight",
        ]

        def fn(*leaves):
            return encode_cb(window, with_leaves(params, names, leaves), config)

        report = grad_check(fn, [params[n] for n in names], step=1e-5, max_coords=4, name="encode_cb")
        self.assertLess(report.max_rel_error, 1e-4)

    def test_context_window_zero_fills_stream_start(self):
        frames = np.arange(12, dtype=np.float32).reshape(6, 2) + 1
        window = context_window(frames, 1, 4)
        np.testing.assert_array_equal(window[:2], 0)
        np.testing.assert_array_equal(window[2:], frames[:2])
        np.testing.assert_array_equal(context_window(frames, 5, 4), frames[2:])


class ConditionerTests(SimpleTestCase):
    def test_dense_conditioner_is_stateless(self):
        config = ModelConfig.tiny(encoder_kind="ntc")
        params = init_params(config)
        embedding = np.random.default_rng(0).standard_normal(4)
        state = RecurrentState.zeros(6)
        z_first, state = condition_step(embedding, state, params, config)
        for _ in range(10):
            _, state = condition_step(np.random.default_rng(1).standard_normal(4), state, params, config)
        z_later, _ = condition_step(embedding, state, params, config)
        np.testing.assert_array_equal(z_first.data, z_later.data)

    def test_lstm_output_is_bounded(self):
        config = ModelConfig.tiny()
        params = init_params(config)
        rng = np.random.default_rng(0)
        state = RecurrentState.zeros(6)
        for _ in range(20):
            z, state = condition_step(rng.standard_normal(4) * 10, state, params, config)
            self.assertTrue(np.all(np.abs(z.data) < 1))

    def test_zero_everything_gives_zero(self):
        config = ModelConfig.tiny()
        params = init_params(config)
        params = params.replace({"conditioner.w_ih": np.zeros((24, 4)), "conditioner.w_hh": np.zeros((24, 6))})
        z, state = condition_step(np.zeros(4), RecurrentState.zeros(6), params, config)
        self.assertFalse(z.data.any())
        self.assertFalse(state.c.data.any())


class UNetTests(SimpleTestCase):
    def test_published_page_size(self):
        config = ModelConfig()
        params = randomize(init_params(config), [f"unet.{b}.film" for b in config.film_blocks])
        page = np.random.default_rng(0).random((393, 278))
        out = unet_forward(page, np.random.default_rng(1).standard_normal(128) * 0.1, params, config)
        self.assertEqual(out.shape, (1, 393, 278))
        self.assertTrue(np.all(out.data > 0) and np.all(out.data < 1))

    def test_multiples_of_sixteen(self):
        config = ModelConfig.tiny()
        params = init_params(config)
        page = np.random.default_rng(0).random((128, 128))
        for height in range(32, 129, 16):
            for width in (32, 80, 128):
                out = unet_forward(page[:height, :width], np.zeros(6), params, config)
                self.assertEqual(out.shape, (1, height, width))

    def test_page_padding(self):
        prepared = prepare_page(np.zeros((17, 33)), ModelConfig.tiny())
        self.assertEqual(prepared.tensor.shape, (1, 32, 48))
        self.assertEqual((prepared.height, prepared.width), (17, 33))

    def test_small_page_rejected(self):
        config = ModelConfig.tiny()
        with self.assertRaises(ContractViolation):
            unet_forward(np.zeros((15, 40)), np.zeros(6), init_params(config), config)

    def test_end_to_end_grad_check(self):
        config = ModelConfig.tiny()
        params = init_params(config, seed=5).astype(np.float64)
        params = randomize(params, [f"unet.{b}.film" for b in config.film_blocks], seed=6, scale=0.3)
        rng = np.random.default_rng(7)
        page = rng.random((32, 32))
        window = rng.standard_normal((8, 78))
        names = [
            "encoder.s0.conv1.weight",
            "encoder.dense.weight",
            "conditioner.w_ih",
            "conditioner.w_hh",
            "unet.A.conv1.weight",
            "unet.C.film.scale.weight",
            "unet.G.film.shift.bias",
            "unet.G.up.weight",
            "unet.out.bias",
        ]

        def fn(*leaves):
            model = with_leaves(params, names, leaves)
            state = RecurrentState.zeros(config.hidden_size)
            _, state = condition_step(encode_cb(window, model, config), state, model, config)
            z, _ = condition_step(encode_cb(window * 0.5, model, config), state, model, config)
            return unet_forward(page, z, model, config)

        report = grad_check(fn, [params[n] for n in names], step=1e-5, max_coords=5, name="model")
        self.assertLess(report.max_rel_error, 1e-3)

    def test_predictions_are_causal(self):
        config = ModelConfig.tiny()
        params = randomize(init_params(config), [f"unet.{b}.film" for b in config.film_blocks])
        model = AudioConditionedUNet(params, config)
        rng = np.random.default_rng(0)
        page = rng.random((32, 32))
        frames = rng.standard_normal((10, 78)).astype(np.float32)
        reference = model.predict_sequence(page, frames)
        changed = frames.copy()
        changed[6:] = rng.standard_normal((4, 78))
        altered = model.predict_sequence(page, changed)
        self.assertEqual(reference[:6].tobytes(), altered[:6].tobytes())
        self.assertNotEqual(reference[6:].tobytes(), altered[6:].tobytes())


class ModelStorageTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "model.pgtk")
        self.config = ModelConfig.tiny(encoder_kind="fb")
        self.params = init_params(self.config, seed=9)
        self.stats = NormStats(np.linspace(-1, 1, 78), np.linspace(0.5, 2, 78))
        save_model(self.params, self.config, self.stats, self.path)

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip_is_lossless(self):
        params, config, stats = load_model(self.path)
        self.assertEqual(config, self.config)
        self.assertEqual(list(params), list(self.params))
        for name in params:
            self.assertEqual(params[name].data.tobytes(), self.params[name].data.tobytes())
        np.testing.assert_array_equal(stats.mean, self.stats.mean)
        np.testing.assert_array_equal(stats.std, self.stats.std)

    def test_reloaded_model_predicts_identically(self):
        page = np.random.default_rng(0).random((32, 32))
        frames = np.random.default_rng(1).standard_normal((3, 78))
        original = AudioConditionedUNet(self.params, self.config, self.stats).predict_sequence(page, frames)
        reloaded = AudioConditionedUNet.from_file(self.path).predict_sequence(page, frames)
        self.assertEqual(original.tobytes(), reloaded.tobytes())

    def _rewrite(self, mutate):
        with open(self.path, "rb") as f:
            blob = bytearray(f.read())
        blob = mutate(blob)
        with open(self.path, "wb") as f:
            f.write(bytes(blob))

    def test_corrupted_payload_fails_checksum(self):
        def flip(blob):
            blob[-20] ^= 0x01
            return blob

        self._rewrite(flip)
        with self.assertRaisesRegex(ModelFormatError, "checksum"):
            load_model(self.path)

    def test_bad_magic(self):
        def rename(blob):
            blob[:4] = b"NOPE"
            return blob

        self._rewrite(rename)
        with self.assertRaisesRegex(ModelFormatError, "magic"):
            load_model(self.path)

    def test_unknown_version(self):
        def bump(blob):
            blob[4] = 99
            return blob

        self._rewrite(bump)
        with self.assertRaisesRegex(ModelFormatError, "version"):
            load_model(self.path)

    def test_truncated_file(self):
        self._rewrite(lambda blob: blob[:-100])
        with self.assertRaises(ModelFormatError):
            load_model(self.path)

    def test_parameters_keep_names(self):
        self.assertIsInstance(self.params["unet.out.weight"], Tensor)
        self.assertTrue(self.params["unet.out.weight"].requires_grad)
        with precision(np.float64):
            self.assertEqual(self.params.astype(np.float64)["unet.out.weight"].dtype, np.float64)


class ChecksumTests(SimpleTestCase):
    def test_published_fnv1a_values(self):
        self.assertEqual(fnv1a_64(b""), 0xCBF29CE484222325)
        self.assertEqual(fnv1a_64(b"a"), 0xAF63DC4C8601EC8C)
        self.assertEqual(fnv1a_64(b"foobar"), 0x85944171F73967E8)

    def test_matches_byte_by_byte_definition(self):
        payload = np.random.default_rng(0).standard_normal(2500).astype("<f4").tobytes()
        digest = 0xCBF29CE484222325
        for byte in payload:
            digest = ((digest ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        self.assertEqual(fnv1a_64(payload), digest)
        self.assertNotEqual(fnv1a_64(payload[:-1] + bytes([payload[-1] ^ 1])), digest)
