import pytest
import torch
import torch.nn.functional as F

from ckmplan.errors import CacheError, SceneError
from ckmplan.model.encoder import CnnEncoder, ConvStage, EncoderConfig
from ckmplan.model.numerics import DTYPE


class TestEncoderConfig:
    def test_presets(self):
        assert EncoderConfig.ckan().d_out == 64
        assert EncoderConfig.cmlp().d_out == 128
        assert EncoderConfig.ckan().downsample == 8

    def test_dict_round_trip(self):
        config = EncoderConfig.ckan(in_channels=4)
        assert EncoderConfig.from_dict(config.to_dict()) == config


class TestCnnEncoder:
    @pytest.mark.parametrize("config,channels", [(EncoderConfig.ckan(), 64), (EncoderConfig.cmlp(), 128)])
    def test_output_shape(self, config, channels):
        encoder = CnnEncoder(config)
        out = encoder(torch.rand(5, 32, 32, dtype=DTYPE))
        assert out.shape == (channels, 4, 4)
        assert out.dtype == DTYPE

    def test_batched_input(self):
        encoder = CnnEncoder(EncoderConfig.ckan())
        assert encoder(torch.rand(2, 5, 16, 24, dtype=DTYPE)).shape == (2, 64, 2, 3)

    def test_growing_convolution_is_cropped(self):
        config = EncoderConfig(3, [ConvStage(4, 3, 2, pool=False)])
        out = CnnEncoder(config)(torch.rand(3, 10, 10, dtype=DTYPE))
        assert out.shape == (4, 10, 10)

    def test_indivisible_input(self):
        with pytest.raises(SceneError):
            CnnEncoder(EncoderConfig.ckan())(torch.rand(5, 20, 20, dtype=DTYPE))

    def test_deterministic_forward(self):
        encoder = CnnEncoder(EncoderConfig.ckan())
        x = torch.rand(5, 32, 32, dtype=DTYPE)
        torch.testing.assert_close(encoder(x), encoder(x), rtol=0.0, atol=0.0)

    def test_cache(self):
        encoder = CnnEncoder(EncoderConfig.ckan())
        with pytest.raises(CacheError):
            encoder.cached_output
        out = encoder.encode(torch.rand(5, 16, 16, dtype=DTYPE))
        assert encoder.cached_output is out
        encoder.clear_cache()
        with pytest.raises(CacheError):
            encoder.cached_output

    def test_encode_backward_matches_autograd(self):
        encoder = CnnEncoder(EncoderConfig.ckan())
        x = torch.rand(5, 16, 16, dtype=DTYPE)
        upstream = torch.randn(64, 2, 2, dtype=DTYPE)
        encoder.encode(x)
        grads = encoder.encode_backward(upstream)
        encoder.zero_grad()
        (encoder(x) * upstream).sum().backward()
        for name, p in encoder.named_parameters():
            expected = p.grad if p.grad is not None else torch.zeros_like(p)
            torch.testing.assert_close(grads[name], expected)

    def test_encode_backward_needs_activations(self):
        encoder = CnnEncoder(EncoderConfig.ckan())
        with torch.no_grad():
            encoder.encode(torch.rand(5, 16, 16, dtype=DTYPE))
        with pytest.raises(CacheError):
            encoder.encode_backward(torch.ones(64, 2, 2, dtype=DTYPE))

    def test_he_initialization(self):
        encoder = CnnEncoder(EncoderConfig.ckan())
        conv = encoder.convs[0]
        fan_in = conv.weight[0].numel()
        bound = (6.0 / fan_in) ** 0.5
        assert float(conv.weight.abs().max()) <= bound
        assert torch.all(conv.bias == 0)

    def test_zero_input_gives_zero_output(self):
        encoder = CnnEncoder(EncoderConfig.ckan())
        out = encoder(torch.zeros(5, 32, 32, dtype=DTYPE))
        assert torch.all(out == 0)

    def test_pooling_tie_routes_to_first_cell(self):
        encoder = CnnEncoder(EncoderConfig(1, [ConvStage(1, 1, 0)]))
        with torch.no_grad():
            encoder.convs[0].weight.fill_(1.0)
        x = torch.full((1, 4, 4), 0.7, dtype=DTYPE, requires_grad=True)
        encoder(x).sum().backward()
        expected = torch.zeros(1, 4, 4, dtype=DTYPE)
        expected[0, ::2, ::2] = 1.0
        torch.testing.assert_close(x.grad, expected, rtol=0.0, atol=0.0)

    def test_single_convolution_gradient_by_hand(self):
        encoder = CnnEncoder(EncoderConfig(1, [ConvStage(1, 3, 1, pool=False)]))
        gen = torch.Generator().manual_seed(3)
        with torch.no_grad():
            encoder.convs[0].weight.copy_(torch.rand(1, 1, 3, 3, generator=gen, dtype=DTYPE) + 0.1)
        x = torch.rand(1, 4, 4, generator=gen, dtype=DTYPE) + 0.1
        upstream = torch.randn(1, 4, 4, generator=gen, dtype=DTYPE)
        encoder.encode(x)
        grads = encoder.encode_backward(upstream)

        padded = F.pad(x[0], (1, 1, 1, 1))
        expected = torch.zeros(3, 3, dtype=DTYPE)
        for a in range(3):
            for b in range(3):
                for i in range(4):
                    for j in range(4):
                        expected[a, b] += upstream[0, i, j] * padded[i + a, j + b]
        torch.testing.assert_close(grads["convs.0.weight"][0, 0], expected)
        torch.testing.assert_close(grads["convs.0.bias"], upstream.sum().reshape(1))

    def test_translation_covariance(self):
        encoder = CnnEncoder(EncoderConfig.ckan())
        gen = torch.Generator().manual_seed(5)
        blob = torch.rand(5, 8, 8, generator=gen, dtype=DTYPE)
        x = torch.zeros(5, 96, 96, dtype=DTYPE)
        x[:, 32:40, 32:40] = blob
        shifted = torch.roll(x, shifts=(16, 16), dims=(-2, -1))
        with torch.no_grad():
            out = encoder(x)
            out_shifted = encoder(shifted)
        # one output cell per eight input cells
        torch.testing.assert_close(out_shifted, torch.roll(out, shifts=(2, 2), dims=(-2, -1)))
