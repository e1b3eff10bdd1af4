"""Encoders, temporal heads, and model assembly."""

import numpy as np
import pytest
import torch

from dashkin import models
from dashkin.models import (
    CNN_STAGES,
    ENCODERS,
    HEADS,
    LATENT_DIM,
    ArchSpec,
    BaselineHead,
    ClipModel,
    EncoderError,
    FrameEncoder,
    GruHead,
    ResidualBlock,
    StandinEncoder,
    TransformerHead,
    build_model,
    count_parameters,
    load_external_latents,
    output_dim_for_task,
    predictions_from_outputs,
    sinusoidal_positions,
    task_for_attribute,
)

TOY_STAGES = ((3, 4, 1), (4, 4, 1))


def toy_encoder():
    torch.manual_seed(0)
    return FrameEncoder(latent_dim=4, stages=TOY_STAGES)


class TestTasks:
    def test_attribute_tasks(self):
        assert task_for_attribute("speed") == "regression"
        assert task_for_attribute("lead_present") == "binary"
        assert task_for_attribute("lead_rel_speed") == "regression"
        assert task_for_attribute("lead_rel_speed", rel_speed_classes=True) == "3_class"

    def test_unknown_attribute(self):
        with pytest.raises(KeyError):
            task_for_attribute("altitude")

    def test_output_dims(self):
        assert output_dim_for_task("regression") == 1
        assert output_dim_for_task("binary") == 1
        assert output_dim_for_task("3_class") == 3
        with pytest.raises(ValueError):
            output_dim_for_task("7_class")


class TestFrameEncoder:
    def test_output_shape(self):
        enc = toy_encoder()
        x = torch.rand(5, 3, 16, 16)
        assert enc(x).shape == (5, 4)

    def test_block_count_matches_stage_plan(self):
        enc = FrameEncoder(latent_dim=8)
        n_blocks = sum(1 for m in enc.modules() if isinstance(m, ResidualBlock))
        assert n_blocks == sum(n for _, _, n in CNN_STAGES) == 14

    def test_batch_composition_independence(self):
        """No normalization across the batch: a frame's latent must not
        depend on what shares its batch."""
        enc = toy_encoder()
        enc.eval()
        x = torch.rand(1, 3, 16, 16)
        other = torch.rand(3, 3, 16, 16)
        alone = enc(x)
        stacked = enc(torch.cat([x, other]))[:1]
        assert torch.equal(alone, stacked)

    def test_check_finite_names_the_block(self):
        enc = toy_encoder()
        with torch.no_grad():
            enc.blocks[1].conv.weight.fill_(float("inf"))
        x = torch.rand(1, 3, 16, 16)
        with pytest.raises(EncoderError, match="block 1"):
            enc(x, check_finite=True)

    def test_without_check_finite_propagates_silently(self):
        enc = toy_encoder()
        with torch.no_grad():
            enc.blocks[0].conv.weight.fill_(float("nan"))
        out = enc(torch.rand(2, 3, 16, 16))
        assert not torch.isfinite(out).all()

    def test_default_downsampling_reaches_one_pixel(self):
        # six stride-2 stages take 64 -> 1 before pooling
        enc = FrameEncoder(latent_dim=8)
        feat = enc.blocks(torch.rand(1, 3, 64, 64))
        assert feat.shape == (1, 256, 1, 1)


class TestResidualBlock:
    def test_identity_skip_when_shape_kept(self):
        block = ResidualBlock(4, 4, stride=1)
        assert isinstance(block.skip, torch.nn.Identity)

    def test_projection_skip_on_change(self):
        assert isinstance(ResidualBlock(4, 8, stride=1).skip, torch.nn.Conv2d)
        assert isinstance(ResidualBlock(4, 4, stride=2).skip, torch.nn.Conv2d)

    def test_zero_conv_passes_relu_of_input(self):
        block = ResidualBlock(2, 2, stride=1)
        with torch.no_grad():
            block.conv.weight.zero_()
            block.conv.bias.zero_()
        x = torch.randn(1, 2, 5, 5)
        assert torch.equal(block(x), torch.relu(x))


class TestStandinEncoder:
    def test_shape_and_dtype(self):
        enc = StandinEncoder(latent_dim=32)
        frames = np.random.default_rng(0).integers(0, 256, (6, 3, 16, 16), np.uint8)
        lat = enc.encode(frames)
        assert lat.shape == (6, 32)
        assert lat.dtype == np.float32

    def test_deterministic_across_instances(self):
        frames = np.random.default_rng(1).integers(0, 256, (4, 3, 16, 16), np.uint8)
        a = StandinEncoder(latent_dim=16).encode(frames)
        b = StandinEncoder(latent_dim=16).encode(frames)
        assert np.array_equal(a, b)

    def test_seed_changes_projection(self):
        frames = np.random.default_rng(2).integers(0, 256, (4, 3, 16, 16), np.uint8)
        a = StandinEncoder(latent_dim=16, seed=711).encode(frames)
        b = StandinEncoder(latent_dim=16, seed=712).encode(frames)
        assert not np.array_equal(a, b)

    def test_identical_frames_identical_latents(self):
        frame = np.random.default_rng(3).integers(0, 256, (1, 3, 16, 16), np.uint8)
        frames = np.repeat(frame, 3, axis=0)
        lat = StandinEncoder(latent_dim=8).encode(frames)
        assert np.array_equal(lat[0], lat[1]) and np.array_equal(lat[1], lat[2])

    def test_rejects_indivisible_frame_size(self):
        frames = np.zeros((2, 3, 10, 10), np.uint8)
        with pytest.raises(ValueError):
            StandinEncoder(pool=4).encode(frames)

    def test_rejects_wrong_layout(self):
        with pytest.raises(ValueError):
            StandinEncoder().encode(np.zeros((2, 16, 16, 3), np.uint8))


class TestHeads:
    @pytest.mark.parametrize("out_dim", [1, 3])
    def test_shapes(self, out_dim):
        x = torch.randn(2, 7, 12)
        for head in (BaselineHead(12, 8, out_dim), GruHead(12, 8, out_dim),
                     TransformerHead(12, 8, out_dim, n_heads=2)):
            assert head(x).shape == (2, 7, out_dim)

    def test_baseline_is_frame_independent(self):
        torch.manual_seed(0)
        head = BaselineHead(6, 6, 1)
        x = torch.randn(1, 5, 6)
        perm = torch.tensor([3, 1, 4, 0, 2])
        assert torch.allclose(head(x[:, perm]), head(x)[:, perm])

    def test_gru_is_causal(self):
        torch.manual_seed(0)
        head = GruHead(6, 8, 1)
        x = torch.randn(1, 5, 6)
        y = head(x)
        bumped = x.clone()
        bumped[:, 4] += 1.0
        y2 = head(bumped)
        assert torch.equal(y[:, :4], y2[:, :4])
        assert not torch.allclose(y[:, 4], y2[:, 4])

    def test_transformer_attends_globally(self):
        torch.manual_seed(0)
        head = TransformerHead(6, 8, 1, n_heads=2)
        head.eval()
        x = torch.randn(1, 5, 6)
        bumped = x.clone()
        bumped[:, 4] += 1.0
        assert not torch.allclose(head(x)[:, 0], head(bumped)[:, 0])

    def test_transformer_without_positions_is_permutation_equivariant(self):
        torch.manual_seed(0)
        head = TransformerHead(6, 8, 1, n_heads=2, positional=False)
        head.eval()
        x = torch.randn(1, 6, 6)
        perm = torch.randperm(6)
        assert torch.allclose(head(x[:, perm]), head(x)[:, perm], atol=1e-6)

    def test_transformer_with_positions_breaks_equivariance(self):
        torch.manual_seed(0)
        head = TransformerHead(6, 8, 1, n_heads=2, positional=True)
        head.eval()
        x = torch.randn(1, 6, 6)
        perm = torch.tensor([5, 4, 3, 2, 1, 0])
        assert not torch.allclose(head(x[:, perm]), head(x)[:, perm], atol=1e-6)

    def test_transformer_rejects_indivisible_heads(self):
        with pytest.raises(ValueError):
            TransformerHead(6, 9, 1, n_heads=2)

    def test_no_dropout_anywhere(self):
        head = TransformerHead(8, 8, 1, n_heads=2)
        drops = [m.p for m in head.modules() if isinstance(m, torch.nn.Dropout)]
        assert drops and all(p == 0.0 for p in drops)


class TestSinusoidalPositions:
    def test_shape_and_first_row(self):
        table = sinusoidal_positions(5, 8)
        assert table.shape == (5, 8)
        assert torch.allclose(table[0, 0::2], torch.zeros(4))
        assert torch.allclose(table[0, 1::2], torch.ones(4))

    def test_first_pair_uses_unit_frequency(self):
        table = sinusoidal_positions(4, 8)
        pos = torch.arange(4, dtype=torch.float32)
        assert torch.allclose(table[:, 0], torch.sin(pos), atol=1e-6)
        assert torch.allclose(table[:, 1], torch.cos(pos), atol=1e-6)

    def test_values_bounded(self):
        table = sinusoidal_positions(100, 16)
        assert table.abs().max() <= 1.0


class TestClipModel:
    def test_pixel_model_matches_manual_composition(self):
        torch.manual_seed(0)
        enc = toy_encoder()
        head = GruHead(4, 6, 1)
        model = ClipModel(head=head, encoder=enc)
        x = torch.rand(2, 3, 3, 16, 16)
        direct = model(x)
        lat = enc(x.reshape(6, 3, 16, 16)).reshape(2, 3, 4)
        assert torch.allclose(direct, head(lat))

    def test_latent_model_passthrough(self):
        torch.manual_seed(0)
        head = BaselineHead(4, 4, 1)
        model = ClipModel(head=head)
        x = torch.randn(2, 3, 4)
        assert torch.equal(model(x), head(x))


class TestArchSpec:
    def test_defaults_and_validation(self):
        spec = ArchSpec()
        assert spec.encoder in ENCODERS and spec.head in HEADS
        with pytest.raises(ValueError):
            ArchSpec(encoder="pixels")
        with pytest.raises(ValueError):
            ArchSpec(head="rnn")
        with pytest.raises(ValueError):
            ArchSpec(task="5_class")

    def test_build_model_encoder_wiring(self):
        pixel = build_model(ArchSpec(encoder="residual_cnn", latent_dim=8))
        assert isinstance(pixel.encoder, FrameEncoder)
        latent = build_model(ArchSpec(encoder="external_latents", latent_dim=8))
        assert latent.encoder is None

    def test_build_model_head_types(self):
        for head, cls in (("baseline", BaselineHead), ("gru", GruHead),
                          ("transformer", TransformerHead)):
            model = build_model(ArchSpec(head=head, latent_dim=8, hidden=8, n_heads=2))
            assert isinstance(model.head, cls)

    def test_default_latent_dim(self):
        assert LATENT_DIM == 512


class TestLatentLoading:
    class FakeStore:
        def __init__(self, latents):
            self.latents = latents

        def get(self, chunk_id, variant=None):
            return self.latents

    def test_shape_check(self):
        store = self.FakeStore(np.zeros((4, 8), np.float32))
        out = load_external_latents(store, "c0", expect_shape=(4, 8))
        assert out.shape == (4, 8)
        with pytest.raises(ValueError):
            load_external_latents(store, "c0", expect_shape=(5, 8))

    def test_non_finite_rejected(self):
        bad = np.full((2, 4), np.nan, np.float32)
        with pytest.raises(ValueError):
            load_external_latents(self.FakeStore(bad), "c0")


class TestPredictions:
    def test_regression_squeezes(self):
        out = predictions_from_outputs(torch.randn(2, 5, 1), "regression")
        assert out.shape == (2, 5)

    def test_binary_is_probability(self):
        # logits bounded so float32 sigmoid cannot saturate to exactly 0 or 1
        logits = torch.linspace(-12.0, 12.0, 10).reshape(2, 5, 1)
        out = predictions_from_outputs(logits, "binary")
        assert out.shape == (2, 5)
        assert torch.all((out > 0) & (out < 1))
        assert torch.allclose(out, torch.sigmoid(logits.squeeze(-1)))

    def test_3class_softmax(self):
        out = predictions_from_outputs(torch.randn(2, 5, 3), "3_class")
        assert torch.allclose(out.sum(-1), torch.ones(2, 5))

    def test_count_parameters(self):
        head = BaselineHead(4, 3, 1)
        assert count_parameters(head) == (4 * 3 + 3) + (3 * 1 + 1)
