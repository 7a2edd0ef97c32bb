import numpy as np
import pytest
import torch

from mefem.masking import GridSpec
from mefem.vit import (
    Encoder,
    EncoderConfig,
    Predictor,
    PredictorConfig,
    build_models,
    ema_update,
)

from helpers import param_checksum

TINY_GRID = GridSpec(patches_per_axis=4, patch_size=4)
TINY = EncoderConfig(embed_dim=32, depth=2, num_heads=2, grid=TINY_GRID)


@pytest.fixture(scope="module")
def models():
    return build_models(TINY, PredictorConfig(depth=2), seed=0)


def random_images(batch, grid=TINY_GRID, seed=0):
    rng = np.random.default_rng(seed)
    return torch.as_tensor(rng.normal(0, 1, (batch, 3, grid.image_size, grid.image_size)),
                           dtype=torch.float32)


class TestEncoderConfig:
    def test_tiny_defaults(self):
        config = EncoderConfig()
        assert (config.embed_dim, config.depth, config.num_heads, config.mlp_ratio) == (192, 6, 3, 4.0)
        assert config.grid.image_size == 224
        assert config.use_cls

    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            EncoderConfig(embed_dim=50, num_heads=3)


class TestEncoderForward:
    def test_full_grid_token_count(self, models):
        encoder, _, _ = models
        out = encoder(random_images(2), token_indices=None, include_cls=True)
        assert out.shape == (2, TINY_GRID.num_patches + 1, 32)

    def test_positional_table_row_count(self, models):
        encoder, _, _ = models
        assert encoder.pos_embed.shape[0] == TINY_GRID.num_patches + 1

    def test_subset_encoding_shape_and_cls_first(self, models):
        encoder, _, _ = models
        images = random_images(3)
        idx = torch.tensor([1, 5, 9])
        out = encoder(images, idx, include_cls=True)
        assert out.shape == (3, 4, 32)
        no_cls = encoder(images, idx, include_cls=False)
        assert no_cls.shape == (3, 3, 32)
        assert torch.isfinite(out).all()

    def test_permutation_equivariance(self, models):
        encoder, _, _ = models
        images = random_images(2)
        idx = torch.tensor([0, 3, 7, 12])
        perm = torch.tensor([2, 0, 3, 1])
        out = encoder(images, idx, include_cls=False)
        out_perm = encoder(images, idx[perm], include_cls=False)
        assert torch.allclose(out[:, perm], out_perm, atol=1e-5)

    def test_positional_rows_follow_indices(self, models):
        encoder, _, _ = models
        images = random_images(1)
        with_a = encoder(images, torch.tensor([2, 3]), include_cls=False).detach().clone()
        with_b = encoder(images, torch.tensor([8, 9]), include_cls=False).detach().clone()
        saved_row = encoder.pos_embed[3].detach().clone()
        with torch.no_grad():
            encoder.pos_embed[3] += 0.5  # perturb one patch position (row idx+1)
        try:
            changed = encoder(images, torch.tensor([2, 3]), include_cls=False)
            unchanged = encoder(images, torch.tensor([8, 9]), include_cls=False)
        finally:
            with torch.no_grad():
                encoder.pos_embed[3].copy_(saved_row)
        assert not torch.allclose(with_a, changed)
        assert torch.equal(with_b, unchanged)

    def test_per_sample_indices(self, models):
        encoder, _, _ = models
        images = random_images(2)
        idx = torch.tensor([[0, 1], [14, 15]])
        out = encoder(images, idx)
        assert out.shape == (2, 3, 32)

    def test_rejects_out_of_range_index(self, models):
        encoder, _, _ = models
        with pytest.raises(ValueError):
            encoder(random_images(1), torch.tensor([16]))

    def test_rejects_unnormalized_input(self, models):
        encoder, _, _ = models
        raw = torch.full((1, 3, 16, 16), 255.0)
        with pytest.raises(ValueError):
            encoder(raw)

    def test_rejects_non_finite_input(self, models):
        encoder, _, _ = models
        bad = random_images(1)
        bad[0, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            encoder(bad)

    def test_rejects_empty_tokens_without_cls(self, models):
        encoder, _, _ = models
        with pytest.raises(ValueError):
            encoder(random_images(1), torch.zeros((1, 0), dtype=torch.long), include_cls=False)

    def test_patchify_row_major(self, models):
        encoder, _, _ = models
        images = torch.zeros(1, 3, 16, 16)
        images[0, :, 4:8, 8:12] = 1.0  # patch row 1, col 2 -> index 6
        patches = encoder.patchify(images)
        hot = (patches.abs().sum(-1) > 0).nonzero()
        assert hot.tolist() == [[0, 6]]

    def test_determinism_across_builds(self):
        enc_a, _, _ = build_models(TINY, PredictorConfig(depth=2), seed=123)
        enc_b, _, _ = build_models(TINY, PredictorConfig(depth=2), seed=123)
        images = random_images(2, seed=5)
        assert torch.equal(enc_a(images), enc_b(images))


class TestPredictor:
    def test_cls_only_prediction(self, models):
        encoder, _, predictor = models
        latents = encoder(random_images(2), torch.tensor([0, 1, 2]), include_cls=True)
        out = predictor(latents, None, predict_cls=True)
        assert out.shape == (2, 1, 32)

    def test_target_position_count(self, models):
        encoder, _, predictor = models
        latents = encoder(random_images(2), torch.tensor([0, 1]), include_cls=False)
        positions = torch.arange(2, 16)
        out = predictor(latents, positions, predict_cls=False)
        assert out.shape == (2, 14, 32)
        with_cls = predictor(latents, positions, predict_cls=True)
        assert with_cls.shape == (2, 15, 32)

    def test_outputs_finite_with_nonzero_norm(self, models):
        encoder, _, predictor = models
        latents = encoder(random_images(1), torch.tensor([0, 1]), include_cls=False)
        out = predictor(latents, torch.tensor([5, 6]), predict_cls=False)
        assert torch.isfinite(out).all()
        assert out.norm(dim=-1).min() > 0

    def test_rejects_width_mismatch(self, models):
        _, _, predictor = models
        with pytest.raises(ValueError):
            predictor(torch.zeros(1, 4, 64), torch.tensor([0]))

    def test_rejects_empty_request(self, models):
        encoder, _, predictor = models
        latents = encoder(random_images(1), torch.tensor([0]), include_cls=False)
        with pytest.raises(ValueError):
            predictor(latents, None, predict_cls=False)

    def test_width_capped_by_encoder(self):
        with pytest.raises(ValueError):
            PredictorConfig(embed_dim=64).resolve(EncoderConfig(embed_dim=32, num_heads=2))


class TestEmaUpdate:
    def test_momentum_one_is_identity_bitwise(self, models):
        _, teacher, _ = models
        before = {k: v.clone() for k, v in teacher.state_dict().items()}
        source = Encoder(TINY)
        ema_update(teacher, source, momentum=1.0)
        for k, v in teacher.state_dict().items():
            assert torch.equal(v, before[k])

    def test_momentum_zero_copies_source_bitwise(self):
        torch.manual_seed(0)
        teacher, source = Encoder(TINY), Encoder(TINY)
        ema_update(teacher, source, momentum=0.0)
        for (_, t), (_, s) in zip(teacher.named_parameters(), source.named_parameters()):
            assert torch.equal(t, s)

    def test_scalar_midpoint(self):
        teacher, source = torch.nn.Linear(1, 1), torch.nn.Linear(1, 1)
        with torch.no_grad():
            teacher.weight.fill_(2.0)
            source.weight.fill_(4.0)
        ema_update(teacher, source, momentum=0.5)
        assert teacher.weight.item() == 3.0

    def test_composition_is_squared_momentum(self):
        # two updates against a fixed source match one update at m^2
        torch.manual_seed(1)
        teacher_a = Encoder(TINY).double()
        torch.manual_seed(2)
        source = Encoder(TINY).double()
        import copy

        teacher_b = copy.deepcopy(teacher_a)
        m = 0.9
        ema_update(teacher_a, source, m)
        ema_update(teacher_a, source, m)
        ema_update(teacher_b, source, m * m)
        for (_, a), (_, b) in zip(teacher_a.named_parameters(), teacher_b.named_parameters()):
            assert torch.allclose(a, b, atol=1e-12, rtol=0)

    def test_rejects_bad_momentum(self, models):
        encoder, teacher, _ = models
        with pytest.raises(ValueError):
            ema_update(teacher, encoder, momentum=1.5)

    def test_rejects_shape_mismatch(self):
        big = Encoder(EncoderConfig(embed_dim=64, depth=2, num_heads=2, grid=TINY_GRID))
        small = Encoder(TINY)
        with pytest.raises(ValueError):
            ema_update(big, small, momentum=0.5)


class TestBuildModels:
    def test_teacher_starts_as_exact_copy(self):
        encoder, teacher, _ = build_models(TINY, PredictorConfig(depth=2), seed=11)
        assert param_checksum(encoder) == param_checksum(teacher)

    def test_teacher_has_no_grad(self, models):
        _, teacher, _ = models
        assert all(not p.requires_grad for p in teacher.parameters())

    def test_sinusoidal_table_is_a_buffer(self):
        config = EncoderConfig(embed_dim=32, depth=1, num_heads=2, grid=TINY_GRID,
                               pos_embedding="sinusoidal")
        encoder = Encoder(config)
        names = dict(encoder.named_parameters())
        assert "pos_embed" not in names
        assert encoder.pos_embed.shape == (17, 32)
