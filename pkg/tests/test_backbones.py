import pytest
import torch
import torch.nn as nn

from retistack.backbones import (
    IN_CHANNELS,
    REGISTRY,
    BackboneError,
    adapt_first_conv,
    build_backbone,
    forward_scores,
    min_input_side,
    parameter_count,
)

TINY_NAMES = [n for n in REGISTRY if n.startswith("tiny_")]


class TestRegistry:
    def test_contains_five_full_and_five_tiny(self):
        assert set(TINY_NAMES) == {"tiny_a", "tiny_b", "tiny_c", "tiny_d", "tiny_e"}
        for name in ("resnet50", "resnet101", "densenet121", "densenet161", "densenet169"):
            assert name in REGISTRY

    def test_unknown_name_lists_registry(self):
        with pytest.raises(BackboneError, match="tiny_a"):
            build_backbone("vgg16", seed=0)

    def test_same_seed_identical_parameters(self):
        a = build_backbone("tiny_a", seed=1)
        b = build_backbone("tiny_a", seed=1)
        for p, q in zip(a.parameters(), b.parameters()):
            assert torch.equal(p, q)

    def test_different_seeds_differ(self):
        a = build_backbone("tiny_a", seed=1)
        b = build_backbone("tiny_a", seed=2)
        assert any(not torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))

    @pytest.mark.parametrize("name", TINY_NAMES)
    def test_tiny_under_200k_params(self, name):
        assert parameter_count(build_backbone(name, seed=0)) <= 200_000

    def test_tiny_architectures_distinct(self):
        counts = {n: parameter_count(build_backbone(n, seed=0)) for n in TINY_NAMES}
        assert len(set(counts.values())) == len(counts)


class TestForward:
    @pytest.mark.parametrize("name", TINY_NAMES)
    def test_two_finite_logits(self, name):
        model = build_backbone(name, seed=3)
        side = min_input_side(name)
        out = model(torch.randn(2, IN_CHANNELS, side, side))
        assert out.shape == (2, 2)
        assert torch.isfinite(out).all()

    def test_scores_rows_sum_to_one(self):
        model = build_backbone("tiny_b", seed=0)
        scores = forward_scores(model, torch.randn(8, 6, 32, 32))
        assert scores.shape == (8, 2)
        assert torch.allclose(scores.sum(dim=1), torch.ones(8), atol=1e-6)

    def test_zero_logits_give_even_scores(self):
        class Zeros(nn.Module):
            def forward(self, x):
                return torch.zeros(x.shape[0], 2)

        scores = forward_scores(Zeros(), torch.randn(3, 6, 32, 32))
        assert torch.allclose(scores, torch.full((3, 2), 0.5))

    def test_wrong_channel_count(self):
        model = build_backbone("tiny_a", seed=0)
        with pytest.raises(BackboneError, match="expected"):
            forward_scores(model, torch.randn(2, 3, 32, 32))

    def test_batch_permutation_covariant(self):
        model = build_backbone("tiny_c", seed=4)
        model.eval()
        x = torch.randn(6, 6, 32, 32)
        perm = torch.tensor([3, 1, 5, 0, 4, 2])
        with torch.no_grad():
            assert torch.allclose(model(x)[perm], model(x[perm]), atol=1e-5)


class TestChannelAdaptation:
    def test_duplicated_input_reproduces_3ch_preactivation(self):
        torch.manual_seed(0)
        conv3 = nn.Conv2d(3, 8, 3, padding=1)
        conv6 = adapt_first_conv(conv3)
        img = torch.randn(2, 3, 16, 16)
        doubled = torch.cat([img, img], dim=1)
        with torch.no_grad():
            assert torch.allclose(conv6(doubled), conv3(img), rtol=1e-5, atol=1e-6)

    def test_rejects_non_3ch(self):
        with pytest.raises(BackboneError):
            adapt_first_conv(nn.Conv2d(6, 8, 3))


class TestCheckpointRoundTrip:
    def test_state_dict_bit_exact(self, tmp_path):
        model = build_backbone("tiny_d", seed=7)
        path = tmp_path / "ckpt.pt"
        torch.save(model.state_dict(), path)
        clone = build_backbone("tiny_d", seed=8)
        clone.load_state_dict(torch.load(path, weights_only=True))
        for p, q in zip(model.state_dict().values(), clone.state_dict().values()):
            assert torch.equal(p, q)
