import math

import pytest
import torch
import torch.nn as nn

from patchalign.errors import ValidationError
from patchalign.model import (PAD_ID, UNK_ID, ImageEncoder, ImageEncoderConfig,
                              ProjectionHead, TextEncoder, TextEncoderConfig,
                              Tokenizer, interpolate_pos_embeddings,
                              project_prototypes)
from patchalign.data import make_captions, sample_scene

torch.manual_seed(0)


@pytest.fixture(scope="module")
def tok():
    return Tokenizer(max_len=16)


@pytest.fixture(scope="module")
def encoder():
    torch.manual_seed(1)
    return ImageEncoder(ImageEncoderConfig(canvas=32, patch_size=8, embed_dim=32,
                                           depth=2, heads=4)).eval()


class TestTokenizer:
    def test_known_words_plus_padding(self, tok):
        ids = tok.tokenize("a red circle")
        assert len(ids) == 16
        assert all(i not in (PAD_ID, UNK_ID) for i in ids[:3])
        assert all(i == PAD_ID for i in ids[3:])

    def test_oov_maps_to_unk(self, tok):
        assert tok.tokenize("xyzzy")[0] == UNK_ID
        assert tok.tokenize("")[0] == UNK_ID

    def test_roundtrip_over_template_corpus(self, tok):
        for seed in range(10):
            caps = make_captions(sample_scene(seed, 64))
            for text in (caps.short, caps.medium):
                ids = tok.tokenize(text)
                assert tok.detokenize(ids) == text
                assert tok.tokenize(tok.detokenize(ids)) == ids


class TestImageEncoder:
    def test_all_zero_mask_is_noop(self, encoder):
        img = torch.rand(2, 3, 32, 32)
        mask = torch.zeros(2, 16)
        with torch.no_grad():
            a = encoder(img, mask=mask)
            b = encoder(img)
        assert torch.equal(a.patches, b.patches)
        assert torch.equal(a.cls1, b.cls1)
        assert torch.equal(a.values, b.values)

    def test_masked_pixels_never_matter(self, encoder):
        torch.manual_seed(3)
        img1 = torch.rand(1, 3, 32, 32)
        mask = torch.zeros(1, 16)
        mask[0, [1, 5, 9, 14]] = 1.0
        img2 = img1.clone()
        # scramble pixels inside the masked patches only
        for p in (1, 5, 9, 14):
            r, c = divmod(p, 4)
            img2[0, :, r * 8:(r + 1) * 8, c * 8:(c + 1) * 8] = torch.rand(3, 8, 8)
        with torch.no_grad():
            a = encoder(img1, mask=mask)
            b = encoder(img2, mask=mask)
        assert torch.equal(a.patches, b.patches)
        assert torch.equal(a.cls1, b.cls1)
        assert torch.equal(a.cls2, b.cls2)
        assert torch.equal(a.values, b.values)

    def test_cls_embeddings_unit_norm(self, encoder):
        with torch.no_grad():
            out = encoder(torch.rand(4, 3, 32, 32))
        assert torch.allclose(out.cls1.norm(dim=-1), torch.ones(4), atol=1e-6)
        assert torch.allclose(out.cls2.norm(dim=-1), torch.ones(4), atol=1e-6)

    def test_shapes(self, encoder):
        with torch.no_grad():
            out = encoder(torch.rand(2, 3, 32, 32))
        assert out.patches.shape == (2, 16, 32)
        assert out.values.shape == (2, 16, 32)

    def test_joint_patch_embeddings_composition(self, encoder):
        torch.manual_seed(7)
        img = torch.rand(2, 3, 32, 32)
        with torch.no_grad():
            out = encoder(img)
            joint = encoder.joint_patch_embeddings(img)
            expected = torch.nn.functional.normalize(
                encoder.proj_cls1(encoder.norm(encoder.blocks[-1].attn.proj(out.values))),
                dim=-1,
            )
        assert joint.shape == out.values.shape[:2] + (encoder.proj_cls1.out_features,)
        assert torch.equal(joint, expected)
        assert torch.allclose(joint.norm(dim=-1), torch.ones(2, 16), atol=1e-6)

    def test_bad_input_shapes_rejected(self, encoder):
        with pytest.raises(ValidationError):
            encoder(torch.rand(2, 3, 30, 30))
        with pytest.raises(ValidationError):
            encoder(torch.rand(2, 3, 32, 32), mask=torch.zeros(2, 9))

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            ImageEncoderConfig(canvas=30, patch_size=8)
        with pytest.raises(ValidationError):
            ImageEncoderConfig(embed_dim=30, heads=4)


@pytest.fixture(scope="module")
def text(tok):
    torch.manual_seed(2)
    return TextEncoder(TextEncoderConfig(embed_dim=32, depth=2, heads=4,
                                         max_len=16), tok.vocab_size).eval()


class TestTextEncoder:

    def test_unit_norm(self, text, tok):
        with torch.no_grad():
            emb = text(tok.encode_batch(["a red circle", "xyzzy", ""]))
        assert torch.allclose(emb.norm(dim=-1), torch.ones(3), atol=1e-6)

    def test_deterministic(self, text, tok):
        batch = tok.encode_batch(["a green star above a red circle"])
        with torch.no_grad():
            assert torch.equal(text(batch), text(batch))

    def test_pad_suffix_invariant(self, text, tok):
        ids = tok.tokenize("a red circle")[:3]
        short = torch.tensor([ids + [PAD_ID] * 2])
        long = torch.tensor([ids + [PAD_ID] * 13])
        with torch.no_grad():
            a, b = text(short), text(long)
        assert torch.allclose(a, b, atol=1e-6)

    def test_overlength_sets_truncation_flag(self, text, tok):
        toks = torch.full((1, 40), UNK_ID)
        with torch.no_grad():
            text(toks)
        assert text.last_truncated


class TestPosInterpolation:
    def test_identity(self):
        pos = torch.rand(4, 4, 8)
        assert torch.equal(interpolate_pos_embeddings(pos, (4, 4)), pos)

    def test_constant_preserved(self):
        pos = torch.full((3, 3, 5), 2.5)
        out = interpolate_pos_embeddings(pos, (7, 5))
        assert torch.allclose(out, torch.full((7, 5, 5), 2.5), atol=1e-6)

    def test_hand_bilinear_center(self):
        pos = torch.tensor([[[0.0], [1.0]], [[2.0], [3.0]]])
        out = interpolate_pos_embeddings(pos, (3, 3))
        assert out.shape == (3, 3, 1)
        assert abs(out[1, 1, 0].item() - 1.5) < 1e-6

    def test_invalid_grid(self):
        with pytest.raises(ValidationError):
            interpolate_pos_embeddings(torch.rand(2, 2, 4), (0, 3))


class _FixedLogits(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = logits

    def forward(self, x):
        return self.logits


class TestPrototypes:
    def test_zero_logits_uniform(self):
        head = _FixedLogits(torch.zeros(4))
        dist = project_prototypes(torch.zeros(1), head, temperature=0.1)
        assert torch.allclose(dist, torch.full((4,), 0.25), atol=1e-7)

    def test_logits_equal_center_uniform(self):
        logits = torch.tensor([3.0, -1.0, 0.5, 2.0])
        dist = project_prototypes(torch.zeros(1), _FixedLogits(logits),
                                  temperature=0.07, center=logits)
        assert torch.allclose(dist, torch.full((4,), 0.25), atol=1e-7)

    def test_scalar_softmax_value(self):
        dist = project_prototypes(torch.zeros(1), _FixedLogits(torch.tensor([2.0, 0.0])),
                                  temperature=1.0)
        e2 = math.exp(2.0)
        expected = torch.tensor([e2 / (e2 + 1.0), 1.0 / (e2 + 1.0)])
        assert torch.allclose(dist, expected, atol=1e-6)

    def test_distribution_contract(self):
        torch.manual_seed(4)
        head = ProjectionHead(16, prototype_dim=32)
        dist = project_prototypes(torch.randn(8, 16), head, temperature=0.1)
        assert torch.allclose(dist.sum(dim=-1), torch.ones(8), atol=1e-6)
        assert (dist >= 0).all() and (dist <= 1).all()

    @pytest.mark.parametrize("seed", range(10))
    def test_sharpening_reduces_entropy(self, seed):
        g = torch.Generator().manual_seed(seed)
        logits = torch.randn(16, generator=g)
        def entropy(t):
            d = project_prototypes(torch.zeros(1), _FixedLogits(logits), temperature=t)
            return -(d * d.clamp_min(1e-12).log()).sum().item()
        assert entropy(0.04) <= entropy(0.1) + 1e-9

    def test_temperature_validation(self):
        with pytest.raises(ValidationError):
            project_prototypes(torch.zeros(1), _FixedLogits(torch.zeros(3)), temperature=0.0)

    def test_nonfinite_logits_raise(self):
        from patchalign.errors import NumericError
        with pytest.raises(NumericError):
            project_prototypes(torch.zeros(1),
                               _FixedLogits(torch.tensor([float("nan"), 0.0])), 0.1)
