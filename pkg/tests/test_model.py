import math

import numpy as np
import pytest
import torch

from oracles import np_decode_image, np_decode_text, np_encode_image, np_encode_text, state_arrays
from sycoca.config import ConfigError
from sycoca.model import cls_positions, init_params, no_decay
from sycoca.tokenizer import CLS, PAD


class TestInit:
    def test_deterministic_and_seed_sensitive(self, micro):
        cfg = micro[0]
        a, b, c = (init_params(cfg.model, s) for s in (1, 1, 2))
        for (n, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
            assert torch.equal(pa, pb)
            if pa.numel() > 1 and not n.endswith("bias") and "norm" not in n:
                assert not torch.equal(pa, pc), n

    def test_special_values(self, micro):
        m = init_params(micro[0].model, 0)
        assert m.logit_scale.item() == pytest.approx(1 / 0.07)
        for n, p in m.named_parameters():
            if n.endswith("bias"):
                assert not p.any(), n
            if "norm" in n and n.endswith("weight"):
                assert torch.all(p == 1), n

    def test_logit_scale_clamped(self, micro):
        m = init_params(micro[0].model, 0)
        with torch.no_grad():
            m.log_logit_scale.fill_(10.0)
        assert m.logit_scale.item() == 100.0

    def test_no_decay_set(self, micro):
        m = init_params(micro[0].model, 0)
        exempt = {n for n, _ in m.named_parameters() if no_decay(n)}
        assert {"img_pos", "txt_pos", "log_logit_scale", "patch_proj.bias", "img_enc_norm.weight"} <= exempt
        assert not exempt & {"patch_proj.weight", "tok_embed", "mask_token", "img_cls", "img_proj.weight"}


class TestReferenceForward:
    """Every stack against an independent numpy implementation."""

    def test_all_stacks(self, micro):
        cfg, m, patches, ids = micro
        c = cfg.model
        S = state_arrays(m)
        mask = torch.tensor([[True, False, True, False]] * len(ids))
        with torch.no_grad():
            img_h = m.encode_image(patches, mask)
            txt_h = m.encode_text(ids)
            logits = m.decode_text_logits(txt_h, img_h, ids)
            pix = m.decode_image_pixels(img_h, txt_h, ids)
        for i in range(len(ids)):
            ref_img = np_encode_image(S, patches[i].numpy(), c.n_layers_img_enc, c.n_heads, mask[i].numpy())
            ref_txt = np_encode_text(S, ids[i].tolist(), c.n_layers_txt_enc, c.n_heads)
            np.testing.assert_allclose(img_h[i].numpy(), ref_img, rtol=0, atol=1e-10)
            keep = (ids[i] != PAD).numpy()
            # PAD rows are undefined-but-finite; compare only real positions
            np.testing.assert_allclose(txt_h[i].numpy()[keep], ref_txt[keep], rtol=0, atol=1e-10)
            ref_logits = np_decode_text(S, txt_h[i].numpy(), img_h[i].numpy(), ids[i].tolist(),
                                        c.n_layers_txt_dec, c.n_heads)
            np.testing.assert_allclose(logits[i].numpy()[keep], ref_logits[keep], rtol=0, atol=1e-10)
            ref_pix = np_decode_image(S, img_h[i].numpy(), txt_h[i].numpy(), ids[i].tolist(),
                                      c.n_layers_img_dec, c.n_heads)
            np.testing.assert_allclose(pix[i].numpy(), ref_pix, rtol=0, atol=1e-10)

    def test_shapes(self, micro):
        cfg, m, patches, ids = micro
        c = cfg.model
        with torch.no_grad():
            img_h = m.encode_image(patches)
            txt_h = m.encode_text(ids)
            assert img_h.shape == (4, c.num_patches + 1, c.d_model)
            assert txt_h.shape == (4, c.max_text_len, c.d_model)
            assert m.decode_text_logits(txt_h, img_h, ids).shape == (4, c.max_text_len, c.vocab_size)
            assert m.decode_image_pixels(img_h, txt_h, ids).shape == patches.shape
            e = m.project_image(img_h[:, 0])
            torch.testing.assert_close(e.norm(dim=-1), torch.ones(4, dtype=e.dtype))

    def test_cls_positions(self):
        ids = torch.tensor([[1, 9, 2, CLS, 0, 0], [1, 9, 9, 9, 2, CLS]])
        assert cls_positions(ids).tolist() == [3, 5]


class TestCausality:
    @pytest.mark.parametrize("j", [1, 2, 3])
    def test_text_encoder_prefix_is_bitwise_stable(self, micro, j):
        cfg, m, _, _ = micro
        ids = torch.tensor([[1, 7, 8, 9, 10, 2, CLS, PAD]])
        alt = ids.clone()
        alt[0, j] = 20
        with torch.no_grad():
            a, b = m.encode_text(ids), m.encode_text(alt)
        assert torch.equal(a[:, :j], b[:, :j])
        assert not torch.equal(a[:, j], b[:, j])

    @pytest.mark.parametrize("j", [1, 3, 5])
    def test_text_decoder_prefix_is_bitwise_stable(self, micro, j):
        cfg, m, patches, _ = micro
        ids = torch.tensor([[1, 7, 8, 9, 10, 2, CLS, PAD]])
        alt = ids.clone()
        alt[0, j] = 21
        with torch.no_grad():
            mem = m.encode_image(patches[:1])
            la = m.decode_text_logits(m.encode_text(ids), mem, ids)
            lb = m.decode_text_logits(m.encode_text(alt), mem, alt)
        assert torch.equal(la[:, :j], lb[:, :j])
        assert not torch.equal(la[:, j], lb[:, j])

    def test_pad_embedding_is_isolated(self, micro):
        cfg, m, patches, ids = micro
        assert (ids == PAD).any()
        with torch.no_grad():
            txt_a = m.encode_text(ids)
            pix_a = m.decode_image_pixels(m.encode_image(patches), txt_a, ids)
            m.tok_embed[PAD] += 5.0
            txt_b = m.encode_text(ids)
            pix_b = m.decode_image_pixels(m.encode_image(patches), txt_b, ids)
        keep = ids != PAD
        assert torch.equal(txt_a[keep], txt_b[keep])
        assert torch.equal(pix_a, pix_b)


class TestLocality:
    def test_all_masked_image_ignores_pixels(self, micro):
        cfg, m, patches, _ = micro
        mask = torch.ones(patches.shape[:2], dtype=torch.bool)
        with torch.no_grad():
            a = m.encode_image(patches, mask)
            b = m.encode_image(torch.rand_like(patches), mask)
        assert torch.equal(a, b)

    def test_masked_patch_content_is_ignored(self, micro):
        cfg, m, patches, _ = micro
        mask = torch.zeros(patches.shape[:2], dtype=torch.bool)
        mask[:, 1] = True
        other = patches.clone()
        other[:, 1] = 0.123
        with torch.no_grad():
            assert torch.equal(m.encode_image(patches, mask), m.encode_image(other, mask))
            assert not torch.equal(m.encode_image(patches), m.encode_image(other))

    def test_memory_keep_hides_slots(self, micro):
        cfg, m, patches, ids = micro
        keep = torch.ones(len(ids), patches.shape[1] + 1, dtype=torch.bool)
        keep[:, 2] = False
        with torch.no_grad():
            txt_h, mem = m.encode_text(ids), m.encode_image(patches)
            alt = mem.clone()
            alt[:, 2] += 3.0
            assert torch.equal(m.decode_text_logits(txt_h, mem, ids, keep), m.decode_text_logits(txt_h, alt, ids, keep))
            with pytest.raises(ValueError):
                m.decode_text_logits(txt_h, mem, ids, torch.zeros_like(keep))

    def test_unguided_decoder_ignores_text(self, micro):
        cfg, m, patches, ids = micro
        with torch.no_grad():
            h = m.encode_image(patches)
            a = m.decode_image_pixels(h, m.encode_text(ids), ids, text_guided=False)
            b = m.decode_image_pixels(h, None, None, text_guided=False)
            c = m.decode_image_pixels(h, m.encode_text(ids), ids)
        assert torch.equal(a, b) and not torch.equal(a, c)


class TestErrors:
    def test_bad_shapes(self, micro):
        cfg, m, patches, ids = micro
        with pytest.raises(ConfigError):
            m.encode_image(patches[:, :2])
        with pytest.raises(ConfigError):
            m.encode_image(patches, torch.ones(4, 3, dtype=torch.bool))
        with pytest.raises(ConfigError):
            m.encode_text(torch.ones(2, cfg.model.max_text_len + 1, dtype=torch.long))

    def test_out_of_range_token(self, micro):
        cfg, m, _, ids = micro
        bad = ids.clone()
        bad[0, 1] = cfg.model.vocab_size
        with pytest.raises(ValueError):
            m.encode_text(bad)

    def test_guided_decoder_needs_text(self, micro):
        cfg, m, patches, _ = micro
        with pytest.raises(ConfigError):
            m.decode_image_pixels(m.encode_image(patches), None)


def test_attention_weights_sum_to_one_with_masking(micro):
    # single visible key: output equals the value projection of that key
    cfg, m, _, _ = micro
    attn = m.txt_enc[0].attn
    x = torch.randn(1, 3, cfg.model.d_model, dtype=torch.float64)
    allowed = torch.tensor([[[True, False, False]] * 3])
    out = attn(x, allowed=allowed)
    expected = attn.o(attn.v(x[:, :1])).expand(1, 3, -1)
    torch.testing.assert_close(out, expected, rtol=0, atol=1e-12)
    assert math.isfinite(out.abs().max().item())
