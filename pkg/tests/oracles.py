"""Independent reference implementations used by the tests.

Nothing here imports the code under test except for the parameter
container it perturbs.
"""

from __future__ import annotations

import math

import numpy as np
import torch


def central_difference(loss_fn, param: torch.Tensor, direction: torch.Tensor, h: float) -> float:
    """(L(p + h d) - L(p - h d)) / 2h, restoring ``param`` afterwards."""
    with torch.no_grad():
        orig = param.detach().clone()
        param.add_(h * direction)
        plus = float(loss_fn())
        param.copy_(orig - h * direction)
        minus = float(loss_fn())
        param.copy_(orig)
    return (plus - minus) / (2 * h)


def gradient_check(model, loss_fn, h=1e-4, coords_per_array=3, seed=0, floor=1e-6) -> dict[str, float]:
    """Per-array relative error between autograd and central differences.

    For each parameter array three kinds of probe are compared: the
    gradient's own direction, one random unit direction, and a few single
    coordinates (always including the largest-magnitude entry). The
    reported error is max |fd - analytic| over probes divided by the
    array's gradient scale (its 2-norm for directional probes, its
    max-abs entry for coordinates), floored at ``floor``. The floor keeps
    arrays whose true gradient is identically zero (attention key biases,
    which the softmax cancels) from dividing rounding noise by ~0.
    """
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in model.named_parameters():
        g = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        gnorm = float(g.norm())
        gmax = float(g.abs().max())
        worst = 0.0
        probes = []
        if gnorm > 0:
            probes.append((g / gnorm, gnorm, max(gnorm, floor)))
        r = torch.from_numpy(rng.standard_normal(p.shape)).to(p.dtype)
        r = r / r.norm()
        probes.append((r, float((g * r).sum()), max(gnorm, floor)))
        flat = g.reshape(-1)
        picks = {int(flat.abs().argmax())} | set(rng.integers(0, flat.numel(), size=coords_per_array).tolist())
        for i in picks:
            e = torch.zeros_like(flat)
            e[i] = 1.0
            probes.append((e.reshape(p.shape), float(flat[i]), max(gmax, floor)))
        for direction, analytic, scale in probes:
            fd = central_difference(lambda: loss_fn().detach(), p, direction, h)
            worst = max(worst, abs(fd - analytic) / scale)
        errors[name] = worst
    model.zero_grad(set_to_none=True)
    return errors


def sort_reference_masks(scores, r_h, r_l):
    """Exhaustive reference: sort (-score, index) for high, (score, index) for low."""
    P = len(scores)
    k_h = math.floor(r_h * P + 0.5)
    k_l = min(math.floor(r_l * P + 0.5), P - k_h)
    order = sorted(range(P), key=lambda i: (-scores[i], i))
    high = set(order[:k_h])
    rest = sorted((i for i in range(P) if i not in high), key=lambda i: (scores[i], i))
    low = set(rest[:k_l])
    return [i in high for i in range(P)], [i in low for i in range(P)]


def adamw_scalar(theta, g, m, v, t, lr, b1, b2, eps, wd):
    """One AdamW step on a Python float, decay applied first."""
    theta = theta * (1 - lr * wd)
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return theta - lr * m_hat / (math.sqrt(v_hat) + eps), m, v


def ranks_bruteforce(sim: np.ndarray) -> list[int]:
    """Rank of the diagonal in each row by explicit sort, ties to lower index."""
    out = []
    for i, row in enumerate(sim):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        out.append(order.index(i) + 1)
    return out


# -- numpy forward reference --------------------------------------------------

_erf = np.vectorize(math.erf)


def _ln(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def _lin(S, prefix, x):
    y = x @ S[prefix + ".weight"].T
    return y + S[prefix + ".bias"] if prefix + ".bias" in S else y


def _mha(S, prefix, x, ctx, allowed, heads):
    """allowed: (Lq, Lk) bool for a single example."""
    d = x.shape[-1]
    hd = d // heads
    q, k, v = _lin(S, prefix + ".q", x), _lin(S, prefix + ".k", ctx), _lin(S, prefix + ".v", ctx)
    out = np.zeros_like(q)
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
        s = np.where(allowed, s, -np.inf)
        w = np.exp(s - s.max(-1, keepdims=True))
        w = w / w.sum(-1, keepdims=True)
        out[:, sl] = w @ v[:, sl]
    return _lin(S, prefix + ".o", out)


def _block(S, prefix, x, heads, self_allowed, memory=None, mem_allowed=None):
    y = _ln(x, S[prefix + ".norm1.weight"], S[prefix + ".norm1.bias"])
    x = x + _mha(S, prefix + ".attn", y, y, self_allowed, heads)
    if memory is not None:
        y = _ln(x, S[prefix + ".norm_cross.weight"], S[prefix + ".norm_cross.bias"])
        x = x + _mha(S, prefix + ".cross_attn", y, memory, mem_allowed, heads)
    hdn = _lin(S, prefix + ".fc1", _ln(x, S[prefix + ".norm2.weight"], S[prefix + ".norm2.bias"]))
    hdn = 0.5 * hdn * (1.0 + _erf(hdn / math.sqrt(2.0)))
    return x + _lin(S, prefix + ".fc2", hdn)


def state_arrays(model) -> dict[str, np.ndarray]:
    return {k: v.detach().double().numpy() for k, v in model.state_dict().items()}


def np_encode_text(S, ids, layers, heads):
    ids = list(ids)
    L = len(ids)
    x = S["tok_embed"][ids] + S["txt_pos"][:L]
    allowed = np.array([[j <= i and ids[j] != 0 for j in range(L)] for i in range(L)])
    for layer in range(layers):
        x = _block(S, f"txt_enc.{layer}", x, heads, allowed)
    return _ln(x, S["txt_enc_norm.weight"], S["txt_enc_norm.bias"])


def np_encode_image(S, patches, layers, heads, mask=None):
    x = _lin(S, "patch_proj", patches)
    if mask is not None:
        x = np.where(np.asarray(mask)[:, None], S["mask_token"], x)
    x = np.vstack([S["img_cls"] + S["img_pos"][0], x + S["img_pos"][1:]])
    allowed = np.ones((len(x), len(x)), dtype=bool)
    for layer in range(layers):
        x = _block(S, f"img_enc.{layer}", x, heads, allowed)
    return _ln(x, S["img_enc_norm.weight"], S["img_enc_norm.bias"])


def np_decode_text(S, text_h, image_mem, ids, layers, heads):
    L = len(ids)
    allowed = np.array([[j <= i and ids[j] != 0 for j in range(L)] for i in range(L)])
    mem_allowed = np.ones((L, len(image_mem)), dtype=bool)
    x = text_h
    for layer in range(layers):
        x = _block(S, f"txt_dec.{layer}", x, heads, allowed, image_mem, mem_allowed)
    return _lin(S, "token_head", _ln(x, S["txt_dec_norm.weight"], S["txt_dec_norm.bias"]))


def np_decode_image(S, image_h, text_mem, ids, layers, heads):
    allowed = np.ones((len(image_h), len(image_h)), dtype=bool)
    mem_allowed = np.tile(np.array([i != 0 for i in ids]), (len(image_h), 1))
    x = image_h
    for layer in range(layers):
        x = _block(S, f"img_dec.{layer}", x, heads, allowed, text_mem, mem_allowed)
    return _lin(S, "pixel_head", _ln(x, S["img_dec_norm.weight"], S["img_dec_norm.bias"])[1:])
