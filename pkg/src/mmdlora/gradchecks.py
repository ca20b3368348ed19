"""Finite-difference verification harness for every differentiable surface.

Each registered check builds a small seeded problem, runs central-difference
gradient checking against the autodiff result, and reports the worst
coordinate. Problems use generic points: kinked or convention-guarded ops
(relu at 0, cosine at a zero vector) are checked away from their special
sets, and composed-loss checks run at reduced dimensions so sweeping every
coordinate stays fast.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoders import init_frozen, encode_image
from .lora import adapter_params, new_adapter_set
from .objectives import EmbeddingBundle, VtcclConfig, alignment_loss, pretrain_loss, vtccl_loss
from .tensor import SeededRng, TensorValue
from .trainer import DepthHead, new_depth_head

TOLERANCE = 1e-4
STEP = 1e-5


def grad_check_report(f, params, names=None, h=STEP) -> dict:
    """Like tensor.grad_check but reporting the worst coordinate."""
    names = names or [f"p{i}" for i in range(len(params))]
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    autos = []
    for p in params:
        autos.append(np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        p.grad = None

    worst = {"max_err": 0.0, "param": names[0] if names else "", "coord": 0}
    for name, p, ga in zip(names, params, autos):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            gfd = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - gfd) / max(1.0, abs(gfd))
            if err > worst["max_err"]:
                worst = {"max_err": err, "param": name, "coord": i}
    return worst


def _rand(rng, shape, lo=-1.0, hi=1.0, grad=True):
    return TensorValue(rng.uniform(lo, hi, shape), requires_grad=grad)


def check_elementwise():
    rng = SeededRng(11)
    a = _rand(rng, (3, 4))
    b = _rand(rng, (3, 4))
    c = _rand(rng, (3, 4), lo=0.5, hi=2.0)

    def f():
        y = (a + b) * (a - b * 0.5)
        y = y / c + T.relu(a * 2.0) + T.exp(b * 0.3) + T.log(c) + T.softplus(a)
        return y.mean() + (a * a).sum() * 0.1
    return grad_check_report(f, [a, b, c], ["a", "b", "c"])


def check_matmul():
    rng = SeededRng(12)
    w = _rand(rng, (4, 5))
    x = _rand(rng, (2, 5))

    def f():
        y = T.matmul(x, T.transpose(w))
        return T.matmul(y, T.transpose(y)).sum()
    return grad_check_report(f, [w, x], ["w", "x"])


def check_reductions():
    rng = SeededRng(13)
    a = _rand(rng, (6,))
    b = _rand(rng, (6,))

    def f():
        return a.sum() * 0.2 + b.mean() + T.l2_norm(a) + T.l1_mean(a, b)
    return grad_check_report(f, [a, b], ["a", "b"])


def check_cosine():
    rng = SeededRng(14)
    u = _rand(rng, (8,))
    v = _rand(rng, (8,))

    def f():
        return 1.0 - T.cosine_sim(u, v)
    return grad_check_report(f, [u, v], ["u", "v"])


def check_softmax():
    rng = SeededRng(15)
    x = _rand(rng, (3, 5))

    def f():
        y = T.softmax_rows(x)
        return (y * y).sum() + T.logsumexp_rows(x * 0.7).mean()
    return grad_check_report(f, [x], ["x"])


def check_layernorm():
    rng = SeededRng(16)
    x = _rand(rng, (3, 6))
    gain = _rand(rng, (6,), lo=0.5, hi=1.5)
    bias = _rand(rng, (6,), lo=-0.3, hi=0.3)

    def f():
        y = T.layernorm_rows(x, gain, bias)
        return (y * y).sum()
    return grad_check_report(f, [x, gain, bias], ["x", "gain", "bias"])


def check_row_utils():
    rng = SeededRng(17)
    x = _rand(rng, (4, 5))
    v = _rand(rng, (5,))

    def f():
        rows = [T.unit_rows(v), T.mean_axis0(x)]
        stacked = T.stack_rows(rows)
        return T.add_rowvec(T.unit_rows(x), v).sum() * 0.5 + (stacked * stacked).sum()
    return grad_check_report(f, [x, v], ["x", "v"])


def _toy_setup(seed=21, d=8, blocks=2, patch=2, crop=4, rank=2):
    image_enc, _ = init_frozen(seed, d=d, n_blocks=blocks, patch=patch, channels=3)
    rng = SeededRng(seed).derive("check")
    sets = [
        new_adapter_set(rng.derive(dom), dom, blocks, ("q", "k", "v", "proj"), d, rank, float(rank))
        for dom in ("night", "rain")
    ]
    # move B off the exact zero-init point: the alignment cosine is a
    # convention (not a derivative) there
    for s in sets:
        for ad in s.adapters.values():
            ad.b.data += rng.uniform(-0.2, 0.2, ad.b.data.shape)
            ad.a.data += rng.uniform(-0.2, 0.2, ad.a.data.shape)
    crops = rng.uniform(0.0, 1.0, (2, crop, crop, 3))
    texts = [T.unit_rows(TensorValue(rng.uniform(-1, 1, d))) for _ in range(3)]
    texts = [TensorValue(t.data) for t in texts]
    return image_enc, sets, crops, texts


def check_attention_block():
    image_enc, sets, crops, _ = _toy_setup(seed=22)
    params = [p for _, p in sets[0].params()][:4]
    names = [n for n, _ in sets[0].params()][:4]

    def f():
        emb = encode_image(image_enc, crops, sets[0])
        return (emb * emb).sum() + emb.mean()
    return grad_check_report(f, params, names)


def _free_bundle(seed=23, n=3, d=6, m=2):
    rng = SeededRng(seed)
    f_s_v = _rand(rng, (n, d))
    f_t_v = [_rand(rng, (n, d)) for _ in range(m)]
    f_s_l = _rand(rng, (d,))
    f_t_l = [_rand(rng, (d,)) for _ in range(m)]
    bundle = EmbeddingBundle(f_s_v=f_s_v, f_t_v=f_t_v, f_s_l=f_s_l, f_t_l=f_t_l)
    params = [f_s_v, *f_t_v, f_s_l, *f_t_l]
    names = ["f_s_v"] + [f"f_t_v{i}" for i in range(m)] + ["f_s_l"] + [f"f_t_l{i}" for i in range(m)]
    return bundle, params, names


def check_alignment_loss():
    bundle, params, names = _free_bundle(seed=24)

    def f():
        return alignment_loss(bundle, 0) + alignment_loss(bundle, 1) * 0.5
    return grad_check_report(f, params, names)


def check_vtccl_loss():
    bundle, params, names = _free_bundle(seed=25)
    cfg = VtcclConfig(tau=0.2, lambdas=[1.0, 0.4, 0.8])

    def f():
        return vtccl_loss(bundle, cfg)
    return grad_check_report(f, params, names)


def check_pretrain_loss():
    image_enc, sets, crops, texts = _toy_setup(seed=26)
    cfg = VtcclConfig(tau=0.1, lambdas=[1.0, 0.5, 0.5])
    params = [p for _, p in adapter_params(sets)]
    names = [n for n, _ in adapter_params(sets)]

    def f():
        f_s_v = encode_image(image_enc, crops)
        f_t_v = [encode_image(image_enc, crops, s) for s in sets]
        bundle = EmbeddingBundle(
            f_s_v=f_s_v, f_t_v=f_t_v, f_s_l=texts[0], f_t_l=texts[1:],
        )
        return pretrain_loss(bundle, cfg)
    return grad_check_report(f, params, names)


def check_depth_head():
    rng = SeededRng(27)
    head = new_depth_head(rng, d=8, patch=2, d_min=1.0, d_max=80.0)
    states = TensorValue(rng.uniform(-1.0, 1.0, (4, 8)))
    gt = TensorValue(rng.uniform(1.0, 80.0, (4, 4)))

    def f():
        return T.l1_mean(head.forward_tokens(states), gt)
    return grad_check_report(f, [head.w, head.b], ["head.w", "head.b"])


ALL_CHECKS = (
    ("elementwise suite", check_elementwise),
    ("matmul/transpose", check_matmul),
    ("reductions", check_reductions),
    ("cosine_sim", check_cosine),
    ("softmax/logsumexp rows", check_softmax),
    ("layernorm rows", check_layernorm),
    ("row utilities", check_row_utils),
    ("attention block (adapters)", check_attention_block),
    ("alignment_loss", check_alignment_loss),
    ("vtccl_loss", check_vtccl_loss),
    ("pretrain_loss (adapters)", check_pretrain_loss),
    ("depth head", check_depth_head),
)


def run_all(tolerance: float = TOLERANCE):
    """Run every check; returns (rows, all_passed)."""
    rows = []
    ok = True
    for name, fn in ALL_CHECKS:
        detail = fn()
        passed = detail["max_err"] <= tolerance
        ok = ok and passed
        rows.append({"name": name, **detail, "passed": passed})
    return rows, ok
