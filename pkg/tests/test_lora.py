"""Adapters: forward composition, merging, counting, checkpoint format."""

import numpy as np
import pytest

from mmdlora import lora
from mmdlora.errors import CheckpointError, ConfigError
from mmdlora.tensor import SeededRng, TensorValue


def _adapter(d=4, k=4, rank=2, alpha=None, seed=0):
    return lora.new_adapter(SeededRng(seed), d, k, rank,
                            rank if alpha is None else alpha, (0, "q"))


def test_new_adapter_zero_init_b():
    ad = _adapter()
    assert np.array_equal(ad.b.data, np.zeros((4, 2)))
    assert np.array_equal(ad.delta(), np.zeros((4, 4)))


def test_rank_bound_enforced():
    with pytest.raises(ConfigError):
        lora.new_adapter(SeededRng(0), 4, 4, 5, 5.0, (0, "q"))


def test_lora_linear_zero_init_equals_base():
    rng = SeededRng(1)
    w0 = TensorValue(rng.uniform(-1, 1, (4, 4)))
    x = TensorValue(rng.uniform(-1, 1, (3, 4)))
    ad = _adapter()
    base = lora.lora_linear(w0, None, x)
    with_ad = lora.lora_linear(w0, ad, x)
    assert np.array_equal(base.data, with_ad.data)


def test_lora_linear_hand_example():
    # W0 = I, B = [1, 0]^T, A = [0, 1], alpha = r = 1, x = [3, 4]
    w0 = TensorValue(np.eye(2))
    ad = lora.LoRAAdapter(
        a=TensorValue([[0.0, 1.0]], requires_grad=True),
        b=TensorValue([[1.0], [0.0]], requires_grad=True),
        rank=1, alpha=1.0, target=(0, "q"),
    )
    y = lora.lora_linear(w0, ad, TensorValue([[3.0, 4.0]]))
    assert np.array_equal(y.data, [[7.0, 4.0]])
    merged = lora.merge(w0, ad)
    assert np.array_equal(ad.b.data @ ad.a.data, [[0.0, 1.0], [0.0, 0.0]])
    assert np.array_equal(merged, [[1.0, 1.0], [0.0, 1.0]])


def test_gradients_reach_only_a_and_b():
    rng = SeededRng(2)
    w0 = TensorValue(rng.uniform(-1, 1, (4, 4)))
    x = TensorValue(rng.uniform(-1, 1, (2, 4)))
    ad = _adapter(seed=3)
    ad.b.data += rng.uniform(-0.5, 0.5, ad.b.data.shape)
    lora.lora_linear(w0, ad, x).sum().backward()
    assert ad.a.grad is not None
    assert ad.b.grad is not None
    assert w0.grad is None
    assert x.grad is None


def test_lora_grad_matches_finite_differences():
    from mmdlora.tensor import grad_check

    rng = SeededRng(4)
    w0 = TensorValue(rng.uniform(-1, 1, (4, 4)))
    x = TensorValue(rng.uniform(-1, 1, (2, 4)))
    ad = _adapter(seed=5)
    ad.b.data += rng.uniform(-0.5, 0.5, ad.b.data.shape)

    def f():
        y = lora.lora_linear(w0, ad, x)
        return (y * y).sum()

    assert grad_check(f, [ad.a, ad.b], h=1e-5) <= 1e-4


def test_merge_equivalence_seeded_trials():
    rng = SeededRng(6)
    worst = 0.0
    for trial in range(100):
        trng = rng.derive(trial)
        w0 = TensorValue(trng.uniform(-1, 1, (8, 8)))
        ad = lora.new_adapter(trng, 8, 8, 4, 4.0, (0, "v"))
        ad.b.data += trng.uniform(-0.5, 0.5, ad.b.data.shape)
        x = TensorValue(trng.uniform(-1, 1, (3, 8)))
        via_lora = lora.lora_linear(w0, ad, x).data
        via_merge = x.data @ lora.merge(w0, ad).T
        scale = max(np.abs(via_merge).max(), 1e-30)
        worst = max(worst, np.abs(via_lora - via_merge).max() / scale)
    assert worst <= 1e-10


def test_merge_shape_mismatch():
    w0 = TensorValue(np.eye(6))
    with pytest.raises(ConfigError):
        lora.merge(w0, _adapter(d=4, k=4))


def _sets(d=64, rank=8, blocks=2, domains=("night",), seed=7):
    rng = SeededRng(seed)
    return [
        lora.new_adapter_set(rng.derive(dom), dom, blocks, ("q", "k", "v", "proj"),
                             d, rank, float(rank))
        for dom in domains
    ]


def test_count_trainable_example():
    sets = _sets()
    # 2 blocks x 4 layers x r(d + k) = 8 * 8 * 128
    assert lora.count_trainable(sets) == 8192


def test_count_trainable_linear_in_rank():
    for r in (2, 4, 8, 16):
        n_r = lora.count_trainable(_sets(rank=r))
        n_2r = lora.count_trainable(_sets(rank=2 * r)) if r < 16 else None
        assert n_r == 2 * 4 * r * (64 + 64)
        if n_2r is not None:
            assert n_2r == 2 * n_r


def test_count_trainable_empty():
    assert lora.count_trainable([]) == 0


def test_checkpoint_roundtrip_is_value_exact(tmp_path):
    sets = _sets(domains=("night", "rain"), d=16, rank=4)
    rng = SeededRng(8)
    for s in sets:
        for ad in s.adapters.values():
            ad.a.data += rng.uniform(-1, 1, ad.a.data.shape)
            ad.b.data += rng.uniform(-1, 1, ad.b.data.shape)
    path = tmp_path / "adapters.ckpt"
    lora.save_adapters(path, sets, 16, 16, 4, 4.0)
    loaded = lora.load_adapters(path, 16, 16, 4, 4.0)
    assert lora.sets_checksum(loaded) == lora.sets_checksum(sets)
    lora.save_adapters(tmp_path / "again.ckpt", loaded, 16, 16, 4, 4.0)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rank_mismatch(tmp_path):
    sets = _sets(d=16, rank=4)
    path = tmp_path / "adapters.ckpt"
    lora.save_adapters(path, sets, 16, 16, 4, 4.0)
    with pytest.raises(CheckpointError, match="r=4"):
        lora.load_adapters(path, 16, 16, 8, 8.0)


def test_checkpoint_truncation_reports_byte_offset(tmp_path):
    sets = _sets(d=16, rank=4)
    path = tmp_path / "adapters.ckpt"
    lora.save_adapters(path, sets, 16, 16, 4, 4.0)
    raw = path.read_bytes()
    clipped = tmp_path / "clipped.ckpt"
    clipped.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError, match="byte"):
        lora.load_adapters(clipped, 16, 16, 4, 4.0)


def test_checkpoint_bad_value_reports_byte_offset(tmp_path):
    sets = _sets(d=16, rank=4)
    path = tmp_path / "adapters.ckpt"
    lora.save_adapters(path, sets, 16, 16, 4, 4.0)
    lines = path.read_text().splitlines()
    lines[3] = "not-a-number"
    bad = tmp_path / "bad.ckpt"
    bad.write_text("\n".join(lines) + "\n")
    with pytest.raises(CheckpointError, match="byte"):
        lora.load_adapters(bad, 16, 16, 4, 4.0)


def test_checkpoint_bad_header(tmp_path):
    path = tmp_path / "nonsense.ckpt"
    path.write_text("WRONG v9 hello\n")
    with pytest.raises(CheckpointError, match="header"):
        lora.load_adapters(path, 16, 16, 4, 4.0)


def test_loaded_adapters_are_frozen_by_default(tmp_path):
    sets = _sets(d=16, rank=4)
    path = tmp_path / "adapters.ckpt"
    lora.save_adapters(path, sets, 16, 16, 4, 4.0)
    loaded = lora.load_adapters(path, 16, 16, 4, 4.0)
    for s in loaded:
        for ad in s.adapters.values():
            assert not ad.a.requires_grad and not ad.b.requires_grad
