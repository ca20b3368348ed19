"""Loss closed forms, invariants, and contract errors."""

import numpy as np
import pytest

from mmdlora.errors import ConfigError, ContractError
from mmdlora.objectives import (
    EmbeddingBundle,
    VtcclConfig,
    alignment_loss,
    loss_components,
    pretrain_loss,
    vtccl_loss,
)
from mmdlora.tensor import SeededRng, TensorValue

TV = TensorValue


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def _bundle_identical(n=3, d=4, m=1):
    e = np.zeros(d)
    e[0] = 1.0
    return EmbeddingBundle(
        f_s_v=TV(np.tile(e, (n, 1))),
        f_t_v=[TV(np.tile(e, (n, 1))) for _ in range(m)],
        f_s_l=TV(e),
        f_t_l=[TV(e) for _ in range(m)],
    )


def _random_unit_bundle(seed, n=3, d=6, m=2):
    rng = SeededRng(seed)
    rows = lambda: TV(np.stack([_unit(rng.uniform(-1, 1, d)) for _ in range(n)]))
    vec = lambda: TV(_unit(rng.uniform(-1, 1, d)))
    return EmbeddingBundle(
        f_s_v=rows(), f_t_v=[rows() for _ in range(m)],
        f_s_l=vec(), f_t_l=[vec() for _ in range(m)],
    )


def test_alignment_zero_shift_costs_one():
    b = _bundle_identical()
    b.f_t_l = [TV(_unit([0.0, 1.0, 0.0, 0.0]))]
    assert alignment_loss(b, 0).item() == pytest.approx(1.0, abs=1e-12)


def test_alignment_hand_example():
    b = EmbeddingBundle(
        f_s_v=TV([[1.0, 0.0]]), f_t_v=[TV([[1.0, 1.0]])],
        f_s_l=TV([0.0, 0.0]), f_t_l=[TV([0.0, 1.0])],
    )
    assert alignment_loss(b, 0).item() == pytest.approx(0.5, abs=1e-12)


def test_alignment_orthogonal_shift():
    # visual shift along e1, text shift along e2, so the cosine term costs 1
    # and the loss is 1 + mean absolute visual shift
    b = EmbeddingBundle(
        f_s_v=TV([[1.0, 0.0, 0.0]]), f_t_v=[TV([[1.0, 0.3, 0.0]])],
        f_s_l=TV([0.0, 0.0, 0.0]), f_t_l=[TV([0.0, 0.0, 1.0])],
    )
    expected_l1 = 0.3 / 3.0
    assert alignment_loss(b, 0).item() == pytest.approx(1.0 + expected_l1, abs=1e-12)


def test_alignment_domain_out_of_range():
    with pytest.raises(ContractError):
        alignment_loss(_bundle_identical(), 1)


def test_vtccl_identical_embeddings_closed_form():
    b = _bundle_identical(m=1)
    for tau in (0.07, 0.5, 3.0):
        val = vtccl_loss(b, VtcclConfig(tau=tau, lambdas=[1.0, 1.0])).item()
        assert val == pytest.approx(2.0 * np.log(2.0), abs=1e-9)


def test_vtccl_perfect_separation_closed_form():
    e = np.zeros(4)
    e[0] = 1.0
    b = EmbeddingBundle(
        f_s_v=TV(np.tile(e, (3, 1))), f_t_v=[TV(np.tile(-e, (3, 1)))],
        f_s_l=TV(e), f_t_l=[TV(-e)],
    )
    val = vtccl_loss(b, VtcclConfig(tau=1.0, lambdas=[1.0, 1.0])).item()
    assert val == pytest.approx(2.0 * np.log(1.0 + np.exp(-2.0)), abs=1e-9)


def test_vtccl_zero_lambdas_zero_loss():
    b = _random_unit_bundle(1)
    assert vtccl_loss(b, VtcclConfig(tau=0.07, lambdas=[0.0, 0.0, 0.0])).item() == 0.0


def test_vtccl_nonnegative_on_random_bundles():
    for seed in range(10):
        b = _random_unit_bundle(seed)
        val = vtccl_loss(b, VtcclConfig(tau=0.07, lambdas=[1.0, 0.1, 1.0])).item()
        assert val >= 0.0


def test_vtccl_linear_in_lambdas():
    b = _random_unit_bundle(2)
    full = vtccl_loss(b, VtcclConfig(tau=0.2, lambdas=[1.0, 0.6, 0.4])).item()
    half = vtccl_loss(b, VtcclConfig(tau=0.2, lambdas=[0.5, 0.3, 0.2])).item()
    assert half == pytest.approx(full / 2.0, rel=1e-12)


def test_vtccl_domain_permutation_invariance():
    b = _random_unit_bundle(3)
    fwd = vtccl_loss(b, VtcclConfig(tau=0.1, lambdas=[1.0, 0.3, 0.9])).item()
    swapped = EmbeddingBundle(
        f_s_v=b.f_s_v, f_t_v=[b.f_t_v[1], b.f_t_v[0]],
        f_s_l=b.f_s_l, f_t_l=[b.f_t_l[1], b.f_t_l[0]],
    )
    rev = vtccl_loss(swapped, VtcclConfig(tau=0.1, lambdas=[1.0, 0.9, 0.3])).item()
    assert rev == pytest.approx(fwd, rel=1e-12)


def test_vtccl_source_term_monotone_in_negative_logit():
    # pushing a target text away from the source visual cannot raise the
    # source term
    rng = SeededRng(4)
    d = 5
    f_s_v = TV(np.tile(_unit(rng.uniform(-1, 1, d)), (2, 1)))
    f_t_v = [TV(np.tile(_unit(rng.uniform(-1, 1, d)), (2, 1)))]
    f_s_l = TV(_unit(rng.uniform(-1, 1, d)))
    cfg = VtcclConfig(tau=0.5, lambdas=[1.0, 0.0])

    anchor = f_s_v.data[0]
    prev = None
    for alpha in (0.9, 0.3, -0.3, -0.9):
        target_text = _unit(anchor * alpha + (1 - abs(alpha)) * _unit(rng.uniform(-1, 1, d)))
        b = EmbeddingBundle(f_s_v=f_s_v, f_t_v=f_t_v, f_s_l=f_s_l,
                            f_t_l=[TV(target_text)])
        val = vtccl_loss(b, cfg).item()
        if prev is not None and float(anchor @ target_text) < prev[1]:
            assert val <= prev[0] + 1e-12
        prev = (val, float(anchor @ target_text))


def test_vtccl_config_errors():
    b = _random_unit_bundle(5)
    with pytest.raises(ConfigError):
        vtccl_loss(b, VtcclConfig(tau=0.0, lambdas=[1.0, 1.0, 1.0]))
    with pytest.raises(ConfigError):
        vtccl_loss(b, VtcclConfig(tau=0.1, lambdas=[1.0, -0.1, 1.0]))
    with pytest.raises(ConfigError):
        vtccl_loss(b, VtcclConfig(tau=0.1, lambdas=[1.0, 1.0]))


def test_pretrain_composition_at_zero_init():
    b = _bundle_identical(m=2)
    b.f_t_l = [TV(_unit([0.0, 1.0, 0.0, 0.0])), TV(_unit([0.0, 0.0, 1.0, 0.0]))]
    cfg = VtcclConfig(tau=0.07, lambdas=[1.0, 0.1, 1.0])
    vt = vtccl_loss(b, cfg).item()
    total = pretrain_loss(b, cfg).item()
    assert total == pytest.approx(2.0 * 1.0 + vt, abs=1e-9)


def test_pretrain_deterministic():
    b = _random_unit_bundle(6)
    cfg = VtcclConfig(tau=0.07, lambdas=[1.0, 0.1, 1.0])
    assert pretrain_loss(b, cfg).item() == pretrain_loss(b, cfg).item()


def test_loss_components_consistent_with_total():
    b = _random_unit_bundle(7)
    cfg = VtcclConfig(tau=0.07, lambdas=[1.0, 0.1, 1.0])
    aligns, vt, total = loss_components(b, cfg)
    assert total.item() == pytest.approx(
        sum(a.item() for a in aligns) + vt.item(), rel=1e-12
    )


def test_bundle_validation_catches_bad_norms():
    b = _random_unit_bundle(8)
    b.validate()
    b.f_s_v.data[0] *= 2.0
    with pytest.raises(ContractError):
        b.validate()


def test_bundle_validation_catches_shape_drift():
    b = _random_unit_bundle(9)
    b.f_t_l = b.f_t_l[:1]
    with pytest.raises(ContractError):
        b.validate()
