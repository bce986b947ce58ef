import math

import numpy as np
import pytest

from openworldseg.anomaly import MixtureConfig, eds_map, eds_sum, mix_maps, mmsp_map, prob_to_u8
from openworldseg.prototypes import make_prototypes
from openworldseg.tensor import ShapeMismatch


def feat(vec):
    return np.asarray(vec, dtype=np.float64).reshape(-1, 1, 1)


def test_mmsp_uniform_pixel():
    for n in (2, 3, 5):
        protos = make_prototypes(n, 3.0)
        center = np.full((n, 1, 1), 3.0 / n)
        assert mmsp_map(center, protos)[0, 0] == pytest.approx(1.0 - 1.0 / n, abs=1e-12)


def test_mmsp_confident_pixel_goes_to_zero():
    protos = make_prototypes(3, 3.0)
    confident = feat([30.0, 0.0, 0.0])  # far along prototype 0's axis
    assert mmsp_map(confident, protos)[0, 0] == pytest.approx(0.0, abs=1e-9)


def test_mmsp_scalar_recomputation():
    protos = make_prototypes(2, 1.0)
    value = mmsp_map(feat([1.0, 0.0]), protos)[0, 0]
    assert value == pytest.approx(1.0 - 1.0 / (1.0 + math.exp(-2.0)), abs=1e-9)
    assert value == pytest.approx(0.1192, abs=5e-5)


def test_mmsp_range():
    rng = np.random.default_rng(0)
    protos = make_prototypes(4, 3.0)
    m = mmsp_map(rng.normal(scale=5.0, size=(4, 8, 8)), protos)
    assert np.all(m >= 0.0) and np.all(m <= 1.0 - 1.0 / 4 + 1e-12)


def test_eds_sum_at_prototype():
    # at m_k with N=3, T=3: 0 + 2*(2*T^2) = 36
    protos = make_prototypes(3, 3.0)
    s = eds_sum(feat(protos.base[1]), protos)
    assert s[0, 0] == pytest.approx(36.0)


def test_eds_sum_at_center():
    protos = make_prototypes(3, 3.0)
    s = eds_sum(feat([1.0, 1.0, 1.0]), protos)
    assert s[0, 0] == pytest.approx(18.0)


def test_center_is_half_of_prototype_sum():
    # S(center) = T^2 (N-1) and S(at-prototype) = 2 T^2 (N-1)
    for n in range(2, 11):
        for t in range(1, 7):
            protos = make_prototypes(n, float(t))
            center = np.full((n, 1, 1), t / n)
            at_proto = feat(protos.base[0])
            s_center = eds_sum(center, protos)[0, 0]
            s_proto = eds_sum(at_proto, protos)[0, 0]
            assert s_center == pytest.approx(s_proto / 2.0, abs=1e-6)
            assert s_center == pytest.approx(t * t * (n - 1), abs=1e-6)


def test_eds_map_argmax_pixel_is_zero():
    s = np.array([[18.0, 36.0], [7.0, 1.0]])
    p = eds_map(s)
    assert p[0, 1] == 0.0
    assert p[0, 0] == pytest.approx(0.5)


def test_eds_map_direct_substitution():
    assert eds_map(np.array([18.0, 36.0])) == pytest.approx([0.5, 0.0])


def test_eds_map_constant_input_all_zero():
    assert np.all(eds_map(np.full((3, 3), 9.0)) == 0.0)


def test_eds_map_scale_invariant():
    rng = np.random.default_rng(1)
    s = rng.uniform(1.0, 50.0, size=(6, 6))
    assert np.allclose(eds_map(s), eds_map(123.0 * s))


def test_eds_map_rejects_degenerate_zero_sum():
    with pytest.raises(ValueError):
        eds_map(np.zeros((2, 2)))


def test_mix_at_gamma_is_midpoint():
    cfg = MixtureConfig(beta=20.0, gamma=0.8)
    p_eds = np.full((2, 2), 0.8)
    p_mmsp = np.full((2, 2), 0.3)
    out = mix_maps(p_eds, p_mmsp, cfg)
    assert np.allclose(out, (0.8 + 0.3) / 2.0)


def test_mix_scalar_recomputation():
    # beta=20, gamma=0.8, P_eds=1, P_mmsp=0: alpha = 1/(1+e^-4)
    cfg = MixtureConfig(beta=20.0, gamma=0.8)
    out = mix_maps(np.array([[1.0]]), np.array([[0.0]]), cfg)
    alpha = 1.0 / (1.0 + math.exp(-4.0))
    assert out[0, 0] == pytest.approx(alpha, abs=1e-12)
    assert out[0, 0] == pytest.approx(0.9820, abs=5e-5)


def test_mix_of_equal_maps_is_identity():
    rng = np.random.default_rng(2)
    p = rng.uniform(size=(5, 5))
    assert np.allclose(mix_maps(p, p.copy()), p)


def test_mix_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        mix_maps(np.zeros((2, 2)), np.zeros((3, 3)))


def test_mix_output_in_unit_interval():
    rng = np.random.default_rng(3)
    out = mix_maps(rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16)))
    assert np.all(out >= 0.0) and np.all(out <= 1.0)


def test_mix_monotone_in_eds_when_dominating():
    # holding P_mmsp fixed, raising P_eds (already >= P_mmsp) never lowers
    # the mixture
    cfg = MixtureConfig()
    for p_mmsp in np.linspace(0.0, 1.0, 11):
        grid = np.linspace(p_mmsp, 1.0, 101).reshape(1, -1)
        out = mix_maps(grid, np.full_like(grid, p_mmsp), cfg)
        assert np.all(np.diff(out[0]) >= -1e-12)


def test_gamma_validated():
    with pytest.raises(ValueError):
        MixtureConfig(gamma=1.0)
    with pytest.raises(ValueError):
        MixtureConfig(gamma=0.0)


def test_prob_quantization():
    assert np.array_equal(prob_to_u8(np.array([0.0, 0.5, 1.0])), np.array([0, 128, 255], dtype=np.uint8))
