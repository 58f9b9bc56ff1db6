import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csident.supportlab import (
    PartitionSpec,
    SupportMatrix,
    check_assumption_partial,
    check_assumption_sparsity,
    estimate_support,
)
from csident.synthgen import (
    ChecksumError,
    ConfigError,
    ProcessConfig,
    build_process,
    default_mask,
    domain_kl_diagnostic,
    load_batch,
    random_valid_mask,
    sample_all_domains,
    sample_batch,
    save_batch,
)


@pytest.fixture(scope="module")
def proc():
    return build_process(ProcessConfig())


def test_default_mask_shape_and_assumptions():
    p = PartitionSpec(4, 2, 20)
    m = default_mask(p, 0)
    assert m.shape == (20, 6)
    assert check_assumption_sparsity(m, p) and check_assumption_partial(m, p)
    assert m.entries.any(1).all() and m.entries.any(0).all()
    assert default_mask(p, 0) == m


@given(st.integers(0, 2**32 - 1), st.booleans())
def test_random_valid_mask_invariants(seed, partial):
    p = PartitionSpec(3, 2, 12)
    m = random_valid_mask(p, np.random.default_rng(seed), require_partial=partial)
    assert check_assumption_sparsity(m, p)
    if partial:
        assert check_assumption_partial(m, p)
    assert m.entries.any(1).all() and m.entries.any(0).all()


class TestConfig:
    def test_rejects_denser_style(self):
        e = np.zeros((6, 2), bool)
        e[:2, 0] = True
        e[:, 1] = True
        cfg = ProcessConfig(partition=PartitionSpec(1, 1, 6), support_mask=SupportMatrix(e))
        with pytest.raises(ConfigError, match="relative sparsity"):
            cfg.validate()

    def test_rejects_dead_row(self):
        e = np.zeros((4, 2), bool)
        e[:3, 0] = True
        e[0, 1] = True
        with pytest.raises(ConfigError, match="rows"):
            ProcessConfig(partition=PartitionSpec(1, 1, 4), support_mask=SupportMatrix(e)).validate()

    def test_rejects_nested_when_partial_required(self):
        e = np.zeros((4, 2), bool)
        e[:, 0] = True
        e[:2, 1] = True
        cfg = ProcessConfig(partition=PartitionSpec(1, 1, 4), support_mask=SupportMatrix(e))
        with pytest.raises(ConfigError, match="partially intersecting"):
            cfg.validate()
        cfg.require_partial = False
        cfg.validate()

    def test_json_roundtrip(self):
        cfg = ProcessConfig(seed=3, dependence_strength=0.3)
        again = ProcessConfig.from_json_dict(json.loads(json.dumps(cfg.to_json_dict())))
        assert again.to_json_dict() == cfg.to_json_dict()


class TestBuild:
    def test_identity_mask_diagonal_support(self):
        p = PartitionSpec(2, 1, 3)
        e = np.zeros((3, 3), bool)
        # diagonal would violate relative sparsity, so content columns get one extra row each
        e[[0, 1, 2], [0, 1, 2]] = True
        e[1, 0] = e[0, 1] = True
        cfg = ProcessConfig(partition=p, u_dim=3, support_mask=SupportMatrix(e), require_partial=False)
        proc = build_process(cfg)
        z = sample_all_domains(proc, 50, 0).z
        assert estimate_support(proc.mix_jacobian, z, 1e-6) == cfg.support_mask

    def test_default_support_fidelity(self, proc):
        z = sample_all_domains(proc, 125, seed=5).z
        assert estimate_support(proc.mix_jacobian, z, 1e-6) == proc.cfg.support_mask

    def test_injective_on_samples(self, proc):
        z = sample_all_domains(proc, 50, seed=6).z
        assert min(np.linalg.svd(proc.mix_jacobian(zi), compute_uv=False)[-1] for zi in z) > 1e-4

    def test_deterministic_in_seed(self):
        a = build_process(ProcessConfig(seed=4))
        b = build_process(ProcessConfig(seed=4))
        assert np.array_equal(a.mix_w, b.mix_w) and np.array_equal(a.u, b.u)

    def test_jacobian_matches_finite_differences(self, proc, rng):
        z = rng.normal(size=6)
        h = 1e-6
        fd = np.stack(
            [(proc.mix(z + h * e)[0] - proc.mix(z - h * e)[0]) / (2 * h) for e in np.eye(6)], axis=1
        )
        np.testing.assert_allclose(proc.mix_jacobian(z), fd, rtol=1e-6, atol=1e-8)


class TestSample:
    def test_empty(self, proc):
        b = sample_batch(proc, 0, 1, seed=0)
        assert b.x.shape == (0, 20) and b.c.shape == (0, 4) and b.s.shape == (0, 2)
        assert b.s_tilde.shape == (0, 2) and b.domain.shape == (0,)

    def test_same_seed_same_batch(self, proc):
        a, b = sample_batch(proc, 30, 2, seed=9), sample_batch(proc, 30, 2, seed=9)
        for f in ("x", "c", "s", "s_tilde", "domain"):
            assert np.array_equal(getattr(a, f), getattr(b, f))

    def test_bad_domain(self, proc):
        with pytest.raises(ValueError):
            sample_batch(proc, 3, 4, seed=0)

    def test_reconstruction_identity(self, proc):
        b = sample_all_domains(proc, 100, seed=1)
        np.testing.assert_allclose(proc.mix(b.z), b.x, rtol=0, atol=1e-9)

    def test_style_inverse(self, proc):
        b = sample_all_domains(proc, 100, seed=2)
        back = proc.style_inverse(b.s, b.c, b.domain)
        assert np.max(np.abs(back - b.s_tilde)) < 1e-6

    def test_dependence_raises_correlation(self):
        def max_corr(dep):
            proc = build_process(ProcessConfig(dependence_strength=dep))
            b = sample_batch(proc, 10_000, 0, seed=3)
            cc = np.corrcoef(b.c.T, b.s.T)[:4, 4:]
            return np.abs(cc).max()

        assert max_corr(0.8) > max_corr(0.0)

    def test_zero_dependence_style_ignores_content(self, rng):
        proc = build_process(ProcessConfig(dependence_strength=0.0))
        h = 1e-5
        for _ in range(100):
            c = rng.normal(size=(1, 4))
            st_ = rng.normal(size=(1, 2))
            d = np.array([int(rng.integers(4))])
            for k in range(4):
                e = np.zeros((1, 4))
                e[0, k] = h
                diff = (proc.style(st_, c + e, d) - proc.style(st_, c - e, d)) / (2 * h)
                assert np.abs(diff).max() <= 1e-8


class TestDomainKL:
    def test_same_domain_zero(self, proc):
        assert domain_kl_diagnostic(proc, 1, 1, 1000) == 0.0

    def test_zero_shift_below_floor(self):
        proc = build_process(ProcessConfig(domain_shift_strength=0.0))
        assert domain_kl_diagnostic(proc, 0, 1, 20_000) <= 0.05

    def test_shift_exceeds_zero_shift(self, proc):
        flat = build_process(ProcessConfig(domain_shift_strength=0.0))
        assert domain_kl_diagnostic(proc, 0, 1, 20_000) > domain_kl_diagnostic(flat, 0, 1, 20_000)


class TestPersistence:
    def test_roundtrip_and_layout(self, proc, tmp_path):
        b = sample_all_domains(proc, 20, seed=4)
        save_batch(tmp_path / "d", b, proc.cfg)
        names = sorted(p.name for p in (tmp_path / "d").iterdir())
        assert names == ["c.bin", "domain.u32.bin", "meta.json", "s.bin", "stilde.bin", "x.bin"]
        raw = np.fromfile(tmp_path / "d" / "x.bin", dtype="<f8")
        assert raw.size == b.x.size
        again, meta = load_batch(tmp_path / "d")
        assert meta["n"] == 80
        for f in ("x", "c", "s", "s_tilde", "domain"):
            assert np.array_equal(getattr(again, f), getattr(b, f))
        np.testing.assert_allclose(proc.mix(again.z), again.x, atol=1e-9)

    def test_checksum_detects_tamper(self, proc, tmp_path):
        b = sample_batch(proc, 5, 0, seed=1)
        save_batch(tmp_path / "d", b, proc.cfg)
        with open(tmp_path / "d" / "c.bin", "r+b") as fh:
            fh.write(b"\x00\x01")
        with pytest.raises(ChecksumError):
            load_batch(tmp_path / "d")
