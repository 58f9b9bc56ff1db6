import csv

import numpy as np
import pytest
import torch

from csident.diffcore import DTYPE
from csident.estimator import ContentStyleVAE, ModelConfig, encode_latents
from csident.intervene import (
    NLLStats,
    TransferRequest,
    donor_style_noise,
    flip_comparison,
    model_nll,
    select_donors,
    transfer,
)
from csident.synthgen import ProcessConfig, build_process, sample_all_domains


@pytest.fixture(scope="module")
def setup():
    proc = build_process(ProcessConfig(seed=0))
    batch = sample_all_domains(proc, 40, seed=5)
    g = torch.Generator().manual_seed(1)
    model = ContentStyleVAE(ModelConfig(hidden=8), seed=1)
    model.r_c.randomize_(generator=g)
    model.r_s.randomize_(generator=g)
    return proc, batch, model


def test_request_validation():
    with pytest.raises(ValueError):
        TransferRequest(np.zeros((2, 3)), [0, 0], np.zeros((0, 3)), [])
    with pytest.raises(ValueError):
        TransferRequest(np.zeros((2, 3)), [0], np.zeros((1, 3)), [0])


def test_self_donor_reproduces_reconstruction(setup):
    _, batch, model = setup
    x, d = batch.x[3:4], batch.domain[3:4]
    res = transfer(model, TransferRequest(x, d, x, d))
    lat = encode_latents(model, x)
    with torch.no_grad():
        recon = model.decode(torch.as_tensor(lat["c"]), torch.as_tensor(lat["s"])).numpy()
    np.testing.assert_allclose(res.x, recon, atol=1e-8)
    np.testing.assert_allclose(res.s, lat["s"], atol=1e-8)


def test_content_unchanged(setup):
    _, batch, model = setup
    res = transfer(model, TransferRequest(batch.x[:10], batch.domain[:10], batch.x[50:60], batch.domain[50:60]))
    assert np.array_equal(res.c, encode_latents(model, batch.x[:10])["c"])


def test_identity_style_flow_copies_mean_style():
    model = ContentStyleVAE(ModelConfig(hidden=8), seed=2)
    r = np.random.default_rng(0)
    x, donors = r.normal(size=(4, 20)), r.normal(size=(6, 20))
    res = transfer(model, TransferRequest(x, [0, 1, 2, 3], donors, np.zeros(6, int)))
    donor_s = encode_latents(model, donors)["s"].mean(0)
    np.testing.assert_allclose(res.s, np.tile(donor_s, (4, 1)), atol=1e-12)
    np.testing.assert_allclose(res.s_tilde, res.s, atol=1e-12)


def test_donor_noise_shape(setup):
    _, batch, model = setup
    assert donor_style_noise(model, batch.x[:5], batch.domain[:5]).shape == (2,)


def test_select_donors(setup):
    _, batch, _ = setup
    pools = select_donors(batch, n_donors=10)
    assert set(pools) == {(1, None), (-1, None)}
    hi_x, _ = pools[(1, None)]
    lo_x, _ = pools[(-1, None)]
    s1 = batch.s_tilde[:, 0]
    rows_hi = [np.flatnonzero((batch.x == r).all(1))[0] for r in hi_x]
    rows_lo = [np.flatnonzero((batch.x == r).all(1))[0] for r in lo_x]
    assert s1[rows_hi].min() >= s1[rows_lo].max()
    per = select_donors(batch, n_donors=5, per_domain=True)
    assert len(per) == 8 and all(len(v[0]) == 5 for v in per.values())


def test_flip_untrained_finite_and_csv(setup, tmp_path):
    _, batch, model = setup
    target = -np.sign(batch.s_tilde[:, 0]).astype(int)
    stats = flip_comparison(model, batch.x, batch.domain, target, select_donors(batch, 20))
    for a in (stats.nll_base, stats.nll_flip_s, stats.nll_flip_stilde):
        assert a.shape == (160,) and np.isfinite(a).all()
    assert np.isfinite(stats.mean_abs_delta_s) and np.isfinite(stats.mean_abs_delta_stilde)
    stats.write_csv(tmp_path / "nll.csv")
    with open(tmp_path / "nll.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["sample_id", "nll_base", "nll_flip_s", "nll_flip_stilde"]
    assert len(rows) == 161 and float(rows[5][1]) == stats.nll_base[4]


def test_flip_rejects_uncovered_rows(setup):
    _, batch, model = setup
    pools = {k: v for k, v in select_donors(batch, 5).items() if k[0] == 1}
    with pytest.raises(ValueError, match="no donor pool"):
        flip_comparison(model, batch.x[:4], batch.domain[:4], np.array([1, -1, 1, 1]), pools)


def test_summary_deltas():
    st = NLLStats(np.array([1.0, 2.0]), np.array([2.0, 0.0]), np.array([1.5, 2.0]))
    s = st.summary()
    assert s["mean_abs_delta_s"] == pytest.approx(1.5) and s["mean_abs_delta_stilde"] == pytest.approx(0.25)


def test_model_nll_prior_term():
    """With identity flows, mu-only encoder and saturated mask the NLL is recon + std-normal prior."""
    model = ContentStyleVAE(ModelConfig(hidden=8, mask_init=60.0), seed=0)
    x = torch.randn(3, 20, dtype=DTYPE)
    with torch.no_grad():
        mu = model.encoder(x)[:, :6]
        xh = model.decode(mu[:, :4], mu[:, 4:])
        expect = 0.5 * ((x - xh) ** 2).sum(1) + 10 * np.log(2 * np.pi) + 0.5 * (mu**2).sum(1) + 3 * np.log(2 * np.pi)
        torch.testing.assert_close(model_nll(model, x, torch.zeros(3, dtype=torch.long)), expect)
