import math

import numpy as np
import pytest

from corexae.infotheory import GaussianMixture1D, MIReport
from corexae.models import build_model
from corexae.rng import Rng
from corexae.sampling import (
    BankMismatchError,
    MarginalBank,
    TraversalSpec,
    energy_test,
    fit_marginal_bank,
    latent_traverse,
    mi_report,
    read_pgm,
    sample_marginals,
    sample_prior,
    tightness_report,
    tile,
    variance_report,
    write_pgm_grid,
)

LINEAR = [{"kind": "continuous", "width": 3, "encoder_hidden": [], "decoder_hidden": []}]


def identity_model(enc_zero=True):
    """Gaussian decoder with mean = z; encoder mean 0 and variance 1 when ``enc_zero``."""
    model = build_model(3, LINEAR, "gaussian", Rng(0), "identity")
    P = model.params
    P.set(("dec0", 0, "weight"), np.hstack([np.eye(3), np.zeros((3, 3))]))
    P.set(("dec0", 0, "bias"), np.zeros(6))
    if enc_zero:
        P.set(("enc0", 0, "weight"), np.zeros((3, 6)))
        P.set(("enc0", 0, "bias"), np.zeros(6))
    return model


def test_sample_prior_identity_decoder_returns_codes():
    model = identity_model()
    out, codes = sample_prior(model, 50, Rng(1), return_codes=True)
    assert np.allclose(out, codes, atol=1e-12)
    assert np.array_equal(sample_prior(model, 50, Rng(1)), out)
    assert sample_prior(model, 0, Rng(1)).shape == (0, 3)


def test_standard_marginals_match_prior_in_distribution():
    model = identity_model()
    x = Rng(2).normal((4000, 3))
    bank = fit_marginal_bank(model, x, Rng(3), n=1024)
    assert np.allclose(variance_report(bank).variances, 1.0, atol=1e-12)
    a = sample_prior(model, 10_000, Rng(4))
    b = sample_marginals(model, bank, 10_000, Rng(5))
    assert energy_test(a, b, Rng(6)).equivalent


def test_energy_test_rejects_shifted_samples():
    r = Rng(7)
    assert not energy_test(r.normal((500, 2)), r.normal((500, 2)) + 0.5, r.split(1)).equivalent


def test_marginal_draws_match_mixture_moments():
    model = identity_model(enc_zero=False)
    x = Rng(8).normal((3000, 3)) * 2.0
    bank = fit_marginal_bank(model, x, Rng(9), n=512)
    _, codes = sample_marginals(model, bank, 10_000, Rng(10), return_codes=True)
    mean, var = bank.moments()
    se_mean = np.sqrt(var / codes.shape[0])
    assert np.all(np.abs(codes.mean(0) - mean) <= 3 * se_mean)
    assert np.all(np.abs(codes.var(0) / var - 1) < 0.03)
    again = sample_marginals(model, bank, 100, Rng(10))
    assert np.array_equal(again, sample_marginals(model, bank, 100, Rng(10)))


def test_bank_mismatch_and_json_round_trip():
    model = identity_model()
    bank = fit_marginal_bank(model, Rng(0).normal((100, 3)), Rng(1))
    back = MarginalBank.from_json(bank.to_json())
    assert back.to_json() == bank.to_json()
    other = build_model(3, LINEAR, "gaussian", Rng(5), "identity")
    with pytest.raises(BankMismatchError):
        sample_marginals(other, bank, 5, Rng(0))


def test_variance_report_values():
    bank = MarginalBank([GaussianMixture1D([-1.0, 1.0], [0.01, 0.01]), GaussianMixture1D([0.0], [1.0]),
                         GaussianMixture1D([2.0, 0.0, 1.0], [0.5, 0.5, 0.5])], 2, 0, 0, 0)
    rep = variance_report(bank)
    assert rep.variances[0] == pytest.approx(1.01, abs=1e-12)
    assert rep.variances[2] == pytest.approx(0.5 + np.var([2.0, 0.0, 1.0]), abs=1e-12)
    assert [f for _, f in rep.cumulative] == [1 / 3, 2 / 3, 1.0]
    assert rep.to_csv().splitlines()[0] == "dim,variance,mi_nats,mi_se"


def test_traversal_single_step_is_reconstruction():
    model = identity_model(enc_zero=False)
    src = Rng(11).normal((2, 3))
    grid = latent_traverse(model, TraversalSpec((1,), steps=1), source=src)
    from corexae.models import encode

    mean = encode(model, src, None, deterministic=True).posteriors[0].mean.value
    assert grid.shape == (2, 1, 3) and np.allclose(grid[:, 0], model.conditional(0, mean).mean.value)


def test_traversal_dead_dimension_changes_nothing():
    model = identity_model(enc_zero=False)
    W = model.params[("dec0", 0, "weight")].value.copy()
    W[2] = 0.0
    model.params.set(("dec0", 0, "weight"), W)
    grid = latent_traverse(model, TraversalSpec((2,), -3, 3, 7), source=Rng(12).normal((3, 3)))
    assert np.all(grid == grid[:, :1])
    live = latent_traverse(model, TraversalSpec((0,), -3, 3, 7), source=Rng(12).normal((3, 3)))
    assert np.allclose(live[0, :, 0], np.linspace(-3, 3, 7))


def test_traversal_errors():
    with pytest.raises(ValueError):
        TraversalSpec((0,), 1.0, -1.0)
    model = identity_model()
    with pytest.raises(ValueError):
        latent_traverse(model, TraversalSpec((5,)), source=np.zeros((1, 3)))
    with pytest.raises(ValueError):
        latent_traverse(model, TraversalSpec((0,)), categories=[0])


def test_pgm_single_black_and_white(tmp_path):
    h, w = write_pgm_grid(np.zeros((1, 1, 16)), tmp_path / "b.pgm")
    text = (tmp_path / "b.pgm").read_text().split()
    assert text[:4] == ["P2", "4", "4", "255"] and set(text[4:]) == {"0"}
    write_pgm_grid(np.ones((1, 1, 4)), tmp_path / "w.pgm")
    assert np.all(read_pgm(tmp_path / "w.pgm") == 255)


def test_pgm_grid_separators(tmp_path):
    imgs = Rng(13).uniform(0, 1, (2, 3, 16))
    h, w = write_pgm_grid(imgs, tmp_path / "g.pgm")
    assert (h, w) == (2 * 4 + 1, 3 * 4 + 2)
    canvas = read_pgm(tmp_path / "g.pgm")
    assert canvas.shape == (9, 14)
    assert np.all(canvas[4] == 128) and np.all(canvas[:, 4] == 128) and np.all(canvas[:, 9] == 128)
    assert np.array_equal(canvas[5:9, 10:14], np.rint(imgs[1, 2].reshape(4, 4) * 255))
    with pytest.raises(ValueError):
        write_pgm_grid(np.full((1, 1, 4), 1.5), tmp_path / "bad.pgm")


def test_tile_pads_last_row():
    t = tile(np.ones((64, 4)))
    assert t.shape == (8, 8, 4)
    t = tile(np.ones((5, 4)))
    assert t.shape == (2, 3, 4) and t[1, 2].sum() == 0


def test_reports_on_identity_model():
    model = identity_model(enc_zero=False)
    x = Rng(14).normal((600, 3)) * np.array([2.0, 0.5, 0.1])
    bank = fit_marginal_bank(model, x, Rng(15), n=600)
    rep = mi_report(model, x, Rng(16), bank, n_points=300, n_draws=64)
    std = mi_report(model, x, Rng(16), reference="standard", n_points=300, n_draws=64)
    assert isinstance(rep, MIReport) and len(rep.entries) == 3
    for a, b in zip(rep.entries, std.entries):
        assert a.value <= b.value + 3 * a.std_err
    for t in tightness_report(model, x, bank, Rng(17), n_points=300, n_draws=64):
        assert t.kl_mixture <= t.kl_standard + 3 * t.gap_se
    vr = variance_report(bank, rep)
    assert math.isfinite(vr.spearman)
