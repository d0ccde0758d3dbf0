"""Model tests: architecture widths, set/batched path agreement,
permutation properties, the sigma floor, KL facts against a Monte Carlo
oracle, and checkpoint round-trips."""

import math

import numpy as np
import pytest

import props
from gapracer import autodiff as ad
from gapracer.errors import ConfigError, DataError, ShapeError
from gapracer.models import (AttentiveNP, GaussianParams, ModelConfig, ResMLP,
                             diagonal_kl, elbo_loss, gaussian_nll, load_model,
                             make_model, predict_steering, save_model)

B_RAW = 54 + 2      # zeta bins plus (v, omega)


def _rows(rng, n, width=B_RAW):
    return rng.uniform(-1.0, 1.0, size=(n, width))


# ---- construction and widths -------------------------------------------------

def test_decoder_width_depends_on_prior_flag():
    pi = make_model("pi-attnp")
    plain = make_model("attnp")
    assert pi.params["dec.w0"].value.shape == (231, 128)
    assert plain.params["dec.w0"].value.shape == (230, 128)
    assert pi.kind == "pi-attnp" and plain.kind == "attnp"


def test_make_model_rejects_unknown_kind():
    with pytest.raises(ConfigError):
        make_model("transformer")


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(heads=7)          # does not divide d_r = 128
    with pytest.raises(ConfigError):
        ModelConfig(d_z=0)


def test_embed_rejects_wrong_width():
    model = make_model("attnp")
    with pytest.raises(ShapeError):
        model.embed_inputs(ad.constant(np.zeros((3, 55))))


def test_encode_context_shapes_and_duplicates():
    model = make_model("attnp")
    rng = np.random.default_rng(3)
    x = _rows(rng, 1)
    x_emb = model.embed_inputs(ad.constant(x))
    r = model.encode_context(x_emb, ad.constant(np.array([[0.2]])))
    assert r.value.shape == (1, 128)
    # identical context pairs must produce identical representations
    x2 = np.vstack([x, x])
    r2 = model.encode_context(model.embed_inputs(ad.constant(x2)),
                              ad.constant(np.array([[0.2], [0.2]])))
    assert np.allclose(r2.value[0], r2.value[1], atol=1e-12)


def test_encode_context_is_permutation_equivariant():
    model = make_model("attnp")
    rng = np.random.default_rng(11)
    x = _rows(rng, 5)
    y = rng.uniform(-0.5, 0.5, size=(5, 1))
    perm = rng.permutation(5)
    r = model.encode_context(model.embed_inputs(ad.constant(x)), ad.constant(y))
    rp = model.encode_context(model.embed_inputs(ad.constant(x[perm])),
                              ad.constant(y[perm]))
    assert np.max(np.abs(rp.value - r.value[perm])) < 1e-9


def test_latent_permutation_property_suite():
    assert props.check_latent_permutation_invariance(1000) == 1000


def test_sigma_floor_on_random_inputs():
    model = make_model("pi-attnp")
    rng = np.random.default_rng(19)
    floor = model.config.sigma_min
    for _ in range(1000):
        x = _rows(rng, 1)
        emb = model.embed_inputs(ad.constant(x))
        r = model.encode_context(emb, ad.constant(rng.uniform(-1, 1, (1, 1))))
        z = model.latent_path(r)
        pred = model.decode(emb, model.cross_attention(emb, emb, r), z.mean,
                            ad.constant(rng.uniform(-1, 1, (1, 1))))
        assert z.sigma.value.min() >= floor
        assert pred.sigma.value.min() >= floor


# ---- batched fast path equals the set path -----------------------------------

@pytest.mark.parametrize("kind", ["pi-attnp", "attnp"])
def test_batched_rows_match_set_api(kind):
    model = make_model(kind, seed=5)
    rng = np.random.default_rng(23)
    n = 7
    x_c, x_t = _rows(rng, n), _rows(rng, n)
    y_c = rng.uniform(-0.6, 0.6, (n, 1))
    prior = rng.uniform(-0.8, 0.8, (n, 1))
    prior_node = ad.constant(prior) if kind == "pi-attnp" else None
    out = model.forward_batched(ad.constant(x_c), ad.constant(y_c),
                                ad.constant(x_t), None, prior_node, "prior-mean")
    for i in range(n):
        xe = model.embed_inputs(ad.constant(x_c[i:i + 1]))
        te = model.embed_inputs(ad.constant(x_t[i:i + 1]))
        r = model.encode_context(xe, ad.constant(y_c[i:i + 1]))
        z = model.latent_path(r)
        lam = model.cross_attention(xe, te, r)
        p = ad.constant(prior[i:i + 1]) if kind == "pi-attnp" else None
        g = model.decode(te, lam, z.mean, p)
        assert abs(g.mean.value[0, 0] - out.predictive.mean.value[i, 0]) < 1e-12
        assert abs(g.sigma.value[0, 0] - out.predictive.sigma.value[i, 0]) < 1e-12
        assert np.max(np.abs(z.mean.value - out.z_prior.mean.value[i:i + 1])) < 1e-12


def test_forward_batched_mode_contracts():
    model = make_model("attnp")
    rng = np.random.default_rng(29)
    x = ad.constant(_rows(rng, 2))
    y = ad.constant(rng.uniform(-1, 1, (2, 1)))
    out = model.forward_batched(x, y, x, None, None, "prior-mean")
    assert out.z_posterior is None
    with pytest.raises(ConfigError):
        model.forward_batched(x, y, x, None, None, "posterior-sample",
                              np.random.default_rng(0))
    with pytest.raises(ConfigError):
        model.forward_batched(x, y, x, None, None, "prior-sample")   # rng missing
    with pytest.raises(ConfigError):
        model.forward_batched(x, y, x, None, None, "map")            # unknown mode


def test_decoder_prior_flag_contracts():
    pi = make_model("pi-attnp")
    plain = make_model("attnp")
    rng = np.random.default_rng(31)
    x = _rows(rng, 1)
    for model, prior in ((pi, None), (plain, ad.constant(np.array([[0.1]])))):
        emb = model.embed_inputs(ad.constant(x))
        r = model.encode_context(emb, ad.constant(np.array([[0.0]])))
        z = model.latent_path(r)
        lam = model.cross_attention(emb, emb, r)
        with pytest.raises(ConfigError):
            model.decode(emb, lam, z.mean, prior)


# ---- Gaussian arithmetic ------------------------------------------------------

def test_gaussian_nll_hand_value():
    g = GaussianParams(ad.constant(np.zeros((1, 1))), ad.constant(np.ones((1, 1))),
                       ad.constant(np.zeros((1, 1))))
    nll = gaussian_nll(g, ad.constant(np.zeros((1, 1))))
    assert float(nll.value) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)
    # batch mean: a second row one sigma away adds 0.5/2 to the average
    g2 = GaussianParams(ad.constant(np.zeros((2, 1))), ad.constant(np.ones((2, 1))),
                        ad.constant(np.zeros((2, 1))))
    nll2 = gaussian_nll(g2, ad.constant(np.array([[0.0], [1.0]])))
    assert float(nll2.value) == pytest.approx(0.5 * math.log(2 * math.pi) + 0.25,
                                              abs=1e-12)


def test_kl_property_suite():
    assert props.check_kl_properties(1000) == 1000


def test_kl_closed_form_matches_monte_carlo():
    rng = np.random.default_rng(37)
    d = 4
    mu_p, mu_q = rng.normal(0, 1, (1, d)), rng.normal(0, 1, (1, d))
    ls_p, ls_q = rng.uniform(-0.8, 0.3, (1, d)), rng.uniform(-0.8, 0.3, (1, d))
    s_p, s_q = np.exp(ls_p), np.exp(ls_q)
    closed = float(diagonal_kl(
        GaussianParams(ad.constant(mu_p), ad.constant(s_p), ad.constant(ls_p)),
        GaussianParams(ad.constant(mu_q), ad.constant(s_q), ad.constant(ls_q)),
    ).value)
    n = 200_000
    x = mu_p + s_p * rng.standard_normal((n, d))
    log_p = -0.5 * np.sum(((x - mu_p) / s_p) ** 2 + 2 * ls_p, axis=1)
    log_q = -0.5 * np.sum(((x - mu_q) / s_q) ** 2 + 2 * ls_q, axis=1)
    diffs = log_p - log_q
    mc, se = float(diffs.mean()), float(diffs.std(ddof=1) / math.sqrt(n))
    assert abs(closed - mc) < 3.0 * se + 1e-6


# ---- Res-MLP baseline ----------------------------------------------------------

def test_res_mlp_forward_shape_and_determinism():
    model = make_model("res-mlp", seed=2)
    assert isinstance(model, ResMLP) and model.kind == "res-mlp"
    rng = np.random.default_rng(41)
    x = _rows(rng, 6)
    g1 = model.forward(ad.constant(x))
    g2 = model.forward(ad.constant(x))
    assert g1.mean.value.shape == (6, 1)
    assert np.array_equal(g1.mean.value, g2.mean.value)
    assert g1.sigma.value.min() >= model.config.sigma_min


def test_elbo_loss_modes():
    from gapracer.data import ContextTargetBatch
    rng = np.random.default_rng(43)
    n = 8
    batch = ContextTargetBatch(_rows(rng, n), rng.uniform(-1, 1, (n, 1)),
                               _rows(rng, n), rng.uniform(-1, 1, (n, 1)),
                               rng.uniform(-1, 1, (n, 1)))
    for kind in ("pi-attnp", "attnp", "res-mlp"):
        model = make_model(kind, seed=1)
        loss, metrics = elbo_loss(batch, model, np.random.default_rng(7), "train")
        assert math.isfinite(float(loss.value))
        assert set(metrics) == {"nll", "kl", "mae"}
        if kind == "res-mlp":
            assert metrics["kl"] == 0.0
        else:
            assert metrics["kl"] >= 0.0
            # eval mode draws z from the prior and still returns finite scores
            ev, _ = elbo_loss(batch, model, np.random.default_rng(7), "eval")
            assert math.isfinite(float(ev.value))


# ---- prediction and checkpointing ----------------------------------------------

def test_predict_steering_is_deterministic_and_boxed():
    rng = np.random.default_rng(47)
    x_c, x_t = _rows(rng, 1)[0], _rows(rng, 1)[0]
    y_c = np.array([0.1])
    for kind in ("pi-attnp", "attnp", "res-mlp"):
        model = make_model(kind, seed=3)
        prior = np.array([0.2]) if kind == "pi-attnp" else None
        d1 = predict_steering(model, x_c, y_c, x_t, prior)
        d2 = predict_steering(model, x_c, y_c, x_t, prior)
        assert d1 == d2
        assert abs(d1) <= 0.6981
    with pytest.raises(ConfigError):
        predict_steering(make_model("pi-attnp"), x_c, y_c, x_t, None)


def test_checkpoint_roundtrip_preserves_predictions(tmp_path):
    rng = np.random.default_rng(53)
    x_c, x_t = _rows(rng, 1)[0], _rows(rng, 1)[0]
    for kind in ("pi-attnp", "attnp", "res-mlp"):
        model = make_model(kind, seed=9)
        prior = np.array([0.3]) if kind == "pi-attnp" else None
        want = predict_steering(model, x_c, np.array([0.05]), x_t, prior)
        path = tmp_path / f"{kind}.ckpt"
        save_model(path, model, seed=9, step=123, extra={"note": "unit"})
        loaded, ckpt = load_model(path)
        assert ckpt["header"]["kind"] == kind
        assert ckpt["step"] == 123 and ckpt["seed"] == 9
        got = predict_steering(loaded, x_c, np.array([0.05]), x_t, prior)
        assert got == want
        for name, node in model.params.items():
            assert np.array_equal(loaded.params[name].value, node.value)


def test_load_model_rejects_mangled_kind(tmp_path):
    model = make_model("attnp", seed=1)
    path = tmp_path / "m.ckpt"
    save_model(path, model, seed=1, step=1)
    from gapracer.checkpoint import load_checkpoint, save_checkpoint
    ckpt = load_checkpoint(path)
    ckpt["header"]["kind"] = "mystery"
    save_checkpoint(path, {k: ad.parameter(v, k) for k, v in ckpt["params"].items()},
                    seed=1, step=1, header=ckpt["header"])
    with pytest.raises(DataError):
        load_model(path)
