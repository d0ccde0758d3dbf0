"""Steering models: attentive neural process (with optional gap-angle
prior) and a residual-MLP baseline, plus their Gaussian losses.

Layout of the neural process. A raw input row is [zeta, v, omega]; a
small MLP embeds (v, omega) into R^e so its scale is learned rather
than hand-normalized, giving x = [zeta, V] of width b+e. Context pairs
(x_C, y_C) pass through a shared pair-embedding MLP and multi-head
self-attention to per-pair representations R_C. The latent path
averages R_C and maps it to a diagonal Gaussian over z; the
deterministic path cross-attends targets (queries) against context
inputs (keys) over R_C (values) to produce R_lambda. The decoder maps
[x_T, R_lambda, z, prior?] to a Gaussian over the next steering angle;
the prior input (the gap angle phi*) is what distinguishes the
physics-informed variant, widening the decoder input by one.

Everything here runs on 2-D tensors. With single-pair context sets the
attention softmaxes collapse to identity weights, so the batched
training path multiplies straight through the value/output projections;
the general set-shaped path (several context pairs) is kept for the
attention ops proper and must agree exactly with the batched one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ConfigError, ShapeError
from .tracksim import DELTA_MAX

SIGMA_MIN = 1e-3
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ModelConfig:
    b: int = 54                 # scan bins
    e: int = 16                 # velocity-embedding width
    d_r: int = 128              # representation width
    d_z: int = 32               # latent width
    heads: int = 8              # attention heads
    hidden: int = 128           # width of every MLP hidden layer (2 per MLP)
    sigma_min: float = SIGMA_MIN
    prior_enabled: bool = True  # physics-informed variant?

    def __post_init__(self):
        if self.d_r % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide d_r ({self.d_r})")
        for name in ("b", "e", "d_r", "d_z", "heads", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def x_width(self) -> int:
        return self.b + self.e

    def to_dict(self) -> dict:
        return {"b": self.b, "e": self.e, "d_r": self.d_r, "d_z": self.d_z,
                "heads": self.heads, "hidden": self.hidden,
                "sigma_min": self.sigma_min, "prior_enabled": self.prior_enabled}


@dataclass
class GaussianParams:
    mean: Node
    sigma: Node      # >= sigma_min by construction
    log_sigma: Node


@dataclass
class NPForwardOutput:
    predictive: GaussianParams
    z_prior: GaussianParams
    z_posterior: GaussianParams | None
    r_lambda: Node


def _mlp_params(params: dict, rng, prefix: str, dims: list[int]) -> None:
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        params[f"{prefix}.w{i}"] = ad.parameter(
            ad.uniform_init(rng, fan_in, (fan_in, fan_out)), f"{prefix}.w{i}")
        params[f"{prefix}.b{i}"] = ad.parameter(np.zeros(fan_out), f"{prefix}.b{i}")


def _mlp_apply(params: dict, prefix: str, x: Node, n_layers: int) -> Node:
    """Linear stack with tanh between layers, linear output."""
    h = x
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, params[f"{prefix}.w{i}"]), params[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = ad.tanh(h)
    return h


def _gaussian_head(raw: Node, sigma_min: float) -> GaussianParams:
    """Split a (n, 2) head output into (mean, sigma) with a floored sigma."""
    mean = ad.narrow(raw, 1, 0, 1)
    sigma = ad.add(ad.softplus(ad.narrow(raw, 1, 1, 1)), ad.constant(sigma_min))
    return GaussianParams(mean, sigma, ad.log(sigma))


def _gaussian_head_wide(raw: Node, width: int, sigma_min: float) -> GaussianParams:
    mean = ad.narrow(raw, 1, 0, width)
    sigma = ad.add(ad.softplus(ad.narrow(raw, 1, width, width)), ad.constant(sigma_min))
    return GaussianParams(mean, sigma, ad.log(sigma))


class AttentiveNP:
    """Attentive neural process over (scan, speeds) -> steering."""

    kind = "attnp"

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.kind = "pi-attnp" if config.prior_enabled else "attnp"
        rng = np.random.default_rng(seed)
        p: dict[str, Node] = {}
        c = config
        _mlp_params(p, rng, "vel", [2, c.hidden, c.hidden, c.e])
        _mlp_params(p, rng, "pair", [c.x_width + 1, c.hidden, c.hidden, c.d_r])
        for name in ("sa.wq", "sa.wk", "sa.wv", "sa.wo",
                     "ca.wv", "ca.wo"):
            p[name] = ad.parameter(ad.uniform_init(rng, c.d_r, (c.d_r, c.d_r)), name)
        for name in ("ca.wq", "ca.wk"):
            p[name] = ad.parameter(ad.uniform_init(rng, c.x_width, (c.x_width, c.d_r)), name)
        _mlp_params(p, rng, "lat", [c.d_r, c.hidden, c.hidden, 2 * c.d_z])
        dec_in = c.x_width + c.d_r + c.d_z + (1 if c.prior_enabled else 0)
        _mlp_params(p, rng, "dec", [dec_in, c.hidden, c.hidden, 2])
        self.params = p

    # ---- building blocks -------------------------------------------------

    def embed_inputs(self, x_raw: Node) -> Node:
        """[zeta, v, omega] (n, b+2) -> [zeta, V] (n, b+e)."""
        b = self.config.b
        if x_raw.value.shape[1] != b + 2:
            raise ShapeError(f"raw input width {x_raw.value.shape[1]} != b+2 = {b + 2}")
        zeta = ad.narrow(x_raw, 1, 0, b)
        vw = ad.narrow(x_raw, 1, b, 2)
        v_emb = _mlp_apply(self.params, "vel", vw, 3)
        return ad.concat([zeta, v_emb], axis=1)

    def _heads_split(self, m: Node) -> list[Node]:
        dh = self.config.d_r // self.config.heads
        return [ad.narrow(m, 1, h * dh, dh) for h in range(self.config.heads)]

    def encode_context(self, x_emb: Node, y: Node) -> Node:
        """Set-shaped context encoding: pair MLP then self-attention.

        x_emb: (N, b+e), y: (N, 1) -> (N, d_r). Permutation-equivariant.
        """
        if x_emb.value.shape[1] != self.config.x_width:
            raise ShapeError(f"embedded width {x_emb.value.shape[1]} != "
                             f"{self.config.x_width}")
        if y.value.shape != (x_emb.value.shape[0], 1):
            raise ShapeError(f"y shape {y.value.shape} does not match context size")
        r = _mlp_apply(self.params, "pair", ad.concat([x_emb, y], axis=1), 3)
        return self._self_attention(r)

    def _self_attention(self, r: Node) -> Node:
        p = self.params
        q, k, v = ad.matmul(r, p["sa.wq"]), ad.matmul(r, p["sa.wk"]), ad.matmul(r, p["sa.wv"])
        dh = self.config.d_r // self.config.heads
        scale = ad.constant(1.0 / math.sqrt(dh))
        outs = []
        for qh, kh, vh in zip(self._heads_split(q), self._heads_split(k),
                              self._heads_split(v)):
            scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), scale)
            outs.append(ad.matmul(ad.softmax(scores, axis=1), vh))
        return ad.matmul(ad.concat(outs, axis=1), p["sa.wo"])

    def latent_path(self, r_c: Node) -> GaussianParams:
        """Average the set representation and map to a Gaussian over z."""
        pooled = ad.reduce_mean(r_c, axis=0, keepdims=True)
        raw = _mlp_apply(self.params, "lat", pooled, 3)
        return _gaussian_head_wide(raw, self.config.d_z, self.config.sigma_min)

    def cross_attention(self, x_c_emb: Node, x_t_emb: Node, r_c: Node) -> Node:
        """Targets query the context set: (N_T, d_r) deterministic path."""
        p = self.params
        q = ad.matmul(x_t_emb, p["ca.wq"])
        k = ad.matmul(x_c_emb, p["ca.wk"])
        v = ad.matmul(r_c, p["ca.wv"])
        dh = self.config.d_r // self.config.heads
        scale = ad.constant(1.0 / math.sqrt(dh))
        outs = []
        for qh, kh, vh in zip(self._heads_split(q), self._heads_split(k),
                              self._heads_split(v)):
            scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), scale)
            outs.append(ad.matmul(ad.softmax(scores, axis=1), vh))
        return ad.matmul(ad.concat(outs, axis=1), p["ca.wo"])

    def decode(self, x_t_emb: Node, r_lambda: Node, z: Node,
               prior: Node | None = None) -> GaussianParams:
        """[x_T, R_lambda, z, prior?] -> Gaussian over the next steering."""
        if self.config.prior_enabled and prior is None:
            raise ConfigError("prior-informed decoder needs the gap-angle input")
        if not self.config.prior_enabled and prior is not None:
            raise ConfigError("prior input supplied to a prior-disabled model")
        parts = [x_t_emb, r_lambda, z]
        if prior is not None:
            parts.append(prior)
        raw = _mlp_apply(self.params, "dec", ad.concat(parts, axis=1), 3)
        return _gaussian_head(raw, self.config.sigma_min)

    # ---- batched single-pair fast path -----------------------------------

    def _encode_pairs_batched(self, x_emb: Node, y: Node) -> Node:
        """Per-row context encoding for batches of single-pair sets.

        With one pair per set, both attention softmaxes are over a
        single key and equal 1 exactly, so attention reduces to the
        value and output projections. The query/key projections receive
        no gradient on this path; they still live in the checkpoint.
        """
        r = _mlp_apply(self.params, "pair", ad.concat([x_emb, y], axis=1), 3)
        return ad.matmul(ad.matmul(r, self.params["sa.wv"]), self.params["sa.wo"])

    def _latent_batched(self, r: Node) -> GaussianParams:
        raw = _mlp_apply(self.params, "lat", r, 3)
        return _gaussian_head_wide(raw, self.config.d_z, self.config.sigma_min)

    def _cross_batched(self, r_c: Node) -> Node:
        return ad.matmul(ad.matmul(r_c, self.params["ca.wv"]), self.params["ca.wo"])

    def forward_batched(self, x_c_raw: Node, y_c: Node, x_t_raw: Node,
                        y_t: Node | None, prior: Node | None,
                        z_mode: str, rng=None) -> NPForwardOutput:
        """Row-parallel forward over (batch,) independent single-pair sets.

        z_mode: "posterior-sample" (training), "prior-sample" (held-out
        evaluation), or "prior-mean" (deterministic control inference).
        A posterior is only formed when targets y_t are given.
        """
        x_c = self.embed_inputs(x_c_raw)
        x_t = self.embed_inputs(x_t_raw)
        r_c = self._encode_pairs_batched(x_c, y_c)
        z_prior = self._latent_batched(r_c)
        z_posterior = None
        if y_t is not None:
            r_t = self._encode_pairs_batched(x_t, y_t)
            z_posterior = self._latent_batched(r_t)
        if z_mode == "posterior-sample":
            if z_posterior is None or rng is None:
                raise ConfigError("posterior sampling needs targets and an rng")
            eps = ad.constant(rng.standard_normal(z_posterior.mean.value.shape))
            z = ad.add(z_posterior.mean, ad.mul(z_posterior.sigma, eps))
        elif z_mode == "prior-sample":
            if rng is None:
                raise ConfigError("prior sampling needs an rng")
            eps = ad.constant(rng.standard_normal(z_prior.mean.value.shape))
            z = ad.add(z_prior.mean, ad.mul(z_prior.sigma, eps))
        elif z_mode == "prior-mean":
            z = z_prior.mean
        else:
            raise ConfigError(f"unknown z_mode {z_mode!r}")
        r_lambda = self._cross_batched(r_c)
        prior_node = prior if self.config.prior_enabled else None
        predictive = self.decode(x_t, r_lambda, z, prior_node)
        return NPForwardOutput(predictive, z_prior, z_posterior, r_lambda)


class ResMLP:
    """Residual-MLP baseline: target inputs only, no context conditioning."""

    kind = "res-mlp"

    def __init__(self, config: ModelConfig, seed: int = 0, blocks: int = 4):
        self.config = config
        self.blocks = blocks
        rng = np.random.default_rng(seed)
        p: dict[str, Node] = {}
        c = config
        _mlp_params(p, rng, "vel", [2, c.hidden, c.hidden, c.e])
        p["proj.w"] = ad.parameter(ad.uniform_init(rng, c.x_width, (c.x_width, c.hidden)),
                                   "proj.w")
        p["proj.b"] = ad.parameter(np.zeros(c.hidden), "proj.b")
        for i in range(blocks):
            _mlp_params(p, rng, f"blk{i}", [c.hidden, c.hidden, c.hidden])
        p["head.w"] = ad.parameter(ad.uniform_init(rng, c.hidden, (c.hidden, 2)), "head.w")
        p["head.b"] = ad.parameter(np.zeros(2), "head.b")
        self.params = p

    def embed_inputs(self, x_raw: Node) -> Node:
        b = self.config.b
        if x_raw.value.shape[1] != b + 2:
            raise ShapeError(f"raw input width {x_raw.value.shape[1]} != b+2 = {b + 2}")
        zeta = ad.narrow(x_raw, 1, 0, b)
        vw = ad.narrow(x_raw, 1, b, 2)
        return ad.concat([zeta, _mlp_apply(self.params, "vel", vw, 3)], axis=1)

    def forward(self, x_t_raw: Node) -> GaussianParams:
        p = self.params
        h = ad.tanh(ad.add(ad.matmul(self.embed_inputs(x_t_raw), p["proj.w"]),
                           p["proj.b"]))
        for i in range(self.blocks):
            t = ad.tanh(ad.add(ad.matmul(h, p[f"blk{i}.w0"]), p[f"blk{i}.b0"]))
            h = ad.add(h, ad.add(ad.matmul(t, p[f"blk{i}.w1"]), p[f"blk{i}.b1"]))
        raw = ad.add(ad.matmul(h, p["head.w"]), p["head.b"])
        return _gaussian_head(raw, self.config.sigma_min)


# ---- losses and inference -------------------------------------------------


def gaussian_nll(g: GaussianParams, y: Node) -> Node:
    """Per-batch mean negative log likelihood, y of shape (n, 1)."""
    diff = ad.sub(y, g.mean)
    quad = ad.mul(ad.constant(0.5), ad.mul(ad.div(diff, g.sigma), ad.div(diff, g.sigma)))
    per_point = ad.add(g.log_sigma, ad.add(quad, ad.constant(0.5 * LOG_2PI)))
    return ad.reduce_mean(per_point)


def diagonal_kl(post: GaussianParams, prior: GaussianParams) -> Node:
    """Mean over batch of KL(post || prior) for diagonal Gaussians (n, d)."""
    var_ratio = ad.div(ad.mul(post.sigma, post.sigma),
                       ad.mul(prior.sigma, prior.sigma))
    md = ad.sub(post.mean, prior.mean)
    quad = ad.div(ad.mul(md, md), ad.mul(prior.sigma, prior.sigma))
    per_dim = ad.mul(ad.constant(0.5),
                     ad.add(ad.sub(var_ratio, ad.constant(1.0)), quad))
    per_dim = ad.add(per_dim, ad.sub(prior.log_sigma, post.log_sigma))
    return ad.reduce_mean(ad.reduce_sum(per_dim, axis=1))


def elbo_loss(batch, model, rng, mode: str = "train"):
    """Negative ELBO for one batch: reconstruction NLL plus latent KL.

    Training samples z from the posterior (reparameterized); evaluation
    samples from the prior so held-out scores never see target labels
    through the latent. Returns (loss Node, metrics dict).
    """
    x_c = ad.constant(batch.x_c)
    y_c = ad.constant(batch.y_c)
    x_t = ad.constant(batch.x_t)
    y_t = ad.constant(batch.y_t)
    prior = ad.constant(batch.prior)

    if isinstance(model, ResMLP):
        g = model.forward(x_t)
        loss = gaussian_nll(g, y_t)
        nll = float(loss.value)
        mae = float(np.mean(np.abs(g.mean.value - batch.y_t)))
        return loss, {"nll": nll, "kl": 0.0, "mae": mae}

    z_mode = "posterior-sample" if mode == "train" else "prior-sample"
    out = model.forward_batched(x_c, y_c, x_t, y_t, prior, z_mode, rng)
    nll = gaussian_nll(out.predictive, y_t)
    kl = diagonal_kl(out.z_posterior, out.z_prior)
    loss = ad.add(nll, kl)
    mae = float(np.mean(np.abs(out.predictive.mean.value - batch.y_t)))
    return loss, {"nll": float(nll.value), "kl": float(kl.value), "mae": mae}


def predict_steering(model, x_c_raw: np.ndarray, y_c: np.ndarray,
                     x_t_raw: np.ndarray, prior: np.ndarray | None = None) -> float:
    """Deterministic control-loop inference: z is the prior mean, the
    predictive mean is clamped to the actuator box."""
    with ad.no_grad():
        if isinstance(model, ResMLP):
            g = model.forward(ad.constant(np.atleast_2d(x_t_raw)))
        else:
            prior_node = None
            if model.config.prior_enabled:
                if prior is None:
                    raise ConfigError("physics-informed model needs the gap prior")
                prior_node = ad.constant(np.atleast_2d(prior))
            out = model.forward_batched(
                ad.constant(np.atleast_2d(x_c_raw)), ad.constant(np.atleast_2d(y_c)),
                ad.constant(np.atleast_2d(x_t_raw)), None, prior_node, "prior-mean")
            g = out.predictive
    return float(np.clip(g.mean.value[0, 0], -DELTA_MAX, DELTA_MAX))


def save_model(path, model, seed: int, step: int, extra: dict | None = None) -> None:
    from .checkpoint import save_checkpoint

    header = {"kind": model.kind, "config": model.config.to_dict()}
    if isinstance(model, ResMLP):
        header["blocks"] = model.blocks
    if extra:
        header.update(extra)
    save_checkpoint(path, model.params, seed=seed, step=step, header=header)


def load_model(path):
    """Rebuild a model from a checkpoint; mismatched shapes fail loudly."""
    from .checkpoint import load_checkpoint
    from .errors import DataError

    ckpt = load_checkpoint(path)
    header = ckpt["header"]
    kind = header.get("kind")
    cfg = ModelConfig(**header["config"])
    if kind in ("pi-attnp", "attnp"):
        model = AttentiveNP(cfg, seed=0)
    elif kind == "res-mlp":
        model = ResMLP(cfg, seed=0, blocks=int(header.get("blocks", 4)))
    else:
        raise DataError(f"checkpoint has unknown model kind {kind!r}")
    if set(ckpt["params"]) != set(model.params):
        missing = set(model.params) ^ set(ckpt["params"])
        raise DataError(f"checkpoint parameter names do not match model: {sorted(missing)}")
    for name, value in ckpt["params"].items():
        if model.params[name].value.shape != value.shape:
            raise DataError(f"checkpoint {name} shape {value.shape} != "
                            f"model {model.params[name].value.shape}")
        model.params[name].value = value
    return model, ckpt


def make_model(kind: str, config: ModelConfig | None = None, seed: int = 0):
    """Construct a model by CLI name; config prior flag follows the kind."""
    base = config.to_dict() if config is not None else {}
    if kind == "pi-attnp":
        base["prior_enabled"] = True
        return AttentiveNP(ModelConfig(**base), seed)
    if kind == "attnp":
        base["prior_enabled"] = False
        return AttentiveNP(ModelConfig(**base), seed)
    if kind == "res-mlp":
        base["prior_enabled"] = False
        return ResMLP(ModelConfig(**base), seed)
    raise ConfigError(f"unknown model kind {kind!r}; expected pi-attnp, attnp, res-mlp")
