"""Text-conditioned diffusion over normalized head-weight blocks.

The denoiser is a pre-norm transformer.  Each weight block gets its own
linear projection to a token; the fused text condition and a sinusoidal
timestep embedding are projected to two extra tokens prepended to the
sequence; noise predictions are read back from the block tokens through
per-block output projections.  Training combines the noise-regression loss,
a hidden-unit permutation equivariance penalty and a non-saturating
adversarial term from an unconditional weight-space discriminator.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import gradcore, store
from .headtrainer import TrainingDivergedError
from .seeding import derive_rng
from .weightspace import (ChunkSpec, ParamSchema, chunk_spec, from_normalized,
                          permutation_index, sample_permutation, to_normalized)

PROB_CLAMP = 1e-7
CURVE_COLUMNS = ("step", "loss_diff", "loss_sym", "loss_adv_disc", "loss_adv_gen", "loss_total")


# ---------------------------------------------------------------------------
# noise schedule and forward process
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    @property
    def N(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def posterior_variance(self) -> np.ndarray:
        ab = self.alpha_bars
        prev = np.concatenate([[1.0], ab[:-1]])
        return (1.0 - prev) / (1.0 - ab) * self.betas

    # 1-based accessors
    def beta(self, n):
        return self.betas[np.asarray(n) - 1]

    def alpha_bar(self, n):
        return self.alpha_bars[np.asarray(n) - 1]


def make_schedule(N: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if N < 1:
        raise ValueError("need at least one diffusion step")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, N))


def _check_steps(n, schedule):
    n = np.asarray(n)
    if np.any(n < 1) or np.any(n > schedule.N):
        raise ValueError(f"diffusion step outside 1..{schedule.N}")
    return n


def forward_sample(theta0, n, eps, schedule: NoiseSchedule) -> np.ndarray:
    """sqrt(abar_n) theta0 + sqrt(1 - abar_n) eps; ``n`` may be per-row."""
    n = _check_steps(n, schedule)
    theta0 = np.asarray(theta0, dtype=np.float64)
    ab = schedule.alpha_bar(n)
    if theta0.ndim == 2 and np.ndim(ab):
        ab = ab[:, None]
    return np.sqrt(ab) * theta0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def timestep_embedding(steps, width: int) -> np.ndarray:
    steps = np.asarray(steps, dtype=np.float64).reshape(-1, 1)
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(1, half))
    emb = np.concatenate([np.sin(steps * freqs), np.cos(steps * freqs)], axis=1)
    if width % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


# ---------------------------------------------------------------------------
# parameters and graphs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserShape:
    block_size: int
    block_count: int
    embed_dim: int
    width: int = 64
    depth: int = 4
    heads: int = 4
    ffn_mult: int = 4
    final_norm: bool = False

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("token width must be divisible by the head count")

    @property
    def padded_dim(self) -> int:
        return self.block_size * self.block_count

    @property
    def tokens(self) -> int:
        return self.block_count + 2


def init_denoiser_params(shape: DenoiserShape, rng: np.random.Generator) -> dict:
    h, s, nb, E = shape.width, shape.block_size, shape.block_count, shape.embed_dim
    f = shape.ffn_mult * h

    def lin(fan_in, fan_out, gain=1.0):
        return rng.normal(0.0, gain / math.sqrt(fan_in), (fan_in, fan_out))

    p = {
        "in.w": rng.normal(0.0, 1.0 / math.sqrt(s), (nb * s, h)),
        "in.b": np.zeros((nb, h)),
        "cond.w": lin(E, h),
        "cond.b": np.zeros((1, h)),
        "time.w": lin(h, h),
        "time.b": np.zeros((1, h)),
    }
    for layer in range(shape.depth):
        pre = f"l{layer}."
        p[pre + "ln1.g"] = np.ones((1, h))
        p[pre + "ln1.b"] = np.zeros((1, h))
        for name in ("q", "k", "v"):
            p[pre + name + ".w"] = lin(h, h)
            # a key bias only shifts each query's scores by a constant, which softmax ignores
            if name != "k":
                p[pre + name + ".b"] = np.zeros((1, h))
        p[pre + "o.w"] = lin(h, h, 1.0 / math.sqrt(2 * shape.depth))
        p[pre + "o.b"] = np.zeros((1, h))
        p[pre + "ln2.g"] = np.ones((1, h))
        p[pre + "ln2.b"] = np.zeros((1, h))
        p[pre + "ff1.w"] = lin(h, f)
        p[pre + "ff1.b"] = np.zeros((1, f))
        p[pre + "ff2.w"] = lin(f, h, 1.0 / math.sqrt(2 * shape.depth))
        p[pre + "ff2.b"] = np.zeros((1, h))
    if shape.final_norm:
        p["lnf.g"] = np.ones((1, h))
        p["lnf.b"] = np.zeros((1, h))
    p["out.w"] = rng.normal(0.0, 0.1 / math.sqrt(h), (nb * h, s))
    p["out.b"] = np.zeros((nb, s))
    return p


def init_discriminator_params(d: int, hidden: tuple, rng: np.random.Generator) -> dict:
    widths = (d, *hidden, 1)
    if len(widths) != 5:
        raise ValueError("the discriminator has exactly four linear layers (three hidden widths)")
    p = {}
    for i in range(4):
        p[f"fc{i}.w"] = rng.normal(0.0, math.sqrt(2.0 / widths[i]), (widths[i], widths[i + 1]))
        p[f"fc{i}.b"] = np.zeros((1, widths[i + 1]))
    return p


def _declare_params(g: gradcore.Graph, names, prefix=""):
    return {n: g.input(prefix + n) for n in names}


def _denoiser(g: gradcore.Graph, P: dict, shape: DenoiserShape, theta, cond, temb):
    blocks = g.block_linear(theta, P["in.w"], P["in.b"], shape.block_count, name="block_tokens")
    c_tok = g.add(g.matmul(cond, P["cond.w"]), P["cond.b"], name="cond_token")
    t_tok = g.add(g.matmul(temb, P["time.w"]), P["time.b"], name="time_token")
    x = g.concat_tokens([c_tok, t_tok, blocks], [1, 1, shape.block_count])
    T = shape.tokens
    for layer in range(shape.depth):
        pre = f"l{layer}."
        hN = g.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
        q = g.add(g.matmul(hN, P[pre + "q.w"]), P[pre + "q.b"])
        k = g.matmul(hN, P[pre + "k.w"])
        v = g.add(g.matmul(hN, P[pre + "v.w"]), P[pre + "v.b"])
        a = g.attention(q, k, v, T, shape.heads)
        x = g.add(x, g.add(g.matmul(a, P[pre + "o.w"]), P[pre + "o.b"]))
        hN = g.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        ff = g.gelu(g.add(g.matmul(hN, P[pre + "ff1.w"]), P[pre + "ff1.b"]))
        x = g.add(x, g.add(g.matmul(ff, P[pre + "ff2.w"]), P[pre + "ff2.b"]))
    if shape.final_norm:
        x = g.layer_norm(x, P["lnf.g"], P["lnf.b"])
    out = g.slice_tokens(x, T, 2, shape.block_count)
    return g.block_unlinear(out, P["out.w"], P["out.b"], shape.block_count, name="eps_hat")


def _disc_logit(g: gradcore.Graph, Q: dict, x):
    for i in range(4):
        x = g.add(g.matmul(x, Q[f"fc{i}.w"]), Q[f"fc{i}.b"])
        if i < 3:
            x = g.relu(x)
    return x


def _log_prob(g, logit, negate=False):
    z = g.scale(logit, -1.0) if negate else logit
    return g.reduce_mean(g.log(g.clamp(g.sigmoid(z), PROB_CLAMP, 1.0 - PROB_CLAMP)))


def build_predict_graph(shape: DenoiserShape, param_names) -> gradcore.Graph:
    g = gradcore.Graph()
    theta, cond, temb = g.input("theta"), g.input("cond"), g.input("temb")
    P = _declare_params(g, param_names)
    _denoiser(g, P, shape, theta, cond, temb)
    return g


def build_disc_graph(d: int, disc_names) -> gradcore.Graph:
    """Discriminator objective -[E log D(real) + E log(1 - D(fake))]."""
    g = gradcore.Graph()
    real, fake = g.input("real"), g.input("fake")
    Q = _declare_params(g, disc_names, "D.")
    lr_ = _log_prob(g, _disc_logit(g, Q, real))
    lf = _log_prob(g, _disc_logit(g, Q, fake), negate=True)
    g.scale(g.add(lr_, lf), -1.0, name="disc_loss")
    return g


@dataclass
class TrainingGraph:
    graph: gradcore.Graph
    nodes: dict


def build_training_graph(shape: DenoiserShape, d: int, param_names, disc_names,
                         lambda_sym: float, lambda_adv: float) -> TrainingGraph:
    """Generator objective on a stacked batch [theta_n ; g.theta_n] of 2B rows.

    Per-batch inputs: theta (2B x D), cond (2B x E), temb (2B x h), eps, mask,
    x0_const and x0_coef (B x D).  The permutation gather index is a node
    attribute set per batch.
    """
    g = gradcore.Graph()
    theta, cond, temb = g.input("theta"), g.input("cond"), g.input("temb")
    eps, mask = g.input("eps"), g.input("mask")
    x0_const, x0_coef = g.input("x0_const"), g.input("x0_coef")
    P = _declare_params(g, param_names)
    Q = _declare_params(g, disc_names, "D.")
    pred = _denoiser(g, P, shape, theta, cond, temb)
    D = shape.padded_dim
    B_nodes = {}
    # rows [0, B) are the original items, rows [B, 2B) their permuted copies
    first = g.slice_rows(pred, 0, 1, name="eps_first")
    second = g.slice_rows(pred, 1, 2, name="eps_second")
    B_nodes["first"], B_nodes["second"] = first, second
    masked = g.mul(first, mask)
    l_diff = g.scale(g.mse_loss(masked, g.mul(eps, mask)), D, name="loss_diff")
    moved = g.take_cols(first, np.zeros((1, D), dtype=np.int64), name="g_eps")
    l_sym = g.scale(g.mse_loss(g.mul(second, mask), g.mul(moved, mask)), D, name="loss_sym")
    x0 = g.sub(x0_const, g.mul(first, x0_coef), name="x0_hat")
    x0 = g.slice_cols(x0, 0, d)
    l_gen = g.scale(_log_prob(g, _disc_logit(g, Q, x0)), -1.0, name="loss_adv_gen")
    total = g.add(g.add(l_diff, g.scale(l_sym, lambda_sym)), g.scale(l_gen, lambda_adv),
                  name="loss_total")
    nodes = dict(B_nodes, loss_diff=l_diff, loss_sym=l_sym, loss_adv_gen=l_gen,
                 loss_total=total, g_eps=moved, eps_hat=pred, x0_hat=x0)
    g.set_root(total)
    return TrainingGraph(g, nodes)


def _set_batch_rows(tg: TrainingGraph, B: int):
    tg.nodes["first"].attrs.update(start=0, stop=B)
    tg.nodes["second"].attrs.update(start=B, stop=2 * B)


def bind_generator_batch(tg: TrainingGraph, params: dict, disc_params: dict, theta0, cond,
                         steps, eps, perms, schema: ParamSchema, schedule: NoiseSchedule,
                         mask) -> dict:
    """Forward-noise one batch, set the per-batch graph attributes and return the feed."""
    B, D = theta0.shape
    theta_n = forward_sample(theta0, steps, eps, schedule)
    gidx = np.stack([permutation_index(p, schema, D) for p in perms])
    moved = np.take_along_axis(theta_n, gidx, axis=1)
    ab = schedule.alpha_bar(steps)[:, None]
    width = params["time.w"].shape[0]
    feed = dict(params)
    feed.update({"D." + k: v for k, v in disc_params.items()})
    feed.update(theta=np.concatenate([theta_n, moved]),
                cond=np.concatenate([cond, cond]),
                temb=timestep_embedding(np.concatenate([steps, steps]), width),
                eps=eps, mask=np.broadcast_to(mask, (B, D)),
                x0_const=theta_n / np.sqrt(ab),
                x0_coef=np.broadcast_to(np.sqrt((1.0 - ab) / ab), (B, D)))
    _set_batch_rows(tg, B)
    tg.graph.set_attr(tg.nodes["g_eps"], index=gidx)
    return feed


def gradcheck_case(seed: int, feature_dim=4, hidden_dim=2, block_size=4, embed_dim=6, width=8,
                   depth=1, batch=2, lambda_sym=0.1, lambda_adv=0.01):
    """A miniature training graph with one random batch bound, for gradient checks.

    Returns ``(graph, feed, param_names)``; the root is the total loss.
    """
    rng = derive_rng(seed, "gradcheck")
    schema = ParamSchema(feature_dim, hidden_dim)
    spec = chunk_spec(schema.d, block_size)
    shape = DenoiserShape(block_size, spec.block_count, embed_dim, width, depth, heads=2)
    params = init_denoiser_params(shape, rng)
    # perturb the zero-initialized biases and gains so every term is exercised
    for k in params:
        if k.endswith(".b") or k.endswith(".g"):
            params[k] = params[k] + 0.1 * rng.standard_normal(params[k].shape)
    dparams = init_discriminator_params(schema.d, (6, 5, 4), rng)
    tg = build_training_graph(shape, schema.d, list(params), list(dparams), lambda_sym, lambda_adv)
    sched = make_schedule(20, 1e-3, 0.1)
    mask = pad_mask(spec)
    D = spec.padded_dim
    feed = bind_generator_batch(tg, params, dparams, rng.uniform(-1, 1, (batch, D)) * mask,
                                rng.standard_normal((batch, embed_dim)),
                                rng.integers(1, sched.N + 1, batch),
                                rng.standard_normal((batch, D)) * mask,
                                [sample_permutation(rng, hidden_dim) for _ in range(batch)],
                                schema, sched, mask)
    tg.graph.set_root(tg.nodes["loss_total"])
    return tg.graph, feed, list(params)


# ---------------------------------------------------------------------------
# model objects
# ---------------------------------------------------------------------------

class DenoiserModel:
    """Callable noise predictor ``eps(theta_n, steps, cond)`` over padded rows."""

    def __init__(self, shape: DenoiserShape, params: dict):
        self.shape = shape
        self.params = params
        self._graph = build_predict_graph(shape, list(params))

    def __call__(self, theta_n, steps, cond) -> np.ndarray:
        theta_n = np.atleast_2d(np.asarray(theta_n, dtype=np.float64))
        steps = np.broadcast_to(np.asarray(steps), (theta_n.shape[0],))
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        if cond.shape[0] == 1 and theta_n.shape[0] > 1:
            cond = np.repeat(cond, theta_n.shape[0], axis=0)
        feed = dict(self.params, theta=theta_n, cond=cond,
                    temb=timestep_embedding(steps, self.shape.width))
        return self._graph.evaluate(feed).copy()

    def graph_feed(self, theta_n, steps, cond) -> tuple[gradcore.Graph, dict]:
        feed = dict(self.params, theta=np.atleast_2d(theta_n), cond=np.atleast_2d(cond),
                    temb=timestep_embedding(np.atleast_1d(steps), self.shape.width))
        return self._graph, feed


class Discriminator:
    def __init__(self, d: int, params: dict):
        self.d = d
        self.params = params
        g = gradcore.Graph()
        x = g.input("x")
        Q = _declare_params(g, list(params), "D.")
        g.sigmoid(_disc_logit(g, Q, x), name="prob")
        self._graph = g
        self._loss_graph = build_disc_graph(d, list(params))

    def feed(self, **extra):
        return dict({"D." + k: v for k, v in self.params.items()}, **extra)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self._graph.evaluate(self.feed(x=x))[:, 0].copy()


def loss_diff(theta0, cond, schedule: NoiseSchedule, model, rng: np.random.Generator,
              mask=None, return_draws=False):
    """Mean over items of the summed squared noise-prediction error."""
    theta0 = np.atleast_2d(np.asarray(theta0, dtype=np.float64))
    B, D = theta0.shape
    n = rng.integers(1, schedule.N + 1, size=B)
    eps = rng.standard_normal((B, D))
    if mask is not None:
        eps = eps * mask
    theta_n = forward_sample(theta0, n, eps, schedule)
    err = eps - model(theta_n, n, cond)
    if mask is not None:
        err = err * mask
    value = float(np.mean(np.sum(err * err, axis=1)))
    return (value, (n, eps, theta_n)) if return_draws else value


def loss_sym(theta_n, steps, cond, model, perms, schema: ParamSchema, mask=None) -> float:
    """Mean over items of ||eps(g.theta_n) - g.eps(theta_n)||^2 with per-item g."""
    theta_n = np.atleast_2d(np.asarray(theta_n, dtype=np.float64))
    D = theta_n.shape[1]
    idx = np.stack([permutation_index(p, schema, D) for p in perms])
    moved_in = np.take_along_axis(theta_n, idx, axis=1)
    base = model(theta_n, steps, cond)
    diff = model(moved_in, steps, cond) - np.take_along_axis(base, idx, axis=1)
    if mask is not None:
        diff = diff * mask
    return float(np.mean(np.sum(diff * diff, axis=1)))


def loss_adv(real, generated, discriminator: Discriminator) -> tuple[float, float]:
    """(discriminator loss, non-saturating generator loss) with clamped probabilities."""
    real = np.atleast_2d(real)
    generated = np.atleast_2d(generated)
    if real.shape[0] == 0 or generated.shape[0] == 0:
        raise ValueError("adversarial loss needs non-empty batches")
    pr = np.clip(discriminator(real), PROB_CLAMP, 1 - PROB_CLAMP)
    pg = np.clip(discriminator(generated), PROB_CLAMP, 1 - PROB_CLAMP)
    disc = -(np.mean(np.log(pr)) + np.mean(np.log(1.0 - pg)))
    gen = -np.mean(np.log(pg))
    return float(disc), float(gen)


def loss_total(l_diff: float, l_sym: float, l_adv_gen: float, lambda_sym: float,
               lambda_adv: float) -> float:
    return l_diff + lambda_sym * l_sym + lambda_adv * l_adv_gen


def pad_mask(spec: ChunkSpec) -> np.ndarray:
    m = np.ones(spec.padded_dim)
    if spec.pad_length:
        m[-spec.pad_length:] = 0.0
    return m


def pad_value(spec: ChunkSpec) -> np.ndarray:
    """Normalized value of the zero padding (one per padded coordinate)."""
    if not spec.pad_length:
        return np.zeros(0)
    row = to_normalized(np.zeros((1, spec.padded_dim - spec.pad_length)), spec)[0]
    return row[-spec.pad_length:]


def reverse_chain(theta, cond, start: int, schedule: NoiseSchedule, model, rng,
                  stochastic: bool = True, spec: ChunkSpec | None = None,
                  keep_trace: bool = False):
    """Run theta_start -> theta_0 with mu = (theta - beta/sqrt(1-abar) eps)/sqrt(alpha)."""
    theta = np.array(theta, dtype=np.float64, copy=True)
    pad = spec.pad_length if spec is not None else 0
    pv = pad_value(spec) if pad else None
    trace = []
    for n in range(start, 0, -1):
        if pad:
            theta[:, -pad:] = math.sqrt(schedule.alpha_bar(n)) * pv
        eps = model(theta, np.full(theta.shape[0], n), cond)
        beta, ab = schedule.beta(n), schedule.alpha_bar(n)
        mu = (theta - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(1.0 - beta)
        if stochastic and n > 1:
            var = schedule.posterior_variance[n - 1]
            mu = mu + math.sqrt(var) * rng.standard_normal(theta.shape)
        theta = mu
        if not np.all(np.isfinite(theta)):
            raise FloatingPointError(f"non-finite sampler state at step {n}")
        if keep_trace:
            trace.append(theta.copy())
    if pad:
        theta[:, -pad:] = pv
    return (theta, trace) if keep_trace else theta


def sample(cond, schedule: NoiseSchedule, model, rng: np.random.Generator, spec: ChunkSpec,
           stochastic: bool = True) -> np.ndarray:
    """Draw weights (rows of length d, denormalized) for each condition row."""
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    start = rng.standard_normal((cond.shape[0], spec.padded_dim))
    theta0 = reverse_chain(start, cond, schedule.N, schedule, model, rng, stochastic, spec)
    return from_normalized(theta0, spec)


def partial_denoise(weights, cond, from_step: int, schedule: NoiseSchedule, model,
                    rng: np.random.Generator, spec: ChunkSpec, stochastic: bool = True) -> np.ndarray:
    """Noise weights forward to ``from_step`` and denoise back to step 0."""
    _check_steps(from_step, schedule)
    x0 = to_normalized(np.atleast_2d(weights), spec)
    eps = rng.standard_normal(x0.shape) * pad_mask(spec)
    xm = forward_sample(x0, np.full(x0.shape[0], from_step), eps, schedule)
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    return from_normalized(reverse_chain(xm, cond, from_step, schedule, model, rng, stochastic,
                                         spec), spec)


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    curves: list = field(default_factory=list)


class WeightDiffusion(BaseEstimator):
    """Conditional weight generator: ``fit(conditions, weights)``, ``predict(conditions)``.

    ``weights`` rows are flat two-layer head weights (length ``2 F r``);
    ``conditions`` rows are fused text embeddings.  Normalization uses
    dataset-level per-block min/max, measured in ``fit`` unless ``chunks``
    carrying statistics is passed.
    """

    def __init__(self, hidden_dim=4, steps=200, beta_start=1e-4, beta_end=0.02, block_size=16,
                 width=64, depth=4, heads=4, ffn_mult=4, final_norm=False, lambda_sym=0.1, lambda_adv=0.01,
                 learning_rate=4e-4, disc_learning_rate=1e-2, batch_size=32, epochs=30,
                 warmup_epochs=5, grad_clip=0.1, disc_hidden=(64, 64, 32), noise_draws=1,
                 random_state=0):
        self.hidden_dim = hidden_dim
        self.steps = steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.block_size = block_size
        self.width = width
        self.depth = depth
        self.heads = heads
        self.ffn_mult = ffn_mult
        self.final_norm = final_norm
        self.lambda_sym = lambda_sym
        self.lambda_adv = lambda_adv
        self.learning_rate = learning_rate
        self.disc_learning_rate = disc_learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.grad_clip = grad_clip
        self.disc_hidden = disc_hidden
        self.noise_draws = noise_draws
        self.random_state = random_state

    # -- setup -------------------------------------------------------------
    def _setup(self, d: int, embed_dim: int, chunks: ChunkSpec | None):
        if d % (2 * self.hidden_dim):
            raise ValueError(f"weight length {d} is not 2*F*r for r={self.hidden_dim}")
        self.schema_ = ParamSchema(d // (2 * self.hidden_dim), self.hidden_dim)
        self.schedule_ = make_schedule(self.steps, self.beta_start, self.beta_end)
        spec = chunks if chunks is not None else chunk_spec(d, self.block_size)
        if spec.block_size != self.block_size:
            raise ValueError("chunk spec block size differs from the estimator's")
        self.chunks_ = spec
        self.shape_ = DenoiserShape(self.block_size, spec.block_count, embed_dim, self.width,
                                    self.depth, self.heads, self.ffn_mult, self.final_norm)
        self.embed_dim_ = embed_dim

    def _init_params(self):
        rng = derive_rng(self.random_state, "denoiser-init")
        self.params_ = init_denoiser_params(self.shape_, rng)
        self.disc_params_ = init_discriminator_params(self.schema_.d, tuple(self.disc_hidden),
                                                      derive_rng(self.random_state, "disc-init"))

    @property
    def denoiser_(self) -> DenoiserModel:
        return DenoiserModel(self.shape_, self.params_)

    @property
    def discriminator_(self) -> Discriminator:
        return Discriminator(self.schema_.d, self.disc_params_)

    # -- training ----------------------------------------------------------
    def fit(self, X, y, chunks: ChunkSpec | None = None, checkpoint_path=None):
        """Train on conditions ``X`` (n x E) and flat weights ``y`` (n x d)."""
        X = check_array(X, dtype=np.float64)
        W = check_array(y, dtype=np.float64)
        if X.shape[0] != W.shape[0] or X.shape[0] == 0:
            raise ValueError("need the same, non-zero number of conditions and weight rows")
        if chunks is None or chunks.mins is None:
            base = chunks or chunk_spec(W.shape[1], self.block_size)
            padded = np.concatenate([W, np.zeros((W.shape[0], base.pad_length))], axis=1)
            blocks = padded.reshape(W.shape[0], base.block_count, base.block_size)
            chunks = base.with_stats(blocks.min(axis=(0, 2)), blocks.max(axis=(0, 2)))
        self._setup(W.shape[1], X.shape[1], chunks)
        self._init_params()
        data = to_normalized(W, self.chunks_)
        self.state_ = TrainState()
        self._train(X, data, checkpoint_path)
        return self

    def _lr(self, epoch_float: float) -> float:
        w = self.warmup_epochs
        if w and epoch_float < w:
            return self.learning_rate * (epoch_float + 1.0 / max(1, self._steps_per_epoch)) / w
        total = max(self.epochs - w, 1e-12)
        prog = min(1.0, (epoch_float - w) / total)
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * prog))

    def lr_at_epoch(self, epoch: int) -> float:
        self._steps_per_epoch = getattr(self, "_steps_per_epoch", 1)
        return self._lr(float(epoch))

    def _train(self, X, data, checkpoint_path):
        n, D = data.shape
        d = self.schema_.d
        sched = self.schedule_
        shape = self.shape_
        mask = pad_mask(self.chunks_)
        names, dnames = list(self.params_), list(self.disc_params_)
        tg = build_training_graph(shape, d, names, dnames, self.lambda_sym, self.lambda_adv)
        dg = build_disc_graph(d, dnames)
        predict = build_predict_graph(shape, names)
        opt = gradcore.Adam(self.params_, lr=self.learning_rate)
        dopt = gradcore.Adam(self.disc_params_, lr=self.disc_learning_rate)
        rng = derive_rng(self.random_state, "diffusion-train")
        self._steps_per_epoch = math.ceil(n / self.batch_size)
        pv = pad_value(self.chunks_)
        pad = self.chunks_.pad_length
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            sums = np.zeros(4)
            # generator phase, discriminator frozen
            for b in range(self._steps_per_epoch):
                idx = order[b * self.batch_size:(b + 1) * self.batch_size]
                idx = np.repeat(idx, self.noise_draws)
                B = idx.size
                steps = rng.integers(1, sched.N + 1, size=B)
                eps = rng.standard_normal((B, D)) * mask
                perms = [sample_permutation(rng, self.hidden_dim) for _ in range(B)]
                feed = bind_generator_batch(tg, self.params_, self.disc_params_, data[idx],
                                            X[idx], steps, eps, perms, self.schema_, sched, mask)
                try:
                    grads = tg.graph.gradient(feed, names)
                except gradcore.GraphError as exc:
                    raise TrainingDivergedError(f"epoch {epoch}: {exc}") from exc
                vals = [float(tg.nodes[k].value[0, 0]) for k in
                        ("loss_diff", "loss_sym", "loss_adv_gen", "loss_total")]
                if not np.all(np.isfinite(vals)) or vals[3] > 1e6:
                    raise TrainingDivergedError(f"epoch {epoch}: loss diverged ({vals[3]})")
                sums += np.array(vals) * B / self.noise_draws
                gradcore.clip_global_norm(grads, self.grad_clip)
                opt.step(self.params_, grads, self._lr(epoch + b / self._steps_per_epoch))
                self.state_.step += 1
            # discriminator phase, denoiser frozen
            disc_sum = 0.0
            order = rng.permutation(n)
            for b in range(self._steps_per_epoch):
                idx = order[b * self.batch_size:(b + 1) * self.batch_size]
                B = idx.size
                steps = rng.integers(1, sched.N + 1, size=B)
                eps = rng.standard_normal((B, D)) * mask
                theta_n = forward_sample(data[idx], steps, eps, sched)
                if pad:
                    theta_n[:, -pad:] = np.sqrt(sched.alpha_bar(steps))[:, None] * pv
                feed = dict(self.params_, theta=theta_n, cond=X[idx],
                            temb=timestep_embedding(steps, shape.width))
                e_hat = predict.evaluate(feed)
                ab = sched.alpha_bar(steps)[:, None]
                x0_hat = (theta_n - np.sqrt(1.0 - ab) * e_hat) / np.sqrt(ab)
                dfeed = {"D." + k: v for k, v in self.disc_params_.items()}
                dfeed.update(real=data[idx, :d], fake=x0_hat[:, :d])
                dgrads = dg.gradient(dfeed, ["D." + k for k in dnames])
                disc_sum += float(dg.root.value[0, 0]) * B
                dgrads = {k[2:]: v for k, v in dgrads.items()}
                dopt.step(self.disc_params_, dgrads)
            self.state_.epoch = epoch + 1
            m = sums / n
            self.state_.curves.append((self.state_.step, m[0], m[1], disc_sum / n, m[2], m[3]))
            if checkpoint_path is not None:
                self.save(checkpoint_path, rng)
        # keep in-memory parameters identical to what a checkpoint round-trip yields
        for p in (self.params_, self.disc_params_):
            for k in p:
                p[k] = p[k].astype(np.float32).astype(np.float64)
        self.train_rng_state_ = rng.bit_generator.state

    # -- generation --------------------------------------------------------
    def sample(self, conditions, random_state=0, stochastic=True) -> np.ndarray:
        check_is_fitted(self, "params_")
        rng = random_state if isinstance(random_state, np.random.Generator) else \
            derive_rng(self.random_state, "sample", int(random_state))
        return sample(conditions, self.schedule_, self.denoiser_, rng, self.chunks_, stochastic)

    def predict(self, X, random_state=0):
        X = check_array(X, dtype=np.float64)
        return self.sample(X, random_state)

    def enhance(self, weights, conditions, from_step=None, random_state=0):
        check_is_fitted(self, "params_")
        rng = random_state if isinstance(random_state, np.random.Generator) else \
            derive_rng(self.random_state, "enhance", int(random_state))
        m = self.steps if from_step is None else from_step
        return partial_denoise(weights, conditions, m, self.schedule_, self.denoiser_, rng,
                               self.chunks_)

    # -- persistence -------------------------------------------------------
    def loss_curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for row in self.state_.curves:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()

    def save(self, path, rng: np.random.Generator | None = None):
        params = self.get_params()
        params["disc_hidden"] = list(params["disc_hidden"])
        header = {
            "model": params,
            "embed_dim": self.embed_dim_,
            "feature_dim": self.schema_.feature_dim,
            "chunks": {"block_size": self.chunks_.block_size,
                       "block_count": self.chunks_.block_count,
                       "pad_length": self.chunks_.pad_length,
                       "block_min": [float(v) for v in self.chunks_.mins],
                       "block_max": [float(v) for v in self.chunks_.maxs]},
            "optimizer_state": False,
            "step": self.state_.step,
            "epoch": self.state_.epoch,
            "rng_state": (rng.bit_generator.state if rng is not None
                          else getattr(self, "train_rng_state_", None)),
            "curves": [[float(v) for v in row] for row in self.state_.curves],
        }
        tensors = dict(self.params_)
        tensors.update({"D." + k: v for k, v in self.disc_params_.items()})
        store.write_checkpoint(path, header, tensors)

    @classmethod
    def load(cls, path) -> "WeightDiffusion":
        header, tensors = store.read_checkpoint(path)
        params = dict(header["model"])
        params["disc_hidden"] = tuple(params["disc_hidden"])
        est = cls(**params)
        c = header["chunks"]
        spec = ChunkSpec(c["block_size"], c["block_count"], c["pad_length"]).with_stats(
            c["block_min"], c["block_max"])
        est._setup(2 * header["feature_dim"] * est.hidden_dim, header["embed_dim"], spec)
        est.params_ = {k: v for k, v in tensors.items() if not k.startswith("D.")}
        est.disc_params_ = {k[2:]: v for k, v in tensors.items() if k.startswith("D.")}
        est.state_ = TrainState(header["step"], header["epoch"],
                                [tuple(r) for r in header["curves"]])
        est.train_rng_state_ = header["rng_state"]
        return est
