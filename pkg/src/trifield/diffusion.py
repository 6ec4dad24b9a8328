"""Toy denoising diffusion over triplane latents.

The denoiser is a small per-plane conv encoder/decoder with a timestep
embedding, text cross-attention in the bottleneck, and optional zero-initialized
adapter blocks (one residual block plus one cross-plane attention block per
level) that can be trained with the backbone frozen. Noise prediction is
trained with the epsilon objective per plane or summed over the triplane.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, add, affine, concat, gather, matmul, mul, narrow, relu, reshape, tmean, tsum
from .attention import VOCABULARY, AttentionParams, stacked_orthogonal_attention
from .checkpoint import CheckpointError, read_named_arrays, write_named_arrays
from .training import AdamW
from .triplane import PLANE_IDS, Triplane, plane_marginal

DENOISER_MAGIC = b"DNZR"
DENOISER_VERSION = 1


@dataclass
class NoiseSchedule:
    """Linear-beta forward process; alpha_bar[0] follows the 1 - beta_1 convention."""

    timesteps: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def beta(self, t):
        self._check(t)
        return float(self.betas[t - 1])

    def alpha_bar(self, t):
        self._check(t)
        return float(self.alpha_bars[t - 1])

    def alpha_bar_prev(self, t):
        self._check(t)
        return 1.0 if t == 1 else float(self.alpha_bars[t - 2])

    def _check(self, t):
        if not 1 <= t <= self.timesteps:
            raise ValueError(f"t must be in [1, {self.timesteps}], got {t}")


def make_schedule(timesteps, beta_start=1e-4, beta_end=0.02):
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, timesteps)
    return NoiseSchedule(timesteps, betas, np.cumprod(1.0 - betas))


def q_sample(x0, t, eps, sched):
    """Forward-noised triplane sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, per plane."""
    ab = sched.alpha_bar(t)
    a, b = np.sqrt(ab), np.sqrt(1.0 - ab)
    return Triplane(tuple(Tensor(a * p.data + b * e.data) for p, e in zip(x0.planes, eps.planes)))


def noise_like(tri, rng):
    return Triplane(tuple(Tensor(rng.standard_normal(p.data.shape)) for p in tri.planes))


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------

def _conv_indices(d):
    """Clamp-to-edge 3x3 im2col indices for three stacked d x d planes."""
    out = []
    for p in range(3):
        base = p * d * d
        for v in range(d):
            for u in range(d):
                for dv in (-1, 0, 1):
                    for du in (-1, 0, 1):
                        vv = min(max(v + dv, 0), d - 1)
                        uu = min(max(u + du, 0), d - 1)
                        out.append(base + vv * d + uu)
    return np.array(out, dtype=np.int64)


def _pool_indices(d):
    half = d // 2
    out = []
    for p in range(3):
        base = p * d * d
        for v in range(half):
            for u in range(half):
                for dv in (0, 1):
                    for du in (0, 1):
                        out.append(base + (2 * v + dv) * d + (2 * u + du))
    return np.array(out, dtype=np.int64)


def _upsample_indices(d_coarse):
    d = 2 * d_coarse
    out = []
    for p in range(3):
        base = p * d_coarse * d_coarse
        for v in range(d):
            for u in range(d):
                out.append(base + (v // 2) * d_coarse + (u // 2))
    return np.array(out, dtype=np.int64)


def timestep_features(t, dim, timesteps):
    """Sinusoidal features of the normalized timestep."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    phase = freqs * (t / timesteps)
    return np.concatenate([np.sin(phase), np.cos(phase)])


@dataclass
class DenoiserConfig:
    resolution: int = 16
    channels: int = 4
    hidden: int = 16
    d_k: int = 4
    d_model: int = 16
    timesteps: int = 100  # normalizes the timestep embedding
    use_adapters: bool = True
    adapter_attention: bool = True  # cross-plane attention inside each adapter
    seed: int = 0


class Denoiser:
    """Noise predictor over stacked triplane latents."""

    def __init__(self, cfg):
        if cfg.resolution % 2:
            raise ValueError(f"resolution must be even, got {cfg.resolution}")
        if cfg.hidden % 2:
            raise ValueError(f"hidden must be even for the timestep embedding, got {cfg.hidden}")
        self.cfg = cfg
        self.params = {}
        self._idx_cache = {}
        rng = np.random.default_rng(cfg.seed)
        d, c, f = cfg.resolution, cfg.channels, cfg.hidden

        def p(name, shape, zero=False, scale=None):
            if zero:
                data = np.zeros(shape)
            else:
                scale = scale if scale is not None else np.sqrt(1.0 / shape[0])
                data = rng.normal(scale=scale, size=shape)
            self.params[name] = Tensor(data, requires_grad=True)

        p("vocab", (len(VOCABULARY), cfg.d_model))
        p("stem.w", (9 * c, f))
        p("stem.b", (f,), zero=True)
        for name in ("rb0", "rb1", "rb2"):
            p(f"{name}.c1.w", (9 * f, f))
            p(f"{name}.c1.b", (f,), zero=True)
            p(f"{name}.c2.w", (9 * f, f))
            p(f"{name}.c2.b", (f,), zero=True)
            p(f"{name}.t.w", (f, f))
            p(f"{name}.t.b", (f,), zero=True)
        p("ca.wq", (f, cfg.d_k))
        p("ca.wk", (cfg.d_model, cfg.d_k))
        p("ca.wv", (cfg.d_model, cfg.d_k))
        p("ca.wo", (cfg.d_k, f), zero=True)
        p("up.w", (9 * 2 * f, f))
        p("up.b", (f,), zero=True)
        p("head.w", (9 * f, c), zero=True)
        p("head.b", (c,), zero=True)
        if cfg.use_adapters:
            for name in ("adapter0", "adapter1"):
                p(f"{name}.c1.w", (9 * f, f))
                p(f"{name}.c1.b", (f,), zero=True)
                p(f"{name}.c2.w", (9 * f, f), zero=True)
                p(f"{name}.c2.b", (f,), zero=True)
                if cfg.adapter_attention:
                    p(f"{name}.oa.wq", (f, cfg.d_k))
                    p(f"{name}.oa.wk", (f, cfg.d_k))
                    p(f"{name}.oa.wv", (f, cfg.d_k))
                    p(f"{name}.oa.wo", (cfg.d_k, f), zero=True)

    # parameter access -------------------------------------------------
    def parameters(self):
        return list(self.params.values())

    def backbone_parameters(self):
        return [t for n, t in self.params.items() if not n.startswith("adapter")]

    def adapter_parameters(self):
        return [t for n, t in self.params.items() if n.startswith("adapter")]

    def trainable_parameters(self, freeze_backbone=False):
        return self.adapter_parameters() if freeze_backbone else self.parameters()

    # index plumbing: every spatial op is a precomputed gather over the
    # plane-stacked layout, batched by offsetting the pattern per example.
    # For every kind the per-example source stride is 3*d*d rows, with d the
    # resolution of the gather's SOURCE grid.
    def _idx(self, kind, d, b):
        key = (kind, d, b)
        if key not in self._idx_cache:
            if kind == "rows":
                idx = np.repeat(np.arange(b), 3 * d * d)
            else:
                base = {"conv": _conv_indices, "pool": _pool_indices, "up": _upsample_indices}[kind](d)
                idx = base if b == 1 else (base[None, :] + (np.arange(b) * 3 * d * d)[:, None]).ravel()
            self._idx_cache[key] = idx
        return self._idx_cache[key]

    # forward pieces ---------------------------------------------------
    def _conv_named(self, x, name, d, b):
        idx = self._idx("conv", d, b)
        n = b * 3 * d * d
        cols = reshape(gather(x, idx), (n, 9 * x.data.shape[1]))
        return affine(cols, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _resblock(self, x, name, temb, d, b):
        n = b * 3 * d * d
        f = self.cfg.hidden
        h = self._conv_named(relu(x), f"{name}.c1", d, b)
        tproj = affine(temb, self.params[f"{name}.t.w"], self.params[f"{name}.t.b"])  # (B, F)
        h = add(h, gather(tproj, self._idx("rows", d, b)))
        h = self._conv_named(relu(h), f"{name}.c2", d, b)
        return add(x, h)

    def _adapter(self, x, name, d, b):
        h = self._conv_named(relu(self._conv_named(relu(x), f"{name}.c1", d, b)), f"{name}.c2", d, b)
        x = add(x, h)
        if not self.cfg.adapter_attention:
            return x
        oa = AttentionParams(
            w_q=self.params[f"{name}.oa.wq"], w_k=self.params[f"{name}.oa.wk"],
            w_v=self.params[f"{name}.oa.wv"], w_o=self.params[f"{name}.oa.wo"],
            d_k=self.cfg.d_k,
        )
        return stacked_orthogonal_attention(x, oa, d, d // 2, batch=b)

    def _text_attention(self, x, token_matrix, d, b):
        """Cross-attention with per-example text keys via gathered key rows."""
        from .autodiff import broadcast_to

        f, dk = self.cfg.hidden, self.cfg.d_k
        bb, length = token_matrix.shape
        emb = gather(self.params["vocab"], token_matrix.ravel())  # (B*L, d_model)
        k = matmul(emb, self.params["ca.wk"])
        v = matmul(emb, self.params["ca.wv"])
        q = matmul(x, self.params["ca.wq"])
        n = b * 3 * d * d
        key_rows = (self._idx("rows", d, b)[:, None] * length + np.arange(length)[None, :]).ravel()
        kq = reshape(gather(k, key_rows), (n, length, dk))
        vq = reshape(gather(v, key_rows), (n, length, dk))
        qb = broadcast_to(reshape(q, (n, 1, dk)), (n, length, dk))
        scores = mul(tsum(mul(qb, kq), axis=2), 1.0 / np.sqrt(dk))
        w = ad.softmax(scores, axis=1)
        wb = broadcast_to(reshape(w, (n, length, 1)), (n, length, dk))
        att = tsum(mul(wb, vq), axis=1)
        return add(x, matmul(att, self.params["ca.wo"]))

    def _forward_stacked(self, x, ts, token_matrix, b):
        """Core pass on plane-stacked features (B*3*D*D, C) -> same shape."""
        cfg = self.cfg
        d, f = cfg.resolution, cfg.hidden
        half = d // 2
        temb = Tensor(np.stack([timestep_features(t, f, cfg.timesteps) for t in ts]))  # (B, F)

        h = self._conv_named(x, "stem", d, b)
        h = self._resblock(h, "rb0", temb, d, b)
        if cfg.use_adapters:
            h = self._adapter(h, "adapter0", d, b)
        skip = h

        hd = tmean(reshape(gather(h, self._idx("pool", d, b)), (b * 3 * half * half, 4, f)), axis=1)
        hd = self._resblock(hd, "rb1", temb, half, b)
        hd = self._text_attention(hd, token_matrix, half, b)
        if cfg.use_adapters:
            hd = self._adapter(hd, "adapter1", half, b)

        hu = gather(hd, self._idx("up", half, b))
        h = self._conv_named(concat([hu, skip], axis=1), "up", d, b)
        h = self._resblock(h, "rb2", temb, d, b)
        return self._conv_named(relu(h), "head", d, b)

    def forward(self, x_t, t, tokens):
        """Predict the injected noise for one noised triplane at timestep t."""
        d, c = self.cfg.resolution, self.cfg.channels
        x = concat([reshape(p, (d * d, c)) for p in x_t.planes], axis=0)
        out = self._forward_stacked(x, [t], np.asarray(tokens, dtype=np.int64)[None, :], 1)
        return Triplane(tuple(reshape(narrow(out, 0, i * d * d, d * d), (d, d, c)) for i in range(3)))


def with_adapters(denoiser, seed=0):
    """Copy of a backbone-only denoiser with fresh zero-initialized adapters."""
    cfg = DenoiserConfig(**{**denoiser.cfg.__dict__, "use_adapters": True, "seed": seed})
    out = Denoiser(cfg)
    for name, tensor in denoiser.params.items():
        out.params[name].data = tensor.data.copy()
    return out


# ---------------------------------------------------------------------------
# objectives, training, sampling
# ---------------------------------------------------------------------------

def epsilon_loss(denoiser, x0, tokens, t, eps, sched, plane=None):
    """Noise-prediction MSE; one plane when `plane` names it, else summed over all three."""
    x_t = q_sample(x0, t, eps, sched)
    out = denoiser.forward(x_t, t, tokens)
    losses = []
    for pred, target in zip(out.planes, eps.planes):
        diff = ad.sub(pred, Tensor(target.data))
        losses.append(tmean(mul(diff, diff)))
    if plane is not None:
        return losses[PLANE_IDS.index(plane)]
    return add(add(losses[0], losses[1]), losses[2])


@dataclass
class DiffusionTrainConfig:
    steps: int = 800
    batch: int = 4
    lr: float = 2e-3
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    freeze_backbone: bool = False
    seed: int = 0
    snapshot_every: int = 100


@dataclass
class DiffusionTrainResult:
    denoiser: object
    sched: NoiseSchedule
    history: list = field(default_factory=list)
    diverged: bool = False


def stack_triplanes(tris):
    """Concatenate triplanes into the (B*3*D*D, C) plane-stacked layout."""
    d = tris[0].resolution
    c = tris[0].channels
    return np.concatenate([p.data.reshape(d * d, c) for tri in tris for p in tri.planes])


def unstack_triplanes(arr, d, c, b):
    dd = d * d
    out = []
    for e in range(b):
        planes = tuple(Tensor(arr[(3 * e + i) * dd:(3 * e + i + 1) * dd].reshape(d, d, c).copy()) for i in range(3))
        out.append(Triplane(planes))
    return out


def train_denoiser(dataset, cfg, model_cfg=None, denoiser=None):
    """Train (or continue training) a denoiser on (x0, caption-token) examples.

    With freeze_backbone=True only the adapter blocks receive updates, which
    realizes the staged schedule: first train the backbone without adapters,
    then freeze it and train the attention-bearing adapters.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    sched = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    if denoiser is None:
        d = dataset[0].x0.resolution
        c = dataset[0].x0.channels
        model_cfg = model_cfg or DenoiserConfig()
        model_cfg = DenoiserConfig(**{**model_cfg.__dict__, "resolution": d, "channels": c,
                                      "timesteps": cfg.timesteps})
        denoiser = Denoiser(model_cfg)
    if cfg.freeze_backbone and not denoiser.cfg.use_adapters:
        raise ValueError("freeze_backbone requires a denoiser with adapters")
    trainable = denoiser.trainable_parameters(cfg.freeze_backbone)
    opt = AdamW(trainable, lr=cfg.lr)
    result = DiffusionTrainResult(denoiser, sched)
    snapshot = [p.data.copy() for p in trainable]
    d, c = denoiser.cfg.resolution, denoiser.cfg.channels

    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(dataset), size=cfg.batch)
        ts, xts, eps_blocks, toks = [], [], [], []
        for i in idx:
            ex = dataset[i]
            t = int(rng.integers(1, cfg.timesteps + 1))
            eps = noise_like(ex.x0, rng)
            ts.append(t)
            xts.append(q_sample(ex.x0, t, eps, sched))
            eps_blocks.append(eps)
            toks.append(ex.tokens)
        x_stack = Tensor(stack_triplanes(xts))
        eps_stack = stack_triplanes(eps_blocks)
        out = denoiser._forward_stacked(x_stack, ts, np.stack(toks), cfg.batch)
        diff = ad.sub(out, Tensor(eps_stack))
        # equals the batch mean of per-example triplane losses: planes are
        # co-sized, so sum-of-plane-means is 3x the mean over all entries
        loss = mul(tmean(mul(diff, diff)), 3.0)
        val = float(loss.data)
        if not np.isfinite(val):
            for p, s in zip(trainable, snapshot):
                p.data = s
            result.diverged = True
            break
        loss.backward()
        opt.step()
        opt.zero_grad()
        result.history.append(val)
        if step % cfg.snapshot_every == 0:
            snapshot = [p.data.copy() for p in trainable]
    return result


def ddpm_sample(denoiser, tokens, sched, rng):
    """Ancestral reverse chain from unit noise, deterministic under the rng seed."""
    d, c = denoiser.cfg.resolution, denoiser.cfg.channels
    x = [rng.standard_normal((d, d, c)) for _ in range(3)]
    for t in range(sched.timesteps, 0, -1):
        eps_hat = denoiser.forward(Triplane(tuple(Tensor(p) for p in x)), t, tokens)
        beta = sched.beta(t)
        ab = sched.alpha_bar(t)
        coef = beta / np.sqrt(1.0 - ab)
        inv_sqrt_alpha = 1.0 / np.sqrt(1.0 - beta)
        mean = [inv_sqrt_alpha * (p - coef * e.data) for p, e in zip(x, eps_hat.planes)]
        if t > 1:
            var = beta * (1.0 - sched.alpha_bar_prev(t)) / (1.0 - ab)
            x = [m + np.sqrt(var) * rng.standard_normal(m.shape) for m in mean]
        else:
            x = mean
    return Triplane(tuple(Tensor(p) for p in x))


def ddpm_sample_many(denoiser, tokens_list, sched, rng, chunk=8):
    """Run many ancestral chains, batched through the stacked forward pass."""
    d, c = denoiser.cfg.resolution, denoiser.cfg.channels
    dd = d * d
    out = []
    for lo in range(0, len(tokens_list), chunk):
        group = tokens_list[lo:lo + chunk]
        b = len(group)
        tok = np.stack(group)
        x = rng.standard_normal((b * 3 * dd, c))
        for t in range(sched.timesteps, 0, -1):
            eps_hat = denoiser._forward_stacked(Tensor(x), [t] * b, tok, b).data
            beta = sched.beta(t)
            ab = sched.alpha_bar(t)
            mean = (x - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
            if t > 1:
                var = beta * (1.0 - sched.alpha_bar_prev(t)) / (1.0 - ab)
                x = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
            else:
                x = mean
        out.extend(unstack_triplanes(x, d, c, b))
    return out


def cross_plane_consistency(tri):
    """Mean L1 disagreement of paired occupancy max-marginals over shared axes."""
    pxy, pxz, pyz = (p.data if isinstance(p, Tensor) else p for p in tri.planes)

    def prof(plane, reduce_axis):
        return plane_marginal(plane, reduce_axis, "max")[:, 0]

    pairs = [
        (prof(pxy, "v"), prof(pxz, "v")),  # x-marginals
        (prof(pxy, "u"), prof(pyz, "v")),  # y-marginals
        (prof(pxz, "u"), prof(pyz, "u")),  # z-marginals
    ]
    return float(np.mean([np.abs(a - b).mean() for a, b in pairs]))


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

def save_denoiser(path, denoiser):
    cfg = denoiser.cfg
    with open(path, "wb") as f:
        f.write(DENOISER_MAGIC)
        flags = int(cfg.use_adapters) | (int(cfg.adapter_attention) << 1)
        f.write(struct.pack("<HIIIIIII", DENOISER_VERSION, cfg.resolution, cfg.channels,
                            cfg.hidden, cfg.d_k, cfg.d_model, cfg.timesteps, flags))
        write_named_arrays(f, b"PRMS", {n: t.data for n, t in denoiser.params.items()})


def load_denoiser(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DENOISER_MAGIC:
            raise CheckpointError(f"magic: expected {DENOISER_MAGIC!r}, got {magic!r}")
        version, d, c, hidden, d_k, d_model, timesteps, flags = struct.unpack("<HIIIIIII", f.read(30))
        if version != DENOISER_VERSION:
            raise CheckpointError(f"version: expected {DENOISER_VERSION}, got {version}")
        cfg = DenoiserConfig(resolution=d, channels=c, hidden=hidden, d_k=d_k, d_model=d_model,
                             timesteps=timesteps, use_adapters=bool(flags & 1),
                             adapter_attention=bool(flags & 2))
        denoiser = Denoiser(cfg)
        arrays = read_named_arrays(f, b"PRMS")
    for name, tensor in denoiser.params.items():
        if name not in arrays:
            raise CheckpointError(f"params: missing array {name!r}")
        tensor.data = arrays[name]
    return denoiser
