"""Desk-scale latent diffusion: schedule, stand-in codec, a tiny conv denoiser with
hand-written gradients, Adam training on noise prediction, and a DDIM sampler.

Everything is float64 numpy and fully determined by its seeds.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .conditioning import (
    ConditioningBundle,
    assemble_diffusion_input,
    assemble_encoder_input,
    latent_mask,
    mask_latent,
)
from .dataset import EMBED_DIM

LATENT_CHANNELS = 8
BLOCK = 8
TAU_MIN = 0.002
SAMPLER_TAU_MAX = 0.999
N_TAU_FEATURES = 4
_CODEC_SEED = 0xC0DEC
_CKPT_MAGIC = b"SCKP"


class DiffusionError(ValueError):
    pass


# -- noise schedule -----------------------------------------------------------


def alpha(tau):
    """Signal scale cos(pi*tau/2), written as a sine so both endpoints are exact."""
    return np.sin(0.5 * np.pi * (1.0 - np.asarray(tau, dtype=np.float64)))


def sigma(tau):
    return np.sin(0.5 * np.pi * np.asarray(tau, dtype=np.float64))


def add_noise(x0, tau, eps) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DiffusionError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    tau = np.asarray(tau, dtype=np.float64)
    if np.any((tau < 0) | (tau > 1)):
        raise DiffusionError("tau must lie in [0, 1]")
    return alpha(tau) * x0 + sigma(tau) * eps


def diffusion_loss(pred, y) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if pred.shape != y.shape:
        raise DiffusionError(f"prediction {pred.shape} and target {y.shape} differ in shape")
    return float(np.mean((pred - y) ** 2))


def drop_condition(cond, embed, p: float, rng: np.random.Generator, joint: bool = False):
    """Randomly zero the rendered conditioning and/or the frame embedding.

    Two independent Bernoulli(p) draws by default; ``joint=True`` uses a single
    draw for both. Returns ``(cond, embed, (dropped_render, dropped_embed))``.
    """
    if not 0.0 <= p <= 1.0:
        raise DiffusionError(f"dropout probability {p} outside [0, 1]")
    drop_render = bool(rng.random() < p)
    drop_embed = drop_render if joint else bool(rng.random() < p)
    cond = np.zeros_like(cond) if drop_render else cond
    embed = np.zeros_like(embed) if drop_embed else embed
    return cond, embed, (drop_render, drop_embed)


# -- stand-in VAE -------------------------------------------------------------


@lru_cache(maxsize=1)
def codec_basis() -> np.ndarray:
    """Orthonormal (4*64, 8) basis: four block-mean directions plus four seeded ones."""
    n = 4 * BLOCK * BLOCK
    means = np.zeros((n, 4))
    for c in range(4):
        means[c * BLOCK * BLOCK : (c + 1) * BLOCK * BLOCK, c] = 1.0 / BLOCK
    rng = np.random.default_rng(_CODEC_SEED)
    G = rng.standard_normal((n, LATENT_CHANNELS - 4))
    G -= means @ (means.T @ G)
    Q, R = np.linalg.qr(G)
    Q *= np.sign(np.diag(R))
    basis = np.concatenate([means, Q], axis=1)
    basis.flags.writeable = False
    return basis


def _to_blocks(x):
    N, C, H, W = x.shape
    if H % BLOCK or W % BLOCK:
        raise DiffusionError(f"spatial size {H}x{W} is not divisible by {BLOCK}")
    h, w = H // BLOCK, W // BLOCK
    return x.reshape(N, C, h, BLOCK, w, BLOCK).transpose(0, 2, 4, 1, 3, 5).reshape(N, h, w, C * BLOCK * BLOCK)


def encode(x) -> np.ndarray:
    """Linear per-8x8-block encoder: (T, 3 or 4, H, W) -> (T, 8, H/8, W/8).

    Channels 0-3 of the latent are the block means of R, G, B and the asset
    mask; a 3-channel input is treated as having an all-zero mask channel.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] not in (3, 4):
        raise DiffusionError(f"encode expects T x 3|4 x H x W, got {x.shape}")
    if x.shape[1] == 3:
        x = np.concatenate([x, np.zeros_like(x[:, :1])], axis=1)
    z = _to_blocks(x) @ codec_basis() / BLOCK
    return z.transpose(0, 3, 1, 2)


def decode(z) -> np.ndarray:
    """Pseudo-inverse of :func:`encode`, RGB part only: (T, 8, h, w) -> (T, 3, 8h, 8w)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 4 or z.shape[1] != LATENT_CHANNELS:
        raise DiffusionError(f"decode expects T x {LATENT_CHANNELS} x h x w, got {z.shape}")
    N, _, h, w = z.shape
    blocks = BLOCK * (z.transpose(0, 2, 3, 1) @ codec_basis().T)
    x = blocks.reshape(N, h, w, 4, BLOCK, BLOCK).transpose(0, 3, 1, 4, 2, 5).reshape(N, 4, h * BLOCK, w * BLOCK)
    return x[:, :3]


def conditioning_latent(bundle: ConditioningBundle) -> np.ndarray:
    """Encoded (rendered RGB + asset alpha), zeroed where nothing was projected."""
    z = encode(assemble_encoder_input(bundle.I, bundle.asset_alpha))
    return mask_latent(z, latent_mask(bundle))


# -- denoiser -----------------------------------------------------------------


@dataclass
class DenoiserParams:
    """Weights of a 3-layer 3x3 conv net (two tanh hidden layers).

    The first hidden layer also receives a linear injection of sinusoidal
    diffusion-time features and of the first-frame embedding.
    """

    tensors: dict
    seed: int = 0
    widths: tuple = (16, 16)

    NAMES = ("w1", "b1", "wt", "we", "w2", "b2", "w3", "b3")

    def copy(self) -> "DenoiserParams":
        return DenoiserParams({k: v.copy() for k, v in self.tensors.items()}, self.seed, self.widths)

    def __getitem__(self, name):
        return self.tensors[name]

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in self.NAMES:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name], dtype=np.float64).tobytes())
        return h.hexdigest()

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(seed: int = 0, widths=(16, 16), in_channels: int = 2 * LATENT_CHANNELS,
                out_channels: int = LATENT_CHANNELS) -> DenoiserParams:
    rng = np.random.default_rng(seed)
    h1, h2 = widths

    def conv(cout, cin):
        return rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(1.0 / (cin * 9))

    tensors = {
        "w1": conv(h1, in_channels),
        "b1": np.zeros(h1),
        "wt": rng.standard_normal((h1, 2 * N_TAU_FEATURES)) * np.sqrt(1.0 / (2 * N_TAU_FEATURES)),
        "we": rng.standard_normal((h1, EMBED_DIM)) * np.sqrt(1.0 / EMBED_DIM),
        "w2": conv(h2, h1),
        "b2": np.zeros(h2),
        "w3": conv(out_channels, h2),
        "b3": np.zeros(out_channels),
    }
    return DenoiserParams(tensors, seed, tuple(widths))


def tau_features(tau) -> np.ndarray:
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    k = np.arange(1, N_TAU_FEATURES + 1)
    ang = np.pi * tau[:, None] * k
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _im2col(x):
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    patches = np.stack([xp[:, :, dy : dy + H, dx : dx + W] for dy in range(3) for dx in range(3)], axis=2)
    return patches.transpose(0, 3, 4, 1, 2).reshape(N * H * W, C * 9)


def _col2im(cols, shape):
    N, C, H, W = shape
    patches = cols.reshape(N, H, W, C, 9).transpose(0, 3, 4, 1, 2)
    xp = np.zeros((N, C, H + 2, W + 2))
    for k in range(9):
        dy, dx = divmod(k, 3)
        xp[:, :, dy : dy + H, dx : dx + W] += patches[:, :, k]
    return xp[:, :, 1:-1, 1:-1]


def _conv(x, w, b):
    N, _, H, W = x.shape
    cols = _im2col(x)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(N, H, W, -1).transpose(0, 3, 1, 2), cols


def _broadcast_inputs(x, tau, embed):
    N = x.shape[0]
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (N,))
    embed = np.asarray(embed, dtype=np.float64)
    if embed.ndim == 1:
        embed = np.broadcast_to(embed, (N, embed.shape[0]))
    if embed.shape != (N, EMBED_DIM):
        raise DiffusionError(f"embedding shape {embed.shape} incompatible with {N} frames")
    return tau, embed


def _forward(params: DenoiserParams, x, tau, embed):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != params["w1"].shape[1]:
        raise DiffusionError(f"denoiser expects N x {params['w1'].shape[1]} x h x w input, got {x.shape}")
    tau, embed = _broadcast_inputs(x, tau, embed)
    feats = tau_features(tau)
    a1, cols1 = _conv(x, params["w1"], params["b1"])
    a1 = a1 + (feats @ params["wt"].T + embed @ params["we"].T)[:, :, None, None]
    h1 = np.tanh(a1)
    a2, cols2 = _conv(h1, params["w2"], params["b2"])
    h2 = np.tanh(a2)
    out, cols3 = _conv(h2, params["w3"], params["b3"])
    cache = (x.shape, feats, embed, cols1, h1, cols2, h2, cols3)
    return out, cache


def denoiser_forward(params: DenoiserParams, x_in, tau, embed) -> np.ndarray:
    """Predict the injected noise from ``x_in = [conditioning | noisy latent]``.

    ``x_in`` is (N, 16, h, w); ``tau`` a scalar or (N,); ``embed`` (512,) or (N, 512).
    Output has the noisy latent's shape (N, 8, h, w).
    """
    return _forward(params, x_in, tau, embed)[0]


def _conv_backward(dout, cols, w, in_shape, need_input=True):
    N, Cout, H, W = dout.shape
    d = dout.transpose(0, 2, 3, 1).reshape(-1, Cout)
    dw = (d.T @ cols).reshape(w.shape)
    db = d.sum(axis=0)
    dx = _col2im(d @ w.reshape(Cout, -1), in_shape) if need_input else None
    return dw, db, dx


def denoiser_backward(params: DenoiserParams, x_in, tau, embed, target):
    """Loss and exact gradients of the mean squared noise-prediction error."""
    out, (xshape, feats, embed, cols1, h1, cols2, h2, cols3) = _forward(params, x_in, tau, embed)
    target = np.asarray(target, dtype=np.float64)
    if out.shape != target.shape:
        raise DiffusionError(f"target shape {target.shape} != prediction {out.shape}")
    diff = out - target
    loss = float(np.mean(diff**2))
    dout = 2.0 * diff / diff.size

    grads = {}
    grads["w3"], grads["b3"], dh2 = _conv_backward(dout, cols3, params["w3"], h2.shape)
    da2 = dh2 * (1.0 - h2**2)
    grads["w2"], grads["b2"], dh1 = _conv_backward(da2, cols2, params["w2"], h1.shape)
    da1 = dh1 * (1.0 - h1**2)
    grads["w1"], grads["b1"], _ = _conv_backward(da1, cols1, params["w1"], xshape, need_input=False)
    per_frame = da1.sum(axis=(2, 3))
    grads["wt"] = per_frame.T @ feats
    grads["we"] = per_frame.T @ embed
    return loss, grads


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 4
    iterations: int = 500
    learning_rate: float = 2e-3
    dropout: float = 0.15
    tau_min: float = TAU_MIN
    tau_max: float = 1.0
    seed: int = 0
    widths: tuple = (16, 16)
    joint_dropout: bool = False

    def __post_init__(self):
        if not 0.0 <= self.dropout <= 1.0:
            raise DiffusionError("dropout probability must lie in [0, 1]")
        if self.iterations < 1:
            raise DiffusionError("iterations must be >= 1")
        if self.batch_size < 1:
            raise DiffusionError("batch_size must be >= 1")
        if not 0.0 <= self.tau_min < self.tau_max <= 1.0:
            raise DiffusionError("need 0 <= tau_min < tau_max <= 1")


@dataclass
class TrainResult:
    params: DenoiserParams
    losses: list = field(default_factory=list)


class Adam:
    def __init__(self, params: DenoiserParams, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params: DenoiserParams, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in DenoiserParams.NAMES:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params.tensors[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass(frozen=True, eq=False)
class PreparedPair:
    cond: np.ndarray
    x0: np.ndarray
    embed: np.ndarray


def prepare_pair(pair) -> PreparedPair:
    return PreparedPair(conditioning_latent(pair.bundle), encode(pair.target), np.asarray(pair.first_frame_embed))


def train(pairs, cfg: TrainConfig, log_every: int = 0, logger=None) -> TrainResult:
    """Adam on the noise-prediction loss; depends only on (pairs, cfg)."""
    pairs = list(pairs)
    if not pairs:
        raise DiffusionError("training needs at least one pair")
    prepared = [p if isinstance(p, PreparedPair) else prepare_pair(p) for p in pairs]
    shapes = {p.x0.shape[1:] for p in prepared}
    if len(shapes) != 1:
        raise DiffusionError(f"all pairs must share latent size, got {sorted(shapes)}")

    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.seed, cfg.widths)
    opt = Adam(params, cfg.learning_rate)
    losses = []
    for it in range(cfg.iterations):
        xs, taus, embeds, targets = [], [], [], []
        for j in rng.integers(len(prepared), size=cfg.batch_size):
            p = prepared[j]
            tau = rng.uniform(cfg.tau_min, cfg.tau_max)
            eps = rng.standard_normal(p.x0.shape)
            cond, emb, _ = drop_condition(p.cond, p.embed, cfg.dropout, rng, cfg.joint_dropout)
            xs.append(assemble_diffusion_input(cond, add_noise(p.x0, tau, eps)))
            taus.append(np.full(p.x0.shape[0], tau))
            embeds.append(np.broadcast_to(emb, (p.x0.shape[0], emb.shape[0])))
            targets.append(eps)
        loss, grads = denoiser_backward(
            params, np.concatenate(xs), np.concatenate(taus), np.concatenate(embeds), np.concatenate(targets)
        )
        opt.step(params, grads)
        losses.append(loss)
        if logger is not None and log_every and (it + 1) % log_every == 0:
            logger.info("iter %d loss %.5f", it + 1, loss)
    return TrainResult(params, losses)


# -- sampling -----------------------------------------------------------------


def ddim_sample_latent(predict_eps, z_init, steps: int, tau_max: float = SAMPLER_TAU_MAX) -> np.ndarray:
    """Deterministic DDIM over a uniform grid from ``tau_max`` down to 0.

    ``predict_eps(z, tau)`` returns the noise estimate. The grid starts just
    below 1 because the signal scale vanishes at tau = 1, where recovering a
    clean estimate from a noise prediction is undefined.
    """
    if steps < 1:
        raise DiffusionError("steps must be >= 1")
    grid = np.linspace(tau_max, 0.0, steps + 1)
    z = np.asarray(z_init, dtype=np.float64)
    for t_now, t_next in zip(grid[:-1], grid[1:]):
        eps_hat = predict_eps(z, t_now)
        x0_hat = (z - sigma(t_now) * eps_hat) / alpha(t_now)
        z = alpha(t_next) * x0_hat + sigma(t_next) * eps_hat
    return z


def sample(params: DenoiserParams, bundle: ConditioningBundle, embed, steps: int, rng: np.random.Generator,
           tau_max: float = SAMPLER_TAU_MAX) -> np.ndarray:
    """Generate a (T, 3, H, W) video in [0, 1] conditioned on ``bundle``."""
    cond = conditioning_latent(bundle)
    embed = np.asarray(embed, dtype=np.float64)
    z0 = rng.standard_normal(cond.shape)

    def predict(z, tau):
        return denoiser_forward(params, assemble_diffusion_input(cond, z), tau, embed)

    z = ddim_sample_latent(predict, z0, steps, tau_max)
    return np.clip(decode(z), 0.0, 1.0)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, params: DenoiserParams, iteration: int) -> None:
    """Write magic, u32 header length, JSON header, then the float32 LE blob."""
    header = {
        "format": 1,
        "names": list(DenoiserParams.NAMES),
        "shapes": {k: list(params.tensors[k].shape) for k in DenoiserParams.NAMES},
        "seed": int(params.seed),
        "iteration": int(iteration),
        "widths": list(params.widths),
        "latent_channels": LATENT_CHANNELS,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(params.tensors[k].astype("<f4").tobytes() for k in DenoiserParams.NAMES)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC + struct.pack("<I", len(raw)) + raw + blob)


def load_checkpoint(path):
    """Returns (params, header)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _CKPT_MAGIC or len(data) < 8:
        raise DiffusionError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8 : 8 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DiffusionError(f"corrupt checkpoint header in {path}") from exc
    offset = 8 + n
    tensors = {}
    for name in header["names"]:
        shape = tuple(header["shapes"][name])
        count = int(np.prod(shape))
        chunk = data[offset : offset + 4 * count]
        if len(chunk) != 4 * count:
            raise DiffusionError(f"truncated checkpoint {path}")
        tensors[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
        offset += 4 * count
    return DenoiserParams(tensors, header["seed"], tuple(header["widths"])), header
