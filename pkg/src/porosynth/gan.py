"""3D DCGAN for pore shapes, binarization, plausibility filtering and the pore bank.

Generator: latent (100) -> 5 transposed convolutions -> 2-channel softmax
cube (channel 0 solid, channel 1 pore). Discriminator: 4 halving
convolutions with leaky ReLU and a final valid convolution to one logit.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .errors import AcceptanceTooLow, ConfigError, Diverged, EmptyDataset, ShapeMismatch
from .metrics import metrics_for, read_metrics_csv, write_metrics_csv
from .voxel import PORE, Pore, VoxelVolume, label_mask, load_volume, save_volume

log = logging.getLogger(__name__)

# profile -> (cube side, channel divisor)
PROFILES = {"full": (64, 1), "desk": (16, 8)}
GEN_CHANNELS = (512, 256, 128, 64)
DISC_CHANNELS = (16, 32, 64, 128)


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 32
    epochs: int = 40
    lr: float = 2e-4
    latent: int = 100
    seed: int = 0
    profile: str = "desk"
    beta1: float = 0.5
    # discriminator learning rate (defaults to lr) and updates per generator update
    d_lr: float | None = None
    d_steps: int = 1
    # discriminator sees thresholded fakes; gradients pass through the softmax
    straight_through: bool = True
    # std of Gaussian noise added to every discriminator input
    instance_noise: float = 0.0
    # batch-spread feature at the discriminator head, against mode collapse
    minibatch_std: bool = True
    # discriminator weight init: "dcgan" (N(0, 0.02)) or "he" (N(0, 2/fan_in))
    d_init: str = "dcgan"
    # Gaussian sigma (voxels) applied to the pore channel of real cubes, so soft fakes can match them
    real_blur: float = 0.0

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {self.profile!r}")
        for name in ("batch", "epochs", "latent"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.lr > 0 or (self.d_lr is not None and not self.d_lr > 0):
            raise ConfigError("learning rates must be positive")
        if self.d_steps < 1:
            raise ConfigError("d_steps must be at least 1")
        if self.d_init not in ("dcgan", "he"):
            raise ConfigError(f"d_init must be 'dcgan' or 'he', got {self.d_init!r}")
        if self.real_blur < 0:
            raise ConfigError("real_blur must be non-negative")
        if self.instance_noise < 0:
            raise ConfigError("instance_noise must be non-negative")

    @property
    def side(self):
        return PROFILES[self.profile][0]


def generator_layers(profile, latent=100):
    """(c_in, c_out, kernel, stride, padding) per transposed convolution."""
    side, f = PROFILES[profile]
    ch = [c // f for c in GEN_CHANNELS] + [2]
    layers = [(latent, ch[0], side // 16, 1, 0)]
    layers += [(ch[i], ch[i + 1], 4, 2, 1) for i in range(4)]
    return layers


def discriminator_layers(profile, minibatch_std=False):
    """Same tuples; the head sees one extra channel with minibatch_std."""
    side, f = PROFILES[profile]
    ch = [2] + [c // f for c in DISC_CHANNELS]
    layers = [(ch[i], ch[i + 1], 4, 2, 1) for i in range(4)]
    layers.append((ch[4] + int(minibatch_std), 1, side // 16, 1, 0))
    return layers


def _param(rng, shape, mean=0.0, std=0.02):
    return ad.Tensor(mean + std * rng.normal(size=shape), requires_grad=True)


class Generator:
    def __init__(self, profile="desk", latent=100, seed=0):
        self.profile, self.latent = profile, latent
        self.layers = generator_layers(profile, latent)
        rng = np.random.default_rng(seed)
        self.params = {}
        self.running = []
        for i, (ci, co, k, _, _) in enumerate(self.layers):
            self.params[f"w{i}"] = _param(rng, (ci, co, k, k, k))
            if i < len(self.layers) - 1:
                self.params[f"g{i}"] = _param(rng, (co,), 1.0)
                self.params[f"b{i}"] = ad.Tensor(np.zeros(co), requires_grad=True)
                self.running.append({"mean": np.zeros(co), "var": np.ones(co)})

    @property
    def side(self):
        return PROFILES[self.profile][0]

    def __call__(self, z, training=True, momentum=0.1):
        z = z if isinstance(z, ad.Tensor) else ad.Tensor(z)
        if z.ndim != 2 or z.shape[1] != self.latent:
            raise ShapeMismatch(f"latent batch must be (B, {self.latent}), got {z.shape}")
        h = ad.reshape(z, (z.shape[0], self.latent, 1, 1, 1))
        last = len(self.layers) - 1
        for i, (_, _, _, s, p) in enumerate(self.layers):
            h = ad.conv3d_transpose(h, self.params[f"w{i}"], s, p)
            if i < last:
                h = ad.batchnorm(h, self.params[f"g{i}"], self.params[f"b{i}"], training=training,
                                 running=self.running[i], momentum=momentum)
                h = ad.relu(h)
        return ad.softmax_channel(h)

    def state(self):
        out = {k: v.data for k, v in self.params.items()}
        for i, r in enumerate(self.running):
            out[f"rm{i}"] = np.asarray(r["mean"], np.float32)
            out[f"rv{i}"] = np.asarray(r["var"], np.float32)
        return out

    def load_state(self, arrays):
        for k, v in self.params.items():
            v.data[...] = arrays[k]
        for i, r in enumerate(self.running):
            r["mean"] = np.asarray(arrays[f"rm{i}"], np.float64)
            r["var"] = np.asarray(arrays[f"rv{i}"], np.float64)


def minibatch_std(h):
    """Append the batch-averaged per-feature standard deviation as a constant channel."""
    b = h.shape[0]
    m1 = ad.mean(h, axis=0)
    m2 = ad.mean(ad.mul(h, h), axis=0)
    var = ad.clip_min(ad.sub(m2, ad.mul(m1, m1)), 0.0)
    s = ad.mean(ad.power(ad.add(var, 1e-8), 0.5))
    ones = ad.Tensor(np.ones((b, 1) + h.shape[2:], dtype=h.data.dtype))
    return ad.concat([h, ad.mul(ones, s)], axis=1)


class Discriminator:
    def __init__(self, profile="desk", seed=0, minibatch_std=False, init="dcgan"):
        self.profile = profile
        self.minibatch_std = minibatch_std
        self.layers = discriminator_layers(profile, minibatch_std)
        rng = np.random.default_rng(seed)
        self.params = {}
        for i, (ci, co, k, _, _) in enumerate(self.layers):
            std = 0.02 if init == "dcgan" else float(np.sqrt(2.0 / (ci * k ** 3)))
            self.params[f"w{i}"] = _param(rng, (co, ci, k, k, k), std=std)

    def logits(self, x):
        x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        side = PROFILES[self.profile][0]
        if x.ndim != 5 or x.shape[1:] != (2, side, side, side):
            raise ShapeMismatch(f"discriminator input must be (B, 2, {side}, {side}, {side}), got {x.shape}")
        h = x
        last = len(self.layers) - 1
        for i, (_, _, _, s, p) in enumerate(self.layers):
            if i == last and self.minibatch_std:
                h = minibatch_std(h)
            h = ad.conv3d(h, self.params[f"w{i}"], s, p)
            if i < last:
                h = ad.leaky_relu(h, 0.2)
        return ad.reshape(h, (x.shape[0],))

    def __call__(self, x):
        return ad.sigmoid(self.logits(x))


def one_hot(cubes):
    """(B, S, S, S) pore masks -> (B, 2, S, S, S) solid/pore channels."""
    m = np.asarray(cubes, dtype=np.float32)
    return np.stack([1.0 - m, m], axis=1)


def _as_cubes(dataset, side):
    cubes = []
    for c in dataset:
        a = c.data == PORE if isinstance(c, VoxelVolume) else np.asarray(c, bool)
        if a.shape != (side,) * 3:
            raise ShapeMismatch(f"training cube {a.shape} does not match profile side {side}")
        cubes.append(a)
    if not cubes:
        raise EmptyDataset("training dataset is empty")
    return np.array(cubes)


def _hard(probs, on):
    """One-hot of the 0.5 threshold in the forward pass, identity gradient."""
    if not on:
        return probs
    hard = one_hot(probs.data[:, 1] > 0.5)
    return ad.add(probs, ad.Tensor((hard - probs.data).astype(probs.data.dtype)))


def _soft_real(cubes, sigma):
    if not sigma:
        return one_hot(cubes)
    m = ndimage.gaussian_filter(np.asarray(cubes, np.float32), (0, sigma, sigma, sigma), mode="constant")
    return np.stack([1.0 - m, m], axis=1)


def _noisy(x, std, rng):
    if not std:
        return x
    return (x + std * rng.normal(size=x.shape)).astype(np.float32)


def _mean_loss(t):
    return ad.mean(t)


def _d_step(disc, gen, real_cubes, d_params, d_opt, config, rng):
    """One discriminator update on real and detached fake samples."""
    b = len(real_cubes)
    real = ad.Tensor(_noisy(_soft_real(real_cubes, config.real_blur), config.instance_noise, rng))
    fake = _hard(gen(rng.normal(size=(b, config.latent))), config.straight_through).data
    for p in d_params:
        p.zero_grad()
    d_loss = ad.add(_mean_loss(ad.softplus(ad.mul(disc.logits(real), -1.0))),
                    _mean_loss(ad.softplus(disc.logits(ad.Tensor(_noisy(fake, config.instance_noise, rng))))))
    d_loss.backward()
    ad.adam_step(d_params, d_opt)
    return d_loss


@dataclass
class TrainResult:
    generator: Generator
    discriminator: Discriminator
    d_loss: list = field(default_factory=list)
    g_loss: list = field(default_factory=list)


def train(dataset, config=TrainConfig(), on_epoch=None):
    """Alternating discriminator / non-saturating generator updates.

    ``on_epoch(epoch, result)`` is called after every epoch when given.
    """
    cubes = _as_cubes(dataset, config.side)
    rng = np.random.default_rng(config.seed)
    gen = Generator(config.profile, config.latent, seed=int(rng.integers(2**31)))
    disc = Discriminator(config.profile, seed=int(rng.integers(2**31)), minibatch_std=config.minibatch_std,
                         init=config.d_init)
    g_opt = ad.AdamState(lr=config.lr, beta1=config.beta1)
    d_opt = ad.AdamState(lr=config.d_lr or config.lr, beta1=config.beta1)
    g_params, d_params = list(gen.params.values()), list(disc.params.values())
    result = TrainResult(gen, disc)
    n = len(cubes)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        d_sum = g_sum = 0.0
        batches = 0
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            b = len(idx)
            for step in range(config.d_steps):
                # extra discriminator steps draw their own real batch
                ridx = idx if step == 0 else rng.choice(n, size=b, replace=False)
                d_loss = _d_step(disc, gen, cubes[ridx], d_params, d_opt, config, rng)
            # generator step, non-saturating form -log D(G(z))
            for p in g_params:
                p.zero_grad()
            fake = _hard(gen(rng.normal(size=(b, config.latent))), config.straight_through)
            if config.instance_noise:
                fake = ad.add(fake, ad.Tensor(_noisy(np.zeros(fake.shape, np.float32), config.instance_noise, rng)))
            g_loss = _mean_loss(ad.softplus(ad.mul(disc.logits(fake), -1.0)))
            g_loss.backward()
            ad.adam_step(g_params, g_opt)
            dl, gl = float(d_loss.data), float(g_loss.data)
            if not (math.isfinite(dl) and math.isfinite(gl)):
                raise Diverged(f"non-finite GAN loss in epoch {epoch}")
            d_sum += dl
            g_sum += gl
            batches += 1
        result.d_loss.append(d_sum / batches)
        result.g_loss.append(g_sum / batches)
        log.info("epoch %d: d_loss %.4f g_loss %.4f", epoch, result.d_loss[-1], result.g_loss[-1])
        if on_epoch is not None:
            on_epoch(epoch, result)
    recalibrate(gen, rng, batch=config.batch)
    return result


def recalibrate(gen, rng, batch=32, n_batches=16):
    """Replace batchnorm running statistics by a cumulative average over fresh batches."""
    for r in gen.running:
        r["mean"] = np.zeros_like(r["mean"])
        r["var"] = np.zeros_like(r["var"])
        r.pop("count", None)
    for _ in range(n_batches):
        gen(rng.normal(size=(batch, gen.latent)), training=True, momentum=None)


def generate(gen, z):
    """Two-channel probability cubes (B, 2, S, S, S) in inference mode."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float32))
    return gen(z, training=False).data


@dataclass(frozen=True)
class Rejected:
    reason: str

    def __bool__(self):
        return False


def binarize_pore(cube, voxel_size=1.0, min_voxels=8):
    """Largest 26-connected component of voxels with pore probability > 1/2."""
    c = np.asarray(cube)
    prob = c[1] if c.ndim == 4 else c
    mask = prob > 0.5
    if not mask.any():
        return Rejected("empty")
    labels, n = label_mask(mask, 26)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    keep = int(np.argmax(sizes))
    if sizes[keep] < min_voxels:
        return Rejected(f"largest component has {sizes[keep]} < {min_voxels} voxels")
    return Pore(np.argwhere(labels == keep), (0, 0, 0), voxel_size)


@dataclass(frozen=True)
class PlausibilityBounds:
    volume: tuple
    anisotropy: tuple
    extent: tuple
    cube_side: int


def plausibility_bounds(metrics, cube_side, q=0.001):
    """[q, 1-q] quantile envelope of ground-truth volume, anisotropy and extent."""
    if not metrics:
        raise EmptyDataset("need ground-truth metrics to set plausibility bounds")
    vol = np.array([m.volume_um3 for m in metrics])
    ani = np.array([m.anisotropy for m in metrics])
    ext = np.array([m.extent for m in metrics], dtype=np.float64)
    env = lambda a: (float(np.quantile(a, q)), float(np.quantile(a, 1 - q)))  # noqa: E731
    return PlausibilityBounds(env(vol), env(ani), env(ext), int(cube_side))


def plausibility_filter(pore, bounds, metrics=None):
    """True when the pore is inside the envelope and clear of the cube faces."""
    g = pore.global_voxels()
    if g.min() <= 0 or g.max() >= bounds.cube_side - 1:
        return False
    m = metrics or metrics_for(pore)
    checks = ((m.volume_um3, bounds.volume), (m.anisotropy, bounds.anisotropy),
              (float(max(pore.extent)), bounds.extent))
    return all(lo <= v <= hi for v, (lo, hi) in checks)


@dataclass
class PoreBank:
    pores: list
    metrics: list
    seed: int = 0
    profile: str = "desk"
    provenance: str = "generated"
    draws: int = 0

    @property
    def acceptance_rate(self):
        return len(self.pores) / self.draws if self.draws else 1.0

    def __len__(self):
        return len(self.pores)


def build_bank(gen, n, accept, seed=0, voxel_size=1.0, batch=64, provenance="generated"):
    """Draw latents until ``n`` pores pass ``accept(pore, metrics)``."""
    rng = np.random.default_rng(seed)
    pores, metrics, draws = [], [], 0
    while len(pores) < n:
        cubes = generate(gen, rng.normal(size=(batch, gen.latent)))
        for cube in cubes:
            draws += 1
            pore = binarize_pore(cube, voxel_size)
            if pore:
                m = metrics_for(pore)
                if accept(pore, m):
                    pores.append(pore)
                    metrics.append(m)
                    if len(pores) == n:
                        break
        if draws >= 10 * n and len(pores) < n and len(pores) / draws < 0.01:
            raise AcceptanceTooLow(f"accepted {len(pores)} of {draws} draws (< 1%)")
    log.info("bank: %d pores from %d draws", len(pores), draws)
    return PoreBank(pores, metrics, seed, gen.profile, provenance, draws)


def save_bank(directory, bank, side=None):
    d = Path(directory)
    (d / "pores").mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(bank.pores):
        data = np.where(p.mask(), PORE, 0).astype(np.uint8)
        save_volume(d / "pores" / f"pore_{i:06d}", VoxelVolume(data, p.voxel_size))
    write_metrics_csv(d / "metrics.csv", bank.metrics)
    manifest = {"n": len(bank), "seed": bank.seed, "profile": bank.profile, "provenance": bank.provenance,
                "draws": bank.draws, "acceptance_rate": bank.acceptance_rate}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return d


def load_bank(directory):
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    metrics = read_metrics_csv(d / "metrics.csv")
    pores = []
    for i in range(manifest["n"]):
        v = load_volume(d / "pores" / f"pore_{i:06d}")
        pores.append(Pore.from_mask(v.data == PORE, voxel_size=v.voxel_size))
    return PoreBank(pores, metrics, manifest["seed"], manifest["profile"], manifest["provenance"],
                    manifest["draws"])


def save_generator(directory, gen, extra=None):
    manifest = {"profile": gen.profile, "latent": gen.latent, **(extra or {})}
    return ad.save_checkpoint(directory, gen.state(), manifest)


def load_generator(directory):
    arrays, manifest = ad.load_checkpoint(directory)
    gen = Generator(manifest["profile"], manifest["latent"])
    gen.load_state(arrays)
    return gen
