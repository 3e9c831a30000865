"""Conditional VAE mapping 4x4x3 magnetometer readings to depth images.

The encoder sees the depth image and the reading, the decoder sees a latent
code and the reading. The reading enters both networks only as per-channel
multiplicative scales produced by two small MLP embedders, applied at two
stages of each network. The prior over the latent code is N(0, I).
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class CVAEConfig:
    image_size: int = 64
    latent_dim: int = 64
    channels: tuple = (16, 32, 64, 128)
    embed_hidden: int = 128
    groups: int = 8
    beta: float = 1.0
    logvar_min: float = -6.0
    logvar_max: float = 2.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    zaxis_only: bool = False
    prior: str = "learned"

    def __post_init__(self):
        if self.prior not in ("learned", "standard"):
            raise ValueError("prior must be 'learned' or 'standard'")
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 4:
            raise ValueError("channels must list four widths")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not self.logvar_min < self.logvar_max:
            raise ValueError("logvar_min must be below logvar_max")
        if self.image_size < 4:
            raise ValueError("image_size must be >= 4")

    @property
    def cond_embed_dim(self):
        # one scale per channel at each of the two conditioned stages
        return self.channels[1] + self.channels[3]

    def to_dict(self):
        d = asdict(self)
        d["channels"] = ",".join(str(c) for c in self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name == "channels":
                v = tuple(int(c) for c in str(v).split(",")) if isinstance(v, str) else tuple(v)
            elif f.type == "bool":
                v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            elif f.type == "int":
                v = int(v)
            elif f.type == "float":
                v = float(v)
            kw[f.name] = v
        return cls(**kw)


def desk_config(**kw):
    return CVAEConfig(**kw)


def full_config(**kw):
    kw.setdefault("image_size", 200)
    kw.setdefault("latent_dim", 512)
    kw.setdefault("channels", (64, 128, 256, 512))
    kw.setdefault("embed_hidden", 512)
    kw.setdefault("epochs", 350)
    kw.setdefault("lr", 1e-4)
    kw.setdefault("batch_size", 16)
    return CVAEConfig(**kw)


def tiny_config(**kw):
    """8x8 images, latent 4; used for finite-difference gradient checks."""
    kw.setdefault("image_size", 8)
    kw.setdefault("latent_dim", 4)
    kw.setdefault("channels", (2, 2, 2, 2))
    kw.setdefault("embed_hidden", 4)
    kw.setdefault("groups", 1)
    return CVAEConfig(**kw)


def _groups(cfg, ch):
    g = min(cfg.groups, ch)
    while ch % g:
        g -= 1
    return g


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, cfg):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = nn.GroupNorm(_groups(cfg, cout), cout)

    def forward(self, h):
        return F.gelu(self.norm(self.conv(h)))


class UpBlock(nn.Module):
    def __init__(self, cin, cout, cfg):
        super().__init__()
        self.conv = nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)
        self.norm = nn.GroupNorm(_groups(cfg, cout), cout)

    def forward(self, h):
        return F.relu(self.norm(self.conv(h)))


class ConditionEmbedder(nn.Module):
    """Two GELU-activated linear layers: 48 reading values -> per-channel scales."""

    def __init__(self, cfg):
        super().__init__()
        self.fc1 = nn.Linear(48, cfg.embed_hidden)
        self.fc2 = nn.Linear(cfg.embed_hidden, cfg.cond_embed_dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x.reshape(x.shape[0], -1))))


class PriorNet(nn.Module):
    """Reading -> diagonal Gaussian over the latent code; zero-initialised to N(0, I)."""

    def __init__(self, cfg):
        super().__init__()
        self.fc1 = nn.Linear(48, cfg.embed_hidden)
        self.fc2 = nn.Linear(cfg.embed_hidden, 2 * cfg.latent_dim)
        self.lv_range = (cfg.logvar_min, cfg.logvar_max)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        mu, lv = self.fc2(F.gelu(self.fc1(x.reshape(x.shape[0], -1)))).chunk(2, dim=1)
        return mu, lv.clamp(*self.lv_range)


def _scale(h, s):
    return h * s[:, :, None, None]


class Encoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        c0, c1, c2, c3 = cfg.channels
        self.split = c1
        self.b1 = ConvBlock(1, c0, cfg)
        self.b2 = ConvBlock(c0, c1, cfg)
        self.b3 = ConvBlock(c1, c1, cfg)
        self.b4 = ConvBlock(c1, c2, cfg)
        self.b5 = ConvBlock(c2, c3, cfg)
        self.b6 = ConvBlock(c3, c3, cfg)
        self.pool_size = min(8, max(1, cfg.image_size // 8))
        flat = c3 * self.pool_size**2
        self.fc_mu = nn.Linear(flat, cfg.latent_dim)
        self.fc_logvar = nn.Linear(flat, cfg.latent_dim)
        self.lv_range = (cfg.logvar_min, cfg.logvar_max)

    def forward(self, img, cond=None):
        h = img[:, None]
        h = self.b1(h) + h  # identity skip, single input channel broadcast
        h = self.b2(h)
        if cond is not None:
            h = _scale(h, cond[:, : self.split])
        h = self.b3(F.max_pool2d(h, 2))
        h = F.max_pool2d(self.b4(h), 2)
        h = self.b5(h)
        if cond is not None:
            h = _scale(h, cond[:, self.split :])
        h = F.adaptive_avg_pool2d(self.b6(h), self.pool_size).flatten(1)
        return self.fc_mu(h), self.fc_logvar(h).clamp(*self.lv_range)


class Decoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        c0, c1, c2, c3 = cfg.channels
        self.split = c3
        self.size = cfg.image_size
        self.start = math.ceil(cfg.image_size / 16)
        self.c3 = c3
        self.fc = nn.Linear(cfg.latent_dim, c3 * self.start**2)
        self.up1 = UpBlock(c3, c3, cfg)
        self.mid1 = nn.Sequential(ConvBlock(c3, c3, cfg), ConvBlock(c3, c3, cfg))
        self.up2 = UpBlock(c3, c2, cfg)
        self.mid2 = nn.Sequential(ConvBlock(c2, c2, cfg), ConvBlock(c2, c2, cfg))
        self.up3 = UpBlock(c2, c1, cfg)
        self.mid3 = nn.Sequential(ConvBlock(c1, c1, cfg), ConvBlock(c1, c1, cfg))
        self.up4 = UpBlock(c1, c0, cfg)
        self.mid4 = nn.Sequential(ConvBlock(c0, c0, cfg), ConvBlock(c0, c0, cfg))
        self.head = nn.Conv2d(c0, 2, 1)
        self.lv_range = (cfg.logvar_min, cfg.logvar_max)

    def forward(self, z, cond=None):
        h = self.fc(z).view(-1, self.c3, self.start, self.start)
        h = self.up1(h)
        if cond is not None:
            h = _scale(h, cond[:, : self.split])
        h = self.mid2(self.up2(self.mid1(h)))
        h = self.up3(h)
        if cond is not None:
            h = _scale(h, cond[:, self.split :])
        h = self.head(self.mid4(self.up4(self.mid3(h))))
        off = (h.shape[-1] - self.size) // 2
        h = h[:, :, off : off + self.size, off : off + self.size]
        return torch.sigmoid(h[:, 0]), h[:, 1].clamp(*self.lv_range)


class CVAE(nn.Module):
    def __init__(self, cfg: CVAEConfig):
        super().__init__()
        self.cfg = cfg
        self.enc_embed = ConditionEmbedder(cfg)
        self.dec_embed = ConditionEmbedder(cfg)
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.prior_net = PriorNet(cfg) if cfg.prior == "learned" else None
        with torch.no_grad():
            # start with unit conditioning scales and a mostly-flat output image
            for emb in (self.enc_embed, self.dec_embed):
                emb.fc2.bias.fill_(1.0)
            self.decoder.head.bias.copy_(torch.tensor([-2.0, 0.0]))

    def prepare_condition(self, x):
        """(B,4,4,3) normalised reading -> (B,48), zeroing x/y axes for the z-only variant."""
        x = x.reshape(x.shape[0], 4, 4, 3)
        if self.cfg.zaxis_only:
            x = x * x.new_tensor([0.0, 0.0, 1.0])
        return x.reshape(x.shape[0], 48)

    def embed_encoder(self, x):
        return self.enc_embed(self.prepare_condition(x))

    def embed_decoder(self, x):
        return self.dec_embed(self.prepare_condition(x))

    def encode(self, img, cond):
        if img.shape[-2:] != (self.cfg.image_size, self.cfg.image_size):
            raise ValueError(f"image shape {tuple(img.shape[-2:])} does not match image_size {self.cfg.image_size}")
        return self.encoder(img, cond)

    def decode(self, z, cond):
        if z.shape[-1] != self.cfg.latent_dim:
            raise ValueError(f"latent has {z.shape[-1]} entries, expected {self.cfg.latent_dim}")
        return self.decoder(z, cond)

    def prior(self, x):
        """Prior (mu, logvar) over z given the reading; N(0, I) for the standard prior."""
        if self.prior_net is None:
            z = x.new_zeros(x.shape[0], self.cfg.latent_dim)
            return z, z
        return self.prior_net(self.prepare_condition(x))

    def forward(self, img, x, eps):
        mu, logvar = self.encode(img, self.embed_encoder(x))
        z = reparameterize(mu, logvar, eps)
        mean, img_logvar = self.decode(z, self.embed_decoder(x))
        return mean, img_logvar, mu, logvar

    def loss(self, img, x, eps, beta=None):
        mean, img_logvar, mu, logvar = self(img, x, eps)
        prior_mu, prior_lv = self.prior(x)
        return elbo_loss(img, mean, img_logvar, mu, logvar, self.cfg.beta if beta is None else beta,
                         prior_mu, prior_lv)


def reparameterize(mu, logvar, eps):
    return mu + torch.exp(0.5 * logvar) * eps


@dataclass
class LossBreakdown:
    nll: float
    kl: float
    total: float


def gaussian_nll(img, mean, img_logvar):
    """Per-sample Gaussian negative log-likelihood summed over pixels."""
    sq = (img - mean) ** 2 * torch.exp(-img_logvar)
    return 0.5 * (sq + img_logvar + LOG_2PI).flatten(1).sum(1)


def kl_diag_gaussians(mu, logvar, prior_mu=None, prior_logvar=None):
    """Per-sample KL(N(mu, exp(logvar)) || N(prior_mu, exp(prior_logvar))); N(0, I) by default."""
    if prior_mu is None:
        return 0.5 * (mu**2 + torch.exp(logvar) - logvar - 1.0).sum(1)
    ratio = torch.exp(logvar - prior_logvar)
    return 0.5 * (prior_logvar - logvar + ratio + (mu - prior_mu) ** 2 * torch.exp(-prior_logvar) - 1.0).sum(1)


def elbo_loss(img, mean, img_logvar, mu, logvar, beta=1.0, prior_mu=None, prior_logvar=None):
    """Batch-mean negative ELBO; returns ``(total, nll, kl)`` tensors."""
    nll = gaussian_nll(img, mean, img_logvar).mean()
    kl = kl_diag_gaussians(mu, logvar, prior_mu, prior_logvar).mean()
    return nll + beta * kl, nll, kl


# -- training ----------------------------------------------------------------


def build_model(cfg: CVAEConfig, dtype=torch.float32):
    torch.manual_seed(cfg.seed)
    return CVAE(cfg).to(dtype)


def to_tensors(mags_raw, depths, dtype=torch.float32):
    from .ingest import clamp_normalize

    x = torch.as_tensor(clamp_normalize(mags_raw), dtype=dtype)
    img = torch.as_tensor(np.asarray(depths), dtype=dtype)
    return x, img


def train(model: CVAE, mags_raw, depths, cfg: CVAEConfig = None, log=None):
    """Minimise the negative ELBO with AdamW; returns per-epoch LossBreakdown means.

    Shuffle order and reparameterisation noise come from a generator seeded
    with ``cfg.seed``, so two runs with equal inputs produce equal weights.
    """
    cfg = cfg or model.cfg
    x_all, img_all = to_tensors(mags_raw, depths, dtype=next(model.parameters()).dtype)
    n = len(x_all)
    if n == 0:
        raise ValueError("training set is empty")
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay
    )
    history = []
    model.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        sums = np.zeros(3)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            eps = torch.randn(len(idx), cfg.latent_dim, generator=gen, dtype=x_all.dtype)
            total, nll, kl = model.loss(img_all[idx], x_all[idx], eps, cfg.beta)
            for name, term in (("nll", nll), ("kl", kl), ("total", total)):
                if not torch.isfinite(term):
                    raise NonFiniteLossError(f"non-finite {name} at epoch {epoch + 1}, batch {b + 1}")
            if kl.item() < 0:
                raise AssertionError(f"negative KL {kl.item()} at epoch {epoch + 1}, batch {b + 1}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            k = len(idx)
            sums += np.array([nll.item(), kl.item(), total.item()]) * k
        rec = LossBreakdown(*(sums / n))
        history.append(rec)
        if log is not None:
            log(epoch + 1, rec)
    model.eval()
    return history


@torch.no_grad()
def reconstruct(model: CVAE, mags_raw, mode="deterministic", seed=None):
    """Decoder mean images for raw readings (N,4,4,3) or a single (4,4,3) reading.

    ``deterministic`` decodes the prior mean; ``stochastic`` draws
    ``z = prior_mu + prior_sigma * e`` with ``e ~ N(0, I)`` from a generator
    seeded with ``seed``.
    """
    from .ingest import clamp_normalize

    model.eval()
    dtype = next(model.parameters()).dtype
    arr = np.asarray(mags_raw)
    single = arr.ndim == 3
    x = torch.as_tensor(clamp_normalize(arr.reshape(-1, 4, 4, 3)), dtype=dtype)
    prior_mu, prior_lv = model.prior(x)
    if mode == "deterministic":
        z = prior_mu
    elif mode == "stochastic":
        gen = torch.Generator().manual_seed(0 if seed is None else int(seed))
        e = torch.randn(len(x), model.cfg.latent_dim, generator=gen, dtype=dtype)
        z = reparameterize(prior_mu, prior_lv, e)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    mean, _ = model.decode(z, model.embed_decoder(x))
    out = mean.numpy().astype(np.float64)
    return out[0] if single else out


# -- gradient check ----------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list
    tolerance: float

    @property
    def failures(self):
        return [e for e in self.entries if e.rel_error > self.tolerance]

    @property
    def passed(self):
        return not self.failures

    @property
    def max_rel_error(self):
        return max((e.rel_error for e in self.entries), default=0.0)


def grad_check(model, loss_fn, names=None, h=1e-4, tolerance=1e-4, max_per_tensor=None, grad_hook=None):
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    ``names`` selects parameter tensors (default: all). ``grad_hook`` may
    transform the analytic gradient dict before comparison; it exists so the
    check can be shown to fail on a corrupted gradient.
    """
    params = dict(model.named_parameters())
    names = list(params) if names is None else list(names)
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    analytic = {k: params[k].grad.detach().clone() for k in names}
    if grad_hook is not None:
        analytic = grad_hook(analytic)
    entries = []
    with torch.no_grad():
        for name in names:
            p = params[name]
            flat = p.view(-1)
            count = flat.numel() if max_per_tensor is None else min(flat.numel(), max_per_tensor)
            for i in range(count):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / (2 * h)
                ana = analytic[name].view(-1)[i].item()
                rel = abs(ana - num) / max(1.0, abs(num))
                entries.append(GradCheckEntry(name, np.unravel_index(i, p.shape), ana, num, rel))
    return GradCheckReport(entries, tolerance)


def tiny_grad_check(seed=0, h=1e-4, tolerance=1e-4, names=None, grad_hook=None):
    """Gradient check of the full negative ELBO on the tiny double-precision model."""
    cfg = tiny_config(seed=seed)
    model = build_model(cfg, dtype=torch.float64)
    g = torch.Generator().manual_seed(seed + 1)
    img = torch.rand(3, cfg.image_size, cfg.image_size, generator=g, dtype=torch.float64)
    x = torch.rand(3, 4, 4, 3, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(3, cfg.latent_dim, generator=g, dtype=torch.float64)
    return grad_check(model, lambda: model.loss(img, x, eps)[0], names=names, h=h, tolerance=tolerance,
                      grad_hook=grad_hook)


# -- checkpoints -------------------------------------------------------------

CK_MAGIC = b"SMCK"
CK_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(model: CVAE, path):
    """Write ``SMCK`` checkpoint: header, key=value config, then named float32 tensors
    in ``state_dict`` order."""
    cfg_text = "\n".join(f"{k}={v}" for k, v in model.cfg.to_dict().items()).encode()
    out = bytearray(CK_MAGIC + struct.pack("<HI", CK_VERSION, len(cfg_text)) + cfg_text)
    state = model.state_dict()
    out += struct.pack("<I", len(state))
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        key = name.encode()
        out += struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, dtype=torch.float32):
    data = Path(path).read_bytes()
    if data[:4] != CK_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {data[:4]!r}")
    version, clen = struct.unpack_from("<HI", data, 4)
    if version != CK_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    off = 10
    text = data[off : off + clen].decode()
    off += clen
    cfg = CVAEConfig.from_dict(dict(line.split("=", 1) for line in text.splitlines() if line))
    model = CVAE(cfg)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    state = {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + klen].decode()
            off += klen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            state[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError) as e:
        raise CheckpointFormatError(f"{path}: truncated checkpoint") from e
    model.load_state_dict(state)
    return model.to(dtype).eval()
