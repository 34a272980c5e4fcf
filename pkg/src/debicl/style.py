"""Texture transplant machinery.

A frozen random-projection encoder and a small learned decoder implement
real-time style transfer through per-channel feature statistics: standardize
the content feature map, rescale it to the style map's channel-wise mean and
standard deviation, decode back to pixels. The style image is roughed up
first (color jitter, grayscale, blur, noise) so the transplanted cue is a
distorted texture rather than a clean second image, and the result keeps the
content image's geometry while carrying a foreign surface pattern.

Everything here flags its outputs as synthetic; the exemplar memory refuses
such samples and the trainer counts them to prove replay stays natural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

_EPS_VAR = 1e-5


def _channel_stats(feats):
    # population statistics over spatial positions, per sample and channel
    var, mean = torch.var_mean(feats, dim=(2, 3), keepdim=True, unbiased=False)
    return mean, var


def adain(content_feats: torch.Tensor, style_feats: torch.Tensor) -> torch.Tensor:
    """Swap per-channel feature statistics: standardize content, rescale to style.

    Spatial sizes may differ; channel counts must match. Content channels with
    vanishing variance are divided by the floor sqrt(1e-5) instead of zero.
    """
    if content_feats.shape[1] != style_feats.shape[1]:
        raise ValueError(
            f"channel mismatch: content {content_feats.shape[1]} vs style {style_feats.shape[1]}"
        )
    c_mean, c_var = _channel_stats(content_feats)
    s_mean, s_var = _channel_stats(style_feats)
    normalized = (content_feats - c_mean) / c_var.clamp_min(_EPS_VAR).sqrt()
    return normalized * s_var.clamp_min(0.0).sqrt() + s_mean


class _Encoder(nn.Module):
    """Three stride-2 conv stages, final stage linear so feature statistics
    keep their full range. Randomly initialized once, then frozen for good.
    """

    def __init__(self, channels=(32, 64, 128)):
        super().__init__()
        self.stage1 = nn.Sequential(nn.Conv2d(3, channels[0], 3, stride=2, padding=1), nn.LeakyReLU(0.2))
        self.stage2 = nn.Sequential(
            nn.Conv2d(channels[0], channels[1], 3, stride=2, padding=1), nn.LeakyReLU(0.2)
        )
        self.stage3 = nn.Conv2d(channels[1], channels[2], 3, stride=2, padding=1)

    def forward(self, x):
        return self.stage3(self.stage2(self.stage1(x)))

    def all_stages(self, x):
        h1 = self.stage1(x)
        h2 = self.stage2(h1)
        return [h1, h2, self.stage3(h2)]


class _Decoder(nn.Module):
    def __init__(self, channels=(32, 64, 128)):
        super().__init__()
        self.net = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(channels[2], channels[1], 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(channels[1], channels[0], 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(channels[0], 3, 3, padding=1),
        )

    def forward(self, z):
        return torch.sigmoid(self.net(z))


class StyleTransferModel(nn.Module):
    def __init__(self, seed: int = 0, channels=(32, 64, 128)):
        super().__init__()
        state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.encoder = _Encoder(channels)
        self.decoder = _Decoder(channels)
        torch.random.set_rng_state(state)
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.trained_flag = False
        self.recon_bound = None
        self.train_losses: list = []
        self.seed = seed
        self.channels = tuple(channels)

    def encode(self, x):
        return self.encoder(x)

    def encode_all(self, x):
        """Feature maps of every encoder stage, shallow to deep."""
        return self.encoder.all_stages(x)

    def decode(self, z):
        return self.decoder(z)


def save_style_model(model: StyleTransferModel, path):
    torch.save(
        {
            "state_dict": model.state_dict(),
            "seed": model.seed,
            "channels": model.channels,
            "trained_flag": model.trained_flag,
            "recon_bound": model.recon_bound,
        },
        path,
    )


def load_style_model(path) -> StyleTransferModel:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = StyleTransferModel(seed=payload["seed"], channels=payload["channels"])
    model.load_state_dict(payload["state_dict"])
    model.trained_flag = payload["trained_flag"]
    model.recon_bound = payload["recon_bound"]
    return model


def stylize(content, style, model: StyleTransferModel, alpha: float = 1.0) -> torch.Tensor:
    """decoder(adain(enc(content), enc(style))), clamped to [0, 1].

    Accepts single images (C,H,W) or batches; alpha interpolates between the
    content feature map (0) and the fully restyled map (1).
    """
    if not model.trained_flag:
        raise RuntimeError("style decoder has not been trained; call train_decoder first")
    squeeze = content.ndim == 3
    c = content.unsqueeze(0) if content.ndim == 3 else content
    s = style.unsqueeze(0) if style.ndim == 3 else style
    with torch.no_grad():
        t = adain(model.encode(c), model.encode(s))
        if alpha != 1.0:
            t = alpha * t + (1.0 - alpha) * model.encode(c)
        out = model.decode(t).clamp(0.0, 1.0)
    return out.squeeze(0) if squeeze else out


def _identity_error(model, images, batch=64):
    errs = []
    with torch.no_grad():
        for lo in range(0, images.shape[0], batch):
            x = images[lo : lo + batch]
            rec = model.decode(model.encode(x))
            errs.append(((rec - x) ** 2).mean(dim=(1, 2, 3)))
    return torch.cat(errs)


def train_decoder(
    model: StyleTransferModel,
    images: torch.Tensor,
    steps: int = 400,
    batch_size: int = 16,
    lr: float = 1e-3,
    style_weight: float = 8.0,
    identity_weight: float = 0.5,
    val_frac: float = 0.1,
    gen: torch.Generator | None = None,
) -> StyleTransferModel:
    """Fit the decoder on base-task images, then freeze it for the whole run.

    Objective per step, on random (content, style) pairs: re-encoded output
    should match the transferred feature map (content term) and the style
    map's channel statistics (style term); an identity term keeps
    decode(encode(x)) close to x in pixels. Records a validation
    reconstruction bound used later as the stylize(c, c) sanity threshold.
    """
    if images.shape[0] < 2:
        raise ValueError(f"decoder training needs at least 2 images, got {images.shape[0]}")
    gen = gen or torch.Generator().manual_seed(model.seed)
    n_val = max(1, int(images.shape[0] * val_frac))
    perm = torch.randperm(images.shape[0], generator=gen)
    val, train = images[perm[:n_val]], images[perm[n_val:]]
    if train.shape[0] < 2:
        train = images[perm]

    opt = torch.optim.Adam(model.decoder.parameters(), lr=lr)
    model.train_losses = []
    for step in range(steps):
        ci = torch.randint(train.shape[0], (min(batch_size, train.shape[0]),), generator=gen)
        si = torch.randint(train.shape[0], (ci.shape[0],), generator=gen)
        c, s = train[ci], train[si]
        with torch.no_grad():
            fc = model.encode(c)
            style_feats = model.encode_all(s)
            t = adain(fc, style_feats[-1])
        out = model.decode(t)
        out_feats = model.encode_all(out)
        content_loss = F.mse_loss(out_feats[-1], t)
        style_loss = out.new_zeros(())
        for fo, fs in zip(out_feats, style_feats):
            om, ov = _channel_stats(fo)
            sm, sv = _channel_stats(fs)
            style_loss = style_loss + F.mse_loss(om, sm)
            style_loss = style_loss + F.mse_loss(ov.clamp_min(0).sqrt(), sv.clamp_min(0).sqrt())
        identity = F.mse_loss(model.decode(fc), c)
        loss = content_loss + style_weight * style_loss + identity_weight * identity
        opt.zero_grad()
        loss.backward()
        opt.step()
        model.train_losses.append(float(loss.item()))

    model.eval()
    val_errs = _identity_error(model, val)
    model.recon_bound = float(val_errs.max().item()) * 1.5
    model.trained_flag = True
    for p in model.decoder.parameters():
        p.requires_grad_(False)
    return model


# ---------------------------------------------------------------------------
# style distortions


@dataclass
class DistortionConfig:
    """Probabilistic nuisance stack for style images; defaults follow the
    plain-augmentation baseline (jitter 0.8, grayscale 0.2, blur and noise 0.5,
    noise std 0.025, blur kernel one tenth of image width).
    """

    jitter_prob: float = 0.8
    gray_prob: float = 0.2
    blur_prob: float = 0.5
    noise_prob: float = 0.5
    noise_std: float = 0.025
    blur_kernel_frac: float = 0.1
    jitter_strengths: tuple = (0.4, 0.4, 0.4)

    def __post_init__(self):
        for name in ("jitter_prob", "gray_prob", "blur_prob", "noise_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {p}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0.0 < self.blur_kernel_frac <= 1.0:
            raise ValueError("blur_kernel_frac must be in (0,1]")

    @classmethod
    def disabled(cls):
        return cls(jitter_prob=0.0, gray_prob=0.0, blur_prob=0.0, noise_prob=0.0)


_GRAY_COEFFS = torch.tensor([0.299, 0.587, 0.114])


def _gaussian_kernel1d(size: int, sigma: float) -> torch.Tensor:
    xs = torch.arange(size, dtype=torch.float32) - (size - 1) / 2.0
    k = torch.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: torch.Tensor, kernel_size: int, sigma: float) -> torch.Tensor:
    """Separable depthwise blur with reflect padding; img is (C,H,W) or (N,C,H,W)."""
    squeeze = img.ndim == 3
    x = img.unsqueeze(0) if squeeze else img
    c = x.shape[1]
    k1 = _gaussian_kernel1d(kernel_size, sigma).to(x.device)
    pad = kernel_size // 2
    kh = k1.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    kv = k1.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    x = F.pad(x, (pad, pad, 0, 0), mode="reflect")
    x = F.conv2d(x, kh, groups=c)
    x = F.pad(x, (0, 0, pad, pad), mode="reflect")
    x = F.conv2d(x, kv, groups=c)
    return x.squeeze(0) if squeeze else x


def distort_style(style: torch.Tensor, config: DistortionConfig, rng: torch.Generator) -> torch.Tensor:
    """Jitter, grayscale, blur, noise, in that order, each by coin flip.

    Operates on a copy; the input tensor is never written. Deterministic for
    a fixed generator state.
    """
    img = style.clone()
    size = img.shape[-1]

    if torch.rand(1, generator=rng).item() < config.jitter_prob:
        lo = torch.tensor([max(0.0, 1.0 - s) for s in config.jitter_strengths])
        hi = torch.tensor([1.0 + s for s in config.jitter_strengths])
        gains = lo + (hi - lo) * torch.rand(3, generator=rng)
        img = (img * gains.view(3, 1, 1)).clamp(0.0, 1.0)

    if torch.rand(1, generator=rng).item() < config.gray_prob:
        luma = (img * _GRAY_COEFFS.view(3, 1, 1)).sum(dim=0, keepdim=True)
        img = luma.expand_as(img).contiguous()

    if torch.rand(1, generator=rng).item() < config.blur_prob:
        k = max(3, int(round(config.blur_kernel_frac * size)))
        if k % 2 == 0:
            k += 1
        sigma = 0.3 * ((k - 1) * 0.5 - 1) + 0.8
        img = gaussian_blur(img, k, sigma).clamp(0.0, 1.0)

    if torch.rand(1, generator=rng).item() < config.noise_prob:
        noise = torch.randn(img.shape, generator=rng) * config.noise_std
        img = (img + noise).clamp(0.0, 1.0)

    return img


# ---------------------------------------------------------------------------
# conflict batches


@dataclass
class ConflictBatch:
    images: torch.Tensor
    provenance: torch.Tensor  # bool, True = synthesized here
    source_pairs: list = field(default_factory=list)  # (content idx, style idx)
    style_labels: torch.Tensor | None = None

    def __post_init__(self):
        if self.images.shape[0] != self.provenance.shape[0]:
            raise ValueError("provenance length must match batch size")
        if len(self.source_pairs) != self.images.shape[0]:
            raise ValueError("source_pairs length must match batch size")


def generate_conflict_batch(
    X: torch.Tensor,
    X_hat: torch.Tensor,
    model: StyleTransferModel,
    config: DistortionConfig,
    rng: torch.Generator,
    style_labels: torch.Tensor | None = None,
    alpha: float = 1.0,
) -> ConflictBatch:
    """Pair each content image with its same-index style image, distort the
    style side only, and transplant its texture onto the content's geometry.
    """
    if X.shape[0] != X_hat.shape[0]:
        raise ValueError(f"content batch {X.shape[0]} != style batch {X_hat.shape[0]}")
    if not model.trained_flag:
        raise RuntimeError("style decoder has not been trained; call train_decoder first")
    distorted = torch.stack([distort_style(X_hat[i], config, rng) for i in range(X_hat.shape[0])])
    images = stylize(X, distorted, model, alpha=alpha)
    return ConflictBatch(
        images=images,
        provenance=torch.ones(X.shape[0], dtype=torch.bool),
        source_pairs=[(i, i) for i in range(X.shape[0])],
        style_labels=style_labels.clone() if style_labels is not None else None,
    )
