"""Texture synthesis stage: gated-convolution generator with structural
attention, a spectrally normalized patch discriminator, and the stage losses.

Attention scores are computed once on the structural feature grid from
truncated distance similarity, then reused to reconstruct encoder feature
maps at two higher resolutions as attention-weighted sums of their own
patches (full attention: every location participates, no foreground or
background split).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.nn.utils import spectral_norm

from .codec import Codebook
from .config import TextureGenConfig


# ---------------------------------------------------------------------------
# structural attention
# ---------------------------------------------------------------------------

def extract_patches(feature_map: Tensor, patch_size: int, stride: int) -> Tensor:
    """All patches at every grid location, raster order: (B, N, C*p*p).

    Padding is chosen so the patch count equals (H/stride) * (W/stride).
    """
    pad = (patch_size - stride) // 2
    if (patch_size - stride) % 2 != 0:
        raise ValueError("patch_size - stride must be even for aligned extraction")
    patches = F.unfold(feature_map, patch_size, padding=pad, stride=stride)
    return patches.transpose(1, 2)


def truncated_similarity(patches: Tensor, sigma_floor: float = 1e-6) -> Tensor:
    """tanh(-(d - mean) / std) over pairwise Euclidean patch distances.

    `patches` is (B, N, F) or (N, F); mean and std (population) are taken over
    all N*N distances of each instance. A degenerate std is floored, which
    degrades gracefully to uniform attention downstream.
    """
    single = patches.dim() == 2
    if single:
        patches = patches.unsqueeze(0)
    if patches.shape[1] < 2:
        raise ValueError("need at least two patches")
    dist = torch.cdist(patches, patches)
    m = dist.mean(dim=(1, 2), keepdim=True)
    sigma = dist.std(dim=(1, 2), keepdim=True, unbiased=False).clamp_min(sigma_floor)
    sim = torch.tanh(-(dist - m) / sigma)
    return sim[0] if single else sim


def attention_scores(similarity: Tensor, scale: float) -> Tensor:
    """Scaled softmax over source locations; each target column sums to 1."""
    if scale <= 0:
        raise ValueError(f"similarity scale must be positive, got {scale}")
    return torch.softmax(scale * similarity, dim=-2)


def attention_transfer(scores: Tensor, feature_map: Tensor, patch_size: int, stride: int) -> Tensor:
    """Rebuild a feature map as score-weighted sums of its own patches.

    Each output patch is the weighted sum of all source patches; overlapping
    contributions are averaged by per-pixel overlap count. Output size equals
    input size.
    """
    b, c, h, w = feature_map.shape
    if h % stride != 0 or w % stride != 0:
        raise ValueError("feature map size must be an integer multiple of the attention grid")
    n = (h // stride) * (w // stride)
    if scores.dim() == 2:
        scores = scores.unsqueeze(0).expand(b, -1, -1)
    if scores.shape[-2:] != (n, n):
        raise ValueError(f"scores are {tuple(scores.shape[-2:])} but the map yields {n} patches")
    pad = (patch_size - stride) // 2
    patches = F.unfold(feature_map, patch_size, padding=pad, stride=stride)  # (B, F, N)
    mixed = torch.einsum("bfs,bst->bft", patches, scores)
    out = F.fold(mixed, (h, w), patch_size, padding=pad, stride=stride)
    ones = torch.ones(1, 1, h, w, dtype=feature_map.dtype, device=feature_map.device)
    counts = F.fold(F.unfold(ones, patch_size, padding=pad, stride=stride),
                    (h, w), patch_size, padding=pad, stride=stride)
    return out / counts


def structural_attention(structural_q: Tensor, cfg: TextureGenConfig) -> Tensor:
    """Full attention scores from the structural feature grid (NCHW)."""
    patches = extract_patches(structural_q, cfg.attention_patch_size, 1)
    sim = truncated_similarity(patches, cfg.sigma_floor)
    return attention_scores(sim, cfg.similarity_scale)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class GatedConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, dilation: int = 1):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.conv = nn.Conv2d(in_ch, 2 * out_ch, kernel, stride=stride, padding=pad, dilation=dilation)

    def forward(self, x: Tensor) -> Tensor:
        a, b = self.conv(x).chunk(2, dim=1)
        return torch.tanh(a) * torch.sigmoid(b)


class TextureGenerator(nn.Module):
    """Encoder to 1/4 resolution, dilated body, attention-augmented decoder.

    The structural grid is nearest-upsampled and concatenated into the 1/4
    features, and its attention scores transfer the encoder maps at 1/4 and
    1/2 resolution into the decoder through skip connections.
    """

    def __init__(self, cfg: TextureGenConfig, structural_dim: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.generator_hidden
        self.enc0 = GatedConv(4, c, kernel=5)
        self.enc1 = GatedConv(c, c, stride=2)          # -> 1/2
        self.enc2 = GatedConv(c, c)
        self.enc3 = GatedConv(c, 2 * c, stride=2)      # -> 1/4
        self.enc4 = GatedConv(2 * c, 2 * c)
        self.inject = GatedConv(2 * c + structural_dim, 2 * c, kernel=1)
        self.body = nn.ModuleList([GatedConv(2 * c, 2 * c, dilation=d) for d in (2, 4, 8, 16)])
        self.dec0 = GatedConv(4 * c, 2 * c)            # body + transferred 1/4 skip
        self.dec1 = GatedConv(2 * c, c)
        self.dec2 = GatedConv(2 * c, c)                # up + transferred 1/2 skip
        self.dec3 = GatedConv(c, c // 2)
        self.out = nn.Conv2d(c // 2, 3, 3, padding=1)

    def forward(self, incomplete: Tensor, mask: Tensor, structural_q: Tensor) -> Tensor:
        if incomplete.shape[-2:] != mask.shape[-2:]:
            raise ValueError("mask is not aligned with the input image")
        if incomplete.shape[-1] // 8 != structural_q.shape[-1]:
            raise ValueError("structural grid does not match the input resolution")
        x = self.enc0(torch.cat([incomplete, mask], dim=1))
        half = self.enc2(self.enc1(x))
        quarter = self.enc4(self.enc3(half))

        s_up = F.interpolate(structural_q, scale_factor=2, mode="nearest")
        x = self.inject(torch.cat([quarter, s_up], dim=1))
        for layer in self.body:
            x = layer(x)

        scores = structural_attention(structural_q, self.cfg)
        r1, r2 = self.cfg.transfer_ratios
        skip_quarter = attention_transfer(scores, quarter, self.cfg.attention_patch_size * r1, r1)
        skip_half = attention_transfer(scores, half, self.cfg.attention_patch_size * r2, r2)

        x = self.dec0(torch.cat([x, skip_quarter], dim=1))
        x = self.dec1(F.interpolate(x, scale_factor=2, mode="nearest"))
        x = self.dec2(torch.cat([x, skip_half], dim=1))
        x = self.dec3(F.interpolate(x, scale_factor=2, mode="nearest"))
        return (torch.tanh(self.out(x)) + 1.0) / 2.0


class PatchDiscriminator(nn.Module):
    """Strided spectral-normalized critic over image+mask, per-patch scores."""

    def __init__(self, cfg: TextureGenConfig):
        super().__init__()
        c = cfg.discriminator_hidden
        widths = [c, 2 * c, 4 * c, 4 * c, 4 * c, 4 * c][: cfg.discriminator_layers]
        layers = []
        in_ch = 4
        for i, out_ch in enumerate(widths):
            layers.append(spectral_norm(nn.Conv2d(in_ch, out_ch, 5, stride=2, padding=2)))
            if i < len(widths) - 1:
                layers.append(nn.LeakyReLU(0.2))
            in_ch = out_ch
        self.net = nn.Sequential(*layers)

    def forward(self, image: Tensor, mask: Tensor) -> Tensor:
        return self.net(torch.cat([image, mask], dim=1))


# ---------------------------------------------------------------------------
# losses and compositing
# ---------------------------------------------------------------------------

def composite(output, ground_truth, mask):
    """Hole pixels from `output`, known pixels copied exactly from `ground_truth`."""
    return mask * output + (1 - mask) * ground_truth


def l1_loss(output: Tensor, target: Tensor) -> Tensor:
    """Mean absolute pixel error over the whole image."""
    if output.shape != target.shape:
        raise ValueError("l1 inputs must share a shape")
    return (output - target).abs().mean()


def hinge_d_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def hinge_g_loss(fake_scores: Tensor) -> Tensor:
    return -fake_scores.mean()


def feature_loss(features: Tensor, targets: Tensor, codebook: Codebook, scale: float) -> Tensor:
    """Codebook-class cross-entropy on encoder features of the composite.

    Per cell, similarities to all prototypes come from the truncated-distance
    transform with that cell's own mean/std over its K distances; the cell is
    then classified against the ground-truth index. The encoder acts as a
    frozen evaluator: its parameters must not receive updates from this loss.
    """
    if features.shape[-1] != codebook.dim:
        raise ValueError(
            f"feature depth {features.shape[-1]} does not match codebook dim {codebook.dim}"
        )
    if features.shape[:-1] != targets.shape:
        raise ValueError("features and target indices disagree on grid shape")
    flat = features.reshape(-1, codebook.dim)
    dist = torch.cdist(flat.unsqueeze(0), codebook.prototypes.detach().unsqueeze(0))[0]
    m = dist.mean(dim=1, keepdim=True)
    sigma = dist.std(dim=1, keepdim=True, unbiased=False).clamp_min(1e-6)
    sim = torch.tanh(-(dist - m) / sigma)
    return F.cross_entropy(scale * sim, targets.reshape(-1).long())


def total_texture_loss(l1: Tensor, adversarial: Tensor, structural_feat: Tensor,
                       textural_feat: Tensor, cfg: TextureGenConfig) -> Tensor:
    return (
        cfg.l1_weight * l1
        + cfg.adversarial_weight * adversarial
        + cfg.feature_weight * (structural_feat + textural_feat)
    )
