"""Hierarchical discrete auto-encoder.

Images are encoded into two grids of continuous features, a structural grid
at 1/8 resolution and a textural grid at 1/4 resolution, each snapped to its
own codebook of prototype vectors. Codebooks are re-estimated by exponential
moving averages of the assigned encoder outputs rather than by gradient
descent; the reconstruction path trains through the quantizer with a
straight-through gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import CodecConfig

COUNT_FLOOR = 1e-5  # floor on EMA cluster sizes before division


class Codebook(nn.Module):
    """K prototype vectors of dimension D plus their EMA accumulators."""

    def __init__(self, size: int, dim: int, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        if size < 2 or dim < 1:
            raise ValueError("codebook needs size >= 2 and dim >= 1")
        gen = torch.Generator().manual_seed(seed)
        prototypes = torch.randn(size, dim, generator=gen, dtype=dtype) / dim ** 0.5
        self.register_buffer("prototypes", prototypes)
        self.register_buffer("ema_counts", torch.ones(size, dtype=dtype))
        self.register_buffer("ema_sums", prototypes.clone())

    @property
    def size(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


def nearest_code(features: Tensor, codebook: Codebook) -> tuple[Tensor, Tensor]:
    """Assign each feature vector to its nearest prototype (Euclidean).

    `features` has shape (..., D). Returns (indices (...,), prototypes (..., D)).
    Ties break toward the lowest index.
    """
    if features.shape[-1] != codebook.dim:
        raise ValueError(
            f"feature depth {features.shape[-1]} does not match codebook dim {codebook.dim}"
        )
    flat = features.reshape(-1, codebook.dim)
    protos = codebook.prototypes
    dist = (
        flat.pow(2).sum(1, keepdim=True)
        - 2.0 * flat @ protos.t()
        + protos.pow(2).sum(1)
    )
    indices = dist.argmin(dim=1)
    quantized = protos[indices]
    shape = features.shape[:-1]
    return indices.reshape(shape), quantized.reshape(features.shape)


def straight_through(features: Tensor, quantized: Tensor) -> Tensor:
    """Quantized values forward, identity gradient backward."""
    return features + (quantized - features).detach()


def quantize_straight_through(features: Tensor, codebook: Codebook) -> Tensor:
    _, quantized = nearest_code(features, codebook)
    return straight_through(features, quantized)


@torch.no_grad()
def ema_update(codebook: Codebook, features: Tensor, assignments: Tensor, decay: float) -> Codebook:
    """Moving-average re-estimation of prototypes from assigned features.

    counts_i <- decay*counts_i + (1-decay)*n_i
    sums_i   <- decay*sums_i   + (1-decay)*sum of features assigned to i
    prototype_i <- sums_i / max(counts_i, floor)

    Exclusive-writer: callers must not update one codebook concurrently.
    """
    if not 0.0 < decay < 1.0:
        raise ValueError(f"ema decay must lie in (0, 1), got {decay}")
    flat = features.reshape(-1, codebook.dim).detach()
    idx = assignments.reshape(-1)
    counts = torch.bincount(idx, minlength=codebook.size).to(codebook.ema_counts.dtype)
    sums = torch.zeros_like(codebook.ema_sums)
    sums.index_add_(0, idx, flat.to(sums.dtype))
    codebook.ema_counts.mul_(decay).add_(counts, alpha=1.0 - decay)
    codebook.ema_sums.mul_(decay).add_(sums, alpha=1.0 - decay)
    codebook.prototypes.copy_(codebook.ema_sums / codebook.ema_counts.clamp_min(COUNT_FLOOR)[:, None])
    return codebook


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


class BottomEncoder(nn.Module):
    """Image to the shared 1/4-resolution trunk."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        h = cfg.hidden_units
        self.stem = nn.Sequential(
            nn.Conv2d(3, h // 2, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(h // 2, h, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(h, h, 3, padding=1),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(h, cfg.residual_units) for _ in range(cfg.residual_layers)])

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.blocks(self.stem(x)))


class TopEncoder(nn.Module):
    """Trunk to the 1/8-resolution structural features."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        h = cfg.hidden_units
        self.down = nn.Conv2d(h, h, 4, stride=2, padding=1)
        self.blocks = nn.Sequential(*[ResidualBlock(h, cfg.residual_units) for _ in range(cfg.residual_layers)])
        self.head = nn.Conv2d(h, cfg.codebook_dim, 1)

    def forward(self, trunk: Tensor) -> Tensor:
        return self.head(F.relu(self.blocks(self.down(trunk))))


class Decoder(nn.Module):
    """Two quantized grids back to an image.

    The structural grid is upsampled and concatenated into the textural decode
    path; upsampling is nearest-neighbor followed by convolution.
    """

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        h, d = cfg.hidden_units, cfg.codebook_dim
        self.top_in = nn.Conv2d(d, h, 3, padding=1)
        self.top_blocks = nn.Sequential(*[ResidualBlock(h, cfg.residual_units) for _ in range(cfg.residual_layers)])
        self.top_up = nn.Conv2d(h, h, 3, padding=1)
        self.merge = nn.Conv2d(h + d, h, 3, padding=1)
        self.blocks = nn.Sequential(*[ResidualBlock(h, cfg.residual_units) for _ in range(cfg.residual_layers)])
        self.up1 = nn.Conv2d(h, h // 2, 3, padding=1)
        self.up2 = nn.Conv2d(h // 2, 3, 3, padding=1)

    def forward(self, structural: Tensor, textural: Tensor) -> Tensor:
        top = self.top_blocks(self.top_in(structural))
        top = self.top_up(F.interpolate(top, scale_factor=2, mode="nearest"))
        x = F.relu(self.merge(torch.cat([top, textural], dim=1)))
        x = F.relu(self.blocks(x))
        x = F.relu(self.up1(F.interpolate(x, scale_factor=2, mode="nearest")))
        return self.up2(F.interpolate(x, scale_factor=2, mode="nearest"))


@dataclass
class CodecForward:
    reconstruction: Tensor
    structural: Tensor        # continuous encoder output, 1/8 grid
    textural: Tensor          # continuous encoder output, 1/4 grid
    structural_q: Tensor      # straight-through quantized
    textural_q: Tensor
    structural_idx: Tensor
    textural_idx: Tensor


@dataclass
class VqLosses:
    reconstruction: Tensor
    structural_commit: Tensor
    textural_commit: Tensor
    total: Tensor


def vq_losses(
    reconstruction: Tensor,
    target: Tensor,
    structural: Tensor,
    structural_q: Tensor,
    textural: Tensor,
    textural_q: Tensor,
    cfg: CodecConfig,
) -> VqLosses:
    """Reconstruction plus the two commitment terms, mean-reduced.

    Commitment gradients flow only into the continuous encoder outputs; the
    quantized grids are treated as constants.
    """
    if reconstruction.shape != target.shape:
        raise ValueError("reconstruction/target shape mismatch")
    rec = F.mse_loss(reconstruction, target)
    sc = F.mse_loss(structural, structural_q.detach())
    tc = F.mse_loss(textural, textural_q.detach())
    total = cfg.reconstruction_weight * rec + cfg.commitment_weight * (sc + tc)
    return VqLosses(rec, sc, tc, total)


class CodecModel(nn.Module):
    """Hierarchical encoder/decoder with one codebook per latent level."""

    def __init__(self, cfg: CodecConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.bottom = BottomEncoder(cfg)
        self.top = TopEncoder(cfg)
        self.textural_head = nn.Conv2d(cfg.hidden_units, cfg.codebook_dim, 1)
        self.decoder = Decoder(cfg)
        self.structural_codes = Codebook(cfg.codebook_size, cfg.codebook_dim, seed=seed)
        self.textural_codes = Codebook(cfg.codebook_size, cfg.codebook_dim, seed=seed + 1)
        self.register_buffer("steps_trained", torch.zeros((), dtype=torch.float32))

    # -- batched NCHW paths --------------------------------------------------

    def encode(self, images: Tensor) -> tuple[Tensor, Tensor]:
        if images.shape[-1] != self.cfg.image_size or images.shape[-2] != self.cfg.image_size:
            raise ValueError(
                f"expected {self.cfg.image_size}x{self.cfg.image_size} images, got {tuple(images.shape)}"
            )
        trunk = self.bottom(images)
        return self.top(trunk), self.textural_head(trunk)

    def decode(self, structural_q: Tensor, textural_q: Tensor, clamp: bool = False) -> Tensor:
        s = self.cfg.structural_grid_size
        t = self.cfg.textural_grid_size
        if structural_q.shape[-2:] != (s, s) or textural_q.shape[-2:] != (t, t):
            raise ValueError("latent grids do not match the configured sizes")
        out = self.decoder(structural_q, textural_q)
        return out.clamp(0.0, 1.0) if clamp else out

    def forward(self, images: Tensor) -> CodecForward:
        s_cont, t_cont = self.encode(images)
        s_idx, s_proto = nearest_code(_to_grid(s_cont), self.structural_codes)
        t_idx, t_proto = nearest_code(_to_grid(t_cont), self.textural_codes)
        s_q = _to_nchw(straight_through(_to_grid(s_cont), s_proto))
        t_q = _to_nchw(straight_through(_to_grid(t_cont), t_proto))
        recon = self.decode(s_q, t_q)
        return CodecForward(recon, s_cont, t_cont, s_q, t_q, s_idx, t_idx)

    def encode_indices(self, images: Tensor) -> tuple[Tensor, Tensor]:
        s_cont, t_cont = self.encode(images)
        s_idx, _ = nearest_code(_to_grid(s_cont), self.structural_codes)
        t_idx, _ = nearest_code(_to_grid(t_cont), self.textural_codes)
        return s_idx, t_idx

    def features_from_indices(self, indices: Tensor, which: str) -> Tensor:
        """Prototype grid (NCHW) for an index grid of shape (..., h, w)."""
        book = self._book(which)
        if int(indices.max()) >= book.size:
            raise ValueError("index grid refers past the end of the codebook")
        grid = book.prototypes[indices.long()]
        if grid.dim() == 3:  # (h, w, D) -> (1, D, h, w)
            grid = grid.unsqueeze(0)
        return grid.permute(0, 3, 1, 2).contiguous()

    # -- single-image, channel-last conveniences -----------------------------

    @torch.no_grad()
    def encode_hierarchy(self, image: np.ndarray | Tensor) -> tuple[Tensor, Tensor]:
        """(H, W, 3) image to channel-last structural and textural grids."""
        x = _image_to_batch(image)
        s_cont, t_cont = self.encode(x)
        return _to_grid(s_cont)[0], _to_grid(t_cont)[0]

    @torch.no_grad()
    def visualize_latents(self, indices: Tensor, which: str) -> np.ndarray:
        """Decode one latent grid with the other replaced by the zero grid."""
        if float(self.steps_trained) <= 0:
            raise RuntimeError("codec has not been trained; latent visualization is undefined")
        feats = self.features_from_indices(indices, which)
        if which == "structural":
            zeros = torch.zeros(
                feats.shape[0], self.cfg.codebook_dim,
                self.cfg.textural_grid_size, self.cfg.textural_grid_size,
            )
            img = self.decode(feats, zeros, clamp=True)
        else:
            zeros = torch.zeros(
                feats.shape[0], self.cfg.codebook_dim,
                self.cfg.structural_grid_size, self.cfg.structural_grid_size,
            )
            img = self.decode(zeros, feats, clamp=True)
        return img[0].permute(1, 2, 0).numpy()

    def _book(self, which: str) -> Codebook:
        if which == "structural":
            return self.structural_codes
        if which == "textural":
            return self.textural_codes
        raise ValueError(f"which must be structural or textural, got {which!r}")


def _to_grid(nchw: Tensor) -> Tensor:
    return nchw.permute(0, 2, 3, 1)


def _to_nchw(grid: Tensor) -> Tensor:
    return grid.permute(0, 3, 1, 2)


def _image_to_batch(image: np.ndarray | Tensor) -> Tensor:
    x = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if x.dim() != 3 or x.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {tuple(x.shape)}")
    return x.permute(2, 0, 1).unsqueeze(0)
