"""Three-phase training: the codec first, then the structure and texture
generators independently against the frozen codec checkpoint.

Determinism contract: every stochastic choice in a step (batch indices,
masks, augmentation flips, dropout, sampling) derives from (seed, phase,
step), so a resumed run replays the exact stream an uninterrupted run would
have seen, and checkpoints round-trip bit-identically.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from . import archive
from .codec import CodecModel, ema_update, vq_losses, _to_grid
from .config import RunConfig
from .data import DEFAULT_FILL, Dataset, apply_mask, masks_for_batch
from .structure import StructureModel, nll_loss
from .texture import (
    PatchDiscriminator,
    TextureGenerator,
    composite,
    feature_loss,
    hinge_d_loss,
    hinge_g_loss,
    l1_loss,
    total_texture_loss,
)

PHASES = ("vqvae", "structure", "texture")
_PHASE_IDS = {"vqvae": 1, "structure": 2, "texture": 3}
_VAL_STREAM = 2 ** 31


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedules and parameter averaging
# ---------------------------------------------------------------------------

def structure_lr(step: int, base: float, warmup: int) -> float:
    """Linear warm-up to `base`, then square-root decay; continuous at `warmup`."""
    step = max(step, 1)
    return base * min(step / warmup, (warmup / step) ** 0.5)


@torch.no_grad()
def polyak_update(shadow: dict[str, Tensor], model: nn.Module, decay: float) -> dict[str, Tensor]:
    """shadow <- decay*shadow + (1-decay)*live, element-wise over parameters."""
    for name, param in model.named_parameters():
        shadow[name].mul_(decay).add_(param.detach(), alpha=1.0 - decay)
    return shadow


def make_shadow(model: nn.Module) -> dict[str, Tensor]:
    return {n: p.detach().clone() for n, p in model.named_parameters()}


@torch.no_grad()
def apply_shadow(model: nn.Module, shadow: dict[str, Tensor]) -> None:
    for name, param in model.named_parameters():
        param.copy_(shadow[name])


@contextlib.contextmanager
def shadow_applied(model: nn.Module, shadow: dict[str, Tensor]):
    backup = make_shadow(model)
    apply_shadow(model, shadow)
    try:
        yield
    finally:
        apply_shadow(model, backup)


# ---------------------------------------------------------------------------
# checkpoint bundles
# ---------------------------------------------------------------------------

def _module_arrays(prefix: str, module: nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_module(prefix: str, module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {}
    for key, ref in module.state_dict().items():
        value = torch.from_numpy(arrays[f"{prefix}/{key}"].copy())
        state[key] = value.to(ref.dtype).reshape(ref.shape)
    module.load_state_dict(state)


def _optimizer_arrays(prefix: str, opt: torch.optim.Optimizer, model: nn.Module) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, param in model.named_parameters():
        state = opt.state.get(param)
        if not state:
            continue
        out[f"{prefix}/{name}/step"] = np.asarray(float(state["step"]), dtype=np.float32)
        out[f"{prefix}/{name}/exp_avg"] = state["exp_avg"].detach().cpu().numpy()
        out[f"{prefix}/{name}/exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
    return out


def _load_optimizer(prefix: str, opt: torch.optim.Optimizer, model: nn.Module,
                    arrays: dict[str, np.ndarray]) -> None:
    for name, param in model.named_parameters():
        key = f"{prefix}/{name}/step"
        if key not in arrays:
            continue
        opt.state[param] = {
            "step": torch.tensor(float(arrays[key])),
            "exp_avg": torch.from_numpy(arrays[f"{prefix}/{name}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"{prefix}/{name}/exp_avg_sq"].copy()),
        }


def _shadow_arrays(shadow: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {f"shadow/{k}": v.cpu().numpy() for k, v in shadow.items()}


def _load_shadow(shadow: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    for key in shadow:
        shadow[key] = torch.from_numpy(arrays[f"shadow/{key}"].copy())


@dataclass
class CheckpointPaths:
    arrays: Path
    meta: Path


def checkpoint_paths(out_dir: Path, phase: str) -> CheckpointPaths:
    ckpt_dir = Path(out_dir) / "checkpoints"
    return CheckpointPaths(ckpt_dir / f"{phase}.nda", ckpt_dir / f"{phase}.meta.txt")


def _write_meta(path: Path, phase: str, step: int, cfg: RunConfig) -> None:
    path.write_text(
        f"phase = {phase}\nstep = {step}\nconfig_hash = {cfg.config_hash()}\nseed = {cfg.seed}\n"
    )


def read_meta(path: Path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    return meta


def _save_bundle(out_dir: Path, phase: str, step: int, cfg: RunConfig,
                 arrays: dict[str, np.ndarray]) -> Path:
    paths = checkpoint_paths(out_dir, phase)
    paths.arrays.parent.mkdir(parents=True, exist_ok=True)
    archive.save_arrays(paths.arrays, arrays)
    _write_meta(paths.meta, phase, step, cfg)
    return paths.arrays


# ---------------------------------------------------------------------------
# per-step randomness and logging
# ---------------------------------------------------------------------------

def _step_rng(seed: int, phase: str, step: int) -> np.random.Generator:
    rng = np.random.default_rng([seed, _PHASE_IDS[phase], step])
    torch.manual_seed(int(rng.integers(2 ** 62)))
    return rng


def _draw_batch(dataset: Dataset, cfg: RunConfig, rng: np.random.Generator,
                split: str = "train") -> np.ndarray:
    pool = dataset.indices(split)
    idx = pool[rng.integers(0, len(pool), size=cfg.training.batch_size)]
    flips = rng.random(cfg.training.batch_size) < 0.5 if cfg.data.horizontal_flip else None
    return dataset.batch(idx, flips)


def _to_nchw_images(batch: np.ndarray) -> Tensor:
    return torch.from_numpy(np.ascontiguousarray(batch)).permute(0, 3, 1, 2)


class CsvLog:
    """Append-only CSV; the header is written once per file."""

    def __init__(self, path: Path, columns: list[str]):
        self.path = Path(path)
        self.columns = columns
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            self.path.write_text(",".join(columns) + "\n")

    def append(self, values: dict) -> None:
        cells = []
        for col in self.columns:
            v = values[col]
            cells.append(str(v) if isinstance(v, int) else f"{v:.8e}")
        with open(self.path, "a") as fh:
            fh.write(",".join(cells) + "\n")


def _check_finite(phase: str, step: int, values: dict, out_dir: Path) -> None:
    bad = {k: float(v) for k, v in values.items() if not np.isfinite(float(v))}
    if bad:
        dump = Path(out_dir) / "diagnostics.txt"
        dump.write_text(
            f"phase {phase} diverged at step {step}\n"
            + "\n".join(f"{k} = {v}" for k, v in values.items())
            + "\n"
        )
        raise TrainingDiverged(f"{phase} loss became non-finite at step {step}: {bad}")


# ---------------------------------------------------------------------------
# model construction and frozen-codec loading
# ---------------------------------------------------------------------------

def build_codec(cfg: RunConfig) -> CodecModel:
    torch.manual_seed(cfg.seed)
    return CodecModel(cfg.codec, seed=cfg.seed)


def build_structure(cfg: RunConfig) -> StructureModel:
    torch.manual_seed(cfg.seed + 1)
    return StructureModel(cfg.structure, cfg.codec.codebook_size, cfg.codec.structural_grid_size)


def build_texture(cfg: RunConfig) -> tuple[TextureGenerator, PatchDiscriminator]:
    torch.manual_seed(cfg.seed + 2)
    return TextureGenerator(cfg.texture, cfg.codec.codebook_dim), PatchDiscriminator(cfg.texture)


def load_codec_for_inference(ckpt: Path, cfg: RunConfig) -> CodecModel:
    """Codec with polyak-averaged parameters, frozen for downstream phases."""
    arrays = archive.load_arrays(ckpt)
    model = build_codec(cfg)
    _load_module("model", model, arrays)
    shadow = make_shadow(model)
    _load_shadow(shadow, arrays)
    apply_shadow(model, shadow)
    model.requires_grad_(False)
    model.eval()
    return model


def load_structure_for_inference(ckpt: Path, cfg: RunConfig) -> StructureModel:
    arrays = archive.load_arrays(ckpt)
    model = build_structure(cfg)
    _load_module("model", model, arrays)
    shadow = make_shadow(model)
    _load_shadow(shadow, arrays)
    apply_shadow(model, shadow)
    model.requires_grad_(False)
    model.eval()
    return model


def load_texture_for_inference(ckpt: Path, cfg: RunConfig) -> TextureGenerator:
    arrays = archive.load_arrays(ckpt)
    generator, _ = build_texture(cfg)
    _load_module("gen", generator, arrays)
    generator.requires_grad_(False)
    generator.eval()
    return generator


# ---------------------------------------------------------------------------
# phase: codec
# ---------------------------------------------------------------------------

def train_vqvae(dataset: Dataset, cfg: RunConfig, out_dir: str | Path,
                resume: Path | None = None) -> Path:
    out_dir = Path(out_dir)
    tc = cfg.training
    model = build_codec(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=tc.codec_lr,
                           betas=(tc.adam_beta1, tc.adam_beta2))
    shadow = make_shadow(model)
    start = 0
    if resume is not None:
        arrays = archive.load_arrays(resume)
        _load_module("model", model, arrays)
        _load_optimizer("opt", opt, model, arrays)
        _load_shadow(shadow, arrays)
        start = int(arrays["meta/step"])
    log = CsvLog(out_dir / "logs" / "vqvae.csv",
                 ["step", "reconstruction", "structural_commit", "textural_commit", "total", "lr"])
    val_log = CsvLog(out_dir / "logs" / "vqvae_val.csv", ["step", "val_mse"])

    for step in range(start + 1, tc.vqvae_steps + 1):
        rng = _step_rng(cfg.seed, "vqvae", step)
        images = _to_nchw_images(_draw_batch(dataset, cfg, rng))
        fwd = model(images)
        losses = vq_losses(fwd.reconstruction, images, _to_grid(fwd.structural),
                           _to_grid(fwd.structural_q), _to_grid(fwd.textural),
                           _to_grid(fwd.textural_q), cfg.codec)
        values = {
            "reconstruction": float(losses.reconstruction),
            "structural_commit": float(losses.structural_commit),
            "textural_commit": float(losses.textural_commit),
            "total": float(losses.total),
        }
        _check_finite("vqvae", step, values, out_dir)
        opt.zero_grad()
        losses.total.backward()
        opt.step()
        with torch.no_grad():
            ema_update(model.structural_codes, _to_grid(fwd.structural).detach(),
                       fwd.structural_idx, cfg.codec.ema_decay)
            ema_update(model.textural_codes, _to_grid(fwd.textural).detach(),
                       fwd.textural_idx, cfg.codec.ema_decay)
            model.steps_trained += 1
        polyak_update(shadow, model, tc.polyak_decay)

        if step % tc.log_interval == 0 or step == tc.vqvae_steps:
            log.append({"step": step, **values, "lr": tc.codec_lr})
        if step % tc.eval_interval == 0 or step == tc.vqvae_steps:
            val_log.append({"step": step, "val_mse": validate_codec(model, shadow, dataset, cfg)})
        if step % tc.checkpoint_interval == 0 or step == tc.vqvae_steps:
            _checkpoint_vqvae(out_dir, cfg, model, opt, shadow, step)
    return checkpoint_paths(out_dir, "vqvae").arrays


def _checkpoint_vqvae(out_dir, cfg, model, opt, shadow, step) -> Path:
    arrays = {
        **_module_arrays("model", model),
        **_optimizer_arrays("opt", opt, model),
        **_shadow_arrays(shadow),
        "meta/step": np.asarray(float(step), dtype=np.float32),
    }
    return _save_bundle(out_dir, "vqvae", step, cfg, arrays)


@torch.no_grad()
def validate_codec(model: CodecModel, shadow: dict[str, Tensor], dataset: Dataset,
                   cfg: RunConfig, limit: int = 256) -> float:
    idx = dataset.indices("val")[:limit]
    if len(idx) == 0:
        return float("nan")
    total, count = 0.0, 0
    with shadow_applied(model, shadow):
        model.eval()
        for lo in range(0, len(idx), cfg.training.batch_size):
            images = _to_nchw_images(dataset.batch(idx[lo:lo + cfg.training.batch_size]))
            fwd = model(images)
            recon = fwd.reconstruction.clamp(0.0, 1.0)
            total += float(((recon - images) ** 2).mean()) * images.shape[0]
            count += images.shape[0]
        model.train()
    return total / count


# ---------------------------------------------------------------------------
# phase: structure generator
# ---------------------------------------------------------------------------

def _masked_inputs(images: Tensor, cfg: RunConfig, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    b, _, h, w = images.shape
    masks = masks_for_batch(cfg.data.train_masks, b, h, w, rng, cfg.data)
    masks_t = torch.from_numpy(masks).unsqueeze(1)
    incomplete = images * (1.0 - masks_t) + DEFAULT_FILL * masks_t
    return incomplete, masks_t


def train_structure(dataset: Dataset, codec_ckpt: Path, cfg: RunConfig,
                    out_dir: str | Path, resume: Path | None = None) -> Path:
    out_dir = Path(out_dir)
    tc = cfg.training
    codec = load_codec_for_inference(codec_ckpt, cfg)
    codec_before = _module_arrays("codec", codec)
    model = build_structure(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=tc.structure_base_lr,
                           betas=(tc.adam_beta1, tc.adam_beta2))
    shadow = make_shadow(model)
    start = 0
    if resume is not None:
        arrays = archive.load_arrays(resume)
        _load_module("model", model, arrays)
        _load_optimizer("opt", opt, model, arrays)
        _load_shadow(shadow, arrays)
        start = int(arrays["meta/step"])
    log = CsvLog(out_dir / "logs" / "structure.csv", ["step", "nll_nats", "nll_bits", "lr"])
    val_log = CsvLog(out_dir / "logs" / "structure_val.csv", ["step", "val_nll_nats"])

    for step in range(start + 1, tc.structure_steps + 1):
        rng = _step_rng(cfg.seed, "structure", step)
        images = _to_nchw_images(_draw_batch(dataset, cfg, rng))
        incomplete, masks_t = _masked_inputs(images, cfg, rng)
        with torch.no_grad():
            targets, _ = codec.encode_indices(images)
        lr = structure_lr(step, tc.structure_base_lr, tc.warmup_steps)
        for group in opt.param_groups:
            group["lr"] = lr
        condition = model.build_condition(incomplete, masks_t)
        loss = nll_loss(model(targets, condition), targets)
        _check_finite("structure", step, {"nll": float(loss)}, out_dir)
        opt.zero_grad()
        loss.backward()
        opt.step()
        polyak_update(shadow, model, tc.polyak_decay)

        if step % tc.log_interval == 0 or step == tc.structure_steps:
            nats = float(loss)
            log.append({"step": step, "nll_nats": nats, "nll_bits": nats / np.log(2), "lr": lr})
        if step % tc.eval_interval == 0 or step == tc.structure_steps:
            val_log.append({
                "step": step,
                "val_nll_nats": validate_structure(model, shadow, codec, dataset, cfg),
            })
        if step % tc.checkpoint_interval == 0 or step == tc.structure_steps:
            _checkpoint_simple(out_dir, "structure", cfg, model, opt, shadow, step)

    _assert_codec_untouched(codec, codec_before)
    return checkpoint_paths(out_dir, "structure").arrays


def _checkpoint_simple(out_dir, phase, cfg, model, opt, shadow, step) -> Path:
    arrays = {
        **_module_arrays("model", model),
        **_optimizer_arrays("opt", opt, model),
        **_shadow_arrays(shadow),
        "meta/step": np.asarray(float(step), dtype=np.float32),
    }
    return _save_bundle(out_dir, phase, step, cfg, arrays)


@torch.no_grad()
def validate_structure(model: StructureModel, shadow: dict[str, Tensor], codec: CodecModel,
                       dataset: Dataset, cfg: RunConfig, limit: int = 128) -> float:
    idx = dataset.indices("val")[:limit]
    if len(idx) == 0:
        return float("nan")
    rng = np.random.default_rng([cfg.seed, _PHASE_IDS["structure"], _VAL_STREAM])
    total, count = 0.0, 0
    with shadow_applied(model, shadow):
        model.eval()
        for lo in range(0, len(idx), cfg.training.batch_size):
            images = _to_nchw_images(dataset.batch(idx[lo:lo + cfg.training.batch_size]))
            incomplete, masks_t = _masked_inputs(images, cfg, rng)
            targets, _ = codec.encode_indices(images)
            condition = model.build_condition(incomplete, masks_t)
            loss = nll_loss(model(targets, condition), targets)
            total += float(loss) * images.shape[0]
            count += images.shape[0]
        model.train()
    return total / count


def _assert_codec_untouched(codec: CodecModel, before: dict[str, np.ndarray]) -> None:
    after = _module_arrays("codec", codec)
    for key, value in before.items():
        if not np.array_equal(after[key], value):
            raise RuntimeError(f"frozen codec was modified during training: {key}")


# ---------------------------------------------------------------------------
# phase: texture generator
# ---------------------------------------------------------------------------

def train_texture(dataset: Dataset, codec_ckpt: Path, cfg: RunConfig,
                  out_dir: str | Path, resume: Path | None = None) -> Path:
    out_dir = Path(out_dir)
    tc = cfg.training
    codec = load_codec_for_inference(codec_ckpt, cfg)
    codec_before = _module_arrays("codec", codec)
    generator, discriminator = build_texture(cfg)
    opt_g = torch.optim.Adam(generator.parameters(), lr=tc.texture_lr,
                             betas=(tc.texture_beta1, tc.adam_beta2))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=tc.texture_lr,
                             betas=(tc.texture_beta1, tc.adam_beta2))
    start = 0
    if resume is not None:
        arrays = archive.load_arrays(resume)
        _load_module("gen", generator, arrays)
        _load_module("disc", discriminator, arrays)
        _load_optimizer("opt_g", opt_g, generator, arrays)
        _load_optimizer("opt_d", opt_d, discriminator, arrays)
        start = int(arrays["meta/step"])
    log = CsvLog(out_dir / "logs" / "texture.csv",
                 ["step", "d_loss", "adversarial", "l1", "structural_feat", "textural_feat", "g_total", "lr"])

    for step in range(start + 1, tc.texture_steps + 1):
        rng = _step_rng(cfg.seed, "texture", step)
        images = _to_nchw_images(_draw_batch(dataset, cfg, rng))
        incomplete, masks_t = _masked_inputs(images, cfg, rng)
        with torch.no_grad():
            s_idx, t_idx = codec.encode_indices(images)
            guidance = codec.features_from_indices(s_idx, "structural")

        output = generator(incomplete, masks_t, guidance)
        composited = composite(output, images, masks_t)

        d_loss = hinge_d_loss(discriminator(images, masks_t),
                              discriminator(composited.detach(), masks_t))
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        adv = hinge_g_loss(discriminator(composited, masks_t))
        rec = l1_loss(output, images)
        s_comp, t_comp = codec.encode(composited)
        sf = feature_loss(_to_grid(s_comp), s_idx, codec.structural_codes, cfg.texture.feature_scale)
        tf = feature_loss(_to_grid(t_comp), t_idx, codec.textural_codes, cfg.texture.feature_scale)
        g_total = total_texture_loss(rec, adv, sf, tf, cfg.texture)
        values = {
            "d_loss": float(d_loss), "adversarial": float(adv), "l1": float(rec),
            "structural_feat": float(sf), "textural_feat": float(tf), "g_total": float(g_total),
        }
        _check_finite("texture", step, values, out_dir)
        opt_g.zero_grad()
        g_total.backward()
        opt_g.step()

        if step % tc.log_interval == 0 or step == tc.texture_steps:
            log.append({"step": step, **values, "lr": tc.texture_lr})
        if step % tc.checkpoint_interval == 0 or step == tc.texture_steps:
            arrays = {
                **_module_arrays("gen", generator),
                **_module_arrays("disc", discriminator),
                **_optimizer_arrays("opt_g", opt_g, generator),
                **_optimizer_arrays("opt_d", opt_d, discriminator),
                "meta/step": np.asarray(float(step), dtype=np.float32),
            }
            _save_bundle(out_dir, "texture", step, cfg, arrays)

    _assert_codec_untouched(codec, codec_before)
    return checkpoint_paths(out_dir, "texture").arrays
