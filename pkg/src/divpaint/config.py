"""Run configuration: plain-text (INI) sections per module, CLI overrides.

Every tunable constant lives here with its desk-scale default; the paper-scale
preset swaps in the full-size values. Unknown sections or keys are rejected,
and the resolved configuration is echoed into each run directory so a run can
be reproduced from its artifacts alone.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field, fields
from pathlib import Path


@dataclass
class CodecConfig:
    image_size: int = 64
    hidden_units: int = 128
    residual_units: int = 64
    residual_layers: int = 2
    codebook_size: int = 128
    codebook_dim: int = 64
    commitment_weight: float = 0.25
    reconstruction_weight: float = 1.0
    ema_decay: float = 0.99

    @property
    def structural_grid_size(self) -> int:
        return self.image_size // 8

    @property
    def textural_grid_size(self) -> int:
        return self.image_size // 4

    def validate(self) -> None:
        if self.image_size % 8 != 0:
            raise ValueError("codec.image_size must be divisible by 8")
        if self.codebook_size < 2 or self.codebook_dim < 1:
            raise ValueError("codebook needs codebook_size >= 2 and codebook_dim >= 1")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("codec.ema_decay must lie in (0, 1)")


@dataclass
class StructureGenConfig:
    layers: int = 20
    attention_layers: int = 4
    attention_heads: int = 8
    hidden_units: int = 128
    residual_units: int = 128
    conditioning_hidden: int = 32
    conditioning_residual: int = 32
    dropout: float = 0.1
    output_stack_layers: int = 20
    kernel_size: int = 3

    def validate(self) -> None:
        if self.attention_layers > self.layers:
            raise ValueError("structure.attention_layers must not exceed structure.layers")
        if self.hidden_units % self.attention_heads != 0:
            raise ValueError("structure.attention_heads must divide structure.hidden_units")


@dataclass
class TextureGenConfig:
    generator_hidden: int = 64
    discriminator_hidden: int = 64
    discriminator_layers: int = 6
    similarity_scale: float = 50.0     # scale on truncated similarity in attention softmax
    feature_scale: float = 10.0        # scale in the codebook feature losses
    l1_weight: float = 1.0
    adversarial_weight: float = 1.0
    feature_weight: float = 0.1
    attention_patch_size: int = 3
    transfer_ratios: tuple[int, ...] = (2, 4)  # transfer levels relative to the attention grid
    sigma_floor: float = 1e-6

    def validate(self) -> None:
        for w in (self.l1_weight, self.adversarial_weight, self.feature_weight):
            if w < 0:
                raise ValueError("texture loss weights must be non-negative")


@dataclass
class TrainConfig:
    batch_size: int = 8
    vqvae_steps: int = 20000
    structure_steps: int = 50000
    texture_steps: int = 50000
    codec_lr: float = 1e-4
    texture_lr: float = 1e-4
    structure_base_lr: float = 3e-4
    warmup_steps: int = 5000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    texture_beta1: float = 0.5
    polyak_decay: float = 0.9997
    checkpoint_interval: int = 2000
    eval_interval: int = 1000
    log_interval: int = 100

    def validate(self) -> None:
        if not 0.0 < self.polyak_decay < 1.0:
            raise ValueError("training.polyak_decay must lie in (0, 1)")
        for name in ("vqvae_steps", "structure_steps", "texture_steps", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"training.{name} must be positive")

    def steps_for(self, phase: str) -> int:
        return {
            "vqvae": self.vqvae_steps,
            "structure": self.structure_steps,
            "texture": self.texture_steps,
        }[phase]


@dataclass
class DataConfig:
    source: str = "synthetic_shapes"   # synthetic_shapes | image_folder
    root: str = "data/shapes64"
    num_images: int = 10000
    train_fraction: float = 0.90
    val_fraction: float = 0.05
    horizontal_flip: bool = True
    crop_policy: str = "resize"        # resize | random_crop
    train_masks: str = "mixed"         # center | random | mixed
    rect_count_min: int = 1
    rect_count_max: int = 3
    rect_frac_min: float = 0.25
    rect_frac_max: float = 0.50
    stroke_count_min: int = 1
    stroke_count_max: int = 4
    stroke_vertices_min: int = 4
    stroke_vertices_max: int = 12
    stroke_width_min: float = 0.05
    stroke_width_max: float = 0.15
    hole_fraction_min: float = 0.10
    hole_fraction_max: float = 0.60

    def validate(self) -> None:
        if self.source not in ("synthetic_shapes", "image_folder"):
            raise ValueError(f"data.source must be synthetic_shapes or image_folder, got {self.source}")
        if self.train_masks not in ("center", "random", "mixed"):
            raise ValueError(f"data.train_masks must be center, random, or mixed, got {self.train_masks}")
        if not 0.0 < self.train_fraction + self.val_fraction < 1.0:
            raise ValueError("data split fractions must leave room for a test split")


@dataclass
class RunConfig:
    seed: int = 0
    codec: CodecConfig = field(default_factory=CodecConfig)
    structure: StructureGenConfig = field(default_factory=StructureGenConfig)
    texture: TextureGenConfig = field(default_factory=TextureGenConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    _SECTIONS = ("codec", "structure", "texture", "training", "data")

    def validate(self) -> "RunConfig":
        for name in self._SECTIONS:
            getattr(self, name).validate()
        return self

    # -- text round trip ----------------------------------------------------

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write("[run]\n")
        buf.write(f"seed = {self.seed}\n\n")
        for name in self._SECTIONS:
            section = getattr(self, name)
            buf.write(f"[{name}]\n")
            for f in fields(section):
                buf.write(f"{f.name} = {_format_value(getattr(section, f.name))}\n")
            buf.write("\n")
        return buf.getvalue()

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        cfg = cls()
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.apply_override(section, key, raw)
        return cfg.validate()

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def apply_override(self, section: str, key: str, raw: str) -> None:
        """Set one `section.key = raw` pair, coercing to the field's type."""
        if section == "run":
            if key != "seed":
                raise ValueError(f"unknown config key: run.{key}")
            self.seed = int(raw)
            return
        if section not in self._SECTIONS:
            raise ValueError(f"unknown config section: [{section}]")
        target = getattr(self, section)
        for f in fields(target):
            if f.name == key:
                setattr(target, f.name, _parse_value(raw, getattr(target, f.name)))
                return
        raise ValueError(f"unknown config key: {section}.{key}")

    def apply_set_option(self, option: str) -> None:
        """Parse a CLI `--set section.key=value` override."""
        if "=" not in option:
            raise ValueError(f"--set expects section.key=value, got {option!r}")
        dotted, raw = option.split("=", 1)
        if "." not in dotted:
            raise ValueError(f"--set expects section.key=value, got {option!r}")
        section, key = dotted.strip().split(".", 1)
        self.apply_override(section.strip(), key.strip(), raw.strip())


def paper_preset() -> RunConfig:
    """Full-scale preset: 256px images, 512-entry codebooks, 1M-step phases."""
    cfg = RunConfig()
    cfg.codec.image_size = 256
    cfg.codec.codebook_size = 512
    cfg.training.vqvae_steps = 1_000_000
    cfg.training.structure_steps = 1_000_000
    cfg.training.texture_steps = 1_000_000
    cfg.training.warmup_steps = 10_000
    cfg.data.num_images = 0
    cfg.data.source = "image_folder"
    cfg.data.root = "data/images256"
    return cfg


def desk_preset() -> RunConfig:
    return RunConfig()


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, current):
    if isinstance(current, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    return raw.strip()
