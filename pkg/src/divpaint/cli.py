"""Command-line entry point: dataset synthesis, the three training phases,
diverse sampling, and evaluation.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure. Every
command echoes its resolved configuration into the run directory so results
are reproducible from the artifacts alone.
"""

from __future__ import annotations

import argparse
import sys
from datetime import datetime
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import archive, data, metrics, training
from .codec import CodecModel
from .config import PRESETS, RunConfig
from .data import apply_mask, build_dataset, load_mask_png, make_center_mask, make_random_mask
from .structure import entropy_map, sample_structure
from .texture import TextureGenerator, composite


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="divpaint", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file (sections per module)")
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="run directory (default: runs/<command>-<timestamp>)")

    p = sub.add_parser("synth", help="generate the synthetic shapes corpus")
    common(p)

    p = sub.add_parser("train", help="run one training phase")
    p.add_argument("phase", choices=training.PHASES)
    common(p)
    p.add_argument("--checkpoints", help="directory holding prerequisite checkpoints (default: --out)")
    p.add_argument("--resume", help="checkpoint archive to resume this phase from")

    p = sub.add_parser("sample", help="sample diverse completions for one image")
    common(p)
    p.add_argument("--checkpoints", required=True, help="directory with vqvae/structure/texture checkpoints")
    p.add_argument("--image", help="input PNG (defaults to the first test image of the dataset)")
    p.add_argument("--mask", default="center", help="center | random:<seed> | file:<path>")
    p.add_argument("-k", type=int, default=5, help="number of solutions")
    p.add_argument("--temperature", type=float, default=1.0, help="sampling temperature (0 = greedy)")
    p.add_argument("--entropy", action="store_true", help="also export the predictive entropy map")

    p = sub.add_parser("eval", help="evaluate on the test split")
    common(p)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--mask", default="center", help="center | random:<seed> | file:<path>")
    p.add_argument("-k", type=int, default=16, help="samples per incomplete image")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--limit", type=int, default=16, help="number of test images")
    p.add_argument("--contact-sheet", action="store_true", help="write input|samples|truth grids")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else PRESETS[args.preset]()
    for option in args.overrides:
        cfg.apply_set_option(option)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def make_run_dir(args) -> Path:
    if args.out:
        run_dir = Path(args.out)
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        run_dir = Path("runs") / f"{args.command}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def echo_config(cfg: RunConfig, run_dir: Path, args) -> None:
    (run_dir / "config.txt").write_text(cfg.to_text())
    (run_dir / "invocation.txt").write_text(" ".join(sys.argv) + "\n")


def resolve_mask(spec: str, height: int, width: int) -> np.ndarray:
    if spec == "center":
        return make_center_mask(height, width)
    if spec.startswith("random:"):
        return make_random_mask(height, width, int(spec.split(":", 1)[1]))
    if spec.startswith("file:"):
        return load_mask_png(spec.split(":", 1)[1])
    raise UsageError(f"mask spec must be center, random:<seed>, or file:<path>, got {spec!r}")


def find_checkpoint(directory: str | Path, phase: str) -> Path:
    directory = Path(directory)
    for candidate in (directory / "checkpoints" / f"{phase}.nda", directory / f"{phase}.nda"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(
        f"no {phase} checkpoint under {directory}; run `divpaint train {phase}` first"
    )


def save_image(image: np.ndarray, path: Path) -> None:
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path: str | Path, image_size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def draw_solutions(
    codec: CodecModel,
    structure_model,
    generator: TextureGenerator,
    image: np.ndarray,
    mask: np.ndarray,
    k: int,
    temperature: float,
    seed: int,
) -> tuple[torch.Tensor, np.ndarray, np.ndarray]:
    """k structural index grids, raw outputs, and composites for one input."""
    incomplete = apply_mask(image, mask)
    inc_t = torch.from_numpy(incomplete).permute(2, 0, 1).unsqueeze(0).repeat(k, 1, 1, 1)
    mask_t = torch.from_numpy(mask).unsqueeze(0).unsqueeze(0).repeat(k, 1, 1, 1)
    condition = structure_model.build_condition(inc_t, mask_t)
    gen = torch.Generator().manual_seed(seed)
    greedy = temperature == 0.0
    with torch.no_grad():
        grids = sample_structure(structure_model, condition,
                                 temperature=temperature if not greedy else 1.0,
                                 generator=gen, greedy=greedy)
        guidance = codec.features_from_indices(grids, "structural")
        outputs = generator(inc_t, mask_t, guidance)
        image_t = torch.from_numpy(image).permute(2, 0, 1).unsqueeze(0)
        composites = composite(outputs, image_t, mask_t)
    return grids, outputs.permute(0, 2, 3, 1).numpy(), composites.permute(0, 2, 3, 1).numpy()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    run_dir = make_run_dir(args)
    echo_config(cfg, run_dir, args)
    dataset = build_dataset(cfg.data, cfg.codec.image_size, cfg.seed)
    counts = {s: len(dataset.indices(s)) for s in ("train", "val", "test")}
    print(f"dataset at {cfg.data.root}: {len(dataset)} images, splits {counts}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    run_dir = make_run_dir(args)
    echo_config(cfg, run_dir, args)
    dataset = build_dataset(cfg.data, cfg.codec.image_size, cfg.seed)
    resume = Path(args.resume) if args.resume else None
    if args.phase == "vqvae":
        ckpt = training.train_vqvae(dataset, cfg, run_dir, resume=resume)
    else:
        ckpt_dir = args.checkpoints or run_dir
        try:
            codec_ckpt = find_checkpoint(ckpt_dir, "vqvae")
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        trainer = training.train_structure if args.phase == "structure" else training.train_texture
        ckpt = trainer(dataset, codec_ckpt, cfg, run_dir, resume=resume)
    print(f"{args.phase} checkpoint: {ckpt}")
    return 0


def cmd_sample(args) -> int:
    cfg = resolve_config(args)
    run_dir = make_run_dir(args)
    echo_config(cfg, run_dir, args)
    size = cfg.codec.image_size
    mask = resolve_mask(args.mask, size, size)
    if mask.min() >= 1.0:
        print("error: mask covers the entire image; nothing to condition on", file=sys.stderr)
        return 1
    if args.image:
        image = load_image(args.image, size)
    else:
        dataset = build_dataset(cfg.data, size, cfg.seed)
        image = dataset.batch(dataset.indices("test")[:1])[0]

    codec = training.load_codec_for_inference(find_checkpoint(args.checkpoints, "vqvae"), cfg)
    structure_model = training.load_structure_for_inference(
        find_checkpoint(args.checkpoints, "structure"), cfg)
    generator = training.load_texture_for_inference(
        find_checkpoint(args.checkpoints, "texture"), cfg)

    grids, _outputs, composites = draw_solutions(
        codec, structure_model, generator, image, mask, args.k, args.temperature, cfg.seed)

    save_image(image, run_dir / "input.png")
    save_image(apply_mask(image, mask), run_dir / "incomplete.png")
    data.save_mask_png(mask, run_dir / "mask.png")
    for i in range(args.k):
        save_image(composites[i], run_dir / f"composite_{i:02d}.png")
        save_image(codec.visualize_latents(grids[i], "structural"),
                   run_dir / f"structure_{i:02d}.png")
    if args.entropy:
        inc_t = torch.from_numpy(apply_mask(image, mask)).permute(2, 0, 1).unsqueeze(0)
        mask_t = torch.from_numpy(mask).unsqueeze(0).unsqueeze(0)
        condition = structure_model.build_condition(inc_t, mask_t)
        ent = entropy_map(structure_model, condition, grids[:1])[0].numpy()
        archive.save_arrays(run_dir / "entropy.nda", {"entropy_bits": ent.astype(np.float32)})
        save_image(np.repeat((ent / np.log2(cfg.codec.codebook_size))[..., None], 3, axis=-1),
                   run_dir / "entropy.png")
    print(f"wrote {args.k} solutions to {run_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    run_dir = make_run_dir(args)
    echo_config(cfg, run_dir, args)
    size = cfg.codec.image_size
    dataset = build_dataset(cfg.data, size, cfg.seed)
    test_idx = dataset.indices("test")[: args.limit]
    if len(test_idx) == 0:
        print("error: test split is empty", file=sys.stderr)
        return 2

    codec = training.load_codec_for_inference(find_checkpoint(args.checkpoints, "vqvae"), cfg)
    structure_model = training.load_structure_for_inference(
        find_checkpoint(args.checkpoints, "structure"), cfg)
    generator = training.load_texture_for_inference(
        find_checkpoint(args.checkpoints, "texture"), cfg)

    report = metrics.EvalReport(sample_count=args.k)
    for n, idx in enumerate(test_idx):
        image = dataset.batch(np.array([idx]))[0]
        if args.mask.startswith("random:"):
            base = int(args.mask.split(":", 1)[1])
            mask = make_random_mask(size, size, base + n)
        else:
            mask = resolve_mask(args.mask, size, size)
        grids, _outputs, composites = draw_solutions(
            codec, structure_model, generator, image, mask, args.k,
            args.temperature, cfg.seed + n)
        psnrs = [metrics.psnr(c, image) for c in composites]
        ssims = [metrics.ssim(c, image) for c in composites]
        distinct, pair_l1 = metrics.diversity(
            [g.numpy() for g in grids], list(composites), mask)
        report.add(f"img_{int(idx):06d}", float(np.mean(psnrs)), float(np.mean(ssims)),
                   distinct, pair_l1)
        if args.contact_sheet:
            sheet = np.concatenate(
                [apply_mask(image, mask)] + list(composites) + [image], axis=1)
            save_image(sheet, run_dir / f"sheet_{int(idx):06d}.png")

    report.write_csv(run_dir / "eval.csv")
    (run_dir / "summary.txt").write_text(report.summary() + "\n")
    print(report.summary())
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"synth": cmd_synth, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval}
    try:
        return handlers[args.command](args)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except training.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
