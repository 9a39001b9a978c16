"""Command-line surface: gen-data, train, eval, embed, attn-dump, ablate."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .config import load_config
from .data import SyntheticSpec, generate_dataset, load_dataset, save_dataset
from .evaluation import write_embeddings
from .model import ProFDModel
from .training import (
    ablation_gaps,
    ablation_suite,
    embed_samples,
    evaluate_model,
    format_ablation_table,
    load_checkpoint,
    train_model,
)

_SPEC_KEYS = {
    "n_ids": int,
    "imgs_per_id": int,
    "n_cams": int,
    "occlusion_rate": float,
    "occluder_min": int,
    "occluder_max": int,
    "seed": int,
    "img_h": int,
    "img_w": int,
}


def load_synthetic_spec(path: str | Path) -> SyntheticSpec:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: spec must be a flat mapping")
    unknown = set(raw) - set(_SPEC_KEYS)
    if unknown:
        raise ValueError(f"{path}: unknown spec keys {sorted(unknown)}")
    kwargs = {k: _SPEC_KEYS[k](v) for k, v in raw.items()}
    lo = kwargs.pop("occluder_min", None)
    hi = kwargs.pop("occluder_max", None)
    if (lo is None) != (hi is None):
        raise ValueError("occluder_min and occluder_max must be given together")
    if lo is not None:
        kwargs["occluder_size_range"] = (lo, hi)
    return SyntheticSpec(**kwargs)


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Grayscale portable float map; rows stored bottom-to-top, little-endian."""
    if data.ndim != 2:
        raise ValueError("PFM export expects a 2-d array")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1], dtype="<f4").tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise ValueError(f"{path}: not a grayscale PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * 4), dtype=dtype).reshape(h, w)
    return data[::-1].copy()


def _load_image(path: str | Path, img_h: int, img_w: int) -> torch.Tensor:
    from PIL import Image

    img = Image.open(path).convert("RGB")
    if img.size != (img_w, img_h):
        img = img.resize((img_w, img_h), Image.BILINEAR)
    return torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0)


def cmd_gen_data(args: argparse.Namespace) -> int:
    spec = load_synthetic_spec(args.spec)
    splits = generate_dataset(spec)
    save_dataset(splits, args.out)
    print(
        f"wrote {len(splits.train)} train / {len(splits.query)} query / "
        f"{len(splits.gallery)} gallery images to {args.out}"
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    dataset = load_dataset(args.data, img_h=cfg.img_h, img_w=cfg.img_w)
    result = train_model(cfg, dataset, out_dir=args.out)
    final = result.log[-1]["total"] if result.log else float("nan")
    print(f"trained {cfg.epochs} epochs, {len(result.log)} steps, final total loss {final:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, cfg, _ = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data, img_h=cfg.img_h, img_w=cfg.img_w)
    report = evaluate_model(model, dataset, cfg, out_dir=args.out)
    print(report.as_text())
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    model, cfg, _ = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data, img_h=cfg.img_h, img_w=cfg.img_w)
    samples = {
        "train": dataset.train,
        "query": dataset.query,
        "gallery": dataset.gallery,
        "all": dataset.query + dataset.gallery,
    }[args.split]
    emb = embed_samples(model, samples, cfg)
    write_embeddings(args.out, emb)
    print(f"wrote {len(emb)} embeddings (d={emb.d}, parts={emb.n_parts}) to {args.out}")
    return 0


def cmd_attn_dump(args: argparse.Namespace) -> int:
    model, cfg, _ = load_checkpoint(args.ckpt)
    if not cfg.use_spa:
        print("checkpoint was trained without the spatial branch; no affinities to dump")
        return 1
    image = _load_image(args.image, cfg.img_h, cfg.img_w)
    with torch.no_grad():
        out = model(image.unsqueeze(0), classify=False)
    if not out.affinities:
        print("model produced no affinities")
        return 1
    block = args.block if args.block >= 0 else len(out.affinities) + args.block
    affinity = out.affinities[block][0]  # [N, HW]
    weights = torch.softmax(affinity, dim=-1)
    dims = model.dims
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    for part, name in enumerate(cfg.parts):
        grid = weights[part].reshape(dims.grid_h, dims.grid_w).numpy()
        slug = name.replace(" ", "_")
        write_pfm(out_dir / f"{stem}_block{block}_part{part}_{slug}.pfm", grid)
    print(f"wrote {len(cfg.parts)} attention maps to {out_dir}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    dataset = load_dataset(args.data, img_h=cfg.img_h, img_w=cfg.img_w)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    rows = ablation_suite(cfg, dataset, seeds=seeds)
    print(format_ablation_table(rows))
    print()
    for gap in ablation_gaps(rows):
        flag = "ok" if gap["ok"] else "FLAGGED"
        print(
            f"{gap['group']}/{gap['label']}: mAP {gap['mAP']:.4f} "
            f"vs full {gap['full_mAP']:.4f} [{flag}]"
        )
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="profd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic occlusion benchmark")
    p.add_argument("--spec", required=True, help="YAML spec file (n_ids, imgs_per_id, ...)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", required=True, help="flat-key YAML training config")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for checkpoint and log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="optional directory for PFEM files and reports")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="export embeddings of one split to a PFEM file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="all", choices=("train", "query", "gallery", "all"))
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("attn-dump", help="export per-part attention maps as PFM images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", default="attn_maps")
    p.add_argument("--block", type=int, default=0, help="decoder block index (negative from end)")
    p.set_defaults(func=cmd_attn_dump)

    p = sub.add_parser("ablate", help="run the ablation table")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--out", default=None, help="optional JSON output path")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
