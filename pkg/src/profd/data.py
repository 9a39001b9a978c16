"""Synthetic occluded-person benchmark plus directory/file ingestion.

Every synthetic identity is a five-band vertical body (head, upper and
lower torso+arms, legs, feet) with identity-specific colors and stripes,
rendered with per-image jitter over a random background.  Occluders are
full-width gray bars that overwrite pixels and zero the covered mask
rows, so part-visibility ground truth is exact.  Masks travel in the
PFMK container; real datasets load from the usual
bounding_box_train/query/bounding_box_test layout.
"""

from __future__ import annotations

import dataclasses
import re
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

N_PARTS = 5
# Cumulative vertical extents of the five body bands.
BAND_EDGES = (0.0, 0.14, 0.40, 0.62, 0.86, 1.0)

MASK_MAGIC = b"PFMK"
MASK_VERSION = 1

_NAME_RE = re.compile(r"^(\d+)_c(\d+)(?:\D.*)?\.(jpg|jpeg|png)$", re.IGNORECASE)


@dataclass(frozen=True)
class SyntheticSpec:
    n_ids: int
    imgs_per_id: int
    n_cams: int = 4
    occlusion_rate: float = 0.5
    occluder_size_range: tuple[int, int] = (48, 128)
    seed: int = 0
    img_h: int = 256
    img_w: int = 128

    def __post_init__(self) -> None:
        if self.n_ids < 2:
            raise ValueError("need at least two identities")
        if self.imgs_per_id < 2:
            raise ValueError("need at least two images per identity")
        if self.n_cams < 2:
            raise ValueError("need at least two cameras")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError("occlusion_rate must lie in [0, 1]")
        lo, hi = self.occluder_size_range
        if not 0 < lo <= hi < self.img_h:
            raise ValueError("occluder size range must satisfy 0 < lo <= hi < img_h")


@dataclass
class Sample:
    image: np.ndarray  # [H, W, 3] float32 in [0, 1]
    id: int
    cam: int
    mask: np.ndarray | None  # [H, W, N] float32 in [0, 1]
    occluded_parts: np.ndarray | None  # [N] bool
    name: str = ""


@dataclass
class DatasetSplits:
    train: list[Sample]
    query: list[Sample]
    gallery: list[Sample]

    @property
    def train_ids(self) -> list[int]:
        return sorted({s.id for s in self.train})

    @property
    def has_masks(self) -> bool:
        return all(s.mask is not None for s in self.train + self.query + self.gallery)


def _rng(*tags: int) -> np.random.Generator:
    return np.random.default_rng([int(t) & 0x7FFFFFFF for t in tags])


def _identity_style(spec: SyntheticSpec, identity: int) -> dict:
    rng = _rng(spec.seed, 7919, identity)
    return {
        "colors": rng.uniform(0.15, 0.95, size=(N_PARTS, 3)),
        "stripe_period": rng.integers(5, 22, size=N_PARTS),
        "stripe_amp": rng.uniform(0.15, 0.35, size=N_PARTS),
        "margin": rng.uniform(0.12, 0.22),
    }


def _camera_tint(spec: SyntheticSpec, cam: int) -> np.ndarray:
    """Fixed per-camera color cast; cross-camera matching must learn past it."""
    rng = _rng(spec.seed, 52711, cam)
    return rng.uniform(0.7, 1.3, size=3)


def _render_sample(spec: SyntheticSpec, style: dict, identity: int, index: int) -> Sample:
    h, w = spec.img_h, spec.img_w
    rng = _rng(spec.seed, identity, index)
    cam = index % spec.n_cams

    background = rng.uniform(0.0, 1.0, size=3) + rng.uniform(-0.1, 0.1, size=(h, w, 3))
    image = np.clip(background, 0.0, 1.0)
    mask = np.zeros((h, w, N_PARTS), dtype=np.float32)

    brightness = rng.uniform(0.75, 1.25)
    margin = np.clip(style["margin"] + rng.normal(0.0, 0.02), 0.05, 0.3)
    shift = int(rng.integers(-6, 7))
    left = int(np.clip(round(w * margin) + shift, 0, w - 2))
    right = int(np.clip(w - round(w * margin) + shift, left + 1, w))

    edges = [int(round(e * h)) for e in BAND_EDGES]
    for b in range(1, N_PARTS):
        edges[b] = int(np.clip(edges[b] + rng.integers(-4, 5), edges[b - 1] + 1, h - (N_PARTS - b)))
    rows = np.arange(h)
    for part in range(N_PARTS):
        top, bottom = edges[part], edges[part + 1]
        color = np.clip(style["colors"][part] * brightness + rng.normal(0.0, 0.03, size=3), 0.0, 1.0)
        stripes = style["stripe_amp"][part] * np.sin(
            2.0 * np.pi * rows[top:bottom, None] / style["stripe_period"][part]
        )
        block = np.clip(color[None, None, :] + stripes[..., None], 0.0, 1.0)
        image[top:bottom, left:right] = block
        mask[top:bottom, left:right, part] = 1.0

    image = np.clip(image * _camera_tint(spec, cam)[None, None, :], 0.0, 1.0)

    if rng.random() < spec.occlusion_rate:
        lo, hi = spec.occluder_size_range
        height = int(rng.integers(lo, hi + 1))
        top = int(rng.integers(0, h - height + 1))
        fill = np.clip(0.5 + rng.normal(0.0, 0.03, size=(height, w, 3)), 0.0, 1.0)
        image[top : top + height] = fill
        mask[top : top + height] = 0.0

    occluded = mask.reshape(-1, N_PARTS).max(axis=0) <= 0.5
    return Sample(
        image=image.astype(np.float32),
        id=identity,
        cam=cam,
        mask=mask,
        occluded_parts=occluded,
        name=f"{identity:04d}_c{cam}_{index:06d}",
    )


def generate_dataset(spec: SyntheticSpec) -> DatasetSplits:
    """Deterministic train/query/gallery splits with exact mask ground truth.

    The first two thirds of the identities train; the rest split into
    queries (roughly a quarter of each identity's images) and gallery.
    Camera tags cycle per image so every query identity has a
    cross-camera gallery match.
    """
    n_train_ids = round(spec.n_ids * 2 / 3)
    if n_train_ids < 1 or spec.n_ids - n_train_ids < 1:
        raise ValueError("spec too small to form ID-disjoint train/eval splits")
    n_query = max(1, spec.imgs_per_id // 4)

    train: list[Sample] = []
    query: list[Sample] = []
    gallery: list[Sample] = []
    for identity in range(spec.n_ids):
        style = _identity_style(spec, identity)
        samples = [_render_sample(spec, style, identity, k) for k in range(spec.imgs_per_id)]
        if identity < n_train_ids:
            train.extend(samples)
        else:
            query.extend(samples[:n_query])
            gallery.extend(samples[n_query:])

    gallery_cams: dict[int, set[int]] = {}
    for s in gallery:
        gallery_cams.setdefault(s.id, set()).add(s.cam)
    for s in query:
        if not (gallery_cams.get(s.id, set()) - {s.cam}):
            raise ValueError(
                f"identity {s.id} lacks a cross-camera gallery match; "
                "increase imgs_per_id or n_cams"
            )
    return DatasetSplits(train=train, query=query, gallery=gallery)


def _dilate(channel: np.ndarray, radius: int) -> np.ndarray:
    out = channel.copy()
    for axis in (0, 1):
        for step in range(1, radius + 1):
            out = np.maximum(out, np.roll(channel, step, axis=axis))
            out = np.maximum(out, np.roll(channel, -step, axis=axis))
        channel = out.copy()
    return out


def corrupt_masks(
    samples: Sequence[Sample],
    noise_rate: float,
    seed: int = 0,
    modes: Sequence[str] = ("shift", "swap", "dilate"),
) -> list[Sample]:
    """Simulate an unreliable external parser by degrading mask channels.

    Each image is corrupted with probability noise_rate using one of the
    modes: vertical/horizontal channel shift, exchange of two channels,
    or channel dilation.  Images and visibility ground truth are left
    untouched.
    """
    if not 0.0 <= noise_rate <= 1.0:
        raise ValueError("noise_rate must lie in [0, 1]")
    bad = set(modes) - {"shift", "swap", "dilate"}
    if bad:
        raise ValueError(f"unknown corruption modes: {sorted(bad)}")
    out: list[Sample] = []
    for i, sample in enumerate(samples):
        rng = _rng(seed, 104729, i)
        if sample.mask is None or rng.random() >= noise_rate:
            out.append(sample)
            continue
        mask = sample.mask.copy()
        mode = modes[int(rng.integers(len(modes)))]
        if mode == "shift":
            dy = int(rng.integers(8, 33)) * (1 if rng.random() < 0.5 else -1)
            dx = int(rng.integers(0, 9)) * (1 if rng.random() < 0.5 else -1)
            mask = np.roll(mask, (dy, dx), axis=(0, 1))
        elif mode == "swap":
            a, b = rng.choice(mask.shape[-1], size=2, replace=False)
            mask[..., [a, b]] = mask[..., [b, a]]
        else:
            radius = int(rng.integers(4, 13))
            mask = np.stack(
                [_dilate(mask[..., c], radius) for c in range(mask.shape[-1])], axis=-1
            )
        out.append(dataclasses.replace(sample, mask=mask))
    return out


# ---------------------------------------------------------------------------
# PFMK mask container


def write_mask_file(path: str | Path, mask: np.ndarray) -> None:
    """Serialize an [H', W', N] float mask: magic, version, dims, raw f32."""
    if mask.ndim != 3:
        raise ValueError("mask must be [H', W', N]")
    h, w, n = mask.shape
    with open(path, "wb") as f:
        f.write(MASK_MAGIC)
        f.write(struct.pack("<IIII", MASK_VERSION, h, w, n))
        f.write(np.ascontiguousarray(mask, dtype="<f4").tobytes())


def read_mask_file(path: str | Path, expected_parts: int | None = None) -> np.ndarray:
    """Read a PFMK file back bit-exactly; errors carry the byte offset."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MASK_MAGIC:
        raise ValueError(f"{path}: bad magic at offset 0, expected {MASK_MAGIC!r}")
    if len(blob) < 20:
        raise ValueError(f"{path}: truncated header, file ends at offset {len(blob)}")
    version, h, w, n = struct.unpack_from("<IIII", blob, 4)
    if version != MASK_VERSION:
        raise ValueError(f"{path}: unsupported version {version} at offset 4")
    if h == 0 or w == 0 or n == 0:
        raise ValueError(f"{path}: zero dimension in header at offset 8")
    if expected_parts is not None and n != expected_parts:
        raise ValueError(
            f"{path}: mask has {n} parts but configuration expects {expected_parts}"
        )
    need = 20 + h * w * n * 4
    if len(blob) < need:
        raise ValueError(
            f"{path}: truncated payload, file ends at offset {len(blob)}, need {need}"
        )
    data = np.frombuffer(blob, dtype="<f4", count=h * w * n, offset=20)
    return data.reshape(h, w, n).copy()


# ---------------------------------------------------------------------------
# Directory layout ingestion and export

_SPLIT_DIRS = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}


def save_dataset(splits: DatasetSplits, root: str | Path) -> None:
    """Write PNG images plus sibling PFMK masks in the standard layout."""
    from PIL import Image

    root = Path(root)
    for split, samples in (("train", splits.train), ("query", splits.query), ("gallery", splits.gallery)):
        img_dir = root / _SPLIT_DIRS[split]
        mask_dir = root / "masks" / _SPLIT_DIRS[split]
        img_dir.mkdir(parents=True, exist_ok=True)
        for sample in samples:
            name = sample.name or f"{sample.id:04d}_c{sample.cam}_{id(sample):08x}"
            arr = np.clip(sample.image * 255.0 + 0.5, 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(img_dir / f"{name}.png")
            if sample.mask is not None:
                mask_dir.mkdir(parents=True, exist_ok=True)
                write_mask_file(mask_dir / f"{name}.pfmk", sample.mask)


def _load_split(
    img_dir: Path, mask_dir: Path, img_h: int | None, img_w: int | None
) -> list[Sample]:
    from PIL import Image

    samples: list[Sample] = []
    for path in sorted(img_dir.iterdir()):
        m = _NAME_RE.match(path.name)
        if m is None:
            warnings.warn(f"skipping {path.name}: cannot parse id/camera", stacklevel=2)
            continue
        identity, cam = int(m.group(1)), int(m.group(2))
        img = Image.open(path).convert("RGB")
        if img_h is not None and img_w is not None and img.size != (img_w, img_h):
            img = img.resize((img_w, img_h), Image.BILINEAR)
        image = np.asarray(img, dtype=np.float32) / 255.0
        mask = None
        occluded = None
        mask_path = mask_dir / f"{path.stem}.pfmk"
        if mask_path.exists():
            mask = read_mask_file(mask_path)
            if img_h is not None and img_w is not None and mask.shape[:2] != (img_h, img_w):
                mask = _resize_mask(mask, img_h, img_w)
            occluded = mask.reshape(-1, mask.shape[-1]).max(axis=0) <= 0.5
        samples.append(
            Sample(image=image, id=identity, cam=cam, mask=mask, occluded_parts=occluded, name=path.stem)
        )
    return samples


def _resize_mask(mask: np.ndarray, img_h: int, img_w: int) -> np.ndarray:
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(mask).permute(2, 0, 1).unsqueeze(0)
    t = F.interpolate(t, size=(img_h, img_w), mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).clamp(0, 1).numpy()


def load_dataset(
    root: str | Path, img_h: int | None = None, img_w: int | None = None
) -> DatasetSplits:
    """Load a Market-style directory tree; masks are optional.

    Filenames must look like `<id>_c<cam>....png|jpg`; anything else is
    skipped with a warning.  When the sibling masks/ tree is missing the
    samples carry mask=None and downstream mask-dependent losses must be
    disabled.
    """
    root = Path(root)
    splits = {}
    for split, dirname in _SPLIT_DIRS.items():
        img_dir = root / dirname
        if not img_dir.is_dir():
            raise ValueError(f"missing split directory {img_dir}")
        samples = _load_split(img_dir, root / "masks" / dirname, img_h, img_w)
        if not samples:
            raise ValueError(f"split {dirname} contains no loadable images")
        splits[split] = samples
    return DatasetSplits(train=splits["train"], query=splits["query"], gallery=splits["gallery"])


# ---------------------------------------------------------------------------
# Batch sampling and augmentation


class PKSampler:
    """Yields batches of P identities x K images, reshuffled per epoch.

    By default one epoch walks every image roughly once; passing `iters`
    instead draws that many independent PK batches (identities without
    replacement per batch, images with replacement as needed), the usual
    choice when the dataset is tiny relative to the step budget.
    """

    def __init__(self, ids: Sequence[int], p: int, k: int, seed: int = 0):
        if p < 2 or k < 2:
            raise ValueError("PK sampling needs p >= 2 and k >= 2")
        self.identity_of = [int(i) for i in ids]
        self.by_id: dict[int, list[int]] = {}
        for idx, identity in enumerate(self.identity_of):
            self.by_id.setdefault(identity, []).append(idx)
        if len(self.by_id) < 2:
            raise ValueError("PK sampling needs at least two identities")
        if p > len(self.by_id):
            warnings.warn(
                f"requested P={p} identities but only {len(self.by_id)} exist; clamping",
                stacklevel=2,
            )
            p = len(self.by_id)
        self.p = p
        self.k = k
        self.seed = seed

    def batches(self, epoch: int, iters: int | None = None) -> list[list[int]]:
        rng = _rng(self.seed, 15485863, epoch)
        if iters is not None:
            return [self._draw(rng) for _ in range(iters)]
        units: list[list[int]] = []
        for identity in sorted(self.by_id):
            idxs = self.by_id[identity]
            order = [idxs[j] for j in rng.permutation(len(idxs))]
            for start in range(0, len(order), self.k):
                chunk = order[start : start + self.k]
                while len(chunk) < self.k:  # pad short tail by resampling
                    chunk.append(idxs[int(rng.integers(len(idxs)))])
                units.append(chunk)
        units = [units[j] for j in rng.permutation(len(units))]
        batches = []
        for start in range(0, len(units), self.p):
            group = units[start : start + self.p]
            flat = [i for unit in group for i in unit]
            # a trailing group must still span >= 2 identities for triplets
            if len({self.identity_of[i] for i in flat}) >= 2:
                batches.append(flat)
        return batches

    def _draw(self, rng: np.random.Generator) -> list[int]:
        identities = sorted(self.by_id)
        picked = rng.choice(len(identities), size=self.p, replace=False)
        batch: list[int] = []
        for j in picked:
            idxs = self.by_id[identities[int(j)]]
            take = rng.choice(len(idxs), size=self.k, replace=len(idxs) < self.k)
            batch.extend(idxs[int(t)] for t in take)
        return batch


def augment_batch(
    images: np.ndarray,
    masks: np.ndarray | None,
    rng: np.random.Generator,
    p: float = 0.5,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Random flip / crop / erase, each with its own coin per sample.

    Flip and crop transform image and mask together; erasing touches the
    image only, simulating occlusion the mask source never saw.
    """
    images = images.copy()
    masks = masks.copy() if masks is not None else None
    b, h, w, _ = images.shape
    for i in range(b):
        if rng.random() < p:  # horizontal flip
            images[i] = images[i, :, ::-1]
            if masks is not None:
                masks[i] = masks[i, :, ::-1]
        if rng.random() < p:  # pad-and-crop
            pad = 10
            dy, dx = int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1))
            img = np.pad(images[i], ((pad, pad), (pad, pad), (0, 0)), mode="edge")
            images[i] = img[dy : dy + h, dx : dx + w]
            if masks is not None:
                msk = np.pad(masks[i], ((pad, pad), (pad, pad), (0, 0)), mode="constant")
                masks[i] = msk[dy : dy + h, dx : dx + w]
        if rng.random() < p:  # random erasing, image only
            area = rng.uniform(0.05, 0.25) * h * w
            aspect = rng.uniform(0.5, 2.0)
            eh = min(h, max(1, int(round(np.sqrt(area * aspect)))))
            ew = min(w, max(1, int(round(np.sqrt(area / aspect)))))
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            images[i, top : top + eh, left : left + ew] = rng.uniform(0, 1, size=(eh, ew, 3))
    return images, masks
