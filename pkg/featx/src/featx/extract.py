"""Image -> feature-vector extraction, written as a VGNF file.

The trunk is any callable mapping a preprocessed float32 batch
(B, 3, 224, 224) to (B, D) feature rows. The default is a ResNet-101 with
its classifier removed (2048-D pooled activations); "debug-mean" is a tiny
deterministic trunk for pipeline validation without model weights.
Output rows follow manifest order, and reruns are bit-identical.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

FEATURE_MAGIC = b"VGNF"
FEATURE_VERSION = 1

CROP_SIZE = 224
RESIZE_SHORTER = 256
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

ON_ERROR_POLICIES = ("abort", "skip", "zero")

Trunk = Callable[[np.ndarray], np.ndarray]


class ExtractError(Exception):
    pass


@dataclass
class ImageManifest:
    image_paths: List[Path]
    output_path: Path
    model_name: str = "resnet101"
    batch_size: int = 16

    def __post_init__(self):
        if not self.image_paths:
            raise ExtractError("manifest lists no images")
        if self.batch_size < 1:
            raise ExtractError("batch_size must be >= 1")
        for p in self.image_paths:
            if not Path(p).is_file():
                raise ExtractError(f"manifest names a missing image: {p}")


def read_manifest(path, output_path, model_name: str = "resnet101", batch_size: int = 16) -> ImageManifest:
    """One image path per line; blank lines and # comments are skipped."""
    paths: List[Path] = []
    base = Path(path).parent
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            p = Path(line)
            if not p.is_absolute():
                p = base / p
            paths.append(p)
    return ImageManifest(paths, Path(output_path), model_name, batch_size)


def preprocess(image: Image.Image) -> np.ndarray:
    """Shorter side to 256, center crop 224, ImageNet normalization; (3, 224, 224)."""
    img = image.convert("RGB")
    w, h = img.size
    scale = RESIZE_SHORTER / min(w, h)
    img = img.resize((max(round(w * scale), 1), max(round(h * scale), 1)), Image.BILINEAR)
    w, h = img.size
    left = (w - CROP_SIZE) // 2
    top = (h - CROP_SIZE) // 2
    img = img.crop((left, top, left + CROP_SIZE, top + CROP_SIZE))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
    return arr.transpose(2, 0, 1)


def debug_mean_trunk(batch: np.ndarray) -> np.ndarray:
    """Deterministic 2048-D stand-in: tiled per-channel statistics."""
    pooled = batch.mean(axis=(2, 3))
    spread = batch.std(axis=(2, 3))
    base = np.concatenate([pooled, spread], axis=1)  # (B, 6)
    reps = int(np.ceil(2048 / base.shape[1]))
    return np.tile(base, (1, reps))[:, :2048].astype(np.float32)


def build_resnet_trunk(weights_path: Optional[str] = None) -> Trunk:
    """ResNet-101 with the classifier replaced by identity; 2048-D output.

    Without a weights file this asks torchvision for pretrained weights,
    which requires network access; pass weights_path in offline setups.
    """
    try:
        import torch
        import torchvision.models as models
    except ImportError as exc:
        raise ExtractError(f"the resnet101 trunk needs torch and torchvision: {exc}")
    torch.set_num_threads(1)  # keep reruns bit-identical
    if weights_path is not None:
        net = models.resnet101(weights=None)
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    else:
        try:
            net = models.resnet101(weights=models.ResNet101_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise ExtractError(
                f"could not fetch pretrained resnet101 weights ({exc}); pass --weights"
            )
    net.fc = torch.nn.Identity()
    net.eval()

    def run(batch: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            out = net(torch.from_numpy(np.ascontiguousarray(batch)))
        return out.numpy().astype(np.float32)

    return run


def build_trunk(model_name: str, weights_path: Optional[str] = None) -> Trunk:
    if model_name == "resnet101":
        return build_resnet_trunk(weights_path)
    if model_name == "debug-mean":
        return debug_mean_trunk
    raise ExtractError(f"unknown model {model_name!r}")


def write_vgnf(path, features: np.ndarray) -> None:
    feats = np.ascontiguousarray(features, dtype="<f4")
    if not np.all(np.isfinite(feats)):
        raise ExtractError("non-finite feature values")
    count, dim = feats.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, count, dim))
        f.write(feats.tobytes())


def extract(
    manifest: ImageManifest,
    trunk: Optional[Trunk] = None,
    weights_path: Optional[str] = None,
    on_error: str = "abort",
) -> Tuple[int, List[Path]]:
    """Run the trunk over every manifest image and write the VGNF file.

    Unreadable images follow on_error: abort raises naming the file, skip
    drops the row, zero emits an all-zero row. Returns (rows written,
    skipped paths).
    """
    if on_error not in ON_ERROR_POLICIES:
        raise ExtractError(f"on_error must be one of {ON_ERROR_POLICIES}")
    if trunk is None:
        trunk = build_trunk(manifest.model_name, weights_path)
    rows: List[Optional[np.ndarray]] = []  # None marks a zero-filled slot
    batch: List[np.ndarray] = []
    skipped: List[Path] = []

    def flush():
        if not batch:
            return
        out = trunk(np.stack(batch))
        if out.ndim != 2 or out.shape[0] != len(batch):
            raise ExtractError(
                f"trunk returned shape {out.shape} for a batch of {len(batch)}"
            )
        for row in out:
            rows.append(np.asarray(row, dtype=np.float32))
        batch.clear()

    for path in manifest.image_paths:
        try:
            with Image.open(path) as img:
                tensor = preprocess(img)
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            if on_error == "abort":
                raise ExtractError(f"unreadable image {path}: {exc}")
            if on_error == "zero":
                flush()  # keep row order: everything queued comes first
                rows.append(None)
            skipped.append(path)
            continue
        batch.append(tensor)
        if len(batch) >= manifest.batch_size:
            flush()
    flush()

    if not rows:
        raise ExtractError("no images could be extracted")
    dim = next(r.shape[0] for r in rows if r is not None) if any(
        r is not None for r in rows
    ) else 0
    if dim == 0:
        raise ExtractError("no readable image to determine the feature dimension")
    full = np.zeros((len(rows), dim), dtype=np.float32)
    for i, row in enumerate(rows):
        if row is not None:
            full[i] = row
    write_vgnf(manifest.output_path, full)
    return len(rows), skipped
