"""Run a frozen vision backbone over labeled image folders.

Output is the kgrec feature file: `#kgrec-features-v1 dim=F` followed by
`image_id<TAB>label<TAB>v1,...,vF` records.  Labels come from per-class
subdirectories; images sitting directly in the root get the open-world
label `?`.  Ordering is sorted-path, so re-runs are identical.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torchvision import models as tv_models
from torchvision import transforms

log = logging.getLogger(__name__)

FEATURES_FORMAT = "kgrec-features-v1"
UNLABELED = "?"

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".webp"}

# Fixed seed for the offline fallback weights, so extraction stays
# deterministic when pretrained checkpoints cannot be downloaded.
_FALLBACK_SEED = 1234


@dataclass(frozen=True)
class ExtractionManifest:
    backbone: str
    feature_dim: int
    image_count: int
    label_source: str  # "subdirectories" | "?"
    skipped: int
    pretrained: bool


class _Backbone:
    def __init__(self, name: str, module: torch.nn.Module, dim: int, pretrained: bool):
        self.name = name
        self.module = module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.dim = dim
        self.pretrained = pretrained


def _build(name: str, factory, weights, head) -> _Backbone:
    """Try the pretrained checkpoint, fall back to seeded random weights."""
    pretrained = True
    try:
        net = factory(weights=weights)
    except Exception as exc:  # no network in offline environments
        log.warning("pretrained weights unavailable (%s); using seeded random "
                    "weights for %s", exc.__class__.__name__, name)
        torch.manual_seed(_FALLBACK_SEED)
        net = factory(weights=None)
        pretrained = False
    module, dim = head(net)
    return _Backbone(name, module, dim, pretrained)


def load_backbone(name: str) -> _Backbone:
    """Frozen backbone truncated at its penultimate pooled layer."""
    if name == "squeezenet1_1":
        return _build(
            name,
            tv_models.squeezenet1_1,
            tv_models.SqueezeNet1_1_Weights.DEFAULT,
            lambda net: (
                torch.nn.Sequential(
                    net.features, torch.nn.AdaptiveAvgPool2d(1), torch.nn.Flatten()
                ),
                512,
            ),
        )
    if name == "resnet18":
        return _build(
            name,
            tv_models.resnet18,
            tv_models.ResNet18_Weights.DEFAULT,
            lambda net: (
                torch.nn.Sequential(
                    *list(net.children())[:-1], torch.nn.Flatten()
                ),
                512,
            ),
        )
    if name == "mobilenet_v3_small":
        return _build(
            name,
            tv_models.mobilenet_v3_small,
            tv_models.MobileNet_V3_Small_Weights.DEFAULT,
            lambda net: (
                torch.nn.Sequential(
                    net.features, torch.nn.AdaptiveAvgPool2d(1), torch.nn.Flatten()
                ),
                576,
            ),
        )
    if name == "vgg16":
        return _build(
            name,
            tv_models.vgg16,
            tv_models.VGG16_Weights.DEFAULT,
            lambda net: (
                torch.nn.Sequential(
                    net.features,
                    net.avgpool,
                    torch.nn.Flatten(),
                    net.classifier[:-3],  # up to the penultimate dense activation
                ),
                4096,
            ),
        )
    raise ValueError(f"unknown backbone: {name!r}")


_PREPROCESS = transforms.Compose(
    [
        transforms.Resize(256),
        transforms.CenterCrop(224),
        transforms.ToTensor(),
        transforms.Normalize(
            mean=[0.485, 0.456, 0.406], std=[0.229, 0.224, 0.225]
        ),
    ]
)


def _collect_images(image_dir: Path) -> tuple[list[tuple[str, Path]], str]:
    """(label, path) pairs in sorted-path order, plus the label source."""
    items: list[tuple[str, Path]] = []
    has_class_dirs = False
    for sub in sorted(p for p in image_dir.iterdir() if p.is_dir()):
        files = sorted(
            f for f in sub.iterdir()
            if f.is_file() and f.suffix.lower() in IMAGE_EXTENSIONS
        )
        if files:
            has_class_dirs = True
        items.extend((sub.name, f) for f in files)
    loose = sorted(
        f for f in image_dir.iterdir()
        if f.is_file() and f.suffix.lower() in IMAGE_EXTENSIONS
    )
    items.extend((UNLABELED, f) for f in loose)
    return items, ("subdirectories" if has_class_dirs else UNLABELED)


def extract(
    image_dir: str | Path,
    out_path: str | Path,
    backbone_choice: str = "squeezenet1_1",
    batch_size: int = 16,
) -> ExtractionManifest:
    """Write one feature record per decodable image; returns the manifest."""
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise FileNotFoundError(f"image directory not found: {image_dir}")
    items, label_source = _collect_images(image_dir)
    if not items:
        raise ValueError(f"no images found under {image_dir}")

    backbone = load_backbone(backbone_choice)

    records: list[tuple[str, str, np.ndarray]] = []
    skipped = 0
    batch: list[torch.Tensor] = []
    meta: list[tuple[str, str]] = []

    def flush():
        nonlocal batch, meta
        if not batch:
            return
        with torch.no_grad():
            feats = backbone.module(torch.stack(batch)).cpu().numpy()
        for (label, image_id), vec in zip(meta, feats):
            records.append((image_id, label, vec.astype(np.float64)))
        batch, meta = [], []

    for label, path in items:
        try:
            with Image.open(path) as img:
                tensor = _PREPROCESS(img.convert("RGB"))
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping undecodable image %s: %s", path, exc)
            skipped += 1
            continue
        batch.append(tensor)
        meta.append((label, path.relative_to(image_dir).as_posix()))
        if len(batch) >= batch_size:
            flush()
    flush()

    if not records:
        raise ValueError(f"no decodable images under {image_dir}")

    with Path(out_path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#{FEATURES_FORMAT} dim={backbone.dim}\n")
        for image_id, label, vec in records:
            if vec.shape != (backbone.dim,):
                raise RuntimeError(
                    f"backbone produced {vec.shape[0]} values, declared {backbone.dim}"
                )
            values = ",".join(repr(float(v)) for v in vec)
            fh.write(f"{image_id}\t{label}\t{values}\n")

    return ExtractionManifest(
        backbone=backbone.name,
        feature_dim=backbone.dim,
        image_count=len(records),
        label_source=label_source,
        skipped=skipped,
        pretrained=backbone.pretrained,
    )
