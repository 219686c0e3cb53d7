"""Crop-supervised training of the upsampler.

For a training image ``I`` of side ``S`` and a P-aligned crop ``I'`` of side
``s``:

* ``p = encode(resize(I -> s))`` is a ``(s/P) x (s/P)`` feature grid,
* ``q = upsampler(I, p)`` is predicted on the ``(S/P) x (S/P)`` grid,
* ``q_hat = encode(I')`` is the ``(s/P) x (s/P)`` reference, and
* ``q'`` is the slice of ``q`` that covers the crop.

The main loss compares ``q'`` with ``q_hat``; input consistency compares the
area-pooled ``q`` with ``p``; self-consistency compares full-resolution
predictions under clean and augmented guidance.

The optimizer is AdamW (``torch.optim.AdamW``): with gradient ``g``,
``m <- b1 m + (1 - b1) g``, ``v <- b2 v + (1 - b2) g^2``,
``theta <- theta (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`` where hats are
bias-corrected moments.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from agnostic_upsampler.errors import (
    FormatError,
    NumericalError,
    ShapeError,
    UnsupportedFormatError,
    ValidationError,
)
from agnostic_upsampler.feature_io import (
    load_image,
    read_feature_map,
    resize_bilinear,
    validate_image,
    write_feature_map,
)
from agnostic_upsampler.losses import (
    AugmentationConfig,
    LossWeights,
    apply_augmentation,
    cos_mse_torch,
    input_consistency_torch,
    total_loss,
)
from agnostic_upsampler.toy_encoder import EncoderConfig, encode
from agnostic_upsampler.upsampler import Upsampler, UpsamplerConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "loss_main", "loss_input", "loss_self", "loss_total", "wall_ms")


@dataclass(frozen=True)
class CropSpec:
    offset_y: int
    offset_x: int
    size: int


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 4
    crops_per_image: int = 4
    total_steps: int = 2000
    image_size: int = 64
    crop_size: int = 32
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0
    checkpoint_every: int = 500
    symmetry_augmentation: bool = True
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    upsampler: UpsamplerConfig = field(default_factory=UpsamplerConfig)

    def __post_init__(self):
        P = self.encoder.patch_size
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValidationError("learning_rate must be finite and non-negative")
        for name in ("batch_size", "crops_per_image", "total_steps", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if not 0 < self.crop_size < self.image_size:
            raise ValidationError("crop_size must be positive and smaller than image_size")
        if self.crop_size % P or self.image_size % P:
            raise ValidationError(f"image_size and crop_size must be multiples of the patch size {P}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if "encoder" in d:
            d["encoder"] = EncoderConfig(**d["encoder"])
        if "upsampler" in d:
            d["upsampler"] = UpsamplerConfig(**d["upsampler"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class TrainingExample:
    image: np.ndarray
    features: np.ndarray
    crop_image: np.ndarray
    target: np.ndarray
    crop: CropSpec
    grid_size: int


@dataclass
class LossBreakdown:
    main: float
    input: float
    self: float
    total: float


def sample_crop(image_size: int, crop_size: int, patch_size: int, rng: np.random.Generator) -> CropSpec:
    """Uniformly draw a square, patch-aligned crop position."""
    if crop_size < 1 or crop_size > image_size:
        raise ValidationError(f"no valid crop of size {crop_size} in an image of size {image_size}")
    if crop_size % patch_size or image_size % patch_size:
        raise ValidationError("image and crop sizes must be multiples of the patch size")
    n = (image_size - crop_size) // patch_size + 1
    oy, ox = rng.integers(0, n, size=2)
    return CropSpec(int(oy) * patch_size, int(ox) * patch_size, crop_size)


def _check_crop(crop: CropSpec, image_size: int, patch_size: int) -> None:
    if crop.size < 1:
        raise ValidationError("crop size must be positive")
    for v in (crop.offset_y, crop.offset_x, crop.size):
        if v < 0 or v % patch_size:
            raise ValidationError(f"crop {crop} is not aligned to patch size {patch_size}")
    if crop.offset_y + crop.size > image_size or crop.offset_x + crop.size > image_size:
        raise ValidationError(f"crop {crop} exceeds image size {image_size}")


def lowres_features(image, crop_size: int, encoder: EncoderConfig) -> np.ndarray:
    """Features of the whole image rendered at crop resolution."""
    return encode(resize_bilinear(image, crop_size, crop_size), encoder)


def build_training_example(image, encoder: EncoderConfig, crop: CropSpec, features=None) -> TrainingExample:
    img = validate_image(image)
    S, W, _ = img.shape
    if S != W:
        raise ShapeError(f"training images must be square, got {S}x{W}")
    P = encoder.patch_size
    if S % P:
        raise ValidationError(f"image size {S} is not a multiple of the patch size {P}")
    _check_crop(crop, S, P)
    if features is None:
        features = lowres_features(img, crop.size, encoder)
    crop_image = img[crop.offset_y:crop.offset_y + crop.size, crop.offset_x:crop.offset_x + crop.size]
    target = encode(crop_image, encoder)
    return TrainingExample(img, features, crop_image, target, crop, S // P)


def crop_window(crop: CropSpec, patch_size: int, downsample_ratio: int = 1) -> tuple[slice, slice]:
    unit = patch_size * downsample_ratio
    if crop.size < 1:
        raise ValidationError("crop size must be positive")
    if crop.offset_y % unit or crop.offset_x % unit or crop.size % unit:
        raise ValidationError(f"crop {crop} does not map to whole cells of {unit} pixels")
    y0, x0, n = crop.offset_y // unit, crop.offset_x // unit, crop.size // unit
    return slice(y0, y0 + n), slice(x0, x0 + n)


def extract_crop_features(q, crop: CropSpec, patch_size: int, downsample_ratio: int = 1):
    """Slice the cells of ``q`` (``[H, W, c]``) covered by ``crop``; pure indexing."""
    rows, cols = crop_window(crop, patch_size, downsample_ratio)
    if rows.stop > q.shape[0] or cols.stop > q.shape[1]:
        raise ValidationError(f"crop window {rows}, {cols} exceeds feature grid {q.shape[:2]}")
    return q[rows, cols]


def make_optimizer(model: Upsampler, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=config.learning_rate,
        betas=config.betas,
        eps=config.eps,
        weight_decay=config.weight_decay,
        foreach=False,
    )


def _nchw(arrays) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.stack(arrays))).permute(0, 3, 1, 2).float()


def train_step(
    model: Upsampler,
    batch: list[list[TrainingExample]],
    optimizer: torch.optim.Optimizer,
    loss_weights: LossWeights,
    step: int = 0,
    aug_seeds=None,
    grad_clip: float | None = 1.0,
    augmentation: AugmentationConfig | None = None,
) -> LossBreakdown:
    """One optimizer step over a batch; ``batch[i]`` holds the crops of image ``i``.

    All crops of one image share the image's features and prediction.
    """
    if not batch or any(not crops for crops in batch):
        raise ValidationError("batch must contain at least one crop per image")
    images = _nchw([crops[0].image for crops in batch])
    p = _nchw([crops[0].features for crops in batch])
    grid = batch[0][0].grid_size
    P = images.shape[-1] // grid

    model.train()
    optimizer.zero_grad(set_to_none=True)
    q = model(images, p, out_size=(grid, grid))

    preds, targets = [], []
    for b, crops in enumerate(batch):
        for ex in crops:
            rows, cols = crop_window(ex.crop, P)
            preds.append(q[b, :, rows, cols])
            targets.append(ex.target)
    main = cos_mse_torch(torch.stack(preds), _nchw(targets))

    zero = torch.zeros((), dtype=q.dtype)
    inp = input_consistency_torch(q, p) if loss_weights.w_input > 0 else zero
    slf = zero
    if loss_weights.w_self > 0:
        if aug_seeds is None:
            aug_seeds = [step * 1_000 + b for b in range(len(batch))]
        aug = _nchw([apply_augmentation(crops[0].image, s, augmentation) for crops, s in zip(batch, aug_seeds)])
        slf = cos_mse_torch(model(images, p), model(aug, p))

    total = total_loss((main, inp, slf), loss_weights)
    terms = LossBreakdown(main.item(), inp.item(), slf.item(), total.item())
    if not all(math.isfinite(v) for v in asdict(terms).values()):
        raise NumericalError(f"non-finite loss at step {step}: {terms}")
    total.backward()
    if grad_clip is not None and grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return terms


def _load_dataset(dataset, image_size: int) -> list[np.ndarray]:
    if not dataset:
        raise ValidationError("dataset is empty")
    images = []
    for item in dataset:
        if isinstance(item, np.ndarray):
            img = validate_image(item)
        else:
            try:
                img = load_image(item)
            except (OSError, FormatError) as exc:
                log.warning("skipping unreadable image %s: %s", item, exc)
                continue
        if img.shape[:2] != (image_size, image_size):
            img = resize_bilinear(img, image_size, image_size)
        images.append(img)
    if not images:
        raise ValidationError("no readable images in dataset")
    return images


_CHANNEL_ORDERS = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))
NUM_SYMMETRIES = 8 * 6 * 2


def symmetry(image: np.ndarray, k: int) -> np.ndarray:
    """Apply symmetry ``k`` in ``[0, 96)``: dihedral transform, RGB reorder, optional inversion."""
    geo, rest = k % 8, k // 8
    out = np.rot90(image, geo % 4, axes=(0, 1))
    if geo >= 4:
        out = out[:, ::-1]
    out = out[..., _CHANNEL_ORDERS[rest % 6]]
    if rest >= 6:
        out = 1.0 - out
    return np.ascontiguousarray(out, dtype=image.dtype)


def plan_step(config: TrainConfig, step: int, num_images: int):
    """Image indices, symmetries, crops and augmentation seeds for ``step``.

    Depends only on ``(config.seed, step)``, which makes resuming exact.
    """
    rng = np.random.default_rng([config.seed, step])
    idx = rng.choice(num_images, size=config.batch_size, replace=num_images < config.batch_size)
    if config.symmetry_augmentation:
        syms = [int(k) for k in rng.integers(0, NUM_SYMMETRIES, size=len(idx))]
    else:
        syms = [0] * len(idx)
    P = config.encoder.patch_size
    crops = [
        [sample_crop(config.image_size, config.crop_size, P, rng) for _ in range(config.crops_per_image)]
        for _ in idx
    ]
    seeds = [int(s) for s in rng.integers(0, 2**63 - 1, size=len(idx))]
    return [int(i) for i in idx], syms, crops, seeds


def _format_row(step: int, terms: LossBreakdown, wall_ms: float) -> dict:
    return {
        "step": step,
        "loss_main": repr(terms.main),
        "loss_input": repr(terms.input),
        "loss_self": repr(terms.self),
        "loss_total": repr(terms.total),
        "wall_ms": f"{wall_ms:.3f}",
    }


def train(
    config: TrainConfig,
    dataset,
    out_dir: str | os.PathLike | None = None,
    resume_from: str | os.PathLike | None = None,
    augmentation: AugmentationConfig | None = None,
):
    """Run training until ``config.total_steps``; returns ``(model, log_rows)``.

    ``dataset`` holds PNG paths or in-memory images. With ``out_dir`` a CSV log
    is appended at ``out_dir/train_log.csv``, periodic checkpoints go to
    ``out_dir/checkpoints/step_NNNNNNN`` and the final checkpoint to ``out_dir``.
    """
    images = _load_dataset(dataset, config.image_size)
    variants: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def variant(i: int, k: int):
        if (i, k) not in variants:
            img = symmetry(images[i], k)
            variants[i, k] = img, lowres_features(img, config.crop_size, config.encoder)
        return variants[i, k]

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model = ckpt.model
        optimizer = make_optimizer(model, config)
        ckpt.restore_optimizer(optimizer)
        start = ckpt.step
    else:
        model = Upsampler(config.upsampler)
        optimizer = make_optimizer(model, config)
        start = 0

    log_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        if resume_from is None or not log_path.exists():
            with open(log_path, "w", newline="") as f:
                csv.DictWriter(f, LOG_COLUMNS).writeheader()

    rows = []
    for step in range(start, config.total_steps):
        t0 = time.perf_counter()
        idx, syms, crops, seeds = plan_step(config, step, len(images))
        batch = []
        for i, k, image_crops in zip(idx, syms, crops):
            img, feats = variant(i, k)
            batch.append([build_training_example(img, config.encoder, c, features=feats) for c in image_crops])
        terms = train_step(
            model, batch, optimizer, config.loss_weights, step=step, aug_seeds=seeds,
            grad_clip=config.grad_clip, augmentation=augmentation,
        )
        row = _format_row(step, terms, (time.perf_counter() - t0) * 1e3)
        rows.append(row)
        if log_path is not None:
            with open(log_path, "a", newline="") as f:
                csv.DictWriter(f, LOG_COLUMNS).writerow(row)
        done = step + 1
        if out_dir is not None and done % config.checkpoint_every == 0 and done != config.total_steps:
            save_checkpoint(model, optimizer, done, Path(out_dir) / "checkpoints" / f"step_{done:07d}", config)
        if step % 100 == 0:
            log.info("step %d main %.4f input %.4f self %.4f", step, terms.main, terms.input, terms.self)

    if out_dir is not None:
        save_checkpoint(model, optimizer, config.total_steps, out_dir, config)
    model.eval()
    return model, rows


def read_log(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# --- checkpoints -----------------------------------------------------------------


def _as_rank3(t: torch.Tensor) -> np.ndarray:
    # ANYT is rank-3; true shapes live in the manifest
    return t.detach().cpu().to(torch.float32).numpy().reshape(1, 1, -1)


def _tensor_file(name: str) -> str:
    return name.replace("/", "_") + ".anyt"


@dataclass
class Checkpoint:
    model: Upsampler
    step: int
    optimizer_state: dict
    manifest: dict

    @property
    def train_config(self) -> TrainConfig | None:
        cfg = self.manifest.get("train_config")
        return TrainConfig.from_dict(cfg) if cfg else None

    def restore_optimizer(self, optimizer: torch.optim.Optimizer) -> None:
        names = {id(p): n for n, p in self.model.named_parameters()}
        for group in optimizer.param_groups:
            for param in group["params"]:
                st = self.optimizer_state.get(names[id(param)])
                if st is None:
                    continue
                optimizer.state[param] = {
                    "step": torch.tensor(float(st["step"]), dtype=torch.float32),
                    "exp_avg": st["exp_avg"].clone(),
                    "exp_avg_sq": st["exp_avg_sq"].clone(),
                }


def save_checkpoint(model: Upsampler, optimizer, step: int, path, train_config: TrainConfig | None = None) -> None:
    """Write one ANYT file per tensor plus ``manifest.json`` into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, t in model.state_dict().items():
        tensors[f"model.{name}"] = t
    if optimizer is not None:
        by_id = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for param in group["params"]:
                st = optimizer.state.get(param)
                if not st:
                    continue
                name = by_id[id(param)]
                tensors[f"optim.{name}.exp_avg"] = st["exp_avg"]
                tensors[f"optim.{name}.exp_avg_sq"] = st["exp_avg_sq"]
                tensors[f"optim.{name}.step"] = torch.as_tensor(st["step"]).reshape(1)
    entries = {}
    for name in sorted(tensors):
        t = tensors[name]
        fname = _tensor_file(name)
        write_feature_map(_as_rank3(t), out / fname)
        entries[name] = {"file": fname, "shape": list(t.shape)}
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "step": int(step),
        "upsampler_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "tensors": entries,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    try:
        with open(root / "manifest.json") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{root / 'manifest.json'}: malformed manifest") from exc
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedFormatError(f"checkpoint format version {version} != supported {CHECKPOINT_VERSION}")
    tensors = {}
    for name, entry in manifest["tensors"].items():
        arr = read_feature_map(root / entry["file"])
        tensors[name] = torch.from_numpy(arr.reshape(entry["shape"]).copy())

    model = Upsampler(UpsamplerConfig(**manifest["upsampler_config"]))
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state, strict=True)
    model.eval()

    optim = {}
    for name in (n for n, _ in model.named_parameters()):
        key = f"optim.{name}"
        if f"{key}.exp_avg" in tensors:
            optim[name] = {
                "exp_avg": tensors[f"{key}.exp_avg"],
                "exp_avg_sq": tensors[f"{key}.exp_avg_sq"],
                "step": float(tensors[f"{key}.step"][0]),
            }
    return Checkpoint(model, int(manifest["step"]), optim, manifest)
