"""Linear probing, segmentation/depth metrics and PCA visualization of features.

Probes are per-pixel linear maps (a 1x1 convolution) fit on frozen features.
Two protocols are supported:

* ``"probe"``: fit the probe on upsampled features against high-resolution
  labels, then evaluate on upsampled test features.
* ``"preserve"``: fit the probe on raw low-resolution features against
  low-resolution labels and apply it unchanged to upsampled features. A probe
  that keeps working means the upsampler stayed in the input feature space.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from agnostic_upsampler.errors import ShapeError, ValidationError
from agnostic_upsampler.feature_io import resize_bilinear, resize_nearest, validate_feature_map
from agnostic_upsampler.synthetic import make_dataset
from agnostic_upsampler.toy_encoder import EncoderConfig, encode, encode_dense

IGNORE_INDEX = 255
TASKS = ("segmentation", "depth")


@dataclass
class ProbeWeights:
    matrix: np.ndarray  # [c, out_dim]
    bias: np.ndarray  # [out_dim]
    task: str

    @property
    def in_dim(self) -> int:
        return self.matrix.shape[0]

    def raw(self, features) -> np.ndarray:
        fmap = validate_feature_map(features)
        if fmap.shape[2] != self.in_dim:
            raise ShapeError(f"probe expects {self.in_dim} channels, got {fmap.shape[2]}")
        return fmap.astype(np.float64) @ self.matrix + self.bias

    def predict(self, features) -> np.ndarray:
        out = self.raw(features)
        if self.task == "segmentation":
            return out.argmax(-1)
        return np.logaddexp(0.0, out[..., 0])  # softplus


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, float] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"task={self.task}"]
        lines += [f"{k}={v!r}" for k, v in sorted(self.metrics.items())]
        lines += [f"{k}={v}" for k, v in sorted(self.notes.items())]
        return "\n".join(lines) + "\n"

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w") as f:
            f.write(self.to_text())


def _check_task(task: str) -> None:
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")


def init_probe(in_dim: int, out_dim: int, task: str, seed: int = 0) -> ProbeWeights:
    """Seeded starting point: uniform weights in +-1/sqrt(in_dim), zero bias."""
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / np.sqrt(in_dim)
    matrix = (torch.rand(in_dim, out_dim, generator=gen, dtype=torch.float64) * 2 - 1) * bound
    return ProbeWeights(matrix.numpy(), np.zeros(out_dim), task)


def fit_linear_probe(
    features,
    labels,
    task: str = "segmentation",
    num_classes: int | None = None,
    steps: int = 500,
    lr: float = 1e-2,
    seed: int = 0,
    ignore_index: int = IGNORE_INDEX,
) -> ProbeWeights:
    """Fit a per-pixel linear head with full-batch Adam.

    Segmentation uses cross-entropy over class-index labels; depth uses MSE on
    a softplus output.
    """
    _check_task(task)
    if len(features) == 0 or len(features) != len(labels):
        raise ValidationError("need a non-empty, equally long list of feature maps and label maps")
    xs, ys = [], []
    for f, y in zip(features, labels):
        fmap = validate_feature_map(f)
        y = np.asarray(y)
        if y.shape != fmap.shape[:2]:
            raise ShapeError(f"label map {y.shape} does not match features {fmap.shape[:2]}")
        xs.append(fmap.reshape(-1, fmap.shape[2]))
        ys.append(y.reshape(-1))
    if len({x.shape[1] for x in xs}) != 1:
        raise ShapeError("all feature maps must share the channel count")
    x = torch.from_numpy(np.concatenate(xs).astype(np.float64))
    y = np.concatenate(ys)

    if task == "segmentation":
        y = y.astype(np.int64)
        valid = y != ignore_index
        if not valid.any():
            raise ValidationError("every label is ignored")
        if num_classes is None:
            num_classes = int(y[valid].max()) + 1
        if y[valid].min() < 0 or y[valid].max() >= num_classes:
            raise ValidationError("labels out of range for num_classes")
        out_dim = num_classes
    else:
        if not np.all(y > 0):
            raise ValidationError("depth labels must be positive")
        out_dim = 1
    target = torch.from_numpy(y)

    init = init_probe(x.shape[1], out_dim, task, seed)
    weight = torch.from_numpy(init.matrix.copy()).requires_grad_()
    bias = torch.from_numpy(init.bias.copy()).requires_grad_()
    opt = torch.optim.Adam([weight, bias], lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        out = x @ weight + bias
        if task == "segmentation":
            loss = F.cross_entropy(out, target, ignore_index=ignore_index)
        else:
            loss = F.mse_loss(F.softplus(out[:, 0]), target.to(out.dtype))
        loss.backward()
        opt.step()
    return ProbeWeights(weight.detach().numpy().copy(), bias.detach().numpy().copy(), task)


def _valid_pairs(pred, gt, ignore_index):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    valid = gt != ignore_index
    return pred[valid], gt[valid]


def confusion_matrix(pred, gt, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """``[gt, pred]`` pixel counts; summable across images in any order."""
    p, g = _valid_pairs(pred, gt, ignore_index)
    p, g = p.astype(np.int64), g.astype(np.int64)
    for name, arr in (("prediction", p), ("ground truth", g)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValidationError(f"{name} has class indices outside [0, {num_classes})")
    counts = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def miou_from_confusion(conf: np.ndarray) -> float:
    tp = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(1)
    union = gt_count + conf.sum(0) - tp
    present = gt_count > 0
    if not present.any():
        raise ValidationError("no labeled pixels")
    return float(np.mean(tp[present] / union[present]))


def miou(pred, gt, num_classes: int, ignore_index: int = IGNORE_INDEX) -> float:
    """Mean IoU over the classes that occur in ``gt``."""
    return miou_from_confusion(confusion_matrix(pred, gt, num_classes, ignore_index))


def pixel_accuracy(pred, gt, ignore_index: int = IGNORE_INDEX) -> float:
    p, g = _valid_pairs(pred, gt, ignore_index)
    if g.size == 0:
        raise ValidationError("accuracy is undefined when every pixel is ignored")
    return float(np.mean(p == g))


def depth_metrics(pred, gt, mode: str = "absolute", valid=None) -> MetricReport:
    """RMSE and delta_1 (ratio threshold 1.25), optionally after scale-shift alignment.

    In ``relative`` mode ``s * pred + t`` is fit to ``gt`` by least squares
    first; a constant prediction falls back to scale-only alignment. Aligned
    predictions that are not positive count as delta_1 failures.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    mask = np.ones(gt.shape, bool) if valid is None else np.asarray(valid, bool)
    p, g = pred[mask], gt[mask]
    if g.size == 0:
        raise ValidationError("no valid depth pixels")
    if np.any(g <= 0):
        raise ValidationError("ground-truth depth must be positive on the valid mask")
    notes = {"alignment": "none"}
    if mode == "relative":
        if np.ptp(p) > 0:
            A = np.stack([p, np.ones_like(p)], axis=1)
            (s, t), *_ = np.linalg.lstsq(A, g, rcond=None)
            notes["alignment"] = "scale_shift"
        else:
            denom = float(p @ p)
            s, t = (float(p @ g) / denom if denom > 0 else 0.0), 0.0
            notes["alignment"] = "scale_only"
        p = s * p + t
        notes["scale"], notes["shift"] = repr(float(s)), repr(float(t))
    elif mode != "absolute":
        raise ValidationError(f"unknown depth mode {mode!r}")
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    delta1 = float(np.mean((p > 0) & (ratio < 1.25)))
    return MetricReport("depth", {"rmse": rmse, "delta1": delta1}, notes)


# --- synthetic probing data ---------------------------------------------------


@dataclass
class ProbeSample:
    image: np.ndarray
    features: np.ndarray  # low-res input features
    labels: np.ndarray  # labels on the high-res grid
    lowres_labels: np.ndarray  # the same rule applied to the low-res features


def label_probe(feature_dim: int, num_classes: int, seed: int = 0) -> ProbeWeights:
    """The fixed random linear map whose argmax defines synthetic segmentation labels."""
    rng = np.random.default_rng(seed)
    matrix = rng.standard_normal((feature_dim, num_classes))
    return ProbeWeights(matrix, rng.standard_normal(num_classes) * 0.1, "segmentation")


def make_probe_dataset(
    count: int,
    task: str = "segmentation",
    encoder: EncoderConfig | None = None,
    image_size: int = 64,
    lowres_size: int = 32,
    num_classes: int = 4,
    seed: int = 0,
) -> list[ProbeSample]:
    """Synthetic images whose labels are a fixed function of dense-oracle features.

    Low-res features come from the image rendered at ``lowres_size``; labels live
    on the ``image_size / P`` grid of exact patch features. Segmentation labels
    are the argmax of a fixed random linear map; depth is a softplus of a fixed
    linear map scaled by a smooth per-image ramp.
    """
    _check_task(task)
    if count < 1:
        raise ValidationError("count must be positive")
    enc = encoder or EncoderConfig()
    P = enc.patch_size
    out = []
    for i, img in enumerate(make_dataset(count, image_size, seed=seed + 7_919)):
        p = encode(resize_bilinear(img, lowres_size, lowres_size), enc)
        hi = encode_dense(img, enc, P)
        if task == "segmentation":
            rule = label_probe(hi.shape[-1], num_classes, seed)
            lab, low = rule.predict(hi), rule.predict(p)
        else:
            a = np.random.default_rng(seed).standard_normal(hi.shape[-1]) / np.sqrt(hi.shape[-1])
            angle = np.random.default_rng([seed, i]).uniform(0, 2 * np.pi)

            def depth(f):
                n = f.shape[0]
                ys, xs = (np.mgrid[0:n, 0:n] + 0.5) / n
                ramp = 1.0 + 0.25 * (np.cos(angle) * xs + np.sin(angle) * ys)
                return np.logaddexp(0.0, f @ a + 1.0) * ramp

            lab, low = depth(hi), depth(p)
        out.append(ProbeSample(img, p, lab, low))
    return out


# --- upsampler evaluation -------------------------------------------------------


def nearest_forward(p, image, out_size):
    return resize_nearest(p, *out_size)


def bilinear_forward(p, image, out_size):
    return resize_bilinear(p, *out_size)


def model_forward(model):
    from agnostic_upsampler.upsampler import upsample

    def forward(p, image, out_size):
        return upsample(model, image, p, out_size=tuple(out_size))

    return forward


def _metrics(task, preds, gts, num_classes, ignore_index) -> MetricReport:
    if task == "segmentation":
        conf = sum(confusion_matrix(p, g, num_classes, ignore_index) for p, g in zip(preds, gts))
        total = conf.sum()
        if total == 0:
            raise ValidationError("every pixel is ignored")
        return MetricReport(task, {"miou": miou_from_confusion(conf), "accuracy": float(np.trace(conf) / total)})
    p = np.concatenate([np.ravel(x) for x in preds])
    g = np.concatenate([np.ravel(x) for x in gts])
    return depth_metrics(p, g, "absolute")


def evaluate_upsampler(
    forward,
    probe: ProbeWeights,
    dataset: list[ProbeSample],
    target_resolution: tuple[int, int] | None = None,
    num_classes: int | None = None,
    ignore_index: int = IGNORE_INDEX,
) -> MetricReport:
    """Upsample each sample's features, apply ``probe`` per pixel, score against labels.

    ``forward(p, image, out_size)`` returns ``[out_h, out_w, c]`` features;
    ``out_size`` defaults to the label grid. Labels are nearest-resized when a
    different ``target_resolution`` is requested.
    """
    if not dataset:
        raise ValidationError("dataset is empty")
    num_classes = num_classes or probe.matrix.shape[1]
    preds, gts = [], []
    for s in dataset:
        size = tuple(target_resolution) if target_resolution is not None else s.labels.shape
        feats = forward(s.features, s.image, size)
        if feats.shape[2] != probe.in_dim:
            raise ShapeError(f"features have {feats.shape[2]} channels, probe expects {probe.in_dim}")
        labels = s.labels
        if labels.shape != size:
            labels = resize_nearest(labels[..., None].astype(np.float64), *size)[..., 0]
            if probe.task == "segmentation":
                labels = labels.astype(np.int64)
        preds.append(probe.predict(feats))
        gts.append(labels)
    return _metrics(probe.task, preds, gts, num_classes, ignore_index)


def run_protocol(
    forward,
    train_set: list[ProbeSample],
    test_set: list[ProbeSample],
    protocol: str = "probe",
    task: str = "segmentation",
    num_classes: int | None = None,
    steps: int = 500,
    lr: float = 1e-2,
    seed: int = 0,
) -> tuple[MetricReport, ProbeWeights]:
    if not train_set or not test_set:
        raise ValidationError("train and test sets must be non-empty")
    if protocol == "probe":
        feats = [forward(s.features, s.image, s.labels.shape) for s in train_set]
        labels = [s.labels for s in train_set]
    elif protocol == "preserve":
        feats = [s.features for s in train_set]
        labels = [s.lowres_labels for s in train_set]
    else:
        raise ValidationError(f"unknown protocol {protocol!r}")
    probe = fit_linear_probe(feats, labels, task, num_classes=num_classes, steps=steps, lr=lr, seed=seed)
    report = evaluate_upsampler(forward, probe, test_set, num_classes=num_classes)
    report.notes["protocol"] = protocol
    return report, probe


# --- PCA visualization -------------------------------------------------------------


def pca_rgb(features, basis_source=None, rel_tol: float = 1e-6) -> np.ndarray:
    """Project features onto the top-3 principal axes and min-max each to [0, 1].

    The axes (and mean) come from ``basis_source`` when given, so several maps
    can share one color basis. Each axis is signed so its largest-magnitude
    loading is positive. Axes with negligible variance render as 0.5.
    """
    fmap = validate_feature_map(features)
    src = fmap if basis_source is None else validate_feature_map(basis_source, "basis source")
    c = fmap.shape[2]
    if c < 3:
        raise ShapeError(f"need at least 3 channels, got {c}")
    if src.shape[2] != c:
        raise ShapeError("basis source channel count differs from features")
    X = src.reshape(-1, c).astype(np.float64)
    if X.shape[0] < 3:
        raise ValidationError("need at least 3 spatial samples")
    mean = X.mean(0)
    _, svals, vt = np.linalg.svd(X - mean, full_matrices=False)
    axes = vt[:3]
    signs = np.sign(axes[np.arange(3), np.abs(axes).argmax(1)])
    axes = axes * np.where(signs == 0, 1.0, signs)[:, None]
    top = svals[0] if svals.size else 0.0

    proj = (fmap.reshape(-1, c).astype(np.float64) - mean) @ axes.T
    out = np.full_like(proj, 0.5)
    for j in range(3):
        if j >= svals.size or svals[j] <= rel_tol * top or top == 0:
            continue
        lo, hi = proj[:, j].min(), proj[:, j].max()
        if hi - lo > rel_tol * top:
            out[:, j] = (proj[:, j] - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0).reshape(fmap.shape[0], fmap.shape[1], 3).astype(np.float32)
