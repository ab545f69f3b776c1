"""Metrics, loss, SGD training step, ensemble baselines and attention export."""

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .pipeline import EpisodeFeatures, forward
from .tensor import NonFiniteError, ShapeError, Tensor

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


def iou(pred, gt):
    """|pred & gt| / |pred | gt|, defined as 1 when both are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"iou shape mismatch {pred.shape} vs {gt.shape}")
    tp, fp, fn, _ = kernels.confusion(pred, gt)
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


@dataclass
class MetricAccumulator:
    """Integer intersection/union counts per class plus class-agnostic FG/BG totals."""

    inter: dict = field(default_factory=dict)
    union: dict = field(default_factory=dict)
    fg_inter: int = 0
    fg_union: int = 0
    bg_inter: int = 0
    bg_union: int = 0
    episode_ious: list = field(default_factory=list)

    def update(self, pred, gt, class_id):
        pred = np.asarray(pred, dtype=bool)
        gt = np.asarray(gt, dtype=bool)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
        tp, fp, fn, tn = kernels.confusion(pred, gt)
        self.inter[class_id] = self.inter.get(class_id, 0) + tp
        self.union[class_id] = self.union.get(class_id, 0) + tp + fp + fn
        self.fg_inter += tp
        self.fg_union += tp + fp + fn
        self.bg_inter += tn
        self.bg_union += tn + fp + fn
        u = tp + fp + fn
        self.episode_ious.append((class_id, 1.0 if u == 0 else tp / u))

    def merge(self, other):
        """Combine two accumulators; counts add, episode records concatenate in order."""
        out = MetricAccumulator(dict(self.inter), dict(self.union))
        for c in other.inter:
            out.inter[c] = out.inter.get(c, 0) + other.inter[c]
            out.union[c] = out.union.get(c, 0) + other.union[c]
        out.fg_inter = self.fg_inter + other.fg_inter
        out.fg_union = self.fg_union + other.fg_union
        out.bg_inter = self.bg_inter + other.bg_inter
        out.bg_union = self.bg_union + other.bg_union
        out.episode_ious = self.episode_ious + other.episode_ious
        return out

    @property
    def episodes(self):
        return len(self.episode_ious)

    def class_ious(self, mode="accumulate"):
        if mode == "accumulate":
            return {c: self.inter[c] / self.union[c] for c in sorted(self.inter) if self.union[c] > 0}
        if mode == "episode_mean":
            per = {}
            for c, v in self.episode_ious:
                per.setdefault(c, []).append(v)
            return {c: float(np.mean(v)) for c, v in sorted(per.items())}
        raise ValueError(f"unknown mIoU mode {mode!r}")


def miou_finalize(acc, classes=None, mode="accumulate"):
    """Mean over classes of accumulated intersection / accumulated union.

    Classes never seen (or with zero union) are dropped with a warning.
    ``mode="episode_mean"`` averages per-episode IoUs within each class instead.
    """
    per = acc.class_ious(mode)
    classes = sorted(per) if classes is None else sorted(classes)
    missing = [c for c in classes if c not in per]
    if missing:
        warnings.warn(f"classes {missing} have no accumulated union and are excluded from mIoU", stacklevel=2)
    kept = [per[c] for c in classes if c in per]
    if not kept:
        raise ValueError("no class with a non-empty union")
    return float(np.mean(kept))


def fb_iou(acc):
    if acc.episodes == 0:
        raise ValueError("empty accumulator")
    fg = acc.fg_inter / acc.fg_union if acc.fg_union else 1.0
    bg = acc.bg_inter / acc.bg_union if acc.bg_union else 1.0
    return 0.5 * (fg + bg)


def bce_loss(p, y, eps=BCE_EPS):
    """Mean binary cross-entropy of probabilities p against binary labels y."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    if p.shape != y.shape:
        raise ShapeError(f"bce shape mismatch {p.shape} vs {y.shape}")
    y = y.astype(p.dtype)
    pc = T.clip(p, eps, 1.0 - eps)
    pos = T.mul(T.log(pc), Tensor(y))
    neg = T.mul(T.log(T.affine(pc, -1.0, 1.0)), Tensor(1.0 - y))
    return T.affine(T.mean_all(T.add(pos, neg)), -1.0, 0.0)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    """Weights, SGD momentum buffers and hyperparameters."""

    weights: object
    momentum_buffers: dict
    step: int = 0
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4

    @classmethod
    def fresh(cls, weights, lr=1e-3, momentum=0.9, weight_decay=1e-4):
        bufs = {k: np.zeros_like(v.data) for k, v in weights.params.items()}
        return cls(weights, bufs, 0, lr, momentum, weight_decay)


def episode_loss(weights, feats, **options):
    prob, _ = forward(feats, weights, **options)
    return bce_loss(prob, feats.query_mask)


def train_step(state, episodes, loss_fn=episode_loss, **options):
    """One SGD step on the mean loss of ``episodes``; returns that loss.

    v <- momentum * v + (grad + wd * w);  w <- w - lr * v.
    A non-finite loss or gradient raises NonFiniteError and leaves the state untouched.
    """
    if isinstance(episodes, EpisodeFeatures):
        episodes = [episodes]
    names = state.weights.names()
    leaves = [state.weights.params[k] for k in names]
    total = [np.zeros_like(p.data) for p in leaves]
    loss_sum = 0.0
    for feats in episodes:
        loss = loss_fn(state.weights, feats, **options)
        grads = T.backward(loss, leaves)
        for acc, g in zip(total, grads):
            acc += g
        loss_sum += loss.item()
    scale = 1.0 / len(episodes)
    mean_loss = loss_sum * scale
    if not np.isfinite(mean_loss) or not all(np.isfinite(g).all() for g in total):
        raise NonFiniteError(f"non-finite loss/gradient at step {state.step} (loss={mean_loss})")
    dt = leaves[0].dtype.type
    lr, mom, wd = dt(state.lr), dt(state.momentum), dt(state.weight_decay)
    for name, p, g in zip(names, leaves, total):
        v = state.momentum_buffers[name]
        v *= mom
        v += g * dt(scale) + wd * p.data
        p.data -= lr * v
    state.step += 1
    return mean_loss


# --------------------------------------------------------------------------
# ensembles and attention export


def ensemble_predict(strategy, maps, threshold=0.5):
    """Merge per-support 1-shot probability maps into one binary mask.

    ``vote``: strict per-pixel majority of thresholded maps (ties go to background).
    ``average``: mean probability, then threshold.
    """
    maps = [np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64) for m in maps]
    if not maps:
        raise ValueError("ensemble needs at least one map")
    if any(m.shape != maps[0].shape for m in maps):
        raise ShapeError("ensemble maps must share a shape")
    stack = np.stack(maps)
    if strategy == "vote":
        votes = (stack >= threshold).sum(axis=0)
        return 2 * votes > len(maps)
    if strategy == "average":
        return stack.mean(axis=0) >= threshold
    raise ValueError(f"unknown ensemble strategy {strategy!r}")


def export_attention_summary(record, query_pixel, input_size, target_size=None, n=None):
    """Average attention of one query pixel over every recorded (scale, layer, head).

    ``query_pixel`` is (row, col) at input resolution; each scale uses the token
    covering it. Every row is reshaped to [n, h_i, w_i] support geometry and
    bilinearly upsampled to ``target_size`` before averaging. Returns [n, H, W].
    """
    if not record:
        raise ValueError("no recorded attention; run forward with record_attention=True")
    H, W = input_size
    th, tw = target_size or input_size
    r, c = query_pixel
    if not (0 <= r < H and 0 <= c < W):
        raise ValueError(f"pixel {query_pixel} outside {H}x{W}")
    total = None
    for (stride, _layer, _head), weights in sorted(record.items()):
        h, w = H // stride, W // stride
        row = weights[(r // stride) * w + (c // stride)]
        count = row.size // (h * w)
        if n is not None and count != n:
            raise ShapeError(f"recorded map holds {count} supports, expected {n}")
        grid = row.reshape(count, h, w).astype(np.float64)
        up = np.stack([kernels.resize_forward(g[..., None], th, tw)[..., 0] for g in grid])
        total = up if total is None else total + up
    return total / len(record)


def report_json(report):
    """Stable serialization of a metric report."""
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
