"""Full forward pass: multi-scale attention blocks, conv fusion pyramid, skip mixer.

Scales are written as integer strides (8 means 1/8 of the input size).
Feature maps are channel-last numpy arrays until they enter the graph.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from . import tensor as T
from .attention import ROLES, AttentionParams, dcama_unit
from .backbone import MultiScaleFeatures, StubBackboneConfig, extract_features, parse_scale, scale_key
from .dtc import read_dtc, write_dtc
from .tensor import ShapeError, Tensor

WEIGHTS_VERSION = 1


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple = (96, 96)
    attended_strides: tuple = (8, 16, 32)
    skip_strides: tuple = (4, 8)
    layers: dict = field(default_factory=lambda: {4: 1, 8: 2, 16: 2, 32: 1})
    channels: dict = field(default_factory=lambda: {4: 16, 8: 32, 16: 64, 32: 128})
    d_model: int = 64
    head_count: int = 4
    fusion_widths: tuple = (64, 96, 128)
    mixer_widths: tuple = (64, 32, 16)
    backbone_seed: int = 0

    def __post_init__(self):
        if 4 in self.attended_strides:
            raise ValueError("the 1/4 scale is never cross-attended")
        if not self.attended_strides:
            raise ValueError("need at least one attended scale")
        for s in tuple(self.attended_strides) + tuple(self.skip_strides):
            if s not in self.layers or s not in self.channels:
                raise ValueError(f"scale {scale_key(s)} has no backbone layers/channels")
        H, W = self.input_size
        top = max(self.layers)
        if H % top or W % top:
            raise ValueError(f"input {H}x{W} must be divisible by the coarsest stride {top}")
        if self.d_model % self.head_count:
            raise ValueError("d_model must be divisible by head_count")
        if len(self.fusion_widths) != 3 or len(self.mixer_widths) != 3:
            raise ValueError("fusion and mixer schedules have three entries each")

    @property
    def fusion_channels(self):
        return self.fusion_widths[-1]

    def spatial(self, stride):
        H, W = self.input_size
        return H // stride, W // stride

    def backbone(self):
        return StubBackboneConfig(seed=self.backbone_seed, channels=dict(self.channels), layers=dict(self.layers))

    def kv_tokens(self, n):
        """Key/value token count over all attended scales for n supports."""
        return n * sum(h * w for h, w in (self.spatial(s) for s in self.attended_strides))

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["attended_strides"] = list(self.attended_strides)
        d["skip_strides"] = list(self.skip_strides)
        d["fusion_widths"] = list(self.fusion_widths)
        d["mixer_widths"] = list(self.mixer_widths)
        d["layers"] = {scale_key(s): v for s, v in sorted(self.layers.items())}
        d["channels"] = {scale_key(s): v for s, v in sorted(self.channels.items())}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("input_size", "attended_strides", "skip_strides", "fusion_widths", "mixer_widths"):
            if key in d:
                d[key] = tuple(d[key])
        for key in ("layers", "channels"):
            if key in d:
                d[key] = {parse_scale(k): int(v) for k, v in d[key].items()}
        return cls(**d)


# --------------------------------------------------------------------------
# weights


def _conv_param(rng, cin, cout, dtype, gain=1.0):
    bound = gain * math.sqrt(6.0 / (9 * cin))
    w = rng.uniform(-bound, bound, (3, 3, cin, cout)).astype(dtype)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(cout, dtype), requires_grad=True)


def mixer_in_channels(config):
    return config.fusion_channels + sum(2 * config.channels[s] for s in config.skip_strides)


class ModelWeights:
    """All trainable parameters, keyed by name. The stub backbone is not in here."""

    def __init__(self, config, params):
        self.config = config
        self.params = dict(params)
        self._check()

    def _check(self):
        expected = _expected_shapes(self.config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigMismatchError(f"weights do not match config (missing {missing[:4]}, unexpected {extra[:4]})")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigMismatchError(f"{name}: shape {self.params[name].shape}, config expects {shape}")

    @classmethod
    def init(cls, config, seed, dtype=np.float32):
        rng = np.random.default_rng([seed, 1])
        params = {}
        att = AttentionParams.init(
            {s: config.channels[s] for s in config.attended_strides},
            config.layers,
            config.d_model,
            config.head_count,
            rng,
            dtype,
        )
        params.update(att.named())
        for name, (cin, cout) in _conv_plan(config):
            gain = 0.1 if name == "mix/2/1" else 1.0
            params[f"{name}/w"], params[f"{name}/b"] = _conv_param(rng, cin, cout, dtype, gain)
        return cls(config, params)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return sorted(self.params)

    def attention(self):
        att = AttentionParams(self.config.head_count, self.config.d_model)
        for s in self.config.attended_strides:
            for layer in range(self.config.layers[s]):
                att.table[(s, layer)] = {r: self.params[f"attn/{s}/{layer}/{r}"] for r in ROLES}
        return att

    def astype(self, dtype):
        return ModelWeights(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()})

    def copy(self):
        return self.astype(self.dtype)

    def save(self, directory, seed=None, extra=None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        attention = []
        for name in self.names():
            rel = "p_" + name.replace("/", "_")
            write_dtc(directory / rel, self.params[name].data)
            files[name] = rel
            if name.startswith("attn/"):
                _, s, layer, role = name.split("/")
                attention.append({"scale": scale_key(int(s)), "layer": int(layer), "role": role, "file": rel})
        manifest = {
            "version": WEIGHTS_VERSION,
            "config": self.config.to_dict(),
            "seed": seed,
            "params": files,
            "attention": attention,
        }
        if extra:
            manifest.update(extra)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        path = directory / "manifest.json"
        if not path.is_file():
            raise FileNotFoundError(f"missing weights manifest: {path}")
        manifest = json.loads(path.read_text())
        if manifest.get("version") != WEIGHTS_VERSION:
            raise ConfigMismatchError(f"weights version {manifest.get('version')!r}, expected {WEIGHTS_VERSION}")
        config = ModelConfig.from_dict(manifest["config"])
        params = {name: Tensor(read_dtc(directory / rel), requires_grad=True) for name, rel in manifest["params"].items()}
        return cls(config, params)


def _conv_plan(config):
    """(name, (cin, cout)) for every 3x3 conv, in a fixed order."""
    plan = []
    w1, w2, w3 = config.fusion_widths
    coarse = max(config.attended_strides)
    for s in sorted(config.attended_strides, reverse=True):
        for k, (ci, co) in enumerate([(config.layers[s], w1), (w1, w2), (w2, w3)]):
            plan.append((f"fuse/{s}/{k}", (ci, co)))
        if s != coarse:
            for k in range(3):
                plan.append((f"merge/{s}/{k}", (w3, w3)))
    m1, m2, m3 = config.mixer_widths
    chans = [(mixer_in_channels(config), m1), (m1, m1), (m1, m2), (m2, m2), (m2, m3), (m3, 2)]
    for idx, (ci, co) in enumerate(chans):
        plan.append((f"mix/{idx // 2}/{idx % 2}", (ci, co)))
    return plan


def _expected_shapes(config):
    shapes = {}
    for s in config.attended_strides:
        c = config.channels[s]
        for layer in range(config.layers[s]):
            shapes[f"attn/{s}/{layer}/Wq"] = (c, config.d_model)
            shapes[f"attn/{s}/{layer}/Wk"] = (c, config.d_model)
            shapes[f"attn/{s}/{layer}/bq"] = (config.d_model,)
            shapes[f"attn/{s}/{layer}/bk"] = (config.d_model,)
    for name, (ci, co) in _conv_plan(config):
        shapes[f"{name}/w"] = (3, 3, ci, co)
        shapes[f"{name}/b"] = (co,)
    return shapes


# --------------------------------------------------------------------------
# building blocks


def conv_block(x, weights, name, relu=True):
    y = T.conv2d(x, weights[f"{name}/w"], weights[f"{name}/b"], stride=1, pad=1)
    return T.relu(y) if relu else y


def downsample_mask(m, stride):
    """Bilinear resize of a soft [H,W,1] mask to 1/stride; values stay soft in [0,1]."""
    arr = m.data if isinstance(m, Tensor) else np.asarray(m)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("mask values must lie in [0, 1]")
    H, W, _ = arr.shape
    if H % stride or W % stride:
        raise ShapeError(f"mask {H}x{W} not divisible by stride {stride}")
    with T.no_grad():
        return T.bilinear_resize(Tensor(arr), H // stride, W // stride)


def zero_background_support(features, mask):
    """Zero feature pixels whose (soft) mask value is below 0.5."""
    f = features if isinstance(features, Tensor) else Tensor(features)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.ndim == 2:
        m = m[..., None]
    if m.shape != f.shape[:2] + (1,):
        raise ShapeError(f"mask {m.shape} does not match features {f.shape}")
    keep = np.broadcast_to((m >= 0.5).astype(f.dtype), f.shape)
    return T.mul(f, Tensor(np.ascontiguousarray(keep)))


def multilayer_dcama_block(stride, query_layers, support_layers, support_masks, weights, record=None):
    """One attention unit per layer at this scale, concatenated along channels in layer order.

    ``support_layers[k][l]`` is layer l of support k; ``support_masks[k]`` is
    that support's mask at this scale.
    """
    if not query_layers:
        raise ShapeError(f"no layer features at scale {scale_key(stride)}")
    att = weights.attention() if isinstance(weights, ModelWeights) else weights
    outs = []
    for layer, fq in enumerate(query_layers):
        pairs = []
        for k, layers in enumerate(support_layers):
            if layer >= len(layers):
                raise ShapeError(f"support {k} is missing layer {layer} at scale {scale_key(stride)}")
            pairs.append((layers[layer], support_masks[k]))
        rec = [] if record is not None else None
        outs.append(dcama_unit(fq, pairs, att.unit(stride, layer), att.head_count, rec))
        if record is not None:
            for head, a in enumerate(rec):
                record[(stride, layer, head)] = a
    return T.concat_channels(outs)


def pyramid_fusion(masks, weights, config, active=None):
    """Coarse-to-fine fusion of aggregated masks into a 128-channel map at the finest attended scale.

    ``masks`` maps stride to [h_i, w_i, L_i]. ``active`` restricts the pyramid
    to a subset of scales (the others contribute nothing).
    """
    strides = [s for s in sorted(config.attended_strides, reverse=True) if active is None or s in active]
    if not strides:
        raise ValueError("no active scales")
    coarse = max(config.attended_strides)
    acc = None
    for s in strides:
        if s not in masks:
            raise ShapeError(f"missing aggregated mask for scale {scale_key(s)}")
        if masks[s].shape[:2] != config.spatial(s):
            raise ShapeError(f"scale {scale_key(s)} mask {masks[s].shape} inconsistent with input size")
        x = masks[s]
        for k in range(3):
            x = conv_block(x, weights, f"fuse/{s}/{k}")
        if acc is not None:
            x = T.add(x, T.bilinear_resize(acc, *x.shape[:2]))
            if s == coarse:
                raise ShapeError("coarsest scale cannot merge a coarser level")
            for k in range(3):
                x = conv_block(x, weights, f"merge/{s}/{k}")
        acc = x
    h, w = config.spatial(min(config.attended_strides))
    if acc.shape[:2] != (h, w):
        acc = T.bilinear_resize(acc, h, w)
    return acc


def mask_feature_mixer(fused, query_skips, support_skips, weights, config):
    """Concatenate fused masks with skip features at 1/4 scale, then three conv blocks to 2 logits."""
    H, W = config.input_size
    h4, w4 = H // 4, W // 4
    parts = [T.bilinear_resize(fused, h4, w4)]
    for s in sorted(config.skip_strides, reverse=True):
        if s not in query_skips or s not in support_skips:
            raise ShapeError(f"missing skip features at scale {scale_key(s)}")
        parts.append(T.bilinear_resize(query_skips[s], h4, w4))
        parts.append(T.bilinear_resize(support_skips[s], h4, w4))
    x = T.concat_channels(parts)
    x = conv_block(x, weights, "mix/0/0")
    x = conv_block(x, weights, "mix/0/1")
    x = T.bilinear_resize(x, 2 * h4, 2 * w4)
    x = conv_block(x, weights, "mix/1/0")
    x = conv_block(x, weights, "mix/1/1")
    x = T.bilinear_resize(x, H, W)
    x = conv_block(x, weights, "mix/2/0")
    return conv_block(x, weights, "mix/2/1", relu=False)


def foreground_probability(logits):
    H, W, _ = logits.shape
    p = T.softmax_rows(T.reshape(logits, (H * W, 2)))
    return T.reshape(T.slice_last(p, 1, 2), (H, W))


# --------------------------------------------------------------------------
# forward


@dataclass
class EpisodeFeatures:
    """Backbone features and masks of one episode; what the trainable model consumes."""

    query: MultiScaleFeatures
    supports: list
    support_masks: list
    query_mask: np.ndarray | None = None
    class_id: int | None = None

    @property
    def n(self):
        return len(self.supports)


@dataclass
class ForwardArtifacts:
    aggregated: dict
    logits: Tensor
    attention: dict | None = None


class FeatureCache:
    """Backbone features per dataset image, computed once."""

    def __init__(self, config):
        self.config = config
        self._store = {}

    def get(self, key, image):
        if key is None:
            return extract_features(image, self.config.backbone())
        if key not in self._store:
            self._store[key] = extract_features(image, self.config.backbone())
        return self._store[key]


def prepare_episode(episode, config, cache=None):
    cache = cache or FeatureCache(config)
    ids = episode.support_ids or [None] * episode.n
    supports = [cache.get(k, img) for k, (img, _) in zip(ids, episode.support)]
    query = cache.get(episode.query_id, episode.query[0])
    return EpisodeFeatures(
        query=query,
        supports=supports,
        support_masks=[np.asarray(m, dtype=np.float32) for _, m in episode.support],
        query_mask=np.asarray(episode.query[1]),
        class_id=episode.class_id,
    )


def forward(episode, weights, config=None, zero_background=False, record_attention=False, active_scales=None):
    """Foreground probability [H,W] for the query, plus intermediate artifacts.

    ``episode`` is an Episode (features extracted with the stub backbone) or
    precomputed EpisodeFeatures. Any n >= 1 runs through the same code.
    """
    config = config or weights.config
    if config != weights.config:
        raise ConfigMismatchError("weights were built for a different config")
    feats = episode if isinstance(episode, EpisodeFeatures) else prepare_episode(episode, config)
    if feats.n < 1:
        raise ShapeError("episode needs at least one support")
    dtype = weights.dtype
    H, W = config.input_size

    record = {} if record_attention else None
    aggregated = {}
    for s in config.attended_strides:
        if active_scales is not None and s not in active_scales:
            continue
        masks_s = [downsample_mask(Tensor(m.astype(dtype)[..., None]), s) for m in feats.support_masks]
        q_layers = [Tensor(f.astype(dtype)) for f in feats.query.levels[s]]
        s_layers = []
        for sup, m in zip(feats.supports, masks_s):
            layers = [Tensor(f.astype(dtype)) for f in sup.levels[s]]
            if zero_background:
                layers = [zero_background_support(f, m) for f in layers]
            s_layers.append(layers)
        aggregated[s] = multilayer_dcama_block(s, q_layers, s_layers, masks_s, weights, record)

    fused = pyramid_fusion(aggregated, weights, config, active=active_scales)
    q_skips, s_skips = {}, {}
    for s in config.skip_strides:
        q_skips[s] = Tensor(feats.query.last(s).astype(dtype))
        s_skips[s] = T.max_over_set([Tensor(sup.last(s).astype(dtype)) for sup in feats.supports])
    logits = mask_feature_mixer(fused, q_skips, s_skips, weights, config)
    if logits.shape != (H, W, 2):
        raise ShapeError(f"logits {logits.shape}, expected {(H, W, 2)}")
    prob = foreground_probability(logits)
    return prob, ForwardArtifacts(aggregated, logits, record)


def forward_one_shot(query_features, support_features, support_mask, weights, **options):
    """Single-support convenience entry; the same path as the n-shot forward with n = 1."""
    feats = EpisodeFeatures(query_features, [support_features], [np.asarray(support_mask, np.float32)])
    return forward(feats, weights, **options)


def predict_mask(prob):
    return (prob.data if isinstance(prob, Tensor) else np.asarray(prob)) >= 0.5


# --------------------------------------------------------------------------
# intermediate mask analysis


def otsu_threshold(values):
    """Otsu split on a 256-bin histogram over [min, max].

    Returns (foreground boolean array, last background bin, degenerate flag).
    Constant input is degenerate: everything is background.
    """
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if not hi > lo:
        return np.zeros(v.shape, dtype=bool), None, True
    idx, counts = kernels.histogram256(v, lo, hi)
    centers = lo + (np.arange(256) + 0.5) * (hi - lo) / 256
    total = counts.sum()
    w0 = np.cumsum(counts)[:-1] / total
    w1 = 1.0 - w0
    s0 = np.cumsum(counts * centers)[:-1]
    s1 = (counts * centers).sum() - s0
    c0 = np.cumsum(counts)[:-1]
    c1 = total - c0
    with np.errstate(invalid="ignore", divide="ignore"):
        mu0 = s0 / c0
        mu1 = s1 / c1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between = np.where((c0 > 0) & (c1 > 0), between, -1.0)
    k = int(np.argmax(between))
    return idx > k, k, False


def intermediate_mask_eval(aggregated, target_size):
    """Layer-sum, Otsu-binarize, resize to target and re-binarize at 0.5.

    Returns (binary mask [H,W], degenerate flag).
    """
    arr = aggregated.data if isinstance(aggregated, Tensor) else np.asarray(aggregated)
    if arr.ndim != 3 or arr.shape[2] < 1:
        raise ShapeError(f"aggregated masks must be [h,w,L>=1], got {arr.shape}")
    summed = arr.sum(axis=2)
    fg, _, degenerate = otsu_threshold(summed)
    H, W = target_size
    if degenerate:
        return np.zeros((H, W), dtype=bool), True
    up = kernels.resize_forward(fg.astype(np.float64)[..., None], H, W)[..., 0]
    return up >= 0.5, False
