"""Frozen stand-in feature extractor and feature-file import/export.

The stub is a plain stack of 3x3 conv + ReLU layers with seeded weights. Each
scale starts with a stride-2 conv and adds stride-1 convs until it has L_i
layers; every layer's output is exposed. Scales must be consecutive powers of
two starting at 1/4, and the input must divide by the coarsest stride.
"""

import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .dtc import DTCError, read_dtc, write_dtc

STRIDES = (4, 8, 16, 32)
FEATURE_MANIFEST_VERSION = 1


def scale_key(stride):
    return f"1/{stride}"


def parse_scale(key):
    num, _, den = str(key).partition("/")
    if num != "1" or not den.isdigit():
        raise ValueError(f"bad scale key {key!r}; expected '1/<stride>'")
    return int(den)


class FeatureManifestError(ValueError):
    def __init__(self, message, scale=None):
        super().__init__(message)
        self.scale = scale


@dataclass(frozen=True)
class StubBackboneConfig:
    seed: int = 0
    channels: dict = field(default_factory=lambda: {4: 16, 8: 32, 16: 64, 32: 128})
    layers: dict = field(default_factory=lambda: {4: 1, 8: 2, 16: 2, 32: 1})
    stem_channels: int = 8

    def key(self):
        return (self.seed, tuple(sorted(self.channels.items())), tuple(sorted(self.layers.items())), self.stem_channels)

    def to_dict(self):
        return {
            "seed": self.seed,
            "channels": {scale_key(s): c for s, c in sorted(self.channels.items())},
            "layers": {scale_key(s): n for s, n in sorted(self.layers.items())},
            "stem_channels": self.stem_channels,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            seed=int(d["seed"]),
            channels={parse_scale(k): int(v) for k, v in d["channels"].items()},
            layers={parse_scale(k): int(v) for k, v in d["layers"].items()},
            stem_channels=int(d.get("stem_channels", 8)),
        )


@dataclass
class MultiScaleFeatures:
    """stride -> list of L_i feature maps [h_i, w_i, c_i] (numpy, float32 unless cast)."""

    levels: dict

    def last(self, stride):
        return self.levels[stride][-1]

    def shape_table(self):
        return {s: [f.shape for f in fs] for s, fs in sorted(self.levels.items())}

    def astype(self, dtype):
        return MultiScaleFeatures({s: [f.astype(dtype) for f in fs] for s, fs in self.levels.items()})


@functools.lru_cache(maxsize=8)
def _stub_weights(key):
    seed, channels, layers, stem = key
    channels, layers = dict(channels), dict(layers)
    rng = np.random.default_rng([seed, 4])
    plan = [("stem", 3, stem, 2)]
    cin = stem
    for s in sorted(layers):
        for layer in range(layers[s]):
            plan.append(((s, layer), cin, channels[s], 2 if layer == 0 else 1))
            cin = channels[s]
    weights = []
    for tag, ci, co, stride in plan:
        bound = math.sqrt(6.0 / (9 * ci))
        w = rng.uniform(-bound, bound, (3, 3, ci, co)).astype(np.float32)
        weights.append((tag, w, np.zeros(co, np.float32), stride))
    return tuple(weights)


def extract_features(image, cfg=None):
    """Multi-scale multi-layer features of an [H,W,3] image in [0,1]."""
    cfg = cfg or StubBackboneConfig()
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise T.ShapeError(f"image must be [H,W,3], got {image.shape}")
    h, w, _ = image.shape
    top = max(cfg.layers)
    if h % top or w % top:
        raise T.ShapeError(f"image size {h}x{w} must be divisible by {top}")
    levels = {s: [] for s in sorted(cfg.layers)}
    with T.no_grad():
        x = T.Tensor(image - 0.5)
        for tag, wk, bk, stride in _stub_weights(cfg.key()):
            x = T.relu(T.conv2d(x, T.Tensor(wk), T.Tensor(bk), stride=stride, pad=1))
            if tag != "stem":
                levels[tag[0]].append(x.data)
    return MultiScaleFeatures(levels)


def export_features(features, directory, image_id):
    """Write features as DTC files plus ``features.json``; returns the manifest path."""
    directory = Path(directory)
    scales = {}
    for s, maps in sorted(features.levels.items()):
        names = []
        for layer, f in enumerate(maps):
            name = f"feat_s{s}_l{layer}"
            write_dtc(directory / name, f)
            names.append(name)
        scales[scale_key(s)] = names
    manifest = {"version": FEATURE_MANIFEST_VERSION, "image_id": image_id, "scales": scales}
    path = directory / "features.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def import_features(manifest_path, config=None, dtype="f32"):
    """Load features listed in a manifest and validate them.

    ``config`` (a ModelConfig or anything with ``channels``, ``layers`` and
    ``input_size``) adds a check of the shape table against the model.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
        scales = manifest["scales"]
    except FileNotFoundError:
        raise
    except (ValueError, KeyError) as exc:
        raise FeatureManifestError(f"corrupt feature manifest {manifest_path}: {exc}") from exc
    levels = {}
    for key, names in scales.items():
        s = parse_scale(key)
        maps = []
        for name in names:
            try:
                maps.append(read_dtc(manifest_path.parent / name, expect_dtype=dtype))
            except DTCError as exc:
                raise FeatureManifestError(str(exc), scale=key) from exc
        levels[s] = maps
    feats = MultiScaleFeatures(levels)
    for s, maps in levels.items():
        if not maps:
            raise FeatureManifestError(f"scale {scale_key(s)} lists no layers", scale=scale_key(s))
        ref = maps[0].shape
        if any(m.ndim != 3 or m.shape != ref for m in maps):
            raise FeatureManifestError(f"inconsistent layer shapes at scale {scale_key(s)}", scale=scale_key(s))
    if config is not None:
        validate_features(feats, config)
    return feats


def validate_features(feats, config):
    H, W = config.input_size
    for s in sorted(config.layers):
        key = scale_key(s)
        if s not in feats.levels:
            raise FeatureManifestError(f"features missing scale {key}", scale=key)
        maps = feats.levels[s]
        if len(maps) != config.layers[s]:
            raise FeatureManifestError(
                f"scale {key} has {len(maps)} layers, model expects {config.layers[s]}", scale=key
            )
        want = (H // s, W // s, config.channels[s])
        for m in maps:
            if m.shape != want:
                raise FeatureManifestError(f"scale {key} map shape {m.shape}, model expects {want}", scale=key)
