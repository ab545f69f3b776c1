"""Cross query/support attention that aggregates a query mask from support mask values.

Feature maps are flattened to one token per pixel, shifted by a 1D sine/cosine
positional encoding over the raster index, and projected to query/key
vectors. The value of every support token is its (unprojected) mask value, so
each head's output is a convex combination of support mask values. Heads are
averaged with no output projection.

For n supports, tokens from all support images are stacked into one key/value
set. Positions restart at 0 for every support image, so a one-shot episode and
an n-shot episode built from copies of the same support see identical tokens.
"""

import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .dtc import read_dtc, write_dtc
from .tensor import ShapeError, Tensor

ROLES = ("Wq", "Wk", "bq", "bk")


@functools.lru_cache(maxsize=64)
def _pe_table(num_tokens, dim):
    pos = np.arange(num_tokens, dtype=np.float64)[:, None]
    i = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / dim)
    pe = np.empty((num_tokens, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.setflags(write=False)
    return pe


def positional_encoding(num_tokens, dim):
    """Sine/cosine encoding: PE[p, 2i] = sin(p / 10000^(2i/dim)), PE[p, 2i+1] = cos(same)."""
    if dim % 2:
        raise ShapeError(f"positional encoding needs an even dim, got {dim}")
    if num_tokens < 1:
        raise ShapeError("positional encoding needs at least one token")
    return _pe_table(num_tokens, dim).copy()


@dataclass
class TokenMatrix:
    """Flattened tokens plus where they came from."""

    tokens: Tensor
    stride: int | None
    spatial: tuple
    image_count: int = 1

    @property
    def positions(self):
        h, w = self.spatial
        return np.tile(np.arange(h * w), self.image_count)

    def __post_init__(self):
        h, w = self.spatial
        if self.tokens.shape[0] != self.image_count * h * w:
            raise ShapeError(f"{self.tokens.shape[0]} tokens for {self.image_count} images of {h}x{w}")


def flatten_features(f, stride=None):
    """[h,w,c] map to [h*w, c] tokens; pixel (r, col) becomes token r*w + col."""
    if f.ndim != 3:
        raise ShapeError(f"flatten_features needs [h,w,c], got {f.shape}")
    h, w, c = f.shape
    return TokenMatrix(T.reshape(f, (h * w, c)), stride, (h, w))


def unflatten_tokens(tm):
    h, w = tm.spatial
    if tm.image_count != 1:
        raise ShapeError("unflatten needs a single-image token matrix")
    return T.reshape(tm.tokens, (h, w, tm.tokens.shape[1]))


def scaled_dot_product_attention(q, k, v, return_weights=False):
    """softmax(q k^T / sqrt(d)) v for q [m_q,d], k [m_s,d], v [m_s,1]."""
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ShapeError(f"query/key dims differ: {q.shape} vs {k.shape}")
    if k.shape[0] < 1:
        raise ShapeError("attention needs at least one support token")
    if v.shape != (k.shape[0], 1):
        raise ShapeError(f"values must be [{k.shape[0]}, 1], got {v.shape}")
    d = q.shape[1]
    scores = T.affine(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d), 0.0)
    weights = T.softmax_rows(scores)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


@dataclass
class AttentionParams:
    """Per-(stride, layer) query/key projections shared by every head.

    ``table[(stride, layer)]`` holds ``Wq``/``Wk`` of shape [c, d_model] and
    ``bq``/``bk`` of shape [d_model]. Values carry no parameters.
    """

    head_count: int
    d_model: int
    table: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d_model % self.head_count:
            raise ValueError(f"d_model {self.d_model} not divisible by head_count {self.head_count}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for the positional encoding")

    @property
    def d_head(self):
        return self.d_model // self.head_count

    def unit(self, stride, layer):
        return self.table[(stride, layer)]

    def named(self):
        """Flat ``attn/<stride>/<layer>/<role>`` view, the keys used by the pipeline weights."""
        out = {}
        for (stride, layer), proj in sorted(self.table.items()):
            for role in ROLES:
                out[f"attn/{stride}/{layer}/{role}"] = proj[role]
        return out

    @classmethod
    def init(cls, channels, layers, d_model, head_count, rng, dtype=np.float32):
        """Xavier-uniform projections, zero biases. ``channels``/``layers`` map stride to c_i and L_i."""
        params = cls(head_count, d_model)
        for stride in sorted(channels):
            c = channels[stride]
            bound = math.sqrt(6.0 / (c + d_model))
            for layer in range(layers[stride]):
                params.table[(stride, layer)] = {
                    "Wq": Tensor(rng.uniform(-bound, bound, (c, d_model)).astype(dtype), requires_grad=True),
                    "Wk": Tensor(rng.uniform(-bound, bound, (c, d_model)).astype(dtype), requires_grad=True),
                    "bq": Tensor(np.zeros(d_model, dtype), requires_grad=True),
                    "bk": Tensor(np.zeros(d_model, dtype), requires_grad=True),
                }
        return params

    def save(self, directory):
        directory = Path(directory)
        entries = []
        for (stride, layer), proj in sorted(self.table.items()):
            for role in ROLES:
                rel = f"attn_s{stride}_l{layer}_{role}"
                write_dtc(directory / rel, proj[role].data)
                entries.append({"scale": f"1/{stride}", "layer": layer, "role": role, "file": rel})
        manifest = {"head_count": self.head_count, "d_model": self.d_model, "entries": entries}
        (directory / "attention.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest = json.loads((directory / "attention.json").read_text())
        params = cls(manifest["head_count"], manifest["d_model"])
        for e in manifest["entries"]:
            stride = int(e["scale"].split("/")[1])
            proj = params.table.setdefault((stride, int(e["layer"])), {})
            proj[e["role"]] = Tensor(read_dtc(directory / e["file"]), requires_grad=True)
        for key, proj in params.table.items():
            missing = [r for r in ROLES if r not in proj]
            if missing:
                raise ValueError(f"attention params for scale 1/{key[0]} layer {key[1]} missing {missing}")
        return params


def _project(tokens, positions, W, b):
    pe = _pe_table(int(positions.max()) + 1, tokens.shape[1])[positions].astype(tokens.dtype)
    return T.add_bias(T.matmul(T.add(tokens, Tensor(pe)), W), b)


def multi_head_dcama(fq_tokens, fs_tokens, v, proj, head_count, q_positions=None, s_positions=None, record=None):
    """Aggregate a mask value per query token from support mask values ``v``.

    ``proj`` holds Wq/Wk/bq/bk for one (scale, layer). Positions default to the
    raster index of a single image. If ``record`` is a list, each head's
    attention weights are appended to it as arrays.
    """
    c = proj["Wq"].shape[0]
    if fq_tokens.shape[1] != c or fs_tokens.shape[1] != c:
        raise ShapeError(f"token dim {fq_tokens.shape[1]}/{fs_tokens.shape[1]} does not match projection input {c}")
    if c % 2:
        raise ShapeError(f"feature dim must be even for the positional encoding, got {c}")
    if q_positions is None:
        q_positions = np.arange(fq_tokens.shape[0])
    if s_positions is None:
        s_positions = np.arange(fs_tokens.shape[0])
    q = _project(fq_tokens, np.asarray(q_positions), proj["Wq"], proj["bq"])
    k = _project(fs_tokens, np.asarray(s_positions), proj["Wk"], proj["bk"])
    d_model = q.shape[1]
    if d_model % head_count:
        raise ShapeError(f"d_model {d_model} not divisible by {head_count} heads")
    dh = d_model // head_count
    total = None
    for h in range(head_count):
        qh = T.slice_last(q, h * dh, (h + 1) * dh)
        kh = T.slice_last(k, h * dh, (h + 1) * dh)
        out, weights = scaled_dot_product_attention(qh, kh, v, return_weights=True)
        if record is not None:
            record.append(weights.data.copy())
        total = out if total is None else T.add(total, out)
    return T.affine(total, 1.0 / head_count, 0.0)


def assemble_support_tokens(pairs, stride=None):
    """Stack n (feature [h,w,c], mask [h,w,1]) pairs into one key set and one value column.

    Returns (TokenMatrix of support features, values [n*h*w, 1]). Token order is
    support order, then raster order within each image.
    """
    pairs = list(pairs)
    if not pairs:
        raise ShapeError("need at least one support pair")
    f0, _ = pairs[0]
    if f0.ndim != 3:
        raise ShapeError(f"support features must be [h,w,c], got {f0.shape}")
    h, w, c = f0.shape
    feats, masks = [], []
    for f, m in pairs:
        if f.shape != (h, w, c):
            raise ShapeError(f"support feature shapes differ: {f.shape} vs {(h, w, c)}")
        if m.shape != (h, w, 1):
            raise ShapeError(f"support mask must be [{h},{w},1], got {m.shape}")
        feats.append(T.reshape(f, (h * w, c)))
        masks.append(T.reshape(m, (h * w, 1)))
    fs = T.concat(feats, axis=0)
    v = T.concat(masks, axis=0)
    return TokenMatrix(fs, stride, (h, w), len(pairs)), v


def dcama_unit(f_q, supports, proj, head_count, record=None):
    """One attention pass for one (scale, layer): query map [h,w,c] to aggregated mask [h,w,1]."""
    if f_q.ndim != 3:
        raise ShapeError(f"query features must be [h,w,c], got {f_q.shape}")
    h, w, c = f_q.shape
    fs, v = assemble_support_tokens(supports)
    if fs.spatial != (h, w) or fs.tokens.shape[1] != c:
        raise ShapeError(f"query map {f_q.shape} does not match support maps {fs.spatial + (fs.tokens.shape[1],)}")
    fq = flatten_features(f_q)
    out = multi_head_dcama(fq.tokens, fs.tokens, v, proj, head_count, fq.positions, fs.positions, record)
    return T.reshape(out, (h, w, 1))
