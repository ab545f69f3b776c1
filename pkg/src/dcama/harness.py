"""Run-level drivers behind the CLI: evaluation, toy training, n-shot benchmark, gradient checks.

One seed drives a whole run. Sub-streams are ``np.random.default_rng([seed, k])``:
k=0 dataset generation, 1 weight init, 2 training episodes (one stream per
step: ``[seed, 2, step]``), 3 evaluation episodes, 5 the fixed probe set used
to track training loss. The stub backbone uses
``[backbone_seed, 4]`` and is fixed by the model config.
"""

import csv
import json
import logging
import os
import statistics
import time
import tracemalloc
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import AttentionParams, dcama_unit
from .dtc import read_dtc, write_dtc
from .episodes import generate_toy_dataset, make_folds, sample_episode, sample_episodes, ToyDatasetConfig
from .evaluation import (
    MetricAccumulator,
    TrainState,
    bce_loss,
    ensemble_predict,
    export_attention_summary,
    fb_iou,
    miou_finalize,
    report_json,
    train_step,
)
from .pipeline import FeatureCache, ModelConfig, ModelWeights, forward, predict_mask, prepare_episode
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

STREAM_DATASET, STREAM_WEIGHTS, STREAM_TRAIN, STREAM_EVAL, STREAM_PROBE = 0, 1, 2, 3, 5
STRATEGIES = ("onepass", "vote", "average")


def default_seed():
    return int(os.environ.get("DCAMA_SEED", "0"))


def fold_split(dataset, fold, folds):
    splits = make_folds(dataset.classes, folds)
    if not 0 <= fold < len(splits):
        raise ValueError(f"fold {fold} out of range for {folds} folds")
    return splits[fold]


def model_config_for(dataset, **overrides):
    size = dataset.size
    return ModelConfig(input_size=(size, size), **overrides)


# --------------------------------------------------------------------------
# evaluation


def _predict(feats_list, strategy, weights, zero_background):
    """Binary prediction for one episode under an n-shot strategy."""
    feats = feats_list
    with T.no_grad():
        if strategy == "onepass":
            prob, _ = forward(feats, weights, zero_background=zero_background)
            return predict_mask(prob)
        maps = []
        for k in range(feats.n):
            single = type(feats)(feats.query, [feats.supports[k]], [feats.support_masks[k]], feats.query_mask, feats.class_id)
            prob, _ = forward(single, weights, zero_background=zero_background)
            maps.append(prob.data)
        return ensemble_predict(strategy, maps)


def _eval_chunk(args):
    episodes, weights, strategy, zero_background = args
    cache = FeatureCache(weights.config)
    acc = MetricAccumulator()
    for ep in episodes:
        feats = prepare_episode(ep, weights.config, cache)
        acc.update(_predict(feats, strategy, weights, zero_background), ep.query[1], ep.class_id)
    return acc


def run_eval(dataset, weights, fold=0, folds=2, shots=1, episodes=1000, seed=0, strategy="onepass",
             zero_background=False, miou_mode="accumulate", workers=1):
    """Episodic evaluation on the fold's test classes; returns the report dict."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if shots < 1 or episodes < 1:
        raise ValueError("shots and episodes must be >= 1")
    split = fold_split(dataset, fold, folds)
    eps = sample_episodes(dataset, split, shots, episodes, [seed, STREAM_EVAL])
    if workers <= 1:
        acc = _eval_chunk((eps, weights, strategy, zero_background))
    else:
        chunks = [eps[i::workers] for i in range(workers)]
        # strided chunks keep per-class counts identical; episode records are reordered below
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_eval_chunk, [(c, weights, strategy, zero_background) for c in chunks]))
        acc = MetricAccumulator()
        for p in parts:
            acc = acc.merge(p)
        order = [i for w in range(workers) for i in range(w, len(eps), workers)]
        acc.episode_ious = [rec for _, rec in sorted(zip(order, acc.episode_ious))]
    per_class = acc.class_ious(miou_mode)
    return {
        "fold": fold,
        "folds": folds,
        "shots": shots,
        "episodes": episodes,
        "seed": seed,
        "strategy": strategy,
        "ablation": "zero_background" if zero_background else "full",
        "miou_mode": miou_mode,
        "miou": miou_finalize(acc, split.test_classes, mode=miou_mode),
        "fb_iou": fb_iou(acc),
        "per_class": {str(c): v for c, v in per_class.items()},
    }


def write_report(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_json(report))
    return path


# --------------------------------------------------------------------------
# training


def save_checkpoint(state, directory, meta):
    directory = Path(directory)
    state.weights.save(directory, seed=meta.get("seed"))
    for name, buf in state.momentum_buffers.items():
        write_dtc(directory / "momentum" / ("m_" + name.replace("/", "_")), buf)
    info = dict(meta, step=state.step, lr=state.lr, momentum=state.momentum, weight_decay=state.weight_decay)
    (directory / "train_state.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory):
    directory = Path(directory)
    weights = ModelWeights.load(directory)
    info = json.loads((directory / "train_state.json").read_text())
    bufs = {n: read_dtc(directory / "momentum" / ("m_" + n.replace("/", "_"))) for n in weights.names()}
    state = TrainState(weights, bufs, info["step"], info["lr"], info["momentum"], info["weight_decay"])
    return state, info


def train_toy(dataset, out_dir, steps=200, seed=0, fold=0, folds=2, lr=1e-3, momentum=0.9, weight_decay=1e-4,
              batch=4, resume=None, zero_background=False, config=None, callback=None):
    """Episodic SGD on the fold's train classes. Writes a checkpoint and ``loss.csv``; returns the loss list.

    On a non-finite loss the last good state is checkpointed and NonFiniteError re-raised.
    """
    out_dir = Path(out_dir)
    split = fold_split(dataset, fold, folds)
    meta = {"seed": seed, "fold": fold, "folds": folds, "batch": batch, "dataset_seed": dataset.seed,
            "zero_background": zero_background}
    if resume is not None:
        state, info = load_checkpoint(resume)
        for key in ("seed", "fold", "folds", "batch"):
            if info.get(key) != meta[key]:
                raise ValueError(f"resume checkpoint has {key}={info.get(key)!r}, run asks for {meta[key]!r}")
        losses = _read_losses(Path(resume) / "loss.csv")
    else:
        config = config or model_config_for(dataset)
        state = TrainState.fresh(ModelWeights.init(config, seed), lr, momentum, weight_decay)
        losses = []
    cache = FeatureCache(state.weights.config)
    try:
        while state.step < steps:
            rng = np.random.default_rng([seed, STREAM_TRAIN, state.step])
            eps = [sample_episode(dataset, split, 1, rng, split="train") for _ in range(batch)]
            feats = [prepare_episode(e, state.weights.config, cache) for e in eps]
            step = state.step
            loss = train_step(state, feats, zero_background=zero_background)
            losses.append((step, loss))
            if callback is not None:
                callback(step, loss, state)
    except NonFiniteError:
        save_checkpoint(state, out_dir, meta)
        _write_losses(out_dir / "loss.csv", losses)
        raise
    save_checkpoint(state, out_dir, meta)
    _write_losses(out_dir / "loss.csv", losses)
    return [l for _, l in losses]


def probe_loss(dataset, weights, fold=0, folds=2, count=32, seed=0, cache=None):
    """Mean BCE over a fixed set of 1-shot train-class episodes (same set for every call with this seed)."""
    split = fold_split(dataset, fold, folds)
    eps = sample_episodes(dataset, split, 1, count, [seed, STREAM_PROBE], split="train")
    cache = cache or FeatureCache(weights.config)
    total = 0.0
    with T.no_grad():
        for ep in eps:
            prob, _ = forward(prepare_episode(ep, weights.config, cache), weights)
            total += bce_loss(prob, ep.query[1]).item()
    return total / count


def _write_losses(path, losses):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for step, loss in losses:
            w.writerow([step, repr(float(loss))])


def _read_losses(path):
    if not path.is_file():
        return []
    with open(path, newline="") as fh:
        return [(int(r["step"]), float(r["loss"])) for r in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# n-shot benchmark


def bench_nshot(dataset, weights, fold=0, folds=2, max_shots=5, reps=20, seed=0):
    """Per-episode latency and peak allocation for n = 1..max_shots.

    Timing covers stub feature extraction for the query and all supports plus
    the forward pass. Shot counts are interleaved within each repetition so
    slow drift affects every n alike.
    """
    split = fold_split(dataset, fold, folds)
    rng = np.random.default_rng([seed, STREAM_EVAL])
    base = sample_episode(dataset, split, max_shots, rng)
    config = weights.config
    shots = list(range(1, max_shots + 1))

    def episode_for(n):
        return type(base)(base.support[:n], base.query, base.class_id)

    def run(n):
        with T.no_grad():
            forward(prepare_episode(episode_for(n), config), weights)

    for n in shots:  # warm-up, also triggers kernel compilation
        run(n)
    times = {n: [] for n in shots}
    for _ in range(reps):
        for n in shots:
            t0 = time.perf_counter()
            run(n)
            times[n].append(time.perf_counter() - t0)
    rows = []
    for n in shots:
        tracemalloc.start()
        run(n)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        rows.append({
            "n": n,
            "median_s": statistics.median(times[n]),
            "mean_s": statistics.fmean(times[n]),
            "min_s": min(times[n]),
            "peak_bytes": peak,
            "kv_tokens": config.kv_tokens(n),
        })
    return rows


def linear_fit(xs, ys):
    """Least-squares slope, intercept and residuals."""
    slope, intercept = np.polyfit(np.asarray(xs, float), np.asarray(ys, float), 1)
    resid = np.asarray(ys, float) - (slope * np.asarray(xs, float) + intercept)
    return float(slope), float(intercept), resid


def write_bench_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


# --------------------------------------------------------------------------
# gradient checks


GRADCHECK_EPS = 2e-3


def gradcheck_unit(seed=0, eps=GRADCHECK_EPS):
    """Check one attention unit (projections included) against central differences, 64-bit.

    The key bias has an identically zero gradient (a per-query constant added to
    every score cancels in the softmax), so its score only measures roundoff.
    """
    rng = np.random.default_rng(seed)
    h, w, c, n = 3, 4, 8, 2
    att = AttentionParams.init({8: c}, {8: 1}, 8, 2, rng, dtype=np.float64)
    proj = att.unit(8, 0)
    for b in ("bq", "bk"):
        proj[b].data[:] = rng.normal(0, 0.1, proj[b].shape)
    fq = Tensor(rng.normal(0, 1, (h, w, c)), requires_grad=True)
    sup = [(Tensor(rng.normal(0, 1, (h, w, c)), requires_grad=True), Tensor(rng.uniform(0, 1, (h, w, 1))))
           for _ in range(n)]
    probe = Tensor(rng.normal(0, 1, (h, w, 1)))

    def objective():
        return T.sum_all(T.mul(dcama_unit(fq, sup, proj, att.head_count), probe))

    worst = 0.0
    for x in [fq, sup[0][0], sup[1][0]] + [proj[r] for r in ("Wq", "Wk", "bq", "bk")]:
        worst = max(worst, T.grad_check(lambda _x: objective(), x, eps=eps))
    return worst


def gradcheck_config(size=48):
    """Model config for the episode-level check. 48 is not divisible by 32, so the 1/32 scale is dropped."""
    if size % 32 == 0:
        return ModelConfig(input_size=(size, size))
    return ModelConfig(
        input_size=(size, size),
        attended_strides=(8, 16),
        layers={4: 1, 8: 2, 16: 2},
        channels={4: 16, 8: 32, 16: 64},
    )


def gradcheck_episode(size=48, seed=0, per_tensor=4, eps=GRADCHECK_EPS):
    """Check bce(forward) gradients for every weight tensor on a toy episode, 64-bit.

    ``per_tensor`` seeded coordinates are probed in each parameter tensor.
    """
    config = gradcheck_config(size)
    ds = generate_toy_dataset(ToyDatasetConfig(num_classes=2, images_per_class=6, size=size), seed=seed)
    split = make_folds(ds.classes, 1)[0]
    ep = sample_episode(ds, split, 2, np.random.default_rng(seed))
    feats = prepare_episode(ep, config)
    weights = ModelWeights.init(config, seed, dtype=np.float64)
    worst = 0.0
    for k, name in enumerate(weights.names()):
        def f(_x):
            prob, _ = forward(feats, weights)
            return bce_loss(prob, feats.query_mask)

        err = T.grad_check(f, weights.params[name], eps=eps, max_elements=per_tensor, seed=k)
        log.debug("gradcheck %s: %.3g", name, err)
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# attention export


def export_attention(dataset, weights, pixel, out_stem, fold=0, folds=2, shots=1, seed=0):
    split = fold_split(dataset, fold, folds)
    ep = sample_episode(dataset, split, shots, np.random.default_rng([seed, STREAM_EVAL]))
    with T.no_grad():
        _, art = forward(ep, weights, record_attention=True)
    heat = export_attention_summary(art.attention, pixel, weights.config.input_size, n=shots)
    write_dtc(out_stem, heat.astype(np.float32))
    return heat
