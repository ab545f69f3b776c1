"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) before asserting.
"""

import time

import numpy as np
import pytest

from dcama import harness
from dcama import tensor as T
from dcama.attention import AttentionParams, dcama_unit, multi_head_dcama, scaled_dot_product_attention
from dcama.cli import main
from dcama.evaluation import MetricAccumulator, fb_iou, miou_finalize
from dcama.episodes import ToyDatasetConfig, generate_toy_dataset, make_folds, sample_episode, save_dataset
from dcama.pipeline import (
    EpisodeFeatures,
    ModelConfig,
    ModelWeights,
    forward,
    forward_one_shot,
    prepare_episode,
)
from dcama.tensor import Tensor

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def config():
    return ModelConfig()


@pytest.fixture(scope="module")
def weights(config):
    return ModelWeights.init(config, seed=0)


@pytest.fixture(scope="module")
def episodes(toy_dataset, config):
    """Test-fold episodes at 96x96 for n = 1, 2, 5, features precomputed."""
    split = make_folds(toy_dataset.classes, 2)[0]
    rng = np.random.default_rng(21)
    return {n: [prepare_episode(sample_episode(toy_dataset, split, n, rng), config) for _ in range(2)]
            for n in (1, 2, 5)}


def test_criterion_01_row_stochastic(criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        mq, ms = (int(v) for v in rng.integers(1, 257, 2))
        d = int(rng.integers(1, 129))
        q = Tensor(rng.normal(0, 3, (mq, d)).astype(np.float32))
        k = Tensor(rng.normal(0, 3, (ms, d)).astype(np.float32))
        v = Tensor(rng.uniform(0, 1, (ms, 1)).astype(np.float32))
        with T.no_grad():
            _, w = scaled_dot_product_attention(q, k, v, return_weights=True)
        worst = max(worst, float(np.abs(w.data.astype(np.float64).sum(axis=1) - 1).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 10
    criterion(1, "attention rows sum to 1", ok, f"max dev {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_aggregated_range(criterion, episodes, weights):
    lo, hi = np.inf, -np.inf
    seen = set()
    for n, eps in episodes.items():
        for feats in eps:
            with T.no_grad():
                _, art = forward(feats, weights)
            for s, m in art.aggregated.items():
                seen.add((s, n))
                lo, hi = min(lo, float(m.data.min())), max(hi, float(m.data.max()))
    # isolated units with random soft values
    rng = np.random.default_rng(2)
    att = AttentionParams.init({8: 32}, {8: 1}, 64, 4, rng)
    for n in (1, 2, 5):
        pairs = [(Tensor(rng.normal(size=(6, 6, 32)).astype(np.float32)),
                  Tensor(rng.uniform(size=(6, 6, 1)).astype(np.float32))) for _ in range(n)]
        with T.no_grad():
            out = dcama_unit(Tensor(rng.normal(size=(6, 6, 32)).astype(np.float32)), pairs, att.unit(8, 0), 4).data
        lo, hi = min(lo, float(out.min())), max(hi, float(out.max()))
    ok = lo >= -1e-6 and hi <= 1 + 1e-6 and seen == {(s, n) for s in (8, 16, 32) for n in (1, 2, 5)}
    criterion(2, "aggregated masks within [0, 1]", ok, f"range [{lo:.3g}, {hi:.3g}]")
    assert ok


def test_criterion_03_permutation_duplication(criterion, episodes, weights):
    worst = 0.0
    # joint permutation of support tokens and their values inside one unit
    rng = np.random.default_rng(3)
    att = AttentionParams.init({8: 32}, {8: 1}, 64, 4, rng)
    fq = Tensor(rng.normal(size=(36, 32)).astype(np.float32))
    fs = rng.normal(size=(72, 32)).astype(np.float32)
    v = rng.uniform(size=(72, 1)).astype(np.float32)
    pos = np.tile(np.arange(36), 2)
    perm = rng.permutation(72)
    with T.no_grad():
        a = multi_head_dcama(fq, Tensor(fs), Tensor(v), att.unit(8, 0), 4, s_positions=pos).data
        b = multi_head_dcama(fq, Tensor(fs[perm]), Tensor(v[perm]), att.unit(8, 0), 4, s_positions=pos[perm]).data
    worst = max(worst, float(np.abs(a - b).max()))
    # support order and k-fold duplication through the full forward
    for feats in episodes[2] + episodes[5]:
        with T.no_grad():
            base = forward(feats, weights)[0].data
            order = rng.permutation(feats.n)
            shuffled = EpisodeFeatures(feats.query, [feats.supports[i] for i in order],
                                       [feats.support_masks[i] for i in order])
            worst = max(worst, float(np.abs(forward(shuffled, weights)[0].data - base).max()))
    for feats in episodes[1] + episodes[2]:
        with T.no_grad():
            base = forward(feats, weights)[0].data
            for k in (2, 3):
                dup = EpisodeFeatures(feats.query, feats.supports * k, feats.support_masks * k)
                worst = max(worst, float(np.abs(forward(dup, weights)[0].data - base).max()))
    ok = worst < 1e-5
    criterion(3, "permutation and duplication invariance", ok, f"max change {worst:.2e}")
    assert ok


def test_criterion_04_one_shot_consistency(criterion, episodes, weights):
    same = True
    for feats in episodes[1]:
        with T.no_grad():
            a = forward(feats, weights)[0].data
            b = forward_one_shot(feats.query, feats.supports[0], feats.support_masks[0], weights)[0].data
        same &= a.tobytes() == b.tobytes()
    criterion(4, "1-shot entry bit-identical to n-shot path", same)
    assert same


def test_criterion_05_gradients(criterion):
    t0 = time.perf_counter()
    episode_err = harness.gradcheck_episode(size=48, seed=0)
    unit_err = harness.gradcheck_unit(seed=0)
    elapsed = time.perf_counter() - t0
    ok = episode_err < 1e-4 and unit_err < 1e-4 and elapsed < 300
    criterion(5, "analytic vs finite-difference gradients", ok,
              f"episode {episode_err:.2e}, unit {unit_err:.2e}, {elapsed:.0f}s")
    assert ok


def test_criterion_06_metric_oracle(criterion):
    rng = np.random.default_rng(6)
    acc = MetricAccumulator()
    per, fg, bg = {}, [0, 0], [0, 0]
    for _ in range(100):
        gt = rng.random((16, 16)) < rng.uniform(0.05, 0.8)
        pred = rng.random((16, 16)) < rng.uniform(0, 1)
        c = int(rng.integers(5))
        acc.update(pred, gt, c)
        slot = per.setdefault(c, [0, 0])
        for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
            slot[0] += p and g
            slot[1] += p or g
            fg[0] += p and g
            fg[1] += p or g
            bg[0] += not (p or g)
            bg[1] += not (p and g)
    counts_ok = acc.inter == {c: v[0] for c, v in per.items()} and acc.union == {c: v[1] for c, v in per.items()}
    counts_ok &= (acc.fg_inter, acc.fg_union, acc.bg_inter, acc.bg_union) == (*fg, *bg)
    miou_ref = float(np.mean([per[c][0] / per[c][1] for c in sorted(per)]))
    fb_ref = 0.5 * (fg[0] / fg[1] + bg[0] / bg[1])
    ok = counts_ok and miou_finalize(acc) == miou_ref and fb_iou(acc) == fb_ref
    criterion(6, "mIoU and FB-IoU equal brute-force recount", ok)
    assert ok


def test_criterion_07_training(criterion, tmp_path):
    dataset = generate_toy_dataset(ToyDatasetConfig(), seed=1)
    seed = 7
    config = harness.model_config_for(dataset)
    untrained = ModelWeights.init(config, seed)
    t0 = time.perf_counter()
    initial = harness.probe_loss(dataset, untrained, seed=seed)
    curve = harness.train_toy(dataset, tmp_path / "ck", steps=200, seed=seed, lr=1e-3, momentum=0.9, weight_decay=1e-4)
    trained = ModelWeights.load(tmp_path / "ck")
    final = harness.probe_loss(dataset, trained, seed=seed)
    elapsed = time.perf_counter() - t0
    before = harness.run_eval(dataset, untrained, episodes=100, seed=seed)["miou"]
    after = harness.run_eval(dataset, trained, episodes=100, seed=seed)["miou"]
    ratio = final / initial
    ok = len(curve) == 200 and ratio <= 0.5 and after - before >= 0.15 and elapsed < 600
    criterion(7, "toy training reduces BCE and improves held-out mIoU", ok,
              f"BCE {initial:.3f} -> {final:.3f} (x{ratio:.2f}), mIoU {before:.3f} -> {after:.3f}, {elapsed:.0f}s")
    assert ok


def test_criterion_08_strategies(criterion, toy_dataset, weights, episodes):
    reports = {s: harness.run_eval(toy_dataset, weights, shots=3, episodes=20, seed=8, strategy=s)
               for s in harness.STRATEGIES}
    valid = all(0 <= r["miou"] <= 1 and 0 <= r["fb_iou"] <= 1 and r["strategy"] == s for s, r in reports.items())
    agree = True
    for feats in episodes[1] + episodes[2]:
        ident = EpisodeFeatures(feats.query, [feats.supports[0]] * 3, [feats.support_masks[0]] * 3,
                                feats.query_mask, feats.class_id)
        preds = [harness._predict(ident, s, weights, False) for s in harness.STRATEGIES]
        agree &= all(np.array_equal(preds[0], p) for p in preds[1:])
    ok = valid and agree
    mious = ", ".join(f"{s} {r['miou']:.3f}" for s, r in reports.items())
    criterion(8, "one-pass, vote and average harness", ok, mious)
    assert ok


def test_criterion_09_background_ablation(criterion, episodes, weights, toy_dataset):
    diff = 0.0
    for feats in episodes[1]:
        with T.no_grad():
            a = forward(feats, weights)[0].data
            b = forward(feats, weights, zero_background=True)[0].data
        diff = max(diff, float(np.abs(a - b).max()))
    report = harness.run_eval(toy_dataset, weights, episodes=10, zero_background=True)
    ok = diff > 0 and report["ablation"] == "zero_background"
    criterion(9, "background-zeroing ablation changes the forward", ok, f"max diff {diff:.3g}")
    assert ok


def test_criterion_10_nshot_scaling(criterion, toy_dataset, weights, config):
    rows = harness.bench_nshot(toy_dataset, weights, max_shots=5, reps=20)
    ns = [r["n"] for r in rows]
    tokens_linear = all(r["kv_tokens"] == r["n"] * config.kv_tokens(1) for r in rows)
    tokens_linear &= config.kv_tokens(1) == 12 * 12 + 6 * 6 + 3 * 3
    times = [r["median_s"] for r in rows]
    monotone = all(b >= a for a, b in zip(times, times[1:]))
    slope, _, resid = harness.linear_fit(ns, times)
    fits = slope > 0 and float(np.abs(resid).max()) <= 2 * slope
    ok = tokens_linear and monotone and fits
    detail = "medians " + ", ".join(f"{t * 1e3:.1f}" for t in times) + f" ms; slope {slope * 1e3:.2f} ms/shot, " \
             f"max resid {np.abs(resid).max() * 1e3:.2f} ms"
    criterion(10, "K/V tokens linear, latency monotone and near-linear in n", ok, detail)
    assert ok


def test_criterion_11_eval_determinism(criterion, tmp_path):
    ds_dir = tmp_path / "ds"
    save_dataset(generate_toy_dataset(ToyDatasetConfig(), seed=0), ds_dir)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.json"
        assert main(["eval", "--dataset", str(ds_dir), "--fold", "0", "--shots", "1", "--episodes", "100",
                     "--seed", "42", "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    ok = outs[0] == outs[1]
    criterion(11, "eval reports byte-identical under one seed", ok)
    assert ok
