"""Acceptance criteria, one test per criterion.

Training runs for criteria 4-6 are cached under the pytest cache directory,
keyed by a digest of the package sources, so a rerun of unchanged code only
re-checks the stored results.  `pytest --cache-clear` forces retraining.
"""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

import gcolearn
from gcolearn import engine, metrics as M, synth
from gcolearn import tensor as T
from gcolearn.collaboration import attention_consensus, depthwise_correlate, group_affinity_attention
from gcolearn.gradcheck import grad_check
from gcolearn.inference import predict_group
from gcolearn.losses import (
    LossWeights, classification_loss, focal_loss, gcm_loss, soft_iou_loss, total_loss,
)
from gcolearn.model import ModelConfig, init_params
from gcolearn.tensor import Tensor

from test_collaboration import brute_gam, run_gam
from test_metrics import loop_e_max, loop_f_max, random_pair

SEEDS = (0, 1, 2)
CONFIGS = {
    "full": dict(use_gam=True, use_gcm=True, use_acm=True),
    "gam_gcm": dict(use_gam=True, use_gcm=True, use_acm=False),
    "gam": dict(use_gam=True, use_gcm=False, use_acm=False),
    "baseline": dict(use_gam=False, use_gcm=False, use_acm=False),
}
MARGIN = 0.01


def detail(request, text):
    request.node.user_properties.append(("detail", text))
    print(text)


# ----------------------------------------------------------------- 1. gradients

def _weighted(fn, shape, seed):
    w = np.random.default_rng(seed + 100).standard_normal(shape)
    return lambda *xs: T.reduce_sum(fn(*xs) * Tensor(w))


def _mask(g, shape):
    m = (g.random(shape) > 0.5).astype(float)
    m.reshape(-1)[0] = 1
    return m


def grad_cases(seed):
    """(name, scalar fn, inputs) for every differentiable op and every loss."""
    g = np.random.default_rng(seed)
    n = lambda *s: g.standard_normal(s)
    pos = lambda *s: g.uniform(0.5, 2.0, s)
    gt = _mask(g, (2, 1, 3, 3))
    y = g.integers(0, 3, 2)
    w = lambda fn, shape: _weighted(fn, shape, seed)
    return [
        ("add", w(T.add, (3, 4)), [n(3, 4), n(4)]),
        ("sub", w(T.sub, (3, 4)), [n(3, 1), n(3, 4)]),
        ("mul", w(T.mul, (3, 4)), [n(3, 4), n(1, 4)]),
        ("div", w(T.div, (3, 4)), [n(3, 4), pos(3, 4)]),
        ("neg", w(T.neg, (5,)), [n(5)]),
        ("exp", w(T.exp, (5,)), [n(5)]),
        ("log", w(T.log, (5,)), [pos(5)]),
        ("power", w(lambda a: T.power(a, 1.5), (5,)), [pos(5)]),
        ("relu", w(T.relu, (8,)), [n(8)]),
        ("sigmoid", w(T.sigmoid, (8,)), [n(8) * 3]),
        ("softplus", w(T.softplus, (8,)), [n(8) * 3]),
        ("softmax", w(lambda a: T.softmax(a, axis=1), (3, 5)), [n(3, 5)]),
        ("log_softmax", w(lambda a: T.log_softmax(a, axis=1), (3, 5)), [n(3, 5)]),
        ("reduce_sum", w(lambda a: T.reduce_sum(a, axis=1), (3, 4)), [n(3, 5, 4)]),
        ("reduce_mean", w(lambda a: T.reduce_mean(a, axis=(0, 2), keepdims=True), (1, 5, 1)), [n(3, 5, 4)]),
        ("reduce_max", w(lambda a: T.reduce_max(a, axis=2)[0], (3, 5)), [n(3, 5, 4)]),
        ("reshape", w(lambda a: T.reshape(a, (4, 3)), (4, 3)), [n(2, 6)]),
        ("transpose", w(lambda a: T.transpose(a, (2, 0, 1)), (4, 2, 3)), [n(2, 3, 4)]),
        ("concat", w(lambda a, b: T.concat([a, b], axis=1), (2, 5)), [n(2, 2), n(2, 3)]),
        ("matmul", w(T.matmul, (3, 2)), [n(3, 4), n(4, 2)]),
        ("conv2d", w(lambda x, k, b: T.conv2d(x, k, b, pad=1), (1, 3, 5, 5)), [n(1, 2, 5, 5), n(3, 2, 3, 3), n(3)]),
        ("conv2d_stride2", w(lambda x, k: T.conv2d(x, k, stride=2, pad=1), (1, 2, 3, 3)), [n(1, 2, 5, 5), n(2, 2, 3, 3)]),
        ("max_pool2d", w(lambda a: T.max_pool2d(a, 2), (2, 2, 2, 3)), [n(2, 2, 4, 6)]),
        ("upsample_bilinear", w(lambda a: T.upsample_bilinear(a, 2), (1, 2, 6, 8)), [n(1, 2, 3, 4)]),
        ("group_affinity_attention",
         w(lambda f, th, ph: attention_consensus(f, group_affinity_attention(f, th, ph).a_s), (1, 3, 1, 1)),
         # unit-scale features keep the softmax away from saturation, where true gradients
         # fall below what central differences can resolve
         [n(2, 3, 3, 3) * 0.5, n(2, 3, 1, 1), n(2, 3, 1, 1)]),
        ("depthwise_correlate", w(depthwise_correlate, (2, 3, 2, 2)), [n(2, 3, 2, 2), n(1, 3, 1, 1)]),
        ("soft_iou_loss", lambda p: soft_iou_loss(T.sigmoid(p), gt), [n(*gt.shape)]),
        ("focal_loss", lambda z: focal_loss(z, gt), [n(*gt.shape) * 2]),
        ("gcm_loss", lambda a, b: gcm_loss(a, b, gt), [n(*gt.shape), n(*gt.shape)]),
        ("cross_entropy", lambda c: classification_loss(c, y), [n(2, 3)]),
        ("total_loss", lambda p, z, c: total_loss(
            {"sal": soft_iou_loss(T.sigmoid(p), gt), "ctm": gcm_loss(z, z * 0.5, gt),
             "cls": classification_loss(c, y)}, LossWeights(1.0, 0.7, 0.3)),
         [n(*gt.shape), n(*gt.shape), n(2, 3)]),
    ]


@pytest.mark.criterion(1, "gradient suite")
def test_gradient_suite(request):
    t0 = time.perf_counter()
    reports = [grad_check(fn, args, h=1e-5, tol=1e-4, name=f"{name}[seed {s}]")
               for s in SEEDS for name, fn, args in grad_cases(s)]
    elapsed = time.perf_counter() - t0
    bad = [str(r) for r in reports if not r.passed]
    worst = max(r.max_rel_error for r in reports)
    detail(request, f"{len(reports)} checks ({len(reports) // len(SEEDS)} ops x 3 seeds), "
                    f"worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert not bad, bad
    assert elapsed < 120


# ---------------------------------------------------------------- 2. GAM oracle

@pytest.mark.criterion(2, "GAM oracle and permutation")
def test_gam_oracle(request):
    g = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        f = g.standard_normal((2, 2, 2, 2))
        theta, phi = g.standard_normal((2, 2)), g.standard_normal((2, 2))
        att, e = run_gam(f, theta, phi)
        ref_a, ref_e = brute_gam(f, theta, phi)
        worst = max(worst, np.abs(att.a_s.data[:, 0] - ref_a).max(), np.abs(e - ref_e).max())
    perm_worst = 0.0
    for _ in range(20):
        f = g.standard_normal((4, 3, 3, 3))
        theta, phi = g.standard_normal((2, 3)), g.standard_normal((2, 3))
        perm = g.permutation(4)
        att, e = run_gam(f, theta, phi)
        att_p, e_p = run_gam(f[perm], theta, phi)
        perm_worst = max(perm_worst, np.abs(e_p - e).max(), np.abs(att_p.a_s.data - att.a_s.data[perm]).max())
    detail(request, f"brute-force max err {worst:.1e} over 100 cases, permutation max err {perm_worst:.1e}")
    assert worst < 1e-6 and perm_worst < 1e-6


# ------------------------------------------------------------ 3. metrics oracle

@pytest.mark.criterion(3, "metrics oracle")
def test_metrics_oracle(request):
    g = np.random.default_rng(11)
    f_bad = e_bad = 0
    mae_err = 0.0
    for _ in range(100):
        pred, gt = random_pair(g, 8)
        f_bad += M.f_measure_max(pred, gt) != loop_f_max(pred, gt)
        e_bad += M.e_measure_max(pred, gt) != loop_e_max(pred, gt)
        ref = sum(abs(p - float(t)) for p, t in zip(pred.ravel(), gt.ravel())) / pred.size
        mae_err = max(mae_err, abs(M.mae(pred, gt) - ref))

    pred = g.random((8, 8))
    q = np.round(pred * 255)
    zeros, ones = np.zeros((8, 8)), np.ones((8, 8))
    edges = [
        all(M.e_measure_curve(pred, zeros)[t] == 1 - np.mean(q >= t) for t in range(256)),
        all(M.e_measure_curve(pred, ones)[t] == np.mean(q >= t) for t in range(256)),
        M.s_measure(pred, zeros) == 1 - pred.mean(),
        M.s_measure(pred, ones) == pred.mean(),
    ]
    gt = np.zeros((12, 12))
    gt[3:9, 2:7] = 1
    perfect = (M.e_measure_max(gt, gt), M.s_measure(gt, gt), M.f_measure_max(gt, gt), M.mae(gt, gt))
    detail(request, f"F mismatches {f_bad}/100, E mismatches {e_bad}/100, MAE max err {mae_err:.1e}, "
                    f"edge forms {sum(edges)}/4 exact, perfect {tuple(round(v, 6) for v in perfect)}")
    assert f_bad == 0 and e_bad == 0 and mae_err <= 1e-12
    assert all(edges)
    np.testing.assert_allclose(perfect, (1, 1, 1, 0), atol=1e-6)


# ------------------------------------------------------- 4-6. training runs

def _source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(gcolearn.__file__).parent.glob("*.py")):
        h.update(p.name.encode() + p.read_bytes())
    return h.hexdigest()[:16]


def _overall(report: M.MetricsReport) -> dict:
    o = report.overall
    return {"f_max": o.f_max, "e_max": o.e_max, "s_alpha": o.s_alpha, "mae": o.mae}


def _run(root: Path, seed: int, name: str) -> dict:
    """Train one configuration on the seed's dataset and score it (cached)."""
    out = root / f"{name}_seed{seed}.json"
    if out.exists():
        return json.loads(out.read_text())
    data = synth.load_manifest(root / f"data_seed{seed}")
    heavy = synth.load_manifest(root / f"heavy_seed{seed}")
    cfg = engine.TrainConfig(seed=seed, **CONFIGS[name])
    t0 = time.perf_counter()
    ck, _ = engine.train(cfg, data)
    t_train = time.perf_counter() - t0
    engine.save_checkpoint(ck, root / f"{name}_seed{seed}.gckp")
    t0 = time.perf_counter()
    result = {"eval": _overall(M.evaluate_dataset(ck, data)), "seconds": t_train}
    result["seconds"] += time.perf_counter() - t0
    result["heavy"] = _overall(M.evaluate_dataset(ck, heavy))
    if name != "baseline":
        exp = engine.export_consensus(ck, data)
        result.update(d1=exp.d1, d2=exp.d2, ratio=exp.ratio)
    out.write_text(json.dumps(result, indent=1))
    return result


@pytest.fixture(scope="session")
def runs(request):
    root = Path(request.config.cache.mkdir("acceptance")) / _source_digest()
    root.mkdir(exist_ok=True)
    for s in SEEDS:
        for name, kw in (("data", {}), ("heavy", {"min_distractors": 2})):
            if not (root / f"{name}_seed{s}" / "manifest.txt").exists():
                synth.generate_dataset(root / f"{name}_seed{s}", seed=s, **kw)
    return {(name, s): _run(root, s, name) for s in SEEDS for name in CONFIGS}


def _median(runs, name, key="eval", field="f_max"):
    return float(np.median([runs[name, s][key][field] for s in SEEDS]))


@pytest.mark.slow
@pytest.mark.criterion(4, "desk-scale learning")
def test_learning(request, runs):
    f = _median(runs, "full")
    m = _median(runs, "full", field="mae")
    minutes = sum(runs["full", s]["seconds"] for s in SEEDS) / 60
    per_seed = ", ".join(f"{runs['full', s]['eval']['f_max']:.3f}/{runs['full', s]['eval']['mae']:.3f}" for s in SEEDS)
    detail(request, f"median eval F^max {f:.3f} (need >= 0.85), MAE {m:.3f} (need <= 0.08), "
                    f"per seed F/MAE [{per_seed}], {minutes:.1f} min for 3 runs")
    assert f >= 0.85 and m <= 0.08
    assert minutes <= 30


@pytest.mark.slow
@pytest.mark.criterion(5, "ablation ordering")
def test_ablation_ordering(request, runs):
    order = ["full", "gam_gcm", "gam", "baseline"]
    f = {name: _median(runs, name) for name in order}
    heavy = {name: _median(runs, name, "heavy") for name in order}
    gain, gain_heavy = f["gam_gcm"] - f["gam"], heavy["gam_gcm"] - heavy["gam"]
    gaps = [f[a] - f[b] for a, b in zip(order, order[1:])]
    detail(request, "median F^max " + ", ".join(f"{n} {f[n]:.3f}" for n in order) +
           f"; gaps {[round(x, 3) for x in gaps]} (need each >= {MARGIN}); "
           f"GCM gain default {gain:+.3f}, distractor-heavy {gain_heavy:+.3f}")
    assert all(gap >= MARGIN for gap in gaps)
    assert gain_heavy > gain


@pytest.mark.slow
@pytest.mark.criterion(6, "consensus separability")
def test_consensus_separability(request, runs):
    pairs = [(runs["gam_gcm", s]["ratio"], runs["gam", s]["ratio"]) for s in SEEDS]
    wins = sum(a > b for a, b in pairs)
    detail(request, f"d2/d1 GCM-trained vs GCM-ablated per seed {[(round(a, 3), round(b, 3)) for a, b in pairs]}; "
                    f"{wins}/3 seeds favour GCM (need >= 2)")
    assert wins >= 2


# ------------------------------------------------------------ 7. determinism

@pytest.mark.criterion(7, "determinism and persistence")
def test_determinism(request, tmp_path):
    a = synth.generate_dataset(tmp_path / "a", num_classes=4, per_class=8, seed=5, eval_classes=1)
    synth.generate_dataset(tmp_path / "b", num_classes=4, per_class=8, seed=5, eval_classes=1)
    same_data = synth.dataset_hash(tmp_path / "a") == synth.dataset_hash(tmp_path / "b")

    cfg = engine.TrainConfig(epochs=2, episodes_per_epoch=3, k=4, seed=3)
    digest = lambda ck: hashlib.sha256(engine.checkpoint_bytes(ck)).hexdigest()
    first, hist = engine.train(cfg, a)
    second, _ = engine.train(cfg, a)
    half, _ = engine.train(cfg, a, max_steps=3)
    engine.save_checkpoint(half, tmp_path / "half.gckp")
    resumed, rest = engine.train(cfg, a, resume=engine.load_checkpoint(tmp_path / "half.gckp"))
    same_run = digest(first) == digest(second)
    same_resume = digest(resumed) == digest(first) and [r["total"] for r in rest] == [r["total"] for r in hist[3:]]
    detail(request, f"retrain hash equal {same_run}, resume equals straight-through {same_resume}, "
                    f"dataset hash stable {same_data}")
    assert same_run and same_resume and same_data


# ------------------------------------------------------------- 8. throughput

@pytest.mark.criterion(8, "inference throughput")
def test_throughput(request):
    cfg = ModelConfig()
    params = init_params(cfg, 0)
    x = np.random.default_rng(0).random((16, 3, 64, 64)).astype(np.float32)
    predict_group(params, cfg, x[:2])
    times = []
    for _ in range(3):
        t0 = time.perf_counter()
        predict_group(params, cfg, x, use_gam=True)
        times.append(time.perf_counter() - t0)
    detail(request, f"N=16 64x64 GAM-path group: median {np.median(times) * 1000:.0f} ms (need < 1000)")
    assert np.median(times) < 1.0
