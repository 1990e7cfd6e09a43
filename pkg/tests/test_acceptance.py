"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -s``; the lines are also
repeated in the terminal summary of a normal run. The training criteria
share runs through module-scoped fixtures (five desk-config runs in total).
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from texstat.attention import window_merge, window_partition
from texstat.config import bundled_config
from texstat.data import SynthParams, save_pair, synth
from texstat.gradsuite import run_suite
from texstat.ksco import kurtosis, quantization_levels, quantized_intensity
from texstat.metrics import confusion, dice, hd95, jaccard
from texstat.metrics import accuracy, ge, miou
from texstat.model import TextureUNet, build, load_checkpoint, save_checkpoint
from texstat.tensor import Tensor, no_grad
from texstat.training import mean_dice, train

from oracles import brute_hd95, brute_rates, scalar_kurtosis

pytestmark = pytest.mark.slow

DESK_MODEL, DESK_TRAIN = bundled_config("desk")
OVERFIT_SEED = 7
EVAL_EVERY = 10


# --- 1 ---------------------------------------------------------------------------------------

def test_gradient_suite(acceptance):
    start = time.perf_counter()
    results = run_suite("all", tol=1e-4)
    elapsed = time.perf_counter() - start
    bad = [r.name for r in results if not r.ok]
    worst = max(r.report.max_rel_error for r in results)
    ok = not bad and elapsed <= 120
    assert acceptance(1, ok, f"gradient suite {len(results) - len(bad)}/{len(results)} within 1e-4 "
                             f"(worst {worst:.2e}) in {elapsed:.1f}s (limit 120s){'; failed: ' + ','.join(bad) if bad else ''}")


# --- 2 ---------------------------------------------------------------------------------------

def test_ksco_oracles(acceptance):
    rng = np.random.default_rng(2024)
    worst_k = 0.0
    for _ in range(100):
        v = rng.normal(size=int(rng.integers(5, 200))) * rng.uniform(0.1, 10)
        ref = scalar_kurtosis(v.tolist())
        worst_k = max(worst_k, abs(kurtosis(v.reshape(1, 1, -1)).kurtosis - ref) / ref)

    k_gauss = kurtosis(np.random.default_rng(0).standard_normal(100_000).reshape(1, 1, -1)).kurtosis

    worst_s, exclusive, top_exact = 0.0, True, True
    for _ in range(100):
        fa = rng.random((1, int(rng.integers(3, 12)), int(rng.integers(3, 12))))
        n = int(rng.integers(2, 32))
        t = Tensor(fa)
        lv, stats = quantization_levels(t, n), kurtosis(t)
        s = quantized_intensity(t, lv, stats).s.data
        top_exact &= lv.levels[-1] == fa.max()
        k = abs(scalar_kurtosis(fa.ravel().tolist()))
        for i, x in enumerate(fa.ravel().tolist()):
            col = s[:, i]
            exclusive &= np.count_nonzero(col) <= 1
            for j in range(n):
                d = abs(x - float(lv.levels[j]))
                expect = k * math.exp(d - 1) if d < lv.half_width else 0.0
                worst_s = max(worst_s, abs(col[j] - expect))

    checks = {
        "kurtosis rel err <= 1e-9": worst_k <= 1e-9,
        "gaussian kurtosis in [2.8, 3.2]": 2.8 <= k_gauss <= 3.2,
        "bin exclusivity": bool(exclusive),
        "embedding abs err <= 1e-12": worst_s <= 1e-12,
        "W_N == max": bool(top_exact),
    }
    failed = [k for k, v in checks.items() if not v]
    assert acceptance(2, not failed, f"KSCO oracles: kurtosis rel err {worst_k:.1e}, gaussian K {k_gauss:.4f}, "
                                     f"embedding err {worst_s:.1e}, exclusivity {exclusive}, W_N exact {top_exact}"
                                     f"{'; failed: ' + ', '.join(failed) if failed else ''}")


# --- 3 ---------------------------------------------------------------------------------------

def test_metrics_oracles(acceptance):
    rng = np.random.default_rng(33)
    rate_mismatch = identity_mismatch = 0
    for _ in range(1000):
        pred, gt = rng.random((3, 3)) > 0.5, rng.random((3, 3)) > 0.5
        c = confusion(pred, gt)
        got = {"dice": dice(c), "ja": jaccard(c), "miou": miou(c), "ac": accuracy(c), "ge": ge(c)}
        rate_mismatch += got != brute_rates(pred, gt)
        identity_mismatch += abs(dice(c) - 2 * jaccard(c) / (1 + jaccard(c))) > 1e-12
    hd_mismatch = 0
    for _ in range(200):
        h, w = rng.integers(1, 17, size=2)
        density = rng.uniform(0.05, 0.9)
        a, b = rng.random((h, w)) < density, rng.random((h, w)) < density
        hd_mismatch += hd95(a, b) != brute_hd95(a, b)
    ok = rate_mismatch == identity_mismatch == hd_mismatch == 0
    assert acceptance(3, ok, f"metrics oracles: {1000 - rate_mismatch}/1000 exact rate matches, "
                             f"{1000 - identity_mismatch}/1000 dice-ja identities, {200 - hd_mismatch}/200 exact HD95")


# --- shared training runs ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def overfit_set():
    return synth(SynthParams(count=8, size=64, seed=OVERFIT_SEED))


class Runs:
    def __init__(self, data):
        self.data = data
        self.cache = {}

    def get(self, key, **flags):
        if key not in self.cache:
            cfg = dataclasses.replace(DESK_MODEL, **flags)
            start = time.perf_counter()
            res = train(build(cfg), self.data, DESK_TRAIN, eval_every=EVAL_EVERY)
            elapsed = time.perf_counter() - start
            self.cache[key] = (res, elapsed, mean_dice(res.model, self.data))
        return self.cache[key]


@pytest.fixture(scope="module")
def runs(overfit_set):
    return Runs(overfit_set)


# --- 4 ---------------------------------------------------------------------------------------

def test_overfit_training(acceptance, runs):
    res, elapsed, final = runs.get("full")
    again, _, _ = runs.get("full-repeat")
    drift = max(abs(a.loss - b.loss) for a, b in zip(res.trace, again.trace))
    ok = (len(res.trace) <= 200 and res.best_val_dice >= 0.95 and elapsed <= 600 and drift <= 1e-6
          and len(again.trace) == len(res.trace))
    assert acceptance(4, ok, f"overfit on 8 synth samples: best train Dice {res.best_val_dice:.4f} at epoch "
                             f"{res.best_epoch} (final {final:.4f}) over {len(res.trace)} epochs in {elapsed:.0f}s "
                             f"(limit 600s); max per-epoch loss drift between seeded runs {drift:.1e}")


def test_overfit_loss_descends_early(runs):
    res, _, _ = runs.get("full")
    losses = [r.loss for r in res.trace[:11]]
    assert sum(b <= a for a, b in zip(losses, losses[1:])) >= 8, losses


# --- 5 ---------------------------------------------------------------------------------------

ABLATIONS = {
    "baseline": dict(enable_stft=False, enable_stet=False),
    "+stft": dict(enable_stet=False),
    "full": {},
    "full-no-tffn": dict(enable_tffn=False),
}


def param_names(flags):
    return {n for n, _ in TextureUNet(dataclasses.replace(DESK_MODEL, **flags)).named_parameters()}


def test_ablations(acceptance, runs):
    scores = {}
    for key, flags in ABLATIONS.items():
        res, _, final = runs.get(key, **flags)
        scores[key] = res.best_val_dice if all(math.isfinite(r.loss) for r in res.trace) else float("nan")
    names = {k: param_names(f) for k, f in ABLATIONS.items()}
    deltas_ok = (
        names["baseline"] < names["+stft"] < names["full"]
        and all(n.startswith("stft.") for n in names["+stft"] - names["baseline"])
        and all(n.startswith("stet.") for n in names["full"] - names["+stft"])
        and names["full"] - names["full-no-tffn"] == {n for n in names["full"] if n.startswith("stet.tffn.")}
        and names["full-no-tffn"] <= names["full"]
    )
    ok = deltas_ok and scores["baseline"] >= 0.90 and scores["full"] >= 0.90 and all(
        math.isfinite(v) for v in scores.values())
    table = ", ".join(f"{k} {v:.4f}" for k, v in scores.items())
    assert acceptance(5, ok, f"ablations trained (best Dice: {table}); name deltas exact: {deltas_ok}")


# --- 6 ---------------------------------------------------------------------------------------

def test_round_trips(acceptance, tmp_path):
    model = build(DESK_MODEL)
    model.stft.alpha.data[...] = 0.73
    save_checkpoint(model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    x = np.random.default_rng(5).random((2, 3, 64, 64)).astype(np.float32)
    with no_grad():
        ckpt_ok = np.array_equal(model(x).data, loaded(x).data)

    rng = np.random.default_rng(6)
    window_ok = True
    for shape, k in [((4, 8, 8), 4), ((2, 3, 12, 6), 3), ((5, 16, 16), 8), ((1, 2, 2), 1)]:
        f = rng.normal(size=shape)
        window_ok &= np.array_equal(window_merge(window_partition(Tensor(f), k), k, shape).data, f)

    for name in ("a", "b"):
        for s in synth(SynthParams(count=8, size=64, seed=OVERFIT_SEED)):
            save_pair(s, tmp_path / name)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    synth_ok = len(files) == 16 and all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    ok = ckpt_ok and window_ok and synth_ok
    assert acceptance(6, ok, f"round trips: checkpoint bitwise {ckpt_ok}, window partition/merge {window_ok}, "
                             f"synth byte-identical {synth_ok}")


# --- 7 ---------------------------------------------------------------------------------------

def test_shape_contracts(acceptance):
    large_model = build(bundled_config("large")[0])
    shapes = {}
    with no_grad():
        for size, model in ((64, build(DESK_MODEL)), (256, large_model)):
            x = np.random.default_rng(size).random((3, size, size)).astype(np.float32)
            shapes[size] = model(x).shape
    count = large_model.num_parameters()
    ok = shapes[64] == (1, 64, 64) and shapes[256] == (1, 256, 256) and abs(count - 12.4e6) <= 0.2 * 12.4e6
    assert acceptance(7, ok, f"shapes: 64 -> {shapes[64]}, 256 -> {shapes[256]}; large-config parameters "
                             f"{count / 1e6:.2f} M (target 12.4 M +/- 20%)")
