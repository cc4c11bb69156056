"""The ten acceptance criteria, one test each, at their stated tolerances.

Every test records a single PASS/FAIL line which is printed in the terminal
summary.  Pilot numbers frozen here were produced by the same code on seeds
that are listed next to them.
"""

import itertools
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE, make_table
from selconf.acr import acr_table, acr_train, init_heads, input_width
from selconf.analysis import ErrorMoments, alpha_star, j_alpha
from selconf.confidence import doctor_table, mcd_table, msp_table
from selconf.dataset import ConfidenceTable, Split, split_roles
from selconf.errors import InfeasibleThresholdError
from selconf.metrics import aurc, c_at_r, oracle_metrics, rc_curve, threshold_transfer
from selconf.neural import TrainConfig, bce_grad, bce_loss, init_mlp, mlp_backward, mlp_forward, sample_masks, train_binary_head
from selconf.pipeline import PIPELINE_TRAIN, relative_gain, run_pipeline, run_seed
from selconf.synth import SynthConfig, generate, s_star_table

import oracles

# relative AURC gain of ACR over MSP per seed, recorded from the pilot run
PILOT_GAIN = {0: 0.032579, 1: 0.036818, 2: 0.056167, 3: 0.072960, 4: 0.036065}
RISKS = (0.0, 0.1, 0.2, 0.25, 1 / 3, 0.5)


def verdict(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def headline():
    start = time.perf_counter()
    result = run_pipeline(range(5))
    return result, time.perf_counter() - start


def brute_batch(conf, correct):
    """Threshold enumeration for D score draws of one correctness pattern.

    Returns, per draw, the AURC from the enumerated points and a function
    giving brute-force C@R.
    """
    d, n = conf.shape
    err = 1 - np.asarray(correct)
    cand = np.concatenate([conf, np.full((d, 1), -np.inf)], axis=1)
    accept = conf[:, None, :] > cand[:, :, None]
    counts = accept.sum(axis=2)
    errors = (accept & (err[None, None, :] == 1)).sum(axis=2)
    out = []
    for row in range(d):
        pts = {}
        for j in range(n + 1):
            a = int(counts[row, j])
            if a:
                pts[a] = (float(cand[row, j]), a / n, int(errors[row, j]) / a)
        pts = [pts[a] for a in sorted(pts)]
        prev, products = 0.0, []
        for _, cov, risk in pts:
            products.append(risk * (cov - prev))
            prev = cov
        out.append((float(np.sum(np.array(products))), pts))
    return out


def test_criterion_1_metric_oracle_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    tables = mismatches = 0
    for n in range(1, 11):
        ids = tuple(f"r{i}" for i in range(n))
        for pattern in itertools.product((0, 1), repeat=n):
            correct = np.array(pattern)
            # half the draws are continuous, half sit on a coarse grid to force ties
            conf = rng.uniform(size=(50, n))
            conf[25:] = np.round(conf[25:] * 4) / 4
            for row, (brute_aurc, pts) in zip(conf, brute_batch(conf, correct)):
                curve = rc_curve(ConfidenceTable(ids, row, correct))
                tables += 1
                if aurc(curve) != brute_aurc:
                    mismatches += 1
                    continue
                for r in RISKS:
                    best = (0.0, None)
                    for g, cov, risk in pts:
                        if risk <= r and cov > best[0]:
                            best = (cov, g)
                    if c_at_r(curve, r) != best:
                        mismatches += 1
                        break
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10.0
    verdict(1, ok, f"{tables} tables (n<=10, all patterns x 50 draws), {mismatches} mismatches, {elapsed:.1f}s (limit 10s)")


def test_criterion_2_rank_invariance():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(5, 500))
        x = rng.uniform(size=n)
        if rng.random() < 0.3:
            x = np.round(x * 10) / 10  # include ties
        c = rng.integers(0, 2, n)
        base = aurc(make_table(x, c))
        for y in (x**3, 1 / (1 + np.exp(-(5 * x - 2)))):
            worst = max(worst, abs(aurc(make_table(y, c)) - base))
    verdict(2, worst <= 1e-12, f"max |dAURC| over 100 tables x 2 transforms = {worst:.2e} (tol 1e-12)")


def test_criterion_3_oracle_dominance(headline):
    result, _ = headline
    checked = violations = 0
    for run in result.runs:
        oracle = run.reports["oracle"].aurc
        for table in run.tables.values():
            checked += 1
            violations += aurc(table) < oracle - 1e-15
    configs = [
        SynthConfig(n=5000, seed=11),
        SynthConfig(n=5000, tau=0.0, logit_noise=0.0, seed=12),
        SynthConfig(n=5000, k_classes=2, feat_dim=8, seed=13),
        SynthConfig(n=3000, k_classes=42, feat_dim=64, mc_passes=2, seed=14),
    ]
    for cfg in configs:
        data, s_star = generate(cfg)
        oracle = oracle_metrics(data.correct).aurc
        heads = init_heads(input_width(("fused_features", "logits"), cfg.k_classes, cfg.feat_dim), TrainConfig(seed=cfg.seed))
        for table in (msp_table(data), mcd_table(data), doctor_table(data), s_star_table(data, s_star), acr_table(heads, data)):
            checked += 1
            violations += aurc(table) < oracle - 1e-15
    verdict(3, violations == 0, f"{checked} (method, dataset) pairs, {violations} with AURC below the oracle")


def test_criterion_4_gradient_checks():
    rng = np.random.default_rng(99)
    start = time.perf_counter()
    worst = 0.0
    failures = 0
    for i in range(20):
        depth = i % 4 + 1
        d_in, hidden, batch = int(rng.integers(2, 7)), int(rng.integers(2, 9)), int(rng.integers(1, 6))
        params = init_mlp(d_in, hidden, depth, rng)
        params = params.with_arrays([a + rng.normal(0, 0.2, a.shape) for a in params.arrays()])
        x = rng.normal(size=(batch, d_in))
        t = rng.integers(0, 2, batch).astype(float)
        p = 0.3 if i % 2 else 0.0
        masks = sample_masks(params, batch, p, rng) if p else None
        out, cache = mlp_forward(params, x, masks, p)
        analytic = mlp_backward(params, cache, bce_grad(out, t)).flat()

        def loss(vec):
            o, _ = mlp_forward(params.from_flat(vec), x, masks, p)
            return float(np.sum(bce_loss(o, t)))

        numeric = oracles.central_difference(loss, params.flat(), 1e-5)
        diff = np.abs(analytic - numeric)
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        rel = np.where(diff <= 1e-8, 0.0, diff / np.maximum(scale, 1e-300))
        worst = max(worst, float(rel.max()))
        failures += bool(np.any(rel >= 1e-4))
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 30.0
    verdict(4, ok, f"20 nets (depth 1-4, half with dropout), max rel err {worst:.2e} (tol 1e-4), {elapsed:.1f}s (limit 30s)")


def test_criterion_5_closed_form_alpha():
    rng = np.random.default_rng(5)
    grid = np.linspace(0.0, 1.0, 1001)
    bad = 0
    count = 0
    while count < 1000:
        s_m, s_r = rng.uniform(1e-3, 1.0, 2)
        bound = math.sqrt(s_m * s_r)
        s_mr = rng.uniform(-bound, min(s_m, s_r, bound))
        if not s_mr < min(s_m, s_r):
            continue
        count += 1
        m = ErrorMoments(s_m, s_r, s_mr, 1)
        a = alpha_star(m)
        j = grid**2 * s_m + (1 - grid) ** 2 * s_r + 2 * grid * (1 - grid) * s_mr
        ok = 0 < a < 1 and abs(grid[np.argmin(j)] - a) <= 0.001 and j_alpha(m, a) < min(s_m, s_r)
        bad += not ok
    ref = ErrorMoments(0.1542, 0.4517, 0.0966, 1)
    a_ref = alpha_star(ref)
    j_ref = j_alpha(ref, a_ref)
    ref_ok = abs(a_ref - 0.8604) <= 0.0005 and abs(j_ref - 0.1462) <= 0.0005
    verdict(
        5,
        bad == 0 and ref_ok,
        f"1000 triples, {bad} failures; reference row alpha* {a_ref:.4f} (0.8604 +- 5e-4), J {j_ref:.4f} (0.1462 +- 5e-4)",
    )


def test_criterion_6_headline(headline):
    result, elapsed = headline
    gains, ece_ok, cond_ok, alpha_ok, frozen_ok = [], True, True, True, True
    for run in result.runs:
        g = relative_gain(run)
        gains.append(g)
        frozen_ok &= abs(g - PILOT_GAIN[run.seed]) <= 1e-4
        ece_ok &= run.reports["acr"].ece < run.reports["msp"].ece
        cond_ok &= bool(run.fusion["fusion_condition"])
        a = run.alpha
        alpha_ok &= a["variance"] > 1e-4 and a["frac_below"] + a["frac_above"] < 0.05
    gain_ok = all(g >= 0.02 for g in gains)
    ok = gain_ok and ece_ok and cond_ok and alpha_ok and frozen_ok and elapsed < 600
    detail = (
        f"gain {min(gains):.2%} min [{' '.join(f'{g:.2%}' for g in gains)}] (>= 2%), "
        f"ECE {'ok' if ece_ok else 'FAIL'}, fusion condition {'ok' if cond_ok else 'FAIL'}, "
        f"alpha spread {'ok' if alpha_ok else 'FAIL'}, pilot match {'ok' if frozen_ok else 'FAIL'}, {elapsed:.0f}s (limit 600s)"
    )
    verdict(6, ok, detail)


def test_criterion_7_calibrated_no_harm():
    cfg = SynthConfig(tau=0.0, logit_noise=0.0)
    run = run_seed(0, cfg)
    data, s_star = generate(replace(cfg, seed=0))
    test_ids = set(run.tables["msp"].ids)
    keep = [i for i, key in enumerate(data.ids) if key in test_ids]
    post = s_star_table(data.subset(keep, Split.TEST), s_star)
    msp_aurc = run.reports["msp"].aurc
    gap_bayes = abs(msp_aurc - aurc(post))
    gap_acr = abs(run.reports["acr"].aurc - msp_aurc)
    ok = gap_bayes <= 0.01 and gap_acr <= 0.005
    verdict(
        7,
        ok,
        f"seed 0: |MSP - s*| {100 * gap_bayes:.3f}%p (<= 1), |ACR - MSP| {100 * gap_acr:.3f}%p (<= 0.5)",
    )


def test_criterion_8_threshold_transfer():
    data, _ = generate(SynthConfig(n=30_000, seed=0))
    parts = split_roles(data, [1 / 6, 1 / 6, 4 / 6], [Split.VAL_F, Split.VAL_G, Split.TEST], 0)
    val_f, val_g, test = parts[Split.VAL_F], parts[Split.VAL_G], parts[Split.TEST]
    heads, _ = acr_train(val_f, val_g, replace(PIPELINE_TRAIN, seed=0))
    worst, cells = 0.0, []
    for name, make in (("msp", msp_table), ("acr", lambda es: acr_table(heads, es))):
        for r in (0.05, 0.10, 0.20):
            try:
                res = threshold_transfer(make(val_g), make(test), r)
                dr = abs(res.delta_risk)
                cells.append(f"{name}@{r:.0%}={100 * dr:.3f}")
            except InfeasibleThresholdError:  # counts as a failure
                dr = math.inf
                cells.append(f"{name}@{r:.0%}=infeasible")
            worst = max(worst, dr)
    verdict(8, worst <= 0.01, f"seed 0, 5k Val-g / 20k Test, |dR| %p: {' '.join(cells)} (<= 1)")


def test_criterion_9_degenerate_mcd():
    data, _ = generate(SynthConfig(n=20_000, mc_noise=0.0, seed=3))
    gap = float(np.max(np.abs(mcd_table(data).confidence - msp_table(data).confidence)))
    two, _ = generate(SynthConfig(n=20_000, k_classes=2, feat_dim=8, mc_passes=0, seed=4))
    m, d = msp_table(two), doctor_table(two)
    same_aurc = aurc(m) == aurc(d)
    same_car = all(c_at_r(m, r)[0] == c_at_r(d, r)[0] for r in (0.01, 0.05, 0.10, 0.20))
    ok = gap <= 1e-12 and same_aurc and same_car
    verdict(9, ok, f"max |MCD - MSP| {gap:.1e} (tol 1e-12); K=2 Doctor vs MSP AURC equal {same_aurc}, C@R equal {same_car}")


def test_criterion_10_bce_fixed_point():
    cfg = TrainConfig(learning_rate=1e-3, early_stop_metric="none")
    means = []
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        x = rng.normal(size=(4000, 4))
        y = (rng.random(4000) < 0.3).astype(float)
        params, _ = train_binary_head(init_mlp(4, 8, 3, np.random.default_rng(seed)), x, y, replace(cfg, seed=seed))
        means.append(float(np.mean(mlp_forward(params, x)[0])))
    worst = max(abs(m - 0.3) for m in means)
    verdict(10, worst <= 0.02, f"mean outputs {' '.join(f'{m:.3f}' for m in means)}, max |mean - 0.3| {worst:.3f} (tol 0.02)")
