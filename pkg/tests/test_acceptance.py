"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected in ``conftest.ACCEPTANCE`` and shown in the pytest
terminal summary; they are also printed directly (visible with ``-s``).
"""

import time

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE
from fgsi import autodiff as ad
from fgsi.autodiff import Tensor
from fgsi.bag_attention import bag_repr, gate_and_normalize, sentence_relevance
from fgsi.classifier import predict_probs
from fgsi.corpus import SynthConfig, build_bags, generate_synthetic
from fgsi.embedding import intra_attention, segment_by_boundaries, segment_vectors
from fgsi.encoder import FilterBank, convolve, piecewise_max_pool
from fgsi.evaluation import PredictionRecord, p_at_n, pr_auc, pr_csv, pr_curve
from fgsi.model import BatchLayout
from fgsi.pipeline import ablation_of, build_model, desk_config, evaluate, gradient_check, run_synthetic, tiny_model, train
from fgsi.trainer import AdamState, adam_step, checkpoint_bytes, fit, parse_checkpoint

SEEDS = (0, 1, 2, 3, 4)


def report(key: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[key] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")
    assert ok, f"{key}: {detail}"


# ---------------------------------------------------------------- 1


def test_1_end_to_end_gradient_check():
    t0 = time.perf_counter()
    rep = gradient_check(seed=0, tol=1e-4, h=1e-5)
    secs = time.perf_counter() - t0
    worst = max(e.rel_error for e in rep.elements)
    report("1 gradient check", rep.passed and secs < 60,
           f"{len(rep.elements)} elements, worst relative error {worst:.2e} (tol 1e-4), {secs:.1f}s (< 60s)")


# ---------------------------------------------------------------- 2


def gated_tiny_model():
    """Tiny model with beta = 0 and a gold-relation query that gates out exactly sentence 2."""
    model, sentences = tiny_model(seed=0, beta=0.0)
    prepared = model.prepare(build_bags(sentences))
    layout = BatchLayout.stack(prepared)
    gold = prepared[0].gold
    with ad.no_grad():
        P = model.forward(layout, [gold]).features.data
    # P @ q = (1, 1, -1): sentences 0 and 1 positive, sentence 2 negative
    model.store["Q_relation"].data[gold] = np.linalg.pinv(P) @ np.array([1.0, 1.0, -1.0])
    return model, sentences, prepared, layout, gold


def test_2_gate_boundary():
    model, sentences, prepared, layout, gold = gated_tiny_model()
    with ad.no_grad():
        res = model.forward(layout, [gold])
    assert res.survivors.tolist() == [0, 1] and not res.fallback.any()

    def loss_value():
        with ad.no_grad():
            return model.loss(prepared)[0].item()

    own = {model.vocab.index(t) for t in sentences[2].tokens}
    shared = {model.vocab.index(t) for s in sentences[:2] for t in s.tokens}
    rows = sorted(own - shared)
    E = model.store["E"].data
    base = loss_value()
    worst = 0.0
    for r in rows:
        for c in range(E.shape[1]):
            for step in (1e-5, 1e-2):
                old = E[r, c]
                E[r, c] = old + step
                worst = max(worst, abs(loss_value() - base))
                E[r, c] = old
    with ad.Tape() as tape:
        loss, _ = model.loss(prepared)
    grad_rows_zero = not ad.backward(tape, loss)[model.store["E"]][rows].any()

    def closure():
        return model.loss(prepared)[0]

    check = ad.grad_check(closure, model.store, h=1e-5, tol=1e-4)
    ok = bool(rows) and worst < 1e-10 and grad_rows_zero and check.passed
    report("2 gate boundary", ok,
           f"{len(rows)} rows unique to the gated sentence, max |dloss| {worst:.1e} (< 1e-10), "
           f"analytic grad zero: {grad_rows_zero}, survivors' gradcheck passed: {check.passed}")


# ---------------------------------------------------------------- 3


def test_3_oracle_equivalence():
    worst = {"convolve": 0.0, "piecewise_max_pool": 0.0, "piece weights": 0.0, "gated bag": 0.0,
             "classifier": 0.0}
    for trial in range(1000):
        rng = np.random.default_rng([3, trial])
        m, k = int(rng.integers(2, 10)), int(rng.integers(1, 5))
        widths = tuple(sorted(rng.choice([1, 2, 3, 4, 5], size=int(rng.integers(1, 3)), replace=False)))
        W = {int(w): rng.normal(size=(2, int(w), k)) for w in widths}
        b = {int(w): rng.normal(size=2) for w in widths}
        X = rng.normal(size=(m, k))
        bank = FilterBank({w: Tensor(W[w]) for w in W}, {w: Tensor(b[w]) for w in b})
        maps = convolve(Tensor(X), bank).data
        worst["convolve"] = max(worst["convolve"], np.abs(maps - oracles.conv(X, W, b)).max())

        a, c = sorted(int(v) for v in rng.choice(m, 2, replace=False))
        seg = segment_by_boundaries(m, a, c)
        pooled = piecewise_max_pool(Tensor(maps), seg.piece_ids(), 1).data[0]
        worst["piecewise_max_pool"] = max(worst["piecewise_max_pool"],
                                          np.abs(pooled - oracles.piece_max(maps, seg.pieces)).max())

        q = rng.normal(size=k)
        alpha = intra_attention(segment_vectors(Tensor(X), seg.piece_ids(), 1), Tensor(q)).data[0]
        worst["piece weights"] = max(worst["piece weights"],
                                     np.abs(alpha - oracles.piece_weights(X, seg.pieces, q)).max())

        t, d = int(rng.integers(1, 7)), int(rng.integers(1, 8))
        P, qf = rng.normal(size=(t, d)), rng.normal(size=d)
        beta = float(rng.choice([-1.0, 0.0, 0.3]))
        gw = gate_and_normalize(sentence_relevance(Tensor(P), Tensor(qf)), beta)
        keep, gamma, g = oracles.gated_bag(P, qf, beta)
        assert gw.survivors.tolist() == keep
        got_g = bag_repr(Tensor(P), gw).data[0]
        worst["gated bag"] = max(worst["gated bag"], np.abs(gw.gamma.data - gamma).max(), np.abs(got_g - g).max())

        h = int(rng.integers(2, 8))
        Wo, bo = rng.normal(size=(h, d)), rng.normal(size=h)
        probs = predict_probs(Tensor(g), Tensor(Wo), Tensor(bo)).data
        worst["classifier"] = max(worst["classifier"], np.abs(probs - oracles.class_probs(g, Wo, bo)).max())
    ok = all(v <= 1e-12 for v in worst.values())
    report("3 oracle equivalence", ok,
           "1000 trials each, worst abs diff " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (<= 1e-12)")


# ---------------------------------------------------------------- 4


def test_4_normalization():
    rng = np.random.default_rng(4)
    n = 10_000
    seg_vecs = rng.normal(size=(3 * n, 6)) * rng.uniform(0.01, 100, size=(3 * n, 1))
    queries = np.repeat(rng.normal(size=(n, 6)), 3, axis=0)
    alpha = intra_attention(Tensor(seg_vecs), Tensor(queries)).data
    err_alpha = np.abs(alpha.sum(axis=1) - 1).max()

    sizes = rng.integers(1, 9, size=n)
    groups = np.repeat(np.arange(n), sizes)
    e = rng.uniform(-1, 1, size=len(groups))
    beta = rng.choice([-1.0, 0.0, 0.5], size=n)[groups]
    # the gate takes a scalar beta; run each threshold separately
    err_gamma = 0.0
    for b in (-1.0, 0.0, 0.5):
        sel = np.flatnonzero(beta == b)
        bag_ids, local = np.unique(groups[sel], return_inverse=True)
        w = gate_and_normalize(Tensor(e[sel]), b, local, len(bag_ids))
        sums = np.bincount(w.groups, weights=w.gamma.data, minlength=len(bag_ids))
        err_gamma = max(err_gamma, np.abs(sums - 1).max())

    g = rng.normal(size=(n, 12)) * rng.uniform(0.01, 30, size=(n, 1))
    probs = predict_probs(Tensor(g), Tensor(rng.normal(size=(9, 12))), Tensor(rng.normal(size=9))).data
    err_probs = np.abs(probs.sum(axis=1) - 1).max()
    ok = max(err_alpha, err_gamma, err_probs) <= 1e-9
    report("4 normalization", ok, f"10,000 inputs each, max |sum - 1|: alpha {err_alpha:.1e}, "
           f"gamma {err_gamma:.1e}, probs {err_probs:.1e} (<= 1e-9)")


# ---------------------------------------------------------------- 5


def test_5_adam():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([0.5])}, AdamState.zeros_like(p), 0.01)
    hand = -0.01 * 0.5 / (0.5 + 1e-8)
    err = abs(p["w"][0] - hand)

    q = {"w": np.array([1.0])}
    state = AdamState.zeros_like(q)
    reached = None
    for step in range(1, 2001):
        adam_step(q, {"w": 2 * q["w"]}, state, 0.01)
        if reached is None and abs(q["w"][0]) < 1e-3:
            reached = step
    ok = err <= 1e-9 and reached is not None and abs(q["w"][0]) < 1e-3
    report("5 adam", ok, f"hand trace error {err:.1e} (<= 1e-9), update {p['w'][0]:.11f}; "
           f"w^2 reaches |w| < 1e-3 at step {reached}, |w| after 2000 steps {abs(q['w'][0]):.1e}")


# ---------------------------------------------------------------- 6


@pytest.fixture(scope="module")
def synthetic_runs():
    """Protocol fixed in advance: desk config, 30 epochs, beta 0, same settings for the control."""
    rows = []
    for seed in SEEDS:
        cfg = desk_config(seed=seed)
        clean = run_synthetic(cfg, SynthConfig(seed=seed, noise_rate=0.0))
        noisy = SynthConfig(seed=seed, noise_rate=0.3)
        full = run_synthetic(cfg, noisy)
        control = run_synthetic(ablation_of(cfg), noisy)
        rows.append((seed, clean, full, control))
    return rows, sum(f.seconds + c.seconds for _, _, f, c in rows)


def test_6a_clean_precision(synthetic_runs):
    rows, secs = synthetic_runs
    p50 = [clean.p_at[50] for _, clean, _, _ in rows]
    epochs = max(clean.epochs for _, clean, _, _ in rows)
    ok = all(p >= 0.9 for p in p50) and epochs <= 50
    report("6 (a) clean P@50", ok, "P@50 per seed " + ", ".join(f"{p:.2f}" for p in p50) +
           f" (>= 0.90 on every seed), {epochs} epochs (<= 50)")


def test_6b_denoising_vs_control(synthetic_runs):
    rows, secs = synthetic_runs
    wins = sum(full.auc > control.auc for _, _, full, control in rows)
    pairs = ", ".join(f"{full.auc:.3f}/{control.auc:.3f}" for _, _, full, control in rows)
    ok = wins >= 4 and secs < 15 * 60
    report("6 (b) noisy AUC vs control", ok,
           f"full/control AUC per seed {pairs}; full ahead on {wins}/5 (>= 4); experiment {secs:.0f}s (< 900s)")


# ---------------------------------------------------------------- 7


def test_7_determinism():
    synth = SynthConfig(seed=7, noise_rate=0.3)
    train_set, test_set, _ = generate_synthetic(synth)
    cfg = desk_config(seed=7, epochs=2)
    outputs = []
    for _ in range(2):
        run = train(cfg, train_set, words=synth.words())
        res = evaluate(run.model, test_set)
        outputs.append((checkpoint_bytes(run.model, run.state, run.batches_per_epoch),
                        pr_csv(res.curve), res.pn_report(cfg.to_dict(), cfg.seed)))
    same = outputs[0] == outputs[1]

    run = train(cfg, train_set, words=synth.words())
    k = 7      # mid-epoch: 10 batches per epoch
    partial = build_model(cfg, train_set, words=synth.words())
    bags = build_bags(train_set)
    state, _ = fit(partial, bags, until_step=k)
    ck = parse_checkpoint(checkpoint_bytes(partial, state, run.batches_per_epoch))
    resumed_state, _ = fit(ck.model, bags, state=ck.state)
    resumed = checkpoint_bytes(ck.model, resumed_state, run.batches_per_epoch)
    exact = resumed == checkpoint_bytes(run.model, run.state, run.batches_per_epoch)
    report("7 determinism", same and exact,
           f"repeat runs byte-identical (checkpoint, PR csv, P@N json): {same}; "
           f"resume at step {k} of {run.state.t} bit-exact: {exact}")


# ---------------------------------------------------------------- 8


def test_8_metric_fixture():
    records = [PredictionRecord("a", "b", "r", 0.9, True), PredictionRecord("c", "d", "r", 0.8, False),
               PredictionRecord("e", "f", "r", 0.7, True)]
    curve = pr_curve(records, 2)
    points = [(p.precision, p.recall) for p in curve]
    expect = [(1.0, 0.5), (0.5, 0.5), (2 / 3, 1.0)]
    auc = pr_auc(curve)
    ok = (all(abs(a - c) < 1e-12 and abs(b - d) < 1e-12 for (a, b), (c, d) in zip(points, expect))
          and len(points) == 3 and abs(auc - (0.5 + 1 / 3)) < 1e-12 and p_at_n(records, 2) == 0.5)
    report("8 metric fixture", ok, "points " + ", ".join(f"({p:.3f}, {r:.2f})" for p, r in points) +
           f"; AUC {auc:.4f} (hand 0.8333); P@2 {p_at_n(records, 2)}")
