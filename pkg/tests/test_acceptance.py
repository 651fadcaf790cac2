"""Acceptance criteria 1-9, each reported as one PASS/FAIL line in the terminal summary."""

import csv
import hashlib
import json
import shutil
import time
from collections import defaultdict

import numpy as np
import pytest

from geomtl import cli
from geomtl.metrics import UndefinedMetricError, pr_auc
from geomtl.numcore import (
    Adam,
    BatchNormLayer,
    DenseLayer,
    bce_loss,
    grad_check,
    relu_backward,
    relu_forward,
    sigmoid,
)
from geomtl.towers import Batch, BaselineModel, MtlModel, TowerConfig
from geomtl.worldgen import DataConfig, build_datasets, build_world

from conftest import ACCEPTANCE

SEEDS = (0, 1, 2)


def report(n, ok, detail):
    ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, detail


def _batch(rng, cfg, n, groups=None):
    g = rng.integers(0, cfg.num_groups, n) if groups is None else np.asarray(groups)
    return Batch(rng.normal(size=(n, cfg.user_dim)), rng.normal(size=(n, cfg.title_dim)),
                 (rng.random(n) < 0.5).astype(float), g)


# ------------------------------------------------------------ 1: gradients

def _layer_case(kind, rng):
    x = rng.normal(size=(6, 4))
    c = rng.normal(size=(6, 3))
    if kind == "dense":
        d = DenseLayer(4, 3, rng)

        def fn():
            loss = float(np.sum(c * d.forward(x)))
            _, gw, gb = d.backward(c)
            return loss, [gw, gb]
        return fn, [d.weight, d.bias]
    if kind == "batchnorm":
        bn = BatchNormLayer(4)
        bn.gamma[:] = rng.normal(size=4)
        bn.beta[:] = rng.normal(size=4)
        c4 = rng.normal(size=(6, 4))

        def fn():
            loss = float(np.sum(c4 * bn.forward(x)))
            gx, gg, gb = bn.backward(c4)
            return loss, [gx, gg, gb]
        return fn, [x, bn.gamma, bn.beta]
    # relu followed by sigmoid-BCE on a linear read-out
    w = rng.normal(size=4)
    y = (rng.random(6) < 0.5).astype(float)

    def fn():
        h = relu_forward(x)
        p = sigmoid(h @ w)
        loss, gp = bce_loss(p, y)
        gz = gp * p * (1 - p)
        gh = gz[:, None] * w[None, :]
        return loss, [relu_backward(x, gh), h.T @ gz]
    return fn, [x, w]


def _model_case(kind, rng, seed):
    cfg = TowerConfig(4, 3, hidden_dim=4, num_groups=3 if kind == "mtl" else 1)
    m = (MtlModel if kind == "mtl" else BaselineModel)(cfg, seed=seed)
    if kind == "mtl":
        for h in m.heads:
            h.bias[:] = rng.normal(0, 0.3, h.bias.shape)
    b = _batch(rng, cfg, 6, groups=rng.integers(0, cfg.num_groups, 6))
    names = list(m.named_params())

    def fn():
        m.train()
        loss, grads = m.loss_and_grads(b)
        return loss, [grads[k] for k in names]
    return fn, [m.named_params()[k] for k in names]


def test_criterion_1_gradients():
    start = time.perf_counter()
    worst, cases = 0.0, 0
    for seed in range(5):
        for kind in ("dense", "batchnorm", "relu_bce", "baseline", "mtl"):
            rng = np.random.default_rng(1000 + seed)
            fn, params = _model_case(kind, rng, seed) if kind in ("baseline", "mtl") else _layer_case(kind, rng)
            worst = max(worst, grad_check(fn, params))
            cases += 1
    elapsed = time.perf_counter() - start
    report(1, cases >= 20 and worst < 1e-4 and elapsed < 60,
           f"{cases} cases, max rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")


# ------------------------------------------------------------ 2: routing

def test_criterion_2_mask_routing():
    rng = np.random.default_rng(2)
    cfg = TowerConfig(5, 4, hidden_dim=6, num_groups=4)
    m = MtlModel(cfg, seed=2)
    m.optimizer = Adam(lr=0.01)
    checked = 0
    for _ in range(100):
        present = rng.choice(4, size=rng.integers(1, 4), replace=False)
        b = _batch(rng, cfg, int(rng.integers(4, 20)))
        b.group_ids = rng.choice(present, size=len(b))
        absent = sorted(set(range(4)) - set(b.group_ids.tolist()))
        _, grads = m.loss_and_grads(b)
        before = {k: v.copy() for k, v in m.named_params().items()}
        m.train_step(b)
        for g in absent:
            for k in (f"head{g}.weight", f"head{g}.bias"):
                assert not np.any(grads[k]), k
                assert np.array_equal(before[k], m.named_params()[k]), k
                checked += 1
    report(2, checked > 0, f"100 batches, {checked} absent-head tensors zero-gradient and bit-identical")


# ------------------------------------------------------------ 3: tying

def test_criterion_3_tying_reduction():
    rng = np.random.default_rng(3)
    cfg = TowerConfig(6, 5, hidden_dim=8, num_groups=4)
    base, mtl = BaselineModel(cfg, seed=3), MtlModel(cfg, seed=4)
    for tower in (base.user_tower, base.title_tower):
        for n in tower.norm:
            n.gamma[:] = rng.normal(1.0, 0.3, n.dim)
            n.beta[:] = rng.normal(0.0, 0.3, n.dim)
            n.running_mean[:] = rng.normal(0.0, 0.5, n.dim)
            n.running_var[:] = rng.uniform(0.5, 2.0, n.dim)
    # share the towers, make every head the identity
    for src, dst in ((base.named_params(), mtl.named_params()), (base.named_buffers(), mtl.named_buffers())):
        for k, v in src.items():
            dst[k][...] = v
    for h in mtl.heads:
        h.weight[:] = np.eye(8)
        h.bias[:] = 0.0
    base.eval()
    mtl.eval()
    b = _batch(rng, cfg, 1000)
    err = float(np.max(np.abs(mtl.score(b) - base.score(b))))
    report(3, err <= 1e-12, f"1000 examples, max |mtl - baseline| = {err:.1e} (<= 1e-12)")


# ------------------------------------------------------------ 4: PR-AUC

def _sweep_oracle(scores, labels, stable):
    # every cut of the ranked list; O(n^2) from recounting the prefix
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], stable[i]))
    pos = sum(labels)
    ap, prev = 0.0, 0.0
    for k in range(1, len(order) + 1):
        tp = sum(labels[i] for i in order[:k])
        ap += (tp / pos - prev) * (tp / k)
        prev = tp / pos
    return ap


def test_criterion_4_pr_auc_oracle():
    rng = np.random.default_rng(4)
    worst, tied = 0.0, 0
    for case in range(50):
        n = int(rng.integers(2, 1001))
        with_ties = case % 2 == 0
        s = rng.integers(0, 8, n) / 8.0 if with_ties else rng.random(n)
        y = (rng.random(n) < rng.uniform(0.05, 0.6)).astype(int)
        y[rng.choice(n, 2, replace=False)] = [1, 0]
        stable = rng.permutation(n)
        got = pr_auc(s, y, stable_index=stable)
        worst = max(worst, abs(got - _sweep_oracle(s.tolist(), y.tolist(), stable.tolist())))
        tied += with_ties
    edges = 0
    for y in ([0, 0, 0], [1, 1, 1]):
        with pytest.raises(UndefinedMetricError):
            pr_auc([0.1, 0.5, 0.9], y)
        edges += 1
    report(4, worst <= 1e-12, f"50 sets ({tied} tied), max |ap - oracle| = {worst:.1e}; {edges} edge cases raise")


# ------------------------------------------------------------ 5: imbalance

def test_criterion_5_imbalance():
    start = time.perf_counter()
    world = build_world(DataConfig(), seed=0)
    bundle = build_datasets(world, seed=0)
    elapsed = time.perf_counter() - start
    c = world.config
    train = bundle.random_split.train.positives()
    per_terr = np.bincount(train.territory, minlength=c.n_territories)
    span = per_terr.max() / max(per_terr.min(), 1)
    per_title = np.bincount(train.title_id, minlength=c.n_titles)
    best = 0.0
    for t in range(c.n_territories):
        scope = world.title_scope[:, t]
        loc = per_title[scope & ~world.title_is_global]
        glb = per_title[scope & world.title_is_global]
        loc = loc[loc > 0]
        if loc.size and glb.size:
            best = max(best, glb.max() / loc.min())
    ok = span >= 100 and best >= 10 and elapsed < 120
    report(5, ok, f"territory positives span {span:.0f}x (>= 100), best global/local pair {best:.0f}x (>= 10), "
                  f"generation {elapsed:.1f}s (< 120s)")


# ------------------------------------------------------ 6-9: the pipeline

def _read(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _digests(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    out = {}
    for seed in SEEDS:
        d = root / f"seed{seed}"
        start = time.perf_counter()
        assert cli.main(["run-all", "--seed", str(seed), "--out", str(d)]) == 0
        out[seed] = {
            "dir": d,
            "seconds": time.perf_counter() - start,
            "gains": _read(d / "eval/gains.csv"),
            "pr_auc": _read(d / "eval/pr_auc.csv"),
            "titles": _read(d / "case_study/titles.csv"),
            "hist": _read(d / "case_study/histograms.csv"),
            "world": json.loads((d / "data/world.json").read_text()),
        }
    return out


@pytest.mark.slow
def test_criterion_6_mtl_gains(runs):
    gains = {comp: defaultdict(list) for comp in ("mtl_vs_baseline", "mtl_vs_baseline-upsampled")}
    for r in runs.values():
        for row in r["gains"]:
            if row["day"] == "avg" and row["comparison"] in gains:
                gains[row["comparison"]][int(row["territory"])].append(float(row["gain"]))
    T = len(runs[0]["world"]["volume"])
    pos = {comp: sum(np.mean(g[t]) > 0 for t in range(T)) for comp, g in gains.items()}
    slowest = max(r["seconds"] for r in runs.values())
    ok = pos["mtl_vs_baseline"] > T / 2 and pos["mtl_vs_baseline-upsampled"] >= T / 2 and slowest < 900
    report(6, ok, f"seed-averaged gain > 0 in {pos['mtl_vs_baseline']}/{T} territories vs baseline (> {T // 2}), "
                  f"{pos['mtl_vs_baseline-upsampled']}/{T} vs upsampled (>= {T // 2}); "
                  f"slowest pipeline {slowest:.0f}s (< 900s)")


@pytest.mark.slow
def test_criterion_7_upsampling(runs):
    acc = defaultdict(list)
    for r in runs.values():
        for row in r["pr_auc"]:
            if row["pr_auc"]:
                acc[(row["model"], int(row["territory"]))].append(float(row["pr_auc"]))
    majors = runs[0]["world"]["is_major"]
    minors = [t for t, major in enumerate(majors) if not major]
    wins = sum(np.mean(acc[("baseline-upsampled", t)]) >= np.mean(acc[("baseline", t)]) for t in minors)
    report(7, wins > len(minors) / 2,
           f"upsampled >= baseline in {wins}/{len(minors)} minor territories (PR-AUC averaged over 3 seeds and days)")


@pytest.mark.slow
def test_criterion_8_case_study(runs):
    bad, checked, worst_mass = [], 0, 0.0
    for seed, r in runs.items():
        for row in r["titles"]:
            delta = float(row["delta_mean_mtl_vs_baseline"])
            want_up = row["scope"] == "local"
            if (delta > 0) != want_up:
                bad.append(f"seed {seed} territory {row['territory']} {row['scope']} {delta:+.3f}")
            checked += 1
        mass = defaultdict(float)
        for h in r["hist"]:
            mass[(h["title_id"], h["model"])] += float(h["mass"])
        worst_mass = max(worst_mass, max(abs(m - 1.0) for m in mass.values()))
    ok = checked > 0 and not bad and worst_mass <= 1e-12
    detail = (f"{checked - len(bad)}/{checked} picked titles move the expected way over seeds {list(SEEDS)}; "
              f"max |mass - 1| = {worst_mass:.1e}")
    report(8, ok, detail + (f"; wrong: {bad}" if bad else ""))


@pytest.mark.slow
def test_criterion_9_determinism(runs):
    d = runs[0]["dir"]
    first = _digests(d)
    shutil.rmtree(d)
    assert cli.main(["run-all", "--seed", "0", "--out", str(d)]) == 0
    second = _digests(d)
    differ = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    ckpts = sum(k.endswith(".ckpt") for k in first)
    report(9, not differ and ckpts > 0,
           f"{len(first)} files ({ckpts} checkpoints) byte-identical across two run-all invocations"
           + (f"; differ: {differ[:5]}" if differ else ""))
