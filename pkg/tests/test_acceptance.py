"""Acceptance criteria, one test each. Every test records a PASS/FAIL line that
is printed in the terminal summary (and immediately with ``-s``)."""

import dataclasses
import random
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy import sparse
from scipy.stats import chisquare

from conftest import ACCEPTANCE_LINES
from loraserve.bench import BenchConfig, build_testbed, compute_metrics, replay, run_bench, sweep
from loraserve.engine import SEQUENTIAL_BASELINE, CompletionRecord, Engine, EngineConfig, Request
from loraserve.lora import LoraPair, batch_lora_forward, merge_adapter, unmerged_forward
from loraserve.model import ToyModelConfig, build_model, generate
from loraserve.router import (
    CACHED_TOPK, EXPLICIT, LOADED_TOP1, AdapterRouter, SelectionConfig, bce_loss_and_grad,
    build_labels, make_corpus, make_topic_datasets, profile, select_adapter, top_k, train_router,
)
from loraserve.store import AdapterCache, generate_adapters
from loraserve.workload import WorkloadConfig, generate_trace, power_law_pmf, sample_adapters, sample_intervals


def report(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def random_pair(rng, d, r):
    return LoraPair(rng.normal(size=(r, d)), rng.normal(size=(d, r)), float(rng.uniform(0.5, 2.0)))


def test_c01_batched_compute_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        d = int(rng.integers(2, 129))
        batch = int(rng.integers(1, 33))
        n_ad = int(rng.integers(1, 9))
        adapters = {k: random_pair(rng, d, int(rng.integers(1, min(16, d - 1) + 1))) for k in range(n_ad)}
        w = rng.normal(size=(d, d))
        x = rng.normal(size=(d, batch))
        assign = [int(a) for a in rng.integers(0, n_ad, size=batch)]
        y = batch_lora_forward(w, adapters, assign, x)
        for i, a in enumerate(assign):
            worst = max(worst, float(np.max(np.abs(y[:, i] - unmerged_forward(w, adapters[a], x[:, i])))))
    elapsed = time.perf_counter() - t0
    report(1, worst <= 1e-9 and elapsed < 30, f"max |diff| {worst:.2e} (<= 1e-9), {elapsed:.1f}s (< 30s)")


def test_c02_merge_unmerge_equivalence():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 129))
        p = random_pair(rng, d, int(rng.integers(1, min(16, d - 1) + 1)))
        w = rng.normal(size=(d, d))
        x = rng.normal(size=d)
        worst = max(worst, float(np.max(np.abs(merge_adapter(w, p) @ x - unmerged_forward(w, p, x)))))
    report(2, worst <= 1e-9, f"max |diff| {worst:.2e} (<= 1e-9) over 100 cases")


class ReferenceLRU:
    def __init__(self, capacity):
        self.capacity, self.last, self.clock = capacity, {}, 0
        self.hits = self.total = 0
        self.evictions = []

    def access(self, key):
        self.clock += 1
        self.total += 1
        if key in self.last:
            self.hits += 1
        elif len(self.last) == self.capacity:
            victim = min(self.last, key=self.last.get)
            del self.last[victim]
            self.evictions.append(victim)
        self.last[key] = self.clock


def test_c03_lru_exactness(tmp_path):
    registry = generate_adapters(tmp_path, 32, 4, 1, 1, seed=0)
    rng = random.Random(3)
    mismatches = invariant_breaks = 0
    for _ in range(1000):
        cap = rng.randint(1, 8)
        cache, ref = AdapterCache(registry, cap), ReferenceLRU(cap)
        for _ in range(rng.randint(1, 40)):
            a = rng.randrange(32)
            cache.get(a)
            ref.access(a)
            invariant_breaks += cache.pool.free_count + len(cache) != cap
        mismatches += cache.evictions != ref.evictions or cache.hit_rate != ref.hits / ref.total
    report(3, mismatches == 0 and invariant_breaks == 0,
           f"1000 sequences: {mismatches} mismatches, {invariant_breaks} pool invariant breaks")


class FixedScores:
    def __init__(self, scores):
        self.scores = np.asarray(scores, dtype=float)
        self.calls = 0

    def score_prompt(self, prompt):
        self.calls += 1
        return self.scores


def test_c04_selection_precedence():
    scores = [0.1, 0.9, 0.8, 0.7, 0.2]
    hand = [
        select_adapter([1], 2, FixedScores(scores), set(), SelectionConfig(3)) == (2, EXPLICIT),
        select_adapter([1], None, FixedScores(scores), {3}, SelectionConfig(3)) == (3, CACHED_TOPK),
        select_adapter([1], None, FixedScores(scores), {0, 4}, SelectionConfig(3)) == (1, LOADED_TOP1),
    ]
    rng = np.random.default_rng(11)
    violations = 0
    for _ in range(500):
        n = int(rng.integers(1, 20))
        s = rng.random(n)
        if rng.random() < 0.3:
            s = np.round(s, 1)  # force ties
        k = int(rng.integers(1, n + 1))
        resident = {int(i) for i in rng.choice(n, size=int(rng.integers(0, n + 1)), replace=False)}
        explicit = int(rng.integers(0, n)) if rng.random() < 0.3 else None
        router = FixedScores(s)
        chosen, kind = select_adapter([1], explicit, router, resident, SelectionConfig(k), n)
        if explicit is not None:
            violations += (chosen, kind) != (explicit, EXPLICIT) or router.calls != 0
            continue
        cand = top_k(s, k)
        order_ok = all(s[a] > s[b] or (s[a] == s[b] and a < b) for a, b in zip(cand, cand[1:]))
        better_outside = any(s[j] > s[cand[-1]] for j in range(n) if j not in cand)
        if kind == CACHED_TOPK:
            earlier_resident = any(c in resident for c in cand[: cand.index(chosen)])
            ok = chosen in resident and not earlier_resident
        else:
            ok = kind == LOADED_TOP1 and chosen == cand[0] and not any(c in resident for c in cand)
        violations += not (ok and order_ok and not better_outside)
    report(4, all(hand) and violations == 0, f"hand traces {sum(hand)}/3, random cases 500 with {violations} violations")


def test_c05_power_law_sampler():
    n, count = 50, 100_000
    pmf = power_law_pmf(n, 1.0)
    h50 = sum(Fraction(1, j) for j in range(1, n + 1))
    oracle_ok = abs(pmf[0] - float(1 / h50)) < 1e-12 and abs(pmf[0] - 0.2227) < 5e-4
    counts = np.bincount(sample_adapters(n, 1.0, count, seed=5), minlength=n)
    rel = np.abs(counts[:10] / count - pmf[:10]) / pmf[:10]
    p = chisquare(counts, count * pmf).pvalue
    report(5, oracle_ok and rel.max() <= 0.05 and p > 0.001,
           f"P(1)={pmf[0]:.4f}, max top-10 rel err {rel.max():.3f} (<= 0.05), chi-square p={p:.3f} (> 0.001)")


def test_c06_gamma_sampler():
    worst_mean = worst_cv = 0.0
    for i, (rate, cv) in enumerate([(0.5, 1.0), (1.0, 1.25), (1.0, 2.0)]):
        x = sample_intervals(rate, cv, 100_000, seed=i)
        worst_mean = max(worst_mean, abs(x.mean() * rate - 1))
        worst_cv = max(worst_cv, abs(x.std() / x.mean() / cv - 1))
    report(6, worst_mean <= 0.02 and worst_cv <= 0.05,
           f"max mean rel err {worst_mean:.4f} (<= 0.02), max cv rel err {worst_cv:.4f} (<= 0.05)")


def test_c07_router_quality(tmp_path):
    t0 = time.perf_counter()
    model = build_model(ToyModelConfig())
    registry = generate_adapters(tmp_path, 10, model.hidden_dim, 8, model.num_layers, seed=1)
    labels = build_labels(profile(model, registry, make_topic_datasets(model, registry, 20, seed=0)))
    train_p, train_ids = make_corpus(10, 200, seed=0)
    test_p, test_ids = make_corpus(10, 50, seed=1)
    router = train_router(train_p, train_ids, labels)
    pred = router.predict(test_p)
    acc = float(np.mean(labels[test_ids, pred] == 1))

    rng = np.random.default_rng(0)
    X = sparse.csr_matrix(AdapterRouter()._features(train_p[::40]))
    Y = labels[train_ids[::40]].astype(float)
    coef, b = rng.normal(0, 0.5, size=(10, X.shape[1])), rng.normal(size=10)
    _, g, gb = bce_loss_and_grad(coef, b, X, Y)
    h = 1e-6
    idx = [(int(i), int(j)) for i, j in zip(rng.integers(0, 10, 40), rng.integers(0, X.shape[1], 40))]
    num, ana = [], []
    for i, j in idx:
        e = np.zeros_like(coef)
        e[i, j] = h
        num.append((bce_loss_and_grad(coef + e, b, X, Y)[0] - bce_loss_and_grad(coef - e, b, X, Y)[0]) / (2 * h))
        ana.append(g[i, j])
    for i in range(10):
        e = np.zeros(10)
        e[i] = h
        num.append((bce_loss_and_grad(coef, b + e, X, Y)[0] - bce_loss_and_grad(coef, b - e, X, Y)[0]) / (2 * h))
        ana.append(gb[i])
    num, ana = np.array(num), np.array(ana)
    grad_err = float(np.linalg.norm(num - ana) / np.linalg.norm(ana))
    elapsed = time.perf_counter() - t0
    report(7, acc >= 0.9 and grad_err <= 1e-5 and elapsed < 60,
           f"held-out top-1 accuracy {acc:.3f} (>= 0.90), gradient rel err {grad_err:.1e} (<= 1e-5), {elapsed:.1f}s (< 60s)")


def test_c08_engine_fidelity(tmp_path):
    model = build_model(ToyModelConfig())
    registry = generate_adapters(tmp_path, 8, model.hidden_dim, 8, model.num_layers, seed=2)
    prompts, ids = make_corpus(8, 30, seed=0)
    router = train_router(prompts, ids, np.eye(8), epochs=100)
    rng = np.random.default_rng(8)
    reqs = []
    for i in range(50):
        topic = int(rng.integers(0, 8))
        prompt = tuple(int(t) for t in rng.integers(1, model.vocab_size, size=int(rng.integers(1, 12))))
        prompt = (prompts[topic * 30][0], *prompt)
        explicit = topic if rng.random() < 0.5 else None
        reqs.append(Request(i, float(rng.uniform(0, 2000)), prompt, explicit, int(rng.integers(1, 16))))
    engine = Engine(model, registry, router, EngineConfig(gamma=8, cache_capacity=4))
    engine.prefill()
    records = engine.run_until_drain(reqs)
    by_id = {r.request_id: r for r in records}
    mismatched = sum(
        by_id[q.id].tokens != generate(model, registry.load(by_id[q.id].adapter_used), q.prompt, q.max_new_tokens)
        for q in reqs
    )
    ordered = all(r.arrival <= r.first_token <= r.completion for r in records)
    report(8, len(by_id) == 50 and mismatched == 0 and ordered and all(r.ok for r in records),
           f"{len(by_id)} records, {mismatched} token mismatches, timestamps ordered: {ordered}")


def scalability_config(n):
    return BenchConfig(
        workload=WorkloadConfig(n=n, alpha=1.0, rate=0.5, duration=120.0, seed=1),
        engine=EngineConfig(gamma=20, cache_capacity=20),
    )


@pytest.mark.slow
def test_c09_scalability_flatness():
    t0 = time.perf_counter()
    reports = [run_bench(scalability_config(n)) for n in (20, 100, 1000)]
    elapsed = time.perf_counter() - t0
    tps = [r.throughput for r in reports]
    spread = (max(tps) - min(tps)) / max(tps)
    report(9, spread <= 0.10 and elapsed < 300,
           f"throughput {', '.join(f'{t:.4f}' for t in tps)} req/s at n=20/100/1000, spread {spread:.3f} (<= 0.10), {elapsed:.0f}s (< 300s)")


def test_c10_batching_speedup():
    base = BenchConfig(
        workload=WorkloadConfig(n=32, alpha=1.0, rate=8.0, duration=30.0, seed=2),
        engine=EngineConfig(gamma=16, cache_capacity=8),
    )
    edge, seq = sweep("mode", ["edgelora", SEQUENTIAL_BASELINE], base)
    ratio = edge.throughput / seq.throughput
    report(10, ratio >= 1.5, f"edgelora {edge.throughput:.3f} vs baseline {seq.throughput:.3f} req/s, ratio {ratio:.2f} (>= 1.5)")


def test_c11_selection_overhead():
    adaptive = BenchConfig(
        workload=WorkloadConfig(n=10, alpha=1.0, rate=0.1, duration=300.0, seed=3),
        engine=EngineConfig(gamma=8, cache_capacity=10),
    )
    explicit = dataclasses.replace(adaptive, workload=dataclasses.replace(adaptive.workload, explicit_fraction=1.0))
    trace_a, trace_e = generate_trace(adaptive.workload), generate_trace(explicit.workload)
    testbed = build_testbed(adaptive)
    ftl_a = compute_metrics(replay(trace_a, adaptive, testbed).records, 5.0, 300.0).avg_first_token_latency
    ftl_e = compute_metrics(replay(trace_e, explicit, testbed).records, 5.0, 300.0).avg_first_token_latency
    probe = Engine(*testbed, adaptive.engine)
    expected = float(np.mean([probe.prompt_forward_ms(len(ev.prompt)) for ev in trace_a])) / 1000.0
    rel = abs((ftl_a - ftl_e) - expected) / expected
    report(11, rel <= 0.20,
           f"FTL difference {1000 * (ftl_a - ftl_e):.2f} ms vs prompt forward {1000 * expected:.2f} ms, rel err {rel:.3f} (<= 0.20)")


def test_c12_baseline_oom():
    work = WorkloadConfig(n=100, rate=0.5, duration=60.0, seed=4)
    seq = run_bench(BenchConfig(workload=work, engine=EngineConfig(mode=SEQUENTIAL_BASELINE, memory_budget_adapters=50)))
    edge = run_bench(BenchConfig(workload=work, engine=EngineConfig(cache_capacity=20)))
    expected = len(generate_trace(work))
    ok = seq.oom and not edge.oom and not edge.undefined and edge.completed == expected and edge.failed == 0
    report(12, ok, f"baseline oom={seq.oom}; edgelora completed {edge.completed}/{expected}")


def test_c13_locality_direction():
    wins = []
    for s in range(10):
        result = {}
        for alpha in (0.5, 1.5):
            cfg = BenchConfig(
                workload=WorkloadConfig(n=50, alpha=alpha, rate=1.0, duration=120.0, seed=100 + s),
                engine=EngineConfig(gamma=8, cache_capacity=8, k=1, prefill_seed=s),
            )
            rep = run_bench(cfg)
            result[alpha] = (rep.cache_hit_rate, rep.avg_request_latency)
        wins.append(result[1.5][0] >= result[0.5][0] and result[1.5][1] <= result[0.5][1])
    report(13, sum(wins) >= 8, f"{sum(wins)}/10 seed pairs with H and latency both in the expected direction (>= 8)")


def test_c14_metrics_arithmetic():
    recs = [CompletionRecord(i, 0, EXPLICIT, 0.0, 1000.0 * f, 1000.0 * f, [1]) for i, f in enumerate((1, 2, 10))]
    m = compute_metrics(recs, 6.0, 10.0)
    ok = (
        m.throughput == pytest.approx(0.3, abs=1e-12)
        and m.slo_attainment == pytest.approx(2 / 3, abs=1e-12)
        and m.avg_first_token_latency == pytest.approx(13 / 3, abs=1e-12)
        and m.avg_request_latency == pytest.approx(13 / 3, abs=1e-12)
    )
    report(14, ok, f"throughput {m.throughput:.4f}, SLO {m.slo_attainment:.4f}, avg FTL {m.avg_first_token_latency:.4f}s, avg latency {m.avg_request_latency:.4f}s")
