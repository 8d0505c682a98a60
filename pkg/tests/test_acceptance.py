"""Acceptance suite: one test per release criterion, each at its stated tolerance.

Run with `pytest tests/test_acceptance.py -v -s` to see one [PASS]/[FAIL] line
per criterion.
"""

import functools
import itertools
import math
import time

import mpmath
import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import norm as sp_norm

from beamclean import (
    AdaptiveEstimator,
    DecodeConfig,
    NoiseMechanismSpec,
    SurrogateParams,
    SweepConfig,
    TokenSequence,
    UniformPrior,
    asr,
    build_token_map,
    calibrate_scale,
    decode,
    epsilon_from_scale,
    generate_synthetic_table,
    init_params,
    marginal_grad,
    nn_decode,
    obfuscate_sequence,
    run_sweep,
    save_table,
    scale_from_epsilon,
    step_marginal_loglik,
    train_ngram,
)
from beamclean.harness import AGGREGATE_ID
from beamclean.priors import save_prior
from beamclean.tables import EmbeddingTable

from conftest import write_corpus


def criterion(name):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\n[FAIL] {name}")
                raise
            print(f"\n[PASS] {name}")

        return wrapper

    return deco


def markov_chain_corpus(vocab, seed, n_train, n_test, length, branch=3):
    """Sequences from a sparse bigram chain: each token has `branch` successors."""
    rng = np.random.default_rng(seed)
    successors = np.array(
        [rng.choice(vocab, size=branch, replace=False) for _ in range(vocab)]
    )
    probs = np.array([0.7, 0.2, 0.1][:branch])
    probs = probs / probs.sum()

    def sample():
        seq = [int(rng.integers(0, vocab))]
        for _ in range(length - 1):
            seq.append(int(successors[seq[-1]][rng.choice(branch, p=probs)]))
        return TokenSequence(tuple(seq))

    return [sample() for _ in range(n_train)], [sample() for _ in range(n_test)]


@criterion("brute-force MAP equivalence (V=20, T=3, 50/50 trials, < 60 s)")
def test_brute_force_map_equivalence():
    started = time.perf_counter()
    v, d, t_len = 20, 8, 3
    table = generate_synthetic_table(v, d, seed=100, min_pairwise_gap=0.5)
    rng = np.random.default_rng(101)
    corpus = [TokenSequence(tuple(rng.integers(0, v, size=16))) for _ in range(8)]
    prior = train_ngram(corpus, 2, 1.0, v)
    theta = SurrogateParams.isotropic("gaussian", d, 0.8)
    rows = table.rows64()

    matches = 0
    for trial in range(50):
        w = TokenSequence(tuple(rng.integers(0, v, size=t_len)))
        y = obfuscate_sequence(table, w, NoiseMechanismSpec("gaussian", 0.8), 200 + trial)
        cfg = DecodeConfig(beam_width=8000, estimation="fixed", initial_params=theta)
        result = decode(y, table, prior, cfg)

        # oracle: scipy densities + exhaustive enumeration in lexicographic order
        yv = y.values64()
        ll = np.array(
            [sp_norm.logpdf(yv[t], loc=rows, scale=0.8).sum(axis=1) for t in range(t_len)]
        )
        cache = {}

        def prior_vec(ctx):
            if ctx not in cache:
                cache[ctx] = prior.next_token_logprobs(ctx)
            return cache[ctx]

        best, best_score = None, -math.inf
        for seq in itertools.product(range(v), repeat=t_len):
            score = sum(ll[t, c] + prior_vec(seq[:t])[c] for t, c in enumerate(seq))
            if score > best_score:
                best, best_score = seq, score
        if result.decoded.ids == best:
            matches += 1
        assert result.final_beam[0].log_score == pytest.approx(best_score, rel=1e-9)

    elapsed = time.perf_counter() - started
    assert matches == 50, f"only {matches}/50 trials matched the exhaustive argmax"
    assert elapsed < 60.0, f"took {elapsed:.1f}s (budget 60s)"


@criterion("NN reduction (k=1, uniform prior, fixed surrogate; 100 instances per family)")
def test_nn_reduction():
    table = generate_synthetic_table(1000, 64, seed=110)
    for family, norm in (("gaussian", "l2"), ("laplace", "l1")):
        theta = SurrogateParams.isotropic(family, 64, 1.0)
        prior = UniformPrior(1000)
        cfg = DecodeConfig(beam_width=1, estimation="fixed", initial_params=theta)
        for trial in range(100):
            rng = np.random.default_rng(300 + trial)
            w = TokenSequence(tuple(rng.integers(0, 1000, size=16)))
            y = obfuscate_sequence(table, w, NoiseMechanismSpec(family, 2.0), 400 + trial)
            got = decode(y, table, prior, cfg).decoded.ids
            want = nn_decode(table, y, norm).ids
            assert got == want, f"{family} trial {trial}: beam {got} != nn {want}"


@criterion("parameter recovery (sigma and b in {0.1, 0.5, 1.0}; >= 95% of 40 runs within 10%)")
def test_parameter_recovery():
    table = generate_synthetic_table(100, 64, seed=120, min_pairwise_gap=1.0)
    prior = UniformPrior(100)
    candidates = list(range(100))
    for family in ("gaussian", "laplace"):
        for true_scale in (0.1, 0.5, 1.0):
            hits = 0
            for run in range(40):
                rng = np.random.default_rng(5000 + run)
                w = TokenSequence(tuple(rng.integers(0, 100, size=128)))
                y = obfuscate_sequence(
                    table, w, NoiseMechanismSpec(family, true_scale), 6000 + run
                )
                estimator = AdaptiveEstimator("closed_form")
                theta = init_params(family, y, table)
                yv = y.values64()
                for t in range(128):
                    beam = [(w.ids[:t], 0.0)]  # true sequence seeded with certainty
                    theta = estimator.step(theta, beam, yv[t], prior, table, candidates)
                if abs(theta.scale[0] - true_scale) <= 0.10 * true_scale:
                    hits += 1
            assert hits >= 38, f"{family} scale={true_scale}: only {hits}/40 within 10%"


@criterion("DP calibration matches high-precision closed forms (1e-9; laplace exact 1e-12)")
def test_dp_calibration():
    rng = np.random.default_rng(7)
    grid = [
        (float(rng.uniform(0.05, 0.95)), float(rng.uniform(1e-7, 1e-2)),
         float(rng.uniform(0.1, 50.0)))
        for _ in range(100)
    ]
    with mpmath.workdps(60):
        for eps, delta, sens in grid:
            got = calibrate_scale("gaussian", sens, eps, delta)
            want = float(
                mpmath.sqrt(2 * mpmath.log(mpmath.mpf("1.25") / mpmath.mpf(delta)))
                * mpmath.mpf(sens) / mpmath.mpf(eps)
            )
            assert abs(got - want) <= 1e-9 * abs(want)
            back = epsilon_from_scale("gaussian", sens, got, delta)
            assert abs(back - eps) <= 1e-9 * eps
    for eps, _, sens in grid:
        b = calibrate_scale("laplace", sens, eps)
        assert abs(b - sens / eps) <= 1e-12 * max(1.0, abs(b))
        assert abs(epsilon_from_scale("laplace", sens, b) - eps) <= 1e-12 * eps


@pytest.fixture(scope="module")
def trend_workspace(tmp_path_factory):
    """Synthetic V=500 world with a matched bigram prior, staged on disk."""
    tmp = tmp_path_factory.mktemp("trend")
    v, d, t_len = 500, 64, 32
    table = generate_synthetic_table(v, d, seed=901)
    table_path = tmp / "table.embt"
    save_table(table, table_path)
    train, test = markov_chain_corpus(v, seed=777, n_train=1500, n_test=20, length=t_len)
    prior = train_ngram(train, 2, 0.1, v)
    prior_path = tmp / "prior.json"
    save_prior(prior, prior_path)
    corpus_path = write_corpus(
        tmp / "test.jsonl", [(f"q{i:02d}", list(s.ids)) for i, s in enumerate(test)]
    )
    return tmp, str(table_path), str(corpus_path), str(prior_path)


@criterion("directional trend: beam attack >= NN at all levels, +10 points at highest noise")
def test_directional_reproduction(trend_workspace):
    tmp, table_path, corpus_path, prior_path = trend_workspace
    scales = [1.0, 2.0, 2.5]  # low -> high noise
    config = SweepConfig(
        table=table_path,
        corpus=corpus_path,
        mechanism="gaussian",
        output=str(tmp / "trend.csv"),
        scales=scales,
        delta=1e-5,
        seed=31,
        max_len=32,
        beam_width=20,
        estimation="closed_form",
        prior={"kind": "ngram", "path": prior_path},
        deterministic_runtime=True,
    )
    outcome = run_sweep(config)
    assert outcome.failed_cells == 0
    means = {(round(a.scale, 6), a.method): a.asr_percent for a in outcome.aggregates}
    for scale in scales:
        nn_mean = means[(scale, "nn")]
        bc_mean = means[(scale, "beamclean")]
        assert bc_mean >= nn_mean, f"scale {scale}: beam {bc_mean} < nn {nn_mean}"
    highest = max(scales)
    gap = means[(highest, "beamclean")] - means[(highest, "nn")]
    assert gap >= 10.0, f"gap at highest noise is {gap:.1f} points (< 10)"


@criterion("cross-vocabulary attack (80% shared tokens) completes and beats NN")
def test_cross_vocabulary_path():
    v, d, t_len, shared = 300, 32, 16, 240
    src = generate_synthetic_table(v, d, seed=801)
    rng = np.random.default_rng(800)
    dst_tokens = tuple(f"t{i}" for i in range(shared)) + tuple(
        f"u{i}" for i in range(v - shared)
    )
    dst = EmbeddingTable(rng.normal(size=(v, d)).astype(np.float32), dst_tokens)
    token_map = build_token_map(src, dst)
    assert len(token_map.src_to_dst) == shared

    train, test = markov_chain_corpus(shared, seed=802, n_train=1200, n_test=20, length=t_len)
    dst_train = [
        TokenSequence(tuple(token_map.src_to_dst[t] for t in seq)) for seq in train
    ]
    prior = train_ngram(dst_train, 2, 0.1, v)
    cfg = DecodeConfig(beam_width=20, estimation="closed_form")
    spec = NoiseMechanismSpec("gaussian", 2.0)

    nn_scores, beam_scores = [], []
    for i, w in enumerate(test):
        y = obfuscate_sequence(src, w, spec, 900 + i)  # same seeds for both methods
        nn_scores.append(asr(nn_decode(src, y, "l2"), w))
        result = decode(y, src, prior, cfg, token_map=token_map)
        assert len(result.decoded.ids) == t_len
        beam_scores.append(asr(result.decoded, w))
    assert np.mean(beam_scores) >= np.mean(nn_scores), (
        f"beam {np.mean(beam_scores):.1f} < nn {np.mean(nn_scores):.1f}"
    )


@criterion("numerical suites: gradient check 1e-4, prior normalization 1e-6, "
           "EM monotonicity 1e-9, byte-identical sweeps")
def test_numerical_suites(trend_workspace):
    # gradient vs central finite differences, randomized instances
    for seed in range(5):
        rng = np.random.default_rng(8000 + seed)
        v, d = 15, 6
        table = EmbeddingTable(
            rng.normal(size=(v, d)).astype(np.float32), tuple(f"t{i}" for i in range(v))
        )
        prior = train_ngram(
            [TokenSequence(tuple(rng.integers(0, v, size=10))) for _ in range(4)], 2, 0.5, v
        )
        beam = [(tuple(rng.integers(0, v, size=2)), float(-rng.uniform(0, 2)))
                for _ in range(3)]
        y = rng.normal(size=d)
        cands = sorted(rng.choice(v, size=9, replace=False).tolist())
        for family in ("gaussian", "laplace"):
            theta = SurrogateParams(
                family, rng.normal(scale=0.2, size=d), rng.uniform(0.4, 1.1, size=1),
                "isotropic",
            )
            g_mu, g_ls = marginal_grad(theta, beam, y, prior, table, cands)
            h = 1e-6

            def f(th):
                return step_marginal_loglik(th, beam, y, prior, table, cands)

            for i in range(d):
                mu_p, mu_m = theta.mu.copy(), theta.mu.copy()
                mu_p[i] += h
                mu_m[i] -= h
                fd = (f(SurrogateParams(family, mu_p, theta.scale, "isotropic"))
                      - f(SurrogateParams(family, mu_m, theta.scale, "isotropic"))) / (2 * h)
                assert abs(g_mu[i] - fd) <= 1e-4 * max(1e-3, abs(fd))
            fd = (f(SurrogateParams(family, theta.mu, theta.scale * math.exp(h), "isotropic"))
                  - f(SurrogateParams(family, theta.mu, theta.scale * math.exp(-h), "isotropic"))
                  ) / (2 * h)
            assert abs(g_ls[0] - fd) <= 1e-4 * max(1e-3, abs(fd))

    # prior normalization at 1e-6 over random contexts
    rng = np.random.default_rng(8100)
    prior = train_ngram(
        [TokenSequence(tuple(rng.integers(0, 30, size=12))) for _ in range(6)], 3, 0.3, 30
    )
    for _ in range(50):
        ctx = tuple(rng.integers(0, 30, size=int(rng.integers(0, 5))))
        assert abs(logsumexp(prior.next_token_logprobs(ctx))) < 1e-6
    assert abs(logsumexp(UniformPrior(30).next_token_logprobs(()))) < 1e-6

    # EM monotonicity at 1e-9 on random instances
    for seed in range(6):
        rng = np.random.default_rng(8200 + seed)
        v, d = 12, 5
        table = EmbeddingTable(
            rng.normal(size=(v, d)).astype(np.float32), tuple(f"t{i}" for i in range(v))
        )
        prior = train_ngram([TokenSequence(tuple(rng.integers(0, v, size=8)))], 2, 1.0, v)
        beam = [(tuple(rng.integers(0, v, size=2)), float(-rng.uniform(0, 1)))
                for _ in range(2)]
        y = rng.normal(size=d)
        cands = list(range(v))
        for family in ("gaussian", "laplace"):
            theta = SurrogateParams.isotropic(family, d, float(rng.uniform(0.3, 1.5)))
            before = step_marginal_loglik(theta, beam, y, prior, table, cands)
            updated = AdaptiveEstimator("closed_form").step(
                theta, beam, y, prior, table, cands
            )
            after = step_marginal_loglik(updated, beam, y, prior, table, cands)
            assert after >= before - 1e-9

    # byte-identical sweep reruns (deterministic_runtime pins the volatile column)
    tmp, table_path, corpus_path, prior_path = trend_workspace
    outputs = []
    for tag in ("rerun_a", "rerun_b"):
        config = SweepConfig(
            table=table_path,
            corpus=corpus_path,
            mechanism="gaussian",
            output=str(tmp / f"{tag}.csv"),
            scales=[1.5],
            delta=1e-5,
            seed=77,
            beam_width=8,
            candidate_pool=64,
            prior={"kind": "ngram", "path": prior_path},
            deterministic_runtime=True,
        )
        run_sweep(config)
        outputs.append(open(config.output, "rb").read())
    assert outputs[0] == outputs[1]
