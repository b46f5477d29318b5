"""Acceptance suite: one test per release criterion.

Each test prints one PASS/FAIL line (run with ``pytest tests/test_acceptance.py -s``
to see them all) and asserts the criterion at its stated tolerance and
runtime budget. Criterion 9's optimizer-ordering fraction is known not to
reach its soft threshold under the prescribed hyperparameters; see the test
docstring for the analysis. Everything else passes.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from energy_attention import attention as attn
from energy_attention import descent as de
from energy_attention import energy as en
from energy_attention import equivalence as eq
from energy_attention import loopsim as ls
from energy_attention import numkit as nk
from energy_attention.cli import run_bench

CFG = eq.InstanceConfig(dim=8, tokens=16, heads=2, radius=1.0, eta=0.1,
                        temperature=1.0)


def _report(number, label, passed, detail, started, budget):
    elapsed = time.perf_counter() - started
    status = "PASS" if passed and elapsed < budget else "FAIL"
    print(f"[criterion {number:2d}] {status} ({elapsed:5.2f}s < {budget:g}s) "
          f"{label}: {detail}")
    assert elapsed < budget, f"runtime budget exceeded: {elapsed:.2f}s"
    return passed


def test_criterion_01_softmax_attention_equals_descent_step():
    started = time.perf_counter()
    report = eq.verify_softmax_gd(CFG, instances=100, seed=7)
    ok = _report(1, "softmax forward == tied descent step (100 instances)",
                 report.passed, f"max|diff| = {report.max_abs_error:.3e}",
                 started, 1.0)
    assert ok and report.max_abs_error <= 1e-10


def test_criterion_02_linear_attention_equals_descent_step():
    started = time.perf_counter()
    report = eq.verify_linear_gd(CFG, instances=100, seed=7)
    ok = _report(2, "linear forward (gated + ungated) == descent step",
                 report.passed, f"max|diff| = {report.max_abs_error:.3e}",
                 started, 1.0)
    assert ok and report.max_abs_error <= 1e-10


def test_criterion_03_multihead_equals_descent_step():
    started = time.perf_counter()
    report = eq.verify_multihead_gd(CFG, instances=100, seed=7)
    ok = _report(3, "multi-head forward == tied descent step (block instances)",
                 report.passed, f"max|diff| = {report.max_abs_error:.3e}",
                 started, 1.0)
    assert ok and report.max_abs_error <= 1e-10


def test_criterion_04_boltzmann_weights_minimize_free_energy():
    started = time.perf_counter()
    rng = nk.Rng(7)
    weight = rng.normal_matrix(8, 8, 1 / math.sqrt(8))
    spec = en.elastic_spec(weight, 1.0)

    z3 = nk.sample_hypersphere(rng, 8, 1.0)
    tokens3 = np.stack([nk.sample_hypersphere(rng, 8, 1.0) for _ in range(3)],
                       axis=1)
    grid = eq.verify_boltzmann_optimality(spec, z3, tokens3, grid_res=0.01,
                                          dirichlet_draws=0)
    z8 = nk.sample_hypersphere(rng, 8, 1.0)
    tokens8 = np.stack([nk.sample_hypersphere(rng, 8, 1.0) for _ in range(8)],
                       axis=1)
    sampled = eq.verify_boltzmann_optimality(spec, z8, tokens8, grid_res=0.0,
                                             dirichlet_draws=10_000, rng=rng)
    merged = eq.merge_reports([grid, sampled])
    detail = (f"worst shortfall = {merged.max_abs_error:.3e}, argmin cell gap = "
              f"{grid.details['argmin_cell_gap']:.4f}")
    ok = _report(4, "explicit free energy >= minimum on grid + 1e4 draws",
                 merged.passed, detail, started, 5.0)
    assert ok


def test_criterion_05_hessian_sign_structure_and_nonconvexity():
    started = time.perf_counter()
    report = eq.verify_hessian_structure(CFG, instances=100, seed=7)
    detail = (f"scaled max err = {report.max_abs_error:.3e}, indefinite witness seed = "
              f"{report.details['indefinite_witness_seed']}, FD rel = "
              f"{report.details['fd_max_relative_error']:.2e}")
    ok = _report(5, "Hessian split signs + concave bound + indefinite witness",
                 report.passed, detail, started, 10.0)
    assert ok
    assert report.details["indefinite_witness_seed"] is not None
    assert report.details["fd_max_relative_error"] <= 1e-4


def test_criterion_06_newton_taylor_fidelity_sweep():
    started = time.perf_counter()
    worst_at_100 = 0.0
    monotone = True
    for seed in range(20):
        rng = nk.Rng(600 + seed)
        params = attn.random_params(rng, 8, 2, scores="distance")
        tied = attn.tied_newton_params(params)
        z = rng.normal_vector(8)
        tokens = rng.normal_matrix(8, 16)
        max_sq = 0.0
        for h in range(tied.heads):
            q = tied.w_query[h] @ z
            keys = tied.w_key[h] @ tokens
            sq = keys - q[:, None]
            weights = nk.softmax(-0.5 * np.sum(sq * sq, axis=0)
                                 / tied.score_temp[h])
            centered = keys - (keys @ weights)[:, None]
            max_sq = max(max_sq, float(np.max(np.sum(centered ** 2, axis=0))))
        rels = []
        for factor in (1.0, 10.0, 100.0, 1000.0):
            probe = dataclasses.replace(tied,
                                        bias_temp=(factor * max_sq,) * tied.heads)
            exact = attn.mha2nd_exact(probe, z, tokens)
            taylor = attn.mha2nd1st(probe, z, tokens)
            rels.append(float(np.linalg.norm(exact - taylor)
                              / np.linalg.norm(exact - z)))
        monotone &= all(rels[i + 1] <= rels[i] + 1e-12 for i in range(3))
        worst_at_100 = max(worst_at_100, rels[2])
    passed = monotone and worst_at_100 < 1e-2
    ok = _report(6, "exact-inverse vs Taylor step over growing bias temperature",
                 passed, f"monotone = {monotone}, worst rel diff at 100x = "
                 f"{worst_at_100:.3e}", started, 2.0)
    assert ok


def test_criterion_07_analytic_gradients_match_finite_differences():
    started = time.perf_counter()
    worst = {"grad_z": 0.0, "grad_weight": 0.0, "ce_grad_head": 0.0}
    for seed in range(50):
        rng = nk.Rng(700 + seed)
        weight = rng.normal_matrix(8, 8, 1 / math.sqrt(8))
        spec = (en.elastic_spec if seed % 2 else en.inner_product_spec)(weight, 1.0)
        z = rng.normal_vector(8)
        tokens = rng.normal_matrix(8, 12)

        grad = en.grad_z(spec, z, tokens, "strict")
        fd = nk.fd_gradient(lambda v: en.helmholtz_free_energy(spec, v, tokens), z)
        worst["grad_z"] = max(worst["grad_z"],
                              np.max(np.abs(grad - fd)) / max(np.max(np.abs(fd)), 1e-10))

        kind = en.elastic_spec if seed % 2 else en.inner_product_spec
        wgrad = en.grad_weight(spec, z, tokens)
        wfd = nk.fd_gradient(
            lambda flat: en.helmholtz_free_energy(
                kind(flat.reshape(8, 8), 1.0), z, tokens), weight.ravel()
        ).reshape(8, 8)
        worst["grad_weight"] = max(worst["grad_weight"],
                                   np.max(np.abs(wgrad - wfd))
                                   / max(np.max(np.abs(wfd)), 1e-10))

        head = rng.normal_matrix(8, 3, 0.5)
        target = ls.one_hot(seed % 3, 3)
        hgrad = ls.ce_grad_head(head, z, target)
        hfd = nk.fd_gradient(
            lambda flat: ls.cross_entropy(flat.reshape(8, 3).T @ z, target),
            head.ravel()).reshape(8, 3)
        worst["ce_grad_head"] = max(worst["ce_grad_head"],
                                    np.max(np.abs(hgrad - hfd))
                                    / max(np.max(np.abs(hfd)), 1e-10))
    passed = all(v <= 1e-6 for v in worst.values())
    detail = ", ".join(f"{k} rel = {v:.2e}" for k, v in worst.items())
    ok = _report(7, "analytic gradients vs central differences (50 each)",
                 passed, detail, started, 5.0)
    assert ok


def test_criterion_08_degenerate_parameter_identities():
    started = time.perf_counter()
    rng = nk.Rng(800)
    spec = en.elastic_spec(rng.normal_matrix(16, 16, 0.25), 1.0)
    z0 = nk.sample_hypersphere(rng, 16, 1.0)
    tokens = np.stack([nk.sample_hypersphere(rng, 16, 1.0) for _ in range(24)],
                      axis=1)
    vanilla = de.descend(spec, de.Vanilla(0.02), z0, tokens, max_iters=30,
                         tol=1e-300)
    zero_beta = de.descend(spec, de.Momentum(0.02, 0.0), z0, tokens,
                           max_iters=30, tol=1e-300)
    bitwise = all(np.array_equal(a.z, b.z) and a.energy == b.energy
                  for a, b in zip(vanilla.steps, zero_beta.steps))
    first_mom = de.descend(spec, de.Momentum(0.02, 0.9), z0, tokens,
                           max_iters=1, tol=1e-300).steps[1].z
    first_nag = de.descend(spec, de.Nag(0.02, 0.9), z0, tokens,
                           max_iters=1, tol=1e-300).steps[1].z
    first_err = max(np.max(np.abs(first_mom - vanilla.steps[1].z)),
                    np.max(np.abs(first_nag - vanilla.steps[1].z)))

    params = attn.random_params(nk.Rng(801), 8, 2, scores="inner")
    zq = nk.Rng(802).normal_vector(8)
    toks = nk.Rng(803).normal_matrix(8, 12)
    zero_tau = dataclasses.replace(params, tau=(0.0,) * params.heads)
    tau_err = float(np.max(np.abs(attn.light_mha2nd1st(zero_tau, zq, toks)
                                  - attn.mha(params, zq, toks))))
    passed = bitwise and first_err <= 1e-14 and tau_err <= 1e-14
    detail = (f"zero-momentum trace bitwise = {bitwise}, first-step err = "
              f"{first_err:.1e}, zero-tau err = {tau_err:.1e}")
    ok = _report(8, "degenerate parameters collapse to the plain forms",
                 passed, detail, started, 1.0)
    assert ok


def test_criterion_09_descent_behavior_and_optimizer_ordering():
    """Monotone vanilla descent passes 100/100. The ordering fraction is
    structurally below its soft threshold: with the learning rate applied in
    the position update (momentum accumulates raw gradients), the momentum
    iteration matrix has complex roots of modulus sqrt(beta) ~ 0.949 at
    eta = 0.05, beta = 0.9, while this lookahead form's dominant root stays
    above ~0.95 for every curvature (and it loses stability beyond
    curvature ~ 1 + 1/beta). Momentum therefore reaches any tight gradient
    tolerance first on essentially every converging instance; the >= 0.6
    fraction could only be met vacuously by a budget too small for anyone
    to converge. Kept red deliberately rather than weakened; full analysis
    in the project notes.
    """
    started = time.perf_counter()
    monotone = 0
    for seed in range(100):
        rng = nk.Rng(900 + seed)
        spec = en.elastic_spec(rng.normal_matrix(16, 16, 0.25), 1.0)
        z0 = nk.sample_hypersphere(rng, 16, 1.0)
        tokens = np.stack([nk.sample_hypersphere(rng, 16, 1.0)
                           for _ in range(64)], axis=1)
        trace = de.descend(spec, de.Vanilla(0.01), z0, tokens, max_iters=100,
                           tol=1e-300)
        if np.all(np.diff(trace.energies) <= 1e-12):
            monotone += 1

    optimizers = [de.Vanilla(0.05), de.Momentum(0.05, 0.9), de.Nag(0.05, 0.9)]
    ordered = 0
    sweep_a = []
    for seed in range(100):
        spec, z0, tokens = de.conditioned_multihead_instance(9000 + seed, 16,
                                                             64, 4)
        rows = de.compare_optimizers(spec, z0, tokens, optimizers, budget=3000,
                                     tol=1e-6)
        by = {r["optimizer"]: r["iters_to_tol"] for r in rows}
        sweep_a.append(by)
        if by["nag"] <= by["momentum"] <= by["vanilla"]:
            ordered += 1
    spec0, z00, tokens0 = de.conditioned_multihead_instance(9000, 16, 64, 4)
    rerun = de.compare_optimizers(spec0, z00, tokens0, optimizers, 3000, 1e-6)
    deterministic = {r["optimizer"]: r["iters_to_tol"] for r in rerun} == sweep_a[0]
    fraction = ordered / 100.0
    passed = monotone == 100 and deterministic and fraction >= 0.6
    detail = (f"monotone seeds = {monotone}/100, deterministic report = "
              f"{deterministic}, ordering fraction = {fraction:.2f} "
              f"(soft threshold 0.6)")
    ok = _report(9, "vanilla monotonicity + optimizer-ordering sweep",
                 passed, detail, started, 30.0)
    assert monotone == 100 and deterministic
    assert fraction >= 0.6, (
        "expected red: iters(NAG) <= iters(momentum) fails at the prescribed "
        "eta/beta because momentum's asymptotic modulus sqrt(beta) beats this "
        "lookahead form on every converging instance; see notes/decisions "
        "ledger for the linearization and measurements")
    assert ok


def test_criterion_10_taylor_variant_scales_linearly_in_tokens():
    started = time.perf_counter()
    rows, slope = run_bench("mha2nd1st", dim=256, heads=4,
                            tokens_list=[256, 512, 1024, 2048, 4096],
                            reps=25, seed=7)
    exact_rows, _ = run_bench("mha2nd", dim=256, heads=4,
                              tokens_list=[256, 512], reps=5, seed=7)
    # the exact variant's head_dim^3 bracket inverse is an additive constant:
    # measured and reported, not asserted
    overhead = exact_rows[0]["median_ns"] - rows[0]["median_ns"]
    passed = 0.9 <= slope <= 1.15
    detail = (f"log-log slope = {slope:.3f} in [0.9, 1.15]; exact-inverse "
              f"constant at N=256 ~ {overhead / 1e6:.2f} ms")
    ok = _report(10, "Taylor-truncated forward wall-time vs token count",
                 passed, detail, started, 120.0)
    assert ok


def test_criterion_11_alternating_training_and_loop_identity():
    started = time.perf_counter()
    improved = 0
    for seed in range(10):
        rng = nk.Rng(1100 + seed)
        weight = np.eye(8) + rng.normal_matrix(8, 8, 0.01)
        head = rng.normal_matrix(8, 2, 0.1)
        cfg = ls.LoopConfig(en.elastic_spec(weight, 1.0), 1, 0.1,
                            causal=False, head=head)
        data = ls.two_cluster_dataset(rng, 50, 8, 8)
        trace = ls.alternating_optimize(cfg, data, epochs=50, eta=0.1)
        if trace.epochs[-1].cross_entropy < trace.epochs[0].cross_entropy:
            improved += 1

    worst = 0.0
    for seed in range(5):
        inst = eq.make_tied_instance(nk.Rng(1200 + seed), "softmax", 8, 8, 1,
                                     1.0, 0.1, 1.0)
        bound = en.upper_bound_spec(inst.spec)
        cfg = ls.LoopConfig(bound, 1, inst.eta, causal=False, convention="tied")
        trace = ls.loop_forward(cfg, inst.tokens)
        batched = np.stack(
            [attn.softmax_attention(inst.params, inst.tokens[:, i], inst.tokens)
             for i in range(8)], axis=1)
        worst = max(worst, float(np.max(np.abs(trace.iterates[1] - batched))))

    passed = improved >= 9 and worst <= 1e-12
    detail = (f"training CE reduced in {improved}/10 seeds; single-iteration "
              f"loop vs batched tied forward max|diff| = {worst:.2e}")
    ok = _report(11, "alternating training improves CE + loop/attention identity",
                 passed, detail, started, 30.0)
    assert ok
