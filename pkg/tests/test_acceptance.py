"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
written straight to the terminal even when output capture is on.
"""

import contextlib
import json
import statistics
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import transmeter.train as train_mod
from fd_oracle import central_differences, max_relative_error
from test_nn import gradient_check, random_network
from test_train import SMALL, random_batch, small_pair
from transmeter.cli import main as cli_main
from transmeter.errors import UndefinedScoreError
from transmeter.model import build_source_model, build_transmeter
from transmeter.nn import Adam, bce_grad
from transmeter.train import (
    ObjectiveBreakdown,
    TrainConfig,
    compute_objective,
    make_optimizers,
    objective_gradients,
    stopping_point,
    train_step,
    train_transmeter,
)
from transmeter.transfer import read_reports, transferability

SUITE_SEEDS = (1, 2, 3, 4, 5)
# a larger target test share keeps the per-seed ordering out of the noise
# of a 60-row test set; see the README
SUITE_SPLIT = "0.3"


@pytest.fixture
def verdict(request, pytestconfig):
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    @contextlib.contextmanager
    def run(name, detail=lambda: ""):
        ok = False
        try:
            yield
            ok = True
        finally:
            extra = detail()
            line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({extra})" if extra else "")
            with capman.global_and_fixture_disabled():
                print("\n" + line, flush=True)

    return run


# gradient correctness ---------------------------------------------------------


def _objective_gradient_error(seed):
    r = np.random.default_rng(seed)
    d_s, d_t = int(r.integers(2, 6)), int(r.integers(2, 6))
    enc = [int(w) for w in r.integers(2, 6, size=int(r.integers(1, 3)))]
    src = build_source_model(d_s, [int(w) for w in r.integers(2, 6, size=2)], r)
    model = build_transmeter(d_s, d_t, enc, source=src, rng=r)
    for net in model.blocks().values():
        for layer in net.layers:
            layer.bias[:] = r.normal(scale=0.5, size=layer.bias.shape)
    batch = random_batch(model, 5, 5, seed=seed)
    cfg = TrainConfig(alpha=float(r.uniform(0.1, 2)), beta=float(r.uniform(0.1, 2)))

    objective_gradients(model, batch, cfg)
    analytic, arrays = {}, {}
    for block, net in model.blocks().items():
        for i, layer in enumerate(net.layers):
            for name, arr in layer.parameters().items():
                analytic[(block, i, name)] = layer.grads[name].copy()
                arrays[(block, i, name)] = arr

    def total():
        return compute_objective(model, batch, cfg, train=True).total

    def domain():
        return compute_objective(model, batch, cfg, train=True).domain_loss

    # the encoder, decoder and predictor descend the total; the domain
    # classifier descends its own loss
    numeric = central_differences(total, {k: v for k, v in arrays.items() if k[0] != "domain_classifier"})
    numeric.update(central_differences(domain, {k: v for k, v in arrays.items() if k[0] == "domain_classifier"}))
    return max_relative_error(analytic, numeric)


def test_gradient_correctness(verdict):
    worst = []
    start = time.perf_counter()
    with verdict("gradient correctness", lambda: f"{len(worst)} networks, max rel err {max(worst, default=0):.2e}, "
                 f"{time.perf_counter() - start:.1f}s"):
        for case in range(12):
            rng = np.random.default_rng(5000 + case)
            activation = ("relu", "sigmoid", "linear")[case % 3]
            net = random_network(rng, 1 + case % 3, bool(case % 2), activation)
            x = rng.normal(size=(6, net.in_features))
            if net.out_features == 1 and activation == "sigmoid":
                target, loss = rng.integers(0, 2, size=6).astype(float), "bce"
            else:
                target, loss = rng.normal(size=(6, net.out_features)), "mse"
            worst.append(gradient_check(net, x, target, loss))
        for seed in range(12):
            worst.append(_objective_gradient_error(seed))
        assert len(worst) >= 20
        assert max(worst) < 1e-4
        assert time.perf_counter() - start < 60


# objective decomposition ------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 10), st.floats(0, 10))
def _decomposes(seed, alpha, beta):
    m = build_transmeter(4, 3, [5], rng=np.random.default_rng(seed))
    out = compute_objective(m, random_batch(m, seed=seed), TrainConfig(alpha=alpha, beta=beta))
    assert abs(out.total - (out.label_loss - alpha * out.domain_loss + beta * out.recon_loss)) <= 1e-12


def _control_trajectory(model, batch, lr, steps):
    """Plain supervised run: encoder and predictor fit the labels, the domain
    classifier fits its own loss on a detached representation, no decoder."""
    enc, lp, dc = model.encoder.copy(), model.label_predictor.copy(), model.domain_classifier.copy()
    opts = [Adam(net, lr=lr) for net in (enc, lp, dc)]
    out = []
    for _ in range(steps):
        rep = np.vstack([batch.source_features, enc.forward(batch.target_features, train=True)])
        y_hat = lp.forward(rep, train=True).reshape(-1)
        g = lp.backward(bce_grad(y_hat, batch.labels).reshape(-1, 1))
        enc.backward(g[batch.n_source :])
        d_hat = dc.forward(rep, train=True).reshape(-1)
        dc.backward(bce_grad(d_hat, batch.domain_labels).reshape(-1, 1))
        for opt in opts:
            opt.step()
        out.append((enc.flat_params.copy(), dc.flat_params.copy()))
    return out


def test_objective_decomposition(verdict):
    worst = []
    with verdict("objective decomposition and alpha=beta=0 control",
                 lambda: f"max encoder/dc deviation from control {max(worst, default=0):.1e}"):
        _decomposes()
        for seed in range(5):
            model = build_transmeter(4, 3, [6, 5], rng=np.random.default_rng(seed))
            batch = random_batch(model, 6, 6, seed=seed + 10)
            cfg = TrainConfig(alpha=0.0, beta=0.0)
            dec0 = model.decoder.flat_params.copy()
            control = _control_trajectory(model, batch, cfg.lr, steps=5)
            opts = make_optimizers(model, cfg.lr)
            for enc_ref, dc_ref in control:
                train_step(model, batch, cfg, opts)
                worst.append(np.max(np.abs(model.encoder.flat_params - enc_ref)))
                worst.append(np.max(np.abs(model.domain_classifier.flat_params - dc_ref)))
                assert model.decoder.flat_params.tobytes() == dec0.tobytes()
            assert max(worst) <= 1e-10


# transferability formula ------------------------------------------------------


def test_transferability_formula(verdict):
    with verdict("transferability formula"):
        assert transferability(0.77, 0.70) == pytest.approx(10.0, abs=1e-9)
        assert transferability(0.6, 0.6) == 0.0
        assert transferability(0.72, 0.80) == pytest.approx(-10.0, abs=1e-9)
        with pytest.raises(UndefinedScoreError):
            transferability(0.5, 0.0)


# early stopping ---------------------------------------------------------------


def test_early_stopping_suite(verdict, monkeypatch):
    with verdict("early-stopping unit suite"):
        assert stopping_point([3, 2, 4, 5, 6], patience=3) == (5, 2)
        assert stopping_point([5, 4, 3, 2, 1], patience=1, max_epochs=5) == (5, 5)

        losses = iter([3.0, 2.0, 4.0, 5.0, 6.0, 1.0])
        states = []
        real = train_mod.compute_objective

        def fake(model, batch, cfg, train=False):
            real(model, batch, cfg, train)
            states.append(model.encoder.flat_params.copy())
            return ObjectiveBreakdown.combine(next(losses), 0.0, 0.0, cfg.alpha, cfg.beta)

        monkeypatch.setattr(train_mod, "compute_objective", fake)
        src, tgt = small_pair()
        model, hist = train_transmeter(src, tgt, TrainConfig(patience=3, **SMALL))
        assert (hist.stopped_epoch, hist.best_epoch) == (5, 2)
        assert model.encoder.flat_params.tobytes() == states[1].tobytes()


# synthetic suite --------------------------------------------------------------


def _run(*argv):
    code = cli_main([str(a) for a in argv])
    assert code == 0, argv
    return code


@pytest.fixture(scope="session")
def suite_runs(tmp_path_factory):
    """Every seed of the ordering suite under the full, -S and -R variants."""
    root = tmp_path_factory.mktemp("suite")
    runs = {}
    for seed in SUITE_SEEDS:
        d = root / f"seed{seed}"
        start = time.perf_counter()
        _run("synthetic", "ordering", "--seed", seed, "--out", d)
        reg = d / "registry.ini"
        for variant in ("full", "no_pretrain", "no_recon"):
            _run("--registry", reg, "measure", "target", "--all", "--fast", "--split", SUITE_SPLIT,
                 "--seed", seed, "--ablation", variant, "--pretrain-missing", "--out", d / variant)
            if variant == "full":
                elapsed = time.perf_counter() - start
            runs[seed, variant] = {r.source_name: r for r in read_reports(d / variant / "reports.jsonl")}
        runs[seed, "seconds"] = elapsed
        runs[seed, "dir"] = d
    return runs


def _ordered(reports):
    best_ac = max(reports["source_a"].transferability, reports["source_c"].transferability)
    return best_ac > reports["source_b"].transferability


def test_synthetic_ordering(verdict, suite_runs):
    ordered = [_ordered(suite_runs[s, "full"]) for s in SUITE_SEEDS]
    flipped = [suite_runs[s, "full"]["source_c"].flip_used for s in SUITE_SEEDS]
    slowest = max(suite_runs[s, "seconds"] for s in SUITE_SEEDS)
    with verdict("synthetic ordering", lambda: f"A or C above B {sum(ordered)}/5, C flipped {sum(flipped)}/5, "
                 f"slowest fast pipeline {slowest:.0f}s"):
        assert sum(ordered) >= 4
        assert sum(flipped) >= 4
        assert slowest < 600


def test_ablation_behavior(verdict, suite_runs):
    def epochs(variant):
        return [r.stopped_epoch for s in SUITE_SEEDS for r in suite_runs[s, variant].values()]

    full_median = statistics.median(epochs("full"))
    s_median = statistics.median(epochs("no_pretrain"))
    full_rate = sum(_ordered(suite_runs[s, "full"]) for s in SUITE_SEEDS)
    r_rate = sum(_ordered(suite_runs[s, "no_recon"]) for s in SUITE_SEEDS)
    with verdict("ablation behavior", lambda: f"median epochs -S {s_median} vs full {full_median}, "
                 f"ordering -R {r_rate}/5 vs full {full_rate}/5"):
        assert s_median > full_median
        assert r_rate <= full_rate


def test_determinism(verdict, suite_runs, tmp_path):
    run_dir = suite_runs[SUITE_SEEDS[0], "dir"] / "full"
    with verdict("determinism"):
        _run("replay", run_dir / "manifest.json", "--out", tmp_path / "again")
        for name in ("reports.jsonl", "summary.csv"):
            assert (tmp_path / "again" / name).read_bytes() == (run_dir / name).read_bytes(), name
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["command"] == "measure"
