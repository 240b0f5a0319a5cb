"""Smoke test for the probe_py extension module.

Build and run from the repository root:

    maturin develop -m crates/py/Cargo.toml --release
    python python/smoke_test.py

or without maturin:

    cargo build --release -p probe-py --features extension-module
    cp target/release/libprobe_py.so python/probe_py.so
    python python/smoke_test.py
"""

import json
import math
import random
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import probe_py  # noqa: E402


def mixture(n, rng):
    return [rng.gauss(-2.0, 0.6) if rng.random() < 0.4 else rng.gauss(1.5, 0.5) for _ in range(n)]


def trapezoid(xs, ys):
    return sum((xs[i + 1] - xs[i]) * (ys[i] + ys[i + 1]) / 2 for i in range(len(xs) - 1))


def check(name, ok, detail=""):
    print(f"{'ok  ' if ok else 'FAIL'} {name} {detail}")
    if not ok:
        raise SystemExit(1)


def main():
    rng = random.Random(0)

    xs = mixture(2000, rng)
    flow, report = probe_py.Flow1d.fit(xs, json.dumps({"epochs": 200}))
    grid, phi, _ = flow.density_grid(-60.0, 60.0, 24001)
    mass = trapezoid(grid, phi)
    check("flow1d mass", abs(mass - 1.0) < 1e-3, f"{mass:.6f}")
    check("flow1d loss decreases", report.final_loss < report.initial_loss)
    again = probe_py.Flow1d.from_json(flow.to_json())
    check("flow1d round trip", all(again.density(x) == flow.density(x) for x in (-3.0, 0.0, 1.5)))

    rows = []
    for _ in range(1000):
        u, v = rng.gauss(0, 1), rng.gauss(0, 1)
        rows.append([u, 0.8 * u + 0.6 * v])
    nd, _ = probe_py.FlowNd.fit(rows, json.dumps({"epochs": 10, "batch_size": 100}))
    point = [0.3, -0.2]
    table = nd.local_losses(point)
    total = sum(sum(row) for row in table)
    check("flownd local losses sum to nll", math.isclose(total, nd.nll(point), rel_tol=1e-12), f"{total:.6f}")
    check("flownd density", nd.density(point) > 0.0)

    feats = [[rng.uniform(-2, 2)] for _ in range(500)]
    labels = ["pos" if f[0] > 0 else "neg" for f in feats]
    cls, _ = probe_py.Classifier.fit(feats, labels, json.dumps({"epochs": 50}))
    probs = cls.probabilities([1.0])
    check("classifier probabilities sum to one", abs(sum(probs) - 1.0) < 1e-12, str(probs))
    check("classifier separates", cls.prob([1.5], "pos") > 0.8)

    ts = [[0.5 * f[0] + rng.gauss(0, 0.3)] for f in feats]
    head, _ = probe_py.GaussianHead.fit(feats, ts, json.dumps({"epochs": 100}))
    mu, sd = head.predict([1.0])
    check("regression mean", abs(mu[0] - 0.5) < 0.2, f"{mu[0]:.3f} sd {sd[0]:.3f}")

    data = [rng.gauss(5.0, 2.0) for _ in range(1000)]
    m, v, bm, bv = probe_py.estimate_gaussian(data, json.dumps({"epochs": 50}))
    check("streaming estimate matches batch", abs(m - bm) < 1e-3 and abs(v - bv) < 5e-2, f"{m:.4f} {v:.4f}")

    unit = [[rng.betavariate(2, 5)] for _ in range(300)]
    tm, _ = probe_py.TimeModel.fit(unit, json.dumps({"epochs": 2, "batch_size": 100}))
    dens = tm.density([[0.2], [0.5]], draws=16)
    check("time model density", all(d >= 0.0 and math.isfinite(d) for d in dens), str(dens))
    times, states = tm.rollout([0.2])
    check("time model rollout", len(times) == len(states) > 1)

    try:
        probe_py.Flow1d.fit([1.0, 2.0], '{"optimizer": "sgd"}')
    except ValueError as e:
        check("bad config raises ValueError", True, str(e))
    else:
        check("bad config raises ValueError", False)

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
