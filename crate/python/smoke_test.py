"""Smoke test for the harqopt Python extension.

Build and install first:
    pip install --no-build-isolation ./crates/py
then run:
    python python/smoke_test.py
"""

import math

import harqopt


def main():
    assert harqopt.correlation_factor(0.5, 2) == 0.984375
    assert harqopt.correlation_factor(0.7, 1) == 1.0
    assert abs(harqopt.g_function(2.0, 3) - 1.29844) < 1e-5

    rep = harqopt.evaluate("ir", [29.5, 17.5, 15.2], 0.5)
    assert rep.feasible, rep
    assert 0.05 < rep.tau < 0.06, rep
    cc = harqopt.evaluate("cc", [29.5, 17.5, 15.2], 0.5)
    ti = harqopt.evaluate("typei", [29.5, 17.5, 15.2], 0.5)
    assert rep.outage_profile[-1] <= cc.outage_profile[-1] <= ti.outage_profile[-1]

    p = 10.0
    (mean, stderr), = harqopt.simulate_outage("typei", [p], 0.0, 200_000, seed=3, workers=2)
    exact = 1.0 - math.exp(-3.0 / p)
    assert abs(mean - exact) < 4 * stderr, (mean, exact, stderr)

    powers, best = harqopt.grid_search("ir", 0.5, points=20)
    assert best.feasible and len(powers) == 3

    pol = harqopt.train("ir", rho=0.5, epochs=5, seed=7)
    assert len(pol.tau_history()) == 5 * 20
    assert len(pol.powers(0.5)) == 3
    assert pol.evaluate(0.5).tau > 0.0

    try:
        harqopt.evaluate("bogus", [1.0], 0.0)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown scheme accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
