"""Smoke test for the stabphase Python module.

Build and install first, e.g. `pip install --no-build-isolation -e crates/py`.
"""

import math

import stabphase as sp


def main():
    two = sp.Model("two_plaquette")
    three = sp.Model("three_plaquette")
    print(two, three, "version", sp.__version__)

    targets = [0.4, -1.1, 2.5]
    angles = two.solve_angles(targets)
    for c, t in enumerate(targets):
        assert abs(sp.circ_diff(two.theta_tilde(c, angles), t)) < 1e-10
    for m in (two, three):
        dev = sp.oracle_deviation(m, 100, 1)
        print(f"{m.kind}: oracle deviation {dev:.2e}")
        assert dev <= 1e-10

    grid = sp.PosteriorGrid(1024)
    grid.update_cosine(0.5, 0.5, 0.0)
    mean, var, _ = grid.moments()
    assert abs(mean) < 1e-9 and abs(grid.mass() - 1.0) < 1e-12

    r = sp.bayes_single(2.0, 500, seed=3)
    print("bayes_single:", r)
    assert abs(sp.circ_diff(r.phases[0], 2.0)) < 5 * math.sqrt(r.variances[0])

    r = sp.bayes_marginal(three, [0.1 * k for k in range(7)], 2000, seed=5, grid_bins=1024)
    print("bayes_marginal (three plaquettes):", r)
    assert r.preparations_used == 2000

    pts = sp.monte_carlo_variance("bayes-marginal", two, [250, 500, 1000, 2000], trials=100, seed=7, grid_bins=1024)
    c = sp.fit_curve(pts)
    print(f"two-plaquette adaptive marginal Bayes, 100 trials: sigma2 ~ {c:.2f}/n")
    assert 2.0 < c < 8.0

    assert abs(sp.mean_alpha(2) - (2 - math.sqrt(3)) / 2) < 1e-6
    print("smoke test passed")


if __name__ == "__main__":
    main()
