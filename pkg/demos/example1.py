"""Optimal values of the two-stage reference problem and a sampling cross-check.

Run with ``python demos/example1.py``.
"""

from dynchance.oracle import (
    EXAMPLE_LEVEL,
    example1_values,
    in_S,
    in_S_tilde,
    psi,
    psi_tilde,
    saa_probability,
    sample_example1,
)


def main():
    names = ("phi", "phi1", "phi2", "phi3", "phi4")
    for name, value in zip(names, example1_values()):
        print(f"{name:5s} = {value:.6f}")

    # the optimal rules of the intersected and clipped problems, checked by sampling
    for label, f, event, (y1, a) in (("unclipped", psi, in_S, (2 / 3, 1.5)),
                                     ("clipped", psi_tilde, in_S_tilde, (0.5, -1.0))):
        est, sd = saa_probability(lambda xi: event(xi, a, y1), sample_example1, 1_000_000, seed=1)
        print(f"{label:9s} y1={y1:.4f} a={a:+.2f}: closed form {f(y1, a):.6f}, "
              f"sampled {est:.6f} +- {sd:.1e} (level {EXAMPLE_LEVEL:.6f})")


if __name__ == "__main__":
    main()
