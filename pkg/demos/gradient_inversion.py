"""Gradient inversion against the three views a server can have of one node's update.

    python3 demos/gradient_inversion.py
"""

from securefl import attack


def main():
    setup = attack.BenchmarkSetup(trials=5)
    res = attack.attack_benchmark(setup, attack.AttackConfig(iterations=300), seed=0)
    for sc in attack.SCENARIOS:
        print(f"{sc:>10}: mean best MSE {res['mean'][sc]:.3f} (std {res['std'][sc]:.3f})")
    for name, t in res["tests"].items():
        print(f"{name}: t={t['statistic']:.2f} p={t['p_value']:.3g}")


if __name__ == "__main__":
    main()
