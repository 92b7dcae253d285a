"""Simulated online latency of encrypted inference, FSS comparisons vs a multi-round baseline.

    python3 demos/latency_benchmark.py
"""

from securefl import bench


def main():
    res = bench.compare_protocols((1.0, 10.0, 50.0, 100.0))
    print(f"{'latency':>8} {'fss (s)':>9} {'baseline (s)':>13} {'reduction':>10} {'rounds':>12}")
    for lat, r in res.items():
        f, b = r["fss"], r["baseline"]
        print(f"{float(lat):6.0f}ms {f['elapsed_s']:9.4f} {b['elapsed_s']:13.4f} {r['reduction']:10.1%} "
              f"{f['rounds']:>5}/{b['rounds']:<5}")


if __name__ == "__main__":
    main()
