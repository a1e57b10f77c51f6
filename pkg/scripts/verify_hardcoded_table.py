"""Print the exhaustive precision table of the hardcoded model for v = 3..8."""
import argparse

from setcomplement.theory import verify_hardcoded


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--C", type=float, default=10.0)
    ap.add_argument("--norm", choices=["identity", "rmsnorm"], default="identity")
    ap.add_argument("--max-v", type=int, default=8)
    args = ap.parse_args()

    print(f"{'v':>2} {'s':>2} {'min_disp':>10} {'vC/s':>8} {'eq_dev':>8}")
    for v in range(3, args.max_v + 1):
        rep = verify_hardcoded(v, args.C, args.norm)
        for row in rep["precision"]["lengths"]:
            s = row["length"]
            print(f"{v:>2} {s:>2} {row['min_displacement']:>10.4f} {v * args.C / s:>8.4f} "
                  f"{row['max_equality_deviation']:>8.1e}")
        print(f"   checks: {rep['checks']}")


if __name__ == "__main__":
    main()
