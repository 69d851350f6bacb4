"""Print the re-read step sensitivity table on the synthetic counting task."""

import argparse

from rereadnet.sweep import format_table, has_late_peak, t_sweep


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--pairs", type=int, default=500)
    args = p.parse_args()
    rows = t_sweep(n_pairs=args.pairs, seeds=args.seeds, epochs=args.epochs)
    print(format_table(rows))
    print("late peak:", has_late_peak([r.test_accuracy for r in rows]))


if __name__ == "__main__":
    main()
