"""Write a synthetic reader-study CSV for trying ``ringseq stats``.

Accuracy rises a little with hospital rank and title, and image+history
accuracy sits a few points above image-only, roughly the shape of a
diagnostic reader study.  Nothing here is real data.

    python scripts/make_readers.py --n 60 --seed 0 --out readers.csv
"""
import argparse

import numpy as np

from ringseq.stats import HOSPITAL_RANKS, READER_COLUMNS, TITLES


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="readers.csv")
    a = ap.parse_args(argv)
    rng = np.random.default_rng(a.seed)
    rows = [",".join(READER_COLUMNS)]
    for i in range(a.n):
        h, t = int(rng.integers(3)), int(rng.integers(3))
        years = int(rng.integers(1, 31))
        acc = float(np.clip(0.40 + 0.03 * h + 0.02 * t + 0.002 * years + rng.normal(0, 0.1), 0, 1))
        hist = float(np.clip(acc + rng.normal(0.05, 0.05), 0, 1))
        rows.append(f"R{i:03d},{HOSPITAL_RANKS[h]},{TITLES[t]},{years},{acc:.4f},{hist:.4f}")
    with open(a.out, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    print(f"wrote {a.n} readers to {a.out}")


if __name__ == "__main__":
    main()
