"""Regenerate ``src/scanguard/data/sample_scanner.csv``.

Synthetic weekly scanner transactions for one item over two years (weeks
1-52 and 53-104) at twenty stores. Shelf prices are integer KRW and rarely
move. Occasionally a single unit sells at a discount, which shifts the
weekly average price by an amount inversely proportional to the week's
volume. Store S01 runs a one-week 630 KRW promotion in week 58 and a
820 KRW dip in weeks 84-85, both in low-volume weeks.

    python scripts/make_sample_data.py
"""

import csv
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "scanguard" / "data" / "sample_scanner.csv"
ITEM = "MILK-A"
STORES = [f"S{i:02d}" for i in range(1, 21)]
WEEKS = range(1, 105)


def main(seed: int = 20130101) -> None:
    rng = np.random.default_rng(seed)
    rows = []
    for k, store in enumerate(STORES):
        shelf = 880 if store == "S01" else int(rng.choice([850, 860, 870, 880, 890, 900]))
        mean_volume = rng.uniform(4.0, 14.0)
        for week in WEEKS:
            if rng.random() < 0.008:
                shelf += int(rng.choice([-30, -20, 20, 30]))
            price = shelf
            if store == "S01" and week == 58:
                price = 630
            elif store == "S01" and week in (84, 85):
                price = 820
            volume = 1 + int(rng.poisson(mean_volume))
            if store == "S01" and week in (83, 84, 85, 86):
                volume = 2
            n_rows = int(rng.integers(1, 4))
            cuts = np.sort(rng.choice(np.arange(1, volume), size=min(n_rows - 1, volume - 1), replace=False)) \
                if volume > 1 else np.array([], dtype=int)
            parts = np.diff(np.concatenate([[0], cuts, [volume]]))
            for part in parts:
                rows.append((store, ITEM, week, price, int(part)))
            if rng.random() < 0.035:
                rows.append((store, ITEM, week, int(round(price * 0.85)), 1))
    order = rng.permutation(len(rows))
    OUT.parent.mkdir(parents=True, exist_ok=True)
    with open(OUT, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["store_id", "item_id", "week", "price", "volume"])
        for i in order:
            w.writerow(rows[i])


if __name__ == "__main__":
    main()
