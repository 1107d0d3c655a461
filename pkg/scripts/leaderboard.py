"""Re-rank the challenge leaderboard rows and compare with the printed ranks.

    python scripts/leaderboard.py
"""
import argparse
import itertools

from moemos.metrics import METRICS, MetricsReport, rank_table, render_rank_table

TEAMS = ["B03", "T01", "T11", "T13", "T16", "T19", "Ours"]
RAW = {
    "utterance": [(.273, .821, .695, .508), (.303, .804, .643, .459), (.282, .813, .714, .536),
                  (.298, .796, .671, .487), (.287, .830, .723, .589), (.238, .846, .694, .513),
                  (.277, .811, .716, .529)],
    "system": [(.119, .941, .749, .547), (.104, .957, .866, .705), (.085, .968, .917, .789),
               (.090, .972, .926, .779), (.071, .952, .891, .750), (.080, .958, .914, .758),
               (.056, .978, .913, .758)],
}
PRINTED = {
    "utterance": [(2, 4, 5, 6), (8, 7, 8, 8), (4, 5, 4, 3), (6, 8, 7, 7), (5, 3, 2, 1), (1, 2, 6, 5),
                  (3, 6, 3, 4)],
    "system": [(8, 8, 8, 8), (6, 5, 7, 7), (4, 4, 3, 2), (5, 3, 2, 3), (2, 7, 6, 6), (3, 6, 4, 4),
               (1, 2, 5, 4)],
}


def main():
    argparse.ArgumentParser(description=__doc__.splitlines()[0]).parse_args()
    for level in RAW:
        entries = [(t, MetricsReport(level, *r, n=0)) for t, r in zip(TEAMS, RAW[level])]
        print(render_rank_table(entries, level))
        rows = rank_table(entries)
        for c, m in enumerate(METRICS):
            ours = [r["ranks"][m] for r in rows]
            printed = [p[c] for p in PRINTED[level]]
            flips = [(TEAMS[i], TEAMS[j]) for i, j in itertools.combinations(range(len(TEAMS)), 2)
                     if (ours[i] > ours[j]) - (ours[i] < ours[j]) != (printed[i] > printed[j]) - (printed[i] < printed[j])]
            print(f"  {m:<5} {'order matches' if not flips else 'order differs: ' + str(flips)}")
        print()


if __name__ == "__main__":
    main()
