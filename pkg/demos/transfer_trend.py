"""Does a scarce target language gain from two full-size relatives?

    python3 demos/transfer_trend.py                 # all 72 runs, resumable
    python3 demos/transfer_trend.py --targets xa --seeds 0

Each synthetic language in turn is cut to 2K, 5K, 10K and 20K training words.
mono-awd sees only that text; multi-awd also trains on the other two languages
at full size (about 50K words each) with the lower layers shared.  Rows go to
results/transfer_trend.csv as they finish, so an interrupted run picks up
where it stopped.
"""
import argparse
from pathlib import Path

from multilm import transfer
from multilm.sweep import format_table, size_label

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--csv", default=str(ROOT / "results" / "transfer_trend.csv"))
    ap.add_argument("--targets", default=",".join(transfer.LANGUAGES))
    ap.add_argument("--seeds", default=",".join(map(str, transfer.SEEDS)))
    args = ap.parse_args()
    targets = tuple(args.targets.split(","))
    seeds = tuple(int(s) for s in args.seeds.split(","))

    def progress(row):
        print(f"{row.language} {row.variant:9} {size_label(row.threshold):>5} seed {row.seed}: "
              f"test {row.test_ppl:7.2f}  ({row.epochs} epochs, {row.seconds:.0f}s)", flush=True)

    csv = Path(args.csv)
    report = transfer.run(csv_path=csv, log_dir=csv.parent / "transfer_cells", progress=progress,
                          targets=targets, seeds=seeds)
    print()
    print(format_table(report))
    for v in transfer.verdict(report):
        gaps = "  ".join(f"{size_label(t)} {100 * g:+.1f}%" for t, g in v.gaps.items())
        print(f"{v.language}: multilingual advantage {gaps}  ->  "
              f"{'wins when scarce' if v.low_wins else 'does not win when scarce'}, "
              f"{'shrinks' if v.shrinks else 'does not shrink'} with more data")
    hours = sum(r.seconds for r in report.rows) / 3600
    print(f"\ntotal training and evaluation time {hours:.2f}h over {len(report.rows)} runs")
    for cell, msg in report.failures:
        print("failed:", cell, msg)


if __name__ == "__main__":
    main()
