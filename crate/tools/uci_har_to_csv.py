#!/usr/bin/env python3
"""Convert the UCI HAR dataset into the selfhar recording CSV.

The dataset ships 128-sample windows at 50 Hz with 50% overlap, in time order
per subject. Consecutive windows with the same subject and activity are
stitched back into one continuous segment: every window contributes its first
64 samples and the last window of a run contributes all 128. Each segment gets
its own `trial` id so that adjacent segments never merge on ingestion.

Channels are the total acceleration (body + gravity) in g.

Usage:
    uci_har_to_csv.py "UCI HAR Dataset" out.csv [--split train|test|both]
"""

import argparse
import csv
import os
import sys

WINDOW = 128
HOP = 64
AXES = ("x", "y", "z")


def read_rows(path):
    with open(path) as f:
        return [line.split() for line in f if line.strip()]


def load_split(root, split):
    base = os.path.join(root, split)
    subjects = [int(r[0]) for r in read_rows(os.path.join(base, f"subject_{split}.txt"))]
    labels = [int(r[0]) for r in read_rows(os.path.join(base, f"y_{split}.txt"))]
    signals = []
    for axis in AXES:
        path = os.path.join(base, "Inertial Signals", f"total_acc_{axis}_{split}.txt")
        signals.append([[float(v) for v in r] for r in read_rows(path)])
    n = len(subjects)
    if len(labels) != n or any(len(s) != n for s in signals):
        sys.exit(f"{split}: subject, label and signal files disagree on window count")
    for s in signals:
        for i, w in enumerate(s):
            if len(w) != WINDOW:
                sys.exit(f"{split}: window {i} has {len(w)} samples, expected {WINDOW}")
    return subjects, labels, signals


def segments(subjects, labels):
    """Maximal runs [start, end) of consecutive windows sharing subject and label."""
    start = 0
    for i in range(1, len(subjects) + 1):
        if i == len(subjects) or (subjects[i], labels[i]) != (subjects[start], labels[start]):
            yield start, i
            start = i


def convert(root, splits, out):
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["trial", "user_id", "activity", "timestamp", "ax", "ay", "az"])
    trial = 0
    for split in splits:
        subjects, labels, signals = load_split(root, split)
        for start, end in segments(subjects, labels):
            t = 0
            for i in range(start, end):
                take = WINDOW if i == end - 1 else HOP
                for j in range(take):
                    writer.writerow(
                        [trial, subjects[i], labels[i], t]
                        + [repr(signals[c][i][j]) for c in range(3)]
                    )
                    t += 1
            trial += 1


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root", help='the extracted "UCI HAR Dataset" directory')
    ap.add_argument("output", help="CSV file to write")
    ap.add_argument("--split", choices=["train", "test", "both"], default="both")
    args = ap.parse_args()
    splits = ["train", "test"] if args.split == "both" else [args.split]
    with open(args.output, "w", newline="") as out:
        convert(args.root, splits, out)


if __name__ == "__main__":
    main()
