"""Feeds a published confusion table (rows observed, columns forecast) through the audit metrics and
prints it as a forecasting table.

    python scripts/confusion_from_counts.py "17877,6848,2535;6454,7593,2062;1859,1779,1234" --group W
"""
import argparse
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from audit import confusion  # noqa: E402
from post import render_confusion_md, write_json  # noqa: E402
from synth import CLASS_NAMES  # noqa: E402


def parse_counts(text):
    return [[float(cell) for cell in row.split(',')] for row in text.strip().split(';')]


def expand(counts):
    """Counts table -> (labels, predictions, weights) with one weighted row per cell."""
    labels, predictions, weights = [], [], []
    for i, row in enumerate(counts):
        for j, count in enumerate(row):
            labels.append(i)
            predictions.append(j)
            weights.append(count)
    return labels, predictions, weights


def get_args():
    parser = argparse.ArgumentParser()
    parser.add_argument('counts', help='rows separated by ";", cells by ","')
    parser.add_argument('--group', default='all', type=str)
    parser.add_argument('--json_file', default=None, type=str, help='also write the report as JSON')
    parser.add_argument('--class_names', default=','.join(CLASS_NAMES), type=str)

    return parser.parse_args()


def main():
    args = get_args()
    counts = parse_counts(args.counts)
    labels, predictions, weights = expand(counts)
    report = confusion(labels, predictions, weights, len(counts), args.group)
    class_names = args.class_names.split(',') if len(args.class_names.split(',')) == len(counts) else None
    print(render_confusion_md(report, class_names))
    if args.json_file:
        write_json(report.to_dict(), args.json_file)


if __name__ == '__main__':
    main()
