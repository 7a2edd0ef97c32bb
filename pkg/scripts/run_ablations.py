#!/usr/bin/env python3
"""Run the full ablation matrix on procedural data and print the table.

Fourteen probe reports from eight pretraining runs: five masking rows plus
three CLS-routing probabilities crossed with three probe feature modes.
Scale knobs keep this runnable on a laptop; raise them for sharper numbers.
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from mefem.ablations import MICRO_ABLATION_CONFIG, rows_to_table, run_ablation_matrix
from mefem.probe import append_report_csv
from mefem.synthdata import make_dataset


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--images", type=int, default=128)
    parser.add_argument("--epochs", type=int, default=3)
    parser.add_argument("--probe-epochs", type=int, default=15)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None, help="directory for checkpoints and results")
    args = parser.parse_args()

    out_dir = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="ablations_"))
    config = MICRO_ABLATION_CONFIG.replace(epochs=args.epochs)
    images, attrs = make_dataset(args.images, seed=args.seed, grid=config.grid())
    labels = np.array([a.face_scale for a in attrs])

    rows = run_ablation_matrix(
        images, labels, out_dir, base_config=config,
        probe_epochs=args.probe_epochs, seed=args.seed,
    )
    print(rows_to_table(rows))
    for row in rows:
        append_report_csv(out_dir / "ablation_results.csv", row.report)
    print(f"\nresults written to {out_dir}/ablation_results.csv")


if __name__ == "__main__":
    main()
