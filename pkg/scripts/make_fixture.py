#!/usr/bin/env python3
"""Materialize the synthetic cross-partition fixture as CSV + schema,
plus a ready-to-run CLI config."""

import argparse
import json
from pathlib import Path

from tabvfl.data import write_fixture_csv


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="fixture", help="output directory")
    parser.add_argument("--rows", type=int, default=4000)
    parser.add_argument("--features", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "fixture.csv"
    schema_path = out / "fixture_schema.json"
    write_fixture_csv(csv_path, schema_path, n_rows=args.rows,
                      n_features=args.features, seed=args.seed)
    config = {
        "dataset": {"csv": str(csv_path), "schema": str(schema_path),
                    "name": "fixture"},
        "design": "TabVFL",
        "guests": 2,
        "tabnet": {"latent_dim": 8, "n_steps": 2},
        "training": {"pretrain_epochs": 40, "finetune_epochs": 40,
                     "batch_size": 128},
        "failures": {"grid": [0.2, 0.35, 0.5], "runs": 8},
        "seed": 1,
        "output_dir": str(out / "out"),
    }
    config_path = out / "config.json"
    config_path.write_text(json.dumps(config, indent=1) + "\n")
    print(f"wrote {csv_path}, {schema_path}, {config_path}")


if __name__ == "__main__":
    main()
