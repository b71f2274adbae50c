# The command line pipeline: pretrain, transfer, export, sweep
# Each subcommand reads one config, writes CSV reports to its own directory
# and returns 0 on success. The same calls work from a shell as
# ``loglearn <command> --config demos/configs/synthetic.ini --seed 0 --out DIR``.
import sys
import tempfile
from pathlib import Path

import pandas as pd

from loglearn.cli import main

config = Path(__file__).parent / "configs" / "synthetic.ini"
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="loglearn-"))

# 1. Pretrain on the source formation
assert main(["pretrain", "--config", str(config), "--seed", "0", "--out", str(out / "pretrain")]) == 0
report = pd.read_csv(out / "pretrain" / "report.csv")
print(report.pivot_table(index=["label", "algo"], columns="metric", values="value").round(3))

# 2. Transfer (pretrains inline when no anchor is configured) and reverse-validate
assert main(["reverse", "--config", str(config), "--seed", "0", "--out", str(out / "reverse")]) == 0
rows = pd.read_csv(out / "reverse" / "report.csv")
print(rows[rows.metric == "ari"][["stage", "label", "algo", "value"]].to_string(index=False))

# 3. Sweep the L2-SP weight; one child run per value plus a summary table
assert main(["sweep", "--config", str(config), "--seed", "0", "--out", str(out / "sweep")]) == 0
print(pd.read_csv(out / "sweep" / "summary.csv").iloc[:, :6])
print("outputs in", out)
