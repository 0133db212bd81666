"""
Set size across miscoverage levels
==================================

Run the CLI sweep command programmatically and plot the mean set size as
alpha grows.  Larger alpha allows smaller sets.
"""

import tempfile
from pathlib import Path

from rankcp.cli import main

out = Path(tempfile.mkdtemp()) / "sweep"
main(["sweep", "--alphas", "0.1,0.2,0.3", "--runs", "2", "--splits", "50",
      "--plot", "--out", str(out)])
print((out / "summary.csv").read_text())
print("plot written to", out / "sweep.png")
