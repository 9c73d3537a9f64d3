"""
Runs, sweeps and reports from the command line
==============================================

Drives the ``selfdistill`` entry point in-process: one vanilla and one
combined run, a temperature sweep, and a comparison report. The shell
equivalent is shown next to each call.
"""

import tempfile
from pathlib import Path

from selfdistill.cli import main

CONFIG = """\
[dataset]
name = synthetic-gaussian-10
n_train = 1000
n_test = 200
noise = 1.0

[model]
name = tiny-resnet-3block
tap = 2

[method]
name = {method}

[schedule]
epochs = 3
batch_size = 128
lr = 0.1
"""

work = Path(tempfile.mkdtemp(prefix="selfdistill-demo-"))
runs = work / "runs"
for method in ("vanilla", "combined"):
    cfg = work / f"{method}.ini"
    cfg.write_text(CONFIG.format(method=method))
    # selfdistill train --config vanilla.ini --out runs
    main(["train", "--config", str(cfg), "--out", str(runs)])

# selfdistill sweep --config combined.ini --axis tau_dsr=1,4 --out sweeps
main(["sweep", "--config", str(work / "combined.ini"), "--axis", "tau_dsr=1,4", "--out", str(work / "sweeps")])

# selfdistill report runs/run-* --out report
main(["report", *map(str, sorted(runs.glob("run-*"))), "--out", str(work / "report")])
print("artifacts in", work)
