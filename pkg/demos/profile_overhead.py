"""
Time and parameter overhead of the auxiliary teacher
====================================================

Times training steps of the vanilla and combined trainers on the same
model and batch size.
"""

import torch

from selfdistill.analysis import profile_run
from selfdistill.data import load_dataset
from selfdistill.training import Trainer, TrainingConfig, build_model

torch.set_num_threads(1)
data = load_dataset("synthetic-gaussian-10", n_train=1000, n_test=100)

reports = {}
for method in ("vanilla", "drg", "dsr", "combined"):
    cfg = TrainingConfig(method=method, model="tiny-resnet-3block", batch_size=128)
    reports[method] = profile_run(Trainer(build_model(cfg, 10), data, cfg), iterations=50, warmup=10)

base = reports["vanilla"]
for method, rep in reports.items():
    print(
        f"{method:<9} {1e3 * rep.seconds_per_iteration:7.1f} ms/iter (x{rep.seconds_per_iteration / base.seconds_per_iteration:.2f})"
        f"  params {rep.parameter_count:>7,} (+{rep.parameter_count - base.parameter_count:,})"
        f"  checkpoint {rep.checkpoint_bytes / 1e6:.2f} MB"
    )
