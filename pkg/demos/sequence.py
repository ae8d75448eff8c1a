"""Baseline versus EMA last-step distillation on smooth -> pref -> compress.

Pretrains the default model (about a minute), then runs the same task
sequence twice with identical seeds and evaluation noise. Prints the metric
table of each run with forgetting in parentheses.

    python demos/sequence.py [seed]
"""

import sys
import time

from ridiff import ril
from ridiff.cli import build_world, pretrain_config, render_table
from ridiff.config import default_config
from ridiff.diffusion import pretrain
from ridiff.metrics import forgetting

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = default_config().with_seed(seed)
corpus, schedule, rewards, ctx = build_world(cfg)

t0 = time.time()
model = pretrain(corpus, pretrain_config(cfg), schedule).model
print(f"pretrained in {time.time() - t0:.0f}s")

summary = {}
for method in ("baseline", "rid"):
    tasks = [ril.TaskRunConfig(**{**t.__dict__, "method": method}) for t in cfg.task_configs()]
    t0 = time.time()
    res = ril.run_sequence(tasks, model, corpus, rewards, schedule, ctx, seed=seed)
    print(f"\n== {method} ({time.time() - t0:.0f}s)")
    print(render_table(res.history))
    summary[method] = {m: forgetting(res.history, m) for m in ("smooth_score", "feat_fd")}

print("\nforgetting  ", "  ".join(f"{m}: {v}" for m, v in summary.items()))
