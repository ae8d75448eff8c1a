"""Counting denoiser calls per training step.

The baseline backpropagates through the last sampling step only. Last-step
distillation adds one teacher call from the same z_1, and the full-trajectory
ablation reruns the whole sampler for the teacher. The counters on the model
make the difference exact.

    python demos/overhead.py
"""

import numpy as np

from ridiff import ril
from ridiff.corpus import generate_corpus
from ridiff.diffusion import Denoiser, build_schedule
from ridiff.rewards import make_reward_tasks

schedule = build_schedule(50)
corpus = generate_corpus(0, K=2, styles_per_class=4, images_per_condition=1)
rewards = make_reward_tasks(0)
host = Denoiser.init(schedule, 0, hidden=32, n_hidden=1)
batch = ril.make_batch(corpus.train_conditions, 8, np.random.default_rng(1), np.random.default_rng(2))

counts = {}
for method in ("baseline", "rid", "rid_fullstep"):
    model = host.copy().expand(4, 0)
    teacher = ril.EmaTeacher.of(model)
    opt = ril.SGD(0.01)
    if method == "baseline":
        st = ril.baseline_step(model, batch, rewards["smooth"], opt, schedule)
    elif method == "rid":
        st = ril.rid_step(model, teacher, batch, rewards["smooth"], 0.1, opt, schedule)
    else:
        st = ril.rid_fullstep_step(model, teacher, batch, rewards["smooth"], 0.1, opt, schedule)
    counts[method] = st.forwards

for method, n in counts.items():
    print(f"{method:>13}: {n:5d} forwards, {n / len(batch):5.1f} per sample, "
          f"x{n / counts['baseline']:.2f} vs baseline")
