"""
Train a small equilibrium teacher and look at its solver trajectories
=====================================================================
"""

import numpy as np

from cdeq.backbone import TeacherConfig, train_teacher
from cdeq.datasets import make_dataset
from cdeq.numeric import make_rng
from cdeq.solver import rel_residual_rows
from cdeq.trajectory import AugmentConfig, TimeMap, sample_trajectories

data = make_dataset("two_moons", n=1000, noise=0.15, seed=0)
teacher = train_teacher(data, cfg=TeacherConfig(d_z=16, epochs=100, seed=0))
print("teacher validation accuracy:", teacher.metrics["val_accuracy"])

###############################################################################
# Each training input gives one trajectory of K = 20 Anderson iterates.
# Iterate k is placed at virtual time t_k = 1 - exp(-0.25 k).

X, _ = data.train()
tmap = TimeMap(rho=0.25)
trajs = sample_trajectories(teacher.f, X, 16, 20, AugmentConfig(p_aug=0.1), make_rng(1), tmap)
S = np.stack([t.states for t in trajs])
for k in (1, 2, 5, 10, 20):
    r = rel_residual_rows(S[:, k], teacher.f(S[:, k], X)).mean()
    print(f"k={k:2d}  t={tmap(k):.3f}  mean relative residual {r:.2e}")

masks = np.stack([t.mask for t in trajs])
print("fraction of interior states replaced by the endpoint:", masks[:, 1:19].mean())
