# %% [markdown]
# # Walkthrough on planted data
#
# Builds a small dataset whose users and items share latent clusters, checks
# gradients on the toy instance, trains briefly and projects the item table to
# 2-D.  Run as a script or open with jupytext.

# %%
import numpy as np

from mcclk.config import ModelConfig
from mcclk.ingest import split
from mcclk.metrics import ctr_result, svd_project_2d
from mcclk.model import grad_check, toy_model
from mcclk.synthetic import planted_dataset
from mcclk.train import train

# %% [markdown]
# ## Gradient check on the built-in toy instance

# %%
model, batch = toy_model()
report = grad_check(model, batch, components=("combined",))
print(report.table())

# %% [markdown]
# ## Train on planted clusters

# %%
ds = planted_dataset(n_users=120, n_items=60, n_clusters=3, seed=0)
cfg = ModelConfig(dim=16, knn_k=5, batch_size=256, epochs=15, lr=0.01, dataset="planted")
parts = split(ds.graph, cfg.split_ratios, cfg.split_seed)
result = train(cfg, parts, ds)
for row in result.history[::5]:
    print({k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()})

# %%
scores = result.model.predict(parts.test[:, 0], parts.test[:, 1], result.best_params)
print(ctr_result(parts.test[:, 2], scores))

# %% [markdown]
# ## 2-D projection of the learned item table
#
# Items of the same planted cluster should land near each other.

# %%
coords, directions, sv = svd_project_2d(result.best_params["item"])
clusters = np.arange(ds.n_items) % 3
for c in range(3):
    print(c, coords[clusters == c].mean(axis=0).round(3))
print("normalized singular values", sv.round(4))
