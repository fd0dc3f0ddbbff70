"""
Non-i.i.d. clients and the statistics they share
================================================

Split MNIST across 40 clients with a Dirichlet label skew, then look at
what each client would send the server: the mean, standard deviation and
skewness of its features.
"""

# %%
import os

import numpy as np

from fedsikd import data

root = os.environ.get("FEDSIKD_DATA_ROOT", "data")
train, test = data.load_mnist(os.path.join(root, "mnist"))
print(train.features.shape, test.features.shape)

# %% smaller alpha, more skew
for alpha in (2.0, 0.5, 0.1):
    clients = data.dirichlet_partition(train, data.PartitionSpec(40, alpha, rng_seed=0, min_per_client=128))
    ent = [data.label_entropy(c.labels, 10) for c in clients]
    sizes = [c.size for c in clients]
    print(f"alpha={alpha:<4} median label entropy {np.median(ent):.2f} nats, client sizes {min(sizes)}..{max(sizes)}")

# %% one client's view
c = clients[0]
print("client 0 label counts:", data.label_histogram(c.labels, 10).astype(int))
scalar = data.compute_client_stats(c, "scalar").stats_vector
per_feature = data.compute_client_stats(c, "per_feature").stats_vector
print("scalar (mu, sigma, gamma):", np.round(scalar, 3))
print("per-feature vector length:", per_feature.size)  # 3 * 784
