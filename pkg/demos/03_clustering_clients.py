"""
Choosing K and clustering clients
=================================

Cluster the clients' shared statistics the way the server does: z-score
every dimension, score K=2..10 with three indices, and keep the K with the
best rank sum. Compare with clustering on model weights (FL+HC).
"""

# %%
import os

import numpy as np

from fedsikd import clustering, data

root = os.environ.get("FEDSIKD_DATA_ROOT", "data")
train, _ = data.load_mnist(os.path.join(root, "mnist"))
clients = data.dirichlet_partition(train, data.PartitionSpec(40, 0.1, rng_seed=0, min_per_client=128))
points = clustering.zscore(np.stack([data.compute_client_stats(c).stats_vector for c in clients]))

# %%
k_star, table = clustering.select_k(points, 2, 10, rng_seed=0)
print(" K  silhouette        CH      DB  rank-sum")
for s in table:
    print(f"{s.k:2d}  {s.silhouette:10.3f}  {s.calinski_harabasz:8.2f}  {s.davies_bouldin:6.3f}  {s.rank_sum:8.0f}")
print("selected K =", k_star)

# %% dominant label per cluster
fit = clustering.kmeans(points, k_star, rng_seed=0)
for k in range(k_star):
    members = fit.members(k)
    hist = sum(data.label_histogram(clients[i].labels, 10) for i in members)
    top = np.argsort(hist)[::-1][:3]
    print(f"cluster {k}: {len(members):2d} clients, top labels {[int(v) for v in top]}")

# %% average linkage on the same points, cut at the same K
hc = clustering.agglomerative_cluster(points, fixed_k=k_star)
print("agreement pairs:", np.mean([(fit.labels[i] == fit.labels[j]) == (hc[i] == hc[j]) for i in range(40) for j in range(i)]))
