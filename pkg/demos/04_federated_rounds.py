"""
A few federated rounds
======================

Run FedSiKD and the three baselines at smoke scale and print the per-round
accuracy and the Var_intra / Var_total diagnostics. The same thing from the
command line:

    fedsikd run --preset smoke --set strategy=fedsikd --output-dir runs/smoke
"""

# %%
import os

from fedsikd import cli

root = os.environ.get("FEDSIKD_DATA_ROOT", "data")
base = cli.parse_config(None, [f"data_dir={os.path.join(root, 'mnist')}", "alpha=0.1", "rounds=3"], preset="smoke")
data = cli.load_experiment_data(base)

# %%
for strategy in ("fedsikd", "fedavg", "random_cluster", "fl_hc"):
    cfg = cli.replace(base, strategy=strategy, output_dir=f"runs/demo/{strategy}")
    res = cli.run_config(cfg, data)
    accs = " ".join(f"{r.test_accuracy:.3f}" for r in res.rounds)
    r1 = res.rounds[0]
    print(f"{strategy:<15} K={res.k_star}  acc {accs}  var_intra/var_total {r1.var_intra / r1.var_total:.3f}")
