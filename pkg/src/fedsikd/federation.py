"""Round orchestration for FedSiKD and the FedAvg, RandomCluster and FL+HC baselines.

FedSiKD in one round, per cluster: the cluster's teacher (warm-started from
the previous round) trains on the union of its members' data, then every
member trains a student from the current global weights with a
distillation loss against the frozen teacher. Students are averaged within
the cluster and the cluster means are averaged into the new global model.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import clustering
from .data import ClientDataset, ClientStats, Dataset, PartitionSpec, compute_client_stats, dirichlet_partition
from .metrics import ClusterMetrics, RoundMetrics, variance_diagnostics
from .seeds import derive_rng, derive_seed
from .tensor_nn import (
    Architecture,
    ModelParams,
    TrainConfig,
    average_params,
    build_model,
    log_softmax,
    reference_architectures,
    predict_logits,
    sgd_train,
)

log = logging.getLogger(__name__)

STRATEGIES = ("fedsikd", "fedavg", "random_cluster", "fl_hc")
STUDENT_DATA = ("local", "cluster_excl_self")


class FederationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    strategy: str = "fedsikd"
    rounds: int = 5
    client_count: int = 40
    alpha: float = 0.5
    train: TrainConfig = field(default_factory=TrainConfig)
    stats_mode: str = "per_feature"
    k_min: int = 2
    k_max: int | None = None  # None -> min(10, N - 1)
    fixed_k: int | None = None  # bypasses K selection for fedsikd / random_cluster
    teacher_epochs: int = 1
    student_data: str = "local"
    weighted_cluster_mean: bool = False
    weighted_global_mean: bool = False
    fedavg_weighted: bool = True
    hc_fixed_k: int | None = None  # None -> the K FedSiKD would select
    hc_threshold: float | None = None
    min_per_client: int = 1
    kmeans_restarts: int = 10
    seed: int = 0
    eval_batch: int = 1000

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.client_count < 2:
            raise ValueError("client_count must be >= 2")
        if self.teacher_epochs < 0:
            raise ValueError("teacher_epochs must be >= 0")
        if self.student_data not in STUDENT_DATA:
            raise ValueError(f"student_data must be one of {STUDENT_DATA}")
        if self.hc_fixed_k is not None and self.hc_threshold is not None:
            raise ValueError("set at most one of hc_fixed_k and hc_threshold")

    @property
    def k_range(self) -> tuple[int, int]:
        k_max = self.k_max if self.k_max is not None else min(10, self.client_count - 1)
        return self.k_min, k_max


@dataclass
class ClusterState:
    cluster_id: int
    members: list[int]
    teacher_params: ModelParams | None = None
    teacher_client_id: int | None = None

    def __post_init__(self):
        if not self.members:
            raise FederationError(f"cluster {self.cluster_id} has no members")
        if self.teacher_client_id is not None and self.teacher_client_id not in self.members:
            raise FederationError(f"teacher {self.teacher_client_id} is not a member of cluster {self.cluster_id}")


@dataclass
class GlobalState:
    global_params: ModelParams
    round: int = 0
    clusters: list[ClusterState] = field(default_factory=list)

    @property
    def labels(self) -> np.ndarray:
        n = sum(len(c.members) for c in self.clusters)
        out = np.empty(n, dtype=np.int64)
        for c in self.clusters:
            out[c.members] = c.cluster_id
        return out


@dataclass
class ExperimentResult:
    rounds: list[RoundMetrics]
    k_star: int | None = None
    k_scores: list[clustering.KScore] = field(default_factory=list)
    labels: np.ndarray | None = None
    clients: list[ClientDataset] = field(default_factory=list)
    final_state: GlobalState | None = None
    history: list[ModelParams] = field(default_factory=list)


# ---------------------------------------------------------------- helpers


def _client_cfg(cfg: FederationConfig, client_id: int, round_: int) -> TrainConfig:
    return replace(cfg.train, rng_seed=derive_seed(cfg.seed, "client_train", client_id, round_))


def _merge(clients: Sequence[ClientDataset], ids: Sequence[int], owner: int = -1) -> ClientDataset:
    ids = list(ids)
    feats = np.concatenate([clients[i].features for i in ids])
    labels = np.concatenate([clients[i].labels for i in ids])
    idx = np.concatenate([clients[i].indices for i in ids])
    return ClientDataset(owner, feats, labels, idx)


def pick_teacher(members: Sequence[int], sizes: Sequence[int]) -> int:
    """Member with the most local data; ties go to the lowest id."""
    return min(members, key=lambda i: (-sizes[i], i))


def evaluate(params: ModelParams, test: Dataset, batch_size: int = 1000) -> tuple[float, float]:
    """Eval-mode accuracy and mean cross-entropy over a whole dataset."""
    logits = predict_logits(params, test.features, batch_size).astype(np.float64)
    labels = np.asarray(test.labels)
    acc = float((logits.argmax(axis=1) == labels).mean())
    loss = float(-log_softmax(logits)[np.arange(len(labels)), labels].mean())
    return acc, loss


def cluster_stats_matrix(stats: Sequence[ClientStats]) -> np.ndarray:
    return clustering.zscore(np.stack([s.stats_vector for s in stats]))


def select_clusters(stats: Sequence[ClientStats], cfg: FederationConfig):
    """z-score the shared statistics, choose K and run k-means.

    Returns ``(assignment, k_star, score_table)``.
    """
    points = cluster_stats_matrix(stats)
    table: list[clustering.KScore] = []
    if cfg.fixed_k is not None:
        k_star = cfg.fixed_k
    else:
        k_min, k_max = cfg.k_range
        k_star, table = clustering.select_k(
            points, k_min, k_max, derive_seed(cfg.seed, "select_k"), restarts=cfg.kmeans_restarts
        )
    fit = clustering.kmeans(points, k_star, cfg.kmeans_restarts, rng_seed=derive_seed(cfg.seed, "kmeans", k_star))
    return fit, k_star, table


def form_clusters(
    stats: Sequence[ClientStats],
    clients: Sequence[ClientDataset],
    cfg: FederationConfig,
    teacher_arch: Architecture,
) -> tuple[list[ClusterState], clustering.ClusterAssignment, int, list[clustering.KScore]]:
    fit, k_star, table = select_clusters(stats, cfg)
    return _clusters_from_labels(fit.labels, k_star, clients, cfg, teacher_arch), fit, k_star, table


def _clusters_from_labels(labels, k, clients, cfg, teacher_arch):
    sizes = [c.size for c in clients]
    states = []
    for c in range(k):
        members = [int(i) for i in np.flatnonzero(labels == c)]
        if not members:
            raise FederationError(f"cluster {c} is empty after k-means")
        teacher = build_model(teacher_arch, derive_seed(cfg.seed, "teacher_init", c)) if teacher_arch else None
        states.append(ClusterState(c, members, teacher, pick_teacher(members, sizes)))
    return states


def random_assignment(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random cluster ids with every cluster non-empty.

    A random K clients seed one cluster each; the rest pick uniformly.
    """
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    order = rng.permutation(n)
    labels = np.empty(n, dtype=np.int64)
    labels[order[:k]] = np.arange(k)
    labels[order[k:]] = rng.integers(0, k, size=n - k)
    return labels


# ---------------------------------------------------------------- rounds


def run_round_fedsikd(
    state: GlobalState, clients: Sequence[ClientDataset], cfg: FederationConfig, test: Dataset | None = None
) -> tuple[GlobalState, RoundMetrics, list[ModelParams]]:
    """One FedSiKD round (also used by RandomCluster with its own clusters)."""
    t0 = time.perf_counter()
    round_ = state.round + 1
    student_params: list[ModelParams | None] = [None] * len(clients)
    cluster_means, cluster_sizes, per_cluster, new_clusters = [], [], [], []
    for cl in state.clusters:
        teacher = cl.teacher_params
        teacher_loss = None
        try:
            if teacher is not None and cfg.teacher_epochs > 0:
                tcfg = replace(
                    cfg.train,
                    local_epochs=cfg.teacher_epochs,
                    rng_seed=derive_seed(cfg.seed, "teacher_train", cl.cluster_id, round_),
                )
                teacher, teacher_loss = sgd_train(teacher, _merge(clients, cl.members), tcfg)
            losses = []
            for cid in cl.members:
                if cfg.student_data == "cluster_excl_self" and len(cl.members) > 1:
                    local = _merge(clients, [m for m in cl.members if m != cid], owner=cid)
                else:
                    local = clients[cid]
                p, loss = sgd_train(state.global_params, local, _client_cfg(cfg, cid, round_), teacher=teacher)
                student_params[cid] = p
                losses.append(loss)
            members = [student_params[i] for i in cl.members]
            weights = [clients[i].size for i in cl.members] if cfg.weighted_cluster_mean else None
            cluster_means.append(average_params(members, weights))
        except (ValueError, FloatingPointError, FederationError) as exc:
            raise FederationError(f"round {round_}, cluster {cl.cluster_id}: {exc}") from exc
        cluster_sizes.append(sum(clients[i].size for i in cl.members))
        per_cluster.append(ClusterMetrics(cl.cluster_id, len(cl.members), float(np.mean(losses)), teacher_loss))
        new_clusters.append(replace(cl, teacher_params=teacher))
    new_global = average_params(cluster_means, cluster_sizes if cfg.weighted_global_mean else None)
    new_state = GlobalState(new_global, round_, new_clusters)
    return new_state, _finish(new_state, student_params, per_cluster, test, cfg, t0), student_params


def run_round_fedavg(
    state: GlobalState, clients: Sequence[ClientDataset], cfg: FederationConfig, test: Dataset | None = None
) -> tuple[GlobalState, RoundMetrics, list[ModelParams]]:
    t0 = time.perf_counter()
    round_ = state.round + 1
    params, losses = [], []
    for c in clients:
        try:
            p, loss = sgd_train(state.global_params, c, _client_cfg(cfg, c.client_id, round_))
        except (ValueError, FloatingPointError) as exc:
            raise FederationError(f"round {round_}, client {c.client_id}: {exc}") from exc
        params.append(p)
        losses.append(loss)
    weights = [c.size for c in clients] if cfg.fedavg_weighted else None
    new_state = GlobalState(average_params(params, weights), round_, state.clusters)
    per_cluster = [ClusterMetrics(0, len(clients), float(np.mean(losses)), None)]
    return new_state, _finish(new_state, params, per_cluster, test, cfg, t0), params


def run_round_random_cluster(state, clients, cfg, test=None):
    """RandomCluster shares the FedSiKD round; only its cluster assignment differs."""
    return run_round_fedsikd(state, clients, cfg, test)


def run_round_fl_hc(
    state: GlobalState, clients: Sequence[ClientDataset], cfg: FederationConfig, test: Dataset | None = None
) -> tuple[GlobalState, RoundMetrics, list[ModelParams]]:
    """Per-cluster FedAvg without distillation; cluster means are averaged uniformly."""
    t0 = time.perf_counter()
    round_ = state.round + 1
    params: list[ModelParams | None] = [None] * len(clients)
    cluster_means, cluster_sizes, per_cluster = [], [], []
    for cl in state.clusters:
        losses = []
        for cid in cl.members:
            try:
                params[cid], loss = sgd_train(state.global_params, clients[cid], _client_cfg(cfg, cid, round_))
            except (ValueError, FloatingPointError) as exc:
                raise FederationError(f"round {round_}, cluster {cl.cluster_id}, client {cid}: {exc}") from exc
            losses.append(loss)
        cluster_means.append(average_params([params[i] for i in cl.members], [clients[i].size for i in cl.members]))
        cluster_sizes.append(sum(clients[i].size for i in cl.members))
        per_cluster.append(ClusterMetrics(cl.cluster_id, len(cl.members), float(np.mean(losses)), None))
    new_global = average_params(cluster_means, cluster_sizes if cfg.weighted_global_mean else None)
    new_state = GlobalState(new_global, round_, state.clusters)
    return new_state, _finish(new_state, params, per_cluster, test, cfg, t0), params


def _finish(state, client_params, per_cluster, test, cfg, t0) -> RoundMetrics:
    if state.clusters:
        labels = state.labels
    else:
        labels = np.zeros(len(client_params), dtype=np.int64)
    var_intra, var_total = variance_diagnostics(client_params, labels)
    acc, loss = evaluate(state.global_params, test, cfg.eval_batch) if test is not None else (0.0, float("nan"))
    return RoundMetrics(state.round, acc, loss, per_cluster, var_intra, var_total, time.perf_counter() - t0)


ROUND_FUNCS: dict[str, Callable] = {
    "fedsikd": run_round_fedsikd,
    "fedavg": run_round_fedavg,
    "random_cluster": run_round_random_cluster,
    "fl_hc": run_round_fl_hc,
}


# ---------------------------------------------------------------- setup


def fl_hc_labels(
    clients: Sequence[ClientDataset], init: ModelParams, cfg: FederationConfig, fixed_k: int | None
) -> np.ndarray:
    """One warm-up epoch per client from a common init, then average-linkage on the weights.

    Every client uses the same warm-up seed, so clients holding identical
    data end up with identical weights (distance zero).
    """
    warm_cfg = replace(cfg.train, local_epochs=1, rng_seed=derive_seed(cfg.seed, "hc_warmup"))
    vecs = []
    for c in clients:
        p, _ = sgd_train(init, c, warm_cfg)
        vecs.append(p.flatten())
    dist = pairwise_distances(vecs)
    if cfg.hc_threshold is not None:
        return clustering.agglomerative_cluster(None, distance_threshold=cfg.hc_threshold, distances=dist)
    return clustering.agglomerative_cluster(None, fixed_k=fixed_k, distances=dist)


def pairwise_distances(vecs: Sequence[np.ndarray]) -> np.ndarray:
    """Euclidean distances between parameter vectors, one pair at a time in float64."""
    n = len(vecs)
    out = np.zeros((n, n))
    for i in range(n):
        vi = np.asarray(vecs[i], dtype=np.float64)
        for j in range(i + 1, n):
            diff = vi - vecs[j]
            out[i, j] = out[j, i] = float(np.sqrt(diff @ diff))
    return out


def setup_clients(cfg: FederationConfig, train: Dataset) -> list[ClientDataset]:
    spec = PartitionSpec(cfg.client_count, cfg.alpha, derive_seed(cfg.seed, "partition"), cfg.min_per_client)
    return dirichlet_partition(train, spec)


def run_experiment(
    cfg: FederationConfig,
    train: Dataset,
    test: Dataset,
    teacher_arch: Architecture | None = None,
    student_arch: Architecture | None = None,
    clients: Sequence[ClientDataset] | None = None,
    keep_history: bool = False,
    on_round: Callable[[RoundMetrics], None] | None = None,
) -> ExperimentResult:
    """Partition, cluster (strategy-dependent), then run ``cfg.rounds`` rounds.

    Architectures default to the reference teacher/student pair for the
    dataset named by ``train.name``. ``clients`` overrides the Dirichlet
    partition.
    """
    if teacher_arch is None or student_arch is None:
        dataset = train.name.split("-")[0]
        t_arch, s_arch = reference_architectures(dataset)
        teacher_arch = teacher_arch or t_arch
        student_arch = student_arch or s_arch
    if teacher_arch.num_classes != student_arch.num_classes:
        raise FederationError("teacher and student must predict the same number of classes")
    if clients is None:
        clients = setup_clients(cfg, train)
    clients = list(clients)
    if len(clients) != cfg.client_count:
        raise FederationError(f"expected {cfg.client_count} clients, got {len(clients)}")

    init = build_model(student_arch, derive_seed(cfg.seed, "global_init"))
    state = GlobalState(init, 0, [])
    k_star, table, labels = None, [], None
    if cfg.strategy in ("fedsikd", "random_cluster") or (cfg.strategy == "fl_hc" and cfg.hc_threshold is None and cfg.hc_fixed_k is None):
        stats = [compute_client_stats(c, cfg.stats_mode) for c in clients]
        fit, k_star, table = select_clusters(stats, cfg)
        labels = fit.labels
        log.info("selected K=%d", k_star)
    if cfg.strategy == "random_cluster":
        labels = random_assignment(len(clients), k_star, derive_rng(cfg.seed, "random_cluster"))
    elif cfg.strategy == "fl_hc":
        labels = fl_hc_labels(clients, init, cfg, cfg.hc_fixed_k or k_star)
        k_star = int(labels.max()) + 1
    if labels is not None:
        with_teacher = teacher_arch if cfg.strategy in ("fedsikd", "random_cluster") else None
        state.clusters = _clusters_from_labels(labels, int(labels.max()) + 1, clients, cfg, with_teacher)

    step = ROUND_FUNCS[cfg.strategy]
    rows, history = [], []
    for _ in range(cfg.rounds):
        state, metrics, _ = step(state, clients, cfg, test)
        rows.append(metrics)
        if keep_history:
            history.append(state.global_params.copy())
        if on_round is not None:
            on_round(metrics)
        log.info(
            "%s round %d: acc=%.4f loss=%.4f", cfg.strategy, metrics.round, metrics.test_accuracy, metrics.test_loss
        )
    return ExperimentResult(rows, k_star, table, labels, clients, state, history)
