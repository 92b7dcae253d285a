"""Federated training with dataset-size-weighted averaging and optional secure aggregation.

Nodes run locally in deterministic round-robin order; only aggregation
(normalization statistics, model averaging, validation confusion counts)
goes over the simulated network, and in secure mode every aggregate is
computed with additive secret sharing so the orchestrating server sees
nothing but the sums.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import derive_rng, pixel_statistics
from .errors import DegenerateInputError
from .idx import read_idx
from .metrics import confusion_matrix, mcc_from_confusion
from .ring import decode_fixed, encode_fixed
from .sharing import secure_moments, simulate_secure_sum
from .transport import LatencyModel

log = logging.getLogger(__name__)


@dataclass
class FederationConfig:
    nodes: int = 3
    rounds: int = 5
    local_epochs: int = 1
    lr: float = 0.1
    batch_size: int = 16
    patience: int = 2
    secure: bool = True
    seed: int = 0
    arch: str = "smallcnn:1x16x16:3"
    frac_bits: int = 16
    val_fraction: float = 0.1
    global_patience: int = 0  # 0 disables the global early stop
    latency_ms: float = 0.0
    data_dirs: list = field(default_factory=list)
    search_lr: list = field(default_factory=lambda: [0.01, 0.05, 0.1])
    search_local_epochs: list = field(default_factory=lambda: [1, 2])
    search_batch_size: list = field(default_factory=lambda: [16, 32])

    def __post_init__(self):
        if min(self.nodes, self.rounds, self.local_epochs, self.batch_size) < 1:
            raise ValueError("nodes, rounds, local_epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")

    @property
    def architecture(self) -> nn.Architecture:
        return nn.Architecture.from_tag(self.arch)


_LIST_KEYS = {"search_lr": float, "search_local_epochs": int, "search_batch_size": int}


def parse_config(text: str) -> FederationConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Keys are the :class:`FederationConfig` field names. Per-node data
    directories use ``data_dir.<k>``; search-space lists are comma separated.
    """
    kwargs, dirs = {}, {}
    types = {f.name: f.type for f in dataclasses.fields(FederationConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("data_dir."):
            dirs[int(key.split(".", 1)[1])] = value
        elif key in _LIST_KEYS:
            kwargs[key] = [_LIST_KEYS[key](v) for v in value.split(",") if v.strip()]
        elif key in types:
            kind = types[key]
            if kind == "bool":
                kwargs[key] = value.lower() in ("1", "true", "yes", "on")
            elif kind == "int":
                kwargs[key] = int(value)
            elif kind == "float":
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    if dirs:
        kwargs["data_dirs"] = [dirs[k] for k in sorted(dirs)]
    return FederationConfig(**kwargs)


def load_config(path) -> FederationConfig:
    return parse_config(Path(path).read_text())


def resolve_data_dir(path) -> Path:
    p = Path(path)
    if not p.is_absolute() and not p.exists() and os.environ.get("PRIMIA_DATA_DIR"):
        p = Path(os.environ["PRIMIA_DATA_DIR"]) / p
    return p


def load_node_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw images in [0, 1] as (N, C, H, W) and int labels from ``images.idx`` / ``labels.idx``."""
    d = resolve_data_dir(path)
    img, lab = d / "images.idx", d / "labels.idx"
    if not img.exists() or not lab.exists():
        raise FileNotFoundError(f"missing images.idx/labels.idx under {d}")
    x = read_idx(img).astype(np.float64)
    x = x / 255.0 if x.max(initial=0) > 1.0 else x
    if x.ndim == 3:
        x = x[:, None]
    y = read_idx(lab).astype(np.int64)
    if len(x) != len(y):
        raise ValueError(f"{d}: {len(x)} images but {len(y)} labels")
    return x, y


@dataclass
class NodeState:
    node_id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    params: nn.ModelParams | None = None
    best_mcc: float = float("-inf")
    stale_epochs: int = 0

    @property
    def n_k(self) -> int:
        return len(self.x_train)


def split_node(node_id: int, x: np.ndarray, y: np.ndarray, seed: int, val_fraction: float = 0.1) -> NodeState:
    """Seeded train/validation split. The permutation depends only on the seed and
    the dataset length, so nodes holding identical data split identically."""
    n = len(x)
    order = derive_rng(seed, "split", n).permutation(n)
    n_val = int(round(val_fraction * n)) if n >= 2 else 0
    val, train = order[:n_val], order[n_val:]
    return NodeState(node_id, x[train], y[train], x[val], y[val])


def validation_mcc(params: nn.ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    k = params.arch.num_classes
    return mcc_from_confusion(confusion_matrix(y, nn.predict(params, x), k))


def local_train_round(node: NodeState, global_params: nn.ModelParams, epochs: int, lr: float,
                      batch_size: int = 32, patience: int = 2, seed: int = 0, round_index: int = 0,
                      val_metric=None) -> tuple[nn.ModelParams, dict]:
    """Train a node from the global model for up to ``epochs`` epochs.

    After each epoch the local validation MCC is measured; when it has not
    improved for ``patience`` consecutive epochs the round ends and the
    best epoch's weights are returned. Shuffling is seeded by the global
    epoch index, shared by all nodes.

    ``val_metric(params, epoch)`` replaces the validation MCC (for tests).
    """
    if node.n_k == 0:
        raise DegenerateInputError(f"node {node.node_id} has no training data")
    if val_metric is None and len(node.x_val) == 0:
        val_metric = _last_epoch_wins
    elif val_metric is None:
        val_metric = lambda p, e: validation_mcc(p, node.x_val, node.y_val)  # noqa: E731
    params = global_params.copy()
    best, best_params, stale = float("-inf"), params, 0
    losses, scores = [], []
    for epoch in range(epochs):
        rng = derive_rng(seed, "shuffle", round_index * epochs + epoch)
        params, loss = nn.train_epoch(params, node.x_train, node.y_train, lr, batch_size, rng)
        score = val_metric(params, epoch)
        losses.append(loss)
        scores.append(score)
        if score > best:
            best, best_params, stale = score, params, 0
        else:
            stale += 1
        if stale >= patience:
            break
    node.params, node.best_mcc, node.stale_epochs = best_params, best, stale
    return best_params, {"losses": losses, "val_scores": scores, "epochs_run": len(losses),
                         "best_epoch": int(np.argmax(scores)) if scores else -1}


def _last_epoch_wins(params, epoch):
    return float(epoch)


def weighted_fedavg(updates) -> nn.ModelParams:
    """Parameter-wise average of models weighted by their dataset sizes."""
    updates = list(updates)
    if not updates:
        raise DegenerateInputError("no model updates to average")
    total = float(sum(n for _, n in updates))
    if total <= 0:
        raise DegenerateInputError("total dataset size is zero")
    first = updates[0][0]
    acc = {k: np.zeros_like(v) for k, v in first.items()}
    for params, n in updates:
        if params.arch != first.arch:
            raise ValueError("cannot average models of different architectures")
        for k, v in params.items():
            acc[k] += (n / total) * v
    return nn.ModelParams(first.arch, acc)


def secure_weighted_fedavg(updates, rng: np.random.Generator, frac_bits: int = 16, latency=None):
    """Weighted average where each node secret-shares ``n_k * w_k`` and ``n_k``.

    Only ``sum(n_k * w_k)`` and ``N = sum(n_k)`` are revealed; the division by
    ``N`` happens on the revealed aggregate. Returns ``(params, network)``.
    """
    updates = list(updates)
    if not updates:
        raise DegenerateInputError("no model updates to average")
    template = updates[0][0]
    contributions = [encode_fixed(np.concatenate([n * p.flat(), [float(n)]]), frac_bits) for p, n in updates]
    total, net = simulate_secure_sum(contributions, rng, latency)
    agg = decode_fixed(total)
    n_total = agg[-1]
    if n_total <= 0:
        raise DegenerateInputError("total dataset size is zero")
    return template.unflatten(agg[:-1] / n_total), net


@dataclass
class RoundReport:
    round: int
    train_loss: list
    val_mcc: float
    mode: str
    epochs_run: list
    comm_rounds: int
    bytes: int
    virtual_time: float
    max_dev_vs_plain: float | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


@dataclass
class FederationResult:
    params: nn.ModelParams
    reports: list
    mean: np.ndarray
    std: np.ndarray
    nodes: list
    networks: list = field(default_factory=list, repr=False)
    round_params: list = field(default_factory=list, repr=False)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean.reshape(1, -1, 1, 1)) / self.std.reshape(1, -1, 1, 1)


def _as_nchw(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 3 else x


def _node_datasets(config: FederationConfig, datasets):
    if datasets is None:
        if len(config.data_dirs) < config.nodes:
            raise ValueError(f"config lists {len(config.data_dirs)} data dirs for {config.nodes} nodes")
        datasets = [load_node_dataset(d) for d in config.data_dirs[:config.nodes]]
    return list(datasets)[:config.nodes]


def run_federation(config: FederationConfig, datasets=None, record: bool = True) -> FederationResult:
    """Run ``config.rounds`` rounds of local training plus (secure) weighted averaging.

    ``datasets`` is a list of per-node ``(x, y)`` with raw pixel values; when
    omitted they are read from ``config.data_dirs``. Normalization statistics
    are pooled across nodes before the first round (securely in secure mode).
    """
    arch = config.architecture
    latency = LatencyModel(config.latency_ms)
    raw = _node_datasets(config, datasets)
    keep = []
    for k, (x, y) in enumerate(raw):
        if len(x) == 0:
            log.warning("node %d has an empty dataset and is excluded", k)
        else:
            keep.append((k, _as_nchw(x), np.asarray(y)))
    if not keep:
        raise DegenerateInputError("no node has any data")

    networks = []
    stats = [pixel_statistics(x) for _, x, _ in keep]
    if config.secure:
        mom = secure_moments([s[0] for s in stats], [s[1] for s in stats], [s[2] for s in stats],
                             derive_rng(config.seed, "moments"), config.frac_bits, latency)
        mean, std = mom.mean, mom.std
        if mom.network is not None:
            networks.append(mom.network)
    else:
        n = float(sum(s[2] for s in stats))
        mean = sum(s[0] for s in stats) / n
        std = np.sqrt(np.maximum(sum(s[1] for s in stats) / n - mean**2, 0.0))
    std = np.where(std > 0, std, 1.0)

    nodes = []
    for k, x, y in keep:
        xn = (x - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
        nodes.append(split_node(k, xn, y, config.seed, config.val_fraction))

    global_params = nn.init_params(arch, derive_rng(config.seed, "init"))
    reports, round_params = [], []
    best_global, global_stale = float("-inf"), 0
    clock = 0.0
    for r in range(config.rounds):
        updates, losses, epochs_run = [], [], []
        for node in nodes:
            params, st = local_train_round(node, global_params, config.local_epochs, config.lr,
                                           config.batch_size, config.patience, config.seed, r)
            updates.append((params, node.n_k))
            losses.append(float(np.mean(st["losses"])))
            epochs_run.append(st["epochs_run"])
        plain = weighted_fedavg(updates)
        comm_rounds, nbytes, dev = 0, 0, None
        if config.secure and len(updates) > 1:
            global_params, net = secure_weighted_fedavg(updates, derive_rng(config.seed, "fedavg", r),
                                                        config.frac_bits, latency)
            dev = float(np.max(np.abs(global_params.flat() - plain.flat())))
            conf, net_v = _secure_confusion(global_params, nodes, derive_rng(config.seed, "val", r), latency)
            comm_rounds = net.rounds + net_v.rounds
            nbytes = net.bytes_total + net_v.bytes_total
            clock += net.elapsed + net_v.elapsed
            if record:
                networks += [net, net_v]
        else:
            global_params = plain
            conf = sum(confusion_matrix(nd.y_val, nn.predict(global_params, nd.x_val), arch.num_classes)
                       for nd in nodes)
            if config.secure:
                dev = 0.0
        val = mcc_from_confusion(conf)
        round_params.append(global_params)
        reports.append(RoundReport(r, losses, val, "secure" if config.secure else "plain", epochs_run,
                                   comm_rounds, nbytes, clock, dev))
        if config.global_patience:
            if val > best_global:
                best_global, global_stale = val, 0
            else:
                global_stale += 1
                if global_stale >= config.global_patience:
                    break
    return FederationResult(global_params, reports, mean, std, nodes, networks, round_params)


def _secure_confusion(params, nodes, rng, latency):
    """Pooled validation confusion counts, summed with secret sharing."""
    k = params.arch.num_classes
    contributions = [encode_fixed(confusion_matrix(nd.y_val, nn.predict(params, nd.x_val), k).ravel(), 16)
                     for nd in nodes]
    total, net = simulate_secure_sum(contributions, rng, latency)
    return np.rint(decode_fixed(total)).astype(np.int64).reshape(k, k), net


def train_local(x: np.ndarray, y: np.ndarray, arch: nn.Architecture, epochs: int, lr: float, batch_size: int = 32,
                patience: int = 0, seed: int = 0, val_fraction: float = 0.1):
    """Centralized training on one dataset; returns ``(params, node, stats, mean, std)``.

    Shares the seeding of :func:`run_federation`, so it reproduces a one-node
    federation with a single round of ``epochs`` local epochs.
    """
    if len(x) == 0:
        raise DegenerateInputError("empty dataset")
    x = _as_nchw(x)
    s, q, n = pixel_statistics(x)
    mean = s / n
    std = np.sqrt(np.maximum(q / n - mean**2, 0.0))
    std = np.where(std > 0, std, 1.0)
    xn = (x - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    node = split_node(0, xn, y, seed, val_fraction)
    params = nn.init_params(arch, derive_rng(seed, "init"))
    params, st = local_train_round(node, params, epochs, lr, batch_size, patience if patience > 0 else epochs,
                                   seed, 0)
    return params, node, st, mean, std


def search_space(config: FederationConfig) -> list[tuple]:
    """All (lr, local_epochs, batch_size) combinations in lexicographic order."""
    return list(itertools.product(sorted(set(config.search_lr)), sorted(set(config.search_local_epochs)),
                                  sorted(set(config.search_batch_size))))


def hyperparameter_search(config: FederationConfig, budget: int, datasets=None, rounds: int | None = None,
                          objective=None) -> tuple[FederationConfig, list[dict]]:
    """Random search without replacement, scored by final validation MCC.

    Ties go to the lower learning rate, then to the earlier configuration in
    lexicographic order. ``objective(cfg) -> score`` replaces the federated
    run (for tests).
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    space = search_space(config)
    if not space:
        raise ValueError("empty hyperparameter search space")
    rng = derive_rng(config.seed, "hpsearch")
    picks = sorted(rng.permutation(len(space))[:min(budget, len(space))].tolist())
    trials = []
    for idx in picks:
        lr, epochs, bs = space[idx]
        cfg = dataclasses.replace(config, lr=lr, local_epochs=epochs, batch_size=bs,
                                  rounds=rounds or config.rounds)
        score = objective(cfg) if objective else run_federation(cfg, datasets, record=False).reports[-1].val_mcc
        trials.append({"index": idx, "lr": lr, "local_epochs": epochs, "batch_size": bs, "score": float(score)})
    best = min(trials, key=lambda t: (-t["score"], t["lr"], t["index"]))
    return dataclasses.replace(config, lr=best["lr"], local_epochs=best["local_epochs"],
                               batch_size=best["batch_size"]), trials
