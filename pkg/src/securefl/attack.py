"""Gradient-inversion attack harness.

The attacker is the aggregating server. It sees one of three artifacts:

* ``local``: the exact gradient of the victim's batch;
* ``fed-plain``: the victim node's own weight delta after one round of
  local SGD (a non-secure server receives every node's update);
* ``fed-secure``: only the aggregated global delta of the round.

Reconstruction maximizes the cosine similarity between the gradient of a
dummy batch and the captured pseudo-gradient (``-delta`` for weight deltas),
with an anisotropic total-variation prior and signed descent steps. The
input gradient of the cosine objective needs a Hessian-vector product; it is
computed as a central difference of input gradients along the parameter
direction, which works for any architecture of :mod:`securefl.nn`.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, stats

from . import nn
from .data import derive_rng, synthetic_images
from .federation import secure_weighted_fedavg, weighted_fedavg

log = logging.getLogger(__name__)

SCENARIOS = ("local", "fed-plain", "fed-secure")


@dataclass
class CapturedUpdate:
    kind: str
    tensors: nn.ModelParams
    metadata: dict = field(default_factory=dict)
    network: object = field(default=None, repr=False)

    def pseudo_gradient(self) -> nn.ModelParams:
        """Gradient-like direction: the gradient itself, or minus a weight delta."""
        return self.tensors if self.kind == "local" else self.tensors.map(np.negative)


@dataclass
class AttackConfig:
    iterations: int = 500
    step_size: float = 0.1
    tv_weight: float = 1e-4
    restarts: int = 1
    seed: int = 0
    label_mode: str = "analytic"  # or "joint"
    batch_size: int = 1
    fd_eps: float = 1e-4

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        if self.label_mode not in ("analytic", "joint"):
            raise ValueError(f"unknown label mode {self.label_mode!r}")


@dataclass
class AttackReport:
    reconstructions: list
    restart_mse: list
    best_mse: float
    best_restart: int
    objective: list  # per restart, objective trajectory
    labels: list
    wall_time_s: float

    def to_dict(self) -> dict:
        return {"restart_mse": self.restart_mse, "best_mse": self.best_mse, "best_restart": self.best_restart,
                "final_objective": [o[-1] if o else None for o in self.objective],
                "labels": self.labels, "wall_time_s": self.wall_time_s}


def local_update(params: nn.ModelParams, x, y, steps: int, lr: float) -> nn.ModelParams:
    """Full-batch SGD for ``steps`` steps on one node's data."""
    for _ in range(steps):
        _, g = nn.backward(params, x, y)
        params = nn.sgd_step(params, g, lr)
    return params


def capture_update(scenario: str, params: nn.ModelParams, x, y, others=(), local_steps: int = 5, lr: float = 0.1,
                   rng: np.random.Generator | None = None) -> CapturedUpdate:
    """What the server observes when the victim holds ``(x, y)``.

    ``others`` lists the remaining nodes' ``(x, y)`` for the federated
    scenarios; nodes are weighted by their dataset sizes.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    x = np.asarray(x, dtype=np.float64)
    meta = {"batch_size": len(x), "nodes": 1 + len(others), "local_steps": local_steps, "lr": lr}
    if scenario == "local":
        _, g = nn.backward(params, x, y)
        return CapturedUpdate("local", g, meta)
    if scenario == "fed-plain":
        w = local_update(params, x, y, local_steps, lr)
        return CapturedUpdate("fed-plain", w.zip_map(params, np.subtract), meta)
    updates = [(local_update(params, x, y, local_steps, lr), len(x))]
    updates += [(local_update(params, ox, oy, local_steps, lr), len(ox)) for ox, oy in others]
    if len(updates) == 1:
        agg, net = weighted_fedavg(updates), None
    else:
        agg, net = secure_weighted_fedavg(updates, rng or derive_rng(0, "attack-agg"))
    return CapturedUpdate("fed-secure", agg.zip_map(params, np.subtract), meta, net)


def total_variation(x: np.ndarray) -> tuple[float, np.ndarray]:
    """Anisotropic TV (sum of absolute neighbour differences) and a subgradient."""
    dh = np.diff(x, axis=-1)
    dv = np.diff(x, axis=-2)
    tv = float(np.abs(dh).sum() + np.abs(dv).sum())
    g = np.zeros_like(x)
    sh, sv = np.sign(dh), np.sign(dv)
    g[..., :, 1:] += sh
    g[..., :, :-1] -= sh
    g[..., 1:, :] += sv
    g[..., :-1, :] -= sv
    return tv, g


def recover_label(target: nn.ModelParams) -> int:
    """Batch-1 label from the last-layer bias gradient: only the true class is negative."""
    last = [n for n in target.names() if n.endswith(".bias")][-1]
    return int(np.argmin(target[last]))


def _soft(logits):
    return nn.softmax(logits)


def cosine_objective(params: nn.ModelParams, target_flat: np.ndarray, x: np.ndarray, labels, eps: float = 1e-4):
    """``1 - cos(grad(x, labels), target)`` with its gradients wrt ``x`` and soft targets."""
    _, g = nn.backward(params, x, labels)
    gf = g.flat()
    gn, tn = np.linalg.norm(gf), np.linalg.norm(target_flat)
    if gn == 0 or tn == 0:
        return 1.0, np.zeros_like(x), None
    cos = float(gf @ target_flat / (gn * tn))
    v = target_flat / (gn * tn) - cos * gf / gn**2
    h = eps * max(np.linalg.norm(params.flat()), 1.0) / np.linalg.norm(v)
    vp = params.unflatten(v)
    plus = params.zip_map(vp, lambda p, d: p + h * d)
    minus = params.zip_map(vp, lambda p, d: p - h * d)
    _, _, dx_p, dy_p = nn.backward(plus, x, labels, input_grad=True)
    _, _, dx_m, dy_m = nn.backward(minus, x, labels, input_grad=True)
    dx = -(dx_p - dx_m) / (2 * h)
    dy = -(dy_p - dy_m) / (2 * h)
    return 1.0 - cos, dx, dy


def _match_mse(recon: np.ndarray, truth: np.ndarray) -> float:
    return evaluate_reconstruction(recon, truth)["mse"]


def evaluate_reconstruction(recon, truth) -> dict:
    """Pixelwise MSE; batches are matched to ground truth by minimum-cost assignment."""
    recon, truth = np.asarray(recon, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if recon.shape != truth.shape:
        raise ValueError(f"shape mismatch {recon.shape} vs {truth.shape}")
    if recon.ndim <= 3:
        return {"mse": float(np.mean((recon - truth) ** 2)), "per_image": [float(np.mean((recon - truth) ** 2))]}
    cost = ((recon[:, None] - truth[None]) ** 2).reshape(len(recon), len(truth), -1).mean(axis=2)
    rows, cols = optimize.linear_sum_assignment(cost)
    per = [float(cost[r, c]) for r, c in zip(rows, cols)]
    return {"mse": float(np.mean(per)), "per_image": per}


def feature_frechet_distance(params: nn.ModelParams, recon, truth) -> float:
    """Frechet distance between Gaussian fits of penultimate-layer features.

    A small-model analogue only, not comparable to Inception-based FID.
    """
    a, b = nn.features(params, recon), nn.features(params, truth)
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ca = np.atleast_2d(np.cov(a, rowvar=False)) if len(a) > 1 else np.zeros((a.shape[1],) * 2)
    cb = np.atleast_2d(np.cov(b, rowvar=False)) if len(b) > 1 else np.zeros((b.shape[1],) * 2)
    covmean = linalg.sqrtm(ca @ cb)
    covmean = np.real(covmean) if np.iscomplexobj(covmean) else covmean
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca + cb - 2 * covmean))


def invert(update: CapturedUpdate, params: nn.ModelParams, config: AttackConfig, truth=None) -> AttackReport:
    """Reconstruct the victim batch from a captured update."""
    t0 = time.perf_counter()
    target = update.pseudo_gradient()
    tflat = target.flat()
    arch = params.arch
    bsz = config.batch_size
    analytic = config.label_mode == "analytic" and bsz == 1
    recons, mses, trajs, labels_out = [], [], [], []
    best_obj = []
    for r in range(config.restarts):
        rng = derive_rng(config.seed, "attack-restart", r)
        x = rng.standard_normal((bsz,) + tuple(arch.input_shape))
        ylog = np.zeros((bsz, arch.num_classes))
        fixed = np.array([recover_label(target)]) if analytic else None
        best_x, best, traj = x.copy(), np.inf, []
        aborted = False
        for it in range(config.iterations):
            step = config.step_size * (0.1 if it >= 0.5 * config.iterations else 1.0) * \
                (0.1 if it >= 0.75 * config.iterations else 1.0)
            labels = fixed if analytic else _soft(ylog)
            obj, dx, dy = cosine_objective(params, tflat, x, labels, config.fd_eps)
            tv, gtv = total_variation(x) if config.tv_weight else (0.0, 0.0)
            obj += config.tv_weight * tv
            if not np.isfinite(obj) or not np.all(np.isfinite(dx)):
                log.warning("restart %d: non-finite objective at iteration %d, aborted", r, it)
                aborted = True
                break
            if obj < best:
                best, best_x = obj, x.copy()
            traj.append(min(best, obj))
            x = x - step * np.sign(dx + config.tv_weight * gtv)
            if not analytic and dy is not None:
                p = _soft(ylog)
                gl = p * (dy - (dy * p).sum(axis=1, keepdims=True))
                ylog = ylog - step * np.sign(gl)
        if config.iterations == 0:
            best_x = x
        if aborted and not traj:
            continue
        recons.append(best_x)
        trajs.append(traj)
        best_obj.append(best)
        labels_out.append(fixed.tolist() if analytic else _soft(ylog).argmax(axis=1).tolist())
        if truth is not None:
            mses.append(_match_mse(best_x, np.asarray(truth, dtype=np.float64).reshape(best_x.shape)))
    if not recons:
        raise RuntimeError("every restart aborted with a non-finite objective")
    if mses:
        best_i = int(np.argmin(mses))
        best_mse = float(mses[best_i])
    else:
        best_i, best_mse = int(np.argmin(best_obj)), float("nan")
    return AttackReport(recons, mses, best_mse, best_i, trajs, labels_out, time.perf_counter() - t0)


@dataclass
class BenchmarkSetup:
    """Victim model and federation used by the attack-difficulty benchmark.

    The default victim is the small CNN on 8x8 inputs. With a one-hidden-layer
    MLP and a single image per node, the first-layer weight delta after any
    number of local steps is still an outer product with the image, so the
    ``fed-plain`` capture would be exactly as informative as the gradient.
    """

    kind: str = "smallcnn"
    image_size: int = 8
    hidden: int = 32
    num_classes: int = 3
    nodes: int = 3
    local_steps: int = 5
    lr: float = 0.1
    trials: int = 20

    @property
    def arch(self) -> nn.Architecture:
        return nn.Architecture(self.kind, (1, self.image_size, self.image_size), self.num_classes, self.hidden)


def _normalize(raw: np.ndarray) -> np.ndarray:
    return ((raw.astype(np.float64) / 255.0 - 0.5) / 0.25)[:, None]


def attack_trial(setup: BenchmarkSetup, config: AttackConfig, trial: int, seed: int = 0,
                 scenarios=SCENARIOS) -> dict:
    """One seeded trial: fresh model and per-node single images, all scenarios attacked."""
    rng = derive_rng(seed, "attack-trial", trial)
    params = nn.init_params(setup.arch, rng)
    raw, labels = synthetic_images(setup.nodes, rng, setup.image_size, setup.num_classes)
    x = _normalize(raw)
    victim = (x[:1], labels[:1])
    others = [(x[k:k + 1], labels[k:k + 1]) for k in range(1, setup.nodes)]
    out = {}
    for sc in scenarios:
        upd = capture_update(sc, params, *victim, others=others, local_steps=setup.local_steps, lr=setup.lr,
                             rng=derive_rng(seed, "attack-agg", trial))
        cfg = AttackConfig(**{**config.__dict__, "seed": seed * 1000 + trial})
        out[sc] = invert(upd, params, cfg, victim[0]).best_mse
    return out


def attack_benchmark(setup: BenchmarkSetup | None = None, config: AttackConfig | None = None, seed: int = 0) -> dict:
    """Best-MSE per scenario over seeded trials plus one-sided paired t-tests of the ordering."""
    setup = setup or BenchmarkSetup()
    config = config or AttackConfig()
    rows = [attack_trial(setup, config, t, seed) for t in range(setup.trials)]
    mse = {sc: [r[sc] for r in rows] for sc in SCENARIOS}
    tests = {}
    for a, b in zip(SCENARIOS, SCENARIOS[1:]):
        res = stats.ttest_rel(mse[a], mse[b], alternative="less")
        tests[f"{a}<{b}"] = {"statistic": float(res.statistic), "p_value": float(res.pvalue)}
    return {"mse": mse, "mean": {sc: float(np.mean(v)) for sc, v in mse.items()},
            "std": {sc: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0 for sc, v in mse.items()},
            "tests": tests, "trials": setup.trials}
