"""Training pipeline: pretraining, centroid initialization, alternating
joint optimization with the small-cluster guard, and inference.

Pretraining runs plain mini-batch SGD with momentum on the reconstruction
loss. Joint training alternates, per batch: (1) a gradient step on the
combined loss with assignments and centroids frozen, (2) reassignment of
the batch to the nearest centroids, (3) a streaming per-sample centroid
update weighted by cumulative counts, (4) centroid replacement for
clusters whose batch membership falls below a fraction of the batch size.
A final full-dataset pass refreshes assignments with the trained weights,
so re-parcellating a training subject reproduces them exactly.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import net
from .features import FeatureField, augment_batch
from .kmeans import assign_nearest, kmeans
from .util import config_hash, dump_json, load_json, mix64
from .voxelgrid import Mask, VoxelGrid

log = logging.getLogger(__name__)

_S_EPOCH = 0xE70C      # stream id for per-epoch shuffles
_S_KMEANS = 0x4B4D     # stream id for centroid initialization
_FRESH_COUNT = 100.0   # streaming-update inertia of initialized centroids
_ENCODE_CHUNK = 1024


@dataclass(frozen=True)
class TrainConfig:
    n_parcels: int = 9
    batch_size: int = 3096
    small_cluster_fraction: float = 1.0 / 80.0
    lam: float = 3.3e-5
    pretrain_epochs: int = 100
    joint_epochs: int = 50
    pretrain_lr: float = 1e-3
    joint_lr: float = 1e-4
    momentum: float = 0.9
    optimizer: str = "sgd"  # "sgd" (momentum) or "adam"
    seed: int = 0
    guard_enabled: bool = True
    kmeans_n_init: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.small_cluster_fraction < 1.0:
            raise ValueError(f"small_cluster_fraction must be in (0, 1), got {self.small_cluster_fraction}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.n_parcels < 1:
            raise ValueError(f"n_parcels must be >= 1, got {self.n_parcels}")
        if self.pretrain_epochs < 0 or self.joint_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


@dataclass
class KMeansState:
    """Centroids, per-sample assignments, and cumulative update counts."""

    centroids: np.ndarray
    assignments: np.ndarray
    counts: np.ndarray

    def copy(self) -> "KMeansState":
        return KMeansState(self.centroids.copy(), self.assignments.copy(), self.counts.copy())

    @property
    def n(self) -> int:
        return int(self.centroids.shape[0])


@dataclass
class DeepClusterModel:
    net_config: net.NetworkConfig
    params: net.NetworkParams
    kmeans: KMeansState
    train_config: TrainConfig
    model_id: str


@dataclass(frozen=True, eq=False)
class Parcellation:
    """Per-voxel labels in [0, n) with provenance."""

    mask: Mask
    labels: np.ndarray
    n: int
    subject_id: str
    model_id: str

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64).ravel()
        if lab.size != len(self.mask):
            raise ValueError("labels must cover the mask")
        if lab.size and (lab.min() < 0 or lab.max() >= self.n):
            raise ValueError(f"labels must lie in [0, {self.n})")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)


# ---------------------------------------------------------------------------
# SGD machinery
# ---------------------------------------------------------------------------

def _epoch_batches(n_samples: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng(mix64(seed, _S_EPOCH, epoch)).permutation(n_samples)
    for start in range(0, n_samples, batch_size):
        yield order[start:start + batch_size]


def _sgd_step(params: net.NetworkParams, velocity: net.NetworkParams,
              grads: net.NetworkParams, lr: float, momentum: float) -> None:
    for p, v, g in zip(params.arrays, velocity.arrays, grads.arrays):
        v *= momentum
        v -= lr * g
        p += v


class _Optimizer:
    """Deterministic parameter updater: momentum SGD or Adam."""

    def __init__(self, params: net.NetworkParams, cfg: TrainConfig, lr: float):
        self.kind = cfg.optimizer
        self.lr = lr
        self.momentum = cfg.momentum
        self.velocity = params.zeros_like()
        if self.kind == "adam":
            self.second = params.zeros_like()
            self.t = 0

    def step(self, params: net.NetworkParams, grads: net.NetworkParams) -> None:
        if self.kind == "sgd":
            _sgd_step(params, self.velocity, grads, self.lr, self.momentum)
            return
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v, g in zip(params.arrays, self.velocity.arrays,
                              self.second.arrays, grads.arrays):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _check_dataset(dataset: np.ndarray, net_cfg: net.NetworkConfig) -> np.ndarray:
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError(f"dataset must be a nonempty (N, K) array, got {data.shape}")
    if data.shape[1] != net_cfg.input_side:
        raise ValueError(f"dataset K={data.shape[1]} does not match network K={net_cfg.input_side}")
    return data


def pretrain(
    net_cfg: net.NetworkConfig,
    dataset: np.ndarray,
    cfg: TrainConfig,
    params: net.NetworkParams | None = None,
) -> net.NetworkParams:
    """Mini-batch SGD on the reconstruction loss only.

    ``params`` defaults to a fresh seed-derived initialization; zero epochs
    return it unchanged.
    """
    data = _check_dataset(dataset, net_cfg)
    params = params.copy() if params is not None else net.init_params(net_cfg, cfg.seed)
    opt = _Optimizer(params, cfg, cfg.pretrain_lr)
    no_centroids = np.zeros((1, net_cfg.latent_dim))
    for epoch in range(cfg.pretrain_epochs):
        total = 0.0
        count = 0
        for bi, idx in enumerate(_epoch_batches(data.shape[0], cfg.batch_size, cfg.seed, epoch)):
            x = augment_batch(data[idx])
            try:
                lb, grads, _ = net.loss_and_gradients(
                    params, net_cfg, x, no_centroids, np.zeros(len(idx), dtype=np.int64), 0.0
                )
            except FloatingPointError as err:
                raise RuntimeError(f"pretrain diverged at epoch {epoch}, batch {bi}: {err}") from err
            opt.step(params, grads)
            total += lb.reconstruction * len(idx)
            count += len(idx)
        log.info("pretrain epoch %d: mse %.6g", epoch, total / count)
    return params


def encode_dataset(params: net.NetworkParams, net_cfg: net.NetworkConfig,
                   vectors: np.ndarray) -> np.ndarray:
    """Latents for every feature vector (augmented lazily, in chunks)."""
    data = _check_dataset(vectors, net_cfg)
    out = np.empty((data.shape[0], net_cfg.latent_dim))
    for start in range(0, data.shape[0], _ENCODE_CHUNK):
        chunk = data[start:start + _ENCODE_CHUNK]
        out[start:start + len(chunk)] = net.encode(params, net_cfg, augment_batch(chunk))
    return out


def init_centroids(latents: np.ndarray, n: int, seed: int, n_init: int = 10) -> KMeansState:
    """k-means++ seeding plus Lloyd iterations on pretrained latents."""
    z = np.asarray(latents, dtype=np.float64)
    if np.unique(z, axis=0).shape[0] < n:
        raise ValueError(f"need at least {n} distinct latents")
    centroids, assignments, obj = kmeans(z, n, mix64(seed, _S_KMEANS), n_init=n_init)
    log.info("init_centroids: objective %.6g, sizes %s", obj,
             np.bincount(assignments, minlength=n).tolist())
    return KMeansState(centroids, assignments, np.full(n, _FRESH_COUNT))


def assign(latents: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid assignment; ties break toward the smallest index."""
    return assign_nearest(latents, centroids)


def adaptive_guard(state: KMeansState, batch_assignments: np.ndarray,
                   batch_size: int, fraction: float) -> KMeansState:
    """Replace centroids of clusters under-represented in this batch.

    A cluster with strictly fewer than ``fraction * batch_size`` members is
    re-centered on the mean of the centroids of all adequately populated
    clusters; its cumulative count restarts at 1. Assignments are never
    modified. If every cluster is below threshold the state is returned
    unchanged with a warning.
    """
    counts = np.bincount(np.asarray(batch_assignments), minlength=state.n)
    below = counts < fraction * batch_size
    if not below.any():
        return state
    if below.all():
        log.warning("adaptive_guard: all clusters below threshold; nothing replaced")
        return state
    replacement = state.centroids[~below].mean(axis=0)
    centroids = state.centroids.copy()
    centroids[below] = replacement
    new_counts = state.counts.copy()
    new_counts[below] = 1.0
    log.info("adaptive_guard: replaced centroids %s (batch counts %s)",
             np.flatnonzero(below).tolist(), counts.tolist())
    return KMeansState(centroids, state.assignments, new_counts)


def joint_train(
    params: net.NetworkParams,
    dataset: np.ndarray,
    kmeans_state: KMeansState,
    net_cfg: net.NetworkConfig,
    cfg: TrainConfig,
) -> DeepClusterModel:
    """Alternate gradient steps with k-means bookkeeping, batch by batch."""
    data = _check_dataset(dataset, net_cfg)
    if kmeans_state.assignments.shape[0] != data.shape[0]:
        raise ValueError("kmeans state does not cover the dataset")
    params = params.copy()
    state = kmeans_state.copy()
    opt = _Optimizer(params, cfg, cfg.joint_lr)
    for epoch in range(cfg.joint_epochs):
        rec_sum = cent_sum = total_sum = 0.0
        count = 0
        for bi, idx in enumerate(_epoch_batches(data.shape[0], cfg.batch_size, cfg.seed, epoch)):
            x = augment_batch(data[idx])
            try:
                lb, grads, _, z = net.loss_and_gradients(
                    params, net_cfg, x, state.centroids, state.assignments[idx],
                    cfg.lam, return_latents=True,
                )
            except FloatingPointError as err:
                raise RuntimeError(f"joint training diverged at epoch {epoch}, batch {bi}: {err}") from err
            opt.step(params, grads)
            new_assign = assign_nearest(z, state.centroids)
            state.assignments[idx] = new_assign
            for pos in range(len(idx)):  # streaming update, batch order
                k = new_assign[pos]
                state.counts[k] += 1.0
                state.centroids[k] += (z[pos] - state.centroids[k]) / state.counts[k]
            if cfg.guard_enabled:
                state = adaptive_guard(state, new_assign, len(idx), cfg.small_cluster_fraction)
            rec_sum += lb.reconstruction * len(idx)
            cent_sum += lb.centroid * len(idx)
            total_sum += lb.total * len(idx)
            count += len(idx)
        sizes = np.bincount(state.assignments, minlength=state.n)
        log.info("joint epoch %d: total %.6g (mse %.6g, centroid %.6g), sizes %s",
                 epoch, total_sum / count, rec_sum / count, cent_sum / count, sizes.tolist())
    # refresh assignments with the final weights so inference on a training
    # subject reproduces them exactly
    latents = encode_dataset(params, net_cfg, data)
    state.assignments = assign_nearest(latents, state.centroids)
    model_id = config_hash({
        "net": net_cfg.to_dict(), "train": asdict(cfg), "n_samples": int(data.shape[0]),
    })
    return DeepClusterModel(net_cfg, params, state, cfg, model_id)


def parcellate(model: DeepClusterModel, features: FeatureField, subject_id: str) -> Parcellation:
    """Label every voxel with its nearest-centroid cluster in latent space."""
    if features.K != model.net_config.input_side:
        raise ValueError(
            f"feature K={features.K} does not match model K={model.net_config.input_side}"
        )
    latents = encode_dataset(model.params, model.net_config, features.values)
    labels = assign_nearest(latents, model.kmeans.centroids)
    return Parcellation(
        mask=features.mask,
        labels=labels,
        n=model.kmeans.n,
        subject_id=subject_id,
        model_id=model.model_id,
    )


# ---------------------------------------------------------------------------
# Model and parcellation files
# ---------------------------------------------------------------------------

def save_deep_cluster_model(path, model: DeepClusterModel) -> None:
    net.save_model(
        path,
        model.net_config,
        model.params,
        seed=model.train_config.seed,
        metadata={"train_config": asdict(model.train_config), "model_id": model.model_id},
        extras={"centroids": model.kmeans.centroids, "counts": model.kmeans.counts},
    )


def load_deep_cluster_model(path) -> DeepClusterModel:
    net_cfg, params, _seed, metadata, extras = net.load_model(path)
    tc = metadata.get("train_config", {})
    cfg = TrainConfig(**tc) if tc else TrainConfig()
    centroids = extras["centroids"]
    counts = extras.get("counts", np.full(centroids.shape[0], _FRESH_COUNT))
    state = KMeansState(centroids, np.array([], dtype=np.int64), counts)
    return DeepClusterModel(net_cfg, params, state, cfg, metadata.get("model_id", "unknown"))


def save_parcellation(path, parc: Parcellation, extra: dict | None = None) -> None:
    grid = parc.mask.grid
    payload = {
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "mask": [int(i) for i in parc.mask.voxels],
        "labels": [int(i) for i in parc.labels],
        "n": parc.n,
        "subject_id": parc.subject_id,
        "model_id": parc.model_id,
    }
    payload.update(extra or {})
    dump_json(path, payload)


def load_parcellation(path) -> Parcellation:
    d = load_json(path)
    grid = VoxelGrid(tuple(d["dims"]), tuple(d.get("spacing", (1.0, 1.0, 1.0))))
    return Parcellation(
        mask=Mask(grid, np.asarray(d["mask"], dtype=np.int64)),
        labels=np.asarray(d["labels"], dtype=np.int64),
        n=int(d["n"]),
        subject_id=d.get("subject_id", "unknown"),
        model_id=d.get("model_id", "unknown"),
    )
