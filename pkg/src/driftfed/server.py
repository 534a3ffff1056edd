"""Serialized server: epoch counting, staleness gating, cluster updates."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import LabeledDataset, LossModel, aggregate, as_param_vector
from .estimation import (
    EstimationConfig,
    RatioConfig,
    compute_update_ratios,
    estimate_distribution,
    raw_metrics,
)

SNAPSHOT_VERSION = 1


@dataclass
class ClusterRepository:
    """The K cluster models with their proxy data and last-update epochs."""

    models: list[np.ndarray]
    proxies: list[LabeledDataset]
    last_update_epoch: np.ndarray
    loss_model: LossModel

    def __post_init__(self):
        if len(self.models) < 2:
            raise ValueError("repository requires K >= 2 clusters")
        if not (len(self.models) == len(self.proxies) == len(self.last_update_epoch)):
            raise ValueError("models, proxies and epochs must have equal length")
        self.models = [as_param_vector(m) for m in self.models]
        if len({m.shape for m in self.models}) != 1:
            raise ValueError("all cluster models must share a dimension")
        self.last_update_epoch = np.asarray(self.last_update_epoch, dtype=np.int64)

    @property
    def num_clusters(self) -> int:
        return len(self.models)


@dataclass(frozen=True)
class ServerConfig:
    staleness_threshold: int
    estimation: EstimationConfig
    ratios: RatioConfig

    def __post_init__(self):
        if self.staleness_threshold < 1:
            raise ValueError("staleness_threshold must be >= 1")


@dataclass(frozen=True)
class UploadResult:
    """Server response to one upload: personalized model, new epoch, branch taken."""

    model: np.ndarray
    epoch: int
    stale: bool
    est_weights: np.ndarray | None  # None on the stale branch


@dataclass
class Counters:
    uploads: int = 0
    downloads: int = 0
    proxy_loss_evals: int = 0
    client_loss_evals: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Server:
    """Single logical writer of Algorithm-style epoch/cluster state.

    Callers must serialize handle_join/handle_upload invocations.
    """

    cfg: ServerConfig
    repo: ClusterRepository
    epoch: int = 0
    weight_cache: dict = field(default_factory=dict)
    counters: Counters = field(default_factory=Counters)
    warnings: list = field(default_factory=list)

    @property
    def num_clusters(self) -> int:
        return self.repo.num_clusters

    def _uniform_weights(self) -> np.ndarray:
        K = self.num_clusters
        return np.full(K, 1.0 / K)

    def handle_join(self, client_id=None):
        """Cold start: uniform aggregate of the cluster models; epoch untouched."""
        weights = self._uniform_weights()
        if client_id is not None:
            self.weight_cache.setdefault(client_id, weights)
        return aggregate(self.repo.models, weights), self.epoch

    def _cached_weights(self, client_id) -> np.ndarray:
        if client_id not in self.weight_cache:
            self.warnings.append(
                f"stale upload from unknown client {client_id!r}; using uniform weights"
            )
            return self._uniform_weights()
        return self.weight_cache[client_id]

    def _stale_response(self, client_id, weights=None) -> UploadResult:
        weights = self._cached_weights(client_id) if weights is None else weights
        u = aggregate(self.repo.models, weights)
        return UploadResult(model=u, epoch=self.epoch, stale=True, est_weights=None)

    def _apply_cluster_update(self, client_id, v, weights, last_sync) -> UploadResult:
        update = compute_update_ratios(
            weights,
            self.cfg.ratios,
            last_sync,
            self.epoch,
            self.repo.last_update_epoch,
        )
        for k, beta in enumerate(update.ratios):
            if beta > 0.0:
                self.repo.models[k] = as_param_vector(
                    (1.0 - beta) * self.repo.models[k] + beta * v
                )
        self.repo.last_update_epoch = update.last_update_epoch
        self.weight_cache[client_id] = weights
        u = aggregate(self.repo.models, weights)
        return UploadResult(model=u, epoch=self.epoch, stale=False, est_weights=weights)

    def handle_upload(self, client_id, v: np.ndarray, last_sync: int) -> UploadResult:
        """Process one upload: estimate the client's mixture, update clusters."""
        if last_sync > self.epoch:
            raise ValueError("upload timestamp is ahead of the server epoch")
        v = as_param_vector(v)
        self.epoch += 1
        self.counters.uploads += 1
        self.counters.downloads += 1
        if self.epoch - last_sync > self.cfg.staleness_threshold:
            return self._stale_response(client_id)
        metrics = raw_metrics(v, self.repo.models, self.repo.proxies, self.repo.loss_model)
        self.counters.proxy_loss_evals += 2 * self.num_clusters
        weights = estimate_distribution(metrics, self.cfg.estimation)
        return self._apply_cluster_update(client_id, v, weights, last_sync)

    def handle_weighted_upload(
        self, client_id, v: np.ndarray, last_sync: int, weights
    ) -> UploadResult:
        """Upload path for client-side estimation: weights arrive with the model."""
        if last_sync > self.epoch:
            raise ValueError("upload timestamp is ahead of the server epoch")
        v = as_param_vector(v)
        weights = np.asarray(weights, dtype=np.float64)
        self.epoch += 1
        self.counters.uploads += 1
        self.counters.downloads += 1
        if self.epoch - last_sync > self.cfg.staleness_threshold:
            return self._stale_response(client_id, weights=weights)
        return self._apply_cluster_update(client_id, v, weights, last_sync)

    def cluster_models(self) -> list[np.ndarray]:
        return list(self.repo.models)

    # -- snapshot round-trip ------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "version": SNAPSHOT_VERSION,
            "epoch": self.epoch,
            "models": [m.tolist() for m in self.repo.models],
            "last_update_epoch": self.repo.last_update_epoch.tolist(),
            "weight_cache": {
                str(cid): w.tolist() for cid, w in sorted(self.weight_cache.items())
            },
            "counters": self.counters.as_dict(),
        }

    def snapshot_bytes(self) -> bytes:
        return json.dumps(self.snapshot(), sort_keys=True).encode()

    def restore(self, blob: dict) -> None:
        if blob.get("version") != SNAPSHOT_VERSION:
            raise ValueError("unsupported snapshot version")
        if len(blob["models"]) != self.num_clusters:
            raise ValueError("snapshot cluster count does not match repository")
        self.epoch = int(blob["epoch"])
        self.repo.models = [as_param_vector(m) for m in blob["models"]]
        self.repo.last_update_epoch = np.asarray(blob["last_update_epoch"], dtype=np.int64)
        self.weight_cache = {
            cid: np.asarray(w, dtype=np.float64)
            for cid, w in blob["weight_cache"].items()
        }
        self.counters = Counters(**blob["counters"])


def init_server(
    cfg: ServerConfig,
    pretrained: list[np.ndarray],
    proxies: list[LabeledDataset],
    loss_model: LossModel,
) -> Server:
    repo = ClusterRepository(
        models=list(pretrained),
        proxies=list(proxies),
        last_update_epoch=np.zeros(len(pretrained), dtype=np.int64),
        loss_model=loss_model,
    )
    return Server(cfg=cfg, repo=repo)
