"""Server-side mixture-weight estimation and staleness-aware update ratios."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LabeledDataset, LossModel, empirical_loss, l2_distance

# Bar modes: a non-negative constant, or a keyword resolved from the computed
# values ("min" for the metric bars, "ave" for the ratio threshold).
MIN_OF_COMPUTED = "min"
AVERAGE_OF_COMPUTED = "ave"

_DEGENERATE_SUM = 1e-12


def _validate_metric_bar(name: str, bar) -> None:
    if bar == MIN_OF_COMPUTED:
        return
    if not isinstance(bar, (int, float)) or bar < 0:
        raise ValueError(f"{name} must be a non-negative constant or 'min'")


@dataclass(frozen=True)
class EstimationConfig:
    """Hyper-parameters of the distribution-estimation step."""

    c1: float
    c2: float
    temperatures: tuple[float, ...]
    l_bar: float | str = 0.0
    d1_bar: float | str = 0.0
    d2_bar: float | str = 0.0

    def __post_init__(self):
        if not (0.0 <= self.c1 <= 1.0 and 0.0 <= self.c2 <= 1.0):
            raise ValueError("c1 and c2 must lie in [0, 1]")
        if self.c1 + self.c2 > 1.0 + 1e-12:
            raise ValueError("c1 + c2 must lie in [0, 1]")
        object.__setattr__(self, "temperatures", tuple(float(a) for a in self.temperatures))
        if not self.temperatures or any(a <= 0 for a in self.temperatures):
            raise ValueError("temperatures must be a nonempty list of positive reals")
        _validate_metric_bar("l_bar", self.l_bar)
        _validate_metric_bar("d1_bar", self.d1_bar)
        _validate_metric_bar("d2_bar", self.d2_bar)


@dataclass(frozen=True)
class RatioConfig:
    """Hyper-parameters of the update-ratio computation."""

    beta0: float
    beta1_bar: float | str = AVERAGE_OF_COMPUTED
    a: float = 10.0
    b: int = 5

    def __post_init__(self):
        if not (0.0 < self.beta0 < 1.0):
            raise ValueError("beta0 must lie in (0, 1)")
        if self.beta1_bar != AVERAGE_OF_COMPUTED and (
            not isinstance(self.beta1_bar, (int, float)) or self.beta1_bar < 0
        ):
            raise ValueError("beta1_bar must be a non-negative constant or 'ave'")
        if self.a < 0:
            raise ValueError("a must be non-negative")
        if self.b < 0 or int(self.b) != self.b:
            raise ValueError("b must be a non-negative integer")


@dataclass(frozen=True)
class UpdateRatios:
    """Per-cluster update ratios and the post-update last-update epochs."""

    ratios: np.ndarray
    updated_mask: np.ndarray
    last_update_epoch: np.ndarray


def raw_metrics(
    client_model: np.ndarray,
    clusters: list[np.ndarray],
    proxies: list[LabeledDataset],
    model: LossModel,
):
    """Proxy losses and the two model-similarity metrics, one triple per cluster."""
    if len(clusters) < 2 or len(clusters) != len(proxies):
        raise ValueError("need K >= 2 clusters with one proxy dataset each")
    losses = np.empty(len(clusters))
    loss_gaps = np.empty(len(clusters))
    distances = np.empty(len(clusters))
    for k, (w, proxy) in enumerate(zip(clusters, proxies)):
        losses[k] = empirical_loss(model, client_model, proxy)
        loss_gaps[k] = abs(empirical_loss(model, w, proxy) - losses[k])
        distances[k] = l2_distance(client_model, w)
    return losses, loss_gaps, distances


def _apply_bar(values: np.ndarray, bar) -> np.ndarray:
    offset = values.min() if bar == MIN_OF_COMPUTED else float(bar)
    return np.maximum(values - offset, 0.0)


def _leave_one_out_fraction(values: np.ndarray) -> np.ndarray:
    total = values.sum()
    K = values.shape[0]
    if total <= _DEGENERATE_SUM:
        return np.full(K, (K - 1) / K)
    return (total - values) / total


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def estimate_distribution(metrics, cfg: EstimationConfig) -> np.ndarray:
    """Map the raw metric triple to a point on the K-simplex."""
    losses, loss_gaps, distances = (np.asarray(m, dtype=np.float64) for m in metrics)
    K = losses.shape[0]
    if K < 2:
        raise ValueError("estimation requires K >= 2")
    frac_l = _leave_one_out_fraction(_apply_bar(losses, cfg.l_bar))
    frac_d1 = _leave_one_out_fraction(_apply_bar(loss_gaps, cfg.d1_bar))
    frac_d2 = _leave_one_out_fraction(_apply_bar(distances, cfg.d2_bar))
    scores = (
        cfg.c1 * frac_l + cfg.c2 * frac_d1 + (1.0 - cfg.c1 - cfg.c2) * frac_d2
    ) / (K - 1)
    for temperature in cfg.temperatures:
        scores = softmax(scores * temperature)
    return scores


def compute_update_ratios(
    weights: np.ndarray,
    cfg: RatioConfig,
    last_sync: int,
    epoch: int,
    last_update_epoch: np.ndarray,
) -> UpdateRatios:
    """Threshold the estimated weights and damp them by staleness."""
    if last_sync > epoch:
        raise ValueError("client last-sync epoch cannot exceed the current epoch")
    beta1 = np.asarray(weights, dtype=np.float64)
    if beta1.shape[0] < 2 or beta1.shape != np.shape(last_update_epoch):
        raise ValueError("weights and last_update_epoch must align with K >= 2")
    bar = beta1.mean() if cfg.beta1_bar == AVERAGE_OF_COMPUTED else float(cfg.beta1_bar)
    beta1_max = beta1.max()
    survives = beta1 >= bar
    if beta1_max <= 0.0:
        beta1_scaled = np.zeros_like(beta1)
    else:
        beta1_scaled = np.where(survives, beta1 / beta1_max, 0.0)
    new_epochs = np.where(survives, epoch, np.asarray(last_update_epoch))
    gaps = new_epochs - last_sync
    beta2 = np.where(gaps < cfg.b, 1.0, 1.0 / (cfg.a * gaps + 1.0))
    ratios = cfg.beta0 * beta1_scaled * beta2
    return UpdateRatios(
        ratios=ratios,
        updated_mask=ratios > 0.0,
        last_update_epoch=new_epochs.astype(np.int64),
    )


_KL_CLAMP = 1e-12


def kl_divergence(true_weights, estimated_weights) -> float:
    """KL(P || Q) in nats, with the 0 * ln(0/q) = 0 convention."""
    p = np.asarray(true_weights, dtype=np.float64)
    q = np.maximum(np.asarray(estimated_weights, dtype=np.float64), _KL_CLAMP)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
