"""Desk-scale contrastive training on synthetic clusters.

A linear encoder maps points to ``embed_dim`` coordinates, which are then
normalized onto the sphere; scores are cosine similarities. Positives are
two independently perturbed views of the same point. Negatives are drawn
per anchor from a mixture of a uniform pool and an other-class pool, so
the false-negative ratio ``r`` interpolates between "true negatives only"
(``r = 0``) and uniform sampling (``r = 1``).

Everything is analytic: the loss gradient with respect to scores comes
from :func:`cldro.losses.loss_gradient` and is chained through cosine
similarity and normalization by hand.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from ._training import Momentum, check_finite
from .losses import LossConfig, LossKind, loss_gradient, loss_value
from .scores import ScoreBatch


@dataclass(frozen=True)
class ClusterDataConfig:
    num_classes: int = 4
    ambient_dim: int = 8
    points_per_class: int = 200
    class_separation: float = 3.0
    within_class_noise: float = 1.0
    nuisance_dim: int = 8
    nuisance_noise: float = 1.2

    def __post_init__(self):
        if self.num_classes < 1 or self.ambient_dim < 1 or self.points_per_class < 1:
            raise ValueError("counts must be positive")
        if self.nuisance_dim < 0:
            raise ValueError("nuisance_dim must be nonnegative")
        if not (self.class_separation > 0 and self.within_class_noise >= 0 and self.nuisance_noise >= 0):
            raise ValueError("class_separation must be positive and noise nonnegative")


@dataclass(frozen=True)
class NoiseConfig:
    false_negative_ratio: float = 1.0

    def __post_init__(self):
        if not 0 <= self.false_negative_ratio <= 1:
            raise ValueError("false_negative_ratio must lie in [0, 1]")


@dataclass(frozen=True)
class Dataset:
    points: np.ndarray
    labels: np.ndarray
    centers: np.ndarray = field(default=None, repr=False)

    @property
    def num_classes(self):
        return int(np.unique(self.labels).size)

    def __len__(self):
        return self.labels.size


def make_clusters(config: ClusterDataConfig, seed=0):
    """Class centers on a sphere of radius ``class_separation`` plus isotropic noise.

    ``nuisance_dim`` extra coordinates carry pure per-point noise of scale
    ``nuisance_noise``: they identify instances but say nothing about the
    class. Points are stored grouped by class.
    """
    rng = np.random.default_rng(seed)
    K, D = config.num_classes, config.ambient_dim
    centers = rng.standard_normal((K, D))
    centers *= config.class_separation / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(K), config.points_per_class)
    noise = rng.standard_normal((labels.size, D)) * config.within_class_noise
    points = centers[labels] + noise
    if config.nuisance_dim:
        extra = rng.standard_normal((labels.size, config.nuisance_dim)) * config.nuisance_noise
        points = np.hstack([points, extra])
    return Dataset(points, labels, centers)


@dataclass(frozen=True)
class ContrastiveBatch:
    """Anchor views ``(B, D)``, positive views ``(B, D)`` and negatives ``(B, N, D)``.

    ``same_class[i, j]`` marks negative ``j`` of anchor ``i`` as a false negative.
    """

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    anchor_index: np.ndarray
    negative_index: np.ndarray
    same_class: np.ndarray

    def __iter__(self):
        return iter(zip(self.anchors, self.positives, self.negatives))

    def __len__(self):
        return self.anchors.shape[0]


def _other_class_pools(labels):
    return {c: np.flatnonzero(labels != c) for c in np.unique(labels)}


def sample_contrastive_batch(
    dataset: Dataset,
    batch_size,
    noise: NoiseConfig,
    augment_noise=0.5,
    seed=None,
    num_negatives=None,
    rng=None,
    _pools=None,
):
    """Draw anchors with perturbed positive views and mixed-pool negatives.

    Each negative comes from the uniform pool (every point but the anchor)
    with probability ``r`` and from the other-class pool otherwise, so the
    expected false-negative fraction is ``r`` times that of uniform sampling.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    rng = np.random.default_rng(seed) if rng is None else rng
    r = noise.false_negative_ratio
    n = len(dataset)
    labels = dataset.labels
    if r < 1 and dataset.num_classes < 2:
        raise ValueError("no true negatives exist: the dataset has a single class")
    N = batch_size - 1 if num_negatives is None else num_negatives
    pools = _other_class_pools(labels) if _pools is None else _pools

    idx = rng.integers(0, n, size=batch_size)
    # uniform pool excludes the anchor itself
    uni = rng.integers(0, n - 1, size=(batch_size, N))
    uni = uni + (uni >= idx[:, None])
    use_uniform = rng.random((batch_size, N)) < r
    u = rng.random((batch_size, N))
    other = np.empty((batch_size, N), dtype=np.int64)
    for c, pool in pools.items():
        rows = labels[idx] == c
        if np.any(rows) and pool.size:
            other[rows] = pool[(u[rows] * pool.size).astype(np.int64)]
    neg_idx = np.where(use_uniform, uni, other)

    x = dataset.points
    D = x.shape[1]
    anchors = x[idx] + augment_noise * rng.standard_normal((batch_size, D))
    positives = x[idx] + augment_noise * rng.standard_normal((batch_size, D))
    negatives = x[neg_idx] + augment_noise * rng.standard_normal((batch_size, N, D))
    same = labels[neg_idx] == labels[idx][:, None]
    return ContrastiveBatch(anchors, positives, negatives, idx, neg_idx, same)


@dataclass
class Encoder:
    weights: np.ndarray

    @classmethod
    def random(cls, ambient_dim, embed_dim, rng, scale=None):
        scale = 1.0 / math.sqrt(ambient_dim) if scale is None else scale
        return cls(scale * rng.standard_normal((ambient_dim, embed_dim)))

    def embed(self, x):
        z = np.asarray(x) @ self.weights
        return z / np.linalg.norm(z, axis=-1, keepdims=True)

    def copy(self):
        return Encoder(self.weights.copy())


def batch_scores(encoder: Encoder, batch: ContrastiveBatch):
    za = encoder.embed(batch.anchors)
    zp = encoder.embed(batch.positives)
    zn = encoder.embed(batch.negatives)
    pos = np.sum(za * zp, axis=-1)
    neg = np.einsum("bd,bnd->bn", za, zn)
    return ScoreBatch(pos, neg)


def _normalize_backward(x, W, g_hat):
    """Pull ``dL/dz_hat`` back to ``dL/dW`` through ``z_hat = xW / |xW|``."""
    z = x @ W
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    zh = z / norm
    g_z = (g_hat - np.sum(g_hat * zh, axis=-1, keepdims=True) * zh) / norm
    return x.reshape(-1, x.shape[-1]).T @ g_z.reshape(-1, g_z.shape[-1])


def encoder_loss_and_grad(encoder: Encoder, batch: ContrastiveBatch, config: LossConfig, step=None):
    """Loss value, its gradient w.r.t. the encoder weights, and the scores.

    Inside a training loop pass ``step`` so that non-finite scores surface
    as ``TrainingDiverged`` at that step rather than as a validation error.
    """
    W = encoder.weights
    with np.errstate(invalid="ignore", divide="ignore"):
        za = encoder.embed(batch.anchors)
        zp = encoder.embed(batch.positives)
        zn = encoder.embed(batch.negatives)
        pos, neg = np.sum(za * zp, axis=-1), np.einsum("bd,bnd->bn", za, zn)
    if step is not None:
        check_finite(pos, step, "scores")
        check_finite(neg, step, "scores")
    scores = ScoreBatch(pos, neg)
    weights = config.weights(scores.neg) if config.kind is LossKind.ADNCE else None
    value = loss_value(config, scores, weights).value
    d_pos, d_neg = loss_gradient(config, scores, weights)
    g_a = d_pos[:, None] * zp + np.einsum("bn,bnd->bd", d_neg, zn)
    g_p = d_pos[:, None] * za
    g_n = d_neg[:, :, None] * za[:, None, :]
    grad = (
        _normalize_backward(batch.anchors, W, g_a)
        + _normalize_backward(batch.positives, W, g_p)
        + _normalize_backward(batch.negatives, W, g_n)
    )
    return value, grad, scores


@dataclass
class TrainLog:
    loss: np.ndarray
    pos_mean: np.ndarray
    neg_mean: np.ndarray
    neg_variance: np.ndarray
    encoder: Encoder = field(repr=False)

    def tail_mean(self, name, frac=0.1):
        v = getattr(self, name)
        k = max(1, int(round(len(v) * frac)))
        return float(np.mean(v[-k:]))


@dataclass(frozen=True)
class TrainSettings:
    """Shared knobs for training runs and sweeps."""

    embed_dim: int = 4
    epochs: int = 10
    batch_size: int = 64
    num_negatives: int = 63
    step_size: float = 0.5
    momentum: float = 0.9
    augment_noise: float = 0.5


def train_encoder(
    dataset: Dataset,
    loss_config: LossConfig,
    epochs=10,
    batch_size=64,
    step_size=0.5,
    noise: NoiseConfig = NoiseConfig(),
    seed=0,
    embed_dim=4,
    augment_noise=0.5,
    num_negatives=None,
    momentum=0.9,
    encoder=None,
):
    """Gradient descent on the chosen loss through the linear encoder.

    One epoch is ``ceil(len(dataset) / batch_size)`` steps. Per-step
    statistics follow the usual protocol: the mean positive score, and the
    per-anchor mean and variance of the negative scores averaged over anchors.
    """
    rng = np.random.default_rng(seed)
    D = dataset.points.shape[1]
    enc = Encoder.random(D, embed_dim, rng) if encoder is None else encoder.copy()
    steps = epochs * math.ceil(len(dataset) / batch_size)
    pools = _other_class_pools(dataset.labels)
    opt = Momentum(step_size, momentum, sign=-1.0)
    log = {k: np.empty(steps) for k in ("loss", "pos_mean", "neg_mean", "neg_variance")}
    for t in range(steps):
        batch = sample_contrastive_batch(
            dataset, batch_size, noise, augment_noise, num_negatives=num_negatives, rng=rng, _pools=pools
        )
        value, grad, scores = encoder_loss_and_grad(enc, batch, loss_config, step=t)
        check_finite(value, t, "loss")
        log["loss"][t] = value
        log["pos_mean"][t] = scores.pos.mean()
        log["neg_mean"][t] = scores.neg.mean(axis=1).mean()
        log["neg_variance"][t] = scores.neg.var(axis=1).mean()
        enc.weights = opt.step({"W": enc.weights}, {"W": grad})["W"]
        check_finite(enc.weights, t, "encoder weights")
    return TrainLog(encoder=enc, **log)


def split_indices(n, seed=0, train_frac=0.8):
    """Disjoint seeded fit / held-out index arrays."""
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_frac * n))
    return perm[:cut], perm[cut:]


def ridge_accuracy(features, labels, fit, held, ridge=1e-3):
    """Closed-form ridge regression on one-hot targets, scored by top-1 accuracy."""
    y = np.asarray(labels)
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("linear evaluation needs at least two classes")
    Z = np.hstack([np.asarray(features, dtype=np.float64), np.ones((y.size, 1))])
    T = (y[:, None] == classes[None, :]).astype(np.float64)
    Zf = Z[fit]
    beta = np.linalg.solve(Zf.T @ Zf + ridge * fit.size * np.eye(Z.shape[1]), Zf.T @ T[fit])
    pred = classes[np.argmax(Z[held] @ beta, axis=1)]
    return float(np.mean(pred == y[held]))


def linear_eval(encoder: Encoder, dataset: Dataset, seed=0, ridge=1e-3, train_frac=0.8, labels=None):
    """Top-1 accuracy of a ridge classifier on frozen embeddings (held-out split)."""
    y = dataset.labels if labels is None else np.asarray(labels)
    fit, held = split_indices(y.size, seed, train_frac)
    return ridge_accuracy(encoder.embed(dataset.points), y, fit, held, ridge)


def run_cell(dataset, loss_config, noise, seed, settings: TrainSettings, eval_seed=0):
    log = train_encoder(
        dataset,
        loss_config,
        settings.epochs,
        settings.batch_size,
        settings.step_size,
        noise,
        seed,
        settings.embed_dim,
        settings.augment_noise,
        settings.num_negatives,
        settings.momentum,
    )
    return linear_eval(log.encoder, dataset, eval_seed), log


def _map_cells(fn, cells, parallel):
    if not parallel:
        return [fn(c) for c in cells]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor() as ex:
        return list(ex.map(fn, cells))


def _tau_cell(args):
    dataset, tau, r, seed, settings = args
    acc, _ = run_cell(dataset, LossConfig(LossKind.INFONCE, tau=tau), NoiseConfig(r), seed, settings)
    return acc


DEFAULT_TAU_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))
DEFAULT_MU_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))


def tau_sweep(dataset, tau_grid=DEFAULT_TAU_GRID, r_grid=(0.0, 1.0), runs=3,
              settings=TrainSettings(), seed=0, parallel=False):
    """Mean/std linear-eval accuracy per (r, tau) cell and the best tau per r.

    Run ``k`` of every cell uses seed ``seed + k``, so cells differ only in
    their (r, tau) setting.
    """
    cells = [(dataset, tau, r, seed + k, settings) for r in r_grid for tau in tau_grid for k in range(runs)]
    accs = np.array(_map_cells(_tau_cell, cells, parallel)).reshape(len(r_grid), len(tau_grid), runs)
    mean, std = accs.mean(axis=2), accs.std(axis=2)
    table = [
        {"r": r, "tau": tau, "mean_acc": float(mean[i, j]), "std_acc": float(std[i, j])}
        for i, r in enumerate(r_grid)
        for j, tau in enumerate(tau_grid)
    ]
    best = {r: float(tau_grid[int(np.argmax(mean[i]))]) for i, r in enumerate(r_grid)}
    return {"table": table, "best_tau": best, "accuracy": accs}


def is_unimodal_or_plateau(means, stds):
    """No second peak beyond noise on either side of the best grid point.

    Walking away from the argmax, the curve may wiggle, but it never climbs
    more than one standard deviation above the lowest value seen so far.
    """
    means, stds = np.asarray(means, dtype=np.float64), np.asarray(stds, dtype=np.float64)
    k = int(np.argmax(means))
    for side in (range(k + 1, means.size), range(k - 1, -1, -1)):
        low = means[k]
        for i in side:
            if means[i] > low + stds[i]:
                return False
            low = min(low, means[i])
    return True


def variance_sweep(dataset, taus=(0.2, 1.0), settings=TrainSettings(), seed=0,
                   noise: NoiseConfig = NoiseConfig(1.0), last_frac=None):
    """Final-epoch average negative-score variance and positive mean per tau."""
    rows = []
    for tau in taus:
        _, log = run_cell(dataset, LossConfig(LossKind.INFONCE, tau=tau), noise, seed, settings)
        frac = 1.0 / settings.epochs if last_frac is None else last_frac
        rows.append(
            {
                "tau": tau,
                "neg_variance": log.tail_mean("neg_variance", frac),
                "pos_mean": log.tail_mean("pos_mean", frac),
                "neg_mean": log.tail_mean("neg_mean", frac),
            }
        )
    return rows


def best_over_grid(dataset, make_config, grid, seeds, noise, settings=TrainSettings()):
    """Accuracy per seed at the grid value with the best mean accuracy.

    Returns ``(best_value, per_seed_accuracies, mean_by_value)``.
    """
    accs = np.array(
        [[run_cell(dataset, make_config(v), noise, s, settings)[0] for s in seeds] for v in grid]
    )
    means = accs.mean(axis=1)
    k = int(np.argmax(means))
    return grid[k], accs[k], dict(zip(grid, means.tolist()))
