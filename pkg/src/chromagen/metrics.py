"""Inception Score, Frechet distance, and the classifier that feeds them.

The pretrained Inception network is replaced at desk scale by a small
CIFAR-10 classifier trained locally (:func:`train_surrogate_extractor`).
Scores computed with it are NOT comparable to published Inception Scores;
only orderings and trends between models evaluated with the same extractor
carry meaning. Anything implementing :class:`ExtractorContract` can be
plugged in instead.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Optional, Protocol, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from chromagen.data import NUM_CLASSES, LabeledImageSet, make_batches
from chromagen.errors import ExtractorError, NonFiniteError, NotPSDError, ShapeError

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
ROW_SUM_TOL = 1e-6
SYMMETRY_TOL = 1e-8
EIG_TOL = 1e-8
FID_CLAMP_TOL = 1e-6

SURROGATE_WARNING = (
    "IS/FID use a locally trained surrogate classifier, not the pretrained "
    "Inception network: absolute values are not comparable to published scores."
)


def _validate_probs(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise ShapeError(f"probability matrix must be N x K with N >= 1, got {p.shape}")
    if not np.isfinite(p).all() or p.min() < 0 or p.max() > 1:
        raise ValueError("probabilities must be finite and lie in [0, 1]")
    bad = np.abs(p.sum(1) - 1.0) > ROW_SUM_TOL
    if bad.any():
        i = int(np.argmax(bad))
        raise ValueError(f"row {i} sums to {p[i].sum():.9f}, not 1")
    return p


def _split_bounds(n: int, splits: int):
    size = n // splits
    for i in range(splits):
        start = i * size
        yield start, (n if i == splits - 1 else start + size)


def inception_score(p: np.ndarray, splits: int = 1) -> Tuple[float, float]:
    """``exp(mean_x KL(p(y|x) || p(y)))`` per split; returns (mean, population std).

    The last split absorbs the remainder when ``splits`` does not divide N.
    """
    p = _validate_probs(p)
    n, k = p.shape
    if splits < 1 or splits > n:
        raise ValueError(f"splits must lie in [1, {n}], got {splits}")
    scores = []
    for start, stop in _split_bounds(n, splits):
        part = p[start:stop]
        marginal = part.mean(0)
        kl = part * (np.log(np.maximum(part, LOG_FLOOR)) - np.log(np.maximum(marginal, LOG_FLOOR)))
        mean_kl = kl.sum(1).mean()
        # KL >= 0 and mean KL <= log K hold exactly; clip rounding only
        scores.append(float(np.exp(np.clip(mean_kl, 0.0, np.log(k)))))
    return float(np.mean(scores)), float(np.std(scores))


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric positive semi-definite matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected a square matrix, got {m.shape}")
    if not np.isfinite(m).all():
        raise NonFiniteError("matrix contains non-finite entries")
    scale = max(1.0, float(np.abs(m).max()) if m.size else 1.0)
    asym = float(np.abs(m - m.T).max()) if m.size else 0.0
    if asym > SYMMETRY_TOL * scale:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    floor = -EIG_TOL * max(1.0, float(np.abs(vals).max()) if vals.size else 1.0)
    if vals.size and vals.min() < floor:
        raise NotPSDError(
            f"matrix is not positive semi-definite: smallest eigenvalue {vals.min():.3e} "
            f"(tolerance {floor:.3e}, largest {vals.max():.3e})"
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _gaussian_fit(f: np.ndarray):
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeError(f"feature matrix must be N x D, got {f.shape}")
    if f.shape[0] < 2:
        raise ValueError("need at least 2 samples to estimate a covariance")
    if not np.isfinite(f).all():
        raise NonFiniteError("feature matrix contains non-finite values")
    mu = f.mean(0)
    centered = f - mu
    return mu, centered.T @ centered / (f.shape[0] - 1)


def frechet_distance(mu_x, sigma_x, mu_g, sigma_g) -> float:
    """``||mu_x - mu_g||^2 + Tr(Sx + Sg - 2 (Sx Sg)^(1/2))``.

    ``Tr((Sx Sg)^(1/2))`` is evaluated as ``Tr((Sx^(1/2) Sg Sx^(1/2))^(1/2))``,
    the square root of a symmetric PSD matrix with the same spectrum.
    """
    root_x = sqrtm_psd(sigma_x)
    inner = root_x @ sigma_g @ root_x
    cross = sqrtm_psd((inner + inner.T) / 2)
    diff = mu_x - mu_g
    value = float(diff @ diff + np.trace(sigma_x) + np.trace(sigma_g) - 2.0 * np.trace(cross))
    if value < 0:
        scale = max(1.0, float(np.trace(sigma_x) + np.trace(sigma_g)))
        if value < -FID_CLAMP_TOL * scale:
            raise NotPSDError(f"Frechet distance came out negative ({value:.3e})")
        value = 0.0
    return value


def fid(x: np.ndarray, g: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two N x D feature matrices."""
    x = np.asarray(x)
    g = np.asarray(g)
    if x.ndim != 2 or g.ndim != 2 or x.shape[1] != g.shape[1]:
        raise ShapeError(f"feature matrices disagree: {x.shape} vs {g.shape}")
    mu_x, sigma_x = _gaussian_fit(x)
    mu_g, sigma_g = _gaussian_fit(g)
    return frechet_distance(mu_x, sigma_x, mu_g, sigma_g)


class ExtractorContract(Protocol):
    num_classes: int
    feature_dim: int

    def probs(self, images: torch.Tensor) -> np.ndarray: ...

    def features(self, images: torch.Tensor) -> np.ndarray: ...


class SurrogateNet(nn.Module):
    """Small 10-way classifier over 64x64 inputs (pooled to 32x32 internally)."""

    feature_dim = 128

    def __init__(self, num_classes: int = NUM_CLASSES):
        super().__init__()

        def block(cin, cout):
            return [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]

        self.body = nn.Sequential(
            nn.AvgPool2d(2),
            *block(3, 32), *block(32, 32), nn.MaxPool2d(2),
            *block(32, 64), *block(64, 64), nn.MaxPool2d(2),
            *block(64, 128), nn.MaxPool2d(2),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.head = nn.Linear(self.feature_dim, num_classes)

    def forward(self, x):
        return self.head(self.body(x))

    def features(self, x):
        return self.body(x)


def surrogate_digest() -> str:
    import hashlib

    net = SurrogateNet()
    desc = repr(net) + str([tuple(p.shape) for p in net.parameters()])
    return hashlib.sha256(desc.encode()).hexdigest()[:12]


class Extractor:
    """Evaluation-mode wrapper satisfying :class:`ExtractorContract`."""

    def __init__(self, net: SurrogateNet, batch_size: int = 256):
        self.net = net.eval()
        self.batch_size = batch_size
        self.num_classes = net.head.out_features
        self.feature_dim = net.feature_dim
        self.test_accuracy: Optional[float] = None

    @torch.no_grad()
    def _run(self, images: torch.Tensor, fn) -> np.ndarray:
        self.net.eval()
        out = [fn(images[i:i + self.batch_size]) for i in range(0, len(images), self.batch_size)]
        return torch.cat(out).double().numpy()

    def probs(self, images: torch.Tensor) -> np.ndarray:
        p = self._run(images, lambda x: F.softmax(self.net(x).double(), dim=1))
        # renormalize in float64 so rows sum to 1 well within tolerance
        return p / p.sum(1, keepdims=True)

    def features(self, images: torch.Tensor) -> np.ndarray:
        return self._run(images, self.net.features)

    @torch.no_grad()
    def accuracy(self, data: LabeledImageSet) -> float:
        correct = 0
        for batch in make_batches(data, self.batch_size, shuffle=False):
            correct += int((self.net(batch.color).argmax(1) == batch.labels).sum())
        return correct / len(data)


def default_cache_dir() -> Path:
    return Path(os.environ.get("CHROMAGEN_CACHE", Path.home() / ".cache" / "chromagen"))


def extractor_cache_path(cache_dir, seed: int, train: LabeledImageSet) -> Path:
    return Path(cache_dir) / f"extractor-{surrogate_digest()}-s{seed}-{train.fingerprint()}.ckpt"


def load_cached_extractor(cache_dir, seed: int, train: LabeledImageSet) -> Optional[Extractor]:
    from chromagen.experiment_io import load_checkpoint

    path = extractor_cache_path(cache_dir, seed, train)
    if not path.exists():
        return None
    bundle = load_checkpoint(path)
    net = SurrogateNet()
    net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in bundle.networks["extractor"].items()})
    ext = Extractor(net)
    ext.test_accuracy = bundle.extra.get("test_accuracy")
    return ext


def train_surrogate_extractor(
    train: LabeledImageSet,
    test: LabeledImageSet,
    seed: int = 0,
    epochs: int = 8,
    batch_size: int = 128,
    lr: float = 1e-3,
    min_accuracy: float = 0.60,
    cache_dir=None,
) -> Extractor:
    """Train (or reload from cache) the surrogate classifier."""
    from chromagen.experiment_io import CheckpointBundle, save_checkpoint, state_to_numpy

    if len(train) == 0 or len(test) == 0:
        raise ExtractorError("extractor training needs non-empty train and test sets")
    if cache_dir is not None:
        cached = load_cached_extractor(cache_dir, seed, train)
        if cached is not None:
            log.info("loaded cached extractor (test accuracy %s)", cached.test_accuracy)
            return cached
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    net = SurrogateNet()
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for epoch in range(epochs):
        net.train()
        for batch in make_batches(train, batch_size, seed=seed, epoch=epoch):
            loss = F.cross_entropy(net(batch.color), batch.labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
    ext = Extractor(net)
    acc = ext.accuracy(test)
    ext.test_accuracy = acc
    log.info("surrogate extractor test accuracy %.3f", acc)
    if acc < min_accuracy:
        raise ExtractorError(
            f"surrogate extractor reached {acc:.3f} test accuracy after {epochs} epochs, "
            f"below the required {min_accuracy:.2f}; raise the epoch budget"
        )
    if cache_dir is not None:
        bundle = CheckpointBundle(
            model="extractor", epoch=epochs,
            networks={"extractor": state_to_numpy(net.state_dict())},
            config={"seed": seed, "epochs": epochs, "batch_size": batch_size, "lr": lr},
            extra={"test_accuracy": acc},
        )
        save_checkpoint(bundle, extractor_cache_path(cache_dir, seed, train))
    return ext


def score_images(extractor: ExtractorContract, images: torch.Tensor, splits: int = 1,
                 reference: Optional[torch.Tensor] = None) -> dict:
    """IS of ``images`` and, when ``reference`` is given, FID against it."""
    is_mean, is_std = inception_score(extractor.probs(images), splits)
    out = {"is_mean": is_mean, "is_std": is_std}
    if reference is not None:
        out["fid"] = fid(extractor.features(reference), extractor.features(images))
    return out
