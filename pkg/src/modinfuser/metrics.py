"""Image-quality metrics, pack evaluation over all directed modality pairs, and PCA feature clouds."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
SIGMA = 1.5


def _pair(a, b, op):
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{op}: shapes differ, {a.shape} vs {b.shape}")
    return a, b


def l1(a, b) -> float:
    a, b = _pair(a, b, "l1")
    return float(np.abs(a - b).mean())


def psnr(a, b, peak: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``PSNR_CAP``."""
    a, b = _pair(a, b, "psnr")
    d = (a - b).ravel()
    mse = math.fsum(d * d) / d.size  # correctly rounded sum keeps closed-form cases exact
    if mse == 0.0:
        return PSNR_CAP
    return float(20.0 * np.log10(peak / np.sqrt(mse)))


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    """Normalised 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    k = taps.size
    rows = sliding_window_view(img, k, axis=-1) @ taps
    return sliding_window_view(rows, k, axis=-2) @ taps


def _ssim_maps(a, b, data_range, taps):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _filter_valid(a, taps)
    mu_b = _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a * mu_a
    var_b = _filter_valid(b * b, taps) - mu_b * mu_b
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def _as_image(x):
    x = np.squeeze(np.asarray(getattr(x, "data", x), dtype=np.float64))
    if x.ndim != 2:
        raise ValueError(f"expected a single 2-D image, got shape {x.shape}")
    return x


def ssim(a, b, data_range: float = 2.0, window: int = WINDOW, sigma: float = SIGMA) -> float:
    """Mean structural similarity over all fully-contained Gaussian windows."""
    a, b = _pair(_as_image(a), _as_image(b), "ssim")
    if min(a.shape) < window:
        raise ValueError(f"ssim: image {a.shape} smaller than the {window}x{window} window")
    lum, cs = _ssim_maps(a, b, data_range, gaussian_window(window, sigma))
    return float(np.mean(lum * cs))


def max_scales(shape, window: int = WINDOW) -> int:
    s = 0
    side = min(shape)
    while side >= window:
        s += 1
        side //= 2
    return s


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim(a, b, scales: int | None = None, weights=MS_SSIM_WEIGHTS, data_range: float = 2.0) -> float:
    """Multi-scale SSIM.

    Contrast-structure terms of the first ``scales - 1`` levels and the full SSIM
    of the coarsest level are combined as a weighted geometric product; negative
    terms are clamped to zero. ``scales=None`` uses as many levels as the image
    allows (an 11x11 window must fit), with the weight prefix renormalised.
    """
    a, b = _pair(_as_image(a), _as_image(b), "ms_ssim")
    available = max_scales(a.shape)
    scales = min(len(weights), available) if scales is None else scales
    if scales < 1 or scales > available:
        need = WINDOW * 2 ** (max(scales, 1) - 1)
        raise ValueError(f"ms_ssim: {scales} scales need images of at least {need}x{need}, got {a.shape}")
    w = np.asarray(weights[:scales], dtype=np.float64)
    w = w / w.sum()
    taps = gaussian_window()
    result = 1.0
    for level in range(scales):
        lum, cs = _ssim_maps(a, b, data_range, taps)
        term = np.mean(lum * cs) if level == scales - 1 else np.mean(cs)
        result *= max(float(term), 0.0) ** w[level]
        a, b = _downsample(a), _downsample(b)
    return float(result)


# pack evaluation ----------------------------------------------------------------

METRIC_NAMES = ("l1x1000", "psnr", "ssim", "msssim")


@dataclass
class MetricsReport:
    modalities: list[str]
    per_slice: dict[tuple[int, int], dict[str, np.ndarray]] = field(default_factory=dict)

    def pairs(self) -> list[tuple[int, int]]:
        return sorted(self.per_slice)

    def summary(self, pair) -> dict[str, tuple[float, float]]:
        vals = self.per_slice[pair]
        return {k: (float(np.mean(vals[k])), float(np.std(vals[k]))) for k in METRIC_NAMES}

    def grand(self) -> dict[str, tuple[float, float]]:
        pooled = {k: np.concatenate([self.per_slice[p][k] for p in self.pairs()]) for k in METRIC_NAMES}
        return {k: (float(np.mean(v)), float(np.std(v))) for k, v in pooled.items()}

    def rows(self) -> list[list]:
        out = []
        for a, b in self.pairs():
            s = self.summary((a, b))
            out.append([self.modalities[a], self.modalities[b], *[x for k in METRIC_NAMES for x in s[k]]])
        g = self.grand()
        out.append(["all", "all", *[x for k in METRIC_NAMES for x in g[k]]])
        return out

    header = ["source", "target", *[f"{k}_{s}" for k in METRIC_NAMES for s in ("mean", "std")]]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            for row in self.rows():
                w.writerow([*row[:2], *(repr(float(v)) for v in row[2:])])

    def write_per_slice_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "target", "slice", *METRIC_NAMES])
            for a, b in self.pairs():
                vals = self.per_slice[(a, b)]
                for i in range(len(vals["l1x1000"])):
                    w.writerow([self.modalities[a], self.modalities[b], i, *(repr(float(vals[k][i])) for k in METRIC_NAMES)])


def read_per_slice_csv(path) -> dict[tuple[str, str], dict[str, np.ndarray]]:
    out: dict[tuple[str, str], dict[str, list]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d = out.setdefault((row["source"], row["target"]), {k: [] for k in METRIC_NAMES})
            for k in METRIC_NAMES:
                d[k].append(float(row[k]))
    return {p: {k: np.array(v) for k, v in d.items()} for p, d in out.items()}


TranslateFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def as_translate_fn(model) -> TranslateFn:
    """Wrap a :class:`~modinfuser.model.Translator` (or pass a callable through)."""
    from . import tensor as T
    from .model import Translator

    if isinstance(model, Translator):

        def fn(x, targets):
            with T.no_grad():
                return model.translate(x, targets).data

        return fn
    return model


def identity_translate(x: np.ndarray, targets) -> np.ndarray:
    return np.asarray(x)


def evaluate_pack(model, pack, batch_size: int = 32) -> MetricsReport:
    """Translate every slice along every ordered modality pair and score it."""
    if len(pack) == 0:
        raise ValueError("evaluate_pack: empty pack")
    fn = as_translate_fn(model)
    m = pack.n_modalities
    report = MetricsReport(list(pack.modalities))
    for a in range(m):
        for b in range(m):
            if a == b:
                continue
            fakes = []
            for start in range(0, len(pack), batch_size):
                x = pack.images[start:start + batch_size, a:a + 1]
                fakes.append(np.asarray(fn(x, np.full(x.shape[0], b))).reshape(x.shape))
            fake = np.concatenate(fakes)[:, 0]
            real = pack.images[:, b]
            report.per_slice[(a, b)] = {
                "l1x1000": np.array([1000.0 * l1(f, r) for f, r in zip(fake, real)]),
                "psnr": np.array([psnr(f, r) for f, r in zip(fake, real)]),
                "ssim": np.array([ssim(f, r) for f, r in zip(fake, real)]),
                "msssim": np.array([ms_ssim(f, r) for f, r in zip(fake, real)]),
            }
    return report


# feature clouds -----------------------------------------------------------------


class DegenerateCloudError(ValueError):
    pass


@dataclass
class FeatureCloud:
    labels: list[str]
    mean: np.ndarray
    components: np.ndarray  # [dims, k], orthonormal columns
    explained_variance: np.ndarray
    explained_ratio: np.ndarray
    projected: np.ndarray  # [n, k]
    residual: float

    @property
    def coords2d(self) -> np.ndarray:
        return self.projected[:, :2]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "x", "y"])
            for lab, (x, y) in zip(self.labels, self.coords2d):
                w.writerow([lab, repr(float(x)), repr(float(y))])


def top_eigenpairs(cov: np.ndarray, k: int, tol: float = 1e-10, max_iter: int = 20000, oversample: int = 8, seed: int = 0):
    """Leading ``k`` eigenpairs of a symmetric PSD matrix by orthogonal iteration.

    A block of ``k + oversample`` vectors is iterated with a Rayleigh-Ritz
    rotation each sweep; stops once ``||C Q - Q diag(lam)||_F <= tol * ||C||_F``
    on the leading ``k`` columns. Returns ``(values, vectors, residual)``.
    """
    d = cov.shape[0]
    p = min(d, k + oversample)
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(d, p)))
    scale = np.linalg.norm(cov) or 1.0
    resid = np.inf
    for _ in range(max_iter):
        z = cov @ q
        small = q.T @ z
        vals, vecs = np.linalg.eigh((small + small.T) / 2)
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]
        q_rot = q @ vecs
        z_rot = z @ vecs
        resid = np.linalg.norm(z_rot[:, :k] - q_rot[:, :k] * vals[:k]) / scale
        if resid <= tol:
            q = q_rot
            break
        q, _ = np.linalg.qr(z_rot)
    # fix sign so the largest-magnitude entry of each component is positive
    vecs = q[:, :k]
    flip = np.sign(vecs[np.abs(vecs).argmax(axis=0), np.arange(k)])
    return np.clip(vals[:k], 0.0, None), vecs * np.where(flip == 0, 1.0, flip), float(resid)


def pca_project(rows, labels=None, out_dims: int = 50, tol: float = 1e-10) -> FeatureCloud:
    """Mean-centre ``rows [n, d]`` and project onto the top ``out_dims`` principal axes."""
    x = np.asarray(rows, dtype=np.float64)
    n, d = x.shape
    if n < out_dims:
        raise ValueError(f"pca_project: need at least {out_dims} rows, got {n}")
    k = min(out_dims, d)
    mean = x.mean(axis=0)
    xc = x - mean
    total = float((xc * xc).sum()) / n
    if total == 0.0:
        raise DegenerateCloudError("pca_project: all rows identical (zero variance)")
    cov = xc.T @ xc / n
    vals, vecs, resid = top_eigenpairs(cov, k, tol)
    return FeatureCloud(
        labels=list(labels) if labels is not None else [""] * n,
        mean=mean,
        components=vecs,
        explained_variance=vals,
        explained_ratio=vals / total,
        projected=xc @ vecs,
        residual=resid,
    )


def silhouette(points, labels) -> float:
    """Mean silhouette coefficient (Euclidean); singleton clusters score 0."""
    x = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least two clusters")
    dist = np.sqrt(np.maximum(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1), 0.0))
    scores = np.zeros(len(x))
    for i in range(len(x)):
        same = labels == labels[i]
        if same.sum() <= 1:
            continue
        a = dist[i, same].sum() / (same.sum() - 1)
        b = min(dist[i, labels == u].mean() for u in uniq if u != labels[i])
        scores[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


def linear_probe_accuracy(train_x, train_y, test_x, test_y, shrinkage: float = 0.1) -> float:
    """Test accuracy of a shrinkage linear discriminant fitted on the training rows.

    The pooled within-class covariance is blended with a scaled identity,
    ``(1 - s) * S + s * tr(S)/d * I``, which keeps it invertible when the
    feature dimension exceeds the number of rows.
    """
    x = np.asarray(train_x, dtype=np.float64)
    y = np.asarray(train_y)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes")
    priors = np.array([np.mean(y == c) for c in classes])
    means = np.stack([x[y == c].mean(axis=0) for c in classes])
    cov = sum(p * np.cov(x[y == c].T, bias=True).reshape(x.shape[1], x.shape[1]) for p, c in zip(priors, classes))
    d = cov.shape[0]
    cov = (1.0 - shrinkage) * cov + shrinkage * np.trace(cov) / d * np.eye(d)
    coef = np.linalg.solve(cov, means.T).T  # [classes, d]
    intercept = -0.5 * np.sum(coef * means, axis=1) + np.log(priors)
    scores = np.asarray(test_x, dtype=np.float64) @ coef.T + intercept
    return float(np.mean(classes[scores.argmax(axis=1)] == np.asarray(test_y)))


def conditioned_features(gen, pack, batch_size: int = 32) -> tuple[np.ndarray, list[str]]:
    """Flattened agnostic features plus one infused copy per target modality.

    Slice ``k`` is encoded from modality ``k mod M``. Returns rows
    ``[K*(M+1), C*h*w]`` and labels ``"agnostic"`` or the target's name.
    """
    from . import tensor as T

    if len(pack) == 0:
        raise ValueError("conditioned_features: empty pack")
    m = pack.n_modalities
    src = np.arange(len(pack)) % m
    rows, labels = [], []
    with T.no_grad():
        for start in range(0, len(pack), batch_size):
            idx = np.arange(start, min(start + batch_size, len(pack)))
            x = T.Tensor(pack.images[idx, src[idx]][:, None])
            f = gen.encode(x)
            per = [f.data.reshape(len(idx), -1)]
            per += [gen.infuse(f, np.full(len(idx), t)).data.reshape(len(idx), -1) for t in range(m)]
            for i in range(len(idx)):
                for j, block in enumerate(per):
                    rows.append(block[i])
                    labels.append("agnostic" if j == 0 else pack.modalities[j - 1])
    return np.asarray(rows), labels
