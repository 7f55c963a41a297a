"""Embedding-space anomaly scores against a background reference set:
k-NN distance, cosine similarity, Mahalanobis distance and Gaussian-mixture
negative log-likelihood, plus ROC evaluation. Larger scores are more
anomalous for every metric."""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from . import kernels
from .downstream import auc_score, l2_rows, roc_curve
from .rng import stream

log = logging.getLogger(__name__)

METRICS = ("knn", "cosine", "mahalanobis", "gmm")
LOG_2PI = np.log(2.0 * np.pi)


class SingularCovarianceError(ValueError):
    pass


class GMMConvergenceError(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(f"{msg}; log-likelihood trace tail: {list(trace[-5:])}")
        self.trace = list(trace)


# ---------------------------------------------------------------------------
# gaussian mixture


@dataclass
class GaussianMixture:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    covariances: np.ndarray  # (K, d, d)
    log_likelihood: float = float("nan")
    trace: list = field(default_factory=list)
    n_iter: int = 0

    def component_log_density(self, x):
        """``log N(x | mu_k, Sigma_k)`` for every row and component, ``(n, K)``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty((len(x), len(self.weights)))
        d = x.shape[1]
        for k, (mu, cov) in enumerate(zip(self.means, self.covariances)):
            chol = linalg.cholesky(cov, lower=True)
            sol = linalg.solve_triangular(chol, (x - mu).T, lower=True)
            logdet = 2.0 * np.log(np.diag(chol)).sum()
            out[:, k] = -0.5 * ((sol**2).sum(axis=0) + logdet + d * LOG_2PI)
        return out

    def log_density(self, x):
        return special.logsumexp(self.component_log_density(x) + np.log(self.weights), axis=1)


def kmeans_pp(x, k, rng):
    """k-means++ seeding: first center uniform, the rest proportional to the
    squared distance to the nearest chosen center."""
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _m_step(x, resp, reg):
    nk = resp.sum(axis=0) + 10.0 * np.finfo(float).eps
    means = (resp.T @ x) / nk[:, None]
    d = x.shape[1]
    covs = np.empty((len(nk), d, d))
    for k in range(len(nk)):
        diff = x - means[k]
        covs[k] = (resp[:, k, None] * diff).T @ diff / nk[k] + reg * np.eye(d)
    return nk / nk.sum(), means, covs


def _em_once(x, k, rng, reg, tol, max_iter):
    seeds = kmeans_pp(x, k, rng)
    hard = kernels.pairwise_dist(x, seeds).argmin(axis=1)
    resp = np.eye(k)[hard]
    gm = GaussianMixture(*_m_step(x, resp, reg))
    trace = []
    for it in range(max_iter):
        logp = gm.component_log_density(x) + np.log(gm.weights)
        ll_rows = special.logsumexp(logp, axis=1)
        trace.append(float(ll_rows.sum()))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * abs(trace[-2]):
            gm.log_likelihood, gm.trace, gm.n_iter = trace[-1], trace, it
            return gm
        resp = np.exp(logp - ll_rows[:, None])
        gm.weights, gm.means, gm.covariances = _m_step(x, resp, reg)
    raise GMMConvergenceError(f"EM did not converge in {max_iter} iterations", trace)


def fit_gmm(x, n_components=4, seed=0, n_init=10, reg=1e-6, tol=1e-6, max_iter=500):
    """Full-covariance mixture by expectation-maximisation; the restart with
    the highest final log-likelihood wins."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < n_components:
        raise ValueError(f"need at least {n_components} points, got {len(x)}")
    best = None
    for r in range(n_init):
        gm = _em_once(x, n_components, stream(seed, "gmm", r), reg, tol, max_iter)
        if best is None or gm.log_likelihood > best.log_likelihood:
            best = gm
    return best


# ---------------------------------------------------------------------------
# reference set


@dataclass
class ReferenceSet:
    vectors: np.ndarray
    class_means: np.ndarray  # (C, d)
    covariance: np.ndarray  # tied, regularised
    gmm: GaussianMixture = None
    _chol: np.ndarray = None

    @property
    def size(self):
        return len(self.vectors)


def tied_covariance(x, labels, reg=1e-6):
    """Class means and the pooled within-class covariance (+ ``reg * I``)."""
    classes = np.unique(labels)
    means = np.array([x[labels == c].mean(axis=0) for c in classes])
    centered = x - means[np.searchsorted(classes, labels)]
    cov = centered.T @ centered / len(x)
    return means, cov + reg * np.eye(x.shape[1])


def fit_reference(vectors, labels=None, normalize=True, reg=1e-6, gmm_components=4, seed=0,
                  gmm_kwargs=None, fit_mixture=True):
    """Reference set from background embeddings.

    ``labels`` (background class ids) define the class-conditional Gaussians
    for the Mahalanobis score; without them a single class is used.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("reference set must be a non-empty matrix")
    if normalize:
        x = l2_rows(x)
    labels = np.zeros(len(x), dtype=np.int64) if labels is None else np.asarray(labels)
    means, cov = tied_covariance(x, labels, reg)
    try:
        chol = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularCovarianceError(
            "tied covariance is singular; fit with a positive regularisation (reg > 0)"
        ) from exc
    gm = fit_gmm(x, gmm_components, seed, **(gmm_kwargs or {})) if fit_mixture else None
    return ReferenceSet(x, means, cov, gm, chol)


# ---------------------------------------------------------------------------
# scores (one value per query row)


def _rows(z):
    return np.atleast_2d(np.asarray(z, dtype=np.float64))


def score_knn(z, ref, k=30):
    """Mean Euclidean distance to the ``k`` nearest reference vectors."""
    if ref.size == 0:
        raise ValueError("empty reference set")
    if not 0 < k <= ref.size:
        raise ValueError(f"k must be in [1, {ref.size}]")
    d = kernels.pairwise_dist(_rows(z), ref.vectors)
    return np.sort(np.partition(d, k - 1, axis=1)[:, :k], axis=1).mean(axis=1)


def score_cosine(z, ref, k=30, tau=0.05):
    """``-tau * log(mean(exp(sim / tau)))`` over the ``k`` most similar
    reference vectors (similarity = dot product of unit vectors)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if ref.size == 0:
        raise ValueError("empty reference set")
    if not 0 < k <= ref.size:
        raise ValueError(f"k must be in [1, {ref.size}]")
    sim = _rows(z) @ ref.vectors.T
    top = -np.partition(-sim, k - 1, axis=1)[:, :k]
    return -tau * (special.logsumexp(top / tau, axis=1) - np.log(k))


def score_mahalanobis(z, ref):
    """Minimum squared Mahalanobis distance to the class means under the
    tied covariance."""
    z = _rows(z)
    chol = ref._chol if ref._chol is not None else linalg.cholesky(ref.covariance, lower=True)
    best = np.full(len(z), np.inf)
    for mu in ref.class_means:
        sol = linalg.solve_triangular(chol, (z - mu).T, lower=True)
        best = np.minimum(best, (sol**2).sum(axis=0))
    return best


def score_gmm(z, ref):
    """Negative log-likelihood under the fitted mixture."""
    if ref.gmm is None:
        raise ValueError("reference set has no fitted mixture")
    return -ref.gmm.log_density(_rows(z))


def score_all(z, ref, metrics=METRICS, k=30, tau=0.05, normalize=True):
    z = l2_rows(z) if normalize else _rows(z)
    fns = {
        "knn": lambda: score_knn(z, ref, k),
        "cosine": lambda: score_cosine(z, ref, k, tau),
        "mahalanobis": lambda: score_mahalanobis(z, ref),
        "gmm": lambda: score_gmm(z, ref),
    }
    unknown = set(metrics) - set(fns)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}")
    return {m: fns[m]() for m in metrics}


# ---------------------------------------------------------------------------
# evaluation


def evaluate_anomaly(background, signals):
    """AUC of each signal class against the background, and of the pooled
    signals. ``signals`` maps a class name to its scores."""
    background = np.asarray(background, dtype=np.float64)
    if background.size == 0 or not signals or any(len(s) == 0 for s in signals.values()):
        raise ValueError("background and every signal set must be non-empty")
    out, rocs = {"per_signal": {}}, {}
    for name, s in signals.items():
        s = np.asarray(s, dtype=np.float64)
        scores = np.r_[background, s]
        sig = np.r_[np.zeros(len(background), bool), np.ones(len(s), bool)]
        rocs[name] = roc_curve(scores, sig)
        out["per_signal"][name] = rocs[name].auc
    pooled = np.concatenate([np.asarray(s, dtype=np.float64) for s in signals.values()])
    scores = np.r_[background, pooled]
    sig = np.r_[np.zeros(len(background), bool), np.ones(len(pooled), bool)]
    rocs["combined"] = roc_curve(scores, sig)
    out["combined"] = rocs["combined"].auc
    return out, rocs


def permutation_null(background, signal, n_perm=200, seed=0):
    """Mean and standard deviation of the AUC under shuffled labels."""
    scores = np.r_[background, signal]
    sig = np.r_[np.zeros(len(background), bool), np.ones(len(signal), bool)]
    rng = stream(seed, "reference", n_perm)
    aucs = np.array([auc_score(scores, rng.permutation(sig)) for _ in range(n_perm)])
    return float(aucs.mean()), float(aucs.std())
