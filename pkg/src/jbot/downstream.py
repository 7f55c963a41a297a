"""Frozen-embedding probes, layer-wise-decayed fine-tuning and classification
metrics (accuracy, one-vs-rest AUC, signal efficiency at fixed background
efficiency)."""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special, stats

from . import kernels
from . import tensor as T
from .network import add_classifier, as_tensors, classify, cls_embeddings, forward, init_params
from .optim import AdamW
from .rng import stream
from .tensor import Tensor

log = logging.getLogger(__name__)

EPS_B_DEFAULT = (1e-1, 1e-2)
LLRD_GRID = (0.6, 0.65, 0.7, 0.75, 0.8)
LR_GRID = (4e-5, 1e-4, 2e-4, 5e-4, 1e-3, 2e-3)


# ---------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    labels: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.labels):
            raise ValueError(f"vectors {self.vectors.shape} and labels {self.labels.shape} disagree")
        if not np.isfinite(self.vectors).all():
            raise ValueError("embedding rows must be finite")

    def __len__(self):
        return len(self.labels)

    def normalize(self):
        if self.normalized:
            return self
        return EmbeddingSet(l2_rows(self.vectors), self.labels, True)


def l2_rows(x, eps=1e-12):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), eps)


def embed_dataset(features, labels, arrays, net_cfg, batch_size=512):
    """Eval-mode student [CLS] embeddings (no augmentation, no masking)."""
    return EmbeddingSet(cls_embeddings(features, arrays, net_cfg, batch_size), labels)


def _vectors(x):
    # test-side inputs are consumed through their vectors only
    return x.vectors if isinstance(x, EmbeddingSet) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# probes


def knn_probe(train, test, k=30, n_classes=None, normalize=True):
    """k-NN vote over Euclidean distance.

    Returns ``(predictions, scores)``; ``scores[i, c]`` is the fraction of the
    ``k`` nearest training rows with label ``c``. Neighbour ties are broken
    by training-row order and prediction ties by the lowest class id.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    ref, y = train.vectors, train.labels
    if len(ref) == 0:
        raise ValueError("empty training set")
    if k > len(ref):
        raise ValueError(f"k={k} exceeds training size {len(ref)}")
    q = _vectors(test)
    if normalize:
        ref, q = l2_rows(ref), l2_rows(q)
    n_classes = int(n_classes or y.max() + 1)
    scores = np.zeros((len(q), n_classes))
    for s in range(0, len(q), 1024):
        d = kernels.pairwise_dist(q[s : s + 1024], ref)
        nn = np.argsort(d, axis=1, kind="stable")[:, :k]
        for c in range(n_classes):
            scores[s : s + 1024, c] = (y[nn] == c).sum(axis=1)
    scores /= k
    return scores.argmax(axis=1), scores


def _softmax_loss(w_flat, x, onehot, l2):
    n, d = x.shape
    c = onehot.shape[1]
    w = w_flat.reshape(d + 1, c)
    z = x @ w[:-1] + w[-1]
    lse = special.logsumexp(z, axis=1)
    loss = (lse - (z * onehot).sum(axis=1)).mean() + 0.5 * l2 * (w[:-1] ** 2).sum()
    p = np.exp(z - lse[:, None])
    gz = (p - onehot) / n
    grad = np.vstack([x.T @ gz + l2 * w[:-1], gz.sum(axis=0)])
    return loss, grad.ravel()


@dataclass
class LinearModel:
    weights: np.ndarray  # (d, classes)
    bias: np.ndarray
    normalize: bool
    converged: bool
    n_iter: int

    def scores(self, x):
        x = _vectors(x)
        if self.normalize:
            x = l2_rows(x)
        return special.softmax(x @ self.weights + self.bias, axis=1)


def fit_linear(train, n_classes=None, l2=1e-4, normalize=True, max_iter=5000, tol=1e-10):
    """Multinomial logistic regression by L-BFGS on frozen features."""
    x, y = _vectors(train), train.labels
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("linear probe needs at least two classes in the training set")
    if normalize:
        x = l2_rows(x)
    n_classes = int(n_classes or y.max() + 1)
    onehot = np.eye(n_classes)[y]
    w0 = np.zeros((x.shape[1] + 1) * n_classes)
    res = optimize.minimize(
        _softmax_loss, w0, args=(x, onehot, l2), jac=True, method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0},
    )
    w = res.x.reshape(x.shape[1] + 1, n_classes)
    return LinearModel(w[:-1], w[-1], normalize, bool(res.success), int(res.nit))


def linear_probe(train, test, n_classes=None, l2=1e-4, normalize=True):
    """Fit on ``train`` and return ``(predictions, softmax scores)`` for ``test``."""
    model = fit_linear(train, n_classes, l2, normalize)
    scores = model.scores(test)
    return scores.argmax(axis=1), scores


# ---------------------------------------------------------------------------
# fine-tuning


def llrd_depth(name, n_blocks):
    """Distance of a parameter from the classifier head: head 0, last block 1,
    ..., first block ``n_blocks``, tokenizer ``n_blocks + 1``. The final layer
    norm travels with the last block."""
    if name.startswith("clf."):
        return 0
    if name.startswith("blocks."):
        return n_blocks - int(name.split(".")[1])
    if name.startswith("norm."):
        return 1
    if name.startswith("proj."):
        return None  # unused downstream
    return n_blocks + 1


def llrd_scales(names, n_blocks, decay):
    if not 0.0 <= decay <= 1.0:
        raise ValueError("llrd decay must be in [0, 1]")
    out = {}
    for name in names:
        depth = llrd_depth(name, n_blocks)
        out[name] = 0.0 if depth is None else decay**depth
    return out


def lr_table(n_blocks, base_lr, decay):
    """Rows ``(group, depth, lr)`` from the head down to the tokenizer."""
    rows = [("head", 0, base_lr)]
    for depth in range(1, n_blocks + 1):
        rows.append((f"block.{n_blocks - depth}", depth, base_lr * decay**depth))
    rows.append(("tokenizer", n_blocks + 1, base_lr * decay ** (n_blocks + 1)))
    return rows


def format_lr_table(rows):
    return "\n".join(f"{g:<10} depth={d}  lr={lr:.6g}" for g, d, lr in rows)


@dataclass(frozen=True)
class FinetuneConfig:
    base_lr: float = 1e-3
    llrd_decay: float = 0.7
    epochs: int = 20
    batch_size: int = 64
    weight_decay: float = 1e-4
    log_clamp: float = 1e-12


def _cross_entropy(logits, labels, clamp):
    p = T.softmax(logits)
    onehot = np.eye(logits.shape[1])[labels]
    return -T.sum_(T.log(p, clamp) * Tensor(onehot, dtype=p.dtype)) * (1.0 / len(labels))


def finetune(arrays, net_cfg, features, labels, n_classes, cfg=FinetuneConfig(), seed=0, from_scratch=False):
    """Attach a classifier head and train end-to-end with cross-entropy.

    ``arrays`` is a pre-trained student (ignored when ``from_scratch``, which
    re-initialises the encoder and uses one learning rate for every group).
    Returns ``(params, history)``.
    """
    features, labels = np.asarray(features), np.asarray(labels, dtype=np.int64)
    if from_scratch:
        params = init_params(net_cfg, stream(seed, "finetune", 1), dtype=np.float32)
        decay = 1.0
    else:
        params = {k: v.copy() for k, v in arrays.items()}
        decay = cfg.llrd_decay
    params = {k: v for k, v in params.items() if not k.startswith(("proj.", "clf."))}
    add_classifier(params, net_cfg, n_classes, stream(seed, "finetune", 0))
    scales = llrd_scales(params, net_cfg.n_blocks, decay)
    opt = AdamW(params, cfg.weight_decay, lr_scale=scales)
    n = len(features)
    batch = min(cfg.batch_size, n)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = stream(seed, "finetune", 2, epoch).permutation(n)
        for s in range(0, n - batch + 1, batch):
            idx = order[s : s + batch]
            p = as_tensors(params, requires_grad=True)
            emb = forward(features[idx], None, p, net_cfg, train=True, rng=stream(seed, "dropout", 1 << 20, step))
            loss = _cross_entropy(classify(emb[:, 0], p), labels[idx], cfg.log_clamp)
            T.backward(loss)
            opt.step({k: t.grad for k, t in p.items() if t.grad is not None}, cfg.base_lr)
            history.append(loss.item())
            step += 1
    return params, history


def predict_proba(params, net_cfg, features, batch_size=512):
    p = as_tensors(params, requires_grad=False)
    out = []
    with T.no_grad():
        for s in range(0, len(features), batch_size):
            emb = forward(features[s : s + batch_size], None, p, net_cfg)
            out.append(special.softmax(classify(emb[:, 0], p).data.astype(np.float64), axis=1))
    return np.concatenate(out, axis=0)


def finetune_grid(arrays, net_cfg, train, val, n_classes, decays=LLRD_GRID, lrs=LR_GRID,
                  base=FinetuneConfig(), seed=0, from_scratch=False):
    """Fine-tune at every (decay, lr) grid point and keep the best validation
    accuracy. ``train``/``val`` are ``(features, labels)`` pairs. Returns
    ``(best_params, best_config, rows)`` where rows record every grid point."""
    from dataclasses import replace

    best = None
    rows = []
    for decay in ((1.0,) if from_scratch else decays):
        for lr in lrs:
            cfg = replace(base, base_lr=lr, llrd_decay=decay)
            params, _ = finetune(arrays, net_cfg, train[0], train[1], n_classes, cfg, seed, from_scratch)
            acc = accuracy(predict_proba(params, net_cfg, val[0]).argmax(axis=1), val[1])
            rows.append({"llrd_decay": decay, "base_lr": lr, "val_accuracy": acc})
            if best is None or acc > best[0]:
                best = (acc, params, cfg)
    return best[1], best[2], rows


# ---------------------------------------------------------------------------
# metrics


@dataclass
class RocCurve:
    thresholds: np.ndarray
    eps_s: np.ndarray
    eps_b: np.ndarray
    auc: float


def accuracy(pred, labels):
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float((pred == labels).mean()) if len(labels) else float("nan")


def auc_score(scores, is_signal):
    """Mann-Whitney AUC with mid-ranks (ties count one half).

    Returns ``None`` when either class is absent.
    """
    scores = np.asarray(scores, dtype=np.float64)
    sig = np.asarray(is_signal, dtype=bool)
    n_s, n_b = int(sig.sum()), int((~sig).sum())
    if n_s == 0 or n_b == 0:
        return None
    ranks = stats.rankdata(scores)
    u = ranks[sig].sum() - n_s * (n_s + 1) / 2.0
    return float(u / (n_s * n_b))


def roc_curve(scores, is_signal):
    """Operating points at every distinct threshold, from strictest to loosest.

    The first point is (0, 0) at threshold +inf; at threshold ``t`` a jet is
    accepted when ``score >= t``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    sig = np.asarray(is_signal, dtype=bool)
    n_s, n_b = sig.sum(), (~sig).sum()
    if n_s == 0 or n_b == 0:
        raise ValueError("ROC needs both signal and background")
    order = np.argsort(-scores, kind="stable")
    s_sorted, sig_sorted = scores[order], sig[order]
    tp = np.cumsum(sig_sorted)
    fp = np.cumsum(~sig_sorted)
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    thr = np.r_[np.inf, s_sorted[last]]
    eps_s = np.r_[0.0, tp[last] / n_s]
    eps_b = np.r_[0.0, fp[last] / n_b]
    return RocCurve(thr, eps_s, eps_b, auc_score(scores, sig))


def eps_s_at(roc, eps_b, method="interp"):
    """Signal efficiency at background efficiency ``eps_b``.

    ``interp`` reads the piecewise-linear ROC; ``step`` takes the best
    operating point whose background efficiency does not exceed ``eps_b``.
    """
    fpr, tpr = roc.eps_b, roc.eps_s
    if method == "step":
        return float(tpr[fpr <= eps_b].max())
    if method != "interp":
        raise ValueError(f"unknown method {method!r}")
    i = int(np.searchsorted(fpr, eps_b, side="right")) - 1
    if i >= len(fpr) - 1:
        return float(tpr[-1])
    x0, x1 = fpr[i], fpr[i + 1]
    if x1 == x0:
        return float(tpr[i + 1])
    return float(tpr[i] + (tpr[i + 1] - tpr[i]) * (eps_b - x0) / (x1 - x0))


def classification_metrics(scores, labels, class_names=None, eps_b=EPS_B_DEFAULT):
    """Accuracy, one-vs-rest AUC per class and signal efficiency at each
    requested background efficiency. Classes absent from ``labels`` get
    ``None`` entries."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = scores.shape[1]
    names = list(class_names) if class_names is not None else [str(c) for c in range(n_classes)]
    out = {"accuracy": accuracy(scores.argmax(axis=1), labels), "auc": {}, "eps_s": {}, "n": int(len(labels))}
    rocs = {}
    for c in range(n_classes):
        sig = labels == c
        name = names[c]
        if not sig.any() or sig.all():
            out["auc"][name] = None
            out["eps_s"][name] = {f"{e:g}": None for e in eps_b}
            continue
        roc = roc_curve(scores[:, c], sig)
        rocs[name] = roc
        out["auc"][name] = roc.auc
        out["eps_s"][name] = {f"{e:g}": eps_s_at(roc, e) for e in eps_b}
    return out, rocs


def project2d(vectors):
    """First two principal components of the rows (PCA via SVD)."""
    x = np.asarray(vectors, dtype=np.float64)
    x = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:2]
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    return x @ (comps * signs[:, None]).T
