"""Particle tokenizer, pre-norm transformer encoder, projection and classifier
heads.

Parameters live in a flat ``{name: ndarray}`` mapping (see
:func:`init_params`); forward functions take a mapping of :class:`Tensor`
objects so the same code serves the student (leaves requiring grad) and the
teacher (plain constants).
"""
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import tensor as T
from .jetdata import D_FEAT, N_PARTICLES, VALID, Jet
from .tensor import Tensor


@dataclass(frozen=True)
class NetworkConfig:
    d_model: int = 32
    n_blocks: int = 2
    n_heads: int = 4
    d_feat: int = D_FEAT
    n_particles: int = N_PARTICLES
    dropout: float = 0.2
    final_norm: bool = True
    d_ff: int = 0  # 0 -> 4 * d_model
    d_proj: int = 0  # 0 -> d_model // 2
    init_std: float = 0.02
    init: str = "glorot"  # dense weights: "glorot" (uniform) or "trunc_normal"
    # l2-normalised bottleneck feeding a weight-normalised output layer
    proj_norm: bool = True
    # fixed per-feature multipliers applied before the token embedding;
    # None means "fit on the pre-training data" (see fit_feature_scale)
    feature_scale: tuple = None
    # standard deviation the fitted scale gives the angles and pt_rel
    input_spread: float = 2.0

    def __post_init__(self):
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.d_proj == 0:
            object.__setattr__(self, "d_proj", self.d_model // 2)
        for f in ("d_model", "n_blocks", "n_heads", "d_feat", "n_particles", "d_ff", "d_proj"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.head_dim <= 0:
            raise ValueError("n_heads exceeds d_model")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.feature_scale is not None:
            object.__setattr__(self, "feature_scale", tuple(float(v) for v in self.feature_scale))
            if len(self.feature_scale) != self.d_feat or min(self.feature_scale) <= 0:
                raise ValueError("feature_scale needs d_feat positive entries")
        if self.input_spread <= 0:
            raise ValueError("input_spread must be positive")
        if self.init not in ("glorot", "trunc_normal"):
            raise ValueError(f"unknown init {self.init!r}")

    @property
    def head_dim(self):
        # floor(d_model / n_heads); the output projection maps back to d_model
        return self.d_model // self.n_heads

    @property
    def proj_hidden(self):
        return (8 * self.d_proj, self.d_proj)

    @property
    def clf_hidden(self):
        return (2 * self.d_model, self.d_model)

    @classmethod
    def preset(cls, name, **overrides):
        presets = {
            "small": dict(d_model=32, n_blocks=2, n_heads=4),
            "base": dict(d_model=64, n_blocks=4, n_heads=6),
        }
        if name not in presets:
            raise ValueError(f"unknown preset {name!r}")
        return cls(**{**presets[name], **overrides})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def fit_feature_scale(features, spread=1.0):
    """Input multipliers from data: one shared ``spread/std`` for the two
    angular coordinates (keeps rotations isotropic), ``spread/std`` for
    pt_rel, and 1 for the validity flag. Statistics use valid particles only."""
    features = np.asarray(features)
    valid = features[..., VALID] > 0.5
    ang = np.concatenate([features[..., 0][valid], features[..., 1][valid]])
    pt = features[..., 2][valid]
    s_ang = spread / max(float(ang.std()), 1e-6)
    s_pt = spread / max(float(pt.std()), 1e-6)
    return (s_ang, s_ang, s_pt) + (1.0,) * (features.shape[-1] - 3)


def resolve_feature_scale(cfg, features):
    """``cfg`` with a concrete ``feature_scale`` (fitted when unset)."""
    if cfg.feature_scale is not None:
        return cfg
    return replace(cfg, feature_scale=fit_feature_scale(features, cfg.input_spread))


# ---------------------------------------------------------------------------
# parameters


def _trunc_normal(rng, shape, std):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _dense_weight(cfg, rng, n_in, n_out):
    if cfg.init == "glorot":
        limit = math.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-limit, limit, size=(n_in, n_out))
    return _trunc_normal(rng, (n_in, n_out), cfg.init_std)


def init_params(cfg, rng, n_classes=0, dtype=np.float32):
    """Fresh parameters: Glorot-uniform (or truncated normal) dense weights,
    truncated normal (std ``cfg.init_std``) [CLS]/[MASK] tokens, zero biases,
    unit layer-norm gains. ``n_classes > 0`` adds a classifier head."""
    d, inner = cfg.d_model, cfg.n_heads * cfg.head_dim
    p = {}

    def dense(name, n_in, n_out):
        p[name + ".w"] = _dense_weight(cfg, rng, n_in, n_out)
        p[name + ".b"] = np.zeros(n_out)

    def ln(name, n):
        p[name + ".g"] = np.ones(n)
        p[name + ".b"] = np.zeros(n)

    dense("embed", cfg.d_feat, d)
    p["cls_token"] = _trunc_normal(rng, (d,), cfg.init_std)
    p["mask_token"] = _trunc_normal(rng, (d,), cfg.init_std)
    for i in range(cfg.n_blocks):
        b = f"blocks.{i}"
        ln(b + ".ln1", d)
        dense(b + ".attn.qkv", d, 3 * inner)
        dense(b + ".attn.out", inner, d)
        ln(b + ".ln2", d)
        dense(b + ".ff1", d, cfg.d_ff)
        dense(b + ".ff2", cfg.d_ff, d)
    if cfg.final_norm:
        ln("norm", d)
    h1, h2 = cfg.proj_hidden
    dense("proj.0", d, h1)
    dense("proj.1", h1, h2)
    dense("proj.2", h2, cfg.d_proj)
    if n_classes:
        add_classifier(p, cfg, n_classes, rng)
    return {k: v.astype(dtype) for k, v in p.items()}


def add_classifier(p, cfg, n_classes, rng):
    """Attach (in place) a fresh ``clf.*`` head: d_model -> 2d -> d -> classes."""
    h1, h2 = cfg.clf_hidden
    dtype = p["embed.w"].dtype
    for name, n_in, n_out in (("clf.0", cfg.d_model, h1), ("clf.1", h1, h2), ("clf.2", h2, n_classes)):
        p[name + ".w"] = _dense_weight(cfg, rng, n_in, n_out).astype(dtype)
        p[name + ".b"] = np.zeros(n_out, dtype=dtype)
    return p


def param_group(name):
    """Coarse module of a parameter: ``tokenizer``, ``block.<i>``, ``norm``,
    ``proj`` or ``clf``."""
    if name.startswith("blocks."):
        return "block." + name.split(".")[1]
    if name in ("embed.w", "embed.b", "cls_token", "mask_token"):
        return "tokenizer"
    return name.split(".")[0]


def decays_weight(name):
    """Weight decay applies to dense weight matrices only."""
    return name.endswith(".w")


def as_tensors(arrays, requires_grad):
    return {k: Tensor(v, requires_grad=requires_grad, dtype=v.dtype) for k, v in arrays.items()}


# ---------------------------------------------------------------------------
# forward


def tokenize(features, mask, p, cfg=None):
    """Token matrix ``(B, n+1, d)`` and validity ``(B, n+1)``.

    Row 0 is the [CLS] token; particle rows are the linear embedding of the
    features (times ``cfg.feature_scale``), replaced by the [MASK] token where
    ``mask`` is set.
    """
    features = np.asarray(features)
    single = features.ndim == 2
    if single:
        features = features[None]
        mask = None if mask is None else np.asarray(mask)[None]
    valid = features[..., VALID] > 0.5
    dtype = p["embed.w"].dtype
    if cfg is not None and cfg.feature_scale is not None:
        features = features * np.asarray(cfg.feature_scale)
    x = T.matmul(Tensor(features, dtype=dtype), p["embed.w"]) + p["embed.b"]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != valid.shape:
            raise T.ShapeError("tokenize", valid.shape, mask.shape)
        if (mask & ~valid).any():
            raise ValueError("tokenize: mask selects a padded slot")
        if mask.any():
            x = T.masked_fill(x, mask, p["mask_token"])
    b = features.shape[0]
    cls = T.broadcast_to(p["cls_token"], (b, 1, p["cls_token"].shape[0]))
    tokens = T.concat([cls, x], axis=1)
    validity = np.concatenate([np.ones((b, 1), dtype=bool), valid], axis=1)
    if single:
        return tokens[0], validity[0]
    return tokens, validity


def _block(x, validity, p, i, cfg, train, rng, want_attention):
    b, t, d = x.shape
    hd, nh = cfg.head_dim, cfg.n_heads
    pre = f"blocks.{i}"
    h = T.layer_norm(x, p[pre + ".ln1.g"], p[pre + ".ln1.b"])
    qkv = T.matmul(h, p[pre + ".attn.qkv.w"]) + p[pre + ".attn.qkv.b"]
    qkv = qkv.reshape(b, t, 3, nh, hd).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd))
    att = T.softmax(scores, mask=validity[:, None, None, :])
    o = T.matmul(att, v).permute(0, 2, 1, 3).reshape(b, t, nh * hd)
    o = T.matmul(o, p[pre + ".attn.out.w"]) + p[pre + ".attn.out.b"]
    x = x + T.dropout(o, cfg.dropout, rng, train)
    h = T.layer_norm(x, p[pre + ".ln2.g"], p[pre + ".ln2.b"])
    h = T.gelu(T.matmul(h, p[pre + ".ff1.w"]) + p[pre + ".ff1.b"])
    h = T.matmul(h, p[pre + ".ff2.w"]) + p[pre + ".ff2.b"]
    x = x + T.dropout(h, cfg.dropout, rng, train)
    return x, (att.data if want_attention else None)


def encode(tokens, validity, p, cfg, train=False, rng=None, return_attention=False):
    """Contextual embeddings ``(B, n+1, d)``.

    Padded tokens are excluded as attention keys. Dropout is active only when
    ``train`` is true (and then needs ``rng``). With ``return_attention`` the
    last block's attention probabilities ``(B, heads, n+1, n+1)`` are returned
    as a second value.
    """
    single = tokens.ndim == 2
    if single:
        tokens = tokens.reshape(1, *tokens.shape)
        validity = np.asarray(validity)[None]
    if train and cfg.dropout > 0 and rng is None:
        raise ValueError("encode: train mode with dropout needs an rng")
    x, att = tokens, None
    for i in range(cfg.n_blocks):
        x, att = _block(x, validity, p, i, cfg, train, rng, return_attention and i == cfg.n_blocks - 1)
    if cfg.final_norm:
        x = T.layer_norm(x, p["norm.g"], p["norm.b"])
    if single:
        x = x[0]
        att = None if att is None else att[0]
    return (x, att) if return_attention else x


def _mlp(x, p, prefix, n_layers):
    for i in range(n_layers):
        x = T.matmul(x, p[f"{prefix}.{i}.w"]) + p[f"{prefix}.{i}.b"]
        if i < n_layers - 1:
            x = T.gelu(x)
    return x


def project(embeddings, p, normalized=True):
    """Shared projection head applied row-wise: d -> 8 d_proj -> d_proj -> d_proj.

    With ``normalized`` the d_proj bottleneck is l2-normalised and the output
    layer uses unit-norm weight columns, so logits are bounded cosines (plus
    bias) and cannot shrink towards a uniform softmax.
    """
    x = embeddings
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, x.shape[0])
    if normalized:
        h = T.gelu(T.matmul(x, p["proj.0.w"]) + p["proj.0.b"])
        h = T.l2_normalize(T.matmul(h, p["proj.1.w"]) + p["proj.1.b"])
        w = T.transpose(T.l2_normalize(T.transpose(p["proj.2.w"])))
        out = T.matmul(h, w) + p["proj.2.b"]
    else:
        out = _mlp(x, p, "proj", 3)
    return out.reshape(out.shape[-1]) if squeeze else out


def classify(cls_embeddings, p):
    """Classifier head logits from [CLS] embeddings."""
    return _mlp(cls_embeddings, p, "clf", 3)


def forward(features, mask, p, cfg, train=False, rng=None):
    """tokenize -> encode; returns the full embedding tensor ``(B, n+1, d)``."""
    tokens, validity = tokenize(features, mask, p, cfg)
    return encode(tokens, validity, p, cfg, train, rng)


def cls_embeddings(features, arrays, cfg, batch_size=512):
    """Eval-mode [CLS] embeddings as a float64 array ``(num_jets, d_model)``."""
    p = as_tensors(arrays, requires_grad=False)
    out = []
    with T.no_grad():
        for s in range(0, len(features), batch_size):
            emb = forward(features[s : s + batch_size], None, p, cfg)
            out.append(emb.data[:, 0].astype(np.float64))
    if not out:
        return np.zeros((0, cfg.d_model))
    return np.concatenate(out, axis=0)


def extract_cls_attention(j, arrays, cfg):
    """Last-block attention of the [CLS] query over particle keys,
    ``(heads, n_particles)``.

    The [CLS]->[CLS] weight is dropped and each head is renormalised over the
    valid particles; padded slots report 0.
    """
    x = j.particles if isinstance(j, Jet) else np.asarray(j)
    p = as_tensors(arrays, requires_grad=False)
    with T.no_grad():
        tokens, validity = tokenize(x[None], None, p, cfg)
        _, att = encode(tokens, validity, p, cfg, return_attention=True)
    w = att[0, :, 0, 1:].astype(np.float64)
    w = np.where(validity[0, 1:][None], w, 0.0)
    return w / w.sum(axis=1, keepdims=True)
