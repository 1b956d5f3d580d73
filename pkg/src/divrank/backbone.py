"""Point-wise scorer f(u, i) over shared embedding tables.

A compact MLP with explicit user*item and user*category cross features
stands in for a full cross-network: the properties downstream code relies
on are the shared bottom embeddings and a point-wise probability score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import ParamStore, Tensor


class ConfigError(ValueError):
    pass


class VocabError(KeyError):
    pass


@dataclass
class TrainConfig:
    d: int = 16
    lr: float = 0.5
    batch_size: int = 8
    lam: float = 0.1            # teacher accuracy/diversity trade-off
    gamma: float = 0.1          # inference fusion weight
    beta1: float = 1.0          # KD loss weight
    beta2: float = 0.1          # InfoNCE loss weight
    k: int = 8                  # context sample size per side
    K_teacher: int | None = None  # None -> ceil(0.2 * N) per request
    tau_start: float = 1.0
    tau_end: float = 0.05
    tau_decay: float = 0.85
    infonce_t: float = 0.2
    dropout: float = 0.25
    patience: int = 10
    warm_epochs: int = 3
    joint_epochs: int = 30
    eval_fraction: float = 1.0 / 6.0
    max_context_pool: int = 40  # serving-time cap on the attention pool
    emb_init_scale: float = 0.1
    seed: int = 0

    def validate(self):
        if self.d <= 0:
            raise ConfigError("d must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        for name in ("lam", "gamma", "beta1", "beta2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not (self.tau_start >= self.tau_end > 0):
            raise ConfigError("need tau_start >= tau_end > 0")
        if not (0.0 < self.tau_decay <= 1.0):
            raise ConfigError("tau_decay must be in (0, 1]")
        if self.infonce_t <= 0:
            raise ConfigError("infonce_t must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.warm_epochs < 0 or self.joint_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not (0.0 < self.eval_fraction < 1.0):
            raise ConfigError("eval_fraction must be in (0, 1)")
        if self.max_context_pool < 2 * self.k + 1:
            raise ConfigError("max_context_pool must be >= 2k + 1")
        if self.emb_init_scale <= 0:
            raise ConfigError("emb_init_scale must be positive")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, obj):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**obj).validate()


def hidden_sizes(d: int):
    return 4 * d, 2 * d


def init_backbone(params: ParamStore, n_items, n_cats, n_users, d, rng,
                  emb_scale: float = 0.1):
    """Install freshly initialized backbone tables and scorer weights.

    emb_scale sets the embedding table std; it controls how sharply the
    interest similarity sigma((e_i*u).(e_j*u)) can discriminate, since
    the pairwise dot products scale with the fourth power of the entry
    magnitude.
    """
    h1, h2 = hidden_sizes(d)
    params.add("item_emb", emb_scale * rng.standard_normal((n_items, d)))
    params.add("cat_emb", emb_scale * rng.standard_normal((n_cats, d)))
    params.add("user_emb", emb_scale * rng.standard_normal((n_users, d)))
    for name, (fan_in, fan_out) in (("mlp_w1", (5 * d, h1)),
                                    ("mlp_w2", (h1, h2)),
                                    ("mlp_w3", (h2, 1))):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        params.add(name, rng.uniform(-lim, lim, size=(fan_in, fan_out)))
    params.add("mlp_b1", np.zeros(h1))
    params.add("mlp_b2", np.zeros(h2))
    params.add("mlp_b3", np.zeros(1))


BACKBONE_PARAM_NAMES = ("item_emb", "cat_emb", "user_emb",
                        "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
                        "mlp_w3", "mlp_b3")


def score_logits(P, user_idx, item_idx, cat_idx, *, training=False,
                 dropout=0.0, rng=None):
    """Batched scorer logits on whatever tape P's tensors live on.

    P maps parameter name -> Tensor; index arrays are plain integer arrays.
    """
    n = len(item_idx)
    eu = ad.gather_rows(P["user_emb"], np.full(n, user_idx, dtype=np.int64))
    ei = ad.gather_rows(P["item_emb"], np.asarray(item_idx, dtype=np.int64))
    ec = ad.gather_rows(P["cat_emb"], np.asarray(cat_idx, dtype=np.int64))
    x = ad.concat([eu, ei, ec, ad.mul(eu, ei), ad.mul(eu, ec)], axis=1)
    h = ad.relu(ad.add(ad.matmul(x, P["mlp_w1"]), P["mlp_b1"]))
    h = ad.dropout(h, dropout, rng, training)
    h = ad.relu(ad.add(ad.matmul(h, P["mlp_w2"]), P["mlp_b2"]))
    h = ad.dropout(h, dropout, rng, training)
    z = ad.add(ad.matmul(h, P["mlp_w3"]), P["mlp_b3"])
    return ad.reshape(z, (n,))


def score_probs(P, user_idx, item_idx, cat_idx, **kw):
    return ad.sigmoid(score_logits(P, user_idx, item_idx, cat_idx, **kw))


def score_all_detached(params: ParamStore, user_idx, item_idx, cat_idx):
    """Fast eval-mode scoring: pure numpy, no tape, dropout off."""
    n = len(item_idx)
    eu = np.broadcast_to(params["user_emb"][user_idx], (n, params["user_emb"].shape[1]))
    ei = params["item_emb"][np.asarray(item_idx, dtype=np.int64)]
    ec = params["cat_emb"][np.asarray(cat_idx, dtype=np.int64)]
    x = np.concatenate([eu, ei, ec, eu * ei, eu * ec], axis=1)
    h = np.maximum(x @ params["mlp_w1"] + params["mlp_b1"], 0.0)
    h = np.maximum(h @ params["mlp_w2"] + params["mlp_b2"], 0.0)
    z = (h @ params["mlp_w3"] + params["mlp_b3"])[:, 0]
    return expit(z)


def bce_loss(predictions: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy over labeled entries.

    predictions are probabilities in (0, 1); labels an array of {0, 1}.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.size == 0:
        raise ValueError("bce_loss over an empty labeled set")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    term = ad.add(ad.mul(y, ad.log(predictions)),
                  ad.mul(1.0 - y, ad.log(ad.sub(1.0, predictions))))
    return ad.neg(ad.tmean(term))
