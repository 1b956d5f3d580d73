"""Contrastive context encoder: target attention over the candidate pool,
positive/negative context sampling, anti-attention pooling, InfoNCE
separation and user interest-aware fusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .sampler import hard_topk, perturb

MASK_VALUE = -1e30  # additive mask; drives softmax weight to exactly 0

CCE_PARAM_NAMES = ("cce_w1", "cce_w2", "cce_w3",
                   "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")


def init_cce(params: ParamStore, d: int, rng):
    for name in ("cce_w1", "cce_w2", "cce_w3"):
        lim = math.sqrt(6.0 / (2 * d))
        params.add(name, rng.uniform(-lim, lim, size=(d, d)))
    lim1 = math.sqrt(6.0 / (4 * d))
    params.add("ffn_w1", rng.uniform(-lim1, lim1, size=(2 * d, 2 * d)))
    params.add("ffn_b1", np.zeros(2 * d))
    lim2 = math.sqrt(6.0 / (3 * d))
    params.add("ffn_w2", rng.uniform(-lim2, lim2, size=(2 * d, d)))
    params.add("ffn_b2", np.zeros(d))


@dataclass
class ContextSample:
    pos_idx: np.ndarray   # (..., k) candidate positions
    w_pos: Tensor         # perturbed weights gathered at pos_idx
    neg_idx: np.ndarray
    w_neg: Tensor


def attention_scores_all(P, E: Tensor) -> Tensor:
    """(N, N) scaled dot-product scores, row = target, unmasked."""
    d = E.data.shape[-1]
    q = ad.matmul(E, P["cce_w1"])
    keys = ad.matmul(E, P["cce_w2"])
    return ad.scale(ad.matmul(q, ad.transpose(keys)), 1.0 / math.sqrt(d))


def attention_scores(P, target: Tensor, candidates: Tensor) -> Tensor:
    """Scores of one target against a candidate matrix (no self-masking:
    the caller masks the target's own row position)."""
    d = candidates.data.shape[-1]
    q = ad.matmul(target, P["cce_w1"])
    keys = ad.matmul(candidates, P["cce_w2"])
    return ad.scale(ad.matmul(keys, q), 1.0 / math.sqrt(d))


def sample_contexts(w: Tensor, k: int, rng=None, mask=None) -> ContextSample:
    """Gumbel-Top-k draws of a positive set (high attention) and a negative
    set (negated attention), with independent noise per side.

    w holds raw scores: (N,) for one target or (N, N) for all targets of a
    request. The additive mask (diagonal self-mask by default for square w)
    is applied after negation too, so the target can never enter its own
    context. Draws may overlap; they are not forced disjoint.
    """
    n = w.data.shape[-1]
    if 2 * k > n - 1:
        raise ad.DomainError(f"2k={2 * k} exceeds usable pool {n - 1}")
    if mask is None and w.data.ndim == 2 and w.data.shape[0] == n:
        mask = np.diag(np.full(n, MASK_VALUE))
    masked = w if mask is None else ad.add_constant(w, mask)
    neg_masked = ad.neg(w) if mask is None \
        else ad.add_constant(ad.neg(w), mask)
    w_pos = perturb(ad.log_softmax(masked, axis=-1), rng)
    w_neg = perturb(ad.log_softmax(neg_masked, axis=-1), rng)
    pos_idx = hard_topk(w_pos.data, k)
    neg_idx = hard_topk(w_neg.data, k)
    gather = ad.take_per_row if w.data.ndim == 2 else _take_1d
    return ContextSample(pos_idx=pos_idx, w_pos=gather(w_pos, pos_idx),
                         neg_idx=neg_idx, w_neg=gather(w_neg, neg_idx))


def _take_1d(a: Tensor, idx):
    out = ad.take_per_row(ad.reshape(a, (1, -1)), np.asarray(idx)[None, :])
    return ad.reshape(out, (-1,))


def _pool(weights: Tensor, values: Tensor) -> Tensor:
    w3 = ad.reshape(weights, weights.data.shape + (1,))
    return ad.tsum(ad.mul(w3, values), axis=-2)


def positive_context(w_tilde: Tensor, values: Tensor) -> Tensor:
    """softmax-weighted pooling of the sampled value rows (target attention)."""
    return _pool(ad.softmax_t(w_tilde, 1.0, axis=-1), values)


def negative_context(w_tilde: Tensor, values: Tensor) -> Tensor:
    """Anti-attention: weights from the negated perturbed scores."""
    return _pool(ad.softmax_t(ad.neg(w_tilde), 1.0, axis=-1), values)


def infonce_loss(q: Tensor, c_pos: Tensor, c_neg: Tensor, t: float) -> Tensor:
    """Two-term InfoNCE; batched inputs are averaged."""
    if t <= 0.0:
        raise ad.DomainError("InfoNCE temperature must be positive")
    s_pos = ad.tsum(ad.mul(q, c_pos), axis=-1)
    s_neg = ad.tsum(ad.mul(q, c_neg), axis=-1)
    margin = ad.scale(ad.sub(s_neg, s_pos), 1.0 / t)
    return ad.tmean(ad.softplus(margin))


def fuse_context(u, c_pos: Tensor, c_neg: Tensor, P, *, training=False,
                 dropout=0.0, rng=None) -> Tensor:
    """FFN over the user-gated contexts: C = FFN(concat(u*C+, u*C-))."""
    x = ad.concat([ad.mul(u, c_pos), ad.mul(u, c_neg)], axis=-1)
    h = ad.relu(ad.add(ad.matmul(x, P["ffn_w1"]), P["ffn_b1"]))
    h = ad.dropout(h, dropout, rng, training)
    return ad.add(ad.matmul(h, P["ffn_w2"]), P["ffn_b2"])
