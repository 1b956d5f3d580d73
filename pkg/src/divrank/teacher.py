"""Interest-aware MMR teacher: greedy winning-set selection and labels.

Selection runs on detached (non-gradient) embeddings and scores. Each
greedy step recomputes the similarity of every remaining candidate to
every selected item, which is the quadratic behaviour the student is
meant to replace; a counter tracks those similarity evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations, permutations

import numpy as np
from scipy.special import expit


@dataclass
class TeacherLabeling:
    request_id: str
    winning_ids: list      # ordered item ids, length K
    winning_idx: np.ndarray  # candidate positions, same order
    y_tea: np.ndarray      # {0,1} per candidate, exactly K ones
    gains: list            # recorded marginal gain per step


def interest_similarity(e_i, e_j, u):
    """sigma((e_i * u) . (e_j * u)) in (0, 1)."""
    e_i, e_j, u = (np.asarray(v, dtype=np.float64) for v in (e_i, e_j, u))
    return float(expit(np.dot(e_i * u, e_j * u)))


def div_score(e_cand, selected_embs, u):
    """1 - max similarity to the already-selected items."""
    if len(selected_embs) == 0:
        raise ValueError("div_score needs a non-empty selection; "
                         "the first item is chosen by accuracy alone")
    sims = [interest_similarity(e_cand, e_s, u) for e_s in selected_embs]
    return 1.0 - max(sims)


def mmr_core(acc, ew, lam, K, counters=None):
    """Greedy selection on detached arrays.

    acc: (N,) accuracy scores; ew: (N, d) interest-weighted embeddings.
    Returns (selected indices in order, per-step marginal gains).
    """
    n = len(acc)
    if K > n:
        raise ValueError(f"K={K} exceeds candidate count {n}")
    first = int(np.argmax(acc))
    selected = [first]
    gains = [float(acc[first])]
    chosen = np.zeros(n, dtype=bool)
    chosen[first] = True
    for _ in range(1, K):
        remaining = np.flatnonzero(~chosen)
        sims = expit(ew[remaining] @ ew[selected].T)   # (|rem|, h)
        if counters is not None:
            counters["sim_evals"] = counters.get("sim_evals", 0) + sims.size
        gain = acc[remaining] + lam * (1.0 - sims.max(axis=1))
        best = int(np.argmax(gain))  # first max -> smallest candidate index
        selected.append(int(remaining[best]))
        gains.append(float(gain[best]))
        chosen[remaining[best]] = True
    return selected, gains


def mmr_select(request, model, lam, K, counters=None) -> TeacherLabeling:
    """Interest-aware MMR over a request using the model's current state."""
    item_idx, cat_idx, _ = model.request_arrays(request)
    u_idx = model.user_index(request.user_id)
    acc = model.acc_scores(u_idx, item_idx, cat_idx)
    ew = model.params["item_emb"][item_idx] * model.params["user_emb"][u_idx]
    selected, gains = mmr_core(acc, ew, lam, K, counters)
    y_tea = np.zeros(len(item_idx), dtype=np.float64)
    y_tea[selected] = 1.0
    return TeacherLabeling(
        request_id=request.request_id,
        winning_ids=[request.candidates[i].item_id for i in selected],
        winning_idx=np.asarray(selected, dtype=np.int64),
        y_tea=y_tea,
        gains=gains,
    )


def _order_value(order, acc, sim, lam):
    total = float(acc[order[0]])
    for h in range(1, len(order)):
        best_sim = max(sim[order[h], order[j]] for j in range(h))
        total += float(acc[order[h]]) + lam * (1.0 - best_sim)
    return total


def brute_force_core(acc, ew, lam, K, limit=10**6):
    """Exhaustive size-K subset search; each subset is valued by its best
    greedy-order evaluation (all K! orders, K <= 4)."""
    n = len(acc)
    if K > 4:
        raise ValueError("brute force supports K <= 4 (K! order enumeration)")
    from math import comb
    if comb(n, K) > limit:
        raise ValueError(f"C({n},{K}) exceeds the combinatorial limit")
    sim = expit(ew @ ew.T)
    best_val = -np.inf
    best_subset = None
    for subset in combinations(range(n), K):
        val = max(_order_value(order, acc, sim, lam)
                  for order in permutations(subset))
        if val > best_val:
            best_val = val
            best_subset = subset
    return list(best_subset), float(best_val)


def brute_force_best_subset(request, model, lam, K):
    item_idx, cat_idx, _ = model.request_arrays(request)
    u_idx = model.user_index(request.user_id)
    acc = model.acc_scores(u_idx, item_idx, cat_idx)
    ew = model.params["item_emb"][item_idx] * model.params["user_emb"][u_idx]
    subset, value = brute_force_core(acc, ew, lam, K)
    return [request.candidates[i].item_id for i in subset], value
