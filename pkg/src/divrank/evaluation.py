"""Fused ranking via a bounded min-heap, list-quality metrics and the
latency benchmark comparing the student against the greedy teacher.
"""

from __future__ import annotations

import heapq
import platform
import time
from dataclasses import dataclass

import numpy as np

from . import teacher as teach
from .distill import CDMModel, win_probabilities_detached


@dataclass
class RankedList:
    request_id: str
    item_idx: np.ndarray    # candidate positions, best first
    item_ids: list
    scores: np.ndarray      # fused scores, same order


class _CountingHeap:
    """Size-bounded binary min-heap with an explicit comparison counter.

    Keys are (score, -candidate_index) so the final ranking matches a
    stable sort by score descending, index ascending.
    """

    def __init__(self, capacity: int, counters: dict):
        self.capacity = capacity
        self.counters = counters
        self.heap: list = []

    def _less(self, a, b) -> bool:
        self.counters["heap_comparisons"] += 1
        return a < b

    def _sift_up(self, pos):
        item = self.heap[pos]
        while pos > 0:
            parent = (pos - 1) >> 1
            if self._less(item, self.heap[parent]):
                self.heap[pos] = self.heap[parent]
                pos = parent
            else:
                break
        self.heap[pos] = item

    def _sift_down(self, pos):
        heap = self.heap
        n = len(heap)
        item = heap[pos]
        while True:
            child = 2 * pos + 1
            if child >= n:
                break
            right = child + 1
            if right < n and self._less(heap[right], heap[child]):
                child = right
            if self._less(heap[child], item):
                heap[pos] = heap[child]
                pos = child
            else:
                break
        heap[pos] = item

    def push(self, key):
        self.heap.append(key)
        self._sift_up(len(self.heap) - 1)
        if len(self.heap) > self.capacity:
            last = self.heap.pop()
            if self.heap:
                self.heap[0] = last
                self._sift_down(0)

    def sorted_desc(self):
        return sorted(self.heap, reverse=True)


def top_k_fused(scores: np.ndarray, K: int, counters: dict | None = None):
    """Indices of the K best scores via a size-K min-heap.

    Ties break toward the smaller candidate index. With counters given,
    an instrumented heap counts key comparisons; otherwise heapq runs the
    same algorithm uncounted.
    """
    n = len(scores)
    K = min(K, n)
    if K <= 0:
        return np.empty(0, dtype=np.int64)
    if counters is not None:
        heap = _CountingHeap(K, counters)
        for i in range(n):
            heap.push((scores[i], -i))
        best = heap.sorted_desc()
    else:
        heap = [(scores[i], -i) for i in range(K)]
        heapq.heapify(heap)
        for i in range(K, n):
            key = (scores[i], -i)
            if heap[0] < key:
                heapq.heapreplace(heap, key)
        best = sorted(heap, reverse=True)
    return np.asarray([-neg for _, neg in best], dtype=np.int64)


def fused_scores(model: CDMModel, request, gamma: float,
                 counters: dict | None = None) -> np.ndarray:
    """f(u, i) + gamma * y_stu per candidate; y_stu is skipped at gamma=0."""
    item_idx, cat_idx, _ = model.request_arrays(request)
    u_idx = model.user_index(request.user_id)
    acc = model.acc_scores(u_idx, item_idx, cat_idx)
    if gamma == 0.0:
        return acc
    y_stu = model.win_probabilities(request)
    if counters is not None:
        counters["student_evals"] = counters.get("student_evals", 0) \
            + len(item_idx)
    return acc + gamma * y_stu


def fused_rank(model: CDMModel, request, K: int, gamma: float,
               counters: dict | None = None) -> RankedList:
    scores = fused_scores(model, request, gamma, counters)
    idx = top_k_fused(scores, K, counters)
    return RankedList(request_id=request.request_id, item_idx=idx,
                      item_ids=[request.candidates[i].item_id for i in idx],
                      scores=scores[idx])


# ---------------------------------------------------------------------------
# metrics


def ilad_at_k(embeddings: np.ndarray) -> float:
    """1 - mean pairwise cosine similarity over the ranked items' raw
    embedding rows. Needs at least two rows."""
    E = np.asarray(embeddings, dtype=np.float64)
    m = len(E)
    if m < 2:
        raise ValueError("ILAD needs at least two items")
    norms = np.linalg.norm(E, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("ILAD is undefined for zero-norm embeddings")
    unit = E / norms[:, None]
    cos = unit @ unit.T
    total = cos.sum() - np.trace(cos)
    return 1.0 - total / (m * (m - 1))


def cc_at_k(category_lists, num_categories: int) -> float:
    """System-level category coverage: distinct categories anywhere in the
    ranked lists over the total category count."""
    if num_categories <= 0:
        raise ValueError("num_categories must be positive")
    covered = set()
    for cats in category_lists:
        covered.update(cats)
    return len(covered) / num_categories


def recall_at_k(ranked_labels, total_positives: int) -> float:
    if total_positives <= 0:
        raise ValueError("recall needs at least one positive")
    return sum(1 for y in ranked_labels if y == 1) / total_positives


def mrr_at_k(ranked_labels) -> float:
    for pos, y in enumerate(ranked_labels, start=1):
        if y == 1:
            return 1.0 / pos
    return 0.0


def auc_score(labels, scores) -> float:
    """Rank-based AUC with midrank tie handling."""
    labels = np.asarray(labels, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class MetricReport:
    K: int
    gamma: float
    ilad: float
    cc: float
    recall: float
    mrr: float
    num_requests: int
    num_scored: int          # requests with at least one positive label
    num_skipped: int

    def to_dict(self):
        return {"K": self.K, "gamma": self.gamma, "ilad": self.ilad,
                "cc": self.cc, "recall": self.recall, "mrr": self.mrr,
                "num_requests": self.num_requests,
                "num_scored": self.num_scored,
                "num_skipped": self.num_skipped}


def evaluate_model(model: CDMModel, dataset, Ks, gammas) -> list:
    """Rank every request per (K, gamma) and aggregate the four metrics.

    Recall and MRR average over requests that have at least one positive
    label; label-free requests are skipped and counted. ILAD averages per
    request; CC pools category coverage across the whole run.
    """
    reports = []
    num_categories = len(model.category_ids)
    for gamma in gammas:
        # fused scores do not depend on K, rank once per request
        per_request = [fused_scores(model, req, gamma)
                       for req in dataset.requests]
        arrays = [model.request_arrays(req) for req in dataset.requests]
        for K in Ks:
            ilads, recalls, mrrs, cat_lists = [], [], [], []
            skipped = 0
            for req, scores, (item_idx, cat_idx, labels) in zip(
                    dataset.requests, per_request, arrays):
                top = top_k_fused(scores, K)
                E = model.params["item_emb"][item_idx[top]]
                if len(top) >= 2:
                    ilads.append(ilad_at_k(E))
                cat_lists.append(cat_idx[top].tolist())
                positives = int((labels == 1).sum())
                if positives == 0:
                    skipped += 1
                    continue
                ranked_labels = labels[top].tolist()
                recalls.append(recall_at_k(ranked_labels, positives))
                mrrs.append(mrr_at_k(ranked_labels))
            reports.append(MetricReport(
                K=K, gamma=gamma,
                ilad=float(np.mean(ilads)) if ilads else 0.0,
                cc=cc_at_k(cat_lists, num_categories),
                recall=float(np.mean(recalls)) if recalls else 0.0,
                mrr=float(np.mean(mrrs)) if mrrs else 0.0,
                num_requests=len(dataset.requests),
                num_scored=len(recalls), num_skipped=skipped))
    return reports


# ---------------------------------------------------------------------------
# latency benchmark


def _median_time(fn, repeats: int, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def latency_bench(model: CDMModel, N: int = 10000, K: int = 100,
                  repeats: int = 5, seed: int = 0) -> dict:
    """Median wall-clock of one teacher pass vs one student pass over a
    synthetic pool of N catalog items, plus the operation-count scalings
    that pin down their asymptotics.

    The candidate pool is drawn (with replacement if needed) from the
    model's catalog so both paths see identical inputs.
    """
    rng = np.random.default_rng(seed)
    n_items = len(model.item_ids)
    cfg = model.config
    replace = n_items < N
    u_idx = int(rng.integers(len(model.user_ids)))

    def draw(n):
        item_idx = np.sort(rng.choice(n_items, size=n, replace=replace or n > n_items))
        cat_idx = np.asarray(
            [model._cat_row[model.item_category[model.item_ids[i]]]
             for i in item_idx], dtype=np.int64)
        return item_idx, cat_idx

    item_idx, cat_idx = draw(N)
    acc = model.acc_scores(u_idx, item_idx, cat_idx)
    ew = model.params["item_emb"][item_idx] * model.params["user_emb"][u_idx]

    teacher_time = _median_time(
        lambda: teach.mmr_core(acc, ew, cfg.lam, K), repeats)

    def student_pass():
        y = win_probabilities_detached(model.params, u_idx, item_idx, cfg,
                                       pool_seed=seed)
        return top_k_fused(acc + cfg.gamma * y, K)

    student_time = _median_time(student_pass, repeats)

    # similarity-evaluation scaling: K doubling at fixed N
    counters_k = {}
    teach.mmr_core(acc, ew, cfg.lam, K, counters_k)
    counters_2k = {}
    teach.mmr_core(acc, ew, cfg.lam, 2 * K, counters_2k)

    # heap-comparison scaling: N doubling at fixed K
    item_idx2, cat_idx2 = draw(2 * N)
    acc2 = model.acc_scores(u_idx, item_idx2, cat_idx2)
    heap_n = {"heap_comparisons": 0}
    top_k_fused(acc, K, heap_n)
    heap_2n = {"heap_comparisons": 0}
    top_k_fused(acc2, K, heap_2n)

    return {
        "N": N, "K": K, "repeats": repeats,
        "teacher_median_s": teacher_time,
        "student_median_s": student_time,
        "speedup": teacher_time / student_time,
        "sim_evals_K": counters_k["sim_evals"],
        "sim_evals_2K": counters_2k["sim_evals"],
        "sim_eval_ratio": counters_2k["sim_evals"] / counters_k["sim_evals"],
        "heap_comparisons_N": heap_n["heap_comparisons"],
        "heap_comparisons_2N": heap_2n["heap_comparisons"],
        "heap_comparison_ratio": heap_2n["heap_comparisons"]
        / heap_n["heap_comparisons"],
        "environment": {
            "python": platform.python_version(),
            "machine": platform.machine(),
            "system": platform.system(),
            "numpy": np.__version__,
        },
    }
