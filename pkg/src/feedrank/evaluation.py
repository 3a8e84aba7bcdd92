"""Top-K ranking metrics and the leave-one-out evaluation harness.

Each case ranks the held-out item against its sampled negatives by the
product of the implicit and explicit probabilities. Ranks are 1-based;
ties break toward the lower internal item id so runs are reproducible.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import EvalCase, InteractionStore, SideInfo
from .models import predict_score
from .training import pad_sequence


def hr_at_k(rank: int, k: int) -> int:
    """1 when the ground-truth item lands in the top k, else 0."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    return 1 if rank <= k else 0


def ndcg_at_k(rank: int, k: int) -> float:
    """Position-discounted gain log(2)/log(rank+1) inside the top k, else 0."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if rank > k:
        return 0.0
    return math.log(2.0) / math.log(rank + 1.0)


def rank_of_first(scores: np.ndarray, item_ids: np.ndarray) -> int:
    """1-based rank of candidate 0 under descending score, ties by
    ascending item id."""
    gt_score = scores[0]
    gt_item = item_ids[0]
    better = int(np.sum(scores[1:] > gt_score))
    tied_ahead = int(np.sum((scores[1:] == gt_score) & (item_ids[1:] < gt_item)))
    return 1 + better + tied_ahead


def _case_scores(model, case: EvalCase, store: Optional[InteractionStore],
                 side_info: Optional[SideInfo], seed: int, chunk: int) -> np.ndarray:
    candidates = np.concatenate([[case.item], case.negatives]).astype(np.int64)
    mode = model.config.side_info_mode
    scores = np.empty(candidates.size, dtype=np.float64)
    if model.kind == "bert":
        if store is None:
            raise ValueError("evaluating a sequence model requires the training store for padding")
        rng = np.random.default_rng([seed, case.user])
        n = model.config.seq_len
        observed = store.observed_any(case.user) | {case.item}
        seq = pad_sequence(case.history, n, store.num_items, observed, rng)
    for start in range(0, candidates.size, chunk):
        part = candidates[start:start + chunk]
        users = np.full(part.size, case.user, dtype=np.int64)
        user_side = side_info.user_matrix(users) if mode == "user_and_item" else None
        with T.no_grad():
            if model.kind == "ite":
                item_side = side_info.item_matrix(part) if mode != "none" else None
                res = model.forward(users, part, user_side, item_side)
            else:
                seqs = np.broadcast_to(seq, (part.size, n))
                seq_side = target_side = None
                if mode != "none":
                    seq_side = side_info.item_matrix(seqs)
                    target_side = side_info.item_matrix(part)
                res = model.forward(users, seqs, part, user_side, seq_side, target_side)
        scores[start:start + part.size] = predict_score(
            res.x_hat.data.astype(np.float64), res.y_hat.data.astype(np.float64))
    return scores


def case_rank(model, case: EvalCase, store: Optional[InteractionStore] = None,
              side_info: Optional[SideInfo] = None, seed: int = 0, chunk: int = 512) -> int:
    """Rank of the held-out item among its candidate list."""
    candidates = np.concatenate([[case.item], case.negatives]).astype(np.int64)
    scores = _case_scores(model, case, store, side_info, seed, chunk)
    return rank_of_first(scores, candidates)


def evaluate(model, cases: Sequence[EvalCase], store: Optional[InteractionStore] = None,
             side_info: Optional[SideInfo] = None, k: int = 10, seed: int = 0,
             workers: int = 1, chunk: int = 512) -> tuple[float, float]:
    """Mean HR@k and NDCG@k over all cases (dropout-free forward passes)."""
    ranks = case_ranks(model, cases, store, side_info, seed, workers, chunk)
    hr = float(np.mean([hr_at_k(r, k) for r in ranks]))
    ndcg = float(np.mean([ndcg_at_k(r, k) for r in ranks]))
    return hr, ndcg


def case_ranks(model, cases: Sequence[EvalCase], store: Optional[InteractionStore] = None,
               side_info: Optional[SideInfo] = None, seed: int = 0,
               workers: int = 1, chunk: int = 512) -> list[int]:
    if not cases:
        raise ValueError("evaluate needs at least one case")
    if workers <= 1:
        return [case_rank(model, c, store, side_info, seed, chunk) for c in cases]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: case_rank(model, c, store, side_info, seed, chunk), cases))


def topk_sweep(model, cases: Sequence[EvalCase], store: Optional[InteractionStore] = None,
               side_info: Optional[SideInfo] = None, ks: Sequence[int] = range(1, 21),
               seed: int = 0, workers: int = 1) -> list[tuple[int, float, float]]:
    """(k, HR@k, NDCG@k) rows over a range of cutoffs, ranking only once."""
    ranks = case_ranks(model, cases, store, side_info, seed, workers)
    out = []
    for k in ks:
        hr = float(np.mean([hr_at_k(r, k) for r in ranks]))
        ndcg = float(np.mean([ndcg_at_k(r, k) for r in ranks]))
        out.append((int(k), hr, ndcg))
    return out
