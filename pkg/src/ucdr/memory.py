"""Class-specific FIFO feature queues and hard pair mining."""

from __future__ import annotations

from collections import deque

import numpy as np

from .numerics import ShapeError, Tensor


class ClassQueueSet:
    """One bounded FIFO per class of detached feature vectors.

    Entries carry a global insertion counter so that ties during mining are
    broken oldest-first.
    """

    def __init__(self, classes, capacity: int = 20):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.queues: dict[int, deque] = {int(c): deque(maxlen=capacity) for c in classes}
        self._counter = 0

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def clear(self) -> None:
        for q in self.queues.values():
            q.clear()

    def contents(self, class_id: int) -> list[np.ndarray]:
        return [v for _, v in self.queues[int(class_id)]]

    def push(self, class_id: int, feature) -> None:
        c = int(class_id)
        if c not in self.queues:
            raise ShapeError(f"class {c} has no queue")
        vec = feature.data if isinstance(feature, Tensor) else feature
        self.queues[c].append((self._counter, np.array(vec, copy=True)))
        self._counter += 1

    def push_batch(self, class_ids, features) -> None:
        feats = features.data if isinstance(features, Tensor) else np.asarray(features)
        for c, f in zip(np.asarray(class_ids).tolist(), feats):
            self.push(c, f)

    def sample_hard_pairs(self, anchor, class_id: int, r: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """Farthest same-class entries paired by rank with nearest other-class entries."""
        c = int(class_id)
        if c not in self.queues:
            raise ShapeError(f"class {c} has no queue")
        a = np.asarray(anchor.data if isinstance(anchor, Tensor) else anchor)
        pos = list(self.queues[c])
        neg = [e for k, q in self.queues.items() if k != c for e in q]
        n = min(r, len(pos), len(neg))
        if n == 0:
            return []
        pos_vec = np.stack([v for _, v in pos])
        neg_vec = np.stack([v for _, v in neg])
        d_pos = ((pos_vec - a) ** 2).sum(axis=1)
        d_neg = ((neg_vec - a) ** 2).sum(axis=1)
        # lexsort: last key is primary; insertion counter breaks ties
        p_order = np.lexsort((np.array([s for s, _ in pos]), -d_pos))[:n]
        n_order = np.lexsort((np.array([s for s, _ in neg]), d_neg))[:n]
        return [(pos_vec[i], neg_vec[j]) for i, j in zip(p_order, n_order)]

    def mine_batch(self, anchors: np.ndarray, class_ids, r: int):
        """Pad mined pairs into ``(B, r, E)`` positive/negative arrays and ``(B, r)`` weights.

        A sample with k > 0 pairs gets weight 1/k on each; samples with no
        pairs get all-zero weights.
        """
        B, E = anchors.shape
        pos = np.zeros((B, r, E), dtype=anchors.dtype)
        neg = np.zeros((B, r, E), dtype=anchors.dtype)
        w = np.zeros((B, r), dtype=anchors.dtype)
        for i, c in enumerate(np.asarray(class_ids).tolist()):
            pairs = self.sample_hard_pairs(anchors[i], c, r)
            for j, (p, q) in enumerate(pairs):
                pos[i, j], neg[i, j] = p, q
            if pairs:
                w[i, : len(pairs)] = 1.0 / len(pairs)
        return pos, neg, w
