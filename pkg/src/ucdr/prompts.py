"""Domain/class prompt bank with momentum copies and row masks."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


class ConfigError(ValueError):
    pass


def momentum_blend(theta_m: np.ndarray, theta_c: np.ndarray, alpha: float) -> np.ndarray:
    """``(1 - alpha) * theta_m + alpha * theta_c``."""
    return (1.0 - alpha) * theta_m + alpha * theta_c


def mask_out(matrix, exclude) -> Tensor:
    """Zero the rows flagged 1 in ``exclude``; all other rows are returned bit-identical."""
    m = matrix if isinstance(matrix, Tensor) else Tensor(matrix)
    exclude = np.asarray(exclude)
    if exclude.shape != (m.shape[0],):
        raise ShapeError(f"mask of length {exclude.shape} for a matrix with {m.shape[0]} rows")
    if not np.isin(exclude, (0, 1)).all():
        raise ValueError("mask entries must be 0 or 1")
    return nx.row_mask(m, exclude == 0)


def one_hot(index: int, size: int) -> np.ndarray:
    out = np.zeros(size, dtype=np.int64)
    out[index] = 1
    return out


class PromptBank:
    """Per-domain rows U, per-class rows V, their momentum twins, and a shared projection.

    Rows are addressed by global label ids; ``domains``/``classes`` give the
    id of each row in order.
    """

    def __init__(self, classes, domains, prompt_dim: int, input_dim: int,
                 momentum_rate: float = 1e-3, seed: int = 0):
        if not 0.0 < momentum_rate <= 1.0:
            raise ConfigError(f"momentum_rate must lie in (0, 1], got {momentum_rate}")
        self.classes = [int(c) for c in classes]
        self.domains = [int(d) for d in domains]
        self._class_row = {c: i for i, c in enumerate(self.classes)}
        self._domain_row = {d: i for i, d in enumerate(self.domains)}
        self.prompt_dim, self.input_dim = prompt_dim, input_dim
        self.momentum_rate = momentum_rate
        rng = np.random.default_rng([seed, 31])
        self.U = Tensor(rng.normal(0.0, 0.02, (len(self.domains), prompt_dim)), requires_grad=True)
        self.V = Tensor(rng.normal(0.0, 0.02, (len(self.classes), prompt_dim)), requires_grad=True)
        self.U_m = Tensor(self.U.data.copy())
        self.V_m = Tensor(self.V.data.copy())
        w = rng.normal(0.0, 0.01, (2 * prompt_dim, input_dim))
        k = min(2 * prompt_dim, input_dim)
        w[np.arange(k), np.arange(k)] += 1.0
        self.proj_w = Tensor(w, requires_grad=True)
        self.proj_b = Tensor(np.zeros(input_dim), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.U, self.V, self.proj_w, self.proj_b]

    def class_rows(self, class_ids) -> np.ndarray:
        try:
            return np.array([self._class_row[int(c)] for c in np.atleast_1d(class_ids)], dtype=np.int64)
        except KeyError as e:
            raise ShapeError(f"class id {e.args[0]} has no prompt row") from None

    def domain_rows(self, domain_ids) -> np.ndarray:
        try:
            return np.array([self._domain_row[int(d)] for d in np.atleast_1d(domain_ids)], dtype=np.int64)
        except KeyError as e:
            raise ShapeError(f"domain id {e.args[0]} has no prompt row") from None

    def project(self, class_part: Tensor, domain_part: Tensor) -> Tensor:
        """``[class_part; domain_part] @ W + b`` on ``(..., m)`` inputs."""
        return nx.concat([class_part, domain_part], axis=-1) @ self.proj_w + self.proj_b

    def select_prompts(self, class_ids, domain_ids, use_momentum: bool = False) -> Tensor:
        """Batched one-hot selection: ids of length B -> prompts ``(B, D_in)``."""
        V, U = (self.V_m, self.U_m) if use_momentum else (self.V, self.U)
        if use_momentum:
            with nx.no_grad():
                return self.project(nx.take(V, self.class_rows(class_ids)),
                                    nx.take(U, self.domain_rows(domain_ids)))
        return self.project(nx.take(V, self.class_rows(class_ids)), nx.take(U, self.domain_rows(domain_ids)))

    def select_prompt(self, class_id: int, domain_id: int, use_momentum: bool = False) -> Tensor:
        return nx.reshape(self.select_prompts([class_id], [domain_id], use_momentum), (self.input_dim,))

    def momentum_update(self) -> None:
        a = self.momentum_rate
        self.U_m.data = momentum_blend(self.U_m.data, self.U.data, a).astype(self.U_m.data.dtype)
        self.V_m.data = momentum_blend(self.V_m.data, self.V.data, a).astype(self.V_m.data.dtype)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
