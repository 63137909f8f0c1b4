"""Orthonormal DCT-II for 1-D signals and separable 2-D grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft


@dataclass(frozen=True)
class DctPlan:
    """Transform plan for signals of a fixed shape, ``(L,)`` or ``(H, W)``.

    Vectors passed to the plan are flattened signals of length ``prod(shape)``;
    batches may be stacked along leading axes.
    """

    shape: tuple[int, ...]

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) not in (1, 2) or min(shape) < 1:
            raise ValueError(f"unsupported signal shape {self.shape}")
        object.__setattr__(self, "shape", shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def _reshape(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != self.size:
            raise ValueError(f"last axis {v.shape[-1]} does not match plan size {self.size}")
        return v.reshape(v.shape[:-1] + self.shape)

    def forward(self, signal) -> np.ndarray:
        s = self._reshape(signal)
        axes = tuple(range(-len(self.shape), 0))
        out = scipy.fft.dctn(s, type=2, norm="ortho", axes=axes)
        return out.reshape(s.shape[: s.ndim - len(self.shape)] + (self.size,))

    def inverse(self, coefficients) -> np.ndarray:
        c = self._reshape(coefficients)
        axes = tuple(range(-len(self.shape), 0))
        out = scipy.fft.idctn(c, type=2, norm="ortho", axes=axes)
        return out.reshape(c.shape[: c.ndim - len(self.shape)] + (self.size,))

    def basis(self) -> np.ndarray:
        """Dense orthonormal basis; column ``k`` is the k-th cosine vector."""
        return self.inverse(np.eye(self.size)).T


def dct_forward(plan: DctPlan, signal) -> np.ndarray:
    return plan.forward(signal)


def dct_inverse(plan: DctPlan, coefficients) -> np.ndarray:
    return plan.inverse(coefficients)
