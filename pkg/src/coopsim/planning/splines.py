"""Piecewise-cubic lateral offset candidates over route arc length."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from coopsim.core import ValidationError


@dataclass(frozen=True, eq=False)
class LateralProfile:
    """Offset y(s) relative to the route, with s measured from the ego (s = 0).

    Segment ``i`` covers [knots[i], knots[i+1]] and evaluates
    ``a + b*u + c*u**2 + d*u**3`` with ``u = s - knots[i]``.
    """

    knots: np.ndarray
    coeffs: np.ndarray  # (M, 4) rows of (a, b, c, d)
    shift: float
    truncated: bool = False

    def __post_init__(self) -> None:
        k = np.asarray(self.knots, dtype=float)
        c = np.asarray(self.coeffs, dtype=float).reshape(-1, 4)
        if len(k) != len(c) + 1 or np.any(np.diff(k) <= 0):
            raise ValidationError("knots must be strictly increasing with one more entry than segments")
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "coeffs", c)

    @property
    def length(self) -> float:
        return float(self.knots[-1] - self.knots[0])

    def _segment(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = np.clip(np.asarray(s, dtype=float), self.knots[0], self.knots[-1])
        idx = np.clip(np.searchsorted(self.knots, s, side="right") - 1, 0, len(self.coeffs) - 1)
        return idx, s - self.knots[idx]

    def evaluate(self, s, derivative: int = 0) -> np.ndarray:
        idx, u = self._segment(s)
        a, b, c, d = self.coeffs[idx].T
        if derivative == 0:
            return a + u * (b + u * (c + u * d))
        if derivative == 1:
            return b + u * (2 * c + 3 * u * d)
        if derivative == 2:
            return 2 * c + 6 * u * d
        if derivative == 3:
            return 6 * d
        raise ValidationError("derivative must be 0..3")

    def knot_jumps(self) -> np.ndarray:
        """Max |jump| of y, y', y'' at each interior knot, shape (M-1, 3)."""
        out = []
        for i in range(1, len(self.coeffs)):
            a0, b0, c0, d0 = self.coeffs[i - 1]
            u = self.knots[i] - self.knots[i - 1]
            left = (a0 + u * (b0 + u * (c0 + u * d0)), b0 + u * (2 * c0 + 3 * u * d0), 2 * c0 + 6 * u * d0)
            a1, b1, c1, _ = self.coeffs[i]
            right = (a1, b1, 2 * c1)
            out.append([abs(left[j] - right[j]) for j in range(3)])
        return np.array(out).reshape(-1, 3)


def _transition(y0: float, dy0: float, target: float, length: float, pieces: int = 3) -> np.ndarray:
    """Equal cubic pieces over [0, L] from (y0, y0', 0) to (target, 0, 0), C2 at interior knots.

    Three pieces give exactly as many unknowns as conditions.
    """
    h = length / pieces
    n = 4 * pieces
    M = np.zeros((n, n))
    r = np.zeros(n)
    val = [1.0, h, h**2, h**3]
    slope = [0.0, 1.0, 2 * h, 3 * h**2]
    curv = [0.0, 0.0, 2.0, 6 * h]
    row = 0
    for cond, rhs in ((0, y0), (1, dy0), (2, 0.0)):
        M[row, cond] = 1.0 if cond < 2 else 2.0
        r[row] = rhs
        row += 1
    for i in range(pieces - 1):
        left, right = 4 * i, 4 * (i + 1)
        for poly, k in ((val, 0), (slope, 1), (curv, 2)):
            M[row, left : left + 4] = poly
            M[row, right + k] = -(1.0 if k < 2 else 2.0)
            row += 1
    last = 4 * (pieces - 1)
    for poly, rhs in ((val, target), (slope, 0.0), (curv, 0.0)):
        M[row, last : last + 4] = poly
        r[row] = rhs
        row += 1
    return np.linalg.solve(M, r).reshape(pieces, 4)


def lateral_candidate(
    y0: float, dy0: float, shift: float, transition_length: float, horizon: float
) -> LateralProfile:
    """One candidate ending at offset ``shift``; truncated if the transition exceeds ``horizon``."""
    if transition_length <= 0 or horizon <= 0:
        raise ValidationError("transition length and horizon must be positive")
    truncated = transition_length > horizon
    L = min(transition_length, horizon)
    pieces = _transition(y0, dy0, shift, L)
    knots = list(np.linspace(0.0, L, len(pieces) + 1))
    coeffs = list(pieces)
    hold = max(horizon - L, 1e-3)
    knots.append(L + hold)
    coeffs.append(np.array([shift, 0.0, 0.0, 0.0]))
    return LateralProfile(np.array(knots), np.array(coeffs), float(shift), truncated)


def sample_lateral_candidates(
    ego_lateral: tuple[float, float],
    shifts: Sequence[float],
    transition_length: float,
    horizon: float,
) -> list[LateralProfile]:
    """One spline per shift, starting at the ego's (offset, slope) relative to the route."""
    if 0.0 not in [float(s) for s in shifts]:
        raise ValidationError("shifts must include 0.0")
    y0, dy0 = ego_lateral
    return [lateral_candidate(y0, dy0, float(s), transition_length, horizon) for s in shifts]
