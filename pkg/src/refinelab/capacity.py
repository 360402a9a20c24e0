"""Encoder capacity from the tuning radius.

    L = c1,   W = c2 max{n^(d/(2b+d)) rho^(2d/(2b+d)), 1},
    B = max(rho*, 1) * max{n rho^2, 1}^c3
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple


class Capacity(NamedTuple):
    width: int
    depth: int
    bound: float


@dataclass(frozen=True)
class CapacityRule:
    beta: float
    d: int
    c1: float = 6.0
    c2: float = 16.0
    c3: float = 1.0
    strict_depth: bool = False

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0 and self.c3 > 0):
            raise ValueError("capacity constants must be positive")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError("d must be a positive integer")

    def depth(self) -> int:
        if self.strict_depth:
            # depth used by the approximation argument: (2 + ceil(log2 b))(11 + b/d)
            return math.ceil((2 + math.ceil(math.log2(self.beta))) * (11 + self.beta / self.d))
        return max(1, round(self.c1))

    def to_dict(self) -> dict:
        return {"beta": self.beta, "d": self.d, "c1": self.c1, "c2": self.c2,
                "c3": self.c3, "strict_depth": self.strict_depth}


def _ceil(x: float) -> int:
    # guards against 16 * 1000**(1/3) landing a hair above an integer
    return math.ceil(x * (1.0 - 1e-12))


def capacity_from_rho(rule: CapacityRule, n: int, rho: float, rho_star: float) -> Capacity:
    if n < 1:
        raise ValueError("n must be at least 1")
    if rho < 0 or rho_star < 0:
        raise ValueError("rho and rho_star must be nonnegative")
    b, d = rule.beta, rule.d
    growth = n ** (d / (2 * b + d)) * rho ** (2 * d / (2 * b + d))
    width = _ceil(rule.c2 * max(growth, 1.0))
    n_rho2 = (rho * math.sqrt(n)) ** 2
    bound = max(rho_star, 1.0) * max(n_rho2, 1.0) ** rule.c3
    return Capacity(width, rule.depth(), bound)
