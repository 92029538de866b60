"""Closed-form message counts for CG and the enlarged CG families.

Logs are base 2. Only global reductions are counted: neighbour exchanges in
sparse or preconditioned products are assumed to overlap with computation.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import log2

__all__ = [
    "CommModel",
    "MODEL_NOTE",
    "messages_total",
    "words_total",
    "sstep_reduction_pct",
    "vs_cg_reduction_pct",
    "doubling_tradeoff",
    "TradeOff",
]

MODEL_NOTE = "global reductions only; local neighbour exchanges assumed overlapped"

ENLARGED = ("sre-cg", "sre-cg2", "msdo-cg")
FAMILIES = ("sre", "sstep-sre", "ca-sre")


def _log2_pow2(x: int, name: str) -> float:
    if x < 1 or x & (x - 1):
        raise ValueError(f"{name} must be a power of two, got {x}")
    return log2(x)


@dataclass(frozen=True)
class CommModel:
    t: int
    m: int
    s: int
    k: int
    k_s: int

    def __post_init__(self):
        _log2_pow2(self.t, "t")
        _log2_pow2(self.m, "m")

    def messages(self, method: str, variant: str = "sstep") -> float:
        if method == "cg":
            return messages_total("cg", k=self.k, m=self.m)
        return messages_total(method, variant, self.k_s, self.s, self.t)


def messages_total(method: str, variant: str = "sstep", k: int = 0, s: int = 1, t: int = 1, m: int = 1) -> float:
    """Messages sent in parallel over a whole solve.

    ``k`` is the iteration count of the run being modeled: CG or restructured
    iterations, or outer (s-step) iterations for the s-step and CA variants.
    ``m`` is the processor count, used by CG only; the enlarged methods assume
    one processor per domain.

    ======================  ==========================
    cg                      2 k log m
    restructured            6 s k log t
    sstep                   (5 s + 1) k log t
    ca (msdo-cg)            6 k log t
    ca (sre-cg, sre-cg2)    11 k log t
    ======================  ==========================
    """
    if method == "cg":
        return 2 * k * _log2_pow2(m, "m")
    if method not in ENLARGED:
        raise ValueError(f"unknown method {method!r}")
    if s < 1:
        raise ValueError("s must be >= 1")
    lt = _log2_pow2(t, "t")
    if variant == "restructured":
        if method == "msdo-cg":
            raise ValueError("msdo-cg has no restructured variant")
        return 6 * s * k * lt
    if variant == "sstep":
        return (5 * s + 1) * k * lt
    if variant in ("ca-alg5", "ca-alg7", "ca"):
        return (6 if method == "msdo-cg" else 11) * k * lt
    raise ValueError(f"unknown variant {variant!r}")


def words_total(method: str, variant: str = "sstep", **_) -> None:
    """Word counts are not modeled; always ``None``."""
    return None


def sstep_reduction_pct(s: int) -> float:
    """Message reduction of an s-step method relative to ``s = 1``: ``(s-1)100/(6s)``."""
    if s < 1:
        raise ValueError("s must be >= 1")
    return (s - 1) * 100 / (6 * s)


def vs_cg_reduction_pct(family: str, i: int = 0, j: int = 0) -> float:
    """Percent fewer messages than CG for ``s = 2**i`` and ``t = 2**j``.

    Assumes each doubling of ``t`` cuts iterations by 25% and each doubling
    of ``s`` halves outer iterations. Negative values mean CG is cheaper.
    """
    if i < 0 or j < 0:
        raise ValueError("i and j must be >= 0")
    q = 0.75**j
    if family == "sre":
        return 100 - 3 * q * 100
    if family == "sstep-sre":
        return 100 - (2.5 + 0.5 ** (i + 1)) * q * 100
    if family == "ca-sre":
        return 100 - 5.5 * 0.5**i * q * 100
    raise ValueError(f"unknown family {family!r}")


@dataclass(frozen=True)
class TradeOff:
    lhs: float
    rhs: float

    @property
    def ca_or_sstep_wins(self) -> bool:
        return self.lhs > self.rhs


def doubling_tradeoff(i: int, t: int, mode: str = "sstep") -> TradeOff:
    """Compare merging ``s = 2**i`` iterations of MSDO-CG against ``2**i`` times more domains.

    ``mode="sstep"``: ``6 i 0.75^i`` vs ``(5 - 6 0.75^i + 0.5^i) log t``.
    ``mode="ca"``: ``i 0.75^i`` vs ``(0.5^i - 0.75^i) log t``.
    """
    if i < 1:
        raise ValueError("i must be >= 1")
    lt = _log2_pow2(t, "t")
    a, h = 0.75**i, 0.5**i
    if mode == "sstep":
        return TradeOff(6 * i * a, (5 - 6 * a + h) * lt)
    if mode == "ca":
        return TradeOff(i * a, (h - a) * lt)
    raise ValueError(f"unknown mode {mode!r}")
