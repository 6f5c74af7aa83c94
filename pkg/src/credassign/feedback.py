"""Credit-assignment rules and the feedback weights each one sends errors through."""

from __future__ import annotations

from enum import Enum

import numpy as np

from .errors import ConfigurationError


class FeedbackRule(str, Enum):
    BP = "bp"
    FA_RANDOM = "fa_random"
    FA_TOEPLITZ = "fa_toeplitz"
    USF_INIT = "usf_init"
    USF_SN = "usf_sn"

    @classmethod
    def parse(cls, value: "str | FeedbackRule") -> "FeedbackRule":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "_"))
        except ValueError:
            names = ", ".join(r.value for r in cls)
            raise ConfigurationError(f"unknown method {value!r}; expected one of {names}") from None

    @property
    def needs_b0(self) -> bool:
        """Whether the rule reads a fixed random matrix drawn at init."""
        return self in (FeedbackRule.FA_RANDOM, FeedbackRule.FA_TOEPLITZ, FeedbackRule.USF_INIT)

    @property
    def uses_sigma(self) -> bool:
        return self.needs_b0

    @property
    def dense_conv_feedback(self) -> bool:
        return self is FeedbackRule.FA_RANDOM


def sign(x: np.ndarray) -> np.ndarray:
    # np.sign maps 0 -> 0, which is the convention we want.
    return np.sign(x)


def usf_init_feedback(w: np.ndarray, b0: np.ndarray) -> np.ndarray:
    return np.abs(b0) * sign(w)


def usf_sn_feedback(w: np.ndarray) -> np.ndarray:
    """Sign pattern of ``w`` rescaled to the Frobenius norm of ``w``."""
    s = sign(w)
    peak = np.max(np.abs(w))
    if peak == 0:
        return np.zeros_like(w)
    # ||w|| = peak * ||w / peak||; for constant |w| the ratio below is exactly 1
    ratio = np.linalg.norm((w / peak).ravel()) / np.linalg.norm(s.ravel())
    return (s * (peak * ratio)).astype(w.dtype, copy=False)


def effective_feedback(w: np.ndarray, b0: np.ndarray | None, rule: FeedbackRule) -> np.ndarray:
    """Return the matrix the error signal is sent back through at this step.

    BP returns ``w`` itself, to be applied as its adjoint. The other rules
    return a fresh array computed from the current ``w`` and/or the fixed
    ``b0``; ``b0`` is never modified.
    """
    rule = FeedbackRule.parse(rule)
    if rule is FeedbackRule.BP:
        return w
    if rule is FeedbackRule.USF_SN:
        return usf_sn_feedback(w)
    if b0 is None:
        raise ConfigurationError(f"rule {rule.value} needs a fixed random feedback matrix, none present")
    if rule is FeedbackRule.USF_INIT:
        if b0.shape != w.shape:
            raise ConfigurationError(f"uSF Init feedback shape {b0.shape} != weight shape {w.shape}")
        return usf_init_feedback(w, b0)
    return b0
