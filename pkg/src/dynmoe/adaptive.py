"""Routing records and the expert add / remove process.

During a recording window the layer counts, per expert, how many tokens
activated it, and sums the embeddings of tokens that activated nothing.
When the window closes, experts nobody used are deleted, and if any tokens
went unserved a single new expert is appended whose representation column
is the normalized sum of those tokens (threshold zero), so the very tokens
that triggered the addition are guaranteed to activate it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import ConfigurationError, DimensionError

log = logging.getLogger(__name__)

INIT_STRATEGIES = ("paper_rs", "average", "w_average", "most_activated")


@dataclass
class RoutingRecord:
    """Per-interval routing counters for one layer.

    ``r_e[e]`` is the exact number of token activations of expert e since
    recording started; ``r_s`` is the unnormalized sum of embeddings of
    tokens that activated no expert. Both reset when recording starts.
    """

    r_e: np.ndarray  # (K,) int64
    r_s: np.ndarray  # (d,) float64
    recording: bool = False
    skipped_batches: int = 0

    @classmethod
    def fresh(cls, n_experts: int, dim: int) -> "RoutingRecord":
        return cls(r_e=np.zeros(n_experts, dtype=np.int64), r_s=np.zeros(dim))

    def start(self) -> None:
        self.r_e[:] = 0
        self.r_s[:] = 0.0
        self.recording = True

    def stop(self) -> None:
        self.recording = False


def record(rec: RoutingRecord, decision, tokens: np.ndarray) -> RoutingRecord:
    """Accumulate one batch's routing outcome into the record.

    Increments ``r_e`` by the mask's column sums and ``r_s`` by the sum of
    token rows with k = 0. Calling this while not recording is a counted
    no-op, not an error, because the window flags are driven externally.
    """
    if not rec.recording:
        rec.skipped_batches += 1
        log.warning("record() called outside a recording window; ignored")
        return rec
    tokens = np.asarray(tokens, dtype=np.float64)
    if decision.mask.shape[1] != rec.r_e.shape[0]:
        raise DimensionError(
            f"decision has {decision.mask.shape[1]} experts, record has {rec.r_e.shape[0]}"
        )
    if tokens.shape != (decision.mask.shape[0], rec.r_s.shape[0]):
        raise DimensionError(
            f"tokens shape {tokens.shape} inconsistent with decision/record"
        )
    rec.r_e += decision.mask.sum(axis=0).astype(np.int64)
    empty = decision.k == 0
    if np.any(empty):
        rec.r_s += tokens[empty].sum(axis=0)
    return rec


@dataclass
class AdaptConfig:
    """Knobs for the adaptive process.

    ``record_window`` is a (start, end) fraction pair inside each check
    interval; routing is recorded between those positions and the add /
    remove decision runs when the window closes.
    """

    max_experts: int = 16
    check_interval: int = 100
    record_window: tuple[float, float] = (1.0 / 3.0, 2.0 / 3.0)
    init_strategy: str = "paper_rs"
    min_experts: int = 1

    def __post_init__(self) -> None:
        if not 1 <= self.min_experts <= self.max_experts:
            raise ConfigurationError(
                f"need 1 <= min_experts <= max_experts, got {self.min_experts}, {self.max_experts}"
            )
        if self.check_interval < 1:
            raise ConfigurationError("check_interval must be positive")
        start, end = self.record_window
        if not 0.0 <= start < end <= 1.0:
            raise ConfigurationError(f"record_window must satisfy 0 <= start < end <= 1, got {self.record_window}")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ConfigurationError(
                f"unknown init_strategy {self.init_strategy!r}; choose from {INIT_STRATEGIES}"
            )


@dataclass
class AdaptReport:
    """Audit trail of one adapt call."""

    removed_experts: list[int] = field(default_factory=list)
    added: bool = False
    new_k_total: int = 0
    clamped: bool = False  # removal was limited by min_experts

    def to_dict(self) -> dict:
        return {
            "removed_experts": list(self.removed_experts),
            "added": self.added,
            "new_k_total": self.new_k_total,
            "clamped": self.clamped,
        }


def init_new_expert(strategy: str, experts: list, r_e: np.ndarray, rng=None, dim=None, hidden=None):
    """Build the weights of a newly added expert from the existing ones.

    ``paper_rs`` draws fresh random weights with the same scheme used for
    the initial experts; ``average`` takes the arithmetic mean of all
    existing expert tensors; ``w_average`` weights that mean by the recorded
    activation counts (falling back to the plain average when all counts are
    zero); ``most_activated`` copies the expert with the highest count.
    """
    if not experts:
        raise ValueError("cannot initialize a new expert from an empty expert list")
    if strategy not in INIT_STRATEGIES:
        raise ConfigurationError(
            f"unknown init_strategy {strategy!r}; choose from {INIT_STRATEGIES}"
        )
    proto = experts[0]
    if strategy == "paper_rs":
        if rng is None:
            rng = np.random.default_rng(0)
        d = dim if dim is not None else proto.w1.value.shape[0]
        h = hidden if hidden is not None else proto.w1.value.shape[1]
        return type(proto).random(d, h, rng)
    if strategy == "most_activated":
        return experts[int(np.argmax(r_e))].copy()

    r_e = np.asarray(r_e, dtype=np.float64)
    if strategy == "w_average" and r_e.sum() == 0.0:
        log.warning("w_average requested with all-zero counts; falling back to average")
        strategy = "average"
    if strategy == "average":
        coeffs = np.full(len(experts), 1.0 / len(experts))
    else:
        coeffs = r_e / r_e.sum()

    new = proto.copy()
    for name in ("w1", "b1", "w2", "b2"):
        blended = np.zeros_like(getattr(proto, name).value)
        for c, expert in zip(coeffs, experts):
            blended += c * getattr(expert, name).value
        getattr(new, name).replace(blended)
    return new


def adapt(layer, rec: RoutingRecord, cfg: AdaptConfig, rng=None) -> AdaptReport:
    """Remove never-activated experts, then add one if tokens went unserved.

    Removal first: every expert with a zero activation count is deleted
    (its representation column, threshold and weights), keeping at least
    ``cfg.min_experts`` (the lowest-index candidates survive a clamp).
    Then, if the record holds unserved-token mass and there is room under
    ``cfg.max_experts``, one expert is appended with representation column
    r_s / |r_s| and threshold 0, its weights built per ``cfg.init_strategy``.
    The record is reset either way.
    """
    n_before = len(layer.experts)
    report = AdaptReport(new_k_total=n_before)

    candidates = [e for e in range(n_before) if rec.r_e[e] == 0]
    removable = n_before - cfg.min_experts
    if len(candidates) > removable:
        report.clamped = True
        n_drop = max(removable, 0)
        removed = candidates[len(candidates) - n_drop:]
    else:
        removed = candidates
    if removed:
        keep = [e for e in range(n_before) if e not in removed]
        router = layer.router
        router.w_g.replace(router.w_g.value[:, keep], router.w_g.grad[:, keep])
        router.g.replace(router.g.value[keep], router.g.grad[keep])
        layer.experts = [layer.experts[e] for e in keep]
        report.removed_experts = removed

    n_now = len(layer.experts)
    r_s_norm = float(np.linalg.norm(rec.r_s))
    if r_s_norm > 0.0 and n_now < cfg.max_experts:
        kept_counts = np.asarray(
            [rec.r_e[e] for e in range(n_before) if e not in removed], dtype=np.int64
        )
        new_expert = init_new_expert(
            cfg.init_strategy, layer.experts, kept_counts, rng=rng, dim=layer.d, hidden=layer.h
        )
        router = layer.router
        new_col = (rec.r_s / r_s_norm)[:, None]
        router.w_g.replace(
            np.concatenate([router.w_g.value, new_col], axis=1),
            np.concatenate([router.w_g.grad, np.zeros_like(new_col)], axis=1),
        )
        router.g.replace(
            np.concatenate([router.g.value, [0.0]]),
            np.concatenate([router.g.grad, [0.0]]),
        )
        layer.experts.append(new_expert)
        report.added = True

    report.new_k_total = len(layer.experts)
    assert report.new_k_total == n_before - len(report.removed_experts) + int(report.added)
    assert cfg.min_experts <= report.new_k_total <= cfg.max_experts

    rec.r_e = np.zeros(report.new_k_total, dtype=np.int64)
    rec.r_s = np.zeros_like(rec.r_s)
    rec.recording = False
    layer.router.validate()
    layer.validate()
    return report
