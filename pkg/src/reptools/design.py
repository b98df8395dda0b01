"""Complete randomization and rejection-sampled rerandomization."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .balance import BalanceReport, BalanceScheme, evaluate
from .errors import EmptyArm, MaxDrawsExceeded

log = logging.getLogger(__name__)

DEFAULT_MAX_DRAWS = 10**6
PROGRESS_EVERY = 10**4


class RngStream:
    """Reproducible random stream identified by ``(seed, stream_id)``.

    Backed by the counter-based Philox generator; child streams come from
    extending the seed-sequence spawn key, so streams never overlap and do
    not depend on the order in which they are created.
    """

    def __init__(self, seed, stream_id=0, _key=None):
        self.seed = int(seed) & (2**64 - 1)
        self.stream_id = int(stream_id) & (2**64 - 1)
        self.key = tuple(_key) if _key is not None else (self.stream_id,)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def derive(self, *sub_ids):
        return RngStream(self.seed, self.stream_id, self.key + tuple(int(s) for s in sub_ids))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, key={self.key})"


def as_generator(rng):
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def complete_randomization(arm_sizes, rng):
    """Uniformly random allocation with exactly ``arm_sizes[q-1]`` units on
    label ``q``."""
    sizes = np.asarray(arm_sizes, dtype=int)
    if sizes.ndim != 1 or sizes.size < 1 or np.any(sizes < 1):
        raise EmptyArm(f"every arm needs at least one unit, got {sizes.tolist()}")
    labels = np.repeat(np.arange(1, sizes.size + 1), sizes)
    return as_generator(rng).permutation(labels)


@dataclass
class DesignResult:
    assignment: np.ndarray
    draws_used: int
    acceptance_rate_estimate: float
    report: BalanceReport
    scheme: BalanceScheme
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "assignment": self.assignment.tolist(),
            "draws_used": self.draws_used,
            "acceptance_rate_estimate": self.acceptance_rate_estimate,
            "report": self.report.to_dict(),
            "scheme": self.scheme.to_dict(),
            "diagnostics": dict(self.diagnostics),
        }


def _closeness(report, scheme):
    # how close a rejected draw came: joint p, or smallest marginal p
    if scheme.uses_joint and report.joint_pvalue is not None:
        return float(report.joint_pvalue)
    p = report.marginal_pvalues
    return float(np.min(p)) if p.size else 0.0


def rerandomize(frame, scheme, rng, max_draws=DEFAULT_MAX_DRAWS):
    """Draw complete randomizations until one passes ``scheme``.

    ``frame`` supplies covariates and arm sizes; any assignment it carries is
    ignored.  Raises :class:`MaxDrawsExceeded` after ``max_draws`` failures.
    """
    if max_draws < 1:
        raise ValueError("max_draws must be at least 1")
    gen = as_generator(rng)
    best = -np.inf
    mle_failures = 0
    for draw in range(1, max_draws + 1):
        labels = complete_randomization(frame.arm_sizes, gen)
        report = evaluate(frame.with_assignment(labels), scheme)
        mle_failures += report.diagnostics.get("mle_failures", 0)
        if report.accepted:
            return DesignResult(
                assignment=labels,
                draws_used=draw,
                acceptance_rate_estimate=1.0 / draw,
                report=report,
                scheme=scheme,
                diagnostics={"mle_failures": mle_failures, "rejections": draw - 1},
            )
        best = max(best, _closeness(report, scheme))
        if draw % PROGRESS_EVERY == 0:
            log.info("rerandomize: %d rejections so far (best p-value %.4g)", draw, best)
    raise MaxDrawsExceeded(max_draws, best)


def estimate_acceptance_rate(frame, scheme, n_trials, rng):
    """Monte Carlo acceptance rate of ``scheme`` under complete randomization.

    Returns ``(rate, standard_error)``.
    """
    if n_trials < 100:
        raise ValueError("n_trials must be at least 100")
    gen = as_generator(rng)
    hits = 0
    for _ in range(n_trials):
        labels = complete_randomization(frame.arm_sizes, gen)
        hits += evaluate(frame.with_assignment(labels), scheme).accepted
    rate = hits / n_trials
    return rate, float(np.sqrt(rate * (1 - rate) / n_trials))
