"""Fault-model arithmetic: node bounds, quorum sizes and deployment plans.

Faults are budgeted per platform for safety (``pi_safe``) and liveness
(``pi_live``), plus ``c`` independent node crashes. Everything downstream
only consumes the derived :class:`QuorumProfile`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass


class ConfigError(ValueError):
    pass


class InvalidParameter(ConfigError):
    pass


class ConfigRejected(ConfigError):
    """Raised when a configuration has too few nodes for its fault budget."""

    def __init__(self, n: int, required: int):
        self.n = n
        self.required = required
        self.deficit = required - n
        super().__init__(
            f"configuration needs {required} nodes but has {n} (deficit {self.deficit})"
        )


def _check_nonneg(**values: int) -> None:
    for name, value in values.items():
        if value < 0:
            raise InvalidParameter(f"{name} must be >= 0, got {value}")


def min_nodes(c: int, f_live: int, f_safe: int) -> int:
    """Smallest cluster tolerating the given crash, liveness and safety budgets."""
    _check_nonneg(c=c, f_live=f_live, f_safe=f_safe)
    return 2 * (c + f_live) + f_safe + 1


def derive_f(platform_sizes: list[int] | tuple[int, ...], pi: int) -> int:
    """Number of nodes lost when the ``pi`` largest platforms are compromised."""
    _check_nonneg(pi=pi)
    if pi > len(platform_sizes):
        raise InvalidParameter(
            f"pi={pi} exceeds platform count {len(platform_sizes)}"
        )
    return sum(sorted(platform_sizes, reverse=True)[:pi])


def min_platforms(pi_safe: int, pi_live: int) -> int:
    _check_nonneg(pi_safe=pi_safe, pi_live=pi_live)
    if pi_live == 0:
        return pi_safe + 1
    return 2 * pi_live + pi_safe + 1


@dataclass(frozen=True)
class PftParameters:
    platform_sizes: tuple[int, ...]
    pi_safe: int = 0
    pi_live: int = 0
    c: int = 0

    def __post_init__(self):
        object.__setattr__(self, "platform_sizes", tuple(self.platform_sizes))
        if not self.platform_sizes:
            raise InvalidParameter("at least one platform is required")
        if any(size < 1 for size in self.platform_sizes):
            raise InvalidParameter("every platform needs at least one node")
        _check_nonneg(pi_safe=self.pi_safe, pi_live=self.pi_live, c=self.c)
        for name in ("pi_safe", "pi_live"):
            if getattr(self, name) > len(self.platform_sizes):
                raise InvalidParameter(f"{name} exceeds platform count")

    @property
    def n(self) -> int:
        return sum(self.platform_sizes)


@dataclass(frozen=True)
class QuorumProfile:
    n: int
    u: int
    f_safe: int
    f_live: int
    commit_quorum: int
    audit_quorum: int
    fast_quorum: int
    fast_path_enabled: bool

    @classmethod
    def from_faults(cls, n: int, f_safe: int, f_live: int = 0, c: int = 0) -> QuorumProfile:
        u = f_live + c
        required = min_nodes(c, f_live, f_safe)
        if n < required:
            raise ConfigRejected(n, required)
        return cls(
            n=n,
            u=u,
            f_safe=f_safe,
            f_live=f_live,
            commit_quorum=n // 2 + 1,
            audit_quorum=n - u,
            fast_quorum=n,
            fast_path_enabled=n - u > 2 * f_safe,
        )

    @property
    def amplify_threshold(self) -> int:
        """View-change messages needed before a replica joins a view change."""
        return self.f_safe + 1

    @property
    def view_change_quorum(self) -> int:
        return self.audit_quorum

    @property
    def fast_appearances(self) -> int:
        """Summaries a batch must appear in to have possibly gone fast."""
        return self.n - (self.u + self.f_safe)

    def to_dict(self) -> dict:
        return asdict(self)


def validate_config(params: PftParameters) -> QuorumProfile:
    f_safe = derive_f(params.platform_sizes, params.pi_safe)
    f_live = derive_f(params.platform_sizes, params.pi_live)
    return QuorumProfile.from_faults(params.n, f_safe, f_live, params.c)


def plan_deployment(c: int, pi_safe: int, pi_live: int) -> list[int]:
    """Equal-size platforms of ``2c+1`` nodes, as few as the budgets allow."""
    _check_nonneg(c=c, pi_safe=pi_safe, pi_live=pi_live)
    return [2 * c + 1] * min_platforms(pi_safe, pi_live)


def manifest(params: PftParameters) -> dict:
    """Structured description of a deployment for operators."""
    profile = validate_config(params)
    return {
        "platforms": {f"p{i}": size for i, size in enumerate(params.platform_sizes)},
        "pi_safe": params.pi_safe,
        "pi_live": params.pi_live,
        "c": params.c,
        "min_nodes": min_nodes(params.c, profile.f_live, profile.f_safe),
        "min_platforms": min_platforms(params.pi_safe, params.pi_live),
        "profile": profile.to_dict(),
    }


def timeout_floor(signing_interval: int, delta: int) -> int:
    """View timers must strictly exceed this many ticks to guarantee progress."""
    return (4 * signing_interval + 5) * delta


def liveness_bound(start: int, u: int, view_timeout: int, signing_interval: int, delta: int) -> int:
    """Latest time by which a request submitted at ``start`` after GST is audited."""
    return start + u * view_timeout + timeout_floor(signing_interval, delta)
