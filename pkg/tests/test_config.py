from __future__ import annotations

from itertools import combinations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pftlog.config import (
    ConfigRejected,
    InvalidParameter,
    PftParameters,
    QuorumProfile,
    derive_f,
    liveness_bound,
    manifest,
    min_nodes,
    min_platforms,
    plan_deployment,
    timeout_floor,
    validate_config,
)


@pytest.mark.parametrize("args,expected", [((0, 1, 1), 4), ((1, 3, 3), 12), ((0, 0, 0), 1)])
def test_min_nodes_examples(args, expected):
    assert min_nodes(*args) == expected


def test_min_nodes_rejects_negative():
    with pytest.raises(InvalidParameter):
        min_nodes(-1, 0, 0)


@pytest.mark.parametrize("sizes,pi,expected", [([3, 1], 1, 3), ([2, 2, 2, 1], 1, 2), ([1, 1, 1, 1], 0, 0)])
def test_derive_f_examples(sizes, pi, expected):
    assert derive_f(sizes, pi) == expected


def test_derive_f_pi_beyond_platforms():
    with pytest.raises(InvalidParameter):
        derive_f([1, 1], 3)


@pytest.mark.parametrize(
    "sizes,c,n,u,f_safe,commit,audit",
    [
        ((1, 1, 1, 1), 1, 4, 1, 1, 3, 3),
        ((2, 2, 2, 1), 2, 7, 2, 2, 4, 5),
        ((2, 2, 2, 2, 1), 3, 9, 3, 2, 5, 6),
    ],
)
def test_validate_config_evaluation_profiles(sizes, c, n, u, f_safe, commit, audit):
    prof = validate_config(PftParameters(sizes, pi_safe=1, pi_live=0, c=c))
    assert (prof.n, prof.u, prof.f_safe, prof.commit_quorum, prof.audit_quorum) == (n, u, f_safe, commit, audit)
    assert prof.fast_quorum == n
    assert prof.fast_path_enabled


def test_validate_config_reports_deficit():
    with pytest.raises(ConfigRejected) as info:
        validate_config(PftParameters((1, 1, 1), pi_safe=1, c=1))
    assert info.value.required == 4
    assert info.value.deficit == 1
    assert "deficit 1" in str(info.value)


def test_fast_path_disabled_on_boundary():
    # n - u == 2 f_safe: the unanimous quorum is not enough
    prof = validate_config(PftParameters((1, 1, 1, 1, 1), pi_safe=2, c=1))
    assert prof.n - prof.u == 2 * prof.f_safe
    assert not prof.fast_path_enabled


@pytest.mark.parametrize("args,expected", [((1, 0), 2), ((1, 1), 4), ((0, 0), 1)])
def test_min_platforms_examples(args, expected):
    assert min_platforms(*args) == expected


@pytest.mark.parametrize("args,expected", [((1, 1, 0), [3, 3]), ((0, 1, 1), [1, 1, 1, 1]), ((0, 0, 0), [1])])
def test_plan_deployment_examples(args, expected):
    assert plan_deployment(*args) == expected


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 4), st.integers(0, 4), st.integers(0, 4))
def test_plan_deployment_always_validates(c, pi_safe, pi_live):
    sizes = plan_deployment(c, pi_safe, pi_live)
    prof = validate_config(PftParameters(sizes, pi_safe, pi_live, c))
    assert prof.n == sum(sizes)
    assert prof.n >= min_nodes(c, prof.f_live, prof.f_safe)


def _min_intersection(n: int, q: int) -> int:
    # brute force over every pair of quorums
    members = range(n)
    return min(len(set(a) & set(b)) for a in combinations(members, q) for b in combinations(members, q))


@pytest.mark.parametrize("n", range(1, 10))
def test_quorum_intersection_brute_force(n):
    for f_safe in range(n):
        for u in range(n):
            try:
                prof = QuorumProfile.from_faults(n, f_safe, f_live=0, c=u)
            except ConfigRejected:
                continue
            # two commit quorums always share a node
            assert _min_intersection(n, prof.commit_quorum) >= 1
            # two audit quorums share an honest node
            assert _min_intersection(n, prof.audit_quorum) > prof.f_safe
            # a commit quorum and an audit quorum overlap
            members = range(n)
            overlap = min(len(set(a) & set(b)) for a in combinations(members, prof.commit_quorum)
                          for b in combinations(members, prof.audit_quorum))
            assert overlap >= 1
            if prof.fast_path_enabled:
                # a fast quorum's survivors after u losses still outnumber 2 f_safe
                assert prof.n - prof.u > 2 * prof.f_safe


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=6), st.data())
def test_validate_config_matches_formula(sizes, data):
    pi_safe = data.draw(st.integers(0, len(sizes)))
    pi_live = data.draw(st.integers(0, len(sizes)))
    c = data.draw(st.integers(0, 3))
    params = PftParameters(sizes, pi_safe, pi_live, c)
    ordered = sorted(sizes, reverse=True)
    f_safe, f_live = sum(ordered[:pi_safe]), sum(ordered[:pi_live])
    n = sum(sizes)
    if n < 2 * (c + f_live) + f_safe + 1:
        with pytest.raises(ConfigRejected):
            validate_config(params)
        return
    prof = validate_config(params)
    assert prof.u == f_live + c
    assert prof.commit_quorum == n // 2 + 1
    assert prof.audit_quorum == n - prof.u
    assert prof.fast_appearances == n - prof.u - f_safe
    assert prof.fast_path_enabled == (n - prof.u > 2 * f_safe)


def test_parameters_reject_bad_platforms():
    with pytest.raises(InvalidParameter):
        PftParameters(())
    with pytest.raises(InvalidParameter):
        PftParameters((1, 0))
    with pytest.raises(InvalidParameter):
        PftParameters((1, 1), pi_safe=3)


def test_manifest_lists_platforms_and_profile():
    out = manifest(PftParameters((2, 2, 2, 1), pi_safe=1, c=2))
    assert out["platforms"] == {"p0": 2, "p1": 2, "p2": 2, "p3": 1}
    assert out["profile"]["audit_quorum"] == 5
    assert out["min_platforms"] == 2


def test_timeout_floor_substitution():
    assert timeout_floor(10, 1) == 45
    assert liveness_bound(100, 2, 60, 1, 5) == 100 + 120 + 45
