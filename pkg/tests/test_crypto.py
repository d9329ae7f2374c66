from __future__ import annotations

import hashlib
import os
import random
import subprocess
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pftlog.crypto import (
    CryptoError,
    Ed25519Scheme,
    KeyedHashScheme,
    Signature,
    digest,
    make_keys,
    merkle_prove,
    merkle_root,
    merkle_verify,
    merkle_verify_digest,
    txn_digest,
)

SHA512_EMPTY = (
    "cf83e1357eefb8bdf1542850d66d8007d620e4050b5715dc83f4a921d36ce9ce"
    "47d0d13c5d85f2b0ff8318d2877eec2f63b931bd47417a81a538327af927da3e"
)
# root of [b"a", b"b", b"c"], frozen from the independent oracle below
GOLDEN_ROOT = (
    "33b65bb971306050195eda29fe0d1b9df23b9249f6d683608abbda5f92e5a75c"
    "c88c323c10874d568ca338e8f5368534655d74c34b7841fa6db0bdb111a99e38"
)


def oracle_root(leaves):
    level = [hashlib.sha512(b"\x00" + x).digest() for x in leaves]
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [hashlib.sha512(b"\x01" + level[i] + level[i + 1]).digest() for i in range(0, len(level), 2)]
    return level[0]


def test_digest_empty_vector():
    assert digest(b"").hex() == SHA512_EMPTY


def test_digest_deterministic_and_extension_sensitive():
    rng = random.Random(7)
    seen = set()
    for _ in range(10_000):
        x = rng.randbytes(rng.randrange(0, 40))
        assert digest(x) == digest(x)
        assert digest(x) != digest(x + b"\x00")
        seen.add(digest(x + b"\x00"))
    assert len(seen) <= 10_000


def test_golden_root_matches_oracle():
    assert oracle_root([b"a", b"b", b"c"]).hex() == GOLDEN_ROOT
    assert merkle_root([b"a", b"b", b"c"]).hex() == GOLDEN_ROOT


def test_golden_root_in_fresh_process():
    code = "from pftlog.crypto import merkle_root; print(merkle_root([b'a', b'b', b'c']).hex())"
    env = dict(os.environ, PYTHONHASHSEED="123")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == GOLDEN_ROOT


@settings(max_examples=100, deadline=None)
@given(st.lists(st.binary(max_size=20), min_size=1, max_size=40))
def test_merkle_root_matches_oracle(leaves):
    assert merkle_root(leaves) == oracle_root(leaves)


@pytest.mark.parametrize("scheme", [Ed25519Scheme, KeyedHashScheme])
def test_sign_round_trip_and_wrong_key(scheme):
    signers, keys = make_keys(3, scheme)
    sig = signers[0].sign(b"hello")
    assert keys.verify(b"hello", sig)
    assert not keys.verify(b"hello", Signature(1, sig.sig))
    assert not keys.verify(b"hello", Signature(9, sig.sig))


def test_single_bit_corruptions_fail():
    signers, keys = make_keys(1)
    rng = random.Random(3)
    msg = b"the quick brown fox"
    sig = signers[0].sign(msg)
    for _ in range(1000):
        if rng.random() < 0.5:
            m = bytearray(msg)
            m[rng.randrange(len(m))] ^= 1 << rng.randrange(8)
            assert not Ed25519Scheme.verify(keys.public_keys[0], bytes(m), sig.sig)
        else:
            s = bytearray(sig.sig)
            s[rng.randrange(len(s))] ^= 1 << rng.randrange(8)
            assert not Ed25519Scheme.verify(keys.public_keys[0], msg, bytes(s))


def test_malformed_key_raises():
    with pytest.raises(CryptoError):
        Ed25519Scheme.sign(b"short", b"m")
    with pytest.raises(CryptoError):
        Ed25519Scheme.verify(b"short", b"m", bytes(64))


def test_single_leaf_proof():
    proof = merkle_prove([b"x"], 0)
    assert proof.root == txn_digest(b"x")
    assert proof.siblings == ()
    assert merkle_verify(proof, b"x")


def test_every_proof_verifies_1000_leaves():
    leaves = [b"leaf-%d" % i for i in range(1000)]
    root = merkle_root(leaves)
    for i in range(1000):
        proof = merkle_prove(leaves, i)
        assert proof.root == root
        assert len(proof.siblings) == 10
        assert merkle_verify(proof, leaves[i])


def test_proof_pairs_do_not_cross_verify():
    leaves = [b"leaf-%d" % i for i in range(16)]
    for i in range(16):
        proof = merkle_prove(leaves, i)
        for j in range(16):
            assert merkle_verify(proof, leaves[j]) == (i == j)


def test_prove_errors():
    with pytest.raises(CryptoError):
        merkle_prove([], 0)
    with pytest.raises(IndexError):
        merkle_prove([b"a"], 1)


def test_proof_with_wrong_sibling_count_rejected():
    leaves = [b"a", b"b", b"c"]
    proof = merkle_prove(leaves, 2)
    from dataclasses import replace

    assert not merkle_verify_digest(replace(proof, siblings=proof.siblings[:-1]), txn_digest(b"c"))
    assert not merkle_verify_digest(replace(proof, leaf_index=3), txn_digest(b"c"))
