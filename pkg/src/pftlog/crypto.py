"""Hashing, signatures and Merkle inclusion proofs."""
from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

DIGEST_SIZE = 64
ZERO_DIGEST = bytes(DIGEST_SIZE)

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"


class CryptoError(ValueError):
    pass


def digest(data: bytes) -> bytes:
    return hashlib.sha512(data).digest()


@dataclass(frozen=True)
class Signature:
    signer: int
    sig: bytes


class Ed25519Scheme:
    """Default scheme: deterministic 64-byte Ed25519 signatures."""

    name = "ed25519"
    signature_size = 64

    @staticmethod
    def keypair(seed: bytes) -> tuple[bytes, bytes]:
        """Derive a (private, public) raw key pair from arbitrary seed bytes."""
        raw = hashlib.sha256(seed).digest()
        private = Ed25519PrivateKey.from_private_bytes(raw)
        return raw, _public_raw(private)

    @staticmethod
    def sign(private_key: bytes, message: bytes) -> bytes:
        return _load_private(private_key).sign(message)

    @staticmethod
    def verify(public_key: bytes, message: bytes, sig: bytes) -> bool:
        try:
            _load_public(public_key).verify(sig, message)
        except InvalidSignature:
            return False
        return True


class KeyedHashScheme:
    """Simulation-only scheme with a shared secret per replica.

    It is not transferable (the verifier holds the signing key), but it keeps
    large simulation sweeps fast. Never use it on a network.
    """

    name = "keyed-hash"
    signature_size = 32

    @staticmethod
    def keypair(seed: bytes) -> tuple[bytes, bytes]:
        key = hashlib.sha256(b"sim-key" + seed).digest()
        return key, key

    @staticmethod
    def sign(private_key: bytes, message: bytes) -> bytes:
        return hashlib.blake2b(message, key=private_key, digest_size=32).digest()

    @classmethod
    def verify(cls, public_key: bytes, message: bytes, sig: bytes) -> bool:
        return hmac.compare_digest(cls.sign(public_key, message), sig)


SCHEMES = {s.name: s for s in (Ed25519Scheme, KeyedHashScheme)}


@lru_cache(maxsize=4096)
def _load_private(raw: bytes) -> Ed25519PrivateKey:
    if len(raw) != 32:
        raise CryptoError("Ed25519 private key must be 32 bytes")
    return Ed25519PrivateKey.from_private_bytes(raw)


@lru_cache(maxsize=4096)
def _load_public(raw: bytes) -> Ed25519PublicKey:
    if len(raw) != 32:
        raise CryptoError("Ed25519 public key must be 32 bytes")
    return Ed25519PublicKey.from_public_bytes(raw)


def _public_raw(private: Ed25519PrivateKey) -> bytes:
    from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

    return private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


class Signer:
    def __init__(self, replica_id: int, private_key: bytes, scheme=Ed25519Scheme):
        self.replica_id = replica_id
        self.private_key = private_key
        self.scheme = scheme

    def sign(self, message: bytes) -> Signature:
        return Signature(self.replica_id, self.scheme.sign(self.private_key, message))


class Keyring:
    """Public keys of every replica, with a memo of verification results."""

    def __init__(self, public_keys: dict[int, bytes], scheme=Ed25519Scheme):
        self.public_keys = dict(public_keys)
        self.scheme = scheme
        self._memo: dict[tuple, bool] = {}

    def verify(self, message: bytes, signature: Signature) -> bool:
        key = self.public_keys.get(signature.signer)
        if key is None:
            return False
        memo_key = (signature.signer, message, signature.sig)
        cached = self._memo.get(memo_key)
        if cached is None:
            cached = self.scheme.verify(key, message, signature.sig)
            if len(self._memo) > 200_000:
                self._memo.clear()
            self._memo[memo_key] = cached
        return cached


def make_keys(n: int, scheme=Ed25519Scheme, seed: bytes = b"") -> tuple[list[Signer], Keyring]:
    """Deterministic key material for replicas ``0..n-1``."""
    signers = []
    public = {}
    for rid in range(n):
        private, pub = scheme.keypair(seed + b"replica-%d" % rid)
        signers.append(Signer(rid, private, scheme))
        public[rid] = pub
    return signers, Keyring(public, scheme)


# Merkle trees


@dataclass(frozen=True)
class MerkleProof:
    leaf_index: int
    leaf_count: int
    siblings: tuple[bytes, ...]
    root: bytes


def _leaf_hash(leaf: bytes) -> bytes:
    return digest(LEAF_PREFIX + leaf)


def _node_hash(left: bytes, right: bytes) -> bytes:
    return digest(NODE_PREFIX + left + right)


def _levels(leaves: list[bytes] | tuple[bytes, ...]) -> list[list[bytes]]:
    if not leaves:
        raise CryptoError("Merkle tree needs at least one leaf")
    level = [_leaf_hash(leaf) for leaf in leaves]
    levels = [level]
    while len(level) > 1:
        if len(level) % 2:
            level = level + [level[-1]]
            levels[-1] = level
        level = [_node_hash(level[i], level[i + 1]) for i in range(0, len(level), 2)]
        levels.append(level)
    return levels


def merkle_root(leaves) -> bytes:
    return _levels(leaves)[-1][0]


def merkle_prove(leaves, index: int) -> MerkleProof:
    levels = _levels(leaves)
    if not 0 <= index < len(leaves):
        raise IndexError(f"leaf index {index} out of range for {len(leaves)} leaves")
    siblings = []
    pos = index
    for level in levels[:-1]:
        siblings.append(level[pos ^ 1])
        pos //= 2
    return MerkleProof(index, len(leaves), tuple(siblings), levels[-1][0])


def txn_digest(txn: bytes) -> bytes:
    """Digest naming a transaction; equal to its Merkle leaf hash."""
    return _leaf_hash(txn)


def merkle_verify(proof: MerkleProof, leaf: bytes) -> bool:
    return merkle_verify_digest(proof, _leaf_hash(leaf))


def merkle_verify_digest(proof: MerkleProof, leaf_digest: bytes) -> bool:
    if not 0 <= proof.leaf_index < proof.leaf_count:
        return False
    if len(proof.siblings) != (proof.leaf_count - 1).bit_length():
        return False
    node = leaf_digest
    pos = proof.leaf_index
    for sibling in proof.siblings:
        node = _node_hash(node, sibling) if pos % 2 == 0 else _node_hash(sibling, node)
        pos //= 2
    return hmac.compare_digest(node, proof.root)
