"""Cluster description files and local key material.

A cluster file is YAML::

    pi_safe: 2
    pi_live: 0
    c: 1
    signing_interval: 1
    view_timeout_ms: 500
    lag_window: 64
    replicas:
      - {id: 0, address: "127.0.0.1:7100", platform: 0, public_key: "ab12..."}
      ...

Private keys live next to it in ``keys/replica-<id>.key`` (hex). The
environment variables ``PFTLOG_DATA_DIR`` and ``PFTLOG_LISTEN`` override
the data directory and the listen address of the replica being started.
"""
from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..config import ConfigError, PftParameters, QuorumProfile, validate_config
from ..crypto import Ed25519Scheme, Keyring, Signer

DATA_DIR_ENV = "PFTLOG_DATA_DIR"
LISTEN_ENV = "PFTLOG_LISTEN"


@dataclass(frozen=True)
class ReplicaAddress:
    replica_id: int
    host: str
    port: int
    platform: int
    public_key: bytes

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = str(text).rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"address {text!r} is not host:port")
    return host or "127.0.0.1", int(port)


@dataclass
class ClusterConfig:
    replicas: list[ReplicaAddress]
    pi_safe: int = 0
    pi_live: int = 0
    c: int = 0
    signing_interval: int = 1
    view_timeout_ms: int = 500
    timeout_backoff: int = 2
    lag_window: int = 64
    max_batch_size: int = 64
    fsync: bool = True
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        ids = [r.replica_id for r in self.replicas]
        if sorted(ids) != list(range(len(ids))):
            raise ConfigError(f"replica ids must be 0..{len(ids) - 1}, got {sorted(ids)}")
        self.replicas = sorted(self.replicas, key=lambda r: r.replica_id)
        self.profile = validate_config(self.params)

    @property
    def n(self) -> int:
        return len(self.replicas)

    @property
    def params(self) -> PftParameters:
        sizes = Counter(r.platform for r in self.replicas)
        return PftParameters(tuple(sizes[p] for p in sorted(sizes)), self.pi_safe, self.pi_live, self.c)

    @property
    def quorum_profile(self) -> QuorumProfile:
        return self.profile

    def keyring(self) -> Keyring:
        return Keyring({r.replica_id: r.public_key for r in self.replicas})

    def key_path(self, rid: int) -> Path:
        return self.base_dir / "keys" / f"replica-{rid}.key"

    def signer(self, rid: int) -> Signer:
        path = self.key_path(rid)
        try:
            private = bytes.fromhex(path.read_text().strip())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read private key {path}: {exc}") from None
        return Signer(rid, private)

    def data_dir(self, rid: int) -> Path:
        base = os.environ.get(DATA_DIR_ENV)
        root = Path(base) if base else self.base_dir / "data"
        return root / f"replica-{rid}"

    def listen_address(self, rid: int) -> tuple[str, int]:
        override = os.environ.get(LISTEN_ENV)
        if override:
            return parse_address(override)
        r = self.replicas[rid]
        return r.host, r.port

    def to_dict(self) -> dict:
        return {
            "pi_safe": self.pi_safe,
            "pi_live": self.pi_live,
            "c": self.c,
            "signing_interval": self.signing_interval,
            "view_timeout_ms": self.view_timeout_ms,
            "timeout_backoff": self.timeout_backoff,
            "lag_window": self.lag_window,
            "max_batch_size": self.max_batch_size,
            "fsync": self.fsync,
            "replicas": [
                {"id": r.replica_id, "address": r.address, "platform": r.platform,
                 "public_key": r.public_key.hex()}
                for r in self.replicas
            ],
        }


_SCALARS = {
    "pi_safe": int, "pi_live": int, "c": int, "signing_interval": int, "view_timeout_ms": int,
    "timeout_backoff": int, "lag_window": int, "max_batch_size": int, "fsync": bool,
}


def cluster_from_dict(data: dict, base_dir: Path | None = None) -> ClusterConfig:
    if not isinstance(data, dict):
        raise ConfigError("cluster file must be a mapping")
    unknown = set(data) - set(_SCALARS) - {"replicas"}
    if unknown:
        raise ConfigError(f"unknown cluster keys: {sorted(unknown)}")
    kwargs = {}
    for key, kind in _SCALARS.items():
        if key in data:
            value = data[key]
            if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
                raise ConfigError(f"{key} must be {kind.__name__}")
            kwargs[key] = value
    entries = data.get("replicas")
    if not isinstance(entries, list) or not entries:
        raise ConfigError("replicas must be a non-empty list")
    replicas = []
    for i, entry in enumerate(entries):
        try:
            host, port = parse_address(entry["address"])
            key = bytes.fromhex(entry["public_key"])
            replicas.append(ReplicaAddress(int(entry["id"]), host, port, int(entry.get("platform", i)), key))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"replica entry {i} is malformed: {exc}") from None
    return ClusterConfig(replicas, base_dir=base_dir or Path.cwd(), **kwargs)


def load_cluster(path: str | os.PathLike) -> ClusterConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot load cluster file {path}: {exc}") from None
    return cluster_from_dict(data, path.resolve().parent)


def write_cluster(cluster: ClusterConfig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cluster.to_dict(), sort_keys=False))
    return path


def init_local_cluster(directory: str | os.PathLike, params: PftParameters, base_port: int = 7100,
                       host: str = "127.0.0.1", **settings) -> ClusterConfig:
    """Create keys and a cluster file for ``params`` with every replica on ``host``."""
    directory = Path(directory)
    (directory / "keys").mkdir(parents=True, exist_ok=True)
    replicas = []
    rid = 0
    for platform, size in enumerate(params.platform_sizes):
        for _ in range(size):
            private, public = Ed25519Scheme.keypair(os.urandom(32))
            key_file = directory / "keys" / f"replica-{rid}.key"
            key_file.write_text(private.hex() + "\n")
            key_file.chmod(0o600)
            replicas.append(ReplicaAddress(rid, host, base_port + rid, platform, public))
            rid += 1
    cluster = ClusterConfig(replicas, params.pi_safe, params.pi_live, params.c,
                            base_dir=directory.resolve(), **settings)
    write_cluster(cluster, directory / "cluster.yaml")
    return cluster
