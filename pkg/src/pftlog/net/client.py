"""Client library: submit transactions and fetch replica status over TCP."""
from __future__ import annotations

import asyncio
import json

from ..crypto import txn_digest
from ..messages import ClientReply, ClientRequest, StatusReply, StatusRequest
from ..receipts import Receipt, decode_receipt, verify_receipt
from .cluster import ClusterConfig
from .wire import FrameDecoder, ProtocolError, encode_frame


class SubmitTimeout(Exception):
    """No replica produced a valid receipt in time. Safe to retry."""

    def __init__(self, message: str, leader_hint: int | None):
        super().__init__(message)
        self.leader_hint = leader_hint


async def _request(host: str, port: int, msg, expect, timeout: float):
    reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
    try:
        writer.write(encode_frame(msg))
        await writer.drain()
        decoder = FrameDecoder()
        loop = asyncio.get_running_loop()
        deadline = loop.time() + timeout
        while True:
            data = await asyncio.wait_for(reader.read(1 << 16), max(deadline - loop.time(), 0.001))
            if not data:
                raise ConnectionError("connection closed")
            for reply in decoder.feed(data):
                if isinstance(reply, expect):
                    return reply
    finally:
        writer.close()


async def status_async(cluster: ClusterConfig, rid: int, timeout: float = 2.0) -> dict | None:
    r = cluster.replicas[rid]
    try:
        reply = await _request(r.host, r.port, StatusRequest(), StatusReply, timeout)
    except (OSError, ConnectionError, asyncio.TimeoutError, ProtocolError):
        return None
    return json.loads(reply.body)


async def cluster_status_async(cluster: ClusterConfig, timeout: float = 2.0) -> list[dict | None]:
    return list(await asyncio.gather(*(status_async(cluster, i, timeout) for i in range(cluster.n))))


def cluster_status(cluster: ClusterConfig, timeout: float = 2.0) -> list[dict | None]:
    return asyncio.run(cluster_status_async(cluster, timeout))


async def submit_async(cluster: ClusterConfig, txn: bytes, mode: str = "commit", timeout: float = 30.0,
                       attempt_timeout: float = 3.0, first: int = 0) -> Receipt:
    """Submit ``txn`` and wait for a verified receipt at the requested level.

    Each attempt asks one replica, which relays the request to the rest and
    answers once its own log confirms the transaction. A silent or invalid
    answer moves on to the next replica. Resubmitting the same bytes is safe:
    replicas ignore transactions they already hold.
    """
    if mode not in ("commit", "audit"):
        raise ValueError(f"unknown mode {mode!r}")
    loop = asyncio.get_running_loop()
    deadline = loop.time() + timeout
    keys = cluster.keyring()
    want = txn_digest(txn)
    target = first % cluster.n
    leader_hint = None
    last_error = "no attempt made"
    while loop.time() < deadline:
        r = cluster.replicas[target]
        budget = min(attempt_timeout, deadline - loop.time())
        try:
            reply = await _request(r.host, r.port, ClientRequest(txn, mode), ClientReply, budget)
            if reply.kind == mode and reply.txn_digest == want:
                verdict = verify_receipt(reply.body, cluster.profile, keys)
                if verdict:
                    return decode_receipt(reply.body)
                last_error = f"replica {target} sent an invalid receipt ({verdict.reason})"
            else:
                last_error = f"replica {target} answered {reply.kind}: {reply.body[:200]!r}"
        except (OSError, ConnectionError, asyncio.TimeoutError, ProtocolError) as exc:
            last_error = f"replica {target}: {type(exc).__name__} {exc}"
        status = await status_async(cluster, target, timeout=0.5)
        if status is not None:
            leader_hint = status["leader"]
        target = (target + 1) % cluster.n
    raise SubmitTimeout(f"no {mode} receipt within {timeout}s; last error: {last_error}", leader_hint)


def client_submit(cluster: ClusterConfig, txn: bytes, mode: str = "commit", timeout: float = 30.0) -> Receipt:
    return asyncio.run(submit_async(cluster, txn, mode, timeout))
