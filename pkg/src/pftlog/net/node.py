"""TCP server driving one replica state machine.

Socket readers feed an ordered queue; a single consumer task runs the
machine, persists what changed, and only then releases the machine's sends.
Outgoing traffic to each peer goes through a :class:`PeerLink` that owns one
connection and reconnects with exponential backoff. Protocol messages are
idempotent, so frames resent after a reconnect are harmless.
"""
from __future__ import annotations

import asyncio
import collections
import json
import logging
import signal
from dataclasses import dataclass
from pathlib import Path

from ..crypto import txn_digest
from ..kv import VersionedStore
from ..ledger import LedgerError
from ..messages import ClientReply, ClientRequest, Hello, StatusReply, StatusRequest
from ..receipts import NotReady, ReceiptError, make_audit_receipt, make_commit_receipt
from ..replica import Broadcast, CancelTimer, Note, Replica, ReplicaConfig, Send, SetTimer
from .cluster import ClusterConfig
from .storage import DurableLog
from .wire import FrameDecoder, ProtocolError, encode_frame, error_frame

log = logging.getLogger("pftlog.net")

MODES = ("commit", "audit")
MAX_BACKLOG = 50_000


class FatalError(Exception):
    """Startup failure the operator has to fix (bind error, corrupt log)."""


class PeerLink:
    """Outgoing connection to one peer with buffering and reconnect."""

    def __init__(self, owner: int, peer: int, host: str, port: int,
                 min_backoff: float = 0.05, max_backoff: float = 2.0):
        self.owner, self.peer = owner, peer
        self.host, self.port = host, port
        self.min_backoff, self.max_backoff = min_backoff, max_backoff
        self.backlog: collections.deque[bytes] = collections.deque(maxlen=MAX_BACKLOG)
        self.ready = asyncio.Event()
        self.connected = False
        self.task: asyncio.Task | None = None

    def send(self, frame: bytes) -> None:
        self.backlog.append(frame)
        self.ready.set()

    def start(self) -> None:
        self.task = asyncio.create_task(self._run())

    async def _run(self) -> None:
        backoff = self.min_backoff
        while True:
            writer = None
            try:
                reader, writer = await asyncio.open_connection(self.host, self.port)
                writer.write(encode_frame(Hello(self.owner)))
                self.connected = True
                backoff = self.min_backoff
                # the peer never talks on this connection, so any read result means it went away
                closed = asyncio.ensure_future(reader.read(1024))
                try:
                    while not closed.done():
                        wake = asyncio.ensure_future(self.ready.wait())
                        try:
                            await asyncio.wait({wake, closed}, return_when=asyncio.FIRST_COMPLETED)
                        finally:
                            wake.cancel()
                        if closed.done():
                            break
                        self.ready.clear()
                        while self.backlog:
                            writer.write(self.backlog.popleft())
                        await writer.drain()
                finally:
                    closed.cancel()
            except (OSError, ConnectionError):
                pass
            finally:
                self.connected = False
                if writer is not None:
                    writer.close()
            await asyncio.sleep(backoff)
            backoff = min(backoff * 2, self.max_backoff)


@dataclass
class Waiter:
    writer: asyncio.StreamWriter
    mode: str


class ReplicaServer:
    def __init__(self, cluster: ClusterConfig, rid: int, data_dir: str | Path | None = None,
                 listen: tuple[str, int] | None = None):
        if not 0 <= rid < cluster.n:
            raise FatalError(f"replica id {rid} is not in the cluster")
        self.cluster = cluster
        self.id = rid
        self.data_dir = Path(data_dir) if data_dir is not None else cluster.data_dir(rid)
        self.listen = listen or cluster.listen_address(rid)
        self.config = ReplicaConfig(
            replica_id=rid,
            profile=cluster.profile,
            signing_interval=cluster.signing_interval,
            lag_window=cluster.lag_window,
            view_timeout=cluster.view_timeout_ms,
            timeout_backoff=cluster.timeout_backoff,
            max_batch_size=cluster.max_batch_size,
        )
        self.replica: Replica | None = None
        self.durable: DurableLog | None = None
        self.queue: asyncio.Queue = asyncio.Queue()
        self.links: dict[int, PeerLink] = {}
        self.timers: dict[str, asyncio.TimerHandle] = {}
        self.waiters: dict[bytes, list[Waiter]] = {}
        self.server: asyncio.base_events.Server | None = None
        self.tasks: list[asyncio.Task] = []
        self.restored = False
        self.inbound: set[asyncio.StreamWriter] = set()
        self._t0 = 0.0

    def now(self) -> int:
        return int((asyncio.get_running_loop().time() - self._t0) * 1000)

    # lifecycle

    async def start(self) -> None:
        self._t0 = asyncio.get_running_loop().time()
        self.durable = DurableLog(self.data_dir, fsync=self.cluster.fsync)
        self.replica = Replica(self.config, self.cluster.signer(self.id), self.cluster.keyring(),
                               app=VersionedStore())
        self.restored = self.durable.restore(self.replica)
        try:
            self.server = await asyncio.start_server(self._on_connection, *self.listen)
        except OSError as exc:
            self.durable.close()
            raise FatalError(f"cannot bind {self.listen[0]}:{self.listen[1]}: {exc}") from None
        for peer in self.cluster.replicas:
            if peer.replica_id != self.id:
                link = PeerLink(self.id, peer.replica_id, peer.host, peer.port)
                link.start()
                self.links[peer.replica_id] = link
        self.tasks.append(asyncio.create_task(self._consume()))
        now = self.now()
        if self.restored:
            log.info("replica %d recovered view=%d commit=%d audit=%d", self.id,
                     self.replica.v_curr, self.replica.commit_index, self.replica.audit_index)
            self._execute(self.replica.recover(now))
        else:
            self._execute(self.replica.start(now))

    async def stop(self) -> None:
        if self.server is not None:
            self.server.close()
        for handle in self.timers.values():
            handle.cancel()
        for writer in list(self.inbound):
            writer.close()
        tasks = self.tasks + [link.task for link in self.links.values() if link.task]
        for task in tasks:
            task.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        if self.durable is not None:
            self.durable.close()

    async def serve_forever(self) -> None:
        await self.start()
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, stop.set)
            except (NotImplementedError, RuntimeError):
                pass
        consumer = self.tasks[0]
        waiter = asyncio.create_task(stop.wait())
        await asyncio.wait({consumer, waiter}, return_when=asyncio.FIRST_COMPLETED)
        waiter.cancel()
        if consumer.done() and consumer.exception() is not None:
            await self.stop()
            raise consumer.exception()
        await self.stop()

    # inbound

    async def _on_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        decoder = FrameDecoder()
        peer: int | None = None
        self.inbound.add(writer)
        try:
            while True:
                data = await reader.read(1 << 16)
                if not data:
                    break
                for msg in decoder.feed(data):
                    if peer is None and isinstance(msg, Hello):
                        if not 0 <= msg.sender < self.cluster.n or msg.sender == self.id:
                            raise ProtocolError(f"bad sender id {msg.sender}")
                        peer = msg.sender
                    elif peer is not None:
                        self.queue.put_nowait(("msg", peer, msg))
                    elif isinstance(msg, StatusRequest):
                        writer.write(encode_frame(StatusReply(self.status_json().encode())))
                    elif isinstance(msg, ClientRequest):
                        self.queue.put_nowait(("client", writer, msg))
                    else:
                        raise ProtocolError(f"unexpected {type(msg).__name__} from a client")
        except ProtocolError as exc:
            log.warning("replica %d: protocol error, resetting connection: %s", self.id, exc)
            try:
                writer.write(error_frame(str(exc)))
            except (OSError, RuntimeError):
                pass
        except (OSError, ConnectionError):
            pass
        finally:
            self.inbound.discard(writer)
            writer.close()

    # the machine

    async def _consume(self) -> None:
        while True:
            item = await self.queue.get()
            try:
                self._process(item)
            except (ValueError, LookupError, LedgerError) as exc:
                # a malformed peer message must not take the replica down
                log.warning("replica %d: dropped %s event: %r", self.id, item[0], exc)

    def _process(self, item) -> None:
        r = self.replica
        now = self.now()
        kind = item[0]
        if kind == "msg":
            _, src, msg = item
            if isinstance(msg, ClientRequest):
                self._execute(r.submit(now, msg.txn))
            else:
                self._execute(r.on_message(now, src, msg))
        elif kind == "timer":
            _, name, handle = item
            if self.timers.get(name) is handle:
                del self.timers[name]
                self._execute(r.on_timer(now, name))
        elif kind == "client":
            _, writer, msg = item
            if msg.mode not in MODES:
                self._reply(writer, ClientReply(txn_digest(msg.txn), "error", b"unknown mode"))
                return
            self.waiters.setdefault(msg.txn, []).append(Waiter(writer, msg.mode))
            frame = encode_frame(msg)
            for link in self.links.values():
                link.send(frame)
            self._execute(r.submit(now, msg.txn))

    def _execute(self, effects) -> None:
        # write-ahead: everything the effects depend on is on disk before any send
        if self.durable.stage(self.replica):
            self.durable.flush()
        for eff in effects:
            kind = type(eff)
            if kind is Send:
                link = self.links.get(eff.dst)
                if link is not None:
                    link.send(encode_frame(eff.msg))
            elif kind is Broadcast:
                frame = encode_frame(eff.msg)
                for link in self.links.values():
                    link.send(frame)
            elif kind is SetTimer:
                self._arm(eff.name, eff.delay)
            elif kind is CancelTimer:
                handle = self.timers.pop(eff.name, None)
                if handle is not None:
                    handle.cancel()
            elif kind is Note and eff.kind in ("rollback", "enter_view", "audit"):
                log.info("replica %d: %s %s", self.id, eff.kind,
                         {k: v for k, v in eff.data.items() if isinstance(v, int)})
        if self.waiters:
            self._answer_clients()

    def _arm(self, name: str, delay: int) -> None:
        old = self.timers.pop(name, None)
        if old is not None:
            old.cancel()
        loop = asyncio.get_running_loop()
        holder: list = []
        handle = loop.call_later(delay / 1000, lambda: self.queue.put_nowait(("timer", name, holder[0])))
        holder.append(handle)
        self.timers[name] = handle

    # clients

    def _answer_clients(self) -> None:
        r = self.replica
        for txn in list(self.waiters):
            seq = r.txn_seq.get(txn)
            if seq is None or seq > r.commit_index:
                continue
            batch = r.branch.at(seq)
            remaining = []
            for w in self.waiters[txn]:
                if w.writer.is_closing():
                    continue
                try:
                    if w.mode == "commit":
                        receipt = make_commit_receipt(txn, batch, r.signer, r.profile)
                    elif seq <= r.audit_index:
                        receipt = make_audit_receipt(txn, batch, r)
                    else:
                        remaining.append(w)
                        continue
                except NotReady:
                    remaining.append(w)
                    continue
                except ReceiptError as exc:
                    self._reply(w.writer, ClientReply(txn_digest(txn), "error", str(exc).encode()))
                    continue
                self._reply(w.writer, ClientReply(txn_digest(txn), w.mode, receipt.encode()))
            if remaining:
                self.waiters[txn] = remaining
            else:
                del self.waiters[txn]

    @staticmethod
    def _reply(writer: asyncio.StreamWriter, reply: ClientReply) -> None:
        try:
            writer.write(encode_frame(reply))
        except (OSError, RuntimeError):
            pass

    def status(self) -> dict:
        r = self.replica
        out = r.node_state().to_dict()
        out.update(lag_window=self.config.lag_window, pending=len(r.pending_txns),
                   restored=self.restored,
                   recent={b.seq: b.digest.hex() for b in r.branch.slice(max(r.audit_index - 8, 0))[-32:]},
                   peers_connected=sorted(p for p, link in self.links.items() if link.connected))
        return out

    def status_json(self) -> str:
        return json.dumps(self.status(), sort_keys=True)


def replica_main(cluster: ClusterConfig, rid: int, data_dir: str | Path | None = None,
                 listen: tuple[str, int] | None = None) -> None:
    """Run one replica until SIGINT/SIGTERM."""
    server = ReplicaServer(cluster, rid, data_dir, listen)
    asyncio.run(server.serve_forever())
