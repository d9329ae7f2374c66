"""Protocol and client messages exchanged between replicas and clients."""
from __future__ import annotations

from dataclasses import dataclass

from .crypto import DIGEST_SIZE
from .encoding import Reader, Writer
from .ledger import Batch, Vote, read_signature, write_signature
from .view_change import NewViewMsg, ViewChangeMsg


@dataclass(frozen=True, eq=False)
class AppendEntry:
    batch: Batch


@dataclass(frozen=True)
class SyncRequest:
    """Ask for the batch ``want`` and its ancestors above ``stop_seq``."""

    want: bytes
    stop_seq: int


@dataclass(frozen=True, eq=False)
class SyncResponse:
    batches: tuple[Batch, ...]  # descending from the requested digest


@dataclass(frozen=True)
class NewViewRequest:
    view: int


@dataclass(frozen=True)
class ClientRequest:
    txn: bytes
    mode: str = "commit"  # or "audit"


@dataclass(frozen=True)
class ClientReply:
    txn_digest: bytes
    kind: str  # "commit", "audit" or "error"
    body: bytes = b""


@dataclass(frozen=True)
class StatusRequest:
    pass


@dataclass(frozen=True)
class StatusReply:
    body: bytes  # JSON snapshot


@dataclass(frozen=True)
class Hello:
    sender: int


def _enc_vote(w: Writer, m: Vote) -> None:
    w.u64(m.view).fixed(m.batch_digest, DIGEST_SIZE).u64(m.batch_seq).u32(m.voter)
    w.u32(len(m.sigs))
    for seq, sig in m.sigs:
        w.u64(seq)
        write_signature(w, sig)


def _dec_vote(r: Reader) -> Vote:
    view = r.u64()
    batch_digest = r.fixed(DIGEST_SIZE)
    seq, voter = r.u64(), r.u32()
    sigs = tuple((r.u64(), read_signature(r)) for _ in range(r.count(1 << 16)))
    return Vote(view, batch_digest, seq, voter, sigs)


def _enc_sync_resp(w: Writer, m: SyncResponse) -> None:
    w.u32(len(m.batches))
    for batch in m.batches:
        batch.encode_into(w)


def _dec_sync_resp(r: Reader) -> SyncResponse:
    return SyncResponse(tuple(Batch.decode(r.blob()) for _ in range(r.count(1 << 16))))


def _text(r: Reader) -> str:
    return r.blob(1 << 16).decode("utf-8")


CODECS = {
    AppendEntry: (1, lambda w, m: m.batch.encode_into(w), lambda r: AppendEntry(Batch.decode(r.blob()))),
    Vote: (2, _enc_vote, _dec_vote),
    ViewChangeMsg: (3, lambda w, m: m.encode_into(w), ViewChangeMsg.decode_from),
    NewViewMsg: (4, lambda w, m: m.encode_into(w), NewViewMsg.decode_from),
    SyncRequest: (5, lambda w, m: w.fixed(m.want, DIGEST_SIZE).u64(m.stop_seq),
                  lambda r: SyncRequest(r.fixed(DIGEST_SIZE), r.u64())),
    SyncResponse: (6, _enc_sync_resp, _dec_sync_resp),
    NewViewRequest: (7, lambda w, m: w.u64(m.view), lambda r: NewViewRequest(r.u64())),
    ClientRequest: (8, lambda w, m: w.blob(m.txn).blob(m.mode.encode()),
                    lambda r: ClientRequest(r.blob(), _text(r))),
    ClientReply: (9, lambda w, m: w.fixed(m.txn_digest, DIGEST_SIZE).blob(m.kind.encode()).blob(m.body),
                  lambda r: ClientReply(r.fixed(DIGEST_SIZE), _text(r), r.blob())),
    StatusRequest: (10, lambda w, m: None, lambda r: StatusRequest()),
    StatusReply: (11, lambda w, m: w.blob(m.body), lambda r: StatusReply(r.blob())),
    Hello: (12, lambda w, m: w.u32(m.sender), lambda r: Hello(r.u32())),
}

TYPE_CODES = {cls: code for cls, (code, _, _) in CODECS.items()}
DECODERS = {code: dec for _, (code, _, dec) in CODECS.items()}


def encode_message(msg) -> tuple[int, bytes]:
    code, enc, _ = CODECS[type(msg)]
    w = Writer()
    enc(w, msg)
    return code, w.getvalue()


def decode_message(code: int, body: bytes):
    try:
        dec = DECODERS[code]
    except KeyError:
        raise ValueError(f"unknown message type {code}") from None
    r = Reader(body)
    msg = dec(r)
    r.done()
    return msg
