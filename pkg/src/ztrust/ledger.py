"""Simulated blockchain: update verification, round-robin mining, chain validation.

Hashing is SHA-256 over a fixed little-endian layout:

* record digest: ``device_id:i64 | round:i64 | dim:i64 | update:f64[dim]``
* block hash: ``index:i64 | prev_hash:32B | round:i64 | miner_id:i64 |
  n_records:i64 | per record (device_id:i64, round:i64, submitted_at:f64,
  digest:32B) | has_snapshot:u8 | [n:i64 | per device sorted by id
  (device_id:i64, trust:f64)]``

Miners are honest and alternate by round; there is no proof of work.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

ZERO_HASH = bytes(32)
REJECT_REASONS = ("dim", "nonfinite", "norm", "stale_round", "duplicate", "digest")


def update_digest(update, device_id: int, round_: int) -> bytes:
    vec = np.ascontiguousarray(update, dtype="<f8")
    h = hashlib.sha256(struct.pack("<qqq", device_id, round_, vec.size))
    h.update(vec.tobytes())
    return h.digest()


@dataclass
class UpdateRecord:
    device_id: int
    round: int
    update: np.ndarray
    update_digest: bytes
    submitted_at: float = 0.0

    @classmethod
    def create(cls, device_id, round_, update, submitted_at=0.0):
        update = np.asarray(update, dtype=np.float64)
        return cls(int(device_id), int(round_), update, update_digest(update, device_id, round_), float(submitted_at))

    def digest_ok(self) -> bool:
        return update_digest(self.update, self.device_id, self.round) == self.update_digest


@dataclass
class Block:
    index: int
    prev_hash: bytes
    round: int
    records: list
    trust_snapshot: dict | None
    miner_id: int
    block_hash: bytes = ZERO_HASH

    def compute_hash(self) -> bytes:
        h = hashlib.sha256(struct.pack("<q", self.index))
        h.update(self.prev_hash)
        h.update(struct.pack("<qqq", self.round, self.miner_id, len(self.records)))
        for rec in self.records:
            h.update(struct.pack("<qqd", rec.device_id, rec.round, rec.submitted_at))
            h.update(rec.update_digest)
        if self.trust_snapshot is None:
            h.update(b"\x00")
        else:
            h.update(b"\x01" + struct.pack("<q", len(self.trust_snapshot)))
            for dev in sorted(self.trust_snapshot):
                h.update(struct.pack("<qd", dev, self.trust_snapshot[dev]))
        return h.digest()


@dataclass(frozen=True)
class VerificationPolicy:
    expected_dim: int
    max_update_norm: float
    allow_duplicate_per_round: bool = False

    def __post_init__(self):
        if not self.max_update_norm > 0:
            raise ValueError("max_update_norm must be positive")


@dataclass
class ChainState:
    """What the verifying contract can see: the open round and who already submitted."""

    round: int
    accepted: set = field(default_factory=set)


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str | None = None

    def __bool__(self):
        return self.accepted


def verify_update(record: UpdateRecord, policy: VerificationPolicy, state: ChainState) -> Verdict:
    """Smart-contract check. Pure: does not mark the device as having submitted."""
    vec = np.asarray(record.update)
    if vec.ndim != 1 or vec.size != policy.expected_dim:
        return Verdict(False, "dim")
    if not np.all(np.isfinite(vec)):
        return Verdict(False, "nonfinite")
    if float(np.linalg.norm(vec)) > policy.max_update_norm:
        return Verdict(False, "norm")
    if record.round != state.round:
        return Verdict(False, "stale_round")
    if not policy.allow_duplicate_per_round and record.device_id in state.accepted:
        return Verdict(False, "duplicate")
    if not record.digest_ok():
        return Verdict(False, "digest")
    return Verdict(True)


def _check_trust_map(trust_map):
    for dev, value in trust_map.items():
        if not (0.0 <= value <= 1.0):
            raise ValueError(f"trust for device {dev} outside [0, 1]: {value}")


class Ledger:
    def __init__(self, n_miners: int = 1):
        if n_miners < 1:
            raise ValueError("n_miners must be >= 1")
        self.n_miners = n_miners
        self.blocks: list[Block] = []
        genesis = Block(0, ZERO_HASH, -1, [], None, 0)
        genesis.block_hash = genesis.compute_hash()
        self.blocks.append(genesis)

    def __len__(self):
        return len(self.blocks)

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    def miner_for(self, round_: int) -> int:
        return round_ % self.n_miners

    def mine_block(self, records, round_: int, trust_snapshot=None, miner_id=None) -> Block:
        if trust_snapshot is not None:
            trust_snapshot = {int(k): float(v) for k, v in trust_snapshot.items()}
            _check_trust_map(trust_snapshot)
        block = Block(
            index=self.head.index + 1,
            prev_hash=self.head.block_hash,
            round=round_,
            records=list(records),
            trust_snapshot=trust_snapshot,
            miner_id=self.miner_for(round_) if miner_id is None else miner_id,
        )
        block.block_hash = block.compute_hash()
        self.blocks.append(block)
        return block

    def validate(self) -> int | None:
        """Index of the first bad block, or None when the chain is intact."""
        prev = ZERO_HASH
        for pos, block in enumerate(self.blocks):
            if block.index != pos or block.prev_hash != prev:
                return pos
            if any(not rec.digest_ok() for rec in block.records):
                return pos
            if block.compute_hash() != block.block_hash:
                return pos
            prev = block.block_hash
        return None

    def store_trust(self, round_: int, trust_map) -> Block:
        """Record a trust snapshot in a block of its own."""
        return self.mine_block([], round_, trust_snapshot=trust_map)

    def latest_trust(self, device_ids=(), default: float = 0.5) -> dict:
        out = {int(d): default for d in device_ids}
        for block in reversed(self.blocks):
            if block.trust_snapshot is not None:
                out.update(block.trust_snapshot)
                break
        return out

    # export / import: one JSON object per line

    def export(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for block in self.blocks:
                fh.write(json.dumps(_block_to_json(block), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Ledger":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"ledger is not UTF-8 text: {exc}") from exc
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise FormatError("ledger file is empty")
        ledger = cls.__new__(cls)
        ledger.blocks = []
        for lineno, line in enumerate(lines, 1):
            try:
                ledger.blocks.append(_block_from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"line {lineno}: {exc}") from exc
        ledger.n_miners = max(b.miner_id for b in ledger.blocks) + 1
        return ledger


def validate_chain(ledger: Ledger) -> int | None:
    return ledger.validate()


def _block_to_json(block: Block) -> dict:
    snapshot = None
    if block.trust_snapshot is not None:
        snapshot = {str(k): v for k, v in sorted(block.trust_snapshot.items())}
    return {
        "index": block.index,
        "prev_hash": block.prev_hash.hex(),
        "round": block.round,
        "miner_id": block.miner_id,
        "records": [
            {
                "device_id": r.device_id,
                "round": r.round,
                "submitted_at": r.submitted_at,
                "digest": r.update_digest.hex(),
                "update": np.ascontiguousarray(r.update, dtype="<f8").tobytes().hex(),
            }
            for r in block.records
        ],
        "trust_snapshot": snapshot,
        "block_hash": block.block_hash.hex(),
    }


def _hash_from_hex(text: str) -> bytes:
    raw = bytes.fromhex(text)
    if len(raw) != 32:
        raise ValueError("hash must be 32 bytes")
    return raw


def _block_from_json(obj: dict) -> Block:
    records = []
    for r in obj["records"]:
        update = np.frombuffer(bytes.fromhex(r["update"]), dtype="<f8").astype(np.float64)
        submitted = float(r["submitted_at"])
        if not math.isfinite(submitted):
            raise ValueError("submitted_at must be finite")
        records.append(UpdateRecord(int(r["device_id"]), int(r["round"]), update, _hash_from_hex(r["digest"]), submitted))
    snapshot = obj["trust_snapshot"]
    if snapshot is not None:
        snapshot = {int(k): float(v) for k, v in snapshot.items()}
    return Block(
        index=int(obj["index"]),
        prev_hash=_hash_from_hex(obj["prev_hash"]),
        round=int(obj["round"]),
        records=records,
        trust_snapshot=snapshot,
        miner_id=int(obj["miner_id"]),
        block_hash=_hash_from_hex(obj["block_hash"]),
    )
