"""Feature extraction as a hash-linked chain of computation stages.

Each stage of the pipeline (a dense map, a convolution, a pooling step,
or a bare activation) lives in its own block. A block's hash binds the
hash of the block before it together with a canonical serialization of
its numeric parameters, so changing any parameter anywhere shifts every
hash downstream of it, ending at the notary. The notary is the terminal
block: it has no parameters of its own (its hash depends only on the last
stage's hash), holds the route of block public keys in execution order,
and mediates every step of a query.

A query cycle runs entirely through the ledger:

1. The captured input arrives encrypted to the notary, which opens the
   cycle, re-encrypts the data under its own symmetric key, wraps that
   key for the first block, attaches an encrypted turn marker for the
   first block, and signs the update.
2. Each block polls the newest entry. It acts only if the turn marker
   decrypts under its private key; it refuses outright if the update was
   not signed by the notary. It then runs its stage and publishes the
   result wrapped back to the notary, signed with its own key.
3. The notary forwards the output to the next block in the route, and
   after the last stage hands the finished feature vector off encrypted
   to the matching tree's root key, closing the cycle.

Detection and recovery work against a stable snapshot taken at
enrollment: recomputing the hash recurrence over current parameters and
comparing against the snapshot locates the first tampered block, and
restoring that block's parameters from the snapshot returns the chain to
its stable state.
"""

from __future__ import annotations

import secrets
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import crypto
from .crypto import DecryptionFailure, KeyPair
from .encoding import ByteReader, decode_vector, encode_f64_array, encode_u32, encode_vector, lp
from .ledger import Ledger, LedgerEntry

GENESIS_DIGEST = crypto.digest(b"biochain/genesis/v1")

_BLOCK_HASH_TAG = b"biochain/block-hash/v1"
_NOTARY_HASH_TAG = b"biochain/notary-hash/v1"

# Public protocol constants. Both are concatenated with the cycle nonce,
# so a recorded message from one cycle cannot be replayed into another.
TURN_MARKER = b"biochain/your-turn/v1"
AUTH_MESSAGE = b"biochain/notarized/v1"


class ShapeMismatch(Exception):
    pass


class SignatureRejected(Exception):
    """An update claimed authority it could not prove; the protocol stops."""


class IntegrityFailure(Exception):
    """The chain failed verification before a cycle could start."""


class NoSnapshot(Exception):
    pass


class IndexOutOfRange(Exception):
    pass


# ---------------------------------------------------------------------------
# Stage parameters and stage math
# ---------------------------------------------------------------------------

ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "linear": lambda x: x,
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
    "sigmoid": lambda x: 1.0 / (1.0 + np.exp(-x)),
}

STAGE_KINDS = ("dense", "convolution", "pooling", "activation")


@dataclass
class StageParams:
    """Parameters of one pipeline stage.

    dense:        weights (out, in), bias (out,), activation
    convolution:  weights (k,) used as a valid 1-D cross-correlation
                  kernel, bias (1,), activation
    pooling:      pool_size, non-overlapping max windows (remainder
                  samples are dropped)
    activation:   activation only
    """

    kind: str
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    activation: str = "linear"
    pool_size: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind not in STAGE_KINDS:
            raise ValueError(f"unknown stage kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kind == "dense":
            if self.weights is None or self.weights.ndim != 2:
                raise ValueError("dense stage needs a 2-D weight matrix")
            if self.bias is None:
                self.bias = np.zeros(self.weights.shape[0])
            if self.bias.shape != (self.weights.shape[0],):
                raise ValueError("dense bias shape must match output dimension")
        elif self.kind == "convolution":
            if self.weights is None or self.weights.ndim != 1:
                raise ValueError("convolution stage needs a 1-D kernel")
            if self.bias is None:
                self.bias = np.zeros(1)
            if self.bias.shape != (1,):
                raise ValueError("convolution bias must be a single value")
        elif self.kind == "pooling":
            if self.pool_size is None or self.pool_size < 1:
                raise ValueError("pooling stage needs pool_size >= 1")

    def canonical_bytes(self) -> bytes:
        """Deterministic serialization used for hashing and snapshots."""
        parts = [
            lp(self.kind.encode("utf-8")),
            lp(self.activation.encode("utf-8")),
            encode_u32(self.pool_size or 0),
        ]
        for arr in (self.weights, self.bias):
            if arr is None:
                parts.append(encode_u32(0))
            else:
                parts.append(encode_u32(1))
                parts.append(encode_f64_array(arr))
        return b"".join(parts)

    @classmethod
    def from_canonical(cls, data: bytes) -> "StageParams":
        reader = ByteReader(data)
        kind = reader.read_lp().decode("utf-8")
        activation = reader.read_lp().decode("utf-8")
        pool_size = reader.read_u32() or None
        arrays: list[Optional[np.ndarray]] = []
        for _ in range(2):
            arrays.append(reader.read_f64_array() if reader.read_u32() else None)
        return cls(
            kind=kind,
            weights=arrays[0],
            bias=arrays[1],
            activation=activation,
            pool_size=pool_size,
        )


def apply_stage(x: np.ndarray, params: StageParams) -> np.ndarray:
    """Run one stage forward on a 1-D input vector.

    Raises:
        ShapeMismatch: input incompatible with the stage parameters.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatch(f"stages operate on 1-D vectors, got shape {x.shape}")
    act = ACTIVATIONS[params.activation]
    if params.kind == "dense":
        if x.shape[0] != params.weights.shape[1]:
            raise ShapeMismatch(
                f"dense stage expects {params.weights.shape[1]} inputs, got {x.shape[0]}"
            )
        return act(params.weights @ x + params.bias)
    if params.kind == "convolution":
        k = params.weights.shape[0]
        if x.shape[0] < k:
            raise ShapeMismatch(f"input shorter than kernel ({x.shape[0]} < {k})")
        out = np.correlate(x, params.weights, mode="valid") + params.bias[0]
        return act(out)
    if params.kind == "pooling":
        size = params.pool_size
        windows = x.shape[0] // size
        if windows < 1:
            raise ShapeMismatch(f"input shorter than pool window ({x.shape[0]} < {size})")
        return x[: windows * size].reshape(windows, size).max(axis=1)
    return act(x)


# ---------------------------------------------------------------------------
# Hashing
# ---------------------------------------------------------------------------

def compute_block_hash(prev_hash: bytes, params: StageParams) -> bytes:
    """Hash of a stage block: binds the previous hash and the canonical
    parameter bytes."""
    return crypto.digest_parts(_BLOCK_HASH_TAG, prev_hash, params.canonical_bytes())


def compute_notary_hash(prev_hash: bytes) -> bytes:
    """Hash of the notary: a tagged function of the last stage hash only."""
    return crypto.digest_parts(_NOTARY_HASH_TAG, prev_hash)


# ---------------------------------------------------------------------------
# Blocks, notary, snapshot, chain
# ---------------------------------------------------------------------------

@dataclass
class ExtractorBlock:
    index: int
    params: StageParams
    keys: KeyPair
    sym_key: bytes
    notary_public: bytes


@dataclass
class NotaryBlock:
    keys: KeyPair
    sym_key: bytes
    route: list[bytes]
    matcher_root_public: bytes
    progress: dict[str, int] = field(default_factory=dict)


@dataclass
class StableSnapshot:
    """Enrollment-time record of every block hash and parameter blob."""

    blocks: list[tuple[int, bytes, bytes]]  # (index, hash, canonical params)
    notary_hash: bytes
    timestamp: float

    def self_check(self) -> bool:
        """Recompute every hash from the stored parameters."""
        prev = GENESIS_DIGEST
        for index, stored_hash, params_bytes in self.blocks:
            recomputed = compute_block_hash(prev, StageParams.from_canonical(params_bytes))
            if recomputed != stored_hash:
                return False
            prev = recomputed
        return compute_notary_hash(prev) == self.notary_hash

    def to_bytes(self) -> bytes:
        parts = [encode_u32(len(self.blocks))]
        for index, h, pb in self.blocks:
            parts.append(encode_u32(index))
            parts.append(lp(h))
            parts.append(lp(pb))
        parts.append(lp(self.notary_hash))
        parts.append(encode_f64_array(np.array([self.timestamp])))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "StableSnapshot":
        reader = ByteReader(data)
        count = reader.read_u32()
        blocks = []
        for _ in range(count):
            index = reader.read_u32()
            h = reader.read_lp()
            pb = reader.read_lp()
            blocks.append((index, h, pb))
        notary_hash = reader.read_lp()
        timestamp = float(reader.read_f64_array()[0])
        return cls(blocks=blocks, notary_hash=notary_hash, timestamp=timestamp)

    def save(self, path: Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Path) -> "StableSnapshot":
        return cls.from_bytes(Path(path).read_bytes())


class ExtractorChain:
    """An ordered chain of stage blocks plus its notary."""

    def __init__(self, blocks: list[ExtractorBlock], notary: NotaryBlock):
        self.blocks = blocks
        self.notary = notary
        self.snapshot: Optional[StableSnapshot] = None

    @classmethod
    def build(
        cls,
        stages: Sequence[StageParams],
        matcher_root_public: bytes,
        rng: Optional[np.random.Generator] = None,
    ) -> "ExtractorChain":
        if not stages:
            raise ValueError("a chain needs at least one stage")
        notary_keys = crypto.generate_keypair(rng)
        blocks = []
        for i, params in enumerate(stages):
            blocks.append(
                ExtractorBlock(
                    index=i,
                    params=params,
                    keys=crypto.generate_keypair(rng),
                    sym_key=crypto.generate_sym_key(rng),
                    notary_public=notary_keys.public,
                )
            )
        notary = NotaryBlock(
            keys=notary_keys,
            sym_key=crypto.generate_sym_key(rng),
            route=[b.keys.public for b in blocks],
            matcher_root_public=matcher_root_public,
        )
        return cls(blocks=blocks, notary=notary)

    def block_hashes(self) -> list[bytes]:
        """Current hash of every block under the chained recurrence."""
        hashes = []
        prev = GENESIS_DIGEST
        for block in self.blocks:
            prev = compute_block_hash(prev, block.params)
            hashes.append(prev)
        return hashes

    def notary_hash(self) -> bytes:
        prev = self.block_hashes()[-1] if self.blocks else GENESIS_DIGEST
        return compute_notary_hash(prev)

    def take_snapshot(self) -> StableSnapshot:
        """Record the current state as the stable reference."""
        hashes = self.block_hashes()
        self.snapshot = StableSnapshot(
            blocks=[
                (b.index, hashes[i], b.params.canonical_bytes())
                for i, b in enumerate(self.blocks)
            ],
            notary_hash=self.notary_hash(),
            timestamp=time.time(),
        )
        return self.snapshot

    def verify(self) -> Optional[int]:
        """Compare current hashes against the snapshot.

        Returns the smallest block index whose recomputed hash differs
        from its snapshot value, or None when the chain is intact.

        Raises:
            NoSnapshot: no stable snapshot has been taken.
        """
        if self.snapshot is None:
            raise NoSnapshot("take_snapshot has not been called")
        current = self.block_hashes()
        for i, (_, stored_hash, _) in enumerate(self.snapshot.blocks):
            if current[i] != stored_hash:
                return i
        return None

    def restore_block(self, index: int, snapshot: Optional[StableSnapshot] = None) -> None:
        """Reset one block's parameters to their snapshot values."""
        snap = snapshot or self.snapshot
        if snap is None:
            raise NoSnapshot("no snapshot to restore from")
        if not 0 <= index < len(self.blocks):
            raise IndexOutOfRange(f"block index {index} out of range")
        _, _, params_bytes = snap.blocks[index]
        self.blocks[index].params = StageParams.from_canonical(params_bytes)


def compose_stages(stages: Sequence[StageParams], x: np.ndarray) -> np.ndarray:
    """Plain sequential forward pass, no protocol involved."""
    out = np.asarray(x, dtype=np.float64)
    for params in stages:
        out = apply_stage(out, params)
    return out


# ---------------------------------------------------------------------------
# Query-cycle protocol
# ---------------------------------------------------------------------------

def _turn_token(cycle_id: str) -> bytes:
    return TURN_MARKER + cycle_id.encode("utf-8")


def _auth_token(cycle_id: str) -> bytes:
    return AUTH_MESSAGE + cycle_id.encode("utf-8")


def notary_begin_cycle(
    notary: NotaryBlock, ledger: Ledger, captured: bytes
) -> LedgerEntry:
    """Open a new query cycle from an encrypted capture.

    Appends the initiation entry (the capture as received) and the first
    full update: payload re-encrypted under the notary's symmetric key,
    that key wrapped for the first block, a turn marker for the first
    block, and the notary's signature over the cycle-bound message.

    Raises:
        DecryptionFailure: the capture was not encrypted to the notary.
    """
    x0 = crypto.asym_decrypt(captured, notary.keys.private)
    cycle_id = secrets.token_hex(16)
    ledger.append(cycle_id, ed=captured)
    first = notary.route[0]
    entry = ledger.append(
        cycle_id,
        ed=crypto.sym_encrypt(x0, notary.sym_key),
        ek=crypto.asym_encrypt(notary.sym_key, first),
        em=crypto.asym_encrypt(_turn_token(cycle_id), first),
        sig=crypto.sign(notary.keys.private, _auth_token(cycle_id)),
    )
    notary.progress[cycle_id] = 0
    return entry


def block_handle_update(
    block: ExtractorBlock, ledger: Ledger, cycle_id: str
) -> Optional[LedgerEntry]:
    """Let one block examine the newest update of a cycle.

    Returns None when the turn marker does not decrypt for this block
    (the update is someone else's turn). If the marker matches but the
    update was not signed by the notary, the block refuses to act.

    Raises:
        SignatureRejected: marker matched but the notary signature did not
            verify; no entry is appended.
    """
    entry = ledger.latest(cycle_id)
    try:
        marker = crypto.asym_decrypt(entry.em, block.keys.private)
    except DecryptionFailure:
        return None
    if marker != _turn_token(cycle_id):
        return None
    if not crypto.verify(block.notary_public, entry.sig, _auth_token(cycle_id)):
        raise SignatureRejected(f"block {block.index}: update not signed by the notary")
    payload_key = crypto.asym_decrypt(entry.ek, block.keys.private)
    x = decode_vector(crypto.sym_decrypt(entry.ed, payload_key))
    out = apply_stage(x, block.params)
    out_bytes = encode_vector(out)
    return ledger.append(
        cycle_id,
        ed=crypto.sym_encrypt(out_bytes, block.sym_key),
        ek=crypto.asym_encrypt(block.sym_key, block.notary_public),
        em=crypto.asym_encrypt(_turn_token(cycle_id), block.notary_public),
        sig=crypto.sign(block.keys.private, _auth_token(cycle_id)),
    )


def notary_handle_update(
    notary: NotaryBlock, ledger: Ledger, cycle_id: str
) -> LedgerEntry:
    """Let the notary consume a block's update and route the next hop.

    The newest entry must carry a turn marker for the notary and a valid
    signature from the block whose turn it was. The payload moves on to
    the next block in the route, or, after the final stage, out to the
    matching tree's root key, which finalizes the cycle.

    Raises:
        SignatureRejected: the update was not signed by the expected block.
        DecryptionFailure: the update was not addressed to the notary.
    """
    pos = notary.progress[cycle_id]
    entry = ledger.latest(cycle_id)
    marker = crypto.asym_decrypt(entry.em, notary.keys.private)
    if marker != _turn_token(cycle_id):
        raise SignatureRejected("stale or foreign turn marker")
    if not crypto.verify(notary.route[pos], entry.sig, _auth_token(cycle_id)):
        raise SignatureRejected(f"update not signed by block {pos}")
    payload_key = crypto.asym_decrypt(entry.ek, notary.keys.private)
    payload = crypto.sym_decrypt(entry.ed, payload_key)
    pos += 1
    notary.progress[cycle_id] = pos
    if pos < len(notary.route):
        recipient = notary.route[pos]
        result = ledger.append(
            cycle_id,
            ed=crypto.sym_encrypt(payload, notary.sym_key),
            ek=crypto.asym_encrypt(notary.sym_key, recipient),
            em=crypto.asym_encrypt(_turn_token(cycle_id), recipient),
            sig=crypto.sign(notary.keys.private, _auth_token(cycle_id)),
        )
        return result
    result = ledger.append(
        cycle_id,
        ed=crypto.sym_encrypt(payload, notary.sym_key),
        ek=crypto.asym_encrypt(notary.sym_key, notary.matcher_root_public),
        em=crypto.asym_encrypt(_turn_token(cycle_id), notary.matcher_root_public),
        sig=crypto.sign(notary.keys.private, _auth_token(cycle_id)),
    )
    ledger.close_cycle(cycle_id)
    del notary.progress[cycle_id]
    return result


def run_query_cycle(
    chain: ExtractorChain, ledger: Ledger, raw_input: np.ndarray
) -> LedgerEntry:
    """Drive one full query cycle and return the final handoff entry.

    The returned entry's payload is the feature vector encrypted to the
    matching tree's root key. The chain must verify intact against its
    snapshot before the cycle starts.

    Raises:
        IntegrityFailure: the chain failed its pre-check.
        SignatureRejected: a protocol step saw an illegitimate update.
    """
    if chain.verify() is not None:
        raise IntegrityFailure("chain does not match its stable snapshot")
    captured = crypto.asym_encrypt(
        encode_vector(np.asarray(raw_input, dtype=np.float64)),
        chain.notary.keys.public,
    )
    entry = notary_begin_cycle(chain.notary, ledger, captured)
    cycle_id = entry.cycle_id
    for _ in range(len(chain.blocks)):
        acted = None
        for block in chain.blocks:
            acted = block_handle_update(block, ledger, cycle_id)
            if acted is not None:
                break
        if acted is None:
            raise SignatureRejected("no block recognized the pending update")
        entry = notary_handle_update(chain.notary, ledger, cycle_id)
    return entry


def handoff_envelope(entry: LedgerEntry) -> crypto.Envelope:
    """View a ledger entry as the envelope for its intended recipient."""
    return crypto.Envelope(ed=entry.ed, ek=entry.ek)
