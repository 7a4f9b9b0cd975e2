"""Template matching tree with shard-consensus decisions.

The tree has three levels. Leaves each hold one gallery template and do
the actual scoring. Chiefs group up to ``fanout`` leaves, pick the best
score on their path, and must win their leaves' consent for it. The root
aggregates the chiefs' decisions and declares the final match.

Integrity uses aggregate hashing: a leaf's hash covers its template, and
every parent's hash covers the ordered hashes of its children, so one
modified template changes its leaf, its chief, and the root. Parents also
keep copies of their children's enrollment hashes, which is what makes
top-down localization of tampered leaves possible.

Decisions use threshold secret sharing. Every root-chief link gets its
own decision key pair whose private half is split into ``2n + 1`` shards
(``n`` leaves on the link), reconstructable from ``n + 2``:

* each leaf holds one shard, surrendered only to endorse a decision
  document whose score is at least as good as the leaf's own result,
* the chief holds one shard of its own,
* the root holds the single shard it contributes to every attempt plus
  ``n - 1`` inert spares kept for administrative key rotation.

An honest document collects all ``n`` leaf shards; with the chief's and
the root's that meets the threshold exactly, and reconstruction is
checked by signing a fresh nonce against the stored public half. A chief
that drafts a document worse than some leaf's own score loses that
leaf's shard, can never reach threshold, and triggers scrutiny: the root
reads the dissenting (flagged) leaves directly and repairs the decision
for that path. A dissent against a genuinely best document also triggers
scrutiny, which then simply confirms the document.

Probe fan-out is encrypted: per-link channel keys are established at
build time by wrapping them asymmetrically for each node, and every
probe travels the links under those keys.
"""

from __future__ import annotations

import math
import secrets
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from . import crypto
from .crypto import KeyPair, Shard, SharingConfig
from .encoding import decode_vector, encode_vector, lp
from .metrics import DimensionMismatch, MatchScore, get_metric

_LEAF_HASH_TAG = b"biochain/leaf-hash/v1"
_NODE_HASH_TAG = b"biochain/node-hash/v1"

DEFAULT_FANOUT = 50


class EmptyGallery(Exception):
    pass


class MissingScores(Exception):
    pass


class ArchiveMissing(Exception):
    pass


class ConsensusResult(Enum):
    ACCEPTED = "accepted"
    SCRUTINY = "scrutiny"


# ---------------------------------------------------------------------------
# Templates and hashing
# ---------------------------------------------------------------------------

@dataclass
class Template:
    identity: str
    vector: np.ndarray

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise ValueError("templates are 1-D vectors")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("template entries must be finite")

    def canonical_bytes(self) -> bytes:
        return lp(self.identity.encode("utf-8")) + encode_vector(self.vector)

    def copy(self) -> "Template":
        return Template(self.identity, self.vector.copy())


def leaf_hash(template: Template) -> bytes:
    return crypto.digest_parts(_LEAF_HASH_TAG, template.canonical_bytes())


def node_hash(children_hashes: Sequence[bytes]) -> bytes:
    """Aggregate hash of an ordered list of child digests."""
    if not children_hashes:
        raise ValueError("a node needs at least one child")
    return crypto.digest_parts(_NODE_HASH_TAG, *children_hashes)


# ---------------------------------------------------------------------------
# Tree nodes
# ---------------------------------------------------------------------------

@dataclass
class LeafBlock:
    index: int  # position within the chief
    global_index: int  # position in enrollment order
    template: Template
    keys: KeyPair
    channel_key: bytes = b""
    shard: Optional[Shard] = None
    hash: bytes = b""  # enrollment-time hash
    flag: bool = False
    last_score: Optional[float] = None
    last_cycle: Optional[str] = None
    # Fault-injection toggle for simulations: a compromised leaf withholds
    # its shard and raises its flag no matter what the document says.
    always_dissent: bool = False

    def current_hash(self) -> bytes:
        return leaf_hash(self.template)


@dataclass
class ChiefBlock:
    index: int
    leaves: list[LeafBlock]
    keys: KeyPair
    channel_key: bytes = b""
    leaf_hash_copies: list[bytes] = field(default_factory=list)
    retained_shard: Optional[Shard] = None
    decision_public: bytes = b""
    sharing: Optional[SharingConfig] = None
    hash: bytes = b""  # enrollment-time hash
    # Fault-injection hook for simulations: a compromised chief rewrites
    # its honest draft before seeking consent.
    tamper_document: Optional[Callable[["DecisionDocument"], "DecisionDocument"]] = None

    def current_hash(self) -> bytes:
        return node_hash([leaf.current_hash() for leaf in self.leaves])


@dataclass(frozen=True)
class DecisionDocument:
    chief_id: int
    cycle_id: str
    identity: str
    score: float
    metric: str
    leaf_index: int  # drafting leaf's position within the chief


@dataclass
class ShardPool:
    shards: list[Shard]
    consent_count: int


@dataclass(frozen=True)
class LeafLocator:
    chief_index: int
    leaf_index: int
    global_index: int
    identity: str


@dataclass
class MatchTimings:
    """Accumulated wall-clock cost of the matcher phases."""

    delegate: float = 0.0
    match: float = 0.0
    compare_leaves: float = 0.0
    sharing: float = 0.0
    compare_chiefs: float = 0.0
    probes: int = 0

    def total(self) -> float:
        return (
            self.delegate
            + self.match
            + self.compare_leaves
            + self.sharing
            + self.compare_chiefs
        )


@dataclass(frozen=True)
class IdentifyResult:
    identity: str
    score: float
    metric: str
    candidates: list[MatchScore]
    scrutinized_chiefs: tuple[int, ...] = ()


class MatcherTree:
    """Root block: owns the chiefs, the decision keys, and the final say."""

    def __init__(self, chiefs: list[ChiefBlock], keys: KeyPair):
        self.chiefs = chiefs
        self.keys = keys
        self.chief_hash_copies: list[bytes] = []
        self.contribution_shards: dict[int, Shard] = {}
        self.retained_shards: dict[int, list[Shard]] = {}
        self.decision_publics: dict[int, bytes] = {}
        self.hash: bytes = b""
        self._cycle_counter = 0

    @property
    def public_key(self) -> bytes:
        return self.keys.public

    def leaves(self) -> list[LeafBlock]:
        return [leaf for chief in self.chiefs for leaf in chief.leaves]

    def templates(self) -> list[Template]:
        return [leaf.template for leaf in self.leaves()]

    def next_cycle_id(self) -> str:
        self._cycle_counter += 1
        return f"match-{self._cycle_counter}"

    def current_hash(self) -> bytes:
        return node_hash([chief.current_hash() for chief in self.chiefs])


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def setup_decision_keys(
    tree: MatcherTree, chief: ChiefBlock, rng: Optional[np.random.Generator] = None
) -> None:
    """Create and distribute the decision key material for one root-chief
    link: a fresh key pair, its private half split into ``2n + 1`` shards
    at threshold ``n + 2``, allocated one per leaf, one to the chief, one
    as the root's contribution, and the remaining ``n - 1`` to the root's
    inert reserve."""
    n = len(chief.leaves)
    config = SharingConfig.for_group(n)
    decision_keys = crypto.generate_keypair(rng)
    shards = crypto.shamir_split(decision_keys.private, config, rng)
    for leaf, shard in zip(chief.leaves, shards[:n]):
        leaf.shard = shard
    chief.retained_shard = shards[n]
    chief.decision_public = decision_keys.public
    chief.sharing = config
    tree.contribution_shards[chief.index] = shards[n + 1]
    tree.retained_shards[chief.index] = list(shards[n + 2 :])
    tree.decision_publics[chief.index] = decision_keys.public


def build_tree(
    gallery: Sequence[Template],
    fanout: int = DEFAULT_FANOUT,
    rng: Optional[np.random.Generator] = None,
) -> MatcherTree:
    """Build the matching tree over a gallery, one template per leaf.

    ``ceil(len(gallery) / fanout)`` chiefs are created; every chief holds
    ``fanout`` leaves except possibly the last, which holds the remainder.

    Raises:
        EmptyGallery: the gallery has no templates.
    """
    if not gallery:
        raise EmptyGallery("cannot build a tree over an empty gallery")
    if fanout < 1:
        raise ValueError("fanout must be >= 1")
    dims = {t.vector.shape[0] for t in gallery}
    if len(dims) != 1:
        raise DimensionMismatch(f"gallery templates disagree on dimension: {dims}")

    tree = MatcherTree(chiefs=[], keys=crypto.generate_keypair(rng))
    chief_count = math.ceil(len(gallery) / fanout)
    for c in range(chief_count):
        chunk = gallery[c * fanout : (c + 1) * fanout]
        leaves = []
        for i, template in enumerate(chunk):
            leaves.append(
                LeafBlock(
                    index=i,
                    global_index=c * fanout + i,
                    template=template.copy(),
                    keys=crypto.generate_keypair(rng),
                )
            )
        chief = ChiefBlock(index=c, leaves=leaves, keys=crypto.generate_keypair(rng))
        tree.chiefs.append(chief)

    # Per-link channel keys, wrapped asymmetrically for each recipient so
    # probe fan-out never travels in the clear.
    for chief in tree.chiefs:
        chief_channel = crypto.generate_sym_key(rng)
        sealed = crypto.seal(chief_channel, chief.keys.public, rng=rng)
        chief.channel_key = crypto.open_envelope(sealed, chief.keys.private)
        for leaf in chief.leaves:
            leaf_channel = crypto.generate_sym_key(rng)
            sealed = crypto.seal(leaf_channel, leaf.keys.public, rng=rng)
            leaf.channel_key = crypto.open_envelope(sealed, leaf.keys.private)

    for chief in tree.chiefs:
        setup_decision_keys(tree, chief, rng)

    # Enrollment hashes, copied upward for later localization.
    for chief in tree.chiefs:
        for leaf in chief.leaves:
            leaf.hash = leaf.current_hash()
        chief.leaf_hash_copies = [leaf.hash for leaf in chief.leaves]
        chief.hash = node_hash(chief.leaf_hash_copies)
    tree.chief_hash_copies = [chief.hash for chief in tree.chiefs]
    tree.hash = node_hash(tree.chief_hash_copies)
    return tree


# ---------------------------------------------------------------------------
# Scoring and consensus
# ---------------------------------------------------------------------------

def leaf_score(
    leaf: LeafBlock,
    probe: np.ndarray,
    metric: str,
    cycle_id: Optional[str] = None,
    scratch: Optional[np.ndarray] = None,
) -> float:
    """Score a probe against the leaf's template and remember the result.

    ``scratch`` is an optional preallocated work buffer for the euclidean
    difference; it changes nothing about the result (same operations in
    the same order) but lets a caller scoring a large gallery avoid one
    temporary allocation per leaf.
    """
    template = leaf.template.vector
    if (
        metric == "euclidean"
        and scratch is not None
        and isinstance(probe, np.ndarray)
        and probe.dtype == np.float64
        and probe.shape == template.shape
    ):
        np.subtract(template, probe, out=scratch)
        score = float(math.sqrt(float(np.dot(scratch, scratch))))
    else:
        score = get_metric(metric)(template, probe)
    leaf.last_score = score
    leaf.last_cycle = cycle_id
    return score


def chief_draft_document(
    chief: ChiefBlock, cycle_id: str, metric: str
) -> DecisionDocument:
    """Draft the path decision: the identity with the best (lowest) score
    among the chief's leaves, ties broken by lowest leaf index.

    Raises:
        MissingScores: some leaf has not scored this cycle.
    """
    for leaf in chief.leaves:
        if leaf.last_cycle != cycle_id or leaf.last_score is None:
            raise MissingScores(
                f"leaf {leaf.index} of chief {chief.index} has no score for {cycle_id}"
            )
    best = min(chief.leaves, key=lambda leaf: (leaf.last_score, leaf.index))
    document = DecisionDocument(
        chief_id=chief.index,
        cycle_id=cycle_id,
        identity=best.template.identity,
        score=best.last_score,
        metric=metric,
        leaf_index=best.index,
    )
    if chief.tamper_document is not None:
        document = chief.tamper_document(document)
    return document


def collect_consent(chief: ChiefBlock, document: DecisionDocument) -> ShardPool:
    """Ask every leaf to endorse the document.

    A leaf consents, adding its shard to the pool, when the document's
    score is at least as good as its own; otherwise it withholds the
    shard and raises its flag. The chief always adds its retained shard.
    """
    shards = []
    consents = 0
    for leaf in chief.leaves:
        if not leaf.always_dissent and document.score <= leaf.last_score:
            shards.append(leaf.shard)
            consents += 1
        else:
            leaf.flag = True
    shards.append(chief.retained_shard)
    return ShardPool(shards=shards, consent_count=consents)


def root_finalize(
    tree: MatcherTree, chief: ChiefBlock, document: DecisionDocument, pool: ShardPool
) -> ConsensusResult:
    """Add the root's contribution shard and try to reach consensus.

    Consensus requires the pooled shards to reconstruct the link's
    decision private key, proven by signing a fresh nonce that verifies
    under the stored public half. Anything else (short pool, corrupted
    shard) triggers scrutiny.
    """
    shards = list(pool.shards) + [tree.contribution_shards[chief.index]]
    try:
        secret = crypto.shamir_reconstruct(shards, chief.sharing)
        if crypto.derive_public(secret) != tree.decision_publics[chief.index]:
            return ConsensusResult.SCRUTINY
        nonce = secrets.token_bytes(16)
        signature = crypto.sign(secret, nonce)
    except (crypto.CryptoError, ValueError):
        return ConsensusResult.SCRUTINY
    if crypto.verify(tree.decision_publics[chief.index], signature, nonce):
        return ConsensusResult.ACCEPTED
    return ConsensusResult.SCRUTINY


def root_scrutinize(
    tree: MatcherTree, chief: ChiefBlock, document: DecisionDocument
) -> DecisionDocument:
    """Resolve a failed consensus by reading the flagged leaves directly.

    The best flagged score beats the document only if strictly better;
    otherwise the document stands (a dissent against a genuinely best
    document, or a corrupted shard with no dissent at all). Flags are
    cleared when scrutiny ends.
    """
    flagged = [leaf for leaf in chief.leaves if leaf.flag]
    corrected = document
    if flagged:
        best = min(flagged, key=lambda leaf: (leaf.last_score, leaf.index))
        if best.last_score < document.score:
            corrected = DecisionDocument(
                chief_id=chief.index,
                cycle_id=document.cycle_id,
                identity=best.template.identity,
                score=best.last_score,
                metric=document.metric,
                leaf_index=best.index,
            )
    for leaf in flagged:
        leaf.flag = False
    return corrected


# ---------------------------------------------------------------------------
# Identification
# ---------------------------------------------------------------------------

def identify(
    tree: MatcherTree,
    envelope: crypto.Envelope,
    metric: str,
    timings: Optional[MatchTimings] = None,
) -> IdentifyResult:
    """Identify an encrypted probe against the whole tree.

    The payload must decrypt with the root's private key. The root fans
    the probe down the encrypted channels, every leaf scores it, every
    chief drafts and defends a path decision (scrutiny repairing any path
    that fails consensus), and the root takes the best path decision,
    ties broken by lowest chief index. The full ascending candidate list
    over all leaves is returned alongside the decision.

    Raises:
        crypto.DecryptionFailure: payload not addressed to this tree.
        DimensionMismatch: probe dimension differs from the gallery's.
    """
    t0 = time.perf_counter()
    probe_bytes = crypto.open_envelope(envelope, tree.keys.private)
    cycle_id = tree.next_cycle_id()

    # Fan the probe down the encrypted channels: root to chiefs, chiefs to
    # leaves, each leaf decrypting and parsing its own copy.
    per_leaf_probes: list[tuple[LeafBlock, np.ndarray]] = []
    for chief in tree.chiefs:
        for_chief = crypto.sym_encrypt(probe_bytes, chief.channel_key)
        at_chief = crypto.sym_decrypt(for_chief, chief.channel_key)
        for leaf in chief.leaves:
            for_leaf = crypto.sym_encrypt(at_chief, leaf.channel_key)
            per_leaf_probes.append(
                (leaf, decode_vector(crypto.sym_decrypt(for_leaf, leaf.channel_key)))
            )
    t1 = time.perf_counter()

    scratch = np.empty(per_leaf_probes[0][1].shape[0]) if per_leaf_probes else None
    for leaf, probe in per_leaf_probes:
        leaf_score(leaf, probe, metric, cycle_id, scratch)
    t2 = time.perf_counter()

    drafts = [chief_draft_document(chief, cycle_id, metric) for chief in tree.chiefs]
    t3 = time.perf_counter()

    sharing_time = 0.0
    decisions: list[DecisionDocument] = []
    scrutinized: list[int] = []
    for chief, document in zip(tree.chiefs, drafts):
        pool = collect_consent(chief, document)
        s0 = time.perf_counter()
        outcome = root_finalize(tree, chief, document, pool)
        sharing_time += time.perf_counter() - s0
        if outcome is ConsensusResult.SCRUTINY:
            document = root_scrutinize(tree, chief, document)
            scrutinized.append(chief.index)
        decisions.append(document)
    t4 = time.perf_counter()

    best = min(decisions, key=lambda d: (d.score, d.chief_id))
    scored = sorted(
        ((leaf.last_score, leaf.global_index, leaf.template.identity)
         for leaf in tree.leaves()),
        key=lambda t: (t[0], t[1]),
    )
    candidates = [MatchScore(identity=i, score=s, metric=metric) for s, _, i in scored]
    t5 = time.perf_counter()

    if timings is not None:
        timings.delegate += t1 - t0
        timings.match += t2 - t1
        timings.compare_leaves += (t3 - t2) + (t4 - t3 - sharing_time)
        timings.sharing += sharing_time
        timings.compare_chiefs += t5 - t4
        timings.probes += 1

    return IdentifyResult(
        identity=best.identity,
        score=best.score,
        metric=metric,
        candidates=candidates,
        scrutinized_chiefs=tuple(scrutinized),
    )


def identify_vector(
    tree: MatcherTree,
    probe: np.ndarray,
    metric: str,
    timings: Optional[MatchTimings] = None,
) -> IdentifyResult:
    """Convenience wrapper: seal a plaintext probe to the root and identify."""
    payload = encode_vector(np.asarray(probe, dtype=np.float64))
    return identify(tree, crypto.seal(payload, tree.public_key), metric, timings)


# ---------------------------------------------------------------------------
# Integrity: localization and restoration
# ---------------------------------------------------------------------------

def verify_tree(tree: MatcherTree) -> list[LeafLocator]:
    """Locate every leaf whose current hash differs from enrollment.

    Hashes are recomputed bottom-up and compared against the stored
    copies top-down: only chiefs whose aggregate changed are descended
    into, and within them only leaves whose hash changed are reported.
    An intact tree returns an empty list.
    """
    locators: list[LeafLocator] = []
    for chief in tree.chiefs:
        recomputed_leaf_hashes = [leaf.current_hash() for leaf in chief.leaves]
        if node_hash(recomputed_leaf_hashes) == tree.chief_hash_copies[chief.index]:
            continue
        for leaf, current in zip(chief.leaves, recomputed_leaf_hashes):
            if current != chief.leaf_hash_copies[leaf.index]:
                locators.append(
                    LeafLocator(
                        chief_index=chief.index,
                        leaf_index=leaf.index,
                        global_index=leaf.global_index,
                        identity=leaf.template.identity,
                    )
                )
    return locators


class TemplateArchive:
    """Enrollment-time template copies, indexed by enrollment order."""

    def __init__(self, templates: Sequence[Template]):
        self._templates = [t.copy() for t in templates]

    def __len__(self) -> int:
        return len(self._templates)

    def get(self, global_index: int) -> Template:
        if not 0 <= global_index < len(self._templates):
            raise ArchiveMissing(f"no archived template at index {global_index}")
        return self._templates[global_index]

    def templates(self) -> list[Template]:
        return [t.copy() for t in self._templates]


def restore_leaves(
    tree: MatcherTree,
    locators: Sequence[LeafLocator],
    archive: Optional[TemplateArchive],
) -> None:
    """Restore the located leaves' templates from the archive, byte-exactly.

    Raises:
        ArchiveMissing: no archive, or a locator the archive cannot serve.
    """
    if archive is None:
        raise ArchiveMissing("no template archive available")
    for locator in locators:
        leaf = tree.chiefs[locator.chief_index].leaves[locator.leaf_index]
        leaf.template = archive.get(locator.global_index).copy()


def shard_census(tree: MatcherTree, chief: ChiefBlock) -> dict[str, int]:
    """Count where every shard of one root-chief link currently lives."""
    return {
        "leaves": sum(1 for leaf in chief.leaves if leaf.shard is not None),
        "chief": 1 if chief.retained_shard is not None else 0,
        "root_contribution": 1 if chief.index in tree.contribution_shards else 0,
        "root_retained": len(tree.retained_shards.get(chief.index, [])),
    }


def admin_recover_decision_key(tree: MatcherTree, chief: ChiefBlock) -> bytes:
    """Administrative reconstruction of a link's decision private key,
    for key rotation outside the consensus protocol.

    The root's inert reserve plus its contribution shard plus the chief's
    shard total one short of the threshold, so recovery additionally
    needs a single cooperating leaf. Returns the private key bytes after
    checking them against the stored public half.
    """
    shards = list(tree.retained_shards[chief.index])
    shards.append(tree.contribution_shards[chief.index])
    shards.append(chief.retained_shard)
    shards.append(chief.leaves[0].shard)
    secret = crypto.shamir_reconstruct(shards, chief.sharing)
    if crypto.derive_public(secret) != tree.decision_publics[chief.index]:
        raise crypto.CryptoError("recovered key does not match the stored public half")
    return secret
