"""Experiment harness: synthetic galleries, enrollment, tamper injection,
integrity audits, and the traditional-versus-protected comparison run.

The "traditional" architecture is the unprotected baseline: a flat
template store scored by plain linear scan, with no hashing, no
consensus, and no recovery. The protected architecture runs every probe
through the notarized extraction chain and the consensus matching tree,
and repairs itself from the enrollment archive when an audit finds
tampering. Both score probes with the same metric code, so any accuracy
difference comes from integrity handling alone.

Everything a command produces is a deterministic function of the
configuration and its seed; wall-clock timings are kept out of the
deterministic report and surfaced separately.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import crypto
from .crypto import InvalidConfig
from .extractor import (
    ExtractorChain,
    IndexOutOfRange,
    StageParams,
    handoff_envelope,
    run_query_cycle,
)
from .ledger import Ledger
from .matcher import (
    LeafLocator,
    MatchTimings,
    MatcherTree,
    Template,
    TemplateArchive,
    build_tree,
    restore_leaves,
    verify_tree,
)
from .metrics import CMCData, MatchScore, cmc_curve, flat_rank, rank_k_accuracy

GALLERY_FORMAT_VERSION = 1

# Independent random streams derived from one experiment seed.
_STREAM_GALLERY = 0
_STREAM_KEYS = 1
_STREAM_PROBES = 2
_STREAM_TAMPER = 3
_STREAM_CHAIN = 4


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def enrollment_keys_rng(seed: int) -> np.random.Generator:
    """The key-material stream used by :func:`enroll`; consuming it in the
    same order reproduces every key and shard of a deployment."""
    return _rng(seed, _STREAM_KEYS)


def default_chain_spec() -> list[dict]:
    """Identity extraction chain: probes pass through unchanged, so the
    protocol machinery is exercised without distorting template space."""
    return [
        {"kind": "dense", "init": "identity"},
        {"kind": "activation", "activation": "linear"},
        {"kind": "dense", "init": "identity"},
    ]


@dataclass
class ExperimentConfig:
    seed: int = 7
    gallery_size: int = 120
    template_dim: int = 16
    fanout: int = 50
    metric: str = "euclidean"
    probe_noise_sigma: float = 0.1
    # None picks 10x the per-coordinate separation scale, which reliably
    # flips the unprotected argmin while leaving probes identifiable.
    noise_sigma: Optional[float] = None
    tamper_fraction: float = 1.0
    probes_per_identity: int = 5
    ranks: int = 10
    chain_spec: list[dict] = field(default_factory=default_chain_spec)

    def validate(self) -> None:
        if self.gallery_size < 1:
            raise InvalidConfig("gallery_size must be >= 1")
        if self.template_dim < 1:
            raise InvalidConfig("template_dim must be >= 1")
        if self.fanout < 1:
            raise InvalidConfig("fanout must be >= 1")
        if self.probe_noise_sigma < 0:
            raise InvalidConfig("probe_noise_sigma must be >= 0")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise InvalidConfig("noise_sigma must be >= 0")
        if not 0 < self.tamper_fraction <= 1:
            raise InvalidConfig("tamper_fraction must be in (0, 1]")
        if self.probes_per_identity < 1:
            raise InvalidConfig("probes_per_identity must be >= 1")
        if self.ranks < 1:
            raise InvalidConfig("ranks must be >= 1")

    def separation_bound(self) -> float:
        """Minimum pairwise template distance enforced at generation."""
        return 10.0 * self.probe_noise_sigma * math.sqrt(self.template_dim)

    def effective_noise_sigma(self) -> float:
        if self.noise_sigma is not None:
            return self.noise_sigma
        return 10.0 * self.separation_bound() / math.sqrt(self.template_dim)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return cls(**data)


# ---------------------------------------------------------------------------
# Synthetic galleries and the gallery file format
# ---------------------------------------------------------------------------

def generate_synthetic_gallery(config: ExperimentConfig) -> list[Template]:
    """Deterministically draw well-separated identity templates.

    Centers are Gaussian at the separation-bound scale; any pair closer
    than the bound is resampled, so probes perturbed by the probe noise
    stay decisively nearest their own template.
    """
    config.validate()
    rng = _rng(config.seed, _STREAM_GALLERY)
    n, d = config.gallery_size, config.template_dim
    bound = config.separation_bound()
    scale = max(bound, 1.0)
    centers = rng.normal(scale=scale, size=(n, d))
    if n > 1 and bound > 0:
        for _ in range(1000):
            dists = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2)
            np.fill_diagonal(dists, np.inf)
            bad = np.flatnonzero(dists.min(axis=1) < bound)
            if bad.size == 0:
                break
            centers[bad[0]] = rng.normal(scale=scale, size=d)
        else:
            raise InvalidConfig("could not separate gallery centers; lower gallery_size")
    return [Template(f"id{i:04d}", centers[i]) for i in range(n)]


def save_gallery(path: Path, templates: Sequence[Template]) -> None:
    """Write the delimited text gallery format: a header line with the
    version, dimension, and count, then one record per line."""
    d = templates[0].vector.shape[0] if templates else 0
    lines = [f"biochain-gallery {GALLERY_FORMAT_VERSION} {d} {len(templates)}"]
    for t in templates:
        values = " ".join(f"{v:.17g}" for v in t.vector)
        lines.append(f"{t.identity} {values}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_gallery(path: Path) -> list[Template]:
    text = Path(path).read_text().strip().splitlines()
    if not text:
        raise ValueError(f"{path}: empty gallery file")
    head = text[0].split()
    if len(head) != 4 or head[0] != "biochain-gallery":
        raise ValueError(f"{path}: not a gallery file")
    version, dim, count = int(head[1]), int(head[2]), int(head[3])
    if version != GALLERY_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported gallery version {version}")
    templates = []
    for line in text[1:]:
        fields = line.split()
        label, values = fields[0], fields[1:]
        if len(values) != dim:
            raise ValueError(f"{path}: record {label} has {len(values)} values, expected {dim}")
        templates.append(Template(label, np.array([float(v) for v in values])))
    if len(templates) != count:
        raise ValueError(f"{path}: header says {count} records, found {len(templates)}")
    labels = [t.identity for t in templates]
    if len(set(labels)) != len(labels):
        raise ValueError(f"{path}: duplicate identity labels")
    return templates


# ---------------------------------------------------------------------------
# Enrollment
# ---------------------------------------------------------------------------

def build_stage_params(
    chain_spec: Sequence[dict], input_dim: int, rng: np.random.Generator
) -> list[StageParams]:
    """Instantiate stage parameters from descriptors, tracking the vector
    dimension through the chain."""
    stages = []
    dim = input_dim
    for desc in chain_spec:
        kind = desc["kind"]
        if kind == "dense":
            out_dim = int(desc.get("out", dim))
            if desc.get("init", "random") == "identity":
                if out_dim != dim:
                    raise InvalidConfig("identity dense stage cannot change dimension")
                weights = np.eye(dim)
                bias = np.zeros(dim)
            else:
                weights = rng.normal(scale=0.5, size=(out_dim, dim))
                bias = rng.normal(scale=0.1, size=out_dim)
            stages.append(
                StageParams(
                    kind="dense",
                    weights=weights,
                    bias=bias,
                    activation=desc.get("activation", "linear"),
                )
            )
            dim = out_dim
        elif kind == "convolution":
            k = int(desc.get("kernel", 3))
            stages.append(
                StageParams(
                    kind="convolution",
                    weights=rng.normal(scale=0.5, size=k),
                    bias=np.array([float(desc.get("bias", 0.0))]),
                    activation=desc.get("activation", "linear"),
                )
            )
            dim = dim - k + 1
        elif kind == "pooling":
            size = int(desc.get("pool_size", 2))
            stages.append(StageParams(kind="pooling", pool_size=size))
            dim = dim // size
        elif kind == "activation":
            stages.append(
                StageParams(kind="activation", activation=desc.get("activation", "linear"))
            )
        else:
            raise InvalidConfig(f"unknown stage kind {kind!r}")
        if dim < 1:
            raise InvalidConfig("chain collapses the vector to nothing")
    return stages


@dataclass
class EnrolledSystem:
    """Everything enrollment produces, for both architectures."""

    chain: ExtractorChain
    ledger: Ledger
    tree: MatcherTree
    archive: TemplateArchive
    flat_store: list[Template]  # the unprotected architecture's templates
    seed: int
    fanout: int


def enroll(
    gallery: Sequence[Template],
    chain_spec: Optional[Sequence[dict]] = None,
    fanout: int = 50,
    seed: int = 0,
    ledger: Optional[Ledger] = None,
) -> EnrolledSystem:
    """Build the full protected system plus the unprotected baseline store.

    The tree, chain, key material, and shard allocation are all
    deterministic functions of (gallery, fanout, seed), so an enrolled
    deployment can be reconstructed from its inputs.
    """
    if not gallery:
        raise InvalidConfig("cannot enroll an empty gallery")
    dim = gallery[0].vector.shape[0]
    descriptors = list(chain_spec) if chain_spec is not None else default_chain_spec()
    keys_rng = _rng(seed, _STREAM_KEYS)
    chain_rng = _rng(seed, _STREAM_CHAIN)
    tree = build_tree(list(gallery), fanout=fanout, rng=keys_rng)
    stages = build_stage_params(descriptors, dim, chain_rng)
    chain = ExtractorChain.build(stages, tree.public_key, rng=keys_rng)
    chain.take_snapshot()
    archive = TemplateArchive(gallery)
    flat_store = [t.copy() for t in gallery]
    return EnrolledSystem(
        chain=chain,
        ledger=ledger if ledger is not None else Ledger(),
        tree=tree,
        archive=archive,
        flat_store=flat_store,
        seed=seed,
        fanout=fanout,
    )


# ---------------------------------------------------------------------------
# Tamper injection
# ---------------------------------------------------------------------------

def inject_template_noise(
    target, sigma: float, seed: int, fraction: float = 1.0
) -> list[int]:
    """Add zero-mean Gaussian noise to a fraction of stored templates.

    ``target`` is either a matching tree or a flat template list; calling
    this once per store with the same seed perturbs both identically,
    which keeps the architecture comparison fair. Returns the enrollment
    indices that were perturbed.
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    if isinstance(target, MatcherTree):
        templates = target.templates()
    else:
        templates = list(target)
    n = len(templates)
    count = max(1, int(round(fraction * n)))
    rng = _rng(seed, _STREAM_TAMPER)
    chosen = sorted(rng.choice(n, size=count, replace=False).tolist())
    for idx in chosen:
        noise = rng.normal(scale=sigma, size=templates[idx].vector.shape[0])
        templates[idx].vector = templates[idx].vector + noise
    return chosen


def tamper_extractor_block(chain: ExtractorChain, index: int, epsilon: float) -> None:
    """Perturb one numeric parameter of one stage block by ``epsilon``."""
    if not 0 <= index < len(chain.blocks):
        raise IndexOutOfRange(f"block index {index} out of range")
    if epsilon == 0:
        return
    params = chain.blocks[index].params
    if params.weights is not None and params.weights.size:
        params.weights.flat[0] += epsilon
    elif params.bias is not None and params.bias.size:
        params.bias.flat[0] += epsilon
    else:
        raise ValueError(f"stage {index} ({params.kind}) has no numeric parameters")


# ---------------------------------------------------------------------------
# Audit
# ---------------------------------------------------------------------------

@dataclass
class AuditReport:
    chain_first_tampered: Optional[int]
    tree_locators: list[LeafLocator]
    clean: bool
    lines: list[str]


def audit(system: EnrolledSystem) -> AuditReport:
    """Run both integrity checks and describe what they found."""
    chain_result = system.chain.verify()
    locators = verify_tree(system.tree)
    lines = []
    if chain_result is None:
        lines.append("chain: intact")
    else:
        lines.append(
            f"chain: first tampered block index {chain_result}; "
            f"restore_block({chain_result}) will recover it"
        )
    if not locators:
        lines.append("tree: intact")
    else:
        for loc in locators:
            lines.append(
                f"tree: tampered leaf chief={loc.chief_index} leaf={loc.leaf_index} "
                f"identity={loc.identity}; restore from archive index {loc.global_index}"
            )
    clean = chain_result is None and not locators
    return AuditReport(
        chain_first_tampered=chain_result,
        tree_locators=locators,
        clean=clean,
        lines=lines,
    )


# ---------------------------------------------------------------------------
# The comparison experiment
# ---------------------------------------------------------------------------

@dataclass
class ArmResult:
    """Identification quality of one architecture under one condition."""

    rank1: float
    cmc: CMCData


@dataclass
class Report:
    config: ExperimentConfig
    before_traditional: ArmResult
    before_proposed: ArmResult
    after_traditional: ArmResult
    after_proposed: ArmResult
    tampered_indices: list[int]
    audit_lines: list[str]
    timings: MatchTimings
    traditional_seconds: float
    proposed_seconds: float

    def to_text(self) -> str:
        """Deterministic report: a pure function of (config, seed)."""
        cfg = self.config
        out = []
        out.append("experiment report")
        out.append(
            f"config: seed={cfg.seed} gallery={cfg.gallery_size} dim={cfg.template_dim} "
            f"fanout={cfg.fanout} metric={cfg.metric} probes_per_identity={cfg.probes_per_identity}"
        )
        out.append(
            f"noise: probe_sigma={cfg.probe_noise_sigma:.17g} "
            f"tamper_sigma={cfg.effective_noise_sigma():.17g} fraction={cfg.tamper_fraction:.17g}"
        )
        out.append(f"tampered_templates: {len(self.tampered_indices)}")
        out.append("")
        out.append("architecture | condition | rank1")
        rows = [
            ("traditional", "before_tamper", self.before_traditional),
            ("proposed", "before_tamper", self.before_proposed),
            ("traditional", "after_tamper", self.after_traditional),
            ("proposed", "after_tamper", self.after_proposed),
        ]
        for arch, cond, arm in rows:
            out.append(f"{arch} | {cond} | {arm.rank1:.17g}")
        out.append("")
        out.append("cmc: architecture | condition | " + " ".join(
            f"r{r}" for r in self.before_traditional.cmc.ranks
        ))
        for arch, cond, arm in rows:
            values = " ".join(f"{a:.17g}" for a in arm.cmc.accuracy)
            out.append(f"{arch} | {cond} | {values}")
        out.append("")
        out.append("audit:")
        out.extend("  " + line for line in self.audit_lines)
        return "\n".join(out) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "results": {
                "before_tamper": {
                    "traditional": {
                        "rank1": self.before_traditional.rank1,
                        "cmc": list(self.before_traditional.cmc.accuracy),
                    },
                    "proposed": {
                        "rank1": self.before_proposed.rank1,
                        "cmc": list(self.before_proposed.cmc.accuracy),
                    },
                },
                "after_tamper": {
                    "traditional": {
                        "rank1": self.after_traditional.rank1,
                        "cmc": list(self.after_traditional.cmc.accuracy),
                    },
                    "proposed": {
                        "rank1": self.after_proposed.rank1,
                        "cmc": list(self.after_proposed.cmc.accuracy),
                    },
                },
            },
            "tampered_templates": len(self.tampered_indices),
            "audit": self.audit_lines,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"

    def timing_text(self) -> str:
        """Measured wall-clock costs; excluded from the deterministic report."""
        t = self.timings
        out = ["timing breakdown (seconds, protected matcher, all probes)"]
        out.append(f"probes_timed: {t.probes}")
        out.append(f"delegate_to_leaves: {t.delegate:.6f}")
        out.append(f"template_match: {t.match:.6f}")
        out.append(f"compare_leaf_scores: {t.compare_leaves:.6f}")
        out.append(f"secret_sharing: {t.sharing:.6f}")
        out.append(f"compare_chief_decisions: {t.compare_chiefs:.6f}")
        out.append(f"matcher_total: {t.total():.6f}")
        out.append(f"traditional_eval_total: {self.traditional_seconds:.6f}")
        out.append(f"proposed_eval_total: {self.proposed_seconds:.6f}")
        return "\n".join(out) + "\n"


def make_probes(
    gallery: Sequence[Template], config: ExperimentConfig
) -> tuple[list[np.ndarray], list[str]]:
    """Probe set: every identity's template plus Gaussian probe noise."""
    rng = _rng(config.seed, _STREAM_PROBES)
    probes, truth = [], []
    for t in gallery:
        for _ in range(config.probes_per_identity):
            probes.append(t.vector + rng.normal(scale=config.probe_noise_sigma, size=t.vector.shape[0]))
            truth.append(t.identity)
    return probes, truth


def evaluate_traditional(
    store: Sequence[Template],
    probes: Sequence[np.ndarray],
    truth: Sequence[str],
    metric: str,
    ranks: int,
) -> ArmResult:
    results = [flat_rank(store, p, metric) for p in probes]
    return ArmResult(
        rank1=rank_k_accuracy(results, truth, 1),
        cmc=cmc_curve(results, truth, ranks),
    )


def evaluate_proposed(
    system: EnrolledSystem,
    probes: Sequence[np.ndarray],
    truth: Sequence[str],
    metric: str,
    ranks: int,
    timings: Optional[MatchTimings] = None,
) -> ArmResult:
    """Full-pipeline evaluation: every probe runs the notarized chain and
    the consensus tree."""
    from .matcher import identify

    results: list[list[MatchScore]] = []
    for probe in probes:
        entry = run_query_cycle(system.chain, system.ledger, probe)
        outcome = identify(system.tree, handoff_envelope(entry), metric, timings)
        results.append(outcome.candidates)
    return ArmResult(
        rank1=rank_k_accuracy(results, truth, 1),
        cmc=cmc_curve(results, truth, ranks),
    )


def run_experiment(config: ExperimentConfig) -> Report:
    """The tamper-retention comparison.

    Both architectures are scored before tampering, the same Gaussian
    noise is injected into both template stores, the unprotected
    architecture is scored as-is, and the protected one audits, restores
    from the archive, and is scored again.
    """
    config.validate()
    gallery = generate_synthetic_gallery(config)
    system = enroll(
        gallery, config.chain_spec, fanout=config.fanout, seed=config.seed
    )
    probes, truth = make_probes(gallery, config)
    timings = MatchTimings()

    t0 = time.perf_counter()
    before_traditional = evaluate_traditional(
        system.flat_store, probes, truth, config.metric, config.ranks
    )
    traditional_seconds = time.perf_counter() - t0
    t0 = time.perf_counter()
    before_proposed = evaluate_proposed(
        system, probes, truth, config.metric, config.ranks, timings
    )
    proposed_seconds = time.perf_counter() - t0

    sigma = config.effective_noise_sigma()
    tampered = inject_template_noise(
        system.tree, sigma, config.seed, config.tamper_fraction
    )
    tampered_flat = inject_template_noise(
        system.flat_store, sigma, config.seed, config.tamper_fraction
    )
    assert tampered == tampered_flat

    t0 = time.perf_counter()
    after_traditional = evaluate_traditional(
        system.flat_store, probes, truth, config.metric, config.ranks
    )
    traditional_seconds += time.perf_counter() - t0

    findings = audit(system)
    audit_lines = list(findings.lines)
    restore_leaves(system.tree, findings.tree_locators, system.archive)
    post = audit(system)
    audit_lines.append(
        "after restore: " + ("clean" if post.clean else "; ".join(post.lines))
    )

    t0 = time.perf_counter()
    after_proposed = evaluate_proposed(
        system, probes, truth, config.metric, config.ranks, timings
    )
    proposed_seconds += time.perf_counter() - t0

    return Report(
        config=config,
        before_traditional=before_traditional,
        before_proposed=before_proposed,
        after_traditional=after_traditional,
        after_proposed=after_proposed,
        tampered_indices=tampered,
        audit_lines=audit_lines,
        timings=timings,
        traditional_seconds=traditional_seconds,
        proposed_seconds=proposed_seconds,
    )
