"""Command-line driver for the experiment harness.

State lives in the output directory (default ``./runs``):

    config.json       experiment configuration
    gallery.txt       live template store (both architectures read this)
    archive.txt       enrollment-time template copies
    chain_params.bin  live extraction-stage parameters
    snapshot.bin      enrollment-time chain snapshot
    ledger.bin        append-only protocol transcript
    report.txt        deterministic experiment report
    summary.json      machine-readable results
    timings.txt       measured wall-clock costs (not deterministic)

A deployment is rebuilt deterministically from (gallery, fanout, seed),
so no key material needs to be stored between commands.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .encoding import ByteReader, lp
from .extractor import (
    ExtractorChain,
    IndexOutOfRange,
    IntegrityFailure,
    ShapeMismatch,
    StableSnapshot,
    StageParams,
    handoff_envelope,
    run_query_cycle,
)
from .harness import (
    EnrolledSystem,
    ExperimentConfig,
    audit as run_audit,
    enroll,
    enrollment_keys_rng,
    generate_synthetic_gallery,
    inject_template_noise,
    load_gallery,
    run_experiment,
    save_gallery,
    tamper_extractor_block,
)
from .metrics import DimensionMismatch
from .ledger import Ledger
from .matcher import TemplateArchive, build_tree, identify, restore_leaves

CONFIG_FILE = "config.json"
GALLERY_FILE = "gallery.txt"
ARCHIVE_FILE = "archive.txt"
CHAIN_FILE = "chain_params.bin"
SNAPSHOT_FILE = "snapshot.bin"
LEDGER_FILE = "ledger.bin"


def _load_config(out: Path, overrides: dict) -> ExperimentConfig:
    path = out / CONFIG_FILE
    data = json.loads(path.read_text()) if path.exists() else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)


def _save_config(out: Path, config: ExperimentConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


def _save_chain_params(path: Path, chain: ExtractorChain) -> None:
    blob = b"".join(lp(b.params.canonical_bytes()) for b in chain.blocks)
    path.write_bytes(blob)


def _load_chain_params(path: Path) -> list[StageParams]:
    reader = ByteReader(path.read_bytes())
    stages = []
    while not reader.exhausted:
        stages.append(StageParams.from_canonical(reader.read_lp()))
    return stages


def _load_system(out: Path, config: ExperimentConfig) -> EnrolledSystem:
    """Rebuild the enrolled deployment from the state directory."""
    for name in (GALLERY_FILE, ARCHIVE_FILE, CHAIN_FILE, SNAPSHOT_FILE):
        if not (out / name).exists():
            raise click.ClickException(f"missing {name} in {out}; run enroll first")
    archive_templates = load_gallery(out / ARCHIVE_FILE)
    live_templates = load_gallery(out / GALLERY_FILE)
    keys_rng = enrollment_keys_rng(config.seed)
    tree = build_tree(archive_templates, fanout=config.fanout, rng=keys_rng)
    stages = _load_chain_params(out / CHAIN_FILE)
    chain = ExtractorChain.build(stages, tree.public_key, rng=keys_rng)
    chain.snapshot = StableSnapshot.load(out / SNAPSHOT_FILE)
    # Load the live (possibly tampered) templates over the enrollment tree.
    for leaf, template in zip(tree.leaves(), live_templates):
        leaf.template = template
    ledger_path = out / LEDGER_FILE
    if ledger_path.exists() and ledger_path.stat().st_size:
        ledger = Ledger.load(ledger_path, resume=True)
    else:
        ledger = Ledger(ledger_path)
    return EnrolledSystem(
        chain=chain,
        ledger=ledger,
        tree=tree,
        archive=TemplateArchive(archive_templates),
        flat_store=live_templates,
        seed=config.seed,
        fanout=config.fanout,
    )


@click.group()
@click.option("--out", default="runs", type=click.Path(path_type=Path), show_default=True,
              help="State/output directory.")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path),
              help="JSON file with configuration fields.")
@click.option("--seed", type=int, default=None, help="Override the experiment seed.")
@click.option("--metric", type=click.Choice(["euclidean", "cosine"]), default=None,
              help="Override the distance metric.")
@click.pass_context
def main(ctx, out: Path, config_path, seed, metric):
    """Tamper-evident biometric identification testbed."""
    overrides = {"seed": seed, "metric": metric}
    if config_path is not None:
        base = json.loads(Path(config_path).read_text())
        base.update({k: v for k, v in overrides.items() if v is not None})
        file_cfg = ExperimentConfig.from_dict(base)
        ctx.obj = {"out": out, "config": file_cfg}
    else:
        ctx.obj = {"out": out, "config": _load_config(out, overrides)}


@main.command()
@click.option("--gallery-size", type=int, default=None)
@click.option("--template-dim", type=int, default=None)
@click.pass_context
def gen(ctx, gallery_size, template_dim):
    """Generate a synthetic gallery and write it with the configuration."""
    out: Path = ctx.obj["out"]
    config: ExperimentConfig = ctx.obj["config"]
    if gallery_size is not None:
        config.gallery_size = gallery_size
    if template_dim is not None:
        config.template_dim = template_dim
    templates = generate_synthetic_gallery(config)
    out.mkdir(parents=True, exist_ok=True)
    save_gallery(out / GALLERY_FILE, templates)
    _save_config(out, config)
    click.echo(f"wrote {len(templates)} templates of dimension "
               f"{config.template_dim} to {out / GALLERY_FILE}")


@main.command("enroll")
@click.pass_context
def enroll_cmd(ctx):
    """Enroll the gallery: build the chain and tree, snapshot, archive."""
    out: Path = ctx.obj["out"]
    config: ExperimentConfig = ctx.obj["config"]
    gallery_path = out / GALLERY_FILE
    if not gallery_path.exists():
        raise click.ClickException(f"no gallery at {gallery_path}; run gen first")
    templates = load_gallery(gallery_path)
    ledger_path = out / LEDGER_FILE
    ledger_path.write_bytes(b"")
    system = enroll(templates, config.chain_spec, fanout=config.fanout,
                    seed=config.seed, ledger=Ledger(ledger_path))
    save_gallery(out / ARCHIVE_FILE, templates)
    _save_chain_params(out / CHAIN_FILE, system.chain)
    system.chain.snapshot.save(out / SNAPSHOT_FILE)
    _save_config(out, config)
    click.echo(f"enrolled {len(templates)} templates: "
               f"{len(system.tree.chiefs)} chiefs, "
               f"{len(system.chain.blocks)} chain stages")
    click.echo(f"tree root hash: {system.tree.hash.hex()}")
    click.echo(f"chain notary hash: {system.chain.notary_hash().hex()}")


@main.command("identify")
@click.option("--identity", help="Probe the archived template of this identity.")
@click.option("--probe-file", type=click.Path(exists=True, path_type=Path),
              help="Single-record gallery file to use as the probe.")
@click.option("--probe-noise", type=float, default=0.0, show_default=True,
              help="Gaussian noise added to the probe.")
@click.pass_context
def identify_cmd(ctx, identity, probe_file, probe_noise):
    """Run one query through the chain and the tree."""
    out: Path = ctx.obj["out"]
    config: ExperimentConfig = ctx.obj["config"]
    system = _load_system(out, config)
    if probe_file is not None:
        probe = load_gallery(probe_file)[0].vector
    elif identity is not None:
        matches = [t for t in system.archive.templates() if t.identity == identity]
        if not matches:
            raise click.ClickException(f"identity {identity!r} not in the archive")
        probe = matches[0].vector
    else:
        raise click.ClickException("pass --identity or --probe-file")
    if probe_noise > 0:
        probe = probe + np.random.default_rng([config.seed, 99]).normal(
            scale=probe_noise, size=probe.shape[0]
        )
    try:
        entry = run_query_cycle(system.chain, system.ledger, probe)
    except IntegrityFailure as exc:
        raise click.ClickException(f"chain integrity check failed: {exc}; run audit")
    except ShapeMismatch as exc:
        raise click.ClickException(f"probe does not fit the extraction chain: {exc}")
    try:
        result = identify(system.tree, handoff_envelope(entry), config.metric)
    except DimensionMismatch as exc:
        raise click.ClickException(f"feature does not fit the gallery: {exc}")
    click.echo(f"identity: {result.identity}")
    click.echo(f"score: {result.score:.17g} ({config.metric})")
    if result.scrutinized_chiefs:
        click.echo(f"scrutinized chiefs: {list(result.scrutinized_chiefs)}")
    system.ledger.close()


@main.command("tamper")
@click.option("--fraction", type=float, default=None,
              help="Fraction of templates to perturb with Gaussian noise.")
@click.option("--sigma", type=float, default=None,
              help="Template noise std (default: configured tamper sigma).")
@click.option("--block", "block_index", type=int, default=None,
              help="Chain stage index to perturb.")
@click.option("--epsilon", type=float, default=1e-6, show_default=True,
              help="Perturbation added to the chain stage parameter.")
@click.pass_context
def tamper_cmd(ctx, fraction, sigma, block_index, epsilon):
    """Inject tampering into the live template store and/or the chain."""
    out: Path = ctx.obj["out"]
    config: ExperimentConfig = ctx.obj["config"]
    system = _load_system(out, config)
    did = False
    if fraction is not None:
        noise = sigma if sigma is not None else config.effective_noise_sigma()
        chosen = inject_template_noise(system.flat_store, noise, config.seed, fraction)
        save_gallery(out / GALLERY_FILE, system.flat_store)
        click.echo(f"perturbed {len(chosen)} templates (sigma={noise})")
        did = True
    if block_index is not None:
        try:
            tamper_extractor_block(system.chain, block_index, epsilon)
        except (ValueError, IndexOutOfRange) as exc:
            raise click.ClickException(str(exc))
        _save_chain_params(out / CHAIN_FILE, system.chain)
        click.echo(f"perturbed chain stage {block_index} by {epsilon}")
        did = True
    if not did:
        raise click.ClickException("pass --fraction and/or --block")
    system.ledger.close()


@main.command("audit")
@click.pass_context
def audit_cmd(ctx):
    """Check both integrity surfaces; exit nonzero when tampered."""
    out: Path = ctx.obj["out"]
    config: ExperimentConfig = ctx.obj["config"]
    system = _load_system(out, config)
    findings = run_audit(system)
    for line in findings.lines:
        click.echo(line)
    system.ledger.close()
    if not findings.clean:
        sys.exit(1)


@main.command("restore")
@click.pass_context
def restore_cmd(ctx):
    """Repair whatever the audit locates, from snapshot and archive."""
    out: Path = ctx.obj["out"]
    config: ExperimentConfig = ctx.obj["config"]
    system = _load_system(out, config)
    findings = run_audit(system)
    if findings.chain_first_tampered is not None:
        while True:
            index = system.chain.verify()
            if index is None:
                break
            system.chain.restore_block(index)
            click.echo(f"restored chain stage {index}")
        _save_chain_params(out / CHAIN_FILE, system.chain)
    if findings.tree_locators:
        restore_leaves(system.tree, findings.tree_locators, system.archive)
        save_gallery(out / GALLERY_FILE, system.tree.templates())
        click.echo(f"restored {len(findings.tree_locators)} templates")
    post = run_audit(_load_system(out, config))
    click.echo("post-restore audit: " + ("clean" if post.clean else "STILL TAMPERED"))
    system.ledger.close()
    if not post.clean:
        sys.exit(1)


@main.command("experiment")
@click.pass_context
def experiment_cmd(ctx):
    """Run the full tamper-retention comparison and write the report."""
    out: Path = ctx.obj["out"]
    config: ExperimentConfig = ctx.obj["config"]
    report = run_experiment(config)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    (out / "summary.json").write_text(report.to_json())
    (out / "timings.txt").write_text(report.timing_text())
    _save_config(out, config)
    click.echo(report.to_text())
    click.echo(f"report written to {out / 'report.txt'}")


@main.command("report")
@click.pass_context
def report_cmd(ctx):
    """Print the most recent experiment report."""
    out: Path = ctx.obj["out"]
    path = out / "report.txt"
    if not path.exists():
        raise click.ClickException(f"no report at {path}; run experiment first")
    click.echo(path.read_text(), nl=False)


if __name__ == "__main__":
    main()
