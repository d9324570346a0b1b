"""Operator CLI: build-codebook, index, query, evaluate, serve, bench.

Exit codes: 0 success, 1 operational error, 2 usage error.
"""

from __future__ import annotations

import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np

from cxsearch.descriptor import DESCRIPTOR_DIM, describe_image
from cxsearch.errors import ConfigError, CxSearchError, EmptyDescriptorSet
from cxsearch.imaging import decode_image
from cxsearch.index import ShardSet, build_shards, load_shard_set, write_shards
from cxsearch.localiser import DEFAULT_CATEGORIES, DEFAULT_IOU, evaluate, load_detections, load_ground_truth
from cxsearch.signature import Codebook, fit_kmeans, quantize
from cxsearch.synthetic import random_signatures

log = logging.getLogger("cxsearch")

MAX_SKIP_FRACTION = 0.10


@dataclass(frozen=True)
class ManifestRow:
    image_id: int
    path: Path
    category: str | None = None


def read_corpus_manifest(path: str | Path) -> list[ManifestRow]:
    """``id<TAB>path[<TAB>category]`` per line; relative paths resolve against the manifest."""
    path = Path(path)
    rows = []
    seen = set()
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise click.UsageError(f"{path}:{n}: expected id<TAB>path[<TAB>category]")
        try:
            image_id = int(parts[0])
        except ValueError:
            raise click.UsageError(f"{path}:{n}: image id {parts[0]!r} is not an integer") from None
        if image_id in seen:
            raise click.UsageError(f"{path}:{n}: duplicate image id {image_id}")
        seen.add(image_id)
        img_path = Path(parts[1])
        if not img_path.is_absolute():
            img_path = path.parent / img_path
        rows.append(ManifestRow(image_id, img_path, parts[2] if len(parts) == 3 else None))
    return rows


def _emit(fmt: str, record: dict, text: str) -> None:
    click.echo(json.dumps(record, sort_keys=True) if fmt == "json" else text)


def _fail(msg: str) -> None:
    click.echo(f"error: {msg}", err=True)
    sys.exit(1)


format_option = click.option(
    "--format", "fmt", type=click.Choice(["text", "json"]), default="text", show_default=True
)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Colour-texture visual search tooling."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command("build-codebook")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--k", type=click.IntRange(min=2), default=5000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--sample-cap", type=click.IntRange(min=1), default=200_000, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@format_option
def build_codebook(manifest: str, k: int, seed: int, sample_cap: int, out: str, fmt: str) -> None:
    """Train a k-means codebook from descriptors of the manifest's images."""
    rows = read_corpus_manifest(manifest)
    if not rows:
        raise click.UsageError("manifest is empty")
    rng = np.random.default_rng(seed)
    reservoir = np.empty((sample_cap, DESCRIPTOR_DIM))
    seen = 0
    for row in rows:
        try:
            descs = describe_image(decode_image(row.path.read_bytes()))
        except (OSError, CxSearchError) as exc:
            log.warning("skipping %s: %s", row.path, exc)
            continue
        for d in descs:
            # reservoir sampling keeps a uniform sample of every descriptor seen
            if seen < sample_cap:
                reservoir[seen] = d
            else:
                j = int(rng.integers(seen + 1))
                if j < sample_cap:
                    reservoir[j] = d
            seen += 1
    samples = reservoir[: min(seen, sample_cap)]
    if len(samples) < k:
        _fail(f"InsufficientSamples: need at least k={k} descriptors, extracted {len(samples)}")
    result = fit_kmeans(samples, k, seed)
    cb = Codebook(result.centres)
    cb.save(out)
    _emit(
        fmt,
        {"k": k, "samples": len(samples), "inertia": result.inertia, "iterations": result.n_iter, "codebook_id": cb.id.hex()},
        f"k={k}\tsamples={len(samples)}\tinertia={result.inertia:.6f}\tcodebook={cb.id.hex()}",
    )


@main.command("index")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--codebook", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--shards", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@format_option
def index_cmd(manifest: str, codebook: str, shards: int, out_dir: str, fmt: str) -> None:
    """Quantize every image and write word-range shards plus a shard manifest."""
    rows = read_corpus_manifest(manifest)
    cb = Codebook.load(codebook)
    sigs = []
    undecodable = 0
    featureless = 0
    for row in rows:
        try:
            img = decode_image(row.path.read_bytes())
        except (OSError, CxSearchError) as exc:
            click.echo(f"warning: skipping {row.path}: {exc}", err=True)
            undecodable += 1
            continue
        try:
            sigs.append((row.image_id, quantize(describe_image(img), cb)))
        except EmptyDescriptorSet:
            click.echo(f"warning: {row.path} has no textured keypoints; not indexed", err=True)
            featureless += 1
    if rows and undecodable / len(rows) > MAX_SKIP_FRACTION:
        _fail(f"{undecodable} of {len(rows)} images could not be decoded")
    if not sigs:
        _fail("no images could be indexed")
    parts = build_shards(sigs, cb.k, shards, cb.id)
    manifest_path = write_shards(parts, cb.k, out_dir)
    _emit(
        fmt,
        {"indexed": len(sigs), "skipped": undecodable, "featureless": featureless, "shards": shards, "manifest": str(manifest_path)},
        f"indexed={len(sigs)}\tskipped={undecodable}\tfeatureless={featureless}\tshards={shards}\tmanifest={manifest_path}",
    )


@main.command("query")
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True, help="Shard manifest.")
@click.option("--codebook", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--top-k", type=click.IntRange(min=1), default=10, show_default=True)
@format_option
def query_cmd(image: str, manifest: str, codebook: str, top_k: int, fmt: str) -> None:
    """Rank indexed images by chi-squared distance to IMAGE."""
    cb = Codebook.load(codebook)
    shard_set = load_shard_set(manifest)
    if shard_set.codebook_id != cb.id:
        _fail("codebook does not match the shard manifest")
    try:
        sig = quantize(describe_image(decode_image(Path(image).read_bytes())), cb)
        outcome = shard_set.search(sig, top_k)
    except CxSearchError as exc:
        _fail(f"{type(exc).__name__}: {exc}")
    if fmt == "json":
        click.echo(
            json.dumps(
                {
                    "results": [{"image_id": r.image_id, "distance": r.distance} for r in outcome.results],
                    "degraded": outcome.degraded,
                },
                sort_keys=True,
            )
        )
        return
    if outcome.degraded:
        click.echo(f"warning: shards {outcome.unavailable} unavailable; results are degraded", err=True)
    for rank, r in enumerate(outcome.results, 1):
        click.echo(f"{rank}\t{r.image_id}\t{r.distance:.6f}")


@main.command("evaluate")
@click.option("--detections", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--ground-truth", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--iou", "iou_thresh", type=float, default=DEFAULT_IOU, show_default=True)
@click.option("--category", "categories", multiple=True, help="Categories to score (default: those in the ground truth).")
@format_option
def evaluate_cmd(detections: str, ground_truth: str, iou_thresh: float, categories: tuple[str, ...], fmt: str) -> None:
    """Per-category AP and mAP of detections against ground truth."""
    dets = [(img, d) for img, ds in load_detections(detections).items() for d in ds]
    gt = load_ground_truth(ground_truth)
    if not categories:
        present = {c for boxes in gt.values() for c, _ in boxes}
        if not present:
            raise click.UsageError("ground truth has no boxes; pass --category")
        known = [c for c in DEFAULT_CATEGORIES if c in present]
        categories = tuple(known + sorted(present - set(known)))
    aps, m = evaluate(dets, gt, categories, iou_thresh)
    if fmt == "json":
        click.echo(json.dumps({"ap": aps, "mAP": m}, sort_keys=True))
        return
    width = max(len(c) for c in [*categories, "mAP"])
    click.echo(f"{'category':<{width}}\tAP")
    for c in categories:
        click.echo(f"{c:<{width}}\t{100 * aps[c]:.1f}%")
    click.echo(f"{'mAP':<{width}}\t{100 * m:.1f}%")


@main.command("serve")
@click.option("--config", "config_path", type=click.Path(), required=True, envvar="CXSEARCH_CONFIG")
@click.option("--host", default=None, envvar="CXSEARCH_HOST")
@click.option("--port", type=int, default=None, envvar="CXSEARCH_PORT")
def serve_cmd(config_path: str, host: str | None, port: int | None) -> None:
    """Run the HTTP service until SIGINT/SIGTERM."""
    from cxsearch.service import ServiceConfig, serve

    try:
        cfg = ServiceConfig.from_file(config_path)
        if host:
            cfg.host = host
        if port:
            cfg.port = port
        cfg.validate()
        serve(cfg)
    except (ConfigError, CxSearchError) as exc:
        _fail(str(exc))


@main.command("bench")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), help="Shard manifest; synthetic data if omitted.")
@click.option("--images", type=click.IntRange(min=1), default=10_000, show_default=True)
@click.option("--k", type=click.IntRange(min=2), default=5000, show_default=True)
@click.option("--shards", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--queries", type=click.IntRange(min=1), default=200, show_default=True)
@click.option("--top-k", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@format_option
def bench_cmd(manifest: str | None, images: int, k: int, shards: int, queries: int, top_k: int, seed: int, fmt: str) -> None:
    """Latency percentiles of shard fan-out queries."""
    if manifest:
        shard_set = load_shard_set(manifest)
        k = shard_set.k
        corpus_ids = None
    else:
        cid = b"bench\x00\x00\x00"
        sigs = random_signatures(images, k, cid, seed)
        shard_set = ShardSet.from_indexes(build_shards(sigs, k, shards, cid), k)
        corpus_ids = sigs
    qs = random_signatures(queries, k, shard_set.codebook_id, seed + 1, words_per_image=200)
    lat = []
    for _, q in qs:
        t0 = time.perf_counter()
        shard_set.search(q, top_k)
        lat.append(1000 * (time.perf_counter() - t0))
    p50, p90, p99 = np.percentile(lat, [50, 90, 99])
    n = len(corpus_ids) if corpus_ids is not None else shard_set.n_images
    _emit(
        fmt,
        {"images": n, "shards": len(shard_set.shards), "queries": queries, "p50_ms": p50, "p90_ms": p90, "p99_ms": p99},
        f"images={n}\tshards={len(shard_set.shards)}\tqueries={queries}\tp50={p50:.2f}ms\tp90={p90:.2f}ms\tp99={p99:.2f}ms",
    )


if __name__ == "__main__":
    main()
