"""Command-line entry point.

Exit codes: 0 success, 1 failure, 2 quota shortfall (output still written),
3 parse failure on decode, 64 semantic usage error. Every command records
the seed in its artifacts and is reproducible: the same config and seed
produce checksum-identical outputs.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from . import data as datamod
from . import evalharness, imaging, metrics, steganalysis
from .config import ConfigError, load_run_config
from .data import (
    IVTSubsetSpec,
    corpus_stats,
    generate_synthetic,
    generator_config_from_file,
    load_covers,
    read_manifest,
    write_manifest,
)
from .training import (
    DatasetError,
    TrainingDiverged,
    build_system,
    load_checkpoint,
    train_stage1,
    train_stage2,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_SHORTFALL = 2
EXIT_PARSE_FAILURE = 3
EXIT_USAGE = 64


def _fail(message: str, code: int = EXIT_FAILURE):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
@click.version_option()
def main():
    """Sentence-to-image steganography: hide a sentence in a cover image
    with a language model and recover it from the stego image."""


# ---------------------------------------------------------------------------
# dataset building


def _open_source(src: dict):
    """Yield TextRecords from a source spec {name, path, category, format}."""
    path = Path(src["path"])
    fmt = src.get("format", "lines")
    category = src.get("category", src["name"])
    name = src["name"]
    if fmt == "lines":
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    yield datamod.make_record(line, category=category, source=name)
    elif fmt == "jsonl":
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    yield datamod.make_record(
                        json.loads(line)["text"], category=category, source=name
                    )
    else:
        raise ValueError(f"unknown source format {fmt!r}")


@main.command("build-dataset")
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=False), help="Dataset spec YAML.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory for manifests and stats.")
def build_dataset(spec_path, out_dir):
    """Build granularity subsets from local source corpora."""
    try:
        raw = yaml.safe_load(Path(spec_path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        _fail(f"spec file not found: {spec_path}")
    if not isinstance(raw, dict) or not isinstance(raw.get("subsets", []), list):
        _fail(f"malformed dataset spec: {spec_path}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    had_shortfall = False
    stats_rows = []
    for subset in raw.get("subsets", []):
        try:
            spec = IVTSubsetSpec(
                granularity=subset["granularity"],
                min_words=subset["min_words"],
                max_words=subset["max_words"],
                quota_per_source=subset["quota_per_source"],
            )
        except (KeyError, TypeError) as exc:
            _fail(f"malformed subset spec: {exc}")
        sources = {}
        for src in subset.get("sources", []):
            if not Path(src["path"]).exists():
                _fail(f"source path not found: {src['path']}")
            sources[src["name"]] = _open_source(src)
        try:
            result = datamod.build_subset(sources, spec)
        except ValueError as exc:
            _fail(str(exc))
        manifest_path = out / f"ivt_{spec.granularity.lower()}.jsonl"
        write_manifest(manifest_path, result.records)
        if result.records:
            row = {"subset": spec.granularity, **corpus_stats(result.records)}
            stats_rows.append(row)
        if result.shortfalls:
            had_shortfall = True
            for name, missing in sorted(result.shortfalls.items()):
                click.echo(f"shortfall: subset {spec.granularity} source {name} missing {missing}", err=True)
        click.echo(f"wrote {manifest_path} ({len(result.records)} records)")
    stats_path = out / "stats.csv"
    with open(stats_path, "w", encoding="utf-8") as f:
        f.write("subset,avg_word_number,avg_bit_length,unique_words,sample_count\n")
        for row in stats_rows:
            f.write(
                f"{row['subset']},{row['avg_word_number']:.4f},{row['avg_bit_length']:.4f},"
                f"{row['unique_words']},{row['sample_count']}\n"
            )
    click.echo(f"wrote {stats_path}")
    sys.exit(EXIT_SHORTFALL if had_shortfall else EXIT_OK)


# ---------------------------------------------------------------------------
# training


@main.command()
@click.option("--stage", type=click.Choice(["1", "2"]), required=True, help="Training stage.")
@click.option("--config", "config_path", required=True, type=click.Path(), help="Run config YAML.")
@click.option("--init", "init_ckpt", type=click.Path(), default=None, help="Stage-1 checkpoint (required for stage 2).")
@click.option("--secrets", "secrets_path", type=click.Path(), default=None, help="Secrets manifest (JSONL); overrides config.")
@click.option("--covers", "covers_dir", type=click.Path(), default=None, help="Cover image directory (stage 2); overrides config.")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Output directory; overrides config.")
def train(stage, config_path, init_ckpt, secrets_path, covers_dir, out_dir):
    """Run one training stage and write a checkpoint plus loss log."""
    try:
        cfg = load_run_config(config_path)
    except (FileNotFoundError, ConfigError) as exc:
        _fail(str(exc))
    stage = int(stage)
    out = Path(out_dir or cfg.output_dir)
    secrets_file = secrets_path or cfg.secrets_manifest
    if not secrets_file:
        _fail("no secrets manifest given (--secrets or config secrets_manifest)", EXIT_USAGE)
    try:
        secrets = [r.text for r in read_manifest(secrets_file)]
    except FileNotFoundError:
        _fail(f"secrets manifest not found: {secrets_file}")
    try:
        if stage == 1:
            system = build_system(cfg)
            ckpt = train_stage1(
                system, secrets, cfg.stage1, run_cfg=cfg, out_dir=out, seed=cfg.seed
            )
        else:
            if not init_ckpt:
                _fail("stage 2 requires --init CKPT", EXIT_USAGE)
            covers_src = covers_dir or cfg.covers_dir
            if not covers_src:
                _fail("stage 2 requires --covers DIR (or config covers_dir)", EXIT_USAGE)
            geom = cfg.geometry
            covers = load_covers(covers_src, (geom.height, geom.width))
            if not covers:
                _fail(f"no decodable covers in {covers_src}")
            ckpt = train_stage2(
                init_ckpt, np.stack(covers), secrets, cfg.stage2, out_dir=out, seed=cfg.seed
            )
    except (TrainingDiverged, DatasetError) as exc:
        _fail(str(exc))
    click.echo(f"checkpoint: {ckpt.path}")
    sys.exit(EXIT_OK)


# ---------------------------------------------------------------------------
# embed / decode


def _load_checkpoint(ckpt_path: str):
    try:
        return load_checkpoint(ckpt_path)
    except FileNotFoundError:
        _fail(f"checkpoint not found: {ckpt_path}")
    except (ValueError, KeyError) as exc:
        _fail(f"bad checkpoint: {exc}")


def _load_system(ckpt_path: str):
    return _load_checkpoint(ckpt_path).system


@main.command()
@click.option("--ckpt", required=True, type=click.Path(), help="Trained checkpoint.")
@click.option("--cover", "cover_path", required=True, type=click.Path(), help="Cover image (PNG/JPEG or .fimg).")
@click.option("--message", default=None, help="Secret message text.")
@click.option("--message-file", type=click.Path(), default=None, help="Read the secret message from a file.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Output stego image (.png or .fimg).")
@click.option("--quantize", "quantize_bits", type=int, default=None, show_default=True, help="Quantize the stego carrier to this bit depth.")
def embed(ckpt, cover_path, message, message_file, out_path, quantize_bits):
    """Hide a message in a cover image; writes the stego image plus a
    sidecar JSON with geometry, seed and quality metrics."""
    if (message is None) == (message_file is None):
        _fail("exactly one of --message/--message-file is required", EXIT_USAGE)
    if message_file is not None:
        message = Path(message_file).read_text(encoding="utf-8").strip()
    loaded = _load_checkpoint(ckpt)
    system = loaded.system
    geom = system.geometry
    try:
        cover = imaging.load_image(cover_path)
    except FileNotFoundError:
        _fail(f"cover not found: {cover_path}")
    if cover.shape != (geom.channels, geom.height, geom.width):
        _fail(
            f"cover shape {cover.shape} does not match checkpoint geometry "
            f"({geom.channels}, {geom.height}, {geom.width})",
            EXIT_USAGE,
        )
    try:
        stego, residual = system.embed(message, cover)
    except ValueError as exc:
        _fail(str(exc), EXIT_USAGE)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    if quantize_bits is not None:
        stego = imaging.quantize(np.clip(stego, 0.0, 1.0), quantize_bits)
        imaging.save_png(out, stego)
    elif out.suffix == ".png":
        # PNG cannot hold the float carrier losslessly
        _fail("PNG output requires --quantize; use a .fimg path for float mode", EXIT_USAGE)
    else:
        imaging.save_float_image(out, stego.astype(np.float32))
    sidecar = {
        "geometry": {"channels": geom.channels, "height": geom.height, "width": geom.width, "patch": geom.patch},
        "seed": loaded.manifest["seed"],
        "quantize_bits": quantize_bits,
        "psnr_db": metrics.psnr(cover, stego),
        "ssim": metrics.ssim(cover, stego),
        "residual_mean_abs": float(np.mean(np.abs(residual))),
    }
    with open(out.with_suffix(out.suffix + ".json"), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)
    click.echo(f"wrote {out}")
    sys.exit(EXIT_OK)


@main.command()
@click.option("--ckpt", required=True, type=click.Path(), help="Trained checkpoint.")
@click.option("--stego", "stego_path", required=True, type=click.Path(), help="Stego image (.png or .fimg).")
@click.option("--max-len", type=int, default=None, help="Generation budget override.")
def decode(ckpt, stego_path, max_len):
    """Recover the hidden message; text goes to stdout, status to stderr."""
    system = _load_system(ckpt)
    try:
        stego = imaging.load_image(stego_path)
    except FileNotFoundError:
        _fail(f"stego image not found: {stego_path}")
    geom = system.geometry
    if stego.shape != (geom.channels, geom.height, geom.width):
        _fail(
            f"stego shape {stego.shape} does not match checkpoint geometry",
            EXIT_USAGE,
        )
    text, status = system.decode(stego, max_len=max_len)
    click.echo(text)
    click.echo(f"parse_status: {status.value}", err=True)
    sys.exit(EXIT_OK if status.ok else EXIT_PARSE_FAILURE)


# ---------------------------------------------------------------------------
# evaluation, sweep, steganalysis, synthetic generation


@main.command()
@click.option("--ckpt", required=True, type=click.Path(), help="Trained checkpoint.")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(), help="Secrets manifest (JSONL).")
@click.option("--covers", "covers_dir", required=True, type=click.Path(), help="Cover image directory.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Report directory.")
@click.option("--pairing", type=click.Choice(["zip", "grid"]), default="zip", show_default=True, help="Secret/cover pairing scheme.")
@click.option("--quantize", "quantize_bits", type=int, default=None, show_default=True, help="Quantize stego images before decoding.")
@click.option("--limit", type=int, default=None, help="Evaluate at most this many secrets.")
def evaluate(ckpt, manifest_path, covers_dir, out_dir, pairing, quantize_bits, limit):
    """Score a checkpoint over a secrets manifest and cover directory."""
    loaded = _load_checkpoint(ckpt)
    system = loaded.system
    try:
        secrets = [r.text for r in read_manifest(manifest_path)]
    except FileNotFoundError:
        _fail(f"manifest not found: {manifest_path}")
    if limit is not None:
        secrets = secrets[:limit]
    geom = system.geometry
    covers = load_covers(covers_dir, (geom.height, geom.width))
    if not covers:
        _fail(f"no decodable covers in {covers_dir}")
    report = evalharness.evaluate_suite(
        system, secrets, covers,
        pairing=pairing, quantize_bits=quantize_bits,
        config={"seed": loaded.manifest["seed"], "checkpoint": str(ckpt), "pairing": pairing,
                "quantize_bits": quantize_bits},
    )
    out = Path(out_dir)
    report.write_jsonl(out / "pairs.jsonl")
    report.write_csv(out / "aggregate.csv")
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump({"aggregates": report.aggregates, "config": report.config}, f, indent=1, sort_keys=True)
    click.echo(json.dumps(report.aggregates, sort_keys=True))
    sys.exit(EXIT_OK)


@main.command("capacity-sweep")
@click.option("--config", "config_path", required=True, type=click.Path(), help="Run config YAML.")
@click.option("--lengths", default="32,64,128,256", show_default=True, help="Comma-separated secret token lengths.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Report directory.")
@click.option("--n-secrets", type=int, default=8, show_default=True, help="Fresh secrets per configuration.")
def capacity_sweep_cmd(config_path, lengths, out_dir, n_secrets):
    """Train and evaluate a fresh desk-scale system per secret length."""
    try:
        cfg = load_run_config(config_path)
    except (FileNotFoundError, ConfigError) as exc:
        _fail(str(exc))
    token_lengths = [int(x) for x in lengths.split(",") if x.strip()]
    geom = cfg.geometry
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def run_one(n_tokens: int):
        rng = np.random.default_rng(cfg.seed + n_tokens)
        system = build_system(cfg, seed=cfg.seed + n_tokens)
        secrets = [
            datamod.text_with_token_length(system.tokenizer, n_tokens, rng)
            for _ in range(n_secrets)
        ]
        covers = _synthetic_covers(n_secrets, geom, seed=cfg.seed + n_tokens)
        ck1 = train_stage1(system, secrets, cfg.stage1, run_cfg=cfg,
                           out_dir=out / f"len{n_tokens}", seed=cfg.seed)
        ck2 = train_stage2(ck1, covers, secrets, cfg.stage2,
                           out_dir=out / f"len{n_tokens}", seed=cfg.seed)
        return evalharness.evaluate_suite(ck2.system, secrets, list(covers), pairing="zip")

    rows = evalharness.capacity_sweep(token_lengths, geom.n_patches, run_one)
    evalharness.write_sweep_csv(rows, out / "capacity.csv")
    for row in rows:
        click.echo(f"{row['tokens']} tokens ratio {row['compression_ratio']} wer {row['wer']:.4f}")
    sys.exit(EXIT_OK)


def _synthetic_covers(n: int, geom, seed: int) -> np.ndarray:
    """Low-frequency random covers for desk-scale runs without a corpus."""
    rng = np.random.default_rng(seed)
    block = max(1, geom.height // 8)
    covers = []
    for _ in range(n):
        coarse = rng.uniform(0.25, 0.75, size=(geom.channels, geom.height // block, geom.width // block))
        covers.append(np.kron(coarse, np.ones((block, block))))
    return np.stack(covers)


@main.command("steganalyze")
@click.option("--covers", "covers_dir", required=True, type=click.Path(), help="Clean image directory.")
@click.option("--stegos", "stegos_dir", required=True, type=click.Path(), help="Suspect image directory.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Report directory.")
def steganalyze_cmd(covers_dir, stegos_dir, out_dir):
    """Run the statistical detector battery and write the ROC as CSV."""
    covers = _load_dir_images(covers_dir)
    stegos = _load_dir_images(stegos_dir)
    try:
        result = steganalysis.steganalyze(covers, stegos)
    except ValueError as exc:
        _fail(str(exc), EXIT_USAGE)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "roc.csv", "w", encoding="utf-8") as f:
        f.write("threshold,fpr,tpr\n")
        for t, fp, tp in zip(result.thresholds, result.fpr, result.tpr):
            f.write(f"{t},{fp:.6f},{tp:.6f}\n")
    with open(out / "auc.json", "w", encoding="utf-8") as f:
        json.dump({"auc": result.auc, "n_cover": len(result.cover_scores),
                   "n_stego": len(result.stego_scores)}, f, indent=1, sort_keys=True)
    click.echo(f"auc: {result.auc:.4f}")
    sys.exit(EXIT_OK)


def _load_dir_images(directory) -> list:
    root = Path(directory)
    if not root.is_dir():
        _fail(f"image directory not found: {directory}")
    images = []
    for path in sorted(root.iterdir(), key=lambda p: p.name):
        if path.is_file():
            try:
                images.append(imaging.load_image(path))
            except Exception:
                click.echo(f"skipping unreadable image {path.name}", err=True)
    return images


@main.command("generate-ivtg")
@click.option("--client-config", "client_config_path", required=True, type=click.Path(), help="Generator client config JSON.")
@click.option("--n", "count", required=True, type=int, help="Number of samples to generate.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Output manifest (JSONL).")
@click.option("--min-words", type=int, default=100, show_default=True, help="Lower word bound.")
@click.option("--max-words", type=int, default=500, show_default=True, help="Upper word bound.")
@click.option("--seed", type=int, default=0, show_default=True, help="Prompt sampling seed.")
def generate_ivtg(client_config_path, count, out_path, min_words, max_words, seed):
    """Generate a synthetic secrets manifest from a text-generation API."""
    if count < 1:
        _fail("--n must be >= 1", EXIT_USAGE)
    try:
        client_cfg = generator_config_from_file(client_config_path)
    except FileNotFoundError:
        _fail(f"client config not found: {client_config_path}")
    try:
        result = generate_synthetic(
            client_cfg, count, (min_words, max_words), seed=seed
        )
    except datamod.GenerationAuthError as exc:
        _fail(str(exc))
    write_manifest(out_path, result.records)
    click.echo(
        f"wrote {out_path}: {len(result.records)}/{count} records "
        f"({result.attempts} requests, {result.skipped} skipped)"
    )
    sys.exit(EXIT_OK if result.records else EXIT_FAILURE)


if __name__ == "__main__":
    main()
