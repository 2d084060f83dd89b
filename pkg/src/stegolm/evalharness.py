"""Evaluation harness: per-pair metric reports and capacity sweeps.

``evaluate_suite`` drives any codec exposing ``embed(secret, cover)`` and
``decode(stego)`` over (secret, cover) pairs, scoring text fidelity
(WER, BLEU-4, ROUGE-L, optional semantic score) and image quality
(PSNR, SSIM). Reports serialize as JSONL per pair plus one CSV aggregate
row; a parse failure never aborts a pair, the metrics just run against the
best-effort text and the pair is flagged.

``capacity_sweep`` re-trains a fresh desk-scale system per secret token
length and reports the token-to-patch compression ratio alongside the
metric aggregates.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .imaging import quantize

TEXT_METRICS = ("wer", "bleu4", "rouge_l")
IMAGE_METRICS = ("psnr", "ssim")


@dataclass
class PairRecord:
    index: int
    secret: str
    recovered: str
    parse_status: str
    wer: float
    bleu4: float
    rouge_l: float
    psnr: float
    ssim: float
    bert_score: float | None = None

    def to_json(self) -> str:
        raw = {
            "index": self.index,
            "secret": self.secret,
            "recovered": self.recovered,
            "parse_status": self.parse_status,
            "wer": self.wer,
            "bleu4": self.bleu4,
            "rouge_l": self.rouge_l,
            "psnr": self.psnr,
            "ssim": self.ssim,
        }
        if self.bert_score is not None:
            raw["bert_score"] = self.bert_score
        return json.dumps(raw, ensure_ascii=False, sort_keys=True)


@dataclass
class MetricsReport:
    records: list[PairRecord]
    aggregates: dict[str, float]
    config: dict = field(default_factory=dict)

    def write_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for rec in self.records:
                f.write(rec.to_json())
                f.write("\n")

    def write_csv(self, path: str | Path) -> None:
        """One aggregate row mirroring the secret/recovery and cover/stego
        column groups."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = [c for c in ("wer", "bleu4", "rouge_l", "bert_score", "psnr", "ssim")
                if c in self.aggregates]
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(cols)
            writer.writerow([f"{self.aggregates[c]:.6f}" for c in cols])


def _status_str(status) -> str:
    return status.value if hasattr(status, "value") else str(status)


def evaluate_suite(
    codec,
    secrets: Sequence[str],
    covers: Sequence[np.ndarray],
    *,
    pairing: str = "zip",
    quantize_bits: int | None = None,
    config: dict | None = None,
) -> MetricsReport:
    """Embed/decode every (secret, cover) pair and score it.

    pairing="zip" walks secrets with covers cycling; pairing="grid" scores
    the full cross product. With ``quantize_bits`` the stego image is
    snapped to that bit depth before decoding (carrier realism mode).
    """
    secrets = [s if isinstance(s, str) else s.text for s in secrets]
    if not secrets:
        raise ValueError("no secrets to evaluate")
    if not len(covers):
        raise ValueError("no covers to evaluate")
    if pairing == "zip":
        pairs = [(i, s, covers[i % len(covers)]) for i, s in enumerate(secrets)]
    elif pairing == "grid":
        pairs = [
            (i * len(covers) + j, s, cover)
            for i, s in enumerate(secrets)
            for j, cover in enumerate(covers)
        ]
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    records: list[PairRecord] = []
    for index, secret, cover in pairs:
        stego, _residual = codec.embed(secret, cover)
        if quantize_bits is not None:
            stego = quantize(np.clip(stego, 0.0, 1.0), quantize_bits)
        recovered, status = codec.decode(stego)
        records.append(
            PairRecord(
                index=index,
                secret=secret,
                recovered=recovered,
                parse_status=_status_str(status),
                wer=metrics.wer(secret, recovered),
                bleu4=metrics.bleu4(secret, recovered),
                rouge_l=metrics.rouge_l(secret, recovered),
                psnr=metrics.psnr(cover, stego),
                ssim=metrics.ssim(cover, stego),
                bert_score=metrics.bert_score(secret, recovered),
            )
        )
    agg: dict[str, float] = {}
    for name in TEXT_METRICS + IMAGE_METRICS:
        agg[name] = float(np.mean([getattr(r, name) for r in records]))
    bert_vals = [r.bert_score for r in records if r.bert_score is not None]
    if len(bert_vals) == len(records) and bert_vals:
        agg["bert_score"] = float(np.mean(bert_vals))
    agg["parse_ok_rate"] = float(
        np.mean([1.0 if r.parse_status == "ok" else 0.0 for r in records])
    )
    return MetricsReport(records=records, aggregates=agg, config=dict(config or {}))


def compression_ratio(n_tokens: int, n_patches: int) -> str:
    """Secret token count over patch count, as a reduced a:b string."""
    if n_tokens < 1 or n_patches < 1:
        raise ValueError("token and patch counts must be positive")
    g = math.gcd(n_tokens, n_patches)
    return f"{n_tokens // g}:{n_patches // g}"


def capacity_sweep(
    token_lengths: Sequence[int],
    n_patches: int,
    run_one: Callable[[int], MetricsReport],
) -> list[dict]:
    """Train/evaluate one configuration per secret length.

    ``run_one`` receives the token length and returns its MetricsReport;
    each output row carries the capacity, the compression ratio and the
    report aggregates.
    """
    rows = []
    for n_tokens in token_lengths:
        report = run_one(n_tokens)
        row = {
            "tokens": n_tokens,
            "compression_ratio": compression_ratio(n_tokens, n_patches),
        }
        row.update(report.aggregates)
        rows.append(row)
    return rows


def write_sweep_csv(rows: Sequence[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        raise ValueError("no sweep rows to write")
    cols = list(rows[0].keys())
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
