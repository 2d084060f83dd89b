"""Dataset tooling: evaluation manifests, training corpus, covers.

Manifests are newline-delimited UTF-8 JSON records with the fields
{text, category, source, word_count, bit_length}; word_count is the
whitespace token count and bit_length is 8x the UTF-8 byte length.
Benchmark subsets filter records into word-count bands (short phrases,
medium passages, long paragraphs) with a per-source quota; the training
corpus is composed under a disjointness guarantee against every evaluation
manifest, matching on a normalized-text hash (lowercased, punctuation
stripped, whitespace collapsed) so trivial formatting differences cannot
leak evaluation records into training.

Synthetic corpora come from an HTTP chat-completion endpoint; the
credential is read from an environment variable at request time and never
serialized into any artifact.
"""

from __future__ import annotations

import hashlib
import json
import os
import string
import time
import urllib.error
import urllib.request
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image


class ManifestError(ValueError):
    """Malformed manifest or empty input where records are required."""


def word_count(text: str) -> int:
    return len(text.split())


def bit_length(text: str) -> int:
    return 8 * len(text.encode("utf-8"))


@dataclass(frozen=True)
class TextRecord:
    text: str
    category: str
    source: str
    word_count: int
    bit_length: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "text": self.text,
                "category": self.category,
                "source": self.source,
                "word_count": self.word_count,
                "bit_length": self.bit_length,
            },
            ensure_ascii=False,
            sort_keys=True,
        )


def make_record(text: str, category: str = "unspecified", source: str = "unspecified") -> TextRecord:
    return TextRecord(
        text=text,
        category=category,
        source=source,
        word_count=word_count(text),
        bit_length=bit_length(text),
    )


def write_manifest(path: str | Path, records: Iterable[TextRecord]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(rec.to_json())
            f.write("\n")
            n += 1
    return n


def read_manifest(path: str | Path) -> list[TextRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                records.append(
                    TextRecord(
                        text=raw["text"],
                        category=raw["category"],
                        source=raw["source"],
                        word_count=raw["word_count"],
                        bit_length=raw["bit_length"],
                    )
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise ManifestError(f"{path}:{lineno}: bad record ({exc})") from exc
    return records


def corpus_stats(records: Sequence[TextRecord]) -> dict:
    """Summary row: average word number, average bit length, unique words
    (case-folded whitespace tokens), sample count."""
    if not records:
        raise ManifestError("corpus_stats requires a nonempty manifest")
    uniq: set[str] = set()
    for rec in records:
        uniq.update(tok.casefold() for tok in rec.text.split())
    n = len(records)
    return {
        "avg_word_number": sum(r.word_count for r in records) / n,
        "avg_bit_length": sum(r.bit_length for r in records) / n,
        "unique_words": len(uniq),
        "sample_count": n,
    }


# ---------------------------------------------------------------------------
# subset building


@dataclass(frozen=True)
class IVTSubsetSpec:
    """Granularity band and per-source quota for one benchmark subset."""

    granularity: str  # "S" | "M" | "L"
    min_words: int
    max_words: int
    quota_per_source: int

    @classmethod
    def short(cls, quota: int = 1000) -> "IVTSubsetSpec":
        return cls("S", 1, 20, quota)

    @classmethod
    def medium(cls, quota: int = 1000) -> "IVTSubsetSpec":
        return cls("M", 20, 100, quota)

    @classmethod
    def long(cls, quota: int = 1000) -> "IVTSubsetSpec":
        return cls("L", 100, 100_000, quota)


@dataclass
class SubsetResult:
    records: list[TextRecord]
    shortfalls: dict[str, int] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return not self.shortfalls

    def stats(self) -> dict:
        return corpus_stats(self.records)


def build_subset(
    sources: Mapping[str, Iterable[TextRecord]], spec: IVTSubsetSpec
) -> SubsetResult:
    """Fill the per-source quota with records inside the word band.

    An exhausted source produces a shortfall entry (source -> missing
    count) and a warning rather than a failure.
    """
    out: list[TextRecord] = []
    shortfalls: dict[str, int] = {}
    for name, stream in sources.items():
        taken = 0
        for rec in stream:
            if taken >= spec.quota_per_source:
                break
            if spec.min_words <= rec.word_count <= spec.max_words:
                out.append(rec)
                taken += 1
        if taken < spec.quota_per_source:
            shortfalls[name] = spec.quota_per_source - taken
            warnings.warn(
                f"subset {spec.granularity}: source {name!r} short by "
                f"{shortfalls[name]} records",
                stacklevel=2,
            )
    return SubsetResult(records=out, shortfalls=shortfalls)


# ---------------------------------------------------------------------------
# training corpus with disjointness


_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalized_text_hash(text: str) -> str:
    """Hash that survives case, punctuation and whitespace differences."""
    norm = " ".join(text.casefold().translate(_PUNCT_TABLE).split())
    return hashlib.sha256(norm.encode("utf-8")).hexdigest()


@dataclass
class ComposeResult:
    records: list[TextRecord]
    collisions: int


def compose_training_corpus(
    source_streams: Sequence[Iterable[TextRecord]],
    eval_manifests: Sequence[Sequence[TextRecord]] = (),
) -> ComposeResult:
    """Merge sources into one training manifest, dropping (and counting)
    any record whose normalized text appears in an evaluation manifest.

    Output has set semantics: duplicates collapse and the order of input
    streams does not affect the resulting record set.
    """
    banned: set[str] = set()
    for manifest in eval_manifests:
        for rec in manifest:
            banned.add(normalized_text_hash(rec.text))
    seen: set[str] = set()
    out: list[TextRecord] = []
    collisions = 0
    for stream in source_streams:
        for rec in stream:
            h = normalized_text_hash(rec.text)
            if h in banned:
                collisions += 1
                continue
            if h in seen:
                continue
            seen.add(h)
            out.append(rec)
    out.sort(key=lambda r: (r.category, r.source, r.text))
    return ComposeResult(records=out, collisions=collisions)


# ---------------------------------------------------------------------------
# cover images


def load_covers(
    directory: str | Path,
    resolution: tuple[int, int],
    limit: int | None = None,
) -> list[np.ndarray]:
    """Load, center-crop and box-resize images to (H, W), scaled to [0, 1].

    Iteration order is sorted by filename; undecodable files are skipped
    with a warning. Returns (3, H, W) float64 arrays.
    """
    h, w = resolution
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"cover directory not found: {root}")
    out: list[np.ndarray] = []
    for path in sorted(root.iterdir(), key=lambda p: p.name):
        if not path.is_file():
            continue
        if limit is not None and len(out) >= limit:
            break
        try:
            pil = Image.open(path).convert("RGB")
        except Exception as exc:  # PIL raises assorted types for bad files
            warnings.warn(f"skipping undecodable cover {path.name}: {exc}", stacklevel=2)
            continue
        sw, sh = pil.size
        scale = max(w / sw, h / sh)
        crop_w = int(round(w / scale))
        crop_h = int(round(h / scale))
        left = (sw - crop_w) // 2
        top = (sh - crop_h) // 2
        pil = pil.crop((left, top, left + crop_w, top + crop_h))
        pil = pil.resize((w, h), resample=Image.BOX)
        arr = np.asarray(pil, dtype=np.float64) / 255.0
        out.append(np.transpose(arr, (2, 0, 1)))
    return out


# ---------------------------------------------------------------------------
# synthetic corpus generation


TOPICS = (
    "technology", "sports", "food", "travel", "animals",
    "weather", "history", "music", "movies", "health",
    "science", "business", "education", "art", "space",
    "environment", "literature", "film",
    "psychology", "politics", "economics", "fashion",
    "mathematics", "engineering", "architecture", "philosophy", "geography",
    "biology", "chemistry", "physics", "astronomy", "medicine",
    "language", "culture", "society", "religion", "anthropology",
    "family", "relationships", "hobbies", "pets", "home",
    "work", "money", "shopping", "transportation", "holidays",
    "AI", "climate change", "sustainability", "social media", "mental health",
    "innovation", "future", "data", "privacy", "globalization",
)

ADJECTIVES = (
    "interesting", "funny", "serious", "educational", "creative",
    "unusual", "controversial", "inspirational", "practical", "philosophical",
)


class GenerationAuthError(RuntimeError):
    """Credential rejected; not retryable."""


@dataclass(frozen=True)
class GeneratorClientConfig:
    base_url: str
    credential_env: str = "STEGOLM_GENERATOR_KEY"
    model: str = "deepseek-chat"
    temperature: float = 0.8
    max_output_tokens: int = 500
    max_retries: int = 3
    backoff_base: float = 0.5
    rate_limit_per_s: float | None = None
    timeout_s: float = 30.0

    def to_dict(self) -> dict:
        # the credential itself never appears here, only the variable name
        return {
            "base_url": self.base_url,
            "credential_env": self.credential_env,
            "model": self.model,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "max_retries": self.max_retries,
            "backoff_base": self.backoff_base,
            "rate_limit_per_s": self.rate_limit_per_s,
            "timeout_s": self.timeout_s,
        }


def generator_config_from_file(path: str | Path) -> GeneratorClientConfig:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return GeneratorClientConfig(**raw)


def _generation_prompt(rng: np.random.Generator, lo: int, hi: int) -> str:
    topic = TOPICS[int(rng.integers(0, len(TOPICS)))]
    adjective = ADJECTIVES[int(rng.integers(0, len(ADJECTIVES)))]
    return (
        f"Generate a short English sentence about {topic}. "
        f"The sentence should be {adjective} and "
        f"contain exactly between {lo} to {hi} words. "
        "Do NOT include any explanation or notes, "
        "just the sentence itself."
    )


_SYSTEM_PROMPT = (
    "You are a concise English text generator. "
    "Generate ONLY the requested sentence with the requested word count. "
    "Do NOT add any explanations, notes or punctuation outside the sentence."
)


@dataclass
class SyntheticResult:
    records: list[TextRecord]
    attempts: int
    skipped: int


def _post_chat(cfg: GeneratorClientConfig, prompt: str) -> str:
    key = os.environ.get(cfg.credential_env, "")
    body = json.dumps(
        {
            "model": cfg.model,
            "messages": [
                {"role": "system", "content": _SYSTEM_PROMPT},
                {"role": "user", "content": prompt},
            ],
            "max_tokens": cfg.max_output_tokens,
            "temperature": cfg.temperature,
        }
    ).encode("utf-8")
    req = urllib.request.Request(
        cfg.base_url.rstrip("/") + "/chat/completions",
        data=body,
        headers={
            "Content-Type": "application/json",
            "Authorization": f"Bearer {key}",
        },
        method="POST",
    )
    with urllib.request.urlopen(req, timeout=cfg.timeout_s) as resp:
        payload = json.loads(resp.read().decode("utf-8"))
    return payload["choices"][0]["message"]["content"].strip()


def generate_synthetic(
    cfg: GeneratorClientConfig,
    n: int,
    length_band: tuple[int, int] = (100, 500),
    *,
    category: str = "synthetic",
    seed: int = 0,
    sleep=time.sleep,
) -> SyntheticResult:
    """Request n generated texts inside the word band.

    Auth failures abort immediately; transient HTTP errors back off
    exponentially and, past the retry budget, the sample is skipped so a
    partial result still comes back with its count.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    lo, hi = length_band
    rng = np.random.default_rng(seed)
    records: list[TextRecord] = []
    attempts = 0
    skipped = 0
    last_request = 0.0
    for _ in range(n):
        got = None
        for retry in range(cfg.max_retries + 1):
            if cfg.rate_limit_per_s:
                wait = (1.0 / cfg.rate_limit_per_s) - (time.monotonic() - last_request)
                if wait > 0:
                    sleep(wait)
            attempts += 1
            last_request = time.monotonic()
            try:
                text = _post_chat(cfg, _generation_prompt(rng, lo, hi))
            except urllib.error.HTTPError as exc:
                if exc.code in (401, 403):
                    raise GenerationAuthError(
                        f"generator endpoint rejected the credential from "
                        f"${cfg.credential_env} (HTTP {exc.code})"
                    ) from exc
                if retry < cfg.max_retries:
                    sleep(cfg.backoff_base * (2**retry))
                    continue
                break
            except (urllib.error.URLError, TimeoutError):
                if retry < cfg.max_retries:
                    sleep(cfg.backoff_base * (2**retry))
                    continue
                break
            if lo <= word_count(text) <= hi:
                got = text
                break
            # out-of-band length: retry within the same budget
            if retry >= cfg.max_retries:
                break
        if got is None:
            skipped += 1
            continue
        records.append(make_record(got, category=category, source="generator"))
    return SyntheticResult(records=records, attempts=attempts, skipped=skipped)


# ---------------------------------------------------------------------------
# synthetic secrets of controlled token length (capacity sweeps, fixtures)


_WORDS = (
    "river", "stone", "copper", "light", "signal", "garden", "window", "castle",
    "orange", "silver", "motor", "cloud", "forest", "bridge", "candle", "meadow",
    "harbor", "travel", "python", "letter", "market", "winter", "summer", "violet",
)


def random_sentence(rng: np.random.Generator, n_words: int) -> str:
    return " ".join(_WORDS[int(rng.integers(0, len(_WORDS)))] for _ in range(n_words))


def text_with_token_length(tokenizer, n_tokens: int, rng: np.random.Generator) -> str:
    """Compose a word sequence whose tokenization is exactly n_tokens long."""
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    text = ""
    while True:
        word = _WORDS[int(rng.integers(0, len(_WORDS)))]
        candidate = f"{text} {word}".strip()
        length = len(tokenizer.tokenize(candidate))
        if length == n_tokens:
            return candidate
        if length > n_tokens:
            # pad with single letters to land exactly on the target
            base = len(tokenizer.tokenize(text)) if text else 0
            remaining = n_tokens - base
            if text and remaining >= 2:
                filler = "".join(
                    "abcdefghijklmnopqrstuvwxyz"[int(rng.integers(0, 26))]
                    for _ in range(remaining - 1)
                )
                candidate = f"{text} {filler}"
            else:
                filler = "".join(
                    "abcdefghijklmnopqrstuvwxyz"[int(rng.integers(0, 26))]
                    for _ in range(n_tokens)
                )
                candidate = filler
            assert len(tokenizer.tokenize(candidate)) == n_tokens
            return candidate
        text = candidate
