"""Text-fidelity and image-quality metrics.

Text metrics are whitespace-token based and case-sensitive: word error
rate (Levenshtein distance over words divided by reference length), BLEU-4
with uniform weights, brevity penalty and epsilon smoothing on zero n-gram
counts, and ROUGE-L as the LCS F-measure. A semantic similarity score is
available only through a registered backend; without one the metric is
absent, never silently substituted.

Image metrics assume [0, 1] float images: PSNR against peak 1.0 with a
100 dB cap for (near-)identical inputs, and mean local SSIM with the
standard 11x11 Gaussian window (sigma 1.5, k1=0.01, k2=0.03).
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP_DB = 100.0
BLEU_SMOOTHING_EPS = 0.1


def wer(reference: str, hypothesis: str) -> float:
    """Word-level edit distance divided by reference word count."""
    ref = reference.split()
    hyp = hypothesis.split()
    if not ref:
        raise ValueError("wer: reference must contain at least one word")
    prev = list(range(len(hyp) + 1))
    for i, rw in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, hw in enumerate(hyp, start=1):
            cost = 0 if rw == hw else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[-1] / len(ref)


def _ngram_counts(words: list[str], n: int) -> dict[tuple[str, ...], int]:
    counts: dict[tuple[str, ...], int] = {}
    for i in range(len(words) - n + 1):
        g = tuple(words[i : i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def bleu4(reference: str, hypothesis: str, eps: float = BLEU_SMOOTHING_EPS) -> float:
    """BLEU with n-grams up to 4, uniform weights and brevity penalty.

    Zero-match orders contribute eps/total instead of zero so short or
    fully disjoint sentences get a small positive floor rather than a hard
    zero. Orders longer than the hypothesis are skipped.
    """
    ref = reference.split()
    hyp = hypothesis.split()
    if not hyp:
        return 0.0
    log_precisions = []
    for n in range(1, 5):
        total = len(hyp) - n + 1
        if total <= 0:
            continue
        ref_counts = _ngram_counts(ref, n)
        matches = 0
        for g, c in _ngram_counts(hyp, n).items():
            matches += min(c, ref_counts.get(g, 0))
        p = matches / total if matches > 0 else eps / total
        log_precisions.append(math.log(p))
    if not log_precisions:
        return 0.0
    geo = math.exp(sum(log_precisions) / len(log_precisions))
    if len(hyp) >= len(ref):
        bp = 1.0
    else:
        bp = math.exp(1.0 - len(ref) / len(hyp))
    return bp * geo


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(reference: str, hypothesis: str) -> float:
    """Longest-common-subsequence F-measure over words (beta = 1)."""
    ref = reference.split()
    hyp = hypothesis.split()
    if not ref or not hyp:
        return 0.0
    lcs = _lcs_length(ref, hyp)
    if lcs == 0:
        return 0.0
    precision = lcs / len(hyp)
    recall = lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


BertBackend = Callable[[str, str], float]
_bert_backend: BertBackend | None = None


def register_bert_backend(fn: BertBackend | None) -> None:
    """Install (or clear, with None) the semantic-similarity backend.

    A conforming backend returns an F score in [0, 1] and scores identical
    strings as 1.0.
    """
    global _bert_backend
    _bert_backend = fn


def bert_score(reference: str, hypothesis: str, scorer: BertBackend | None = None) -> float | None:
    """Backend-defined similarity, or None when no backend is available."""
    backend = scorer or _bert_backend
    if backend is None:
        return None
    return float(backend(reference, hypothesis))


def psnr(a, b, cap: float = PSNR_CAP_DB) -> float:
    """-10 log10(MSE) in dB against peak 1.0, capped for identical images."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, -10.0 * math.log10(mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(a, b, k1: float = 0.01, k2: float = 0.03, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM over an 11x11 Gaussian window, per channel, averaged."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[None]
        y = y[None]
    if x.shape[1] < win_size or x.shape[2] < win_size:
        raise ValueError(f"ssim: image smaller than the {win_size}x{win_size} window")
    kernel = _gaussian_kernel(win_size, sigma)
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    vals = []
    for ch in range(x.shape[0]):
        xc, yc = x[ch], y[ch]
        mu_x = convolve2d(xc, kernel, mode="valid")
        mu_y = convolve2d(yc, kernel, mode="valid")
        xx = convolve2d(xc * xc, kernel, mode="valid") - mu_x**2
        yy = convolve2d(yc * yc, kernel, mode="valid") - mu_y**2
        xy = convolve2d(xc * yc, kernel, mode="valid") - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))
