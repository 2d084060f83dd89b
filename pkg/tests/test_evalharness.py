import json

import numpy as np
import pytest

from stegolm.evalharness import (
    capacity_sweep,
    compression_ratio,
    evaluate_suite,
    write_sweep_csv,
)
from stegolm.metrics import register_bert_backend


class EchoStub:
    """Identity codec: echoes the secret and leaves the cover untouched."""

    def embed(self, secret, cover):
        self._last = secret
        return np.array(cover, copy=True), np.zeros_like(cover)

    def decode(self, stego):
        return self._last, "ok"


class NoisyStub:
    """Adds a fixed residual and garbles the decode."""

    def embed(self, secret, cover):
        residual = np.full_like(cover, 0.01)
        return cover + residual, residual

    def decode(self, stego):
        return "", "no_start"


def _covers(n=3, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.uniform(0.2, 0.8, (3, 32, 32)) for _ in range(n)]


SECRETS = ["alpha beta", "gamma delta", "epsilon zeta"]


class TestEvaluateSuite:
    def test_identity_stub_perfect_text(self):
        report = evaluate_suite(EchoStub(), SECRETS, _covers())
        assert report.aggregates["wer"] == 0.0
        assert report.aggregates["bleu4"] == pytest.approx(1.0)
        assert report.aggregates["rouge_l"] == 1.0
        assert report.aggregates["parse_ok_rate"] == 1.0

    def test_zero_residual_perfect_image(self):
        report = evaluate_suite(EchoStub(), SECRETS, _covers())
        assert report.aggregates["psnr"] == 100.0
        assert report.aggregates["ssim"] == pytest.approx(1.0)

    def test_parse_failure_flagged_not_fatal(self):
        report = evaluate_suite(NoisyStub(), SECRETS, _covers())
        assert report.aggregates["parse_ok_rate"] == 0.0
        assert all(r.parse_status == "no_start" for r in report.records)
        assert report.aggregates["wer"] == 1.0  # empty best-effort text

    def test_grid_pairing_covers_cross_product(self):
        report = evaluate_suite(EchoStub(), SECRETS, _covers(4), pairing="grid")
        assert len(report.records) == len(SECRETS) * 4

    def test_zip_pairing_one_per_secret(self):
        report = evaluate_suite(EchoStub(), SECRETS, _covers(2), pairing="zip")
        assert len(report.records) == len(SECRETS)

    def test_bert_score_included_only_with_backend(self):
        report = evaluate_suite(EchoStub(), SECRETS, _covers())
        assert "bert_score" not in report.aggregates
        register_bert_backend(lambda r, h: 1.0 if r == h else 0.0)
        try:
            report2 = evaluate_suite(EchoStub(), SECRETS, _covers())
            assert report2.aggregates["bert_score"] == 1.0
        finally:
            register_bert_backend(None)

    def test_quantize_mode_still_scores(self):
        report = evaluate_suite(EchoStub(), SECRETS, _covers(), quantize_bits=8)
        # quantizing the untouched cover costs at most half a level
        assert report.aggregates["psnr"] > 45.0

    def test_empty_inputs_rejected(self):
        with pytest.raises(ValueError):
            evaluate_suite(EchoStub(), [], _covers())
        with pytest.raises(ValueError):
            evaluate_suite(EchoStub(), SECRETS, [])


class TestReportSerialization:
    def test_jsonl_and_csv_deterministic(self, tmp_path):
        report = evaluate_suite(EchoStub(), SECRETS, _covers())
        a1, a2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        report.write_jsonl(a1)
        report.write_jsonl(a2)
        assert a1.read_bytes() == a2.read_bytes()
        c1, c2 = tmp_path / "a.csv", tmp_path / "b.csv"
        report.write_csv(c1)
        report.write_csv(c2)
        assert c1.read_bytes() == c2.read_bytes()

    def test_jsonl_records_parse(self, tmp_path):
        report = evaluate_suite(EchoStub(), SECRETS, _covers())
        path = tmp_path / "pairs.jsonl"
        report.write_jsonl(path)
        lines = path.read_text(encoding="utf-8").strip().splitlines()
        assert len(lines) == len(SECRETS)
        rec = json.loads(lines[0])
        assert {"secret", "recovered", "wer", "bleu4", "rouge_l", "psnr", "ssim", "parse_status"} <= set(rec)

    def test_csv_header_mirrors_metric_columns(self, tmp_path):
        report = evaluate_suite(EchoStub(), SECRETS, _covers())
        path = tmp_path / "agg.csv"
        report.write_csv(path)
        header = path.read_text(encoding="utf-8").splitlines()[0]
        assert header == "wer,bleu4,rouge_l,psnr,ssim"


class TestCompressionRatio:
    @pytest.mark.parametrize(
        "tokens,expected",
        [(32, "1:2"), (64, "1:1"), (128, "2:1"), (256, "4:1")],
    )
    def test_published_ratio_column(self, tokens, expected):
        assert compression_ratio(tokens, 64) == expected

    def test_general_reduction(self):
        assert compression_ratio(48, 64) == "3:4"

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            compression_ratio(0, 64)


class TestCapacitySweep:
    def test_rows_carry_ratio_and_aggregates(self, tmp_path):
        def run_one(n_tokens):
            return evaluate_suite(EchoStub(), SECRETS, _covers())

        rows = capacity_sweep([32, 64, 128, 256], 64, run_one)
        assert [r["compression_ratio"] for r in rows] == ["1:2", "1:1", "2:1", "4:1"]
        assert all("wer" in r and "psnr" in r for r in rows)
        write_sweep_csv(rows, tmp_path / "sweep.csv")
        header = (tmp_path / "sweep.csv").read_text(encoding="utf-8").splitlines()[0]
        assert header.startswith("tokens,compression_ratio")
