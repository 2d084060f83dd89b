import math

import numpy as np
import pytest
import torch

from stegolm.config import StageConfig
from stegolm.pipeline import apply_mask
from stegolm.projectors import patch_to_token, token_to_patch
from stegolm.training import (
    DatasetError,
    TrainingDiverged,
    build_system,
    evaluation_loss,
    gradcheck,
    load_checkpoint,
    loss_emb,
    loss_text,
    save_checkpoint,
    stage1_losses,
    stage2_losses,
    tensor_checksums,
    total_loss,
    train_stage1,
    train_stage2,
    _teacher_forced_text_loss,
    _batched_smes,
)
from tests.conftest import micro_run_config, smooth_covers

SECRETS = ["red fox", "blue sky", "green hat", "old map"]


class TestLossText:
    def test_perfect_prediction_zero(self):
        targets = torch.tensor([0, 2, 1])
        logits = torch.full((3, 4), -1e9)
        for i, t in enumerate(targets):
            logits[i, t] = 1e9
        assert loss_text(logits, targets).item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform_logits_log_vocab(self):
        v = 37
        logits = torch.zeros(5, v)
        targets = torch.tensor([0, 1, 2, 3, 4])
        assert loss_text(logits, targets).item() == pytest.approx(math.log(v), rel=1e-6)

    def test_hand_computed_two_position_case(self):
        # by-hand softmax cross-entropy, V=3:
        # row 0: logits (1, 0, 0), target 0 -> -log(e/ (e+2))
        # row 1: logits (0, 2, 0), target 2 -> -log(1 / (2+e^2))
        logits = torch.tensor([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
        targets = torch.tensor([0, 2])
        e = math.e
        expected = 0.5 * (
            -math.log(e / (e + 2)) + -math.log(1.0 / (2.0 + e**2))
        )
        assert loss_text(logits, targets).item() == pytest.approx(expected, rel=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            loss_text(torch.zeros(3, 5), torch.tensor([0, 1]))


class TestLossEmb:
    def test_zero(self):
        assert loss_emb(torch.zeros(4, 6)).item() == 0.0

    def test_constant(self):
        assert loss_emb(torch.full((3, 5), 0.2)).item() == pytest.approx(0.2)

    def test_homogeneity(self):
        p = torch.randn(6, 7)
        c = -2.5
        assert loss_emb(c * p).item() == pytest.approx(abs(c) * loss_emb(p).item(), rel=1e-6)


class TestTotalLoss:
    def test_stage1_weighted_sum(self):
        cfg = StageConfig(stage=1, lambda_text=1.0, lambda_emb=1.0)
        assert total_loss(1, torch.tensor(0.5), torch.tensor(0.1), cfg).item() == pytest.approx(0.6)

    def test_stage2_ignores_emb(self):
        cfg = StageConfig(stage=2, lambda_text=1.0, lambda_emb=1.0)
        out = total_loss(2, torch.tensor(0.7), torch.tensor(123.0), cfg)
        assert out.item() == pytest.approx(0.7)
        # independence: a wildly different l_emb changes nothing
        out2 = total_loss(2, torch.tensor(0.7), torch.tensor(-9e9), cfg)
        assert out2.item() == out.item()

    def test_zero_weights(self):
        cfg = StageConfig(stage=1, lambda_text=0.0, lambda_emb=0.0)
        assert total_loss(1, torch.tensor(3.0), torch.tensor(4.0), cfg).item() == 0.0

    def test_linear_in_both_losses(self):
        cfg = StageConfig(stage=1, lambda_text=2.0, lambda_emb=0.5)
        lt, le = torch.tensor(0.3), torch.tensor(0.8)
        assert total_loss(1, lt, le, cfg).item() == pytest.approx(2.0 * 0.3 + 0.5 * 0.8)

    def test_bad_stage(self):
        with pytest.raises(ValueError):
            total_loss(3, torch.tensor(1.0), torch.tensor(1.0), StageConfig(stage=1))


class TestCheckpoint:
    def test_zero_steps_checkpoint_equals_initialization(self, tmp_path):
        cfg = micro_run_config()
        system = build_system(cfg, seed=0)
        before = tensor_checksums(system)
        stage_cfg = StageConfig(stage=1, steps=0, batch_size=4, warmup_steps=1)
        train_stage1(system, SECRETS, stage_cfg, run_cfg=cfg, out_dir=tmp_path, seed=0)
        assert tensor_checksums(system) == before

    def test_save_load_reproduces_eval_loss(self, tmp_path):
        cfg = micro_run_config()
        system = build_system(cfg, seed=0)
        ckpt = train_stage1(system, SECRETS, cfg.stage1, run_cfg=cfg, out_dir=tmp_path, seed=0)
        saved_loss = ckpt.manifest["eval_loss"]
        assert saved_loss is not None
        reloaded = load_checkpoint(ckpt.path)
        new_loss = evaluation_loss(reloaded.system, reloaded.manifest["eval_secrets"])
        assert new_loss == pytest.approx(saved_loss, rel=1e-5)

    def test_loaded_tensors_identical(self, tmp_path):
        cfg = micro_run_config()
        system = build_system(cfg, seed=0)
        ckpt = save_checkpoint(
            tmp_path / "x.ckpt", system, run_cfg=cfg, step=0, seed=0, stage=1
        )
        reloaded = load_checkpoint(ckpt.path)
        assert tensor_checksums(reloaded.system) == tensor_checksums(system)
        assert reloaded.system.specials == system.specials

    def test_tampered_archive_rejected(self, tmp_path):
        import zipfile

        cfg = micro_run_config()
        system = build_system(cfg, seed=0)
        ckpt = save_checkpoint(
            tmp_path / "x.ckpt", system, run_cfg=cfg, step=0, seed=0, stage=1
        )
        entry = ckpt.manifest["tensors"][0]["name"]
        # rewrite one tensor blob with zeros of the same length
        with zipfile.ZipFile(ckpt.path) as zf:
            names = zf.namelist()
            blobs = {n: zf.read(n) for n in names}
        blobs[f"tensors/{entry}.bin"] = bytes(len(blobs[f"tensors/{entry}.bin"]))
        with zipfile.ZipFile(ckpt.path, "w") as zf:
            for n, b in blobs.items():
                zf.writestr(n, b)
        with pytest.raises(ValueError, match="checksum"):
            load_checkpoint(ckpt.path)

    def test_manifest_lists_every_tensor(self, tmp_path):
        cfg = micro_run_config()
        system = build_system(cfg, seed=0)
        ckpt = save_checkpoint(
            tmp_path / "m.ckpt", system, run_cfg=cfg, step=0, seed=0, stage=1
        )
        names = {e["name"] for e in ckpt.manifest["tensors"]}
        assert names == set(tensor_checksums(system))
        for entry in ckpt.manifest["tensors"]:
            assert entry["shape"] is not None and entry["dtype"]


class TestTrainingLoops:
    def test_empty_dataset_rejected(self, tmp_path):
        cfg = micro_run_config()
        system = build_system(cfg, seed=0)
        with pytest.raises(DatasetError):
            train_stage1(system, [], cfg.stage1, run_cfg=cfg, out_dir=tmp_path, seed=0)

    def test_nan_aborts_with_diagnostic(self, tmp_path):
        cfg = micro_run_config()
        system = build_system(cfg, seed=0)
        with torch.no_grad():
            system.t2p.net[0].weight.fill_(float("inf"))
        with pytest.raises(TrainingDiverged, match="stage 1"):
            train_stage1(system, SECRETS, cfg.stage1, run_cfg=cfg, out_dir=tmp_path, seed=0)

    def test_loss_log_reproducible(self, tmp_path):
        cfg = micro_run_config()
        logs = []
        for run in range(2):
            system = build_system(cfg, seed=0)
            out = tmp_path / f"run{run}"
            train_stage1(system, SECRETS, cfg.stage1, run_cfg=cfg, out_dir=out, seed=0)
            logs.append((out / "train_stage1.log").read_bytes())
        assert logs[0] == logs[1]

    def test_stage2_requires_stage2_config(self, tmp_path):
        cfg = micro_run_config()
        system = build_system(cfg, seed=0)
        ckpt = train_stage1(system, SECRETS, cfg.stage1, run_cfg=cfg, out_dir=tmp_path, seed=0)
        covers = smooth_covers(2, cfg.geometry)
        with pytest.raises(ValueError, match="stage-2"):
            train_stage2(ckpt, covers, SECRETS, cfg.stage1, out_dir=tmp_path, seed=0)

    def test_stage2_freeze_contract_micro(self, tmp_path):
        cfg = micro_run_config()
        system = build_system(cfg, seed=0)
        ck1 = train_stage1(system, SECRETS, cfg.stage1, run_cfg=cfg, out_dir=tmp_path, seed=0)
        before = tensor_checksums(ck1.system)
        covers = smooth_covers(4, cfg.geometry)
        ck2 = train_stage2(ck1, covers, SECRETS, cfg.stage2, out_dir=tmp_path, seed=0)
        after = tensor_checksums(ck2.system)
        changed = {k for k in before if before[k] != after[k]}
        assert changed  # token-to-patch weights did move
        assert all(k.startswith("t2p.") for k in changed)

    def test_stage2_rejects_empty_covers(self, tmp_path):
        cfg = micro_run_config()
        system = build_system(cfg, seed=0)
        ckpt = train_stage1(system, SECRETS, cfg.stage1, run_cfg=cfg, out_dir=tmp_path, seed=0)
        with pytest.raises(DatasetError):
            train_stage2(ckpt, np.zeros((0, 3, 64, 64)), SECRETS, cfg.stage2, out_dir=tmp_path)


class TestPathIdentities:
    def test_zero_cover_matches_stage1_path(self):
        # with all-zero covers and no clamping the image path degenerates
        # to the stage-1 feature path with the mask off
        cfg = micro_run_config()
        system = build_system(cfg, seed=0)
        system.model.eval()
        rng = np.random.default_rng(0)
        l_txt_s1, _ = stage1_losses(system, SECRETS, [0.0] * len(SECRETS), rng)
        covers = torch.zeros(len(SECRETS), 3, 64, 64)
        l_txt_s2 = stage2_losses(system, SECRETS, covers, clamp="none")
        assert l_txt_s2.item() == pytest.approx(l_txt_s1.item(), abs=1e-6)

    def test_full_mask_kills_secret_signal(self):
        # at R=1 the decode input is independent of which secret produced
        # it: permuting the embed-side secrets leaves the loss unchanged
        cfg = micro_run_config()
        system = build_system(cfg, seed=0)
        system.model.eval()
        rng = np.random.default_rng(0)
        with torch.no_grad():
            e = _batched_smes(system, SECRETS)
            p = system.t2p(e)
            e2 = system.p2t(p)
            masked = torch.stack(
                [apply_mask(e2[i], 1.0, rng) for i in range(len(SECRETS))]
            )
            base = _teacher_forced_text_loss(system, masked, SECRETS)
            perm = [SECRETS[-1]] + SECRETS[:-1]
            e_p = _batched_smes(system, perm)
            p_p = system.t2p(e_p)
            e2_p = system.p2t(p_p)
            masked_p = torch.stack(
                [apply_mask(e2_p[i], 1.0, rng) for i in range(len(perm))]
            )
            shuffled = _teacher_forced_text_loss(system, masked_p, SECRETS)
        assert shuffled.item() == pytest.approx(base.item(), abs=1e-6)


class TestGradcheck:
    def test_linear_projector_tight(self):
        torch.manual_seed(0)
        proj = token_to_patch(6, 9, depth=1)
        sample = torch.randn(4, 6)
        assert gradcheck(proj, sample, epsilon=1e-5, probe="quadratic") < 1e-7

    def test_default_projector_l1(self):
        torch.manual_seed(1)
        proj = token_to_patch(6, 8, hidden=10)
        sample = torch.randn(5, 6)
        assert gradcheck(proj, sample, epsilon=1e-5, probe="l1") < 1e-4

    def test_p2t_quadratic_probe(self):
        torch.manual_seed(2)
        proj = patch_to_token(10, 6, hidden=12)
        sample = torch.randn(4, 10)
        assert gradcheck(proj, sample, epsilon=1e-5, probe="quadratic") < 1e-4

    def test_epsilon_zero_rejected(self):
        proj = token_to_patch(4, 4, depth=1)
        with pytest.raises(ValueError, match="epsilon"):
            gradcheck(proj, torch.randn(2, 4), epsilon=0.0)

    def test_coordinate_subsampling(self):
        torch.manual_seed(3)
        proj = token_to_patch(8, 8)
        err = gradcheck(proj, torch.randn(3, 8), epsilon=1e-5, probe="quadratic", max_coords=20)
        assert err < 1e-4
