"""Losses, the two-stage training procedure, checkpoints, and gradcheck.

Stage 1 trains without any cover image: secret -> SMEs -> patch grid
(L1 penalty toward zero) -> back to embedding width -> random row masking
-> teacher-forced decode (cross-entropy on the wrapped secret only).
Trainable: LoRA adapters, token embeddings, output head, both projectors.

Stage 2 freezes everything except the token-to-patch projector and runs
the full image path: patch grid -> residual image -> add to a sampled
cover (clamped) -> patchify -> frozen patch-to-token -> frozen decode.
Only the text loss applies.

Checkpoints are single-file zip archives: ``manifest.json`` records every
tensor's name, shape, dtype and sha256 plus the config snapshot, step,
seed and a frozen eval loss; raw little-endian tensor bytes live under
``tensors/``. Per-tensor checksums make the Stage-2 freeze contract
directly testable.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig, StageConfig, run_config_from_dict
from .imaging import insert, patchify, reshape_to_image
from .model import build_model
from .pipeline import StegoSystem, apply_mask
from .projectors import ProjectorMLP, patch_to_token, token_to_patch
from .textproto import (
    ByteTokenizer,
    PromptTemplates,
    build_embed_input,
    load_templates,
    register_special_tokens,
    wrap_message,
)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; aborted with diagnostics."""


class DatasetError(ValueError):
    """Training inputs are empty or malformed."""


# ---------------------------------------------------------------------------
# losses


def loss_text(logits: torch.Tensor, target_ids: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over supervised positions.

    ``logits`` must hold exactly one row of vocabulary scores per
    supervised target position; prompt positions are excluded by the
    caller before this point.
    """
    if logits.shape[0] != target_ids.shape[0]:
        raise ValueError(
            f"got {logits.shape[0]} logit rows for {target_ids.shape[0]} targets"
        )
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(1, target_ids.view(-1, 1)).squeeze(1)
    return -picked.mean()


def loss_emb(p: torch.Tensor) -> torch.Tensor:
    """L1 pull of the patch grid toward zero: mean absolute entry."""
    return p.abs().mean()


def total_loss(stage: int, l_txt, l_emb, cfg: StageConfig):
    """Stage 1: lambda_text * L_txt + lambda_emb * L_emb. Stage 2 drops L_emb."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if stage == 2:
        return cfg.lambda_text * l_txt
    return cfg.lambda_text * l_txt + cfg.lambda_emb * l_emb


# ---------------------------------------------------------------------------
# system construction


def build_system(
    run_cfg: RunConfig,
    templates: PromptTemplates | None = None,
    seed: int | None = None,
) -> StegoSystem:
    """Fresh tokenizer, tiny model and projectors wired for the configured
    geometry. Initialization is deterministic under the given seed."""
    torch.manual_seed(run_cfg.seed if seed is None else seed)
    templates = templates or load_templates(run_cfg.template_dir)
    tokenizer = ByteTokenizer(run_cfg.model.base_vocab_size)
    specials = register_special_tokens(tokenizer)
    geom = run_cfg.geometry
    model = build_model(tokenizer.vocab_size, run_cfg.model, run_cfg.stage1.lora)
    t2p = token_to_patch(model.d_emb, geom.d_patch)
    p2t = patch_to_token(geom.d_patch, model.d_emb)
    bundle = templates.build_bundle(tokenizer, specials, geom.n_patches)
    return StegoSystem(
        model=model, t2p=t2p, p2t=p2t, tokenizer=tokenizer, specials=specials,
        bundle=bundle, geometry=geom, clamp=run_cfg.clamp, templates=templates,
    )


def _secret_texts(secrets) -> list[str]:
    texts = [s if isinstance(s, str) else s.text for s in secrets]
    if not texts:
        raise DatasetError("secret dataset is empty")
    return texts


def default_max_len(system: StegoSystem, texts: Sequence[str]) -> int:
    """Greedy decode budget: 1.25x the longest secret plus delimiter slack."""
    longest = max(len(system.tokenizer.tokenize(t)) for t in texts)
    return math.ceil(1.25 * longest) + 3


# ---------------------------------------------------------------------------
# batched passes


def _batched_smes(system: StegoSystem, texts: list[str]) -> torch.Tensor:
    """Embedding pass for a batch of secrets; returns (B, N, d_emb)."""
    model, bundle = system.model, system.bundle
    n = system.geometry.n_patches
    inputs, positions = [], []
    for t in texts:
        wrapped = wrap_message(t, system.tokenizer, system.specials)
        ids, pos = build_embed_input(wrapped, bundle, n)
        inputs.append(ids)
        positions.append(pos)
    max_t = max(len(ids) for ids in inputs)
    batch = torch.zeros(len(texts), max_t, dtype=torch.long)
    pad_mask = torch.zeros(len(texts), max_t, dtype=torch.bool)
    for i, ids in enumerate(inputs):
        batch[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        pad_mask[i, : len(ids)] = True
    hidden = model.forward_hidden_states(model.input_embedding_lookup(batch), pad_mask)
    rows = torch.stack([hidden[i, positions[i]] for i in range(len(texts))])
    return rows


def _teacher_forced_text_loss(
    system: StegoSystem, features: torch.Tensor, texts: list[str]
) -> torch.Tensor:
    """Decode pass with injected features and teacher-forced targets.

    Supervises only the wrapped-message tokens; the decode prompt carries
    no labels.
    """
    model, bundle = system.model, system.bundle
    prompt_ids = torch.tensor(bundle.decode_prompt_ids, dtype=torch.long)
    stego_pos = list(bundle.decode_stego_positions)
    lp = len(prompt_ids)
    targets = [
        list(wrap_message(t, system.tokenizer, system.specials).token_ids) for t in texts
    ]
    seqs = []
    for i, tgt in enumerate(targets):
        pe = model.input_embedding_lookup(prompt_ids).clone()
        pe[stego_pos] = features[i].to(pe.dtype)
        te = model.input_embedding_lookup(torch.tensor(tgt, dtype=torch.long))
        seqs.append(torch.cat([pe, te], dim=0))
    max_t = max(s.shape[0] for s in seqs)
    d = seqs[0].shape[1]
    batch = torch.zeros(len(seqs), max_t, d, dtype=seqs[0].dtype)
    pad_mask = torch.zeros(len(seqs), max_t, dtype=torch.bool)
    for i, s in enumerate(seqs):
        batch[i, : s.shape[0]] = s
        pad_mask[i, : s.shape[0]] = True
    hidden = model.forward_hidden_states(batch, pad_mask)
    logits = model.output_logits(hidden)
    rows, labels = [], []
    for i, tgt in enumerate(targets):
        # position p predicts token p+1; the first target token is predicted
        # from the last prompt position
        rows.append(logits[i, lp - 1 : lp + len(tgt) - 1])
        labels.extend(tgt)
    return loss_text(torch.cat(rows, dim=0), torch.tensor(labels, dtype=torch.long))


def stage1_losses(
    system: StegoSystem,
    texts: list[str],
    mask_ratios: Sequence[float],
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One Stage-1 forward: returns (l_txt, l_emb) for a batch of secrets."""
    e = _batched_smes(system, texts)
    p = system.t2p(e)
    l_emb = loss_emb(p)
    e2 = system.p2t(p)
    masked = torch.stack(
        [apply_mask(e2[i], float(mask_ratios[i]), rng) for i in range(len(texts))]
    )
    l_txt = _teacher_forced_text_loss(system, masked, texts)
    return l_txt, l_emb


def stage2_losses(
    system: StegoSystem, texts: list[str], covers: torch.Tensor, clamp: str
) -> torch.Tensor:
    """One Stage-2 forward through the image path; returns l_txt.

    The embedding pass runs without gradients (the backbone is frozen and
    upstream of the only trainable module); gradients flow from the text
    loss back through the frozen decode and patch-to-token layers into the
    token-to-patch projector.
    """
    with torch.no_grad():
        e = _batched_smes(system, texts)
    p = system.t2p(e)
    residual = torch.stack(
        [reshape_to_image(p[i], system.geometry) for i in range(len(texts))]
    )
    stego = insert(covers.to(p.dtype), residual, clamp=clamp)
    p_hat = torch.stack([patchify(stego[i], system.geometry.patch) for i in range(len(texts))])
    e_hat = system.p2t(p_hat)
    return _teacher_forced_text_loss(system, e_hat, texts)


def evaluation_loss(system: StegoSystem, texts: Sequence[str]) -> float:
    """Deterministic Stage-1-style text loss (no mask) on a fixed batch.

    Used to freeze a reference value into checkpoints: reloading and
    re-running must reproduce it.
    """
    model = system.model
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        with torch.no_grad():
            e = _batched_smes(system, list(texts))
            p = system.t2p(e)
            e2 = system.p2t(p)
            l_txt = _teacher_forced_text_loss(system, e2, list(texts))
        return float(l_txt.item())
    finally:
        if was_training:
            model.train()


# ---------------------------------------------------------------------------
# optimizer plumbing


def _stage_parameters(system: StegoSystem, stage: int) -> list[torch.nn.Parameter]:
    groups = system.model.parameter_groups()
    for p in groups["base"]:
        p.requires_grad_(False)
    if stage == 1:
        trainable = (
            groups["lora_adapters"] + groups["token_embeddings"] + groups["lm_head"]
            + list(system.t2p.parameters()) + list(system.p2t.parameters())
        )
        for p in trainable:
            p.requires_grad_(True)
        return trainable
    # stage 2: only the token-to-patch projector updates
    for name in ("lora_adapters", "token_embeddings", "lm_head"):
        for p in groups[name]:
            p.requires_grad_(False)
    for p in system.p2t.parameters():
        p.requires_grad_(False)
    trainable = list(system.t2p.parameters())
    for p in trainable:
        p.requires_grad_(True)
    return trainable


def _cosine_warmup(step: int, total: int, warmup: int) -> float:
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    if total <= warmup:
        return 1.0
    frac = (step - warmup) / (total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * frac))


def _batches(texts: list[str], batch_size: int, steps: int, rng: np.random.Generator):
    """Deterministic batch stream: full set when it fits, else shuffled epochs."""
    if batch_size >= len(texts):
        for _ in range(steps):
            yield list(texts)
        return
    order: list[int] = []
    for _ in range(steps):
        while len(order) < batch_size:
            order.extend(rng.permutation(len(texts)).tolist())
        take, order = order[:batch_size], order[batch_size:]
        yield [texts[i] for i in take]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    path: Path
    manifest: dict
    system: StegoSystem | None = None


def _state_tensors(system: StegoSystem) -> dict[str, torch.Tensor]:
    out: dict[str, torch.Tensor] = {}
    for prefix, module in (("model", system.model), ("t2p", system.t2p), ("p2t", system.p2t)):
        for key, value in module.state_dict().items():
            out[f"{prefix}.{key}"] = value
    return out


def tensor_checksums(system: StegoSystem) -> dict[str, str]:
    """sha256 of every parameter/buffer's raw little-endian bytes."""
    sums = {}
    for name, t in _state_tensors(system).items():
        arr = t.detach().cpu().numpy()
        sums[name] = hashlib.sha256(arr.tobytes()).hexdigest()
    return sums


def save_checkpoint(
    path: str | Path,
    system: StegoSystem,
    *,
    run_cfg: RunConfig,
    step: int,
    seed: int,
    stage: int,
    eval_secrets: Sequence[str] = (),
) -> Checkpoint:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    eval_secrets = list(eval_secrets)
    eval_loss = evaluation_loss(system, eval_secrets) if eval_secrets else None
    tensors = _state_tensors(system)
    entries = []
    blobs: dict[str, bytes] = {}
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy()
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        blobs[name] = raw
    manifest = {
        "format": "stegolm-checkpoint-v1",
        "step": step,
        "seed": seed,
        "stage": stage,
        "special_tokens": {
            "secret_start": system.specials.secret_start,
            "secret_end": system.specials.secret_end,
            "secret_emb": system.specials.secret_emb,
            "stego": system.specials.stego,
        },
        "max_len": system.max_len,
        "eval_loss": eval_loss,
        "eval_secrets": eval_secrets,
        "templates": {
            "embed_text": system.templates.embed_text if system.templates else None,
            "decode_text": system.templates.decode_text if system.templates else None,
        },
        "config": run_cfg.to_dict(),
        "tensors": entries,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for name, raw in blobs.items():
            zf.writestr(f"tensors/{name}.bin", raw)
    return Checkpoint(path=path, manifest=manifest, system=system)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Rebuild a StegoSystem from a checkpoint archive, verifying checksums."""
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != "stegolm-checkpoint-v1":
            raise ValueError(f"{path}: not a stegolm checkpoint")
        run_cfg = run_config_from_dict(_strip_config(manifest["config"]))
        tmpl = manifest.get("templates") or {}
        templates = None
        if tmpl.get("embed_text") and tmpl.get("decode_text"):
            templates = PromptTemplates(tmpl["embed_text"], tmpl["decode_text"])
        system = build_system(run_cfg, templates=templates, seed=manifest["seed"])
        saved = manifest["special_tokens"]
        got = system.specials
        if (saved["secret_start"], saved["secret_end"], saved["secret_emb"], saved["stego"]) != got.as_tuple():
            raise ValueError(f"{path}: special-token ids differ from the rebuilt tokenizer")
        states: dict[str, dict[str, torch.Tensor]] = {"model": {}, "t2p": {}, "p2t": {}}
        for entry in manifest["tensors"]:
            raw = zf.read(f"tensors/{entry['name']}.bin")
            if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
                raise ValueError(f"{path}: checksum mismatch for {entry['name']}")
            arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
            prefix, key = entry["name"].split(".", 1)
            states[prefix][key] = torch.tensor(arr.copy())
    system.model.load_state_dict(states["model"])
    system.t2p.load_state_dict(states["t2p"])
    system.p2t.load_state_dict(states["p2t"])
    system.max_len = int(manifest.get("max_len") or system.max_len)
    return Checkpoint(path=path, manifest=manifest, system=system)


def _strip_config(raw: dict) -> dict:
    # asdict() serializes nested dataclasses; rebuild tuples where needed
    cfg = copy.deepcopy(raw)
    for stage in ("stage1", "stage2"):
        if stage in cfg and "lora" in cfg[stage] and "targets" in cfg[stage]["lora"]:
            cfg[stage]["lora"]["targets"] = tuple(cfg[stage]["lora"]["targets"])
    return cfg


# ---------------------------------------------------------------------------
# training loops


def _log_line(handle, step: int, l_txt: float, l_emb: float, lr: float):
    handle.write(f"{step},{l_txt:.8f},{l_emb:.8f},{lr:.8f}\n")


def train_stage1(
    system: StegoSystem,
    secrets,
    cfg: StageConfig,
    *,
    run_cfg: RunConfig,
    out_dir: str | Path,
    seed: int = 0,
    checkpoint_name: str = "stage1.ckpt",
) -> Checkpoint:
    """Pre-train the steganographic mapping without cover images."""
    if cfg.stage != 1:
        raise ValueError("train_stage1 requires a stage-1 config")
    texts = _secret_texts(secrets)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    system.max_len = default_max_len(system, texts)
    system.model.train()
    params = _stage_parameters(system, stage=1)
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    lo, hi = cfg.mask_ratio_range
    history: list[tuple[int, float, float, float]] = []
    with open(out_dir / "train_stage1.log", "w", encoding="utf-8") as log:
        log.write("step,l_txt,l_emb,lr\n")
        for step, batch in enumerate(_batches(texts, cfg.batch_size, cfg.steps, rng)):
            ratios = rng.uniform(lo, hi, size=len(batch))
            l_txt, l_emb = stage1_losses(system, batch, ratios, rng)
            loss = total_loss(1, l_txt, l_emb, cfg)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"stage 1 loss became non-finite at step {step} "
                    f"(l_txt={l_txt.item():.4g}, l_emb={l_emb.item():.4g})"
                )
            lr = cfg.learning_rate * _cosine_warmup(step, cfg.steps, cfg.warmup_steps)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append((step, l_txt.item(), l_emb.item(), lr))
            _log_line(log, step, l_txt.item(), l_emb.item(), lr)
    system.model.eval()
    ckpt = save_checkpoint(
        out_dir / checkpoint_name, system,
        run_cfg=run_cfg, step=cfg.steps, seed=seed, stage=1,
        eval_secrets=texts[:16],
    )
    ckpt.manifest["history_tail"] = history[-5:]
    return ckpt


def train_stage2(
    ckpt: Checkpoint | str | Path,
    covers,
    secrets,
    cfg: StageConfig,
    *,
    out_dir: str | Path,
    seed: int = 0,
    checkpoint_name: str = "stage2.ckpt",
    clamp: str | None = None,
) -> Checkpoint:
    """Fine-tune the token-to-patch projector through the stego-image path.

    ``covers`` is an array or list of (C, H, W) float images in [0, 1].
    Every non-trainable tensor is byte-identical before and after.
    """
    if cfg.stage != 2:
        raise ValueError("train_stage2 requires a stage-2 config")
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    system = ckpt.system if ckpt.system is not None else load_checkpoint(ckpt.path).system
    run_cfg = run_config_from_dict(_strip_config(ckpt.manifest["config"]))
    texts = _secret_texts(secrets)
    cover_arr = np.asarray(covers, dtype=np.float32)
    if cover_arr.ndim != 4 or cover_arr.shape[0] == 0:
        raise DatasetError(f"covers must be a nonempty (K, C, H, W) stack, got {cover_arr.shape}")
    cover_t = torch.tensor(cover_arr)
    clamp = clamp if clamp is not None else system.clamp
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    system.model.train()
    params = _stage_parameters(system, stage=2)
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    history: list[tuple[int, float, float, float]] = []
    with open(out_dir / "train_stage2.log", "w", encoding="utf-8") as log:
        log.write("step,l_txt,l_emb,lr\n")
        for step, batch in enumerate(_batches(texts, cfg.batch_size, cfg.steps, rng)):
            idx = rng.integers(0, cover_t.shape[0], size=len(batch))
            batch_covers = cover_t[idx.tolist()]
            l_txt = stage2_losses(system, batch, batch_covers, clamp)
            loss = total_loss(2, l_txt, None, cfg)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"stage 2 loss became non-finite at step {step} (l_txt={l_txt.item():.4g})"
                )
            lr = cfg.learning_rate * _cosine_warmup(step, cfg.steps, cfg.warmup_steps)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append((step, l_txt.item(), 0.0, lr))
            _log_line(log, step, l_txt.item(), 0.0, lr)
    system.model.eval()
    new_ckpt = save_checkpoint(
        out_dir / checkpoint_name, system,
        run_cfg=run_cfg, step=cfg.steps, seed=seed, stage=2,
        eval_secrets=texts[:16],
    )
    new_ckpt.manifest["history_tail"] = history[-5:]
    return new_ckpt


# ---------------------------------------------------------------------------
# numerical verification


def gradcheck(
    projector: ProjectorMLP,
    sample: torch.Tensor,
    epsilon: float,
    probe: str = "l1",
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 on a deep copy. ``probe`` selects the scalar reduction:
    "l1" is the mean-absolute pull used on patch grids, "quadratic" a smooth
    mean-square probe. With ``max_coords`` set, a random coordinate subset
    is checked instead of every parameter entry.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must be in [1e-6, 1e-3], got {epsilon}")
    if probe == "l1":
        reduce = lambda out: out.abs().mean()  # noqa: E731
    elif probe == "quadratic":
        reduce = lambda out: (out * out).mean()  # noqa: E731
    else:
        raise ValueError(f"unknown probe {probe!r}")
    proj = copy.deepcopy(projector).double()
    proj.eval()
    x = sample.detach().double()

    def forward() -> torch.Tensor:
        return reduce(proj(x))

    loss = forward()
    params = [p for p in proj.parameters()]
    grads = torch.autograd.grad(loss, params)
    max_rel = 0.0
    rng = rng or np.random.default_rng(0)
    for param, grad in zip(params, grads):
        flat = param.data.view(-1)
        gflat = grad.reshape(-1)
        n = flat.numel()
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False).tolist()
        else:
            coords = range(n)
        for c in coords:
            orig = float(flat[c])
            with torch.no_grad():
                flat[c] = orig + epsilon
                hi = forward().item()
                flat[c] = orig - epsilon
                lo = forward().item()
                flat[c] = orig
            numeric = (hi - lo) / (2 * epsilon)
            analytic = float(gflat[c])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            max_rel = max(max_rel, abs(analytic - numeric) / denom)
    return max_rel
