"""End-to-end embed/decode pipeline around a language-model backbone.

Embedding: the wrapped secret plus a run of placeholder tokens goes through
the model; the last-layer states at the placeholder positions are the
secret-message embeddings (one per image patch). Those project to patch
space, reshape to a residual image, and add onto the cover.

Decoding: the stego image is patchified, projected back to embedding
width, and injected at the decode prompt's <STEGO> placeholder positions
as input embeddings; greedy generation then reproduces the wrapped secret,
which is parsed back to text.

Both directions are deterministic given fixed weights; a parse failure is
reported in the returned status (with best-effort text) rather than raised,
so callers can still score the output.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import torch

from . import imaging, textproto
from .config import Geometry
from .imaging import insert, patchify, reshape_to_image
from .model import LanguageModelHandle
from .projectors import ProjectorMLP
from .textproto import (
    ByteTokenizer,
    ParseFailure,
    PromptBundle,
    SpecialTokenSet,
    build_embed_input,
    wrap_message,
)


class ParseStatus(enum.Enum):
    OK = "ok"
    NO_START = "no_start"
    NO_END = "no_end"

    @property
    def ok(self) -> bool:
        return self is ParseStatus.OK


def extract_smes(
    model: LanguageModelHandle, embed_input: list[int], sme_positions: list[int]
) -> torch.Tensor:
    """Last-layer hidden states at the placeholder positions, in order.

    Deterministic: the model is forced into eval mode (adapter dropout off)
    for the duration of the pass.
    """
    n = len(embed_input)
    for pos in sme_positions:
        if not 0 <= pos < n:
            raise IndexError(f"SME position {pos} out of range for input of length {n}")
    ids = torch.tensor(embed_input, dtype=torch.long)
    was_training = getattr(model, "training", False)
    if was_training:
        model.eval()
    try:
        hidden = model.forward_hidden_states(model.input_embedding_lookup(ids))
    finally:
        if was_training:
            model.train()
    return hidden[list(sme_positions)]


def apply_mask(e: torch.Tensor, ratio: float, rng: np.random.Generator) -> torch.Tensor:
    """Zero out exactly round(ratio * N) rows, chosen uniformly.

    Implemented as a 0/1 row mask multiply so gradients keep flowing
    through the surviving rows.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    n = e.shape[0]
    k = round(ratio * n)
    mask = torch.ones(n, 1, dtype=e.dtype, device=e.device)
    if k > 0:
        rows = rng.choice(n, size=k, replace=False)
        mask[rows.tolist()] = 0.0
    return e * mask


@dataclass
class StegoSystem:
    """A backbone plus its projectors, tokenizer, prompts and geometry.

    Single-writer semantics: training needs exclusive access; concurrent
    inference is allowed only when the backbone declares itself read-safe.
    """

    model: LanguageModelHandle
    t2p: ProjectorMLP
    p2t: ProjectorMLP
    tokenizer: ByteTokenizer
    specials: SpecialTokenSet
    bundle: PromptBundle
    geometry: Geometry
    clamp: str = "hard"
    max_len: int = 64
    templates: textproto.PromptTemplates | None = field(default=None, repr=False)

    def embed(self, m: str, cover) -> tuple[np.ndarray, np.ndarray]:
        return embed_message(
            self.model, self.t2p, self.bundle, m, cover,
            tokenizer=self.tokenizer, specials=self.specials,
            geometry=self.geometry, clamp=self.clamp,
        )

    def decode(self, stego, max_len: int | None = None) -> tuple[str, ParseStatus]:
        return decode_message(
            self.model, self.p2t, self.bundle, stego,
            tokenizer=self.tokenizer, specials=self.specials,
            geometry=self.geometry, max_len=max_len or self.max_len,
        )

    def roundtrip_without_cover(self, m: str, max_len: int | None = None) -> tuple[str, ParseStatus]:
        """Decode straight from the projected features, skipping the image.

        This is the Stage-1 path (mask off): secret -> SMEs -> patch grid ->
        features -> greedy decode. Useful for checking what the image leg
        costs on top of the learned mapping.
        """
        with torch.no_grad():
            e = compute_smes(
                self.model, self.bundle, self.tokenizer, self.specials, m,
                self.geometry.n_patches,
            )
            features = self.p2t(self.t2p(e))
            prompt_ids = torch.tensor(self.bundle.decode_prompt_ids, dtype=torch.long)
            embeds = self.model.input_embedding_lookup(prompt_ids).clone()
            embeds[list(self.bundle.decode_stego_positions)] = features.to(embeds.dtype)
            generated = self.model.greedy_generate(
                embeds, max_len=max_len or self.max_len, stop_id=self.specials.secret_end
            )
        try:
            text = textproto.extract_recovered(generated, self.tokenizer, self.specials)
            return text, ParseStatus.OK
        except ParseFailure as pf:
            return pf.best_effort, ParseStatus(pf.kind)


def compute_smes(
    model: LanguageModelHandle,
    bundle: PromptBundle,
    tokenizer: ByteTokenizer,
    specials: SpecialTokenSet,
    m: str,
    n_sme: int,
) -> torch.Tensor:
    """Wrap, assemble the embed input, and extract the (n_sme, d_emb) SMEs."""
    wrapped = wrap_message(m, tokenizer, specials)
    ids, positions = build_embed_input(wrapped, bundle, n_sme)
    return extract_smes(model, ids, positions)


def embed_message(
    model: LanguageModelHandle,
    t2p_proj: ProjectorMLP,
    bundle: PromptBundle,
    m: str,
    cover,
    *,
    tokenizer: ByteTokenizer,
    specials: SpecialTokenSet,
    geometry: Geometry,
    clamp: str = "hard",
) -> tuple[np.ndarray, np.ndarray]:
    """Hide ``m`` in ``cover``; returns (stego, residual) as float arrays."""
    cover_arr = np.asarray(cover, dtype=np.float64)
    expected = (geometry.channels, geometry.height, geometry.width)
    if cover_arr.shape != expected:
        raise imaging.GeometryError(
            f"cover shape {cover_arr.shape} does not match configured geometry {expected}"
        )
    with torch.no_grad():
        e = compute_smes(model, bundle, tokenizer, specials, m, geometry.n_patches)
        p = t2p_proj(e)
        residual_t = reshape_to_image(p, geometry)
    residual = residual_t.detach().cpu().numpy().astype(np.float64)
    stego = insert(cover_arr, residual, clamp=clamp)
    return stego, residual


def decode_message(
    model: LanguageModelHandle,
    p2t_proj: ProjectorMLP,
    bundle: PromptBundle,
    stego,
    *,
    tokenizer: ByteTokenizer,
    specials: SpecialTokenSet,
    geometry: Geometry,
    max_len: int = 64,
) -> tuple[str, ParseStatus]:
    """Recover the hidden message from a stego image.

    Parse failures are reported in the status alongside best-effort text;
    they are never raised, so metric computation always has a hypothesis.
    """
    expected = (geometry.channels, geometry.height, geometry.width)
    if tuple(stego.shape) != expected:
        raise imaging.GeometryError(
            f"stego shape {tuple(stego.shape)} does not match configured geometry {expected}"
        )
    if isinstance(stego, torch.Tensor):
        stego_t = stego.detach().to(torch.float32)
    else:
        stego_t = torch.tensor(np.asarray(stego), dtype=torch.float32)
    with torch.no_grad():
        p_hat = patchify(stego_t, geometry.patch)
        e_hat = p2t_proj(p_hat)
        prompt_ids = torch.tensor(bundle.decode_prompt_ids, dtype=torch.long)
        embeds = model.input_embedding_lookup(prompt_ids).clone()
        pos = list(bundle.decode_stego_positions)
        embeds[pos] = e_hat.to(embeds.dtype)
        generated = model.greedy_generate(embeds, max_len=max_len, stop_id=specials.secret_end)
    try:
        text = textproto.extract_recovered(generated, tokenizer, specials)
        return text, ParseStatus.OK
    except ParseFailure as pf:
        return pf.best_effort, ParseStatus(pf.kind)
