"""Text-side protocol: tokenizer, special tokens, message wrapping, prompts.

Four control tokens frame the secret and mark placeholder positions:

    <SECRET_START> ... <SECRET_END>   delimit the secret in token space
    <SECRET_EMB>                      placeholder whose hidden state becomes
                                      one secret-message embedding
    <STEGO>                           placeholder where a recovered image
                                      feature is injected at decode time

Everything here is pure and immutable after construction; parsing of a
generated sequence uses first-START / first-END slicing so repeated
delimiters from a greedy decoder are ignored.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

SECRET_START = "<SECRET_START>"
SECRET_END = "<SECRET_END>"
SECRET_EMB = "<SECRET_EMB>"
STEGO = "<STEGO>"

SPECIAL_SURFACES = (SECRET_START, SECRET_END, SECRET_EMB, STEGO)


class MessageError(ValueError):
    """Secret message violates the wrapping preconditions."""


class TemplateError(ValueError):
    """Prompt template file is malformed."""


class ParseFailure(Exception):
    """Generated sequence does not contain a well-formed wrapped message.

    ``kind`` is ``"no_start"`` or ``"no_end"``; ``best_effort`` carries
    whatever text could still be salvaged (everything after the start
    delimiter for ``no_end``, empty for ``no_start``) so metrics can be
    computed against it.
    """

    def __init__(self, kind: str, best_effort: str = ""):
        super().__init__(f"parse failure: {kind}")
        self.kind = kind
        self.best_effort = best_effort


@dataclass(frozen=True)
class SpecialTokenSet:
    secret_start: int
    secret_end: int
    secret_emb: int
    stego: int

    def __post_init__(self):
        ids = (self.secret_start, self.secret_end, self.secret_emb, self.stego)
        if len(set(ids)) != 4:
            raise ValueError(f"special token ids must be distinct, got {ids}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.secret_start, self.secret_end, self.secret_emb, self.stego)


class ByteTokenizer:
    """Deterministic byte-level tokenizer with a configurable base vocab.

    Ids 0..255 are raw bytes; ids 256..base_vocab_size-1 are reserved and
    never produced, so the base vocabulary has a stable configured size.
    Special tokens registered later extend the vocabulary past the base
    and tokenize atomically.
    """

    def __init__(self, base_vocab_size: int = 8000):
        if base_vocab_size < 256:
            raise ValueError("base_vocab_size must be at least 256")
        self.base_vocab_size = base_vocab_size
        self._added: dict[str, int] = {}  # surface -> id, insertion order

    @property
    def vocab_size(self) -> int:
        return self.base_vocab_size + len(self._added)

    def added_tokens(self) -> dict[str, int]:
        return dict(self._added)

    def add_token(self, surface: str) -> int:
        """Append one atomic token; returns the existing id if present."""
        if surface in self._added:
            return self._added[surface]
        new_id = self.base_vocab_size + len(self._added)
        self._added[surface] = new_id
        return new_id

    def tokenize(self, text: str) -> list[int]:
        """UTF-8 bytes, with registered surfaces emitted as single ids."""
        if not self._added:
            return [b for b in text.encode("utf-8")]
        ids: list[int] = []
        i = 0
        surfaces = sorted(self._added, key=len, reverse=True)
        while i < len(text):
            for s in surfaces:
                if text.startswith(s, i):
                    ids.append(self._added[s])
                    i += len(s)
                    break
            else:
                ids.extend(text[i].encode("utf-8"))
                i += 1
        return ids

    def detokenize(self, ids: Sequence[int], keep_special: bool = False) -> str:
        """Inverse of tokenize. Reserved ids are dropped; special ids are
        rendered as their surface form only when ``keep_special``."""
        by_id = {v: k for k, v in self._added.items()}
        out: list[str] = []
        buf = bytearray()
        for idx in ids:
            if 0 <= idx <= 255:
                buf.append(idx)
                continue
            if buf:
                out.append(buf.decode("utf-8", errors="replace"))
                buf = bytearray()
            if keep_special and idx in by_id:
                out.append(by_id[idx])
        if buf:
            out.append(buf.decode("utf-8", errors="replace"))
        return "".join(out)


def register_special_tokens(tokenizer: ByteTokenizer) -> SpecialTokenSet:
    """Extend the tokenizer vocabulary with the four control tokens.

    Idempotent: re-registering reuses the existing ids and warns. Given the
    same base tokenizer the returned ids are stable across processes.
    """
    existing = tokenizer.added_tokens()
    already = [s for s in SPECIAL_SURFACES if s in existing]
    if already:
        warnings.warn(
            f"special tokens already registered ({', '.join(already)}); reusing ids",
            stacklevel=2,
        )
    ids = [tokenizer.add_token(s) for s in SPECIAL_SURFACES]
    return SpecialTokenSet(*ids)


@dataclass(frozen=True)
class WrappedMessage:
    """Secret message framed by the start/end delimiters, in token space."""

    token_ids: tuple[int, ...]
    source_text: str


def wrap_message(m: str, tokenizer: ByteTokenizer, specials: SpecialTokenSet) -> WrappedMessage:
    """Frame ``m`` as [START] + tokenize(m) + [END].

    Rejects empty messages and messages containing any control-token
    surface form, which would allow delimiter injection.
    """
    if not m:
        raise MessageError("secret message must be nonempty")
    for s in SPECIAL_SURFACES:
        if s in m:
            raise MessageError(f"secret message must not contain the control token {s!r}")
    body = tuple(tokenizer.tokenize(m))
    return WrappedMessage(
        token_ids=(specials.secret_start,) + body + (specials.secret_end,),
        source_text=m,
    )


@dataclass(frozen=True)
class PromptBundle:
    """Tokenized embedding and decoding prompts.

    ``decode_stego_positions`` is the contiguous run of <STEGO> placeholder
    indices inside ``decode_prompt_ids`` where image features are injected;
    ``secret_emb_id`` is the placeholder id appended on the embedding pass.
    """

    embed_prompt_ids: tuple[int, ...]
    decode_prompt_ids: tuple[int, ...]
    decode_stego_positions: tuple[int, ...]
    secret_emb_id: int

    def __post_init__(self):
        pos = self.decode_stego_positions
        if not pos:
            raise TemplateError("decode prompt must contain a <STEGO> placeholder run")
        if list(pos) != list(range(pos[0], pos[0] + len(pos))):
            raise TemplateError("<STEGO> placeholder positions must be contiguous")


@dataclass(frozen=True)
class PromptTemplates:
    """Raw template texts with ``{secret}`` / ``{sme_run}`` markers.

    The embed template must end with ``{secret}{sme_run}`` so the input is
    exactly prompt + wrapped message + placeholder run. The decode template
    contains ``{sme_run}`` once; there it expands to a <STEGO> run.
    """

    embed_text: str
    decode_text: str

    def __post_init__(self):
        if not self.embed_text.endswith("{secret}{sme_run}"):
            raise TemplateError("embed template must end with '{secret}{sme_run}'")
        if self.embed_text.count("{secret}") != 1 or self.embed_text.count("{sme_run}") != 1:
            raise TemplateError("embed template must contain '{secret}' and '{sme_run}' exactly once")
        if self.decode_text.count("{sme_run}") != 1:
            raise TemplateError("decode template must contain '{sme_run}' exactly once")
        if "{secret}" in self.decode_text:
            raise TemplateError("decode template must not contain '{secret}'")

    @property
    def embed_prefix(self) -> str:
        return self.embed_text[: -len("{secret}{sme_run}")]

    def build_bundle(
        self, tokenizer: ByteTokenizer, specials: SpecialTokenSet, n_positions: int
    ) -> PromptBundle:
        """Tokenize the templates with an ``n_positions``-long <STEGO> run."""
        if n_positions < 1:
            raise ValueError("n_positions must be >= 1")
        embed_ids = tuple(tokenizer.tokenize(self.embed_prefix))
        pre, post = self.decode_text.split("{sme_run}")
        pre_ids = tuple(tokenizer.tokenize(pre))
        post_ids = tuple(tokenizer.tokenize(post))
        run = tuple([specials.stego] * n_positions)
        decode_ids = pre_ids + run + post_ids
        forbidden = {specials.secret_start, specials.secret_end}
        for name, ids in (("embed", embed_ids), ("decode", decode_ids)):
            if forbidden & set(ids):
                raise TemplateError(f"{name} prompt must not contain secret delimiters")
        if decode_ids.count(specials.stego) != n_positions:
            raise TemplateError(
                "decode template must not contain stray <STEGO> literals outside the run"
            )
        positions = tuple(range(len(pre_ids), len(pre_ids) + n_positions))
        return PromptBundle(
            embed_prompt_ids=embed_ids,
            decode_prompt_ids=decode_ids,
            decode_stego_positions=positions,
            secret_emb_id=specials.secret_emb,
        )


def load_templates(template_dir: str | Path | None = None) -> PromptTemplates:
    """Load templates from a directory (embed_template.txt, decode_template.txt)
    or fall back to the packaged defaults."""
    if template_dir is None:
        pkg = resources.files("stegolm") / "assets"
        embed = (pkg / "embed_template.txt").read_text(encoding="utf-8")
        decode = (pkg / "decode_template.txt").read_text(encoding="utf-8")
    else:
        root = Path(template_dir)
        embed = (root / "embed_template.txt").read_text(encoding="utf-8")
        decode = (root / "decode_template.txt").read_text(encoding="utf-8")
    return PromptTemplates(embed_text=embed, decode_text=decode)


def build_embed_input(
    w: WrappedMessage, bundle: PromptBundle, n_sme: int
) -> tuple[list[int], list[int]]:
    """Assemble the embedding-pass input: prompt + wrapped message + SME run.

    Returns (token_ids, sme_positions); the placeholder run is appended
    teacher-forced so the pass is deterministic and differentiable.
    """
    if n_sme < 1:
        raise ValueError(f"n_sme must be >= 1, got {n_sme}")
    ids = list(bundle.embed_prompt_ids) + list(w.token_ids) + [bundle.secret_emb_id] * n_sme
    start = len(bundle.embed_prompt_ids) + len(w.token_ids)
    positions = list(range(start, start + n_sme))
    return ids, positions


def extract_recovered(
    generated_ids: Sequence[int], tokenizer: ByteTokenizer, specials: SpecialTokenSet
) -> str:
    """Slice out the text between the first START and the first END after it.

    Raises ParseFailure("no_start") when no start delimiter exists and
    ParseFailure("no_end") when the end delimiter is missing; the latter
    attaches everything after the start as best-effort text.
    """
    ids = list(generated_ids)
    try:
        start = ids.index(specials.secret_start)
    except ValueError:
        raise ParseFailure("no_start") from None
    try:
        end = ids.index(specials.secret_end, start + 1)
    except ValueError:
        best = tokenizer.detokenize(ids[start + 1 :]).strip()
        raise ParseFailure("no_end", best_effort=best) from None
    return tokenizer.detokenize(ids[start + 1 : end]).strip()
