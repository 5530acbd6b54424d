"""Byte-level tokenizer shared by every model in the toy family.

Token-id equality between draft and target proposals is only meaningful
when both models read and write the same vocabulary, so the family has
exactly one tokenizer: ids 0..255 are raw bytes, 256 is the
beginning-of-sequence marker, 257 marks a visual position whose
embedding comes from the projector instead of the token table.
"""
from __future__ import annotations

from typing import List, Optional

BOS = 256
VIS = 257
VOCAB_IN = 258
VOCAB_OUT = 256


def encode(text: str) -> List[int]:
    return list(text.encode("utf-8"))


def decode(ids) -> str:
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


def text_of(token_id: int) -> Optional[str]:
    # printable ASCII only; multibyte fragments and specials stay null
    if 32 <= token_id < 127:
        return chr(token_id)
    return None
