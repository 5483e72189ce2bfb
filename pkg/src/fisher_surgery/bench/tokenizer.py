import hashlib
import re
from typing import Dict, List, Optional

from ..models.data_classes import PAD_ID, SEP_ID, UNK_ID
from ..utils.errors import ConfigurationError

FIRST_WORD_ID = 3
_ALNUM = re.compile(r"[0-9a-z]")


class HashingTokenizer:
    """Lowercased whitespace tokens hashed into a fixed vocabulary; no training needed."""

    def __init__(self, vocab_size: int = 512, max_seq_len: int = 32):
        if vocab_size <= FIRST_WORD_ID:
            raise ConfigurationError(
                f"vocab_size must exceed {FIRST_WORD_ID} reserved ids", key="vocab_size"
            )
        if max_seq_len < 3:
            raise ConfigurationError("max_seq_len must be at least 3", key="max_seq_len")
        self.vocab_size = vocab_size
        self.max_seq_len = max_seq_len

    def token_id(self, token: str) -> int:
        if not _ALNUM.search(token):
            return UNK_ID
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return FIRST_WORD_ID + int.from_bytes(digest, "big") % (self.vocab_size - FIRST_WORD_ID)

    def _ids(self, text: str) -> List[int]:
        return [self.token_id(tok) for tok in text.lower().split()]

    def encode(self, text: str, text_b: Optional[str] = None) -> List[int]:
        a = self._ids(text) or [UNK_ID]
        if text_b is None:
            return a[: self.max_seq_len]

        b = self._ids(text_b) or [UNK_ID]
        budget = self.max_seq_len - 1
        # longest-first truncation keeps the separator and both sides
        while len(a) + len(b) > budget:
            if len(a) >= len(b):
                a.pop()
            else:
                b.pop()
        return a + [SEP_ID] + b

    def describe(self) -> Dict[str, object]:
        return {
            "kind": "whitespace-blake2b",
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "reserved": {"pad": PAD_ID, "unk": UNK_ID, "sep": SEP_ID},
        }
