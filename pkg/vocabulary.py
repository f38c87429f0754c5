"""
Character vocabulary shared by the decoder, the bias encoder and the data files
"""

from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

from errors import ParseError, VocabularyError

SOS = "<sos>"
EOS = "<eos>"
BIAS_TAG = "</bias>"
SPECIAL_TOKENS = (SOS, EOS, BIAS_TAG)


class Vocabulary:
    """Ordered token inventory; the reserved tokens always occupy ids 0-2"""

    def __init__(self, tokens: Iterable[str]):
        ordered = list(SPECIAL_TOKENS)
        for token in tokens:
            if token in SPECIAL_TOKENS:
                continue
            if not token or token != token.strip():
                raise VocabularyError(f"Invalid token {token!r}")
            ordered.append(token)
        self.tokens: List[str] = ordered
        self._index: Dict[str, int] = {}
        for i, token in enumerate(ordered):
            if token in self._index:
                raise VocabularyError(f"Duplicate token {token!r}")
            self._index[token] = i

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def sos_id(self) -> int:
        return self._index[SOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def bias_tag_id(self) -> int:
        return self._index[BIAS_TAG]

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise VocabularyError(f"Token {token!r} is not in the vocabulary")

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        out = []
        for i in ids:
            if not 0 <= int(i) < len(self.tokens):
                raise VocabularyError(f"Token id {i} outside vocabulary of size {len(self.tokens)}")
            out.append(self.tokens[int(i)])
        return out

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for token in self.tokens:
                f.write(token + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        tokens = []
        with open(path, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                token = line.rstrip("\n")
                if not token:
                    raise ParseError("blank vocabulary line", line_number)
                tokens.append(token)
        return cls(tokens)
