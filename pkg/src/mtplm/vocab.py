"""Fixed 256-entry token table for residue-level protein sequences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD, EOS, UNK, NLU, S2S = 0, 1, 2, 3, 4
RESIDUES = "ACDEFGHIKLMNPQRSTVWYBXZUO"
RESIDUE_OFFSET = 5
NUM_SENTINELS = 225
SENTINEL_OFFSET = RESIDUE_OFFSET + len(RESIDUES)  # 30
RESERVED = SENTINEL_OFFSET + NUM_SENTINELS  # 255
VOCAB_SIZE = 256

TASK_TOKENS = {"NLU": NLU, "S2S": S2S}


class VocabError(ValueError):
    pass


class UnknownResidue(VocabError):
    def __init__(self, position: int, character: str):
        super().__init__(f"unknown residue {character!r} at position {position}")
        self.position = position
        self.character = character


class InvalidId(VocabError):
    def __init__(self, token_id: int):
        super().__init__(f"token id {token_id} outside [0, {VOCAB_SIZE})")
        self.token_id = token_id


class OutOfRange(VocabError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    entries: tuple[str, ...]
    index: dict[str, int] = field(repr=False, compare=False)

    num_sentinels: int = NUM_SENTINELS
    num_special: int = 3
    num_task_tokens: int = 2
    num_residues: int = len(RESIDUES)

    def __len__(self) -> int:
        return len(self.entries)

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.entries):
            raise InvalidId(token_id)
        return self.entries[token_id]

    def id(self, token: str) -> int:
        return self.index[token]

    def dump(self) -> str:
        """Render the table as ``id<TAB>token`` lines."""
        return "".join(f"{i}\t{tok}\n" for i, tok in enumerate(self.entries))


def build_vocabulary() -> Vocabulary:
    entries = ["<pad>", "</s>", "<unk>", "[NLU]", "[S2S]"]
    entries += list(RESIDUES)
    entries += [f"<extra_id_{k}>" for k in range(NUM_SENTINELS)]
    entries.append("<reserved_255>")
    assert len(entries) == VOCAB_SIZE
    return Vocabulary(tuple(entries), {tok: i for i, tok in enumerate(entries)})


VOCAB = build_vocabulary()

_RESIDUE_IDS = {ch: RESIDUE_OFFSET + i for i, ch in enumerate(RESIDUES)}


def residue_id(ch: str) -> int:
    return _RESIDUE_IDS[ch]


def sentinel(k: int) -> int:
    if not 0 <= k < NUM_SENTINELS:
        raise OutOfRange(f"sentinel index {k} outside [0, {NUM_SENTINELS})")
    return SENTINEL_OFFSET + k


def is_sentinel(token_id: int) -> bool:
    return SENTINEL_OFFSET <= token_id < SENTINEL_OFFSET + NUM_SENTINELS


def is_residue(token_id: int) -> bool:
    return RESIDUE_OFFSET <= token_id < SENTINEL_OFFSET


def sentinel_index(token_id: int) -> int:
    return token_id - SENTINEL_OFFSET


def _prefix_id(prefix: str | int | None) -> int | None:
    if prefix is None:
        return None
    if isinstance(prefix, int):
        if prefix not in (NLU, S2S):
            raise VocabError(f"not a task token id: {prefix}")
        return prefix
    key = prefix.strip("[]").upper()
    if key not in TASK_TOKENS:
        raise VocabError(f"unknown task prefix {prefix!r}; expected NLU or S2S")
    return TASK_TOKENS[key]


def residues_to_ids(sequence: str, *, substitute_unknown: bool = False) -> list[int]:
    out = []
    for pos, ch in enumerate(sequence.upper()):
        tid = _RESIDUE_IDS.get(ch)
        if tid is None:
            if not substitute_unknown:
                raise UnknownResidue(pos, sequence[pos])
            tid = UNK
        out.append(tid)
    return out


def encode(
    sequence: str,
    prefix: str | int | None = None,
    *,
    substitute_unknown: bool = False,
) -> list[int]:
    """Tokenize ``sequence`` as ``[prefix] + residues + [eos]``.

    Lowercase letters are accepted. Characters outside the residue alphabet
    raise :class:`UnknownResidue` unless ``substitute_unknown`` maps them to
    ``<unk>``.
    """
    ids = residues_to_ids(sequence, substitute_unknown=substitute_unknown)
    pid = _prefix_id(prefix)
    head = [] if pid is None else [pid]
    return head + ids + [EOS]


def decode(ids: Iterable[int]) -> str:
    parts = []
    for tid in ids:
        tid = int(tid)
        if not 0 <= tid < VOCAB_SIZE:
            raise InvalidId(tid)
        parts.append(VOCAB.entries[tid])
    return "".join(parts)


def decode_residues(ids: Sequence[int]) -> str:
    """Residue letters only; control tokens and sentinels are dropped."""
    return "".join(VOCAB.entries[int(t)] for t in ids if is_residue(int(t)))
