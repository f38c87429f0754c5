"""
Prefix Tree
Character trie over the bias phrases. Each decoding hypothesis carries a cursor of
active nodes; the cursor decides which bias entries may be attended next.
Also provides the leftmost-longest phrase matcher used by targets, tags and metrics.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from bias_encoder import BiasMemory, BiasPhrase, Granularity
from errors import ConfigError, LoadError

logger = logging.getLogger(__name__)

ROOT = 0


@dataclass
class TrieNode:
    symbol: Optional[int]
    label: str
    depth: int
    children: Dict[int, int] = field(default_factory=dict)
    annotations: List[Tuple[int, int]] = field(default_factory=list)
    terminal: Optional[int] = None  # index of the phrase ending here


@dataclass(frozen=True)
class TrieCursor:
    """Active non-root nodes for one hypothesis; the root is implicitly active"""
    active: FrozenSet[int] = frozenset()


@dataclass(frozen=True)
class Occurrence:
    start: int
    end: int
    phrase_index: int

    def __len__(self) -> int:
        return self.end - self.start


class PrefixTree:
    """Immutable after build; safe to share across threads"""

    def __init__(self, phrases: Sequence[BiasPhrase], skip_symbols: Iterable[int] = ()):
        self.phrases: Tuple[BiasPhrase, ...] = tuple(phrases)
        self.skip_symbols: FrozenSet[int] = frozenset(int(s) for s in skip_symbols)
        self.nodes: List[TrieNode] = [TrieNode(symbol=None, label="", depth=0)]
        # node id for every (phrase, position)
        self.node_of: Dict[Tuple[int, int], int] = {}

        seen = set()
        for p, phrase in enumerate(self.phrases):
            if phrase.tokens in seen:
                raise LoadError(f"Duplicate bias phrase {phrase.surface!r}")
            seen.add(phrase.tokens)
            node = ROOT
            for j, symbol in enumerate(phrase.tokens):
                child = self.nodes[node].children.get(symbol)
                if child is None:
                    child = len(self.nodes)
                    self.nodes.append(TrieNode(symbol=symbol, label=phrase.surface[j],
                                               depth=self.nodes[node].depth + 1))
                    self.nodes[node].children[symbol] = child
                node = child
                self.nodes[node].annotations.append((p, j))
                self.node_of[(p, j)] = node
            self.nodes[node].terminal = p

        logger.debug(f"Built prefix tree: {len(self.phrases)} phrases, {self.num_nodes} nodes")

    @classmethod
    def build(cls, phrases: Sequence[BiasPhrase], skip_symbols: Iterable[int] = ()) -> "PrefixTree":
        return cls(phrases, skip_symbols)

    @property
    def num_nodes(self) -> int:
        """Non-root node count"""
        return len(self.nodes) - 1

    def child(self, node: int, symbol: int) -> Optional[int]:
        return self.nodes[node].children.get(symbol)

    def find_node(self, tokens: Sequence[int]) -> Optional[int]:
        node = ROOT
        for symbol in tokens:
            node = self.child(node, int(symbol))
            if node is None:
                return None
        return node

    def is_leaf(self, node: int) -> bool:
        return not self.nodes[node].children

    def initial_cursor(self) -> TrieCursor:
        return TrieCursor()

    def advance(self, cursor: TrieCursor, emitted: int) -> TrieCursor:
        emitted = int(emitted)
        if emitted in self.skip_symbols:
            return cursor
        active: Set[int] = set()
        for node in (ROOT, *cursor.active):
            nxt = self.child(node, emitted)
            if nxt is not None and not self.is_leaf(nxt):
                active.add(nxt)
        return TrieCursor(frozenset(active))

    def cursor_for(self, history: Sequence[int]) -> TrieCursor:
        cursor = self.initial_cursor()
        for symbol in history:
            cursor = self.advance(cursor, symbol)
        return cursor

    def next_nodes(self, cursor: TrieCursor) -> Set[int]:
        """Nodes that are a legal next step: children of the root or of any active node"""
        out: Set[int] = set()
        for node in (ROOT, *cursor.active):
            out.update(self.nodes[node].children.values())
        return out

    def next_labels(self, cursor: TrieCursor, include_fresh: bool = False) -> Set[str]:
        """Characters that continue an active match (optionally also fresh phrase starts)"""
        sources = list(cursor.active) + ([ROOT] if include_fresh else [])
        return {self.nodes[c].label for n in sources for c in self.nodes[n].children.values()}

    def mask(self, cursor: TrieCursor, memory: BiasMemory) -> np.ndarray:
        """Boolean flag per memory entry; entry 0 (no-bias) is always allowed"""
        if tuple(p.tokens for p in memory.phrases) != tuple(p.tokens for p in self.phrases):
            raise ConfigError("Prefix tree and bias memory were built from different phrase lists")
        legal = self.next_nodes(cursor)
        allowed = np.zeros(len(memory), dtype=bool)
        allowed[memory.no_bias_index] = True
        for i, owner in enumerate(memory.owners):
            if owner is None:
                continue
            p, j = owner
            if memory.granularity == Granularity.FINE:
                allowed[i] = self.node_of[(p, j)] in legal
            else:
                allowed[i] = any(self.node_of[(p, k)] in legal for k in range(len(self.phrases[p])))
        return allowed

    def find_occurrences(self, tokens: Sequence[int]) -> List[Occurrence]:
        """Leftmost-longest non-overlapping phrase occurrences"""
        tokens = [int(t) for t in tokens]
        out: List[Occurrence] = []
        i = 0
        while i < len(tokens):
            node = ROOT
            best: Optional[Tuple[int, int]] = None
            k = i
            while k < len(tokens):
                node = self.child(node, tokens[k])
                if node is None:
                    break
                k += 1
                if self.nodes[node].terminal is not None:
                    best = (k, self.nodes[node].terminal)
            if best is None:
                i += 1
                continue
            out.append(Occurrence(i, best[0], best[1]))
            i = best[0]
        return out

    def dump(self) -> str:
        """One node per line, two spaces per depth level, ` *` marks a phrase end"""
        lines: List[str] = []

        def visit(node: int) -> None:
            for child in self.nodes[node].children.values():
                n = self.nodes[child]
                lines.append("  " * (n.depth - 1) + n.label + (" *" if n.terminal is not None else ""))
                visit(child)

        visit(ROOT)
        return "\n".join(lines) + ("\n" if lines else "")


def build(phrases: Sequence[BiasPhrase], skip_symbols: Iterable[int] = ()) -> PrefixTree:
    return PrefixTree.build(phrases, skip_symbols)


def advance(cursor: TrieCursor, emitted: int, tree: PrefixTree) -> TrieCursor:
    return tree.advance(cursor, emitted)


def mask(cursor: TrieCursor, tree: PrefixTree, memory: BiasMemory) -> np.ndarray:
    return tree.mask(cursor, memory)
