#!/usr/bin/env python3
"""
Test script to verify prefix-tree construction, cursor advancing and entry gating
"""

import numpy as np
import pytest

import prefix_tree
from bias_encoder import BiasEncoder, BiasMemory, EncoderVariant, Granularity, phrases_from_surfaces
from errors import ConfigError, LoadError
from numerics import ParamStore, make_rng
from prefix_tree import PrefixTree
from vocabulary import Vocabulary

VOCAB = Vocabulary(list("张三王二小五六李ABCD"))
FIGURE_PHRASES = ["张三", "王二", "王小五", "王小六"]


def _phrases(surfaces):
    return phrases_from_surfaces(list(surfaces), VOCAB)


def _ids(text):
    return VOCAB.encode(list(text))


def _memory(phrases, granularity=Granularity.FINE):
    params = ParamStore(make_rng(0))
    encoder = BiasEncoder(EncoderVariant(embed_dim=2, hidden_dim=2), len(VOCAB))
    encoder.register(params)
    return encoder.encode(params, phrases, granularity)


def _allowed_labels(tree, history, memory):
    allowed = tree.mask(tree.cursor_for(_ids(history)), memory)
    labels = memory.labels()
    return {labels[i] for i in np.flatnonzero(allowed) if i != 0}


def test_figure_tree_shape():
    tree = prefix_tree.build(_phrases(FIGURE_PHRASES))
    # one node per distinct prefix: 张 张三 王 王二 王小 王小五 王小六
    assert tree.num_nodes == 7
    wang = tree.find_node(_ids("王"))
    assert {tree.nodes[c].label for c in tree.nodes[wang].children.values()} == {"二", "小"}
    assert PrefixTree(_phrases(["A"])).num_nodes == 1


def test_node_count_matches_distinct_prefixes():
    rng = make_rng(3)
    for _ in range(30):
        surfaces = sorted({"".join(rng.choice(list("ABCD"), size=rng.integers(1, 6)))
                           for _ in range(rng.integers(1, 8))})
        tree = PrefixTree(_phrases(surfaces))
        prefixes = {s[:k] for s in surfaces for k in range(1, len(s) + 1)}
        assert tree.num_nodes == len(prefixes)
        annotations = [a for node in tree.nodes for a in node.annotations]
        assert sorted(annotations) == sorted((p, j) for p, s in enumerate(surfaces) for j in range(len(s)))


def test_duplicate_phrase_rejected():
    phrase = _phrases(["AB"])[0]
    with pytest.raises(LoadError):
        PrefixTree([phrase, phrase])


def test_history_wang_xiao_reaches_wu_and_liu():
    tree = PrefixTree(_phrases(FIGURE_PHRASES))
    cursor = prefix_tree.advance(tree.advance(tree.initial_cursor(), VOCAB.id_of("王")), VOCAB.id_of("小"), tree)
    assert cursor.active == frozenset({tree.find_node(_ids("王小"))})
    assert tree.next_labels(cursor) == {"五", "六"}


def test_unmatched_and_completed_histories():
    tree = PrefixTree(_phrases(FIGURE_PHRASES))
    assert tree.cursor_for(_ids("李")).active == frozenset()
    assert tree.cursor_for(_ids("张")).active == frozenset({tree.find_node(_ids("张"))})
    assert tree.cursor_for(_ids("张三")).active == frozenset()


def test_skip_symbols_do_not_advance():
    tree = PrefixTree(_phrases(FIGURE_PHRASES), skip_symbols=[VOCAB.bias_tag_id, VOCAB.eos_id])
    cursor = tree.cursor_for(_ids("王"))
    assert tree.advance(cursor, VOCAB.bias_tag_id) == cursor
    assert tree.cursor_for(_ids("王") + [VOCAB.bias_tag_id] + _ids("小")) == tree.cursor_for(_ids("王小"))


def test_fine_mask_on_figure_tree():
    phrases = _phrases(FIGURE_PHRASES)
    tree = PrefixTree(phrases)
    memory = _memory(phrases)
    assert _allowed_labels(tree, "", memory) == {"张三[0]", "王二[0]", "王小五[0]", "王小六[0]"}
    assert _allowed_labels(tree, "王小", memory) == {"张三[0]", "王二[0]", "王小五[0]", "王小六[0]",
                                                  "王小五[2]", "王小六[2]"}
    assert tree.mask(tree.initial_cursor(), memory)[0]


def test_unmatched_history_allows_only_fresh_starts():
    phrases = _phrases(["AB"])
    tree = PrefixTree(phrases)
    memory = _memory(phrases)
    # the only continuation of "A" is "B"; a fresh start may still be "A"
    assert list(tree.mask(tree.cursor_for(_ids("C")), memory)) == [True, True, False]


def test_mask_rejects_other_phrase_list():
    tree = PrefixTree(_phrases(FIGURE_PHRASES))
    with pytest.raises(ConfigError):
        prefix_tree.mask(tree.initial_cursor(), tree, _memory(_phrases(["AB"])))


def test_mask_matches_brute_force_suffix_rule():
    rng = make_rng(11)
    alphabet = list("ABCD")
    for _ in range(40):
        surfaces = sorted({"".join(rng.choice(alphabet, size=rng.integers(1, 5)))
                           for _ in range(rng.integers(1, 6))})
        phrases = _phrases(surfaces)
        tree = PrefixTree(phrases)
        fine = _memory(phrases, Granularity.FINE)
        coarse = _memory(phrases, Granularity.COARSE)
        history = "".join(rng.choice(alphabet, size=rng.integers(0, 8)))
        cursor = tree.cursor_for(_ids(history))
        allowed = tree.mask(cursor, fine)
        for i, owner in enumerate(fine.owners[1:], start=1):
            p, j = owner
            assert allowed[i] == (j == 0 or history.endswith(surfaces[p][:j])), (surfaces, history, owner)
        # j = 0 is always legal, so every phrase stays open in coarse mode
        assert tree.mask(cursor, coarse).all()


def _structural_memory(phrases):
    owners = [None] + [(p, j) for p, phrase in enumerate(phrases) for j in range(len(phrase))]
    return BiasMemory(entries=np.zeros((len(owners), 1)), owners=owners, granularity=Granularity.FINE,
                      phrases=tuple(phrases))


def test_mask_suffix_rule_on_many_lists():
    rng = make_rng(13)
    alphabet = list("ABCD")
    for _ in range(1000):
        surfaces = sorted({"".join(rng.choice(alphabet, size=rng.integers(1, 17)))
                           for _ in range(rng.integers(1, 11))})
        phrases = _phrases(surfaces)
        tree = PrefixTree(phrases)
        memory = _structural_memory(phrases)
        history = "".join(rng.choice(alphabet, size=rng.integers(0, 21)))
        allowed = tree.mask(tree.cursor_for(_ids(history)), memory)
        expected = [True] + [j == 0 or history.endswith(surfaces[p][:j]) for p, j in memory.owners[1:]]
        assert allowed.tolist() == expected, (surfaces, history)


def test_cursor_depends_only_on_history():
    tree = PrefixTree(_phrases(FIGURE_PHRASES))
    history = _ids("王王小张")
    assert tree.cursor_for(history) == tree.cursor_for(list(history))
    stepwise = tree.initial_cursor()
    for symbol in history:
        stepwise = tree.advance(stepwise, symbol)
    assert stepwise == tree.cursor_for(history)


def test_find_occurrences_is_leftmost_longest():
    tree = PrefixTree(_phrases(["AB", "ABC", "BC"]))
    occurrences = tree.find_occurrences(_ids("ABCBC"))
    assert [(o.start, o.end, o.phrase_index) for o in occurrences] == [(0, 3, 1), (3, 5, 2)]
    assert len(occurrences[0]) == 3


def test_dump_figure_tree():
    tree = PrefixTree(_phrases(FIGURE_PHRASES))
    assert tree.dump() == "张\n  三 *\n王\n  二 *\n  小\n    五 *\n    六 *\n"
    assert PrefixTree([]).dump() == ""


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
