import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grounding.trees import ParseError, build_grounding_tree, dump_constraints, node_phrase, parse_sexpr

CAT = (
    "(NP (NP (DT A) (JJ grey) (NN cat)) (VP (VBG staring) (PP (IN at) "
    "(NP (NP (DT a) (NN hand)) (PP (IN with) (NP (DT a) (NN donut)))))))"
)


def phrases_of(gt, ids):
    return {gt.phrase_text(i) for i in ids}


def test_simple_np():
    tree = parse_sexpr("(NP (DT a) (JJ grey) (NN cat))")
    root = tree[tree.root]
    assert root.label == "NP" and len(root.children) == 3
    assert [leaf.token for leaf in tree.leaves()] == ["a", "grey", "cat"]


def test_two_children():
    tree = parse_sexpr("(S (NP (NN cat)) (VP (VBZ sits)))")
    assert tree[tree.root].label == "S"
    assert [tree[c].label for c in tree[tree.root].children] == ["NP", "VP"]


def test_unmatched_open_reports_its_offset():
    with pytest.raises(ParseError) as err:
        parse_sexpr("((NP (NN cat))")
    assert err.value.offset == 0


@pytest.mark.parametrize(
    "text, offset",
    [
        ("(NP (NN cat)))", 13),
        ("(NP (NN cat) ()", 13),
        ("(NP (NN cat (DT a)))", 12),
        ("(NP (NN cat)", 0),
    ],
)
def test_malformed_offsets(text, offset):
    with pytest.raises(ParseError) as err:
        parse_sexpr(text)
    assert err.value.offset == offset


def test_offsets_count_utf8_bytes():
    with pytest.raises(ParseError) as err:
        parse_sexpr("(NP (NN café)))")
    assert err.value.offset == len("(NP (NN café))".encode("utf-8"))


def test_treebank_wrapper_unwrapped():
    tree = parse_sexpr("( (S (NP (NN cat)) (VP (VBZ sits))) )")
    assert tree[tree.root].label == "S"


def test_whitespace_insensitive():
    a = parse_sexpr("(NP (DT a) (NN cat))")
    b = parse_sexpr("(NP\n   (DT   a)\t(NN cat) )")
    assert a == b


def test_figure_parent_has_two_children():
    gt = build_grounding_tree(parse_sexpr(CAT))
    parents = {gt.phrase_text(pc.parent): phrases_of(gt, pc.children) for pc in gt.pc_pairs}
    assert parents["a hand with a donut"] == {"a hand", "with a donut"}


def test_figure_sibling_set():
    gt = build_grounding_tree(parse_sexpr(CAT))
    sets = [phrases_of(gt, s.members) for s in gt.sibling_sets]
    assert {"a grey cat", "staring at a hand with a donut"} in sets


def test_non_noun_constituents_excluded():
    gt = build_grounding_tree(parse_sexpr(CAT))
    labels = {gt.source[v].label for v in gt.valid}
    assert "IN" not in labels and "DT" not in labels
    assert "with" not in {gt.phrase_text(v) for v in gt.valid}


def test_no_nouns_no_constraints():
    gt = build_grounding_tree(parse_sexpr("(S (VBZ is) (RB here))"))
    assert gt.valid == () and gt.pc_pairs == () and gt.sibling_sets == ()


def test_single_child_pairs_kept():
    gt = build_grounding_tree(parse_sexpr("(NP (DT a) (JJ grey) (NN cat))"))
    assert [(gt.phrase_text(pc.parent), phrases_of(gt, pc.children)) for pc in gt.pc_pairs] == [
        ("a grey cat", {"cat"})
    ]
    assert gt.sibling_sets == ()


def test_leaf_switch():
    gt = build_grounding_tree(parse_sexpr("(NP (DT a) (JJ grey) (NN cat))"), include_leaves=False)
    assert gt.pc_pairs == () and len(gt.valid) == 1


def test_node_phrase_root_and_leaf():
    gt = build_grounding_tree(parse_sexpr(CAT))
    assert node_phrase(gt, gt.source.root) == "a grey cat staring at a hand with a donut".split()
    leaf = gt.noun_leaves()[0]
    assert node_phrase(gt, leaf) == ["cat"]


def test_node_phrase_unknown_id():
    gt = build_grounding_tree(parse_sexpr(CAT))
    with pytest.raises(KeyError):
        node_phrase(gt, 10**9)
    with pytest.raises(KeyError):
        node_phrase(gt, 1 + max(gt.valid) + 100)


def test_dump_lists_sections():
    text = dump_constraints(build_grounding_tree(parse_sexpr(CAT)))
    assert "pc-pairs:" in text and "sibling-sets:" in text
    assert "a hand with a donut -> a hand | with a donut" in text


# ------------------------------------------------------------ properties

LEAF_TAGS = ["NN", "NNS", "DT", "JJ", "IN", "VBZ"]
PHRASE_TAGS = ["S", "NP", "VP", "PP"]


@st.composite
def bracketings(draw, depth=0):
    if depth >= 3 or draw(st.booleans()):
        tag = draw(st.sampled_from(LEAF_TAGS))
        word = draw(st.sampled_from(["cat", "dog", "a", "red", "on", "sits"]))
        return f"({tag} {word})"
    label = draw(st.sampled_from(PHRASE_TAGS))
    kids = draw(st.lists(bracketings(depth=depth + 1), min_size=1, max_size=3))
    return f"({label} {' '.join(kids)})"


def span(tree, nid):
    return {leaf.id for leaf in tree.leaves(nid)}


@settings(max_examples=150, deadline=None)
@given(bracketings())
def test_print_parse_round_trip(text):
    tree = parse_sexpr(text)
    printed = tree.to_sexpr()
    assert parse_sexpr(printed) == tree
    assert parse_sexpr(printed).to_sexpr() == printed


@settings(max_examples=150, deadline=None)
@given(bracketings())
def test_constraint_invariants(text):
    tree = parse_sexpr(text)
    gt = build_grounding_tree(tree)
    nouns = {"NN", "NNS", "NNP", "NNPS"}
    for v in gt.valid:
        assert any(leaf.label in nouns for leaf in tree.leaves(v))
    for pc in gt.pc_pairs:
        assert pc.children and len(set(pc.children)) == len(pc.children)
        parent_span = span(tree, pc.parent)
        union = set().union(*(span(tree, c) for c in pc.children))
        # transitivity: children's spans lie inside the parent's
        assert union <= parent_span
        for c in pc.children:
            assert span(tree, c) < parent_span
    for s in gt.sibling_sets:
        assert len(s.members) >= 2
        spans = [span(tree, m) for m in s.members]
        for i in range(len(spans)):
            for j in range(i + 1, len(spans)):
                assert not spans[i] & spans[j]
        owners = {p for p, kids in gt.nearest.items() if set(s.members) <= set(kids)}
        assert len(owners) == 1
    assert build_grounding_tree(tree) == gt
