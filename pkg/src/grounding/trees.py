"""Penn-Treebank bracketings and the noun-filtered constraint sets derived from them.

A :class:`GroundingTree` keeps only nodes whose span covers at least one noun
token. Each valid node is linked to its *nearest valid descendants* (valid
nodes reachable without passing through another valid node); those links
define the parent-child pairs and sibling sets used by the structural losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

NOUN_TAGS = frozenset({"NN", "NNS", "NNP", "NNPS"})


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class Node:
    id: int
    label: str
    token: str | None = None
    children: tuple[int, ...] = ()

    @property
    def is_leaf(self) -> bool:
        return self.token is not None


@dataclass(frozen=True)
class ParseTree:
    nodes: tuple[Node, ...]
    root: int

    def __getitem__(self, node_id: int) -> Node:
        return self.nodes[node_id]

    def leaves(self, node_id: int | None = None) -> list[Node]:
        """Leaf nodes under ``node_id`` in text order."""
        stack = [self.root if node_id is None else node_id]
        out = []
        while stack:
            node = self.nodes[stack.pop()]
            if node.is_leaf:
                out.append(node)
            else:
                stack.extend(reversed(node.children))
        return out

    def to_sexpr(self, node_id: int | None = None) -> str:
        node = self.nodes[self.root if node_id is None else node_id]
        if node.is_leaf:
            return f"({node.label} {node.token})"
        return "({} {})".format(node.label, " ".join(self.to_sexpr(c) for c in node.children))

    def __str__(self):
        return self.to_sexpr()


def _tokenize(text: str):
    """Yield (token, byte_offset) for brackets and atoms."""
    offset = 0
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in "()":
            yield ch, offset
            offset += 1
            i += 1
        elif ch.isspace():
            offset += len(ch.encode("utf-8"))
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            atom = text[i:j]
            yield atom, offset
            offset += len(atom.encode("utf-8"))
            i = j


def parse_sexpr(text: str) -> ParseTree:
    """Parse one bracketed tree such as ``(NP (DT a) (NN cat))``.

    A label-less outer wrapper ``( (S ...) )`` as found in Treebank files is
    unwrapped. Node ids follow pre-order.
    """
    tokens = list(_tokenize(text))
    if not tokens:
        raise ParseError("empty input", 0)
    # each frame: [open_offset, label, token, child_ids, node_slot]
    nodes: list[Node | None] = []
    stack: list[list] = []
    root = None
    pos = 0
    while pos < len(tokens):
        tok, off = tokens[pos]
        if tok == "(":
            if root is not None:
                raise ParseError("text after complete tree", off)
            if stack and stack[-1][2] is not None:
                raise ParseError("leaf with children", off)
            label = None
            if pos + 1 < len(tokens) and tokens[pos + 1][0] not in "()":
                label = tokens[pos + 1][0]
                pos += 1
            nodes.append(None)
            stack.append([off, label, None, [], len(nodes) - 1])
        elif tok == ")":
            if not stack:
                raise ParseError("unmatched ')'", off)
            open_off, label, token, children, slot = stack.pop()
            if label is None:
                if len(children) != 1:
                    raise ParseError("empty constituent" if not children else "unlabeled constituent", open_off)
                # unlabeled wrapper: splice the single child in its place
                nodes[slot] = None
                node_id = children[0]
            elif token is None and not children:
                raise ParseError("empty constituent", open_off)
            else:
                nodes[slot] = Node(slot, label, token, tuple(children))
                node_id = slot
            if stack:
                stack[-1][3].append(node_id)
            else:
                root = node_id
        else:
            if not stack:
                raise ParseError(f"atom {tok!r} outside brackets", off)
            frame = stack[-1]
            if frame[3]:
                raise ParseError("leaf with children", off)
            if frame[2] is not None:
                raise ParseError("leaf with more than one token", off)
            if frame[1] is None:
                raise ParseError("unlabeled leaf", off)
            frame[2] = tok
        pos += 1
    if stack:
        raise ParseError("unmatched '('", stack[0][0])
    return _renumber(nodes, root)


def _renumber(nodes: list[Node | None], root: int) -> ParseTree:
    order: list[int] = []
    stack = [root]
    while stack:
        nid = stack.pop()
        order.append(nid)
        stack.extend(reversed(nodes[nid].children))
    remap = {old: new for new, old in enumerate(order)}
    out = tuple(
        Node(remap[old], nodes[old].label, nodes[old].token, tuple(remap[c] for c in nodes[old].children))
        for old in order
    )
    return ParseTree(out, 0)


@dataclass(frozen=True)
class PCConstraint:
    parent: int
    children: tuple[int, ...]


@dataclass(frozen=True)
class SiblingSet:
    members: tuple[int, ...]


@dataclass(frozen=True)
class GroundingTree:
    source: ParseTree
    valid: tuple[int, ...]
    phrases: dict = field(repr=False)
    pc_pairs: tuple[PCConstraint, ...]
    sibling_sets: tuple[SiblingSet, ...]
    nearest: dict = field(repr=False)

    def phrase_text(self, node_id: int) -> str:
        return " ".join(node_phrase(self, node_id))

    def noun_leaves(self) -> list[int]:
        return [v for v in self.valid if self.source[v].is_leaf]


def build_grounding_tree(
    tree: ParseTree,
    noun_tags=NOUN_TAGS,
    include_leaves: bool = True,
    single_child_pairs: bool = True,
) -> GroundingTree:
    """Filter ``tree`` to noun-bearing nodes and derive the structural constraints.

    Every valid node with at least one nearest valid descendant yields a
    parent-child pair, including single-child chains such as
    ``(NP (DT a) (NN cat))`` over ``cat``; a valid node without valid
    descendants grounds only itself and yields none.
    """
    noun_tags = frozenset(noun_tags)
    nouns: dict[int, frozenset[int]] = {}

    def collect(nid: int) -> frozenset[int]:
        node = tree[nid]
        if node.is_leaf:
            found = frozenset({nid}) if node.label in noun_tags else frozenset()
        else:
            found = frozenset().union(*(collect(c) for c in node.children))
        nouns[nid] = found
        return found

    collect(tree.root)

    def is_valid(nid: int) -> bool:
        if not nouns[nid]:
            return False
        return include_leaves or not tree[nid].is_leaf

    valid = tuple(n.id for n in tree.nodes if is_valid(n.id))

    def nearest_valid(nid: int) -> list[int]:
        out = []
        for c in tree[nid].children:
            if is_valid(c):
                out.append(c)
            else:
                out.extend(nearest_valid(c))
        return out

    nearest = {v: tuple(nearest_valid(v)) for v in valid}
    pc_pairs = []
    sibling_sets = []
    for v in valid:
        kids = nearest[v]
        if not kids:
            continue
        if len(kids) == 1 and (not single_child_pairs or len(tree.leaves(kids[0])) == len(tree.leaves(v))):
            continue
        pc_pairs.append(PCConstraint(v, kids))
        if len(kids) >= 2:
            sibling_sets.append(SiblingSet(kids))
    phrases = {v: tuple(leaf.token.lower() for leaf in tree.leaves(v)) for v in valid}
    return GroundingTree(tree, valid, phrases, tuple(pc_pairs), tuple(sibling_sets), nearest)


def node_phrase(tree: GroundingTree, node_id: int) -> list[str]:
    """Lowercased tokens spanned by valid node ``node_id``."""
    try:
        return list(tree.phrases[node_id])
    except (KeyError, TypeError):
        raise KeyError(f"{node_id!r} is not a valid node of this grounding tree") from None


def dump_constraints(tree: GroundingTree) -> str:
    """Human-readable listing of valid nodes, pc-pairs and sibling sets."""
    src = tree.source
    lines = ["valid nodes:"]
    for v in tree.valid:
        lines.append(f"  [{v}] {src[v].label}: {tree.phrase_text(v)}")
    lines.append("pc-pairs:")
    for pc in tree.pc_pairs:
        kids = " | ".join(tree.phrase_text(c) for c in pc.children)
        lines.append(f"  [{pc.parent}] {tree.phrase_text(pc.parent)} -> {kids}")
    lines.append("sibling-sets:")
    for s in tree.sibling_sets:
        lines.append("  {" + " | ".join(tree.phrase_text(m) for m in s.members) + "}")
    return "\n".join(lines)
