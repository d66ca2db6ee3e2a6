"""WordNet noun taxonomy: WNDB parsing, hypernym paths, level-l concept mining.

Words are annotated with the taxonomy nodes found at a fixed depth below the
root, and the K most word-populated nodes become the concept vocabulary used
as retrieval labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import (
    ConfigError,
    GraphLookupError,
    IntegrityError,
    ParameterError,
    ParseError,
)

HYPERNYM_SYMBOLS = ("@", "@i")


@dataclass(frozen=True)
class Synset:
    lemmas: tuple[str, ...]
    gloss: str
    hypernyms: tuple[str, ...]


class SynsetGraph:
    """Read-only hypernym DAG over noun synsets.

    synsets maps synset id (pos tag + 8-digit byte offset, or a fixture id)
    to a Synset; lemma_index maps lowercased lemma to its synset ids in
    sense order.
    """

    def __init__(self, synsets: dict[str, Synset], lemma_index: dict[str, list[str]]):
        self.synsets = synsets
        self.lemma_index = lemma_index
        self._validate()

    def _validate(self):
        for sid, syn in self.synsets.items():
            for hyp in syn.hypernyms:
                if hyp not in self.synsets:
                    raise IntegrityError(f"synset {sid} has dangling hypernym {hyp}")
        self._check_acyclic()
        for lemma, sids in self.lemma_index.items():
            if not sids:
                raise IntegrityError(f"lemma {lemma!r} maps to no synsets")
            for sid in sids:
                if sid not in self.synsets:
                    raise IntegrityError(f"lemma {lemma!r} references unknown synset {sid}")

    def _check_acyclic(self):
        # iterative three-color DFS over hypernym edges
        WHITE, GRAY, BLACK = 0, 1, 2
        color = {sid: WHITE for sid in self.synsets}
        for start in self.synsets:
            if color[start] != WHITE:
                continue
            stack = [(start, iter(self.synsets[start].hypernyms))]
            color[start] = GRAY
            while stack:
                node, it = stack[-1]
                advanced = False
                for nxt in it:
                    if color[nxt] == GRAY:
                        raise IntegrityError(f"hypernym cycle through {nxt}")
                    if color[nxt] == WHITE:
                        color[nxt] = GRAY
                        stack.append((nxt, iter(self.synsets[nxt].hypernyms)))
                        advanced = True
                        break
                if not advanced:
                    color[node] = BLACK
                    stack.pop()

    def roots(self) -> list[str]:
        return [sid for sid, syn in self.synsets.items() if not syn.hypernyms]

    def label(self, sid: str) -> str:
        syn = self.synsets.get(sid)
        if syn is None:
            raise GraphLookupError(sid)
        return syn.lemmas[0] if syn.lemmas else sid


# MiniTaxonomy shares the SynsetGraph shape; the distinction is only the
# source format (hand-written fixture vs real WNDB files).
MiniTaxonomy = SynsetGraph


def _decode_lines(stream):
    for line_no, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("ascii", errors="strict")
        yield line_no, raw.rstrip("\n")


def _parse_data_line(line: str, line_no: int):
    tokens = line.split(" ")
    try:
        offset = tokens[0]
        if len(offset) != 8 or not offset.isdigit():
            raise ParseError("bad synset offset", line_no, "synset_offset")
        ss_type = tokens[2]
        w_cnt = int(tokens[3], 16)
    except (IndexError, ValueError):
        raise ParseError("truncated synset header", line_no, "w_cnt") from None
    pos = 4
    lemmas = []
    try:
        for _ in range(w_cnt):
            lemmas.append(tokens[pos].lower())
            pos += 2  # skip lex_id
        p_cnt = int(tokens[pos])
        pos += 1
    except (IndexError, ValueError):
        raise ParseError("word list shorter than w_cnt", line_no, "w_cnt") from None
    hypernyms = []
    for _ in range(p_cnt):
        if pos + 3 >= len(tokens) or tokens[pos] == "|":
            raise ParseError("fewer pointers than declared", line_no, "p_cnt")
        symbol, tgt_offset, tgt_pos = tokens[pos], tokens[pos + 1], tokens[pos + 2]
        if len(tgt_offset) != 8 or not tgt_offset.isdigit():
            raise ParseError("bad pointer offset", line_no, "pointer_offset")
        if symbol in HYPERNYM_SYMBOLS and tgt_pos == "n":
            hypernyms.append("n" + tgt_offset)
        pos += 4
    if pos < len(tokens) and tokens[pos] not in ("|", ""):
        raise ParseError("more pointers than declared", line_no, "p_cnt")
    gloss = ""
    if "|" in tokens[pos:]:
        gloss = line.split("|", 1)[1].strip()
    return "n" + offset, Synset(tuple(lemmas), gloss, tuple(hypernyms))


def _parse_index_line(line: str, line_no: int):
    tokens = line.split()
    try:
        lemma = tokens[0].lower()
        synset_cnt = int(tokens[2])
        p_cnt = int(tokens[3])
        offsets = tokens[4 + p_cnt + 2:]
    except (IndexError, ValueError):
        raise ParseError("truncated index entry", line_no, "synset_cnt") from None
    if len(offsets) != synset_cnt:
        raise ParseError("offset list disagrees with synset_cnt", line_no, "synset_cnt")
    for off in offsets:
        if len(off) != 8 or not off.isdigit():
            raise ParseError("bad synset offset", line_no, "synset_offset")
    return lemma, ["n" + off for off in offsets]


def parse_wndb(index_file, data_file) -> SynsetGraph:
    """Parse WordNet 3.0 index.noun / data.noun streams into a SynsetGraph.

    Hypernym ("@") and instance-hypernym ("@i") pointers both become edges;
    all other pointer kinds are dropped. License header lines (two leading
    spaces) are skipped.
    """
    synsets: dict[str, Synset] = {}
    for line_no, line in _decode_lines(data_file):
        if line.startswith("  ") or not line.strip():
            continue
        sid, syn = _parse_data_line(line, line_no)
        synsets[sid] = syn
    lemma_index: dict[str, list[str]] = {}
    for line_no, line in _decode_lines(index_file):
        if line.startswith("  ") or not line.strip():
            continue
        lemma, sids = _parse_index_line(line, line_no)
        lemma_index[lemma] = sids
    return SynsetGraph(synsets, lemma_index)


def load_mini_taxonomy(stream) -> MiniTaxonomy:
    """Load a hand-written taxonomy fixture.

    Format: one record per line, `node <id> <label>` or
    `edge <child-id> <parent-id>` (edge means hypernym); `#` starts a comment.
    """
    labels: dict[str, str] = {}
    edges: list[tuple[str, str, int]] = []
    for line_no, line in _decode_lines(stream):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] == "node":
            if len(tokens) != 3:
                raise ParseError("node record needs id and label", line_no, "node")
            node_id, label = tokens[1], tokens[2]
            if node_id in labels:
                raise ParseError(f"duplicate node id {node_id!r}", line_no, "node")
            labels[node_id] = label
        elif tokens[0] == "edge":
            if len(tokens) != 3:
                raise ParseError("edge record needs child and parent", line_no, "edge")
            edges.append((tokens[1], tokens[2], line_no))
        else:
            raise ParseError(f"unknown record kind {tokens[0]!r}", line_no, "kind")
    hypernyms: dict[str, list[str]] = {nid: [] for nid in labels}
    for child, parent, line_no in edges:
        if child not in labels or parent not in labels:
            raise IntegrityError(f"line {line_no}: edge references undeclared node")
        hypernyms[child].append(parent)
    synsets = {
        nid: Synset((labels[nid],), "", tuple(hypernyms[nid])) for nid in labels
    }
    lemma_index: dict[str, list[str]] = {}
    for nid in labels:  # insertion order = declaration order
        lemma_index.setdefault(labels[nid].lower(), []).append(nid)
    return SynsetGraph(synsets, lemma_index)


def hypernym_paths(graph: SynsetGraph, synset: str) -> list[list[str]]:
    """All distinct root-to-synset paths, each listed root first."""
    if synset not in graph.synsets:
        raise GraphLookupError(synset)
    paths: list[list[str]] = []

    def ascend(node, suffix):
        parents = graph.synsets[node].hypernyms
        if not parents:
            paths.append([node] + suffix)
            return
        for parent in parents:
            ascend(parent, [node] + suffix)

    ascend(synset, [])
    return paths


def concepts_at_level(graph: SynsetGraph, word: str, level: int) -> set[str]:
    """Union over every (sense, root path) of the node at the given depth.

    Root = depth 0. Paths shorter than level+1 contribute nothing; a word's
    own synset is eligible when it sits exactly at the requested depth.
    Unknown words yield the empty set.
    """
    if level < 1:
        raise ParameterError(f"level must be >= 1, got {level}")
    found: set[str] = set()
    for sid in graph.lemma_index.get(word, []):
        for path in hypernym_paths(graph, sid):
            if len(path) > level:
                found.add(path[level])
    return found


def _offset_sort_key(sid: str):
    # real ids sort by byte offset; fixture ids fall back to the id string
    tail = sid[1:] if sid[:1].isalpha() else sid
    if tail.isdigit():
        return (0, int(tail), sid)
    return (1, 0, sid)


@dataclass
class ConceptVocabulary:
    """The K concepts mined at one depth level plus the word annotation map."""

    depth_level: int
    concepts: list[dict]  # ordered: {"id", "label", "population"}
    word_annotations: dict[str, list[int]]
    stats: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.concepts)

    @property
    def words(self) -> list[str]:
        return list(self.word_annotations)

    def concept_index(self, name: str) -> int:
        for i, c in enumerate(self.concepts):
            if c["label"] == name or c["id"] == name:
                return i
        raise GraphLookupError(name)

    def to_json(self) -> str:
        payload = {
            "depth_level": self.depth_level,
            "concepts": self.concepts,
            "annotations": {w: sorted(ids) for w, ids in sorted(self.word_annotations.items())},
            "stats": self.stats,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ConceptVocabulary":
        payload = json.loads(text)
        return cls(
            depth_level=payload["depth_level"],
            concepts=payload["concepts"],
            word_annotations={w: list(ids) for w, ids in payload["annotations"].items()},
            stats=payload.get("stats", {}),
        )


def build_vocabulary(graph: SynsetGraph, words: list[str], level: int, k: int) -> ConceptVocabulary:
    """Mine level-l concepts for the given words and keep the K most populated.

    Population counts distinct words per concept. Words whose annotation set
    becomes empty after the top-K restriction are dropped from the vocabulary
    (at training and at test time alike). Multi-token words are skipped and
    counted in the stats.
    """
    if k < 1:
        raise ParameterError(f"K must be >= 1, got {k}")
    if not words:
        raise ParameterError("word list is empty")
    skipped_multiword = 0
    raw_annotations: dict[str, set[str]] = {}
    for word in words:
        word = word.strip().lower()
        if not word:
            continue
        if any(ch.isspace() for ch in word) or "_" in word:
            skipped_multiword += 1
            continue
        concepts = concepts_at_level(graph, word, level)
        if concepts:
            raw_annotations[word] = concepts
    population: dict[str, int] = {}
    for concepts in raw_annotations.values():
        for cid in concepts:
            population[cid] = population.get(cid, 0) + 1
    if len(population) < k:
        raise ConfigError(
            f"only {len(population)} concepts exist at level {level}; cannot keep top {k}"
        )
    ordered = sorted(population, key=lambda cid: (-population[cid], _offset_sort_key(cid)))
    top = ordered[:k]
    index_of = {cid: i for i, cid in enumerate(top)}
    word_annotations: dict[str, list[int]] = {}
    dropped = 0
    for word, concepts in raw_annotations.items():
        kept = sorted(index_of[cid] for cid in concepts if cid in index_of)
        if kept:
            word_annotations[word] = kept
        else:
            dropped += 1
    if not word_annotations:
        raise ConfigError("no word retains an annotation under the top-K restriction")
    counts = [len(v) for v in word_annotations.values()]
    stats = {
        "input_words": len(words),
        "annotated_words": len(word_annotations),
        "dropped_words": dropped,
        "skipped_multiword": skipped_multiword,
        "mean_concepts_per_word": sum(counts) / len(counts),
        "max_concepts_per_word": max(counts),
    }
    concepts = [
        {"id": cid, "label": graph.label(cid), "population": population[cid]} for cid in top
    ]
    return ConceptVocabulary(level, concepts, word_annotations, stats)
