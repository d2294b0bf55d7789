"""Relation-centered subgraph sampling by capped breadth-first traversal."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, TextIO, Tuple

import numpy as np

from .kb import KBError, KnowledgeBase, Triple

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExtractorConfig:
    max_hops: int = 3
    max_neighbors_per_entity: int = 3
    max_subgraphs_per_relation: int = 30
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_hops < 1 or self.max_neighbors_per_entity < 1:
            raise ValueError("hop and neighbor caps must be positive")
        if self.max_subgraphs_per_relation < 1:
            raise ValueError("max_subgraphs_per_relation must be positive")


@dataclass
class Subgraph:
    """Triples collected around a target, tagged with the hop that found them.

    target is None for plain entity neighborhoods (query-time context for the
    direct-inference baseline); those skip the closed-path constraint.
    """

    target: Optional[Triple]
    triples: List[Triple] = field(default_factory=list)
    hop_of: Dict[Triple, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.triples)


def sample_targets(kb: KnowledgeBase, relation: int, count: int, seed: int) -> List[Triple]:
    """Up to `count` distinct train triples of the relation, deterministic per seed."""
    pool = kb.train_by_relation(relation)
    if len(pool) <= count:
        return list(pool)
    rng = np.random.default_rng(np.random.SeedSequence([seed, relation]))
    idx = rng.choice(len(pool), size=count, replace=False)
    idx.sort()
    return [pool[i] for i in idx]


def _seed_entropy(cfg: ExtractorConfig, seeds: Tuple[int, ...]) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, *seeds]))


def _expand(
    kb: KnowledgeBase,
    start_entities: List[int],
    cfg: ExtractorConfig,
    rng: np.random.Generator,
    exclude: Optional[Triple],
) -> Subgraph:
    sg = Subgraph(target=exclude)
    chosen = set()
    seen_entities = set(start_entities)
    frontier = sorted(set(start_entities))
    cap = cfg.max_neighbors_per_entity
    for hop in range(1, cfg.max_hops + 1):
        new_entities = set()
        for pivot in frontier:
            cands = [
                t for t in kb.incident.get(pivot, [])
                if t != exclude and t not in chosen
            ]
            if len(cands) > cap:
                keep = rng.choice(len(cands), size=cap, replace=False)
                keep.sort()
                cands = [cands[i] for i in keep]
            for t in cands:
                chosen.add(t)
                sg.triples.append(t)
                sg.hop_of[t] = hop
                for e in (t.head, t.tail):
                    if e not in seen_entities:
                        new_entities.add(e)
        seen_entities |= new_entities
        frontier = sorted(new_entities)
        if not frontier:
            break
    return sg


def extract_subgraph(kb: KnowledgeBase, target: Triple, cfg: ExtractorConfig) -> Subgraph:
    """BFS outwards from the target's endpoints, excluding the target itself.

    Edges are traversed in both directions. Triples found at the final hop must
    touch the target head or tail (closed-path constraint); others are dropped.
    """
    rng = _seed_entropy(cfg, (target.head, target.relation, target.tail))
    sg = _expand(kb, [target.head, target.tail], cfg, rng, exclude=target)
    anchors = {target.head, target.tail}
    kept: List[Triple] = []
    for t in sg.triples:
        if sg.hop_of[t] == cfg.max_hops and not (t.head in anchors or t.tail in anchors):
            del sg.hop_of[t]
            continue
        kept.append(t)
    sg.triples = kept
    return sg


def extract_entity_neighborhood(kb: KnowledgeBase, entity: int, cfg: ExtractorConfig) -> Subgraph:
    """Context subgraph around a single entity; no target, no closed-path filter."""
    rng = _seed_entropy(cfg, (entity,))
    return _expand(kb, [entity], cfg, rng, exclude=None)


def linearize(sg: Subgraph, kb: KnowledgeBase) -> str:
    """One "(SUBJ, REL, OBJ)" line per triple, hop order then insertion order."""
    lines = []
    for t in sg.triples:
        lines.append(
            "(%s, %s, %s)"
            % (kb.entity_name(t.head), kb.relation_name(t.relation), kb.entity_name(t.tail))
        )
    return "\n".join(lines)


def save_subgraphs(fh: TextIO, kb: KnowledgeBase, subgraphs: List[Subgraph]) -> None:
    """Structured text dump: a target line then hop-tagged triple lines per record."""
    for sg in subgraphs:
        if sg.target is None:
            raise KBError("cannot dump a subgraph without a target")
        h, r, t = sg.target
        fh.write(
            "target\t%s\t%s\t%s\n"
            % (kb.entity_name(h), kb.relation_name(r), kb.entity_name(t))
        )
        for tr in sg.triples:
            fh.write(
                "triple\t%d\t%s\t%s\t%s\n"
                % (
                    sg.hop_of[tr],
                    kb.entity_name(tr.head),
                    kb.relation_name(tr.relation),
                    kb.entity_name(tr.tail),
                )
            )
        fh.write("\n")


def load_subgraphs(fh: TextIO, kb: KnowledgeBase) -> Iterator[Subgraph]:
    """Inverse of save_subgraphs; names are resolved against the KB vocabulary."""
    current: Optional[Subgraph] = None
    for lineno, raw in enumerate(fh, start=1):
        line = raw.rstrip("\r\n")
        if not line:
            if current is not None:
                yield current
                current = None
            continue
        parts = line.split("\t")
        if parts[0] == "target" and len(parts) == 4:
            if current is not None:
                yield current
            current = Subgraph(
                target=Triple(
                    kb.entities.id(parts[1]), kb.relations.id(parts[2]), kb.entities.id(parts[3])
                )
            )
        elif parts[0] == "triple" and len(parts) == 5 and current is not None:
            tr = Triple(kb.entities.id(parts[2]), kb.relations.id(parts[3]), kb.entities.id(parts[4]))
            current.triples.append(tr)
            current.hop_of[tr] = int(parts[1])
        else:
            raise KBError("subgraph dump line %d is malformed: %r" % (lineno, line))
    if current is not None:
        yield current
