"""Synthetic dialogues sampled from known latent causal graphs.

Each dialogue realizes a latent graph whose response-node neighborhoods come
from four templates:

  two_linked        two parents (u_j and the preceding utterance) with an
                    extra edge j -> t-1 connecting them,
  two_disconnected  two parents with no connection between them,
  chain             j -> k -> t-1 -> t, so j and k are ancestors but not
                    parents (dependent marginally, independent given t-1),
  single            only the preceding utterance is a parent.

Latent values live in a small finite domain and children are affine-bijective
functions of their parents (plus a seeded flip probability), so conditional
dependence of a child on each parent is guaranteed and every conditional
independence claimed by d-separation holds exactly.  Utterance text is a bag
of words drawn from the value's topic vocabulary, with a noise fraction drawn
globally.  Auxiliary template nodes are always taken from so-far untouched
context nodes, which keeps each response's neighborhood isolated; as a result
a candidate j is conditionally dependent on the response given the preceding
utterance if and only if j is a parent of the response node.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Dialogue, HistoryResponsePair, Utterance
from .errors import InsufficientSamples

TEMPLATES = ("two_linked", "two_disconnected", "chain", "single")
DEFAULT_MIX = {
    "two_linked": 0.25,
    "two_disconnected": 0.25,
    "chain": 0.25,
    "single": 0.25,
}


@dataclass(frozen=True)
class SyntheticWorld:
    """Vocabulary, structural functions, and sampling policy for one world."""

    topic_vocabulary: dict[int, tuple[str, ...]]
    noise_rate: float
    structure_mix: dict[str, float]
    seed: int
    utterance_length: int = 4
    value_noise: float = 0.15
    recency: float = 0.6

    def __post_init__(self):
        if not (0.0 <= self.noise_rate < 1.0):
            raise ValueError("noise_rate must be in [0, 1)")
        if not math.isclose(sum(self.structure_mix.values()), 1.0, abs_tol=1e-9):
            raise ValueError("structure_mix weights must sum to 1")
        for name in self.structure_mix:
            if name not in TEMPLATES:
                raise ValueError(f"unknown template {name!r}")
        seen: set[str] = set()
        for words in self.topic_vocabulary.values():
            overlap = seen & set(words)
            if overlap:
                raise ValueError(f"topic word sets overlap: {sorted(overlap)}")
            seen.update(words)

    @property
    def n_values(self) -> int:
        return len(self.topic_vocabulary)

    @property
    def global_vocabulary(self) -> tuple[str, ...]:
        words: list[str] = []
        for v in sorted(self.topic_vocabulary):
            words.extend(self.topic_vocabulary[v])
        return tuple(words)

    def with_mix(self, structure_mix: dict[str, float]) -> "SyntheticWorld":
        """Same vocabulary and functions, different neighborhood mix."""
        return replace(self, structure_mix=dict(structure_mix))

    # Affine-bijective structural functions, drawn once per world seed.
    # f2 drives two-parent responses, f1 one-parent responses, g1 context
    # chain links.  Coefficients are coprime to the domain size so each
    # function is a bijection in every argument.
    def functions(self) -> "StructuralFunctions":
        return StructuralFunctions.from_seed(self.seed, self.n_values)

    def to_json(self) -> str:
        return json.dumps(
            {
                "topic_vocabulary": {
                    str(v): list(words) for v, words in sorted(self.topic_vocabulary.items())
                },
                "noise_rate": self.noise_rate,
                "structure_mix": self.structure_mix,
                "seed": self.seed,
                "utterance_length": self.utterance_length,
                "value_noise": self.value_noise,
                "recency": self.recency,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SyntheticWorld":
        raw = json.loads(text)
        return cls(
            topic_vocabulary={int(v): tuple(w) for v, w in raw["topic_vocabulary"].items()},
            noise_rate=raw["noise_rate"],
            structure_mix=raw["structure_mix"],
            seed=raw["seed"],
            utterance_length=raw.get("utterance_length", 4),
            value_noise=raw.get("value_noise", 0.05),
            recency=raw.get("recency", 0.6),
        )


@dataclass(frozen=True)
class StructuralFunctions:
    n_values: int
    f2_coeffs: tuple[int, int, int]  # z_t = a*z_j + b*z_{t-1} + c (mod V)
    f1_coeffs: tuple[int, int]       # z_t = a*z_{t-1} + c
    g1_coeffs: tuple[int, int]       # context child = a*parent + c

    @classmethod
    def from_seed(cls, seed: int, n_values: int) -> "StructuralFunctions":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5F]))
        units = [u for u in range(1, n_values) if math.gcd(u, n_values) == 1]
        def draw_pair():
            return int(rng.choice(units)), int(rng.integers(n_values))
        a2, c2a = draw_pair()
        b2 = int(rng.choice(units))
        f1 = draw_pair()
        g1 = draw_pair()
        funcs = cls(n_values, (a2, b2, c2a), f1, g1)
        # One-parent responses and the map induced on two-parent responses by
        # the linked template must disagree somewhere, or a linked response
        # would be indistinguishable from a single-cause one.
        while all(
            funcs.f1(v) == funcs.f2(funcs.g1_inverse(v), v) for v in range(n_values)
        ):
            f1 = (int(rng.choice(units)), int(rng.integers(n_values)))
            funcs = cls(n_values, (a2, b2, c2a), f1, g1)
        return funcs

    def f2(self, v_j: int, v_prev: int) -> int:
        a, b, c = self.f2_coeffs
        return (a * v_j + b * v_prev + c) % self.n_values

    def f1(self, v_prev: int) -> int:
        a, c = self.f1_coeffs
        return (a * v_prev + c) % self.n_values

    def g1(self, v_parent: int) -> int:
        a, c = self.g1_coeffs
        return (a * v_parent + c) % self.n_values

    def g1_inverse(self, v_child: int) -> int:
        a, c = self.g1_coeffs
        a_inv = pow(a, -1, self.n_values)
        return (a_inv * (v_child - c)) % self.n_values


@dataclass(frozen=True)
class LatentGraph:
    n_nodes: int
    edges: frozenset[tuple[int, int]]
    response_nodes: tuple[int, ...]
    templates: dict[int, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for i, j in self.edges:
            if not (0 <= i < j < self.n_nodes):
                raise ValueError(f"edge ({i},{j}) violates temporal order")
        for t in self.response_nodes:
            parents = self.parents(t)
            if t - 1 not in parents:
                raise ValueError(f"response {t} lacks its preceding parent")
            if len(parents) > 2:
                raise ValueError(f"response {t} has more than two parents")

    def parents(self, node: int) -> tuple[int, ...]:
        return tuple(sorted(i for i, j in self.edges if j == node))

    def children(self, node: int) -> tuple[int, ...]:
        return tuple(sorted(j for i, j in self.edges if i == node))


def make_world(
    n_values: int = 8,
    words_per_value: int = 6,
    noise_rate: float = 0.1,
    structure_mix: dict[str, float] | None = None,
    seed: int = 0,
    utterance_length: int = 4,
    value_noise: float = 0.15,
    recency: float = 0.6,
) -> SyntheticWorld:
    """Build a world with auto-generated disjoint topic vocabularies."""
    vocabulary = {
        v: tuple(f"v{v}w{m}" for m in range(words_per_value)) for v in range(n_values)
    }
    return SyntheticWorld(
        topic_vocabulary=vocabulary,
        noise_rate=noise_rate,
        structure_mix=dict(structure_mix or DEFAULT_MIX),
        seed=seed,
        utterance_length=utterance_length,
        value_noise=value_noise,
        recency=recency,
    )


def response_positions(n_turns: int) -> list[int]:
    """Responder turns that carry a sampled neighborhood.

    Responders speak at odd positions; structures are placed every other
    responder turn so enough untouched context nodes exist for templates.
    """
    positions = [t for t in range(3, n_turns, 4)]
    if not positions and n_turns >= 2:
        positions = [1]
    return positions


def _weighted_pick(rng: np.random.Generator, candidates: list[int], anchor: int, recency: float) -> int:
    weights = np.array([recency ** (anchor - c) for c in candidates], dtype=float)
    weights /= weights.sum()
    return int(rng.choice(candidates, p=weights))


def sample_graph(
    world: SyntheticWorld,
    n_turns: int,
    seed: int,
    positions: Sequence[int] | None = None,
) -> LatentGraph:
    """Draw one latent graph with per-response neighborhoods from the mix.

    Auxiliary nodes are only ever taken from nodes with no edges yet, so the
    graph decomposes into per-response gadgets and a candidate j is
    conditionally dependent on a response given its preceding utterance
    exactly when j is a parent.  Templates degrade to ``single`` when no
    untouched nodes remain.  ``positions`` overrides the default response
    placement (odd indices, one structure every other responder turn).
    """
    if n_turns < 2:
        raise ValueError("need at least 2 turns")
    rng = np.random.default_rng(np.random.SeedSequence([world.seed, seed, 0xA1]))
    names = sorted(world.structure_mix)
    probs = np.array([world.structure_mix[n] for n in names])
    edges: set[tuple[int, int]] = set()
    used: set[int] = set()
    templates: dict[int, str] = {}
    if positions is not None:
        responses = sorted(positions)
        if any(t < 1 or t >= n_turns or t % 2 == 0 for t in responses):
            raise ValueError("response positions must be odd indices inside the dialogue")
    else:
        responses = response_positions(n_turns)
    for t in responses:
        used.update({t - 1, t})
        edges.add((t - 1, t))
        template = str(rng.choice(names, p=probs))
        fresh = [i for i in range(t - 1) if i not in used]
        if template in ("two_linked", "two_disconnected"):
            if not fresh:
                template = "single"
            else:
                j = _weighted_pick(rng, fresh, t, world.recency)
                used.add(j)
                edges.add((j, t))
                if template == "two_linked":
                    edges.add((j, t - 1))
        if template == "chain":
            if len(fresh) < 2:
                template = "single"
            else:
                k = _weighted_pick(rng, fresh[1:], t, world.recency)
                j_pool = [i for i in fresh if i < k]
                j = _weighted_pick(rng, j_pool, k, world.recency)
                used.update({j, k})
                edges.add((j, k))
                edges.add((k, t - 1))
        templates[t] = template
    return LatentGraph(
        n_nodes=n_turns,
        edges=frozenset(edges),
        response_nodes=tuple(responses),
        templates=templates,
    )


def _sample_values(
    graph: LatentGraph, world: SyntheticWorld, rng: np.random.Generator
) -> list[int]:
    """Ancestral sampling of latent values.

    Responses are exact functions of their parents; context links flip to a
    uniform value with probability ``value_noise`` so that no conditional
    distribution degenerates to a point mass (a deterministic j -> t-1 link
    would make the linked two-parent template unfaithful under conditioning).
    """
    funcs = world.functions()
    n_values = world.n_values
    values: list[int] = [0] * graph.n_nodes
    response_set = set(graph.response_nodes)
    for node in range(graph.n_nodes):
        parents = graph.parents(node)
        if not parents:
            values[node] = int(rng.integers(n_values))
        elif node in response_set:
            if len(parents) == 2:
                j, prev = parents
                values[node] = funcs.f2(values[j], values[prev])
            else:
                values[node] = funcs.f1(values[parents[0]])
        else:
            values[node] = funcs.g1(values[parents[0]])
            if world.value_noise > 0 and rng.random() < world.value_noise:
                values[node] = int(rng.integers(n_values))
    return values


def _render_text(value: int, world: SyntheticWorld, rng: np.random.Generator) -> str:
    topic = world.topic_vocabulary[value]
    global_vocab = world.global_vocabulary
    words = []
    for _ in range(world.utterance_length):
        if world.noise_rate > 0 and rng.random() < world.noise_rate:
            words.append(global_vocab[int(rng.integers(len(global_vocab)))])
        else:
            words.append(topic[int(rng.integers(len(topic)))])
    return " ".join(words)


def render_dialogue(
    graph: LatentGraph, world: SyntheticWorld, seed: int, dialogue_id: str | None = None
) -> tuple[Dialogue, list[HistoryResponsePair]]:
    """Sample latent values along the graph and emit text plus gold causes."""
    rng = np.random.default_rng(np.random.SeedSequence([world.seed, seed, 0xD1]))
    values = _sample_values(graph, world, rng)
    utterances = tuple(
        Utterance(
            index=i,
            speaker="generic_a" if i % 2 == 0 else "generic_b",
            text=_render_text(values[i], world, rng),
        )
        for i in range(graph.n_nodes)
    )
    dialogue = Dialogue(
        id=dialogue_id or f"synth-{seed}",
        source="synthetic",
        utterances=utterances,
    )
    pairs = [
        HistoryResponsePair(
            dialogue_id=dialogue.id,
            t=t,
            cause_indices=frozenset(graph.parents(t)),
        )
        for t in graph.response_nodes
    ]
    return dialogue, pairs


@dataclass
class SyntheticCorpus:
    world: SyntheticWorld
    graphs: list[LatentGraph]
    dialogues: list[Dialogue]
    pairs: list[HistoryResponsePair]

    def graph_for(self, dialogue_id: str) -> LatentGraph:
        return self.graphs[self._index[dialogue_id]]

    def __post_init__(self):
        self._index = {d.id: i for i, d in enumerate(self.dialogues)}


def render_corpus(
    world: SyntheticWorld,
    n_dialogues: int,
    n_turns: int,
    seed: int,
    shared_graph: LatentGraph | None = None,
    positions: Sequence[int] | None = None,
    id_prefix: str = "synth",
) -> SyntheticCorpus:
    """Render many dialogues; graphs are per-dialogue unless one is shared."""
    graphs: list[LatentGraph] = []
    dialogues: list[Dialogue] = []
    pairs: list[HistoryResponsePair] = []
    for i in range(n_dialogues):
        if shared_graph is not None:
            graph = shared_graph
        else:
            graph = sample_graph(world, n_turns, seed=seed * 2_000_003 + i, positions=positions)
        dialogue, gold = render_dialogue(
            graph, world, seed=seed * 1_000_003 + i, dialogue_id=f"{id_prefix}-{seed}-{i}"
        )
        graphs.append(graph)
        dialogues.append(dialogue)
        pairs.extend(gold)
    return SyntheticCorpus(world=world, graphs=graphs, dialogues=dialogues, pairs=pairs)


# -- conditional-independence oracle --


def oracle_ci(graph: LatentGraph, j: int, t: int) -> bool:
    """True iff z_t depends on z_j given z_{t-1}, by d-separation.

    Uses Bayes-ball reachability: a path is open at a chain or fork node not
    in the conditioning set and at a collider whose descendants reach the
    conditioning set.
    """
    if j == t:
        return True
    conditioning = {t - 1}
    if j in conditioning:
        return False
    ancestors_of_z: set[int] = set()
    frontier = set(conditioning)
    while frontier:
        node = frontier.pop()
        ancestors_of_z.add(node)
        for i, k in graph.edges:
            if k == node and i not in ancestors_of_z:
                frontier.add(i)
    # States are (node, direction); direction "up" means we arrived from a
    # child (moving against the edge), "down" means we arrived from a parent.
    visited: set[tuple[int, str]] = set()
    stack: list[tuple[int, str]] = [(j, "up")]
    while stack:
        node, direction = stack.pop()
        if (node, direction) in visited:
            continue
        visited.add((node, direction))
        if node == t and node not in conditioning:
            return True
        if direction == "up" and node not in conditioning:
            for parent in graph.parents(node):
                stack.append((parent, "up"))
            for child in graph.children(node):
                stack.append((child, "down"))
        elif direction == "down":
            if node not in conditioning:
                for child in graph.children(node):
                    stack.append((child, "down"))
            if node in ancestors_of_z:  # collider open through conditioning
                for parent in graph.parents(node):
                    stack.append((parent, "up"))
    return False


# -- empirical check that rendering preserves graph CI structure --


def decode_value(world: SyntheticWorld, text: str) -> int:
    """Majority-vote topic decoding; -1 when no topic word is present."""
    counts = Counter()
    lookup = {w: v for v, words in world.topic_vocabulary.items() for w in words}
    for token in text.split():
        if token in lookup:
            counts[lookup[token]] += 1
    if not counts:
        return -1
    best = max(counts.values())
    return min(v for v, c in counts.items() if c == best)


def empirical_ci_check(
    samples: Sequence[Dialogue],
    j: int,
    t: int,
    world: SyntheticWorld,
    min_samples: int = 100,
) -> float:
    """Conditional mutual information of decoded (u_j, r_t) given u_{t-1}.

    Counting estimate with a Miller-Madow bias correction, in nats, clipped
    at zero.  Samples must come from one shared graph so the (j, t) roles
    mean the same thing in every dialogue.
    """
    if len(samples) < min_samples:
        raise InsufficientSamples(
            f"need at least {min_samples} samples, got {len(samples)}"
        )
    triples = []
    for dialogue in samples:
        utts = dialogue.utterances
        triples.append(
            (
                decode_value(world, utts[j].text),
                decode_value(world, utts[t].text),
                decode_value(world, utts[t - 1].text),
            )
        )
    n = len(triples)
    by_c: dict[int, Counter] = {}
    for a, b, c in triples:
        by_c.setdefault(c, Counter())[(a, b)] += 1
    cmi = 0.0
    bias = 0.0
    for c, joint in by_c.items():
        n_c = sum(joint.values())
        marg_a: Counter = Counter()
        marg_b: Counter = Counter()
        for (a, b), count in joint.items():
            marg_a[a] += count
            marg_b[b] += count
        slice_mi = 0.0
        for (a, b), count in joint.items():
            p_ab = count / n_c
            p_a = marg_a[a] / n_c
            p_b = marg_b[b] / n_c
            slice_mi += p_ab * math.log(p_ab / (p_a * p_b))
        cmi += (n_c / n) * slice_mi
        bias += (len(marg_a) - 1) * (len(marg_b) - 1) / (2.0 * n)
    return max(0.0, cmi - bias)


def candidate_pairs(graph: LatentGraph) -> list[tuple[int, int]]:
    """All (j, t) combinations the cause-identification procedure tests."""
    return [(j, t) for t in graph.response_nodes for j in range(t - 1)]
