"""Generator adapters: response generation behind a uniform contract.

A generator exposes ``generate(context, params) -> text`` and
``score_target(context, target) -> per-token negative log-likelihoods``.
Neural models attach over the subprocess wire protocol; two deterministic
in-repo generators make every pipeline and study runnable with no model:

  TemplateGenerator        echoes keywords of its conditioning text;
  CauseOnlyOracleGenerator built on a synthetic world, reads only utterances
                           it knows to be gold causes, so its output is
                           provably invariant to any edit of non-causes.

Wire protocol (newline-delimited JSON over stdio):

    {"op": "handshake"} -> {"name", "version", "max_context", "concurrent"}
    {"op": "generate", "context": str,
     "params": {"beam": int, "min_len": int, "ngram_block": int, "seed": int}}
                        -> {"text": str}
    {"op": "score", "context": str, "target": str} -> {"nll": [float, ...]}
    {"op": "shutdown"} -> {"ok": true}
"""

from __future__ import annotations

import json
import math
import subprocess
import sys
from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

from .errors import AdapterHandshakeError, GeneratorFailure
from .synth import SyntheticCorpus, SyntheticWorld, decode_value

TURN_SEPARATOR = "\n"


@dataclass(frozen=True)
class DecodeParams:
    beam: int = 5
    min_len: int = 0
    ngram_block: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "beam": self.beam,
            "min_len": self.min_len,
            "ngram_block": self.ngram_block,
            "seed": self.seed,
        }


# Decode presets: the plain width-5 search and the regularized variant
# (width 10, 3-gram blocking, minimum length 20).
DECODE_PRESETS = {
    "plain5": DecodeParams(beam=5),
    "reg10": DecodeParams(beam=10, min_len=20, ngram_block=3),
}


@runtime_checkable
class GeneratorAdapter(Protocol):
    name: str
    version: str
    max_context: int | None
    concurrent: bool

    def generate(self, context: str, params: DecodeParams) -> str: ...

    def score_target(self, context: str, target: str) -> list[float]: ...


@dataclass
class TemplateGenerator:
    """Deterministic keyword echo; output depends on every conditioning token."""

    name: str = "template-echo"
    version: str = "1"
    max_context: int | None = None
    concurrent: bool = True

    def generate(self, context: str, params: DecodeParams | None = None) -> str:
        params = params or DecodeParams()
        tokens = context.split()
        if not tokens:
            return ""
        unique: list[str] = []
        seen: set[str] = set()
        for tok in tokens:
            if tok not in seen:
                seen.add(tok)
                unique.append(tok)
        offset = params.seed % len(unique)
        length = min(len(unique), max(4, params.beam))
        picked = [unique[(offset + i) % len(unique)] for i in range(length)]
        while params.min_len and len(picked) < params.min_len:
            picked.append(unique[(offset + len(picked)) % len(unique)])
        return " ".join(picked)

    def score_target(self, context: str, target: str) -> list[float]:
        counts: dict[str, int] = {}
        for tok in context.split():
            counts[tok] = counts.get(tok, 0) + 1
        total = sum(counts.values())
        vocab = set(counts) | set(target.split())
        alpha = 0.5
        denom = total + alpha * max(1, len(vocab))
        return [
            -math.log((counts.get(tok, 0) + alpha) / denom) for tok in target.split()
        ]


@dataclass
class CauseOnlyOracleGenerator:
    """World-backed generator that reads only known gold-cause utterances.

    Conditioning lines are matched against the corpus's cause texts; the
    output is the sorted set of words of the matched lines, and scoring
    predicts the response topic from the matched lines' decoded values via
    the world's structural functions.  Every output is therefore an exact
    function of the cause utterances alone.
    """

    world: SyntheticWorld
    cause_texts: frozenset[str]
    smoothing: float = 0.05
    name: str = "cause-oracle"
    version: str = "1"
    max_context: int | None = None
    concurrent: bool = True

    @classmethod
    def from_corpus(cls, corpus: SyntheticCorpus) -> "CauseOnlyOracleGenerator":
        """Collect cause texts, refusing corpora where text-matching is ambiguous.

        Requires one annotated pair per dialogue and no text shared between a
        cause utterance and any non-cause utterance, so a conditioning line
        identifies its causal role.
        """
        by_dialogue: dict[str, list] = {}
        for pair in corpus.pairs:
            by_dialogue.setdefault(pair.dialogue_id, []).append(pair)
        for did, pairs in by_dialogue.items():
            if len(pairs) != 1:
                raise ValueError(
                    f"dialogue {did!r} has {len(pairs)} pairs; the oracle "
                    "generator needs exactly one so cause roles are unambiguous"
                )
        cause_texts: set[str] = set()
        noncause_texts: set[str] = set()
        dialogues = {d.id: d for d in corpus.dialogues}
        for pair in corpus.pairs:
            utts = dialogues[pair.dialogue_id].utterances
            for j in range(pair.t):
                text = utts[j].text
                if j in pair.cause_indices:
                    cause_texts.add(text)
                else:
                    noncause_texts.add(text)
        clash = cause_texts & noncause_texts
        if clash:
            raise ValueError(
                f"{len(clash)} texts appear as both cause and non-cause; "
                "regenerate the corpus with a different seed"
            )
        return cls(world=corpus.world, cause_texts=frozenset(cause_texts))

    def _cause_lines(self, context: str) -> list[str]:
        return [line for line in context.split(TURN_SEPARATOR) if line in self.cause_texts]

    def generate(self, context: str, params: DecodeParams | None = None) -> str:
        words: set[str] = set()
        for line in self._cause_lines(context):
            words.update(line.split())
        return " ".join(sorted(words))

    def _predicted_value(self, context: str) -> int | None:
        lines = self._cause_lines(context)
        if not lines:
            return None
        values = [decode_value(self.world, line) for line in lines]
        if any(v < 0 for v in values):
            return None
        funcs = self.world.functions()
        if len(values) >= 2:
            # Last cause line is the preceding utterance, the one before it
            # the extra cause.
            return funcs.f2(values[-2], values[-1])
        return funcs.f1(values[-1])


    def score_target(self, context: str, target: str) -> list[float]:
        predicted = self._predicted_value(context)
        global_size = len(self.world.global_vocabulary)
        nlls = []
        for token in target.split():
            if predicted is None:
                p = 1.0 / global_size
            elif token in self.world.topic_vocabulary[predicted]:
                p = (1.0 - self.smoothing) / len(self.world.topic_vocabulary[predicted])
            else:
                p = self.smoothing / global_size
            nlls.append(-math.log(p))
        return nlls


class SubprocessGeneratorAdapter:
    """Generator running in a child process speaking the JSON wire protocol."""

    def __init__(self, command: Sequence[str]):
        self._proc = subprocess.Popen(
            list(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        reply = self._request({"op": "handshake"})
        for field_name in ("name", "version"):
            if field_name not in reply:
                raise AdapterHandshakeError(f"handshake reply missing {field_name!r}")
        self.name = reply["name"]
        self.version = reply["version"]
        self.max_context = reply.get("max_context")
        self.concurrent = bool(reply.get("concurrent", False))

    def _request(self, payload: dict) -> dict:
        if self._proc.poll() is not None:
            raise AdapterHandshakeError("generator process exited")
        assert self._proc.stdin and self._proc.stdout
        self._proc.stdin.write(json.dumps(payload) + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise AdapterHandshakeError("generator process closed its stdout")
        reply = json.loads(line)
        if "error" in reply:
            raise GeneratorFailure(reply["error"])
        return reply

    def generate(self, context: str, params: DecodeParams | None = None) -> str:
        params = params or DecodeParams()
        reply = self._request(
            {"op": "generate", "context": context, "params": params.to_dict()}
        )
        return reply["text"]

    def score_target(self, context: str, target: str) -> list[float]:
        reply = self._request({"op": "score", "context": context, "target": target})
        return [float(x) for x in reply["nll"]]

    def close(self) -> None:
        try:
            if self._proc.poll() is None:
                self._request({"op": "shutdown"})
        except Exception:
            pass
        finally:
            self._proc.terminate()
            self._proc.wait(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve_generator(generator, stdin=None, stdout=None) -> None:
    """Serve an in-process generator over the wire protocol (blocking)."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
            op = request.get("op")
            if op == "handshake":
                reply = {
                    "name": generator.name,
                    "version": generator.version,
                    "max_context": generator.max_context,
                    "concurrent": False,
                }
            elif op == "generate":
                params = DecodeParams(**request.get("params", {}))
                reply = {"text": generator.generate(request["context"], params)}
            elif op == "score":
                reply = {"nll": generator.score_target(request["context"], request["target"])}
            elif op == "shutdown":
                stdout.write(json.dumps({"ok": True}) + "\n")
                stdout.flush()
                return
            else:
                reply = {"error": f"unknown op {op!r}"}
        except Exception as exc:
            reply = {"error": str(exc)}
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()


def build_generator(spec: str):
    """Registry lookup: 'tmpl' for the template echo, else an executable path."""
    if spec in ("tmpl", "template", "template-echo"):
        return TemplateGenerator()
    return SubprocessGeneratorAdapter([spec])


def main(argv=None) -> None:
    """Serve the template generator on stdio: python -m dialcause.generators"""
    import argparse

    parser = argparse.ArgumentParser(description="serve the template generator over stdio")
    parser.parse_args(argv)
    serve_generator(TemplateGenerator())


if __name__ == "__main__":
    main()
