"""Encoder adapters: the in-repo hashed-feature encoder and the wire protocol.

An encoder maps one input string to a sequence of fixed-dimension vectors.
The classifier mean-pools that sequence, so any interaction between the input
segments (response, preceding utterance, candidate utterance) must already be
present in the per-vector features.  Transformer encoders get this from
attention; the in-repo reference encoder gets it from explicit cross-segment
conjunction features hashed into signed one-hot embeddings.  That keeps the
trainable surface a single linear head (convex), while the pooled dot product
can be computed sparsely from feature indices.

External encoders attach over newline-delimited JSON on a subprocess's stdio:

    {"op": "handshake"}                -> {"name": .., "version": .., "dim": ..,
                                           "max_context": .., "concurrent": bool}
    {"op": "encode", "text": str}      -> {"vectors": [[f, ...], ...]}
    {"op": "shutdown"}                 -> {"ok": true}

Errors come back as {"error": str}.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
import sys
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import AdapterHandshakeError, EncoderFailure

DEFAULT_SEPARATOR = "</s>"


def join_segments(segments: Sequence[str], separator: str = DEFAULT_SEPARATOR) -> str:
    """Join text segments with the separator (single spaces when empty)."""
    glue = f" {separator} " if separator else " "
    return glue.join(segments)


def split_segments(text: str, separator: str = DEFAULT_SEPARATOR) -> list[str]:
    if not separator:
        return [text]
    return [part.strip() for part in text.split(separator)]


@runtime_checkable
class EncoderAdapter(Protocol):
    name: str
    version: str
    dim: int
    concurrent: bool

    def encode(self, text: str) -> np.ndarray: ...

    def pooled(self, text: str) -> np.ndarray: ...


def _stable_hash(token: str, seed: int) -> int:
    digest = hashlib.blake2b(
        token.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")
    ).digest()
    return int.from_bytes(digest, "little")


@dataclass
class HashedInteractionEncoder:
    """Segment-tagged unigrams plus cross-segment pair and triple conjunctions.

    Each derived feature token is embedded as a signed one-hot basis vector
    (hashing trick), so the mean-pooled representation is a normalized sparse
    count vector and a linear head over it is a linear model over the
    features.  Deterministic given (dim, seed, separator).
    """

    dim: int = 524288
    seed: int = 0
    separator: str = DEFAULT_SEPARATOR
    use_unigrams: bool = True
    use_pairs: bool = True
    use_triples: bool = True
    pair_segments: tuple[tuple[int, int], ...] | None = None  # None = all pairs
    name: str = "hashed-interaction"
    version: str = "1"
    concurrent: bool = True

    def config(self) -> dict:
        return {
            "dim": self.dim,
            "seed": self.seed,
            "separator": self.separator,
            "use_unigrams": self.use_unigrams,
            "use_pairs": self.use_pairs,
            "use_triples": self.use_triples,
            "pair_segments": (
                [list(p) for p in self.pair_segments]
                if self.pair_segments is not None
                else None
            ),
        }

    def __post_init__(self):
        if self.pair_segments is not None:
            self.pair_segments = tuple(tuple(p) for p in self.pair_segments)

    def features(self, text: str) -> list[str]:
        segments = split_segments(text, self.separator)
        tokens = [seg.split() for seg in segments]
        feats: list[str] = []
        if self.use_unigrams:
            for si, seg_tokens in enumerate(tokens):
                for tok in seg_tokens:
                    feats.append(f"u{si}:{tok}")
        if self.use_pairs:
            crossings = self.pair_segments
            if crossings is None:
                crossings = tuple(
                    (si, sj)
                    for si in range(len(tokens))
                    for sj in range(si + 1, len(tokens))
                )
            for si, sj in crossings:
                if sj >= len(tokens):
                    continue
                for a in tokens[si]:
                    for b in tokens[sj]:
                        feats.append(f"p{si}{sj}:{a}|{b}")
        if self.use_triples and len(tokens) >= 3:
            for a in tokens[0]:
                for b in tokens[1]:
                    for c in tokens[2]:
                        feats.append(f"t:{a}|{b}|{c}")
        return feats

    def sparse_features(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        """(bucket indices, signs) for each derived feature token."""
        feats = self.features(text)
        if not feats:
            raise EncoderFailure(f"no features derived from {text!r}")
        indices = np.empty(len(feats), dtype=np.int64)
        signs = np.empty(len(feats), dtype=np.float64)
        for i, feat in enumerate(feats):
            h = _stable_hash(feat, self.seed)
            indices[i] = h % self.dim
            signs[i] = 1.0 if (h >> 63) & 1 == 0 else -1.0
        return indices, signs

    def encode(self, text: str) -> np.ndarray:
        indices, signs = self.sparse_features(text)
        vectors = np.zeros((len(indices), self.dim))
        vectors[np.arange(len(indices)), indices] = signs
        return vectors

    def pooled(self, text: str) -> np.ndarray:
        indices, signs = self.sparse_features(text)
        out = np.zeros(self.dim)
        np.add.at(out, indices, signs / len(indices))
        return out


class SubprocessEncoderAdapter:
    """Encoder running in a child process speaking the JSON wire protocol."""

    def __init__(self, command: Sequence[str]):
        self._proc = subprocess.Popen(
            list(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        reply = self._request({"op": "handshake"})
        for field in ("name", "version", "dim"):
            if field not in reply:
                raise AdapterHandshakeError(f"handshake reply missing {field!r}: {reply}")
        self.name = reply["name"]
        self.version = reply["version"]
        self.dim = int(reply["dim"])
        self.max_context = reply.get("max_context")
        self.concurrent = bool(reply.get("concurrent", False))

    def _request(self, payload: dict) -> dict:
        if self._proc.poll() is not None:
            raise AdapterHandshakeError("encoder process exited")
        assert self._proc.stdin and self._proc.stdout
        self._proc.stdin.write(json.dumps(payload) + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise AdapterHandshakeError("encoder process closed its stdout")
        reply = json.loads(line)
        if "error" in reply:
            raise EncoderFailure(reply["error"])
        return reply

    def encode(self, text: str) -> np.ndarray:
        reply = self._request({"op": "encode", "text": text})
        vectors = np.asarray(reply["vectors"], dtype=float)
        if vectors.ndim != 2 or vectors.shape[1] != self.dim:
            raise EncoderFailure(f"bad vector shape {vectors.shape} for dim {self.dim}")
        return vectors

    def pooled(self, text: str) -> np.ndarray:
        return self.encode(text).mean(axis=0)

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


def serve_encoder(encoder, stdin=None, stdout=None) -> None:
    """Serve an in-process encoder over the wire protocol (blocking)."""
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
                    "name": encoder.name,
                    "version": encoder.version,
                    "dim": encoder.dim,
                    "max_context": None,
                    "concurrent": False,
                }
            elif op == "encode":
                vectors = encoder.encode(request["text"])
                reply = {"vectors": vectors.tolist()}
            elif op == "shutdown":
                stdout.write(json.dumps({"ok": True}) + "\n")
                stdout.flush()
                return
            else:
                reply = {"error": f"unknown op {op!r}"}
        except Exception as exc:  # report, keep serving
            reply = {"error": str(exc)}
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()


def build_encoder(spec: str | dict) -> HashedInteractionEncoder | SubprocessEncoderAdapter:
    """Registry lookup: 'hashed' (with optional config) or an executable path."""
    if isinstance(spec, dict):
        kind = spec.get("kind", "hashed")
        if kind == "hashed":
            return HashedInteractionEncoder(
                **{k: v for k, v in spec.items() if k != "kind"}
            )
        if kind == "subprocess":
            return SubprocessEncoderAdapter(spec["command"])
        raise ValueError(f"unknown encoder kind {kind!r}")
    if spec == "hashed":
        return HashedInteractionEncoder()
    return SubprocessEncoderAdapter([spec])


def main(argv=None) -> None:
    """Serve the reference encoder on stdio: python -m dialcause.encoders"""
    import argparse

    parser = argparse.ArgumentParser(description="serve the hashed encoder over stdio")
    parser.add_argument("--dim", type=int, default=65536)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--separator", default=DEFAULT_SEPARATOR)
    args = parser.parse_args(argv)
    serve_encoder(
        HashedInteractionEncoder(dim=args.dim, seed=args.seed, separator=args.separator)
    )


if __name__ == "__main__":
    main()
