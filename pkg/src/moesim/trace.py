"""Routing traces: ingestion, synthetic generation, and reuse statistics.

A trace is stored densely as an ``(T, L, K)`` integer array of selected
expert ids, token-major then layer order. ``RoutingRecord`` objects are
produced on demand for callers that want per-record access.
"""

from __future__ import annotations

import gzip
import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import IO, Iterator

import numpy as np

from .core import ModelSpec

TRACE_SCHEMA = "moesim.trace/1"


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class RoutingRecord:
    token_index: int
    layer_index: int
    experts: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class RoutingTrace:
    model_name: str
    experts_per_layer: int
    experts: np.ndarray  # (tokens, layers, top_k)

    def __post_init__(self):
        arr = np.asarray(self.experts)
        if arr.ndim != 3:
            raise TraceError(f"expert array must be 3-D (tokens, layers, k), got {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() >= self.experts_per_layer):
            raise TraceError("expert id out of range")
        if arr.shape[2] > 1 and (np.diff(np.sort(arr, axis=-1), axis=-1) == 0).any():
            raise TraceError("duplicate expert within a record")
        arr = arr.astype(np.int32, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "experts", arr)

    @property
    def num_tokens(self) -> int:
        return self.experts.shape[0]

    @property
    def num_layers(self) -> int:
        return self.experts.shape[1]

    @property
    def top_k(self) -> int:
        return self.experts.shape[2]

    def records(self) -> Iterator[RoutingRecord]:
        for t in range(self.num_tokens):
            for layer in range(self.num_layers):
                yield RoutingRecord(t, layer, tuple(int(e) for e in self.experts[t, layer]))

    def __len__(self) -> int:
        return self.num_tokens * self.num_layers

    def __eq__(self, other):
        if not isinstance(other, RoutingTrace):
            return NotImplemented
        return (
            self.model_name == other.model_name
            and self.experts_per_layer == other.experts_per_layer
            and np.array_equal(self.experts, other.experts)
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.model_name}|{self.experts_per_layer}|{self.experts.shape}".encode())
        h.update(self.experts.tobytes())
        return h.hexdigest()[:16]

    def check_model(self, model: ModelSpec) -> None:
        if self.num_layers != model.num_layers:
            raise TraceError(
                f"trace has {self.num_layers} layers, model {model.name} has {model.num_layers}"
            )
        if self.top_k != model.top_k:
            raise TraceError(f"trace has k={self.top_k}, model has k={model.top_k}")
        if self.experts_per_layer != model.experts_per_layer:
            raise TraceError(
                f"trace has {self.experts_per_layer} experts/layer, "
                f"model has {model.experts_per_layer}"
            )


@dataclass(frozen=True)
class SynthParams:
    p_token_reuse: float
    p_layer_follow: float
    seed: int
    tokens: int

    def __post_init__(self):
        for key in ("p_token_reuse", "p_layer_follow"):
            p = getattr(self, key)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{key} must be in [0, 1], got {p}")
        if self.tokens < 1:
            raise ValueError(f"tokens must be >= 1, got {self.tokens}")


@dataclass(frozen=True)
class PatternReport:
    consecutive_layer_match_rate: float
    at_least_one_token_reuse_rate_per_layer: list[float]
    both_token_reuse_rate_per_layer: list[float]
    persistence_2_rate: float
    persistence_3plus_rate: float

    def to_dict(self) -> dict:
        return asdict(self)


def _open_text(path: Path, mode: str) -> IO[str]:
    if path.suffix == ".gz":
        if "w" in mode:
            # mtime=0 and no embedded filename keep output byte-reproducible
            raw = open(path, "wb")
            gz = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
            return _ClosingTextWrapper(gz, raw)
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, mode, encoding="utf-8")


class _ClosingTextWrapper(io.TextIOWrapper):
    def __init__(self, gz: gzip.GzipFile, raw: IO[bytes]):
        super().__init__(gz, encoding="utf-8", newline="\n")
        self._raw = raw

    def close(self):
        super().close()
        self._raw.close()


def write_trace(path: str | Path, trace: RoutingTrace) -> None:
    path = Path(path)
    header = {
        "schema": TRACE_SCHEMA,
        "model": trace.model_name,
        "layers": trace.num_layers,
        "experts": trace.experts_per_layer,
        "k": trace.top_k,
    }
    with _open_text(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        arr = trace.experts
        for t in range(trace.num_tokens):
            f.write(
                "".join(
                    '{"t": %d, "l": %d, "e": [%s]}\n' % (t, layer, ", ".join(map(str, row)))
                    for layer, row in enumerate(arr[t].tolist())
                )
            )


def parse_trace(path: str | Path, model: ModelSpec) -> RoutingTrace:
    """Read and fully validate a JSONL routing trace against ``model``."""
    path = Path(path)
    n, k, num_layers = model.experts_per_layer, model.top_k, model.num_layers
    seen: dict[tuple[int, int], list[int]] = {}
    model_name = model.name
    with _open_text(path, "r") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"line {lineno}: invalid JSON ({exc})") from None
            if "t" not in obj:
                if "layers" not in obj:
                    raise TraceError(f"line {lineno}: neither a record nor a header")
                if (obj.get("layers"), obj.get("experts"), obj.get("k")) != (num_layers, n, k):
                    raise TraceError(
                        f"header (layers={obj.get('layers')}, experts={obj.get('experts')}, "
                        f"k={obj.get('k')}) does not match model {model.name}"
                    )
                model_name = obj.get("model", model_name)
                continue
            try:
                t, layer, experts = int(obj["t"]), int(obj["l"]), [int(e) for e in obj["e"]]
            except (KeyError, TypeError, ValueError):
                raise TraceError(f"line {lineno}: record needs integer t, l and list e") from None
            if t < 0 or not 0 <= layer < num_layers:
                raise TraceError(f"line {lineno}: (t={t}, l={layer}) out of range")
            if len(experts) != k:
                raise TraceError(f"line {lineno}: expected {k} experts, got {len(experts)}")
            if len(set(experts)) != k:
                raise TraceError(f"line {lineno}: duplicate expert in {experts}")
            bad = [e for e in experts if not 0 <= e < n]
            if bad:
                raise TraceError(f"line {lineno}: expert id {bad[0]} out of range [0, {n})")
            if (t, layer) in seen:
                raise TraceError(f"line {lineno}: duplicate record for (t={t}, l={layer})")
            seen[(t, layer)] = experts
    if not seen:
        raise TraceError("trace contains no records")
    num_tokens = max(t for t, _ in seen) + 1
    arr = np.empty((num_tokens, num_layers, k), dtype=np.int32)
    for t in range(num_tokens):
        for layer in range(num_layers):
            try:
                arr[t, layer] = seen[(t, layer)]
            except KeyError:
                raise TraceError(f"missing record for (t={t}, l={layer})") from None
    return RoutingTrace(model_name, n, arr)


def generate_trace(model: ModelSpec, params: SynthParams) -> RoutingTrace:
    """Synthesize a trace with tunable token-to-token and layer-to-layer reuse.

    Each of the K slots of a (token, layer) record first tries to repeat one
    of that layer's experts from the previous token (``p_token_reuse``),
    then one of the previous layer's experts for the same token
    (``p_layer_follow``), and otherwise draws uniformly among experts not
    yet selected for the record.
    """
    n, k, num_layers, num_tokens = (
        model.experts_per_layer,
        model.top_k,
        model.num_layers,
        params.tokens,
    )
    rng = np.random.default_rng(params.seed)
    out = np.empty((num_tokens, num_layers, k), dtype=np.int32)
    p_tok, p_lay = params.p_token_reuse, params.p_layer_follow
    all_experts = list(range(n))
    prev_token: list[list[int]] | None = None

    for t in range(num_tokens):
        u = rng.random((num_layers, k, 3)).tolist()
        current: list[list[int]] = []
        prev_layer: list[int] | None = None
        for layer in range(num_layers):
            chosen: list[int] = []
            for slot in range(k):
                u_tok, u_lay, u_pick = u[layer][slot]
                source = None
                if prev_token is not None and u_tok < p_tok:
                    source = prev_token[layer]
                elif prev_layer is not None and u_lay < p_lay:
                    source = prev_layer
                pool = None
                if source is not None:
                    pool = [e for e in source if e not in chosen]
                if not pool:
                    pool = [e for e in all_experts if e not in chosen]
                chosen.append(pool[int(u_pick * len(pool))])
            current.append(chosen)
            prev_layer = chosen
        out[t] = current
        prev_token = current
    return RoutingTrace(model.name, n, out)


def _one_hot(trace: RoutingTrace) -> np.ndarray:
    t, layers, _ = trace.experts.shape
    oh = np.zeros((t, layers, trace.experts_per_layer), dtype=bool)
    ti, li, _ = np.indices(trace.experts.shape)
    oh[ti, li, trace.experts] = True
    return oh


def analyze_patterns(trace: RoutingTrace) -> PatternReport:
    """Measure the consecutive-layer and consecutive-token reuse statistics.

    ``persistence_2_rate`` is, among (token, layer) records that repeat at
    least one expert from the previous token, the fraction where some expert
    was also selected two tokens back; ``persistence_3plus_rate`` extends
    the chain to three tokens back. Records too early in the trace to have
    that history are left out of the denominator.
    """
    if trace.num_tokens < 2:
        raise TraceError("pattern analysis needs at least 2 tokens")
    if trace.num_layers < 2:
        raise TraceError("pattern analysis needs at least 2 layers")
    oh = _one_hot(trace)
    k = trace.top_k

    layer_match = (oh[:, 1:] & oh[:, :-1]).any(-1)
    tok_common = oh[1:] & oh[:-1]  # common[t-1] = S_t ∩ S_{t-1}
    tok_count = tok_common.sum(-1)
    at_least_one = (tok_count >= 1).mean(0)
    both = (tok_count >= k).mean(0)

    def persistence(depth: int) -> float:
        if trace.num_tokens <= depth:
            return 0.0
        chain = oh[depth:].copy()
        for back in range(1, depth + 1):
            chain &= oh[depth - back : trace.num_tokens - back]
        repeated = tok_count[depth - 1 :]
        mask = repeated >= 1
        if not mask.any():
            return 0.0
        return float(chain.any(-1)[mask].mean())

    return PatternReport(
        consecutive_layer_match_rate=float(layer_match.mean()),
        at_least_one_token_reuse_rate_per_layer=[float(x) for x in at_least_one],
        both_token_reuse_rate_per_layer=[float(x) for x in both],
        persistence_2_rate=persistence(2),
        persistence_3plus_rate=persistence(3),
    )
