"""Static domain description: model architecture, hardware, calibrated costs.

Everything here is immutable after construction and safe to share between
concurrent simulation runs. Costs are table-driven; nothing is derived from
FLOP counts or link bandwidth.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

logger = logging.getLogger(__name__)

GiB = 2**30
MiB = 2**20

CONFIG_SCHEMA = "moesim.config/1"


class ConfigError(ValueError):
    """Invalid configuration. ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    num_layers: int
    experts_per_layer: int
    top_k: int
    bytes_per_expert: int
    # attention + router + norms + KV budget, permanently on the GPU
    resident_bytes: int

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("model.num_layers", f"must be >= 1, got {self.num_layers}")
        if self.experts_per_layer < 1:
            raise ConfigError(
                "model.experts_per_layer", f"must be >= 1, got {self.experts_per_layer}"
            )
        if not 1 <= self.top_k <= self.experts_per_layer:
            raise ConfigError(
                "model.top_k",
                f"must satisfy 1 <= top_k <= experts_per_layer, got {self.top_k}",
            )
        if self.bytes_per_expert <= 0:
            raise ConfigError("model.bytes_per_expert", "must be > 0")
        if self.resident_bytes < 0:
            raise ConfigError("model.resident_bytes", "must be >= 0")


@dataclass(frozen=True)
class HardwareSpec:
    gpu_memory_bytes: int
    cpu_thread_options: tuple[int, ...]
    weight_channel_count: int = 1
    activation_channel_count: int = 1
    # CUDA context and allocator slack; unavailable to the expert cache
    reserved_bytes: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cpu_thread_options", tuple(self.cpu_thread_options))
        if self.gpu_memory_bytes <= 0:
            raise ConfigError("hardware.gpu_memory_bytes", "must be > 0")
        if self.reserved_bytes < 0:
            raise ConfigError("hardware.reserved_bytes", "must be >= 0")
        if not self.cpu_thread_options or any(t < 1 for t in self.cpu_thread_options):
            raise ConfigError("hardware.cpu_thread_options", "need at least one count >= 1")
        if self.weight_channel_count < 1:
            raise ConfigError("hardware.weight_channel_count", "must be >= 1")
        if self.activation_channel_count < 1:
            raise ConfigError("hardware.activation_channel_count", "must be >= 1")

    @property
    def usable_bytes(self) -> int:
        return self.gpu_memory_bytes - self.reserved_bytes


@dataclass(frozen=True)
class CostModel:
    """Per-MoE-layer timings for the K selected experts, plus power draw.

    Per-expert costs are the layer figure divided by K; partial hits and
    single-expert fetches are priced that way.
    """

    t_gpu_moe_layer_ms: float
    t_cpu_moe_layer_ms: Mapping[int, float]
    t_act_roundtrip_ms: float
    t_weight_moe_layer_ms: float
    p_cpu_watts: Mapping[int, float]
    p_gpu_watts: Mapping[int, float]
    t_other_layer_ms: float = 0.5

    def __post_init__(self):
        for key in ("t_gpu_moe_layer_ms", "t_act_roundtrip_ms", "t_weight_moe_layer_ms"):
            value = getattr(self, key)
            if not value > 0:
                raise ConfigError(f"costs.{key}", f"duration must be > 0, got {value}")
        if self.t_other_layer_ms < 0:
            raise ConfigError("costs.t_other_layer_ms", "must be >= 0")
        for key in ("t_cpu_moe_layer_ms", "p_cpu_watts", "p_gpu_watts"):
            table = {int(k): float(v) for k, v in getattr(self, key).items()}
            if not table:
                raise ConfigError(f"costs.{key}", "empty table")
            for threads, value in table.items():
                if threads < 1:
                    raise ConfigError(f"costs.{key}.{threads}", "thread count must be >= 1")
                if not value > 0:
                    raise ConfigError(f"costs.{key}.{threads}", f"must be > 0, got {value}")
            object.__setattr__(self, key, dict(sorted(table.items())))

    def check_threads(self, threads: int) -> None:
        for key in ("t_cpu_moe_layer_ms", "p_cpu_watts", "p_gpu_watts"):
            if threads not in getattr(self, key):
                raise ConfigError(f"costs.{key}.{threads}", "no entry for this thread count")

    def t_cpu(self, threads: int) -> float:
        try:
            return self.t_cpu_moe_layer_ms[threads]
        except KeyError:
            raise ConfigError(
                f"costs.t_cpu_moe_layer_ms.{threads}", "no entry for this thread count"
            ) from None

    def with_updates(self, **changes: Any) -> "CostModel":
        fields_ = {
            "t_gpu_moe_layer_ms": self.t_gpu_moe_layer_ms,
            "t_cpu_moe_layer_ms": self.t_cpu_moe_layer_ms,
            "t_act_roundtrip_ms": self.t_act_roundtrip_ms,
            "t_weight_moe_layer_ms": self.t_weight_moe_layer_ms,
            "p_cpu_watts": self.p_cpu_watts,
            "p_gpu_watts": self.p_gpu_watts,
            "t_other_layer_ms": self.t_other_layer_ms,
        }
        fields_.update(changes)
        return CostModel(**fields_)


@dataclass(frozen=True)
class CacheGeometry:
    total_slots: int
    ways: int
    indexes: int
    # min(indexes, num_layers): sets actually backed by a layer
    covered_layers: int

    @classmethod
    def from_slots(cls, slots: int, ways: int, num_layers: int) -> "CacheGeometry":
        if ways < 1:
            raise ValueError(f"ways must be >= 1, got {ways}")
        indexes = slots // ways
        return cls(slots, ways, indexes, min(indexes, num_layers))

    @property
    def has_cache(self) -> bool:
        return self.covered_layers > 0


def derive_cache_geometry(model: ModelSpec, hw: HardwareSpec, ways: int) -> CacheGeometry:
    """Split the GPU memory left after resident weights into expert slots.

    ``S = floor(available / bytes_per_expert)`` and ``N = floor(S / ways)``.
    The raw ``N`` is kept in ``indexes``; ``covered_layers`` clamps it to
    the layer count since sets map one-to-one onto layers.
    """
    if ways < 1:
        raise ValueError(f"ways must be >= 1, got {ways}")
    available = hw.usable_bytes - model.resident_bytes
    if available <= 0:
        logger.warning(
            "no GPU memory left for the expert cache (usable %d B, resident %d B)",
            hw.usable_bytes,
            model.resident_bytes,
        )
        available = 0
    slots = available // model.bytes_per_expert
    if slots == 0:
        logger.warning("expert cache has zero slots for model %s", model.name)
    return CacheGeometry.from_slots(slots, ways, model.num_layers)


def zero_geometry(ways: int = 1) -> CacheGeometry:
    return CacheGeometry(total_slots=0, ways=ways, indexes=0, covered_layers=0)


_THREADS = (1, 2, 4, 8, 16, 24)

# t_other_layer_ms in the presets is fitted (see metrics.calibrate_t_other) so
# the best 24-thread cache configuration on a p_token_reuse=0.45 synthetic
# trace reaches the reported peak decode rate: 4.8 tok/s Mixtral, 10.4 Phi3.5.

RTX4090 = HardwareSpec(
    gpu_memory_bytes=24 * GiB,
    cpu_thread_options=_THREADS,
    weight_channel_count=1,
    activation_channel_count=1,
    reserved_bytes=256 * MiB,
)

PRESETS: dict[str, tuple[ModelSpec, HardwareSpec, CostModel]] = {
    "mixtral-8x7b": (
        ModelSpec(
            name="mixtral-8x7b",
            num_layers=32,
            experts_per_layer=8,
            top_k=2,
            bytes_per_expert=340 * MiB,
            resident_bytes=5 * GiB,
        ),
        RTX4090,
        CostModel(
            t_gpu_moe_layer_ms=0.25,
            t_cpu_moe_layer_ms=dict(zip(_THREADS, (44.12, 25.53, 18.34, 15.76, 10.96, 7.34))),
            t_act_roundtrip_ms=0.11,
            t_weight_moe_layer_ms=28.02,
            p_cpu_watts=dict(zip(_THREADS, (86.1, 91.7, 100.3, 111.0, 133.4, 147.5))),
            p_gpu_watts=dict(zip(_THREADS, (91.6, 92.8, 101.0, 103.4, 99.6, 97.9))),
            t_other_layer_ms=1.3,
        ),
    ),
    "phi3.5-moe": (
        ModelSpec(
            name="phi3.5-moe",
            num_layers=32,
            experts_per_layer=16,
            top_k=2,
            bytes_per_expert=152 * MiB,
            resident_bytes=5 * GiB,
        ),
        RTX4090,
        CostModel(
            t_gpu_moe_layer_ms=0.11,
            t_cpu_moe_layer_ms=dict(zip(_THREADS, (22.73, 12.80, 8.58, 6.39, 3.92, 3.36))),
            t_act_roundtrip_ms=0.11,
            t_weight_moe_layer_ms=12.26,
            p_cpu_watts=dict(zip(_THREADS, (84.4, 88.4, 92.0, 98.4, 110.1, 118.3))),
            p_gpu_watts=dict(zip(_THREADS, (97.4, 100.7, 105.9, 109.2, 106.0, 109.2))),
            t_other_layer_ms=0.66,
        ),
    ),
}


def load_preset(name: str) -> tuple[ModelSpec, HardwareSpec, CostModel]:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError("preset", f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None


def config_to_dict(model: ModelSpec, hw: HardwareSpec, costs: CostModel) -> dict:
    def table(m: Mapping[int, float]) -> dict[str, float]:
        return {str(k): v for k, v in m.items()}

    return {
        "schema": CONFIG_SCHEMA,
        "model": {
            "name": model.name,
            "num_layers": model.num_layers,
            "experts_per_layer": model.experts_per_layer,
            "top_k": model.top_k,
            "bytes_per_expert": model.bytes_per_expert,
            "resident_bytes": model.resident_bytes,
        },
        "hardware": {
            "gpu_memory_bytes": hw.gpu_memory_bytes,
            "reserved_bytes": hw.reserved_bytes,
            "cpu_thread_options": list(hw.cpu_thread_options),
            "weight_channel_count": hw.weight_channel_count,
            "activation_channel_count": hw.activation_channel_count,
        },
        "costs": {
            "t_gpu_moe_layer_ms": costs.t_gpu_moe_layer_ms,
            "t_cpu_moe_layer_ms": table(costs.t_cpu_moe_layer_ms),
            "t_act_roundtrip_ms": costs.t_act_roundtrip_ms,
            "t_weight_moe_layer_ms": costs.t_weight_moe_layer_ms,
            "t_other_layer_ms": costs.t_other_layer_ms,
            "p_cpu_watts": table(costs.p_cpu_watts),
            "p_gpu_watts": table(costs.p_gpu_watts),
        },
    }


def _require(section: Mapping[str, Any], prefix: str, key: str) -> Any:
    if key not in section:
        raise ConfigError(f"{prefix}.{key}", "missing field")
    return section[key]


def _int_table(raw: Any, key: str) -> dict[int, float]:
    if not isinstance(raw, Mapping):
        raise ConfigError(key, "expected an object mapping thread count to value")
    out = {}
    for k, v in raw.items():
        try:
            out[int(k)] = float(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}.{k}", "non-numeric entry") from None
    return out


def config_from_dict(doc: Mapping[str, Any]) -> tuple[ModelSpec, HardwareSpec, CostModel]:
    schema = doc.get("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        raise ConfigError("schema", f"unsupported schema {schema!r}")
    m = _require(doc, "config", "model")
    h = _require(doc, "config", "hardware")
    c = _require(doc, "config", "costs")

    model = ModelSpec(
        name=str(_require(m, "model", "name")),
        num_layers=int(_require(m, "model", "num_layers")),
        experts_per_layer=int(_require(m, "model", "experts_per_layer")),
        top_k=int(_require(m, "model", "top_k")),
        bytes_per_expert=int(_require(m, "model", "bytes_per_expert")),
        resident_bytes=int(_require(m, "model", "resident_bytes")),
    )
    hw = HardwareSpec(
        gpu_memory_bytes=int(_require(h, "hardware", "gpu_memory_bytes")),
        cpu_thread_options=tuple(int(t) for t in _require(h, "hardware", "cpu_thread_options")),
        weight_channel_count=int(h.get("weight_channel_count", 1)),
        activation_channel_count=int(h.get("activation_channel_count", 1)),
        reserved_bytes=int(h.get("reserved_bytes", 0)),
    )
    costs = CostModel(
        t_gpu_moe_layer_ms=float(_require(c, "costs", "t_gpu_moe_layer_ms")),
        t_cpu_moe_layer_ms=_int_table(
            _require(c, "costs", "t_cpu_moe_layer_ms"), "costs.t_cpu_moe_layer_ms"
        ),
        t_act_roundtrip_ms=float(_require(c, "costs", "t_act_roundtrip_ms")),
        t_weight_moe_layer_ms=float(_require(c, "costs", "t_weight_moe_layer_ms")),
        t_other_layer_ms=float(c.get("t_other_layer_ms", 0.5)),
        p_cpu_watts=_int_table(_require(c, "costs", "p_cpu_watts"), "costs.p_cpu_watts"),
        p_gpu_watts=_int_table(_require(c, "costs", "p_gpu_watts"), "costs.p_gpu_watts"),
    )
    for threads in hw.cpu_thread_options:
        costs.check_threads(threads)
    return model, hw, costs


def load_config(path: str | Path) -> tuple[ModelSpec, HardwareSpec, CostModel]:
    """Load a JSON config file, or a built-in preset when ``path`` names one."""
    if str(path) in PRESETS and not Path(path).exists():
        return load_preset(str(path))
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"not valid JSON: {exc}") from None
    if not isinstance(doc, Mapping):
        raise ConfigError("config", "top level must be an object")
    return config_from_dict(doc)


def save_config(path: str | Path, model: ModelSpec, hw: HardwareSpec, costs: CostModel) -> None:
    Path(path).write_text(json.dumps(config_to_dict(model, hw, costs), indent=2) + "\n")


def derive_seed(seed: int, component: str) -> int:
    """Fixed per-component fan-out of the single user seed."""
    tag = zlib.crc32(component.encode())
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])
