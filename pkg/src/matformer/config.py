"""Model shape configuration: granularities, model dims and per-layer choices."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

from matformer.errors import ConfigError

BYTE_VOCAB = 259  # 256 bytes + BOS/EOS/PAD


@dataclass(frozen=True)
class GranularitySpec:
    """The nested widths ``m_1 < ... < m_g`` used by every block.

    Attributes:
        ffn_widths: FFN hidden-neuron counts per granularity.
        head_counts: Optional attention-head counts per granularity. ``None``
            means attention is shared in full by every granularity.
    """

    ffn_widths: tuple[int, ...]
    head_counts: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "ffn_widths", tuple(int(m) for m in self.ffn_widths))
        if self.head_counts is not None:
            object.__setattr__(self, "head_counts", tuple(int(h) for h in self.head_counts))
        if not self.ffn_widths:
            raise ConfigError("at least one granularity is required")
        if self.ffn_widths[0] < 1 or any(b <= a for a, b in zip(self.ffn_widths, self.ffn_widths[1:])):
            raise ConfigError(f"ffn_widths must be positive and strictly increasing, got {self.ffn_widths}")
        if self.head_counts is not None:
            if len(self.head_counts) != len(self.ffn_widths):
                raise ConfigError("head_counts and ffn_widths must have the same length")
            if self.head_counts[0] < 1 or any(b <= a for a, b in zip(self.head_counts, self.head_counts[1:])):
                raise ConfigError(f"head_counts must be positive and strictly increasing, got {self.head_counts}")

    @property
    def g(self) -> int:
        return len(self.ffn_widths)

    @property
    def nests_heads(self) -> bool:
        return self.head_counts is not None

    @classmethod
    def exponential(cls, d_ff: int, g: int = 4, head_counts: Sequence[int] | None = None) -> GranularitySpec:
        """Widths ``d_ff / 2**(g-i)`` for ``i = 1..g``; g=4 gives d_ff/8, /4, /2, 1."""
        widths = []
        for i in range(1, g + 1):
            m, rem = divmod(d_ff, 2 ** (g - i))
            if rem or m < 1:
                raise ConfigError(f"d_ff={d_ff} is not divisible into {g} halving granularities")
            widths.append(m)
        return cls(tuple(widths), None if head_counts is None else tuple(head_counts))

    def width(self, gran: int) -> int:
        self.check(gran)
        return self.ffn_widths[gran - 1]

    def heads(self, gran: int, n_heads: int) -> int:
        self.check(gran)
        return n_heads if self.head_counts is None else self.head_counts[gran - 1]

    def check(self, gran: int) -> None:
        if not 1 <= gran <= self.g:
            raise ConfigError(f"granularity index {gran} outside [1, {self.g}]")


@dataclass(frozen=True)
class LayerConfig:
    """One Mix'n'Match submodel: a 1-based granularity index per layer."""

    per_layer: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "per_layer", tuple(int(i) for i in self.per_layer))
        if not self.per_layer:
            raise ConfigError("a layer config needs at least one layer")
        if min(self.per_layer) < 1:
            raise ConfigError(f"granularity indices are 1-based, got {self.per_layer}")

    @classmethod
    def uniform(cls, gran: int, n_layers: int) -> LayerConfig:
        return cls((gran,) * n_layers)

    @classmethod
    def parse(cls, text: str) -> LayerConfig:
        """Parse ``"2,2,3,4"``."""
        try:
            values = tuple(int(tok) for tok in text.replace(" ", "").split(","))
        except ValueError as exc:
            raise ConfigError(f"malformed layer config {text!r}") from exc
        return cls(values)

    @classmethod
    def coerce(cls, value) -> LayerConfig:
        if isinstance(value, LayerConfig):
            return value
        if isinstance(value, str):
            return cls.parse(value)
        return cls(tuple(value))

    def __len__(self) -> int:
        return len(self.per_layer)

    def __iter__(self) -> Iterator[int]:
        return iter(self.per_layer)

    def __getitem__(self, j: int) -> int:
        return self.per_layer[j]

    def __str__(self) -> str:
        return ",".join(str(i) for i in self.per_layer)

    def to_list(self) -> list[int]:
        return list(self.per_layer)

    def dominated_by(self, other: LayerConfig) -> bool:
        """True when every layer's granularity is <= the other's."""
        return len(self) == len(other) and all(a <= b for a, b in zip(self, other))


def enumerate_configs(n_layers: int, g: int) -> Iterator[LayerConfig]:
    """All ``g ** n_layers`` Mix'n'Match configurations in lexicographic order."""
    if n_layers < 1 or g < 1:
        raise ConfigError("enumeration needs n_layers >= 1 and g >= 1")
    new = object.__new__
    for combo in itertools.product(range(1, g + 1), repeat=n_layers):
        # combos are valid by construction, so skip __post_init__
        cfg = new(LayerConfig)
        object.__setattr__(cfg, "per_layer", combo)
        yield cfg


def count_configs(n_layers: int, g: int) -> int:
    return g**n_layers


@dataclass
class ModelConfig:
    """Shape of a decoder-only MatFormer.

    ``d_ff`` defaults to ``4 * d_model`` and ``granularity`` to the four
    halving widths of :meth:`GranularitySpec.exponential`. ``layer_max_gran``
    marks an extracted model whose layer ``j`` only stores granularities up to
    ``layer_max_gran[j]``; ``None`` means every layer stores all of them.
    """

    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = BYTE_VOCAB
    context_len: int = 64
    d_ff: int | None = None
    granularity: GranularitySpec | None = None
    sigma: str = "squared_relu"
    layer_max_gran: tuple[int, ...] | None = None
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if isinstance(self.granularity, dict):
            self.granularity = GranularitySpec(
                tuple(self.granularity["ffn_widths"]),
                None if self.granularity.get("head_counts") is None else tuple(self.granularity["head_counts"]),
            )
        if self.granularity is None:
            self.granularity = GranularitySpec.exponential(self.d_ff)
        if self.layer_max_gran is not None:
            self.layer_max_gran = tuple(int(i) for i in self.layer_max_gran)
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "n_layers", "n_heads", "vocab_size", "context_len", "d_ff"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.granularity.ffn_widths[-1] != self.d_ff:
            raise ConfigError(f"largest ffn width {self.granularity.ffn_widths[-1]} must equal d_ff={self.d_ff}")
        if self.granularity.head_counts is not None and self.granularity.head_counts[-1] != self.n_heads:
            raise ConfigError("largest head count must equal n_heads")
        if self.sigma not in ("squared_relu", "gelu"):
            raise ConfigError(f"unknown activation {self.sigma!r}")
        if self.layer_max_gran is not None:
            if len(self.layer_max_gran) != self.n_layers:
                raise ConfigError("layer_max_gran needs one entry per layer")
            for gran in self.layer_max_gran:
                self.granularity.check(gran)

    @property
    def g(self) -> int:
        return self.granularity.g

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def max_config(self) -> LayerConfig:
        """The largest config this model can run."""
        if self.layer_max_gran is None:
            return LayerConfig.uniform(self.g, self.n_layers)
        return LayerConfig(self.layer_max_gran)

    def check_config(self, config) -> LayerConfig:
        config = LayerConfig.coerce(config)
        if len(config) != self.n_layers:
            raise ConfigError(f"config has {len(config)} layers, model has {self.n_layers}")
        for gran, top in zip(config, self.max_config()):
            self.granularity.check(gran)
            if gran > top:
                raise ConfigError(f"granularity {gran} exceeds what this (extracted) layer stores ({top})")
        return config

    def attn_width(self, gran: int) -> int:
        return self.granularity.heads(gran, self.n_heads) * self.head_dim

    def to_dict(self) -> dict:
        out = asdict(self)
        out["granularity"] = {
            "ffn_widths": list(self.granularity.ffn_widths),
            "head_counts": None if self.granularity.head_counts is None else list(self.granularity.head_counts),
        }
        out["layer_max_gran"] = None if self.layer_max_gran is None else list(self.layer_max_gran)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

