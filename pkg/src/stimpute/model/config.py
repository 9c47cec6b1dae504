"""Model hyperparameters."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field


@dataclass
class ModelConfig:
    d: int = 16  # hidden state width
    q: int = 8  # node embedding width
    r: int = 4  # patient embedding width
    layers: int = 1  # K
    enc_hidden: int = 32
    dec_hidden: int = 64
    diffusion_order: int = 2
    quantiles: list[float] = field(default_factory=lambda: [0.1, 0.5, 0.9])
    use_graph: bool = True  # False drops every edge (univariate cell)
    bidirectional: bool = True

    def __post_init__(self):
        self.quantiles = [float(t) for t in self.quantiles]
        if not self.quantiles or sorted(self.quantiles) != self.quantiles:
            raise ValueError("quantiles must be a non-empty ascending list")
        if any(not 0.0 < t < 1.0 for t in self.quantiles):
            raise ValueError("quantiles must lie in (0, 1)")
        if self.d < 1 or self.layers < 1 or self.q < 0 or self.r < 0:
            raise ValueError("invalid model widths")

    @property
    def n_quantiles(self) -> int:
        return len(self.quantiles)

    @property
    def median_index(self) -> int:
        """Channel used for substitution and point metrics (0.5, else the middle one)."""
        if 0.5 in self.quantiles:
            return self.quantiles.index(0.5)
        return len(self.quantiles) // 2

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)
