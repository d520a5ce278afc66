from __future__ import annotations

from dataclasses import asdict, dataclass

NUM_CLASSES = 3


@dataclass(frozen=True)
class TapConfig:
    n_history: int = 3
    input_hw: int = 64
    conv_channels: tuple[int, ...] = (16, 32)
    kernel: int = 3
    spatial_stride: int = 2
    temporal_stride: int = 1
    padding: int = 1
    fv_dim: int = 64
    state_embed_dim: int = 8
    fs_hidden: int = 32
    fs_dim: int = 32
    fusion_hidden: int = 32
    classes: int = NUM_CLASSES
    seed: int = 0
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.class_weights is not None:
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
            if len(self.class_weights) != NUM_CLASSES or min(self.class_weights) <= 0:
                raise ValueError("class_weights needs three positive numbers")
        if self.classes != NUM_CLASSES:
            raise ValueError("TAP always predicts exactly three trigger levels")
        dims = (
            self.n_history, self.input_hw, self.kernel, self.spatial_stride, self.temporal_stride,
            self.fv_dim, self.state_embed_dim, self.fs_hidden, self.fs_dim, self.fusion_hidden,
        )
        if min(dims) < 1 or not self.conv_channels or min(self.conv_channels) < 1:
            raise ValueError("all TAP dimensions must be positive")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        t, s = self.n_history, self.input_hw
        for _ in self.conv_channels:
            t = (t + 2 * self.padding - self.kernel) // self.temporal_stride + 1
            s = (s + 2 * self.padding - self.kernel) // self.spatial_stride + 1
            if t < 1 or s < 1:
                raise ValueError("conv stack shrinks the input to nothing")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        if self.class_weights is not None:
            d["class_weights"] = list(self.class_weights)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TapConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TAP config keys: {sorted(unknown)}")
        return cls(**data)
