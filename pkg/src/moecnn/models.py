"""CIFAR-style ResNet-18 and its ResBlock-MoE variants, with MAC accounting.

The stem is a single 3x3 convolution (no max-pool). Four stages of two
basic blocks follow. In an MoE model one whole stage is replaced by an MoE
layer whose experts are copies of that stage with a narrower inner width.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import BatchNorm2d, Conv2d, Linear, Module, Tensor
from .autograd import functional as F
from .constraints import ConstraintConfig
from .moe import Gate, GateConfig, MoELayer, ProjectionShortcut, RoutingMode

RESNET18_WIDTHS = (64, 128, 256, 512)
STAGE_STRIDES = (1, 2, 2, 2)


@dataclass
class ModelConfig:
    num_classes: int = 100
    moe_position: int | None = None
    num_experts: int = 4
    k: int = 2
    gate: GateConfig = field(default_factory=GateConfig)
    constraint: ConstraintConfig = field(default_factory=ConstraintConfig)
    # inner width of each expert relative to the replaced stage; None = solve at build time
    expert_bottleneck_ratio: float | None = None
    # what the solved ratio matches: "macs" (k active experts vs the replaced stage)
    # or "params" (all N experts vs the replaced stage)
    bottleneck_budget: str = "macs"
    input_resolution: tuple[int, int] = (32, 32)
    width_plan: tuple[int, ...] = RESNET18_WIDTHS
    width_multiplier: float = 1.0
    blocks_per_stage: int = 2

    def __post_init__(self):
        if isinstance(self.gate, dict):
            self.gate = GateConfig(**self.gate)
        if isinstance(self.constraint, dict):
            self.constraint = ConstraintConfig(**self.constraint)
        self.input_resolution = tuple(self.input_resolution)
        self.width_plan = tuple(self.width_plan)
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if len(self.width_plan) != 4:
            raise ValueError("width_plan needs four stage widths")
        if self.moe_position is not None:
            if self.moe_position not in (1, 2, 3, 4):
                raise ValueError(f"moe_position must be in 1..4, got {self.moe_position}")
            if not 1 <= self.k <= self.num_experts:
                raise ValueError(f"need 1 <= k <= num_experts, got k={self.k}, N={self.num_experts}")
        if self.expert_bottleneck_ratio is not None and not 0 < self.expert_bottleneck_ratio <= 1:
            raise ValueError("expert_bottleneck_ratio must lie in (0, 1]")
        if self.bottleneck_budget not in ("macs", "params"):
            raise ValueError("bottleneck_budget must be 'macs' or 'params'")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(max(1, int(round(w * self.width_multiplier))) for w in self.width_plan)


class BasicBlock(Module):
    """Two 3x3 convs with BN; identity or 1x1 projection shortcut."""

    def __init__(self, in_ch: int, mid_ch: int, out_ch: int, stride: int = 1,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.conv1 = Conv2d(in_ch, mid_ch, 3, stride=stride, padding=1, rng=rng)
        self.bn1 = BatchNorm2d(mid_ch)
        self.conv2 = Conv2d(mid_ch, out_ch, 3, padding=1, rng=rng)
        self.bn2 = BatchNorm2d(out_ch)
        self.proj = None
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, stride=stride, rng=rng)
            self.proj_bn = BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        sc = x if self.proj is None else self.proj_bn(self.proj(x))
        return F.relu(h + sc)

    def mac_count(self, in_shape):
        m1, s = self.conv1.mac_count(in_shape)
        m2, s = self.conv2.mac_count(s)
        m3 = self.proj.mac_count(in_shape)[0] if self.proj is not None else 0
        return m1 + m2 + m3, s


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def mac_count(self, in_shape):
        total, shape = 0, tuple(in_shape)
        for layer in self.layers:
            m, shape = layer.mac_count(shape)
            total += m
        return total, shape


def make_stage(in_ch: int, out_ch: int, stride: int, blocks: int, mid_ch: int | None = None,
               rng: np.random.Generator | None = None) -> Sequential:
    """A stage of basic blocks; ``mid_ch`` narrows the inner conv width."""
    mid = out_ch if mid_ch is None else mid_ch
    layers = [BasicBlock(in_ch, mid, out_ch, stride, rng=rng)]
    layers += [BasicBlock(out_ch, mid, out_ch, 1, rng=rng) for _ in range(blocks - 1)]
    return Sequential(*layers)


class ResNet(Module):
    def __init__(self, config: ModelConfig, stem: Module, stages: list[Module], head: Linear):
        super().__init__()
        self.config = config
        self.stem = stem
        self.stages = stages
        self.head = head

    def forward(self, x: Tensor) -> Tensor:
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return self.head(F.global_avg_pool(x))

    def moe_layers(self) -> list[MoELayer]:
        return [s for s in self.stages if isinstance(s, MoELayer)]

    def set_mode(self, mode: RoutingMode | str) -> None:
        for layer in self.moe_layers():
            layer.set_mode(mode)

    def auxiliary_loss(self) -> Tensor | None:
        total = None
        for layer in self.moe_layers():
            aux = layer.auxiliary_loss()
            if aux is not None:
                total = aux if total is None else total + aux
        return total


class _Stem(Sequential):
    def forward(self, x):
        conv, bn = self.layers
        return F.relu(bn(conv(x)))


def _stage_shapes(config: ModelConfig):
    """Input shape ``(C,H,W)`` of every stage."""
    widths = config.widths
    h, w = config.input_resolution
    shapes = []
    c = widths[0]
    for i, stride in enumerate(STAGE_STRIDES):
        shapes.append((c, h, w))
        h, w = (h - 1) // stride + 1, (w - 1) // stride + 1
        c = widths[i]
    return shapes


def _build_moe_stage(config: ModelConfig, in_ch: int, out_ch: int, stride: int, mid: int,
                     rng, noise_seed: int) -> MoELayer:
    gate_cfg = replace(config.gate, num_experts=config.num_experts)
    experts = [make_stage(in_ch, out_ch, stride, config.blocks_per_stage, mid, rng=rng)
               for _ in range(config.num_experts)]
    gate = Gate(in_ch, gate_cfg, rng=rng)
    shortcut = ProjectionShortcut(in_ch, out_ch, stride, rng=rng)
    return MoELayer(experts, gate, config.k, shortcut, constraint=config.constraint,
                    noise_seed=noise_seed)


def solve_expert_width(config: ModelConfig) -> int:
    """Inner channel width of each expert for the configured MoE position.

    With an explicit ratio this is ``round(ratio * stage_width)``. Otherwise
    the width is chosen so the MoE layer matches the stage it replaces:
    ``k`` executing experts + gate + shortcut against the stage MACs
    (budget "macs"), or all ``N`` experts against the stage parameters
    (budget "params").
    """
    pos = config.moe_position
    if pos is None:
        raise ValueError("config has no MoE position")
    in_shape = _stage_shapes(config)[pos - 1]
    in_ch, out_ch, stride = in_shape[0], config.widths[pos - 1], STAGE_STRIDES[pos - 1]
    if config.expert_bottleneck_ratio is not None:
        mid = int(round(config.expert_bottleneck_ratio * out_ch))
        if mid < 1:
            raise ValueError(f"bottleneck ratio {config.expert_bottleneck_ratio} leaves < 1 channel")
        return mid

    replaced = make_stage(in_ch, out_ch, stride, config.blocks_per_stage)
    probe = _build_moe_stage(config, in_ch, out_ch, stride, 1, None, 0)
    if config.bottleneck_budget == "macs":
        target = replaced.mac_count(in_shape)[0]
        overhead = probe.gate.mac_count(in_shape)[0] + probe.shortcut.mac_count(in_shape)[0]

        def cost(m):
            return config.k * make_stage(in_ch, out_ch, stride, config.blocks_per_stage, m) \
                .mac_count(in_shape)[0] + overhead
    else:
        target = replaced.num_parameters()
        overhead = probe.gate.num_parameters() + probe.shortcut.num_parameters()

        def cost(m):
            return config.num_experts * make_stage(in_ch, out_ch, stride, config.blocks_per_stage,
                                                   m).num_parameters() + overhead

    lo, hi = 1, out_ch
    while lo < hi:
        m = (lo + hi) // 2
        if cost(m) < target:
            lo = m + 1
        else:
            hi = m
    candidates = [m for m in (lo - 1, lo) if m >= 1]
    return min(candidates, key=lambda m: abs(cost(m) - target))


def build_model(config: ModelConfig, seed: int = 0, materialize: bool = True) -> ResNet:
    """Baseline or MoE ResNet; ``materialize=False`` skips weight init (for counting only)."""
    config.validate()
    rng = np.random.default_rng(seed) if materialize else None
    widths = config.widths
    shapes = _stage_shapes(config)
    stem = _Stem(Conv2d(3, widths[0], 3, padding=1, rng=rng), BatchNorm2d(widths[0]))
    stages: list[Module] = []
    for i in range(4):
        in_ch, out_ch, stride = shapes[i][0], widths[i], STAGE_STRIDES[i]
        if config.moe_position == i + 1:
            mid = solve_expert_width(config)
            stages.append(_build_moe_stage(config, in_ch, out_ch, stride, mid, rng, seed))
        else:
            stages.append(make_stage(in_ch, out_ch, stride, config.blocks_per_stage, rng=rng))
    head = Linear(widths[-1], config.num_classes, rng=rng)
    return ResNet(config, stem, stages, head)


def build_baseline(config: ModelConfig, seed: int = 0, materialize: bool = True) -> ResNet:
    if config.moe_position is not None:
        raise ValueError("baseline config must not set moe_position")
    return build_model(config, seed, materialize)


def build_resblock_moe(config: ModelConfig, seed: int = 0, materialize: bool = True) -> ResNet:
    if config.moe_position is None:
        raise ValueError("ResBlock-MoE config needs moe_position in 1..4")
    return build_model(config, seed, materialize)


@dataclass
class MacReport:
    """Per-sample multiply-accumulate counts. BN, ReLU, pooling and additions count as zero."""

    breakdown: dict[str, int]
    param_count: int
    k: int | None = None

    @property
    def total_macs(self) -> int:
        return sum(self.breakdown.values())

    @property
    def total_gmac(self) -> float:
        return self.total_macs / 1e9

    def to_text(self) -> str:
        lines = ["# macs per sample; conv = F*C*kh*kw*H'*W', linear = O*D; BN/ReLU/pool/add = 0"]
        for name, macs in self.breakdown.items():
            lines.append(f"{name}={macs}")
        lines.append(f"total_macs={self.total_macs}")
        lines.append(f"total_gmac={self.total_gmac:.6f}")
        lines.append(f"param_count={self.param_count}")
        if self.k is not None:
            lines.append(f"k={self.k}")
        return "\n".join(lines) + "\n"


def count_macs(model: ResNet, input_shape=None, k: int | None = None) -> MacReport:
    """Static MAC count for one sample; MoE layers are counted with ``k`` experts executing."""
    if input_shape is None:
        input_shape = (3,) + tuple(model.config.input_resolution)
    shape = tuple(input_shape[-3:])
    breakdown: dict[str, int] = {}
    macs, shape = model.stem.mac_count(shape)
    breakdown["stem"] = macs
    used_k = None
    for i, stage in enumerate(model.stages, start=1):
        if isinstance(stage, MoELayer):
            parts = stage.mac_breakdown(shape, k)
            used_k = stage.k if k is None else k
            breakdown[f"stage{i}.gate"] = parts["gate"]
            breakdown[f"stage{i}.shortcut"] = parts["shortcut"]
            breakdown[f"stage{i}.experts"] = parts["experts"]
            shape = stage.mac_count(shape, k)[1]
        else:
            macs, shape = stage.mac_count(shape)
            breakdown[f"stage{i}"] = macs
    breakdown["head"] = model.head.mac_count((shape[0],))[0]
    return MacReport(breakdown, model.num_parameters(), used_k)


def expert_macs(model: ResNet) -> int:
    """MACs of a single expert of the model's first MoE layer."""
    layers = model.moe_layers()
    if not layers:
        raise ValueError("model has no MoE layer")
    pos = model.stages.index(layers[0])
    shape = _stage_shapes(model.config)[pos]
    return layers[0].mac_breakdown(shape)["per_expert"]
