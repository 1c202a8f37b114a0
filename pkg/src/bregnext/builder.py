"""Declarative construction of the studied residual architectures.

A network is a stem convolution, a list of stages (each a run of
two-convolution pre-activation residual units, optionally opening with a
down-sampling transition unit), and a global-average-pool head.  The
bypass route of every unit applies the configured mapping; transitions
average-pool the bypass and zero-pad its channels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .mappings import ALPHA_MIN, MappingKind

CONFIG_SCHEMA_VERSION = 1
INPUT_CHANNELS = 3


@dataclass(frozen=True)
class StageConfig:
    units: int
    channels: int
    transition: bool  # first unit halves spatial dims and widens channels


@dataclass(frozen=True)
class ResidualUnitConfig:
    in_channels: int
    out_channels: int
    stride: int
    bypass: MappingKind

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"unit stride must be 1 or 2, got {self.stride}")
        if self.stride == 2 and self.out_channels < self.in_channels:
            raise ValueError("transition units may not shrink channels")
        if self.stride == 1 and self.out_channels != self.in_channels:
            raise ValueError("non-transition units keep their channel width")

    @property
    def has_adaptive_params(self) -> bool:
        return self.bypass.is_adaptive


@dataclass(frozen=True)
class NetworkConfig:
    name: str
    stem_channels: int
    stem_stride: int
    stages: tuple[StageConfig, ...]
    head: str  # "categorical" (8-way softmax) or "dimensional" (2 linear)
    bypass: MappingKind

    def __post_init__(self):
        if self.head not in ("categorical", "dimensional"):
            raise ValueError(f"unknown head {self.head!r}")
        if not self.stages:
            raise ValueError("network needs at least one stage")
        widths = [self.stem_channels] + [s.channels for s in self.stages]
        if any(b < a for a, b in zip(widths, widths[1:])):
            raise ValueError("stage channel widths must be non-decreasing")
        for prev, stage in zip(self.stages, self.stages[1:]):
            if not stage.transition and stage.channels != prev.channels:
                raise ValueError("channel change requires a transition stage")
        if not self.stages[0].transition and \
                self.stages[0].channels != self.stem_channels:
            raise ValueError("first stage width must match the stem")

    @property
    def head_width(self) -> int:
        return 8 if self.head == "categorical" else 2

    def unit_configs(self) -> list[ResidualUnitConfig]:
        units = []
        in_ch = self.stem_channels
        for stage in self.stages:
            for u in range(stage.units):
                transition = stage.transition and u == 0
                units.append(ResidualUnitConfig(
                    in_channels=in_ch,
                    out_channels=stage.channels if transition else in_ch,
                    stride=2 if transition else 1,
                    bypass=self.bypass,
                ))
                in_ch = stage.channels
        return units


def config_to_dict(cfg: NetworkConfig) -> dict:
    return {
        "schema": CONFIG_SCHEMA_VERSION,
        "name": cfg.name,
        "stem": {"channels": cfg.stem_channels, "stride": cfg.stem_stride},
        "stages": [{"units": s.units, "channels": s.channels,
                    "transition": s.transition} for s in cfg.stages],
        "head": cfg.head,
        "bypass": {"tag": cfg.bypass.tag, "lam": cfg.bypass.lam,
                   "alpha": cfg.bypass.alpha},
    }


def config_from_dict(doc: dict) -> NetworkConfig:
    if doc.get("schema") != CONFIG_SCHEMA_VERSION:
        raise ValueError(
            f"unsupported config schema {doc.get('schema')!r}, "
            f"expected {CONFIG_SCHEMA_VERSION}")
    bypass = doc["bypass"]
    return NetworkConfig(
        name=doc["name"],
        stem_channels=doc["stem"]["channels"],
        stem_stride=doc["stem"]["stride"],
        stages=tuple(StageConfig(s["units"], s["channels"], s["transition"])
                     for s in doc["stages"]),
        head=doc["head"],
        bypass=MappingKind(bypass["tag"], lam=bypass["lam"],
                           alpha=bypass["alpha"]),
    )


def config_to_json(cfg: NetworkConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2)


def config_from_json(text: str) -> NetworkConfig:
    return config_from_dict(json.loads(text))


# Stage multiplicities of the six studied architectures.  The depth series
# grows from the 50-layer anchor by one unit in each non-transition stage
# per 6-layer increment.
_BREG_WIDTHS = (32, 64, 64, 128, 128)
_TABLE2_UNITS = {
    "breg-next-50": (7, 1, 8, 1, 7),
    "breg-next-32": (4, 1, 5, 1, 4),
    "breg-net-50": (7, 1, 8, 1, 7),
    "breg-net-32": (4, 1, 5, 1, 4),
}
TABLE2_NAMES = ("resnet-32", "resnet-50", "breg-net-32", "breg-net-50",
                "breg-next-32", "breg-next-50")


def _breg_stages(units: tuple[int, ...]) -> tuple[StageConfig, ...]:
    return tuple(
        StageConfig(n, w, transition=w > prev)
        for n, w, prev in zip(units, _BREG_WIDTHS, (32,) + _BREG_WIDTHS))


def table2_config(name: str, head: str = "categorical") -> NetworkConfig:
    """Named architecture lookup (case-insensitive)."""
    key = name.lower()
    if key in ("breg-next-50", "breg-next-32"):
        return NetworkConfig(key, 32, 1, _breg_stages(_TABLE2_UNITS[key]),
                             head, MappingKind.adaptive())
    if key in ("breg-net-50", "breg-net-32"):
        return NetworkConfig(key, 32, 1, _breg_stages(_TABLE2_UNITS[key]),
                             head, MappingKind.h1())
    if key == "resnet-32":
        stages = (StageConfig(3, 64, False), StageConfig(3, 128, True),
                  StageConfig(5, 256, True), StageConfig(3, 512, True))
        return NetworkConfig(key, 64, 2, stages, head, MappingKind.identity())
    if key == "resnet-50":
        stages = (StageConfig(8, 64, False), StageConfig(1, 128, True),
                  StageConfig(7, 128, False), StageConfig(1, 256, True),
                  StageConfig(7, 256, False))
        return NetworkConfig(key, 64, 2, stages, head, MappingKind.identity())
    raise ValueError(f"unknown architecture {name!r}")


DEPTH_SERIES = tuple(range(26, 69, 6))


def depth_config(layers: int, head: str = "categorical") -> NetworkConfig:
    """Depth-series member: the 50-layer unit counts shifted by one unit
    per non-transition stage for each 6-layer step."""
    if layers not in DEPTH_SERIES:
        raise ValueError(
            f"depth {layers} outside the series {DEPTH_SERIES}")
    shift = (layers - 50) // 6
    units = tuple(n + shift if stage % 2 == 0 else n
                  for stage, n in enumerate(_TABLE2_UNITS["breg-next-50"]))
    return NetworkConfig(f"breg-next-{layers}", 32, 1, _breg_stages(units),
                         head, MappingKind.adaptive())


class Model:
    """A built network: graph endpoints plus its parameter store."""

    def __init__(self, config, store, input_node, logits, outputs,
                 unit_outputs, bn_nodes, mapping_param_names, dtype,
                 input_hw):
        self.config = config
        self.store = store
        self.input = input_node
        self.logits = logits
        self.outputs = outputs  # probabilities or linear pair
        self.unit_outputs = unit_outputs  # ordered (name, node)
        self.bn_nodes = bn_nodes
        self.mapping_param_names = mapping_param_names  # (alpha, beta) names
        self.dtype = np.dtype(dtype)
        self.input_hw = tuple(input_hw)
        # extra nodes (losses, label feeds) attached lazily by training
        self.extras: dict[str, ad.Node] = {}

    def forward(self, images, training: bool = False) -> np.ndarray:
        """Head output for a batch of NHWC images."""
        out = ad.evaluate(self.outputs, {self.input.name: images},
                          training=training)
        return out[self.outputs.name]

    def mapping_values(self) -> list[tuple[float, float]]:
        return [(float(self.store[a].value), float(self.store[b].value))
                for a, b in self.mapping_param_names]

    def mark_bn_stats_recorded(self) -> None:
        for bn in self.bn_nodes:
            bn.mark_stats_recorded()


def _conv_weight(store, name, kh, kw, cin, cout, rng):
    std = np.sqrt(2.0 / (kh * kw * cin))
    w = rng.normal(0.0, std, size=(kh, kw, cin, cout))
    return ad.Parameter(store.add(name, w, weight_decay=True))


def _bn(store, x, prefix, bn_nodes):
    c = x.shape[-1]
    gamma = ad.Parameter(store.add(f"{prefix}/gamma", np.ones(c)))
    beta = ad.Parameter(store.add(f"{prefix}/beta", np.zeros(c)))
    r_mean = store.add(f"{prefix}/running_mean", np.zeros(c), trainable=False)
    r_var = store.add(f"{prefix}/running_var", np.ones(c), trainable=False)
    node = ad.BatchNorm(x, gamma, beta, r_mean, r_var, name=f"{prefix}/bn")
    bn_nodes.append(node)
    return node


def build_unit(x: ad.Node, ucfg: ResidualUnitConfig, store: ad.ParamStore,
               prefix: str, rng, bn_nodes: list,
               mapping_param_names: list) -> ad.Node:
    """Pre-activation residual unit: BN-ELU-conv-BN-ELU-conv plus the
    mapped bypass, summed with no post-sum activation."""
    cin, cout = ucfg.in_channels, ucfg.out_channels
    h = _bn(store, x, f"{prefix}/bn1", bn_nodes)
    h = ad.Elu(h, name=f"{prefix}/elu1")
    w1 = _conv_weight(store, f"{prefix}/conv1_w", 3, 3, cin, cout, rng)
    h = ad.Conv2D(h, w1, stride=ucfg.stride, padding="SAME",
                  name=f"{prefix}/conv1")
    h = _bn(store, h, f"{prefix}/bn2", bn_nodes)
    h = ad.Elu(h, name=f"{prefix}/elu2")
    w2 = _conv_weight(store, f"{prefix}/conv2_w", 3, 3, cout, cout, rng)
    h = ad.Conv2D(h, w2, stride=1, padding="SAME", name=f"{prefix}/conv2")

    kind = ucfg.bypass
    if kind.is_adaptive:
        # training starts from the non-adaptive special case (alpha=1, beta=0)
        alpha = ad.Parameter(store.add(f"{prefix}/alpha", np.asarray(1.0),
                                       clamp_min_abs=ALPHA_MIN))
        beta = ad.Parameter(store.add(f"{prefix}/beta", np.asarray(0.0)))
        mapping_param_names.append((f"{prefix}/alpha", f"{prefix}/beta"))
        bypass = ad.BregMap(x, alpha, beta, name=f"{prefix}/bypass")
    elif kind.tag == "identity":
        bypass = x
    else:
        bypass = ad.FixedMap(x, kind, name=f"{prefix}/bypass")
    if ucfg.stride == 2:
        bypass = ad.AvgPool2x2(bypass, name=f"{prefix}/bypass_pool")
    if cout > cin:
        bypass = ad.PadChannels(bypass, cout - cin,
                                name=f"{prefix}/bypass_pad")
    return ad.Add(h, bypass, name=f"{prefix}/out")


def build_network(cfg: NetworkConfig, seed: int = 0, dtype=np.float32,
                  input_hw: tuple[int, int] = (64, 64)) -> Model:
    """Build the full graph and freshly initialized parameters."""
    rng = np.random.default_rng(seed)
    store = ad.ParamStore(dtype=dtype)
    bn_nodes: list = []
    mapping_param_names: list = []
    unit_outputs: list = []

    h_in, w_in = input_hw
    x = ad.Placeholder("images", (None, h_in, w_in, INPUT_CHANNELS),
                       dtype=dtype)
    stem_w = _conv_weight(store, "stem/w", 3, 3, INPUT_CHANNELS,
                          cfg.stem_channels, rng)
    h = ad.Conv2D(x, stem_w, stride=cfg.stem_stride, padding="SAME",
                  name="stem/conv")

    for si, stage in enumerate(cfg.stages, start=1):
        in_ch = h.shape[-1]
        for ui in range(stage.units):
            transition = stage.transition and ui == 0
            ucfg = ResidualUnitConfig(
                in_channels=in_ch,
                out_channels=stage.channels if transition else in_ch,
                stride=2 if transition else 1,
                bypass=cfg.bypass,
            )
            prefix = f"s{si}u{ui + 1}"
            h = build_unit(h, ucfg, store, prefix, rng, bn_nodes,
                           mapping_param_names)
            unit_outputs.append((prefix, h))
            in_ch = h.shape[-1]

    h = _bn(store, h, "final", bn_nodes)
    h = ad.Elu(h, name="final/elu")
    pooled = ad.GlobalAvgPool(h, name="head/pool")

    k = cfg.head_width
    d = pooled.shape[-1]
    head_w = ad.Parameter(store.add(
        "head/w", rng.normal(0.0, np.sqrt(2.0 / d), size=(d, k)),
        weight_decay=True))
    head_b = ad.Parameter(store.add("head/b", np.zeros(k)))
    logits = ad.Dense(pooled, head_w, head_b, name="head/logits")
    if cfg.head == "categorical":
        outputs = ad.Softmax(logits, name="head/probs")
    else:
        outputs = logits

    return Model(cfg, store, x, logits, outputs, unit_outputs, bn_nodes,
                 mapping_param_names, dtype, input_hw)


@dataclass
class CostReport:
    parameter_count: int
    flop_count: int
    breakdown: list = field(default_factory=list)  # (name, params, flops)


def count_parameters(model: Model) -> CostReport:
    """All trainable scalars, including batch-norm affine terms and the
    per-unit mapping scalars."""
    rows = [(e.name, int(e.value.size), 0)
            for e in model.store.trainable_entries()]
    total = sum(p for _, p, _ in rows)
    return CostReport(parameter_count=total, flop_count=0, breakdown=rows)


def _node_flops(node: ad.Node) -> int:
    """Forward FLOPs per sample: 2 per multiply-accumulate for conv and
    dense, small per-element constants for everything else."""
    def size(shape):
        return int(np.prod([d for d in shape if d is not None],
                           dtype=np.int64))

    if isinstance(node, ad.Conv2D):
        kh, kw, cin, cout = node.inputs[1].shape
        ho, wo = node.out_hw
        return 2 * kh * kw * cin * cout * ho * wo
    if isinstance(node, ad.Dense):
        d, k = node.inputs[1].shape
        return 2 * d * k + (k if len(node.inputs) == 3 else 0)
    if isinstance(node, ad.BatchNorm):
        return 4 * size(node.shape)
    if isinstance(node, (ad.Elu, ad.Softmax)):
        return 4 * size(node.shape)
    if isinstance(node, (ad.BregMap, ad.FixedMap)):
        return 8 * size(node.shape)
    if isinstance(node, (ad.Add, ad.Mul, ad.Scale, ad.AvgPool2x2,
                         ad.GlobalAvgPool)):
        return size(node.shape)
    return 0


def count_flops(model: Model, input_hw: tuple[int, int] | None = None
                ) -> CostReport:
    """Single-sample forward FLOPs over the model's static graph."""
    if input_hw is not None and tuple(input_hw) != model.input_hw:
        model = build_network(model.config, dtype=model.dtype,
                              input_hw=input_hw)
    rows = []
    for node in ad.topo_order([model.outputs]):
        f = _node_flops(node)
        if f:
            rows.append((node.name, 0, f))
    total = sum(f for _, _, f in rows)
    return CostReport(parameter_count=0, flop_count=total, breakdown=rows)
