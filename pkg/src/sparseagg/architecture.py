"""Static planning and cost analysis of aggregation networks.

``NetworkSpec`` describes a network symbolically: an aggregation family
(how predecessor outputs are combined), a skip topology, per-block layer
counts and widths, a stem, and a classifier.  ``plan_network`` expands the
spec into a concrete layer-by-layer plan with channel counts and spatial
sizes; ``analyze`` prices that plan in parameters and FLOPs without
building any tensors.

Conventions baked into the planner (chosen to reproduce the standard
densely-concatenated CIFAR/ImageNet reference models exactly):

* Units are pre-activation BN-ReLU-Conv by default; convolutions carry no
  bias (the following BN absorbs it).  A ``unit_order="postact"`` switch
  flips units to Conv-BN-ReLU.
* Bottleneck units (concat family only) are BN-ReLU-Conv1x1 to ``4*k``
  followed by BN-ReLU-Conv3x3 to ``k``.
* A transition between blocks takes the aggregation evaluated at the
  virtual index one past the block's last layer (under the block's own
  topology rule), applies BN-ReLU-Conv1x1 to ``floor(compression *
  channels)``, then average-pools.  The classifier applies BN-ReLU, global
  average pooling, and a fully-connected layer to the same closing
  aggregation of the last block.
* Sum/average families keep one width per block; the transition's 1x1
  convolution doubles as the projection when the width changes
  (``allow_projection=False`` turns that into a plan error).
* FLOPs are counted as 2 x multiply-accumulates, convolution and
  fully-connected layers only.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass

from .errors import PlanError, SpecFormatError
from .topology import (
    Fractal,
    TopologyKind,
    format_topology,
    parse_topology,
    predecessors,
)

__all__ = [
    "InputSpec",
    "StemSpec",
    "BlockSpec",
    "NetworkSpec",
    "NetworkPlan",
    "LayerPlan",
    "CostReport",
    "plan_network",
    "analyze",
    "compare_topologies",
    "load_spec",
    "save_spec",
    "spec_hash",
]

FAMILIES = ("sum", "concat", "average")
UNIT_ORDERS = ("preact", "postact")


def _positive(value, name):
    if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
        raise SpecFormatError(f"{name} must be a positive integer, got {value!r}")
    return value


@dataclass(frozen=True)
class InputSpec:
    height: int
    width: int
    channels: int

    def __post_init__(self):
        for field in ("height", "width", "channels"):
            _positive(getattr(self, field), f"input.{field}")


@dataclass(frozen=True)
class StemSpec:
    out_channels: int
    kernel: int
    stride: int

    def __post_init__(self):
        _positive(self.out_channels, "stem.out_channels")
        _positive(self.kernel, "stem.kernel")
        _positive(self.stride, "stem.stride")
        if self.kernel % 2 == 0:
            raise SpecFormatError(f"stem.kernel must be odd, got {self.kernel}")

    @property
    def max_pool(self) -> bool:
        # A strided stem is the large-input variant: 3x3/2 max-pool follows.
        return self.stride > 1


@dataclass(frozen=True)
class BlockSpec:
    num_layers: int
    growth_rate: int | None = None
    width: int | None = None
    spatial_stride_out: int = 2

    def __post_init__(self):
        _positive(self.num_layers, "block.num_layers")
        _positive(self.spatial_stride_out, "block.spatial_stride_out")
        if self.growth_rate is not None:
            _positive(self.growth_rate, "block.growth_rate")
        if self.width is not None:
            _positive(self.width, "block.width")
        if (self.growth_rate is None) == (self.width is None):
            raise SpecFormatError("block needs exactly one of growth_rate (concat) or width (sum/average)")


@dataclass(frozen=True)
class NetworkSpec:
    family: str
    topology: TopologyKind
    blocks: tuple[BlockSpec, ...]
    stem: StemSpec
    num_classes: int
    input: InputSpec
    bottleneck: bool = False
    compression: float = 1.0
    unit_order: str = "preact"
    allow_projection: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SpecFormatError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.unit_order not in UNIT_ORDERS:
            raise SpecFormatError(f"unit_order must be one of {UNIT_ORDERS}, got {self.unit_order!r}")
        if not self.blocks:
            raise SpecFormatError("at least one block required")
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.num_classes < 2:
            raise SpecFormatError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.bottleneck and self.family != "concat":
            raise SpecFormatError("bottleneck units require the concat family")
        if not 0.0 < self.compression <= 1.0:
            raise SpecFormatError(f"compression must be in (0, 1], got {self.compression}")
        if not self.bottleneck and self.compression != 1.0:
            raise SpecFormatError("compression < 1 requires bottleneck units")
        for block in self.blocks:
            if self.family == "concat" and block.growth_rate is None:
                raise SpecFormatError("concat-family blocks must set growth_rate")
            if self.family in ("sum", "average") and block.width is None:
                raise SpecFormatError(f"{self.family}-family blocks must set width")

    def to_json_obj(self) -> dict:
        blocks = []
        for b in self.blocks:
            entry = {"num_layers": b.num_layers, "spatial_stride_out": b.spatial_stride_out}
            if b.growth_rate is not None:
                entry["growth_rate"] = b.growth_rate
            else:
                entry["width"] = b.width
            blocks.append(entry)
        return {
            "family": self.family,
            "topology": format_topology(self.topology),
            "blocks": blocks,
            "stem": dataclasses.asdict(self.stem),
            "num_classes": self.num_classes,
            "input": dataclasses.asdict(self.input),
            "bottleneck": self.bottleneck,
            "compression": self.compression,
            "unit_order": self.unit_order,
            "allow_projection": self.allow_projection,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), indent=2) + "\n"


def spec_hash(spec: NetworkSpec) -> str:
    canonical = json.dumps(spec.to_json_obj(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _take(obj: dict, where: str, required: tuple[str, ...], optional: tuple[str, ...] = ()):
    if not isinstance(obj, dict):
        raise SpecFormatError(f"{where} must be an object, got {type(obj).__name__}")
    for key in obj:
        if key not in required and key not in optional:
            raise SpecFormatError(f"unknown field {key!r} in {where}")
    for key in required:
        if key not in obj:
            raise SpecFormatError(f"missing field {key!r} in {where}")


def spec_from_json_obj(obj: dict) -> NetworkSpec:
    _take(
        obj,
        "spec",
        required=("family", "topology", "blocks", "stem", "num_classes", "input"),
        optional=("bottleneck", "compression", "unit_order", "allow_projection"),
    )
    if not isinstance(obj["topology"], str):
        raise SpecFormatError("topology must be a string like 'sparse:2'")
    topology = parse_topology(obj["topology"])
    if not isinstance(obj["blocks"], list) or not obj["blocks"]:
        raise SpecFormatError("blocks must be a non-empty list")
    blocks = []
    for i, raw in enumerate(obj["blocks"]):
        _take(raw, f"blocks[{i}]", required=("num_layers",),
              optional=("growth_rate", "width", "spatial_stride_out"))
        blocks.append(BlockSpec(**raw))
    _take(obj["stem"], "stem", required=("out_channels", "kernel", "stride"))
    _take(obj["input"], "input", required=("height", "width", "channels"))
    bottleneck = obj.get("bottleneck", False)
    if not isinstance(bottleneck, bool):
        raise SpecFormatError("bottleneck must be a boolean")
    compression = obj.get("compression", 0.5 if bottleneck else 1.0)
    if not isinstance(compression, (int, float)) or isinstance(compression, bool):
        raise SpecFormatError("compression must be a number")
    return NetworkSpec(
        family=obj["family"],
        topology=topology,
        blocks=tuple(blocks),
        stem=StemSpec(**obj["stem"]),
        num_classes=_positive(obj["num_classes"], "num_classes"),
        input=InputSpec(**obj["input"]),
        bottleneck=bottleneck,
        compression=float(compression),
        unit_order=obj.get("unit_order", "preact"),
        allow_projection=obj.get("allow_projection", True),
    )


def load_spec(path) -> NetworkSpec:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SpecFormatError(f"{path}: not valid JSON ({exc})") from None
    return spec_from_json_obj(obj)


def save_spec(spec: NetworkSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(spec.to_json())


# --------------------------------------------------------------------------
# Plans


@dataclass(frozen=True)
class ConvPlan:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int
    out_h: int
    out_w: int


@dataclass(frozen=True)
class NormPlan:
    name: str
    channels: int


@dataclass(frozen=True)
class LinearPlan:
    name: str
    in_features: int
    out_features: int


@dataclass(frozen=True)
class StemPlan:
    convs: tuple[ConvPlan, ...]
    norms: tuple[NormPlan, ...]
    out_channels: int
    spatial: tuple[int, int]
    max_pool: bool


@dataclass(frozen=True)
class LayerPlan:
    block: int
    index: int
    predecessors: tuple[int, ...]
    in_channels: int
    bottleneck_channels: int
    out_channels: int
    spatial: tuple[int, int]
    op_sequence: str
    convs: tuple[ConvPlan, ...]
    norms: tuple[NormPlan, ...]


@dataclass(frozen=True)
class BlockPlan:
    index: int
    num_layers: int
    input_channels: int
    spatial: tuple[int, int]
    layers: tuple[LayerPlan, ...]


@dataclass(frozen=True)
class TransitionPlan:
    block: int
    predecessors: tuple[int, ...]
    in_channels: int
    out_channels: int
    spatial_in: tuple[int, int]
    spatial_out: tuple[int, int]
    pool: int
    convs: tuple[ConvPlan, ...]
    norms: tuple[NormPlan, ...]


@dataclass(frozen=True)
class ClassifierPlan:
    predecessors: tuple[int, ...]
    in_channels: int
    num_classes: int
    spatial: tuple[int, int]
    norms: tuple[NormPlan, ...]
    linear: LinearPlan


@dataclass(frozen=True)
class NetworkPlan:
    spec: NetworkSpec
    stem: StemPlan
    blocks: tuple[BlockPlan, ...]
    transitions: tuple[TransitionPlan, ...]
    classifier: ClassifierPlan

    def to_json(self) -> str:
        obj = dataclasses.asdict(self)
        obj["spec"] = self.spec.to_json_obj()
        return json.dumps(obj, sort_keys=True, indent=2, default=str) + "\n"


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _layer_channels(spec: NetworkSpec, block: BlockSpec, block_in: int, preds: list[int]) -> int:
    if spec.family == "concat":
        return sum(block_in if p == 0 else block.growth_rate for p in preds)
    return block.width


def plan_network(spec: NetworkSpec) -> NetworkPlan:
    """Expand a spec into concrete per-layer channel and spatial sizes."""
    if isinstance(spec.topology, Fractal):
        raise PlanError("fractal topology supports edge counting and visualization only")
    preact = spec.unit_order == "preact"

    h = _conv_out(spec.input.height, spec.stem.kernel, spec.stem.stride, spec.stem.kernel // 2)
    w = _conv_out(spec.input.width, spec.stem.kernel, spec.stem.stride, spec.stem.kernel // 2)
    stem_convs = (
        ConvPlan("stem.conv", spec.input.channels, spec.stem.out_channels,
                 spec.stem.kernel, spec.stem.stride, spec.stem.kernel // 2, h, w),
    )
    stem_norms = (NormPlan("stem.bn", spec.stem.out_channels),) if spec.stem.max_pool else ()
    if spec.stem.max_pool:
        h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
    stem = StemPlan(stem_convs, stem_norms, spec.stem.out_channels, (h, w), spec.stem.max_pool)

    blocks: list[BlockPlan] = []
    transitions: list[TransitionPlan] = []
    block_in = spec.stem.out_channels
    for bi, bspec in enumerate(spec.blocks, start=1):
        if spec.family in ("sum", "average") and block_in != bspec.width:
            # widths changed without a projection in front of this block
            raise PlanError(
                f"block {bi} expects width {bspec.width} but receives {block_in}; "
                "enable allow_projection or match the widths"
            )
        layers = []
        for li in range(1, bspec.num_layers + 1):
            preds = predecessors(spec.topology, li)
            in_ch = _layer_channels(spec, bspec, block_in, preds)
            out_ch = bspec.growth_rate if spec.family == "concat" else bspec.width
            prefix = f"block{bi}.layer{li}"
            convs = []
            norms = []
            if spec.bottleneck:
                mid = 4 * bspec.growth_rate
                convs.append(ConvPlan(f"{prefix}.conv1", in_ch, mid, 1, 1, 0, h, w))
                convs.append(ConvPlan(f"{prefix}.conv2", mid, out_ch, 3, 1, 1, h, w))
                if preact:
                    norms = [NormPlan(f"{prefix}.bn1", in_ch), NormPlan(f"{prefix}.bn2", mid)]
                    seq = f"bn-relu-conv1x1({in_ch}->{mid})|bn-relu-conv3x3({mid}->{out_ch})"
                else:
                    norms = [NormPlan(f"{prefix}.bn1", mid), NormPlan(f"{prefix}.bn2", out_ch)]
                    seq = f"conv1x1({in_ch}->{mid})-bn-relu|conv3x3({mid}->{out_ch})-bn-relu"
                mid_ch = mid
            else:
                convs.append(ConvPlan(f"{prefix}.conv1", in_ch, out_ch, 3, 1, 1, h, w))
                if preact:
                    norms = [NormPlan(f"{prefix}.bn1", in_ch)]
                    seq = f"bn-relu-conv3x3({in_ch}->{out_ch})"
                else:
                    norms = [NormPlan(f"{prefix}.bn1", out_ch)]
                    seq = f"conv3x3({in_ch}->{out_ch})-bn-relu"
                mid_ch = 0
            layers.append(LayerPlan(bi, li, tuple(preds), in_ch, mid_ch, out_ch,
                                    (h, w), seq, tuple(convs), tuple(norms)))
        blocks.append(BlockPlan(bi, bspec.num_layers, block_in, (h, w), tuple(layers)))

        close_preds = predecessors(spec.topology, bspec.num_layers + 1)
        close_ch = _layer_channels(spec, bspec, block_in, close_preds)
        last = bi == len(spec.blocks)
        if not last:
            nxt = spec.blocks[bi]
            if spec.family == "concat":
                out_ch = int(spec.compression * close_ch)
            else:
                out_ch = nxt.width
            stride = bspec.spatial_stride_out
            ph, pw = h // stride, w // stride
            prefix = f"transition{bi}"
            convs = []
            norms = []
            if spec.family == "concat" or out_ch != close_ch:
                if spec.family in ("sum", "average") and not spec.allow_projection:
                    raise PlanError(
                        f"width changes from {close_ch} to {out_ch} after block {bi} "
                        "but allow_projection is off"
                    )
                convs.append(ConvPlan(f"{prefix}.conv", close_ch, out_ch, 1, 1, 0, h, w))
                bn_ch = close_ch if preact else out_ch
            else:
                out_ch = close_ch
                bn_ch = close_ch
            norms.append(NormPlan(f"{prefix}.bn", bn_ch))
            transitions.append(TransitionPlan(bi, tuple(close_preds), close_ch, out_ch,
                                              (h, w), (ph, pw), stride, tuple(convs), tuple(norms)))
            block_in = out_ch
            h, w = ph, pw
        else:
            cls_norms = (NormPlan("classifier.bn", close_ch),) if preact else ()
            classifier = ClassifierPlan(tuple(close_preds), close_ch, spec.num_classes, (h, w),
                                        cls_norms, LinearPlan("classifier.fc", close_ch, spec.num_classes))

    return NetworkPlan(spec, stem, tuple(blocks), tuple(transitions), classifier)


# --------------------------------------------------------------------------
# Cost analysis


@dataclass(frozen=True)
class CostRow:
    layer: str
    block: int
    in_ch: int
    out_ch: int
    params: int
    flops: int


@dataclass(frozen=True)
class CostReport:
    rows: tuple[CostRow, ...]
    total_params: int
    total_flops: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer,block,in_ch,out_ch,params,flops\n")
        for row in self.rows:
            buf.write(f"{row.layer},{row.block},{row.in_ch},{row.out_ch},{row.params},{row.flops}\n")
        buf.write(f"total,,,,{self.total_params},{self.total_flops}\n")
        return buf.getvalue()

    def to_json(self) -> str:
        obj = {
            "rows": [dataclasses.asdict(row) for row in self.rows],
            "total_params": self.total_params,
            "total_flops": self.total_flops,
        }
        return json.dumps(obj, indent=2) + "\n"


def _conv_cost(conv: ConvPlan) -> tuple[int, int]:
    params = conv.in_channels * conv.out_channels * conv.kernel * conv.kernel
    flops = 2 * conv.out_h * conv.out_w * params
    return params, flops


def _group_cost(convs, norms, linear=None) -> tuple[int, int]:
    params = 0
    flops = 0
    for conv in convs:
        p, f = _conv_cost(conv)
        params += p
        flops += f
    for norm in norms:
        params += 2 * norm.channels
    if linear is not None:
        params += linear.in_features * linear.out_features + linear.out_features
        flops += 2 * linear.in_features * linear.out_features
    return params, flops


def analyze(spec: NetworkSpec | NetworkPlan) -> CostReport:
    """Price every layer of the planned network in parameters and FLOPs."""
    plan = plan_network(spec) if isinstance(spec, NetworkSpec) else spec
    rows: list[CostRow] = []

    params, flops = _group_cost(plan.stem.convs, plan.stem.norms)
    rows.append(CostRow("stem", 0, plan.spec.input.channels, plan.stem.out_channels, params, flops))

    transitions = {t.block: t for t in plan.transitions}
    for block in plan.blocks:
        for layer in block.layers:
            params, flops = _group_cost(layer.convs, layer.norms)
            rows.append(CostRow(f"{block.index}.{layer.index}", block.index,
                                layer.in_channels, layer.out_channels, params, flops))
        trans = transitions.get(block.index)
        if trans is not None:
            params, flops = _group_cost(trans.convs, trans.norms)
            rows.append(CostRow(f"transition{trans.block}", trans.block,
                                trans.in_channels, trans.out_channels, params, flops))

    cls = plan.classifier
    params, flops = _group_cost((), cls.norms, cls.linear)
    rows.append(CostRow("classifier", len(plan.blocks), cls.in_channels, cls.num_classes, params, flops))

    total_params = sum(r.params for r in rows)
    total_flops = sum(r.flops for r in rows)
    return CostReport(tuple(rows), total_params, total_flops)


def compare_topologies(spec: NetworkSpec, kinds: list[TopologyKind]) -> dict[str, CostReport]:
    """Analyze the same spec under each topology; keys are topology strings."""
    reports: dict[str, CostReport] = {}
    for kind in kinds:
        variant = dataclasses.replace(spec, topology=kind)
        reports[format_topology(kind)] = analyze(variant)
    return reports
