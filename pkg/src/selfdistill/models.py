"""Block-sequential classifiers and the auxiliary-classifier scaffold.

A :class:`BlockSequentialModel` is ``stem -> blocks[0..n-1] -> head``. A
:class:`Scaffold` wraps one of them and taps the features leaving block
``tap`` (1-based) into an :class:`AuxiliaryClassifier`, so one forward pass
yields both the whole-model logits and the shallow teacher's logits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple

import torch
from torch import Tensor, nn

__all__ = [
    "BasicBlock",
    "BlockSequentialModel",
    "AuxiliaryClassifier",
    "ACSpec",
    "Scaffold",
    "ScaffoldOutput",
    "attach_auxiliary",
    "parameter_partition",
    "model_registry",
    "register_model",
    "MODEL_REGISTRY",
    "count_parameters",
]


class BasicBlock(nn.Module):
    """Two 3x3 convs with a residual shortcut (projection when the shape changes)."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut: nn.Module = nn.Identity()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x: Tensor) -> Tensor:
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


def _stage(in_ch: int, out_ch: int, depth: int, stride: int) -> nn.Sequential:
    layers = [BasicBlock(in_ch, out_ch, stride)]
    layers += [BasicBlock(out_ch, out_ch, 1) for _ in range(depth - 1)]
    return nn.Sequential(*layers)


class BlockSequentialModel(nn.Module):
    """Residual CNN with explicit, indexable block boundaries."""

    def __init__(
        self,
        num_classes: int,
        widths: tuple[int, ...] = (16, 32, 64),
        depths: tuple[int, ...] | None = None,
        in_channels: int = 3,
        name: str = "custom",
    ):
        super().__init__()
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        depths = depths or (1,) * len(widths)
        if len(depths) != len(widths):
            raise ValueError("widths and depths must have equal length")
        self.name = name
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.depths = tuple(depths)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        blocks = []
        prev = widths[0]
        for i, (w, d) in enumerate(zip(widths, depths)):
            blocks.append(_stage(prev, w, d, 1 if i == 0 else 2))
            prev = w
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(prev, num_classes))

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def block_channels(self, index: int) -> int:
        """Channel count of the features leaving block ``index`` (1-based)."""
        return self.widths[index - 1]

    def features(self, x: Tensor, upto: int | None = None) -> Tensor:
        out = self.stem(x)
        for block in self.blocks[: self.num_blocks if upto is None else upto]:
            out = block(out)
        return out

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))


@dataclass(frozen=True)
class ACSpec:
    """Shape of the auxiliary classifier: one strided conv stage, GAP, linear."""

    channels: int = 64
    stride: int = 2

    def describe(self) -> str:
        return f"conv3x3(s{self.stride})-bn-relu-{self.channels}ch/gap/linear"


class AuxiliaryClassifier(nn.Module):
    """Shallow "poor teacher" head attached to intermediate features."""

    def __init__(self, in_channels: int, num_classes: int, spec: ACSpec = ACSpec()):
        super().__init__()
        self.spec = spec
        self.num_classes = num_classes
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, spec.channels, 3, spec.stride, 1, bias=False),
            nn.BatchNorm2d(spec.channels),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.fc = nn.Linear(spec.channels, num_classes)

    def forward(self, feats: Tensor) -> Tensor:
        return self.fc(self.body(feats))


class ScaffoldOutput(NamedTuple):
    main_logits: Tensor
    aux_logits: Tensor


class Scaffold(nn.Module):
    """A model plus one auxiliary classifier tapped after block ``tap``.

    ``forward`` is exactly the wrapped model's forward; ``forward_dual`` runs
    the shared shallow blocks once and returns both heads.
    """

    def __init__(self, model: BlockSequentialModel, tap: int, aux: AuxiliaryClassifier):
        super().__init__()
        self.model = model
        self.tap = tap
        self.aux = aux

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    def forward(self, x: Tensor) -> Tensor:
        return self.model(x)

    def forward_dual(self, x: Tensor) -> ScaffoldOutput:
        m = self.model
        if x.dim() != 4 or x.shape[1] != m.in_channels:
            raise ValueError(
                f"expected input of shape (B, {m.in_channels}, H, W), got {tuple(x.shape)}"
            )
        out = m.stem(x)
        aux_logits = None
        for i, block in enumerate(m.blocks, start=1):
            out = block(out)
            if i == self.tap:
                aux_logits = self.aux(out)
        return ScaffoldOutput(m.head(out), aux_logits)


def attach_auxiliary(
    model: BlockSequentialModel, tap: int = 2, ac_spec: ACSpec | None = None
) -> Scaffold:
    """Tap the features leaving block ``tap`` (1-based) into a new AC.

    ``tap`` must leave at least one block after it: ``1 <= tap < num_blocks``.
    The AC's parameters are created after the model's, so the model's own
    initialisation is untouched by attaching.
    """
    if not 1 <= tap <= model.num_blocks - 1:
        raise ValueError(f"tap must be in [1, {model.num_blocks - 1}] for a {model.num_blocks}-block model, got {tap}")
    aux = AuxiliaryClassifier(model.block_channels(tap), model.num_classes, ac_spec or ACSpec())
    if aux.fc.out_features != model.num_classes:
        raise ValueError("auxiliary output width differs from the model's class count")
    return Scaffold(model, tap, aux)


def parameter_partition(
    scaffold: Scaffold,
) -> tuple[list[nn.Parameter], list[nn.Parameter], list[nn.Parameter]]:
    """Split parameters into (shallow, deep, auxiliary).

    Shallow covers the stem and blocks ``1..tap``; deep covers the remaining
    blocks and the head; auxiliary is the AC alone.
    """
    m = scaffold.model
    shallow = list(m.stem.parameters())
    for block in m.blocks[: scaffold.tap]:
        shallow += list(block.parameters())
    deep = []
    for block in m.blocks[scaffold.tap :]:
        deep += list(block.parameters())
    deep += list(m.head.parameters())
    return shallow, deep, list(scaffold.aux.parameters())


def count_parameters(module: nn.Module | list[nn.Parameter]) -> int:
    params = module.parameters() if isinstance(module, nn.Module) else module
    return sum(p.numel() for p in params)


# ---------------------------------------------------------------------------
# registry

MODEL_REGISTRY: dict[str, Callable[[int, int], BlockSequentialModel]] = {}
DEFAULT_TAPS: dict[str, int] = {}


def register_model(name: str, default_tap: int = 2):
    def deco(fn):
        MODEL_REGISTRY[name] = fn
        DEFAULT_TAPS[name] = default_tap
        return fn

    return deco


@register_model("tiny-resnet-3block")
def _tiny_resnet_3block(num_classes: int, in_channels: int = 3) -> BlockSequentialModel:
    return BlockSequentialModel(num_classes, (16, 32, 64), (1, 1, 1), in_channels, "tiny-resnet-3block")


@register_model("tiny-resnet-4block")
def _tiny_resnet_4block(num_classes: int, in_channels: int = 3) -> BlockSequentialModel:
    return BlockSequentialModel(num_classes, (16, 32, 64, 128), (1, 1, 1, 1), in_channels, "tiny-resnet-4block")


@register_model("small-resnet-3block")
def _small_resnet_3block(num_classes: int, in_channels: int = 3) -> BlockSequentialModel:
    return BlockSequentialModel(num_classes, (32, 64, 128), (2, 2, 2), in_channels, "small-resnet-3block")


@register_model("resnet18-style")
def _resnet18_style(num_classes: int, in_channels: int = 3) -> BlockSequentialModel:
    return BlockSequentialModel(num_classes, (64, 128, 256, 512), (2, 2, 2, 2), in_channels, "resnet18-style")


@register_model("resnet34-style")
def _resnet34_style(num_classes: int, in_channels: int = 3) -> BlockSequentialModel:
    return BlockSequentialModel(num_classes, (64, 128, 256, 512), (3, 4, 6, 3), in_channels, "resnet34-style")


def model_registry(name: str, num_classes: int, in_channels: int = 3) -> BlockSequentialModel:
    """Build a registered model by name."""
    try:
        factory = MODEL_REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; available: {', '.join(sorted(MODEL_REGISTRY))}") from None
    return factory(num_classes, in_channels)


def default_tap(name: str) -> int:
    return DEFAULT_TAPS.get(name, 2)


def ac_spec_dict(spec: ACSpec) -> dict:
    return asdict(spec)
