"""Compact 3D convolutional feature extractors.

A backbone is a stack of strided 3D convolutions with a pooled linear
classifier on top. Exports tap the output of the last convolution stage,
before global pooling, so the feature map keeps the clip's temporal and
spatial layout. Weights load from a state-dict file when one is given;
otherwise every parameter is drawn from a generator seeded by the
architecture name, which keeps repeated exports byte-identical.
"""

import hashlib
from typing import Dict, Optional, Sequence, Tuple

import torch
from torch import nn

from . import ExportError

# Stage channel widths. Every stage is Conv3d(kernel 3, stride 2, padding 1)
# + ReLU, so each stage halves (rounding up) every spatiotemporal axis and
# the last width is the exported feature depth D.
_ARCHITECTURES: Dict[str, Tuple[int, ...]] = {
    "conv3d-8": (4, 8, 8),
    "conv3d-64": (16, 32, 64),
}
_HEAD_CLASSES = 16


def available_backbones() -> Tuple[str, ...]:
    return tuple(sorted(_ARCHITECTURES))


class Conv3dBackbone(nn.Module):
    """Strided convolution stages, global average pooling, linear classifier.

    `features` stops before the pooling step and is what exports consume;
    `forward` runs the whole classifier and exists so trained
    action-recognition weights for this architecture load unchanged.
    """

    def __init__(self, stage_channels: Sequence[int], num_classes: int = _HEAD_CLASSES):
        super().__init__()
        layers = []
        prev = 3
        for width in stage_channels:
            layers.append(nn.Conv3d(prev, width, kernel_size=3, stride=2, padding=1))
            layers.append(nn.ReLU(inplace=True))
            prev = width
        self.stages = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.head = nn.Linear(prev, num_classes)

    def features(self, clip: torch.Tensor) -> torch.Tensor:
        """Pre-pooling feature map, (N, D, T', H', W') for (N, 3, T, H, W) input."""
        return self.stages(clip)

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        pooled = self.pool(self.features(clip)).flatten(1)
        return self.head(pooled)


def _seed_for(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _init_parameters(module: nn.Module, seed: int) -> None:
    generator = torch.Generator().manual_seed(seed)
    # Sorted name order makes the draw sequence independent of registration
    # details; weights get 1/sqrt(fan_in) scaling, biases start at zero.
    for _, param in sorted(module.named_parameters(), key=lambda item: item[0]):
        if param.dim() > 1:
            fan_in = param[0].numel()
            param.data.normal_(0.0, fan_in ** -0.5, generator=generator)
        else:
            param.data.zero_()


def build_backbone(identifier: str, weights_path: Optional[str] = None) -> Conv3dBackbone:
    """Build a backbone ready for feature extraction (eval mode, frozen)."""
    try:
        stage_channels = _ARCHITECTURES[identifier]
    except KeyError:
        raise ExportError(
            f"unknown backbone {identifier!r}; available: {', '.join(available_backbones())}"
        ) from None
    module = Conv3dBackbone(stage_channels)
    if weights_path is None:
        _init_parameters(module, _seed_for(identifier))
    else:
        try:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            module.load_state_dict(state)
        except Exception as exc:
            raise ExportError(f"cannot load backbone weights {weights_path}: {exc}") from exc
    module.eval()
    module.requires_grad_(False)
    return module
