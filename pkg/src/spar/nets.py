"""Segmenter, shape auto-encoder and discriminators, plus parameter checkpoints.

All tensors are NCHW. Masks fed to the shape encoder are C-channel
probability maps (hard one-hot for ground truth, softmax output for
predictions).
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

CODE_CHANNELS = 512
_MAGIC = b"SPARPRM1"


@dataclass
class NetConfig:
    input_size: int = 64
    classes: int = 4
    unet_levels: int = 4
    base_channels: int = 32
    ae_channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    disc_blocks: int = 3
    # running = momentum * running + (1 - momentum) * batch
    bn_momentum: float = 0.9
    mask_disc_channels: tuple[int, ...] = field(default=(32, 64, 128, 256))

    def __post_init__(self):
        self.ae_channels = tuple(int(c) for c in self.ae_channels)
        self.mask_disc_channels = tuple(int(c) for c in self.mask_disc_channels)
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.input_size % (2 ** self.unet_levels):
            raise ValueError(f"input_size {self.input_size} not divisible by 2**{self.unet_levels}")
        if self.input_size % (2 ** (len(self.ae_channels) - 1)):
            raise ValueError("input_size not divisible by the auto-encoder downsampling factor")
        if self.ae_channels[-1] != CODE_CHANNELS:
            raise ValueError(f"shape-code bottleneck must have {CODE_CHANNELS} channels")
        if self.disc_blocks < 1 or CODE_CHANNELS >> self.disc_blocks < 1:
            raise ValueError("invalid number of discriminator blocks")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must lie in [0, 1)")

    @property
    def code_size(self) -> int:
        return self.input_size // (2 ** (len(self.ae_channels) - 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ae_channels"] = list(self.ae_channels)
        d["mask_disc_channels"] = list(self.mask_disc_channels)
        return d


def _bn(channels: int, cfg: NetConfig) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels, momentum=1.0 - cfg.bn_momentum)


def _double_conv(cin: int, cout: int, cfg: NetConfig) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False), _bn(cout, cfg), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False), _bn(cout, cfg), nn.ReLU(inplace=True),
    )


def _check_input(x: torch.Tensor, channels: int, size: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != channels or x.shape[2] != size or x.shape[3] != size:
        raise ValueError(f"{what}: expected (N, {channels}, {size}, {size}), got {tuple(x.shape)}")


class UNet(nn.Module):
    """Segmenter S: encoder-decoder with skip connections and a softmax head."""

    role = "S"

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_channels * 2 ** i for i in range(cfg.unet_levels)]
        self.down = nn.ModuleList()
        cin = 1
        for w in widths:
            self.down.append(_double_conv(cin, w, cfg))
            cin = w
        bottleneck = cfg.base_channels * 2 ** cfg.unet_levels
        self.bottleneck = _double_conv(cin, bottleneck, cfg)
        cin = bottleneck
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for w in reversed(widths):
            self.up.append(nn.ConvTranspose2d(cin, w, 2, stride=2))
            self.merge.append(_double_conv(2 * w, w, cfg))
            cin = w
        self.head = nn.Conv2d(cin, cfg.classes, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, 1, self.cfg.input_size, "UNet")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, merge, skip in zip(self.up, self.merge, reversed(skips)):
            x = merge(torch.cat([up(x), skip], dim=1))
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


class ShapeEncoder(nn.Module):
    """Shape encoder F: mask probabilities -> non-negative (512, s/16, s/16) code."""

    role = "F"

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList()
        cin = cfg.classes
        for w in cfg.ae_channels[:-1]:
            self.blocks.append(_double_conv(cin, w, cfg))
            cin = w
        self.bottleneck = _double_conv(cin, cfg.ae_channels[-1], cfg)

    def forward(self, masks: torch.Tensor) -> torch.Tensor:
        _check_input(masks, self.cfg.classes, self.cfg.input_size, "ShapeEncoder")
        x = masks
        for block in self.blocks:
            x = F.max_pool2d(block(x), 2)
        return self.bottleneck(x)


class ShapeDecoder(nn.Module):
    """Shape decoder G: code -> per-pixel class probabilities. No skip path."""

    role = "G"

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.up = nn.ModuleList()
        self.blocks = nn.ModuleList()
        cin = cfg.ae_channels[-1]
        for w in reversed(cfg.ae_channels[:-1]):
            self.up.append(nn.ConvTranspose2d(cin, w, 2, stride=2))
            self.blocks.append(_double_conv(w, w, cfg))
            cin = w
        self.head = nn.Conv2d(cin, cfg.classes, 1)

    def forward(self, code: torch.Tensor) -> torch.Tensor:
        _check_input(code, CODE_CHANNELS, self.cfg.code_size, "ShapeDecoder")
        x = code
        for up, block in zip(self.up, self.blocks):
            x = block(up(x))
        return torch.softmax(self.head(x), dim=1)


class CodeDiscriminator(nn.Module):
    """Shape-code discriminator D: code -> probability of being a ground-truth code.

    Each block halves channels with a 1x1 convolution, then BN, ReLU and a
    2x2 max-pool (ceil mode, so a 1x1 map stays 1x1). A final 1x1
    convolution to one channel is averaged spatially and squashed by a sigmoid.
    """

    role = "D"

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.code_size < 2 ** (cfg.disc_blocks - 1):
            raise ValueError(
                f"code spatial size {cfg.code_size} too small for {cfg.disc_blocks} discriminator poolings")
        layers = []
        cin = CODE_CHANNELS
        for _ in range(cfg.disc_blocks):
            layers += [nn.Conv2d(cin, cin // 2, 1, bias=False), _bn(cin // 2, cfg), nn.ReLU(inplace=True),
                       nn.MaxPool2d(2, ceil_mode=True)]
            cin //= 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, 1, 1)

    def channel_path(self) -> list[int]:
        convs = [m for m in self.modules() if isinstance(m, nn.Conv2d)]
        return [convs[0].in_channels] + [c.out_channels for c in convs]

    def forward(self, code: torch.Tensor) -> torch.Tensor:
        _check_input(code, CODE_CHANNELS, self.cfg.code_size, "CodeDiscriminator")
        return torch.sigmoid(self.head(self.features(code)).mean(dim=(1, 2, 3)))


class MaskDiscriminator(nn.Module):
    """Mask discriminator for the adversarial-regularization comparator."""

    role = "M"

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        cin = cfg.classes
        for w in cfg.mask_disc_channels:
            layers += [nn.Conv2d(cin, w, 3, stride=2, padding=1, bias=False), _bn(w, cfg),
                       nn.LeakyReLU(0.2, inplace=True)]
            cin = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, 1, 1)

    def forward(self, masks: torch.Tensor) -> torch.Tensor:
        _check_input(masks, self.cfg.classes, self.cfg.input_size, "MaskDiscriminator")
        return torch.sigmoid(self.head(self.features(masks)).mean(dim=(1, 2, 3)))


ROLES = {"S": UNet, "F": ShapeEncoder, "G": ShapeDecoder, "D": CodeDiscriminator, "M": MaskDiscriminator}


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """Zero-mean He-normal (fan-in) weights, zero biases, unit BN scale."""
    gen = torch.Generator().manual_seed(int(seed) % (2 ** 63))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                # with kernel == stride, a transposed-conv output pixel sees one tap per input channel
                w = m.weight
                fan_in = w.shape[1] * w.shape[2] * w.shape[3] if isinstance(m, nn.Conv2d) else w.shape[0]
                w.normal_(0.0, float(np.sqrt(2.0 / fan_in)), generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.reset_parameters()
                m.reset_running_stats()
    return model


def build(role: str, cfg: NetConfig, seed: int = 0) -> nn.Module:
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    return init_weights(ROLES[role](cfg), seed)


def freeze(model: nn.Module) -> nn.Module:
    """Put a model in inference mode with gradients disabled for its parameters."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def gradients(loss: torch.Tensor, model: nn.Module) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for every parameter of ``model``.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.ndim != 0:
        raise ValueError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    named = [(n, p) for n, p in model.named_parameters()]
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True, retain_graph=True)
    return {n: torch.zeros_like(p) if g is None else g for (n, p), g in zip(named, grads)}


# ---------------------------------------------------------------------------
# checkpoints: 8-byte magic, u64 manifest length, JSON manifest, f32 payload


def save_params(model: nn.Module, path) -> None:
    state = model.state_dict()
    tensors, chunks, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().numpy()
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name} has non-finite values")
        data = arr.astype("<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": str(arr.dtype)})
        chunks.append(data)
        offset += len(data)
    manifest = {"role": model.role, "config": model.cfg.to_dict(), "tensors": tensors}
    blob = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<Q", len(blob)) + blob)
        for c in chunks:
            fh.write(c)


def load_params(path, expect_role: str | None = None) -> nn.Module:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + n])
    payload = memoryview(raw)[16 + n:]
    role = manifest["role"]
    if expect_role is not None and role != expect_role:
        raise ValueError(f"{path}: checkpoint role {role!r}, expected {expect_role!r}")
    model = ROLES[role](NetConfig(**manifest["config"]))
    state = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).astype(entry["dtype"]))
    model.load_state_dict(state)
    return model
