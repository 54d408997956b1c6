"""Classifier families with width scaling, budget plans and conditional generators."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

FAMILIES = ("CNN4_BN", "RESNET18", "RESNET20", "RESNET34")
MERGES = ("MUL", "ADD", "CAT", "NCAT", "NONE")
CHECKPOINT_SCHEMA = 1

DEFAULT_WIDTHS = {
    "CNN4_BN": (64, 128, 256, 512),
    "RESNET18": (64, 128, 256, 512),
    "RESNET34": (64, 128, 256, 512),
    "RESNET20": (16, 32, 64),
}
RESNET_BLOCKS = {"RESNET18": (2, 2, 2, 2), "RESNET34": (3, 4, 6, 3), "RESNET20": (3, 3, 3)}
GENERATOR_WIDTHS = {16: (64,), 32: (512, 256, 128), 64: (512, 256, 128, 64)}


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    family: str
    num_classes: int
    input_shape: tuple[int, int, int]
    width_ratio: float = 1.0
    base_widths: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown model family {self.family!r}")
        if not 0 < self.width_ratio <= 1:
            raise ConfigurationError(f"width_ratio must lie in (0, 1], got {self.width_ratio}")
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if self.base_widths is not None:
            object.__setattr__(self, "base_widths", tuple(int(w) for w in self.base_widths))

    @property
    def widths(self) -> tuple[int, ...]:
        base = self.base_widths or DEFAULT_WIDTHS[self.family]
        out = tuple(math.ceil(self.width_ratio * w) for w in base)
        if any(w < 1 for w in out):
            raise ConfigurationError(f"width ratio {self.width_ratio} leaves a layer with no channels: {out}")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["base_widths"] = list(self.base_widths) if self.base_widths else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["family"], int(d["num_classes"]), tuple(d["input_shape"]), float(d["width_ratio"]),
                   tuple(d["base_widths"]) if d.get("base_widths") else None)


@dataclass(frozen=True)
class BudgetPlan:
    num_clients: int
    sigma: int
    rho: int
    ratios: tuple[float, ...]


def budget_plan(num_clients: int, sigma: int, rho: int) -> BudgetPlan:
    """Exponential width budgets: client i (1-based) gets (1/2) ** min(sigma, floor(rho * i / N))."""
    if num_clients < 1 or sigma < 0 or rho < 0:
        raise ValueError("need num_clients >= 1 and sigma, rho >= 0")
    ratios = tuple(0.5 ** min(sigma, (rho * i) // num_clients) for i in range(1, num_clients + 1))
    return BudgetPlan(num_clients, sigma, rho, ratios)


def extract_submodel(global_spec: ModelSpec, ratio: float) -> ModelSpec:
    spec = replace(global_spec, width_ratio=global_spec.width_ratio * ratio)
    spec.widths  # noqa: B018 - validates channel counts
    return spec


# ---------------------------------------------------------------------------
# classifiers

def _conv_bn(cin: int, cout: int, stride: int = 1) -> list[nn.Module]:
    return [nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout)]


class CNN4(nn.Module):
    """Four conv-BN-ReLU blocks, each halving the resolution with a stride-2 convolution."""

    def __init__(self, in_ch: int, widths: Sequence[int], num_classes: int):
        super().__init__()
        layers: list[nn.Module] = []
        cin = in_ch
        for w in widths:
            layers += [*_conv_bn(cin, w, stride=2), nn.ReLU(inplace=True)]
            cin = w
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(cin, num_classes)

    def forward(self, x):
        return self.fc(self.pool(self.features(x)).flatten(1))


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1, self.bn1 = _conv_bn(cin, cout, stride)
        self.conv2, self.bn2 = _conv_bn(cout, cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class ResNet(nn.Module):
    def __init__(self, in_ch: int, widths: Sequence[int], blocks: Sequence[int], num_classes: int):
        super().__init__()
        self.conv1, self.bn1 = _conv_bn(in_ch, widths[0])
        stages = []
        cin = widths[0]
        for s, (w, n) in enumerate(zip(widths, blocks)):
            for b in range(n):
                stages.append(BasicBlock(cin, w, 2 if (s > 0 and b == 0) else 1))
                cin = w
        self.layers = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(cin, num_classes)

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        return self.fc(self.pool(self.layers(out)).flatten(1))


def build_model(spec: ModelSpec, seed: int) -> nn.Module:
    """Instantiate ``spec`` with a deterministic initialisation. The module carries ``.spec``."""
    in_ch = spec.input_shape[0]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if spec.family == "CNN4_BN":
            model = CNN4(in_ch, spec.widths, spec.num_classes)
        else:
            model = ResNet(in_ch, spec.widths, RESNET_BLOCKS[spec.family], spec.num_classes)
    model.spec = spec
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def slice_state(global_state: dict[str, torch.Tensor], sub_model: nn.Module) -> dict[str, torch.Tensor]:
    """Prefix-channel slice of a full-width state dict to the shapes of ``sub_model``."""
    out = {}
    for name, target in sub_model.state_dict().items():
        src = global_state[name]
        if src.dim() == 0:
            out[name] = src.clone()
        else:
            out[name] = src[tuple(slice(0, n) for n in target.shape)].clone()
    return out


def average_states(states: Sequence[dict[str, torch.Tensor]]) -> dict[str, torch.Tensor]:
    out = {}
    for name, ref in states[0].items():
        stacked = torch.stack([s[name].to(torch.float64) for s in states])
        mean = stacked.mean(0)
        out[name] = mean.round().to(ref.dtype) if not ref.is_floating_point() else mean.to(ref.dtype)
    return out


# ---------------------------------------------------------------------------
# conditional generators

class _Projection(nn.ConvTranspose2d):
    """Transposed convolution applied to a 1x1 input, computed as the equivalent matrix product.

    Same parameters and state dict as ``nn.ConvTranspose2d``; the generic CPU
    kernel is several times slower for this degenerate case.
    """

    def forward(self, x, output_size=None):
        if x.shape[-2:] != (1, 1):
            return super().forward(x, output_size)
        k = self.kernel_size
        out = x.flatten(1) @ self.weight.reshape(self.in_channels, -1)
        out = out.view(x.shape[0], self.out_channels, *k)
        return out + self.bias.view(1, -1, 1, 1) if self.bias is not None else out


class ConditionalGenerator(nn.Module):
    """DCGAN-style deconvolution stack fed with a label-merged noise vector.

    ``merge`` picks how the label enters: MUL multiplies the noise by a learned
    class embedding, ADD adds it, CAT concatenates it, NCAT concatenates the
    label itself (scaled to [0, 1]) and NONE ignores the label.
    """

    def __init__(self, image_shape: Sequence[int], num_classes: int, noise_dim: int, merge: str = "MUL",
                 widths: Sequence[int] | None = None):
        super().__init__()
        merge = merge.upper()
        if merge not in MERGES:
            raise ConfigurationError(f"unknown merge operator {merge!r}")
        channels, height, width = image_shape
        if height != width:
            raise ConfigurationError("generators need square images")
        if widths is None:
            if height not in GENERATOR_WIDTHS:
                raise ConfigurationError(f"no generator architecture for {height}x{width} images")
            widths = GENERATOR_WIDTHS[height]
        widths = tuple(int(w) for w in widths)
        first_side = height >> len(widths)
        if first_side < 1 or first_side << len(widths) != height:
            raise ConfigurationError(f"{len(widths)} upsampling stages cannot reach side {height}")
        self.image_shape = tuple(image_shape)
        self.num_classes = num_classes
        self.noise_dim = noise_dim
        self.merge_op = merge
        self.widths = widths
        self.embedding = nn.Embedding(num_classes, noise_dim) if merge in ("MUL", "ADD", "CAT") else None
        in_dim = {"CAT": 2 * noise_dim, "NCAT": noise_dim + 1}.get(merge, noise_dim)
        self.input_dim = in_dim

        layers: list[nn.Module] = [_Projection(in_dim, widths[0], first_side, 1, 0), nn.ReLU()]
        for cin, cout in zip(widths, widths[1:]):
            layers += [nn.ConvTranspose2d(cin, cout, 4, 2, 1), nn.BatchNorm2d(cout), nn.ReLU()]
        layers += [nn.ConvTranspose2d(widths[-1], channels, 4, 2, 1), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def merge(self, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if self.merge_op == "NONE":
            return z
        if self.merge_op == "NCAT":
            scale = max(self.num_classes - 1, 1)
            return torch.cat([z, (y.to(z.dtype) / scale).unsqueeze(1)], dim=1)
        e = self.embedding(y)
        if self.merge_op == "MUL":
            return z * e
        if self.merge_op == "ADD":
            return z + e
        return torch.cat([z, e], dim=1)

    def decode(self, h: torch.Tensor) -> torch.Tensor:
        return self.net(h.reshape(h.shape[0], -1, 1, 1))

    def forward(self, z, y):
        return self.decode(self.merge(z, y))

    def config(self) -> dict:
        return {"image_shape": list(self.image_shape), "num_classes": self.num_classes,
                "noise_dim": self.noise_dim, "merge": self.merge_op, "widths": list(self.widths)}


def build_generator(image_shape: Sequence[int], num_classes: int, noise_dim: int, merge: str = "MUL",
                    seed: int = 0, widths: Sequence[int] | None = None) -> ConditionalGenerator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ConditionalGenerator(image_shape, num_classes, noise_dim, merge, widths)


def merge_inputs(gen: ConditionalGenerator, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return gen.merge(z, y)


# ---------------------------------------------------------------------------
# checkpoints: npz archive of named arrays plus a JSON header

def save_checkpoint(model: nn.Module, path: str | Path) -> None:
    if isinstance(model, ConditionalGenerator):
        header = {"schema": CHECKPOINT_SCHEMA, "kind": "generator", "config": model.config()}
    else:
        header = {"schema": CHECKPOINT_SCHEMA, "kind": "classifier", "spec": model.spec.to_dict()}
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> nn.Module:
    with np.load(path) as archive:
        header = json.loads(archive["__header__"].tobytes().decode())
        if header.get("schema") != CHECKPOINT_SCHEMA:
            raise ConfigurationError(f"{path}: unsupported checkpoint schema {header.get('schema')!r}")
        state = {k: torch.from_numpy(archive[k].copy()) for k in archive.files if k != "__header__"}
    if header["kind"] == "generator":
        cfg = header["config"]
        model = ConditionalGenerator(cfg["image_shape"], cfg["num_classes"], cfg["noise_dim"], cfg["merge"], cfg["widths"])
    else:
        model = build_model(ModelSpec.from_dict(header["spec"]), seed=0)
    model.load_state_dict(state)
    return model
