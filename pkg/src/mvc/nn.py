"""Two-branch CMC network: per-view conv encoders, L2-normalized projections,
and the linear classification head used for transfer."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict) -> None:
        expected = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(expected) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in expected.items():
            if state[name].shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=T.get_dtype())
        for name, b in buffers.items():
            b[...] = state[name]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, rng=None):
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = T.parameter(
            kaiming_uniform((out_channels, in_channels, kernel_size, kernel_size), fan_in, rng)
        )
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = T.parameter(np.ones(channels))
        self.beta = T.parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=T.get_dtype())
        self.running_var = np.ones(channels, dtype=T.get_dtype())
        self.momentum = momentum
        self.eps = eps
        # finetuning may keep the statistics fixed while training the rest
        self.freeze_stats = False

    def forward(self, x):
        return T.batch_norm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training and not self.freeze_stats,
            momentum=self.momentum,
            eps=self.eps,
        )


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None):
        rng = rng or np.random.default_rng(0)
        self.weight = T.parameter(kaiming_uniform((out_features, in_features), in_features, rng))
        self.bias = T.parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


@dataclass
class EncoderConfig:
    in_channels: int
    stage_widths: list = field(default_factory=lambda: [16, 32, 64, 64])
    kernel_size: int = 3
    embedding_dim: int = 64

    def __post_init__(self):
        self.stage_widths = list(self.stage_widths)
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if not self.stage_widths:
            raise ValueError("stage_widths must not be empty")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")


class Encoder(Module):
    """Stride-2 conv -> batch norm -> ReLU stages, then global average pooling."""

    def __init__(self, config: EncoderConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        self.config = config
        self.convs, self.norms = [], []
        width = config.in_channels
        for out in config.stage_widths:
            self.convs.append(Conv2d(width, out, config.kernel_size, 2, config.kernel_size // 2, rng))
            self.norms.append(BatchNorm2d(out))
            width = out
        self.head = None
        if config.embedding_dim != width:
            self.head = Linear(width, config.embedding_dim, rng=rng)

    def feature_map(self, x):
        for conv, norm in zip(self.convs, self.norms):
            x = T.relu(norm(conv(x)))
        return x

    def forward(self, x):
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise T.ShapeError(
                f"encoder expects [N, {self.config.in_channels}, H, W], got {x.shape}"
            )
        z = T.global_avg_pool(self.feature_map(x))
        return self.head(z) if self.head is not None else z


class Projection(Module):
    """Linear layer followed by L2 normalization."""

    def __init__(self, in_features, out_features, rng=None):
        self.linear = Linear(in_features, out_features, rng=rng)

    def forward(self, z):
        return T.l2_normalize(self.linear(z), axis=1)


class CmcModel(Module):
    def __init__(self, config1: EncoderConfig, config2: EncoderConfig, d_h: int = 32, seed: int = 0):
        from .config import rng_stream

        rng = rng_stream(seed, "init")
        self.encoder1 = Encoder(config1, rng)
        self.encoder2 = Encoder(config2, rng)
        self.proj1 = Projection(config1.embedding_dim, d_h, rng)
        self.proj2 = Projection(config2.embedding_dim, d_h, rng)
        self.d_h = d_h
        self.seed = seed

    @classmethod
    def for_views(cls, channels1: int, channels2: int, d_h: int = 32, seed: int = 0, **encoder_kwargs):
        return cls(
            EncoderConfig(channels1, **encoder_kwargs), EncoderConfig(channels2, **encoder_kwargs), d_h, seed
        )

    @property
    def feature_dim(self) -> int:
        return self.encoder1.config.embedding_dim + self.encoder2.config.embedding_dim

    def encode(self, view1, view2):
        return self.encoder1(view1), self.encoder2(view2)

    def project(self, z1, z2):
        for z, proj in ((z1, self.proj1), (z2, self.proj2)):
            if z.ndim != 2 or z.shape[1] != proj.linear.weight.shape[1]:
                raise T.ShapeError(f"projection expects [N, {proj.linear.weight.shape[1]}], got {z.shape}")
        return self.proj1(z1), self.proj2(z2)

    def forward(self, view1, view2):
        return self.project(*self.encode(view1, view2))

    def features(self, view1, view2):
        """Differentiable concat(z1, z2), used by finetuning."""
        z1, z2 = self.encode(view1, view2)
        return T.concat([z1, z2], axis=1)

    def extract_features(self, view1, view2) -> np.ndarray:
        """Frozen eval-mode representation concat(z1, z2) as a plain array."""
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                out = self.features(view1, view2).data.copy()
        finally:
            self.train(was_training)
        return out

    def manifest(self) -> dict:
        return {
            "encoder_config": [asdict(self.encoder1.config), asdict(self.encoder2.config)],
            "d_h": self.d_h,
            "seed": self.seed,
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> "CmcModel":
        c1, c2 = manifest["encoder_config"]
        return cls(EncoderConfig(**c1), EncoderConfig(**c2), manifest["d_h"], manifest.get("seed", 0))


class ClassifierHead(Module):
    """Linear head; ``single_label`` pairs with softmax cross-entropy, ``multi_label`` with sigmoid BCE."""

    MODES = ("single_label", "multi_label")

    def __init__(self, feature_dim: int, num_classes: int, mode: str = "single_label", rng=None):
        if mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}, got {mode!r}")
        self.linear = Linear(feature_dim, num_classes, rng=rng)
        self.mode = mode
        self.num_classes = num_classes

    def forward(self, features):
        return self.linear(features)

    def loss(self, features, target) -> Tensor:
        logits = self(features)
        if self.mode == "single_label":
            target = np.asarray(target).reshape(-1)
            if target.shape[0] != logits.shape[0]:
                raise T.ShapeError(f"{target.shape[0]} targets for {logits.shape[0]} rows")
            return T.softmax_cross_entropy(logits, target)
        target = np.asarray(target)
        if target.shape != logits.shape:
            raise T.ShapeError(f"multi-hot targets {target.shape} do not match logits {logits.shape}")
        return T.sigmoid_binary_cross_entropy(logits, target)

    def predict(self, features) -> np.ndarray:
        """Class indices (single-label) or per-class scores (multi-label)."""
        with T.no_grad():
            logits = self(features).data
        if self.mode == "single_label":
            return logits.argmax(axis=1)
        return logits


def save_module(module: Module, directory, manifest: Optional[dict] = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, array in module.state_dict().items():
        T.save_array(directory / name, array)
    if manifest is not None:
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_state(module: Module, directory) -> None:
    directory = Path(directory)
    names = [n for n, _ in module.named_parameters()] + [n for n, _ in module.named_buffers()]
    module.load_state_dict({name: T.load_array(directory / name) for name in names})
