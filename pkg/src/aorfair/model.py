"""Split-model: a shared dense trunk feeding a task head and an attribute head.

Both heads read the trunk's last (feature) layer, so their first dense
weights share a row count ``d`` -- these are the two matrices the
orthogonality penalty compares.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numcore import Dense, Layer, Parameter, ReLU, forward

MAGIC = b"AORM"
FORMAT_VERSION = 1
SELECTORS = ("trunk", "head_task", "head_attr")


class ConfigError(ValueError):
    pass


@dataclass
class SplitModelConfig:
    """Layer widths for the split model.

    ``head1_widths`` / ``head2_widths`` list every dimension of the head's
    dense chain starting with its input, e.g. ``(16, 16, 4)`` is
    16 -> 16 (ReLU) -> 4 logits.
    """

    input_dim: int = 24
    trunk_widths: tuple[int, ...] = (32, 16)
    head1_widths: tuple[int, ...] = (16, 16, 4)
    head2_widths: tuple[int, ...] = (16, 16, 2)
    seed: int = 0

    def __post_init__(self):
        self.trunk_widths = tuple(int(w) for w in self.trunk_widths)
        self.head1_widths = tuple(int(w) for w in self.head1_widths)
        self.head2_widths = tuple(int(w) for w in self.head2_widths)

    def validate(self):
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        if not self.trunk_widths:
            raise ConfigError("trunk_widths must be non-empty")
        widths = self.trunk_widths + self.head1_widths + self.head2_widths
        if any(w < 1 for w in widths):
            raise ConfigError(f"all widths must be positive: {widths}")
        d = self.trunk_widths[-1]
        for name, head in (("head1_widths", self.head1_widths), ("head2_widths", self.head2_widths)):
            if len(head) < 2:
                raise ConfigError(f"{name} needs an input width and an output width")
            if head[0] != d:
                raise ConfigError(
                    f"{name} starts at {head[0]} but the last trunk width is {d}")
        if self.head1_widths[-1] < 2:
            raise ConfigError("task head needs at least 2 classes")
        if self.head2_widths[-1] != 2:
            raise ConfigError("attribute head must have exactly 2 outputs")
        return self

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _stack(dims, rng, prefix, final_relu):
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(Dense.init(a, b, rng, name=f"{prefix}.{i}"))
        if final_relu or i < len(dims) - 2:
            layers.append(ReLU(b))
    return layers


@dataclass(eq=False)
class SplitModel:
    config: SplitModelConfig
    trunk: list[Layer]
    head_task: list[Layer]
    head_attr: list[Layer]
    stage: str = "init"
    _by_name: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_name = {p.name: p for p in self.parameters()}

    def stack(self, selector) -> list[Layer]:
        if selector not in SELECTORS:
            raise KeyError(f"unknown layer stack {selector!r}; expected one of {SELECTORS}")
        return getattr(self, selector)

    def parameters(self, selector=None) -> list[Parameter]:
        names = SELECTORS if selector is None else (selector,)
        return [p for s in names for layer in self.stack(s) for p in layer.parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def param(self, name) -> Parameter:
        return self._by_name[name]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def features(self, X):
        return forward(self.trunk, X).output

    def task_logits(self, X):
        return forward(self.head_task, self.features(X)).output

    def attr_logits(self, X):
        return forward(self.head_attr, self.features(X)).output

    def forward_heads(self, X):
        """One trunk pass feeding both heads: (features, task logits, attribute logits)."""
        feats = self.features(X)
        return feats, forward(self.head_task, feats).output, forward(self.head_attr, feats).output


def build_split_model(cfg: SplitModelConfig) -> SplitModel:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    trunk = _stack((cfg.input_dim,) + cfg.trunk_widths, rng, "trunk", final_relu=True)
    head_task = _stack(cfg.head1_widths, rng, "head_task", final_relu=False)
    head_attr = _stack(cfg.head2_widths, rng, "head_attr", final_relu=False)
    return SplitModel(cfg, trunk, head_task, head_attr)


def set_trainable(model: SplitModel, selector: str, flag: bool):
    for p in model.parameters(selector):
        p.trainable = bool(flag)


def head_first_layer_weights(model: SplitModel, head: str) -> np.ndarray:
    """Live (aliased) first dense weight of a head: ``"task"`` or ``"attr"``."""
    layers = {"task": model.head_task, "attr": model.head_attr}[head]
    return first_dense(layers).weight.value


def first_dense(layers) -> Dense:
    return next(layer for layer in layers if isinstance(layer, Dense))


# -- checkpoint format --------------------------------------------------------
#
#   "AORM" | u32 version | u32 header length | UTF-8 JSON header | f64 LE blobs
#
# The header lists parameters in payload order with shape and trainable flag.

class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


def checkpoint_bytes(model: SplitModel, extra: dict | None = None) -> bytes:
    params = model.parameters()
    meta = {
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(model.config).items()},
        "seed": model.config.seed,
        "stage": model.stage,
        "parameters": [
            {"name": p.name, "shape": list(p.shape), "trainable": p.trainable} for p in params
        ],
        "extra": extra or {},
    }
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs = b"".join(p.value.astype("<f8").tobytes(order="C") for p in params)
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + blobs


def save_checkpoint(model: SplitModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model, extra))
    return path


def read_checkpoint_header(buf: bytes) -> tuple[dict, int]:
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than the magic number")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 12:
        raise TruncatedFileError("file ends inside the fixed header")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader supports {FORMAT_VERSION}")
    if len(buf) < 12 + hlen:
        raise TruncatedFileError("file ends inside the JSON metadata")
    try:
        meta = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable metadata: {e}") from e
    return meta, 12 + hlen


def checkpoint_from_bytes(buf: bytes) -> SplitModel:
    meta, offset = read_checkpoint_header(buf)
    cfg = SplitModelConfig.from_dict(meta["config"])
    model = build_split_model(cfg)
    entries = meta["parameters"]
    params = model.parameters()
    if [e["name"] for e in entries] != [p.name for p in params]:
        raise ShapeMismatchError("parameter list does not match the architecture in the config")
    expected = 0
    for e, p in zip(entries, params):
        if tuple(e["shape"]) != p.shape:
            raise ShapeMismatchError(f"{e['name']}: header shape {e['shape']} vs architecture {p.shape}")
        expected += 8 * int(np.prod(e["shape"]))
    payload = len(buf) - offset
    if payload < expected:
        raise TruncatedFileError(f"payload has {payload} bytes, header declares {expected}")
    if payload > expected:
        raise ShapeMismatchError(f"payload has {payload} bytes, header declares {expected}")
    for e, p in zip(entries, params):
        n = int(np.prod(e["shape"]))
        p.value[...] = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(p.shape)
        p.trainable = bool(e["trainable"])
        offset += 8 * n
    model.stage = meta["stage"]
    return model


def load_checkpoint(path) -> SplitModel:
    return checkpoint_from_bytes(Path(path).read_bytes())


def copy_model(model: SplitModel) -> SplitModel:
    return checkpoint_from_bytes(checkpoint_bytes(model))


def parameter_snapshot(model: SplitModel, selector=None) -> dict[str, np.ndarray]:
    return {p.name: p.value.copy() for p in model.parameters(selector)}

