"""Multi-stage convolutional backbone with cascaded hash features and two classification branches."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ndtensor as nt
from .fileio import FormatError, decode_container, encode_container
from .ndtensor import ConfigurationError, ShapeError, Tensor

SUPPORTED_BITS = (12, 24, 32, 48)
CHECKPOINT_KIND = "checkpoint"


@dataclass(frozen=True)
class NetConfig:
    """Architecture description.  Stage indices are 1-based, shallow to deep."""

    stages: tuple = ((3, 16), (16, 32), (32, 64))
    stage_feature_dim: int = 32
    code_bits: int = 12
    num_classes: int = 8
    input_size: tuple = (3, 64, 64)
    enabled_stages: tuple = (1, 2, 3)
    kernel: int = 3
    # per-channel input standardization applied before the first stage
    pixel_mean: tuple = (0.5, 0.5, 0.5)
    pixel_std: tuple = (0.25, 0.25, 0.25)

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(int(v) for v in s) for s in self.stages))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "enabled_stages", tuple(int(v) for v in self.enabled_stages))
        object.__setattr__(self, "pixel_mean", tuple(float(v) for v in self.pixel_mean))
        object.__setattr__(self, "pixel_std", tuple(float(v) for v in self.pixel_std))
        self.validate()

    @property
    def depth(self) -> int:
        return len(self.stages)

    def validate(self) -> None:
        if not self.stages:
            raise ConfigurationError("at least one backbone stage is required")
        c, h, w = self.input_size
        if self.stages[0][0] != c:
            raise ConfigurationError(f"first stage expects {self.stages[0][0]} channels, input has {c}")
        for (_, cout), (cin, _) in zip(self.stages, self.stages[1:]):
            if cout != cin:
                raise ConfigurationError(f"stage channel chain broken: {cout} -> {cin}")
        div = 2**self.depth
        if h % div or w % div:
            raise ConfigurationError(f"input {h}x{w} not divisible by 2^{self.depth}")
        if self.kernel % 2 != 1:
            raise ConfigurationError("backbone kernel must be odd")
        if self.code_bits not in SUPPORTED_BITS:
            raise ConfigurationError(f"code_bits must be one of {SUPPORTED_BITS}, got {self.code_bits}")
        if len(self.pixel_mean) != c or len(self.pixel_std) != c or min(self.pixel_std) <= 0:
            raise ConfigurationError(f"pixel_mean / pixel_std need {c} entries with positive std")
        if self.stage_feature_dim < 1 or self.num_classes < 2:
            raise ConfigurationError("stage_feature_dim >= 1 and num_classes >= 2 required")
        en = self.enabled_stages
        if not en:
            raise ConfigurationError("enabled_stages must not be empty")
        if list(en) != sorted(set(en)):
            raise ConfigurationError(f"enabled_stages must be strictly ascending, got {en}")
        if en[0] < 1 or en[-1] > self.depth:
            raise ConfigurationError(f"enabled_stages {en} outside 1..{self.depth}")
        if en[-1] != self.depth:
            raise ConfigurationError("enabled_stages must include the deepest stage")

    def stage_shapes(self, batch: int = 1) -> list[tuple]:
        _, h, w = self.input_size
        out = []
        for j, (_, cout) in enumerate(self.stages, 1):
            out.append((batch, cout, h >> j, w >> j))
        return out

    @property
    def global_dim(self) -> int:
        return self.stage_feature_dim * len(self.enabled_stages)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        d["input_size"] = list(self.input_size)
        d["enabled_stages"] = list(self.enabled_stages)
        d["pixel_mean"] = list(self.pixel_mean)
        d["pixel_std"] = list(self.pixel_std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


class NetParams:
    """Named parameter tensors for one network.

    Both classification branches read the same tensors, so an update through
    either branch is visible to the other.
    """

    def __init__(self, config: NetConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        expected = param_shapes(config)
        if set(expected) != set(tensors):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ConfigurationError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"parameter {name}: shape {tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "NetParams":
        return NetParams(
            self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()}
        )

    @classmethod
    def init(cls, config: NetConfig, seed: int = 0) -> "NetParams":
        """He-normal convolution kernels, scaled-normal linear layers, zero biases.

        The global hash layer starts at zero so its regression cannot push on
        the backbone before it has learned anything about the targets.

        Each tensor draws from its own stream keyed by ``(seed, name)``, so two
        configurations built from one seed share the starting values of every
        parameter they have in common (stage ablations rely on this).
        """
        tensors = {}
        for name, shape in param_shapes(config).items():
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            if name.endswith(".bias") or name == "hash.weight":
                data = np.zeros(shape)
            elif len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
                data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            else:
                data = rng.standard_normal(shape) / np.sqrt(shape[0])
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(config, tensors)


def param_shapes(config: NetConfig) -> dict[str, tuple]:
    d, k, l = config.stage_feature_dim, config.code_bits, config.num_classes
    shapes: dict[str, tuple] = {}
    for j, (cin, cout) in enumerate(config.stages, 1):
        shapes[f"stage{j}.weight"] = (cout, cin, config.kernel, config.kernel)
        shapes[f"stage{j}.bias"] = (cout,)
    for j in config.enabled_stages:
        cout = config.stages[j - 1][1]
        shapes[f"block{j}.weight"] = (d, cout, 1, 1)
        shapes[f"block{j}.bias"] = (d,)
        shapes[f"stage_hash{j}.weight"] = (d, k)
        shapes[f"stage_hash{j}.bias"] = (k,)
    shapes["hash.weight"] = (config.global_dim, k)
    shapes["hash.bias"] = (k,)
    shapes["raw_hash.weight"] = (d, k)
    shapes["raw_hash.bias"] = (k,)
    shapes["classifier.weight"] = (k, l)
    shapes["classifier.bias"] = (l,)
    return shapes


@dataclass
class ForwardOutputs:
    stage_maps: list
    stage_features: dict  # stage index -> N x d
    f_global: Tensor
    h_global: Tensor
    c_org: Tensor
    logits_org: Tensor
    logits_aug: Optional[Tensor] = None
    c_aug: Optional[Tensor] = None
    stage_codes: dict = field(default_factory=dict)


def _bias4(b: Tensor) -> Tensor:
    return nt.reshape(b, (1, b.shape[0], 1, 1))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return nt.add(nt.matmul(x, w), nt.reshape(b, (1, b.shape[0])))


def forward_backbone(image: Tensor, params: NetParams) -> list[Tensor]:
    """Standardize the input, then run every stage: conv(3x3, same padding) -> bias -> ReLU -> 2x2 max-pool."""
    cfg = params.config
    image = nt.as_tensor(image)
    if image.ndim != 4 or image.shape[1:] != cfg.input_size:
        raise ConfigurationError(f"image shape {image.shape} does not match input size {cfg.input_size}")
    maps = []
    mean = np.asarray(cfg.pixel_mean).reshape(1, -1, 1, 1)
    inv_std = 1.0 / np.asarray(cfg.pixel_std).reshape(1, -1, 1, 1)
    x = nt.mul(nt.sub(image, Tensor(mean)), Tensor(inv_std))
    pad = cfg.kernel // 2
    for j in range(1, cfg.depth + 1):
        x = nt.conv2d(x, params[f"stage{j}.weight"], 1, pad)
        x = nt.relu(nt.add(x, _bias4(params[f"stage{j}.bias"])))
        x = nt.maxpool2(x)
        maps.append(x)
    return maps


def stage_block(stage_map: Tensor, j: int, params: NetParams) -> Tensor:
    """1x1 convolution to d channels, ReLU, global average pool -> N x d."""
    y = nt.conv2d(stage_map, params[f"block{j}.weight"])
    y = nt.relu(nt.add(y, _bias4(params[f"block{j}.bias"])))
    return nt.global_avg_pool(y)


def stage_features(stage_maps: Sequence[Tensor], params: NetParams) -> dict[int, Tensor]:
    return {j: stage_block(stage_maps[j - 1], j, params) for j in params.config.enabled_stages}


def fuse_global(features: Sequence[tuple[int, Tensor]]) -> Tensor:
    """Concatenate ``(stage_index, f_j)`` pairs; indices must be strictly ascending."""
    if not features:
        raise ValueError("fuse_global needs at least one stage feature")
    idx = [j for j, _ in features]
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ValueError(f"stage features must be in ascending stage order, got {idx}")
    if len(features) == 1:
        return features[0][1]
    return nt.concat([f for _, f in features], axis=1)


def hash_projection(f_global: Tensor, params: NetParams) -> Tensor:
    w = params["hash.weight"]
    if f_global.shape[-1] != w.shape[0]:
        raise ShapeError(f"global feature width {f_global.shape[-1]} != hash input width {w.shape[0]}")
    return _linear(f_global, w, params["hash.bias"])


def raw_code(f_org: Tensor, params: NetParams) -> Tensor:
    """Pre-sign code of a single-branch feature (the raw-branch hash layer)."""
    return _linear(f_org, params["raw_hash.weight"], params["raw_hash.bias"])


def classify(code: Tensor, params: NetParams) -> Tensor:
    return _linear(code, params["classifier.weight"], params["classifier.bias"])


def branch_logits(top_map: Tensor, params: NetParams) -> tuple[Tensor, Tensor]:
    """Deepest-stage map -> block -> raw hash layer -> classifier; returns (code, logits)."""
    j = params.config.depth
    code = raw_code(stage_block(top_map, j, params), params)
    return code, classify(code, params)


def stage_codes(features: dict[int, Tensor], params: NetParams) -> dict[int, np.ndarray]:
    """Per-stage sign codes, reported for inspection only."""
    out = {}
    for j, f in features.items():
        h = f.data @ params[f"stage_hash{j}.weight"].data + params[f"stage_hash{j}.bias"].data
        out[j] = np.where(h >= 0, 1.0, -1.0)
    return out


def forward_full(
    image: Tensor,
    params: NetParams,
    zoomed: Optional[Tensor] = None,
    stage_maps: Optional[list[Tensor]] = None,
) -> ForwardOutputs:
    """Both branches plus the cascaded hash head.

    ``stage_maps`` may be supplied when the caller already ran the backbone on
    ``image`` (the trainer does, to build the attention zoom).
    """
    maps = stage_maps if stage_maps is not None else forward_backbone(image, params)
    feats = stage_features(maps, params)
    f_global = fuse_global(sorted(feats.items()))
    h_global = hash_projection(f_global, params)
    depth = params.config.depth
    c_org = raw_code(feats[depth], params)
    logits_org = classify(c_org, params)
    out = ForwardOutputs(
        stage_maps=maps,
        stage_features=feats,
        f_global=f_global,
        h_global=h_global,
        c_org=c_org,
        logits_org=logits_org,
        stage_codes=stage_codes(feats, params),
    )
    if zoomed is not None:
        aug_maps = forward_backbone(zoomed, params)
        out.c_aug, out.logits_aug = branch_logits(aug_maps[-1], params)
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def encode_checkpoint(params: NetParams, extra_arrays: dict | None = None, meta: dict | None = None) -> bytes:
    arrays = {name: t.data for name, t in params}
    for name, arr in (extra_arrays or {}).items():
        arrays[name] = np.asarray(arr, dtype=np.float64)
    body = {"net_config": params.config.to_dict()}
    body.update(meta or {})
    return encode_container(CHECKPOINT_KIND, body, arrays)


def decode_checkpoint(blob: bytes):
    """Return ``(params, extra_arrays, meta)``."""
    _, meta, arrays = decode_container(blob, CHECKPOINT_KIND)
    if "net_config" not in meta:
        raise FormatError("meta: missing field 'net_config'")
    try:
        config = NetConfig.from_dict(meta["net_config"])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"net_config: {exc}") from None
    names = param_shapes(config)
    tensors = {}
    extra = {}
    for name, arr in arrays.items():
        if name in names:
            tensors[name] = Tensor(arr.astype(np.float64), requires_grad=True)
        else:
            extra[name] = arr
    try:
        params = NetParams(config, tensors)
    except (ConfigurationError, ShapeError) as exc:
        raise FormatError(f"parameters: {exc}") from None
    rest = {k: v for k, v in meta.items() if k != "net_config"}
    return params, extra, rest
