"""ConvBlock x3 -> bidirectional GRU -> MFCC and phoneme heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensorad as ad
from .tensorad import Tensor


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 137
    conv_channels: int = 512
    n_blocks: int = 3
    stride_per_block: int = 2
    kernel: int = 3
    groups: int = 16
    gru_hidden: int = 512
    gru_layers: int = 2
    bidirectional: bool = True
    dropout: float = 0.1
    mfcc_dim: int = 80
    n_classes: int = 40
    extra_blank: bool = False
    eps: float = 1e-5

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd for length-preserving padding")
        if self.conv_channels % self.groups:
            raise ValueError(f"{self.conv_channels} conv channels not divisible by {self.groups} groups")
        if self.gru_layers < 1 or self.n_blocks < 1:
            raise ValueError("need at least one conv block and one GRU layer")

    @property
    def downsample(self) -> int:
        return self.stride_per_block ** self.n_blocks

    @property
    def phoneme_outputs(self) -> int:
        return self.n_classes + (1 if self.extra_blank else 0)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in types:
                raise ValueError(f"unknown model config key {key!r}")
            kw[key] = _parse(value, types[key])
        return cls(**kw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text("utf-8"))


def _parse(value: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if value not in ("True", "False", "true", "false", "1", "0"):
            raise ValueError(f"not a boolean: {value!r}")
        return value in ("True", "true", "1")
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    return value


@dataclass
class ModelOutput:
    mfcc_pred: Tensor  # B, l/8, 80
    phoneme_logits: Tensor  # B, l/8, 40 (41 with extra blank)
    phoneme_logprobs: Tensor  # log-softmax over the 40 phoneme classes
    ctc_logprobs: Tensor
    conv_out: Tensor  # B, 512, l/8
    gru_out: Tensor  # B, l/8, 1024


def init_parameters(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform +-sqrt(1/fan_in) weights, unit/zero norm affine, PReLU slopes 0.25."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def uniform(name, shape, fan_in):
        bound = np.sqrt(1.0 / fan_in)
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), True, name)

    def const(name, shape, value):
        params[name] = Tensor(np.full(shape, value, dtype=np.float32), True, name)

    c_in = config.in_channels
    for b in range(config.n_blocks):
        c_out = config.conv_channels
        uniform(f"block{b}.conv.weight", (c_out, c_in, config.kernel), c_in * config.kernel)
        const(f"block{b}.norm.weight", (c_out,), 1.0)
        const(f"block{b}.norm.bias", (c_out,), 0.0)
        const(f"block{b}.prelu.weight", (c_out,), 0.25)
        c_in = c_out

    H = config.gru_hidden
    dirs = ("fwd", "bwd") if config.bidirectional else ("fwd",)
    layer_in = config.conv_channels
    for layer in range(config.gru_layers):
        for d in dirs:
            p = f"gru.l{layer}.{d}"
            uniform(f"{p}.w_ih", (3 * H, layer_in), H)
            uniform(f"{p}.w_hh", (3 * H, H), H)
            uniform(f"{p}.b_ih", (3 * H,), H)
            uniform(f"{p}.b_hh", (3 * H,), H)
        layer_in = H * len(dirs)

    uniform("head_mfcc.weight", (layer_in, config.mfcc_dim), layer_in)
    uniform("head_mfcc.bias", (config.mfcc_dim,), layer_in)
    uniform("head_phoneme.weight", (layer_in, config.phoneme_outputs), layer_in)
    uniform("head_phoneme.bias", (config.phoneme_outputs,), layer_in)
    return params


def conv_block(x: Tensor, params: dict[str, Tensor], b: int, config: ModelConfig) -> Tensor:
    w = ad.weight_standardize(params[f"block{b}.conv.weight"], config.eps)
    y = ad.conv1d(x, w, stride=config.stride_per_block, padding=config.kernel // 2)
    y = ad.group_norm(y, config.groups, config.eps, params[f"block{b}.norm.weight"], params[f"block{b}.norm.bias"])
    return ad.prelu(y, params[f"block{b}.prelu.weight"], axis=1)


def gru_layer(x: Tensor, params: dict[str, Tensor], prefix: str, reverse: bool) -> Tensor:
    xp = ad.add(ad.matmul(x, params[f"{prefix}.w_ih"].transpose()), params[f"{prefix}.b_ih"])
    return ad.gru_scan(xp, params[f"{prefix}.w_hh"], params[f"{prefix}.b_hh"], reverse=reverse)


def forward(params: dict[str, Tensor], x, config: ModelConfig, train: bool = False,
            seed: int | None = None) -> ModelOutput:
    """x: (B, C, l) with l divisible by the total conv stride."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    if x.ndim != 3:
        raise ValueError(f"expected (B, C, l) input, got shape {x.shape}")
    B, C, L = x.shape
    if C != config.in_channels:
        raise ValueError(f"input has {C} channels, model expects {config.in_channels}")
    if L % config.downsample:
        raise ValueError(f"sequence length {L} not divisible by {config.downsample}")

    h = x
    for b in range(config.n_blocks):
        h = conv_block(h, params, b, config)
    conv_out = h

    seq = ad.transpose(conv_out, (0, 2, 1))  # B, T, C
    rng = np.random.default_rng(seed)
    for layer in range(config.gru_layers):
        if layer > 0:
            seq = ad.dropout(seq, config.dropout, train, int(rng.integers(2**31)))
        outs = [gru_layer(seq, params, f"gru.l{layer}.fwd", reverse=False)]
        if config.bidirectional:
            outs.append(gru_layer(seq, params, f"gru.l{layer}.bwd", reverse=True))
        seq = ad.concat(outs, axis=2) if len(outs) > 1 else outs[0]
    gru_out = seq

    mfcc = ad.add(ad.matmul(gru_out, params["head_mfcc.weight"]), params["head_mfcc.bias"])
    logits = ad.add(ad.matmul(gru_out, params["head_phoneme.weight"]), params["head_phoneme.bias"])
    if config.extra_blank:
        logprobs = ad.log_softmax(logits[:, :, :config.n_classes], axis=-1)
        ctc_lp = ad.log_softmax(logits, axis=-1)
    else:
        logprobs = ad.log_softmax(logits, axis=-1)
        ctc_lp = logprobs
    return ModelOutput(mfcc, logits, logprobs, ctc_lp, conv_out, gru_out)


def parameter_count(params: dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))


def save_model(directory: str | Path, params: dict[str, Tensor], config: ModelConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(directory / "checkpoint.bin", params)
    config.save(directory / "model_config.txt")


def load_model(directory: str | Path) -> tuple[dict[str, Tensor], ModelConfig]:
    directory = Path(directory)
    for name in ("checkpoint.bin", "model_config.txt"):
        if not (directory / name).exists():
            raise FileNotFoundError(str(directory / name))
    config = ModelConfig.load(directory / "model_config.txt")
    raw = ad.load_checkpoint(directory / "checkpoint.bin")
    expected = init_parameters(config, 0)
    if set(raw) != set(expected):
        raise ValueError(f"checkpoint parameters do not match config: {sorted(set(raw) ^ set(expected))[:5]}")
    return {k: Tensor(v, True, k) for k, v in raw.items()}, config
