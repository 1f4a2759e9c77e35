"""Config-driven construction of the speaker-embedding networks.

Variants:

* ``ecapa-base`` / ``ecapa-large`` — the standard ECAPA-TDNN trunk: one
  k=5 TDNN stem, three SE-Res2 blocks (dilations 2,3,4), MFA concat,
  attentive pooling, 192-dim embedding. 512 or 1024 channels.
* ``pcf-ecapa`` — deepened trunk of four backbone blocks, each two
  branched SE-Res2 blocks, fed by per-block grouped link TDNNs from the
  spectrogram. The sub-band group count halves per block (8,4,2,1) so the
  frequency context widens progressively with depth.

Ablation stages ``base``, ``A`` (deepen), ``AB`` (+k=1 branches) and
``ABC`` (+sub-band links/grouping == pcf-ecapa) are exposed for audits.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tc
from .blocks import (
    EVAL,
    ASPHead,
    CosineClassifier,
    Linear,
    Module,
    ModuleList,
    SERes2Block,
    TDNNBlock,
)
from .errors import ConfigError, LoadError
from .tensor import Tensor

MODEL_MAGIC = b"PCFM"
MODEL_FORMAT_VERSION = 1

VARIANTS = ("ecapa-base", "ecapa-large", "pcf-ecapa")

SUB_BAND_SEQUENCE = (8, 4, 2, 1)


@dataclass(frozen=True)
class BlockSpec:
    """One conv block row: (in, out, kernel, dilation, sub-band count)."""

    in_ch: int
    out_ch: int
    kernel: int
    dilation: int
    sub_bands: int

    def __post_init__(self):
        for name in ("in_ch", "out_ch", "kernel", "dilation", "sub_bands"):
            if getattr(self, name) < 1:
                raise ConfigError(f"BlockSpec.{name} must be positive")
        if self.in_ch % self.sub_bands or self.out_ch % self.sub_bands:
            raise ConfigError(
                f"sub_bands={self.sub_bands} must divide in_ch={self.in_ch} "
                f"and out_ch={self.out_ch}"
            )


@dataclass(frozen=True)
class ModelConfig:
    """Declarative model description; ``deepen|branch|pcf`` drive the topology."""

    channels: int = 512
    feat_dim: int = 80
    emb_dim: int = 192
    mfa_out: int = 1536
    attn_bottleneck: int = 128
    se_bottleneck: int = 128
    scale: int = 8
    n_blocks: int = 4
    deepen: bool = False
    branch: bool = False
    pcf: bool = False
    num_classes: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.pcf and not self.deepen:
            raise ConfigError("pcf topology presupposes the deepened 4-block trunk")
        if self.branch and not self.deepen:
            raise ConfigError("branching is only defined on the deepened trunk")
        if self.channels % self.scale:
            raise ConfigError(
                f"channels={self.channels} must be divisible by scale={self.scale}"
            )
        if self.pcf:
            if not 1 <= self.n_blocks <= len(SUB_BAND_SEQUENCE):
                raise ConfigError(f"n_blocks must be in 1..4, got {self.n_blocks}")
            for g in self.sub_band_counts():
                if self.feat_dim % g or self.channels % g:
                    raise ConfigError(
                        f"sub-band count {g} must divide feat_dim={self.feat_dim} "
                        f"and channels={self.channels}"
                    )

    def sub_band_counts(self) -> tuple[int, ...]:
        """Per-block group counts; halves each block by construction."""
        if not self.pcf:
            return tuple([1] * self.n_blocks)
        return SUB_BAND_SEQUENCE[: self.n_blocks]

    def dilations(self) -> tuple[int, ...]:
        if self.deepen:
            return tuple(range(1, self.n_blocks + 1))
        return (2, 3, 4)

    @property
    def variant(self) -> str:
        if self.pcf:
            return "pcf-ecapa"
        if self.deepen:
            return f"ecapa-deep{'-branch' if self.branch else ''}"
        return "ecapa-base" if self.channels == 512 else "ecapa-large"

    @staticmethod
    def from_variant(variant: str, channels: int | None = None, **overrides) -> "ModelConfig":
        if variant == "ecapa":
            variant = "ecapa-large" if channels == 1024 else "ecapa-base"
        if variant == "ecapa-base":
            return ModelConfig(channels=channels or 512, **overrides)
        if variant == "ecapa-large":
            return ModelConfig(channels=channels or 1024, **overrides)
        if variant == "pcf-ecapa":
            return ModelConfig(
                channels=channels or 512, deepen=True, branch=True, pcf=True, **overrides
            )
        raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")

    # -- canonical text form -------------------------------------------------

    def canonical_text(self) -> str:
        keys = (
            "channels feat_dim emb_dim mfa_out attn_bottleneck se_bottleneck "
            "scale n_blocks deepen branch pcf num_classes seed"
        ).split()
        lines = [f"{k}={getattr(self, k)}" for k in keys]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    @staticmethod
    def from_text(text: str) -> "ModelConfig":
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"bad config line {line!r}, expected key=value")
            key, value = line.split("=", 1)
            key = key.strip()
            value = value.strip()
            if key == "variant":
                continue  # sugar handled by from_variant at the CLI layer
            if key in ("deepen", "branch", "pcf"):
                kwargs[key] = value in ("True", "true", "1")
            elif key in (
                "channels",
                "feat_dim",
                "emb_dim",
                "mfa_out",
                "attn_bottleneck",
                "se_bottleneck",
                "scale",
                "n_blocks",
                "num_classes",
                "seed",
            ):
                kwargs[key] = int(value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return ModelConfig(**kwargs)


class Network(Module):
    """Built speaker-embedding network; immutable for inference."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        object.__setattr__(self, "config", config)
        rng = np.random.default_rng(config.seed)
        C = config.channels
        F = config.feat_dim

        if config.pcf:
            groups = config.sub_band_counts()
            self.links = ModuleList(
                TDNNBlock(F, C, 5, 1, g, rng) for g in groups
            )
            self.stem = None
        else:
            self.links = None
            self.stem = TDNNBlock(F, C, 5, 1, 1, rng)

        dil = config.dilations()
        per_block = 2 if config.deepen else 1
        blocks = []
        for i, d in enumerate(dil):
            g = config.sub_band_counts()[i] if config.pcf else 1
            blocks.append(
                ModuleList(
                    SERes2Block(
                        C,
                        3,
                        d,
                        g,
                        config.branch,
                        rng,
                        scale=config.scale,
                        se_bottleneck=config.se_bottleneck,
                    )
                    for _ in range(per_block)
                )
            )
        self.blocks = ModuleList(blocks)
        n_cat = len(blocks)
        self.mfa = TDNNBlock(n_cat * C, config.mfa_out, 1, 1, 1, rng)
        self.asp = ASPHead(config.mfa_out, config.attn_bottleneck, rng)
        self.fc = Linear(2 * config.mfa_out, config.emb_dim, rng)
        self.classifier = (
            CosineClassifier(config.emb_dim, config.num_classes, rng)
            if config.num_classes
            else None
        )

    # -- forward -------------------------------------------------------------

    def stage_outputs(self, x: Tensor, mode: str = EVAL) -> list[Tensor]:
        """[stage 0, block 1, ..., block n] where stage 0 is the stem output
        (the first link's output for the pcf topology)."""
        stages = []
        if self.config.pcf:
            prev = None
            for i, (link, block) in enumerate(zip(self.links, self.blocks)):
                h = link.forward(x, mode)
                if i == 0:
                    stages.append(h)
                if prev is not None:
                    h = tc.add(h, prev)
                for sub in block:
                    h = sub.forward(h, mode)
                stages.append(h)
                prev = h
        else:
            h = self.stem.forward(x, mode)
            stages.append(h)
            for block in self.blocks:
                for sub in block:
                    h = sub.forward(h, mode)
                stages.append(h)
        return stages

    def block_outputs(self, x: Tensor, mode: str = EVAL) -> list[Tensor]:
        """Outputs of each backbone block, in depth order."""
        return self.stage_outputs(x, mode)[1:]

    def embed(self, x: Tensor, mode: str = EVAL) -> Tensor:
        """[B, F, T] -> [B, emb_dim]."""
        outs = self.block_outputs(x, mode)
        h = tc.concat_channels(outs)
        h = self.mfa.forward(h, mode)
        pooled = self.asp.forward(h, mode)
        return self.fc.forward(pooled)

    def forward(self, x: Tensor, mode: str = EVAL) -> Tensor:
        return self.embed(x, mode)

    # -- structure queries -----------------------------------------------------

    def max_time_rf(self) -> int:
        """Largest time extent 1 + sum(d*(k-1)) over any conv path."""
        return time_rf_extent(self.config)

    def attach_classifier(self, n_classes: int, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        self.classifier = CosineClassifier(self.config.emb_dim, n_classes, rng)
        object.__setattr__(self, "config", replace(self.config, num_classes=n_classes))


def build_model(config: ModelConfig) -> Network:
    return Network(config)


def time_rf_extent(config: ModelConfig, upto_block: int | None = None) -> int:
    """Largest time extent 1 + sum(d*(k-1)) over any conv path to a block output.

    The deepest path through one hierarchical conv block chains
    ``scale/groups`` piece convolutions (capped at scale-1: piece 0 is
    never convolved).
    """
    total = 4  # k=5, d=1 stem or link
    per_block = 2 if config.deepen else 1
    groups = config.sub_band_counts()
    dilations = config.dilations()
    n = len(dilations) if upto_block is None else upto_block
    for i in range(n):
        g = groups[i] if config.pcf else 1
        chain = min(config.scale // g, config.scale - 1)
        total += per_block * chain * dilations[i] * 2
    return 1 + total


ABLATION_STAGES = ("base", "A", "AB", "ABC")


def build_ablation(stage: str, channels: int = 512, **overrides) -> Network:
    """base = ECAPA; A = deepened; AB = +branches; ABC = full pcf-ecapa."""
    if stage == "base":
        cfg = ModelConfig(channels=channels, **overrides)
    elif stage == "A":
        cfg = ModelConfig(channels=channels, deepen=True, **overrides)
    elif stage == "AB":
        cfg = ModelConfig(channels=channels, deepen=True, branch=True, **overrides)
    elif stage == "ABC":
        cfg = ModelConfig(channels=channels, deepen=True, branch=True, pcf=True, **overrides)
    else:
        raise ConfigError(f"unknown ablation stage {stage!r}, expected {ABLATION_STAGES}")
    return build_model(cfg)


# -- parameter audit ----------------------------------------------------------


@dataclass
class ParamAudit:
    per_layer: dict[str, int] = field(default_factory=dict)
    total_excluding_classifier: int = 0
    total_including_classifier: int = 0

    def table(self) -> str:
        width = max((len(k) for k in self.per_layer), default=10)
        lines = [f"{name:<{width}}  {count:>12,}" for name, count in self.per_layer.items()]
        lines.append(f"{'total (no classifier)':<{width}}  {self.total_excluding_classifier:>12,}")
        lines.append(f"{'total (with classifier)':<{width}}  {self.total_including_classifier:>12,}")
        return "\n".join(lines)


def count_params(net: Network, include_classifier: bool = False) -> ParamAudit:
    """Counts weights, biases, and batchnorm affine params; running stats excluded."""
    audit = ParamAudit()
    for name, p in net.named_parameters():
        is_classifier = name.startswith("classifier.")
        if is_classifier and not include_classifier:
            continue
        audit.per_layer[name] = p.size
    audit.total_excluding_classifier = sum(
        c for n, c in audit.per_layer.items() if not n.startswith("classifier.")
    )
    audit.total_including_classifier = audit.total_excluding_classifier + sum(
        p.size for n, p in net.named_parameters() if n.startswith("classifier.")
    )
    return audit


# -- serialization ------------------------------------------------------------


def _model_payload(net: Network) -> bytes:
    cfg_text = net.config.canonical_text().encode()
    cfg_hash = bytes.fromhex(net.config.config_hash())
    params = list(net.named_parameters())
    out = [
        MODEL_MAGIC,
        struct.pack("<I", MODEL_FORMAT_VERSION),
        struct.pack("<Q", len(cfg_text)),
        cfg_text,
        cfg_hash,
        struct.pack("<Q", len(params)),
    ]
    for _, p in params:
        out.append(tc.tensor_to_bytes(p))
    return b"".join(out)


def save_model(net: Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_model_payload(net))


def _read_model(buf: bytes, offset: int = 0) -> tuple[Network, int]:
    if len(buf) < offset + 8:
        raise LoadError("model header truncated")
    magic = buf[offset : offset + 4]
    if magic != MODEL_MAGIC:
        raise LoadError(f"bad model magic {magic!r}, expected {MODEL_MAGIC!r}")
    (version,) = struct.unpack_from("<I", buf, offset + 4)
    if version != MODEL_FORMAT_VERSION:
        raise LoadError(f"unsupported model format version {version}")
    pos = offset + 8
    if len(buf) < pos + 8:
        raise LoadError("model config length truncated")
    (cfg_len,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if len(buf) < pos + cfg_len + 32:
        raise LoadError("model config truncated")
    cfg_text = buf[pos : pos + cfg_len].decode()
    pos += cfg_len
    stored_hash = buf[pos : pos + 32]
    pos += 32
    if hashlib.sha256(cfg_text.encode()).digest() != stored_hash:
        raise LoadError("config hash mismatch: stored header does not match config text")
    try:
        config = ModelConfig.from_text(cfg_text)
    except ConfigError as e:
        raise LoadError(f"stored config is invalid: {e}") from e
    if len(buf) < pos + 8:
        raise LoadError("model tensor count truncated")
    (n_tensors,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    net = build_model(config)
    params = list(net.named_parameters())
    if n_tensors != len(params):
        raise LoadError(
            f"model holds {n_tensors} tensors, config implies {len(params)}"
        )
    for name, p in params:
        t, pos = tc.tensor_from_bytes(buf, pos)
        if t.shape != p.shape:
            raise LoadError(f"tensor {name}: stored shape {t.shape}, expected {p.shape}")
        p.data[...] = t.data
    return net, pos


def load_model(path) -> Network:
    with open(path, "rb") as fh:
        buf = fh.read()
    net, _ = _read_model(buf)
    return net


# -- flat key=value config files -----------------------------------------------


def write_config(config: ModelConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"variant={config.variant}\n")
        fh.write(config.canonical_text())


def read_config(path) -> ModelConfig:
    with open(path) as fh:
        return ModelConfig.from_text(fh.read())
