"""Composite layers: TDNN block, SE gating, branched Res2 conv, attentive pooling.

Every block preserves the time extent. Forward passes take an explicit
``mode``:

* ``"train"``  — batchnorm uses batch statistics and updates running buffers.
* ``"eval"``   — batchnorm applies running statistics.
* ``"probe"``  — structural-connectivity mode: batchnorm and activations
  become the identity and SE gating is bypassed, so gradients reflect the
  conv wiring only. Used by the receptive-field analyzer.

Sub-band grouping convention: channels are ordered band-major, so group j
of a layer with g groups is the contiguous channel slice [j*C/g, (j+1)*C/g).
"""

from __future__ import annotations

import numpy as np

from . import tensor as tc
from .errors import ConfigError
from .tensor import ConvSpec, Tensor

TRAIN, EVAL, PROBE = "train", "eval", "probe"
_MODES = (TRAIN, EVAL, PROBE)


def _check_mode(mode: str) -> None:
    if mode not in _MODES:
        raise ConfigError(f"unknown forward mode {mode!r}, expected one of {_MODES}")


class Module:
    """Minimal parameter container; children register in declaration order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, ModuleList):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _he_weight(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


class BatchNorm1d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        _check_mode(mode)
        if mode == PROBE:
            return x
        return tc.batchnorm1d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=(mode == TRAIN),
            momentum=self.momentum,
            eps=self.eps,
        )


class Conv1d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel_size
        self.weight = _he_weight(rng, spec.weight_shape, fan_in)
        self.bias = Tensor(np.zeros(spec.out_channels), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return tc.conv1d(x, self.weight, self.bias, self.spec)


def _act_relu(x: Tensor, mode: str) -> Tensor:
    return x if mode == PROBE else tc.relu(x)


class TDNNBlock(Module):
    """conv1d -> ReLU -> batchnorm1d, in that order."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        dilation: int,
        groups: int,
        rng: np.random.Generator,
    ):
        super().__init__()
        self.conv = Conv1d(
            ConvSpec(in_channels, out_channels, kernel_size, dilation, groups), rng
        )
        self.bn = BatchNorm1d(out_channels)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        _check_mode(mode)
        return self.bn.forward(_act_relu(self.conv.forward(x), mode), mode)


class SEModule(Module):
    """Squeeze-excitation: per-channel gates from the time-averaged descriptor.

    out[b,c,t] = x[b,c,t] * sigmoid(conv2(relu(conv1(mean_t(x)))))[b,c].
    The gate lies in (0,1), so |out| < |x| wherever x != 0. Probe mode
    bypasses the gate entirely (connectivity, not gain).
    """

    def __init__(self, channels: int, bottleneck: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv1d(ConvSpec(channels, bottleneck, 1), rng)
        self.conv2 = Conv1d(ConvSpec(bottleneck, channels, 1), rng)

    def gate(self, x: Tensor) -> Tensor:
        s = tc.reshape(tc.mean_over_time(x), (x.shape[0], x.shape[1], 1))
        return tc.sigmoid(self.conv2.forward(tc.relu(self.conv1.forward(s))))

    def forward(self, x: Tensor, mode: str) -> Tensor:
        _check_mode(mode)
        if mode == PROBE:
            return x
        return tc.mul(x, self.gate(x))


class Res2Block(Module):
    """Hierarchical split-conv-add-concat over ``scale`` channel pieces.

    Piece 0 passes through. Piece i (i >= 1) is processed by its own
    conv -> ReLU -> BN unit whose input is piece_i plus the previous
    piece's output — the add is skipped across sub-band group boundaries
    so grouped variants keep the groups isolated. With ``branch`` on, a
    kernel-1 conv runs in parallel on the same input and the two raw conv
    outputs are summed before the activation.
    """

    def __init__(
        self,
        channels: int,
        scale: int,
        kernel_size: int,
        dilation: int,
        groups: int,
        branch: bool,
        rng: np.random.Generator,
    ):
        super().__init__()
        if channels % scale:
            raise ConfigError(f"channels={channels} not divisible by scale={scale}")
        if scale % groups:
            raise ConfigError(
                f"scale={scale} not divisible by groups={groups}: pieces must "
                f"nest inside sub-band groups"
            )
        self.channels = channels
        self.scale = scale
        self.groups = groups
        self.branch = branch
        width = channels // scale
        self.width = width
        self.convs = ModuleList(
            Conv1d(ConvSpec(width, width, kernel_size, dilation), rng)
            for _ in range(scale - 1)
        )
        if branch:
            self.branch_convs = ModuleList(
                Conv1d(ConvSpec(width, width, 1), rng) for _ in range(scale - 1)
            )
        self.bns = ModuleList(BatchNorm1d(width) for _ in range(scale - 1))

    def _same_group(self, i: int, j: int) -> bool:
        per_group = self.scale // self.groups
        return i // per_group == j // per_group

    def forward(self, x: Tensor, mode: str) -> Tensor:
        _check_mode(mode)
        pieces = tc.split_channels(x, [self.width] * self.scale)
        outs = [pieces[0]]
        for i in range(1, self.scale):
            inp = pieces[i]
            if self._same_group(i, i - 1):
                inp = tc.add(inp, outs[i - 1])
            y = self.convs[i - 1].forward(inp)
            if self.branch:
                y = tc.add(y, self.branch_convs[i - 1].forward(inp))
            outs.append(self.bns[i - 1].forward(_act_relu(y, mode), mode))
        return tc.concat_channels(outs)


class SERes2Block(Module):
    """k=1 TDNN -> Res2 -> k=1 TDNN -> SE, plus the residual input."""

    def __init__(
        self,
        channels: int,
        kernel_size: int,
        dilation: int,
        groups: int,
        branch: bool,
        rng: np.random.Generator,
        scale: int = 8,
        se_bottleneck: int = 128,
    ):
        super().__init__()
        self.tdnn1 = TDNNBlock(channels, channels, 1, 1, groups, rng)
        self.res2 = Res2Block(channels, scale, kernel_size, dilation, groups, branch, rng)
        self.tdnn2 = TDNNBlock(channels, channels, 1, 1, groups, rng)
        self.se = SEModule(channels, se_bottleneck, rng)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        _check_mode(mode)
        y = self.tdnn1.forward(x, mode)
        y = self.res2.forward(y, mode)
        y = self.tdnn2.forward(y, mode)
        y = self.se.forward(y, mode)
        return tc.add(x, y)


class ASPHead(Module):
    """Attentive statistics pooling with global context.

    The attention input concatenates the local features with the
    time-broadcast global mean and standard deviation (3C channels);
    per-channel scores go through conv(3C->bottleneck) -> tanh ->
    conv(bottleneck->C) and a softmax over time. Returns weighted mean
    concatenated with weighted std: [B, 2C].
    """

    def __init__(self, channels: int, bottleneck: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.conv_in = Conv1d(ConvSpec(3 * channels, bottleneck, 1), rng)
        self.conv_out = Conv1d(ConvSpec(bottleneck, channels, 1), rng)

    def attention(self, h: Tensor) -> Tensor:
        B, C, T = h.shape
        mu = tc.reshape(tc.mean_over_time(h), (B, C, 1))
        sd = tc.reshape(tc.std_over_time(h), (B, C, 1))
        ones = Tensor(np.ones((B, C, T)))
        context = tc.concat_channels([h, tc.mul(mu, ones), tc.mul(sd, ones)])
        scores = self.conv_out.forward(tc.tanh(self.conv_in.forward(context)))
        return tc.softmax_over_time(scores)

    def forward(self, h: Tensor, mode: str = EVAL) -> Tensor:
        _check_mode(mode)
        attn = self.attention(h)
        mu = tc.weighted_mean(h, attn)
        sd = tc.weighted_std(h, attn)
        return tc.concat_channels([mu, sd])


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.weight = _he_weight(rng, (out_features, in_features), in_features)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return tc.linear(x, self.weight, self.bias)


class CosineClassifier(Module):
    """Linear(emb_dim, n_classes) whose logits are cosine similarities.

    The bias participates in parameter counts but not in cosine scoring.
    """

    def __init__(self, emb_dim: int, n_classes: int, rng: np.random.Generator):
        super().__init__()
        self.n_classes = n_classes
        self.weight = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(emb_dim), size=(n_classes, emb_dim)),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(n_classes), requires_grad=True)

    def cosine_logits(self, emb: Tensor) -> Tensor:
        e_norm = tc.sqrt(tc.add(tc.summation(tc.mul(emb, emb), axis=1, keepdims=True), 1e-12))
        e_hat = tc.div(emb, e_norm)
        w = self.weight
        w_norm = tc.sqrt(tc.add(tc.summation(tc.mul(w, w), axis=1, keepdims=True), 1e-12))
        w_hat = tc.div(w, w_norm)
        return tc.linear(e_hat, w_hat)
