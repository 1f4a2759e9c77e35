"""Receptive-field analysis over (frequency bin, time frame) input positions.

Two independent routes compute which spectrogram positions can influence a
given block output unit:

* ``analytic_rf_tdnn`` propagates boolean reachability masks through the
  model's conv wiring at channel-piece granularity (every conv in a block
  acts on whole Res2 pieces, so pieces are the exact unit of structural
  connectivity).
* ``gradient_rf_oracle`` runs the built network in probe mode (identity
  activations and batchnorm, SE gating bypassed) and marks positions with
  a nonzero input gradient, unioned over several weight draws so an
  accidental cancellation cannot hide a live path.

Both produce masks over a window of width 1 + max time span, anchored at
the center frame, and must agree exactly.

``analytic_rf_2d`` covers stride-2 2-D conv stacks (the ResNet comparison
rows) with the standard per-axis recurrence r += (k-1)*d*jump.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tc
from .blocks import PROBE
from .errors import ConfigError
from .models import ModelConfig, Network, build_model, time_rf_extent
from .tensor import Tensor


@dataclass
class RFMap:
    """Boolean reachability grid over [frequency bins x window frames]."""

    grid: np.ndarray  # bool [F, W]
    block: int
    channel: int
    frame: int
    model_id: str

    @property
    def anchor(self) -> tuple[int, int, int]:
        return (self.block, self.channel, self.frame)

    def frequency_coverage(self) -> int:
        return int(self.grid.any(axis=1).sum())

    def time_extent(self) -> int:
        return int(self.grid.any(axis=0).sum())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, RFMap)
            and self.anchor == other.anchor
            and self.model_id == other.model_id
            and self.grid.shape == other.grid.shape
            and bool(np.array_equal(self.grid, other.grid))
        )


def _dilate_time(masks: np.ndarray, kernel: int, dilation: int) -> np.ndarray:
    """Union of the masks shifted to each conv tap position."""
    out = np.zeros_like(masks)
    W = masks.shape[-1]
    half = (kernel - 1) // 2
    for j in range(-half, half + 1):
        s = j * dilation
        if s == 0:
            out |= masks
        elif s > 0:
            out[..., s:] |= masks[..., : W - s]
        else:
            out[..., :s] |= masks[..., -s:]
    return out


def _group_union(state: np.ndarray, groups: int) -> np.ndarray:
    """k=1 grouped conv: each piece sees every piece of its sub-band group."""
    scale = state.shape[0]
    per = scale // groups
    out = np.empty_like(state)
    for j in range(groups):
        merged = state[j * per : (j + 1) * per].any(axis=0)
        out[j * per : (j + 1) * per] = merged
    return out


def _res2_masks(state: np.ndarray, groups: int, dilation: int) -> np.ndarray:
    scale = state.shape[0]
    per = scale // groups
    out = np.empty_like(state)
    out[0] = state[0]
    for i in range(1, scale):
        inp = state[i]
        if i // per == (i - 1) // per:
            inp = inp | out[i - 1]
        out[i] = _dilate_time(inp, 3, dilation)
    return out


def _se_res2_masks(state: np.ndarray, groups: int, dilation: int) -> np.ndarray:
    h = _group_union(state, groups)
    h = _res2_masks(h, groups, dilation)
    h = _group_union(h, groups)
    return h | state  # SE is bypassed in probe mode; residual unions the input


def _link_masks(cfg: ModelConfig, groups: int, W: int) -> np.ndarray:
    scale = cfg.scale
    F = cfg.feat_dim
    per = scale // groups
    band = F // groups
    center = W // 2
    state = np.zeros((scale, F, W), dtype=bool)
    for p in range(scale):
        j = p // per
        state[p, j * band : (j + 1) * band, center] = True
    return _dilate_time(state, 5, 1)


def _analytic_stages(cfg: ModelConfig, W: int) -> list[np.ndarray]:
    """Per-stage piece masks: [stage 0, block 1, ..., block n]."""
    per_block = 2 if cfg.deepen else 1
    group_seq = cfg.sub_band_counts()
    stages = []
    if cfg.pcf:
        prev = None
        for i, d in enumerate(cfg.dilations()):
            state = _link_masks(cfg, group_seq[i], W)
            if i == 0:
                stages.append(state.copy())
            if prev is not None:
                state = state | prev
            for _ in range(per_block):
                state = _se_res2_masks(state, group_seq[i], d)
            stages.append(state)
            prev = state
    else:
        state = _link_masks(cfg, 1, W)
        stages.append(state.copy())
        for d in cfg.dilations():
            for _ in range(per_block):
                state = _se_res2_masks(state, 1, d)
            stages.append(state)
    return stages


def _check_anchor(cfg: ModelConfig, block: int, channel: int) -> None:
    n_blocks = len(cfg.dilations())
    if not 0 <= block <= n_blocks:
        raise ConfigError(f"block index {block} out of range 0..{n_blocks}")
    if not 0 <= channel < cfg.channels:
        raise ConfigError(f"channel {channel} out of range 0..{cfg.channels - 1}")


def analytic_rf_tdnn(cfg: ModelConfig, block: int, channel: int) -> RFMap:
    """Reachability mask of one output unit, derived from the wiring alone."""
    _check_anchor(cfg, block, channel)
    W = time_rf_extent(cfg)
    stages = _analytic_stages(cfg, W)
    piece = channel // (cfg.channels // cfg.scale)
    grid = stages[block][piece]
    return RFMap(grid=grid, block=block, channel=channel, frame=W // 2, model_id=cfg.variant)


def gradient_rf_oracle(
    net: Network,
    block: int,
    channel: int,
    frame: int | None = None,
    draws: int = 3,
) -> RFMap:
    """Probe-mode input-gradient mask, unioned over ``draws`` weight draws."""
    cfg = net.config
    _check_anchor(cfg, block, channel)
    W = time_rf_extent(cfg)
    if frame is None:
        frame = W // 2
    union = np.zeros((cfg.feat_dim, W), dtype=bool)
    for i in range(draws):
        probe_net = net if i == 0 else build_model(replace(cfg, seed=cfg.seed + 7919 * i))
        x = Tensor(np.ones((1, cfg.feat_dim, W)), requires_grad=True)
        stage = probe_net.stage_outputs(x, PROBE)[block]
        pick = np.zeros(stage.shape)
        pick[0, channel, frame] = 1.0
        tc.summation(tc.mul(stage, Tensor(pick))).backward()
        union |= x.grad[0] != 0.0
    return RFMap(grid=union, block=block, channel=channel, frame=frame, model_id=cfg.variant)


# -- 2-D conv stacks (ResNet comparison rows) -----------------------------------


def _normalize_2d_layers(layers) -> list[tuple[tuple[int, int, int], tuple[int, int, int]]]:
    if not layers:
        raise ConfigError("analytic_rf_2d: layer list must be nonempty")
    norm = []
    for layer in layers:
        if len(layer) == 2 and isinstance(layer[0], (tuple, list)):
            norm.append((tuple(layer[0]), tuple(layer[1])))
        else:
            k, s, d = layer
            norm.append(((k, s, d), (k, s, d)))
    return norm


def rf_extent_2d(layers) -> tuple[int, int]:
    """Per-axis receptive-field extent via r += (k-1)*d*prod(previous strides)."""
    extents = []
    for axis in (0, 1):
        r, jump = 1, 1
        for layer in _normalize_2d_layers(layers):
            k, s, d = layer[axis]
            r += (k - 1) * d * jump
            jump *= s
        extents.append(r)
    return tuple(extents)


def analytic_rf_2d(
    layers, feat_dim: int = 80, model_id: str = "conv2d", block: int = 0
) -> RFMap:
    """Rectangle mask of a 2-D conv stack, centered on the middle bin."""
    rf_f, rf_t = rf_extent_2d(layers)
    W = rf_t
    grid = np.zeros((feat_dim, W), dtype=bool)
    center_f = feat_dim // 2
    lo = max(0, center_f - (rf_f - 1) // 2)
    hi = min(feat_dim, center_f + (rf_f - 1) // 2 + 1)
    grid[lo:hi, :] = True
    return RFMap(grid=grid, block=block, channel=0, frame=W // 2, model_id=model_id)


def resnet_2d_layers(depth: int = 34, upto_block: int = 4) -> list[tuple[int, int, int]]:
    """(k, stride, dilation) stack of a standard ResNet up to a given stage."""
    if depth == 18:
        stage_blocks = (2, 2, 2, 2)
    elif depth == 34:
        stage_blocks = (3, 4, 6, 3)
    else:
        raise ConfigError(f"unsupported resnet depth {depth}, expected 18 or 34")
    layers = [(7, 2, 1), (3, 2, 1)]  # stem conv + max pool
    for stage in range(upto_block):
        for b in range(stage_blocks[stage]):
            stride = 2 if (stage > 0 and b == 0) else 1
            layers.append((3, stride, 1))
            layers.append((3, 1, 1))
    return layers


# -- emission -------------------------------------------------------------------


def _map_basename(m: RFMap) -> str:
    return f"rf_{m.model_id}_{m.block}_{m.channel}"


def emit_rf_panel(maps: list[RFMap], out_dir) -> list[str]:
    """Write one CSV (f,t,reachable rows) and one 8-bit PGM raster per map."""
    if not maps:
        raise ConfigError("emit_rf_panel: map list must be nonempty")
    written = []
    for m in maps:
        base = os.path.join(str(out_dir), _map_basename(m))
        csv_path = base + ".csv"
        pgm_path = base + ".pgm"
        try:
            F, W = m.grid.shape
            with open(csv_path, "w") as fh:
                for f in range(F):
                    for t in range(W):
                        fh.write(f"{f},{t},{int(m.grid[f, t])}\n")
            with open(pgm_path, "wb") as fh:
                fh.write(f"P5\n{W} {F}\n255\n".encode())
                fh.write((m.grid.astype(np.uint8) * 255).tobytes())
        except OSError as e:
            raise OSError(f"cannot write receptive-field map under {out_dir}: {e}") from e
        written.extend([csv_path, pgm_path])
    return written


def read_rf_csv(path) -> RFMap:
    """Rebuild an RFMap from an emitted CSV; anchor comes from the filename."""
    name = os.path.basename(str(path))
    stem = name[: -len(".csv")] if name.endswith(".csv") else name
    parts = stem.split("_")
    if len(parts) < 4 or parts[0] != "rf":
        raise ConfigError(f"unrecognized rf csv name {name!r}")
    block, channel = int(parts[-2]), int(parts[-1])
    model_id = "_".join(parts[1:-2])
    rows = []
    try:
        with open(path) as fh:
            for line in fh:
                f, t, r = line.strip().split(",")
                rows.append((int(f), int(t), int(r)))
    except OSError as e:
        raise OSError(f"cannot read receptive-field map {path}: {e}") from e
    F = max(r[0] for r in rows) + 1
    W = max(r[1] for r in rows) + 1
    grid = np.zeros((F, W), dtype=bool)
    for f, t, r in rows:
        grid[f, t] = bool(r)
    return RFMap(grid=grid, block=block, channel=channel, frame=W // 2, model_id=model_id)
