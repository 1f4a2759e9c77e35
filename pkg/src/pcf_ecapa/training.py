"""Training kit: circle loss, AAM-softmax, Adam, cyclical LR, toy training.

The toy loop exercises the full recipe (cosine-logit classifier, circle
loss, Adam with decoupled weight decay, triangular cyclical learning
rate) on synthetic speakers so end-to-end behavior is checkable on one
CPU core. Everything is deterministic under a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .blocks import TRAIN
from .errors import ConfigError, ContractError, TrainingDiverged
from .models import Network
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    kind: str = "circle"  # "circle" or "aam"
    margin: float = 0.35
    scale: float = 60.0
    aam_margin: float = 0.2

    def __post_init__(self):
        if self.kind not in ("circle", "aam"):
            raise ConfigError(f"loss kind must be 'circle' or 'aam', got {self.kind!r}")
        if not 0.0 < self.margin < 1.0:
            raise ConfigError(f"margin must be in (0, 1), got {self.margin}")
        if self.scale <= 0.0:
            raise ConfigError(f"scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class ScheduleConfig:
    cycle_steps: int = 1000
    lr_min: float = 1e-8
    lr_max: float = 1e-3
    cycles: int = 3
    weight_decay: float = 5e-5

    def __post_init__(self):
        if self.lr_min >= self.lr_max:
            raise ConfigError(f"lr_min={self.lr_min} must be below lr_max={self.lr_max}")
        if self.cycle_steps < 2:
            raise ConfigError(f"cycle_steps must be >= 2, got {self.cycle_steps}")

    @property
    def total_steps(self) -> int:
        return self.cycle_steps * self.cycles


def cyclical_lr(step: int, cfg: ScheduleConfig) -> float:
    """Continuous triangular wave: lr_min -> lr_max -> lr_min each cycle."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    phase = (step % cfg.cycle_steps) / cfg.cycle_steps
    frac = 2.0 * phase if phase <= 0.5 else 2.0 * (1.0 - phase)
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * frac


# -- losses on cosine similarities ---------------------------------------------


def _check_cosines(cos_sims: Tensor, labels: np.ndarray) -> None:
    if cos_sims.data.ndim != 2:
        raise ContractError(f"expected cosine logits [B, K], got {cos_sims.shape}")
    if np.abs(cos_sims.data).max() > 1.0 + 1e-6:
        raise ContractError(
            f"cosine similarities out of range: |max| = {np.abs(cos_sims.data).max():.6f}"
        )
    B, K = cos_sims.shape
    labels = np.asarray(labels)
    if labels.shape != (B,) or labels.min() < 0 or labels.max() >= K:
        raise ContractError(f"labels must be {B} class indices below {K}")


def circle_loss(cos_sims: Tensor, labels, cfg: LossConfig) -> Tensor:
    """Pair-weighted margin loss on cosine similarities.

    Per sample, with gamma = scale and margin m:
        alpha_p = max(0, 1 + m - s_p)      delta_p = 1 - m
        alpha_n = max(0, s_n + m)          delta_n = m
        L = softplus( logsumexp_{j != y} gamma*alpha_n*(s_n - delta_n)
                      + gamma*alpha_p*(delta_p - s_p) )
    computed in log space; the batch mean is returned. The self-paced
    weights alpha are part of the differentiated expression.
    """
    labels = np.asarray(labels)
    _check_cosines(cos_sims, labels)
    B, K = cos_sims.shape
    m, gamma = cfg.margin, cfg.scale
    onehot = np.zeros((B, K))
    onehot[np.arange(B), labels] = 1.0

    s_p = tc.summation(tc.mul(cos_sims, Tensor(onehot)), axis=1, keepdims=True)  # [B,1]
    alpha_p = tc.relu(tc.add(tc.neg(s_p), 1.0 + m))
    logit_p = tc.mul(tc.mul(alpha_p, tc.sub(1.0 - m, s_p)), gamma)  # [B,1]

    alpha_n = tc.relu(tc.add(cos_sims, m))
    logit_n = tc.mul(tc.mul(alpha_n, tc.sub(cos_sims, m)), gamma)  # [B,K]
    lse_n = tc.logsumexp(logit_n, mask=1.0 - onehot, axis=1)  # [B,1]

    per_sample = tc.softplus(tc.add(lse_n, logit_p))
    return tc.mean(per_sample)


def aam_softmax_loss(cos_sims: Tensor, labels, margin: float, scale: float) -> Tensor:
    """Additive-angular-margin cross entropy on cosine logits.

    The target logit becomes scale*cos(theta_y + margin); all others stay
    scale*cos(theta). margin=0 reduces exactly to scaled softmax cross
    entropy.
    """
    labels = np.asarray(labels)
    _check_cosines(cos_sims, labels)
    B, K = cos_sims.shape
    onehot = np.zeros((B, K))
    onehot[np.arange(B), labels] = 1.0
    oh = Tensor(onehot)

    sin_theta = tc.sqrt(tc.relu(tc.sub(1.0, tc.mul(cos_sims, cos_sims))))
    phi = tc.sub(
        tc.mul(cos_sims, float(np.cos(margin))),
        tc.mul(sin_theta, float(np.sin(margin))),
    )
    logits = tc.mul(
        tc.add(tc.mul(phi, oh), tc.mul(cos_sims, tc.sub(1.0, oh))), scale
    )
    target_logit = tc.summation(tc.mul(logits, oh), axis=1, keepdims=True)
    lse = tc.logsumexp(logits, axis=1)
    return tc.mean(tc.sub(lse, target_logit))


# -- optimizer -------------------------------------------------------------------


class Adam:
    """Adam with bias correction and decoupled weight decay (lr*wd*param)."""

    def __init__(
        self,
        params,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params: list[Tensor] = list(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        grads = []
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(
                    f"non-finite gradient in parameter {i} (shape {p.data.shape}); "
                    f"step {self.t + 1} aborted"
                )
            grads.append(g)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_tensors(self) -> list[Tensor]:
        out = [Tensor(np.array([float(self.t)]))]
        out += [Tensor(m) for m in self.m]
        out += [Tensor(v) for v in self.v]
        return out

    def load_state_tensors(self, tensors: list[Tensor]) -> None:
        if len(tensors) != 1 + 2 * len(self.params):
            raise ConfigError(
                f"optimizer state holds {len(tensors)} tensors, "
                f"expected {1 + 2 * len(self.params)}"
            )
        self.t = int(tensors[0].data[0])
        n = len(self.params)
        for i in range(n):
            self.m[i][...] = tensors[1 + i].data
            self.v[i][...] = tensors[1 + n + i].data


# -- synthetic speakers -----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    n_speakers: int = 20
    utterances_per_speaker: int = 50
    frames: int = 120
    feat_dim: int = 80
    template_noise: float = 0.1  # per-utterance multiplicative jitter
    frame_noise: float = 1.0
    sign_flip: bool = True  # random per-utterance polarity
    identical_templates: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ConfigError("need at least 2 synthetic speakers")


class SyntheticSpeakers:
    """Deterministic synthetic speaker corpus.

    Each speaker owns a fixed random spectral template. An utterance is the
    template with per-utterance multiplicative jitter (and, by default, a
    random polarity flip), repeated over T frames with additive frame
    noise. The polarity flip keeps raw input similarity at chance for
    same-speaker pairs unless a model learns polarity-invariant features.
    """

    def __init__(self, cfg: SyntheticConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        if cfg.identical_templates:
            shared = rng.normal(size=cfg.feat_dim)
            self.templates = np.tile(shared, (cfg.n_speakers, 1))
        else:
            self.templates = rng.normal(size=(cfg.n_speakers, cfg.feat_dim))
        n_utt = cfg.n_speakers * cfg.utterances_per_speaker
        self.labels = np.repeat(np.arange(cfg.n_speakers), cfg.utterances_per_speaker)
        self.utterances = np.empty((n_utt, cfg.feat_dim, cfg.frames))
        for i, spk in enumerate(self.labels):
            self.utterances[i] = self._make_utterance(int(spk), rng)

    def _make_utterance(self, speaker: int, rng: np.random.Generator) -> np.ndarray:
        cfg = self.cfg
        profile = self.templates[speaker] * (
            1.0 + cfg.template_noise * rng.normal(size=cfg.feat_dim)
        )
        if cfg.sign_flip and rng.random() < 0.5:
            profile = -profile
        frames = profile[:, None] + cfg.frame_noise * rng.normal(
            size=(cfg.feat_dim, cfg.frames)
        )
        return frames

    def __len__(self) -> int:
        return len(self.labels)

    def held_out(self, utterances_per_speaker: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """Fresh utterances drawn from the same speakers (features, labels)."""
        rng = np.random.default_rng(seed)
        n = self.cfg.n_speakers * utterances_per_speaker
        labels = np.repeat(np.arange(self.cfg.n_speakers), utterances_per_speaker)
        feats = np.empty((n, self.cfg.feat_dim, self.cfg.frames))
        for i, spk in enumerate(labels):
            feats[i] = self._make_utterance(int(spk), rng)
        return feats, labels


# -- toy training loop -------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = LossConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    batch_size: int = 32
    chunk_frames: int = 80
    seed: int = 0


@dataclass
class TrainingReport:
    rows: list[tuple[int, float, float]] = field(default_factory=list)  # step, lr, loss
    final_accuracy: float = float("nan")
    diverged: bool = False

    def to_csv(self) -> str:
        lines = ["step,lr,loss"]
        lines += [f"{s},{lr:.10g},{loss:.10g}" for s, lr, loss in self.rows]
        return "\n".join(lines) + "\n"


def _batch_chunks(
    data: np.ndarray, idx: np.ndarray, chunk: int, rng: np.random.Generator
) -> np.ndarray:
    T = data.shape[2]
    chunk = min(chunk, T)
    out = np.empty((len(idx), data.shape[1], chunk))
    for row, i in enumerate(idx):
        start = int(rng.integers(0, T - chunk + 1))
        out[row] = data[i, :, start : start + chunk]
    return out


def compute_loss(cos: Tensor, labels, cfg: LossConfig) -> Tensor:
    if cfg.kind == "circle":
        return circle_loss(cos, labels, cfg)
    return aam_softmax_loss(cos, labels, cfg.aam_margin, cfg.scale)


def classify_accuracy(net: Network, feats: np.ndarray, labels: np.ndarray, batch: int = 64) -> float:
    """Fraction of utterances whose top cosine logit matches the label."""
    hits = 0
    for start in range(0, len(labels), batch):
        x = Tensor(feats[start : start + batch])
        emb = net.embed(x)
        cos = net.classifier.cosine_logits(emb)
        hits += int((cos.data.argmax(axis=1) == labels[start : start + batch]).sum())
    return hits / len(labels)


def train_toy(net: Network, dataset: SyntheticSpeakers, cfg: TrainConfig) -> TrainingReport:
    """Run the full toy recipe; deterministic under cfg.seed.

    On a non-finite loss the previous step's parameters are restored and
    TrainingDiverged is raised with the report attached as ``report``.
    """
    if net.classifier is None:
        net.attach_classifier(dataset.cfg.n_speakers, seed=cfg.seed)
    params = [p for _, p in net.named_parameters()]
    adam = Adam(params, weight_decay=cfg.schedule.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    report = TrainingReport()
    snapshot = None

    for step in range(cfg.schedule.total_steps):
        lr = cyclical_lr(step, cfg.schedule)
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        x = Tensor(_batch_chunks(dataset.utterances, idx, cfg.chunk_frames, rng))
        labels = dataset.labels[idx]

        emb = net.embed(x, TRAIN)
        cos = net.classifier.cosine_logits(emb)
        loss = compute_loss(cos, labels, cfg.loss)
        loss_value = float(loss.data)

        if not np.isfinite(loss_value):
            if snapshot is not None:
                for p, saved in zip(params, snapshot):
                    p.data[...] = saved
            report.diverged = True
            err = TrainingDiverged(
                f"loss became non-finite at step {step}; restored last good parameters"
            )
            err.report = report
            raise err

        snapshot = [p.data.copy() for p in params]
        adam.zero_grad()
        loss.backward()
        adam.step(lr)
        report.rows.append((step, lr, loss_value))

    report.final_accuracy = classify_accuracy(net, dataset.utterances, dataset.labels)
    return report


# -- checkpoints ---------------------------------------------------------------------

OPT_MAGIC = b"OPTS"


def save_checkpoint(net: Network, adam: Adam | None, path) -> None:
    """Model payload followed by an optional optimizer-state appendix."""
    from .models import _model_payload

    blob = _model_payload(net)
    if adam is not None:
        tensors = adam.state_tensors()
        import struct as _struct

        blob += OPT_MAGIC + _struct.pack("<Q", len(tensors))
        blob += b"".join(tc.tensor_to_bytes(t) for t in tensors)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> tuple[Network, list[Tensor] | None]:
    """Returns the network and raw optimizer-state tensors if present."""
    import struct as _struct

    from .errors import LoadError
    from .models import _read_model

    with open(path, "rb") as fh:
        buf = fh.read()
    net, pos = _read_model(buf)
    if pos == len(buf):
        return net, None
    if buf[pos : pos + 4] != OPT_MAGIC:
        raise LoadError("unrecognized trailing bytes after model payload")
    (count,) = _struct.unpack_from("<Q", buf, pos + 4)
    pos += 12
    tensors = []
    for _ in range(count):
        t, pos = tc.tensor_from_bytes(buf, pos)
        tensors.append(t)
    if pos != len(buf):
        raise LoadError("trailing bytes after optimizer state")
    return net, tensors
