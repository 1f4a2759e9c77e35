"""Embedding extraction, cosine trial scoring, and EER / minDCF metrics.

The metric sweeps operate on ranks (every distinct score is a candidate
threshold, plus a reject-all sentinel), so both are invariant under
strictly monotone transforms of the scores and brute-force verifiable.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .blocks import EVAL
from .errors import ConfigError, ContractError, LoadError, ShapeError
from .models import Network
from .tensor import Tensor

FEATURE_MAGIC = b"FEAT"
FEAT_DIM = 80


# -- feature store ----------------------------------------------------------------


def save_features(feat: np.ndarray, path) -> None:
    """magic "FEAT", u32 F, u32 T, little-endian f64 payload."""
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 2 or feat.shape[0] != FEAT_DIM:
        raise ShapeError(f"feature matrix must be [{FEAT_DIM}, T], got {feat.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<II", feat.shape[0], feat.shape[1]))
        fh.write(feat.astype("<f8").tobytes())


def load_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12 or buf[:4] != FEATURE_MAGIC:
        raise LoadError(f"bad feature file magic in {path}")
    F, T = struct.unpack_from("<II", buf, 4)
    if len(buf) != 12 + 8 * F * T:
        raise LoadError(f"feature payload truncated in {path}")
    return np.frombuffer(buf, dtype="<f8", offset=12).reshape(F, T).astype(np.float64)


class FeatureStore:
    """Utterance id -> [80, T] feature matrix, with a sidecar manifest on disk."""

    def __init__(self):
        self._feats: dict[str, np.ndarray] = {}

    def add(self, utt_id: str, feat: np.ndarray) -> None:
        feat = np.asarray(feat, dtype=np.float64)
        if feat.ndim != 2 or feat.shape[0] != FEAT_DIM or feat.shape[1] < 1:
            raise ShapeError(f"feature matrix must be [{FEAT_DIM}, T>=1], got {feat.shape}")
        self._feats[utt_id] = feat

    def get(self, utt_id: str) -> np.ndarray:
        return self._feats[utt_id]

    def ids(self) -> list[str]:
        return list(self._feats)

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._feats

    def __len__(self) -> int:
        return len(self._feats)

    def save_dir(self, out_dir) -> None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
            for i, utt_id in enumerate(self._feats):
                fname = f"utt{i:06d}.feat"
                save_features(self._feats[utt_id], os.path.join(out_dir, fname))
                fh.write(f"{utt_id} {fname}\n")

    @staticmethod
    def load_dir(in_dir) -> "FeatureStore":
        import os

        store = FeatureStore()
        manifest = os.path.join(in_dir, "manifest.txt")
        with open(manifest) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                utt_id, fname = line.split()
                store.add(utt_id, load_features(os.path.join(in_dir, fname)))
        return store


# -- trials -------------------------------------------------------------------------


@dataclass(frozen=True)
class Trial:
    target: bool
    enroll: str
    test: str


def parse_trials(text: str) -> list[Trial]:
    """Lines "1|0 <enroll_id> <test_id>"."""
    trials = []
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise ConfigError(f"bad trial line {ln}: {line!r}")
        trials.append(Trial(parts[0] == "1", parts[1], parts[2]))
    return trials


def write_trials(trials: list[Trial], path) -> None:
    with open(path, "w") as fh:
        for t in trials:
            fh.write(f"{int(t.target)} {t.enroll} {t.test}\n")


# -- embedding extraction --------------------------------------------------------------


def extract_embeddings(
    net: Network,
    feat: np.ndarray,
    chunk_len: int = 300,
    stride: int = 150,
    min_frames: int | None = None,
) -> np.ndarray:
    """Sliding-window chunk embeddings, one L2-normalized row per chunk.

    Utterances shorter than ``chunk_len`` fall back to a single full-length
    chunk; shorter than ``min_frames`` (default: the model's time span,
    capped at chunk_len) they are zero-padded up to that minimum.
    """
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 2 or feat.shape[0] != net.config.feat_dim:
        raise ShapeError(
            f"feature matrix must be [{net.config.feat_dim}, T], got {feat.shape}"
        )
    if min_frames is None:
        min_frames = min(net.max_time_rf(), chunk_len)
    T = feat.shape[1]
    if T < min_frames:
        warnings.warn(
            f"utterance of {T} frames is shorter than the model's {min_frames}-frame "
            f"span; zero-padded to a single chunk",
            stacklevel=2,
        )
        feat = np.pad(feat, ((0, 0), (0, min_frames - T)))
        T = min_frames
    if T < chunk_len:
        chunks = feat[None]
    else:
        n = (T - chunk_len) // stride + 1
        chunks = np.stack(
            [feat[:, i * stride : i * stride + chunk_len] for i in range(n)]
        )
    emb = net.embed(Tensor(chunks), EVAL).data
    norms = np.sqrt((emb * emb).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        raise ContractError("zero-norm embedding row")
    return emb / norms


def score_trial(e_enroll: np.ndarray, e_test: np.ndarray) -> float:
    """Mean cosine similarity over all enroll x test chunk pairs."""
    if e_enroll.ndim != 2 or e_test.ndim != 2 or len(e_enroll) == 0 or len(e_test) == 0:
        raise ShapeError(
            f"embedding matrices must be nonempty 2-D, got {e_enroll.shape} and {e_test.shape}"
        )

    def _unit(rows: np.ndarray) -> np.ndarray:
        norms = np.sqrt((rows * rows).sum(axis=1, keepdims=True))
        if np.any(norms == 0):
            raise ContractError("zero-norm embedding row")
        return rows / norms

    sims = _unit(e_enroll) @ _unit(e_test).T
    return float(sims.mean())


# -- detection metrics -------------------------------------------------------------------


@dataclass
class EvalMetrics:
    eer: float
    eer_threshold: float
    min_dcf: float
    dcf_threshold: float
    p_target: float = 0.01
    c_fa: float = 1.0
    c_miss: float = 1.0

    def to_text(self) -> str:
        return (
            f"eer={self.eer:.6f}\n"
            f"eer_threshold={self.eer_threshold:.6f}\n"
            f"min_dcf={self.min_dcf:.6f}\n"
            f"dcf_threshold={self.dcf_threshold:.6f}\n"
        )


def _operating_points(scores: np.ndarray, labels: np.ndarray):
    """P_miss and P_fa at every candidate threshold (accept when score >= t).

    Thresholds run from a reject-all sentinel down through each distinct
    score, so miss falls from 1 to 0 while fa rises from 0 to 1.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} must be 1-D equal")
    n_target = int(labels.sum())
    n_nontarget = int((~labels).sum())
    if n_target == 0 or n_nontarget == 0:
        raise ContractError("need at least one target and one nontarget trial")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_targets = labels[order]

    distinct = np.ones(len(scores), dtype=bool)
    distinct[1:] = sorted_scores[1:] != sorted_scores[:-1]
    # accepted counts once each run of equal scores is fully included
    tgt_cum = np.cumsum(sorted_targets)
    non_cum = np.cumsum(~sorted_targets)
    run_ends = np.flatnonzero(np.append(distinct[1:], True))

    thresholds = [np.inf]
    miss = [1.0]
    fa = [0.0]
    for end in run_ends:
        thresholds.append(sorted_scores[end])
        miss.append((n_target - tgt_cum[end]) / n_target)
        fa.append(non_cum[end] / n_nontarget)
    return np.array(thresholds), np.array(miss), np.array(fa)


def compute_eer(scores, labels) -> tuple[float, float]:
    """Equal error rate and its threshold over the exhaustive score sweep.

    Between adjacent operating points the (P_miss, P_fa) segment is
    interpolated linearly to the crossing P_miss == P_fa.
    """
    thresholds, miss, fa = _operating_points(scores, labels)
    diff = miss - fa
    idx = int(np.flatnonzero(diff <= 0)[0])  # diff is non-increasing
    if diff[idx] == 0.0:
        return float(miss[idx]), float(thresholds[idx])
    i, j = idx - 1, idx
    denom = (miss[j] - miss[i]) - (fa[j] - fa[i])
    alpha = (fa[i] - miss[i]) / denom
    eer = miss[i] + alpha * (miss[j] - miss[i])
    t_hi = thresholds[i] if np.isfinite(thresholds[i]) else thresholds[j]
    thr = t_hi + alpha * (thresholds[j] - t_hi)
    return float(eer), float(thr)


def compute_min_dcf(
    scores, labels, p_target: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0
) -> tuple[float, float]:
    """Minimum normalized detection cost over the same threshold sweep.

    DCF(t) = c_miss*p*P_miss + c_fa*(1-p)*P_fa, normalized by
    min(c_miss*p, c_fa*(1-p)). Ties break toward the lower threshold.
    """
    thresholds, miss, fa = _operating_points(scores, labels)
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    dcf = (c_miss * p_target * miss + c_fa * (1.0 - p_target) * fa) / norm
    best = 0
    for i in range(1, len(dcf)):
        if dcf[i] <= dcf[best]:  # <= prefers later (lower) thresholds on ties
            best = i
    thr = thresholds[best]
    if not np.isfinite(thr):
        thr = float(np.max(scores)) + 1.0  # reject-all sentinel
    return float(dcf[best]), float(thr)


# -- end-to-end evaluation ------------------------------------------------------------------


def run_eval(
    net: Network,
    store: FeatureStore,
    trials: list[Trial],
    chunk_len: int = 300,
    stride: int = 150,
    p_target: float = 0.01,
) -> tuple[EvalMetrics, list[tuple[str, str, float]]]:
    """Extract, score every trial in order, and sweep the metrics."""
    if not trials:
        raise ContractError("empty trial list")
    needed = sorted({t.enroll for t in trials} | {t.test for t in trials})
    missing = [u for u in needed if u not in store]
    if missing:
        raise ConfigError(f"unresolved utterance ids: {', '.join(missing)}")
    cache = {u: extract_embeddings(net, store.get(u), chunk_len, stride) for u in needed}
    rows = [(t.enroll, t.test, score_trial(cache[t.enroll], cache[t.test])) for t in trials]
    scores = np.array([r[2] for r in rows])
    labels = np.array([t.target for t in trials])
    eer, eer_thr = compute_eer(scores, labels)
    dcf, dcf_thr = compute_min_dcf(scores, labels, p_target=p_target)
    metrics = EvalMetrics(eer, eer_thr, dcf, dcf_thr, p_target=p_target)
    return metrics, rows


def write_scores(rows: list[tuple[str, str, float]], path) -> None:
    with open(path, "w") as fh:
        for enroll, test, score in rows:
            fh.write(f"{enroll} {test} {score:.6f}\n")
