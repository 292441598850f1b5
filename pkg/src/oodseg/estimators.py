"""Closed-form anomaly estimators on top of frozen segmentation logits.

The free energy of a pixel's class logits,

    jem(l) = -log sum_y exp(l[y]),

is low where the segmenter is confident and high elsewhere.  A trained
two-channel head refines it two ways: a task-agnostic binary log-probability
(log-softmax over the head channels) and a task-oriented residual whose
unnormalized log-probability is head[1] + jem (the shared normalizer is a
constant per parameter set and is never materialized).  The combined score

    combined = tae_log_prob(o=1) + lam * tore_residual

is what training and evaluation rank pixels by.  Three sign-flipped
segmentation baselines (msp, entropy, max_logit) come along for comparison;
higher always means more anomalous.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .head import HeadParams, head_forward
from .tensorio import read_tensor, write_tensor

SCORERS = ("combined", "tae", "tore", "jem", "msp", "entropy", "max_logit")

# scorers that need head logits in addition to segmentation logits
HEAD_SCORERS = ("combined", "tae", "tore")


@dataclass(frozen=True)
class ScoreMap:
    values: np.ndarray  # [H, W] float64
    scorer: str
    lam: float


def _logsumexp0(x: np.ndarray) -> np.ndarray:
    # max-shifted along axis 0: finite for any finite logits (|l| up to ~700)
    m = np.max(x, axis=0)
    return m + np.log(np.sum(np.exp(x - m), axis=0))


def jem_map(seg_logits: np.ndarray) -> np.ndarray:
    """Free-energy score per pixel from [K, H, W] class logits."""
    return -_logsumexp0(np.asarray(seg_logits, dtype=np.float64))


def tae_log_prob_map(head_logits: np.ndarray, o: int) -> np.ndarray:
    if o not in (0, 1):
        raise ValueError(f"channel must be 0 or 1, got {o}")
    h = np.asarray(head_logits, dtype=np.float64)
    if h.shape[0] != 2:
        raise ValueError(f"head logits must have 2 channels, got {h.shape}")
    return h[o] - _logsumexp0(h)


def tore_residual_map(head_logits: np.ndarray, seg_logits: np.ndarray) -> np.ndarray:
    h = np.asarray(head_logits, dtype=np.float64)
    if h.shape[0] != 2:
        raise ValueError(f"head logits must have 2 channels, got {h.shape}")
    return h[1] + jem_map(seg_logits)


def combined_map(head_logits: np.ndarray, seg_logits: np.ndarray, lam: float = 0.5) -> np.ndarray:
    return tae_log_prob_map(head_logits, 1) + lam * tore_residual_map(head_logits, seg_logits)


def _softmax0(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=0))
    return e / np.sum(e, axis=0)


def msp_map(seg_logits: np.ndarray) -> np.ndarray:
    return -np.max(_softmax0(np.asarray(seg_logits, dtype=np.float64)), axis=0)


def entropy_map(seg_logits: np.ndarray) -> np.ndarray:
    p = _softmax0(np.asarray(seg_logits, dtype=np.float64))
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -np.sum(plogp, axis=0)


def max_logit_map(seg_logits: np.ndarray) -> np.ndarray:
    return -np.max(np.asarray(seg_logits, dtype=np.float64), axis=0)


# ---------------------------------------------------------------------------
# scalar forms (single pixel); these reuse the map code on singleton shapes

def jem_score(seg_logits) -> float:
    v = np.asarray(seg_logits, dtype=np.float64).reshape(-1, 1, 1)
    return float(jem_map(v)[0, 0])


def tae_log_prob(head_logits, o: int) -> float:
    v = np.asarray(head_logits, dtype=np.float64).reshape(-1, 1, 1)
    return float(tae_log_prob_map(v, o)[0, 0])


def tore_log_prob_residual(head_logits, seg_logits) -> float:
    h = np.asarray(head_logits, dtype=np.float64).reshape(-1, 1, 1)
    s = np.asarray(seg_logits, dtype=np.float64).reshape(-1, 1, 1)
    return float(tore_residual_map(h, s)[0, 0])


def combined_score(head_logits, seg_logits, lam: float = 0.5) -> float:
    h = np.asarray(head_logits, dtype=np.float64).reshape(-1, 1, 1)
    s = np.asarray(seg_logits, dtype=np.float64).reshape(-1, 1, 1)
    return float(combined_map(h, s, lam)[0, 0])


def baseline_scores(seg_logits) -> dict[str, float]:
    v = np.asarray(seg_logits, dtype=np.float64).reshape(-1, 1, 1)
    return {
        "msp": float(msp_map(v)[0, 0]),
        "entropy": float(entropy_map(v)[0, 0]),
        "max_logit": float(max_logit_map(v)[0, 0]),
    }


def all_score_maps(
    head: HeadParams | None,
    features: np.ndarray,
    seg_logits: np.ndarray,
    lam: float = 0.5,
) -> dict[str, np.ndarray]:
    """Every scorer's map in one pass; head-based maps need ``head``."""
    out = {
        "jem": jem_map(seg_logits),
        "msp": msp_map(seg_logits),
        "entropy": entropy_map(seg_logits),
        "max_logit": max_logit_map(seg_logits),
    }
    if head is not None:
        hl, _ = head_forward(head, features, mode="eval")
        out["tae"] = tae_log_prob_map(hl, 1)
        out["tore"] = tore_residual_map(hl, seg_logits)
        out["combined"] = out["tae"] + lam * out["tore"]
    return out


def score_map(
    head: HeadParams | None,
    features: np.ndarray,
    seg_logits: np.ndarray,
    lam: float = 0.5,
    scorer: str = "combined",
) -> ScoreMap:
    """Per-pixel score map for one scorer; eval-mode head, frozen inputs."""
    if scorer not in SCORERS:
        raise ValueError(f"unknown scorer {scorer!r}, expected one of {SCORERS}")
    seg = np.asarray(seg_logits, dtype=np.float64)
    if seg.ndim != 3:
        raise ValueError(f"seg logits must be [K, H, W], got shape {seg.shape}")
    if scorer in HEAD_SCORERS:
        if head is None:
            raise ValueError(f"scorer {scorer!r} needs head parameters")
        hl, _ = head_forward(head, features, mode="eval")
        if hl.shape[1:] != seg.shape[1:]:
            raise ValueError(f"head/seg spatial mismatch: {hl.shape} vs {seg.shape}")
        if scorer == "tae":
            values = tae_log_prob_map(hl, 1)
        elif scorer == "tore":
            values = tore_residual_map(hl, seg)
        else:
            values = combined_map(hl, seg, lam)
    elif scorer == "jem":
        values = jem_map(seg)
    elif scorer == "msp":
        values = msp_map(seg)
    elif scorer == "entropy":
        values = entropy_map(seg)
    else:
        values = max_logit_map(seg)
    return ScoreMap(values=values, scorer=scorer, lam=lam)


def save_score_map(sm: ScoreMap, path: str | Path) -> None:
    """TNSR values plus a text sidecar recording scorer and lambda."""
    path = Path(path)
    write_tensor(path, sm.values)
    sidecar = path.with_suffix(path.suffix + ".txt")
    sidecar.write_text(f"scorer={sm.scorer}\nlambda={sm.lam!r}\n")


def load_score_map(path: str | Path) -> ScoreMap:
    path = Path(path)
    values = read_tensor(path)
    meta = {}
    for line in path.with_suffix(path.suffix + ".txt").read_text().splitlines():
        key, _, val = line.partition("=")
        meta[key] = val
    if meta.get("scorer") not in SCORERS:
        raise ValueError(f"sidecar has unknown scorer {meta.get('scorer')!r}")
    return ScoreMap(values=values, scorer=meta["scorer"], lam=float(meta["lambda"]))
