"""Frame-level ACC, AUC and ROC curves."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 (real) or 1 (fake)")
    n_fake = int(labels.sum())
    if n_fake == 0 or n_fake == labels.size:
        raise ValueError("AUC needs both real and fake samples")
    return scores, labels.astype(bool)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with mid-ranks for ties; label 1 is the positive (fake) class."""
    scores, fake = _split(scores, labels)
    ranks = rankdata(scores, method="average")
    n_fake = int(fake.sum())
    n_real = fake.size - n_fake
    u = ranks[fake].sum() - n_fake * (n_fake + 1) / 2.0
    return float(u / (n_fake * n_real))


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """``(fpr, tpr)`` points, one per distinct threshold, from (0, 0) to (1, 1)."""
    scores, fake = _split(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], fake[order]
    tps = np.cumsum(y)
    fps = np.cumsum(~y)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    n_fake, n_real = tps[-1], fps[-1]
    points = [(0.0, 0.0)]
    points += [(float(fps[i] / n_real), float(tps[i] / n_fake)) for i in last]
    return points


def accuracy(probs, labels) -> float:
    """Argmax accuracy; ``probs`` is N x 2 (real, fake)."""
    probs = np.asarray(probs)
    labels = np.asarray(labels).reshape(-1)
    return float((probs.argmax(axis=1) == labels).mean())


@dataclass
class EvalReport:
    acc: float
    auc: float
    roc: list[tuple[float, float]]
    n_real: int
    n_fake: int
    scores: list[float] = field(default_factory=list)

    @classmethod
    def from_predictions(cls, probs, labels) -> "EvalReport":
        probs = np.asarray(probs, dtype=np.float64)
        labels = np.asarray(labels).reshape(-1)
        scores = probs[:, 1]
        return cls(
            acc=accuracy(probs, labels),
            auc=auc(scores, labels),
            roc=roc_curve(scores, labels),
            n_real=int((labels == 0).sum()),
            n_fake=int((labels == 1).sum()),
            scores=[float(s) for s in scores],
        )

    def to_json(self) -> str:
        d = asdict(self)
        d["roc"] = [list(p) for p in self.roc]
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d["roc"] = [tuple(p) for p in d["roc"]]
        return cls(**d)
