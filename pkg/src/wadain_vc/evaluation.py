"""Objective evaluation: x-vector-style speaker classifier, identification
accuracy and verification EER over converted utterances."""
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .networks import statistic_pooling

logger = logging.getLogger(__name__)

PROTOCOL = ("cosine similarity between each converted utterance's classifier embedding and the "
            "mean embedding of every enrolled speaker; target trial = intended target speaker, "
            "non-target = every other enrolled speaker")


@dataclass
class ClassifierConfig:
    channels: int = 128
    embedding_dim: int = 64
    iterations: int = 500
    batch_size: int = 16
    segment_frames: int = 128
    lr: float = 1e-3
    seed: int = 0


@dataclass
class ConvertedItem:
    name: str
    features: np.ndarray  # T x D raw MCEPs
    target: int
    source: Optional[int] = None


@dataclass
class TrialScoreSet:
    scores: np.ndarray
    labels: np.ndarray
    names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")
        if self.names and len(self.names) != len(self.scores):
            raise ValueError("names and scores differ in length")

    def validate(self):
        if not self.labels.any() or self.labels.all():
            raise ValueError("EER needs at least one target and one non-target trial")


@dataclass
class EvalReport:
    acc: float
    eer: float
    n_converted: int
    confusion: List[List[int]]
    speakers: List[str]
    condition: str = ""
    protocol: str = PROTOCOL

    def to_dict(self):
        return asdict(self)

    def table(self) -> str:
        lines = [f"# protocol: {self.protocol}",
                 f"{'condition':<24}{'ACC(%)':>10}{'EER(%)':>10}{'S':>8}",
                 f"{self.condition or '-':<24}{self.acc:>10.1f}{self.eer:>10.2f}{self.n_converted:>8d}"]
        return "\n".join(lines) + "\n"


class XVectorClassifier(nn.Module):
    """TDNN + statistic pooling + embedding layer + softmax over speakers.

    Inputs are raw T x D MCEP arrays; normalization stats are stored as buffers.
    """

    def __init__(self, mcep_dim: int, n_speakers: int, mean, std, channels=128, embedding_dim=64):
        super().__init__()
        c = channels
        self.register_buffer("mean", torch.as_tensor(np.asarray(mean), dtype=torch.float32))
        self.register_buffer("std", torch.as_tensor(np.asarray(std), dtype=torch.float32))
        self.tdnn = nn.Sequential(
            nn.Conv1d(mcep_dim, c, 5, padding=2), nn.ReLU(),
            nn.Conv1d(c, c, 3, dilation=2, padding=2), nn.ReLU(),
            nn.Conv1d(c, c, 3, dilation=3, padding=3), nn.ReLU(),
            nn.Conv1d(c, c, 1), nn.ReLU(),
        )
        self.embedding = nn.Linear(2 * c, embedding_dim)
        self.output = nn.Linear(embedding_dim, n_speakers)
        self.n_speakers = n_speakers

    def _prep(self, x):
        # x: B x T x D raw
        return ((x - self.mean) / self.std).transpose(1, 2)

    def embed_tensor(self, x):
        return self.embedding(statistic_pooling(self.tdnn(self._prep(x))))

    def forward(self, x):
        return self.output(F.relu(self.embed_tensor(x)))

    @torch.no_grad()
    def embed(self, feats: Sequence[np.ndarray]) -> np.ndarray:
        self.eval()
        return np.stack([self.embed_tensor(torch.as_tensor(f, dtype=torch.float32)[None])[0].numpy()
                         for f in feats])

    @torch.no_grad()
    def posterior(self, feats: Sequence[np.ndarray]) -> np.ndarray:
        self.eval()
        return np.stack([F.softmax(self(torch.as_tensor(f, dtype=torch.float32)[None]), -1)[0].numpy()
                         for f in feats]).astype(np.float64)


def train_speaker_classifier(feats: Sequence[np.ndarray], labels: Sequence[int], n_speakers: int,
                             cfg: Optional[ClassifierConfig] = None) -> XVectorClassifier:
    """Train on real (unconverted) features; ``feats`` are raw T x D arrays."""
    from .training import crop

    cfg = cfg or ClassifierConfig()
    labels = np.asarray(labels, dtype=np.int64)
    if n_speakers < 2 or len(set(labels.tolist())) < 2:
        raise ValueError("speaker classifier needs at least two speakers")
    allf = np.concatenate(feats)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    clf = XVectorClassifier(allf.shape[1], n_speakers, allf.mean(0), np.maximum(allf.std(0), 1e-8),
                            cfg.channels, cfg.embedding_dim)
    opt = torch.optim.Adam(clf.parameters(), lr=cfg.lr)
    clf.train()
    for _ in range(cfg.iterations):
        idx = rng.integers(0, len(feats), cfg.batch_size)
        x = torch.from_numpy(np.stack([crop(np.asarray(feats[i], np.float32), cfg.segment_frames, rng)
                                       for i in idx]))
        loss = F.cross_entropy(clf(x), torch.from_numpy(labels[idx]))
        opt.zero_grad()
        loss.backward()
        opt.step()
    clf.eval()
    return clf


def predictions(classifier, items: Sequence[ConvertedItem]) -> np.ndarray:
    return np.argmax(classifier.posterior([it.features for it in items]), axis=1)


def identification_accuracy(classifier, items: Sequence[ConvertedItem]) -> float:
    if not items:
        raise ValueError("no converted utterances to evaluate")
    pred = predictions(classifier, items)
    return 100.0 * float(np.mean(pred == np.array([it.target for it in items])))


def confusion_counts(classifier, items: Sequence[ConvertedItem], n_speakers: int) -> np.ndarray:
    conf = np.zeros((n_speakers, n_speakers), dtype=np.int64)
    for it, p in zip(items, predictions(classifier, items)):
        conf[it.target, p] += 1
    return conf


def cosine(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))


def score_trials(classifier, items: Sequence[ConvertedItem],
                 enrollment: Dict[int, Sequence[np.ndarray]]) -> TrialScoreSet:
    """One trial per (converted utterance, enrolled speaker) pair."""
    centroids = {s: classifier.embed(list(f)).mean(0) for s, f in sorted(enrollment.items())}
    emb = classifier.embed([it.features for it in items])
    scores, labels, names = [], [], []
    for it, e in zip(items, emb):
        for s, c in centroids.items():
            scores.append(cosine(e, c))
            labels.append(s == it.target)
            names.append(f"{it.name}|{s}")
    return TrialScoreSet(np.array(scores), np.array(labels), names)


def far_frr(t: TrialScoreSet):
    """FAR/FRR at every unique score plus +inf, thresholds ascending."""
    tgt = np.sort(t.scores[t.labels])
    non = np.sort(t.scores[~t.labels])
    thr = np.append(np.unique(t.scores), np.inf)
    far = (len(non) - np.searchsorted(non, thr, side="left")) / len(non)
    frr = np.searchsorted(tgt, thr, side="left") / len(tgt)
    return thr, far, frr


def crossing(far, frr) -> float:
    """Equal-error point of FAR/FRR sequences ordered by rising threshold."""
    diff = far - frr
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0:
        return 0.5 * (far[k] + frr[k])
    a0, a1 = diff[k - 1], diff[k]
    w = a0 / (a0 - a1)
    return far[k - 1] + w * (far[k] - far[k - 1])


def compute_eer(t: TrialScoreSet) -> float:
    """Equal error rate in percent, linearly interpolated between thresholds."""
    t.validate()
    _, far, frr = far_frr(t)
    return 100.0 * crossing(far, frr)


def evaluate(classifier, items: Sequence[ConvertedItem], enrollment: Dict[int, Sequence[np.ndarray]],
             speakers: List[str], condition: str = "") -> EvalReport:
    acc = identification_accuracy(classifier, items)
    eer = compute_eer(score_trials(classifier, items, enrollment))
    conf = confusion_counts(classifier, items, len(speakers))
    return EvalReport(acc=acc, eer=eer, n_converted=len(items), confusion=conf.tolist(),
                      speakers=list(speakers), condition=condition)


def write_report(report: EvalReport, json_path, table_path=None):
    with open(json_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    if table_path:
        with open(table_path, "w") as fh:
            fh.write(report.table())
