"""Recognition protocols on frontalized faces.

* rank-1 identification: one gallery embedding per identity, probes matched by
  cosine similarity, accuracy reported per |pose| bin;
* 10-fold verification: per-fold thresholds fitted on the other nine folds,
  plus AUC as the probability that a positive pair outscores a negative one.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata
import torch

from .facedata import DatasetManifest, load_sample, make_quadruple, sample_seed
from .generator import coarse_forward_quadruple, images_to_tensor
from .booster import boost_forward
from .identity import extract

N_FOLDS = 10
TIE_TOL = 1e-12


@dataclass
class EmbeddingRecord:
    identity: int
    pose_deg: int
    role: str
    embedding: np.ndarray

    def __post_init__(self):
        if self.role not in ("gallery", "probe"):
            raise ValueError(f"role must be 'gallery' or 'probe', got {self.role!r}")


@dataclass
class VerificationPair:
    a: np.ndarray
    b: np.ndarray
    same_identity: bool
    fold: int


@dataclass
class EvalReport:
    protocol: str
    rank1: Dict[int, float] = field(default_factory=dict)
    overall: Optional[float] = None
    fold_acc: List[Optional[float]] = field(default_factory=list)
    acc: Optional[float] = None
    auc: Optional[float] = None
    excluded_folds: List[int] = field(default_factory=list)
    thresholds: List[Optional[float]] = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["rank1"] = {str(k): v for k, v in self.rank1.items()}
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    def table(self) -> str:
        if self.protocol == "rank1":
            poses = sorted(self.rank1)
            head = ["Pose"] + [f"±{p}°" if p else "0°" for p in poses] + ["All"]
            vals = ["Rank-1 (%)"] + [f"{100 * self.rank1[p]:.2f}" for p in poses]
            vals.append(f"{100 * self.overall:.2f}" if self.overall is not None else "-")
            widths = [max(len(a), len(b)) for a, b in zip(head, vals)]
            fmt = lambda row: "  ".join(c.rjust(w) for c, w in zip(row, widths))
            return fmt(head) + "\n" + fmt(vals)
        lines = [f"{'Fold':>6}  {'ACC (%)':>8}  {'thr':>8}"]
        for i, (a, t) in enumerate(zip(self.fold_acc, self.thresholds)):
            lines.append(f"{i:>6}  {('excluded' if a is None else f'{100 * a:.2f}'):>8}  "
                         f"{('-' if t is None else f'{t:.4f}'):>8}")
        lines.append(f"{'ACC':>6}  {100 * self.acc:8.2f}")
        lines.append(f"{'AUC':>6}  {100 * self.auc:8.2f}")
        return "\n".join(lines)


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norm > 0, norm, 1.0)


def cosine(a, b) -> float:
    return float(_unit(a) @ _unit(b))


def rank1(gallery: Sequence[EmbeddingRecord], probes: Sequence[EmbeddingRecord]) -> EvalReport:
    """Per-|pose| rank-1 rates; nearest gallery by cosine, ties go to the lowest gallery index."""
    if not gallery:
        raise ValueError("empty gallery")
    ids = [g.identity for g in gallery]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate gallery identity")
    missing = {p.identity for p in probes} - set(ids)
    if missing:
        raise ValueError(f"probe identities without a gallery entry: {sorted(missing)}")
    G = _unit(np.stack([g.embedding for g in gallery]))
    hits: Dict[int, List[bool]] = {}
    if probes:
        P = _unit(np.stack([p.embedding for p in probes]))
        sims = P @ G.T
        # similarities within rounding of the maximum count as ties; the first wins
        best = np.argmax(sims >= sims.max(axis=1, keepdims=True) - TIE_TOL, axis=1)
        for p, b in zip(probes, best):
            hits.setdefault(abs(p.pose_deg), []).append(ids[b] == p.identity)
    per = {pose: float(np.mean(v)) for pose, v in sorted(hits.items())}
    all_hits = [h for v in hits.values() for h in v]
    return EvalReport("rank1", rank1=per, overall=float(np.mean(all_hits)) if all_hits else None)


def auc_score(scores, labels) -> float:
    """P(positive score > negative score), ties counted one half (rank-sum form)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative pairs")
    r = rankdata(scores)  # tied scores share their average rank
    return float((r[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def best_threshold(scores, labels) -> float:
    """Threshold maximising accuracy of ``score >= t``; ties go to the smallest threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    uniq = np.unique(scores)
    cands = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0, [uniq[-1] + 1.0]])
    accs = [np.mean((scores >= t) == labels) for t in cands]
    return float(cands[int(np.argmax(accs))])


def verify_10fold(pairs: Sequence[VerificationPair]) -> EvalReport:
    sims = np.array([cosine(p.a, p.b) for p in pairs])
    labels = np.array([p.same_identity for p in pairs], dtype=bool)
    folds = np.array([p.fold for p in pairs])
    if folds.size and (folds.min() < 0 or folds.max() >= N_FOLDS):
        raise ValueError(f"fold indices must lie in 0..{N_FOLDS - 1}")
    for k in range(N_FOLDS):
        if not np.any(folds == k):
            raise ValueError(f"fold {k} has no pairs")
    excluded = [k for k in range(N_FOLDS) if len(set(labels[folds == k])) < 2]
    fold_acc: List[Optional[float]] = []
    thresholds: List[Optional[float]] = []
    for k in range(N_FOLDS):
        if k in excluded:
            fold_acc.append(None)
            thresholds.append(None)
            continue
        train = folds != k
        t = best_threshold(sims[train], labels[train])
        test = folds == k
        fold_acc.append(float(np.mean((sims[test] >= t) == labels[test])))
        thresholds.append(t)
    kept = [a for a in fold_acc if a is not None]
    if not kept:
        raise ValueError("every fold holds a single class")
    return EvalReport("verify", fold_acc=fold_acc, acc=float(np.mean(kept)),
                      auc=auc_score(sims, labels), excluded_folds=excluded, thresholds=thresholds)


# ------------------------------------------------------------------ embedding

def _embed(extractor, images, tap: str, dtype) -> np.ndarray:
    with torch.no_grad():
        taps = extract(extractor, images_to_tensor(images, dtype))
    return getattr(taps, tap).double().numpy()


@torch.no_grad()
def frontalize(generator, booster, quad, dtype=torch.float32):
    """Coarse outputs and boosted image for one quadruple, each (1, 3, H, W)."""
    generator.eval()
    booster.eval()
    coarse = coarse_forward_quadruple(generator, torch.stack(
        [images_to_tensor([im], dtype) for im in quad.images]))
    return coarse, boost_forward(booster, [c.full for c in coarse])


def frontalize_and_embed(generator, booster, extractor, manifest: DatasetManifest,
                         mode: str = "keypoint", seed: int = 0, tap: str = "fc",
                         frontalize_probes: bool = True) -> List[EmbeddingRecord]:
    """Gallery: each identity's first frontal image, embedded as is.  Probes:
    every record's profile, occluded, frontalized (booster output), embedded.

    With ``frontalize_probes=False`` each of the four occluded profiles is
    embedded directly instead, which gives the unfrontalized baseline.
    """
    if tap not in ("fc", "pool"):
        raise ValueError(f"tap must be 'fc' or 'pool', got {tap!r}")
    dtype = next(extractor.parameters()).dtype
    if frontalize_probes:
        gdtype = next(generator.parameters()).dtype
        if generator.config.image_size != booster.image_size:
            raise ValueError("generator and booster image sizes differ")
    records: List[EmbeddingRecord] = []
    seen = set()
    for i, rec in enumerate(manifest.records):
        sample = load_sample(manifest, i)
        if rec.identity not in seen:
            seen.add(rec.identity)
            records.append(EmbeddingRecord(rec.identity, 0, "gallery",
                                           _embed(extractor, [sample.frontal_gt], tap, dtype)[0]))
        quad = make_quadruple(sample, mode, sample_seed(seed, i))
        if frontalize_probes:
            _, boosted = frontalize(generator, booster, quad, gdtype)
            with torch.no_grad():
                emb = getattr(extract(extractor, boosted.to(dtype)), tap)[0].double().numpy()
            records.append(EmbeddingRecord(rec.identity, rec.pose_deg, "probe", emb))
        else:
            for e in _embed(extractor, quad.images, tap, dtype):
                records.append(EmbeddingRecord(rec.identity, rec.pose_deg, "probe", e))
    return records


def split(records: Sequence[EmbeddingRecord]):
    gallery = [r for r in records if r.role == "gallery"]
    probes = [r for r in records if r.role == "probe"]
    return gallery, probes


def make_pairs(records: Sequence[EmbeddingRecord], seed: int = 0,
               per_fold: int = 6) -> List[VerificationPair]:
    """Balanced same/different probe pairs spread over ten folds."""
    probes = [r for r in records if r.role == "probe"]
    rng = np.random.default_rng(seed)
    by_id: Dict[int, List[EmbeddingRecord]] = {}
    for r in probes:
        by_id.setdefault(r.identity, []).append(r)
    multi = [k for k, v in by_id.items() if len(v) >= 2]
    if not multi or len(by_id) < 2:
        raise ValueError("verification pairs need >= 2 identities and a repeated identity")
    ids = sorted(by_id)
    pairs = []
    for fold in range(N_FOLDS):
        for j in range(per_fold):
            if j % 2 == 0:
                k = multi[int(rng.integers(len(multi)))]
                a, b = rng.choice(len(by_id[k]), size=2, replace=False)
                pairs.append(VerificationPair(by_id[k][a].embedding, by_id[k][b].embedding, True, fold))
            else:
                k1, k2 = rng.choice(len(ids), size=2, replace=False)
                a = by_id[ids[k1]][int(rng.integers(len(by_id[ids[k1]])))]
                b = by_id[ids[k2]][int(rng.integers(len(by_id[ids[k2]])))]
                pairs.append(VerificationPair(a.embedding, b.embedding, False, fold))
    return pairs
