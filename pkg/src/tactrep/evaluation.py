"""Embedding extraction, linear probing, silhouette separation and matching metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .data_model import Manifest
from .errors import DegenerateLabels, NoEligiblePairs, UnknownSensor
from .trainer import MediaLoader

POLICIES = ("specific", "universal", "auto")
LABEL_COLUMNS = ("object_id", "position_id", "sensor", "split", "material")


@dataclass
class EmbeddingTable:
    ids: list[str]
    vectors: np.ndarray  # (n, D)
    labels: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("embedding table ids must be unique")
        if self.vectors.shape[0] != len(self.ids):
            raise ValueError("one vector per id")

    def __len__(self) -> int:
        return len(self.ids)

    def column(self, name: str) -> np.ndarray:
        return np.asarray(self.labels[name])

    def select(self, mask: np.ndarray) -> "EmbeddingTable":
        mask = np.asarray(mask, dtype=bool)
        return EmbeddingTable([i for i, k in zip(self.ids, mask) if k], self.vectors[mask],
                              {c: [v for v, k in zip(vals, mask) if k] for c, vals in self.labels.items()})


@dataclass
class ProbeResult:
    accuracy: float
    n_train: int
    n_test: int
    class_count: int
    weights: np.ndarray | None = field(default=None, repr=False)


def _model_of(ckpt_or_model):
    if isinstance(ckpt_or_model, Checkpoint):
        return ckpt_or_model.build_model()
    return ckpt_or_model


def _token_choice(model, sensor: str, policy: str) -> bool:
    seen = model.sensor_bank.is_seen(sensor)
    if policy == "universal":
        return True
    if policy == "specific":
        if not seen:
            raise UnknownSensor(sensor)
        return False
    return not seen


def extract_embeddings(ckpt, manifest: Manifest, sensor_token_policy: str = "auto",
                       media_kind: str = "video", batch_size: int = 64) -> EmbeddingTable:
    """Touch embeddings for every sample usable as ``media_kind``.

    ``specific`` uses each sensor's own tokens (error for unseen sensors),
    ``universal`` uses the shared set for all, ``auto`` routes unseen sensors
    to the universal set and seen sensors to their own.
    """
    if sensor_token_policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    model = _model_of(ckpt)
    model.eval()
    frames = model.patch_cfg.frames
    samples = [s for s in manifest.samples if media_kind == "image" or s.video_capable(frames)]
    choices = [_token_choice(model, s.sensor, sensor_token_policy) for s in samples]
    loader = MediaLoader(manifest, model.patch_cfg)
    vecs = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            ids = [s.id for s in chunk]
            media = loader.media(ids, media_kind)
            vecs.append(model.embed_touch(media, [s.sensor for s in chunk], choices[i:i + batch_size]).numpy())
    dim = model.enc_cfg.embed_dim
    vectors = np.concatenate(vecs) if vecs else np.zeros((0, dim), dtype=np.float32)
    labels = {
        "object_id": [s.object_id for s in samples],
        "position_id": [s.position_id for s in samples],
        "sensor": [s.sensor for s in samples],
        "split": [s.split for s in samples],
        "material": [s.material or "" for s in samples],
        "location": [f"{s.object_id}/{s.position_id}" for s in samples],
    }
    return EmbeddingTable([s.id for s in samples], vectors, labels)


# ------------------------------------------------------------------ probing


def fit_softmax_regression(x: np.ndarray, y: np.ndarray, n_classes: int, iters: int = 500,
                           lr: float = 0.1, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch gradient descent on multinomial cross-entropy. Returns (W, b)."""
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1e-3, size=(x.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    n = x.shape[0]
    for _ in range(iters):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    return w, b


def linear_probe(table: EmbeddingTable, label: str = "material", seed: int = 0, iters: int = 500,
                 lr: float = 0.1, train_split: str = "train", test_split: str = "test") -> ProbeResult:
    """Fit a linear classifier on frozen train-split vectors; score the test split.

    Features are standardized with train-split statistics only.
    """
    split = table.column("split")
    y_all = table.column(label)
    tr, te = split == train_split, split == test_split
    classes = sorted(set(y_all[tr]))
    if len(classes) < 2:
        raise DegenerateLabels(f"need >= 2 {label} classes in the {train_split} split")
    if not te.any():
        raise DegenerateLabels(f"no rows in the {test_split} split")
    index = {c: k for k, c in enumerate(classes)}
    x_tr = table.vectors[tr].astype(np.float64)
    mu = x_tr.mean(axis=0)
    sd = x_tr.std(axis=0) + 1e-8
    y_tr = np.array([index[c] for c in y_all[tr]])
    w, b = fit_softmax_regression((x_tr - mu) / sd, y_tr, len(classes), iters, lr, seed)
    x_te = (table.vectors[te].astype(np.float64) - mu) / sd
    pred = np.argmax(x_te @ w + b, axis=1)
    truth = np.array([index.get(c, -1) for c in y_all[te]])
    acc = float(np.mean(pred == truth))
    return ProbeResult(acc, int(tr.sum()), int(te.sum()), len(classes), np.vstack([w, b[None]]))


# --------------------------------------------------------------- clustering


def silhouette(x: np.ndarray, labels: Sequence) -> float:
    """Mean Euclidean silhouette coefficient; singleton clusters score 0."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise DegenerateLabels("silhouette needs at least two groups")
    sq = np.sum(x * x, axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0))
    np.fill_diagonal(dist, 0.0)
    member = labels[:, None] == uniq[None, :]
    counts = member.sum(axis=0)
    sums = dist @ member
    own = np.argmax(member, axis=1)
    n_own = counts[own]
    a = np.where(n_own > 1, sums[np.arange(len(x)), own] / np.maximum(n_own - 1, 1), 0.0)
    other = sums / counts[None, :]
    other[np.arange(len(x)), own] = np.inf
    b = other.min(axis=1)
    s = np.where(n_own > 1, (b - a) / np.maximum(np.maximum(a, b), 1e-300), 0.0)
    return float(s.mean())


def silhouette_separation(table: EmbeddingTable, label_a: str = "object_id",
                          label_b: str = "sensor") -> tuple[float, float]:
    for name in (label_a, label_b):
        vals, counts = np.unique(table.column(name), return_counts=True)
        if len(vals) < 2 or counts.min() < 2:
            raise DegenerateLabels(f"labeling {name!r} needs >= 2 groups of >= 2 members")
    return silhouette(table.vectors, table.column(label_a)), silhouette(table.vectors, table.column(label_b))


def pca_2d(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    coords = xc @ vt[:2].T
    # fix the sign so exports are reproducible across LAPACK builds
    signs = np.sign(coords[np.argmax(np.abs(coords), axis=0), range(coords.shape[1])])
    return coords * np.where(signs == 0, 1.0, signs)


# ----------------------------------------------------------------- matching


def roc_auc(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise NoEligiblePairs("AUC needs positive and negative scores")
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(allv.size)
    sorted_v = allv[order]
    i = 0
    while i < allv.size:
        j = i
        while j + 1 < allv.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    r_pos = ranks[:pos.size].sum()
    return float((r_pos - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size))


def matching_pairs(manifest: Manifest, seed: int = 0) -> tuple[list[tuple[str, str]], list[tuple[str, str]]]:
    """All cross-sensor pairs inside groups, plus as many random non-matching pairs."""
    positives = []
    for g in manifest.groups.values():
        ms = g.members
        for i in range(len(ms)):
            for j in range(i + 1, len(ms)):
                if ms[i].sensor != ms[j].sensor:
                    positives.append((ms[i].id, ms[j].id))
    if not positives:
        raise NoEligiblePairs("no group holds two sensors")
    rng = np.random.default_rng(seed)
    samples = manifest.samples
    keys = [(s.object_id, s.position_id) for s in samples]
    if len(set(keys)) < 2:
        raise NoEligiblePairs("negatives need two distinct object/position keys")
    negatives = []
    while len(negatives) < len(positives):
        i, j = rng.integers(len(samples), size=2)
        if keys[i] != keys[j]:
            negatives.append((samples[i].id, samples[j].id))
    return positives, negatives


def matching_eval(ckpt, manifest: Manifest, seed: int = 0, media_kind: str = "video",
                  sensor_token_policy: str = "auto") -> tuple[float, float]:
    """ROC-AUC and accuracy at 0.5 of the match head on balanced pairs."""
    model = _model_of(ckpt)
    positives, negatives = matching_pairs(manifest, seed)
    table = extract_embeddings(model, manifest, sensor_token_policy, media_kind)
    row = {sid: k for k, sid in enumerate(table.ids)}
    vec = torch.from_numpy(table.vectors)

    def score(pairs):
        a = vec[[row[p[0]] for p in pairs]]
        b = vec[[row[p[1]] for p in pairs]]
        with torch.no_grad():
            return model.match_head(a, b).numpy()

    sp, sn = score(positives), score(negatives)
    auc = roc_auc(sp, sn)
    acc = float((np.sum(sp >= 0.5) + np.sum(sn < 0.5)) / (sp.size + sn.size))
    return auc, acc


# ------------------------------------------------------------------- export


def write_embeddings_csv(table: EmbeddingTable, path: str | Path, config_hash: str | None = None) -> None:
    """Header id,object_id,position_id,sensor,split,material,dim_0..; 9 significant digits.

    A leading ``# config_hash=...`` comment line ties the file to its checkpoint.
    """
    dim = table.vectors.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["id", *LABEL_COLUMNS, *[f"dim_{k}" for k in range(dim)]])
        for k, sid in enumerate(table.ids):
            w.writerow([sid, *[table.labels[c][k] for c in LABEL_COLUMNS],
                        *[f"{v:.9g}" for v in table.vectors[k]]])


def read_embeddings_csv(path: str | Path) -> tuple[EmbeddingTable, str | None]:
    config_hash = None
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if lines and lines[0].startswith("#"):
        config_hash = lines[0].split("=", 1)[1].strip()
        lines = lines[1:]
    rows = list(csv.reader(lines))
    header, body = rows[0], rows[1:]
    n_lab = 1 + len(LABEL_COLUMNS)
    ids = [r[0] for r in body]
    labels = {c: [r[1 + k] for r in body] for k, c in enumerate(LABEL_COLUMNS)}
    vectors = np.array([[float(v) for v in r[n_lab:]] for r in body], dtype=np.float64)
    vectors = vectors.reshape(len(body), len(header) - n_lab)
    return EmbeddingTable(ids, vectors, labels), config_hash


def write_report(metrics: dict, path: str | Path, n: int, config_hash: str) -> dict:
    report = {**metrics, "n": n, "config_hash": config_hash}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report
