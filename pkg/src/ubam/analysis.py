"""Downstream analyses over trained embeddings: linear discriminant
scoring with distribution overlap, linear SVM classification, 1-D/2-D
projections with KDE, posture-frequency maps, the ranking benchmark, the
keypoint regression probe, recovery curves and one-class abnormality
rates."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from sklearn.covariance import ledoit_wolf
from sklearn.decomposition import PCA
from sklearn.manifold import TSNE
from sklearn.neural_network import MLPRegressor
from sklearn.svm import SVC, OneClassSVM

from .errors import ContractViolation, DomainError

log = logging.getLogger(__name__)

SVM_SOFT_MARGIN = 2.0
OVERLAP_GRID_POINTS = 512


@dataclass
class LinearScorer:
    weights: np.ndarray
    bias: float
    meta: dict = field(default_factory=dict)

    def score(self, embeddings) -> np.ndarray:
        X = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        return X @ self.weights + self.bias

    def predict(self, embeddings) -> np.ndarray:
        return np.sign(self.score(embeddings))


def train_lda(embeddings_a, embeddings_b, shrinkage: bool = True,
              meta: dict | None = None) -> LinearScorer:
    """Two-class LDA direction W = pooled_cov^-1 (mu_A - mu_B).

    Pooled covariance uses Ledoit-Wolf shrinkage by default (plain
    empirical covariance without it falls back to shrinkage when
    singular). Class A scores positive on its training mean.
    """
    A = np.asarray(embeddings_a, dtype=np.float64)
    B = np.asarray(embeddings_b, dtype=np.float64)
    if len(A) < 2 or len(B) < 2:
        raise DomainError("need at least 2 samples per class")
    mu_a, mu_b = A.mean(axis=0), B.mean(axis=0)
    pooled = np.concatenate([A - mu_a, B - mu_b])
    if shrinkage:
        cov, _ = ledoit_wolf(pooled, assume_centered=True)
    else:
        cov = pooled.T @ pooled / max(len(pooled) - 2, 1)
        if np.linalg.cond(cov) > 1e12:
            log.warning("singular pooled covariance; falling back to shrinkage")
            cov, _ = ledoit_wolf(pooled, assume_centered=True)
    w = np.linalg.solve(cov, mu_a - mu_b)
    bias = -float(w @ (mu_a + mu_b) / 2.0)
    if w @ mu_a + bias < 0:
        w, bias = -w, -bias
    return LinearScorer(w, bias, meta or {})


def minmax_normalize(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo == 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def kde_overlap(samples_p, samples_q, grid_points: int = OVERLAP_GRID_POINTS) -> dict:
    """Overlap coefficient of two Gaussian-KDE densities on a shared grid.

    The grid spans the pooled sample range extended by 6 bandwidths so
    that truncated tail mass stays below 1e-6.
    """
    p = np.asarray(samples_p, dtype=np.float64)
    q = np.asarray(samples_q, dtype=np.float64)
    jitter = 1e-9 * (abs(p).max() + abs(q).max() + 1.0)
    rng = np.random.default_rng(0)
    if np.ptp(p) == 0:
        p = p + rng.normal(0, jitter, len(p))
    if np.ptp(q) == 0:
        q = q + rng.normal(0, jitter, len(q))
    kp, kq = stats.gaussian_kde(p), stats.gaussian_kde(q)
    bw = max(kp.factor * p.std(ddof=1), kq.factor * q.std(ddof=1))
    lo = min(p.min(), q.min()) - 6 * bw
    hi = max(p.max(), q.max()) + 6 * bw
    grid = np.linspace(lo, hi, grid_points)
    dp, dq = kp(grid), kq(grid)
    overlap = float(np.trapz(np.minimum(dp, dq), grid))
    return {"overlap": min(max(overlap, 0.0), 1.0), "grid": grid,
            "density_p": dp, "density_q": dq}


@dataclass
class CohortScoreReport:
    sequence_scores: dict       # video_id -> list of per-sequence scores
    video_scores: dict          # video_id -> mean score
    normalized_scores: dict     # video_id -> min-max normalized (pooled)
    overlap: float
    kde_grid: list
    kde_query: list
    kde_reference: list


def score_and_overlap(scorer: LinearScorer, query_videos: dict,
                      reference_videos: dict) -> CohortScoreReport:
    """query/reference_videos: video_id -> (n_seq, dim) behavior embeddings.

    Per-video score = mean over its sequence scores; scores are min-max
    normalized over the pooled cohorts; overlap is the integral of the
    pointwise minimum of the two per-cohort score KDEs.
    """
    if not query_videos or not reference_videos:
        raise DomainError("both cohorts must be non-empty")
    seq_scores, video_scores = {}, {}
    for vid, emb in {**query_videos, **reference_videos}.items():
        s = scorer.score(emb)
        seq_scores[vid] = s.tolist()
        video_scores[vid] = float(s.mean())
    ids = list(video_scores)
    normalized = dict(zip(ids, minmax_normalize([video_scores[v] for v in ids])))
    qs = np.array([normalized[v] for v in query_videos])
    rs = np.array([normalized[v] for v in reference_videos])
    ov = kde_overlap(qs, rs)
    return CohortScoreReport(
        sequence_scores=seq_scores, video_scores=video_scores,
        normalized_scores=normalized, overlap=ov["overlap"],
        kde_grid=ov["grid"].tolist(), kde_query=ov["density_p"].tolist(),
        kde_reference=ov["density_q"].tolist())


def train_linear_svm(embeddings, labels, subjects, n_splits: int = 5,
                     test_fraction: float = 0.3, seed: int = 0) -> dict:
    """Linear soft-margin SVM (C = 2.0) with subject-disjoint splits;
    reports mean +- std test accuracy over the splits."""
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    subjects = np.asarray(subjects)
    if len(set(y.tolist())) != 2:
        raise DomainError("need exactly two classes")
    uniq = np.unique(subjects)
    rng = np.random.default_rng(seed)
    accs = []
    for _ in range(n_splits):
        order = rng.permutation(uniq)
        n_test = max(1, int(round(test_fraction * len(uniq))))
        test_subj = set(order[:n_test].tolist())
        te = np.array([s in test_subj for s in subjects])
        if len(set(y[~te].tolist())) < 2 or te.sum() == 0:
            continue
        clf = SVC(kernel="linear", C=SVM_SOFT_MARGIN)
        clf.fit(X[~te], y[~te])
        accs.append(float(clf.score(X[te], y[te])))
    if not accs:
        raise DomainError("no valid subject-disjoint split produced two classes")
    return {"accuracy_mean": float(np.mean(accs)), "accuracy_std": float(np.std(accs)),
            "n_splits": len(accs), "config": {"kernel": "linear", "C": SVM_SOFT_MARGIN}}


@dataclass
class EmbeddingProjection:
    method: str
    dim: int
    coordinates: np.ndarray


def project_embedding(embeddings, method: str = "tsne", dim: int = 2,
                      seed: int = 0) -> EmbeddingProjection:
    X = np.asarray(embeddings, dtype=np.float64)
    if dim not in (1, 2):
        raise DomainError("projection dim must be 1 or 2")
    if len(X) < 10:
        raise DomainError("need at least 10 items to project")
    if method == "pca":
        coords = PCA(n_components=dim, random_state=seed).fit_transform(X)
    elif method == "tsne":
        perplexity = 30 if len(X) >= 120 else max(2, len(X) // 4)
        coords = TSNE(n_components=dim, init="pca", random_state=seed,
                      perplexity=perplexity).fit_transform(X).astype(np.float64)
    else:
        raise DomainError(f"unknown projection method {method!r}")
    return EmbeddingProjection(method, dim, coords)


def posture_frequency_map(per_day_coords: dict, reference_day,
                          grid_points: int = 256, min_frames: int = 5) -> dict:
    """Per-day 1-D KDE minus the reference day's, on a shared grid."""
    if reference_day not in per_day_coords:
        raise DomainError("reference day missing")
    usable = {}
    for day, coords in per_day_coords.items():
        c = np.asarray(coords, dtype=np.float64).ravel()
        if len(c) < min_frames:
            log.warning("day %s has %d < %d frames; excluded", day, len(c), min_frames)
            continue
        usable[day] = c
    allv = np.concatenate(list(usable.values()))
    bw0 = stats.gaussian_kde(allv).factor * allv.std(ddof=1)
    lo, hi = allv.min() - 6 * bw0, allv.max() + 6 * bw0
    grid = np.linspace(lo, hi, grid_points)
    densities = {d: stats.gaussian_kde(v)(grid) for d, v in usable.items()}
    ref = densities[reference_day]
    return {"grid": grid, "densities": densities,
            "differences": {d: dens - ref for d, dens in densities.items()},
            "excluded": [d for d in per_day_coords if d not in usable]}


def ranking_benchmark(embeddings, queries) -> float:
    """queries: list of (reference_idx, similar_idx[10], dissimilar_idx[10]).
    Accuracy = mean fraction of similar items inside the cosine top-10."""
    X = np.asarray(embeddings, dtype=np.float64)
    from .reprnet import nearest_neighbors
    accs = []
    for ref, similar, dissimilar in queries:
        if len(similar) != 10 or len(dissimilar) != 10:
            raise DomainError("each reference needs 10 similar and 10 dissimilar queries")
        pool = list(similar) + list(dissimilar)
        nn = nearest_neighbors(X[ref], X[pool], 10)
        top = {pool[i] for i in nn["indices"]}
        accs.append(len(top & set(similar)) / 10.0)
    return float(np.mean(accs))


def keypoint_probe(features_train, keypoints_train, features_test, keypoints_test,
                   subjects_train=None, subjects_test=None, seed: int = 0,
                   max_iter: int = 800) -> dict:
    """Two-hidden-layer (256, 128) regressor from posture features to 2J
    keypoint coordinates; error = mean Euclidean distance per keypoint."""
    if subjects_train is not None and subjects_test is not None:
        if set(subjects_train) & set(subjects_test):
            raise ContractViolation("train and test subjects must be disjoint")
    Xtr = np.asarray(features_train, dtype=np.float64)
    Xte = np.asarray(features_test, dtype=np.float64)
    ytr = np.asarray(keypoints_train, dtype=np.float64).reshape(len(Xtr), -1)
    yte = np.asarray(keypoints_test, dtype=np.float64).reshape(len(Xte), -1)
    probe = MLPRegressor(hidden_layer_sizes=(256, 128), random_state=seed,
                         max_iter=max_iter, early_stopping=False)
    probe.fit(Xtr, ytr)
    pred = probe.predict(Xte).reshape(len(Xte), -1, 2)
    truth = yte.reshape(len(Xte), -1, 2)
    err = float(np.linalg.norm(pred - truth, axis=2).mean())
    return {"error_px": err, "probe": probe}


def recovery_curve(scorer: LinearScorer, per_day_embeddings: dict,
                   truth_healthy_fraction: dict) -> dict:
    """Fraction of sequences scored healthy (sign > 0) per pseudo-day and
    its Pearson correlation with the ground-truth healthy fraction."""
    days = sorted(d for d in per_day_embeddings if len(per_day_embeddings[d]) > 0)
    skipped = [d for d in per_day_embeddings if d not in days]
    if skipped:
        log.warning("days with no sequences excluded: %s", skipped)
    fractions = {d: float((scorer.score(per_day_embeddings[d]) > 0).mean()) for d in days}
    pred = np.array([fractions[d] for d in days])
    truth = np.array([truth_healthy_fraction[d] for d in days])
    if np.ptp(pred) == 0 or np.ptp(truth) == 0:
        r = 0.0
    else:
        r = float(stats.pearsonr(pred, truth)[0])
    return {"days": days, "predicted_healthy_fraction": fractions, "pearson_r": r}


def abnormality_rate(train_features, eval_sets: dict, nu: float = 0.05,
                     seed: int = 0) -> dict:
    """One-class linear SVM trained on healthy original frames only;
    returns the fraction flagged abnormal per eval set."""
    Xtr = np.asarray(train_features, dtype=np.float64)
    if len(Xtr) == 0:
        raise DomainError("empty training set")
    mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0) + 1e-9
    clf = OneClassSVM(kernel="linear", nu=nu)
    clf.fit((Xtr - mu) / sd)
    rates = {}
    for name, X in eval_sets.items():
        X = np.asarray(X, dtype=np.float64)
        if len(X) == 0:
            raise DomainError(f"empty eval set {name!r}")
        rates[name] = float((clf.predict((X - mu) / sd) == -1).mean())
    return {"nu": nu, "rates": rates,
            "train_rate": float((clf.predict((Xtr - mu) / sd) == -1).mean())}
