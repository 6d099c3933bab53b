"""Behavior magnification: latent extrapolation against a reference
cohort, magnified synthesis, per-pixel deviation maps and the deviation
score statistics used to compare cohorts."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import stats
from sklearn.naive_bayes import GaussianNB

from . import genmodel, reprnet
from .errors import ContractViolation, DomainError

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 2.5
DEFAULT_K = 10
LAMBDA_WARN = 4.0
DEFAULT_WINDOW = 200


@dataclass
class ReferenceSet:
    """Gallery of reference posture latents (mu vectors) with frame refs."""
    cohort: str
    frame_refs: list         # [{"video_id", "frame_index", "subject_id"}, ...]
    latents: np.ndarray      # (N, 50)

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=np.float64)
        if len(self.latents) == 0:
            raise DomainError("reference set must be non-empty")
        if self.latents.ndim != 2 or self.latents.shape[1] != genmodel.LATENT_DIM:
            raise DomainError(f"reference latents must be (N, {genmodel.LATENT_DIM})")
        if len(self.frame_refs) != len(self.latents):
            raise DomainError("frame_refs and latents must align")

    @property
    def subjects(self):
        return {r["subject_id"] for r in self.frame_refs}


def build_reference_set(vae, manifest, store, cohort: str, max_frames_per_video=None):
    """Encode every frame of the cohort's videos into posture mu vectors."""
    import torch
    refs, rows = [], []
    vae.eval()
    for v in manifest.videos:
        if v["cohort"] != cohort:
            continue
        n = v["n_frames"] if max_frames_per_video is None else min(v["n_frames"], max_frames_per_video)
        x = store.frames(v["video_id"], range(n))
        with torch.no_grad():
            mu, _ = vae.posture_params(x)
        rows.append(mu.numpy())
        refs.extend({"video_id": v["video_id"], "frame_index": i,
                     "subject_id": v["subject_id"]} for i in range(n))
    if not rows:
        raise DomainError(f"no videos in cohort {cohort!r}")
    return ReferenceSet(cohort, refs, np.concatenate(rows))


def reference_posture(query_z: np.ndarray, refs: ReferenceSet, k: int = DEFAULT_K) -> np.ndarray:
    """Mean of the K cosine-nearest reference mu vectors to the query."""
    if k < 1 or k > len(refs.latents):
        raise DomainError(f"K must be in [1, {len(refs.latents)}]")
    nn = reprnet.nearest_neighbors(query_z, refs.latents, k)
    return refs.latents[nn["indices"]].mean(axis=0)


def extrapolate(z_pi: np.ndarray, z_nn: np.ndarray, lam: float) -> np.ndarray:
    """z' = z_nn + lam * (z_pi - z_nn); lam=1 and lam=0 are exact."""
    z_pi = np.asarray(z_pi, dtype=np.float64)
    z_nn = np.asarray(z_nn, dtype=np.float64)
    if z_pi.shape != z_nn.shape:
        raise DomainError("latent dims must match")
    if lam > LAMBDA_WARN:
        warnings.warn(f"lambda={lam} > {LAMBDA_WARN}: synthesis may become unrealistic")
    if lam == 1.0:
        return z_pi.copy()
    if lam == 0.0:
        return z_nn.copy()
    return z_nn + lam * (z_pi - z_nn)


@dataclass
class MagnificationRequest:
    video_id: str
    frame_indices: list
    refs: ReferenceSet
    lam: float = DEFAULT_LAMBDA
    k: int = DEFAULT_K
    threshold: float | str = "adaptive"  # value, "adaptive", or "none"
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.lam < 0:
            raise DomainError("lambda must be >= 0")
        if self.k > len(self.refs.latents):
            raise DomainError("K exceeds reference size")


@dataclass
class MagnificationResult:
    video_id: str
    lam: float
    magnified: list          # per-frame (H, W, 3) in [0, 1]
    reference_resynth: list  # x'_NN per frame
    reconstruction: list     # lam=1 reconstruction per frame
    magnitude_maps: list     # (H, W) >= 0, thresholded
    direction_maps: list     # (H, W, 2) displacement in px
    threshold: float
    score: "DeviationScore"


@dataclass
class DeviationScore:
    raw: float
    normalized: float | None
    window: int
    degenerate: bool = False


def synthesize_magnified(vae, request: MagnificationRequest, store,
                         query_subject_id: str) -> MagnificationResult:
    """Per frame: magnified synthesis, reference re-synthesis (both with
    the query's appearance) and the lam=1 reconstruction."""
    import torch
    if query_subject_id in request.refs.subjects:
        raise ContractViolation(
            f"reference cohort contains the query subject {query_subject_id}")
    x = store.frames(request.video_id, request.frame_indices)
    vae.eval()
    with torch.no_grad():
        mu_pi, _ = vae.posture_params(x)
        mu_a, _ = vae.appearance_params(x)
    mu_pi = mu_pi.numpy().astype(np.float64)
    mu_a = mu_a.numpy().astype(np.float64)

    z_nn = np.stack([reference_posture(z, request.refs, request.k) for z in mu_pi])
    z_mag = np.stack([extrapolate(z, zn, request.lam) for z, zn in zip(mu_pi, z_nn)])

    magnified = genmodel.decode(vae, z_mag, mu_a)
    ref_resynth = genmodel.decode(vae, z_nn, mu_a)
    recon = genmodel.decode(vae, mu_pi, mu_a)
    if magnified.ndim == 3:
        magnified, ref_resynth, recon = (a[None] for a in (magnified, ref_resynth, recon))

    raw_maps = [pixel_deviation(recon[i], magnified[i]) for i in range(len(magnified))]
    thr = resolve_threshold(request.threshold, raw_maps)
    mag_maps = [apply_threshold(m, thr) for m in raw_maps]
    dir_maps = [deviation_direction(recon[i], magnified[i], mag_maps[i])
                for i in range(len(magnified))]
    score = sequence_deviation_score(mag_maps, window=request.window)
    return MagnificationResult(
        video_id=request.video_id, lam=request.lam,
        magnified=list(magnified), reference_resynth=list(ref_resynth),
        reconstruction=list(recon), magnitude_maps=mag_maps,
        direction_maps=dir_maps, threshold=thr, score=score)


# ---------------------------------------------------------------------------
# deviation maps


def pixel_deviation(original: np.ndarray, magnified: np.ndarray) -> np.ndarray:
    """Per-pixel Euclidean distance over channels (unthresholded)."""
    if original.shape != magnified.shape:
        raise DomainError("shapes must match")
    return np.sqrt(np.sum((original - magnified) ** 2, axis=-1))


def resolve_threshold(policy, raw_maps) -> float:
    """'adaptive' = mean + 1 std over the given maps; 'none' = 0."""
    if policy == "none":
        return 0.0
    if policy == "adaptive":
        allv = np.concatenate([m.ravel() for m in raw_maps])
        return float(allv.mean() + allv.std())
    return float(policy)


def apply_threshold(raw_map: np.ndarray, threshold: float) -> np.ndarray:
    out = raw_map.copy()
    out[out < threshold] = 0.0
    return out


def deviation_map(original, magnified, threshold_policy="none") -> np.ndarray:
    raw = pixel_deviation(original, magnified)
    return apply_threshold(raw, resolve_threshold(threshold_policy, [raw]))


def deviation_direction(original: np.ndarray, magnified: np.ndarray,
                        magnitude_map: np.ndarray | None = None,
                        patch: int = 8, radius: int = 4) -> np.ndarray:
    """Per-pixel 2-D displacement via block matching from original to
    magnified; zeroed wherever the magnitude map is zero."""
    if original.shape != magnified.shape:
        raise DomainError("shapes must match")
    a = original.mean(axis=-1).astype(np.float32)
    b = magnified.mean(axis=-1).astype(np.float32)
    H, W = a.shape
    best_ssd = np.full((H, W), np.inf, dtype=np.float32)
    best = np.zeros((H, W, 2), dtype=np.float64)
    ksize = (patch, patch)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = np.roll(np.roll(b, -dy, axis=0), -dx, axis=1)
            ssd = cv2.boxFilter((a - shifted) ** 2, -1, ksize, normalize=True)
            better = ssd < best_ssd - 1e-12
            best_ssd[better] = ssd[better]
            best[better] = (dx, dy)
    if magnitude_map is not None:
        best[magnitude_map == 0] = 0.0
    elif np.array_equal(original, magnified):
        best[:] = 0.0
    return best


def sequence_deviation_score(magnitude_maps, window: int = DEFAULT_WINDOW) -> DeviationScore:
    """Mean thresholded deviation over the first `window` frames."""
    if len(magnitude_maps) == 0:
        raise DomainError("need at least one frame")
    use = magnitude_maps[:window]
    raw = float(np.mean([m.mean() for m in use]))
    return DeviationScore(raw=raw, normalized=None, window=min(window, len(use)))


def normalize_scores(scores) -> list:
    """Min-max normalize a batch of DeviationScores onto [0, 1] in place.

    A degenerate batch (min == max, e.g. a single video) gets 0 by
    convention and is flagged."""
    raws = np.array([s.raw for s in scores], dtype=np.float64)
    lo, hi = raws.min(), raws.max()
    degenerate = hi - lo == 0
    for s, r in zip(scores, raws):
        s.normalized = 0.0 if degenerate else float((r - lo) / (hi - lo))
        s.degenerate = bool(degenerate)
    return scores


def cohort_deviation_test(healthy_scores, impaired_scores, test_fraction: float = 0.3,
                          seed: int = 0, grid_points: int = 512) -> dict:
    """Welch t-test, per-cohort Gaussian KDEs and a Gaussian Naive Bayes
    held-out accuracy on scalar deviation scores."""
    h = np.asarray(healthy_scores, dtype=np.float64)
    i = np.asarray(impaired_scores, dtype=np.float64)
    if len(h) < 2 or len(i) < 2:
        raise DomainError("need at least 2 scores per cohort")
    t, p = stats.ttest_ind(h, i, equal_var=False)
    if np.array_equal(h, i):
        t, p = 0.0, 1.0

    lo = min(h.min(), i.min())
    hi = max(h.max(), i.max())
    span = max(hi - lo, 1e-9)
    grid = np.linspace(lo - 0.5 * span, hi + 0.5 * span, grid_points)
    kdes = {}
    for name, v in (("healthy", h), ("impaired", i)):
        if np.ptp(v) == 0:
            v = v + np.random.default_rng(seed).normal(0, 1e-9, len(v))
        kdes[name] = stats.gaussian_kde(v)(grid).tolist()

    X = np.concatenate([h, i])[:, None]
    y = np.concatenate([np.zeros(len(h)), np.ones(len(i))])
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    n_test = max(2, int(round(test_fraction * len(y))))
    test_idx, train_idx = order[:n_test], order[n_test:]
    if len(set(y[train_idx])) < 2:  # tiny cohorts: fall back to train=test
        train_idx = test_idx = np.arange(len(y))
    nb = GaussianNB().fit(X[train_idx], y[train_idx])
    nb_acc = float(nb.score(X[test_idx], y[test_idx]))
    return {"t_statistic": float(t), "p_value": float(p),
            "kde_grid": grid.tolist(), "kde": kdes, "nb_accuracy": nb_acc}


# ---------------------------------------------------------------------------
# artifact output


def write_result(result: MagnificationResult, out_dir):
    """Write PNG frames, 16-bit deviation maps, raw float32 direction
    fields and score.json."""
    from PIL import Image
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mag_scale = max(max(m.max() for m in result.magnitude_maps), 1e-9)
    for i in range(len(result.magnified)):
        Image.fromarray((np.clip(result.magnified[i], 0, 1) * 255).astype(np.uint8)).save(
            out / f"x_prime_{i:06d}.png")
        Image.fromarray((np.clip(result.reference_resynth[i], 0, 1) * 255).astype(np.uint8)).save(
            out / f"ref_{i:06d}.png")
        m16 = (result.magnitude_maps[i] / mag_scale * 65535).astype(np.uint16)
        Image.fromarray(m16, mode="I;16").save(out / f"dev_mag_{i:06d}.png")
        d = result.direction_maps[i].astype("<f4")
        with open(out / f"dev_dir_{i:06d}.flo", "wb") as fh:
            H, W = d.shape[:2]
            fh.write(np.array([H, W, 2], dtype="<i4").tobytes())
            fh.write(d.tobytes())
    (out / "score.json").write_text(json.dumps({
        "video_id": result.video_id, "lambda": result.lam,
        "threshold": result.threshold, "magnitude_scale": mag_scale,
        "raw_score": result.score.raw, "normalized_score": result.score.normalized,
        "window": result.score.window}, sort_keys=True))
    return out
