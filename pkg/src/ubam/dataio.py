"""Corpus manifests, ROI extraction and sequence sampling.

The manifest is a JSON file describing frame directories on disk plus a
subject-level train/val/test split. ROI extraction supports a fixed
user-provided box or motion tracking via temporal-median background
subtraction (largest moving connected component, exponentially smoothed).
Sequence sampling cuts dense fixed-length windows per video; permuted
twins carry a non-identity permutation drawn uniformly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .errors import DomainError, NoMovingSubjectError

log = logging.getLogger(__name__)

SPECIES_PROFILES = {"human": 27, "rat": 8, "mouse": 20}

MANIFEST_VIDEO_KEYS = {"video_id", "cohort", "subject_id", "pseudo_day",
                       "fps", "n_frames", "roi_mode", "fixed_box"}


@dataclass
class RoiBox:
    frame_index: int
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise DomainError("box must have positive width and height")

    @property
    def center(self):
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)


@dataclass
class SequenceSample:
    video_id: str
    start_frame: int
    length: int
    frame_refs: list  # ordered frame indices within the video
    label: str = "real"  # "real" | "permuted"
    permutation: list | None = None

    def __post_init__(self):
        if self.label == "permuted":
            if self.permutation is None:
                raise DomainError("permuted sample requires a permutation")
            if sorted(self.permutation) != list(range(self.length)):
                raise DomainError("permutation must be a bijection on [0, L)")
            if self.permutation == list(range(self.length)):
                raise DomainError("permutation must not be the identity")
        elif self.permutation is not None:
            raise DomainError("real sample must not carry a permutation")


class CorpusManifest:
    """Loaded manifest with index and path helpers."""

    def __init__(self, data: dict):
        self.root = Path(data["root"])
        self.videos = data["videos"]
        self.splits = data["splits"]
        ids = [v["video_id"] for v in self.videos]
        if len(set(ids)) != len(ids):
            raise DomainError("video_ids must be unique")
        seen = {}
        for split, subjects in self.splits.items():
            for s in subjects:
                if s in seen and seen[s] != split:
                    raise DomainError(f"subject {s} appears in splits {seen[s]} and {split}")
                seen[s] = split
        self._by_id = {v["video_id"]: v for v in self.videos}

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        return cls(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"root": str(self.root), "videos": self.videos, "splits": self.splits}

    def video(self, video_id: str) -> dict:
        if video_id not in self._by_id:
            raise KeyError(video_id)
        return self._by_id[video_id]

    def split_of(self, subject_id: str) -> str:
        for split, subjects in self.splits.items():
            if subject_id in subjects:
                return split
        raise KeyError(subject_id)

    def videos_in_split(self, split: str) -> list:
        subjects = set(self.splits[split])
        return [v for v in self.videos if v["subject_id"] in subjects]

    def frame_dir(self, video_id: str) -> Path:
        v = self.video(video_id)
        return self.root / v["cohort"] / v["subject_id"] / video_id

    def frame_path(self, video_id: str, index: int) -> Path:
        return self.frame_dir(video_id) / f"frame_{index:06d}.png"

    def load_frame(self, video_id: str, index: int) -> np.ndarray:
        p = self.frame_path(video_id, index)
        img = cv2.imread(str(p), cv2.IMREAD_COLOR)
        if img is None:
            raise FileNotFoundError(p)
        return img[:, :, ::-1].astype(np.float64) / 255.0

    def load_video(self, video_id: str) -> np.ndarray:
        v = self.video(video_id)
        return np.stack([self.load_frame(video_id, i) for i in range(v["n_frames"])])


def track_moving_roi(frames, min_side: int = 8, energy_threshold: float = 1e-3,
                     max_center_jump: float = 8.0, smooth_alpha: float = 0.5):
    """One RoiBox per frame covering the largest moving component.

    Temporal-median background subtraction stands in for robust PCA; box
    centers are exponentially smoothed and clamped to max_center_jump.
    """
    frames = np.asarray(frames)
    if len(frames) < 8:
        raise DomainError("need at least 8 frames to track")
    H, W = frames.shape[1:3]
    gray = frames.mean(axis=3) if frames.ndim == 4 else frames
    background = np.median(gray, axis=0)
    fg = np.abs(gray - background)
    if float(fg.mean()) < energy_threshold:
        raise NoMovingSubjectError("foreground energy below threshold")

    boxes = []
    prev_center = None
    prev_size = None
    for i in range(len(frames)):
        mask = fg[i] > max(2 * fg[i].mean(), 0.02)
        labels, n = ndimage.label(mask)
        if n == 0:
            cx, cy = prev_center if prev_center else (W / 2, H / 2)
            w, h = prev_size if prev_size else (W // 2, H // 2)
        else:
            sizes = ndimage.sum(mask, labels, range(1, n + 1))
            comp = labels == (int(np.argmax(sizes)) + 1)
            ys, xs = np.nonzero(comp)
            x0, x1 = xs.min(), xs.max() + 1
            y0, y1 = ys.min(), ys.max() + 1
            cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
            w, h = max(min_side, x1 - x0), max(min_side, y1 - y0)
        if prev_center is not None:
            cx = smooth_alpha * cx + (1 - smooth_alpha) * prev_center[0]
            cy = smooth_alpha * cy + (1 - smooth_alpha) * prev_center[1]
            dx, dy = cx - prev_center[0], cy - prev_center[1]
            jump = (dx * dx + dy * dy) ** 0.5
            if jump > max_center_jump:
                scale = max_center_jump / jump
                cx = prev_center[0] + dx * scale
                cy = prev_center[1] + dy * scale
            w = int(round(smooth_alpha * w + (1 - smooth_alpha) * prev_size[0]))
            h = int(round(smooth_alpha * h + (1 - smooth_alpha) * prev_size[1]))
        prev_center, prev_size = (cx, cy), (w, h)
        x = int(round(min(max(cx - w / 2.0, 0), W - w)))
        y = int(round(min(max(cy - h / 2.0, 0), H - h)))
        boxes.append(RoiBox(i, x, y, int(w), int(h)))
    return boxes


def roi_boxes_for_video(manifest: CorpusManifest, video_id: str):
    """Fixed-box manifests bypass tracking; tracked mode runs the tracker."""
    v = manifest.video(video_id)
    if v["roi_mode"] == "fixed":
        x, y, w, h = v["fixed_box"]
        return [RoiBox(i, x, y, w, h) for i in range(v["n_frames"])]
    return track_moving_roi(manifest.load_video(video_id))


def crop_and_resize(frame: np.ndarray, box: RoiBox, out_size: tuple[int, int] = (64, 64)) -> np.ndarray:
    """Crop the box, pad to square (edge replication), resize to out_size."""
    H, W = frame.shape[:2]
    x0, y0 = max(0, box.x), max(0, box.y)
    x1, y1 = min(W, box.x + box.w), min(H, box.y + box.h)
    if x1 <= x0 or y1 <= y0:
        raise DomainError("degenerate box")
    crop = frame[y0:y1, x0:x1]
    h, w = crop.shape[:2]
    if h != w:
        d = abs(h - w)
        pad = (d // 2, d - d // 2)
        if h < w:
            crop = np.pad(crop, (pad, (0, 0), (0, 0)), mode="edge")
        else:
            crop = np.pad(crop, ((0, 0), pad, (0, 0)), mode="edge")
    oh, ow = out_size
    interp = cv2.INTER_AREA if crop.shape[0] >= oh else cv2.INTER_LINEAR
    return cv2.resize(crop.astype(np.float32), (ow, oh), interpolation=interp).astype(np.float64)


def sequence_length_for(species_or_length) -> int:
    if isinstance(species_or_length, str):
        if species_or_length not in SPECIES_PROFILES:
            raise DomainError(f"unknown species profile {species_or_length!r}")
        return SPECIES_PROFILES[species_or_length]
    L = int(species_or_length)
    if L < 3:
        raise DomainError("sequence length must be >= 3")
    return L


def sample_sequences(manifest: CorpusManifest, species_profile="human",
                     stride: int = 1, split: str | None = None):
    """Dense real-labelled windows of the species' length, never crossing
    video boundaries. Videos shorter than L contribute nothing (warning)."""
    L = sequence_length_for(species_profile)
    if stride < 1:
        raise DomainError("stride must be >= 1")
    videos = manifest.videos_in_split(split) if split else manifest.videos
    samples = []
    for v in videos:
        n = v["n_frames"]
        if n < L:
            log.warning("video %s has %d < %d frames; skipped", v["video_id"], n, L)
            continue
        for start in range(0, n - L + 1, stride):
            samples.append(SequenceSample(v["video_id"], start, L,
                                          list(range(start, start + L))))
    return samples


def make_permuted(seq: SequenceSample, rng: np.random.Generator) -> SequenceSample:
    """Permuted twin with rho drawn uniformly over non-identity permutations."""
    if seq.label != "real":
        raise DomainError("can only permute a real sequence")
    if seq.length < 3:
        raise DomainError("need at least 3 frames for a meaningful shuffle")
    identity = np.arange(seq.length)
    while True:
        rho = rng.permutation(seq.length)
        if not np.array_equal(rho, identity):
            break
    refs = [seq.frame_refs[j] for j in rho]
    return SequenceSample(seq.video_id, seq.start_frame, seq.length, refs,
                          label="permuted", permutation=[int(j) for j in rho])
