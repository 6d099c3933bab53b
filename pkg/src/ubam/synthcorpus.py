"""Synthetic articulated-walker video corpus with exact ground truth.

A 2-D side-view figure (torso + head + two 2-segment legs, 6 joint angles,
14 keypoints) walks in place on a static textured background. Gait phase,
step amplitude and knee extension are fully controlled, so every frame
carries exact joint angles and pixel keypoints. An `impairment` knob in
[0, 1] shortens the left step and caps left-knee extension, giving cohorts
with a known, graded behavioral deviation.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import DomainError

# geometry is expressed in pixels on a 64-px reference canvas and scaled
# by H/64 at render time
REF_CANVAS = 64.0
N_JOINTS = 6
N_KEYPOINTS = 14

KEYPOINT_NAMES = [
    "head_top", "nose", "neck", "mid_torso", "hip_center",
    "l_hip", "l_knee", "l_ankle", "l_toe",
    "r_hip", "r_knee", "r_ankle", "r_toe",
    "head_center",
]

JOINT_NAMES = ["torso_lean", "l_hip_swing", "l_knee_flex",
               "r_hip_swing", "r_knee_flex", "head_nod"]


@dataclass
class SubjectAppearance:
    subject_id: str
    limb_colors: list  # list of (r, g, b) in [0, 1]: torso, head, l_thigh, l_shank, r_thigh, r_shank, feet
    torso_shape_params: list  # [torso_len, head_radius, thigh_len, shank_len, foot_len, limb_width] px @ 64
    texture_seed: int

    def __post_init__(self):
        if not self.limb_colors:
            raise DomainError("limb_colors must be non-empty")
        if any(p <= 0 for p in self.torso_shape_params):
            raise DomainError("all torso_shape_params must be strictly positive")


@dataclass
class GaitParams:
    cycle_len_frames: int
    amplitude: float  # hip swing amplitude, radians
    phase: float
    impairment: float  # in [0, 1]
    noise_std: float = 0.0

    def __post_init__(self):
        if self.cycle_len_frames < 4:
            raise DomainError("cycle_len_frames must be >= 4")
        if self.noise_std < 0:
            raise DomainError("noise_std must be >= 0")
        self.impairment = min(1.0, max(0.0, float(self.impairment)))


@dataclass
class SynthFrameTruth:
    frame_index: int
    joint_angles: np.ndarray  # (6,) radians
    keypoints: np.ndarray  # (14, 2) pixel coords (x, y), origin top-left
    phase_in_cycle: float

    def to_json(self):
        return {
            "frame_index": self.frame_index,
            "joint_angles": [float(a) for a in self.joint_angles],
            "keypoints": [[float(x), float(y)] for x, y in self.keypoints],
            "phase_in_cycle": float(self.phase_in_cycle),
        }


def generate_subject(seed: int, impairment: float) -> tuple[SubjectAppearance, GaitParams]:
    """Deterministically draw appearance + gait parameters for one subject."""
    if seed < 0:
        raise DomainError("seed must be >= 0")
    if not 0.0 <= impairment <= 1.0:
        raise DomainError(f"impairment must be in [0, 1], got {impairment}")
    rng = np.random.default_rng(seed)

    # distinct saturated colors per limb group, keyed off a random base hue
    base_hue = rng.uniform(0.0, 1.0)
    offsets = [0.0, 0.45, 0.13, 0.2, 0.68, 0.75, 0.33]
    colors = []
    for k, off in enumerate(offsets):
        h = (base_hue + off + rng.uniform(-0.03, 0.03)) % 1.0
        s = rng.uniform(0.65, 1.0)
        v = rng.uniform(0.65, 1.0)
        colors.append(_hsv_to_rgb(h, s, v))

    shape = [
        rng.uniform(16.0, 20.0),   # torso_len
        rng.uniform(3.2, 4.2),     # head_radius
        rng.uniform(9.0, 11.0),    # thigh_len
        rng.uniform(9.0, 11.0),    # shank_len
        rng.uniform(3.0, 4.5),     # foot_len
        rng.uniform(2.2, 3.4),     # limb_width
    ]
    app = SubjectAppearance(
        subject_id=f"s{seed:05d}",
        limb_colors=colors,
        torso_shape_params=shape,
        texture_seed=int(rng.integers(0, 2**31 - 1)),
    )
    gait = GaitParams(
        cycle_len_frames=int(rng.integers(18, 25)),
        amplitude=rng.uniform(0.5, 0.65),
        phase=rng.uniform(0.0, 2 * math.pi),
        impairment=impairment,
        noise_std=0.0,
    )
    return app, gait


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def gait_joint_angles(gait: GaitParams, phase: float) -> np.ndarray:
    """Joint angles at gait phase in [0, 1). Impairment shortens the left
    swing and caps left-knee extension (a minimum residual flexion)."""
    imp = gait.impairment
    w = 2 * math.pi * phase + gait.phase
    amp_l = gait.amplitude * (1.0 - 0.6 * imp)
    amp_r = gait.amplitude

    torso_lean = 0.06 * gait.amplitude * math.sin(2 * w)
    hip_l = amp_l * math.sin(w)
    hip_r = amp_r * math.sin(w + math.pi)

    k_amp = 0.9 * gait.amplitude
    knee_l = k_amp * 0.5 * (1.0 + math.sin(w + 0.5 * math.pi))
    knee_r = k_amp * 0.5 * (1.0 + math.sin(w + 1.5 * math.pi))
    # reduced joint extension: the impaired left knee cannot straighten
    knee_l = max(knee_l, 0.55 * imp * k_amp)
    head_nod = 0.08 * math.sin(2 * w)
    return np.array([torso_lean, hip_l, knee_l, hip_r, knee_r, head_nod])


def forward_kinematics(app: SubjectAppearance, joint_angles: np.ndarray,
                       size: tuple[int, int]) -> np.ndarray:
    """Map 6 joint angles to the 14 keypoints for image size (H, W)."""
    H, W = size
    s = H / REF_CANVAS
    torso_len, head_r, thigh_len, shank_len, foot_len, _ = [p * s for p in app.torso_shape_params]
    lean, hip_l, knee_l, hip_r, knee_r, nod = [float(a) for a in joint_angles]

    root = np.array([W / 2.0, 0.52 * H])
    up = np.array([math.sin(lean), -math.cos(lean)])
    neck = root + torso_len * up
    mid_torso = root + 0.5 * torso_len * up
    head_dir = np.array([math.sin(lean + nod), -math.cos(lean + nod)])
    head_center = neck + (head_r * 1.15) * head_dir
    head_top = head_center + head_r * head_dir
    nose = head_center + head_r * np.array([math.cos(lean + nod) * 0.9, math.sin(lean + nod) * 0.9])

    def leg(hip_off, hip_ang, knee_flex):
        hip = root + np.array([hip_off * s, 0.0])
        thigh_dir = np.array([math.sin(hip_ang), math.cos(hip_ang)])
        knee = hip + thigh_len * thigh_dir
        shank_ang = hip_ang - knee_flex
        shank_dir = np.array([math.sin(shank_ang), math.cos(shank_ang)])
        ankle = knee + shank_len * shank_dir
        foot_ang = shank_ang + 0.5 * math.pi - 0.25
        toe = ankle + foot_len * np.array([math.sin(foot_ang), math.cos(foot_ang)])
        return hip, knee, ankle, toe

    lh, lk, la, lt = leg(-1.2, hip_l, knee_l)
    rh, rk, ra, rt = leg(+1.2, hip_r, knee_r)

    kps = np.stack([head_top, nose, neck, mid_torso, root,
                    lh, lk, la, lt, rh, rk, ra, rt, head_center])
    return kps


def _background(texture_seed: int, size: tuple[int, int]) -> np.ndarray:
    """Static low-frequency textured background in [0, 1]."""
    H, W = size
    rng = np.random.default_rng(texture_seed)
    low = rng.uniform(0.25, 0.5, size=(6, 6, 3))
    img = np.array(Image.fromarray((low * 255).astype(np.uint8)).resize((W, H), Image.BILINEAR))
    return img.astype(np.float64) / 255.0


def render_frame(app: SubjectAppearance, keypoints: np.ndarray,
                 size: tuple[int, int], background: np.ndarray | None = None,
                 ss: int = 3) -> np.ndarray:
    """Render one anti-aliased frame, float array (H, W, 3) in [0, 1]."""
    H, W = size
    if H < 16 or W < 16:
        raise DomainError("frame size must be at least 16x16")
    if background is None:
        background = _background(app.texture_seed, size)
    bg8 = (np.clip(background, 0, 1) * 255).astype(np.uint8)
    img = Image.fromarray(bg8).resize((W * ss, H * ss), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    sscale = H * ss / REF_CANVAS
    lw = max(1, int(round(app.torso_shape_params[5] * sscale)))

    def col(i):
        r, g, b = app.limb_colors[i % len(app.limb_colors)]
        return (int(r * 255), int(g * 255), int(b * 255))

    def seg(a, b, color, width):
        ax, ay, bx, by = a[0] * ss, a[1] * ss, b[0] * ss, b[1] * ss
        draw.line([ax, ay, bx, by], fill=color, width=width)
        for x, y in ((ax, ay), (bx, by)):
            r = width / 2
            draw.ellipse([x - r, y - r, x + r, y + r], fill=color)

    k = {name: keypoints[i] for i, name in enumerate(KEYPOINT_NAMES)}
    # draw order: far (right) leg, torso, near (left) leg, head
    seg(k["r_hip"], k["r_knee"], col(4), lw)
    seg(k["r_knee"], k["r_ankle"], col(5), lw)
    seg(k["r_ankle"], k["r_toe"], col(6), max(1, lw - 1))
    seg(k["hip_center"], k["neck"], col(0), int(lw * 1.8))
    seg(k["l_hip"], k["l_knee"], col(2), lw)
    seg(k["l_knee"], k["l_ankle"], col(3), lw)
    seg(k["l_ankle"], k["l_toe"], col(6), max(1, lw - 1))
    hr = app.torso_shape_params[1] * sscale
    hc = k["head_center"] * ss
    draw.ellipse([hc[0] - hr, hc[1] - hr, hc[0] + hr, hc[1] + hr], fill=col(1))

    out = img.resize((W, H), Image.LANCZOS)
    return np.asarray(out).astype(np.float64) / 255.0


def render_video(app: SubjectAppearance, gait: GaitParams, n_frames: int,
                 size: tuple[int, int] = (64, 64), noise_seed: int = 0):
    """Render a video; returns (frames, truths).

    Frames are float (H, W, 3) arrays in [0, 1]; one SynthFrameTruth per
    frame. Deterministic in all arguments.
    """
    H, W = size
    if H < 16 or W < 16:
        raise DomainError("frame size must be at least 16x16")
    if n_frames < gait.cycle_len_frames:
        raise DomainError("n_frames must be >= cycle_len_frames")
    bg = _background(app.texture_seed, size)
    rng = np.random.default_rng(noise_seed)
    frames, truths = [], []
    for i in range(n_frames):
        phase = (i / gait.cycle_len_frames) % 1.0
        angles = gait_joint_angles(gait, phase)
        if gait.noise_std > 0:
            angles = angles + rng.normal(0.0, gait.noise_std, size=N_JOINTS)
        kps = forward_kinematics(app, angles, size)
        frames.append(render_frame(app, kps, size, background=bg))
        truths.append(SynthFrameTruth(i, angles, kps, phase))
    return frames, truths


def left_step_length(app: SubjectAppearance, gait: GaitParams,
                     size: tuple[int, int] = (64, 64)) -> float:
    """Ground-truth left step length: horizontal extent of the left toe
    over one noiseless cycle, in pixels."""
    xs = []
    for i in range(gait.cycle_len_frames):
        angles = gait_joint_angles(gait, i / gait.cycle_len_frames)
        kps = forward_kinematics(app, angles, size)
        xs.append(kps[KEYPOINT_NAMES.index("l_toe"), 0])
    return float(max(xs) - min(xs))


# ---------------------------------------------------------------------------
# corpus generation


@dataclass
class CohortConfig:
    name: str
    n_subjects: int
    impairment: float = 0.0
    # if ramp is set, each subject gets one video per pseudo-day with
    # impairment linearly interpolated between ramp[0] and ramp[1]
    ramp: tuple[float, float] | None = None
    pseudo_days: int = 1
    n_frames: int = 120
    fps: float = 30.0
    noise_std: float = 0.02
    split: str | None = None  # force every subject of the cohort into one split


@dataclass
class CorpusConfig:
    root: str
    cohorts: list
    size: tuple[int, int] = (64, 64)
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)  # train/val/test

    @staticmethod
    def from_dict(d: dict) -> "CorpusConfig":
        cohorts = [CohortConfig(**{**c, "ramp": tuple(c["ramp"]) if c.get("ramp") else None})
                   for c in d["cohorts"]]
        return CorpusConfig(
            root=d["root"], cohorts=cohorts,
            size=tuple(d.get("size", (64, 64))),
            seed=int(d.get("seed", 0)),
            split_fractions=tuple(d.get("split_fractions", (0.6, 0.2, 0.2))),
        )


def _impairment_for_day(cohort: CohortConfig, day: int) -> float:
    if cohort.ramp is None:
        return cohort.impairment
    if cohort.pseudo_days == 1:
        return cohort.ramp[0]
    a, b = cohort.ramp
    return a + (b - a) * day / (cohort.pseudo_days - 1)


def generate_corpus(config: CorpusConfig) -> dict:
    """Write frames + truth to disk and return the manifest dict.

    Layout: <root>/<cohort>/<subject>/<video_id>/frame_%06d.png with a
    truth.json per video and manifest.json at the root. Deterministic in
    the config (frame bytes are hashed into each truth.json).
    """
    root = Path(config.root)
    root.mkdir(parents=True, exist_ok=True)
    videos = []
    splits = {"train": [], "val": [], "test": []}
    subject_seed = config.seed * 100003 + 17

    for ci, cohort in enumerate(config.cohorts):
        for si in range(cohort.n_subjects):
            seed = subject_seed + ci * 1009 + si
            split = cohort.split or _assign_split(si, cohort.n_subjects, config.split_fractions)
            app, gait0 = generate_subject(seed, _impairment_for_day(cohort, 0))
            if app.subject_id in splits[split]:
                pass
            else:
                splits[split].append(app.subject_id)
            for day in range(cohort.pseudo_days):
                imp = _impairment_for_day(cohort, day)
                gait = GaitParams(gait0.cycle_len_frames, gait0.amplitude, gait0.phase,
                                  imp, cohort.noise_std)
                video_id = f"{cohort.name}_{app.subject_id}_d{day:02d}"
                vdir = root / cohort.name / app.subject_id / video_id
                vdir.mkdir(parents=True, exist_ok=True)
                frames, truths = render_video(app, gait, cohort.n_frames,
                                              config.size, noise_seed=seed * 31 + day)
                sha = hashlib.sha256()
                for i, fr in enumerate(frames):
                    img = Image.fromarray((np.clip(fr, 0, 1) * 255).astype(np.uint8))
                    p = vdir / f"frame_{i:06d}.png"
                    img.save(p, format="PNG")
                    sha.update(p.read_bytes())
                truth = {
                    "video_id": video_id,
                    "subject": asdict(app),
                    "gait": asdict(gait),
                    "impairment": imp,
                    "frames_sha256": sha.hexdigest(),
                    "frames": [t.to_json() for t in truths],
                }
                (vdir / "truth.json").write_text(json.dumps(truth, sort_keys=True))
                H, W = config.size
                videos.append({
                    "video_id": video_id,
                    "cohort": cohort.name,
                    "subject_id": app.subject_id,
                    "pseudo_day": day,
                    "fps": cohort.fps,
                    "n_frames": cohort.n_frames,
                    "roi_mode": "fixed",
                    "fixed_box": [0, 0, W, H],
                })
    manifest = {"root": str(root), "videos": videos, "splits": splits}
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))
    return manifest


def _assign_split(i: int, n: int, fractions) -> str:
    n_train = max(1, int(round(fractions[0] * n)))
    n_val = max(1, int(round(fractions[1] * n))) if n > 2 else 0
    if i < n_train:
        return "train"
    if i < n_train + n_val:
        return "val"
    return "test"


def load_truth(root, video: dict) -> dict:
    p = Path(root) / video["cohort"] / video["subject_id"] / video["video_id"] / "truth.json"
    return json.loads(p.read_text())
