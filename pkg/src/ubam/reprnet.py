"""Self-supervised posture/behavior representation network.

A 5-stage conv trunk (AlexNet-like structure, configurable widths) feeds
two fully connected stages; fc6 (post-ReLU) is the per-frame posture
embedding. An LSTM over fc7 outputs summarizes a sequence; its final
hidden state is the behavior embedding, and a linear classifier on that
state predicts whether the input sequence is in original or shuffled
order. Training on that binary task is the only supervision.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import dataio
from .errors import DomainError, NumericalFailure, MissingArtifactError

log = logging.getLogger(__name__)


@dataclass
class ReprConfig:
    input_size: int = 64
    conv_channels: tuple = (8, 24, 48, 48, 32)  # 5 stages, ~1/8 AlexNet widths
    batch_norm: bool = True      # desk-scale aid; disable for the plain paper trunk
    posture_dim: int = 256       # fc6 width = posture embedding dim
    fc7_dim: int = 128
    hidden_dim: int = 128        # LSTM width = behavior embedding dim (1024 at paper scale)
    seq_len: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 5e-4
    batch_size: int = 48         # half real, half permuted
    epochs: int = 20
    patience: int = 5
    early_stop_acc: float = 0.97
    max_sequences_per_epoch: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.batch_size % 2 != 0:
            raise DomainError("batch_size must be even (half real, half permuted)")
        if min(self.posture_dim, self.fc7_dim, self.hidden_dim, self.input_size) <= 0:
            raise DomainError("all dims must be positive")


class FrameTrunk(nn.Module):
    """Five conv stages with interleaved max-pooling, then fc6/fc7."""

    def __init__(self, cfg: ReprConfig):
        super().__init__()
        c = cfg.conv_channels
        norm = (lambda ch: nn.BatchNorm2d(ch)) if cfg.batch_norm else (lambda ch: nn.Identity())
        self.features = nn.Sequential(
            nn.Conv2d(3, c[0], kernel_size=5, stride=2, padding=2), norm(c[0]), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c[0], c[1], kernel_size=3, padding=1), norm(c[1]), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c[1], c[2], kernel_size=3, padding=1), norm(c[2]), nn.ReLU(),
            nn.Conv2d(c[2], c[3], kernel_size=3, padding=1), norm(c[3]), nn.ReLU(),
            nn.Conv2d(c[3], c[4], kernel_size=3, padding=1), norm(c[4]), nn.ReLU(),
            nn.MaxPool2d(2),
        )
        side = cfg.input_size // 16
        if side < 1:
            raise DomainError("input_size too small for the conv trunk")
        self.flat_dim = c[4] * side * side
        self.fc6 = nn.Linear(self.flat_dim, cfg.posture_dim)
        self.fc7 = nn.Linear(cfg.posture_dim, cfg.fc7_dim)

    def forward(self, x):
        """Returns (posture, fc7_out); posture is post-ReLU fc6."""
        h = self.features(x).flatten(1)
        posture = F.relu(self.fc6(h))
        out = F.relu(self.fc7(posture))
        return posture, out


class SurrogateModel(nn.Module):
    def __init__(self, cfg: ReprConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = FrameTrunk(cfg)
        self.lstm = nn.LSTM(cfg.fc7_dim, cfg.hidden_dim, batch_first=True)
        self.classifier = nn.Linear(cfg.hidden_dim, 1)

    def forward(self, seqs):
        """seqs: (B, L, 3, H, W) -> (behavior (B, hidden), logits (B,))."""
        if seqs.ndim != 5:
            raise DomainError("expected a (B, L, C, H, W) batch")
        if seqs.shape[1] == 0:
            raise DomainError("empty sequence")
        B, L = seqs.shape[:2]
        _, frame_feat = self.trunk(seqs.reshape(B * L, *seqs.shape[2:]))
        _, (h, _) = self.lstm(frame_feat.reshape(B, L, -1))
        behavior = h[-1]
        logits = self.classifier(behavior).squeeze(-1)
        return behavior, logits


def _check_image(model: SurrogateModel, image: torch.Tensor):
    s = model.cfg.input_size
    if image.shape[-3:] != (3, s, s):
        raise DomainError(f"expected (..., 3, {s}, {s}) image, got {tuple(image.shape)}")


def forward_frame(model: SurrogateModel, image: torch.Tensor) -> np.ndarray:
    """Posture embedding of a single image (3, H, W) or batch (N, 3, H, W)."""
    _check_image(model, image)
    single = image.ndim == 3
    if single:
        image = image.unsqueeze(0)
    model.eval()
    with torch.no_grad():
        posture, _ = model.trunk(image)
    out = posture.numpy()
    return out[0] if single else out


def forward_sequence(model: SurrogateModel, frames: torch.Tensor):
    """(behavior embedding, order logit) for one (L, 3, H, W) sequence."""
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise DomainError("expected a non-empty (L, 3, H, W) sequence")
    _check_image(model, frames)
    model.eval()
    with torch.no_grad():
        behavior, logit = model(frames.unsqueeze(0))
    return behavior[0].numpy(), float(logit[0])


# ---------------------------------------------------------------------------
# frame access


class FrameStore:
    """Caches ROI-cropped, resized frames per video as uint8 tensors."""

    def __init__(self, manifest: dataio.CorpusManifest, input_size: int = 64):
        self.manifest = manifest
        self.input_size = input_size
        self._cache = {}

    def video_tensor(self, video_id: str) -> torch.Tensor:
        if video_id not in self._cache:
            boxes = dataio.roi_boxes_for_video(self.manifest, video_id)
            v = self.manifest.video(video_id)
            frames = []
            for i in range(v["n_frames"]):
                img = self.manifest.load_frame(video_id, i)
                img = dataio.crop_and_resize(img, boxes[i], (self.input_size, self.input_size))
                frames.append(np.clip(img * 255.0, 0, 255).astype(np.uint8))
            self._cache[video_id] = torch.from_numpy(np.stack(frames))
        return self._cache[video_id]

    def frames(self, video_id: str, refs) -> torch.Tensor:
        """(L, 3, H, W) float tensor in [0, 1]."""
        vid = self.video_tensor(video_id)
        sel = vid[list(refs)].permute(0, 3, 1, 2).float() / 255.0
        return sel

    def sequence(self, seq: dataio.SequenceSample) -> torch.Tensor:
        return self.frames(seq.video_id, seq.frame_refs)


# ---------------------------------------------------------------------------
# training


def _batch(store: FrameStore, seqs) -> torch.Tensor:
    return torch.stack([store.sequence(s) for s in seqs])


def evaluate_order_accuracy(model: SurrogateModel, store: FrameStore, seqs,
                            rng: np.random.Generator, batch_pairs: int = 24):
    """Accuracy on real sequences plus one permuted twin each."""
    model.eval()
    correct = total = 0
    logits_real, logits_perm = [], []
    with torch.no_grad():
        for i in range(0, len(seqs), batch_pairs):
            chunk = seqs[i:i + batch_pairs]
            twins = [dataio.make_permuted(s, rng) for s in chunk]
            x = _batch(store, list(chunk) + twins)
            _, logits = model(x)
            labels = torch.cat([torch.ones(len(chunk)), torch.zeros(len(twins))])
            correct += int(((logits > 0).float() == labels).sum())
            total += len(labels)
            logits_real.extend(logits[:len(chunk)].tolist())
            logits_perm.extend(logits[len(chunk):].tolist())
    return correct / max(total, 1), float(np.mean(logits_real)), float(np.mean(logits_perm))


def train_surrogate(config: ReprConfig, train_seqs, val_seqs, store: FrameStore):
    """Train the shuffle-detection task; returns (model, log dict).

    Every batch holds batch_size/2 real sequences and their permuted
    twins. SGD with weight decay; early stopping on validation-accuracy
    plateau; the best-validation weights are restored before returning.
    """
    if not train_seqs or not val_seqs:
        raise DomainError("train and val sequence sets must be non-empty")
    torch.manual_seed(config.seed)
    model = SurrogateModel(config)
    opt = torch.optim.SGD(model.parameters(), lr=config.learning_rate,
                          momentum=config.momentum, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    pairs = config.batch_size // 2
    history = []
    best = {"val_acc": -1.0, "state": None, "epoch": -1}
    stale = 0

    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(train_seqs))
        if config.max_sequences_per_epoch:
            order = order[:config.max_sequences_per_epoch]
        losses, accs = [], []
        for i in range(0, len(order) - len(order) % pairs, pairs):
            chunk = [train_seqs[j] for j in order[i:i + pairs]]
            twins = [dataio.make_permuted(s, rng) for s in chunk]
            x = _batch(store, chunk + twins)
            labels = torch.cat([torch.ones(len(chunk)), torch.zeros(len(twins))])
            _, logits = model(x)
            loss = F.binary_cross_entropy_with_logits(logits, labels)
            if not torch.isfinite(loss):
                raise NumericalFailure(f"loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            accs.append(float(((logits > 0).float() == labels).float().mean()))
        val_acc, lr_mean, lp_mean = evaluate_order_accuracy(
            model, store, val_seqs, np.random.default_rng(config.seed + 1))
        history.append({"epoch": epoch, "train_bce": float(np.mean(losses)),
                        "train_acc": float(np.mean(accs)), "val_acc": val_acc,
                        "mean_logit_real": lr_mean, "mean_logit_permuted": lp_mean})
        log.info("epoch %d: bce=%.4f train_acc=%.3f val_acc=%.3f",
                 epoch, history[-1]["train_bce"], history[-1]["train_acc"], val_acc)
        if val_acc > best["val_acc"]:
            best = {"val_acc": val_acc, "epoch": epoch,
                    "state": {k: v.clone() for k, v in model.state_dict().items()}}
            stale = 0
        else:
            stale += 1
        if val_acc >= config.early_stop_acc or stale > config.patience:
            break

    if best["state"] is not None:
        model.load_state_dict(best["state"])
    model.eval()
    return model, {"history": history, "best_epoch": best["epoch"],
                   "best_val_acc": best["val_acc"]}


# ---------------------------------------------------------------------------
# checkpoints


def state_dict_sha256(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name in sorted(module.state_dict()):
        t = module.state_dict()[name]
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: SurrogateModel, log_dict: dict, path):
    payload = {"kind": "reprnet", "config": asdict(model.cfg),
               "state_dict": model.state_dict(), "log": log_dict,
               "trunk_sha256": state_dict_sha256(model.trunk)}
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[SurrogateModel, dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint {path} not found")
    payload = torch.load(path, weights_only=False)
    cfg_d = payload["config"]
    cfg_d["conv_channels"] = tuple(cfg_d["conv_channels"])
    cfg = ReprConfig(**cfg_d)
    model = SurrogateModel(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


# ---------------------------------------------------------------------------
# similarity / retrieval


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("cosine similarity undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


def nearest_neighbors(query, gallery, k: int, exclude=None):
    """Top-k gallery indices by cosine similarity, descending.

    Ties break by ascending gallery index. If k exceeds the usable
    gallery, all of it is returned and `truncated` is flagged.
    """
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    keep = np.arange(len(gallery))
    if exclude is not None:
        keep = np.array([i for i in keep if not exclude(i)], dtype=int)
    if len(keep) == 0:
        raise DomainError("gallery empty after exclusion")
    qn = np.linalg.norm(query)
    if qn == 0:
        raise DomainError("zero query vector")
    g = gallery[keep]
    norms = np.linalg.norm(g, axis=1)
    sims = np.where(norms > 0, g @ query / (np.maximum(norms, 1e-300) * qn), -np.inf)
    truncated = k > len(keep)
    kk = min(k, len(keep))
    order = np.lexsort((keep, -sims))[:kk]
    return {"indices": [int(keep[i]) for i in order],
            "similarities": [float(sims[i]) for i in order],
            "truncated": truncated}


# ---------------------------------------------------------------------------
# corpus encoding


def encode_corpus(model: SurrogateModel, manifest: dataio.CorpusManifest,
                  level: str, out_dir, store: FrameStore | None = None,
                  species_profile=None, batch: int = 256) -> dict:
    """Encode every frame (posture) or every sequence (behavior) and
    persist matrix + ref index. Deterministic: identical inputs rewrite
    identical bytes."""
    if level not in ("frame", "sequence"):
        raise DomainError("level must be 'frame' or 'sequence'")
    store = store or FrameStore(manifest, model.cfg.input_size)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    refs, rows = [], []
    missing = [v["video_id"] for v in manifest.videos
               if not manifest.frame_path(v["video_id"], 0).exists()]
    if missing:
        raise MissingArtifactError(f"missing frames for videos: {missing}")

    with torch.no_grad():
        if level == "frame":
            for v in manifest.videos:
                vid = v["video_id"]
                x = store.frames(vid, range(v["n_frames"]))
                for i in range(0, len(x), batch):
                    posture, _ = model.trunk(x[i:i + batch])
                    rows.append(posture.numpy())
                refs.extend({"video_id": vid, "frame_index": i} for i in range(v["n_frames"]))
        else:
            L = dataio.sequence_length_for(species_profile or model.cfg.seq_len)
            seqs = dataio.sample_sequences(manifest, L)
            for i in range(0, len(seqs), max(1, batch // L)):
                chunk = seqs[i:i + max(1, batch // L)]
                behavior, _ = model(_batch(store, chunk))
                rows.append(behavior.numpy())
            refs = [{"video_id": s.video_id, "start_frame": s.start_frame,
                     "length": s.length} for s in seqs]

    matrix = np.concatenate(rows).astype(np.float32)
    name = f"{level}_embeddings"
    np.save(out_dir / f"{name}.npy", matrix)
    index = {"level": level, "dim": int(matrix.shape[1]), "count": int(matrix.shape[0]),
             "model_sha256": state_dict_sha256(model), "refs": refs}
    (out_dir / f"{name}.json").write_text(json.dumps(index, sort_keys=True))
    return {"matrix": matrix, "index": index,
            "paths": [str(out_dir / f"{name}.npy"), str(out_dir / f"{name}.json")]}


def load_embedding_store(out_dir, level: str):
    out_dir = Path(out_dir)
    name = f"{level}_embeddings"
    npy, js = out_dir / f"{name}.npy", out_dir / f"{name}.json"
    if not npy.exists() or not js.exists():
        raise MissingArtifactError(f"embedding store {name} not found in {out_dir}")
    return {"matrix": np.load(npy), "index": json.loads(js.read_text())}
