"""Evaluation utilities: frozen attribute probes and the metric suites.

The attribute probe is a set of linear softmax classifiers trained on frozen
frame-encoder features of rendered videos; it is the measuring instrument for
generation quality, so it is trained once on real renders and then applied to
model outputs unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from . import perception as pc
from . import synthdata as sd

PROBE_ATTRS = {
    "shape": sd.SHAPES,
    "color": sd.COLOR_NAMES,
    "motion": sd.MOTION_NAMES,
    "background": sd.BACKGROUND_NAMES,
}


def probe_features(encoder: pc.FrameEncoder, video: np.ndarray) -> np.ndarray:
    """[mean frame embedding, mean successive embedding delta] -> [2 * dim]."""
    with nx.no_grad():
        emb = encoder.embed_frames(np.asarray(video, dtype=np.float32)).numpy()
    mean = emb.mean(axis=0)
    if emb.shape[0] > 1:
        delta = np.diff(emb, axis=0).mean(axis=0) * 8.0  # deltas are small; rescale
    else:
        delta = np.zeros_like(mean)
    return np.concatenate([mean, delta]).astype(np.float32)


@dataclass
class AttributeProbe:
    encoder: pc.FrameEncoder
    weights: dict = field(default_factory=dict)  # attr -> (W [F, C], b [C])

    def classify(self, video: np.ndarray) -> dict:
        f = probe_features(self.encoder, video)
        out = {}
        for attr, names in PROBE_ATTRS.items():
            w, b = self.weights[attr]
            out[attr] = names[int(np.argmax(f @ w + b))]
        return out

    def accuracy(self, videos: list[np.ndarray], specs: list[sd.SceneSpec],
                 attrs: tuple[str, ...] = ("shape", "color", "motion")) -> dict:
        hits = {a: 0 for a in attrs}
        for video, spec in zip(videos, specs):
            pred = self.classify(video)
            for a in attrs:
                hits[a] += int(pred[a] == getattr(spec, a))
        return {a: hits[a] / max(1, len(videos)) for a in attrs}


def train_probe(encoder: pc.FrameEncoder, *, n_train: int = 600, frames: int = 8,
                steps: int = 300, lr: float = 0.1, seed: int = 515) -> AttributeProbe:
    rng = np.random.default_rng(seed)
    specs = [sd.random_spec(rng) for _ in range(n_train)]
    feats = np.stack([probe_features(encoder, sd.render(s, frames)) for s in specs])
    x = nx.Tensor(feats)
    probe = AttributeProbe(encoder=encoder)
    for attr, names in PROBE_ATTRS.items():
        targets = np.array([names.index(getattr(s, attr)) for s in specs])
        w = nx.Parameter(np.zeros((feats.shape[1], len(names)), dtype=np.float32))
        b = nx.Parameter(np.zeros(len(names), dtype=np.float32))
        w.name, b.name = f"probe.{attr}.w", f"probe.{attr}.b"
        opt = nx.AdamW([w, b], lr=lr, weight_decay=1e-4)
        for _ in range(steps):
            opt.zero_grad()
            logits = nx.add(nx.matmul(x, w.tensor), b.tensor)
            loss = nx.cross_entropy(logits, targets)
            loss.backward()
            opt.step()
        probe.weights[attr] = (w.data.copy(), b.data.copy())
    return probe


def probe_accuracy_on_renders(probe: AttributeProbe, *, n: int = 200, frames: int = 8,
                              seed: int = 616, attrs=("shape", "color", "motion", "background")) -> dict:
    rng = np.random.default_rng(seed)
    specs = [sd.random_spec(rng) for _ in range(n)]
    videos = [sd.render(s, frames) for s in specs]
    return probe.accuracy(videos, specs, attrs=attrs)


def linear_probe_shape_accuracy(encoder: pc.FrameEncoder, *, n_train: int = 400,
                                n_test: int = 200, seed: int = 717,
                                steps: int = 300, lr: float = 0.1) -> float:
    """Single-frame shape probe used as the encoder pretraining gate."""
    rng = np.random.default_rng(seed)

    def batch(n):
        specs = [sd.random_spec(rng) for _ in range(n)]
        feats = []
        for s in specs:
            t = int(rng.integers(0, 8))
            frame = sd.render(s, t + 1)[t]
            with nx.no_grad():
                feats.append(encoder.embed_frames(frame[None]).numpy()[0])
        y = np.array([sd.SHAPES.index(s.shape) for s in specs])
        return np.stack(feats), y

    xtr, ytr = batch(n_train)
    xte, yte = batch(n_test)
    w = nx.Parameter(np.zeros((xtr.shape[1], 3), dtype=np.float32))
    b = nx.Parameter(np.zeros(3, dtype=np.float32))
    w.name, b.name = "probe.w", "probe.b"
    opt = nx.AdamW([w, b], lr=lr, weight_decay=1e-4)
    xt = nx.Tensor(xtr)
    for _ in range(steps):
        opt.zero_grad()
        loss = nx.cross_entropy(nx.add(nx.matmul(xt, w.tensor), b.tensor), ytr)
        loss.backward()
        opt.step()
    pred = np.argmax(xte @ w.data + b.data, axis=1)
    return float((pred == yte).mean())
